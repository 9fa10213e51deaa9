use serde::{Deserialize, Serialize};

use super::ValueType;
use crate::shape::ShapeDim;
use crate::stream::DType;
use crate::sym::{Bindings, SymExpr};

/// Kernels accepted by `Map`, `Accum`, `Scan` and `FlatMap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum FnSpec {
    /// `identity`, `silu`, `exp` or `relu`, applied per element.
    Unary { name: String },
    /// `add`, `mul`, `sub` or `max` over a pair of equally sized tiles.
    Binary { name: String },
    /// `(A[m,k], B[k,n]) -> A*B`.
    MatMul,
    /// `(A[m,k], B[n,k]) -> A*B^T`.
    MatMulTransB,
    /// Accumulating `MatMul`.
    MatMulAccumulate,
    /// Elementwise tile sum.
    Sum,
    /// Stacks incoming row tiles into one taller tile.
    RetileRow,
    /// Counts `false` padding flags into a `[1,1]` integer tile.
    CountValid,
    /// Counts the values of any type into a `[1,1]` integer tile.
    Count,
    /// Splits a tile into its rows; a `(tile, count)` pair keeps only the first `count` rows.
    RetileStreamify,
    /// Emits `reps` rounds of one-hot selectors `0..n`.
    RoundRobinEmit { n: usize, reps: usize },
    /// Running row maximum of score tiles.
    RunningMax,
    /// Online softmax-weighted value sum over `(scores, running max, values)`.
    SoftmaxAccumulate,
    /// `(o, l, m) -> o / l`.
    NormalizeAttention,
    TupleGet { index: usize },
    /// One-hot selector over a group of experts -> that expert's weight tile indices.
    WeightTileAddrs { experts: Vec<usize>, tiles_per_expert: usize },
    /// Request id -> the request's KV tile indices.
    KvTileAddrs { starts: Vec<i64>, counts: Vec<i64> },
    /// Tile -> grid of `[rows, cols]` sub-tiles.
    SplitTile { rows: usize, cols: usize, grid: [usize; 2] },
    /// Inverse of `SplitTile` as an accumulation over the sub-tile grid.
    AssembleGrid { grid: [usize; 2] },
    /// Declared output type with a FLOPs formula over the input tile's `rows` and `cols`.
    Custom { name: String, flops: SymExpr, output: ValueType },
}

fn tile_parts(t: &ValueType) -> Option<(SymExpr, SymExpr, DType)> {
    match t {
        ValueType::Tile { rows, cols, dtype } => Some((rows.clone(), cols.clone(), *dtype)),
        _ => None,
    }
}

fn tuple_tiles(t: &ValueType, n: usize) -> Option<Vec<(SymExpr, SymExpr, DType)>> {
    match t {
        ValueType::Tuple { items } if items.len() == n => items.iter().map(tile_parts).collect(),
        _ => None,
    }
}

fn unary_flops_per_elem(name: &str) -> Option<i64> {
    Some(match name {
        "identity" => 0,
        "relu" | "exp" => 1,
        "silu" => 4,
        _ => return None,
    })
}

impl FnSpec {
    pub fn unary(name: &str) -> Self {
        FnSpec::Unary { name: name.to_string() }
    }

    pub fn binary(name: &str) -> Self {
        FnSpec::Binary { name: name.to_string() }
    }

    pub fn label(&self) -> String {
        match self {
            FnSpec::Unary { name } | FnSpec::Binary { name } | FnSpec::Custom { name, .. } => name.clone(),
            other => format!("{other:?}").split([' ', '{']).next().unwrap_or("").to_string(),
        }
    }

    pub fn is_matmul(&self) -> bool {
        matches!(
            self,
            FnSpec::MatMul | FnSpec::MatMulTransB | FnSpec::MatMulAccumulate | FnSpec::SoftmaxAccumulate
        )
    }

    /// Whether the kernel ever performs arithmetic.
    pub fn bears_flops(&self) -> bool {
        match self {
            FnSpec::Unary { name } => name != "identity",
            FnSpec::Custom { flops, .. } => !flops.is_zero(),
            FnSpec::RetileRow
            | FnSpec::CountValid
            | FnSpec::Count
            | FnSpec::RetileStreamify
            | FnSpec::RoundRobinEmit { .. }
            | FnSpec::TupleGet { .. }
            | FnSpec::WeightTileAddrs { .. }
            | FnSpec::KvTileAddrs { .. }
            | FnSpec::SplitTile { .. }
            | FnSpec::AssembleGrid { .. } => false,
            _ => true,
        }
    }

    /// Result type of one `Map` application (or the carried state for `Scan`).
    pub fn output_type(&self, input: &ValueType) -> Result<ValueType, String> {
        let bad = || format!("{} does not accept {:?}", self.label(), input);
        match self {
            FnSpec::Unary { name } => {
                unary_flops_per_elem(name).ok_or_else(|| format!("unknown unary kernel `{name}`"))?;
                tile_parts(input).ok_or_else(bad)?;
                Ok(input.clone())
            }
            FnSpec::Binary { name } => {
                if !matches!(name.as_str(), "add" | "mul" | "sub" | "max") {
                    return Err(format!("unknown binary kernel `{name}`"));
                }
                let t = tuple_tiles(input, 2).ok_or_else(bad)?;
                if t[0].0 != t[1].0 || t[0].1 != t[1].1 {
                    return Err(bad());
                }
                let (r, c, d) = t[0].clone();
                Ok(ValueType::Tile { rows: r, cols: c, dtype: d })
            }
            FnSpec::MatMul | FnSpec::MatMulAccumulate => {
                let t = tuple_tiles(input, 2).ok_or_else(bad)?;
                if t[0].1 != t[1].0 {
                    return Err(format!("matmul inner dims {} vs {}", t[0].1, t[1].0));
                }
                Ok(ValueType::Tile { rows: t[0].0.clone(), cols: t[1].1.clone(), dtype: t[0].2 })
            }
            FnSpec::MatMulTransB => {
                let t = tuple_tiles(input, 2).ok_or_else(bad)?;
                if t[0].1 != t[1].1 {
                    return Err(format!("matmul inner dims {} vs {}", t[0].1, t[1].1));
                }
                Ok(ValueType::Tile { rows: t[0].0.clone(), cols: t[1].0.clone(), dtype: DType::F32 })
            }
            FnSpec::Sum => {
                tile_parts(input).ok_or_else(bad)?;
                Ok(input.clone())
            }
            FnSpec::RetileRow => {
                tile_parts(input).ok_or_else(bad)?;
                Ok(input.clone())
            }
            FnSpec::CountValid => match input {
                ValueType::Bool => Ok(ValueType::tile(1, 1, DType::I32)),
                _ => Err(bad()),
            },
            FnSpec::Count => Ok(ValueType::tile(1, 1, DType::I32)),
            FnSpec::RetileStreamify => {
                let (_, c, d) = match input {
                    ValueType::Tuple { items } if items.len() == 2 => tile_parts(&items[0]).ok_or_else(bad)?,
                    other => tile_parts(other).ok_or_else(bad)?,
                };
                Ok(ValueType::Tile { rows: SymExpr::one(), cols: c, dtype: d })
            }
            FnSpec::RoundRobinEmit { n, .. } => Ok(ValueType::Selector { width: *n }),
            FnSpec::RunningMax => {
                let (r, _, _) = tile_parts(input).ok_or_else(bad)?;
                Ok(ValueType::Tile { rows: r, cols: SymExpr::one(), dtype: DType::F32 })
            }
            FnSpec::SoftmaxAccumulate => {
                let t = tuple_tiles(input, 3).ok_or_else(bad)?;
                let (g, v_cols) = (t[0].0.clone(), t[2].1.clone());
                Ok(ValueType::Tuple {
                    items: vec![
                        ValueType::Tile { rows: g.clone(), cols: v_cols, dtype: DType::F32 },
                        ValueType::Tile { rows: g.clone(), cols: SymExpr::one(), dtype: DType::F32 },
                        ValueType::Tile { rows: g, cols: SymExpr::one(), dtype: DType::F32 },
                    ],
                })
            }
            FnSpec::NormalizeAttention => {
                let t = tuple_tiles(input, 3).ok_or_else(bad)?;
                Ok(ValueType::Tile { rows: t[0].0.clone(), cols: t[0].1.clone(), dtype: DType::Bf16 })
            }
            FnSpec::TupleGet { index } => match input {
                ValueType::Tuple { items } if *index < items.len() => Ok(items[*index].clone()),
                _ => Err(bad()),
            },
            FnSpec::WeightTileAddrs { experts, .. } => match input {
                ValueType::Selector { width } if *width == experts.len() => Ok(ValueType::Addr),
                _ => Err(bad()),
            },
            FnSpec::KvTileAddrs { .. } => match input {
                ValueType::Addr => Ok(ValueType::Addr),
                _ => Err(bad()),
            },
            FnSpec::SplitTile { rows, cols, grid } => {
                let (r, c, d) = tile_parts(input).ok_or_else(bad)?;
                if r != SymExpr::from(rows * grid[0]) || c != SymExpr::from(cols * grid[1]) {
                    return Err(format!("tile {r}x{c} is not a {}x{} grid of {rows}x{cols}", grid[0], grid[1]));
                }
                Ok(ValueType::tile(*rows, *cols, d))
            }
            FnSpec::AssembleGrid { .. } => {
                tile_parts(input).ok_or_else(bad)?;
                Ok(input.clone())
            }
            FnSpec::Custom { output, .. } => Ok(output.clone()),
        }
    }

    /// Result type of an `Accum` whose reduced dims are `reduced` (outermost first).
    pub fn accum_type(&self, input: &ValueType, reduced: &[ShapeDim]) -> Result<ValueType, String> {
        match self {
            FnSpec::RetileRow => {
                let (r, c, d) = tile_parts(input).ok_or("RetileRow needs tiles")?;
                let n = reduced.iter().fold(SymExpr::one(), |acc, dim| acc.mul(dim.expr()));
                Ok(ValueType::Tile { rows: r.mul(n), cols: c, dtype: d })
            }
            FnSpec::AssembleGrid { grid } => {
                let (r, c, d) = tile_parts(input).ok_or("AssembleGrid needs tiles")?;
                Ok(ValueType::Tile {
                    rows: r.mul(grid[0] as i64),
                    cols: c.mul(grid[1] as i64),
                    dtype: d,
                })
            }
            FnSpec::Sum
            | FnSpec::MatMulAccumulate
            | FnSpec::CountValid
            | FnSpec::Count
            | FnSpec::SoftmaxAccumulate
            | FnSpec::Custom { .. } => self.output_type(input),
            FnSpec::Binary { .. } => self.output_type(input),
            other => Err(format!("{} is not an accumulation", other.label())),
        }
    }

    /// Fixed extents of the stream one `FlatMap` application emits, outermost
    /// first; `None` marks an extent only known at runtime.
    pub fn flat_extents(&self) -> Option<Vec<Option<i64>>> {
        match self {
            FnSpec::RetileStreamify => Some(vec![None]),
            FnSpec::RoundRobinEmit { n, reps } => Some(vec![Some((n * reps) as i64)]),
            FnSpec::WeightTileAddrs { tiles_per_expert, .. } => Some(vec![Some(1), Some(*tiles_per_expert as i64)]),
            FnSpec::KvTileAddrs { .. } => Some(vec![Some(1), None]),
            FnSpec::SplitTile { grid, .. } => Some(vec![Some(1), Some(grid[0] as i64), Some(grid[1] as i64)]),
            _ => None,
        }
    }

    /// FLOPs of one application to a value of type `input`.
    pub fn flops(&self, input: &ValueType) -> SymExpr {
        let elems = |t: &ValueType| match tile_parts(t) {
            Some((r, c, _)) => r.mul(c),
            None => SymExpr::zero(),
        };
        match self {
            FnSpec::Unary { name } => elems(input).mul(unary_flops_per_elem(name).unwrap_or(0)),
            FnSpec::Binary { .. } => match input {
                ValueType::Tuple { items } => elems(&items[0]),
                _ => SymExpr::zero(),
            },
            FnSpec::MatMul | FnSpec::MatMulAccumulate => match tuple_tiles(input, 2) {
                Some(t) => SymExpr::product(vec![SymExpr::c(2), t[0].0.clone(), t[0].1.clone(), t[1].1.clone()]),
                None => SymExpr::zero(),
            },
            FnSpec::MatMulTransB => match tuple_tiles(input, 2) {
                Some(t) => SymExpr::product(vec![SymExpr::c(2), t[0].0.clone(), t[0].1.clone(), t[1].0.clone()]),
                None => SymExpr::zero(),
            },
            FnSpec::Sum | FnSpec::RunningMax => elems(input),
            FnSpec::SoftmaxAccumulate => match tuple_tiles(input, 3) {
                Some(t) => {
                    let gt = t[0].0.clone().mul(t[0].1.clone());
                    SymExpr::sum(vec![
                        SymExpr::product(vec![SymExpr::c(2), gt.clone(), t[2].1.clone()]),
                        gt.mul(4i64),
                    ])
                }
                None => SymExpr::zero(),
            },
            FnSpec::NormalizeAttention => match tuple_tiles(input, 3) {
                Some(t) => t[0].0.clone().mul(t[0].1.clone()),
                None => SymExpr::zero(),
            },
            FnSpec::Custom { flops, .. } => {
                let (r, c) = match tile_parts(input) {
                    Some((r, c, _)) => (r, c),
                    None => (SymExpr::one(), SymExpr::one()),
                };
                flops.map_symbols(&|s| match s {
                    "rows" => Some(r.clone()),
                    "cols" => Some(c.clone()),
                    _ => None,
                })
            }
            _ => SymExpr::zero(),
        }
    }

    /// Concrete FLOPs for a value whose type is fully static.
    pub fn flops_concrete(&self, input: &ValueType) -> u64 {
        self.flops(input).eval(&Bindings::new()).unwrap_or(0) as u64
    }

    /// `(input tile columns, weight tile bytes)` for matmul kernels.
    pub fn matmul_operands(&self, input: &ValueType) -> Option<(SymExpr, DType, SymExpr)> {
        if !self.is_matmul() {
            return None;
        }
        let items = match input {
            ValueType::Tuple { items } => items,
            _ => return None,
        };
        let (_, a_cols, a_dt) = tile_parts(&items[0])?;
        let w = items.last()?;
        Some((a_cols, a_dt, w.bytes()))
    }
}
