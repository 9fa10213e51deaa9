//! Functional semantics of [`FnSpec`] kernels over runtime values.

use crate::graph::{FnSpec, ValueType};
use crate::stream::{DType, Selector, StreamValue, Tile, Token};

pub type KernelResult<T> = Result<T, String>;

/// Static type of a concrete value.
pub fn value_type(v: &StreamValue) -> ValueType {
    match v {
        StreamValue::Tile(t) => ValueType::tile(t.rows, t.cols, t.dtype),
        StreamValue::Selector(s) => ValueType::Selector { width: s.width() },
        StreamValue::Buffer(b) => ValueType::Buffer {
            elem: Box::new(ValueType::Bool),
            dims: b.dims.iter().map(|d| (*d as i64).into()).collect(),
        },
        StreamValue::Bool(_) => ValueType::Bool,
        StreamValue::Addr(_) => ValueType::Addr,
        StreamValue::Tuple(items) => ValueType::Tuple { items: items.iter().map(value_type).collect() },
    }
}

/// FLOPs of one application of `f` to `v`.
pub fn flops(f: &FnSpec, v: &StreamValue) -> u64 {
    f.flops_concrete(&value_type(v))
}

fn tile(v: &StreamValue, what: &str) -> KernelResult<Tile> {
    v.as_tile().cloned().ok_or_else(|| format!("{what}: expected a tile, got {}", short(v)))
}

fn short(v: &StreamValue) -> String {
    match v {
        StreamValue::Tile(t) => format!("tile[{},{}]", t.rows, t.cols),
        StreamValue::Selector(s) => format!("selector[{}]", s.width()),
        StreamValue::Buffer(_) => "buffer".into(),
        StreamValue::Bool(_) => "bool".into(),
        StreamValue::Addr(_) => "addr".into(),
        StreamValue::Tuple(v) => format!("tuple({})", v.iter().map(short).collect::<Vec<_>>().join(",")),
    }
}

fn items<'a>(v: &'a StreamValue, n: usize, what: &str) -> KernelResult<&'a [StreamValue]> {
    match v {
        StreamValue::Tuple(items) if items.len() == n => Ok(items),
        other => Err(format!("{what}: expected a {n}-tuple, got {}", short(other))),
    }
}

fn zip_with(a: &Tile, b: &Tile, f: impl Fn(f32, f32) -> f32) -> KernelResult<Tile> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(format!("tile shapes [{},{}] and [{},{}] differ", a.rows, a.cols, b.rows, b.cols));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Ok(Tile::new(a.rows, a.cols, a.dtype, data))
}

pub fn matmul(a: &Tile, b: &Tile, trans_b: bool) -> KernelResult<Tile> {
    let (m, k) = (a.rows, a.cols);
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != kb {
        return Err(format!("matmul inner dims {k} vs {kb}"));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                let bv = if trans_b { b.data[j * b.cols + p] } else { b.data[p * b.cols + j] };
                acc += a.data[i * k + p] * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tile::new(m, n, a.dtype, out))
}

fn unary(name: &str, x: f32) -> f32 {
    match name {
        "silu" => x / (1.0 + (-x).exp()),
        "exp" => x.exp(),
        "relu" => x.max(0.0),
        _ => x,
    }
}

fn row_reduce(t: &Tile, init: f32, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    (0..t.rows).map(|r| t.row(r).iter().fold(init, |a, x| f(a, *x))).collect()
}

/// `Map` and `Scan`-free single application.
pub fn apply(f: &FnSpec, v: &StreamValue) -> KernelResult<StreamValue> {
    Ok(match f {
        FnSpec::Unary { name } => {
            let t = tile(v, name)?;
            let data = t.data.iter().map(|x| unary(name, *x)).collect();
            StreamValue::Tile(Tile::new(t.rows, t.cols, t.dtype, data))
        }
        FnSpec::Binary { name } => {
            let it = items(v, 2, name)?;
            let (a, b) = (tile(&it[0], name)?, tile(&it[1], name)?);
            let op: fn(f32, f32) -> f32 = match name.as_str() {
                "add" => |x, y| x + y,
                "mul" => |x, y| x * y,
                "sub" => |x, y| x - y,
                "max" => f32::max,
                other => return Err(format!("unknown binary kernel `{other}`")),
            };
            StreamValue::Tile(zip_with(&a, &b, op)?)
        }
        FnSpec::MatMul | FnSpec::MatMulTransB => {
            let it = items(v, 2, "matmul")?;
            let (a, b) = (tile(&it[0], "matmul")?, tile(&it[1], "matmul")?);
            let mut out = matmul(&a, &b, matches!(f, FnSpec::MatMulTransB))?;
            if matches!(f, FnSpec::MatMulTransB) {
                out.dtype = DType::F32;
            }
            StreamValue::Tile(out)
        }
        FnSpec::NormalizeAttention => {
            let it = items(v, 3, "normalize")?;
            let (o, l) = (tile(&it[0], "normalize")?, tile(&it[1], "normalize")?);
            let mut data = o.data.clone();
            for r in 0..o.rows {
                for c in 0..o.cols {
                    data[r * o.cols + c] /= l.data[r];
                }
            }
            StreamValue::Tile(Tile::new(o.rows, o.cols, DType::Bf16, data))
        }
        FnSpec::TupleGet { index } => match v {
            StreamValue::Tuple(it) if *index < it.len() => it[*index].clone(),
            other => return Err(format!("tuple_get({index}) on {}", short(other))),
        },
        FnSpec::Custom { output, .. } => match output.static_tile() {
            Some((r, c, d)) if Some((r, c, d)) != value_type(v).static_tile() => StreamValue::Tile(Tile::zeros(r, c, d)),
            _ => v.clone(),
        },
        other => return Err(format!("{} cannot be used with Map", other.label())),
    })
}

/// One `Accum` update; `acc` is `None` at the start of each reduction.
pub fn accum_update(f: &FnSpec, acc: Option<StreamValue>, v: &StreamValue) -> KernelResult<StreamValue> {
    Ok(match f {
        FnSpec::Sum => {
            let x = tile(v, "sum")?;
            match acc {
                None => StreamValue::Tile(x),
                Some(a) => StreamValue::Tile(zip_with(&tile(&a, "sum")?, &x, |p, q| p + q)?),
            }
        }
        FnSpec::Binary { .. } => match acc {
            None => v.clone(),
            Some(a) => apply(f, &StreamValue::Tuple(vec![a, v.clone()]))?,
        },
        FnSpec::MatMulAccumulate => {
            let prod = apply(&FnSpec::MatMul, v)?;
            match acc {
                None => prod,
                Some(a) => StreamValue::Tile(zip_with(&tile(&a, "accumulate")?, &tile(&prod, "accumulate")?, |p, q| p + q)?),
            }
        }
        FnSpec::RetileRow => {
            let x = tile(v, "retile_row")?;
            match acc {
                None => StreamValue::Tile(x),
                Some(a) => {
                    let mut a = tile(&a, "retile_row")?;
                    if a.cols != x.cols {
                        return Err("retile_row column mismatch".into());
                    }
                    a.data.extend_from_slice(&x.data);
                    a.rows += x.rows;
                    StreamValue::Tile(a)
                }
            }
        }
        FnSpec::CountValid => {
            let pad = match v {
                StreamValue::Bool(b) => *b,
                other => return Err(format!("count_valid on {}", short(other))),
            };
            let prev = match &acc {
                Some(a) => tile(a, "count_valid")?.data[0],
                None => 0.0,
            };
            StreamValue::Tile(Tile::scalar(prev + if pad { 0.0 } else { 1.0 }, DType::I32))
        }
        FnSpec::Count => {
            let prev = match &acc {
                Some(a) => tile(a, "count")?.data[0],
                None => 0.0,
            };
            StreamValue::Tile(Tile::scalar(prev + 1.0, DType::I32))
        }
        FnSpec::SoftmaxAccumulate => {
            let it = items(v, 3, "softmax")?;
            let (s, m, val) = (tile(&it[0], "softmax")?, tile(&it[1], "softmax")?, tile(&it[2], "softmax")?);
            let (g, d) = (s.rows, val.cols);
            let (mut o, mut l, m_old) = match acc {
                None => (Tile::zeros(g, d, DType::F32), Tile::zeros(g, 1, DType::F32), vec![f32::NEG_INFINITY; g]),
                Some(a) => {
                    let st = items(&a, 3, "softmax state")?;
                    (tile(&st[0], "o")?, tile(&st[1], "l")?, tile(&st[2], "m")?.data)
                }
            };
            let mut p = s.clone();
            for r in 0..g {
                let scale = (m_old[r] - m.data[r]).exp();
                for c in 0..s.cols {
                    p.data[r * s.cols + c] = (s.data[r * s.cols + c] - m.data[r]).exp();
                }
                l.data[r] = l.data[r] * scale + p.row(r).iter().sum::<f32>();
                for c in 0..d {
                    o.data[r * d + c] *= scale;
                }
            }
            let pv = matmul(&p, &val, false)?;
            for (x, y) in o.data.iter_mut().zip(&pv.data) {
                *x += y;
            }
            let mut m_new = m.clone();
            m_new.dtype = DType::F32;
            StreamValue::Tuple(vec![StreamValue::Tile(o), StreamValue::Tile(l), StreamValue::Tile(m_new)])
        }
        FnSpec::AssembleGrid { .. } => {
            let mut parts = match acc {
                None => Vec::new(),
                Some(StreamValue::Tuple(p)) => p,
                Some(other) => return Err(format!("assemble_grid state {}", short(&other))),
            };
            parts.push(v.clone());
            StreamValue::Tuple(parts)
        }
        FnSpec::Custom { .. } => apply(f, v)?,
        other => return Err(format!("{} cannot be used with Accum", other.label())),
    })
}

/// Converts the final accumulator into the emitted value.
pub fn accum_finish(f: &FnSpec, acc: StreamValue) -> KernelResult<StreamValue> {
    match f {
        FnSpec::AssembleGrid { grid } => {
            let parts = match &acc {
                StreamValue::Tuple(p) => p,
                other => return Err(format!("assemble_grid state {}", short(other))),
            };
            if parts.len() != grid[0] * grid[1] {
                return Err(format!("assemble_grid expected {} parts, got {}", grid[0] * grid[1], parts.len()));
            }
            let first = tile(&parts[0], "assemble_grid")?;
            let (pr, pc) = (first.rows, first.cols);
            let (rows, cols) = (pr * grid[0], pc * grid[1]);
            let mut data = vec![0.0; rows * cols];
            for (i, p) in parts.iter().enumerate() {
                let t = tile(p, "assemble_grid")?;
                let (gr, gc) = (i / grid[1], i % grid[1]);
                for r in 0..pr {
                    let dst = (gr * pr + r) * cols + gc * pc;
                    data[dst..dst + pc].copy_from_slice(t.row(r));
                }
            }
            Ok(StreamValue::Tile(Tile::new(rows, cols, first.dtype, data)))
        }
        _ => Ok(acc),
    }
}

/// One `Scan` step; returns the new state, which is also the emitted value.
pub fn scan_update(f: &FnSpec, state: Option<StreamValue>, v: &StreamValue) -> KernelResult<StreamValue> {
    match f {
        FnSpec::RunningMax => {
            let s = tile(v, "running_max")?;
            let rowmax = row_reduce(&s, f32::NEG_INFINITY, f32::max);
            let data = match state {
                None => rowmax,
                Some(p) => tile(&p, "running_max")?.data.iter().zip(rowmax).map(|(a, b)| a.max(b)).collect(),
            };
            Ok(StreamValue::Tile(Tile::new(s.rows, 1, DType::F32, data)))
        }
        _ => accum_update(f, state, v),
    }
}

/// Body of the rank-`b` stream one `FlatMap` application emits, in expanded form without `Done`.
pub fn flat_apply(f: &FnSpec, v: &StreamValue) -> KernelResult<Vec<Token>> {
    let val = |x: StreamValue| Token::Value(x);
    Ok(match f {
        FnSpec::RetileStreamify => {
            let (t, keep) = match v {
                StreamValue::Tuple(it) if it.len() == 2 => {
                    let t = tile(&it[0], "retile_streamify")?;
                    let n = tile(&it[1], "retile_streamify")?.data[0] as usize;
                    (t, n)
                }
                other => {
                    let t = tile(other, "retile_streamify")?;
                    let n = t.rows;
                    (t, n)
                }
            };
            if keep > t.rows {
                return Err(format!("retile_streamify keeps {keep} of {} rows", t.rows));
            }
            (0..keep).map(|r| val(StreamValue::Tile(Tile::new(1, t.cols, t.dtype, t.row(r).to_vec())))).collect()
        }
        FnSpec::RoundRobinEmit { n, reps } => {
            (0..n * reps).map(|i| val(StreamValue::Selector(Selector::one_hot(*n, i % n)))).collect()
        }
        FnSpec::WeightTileAddrs { experts, tiles_per_expert } => {
            let s = v.as_selector().ok_or("weight_tile_addrs needs a selector")?;
            if s.count() != 1 {
                return Err("weight_tile_addrs needs a one-hot selector".into());
            }
            let e = experts[s.indices().next().unwrap()] as i64;
            let tpe = *tiles_per_expert as i64;
            let mut out: Vec<Token> = (0..tpe).map(|j| val(StreamValue::Addr(e * tpe + j))).collect();
            out.push(Token::Stop(1));
            out
        }
        FnSpec::KvTileAddrs { starts, counts } => {
            let id = v.as_addr().ok_or("kv_tile_addrs needs an address")? as usize;
            let (s, n) = (
                *starts.get(id).ok_or_else(|| format!("request {id} out of range"))?,
                counts[id],
            );
            let mut out: Vec<Token> = (0..n).map(|j| val(StreamValue::Addr(s + j))).collect();
            out.push(Token::Stop(1));
            out
        }
        FnSpec::SplitTile { rows, cols, grid } => {
            let t = tile(v, "split_tile")?;
            if t.rows != rows * grid[0] || t.cols != cols * grid[1] {
                return Err(format!("split_tile: [{},{}] is not a {:?} grid of [{rows},{cols}]", t.rows, t.cols, grid));
            }
            let mut out = Vec::new();
            for gr in 0..grid[0] {
                for gc in 0..grid[1] {
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..*rows {
                        let start = (gr * rows + r) * t.cols + gc * cols;
                        data.extend_from_slice(&t.data[start..start + cols]);
                    }
                    out.push(val(StreamValue::Tile(Tile::new(*rows, *cols, t.dtype, data))));
                }
                out.push(Token::Stop(1));
            }
            out.push(Token::Stop(2));
            out
        }
        other => return Err(format!("{} cannot be used with FlatMap", other.label())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f32]) -> StreamValue {
        StreamValue::Tile(Tile::new(rows, cols, DType::Bf16, data.to_vec()))
    }

    #[test]
    fn matmul_small() {
        let a = Tile::new(2, 2, DType::Bf16, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tile::new(2, 2, DType::Bf16, vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b, false).unwrap().data, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, &b, true).unwrap().data, vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn sum_accumulates() {
        let mut acc = None;
        for x in [1.0, 2.0, 3.0] {
            acc = Some(accum_update(&FnSpec::Sum, acc, &t(1, 1, &[x])).unwrap());
        }
        assert_eq!(acc.unwrap(), t(1, 1, &[6.0]));
    }

    #[test]
    fn split_then_assemble_is_identity() {
        let data: Vec<f32> = (0..16).map(|x| x as f32).collect();
        let big = t(4, 4, &data);
        let f = FnSpec::SplitTile { rows: 2, cols: 2, grid: [2, 2] };
        let toks = flat_apply(&f, &big).unwrap();
        let mut acc = None;
        for tok in &toks {
            if let Token::Value(v) = tok {
                acc = Some(accum_update(&FnSpec::AssembleGrid { grid: [2, 2] }, acc, v).unwrap());
            }
        }
        let back = accum_finish(&FnSpec::AssembleGrid { grid: [2, 2] }, acc.unwrap()).unwrap();
        assert_eq!(back, big);
    }

    #[test]
    fn online_softmax_matches_dense() {
        // one query row, two key tiles of width 2, values of width 1
        let scores = [[0.5f32, 1.5], [2.0, -1.0]];
        let values = [[1.0f32, 2.0], [3.0, 4.0]];
        let mut run_max = None;
        let mut acc = None;
        for i in 0..2 {
            let s = t(1, 2, &scores[i]);
            run_max = Some(scan_update(&FnSpec::RunningMax, run_max, &s).unwrap());
            let v = t(2, 1, &values[i]);
            let tuple = StreamValue::Tuple(vec![s, run_max.clone().unwrap(), v]);
            acc = Some(accum_update(&FnSpec::SoftmaxAccumulate, acc, &tuple).unwrap());
        }
        let out = apply(&FnSpec::NormalizeAttention, &acc.unwrap()).unwrap();
        let flat_s = [0.5f32, 1.5, 2.0, -1.0];
        let flat_v = [1.0f32, 2.0, 3.0, 4.0];
        let m = flat_s.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let w: Vec<f32> = flat_s.iter().map(|s| (s - m).exp()).collect();
        let want = w.iter().zip(flat_v).map(|(a, b)| a * b).sum::<f32>() / w.iter().sum::<f32>();
        assert!((out.as_tile().unwrap().data[0] - want).abs() < 1e-5);
    }

    #[test]
    fn retile_streamify_drops_padding() {
        let packed = StreamValue::Tuple(vec![t(3, 1, &[1.0, 2.0, 0.0]), StreamValue::Tile(Tile::scalar(2.0, DType::I32))]);
        let rows = flat_apply(&FnSpec::RetileStreamify, &packed).unwrap();
        assert_eq!(rows.len(), 2);
    }
}
