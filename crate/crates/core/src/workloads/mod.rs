//! Graph constructors for the SwiGLU expert, mixture-of-experts layers and
//! grouped-query attention, a hierarchical tiling rewrite, and trace plumbing.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cost::{analyze, CostConfig, CostError, CostReport, EvaluatedCost};
use crate::graph::{infer_shapes, ChannelId, ChannelInfo, Graph, InferError, ValueType};
use crate::sim::{self, OffChipMemory, SimConfig, SimError, SimResult};
use crate::stream::{detokenize, ObservedDim, StreamValue, Token};
use crate::sym::{Bindings, SymExpr};

pub mod gqa;
pub mod moe;
pub mod swiglu;
pub mod tiling;
pub mod traces;

pub use gqa::{build_gqa, GqaConfig, Strategy};
pub use moe::{build_moe, MoeConfig, Tiling};
pub use swiglu::{build_swiglu, SwigluConfig};
pub use tiling::hierarchical_tiling_transform;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Trace(#[from] traces::TraceError),
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T, WorkloadError> {
    Err(WorkloadError::Config(msg.into()))
}

/// Where a workload leaves its result: a row-major `[rows, cols]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputRegion {
    pub base: u64,
    pub rows: usize,
    pub cols: usize,
}

/// A graph ready to simulate, with its inputs, memory image, the symbol
/// bindings implied by its trace, and a dense reference result.
#[derive(Debug, Clone)]
pub struct Workload {
    pub name: String,
    pub graph: Graph,
    pub inputs: HashMap<ChannelId, Vec<Token>>,
    pub memory: OffChipMemory,
    pub bindings: Bindings,
    pub output: OutputRegion,
    pub reference: Vec<f32>,
    /// Present when symbol values depend on runtime dispatch decisions.
    pub dispatch: Option<gqa::DispatchLog>,
}

impl Workload {
    pub fn simulate(&self, cfg: &SimConfig) -> Result<SimResult, SimError> {
        sim::run(&self.graph, cfg, &self.inputs, self.memory.clone())
    }

    pub fn infos(&self) -> Result<Vec<ChannelInfo>, InferError> {
        infer_shapes(&self.graph)
    }

    pub fn cost(&self, cfg: &CostConfig) -> Result<(CostReport, EvaluatedCost), WorkloadError> {
        let infos = self.infos()?;
        let report = analyze(&self.graph, &infos, cfg)?;
        let ev = report.eval(&self.bindings)?;
        Ok((report, ev))
    }

    /// The result tensor after a run.
    pub fn output_data(&self, r: &SimResult) -> Vec<f32> {
        r.memory.region(self.output.base).map(|reg| reg.data.clone()).unwrap_or_default()
    }

    /// Max-norm error of a run against the dense reference, relative to the
    /// reference's max-norm.
    pub fn max_rel_error(&self, r: &SimResult) -> f32 {
        max_rel_error(&self.output_data(r), &self.reference)
    }
}

pub fn max_rel_error(got: &[f32], want: &[f32]) -> f32 {
    if got.len() != want.len() {
        return f32::INFINITY;
    }
    let scale = want.iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-6);
    got.iter().zip(want).fold(0f32, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Uniform values in `[-scale, scale)`.
pub(crate) fn random_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `[m, k] x [k, n]`, row-major.
pub(crate) fn dense_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += x * b[p * n + j];
            }
        }
    }
    out
}

pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn value(v: StreamValue) -> Token {
    Token::Value(v)
}

/// Compares every recorded channel against its inferred shape under
/// `bindings`: static and dynamic extents must match observed uniform
/// extents, item totals must match at every depth, and tile values must have
/// the inferred dims (or fit under them, for joined types). Returns one line per disagreement.
pub fn shape_mismatches(
    g: &Graph,
    infos: &[ChannelInfo],
    recorded: &HashMap<ChannelId, Vec<Token>>,
    bindings: &Bindings,
) -> Vec<String> {
    let mut out = Vec::new();
    for (ch, info) in infos.iter().enumerate() {
        let Some(tokens) = recorded.get(&ch) else { continue };
        let name = &g.channels[ch].name;
        let rank = info.shape.rank();
        let (tensors, obs) = match detokenize(tokens, rank) {
            Ok(x) => x,
            Err(e) => {
                out.push(format!("{name}: not a rank-{rank} stream: {e}"));
                continue;
            }
        };
        match info.shape.prefix_cardinalities() {
            Ok(cards) => {
                for (depth, c) in cards.iter().enumerate() {
                    match c.eval(bindings) {
                        Ok(v) if v as usize == obs.totals[depth] => {}
                        Ok(v) => out.push(format!(
                            "{name}: {v} items expected at depth {depth} of {}, observed {}",
                            info.shape, obs.totals[depth]
                        )),
                        Err(e) => out.push(format!("{name}: cannot evaluate {}: {e}", info.shape)),
                    }
                }
            }
            Err(e) => out.push(format!("{name}: {e}")),
        }
        for (depth, d) in info.shape.dims.iter().enumerate() {
            if d.is_ragged() {
                continue;
            }
            let Ok(want) = d.expr().eval(bindings) else { continue };
            match &obs.dims[depth] {
                ObservedDim::Uniform(n) if *n as i64 == want => {}
                ObservedDim::Unobserved => {}
                seen => out.push(format!("{name}: dim {depth} of {} is {want}, observed {seen:?}", info.shape)),
            }
        }
        if let ValueType::Tile { rows, cols, .. } = &info.vtype {
            let (Ok(r), Ok(c)) = (rows.eval(bindings), cols.eval(bindings)) else { continue };
            // merged streams carry the elementwise max of their inputs' dims
            let fits = |want: i64, e: &SymExpr, got: usize| match e {
                SymExpr::Max(..) => got as i64 <= want,
                _ => got as i64 == want,
            };
            let bad = tensors.iter().flat_map(|t| t.leaves()).find_map(|v| match v {
                StreamValue::Tile(t) if !(fits(r, rows, t.rows) && fits(c, cols, t.cols)) => Some((t.rows, t.cols)),
                _ => None,
            });
            if let Some((tr, tc)) = bad {
                out.push(format!("{name}: tile {tr}x{tc} observed, {r}x{c} inferred"));
            }
        }
    }
    out
}
