//! Symbolic off-chip traffic, on-chip memory and operational intensity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ChannelInfo, Graph, Node, OperatorKind, ValueType};
use crate::shape::StreamShape;
use crate::sym::{Bindings, SymError, SymExpr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConfig {
    /// Row count of the internal sub-tile used by matmul units.
    pub matmul_subtile: i64,
    pub double_buffer: i64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig { matmul_subtile: 16, double_buffer: 2 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("node `{node}`: {msg}")]
    UnsupportedShape { node: String, msg: String },
    #[error("node `{node}`: {source}")]
    Sym { node: String, source: SymError },
    #[error("operational intensity undefined: graph moves no off-chip bytes")]
    ZeroTraffic,
    #[error("channel count mismatch: {0} infos for {1} channels")]
    Infos(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeCost {
    pub node: usize,
    pub name: String,
    pub op: String,
    pub traffic: SymExpr,
    pub onchip: SymExpr,
    pub flops: SymExpr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub nodes: Vec<NodeCost>,
    pub total_traffic: SymExpr,
    pub total_onchip: SymExpr,
    pub total_flops: SymExpr,
}

/// `flops / bytes`, kept as a ratio of two expressions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Intensity {
    pub flops: SymExpr,
    pub bytes: SymExpr,
}

impl Intensity {
    pub fn eval(&self, b: &Bindings) -> Result<f64, CostError> {
        let bytes = self.bytes.eval(b).map_err(|e| CostError::Sym { node: "total".into(), source: e })?;
        if bytes == 0 {
            return Err(CostError::ZeroTraffic);
        }
        let flops = self.flops.eval(b).map_err(|e| CostError::Sym { node: "total".into(), source: e })?;
        Ok(flops as f64 / bytes as f64)
    }
}

fn sym_err(node: &Node) -> impl Fn(SymError) -> CostError + '_ {
    move |e| CostError::Sym { node: node.name.clone(), source: e }
}

fn card(node: &Node, s: &StreamShape) -> Result<SymExpr, CostError> {
    s.cardinality().map_err(sym_err(node))
}

/// Off-chip operator streams may only be ragged in their two outermost dims.
fn check_offchip_shape(node: &Node, s: &StreamShape) -> Result<(), CostError> {
    if s.dims.iter().skip(2).any(|d| d.is_ragged()) {
        return Err(CostError::UnsupportedShape {
            node: node.name.clone(),
            msg: format!("ragged dim below the two outermost in {s}"),
        });
    }
    Ok(())
}

fn check(g: &Graph, infos: &[ChannelInfo]) -> Result<(), CostError> {
    if infos.len() != g.channels.len() {
        return Err(CostError::Infos(infos.len(), g.channels.len()));
    }
    Ok(())
}

fn node_traffic(node: &Node, infos: &[ChannelInfo]) -> Result<SymExpr, CostError> {
    let info = |c: usize| &infos[c];
    let of = |ci: &ChannelInfo| -> Result<SymExpr, CostError> {
        check_offchip_shape(node, &ci.shape)?;
        Ok(card(node, &ci.shape)?.mul(ci.vtype.bytes()))
    };
    match &node.kind {
        OperatorKind::LinearOffChipLoad { .. } | OperatorKind::RandomOffChipLoad { .. } => of(info(node.outputs[0])),
        OperatorKind::LinearOffChipStore { .. } => of(info(node.inputs[0])),
        OperatorKind::RandomOffChipStore { .. } => of(info(node.inputs[1])),
        _ => Ok(SymExpr::zero()),
    }
}

/// Bytes moved to or from off-chip memory by each node.
pub fn offchip_traffic(g: &Graph, infos: &[ChannelInfo]) -> Result<Vec<SymExpr>, CostError> {
    check(g, infos)?;
    g.nodes.iter().map(|n| node_traffic(n, infos)).collect()
}

fn matmul_term(node: &Node, input: &ValueType, cfg: &CostConfig) -> Option<SymExpr> {
    let f = node.kind.fn_spec()?;
    let (cols, dtype, weight) = f.matmul_operands(input)?;
    Some(SymExpr::sum(vec![
        SymExpr::product(vec![SymExpr::c(cfg.matmul_subtile), cols, SymExpr::from(dtype.size())]),
        weight,
    ]))
}

fn node_onchip(node: &Node, infos: &[ChannelInfo], cfg: &CostConfig) -> Result<SymExpr, CostError> {
    let info = |c: usize| &infos[c];
    Ok(match &node.kind {
        OperatorKind::LinearOffChipLoad { .. } | OperatorKind::RandomOffChipLoad { .. } => {
            info(node.outputs[0]).vtype.bytes().mul(cfg.double_buffer)
        }
        OperatorKind::LinearOffChipStore { .. } => info(node.inputs[0]).vtype.bytes().mul(cfg.double_buffer),
        OperatorKind::RandomOffChipStore { .. } => info(node.inputs[1]).vtype.bytes().mul(cfg.double_buffer),
        OperatorKind::Bufferize { .. } => {
            let elem = info(node.inputs[0]).vtype.bytes();
            let dims = match &info(node.outputs[0]).vtype {
                ValueType::Buffer { dims, .. } => dims.clone(),
                _ => unreachable!("Bufferize emits buffers"),
            };
            if dims.iter().any(|d| d.is_ragged()) {
                return Err(CostError::UnsupportedShape { node: node.name.clone(), msg: "ragged buffer dim".into() });
            }
            let size = dims.iter().fold(SymExpr::one(), |acc, d| acc.mul(d.expr()));
            SymExpr::sum(vec![elem.clone(), SymExpr::product(vec![size, elem, SymExpr::c(cfg.double_buffer)])])
        }
        OperatorKind::Map { .. } => matmul_term(node, &info(node.inputs[0]).vtype, cfg).unwrap_or_else(SymExpr::zero),
        OperatorKind::Accum { .. } => {
            let out = info(node.outputs[0]).vtype.bytes();
            match matmul_term(node, &info(node.inputs[0]).vtype, cfg) {
                Some(m) => m.add(out_tile_bytes(&info(node.outputs[0]).vtype)),
                None => out,
            }
        }
        OperatorKind::Scan { .. } | OperatorKind::Expand { .. } => info(node.outputs[0]).vtype.bytes(),
        _ => SymExpr::zero(),
    })
}

/// The first tile of a tuple-typed accumulator is its output tile.
fn out_tile_bytes(t: &ValueType) -> SymExpr {
    match t {
        ValueType::Tuple { items } => items[0].bytes(),
        other => other.bytes(),
    }
}

/// On-chip bytes each node needs.
pub fn onchip_requirement(g: &Graph, infos: &[ChannelInfo], cfg: &CostConfig) -> Result<Vec<SymExpr>, CostError> {
    check(g, infos)?;
    g.nodes.iter().map(|n| node_onchip(n, infos, cfg)).collect()
}

fn node_flops(node: &Node, infos: &[ChannelInfo]) -> Result<SymExpr, CostError> {
    match node.kind.fn_spec() {
        Some(f) => {
            let input = &infos[node.inputs[0]];
            Ok(card(node, &input.shape)?.mul(f.flops(&input.vtype)))
        }
        None => Ok(SymExpr::zero()),
    }
}

/// Total FLOPs over total off-chip bytes.
pub fn operational_intensity(g: &Graph, infos: &[ChannelInfo]) -> Result<Intensity, CostError> {
    let r = analyze(g, infos, &CostConfig::default())?;
    if r.total_traffic.is_zero() {
        return Err(CostError::ZeroTraffic);
    }
    Ok(Intensity { flops: r.total_flops, bytes: r.total_traffic })
}

/// Per-node and total costs.
pub fn analyze(g: &Graph, infos: &[ChannelInfo], cfg: &CostConfig) -> Result<CostReport, CostError> {
    let traffic = offchip_traffic(g, infos)?;
    let onchip = onchip_requirement(g, infos, cfg)?;
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for (i, n) in g.nodes.iter().enumerate() {
        nodes.push(NodeCost {
            node: n.id,
            name: n.name.clone(),
            op: n.kind.name().to_string(),
            traffic: traffic[i].clone(),
            onchip: onchip[i].clone(),
            flops: node_flops(n, infos)?,
        });
    }
    Ok(CostReport {
        total_traffic: SymExpr::sum(nodes.iter().map(|n| n.traffic.clone()).collect()),
        total_onchip: SymExpr::sum(nodes.iter().map(|n| n.onchip.clone()).collect()),
        total_flops: SymExpr::sum(nodes.iter().map(|n| n.flops.clone()).collect()),
        nodes,
    })
}

/// A report evaluated under concrete bindings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvaluatedCost {
    pub traffic: i64,
    pub onchip: i64,
    pub flops: i64,
    pub per_node_traffic: Vec<i64>,
    pub per_node_onchip: Vec<i64>,
}

impl CostReport {
    pub fn eval(&self, b: &Bindings) -> Result<EvaluatedCost, CostError> {
        let ev = |e: &SymExpr, who: &str| e.eval(b).map_err(|s| CostError::Sym { node: who.to_string(), source: s });
        Ok(EvaluatedCost {
            traffic: ev(&self.total_traffic, "total")?,
            onchip: ev(&self.total_onchip, "total")?,
            flops: ev(&self.total_flops, "total")?,
            per_node_traffic: self.nodes.iter().map(|n| ev(&n.traffic, &n.name)).collect::<Result<_, _>>()?,
            per_node_onchip: self.nodes.iter().map(|n| ev(&n.onchip, &n.name)).collect::<Result<_, _>>()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{infer_shapes, FnSpec};
    use crate::shape::ShapeDim;
    use crate::stream::DType;

    fn bf16(r: usize, c: usize) -> ValueType {
        ValueType::tile(r, c, DType::Bf16)
    }

    #[test]
    fn bufferize_and_matmul_onchip() {
        let mut g = Graph::new();
        let x = g.input("x", bf16(16, 16), StreamShape::of_static(&[1, 4]));
        let b = g.add1("buf", OperatorKind::Bufferize { rank: 1 }, &[x]);
        g.output(b);
        let a = g.input("a", bf16(16, 64), StreamShape::of_static(&[3]));
        let w = g.input("w", bf16(64, 64), StreamShape::of_static(&[3]));
        let z = g.add1("zip", OperatorKind::Zip, &[a, w]);
        let m = g.add1("mm", OperatorKind::Map { f: FnSpec::MatMul }, &[z]);
        g.output(m);
        let infos = infer_shapes(&g).unwrap();
        let on = onchip_requirement(&g, &infos, &CostConfig::default()).unwrap();
        assert_eq!(on[0], SymExpr::c(512 + 4 * 512 * 2));
        assert_eq!(on[2], SymExpr::c(16 * 64 * 2 + 64 * 64 * 2));
        assert_eq!(on[1], SymExpr::zero());
        assert_eq!(operational_intensity(&g, &infos), Err(CostError::ZeroTraffic));
    }

    #[test]
    fn load_traffic_is_symbolic_in_reference_count() {
        let mut g = Graph::new();
        let r = g.input("ref", ValueType::Bool, StreamShape::new(vec![ShapeDim::Dynamic(SymExpr::sym("C_i"))]));
        let w = g.add1(
            "w1",
            OperatorKind::LinearOffChipLoad {
                base_addr: 0,
                tensor_shape: [4096, 14336],
                tile: [4096, 64],
                dtype: DType::Bf16,
                stride: vec![224, 1],
                out_shape: vec![1, 224],
            },
            &[r],
        );
        g.output(w);
        let infos = infer_shapes(&g).unwrap();
        assert_eq!(infos[w].shape.to_string(), "[C_i, 1, 224]");
        let t = offchip_traffic(&g, &infos).unwrap();
        let mut b = Bindings::new();
        b.set("C_i", 3);
        assert_eq!(t[0].eval(&b).unwrap(), 3 * 224 * 4096 * 64 * 2);
    }
}
