//! Forward shape and type inference.

use std::collections::HashMap;

use thiserror::Error;

use super::{ChannelId, FnSpec, Graph, Node, NodeId, OperatorKind, ValueType};
use crate::shape::{ShapeDim, StreamShape};
use crate::sym::SymExpr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelInfo {
    pub vtype: ValueType,
    pub shape: StreamShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}{rule}: {msg}", node.map(|n| format!("node {n} ")).unwrap_or_default())]
pub struct InferError {
    pub node: Option<NodeId>,
    pub port: Option<usize>,
    pub rule: &'static str,
    pub msg: String,
}

fn err(node: NodeId, port: Option<usize>, rule: &'static str, msg: impl Into<String>) -> InferError {
    InferError { node: Some(node), port, rule, msg: msg.into() }
}

/// Fresh dim created by `Partition` output `i`.
pub fn partition_sym(node: NodeId, i: usize) -> String {
    format!("B_n{node}_{i}")
}

/// Fresh ragged group size created by a `Reassemble` without a k-hot selector.
pub fn reassemble_sym(node: NodeId) -> String {
    format!("Bsel_n{node}")
}

/// Fresh dim `D'_j` created by a `FlatMap` whose kernel has no fixed extent there.
pub fn flatmap_sym(node: NodeId, j: usize) -> String {
    format!("F_n{node}_{j}")
}

/// Fresh dim created by a `Flatten` over ragged inner dims.
pub fn flatten_sym(node: NodeId) -> String {
    format!("Fl_n{node}")
}

/// Common value type of merged inputs, which must share `rank`.
fn joined(id: NodeId, ins: &[ChannelInfo], rank: usize) -> Result<ValueType, InferError> {
    let mut t = ins[0].vtype.clone();
    for (p, i) in ins.iter().enumerate() {
        if i.shape.rank() != rank {
            return Err(err(id, Some(p), "rank", format!("input rank {} != {rank}", i.shape.rank())));
        }
        t = t.join(&i.vtype).ok_or_else(|| err(id, Some(p), "type", "inputs carry incompatible value types"))?;
    }
    Ok(t)
}

fn need_rank(node: NodeId, port: usize, s: &StreamShape, min: usize, what: &str) -> Result<(), InferError> {
    if s.rank() < min {
        return Err(err(node, Some(port), "rank", format!("{what} needs rank >= {min}, got {}", s.rank())));
    }
    Ok(())
}

/// Structural equality of dims, treating equal-valued constants as equal.
fn same_shape(a: &StreamShape, b: &StreamShape) -> bool {
    a.dims.len() == b.dims.len() && a.dims.iter().zip(&b.dims).all(|(x, y)| x.expr() == y.expr())
}

fn output_infos(node: &Node, ins: &[ChannelInfo], g: &Graph) -> Result<Vec<ChannelInfo>, InferError> {
    let id = node.id;
    let one = |vtype: ValueType, shape: StreamShape| Ok(vec![ChannelInfo { vtype, shape }]);
    match &node.kind {
        OperatorKind::LinearOffChipLoad { tensor_shape, tile, dtype, stride, out_shape, .. } => {
            if stride.len() != out_shape.len() {
                return Err(err(id, None, "stride", "stride and out_shape lengths differ"));
            }
            if tensor_shape[0] % tile[0] != 0 || tensor_shape[1] % tile[1] != 0 {
                return Err(err(id, None, "tiling", "tensor shape not divisible by tile"));
            }
            let mut dims = ins[0].shape.dims.clone();
            dims.extend(out_shape.iter().map(|d| ShapeDim::Static(*d as i64)));
            one(ValueType::tile(tile[0], tile[1], *dtype), StreamShape::new(dims))
        }
        OperatorKind::LinearOffChipStore { .. } => {
            if ins[0].vtype.static_tile().is_none() {
                return Err(err(id, Some(0), "static-tile", "store input must be statically sized tiles"));
            }
            Ok(vec![])
        }
        OperatorKind::RandomOffChipLoad { tile, dtype, .. } => {
            if ins[0].vtype != ValueType::Addr {
                return Err(err(id, Some(0), "address-type", "address stream must carry address tiles"));
            }
            one(ValueType::tile(tile[0], tile[1], *dtype), ins[0].shape.clone())
        }
        OperatorKind::RandomOffChipStore { .. } => {
            if ins[0].vtype != ValueType::Addr {
                return Err(err(id, Some(0), "address-type", "address stream must carry address tiles"));
            }
            if ins[1].vtype.static_tile().is_none() {
                return Err(err(id, Some(1), "static-tile", "store data must be statically sized tiles"));
            }
            one(ValueType::Bool, ins[0].shape.clone())
        }
        OperatorKind::Bufferize { rank } => {
            need_rank(id, 0, &ins[0].shape, *rank, "Bufferize")?;
            let inner = ins[0].shape.inner(*rank);
            if inner.iter().any(ShapeDim::is_ragged) {
                return Err(err(id, Some(0), "regular-buffer", "buffered dims must be regular"));
            }
            let vtype = ValueType::Buffer { elem: Box::new(ins[0].vtype.clone()), dims: inner };
            one(vtype, StreamShape::new(ins[0].shape.outer_from(*rank)))
        }
        OperatorKind::Streamify { repeat_rank, stride, out_shape } => {
            let (elem, bdims) = match &ins[0].vtype {
                ValueType::Buffer { elem, dims } => (elem.as_ref().clone(), dims.clone()),
                _ => return Err(err(id, Some(0), "buffer-type", "Streamify data must carry buffers")),
            };
            let (data, refs) = (&ins[0].shape, &ins[1].shape);
            if refs.rank() != data.rank() + repeat_rank {
                return Err(err(
                    id,
                    Some(1),
                    "rank",
                    format!("reference rank {} != data rank {} + {repeat_rank}", refs.rank(), data.rank()),
                ));
            }
            let mut dims = refs.dims.clone();
            if bdims.iter().all(|d| d.as_static().is_some()) {
                if stride.len() != out_shape.len() {
                    return Err(err(id, None, "stride", "stride and out_shape lengths differ"));
                }
                let size: i64 = bdims.iter().map(|d| d.as_static().unwrap()).product();
                let last: i64 = out_shape
                    .iter()
                    .zip(stride)
                    .map(|(n, s)| (*n as i64 - 1).max(0) * *s as i64)
                    .sum();
                if out_shape.iter().all(|n| *n > 0) && last >= size {
                    return Err(err(id, None, "view-bounds", format!("view reaches element {last} of {size}")));
                }
                dims.extend(out_shape.iter().map(|d| ShapeDim::Static(*d as i64)));
            } else {
                dims.extend(bdims);
            }
            one(elem, StreamShape::new(dims))
        }
        OperatorKind::Partition { rank, num_consumers } => {
            let (data, sel) = (&ins[0], &ins[1]);
            need_rank(id, 0, &data.shape, *rank, "Partition")?;
            match sel.vtype {
                ValueType::Selector { width } if width == *num_consumers => {}
                ValueType::Selector { width } => {
                    return Err(err(id, Some(1), "selector-width", format!("width {width} != {num_consumers} consumers")))
                }
                _ => return Err(err(id, Some(1), "selector-type", "selector port must carry selectors")),
            }
            if sel.shape.rank() + rank != data.shape.rank() {
                return Err(err(
                    id,
                    Some(1),
                    "rank",
                    format!("selector rank {} + {rank} != data rank {}", sel.shape.rank(), data.shape.rank()),
                ));
            }
            let inner = data.shape.inner(*rank);
            Ok((0..*num_consumers)
                .map(|i| {
                    let mut dims = vec![ShapeDim::Dynamic(SymExpr::sym(partition_sym(id, i)))];
                    dims.extend(inner.iter().cloned());
                    ChannelInfo { vtype: data.vtype.clone(), shape: StreamShape::new(dims) }
                })
                .collect())
        }
        OperatorKind::Reassemble { inputs, rank } => {
            let sel = &ins[*inputs];
            match sel.vtype {
                ValueType::Selector { width } if width == *inputs => {}
                ValueType::Selector { width } => {
                    return Err(err(id, Some(*inputs), "selector-width", format!("width {width} != {inputs} inputs")))
                }
                _ => return Err(err(id, Some(*inputs), "selector-type", "selector port must carry selectors")),
            }
            let vtype = joined(id, &ins[..*inputs], *rank)?;
            let k_hot = node.inputs.get(*inputs).and_then(|c| g.channels[*c].k_hot);
            let group = match k_hot {
                Some(k) => ShapeDim::Static(k as i64),
                None => ShapeDim::ragged_sym(reassemble_sym(id)),
            };
            let mut dims = sel.shape.dims.clone();
            dims.push(group);
            dims.extend(ins[0].shape.inner(*rank));
            one(vtype, StreamShape::new(dims))
        }
        OperatorKind::EagerMerge { inputs, rank } => {
            let vtype = joined(id, ins, *rank)?;
            let total = SymExpr::sum(ins.iter().map(|i| i.shape.dims[0].expr()).collect());
            let outer = if ins.iter().any(|i| i.shape.dims[0].is_ragged()) {
                ShapeDim::Ragged(total)
            } else {
                ShapeDim::dynamic(total)
            };
            let mut dims = vec![outer.clone()];
            dims.extend(ins[0].shape.inner(*rank));
            Ok(vec![
                ChannelInfo { vtype, shape: StreamShape::new(dims) },
                ChannelInfo { vtype: ValueType::Selector { width: *inputs }, shape: StreamShape::new(vec![outer]) },
            ])
        }
        OperatorKind::Map { f } => {
            let t = f.output_type(&ins[0].vtype).map_err(|m| err(id, Some(0), "fn-type", m))?;
            one(t, ins[0].shape.clone())
        }
        OperatorKind::Accum { rank, f } => {
            need_rank(id, 0, &ins[0].shape, *rank, "Accum")?;
            let t = f
                .accum_type(&ins[0].vtype, &ins[0].shape.inner(*rank))
                .map_err(|m| err(id, Some(0), "fn-type", m))?;
            one(t, StreamShape::new(ins[0].shape.outer_from(*rank)))
        }
        OperatorKind::Scan { rank, f } => {
            need_rank(id, 0, &ins[0].shape, *rank, "Scan")?;
            let t = f.output_type(&ins[0].vtype).map_err(|m| err(id, Some(0), "fn-type", m))?;
            one(t, ins[0].shape.clone())
        }
        OperatorKind::FlatMap { rank, f } => flatmap(id, *rank, f, &ins[0]).map(|c| vec![c]),
        OperatorKind::Flatten { min, max } => {
            let s = &ins[0].shape;
            if min >= max || *max > s.rank() {
                return Err(err(id, Some(0), "flatten-range", format!("need {min} < {max} <= rank {}", s.rank())));
            }
            let n = s.dims.len();
            let span = &s.dims[n - 1 - max..n - min];
            let inner_ragged = span[1..].iter().any(ShapeDim::is_ragged);
            let merged = if inner_ragged {
                ShapeDim::ragged_sym(flatten_sym(id))
            } else {
                span[1..].iter().fold(span[0].clone(), |acc, d| acc.times(d))
            };
            let mut dims = s.dims[..n - 1 - max].to_vec();
            dims.push(merged);
            dims.extend_from_slice(&s.dims[n - min..]);
            one(ins[0].vtype.clone(), StreamShape::new(dims))
        }
        OperatorKind::Reshape { dim, chunk, .. } => {
            let s = &ins[0].shape;
            if *dim > s.rank() {
                return Err(err(id, Some(0), "rank", format!("split dim {dim} exceeds rank {}", s.rank())));
            }
            if *chunk == 0 {
                return Err(err(id, None, "chunk", "chunk size must be positive"));
            }
            let d = s.d(*dim);
            if *dim > 0 {
                match d.as_static() {
                    Some(v) if v % *chunk as i64 == 0 => {}
                    _ => {
                        return Err(err(id, Some(0), "reshape-divisible", format!("D_{dim} = {d} not a static multiple of {chunk}")))
                    }
                }
            }
            let outer = match d {
                ShapeDim::Static(v) => ShapeDim::Static((v + *chunk as i64 - 1) / *chunk as i64),
                ShapeDim::Dynamic(e) => ShapeDim::dynamic(SymExpr::ceil_div(e.clone(), *chunk as i64)),
                ShapeDim::Ragged(e) => ShapeDim::Ragged(SymExpr::ceil_div(e.clone(), *chunk as i64)),
            };
            let n = s.dims.len();
            let mut dims = s.dims[..n - 1 - dim].to_vec();
            dims.push(outer);
            dims.push(ShapeDim::Static(*chunk as i64));
            dims.extend_from_slice(&s.dims[n - dim..]);
            let shape = StreamShape::new(dims);
            Ok(vec![
                ChannelInfo { vtype: ins[0].vtype.clone(), shape: shape.clone() },
                ChannelInfo { vtype: ValueType::Bool, shape },
            ])
        }
        OperatorKind::Promote => {
            let d = &ins[0].shape.dims[0];
            let outer = match d {
                ShapeDim::Static(v) => ShapeDim::Static(i64::from(*v > 0)),
                ShapeDim::Dynamic(e) => ShapeDim::dynamic(e.clone().nonzero_indicator()),
                ShapeDim::Ragged(e) => ShapeDim::Ragged(e.clone().nonzero_indicator()),
            };
            let mut dims = vec![outer];
            dims.extend(ins[0].shape.dims.iter().cloned());
            one(ins[0].vtype.clone(), StreamShape::new(dims))
        }
        OperatorKind::Expand { depth } => {
            let (data, refs) = (&ins[0].shape, &ins[1].shape);
            if data.rank() != refs.rank() {
                return Err(err(id, Some(1), "rank", "data and reference ranks differ"));
            }
            need_rank(id, 0, data, *depth, "Expand")?;
            if data.inner(depth + 1).iter().any(|d| d.as_static() != Some(1)) {
                return Err(err(id, Some(0), "expand-unit", format!("inner {} dims of data must be 1", depth + 1)));
            }
            one(ins[0].vtype.clone(), refs.clone())
        }
        OperatorKind::Zip => {
            if !same_shape(&ins[0].shape, &ins[1].shape) {
                return Err(err(
                    id,
                    Some(1),
                    "zip-shape",
                    format!("{} vs {}", ins[0].shape, ins[1].shape),
                ));
            }
            one(ValueType::zip(&ins[0].vtype, &ins[1].vtype), ins[0].shape.clone())
        }
        OperatorKind::Broadcast { n } => Ok(vec![ins[0].clone(); *n]),
    }
}

fn flatmap(id: NodeId, b: usize, f: &FnSpec, input: &ChannelInfo) -> Result<ChannelInfo, InferError> {
    let t = f.output_type(&input.vtype).map_err(|m| err(id, Some(0), "fn-type", m))?;
    let extents = f.flat_extents().unwrap_or_else(|| vec![None; b + 1]);
    if extents.len() != b + 1 {
        return Err(err(id, None, "flatmap-rank", format!("kernel emits rank {}, node expects {b}", extents.len() - 1)));
    }
    let s = &input.shape;
    let d0 = s.d(0).clone();
    let mut dims = s.outer_from(1);
    let nested = s.rank() > 0;
    for (pos, e) in extents.iter().enumerate() {
        let j = b - pos;
        let d = match (pos, e) {
            (0, Some(e)) => d0.times(&ShapeDim::Static(*e)),
            (0, None) if nested => ShapeDim::ragged_sym(flatmap_sym(id, j)),
            (0, None) => ShapeDim::Dynamic(SymExpr::sym(flatmap_sym(id, j))),
            (_, Some(e)) => ShapeDim::Static(*e),
            (_, None) => ShapeDim::ragged_sym(flatmap_sym(id, j)),
        };
        dims.push(d);
    }
    Ok(ChannelInfo { vtype: t, shape: StreamShape::new(dims) })
}

fn consistent(declared: &ChannelInfo, computed: &ChannelInfo) -> Result<(), String> {
    if declared.vtype != computed.vtype {
        return Err(format!("declared type {:?} vs computed {:?}", declared.vtype, computed.vtype));
    }
    if declared.shape.rank() != computed.shape.rank() {
        return Err(format!("declared shape {} vs computed {}", declared.shape, computed.shape));
    }
    for (a, b) in declared.shape.dims.iter().zip(&computed.shape.dims) {
        if let (Some(x), Some(y)) = (a.as_static(), b.as_static()) {
            if x != y {
                return Err(format!("declared shape {} vs computed {}", declared.shape, computed.shape));
            }
        }
    }
    Ok(())
}

/// Infers every channel it can, collecting one error per failing node.
pub(crate) fn infer_all(
    g: &Graph,
    overrides: &HashMap<ChannelId, ChannelInfo>,
) -> (Vec<Option<ChannelInfo>>, Vec<InferError>) {
    let mut info: Vec<Option<ChannelInfo>> = g
        .channels
        .iter()
        .map(|c| {
            overrides.get(&c.id).cloned().or_else(|| match (&c.vtype, &c.shape) {
                (Some(t), Some(s)) => Some(ChannelInfo { vtype: t.clone(), shape: s.clone() }),
                _ => None,
            })
        })
        .collect();
    let mut errors = Vec::new();
    let mut done = vec![false; g.nodes.len()];
    loop {
        let mut progressed = false;
        for node in &g.nodes {
            if done[node.id] || !node.inputs.iter().all(|c| info[*c].is_some()) {
                continue;
            }
            done[node.id] = true;
            progressed = true;
            let ins: Vec<ChannelInfo> = node.inputs.iter().map(|c| info[*c].clone().unwrap()).collect();
            match output_infos(node, &ins, g) {
                Ok(outs) => {
                    for (port, (c, computed)) in node.outputs.iter().zip(outs).enumerate() {
                        match &info[*c] {
                            Some(declared) => {
                                if let Err(m) = consistent(declared, &computed) {
                                    errors.push(err(node.id, Some(port), "declared-shape", m));
                                }
                            }
                            None => info[*c] = Some(computed),
                        }
                    }
                }
                Err(e) => errors.push(e),
            }
        }
        if !progressed {
            break;
        }
    }
    if errors.is_empty() {
        if let Some(node) = g.nodes.iter().find(|n| !done[n.id]) {
            let blocked = node.inputs.iter().find(|c| info[**c].is_none()).copied();
            errors.push(InferError {
                node: Some(node.id),
                port: blocked.and_then(|c| node.inputs.iter().position(|x| *x == c)),
                rule: "undeclared-shape",
                msg: format!(
                    "input channel `{}` has no declared shape and its producer is unresolved",
                    blocked.map(|c| g.channels[c].name.as_str()).unwrap_or("?")
                ),
            });
        } else if let Some(c) = info.iter().position(Option::is_none) {
            errors.push(InferError {
                node: None,
                port: None,
                rule: "undeclared-shape",
                msg: format!("channel `{}` has neither a producer nor a declared shape", g.channels[c].name),
            });
        }
    }
    (info, errors)
}

/// Infers the type and shape of every channel from the declared external inputs.
pub fn infer_shapes(g: &Graph) -> Result<Vec<ChannelInfo>, InferError> {
    infer_shapes_with(g, &HashMap::new())
}

/// As [`infer_shapes`], with external input types given explicitly.
pub fn infer_shapes_with(
    g: &Graph,
    inputs: &HashMap<ChannelId, ChannelInfo>,
) -> Result<Vec<ChannelInfo>, InferError> {
    let (info, errors) = infer_all(g, inputs);
    if let Some(e) = errors.into_iter().next() {
        return Err(e);
    }
    Ok(info.into_iter().map(Option::unwrap).collect())
}
