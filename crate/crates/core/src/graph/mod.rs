//! Operator graphs: node kinds, channels, a small builder and JSON I/O.

mod fnspec;
mod infer;
mod validate;

use serde::{Deserialize, Serialize};

use crate::shape::{ShapeDim, StreamShape};
use crate::stream::DType;
use crate::sym::SymExpr;

pub use fnspec::FnSpec;
pub use infer::{
    flatmap_sym, flatten_sym, infer_shapes, infer_shapes_with, partition_sym, reassemble_sym, ChannelInfo, InferError,
};
pub use validate::{validate, Diagnostic};

pub type NodeId = usize;
pub type ChannelId = usize;

/// Static type of the values carried by a channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueType {
    Tile { rows: SymExpr, cols: SymExpr, dtype: DType },
    Selector { width: usize },
    Buffer { elem: Box<ValueType>, dims: Vec<ShapeDim> },
    Bool,
    Addr,
    Tuple { items: Vec<ValueType> },
}

impl ValueType {
    pub fn tile(rows: usize, cols: usize, dtype: DType) -> Self {
        ValueType::Tile { rows: SymExpr::from(rows), cols: SymExpr::from(cols), dtype }
    }

    /// Tuple of two types; tuple operands are spliced in.
    pub fn zip(a: &ValueType, b: &ValueType) -> Self {
        let mut items = Vec::new();
        for t in [a, b] {
            match t {
                ValueType::Tuple { items: inner } => items.extend(inner.iter().cloned()),
                other => items.push(other.clone()),
            }
        }
        ValueType::Tuple { items }
    }

    /// Size of one value in bytes.
    pub fn bytes(&self) -> SymExpr {
        match self {
            ValueType::Tile { rows, cols, dtype } => SymExpr::product(vec![
                rows.clone(),
                cols.clone(),
                SymExpr::from(dtype.size()),
            ]),
            ValueType::Selector { width } => SymExpr::from(width.div_ceil(8)),
            ValueType::Buffer { .. } => SymExpr::zero(),
            ValueType::Bool => SymExpr::one(),
            ValueType::Addr => SymExpr::c(4),
            ValueType::Tuple { items } => SymExpr::sum(items.iter().map(ValueType::bytes).collect()),
        }
    }

    /// Static tile dims, if this is a statically sized tile.
    pub fn static_tile(&self) -> Option<(usize, usize, DType)> {
        match self {
            ValueType::Tile { rows: SymExpr::Const(r), cols: SymExpr::Const(c), dtype } => {
                Some((*r as usize, *c as usize, *dtype))
            }
            _ => None,
        }
    }

    pub fn is_buffer(&self) -> bool {
        matches!(self, ValueType::Buffer { .. })
    }

    /// Smallest type covering both: tiles of one dtype whose dims differ get
    /// the elementwise `max` of their dims.
    pub fn join(&self, other: &ValueType) -> Option<ValueType> {
        if self == other {
            return Some(self.clone());
        }
        let pick = |a: &SymExpr, b: &SymExpr| if a == b { a.clone() } else { SymExpr::max(a.clone(), b.clone()) };
        match (self, other) {
            (ValueType::Tile { rows: r1, cols: c1, dtype: d1 }, ValueType::Tile { rows: r2, cols: c2, dtype: d2 })
                if d1 == d2 =>
            {
                Some(ValueType::Tile { rows: pick(r1, r2), cols: pick(c1, c2), dtype: *d1 })
            }
            (ValueType::Tuple { items: a }, ValueType::Tuple { items: b }) if a.len() == b.len() => {
                let items = a.iter().zip(b).map(|(x, y)| x.join(y)).collect::<Option<Vec<_>>>()?;
                Some(ValueType::Tuple { items })
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OperatorKind {
    /// Per reference value, walks the tile grid of a row-major `[rows, cols]`
    /// tensor: tile index = `sum(idx[j] * stride[j])` over `out_shape`.
    LinearOffChipLoad {
        base_addr: u64,
        tensor_shape: [usize; 2],
        tile: [usize; 2],
        dtype: DType,
        stride: Vec<usize>,
        out_shape: Vec<usize>,
    },
    /// Writes incoming tiles to consecutive tile slots.
    LinearOffChipStore { base_addr: u64 },
    /// Reads the tile whose row-major grid index is the address value.
    RandomOffChipLoad {
        base_addr: u64,
        tensor_shape: [usize; 2],
        tile: [usize; 2],
        dtype: DType,
    },
    RandomOffChipStore {
        base_addr: u64,
        tensor_shape: [usize; 2],
        tile: [usize; 2],
        dtype: DType,
    },
    Bufferize { rank: usize },
    Streamify { repeat_rank: usize, stride: Vec<usize>, out_shape: Vec<usize> },
    /// Routes each rank-`rank` chunk of the data stream to the selected outputs.
    Partition { rank: usize, num_consumers: usize },
    Reassemble { inputs: usize, rank: usize },
    EagerMerge { inputs: usize, rank: usize },
    Map { f: FnSpec },
    Accum { rank: usize, f: FnSpec },
    Scan { rank: usize, f: FnSpec },
    FlatMap { rank: usize, f: FnSpec },
    Flatten { min: usize, max: usize },
    Reshape { dim: usize, chunk: usize, pad: Option<f32> },
    Promote,
    Expand { depth: usize },
    Zip,
    Broadcast { n: usize },
}

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::LinearOffChipLoad { .. } => "LinearOffChipLoad",
            OperatorKind::LinearOffChipStore { .. } => "LinearOffChipStore",
            OperatorKind::RandomOffChipLoad { .. } => "RandomOffChipLoad",
            OperatorKind::RandomOffChipStore { .. } => "RandomOffChipStore",
            OperatorKind::Bufferize { .. } => "Bufferize",
            OperatorKind::Streamify { .. } => "Streamify",
            OperatorKind::Partition { .. } => "Partition",
            OperatorKind::Reassemble { .. } => "Reassemble",
            OperatorKind::EagerMerge { .. } => "EagerMerge",
            OperatorKind::Map { .. } => "Map",
            OperatorKind::Accum { .. } => "Accum",
            OperatorKind::Scan { .. } => "Scan",
            OperatorKind::FlatMap { .. } => "FlatMap",
            OperatorKind::Flatten { .. } => "Flatten",
            OperatorKind::Reshape { .. } => "Reshape",
            OperatorKind::Promote => "Promote",
            OperatorKind::Expand { .. } => "Expand",
            OperatorKind::Zip => "Zip",
            OperatorKind::Broadcast { .. } => "Broadcast",
        }
    }

    /// `(inputs, outputs)` port counts.
    pub fn arity(&self) -> (usize, usize) {
        match self {
            OperatorKind::LinearOffChipStore { .. } => (1, 0),
            OperatorKind::RandomOffChipStore { .. } => (2, 1),
            OperatorKind::Streamify { .. } | OperatorKind::Expand { .. } | OperatorKind::Zip => (2, 1),
            OperatorKind::Partition { num_consumers, .. } => (2, *num_consumers),
            OperatorKind::Reassemble { inputs, .. } => (inputs + 1, 1),
            OperatorKind::EagerMerge { inputs, .. } => (*inputs, 2),
            OperatorKind::Reshape { .. } => (1, 2),
            OperatorKind::Broadcast { n } => (1, *n),
            _ => (1, 1),
        }
    }

    pub fn is_offchip(&self) -> bool {
        matches!(
            self,
            OperatorKind::LinearOffChipLoad { .. }
                | OperatorKind::LinearOffChipStore { .. }
                | OperatorKind::RandomOffChipLoad { .. }
                | OperatorKind::RandomOffChipStore { .. }
        )
    }

    pub fn fn_spec(&self) -> Option<&FnSpec> {
        match self {
            OperatorKind::Map { f }
            | OperatorKind::Accum { f, .. }
            | OperatorKind::Scan { f, .. }
            | OperatorKind::FlatMap { f, .. } => Some(f),
            _ => None,
        }
    }

    pub fn is_higher_order(&self) -> bool {
        self.fn_spec().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: OperatorKind,
    pub inputs: Vec<ChannelId>,
    pub outputs: Vec<ChannelId>,
    /// FLOPs per cycle; only meaningful for higher-order operators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_bw: Option<u64>,
    /// Whether each input port is read through an on-chip memory unit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub in_via_memory: Vec<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub out_via_memory: Vec<bool>,
}

impl Node {
    pub fn input_via_memory(&self, port: usize) -> bool {
        self.in_via_memory.get(port).copied().unwrap_or(true)
    }

    pub fn output_via_memory(&self, port: usize) -> bool {
        self.out_via_memory.get(port).copied().unwrap_or(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub node: NodeId,
    pub port: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub id: ChannelId,
    pub name: String,
    pub src: Option<Endpoint>,
    pub dst: Option<Endpoint>,
    /// Required for external inputs and back-edges; checked elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<StreamShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vtype: Option<ValueType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    /// Every selector on this channel has exactly this many bits set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_hot: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub channels: Vec<Channel>,
    /// Channels fed by the harness.
    pub inputs: Vec<ChannelId>,
    /// Channels drained by the harness.
    pub outputs: Vec<ChannelId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares an external input channel.
    pub fn input(&mut self, name: &str, vtype: ValueType, shape: StreamShape) -> ChannelId {
        let id = self.channel(name);
        self.channels[id].vtype = Some(vtype);
        self.channels[id].shape = Some(shape);
        self.inputs.push(id);
        id
    }

    /// Creates an unconnected channel, e.g. the target of a back-edge.
    pub fn channel(&mut self, name: &str) -> ChannelId {
        let id = self.channels.len();
        self.channels.push(Channel {
            id,
            name: name.to_string(),
            src: None,
            dst: None,
            shape: None,
            vtype: None,
            capacity: None,
            k_hot: None,
        });
        id
    }

    /// Declares the stream type carried by a back-edge channel.
    pub fn declare(&mut self, ch: ChannelId, vtype: ValueType, shape: StreamShape) {
        self.channels[ch].vtype = Some(vtype);
        self.channels[ch].shape = Some(shape);
    }

    pub fn add(&mut self, name: &str, kind: OperatorKind, inputs: &[ChannelId]) -> Vec<ChannelId> {
        let n_out = kind.arity().1;
        self.add_with_outputs(name, kind, inputs, &vec![None; n_out])
    }

    /// Like [`Graph::add`], with the outputs given as `Some` written into existing channels.
    pub fn add_with_outputs(
        &mut self,
        name: &str,
        kind: OperatorKind,
        inputs: &[ChannelId],
        outputs: &[Option<ChannelId>],
    ) -> Vec<ChannelId> {
        let id = self.nodes.len();
        for (port, &c) in inputs.iter().enumerate() {
            assert!(self.channels[c].dst.is_none(), "channel {} already consumed", self.channels[c].name);
            self.channels[c].dst = Some(Endpoint { node: id, port });
        }
        let outs: Vec<ChannelId> = outputs
            .iter()
            .enumerate()
            .map(|(port, o)| {
                let c = o.unwrap_or_else(|| {
                    let label = if outputs.len() == 1 { name.to_string() } else { format!("{name}.{port}") };
                    self.channel(&label)
                });
                assert!(self.channels[c].src.is_none(), "channel {} already produced", self.channels[c].name);
                self.channels[c].src = Some(Endpoint { node: id, port });
                c
            })
            .collect();
        self.nodes.push(Node {
            id,
            name: name.to_string(),
            kind,
            inputs: inputs.to_vec(),
            outputs: outs.clone(),
            compute_bw: None,
            in_via_memory: Vec::new(),
            out_via_memory: Vec::new(),
        });
        outs
    }

    /// Single-output convenience wrapper.
    pub fn add1(&mut self, name: &str, kind: OperatorKind, inputs: &[ChannelId]) -> ChannelId {
        let outs = self.add(name, kind, inputs);
        assert_eq!(outs.len(), 1, "{name} has {} outputs", outs.len());
        outs[0]
    }

    /// Marks a channel as drained by the harness.
    pub fn output(&mut self, ch: ChannelId) {
        self.outputs.push(ch);
    }

    pub fn producer(&self, ch: ChannelId) -> Option<&Node> {
        self.channels[ch].src.map(|e| &self.nodes[e.node])
    }

    pub fn last_node_mut(&mut self) -> &mut Node {
        self.nodes.last_mut().expect("graph has nodes")
    }

    pub fn node_by_name(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn channel_by_name(&self, name: &str) -> Option<ChannelId> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn set_capacity(&mut self, ch: ChannelId, cap: usize) {
        self.channels[ch].capacity = Some(cap);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Graph, serde_json::Error> {
        serde_json::from_str(s)
    }
}
