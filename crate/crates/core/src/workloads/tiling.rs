//! Rewrites a large-tile matmul into a grid of physical-size sub-tile matmuls.

use crate::graph::{infer_shapes, ChannelId, Endpoint, FnSpec, Graph, NodeId, OperatorKind as Op};

use super::{config_err, WorkloadError};

/// Physical matmul dims `[m, k, n]`: one `[m, k] x [k, n]` product per step.
pub type PhysicalDims = [usize; 3];

/// Replaces the matmul at `node` with a sub-tile pipeline: both operands are
/// split and buffered, a strided `Streamify` walks the `[m, n, k]` sub-tile
/// grid, products are summed over `k` and the `[m, n]` grid is reassembled.
///
/// `node` must be a `Map(MatMul)` or `Accum(MatMulAccumulate)` fed directly by
/// a `Zip` of two tile streams. Node and channel ids of the rest of the graph
/// are preserved. If `physical` equals the logical tile dims the graph is
/// returned unchanged.
pub fn hierarchical_tiling_transform(g: &Graph, node: NodeId, physical: PhysicalDims) -> Result<Graph, WorkloadError> {
    let Some(t) = g.nodes.get(node) else { return config_err(format!("no node {node}")) };
    let accum_rank = match &t.kind {
        Op::Map { f: FnSpec::MatMul } => None,
        Op::Accum { rank, f: FnSpec::MatMulAccumulate } => Some(*rank),
        k => return config_err(format!("{} is a {}, not a matmul", t.name, k.name())),
    };
    let zn = match g.producer(t.inputs[0]) {
        Some(z) if z.kind == Op::Zip => z.id,
        _ => return config_err(format!("{} is not fed by a Zip", t.name)),
    };
    let (a, b) = (g.nodes[zn].inputs[0], g.nodes[zn].inputs[1]);
    let infos = infer_shapes(g)?;
    let dims = |ch: ChannelId| infos[ch].vtype.static_tile();
    let (Some((m, k, _)), Some((k2, n, _))) = (dims(a), dims(b)) else {
        return config_err("matmul operands must be statically sized tiles");
    };
    if k != k2 {
        return config_err(format!("inner dims differ: {k} vs {k2}"));
    }
    let [pm, pk, pn] = physical;
    if pm == 0 || pk == 0 || pn == 0 || m % pm != 0 || k % pk != 0 || n % pn != 0 {
        return config_err(format!("tile {m}x{k}x{n} is not divisible by physical {pm}x{pk}x{pn}"));
    }
    if [m, k, n] == physical {
        return Ok(g.clone());
    }
    let (gm, gk, gn) = (m / pm, k / pk, n / pn);

    let mut out = g.clone();
    let name = t.name.clone();
    let (z, y) = (t.inputs[0], t.outputs[0]);
    // the Zip becomes the split of A; the target becomes the final node
    out.channels[b].dst = None;
    out.channels[z].name = format!("{name}/split_a");
    out.channels[z].dst = None;
    out.channels[y].src = None;
    let zip = &mut out.nodes[zn];
    zip.name = format!("{name}/split_a");
    zip.kind = Op::FlatMap { rank: 2, f: FnSpec::SplitTile { rows: pm, cols: pk, grid: [gm, gk] } };
    zip.inputs = vec![a];
    out.channels[a].dst = Some(Endpoint { node: zn, port: 0 });

    let sb = out.add1(
        &format!("{name}/split_b"),
        Op::FlatMap { rank: 2, f: FnSpec::SplitTile { rows: pk, cols: pn, grid: [gk, gn] } },
        &[b],
    );
    let view = |op: &str, src: ChannelId, stride: Vec<usize>, out: &mut Graph| {
        let buf = out.add1(&format!("{name}/buf_{op}"), Op::Bufferize { rank: 2 }, &[src]);
        let bb = out.add(&format!("{name}/bcast_{op}"), Op::Broadcast { n: 2 }, &[buf]);
        let s = Op::Streamify { repeat_rank: 0, stride, out_shape: vec![gm, gn, gk] };
        out.add1(&format!("{name}/walk_{op}"), s, &[bb[0], bb[1]])
    };
    let wa = view("a", z, vec![gk, 0, 1], &mut out);
    let wb = view("b", sb, vec![0, 1, gn], &mut out);
    let zz = out.add1(&format!("{name}/zip_sub"), Op::Zip, &[wa, wb]);
    let p = out.add1(&format!("{name}/mm_sub"), Op::Map { f: FnSpec::MatMul }, &[zz]);
    let s = out.add1(&format!("{name}/sum_k"), Op::Accum { rank: 1, f: FnSpec::Sum }, &[p]);
    let grid = Op::Accum { rank: 2, f: FnSpec::AssembleGrid { grid: [gm, gn] } };

    let (last, last_kind, last_name) = match accum_rank {
        None => (s, grid, format!("{name}/assemble")),
        Some(rank) => {
            let whole = out.add1(&format!("{name}/assemble"), grid, &[s]);
            (whole, Op::Accum { rank, f: FnSpec::Sum }, format!("{name}/sum"))
        }
    };
    out.channels[last].dst = Some(Endpoint { node, port: 0 });
    out.channels[y].src = Some(Endpoint { node, port: 0 });
    let tn = &mut out.nodes[node];
    tn.name = last_name;
    tn.kind = last_kind;
    tn.inputs = vec![last];
    infer_shapes(&out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::cost::CostConfig;
    use crate::graph::ValueType;
    use crate::shape::StreamShape;
    use crate::sim::{self, OffChipMemory, SimConfig};
    use crate::stream::DType;
    use crate::workloads::swiglu::start_token;
    use crate::workloads::{build_swiglu, dense_matmul, max_rel_error, random_matrix, rng, SwigluConfig};

    /// `count` row blocks of `[m, k]` times one `[k, n]` tile.
    fn matmul(m: usize, k: usize, n: usize, count: usize) -> (Graph, OffChipMemory, Vec<f32>, NodeId) {
        let mut r = rng(3);
        let a = random_matrix(&mut r, count * m * k, 1.0);
        let b = random_matrix(&mut r, k * n, 1.0);
        let want = dense_matmul(&a, &b, count * m, k, n);
        let mut mem = OffChipMemory::new();
        mem.insert(0x100, count * m, k, DType::Bf16, a);
        mem.insert(0x200, k, n, DType::Bf16, b);
        mem.alloc(0x300, count * m, n, DType::Bf16);
        let load = |base, shape, tile, stride| Op::LinearOffChipLoad {
            base_addr: base,
            tensor_shape: shape,
            tile,
            dtype: DType::Bf16,
            stride,
            out_shape: vec![count],
        };
        let mut g = Graph::new();
        let s = g.input("start", ValueType::Bool, StreamShape::of_static(&[1]));
        let sb = g.add("bcast", Op::Broadcast { n: 2 }, &[s]);
        let la = g.add1("load_a", load(0x100, [count * m, k], [m, k], vec![1]), &[sb[0]]);
        let lb = g.add1("load_b", load(0x200, [k, n], [k, n], vec![0]), &[sb[1]]);
        let z = g.add1("zip", Op::Zip, &[la, lb]);
        let node = g.nodes.len();
        let y = g.add1("mm", Op::Map { f: FnSpec::MatMul }, &[z]);
        g.add("store", Op::LinearOffChipStore { base_addr: 0x300 }, &[y]);
        (g, mem, want, node)
    }

    fn run(g: &Graph, mem: &OffChipMemory) -> Vec<f32> {
        let start = g.channel_by_name("start").unwrap();
        let r = sim::run(g, &SimConfig::default(), &HashMap::from([(start, start_token())]), mem.clone()).unwrap();
        r.memory.region(0x300).unwrap().data.clone()
    }

    #[test]
    fn logical_dims_leave_graph_unchanged() {
        let (g, _, _, node) = matmul(16, 8, 32, 1);
        let t = hierarchical_tiling_transform(&g, node, [16, 8, 32]).unwrap();
        assert_eq!(t, g);
    }

    #[test]
    fn sub_tiled_product_matches_dense() {
        let (g, mem, want, node) = matmul(64, 64, 64, 1);
        let t = hierarchical_tiling_transform(&g, node, [16, 16, 16]).unwrap();
        assert!(t.nodes.len() > g.nodes.len());
        assert!(max_rel_error(&run(&t, &mem), &want) < 1e-4);

        let (g, mem, want, node) = matmul(32, 16, 24, 3);
        let t = hierarchical_tiling_transform(&g, node, [8, 4, 12]).unwrap();
        assert!(max_rel_error(&run(&t, &mem), &want) < 1e-4);
    }

    #[test]
    fn off_chip_traffic_is_unchanged() {
        let (g, mem, _, node) = matmul(64, 64, 64, 2);
        let t = hierarchical_tiling_transform(&g, node, [16, 32, 16]).unwrap();
        let cost = |g: &Graph| {
            let infos = infer_shapes(g).unwrap();
            crate::cost::analyze(g, &infos, &CostConfig::default()).unwrap().eval(&Default::default()).unwrap().traffic
        };
        assert_eq!(cost(&g), cost(&t));
        let start = g.channel_by_name("start").unwrap();
        let bytes = |g: &Graph| {
            let r = sim::run(g, &SimConfig::default(), &HashMap::from([(start, start_token())]), mem.clone()).unwrap();
            r.metrics.offchip_read_bytes + r.metrics.offchip_write_bytes
        };
        assert_eq!(bytes(&g), bytes(&t));
    }

    #[test]
    fn rewrites_accumulating_matmul_inside_swiglu() {
        let cfg = SwigluConfig { batch: 16, hidden: 32, inter: 64, batch_tile: 8, inter_tile: 16, seed: 2 };
        let mut w = build_swiglu(&cfg).unwrap();
        for name in ["mm_w2", "mm_w1"] {
            let id = w.graph.node_by_name(name).unwrap().id;
            w.graph = hierarchical_tiling_transform(&w.graph, id, [4, 8, 8]).unwrap();
        }
        let r = w.simulate(&SimConfig::default()).unwrap();
        assert!(w.max_rel_error(&r) < 1e-4, "err {}", w.max_rel_error(&r));
    }

    #[test]
    fn rejects_indivisible_physical_dims() {
        let (g, _, _, node) = matmul(64, 64, 64, 1);
        assert!(hierarchical_tiling_transform(&g, node, [24, 16, 16]).is_err());
        assert!(hierarchical_tiling_transform(&g, node - 1, [16, 16, 16]).is_err());
    }
}
