use std::collections::HashMap;

use super::*;
use crate::graph::{FnSpec, OperatorKind as Op, ValueType};
use crate::shape::{ShapeDim, StreamShape};
use crate::stream::{DType, Selector, StreamValue, Tile, Token};

fn s(x: f32) -> Token {
    Token::Value(StreamValue::Tile(Tile::scalar(x, DType::F32)))
}

fn sel(w: usize, idx: &[usize]) -> Token {
    Token::Value(StreamValue::Selector(Selector::from_indices(w, idx)))
}

fn shape(dims: &[&str]) -> StreamShape {
    StreamShape::new(dims.iter().map(|d| ShapeDim::parse(d).unwrap()).collect())
}

fn scalar() -> ValueType {
    ValueType::tile(1, 1, DType::F32)
}

/// Scalar payloads with stops rendered as `|k` and Done as `.`.
fn render(toks: &[Token]) -> String {
    toks.iter()
        .map(|t| match t {
            Token::Value(StreamValue::Tile(t)) => format!("{}", t.data[0]),
            Token::Value(StreamValue::Bool(b)) => format!("{b}"),
            Token::Value(StreamValue::Selector(x)) => format!("#{}", x.indices().map(|i| i.to_string()).collect::<String>()),
            Token::Value(StreamValue::Tuple(v)) => format!(
                "({})",
                v.iter().map(|x| x.as_tile().map_or("?".into(), |t| t.data[0].to_string())).collect::<Vec<_>>().join(",")
            ),
            Token::Value(_) => "v".into(),
            Token::Stop(k) => format!("|{k}"),
            Token::Done => ".".into(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn run_with(g: &Graph, cfg: &SimConfig, inputs: Vec<(ChannelId, Vec<Token>)>, mem: OffChipMemory) -> SimResult {
    run(g, cfg, &inputs.into_iter().collect::<HashMap<_, _>>(), mem).unwrap()
}

fn run_plain(g: &Graph, inputs: Vec<(ChannelId, Vec<Token>)>) -> SimResult {
    run_with(g, &SimConfig::default(), inputs, OffChipMemory::new())
}

#[test]
fn map_identity_is_transparent() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["2", "3"]));
    let y = g.add1("id", Op::Map { f: FnSpec::unary("identity") }, &[x]);
    g.output(y);
    let toks = vec![s(1.), s(2.), s(3.), Token::Stop(1), s(4.), s(5.), s(6.), Token::Stop(1), Token::Done];
    let r = run_plain(&g, vec![(x, toks.clone())]);
    assert_eq!(r.outputs[&y], toks);
    assert_eq!(r.metrics.flops, 0);
}

#[test]
fn accum_sums_rows() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["2", "3"]));
    let y = g.add1("sum", Op::Accum { rank: 1, f: FnSpec::Sum }, &[x]);
    g.output(y);
    let toks = vec![s(1.), s(2.), s(3.), Token::Stop(1), s(4.), s(5.), s(6.), Token::Done];
    let r = run_plain(&g, vec![(x, toks)]);
    assert_eq!(render(&r.outputs[&y]), "6 15 .");
}

#[test]
fn matmul_roofline_per_invocation() {
    let t = ValueType::tile(16, 16, DType::Bf16);
    let n = 8;
    let mut g = Graph::new();
    let x = g.input("ab", ValueType::zip(&t, &t), StreamShape::of_static(&[n]));
    let y = g.add1("mm", Op::Map { f: FnSpec::MatMul }, &[x]);
    g.last_node_mut().compute_bw = Some(64);
    g.output(y);
    let pair = StreamValue::Tuple(vec![
        StreamValue::Tile(Tile::new(16, 16, DType::Bf16, vec![1.0; 256])),
        StreamValue::Tile(Tile::new(16, 16, DType::Bf16, vec![1.0; 256])),
    ]);
    let mut toks: Vec<Token> = (0..n).map(|_| Token::Value(pair.clone())).collect();
    toks.push(Token::Done);
    let cfg = SimConfig { onchip_bw: 256, ..SimConfig::default() };
    let r = run_with(&g, &cfg, vec![(x, toks)], OffChipMemory::new());
    // max(1024/256, 8192/64, 512/256)
    assert_eq!(r.metrics.per_node["mm"].busy_cycles, 128 * n as u64);
    assert_eq!(r.metrics.cycles, 128 * n as u64);
    assert_eq!(r.metrics.flops, 8192 * n as u64);
    assert!((r.metrics.compute_utilization - 1.0).abs() < 1e-9);
}

#[test]
fn bufferize_groups_rows() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["2", "n"]));
    let y = g.add1("buf", Op::Bufferize { rank: 1 }, &[x]);
    g.output(y);
    let r = run_plain(&g, vec![(x, vec![s(1.), s(2.), Token::Stop(1), s(3.), Token::Done])]);
    let dims: Vec<Vec<usize>> = r.outputs[&y]
        .iter()
        .filter_map(|t| match t {
            Token::Value(StreamValue::Buffer(b)) => Some(b.dims.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(dims, vec![vec![2], vec![1]]);
    assert_eq!(r.live_buffers, 0);
    // the sink frees the first buffer before the second is built
    assert_eq!(r.metrics.peak_onchip_bytes, 4 * 2);
}

#[test]
fn bufferize_streamify_round_trip() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["2", "3"]));
    let refs = g.input("ref", ValueType::Bool, shape(&["2"]));
    let b = g.add1("buf", Op::Bufferize { rank: 1 }, &[x]);
    let y = g.add1("view", Op::Streamify { repeat_rank: 0, stride: vec![1], out_shape: vec![3] }, &[b, refs]);
    g.output(y);
    let toks = vec![s(1.), s(2.), s(3.), Token::Stop(1), s(4.), s(5.), s(6.), Token::Stop(1), Token::Done];
    let flag = Token::Value(StreamValue::Bool(true));
    let r = run_plain(&g, vec![(x, toks.clone()), (refs, vec![flag.clone(), flag, Token::Done])]);
    assert_eq!(r.outputs[&y], toks);
    assert_eq!(r.live_buffers, 0);
}

#[test]
fn streamify_repeats_buffer_per_reference() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["1", "2"]));
    let refs = g.input("ref", ValueType::Bool, shape(&["1", "3"]));
    let b = g.add1("buf", Op::Bufferize { rank: 1 }, &[x]);
    let y = g.add1("view", Op::Streamify { repeat_rank: 1, stride: vec![1], out_shape: vec![2] }, &[b, refs]);
    g.output(y);
    let flag = Token::Value(StreamValue::Bool(true));
    let r = run_plain(
        &g,
        vec![(x, vec![s(7.), s(8.), Token::Done]), (refs, vec![flag.clone(), flag.clone(), flag, Token::Done])],
    );
    assert_eq!(render(&r.outputs[&y]), "7 8 |1 7 8 |1 7 8 |1 |2 .");
    assert_eq!(r.live_buffers, 0);
}

fn partition_graph(n: usize, rank: usize, data_shape: &[&str], sel_shape: &[&str]) -> (Graph, ChannelId, ChannelId, Vec<ChannelId>) {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(data_shape));
    let k = g.input("sel", ValueType::Selector { width: n }, shape(sel_shape));
    let outs = g.add("part", Op::Partition { rank, num_consumers: n }, &[x, k]);
    for &o in &outs {
        g.output(o);
    }
    (g, x, k, outs)
}

#[test]
fn partition_routes_chunks() {
    let (g, x, k, outs) = partition_graph(2, 1, &["2", "ragged:L"], &["2"]);
    let data = vec![s(0.), s(1.), Token::Stop(1), s(2.), Token::Done];
    let r = run_plain(&g, vec![(x, data), (k, vec![sel(2, &[0]), sel(2, &[1]), Token::Done])]);
    assert_eq!(render(&r.outputs[&outs[0]]), "0 1 |1 .");
    assert_eq!(render(&r.outputs[&outs[1]]), "2 |1 .");
}

#[test]
fn partition_multi_hot_replicates() {
    let (g, x, k, outs) = partition_graph(2, 0, &["2"], &["2"]);
    let r = run_plain(&g, vec![(x, vec![s(5.), s(6.), Token::Done]), (k, vec![sel(2, &[0, 1]), sel(2, &[1]), Token::Done])]);
    assert_eq!(render(&r.outputs[&outs[0]]), "5 .");
    assert_eq!(render(&r.outputs[&outs[1]]), "5 6 .");
}

#[test]
fn partition_then_reassemble_is_identity() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["6"]));
    let k = g.input("sel", ValueType::Selector { width: 3 }, shape(&["6"]));
    g.channels[k].k_hot = Some(1);
    let ks = g.add("ksplit", Op::Broadcast { n: 2 }, &[k]);
    g.channels[ks[1]].k_hot = Some(1);
    let parts = g.add("part", Op::Partition { rank: 0, num_consumers: 3 }, &[x, ks[0]]);
    let mut ins = parts.clone();
    ins.push(ks[1]);
    let y = g.add1("re", Op::Reassemble { inputs: 3, rank: 0 }, &ins);
    g.output(y);
    let picks = [2, 0, 0, 1, 2, 1];
    let mut sels: Vec<Token> = picks.iter().map(|p| sel(3, &[*p])).collect();
    sels.push(Token::Done);
    let data: Vec<Token> = (0..6).map(|i| s(i as f32)).chain([Token::Done]).collect();
    let r = run_plain(&g, vec![(x, data), (k, sels)]);
    assert_eq!(render(&r.outputs[&y]), "0 |1 1 |1 2 |1 3 |1 4 |1 5 |1 .");
}

#[test]
fn reassemble_rejects_exhausted_input() {
    let mut g = Graph::new();
    let a = g.input("a", scalar(), shape(&["1"]));
    let b = g.input("b", scalar(), shape(&["1"]));
    let k = g.input("sel", ValueType::Selector { width: 2 }, shape(&["2"]));
    let y = g.add1("re", Op::Reassemble { inputs: 2, rank: 0 }, &[a, b, k]);
    g.output(y);
    let inputs: HashMap<_, _> = [
        (a, vec![s(1.), Token::Done]),
        (b, vec![s(2.), Token::Done]),
        (k, vec![sel(2, &[0]), sel(2, &[0]), Token::Done]),
    ]
    .into_iter()
    .collect();
    let e = run(&g, &SimConfig::default(), &inputs, OffChipMemory::new()).unwrap_err();
    assert!(e.to_string().contains("exhausted"), "{e}");
}

#[test]
fn eager_merge_follows_arrival_and_replays() {
    let mut g = Graph::new();
    let a = g.input("a", scalar(), shape(&["3"]));
    let b = g.input("b", scalar(), shape(&["3"]));
    let outs = g.add("merge", Op::EagerMerge { inputs: 2, rank: 0 }, &[a, b]);
    g.output(outs[0]);
    g.output(outs[1]);
    let r = run_plain(
        &g,
        vec![(a, vec![s(1.), s(2.), s(3.), Token::Done]), (b, vec![s(10.), s(20.), s(30.), Token::Done])],
    );
    assert_eq!(render(&r.outputs[&outs[0]]), "1 10 2 20 3 30 .");
    assert_eq!(render(&r.outputs[&outs[1]]), "#0 #1 #0 #1 #0 #1 .");

    // replaying the recorded selector through Reassemble restores the merged order
    let mut g2 = Graph::new();
    let a2 = g2.input("a", scalar(), shape(&["3"]));
    let b2 = g2.input("b", scalar(), shape(&["3"]));
    let k2 = g2.input("sel", ValueType::Selector { width: 2 }, shape(&["6"]));
    let y = g2.add1("re", Op::Reassemble { inputs: 2, rank: 0 }, &[a2, b2, k2]);
    g2.output(y);
    let r2 = run_plain(
        &g2,
        vec![
            (a2, vec![s(1.), s(2.), s(3.), Token::Done]),
            (b2, vec![s(10.), s(20.), s(30.), Token::Done]),
            (k2, r.outputs[&outs[1]].clone()),
        ],
    );
    let flat: Vec<Token> = r2.outputs[&y].iter().filter(|t| t.is_value()).cloned().collect();
    let merged: Vec<Token> = r.outputs[&outs[0]].iter().filter(|t| t.is_value()).cloned().collect();
    assert_eq!(flat, merged);
}

#[test]
fn reshape_pads_last_chunk() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["10"]));
    let outs = g.add("rs", Op::Reshape { dim: 0, chunk: 4, pad: Some(0.0) }, &[x]);
    g.output(outs[0]);
    g.output(outs[1]);
    let data: Vec<Token> = (1..=10).map(|i| s(i as f32)).chain([Token::Done]).collect();
    let r = run_plain(&g, vec![(x, data)]);
    assert_eq!(render(&r.outputs[&outs[0]]), "1 2 3 4 |1 5 6 7 8 |1 9 10 0 0 |1 .");
    assert_eq!(
        render(&r.outputs[&outs[1]]),
        "false false false false |1 false false false false |1 false false true true |1 ."
    );
}

#[test]
fn flatten_merges_inner_dims() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["2", "3"]));
    let y = g.add1("fl", Op::Flatten { min: 0, max: 1 }, &[x]);
    g.output(y);
    let toks = vec![s(1.), s(2.), s(3.), Token::Stop(1), s(4.), s(5.), s(6.), Token::Done];
    let r = run_plain(&g, vec![(x, toks)]);
    assert_eq!(render(&r.outputs[&y]), "1 2 3 4 5 6 .");
}

#[test]
fn zip_with_broadcast_copy() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["3"]));
    let c = g.add("bc", Op::Broadcast { n: 2 }, &[x]);
    let y = g.add1("zip", Op::Zip, &[c[0], c[1]]);
    g.output(y);
    let r = run_plain(&g, vec![(x, vec![s(1.), s(2.), s(3.), Token::Done])]);
    assert_eq!(render(&r.outputs[&y]), "(1,1) (2,2) (3,3) .");
}

#[test]
fn promote_and_expand() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["3"]));
    let p = g.add1("pr", Op::Promote, &[x]);
    g.output(p);
    let r = run_plain(&g, vec![(x, vec![s(1.), s(2.), s(3.), Token::Done])]);
    assert_eq!(render(&r.outputs[&p]), "1 2 3 |1 .");

    let mut g = Graph::new();
    let d = g.input("d", scalar(), shape(&["2", "1"]));
    let refs = g.input("ref", ValueType::Bool, shape(&["2", "3"]));
    let y = g.add1("ex", Op::Expand { depth: 0 }, &[d, refs]);
    g.output(y);
    let flag = Token::Value(StreamValue::Bool(true));
    let mut rt = Vec::new();
    for _ in 0..2 {
        rt.extend([flag.clone(), flag.clone(), flag.clone(), Token::Stop(1)]);
    }
    rt.push(Token::Done);
    let r = run_plain(&g, vec![(d, vec![s(4.), Token::Stop(1), s(9.), Token::Done]), (refs, rt)]);
    assert_eq!(render(&r.outputs[&y]), "4 4 4 |1 9 9 9 |1 .");
}

#[test]
fn offchip_load_walks_tiles() {
    let mut mem = OffChipMemory::new();
    mem.insert(0x1000, 4, 4, DType::F32, (0..16).map(|v| v as f32).collect());
    let mut g = Graph::new();
    let r0 = g.input("ref", ValueType::Bool, shape(&["1"]));
    let y = g.add1(
        "ld",
        Op::LinearOffChipLoad {
            base_addr: 0x1000,
            tensor_shape: [4, 4],
            tile: [2, 2],
            dtype: DType::F32,
            stride: vec![1, 2],
            out_shape: vec![2, 2],
        },
        &[r0],
    );
    g.output(y);
    let r = run_with(&g, &SimConfig::default(), vec![(r0, vec![Token::Value(StreamValue::Bool(true)), Token::Done])], mem);
    // column-major walk over the 2x2 tile grid: tiles 0, 2, 1, 3
    assert_eq!(render(&r.outputs[&y]), "0 8 |1 2 10 |1 |2 .");
    assert_eq!(r.metrics.offchip_read_bytes, 4 * 16);
}

#[test]
fn random_load_follows_addresses() {
    let mut mem = OffChipMemory::new();
    mem.insert(0, 3, 2, DType::F32, vec![0., 0., 1., 1., 2., 2.]);
    let mut g = Graph::new();
    let a = g.input("addr", ValueType::Addr, shape(&["3"]));
    let y = g.add1(
        "ld",
        Op::RandomOffChipLoad { base_addr: 0, tensor_shape: [3, 2], tile: [1, 2], dtype: DType::F32 },
        &[a],
    );
    g.output(y);
    let addrs = [2, 0, 1].iter().map(|i| Token::Value(StreamValue::Addr(*i))).chain([Token::Done]).collect();
    let r = run_with(&g, &SimConfig::default(), vec![(a, addrs)], mem);
    assert_eq!(render(&r.outputs[&y]), "2 0 1 .");
}

#[test]
fn store_then_load_round_trip() {
    let t = Tile::new(16, 16, DType::Bf16, (0..256).map(|v| v as f32).collect());
    let mut mem = OffChipMemory::new();
    mem.alloc(0, 16, 16, DType::Bf16);
    let mut g = Graph::new();
    let x = g.input("x", ValueType::tile(16, 16, DType::Bf16), shape(&["1"]));
    g.add("st", Op::LinearOffChipStore { base_addr: 0 }, &[x]);
    let r = run_with(&g, &SimConfig::default(), vec![(x, vec![Token::Value(StreamValue::Tile(t.clone())), Token::Done])], mem);
    assert_eq!(r.memory.peek_tile(0, [16, 16], 0).unwrap(), t);
    assert_eq!(r.metrics.offchip_write_bytes, 512);

    let mut g = Graph::new();
    let a = g.input("addr", ValueType::Addr, shape(&["1"]));
    let y = g.add1(
        "ld",
        Op::RandomOffChipLoad { base_addr: 0, tensor_shape: [16, 16], tile: [16, 16], dtype: DType::Bf16 },
        &[a],
    );
    g.output(y);
    let r = run_with(&g, &SimConfig::default(), vec![(a, vec![Token::Value(StreamValue::Addr(0)), Token::Done])], r.memory);
    assert_eq!(r.outputs[&y][0], Token::Value(StreamValue::Tile(t)));
}

#[test]
fn random_store_acknowledges_writes() {
    let mut mem = OffChipMemory::new();
    mem.alloc(0, 2, 1, DType::F32);
    let mut g = Graph::new();
    let a = g.input("addr", ValueType::Addr, shape(&["2"]));
    let d = g.input("data", scalar(), shape(&["2"]));
    let y = g.add1(
        "st",
        Op::RandomOffChipStore { base_addr: 0, tensor_shape: [2, 1], tile: [1, 1], dtype: DType::F32 },
        &[a, d],
    );
    g.output(y);
    let addrs = vec![Token::Value(StreamValue::Addr(1)), Token::Value(StreamValue::Addr(0)), Token::Done];
    let r = run_with(&g, &SimConfig::default(), vec![(a, addrs), (d, vec![s(5.), s(6.), Token::Done])], mem);
    assert_eq!(render(&r.outputs[&y]), "true true .");
    assert_eq!(r.memory.region(0).unwrap().data, vec![6.0, 5.0]);
}

#[test]
fn out_of_bounds_address_is_reported() {
    let mut mem = OffChipMemory::new();
    mem.alloc(0, 2, 1, DType::F32);
    let mut g = Graph::new();
    let a = g.input("addr", ValueType::Addr, shape(&["1"]));
    let y = g.add1(
        "ld",
        Op::RandomOffChipLoad { base_addr: 0, tensor_shape: [2, 1], tile: [1, 1], dtype: DType::F32 },
        &[a],
    );
    g.output(y);
    let inputs: HashMap<_, _> = [(a, vec![Token::Value(StreamValue::Addr(5)), Token::Done])].into_iter().collect();
    assert!(matches!(run(&g, &SimConfig::default(), &inputs, mem), Err(SimError::OutOfBounds(_))));
}

#[test]
fn cycle_reports_deadlock() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["2"]));
    let back = g.channel("loop");
    g.declare(back, scalar(), shape(&["2"]));
    let z = g.add1("zip", Op::Zip, &[x, back]);
    let m = g.add1("first", Op::Map { f: FnSpec::TupleGet { index: 0 } }, &[z]);
    let outs = g.add_with_outputs("bc", Op::Broadcast { n: 2 }, &[m], &[Some(back), None]);
    g.output(outs[1]);
    let inputs: HashMap<_, _> = [(x, vec![s(1.), s(2.), Token::Done])].into_iter().collect();
    match run(&g, &SimConfig::default(), &inputs, OffChipMemory::new()) {
        Err(SimError::Deadlock { blocked, .. }) => assert!(blocked.iter().any(|b| b.contains("`x`")), "{blocked:?}"),
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn pool_capacity_is_enforced() {
    let mut g = Graph::new();
    let x = g.input("x", scalar(), shape(&["1", "4"]));
    let y = g.add1("buf", Op::Bufferize { rank: 1 }, &[x]);
    g.output(y);
    let cfg = SimConfig { onchip_capacity: Some(8), ..SimConfig::default() };
    let inputs: HashMap<_, _> = [(x, vec![s(1.), s(2.), s(3.), s(4.), Token::Done])].into_iter().collect();
    assert!(matches!(run(&g, &cfg, &inputs, OffChipMemory::new()), Err(SimError::PoolExhausted { .. })));
}

#[test]
fn repeated_runs_are_identical() {
    let mut g = Graph::new();
    let a = g.input("a", scalar(), shape(&["4"]));
    let b = g.input("b", scalar(), shape(&["4"]));
    let outs = g.add("merge", Op::EagerMerge { inputs: 2, rank: 0 }, &[a, b]);
    let y = g.add1("sq", Op::Map { f: FnSpec::unary("exp") }, &[outs[0]]);
    g.output(y);
    g.output(outs[1]);
    let inp = || {
        vec![
            (a, (0..4).map(|i| s(i as f32)).chain([Token::Done]).collect()),
            (b, (0..4).map(|i| s(-i as f32)).chain([Token::Done]).collect()),
        ]
    };
    let r1 = run_plain(&g, inp());
    let r2 = run_plain(&g, inp());
    assert_eq!(r1.metrics, r2.metrics);
    assert_eq!(r1.outputs, r2.outputs);
}
