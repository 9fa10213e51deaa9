//! Mixture-of-experts layer: route tokens to SwiGLU experts, pack them into
//! tiles (fixed-size with padding, or one tile sized to the expert's load),
//! and restore token order afterwards. Optionally groups experts into fewer
//! compute regions that fetch weights by address.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::graph::{flatmap_sym, partition_sym, ChannelId, FnSpec, Graph, OperatorKind as Op, ValueType};
use crate::shape::StreamShape;
use crate::sim::OffChipMemory;
use crate::stream::{DType, Selector, StreamValue, Token};
use crate::sym::Bindings;

use super::swiglu::{dense_swiglu, ffn, start_token, OUT_BASE, W1_BASE, W2_BASE, W3_BASE, X_BASE};
use super::traces::expert_counts;
use super::{config_err, random_matrix, rng, value, OutputRegion, Workload, WorkloadError};

/// Distance between per-expert weight tensors in the address map.
const EXPERT_STRIDE: u64 = 0x0010_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Tiling {
    /// Fixed batch tile of `tile` token rows, zero-padded.
    Static { tile: usize },
    /// One tile per expert holding exactly its tokens.
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub experts: usize,
    pub k: usize,
    pub hidden: usize,
    pub inter: usize,
    pub batch: usize,
    pub inter_tile: usize,
    pub tiling: Tiling,
    /// Compute regions shared by the experts; `None` gives every expert its own.
    #[serde(default)]
    pub regions: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            experts: 8,
            k: 2,
            hidden: 256,
            inter: 512,
            batch: 64,
            inter_tile: 128,
            tiling: Tiling::Dynamic,
            regions: None,
            seed: 0,
        }
    }
}

impl MoeConfig {
    pub fn check(&self, routes: &[Vec<usize>]) -> Result<(), WorkloadError> {
        let MoeConfig { experts: e, k, hidden: h, inter: f, batch: b, inter_tile: ft, .. } = *self;
        if e == 0 || k == 0 || k > e {
            return config_err(format!("need 1 <= k <= E, got k={k}, E={e}"));
        }
        if h == 0 || b == 0 || ft == 0 || f % ft != 0 {
            return config_err(format!("intermediate {f} not divisible by tile {ft}"));
        }
        if let Tiling::Static { tile: 0 } = self.tiling {
            return config_err("static batch tile must be positive");
        }
        if let Some(p) = self.regions {
            if p == 0 || e % p != 0 {
                return config_err(format!("{e} experts cannot be grouped into {p} regions"));
            }
        }
        if routes.len() != b {
            return config_err(format!("trace has {} tokens, batch is {b}", routes.len()));
        }
        for (t, r) in routes.iter().enumerate() {
            let mut ids = r.clone();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != k || r.len() != k || ids.iter().any(|&i| i >= e) {
                return config_err(format!("token {t} routed to {r:?}; need {k} distinct experts below {e}"));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let t = match self.tiling {
            Tiling::Static { tile } => format!("static{tile}"),
            Tiling::Dynamic => "dynamic".into(),
        };
        match self.regions {
            Some(p) => format!("moe_{t}_p{p}"),
            None => format!("moe_{t}"),
        }
    }
}

struct Weights {
    w1: Vec<Vec<f32>>,
    w3: Vec<Vec<f32>>,
    w2: Vec<Vec<f32>>,
}

/// A stream of packed activation tiles and, for static tiling, the number of
/// valid rows in each.
struct Packed {
    tiles: ChannelId,
    counts: Option<ChannelId>,
}

fn pack(g: &mut Graph, cfg: &MoeConfig, e: usize, tokens: ChannelId) -> Packed {
    let deep = cfg.batch;
    match cfg.tiling {
        Tiling::Static { tile } => {
            let rs = g.add(&format!("e{e}/reshape"), Op::Reshape { dim: 0, chunk: tile, pad: Some(0.0) }, &[tokens]);
            let tiles = g.add1(&format!("e{e}/retile"), Op::Accum { rank: 1, f: FnSpec::RetileRow }, &[rs[0]]);
            let counts = g.add1(&format!("e{e}/count"), Op::Accum { rank: 1, f: FnSpec::CountValid }, &[rs[1]]);
            g.set_capacity(counts, deep);
            Packed { tiles, counts: Some(counts) }
        }
        Tiling::Dynamic => {
            let pr = g.add1(&format!("e{e}/promote"), Op::Promote, &[tokens]);
            let tiles = g.add1(&format!("e{e}/retile"), Op::Accum { rank: 1, f: FnSpec::RetileRow }, &[pr]);
            Packed { tiles, counts: None }
        }
    }
}

fn linear_load(base: u64, shape: [usize; 2], tile: [usize; 2], n: usize) -> Op {
    Op::LinearOffChipLoad { base_addr: base, tensor_shape: shape, tile, dtype: DType::Bf16, stride: vec![1], out_shape: vec![n] }
}

fn random_load(base: u64, shape: [usize; 2], tile: [usize; 2]) -> Op {
    Op::RandomOffChipLoad { base_addr: base, tensor_shape: shape, tile, dtype: DType::Bf16 }
}

/// Expands packed expert outputs back into one row per routed token.
fn unpack(g: &mut Graph, b: &mut Bindings, e: usize, y: ChannelId, counts: Option<ChannelId>, rows: usize, deep: usize) -> ChannelId {
    let src = match counts {
        Some(c) => g.add1(&format!("e{e}/zip_count"), Op::Zip, &[y, c]),
        None => y,
    };
    let id = g.nodes.len();
    let out = g.add1(&format!("e{e}/unpack"), Op::FlatMap { rank: 0, f: FnSpec::RetileStreamify }, &[src]);
    b.set(flatmap_sym(id, 0), rows as i64);
    g.set_capacity(out, deep);
    out
}

pub fn build_moe(cfg: &MoeConfig, routes: &[Vec<usize>]) -> Result<Workload, WorkloadError> {
    cfg.check(routes)?;
    let MoeConfig { experts: ne, k, hidden: h, inter: f, batch: nb, inter_tile: ft, seed, .. } = *cfg;
    let nf = f / ft;
    let counts = expert_counts(routes, ne);

    let mut r = rng(seed);
    let x = random_matrix(&mut r, nb * h, 1.0);
    let mut w = Weights { w1: vec![], w3: vec![], w2: vec![] };
    for _ in 0..ne {
        w.w1.push(random_matrix(&mut r, h * f, 1.0 / (h as f32).sqrt()));
        w.w3.push(random_matrix(&mut r, h * f, 1.0 / (h as f32).sqrt()));
        w.w2.push(random_matrix(&mut r, f * h, 1.0 / (f as f32).sqrt()));
    }
    let mut reference = vec![0f32; nb * h];
    for e in 0..ne {
        let toks: Vec<usize> = (0..nb).filter(|t| routes[*t].contains(&e)).collect();
        if toks.is_empty() {
            continue;
        }
        let xe: Vec<f32> = toks.iter().flat_map(|t| x[t * h..(t + 1) * h].iter().copied()).collect();
        let ye = dense_swiglu(&xe, &w.w1[e], &w.w3[e], &w.w2[e], toks.len(), h, f);
        for (i, t) in toks.iter().enumerate() {
            for j in 0..h {
                reference[t * h + j] += ye[i * h + j];
            }
        }
    }

    let mut mem = OffChipMemory::new();
    mem.insert(X_BASE, nb, h, DType::Bf16, x);
    mem.alloc(OUT_BASE, nb, h, DType::Bf16);
    if cfg.regions.is_some() {
        mem.insert(W1_BASE, ne * h, f, DType::Bf16, w.w1.concat());
        mem.insert(W3_BASE, ne * h, f, DType::Bf16, w.w3.concat());
        mem.insert(W2_BASE, ne * f, h, DType::Bf16, w.w2.concat());
    } else {
        for e in 0..ne {
            let off = (e as u64 + 1) * EXPERT_STRIDE;
            mem.insert(W1_BASE + off, h, f, DType::Bf16, w.w1[e].clone());
            mem.insert(W3_BASE + off, h, f, DType::Bf16, w.w3[e].clone());
            mem.insert(W2_BASE + off, f, h, DType::Bf16, w.w2[e].clone());
        }
    }

    let mut g = Graph::new();
    let mut b = Bindings::new();
    let start = g.input("start", ValueType::Bool, StreamShape::of_static(&[1]));
    let sel = g.input("routes", ValueType::Selector { width: ne }, StreamShape::of_static(&[nb as i64]));
    let xs = g.add1("load_x", linear_load(X_BASE, [nb, h], [1, h], nb), &[start]);
    let xs = g.add1("flatten_x", Op::Flatten { min: 0, max: 1 }, &[xs]);
    let sb = g.add("bcast_routes", Op::Broadcast { n: 2 }, &[sel]);
    g.set_capacity(sb[1], nb);
    g.channels[sb[1]].k_hot = Some(k);
    let pid = g.nodes.len();
    let parts = g.add("route", Op::Partition { rank: 0, num_consumers: ne }, &[xs, sb[0]]);
    for (e, c) in counts.iter().enumerate() {
        b.set(partition_sym(pid, e), *c as i64);
    }
    let packed: Vec<Packed> = (0..ne).map(|e| pack(&mut g, cfg, e, parts[e])).collect();

    let mut rows = Vec::with_capacity(ne);
    match cfg.regions {
        None => {
            for (e, p) in packed.iter().enumerate() {
                let off = (e as u64 + 1) * EXPERT_STRIDE;
                let xb = g.add(&format!("e{e}/bcast_x"), Op::Broadcast { n: 4 }, &[p.tiles]);
                let l1 = g.add1(&format!("e{e}/load_w1"), linear_load(W1_BASE + off, [h, f], [h, ft], nf), &[xb[0]]);
                let l3 = g.add1(&format!("e{e}/load_w3"), linear_load(W3_BASE + off, [h, f], [h, ft], nf), &[xb[1]]);
                let l2 = g.add1(&format!("e{e}/load_w2"), linear_load(W2_BASE + off, [f, h], [ft, h], nf), &[xb[2]]);
                let y = ffn(&mut g, &format!("e{e}/"), xb[3], l1, l3, l2);
                rows.push(unpack(&mut g, &mut b, e, y, p.counts, counts[e], nb));
            }
        }
        Some(np) => {
            rows.resize(ne, usize::MAX);
            let per = ne / np;
            for reg in 0..np {
                let members: Vec<usize> = (0..per).map(|j| reg + j * np).collect();
                let p = format!("r{reg}/");
                let ins: Vec<ChannelId> = members
                    .iter()
                    .map(|&e| match packed[e].counts {
                        Some(c) => g.add1(&format!("e{e}/zip_count_in"), Op::Zip, &[packed[e].tiles, c]),
                        None => packed[e].tiles,
                    })
                    .collect();
                let m = g.add(&format!("{p}merge"), Op::EagerMerge { inputs: per, rank: 0 }, &ins);
                let ms = g.add(&format!("{p}bcast_sel"), Op::Broadcast { n: 2 }, &[m[1]]);
                g.set_capacity(ms[1], nb);
                let addrs = g.add1(
                    &format!("{p}weight_addrs"),
                    Op::FlatMap { rank: 1, f: FnSpec::WeightTileAddrs { experts: members.clone(), tiles_per_expert: nf } },
                    &[ms[0]],
                );
                let ab = g.add(&format!("{p}bcast_addrs"), Op::Broadcast { n: 3 }, &[addrs]);
                let l1 = g.add1(&format!("{p}load_w1"), random_load(W1_BASE, [ne * h, f], [h, ft]), &[ab[0]]);
                let l3 = g.add1(&format!("{p}load_w3"), random_load(W3_BASE, [ne * h, f], [h, ft]), &[ab[1]]);
                let l2 = g.add1(&format!("{p}load_w2"), random_load(W2_BASE, [ne * f, h], [ft, h]), &[ab[2]]);
                let (tiles, cnt) = match cfg.tiling {
                    Tiling::Static { .. } => {
                        let d = g.add(&format!("{p}bcast_packed"), Op::Broadcast { n: 2 }, &[m[0]]);
                        let t = g.add1(&format!("{p}get_tile"), Op::Map { f: FnSpec::TupleGet { index: 0 } }, &[d[0]]);
                        let c = g.add1(&format!("{p}get_count"), Op::Map { f: FnSpec::TupleGet { index: 1 } }, &[d[1]]);
                        g.set_capacity(c, nb);
                        (t, Some(c))
                    }
                    Tiling::Dynamic => (m[0], None),
                };
                let y = ffn(&mut g, &p, tiles, l1, l3, l2);
                let y = match cnt {
                    Some(c) => g.add1(&format!("{p}zip_count"), Op::Zip, &[y, c]),
                    None => y,
                };
                let rid = g.nodes.len();
                let outs = g.add(&format!("{p}split"), Op::Partition { rank: 0, num_consumers: per }, &[y, ms[1]]);
                for (j, &e) in members.iter().enumerate() {
                    let tiles_e = match cfg.tiling {
                        Tiling::Static { tile } => counts[e].div_ceil(tile),
                        Tiling::Dynamic => counts[e].min(1),
                    };
                    b.set(partition_sym(rid, j), tiles_e as i64);
                    g.set_capacity(outs[j], nb);
                    rows[e] = unpack(&mut g, &mut b, e, outs[j], None, counts[e], nb);
                }
            }
        }
    }

    let mut re_in = rows;
    re_in.push(sb[1]);
    let re = g.add1("restore_order", Op::Reassemble { inputs: ne, rank: 0 }, &re_in);
    let y = g.add1("combine", Op::Accum { rank: 1, f: FnSpec::Sum }, &[re]);
    g.add("store_y", Op::LinearOffChipStore { base_addr: OUT_BASE }, &[y]);

    let mut sel_tokens: Vec<Token> =
        routes.iter().map(|r| value(StreamValue::Selector(Selector::from_indices(ne, r)))).collect();
    sel_tokens.push(Token::Done);
    Ok(Workload {
        name: cfg.label(),
        graph: g,
        inputs: HashMap::from([(start, start_token()), (sel, sel_tokens)]),
        memory: mem,
        bindings: b,
        output: OutputRegion { base: OUT_BASE, rows: nb, cols: h },
        reference,
        dispatch: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostConfig;
    use crate::sim::SimConfig;
    use crate::workloads::traces::{routes_for_iteration, synth_routes, RoutingDist, RoutingSpec};

    fn small(tiling: Tiling, regions: Option<usize>) -> MoeConfig {
        MoeConfig { experts: 4, k: 2, hidden: 16, inter: 32, batch: 12, inter_tile: 16, tiling, regions, seed: 2 }
    }

    fn routes(active: usize, seed: u64) -> Vec<Vec<usize>> {
        let spec = RoutingSpec { experts: 4, k: 2, tokens: 12, dist: RoutingDist::Zipf { s: 1.0 }, active: Some(active), seed };
        routes_for_iteration(&synth_routes(&spec).unwrap(), 0)
    }

    fn run(cfg: &MoeConfig, r: &[Vec<usize>]) -> Vec<f32> {
        let w = build_moe(cfg, r).unwrap();
        let res = w.simulate(&SimConfig::default()).unwrap();
        assert!(w.max_rel_error(&res) < 1e-4, "{}: err {}", cfg.label(), w.max_rel_error(&res));
        let (_, ev) = w.cost(&CostConfig::default()).unwrap();
        assert_eq!(ev.traffic as u64, res.metrics.offchip_read_bytes + res.metrics.offchip_write_bytes, "{}", cfg.label());
        w.output_data(&res)
    }

    #[test]
    fn all_variants_agree() {
        let r = routes(4, 1);
        let base = run(&small(Tiling::Dynamic, None), &r);
        for cfg in [
            small(Tiling::Static { tile: 4 }, None),
            small(Tiling::Static { tile: 12 }, None),
            small(Tiling::Dynamic, Some(2)),
            small(Tiling::Static { tile: 4 }, Some(1)),
            small(Tiling::Dynamic, Some(4)),
        ] {
            assert_eq!(run(&cfg, &r), base, "{}", cfg.label());
        }
    }

    #[test]
    fn observed_shapes_match_inferred() {
        let r = routes(3, 6);
        for cfg in [
            small(Tiling::Dynamic, None),
            small(Tiling::Static { tile: 5 }, None),
            small(Tiling::Dynamic, Some(2)),
            small(Tiling::Static { tile: 3 }, Some(2)),
        ] {
            let w = build_moe(&cfg, &r).unwrap();
            let res = w.simulate(&SimConfig { record_channels: true, ..SimConfig::default() }).unwrap();
            assert_eq!(res.traces.len(), w.graph.channels.len());
            let bad = crate::workloads::shape_mismatches(&w.graph, &w.infos().unwrap(), &res.traces, &w.bindings);
            assert!(bad.is_empty(), "{}: {bad:#?}", cfg.label());
        }
    }

    #[test]
    fn idle_expert_loads_no_weights_when_dynamic() {
        let r = routes(3, 4);
        let w = build_moe(&small(Tiling::Dynamic, None), &r).unwrap();
        let (rep, ev) = w.cost(&CostConfig::default()).unwrap();
        for (n, t) in rep.nodes.iter().zip(&ev.per_node_traffic) {
            if n.name.starts_with("e3/load") {
                assert_eq!(*t, 0, "{}", n.name);
            }
        }
    }

    #[test]
    fn rejects_bad_traces() {
        let cfg = small(Tiling::Dynamic, None);
        assert!(build_moe(&cfg, &routes(4, 1)[..5]).is_err());
        let mut r = routes(4, 1);
        r[0] = vec![1, 1];
        assert!(build_moe(&cfg, &r).is_err());
        assert!(build_moe(&small(Tiling::Dynamic, Some(3)), &routes(4, 1)).is_err());
    }
}
