//! Grouped-query attention decode over a batch of requests with uneven KV
//! lengths, spread across parallel regions by a static or a greedy dynamic
//! dispatcher.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::graph::{flatmap_sym, partition_sym, ChannelId, FnSpec, Graph, NodeId, OperatorKind as Op, ValueType};
use crate::shape::StreamShape;
use crate::sim::{OffChipMemory, SimResult};
use crate::stream::{DType, Selector, StreamValue, Token};
use crate::sym::Bindings;

use super::swiglu::start_token;
use super::{config_err, random_matrix, rng, value, OutputRegion, Workload, WorkloadError};

pub const Q_BASE: u64 = 0x6000_0000;
pub const K_BASE: u64 = 0x7000_0000;
pub const V_BASE: u64 = 0x8000_0000;
pub const O_BASE: u64 = 0x9000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Consecutive chunks of requests per region.
    Coarse,
    /// Request `i` to region `i % R`.
    Interleaved,
    /// Each region takes the next request when it finishes one.
    Dynamic,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Coarse, Strategy::Interleaved, Strategy::Dynamic];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Coarse => "coarse",
            Strategy::Interleaved => "interleaved",
            Strategy::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GqaConfig {
    pub regions: usize,
    pub head_dim: usize,
    /// Query heads sharing one KV head.
    pub group: usize,
    /// KV tokens per tile; lengths are rounded up to whole tiles.
    pub kv_tile: usize,
    /// KV length of each request; the batch size is its length.
    pub kv_lens: Vec<usize>,
    pub strategy: Strategy,
    #[serde(default = "default_chunk")]
    pub coarse_chunk: usize,
    /// Requests handed to each region before any completes (dynamic only).
    #[serde(default = "default_reps")]
    pub seed_reps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_chunk() -> usize {
    16
}

fn default_reps() -> usize {
    1
}

impl GqaConfig {
    pub fn new(kv_lens: Vec<usize>, regions: usize, strategy: Strategy) -> Self {
        GqaConfig {
            regions,
            head_dim: 64,
            group: 4,
            kv_tile: 16,
            kv_lens,
            strategy,
            coarse_chunk: default_chunk(),
            seed_reps: default_reps(),
            seed: 0,
        }
    }

    pub fn batch(&self) -> usize {
        self.kv_lens.len()
    }

    pub fn check(&self) -> Result<(), WorkloadError> {
        let b = self.batch();
        if self.regions == 0 || self.regions > b {
            return config_err(format!("{} regions for {b} requests", self.regions));
        }
        if self.head_dim == 0 || self.group == 0 || self.kv_tile == 0 || self.coarse_chunk == 0 {
            return config_err("head dim, group, KV tile and chunk must be positive");
        }
        if self.kv_lens.contains(&0) {
            return config_err("KV lengths must be at least 1");
        }
        if self.strategy == Strategy::Dynamic && self.seed_reps == 0 {
            return config_err("dynamic dispatch needs at least one seed per region");
        }
        Ok(())
    }

    /// KV tiles per request.
    pub fn tiles(&self) -> Vec<usize> {
        self.kv_lens.iter().map(|l| l.div_ceil(self.kv_tile)).collect()
    }

    /// Requests handed out before the first completion.
    fn seeds(&self) -> usize {
        self.regions * self.seed_reps.min(self.batch() / self.regions)
    }
}

/// Region of each request under a static strategy.
pub fn static_assignment(strategy: Strategy, batch: usize, regions: usize, chunk: usize) -> Option<Vec<usize>> {
    match strategy {
        Strategy::Coarse => Some((0..batch).map(|i| (i / chunk) % regions).collect()),
        Strategy::Interleaved => Some((0..batch).map(|i| i % regions).collect()),
        Strategy::Dynamic => None,
    }
}

/// How the dynamic dispatcher's choices map back onto graph symbols.
#[derive(Debug, Clone)]
pub struct DispatchLog {
    /// Graph output recording every dispatch selector in order.
    pub channel: ChannelId,
    pub partition: NodeId,
    pub kv_addrs: Vec<NodeId>,
    pub tiles: Vec<i64>,
}

impl DispatchLog {
    /// Region chosen for each request, read from a finished run.
    pub fn assignment(&self, r: &SimResult) -> Vec<usize> {
        r.outputs
            .get(&self.channel)
            .map(|toks| {
                toks.iter()
                    .filter_map(|t| match t {
                        Token::Value(v) => v.as_selector().and_then(|s| s.indices().next()),
                        _ => None,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

fn bind_assignment(b: &mut Bindings, assign: &[usize], regions: usize, partition: NodeId, kv_addrs: &[NodeId], tiles: &[i64]) {
    for (r, &fm) in kv_addrs.iter().enumerate().take(regions) {
        let mine: Vec<i64> = assign.iter().enumerate().filter(|(_, &a)| a == r).map(|(i, _)| tiles[i]).collect();
        b.set(partition_sym(partition, r), mine.len() as i64);
        b.set_ragged(flatmap_sym(fm, 0), mine);
    }
}

impl Workload {
    /// Bindings including those only known once a dynamic dispatcher has run.
    pub fn bindings_after(&self, r: &SimResult) -> Bindings {
        let mut b = self.bindings.clone();
        if let Some(d) = &self.dispatch {
            let assign = d.assignment(r);
            bind_assignment(&mut b, &assign, d.kv_addrs.len(), d.partition, &d.kv_addrs, &d.tiles);
        }
        b
    }
}

fn random_load(base: u64, rows: usize, cols: usize, tile: [usize; 2]) -> Op {
    Op::RandomOffChipLoad { base_addr: base, tensor_shape: [rows, cols], tile, dtype: DType::Bf16 }
}

/// One attention region. Returns its store completions, an availability
/// stream that fires once a request's last KV address is issued, and the KV
/// address node.
fn region(
    g: &mut Graph,
    cfg: &GqaConfig,
    r: usize,
    ids: ChannelId,
    kv: (&[i64], &[i64]),
    total_tiles: usize,
) -> (ChannelId, ChannelId, NodeId) {
    let (b, d, gq, tk) = (cfg.batch(), cfg.head_dim, cfg.group, cfg.kv_tile);
    let p = format!("r{r}/");
    let ib = g.add(&format!("{p}bcast_ids"), Op::Broadcast { n: 3 }, &[ids]);
    let q = g.add1(&format!("{p}load_q"), random_load(Q_BASE, b * gq, d, [gq, d]), &[ib[0]]);
    let fm = g.nodes.len();
    let addrs = g.add1(
        &format!("{p}kv_addrs"),
        Op::FlatMap { rank: 1, f: FnSpec::KvTileAddrs { starts: kv.0.to_vec(), counts: kv.1.to_vec() } },
        &[ib[1]],
    );
    let ab = g.add(&format!("{p}bcast_addrs"), Op::Broadcast { n: 3 }, &[addrs]);
    let avail = g.add1(&format!("{p}issued"), Op::Accum { rank: 1, f: FnSpec::Count }, &[ab[2]]);
    let k = g.add1(&format!("{p}load_k"), random_load(K_BASE, total_tiles * tk, d, [tk, d]), &[ab[0]]);
    let v = g.add1(&format!("{p}load_v"), random_load(V_BASE, total_tiles * tk, d, [tk, d]), &[ab[1]]);
    let kb = g.add(&format!("{p}bcast_k"), Op::Broadcast { n: 2 }, &[k]);
    let qb = g.add1(&format!("{p}buf_q"), Op::Bufferize { rank: 0 }, &[q]);
    let qs = g.add1(
        &format!("{p}repeat_q"),
        Op::Streamify { repeat_rank: 1, stride: vec![], out_shape: vec![] },
        &[qb, kb[0]],
    );
    let zs = g.add1(&format!("{p}zip_qk"), Op::Zip, &[qs, kb[1]]);
    let s = g.add1(&format!("{p}scores"), Op::Map { f: FnSpec::MatMulTransB }, &[zs]);
    let sb = g.add(&format!("{p}bcast_scores"), Op::Broadcast { n: 2 }, &[s]);
    let m = g.add1(&format!("{p}running_max"), Op::Scan { rank: 1, f: FnSpec::RunningMax }, &[sb[0]]);
    let zm = g.add1(&format!("{p}zip_max"), Op::Zip, &[sb[1], m]);
    let zv = g.add1(&format!("{p}zip_v"), Op::Zip, &[zm, v]);
    let acc = g.add1(&format!("{p}softmax_v"), Op::Accum { rank: 1, f: FnSpec::SoftmaxAccumulate }, &[zv]);
    let o = g.add1(&format!("{p}normalize"), Op::Map { f: FnSpec::NormalizeAttention }, &[acc]);
    let st = Op::RandomOffChipStore { base_addr: O_BASE, tensor_shape: [b * gq, d], tile: [gq, d], dtype: DType::Bf16 };
    (g.add1(&format!("{p}store_o"), st, &[ib[2], o]), avail, fm)
}

fn selectors(width: usize, idx: impl IntoIterator<Item = usize>) -> Vec<Token> {
    let mut v: Vec<Token> = idx.into_iter().map(|i| value(StreamValue::Selector(Selector::one_hot(width, i)))).collect();
    v.push(Token::Done);
    v
}

/// Dense softmax attention per request.
fn reference(q: &[f32], k: &[f32], v: &[f32], starts: &[i64], tiles: &[i64], cfg: &GqaConfig) -> Vec<f32> {
    let (d, gq, tk) = (cfg.head_dim, cfg.group, cfg.kv_tile);
    let mut out = vec![0f32; cfg.batch() * gq * d];
    for i in 0..cfg.batch() {
        let (k0, n) = (starts[i] as usize * tk, tiles[i] as usize * tk);
        for h in 0..gq {
            let qr = &q[(i * gq + h) * d..(i * gq + h + 1) * d];
            let s: Vec<f32> =
                (0..n).map(|j| qr.iter().zip(&k[(k0 + j) * d..(k0 + j + 1) * d]).map(|(a, b)| a * b).sum()).collect();
            let mx = s.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f32 = e.iter().sum();
            let o = &mut out[(i * gq + h) * d..(i * gq + h + 1) * d];
            for (j, w) in e.iter().enumerate() {
                for c in 0..d {
                    o[c] += w / z * v[(k0 + j) * d + c];
                }
            }
        }
    }
    out
}

pub fn build_gqa(cfg: &GqaConfig) -> Result<Workload, WorkloadError> {
    cfg.check()?;
    let (nb, nr, d, gq, tk) = (cfg.batch(), cfg.regions, cfg.head_dim, cfg.group, cfg.kv_tile);
    let tiles: Vec<i64> = cfg.tiles().into_iter().map(|t| t as i64).collect();
    let starts: Vec<i64> = tiles.iter().scan(0, |acc, t| Some(std::mem::replace(acc, *acc + t))).collect();
    let total: usize = tiles.iter().sum::<i64>() as usize;

    let mut rg = rng(cfg.seed);
    let q = random_matrix(&mut rg, nb * gq * d, 1.0);
    let k = random_matrix(&mut rg, total * tk * d, 1.0);
    let v = random_matrix(&mut rg, total * tk * d, 1.0);
    let reference = reference(&q, &k, &v, &starts, &tiles, cfg);
    let mut mem = OffChipMemory::new();
    mem.insert(Q_BASE, nb * gq, d, DType::Bf16, q);
    mem.insert(K_BASE, total * tk, d, DType::Bf16, k);
    mem.insert(V_BASE, total * tk, d, DType::Bf16, v);
    mem.alloc(O_BASE, nb * gq, d, DType::Bf16);

    let mut g = Graph::new();
    let mut b = Bindings::new();
    let mut inputs = HashMap::new();
    let ids = g.input("requests", ValueType::Addr, StreamShape::of_static(&[nb as i64]));
    let mut id_toks: Vec<Token> = (0..nb as i64).map(|i| value(StreamValue::Addr(i))).collect();
    id_toks.push(Token::Done);
    inputs.insert(ids, id_toks);
    let sel_t = ValueType::Selector { width: nr };

    let assign = static_assignment(cfg.strategy, nb, nr, cfg.coarse_chunk);
    let dispatch = match &assign {
        Some(a) => {
            let sel = g.input("assignment", sel_t, StreamShape::of_static(&[nb as i64]));
            inputs.insert(sel, selectors(nr, a.iter().copied()));
            sel
        }
        None => {
            let ch = g.channel("dispatch");
            g.declare(ch, sel_t.clone(), StreamShape::of_static(&[nb as i64]));
            ch
        }
    };
    let pid = g.nodes.len();
    let parts = g.add("distribute", Op::Partition { rank: 0, num_consumers: nr }, &[ids, dispatch]);
    let mut avail = Vec::with_capacity(nr);
    let mut fms = Vec::with_capacity(nr);
    for (r, &part) in parts.iter().enumerate() {
        g.set_capacity(part, nb);
        let (c, a, fm) = region(&mut g, cfg, r, part, (&starts, &tiles), total);
        g.output(c);
        avail.push(a);
        fms.push(fm);
    }

    let mut log = None;
    match assign {
        Some(a) => {
            for c in avail {
                g.output(c);
            }
            bind_assignment(&mut b, &a, nr, pid, &fms, &tiles);
        }
        None => {
            let s = cfg.seeds();
            let start = g.input("start", ValueType::Bool, StreamShape::of_static(&[1]));
            inputs.insert(start, start_token());
            let rr = FnSpec::RoundRobinEmit { n: nr, reps: s / nr };
            let seeds = g.add1("seed", Op::FlatMap { rank: 0, f: rr }, &[start]);
            let m = g.add("availability", Op::EagerMerge { inputs: nr, rank: 0 }, &avail);
            g.output(m[0]);
            // the last `s` releases have no request left to trigger
            let two = ValueType::Selector { width: 2 };
            let fctl = g.input("filter_control", two.clone(), StreamShape::of_static(&[nb as i64]));
            inputs.insert(fctl, selectors(2, (0..nb).map(|i| usize::from(i >= nb - s))));
            let fid = g.nodes.len();
            let f = g.add("filter", Op::Partition { rank: 0, num_consumers: 2 }, &[m[1], fctl]);
            b.set(partition_sym(fid, 0), (nb - s) as i64);
            b.set(partition_sym(fid, 1), s as i64);
            g.output(f[1]);
            let mctl = g.input("merge_control", two, StreamShape::of_static(&[nb as i64]));
            inputs.insert(mctl, selectors(2, (0..nb).map(|i| usize::from(i >= s))));
            g.channels[mctl].k_hot = Some(1);
            let re = g.add1("next_request", Op::Reassemble { inputs: 2, rank: 0 }, &[seeds, f[0], mctl]);
            let rb = g.add("bcast_next", Op::Broadcast { n: 2 }, &[re]);
            g.add_with_outputs("flatten_next", Op::Flatten { min: 0, max: 1 }, &[rb[0]], &[Some(dispatch)]);
            let logged = g.add1("flatten_log", Op::Flatten { min: 0, max: 1 }, &[rb[1]]);
            g.output(logged);
            log = Some(DispatchLog { channel: logged, partition: pid, kv_addrs: fms, tiles: tiles.clone() });
        }
    }

    Ok(Workload {
        name: format!("gqa_{}_b{nb}_r{nr}", cfg.strategy.name()),
        graph: g,
        inputs,
        memory: mem,
        bindings: b,
        output: OutputRegion { base: O_BASE, rows: nb * gq, cols: d },
        reference,
        dispatch: log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostConfig;
    use crate::sim::SimConfig;
    use crate::workloads::shape_mismatches;

    fn small(lens: Vec<usize>, r: usize, s: Strategy) -> GqaConfig {
        GqaConfig { head_dim: 8, group: 2, kv_tile: 4, ..GqaConfig::new(lens, r, s) }
    }

    #[test]
    fn strategies_match_reference_and_each_other() {
        let lens = vec![9, 4, 30, 1, 16, 7, 2, 12];
        let mut outs = Vec::new();
        for s in Strategy::ALL {
            let w = build_gqa(&small(lens.clone(), 3, s)).unwrap();
            let res = w.simulate(&SimConfig { record_channels: true, ..SimConfig::default() }).unwrap();
            assert!(w.max_rel_error(&res) < 1e-3, "{s:?}: {}", w.max_rel_error(&res));
            let b = w.bindings_after(&res);
            let bad = shape_mismatches(&w.graph, &w.infos().unwrap(), &res.traces, &b);
            assert!(bad.is_empty(), "{s:?}: {bad:#?}");
            let (rep, _) = w.cost(&CostConfig::default()).map(|x| (x.0, ())).unwrap_or_else(|_| {
                let infos = w.infos().unwrap();
                (crate::cost::analyze(&w.graph, &infos, &CostConfig::default()).unwrap(), ())
            });
            let traffic = rep.eval(&b).unwrap().traffic as u64;
            assert_eq!(traffic, res.metrics.offchip_read_bytes + res.metrics.offchip_write_bytes, "{s:?}");
            outs.push(w.output_data(&res));
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], outs[2]);
    }

    #[test]
    fn dynamic_assignment_covers_every_request() {
        let cfg = GqaConfig::new(vec![1024, 16, 16, 16, 16, 16, 16, 16], 2, Strategy::Dynamic);
        let w = build_gqa(&cfg).unwrap();
        let res = w.simulate(&SimConfig::default()).unwrap();
        let a = w.dispatch.as_ref().unwrap().assignment(&res);
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|&r| r < 2));
        // the long request keeps one region busy while the other drains the rest
        let busy = a.iter().filter(|&&r| r == a[0]).count();
        assert!(busy < 8 - busy, "{a:?}");
    }

    #[test]
    fn rejects_more_regions_than_requests() {
        assert!(build_gqa(&small(vec![1, 2], 3, Strategy::Interleaved)).is_err());
        assert!(build_gqa(&small(vec![1, 0, 2], 1, Strategy::Coarse)).is_err());
    }
}
