//! Cycle-approximate discrete-event simulation of an operator graph.
//!
//! Every node is an actor with a local clock. Channels are bounded FIFOs that
//! move one token per cycle; a slot frees when its token is popped. Higher-order
//! operators take `max(read, compute, write)` cycles per invocation, other
//! operators one cycle per token. Off-chip transfers go through a shared
//! bandwidth bucket with fixed latency.

mod actors;
mod memory;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::graph::{infer_shapes, validate, ChannelId, Diagnostic, Graph};
use crate::stream::{detokenize, tokenize_expanded, Token};

use actors::{Actor, Cx, Heads, Need};
pub use memory::{OffChipMemory, Region};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// On-chip memory bandwidth per operator port, bytes/cycle.
    pub onchip_bw: u64,
    /// Shared off-chip bandwidth, bytes/cycle.
    pub offchip_bw: u64,
    pub offchip_latency: u64,
    /// Default FLOPs/cycle of a higher-order operator.
    pub compute_bw: u64,
    pub channel_capacity: usize,
    /// In-flight tiles per off-chip load.
    pub max_outstanding: usize,
    pub onchip_capacity: Option<u64>,
    /// Keep every token that crosses every channel.
    pub record_channels: bool,
    pub max_events: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            onchip_bw: 64,
            offchip_bw: 1024,
            offchip_latency: 64,
            compute_bw: 1024,
            channel_capacity: 2,
            max_outstanding: 16,
            onchip_capacity: None,
            record_channels: false,
            max_events: 2_000_000_000,
        }
    }
}

impl SimConfig {
    /// Parameters used when comparing against the reference cycle counts.
    pub fn validation() -> Self {
        SimConfig { onchip_bw: 256, offchip_bw: 64, ..SimConfig::default() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid graph: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("deadlock at cycle {time}: {}", blocked.join("; "))]
    Deadlock { time: u64, blocked: Vec<String> },
    #[error("{node}: {msg}")]
    Runtime { node: String, msg: String },
    #[error("off-chip access out of bounds: {0}")]
    OutOfBounds(String),
    #[error("on-chip pool exhausted: {requested} B requested with {live} B live of {capacity} B")]
    PoolExhausted { requested: u64, live: u64, capacity: u64 },
    #[error("input `{0}`: {1}")]
    BadInput(String, String),
    #[error("event limit {0} exceeded")]
    EventLimit(u64),
}

impl SimError {
    pub fn runtime(node: &str, msg: impl Into<String>) -> Self {
        SimError::Runtime { node: node.to_string(), msg: msg.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub op: String,
    pub busy_cycles: u64,
    pub flops: u64,
    pub steps: u64,
    pub offchip_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// First off-chip read to last off-chip write; without off-chip traffic, first to last node activity.
    pub cycles: u64,
    pub offchip_read_bytes: u64,
    pub offchip_write_bytes: u64,
    pub flops: u64,
    pub peak_onchip_bytes: u64,
    /// `flops / (sum of compute bandwidth of arithmetic nodes * cycles)`.
    pub compute_utilization: f64,
    pub per_node: BTreeMap<String, NodeMetrics>,
}

#[derive(Debug)]
pub struct SimResult {
    pub metrics: Metrics,
    /// Expanded-form tokens drained from each graph output.
    pub outputs: HashMap<ChannelId, Vec<Token>>,
    /// Populated when [`SimConfig::record_channels`] is set.
    pub traces: HashMap<ChannelId, Vec<Token>>,
    pub memory: OffChipMemory,
    /// Time of the last event.
    pub end_time: u64,
    /// Buffers still allocated at the end; zero unless a graph output carries buffer references.
    pub live_buffers: usize,
}

pub(crate) struct Chan {
    pub q: VecDeque<(Token, u64)>,
    cap: usize,
    pushed: u64,
    popped: u64,
    /// Pop times of the last `cap` pops.
    pops: VecDeque<u64>,
    last_push: Option<u64>,
    trace: Option<Vec<Token>>,
    src: usize,
    dst: usize,
}

impl Chan {
    /// Earliest time a new token can enter, or `None` while full.
    fn slot_time(&self) -> Option<u64> {
        if self.q.len() >= self.cap {
            return None;
        }
        let t = if self.pushed < self.cap as u64 {
            0
        } else {
            let k = self.pushed - self.cap as u64;
            self.pops[(k - (self.popped - self.pops.len() as u64)) as usize]
        };
        Some(t.max(self.last_push.map_or(0, |p| p + 1)))
    }

    fn push(&mut self, t: Token, at: u64) {
        if let Some(tr) = &mut self.trace {
            tr.push(t.clone());
        }
        self.q.push_back((t, at));
        self.pushed += 1;
        self.last_push = Some(at);
    }

    pub(crate) fn pop(&mut self, at: u64) -> Option<Token> {
        let (t, _) = self.q.pop_front()?;
        self.popped += 1;
        self.pops.push_back(at);
        if self.pops.len() > self.cap {
            self.pops.pop_front();
        }
        Some(t)
    }
}

struct Slot {
    name: String,
    node: Option<usize>,
    ins: Vec<ChannelId>,
    outs: Vec<ChannelId>,
    now: u64,
    outbox: Vec<VecDeque<(Token, u64)>>,
    pending: usize,
    limit: usize,
    busy: u64,
    flops: u64,
    steps: u64,
    offchip_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Drain(usize),
    Step,
}

type Key = (u64, usize, Kind);

struct Engine<'g> {
    g: &'g Graph,
    cfg: &'g SimConfig,
    slots: Vec<Slot>,
    actors: Vec<Box<dyn Actor>>,
    chans: Vec<Chan>,
    mem: OffChipMemory,
    pool: memory::OnChipPool,
    queue: BTreeSet<Key>,
    cand: Vec<Option<Key>>,
    chosen: Vec<Option<usize>>,
    end: u64,
    /// First step start and last step end over graph nodes.
    active: Option<(u64, u64)>,
}

impl Engine<'_> {
    fn candidate(&self, i: usize) -> (Option<Key>, Option<usize>) {
        let s = &self.slots[i];
        let mut best: Option<Key> = None;
        for (port, ob) in s.outbox.iter().enumerate() {
            if let Some((_, ready)) = ob.front() {
                if let Some(free) = self.chans[s.outs[port]].slot_time() {
                    let k = ((*ready).max(free), i, Kind::Drain(port));
                    if best.map_or(true, |b| k < b) {
                        best = Some(k);
                    }
                }
            }
        }
        let mut chosen = None;
        if s.pending < s.limit {
            let arrival = |p: usize| self.chans[s.ins[p]].q.front().map(|(_, a)| *a);
            let t = match self.actors[i].need(&Heads { chans: &self.chans, ins: &s.ins }) {
                Need::Free => Some(s.now),
                Need::Idle => None,
                Need::Ports(ps) => ps
                    .iter()
                    .map(|p| arrival(*p))
                    .collect::<Option<Vec<_>>>()
                    .map(|a| a.into_iter().fold(s.now, u64::max)),
                Need::Any(ps) => {
                    let pick = ps.iter().filter_map(|p| arrival(*p).map(|a| (a, *p))).min();
                    pick.map(|(a, p)| {
                        chosen = Some(p);
                        a.max(s.now)
                    })
                }
            };
            if let Some(t) = t {
                let k = (t, i, Kind::Step);
                if best.map_or(true, |b| k < b) {
                    best = Some(k);
                }
            }
        }
        (best, chosen)
    }

    fn refresh(&mut self, i: usize) {
        if let Some(k) = self.cand[i].take() {
            self.queue.remove(&k);
        }
        let (k, chosen) = self.candidate(i);
        self.chosen[i] = chosen;
        if let Some(k) = k {
            self.queue.insert(k);
            self.cand[i] = Some(k);
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        for i in 0..self.slots.len() {
            self.refresh(i);
        }
        let mut events = 0u64;
        while let Some(key) = self.queue.pop_first() {
            events += 1;
            if events > self.cfg.max_events {
                return Err(SimError::EventLimit(self.cfg.max_events));
            }
            let (t, i, kind) = key;
            self.cand[i] = None;
            self.end = self.end.max(t);
            let mut dirty = vec![i];
            match kind {
                Kind::Drain(port) => {
                    let (tok, _) = self.slots[i].outbox[port].pop_front().unwrap();
                    let ch = self.slots[i].outs[port];
                    self.chans[ch].push(tok, t);
                    let s = &mut self.slots[i];
                    if s.pending == s.limit {
                        s.now = s.now.max(t);
                    }
                    s.pending -= 1;
                    dirty.push(self.chans[ch].dst);
                }
                Kind::Step => {
                    let moved = self.mem.read_bytes + self.mem.write_bytes;
                    let (cx_out, popped, dur, flops, control) = {
                        let s = &self.slots[i];
                        let mut cx = Cx {
                            start: t,
                            dur: 1,
                            chosen: self.chosen[i],
                            chans: &mut self.chans,
                            ins: &s.ins,
                            out: Vec::new(),
                            popped: Vec::new(),
                            mem: &mut self.mem,
                            pool: &mut self.pool,
                            cfg: self.cfg,
                            node: s.node.map(|n| &self.g.nodes[n]),
                            name: &s.name,
                            flops: 0,
                            control_only: true,
                        };
                        self.actors[i].step(&mut cx)?;
                        let control = cx.control_only && !cx.popped.is_empty();
                        (cx.out, cx.popped, cx.dur, cx.flops, control)
                    };
                    let s = &mut self.slots[i];
                    s.now = t + dur;
                    if !control {
                        s.busy += dur;
                    }
                    s.flops += flops;
                    s.steps += 1;
                    s.offchip_bytes += self.mem.read_bytes + self.mem.write_bytes - moved;
                    for (port, tok, ready) in cx_out {
                        s.outbox[port].push_back((tok, ready.unwrap_or(t + dur)));
                        s.pending += 1;
                    }
                    self.end = self.end.max(t + dur);
                    if self.slots[i].node.is_some() && !control {
                        self.active = Some(self.active.map_or((t, t + dur), |(a, b)| (a.min(t), b.max(t + dur))));
                    }
                    for ch in popped {
                        dirty.push(self.chans[ch].src);
                    }
                }
            }
            dirty.sort_unstable();
            dirty.dedup();
            for d in dirty {
                self.refresh(d);
            }
        }
        let stuck: Vec<String> = self
            .chans
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.q.is_empty())
            .map(|(id, c)| {
                let full = if c.q.len() >= c.cap { " (full)" } else { "" };
                format!("`{}` holds {} tokens{full}", self.g.channels[id].name, c.q.len())
            })
            .chain(
                self.slots
                    .iter()
                    .zip(&self.actors)
                    .filter(|(s, a)| !a.done() || s.pending > 0)
                    .map(|(s, _)| format!("{} unfinished", s.name)),
            )
            .collect();
        if !stuck.is_empty() {
            return Err(SimError::Deadlock { time: self.end, blocked: stuck });
        }
        Ok(())
    }
}

/// Expands compressed input tokens; expanded tokens pass through unchanged.
fn expand_input(name: &str, tokens: &[Token], rank: usize) -> Result<Vec<Token>, SimError> {
    let (tensors, _) = detokenize(tokens, rank).map_err(|e| SimError::BadInput(name.into(), e.to_string()))?;
    tokenize_expanded(&tensors, rank).map_err(|e| SimError::BadInput(name.into(), e.to_string()))
}

/// Simulates `g` with the given external input streams and initial off-chip memory.
pub fn run(
    g: &Graph,
    cfg: &SimConfig,
    inputs: &HashMap<ChannelId, Vec<Token>>,
    mut memory: OffChipMemory,
) -> Result<SimResult, SimError> {
    let diags = validate(g);
    if !diags.is_empty() {
        return Err(SimError::Invalid(diags));
    }
    let infos = infer_shapes(g).map_err(|e| {
        SimError::Invalid(vec![Diagnostic {
            node: e.node,
            node_name: e.node.map(|n| g.nodes[n].name.clone()),
            port: e.port,
            rule: e.rule.into(),
            message: e.msg,
        }])
    })?;
    let infos: Vec<_> = infos.into_iter().map(Some).collect();
    memory.configure(cfg.offchip_bw, cfg.offchip_latency);

    let mut slots = Vec::new();
    let mut actors: Vec<Box<dyn Actor>> = Vec::new();
    let mut names: HashMap<String, usize> = HashMap::new();
    let mut unique = |n: &str| {
        let c = names.entry(n.to_string()).or_insert(0);
        *c += 1;
        if *c == 1 {
            n.to_string()
        } else {
            format!("{n}#{c}")
        }
    };
    let slot = |name: String, node, ins: Vec<ChannelId>, outs: Vec<ChannelId>, limit| Slot {
        name,
        node,
        outbox: vec![VecDeque::new(); outs.len()],
        ins,
        outs,
        now: 0,
        pending: 0,
        limit,
        busy: 0,
        flops: 0,
        steps: 0,
        offchip_bytes: 0,
    };
    for n in &g.nodes {
        let limit = if n.kind.is_offchip() { cfg.max_outstanding.max(1) } else { 1 };
        slots.push(slot(unique(&n.name), Some(n.id), n.inputs.clone(), n.outputs.clone(), limit));
        actors.push(actors::build(n, &infos));
    }
    let mut chans: Vec<Chan> = g
        .channels
        .iter()
        .map(|c| Chan {
            q: VecDeque::new(),
            cap: c.capacity.unwrap_or(cfg.channel_capacity).max(1),
            pushed: 0,
            popped: 0,
            pops: VecDeque::new(),
            last_push: None,
            trace: cfg.record_channels.then(Vec::new),
            src: c.src.map_or(usize::MAX, |e| e.node),
            dst: c.dst.map_or(usize::MAX, |e| e.node),
        })
        .collect();
    for &c in &g.inputs {
        let name = &g.channels[c].name;
        let toks = inputs.get(&c).ok_or_else(|| SimError::BadInput(name.clone(), "no tokens supplied".into()))?;
        let rank = infos[c].as_ref().map_or(0, |i| i.shape.rank());
        chans[c].src = slots.len();
        slots.push(slot(unique(&format!("source:{name}")), None, vec![], vec![c], 1));
        actors.push(actors::source(expand_input(name, toks, rank)?));
    }
    let mut sinks = Vec::new();
    for &c in &g.outputs {
        chans[c].dst = slots.len();
        sinks.push((c, slots.len()));
        slots.push(slot(unique(&format!("sink:{}", g.channels[c].name)), None, vec![c], vec![], 1));
        actors.push(actors::sink());
    }
    let n = slots.len();
    let pool = memory::OnChipPool::new(cfg.onchip_capacity);
    let mut eng = Engine {
        g,
        cfg,
        slots,
        actors,
        chans,
        mem: memory,
        pool,
        queue: BTreeSet::new(),
        cand: vec![None; n],
        chosen: vec![None; n],
        end: 0,
        active: None,
    };
    eng.run()?;

    let mem = &eng.mem;
    let cycles = match (mem.first_read, mem.last_write) {
        (Some(f), Some(l)) => l.saturating_sub(f),
        (Some(f), None) => mem.last_read_done.unwrap_or(eng.end).max(eng.end).saturating_sub(f),
        _ => eng.active.map_or(0, |(a, b)| b - a),
    };
    let mut per_node = BTreeMap::new();
    let mut flops = 0;
    let mut peak_compute = 0u64;
    for s in &eng.slots {
        let Some(id) = s.node else { continue };
        let node = &g.nodes[id];
        flops += s.flops;
        if node.kind.fn_spec().is_some_and(|f| f.bears_flops()) {
            peak_compute += node.compute_bw.unwrap_or(cfg.compute_bw);
        }
        per_node.insert(
            s.name.clone(),
            NodeMetrics {
                op: node.kind.name().into(),
                busy_cycles: s.busy,
                flops: s.flops,
                steps: s.steps,
                offchip_bytes: s.offchip_bytes,
            },
        );
    }
    let denom = peak_compute as f64 * cycles as f64;
    let metrics = Metrics {
        cycles,
        offchip_read_bytes: mem.read_bytes,
        offchip_write_bytes: mem.write_bytes,
        flops,
        peak_onchip_bytes: eng.pool.peak_bytes,
        compute_utilization: if denom > 0.0 { flops as f64 / denom } else { 0.0 },
        per_node,
    };
    let mut outputs = HashMap::new();
    for (c, i) in sinks {
        outputs.insert(c, eng.actors[i].take_recorded());
    }
    let traces = eng
        .chans
        .iter_mut()
        .enumerate()
        .filter_map(|(i, c)| c.trace.take().map(|t| (i, t)))
        .collect();
    let live_buffers = eng.pool.live_count();
    Ok(SimResult { metrics, outputs, traces, memory: eng.mem, end_time: eng.end, live_buffers })
}

#[cfg(test)]
mod tests;
