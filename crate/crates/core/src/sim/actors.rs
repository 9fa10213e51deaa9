//! Per-operator behaviour over expanded-form token streams.

use std::collections::VecDeque;

use crate::graph::{ChannelId, ChannelInfo, FnSpec, Node, OperatorKind};
use crate::kernels;
use crate::stream::{detokenize, BufferRef, ObservedDim, Selector, StreamValue, Tile, Token};

use super::memory::{OffChipMemory, OnChipPool};
use super::{Chan, SimConfig, SimError};

/// What an actor waits for before its next step.
pub(crate) enum Need {
    /// Heads on all of these input ports.
    Ports(Vec<usize>),
    /// A head on any of these ports; the earliest arrival is chosen.
    Any(Vec<usize>),
    /// Nothing; can step immediately.
    Free,
    /// Finished or waiting on nothing that can arrive.
    Idle,
}

pub(crate) struct Heads<'a> {
    pub chans: &'a [Chan],
    pub ins: &'a [ChannelId],
}

impl Heads<'_> {
    pub fn get(&self, port: usize) -> Option<&Token> {
        self.chans[self.ins[port]].q.front().map(|(t, _)| t)
    }
}

pub(crate) struct Cx<'a> {
    pub start: u64,
    pub dur: u64,
    /// Port picked for a [`Need::Any`] step.
    pub chosen: Option<usize>,
    pub chans: &'a mut [Chan],
    pub ins: &'a [ChannelId],
    pub out: Vec<(usize, Token, Option<u64>)>,
    pub popped: Vec<ChannelId>,
    pub mem: &'a mut OffChipMemory,
    pub pool: &'a mut OnChipPool,
    pub cfg: &'a SimConfig,
    pub node: Option<&'a Node>,
    pub name: &'a str,
    pub flops: u64,
    /// Popped only stop/done tokens this step.
    pub control_only: bool,
}

impl Cx<'_> {
    pub fn pop(&mut self, port: usize) -> Result<Token, SimError> {
        let ch = self.ins[port];
        let t = self.chans[ch].pop(self.start).ok_or_else(|| self.err(format!("input {port} is empty")))?;
        self.popped.push(ch);
        if t.is_value() {
            self.control_only = false;
        }
        Ok(t)
    }

    pub fn emit(&mut self, port: usize, t: Token) {
        self.out.push((port, t, None));
    }

    pub fn emit_at(&mut self, port: usize, t: Token, ready: u64) {
        self.out.push((port, t, Some(ready)));
    }

    pub fn err(&self, msg: impl Into<String>) -> SimError {
        SimError::runtime(self.name, msg)
    }

    /// Sets the step duration from the slowest of input reads, compute and output writes.
    pub fn roofline(&mut self, in_bytes: usize, flops: u64, out_bytes: usize) {
        let bw = self.cfg.onchip_bw.max(1);
        let (cbw, rd, wr) = match self.node {
            Some(n) => (
                n.compute_bw.unwrap_or(self.cfg.compute_bw).max(1),
                n.input_via_memory(0),
                n.output_via_memory(0),
            ),
            None => (self.cfg.compute_bw.max(1), true, true),
        };
        let r = if rd { (in_bytes as u64).div_ceil(bw) } else { 0 };
        let w = if wr { (out_bytes as u64).div_ceil(bw) } else { 0 };
        self.dur = r.max(w).max(flops.div_ceil(cbw)).max(1);
        self.flops += flops;
    }
}

pub(crate) trait Actor {
    fn need(&self, h: &Heads) -> Need;
    fn step(&mut self, cx: &mut Cx) -> Result<(), SimError>;
    fn done(&self) -> bool;
    fn take_recorded(&mut self) -> Vec<Token> {
        Vec::new()
    }
}

fn value(t: Token, cx: &Cx, what: &str) -> Result<StreamValue, SimError> {
    match t {
        Token::Value(v) => Ok(v),
        other => Err(cx.err(format!("{what}: expected a value, got {other:?}"))),
    }
}

fn expect(t: Token, want: &Token, cx: &Cx, what: &str) -> Result<(), SimError> {
    if &t == want {
        Ok(())
    } else {
        Err(cx.err(format!("{what}: expected {want:?}, got {}", describe(&t))))
    }
}

fn describe(t: &Token) -> String {
    match t {
        Token::Value(_) => "a value".into(),
        Token::Stop(k) => format!("S{k}"),
        Token::Done => "D".into(),
    }
}

/// Expanded tokens of one tensor with the given extents, outermost first.
pub(crate) fn grid_tokens<T>(
    dims: &[usize],
    leaf: &mut dyn FnMut(&[usize]) -> Result<T, SimError>,
) -> Result<Vec<Token<T>>, SimError> {
    fn rec<T>(
        dims: &[usize],
        prefix: &mut Vec<usize>,
        leaf: &mut dyn FnMut(&[usize]) -> Result<T, SimError>,
        out: &mut Vec<Token<T>>,
    ) -> Result<(), SimError> {
        let level = dims.len() - prefix.len();
        if level == 0 {
            out.push(Token::Value(leaf(prefix)?));
            return Ok(());
        }
        for i in 0..dims[prefix.len()] {
            prefix.push(i);
            rec(dims, prefix, leaf, out)?;
            prefix.pop();
        }
        out.push(Token::Stop(level as u32));
        Ok(())
    }
    let mut out = Vec::new();
    rec(dims, &mut Vec::new(), leaf, &mut out)?;
    Ok(out)
}

struct Source {
    toks: VecDeque<Token>,
}

impl Actor for Source {
    fn need(&self, _: &Heads) -> Need {
        if self.toks.is_empty() {
            Need::Idle
        } else {
            Need::Free
        }
    }
    fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        let t = self.toks.pop_front().unwrap();
        cx.emit(0, t);
        Ok(())
    }
    fn done(&self) -> bool {
        self.toks.is_empty()
    }
}

pub(crate) fn source(toks: Vec<Token>) -> Box<dyn Actor> {
    Box::new(Source { toks: toks.into() })
}

struct Sink {
    got: Vec<Token>,
    done: bool,
}

impl Actor for Sink {
    fn need(&self, _: &Heads) -> Need {
        if self.done {
            Need::Idle
        } else {
            Need::Ports(vec![0])
        }
    }
    fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        let t = cx.pop(0)?;
        if let Token::Value(StreamValue::Buffer(b)) = &t {
            cx.pool.release(b.id)?;
        }
        self.done = t == Token::Done;
        self.got.push(t);
        Ok(())
    }
    fn done(&self) -> bool {
        self.done
    }
    fn take_recorded(&mut self) -> Vec<Token> {
        std::mem::take(&mut self.got)
    }
}

pub(crate) fn sink() -> Box<dyn Actor> {
    Box::new(Sink { got: Vec::new(), done: false })
}

/// Consumes port 0 one token at a time; `f` handles each token.
struct Unary<F> {
    f: F,
    done: bool,
}

impl<F: FnMut(Token, &mut Cx) -> Result<(), SimError>> Actor for Unary<F> {
    fn need(&self, _: &Heads) -> Need {
        if self.done {
            Need::Idle
        } else {
            Need::Ports(vec![0])
        }
    }
    fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        let t = cx.pop(0)?;
        self.done = t == Token::Done;
        (self.f)(t, cx)
    }
    fn done(&self) -> bool {
        self.done
    }
}

fn unary(f: impl FnMut(Token, &mut Cx) -> Result<(), SimError> + 'static) -> Box<dyn Actor> {
    Box::new(Unary { f, done: false })
}

fn map(f: FnSpec) -> Box<dyn Actor> {
    unary(move |t, cx| {
        match t {
            Token::Value(v) => {
                let out = kernels::apply(&f, &v).map_err(|m| cx.err(m))?;
                cx.roofline(v.bytes(), kernels::flops(&f, &v), out.bytes());
                cx.emit(0, Token::Value(out));
            }
            other => cx.emit(0, other),
        }
        Ok(())
    })
}

fn accum(b: u32, f: FnSpec) -> Box<dyn Actor> {
    let mut acc: Option<StreamValue> = None;
    unary(move |t, cx| {
        match t {
            Token::Value(v) => {
                let next = kernels::accum_update(&f, acc.take(), &v).map_err(|m| cx.err(m))?;
                cx.roofline(v.bytes(), kernels::flops(&f, &v), 0);
                if b == 0 {
                    let out = kernels::accum_finish(&f, next).map_err(|m| cx.err(m))?;
                    cx.emit(0, Token::Value(out));
                } else {
                    acc = Some(next);
                }
            }
            Token::Stop(k) if k < b => {}
            Token::Stop(k) if k == b => {
                let a = acc.take().ok_or_else(|| cx.err("reduction over an empty group"))?;
                let out = kernels::accum_finish(&f, a).map_err(|m| cx.err(m))?;
                cx.roofline(0, 0, out.bytes());
                cx.emit(0, Token::Value(out));
            }
            Token::Stop(k) => cx.emit(0, Token::Stop(k - b)),
            Token::Done => {
                if acc.is_some() {
                    return Err(cx.err("stream ended inside a reduction"));
                }
                cx.emit(0, Token::Done);
            }
        }
        Ok(())
    })
}

fn scan(b: u32, f: FnSpec) -> Box<dyn Actor> {
    let mut state: Option<StreamValue> = None;
    unary(move |t, cx| {
        match t {
            Token::Value(v) => {
                let next = kernels::scan_update(&f, state.take(), &v).map_err(|m| cx.err(m))?;
                cx.roofline(v.bytes(), kernels::flops(&f, &v), next.bytes());
                if b > 0 {
                    state = Some(next.clone());
                }
                cx.emit(0, Token::Value(next));
            }
            Token::Stop(k) => {
                if k >= b {
                    state = None;
                }
                cx.emit(0, Token::Stop(k));
            }
            Token::Done => cx.emit(0, Token::Done),
        }
        Ok(())
    })
}

fn flat_map(b: u32, f: FnSpec) -> Box<dyn Actor> {
    unary(move |t, cx| {
        match t {
            Token::Value(v) => {
                let body = kernels::flat_apply(&f, &v).map_err(|m| cx.err(m))?;
                let out_bytes = body
                    .iter()
                    .map(|t| match t {
                        Token::Value(x) => x.bytes(),
                        _ => 0,
                    })
                    .sum();
                cx.roofline(v.bytes(), kernels::flops(&f, &v), out_bytes);
                for t in body {
                    cx.emit(0, t);
                }
            }
            Token::Stop(k) => cx.emit(0, Token::Stop(k + b)),
            Token::Done => cx.emit(0, Token::Done),
        }
        Ok(())
    })
}

fn flatten(min: u32, max: u32) -> Box<dyn Actor> {
    unary(move |t, cx| {
        match t {
            Token::Stop(k) if k > min && k <= max => {}
            Token::Stop(k) if k > max => cx.emit(0, Token::Stop(k - (max - min))),
            other => cx.emit(0, other),
        }
        Ok(())
    })
}

fn promote(rank: u32) -> Box<dyn Actor> {
    let mut seen = false;
    unary(move |t, cx| {
        if t == Token::Done {
            if seen {
                cx.emit(0, Token::Stop(rank + 1));
            }
        } else {
            seen = true;
        }
        cx.emit(0, t);
        Ok(())
    })
}

fn broadcast(n: usize) -> Box<dyn Actor> {
    unary(move |t, cx| {
        if let Token::Value(StreamValue::Buffer(b)) = &t {
            cx.pool.retain(b.id, n - 1)?;
        }
        for p in 0..n {
            cx.emit(p, t.clone());
        }
        Ok(())
    })
}

fn bufferize(b: u32) -> Box<dyn Actor> {
    let mut group: Vec<Token> = Vec::new();
    unary(move |t, cx| {
        let store = |elems: Vec<StreamValue>, dims: Vec<usize>, cx: &mut Cx| -> Result<(), SimError> {
            let bytes: usize = elems.iter().map(StreamValue::bytes).sum();
            let id = cx.pool.alloc(dims.clone(), elems)?;
            cx.roofline(bytes, 0, bytes);
            cx.emit(0, Token::Value(StreamValue::Buffer(BufferRef { id, dims })));
            Ok(())
        };
        match t {
            Token::Value(v) if b == 0 => store(vec![v], Vec::new(), cx)?,
            Token::Stop(k) if k < b => group.push(Token::Stop(k)),
            Token::Value(v) => group.push(Token::Value(v)),
            Token::Stop(k) if k == b => {
                let mut toks = std::mem::take(&mut group);
                toks.push(Token::Done);
                let (tensors, shape) = detokenize(&toks, b as usize - 1).map_err(|e| cx.err(e.to_string()))?;
                let dims = shape
                    .dims
                    .iter()
                    .map(|d| match d {
                        ObservedDim::Uniform(n) => Ok(*n),
                        ObservedDim::Unobserved => Ok(0),
                        ObservedDim::Ragged(_) => Err(cx.err("buffered group is ragged")),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let elems = tensors.iter().flat_map(|t| t.leaves().into_iter().cloned()).collect();
                store(elems, dims, cx)?;
            }
            Token::Stop(k) => cx.emit(0, Token::Stop(k - b)),
            Token::Done => {
                if !group.is_empty() {
                    return Err(cx.err("stream ended inside a buffered group"));
                }
                cx.emit(0, Token::Done);
            }
        }
        Ok(())
    })
}

fn pad_like(v: &StreamValue, p: f32) -> Option<StreamValue> {
    match v {
        StreamValue::Tile(t) => Some(StreamValue::Tile(Tile::new(t.rows, t.cols, t.dtype, vec![p; t.rows * t.cols]))),
        StreamValue::Tuple(items) => items.iter().map(|i| pad_like(i, p)).collect::<Option<Vec<_>>>().map(StreamValue::Tuple),
        _ => None,
    }
}

fn both(cx: &mut Cx, t: Token) {
    cx.emit(0, t.clone());
    cx.emit(1, t);
}

struct ReshapeState {
    dim: u32,
    chunk: usize,
    pad: Option<f32>,
    filled: usize,
    last: Option<StreamValue>,
}

impl ReshapeState {
    /// Closes a partially filled chunk, padding it when a pad value is given.
    fn flush(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        if self.filled == 0 {
            return Ok(());
        }
        if self.dim == 0 {
            if let (Some(p), Some(l)) = (self.pad, &self.last) {
                let fill = pad_like(l, p).ok_or_else(|| cx.err("cannot pad this value type"))?;
                for _ in self.filled..self.chunk {
                    cx.emit(0, Token::Value(fill.clone()));
                    cx.emit(1, Token::Value(StreamValue::Bool(true)));
                }
            }
        }
        both(cx, Token::Stop(self.dim + 1));
        self.filled = 0;
        Ok(())
    }

    fn count(&mut self, cx: &mut Cx) {
        self.filled += 1;
        if self.filled == self.chunk {
            both(cx, Token::Stop(self.dim + 1));
            self.filled = 0;
        }
    }
}

fn reshape(dim: u32, chunk: usize, pad: Option<f32>) -> Box<dyn Actor> {
    let mut st = ReshapeState { dim, chunk, pad, filled: 0, last: None };
    unary(move |t, cx| {
        match t {
            Token::Value(v) => {
                cx.emit(0, Token::Value(v.clone()));
                cx.emit(1, Token::Value(StreamValue::Bool(false)));
                if dim == 0 {
                    st.last = Some(v);
                    st.count(cx);
                }
            }
            Token::Stop(k) if k < dim => both(cx, Token::Stop(k)),
            Token::Stop(k) if k == dim => {
                both(cx, Token::Stop(k));
                st.count(cx);
            }
            Token::Stop(k) => {
                st.flush(cx)?;
                both(cx, Token::Stop(k + 1));
            }
            Token::Done => {
                st.flush(cx)?;
                both(cx, Token::Done);
            }
        }
        Ok(())
    })
}

fn zip() -> Box<dyn Actor> {
    struct Zip {
        done: bool,
    }
    impl Actor for Zip {
        fn need(&self, _: &Heads) -> Need {
            if self.done {
                Need::Idle
            } else {
                Need::Ports(vec![0, 1])
            }
        }
        fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
            let (a, b) = (cx.pop(0)?, cx.pop(1)?);
            let out = match (a, b) {
                (Token::Value(x), Token::Value(y)) => Token::Value(StreamValue::zip(x, y)),
                (x, y) if x == y => x,
                (x, y) => return Err(cx.err(format!("operands misaligned: {} vs {}", describe(&x), describe(&y)))),
            };
            self.done = out == Token::Done;
            cx.emit(0, out);
            Ok(())
        }
        fn done(&self) -> bool {
            self.done
        }
    }
    Box::new(Zip { done: false })
}

struct LinearLoad {
    base: u64,
    tile: [usize; 2],
    stride: Vec<usize>,
    out_shape: Vec<usize>,
    walk: VecDeque<Token<i64>>,
    done: bool,
}

impl Actor for LinearLoad {
    fn need(&self, _: &Heads) -> Need {
        if !self.walk.is_empty() {
            Need::Free
        } else if self.done {
            Need::Idle
        } else {
            Need::Ports(vec![0])
        }
    }
    fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        if let Some(w) = self.walk.pop_front() {
            match w {
                Token::Value(idx) => {
                    let (t, at) = cx.mem.read(cx.start, self.base, self.tile, idx)?;
                    cx.emit_at(0, Token::Value(StreamValue::Tile(t)), at);
                }
                Token::Stop(k) => cx.emit(0, Token::Stop(k)),
                Token::Done => unreachable!(),
            }
            return Ok(());
        }
        match cx.pop(0)? {
            Token::Value(_) => {
                let stride = self.stride.clone();
                let mut idx = |ix: &[usize]| Ok(ix.iter().zip(&stride).map(|(i, s)| (i * s) as i64).sum());
                self.walk = grid_tokens(&self.out_shape, &mut idx)?.into();
            }
            Token::Stop(k) => cx.emit(0, Token::Stop(k + self.out_shape.len() as u32)),
            Token::Done => {
                self.done = true;
                cx.emit(0, Token::Done);
            }
        }
        Ok(())
    }
    fn done(&self) -> bool {
        self.done && self.walk.is_empty()
    }
}

fn random_load(base: u64, tile: [usize; 2]) -> Box<dyn Actor> {
    unary(move |t, cx| {
        match t {
            Token::Value(a) => {
                let idx = a.as_addr().ok_or_else(|| cx.err("address stream carries a non-address"))?;
                let (t, at) = cx.mem.read(cx.start, base, tile, idx)?;
                cx.emit_at(0, Token::Value(StreamValue::Tile(t)), at);
            }
            other => cx.emit(0, other),
        }
        Ok(())
    })
}

fn linear_store(base: u64) -> Box<dyn Actor> {
    let mut slot = 0i64;
    unary(move |t, cx| {
        if let Token::Value(v) = t {
            let tile = v.as_tile().ok_or_else(|| cx.err("stores accept tiles only"))?;
            cx.mem.write(cx.start, base, slot, tile)?;
            slot += 1;
        }
        Ok(())
    })
}

fn random_store(base: u64, tile: [usize; 2]) -> Box<dyn Actor> {
    struct RandomStore {
        base: u64,
        tile: [usize; 2],
        done: bool,
    }
    impl Actor for RandomStore {
        fn need(&self, _: &Heads) -> Need {
            if self.done {
                Need::Idle
            } else {
                Need::Ports(vec![0, 1])
            }
        }
        fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
            match (cx.pop(0)?, cx.pop(1)?) {
                (Token::Value(a), Token::Value(d)) => {
                    let idx = a.as_addr().ok_or_else(|| cx.err("address stream carries a non-address"))?;
                    let t = d.as_tile().ok_or_else(|| cx.err("stores accept tiles only"))?;
                    if [t.rows, t.cols] != self.tile {
                        return Err(cx.err(format!("tile [{},{}] does not match {:?}", t.rows, t.cols, self.tile)));
                    }
                    let at = cx.mem.write(cx.start, self.base, idx, t)?;
                    cx.emit_at(0, Token::Value(StreamValue::Bool(true)), at);
                }
                (x, y) if x == y => {
                    self.done = x == Token::Done;
                    cx.emit(0, x);
                }
                (x, y) => return Err(cx.err(format!("address and data misaligned: {} vs {}", describe(&x), describe(&y)))),
            }
            Ok(())
        }
        fn done(&self) -> bool {
            self.done
        }
    }
    Box::new(RandomStore { base, tile, done: false })
}

struct Streamify {
    c: u32,
    stride: Vec<usize>,
    out_shape: Vec<usize>,
    /// Buffer dims are not all static: emit whole buffers.
    whole: bool,
    /// Rank of each emitted view.
    o: u32,
    cur: Option<BufferRef>,
    done: bool,
}

impl Streamify {

    fn load(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        if self.cur.is_none() {
            match cx.pop(0)? {
                Token::Value(StreamValue::Buffer(b)) => self.cur = Some(b),
                other => return Err(cx.err(format!("expected a buffer, got {}", describe(&other)))),
            }
        }
        Ok(())
    }

    fn release(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        if let Some(b) = self.cur.take() {
            cx.pool.release(b.id)?;
        }
        Ok(())
    }
}

impl Actor for Streamify {
    fn need(&self, h: &Heads) -> Need {
        if self.done {
            return Need::Idle;
        }
        match h.get(1) {
            Some(Token::Value(_)) if self.cur.is_none() => Need::Ports(vec![0, 1]),
            Some(Token::Stop(k)) if *k <= self.c && self.cur.is_none() => Need::Ports(vec![0, 1]),
            Some(Token::Stop(k)) if *k > self.c => Need::Ports(vec![0, 1]),
            Some(Token::Done) => Need::Ports(vec![0, 1]),
            _ => Need::Ports(vec![1]),
        }
    }

    fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        let r = cx.pop(1)?;
        match r {
            Token::Value(_) => {
                self.load(cx)?;
                let b = self.cur.clone().unwrap();
                let buf = cx.pool.get(b.id)?;
                let toks = if self.whole {
                    let dims = buf.dims.clone();
                    let mut leaf = |ix: &[usize]| {
                        let flat = ix.iter().zip(&dims).fold(0, |acc, (i, d)| acc * d + i);
                        Ok(buf.elems[flat].clone())
                    };
                    grid_tokens(&dims, &mut leaf)?
                } else {
                    let stride = &self.stride;
                    let n = buf.elems.len();
                    let mut leaf = |ix: &[usize]| {
                        let flat: usize = ix.iter().zip(stride).map(|(i, s)| i * s).sum();
                        buf.elems
                            .get(flat)
                            .cloned()
                            .ok_or_else(|| SimError::runtime("Streamify", format!("view element {flat} outside {n}")))
                    };
                    grid_tokens(&self.out_shape, &mut leaf)?
                };
                for t in toks {
                    cx.emit(0, t);
                }
                if self.c == 0 {
                    self.release(cx)?;
                }
            }
            Token::Stop(k) if k <= self.c => {
                self.load(cx)?;
                let o = self.o;
                if k == self.c {
                    self.release(cx)?;
                }
                cx.emit(0, Token::Stop(k + o));
            }
            Token::Stop(k) => {
                expect(cx.pop(0)?, &Token::Stop(k - self.c), cx, "buffer stream")?;
                cx.emit(0, Token::Stop(k + self.o));
            }
            Token::Done => {
                expect(cx.pop(0)?, &Token::Done, cx, "buffer stream")?;
                self.done = true;
                cx.emit(0, Token::Done);
            }
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.done
    }
}

enum PartState {
    AwaitSel,
    Route(Vec<usize>),
    PairStop(u32),
    PairDone,
    /// Data ended first; only the selector's `Done` is left.
    DrainSel,
}

/// Data port 0, selector port 1.
struct Partition {
    r: u32,
    n: usize,
    state: PartState,
    done: bool,
}

impl Actor for Partition {
    fn need(&self, h: &Heads) -> Need {
        match self.state {
            _ if self.done => Need::Idle,
            // a finished data stream closes the outputs without waiting for
            // the selector, which may itself depend on those outputs
            PartState::AwaitSel if matches!(h.get(0), Some(Token::Done)) => Need::Ports(vec![0]),
            PartState::AwaitSel | PartState::DrainSel => Need::Ports(vec![1]),
            _ => Need::Ports(vec![0]),
        }
    }

    fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        match std::mem::replace(&mut self.state, PartState::AwaitSel) {
            PartState::AwaitSel if matches!(cx.chans[cx.ins[0]].q.front(), Some((Token::Done, _))) => {
                cx.pop(0)?;
                for p in 0..self.n {
                    cx.emit(p, Token::Done);
                }
                self.state = PartState::DrainSel;
            }
            PartState::DrainSel => {
                expect(cx.pop(1)?, &Token::Done, cx, "selector after the data ended")?;
                self.done = true;
            }
            PartState::AwaitSel => match cx.pop(1)? {
                Token::Value(v) => {
                    let s = v.as_selector().ok_or_else(|| cx.err("selector port carries a non-selector"))?;
                    if s.width() != self.n {
                        return Err(cx.err(format!("selector width {} != {}", s.width(), self.n)));
                    }
                    self.state = PartState::Route(s.indices().collect());
                }
                Token::Stop(j) => self.state = PartState::PairStop(j + self.r),
                Token::Done => self.state = PartState::PairDone,
            },
            PartState::Route(targets) => {
                let t = cx.pop(0)?;
                let chunk_end = match &t {
                    Token::Value(_) => self.r == 0,
                    Token::Stop(k) if *k < self.r => false,
                    Token::Stop(k) if *k == self.r => true,
                    other => return Err(cx.err(format!("chunk ended early at {}", describe(other)))),
                };
                if let Token::Value(StreamValue::Buffer(b)) = &t {
                    if targets.is_empty() {
                        cx.pool.release(b.id)?;
                    } else {
                        cx.pool.retain(b.id, targets.len() - 1)?;
                    }
                }
                for &p in &targets {
                    cx.emit(p, t.clone());
                }
                if !chunk_end {
                    self.state = PartState::Route(targets);
                }
            }
            PartState::PairStop(k) => expect(cx.pop(0)?, &Token::Stop(k), cx, "data stream")?,
            PartState::PairDone => {
                expect(cx.pop(0)?, &Token::Done, cx, "data stream")?;
                for p in 0..self.n {
                    cx.emit(p, Token::Done);
                }
                self.done = true;
            }
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.done
    }
}

enum ReState {
    AwaitSel,
    Gather { pending: Vec<usize>, cur: Option<usize> },
    Final,
}

/// Data ports `0..n`, selector port `n`.
struct Reassemble {
    n: usize,
    a: u32,
    state: ReState,
    done: bool,
}

impl Actor for Reassemble {
    fn need(&self, _: &Heads) -> Need {
        match &self.state {
            _ if self.done => Need::Idle,
            ReState::AwaitSel => Need::Ports(vec![self.n]),
            ReState::Gather { cur: Some(p), .. } => Need::Ports(vec![*p]),
            ReState::Gather { pending, cur: None } => Need::Any(pending.clone()),
            ReState::Final => Need::Ports((0..self.n).collect()),
        }
    }

    fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        match std::mem::replace(&mut self.state, ReState::AwaitSel) {
            ReState::AwaitSel => match cx.pop(self.n)? {
                Token::Value(v) => {
                    let s = v.as_selector().ok_or_else(|| cx.err("selector port carries a non-selector"))?;
                    let pending: Vec<usize> = s.indices().collect();
                    if pending.iter().any(|p| *p >= self.n) {
                        return Err(cx.err("selector wider than the input count"));
                    }
                    if pending.is_empty() {
                        cx.emit(0, Token::Stop(self.a + 1));
                    } else {
                        self.state = ReState::Gather { pending, cur: None };
                    }
                }
                Token::Stop(j) => cx.emit(0, Token::Stop(j + self.a + 1)),
                Token::Done => self.state = ReState::Final,
            },
            ReState::Gather { mut pending, cur } => {
                let p = cur.or(cx.chosen).expect("port chosen");
                let t = cx.pop(p)?;
                let chunk_end = match &t {
                    Token::Value(_) => self.a == 0,
                    Token::Stop(k) if *k < self.a => false,
                    Token::Stop(k) if *k == self.a => true,
                    Token::Done => return Err(cx.err(format!("selector picks exhausted input {p}"))),
                    Token::Stop(k) => return Err(cx.err(format!("input {p} carries S{k} above chunk rank"))),
                };
                cx.emit(0, t);
                if chunk_end {
                    pending.retain(|q| *q != p);
                    if pending.is_empty() {
                        cx.emit(0, Token::Stop(self.a + 1));
                    } else {
                        self.state = ReState::Gather { pending, cur: None };
                    }
                } else {
                    self.state = ReState::Gather { pending, cur: Some(p) };
                }
            }
            ReState::Final => {
                for p in 0..self.n {
                    let t = cx.pop(p)?;
                    if t != Token::Done {
                        return Err(cx.err(format!("input {p} has data left after the selector ended")));
                    }
                }
                cx.emit(0, Token::Done);
                self.done = true;
            }
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.done
    }
}

struct EagerMerge {
    a: u32,
    exhausted: Vec<bool>,
    cur: Option<usize>,
    done: bool,
}

impl Actor for EagerMerge {
    fn need(&self, _: &Heads) -> Need {
        if self.done {
            return Need::Idle;
        }
        match self.cur {
            Some(p) => Need::Ports(vec![p]),
            None => Need::Any((0..self.exhausted.len()).filter(|p| !self.exhausted[*p]).collect()),
        }
    }

    fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        let n = self.exhausted.len();
        let p = self.cur.or(cx.chosen).expect("port chosen");
        let t = cx.pop(p)?;
        if self.cur.is_none() {
            if t == Token::Done {
                self.exhausted[p] = true;
                if self.exhausted.iter().all(|e| *e) {
                    cx.emit(0, Token::Done);
                    cx.emit(1, Token::Done);
                    self.done = true;
                }
                return Ok(());
            }
            cx.emit(1, Token::Value(StreamValue::Selector(Selector::one_hot(n, p))));
        }
        let chunk_end = match &t {
            Token::Value(_) => self.a == 0,
            Token::Stop(k) => *k >= self.a,
            Token::Done => return Err(cx.err(format!("input {p} ended inside a chunk"))),
        };
        cx.emit(0, t);
        self.cur = if chunk_end { None } else { Some(p) };
        Ok(())
    }

    fn done(&self) -> bool {
        self.done
    }
}

enum ExState {
    Run,
    /// Discarding the unit-dim stops after a data value.
    Skip(u32),
}

/// Data port 0, reference port 1.
struct Expand {
    /// Level of the reference list each data value covers.
    g: u32,
    /// Number of stops following each data value.
    m: u32,
    cur: Option<StreamValue>,
    state: ExState,
    done: bool,
}

impl Actor for Expand {
    fn need(&self, h: &Heads) -> Need {
        if self.done {
            return Need::Idle;
        }
        if let ExState::Skip(_) = self.state {
            return Need::Ports(vec![0]);
        }
        match h.get(1) {
            Some(Token::Value(_)) if self.cur.is_none() => Need::Ports(vec![0]),
            Some(Token::Stop(k)) if *k <= self.g && self.cur.is_none() => Need::Ports(vec![0]),
            Some(Token::Stop(k)) if *k > self.g => Need::Ports(vec![0, 1]),
            Some(Token::Done) => Need::Ports(vec![0, 1]),
            _ => Need::Ports(vec![1]),
        }
    }

    fn step(&mut self, cx: &mut Cx) -> Result<(), SimError> {
        if let ExState::Skip(j) = self.state {
            expect(cx.pop(0)?, &Token::Stop(j), cx, "data stream")?;
            self.state = if j < self.m { ExState::Skip(j + 1) } else { ExState::Run };
            return Ok(());
        }
        let head = cx.chans[cx.ins[1]].q.front().map(|(t, _)| t.clone());
        let fetch = match &head {
            Some(Token::Value(_)) => true,
            Some(Token::Stop(k)) => *k <= self.g,
            _ => false,
        };
        if fetch && self.cur.is_none() {
            let v = value(cx.pop(0)?, cx, "data stream")?;
            self.cur = Some(v);
            if self.m > 0 {
                self.state = ExState::Skip(1);
            }
            return Ok(());
        }
        match cx.pop(1)? {
            Token::Value(_) => cx.emit(0, Token::Value(self.cur.clone().unwrap())),
            Token::Stop(k) if k < self.g => cx.emit(0, Token::Stop(k)),
            Token::Stop(k) if k == self.g => {
                self.cur = None;
                cx.emit(0, Token::Stop(k));
            }
            Token::Stop(k) => {
                expect(cx.pop(0)?, &Token::Stop(k), cx, "data stream")?;
                cx.emit(0, Token::Stop(k));
            }
            Token::Done => {
                expect(cx.pop(0)?, &Token::Done, cx, "data stream")?;
                self.done = true;
                cx.emit(0, Token::Done);
            }
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.done
    }
}

fn rank_of(infos: &[Option<ChannelInfo>], ch: ChannelId) -> u32 {
    infos[ch].as_ref().map_or(0, |i| i.shape.rank() as u32)
}

/// Instantiates the actor for a graph node.
pub(crate) fn build(node: &Node, infos: &[Option<ChannelInfo>]) -> Box<dyn Actor> {
    match &node.kind {
        OperatorKind::LinearOffChipLoad { base_addr, tile, stride, out_shape, .. } => Box::new(LinearLoad {
            base: *base_addr,
            tile: *tile,
            stride: stride.clone(),
            out_shape: out_shape.clone(),
            walk: VecDeque::new(),
            done: false,
        }),
        OperatorKind::LinearOffChipStore { base_addr } => linear_store(*base_addr),
        OperatorKind::RandomOffChipLoad { base_addr, tile, .. } => random_load(*base_addr, *tile),
        OperatorKind::RandomOffChipStore { base_addr, tile, .. } => random_store(*base_addr, *tile),
        OperatorKind::Bufferize { rank } => bufferize(*rank as u32),
        OperatorKind::Streamify { repeat_rank, stride, out_shape } => {
            let dims = match infos[node.inputs[0]].as_ref().map(|i| &i.vtype) {
                Some(crate::graph::ValueType::Buffer { dims, .. }) => dims.clone(),
                _ => Vec::new(),
            };
            let whole = !dims.iter().all(|d| d.as_static().is_some());
            Box::new(Streamify {
                c: *repeat_rank as u32,
                stride: stride.clone(),
                out_shape: out_shape.clone(),
                whole,
                o: if whole { dims.len() } else { out_shape.len() } as u32,
                cur: None,
                done: false,
            })
        }
        OperatorKind::Partition { rank, num_consumers } => Box::new(Partition {
            r: *rank as u32,
            n: *num_consumers,
            state: PartState::AwaitSel,
            done: false,
        }),
        OperatorKind::Reassemble { inputs, rank } => Box::new(Reassemble {
            n: *inputs,
            a: *rank as u32,
            state: ReState::AwaitSel,
            done: false,
        }),
        OperatorKind::EagerMerge { inputs, rank } => Box::new(EagerMerge {
            a: *rank as u32,
            exhausted: vec![false; *inputs],
            cur: None,
            done: false,
        }),
        OperatorKind::Map { f } => map(f.clone()),
        OperatorKind::Accum { rank, f } => accum(*rank as u32, f.clone()),
        OperatorKind::Scan { rank, f } => scan(*rank as u32, f.clone()),
        OperatorKind::FlatMap { rank, f } => flat_map(*rank as u32, f.clone()),
        OperatorKind::Flatten { min, max } => flatten(*min as u32, *max as u32),
        OperatorKind::Reshape { dim, chunk, pad } => reshape(*dim as u32, *chunk, *pad),
        OperatorKind::Promote => promote(rank_of(infos, node.inputs[0])),
        OperatorKind::Expand { depth } => {
            let a = rank_of(infos, node.inputs[0]);
            Box::new(Expand {
                g: *depth as u32 + 1,
                m: (*depth as u32 + 1).min(a),
                cur: None,
                state: ExState::Run,
                done: false,
            })
        }
        OperatorKind::Zip => zip(),
        OperatorKind::Broadcast { n } => broadcast(*n),
    }
}
