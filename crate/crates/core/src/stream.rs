//! Tokens, stream values, and conversion between nested tensors and token streams.
//!
//! A rank-`N` stream carries a sequence of rank-`N` tensors. `Stop(k)` closes a
//! level-`k` list (`1 <= k <= N`) and `Done` closes the whole stream.
//!
//! Two encodings are produced. [`tokenize`] emits the compressed form, where a
//! run of closes collapses to its highest stop and the last one is replaced by
//! `Done`. [`tokenize_expanded`] closes every list explicitly; operators in the
//! simulator consume and produce that form. [`detokenize`] accepts both.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Bf16,
    F32,
    I32,
    Bool,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Bf16 => 2,
            DType::F32 | DType::I32 => 4,
            DType::Bool => 1,
        }
    }
}

/// Numeric value tagged with an element type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarValue {
    pub value: f32,
    pub dtype: DType,
}

impl ScalarValue {
    pub fn bytes(&self) -> usize {
        self.dtype.size()
    }
}

/// Row-major 2-D tile. Elements are held as `f32` whatever the declared dtype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
    pub data: Vec<f32>,
}

impl Tile {
    pub fn new(rows: usize, cols: usize, dtype: DType, data: Vec<f32>) -> Self {
        assert!(rows >= 1 && cols >= 1, "tile dims must be positive");
        assert_eq!(data.len(), rows * cols, "tile element count");
        Tile { rows, cols, dtype, data }
    }

    pub fn zeros(rows: usize, cols: usize, dtype: DType) -> Self {
        Tile::new(rows, cols, dtype, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f32, dtype: DType) -> Self {
        Tile::new(1, 1, dtype, vec![v])
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn bytes(&self) -> usize {
        self.rows * self.cols * self.dtype.size()
    }
}

/// Multi-hot choice among `bits.len()` targets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Selector {
    pub bits: Vec<bool>,
}

impl Selector {
    pub fn new(bits: Vec<bool>) -> Self {
        assert!(bits.iter().any(|b| *b), "selector needs at least one bit set");
        Selector { bits }
    }

    pub fn one_hot(width: usize, idx: usize) -> Self {
        let mut bits = vec![false; width];
        bits[idx] = true;
        Selector { bits }
    }

    pub fn from_indices(width: usize, idx: &[usize]) -> Self {
        let mut bits = vec![false; width];
        for &i in idx {
            bits[i] = true;
        }
        Selector::new(bits)
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Handle to a live buffer in the on-chip pool.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BufferRef {
    pub id: u64,
    pub dims: Vec<usize>,
}

impl BufferRef {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StreamValue {
    Tile(Tile),
    Selector(Selector),
    Buffer(BufferRef),
    Bool(bool),
    /// `[1,1]` integer tile used as an off-chip address.
    Addr(i64),
    Tuple(Vec<StreamValue>),
}

impl StreamValue {
    /// Builds a tuple, splicing in the members of tuple operands so nesting stays flat.
    pub fn zip(a: StreamValue, b: StreamValue) -> StreamValue {
        let mut items = Vec::new();
        for v in [a, b] {
            match v {
                StreamValue::Tuple(inner) => items.extend(inner),
                other => items.push(other),
            }
        }
        StreamValue::Tuple(items)
    }

    pub fn bytes(&self) -> usize {
        match self {
            StreamValue::Tile(t) => t.bytes(),
            StreamValue::Selector(s) => s.width().div_ceil(8),
            StreamValue::Buffer(_) => 0,
            StreamValue::Bool(_) => 1,
            StreamValue::Addr(_) => 4,
            StreamValue::Tuple(v) => v.iter().map(StreamValue::bytes).sum(),
        }
    }

    pub fn as_tile(&self) -> Option<&Tile> {
        match self {
            StreamValue::Tile(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_selector(&self) -> Option<&Selector> {
        match self {
            StreamValue::Selector(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_addr(&self) -> Option<i64> {
        match self {
            StreamValue::Addr(a) => Some(*a),
            StreamValue::Tile(t) if t.rows == 1 && t.cols == 1 => Some(t.data[0] as i64),
            _ => None,
        }
    }

    pub fn as_tuple(&self) -> Option<&[StreamValue]> {
        match self {
            StreamValue::Tuple(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Token<V = StreamValue> {
    Value(V),
    Stop(u32),
    Done,
}

impl<V> Token<V> {
    pub fn is_value(&self) -> bool {
        matches!(self, Token::Value(_))
    }

    pub fn map<W>(self, f: impl FnOnce(V) -> W) -> Token<W> {
        match self {
            Token::Value(v) => Token::Value(f(v)),
            Token::Stop(k) => Token::Stop(k),
            Token::Done => Token::Done,
        }
    }
}

impl<V: fmt::Debug> fmt::Display for Token<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Value(v) => write!(f, "{v:?}"),
            Token::Stop(k) => write!(f, "S{k}"),
            Token::Done => write!(f, "D"),
        }
    }
}

/// A value or a list of nested values. Lists at one depth may differ in length.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Nested<T> {
    Leaf(T),
    List(Vec<Nested<T>>),
}

impl<T> Nested<T> {
    pub fn depth_ok(&self, depth: usize) -> bool {
        match (self, depth) {
            (Nested::Leaf(_), 0) => true,
            (Nested::List(items), d) if d > 0 => items.iter().all(|i| i.depth_ok(d - 1)),
            _ => false,
        }
    }

    /// True when the compressed encoding round-trips: no list whose children
    /// are lists ends with an empty child, at any depth.
    pub fn is_canonical(&self) -> bool {
        match self {
            Nested::Leaf(_) => true,
            Nested::List(items) => {
                let last_hollow = matches!(items.last(), Some(Nested::List(l)) if l.is_empty());
                !last_hollow && items.iter().all(Nested::is_canonical)
            }
        }
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        fn walk<'a, T>(n: &'a Nested<T>, out: &mut Vec<&'a T>) {
            match n {
                Nested::Leaf(v) => out.push(v),
                Nested::List(items) => items.iter().for_each(|i| walk(i, out)),
            }
        }
        walk(self, &mut out);
        out
    }
}

/// True when a whole stream (its tensors as the children of one list) round-trips.
pub fn stream_is_canonical<T>(tensors: &[Nested<T>]) -> bool {
    let last_hollow = matches!(tensors.last(), Some(Nested::List(l)) if l.is_empty());
    !last_hollow && tensors.iter().all(Nested::is_canonical)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StreamError {
    #[error("tensor nesting does not match rank {0}")]
    DepthMismatch(usize),
    #[error("stop level {level} outside 1..={rank}")]
    BadStop { level: u32, rank: usize },
    #[error("stream ended without Done")]
    MissingDone,
    #[error("token after Done")]
    AfterDone,
}

fn emit_expanded<T: Clone>(n: &Nested<T>, level: usize, out: &mut Vec<Token<T>>) {
    match n {
        Nested::Leaf(v) => out.push(Token::Value(v.clone())),
        Nested::List(items) => {
            for i in items {
                emit_expanded(i, level - 1, out);
            }
            out.push(Token::Stop(level as u32));
        }
    }
}

/// Encodes tensors with every list closed explicitly.
pub fn tokenize_expanded<T: Clone>(tensors: &[Nested<T>], rank: usize) -> Result<Vec<Token<T>>, StreamError> {
    let mut out = Vec::new();
    for t in tensors {
        if !t.depth_ok(rank) {
            return Err(StreamError::DepthMismatch(rank));
        }
        emit_expanded(t, rank, &mut out);
    }
    out.push(Token::Done);
    Ok(out)
}

/// Collapses closes: a stop directly followed by a higher stop or by `Done` is dropped.
pub fn compress<T>(tokens: Vec<Token<T>>) -> Vec<Token<T>> {
    let mut out: Vec<Token<T>> = Vec::with_capacity(tokens.len());
    for t in tokens {
        match &t {
            Token::Stop(j) => {
                while let Some(Token::Stop(k)) = out.last() {
                    if k < j {
                        out.pop();
                    } else {
                        break;
                    }
                }
            }
            Token::Done => {
                while let Some(Token::Stop(_)) = out.last() {
                    out.pop();
                }
            }
            Token::Value(_) => {}
        }
        out.push(t);
    }
    out
}

/// Encodes tensors in compressed form.
pub fn tokenize<T: Clone>(tensors: &[Nested<T>], rank: usize) -> Result<Vec<Token<T>>, StreamError> {
    Ok(compress(tokenize_expanded(tensors, rank)?))
}

/// Per-dimension extents observed in a decoded stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObservedDim {
    /// No list exists at this depth.
    Unobserved,
    Uniform(usize),
    Ragged(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedShape {
    /// `[D_N, .., D_0]`; `D_N` is the tensor count.
    pub dims: Vec<ObservedDim>,
    /// Number of items at each depth, outermost first (`totals[0]` = tensor count).
    pub totals: Vec<usize>,
}

impl ObservedShape {
    /// Per-tensor shape `[D_{N-1}, .., D_0]` when every dim is uniform.
    pub fn tensor_shape(&self) -> Option<Vec<usize>> {
        self.dims[1..]
            .iter()
            .map(|d| match d {
                ObservedDim::Uniform(n) => Some(*n),
                _ => None,
            })
            .collect()
    }

    pub fn is_ragged(&self, dim: usize) -> bool {
        matches!(self.dims[dim], ObservedDim::Ragged(_))
    }
}

/// Computes the observed shape of a list of rank-`rank` tensors.
pub fn observe_shape<T>(tensors: &[Nested<T>], rank: usize) -> ObservedShape {
    let mut extents: Vec<Vec<usize>> = vec![Vec::new(); rank + 1];
    extents[0].push(tensors.len());
    fn walk<T>(n: &Nested<T>, depth: usize, ext: &mut [Vec<usize>]) {
        if let Nested::List(items) = n {
            ext[depth].push(items.len());
            for i in items {
                walk(i, depth + 1, ext);
            }
        }
    }
    for t in tensors {
        walk(t, 1, &mut extents);
    }
    let dims = extents
        .iter()
        .map(|e| match e.as_slice() {
            [] => ObservedDim::Unobserved,
            [first, rest @ ..] if rest.iter().all(|x| x == first) => ObservedDim::Uniform(*first),
            _ => ObservedDim::Ragged(e.clone()),
        })
        .collect();
    let totals = extents.iter().map(|e| e.iter().sum()).collect();
    ObservedShape { dims, totals }
}

/// Decodes compressed or expanded tokens into tensors and their observed shape.
pub fn detokenize<T: Clone>(tokens: &[Token<T>], rank: usize) -> Result<(Vec<Nested<T>>, ObservedShape), StreamError> {
    // open[k] collects the children of the current level-k list; open[rank+1] is the stream.
    let mut open: Vec<Vec<Nested<T>>> = (0..=rank + 1).map(|_| Vec::new()).collect();
    let mut started = vec![false; rank + 2];
    let mut done = false;

    fn close<T>(open: &mut [Vec<Nested<T>>], started: &mut [bool], k: usize, force: bool) {
        if started[k] || force {
            let list = std::mem::take(&mut open[k]);
            open[k + 1].push(Nested::List(list));
            for s in started.iter_mut().skip(k + 1) {
                *s = true;
            }
        }
        started[k] = false;
    }

    for t in tokens {
        if done {
            return Err(StreamError::AfterDone);
        }
        match t {
            Token::Value(v) => {
                open[1].push(Nested::Leaf(v.clone()));
                for s in started.iter_mut().skip(1) {
                    *s = true;
                }
            }
            Token::Stop(k) => {
                let k = *k as usize;
                if k == 0 || k > rank {
                    return Err(StreamError::BadStop { level: k as u32, rank });
                }
                for j in 1..k {
                    close(&mut open, &mut started, j, false);
                }
                close(&mut open, &mut started, k, true);
            }
            Token::Done => {
                for j in 1..=rank {
                    close(&mut open, &mut started, j, false);
                }
                done = true;
            }
        }
    }
    if !done {
        return Err(StreamError::MissingDone);
    }
    let tensors = std::mem::take(&mut open[rank + 1]);
    let shape = observe_shape(&tensors, rank);
    Ok((tensors, shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l<T>(v: Vec<Nested<T>>) -> Nested<T> {
        Nested::List(v)
    }
    fn v(x: char) -> Nested<char> {
        Nested::Leaf(x)
    }
    fn val(x: char) -> Token<char> {
        Token::Value(x)
    }

    #[test]
    fn two_by_three() {
        let t = l(vec![l(vec![v('a'), v('b'), v('c')]), l(vec![v('d'), v('e'), v('f')])]);
        let toks = tokenize(std::slice::from_ref(&t), 2).unwrap();
        let want = vec![
            val('a'), val('b'), val('c'), Token::Stop(1),
            val('d'), val('e'), val('f'), Token::Done,
        ];
        assert_eq!(toks, want);
        let (back, shape) = detokenize(&toks, 2).unwrap();
        assert_eq!(back, vec![t]);
        assert_eq!(shape.dims, vec![ObservedDim::Uniform(1), ObservedDim::Uniform(2), ObservedDim::Uniform(3)]);
        assert_eq!(shape.tensor_shape(), Some(vec![2, 3]));
    }

    #[test]
    fn empty_and_multi_tensor() {
        let empty: Vec<Nested<char>> = vec![l(vec![])];
        assert_eq!(tokenize(&empty, 1).unwrap(), vec![Token::Done]);

        let two = vec![l(vec![v('a')]), l(vec![v('b')])];
        let toks = tokenize(&two, 1).unwrap();
        assert_eq!(toks, vec![val('a'), Token::Stop(1), val('b'), Token::Done]);
        assert_eq!(detokenize(&toks, 1).unwrap().0, two);

        let (none, shape) = detokenize::<char>(&[Token::Done], 3).unwrap();
        assert!(none.is_empty());
        assert_eq!(shape.dims[0], ObservedDim::Uniform(0));
        assert!(shape.dims[1..].iter().all(|d| *d == ObservedDim::Unobserved));
    }

    #[test]
    fn ragged_inner_dim() {
        let toks = vec![val('a'), Token::Stop(1), val('b'), val('c'), Token::Done];
        let (t, shape) = detokenize(&toks, 2).unwrap();
        assert_eq!(t, vec![l(vec![l(vec![v('a')]), l(vec![v('b'), v('c')])])]);
        assert!(shape.is_ragged(2));
        assert!(!shape.is_ragged(1));
    }

    #[test]
    fn expanded_form_decodes_with_hollow_lists() {
        let t = vec![l(vec![l(vec![v('a')]), l(vec![])]), l(vec![])];
        let toks = tokenize_expanded(&t, 2).unwrap();
        assert_eq!(detokenize(&toks, 2).unwrap().0, t);
    }

    #[test]
    fn structural_errors() {
        assert_eq!(detokenize(&[val('a'), Token::Stop(3), Token::Done], 2).unwrap_err(), StreamError::BadStop { level: 3, rank: 2 });
        assert_eq!(detokenize(&[val('a')], 1).unwrap_err(), StreamError::MissingDone);
        assert_eq!(detokenize(&[Token::Done, val('a')], 1).unwrap_err(), StreamError::AfterDone);
        assert!(tokenize(&[v('a')], 1).is_err());
    }

    #[test]
    fn rank_zero() {
        let t = vec![v('x'), v('y')];
        let toks = tokenize(&t, 0).unwrap();
        assert_eq!(toks, vec![val('x'), val('y'), Token::Done]);
        let (back, shape) = detokenize(&toks, 0).unwrap();
        assert_eq!(back, t);
        assert_eq!(shape.dims, vec![ObservedDim::Uniform(2)]);
    }

    fn arb_tensor(depth: usize) -> BoxedStrategy<Nested<u8>> {
        if depth == 0 {
            any::<u8>().prop_map(Nested::Leaf).boxed()
        } else {
            prop::collection::vec(arb_tensor(depth - 1), 0..4).prop_map(Nested::List).boxed()
        }
    }

    proptest! {
        #[test]
        fn canonical_round_trip((rank, tensors) in (0usize..4).prop_flat_map(|r| (Just(r), prop::collection::vec(arb_tensor(r), 0..4)))) {
            let toks = tokenize(&tensors, rank).unwrap();
            let expanded = tokenize_expanded(&tensors, rank).unwrap();
            prop_assert_eq!(&detokenize(&expanded, rank).unwrap().0, &tensors);
            if stream_is_canonical(&tensors) {
                prop_assert_eq!(detokenize(&toks, rank).unwrap().0, tensors);
            }
        }
    }
}
