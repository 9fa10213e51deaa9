//! Streaming tensor dataflow graphs: stream encoding, symbolic shapes, a cost
//! model and a discrete-event simulator, plus constructors for attention and
//! mixture-of-experts workloads.

pub mod cost;
pub mod graph;
pub mod kernels;
pub mod shape;
pub mod sim;
pub mod workloads;
pub mod stream;
pub mod sym;

pub use shape::{ShapeDim, StreamShape};
pub use stream::{
    detokenize, tokenize, tokenize_expanded, BufferRef, DType, Nested, ObservedDim, ObservedShape,
    ScalarValue, Selector, StreamError, StreamValue, Tile, Token,
};
pub use sym::{sym_eval, Bindings, SymError, SymExpr};
