//! Stream shapes built from static, dynamic and ragged dimensions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sym::{Bindings, SymError, SymExpr};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ShapeDim {
    Static(i64),
    Dynamic(SymExpr),
    Ragged(SymExpr),
}

impl ShapeDim {
    /// Dynamic dimension, folded to static when the expression is constant.
    pub fn dynamic(e: SymExpr) -> Self {
        match e {
            SymExpr::Const(c) => ShapeDim::Static(c),
            e if e.is_ragged() => ShapeDim::Ragged(e),
            e => ShapeDim::Dynamic(e),
        }
    }

    pub fn ragged_sym(name: impl Into<String>) -> Self {
        ShapeDim::Ragged(SymExpr::ragged_sym(name))
    }

    pub fn expr(&self) -> SymExpr {
        match self {
            ShapeDim::Static(c) => SymExpr::Const(*c),
            ShapeDim::Dynamic(e) | ShapeDim::Ragged(e) => e.clone(),
        }
    }

    pub fn is_ragged(&self) -> bool {
        matches!(self, ShapeDim::Ragged(_))
    }

    pub fn as_static(&self) -> Option<i64> {
        match self {
            ShapeDim::Static(c) => Some(*c),
            _ => None,
        }
    }

    /// Product of two dims; raggedness absorbs.
    pub fn times(&self, other: &ShapeDim) -> ShapeDim {
        let e = self.expr().mul(other.expr());
        if self.is_ragged() || other.is_ragged() {
            match e {
                SymExpr::Const(c) => ShapeDim::Static(c),
                e => ShapeDim::Ragged(e),
            }
        } else {
            ShapeDim::dynamic(e)
        }
    }

    pub fn parse(s: &str) -> Result<ShapeDim, SymError> {
        if let Some(rest) = s.strip_prefix("ragged:") {
            let e = SymExpr::parse(rest)?;
            let e = if e.is_ragged() { e } else { e.into_ragged() };
            return Ok(ShapeDim::Ragged(e));
        }
        Ok(ShapeDim::dynamic(SymExpr::parse(s)?))
    }
}

impl fmt::Display for ShapeDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeDim::Static(c) => write!(f, "{c}"),
            ShapeDim::Dynamic(e) => write!(f, "{e}"),
            ShapeDim::Ragged(e) => write!(f, "ragged:{e}"),
        }
    }
}

impl Serialize for ShapeDim {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ShapeDim {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ShapeDim::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl From<i64> for ShapeDim {
    fn from(v: i64) -> Self {
        ShapeDim::Static(v)
    }
}

/// `[D_N, .., D_0]`, outermost first. A rank-`N` stream has `N + 1` dims; `D_N`
/// counts the tensors in the stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamShape {
    pub dims: Vec<ShapeDim>,
}

impl StreamShape {
    pub fn new(dims: Vec<ShapeDim>) -> Self {
        assert!(!dims.is_empty(), "a stream shape has at least one dim");
        StreamShape { dims }
    }

    pub fn of_static(dims: &[i64]) -> Self {
        StreamShape::new(dims.iter().map(|d| ShapeDim::Static(*d)).collect())
    }

    pub fn rank(&self) -> usize {
        self.dims.len() - 1
    }

    /// `D_k` in paper indexing (0 = innermost).
    pub fn d(&self, k: usize) -> &ShapeDim {
        &self.dims[self.dims.len() - 1 - k]
    }

    /// Outer dims down to and including `D_k`.
    pub fn outer_from(&self, k: usize) -> Vec<ShapeDim> {
        self.dims[..self.dims.len() - k].to_vec()
    }

    /// The `k` innermost dims `D_{k-1}..D_0`.
    pub fn inner(&self, k: usize) -> Vec<ShapeDim> {
        self.dims[self.dims.len() - k..].to_vec()
    }

    pub fn is_ragged(&self) -> bool {
        self.dims.iter().any(ShapeDim::is_ragged)
    }

    /// Item counts at every depth: entry `j` is the number of elements in the
    /// `j`-th dim summed over all parents.
    pub fn prefix_cardinalities(&self) -> Result<Vec<SymExpr>, SymError> {
        let mut out = Vec::with_capacity(self.dims.len());
        let mut card = SymExpr::one();
        for d in &self.dims {
            card = match d {
                ShapeDim::Ragged(e) => e.total_over(&card)?,
                other => card.mul(other.expr()),
            };
            out.push(card.clone());
        }
        Ok(out)
    }

    /// Total number of values carried by the stream.
    pub fn cardinality(&self) -> Result<SymExpr, SymError> {
        Ok(self.prefix_cardinalities()?.pop().unwrap())
    }

    pub fn eval_dims(&self, b: &Bindings) -> Result<Vec<Option<i64>>, SymError> {
        self.dims
            .iter()
            .map(|d| match d {
                ShapeDim::Ragged(_) => Ok(None),
                other => other.expr().eval(b).map(Some),
            })
            .collect()
    }

    pub fn symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = self.dims.iter().flat_map(|d| d.expr().symbols()).collect();
        out.sort();
        out.dedup();
        out
    }
}

impl fmt::Display for StreamShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinality_static_and_symbolic() {
        let s = StreamShape::new(vec![ShapeDim::Dynamic(SymExpr::sym("C_i")), 1.into(), 224.into()]);
        let mut b = Bindings::new();
        b.set("C_i", 2);
        assert_eq!(s.cardinality().unwrap().eval(&b).unwrap(), 448);
        assert_eq!(s.rank(), 2);
        assert_eq!(s.d(0), &ShapeDim::Static(224));
    }

    #[test]
    fn ragged_cardinality_uses_instance_sum() {
        let s = StreamShape::new(vec![4.into(), ShapeDim::ragged_sym("L"), 16.into()]);
        let mut b = Bindings::new();
        b.set_ragged("L", vec![1, 0, 3, 2]);
        let pre = s.prefix_cardinalities().unwrap();
        let got: Vec<i64> = pre.iter().map(|e| e.eval(&b).unwrap()).collect();
        assert_eq!(got, vec![4, 6, 96]);
    }

    #[test]
    fn dim_strings_round_trip() {
        for s in ["4", "Ci*224", "ragged:@Bsel", "ceil_div(B_1,16)", "min(1,B_0)"] {
            let d = ShapeDim::parse(s).unwrap();
            assert_eq!(ShapeDim::parse(&d.to_string()).unwrap(), d);
        }
        assert_eq!(ShapeDim::parse("ragged:Bsel").unwrap(), ShapeDim::ragged_sym("Bsel"));
        let json = serde_json::to_string(&StreamShape::of_static(&[2, 3])).unwrap();
        assert_eq!(json, r#"["2","3"]"#);
    }
}
