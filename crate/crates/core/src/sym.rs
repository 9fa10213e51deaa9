//! Symbolic integer expressions used for stream shapes and cost formulas.
//!
//! Symbols are either plain (one value per binding set) or ragged (one value per
//! instance of the dimension). Ragged symbols only evaluate through
//! [`SymExpr::SumRagged`], which sums every bound instance.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SymError {
    #[error("unbound symbol `{0}`")]
    Unbound(String),
    #[error("ragged symbol `{0}` must be aggregated before evaluation")]
    RaggedUnaggregated(String),
    #[error("division by zero in ceil_div")]
    DivByZero,
    #[error("negative value {0} produced while evaluating `{1}`")]
    Negative(i64, String),
    #[error("cannot aggregate `{0}` over ragged instances")]
    NonLinearRagged(String),
    #[error("parse error at offset {0}: {1}")]
    Parse(usize, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymExpr {
    Const(i64),
    Sym { name: String, ragged: bool },
    /// Sum of every bound instance of a ragged symbol.
    SumRagged(String),
    Add(Vec<SymExpr>),
    Mul(Vec<SymExpr>),
    CeilDiv(Box<SymExpr>, Box<SymExpr>),
    Max(Box<SymExpr>, Box<SymExpr>),
    Min(Box<SymExpr>, Box<SymExpr>),
}

/// Concrete values for plain and ragged symbols.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bindings {
    #[serde(default)]
    pub scalars: BTreeMap<String, i64>,
    #[serde(default)]
    pub ragged: BTreeMap<String, Vec<i64>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: i64) -> &mut Self {
        self.scalars.insert(name.into(), value);
        self
    }

    pub fn set_ragged(&mut self, name: impl Into<String>, values: Vec<i64>) -> &mut Self {
        self.ragged.insert(name.into(), values);
        self
    }

    pub fn extend(&mut self, other: &Bindings) {
        self.scalars
            .extend(other.scalars.iter().map(|(k, v)| (k.clone(), *v)));
        self.ragged
            .extend(other.ragged.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
}

impl From<i64> for SymExpr {
    fn from(v: i64) -> Self {
        SymExpr::Const(v)
    }
}

impl From<usize> for SymExpr {
    fn from(v: usize) -> Self {
        SymExpr::Const(v as i64)
    }
}

impl SymExpr {
    pub fn c(v: i64) -> Self {
        SymExpr::Const(v)
    }

    pub fn sym(name: impl Into<String>) -> Self {
        SymExpr::Sym { name: name.into(), ragged: false }
    }

    pub fn ragged_sym(name: impl Into<String>) -> Self {
        SymExpr::Sym { name: name.into(), ragged: true }
    }

    pub fn sum_ragged(name: impl Into<String>) -> Self {
        SymExpr::SumRagged(name.into())
    }

    pub fn zero() -> Self {
        SymExpr::Const(0)
    }

    pub fn one() -> Self {
        SymExpr::Const(1)
    }

    pub fn as_const(&self) -> Option<i64> {
        match self {
            SymExpr::Const(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0)
    }

    /// True iff any operand was built from a ragged symbol.
    pub fn is_ragged(&self) -> bool {
        match self {
            SymExpr::Const(_) | SymExpr::SumRagged(_) => false,
            SymExpr::Sym { ragged, .. } => *ragged,
            SymExpr::Add(v) | SymExpr::Mul(v) => v.iter().any(SymExpr::is_ragged),
            SymExpr::CeilDiv(a, b) | SymExpr::Max(a, b) | SymExpr::Min(a, b) => {
                a.is_ragged() || b.is_ragged()
            }
        }
    }

    /// Every symbol name referenced by the expression (plain, ragged and aggregated).
    pub fn symbols(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_symbols(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_symbols(&self, out: &mut Vec<String>) {
        match self {
            SymExpr::Const(_) => {}
            SymExpr::Sym { name, .. } | SymExpr::SumRagged(name) => out.push(name.clone()),
            SymExpr::Add(v) | SymExpr::Mul(v) => v.iter().for_each(|e| e.collect_symbols(out)),
            SymExpr::CeilDiv(a, b) | SymExpr::Max(a, b) | SymExpr::Min(a, b) => {
                a.collect_symbols(out);
                b.collect_symbols(out);
            }
        }
    }

    pub fn add(self, rhs: impl Into<SymExpr>) -> SymExpr {
        SymExpr::sum(vec![self, rhs.into()])
    }

    pub fn mul(self, rhs: impl Into<SymExpr>) -> SymExpr {
        SymExpr::product(vec![self, rhs.into()])
    }

    /// Simplifying n-ary sum: flattens nested sums and folds constants.
    pub fn sum(terms: Vec<SymExpr>) -> SymExpr {
        let mut constant = 0i64;
        let mut rest = Vec::new();
        for t in terms {
            match t {
                SymExpr::Const(c) => constant += c,
                SymExpr::Add(inner) => {
                    for i in inner {
                        match i {
                            SymExpr::Const(c) => constant += c,
                            other => rest.push(other),
                        }
                    }
                }
                other => rest.push(other),
            }
        }
        if constant != 0 || rest.is_empty() {
            rest.push(SymExpr::Const(constant));
        }
        if rest.len() == 1 {
            rest.pop().unwrap()
        } else {
            SymExpr::Add(rest)
        }
    }

    /// Simplifying n-ary product: flattens, folds constants, zero annihilates.
    pub fn product(factors: Vec<SymExpr>) -> SymExpr {
        let mut constant = 1i64;
        let mut rest = Vec::new();
        for f in factors {
            match f {
                SymExpr::Const(c) => constant *= c,
                SymExpr::Mul(inner) => {
                    for i in inner {
                        match i {
                            SymExpr::Const(c) => constant *= c,
                            other => rest.push(other),
                        }
                    }
                }
                other => rest.push(other),
            }
        }
        if constant == 0 {
            return SymExpr::Const(0);
        }
        if constant != 1 || rest.is_empty() {
            rest.insert(0, SymExpr::Const(constant));
        }
        if rest.len() == 1 {
            rest.pop().unwrap()
        } else {
            SymExpr::Mul(rest)
        }
    }

    pub fn ceil_div(a: impl Into<SymExpr>, b: impl Into<SymExpr>) -> SymExpr {
        let (a, b) = (a.into(), b.into());
        match (&a, &b) {
            (SymExpr::Const(x), SymExpr::Const(y)) if *y > 0 => SymExpr::Const((x + y - 1) / y),
            (_, SymExpr::Const(1)) => a,
            _ => SymExpr::CeilDiv(Box::new(a), Box::new(b)),
        }
    }

    pub fn max(a: impl Into<SymExpr>, b: impl Into<SymExpr>) -> SymExpr {
        let (a, b) = (a.into(), b.into());
        match (&a, &b) {
            (SymExpr::Const(x), SymExpr::Const(y)) => SymExpr::Const(*x.max(y)),
            _ if a == b => a,
            _ => SymExpr::Max(Box::new(a), Box::new(b)),
        }
    }

    pub fn min(a: impl Into<SymExpr>, b: impl Into<SymExpr>) -> SymExpr {
        let (a, b) = (a.into(), b.into());
        match (&a, &b) {
            (SymExpr::Const(x), SymExpr::Const(y)) => SymExpr::Const(*x.min(y)),
            _ if a == b => a,
            _ => SymExpr::Min(Box::new(a), Box::new(b)),
        }
    }

    /// `1 if self > 0 else 0`, for non-negative expressions.
    pub fn nonzero_indicator(self) -> SymExpr {
        SymExpr::min(SymExpr::one(), self)
    }

    pub fn eval(&self, b: &Bindings) -> Result<i64, SymError> {
        let v = self.eval_raw(b)?;
        if v < 0 {
            return Err(SymError::Negative(v, self.to_string()));
        }
        Ok(v)
    }

    fn eval_raw(&self, b: &Bindings) -> Result<i64, SymError> {
        Ok(match self {
            SymExpr::Const(v) => *v,
            SymExpr::Sym { name, ragged: false } => *b
                .scalars
                .get(name)
                .ok_or_else(|| SymError::Unbound(name.clone()))?,
            SymExpr::Sym { name, ragged: true } => {
                return Err(SymError::RaggedUnaggregated(name.clone()))
            }
            SymExpr::SumRagged(name) => b
                .ragged
                .get(name)
                .ok_or_else(|| SymError::Unbound(name.clone()))?
                .iter()
                .sum(),
            SymExpr::Add(v) => v.iter().map(|e| e.eval_raw(b)).sum::<Result<i64, _>>()?,
            SymExpr::Mul(v) => v.iter().map(|e| e.eval_raw(b)).product::<Result<i64, _>>()?,
            SymExpr::CeilDiv(x, y) => {
                let (x, y) = (x.eval_raw(b)?, y.eval_raw(b)?);
                if y == 0 {
                    return Err(SymError::DivByZero);
                }
                (x + y - 1).div_euclid(y)
            }
            SymExpr::Max(x, y) => x.eval_raw(b)?.max(y.eval_raw(b)?),
            SymExpr::Min(x, y) => x.eval_raw(b)?.min(y.eval_raw(b)?),
        })
    }

    /// Total of this per-instance expression over all instances of a dimension
    /// whose parents number `parents`. Linear in ragged symbols only.
    pub fn total_over(&self, parents: &SymExpr) -> Result<SymExpr, SymError> {
        if !self.is_ragged() {
            return Ok(parents.clone().mul(self.clone()));
        }
        match self {
            SymExpr::Sym { name, ragged: true } => Ok(SymExpr::SumRagged(name.clone())),
            SymExpr::Add(terms) => Ok(SymExpr::sum(
                terms
                    .iter()
                    .map(|t| t.total_over(parents))
                    .collect::<Result<_, _>>()?,
            )),
            SymExpr::Mul(factors) => {
                let ragged: Vec<_> = factors.iter().filter(|f| f.is_ragged()).collect();
                if ragged.len() != 1 {
                    return Err(SymError::NonLinearRagged(self.to_string()));
                }
                let mut out: Vec<SymExpr> = factors
                    .iter()
                    .filter(|f| !f.is_ragged())
                    .cloned()
                    .collect();
                out.push(ragged[0].total_over(parents)?);
                Ok(SymExpr::product(out))
            }
            _ => Err(SymError::NonLinearRagged(self.to_string())),
        }
    }

    /// Renames plain symbols through `f` (used when instantiating templates).
    pub fn map_symbols(&self, f: &dyn Fn(&str) -> Option<SymExpr>) -> SymExpr {
        match self {
            SymExpr::Sym { name, ragged: false } => f(name).unwrap_or_else(|| self.clone()),
            SymExpr::Const(_) | SymExpr::Sym { .. } | SymExpr::SumRagged(_) => self.clone(),
            SymExpr::Add(v) => SymExpr::sum(v.iter().map(|e| e.map_symbols(f)).collect()),
            SymExpr::Mul(v) => SymExpr::product(v.iter().map(|e| e.map_symbols(f)).collect()),
            SymExpr::CeilDiv(a, b) => SymExpr::ceil_div(a.map_symbols(f), b.map_symbols(f)),
            SymExpr::Max(a, b) => SymExpr::max(a.map_symbols(f), b.map_symbols(f)),
            SymExpr::Min(a, b) => SymExpr::min(a.map_symbols(f), b.map_symbols(f)),
        }
    }

    /// Marks every plain symbol ragged.
    pub fn into_ragged(self) -> SymExpr {
        match self {
            SymExpr::Sym { name, .. } => SymExpr::Sym { name, ragged: true },
            SymExpr::Add(v) => SymExpr::Add(v.into_iter().map(SymExpr::into_ragged).collect()),
            SymExpr::Mul(v) => SymExpr::Mul(v.into_iter().map(SymExpr::into_ragged).collect()),
            SymExpr::CeilDiv(a, b) => {
                SymExpr::CeilDiv(Box::new(a.into_ragged()), Box::new(b.into_ragged()))
            }
            SymExpr::Max(a, b) => SymExpr::Max(Box::new(a.into_ragged()), Box::new(b.into_ragged())),
            SymExpr::Min(a, b) => SymExpr::Min(Box::new(a.into_ragged()), Box::new(b.into_ragged())),
            other => other,
        }
    }

    pub fn parse(src: &str) -> Result<SymExpr, SymError> {
        let mut p = Parser { src: src.as_bytes(), pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(SymError::Parse(p.pos, "trailing input".into()));
        }
        Ok(e)
    }
}

impl std::ops::Add for SymExpr {
    type Output = SymExpr;
    fn add(self, rhs: SymExpr) -> SymExpr {
        SymExpr::sum(vec![self, rhs])
    }
}

impl std::ops::Mul for SymExpr {
    type Output = SymExpr;
    fn mul(self, rhs: SymExpr) -> SymExpr {
        SymExpr::product(vec![self, rhs])
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymExpr::Const(v) => write!(f, "{v}"),
            SymExpr::Sym { name, ragged: false } => write!(f, "{name}"),
            SymExpr::Sym { name, ragged: true } => write!(f, "@{name}"),
            SymExpr::SumRagged(name) => write!(f, "sum({name})"),
            SymExpr::Add(v) => {
                write!(f, "(")?;
                for (i, e) in v.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, ")")
            }
            SymExpr::Mul(v) => {
                for (i, e) in v.iter().enumerate() {
                    if i > 0 {
                        write!(f, "*")?;
                    }
                    write!(f, "{e}")?;
                }
                Ok(())
            }
            SymExpr::CeilDiv(a, b) => write!(f, "ceil_div({a},{b})"),
            SymExpr::Max(a, b) => write!(f, "max({a},{b})"),
            SymExpr::Min(a, b) => write!(f, "min({a},{b})"),
        }
    }
}

impl Serialize for SymExpr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SymExpr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SymExpr::parse(&s).map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), SymError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(SymError::Parse(self.pos, format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<SymExpr, SymError> {
        let mut terms = vec![self.term()?];
        while self.peek() == Some(b'+') {
            self.pos += 1;
            terms.push(self.term()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { SymExpr::sum(terms) })
    }

    fn term(&mut self) -> Result<SymExpr, SymError> {
        let mut factors = vec![self.atom()?];
        while self.peek() == Some(b'*') {
            self.pos += 1;
            factors.push(self.atom()?);
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { SymExpr::product(factors) })
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn atom(&mut self) -> Result<SymExpr, SymError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(b'@') => {
                self.pos += 1;
                let name = self.ident();
                if name.is_empty() {
                    return Err(SymError::Parse(self.pos, "expected ragged symbol".into()));
                }
                Ok(SymExpr::ragged_sym(name))
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                let s = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                s.parse()
                    .map(SymExpr::Const)
                    .map_err(|e| SymError::Parse(start, e.to_string()))
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let name = self.ident();
                if self.peek() == Some(b'(') {
                    self.pos += 1;
                    let out = match name.as_str() {
                        "sum" => {
                            self.skip_ws();
                            let inner = self.ident();
                            SymExpr::SumRagged(inner)
                        }
                        "ceil_div" | "max" | "min" => {
                            let a = self.expr()?;
                            self.expect(b',')?;
                            let b = self.expr()?;
                            match name.as_str() {
                                "ceil_div" => SymExpr::ceil_div(a, b),
                                "max" => SymExpr::max(a, b),
                                _ => SymExpr::min(a, b),
                            }
                        }
                        other => {
                            return Err(SymError::Parse(self.pos, format!("unknown function `{other}`")))
                        }
                    };
                    self.expect(b')')?;
                    Ok(out)
                } else {
                    Ok(SymExpr::sym(name))
                }
            }
            _ => Err(SymError::Parse(self.pos, "unexpected token".into())),
        }
    }
}

/// Evaluates `expr` under `bindings`.
pub fn sym_eval(expr: &SymExpr, bindings: &Bindings) -> Result<i64, SymError> {
    expr.eval(bindings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eval_examples() {
        let mut b = Bindings::new();
        b.set("C_i", 3);
        assert_eq!(sym_eval(&SymExpr::sym("C_i").mul(224i64), &b).unwrap(), 672);
        assert_eq!(SymExpr::ceil_div(10i64, 4i64).eval(&b).unwrap(), 3);
        let lazy = SymExpr::CeilDiv(Box::new(SymExpr::c(10)), Box::new(SymExpr::c(4)));
        assert_eq!(lazy.eval(&b).unwrap(), 3);
        b.set_ragged("B", vec![2, 0, 5]);
        assert_eq!(SymExpr::sum_ragged("B").eval(&b).unwrap(), 7);
    }

    #[test]
    fn unbound_symbol_is_an_error() {
        let e = SymExpr::sym("X").add(1i64);
        assert_eq!(e.eval(&Bindings::new()), Err(SymError::Unbound("X".into())));
        let r = SymExpr::ragged_sym("L");
        assert!(matches!(r.eval(&Bindings::new()), Err(SymError::RaggedUnaggregated(_))));
    }

    #[test]
    fn ragged_absorbs() {
        let plain = SymExpr::sym("A").mul(SymExpr::sym("B")).add(3i64);
        assert!(!plain.is_ragged());
        let r = plain.clone().mul(SymExpr::ragged_sym("L"));
        assert!(r.is_ragged());
        assert!(SymExpr::max(r.clone(), 1i64).is_ragged());
        assert!(SymExpr::ceil_div(plain, r).is_ragged());
    }

    #[test]
    fn total_over_instances() {
        let mut b = Bindings::new();
        b.set("T", 4).set("N", 3).set_ragged("L", vec![1, 2, 5]);
        let per = SymExpr::ragged_sym("L").mul(SymExpr::sym("T")).add(1i64);
        let tot = per.total_over(&SymExpr::sym("N")).unwrap();
        // 4*(1+2+5) + 3*1
        assert_eq!(tot.eval(&b).unwrap(), 35);
        let bad = SymExpr::ragged_sym("L").mul(SymExpr::ragged_sym("L"));
        assert!(bad.total_over(&SymExpr::one()).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for s in ["Ci*224", "(B_0+B_1+3)", "ceil_div(D,4)*4", "max(A,min(1,B))", "sum(L)*16", "@Bsel"] {
            let e = SymExpr::parse(s).unwrap();
            assert_eq!(SymExpr::parse(&e.to_string()).unwrap(), e, "{s}");
        }
        assert!(SymExpr::parse("3+").is_err());
        assert!(SymExpr::parse("foo(1)").is_err());
    }

    fn arb_expr() -> impl Strategy<Value = SymExpr> {
        let leaf = prop_oneof![
            (0i64..20).prop_map(SymExpr::Const),
            prop::sample::select(vec!["a", "b", "c"]).prop_map(SymExpr::sym),
        ];
        leaf.prop_recursive(3, 16, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| a + b),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| a * b),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| SymExpr::max(a, b)),
                (inner.clone(), (1i64..5)).prop_map(|(a, d)| SymExpr::ceil_div(a, d)),
            ]
        })
    }

    proptest! {
        #[test]
        fn eval_is_homomorphic(x in arb_expr(), y in arb_expr(), a in 0i64..50, b in 0i64..50, c in 0i64..50) {
            let mut bind = Bindings::new();
            bind.set("a", a).set("b", b).set("c", c);
            let (ex, ey) = (x.eval(&bind).unwrap(), y.eval(&bind).unwrap());
            prop_assert_eq!((x.clone() + y.clone()).eval(&bind).unwrap(), ex + ey);
            prop_assert_eq!((x.clone() * y.clone()).eval(&bind).unwrap(), ex * ey);
            prop_assert_eq!(SymExpr::parse(&x.to_string()).unwrap().eval(&bind).unwrap(), ex);
        }
    }
}
