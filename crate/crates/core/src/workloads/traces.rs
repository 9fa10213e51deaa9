//! Expert-routing and KV-length traces: CSV ingestion plus seeded generators.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: expert {id} out of range for {experts} experts")]
    ExpertRange { line: usize, id: usize, experts: usize },
    #[error("line {line}: token routed to {got} experts, expected {k}")]
    KMismatch { line: usize, got: usize, k: usize },
    #[error("{0}")]
    Config(String),
}

/// One routed token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRoute {
    pub iteration: usize,
    pub token: usize,
    pub experts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvRecord {
    pub request: usize,
    pub kv_len: usize,
}

fn reader<R: Read>(src: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(src)
}

fn malformed(line: usize, msg: impl ToString) -> TraceError {
    TraceError::Malformed { line, msg: msg.to_string() }
}

/// Parses `iteration,token,experts` rows; ids are pipe-separated.
pub fn parse_expert_csv<R: Read>(src: R, experts: usize, k: usize) -> Result<Vec<ExpertRoute>, TraceError> {
    let mut rd = reader(src);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| malformed(line, e))?;
        if rec.len() != 3 {
            return Err(malformed(line, format!("expected 3 fields, found {}", rec.len())));
        }
        let num = |j: usize| rec[j].parse::<usize>().map_err(|e| malformed(line, format!("field {}: {e}", j + 1)));
        let ids = rec[2]
            .split('|')
            .map(|s| s.trim().parse::<usize>().map_err(|e| malformed(line, format!("expert id `{s}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(&id) = ids.iter().find(|&&id| id >= experts) {
            return Err(TraceError::ExpertRange { line, id, experts });
        }
        if ids.len() != k {
            return Err(TraceError::KMismatch { line, got: ids.len(), k });
        }
        out.push(ExpertRoute { iteration: num(0)?, token: num(1)?, experts: ids });
    }
    Ok(out)
}

pub fn parse_kv_csv<R: Read>(src: R) -> Result<Vec<KvRecord>, TraceError> {
    let mut rd = reader(src);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| malformed(line, e))?;
        if rec.len() != 2 {
            return Err(malformed(line, format!("expected 2 fields, found {}", rec.len())));
        }
        let num = |j: usize| rec[j].parse::<usize>().map_err(|e| malformed(line, format!("field {}: {e}", j + 1)));
        let r = KvRecord { request: num(0)?, kv_len: num(1)? };
        if r.kv_len == 0 {
            return Err(malformed(line, "kv_len must be at least 1"));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_expert_trace(path: &Path, experts: usize, k: usize) -> Result<Vec<ExpertRoute>, TraceError> {
    parse_expert_csv(std::fs::File::open(path)?, experts, k)
}

pub fn load_kv_trace(path: &Path) -> Result<Vec<KvRecord>, TraceError> {
    parse_kv_csv(std::fs::File::open(path)?)
}

pub fn write_expert_csv<W: Write>(dst: W, routes: &[ExpertRoute]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(dst);
    let io = |e: csv::Error| TraceError::Io(e.into());
    w.write_record(["iteration", "token", "experts"]).map_err(io)?;
    for r in routes {
        let ids: Vec<String> = r.experts.iter().map(|e| e.to_string()).collect();
        w.write_record([r.iteration.to_string(), r.token.to_string(), ids.join("|")]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_kv_csv<W: Write>(dst: W, recs: &[KvRecord]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(dst);
    let io = |e: csv::Error| TraceError::Io(e.into());
    w.write_record(["request", "kv_len"]).map_err(io)?;
    for r in recs {
        w.write_record([r.request.to_string(), r.kv_len.to_string()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-token expert lists of one iteration, ordered by token index.
pub fn routes_for_iteration(trace: &[ExpertRoute], iteration: usize) -> Vec<Vec<usize>> {
    let mut rows: Vec<&ExpertRoute> = trace.iter().filter(|r| r.iteration == iteration).collect();
    rows.sort_by_key(|r| r.token);
    rows.into_iter().map(|r| r.experts.clone()).collect()
}

/// Tokens each expert receives.
pub fn expert_counts(routes: &[Vec<usize>], experts: usize) -> Vec<usize> {
    let mut c = vec![0; experts];
    for r in routes {
        for &e in r {
            c[e] += 1;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingDist {
    Uniform,
    /// Expert `i` (among the active ones) drawn with weight `1 / (i + 1)^s`.
    Zipf { s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingSpec {
    pub experts: usize,
    pub k: usize,
    pub tokens: usize,
    pub dist: RoutingDist,
    /// Only experts `0..active` ever receive tokens; defaults to all.
    #[serde(default)]
    pub active: Option<usize>,
    pub seed: u64,
}

/// One iteration of routing; each token picks `k` distinct experts.
pub fn synth_routes(spec: &RoutingSpec) -> Result<Vec<ExpertRoute>, TraceError> {
    let active = spec.active.unwrap_or(spec.experts);
    if active > spec.experts || spec.k == 0 || spec.k > active {
        return Err(TraceError::Config(format!(
            "cannot route to {} of {active} active experts (E={})",
            spec.k, spec.experts
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weight = |i: usize| match spec.dist {
        RoutingDist::Uniform => 1.0,
        RoutingDist::Zipf { s } => 1.0 / ((i + 1) as f64).powf(s),
    };
    let ids: Vec<usize> = (0..active).collect();
    let mut out = Vec::with_capacity(spec.tokens);
    for t in 0..spec.tokens {
        let mut pick: Vec<usize> = ids
            .choose_multiple_weighted(&mut rng, spec.k, |&i| weight(i))
            .map_err(|e| TraceError::Config(e.to_string()))?
            .copied()
            .collect();
        pick.sort_unstable();
        out.push(ExpertRoute { iteration: 0, token: t, experts: pick });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KvDist {
    LogNormal { mu: f64, sigma: f64, min: usize, max: usize },
    /// Each request draws uniformly from a fixed set of lengths.
    FixedSet { lengths: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvSpec {
    pub requests: usize,
    pub dist: KvDist,
    pub seed: u64,
}

pub fn synth_kv(spec: &KvSpec) -> Result<Vec<KvRecord>, TraceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lens: Vec<usize> = match &spec.dist {
        KvDist::LogNormal { mu, sigma, min, max } => {
            if min == &0 || min > max {
                return Err(TraceError::Config(format!("bad length range [{min}, {max}]")));
            }
            let d = LogNormal::new(*mu, *sigma).map_err(|e| TraceError::Config(e.to_string()))?;
            (0..spec.requests).map(|_| (d.sample(&mut rng).round() as usize).clamp(*min, *max)).collect()
        }
        KvDist::FixedSet { lengths } => {
            if lengths.is_empty() || lengths.contains(&0) {
                return Err(TraceError::Config("length set must be non-empty and positive".into()));
            }
            (0..spec.requests).map(|_| lengths[rng.gen_range(0..lengths.len())]).collect()
        }
    };
    Ok(lens.into_iter().enumerate().map(|(request, kv_len)| KvRecord { request, kv_len }).collect())
}
