//! Library side of the `step` command: run specs and the four commands.
//! Each command returns its rendered output and an exit code.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use step::cost::{analyze as cost_analyze, CostReport, EvaluatedCost};
use step::graph::{infer_shapes, validate as check_graph, ChannelId, Graph};
use step::sim::{self, Metrics, OffChipMemory, SimConfig, SimError, SimResult};
use step::stream::Token;
use step::sym::Bindings;
use step::workloads::traces::TraceError;
use step::workloads::{swiglu::sweep_points, Strategy, Workload, WorkloadError};
use thiserror::Error;

pub mod spec;

pub use spec::{RunSpec, SweepAxis, TileChoice, WorkloadSpec};
use spec::Built;

/// Relative error above which `--check-functional` fails.
pub const FUNCTIONAL_TOLERANCE: f32 = 1e-2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Deadlock(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Deadlock(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub(crate) fn trace(path: &Path, e: TraceError) -> Self {
        match e {
            TraceError::Io(e) => CliError::io(path, e),
            other => CliError::Invalid(format!("{}: {other}", path.display())),
        }
    }
}

impl From<WorkloadError> for CliError {
    fn from(e: WorkloadError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Deadlock { .. } => CliError::Deadlock(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

/// Rendered command output plus the process exit code. `note` goes to stderr.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub text: String,
    pub code: i32,
    pub note: Option<String>,
}

impl Outcome {
    fn ok(text: String) -> Self {
        Outcome { text, code: 0, note: None }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn sim_config(spec: &RunSpec) -> SimConfig {
    spec.sim.clone().unwrap_or_default()
}

fn run_graph(g: &Graph, feeds: &HashMap<ChannelId, Vec<Token>>, cfg: &SimConfig) -> Result<SimResult, CliError> {
    if let Some(&c) = g.inputs.iter().find(|c| !feeds.contains_key(c)) {
        return Err(CliError::Invalid(format!("no tokens given for graph input `{}`", g.channels[c].name)));
    }
    Ok(sim::run(g, cfg, feeds, OffChipMemory::new())?)
}

fn graph_report(g: &Graph, spec: &RunSpec) -> Result<CostReport, CliError> {
    let diags = check_graph(g);
    if !diags.is_empty() {
        let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        return Err(CliError::Invalid(lines.join("\n")));
    }
    let infos = infer_shapes(g).map_err(|e| CliError::Invalid(e.to_string()))?;
    cost_analyze(g, &infos, &spec.cost).map_err(|e| CliError::Invalid(e.to_string()))
}

/// Workload bindings overridden by the spec's.
fn bindings(w: &Workload, spec: &RunSpec, run: Option<&SimResult>) -> Bindings {
    let mut b = match run {
        Some(r) => w.bindings_after(r),
        None => w.bindings.clone(),
    };
    b.extend(&spec.bindings);
    b
}

#[derive(Serialize)]
struct NodeRow {
    name: String,
    op: String,
    traffic: String,
    onchip: String,
    flops: String,
    traffic_bytes: Option<i64>,
    onchip_bytes: Option<i64>,
}

#[derive(Serialize)]
struct Totals {
    traffic_bytes: i64,
    onchip_bytes: i64,
    flops: i64,
    operational_intensity: Option<f64>,
}

#[derive(Serialize)]
struct AnalyzeReport {
    workload: String,
    nodes: Vec<NodeRow>,
    total_traffic: String,
    total_onchip: String,
    total_flops: String,
    evaluated: Option<Totals>,
}

pub fn analyze(spec: &RunSpec, json: bool) -> Result<Outcome, CliError> {
    let (name, report, ev) = match spec.build()? {
        Built::Graph(g, _) => {
            let report = graph_report(&g, spec)?;
            let ev = report.eval(&spec.bindings);
            ("graph".to_string(), report, ev)
        }
        Built::Workload(w) => {
            let infos = w.infos().map_err(|e| CliError::Invalid(e.to_string()))?;
            let report = cost_analyze(&w.graph, &infos, &spec.cost).map_err(|e| CliError::Invalid(e.to_string()))?;
            let mut ev = report.eval(&bindings(&w, spec, None));
            if ev.is_err() && w.dispatch.is_some() {
                // dispatch-dependent symbols are only known after a run
                let r = w.simulate(&sim_config(spec))?;
                ev = report.eval(&bindings(&w, spec, Some(&r)));
            }
            (w.name.clone(), report, ev)
        }
    };
    let (evaluated, note) = match ev {
        Ok(e) => (Some(e), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let rendered = render_analysis(&name, &report, evaluated.as_ref(), json);
    Ok(Outcome { text: rendered, code: if note.is_some() { 2 } else { 0 }, note })
}

fn render_analysis(name: &str, report: &CostReport, ev: Option<&EvaluatedCost>, json: bool) -> String {
    let rows: Vec<NodeRow> = report
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| NodeRow {
            name: n.name.clone(),
            op: n.op.clone(),
            traffic: n.traffic.to_string(),
            onchip: n.onchip.to_string(),
            flops: n.flops.to_string(),
            traffic_bytes: ev.map(|e| e.per_node_traffic[i]),
            onchip_bytes: ev.map(|e| e.per_node_onchip[i]),
        })
        .collect();
    let totals = ev.map(|e| Totals {
        traffic_bytes: e.traffic,
        onchip_bytes: e.onchip,
        flops: e.flops,
        operational_intensity: (e.traffic > 0).then(|| e.flops as f64 / e.traffic as f64),
    });
    let r = AnalyzeReport {
        workload: name.to_string(),
        nodes: rows,
        total_traffic: report.total_traffic.to_string(),
        total_onchip: report.total_onchip.to_string(),
        total_flops: report.total_flops.to_string(),
        evaluated: totals,
    };
    if json {
        return to_json(&r);
    }
    let mut s = format!("workload {}\n", r.workload);
    for n in &r.nodes {
        let num = |v: Option<i64>| v.map_or(String::new(), |v| format!(" = {v}"));
        let _ = writeln!(
            s,
            "  {:<28} {:<20} traffic {}{}  onchip {}{}",
            n.name,
            n.op,
            n.traffic,
            num(n.traffic_bytes),
            n.onchip,
            num(n.onchip_bytes)
        );
    }
    let _ = writeln!(s, "total traffic {}", r.total_traffic);
    let _ = writeln!(s, "total onchip  {}", r.total_onchip);
    let _ = writeln!(s, "total flops   {}", r.total_flops);
    if let Some(t) = &r.evaluated {
        let _ = writeln!(s, "traffic_bytes {}\nonchip_bytes {}\nflops {}", t.traffic_bytes, t.onchip_bytes, t.flops);
    }
    s
}

#[derive(Serialize)]
struct SimReport {
    workload: String,
    seed: Option<u64>,
    #[serde(flatten)]
    metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_rel_error: Option<f32>,
}

pub fn simulate(spec: &RunSpec, json: bool, check_functional: bool) -> Result<Outcome, CliError> {
    let cfg = sim_config(spec);
    let (name, res, err) = match spec.build()? {
        Built::Graph(g, feeds) => {
            if check_functional {
                return Err(CliError::Invalid("--check-functional needs a workload with a reference".into()));
            }
            ("graph".to_string(), run_graph(&g, &feeds, &cfg)?, None)
        }
        Built::Workload(w) => {
            let r = w.simulate(&cfg)?;
            let e = check_functional.then(|| w.max_rel_error(&r));
            (w.name.clone(), r, e)
        }
    };
    let report = SimReport { workload: name, seed: spec.seed(), metrics: res.metrics, max_rel_error: err };
    let text = if json { to_json(&report) } else { render_metrics(&report) };
    match err {
        Some(e) if !(e <= FUNCTIONAL_TOLERANCE) => Ok(Outcome {
            text,
            code: 2,
            note: Some(format!("functional check failed: max relative error {e} > {FUNCTIONAL_TOLERANCE}")),
        }),
        _ => Ok(Outcome::ok(text)),
    }
}

fn render_metrics(r: &SimReport) -> String {
    let m = &r.metrics;
    let mut s = format!("workload {}\n", r.workload);
    if let Some(seed) = r.seed {
        let _ = writeln!(s, "seed {seed}");
    }
    let _ = writeln!(s, "cycles {}", m.cycles);
    let _ = writeln!(s, "offchip_read_bytes {}", m.offchip_read_bytes);
    let _ = writeln!(s, "offchip_write_bytes {}", m.offchip_write_bytes);
    let _ = writeln!(s, "flops {}", m.flops);
    let _ = writeln!(s, "peak_onchip_bytes {}", m.peak_onchip_bytes);
    let _ = writeln!(s, "compute_utilization {:.6}", m.compute_utilization);
    if let Some(e) = r.max_rel_error {
        let _ = writeln!(s, "max_rel_error {e:e}");
    }
    s
}

/// Expands a sweep axis into one spec per point, in axis order.
pub fn sweep_specs(spec: &RunSpec, axis: Option<&SweepAxis>) -> Result<Vec<RunSpec>, CliError> {
    let axis = match axis.or(spec.sweep.as_ref()) {
        Some(a) => a.clone(),
        None => match &spec.workload {
            WorkloadSpec::Swiglu { config } => {
                SweepAxis::Tile(sweep_points(config).iter().map(|p| TileChoice::Pair(p.batch_tile, p.inter_tile)).collect())
            }
            WorkloadSpec::Moe { config, .. } => {
                let mut ps: Vec<usize> = [1, 2, 4].iter().map(|d| config.experts / d).filter(|p| *p > 0).collect();
                ps.push(1);
                ps.dedup();
                SweepAxis::Regions(ps)
            }
            WorkloadSpec::Gqa { .. } => SweepAxis::Strategy(Strategy::ALL.to_vec()),
            WorkloadSpec::Graph { .. } => return Ok(vec![spec.clone()]),
        },
    };
    let mut out = Vec::new();
    let mut push = |f: &dyn Fn(&mut RunSpec) -> Result<(), CliError>| -> Result<(), CliError> {
        let mut s = spec.clone();
        s.sweep = None;
        f(&mut s)?;
        out.push(s);
        Ok(())
    };
    match &axis {
        SweepAxis::Tile(ts) if !ts.is_empty() => ts.iter().try_for_each(|t| push(&|s| s.set_tile(*t)))?,
        SweepAxis::Regions(rs) if !rs.is_empty() => rs.iter().try_for_each(|r| push(&|s| s.set_regions(*r)))?,
        SweepAxis::Strategy(ss) if !ss.is_empty() => ss.iter().try_for_each(|x| push(&|s| s.set_strategy(*x)))?,
        _ => return Err(CliError::Invalid("sweep axis is empty".into())),
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SweepRow {
    pub config: String,
    pub cycles: Option<u64>,
    pub bytes: Option<u64>,
    pub onchip: Option<u64>,
    pub util: Option<f64>,
    pub error: Option<String>,
}

fn sweep_point(spec: &RunSpec) -> SweepRow {
    let config = spec.label();
    let run = || -> Result<Metrics, CliError> {
        let cfg = sim_config(spec);
        Ok(match spec.build()? {
            Built::Graph(g, feeds) => run_graph(&g, &feeds, &cfg)?.metrics,
            Built::Workload(w) => w.simulate(&cfg)?.metrics,
        })
    };
    match run() {
        Ok(m) => SweepRow {
            config,
            cycles: Some(m.cycles),
            bytes: Some(m.offchip_read_bytes + m.offchip_write_bytes),
            onchip: Some(m.peak_onchip_bytes),
            util: Some(m.compute_utilization),
            error: None,
        },
        Err(e) => SweepRow { config, cycles: None, bytes: None, onchip: None, util: None, error: Some(e.to_string()) },
    }
}

/// Runs the points on scoped threads; rows come back in axis order.
pub fn sweep_rows(points: &[RunSpec]) -> Vec<SweepRow> {
    std::thread::scope(|sc| {
        let handles: Vec<_> = points.iter().map(|p| sc.spawn(move || sweep_point(p))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep point panicked")).collect()
    })
}

pub fn sweep(spec: &RunSpec, axis: Option<&SweepAxis>, json: bool) -> Result<Outcome, CliError> {
    let rows = sweep_rows(&sweep_specs(spec, axis)?);
    if json {
        return Ok(Outcome::ok(to_json(&rows)));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "cycles", "bytes", "onchip", "util", "error"]).expect("in-memory csv");
    for r in &rows {
        let opt = |v: Option<u64>| v.map_or(String::new(), |v| v.to_string());
        w.write_record([
            r.config.clone(),
            opt(r.cycles),
            opt(r.bytes),
            opt(r.onchip),
            r.util.map_or(String::new(), |u| format!("{u:.6}")),
            r.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory csv");
    }
    let bytes = w.into_inner().expect("in-memory csv");
    Ok(Outcome::ok(String::from_utf8(bytes).expect("csv is utf-8")))
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct NodeDelta {
    pub node: String,
    pub symbolic: i64,
    pub simulated: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ValidatePoint {
    pub config: String,
    pub symbolic_bytes: i64,
    pub simulated_bytes: u64,
    pub cycles: u64,
    pub equal: bool,
    pub deltas: Vec<NodeDelta>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ValidateReport {
    pub points: Vec<ValidatePoint>,
    /// Pearson correlation of symbolic traffic with simulated cycles.
    pub correlation: Option<f64>,
    pub all_equal: bool,
}

fn validate_point(spec: &RunSpec, cfg: &SimConfig) -> Result<ValidatePoint, CliError> {
    let (report, res, b) = match spec.build()? {
        Built::Graph(g, feeds) => {
            let report = graph_report(&g, spec)?;
            (report, run_graph(&g, &feeds, cfg)?, spec.bindings.clone())
        }
        Built::Workload(w) => {
            let infos = w.infos().map_err(|e| CliError::Invalid(e.to_string()))?;
            let report = cost_analyze(&w.graph, &infos, &spec.cost).map_err(|e| CliError::Invalid(e.to_string()))?;
            let r = w.simulate(cfg)?;
            let b = bindings(&w, spec, Some(&r));
            (report, r, b)
        }
    };
    let ev = report.eval(&b).map_err(|e| CliError::Invalid(e.to_string()))?;
    let m = &res.metrics;
    let simulated = m.offchip_read_bytes + m.offchip_write_bytes;
    let deltas = report
        .nodes
        .iter()
        .zip(&ev.per_node_traffic)
        .filter_map(|(n, &sym)| {
            let got = m.per_node.get(&n.name).map_or(0, |x| x.offchip_bytes);
            (sym != got as i64).then(|| NodeDelta { node: n.name.clone(), symbolic: sym, simulated: got })
        })
        .collect::<Vec<_>>();
    Ok(ValidatePoint {
        config: spec.label(),
        symbolic_bytes: ev.traffic,
        simulated_bytes: simulated,
        cycles: m.cycles,
        equal: ev.traffic == simulated as i64 && deltas.is_empty(),
        deltas,
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n as f64, y.iter().sum::<f64>() / n as f64);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Byte equality on every point of the sweep, plus the traffic/cycle correlation.
pub fn validate_report(spec: &RunSpec, axis: Option<&SweepAxis>) -> Result<ValidateReport, CliError> {
    let cfg = spec.sim.clone().unwrap_or_else(SimConfig::validation);
    let specs = match (&spec.workload, axis.or(spec.sweep.as_ref())) {
        (WorkloadSpec::Swiglu { .. }, _) | (_, Some(_)) => sweep_specs(spec, axis)?,
        _ => vec![spec.clone()],
    };
    let points: Vec<ValidatePoint> = std::thread::scope(|sc| {
        let hs: Vec<_> = specs.iter().map(|s| sc.spawn(|| validate_point(s, &cfg))).collect();
        hs.into_iter().map(|h| h.join().expect("validate point panicked")).collect::<Result<_, _>>()
    })?;
    let x: Vec<f64> = points.iter().map(|p| p.symbolic_bytes as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.cycles as f64).collect();
    Ok(ValidateReport { correlation: pearson(&x, &y), all_equal: points.iter().all(|p| p.equal), points })
}

pub fn validate(spec: &RunSpec, axis: Option<&SweepAxis>, json: bool) -> Result<Outcome, CliError> {
    let r = validate_report(spec, axis)?;
    let text = if json {
        to_json(&r)
    } else {
        let mut s = String::new();
        for p in &r.points {
            let _ = writeln!(
                s,
                "{:<28} symbolic {:>10} simulated {:>10} cycles {:>9} {}",
                p.config,
                p.symbolic_bytes,
                p.simulated_bytes,
                p.cycles,
                if p.equal { "ok" } else { "MISMATCH" }
            );
            for d in &p.deltas {
                let _ = writeln!(s, "    {}: symbolic {} simulated {}", d.node, d.symbolic, d.simulated);
            }
        }
        match r.correlation {
            Some(c) => {
                let _ = writeln!(s, "correlation(traffic, cycles) {c:.4}");
            }
            None => s.push_str("correlation(traffic, cycles) n/a\n"),
        }
        s
    };
    if r.all_equal {
        Ok(Outcome::ok(text))
    } else {
        Ok(Outcome { text, code: 2, note: Some("symbolic and simulated traffic differ".into()) })
    }
}
