use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use step::graph::{FnSpec, Graph, OperatorKind as Op, ValueType};
use step::stream::{DType, StreamValue, Tile, Token};
use step::{ShapeDim, StreamShape};
use tempfile::TempDir;

fn step(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_step")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write_json(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn scalar(x: f32) -> Token {
    Token::Value(StreamValue::Tile(Tile::scalar(x, DType::F32)))
}

#[test]
fn simulate_json_has_stable_keys_and_bytes() {
    let a = step(&["simulate", "--json"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let v: Value = serde_json::from_str(&stdout(&a)).unwrap();
    for k in ["cycles", "offchip_read_bytes", "offchip_write_bytes", "flops", "peak_onchip_bytes", "compute_utilization", "per_node"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    for _ in 0..2 {
        assert_eq!(stdout(&step(&["simulate", "--json"])), stdout(&a));
    }
}

#[test]
fn analyze_totals_match_simulated_bytes_at_reference_dims() {
    let a = step(&["analyze", "--json", "--tile", "64x512"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let rep: Value = serde_json::from_str(&stdout(&a)).unwrap();
    let s = step(&["simulate", "--json", "--tile", "64x512"]);
    let m: Value = serde_json::from_str(&stdout(&s)).unwrap();
    let bytes = m["offchip_read_bytes"].as_i64().unwrap() + m["offchip_write_bytes"].as_i64().unwrap();
    assert_eq!(rep["evaluated"]["traffic_bytes"].as_i64().unwrap(), bytes);
    assert_eq!(rep["workload"], "swiglu_b64_h256_f512_tb64_ft512");
}

#[test]
fn missing_binding_names_the_symbol() {
    let dir = TempDir::new().unwrap();
    let mut g = Graph::new();
    let x = g.input("x", ValueType::tile(4, 4, DType::Bf16), StreamShape::new(vec![ShapeDim::parse("N").unwrap()]));
    g.add("store", Op::LinearOffChipStore { base_addr: 0 }, &[x]);
    std::fs::write(dir.path().join("g.json"), g.to_json()).unwrap();
    let spec = write_json(dir.path(), "spec.json", &json!({"workload": {"kind": "graph", "path": "g.json"}}));
    let o = step(&["analyze", "--config", &spec]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`N`"), "{}", stderr(&o));

    let bound = write_json(
        dir.path(),
        "bound.json",
        &json!({"workload": {"kind": "graph", "path": "g.json"}, "bindings": {"scalars": {"N": 3}}}),
    );
    let o = step(&["analyze", "--config", &bound, "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["evaluated"]["traffic_bytes"], 3 * 4 * 4 * 2);
}

#[test]
fn deadlock_exits_three() {
    let dir = TempDir::new().unwrap();
    let mut g = Graph::new();
    let t = ValueType::tile(1, 1, DType::F32);
    let x = g.input("x", t.clone(), StreamShape::of_static(&[2]));
    let back = g.channel("loop");
    g.declare(back, t, StreamShape::of_static(&[2]));
    let z = g.add1("zip", Op::Zip, &[x, back]);
    let m = g.add1("first", Op::Map { f: FnSpec::TupleGet { index: 0 } }, &[z]);
    let outs = g.add_with_outputs("bc", Op::Broadcast { n: 2 }, &[m], &[Some(back), None]);
    g.output(outs[1]);
    std::fs::write(dir.path().join("g.json"), g.to_json()).unwrap();
    let toks = vec![scalar(1.0), scalar(2.0), Token::Done];
    let spec = write_json(
        dir.path(),
        "spec.json",
        &json!({"workload": {"kind": "graph", "path": "g.json", "inputs": {"x": toks}}}),
    );
    let o = step(&["simulate", "--config", &spec]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("deadlock"));
}

#[test]
fn io_and_validation_exit_codes() {
    assert_eq!(step(&["simulate", "--config", "/nonexistent/spec.json"]).status.code(), Some(4));
    let dir = TempDir::new().unwrap();
    let spec = write_json(
        dir.path(),
        "moe.json",
        &json!({"workload": {"kind": "moe", "routes": {"csv": {"path": "missing.csv"}}}}),
    );
    assert_eq!(step(&["simulate", "--config", &spec]).status.code(), Some(4));
    assert_eq!(step(&["simulate", "--strategy", "dynamic"]).status.code(), Some(2));
    assert_eq!(step(&["simulate", "--tile", "64x100"]).status.code(), Some(2));
    let bad = write_json(dir.path(), "bad.json", &json!({"workload": {"kind": "swiglu"}, "bogus": 1}));
    assert_eq!(step(&["simulate", "--config", &bad]).status.code(), Some(2));
}

#[test]
fn sweep_rows_follow_axis_and_record_failures() {
    let o = step(&["sweep", "--tile", "16x64,5x64,64x64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap(), vec!["config", "cycles", "bytes", "onchip", "util", "error"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[0][0], "tile=16x64");
    assert!(rows[1][1].is_empty() && rows[1][5].contains("divisible"), "{:?}", rows[1]);
    let b = |r: &csv::StringRecord| r[2].parse::<u64>().unwrap();
    assert!(b(&rows[2]) < b(&rows[0]));
    assert_eq!(stdout(&step(&["sweep", "--tile", "16x64,5x64,64x64"])), text);
}

#[test]
fn single_point_sweep_matches_simulate() {
    let sw = stdout(&step(&["sweep", "--workload", "gqa", "--strategy", "interleaved", "--json", "--seed", "3"]));
    let rows: Value = serde_json::from_str(&sw).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3, "default gqa axis covers every strategy");
    let sim = stdout(&step(&["simulate", "--workload", "gqa", "--strategy", "interleaved", "--json", "--seed", "3"]));
    let m: Value = serde_json::from_str(&sim).unwrap();
    let one = stdout(&step(&["sweep", "--workload", "gqa", "--strategy", "interleaved,interleaved", "--json", "--seed", "3"]));
    let one: Value = serde_json::from_str(&one).unwrap();
    assert_eq!(one[0]["cycles"], m["cycles"]);
    assert_eq!(rows[1]["cycles"], m["cycles"]);
}

#[test]
fn validate_reports_equality_and_correlation() {
    let o = step(&["validate", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["all_equal"], true);
    assert!(v["points"].as_array().unwrap().len() >= 10);
    assert!(v["correlation"].as_f64().unwrap() >= 0.9);
}

#[test]
fn validate_without_offchip_ops_is_trivially_equal() {
    let dir = TempDir::new().unwrap();
    let mut g = Graph::new();
    let x = g.input("x", ValueType::tile(1, 1, DType::F32), StreamShape::of_static(&[2]));
    let y = g.add1("sum", Op::Accum { rank: 0, f: FnSpec::Sum }, &[x]);
    g.output(y);
    std::fs::write(dir.path().join("g.json"), g.to_json()).unwrap();
    let toks = vec![scalar(1.0), scalar(2.0), Token::Done];
    let spec = write_json(
        dir.path(),
        "spec.json",
        &json!({"workload": {"kind": "graph", "path": "g.json", "inputs": {"x": toks}}}),
    );
    let o = step(&["validate", "--config", &spec, "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["points"][0]["symbolic_bytes"], 0);
    assert_eq!(v["points"][0]["simulated_bytes"], 0);
}

#[test]
fn gqa_strategies_pass_functional_check() {
    let mut cycles = Vec::new();
    for s in ["coarse", "interleaved", "dynamic"] {
        let o = step(&["simulate", "--workload", "gqa", "--strategy", s, "--check-functional", "--json"]);
        assert!(o.status.success(), "{s}: {}", stderr(&o));
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert!(v["max_rel_error"].as_f64().unwrap() < 1e-2);
        cycles.push(v["cycles"].as_u64().unwrap());
    }
    assert!(cycles[2] <= cycles[0].min(cycles[1]), "{cycles:?}");
}

#[test]
fn moe_dynamic_tiling_does_no_more_work_than_padded_static() {
    let dir = TempDir::new().unwrap();
    let out_d = dir.path().join("dyn.json");
    let out_s = dir.path().join("static.json");
    let run = |tile: &str, out: &Path| {
        let o = step(&["simulate", "--workload", "moe", "--tile", tile, "--json", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(o.stdout.is_empty());
        let v: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
        v["flops"].as_u64().unwrap()
    };
    assert!(run("dynamic", &out_d) <= run("32", &out_s));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = TempDir::new().unwrap();
    let spec = write_json(
        dir.path(),
        "spec.json",
        &json!({
            "workload": {"kind": "gqa", "config": {"regions": 2, "strategy": "coarse"}, "kv": {"lengths": [64, 16, 16, 32]}},
            "sim": {"offchip_bw": 512}
        }),
    );
    let file = step(&["simulate", "--config", &spec, "--json"]);
    assert!(file.status.success(), "{}", stderr(&file));
    let flag = step(&["simulate", "--config", &spec, "--json", "--strategy", "dynamic"]);
    let f: Value = serde_json::from_str(&stdout(&file)).unwrap();
    let g: Value = serde_json::from_str(&stdout(&flag)).unwrap();
    assert_eq!(f["workload"], "gqa_coarse_b4_r2");
    assert_eq!(g["workload"], "gqa_dynamic_b4_r2");
}
