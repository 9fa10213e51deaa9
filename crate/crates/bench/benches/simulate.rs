use criterion::{black_box, criterion_group, criterion_main, Criterion};
use step::cost::CostConfig;
use step::sim::SimConfig;
use step::workloads::traces::{routes_for_iteration, synth_routes, RoutingDist, RoutingSpec};
use step::workloads::{build_gqa, build_moe, build_swiglu, GqaConfig, MoeConfig, Strategy, SwigluConfig};

fn workloads(c: &mut Criterion) {
    let cfg = SimConfig::default();
    let swiglu = build_swiglu(&SwigluConfig::default()).unwrap();
    c.bench_function("simulate/swiglu", |b| b.iter(|| black_box(swiglu.simulate(&cfg).unwrap().metrics.cycles)));
    c.bench_function("analyze/swiglu", |b| b.iter(|| black_box(swiglu.cost(&CostConfig::default()).unwrap().1.traffic)));

    let spec = RoutingSpec { experts: 8, k: 2, tokens: 64, dist: RoutingDist::Zipf { s: 1.2 }, active: None, seed: 0 };
    let routes = routes_for_iteration(&synth_routes(&spec).unwrap(), 0);
    let moe = build_moe(&MoeConfig::default(), &routes).unwrap();
    c.bench_function("simulate/moe_dynamic", |b| b.iter(|| black_box(moe.simulate(&cfg).unwrap().metrics.cycles)));

    let lens = vec![16, 512, 64, 1024, 32, 256, 16, 128];
    let gqa = build_gqa(&GqaConfig::new(lens, 4, Strategy::Dynamic)).unwrap();
    c.bench_function("simulate/gqa_dynamic", |b| b.iter(|| black_box(gqa.simulate(&cfg).unwrap().metrics.cycles)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = workloads
}
criterion_main!(benches);
