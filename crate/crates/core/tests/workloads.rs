use proptest::prelude::*;
use step::cost::{analyze, CostConfig};
use step::sim::SimConfig;
use step::workloads::traces::{routes_for_iteration, synth_routes, RoutingDist, RoutingSpec};
use step::workloads::{build_gqa, build_moe, build_swiglu, shape_mismatches, GqaConfig, MoeConfig, Strategy, SwigluConfig, Tiling, Workload};

/// Symbolic traffic equals simulated bytes, observed shapes equal inferred
/// ones, and the output matches the dense reference. Symbolic FLOPs are exact
/// unless merged streams carry joined (max) tile dims, where they bound from above.
fn consistent(w: &Workload, joined_tiles: bool) -> Result<(), TestCaseError> {
    let res = w.simulate(&SimConfig { record_channels: true, ..SimConfig::default() }).unwrap();
    let b = w.bindings_after(&res);
    let infos = w.infos().unwrap();
    let bad = shape_mismatches(&w.graph, &infos, &res.traces, &b);
    prop_assert!(bad.is_empty(), "{}: {bad:?}", w.name);
    let ev = analyze(&w.graph, &infos, &CostConfig::default()).unwrap().eval(&b).unwrap();
    prop_assert_eq!(ev.traffic as u64, res.metrics.offchip_read_bytes + res.metrics.offchip_write_bytes, "{}", w.name);
    if joined_tiles {
        prop_assert!(ev.flops as u64 >= res.metrics.flops, "{}", w.name);
    } else {
        prop_assert_eq!(ev.flops as u64, res.metrics.flops, "{}", w.name);
    }
    prop_assert!(w.max_rel_error(&res) < 1e-3, "{}", w.name);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn swiglu_is_consistent(bt in 0usize..3, ft in 0usize..3, hidden in prop::sample::select(vec![8usize, 16]), seed: u64) {
        let cfg = SwigluConfig { batch: 16, hidden, inter: 32, batch_tile: [4, 8, 16][bt], inter_tile: [8, 16, 32][ft], seed };
        consistent(&build_swiglu(&cfg).unwrap(), false)?;
    }

    #[test]
    fn moe_is_consistent(
        regions in prop::option::of(prop::sample::select(vec![1usize, 2, 4])),
        tile in prop::option::of(1usize..=12),
        active in 2usize..=4,
        seed: u64,
    ) {
        let tiling = tile.map_or(Tiling::Dynamic, |tile| Tiling::Static { tile });
        let cfg = MoeConfig { experts: 4, k: 2, hidden: 16, inter: 32, batch: 12, inter_tile: 16, tiling, regions, seed };
        let spec = RoutingSpec { experts: 4, k: 2, tokens: 12, dist: RoutingDist::Zipf { s: 1.2 }, active: Some(active), seed };
        let routes = routes_for_iteration(&synth_routes(&spec).unwrap(), 0);
        consistent(&build_moe(&cfg, &routes).unwrap(), tile.is_none() && regions.is_some())?;
    }

    #[test]
    fn gqa_is_consistent(
        lens in prop::collection::vec(1usize..=40, 1..=8),
        regions in 1usize..=3,
        s in prop::sample::select(Strategy::ALL.to_vec()),
    ) {
        let regions = regions.min(lens.len());
        let cfg = GqaConfig { head_dim: 8, group: 2, kv_tile: 4, coarse_chunk: 2, ..GqaConfig::new(lens, regions, s) };
        consistent(&build_gqa(&cfg).unwrap(), false)?;
    }
}
