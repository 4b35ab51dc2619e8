use gaitkit::gait::WindowSpec;
use gaitkit::latency::*;
use proptest::prelude::*;

fn reference() -> Reference {
    bundled::book().reference
}

#[test]
fn bundled_golden_cells_all_pass() {
    let cells = bundled::golden()
        .check(&bundled::book(), &bundled::scenarios())
        .unwrap();
    for c in &cells {
        println!(
            "{:<50} published {:>8.3} simulated {:>8.3} ({:+.1}%)",
            c.label, c.published, c.simulated, c.deviation_pct
        );
    }
    assert!(cells.iter().all(|c| c.pass));
}

#[test]
fn scenario_totals_match_hand_composition() {
    let book = bundled::book();
    let scenarios = bundled::scenarios();
    let links = [NetworkLink::global_average(), NetworkLink::fast()];
    let (d, c) = scenarios[0].run(&book, &links).unwrap();
    assert_eq!(d.name, "time_priority");
    assert!((d.total_s - (25.2 + 37.9 + 19.8 + 0.006 - 6.0)).abs() < 1e-9);
    let up15 = 27.7 * 8.0 / 15.0 + 1.25;
    let expected = 2.0 * up15 + 42.1 + 43.0 + 5.7 + 0.03 - (42.1 - 7.8);
    assert!((c[0].total_s - expected).abs() < 1e-9);
    assert!((c[0].ratio.unwrap() - c[0].total_s / d.total_s).abs() < 1e-15);
    assert_eq!(c[0].transfers.len(), 2);

    let (d, c) = scenarios[1].run(&book, &links).unwrap();
    assert!((d.total_s - (139.2 + 37.9 + 19.8 + 0.006 - (139.2 - 109.8))).abs() < 1e-9);
    let up300 = 27.7 * 8.0 / 300.0 + 1.25;
    let expected = 2.0 * up300 + 30.5 + 43.0 + 5.7 + 0.03 - (30.5 - 0.84);
    assert!((c[1].total_s - expected).abs() < 1e-9);
}

#[test]
fn vlm_rows_compose_from_token_rates() {
    let book = bundled::book();
    let r = reference();
    for (placement, name, published) in [
        (Placement::Device, "gemma_e2b", 29.2),
        (Placement::Device, "gemma_e4b", 55.7),
        (Placement::Cloud, "gemma_e2b", 2.4),
        (Placement::Cloud, "gemma_e4b", 4.8),
    ] {
        let set = book.resolve(placement).unwrap();
        let s = set.get(name).unwrap();
        assert_eq!(s.fixed_overhead_s, 0.0);
        let t = stage_time(s, &r.clip, &r.window_spec, &r.tokens).unwrap();
        assert!((t - published).abs() <= 0.01 * published, "{name}: {t}");
    }
}

#[test]
fn wham_device_row_is_inconsistent_at_the_printed_rate() {
    let book = bundled::book();
    let row = book.row(Placement::Device, "wham").unwrap();
    let e2e = row.table.end_to_end_s.unwrap();
    let printed = row.table.ms_per_frame.unwrap();
    assert!(matches!(
        calibrate_overhead(e2e, printed, 600),
        Err(LatencyError::Inconsistent { .. })
    ));
    // The substituted rate rounds to the printed one.
    assert_eq!(row.per_frame_ms.unwrap().round(), printed);
}

#[test]
fn simulation_is_deterministic() {
    let book = bundled::book();
    let links = book.links.clone();
    for s in bundled::scenarios() {
        let a = serde_json::to_string(&s.run(&book, &links).unwrap()).unwrap();
        let b = serde_json::to_string(&s.run(&book, &links).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn cloud_totals_fall_with_bandwidth() {
    let book = bundled::book();
    let cloud = book.resolve(Placement::Cloud).unwrap();
    for s in bundled::scenarios() {
        let spec = s.spec(Placement::Cloud, &book.reference);
        let mut last = f64::INFINITY;
        for mbps in (0..=30).map(|i| 10f64.powf(i as f64 / 10.0)) {
            let t = pipeline_time(&spec, &cloud, Some(&NetworkLink::new("sweep", mbps)))
                .unwrap()
                .total_s;
            assert!(t < last);
            last = t;
        }
    }
}

fn arb_stage(name: String) -> impl Strategy<Value = StageProfile> {
    (
        0..4u8,
        0.0..200.0f64,
        0.0..50.0f64,
        0.0..20.0f64,
        any::<bool>(),
    )
        .prop_map(move |(kind, rate, rate2, overhead, shared)| {
            let s = match kind {
                0 => StageProfile::per_frame(&name, rate, overhead),
                1 => StageProfile::per_window(&name, rate, overhead),
                2 => StageProfile::per_token(&name, rate2, rate, overhead),
                _ => StageProfile::fixed(&name, overhead),
            };
            StageProfile {
                shares_decoded_input: shared,
                ..s
            }
        })
}

fn arb_pipeline(max_shared: usize) -> impl Strategy<Value = (PipelineSpec, ProfileSet)> {
    (1..6usize)
        .prop_flat_map(|n| {
            (
                (0..n)
                    .map(|i| arb_stage(format!("s{i}")))
                    .collect::<Vec<_>>(),
                prop::collection::vec(0.0..1e8f64, 0..3),
                prop::collection::vec(0.0..1e8f64, 0..3),
                prop_oneof![
                    Just(SharedOverheadPolicy::None),
                    Just(SharedOverheadPolicy::SubtractMin),
                    Just(SharedOverheadPolicy::SubtractMax)
                ],
            )
        })
        .prop_map(move |(mut stages, uploads, downloads, policy)| {
            let mut shared = 0;
            for s in stages.iter_mut() {
                if s.shares_decoded_input {
                    shared += 1;
                    s.shares_decoded_input = shared <= max_shared;
                }
            }
            let spec = PipelineSpec {
                name: "p".into(),
                placement: Placement::Cloud,
                stages: stages.iter().map(|s| s.name.clone()).collect(),
                uploads,
                downloads,
                clip: ClipSpec::reference(),
                window_spec: WindowSpec::default(),
                token_counts: TokenCounts::reference(),
                shared_overhead_policy: policy,
            };
            let set = ProfileSet {
                placement: Placement::Cloud,
                batch_size: None,
                stages,
            };
            (spec, set)
        })
}

fn total(spec: &PipelineSpec, set: &ProfileSet, link: &NetworkLink) -> f64 {
    pipeline_time(spec, set, Some(link)).unwrap().total_s
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 500,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn transfer_decreases_with_bandwidth(bytes in 1.0..1e9f64, a in 0.1..1e4f64, b in 0.1..1e4f64) {
        prop_assume!(a < b);
        prop_assert!(transfer_time(bytes, &NetworkLink::new("a", a)) > transfer_time(bytes, &NetworkLink::new("b", b)));
    }

    #[test]
    fn transfer_is_additive_up_to_overhead(x in 1.0..1e9f64, y in 1.0..1e9f64, mbps in 0.1..1e4f64) {
        let l = NetworkLink::new("l", mbps);
        let lhs = transfer_time(x, &l) + transfer_time(y, &l);
        let rhs = transfer_time(x + y, &l) + l.fixed_overhead_s;
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs);
    }

    #[test]
    fn stage_order_does_not_matter((spec, set) in arb_pipeline(usize::MAX), seed in any::<u64>()) {
        let link = NetworkLink::global_average();
        let Ok(base) = pipeline_time(&spec, &set, Some(&link)) else { return Ok(()) };
        let mut shuffled = spec.clone();
        let n = shuffled.stages.len();
        shuffled.stages.rotate_left((seed as usize) % n);
        shuffled.stages.reverse();
        let other = total(&shuffled, &set, &link);
        prop_assert!((other - base.total_s).abs() <= 1e-9 * base.total_s.max(1.0));
    }

    #[test]
    fn no_policy_total_is_the_plain_sum((mut spec, set) in arb_pipeline(usize::MAX)) {
        spec.shared_overhead_policy = SharedOverheadPolicy::None;
        let r = pipeline_time(&spec, &set, Some(&NetworkLink::fast())).unwrap();
        prop_assert_eq!(r.correction_s, 0.0);
        prop_assert!((r.total_s - (r.stage_s() + r.transfer_s())).abs() <= 1e-12 * r.total_s.max(1.0));
    }

    #[test]
    fn total_is_monotone_in_costs(
        (spec, set) in arb_pipeline(2),
        which in any::<prop::sample::Index>(),
        bump in 0.0..10.0f64,
        field in 0..3u8,
    ) {
        let link = NetworkLink::global_average();
        let base = total(&spec, &set, &link);
        let mut more = set.clone();
        let s = &mut more.stages[which.index(set.stages.len())];
        match (field, s.kind) {
            (0, _) => s.fixed_overhead_s += bump,
            (1, StageKind::PerFrame) => s.per_frame_ms += bump,
            (1, StageKind::PerWindow) => s.per_window_ms += bump,
            (1, StageKind::PerToken) => s.decode_ms_per_token += bump,
            _ => s.fixed_overhead_s += bump,
        }
        prop_assert!(total(&spec, &more, &link) >= base - 1e-9);
        let mut heavier = spec.clone();
        heavier.uploads.push(bump * 1e6);
        prop_assert!(total(&heavier, &set, &link) >= base - 1e-9);
    }

    #[test]
    fn identical_specs_give_identical_reports((spec, set) in arb_pipeline(2)) {
        let link = NetworkLink::fast();
        let a = pipeline_time(&spec, &set, Some(&link)).unwrap();
        let b = pipeline_time(&spec.clone(), &set.clone(), Some(&link)).unwrap();
        prop_assert_eq!(a.total_s.to_bits(), b.total_s.to_bits());
        prop_assert_eq!(a, b);
    }
}
