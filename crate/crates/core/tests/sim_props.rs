use expertsim::perfmodel::{GovernorConfig, HardwareProfile};
use expertsim::scheduler::{CapacityMode, PhaseBoundaries, Policy};
use expertsim::sim::{run_simulation, KPolicy, Lane, SegmentLabel, SimConfig, SimReport};
use expertsim::trace::{
    generate_synthetic_trace, FidelityStats, GeneratorParams, ModelShape, Trace,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    trace: Trace,
    config: SimConfig,
}

fn profile(bw: f64, init: f64, per_token: f64, size: f64) -> HardwareProfile {
    HardwareProfile {
        pcie_bandwidth: bw,
        pcie_init_latency: init,
        pcie_overhead: 0.0004,
        expert_size: size,
        draft_base: 0.002,
        draft_per_token: per_token,
        verify_samples: vec![(1, 0.010), (4, 0.016), (9, 0.030)],
        work_per_token: 1.0,
    }
}

fn case_strategy() -> impl Strategy<Value = Case> {
    let trace = (
        2usize..5,
        6usize..16,
        2usize..4,
        10usize..120,
        0.0f64..1.0,
        0.0f64..1.5,
        any::<u64>(),
    )
        .prop_map(|(layers, n, top_k, len, acc, skew, seed)| {
            let top_k = top_k.min(n - 1);
            generate_synthetic_trace(&GeneratorParams {
                shape: ModelShape::new(layers, n, top_k, 0, 1_000_000).unwrap(),
                num_tokens: len,
                fidelity: FidelityStats::new(0.4, 0.4, 0.2).unwrap(),
                accept_rate: acc,
                skew,
                seed,
            })
            .unwrap()
        });
    let knobs = (
        proptest::sample::select(Policy::ALL.to_vec()),
        0usize..12,
        prop_oneof![
            (1usize..7).prop_map(KPolicy::Fixed),
            Just(KPolicy::Governor)
        ],
        (1e9f64..40e9, 0.0f64..0.01, 0.0005f64..0.006),
        (any::<bool>(), any::<bool>()),
        prop_oneof![Just(0.0), 0.0f64..0.004],
        proptest::option::of(0usize..5),
    );
    (trace, knobs).prop_map(
        |(
            trace,
            (policy, extra, k_policy, (bw, init, tok), (global, weighted), rollback, budget),
        )| {
            let shape = trace.shape;
            let capacity_mode = if global {
                CapacityMode::Global
            } else {
                CapacityMode::PerLayer
            };
            let base = match capacity_mode {
                CapacityMode::PerLayer => shape.top_k,
                CapacityMode::Global => shape.top_k * 2,
            };
            let mut config =
                SimConfig::new(policy, base + extra, k_policy, profile(bw, init, tok, 1e6));
            config.capacity_mode = capacity_mode;
            config.entropy_weighting = weighted && !global;
            config.governor = GovernorConfig::new(1, 8, 6).unwrap();
            config.rollback_time = rollback;
            config.prefetch_budget = budget;
            config.phase_boundaries = PhaseBoundaries::default();
            Case { trace, config }
        },
    )
}

fn no_lane_overlap(report: &SimReport) -> Result<(), String> {
    for c in &report.cycles {
        for lane in [Lane::Compute, Lane::Io] {
            let mut segs: Vec<_> = c
                .segments
                .iter()
                .filter(|s| s.label.lane() == lane)
                .collect();
            segs.sort_by(|a, b| a.start.total_cmp(&b.start));
            for w in segs.windows(2) {
                if w[0].end() > w[1].start + 1e-12 {
                    return Err(format!(
                        "cycle {}: {:?} overlaps {:?}",
                        c.cycle_index, w[0], w[1]
                    ));
                }
            }
            for s in segs {
                if s.start < c.start - 1e-12 || s.end() > c.start + c.span + 1e-12 {
                    return Err(format!(
                        "cycle {}: {:?} outside the cycle",
                        c.cycle_index, s
                    ));
                }
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn conservation(case in case_strategy()) {
        let Case { trace, config } = case;
        let report = run_simulation(&trace, &config).unwrap();
        let s = config.profile.expert_size;

        // Token accounting.
        let consumed: usize = report.cycles.iter().map(|c| c.accepted_count + c.bonus_token).sum();
        prop_assert_eq!(consumed, trace.len());
        prop_assert_eq!(report.total_tokens, trace.len());

        // Bytes against the cache's own insertion counter.
        let inserted = report.cache_insertions - report.preloaded;
        prop_assert_eq!(report.total_bytes, inserted as f64 * s);
        for c in &report.cycles {
            prop_assert_eq!(c.bytes_transferred, c.new_experts_fetched as f64 * s);
        }

        // Span structure and time totals.
        let mut clock = 0.0;
        for c in &report.cycles {
            prop_assert_eq!(c.span, c.span_from_segments());
            prop_assert_eq!(c.start, clock);
            clock += c.span;
        }
        prop_assert_eq!(report.total_time, clock);
        prop_assert_eq!(report.tpot, report.total_time / report.total_tokens as f64);
        if let Err(msg) = no_lane_overlap(&report) {
            prop_assert!(false, "{}", msg);
        }

        // Acceptance is the maximal accepted prefix of the drafted positions.
        for c in &report.cycles {
            prop_assert!(c.accepted_count <= c.k_used);
            let flags: Vec<bool> = (c.position + 1..=c.position + c.k_used)
                .map(|p| trace.tokens[p].draft_accepted)
                .collect();
            let prefix = flags.iter().take_while(|&&f| f).count();
            prop_assert_eq!(c.accepted_count, prefix);
            prop_assert_eq!(c.segment(SegmentLabel::Rollback).is_some(), config.rollback_time > 0.0 && prefix < c.k_used);
            prop_assert!(c.per_layer_coverage.iter().all(|v| (0.0..=1.0).contains(v)));
            if c.per_layer_coverage.iter().all(|&v| v == 1.0) {
                prop_assert_eq!(c.stall, 0.0);
            }
        }

        // Determinism.
        let again = run_simulation(&trace, &config).unwrap();
        prop_assert_eq!(report.to_json(), again.to_json());
    }
}

fn perfect_trace(seed: u64, len: usize, skew: f64) -> Trace {
    generate_synthetic_trace(&GeneratorParams {
        shape: ModelShape::new(3, 12, 2, 0, 1_000_000).unwrap(),
        num_tokens: len,
        fidelity: FidelityStats::new(1.0, 0.0, 0.0).unwrap(),
        accept_rate: 0.7,
        skew,
        seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Perfect predictions, fast I/O and room for the whole draft window.
    #[test]
    fn speculative_covers_at_least_as_much(seed in any::<u64>(), skew in 0.0f64..1.5, k in 1usize..5, extra in 0usize..4) {
        let trace = perfect_trace(seed, 150, skew);
        let cap = k * trace.shape.top_k + extra;
        prop_assume!(cap < trace.shape.experts_per_layer);
        let fast = profile(1e13, 0.001, 0.004, 1e6);
        let spec = run_simulation(&trace, &SimConfig::new(Policy::Speculative, cap, KPolicy::Fixed(k), fast.clone())).unwrap();
        for other in [Policy::Lru, Policy::LookaheadAware, Policy::SinglePrefetchSooner, Policy::SinglePrefetchLater] {
            let r = run_simulation(&trace, &SimConfig::new(other, cap, KPolicy::Fixed(k), fast.clone())).unwrap();
            prop_assert!(spec.mean_coverage >= r.mean_coverage, "{other}: {} < {}", spec.mean_coverage, r.mean_coverage);
        }
    }
}

#[test]
fn resident_model_has_no_stall() {
    let trace = perfect_trace(11, 200, 0.5);
    let cfg = SimConfig::new(
        Policy::Speculative,
        12,
        KPolicy::Fixed(4),
        profile(16e9, 0.001, 0.003, 1e6),
    );
    let r = run_simulation(&trace, &cfg).unwrap();
    assert_eq!(r.stall_time, 0.0);
    assert_eq!(r.mean_coverage, 1.0);
}
