//! Deterministic replay of a trace through draft, prefetch, verify and
//! rollback cycles.
//!
//! Each cycle runs on two lanes. The compute lane drafts `k` tokens and then
//! verifies the window; the I/O lane pays the cycle's initial fetch latency,
//! drains prefetch batches in FIFO order, and finally moves whatever the
//! verification still lacks. Coverage is always measured against the target
//! routing of the verified window.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perfmodel::{
    select_k, t_draft, t_pcie_new, t_verify, update_acceptance, AcceptanceModel, GovernorConfig,
    HardwareProfile, PerfError,
};
use crate::scheduler::{
    elb_row, entropy_weighted_capacities, lookahead_victim, reorder_verification, CacheState,
    CapacityMode, ExecutionPlan, ExpertLookaheadBuffer, PhaseBoundaries, Policy, PrefetchEntry,
    PrefetchPlan, PrefetchPlanner, SchedError,
};
use crate::trace::{layer_entropy, ExpertKey, Trace, TraceError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Perf(#[from] PerfError),
}

/// How the draft length is chosen each cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPolicy {
    Fixed(usize),
    Governor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub policy: Policy,
    /// Experts per layer, or in total under [`CapacityMode::Global`].
    pub cache_capacity: usize,
    pub capacity_mode: CapacityMode,
    /// Redistribute per-layer capacity in proportion to routing entropy.
    pub entropy_weighting: bool,
    pub k_policy: KPolicy,
    pub profile: HardwareProfile,
    pub governor: GovernorConfig,
    pub phase_boundaries: PhaseBoundaries,
    /// Phase-2 transfers per draft token; derived from the profile when unset.
    pub prefetch_budget: Option<usize>,
    /// Seconds charged after a cycle that rejected part of its draft.
    pub rollback_time: f64,
    /// Starting per-position acceptance probability for the governor.
    pub initial_acceptance: f64,
    pub ema_alpha: f64,
    /// Recorded for provenance; replay itself draws no random numbers.
    pub seed: u64,
}

impl SimConfig {
    pub fn new(
        policy: Policy,
        cache_capacity: usize,
        k_policy: KPolicy,
        profile: HardwareProfile,
    ) -> Self {
        Self {
            policy,
            cache_capacity,
            capacity_mode: CapacityMode::PerLayer,
            entropy_weighting: false,
            k_policy,
            profile,
            governor: GovernorConfig::default(),
            phase_boundaries: PhaseBoundaries::default(),
            prefetch_budget: None,
            rollback_time: 0.0,
            initial_acceptance: 0.8,
            ema_alpha: AcceptanceModel::DEFAULT_ALPHA,
            seed: 0,
        }
    }

    pub fn validate(&self, trace: &Trace) -> Result<(), SimError> {
        let shape = &trace.shape;
        self.profile.validate()?;
        match self.k_policy {
            KPolicy::Fixed(0) => {
                return Err(SimError::InvalidConfig("fixed k must be >= 1".into()))
            }
            KPolicy::Fixed(_) => {}
            KPolicy::Governor => self.governor.validate()?,
        }
        let min_cap = match self.capacity_mode {
            CapacityMode::PerLayer => shape.top_k,
            CapacityMode::Global => shape.top_k.max(1),
        };
        if self.cache_capacity < min_cap {
            return Err(SimError::InvalidConfig(format!(
                "cache_capacity {} is below top_k {}",
                self.cache_capacity, shape.top_k
            )));
        }
        PhaseBoundaries::new(self.phase_boundaries.f1, self.phase_boundaries.f2)?;
        if !(self.rollback_time >= 0.0 && self.rollback_time.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "rollback_time {} must be finite and >= 0",
                self.rollback_time
            )));
        }
        if !(0.0..=1.0).contains(&self.initial_acceptance) {
            return Err(SimError::InvalidConfig(format!(
                "initial_acceptance {} outside [0, 1]",
                self.initial_acceptance
            )));
        }
        AcceptanceModel::new(vec![], self.ema_alpha)?;
        Ok(())
    }

    fn max_k(&self) -> usize {
        match self.k_policy {
            KPolicy::Fixed(k) => k,
            KPolicy::Governor => self.governor.k_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Compute,
    Io,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    Draft,
    IoInit,
    Prefetch,
    IoNew,
    Verify,
    Rollback,
}

impl SegmentLabel {
    pub fn lane(self) -> Lane {
        match self {
            SegmentLabel::Draft | SegmentLabel::Verify | SegmentLabel::Rollback => Lane::Compute,
            SegmentLabel::IoInit | SegmentLabel::Prefetch | SegmentLabel::IoNew => Lane::Io,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentLabel::Draft => "draft",
            SegmentLabel::IoInit => "io_init",
            SegmentLabel::Prefetch => "prefetch",
            SegmentLabel::IoNew => "io_new",
            SegmentLabel::Verify => "verify",
            SegmentLabel::Rollback => "rollback",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: SegmentLabel,
    pub start: f64,
    pub duration: f64,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle_index: usize,
    /// First trace position verified by this cycle.
    pub position: usize,
    pub k_used: usize,
    pub accepted_count: usize,
    pub bonus_token: usize,
    pub start: f64,
    pub span: f64,
    pub segments: Vec<Segment>,
    pub per_layer_coverage: Vec<f64>,
    pub new_experts_fetched: u64,
    /// Prefetched experts that arrived before verification.
    pub prefetch_completed: u64,
    /// Prefetches still in flight at verification start and dropped.
    pub prefetch_cancelled: u64,
    pub bytes_transferred: f64,
    /// Synchronous I/O the verification waited for.
    pub stall: f64,
}

impl CycleRecord {
    pub fn mean_coverage(&self) -> f64 {
        mean(&self.per_layer_coverage)
    }

    pub fn segment(&self, label: SegmentLabel) -> Option<&Segment> {
        self.segments.iter().find(|s| s.label == label)
    }

    fn duration_of(&self, label: SegmentLabel) -> f64 {
        self.segment(label).map_or(0.0, |s| s.duration)
    }

    /// `max(draft, io_init) + io_new + verify + rollback`, read back from the
    /// recorded segments.
    pub fn span_from_segments(&self) -> f64 {
        self.duration_of(SegmentLabel::Draft)
            .max(self.duration_of(SegmentLabel::IoInit))
            + self.duration_of(SegmentLabel::IoNew)
            + self.duration_of(SegmentLabel::Verify)
            + self.duration_of(SegmentLabel::Rollback)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: Policy,
    pub cache_capacity: usize,
    pub total_tokens: usize,
    pub total_time: f64,
    pub tpot: f64,
    /// Mean over every (cycle, layer) coverage fraction.
    pub mean_coverage: f64,
    pub mean_accepted: f64,
    /// Accepted plus bonus tokens per second.
    pub effective_tokens_per_s: f64,
    /// Accepted draft tokens per second, the governor's objective.
    pub accepted_tokens_per_s: f64,
    /// Time verification waited on synchronous transfers.
    pub stall_time: f64,
    /// Time drafting finished before the initial fetch latency elapsed.
    pub init_wait_time: f64,
    /// First cycle's span, used as modeled TTFT.
    pub ttft: f64,
    pub total_bytes: f64,
    /// Experts loaded before the first cycle; not counted as transfers.
    pub preloaded: u64,
    /// Insertions counted by the cache itself, preloads included.
    pub cache_insertions: u64,
    pub cycles: Vec<CycleRecord>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per cycle: `cycle,k,accepted,coverage,span_s,bytes`.
    pub fn cycles_csv(&self) -> String {
        let mut out = String::from("cycle,k,accepted,coverage,span_s,bytes\n");
        for c in &self.cycles {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.cycle_index,
                c.k_used,
                c.accepted_count,
                c.mean_coverage(),
                c.span,
                c.bytes_transferred
            );
        }
        out
    }

    /// One row per segment: `cycle,lane,label,start_s,duration_s`.
    pub fn timeline_csv(&self) -> String {
        let mut out = String::from("cycle,lane,label,start_s,duration_s\n");
        for c in &self.cycles {
            for s in &c.segments {
                let lane = match s.label.lane() {
                    Lane::Compute => "compute",
                    Lane::Io => "io",
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    c.cycle_index,
                    lane,
                    s.label.name(),
                    s.start,
                    s.duration
                );
            }
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn initial_cache(trace: &Trace, config: &SimConfig) -> Result<CacheState, SimError> {
    let shape = &trace.shape;
    let cache = match config.capacity_mode {
        CapacityMode::Global => CacheState::global(shape, config.cache_capacity),
        CapacityMode::PerLayer if config.entropy_weighting => {
            let entropies = (0..shape.num_moe_layers)
                .map(|l| layer_entropy(trace, l))
                .collect::<Result<Vec<_>, _>>()?;
            let caps = entropy_weighted_capacities(&entropies, config.cache_capacity, shape.top_k)
                .into_iter()
                .map(|c| c.min(shape.experts_per_layer))
                .collect();
            CacheState::with_layer_capacities(shape, caps)
        }
        CapacityMode::PerLayer => CacheState::per_layer(shape, config.cache_capacity),
    };
    Ok(cache)
}

/// Loads every expert when the cache can hold the whole model.
fn preload(cache: &mut CacheState, layers: usize, experts: usize) -> u64 {
    let fits = match cache.mode() {
        CapacityMode::PerLayer => (0..layers).all(|l| cache.layer_capacity(l) >= experts),
        CapacityMode::Global => cache.total_capacity() >= layers * experts,
    };
    if !fits {
        return 0;
    }
    let mut n = 0;
    for l in 0..layers as u32 {
        for e in 0..experts as u32 {
            if cache.insert(ExpertKey::new(l, e)) {
                n += 1;
            }
        }
    }
    n
}

/// Victim for admitting `key`, or `None` when nothing may be evicted.
fn choose_victim(
    policy: Policy,
    cache: &CacheState,
    key: ExpertKey,
    elb: &ExpertLookaheadBuffer,
    keep: &dyn Fn(ExpertKey) -> bool,
) -> Option<ExpertKey> {
    if policy.uses_lookahead_eviction() {
        let candidates: Vec<_> = cache
            .eviction_candidates(key)
            .filter(|c| !keep(*c))
            .collect();
        lookahead_victim(cache, elb, 0, candidates)
    } else {
        cache.lru_victim(key, keep)
    }
}

struct Channel {
    free_at: f64,
    bandwidth: f64,
    overhead: f64,
    expert_size: f64,
}

impl Channel {
    /// Queues one batch; returns per-entry completion times and the batch segment.
    fn submit(&mut self, at: f64, n: usize) -> (Vec<f64>, Segment) {
        let start = at.max(self.free_at);
        let per = self.expert_size / self.bandwidth;
        let ready = (0..n)
            .map(|j| start + self.overhead + (j + 1) as f64 * per)
            .collect();
        let duration = self.overhead + n as f64 * per;
        self.free_at = start + duration;
        (
            ready,
            Segment {
                label: SegmentLabel::Prefetch,
                start,
                duration,
            },
        )
    }
}

/// Prefetch and verification plans of one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePlans {
    pub cycle: usize,
    /// Planner output in issue order. Admission may still skip an entry when
    /// no victim is worth evicting for it.
    pub prefetch: PrefetchPlan,
    /// Expert-major order over the verified window.
    pub execution: ExecutionPlan,
}

/// Replays `trace` under `config`.
pub fn run_simulation(trace: &Trace, config: &SimConfig) -> Result<SimReport, SimError> {
    simulate(trace, config, None)
}

/// Like [`run_simulation`], also returning every cycle's plans.
pub fn run_simulation_with_plans(
    trace: &Trace,
    config: &SimConfig,
) -> Result<(SimReport, Vec<CyclePlans>), SimError> {
    let mut plans = Vec::new();
    let report = simulate(trace, config, Some(&mut plans))?;
    Ok((report, plans))
}

fn simulate(
    trace: &Trace,
    config: &SimConfig,
    mut plans: Option<&mut Vec<CyclePlans>>,
) -> Result<SimReport, SimError> {
    config.validate(trace)?;
    if trace.is_empty() {
        return Err(TraceError::EmptyTrace.into());
    }
    let shape = &trace.shape;
    let layers = shape.num_moe_layers;
    let profile = &config.profile;
    let mut cache = initial_cache(trace, config)?;
    let preloaded = preload(&mut cache, layers, shape.experts_per_layer);

    let mut model = AcceptanceModel::new(
        vec![config.initial_acceptance; config.max_k()],
        config.ema_alpha,
    )?;
    let budget = config
        .prefetch_budget
        .unwrap_or_else(|| profile.experts_per_draft_token().max(1));
    // New experts per verified token, from the previous cycle.
    let mut new_rate = (layers * shape.top_k) as f64;

    let mut cycles = Vec::new();
    let mut pos = 0;
    let mut now = 0.0;
    let mut total_time = 0.0;

    while pos < trace.len() {
        let remaining = trace.len() - pos;
        let k = match config.k_policy {
            KPolicy::Fixed(k) => k,
            KPolicy::Governor => select_k(profile, &model, &config.governor, |k| {
                (new_rate * (k + 1) as f64).round() as usize
            })?,
        };
        // Drafted positions pos+1..=pos+k_used must exist in the trace.
        let k_used = k.min(remaining - 1);
        let window_end = (pos + k_used + 1).min(trace.len());
        let t0 = now;
        let draft_time = t_draft(profile, k_used);
        let init = profile.pcie_init_latency;

        let mut segments = vec![
            Segment {
                label: SegmentLabel::Draft,
                start: t0,
                duration: draft_time,
            },
            Segment {
                label: SegmentLabel::IoInit,
                start: t0,
                duration: init,
            },
        ];
        let mut channel = Channel {
            free_at: t0 + init,
            bandwidth: profile.pcie_bandwidth,
            overhead: profile.pcie_overhead,
            expert_size: profile.expert_size,
        };
        let mut batches: Vec<Segment> = Vec::new();
        let mut in_flight: BTreeMap<ExpertKey, f64> = BTreeMap::new();

        let mut elb = ExpertLookaheadBuffer::new(k_used, layers);
        let mut planner = PrefetchPlanner::new(budget, config.phase_boundaries);
        let mut issued: Vec<PrefetchEntry> = Vec::new();

        // Admits a batch of keys at `at`, evicting per policy.
        let mut admit = |cache: &mut CacheState,
                         elb: &ExpertLookaheadBuffer,
                         keys: Vec<ExpertKey>,
                         at: f64,
                         in_flight: &mut BTreeMap<ExpertKey, f64>,
                         batches: &mut Vec<Segment>| {
            let mut admitted = Vec::new();
            for key in keys {
                if cache.is_present(key) {
                    if !config.policy.uses_lookahead_eviction() {
                        cache.touch(key);
                    }
                    continue;
                }
                if cache.is_full_for(key) {
                    let victim = choose_victim(config.policy, cache, key, elb, &|_| false);
                    let Some(victim) = victim else { continue };
                    if config.policy == Policy::Speculative {
                        let v_next = elb.next_use(victim, 0).unwrap_or(usize::MAX);
                        let k_next = elb.next_use(key, 0).unwrap_or(usize::MAX);
                        if v_next <= k_next {
                            continue;
                        }
                    }
                    cache.remove(victim);
                }
                if cache.reserve(key) {
                    admitted.push(key);
                }
            }
            if !admitted.is_empty() {
                let (ready, seg) = channel.submit(at, admitted.len());
                for (key, r) in admitted.into_iter().zip(ready) {
                    in_flight.insert(key, r);
                }
                batches.push(seg);
            }
        };

        for i in 0..k_used {
            elb.push_row(elb_row(&trace.tokens[pos + 1 + i]))?;
            let routed = t0 + (i + 1) as f64 * profile.draft_per_token;
            let at = match config.policy {
                Policy::SinglePrefetchSooner => t0 + i as f64 * profile.draft_per_token,
                _ => routed,
            };
            let keys: Vec<ExpertKey> = match config.policy {
                Policy::Speculative => {
                    let entries = planner.issue(i, &elb, |key| cache.is_present(key));
                    let keys = entries.iter().map(|e| e.key).collect();
                    issued.extend(entries);
                    keys
                }
                Policy::SinglePrefetchLater | Policy::SinglePrefetchSooner if i == 0 => {
                    let keys: Vec<ExpertKey> = elb.row_keys(0).map(|(k, _)| k).collect();
                    issued.extend(keys.iter().filter(|&&k| !cache.is_present(k)).map(|&key| {
                        PrefetchEntry {
                            issue_after: 0,
                            key,
                            phase: 3,
                        }
                    }));
                    keys
                }
                _ => Vec::new(),
            };
            if !keys.is_empty() {
                admit(&mut cache, &elb, keys, at, &mut in_flight, &mut batches);
            }
        }

        // Verification starts once drafting and the initial fetch are done.
        let verify_ready = t0 + draft_time.max(init);
        let mut fetched = 0u64;
        let mut completed = 0u64;
        let mut cancelled = 0u64;
        for (&key, &ready) in &in_flight {
            if ready <= verify_ready {
                cache.commit(key);
                completed += 1;
            } else {
                cache.cancel(key);
                cancelled += 1;
            }
        }
        fetched += completed;
        for seg in batches {
            if seg.start < verify_ready {
                segments.push(Segment {
                    duration: seg.duration.min(verify_ready - seg.start),
                    ..seg
                });
            }
        }

        // Ground-truth requirement of the verified window.
        let mut required: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); layers];
        for token in &trace.tokens[pos..window_end] {
            for (l, set) in token.target_sets.iter().enumerate() {
                required[l].extend(set.iter().copied());
            }
        }
        let mut coverage = Vec::with_capacity(layers);
        let mut missing = 0usize;
        for (l, set) in required.iter().enumerate() {
            let hits = set
                .iter()
                .filter(|&&e| cache.contains(ExpertKey::new(l as u32, e)))
                .count();
            missing += set.len() - hits;
            coverage.push(if set.is_empty() {
                1.0
            } else {
                hits as f64 / set.len() as f64
            });
        }
        let residual = t_pcie_new(profile, missing);
        if missing > 0 {
            segments.push(Segment {
                label: SegmentLabel::IoNew,
                start: verify_ready,
                duration: residual,
            });
        }

        // Layer by layer: run resident experts first, then stream the rest in.
        for (l, set) in required.iter().enumerate() {
            let keys: Vec<ExpertKey> = set.iter().map(|&e| ExpertKey::new(l as u32, e)).collect();
            let (resident, absent): (Vec<_>, Vec<_>) =
                keys.iter().partition(|k| cache.contains(**k));
            for key in &resident {
                cache.touch(*key);
            }
            let layer = l as u32;
            for &key in &absent {
                if cache.is_full_for(key) {
                    // Prefer experts this layer no longer needs.
                    let victim = choose_victim(config.policy, &cache, key, &elb, &|c| {
                        c.layer == layer && set.contains(&c.expert)
                    })
                    .or_else(|| cache.lru_victim(key, |_| false));
                    match victim {
                        Some(v) => {
                            cache.remove(v);
                        }
                        None => {
                            return Err(
                                SchedError::InvalidCapacity(format!("no room for {key}")).into()
                            )
                        }
                    }
                }
                cache.insert(key);
                fetched += 1;
            }
        }

        let verify_start = verify_ready + residual;
        let verify_time = t_verify(profile, window_end - pos)?;
        segments.push(Segment {
            label: SegmentLabel::Verify,
            start: verify_start,
            duration: verify_time,
        });

        // Longest accepted prefix of the drafted positions.
        let mut observed = Vec::new();
        for p in pos + 1..=pos + k_used {
            let ok = trace.tokens[p].draft_accepted;
            observed.push(ok);
            if !ok {
                break;
            }
        }
        let accepted = observed.iter().take_while(|&&ok| ok).count();
        let rejected = observed.last() == Some(&false);
        let rollback = if rejected && config.rollback_time > 0.0 {
            segments.push(Segment {
                label: SegmentLabel::Rollback,
                start: verify_start + verify_time,
                duration: config.rollback_time,
            });
            config.rollback_time
        } else {
            0.0
        };
        model = update_acceptance(&model, &observed);

        if let Some(plans) = plans.as_deref_mut() {
            let window: Vec<usize> = (pos..window_end).collect();
            let routing: Vec<Vec<Vec<u32>>> = trace.tokens[pos..window_end]
                .iter()
                .map(|t| t.target_sets.clone())
                .collect();
            plans.push(CyclePlans {
                cycle: cycles.len(),
                prefetch: PrefetchPlan {
                    entries: issued,
                    primed_hits: planner.primed_hits(),
                },
                execution: reorder_verification(&window, &routing)?,
            });
        }

        let span = draft_time.max(init) + residual + verify_time + rollback;
        let window = window_end - pos;
        new_rate = fetched as f64 / window as f64;
        cycles.push(CycleRecord {
            cycle_index: cycles.len(),
            position: pos,
            k_used,
            accepted_count: accepted,
            bonus_token: 1,
            start: t0,
            span,
            segments,
            per_layer_coverage: coverage,
            new_experts_fetched: fetched,
            prefetch_completed: completed,
            prefetch_cancelled: cancelled,
            bytes_transferred: fetched as f64 * profile.expert_size,
            stall: residual,
        });
        pos += accepted + 1;
        now = t0 + span;
        total_time += span;
    }

    let total_tokens = trace.len();
    let n_cycles = cycles.len() as f64;
    let all_cov: Vec<f64> = cycles
        .iter()
        .flat_map(|c| c.per_layer_coverage.iter().copied())
        .collect();
    let accepted_sum: usize = cycles.iter().map(|c| c.accepted_count).sum();
    let init_wait: f64 = cycles
        .iter()
        .map(|c| (config.profile.pcie_init_latency - t_draft(profile, c.k_used)).max(0.0))
        .sum();
    Ok(SimReport {
        policy: config.policy,
        cache_capacity: config.cache_capacity,
        total_tokens,
        total_time,
        tpot: total_time / total_tokens as f64,
        mean_coverage: mean(&all_cov),
        mean_accepted: accepted_sum as f64 / n_cycles,
        effective_tokens_per_s: total_tokens as f64 / total_time,
        accepted_tokens_per_s: accepted_sum as f64 / total_time,
        stall_time: cycles.iter().map(|c| c.stall).sum(),
        init_wait_time: init_wait,
        ttft: cycles[0].span,
        total_bytes: cycles.iter().map(|c| c.bytes_transferred).sum(),
        preloaded,
        cache_insertions: cache.insertions(),
        cycles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: Policy,
    pub capacity: usize,
    pub mean_coverage: f64,
    pub tpot: f64,
}

/// Runs every (policy, capacity) pair on the same trace. Rows follow the
/// order of `policies`, then `capacities`.
pub fn compare_policies(
    trace: &Trace,
    base: &SimConfig,
    policies: &[Policy],
    capacities: &[usize],
) -> Result<Vec<ComparisonRow>, SimError> {
    if policies.is_empty() || capacities.is_empty() {
        return Err(SimError::InvalidConfig(
            "policy and capacity lists must be non-empty".into(),
        ));
    }
    let jobs: Vec<(Policy, usize)> = policies
        .iter()
        .flat_map(|&p| capacities.iter().map(move |&c| (p, c)))
        .collect();
    let results: Vec<Result<ComparisonRow, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(policy, capacity)| {
                s.spawn(move || {
                    let mut cfg = base.clone();
                    cfg.policy = policy;
                    cfg.cache_capacity = capacity;
                    let r = run_simulation(trace, &cfg)?;
                    Ok(ComparisonRow {
                        policy,
                        capacity,
                        mean_coverage: r.mean_coverage,
                        tpot: r.tpot,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub tpot: f64,
    pub mean_accepted: f64,
    pub mean_coverage: f64,
    pub ttft: f64,
}

/// Fixed-k runs over `k_values`, in the given order.
pub fn sweep_k(
    trace: &Trace,
    config: &SimConfig,
    k_values: &[usize],
) -> Result<Vec<SweepRow>, SimError> {
    k_values
        .iter()
        .map(|&k| {
            if k == 0 {
                return Err(SimError::InvalidConfig("k must be >= 1".into()));
            }
            let mut cfg = config.clone();
            cfg.k_policy = KPolicy::Fixed(k);
            let r = run_simulation(trace, &cfg)?;
            Ok(SweepRow {
                k,
                tpot: r.tpot,
                mean_accepted: r.mean_accepted,
                mean_coverage: r.mean_coverage,
                ttft: r.ttft,
            })
        })
        .collect()
}
