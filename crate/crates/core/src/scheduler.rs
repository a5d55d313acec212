//! Expert scheduling: the expert lookahead buffer (ELB), the three-phase
//! prefetch planner, lookahead-aware eviction, baseline cache policies,
//! per-step coverage, and expert-contiguous verification ordering.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ExpertKey, ModelShape, TokenRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token range [{start}, {end}) exceeds filled prefix {filled}")]
    RangeOutOfBounds {
        start: usize,
        end: usize,
        filled: usize,
    },
    #[error("cache has no resident experts")]
    EmptyCache,
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("required expert set is empty")]
    EmptyRequired,
    #[error("incomplete routing: {0}")]
    IncompleteRouting(String),
    #[error("expert {0} is outside the model shape")]
    InvalidRequest(ExpertKey),
    #[error("invalid phase boundaries ({0}, {1}); need 0 <= f1 <= f2 <= 1")]
    InvalidBoundaries(f64, f64),
    #[error("invalid capacity: {0}")]
    InvalidCapacity(String),
}

// ---------------------------------------------------------------------------
// Expert lookahead buffer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbEntry {
    pub expert_id: u32,
    pub confidence: f64,
}

/// Predicted expert activations for a draft window: `k` rows (one per draft
/// token) of `L` cells, each holding the token's top-k predictions at that
/// layer. Rows are appended as drafting proceeds; `filled()` is the number
/// available so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertLookaheadBuffer {
    k: usize,
    num_layers: usize,
    rows: Vec<Vec<Vec<ElbEntry>>>,
}

impl ExpertLookaheadBuffer {
    pub fn new(k: usize, num_layers: usize) -> Self {
        Self {
            k,
            num_layers,
            rows: Vec::with_capacity(k),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn filled(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.k
    }

    pub fn push_row(&mut self, row: Vec<Vec<ElbEntry>>) -> Result<(), SchedError> {
        if self.rows.len() == self.k {
            return Err(SchedError::ShapeMismatch(format!(
                "ELB already holds {} rows",
                self.k
            )));
        }
        if row.len() != self.num_layers {
            return Err(SchedError::ShapeMismatch(format!(
                "row has {} layers, expected {}",
                row.len(),
                self.num_layers
            )));
        }
        for cell in &row {
            for (i, e) in cell.iter().enumerate() {
                if cell[..i].iter().any(|o| o.expert_id == e.expert_id) {
                    return Err(SchedError::ShapeMismatch(format!(
                        "duplicate expert {} in one cell",
                        e.expert_id
                    )));
                }
                if !(0.0..=1.0).contains(&e.confidence) {
                    return Err(SchedError::ShapeMismatch(format!(
                        "confidence {} outside [0, 1]",
                        e.confidence
                    )));
                }
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn cell(&self, token: usize, layer: usize) -> &[ElbEntry] {
        &self.rows[token][layer]
    }

    /// All `(key, confidence)` predictions of one draft token.
    pub fn row_keys(&self, token: usize) -> impl Iterator<Item = (ExpertKey, f64)> + '_ {
        self.rows[token]
            .iter()
            .enumerate()
            .flat_map(|(layer, cell)| {
                cell.iter()
                    .map(move |e| (ExpertKey::new(layer as u32, e.expert_id), e.confidence))
            })
    }

    pub fn contains_in_row(&self, token: usize, key: ExpertKey) -> bool {
        self.rows[token]
            .get(key.layer as usize)
            .is_some_and(|cell| cell.iter().any(|e| e.expert_id == key.expert))
    }

    /// First filled row at or after `from` predicting `key`.
    pub fn next_use(&self, key: ExpertKey, from: usize) -> Option<usize> {
        (from..self.rows.len()).find(|&i| self.contains_in_row(i, key))
    }
}

/// Converts one trace record's draft prediction into an ELB row. Confidence is
/// the gate weight renormalized over the cell, or 1.0 without recorded scores.
pub fn elb_row(record: &TokenRecord) -> Vec<Vec<ElbEntry>> {
    record
        .draft_sets
        .iter()
        .enumerate()
        .map(|(layer, set)| {
            let scores = record.draft_scores.as_ref().map(|s| &s[layer]);
            let sum: f64 = scores.map_or(0.0, |s| s.iter().sum());
            set.iter()
                .enumerate()
                .map(|(i, &expert_id)| ElbEntry {
                    expert_id,
                    confidence: match scores {
                        Some(s) if sum > 0.0 => (s[i] / sum).clamp(0.0, 1.0),
                        _ => 1.0,
                    },
                })
                .collect()
        })
        .collect()
}

/// Builds a complete ELB from the first `k` draft predictions.
pub fn build_elb(
    predictions: &[TokenRecord],
    k: usize,
    shape: &ModelShape,
) -> Result<ExpertLookaheadBuffer, SchedError> {
    if predictions.len() < k {
        return Err(SchedError::ShapeMismatch(format!(
            "need {k} draft predictions, got {}",
            predictions.len()
        )));
    }
    let mut elb = ExpertLookaheadBuffer::new(k, shape.num_moe_layers);
    for record in &predictions[..k] {
        if record
            .draft_sets
            .iter()
            .flatten()
            .any(|&e| e as usize >= shape.experts_per_layer)
        {
            return Err(SchedError::ShapeMismatch(format!(
                "prediction at position {} exceeds N={}",
                record.position, shape.experts_per_layer
            )));
        }
        elb.push_row(elb_row(record))?;
    }
    Ok(elb)
}

/// Union of predicted expert keys over draft tokens `range`.
pub fn predicted_union(
    elb: &ExpertLookaheadBuffer,
    range: std::ops::Range<usize>,
) -> Result<BTreeSet<ExpertKey>, SchedError> {
    if range.start > range.end || range.end > elb.filled() {
        return Err(SchedError::RangeOutOfBounds {
            start: range.start,
            end: range.end,
            filled: elb.filled(),
        });
    }
    Ok(range
        .flat_map(|i| elb.row_keys(i).map(|(k, _)| k))
        .collect())
}

// ---------------------------------------------------------------------------
// Cache state

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CapacityMode {
    /// Each layer owns an independent partition.
    #[default]
    PerLayer,
    /// One budget shared by every layer.
    Global,
}

/// Set of GPU-resident routed experts with LRU bookkeeping. Shared experts are
/// pinned outside this accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheState {
    mode: CapacityMode,
    experts_per_layer: usize,
    layer_caps: Vec<usize>,
    global_cap: usize,
    resident: BTreeMap<ExpertKey, Slot>,
    layer_counts: Vec<usize>,
    tick: u64,
    insertions: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    last_use: u64,
    /// Reserved for an in-flight transfer; not usable until committed.
    pending: bool,
}

impl CacheState {
    pub fn per_layer(shape: &ModelShape, capacity: usize) -> Self {
        Self::with_layer_capacities(shape, vec![capacity; shape.num_moe_layers])
    }

    pub fn global(shape: &ModelShape, capacity: usize) -> Self {
        Self {
            mode: CapacityMode::Global,
            experts_per_layer: shape.experts_per_layer,
            layer_caps: vec![capacity; shape.num_moe_layers],
            global_cap: capacity,
            resident: BTreeMap::new(),
            layer_counts: vec![0; shape.num_moe_layers],
            tick: 0,
            insertions: 0,
        }
    }

    /// Per-layer mode with an individual capacity for every layer.
    pub fn with_layer_capacities(shape: &ModelShape, caps: Vec<usize>) -> Self {
        assert_eq!(caps.len(), shape.num_moe_layers, "one capacity per layer");
        Self {
            mode: CapacityMode::PerLayer,
            experts_per_layer: shape.experts_per_layer,
            global_cap: caps.iter().sum(),
            layer_caps: caps,
            resident: BTreeMap::new(),
            layer_counts: vec![0; shape.num_moe_layers],
            tick: 0,
            insertions: 0,
        }
    }

    pub fn mode(&self) -> CapacityMode {
        self.mode
    }

    pub fn num_layers(&self) -> usize {
        self.layer_caps.len()
    }

    /// Occupied slots, in-flight reservations included.
    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    /// Whether `key` is resident and usable.
    pub fn contains(&self, key: ExpertKey) -> bool {
        self.resident.get(&key).is_some_and(|s| !s.pending)
    }

    /// Whether `key` is resident or has a slot reserved for it.
    pub fn is_present(&self, key: ExpertKey) -> bool {
        self.resident.contains_key(&key)
    }

    pub fn is_pending(&self, key: ExpertKey) -> bool {
        self.resident.get(&key).is_some_and(|s| s.pending)
    }

    /// Usable resident keys.
    pub fn resident(&self) -> impl Iterator<Item = ExpertKey> + '_ {
        self.resident
            .iter()
            .filter(|(_, s)| !s.pending)
            .map(|(k, _)| *k)
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layer_counts[layer]
    }

    pub fn layer_capacity(&self, layer: usize) -> usize {
        self.layer_caps[layer]
    }

    pub fn total_capacity(&self) -> usize {
        self.global_cap
    }

    /// Completed insertions since construction.
    pub fn insertions(&self) -> u64 {
        self.insertions
    }

    /// Whether `key` names an expert of this model.
    pub fn is_valid(&self, key: ExpertKey) -> bool {
        (key.layer as usize) < self.layer_caps.len()
            && (key.expert as usize) < self.experts_per_layer
    }

    /// True when admitting a non-present `key` would first require an eviction.
    pub fn is_full_for(&self, key: ExpertKey) -> bool {
        match self.mode {
            CapacityMode::PerLayer => {
                let l = key.layer as usize;
                self.layer_counts[l] >= self.layer_caps[l]
            }
            CapacityMode::Global => self.resident.len() >= self.global_cap,
        }
    }

    /// Usable residents that compete with `key` for space. In-flight slots
    /// cannot be evicted.
    pub fn eviction_candidates(&self, key: ExpertKey) -> impl Iterator<Item = ExpertKey> + '_ {
        let range = match self.mode {
            CapacityMode::PerLayer => {
                ExpertKey::new(key.layer, 0)..=ExpertKey::new(key.layer, u32::MAX)
            }
            CapacityMode::Global => ExpertKey::new(0, 0)..=ExpertKey::new(u32::MAX, u32::MAX),
        };
        self.resident
            .range(range)
            .filter(|(_, s)| !s.pending)
            .map(|(k, _)| *k)
    }

    pub fn last_use(&self, key: ExpertKey) -> Option<u64> {
        self.resident.get(&key).map(|s| s.last_use)
    }

    /// Marks `key` as most recently used.
    pub fn touch(&mut self, key: ExpertKey) {
        self.tick += 1;
        if let Some(s) = self.resident.get_mut(&key) {
            s.last_use = self.tick;
        }
    }

    /// Reserves a slot for an in-flight transfer of `key`. Returns false when
    /// the key is already present or its partition is full.
    pub fn reserve(&mut self, key: ExpertKey) -> bool {
        if self.is_present(key) || self.is_full_for(key) {
            return false;
        }
        self.tick += 1;
        self.resident.insert(
            key,
            Slot {
                last_use: self.tick,
                pending: true,
            },
        );
        self.layer_counts[key.layer as usize] += 1;
        true
    }

    /// Completes a reservation; the expert becomes usable.
    pub fn commit(&mut self, key: ExpertKey) -> bool {
        match self.resident.get_mut(&key) {
            Some(s) if s.pending => {
                s.pending = false;
                self.insertions += 1;
                true
            }
            _ => false,
        }
    }

    /// Drops an in-flight reservation.
    pub fn cancel(&mut self, key: ExpertKey) -> bool {
        if self.is_pending(key) {
            self.remove(key)
        } else {
            false
        }
    }

    /// Inserts a non-present key into free space. Returns false when the key
    /// was already present or its partition is full.
    pub fn insert(&mut self, key: ExpertKey) -> bool {
        self.reserve(key) && self.commit(key)
    }

    pub fn remove(&mut self, key: ExpertKey) -> bool {
        if self.resident.remove(&key).is_some() {
            self.layer_counts[key.layer as usize] -= 1;
            true
        } else {
            false
        }
    }

    /// Least recently used candidate for making room for `key`, skipping
    /// anything `keep` protects.
    pub fn lru_victim(
        &self,
        key: ExpertKey,
        keep: impl Fn(ExpertKey) -> bool,
    ) -> Option<ExpertKey> {
        self.eviction_candidates(key)
            .filter(|c| !keep(*c))
            .min_by_key(|c| (self.resident[c].last_use, *c))
    }

    pub fn within_capacity(&self) -> bool {
        match self.mode {
            CapacityMode::PerLayer => self
                .layer_counts
                .iter()
                .zip(&self.layer_caps)
                .all(|(n, c)| n <= c),
            CapacityMode::Global => self.resident.len() <= self.global_cap,
        }
    }
}

/// Splits a total per-layer budget across layers in proportion to their
/// activation entropy, never going below `min_cap` for any layer.
pub fn entropy_weighted_capacities(
    entropies: &[f64],
    per_layer: usize,
    min_cap: usize,
) -> Vec<usize> {
    let layers = entropies.len();
    let total = per_layer * layers;
    let spare = total.saturating_sub(min_cap * layers);
    let mass: f64 = entropies.iter().map(|h| h.max(0.0)).sum();
    let shares: Vec<f64> = entropies
        .iter()
        .map(|h| {
            if mass > 0.0 {
                spare as f64 * h.max(0.0) / mass
            } else {
                spare as f64 / layers as f64
            }
        })
        .collect();
    let mut caps: Vec<usize> = shares
        .iter()
        .map(|s| min_cap + s.floor() as usize)
        .collect();
    // Largest remainder keeps the total exact.
    let assigned: usize = caps.iter().sum::<usize>() - min_cap * layers;
    let mut order: Vec<usize> = (0..layers).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &l in order.iter().take(spare - assigned) {
        caps[l] += 1;
    }
    caps
}

// ---------------------------------------------------------------------------
// Eviction

/// Resident key whose next predicted use (scanning the ELB from `now`) is the
/// furthest away; keys with no predicted use go first. Ties prefer the least
/// recently used key, then the larger `(layer, expert)`.
pub fn select_victim_lookahead(
    cache: &CacheState,
    elb: &ExpertLookaheadBuffer,
    now: usize,
) -> Result<ExpertKey, SchedError> {
    lookahead_victim(cache, elb, now, cache.resident()).ok_or(SchedError::EmptyCache)
}

/// [`select_victim_lookahead`] restricted to `candidates`.
pub fn lookahead_victim(
    cache: &CacheState,
    elb: &ExpertLookaheadBuffer,
    now: usize,
    candidates: impl IntoIterator<Item = ExpertKey>,
) -> Option<ExpertKey> {
    candidates.into_iter().max_by_key(|&key| {
        let next = elb.next_use(key, now).unwrap_or(usize::MAX);
        let age = u64::MAX - cache.last_use(key).unwrap_or(0);
        (next, age, key)
    })
}

// ---------------------------------------------------------------------------
// Policies

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Lru,
    #[serde(rename = "lookahead", alias = "lookahead_aware")]
    LookaheadAware,
    SinglePrefetchSooner,
    SinglePrefetchLater,
    Speculative,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Lru,
        Policy::LookaheadAware,
        Policy::SinglePrefetchSooner,
        Policy::SinglePrefetchLater,
        Policy::Speculative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Lru => "lru",
            Policy::LookaheadAware => "lookahead",
            Policy::SinglePrefetchSooner => "single_prefetch_sooner",
            Policy::SinglePrefetchLater => "single_prefetch_later",
            Policy::Speculative => "speculative",
        }
    }

    /// Whether eviction consults the ELB.
    pub fn uses_lookahead_eviction(self) -> bool {
        matches!(self, Policy::LookaheadAware | Policy::Speculative)
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = SchedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "lru" => Ok(Policy::Lru),
            "lookahead" | "lookahead_aware" => Ok(Policy::LookaheadAware),
            "single_prefetch_sooner" | "sooner" => Ok(Policy::SinglePrefetchSooner),
            "single_prefetch_later" | "later" => Ok(Policy::SinglePrefetchLater),
            "speculative" | "spec" => Ok(Policy::Speculative),
            _ => Err(SchedError::UnknownPolicy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub hit: bool,
    pub evicted: Option<ExpertKey>,
}

/// Services one demand request. Lookahead policies pick victims from the ELB
/// context when given one and fall back to LRU otherwise; prefetching is
/// driven separately through [`plan_prefetch`] or [`PrefetchPlanner`].
pub fn policy_step(
    policy: Policy,
    cache: &mut CacheState,
    request: ExpertKey,
    context: Option<(&ExpertLookaheadBuffer, usize)>,
) -> Result<StepOutcome, SchedError> {
    if !cache.is_valid(request) {
        return Err(SchedError::InvalidRequest(request));
    }
    if cache.contains(request) {
        cache.touch(request);
        return Ok(StepOutcome {
            hit: true,
            evicted: None,
        });
    }
    let mut evicted = None;
    if cache.is_full_for(request) {
        let victim = match (policy.uses_lookahead_eviction(), context) {
            (true, Some((elb, now))) => {
                lookahead_victim(cache, elb, now, cache.eviction_candidates(request))
            }
            _ => cache.lru_victim(request, |_| false),
        };
        let Some(victim) = victim else {
            return Err(SchedError::InvalidCapacity(format!(
                "no room for {request}: partition capacity is zero"
            )));
        };
        cache.remove(victim);
        evicted = Some(victim);
    }
    cache.insert(request);
    Ok(StepOutcome {
        hit: false,
        evicted,
    })
}

// ---------------------------------------------------------------------------
// Prefetch planning

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseBoundaries {
    pub f1: f64,
    pub f2: f64,
}

impl Default for PhaseBoundaries {
    fn default() -> Self {
        Self { f1: 0.25, f2: 0.75 }
    }
}

impl PhaseBoundaries {
    pub fn new(f1: f64, f2: f64) -> Result<Self, SchedError> {
        if !(0.0 <= f1 && f1 <= f2 && f2 <= 1.0) {
            return Err(SchedError::InvalidBoundaries(f1, f2));
        }
        Ok(Self { f1, f2 })
    }

    /// Phase (1, 2 or 3) in effect after draft token `t` of a `k`-token window.
    /// The last token always runs phase 3, so the complete ELB is swept once.
    pub fn phase_at(&self, t: usize, k: usize) -> u8 {
        let last = k.saturating_sub(1);
        let b2 = ((self.f2 * k as f64).floor() as usize).min(last);
        let b1 = ((self.f1 * k as f64).floor() as usize).min(b2);
        if t < b1 {
            1
        } else if t < b2 {
            2
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefetchEntry {
    /// Draft-token index after which the transfer is issued.
    pub issue_after: usize,
    pub key: ExpertKey,
    pub phase: u8,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrefetchPlan {
    pub entries: Vec<PrefetchEntry>,
    /// Distinct predicted experts found resident during phase 1.
    pub primed_hits: usize,
}

/// Incremental form of the three-phase planner, fed one draft token at a time.
#[derive(Debug, Clone)]
pub struct PrefetchPlanner {
    budget: usize,
    bounds: PhaseBoundaries,
    scheduled: BTreeSet<ExpertKey>,
    primed: BTreeSet<ExpertKey>,
}

impl PrefetchPlanner {
    pub fn new(budget: usize, bounds: PhaseBoundaries) -> Self {
        Self {
            budget,
            bounds,
            scheduled: BTreeSet::new(),
            primed: BTreeSet::new(),
        }
    }

    pub fn primed_hits(&self) -> usize {
        self.primed.len()
    }

    /// Entries to issue after draft token `t`, with rows `0..=t` visible.
    /// `present` reports keys already resident or in flight.
    pub fn issue(
        &mut self,
        t: usize,
        elb: &ExpertLookaheadBuffer,
        present: impl Fn(ExpertKey) -> bool,
    ) -> Vec<PrefetchEntry> {
        let k = elb.k();
        let phase = self.bounds.phase_at(t, k);
        let visible = (t + 1).min(elb.filled());

        // First visible use and its confidence for every predicted key.
        let mut first: BTreeMap<ExpertKey, (usize, f64)> = BTreeMap::new();
        for i in 0..visible {
            for (key, conf) in elb.row_keys(i) {
                first.entry(key).or_insert((i, conf));
            }
        }

        if phase == 1 {
            self.primed
                .extend(first.keys().copied().filter(|&key| present(key)));
            return Vec::new();
        }

        let mut candidates: Vec<(f64, ExpertKey)> = first
            .iter()
            .filter(|(key, _)| !self.scheduled.contains(key) && !present(**key))
            .map(|(&key, &(i, conf))| (conf * (k - i) as f64 / k as f64, key))
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if phase == 2 {
            candidates.truncate(self.budget);
        }
        candidates
            .into_iter()
            .map(|(_, key)| {
                self.scheduled.insert(key);
                PrefetchEntry {
                    issue_after: t,
                    key,
                    phase,
                }
            })
            .collect()
    }
}

/// Plans prefetches for the filled part of `elb` against the current cache.
///
/// Phase 1 issues nothing and records cache hits among predicted experts.
/// Phase 2 issues at most `budget` transfers per draft token, highest
/// `confidence * (k - first_use) / k` first. Phase 3 issues every remaining
/// non-resident predicted expert. Residency is evaluated at plan time; an
/// over-capacity plan is resolved by eviction when applied.
pub fn plan_prefetch(
    elb: &ExpertLookaheadBuffer,
    cache: &CacheState,
    budget: usize,
    bounds: PhaseBoundaries,
) -> PrefetchPlan {
    let mut planner = PrefetchPlanner::new(budget, bounds);
    let mut entries = Vec::new();
    for t in 0..elb.filled() {
        entries.extend(planner.issue(t, elb, |key| cache.contains(key)));
    }
    PrefetchPlan {
        entries,
        primed_hits: planner.primed_hits(),
    }
}

// ---------------------------------------------------------------------------
// Coverage and verification order

/// Fraction of `required` already resident.
pub fn step_coverage(
    cache: &CacheState,
    required: &BTreeSet<ExpertKey>,
) -> Result<f64, SchedError> {
    if required.is_empty() {
        return Err(SchedError::EmptyRequired);
    }
    let hits = required.iter().filter(|k| cache.contains(**k)).count();
    Ok(hits as f64 / required.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertGroup {
    pub expert_id: u32,
    pub tokens: Vec<usize>,
}

/// Expert-major execution order for one verification pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub layers: Vec<Vec<ExpertGroup>>,
}

/// Groups the verified tokens by expert at every layer so each expert's tokens
/// run contiguously. Groups are ordered by expert id; tokens keep window order.
///
/// `routing[i][l]` holds the experts of `window[i]` at layer `l`.
pub fn reorder_verification(
    window: &[usize],
    routing: &[Vec<Vec<u32>>],
) -> Result<ExecutionPlan, SchedError> {
    if routing.len() != window.len() {
        return Err(SchedError::IncompleteRouting(format!(
            "{} tokens in window but routing for {}",
            window.len(),
            routing.len()
        )));
    }
    let num_layers = routing.first().map_or(0, Vec::len);
    if let Some(i) = routing.iter().position(|r| r.len() != num_layers) {
        return Err(SchedError::IncompleteRouting(format!(
            "token {} routes {} layers, expected {num_layers}",
            window[i],
            routing[i].len()
        )));
    }
    let layers = (0..num_layers)
        .map(|layer| {
            let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (&pos, route) in window.iter().zip(routing) {
                for &e in &route[layer] {
                    groups.entry(e).or_default().push(pos);
                }
            }
            groups
                .into_iter()
                .map(|(expert_id, tokens)| ExpertGroup { expert_id, tokens })
                .collect()
        })
        .collect();
    Ok(ExecutionPlan { layers })
}
