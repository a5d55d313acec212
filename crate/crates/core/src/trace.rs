//! Activation traces: the canonical data model for per-token expert routing,
//! JSONL reading and writing, calibrated synthetic generation, and the
//! activation statistics (per-layer entropy, draft/target fidelity).
//!
//! A trace file is line oriented. The first line is a header carrying the
//! [`ModelShape`] and free-form metadata; every following line is one
//! [`TokenRecord`]:
//!
//! ```text
//! {"shape":{"L":2,"N":4,"top_k":2,"shared":0,"expert_bytes":1000},"meta":{}}
//! {"pos":0,"target":[[0,[1,2]],[1,[0,3]]],"draft":[[0,[2,1]],[1,[0,3]]],"acc":true}
//! ```
//!
//! Draft records may carry an optional `"scores"` array shaped like `"draft"`
//! holding non-negative gate weights for each predicted expert.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identity of one offloadable expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertKey {
    pub layer: u32,
    pub expert: u32,
}

impl ExpertKey {
    pub fn new(layer: u32, expert: u32) -> Self {
        Self { layer, expert }
    }
}

impl std::fmt::Display for ExpertKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}E{}", self.layer, self.expert)
    }
}

/// Static architecture parameters of the target MoE model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    #[serde(rename = "L")]
    pub num_moe_layers: usize,
    #[serde(rename = "N")]
    pub experts_per_layer: usize,
    pub top_k: usize,
    #[serde(rename = "shared", default)]
    pub shared_experts: usize,
    #[serde(rename = "expert_bytes")]
    pub expert_size_bytes: u64,
}

impl ModelShape {
    pub fn new(
        num_moe_layers: usize,
        experts_per_layer: usize,
        top_k: usize,
        shared_experts: usize,
        expert_size_bytes: u64,
    ) -> Result<Self, TraceError> {
        let shape = Self {
            num_moe_layers,
            experts_per_layer,
            top_k,
            shared_experts,
            expert_size_bytes,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.num_moe_layers == 0 {
            return Err(TraceError::InvalidShape("L must be at least 1".into()));
        }
        if self.experts_per_layer == 0 {
            return Err(TraceError::InvalidShape("N must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.experts_per_layer {
            return Err(TraceError::InvalidShape(format!(
                "top_k must be in [1, N={}], got {}",
                self.experts_per_layer, self.top_k
            )));
        }
        if self.expert_size_bytes == 0 {
            return Err(TraceError::InvalidShape(
                "expert_bytes must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Total number of routed (offloadable) experts across all layers.
    pub fn total_experts(&self) -> usize {
        self.num_moe_layers * self.experts_per_layer
    }
}

/// Routing record for one generated token.
///
/// `target_sets[l]` and `draft_sets[l]` hold the ordered top-k selections at
/// layer `l`, most important first.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub position: usize,
    pub target_sets: Vec<Vec<u32>>,
    pub draft_sets: Vec<Vec<u32>>,
    /// Gate weights aligned with `draft_sets`, when the capture recorded them.
    pub draft_scores: Option<Vec<Vec<f64>>>,
    pub draft_accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub shape: ModelShape,
    pub tokens: Vec<TokenRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl Trace {
    /// Builds a trace, validating every token against `shape`.
    pub fn new(
        shape: ModelShape,
        tokens: Vec<TokenRecord>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self, TraceError> {
        shape.validate()?;
        for (i, tok) in tokens.iter().enumerate() {
            validate_token(&shape, tok, i, i + 2)?;
        }
        Ok(Self {
            shape,
            tokens,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: shape violation in `{field}`: {message}")]
    ShapeViolation {
        line: usize,
        field: String,
        message: String,
    },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("invalid model shape: {0}")]
    InvalidShape(String),
    #[error("invalid fidelity: {0}")]
    InvalidFidelity(String),
    #[error("degenerate shape: {0}")]
    DegenerateShape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("i/o error: {0}")]
    Io(String),
}

fn shape_violation(line: usize, field: &str, message: impl Into<String>) -> TraceError {
    TraceError::ShapeViolation {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn validate_sets(
    shape: &ModelShape,
    sets: &[Vec<u32>],
    field: &str,
    line: usize,
) -> Result<(), TraceError> {
    if sets.len() != shape.num_moe_layers {
        return Err(shape_violation(
            line,
            field,
            format!(
                "expected {} layers, got {}",
                shape.num_moe_layers,
                sets.len()
            ),
        ));
    }
    for (layer, set) in sets.iter().enumerate() {
        if set.len() != shape.top_k {
            return Err(shape_violation(
                line,
                field,
                format!(
                    "layer {layer}: expected {} experts, got {}",
                    shape.top_k,
                    set.len()
                ),
            ));
        }
        for (i, &e) in set.iter().enumerate() {
            if e as usize >= shape.experts_per_layer {
                return Err(shape_violation(
                    line,
                    field,
                    format!(
                        "layer {layer}: expert {e} out of range for N={}",
                        shape.experts_per_layer
                    ),
                ));
            }
            if set[..i].contains(&e) {
                return Err(shape_violation(
                    line,
                    field,
                    format!("layer {layer}: duplicate expert {e}"),
                ));
            }
        }
    }
    Ok(())
}

fn validate_token(
    shape: &ModelShape,
    tok: &TokenRecord,
    expected_pos: usize,
    line: usize,
) -> Result<(), TraceError> {
    if tok.position != expected_pos {
        return Err(shape_violation(
            line,
            "pos",
            format!("expected position {expected_pos}, got {}", tok.position),
        ));
    }
    validate_sets(shape, &tok.target_sets, "target", line)?;
    validate_sets(shape, &tok.draft_sets, "draft", line)?;
    if let Some(scores) = &tok.draft_scores {
        if scores.len() != tok.draft_sets.len()
            || scores
                .iter()
                .zip(&tok.draft_sets)
                .any(|(s, d)| s.len() != d.len())
        {
            return Err(shape_violation(
                line,
                "scores",
                "must mirror the draft sets",
            ));
        }
        if scores.iter().flatten().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(shape_violation(
                line,
                "scores",
                "gate weights must be finite and >= 0",
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// JSONL wire format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    shape: ModelShape,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

type LayerSets<T> = Vec<(u32, Vec<T>)>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenLine {
    pos: usize,
    target: LayerSets<u32>,
    draft: LayerSets<u32>,
    acc: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<LayerSets<f64>>,
}

fn index_layers<T>(
    shape: &ModelShape,
    sets: LayerSets<T>,
    field: &str,
    line: usize,
) -> Result<Vec<Vec<T>>, TraceError> {
    let mut by_layer: Vec<Option<Vec<T>>> = (0..shape.num_moe_layers).map(|_| None).collect();
    for (layer, set) in sets {
        let slot = by_layer.get_mut(layer as usize).ok_or_else(|| {
            shape_violation(
                line,
                field,
                format!("layer {layer} out of range for L={}", shape.num_moe_layers),
            )
        })?;
        if slot.is_some() {
            return Err(shape_violation(
                line,
                field,
                format!("layer {layer} listed twice"),
            ));
        }
        *slot = Some(set);
    }
    by_layer
        .into_iter()
        .enumerate()
        .map(|(l, s)| s.ok_or_else(|| shape_violation(line, field, format!("layer {l} missing"))))
        .collect()
}

fn with_layers<T: Clone>(sets: &[Vec<T>]) -> LayerSets<T> {
    sets.iter()
        .enumerate()
        .map(|(l, s)| (l as u32, s.clone()))
        .collect()
}

/// Reads a JSONL trace, rejecting the first malformed or out-of-shape line.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<Trace, TraceError> {
    let mut lines = reader.lines().enumerate();
    let (shape, metadata) = loop {
        let Some((idx, line)) = lines.next() else {
            return Err(TraceError::EmptyTrace);
        };
        let line = line.map_err(|e| TraceError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let header: HeaderLine =
            serde_json::from_str(&line).map_err(|e| TraceError::MalformedRecord {
                line: idx + 1,
                message: e.to_string(),
            })?;
        header
            .shape
            .validate()
            .map_err(|e| shape_violation(idx + 1, "shape", e.to_string()))?;
        break (header.shape, header.meta);
    };

    let mut tokens = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| TraceError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: TokenLine =
            serde_json::from_str(&line).map_err(|e| TraceError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        let record = TokenRecord {
            position: raw.pos,
            target_sets: index_layers(&shape, raw.target, "target", line_no)?,
            draft_sets: index_layers(&shape, raw.draft, "draft", line_no)?,
            draft_scores: raw
                .scores
                .map(|s| index_layers(&shape, s, "scores", line_no))
                .transpose()?,
            draft_accepted: raw.acc,
        };
        validate_token(&shape, &record, tokens.len(), line_no)?;
        tokens.push(record);
    }
    Ok(Trace {
        shape,
        tokens,
        metadata,
    })
}

/// Serializes a trace as JSONL. Output is deterministic: layers are written in
/// ascending order and metadata keys are sorted.
pub fn write_trace<W: Write>(trace: &Trace, mut writer: W) -> io::Result<()> {
    let header = HeaderLine {
        shape: trace.shape,
        meta: trace.metadata.clone(),
    };
    serde_json::to_writer(&mut writer, &header)?;
    writer.write_all(b"\n")?;
    for tok in &trace.tokens {
        let line = TokenLine {
            pos: tok.position,
            target: with_layers(&tok.target_sets),
            draft: with_layers(&tok.draft_sets),
            acc: tok.draft_accepted,
            scores: tok.draft_scores.as_deref().map(with_layers),
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trace_to_bytes(trace: &Trace) -> Vec<u8> {
    let mut out = Vec::new();
    write_trace(trace, &mut out).expect("writing to a Vec cannot fail");
    out
}

// ---------------------------------------------------------------------------
// Fidelity

/// Breakdown of draft-vs-target expert selection agreement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityStats {
    pub hard_rate: f64,
    pub soft_rate: f64,
    pub mismatch_rate: f64,
}

impl FidelityStats {
    pub fn new(hard_rate: f64, soft_rate: f64, mismatch_rate: f64) -> Result<Self, TraceError> {
        let stats = Self {
            hard_rate,
            soft_rate,
            mismatch_rate,
        };
        for (name, v) in [
            ("hard", hard_rate),
            ("soft", soft_rate),
            ("mismatch", mismatch_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TraceError::InvalidFidelity(format!(
                    "{name} rate {v} outside [0, 1]"
                )));
            }
        }
        if (stats.total() - 1.0).abs() > 1e-9 {
            return Err(TraceError::InvalidFidelity(format!(
                "rates sum to {}, expected 1",
                stats.total()
            )));
        }
        Ok(stats)
    }

    pub fn total(&self) -> f64 {
        (self.hard_rate + self.soft_rate) + self.mismatch_rate
    }

    fn from_counts(hard: usize, soft: usize, total: usize) -> Self {
        let hard_rate = hard as f64 / total as f64;
        let soft_rate = soft as f64 / total as f64;
        // Derived as the complement so the three rates sum to exactly 1.
        let mismatch_rate = 1.0 - (hard_rate + soft_rate);
        Self {
            hard_rate,
            soft_rate,
            mismatch_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    Hard,
    Soft,
    Mismatch,
}

/// Compares one draft selection with the target's.
pub fn classify_match(draft: &[u32], target: &[u32]) -> MatchKind {
    if draft == target {
        MatchKind::Hard
    } else if draft.len() == target.len() && draft.iter().all(|e| target.contains(e)) {
        MatchKind::Soft
    } else {
        MatchKind::Mismatch
    }
}

/// Unit over which fidelity outcomes are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FidelityGranularity {
    /// Every (token, layer) pair is one outcome.
    #[default]
    TokenLayer,
    /// One outcome per token: hard if every layer is hard, mismatch if any
    /// layer mismatches, soft otherwise.
    Token,
}

pub fn classify_fidelity(trace: &Trace) -> Result<FidelityStats, TraceError> {
    classify_fidelity_with(trace, FidelityGranularity::TokenLayer)
}

pub fn classify_fidelity_with(
    trace: &Trace,
    granularity: FidelityGranularity,
) -> Result<FidelityStats, TraceError> {
    if trace.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    let (mut hard, mut soft, mut total) = (0usize, 0usize, 0usize);
    for tok in &trace.tokens {
        let kinds = tok
            .draft_sets
            .iter()
            .zip(&tok.target_sets)
            .map(|(d, t)| classify_match(d, t));
        match granularity {
            FidelityGranularity::TokenLayer => {
                for kind in kinds {
                    total += 1;
                    match kind {
                        MatchKind::Hard => hard += 1,
                        MatchKind::Soft => soft += 1,
                        MatchKind::Mismatch => {}
                    }
                }
            }
            FidelityGranularity::Token => {
                total += 1;
                let kinds: Vec<_> = kinds.collect();
                if kinds.iter().all(|k| *k == MatchKind::Hard) {
                    hard += 1;
                } else if !kinds.contains(&MatchKind::Mismatch) {
                    soft += 1;
                }
            }
        }
    }
    Ok(FidelityStats::from_counts(hard, soft, total))
}

// ---------------------------------------------------------------------------
// Entropy

/// Activation counts per expert at `layer`, counting every top-k selection of
/// the target model.
pub fn layer_histogram(trace: &Trace, layer: usize) -> Result<Vec<u64>, TraceError> {
    if layer >= trace.shape.num_moe_layers {
        return Err(TraceError::LayerOutOfRange {
            layer,
            layers: trace.shape.num_moe_layers,
        });
    }
    let mut counts = vec![0u64; trace.shape.experts_per_layer];
    for tok in &trace.tokens {
        for &e in &tok.target_sets[layer] {
            counts[e as usize] += 1;
        }
    }
    Ok(counts)
}

/// Shannon entropy in bits of the target activation distribution at `layer`.
pub fn layer_entropy(trace: &Trace, layer: usize) -> Result<f64, TraceError> {
    let counts = layer_histogram(trace, layer)?;
    if trace.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    Ok(entropy_bits(&counts))
}

pub(crate) fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// Inputs to [`generate_synthetic_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub shape: ModelShape,
    pub num_tokens: usize,
    pub fidelity: FidelityStats,
    pub accept_rate: f64,
    /// Power-law exponent over per-layer expert popularity ranks; 0 is uniform.
    pub skew: f64,
    pub seed: u64,
}

/// Synthesizes a trace whose draft/target agreement follows `fidelity`.
///
/// Target selections at each layer are drawn without replacement from a
/// categorical distribution with weight `(rank + 1)^-skew`, where the rank of
/// each expert is a seeded per-layer permutation. Draft selections are derived
/// from the target per (token, layer): an exact copy (hard), a non-identity
/// reordering (soft), or the target with exactly one expert replaced
/// (mismatch).
pub fn generate_synthetic_trace(params: &GeneratorParams) -> Result<Trace, TraceError> {
    let shape = params.shape;
    shape.validate()?;
    let fid = FidelityStats::new(
        params.fidelity.hard_rate,
        params.fidelity.soft_rate,
        params.fidelity.mismatch_rate,
    )?;
    if !(0.0..=1.0).contains(&params.accept_rate) {
        return Err(TraceError::InvalidParameter(format!(
            "accept_rate {} outside [0, 1]",
            params.accept_rate
        )));
    }
    if !(params.skew.is_finite() && params.skew >= 0.0) {
        return Err(TraceError::InvalidParameter(format!(
            "skew {} must be finite and >= 0",
            params.skew
        )));
    }
    if fid.soft_rate > 0.0 && shape.top_k < 2 {
        return Err(TraceError::DegenerateShape(
            "soft matches need top_k >= 2 to reorder".into(),
        ));
    }
    if fid.mismatch_rate > 0.0 && shape.top_k == shape.experts_per_layer {
        return Err(TraceError::DegenerateShape(
            "top_k equals N so no expert can be mispredicted".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = shape.experts_per_layer;
    let weights: Vec<f64> = (0..n)
        .map(|r| ((r + 1) as f64).powf(-params.skew))
        .collect();
    // Each layer gets its own popularity ordering of expert ids.
    let layer_ranks: Vec<Vec<u32>> = (0..shape.num_moe_layers)
        .map(|_| {
            let mut ids: Vec<u32> = (0..n as u32).collect();
            ids.shuffle(&mut rng);
            ids
        })
        .collect();
    let sampler = WeightedIndex::new(&weights).expect("power-law weights are positive");

    let mut tokens = Vec::with_capacity(params.num_tokens);
    for position in 0..params.num_tokens {
        let mut target_sets = Vec::with_capacity(shape.num_moe_layers);
        let mut draft_sets = Vec::with_capacity(shape.num_moe_layers);
        for ranks in &layer_ranks {
            let target = sample_top_k(&mut rng, &sampler, &weights, ranks, shape.top_k);
            let u: f64 = rng.gen();
            let draft = if u < fid.hard_rate {
                target.clone()
            } else if u < fid.hard_rate + fid.soft_rate {
                let mut d = target.clone();
                while d == target {
                    d.shuffle(&mut rng);
                }
                d
            } else {
                let mut d = target.clone();
                let slot = rng.gen_range(0..d.len());
                let free: Vec<u32> = (0..n as u32).filter(|e| !target.contains(e)).collect();
                d[slot] = *free.choose(&mut rng).expect("N > top_k checked above");
                d
            };
            target_sets.push(target);
            draft_sets.push(draft);
        }
        tokens.push(TokenRecord {
            position,
            target_sets,
            draft_sets,
            draft_scores: None,
            draft_accepted: rng.gen_bool(params.accept_rate),
        });
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("source".into(), "synthetic".into());
    metadata.insert("seed".into(), params.seed.to_string());
    metadata.insert("skew".into(), params.skew.to_string());
    metadata.insert("accept_rate".into(), params.accept_rate.to_string());
    metadata.insert(
        "fidelity".into(),
        format!("{},{},{}", fid.hard_rate, fid.soft_rate, fid.mismatch_rate),
    );
    Ok(Trace {
        shape,
        tokens,
        metadata,
    })
}

/// Weighted sampling of `k` distinct ranks, mapped to expert ids via `ranks`.
fn sample_top_k(
    rng: &mut ChaCha8Rng,
    sampler: &WeightedIndex<f64>,
    weights: &[f64],
    ranks: &[u32],
    k: usize,
) -> Vec<u32> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut attempts = 0usize;
    while chosen.len() < k {
        // Rejection sampling is cheap unless the remaining mass is tiny; fall
        // back to an exact draw over the unchosen ranks in that case.
        let r = if attempts < 32 * k {
            attempts += 1;
            let r = sampler.sample(rng);
            if chosen.contains(&r) {
                continue;
            }
            r
        } else {
            let rest: Vec<usize> = (0..weights.len()).filter(|r| !chosen.contains(r)).collect();
            let w: Vec<f64> = rest.iter().map(|&r| weights[r]).collect();
            rest[WeightedIndex::new(&w)
                .expect("positive weights")
                .sample(rng)]
        };
        chosen.push(r);
    }
    chosen.into_iter().map(|r| ranks[r]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(l: usize, n: usize, k: usize) -> ModelShape {
        ModelShape::new(l, n, k, 0, 1_000).unwrap()
    }

    fn token(pos: usize, target: Vec<Vec<u32>>, draft: Vec<Vec<u32>>) -> TokenRecord {
        TokenRecord {
            position: pos,
            target_sets: target,
            draft_sets: draft,
            draft_scores: None,
            draft_accepted: true,
        }
    }

    const HEADER: &str =
        r#"{"shape":{"L":2,"N":4,"top_k":2,"shared":0,"expert_bytes":1000},"meta":{}}"#;

    #[test]
    fn parses_minimal_trace() {
        let text = format!(
            "{HEADER}\n{}\n",
            r#"{"pos":0,"target":[[0,[1,2]],[1,[0,3]]],"draft":[[0,[2,1]],[1,[0,3]]],"acc":true}"#
        );
        let trace = parse_trace(text.as_bytes()).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace.tokens[0].target_sets, vec![vec![1, 2], vec![0, 3]]);
        assert_eq!(trace.tokens[0].draft_sets[0], vec![2, 1]);
    }

    #[test]
    fn rejects_expert_out_of_range() {
        let text = format!(
            "{HEADER}\n{}\n",
            r#"{"pos":0,"target":[[0,[1,4]],[1,[0,3]]],"draft":[[0,[2,1]],[1,[0,3]]],"acc":true}"#
        );
        match parse_trace(text.as_bytes()) {
            Err(TraceError::ShapeViolation { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "target");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reports_malformed_line_number() {
        let good =
            r#"{"pos":0,"target":[[0,[1,2]],[1,[0,3]]],"draft":[[0,[2,1]],[1,[0,3]]],"acc":true}"#;
        let text = format!("{HEADER}\n{good}\n{{\"pos\":1,\"target\":\n");
        assert!(matches!(
            parse_trace(text.as_bytes()),
            Err(TraceError::MalformedRecord { line: 3, .. })
        ));
    }

    #[test]
    fn rejects_unknown_fields_and_gaps() {
        let extra = r#"{"pos":0,"target":[[0,[1,2]],[1,[0,3]]],"draft":[[0,[2,1]],[1,[0,3]]],"acc":true,"x":1}"#;
        let text = format!("{HEADER}\n{extra}\n");
        assert!(matches!(
            parse_trace(text.as_bytes()),
            Err(TraceError::MalformedRecord { line: 2, .. })
        ));

        let skipped =
            r#"{"pos":1,"target":[[0,[1,2]],[1,[0,3]]],"draft":[[0,[2,1]],[1,[0,3]]],"acc":true}"#;
        let text = format!("{HEADER}\n{skipped}\n");
        assert!(matches!(
            parse_trace(text.as_bytes()),
            Err(TraceError::ShapeViolation { field, .. }) if field == "pos"
        ));

        let missing_layer =
            r#"{"pos":0,"target":[[0,[1,2]]],"draft":[[0,[2,1]],[1,[0,3]]],"acc":true}"#;
        let text = format!("{HEADER}\n{missing_layer}\n");
        assert!(matches!(
            parse_trace(text.as_bytes()),
            Err(TraceError::ShapeViolation { field, .. }) if field == "target"
        ));
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert_eq!(parse_trace("".as_bytes()), Err(TraceError::EmptyTrace));
        assert_eq!(parse_trace("\n\n".as_bytes()), Err(TraceError::EmptyTrace));
    }

    #[test]
    fn header_only_round_trip() {
        let trace = Trace::new(shape(2, 4, 2), vec![], BTreeMap::new()).unwrap();
        let bytes = trace_to_bytes(&trace);
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
        assert_eq!(parse_trace(bytes.as_slice()).unwrap(), trace);
    }

    #[test]
    fn scores_survive_round_trip() {
        let mut tok = token(0, vec![vec![1, 2]], vec![vec![2, 1]]);
        tok.draft_scores = Some(vec![vec![0.625, 0.1]]);
        let trace = Trace::new(shape(1, 4, 2), vec![tok], BTreeMap::new()).unwrap();
        let bytes = trace_to_bytes(&trace);
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 2);
        assert_eq!(parse_trace(bytes.as_slice()).unwrap(), trace);
    }

    #[test]
    fn classifies_examples() {
        let t = [3, 7, 12, 20];
        assert_eq!(classify_match(&[3, 7, 12, 20], &t), MatchKind::Hard);
        assert_eq!(classify_match(&[7, 3, 12, 20], &t), MatchKind::Soft);
        assert_eq!(classify_match(&[3, 7, 12, 21], &t), MatchKind::Mismatch);
    }

    #[test]
    fn token_granularity_differs_from_pairs() {
        let s = shape(2, 8, 2);
        let tokens = vec![
            token(
                0,
                vec![vec![0, 1], vec![2, 3]],
                vec![vec![0, 1], vec![3, 2]],
            ),
            token(
                1,
                vec![vec![0, 1], vec![2, 3]],
                vec![vec![0, 1], vec![2, 3]],
            ),
        ];
        let trace = Trace::new(s, tokens, BTreeMap::new()).unwrap();
        let pairs = classify_fidelity(&trace).unwrap();
        assert_eq!((pairs.hard_rate, pairs.soft_rate), (0.75, 0.25));
        let per_token = classify_fidelity_with(&trace, FidelityGranularity::Token).unwrap();
        assert_eq!((per_token.hard_rate, per_token.soft_rate), (0.5, 0.5));
        assert_eq!(per_token.mismatch_rate, 0.0);
    }

    #[test]
    fn entropy_of_single_expert_is_zero() {
        let s = shape(1, 4, 1);
        let tokens = (0..5)
            .map(|p| token(p, vec![vec![0]], vec![vec![0]]))
            .collect();
        let trace = Trace::new(s, tokens, BTreeMap::new()).unwrap();
        assert_eq!(layer_entropy(&trace, 0).unwrap(), 0.0);
        assert!(matches!(
            layer_entropy(&trace, 1),
            Err(TraceError::LayerOutOfRange {
                layer: 1,
                layers: 1
            })
        ));
    }

    #[test]
    fn generator_rejects_bad_inputs() {
        let base = GeneratorParams {
            shape: shape(2, 4, 2),
            num_tokens: 4,
            fidelity: FidelityStats {
                hard_rate: 0.5,
                soft_rate: 0.5,
                mismatch_rate: 0.5,
            },
            accept_rate: 0.5,
            skew: 0.0,
            seed: 1,
        };
        assert!(matches!(
            generate_synthetic_trace(&base),
            Err(TraceError::InvalidFidelity(_))
        ));
        let full = GeneratorParams {
            shape: shape(2, 4, 4),
            fidelity: FidelityStats::new(0.5, 0.0, 0.5).unwrap(),
            ..base.clone()
        };
        assert!(matches!(
            generate_synthetic_trace(&full),
            Err(TraceError::DegenerateShape(_))
        ));
        let bad_accept = GeneratorParams {
            fidelity: FidelityStats::new(1.0, 0.0, 0.0).unwrap(),
            accept_rate: 1.5,
            ..base
        };
        assert!(matches!(
            generate_synthetic_trace(&bad_accept),
            Err(TraceError::InvalidParameter(_))
        ));
    }

    #[test]
    fn hard_only_generation_is_exact() {
        let params = GeneratorParams {
            shape: shape(3, 16, 4),
            num_tokens: 200,
            fidelity: FidelityStats::new(1.0, 0.0, 0.0).unwrap(),
            accept_rate: 0.7,
            skew: 1.0,
            seed: 11,
        };
        let trace = generate_synthetic_trace(&params).unwrap();
        let stats = classify_fidelity(&trace).unwrap();
        assert_eq!(stats.hard_rate, 1.0);
        assert_eq!(stats.mismatch_rate, 0.0);
    }
}
