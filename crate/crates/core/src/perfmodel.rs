//! Amortization roofline performance model and the draft-length governor.
//!
//! All times are seconds and all sizes bytes. Decimal units are used
//! throughout: [`MB`] is 10^6 bytes and [`GB`] is 10^9 bytes.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MB: f64 = 1e6;
pub const GB: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("k={k} exceeds the {max} acceptance probabilities available")]
    KOutOfRange { k: usize, max: usize },
    #[error("need at least two verify samples, got {0}")]
    InsufficientSamples(usize),
    #[error("invalid hardware profile: {0}")]
    InvalidProfile(String),
    #[error("invalid acceptance model: {0}")]
    InvalidModel(String),
    #[error("invalid governor config: {0}")]
    InvalidGovernor(String),
    #[error("empty search range [{0}, {1}]")]
    EmptyRange(usize, usize),
    #[error("TTFT budget {budget}s is below the k={k_min} cycle latency {latency}s")]
    InfeasibleBudget {
        budget: f64,
        k_min: usize,
        latency: f64,
    },
}

/// Profiled hardware constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    /// Host-to-device bandwidth, bytes/s.
    pub pcie_bandwidth: f64,
    /// Latency of the first mandatory expert fetch of a cycle.
    pub pcie_init_latency: f64,
    /// Fixed cost per transfer batch.
    pub pcie_overhead: f64,
    /// Bytes moved per expert.
    pub expert_size: f64,
    pub draft_base: f64,
    pub draft_per_token: f64,
    /// `(verify window, seconds)` samples with strictly increasing windows.
    pub verify_samples: Vec<(usize, f64)>,
    #[serde(default = "default_work_per_token")]
    pub work_per_token: f64,
}

fn default_work_per_token() -> f64 {
    1.0
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), PerfError> {
        let positive = [
            ("pcie_bandwidth", self.pcie_bandwidth),
            ("pcie_init_latency", self.pcie_init_latency),
            ("pcie_overhead", self.pcie_overhead),
            ("expert_size", self.expert_size),
            ("draft_base", self.draft_base),
            ("draft_per_token", self.draft_per_token),
            ("work_per_token", self.work_per_token),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PerfError::InvalidProfile(format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        if self.verify_samples.len() < 2 {
            return Err(PerfError::InsufficientSamples(self.verify_samples.len()));
        }
        for w in self.verify_samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(PerfError::InvalidProfile(
                    "verify_samples windows must be strictly increasing".into(),
                ));
            }
        }
        if self
            .verify_samples
            .iter()
            .any(|s| !(s.1.is_finite() && s.1 > 0.0))
        {
            return Err(PerfError::InvalidProfile(
                "verify sample times must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Copy with every time constant multiplied by `c`.
    pub fn scaled_time(&self, c: f64) -> Self {
        Self {
            pcie_bandwidth: self.pcie_bandwidth / c,
            pcie_init_latency: self.pcie_init_latency * c,
            pcie_overhead: self.pcie_overhead * c,
            draft_base: self.draft_base * c,
            draft_per_token: self.draft_per_token * c,
            verify_samples: self
                .verify_samples
                .iter()
                .map(|&(w, t)| (w, t * c))
                .collect(),
            ..self.clone()
        }
    }

    /// Experts the channel can move during one draft-token interval.
    pub fn experts_per_draft_token(&self) -> usize {
        (self.draft_per_token * self.pcie_bandwidth / self.expert_size).floor() as usize
    }
}

/// Conditional per-position acceptance probabilities, smoothed online.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceModel {
    pub p: Vec<f64>,
    pub ema_alpha: f64,
}

impl AcceptanceModel {
    pub const DEFAULT_ALPHA: f64 = 0.1;

    pub fn new(p: Vec<f64>, ema_alpha: f64) -> Result<Self, PerfError> {
        if !(ema_alpha > 0.0 && ema_alpha <= 1.0) {
            return Err(PerfError::InvalidModel(format!(
                "alpha {ema_alpha} outside (0, 1]"
            )));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PerfError::InvalidModel(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { p, ema_alpha })
    }

    pub fn constant(p: f64, k_max: usize) -> Result<Self, PerfError> {
        Self::new(vec![p; k_max], Self::DEFAULT_ALPHA)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernorConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// Upper bound of the online search, derived from the TTFT budget.
    pub k_slo: usize,
    #[serde(default)]
    pub ttft_budget: Option<f64>,
}

impl GovernorConfig {
    pub fn new(k_min: usize, k_max: usize, k_slo: usize) -> Result<Self, PerfError> {
        let cfg = Self {
            k_min,
            k_max,
            k_slo,
            ttft_budget: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        if self.k_min == 0 || self.k_min > self.k_slo || self.k_slo > self.k_max {
            return Err(PerfError::InvalidGovernor(format!(
                "need 1 <= k_min ({}) <= k_slo ({}) <= k_max ({})",
                self.k_min, self.k_slo, self.k_max
            )));
        }
        Ok(())
    }
}

impl Default for GovernorConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 16,
            k_slo: 16,
            ttft_budget: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub k: usize,
    pub intensity: f64,
    pub throughput: f64,
    pub compute_roof: f64,
    pub io_roof: f64,
}

/// Expected accepted tokens for a `k`-token draft: sum over i of the product
/// of p_1..p_i.
pub fn k_accept(model: &AcceptanceModel, k: usize) -> Result<f64, PerfError> {
    if k > model.p.len() {
        return Err(PerfError::KOutOfRange {
            k,
            max: model.p.len(),
        });
    }
    let mut prefix = 1.0;
    let mut sum = 0.0;
    for &p in &model.p[..k] {
        prefix *= p;
        sum += prefix;
    }
    Ok(sum)
}

pub fn t_draft(profile: &HardwareProfile, k: usize) -> f64 {
    profile.draft_base + k as f64 * profile.draft_per_token
}

/// Synchronous transfer time for `num_new_experts`; an empty batch costs
/// nothing, overhead included.
pub fn t_pcie_new(profile: &HardwareProfile, num_new_experts: usize) -> f64 {
    if num_new_experts == 0 {
        return 0.0;
    }
    profile.pcie_overhead + num_new_experts as f64 * profile.expert_size / profile.pcie_bandwidth
}

/// Verification time for `window` tokens, interpolated piecewise-linearly
/// between samples and extended linearly past either end (floored at zero).
pub fn t_verify(profile: &HardwareProfile, window: usize) -> Result<f64, PerfError> {
    let s = &profile.verify_samples;
    if s.len() < 2 {
        return Err(PerfError::InsufficientSamples(s.len()));
    }
    let x = window as f64;
    let seg = match s.iter().position(|&(w, _)| w >= window) {
        Some(i) if s[i].0 == window => return Ok(s[i].1),
        Some(0) => 0,
        Some(i) => i - 1,
        None => s.len() - 2,
    };
    let (x0, y0) = (s[seg].0 as f64, s[seg].1);
    let (x1, y1) = (s[seg + 1].0 as f64, s[seg + 1].1);
    Ok((y0 + (y1 - y0) * (x - x0) / (x1 - x0)).max(0.0))
}

/// Non-overlapped cycle time: `max(draft, init I/O) + new-expert I/O + verify(k+1)`.
pub fn t_cycle(
    profile: &HardwareProfile,
    k: usize,
    num_new_experts: usize,
) -> Result<f64, PerfError> {
    let first = t_draft(profile, k).max(profile.pcie_init_latency);
    Ok(first + t_pcie_new(profile, num_new_experts) + t_verify(profile, k + 1)?)
}

/// Accepted tokens per second: `k_accept(k) / t_cycle(k)`.
pub fn throughput(
    profile: &HardwareProfile,
    model: &AcceptanceModel,
    k: usize,
    num_new_experts: usize,
) -> Result<f64, PerfError> {
    Ok(k_accept(model, k)? / t_cycle(profile, k, num_new_experts)?)
}

/// Accepted work per byte of synchronous I/O. Returns `f64::INFINITY` when no
/// synchronous bytes are moved (I/O fully hidden).
pub fn amortization_intensity(
    profile: &HardwareProfile,
    model: &AcceptanceModel,
    k: usize,
    sync_io_bytes: f64,
) -> Result<f64, PerfError> {
    let work = k_accept(model, k)? * profile.work_per_token;
    if sync_io_bytes <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(work / sync_io_bytes)
}

/// Operating points for every k in `k_range`.
///
/// The compute roof is the throughput with zero new-expert I/O; the I/O roof
/// is `B_PCIe * intensity / S_token`. Throughput never exceeds either roof.
pub fn roofline(
    profile: &HardwareProfile,
    model: &AcceptanceModel,
    k_range: RangeInclusive<usize>,
    new_expert_estimator: impl Fn(usize) -> usize,
) -> Result<Vec<OperatingPoint>, PerfError> {
    k_range
        .map(|k| {
            let n = new_expert_estimator(k);
            let accepted = k_accept(model, k)?;
            let sync_bytes = n as f64 * profile.expert_size;
            let intensity = amortization_intensity(profile, model, k, sync_bytes)?;
            let first = t_draft(profile, k).max(profile.pcie_init_latency);
            let compute_roof = accepted / (first + t_verify(profile, k + 1)?);
            let io_roof = if intensity.is_infinite() {
                f64::INFINITY
            } else {
                profile.pcie_bandwidth * intensity / profile.work_per_token
            };
            Ok(OperatingPoint {
                k,
                intensity,
                throughput: throughput(profile, model, k, n)?,
                compute_roof,
                io_roof,
            })
        })
        .collect()
}

/// Writes operating points as `k,intensity,throughput,compute_roof,io_roof`.
pub fn roofline_csv(points: &[OperatingPoint]) -> String {
    let mut out = String::from("k,intensity,throughput,compute_roof,io_roof\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.k, p.intensity, p.throughput, p.compute_roof, p.io_roof
        ));
    }
    out
}

/// Draft length maximizing modeled throughput over `[k_min, k_slo]`; the
/// smallest k wins ties.
pub fn select_k(
    profile: &HardwareProfile,
    model: &AcceptanceModel,
    config: &GovernorConfig,
    new_expert_estimator: impl Fn(usize) -> usize,
) -> Result<usize, PerfError> {
    if config.k_min > config.k_slo {
        return Err(PerfError::EmptyRange(config.k_min, config.k_slo));
    }
    let mut best: Option<(usize, f64)> = None;
    for k in config.k_min..=config.k_slo {
        let theta = throughput(profile, model, k, new_expert_estimator(k))?;
        if best.is_none_or(|(_, b)| theta > b) {
            best = Some((k, theta));
        }
    }
    Ok(best.expect("range is non-empty").0)
}

/// Largest k in `[k_min, k_max]` whose modeled first-cycle latency fits the
/// TTFT budget. Cycle time is monotone in k, so this is a binary search.
pub fn k_slo_from_ttft(
    profile: &HardwareProfile,
    ttft_budget: f64,
    k_min: usize,
    k_max: usize,
    new_expert_estimator: impl Fn(usize) -> usize,
) -> Result<usize, PerfError> {
    if k_min > k_max {
        return Err(PerfError::EmptyRange(k_min, k_max));
    }
    let latency = |k: usize| t_cycle(profile, k, new_expert_estimator(k));
    let at_min = latency(k_min)?;
    if at_min > ttft_budget {
        return Err(PerfError::InfeasibleBudget {
            budget: ttft_budget,
            k_min,
            latency: at_min,
        });
    }
    // Invariant: latency(lo) fits; everything above hi does not.
    let (mut lo, mut hi) = (k_min, k_max);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if latency(mid)? <= ttft_budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(lo)
}

/// EMA update from one cycle's outcomes. `observed[i]` is the outcome for
/// draft position i+1; positions after the first rejection are unobserved.
pub fn update_acceptance(model: &AcceptanceModel, observed: &[bool]) -> AcceptanceModel {
    let mut next = model.clone();
    let a = model.ema_alpha;
    for (p, &accepted) in next.p.iter_mut().zip(observed) {
        let o = if accepted { 1.0 } else { 0.0 };
        *p = ((1.0 - a) * *p + a * o).clamp(0.0, 1.0);
        if !accepted {
            break;
        }
    }
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintComponent {
    pub name: String,
    pub draft_bytes: f64,
    pub target_bytes: f64,
    pub shared_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintTotals {
    pub draft: f64,
    pub target: f64,
    pub shared: f64,
    pub total: f64,
}

impl FootprintTotals {
    /// Fractional saving relative to `baseline`.
    pub fn reduction_from(&self, baseline: &FootprintTotals) -> f64 {
        1.0 - self.total / baseline.total
    }
}

/// Column-wise memory sums for draft-only, target-only and shared residency.
pub fn memory_footprint(components: &[FootprintComponent]) -> FootprintTotals {
    let draft: f64 = components.iter().map(|c| c.draft_bytes).sum();
    let target: f64 = components.iter().map(|c| c.target_bytes).sum();
    let shared: f64 = components.iter().map(|c| c.shared_bytes).sum();
    FootprintTotals {
        draft,
        target,
        shared,
        total: draft + target + shared,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn profile() -> HardwareProfile {
        HardwareProfile {
            pcie_bandwidth: 16.0 * GB,
            pcie_init_latency: 0.020,
            pcie_overhead: 0.002,
            expert_size: 25.0 * MB,
            draft_base: 0.005,
            draft_per_token: 0.003,
            verify_samples: vec![(1, 0.010), (5, 0.020), (9, 0.040)],
            work_per_token: 1.0,
        }
    }

    #[test]
    fn k_accept_examples() {
        let certain = AcceptanceModel::constant(1.0, 3).unwrap();
        assert_eq!(k_accept(&certain, 3).unwrap(), 3.0);
        let half = AcceptanceModel::constant(0.5, 2).unwrap();
        assert_eq!(k_accept(&half, 2).unwrap(), 0.75);
        assert_eq!(
            k_accept(&half, 3),
            Err(PerfError::KOutOfRange { k: 3, max: 2 })
        );
        assert_eq!(k_accept(&half, 0).unwrap(), 0.0);
    }

    #[test]
    fn draft_and_transfer_times() {
        let p = profile();
        assert_eq!(t_draft(&p, 0), p.draft_base);
        assert!((t_draft(&p, 8) - 0.029).abs() < 1e-15);
        for k in 0..20 {
            assert!((t_draft(&p, k + 1) - t_draft(&p, k) - p.draft_per_token).abs() < 1e-15);
        }
        assert_eq!(t_pcie_new(&p, 0), 0.0);
        // 2 ms + 250 MB / 16 GB/s
        assert!((t_pcie_new(&p, 10) - 0.017_625).abs() < 1e-12);
        let one = t_pcie_new(&p, 10) - p.pcie_overhead;
        let two = t_pcie_new(&p, 20) - p.pcie_overhead;
        assert!((two - 2.0 * one).abs() < 1e-15);
    }

    #[test]
    fn verify_interpolation() {
        let mut p = profile();
        p.verify_samples = vec![(1, 0.010), (5, 0.020)];
        assert_eq!(t_verify(&p, 5).unwrap(), 0.020);
        assert!((t_verify(&p, 3).unwrap() - 0.015).abs() < 1e-15);
        // Extrapolation continues the last segment's slope.
        assert!((t_verify(&p, 9).unwrap() - 0.030).abs() < 1e-15);
        p.verify_samples.truncate(1);
        assert_eq!(t_verify(&p, 3), Err(PerfError::InsufficientSamples(1)));
    }

    #[test]
    fn cycle_composition() {
        let p = profile();
        // max(29 ms, 20 ms) + 17.625 ms + 40 ms
        assert!((t_cycle(&p, 8, 10).unwrap() - 0.086_625).abs() < 1e-12);
        let mut slow_io = p.clone();
        slow_io.pcie_init_latency = 0.050;
        assert!((t_cycle(&slow_io, 8, 0).unwrap() - (0.050 + 0.040)).abs() < 1e-12);
        assert!((t_cycle(&p, 8, 0).unwrap() - (0.029 + 0.040)).abs() < 1e-12);
    }

    #[test]
    fn throughput_properties() {
        let p = profile();
        let zero = AcceptanceModel::constant(0.0, 8).unwrap();
        assert_eq!(throughput(&p, &zero, 8, 3).unwrap(), 0.0);
        let m = AcceptanceModel::constant(0.9, 16).unwrap();
        let base = throughput(&p, &m, 8, 10).unwrap();
        let scaled = throughput(&p.scaled_time(2.0), &m, 8, 10).unwrap();
        assert!((scaled - base / 2.0).abs() < 1e-9 * base);
    }

    #[test]
    fn intensity_cases() {
        let p = profile();
        let m = AcceptanceModel::constant(1.0, 2).unwrap();
        assert_eq!(
            amortization_intensity(&p, &m, 2, 0.0).unwrap(),
            f64::INFINITY
        );
        assert!((amortization_intensity(&p, &m, 2, 50.0 * MB).unwrap() - 4e-8).abs() < 1e-20);
        let full = amortization_intensity(&p, &m, 2, 50.0 * MB).unwrap();
        let half = amortization_intensity(&p, &m, 2, 25.0 * MB).unwrap();
        assert_eq!(half, 2.0 * full);
    }

    #[test]
    fn roofline_limits() {
        let p = profile();
        let m = AcceptanceModel::constant(0.8, 8).unwrap();
        for pt in roofline(&p, &m, 1..=8, |_| 0).unwrap() {
            assert_eq!(pt.throughput, pt.compute_roof);
            assert!(pt.io_roof.is_infinite());
        }
        let mut fast = p.clone();
        fast.pcie_bandwidth *= 2.0;
        let a = roofline(&p, &m, 1..=8, |k| k * 3).unwrap();
        let b = roofline(&fast, &m, 1..=8, |k| k * 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y.io_roof - 2.0 * x.io_roof).abs() < 1e-9 * x.io_roof);
            assert_eq!(x.compute_roof, y.compute_roof);
        }
    }

    #[test]
    fn select_k_boundaries() {
        let p = profile();
        let cfg = GovernorConfig::new(2, 16, 6).unwrap();
        // Certain acceptance and cheap drafting: more tokens always pay.
        let eager = AcceptanceModel::constant(1.0, 16).unwrap();
        assert_eq!(select_k(&p, &eager, &cfg, |_| 0).unwrap(), 6);
        // Tiny acceptance with heavy per-k transfers: shortest draft wins.
        let poor = AcceptanceModel::constant(0.05, 16).unwrap();
        assert_eq!(select_k(&p, &poor, &cfg, |k| 40 * k).unwrap(), 2);
        let bad = GovernorConfig {
            k_min: 4,
            k_max: 8,
            k_slo: 3,
            ttft_budget: None,
        };
        assert_eq!(
            select_k(&p, &eager, &bad, |_| 0),
            Err(PerfError::EmptyRange(4, 3))
        );
    }

    #[test]
    fn ttft_bound() {
        let p = profile();
        let at1 = t_cycle(&p, 1, 0).unwrap();
        assert!(matches!(
            k_slo_from_ttft(&p, at1 * 0.5, 1, 16, |_| 0),
            Err(PerfError::InfeasibleBudget { .. })
        ));
        assert_eq!(k_slo_from_ttft(&p, 10.0, 1, 16, |_| 0).unwrap(), 16);
        assert_eq!(k_slo_from_ttft(&p, at1, 1, 16, |_| 0).unwrap(), 1);
    }

    #[test]
    fn ema_updates() {
        let m = AcceptanceModel::new(vec![0.9, 0.5, 0.5], 0.1).unwrap();
        let next = update_acceptance(&m, &[true]);
        assert!((next.p[0] - 0.91).abs() < 1e-15);
        assert_eq!(&next.p[1..], &[0.5, 0.5]);

        let memoryless = AcceptanceModel::new(vec![0.3, 0.3, 0.3], 1.0).unwrap();
        let next = update_acceptance(&memoryless, &[true, false, true]);
        assert_eq!(next.p, vec![1.0, 0.0, 0.3]);

        let mut m = AcceptanceModel::constant(0.2, 1).unwrap();
        let mut prev = m.p[0];
        for _ in 0..200 {
            m = update_acceptance(&m, &[true]);
            assert!(m.p[0] > prev && m.p[0] <= 1.0);
            prev = m.p[0];
        }
        assert!(prev > 0.999_99);
    }

    #[test]
    fn profile_validation() {
        assert!(profile().validate().is_ok());
        let mut p = profile();
        p.verify_samples = vec![(4, 0.01), (2, 0.02)];
        assert!(matches!(p.validate(), Err(PerfError::InvalidProfile(_))));
        let mut p = profile();
        p.pcie_bandwidth = 0.0;
        assert!(p.validate().is_err());
        let json = r#"{"pcie_bandwidth":1e9,"pcie_init_latency":0.001,"pcie_overhead":0.001,
            "expert_size":1e6,"draft_base":0.001,"draft_per_token":0.001,
            "verify_samples":[[1,0.01],[2,0.02]],"bogus":1}"#;
        assert!(serde_json::from_str::<HardwareProfile>(json).is_err());
    }
}
