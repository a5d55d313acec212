//! Run configuration: one strict JSON document covering every knob, with
//! command-line flags layered on top.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use expertsim::perfmodel::{GovernorConfig, HardwareProfile};
use expertsim::scheduler::{CapacityMode, PhaseBoundaries, Policy};
use expertsim::sim::{KPolicy, SimConfig};
use expertsim::trace::{FidelityStats, GeneratorParams, ModelShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unbounded {
    #[serde(rename = "inf")]
    Inf,
}

/// Cache size in experts, or `"inf"` for room for the whole model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Capacity {
    Experts(usize),
    Unbounded(Unbounded),
}

impl Capacity {
    pub fn resolve(self, shape: &ModelShape, mode: CapacityMode) -> usize {
        match (self, mode) {
            (Capacity::Experts(c), _) => c,
            (Capacity::Unbounded(_), CapacityMode::PerLayer) => shape.experts_per_layer,
            (Capacity::Unbounded(_), CapacityMode::Global) => shape.total_experts(),
        }
    }
}

impl std::str::FromStr for Capacity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "∞" => Ok(Capacity::Unbounded(Unbounded::Inf)),
            n => n
                .parse()
                .map(Capacity::Experts)
                .map_err(|_| format!("expected an expert count or `inf`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for Capacity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Capacity::Experts(c) => write!(f, "{c}"),
            Capacity::Unbounded(_) => f.write_str("inf"),
        }
    }
}

/// Every field is optional in the file; missing ones take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Trace generation.
    pub shape: ModelShape,
    pub tokens: usize,
    /// Hard, soft and mismatch rates.
    pub fidelity: [f64; 3],
    pub accept_rate: f64,
    pub skew: f64,
    pub seed: u64,

    // Simulation.
    pub policy: Policy,
    pub cache_capacity: Capacity,
    pub capacity_mode: CapacityMode,
    pub entropy_weighting: bool,
    pub k: KPolicy,
    pub profile: HardwareProfile,
    pub governor: GovernorConfig,
    pub phase_boundaries: PhaseBoundaries,
    pub prefetch_budget: Option<usize>,
    pub rollback_time: f64,
    pub initial_acceptance: f64,
    pub ema_alpha: f64,

    // Comparison grid.
    pub policies: Vec<Policy>,
    pub capacities: Vec<Capacity>,

    // Roofline sweep.
    pub k_range: [usize; 2],
    /// Constant per-position acceptance probability for the sweep.
    pub acceptance: f64,
    /// New experts per verified token; `null` assumes a cold cache,
    /// `L * top_k`.
    pub new_experts_per_token: Option<f64>,
}

/// DeepSeek-V2-Lite-sized experts in 4-bit over a 64 GB/s link.
pub fn default_profile() -> HardwareProfile {
    HardwareProfile {
        pcie_bandwidth: 64e9,
        pcie_init_latency: 0.004,
        pcie_overhead: 0.0005,
        expert_size: 4.3e6,
        draft_base: 0.004,
        draft_per_token: 0.008,
        verify_samples: vec![(1, 0.030), (5, 0.045), (9, 0.070)],
        work_per_token: 1.0,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            shape: ModelShape::new(26, 64, 6, 2, 4_300_000).expect("default shape is valid"),
            tokens: 1_000,
            fidelity: [0.441, 0.468, 0.091],
            accept_rate: 0.7,
            skew: 1.0,
            seed: 0,
            policy: Policy::Speculative,
            cache_capacity: Capacity::Experts(24),
            capacity_mode: CapacityMode::PerLayer,
            entropy_weighting: false,
            k: KPolicy::Fixed(4),
            profile: default_profile(),
            governor: GovernorConfig::default(),
            phase_boundaries: PhaseBoundaries::default(),
            prefetch_budget: None,
            rollback_time: 0.0,
            initial_acceptance: 0.8,
            ema_alpha: 0.1,
            policies: Policy::ALL.to_vec(),
            capacities: vec![
                Capacity::Experts(12),
                Capacity::Experts(24),
                Capacity::Experts(48),
            ],
            k_range: [1, 16],
            acceptance: 0.8,
            new_experts_per_token: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn generator_params(&self) -> Result<GeneratorParams> {
        let [h, s, m] = self.fidelity;
        Ok(GeneratorParams {
            shape: self.shape,
            num_tokens: self.tokens,
            fidelity: FidelityStats::new(h, s, m).context("field `fidelity`")?,
            accept_rate: self.accept_rate,
            skew: self.skew,
            seed: self.seed,
        })
    }

    /// Simulator config for `policy` at `capacity` against a trace of `shape`.
    pub fn sim_config(
        &self,
        shape: &ModelShape,
        policy: Policy,
        capacity: Capacity,
    ) -> Result<SimConfig> {
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            bail!("field `ema_alpha`: {} outside [0, 1]", self.ema_alpha);
        }
        let bounds = self.phase_boundaries;
        PhaseBoundaries::new(bounds.f1, bounds.f2).context("field `phase_boundaries`")?;
        let mut cfg = SimConfig::new(
            policy,
            capacity.resolve(shape, self.capacity_mode),
            self.k,
            self.profile.clone(),
        );
        cfg.capacity_mode = self.capacity_mode;
        cfg.entropy_weighting = self.entropy_weighting;
        cfg.governor = self.governor;
        cfg.phase_boundaries = bounds;
        cfg.prefetch_budget = self.prefetch_budget;
        cfg.rollback_time = self.rollback_time;
        cfg.initial_acceptance = self.initial_acceptance;
        cfg.ema_alpha = self.ema_alpha;
        cfg.seed = self.seed;
        Ok(cfg)
    }
}
