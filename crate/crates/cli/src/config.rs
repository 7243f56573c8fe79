//! Strict JSON experiment configuration: one optional object per subcommand.
//!
//! Unknown keys and type mismatches are rejected before anything runs.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toplora::gradcheck::Variant;
use toplora::training::TeacherTaskSpec;
use toplora::AdapterKind;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub gradcheck: Option<GradcheckConfig>,
    pub analyze: Option<AnalyzeConfig>,
    pub train: Option<TrainSection>,
    pub params: Option<ParamsConfig>,
    pub sweep: Option<SweepConfig>,
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

fn distinct_seeds(key: &str, seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(CliError::Config(format!("{key}.seeds must not be empty")));
    }
    let mut seen = HashSet::new();
    for s in seeds {
        if !seen.insert(s) {
            return Err(CliError::Config(format!("{key}.seeds: seed {s} listed twice")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub tokens: usize,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: perturbs one analytic gradient entry so the check must fail.
    pub corrupt_gradient: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            m: 6,
            n: 8,
            rank: 3,
            tokens: 4,
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            step: 1e-5,
            tolerance: 1e-6,
            corrupt_gradient: false,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        distinct_seeds("gradcheck", &self.seeds)?;
        if self.variants.is_empty() {
            return Err(CliError::Config("gradcheck.variants must not be empty".into()));
        }
        if self.m == 0 || self.n == 0 || self.tokens == 0 || self.rank == 0 {
            return Err(CliError::Config("gradcheck: m, n, rank and tokens must be >= 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(CliError::Config(format!("gradcheck.step must be > 0, got {}", self.step)));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(CliError::Config(format!(
                "gradcheck.tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// How the analyzed adapter's factors are produced when no weight file is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorSource {
    /// Fresh initialization (`B = 0`).
    Init,
    /// Gaussian `A`, `B` and `Θ`, as after some training.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub rank: usize,
    pub n: usize,
    pub tokens: usize,
    /// Mean RMS of `Θ·x` after rescaling `Θ`.
    pub target_rms: f64,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            n: 32,
            tokens: 256,
            target_rms: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub kind: AdapterKind,
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    /// Defaults to `2·rank`.
    pub alpha: Option<f64>,
    pub use_exp: bool,
    pub use_rmsnorm: bool,
    pub factors: FactorSource,
    pub zero_theta: bool,
    /// Number of standard-Gaussian probe tokens.
    pub tokens: usize,
    pub seed: u64,
    pub ablation: AblationConfig,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::TopLora,
            m: 32,
            n: 32,
            rank: 8,
            alpha: None,
            use_exp: true,
            use_rmsnorm: true,
            factors: FactorSource::Init,
            zero_theta: false,
            tokens: 256,
            seed: 0,
            ablation: AblationConfig::default(),
        }
    }
}

impl AnalyzeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens < 2 {
            return Err(CliError::Config(format!("analyze.tokens must be >= 2, got {}", self.tokens)));
        }
        if self.ablation.tokens < 2 || self.ablation.rank == 0 || self.ablation.n <= self.ablation.rank {
            return Err(CliError::Config(
                "analyze.ablation needs tokens >= 2 and 1 <= rank < n".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsConfig {
    pub m: u64,
    pub n: u64,
    pub rank: u64,
    pub modules: u64,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        Self {
            m: 768,
            n: 768,
            rank: 8,
            modules: 24,
        }
    }
}

/// Optimization budget shared by `train` and `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
}

impl Default for RunBudget {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-2,
            dropout: 0.0,
        }
    }
}

fn default_kinds() -> Vec<AdapterKind> {
    vec![AdapterKind::Lora, AdapterKind::TopLora]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn check_kinds(key: &str, kinds: &[AdapterKind]) -> Result<()> {
    if kinds.is_empty() {
        return Err(CliError::Config(format!("{key}.kinds must not be empty")));
    }
    for (i, k) in kinds.iter().enumerate() {
        if kinds[..i].contains(k) {
            return Err(CliError::Config(format!("{key}.kinds lists {k} twice")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub task: TeacherTaskSpec,
    pub kinds: Vec<AdapterKind>,
    pub rank: usize,
    pub budget: RunBudget,
    /// Adapter initialization and batch sampling both derive from each seed.
    pub seeds: Vec<u64>,
    /// If set, final weights are written as `<dir>/<kind>-r<rank>-seed<seed>.tplw`.
    pub weights_dir: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            task: TeacherTaskSpec::default(),
            kinds: default_kinds(),
            rank: 4,
            budget: RunBudget::default(),
            seeds: default_seeds(),
            weights_dir: None,
        }
    }
}

impl TrainSection {
    pub fn validate(&self) -> Result<()> {
        distinct_seeds("train", &self.seeds)?;
        check_kinds("train", &self.kinds)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub task: TeacherTaskSpec,
    pub kinds: Vec<AdapterKind>,
    pub ranks: Vec<usize>,
    pub budget: RunBudget,
    pub seeds: Vec<u64>,
    /// Exit with status 1 when the rank-trend checks fail.
    pub enforce_checks: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            task: TeacherTaskSpec::default(),
            kinds: default_kinds(),
            ranks: vec![2, 4, 8],
            budget: RunBudget::default(),
            seeds: default_seeds(),
            enforce_checks: false,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        distinct_seeds("sweep", &self.seeds)?;
        check_kinds("sweep", &self.kinds)?;
        if self.ranks.is_empty() {
            return Err(CliError::Config("sweep.ranks must not be empty".into()));
        }
        let mut seen = HashSet::new();
        if !self.ranks.iter().all(|r| seen.insert(r)) {
            return Err(CliError::Config("sweep.ranks lists a rank twice".into()));
        }
        Ok(())
    }
}
