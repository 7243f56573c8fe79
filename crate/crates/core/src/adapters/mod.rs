//! LoRA and token-wise gated LoRA layers.
//!
//! Tokens are the columns of an `n × T` activation matrix. Both adapter
//! kinds keep the base weight frozen and expose their trainable factors in
//! a fixed order (`A`, `B`, then `Θ` when present) so that gradients and
//! optimizer state line up positionally.

mod gate;
mod kernel;
mod layer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use gate::rmsnorm;
pub use layer::{LoraAdapter, TopLoraAdapter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    TopLora,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::TopLora => "toplora",
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Scaling numerator; the adapter path is multiplied by `alpha / rank`.
    pub alpha: f64,
    pub dropout_rate: f64,
    pub rmsnorm_eps: f64,
    /// Exponential gate; when false the gate is `1 + h`.
    pub use_exp: bool,
    pub use_rmsnorm: bool,
    /// Bound on `|h|` before the gate nonlinearity.
    pub clamp_bound: f64,
    pub seed: u64,
}

impl AdapterConfig {
    /// Defaults: `alpha = 2·rank`, dropout 0.05, ε = 1e-6, exp and RMSNorm on,
    /// clamp at 30, seed 0.
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: 2.0 * rank as f64,
            dropout_rate: 0.05,
            rmsnorm_eps: 1e-6,
            use_exp: true,
            use_rmsnorm: true,
            clamp_bound: 30.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    #[inline]
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.rmsnorm_eps > 0.0 && self.rmsnorm_eps.is_finite()) {
            return Err(Error::Config(format!(
                "rmsnorm_eps must be > 0, got {}",
                self.rmsnorm_eps
            )));
        }
        if !(self.clamp_bound > 0.0 && self.clamp_bound.is_finite()) {
            return Err(Error::Config(format!(
                "clamp_bound must be > 0, got {}",
                self.clamp_bound
            )));
        }
        Ok(())
    }
}

/// Per-token inverted-dropout multipliers (`0` or `1/(1-p)`), one column per token.
///
/// The same column multiplies the token before both the `A` path and the
/// gate path. The base path always sees the undropped token.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    scale: Matrix,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rate: f64, n: usize, tokens: usize) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let scale = Matrix::from_fn(n, tokens, |_, _| {
            if rate > 0.0 && rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        Self { scale }
    }

    pub fn from_matrix(scale: Matrix) -> Self {
        Self { scale }
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.scale
    }
}

/// Gradients of a scalar loss with respect to the trainable factors and the input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub d_a: Matrix,
    pub d_b: Matrix,
    /// Absent for plain LoRA.
    pub d_theta: Option<Matrix>,
    pub d_x: Matrix,
}

impl GradientSet {
    /// Parameter gradients in the same order as [`Adapter::trainable`].
    pub fn parameter_grads(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.d_a, &self.d_b];
        if let Some(t) = &self.d_theta {
            out.push(t);
        }
        out
    }

    pub fn parameter_grads_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.d_a, &mut self.d_b];
        if let Some(t) = &mut self.d_theta {
            out.push(t);
        }
        out
    }
}

/// Common surface of both adapter kinds.
pub trait Adapter {
    fn kind(&self) -> AdapterKind;
    fn config(&self) -> &AdapterConfig;
    /// Frozen base weight `W` (m × n).
    fn base(&self) -> &Matrix;
    fn lora_a(&self) -> &Matrix;
    fn lora_b(&self) -> &Matrix;
    fn theta(&self) -> Option<&Matrix>;

    /// Trainable factors in fixed order: `A`, `B`, then `Θ` if present.
    fn trainable(&self) -> Vec<&Matrix>;
    fn trainable_mut(&mut self) -> Vec<&mut Matrix>;

    /// `W + (α/r)·B·A`, or [`Error::Unmergeable`] for token-wise adapters.
    fn merge(&self) -> Result<Matrix>;

    fn forward_masked(&self, x: &Matrix, mask: Option<&DropoutMask>) -> Result<Matrix> {
        kernel::forward(self, x, mask)
    }

    fn backward_masked(
        &self,
        x: &Matrix,
        upstream: &Matrix,
        mask: Option<&DropoutMask>,
    ) -> Result<GradientSet> {
        kernel::backward(self, x, upstream, mask)
    }

    /// Evaluation-mode forward pass (no dropout).
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_masked(x, None)
    }

    /// Gradients for an evaluation-mode forward pass given `∂L/∂Y`.
    fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<GradientSet> {
        self.backward_masked(x, upstream, None)
    }

    /// Named matrices for serialization: `W`, `A`, `B`, and `Theta` if present.
    fn named_matrices(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("W", self.base()), ("A", self.lora_a()), ("B", self.lora_b())];
        if let Some(t) = self.theta() {
            out.push(("Theta", t));
        }
        out
    }
}

/// Either adapter kind, for callers that choose the kind at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyAdapter {
    Lora(LoraAdapter),
    TopLora(TopLoraAdapter),
}

impl AnyAdapter {
    pub fn init(kind: AdapterKind, config: AdapterConfig, base: Matrix) -> Result<Self> {
        Ok(match kind {
            AdapterKind::Lora => AnyAdapter::Lora(LoraAdapter::init(config, base)?),
            AdapterKind::TopLora => AnyAdapter::TopLora(TopLoraAdapter::init(config, base)?),
        })
    }

    fn inner(&self) -> &dyn Adapter {
        match self {
            AnyAdapter::Lora(a) => a,
            AnyAdapter::TopLora(a) => a,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Adapter {
        match self {
            AnyAdapter::Lora(a) => a,
            AnyAdapter::TopLora(a) => a,
        }
    }
}

impl Adapter for AnyAdapter {
    fn kind(&self) -> AdapterKind {
        self.inner().kind()
    }
    fn config(&self) -> &AdapterConfig {
        self.inner().config()
    }
    fn base(&self) -> &Matrix {
        self.inner().base()
    }
    fn lora_a(&self) -> &Matrix {
        self.inner().lora_a()
    }
    fn lora_b(&self) -> &Matrix {
        self.inner().lora_b()
    }
    fn theta(&self) -> Option<&Matrix> {
        self.inner().theta()
    }
    fn trainable(&self) -> Vec<&Matrix> {
        self.inner().trainable()
    }
    fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        self.inner_mut().trainable_mut()
    }
    fn merge(&self) -> Result<Matrix> {
        self.inner().merge()
    }
}

impl From<LoraAdapter> for AnyAdapter {
    fn from(a: LoraAdapter) -> Self {
        AnyAdapter::Lora(a)
    }
}

impl From<TopLoraAdapter> for AnyAdapter {
    fn from(a: TopLoraAdapter) -> Self {
        AnyAdapter::TopLora(a)
    }
}

/// Trainable parameter count over `modules` adapted `m × n` weights:
/// `r·(m+n)` per module for LoRA, `r·(m+2n)` with the gate projection.
pub fn param_count(kind: AdapterKind, m: u64, n: u64, r: u64, modules: u64) -> u64 {
    match kind {
        AdapterKind::Lora => modules * r * (m + n),
        AdapterKind::TopLora => modules * r * (m + 2 * n),
    }
}
