//! Input space, output space, and input-output projection of a low-rank update.
//!
//! For `A = L_A·Q_A` (LQ) and `B = Q_B·R_B` (QR), the update factors as
//! `B·A = Q_B·P·Q_A` with `P = R_B·L_A`. A token `x` contributes only through
//! its coordinates `Q_A·x` along the rows of `Q_A`; the orthogonal remainder
//! is invisible to the update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::adapters::{Adapter, AdapterConfig, TopLoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::{lq_decompose, qr_decompose, Matrix, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionAnalysis {
    /// r × n, orthonormal rows.
    pub q_a: Matrix,
    /// r × r lower triangular.
    pub l_a: Matrix,
    /// m × r, orthonormal columns.
    pub q_b: Matrix,
    /// r × r upper triangular.
    pub r_b: Matrix,
    /// `R_B·L_A`.
    pub projection: Matrix,
}

/// Residuals of the identities a decomposition should satisfy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecompositionResiduals {
    /// `‖Q_A·Q_Aᵀ − I‖_F`
    pub input_orthonormality: f64,
    /// `‖Q_Bᵀ·Q_B − I‖_F`
    pub output_orthonormality: f64,
    /// `‖Q_B·P·Q_A − B·A‖_F / max(1, ‖B·A‖_F)`
    pub reconstruction: f64,
}

pub fn decompose(a: &Matrix, b: &Matrix) -> Result<ProjectionAnalysis> {
    if b.cols() != a.rows() {
        return Err(Error::shape("decompose", b.shape(), a.shape()));
    }
    let lq = lq_decompose(a)?;
    let qr = qr_decompose(b)?;
    let projection = qr.r.matmul(&lq.l)?;
    Ok(ProjectionAnalysis {
        q_a: lq.q,
        l_a: lq.l,
        q_b: qr.q,
        r_b: qr.r,
        projection,
    })
}

impl ProjectionAnalysis {
    pub fn rank(&self) -> usize {
        self.projection.rows()
    }

    /// `Q_B·P·Q_A`.
    pub fn reconstruct(&self) -> Matrix {
        self.q_b
            .matmul(&self.projection)
            .and_then(|m| m.matmul(&self.q_a))
            .expect("factor shapes agree by construction")
    }

    pub fn residuals(&self, a: &Matrix, b: &Matrix) -> Result<DecompositionResiduals> {
        let r = self.rank();
        let eye = Matrix::identity(r);
        let input_orthonormality = self
            .q_a
            .matmul(&self.q_a.transpose())?
            .sub(&eye)?
            .frobenius_norm();
        let output_orthonormality = self
            .q_b
            .transpose()
            .matmul(&self.q_b)?
            .sub(&eye)?
            .frobenius_norm();
        let ba = b.matmul(a)?;
        let reconstruction = self.reconstruct().relative_error(&ba, 1.0)?;
        Ok(DecompositionResiduals {
            input_orthonormality,
            output_orthonormality,
            reconstruction,
        })
    }

    /// Coordinates `α = Q_A·x` of `x` along the input directions.
    pub fn input_coefficients(&self, x: &Vector) -> Result<Vector> {
        self.q_a.mul_vec(x)
    }

    /// Component of `x` orthogonal to every input direction: `x − Q_Aᵀ·α`.
    pub fn orthogonal_component(&self, x: &Vector) -> Result<Vector> {
        let alpha = self.input_coefficients(x)?;
        x.sub(&self.q_a.transpose().mul_vec(&alpha)?)
    }

    /// `Q_B·(P·(Q_A·x))`, equal to `B·A·x`.
    pub fn output_via_projection(&self, x: &Vector) -> Result<Vector> {
        let alpha = self.input_coefficients(x)?;
        let mixed = self.projection.mul_vec(&alpha)?;
        self.q_b.mul_vec(&mixed)
    }
}

pub fn input_coefficients(analysis: &ProjectionAnalysis, x: &Vector) -> Result<Vector> {
    analysis.input_coefficients(x)
}

pub fn output_via_projection(analysis: &ProjectionAnalysis, x: &Vector) -> Result<Vector> {
    analysis.output_via_projection(x)
}

/// Spread of the token-wise gate across a set of tokens.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SigmaDispersion {
    pub per_token_sigma: Vec<Vec<f64>>,
    /// Per-coordinate mean of `ln σ` across tokens.
    pub mean_log_sigma: Vec<f64>,
    /// Per-coordinate sample standard deviation (divisor `T − 1`) of `ln σ`.
    pub std_log_sigma: Vec<f64>,
    /// `max |σ_ij − 1|` over tokens and coordinates.
    pub max_abs_dev_from_one: f64,
}

impl SigmaDispersion {
    /// Recomputes the statistics from per-token gates.
    pub fn from_sigmas(per_token_sigma: Vec<Vec<f64>>) -> Result<Self> {
        let t = per_token_sigma.len();
        if t < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: t });
        }
        let r = per_token_sigma[0].len();
        let mut mean = vec![0.0; r];
        let mut max_dev: f64 = 0.0;
        for sigma in &per_token_sigma {
            for (k, s) in sigma.iter().enumerate() {
                mean[k] += s.ln();
                max_dev = max_dev.max((s - 1.0).abs());
            }
        }
        for m in mean.iter_mut() {
            *m /= t as f64;
        }
        let mut var = vec![0.0; r];
        for sigma in &per_token_sigma {
            for (k, s) in sigma.iter().enumerate() {
                let d = s.ln() - mean[k];
                var[k] += d * d;
            }
        }
        let std = var.iter().map(|v| (v / (t - 1) as f64).sqrt()).collect();
        Ok(Self {
            per_token_sigma,
            mean_log_sigma: mean,
            std_log_sigma: std,
            max_abs_dev_from_one: max_dev,
        })
    }

    /// Mean over gate coordinates of the per-coordinate standard deviation.
    pub fn mean_std_log_sigma(&self) -> f64 {
        self.std_log_sigma.iter().sum::<f64>() / self.std_log_sigma.len() as f64
    }
}

/// Gate statistics over the columns of `tokens` (n × T, T ≥ 2).
pub fn sigma_dispersion(adapter: &TopLoraAdapter, tokens: &Matrix) -> Result<SigmaDispersion> {
    if tokens.cols() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: tokens.cols(),
        });
    }
    let sigmas = (0..tokens.cols())
        .map(|j| adapter.sigma_of(&tokens.column(j)).map(Vector::into_vec))
        .collect::<Result<Vec<_>>>()?;
    SigmaDispersion::from_sigmas(sigmas)
}

/// Gate spread with and without RMS normalization on a shared projection.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationDispersion {
    pub rank: usize,
    pub n: usize,
    pub tokens: usize,
    /// Mean over tokens of `RMS(Θ·x)` after rescaling.
    pub projection_rms: f64,
    pub with_rmsnorm: f64,
    pub without_rmsnorm: f64,
    pub ratio: f64,
}

/// Monte-Carlo comparison of gate spread: Kaiming-initialized `Θ` (r × n),
/// rescaled so the mean RMS of `Θ·x` is `target_rms`, over `tokens`
/// standard-Gaussian tokens. Reports mean std of `ln σ` for both gate forms.
pub fn ablation_dispersion(
    rank: usize,
    n: usize,
    tokens: usize,
    target_rms: f64,
    seed: u64,
) -> Result<AblationDispersion> {
    if !(target_rms > 0.0 && target_rms.is_finite()) {
        return Err(Error::Config(format!("target_rms must be > 0, got {target_rms}")));
    }
    let config = AdapterConfig::new(rank).with_seed(seed).with_dropout(0.0);
    // Only Θ matters here; a minimal base keeps construction cheap.
    let fresh = TopLoraAdapter::init(config.clone(), Matrix::zeros(rank + 1, n))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let x = Matrix::from_fn(n, tokens, |_, _| StandardNormal.sample(&mut rng));

    let theta = fresh.theta().expect("token-wise adapter").clone();
    let u = theta.matmul(&x)?;
    let mut rms_sum = 0.0;
    for j in 0..tokens {
        let col = u.column(j);
        rms_sum += (col.dot(&col) / rank as f64).sqrt();
    }
    let theta = theta.scale(target_rms * tokens as f64 / rms_sum);

    let build = |use_rmsnorm: bool| -> Result<f64> {
        let cfg = AdapterConfig {
            use_rmsnorm,
            ..config.clone()
        };
        let ad = TopLoraAdapter::from_parts(
            cfg,
            fresh.base().clone(),
            fresh.lora_a().clone(),
            fresh.lora_b().clone(),
            theta.clone(),
        )?;
        Ok(sigma_dispersion(&ad, &x)?.mean_std_log_sigma())
    };
    let with_rmsnorm = build(true)?;
    let without_rmsnorm = build(false)?;
    Ok(AblationDispersion {
        rank,
        n,
        tokens,
        projection_rms: target_rms,
        with_rmsnorm,
        without_rmsnorm,
        ratio: with_rmsnorm / without_rmsnorm,
    })
}
