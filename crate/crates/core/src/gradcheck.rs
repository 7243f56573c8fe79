//! Central finite-difference verification of adapter gradients.
//!
//! The probe loss is `L = ½‖Y‖²_F`, whose upstream gradient is `Y` itself.
//! Errors are reported per parameter group as
//! `max_i |analytic_i − numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterConfig, AnyAdapter, GradientSet, LoraAdapter, TopLoraAdapter};
use crate::error::Result;
use crate::linalg::Matrix;

/// Adapter variants covered by gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Exponential gate over RMS-normalized projection.
    Full,
    /// Gate `1 + h` instead of `exp(h)`.
    NoExp,
    /// Exponential gate over the raw projection.
    NoRmsnorm,
    /// Plain LoRA.
    Lora,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoExp, Variant::NoRmsnorm, Variant::Lora];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoExp => "no_exp",
            Variant::NoRmsnorm => "no_rmsnorm",
            Variant::Lora => "lora",
        }
    }

    pub fn config(self, rank: usize) -> AdapterConfig {
        let base = AdapterConfig::new(rank).with_dropout(0.0);
        match self {
            Variant::Full | Variant::Lora => base,
            Variant::NoExp => AdapterConfig {
                use_exp: false,
                ..base
            },
            Variant::NoRmsnorm => AdapterConfig {
                use_rmsnorm: false,
                ..base
            },
        }
    }
}

/// Max relative error per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupErrors {
    pub a: f64,
    pub b: f64,
    pub theta: Option<f64>,
    pub x: f64,
}

impl GroupErrors {
    pub fn max(&self) -> f64 {
        [self.a, self.b, self.theta.unwrap_or(0.0), self.x]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Random adapter with all factors nonzero, plus a token batch.
///
/// Entries of `W`, `A`, `B`, `Θ` are Gaussian with variance `1/n`; tokens are
/// standard Gaussian.
pub fn random_instance(
    variant: Variant,
    m: usize,
    n: usize,
    rank: usize,
    tokens: usize,
    seed: u64,
) -> Result<(AnyAdapter, Matrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n as f64).sqrt();
    let mut draw = |rows, cols| {
        Matrix::from_fn(rows, cols, |_, _| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        })
    };
    let base = draw(m, n);
    let a = draw(rank, n);
    let b = draw(m, rank);
    let theta = draw(rank, n);
    let x = draw(n, tokens).scale(1.0 / scale);
    let config = variant.config(rank).with_seed(seed);
    let adapter = match variant {
        Variant::Lora => LoraAdapter::from_parts(config, base, a, b)?.into(),
        _ => TopLoraAdapter::from_parts(config, base, a, b, theta)?.into(),
    };
    Ok((adapter, x))
}

fn half_sq_norm(adapter: &AnyAdapter, x: &Matrix) -> Result<f64> {
    let y = adapter.forward(x)?;
    Ok(0.5 * y.as_slice().iter().map(|v| v * v).sum::<f64>())
}

/// Gradients of `½‖forward(x)‖²` by central differences with the given step.
pub fn numeric_gradients(adapter: &AnyAdapter, x: &Matrix, step: f64) -> Result<GradientSet> {
    let mut work = adapter.clone();
    let n_params = work.trainable().len();
    let mut grads = Vec::with_capacity(n_params);
    for p in 0..n_params {
        let shape = work.trainable()[p].shape();
        let mut g = Matrix::zeros(shape.0, shape.1);
        for k in 0..shape.0 * shape.1 {
            let orig = work.trainable()[p].as_slice()[k];
            let mut eval_at = |v: f64| -> Result<f64> {
                work.trainable_mut()[p].as_mut_slice()[k] = v;
                half_sq_norm(&work, x)
            };
            let plus = eval_at(orig + step)?;
            let minus = eval_at(orig - step)?;
            work.trainable_mut()[p].as_mut_slice()[k] = orig;
            g.as_mut_slice()[k] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }

    let mut xw = x.clone();
    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.as_slice().len() {
        let orig = xw.as_slice()[k];
        xw.as_mut_slice()[k] = orig + step;
        let plus = half_sq_norm(adapter, &xw)?;
        xw.as_mut_slice()[k] = orig - step;
        let minus = half_sq_norm(adapter, &xw)?;
        xw.as_mut_slice()[k] = orig;
        d_x.as_mut_slice()[k] = (plus - minus) / (2.0 * step);
    }

    let mut it = grads.into_iter();
    Ok(GradientSet {
        d_a: it.next().expect("A gradient"),
        d_b: it.next().expect("B gradient"),
        d_theta: it.next(),
        d_x,
    })
}

/// Group-normalized max relative error between two gradient matrices.
pub fn group_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn compare(analytic: &GradientSet, numeric: &GradientSet) -> GroupErrors {
    GroupErrors {
        a: group_relative_error(&analytic.d_a, &numeric.d_a),
        b: group_relative_error(&analytic.d_b, &numeric.d_b),
        theta: match (&analytic.d_theta, &numeric.d_theta) {
            (Some(a), Some(n)) => Some(group_relative_error(a, n)),
            _ => None,
        },
        x: group_relative_error(&analytic.d_x, &numeric.d_x),
    }
}

/// Analytic gradients for the probe loss.
pub fn analytic_gradients(adapter: &AnyAdapter, x: &Matrix) -> Result<GradientSet> {
    let y = adapter.forward(x)?;
    adapter.backward(x, &y)
}

pub fn check(adapter: &AnyAdapter, x: &Matrix, step: f64) -> Result<GroupErrors> {
    let analytic = analytic_gradients(adapter, x)?;
    let numeric = numeric_gradients(adapter, x, step)?;
    Ok(compare(&analytic, &numeric))
}
