//! Token-wise diagonal gate `σ = gate(clamp(rmsnorm(Θ·x)))` and its backward pass.

use super::AdapterConfig;
use crate::linalg::{mul_vec_into, Matrix, Vector};

/// Root-mean-square normalization without a learnable gain:
/// `out_i = v_i / √(mean_j(v_j²) + eps)`.
///
/// A zero vector with `eps = 0` maps to zeros.
pub fn rmsnorm(v: &Vector, eps: f64) -> Vector {
    let (out, _) = rmsnorm_slice(v.as_slice(), eps);
    Vector::from_vec_unchecked(out)
}

pub(crate) fn rms_denominator(v: &[f64], eps: f64) -> f64 {
    let mean_sq = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    (mean_sq + eps).sqrt()
}

fn rmsnorm_slice(v: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let rho = rms_denominator(v, eps);
    if rho == 0.0 {
        return (vec![0.0; v.len()], rho);
    }
    (v.iter().map(|x| x / rho).collect(), rho)
}

/// Intermediate values of one token's gate, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct GateTrace {
    /// Pre-normalization projection `Θ·x`.
    pub u: Vec<f64>,
    /// RMS denominator; `None` when normalization is disabled.
    pub rho: Option<f64>,
    /// Coordinates where the clamp was active.
    pub clamped: Vec<bool>,
    pub sigma: Vec<f64>,
}

pub(crate) fn gate_forward(theta: &Matrix, x: &[f64], cfg: &AdapterConfig) -> GateTrace {
    let r = theta.rows();
    let mut u = vec![0.0; r];
    mul_vec_into(theta, x, &mut u);

    let (mut h, rho) = if cfg.use_rmsnorm {
        let (h, rho) = rmsnorm_slice(&u, cfg.rmsnorm_eps);
        (h, Some(rho))
    } else {
        (u.clone(), None)
    };

    let mut clamped = vec![false; r];
    for (hi, c) in h.iter_mut().zip(clamped.iter_mut()) {
        if hi.abs() > cfg.clamp_bound {
            *hi = hi.signum() * cfg.clamp_bound;
            *c = true;
        }
    }

    let sigma = if cfg.use_exp {
        h.iter().map(|v| v.exp()).collect()
    } else {
        h.iter().map(|v| 1.0 + v).collect()
    };

    GateTrace {
        u,
        rho,
        clamped,
        sigma,
    }
}

/// Maps `∂L/∂σ` back to `∂L/∂u` where `u = Θ·x`.
pub(crate) fn gate_backward(trace: &GateTrace, d_sigma: &[f64], cfg: &AdapterConfig) -> Vec<f64> {
    let r = trace.u.len();
    let mut dh: Vec<f64> = if cfg.use_exp {
        d_sigma.iter().zip(&trace.sigma).map(|(d, s)| d * s).collect()
    } else {
        d_sigma.to_vec()
    };
    for (d, &c) in dh.iter_mut().zip(&trace.clamped) {
        if c {
            *d = 0.0;
        }
    }

    match trace.rho {
        None => dh,
        Some(0.0) => vec![0.0; r],
        Some(rho) => {
            // ∂h_i/∂u_j = δ_ij/ρ − u_i·u_j/(r·ρ³)
            let proj: f64 = dh.iter().zip(&trace.u).map(|(d, u)| d * u).sum();
            let k = proj / (r as f64 * rho * rho * rho);
            dh.iter()
                .zip(&trace.u)
                .map(|(d, u)| d / rho - u * k)
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Vector {
        Vector::new(data.to_vec()).unwrap()
    }

    #[test]
    fn rmsnorm_zero_vector() {
        assert_eq!(rmsnorm(&v(&[0.0, 0.0, 0.0]), 1e-6).as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(rmsnorm(&v(&[0.0, 0.0]), 0.0).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn rmsnorm_constant_vector() {
        let out = rmsnorm(&v(&[2.5; 4]), 0.0);
        for x in out.as_slice() {
            assert!((x - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsnorm_three_four() {
        // RMS of [3, 4] is √12.5.
        let out = rmsnorm(&v(&[3.0, 4.0]), 0.0);
        let rms = 12.5_f64.sqrt();
        assert!((out.get(0) - 3.0 / rms).abs() < 1e-15);
        assert!((out.get(1) - 4.0 / rms).abs() < 1e-15);
        assert!((out.get(0) - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((out.get(1) - 1.131_370_849_898_476).abs() < 1e-12);
    }

    #[test]
    fn clamp_zeroes_gradient() {
        let cfg = AdapterConfig {
            use_rmsnorm: false,
            ..AdapterConfig::new(2)
        };
        let theta = Matrix::from_rows(&[[100.0], [0.5]]).unwrap();
        let trace = gate_forward(&theta, &[1.0], &cfg);
        assert_eq!(trace.clamped, vec![true, false]);
        assert!((trace.sigma[0] - 30.0_f64.exp()).abs() < 1e-3);
        let du = gate_backward(&trace, &[1.0, 1.0], &cfg);
        assert_eq!(du[0], 0.0);
        assert!((du[1] - 0.5_f64.exp()).abs() < 1e-15);
    }
}
