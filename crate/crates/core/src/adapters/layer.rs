use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::gate::gate_forward;
use super::{Adapter, AdapterConfig, AdapterKind};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Plain low-rank adapter: `y = W·x + (α/r)·B·A·x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    base: Matrix,
    a: Matrix,
    b: Matrix,
    config: AdapterConfig,
}

/// Low-rank adapter with a token-wise diagonal gate:
/// `y = W·x + (α/r)·B·Diag(σ(x))·A·x`.
#[derive(Clone, Debug, PartialEq)]
pub struct TopLoraAdapter {
    base: Matrix,
    a: Matrix,
    b: Matrix,
    theta: Matrix,
    config: AdapterConfig,
}

/// Kaiming-uniform with fan-in `cols`: `U[−√(6/cols), +√(6/cols)]`.
fn kaiming_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / cols as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn check_init(config: &AdapterConfig, base: &Matrix) -> Result<()> {
    config.validate()?;
    let (m, n) = base.shape();
    if config.rank >= m.min(n) {
        return Err(Error::Config(format!(
            "rank {} must be smaller than min(m, n) = {} for a {m}x{n} weight",
            config.rank,
            m.min(n)
        )));
    }
    base.ensure_finite("base weight")
}

fn check_factors(config: &AdapterConfig, base: &Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    config.validate()?;
    let r = config.rank;
    if a.rows() != r || a.cols() != base.cols() {
        return Err(Error::shape("factor A", (r, base.cols()), a.shape()));
    }
    if b.cols() != r || b.rows() != base.rows() {
        return Err(Error::shape("factor B", (base.rows(), r), b.shape()));
    }
    Ok(())
}

impl LoraAdapter {
    /// `A` is Kaiming-uniform from `config.seed`, `B = 0`.
    pub fn init(config: AdapterConfig, base: Matrix) -> Result<Self> {
        check_init(&config, &base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let a = kaiming_uniform(&mut rng, config.rank, base.cols());
        let b = Matrix::zeros(base.rows(), config.rank);
        Ok(Self { base, a, b, config })
    }

    pub fn from_parts(config: AdapterConfig, base: Matrix, a: Matrix, b: Matrix) -> Result<Self> {
        check_factors(&config, &base, &a, &b)?;
        Ok(Self { base, a, b, config })
    }

    pub fn set_factors(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        check_factors(&self.config, &self.base, &a, &b)?;
        self.a = a;
        self.b = b;
        Ok(())
    }

    /// `(α/r)·B·A`.
    pub fn delta_weight(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("factor shapes checked at construction")
            .scale(self.config.scaling())
    }
}

impl TopLoraAdapter {
    /// `A` then `Θ` are drawn Kaiming-uniform from `config.seed`; `B = 0`.
    ///
    /// `A` is the first draw from the stream, so a LoRA adapter with the same
    /// config and base weight starts from the identical `A`.
    pub fn init(config: AdapterConfig, base: Matrix) -> Result<Self> {
        check_init(&config, &base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let a = kaiming_uniform(&mut rng, config.rank, base.cols());
        let theta = kaiming_uniform(&mut rng, config.rank, base.cols());
        let b = Matrix::zeros(base.rows(), config.rank);
        Ok(Self {
            base,
            a,
            b,
            theta,
            config,
        })
    }

    pub fn from_parts(
        config: AdapterConfig,
        base: Matrix,
        a: Matrix,
        b: Matrix,
        theta: Matrix,
    ) -> Result<Self> {
        check_factors(&config, &base, &a, &b)?;
        if theta.shape() != a.shape() {
            return Err(Error::shape("gate projection", a.shape(), theta.shape()));
        }
        Ok(Self {
            base,
            a,
            b,
            theta,
            config,
        })
    }

    pub fn set_theta(&mut self, theta: Matrix) -> Result<()> {
        if theta.shape() != self.a.shape() {
            return Err(Error::shape("gate projection", self.a.shape(), theta.shape()));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn set_factors(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        check_factors(&self.config, &self.base, &a, &b)?;
        self.a = a;
        self.b = b;
        Ok(())
    }

    /// Diagonal of the gate `Σ_x` for a single token.
    pub fn sigma_of(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.base.cols() {
            return Err(Error::shape("gate input", self.theta.shape(), (x.len(), 1)));
        }
        let trace = gate_forward(&self.theta, x.as_slice(), &self.config);
        Vector::new(trace.sigma)
    }

    /// The token's weight update `(α/r)·B·Diag(σ(x))·A`.
    pub fn effective_weight(&self, x: &Vector) -> Result<Matrix> {
        let sigma = self.sigma_of(x)?;
        let s = self.config.scaling();
        let mut scaled_b = self.b.clone();
        for i in 0..scaled_b.rows() {
            for (k, sk) in sigma.as_slice().iter().enumerate() {
                let v = scaled_b.get(i, k);
                scaled_b.set(i, k, s * v * sk);
            }
        }
        scaled_b.matmul(&self.a)
    }

    /// The same factors without the gate.
    pub fn to_lora(&self) -> LoraAdapter {
        LoraAdapter {
            base: self.base.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
            config: self.config.clone(),
        }
    }
}

impl Adapter for LoraAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Lora
    }
    fn config(&self) -> &AdapterConfig {
        &self.config
    }
    fn base(&self) -> &Matrix {
        &self.base
    }
    fn lora_a(&self) -> &Matrix {
        &self.a
    }
    fn lora_b(&self) -> &Matrix {
        &self.b
    }
    fn theta(&self) -> Option<&Matrix> {
        None
    }
    fn trainable(&self) -> Vec<&Matrix> {
        vec![&self.a, &self.b]
    }
    fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.a, &mut self.b]
    }
    fn merge(&self) -> Result<Matrix> {
        self.base.add(&self.delta_weight())
    }
}

impl Adapter for TopLoraAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::TopLora
    }
    fn config(&self) -> &AdapterConfig {
        &self.config
    }
    fn base(&self) -> &Matrix {
        &self.base
    }
    fn lora_a(&self) -> &Matrix {
        &self.a
    }
    fn lora_b(&self) -> &Matrix {
        &self.b
    }
    fn theta(&self) -> Option<&Matrix> {
        Some(&self.theta)
    }
    fn trainable(&self) -> Vec<&Matrix> {
        vec![&self.a, &self.b, &self.theta]
    }
    fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.a, &mut self.b, &mut self.theta]
    }
    fn merge(&self) -> Result<Matrix> {
        Err(Error::Unmergeable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn test_config(rank: usize) -> AdapterConfig {
        AdapterConfig::new(rank).with_dropout(0.0)
    }

    /// Random gated instance with every factor nonzero.
    fn random_toplora(seed: u64, m: usize, n: usize, r: usize) -> TopLoraAdapter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = gaussian(&mut rng, m, n);
        let a = gaussian(&mut rng, r, n);
        let b = gaussian(&mut rng, m, r);
        let theta = gaussian(&mut rng, r, n);
        TopLoraAdapter::from_parts(test_config(r), base, a, b, theta).unwrap()
    }

    /// Column-by-column dense oracle `W·x + s·B·Diag(σ)·A·x`, with `σ`
    /// recomputed from scratch (exp of RMS-normalized `Θ·x`).
    fn dense_oracle(ad: &TopLoraAdapter, x: &Matrix) -> Matrix {
        let s = ad.config.scaling();
        let cols: Vec<Vector> = (0..x.cols())
            .map(|j| {
                let xj = x.column(j);
                let u = ad.theta.mul_vec(&xj).unwrap().into_vec();
                let ms = u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64;
                let rho = (ms + ad.config.rmsnorm_eps).sqrt();
                let sigma = Vector::new(u.iter().map(|v| (v / rho).exp()).collect()).unwrap();
                let delta = ad
                    .b
                    .matmul(&Matrix::diag(&sigma))
                    .unwrap()
                    .matmul(&ad.a)
                    .unwrap()
                    .scale(s);
                let w = ad.base.add(&delta).unwrap();
                w.mul_vec(&xj).unwrap()
            })
            .collect();
        Matrix::from_columns(&cols).unwrap()
    }

    #[test]
    fn fresh_adapters_reproduce_base_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = gaussian(&mut rng, 5, 7);
        let x = gaussian(&mut rng, 7, 4);
        let expected = base.matmul(&x).unwrap();
        let lora = LoraAdapter::init(test_config(2), base.clone()).unwrap();
        let top = TopLoraAdapter::init(test_config(2), base).unwrap();
        assert_eq!(lora.forward(&x).unwrap(), expected);
        assert_eq!(top.forward(&x).unwrap(), expected);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let base = Matrix::identity(6);
        let a1 = TopLoraAdapter::init(test_config(2).with_seed(9), base.clone()).unwrap();
        let a2 = TopLoraAdapter::init(test_config(2).with_seed(9), base.clone()).unwrap();
        let a3 = TopLoraAdapter::init(test_config(2).with_seed(10), base.clone()).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1.theta, a3.theta);
        assert_eq!(a1.theta.shape(), a1.a.shape());
        assert_ne!(a1.theta, a1.a);

        let l = LoraAdapter::init(test_config(2).with_seed(9), base).unwrap();
        assert_eq!(l.a, a1.a);
    }

    #[test]
    fn kaiming_bound_for_wide_input() {
        let base = Matrix::zeros(16, 768);
        let ad = TopLoraAdapter::init(test_config(8), base).unwrap();
        let bound = (6.0_f64 / 768.0).sqrt();
        assert!((bound - 0.08839).abs() < 1e-5);
        assert!(ad.a.max_abs() <= bound);
        assert!(ad.theta.max_abs() <= bound);
        // Not degenerate: the draws span most of the interval.
        assert!(ad.a.max_abs() > 0.9 * bound);
    }

    #[test]
    fn init_rejects_rank_too_large() {
        let err = LoraAdapter::init(test_config(4), Matrix::zeros(4, 9)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(TopLoraAdapter::init(test_config(3), Matrix::zeros(4, 9)).is_ok());
    }

    #[test]
    fn sigma_identity_when_theta_zero() {
        let mut ad = random_toplora(2, 3, 4, 2);
        ad.set_theta(Matrix::zeros(2, 4)).unwrap();
        let x = Vector::new(vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(ad.sigma_of(&x).unwrap().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn sigma_without_rmsnorm() {
        // Θ·x = [0.5, -0.5]
        let theta = Matrix::from_rows(&[[0.5, 0.0], [0.0, -0.5]]).unwrap();
        let cfg = AdapterConfig {
            use_rmsnorm: false,
            ..test_config(2)
        };
        let ad = TopLoraAdapter::from_parts(
            cfg,
            Matrix::zeros(3, 2),
            Matrix::zeros(2, 2),
            Matrix::zeros(3, 2),
            theta,
        )
        .unwrap();
        let sigma = ad.sigma_of(&Vector::new(vec![1.0, 1.0]).unwrap()).unwrap();
        assert!((sigma.get(0) - 1.648_721_270_700_128).abs() < 1e-14);
        assert!((sigma.get(1) - 0.606_530_659_712_633).abs() < 1e-14);
    }

    #[test]
    fn sigma_with_rmsnorm() {
        // Θ·x = [3, 4]; ε is negligible against mean square 12.5.
        let theta = Matrix::from_rows(&[[3.0, 0.0], [0.0, 4.0]]).unwrap();
        let cfg = AdapterConfig {
            rmsnorm_eps: 1e-300,
            ..test_config(2)
        };
        let ad = TopLoraAdapter::from_parts(
            cfg,
            Matrix::zeros(3, 2),
            Matrix::zeros(2, 2),
            Matrix::zeros(3, 2),
            theta,
        )
        .unwrap();
        let sigma = ad.sigma_of(&Vector::new(vec![1.0, 1.0]).unwrap()).unwrap();
        assert!((sigma.get(0) - 2.336_205_746_321_758).abs() < 1e-12);
        assert!((sigma.get(1) - 3.099_903_090_577_643).abs() < 1e-12);
    }

    #[test]
    fn no_exp_gate_is_one_plus_h() {
        let theta = Matrix::from_rows(&[[0.25, 0.0], [0.0, -0.75]]).unwrap();
        let cfg = AdapterConfig {
            use_rmsnorm: false,
            use_exp: false,
            ..test_config(2)
        };
        let ad = TopLoraAdapter::from_parts(
            cfg,
            Matrix::zeros(3, 2),
            Matrix::zeros(2, 2),
            Matrix::zeros(3, 2),
            theta,
        )
        .unwrap();
        let sigma = ad.sigma_of(&Vector::new(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(sigma.as_slice(), &[1.25, 0.25]);
    }

    #[test]
    fn sigma_shape_error() {
        let ad = random_toplora(3, 3, 4, 2);
        assert!(matches!(
            ad.sigma_of(&Vector::zeros(3)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let ad = random_toplora(4, 3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = gaussian(&mut rng, 4, 2);
        let y = ad.forward(&x).unwrap();
        let oracle = dense_oracle(&ad, &x);
        assert!(y.relative_error(&oracle, 1e-300).unwrap() < 1e-13);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let ad = random_toplora(5, 3, 4, 2);
        assert!(matches!(
            ad.forward(&Matrix::zeros(3, 2)),
            Err(Error::Shape { .. })
        ));
        let mut x = Matrix::zeros(4, 2);
        x.as_mut_slice()[3] = f64::NAN;
        assert!(matches!(ad.forward(&x), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_theta_reverts_to_lora() {
        let mut ad = random_toplora(6, 5, 6, 3);
        ad.set_theta(Matrix::zeros(3, 6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let x = gaussian(&mut rng, 6, 5);
        let top = ad.forward(&x).unwrap();
        let lora = ad.to_lora().forward(&x).unwrap();
        assert!(top.relative_error(&lora, 1e-300).unwrap() <= 1e-12);
    }

    #[test]
    fn merge_contract() {
        let ad = random_toplora(7, 4, 5, 2);
        assert!(matches!(ad.merge(), Err(Error::Unmergeable)));
        assert!(ad.merge().unwrap_err().to_string().contains("token-wise"));

        let lora = ad.to_lora();
        let merged = lora.merge().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = gaussian(&mut rng, 5, 3);
        let direct = lora.forward(&x).unwrap();
        let via_merge = merged.matmul(&x).unwrap();
        assert!(via_merge.relative_error(&direct, 1e-300).unwrap() <= 1e-12);

        let fresh = LoraAdapter::init(test_config(2), lora.base.clone()).unwrap();
        assert_eq!(fresh.merge().unwrap(), lora.base);
    }

    #[test]
    fn effective_weight_consistency() {
        let ad = random_toplora(8, 4, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let x = gaussian(&mut rng, 6, 1);
        let xv = x.column(0);
        let w_eff = ad.effective_weight(&xv).unwrap();
        let path = ad.forward(&x).unwrap().sub(&ad.base.matmul(&x).unwrap()).unwrap();
        let via_eff = w_eff.matmul(&x).unwrap();
        assert!(via_eff.relative_error(&path, 1e-300).unwrap() <= 1e-12);
        assert!(numerical_rank(&w_eff) <= 2);

        let mut flat = ad.clone();
        flat.set_theta(Matrix::zeros(2, 6)).unwrap();
        let expected = flat.to_lora().delta_weight();
        assert!(flat.effective_weight(&xv).unwrap().relative_error(&expected, 1e-300).unwrap() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let ad = random_toplora(9, 3, 4, 2);
        let x = gaussian(&mut ChaCha8Rng::seed_from_u64(90), 4, 3);
        let g = ad.backward(&x, &Matrix::zeros(3, 3)).unwrap();
        assert_eq!(g.d_a, Matrix::zeros(2, 4));
        assert_eq!(g.d_b, Matrix::zeros(3, 2));
        assert_eq!(g.d_theta, Some(Matrix::zeros(2, 4)));
        assert_eq!(g.d_x, Matrix::zeros(4, 3));
    }

    #[test]
    fn zero_theta_factor_gradients_match_lora() {
        let mut ad = random_toplora(10, 3, 4, 2);
        ad.set_theta(Matrix::zeros(2, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let x = gaussian(&mut rng, 4, 3);
        let up = gaussian(&mut rng, 3, 3);
        let gt = ad.backward(&x, &up).unwrap();
        let gl = ad.to_lora().backward(&x, &up).unwrap();
        assert!(gl.d_theta.is_none());
        assert!(gt.d_a.relative_error(&gl.d_a, 1e-300).unwrap() <= 1e-12);
        assert!(gt.d_b.relative_error(&gl.d_b, 1e-300).unwrap() <= 1e-12);
    }

    #[test]
    fn backward_rejects_bad_upstream() {
        let ad = random_toplora(11, 3, 4, 2);
        let x = Matrix::zeros(4, 3);
        assert!(matches!(
            ad.backward(&x, &Matrix::zeros(3, 2)),
            Err(Error::Shape { .. })
        ));
    }
}
