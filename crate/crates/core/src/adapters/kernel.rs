//! Shared forward/backward arithmetic for both adapter kinds.
//!
//! Plain LoRA is the gated path with `σ ≡ 1` and no gate parameters.

use super::gate::{gate_backward, gate_forward};
use super::{Adapter, DropoutMask, GradientSet};
use crate::error::{Error, Result};
use crate::linalg::{mul_vec_into, mul_vec_transposed_acc, rank_one_acc, Matrix};

fn check_inputs<A: Adapter + ?Sized>(
    adapter: &A,
    x: &Matrix,
    mask: Option<&DropoutMask>,
) -> Result<()> {
    let n = adapter.base().cols();
    if x.rows() != n {
        return Err(Error::shape("adapter input", adapter.base().shape(), x.shape()));
    }
    x.ensure_finite("input")?;
    if let Some(mask) = mask {
        if mask.as_matrix().shape() != x.shape() {
            return Err(Error::shape("dropout mask", mask.as_matrix().shape(), x.shape()));
        }
    }
    Ok(())
}

/// Token `j` after dropout, written into `buf`.
fn dropped_token(x: &Matrix, mask: Option<&DropoutMask>, j: usize, buf: &mut [f64]) {
    x.column_into(j, buf);
    if let Some(mask) = mask {
        let m = mask.as_matrix();
        for (i, v) in buf.iter_mut().enumerate() {
            *v *= m.get(i, j);
        }
    }
}

pub(crate) fn forward<A: Adapter + ?Sized>(
    adapter: &A,
    x: &Matrix,
    mask: Option<&DropoutMask>,
) -> Result<Matrix> {
    check_inputs(adapter, x, mask)?;
    let cfg = adapter.config();
    let (a, b) = (adapter.lora_a(), adapter.lora_b());
    let s = cfg.scaling();
    let (n, r) = (a.cols(), a.rows());

    let mut y = adapter.base().matmul(x)?;
    let mut xt = vec![0.0; n];
    let mut z = vec![0.0; r];
    let mut delta = vec![0.0; b.rows()];
    for j in 0..x.cols() {
        dropped_token(x, mask, j, &mut xt);
        mul_vec_into(a, &xt, &mut z);
        if let Some(theta) = adapter.theta() {
            let trace = gate_forward(theta, &xt, cfg);
            for (zi, si) in z.iter_mut().zip(&trace.sigma) {
                *zi *= si;
            }
        }
        mul_vec_into(b, &z, &mut delta);
        for (i, d) in delta.iter().enumerate() {
            let cur = y.get(i, j);
            y.set(i, j, cur + s * d);
        }
    }
    Ok(y)
}

pub(crate) fn backward<A: Adapter + ?Sized>(
    adapter: &A,
    x: &Matrix,
    upstream: &Matrix,
    mask: Option<&DropoutMask>,
) -> Result<GradientSet> {
    check_inputs(adapter, x, mask)?;
    let base = adapter.base();
    if upstream.shape() != (base.rows(), x.cols()) {
        return Err(Error::shape(
            "upstream gradient",
            (base.rows(), x.cols()),
            upstream.shape(),
        ));
    }
    let cfg = adapter.config();
    let (a, b, theta) = (adapter.lora_a(), adapter.lora_b(), adapter.theta());
    let s = cfg.scaling();
    let (m, n, r) = (b.rows(), a.cols(), a.rows());

    let mut d_a = Matrix::zeros(r, n);
    let mut d_b = Matrix::zeros(m, r);
    let mut d_theta = theta.map(|t| Matrix::zeros(t.rows(), t.cols()));
    let mut d_x = base.transpose().matmul(upstream)?;

    let mut xt = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut z = vec![0.0; r];
    let mut dv = vec![0.0; r];
    let mut dz = vec![0.0; r];
    let mut d_sigma = vec![0.0; r];
    let mut dxt = vec![0.0; n];

    for j in 0..x.cols() {
        upstream.column_into(j, &mut g);
        dropped_token(x, mask, j, &mut xt);
        mul_vec_into(a, &xt, &mut z);
        let trace = theta.map(|t| gate_forward(t, &xt, cfg));

        // v = σ ⊙ z
        let v: Vec<f64> = match &trace {
            Some(tr) => z.iter().zip(&tr.sigma).map(|(zi, si)| zi * si).collect(),
            None => z.clone(),
        };

        let sg: Vec<f64> = g.iter().map(|gi| s * gi).collect();
        rank_one_acc(&mut d_b, &sg, &v);

        dv.fill(0.0);
        mul_vec_transposed_acc(b, &sg, &mut dv);

        match &trace {
            Some(tr) => {
                for k in 0..r {
                    dz[k] = dv[k] * tr.sigma[k];
                    d_sigma[k] = dv[k] * z[k];
                }
            }
            None => dz.copy_from_slice(&dv),
        }
        rank_one_acc(&mut d_a, &dz, &xt);

        dxt.fill(0.0);
        mul_vec_transposed_acc(a, &dz, &mut dxt);

        if let (Some(tr), Some(theta), Some(dt)) = (&trace, theta, d_theta.as_mut()) {
            let du = gate_backward(tr, &d_sigma, cfg);
            rank_one_acc(dt, &du, &xt);
            mul_vec_transposed_acc(theta, &du, &mut dxt);
        }

        // Chain through the dropout multipliers.
        if let Some(mask) = mask {
            let mm = mask.as_matrix();
            for (i, d) in dxt.iter_mut().enumerate() {
                *d *= mm.get(i, j);
            }
        }
        for (i, d) in dxt.iter().enumerate() {
            let cur = d_x.get(i, j);
            d_x.set(i, j, cur + d);
        }
    }

    Ok(GradientSet {
        d_a,
        d_b,
        d_theta,
        d_x,
    })
}
