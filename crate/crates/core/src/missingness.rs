//! Logistic observation model `P(D = 1 | x) = logistic(b0 + b1 x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{logistic, softplus};
use crate::tensor::{DenseTensor3, Mask};

/// Parameters `(b0, b1)` of the observation model. `b1 = 0` is MCAR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessParams {
    pub b0: f64,
    pub b1: f64,
}

impl MissingnessParams {
    pub fn new(b0: f64, b1: f64) -> Result<Self> {
        if !(b0.is_finite() && b1.is_finite()) {
            return Err(Error::InvalidValue(format!("missingness parameters must be finite: ({b0}, {b1})")));
        }
        Ok(Self { b0, b1 })
    }

    pub fn mcar(b0: f64) -> Result<Self> {
        Self::new(b0, 0.0)
    }

    #[inline]
    pub fn linear_predictor(&self, x: f64) -> f64 {
        self.b0 + self.b1 * x
    }
}

/// Observation probability, kept strictly inside (0, 1).
pub fn obs_prob(theta: &MissingnessParams, x: f64) -> f64 {
    logistic(theta.linear_predictor(x)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn check_shapes(x_full: &DenseTensor3, mask: &Mask) -> Result<()> {
    if x_full.dims() != mask.dims() {
        return Err(Error::Dimension(format!(
            "tensor dims {:?} != mask dims {:?}",
            x_full.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

/// `sum_{D=1} eta - sum_all softplus(eta)` with `eta = b0 + b1 x`.
pub fn mask_loglik(theta: &MissingnessParams, x_full: &DenseTensor3, mask: &Mask) -> Result<f64> {
    check_shapes(x_full, mask)?;
    Ok(x_full
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .map(|(&x, &d)| {
            let eta = theta.linear_predictor(x);
            if d {
                eta - softplus(eta)
            } else {
                -softplus(eta)
            }
        })
        .sum())
}

/// Gradient of [`mask_loglik`] in `(b0, b1)`: `sum (D - P) (1, x)`.
pub fn mask_loglik_grad_theta(theta: &MissingnessParams, x_full: &DenseTensor3, mask: &Mask) -> Result<[f64; 2]> {
    check_shapes(x_full, mask)?;
    let mut g = [0.0; 2];
    for (&x, &d) in x_full.as_slice().iter().zip(mask.as_slice()) {
        let r = f64::from(u8::from(d)) - logistic(theta.linear_predictor(x));
        g[0] += r;
        g[1] += r * x;
    }
    Ok(g)
}

/// Hessian of [`mask_loglik`] in `(b0, b1)`: `-sum P(1-P) (1, x)(1, x)^T`.
pub fn mask_loglik_hess_theta(
    theta: &MissingnessParams,
    x_full: &DenseTensor3,
    mask: &Mask,
) -> Result<[[f64; 2]; 2]> {
    check_shapes(x_full, mask)?;
    let (mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0);
    for &x in x_full.as_slice() {
        let p = logistic(theta.linear_predictor(x));
        let wgt = p * (1.0 - p);
        h00 -= wgt;
        h01 -= wgt * x;
        h11 -= wgt * x * x;
    }
    Ok([[h00, h01], [h01, h11]])
}

/// Smallest slice means of `P` and of `P (1 - P)` over all three modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceDiagnostics {
    pub p_bar: f64,
    pub q_bar: f64,
}

fn min_slice_mean(dims: [usize; 3], values: &[f64]) -> f64 {
    let [d1, d2, d3] = dims;
    let mut sums = [vec![0.0; d1], vec![0.0; d2], vec![0.0; d3]];
    for i in 0..d1 {
        for j in 0..d2 {
            for k in 0..d3 {
                let v = values[(i * d2 + j) * d3 + k];
                sums[0][i] += v;
                sums[1][j] += v;
                sums[2][k] += v;
            }
        }
    }
    let counts = [d2 * d3, d1 * d3, d1 * d2];
    sums.iter()
        .zip(counts)
        .flat_map(|(s, c)| s.iter().map(move |v| v / c as f64))
        .fold(f64::INFINITY, f64::min)
}

pub fn slice_diagnostics(p_full: &DenseTensor3) -> Result<SliceDiagnostics> {
    if let Some(&p) = p_full.as_slice().iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::ProbabilityRange(p));
    }
    let q: Vec<f64> = p_full.as_slice().iter().map(|p| p * (1.0 - p)).collect();
    Ok(SliceDiagnostics {
        p_bar: min_slice_mean(p_full.dims(), p_full.as_slice()),
        q_bar: min_slice_mean(p_full.dims(), &q),
    })
}

/// Observation-probability tensor implied by `theta` at natural parameters `x`.
pub fn probability_tensor(theta: &MissingnessParams, x_full: &DenseTensor3) -> Result<DenseTensor3> {
    x_full.map(|x| obs_prob(theta, x))
}
