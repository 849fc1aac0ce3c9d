//! Sample-splitting test of `b1 = 0` (missing completely at random) against
//! a value-dependent observation probability.
//!
//! The index grid is split into `A1` and `A2`. The tensor is estimated from
//! `A1` alone; a two-parameter logistic regression of the mask on the
//! estimated natural parameters is then fitted on `A2`.

use nalgebra::{Matrix2, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::estimator::{fit_problem, FitOptions};
use crate::family::Family;
use crate::likelihood::{mask_terms, Problem};
use crate::missingness::MissingnessParams;
use crate::tensor::{multi_index, num_entries, Dims, MaskedData};

/// Smallest second-stage sample accepted.
pub const MIN_A2: usize = 8;

const MAX_NEWTON_ITERS: usize = 100;
const GRAD_TOL: f64 = 1e-10;
const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub a1: Vec<[usize; 3]>,
    pub a2: Vec<[usize; 3]>,
    pub seed: u64,
}

/// Draws `a2_size` indices uniformly without replacement as `A2`; the rest form `A1`.
pub fn split_indices(dims: Dims, a2_size: usize, seed: u64) -> Result<SplitPlan> {
    let total = num_entries(dims);
    if a2_size < MIN_A2 || a2_size >= total {
        return Err(Error::Size(format!("|A2| = {a2_size} must lie in {MIN_A2}..{total}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, total, a2_size).into_vec();
    chosen.sort_unstable();
    let mut in_a2 = vec![false; total];
    for &e in &chosen {
        in_a2[e] = true;
    }
    let a2 = chosen.iter().map(|&e| multi_index(dims, e)).collect();
    let a1 = (0..total).filter(|&e| !in_a2[e]).map(|e| multi_index(dims, e)).collect();
    Ok(SplitPlan { a1, a2, seed })
}

/// Maximum-likelihood fit of `P(d = 1) = logistic(b0 + b1 x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticFit {
    pub theta: MissingnessParams,
    /// Observed information `sum w (1, x)(1, x)^T` at the estimate.
    pub info: [[f64; 2]; 2],
    pub iterations: usize,
}

fn logistic_terms(x: &[f64], d: &[bool], b: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let (mut f, mut g, mut info) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
    for (&xi, &di) in x.iter().zip(d) {
        let (mf, mg, mh) = mask_terms(di, b[0] + b[1] * xi);
        f += mf;
        g[0] += mg;
        g[1] += mg * xi;
        info[0][0] -= mh;
        info[0][1] -= mh * xi;
        info[1][1] -= mh * xi * xi;
    }
    info[1][0] = info[0][1];
    (f, g, info)
}

/// Newton-Raphson for the two-parameter logistic regression of `d` on `x`.
pub fn logistic_fit_2param(x: &[f64], d: &[bool]) -> Result<LogisticFit> {
    if x.len() != d.len() {
        return Err(Error::Dimension(format!("{} covariates for {} responses", x.len(), d.len())));
    }
    if x.len() < MIN_A2 {
        return Err(Error::Size(format!("need at least {MIN_A2} points, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite covariate".into()));
    }
    let ones = d.iter().filter(|&&v| v).count();
    if ones == 0 || ones == d.len() {
        return Err(Error::DegenerateResponse);
    }
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= 1e-12 * (1.0 + hi.abs().max(lo.abs())) {
        return Err(Error::CollinearDesign);
    }

    let rate = ones as f64 / d.len() as f64;
    let mut b = [(rate / (1.0 - rate)).ln(), 0.0];
    let mut cur = logistic_terms(x, d, b);
    for it in 0..MAX_NEWTON_ITERS {
        let (f, g, info) = cur;
        let gnorm = g[0].hypot(g[1]);
        let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
        if gnorm < GRAD_TOL {
            return Ok(LogisticFit { theta: MissingnessParams { b0: b[0], b1: b[1] }, info, iterations: it });
        }
        if !(det > 0.0) {
            return Err(if b[0].abs().max(b[1].abs()) > SEPARATION_BOUND {
                Error::Separation
            } else {
                Error::NumericalFailure("singular information in logistic fit".into())
            });
        }
        let step = [(info[1][1] * g[0] - info[0][1] * g[1]) / det, (info[0][0] * g[1] - info[1][0] * g[0]) / det];
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = [b[0] + t * step[0], b[1] + t * step[1]];
            let v = logistic_terms(x, d, cand);
            if v.0 >= f {
                accepted = Some((cand, v));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, v)) = accepted else {
            break;
        };
        let moved = (cand[0] - b[0]).abs().max((cand[1] - b[1]).abs());
        b = cand;
        cur = v;
        if b[0].abs().max(b[1].abs()) > SEPARATION_BOUND {
            let g = cur.1;
            if g[0].hypot(g[1]) >= GRAD_TOL {
                return Err(Error::Separation);
            }
        }
        // the gradient can stall just above the absolute threshold from rounding on large samples
        if moved <= 1e-14 * (1.0 + b[0].abs().max(b[1].abs())) {
            return Ok(LogisticFit { theta: MissingnessParams { b0: b[0], b1: b[1] }, info: cur.2, iterations: it + 1 });
        }
    }
    let (_, g, info) = cur;
    let scale = x.len() as f64;
    if g[0].hypot(g[1]) <= 1e-8 * scale {
        return Ok(LogisticFit {
            theta: MissingnessParams { b0: b[0], b1: b[1] },
            info,
            iterations: MAX_NEWTON_ITERS,
        });
    }
    if b[0].abs().max(b[1].abs()) > SEPARATION_BOUND {
        Err(Error::Separation)
    } else {
        Err(Error::NumericalFailure("logistic Newton iterations did not converge".into()))
    }
}

/// Second-stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub b0_hat: f64,
    pub b1_hat: f64,
    pub info: [[f64; 2]; 2],
    /// `(info^{1/2})_{22} * b1_hat`, the decision statistic.
    pub z: f64,
    pub p_value: f64,
    /// `b1_hat / sqrt((info^{-1})_{22})`, reported alongside.
    pub wald_z: f64,
    pub wald_p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    pub a2_size: usize,
}

impl TestResult {
    pub fn rejects(&self) -> bool {
        self.p_value < self.alpha
    }
}

/// Symmetric square root of a 2x2 positive-definite matrix and of its inverse.
fn sqrt_and_inv_sqrt(m: [[f64; 2]; 2]) -> Result<(Matrix2<f64>, Matrix2<f64>)> {
    let mat = Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]);
    let eig = SymmetricEigen::new(mat);
    if !(eig.eigenvalues.min() > 0.0) {
        return Err(Error::NumericalFailure(format!("information matrix is not positive definite: {m:?}")));
    }
    let q = eig.eigenvectors;
    let root = q * Matrix2::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * q.transpose();
    let inv_root = q * Matrix2::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * q.transpose();
    Ok((root, inv_root))
}

fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Logistic fit on the second-stage sample and the resulting test of `b1 = 0`.
///
/// Only the estimated natural parameters and mask bits at `A2` are passed in.
pub fn wald_test(x_a2: &[f64], d_a2: &[bool], alpha: f64) -> Result<TestResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidValue(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let fit = logistic_fit_2param(x_a2, d_a2)?;
    let (root, inv_root) = sqrt_and_inv_sqrt(fit.info)?;
    let b1 = fit.theta.b1;
    let z = root[(1, 1)] * b1;
    let det = fit.info[0][0] * fit.info[1][1] - fit.info[0][1] * fit.info[1][0];
    let var_b1 = fit.info[0][0] / det;
    let wald_z = b1 / var_b1.sqrt();
    let crit = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - alpha / 2.0);
    let half = crit * inv_root[(1, 1)];
    Ok(TestResult {
        b0_hat: fit.theta.b0,
        b1_hat: b1,
        info: fit.info,
        z,
        p_value: two_sided_p(z),
        wald_z,
        wald_p_value: two_sided_p(wald_z),
        ci_lower: b1 - half,
        ci_upper: b1 + half,
        alpha,
        a2_size: x_a2.len(),
    })
}

/// Seed of the index split, derived from the fit seed on a separate stream.
pub fn split_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Full three-step procedure with a given split.
pub fn test_mnar_with_plan(
    data: &MaskedData,
    family: Family,
    rank: usize,
    opts: &FitOptions,
    plan: &SplitPlan,
    alpha: f64,
) -> Result<TestResult> {
    let problem = Problem::excluding(data, &plan.a2)?;
    let report = fit_problem(&problem, rank, family, opts)?;
    let xhat = report.state.cp.reconstruct_full();
    let mut x_a2 = Vec::with_capacity(plan.a2.len());
    let mut d_a2 = Vec::with_capacity(plan.a2.len());
    for &idx in &plan.a2 {
        x_a2.push(xhat.get(idx)?);
        d_a2.push(data.mask().get(idx)?);
    }
    wald_test(&x_a2, &d_a2, alpha)
}

/// Splits the grid, fits on `A1` and tests on `A2`.
pub fn test_mnar(
    data: &MaskedData,
    family: Family,
    rank: usize,
    opts: &FitOptions,
    a2_size: usize,
    alpha: f64,
) -> Result<TestResult> {
    let plan = split_indices(data.dims(), a2_size, split_seed(opts.seed))?;
    test_mnar_with_plan(data, family, rank, opts, &plan, alpha)
}
