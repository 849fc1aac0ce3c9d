//! Joint log-likelihood of observed values and the observation mask, with
//! analytic first and second partial derivatives for every parameter block.
//!
//! For entry `e` with natural parameter `x` the contribution is
//!
//! ```text
//! f_e(x) = D_e (y_e x - psi(x)) / phi0 + D_e (b0 + b1 x) - softplus(b0 + b1 x)
//! ```
//!
//! which is concave in `x`. Every CP coordinate enters `x` linearly, so all
//! block derivatives follow from `f_e'` and `f_e''` by the chain rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::missingness::MissingnessParams;
use crate::tensor::{linear_index, num_entries, CPModel, Dims, MaskedData};

/// Full parameter bundle: CP factors, missingness parameters and family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub cp: CPModel,
    pub theta: MissingnessParams,
    pub family: Family,
}

impl ModelState {
    pub fn new(cp: CPModel, theta: MissingnessParams, family: Family) -> Result<Self> {
        family.validate()?;
        Ok(Self { cp, theta, family })
    }

    pub fn dims(&self) -> Dims {
        self.cp.dims()
    }
}

pub(crate) const EXCLUDED: u8 = 0;
pub(crate) const MISSING: u8 = 1;
pub(crate) const OBSERVED: u8 = 2;

/// Dense view of a dataset used by the likelihood and the estimator.
///
/// Entries can be excluded altogether, in which case neither their value nor
/// their mask bit enters the likelihood. This is how a fit is restricted to
/// an index subset.
#[derive(Debug, Clone)]
pub struct Problem {
    dims: Dims,
    y: Vec<f64>,
    status: Vec<u8>,
    n_observed: usize,
    n_included: usize,
}

impl Problem {
    pub fn new(data: &MaskedData) -> Self {
        let dims = data.dims();
        let status = data.mask().as_slice().iter().map(|&d| if d { OBSERVED } else { MISSING }).collect();
        Self {
            dims,
            y: data.dense_values(),
            status,
            n_observed: data.num_observed(),
            n_included: num_entries(dims),
        }
    }

    /// Same as [`Problem::new`] but drops the listed indices entirely.
    pub fn excluding(data: &MaskedData, excluded: &[[usize; 3]]) -> Result<Self> {
        let mut p = Self::new(data);
        for &idx in excluded {
            if idx.iter().zip(p.dims.iter()).any(|(a, d)| a >= d) {
                return Err(Error::Bounds { index: idx, dims: p.dims });
            }
            let e = linear_index(p.dims, idx);
            match p.status[e] {
                OBSERVED => {
                    p.n_observed -= 1;
                    p.n_included -= 1;
                }
                MISSING => p.n_included -= 1,
                _ => {}
            }
            p.status[e] = EXCLUDED;
            p.y[e] = 0.0;
        }
        Ok(p)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_observed(&self) -> usize {
        self.n_observed
    }

    pub fn num_included(&self) -> usize {
        self.n_included
    }

    /// Fraction of included entries that are observed.
    pub fn observation_rate(&self) -> f64 {
        if self.n_included == 0 {
            0.0
        } else {
            self.n_observed as f64 / self.n_included as f64
        }
    }

    pub(crate) fn y(&self) -> &[f64] {
        &self.y
    }

    pub(crate) fn status(&self) -> &[u8] {
        &self.status
    }

    pub fn check_support(&self, family: &Family) -> Result<()> {
        for (&s, &y) in self.status.iter().zip(&self.y) {
            if s == OBSERVED {
                family.check_support(y)?;
            }
        }
        Ok(())
    }

    /// Number of observed entries in every slice of every mode.
    pub fn observed_per_slice(&self) -> [Vec<usize>; 3] {
        let [d1, d2, d3] = self.dims;
        let mut counts = [vec![0; d1], vec![0; d2], vec![0; d3]];
        for (e, &s) in self.status.iter().enumerate() {
            if s == OBSERVED {
                let k = e % d3;
                let j = (e / d3) % d2;
                let i = e / (d2 * d3);
                counts[0][i] += 1;
                counts[1][j] += 1;
                counts[2][k] += 1;
            }
        }
        counts
    }
}

/// Value, first and second derivative in `x` of one entry's contribution.
/// `None` signals a natural parameter outside the family's admissible range.
#[inline]
pub(crate) fn entry_terms(
    family: &Family,
    theta: &MissingnessParams,
    status: u8,
    y: f64,
    x: f64,
) -> Option<(f64, f64, f64)> {
    if status == EXCLUDED {
        return Some((0.0, 0.0, 0.0));
    }
    let observed = status == OBSERVED;
    let (mut f, mut g, mut h) = if observed { family.data_terms(y, x)? } else { (0.0, 0.0, 0.0) };
    let (mf, mg, mh) = mask_terms(observed, theta.linear_predictor(x));
    f += mf;
    g += theta.b1 * mg;
    h += theta.b1 * theta.b1 * mh;
    Some((f, g, h))
}

/// Mask contribution `D eta - softplus(eta)` and its derivatives in `eta`.
#[inline]
pub(crate) fn mask_terms(observed: bool, eta: f64) -> (f64, f64, f64) {
    let e = (-eta.abs()).exp();
    let sp = eta.max(0.0) + (1.0 + e).ln();
    let s = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    let d = if observed { 1.0 } else { 0.0 };
    (d * eta - sp, d - s, -s * (1.0 - s))
}

/// Objective and per-entry derivatives at a given reconstruction.
pub(crate) struct EntryDerivatives {
    pub value: f64,
    pub grad: Vec<f64>,
    pub curv: Vec<f64>,
}

pub(crate) fn entry_derivatives(
    problem: &Problem,
    family: &Family,
    theta: &MissingnessParams,
    xhat: &[f64],
) -> Result<EntryDerivatives> {
    let n = xhat.len();
    let mut out = EntryDerivatives { value: 0.0, grad: vec![0.0; n], curv: vec![0.0; n] };
    for e in 0..n {
        let (f, g, h) = entry_terms(family, theta, problem.status[e], problem.y[e], xhat[e])
            .ok_or(Error::NaturalParameterOverflow { x: xhat[e], cap: family.natural_cap })?;
        out.value += f;
        out.grad[e] = g;
        out.curv[e] = h;
    }
    Ok(out)
}

/// Objective on a precomputed reconstruction; `None` if any entry is
/// outside the admissible natural range.
pub(crate) fn objective_at(
    problem: &Problem,
    family: &Family,
    theta: &MissingnessParams,
    xhat: &[f64],
) -> Option<f64> {
    let mut total = 0.0;
    for ((&s, &y), &x) in problem.status.iter().zip(&problem.y).zip(xhat) {
        total += entry_terms(family, theta, s, y, x)?.0;
    }
    Some(total)
}

fn check_state(state: &ModelState, dims: Dims) -> Result<()> {
    if state.dims() != dims {
        return Err(Error::Dimension(format!("model dims {:?} != data dims {:?}", state.dims(), dims)));
    }
    state.family.validate()
}

/// `l_d` over the entries of a [`Problem`].
pub fn objective_on(state: &ModelState, problem: &Problem) -> Result<f64> {
    check_state(state, problem.dims())?;
    problem.check_support(&state.family)?;
    let xhat = state.cp.reconstruct_full();
    Ok(entry_derivatives(problem, &state.family, &state.theta, xhat.as_slice())?.value)
}

/// Joint log-likelihood `l_d(Theta)` of the observed values and the mask.
pub fn objective(state: &ModelState, data: &MaskedData) -> Result<f64> {
    objective_on(state, &Problem::new(data))
}

/// Gradient of `l_d` with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// `u[r][i]` is the derivative with respect to `u_ri`; likewise for `v`, `w`.
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub theta: [f64; 2],
}

/// Diagonal second derivatives of `l_d` for the CP coordinates plus the full
/// 2x2 missingness block. Cross terms between blocks are not formed.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateHessian {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub theta: [[f64; 2]; 2],
}

struct Evaluated {
    derivs: EntryDerivatives,
    xhat: Vec<f64>,
}

fn evaluate(state: &ModelState, problem: &Problem) -> Result<Evaluated> {
    check_state(state, problem.dims())?;
    problem.check_support(&state.family)?;
    let xhat = state.cp.reconstruct_full().into_vec();
    let derivs = entry_derivatives(problem, &state.family, &state.theta, &xhat)?;
    Ok(Evaluated { derivs, xhat })
}

/// Contracts per-entry weights against the CP structure.
///
/// For each component `r` returns, per mode, `sum weights_e * (coef_e)^power`
/// where `coef_e` is the partial derivative of `x_e` with respect to the
/// coordinate, and for lambda the same with `u_i v_j w_k`.
fn contract(cp: &CPModel, weights: &[f64], power: i32) -> [Vec<Vec<f64>>; 4] {
    let [d1, d2, d3] = cp.dims();
    let rank = cp.rank();
    let mut u = vec![vec![0.0; d1]; rank];
    let mut v = vec![vec![0.0; d2]; rank];
    let mut w = vec![vec![0.0; d3]; rank];
    let mut lam = vec![vec![0.0; 1]; rank];
    for r in 0..rank {
        let l = cp.lambdas()[r];
        let (ur, vr, wr) = (&cp.u()[r], &cp.v()[r], &cp.w()[r]);
        for i in 0..d1 {
            for j in 0..d2 {
                for k in 0..d3 {
                    let wt = weights[(i * d2 + j) * d3 + k];
                    let c = ur[i] * vr[j] * wr[k];
                    let p = |a: f64| if power == 1 { a } else { a * a };
                    u[r][i] += wt * p(l * vr[j] * wr[k]);
                    v[r][j] += wt * p(l * ur[i] * wr[k]);
                    w[r][k] += wt * p(l * ur[i] * vr[j]);
                    lam[r][0] += wt * p(c);
                }
            }
        }
    }
    [u, v, w, lam]
}

fn theta_gradient(problem: &Problem, theta: &MissingnessParams, xhat: &[f64]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for ((&s, &x), _) in problem.status.iter().zip(xhat).zip(0..) {
        if s == EXCLUDED {
            continue;
        }
        let (_, mg, _) = mask_terms(s == OBSERVED, theta.linear_predictor(x));
        g[0] += mg;
        g[1] += mg * x;
    }
    g
}

fn theta_hessian(problem: &Problem, theta: &MissingnessParams, xhat: &[f64]) -> [[f64; 2]; 2] {
    let mut h = [[0.0; 2]; 2];
    for (&s, &x) in problem.status.iter().zip(xhat) {
        if s == EXCLUDED {
            continue;
        }
        let (_, _, mh) = mask_terms(s == OBSERVED, theta.linear_predictor(x));
        h[0][0] += mh;
        h[0][1] += mh * x;
        h[1][1] += mh * x * x;
    }
    h[1][0] = h[0][1];
    h
}

pub fn gradient_on(state: &ModelState, problem: &Problem) -> Result<Gradient> {
    let ev = evaluate(state, problem)?;
    let [u, v, w, lam] = contract(&state.cp, &ev.derivs.grad, 1);
    Ok(Gradient {
        u,
        v,
        w,
        lambda: lam.into_iter().map(|x| x[0]).collect(),
        theta: theta_gradient(problem, &state.theta, &ev.xhat),
    })
}

pub fn gradient(state: &ModelState, data: &MaskedData) -> Result<Gradient> {
    gradient_on(state, &Problem::new(data))
}

pub fn coordinate_hessian_on(state: &ModelState, problem: &Problem) -> Result<CoordinateHessian> {
    let ev = evaluate(state, problem)?;
    let [u, v, w, lam] = contract(&state.cp, &ev.derivs.curv, 2);
    Ok(CoordinateHessian {
        u,
        v,
        w,
        lambda: lam.into_iter().map(|x| x[0]).collect(),
        theta: theta_hessian(problem, &state.theta, &ev.xhat),
    })
}

pub fn coordinate_hessian(state: &ModelState, data: &MaskedData) -> Result<CoordinateHessian> {
    coordinate_hessian_on(state, &Problem::new(data))
}

fn check_component(state: &ModelState, r: usize) -> Result<()> {
    if r >= state.cp.rank() {
        return Err(Error::Dimension(format!("component {r} out of range for rank {}", state.cp.rank())));
    }
    Ok(())
}

fn check_coordinate(state: &ModelState, mode: usize, r: usize, idx: usize) -> Result<()> {
    check_component(state, r)?;
    let d = state.dims()[mode];
    if idx >= d {
        let mut index = [0; 3];
        index[mode] = idx;
        return Err(Error::Bounds { index, dims: state.dims() });
    }
    Ok(())
}

/// Sum of `weights_e * coef_e^power` over the fiber of coordinate
/// `(mode, r, idx)`.
fn fiber_sum(state: &ModelState, weights: &[f64], mode: usize, r: usize, idx: usize, power: i32) -> f64 {
    let cp = &state.cp;
    let [d1, d2, d3] = cp.dims();
    let l = cp.lambdas()[r];
    let (u, v, w) = (&cp.u()[r], &cp.v()[r], &cp.w()[r]);
    let p = |a: f64| if power == 1 { a } else { a * a };
    let mut total = 0.0;
    match mode {
        0 => {
            for j in 0..d2 {
                for k in 0..d3 {
                    total += weights[(idx * d2 + j) * d3 + k] * p(l * v[j] * w[k]);
                }
            }
        }
        1 => {
            for i in 0..d1 {
                for k in 0..d3 {
                    total += weights[(i * d2 + idx) * d3 + k] * p(l * u[i] * w[k]);
                }
            }
        }
        _ => {
            for i in 0..d1 {
                for j in 0..d2 {
                    total += weights[(i * d2 + j) * d3 + idx] * p(l * u[i] * v[j]);
                }
            }
        }
    }
    total
}

fn coordinate_derivative(
    state: &ModelState,
    data: &MaskedData,
    mode: usize,
    r: usize,
    idx: usize,
    order: i32,
) -> Result<f64> {
    check_coordinate(state, mode, r, idx)?;
    let ev = evaluate(state, &Problem::new(data))?;
    let weights = if order == 1 { &ev.derivs.grad } else { &ev.derivs.curv };
    Ok(fiber_sum(state, weights, mode, r, idx, order))
}

/// `d l_d / d u_ri`.
pub fn grad_u_entry(state: &ModelState, data: &MaskedData, r: usize, i: usize) -> Result<f64> {
    coordinate_derivative(state, data, 0, r, i, 1)
}

pub fn grad_v_entry(state: &ModelState, data: &MaskedData, r: usize, j: usize) -> Result<f64> {
    coordinate_derivative(state, data, 1, r, j, 1)
}

pub fn grad_w_entry(state: &ModelState, data: &MaskedData, r: usize, k: usize) -> Result<f64> {
    coordinate_derivative(state, data, 2, r, k, 1)
}

/// `d^2 l_d / d u_ri^2`, always non-positive.
pub fn hess_u_entry(state: &ModelState, data: &MaskedData, r: usize, i: usize) -> Result<f64> {
    coordinate_derivative(state, data, 0, r, i, 2)
}

pub fn hess_v_entry(state: &ModelState, data: &MaskedData, r: usize, j: usize) -> Result<f64> {
    coordinate_derivative(state, data, 1, r, j, 2)
}

pub fn hess_w_entry(state: &ModelState, data: &MaskedData, r: usize, k: usize) -> Result<f64> {
    coordinate_derivative(state, data, 2, r, k, 2)
}

fn lambda_derivative(state: &ModelState, data: &MaskedData, r: usize, order: i32) -> Result<f64> {
    check_component(state, r)?;
    let ev = evaluate(state, &Problem::new(data))?;
    let weights = if order == 1 { &ev.derivs.grad } else { &ev.derivs.curv };
    let cp = &state.cp;
    let [d1, d2, d3] = cp.dims();
    let (u, v, w) = (&cp.u()[r], &cp.v()[r], &cp.w()[r]);
    let mut total = 0.0;
    for i in 0..d1 {
        for j in 0..d2 {
            for k in 0..d3 {
                let c = u[i] * v[j] * w[k];
                total += weights[(i * d2 + j) * d3 + k] * if order == 1 { c } else { c * c };
            }
        }
    }
    Ok(total)
}

pub fn grad_lambda(state: &ModelState, data: &MaskedData, r: usize) -> Result<f64> {
    lambda_derivative(state, data, r, 1)
}

pub fn hess_lambda(state: &ModelState, data: &MaskedData, r: usize) -> Result<f64> {
    lambda_derivative(state, data, r, 2)
}

/// Gradient of `l_d` in `(b0, b1)`.
pub fn grad_theta(state: &ModelState, data: &MaskedData) -> Result<[f64; 2]> {
    let problem = Problem::new(data);
    let ev = evaluate(state, &problem)?;
    Ok(theta_gradient(&problem, &state.theta, &ev.xhat))
}

/// 2x2 Hessian of `l_d` in `(b0, b1)`.
pub fn hess_theta(state: &ModelState, data: &MaskedData) -> Result<[[f64; 2]; 2]> {
    let problem = Problem::new(data);
    let ev = evaluate(state, &problem)?;
    Ok(theta_hessian(&problem, &state.theta, &ev.xhat))
}
