//! Alternating maximization of the joint likelihood, warm-start
//! initialization and BIC rank selection.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::family::{Family, FamilyKind};
use crate::likelihood::{mask_terms, objective_at, ModelState, Problem, EXCLUDED, OBSERVED};
use crate::missingness::MissingnessParams;
use crate::tensor::{normalize_column, num_entries, CPModel, Dims, MaskedData};

/// Tuning knobs for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_outer_iters: usize,
    /// Stop when the objective changes by at most `rel_tol * max(|l|, 1)`.
    pub rel_tol: f64,
    pub newton_max_inner: usize,
    pub backtrack_factor: f64,
    pub seed: u64,
    /// Number of least-squares sweeps used by the warm start.
    pub init_sweeps: usize,
    /// Alternating iterations run on the warm start with the slope `b1`
    /// held at zero, before `theta` is first estimated.
    pub init_refine_iters: usize,
    /// Holds the missingness parameters fixed instead of estimating them.
    pub fixed_theta: Option<MissingnessParams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_outer_iters: 500,
            rel_tol: 1e-8,
            newton_max_inner: 20,
            backtrack_factor: 0.5,
            seed: 0,
            init_sweeps: 20,
            init_refine_iters: 10,
            fixed_theta: None,
        }
    }
}

impl FitOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidValue("max_outer_iters must be positive".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::InvalidValue(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if self.newton_max_inner == 0 {
            return Err(Error::InvalidValue("newton_max_inner must be positive".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::InvalidValue(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            )));
        }
        Ok(())
    }
}

/// Outcome of a fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub state: ModelState,
    /// Objective before the first iteration followed by one value per outer iteration.
    pub objective_trace: Vec<f64>,
    pub outer_iters: usize,
    pub converged: bool,
    pub wallclock: Duration,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial value")
    }
}

fn check_rank(dims: Dims, rank: usize) -> Result<()> {
    let min = dims.iter().copied().min().unwrap_or(0);
    if rank == 0 || rank > min {
        return Err(Error::Dimension(format!("rank {rank} must lie in 1..={min}")));
    }
    Ok(())
}

/// Working state of the optimizer: dense reconstruction kept in sync with the
/// factors, plus index tables that list each fiber's entries.
struct Engine<'a> {
    problem: &'a Problem,
    family: Family,
    search_family: Family,
    opts: &'a FitOptions,
    dims: Dims,
    /// For mode `m`, the entries of slice `a` are
    /// `fibers[m][a * len .. (a + 1) * len]` with `len = n / dims[m]`.
    fibers: [Vec<u32>; 3],
    xhat: Vec<f64>,
    coef: Vec<f64>,
}

fn build_fibers(dims: Dims) -> [Vec<u32>; 3] {
    let [d1, d2, d3] = dims;
    let n = num_entries(dims);
    let lin = |i: usize, j: usize, k: usize| ((i * d2 + j) * d3 + k) as u32;
    let mode0 = (0..n as u32).collect();
    let mut mode1 = Vec::with_capacity(n);
    for j in 0..d2 {
        for i in 0..d1 {
            for k in 0..d3 {
                mode1.push(lin(i, j, k));
            }
        }
    }
    let mut mode2 = Vec::with_capacity(n);
    for k in 0..d3 {
        for i in 0..d1 {
            for j in 0..d2 {
                mode2.push(lin(i, j, k));
            }
        }
    }
    [mode0, mode1, mode2]
}

impl<'a> Engine<'a> {
    fn new(problem: &'a Problem, family: Family, opts: &'a FitOptions) -> Result<Self> {
        let dims = problem.dims();
        if num_entries(dims) > u32::MAX as usize {
            return Err(Error::Dimension(format!("tensor {dims:?} is too large")));
        }
        // line searches stop slightly inside the Poisson cap so that
        // recomputing the reconstruction cannot push an entry across it
        let search_family = family.with_cap(family.natural_cap * (1.0 - 1e-9));
        Ok(Self {
            problem,
            family,
            search_family,
            opts,
            dims,
            fibers: build_fibers(dims),
            xhat: vec![0.0; num_entries(dims)],
            coef: vec![0.0; num_entries(dims)],
        })
    }

    /// Objective restricted to the entries `idx`, with `x_e` moved to
    /// `xhat_e + delta * coef_e`, together with its first two derivatives in `delta`.
    fn line_eval(&self, idx: &[u32], coef: &[f64], theta: &MissingnessParams, delta: f64) -> Option<(f64, f64, f64)> {
        // one monomorphized loop per family keeps the hot path branch-light
        let fam = &self.search_family;
        match fam.kind {
            FamilyKind::Gaussian => {
                let inv = 1.0 / fam.phi0;
                self.line_eval_with(idx, coef, theta, delta, |y, x| {
                    Some(((y * x - 0.5 * x * x) * inv, (y - x) * inv, -inv))
                })
            }
            FamilyKind::Bernoulli => self.line_eval_with(idx, coef, theta, delta, |y, x| fam.data_terms(y, x)),
            FamilyKind::Poisson => {
                let cap = fam.natural_cap;
                self.line_eval_with(idx, coef, theta, delta, |y, x| {
                    if !(x.abs() <= cap) {
                        return None;
                    }
                    let ex = x.exp();
                    Some((y * x - ex, y - ex, -ex))
                })
            }
        }
    }

    #[inline(always)]
    fn line_eval_with(
        &self,
        idx: &[u32],
        coef: &[f64],
        theta: &MissingnessParams,
        delta: f64,
        data: impl Fn(f64, f64) -> Option<(f64, f64, f64)>,
    ) -> Option<(f64, f64, f64)> {
        let (y, status) = (self.problem.y(), self.problem.status());
        let (b0, b1) = (theta.b0, theta.b1);
        let (mut f, mut g, mut h) = (0.0, 0.0, 0.0);
        for (&e, &c) in idx.iter().zip(coef) {
            let e = e as usize;
            let s = status[e];
            if s == EXCLUDED {
                continue;
            }
            let x = self.xhat[e] + delta * c;
            let observed = s == OBSERVED;
            let (mf, mg, mh) = mask_terms(observed, b0 + b1 * x);
            let (mut fe, mut ge, mut he) = (mf, b1 * mg, b1 * b1 * mh);
            if observed {
                let (df, dg, dh) = data(y[e], x)?;
                fe += df;
                ge += dg;
                he += dh;
            }
            f += fe;
            g += ge * c;
            h += he * c * c;
        }
        Some((f, g, h))
    }

    /// Damped Newton on a concave scalar problem; returns the accepted shift.
    fn newton_1d(&self, idx: &[u32], coef: &[f64], theta: &MissingnessParams) -> f64 {
        let Some(mut cur) = self.line_eval(idx, coef, theta, 0.0) else {
            return 0.0;
        };
        let mut delta = 0.0f64;
        for _ in 0..self.opts.newton_max_inner {
            let (f, g, h) = cur;
            if !(h < 0.0) || !g.is_finite() {
                break;
            }
            let step = -g / h;
            if 0.5 * g * step <= 1e-13 * (1.0 + f.abs()) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = None;
            while t * step.abs() > 1e-16 * (1.0 + delta.abs()) {
                let cand = delta + t * step;
                if let Some(v) = self.line_eval(idx, coef, theta, cand) {
                    if v.0 >= f {
                        accepted = Some((cand, v));
                        break;
                    }
                }
                t *= self.opts.backtrack_factor;
            }
            match accepted {
                Some((d, v)) => {
                    delta = d;
                    cur = v;
                }
                None => break,
            }
        }
        delta
    }

    fn update_mode(&mut self, cp: &mut CPModel, theta: &MissingnessParams, r: usize, mode: usize) -> Result<()> {
        let lam = cp.lambdas()[r];
        let (u, v, w) = (&cp.u()[r], &cp.v()[r], &cp.w()[r]);
        let (a, b) = match mode {
            0 => (v, w),
            1 => (u, w),
            _ => (u, v),
        };
        let len = num_entries(self.dims) / self.dims[mode];
        let inner = b.len();
        for (p, &ap) in a.iter().enumerate() {
            for (q, &bq) in b.iter().enumerate() {
                self.coef[p * inner + q] = lam * ap * bq;
            }
        }
        debug_assert_eq!(len, a.len() * inner);
        let mut col = cp.factor(mode)[r].clone();
        for (slot, value) in col.iter_mut().enumerate() {
            let idx = &self.fibers[mode][slot * len..(slot + 1) * len];
            let delta = self.newton_1d(idx, &self.coef[..len], theta);
            if delta != 0.0 {
                *value += delta;
                for (&e, &c) in idx.iter().zip(&self.coef[..len]) {
                    self.xhat[e as usize] += delta * c;
                }
            }
        }
        let (unit, norm) = normalize_column(&col)
            .map_err(|_| Error::DegenerateFactor(format!("mode {mode} column {r} vanished during update")))?;
        cp.factor_mut(mode)[r] = unit;
        cp.lambdas_mut()[r] *= norm;
        Ok(())
    }

    fn update_lambda(&mut self, cp: &mut CPModel, theta: &MissingnessParams, r: usize) -> Result<()> {
        let (u, v, w) = (&cp.u()[r], &cp.v()[r], &cp.w()[r]);
        let mut e = 0;
        for &ui in u {
            for &vj in v {
                for &wk in w {
                    self.coef[e] = ui * vj * wk;
                    e += 1;
                }
            }
        }
        let delta = self.newton_1d(&self.fibers[0], &self.coef, theta);
        if delta != 0.0 {
            for (x, &c) in self.xhat.iter_mut().zip(&self.coef) {
                *x += delta * c;
            }
        }
        let lam = cp.lambdas()[r] + delta;
        if lam == 0.0 || !lam.is_finite() {
            return Err(Error::DegenerateFactor(format!("lambda_{r} became {lam}")));
        }
        if lam < 0.0 {
            cp.lambdas_mut()[r] = -lam;
            cp.flip_pair(r, (0, 1));
        } else {
            cp.lambdas_mut()[r] = lam;
        }
        Ok(())
    }

    /// Mask log-likelihood in `theta` over included entries with gradient and Hessian.
    fn theta_terms(&self, theta: &MissingnessParams) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let status = self.problem.status();
        let (mut f, mut g, mut h) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
        for (&s, &x) in status.iter().zip(&self.xhat) {
            if s == EXCLUDED {
                continue;
            }
            let (mf, mg, mh) = mask_terms(s == OBSERVED, theta.linear_predictor(x));
            f += mf;
            g[0] += mg;
            g[1] += mg * x;
            h[0][0] += mh;
            h[0][1] += mh * x;
            h[1][1] += mh * x * x;
        }
        h[1][0] = h[0][1];
        (f, g, h)
    }

    fn update_theta(&self, theta: MissingnessParams, max_inner: usize) -> MissingnessParams {
        let mut theta = theta;
        let mut cur = self.theta_terms(&theta);
        for _ in 0..max_inner {
            let (f, g, h) = cur;
            if !(h[0][0] < 0.0) {
                break;
            }
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            let step = if h[1][1] < 0.0 && det > 1e-12 * h[0][0] * h[1][1] {
                [(-h[1][1] * g[0] + h[0][1] * g[1]) / det, (h[1][0] * g[0] - h[0][0] * g[1]) / det]
            } else {
                [-g[0] / h[0][0], 0.0]
            };
            let gain = 0.5 * (g[0] * step[0] + g[1] * step[1]);
            if !(gain > 1e-13 * (1.0 + f.abs())) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..200 {
                let cand = MissingnessParams { b0: theta.b0 + t * step[0], b1: theta.b1 + t * step[1] };
                let v = self.theta_terms(&cand);
                if v.0 >= f {
                    accepted = Some((cand, v));
                    break;
                }
                t *= self.opts.backtrack_factor;
                if t * (step[0].abs() + step[1].abs()) < 1e-16 {
                    break;
                }
            }
            match accepted {
                Some((c, v)) => {
                    theta = c;
                    cur = v;
                }
                None => break,
            }
        }
        theta
    }

    fn refresh(&mut self, cp: &CPModel) {
        cp.accumulate_into(&mut self.xhat);
    }

    fn objective(&self, theta: &MissingnessParams) -> Result<f64> {
        let value = objective_at(self.problem, &self.family, theta, &self.xhat)
            .ok_or_else(|| Error::NumericalFailure("natural parameter left the admissible range".into()))?;
        if !value.is_finite() {
            return Err(Error::NumericalFailure(format!("objective is {value}")));
        }
        Ok(value)
    }

    fn outer_iteration(&mut self, cp: &mut CPModel, theta: &mut MissingnessParams, update_theta: bool) -> Result<()> {
        for r in 0..cp.rank() {
            for mode in 0..3 {
                self.update_mode(cp, theta, r, mode)?;
            }
            self.update_lambda(cp, theta, r)?;
        }
        if update_theta {
            *theta = self.update_theta(*theta, self.opts.newton_max_inner);
        }
        Ok(())
    }
}

fn slice_warnings(problem: &Problem) -> Vec<String> {
    let mut out = Vec::new();
    for (mode, counts) in problem.observed_per_slice().iter().enumerate() {
        let empty: Vec<usize> = counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(i, _)| i).collect();
        if !empty.is_empty() {
            out.push(format!("mode {} has {} slice(s) without observed entries: {:?}", mode + 1, empty.len(), empty));
        }
    }
    out
}

/// Tensor the warm start decomposes. Gaussian: responses rescaled by the
/// observation rate on observed entries, zero elsewhere. Other families: link
/// of each entry's mean estimate shrunk halfway to the observed grand mean,
/// with unobserved entries at the grand mean itself.
fn surrogate(problem: &Problem, family: &Family) -> Vec<f64> {
    let rate = problem.observation_rate().max(1e-12);
    let (y, status) = (problem.y(), problem.status());
    let observed = || y.iter().zip(status).filter(|(_, &s)| s == OBSERVED).map(|(&v, _)| v);
    let ybar = observed().sum::<f64>() / problem.num_observed().max(1) as f64;
    let clip = |m: f64| match family.kind {
        FamilyKind::Bernoulli => m.clamp(0.05, 0.95),
        _ => m.max(0.05),
    };
    let fill = family.link(clip(ybar));
    y.iter()
        .zip(status)
        .map(|(&v, &s)| match (family.kind, s == OBSERVED) {
            (FamilyKind::Gaussian, true) => v / rate,
            (FamilyKind::Gaussian, false) => 0.0,
            (_, true) => family.link(clip((v + ybar) / 2.0)),
            (_, false) => fill,
        })
        .collect()
}

fn gram(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let r = cols.len();
    DMatrix::from_fn(r, r, |a, b| cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum())
}

/// Matricized-tensor times Khatri-Rao product for `mode`, returned column-wise.
fn mttkrp(s: &[f64], dims: Dims, factors: &[Vec<Vec<f64>>; 3], mode: usize) -> Vec<Vec<f64>> {
    let [d1, d2, d3] = dims;
    let rank = factors[0].len();
    let mut out = vec![vec![0.0; dims[mode]]; rank];
    let mut tmp = vec![0.0; rank];
    for i in 0..d1 {
        for j in 0..d2 {
            let base = (i * d2 + j) * d3;
            let fiber = &s[base..base + d3];
            match mode {
                0 | 1 => {
                    for (r, t) in tmp.iter_mut().enumerate() {
                        *t = fiber.iter().zip(&factors[2][r]).map(|(a, b)| a * b).sum();
                    }
                    for r in 0..rank {
                        if mode == 0 {
                            out[r][i] += tmp[r] * factors[1][r][j];
                        } else {
                            out[r][j] += tmp[r] * factors[0][r][i];
                        }
                    }
                }
                _ => {
                    for r in 0..rank {
                        let c = factors[0][r][i] * factors[1][r][j];
                        for (o, &x) in out[r].iter_mut().zip(fiber) {
                            *o += c * x;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Rank-R least-squares CP decomposition of a dense tensor by alternating
/// updates; the returned columns are unnormalized.
fn cp_als(s: &[f64], dims: Dims, rank: usize, sweeps: usize, rng: &mut ChaCha8Rng) -> [Vec<Vec<f64>>; 3] {
    let mut factors: [Vec<Vec<f64>>; 3] = std::array::from_fn(|m| {
        (0..rank).map(|_| (0..dims[m]).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
    });
    for _ in 0..sweeps {
        for mode in 0..3 {
            let (a, b) = match mode {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let g = gram(&factors[a]).component_mul(&gram(&factors[b]));
            let ridge = 1e-10 * (g.trace() / rank as f64).max(1e-300);
            let g = g + DMatrix::identity(rank, rank) * ridge;
            let m = mttkrp(s, dims, &factors, mode);
            let Some(chol) = g.cholesky() else { break };
            for row in 0..dims[mode] {
                let rhs = DVector::from_fn(rank, |r, _| m[r][row]);
                let sol = chol.solve(&rhs);
                for r in 0..rank {
                    factors[mode][r][row] = sol[r];
                }
            }
        }
    }
    factors
}

/// Builds the starting point for [`fit`].
pub fn initialize(data: &MaskedData, rank: usize, family: Family, opts: &FitOptions) -> Result<ModelState> {
    initialize_problem(&Problem::new(data), rank, family, opts)
}

pub fn initialize_problem(problem: &Problem, rank: usize, family: Family, opts: &FitOptions) -> Result<ModelState> {
    opts.validate()?;
    family.validate()?;
    let dims = problem.dims();
    check_rank(dims, rank)?;
    if problem.num_observed() == 0 {
        return Err(Error::NoData);
    }
    problem.check_support(&family)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let s = surrogate(problem, &family);
    let [mut u, mut v, mut w] = cp_als(&s, dims, rank, opts.init_sweeps, &mut rng);
    let mut weights = vec![1.0; rank];
    for r in 0..rank {
        let scale = [&u[r], &v[r], &w[r]].iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).product::<f64>();
        if !(scale > 1e-12) || !scale.is_finite() {
            // collapsed component: restart it as a small random direction
            for (col, d) in [(&mut u[r], dims[0]), (&mut v[r], dims[1]), (&mut w[r], dims[2])] {
                *col = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            }
            let norms: f64 = [&u[r], &v[r], &w[r]]
                .iter()
                .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
                .product();
            weights[r] = 1e-3 / norms;
        }
    }
    let mut cp = CPModel::from_unnormalized(weights, u, v, w)?;

    let mut xhat = vec![0.0; num_entries(dims)];
    cp.accumulate_into(&mut xhat);
    if family.kind == FamilyKind::Poisson {
        let peak = xhat.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let limit = 0.5 * family.natural_cap;
        if peak > limit {
            let shrink = limit / peak;
            cp.lambdas_mut().iter_mut().for_each(|l| *l *= shrink);
        }
    }

    let rate = problem.observation_rate().clamp(1e-6, 1.0 - 1e-6);
    let mcar = MissingnessParams { b0: (rate / (1.0 - rate)).ln(), b1: 0.0 };
    let mut engine = Engine::new(problem, family, opts)?;
    engine.refresh(&cp);
    // refine the factors with the missingness slope held at zero (or at the
    // fixed value) before regressing the mask on the reconstruction
    let mut warm_theta = opts.fixed_theta.unwrap_or(mcar);
    let mut refined = cp.clone();
    let mut ok = true;
    for _ in 0..opts.init_refine_iters {
        if engine.outer_iteration(&mut refined, &mut warm_theta, false).is_err() {
            ok = false;
            break;
        }
    }
    if ok {
        cp = refined;
    }
    engine.refresh(&cp);
    let theta = match opts.fixed_theta {
        Some(t) => t,
        None => engine.update_theta(mcar, 100),
    };
    ModelState::new(cp, theta, family)
}

/// Fits a rank-`rank` model by alternating block maximization.
pub fn fit(data: &MaskedData, rank: usize, family: Family, opts: &FitOptions) -> Result<FitReport> {
    fit_problem(&Problem::new(data), rank, family, opts)
}

/// As [`fit`], on a problem that may exclude some entries.
pub fn fit_problem(problem: &Problem, rank: usize, family: Family, opts: &FitOptions) -> Result<FitReport> {
    let start = Instant::now();
    let state = initialize_problem(problem, rank, family, opts)?;
    let mut report = fit_from_state(problem, state, opts)?;
    report.wallclock = start.elapsed();
    Ok(report)
}

/// Runs the alternating maximization from a given starting point.
pub fn fit_from_state(problem: &Problem, state: ModelState, opts: &FitOptions) -> Result<FitReport> {
    let start = Instant::now();
    opts.validate()?;
    if state.dims() != problem.dims() {
        return Err(Error::Dimension(format!("model dims {:?} != data dims {:?}", state.dims(), problem.dims())));
    }
    problem.check_support(&state.family)?;
    let ModelState { mut cp, mut theta, family } = state;
    if let Some(t) = opts.fixed_theta {
        theta = t;
    }
    let mut engine = Engine::new(problem, family, opts)?;
    engine.refresh(&cp);
    let mut trace = vec![engine.objective(&theta)?];
    let mut converged = false;
    let mut iters = 0;
    while iters < opts.max_outer_iters {
        engine.outer_iteration(&mut cp, &mut theta, opts.fixed_theta.is_none())?;
        engine.refresh(&cp);
        let value = engine.objective(&theta)?;
        let prev = *trace.last().unwrap();
        trace.push(value);
        iters += 1;
        if (value - prev).abs() <= opts.rel_tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(FitReport {
        state: ModelState::new(cp, theta, family)?,
        objective_trace: trace,
        outer_iters: iters,
        converged,
        wallclock: start.elapsed(),
        warnings: slice_warnings(problem),
    })
}

/// `((d1 + d2 + d3) R + R) log|Omega| - 2 l_d`.
pub fn bic(dims: Dims, rank: usize, num_observed: usize, loglik: f64) -> f64 {
    let params = ((dims[0] + dims[1] + dims[2]) * rank + rank) as f64;
    params * (num_observed as f64).ln() - 2.0 * loglik
}

/// Result of [`select_rank`].
#[derive(Debug, Clone)]
pub struct RankSelection {
    pub rank: usize,
    /// `(candidate, BIC)` in the order given; failed fits carry `+inf`.
    pub bic: Vec<(usize, f64)>,
    pub report: FitReport,
}

/// Fits every candidate rank and keeps the one with the smallest BIC,
/// preferring the smaller rank on ties.
pub fn select_rank(data: &MaskedData, family: Family, candidates: &[usize], opts: &FitOptions) -> Result<RankSelection> {
    if candidates.is_empty() {
        return Err(Error::InvalidValue("no candidate ranks".into()));
    }
    for &r in candidates {
        check_rank(data.dims(), r)?;
    }
    let problem = Problem::new(data);
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64, FitReport)> = None;
    let mut last_err = None;
    for &r in candidates {
        match fit_problem(&problem, r, family, opts) {
            Ok(report) => {
                let b = bic(data.dims(), r, data.num_observed(), report.final_objective());
                scores.push((r, b));
                let better = match &best {
                    None => true,
                    Some((br, bb, _)) => b < *bb || (b == *bb && r < *br),
                };
                if better {
                    best = Some((r, b, report));
                }
            }
            Err(e) => {
                scores.push((r, f64::INFINITY));
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((rank, _, report)) => Ok(RankSelection { rank, bic: scores, report }),
        None => Err(last_err.unwrap_or(Error::NoData)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{gradient, objective};
    use crate::tensor::{align_components, multi_index, DenseTensor3, Mask};

    fn rank_one(d: usize, lam: f64, seed: u64) -> CPModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut col = || (0..d).map(|_| 0.5 + rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
        CPModel::from_unnormalized(vec![lam], vec![col()], vec![col()], vec![col()]).unwrap()
    }

    fn distance(est: &CPModel, truth: &CPModel) -> f64 {
        let a = align_components(est, truth).unwrap();
        let mut worst = 0.0f64;
        for r in 0..truth.rank() {
            worst = worst.max((a.lambdas()[r] - truth.lambdas()[r]).abs() / truth.lambdas()[r]);
            for m in 0..3 {
                let diff: f64 = a.factor(m)[r]
                    .iter()
                    .zip(&truth.factor(m)[r])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(diff);
            }
        }
        worst
    }

    fn simulated(d: usize, b: (f64, f64), seed: u64) -> (CPModel, MaskedData) {
        let truth = rank_one(d, 0.6 * (d as f64).powf(1.5), seed);
        let x = truth.reconstruct_full();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let theta = MissingnessParams::new(b.0, b.1).unwrap();
        let mut obs = Vec::new();
        for e in 0..x.len() {
            let xv = x.as_slice()[e];
            let y = xv + rng.sample::<f64, _>(StandardNormal);
            if rng.random_bool(crate::missingness::obs_prob(&theta, xv)) {
                obs.push((multi_index(x.dims(), e), y));
            }
        }
        (truth, MaskedData::from_observations(x.dims(), obs).unwrap())
    }

    #[test]
    fn bic_example() {
        let b = bic([10, 10, 10], 2, 500, -100.0);
        assert!((b - (62.0 * 500f64.ln() + 200.0)).abs() < 1e-12);
        assert!((b - 585.31).abs() < 0.01);
    }

    #[test]
    fn options_validation() {
        assert!(FitOptions { backtrack_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(FitOptions { rel_tol: 0.0, ..Default::default() }.validate().is_err());
        assert!(FitOptions::default().validate().is_ok());
    }

    #[test]
    fn empty_data_rejected() {
        let data = MaskedData::from_observations([3, 3, 3], vec![]).unwrap();
        let fam = Family::gaussian(1.0).unwrap();
        assert!(matches!(initialize(&data, 1, fam, &FitOptions::default()), Err(Error::NoData)));
        let (_, data) = simulated(4, (1.0, 0.0), 1);
        assert!(initialize(&data, 5, fam, &FitOptions::default()).is_err());
    }

    #[test]
    fn fit_is_deterministic_and_ascending() {
        let (_, data) = simulated(8, (1.0, 2.0), 3);
        let fam = Family::gaussian(1.0).unwrap();
        let opts = FitOptions::with_seed(11);
        let a = fit(&data, 2, fam, &opts).unwrap();
        let b = fit(&data, 2, fam, &opts).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.objective_trace, b.objective_trace);
        for pair in a.objective_trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-10 * (1.0 + pair[0].abs()));
        }
        let recomputed = objective(&a.state, &data).unwrap();
        assert!((recomputed - a.final_objective()).abs() < 1e-9 * recomputed.abs());
    }

    #[test]
    fn converged_fit_is_stationary() {
        let (_, data) = simulated(8, (0.5, 1.0), 5);
        let fam = Family::gaussian(1.0).unwrap();
        let opts = FitOptions { rel_tol: 1e-13, max_outer_iters: 3000, ..FitOptions::with_seed(2) };
        let rep = fit(&data, 1, fam, &opts).unwrap();
        assert!(rep.converged);
        let g = gradient(&rep.state, &data).unwrap();
        let tol = 1e-6 * (1.0 + rep.final_objective().abs());
        // lambda and theta are unconstrained coordinates of the objective
        assert!(g.lambda.iter().all(|x| x.abs() < tol), "{:?}", g.lambda);
        assert!(g.theta.iter().all(|x| x.abs() < tol), "{:?}", g.theta);
    }

    #[test]
    fn noiseless_full_observation_exact_recovery() {
        let d = 10;
        let truth = rank_one(d, 0.6 * (d as f64).powf(1.5), 21);
        let x = truth.reconstruct_full();
        let data = MaskedData::from_dense(&x, &Mask::full(x.dims(), true).unwrap()).unwrap();
        let fam = Family::gaussian(1.0).unwrap();
        let opts = FitOptions {
            fixed_theta: Some(MissingnessParams::mcar(1.0).unwrap()),
            rel_tol: 1e-14,
            ..FitOptions::with_seed(4)
        };
        let rep = fit(&data, 1, fam, &opts).unwrap();
        assert!(distance(&rep.state.cp, &truth) < 1e-3);
    }

    #[test]
    fn initial_state_near_truth() {
        let d = 20;
        let mut inside = 0;
        for seed in 0..10 {
            let truth = rank_one(d, 0.6 * (d as f64).powf(1.5), seed);
            let x = truth.reconstruct_full();
            let data = MaskedData::from_dense(&x, &Mask::full(x.dims(), true).unwrap()).unwrap();
            let s = initialize(&data, 1, Family::gaussian(1.0).unwrap(), &FitOptions::with_seed(seed)).unwrap();
            if distance(&s.cp, &truth) < 0.5 {
                inside += 1;
            }
        }
        assert_eq!(inside, 10);
    }

    #[test]
    fn initial_theta_finite_with_mostly_observed_mask() {
        let (_, data) = simulated(10, (3.0, 0.0), 8);
        assert!(data.num_observed() as f64 / 1000.0 > 0.9);
        let s = initialize(&data, 1, Family::gaussian(1.0).unwrap(), &FitOptions::with_seed(1)).unwrap();
        assert!(s.theta.b0.is_finite() && s.theta.b1.is_finite());
        assert!(s.theta.b0 > 1.0);
    }

    #[test]
    fn fully_observed_initialization_is_finite() {
        let truth = rank_one(5, 3.0, 2);
        let x = truth.reconstruct_full();
        let data = MaskedData::from_dense(&x, &Mask::full(x.dims(), true).unwrap()).unwrap();
        let s = initialize(&data, 1, Family::gaussian(1.0).unwrap(), &FitOptions::default()).unwrap();
        assert!(s.theta.b0.is_finite() && s.theta.b1.is_finite());
    }

    #[test]
    fn singleton_candidate_is_selected() {
        let (_, data) = simulated(6, (1.0, 1.0), 9);
        let sel = select_rank(&data, Family::gaussian(1.0).unwrap(), &[2], &FitOptions::with_seed(3)).unwrap();
        assert_eq!(sel.rank, 2);
        assert_eq!(sel.bic.len(), 1);
    }

    #[test]
    fn empty_slice_produces_warning() {
        let (_, data) = simulated(5, (1.0, 0.0), 10);
        let obs: Vec<_> = data.iter().filter(|(idx, _)| idx[0] != 2).collect();
        let data = MaskedData::from_observations([5, 5, 5], obs).unwrap();
        let rep = fit(&data, 1, Family::gaussian(1.0).unwrap(), &FitOptions { max_outer_iters: 5, ..Default::default() })
            .unwrap();
        assert_eq!(rep.warnings.len(), 1);
    }

    #[test]
    fn bernoulli_and_poisson_fits_ascend() {
        for fam in [Family::bernoulli(), Family::poisson()] {
            let truth = rank_one(8, 4.0, 31);
            let x = truth.reconstruct_full();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let theta = MissingnessParams::new(0.5, 1.0).unwrap();
            let obs: Vec<_> = (0..x.len())
                .filter_map(|e| {
                    let xv = x.as_slice()[e];
                    let y = fam.sample(xv, &mut rng);
                    rng.random_bool(crate::missingness::obs_prob(&theta, xv)).then(|| (multi_index(x.dims(), e), y))
                })
                .collect();
            let data = MaskedData::from_observations(x.dims(), obs).unwrap();
            let rep = fit(&data, 1, fam, &FitOptions::with_seed(1)).unwrap();
            for pair in rep.objective_trace.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-10 * (1.0 + pair[0].abs()));
            }
        }
    }

    /// Plain alternating GLM fitter on fully observed data, written against
    /// dense triple loops with no mask term at all.
    fn reference_glm_trace(y: &DenseTensor3, start: &CPModel, iters: usize) -> Vec<f64> {
        let [d1, d2, d3] = y.dims();
        let dims = [d1, d2, d3];
        let rank = start.rank();
        let mut lam: Vec<f64> = start.lambdas().to_vec();
        let mut f: [Vec<Vec<f64>>; 3] = [start.u().to_vec(), start.v().to_vec(), start.w().to_vec()];
        let xhat = |lam: &[f64], f: &[Vec<Vec<f64>>; 3], i: usize, j: usize, k: usize| -> f64 {
            (0..rank).map(|r| lam[r] * f[0][r][i] * f[1][r][j] * f[2][r][k]).sum()
        };
        let loglik = |lam: &[f64], f: &[Vec<Vec<f64>>; 3]| -> f64 {
            let mut t = 0.0;
            for i in 0..d1 {
                for j in 0..d2 {
                    for k in 0..d3 {
                        let x = xhat(lam, f, i, j, k);
                        t += y.get([i, j, k]).unwrap() * x - 0.5 * x * x;
                    }
                }
            }
            t
        };
        let mut trace = vec![loglik(&lam, &f)];
        for _ in 0..iters {
            for r in 0..rank {
                for mode in 0..3 {
                    for a in 0..dims[mode] {
                        // the Gaussian coordinate problem is quadratic: one Newton step is exact
                        let (mut g, mut h) = (0.0, 0.0);
                        for i in 0..d1 {
                            for j in 0..d2 {
                                for k in 0..d3 {
                                    let idx = [i, j, k];
                                    if idx[mode] != a {
                                        continue;
                                    }
                                    let c = lam[r]
                                        * (0..3).filter(|&m| m != mode).map(|m| f[m][r][idx[m]]).product::<f64>();
                                    let x = xhat(&lam, &f, i, j, k);
                                    g += (y.get(idx).unwrap() - x) * c;
                                    h -= c * c;
                                }
                            }
                        }
                        f[mode][r][a] -= g / h;
                    }
                    let norm = f[mode][r].iter().map(|x| x * x).sum::<f64>().sqrt();
                    f[mode][r].iter_mut().for_each(|x| *x /= norm);
                    lam[r] *= norm;
                }
                let (mut g, mut h) = (0.0, 0.0);
                for i in 0..d1 {
                    for j in 0..d2 {
                        for k in 0..d3 {
                            let c = f[0][r][i] * f[1][r][j] * f[2][r][k];
                            g += (y.get([i, j, k]).unwrap() - xhat(&lam, &f, i, j, k)) * c;
                            h -= c * c;
                        }
                    }
                }
                lam[r] -= g / h;
            }
            trace.push(loglik(&lam, &f));
        }
        trace
    }

    #[test]
    fn matches_mask_free_reference_fitter() {
        let truth = rank_one(6, 8.0, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = truth.reconstruct_full();
        let y = x.map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal)).unwrap();
        let data = MaskedData::from_dense(&y, &Mask::full(y.dims(), true).unwrap()).unwrap();
        let fam = Family::gaussian(1.0).unwrap();
        let theta = MissingnessParams::mcar(0.7).unwrap();
        let opts = FitOptions { fixed_theta: Some(theta), max_outer_iters: 8, rel_tol: 1e-300, ..Default::default() };
        let start = crate::tensor::tests::random_model([6, 6, 6], 2, 3);
        let state = ModelState::new(start.clone(), theta, fam).unwrap();
        let rep = fit_from_state(&Problem::new(&data), state, &opts).unwrap();
        let reference = reference_glm_trace(&y, &start, 8);
        let mask_const = 216.0 * (0.7 - crate::family::softplus(0.7));
        assert_eq!(rep.objective_trace.len(), reference.len());
        for (a, b) in rep.objective_trace.iter().zip(&reference) {
            assert!((a - mask_const - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
