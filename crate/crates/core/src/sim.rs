//! Synthetic scenarios, evaluation metrics and replicated experiments.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit, select_rank, FitOptions};
use crate::family::{Family, FamilyKind};
use crate::inference::{test_mnar, TestResult};
use crate::likelihood::ModelState;
use crate::missingness::{obs_prob, MissingnessParams};
use crate::tensor::{align_components, num_entries, CPModel, DenseTensor3, Dims, Mask, MaskedData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorLaw {
    /// Entries `N(0.5, 1)`, then each column scaled to unit length.
    GaussianShifted,
    /// Entries `log U(0, 1)`, then each column scaled to unit length.
    LogUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Completion,
    RankTuning,
    Testing,
}

fn default_phi0() -> f64 {
    1.0
}
fn default_replicates() -> usize {
    1
}
fn default_candidates() -> Vec<usize> {
    (2..=10).collect()
}
fn default_a2_size() -> usize {
    500
}
fn default_alpha() -> f64 {
    0.05
}
fn default_max_iters() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-8
}

/// A simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub family: FamilyKind,
    #[serde(default = "default_phi0")]
    pub phi0: f64,
    pub dims: Dims,
    #[serde(alias = "R")]
    pub rank: usize,
    /// Signal level: `lambda_r = c * sqrt(d1 d2 d3)`.
    pub c: f64,
    pub b0: f64,
    pub b1: f64,
    pub factor_law: FactorLaw,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_candidates")]
    pub candidates: Vec<usize>,
    #[serde(default = "default_a2_size")]
    pub a2_size: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl ScenarioSpec {
    pub fn new(family: FamilyKind, dims: Dims, rank: usize, c: f64, b0: f64, b1: f64, factor_law: FactorLaw) -> Self {
        Self {
            family,
            phi0: 1.0,
            dims,
            rank,
            c,
            b0,
            b1,
            factor_law,
            replicates: 1,
            seed: 0,
            candidates: default_candidates(),
            a2_size: default_a2_size(),
            alpha: default_alpha(),
            max_iters: default_max_iters(),
            tol: default_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Dimension(format!("dims {:?} must be positive", self.dims)));
        }
        if self.rank == 0 || self.rank > *self.dims.iter().min().unwrap() {
            return Err(Error::Dimension(format!("rank {} incompatible with dims {:?}", self.rank, self.dims)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidValue(format!("c must be positive, got {}", self.c)));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidValue("replicates must be at least 1".into()));
        }
        MissingnessParams::new(self.b0, self.b1)?;
        self.family()?;
        Ok(())
    }

    pub fn family(&self) -> Result<Family> {
        Family::from_kind(self.family, self.phi0)
    }

    pub fn lambda(&self) -> f64 {
        self.c * (num_entries(self.dims) as f64).sqrt()
    }

    pub fn fit_options(&self, seed: u64) -> FitOptions {
        FitOptions { max_outer_iters: self.max_iters, rel_tol: self.tol, seed, ..FitOptions::default() }
    }
}

/// One simulated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct Generated {
    pub truth: ModelState,
    pub data: MaskedData,
    /// Responses at every index, including those the mask hides.
    pub y_full: DenseTensor3,
}

fn draw_column<R: Rng>(law: FactorLaw, d: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.5, 1.0).expect("valid normal");
    loop {
        let col: Vec<f64> = match law {
            FactorLaw::GaussianShifted => (0..d).map(|_| normal.sample(rng)).collect(),
            FactorLaw::LogUniform => (0..d).map(|_| (1.0 - rng.random::<f64>()).ln()).collect(),
        };
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm >= 1e-8 {
            return col.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a dataset. Factors, responses and mask come from one seeded stream.
pub fn generate(spec: &ScenarioSpec) -> Result<Generated> {
    spec.validate()?;
    let family = spec.family()?;
    let theta = MissingnessParams::new(spec.b0, spec.b1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut factors: [Vec<Vec<f64>>; 3] = Default::default();
    for (mode, cols) in factors.iter_mut().enumerate() {
        *cols = (0..spec.rank).map(|_| draw_column(spec.factor_law, spec.dims[mode], &mut rng)).collect();
    }
    let [u, v, w] = factors;
    let cp = CPModel::new(vec![spec.lambda(); spec.rank], u, v, w)?;
    let x = cp.reconstruct_full();
    if family.kind == FamilyKind::Poisson {
        if let Some(&bad) = x.as_slice().iter().find(|v| v.abs() > family.natural_cap) {
            return Err(Error::NaturalParameterOverflow { x: bad, cap: family.natural_cap });
        }
    }
    let y: Vec<f64> = x.as_slice().iter().map(|&xv| family.sample(xv, &mut rng)).collect();
    let mask: Vec<bool> = x.as_slice().iter().map(|&xv| rng.random::<f64>() < obs_prob(&theta, xv)).collect();
    let y_full = DenseTensor3::new(spec.dims, y)?;
    let mask = Mask::new(spec.dims, mask)?;
    let data = MaskedData::from_dense(&y_full, &mask)?;
    Ok(Generated { truth: ModelState::new(cp, theta, family)?, data, y_full })
}

fn check_same_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Relative Frobenius error restricted to unobserved entries.
pub fn rmse_missing(x_hat: &DenseTensor3, x_true: &DenseTensor3, mask: &Mask) -> Result<f64> {
    check_same_dims(x_hat.dims(), x_true.dims())?;
    check_same_dims(x_hat.dims(), mask.dims())?;
    let (mut num, mut den, mut missing) = (0.0, 0.0, 0usize);
    for ((&a, &b), &d) in x_hat.as_slice().iter().zip(x_true.as_slice()).zip(mask.as_slice()) {
        if !d {
            num += (a - b) * (a - b);
            den += b * b;
            missing += 1;
        }
    }
    if missing == 0 {
        return Err(Error::NoMissingEntries);
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("true tensor vanishes on the missing entries".into()));
    }
    Ok((num / den).sqrt())
}

/// Area under the ROC curve, `P(s1 > s0) + P(s1 = s0) / 2`, via midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidValue("NaN score".into()));
    }
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their average
        let mid = (start + 1 + end) as f64 / 2.0;
        rank_sum += mid * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

/// AUC of `scores` against binary responses over the unobserved entries.
pub fn auc_missing(scores: &DenseTensor3, y_full: &DenseTensor3, mask: &Mask) -> Result<f64> {
    check_same_dims(scores.dims(), y_full.dims())?;
    check_same_dims(scores.dims(), mask.dims())?;
    let mut s = Vec::new();
    let mut l = Vec::new();
    for ((&a, &y), &d) in scores.as_slice().iter().zip(y_full.as_slice()).zip(mask.as_slice()) {
        if !d {
            s.push(a);
            l.push(y > 0.5);
        }
    }
    if s.is_empty() {
        return Err(Error::NoMissingEntries);
    }
    auc(&s, &l)
}

/// Largest error over aligned factors, weights and missingness parameters.
/// Weights are compared relatively; `b0`, `b1` relatively unless the true
/// value is zero, in which case the absolute error is used.
pub fn d_metric(est: &ModelState, truth: &ModelState) -> Result<f64> {
    let aligned = align_components(&est.cp, &truth.cp)?;
    let mut worst = 0.0f64;
    for r in 0..truth.cp.rank() {
        for mode in 0..3 {
            let err = aligned.factor(mode)[r]
                .iter()
                .zip(&truth.cp.factor(mode)[r])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(err);
        }
        let lt = truth.cp.lambdas()[r];
        worst = worst.max((aligned.lambdas()[r] - lt).abs() / lt);
    }
    for (e, t) in [(est.theta.b0, truth.theta.b0), (est.theta.b1, truth.theta.b1)] {
        let err = if t == 0.0 { (e - t).abs() } else { (e - t).abs() / t.abs() };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Constant natural-parameter prediction from the observed responses:
/// the mean (gaussian), log of the mean (poisson) or logit of the rate (bernoulli).
pub fn baseline_prediction(data: &MaskedData, family: &Family) -> Result<DenseTensor3> {
    if data.num_observed() == 0 {
        return Err(Error::NoData);
    }
    let mean = data.y_obs().iter().sum::<f64>() / data.num_observed() as f64;
    let value = match family.kind {
        FamilyKind::Gaussian => mean,
        FamilyKind::Poisson => mean.max(1e-12).ln(),
        FamilyKind::Bernoulli => {
            let m = mean.clamp(1e-12, 1.0 - 1e-12);
            (m / (1.0 - m)).ln()
        }
    };
    DenseTensor3::new(data.dims(), vec![value; num_entries(data.dims())])
}

/// Per-replicate outcome. Fields that do not apply to the protocol are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub observed_fraction: f64,
    pub rmse_missing: Option<f64>,
    pub baseline_rmse: Option<f64>,
    pub auc_missing: Option<f64>,
    pub baseline_auc: Option<f64>,
    pub d_metric: Option<f64>,
    pub selected_rank: Option<usize>,
    pub converged: Option<bool>,
    pub outer_iters: Option<usize>,
    pub test: Option<TestResult>,
    pub error: Option<String>,
}

impl ReplicateResult {
    fn empty(replicate: usize, seed: u64) -> Self {
        Self {
            replicate,
            seed,
            observed_fraction: f64::NAN,
            rmse_missing: None,
            baseline_rmse: None,
            auc_missing: None,
            baseline_auc: None,
            d_metric: None,
            selected_rank: None,
            converged: None,
            outer_iters: None,
            test: None,
            error: None,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Mean, standard error and normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let se = sd / (n as f64).sqrt();
    Some(Summary { n, mean, se, ci_lower: mean - 1.96 * se, ci_upper: mean + 1.96 * se })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ScenarioSpec,
    pub protocol: Protocol,
    pub replicates: Vec<ReplicateResult>,
    pub failures: usize,
    pub aggregates: BTreeMap<String, Summary>,
    /// Selected-rank histogram (rank tuning only).
    pub rank_counts: Option<BTreeMap<usize, usize>>,
}

impl ExperimentReport {
    pub fn aggregate(&self, name: &str) -> Option<&Summary> {
        self.aggregates.get(name)
    }

    /// Most frequently selected rank, smallest on ties.
    pub fn modal_rank(&self) -> Option<usize> {
        let counts = self.rank_counts.as_ref()?;
        let best = counts.values().copied().max()?;
        counts.iter().find(|(_, &c)| c == best).map(|(&r, _)| r)
    }
}

fn completion_metrics(
    out: &mut ReplicateResult,
    generated: &Generated,
    est: &ModelState,
    family: &Family,
) -> Result<()> {
    let data = &generated.data;
    let x_true = generated.truth.cp.reconstruct_full();
    let x_hat = est.cp.reconstruct_full();
    let baseline = baseline_prediction(data, family)?;
    out.rmse_missing = Some(rmse_missing(&x_hat, &x_true, data.mask())?);
    out.baseline_rmse = Some(rmse_missing(&baseline, &x_true, data.mask())?);
    if family.kind == FamilyKind::Bernoulli {
        out.auc_missing = auc_missing(&x_hat, &generated.y_full, data.mask()).ok();
        out.baseline_auc = auc_missing(&baseline, &generated.y_full, data.mask()).ok();
    }
    if est.cp.rank() == generated.truth.cp.rank() {
        out.d_metric = Some(d_metric(est, &generated.truth)?);
    }
    Ok(())
}

/// Runs one replicate of `spec` with its own seed.
pub fn run_replicate(spec: &ScenarioSpec, protocol: Protocol, replicate: usize) -> ReplicateResult {
    let seed = spec.seed.wrapping_add(replicate as u64);
    let mut out = ReplicateResult::empty(replicate, seed);
    let result = (|| -> Result<()> {
        let rep_spec = ScenarioSpec { seed, ..spec.clone() };
        let generated = generate(&rep_spec)?;
        let family = spec.family()?;
        let data = &generated.data;
        out.observed_fraction = data.num_observed() as f64 / num_entries(spec.dims) as f64;
        let opts = spec.fit_options(seed);
        match protocol {
            Protocol::Completion => {
                let report = fit(data, spec.rank, family, &opts)?;
                out.converged = Some(report.converged);
                out.outer_iters = Some(report.outer_iters);
                completion_metrics(&mut out, &generated, &report.state, &family)?;
            }
            Protocol::RankTuning => {
                let sel = select_rank(data, family, &spec.candidates, &opts)?;
                out.selected_rank = Some(sel.rank);
                out.converged = Some(sel.report.converged);
                out.outer_iters = Some(sel.report.outer_iters);
                completion_metrics(&mut out, &generated, &sel.report.state, &family)?;
            }
            Protocol::Testing => {
                out.test = Some(test_mnar(data, family, spec.rank, &opts, spec.a2_size, spec.alpha)?);
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        out.error = Some(e.to_string());
    }
    out
}

fn collect(results: &[ReplicateResult], f: impl Fn(&ReplicateResult) -> Option<f64>) -> Vec<f64> {
    results.iter().filter(|r| !r.failed()).filter_map(f).collect()
}

/// Runs all replicates of `spec` (in parallel on up to `jobs` threads) and
/// aggregates the successful ones. Results are ordered by replicate index
/// and do not depend on `jobs`.
pub fn run_experiment(spec: &ScenarioSpec, protocol: Protocol, jobs: usize) -> Result<ExperimentReport> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidValue(format!("thread pool: {e}")))?;
    let replicates: Vec<ReplicateResult> =
        pool.install(|| (0..spec.replicates).into_par_iter().map(|i| run_replicate(spec, protocol, i)).collect());

    let mut aggregates = BTreeMap::new();
    let mut put = |name: &str, values: Vec<f64>| {
        if let Some(s) = summarize(&values) {
            aggregates.insert(name.to_string(), s);
        }
    };
    put("observed_fraction", collect(&replicates, |r| Some(r.observed_fraction)));
    put("rmse_missing", collect(&replicates, |r| r.rmse_missing));
    put("baseline_rmse", collect(&replicates, |r| r.baseline_rmse));
    put("auc_missing", collect(&replicates, |r| r.auc_missing));
    put("baseline_auc", collect(&replicates, |r| r.baseline_auc));
    put("d_metric", collect(&replicates, |r| r.d_metric));
    put("converged", collect(&replicates, |r| r.converged.map(|c| f64::from(u8::from(c)))));
    put("rejection_rate", collect(&replicates, |r| r.test.as_ref().map(|t| f64::from(u8::from(t.rejects())))));
    put("b1_hat", collect(&replicates, |r| r.test.as_ref().map(|t| t.b1_hat)));
    put(
        "ci_covers_b1",
        collect(&replicates, |r| r.test.as_ref().map(|t| f64::from(u8::from(t.ci_lower <= spec.b1 && spec.b1 <= t.ci_upper)))),
    );
    put("selected_rank", collect(&replicates, |r| r.selected_rank.map(|k| k as f64)));

    let rank_counts = (protocol == Protocol::RankTuning).then(|| {
        let mut counts = BTreeMap::new();
        for r in replicates.iter().filter(|r| !r.failed()) {
            if let Some(k) = r.selected_rank {
                *counts.entry(k).or_insert(0) += 1;
            }
        }
        counts
    });
    let failures = replicates.iter().filter(|r| r.failed()).count();
    Ok(ExperimentReport { spec: spec.clone(), protocol, replicates, failures, aggregates, rank_counts })
}

/// Expected observation fraction under the truth: mean of the observation
/// probabilities over all entries.
pub fn expected_observed_fraction(truth: &ModelState) -> f64 {
    let x = truth.cp.reconstruct_full();
    x.as_slice().iter().map(|&v| obs_prob(&truth.theta, v)).sum::<f64>() / x.len() as f64
}
