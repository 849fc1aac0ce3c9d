//! Order-3 dense tensors, observation masks and the CP low-rank model.
//!
//! Every tensor is stored row-major: entry `(i, j, k)` lives at
//! `(i * d2 + j) * d3 + k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm constraint of CP factor columns.
pub const UNIT_NORM_TOL: f64 = 1e-10;

pub type Dims = [usize; 3];

#[inline]
pub fn linear_index(dims: Dims, [i, j, k]: [usize; 3]) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

#[inline]
pub fn multi_index(dims: Dims, e: usize) -> [usize; 3] {
    let k = e % dims[2];
    let ij = e / dims[2];
    [ij / dims[1], ij % dims[1], k]
}

pub fn num_entries(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Dimension(format!("all dimensions must be >= 1, got {dims:?}")));
    }
    Ok(())
}

fn check_index(dims: Dims, idx: [usize; 3]) -> Result<()> {
    if idx.iter().zip(dims.iter()).any(|(&a, &d)| a >= d) {
        return Err(Error::Bounds { index: idx, dims });
    }
    Ok(())
}

/// Dense real tensor with three modes.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor3 {
    dims: Dims,
    values: Vec<f64>,
}

impl DenseTensor3 {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if values.len() != num_entries(dims) {
            return Err(Error::Dimension(format!(
                "expected {} values for dims {dims:?}, got {}",
                num_entries(dims),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite tensor entry {v}")));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self { dims, values: vec![0.0; num_entries(dims)] })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> f64) -> Result<Self> {
        check_dims(dims)?;
        let values = (0..num_entries(dims)).map(|e| f(multi_index(dims, e))).collect();
        Self::new(dims, values)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, idx: [usize; 3]) -> Result<f64> {
        check_index(self.dims, idx)?;
        Ok(self.values[linear_index(self.dims, idx)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Entrywise map into a new tensor.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        Self::new(self.dims, self.values.iter().map(|&v| f(v)).collect())
    }
}

/// Binary observation mask `D`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, values: Vec<bool>) -> Result<Self> {
        check_dims(dims)?;
        if values.len() != num_entries(dims) {
            return Err(Error::Dimension(format!(
                "mask has {} entries, dims {dims:?} need {}",
                values.len(),
                num_entries(dims)
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn full(dims: Dims, value: bool) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self { dims, values: vec![value; num_entries(dims)] })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, idx: [usize; 3]) -> Result<bool> {
        check_index(self.dims, idx)?;
        Ok(self.values[linear_index(self.dims, idx)])
    }

    pub fn count_observed(&self) -> usize {
        self.values.iter().filter(|&&d| d).count()
    }

    pub fn observed_fraction(&self) -> f64 {
        self.count_observed() as f64 / self.values.len() as f64
    }
}

/// Observation mask together with the observed values.
///
/// `omega` is the lexicographically sorted list of observed indices and
/// `y_obs[m]` is the value observed at `omega[m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedData {
    mask: Mask,
    omega: Vec<[usize; 3]>,
    y_obs: Vec<f64>,
}

impl MaskedData {
    /// Builds from a list of `(index, value)` observations in any order.
    pub fn from_observations(dims: Dims, mut obs: Vec<([usize; 3], f64)>) -> Result<Self> {
        check_dims(dims)?;
        for (idx, y) in &obs {
            check_index(dims, *idx)?;
            if !y.is_finite() {
                return Err(Error::InvalidValue(format!("non-finite observation at {idx:?}")));
            }
        }
        obs.sort_by_key(|a| a.0);
        if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
            let [i, j, k] = w[0].0;
            return Err(Error::Duplicate { i, j, k });
        }
        let mut mask = vec![false; num_entries(dims)];
        for (idx, _) in &obs {
            mask[linear_index(dims, *idx)] = true;
        }
        let (omega, y_obs) = obs.into_iter().unzip();
        Ok(Self { mask: Mask { dims, values: mask }, omega, y_obs })
    }

    /// Keeps the entries of `y` where `mask` is set.
    pub fn from_dense(y: &DenseTensor3, mask: &Mask) -> Result<Self> {
        if y.dims() != mask.dims() {
            return Err(Error::Dimension(format!(
                "value dims {:?} != mask dims {:?}",
                y.dims(),
                mask.dims()
            )));
        }
        let dims = y.dims();
        let mut omega = Vec::with_capacity(mask.count_observed());
        let mut y_obs = Vec::with_capacity(omega.capacity());
        for (e, (&d, &v)) in mask.as_slice().iter().zip(y.as_slice()).enumerate() {
            if d {
                omega.push(multi_index(dims, e));
                y_obs.push(v);
            }
        }
        Ok(Self { mask: mask.clone(), omega, y_obs })
    }

    pub fn dims(&self) -> Dims {
        self.mask.dims
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn omega(&self) -> &[[usize; 3]] {
        &self.omega
    }

    pub fn y_obs(&self) -> &[f64] {
        &self.y_obs
    }

    pub fn num_observed(&self) -> usize {
        self.omega.len()
    }

    /// Observed values scattered into a dense tensor, zero elsewhere.
    pub fn dense_values(&self) -> Vec<f64> {
        let mut y = vec![0.0; num_entries(self.dims())];
        for (idx, &v) in self.omega.iter().zip(&self.y_obs) {
            y[linear_index(self.dims(), *idx)] = v;
        }
        y
    }

    pub fn iter(&self) -> impl Iterator<Item = ([usize; 3], f64)> + '_ {
        self.omega.iter().copied().zip(self.y_obs.iter().copied())
    }
}

/// Splits a vector into its unit direction and Euclidean norm.
pub fn normalize_column(vec: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateFactor(format!("cannot normalize a vector of norm {norm}")));
    }
    Ok((vec.iter().map(|v| v / norm).collect(), norm))
}

/// Rank-R CP model `sum_r lambda_r u_r o v_r o w_r` with unit-norm factor
/// columns and positive weights.
///
/// Factors are stored column-wise: `u[r]` is the mode-1 vector of component `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CPModel {
    lambdas: Vec<f64>,
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
}

impl CPModel {
    pub fn new(lambdas: Vec<f64>, u: Vec<Vec<f64>>, v: Vec<Vec<f64>>, w: Vec<Vec<f64>>) -> Result<Self> {
        let model = Self { lambdas, u, v, w };
        model.validate()?;
        Ok(model)
    }

    /// Normalizes arbitrary columns, absorbing norms into the weights and
    /// sign into two modes so that every weight ends up positive.
    pub fn from_unnormalized(
        weights: Vec<f64>,
        u: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        w: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let rank = weights.len();
        if u.len() != rank || v.len() != rank || w.len() != rank {
            return Err(Error::Dimension("factor count differs from weight count".into()));
        }
        let (mut lambdas, mut us, mut vs, mut ws) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for r in 0..rank {
            let (mut ur, nu) = normalize_column(&u[r])?;
            let (mut vr, nv) = normalize_column(&v[r])?;
            let (wr, nw) = normalize_column(&w[r])?;
            let mut lam = weights[r] * nu * nv * nw;
            if lam < 0.0 {
                lam = -lam;
                ur.iter_mut().for_each(|x| *x = -*x);
                vr.iter_mut().for_each(|x| *x = -*x);
            }
            lambdas.push(lam);
            us.push(ur);
            vs.push(vr);
            ws.push(wr);
        }
        Self::new(lambdas, us, vs, ws)
    }

    fn validate(&self) -> Result<()> {
        let rank = self.lambdas.len();
        if rank == 0 {
            return Err(Error::Dimension("rank must be >= 1".into()));
        }
        if self.u.len() != rank || self.v.len() != rank || self.w.len() != rank {
            return Err(Error::Dimension("factor count differs from rank".into()));
        }
        let dims = [self.u[0].len(), self.v[0].len(), self.w[0].len()];
        check_dims(dims)?;
        if rank > dims.iter().copied().min().unwrap_or(0) {
            return Err(Error::Dimension(format!("rank {rank} exceeds min dimension of {dims:?}")));
        }
        for (r, &lam) in self.lambdas.iter().enumerate() {
            if !(lam > 0.0 && lam.is_finite()) {
                return Err(Error::DegenerateFactor(format!("lambda_{r} = {lam} is not positive")));
            }
        }
        for (mode, cols) in [&self.u, &self.v, &self.w].into_iter().enumerate() {
            for (r, col) in cols.iter().enumerate() {
                if col.len() != dims[mode] {
                    return Err(Error::Dimension(format!("mode {mode} column {r} has wrong length")));
                }
                let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL || col.iter().any(|x| !x.is_finite()) {
                    return Err(Error::DegenerateFactor(format!(
                        "mode {mode} column {r} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn dims(&self) -> Dims {
        [self.u[0].len(), self.v[0].len(), self.w[0].len()]
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn u(&self) -> &[Vec<f64>] {
        &self.u
    }

    pub fn v(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn w(&self) -> &[Vec<f64>] {
        &self.w
    }

    /// Factor columns of one mode (0 = u, 1 = v, 2 = w).
    pub fn factor(&self, mode: usize) -> &[Vec<f64>] {
        match mode {
            0 => &self.u,
            1 => &self.v,
            _ => &self.w,
        }
    }

    pub(crate) fn factor_mut(&mut self, mode: usize) -> &mut Vec<Vec<f64>> {
        match mode {
            0 => &mut self.u,
            1 => &mut self.v,
            _ => &mut self.w,
        }
    }

    pub(crate) fn lambdas_mut(&mut self) -> &mut Vec<f64> {
        &mut self.lambdas
    }

    pub fn reconstruct_entry(&self, idx: [usize; 3]) -> Result<f64> {
        check_index(self.dims(), idx)?;
        let [i, j, k] = idx;
        Ok((0..self.rank()).map(|r| self.lambdas[r] * self.u[r][i] * self.v[r][j] * self.w[r][k]).sum())
    }

    pub fn reconstruct_full(&self) -> DenseTensor3 {
        let dims = self.dims();
        let mut out = vec![0.0; num_entries(dims)];
        self.accumulate_into(&mut out);
        DenseTensor3 { dims, values: out }
    }

    pub(crate) fn accumulate_into(&self, out: &mut [f64]) {
        let [_, d2, d3] = self.dims();
        out.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..self.rank() {
            let (u, v, w) = (&self.u[r], &self.v[r], &self.w[r]);
            for (i, &ui) in u.iter().enumerate() {
                let a = self.lambdas[r] * ui;
                let slab = &mut out[i * d2 * d3..(i + 1) * d2 * d3];
                for (j, &vj) in v.iter().enumerate() {
                    let b = a * vj;
                    for (x, &wk) in slab[j * d3..(j + 1) * d3].iter_mut().zip(w) {
                        *x += b * wk;
                    }
                }
            }
        }
    }

    /// Negates the columns of two modes of component `r`; the reconstruction
    /// is unchanged.
    pub(crate) fn flip_pair(&mut self, r: usize, modes: (usize, usize)) {
        for m in [modes.0, modes.1] {
            self.factor_mut(m)[r].iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Permutes and sign-flips the components of `est` to match `truth`.
///
/// Matching is greedy on the summed absolute cosine similarity over the three
/// modes. Signs are changed on pairs of modes only, so weights stay positive
/// and the reconstruction is untouched. Greedy matching can miss the optimal
/// assignment when components are strongly coherent.
pub fn align_components(est: &CPModel, truth: &CPModel) -> Result<CPModel> {
    if est.rank() != truth.rank() {
        return Err(Error::Dimension(format!(
            "rank mismatch: estimate {} vs truth {}",
            est.rank(),
            truth.rank()
        )));
    }
    if est.dims() != truth.dims() {
        return Err(Error::Dimension(format!("dims mismatch: {:?} vs {:?}", est.dims(), truth.dims())));
    }
    let rank = est.rank();
    let cosines = |r: usize, s: usize| -> [f64; 3] {
        [0, 1, 2].map(|m| dot(&est.factor(m)[r], &truth.factor(m)[s]))
    };
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(rank * rank);
    for r in 0..rank {
        for s in 0..rank {
            let score = cosines(r, s).iter().map(|c| c.abs()).sum();
            pairs.push((score, r, s));
        }
    }
    // highest similarity first; ties resolved by index for determinism
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assigned = vec![None; rank];
    let (mut used_est, mut used_truth) = (vec![false; rank], vec![false; rank]);
    for (_, r, s) in pairs {
        if !used_est[r] && !used_truth[s] {
            used_est[r] = true;
            used_truth[s] = true;
            assigned[s] = Some(r);
        }
    }

    let mut out = est.clone();
    for (s, r) in assigned.into_iter().enumerate() {
        let r = r.expect("greedy matching covers every component");
        out.lambdas[s] = est.lambdas[r];
        for m in 0..3 {
            out.factor_mut(m)[s] = est.factor(m)[r].clone();
        }
        let c = cosines(r, s);
        let candidates = [None, Some((0, 1)), Some((0, 2)), Some((1, 2))];
        let best = candidates
            .into_iter()
            .max_by(|a, b| {
                let score = |flip: &Option<(usize, usize)>| -> f64 {
                    (0..3)
                        .map(|m| match flip {
                            Some((p, q)) if m == *p || m == *q => -c[m],
                            _ => c[m],
                        })
                        .sum()
                };
                score(a).total_cmp(&score(b))
            })
            .flatten();
        if let Some(modes) = best {
            out.flip_pair(s, modes);
        }
    }
    Ok(out)
}
