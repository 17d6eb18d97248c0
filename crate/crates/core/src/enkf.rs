//! Local ensemble transform Kalman filter over the augmented state `[x; F]`,
//! with Gaussian observation localization and fixed or adaptive
//! multiplicative inflation.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::linalg::EIGEN_FLOOR;
use crate::synth::{ObsEntry, ObsKind, ObservationBatch};
use crate::{Error, Result};

/// Absolute value beyond which a cycle is declared diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Ensemble of augmented states; column `i` is member `i`, rows `0..n_x` hold
/// `X` and rows `n_x..2 n_x` hold the parameter field `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedEnsemble {
    n_x: usize,
    members: DMatrix<f64>,
}

impl AugmentedEnsemble {
    pub fn new(n_x: usize, members: DMatrix<f64>) -> Result<Self> {
        if n_x == 0 || members.nrows() != 2 * n_x {
            return Err(Error::InvalidInput(format!(
                "augmented ensemble needs {} rows, got {}",
                2 * n_x,
                members.nrows()
            )));
        }
        if members.ncols() < 2 {
            return Err(Error::InvalidInput("ensemble needs at least two members".into()));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite ensemble value".into()));
        }
        Ok(Self { n_x, members })
    }

    /// Builds the ensemble from per-member state and parameter vectors.
    pub fn from_parts(states: &[Vec<f64>], params: &[Vec<f64>]) -> Result<Self> {
        if states.len() != params.len() || states.is_empty() {
            return Err(Error::InvalidInput("state and parameter member counts differ".into()));
        }
        let n_x = states[0].len();
        if states.iter().chain(params).any(|m| m.len() != n_x) {
            return Err(Error::InvalidInput("ragged ensemble members".into()));
        }
        let members = DMatrix::from_fn(2 * n_x, states.len(), |r, c| {
            if r < n_x {
                states[c][r]
            } else {
                params[c][r - n_x]
            }
        });
        Self::new(n_x, members)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn k(&self) -> usize {
        self.members.ncols()
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Member deviations from the ensemble mean.
    pub fn perturbations(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut p = self.members.clone();
        for mut col in p.column_iter_mut() {
            col -= &mean;
        }
        p
    }

    pub fn state_mean(&self) -> Vec<f64> {
        self.mean().rows(0, self.n_x).iter().copied().collect()
    }

    pub fn param_mean(&self) -> Vec<f64> {
        self.mean().rows(self.n_x, self.n_x).iter().copied().collect()
    }

    /// State vector of member `i`.
    pub fn member_state(&self, i: usize) -> Vec<f64> {
        self.members.column(i).rows(0, self.n_x).iter().copied().collect()
    }

    pub fn member_params(&self, i: usize) -> Vec<f64> {
        self.members.column(i).rows(self.n_x, self.n_x).iter().copied().collect()
    }

    pub fn set_member_state(&mut self, i: usize, x: &[f64]) {
        self.members.column_mut(i).rows_mut(0, self.n_x).copy_from_slice(x);
    }

    /// Per-row sample variance with the (k - 1) denominator.
    pub fn row_variance(&self, row: usize) -> f64 {
        let r = self.members.row(row);
        let m = r.mean();
        r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (self.k() as f64 - 1.0)
    }

    /// Row index of the ensemble variable an observation measures.
    pub fn obs_row(&self, e: &ObsEntry) -> usize {
        match e.kind {
            ObsKind::State => e.location,
            ObsKind::PseudoParameter => self.n_x + e.location,
        }
    }

    fn is_diverged(&self) -> bool {
        self.members
            .iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD)
    }
}

/// Scales perturbations row by row by `sqrt(factors[row])`; means are kept.
pub fn inflate_rows(ens: &AugmentedEnsemble, factors: &[f64]) -> AugmentedEnsemble {
    assert_eq!(factors.len(), 2 * ens.n_x);
    let mean = ens.mean();
    let mut out = ens.members.clone();
    for (r, &rho) in factors.iter().enumerate() {
        let s = rho.sqrt();
        for v in out.row_mut(r).iter_mut() {
            *v = mean[r] + s * (*v - mean[r]);
        }
    }
    AugmentedEnsemble {
        n_x: ens.n_x,
        members: out,
    }
}

/// Blockwise multiplicative inflation: `X` perturbations by `sqrt(rho_x)`,
/// `F` perturbations by `sqrt(rho_theta)`.
pub fn inflate_fixed(ens: &AugmentedEnsemble, rho_x: f64, rho_theta: f64) -> Result<AugmentedEnsemble> {
    if !(rho_x >= 1.0) || !(rho_theta >= 1.0) {
        return Err(Error::InvalidInput(format!(
            "inflation factors must be >= 1, got {rho_x}, {rho_theta}"
        )));
    }
    let n = ens.n_x;
    let factors: Vec<f64> = (0..2 * n).map(|r| if r < n { rho_x } else { rho_theta }).collect();
    Ok(inflate_rows(ens, &factors))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationConfig {
    pub sigma: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self { sigma: 3.0 }
    }
}

impl LocalizationConfig {
    /// No localization: every observation enters every local analysis with weight 1.
    pub fn global() -> Self {
        Self { sigma: f64::INFINITY }
    }

    pub fn cutoff(&self) -> f64 {
        2.0 * (10.0f64 / 3.0).sqrt() * self.sigma
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("localization sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Periodic grid distance on a ring of `n` points.
pub fn periodic_distance(i: usize, j: usize, n: usize) -> f64 {
    let d = i.abs_diff(j) % n;
    d.min(n - d) as f64
}

/// Gaussian taper with a hard zero at and beyond the cutoff.
pub fn taper(r: f64, cfg: &LocalizationConfig) -> f64 {
    if r >= cfg.cutoff() {
        0.0
    } else {
        (-0.5 * (r / cfg.sigma).powi(2)).exp()
    }
}

/// Adaptive multiplicative inflation state, one estimate per analyzed variable.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveInflation {
    pub rho: Vec<f64>,
    pub prior_variance: f64,
    pub lower: f64,
    pub upper: f64,
}

impl AdaptiveInflation {
    pub const DEFAULT_PRIOR_VARIANCE: f64 = 0.04;
    pub const DEFAULT_INITIAL: f64 = 1.05;

    pub fn new(n_vars: usize, initial: f64, prior_variance: f64) -> Self {
        Self {
            rho: vec![initial; n_vars],
            prior_variance,
            lower: 1.0,
            upper: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inflation {
    Fixed { rho_x: f64, rho_theta: f64 },
    Adaptive(AdaptiveInflation),
}

impl Inflation {
    pub fn validate(&self, n_x: usize) -> Result<()> {
        match self {
            Inflation::Fixed { rho_x, rho_theta } => {
                if !(*rho_x >= 1.0) || !(*rho_theta >= 1.0) {
                    return Err(Error::Config(format!(
                        "fixed inflation factors must be >= 1, got {rho_x}, {rho_theta}"
                    )));
                }
            }
            Inflation::Adaptive(a) => {
                if a.rho.len() != 2 * n_x {
                    return Err(Error::Config("adaptive inflation state has wrong length".into()));
                }
                if !(a.prior_variance >= 0.0) || !(a.lower <= a.upper) {
                    return Err(Error::Config("invalid adaptive inflation settings".into()));
                }
            }
        }
        Ok(())
    }

    /// Current parameter-block factors.
    pub fn parameter_factors(&self, n_x: usize) -> Vec<f64> {
        match self {
            Inflation::Fixed { rho_theta, .. } => vec![*rho_theta; n_x],
            Inflation::Adaptive(a) => a.rho[n_x..].to_vec(),
        }
    }
}

/// Weights of one local analysis in ensemble space.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAnalysis {
    pub w_mean: DVector<f64>,
    pub p_tilde_a: DMatrix<f64>,
    pub w_matrix: DMatrix<f64>,
}

/// Ensemble-space solve.
///
/// `y` holds observation-space perturbations (one row per observation),
/// `d` the innovations and `r_inv` the tapered inverse error variances.
/// Returns `P = [(k-1) I + Y^T R^-1 Y]^-1`, `w = P Y^T R^-1 d` and
/// `W = [(k-1) P]^{1/2}`.
pub fn letkf_local_solve(y: &DMatrix<f64>, d: &DVector<f64>, r_inv: &[f64]) -> Result<LocalAnalysis> {
    let (p, k) = y.shape();
    if d.len() != p || r_inv.len() != p {
        return Err(Error::InvalidInput("local solve dimension mismatch".into()));
    }
    if r_inv.iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::InvalidInput("tapered R^-1 must be non-negative".into()));
    }
    let km1 = k as f64 - 1.0;
    let mut c = y.transpose();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col *= r_inv[j];
    }
    let mut a = &c * y;
    for i in 0..k {
        a[(i, i)] += km1;
    }
    let a = (&a + a.transpose()) * 0.5;
    let eig = a.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "LETKF inner matrix has eigenvalue {min:e}"
        )));
    }
    let q = &eig.eigenvectors;
    let lam = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let p_tilde_a = q * DMatrix::from_diagonal(&lam.map(|l| 1.0 / l)) * q.transpose();
    let w_matrix = q * DMatrix::from_diagonal(&lam.map(|l| (km1 / l).sqrt())) * q.transpose();
    let w_mean = &p_tilde_a * (&c * d);
    Ok(LocalAnalysis {
        w_mean,
        p_tilde_a: (&p_tilde_a + p_tilde_a.transpose()) * 0.5,
        w_matrix: (&w_matrix + w_matrix.transpose()) * 0.5,
    })
}

/// Scalar Gaussian update of a multiplicative inflation estimate from
/// innovation statistics.
///
/// The observation-space estimate is `(d^T R^-1 d - p) / tr` with
/// `tr = tr(R^-1 Y Y^T) / (k - 1)` and `p` the summed taper weights, its
/// variance is `2/p ((rho_b tr + p) / tr)^2`, and the two are combined with
/// the prior `(rho_b, v_b)` by inverse-variance weighting. The result is
/// clamped to `[lower, upper]`. A zero trace leaves the prior unchanged.
pub fn adaptive_inflation_update(
    d: &DVector<f64>,
    y: &DMatrix<f64>,
    r_inv: &[f64],
    p_eff: f64,
    rho_b: f64,
    v_b: f64,
    bounds: (f64, f64),
) -> f64 {
    let k = y.ncols() as f64;
    let tr: f64 = y
        .row_iter()
        .zip(r_inv)
        .map(|(row, ri)| ri * row.norm_squared())
        .sum::<f64>()
        / (k - 1.0);
    if !(tr > 0.0) || !(p_eff > 0.0) {
        return rho_b;
    }
    let dd: f64 = d.iter().zip(r_inv).map(|(di, ri)| ri * di * di).sum();
    let rho_o = (dd - p_eff) / tr;
    let v_o = 2.0 / p_eff * ((rho_b * tr + p_eff) / tr).powi(2);
    let rho_a = (rho_b * v_o + rho_o * v_b) / (v_b + v_o);
    rho_a.clamp(bounds.0, bounds.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzeOptions {
    /// When false the parameter rows are left uninflated (their spread was
    /// already set elsewhere, e.g. by the climatology transform).
    pub inflate_parameters: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            inflate_parameters: true,
        }
    }
}

/// Taper of observation `e` for analyzed ensemble row `row`.
///
/// Pseudo-parameter observations only touch their own parameter.
fn obs_weight(e: &ObsEntry, row: usize, n_x: usize, loc: &LocalizationConfig) -> f64 {
    match e.kind {
        ObsKind::PseudoParameter => {
            if row == n_x + e.location {
                1.0
            } else {
                0.0
            }
        }
        ObsKind::State => taper(periodic_distance(row % n_x, e.location, n_x), loc),
    }
}

struct LocalObs {
    idx: Vec<usize>,
    r_inv: Vec<f64>,
    weight_sum: f64,
}

fn select_local(entries: &[ObsEntry], row: usize, n_x: usize, loc: &LocalizationConfig) -> LocalObs {
    let mut sel = LocalObs {
        idx: vec![],
        r_inv: vec![],
        weight_sum: 0.0,
    };
    for (j, e) in entries.iter().enumerate() {
        let w = obs_weight(e, row, n_x, loc);
        if w > 0.0 {
            sel.idx.push(j);
            sel.r_inv.push(w / e.error_variance);
            sel.weight_sum += w;
        }
    }
    sel
}

fn local_innovation(
    entries: &[ObsEntry],
    sel: &LocalObs,
    ens: &AugmentedEnsemble,
    mean: &DVector<f64>,
    pert: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let k = ens.k();
    let mut y = DMatrix::zeros(sel.idx.len(), k);
    let mut d = DVector::zeros(sel.idx.len());
    for (j, &oi) in sel.idx.iter().enumerate() {
        let r = ens.obs_row(&entries[oi]);
        y.row_mut(j).copy_from(&pert.row(r));
        d[j] = entries[oi].value - mean[r];
    }
    (y, d)
}

/// One analysis cycle.
///
/// Each ensemble row is analyzed on its own with the observations whose
/// taper at its grid point is positive. Background perturbations are
/// inflated row-wise before the local solves; in adaptive mode each row's
/// factor is first updated from the raw innovation statistics of its local
/// observations. Errors with `Diverged` if the background or analysis holds
/// a non-finite value or one beyond [`DIVERGENCE_THRESHOLD`].
pub fn analyze(
    ens: &AugmentedEnsemble,
    obs: &ObservationBatch,
    loc: &LocalizationConfig,
    inflation: &mut Inflation,
    opts: AnalyzeOptions,
) -> Result<AugmentedEnsemble> {
    let n_x = ens.n_x;
    let n_rows = 2 * n_x;
    let diverged = || Error::Diverged { time_mtu: obs.time };
    if ens.is_diverged() {
        return Err(diverged());
    }
    obs.validate(n_x)?;
    inflation.validate(n_x)?;
    let entries = &obs.entries;

    let locals: Vec<LocalObs> = (0..n_rows).map(|r| select_local(entries, r, n_x, loc)).collect();

    let mut factors: Vec<f64> = match inflation {
        Inflation::Fixed { rho_x, rho_theta } => {
            (0..n_rows).map(|r| if r < n_x { *rho_x } else { *rho_theta }).collect()
        }
        Inflation::Adaptive(a) => {
            let mean = ens.mean();
            let pert = ens.perturbations();
            for (r, sel) in locals.iter().enumerate() {
                if sel.idx.is_empty() {
                    continue;
                }
                let (y, d) = local_innovation(entries, sel, ens, &mean, &pert);
                a.rho[r] = adaptive_inflation_update(
                    &d,
                    &y,
                    &sel.r_inv,
                    sel.weight_sum,
                    a.rho[r],
                    a.prior_variance,
                    (a.lower, a.upper),
                );
            }
            a.rho.clone()
        }
    };
    if !opts.inflate_parameters {
        factors[n_x..].fill(1.0);
    }

    let inflated = inflate_rows(ens, &factors);
    let mean = inflated.mean();
    let pert = inflated.perturbations();
    let k = ens.k();
    let mut out = DMatrix::zeros(n_rows, k);
    let mut cache: HashMap<(Vec<usize>, Vec<u64>), LocalAnalysis> = HashMap::new();

    for (r, sel) in locals.iter().enumerate() {
        let xr = pert.row(r);
        if sel.idx.is_empty() {
            for c in 0..k {
                out[(r, c)] = mean[r] + xr[c];
            }
            continue;
        }
        let key = (sel.idx.clone(), sel.r_inv.iter().map(|v| v.to_bits()).collect());
        let la = match cache.get(&key) {
            Some(la) => la,
            None => {
                let (y, d) = local_innovation(entries, sel, &inflated, &mean, &pert);
                let la = letkf_local_solve(&y, &d, &sel.r_inv)?;
                cache.entry(key).or_insert(la)
            }
        };
        let inc = (xr * &la.w_mean)[(0, 0)];
        let spread = xr * &la.w_matrix;
        for c in 0..k {
            out[(r, c)] = mean[r] + inc + spread[(0, c)];
        }
    }

    let analysis = AugmentedEnsemble { n_x, members: out };
    if analysis.is_diverged() {
        return Err(diverged());
    }
    Ok(analysis)
}
