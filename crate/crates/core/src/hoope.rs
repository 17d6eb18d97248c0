//! Climatology-aware parameter estimation: pseudo observations of the
//! parameters (PSO) and the regression-to-climatology transform (RTC), plus
//! closed-form combinations of the background with the climatology used to
//! check them.

use nalgebra::{DMatrix, DVector};

use crate::batchopt::ClimatologyPrior;
use crate::enkf::AugmentedEnsemble;
use crate::linalg::{spd_inv_sqrt, spd_sqrt, symmetrize};
use crate::synth::{ObsEntry, ObsKind, ObservationBatch};
use crate::{Error, Result};

/// Appends one pseudo observation per parameter: value `theta_c[i]`,
/// error variance `c_diag[i]`.
pub fn pso_augment(obs: &ObservationBatch, prior: &ClimatologyPrior) -> ObservationBatch {
    let mut out = obs.clone();
    out.entries
        .extend(prior.theta_c.iter().zip(&prior.c_diag).enumerate().map(|(i, (&m, &v))| ObsEntry {
            location: i,
            value: m,
            error_variance: v,
            kind: ObsKind::PseudoParameter,
        }));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtcTransformed {
    pub new_mean: Vec<f64>,
    /// One row per parameter, one column per member.
    pub new_perturbations: DMatrix<f64>,
}

impl RtcTransformed {
    pub fn members(&self) -> DMatrix<f64> {
        let mut m = self.new_perturbations.clone();
        for (r, &mu) in self.new_mean.iter().enumerate() {
            m.row_mut(r).add_scalar_mut(mu);
        }
        m
    }
}

/// Per-parameter regression of the background ensemble towards the
/// climatology.
///
/// With `s_b2` the (k - 1) sample variance of parameter `i` and `s_c2 = c_diag[i]`,
/// the new mean is `(rho s_b2 theta_c + s_c2 theta_b) / (s_c2 + rho s_b2)` and
/// perturbations are scaled by `sqrt(rho) s_c / sqrt(s_c2 + rho s_b2)`.
/// `theta_ens` has one row per parameter and one column per member.
pub fn rtc_transform(theta_ens: &DMatrix<f64>, prior: &ClimatologyPrior, rho_theta: &[f64]) -> Result<RtcTransformed> {
    let (n_p, k) = theta_ens.shape();
    if prior.n_params() != n_p || rho_theta.len() != n_p {
        return Err(Error::InvalidInput(format!(
            "parameter count mismatch: ensemble {n_p}, prior {}, rho {}",
            prior.n_params(),
            rho_theta.len()
        )));
    }
    if k < 2 {
        return Err(Error::InvalidInput("ensemble needs at least two members".into()));
    }
    let mut new_mean = Vec::with_capacity(n_p);
    let mut new_perturbations = DMatrix::zeros(n_p, k);
    for i in 0..n_p {
        let sc2 = prior.c_diag[i];
        if !(sc2 > 0.0) {
            return Err(Error::InvalidInput(format!("climatology variance {sc2} at parameter {i}")));
        }
        let rho = rho_theta[i];
        let row = theta_ens.row(i);
        let mean = row.mean();
        let sb2 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0);
        let denom = sc2 + rho * sb2;
        new_mean.push((rho * sb2 * prior.theta_c[i] + sc2 * mean) / denom);
        let scale = rho.sqrt() * sc2.sqrt() / denom.sqrt();
        for c in 0..k {
            new_perturbations[(i, c)] = scale * (row[c] - mean);
        }
    }
    Ok(RtcTransformed {
        new_mean,
        new_perturbations,
    })
}

/// Applies [`rtc_transform`] to the parameter block; state rows are untouched.
pub fn apply_rtc(ens: &AugmentedEnsemble, prior: &ClimatologyPrior, rho_theta: &[f64]) -> Result<AugmentedEnsemble> {
    let n = ens.n_x();
    let theta = ens.members().rows(n, n).into_owned();
    let t = rtc_transform(&theta, prior, rho_theta)?;
    let mut m = ens.members().clone();
    m.rows_mut(n, n).copy_from(&t.members());
    AugmentedEnsemble::new(n, m)
}

/// Variance multiplier of the parameter spread under the transform:
/// `rho s_c2 / (s_c2 + rho s_b2)`.
pub fn effective_inflation(rho_theta: f64, sigma_c2: f64, sigma_b2: f64) -> f64 {
    rho_theta * sigma_c2 / (sigma_c2 + rho_theta * sigma_b2)
}

/// Background moments combined with the climatology.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedMoments {
    pub x_mean: DVector<f64>,
    pub theta_mean: DVector<f64>,
    pub bx: DMatrix<f64>,
    pub bx_theta: DMatrix<f64>,
    pub b_theta: DMatrix<f64>,
}

/// Background block moments, as consumed by the combination formulas.
#[derive(Debug, Clone, Copy)]
pub struct BackgroundBlocks<'a> {
    pub bx: &'a DMatrix<f64>,
    pub bx_theta: &'a DMatrix<f64>,
    pub b_theta: &'a DMatrix<f64>,
    pub x_mean: &'a DVector<f64>,
    pub theta_mean: &'a DVector<f64>,
}

impl BackgroundBlocks<'_> {
    fn check(&self, c: &DMatrix<f64>, theta_c: &DVector<f64>) -> Result<()> {
        let (nx, np) = (self.x_mean.len(), self.theta_mean.len());
        let ok = self.bx.shape() == (nx, nx)
            && self.bx_theta.shape() == (nx, np)
            && self.b_theta.shape() == (np, np)
            && c.shape() == (np, np)
            && theta_c.len() == np;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("inconsistent block dimensions".into()))
        }
    }
}

/// Closed-form combination of the background with `N(theta_c, C)` on the
/// parameters, leaving the state marginal uninformed:
///
/// ```text
/// x~  = x_b + Bxt (C + Bt)^-1 (theta_c - theta_b)
/// t~  = C (C + Bt)^-1 theta_b + Bt (C + Bt)^-1 theta_c
/// Bx~ = Bx - Bxt (C + Bt)^-1 Btx
/// Bxt~ = Bxt (C + Bt)^-1 C
/// Bt~ = (C^-1 + Bt^-1)^-1
/// ```
pub fn combine_background_climatology_exact(
    bg: BackgroundBlocks<'_>,
    theta_c: &DVector<f64>,
    c: &DMatrix<f64>,
) -> Result<CombinedMoments> {
    bg.check(c, theta_c)?;
    let chol = symmetrize(&(c + bg.b_theta))
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("C + B_theta is singular".into()))?;
    let g_bt = chol.solve(bg.b_theta);
    let g_c = chol.solve(c);
    let btx = bg.bx_theta.transpose();
    let x_mean = bg.x_mean + bg.bx_theta * chol.solve(&(theta_c - bg.theta_mean));
    // C (C + Bt)^-1 = ((C + Bt)^-1 C)^T for symmetric C, Bt
    let theta_mean = g_c.transpose() * bg.theta_mean + g_bt.transpose() * theta_c;
    let bx = symmetrize(&(bg.bx - bg.bx_theta * chol.solve(&btx)));
    let bx_theta = bg.bx_theta * &g_c;
    let b_theta = symmetrize(&(bg.b_theta * &g_c));
    Ok(CombinedMoments {
        x_mean,
        theta_mean,
        bx,
        bx_theta,
        b_theta,
    })
}

/// Reference combination through the full augmented precision with a
/// pseudo state climatology `N(0, delta I)`; approaches the exact form as
/// `delta` grows. Uses dense LU inversion. With O(1) covariances it is
/// well conditioned for `delta` up to about 1e10.
pub fn combine_delta_limit_oracle(
    bg: BackgroundBlocks<'_>,
    theta_c: &DVector<f64>,
    c: &DMatrix<f64>,
    delta: f64,
) -> Result<CombinedMoments> {
    bg.check(c, theta_c)?;
    let (nx, np) = (bg.x_mean.len(), bg.theta_mean.len());
    let n = nx + np;
    let mut b = DMatrix::zeros(n, n);
    b.view_mut((0, 0), (nx, nx)).copy_from(bg.bx);
    b.view_mut((0, nx), (nx, np)).copy_from(bg.bx_theta);
    b.view_mut((nx, 0), (np, nx)).copy_from(&bg.bx_theta.transpose());
    b.view_mut((nx, nx), (np, np)).copy_from(bg.b_theta);
    let singular = || Error::NotPositiveDefinite("augmented covariance is singular".into());
    let b_inv = b.try_inverse().ok_or_else(singular)?;
    let c_inv = c.clone().try_inverse().ok_or_else(singular)?;
    let mut clim_prec = DMatrix::zeros(n, n);
    for i in 0..nx {
        clim_prec[(i, i)] = 1.0 / delta;
    }
    clim_prec.view_mut((nx, nx), (np, np)).copy_from(&c_inv);
    let post = (&b_inv + &clim_prec).try_inverse().ok_or_else(singular)?;
    let mut m = DVector::zeros(n);
    m.rows_mut(0, nx).copy_from(bg.x_mean);
    m.rows_mut(nx, np).copy_from(bg.theta_mean);
    let mut clim_term = DVector::zeros(n);
    clim_term.rows_mut(nx, np).copy_from(&(&c_inv * theta_c));
    let mean = &post * (&b_inv * m + clim_term);
    Ok(CombinedMoments {
        x_mean: mean.rows(0, nx).into_owned(),
        theta_mean: mean.rows(nx, np).into_owned(),
        bx: post.view((0, 0), (nx, nx)).into_owned(),
        bx_theta: post.view((0, nx), (nx, np)).into_owned(),
        b_theta: post.view((nx, nx), (np, np)).into_owned(),
    })
}

/// Optimal transport map between Gaussians applied to each sample column:
/// `T(t) = t~ + Bt^-1/2 (Bt^1/2 Bt~ Bt^1/2)^1/2 Bt^-1/2 (t - t_b)`.
pub fn ot_map_general(
    samples: &DMatrix<f64>,
    source_mean: &DVector<f64>,
    source_cov: &DMatrix<f64>,
    target_mean: &DVector<f64>,
    target_cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = source_mean.len();
    if samples.nrows() != n || target_mean.len() != n || source_cov.shape() != (n, n) || target_cov.shape() != (n, n) {
        return Err(Error::InvalidInput("transport map dimension mismatch".into()));
    }
    spd_sqrt(target_cov)?;
    let s_half = spd_sqrt(source_cov)?;
    let s_inv_half = spd_inv_sqrt(source_cov)?;
    let middle = spd_sqrt(&(&s_half * target_cov * &s_half))?;
    let a = &s_inv_half * middle * &s_inv_half;
    let mut out = samples.clone();
    for mut col in out.column_iter_mut() {
        let mapped = target_mean + &a * (&col - source_mean);
        col.copy_from(&mapped);
    }
    Ok(out)
}
