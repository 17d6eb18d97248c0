//! Two-scale Lorenz96 (the nature run) and its single-scale reduction with a
//! spatially varying forcing field (the forecast model), integrated with the
//! classical fourth-order Runge–Kutta scheme.
//!
//! Fast variables are stored flattened: `V[l, k]` (1-based `l`, `k`) lives at
//! `v[(k - 1) * n_z + (l - 1)]`. The flattened vector is treated as one
//! periodic ring of length `n_x * n_z`, so `V[l + n_z, k] = V[l, k + 1]` and the
//! last fast variable of the last grid cell wraps onto the first of the first.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dimensions and physical constants of the two-scale system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    /// Number of large-scale grid points.
    pub n_x: usize,
    /// Fast variables per large-scale grid point.
    pub n_z: usize,
    /// Constant large-scale forcing `S`.
    pub forcing: f64,
    /// Time-scale separation `xi`.
    pub timescale: f64,
    /// Coupling of the fast variables into the slow tendency, `h_x`.
    pub coupling_x: f64,
    /// Coupling of the slow variables into the fast tendency, `h_z`.
    pub coupling_z: f64,
    /// RK4 time step in MTU.
    pub dt: f64,
}

impl Default for ModelConstants {
    fn default() -> Self {
        Self {
            n_x: 9,
            n_z: 20,
            forcing: 14.0,
            timescale: 0.7,
            coupling_x: -2.0,
            coupling_z: 1.0,
            dt: 0.0005,
        }
    }
}

impl ModelConstants {
    pub fn validate(&self) -> Result<()> {
        if self.n_x < 4 {
            return Err(Error::Config(format!("n_x must be >= 4, got {}", self.n_x)));
        }
        if self.n_z < 4 {
            return Err(Error::Config(format!("n_z must be >= 4, got {}", self.n_z)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.timescale == 0.0 || !self.timescale.is_finite() {
            return Err(Error::Config("timescale must be finite and non-zero".into()));
        }
        Ok(())
    }

    /// Number of RK4 steps spanning `mtu` model time units.
    pub fn steps_for(&self, mtu: f64) -> usize {
        (mtu / self.dt).round() as usize
    }

    pub fn n_fast(&self) -> usize {
        self.n_x * self.n_z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoScaleState {
    pub x: Vec<f64>,
    /// Flattened fast variables, see the module docs for the index map.
    pub v: Vec<f64>,
}

impl TwoScaleState {
    pub fn zeros(c: &ModelConstants) -> Self {
        Self {
            x: vec![0.0; c.n_x],
            v: vec![0.0; c.n_fast()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|v| v.is_finite())
    }

    fn check(&self, c: &ModelConstants) {
        assert_eq!(self.x.len(), c.n_x, "slow state length mismatch");
        assert_eq!(self.v.len(), c.n_fast(), "fast state length mismatch");
    }

    /// Packs into a single `[x; v]` vector for the integrator.
    pub fn to_packed(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.x.len() + self.v.len());
        y.extend_from_slice(&self.x);
        y.extend_from_slice(&self.v);
        y
    }

    pub fn from_packed(y: &[f64], c: &ModelConstants) -> Self {
        Self {
            x: y[..c.n_x].to_vec(),
            v: y[c.n_x..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleScaleState {
    pub x: Vec<f64>,
}

/// Forcing field `F[k]` of the single-scale model; the estimated parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterField {
    pub f: Vec<f64>,
}

#[cfg(test)]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Sub-grid tendency `U[k] = (h_x / n_z) * sum_l V[l, k]`.
pub fn coupling_tendency(state: &TwoScaleState, c: &ModelConstants) -> Vec<f64> {
    state.check(c);
    coupling_from_fast(&state.v, c)
}

fn coupling_from_fast(v: &[f64], c: &ModelConstants) -> Vec<f64> {
    let scale = c.coupling_x / c.n_z as f64;
    v.chunks_exact(c.n_z)
        .map(|block| scale * block.iter().sum::<f64>())
        .collect()
}

/// The forcing field that makes the single-scale model reproduce the slow
/// tendency of the two-scale model: `F[k] = S + U[k]`.
pub fn true_parameter(state: &TwoScaleState, c: &ModelConstants) -> ParameterField {
    ParameterField {
        f: coupling_tendency(state, c)
            .into_iter()
            .map(|u| c.forcing + u)
            .collect(),
    }
}

/// Lorenz96 advection plus damping, `-X[k-1](X[k-2] - X[k+1]) - X[k]`, written
/// into `dx`; the caller adds the forcing.
#[inline]
fn advect_slow(x: &[f64], dx: &mut [f64]) {
    let n = x.len();
    for k in 0..n {
        let km1 = if k == 0 { n - 1 } else { k - 1 };
        let km2 = if k < 2 { n + k - 2 } else { k - 2 };
        let kp1 = if k + 1 == n { 0 } else { k + 1 };
        dx[k] = -x[km1] * (x[km2] - x[kp1]) - x[k];
    }
}

/// Right-hand side of the two-scale system on a packed `[x; v]` vector.
pub fn two_scale_rhs(c: &ModelConstants, y: &[f64], dy: &mut [f64]) {
    let (x, v) = y.split_at(c.n_x);
    let (dx, dv) = dy.split_at_mut(c.n_x);
    advect_slow(x, dx);
    let scale = c.coupling_x / c.n_z as f64;
    for (k, block) in v.chunks_exact(c.n_z).enumerate() {
        dx[k] += c.forcing + scale * block.iter().sum::<f64>();
    }
    let n = v.len();
    let inv_xi = 1.0 / c.timescale;
    for j in 0..n {
        let jp1 = if j + 1 == n { 0 } else { j + 1 };
        let jp2 = if j + 2 >= n { j + 2 - n } else { j + 2 };
        let jm1 = if j == 0 { n - 1 } else { j - 1 };
        let k = j / c.n_z;
        dv[j] = inv_xi * (-v[jp1] * (v[jp2] - v[jm1]) - v[j] + c.coupling_z * x[k]);
    }
}

/// Right-hand side of the single-scale model with forcing field `f`.
pub fn single_scale_rhs(f: &[f64], x: &[f64], dx: &mut [f64]) {
    advect_slow(x, dx);
    for (d, fk) in dx.iter_mut().zip(f) {
        *d += fk;
    }
}

pub fn tendency_two_scale(state: &TwoScaleState, c: &ModelConstants) -> TwoScaleState {
    state.check(c);
    let y = state.to_packed();
    let mut dy = vec![0.0; y.len()];
    two_scale_rhs(c, &y, &mut dy);
    TwoScaleState::from_packed(&dy, c)
}

pub fn tendency_single_scale(
    state: &SingleScaleState,
    params: &ParameterField,
    c: &ModelConstants,
) -> SingleScaleState {
    assert_eq!(state.x.len(), c.n_x);
    assert_eq!(params.f.len(), c.n_x);
    let mut dx = vec![0.0; c.n_x];
    single_scale_rhs(&params.f, &state.x, &mut dx);
    SingleScaleState { x: dx }
}

/// Scratch buffers for repeated RK4 steps of a fixed dimension.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `y` in place by one classical RK4 step.
    pub fn step<F>(&mut self, y: &mut [f64], dt: f64, mut rhs: F)
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let n = y.len();
        debug_assert_eq!(n, self.k1.len());
        let half = 0.5 * dt;
        rhs(y, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = y[i] + half * self.k1[i];
        }
        rhs(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = y[i] + half * self.k2[i];
        }
        rhs(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = y[i] + dt * self.k3[i];
        }
        rhs(&self.tmp, &mut self.k4);
        let sixth = dt / 6.0;
        for i in 0..n {
            y[i] += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// One RK4 step of `dy/dt = rhs(y)` returning the new state.
pub fn rk4_step<F>(y: &[f64], dt: f64, rhs: F) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut out = y.to_vec();
    Rk4::new(y.len()).step(&mut out, dt, rhs);
    out
}

/// Integrates the two-scale model for `n_steps` steps of size `c.dt`.
pub fn integrate_two_scale(state: &mut TwoScaleState, c: &ModelConstants, n_steps: usize) {
    let mut y = state.to_packed();
    let mut rk = Rk4::new(y.len());
    for _ in 0..n_steps {
        rk.step(&mut y, c.dt, |s, d| two_scale_rhs(c, s, d));
    }
    *state = TwoScaleState::from_packed(&y, c);
}

/// Integrates the single-scale model in place with a fixed forcing field.
pub fn integrate_single_scale(x: &mut [f64], f: &[f64], dt: f64, n_steps: usize, rk: &mut Rk4) {
    for _ in 0..n_steps {
        rk.step(x, dt, |s, d| single_scale_rhs(f, s, d));
    }
}
