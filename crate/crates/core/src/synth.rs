//! Nature run, synthetic observations, and the lagged-autocorrelation
//! climatological index used by the offline calibration.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::models::{self, ModelConstants, TwoScaleState};
use crate::{Error, Result};

/// Observed grids of the experiment, 0-based (grid points 1, 2, 5, 6).
pub const OBSERVED_GRIDS: [usize; 4] = [0, 1, 4, 5];
pub const OBS_INTERVAL_MTU: f64 = 0.05;
pub const OBS_NOISE_STD: f64 = 0.1;
/// Bootstrap replicates used to estimate the observed-index variance.
pub const N_BOOTSTRAP: usize = 1000;

/// Truth trajectory sampled at every observation interval after spin-up.
#[derive(Debug, Clone, PartialEq)]
pub struct NatureRun {
    /// Time since the end of the model spin-up, in MTU.
    pub times: Vec<f64>,
    pub x_true: Vec<Vec<f64>>,
    /// True forcing field `S + U[k]` at each stored time.
    pub f_true: Vec<Vec<f64>>,
    /// Full two-scale state at the last stored time.
    pub final_state: TwoScaleState,
}

impl NatureRun {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.x_true.first().map_or(0, Vec::len)
    }

    /// Slow-variable series of one grid point.
    pub fn x_series(&self, grid: usize) -> Vec<f64> {
        self.x_true.iter().map(|x| x[grid]).collect()
    }
}

/// Seeded two-scale integration. The model is spun up for `spinup_mtu`, then
/// one snapshot is stored every `interval_mtu` for `length_mtu`.
pub fn generate_nature_run(
    c: &ModelConstants,
    length_mtu: f64,
    spinup_mtu: f64,
    interval_mtu: f64,
    seed: u64,
) -> Result<NatureRun> {
    c.validate()?;
    if !(length_mtu > 0.0) {
        return Err(Error::InvalidInput(format!(
            "nature run length must be positive, got {length_mtu}"
        )));
    }
    if !(interval_mtu > 0.0) || spinup_mtu < 0.0 {
        return Err(Error::InvalidInput("bad interval or spin-up".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TwoScaleState {
        x: (0..c.n_x)
            .map(|_| c.forcing * 0.25 * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        v: (0..c.n_fast())
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    };

    let steps_per_obs = c.steps_for(interval_mtu).max(1);
    let n_snap = (length_mtu / interval_mtu).round() as usize;
    let mut y = state.to_packed();
    let mut rk = models::Rk4::new(y.len());
    let rhs = |s: &[f64], d: &mut [f64]| models::two_scale_rhs(c, s, d);

    for _ in 0..c.steps_for(spinup_mtu) {
        rk.step(&mut y, c.dt, rhs);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { time_mtu: 0.0 });
    }

    let mut run = NatureRun {
        times: Vec::with_capacity(n_snap),
        x_true: Vec::with_capacity(n_snap),
        f_true: Vec::with_capacity(n_snap),
        final_state: state.clone(),
    };
    for i in 0..n_snap {
        for _ in 0..steps_per_obs {
            rk.step(&mut y, c.dt, rhs);
        }
        let t = (i + 1) as f64 * interval_mtu;
        if y.iter().any(|v| !v.is_finite() || v.abs() > 1e6) {
            return Err(Error::Diverged { time_mtu: t });
        }
        state = TwoScaleState::from_packed(&y, c);
        run.times.push(t);
        run.f_true.push(models::true_parameter(&state, c).f);
        run.x_true.push(state.x.clone());
    }
    run.final_state = state;
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsKind {
    /// Direct observation of `X[location]`.
    State,
    /// Pseudo observation of parameter `F[location]`.
    PseudoParameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsEntry {
    /// 0-based grid index (state) or parameter index (pseudo).
    pub location: usize,
    pub value: f64,
    pub error_variance: f64,
    pub kind: ObsKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub time: f64,
    pub entries: Vec<ObsEntry>,
}

impl ObservationBatch {
    pub fn validate(&self, n_x: usize) -> Result<()> {
        for e in &self.entries {
            if !(e.error_variance > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "non-positive error variance {} at t = {}",
                    e.error_variance, self.time
                )));
            }
            if e.location >= n_x {
                return Err(Error::InvalidInput(format!(
                    "location {} out of range at t = {}",
                    e.location, self.time
                )));
            }
        }
        Ok(())
    }
}

/// One batch per stored nature-run time: truth at `observed_grids` (0-based)
/// plus Gaussian noise of standard deviation `noise_std`.
pub fn generate_observations(
    run: &NatureRun,
    observed_grids: &[usize],
    noise_std: f64,
    seed: u64,
) -> Result<Vec<ObservationBatch>> {
    if !(noise_std > 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise_std must be positive, got {noise_std}"
        )));
    }
    if let Some(&g) = observed_grids.iter().find(|&&g| g >= run.n_x()) {
        return Err(Error::InvalidInput(format!("observed grid {g} out of range")));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variance = noise_std * noise_std;
    Ok(run
        .times
        .iter()
        .zip(&run.x_true)
        .map(|(&time, x)| ObservationBatch {
            time,
            entries: observed_grids
                .iter()
                .map(|&g| ObsEntry {
                    location: g,
                    value: x[g] + noise.sample(&mut rng),
                    error_variance: variance,
                    kind: ObsKind::State,
                })
                .collect(),
        })
        .collect())
}

/// Pearson correlation between `series[..n - lag]` and `series[lag..]`.
pub fn autocorrelation(series: &[f64], lag: usize) -> Result<f64> {
    let n = series.len();
    if n <= lag + 1 {
        return Err(Error::InvalidInput(format!(
            "series of length {n} too short for lag {lag}"
        )));
    }
    let a = &series[..n - lag];
    let b = &series[lag..];
    let m = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / m;
    let mean_b = b.iter().sum::<f64>() / m;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - mean_a, y - mean_b);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    let scale = mean_a.abs().max(mean_b.abs()).max(1.0);
    let tiny = (1e-10 * scale).powi(2) * m;
    if saa <= tiny || sbb <= tiny {
        return Err(Error::DegenerateStatistic(
            "autocorrelation of a constant series".into(),
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Lags (in observation intervals) and averaging window of the index.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSpec {
    pub lags: Vec<usize>,
    pub interval_mtu: f64,
    pub window_mtu: f64,
}

impl Default for IndexSpec {
    fn default() -> Self {
        Self {
            lags: vec![2, 3, 4],
            interval_mtu: OBS_INTERVAL_MTU,
            window_mtu: 2000.0,
        }
    }
}

impl IndexSpec {
    pub fn window_len(&self) -> usize {
        (self.window_mtu / self.interval_mtu).round() as usize
    }

    pub fn lags_mtu(&self) -> Vec<f64> {
        self.lags
            .iter()
            .map(|&l| l as f64 * self.interval_mtu)
            .collect()
    }
}

/// Climatological index: lagged autocorrelations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClimIndex {
    pub values: Vec<f64>,
    pub lags_mtu: Vec<f64>,
}

impl ClimIndex {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Autocorrelations at each lag over the trailing window of every series,
/// averaged across series (one series per observed grid).
pub fn climatological_index(series_per_grid: &[Vec<f64>], spec: &IndexSpec) -> Result<ClimIndex> {
    if series_per_grid.is_empty() {
        return Err(Error::InvalidInput("no series supplied".into()));
    }
    let window = spec.window_len();
    let mut values = vec![0.0; spec.lags.len()];
    for series in series_per_grid {
        if window > series.len() {
            return Err(Error::InvalidInput(format!(
                "index window of {window} samples exceeds series length {}",
                series.len()
            )));
        }
        let tail = &series[series.len() - window..];
        for (acc, &lag) in values.iter_mut().zip(&spec.lags) {
            *acc += autocorrelation(tail, lag)?;
        }
    }
    let n = series_per_grid.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(ClimIndex {
        values,
        lags_mtu: spec.lags_mtu(),
    })
}

/// Per-index sample variance of the climatological index over `n_bootstrap`
/// randomly positioned contiguous subsets of `subset_mtu`.
///
/// Replicate `i` draws its offset from its own RNG stream, so the result does
/// not depend on evaluation order.
pub fn estimate_observation_index_variance(
    series_per_grid: &[Vec<f64>],
    spec: &IndexSpec,
    n_bootstrap: usize,
    subset_mtu: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let len = series_per_grid
        .iter()
        .map(Vec::len)
        .min()
        .ok_or_else(|| Error::InvalidInput("no series supplied".into()))?;
    let subset = (subset_mtu / spec.interval_mtu).round() as usize;
    if subset > len {
        return Err(Error::InvalidInput(format!(
            "bootstrap subset of {subset} samples exceeds series length {len}"
        )));
    }
    if n_bootstrap < 2 {
        return Err(Error::InvalidInput("need at least two bootstrap replicates".into()));
    }
    let sub_spec = IndexSpec {
        window_mtu: subset as f64 * spec.interval_mtu,
        ..spec.clone()
    };
    let replicates: Vec<Vec<f64>> = (0..n_bootstrap)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let start = rng.random_range(0..=len - subset);
            let window: Vec<Vec<f64>> = series_per_grid
                .iter()
                .map(|s| s[start..start + subset].to_vec())
                .collect();
            climatological_index(&window, &sub_spec).map(|c| c.values)
        })
        .collect::<Result<_>>()?;

    let n = n_bootstrap as f64;
    Ok((0..spec.lags.len())
        .map(|j| {
            let mean = replicates.iter().map(|r| r[j]).sum::<f64>() / n;
            replicates.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect())
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes `time_mtu, x_1..x_nx, f_1..f_nx`, one row per snapshot.
pub fn write_nature_csv(run: &NatureRun, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let n = run.n_x();
    let mut header = vec!["time_mtu".to_string()];
    header.extend((1..=n).map(|k| format!("x_{k}")));
    header.extend((1..=n).map(|k| format!("f_{k}")));
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for ((t, x), f) in run.times.iter().zip(&run.x_true).zip(&run.f_true) {
        let row: Vec<String> = std::iter::once(t)
            .chain(x)
            .chain(f)
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a nature run written by [`write_nature_csv`]. The full two-scale
/// state is not stored, so `final_state` only carries the last `x`.
pub fn read_nature_csv(path: &Path) -> Result<NatureRun> {
    let mut rdr = csv::Reader::from_path(path)?;
    let ncols = rdr.headers()?.len();
    if ncols < 3 || ncols % 2 == 0 {
        return Err(Error::parse(path, format!("unexpected column count {ncols}")));
    }
    let n = (ncols - 1) / 2;
    let mut run = NatureRun {
        times: vec![],
        x_true: vec![],
        f_true: vec![],
        final_state: TwoScaleState { x: vec![], v: vec![] },
    };
    for rec in rdr.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        run.times.push(vals[0]);
        run.x_true.push(vals[1..=n].to_vec());
        run.f_true.push(vals[n + 1..].to_vec());
    }
    if run.times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::parse(path, "times are not strictly increasing"));
    }
    if let Some(x) = run.x_true.last() {
        run.final_state.x = x.clone();
    }
    Ok(run)
}

/// Writes `time_mtu, location, value, error_variance` with 1-based locations.
/// Only state observations are written.
pub fn write_observations_csv(batches: &[ObservationBatch], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "time_mtu,location,value,error_variance").map_err(io)?;
    for b in batches {
        for e in b.entries.iter().filter(|e| e.kind == ObsKind::State) {
            writeln!(
                w,
                "{},{},{},{}",
                b.time,
                e.location + 1,
                e.value,
                e.error_variance
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_observations_csv(path: &Path) -> Result<Vec<ObservationBatch>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: Vec<ObservationBatch> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::parse(path, format!("expected 4 columns, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(path, e.to_string()))
        };
        let time = num(0)?;
        let location: usize = rec[1]
            .trim()
            .parse()
            .map_err(|e: std::num::ParseIntError| Error::parse(path, e.to_string()))?;
        if location == 0 {
            return Err(Error::parse(path, "locations are 1-based"));
        }
        let entry = ObsEntry {
            location: location - 1,
            value: num(2)?,
            error_variance: num(3)?,
            kind: ObsKind::State,
        };
        match out.last_mut() {
            Some(b) if b.time == time => b.entries.push(entry),
            Some(b) if b.time > time => {
                return Err(Error::parse(path, "observation times are not sorted"))
            }
            _ => out.push(ObservationBatch {
                time,
                entries: vec![entry],
            }),
        }
    }
    Ok(out)
}

/// Observed series per grid, in the order of `grids`, from a batch sequence.
pub fn observed_series(batches: &[ObservationBatch], grids: &[usize]) -> Vec<Vec<f64>> {
    grids
        .iter()
        .map(|&g| {
            batches
                .iter()
                .filter_map(|b| {
                    b.entries
                        .iter()
                        .find(|e| e.kind == ObsKind::State && e.location == g)
                        .map(|e| e.value)
                })
                .collect()
        })
        .collect()
}
