//! Twin-experiment driver: configuration, the offline calibration pipeline,
//! the cycled assimilation run for each filter variant, inflation sweeps,
//! metrics and CSV reporting.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batchopt::{self, ClimatologyPrior, McmcChain, ParameterPrior};
use crate::enkf::{self, AdaptiveInflation, AnalyzeOptions, AugmentedEnsemble, Inflation, LocalizationConfig};
use crate::hoope;
use crate::models::{self, ModelConstants, Rk4};
use crate::surrogate::{FitOptions, GpModel, SurrogateMode};
use crate::synth::{self, ClimIndex, IndexSpec, NatureRun, ObservationBatch};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Nohoope,
    Pso,
    Rtc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Nohoope, Variant::Pso, Variant::Rtc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nohoope => "nohoope",
            Variant::Pso => "pso",
            Variant::Rtc => "rtc",
        }
    }

    pub fn needs_prior(self) -> bool {
        self != Variant::Nohoope
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nohoope" => Ok(Variant::Nohoope),
            "pso" => Ok(Variant::Pso),
            "rtc" => Ok(Variant::Rtc),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected nohoope, pso or rtc)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Every length divided by ten.
    Desk,
    /// Full-length experiment.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub nature: u64,
    pub obs: u64,
    pub init: u64,
    pub mcmc: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InflationSetting {
    Fixed { rho_x: f64, rho_theta: f64 },
    Adaptive { initial: f64, prior_variance: f64 },
}

impl InflationSetting {
    pub fn label(&self) -> &'static str {
        match self {
            InflationSetting::Fixed { .. } => "fixed",
            InflationSetting::Adaptive { .. } => "adaptive",
        }
    }

    fn build(&self, n_x: usize) -> Inflation {
        match *self {
            InflationSetting::Fixed { rho_x, rho_theta } => Inflation::Fixed { rho_x, rho_theta },
            InflationSetting::Adaptive { initial, prior_variance } => {
                Inflation::Adaptive(AdaptiveInflation::new(2 * n_x, initial, prior_variance))
            }
        }
    }

    fn rhos(&self) -> (f64, f64) {
        match *self {
            InflationSetting::Fixed { rho_x, rho_theta } => (rho_x, rho_theta),
            InflationSetting::Adaptive { .. } => (f64::NAN, f64::NAN),
        }
    }
}

/// Offline calibration settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineConfig {
    pub n_members: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub run_mtu: f64,
    pub index: IndexSpec,
    pub bootstrap_samples: usize,
    pub bootstrap_subset_mtu: f64,
    /// Candidate GP noise variances in standardized units; empty fits with
    /// jitter only.
    pub gp_noise_variances: Vec<f64>,
    pub mcmc_iterations: usize,
    pub mcmc_burnin: usize,
    /// `None` uses 5% of the prior range.
    pub mcmc_proposal_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub ensemble_size: usize,
    pub model: ModelConstants,
    /// Length of the nature run and of the assimilation.
    pub run_length_mtu: f64,
    /// Assimilation spin-up excluded from the metrics.
    pub spinup_mtu: f64,
    /// Free two-scale integration discarded before the nature run starts.
    pub model_spinup_mtu: f64,
    pub obs_interval_mtu: f64,
    pub obs_noise_std: f64,
    /// 0-based observed grid points.
    pub observed_grids: Vec<usize>,
    pub offline: OfflineConfig,
    pub inflation: InflationSetting,
    pub localization: LocalizationConfig,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    pub nature_file: Option<PathBuf>,
    pub obs_file: Option<PathBuf>,
    pub prior_file: Option<PathBuf>,
    pub sweep_rho_x: Vec<f64>,
    pub sweep_rho_theta: Vec<f64>,
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Flat `key = value` configuration file. All keys are optional except the
/// four seeds; missing keys take the preset's value.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    variant: Option<String>,
    ensemble_size: Option<usize>,
    run_length_mtu: Option<f64>,
    spinup_mtu: Option<f64>,
    model_spinup_mtu: Option<f64>,
    obs_noise_std: Option<f64>,
    observed_grids: Option<Vec<usize>>,
    offline_members: Option<usize>,
    offline_f_min: Option<f64>,
    offline_f_max: Option<f64>,
    offline_run_mtu: Option<f64>,
    index_window_mtu: Option<f64>,
    index_lags: Option<Vec<usize>>,
    bootstrap_samples: Option<usize>,
    bootstrap_subset_mtu: Option<f64>,
    gp_noise_variances: Option<Vec<f64>>,
    mcmc_iterations: Option<usize>,
    mcmc_burnin: Option<usize>,
    mcmc_proposal_std: Option<f64>,
    inflation: Option<String>,
    rho_x: Option<f64>,
    rho_theta: Option<f64>,
    adaptive_initial: Option<f64>,
    adaptive_prior_variance: Option<f64>,
    localization_sigma: Option<f64>,
    seed_nature: Option<u64>,
    seed_obs: Option<u64>,
    seed_init: Option<u64>,
    seed_mcmc: Option<u64>,
    output_dir: Option<PathBuf>,
    nature_file: Option<PathBuf>,
    obs_file: Option<PathBuf>,
    prior_file: Option<PathBuf>,
    sweep_rho_x: Option<Vec<f64>>,
    sweep_rho_theta: Option<Vec<f64>>,
}

impl ExperimentConfig {
    /// Preset defaults with the given seeds.
    pub fn preset(preset: Preset, seeds: Seeds) -> Self {
        let (run, spin, offline_run, window, sweep_n) = match preset {
            Preset::Desk => (720.0, 250.0, 2880.0, 200.0, 5),
            Preset::Paper => (7200.0, 2500.0, 28800.0, 2000.0, 31),
        };
        ExperimentConfig {
            preset,
            variant: Variant::Rtc,
            ensemble_size: 20,
            model: ModelConstants::default(),
            run_length_mtu: run,
            spinup_mtu: spin,
            model_spinup_mtu: 10.0,
            obs_interval_mtu: synth::OBS_INTERVAL_MTU,
            obs_noise_std: synth::OBS_NOISE_STD,
            observed_grids: synth::OBSERVED_GRIDS.to_vec(),
            offline: OfflineConfig {
                n_members: 100,
                f_min: 0.0,
                f_max: 30.0,
                run_mtu: offline_run,
                index: IndexSpec {
                    lags: vec![2, 3, 4],
                    interval_mtu: synth::OBS_INTERVAL_MTU,
                    window_mtu: window,
                },
                bootstrap_samples: synth::N_BOOTSTRAP,
                bootstrap_subset_mtu: 20.0,
                gp_noise_variances: Vec::new(),
                mcmc_iterations: batchopt::MCMC_ITERATIONS,
                mcmc_burnin: batchopt::MCMC_BURNIN,
                mcmc_proposal_std: None,
            },
            inflation: InflationSetting::Adaptive {
                initial: AdaptiveInflation::DEFAULT_INITIAL,
                prior_variance: AdaptiveInflation::DEFAULT_PRIOR_VARIANCE,
            },
            localization: LocalizationConfig::default(),
            seeds,
            output_dir: PathBuf::from("out"),
            nature_file: None,
            obs_file: None,
            prior_file: None,
            sweep_rho_x: linspace(1.05, 2.55, sweep_n),
            sweep_rho_theta: linspace(1.05, 7.05, sweep_n),
        }
    }

    /// Parses a configuration file. `preset_override` wins over a `preset`
    /// key in the file; without either the desk preset is used.
    pub fn from_toml_str(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let file_preset = raw.preset.as_deref().map(Preset::from_str).transpose()?;
        let preset = preset_override.or(file_preset).unwrap_or(Preset::Desk);
        let seed = |v: Option<u64>, name: &str| v.ok_or_else(|| Error::Config(format!("missing required key {name}")));
        let seeds = Seeds {
            nature: seed(raw.seed_nature, "seed_nature")?,
            obs: seed(raw.seed_obs, "seed_obs")?,
            init: seed(raw.seed_init, "seed_init")?,
            mcmc: seed(raw.seed_mcmc, "seed_mcmc")?,
        };
        let mut c = Self::preset(preset, seeds);
        if let Some(v) = raw.variant {
            c.variant = v.parse()?;
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = raw.$field { $target = v; })*
            };
        }
        set! {
            ensemble_size => c.ensemble_size,
            run_length_mtu => c.run_length_mtu,
            spinup_mtu => c.spinup_mtu,
            model_spinup_mtu => c.model_spinup_mtu,
            obs_noise_std => c.obs_noise_std,
            offline_members => c.offline.n_members,
            offline_f_min => c.offline.f_min,
            offline_f_max => c.offline.f_max,
            offline_run_mtu => c.offline.run_mtu,
            index_window_mtu => c.offline.index.window_mtu,
            index_lags => c.offline.index.lags,
            bootstrap_samples => c.offline.bootstrap_samples,
            bootstrap_subset_mtu => c.offline.bootstrap_subset_mtu,
            gp_noise_variances => c.offline.gp_noise_variances,
            mcmc_iterations => c.offline.mcmc_iterations,
            mcmc_burnin => c.offline.mcmc_burnin,
            localization_sigma => c.localization.sigma,
            output_dir => c.output_dir,
            sweep_rho_x => c.sweep_rho_x,
            sweep_rho_theta => c.sweep_rho_theta,
        }
        c.offline.mcmc_proposal_std = raw.mcmc_proposal_std.or(c.offline.mcmc_proposal_std);
        c.nature_file = raw.nature_file;
        c.obs_file = raw.obs_file;
        c.prior_file = raw.prior_file;
        if let Some(g) = raw.observed_grids {
            if g.contains(&0) {
                return Err(Error::Config("observed_grids are 1-based".into()));
            }
            c.observed_grids = g.into_iter().map(|v| v - 1).collect();
        }
        let mode = raw.inflation.as_deref().unwrap_or(c.inflation.label());
        c.inflation = match mode {
            "adaptive" => {
                if raw.rho_x.is_some() || raw.rho_theta.is_some() {
                    return Err(Error::Config("rho_x / rho_theta require inflation = \"fixed\"".into()));
                }
                InflationSetting::Adaptive {
                    initial: raw.adaptive_initial.unwrap_or(AdaptiveInflation::DEFAULT_INITIAL),
                    prior_variance: raw
                        .adaptive_prior_variance
                        .unwrap_or(AdaptiveInflation::DEFAULT_PRIOR_VARIANCE),
                }
            }
            "fixed" => InflationSetting::Fixed {
                rho_x: raw.rho_x.ok_or_else(|| Error::Config("fixed inflation needs rho_x".into()))?,
                rho_theta: raw
                    .rho_theta
                    .ok_or_else(|| Error::Config("fixed inflation needs rho_theta".into()))?,
            },
            other => return Err(Error::Config(format!("unknown inflation mode {other:?}"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, preset_override)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.localization.validate()?;
        if self.ensemble_size < 2 {
            return bad(format!("ensemble_size must be >= 2, got {}", self.ensemble_size));
        }
        if !(self.run_length_mtu > 0.0) || !(self.spinup_mtu >= 0.0) || self.spinup_mtu >= self.run_length_mtu {
            return bad(format!(
                "need 0 <= spinup_mtu < run_length_mtu, got {} and {}",
                self.spinup_mtu, self.run_length_mtu
            ));
        }
        if !(self.obs_noise_std > 0.0) {
            return bad("obs_noise_std must be positive".into());
        }
        if self.observed_grids.is_empty() || self.observed_grids.iter().any(|&g| g >= self.model.n_x) {
            return bad(format!("observed_grids must lie in 1..={}", self.model.n_x));
        }
        let o = &self.offline;
        if o.n_members < 3 || !(o.f_min < o.f_max) {
            return bad("offline grid needs >= 3 members and f_min < f_max".into());
        }
        if o.index.lags.is_empty() || o.index.lags.contains(&0) {
            return bad("index_lags must be non-empty and positive".into());
        }
        if !(o.index.window_mtu > 0.0) || o.index.window_mtu > o.run_mtu {
            return bad("index window must be positive and no longer than offline_run_mtu".into());
        }
        if o.index.window_mtu > self.run_length_mtu || o.bootstrap_subset_mtu > self.run_length_mtu {
            return bad("index window and bootstrap subset must fit in the observation record".into());
        }
        if o.bootstrap_samples < 2 || !(o.bootstrap_subset_mtu > 0.0) {
            return bad("bootstrap needs >= 2 samples and a positive subset length".into());
        }
        if o.gp_noise_variances.iter().any(|&v| !(v >= 0.0)) {
            return bad("gp_noise_variances must be non-negative".into());
        }
        if o.mcmc_burnin >= o.mcmc_iterations {
            return bad("mcmc_burnin must be smaller than mcmc_iterations".into());
        }
        if o.mcmc_proposal_std.is_some_and(|s| !(s > 0.0)) {
            return bad("mcmc_proposal_std must be positive".into());
        }
        if let InflationSetting::Fixed { rho_x, rho_theta } = self.inflation {
            if !(rho_x >= 1.0) || !(rho_theta >= 1.0) {
                return bad(format!("inflation factors must be >= 1, got {rho_x}, {rho_theta}"));
            }
        }
        if self.sweep_rho_x.iter().chain(&self.sweep_rho_theta).any(|&r| !(r >= 1.0)) {
            return bad("sweep inflation factors must be >= 1".into());
        }
        Ok(())
    }

    pub fn nature_path(&self) -> PathBuf {
        self.nature_file.clone().unwrap_or_else(|| self.output_dir.join("nature.csv"))
    }

    pub fn obs_path(&self) -> PathBuf {
        self.obs_file.clone().unwrap_or_else(|| self.output_dir.join("observations.csv"))
    }

    pub fn prior_path(&self) -> PathBuf {
        self.prior_file.clone().unwrap_or_else(|| self.output_dir.join("prior.txt"))
    }

    fn cycle_steps(&self) -> usize {
        self.model.steps_for(self.obs_interval_mtu)
    }
}

pub fn generate_nature(cfg: &ExperimentConfig) -> Result<NatureRun> {
    synth::generate_nature_run(
        &cfg.model,
        cfg.run_length_mtu,
        cfg.model_spinup_mtu,
        cfg.obs_interval_mtu,
        cfg.seeds.nature,
    )
}

pub fn generate_observations(cfg: &ExperimentConfig, nature: &NatureRun) -> Result<Vec<ObservationBatch>> {
    synth::generate_observations(nature, &cfg.observed_grids, cfg.obs_noise_std, cfg.seeds.obs)
}

/// Everything the offline calibration produces.
#[derive(Debug, Clone)]
pub struct OfflineResult {
    pub grid: Vec<f64>,
    pub indices: Vec<ClimIndex>,
    pub surrogate: GpModel,
    pub gamma_obs: ClimIndex,
    pub r_o: Vec<f64>,
    pub chain: McmcChain,
    pub prior: ClimatologyPrior,
}

/// Climatological index of a single-scale run with spatially uniform forcing.
///
/// A run that settles onto a fixed point has no variance to correlate; it is
/// assigned perfect autocorrelation at every lag.
pub fn simulated_index(cfg: &ExperimentConfig, f_hat: f64, seed: u64) -> Result<ClimIndex> {
    let n = cfg.model.n_x;
    let spec = &cfg.offline.index;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| f_hat + 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let f = vec![f_hat; n];
    let mut rk = Rk4::new(n);
    let per_sample = cfg.model.steps_for(spec.interval_mtu);
    let n_window = spec.window_len();
    let total = cfg.model.steps_for(cfg.offline.run_mtu);
    let lead = total.saturating_sub(n_window * per_sample);
    models::integrate_single_scale(&mut x, &f, cfg.model.dt, lead, &mut rk);
    let mut series = vec![Vec::with_capacity(n_window); cfg.observed_grids.len()];
    for _ in 0..n_window {
        models::integrate_single_scale(&mut x, &f, cfg.model.dt, per_sample, &mut rk);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { time_mtu: cfg.offline.run_mtu });
        }
        for (s, &g) in series.iter_mut().zip(&cfg.observed_grids) {
            s.push(x[g]);
        }
    }
    match synth::climatological_index(&series, spec) {
        Err(Error::DegenerateStatistic(_)) => Ok(ClimIndex {
            values: vec![1.0; spec.lags.len()],
            lags_mtu: spec.lags_mtu(),
        }),
        other => other,
    }
}

/// Offline calibration: parameter grid, long single-scale runs, surrogate,
/// Metropolis-Hastings and the Gaussian fit.
pub fn run_offline(cfg: &ExperimentConfig, obs: &[ObservationBatch]) -> Result<OfflineResult> {
    let o = &cfg.offline;
    let series = synth::observed_series(obs, &cfg.observed_grids);
    let gamma_obs = synth::climatological_index(&series, &o.index).map_err(|e| e.in_stage("observed index"))?;
    let r_o = synth::estimate_observation_index_variance(
        &series,
        &o.index,
        o.bootstrap_samples,
        o.bootstrap_subset_mtu,
        cfg.seeds.mcmc,
    )
    .map_err(|e| e.in_stage("observation index variance"))?;
    if r_o.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateStatistic("zero bootstrap variance of the observed index".into())
            .in_stage("observation index variance"));
    }

    let grid = linspace(o.f_min, o.f_max, o.n_members);
    let indices = grid
        .par_iter()
        .enumerate()
        .map(|(i, &f)| simulated_index(cfg, f, cfg.seeds.mcmc.wrapping_add(1 + i as u64)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("offline ensemble"))?;

    let targets: Vec<Vec<f64>> = (0..o.index.lags.len())
        .map(|j| indices.iter().map(|g| g.values[j]).collect())
        .collect();
    let fit_opts = FitOptions {
        noise_variances: o.gp_noise_variances.clone(),
        ..FitOptions::default()
    };
    let surrogate =
        GpModel::fit(&grid, &targets, SurrogateMode::IndexVector, &fit_opts).map_err(|e| e.in_stage("surrogate"))?;

    let bounds = ParameterPrior::new(o.f_min, o.f_max).map_err(|e| e.in_stage("mcmc"))?;
    let proposal = o.mcmc_proposal_std.unwrap_or_else(|| bounds.default_proposal_std());
    let chain = batchopt::mh_sample(
        |t| batchopt::log_misfit_phi(&surrogate, t, &gamma_obs, &r_o),
        &bounds,
        proposal,
        o.mcmc_iterations,
        o.mcmc_burnin,
        cfg.seeds.mcmc,
    )
    .map_err(|e| e.in_stage("mcmc"))?;
    let prior = batchopt::fit_gaussian(&chain, cfg.model.n_x).map_err(|e| e.in_stage("gaussian fit"))?;
    Ok(OfflineResult {
        grid,
        indices,
        surrogate,
        gamma_obs,
        r_o,
        chain,
        prior,
    })
}

/// Writes `f_hat,gamma_1..` rows of the simulated indices.
pub fn write_offline_indices_csv(res: &OfflineResult, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let lag_cols: Vec<String> = res.gamma_obs.lags_mtu.iter().map(|l| format!("lag_{l}")).collect();
    writeln!(w, "f_hat,{}", lag_cols.join(",")).map_err(io)?;
    writeln!(w, "observed,{}", join(&res.gamma_obs.values)).map_err(io)?;
    writeln!(w, "observed_variance,{}", join(&res.r_o)).map_err(io)?;
    for (f, g) in res.grid.iter().zip(&res.indices) {
        writeln!(w, "{f},{}", join(&g.values)).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub rmse_state: f64,
    pub r_state: f64,
    pub rmse_param: f64,
    pub r_param: f64,
    pub diverged: bool,
    pub cycles_run: usize,
}

impl MetricsReport {
    fn diverged(cycles_run: usize) -> Self {
        Self {
            rmse_state: f64::NAN,
            r_state: f64::NAN,
            rmse_param: f64::NAN,
            r_param: f64::NAN,
            diverged: true,
            cycles_run,
        }
    }
}

/// RMSE and Pearson correlation over all flattened (time, grid) pairs.
pub fn rmse_and_correlation(estimate: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<(f64, f64)> {
    if estimate.len() != truth.len() || estimate.iter().zip(truth).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::InvalidInput("estimate and truth are not aligned".into()));
    }
    let pairs: Vec<(f64, f64)> = estimate
        .iter()
        .zip(truth)
        .flat_map(|(a, b)| a.iter().copied().zip(b.iter().copied()))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty metrics window".into()));
    }
    let n = pairs.len() as f64;
    let rmse = (pairs.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sab += (a - ma) * (b - mb);
        saa += (a - ma).powi(2);
        sbb += (b - mb).powi(2);
    }
    let r = if saa > 0.0 && sbb > 0.0 {
        (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
    } else {
        f64::NAN
    };
    Ok((rmse, r))
}

/// Metrics of analysis means against truth, X and F separately.
pub fn compute_metrics(
    state_est: &[Vec<f64>],
    state_truth: &[Vec<f64>],
    param_est: &[Vec<f64>],
    param_truth: &[Vec<f64>],
    cycles_run: usize,
) -> Result<MetricsReport> {
    let (rmse_state, r_state) = rmse_and_correlation(state_est, state_truth)?;
    let (rmse_param, r_param) = rmse_and_correlation(param_est, param_truth)?;
    Ok(MetricsReport {
        rmse_state,
        r_state,
        rmse_param,
        r_param,
        diverged: false,
        cycles_run,
    })
}

/// Per-cycle analysis summary of the parameter field.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub time_mtu: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AssimilationOutput {
    pub variant: Variant,
    pub metrics: MetricsReport,
    /// One snapshot per completed cycle.
    pub params: Vec<ParamSnapshot>,
}

/// Initial ensemble: states are nature-run snapshots at random times,
/// parameters are drawn from the climatology (or uniformly over the
/// offline range when there is none).
pub fn initial_ensemble(
    cfg: &ExperimentConfig,
    nature: &NatureRun,
    prior: Option<&ClimatologyPrior>,
) -> Result<AugmentedEnsemble> {
    let n = cfg.model.n_x;
    let k = cfg.ensemble_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.init);
    let states: Vec<Vec<f64>> = (0..k)
        .map(|_| nature.x_true[rng.random_range(0..nature.len())].clone())
        .collect();
    let params: Vec<Vec<f64>> = match prior {
        Some(p) => {
            if p.n_params() != n {
                return Err(Error::InvalidInput(format!(
                    "prior has {} parameters, model has {n}",
                    p.n_params()
                )));
            }
            (0..k)
                .map(|_| {
                    (0..n)
                        .map(|i| {
                            let d = Normal::new(p.theta_c[i], p.c_diag[i].sqrt()).expect("positive variance");
                            d.sample(&mut rng)
                        })
                        .collect()
                })
                .collect()
        }
        None => (0..k)
            .map(|_| {
                (0..n)
                    .map(|_| rng.random_range(cfg.offline.f_min..=cfg.offline.f_max))
                    .collect()
            })
            .collect(),
    };
    AugmentedEnsemble::from_parts(&states, &params)
}

/// Advances every member by `n_steps` with its own persisted parameters.
fn forecast(ens: &mut AugmentedEnsemble, dt: f64, n_steps: usize, rk: &mut Rk4) {
    let n = ens.n_x();
    for i in 0..ens.k() {
        let mut x = ens.member_state(i);
        let f = ens.member_params(i);
        models::integrate_single_scale(&mut x, &f, dt, n_steps, rk);
        ens.set_member_state(i, &x);
    }
    debug_assert_eq!(ens.members().nrows(), 2 * n);
}

/// One assimilation cycle's pre-analysis step and analysis.
fn cycle_analysis(
    variant: Variant,
    ens: &AugmentedEnsemble,
    batch: &ObservationBatch,
    prior: Option<&ClimatologyPrior>,
    loc: &LocalizationConfig,
    inflation: &mut Inflation,
) -> Result<AugmentedEnsemble> {
    match (variant, prior) {
        (Variant::Nohoope, _) => enkf::analyze(ens, batch, loc, inflation, AnalyzeOptions::default()),
        (Variant::Pso, Some(p)) => {
            enkf::analyze(ens, &hoope::pso_augment(batch, p), loc, inflation, AnalyzeOptions::default())
        }
        (Variant::Rtc, Some(p)) => {
            let factors = inflation.parameter_factors(ens.n_x());
            let moved = hoope::apply_rtc(ens, p, &factors)?;
            enkf::analyze(
                &moved,
                batch,
                loc,
                inflation,
                AnalyzeOptions {
                    inflate_parameters: false,
                },
            )
        }
        (v, None) => Err(Error::Config(format!("variant {v} needs a climatology prior"))),
    }
}

fn check_finite(ens: &AugmentedEnsemble, time_mtu: f64) -> Result<()> {
    if ens
        .members()
        .iter()
        .any(|v| !v.is_finite() || v.abs() > enkf::DIVERGENCE_THRESHOLD)
    {
        return Err(Error::Diverged { time_mtu });
    }
    Ok(())
}

/// Cycled twin experiment. A divergence ends the run early with
/// `metrics.diverged` set and NaN metrics.
pub fn run_assimilation(
    cfg: &ExperimentConfig,
    nature: &NatureRun,
    obs: &[ObservationBatch],
    prior: Option<&ClimatologyPrior>,
) -> Result<AssimilationOutput> {
    cfg.validate()?;
    if cfg.variant.needs_prior() && prior.is_none() {
        return Err(Error::Config(format!("variant {} needs a prior file", cfg.variant)));
    }
    if obs.len() != nature.len() {
        return Err(Error::InvalidInput(format!(
            "{} observation batches for {} nature times",
            obs.len(),
            nature.len()
        )));
    }
    if nature.n_x() != cfg.model.n_x {
        return Err(Error::InvalidInput("nature run and model disagree on n_x".into()));
    }
    let n_cycles = ((cfg.run_length_mtu / cfg.obs_interval_mtu).round() as usize).min(obs.len());
    let first_scored = (cfg.spinup_mtu / cfg.obs_interval_mtu).round() as usize;
    let steps = cfg.cycle_steps();
    let mut ens = initial_ensemble(cfg, nature, prior)?;
    let mut inflation = cfg.inflation.build(cfg.model.n_x);
    let mut rk = Rk4::new(cfg.model.n_x);
    let mut params = Vec::with_capacity(n_cycles);
    let (mut xs, mut fs) = (Vec::new(), Vec::new());

    for (c, batch) in obs.iter().enumerate().take(n_cycles) {
        let step = (|| {
            forecast(&mut ens, cfg.model.dt, steps, &mut rk);
            check_finite(&ens, batch.time)?;
            cycle_analysis(cfg.variant, &ens, batch, prior, &cfg.localization, &mut inflation)
        })();
        ens = match step {
            Ok(a) => a,
            Err(e) if e.is_divergence() => {
                return Ok(AssimilationOutput {
                    variant: cfg.variant,
                    metrics: MetricsReport::diverged(c),
                    params,
                })
            }
            Err(e) => return Err(e),
        };
        let n = cfg.model.n_x;
        params.push(ParamSnapshot {
            time_mtu: batch.time,
            mean: ens.param_mean(),
            std: (n..2 * n).map(|r| ens.row_variance(r).sqrt()).collect(),
        });
        if c >= first_scored {
            xs.push(ens.state_mean());
            fs.push(ens.param_mean());
        }
    }
    let metrics = compute_metrics(
        &xs,
        &nature.x_true[first_scored..n_cycles],
        &fs,
        &nature.f_true[first_scored..n_cycles],
        n_cycles,
    )?;
    Ok(AssimilationOutput {
        variant: cfg.variant,
        metrics,
        params,
    })
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: Variant,
    pub ensemble_size: usize,
    pub inflation: InflationLabel,
    pub rho_x: f64,
    pub rho_theta: f64,
    pub rmse_state: f64,
    pub r_state: f64,
    pub rmse_param: f64,
    pub r_param: f64,
    pub diverged: bool,
    pub cycles_run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InflationLabel {
    Fixed,
    Adaptive,
}

impl MetricsRow {
    pub fn new(cfg: &ExperimentConfig, m: &MetricsReport) -> Self {
        let (rho_x, rho_theta) = cfg.inflation.rhos();
        MetricsRow {
            variant: cfg.variant,
            ensemble_size: cfg.ensemble_size,
            inflation: match cfg.inflation {
                InflationSetting::Fixed { .. } => InflationLabel::Fixed,
                InflationSetting::Adaptive { .. } => InflationLabel::Adaptive,
            },
            rho_x,
            rho_theta,
            rmse_state: m.rmse_state,
            r_state: m.r_state,
            rmse_param: m.rmse_param,
            r_param: m.r_param,
            diverged: m.diverged,
            cycles_run: m.cycles_run,
        }
    }

    /// Bitwise comparison (NaN equals NaN).
    pub fn same_bits(&self, other: &Self) -> bool {
        let f = |r: &Self| {
            [r.rho_x, r.rho_theta, r.rmse_state, r.r_state, r.rmse_param, r.r_param].map(f64::to_bits)
        };
        self.variant == other.variant
            && self.ensemble_size == other.ensemble_size
            && self.inflation == other.inflation
            && self.diverged == other.diverged
            && self.cycles_run == other.cycles_run
            && f(self) == f(other)
    }
}

/// One run per `(rho_x, rho_theta)` pair with fixed inflation. Rows come back
/// in grid order (rho_x outer) regardless of completion order; divergences
/// are recorded and the sweep continues.
pub fn sweep(
    base: &ExperimentConfig,
    rho_x: &[f64],
    rho_theta: &[f64],
    nature: &NatureRun,
    obs: &[ObservationBatch],
    prior: Option<&ClimatologyPrior>,
) -> Result<Vec<MetricsRow>> {
    if rho_x.is_empty() || rho_theta.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let cells: Vec<(f64, f64)> = rho_x
        .iter()
        .flat_map(|&a| rho_theta.iter().map(move |&b| (a, b)))
        .collect();
    cells
        .par_iter()
        .map(|&(a, b)| {
            let mut cfg = base.clone();
            cfg.inflation = InflationSetting::Fixed { rho_x: a, rho_theta: b };
            let out = run_assimilation(&cfg, nature, obs, prior)?;
            Ok(MetricsRow::new(&cfg, &out.metrics))
        })
        .collect()
}

/// `(max - min) / median` of `rmse_param` over a set of sweep cells; any
/// diverged cell makes the spread infinite.
pub fn rmse_param_spread(rows: &[MetricsRow]) -> f64 {
    if rows.is_empty() || rows.iter().any(|r| r.diverged || !r.rmse_param.is_finite()) {
        return f64::INFINITY;
    }
    let mut v: Vec<f64> = rows.iter().map(|r| r.rmse_param).collect();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    let median = if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) };
    (v[m - 1] - v[0]) / median
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `time_mtu,grid,truth,mean,std` for every cycle and parameter (grid 1-based).
pub fn write_param_timeseries_csv(out: &AssimilationOutput, nature: &NatureRun, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "time_mtu,grid,truth,mean,std").map_err(io)?;
    for (snap, truth) in out.params.iter().zip(&nature.f_true) {
        for g in 0..snap.mean.len() {
            writeln!(w, "{},{},{},{},{}", snap.time_mtu, g + 1, truth[g], snap.mean[g], snap.std[g]).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Space-time table of the analysed parameter field with one column per
/// variant: `time_mtu,grid,truth,<variant>..`. Rows stop at the shortest run.
pub fn write_param_hovmoller_csv(outs: &[AssimilationOutput], nature: &NatureRun, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let names: Vec<&str> = outs.iter().map(|o| o.variant.name()).collect();
    writeln!(w, "time_mtu,grid,truth,{}", names.join(",")).map_err(io)?;
    let len = outs.iter().map(|o| o.params.len()).min().unwrap_or(0);
    for c in 0..len {
        let t = outs[0].params[c].time_mtu;
        for g in 0..nature.n_x() {
            let vals: Vec<String> = outs.iter().map(|o| o.params[c].mean[g].to_string()).collect();
            writeln!(w, "{t},{},{},{}", g + 1, nature.f_true[c][g], vals.join(",")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Plain-text summary of a metrics table.
pub fn format_report(rows: &[MetricsRow]) -> String {
    let mut s = format!(
        "{:<8} {:>3} {:<8} {:>6} {:>6} {:>10} {:>8} {:>10} {:>8}\n",
        "variant", "k", "infl", "rho_x", "rho_t", "rmse_x", "r_x", "rmse_F", "r_F"
    );
    for r in rows {
        if r.diverged {
            s += &format!(
                "{:<8} {:>3} {:<8} {:>6.3} {:>6.3} diverged after {} cycles\n",
                r.variant.name(),
                r.ensemble_size,
                format!("{:?}", r.inflation).to_lowercase(),
                r.rho_x,
                r.rho_theta,
                r.cycles_run
            );
        } else {
            s += &format!(
                "{:<8} {:>3} {:<8} {:>6.3} {:>6.3} {:>10.4} {:>8.4} {:>10.4} {:>8.4}\n",
                r.variant.name(),
                r.ensemble_size,
                format!("{:?}", r.inflation).to_lowercase(),
                r.rho_x,
                r.rho_theta,
                r.rmse_state,
                r.r_state,
                r.rmse_param,
                r.r_param
            );
        }
    }
    s
}
