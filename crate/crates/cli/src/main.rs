use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hoope_core::batchopt::{self, ClimatologyPrior};
use hoope_core::harness::{self, AssimilationOutput, ExperimentConfig, MetricsRow, Preset, Variant};
use hoope_core::synth;
use hoope_core::Error;

#[derive(Parser)]
#[command(name = "hoope", version, about = "Lorenz96 twin experiments for climatology-constrained parameter estimation")]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment scale.
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Command-line values for configuration keys; they win over the file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed_nature: Option<u64>,
    #[arg(long, global = true)]
    seed_obs: Option<u64>,
    #[arg(long, global = true)]
    seed_init: Option<u64>,
    #[arg(long, global = true)]
    seed_mcmc: Option<u64>,
    #[arg(long, global = true)]
    ensemble_size: Option<i64>,
    #[arg(long, global = true)]
    run_length_mtu: Option<f64>,
    #[arg(long, global = true)]
    spinup_mtu: Option<f64>,
    /// `adaptive` or `fixed`.
    #[arg(long, global = true)]
    inflation: Option<String>,
    #[arg(long, global = true)]
    rho_x: Option<f64>,
    #[arg(long, global = true)]
    rho_theta: Option<f64>,
    #[arg(long, global = true)]
    localization_sigma: Option<f64>,
    #[arg(long, global = true)]
    nature_file: Option<PathBuf>,
    #[arg(long, global = true)]
    obs_file: Option<PathBuf>,
    #[arg(long, global = true)]
    prior_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the two-scale model and write nature.csv.
    Nature,
    /// Sample noisy observations of the nature run.
    Obsgen,
    /// Offline calibration: writes prior.txt, chain.csv, surrogate.txt, offline_index.csv.
    Offline,
    /// Cycled assimilation: writes metrics.csv, param_timeseries*.csv, param_hovmoller.csv.
    Assimilate {
        /// nohoope, pso, rtc or all.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Fixed-inflation grid; writes metrics.csv with one row per cell.
    Sweep {
        /// nohoope, pso, rtc or all.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Print a metrics table.
    Report {
        /// Defaults to <output_dir>/metrics.csv.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Stage { source, .. } => exit_code(source),
        e if e.is_divergence() => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut table: toml::Table = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let o = &cli.overrides;
    let mut put = |k: &str, v: Option<toml::Value>| {
        if let Some(v) = v {
            table.insert(k.to_string(), v);
        }
    };
    let int = |v: Option<u64>| v.map(|s| toml::Value::Integer(s as i64));
    let path = |v: &Option<PathBuf>| v.as_ref().map(|p| toml::Value::String(p.display().to_string()));
    put("seed_nature", int(o.seed_nature));
    put("seed_obs", int(o.seed_obs));
    put("seed_init", int(o.seed_init));
    put("seed_mcmc", int(o.seed_mcmc));
    put("ensemble_size", o.ensemble_size.map(toml::Value::Integer));
    put("run_length_mtu", o.run_length_mtu.map(toml::Value::Float));
    put("spinup_mtu", o.spinup_mtu.map(toml::Value::Float));
    put("inflation", o.inflation.clone().map(toml::Value::String));
    put("rho_x", o.rho_x.map(toml::Value::Float));
    put("rho_theta", o.rho_theta.map(toml::Value::Float));
    put("localization_sigma", o.localization_sigma.map(toml::Value::Float));
    put("output_dir", path(&o.output_dir));
    put("nature_file", path(&o.nature_file));
    put("obs_file", path(&o.obs_file));
    put("prior_file", path(&o.prior_file));
    if o.rho_x.is_some() && o.inflation.is_none() {
        table.insert("inflation".into(), toml::Value::String("fixed".into()));
    }
    let preset = cli.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    ExperimentConfig::from_toml_str(&table.to_string(), preset)
}

fn variants(arg: &Option<String>, cfg: &ExperimentConfig) -> Result<Vec<Variant>, Error> {
    match arg.as_deref() {
        None => Ok(vec![cfg.variant]),
        Some("all") => Ok(Variant::ALL.to_vec()),
        Some(v) => Ok(vec![v.parse()?]),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_prior(cfg: &ExperimentConfig, required: bool) -> Result<Option<ClimatologyPrior>, Error> {
    let p = cfg.prior_path();
    if p.exists() {
        ClimatologyPrior::load(&p).map(Some)
    } else if required {
        Err(Error::Config(format!("prior file {} not found; run `hoope offline` first", p.display())))
    } else {
        Ok(None)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Nature => {
            ensure_dir(&out)?;
            let run = harness::generate_nature(&cfg)?;
            synth::write_nature_csv(&run, &cfg.nature_path())?;
            println!("wrote {} ({} times)", cfg.nature_path().display(), run.len());
        }
        Command::Obsgen => {
            ensure_dir(&out)?;
            let run = synth::read_nature_csv(&cfg.nature_path())?;
            let obs = harness::generate_observations(&cfg, &run)?;
            synth::write_observations_csv(&obs, &cfg.obs_path())?;
            println!("wrote {} ({} batches)", cfg.obs_path().display(), obs.len());
        }
        Command::Offline => {
            ensure_dir(&out)?;
            let obs = synth::read_observations_csv(&cfg.obs_path())?;
            let res = harness::run_offline(&cfg, &obs)?;
            res.prior.save(&cfg.prior_path())?;
            batchopt::write_chain_csv(&res.chain, &out.join("chain.csv"))?;
            res.surrogate.save(&out.join("surrogate.txt"))?;
            harness::write_offline_indices_csv(&res, &out.join("offline_index.csv"))?;
            println!(
                "climatology N({:.4}, {:.4}); acceptance rate {:.3}; wrote {}",
                res.prior.theta_c[0],
                res.prior.c_diag[0],
                res.chain.acceptance_rate,
                cfg.prior_path().display()
            );
        }
        Command::Assimilate { variant } => {
            ensure_dir(&out)?;
            let vs = variants(variant, &cfg)?;
            let nature = synth::read_nature_csv(&cfg.nature_path())?;
            let obs = synth::read_observations_csv(&cfg.obs_path())?;
            let prior = load_prior(&cfg, vs.iter().any(|v| v.needs_prior()))?;
            let mut outs: Vec<AssimilationOutput> = Vec::new();
            let mut rows = Vec::new();
            for &v in &vs {
                let mut c = cfg.clone();
                c.variant = v;
                let o = harness::run_assimilation(&c, &nature, &obs, prior.as_ref())?;
                rows.push(MetricsRow::new(&c, &o.metrics));
                let name = if vs.len() == 1 {
                    "param_timeseries.csv".to_string()
                } else {
                    format!("param_timeseries_{v}.csv")
                };
                harness::write_param_timeseries_csv(&o, &nature, &out.join(name))?;
                outs.push(o);
            }
            harness::write_metrics_csv(&rows, &out.join("metrics.csv"))?;
            harness::write_param_hovmoller_csv(&outs, &nature, &out.join("param_hovmoller.csv"))?;
            print!("{}", harness::format_report(&rows));
            if let Some(o) = outs.iter().find(|o| o.metrics.diverged) {
                let t = o.params.last().map_or(0.0, |p| p.time_mtu);
                return Err(Error::Diverged { time_mtu: t });
            }
        }
        Command::Sweep { variant } => {
            ensure_dir(&out)?;
            let vs = variants(variant, &cfg)?;
            let nature = synth::read_nature_csv(&cfg.nature_path())?;
            let obs = synth::read_observations_csv(&cfg.obs_path())?;
            let prior = load_prior(&cfg, vs.iter().any(|v| v.needs_prior()))?;
            let mut rows = Vec::new();
            for &v in &vs {
                let mut c = cfg.clone();
                c.variant = v;
                rows.extend(harness::sweep(&c, &cfg.sweep_rho_x, &cfg.sweep_rho_theta, &nature, &obs, prior.as_ref())?);
            }
            harness::write_metrics_csv(&rows, &out.join("metrics.csv"))?;
            print!("{}", harness::format_report(&rows));
        }
        Command::Report { metrics } => {
            let p = metrics.clone().unwrap_or_else(|| out.join("metrics.csv"));
            let rows = harness::read_metrics_csv(&p)?;
            print!("{}", harness::format_report(&rows));
        }
    }
    Ok(())
}
