//! Offline batch optimization: random-walk Metropolis–Hastings over a scalar
//! time-invariant parameter through the GP surrogate, followed by a Gaussian
//! fit of the retained samples.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::surrogate::{GpModel, SurrogateMode};
use crate::synth::ClimIndex;
use crate::{Error, Result};

pub const MCMC_ITERATIONS: usize = 500_000;
pub const MCMC_BURNIN: usize = 100_000;

/// Trimmed uniform prior on the parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterPrior {
    pub lower: f64,
    pub upper: f64,
}

impl ParameterPrior {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidInput(format!(
                "prior bounds must satisfy lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, theta: f64) -> bool {
        theta >= self.lower && theta <= self.upper
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    /// Default proposal standard deviation: 5% of the prior range.
    pub fn default_proposal_std(&self) -> f64 {
        0.05 * (self.upper - self.lower)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcChain {
    /// Post-burn-in samples.
    pub samples: Vec<f64>,
    pub n_total: usize,
    pub n_burnin: usize,
    /// Accepted moves over all iterations.
    pub acceptance_rate: f64,
    /// Accepted moves over proposals that landed inside the prior bounds.
    pub in_bounds_acceptance_rate: f64,
}

/// Gaussian climatology `N(theta_c, diag(c_diag))` over the parameter field.
#[derive(Debug, Clone, PartialEq)]
pub struct ClimatologyPrior {
    pub theta_c: Vec<f64>,
    pub c_diag: Vec<f64>,
}

impl ClimatologyPrior {
    pub fn broadcast(mean: f64, variance: f64, n_params: usize) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::InvalidInput(format!(
                "climatology variance must be positive, got {variance}"
            )));
        }
        Ok(Self {
            theta_c: vec![mean; n_params],
            c_diag: vec![variance; n_params],
        })
    }

    pub fn n_params(&self) -> usize {
        self.theta_c.len()
    }

    /// Two whitespace-separated columns `theta_c c_diag`, one row per parameter.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "# theta_c c_diag").map_err(io)?;
        for (m, v) in self.theta_c.iter().zip(&self.c_diag) {
            writeln!(w, "{m} {v}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut prior = ClimatologyPrior {
            theta_c: vec![],
            c_diag: vec![],
        };
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| Error::parse(path, e.to_string())))
                .collect::<Result<_>>()?;
            let [m, v] = vals[..] else {
                return Err(Error::parse(path, format!("expected two columns in {line:?}")));
            };
            if !(v > 0.0) {
                return Err(Error::parse(path, format!("non-positive variance {v}")));
            }
            prior.theta_c.push(m);
            prior.c_diag.push(v);
        }
        if prior.theta_c.is_empty() {
            return Err(Error::parse(path, "no parameters"));
        }
        Ok(prior)
    }
}

/// Misfit `Phi` of a parameter value against the observed index.
///
/// Index mode: `1/2 sum_i (gamma_o_i - mu_i)^2 / (R_gp_i + R_o_i)`.
/// Misfit mode: `1/2 mu / (R_gp + R_o)` where the GP predicts the squared misfit.
pub fn log_misfit_phi(model: &GpModel, theta: f64, gamma_obs: &ClimIndex, r_o: &[f64]) -> Result<f64> {
    if r_o.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::InvalidInput("observation index variance must be positive".into()));
    }
    let p = model.predict(theta)?;
    let phi = match model.mode {
        SurrogateMode::IndexVector => {
            if gamma_obs.dim() != p.mean.len() || r_o.len() != p.mean.len() {
                return Err(Error::InvalidInput(format!(
                    "index dimension mismatch: surrogate {}, observed {}, R_o {}",
                    p.mean.len(),
                    gamma_obs.dim(),
                    r_o.len()
                )));
            }
            0.5 * gamma_obs
                .values
                .iter()
                .zip(&p.mean)
                .zip(p.variance.iter().zip(r_o))
                .map(|((g, mu), (rgp, ro))| (g - mu).powi(2) / (rgp + ro))
                .sum::<f64>()
        }
        SurrogateMode::SquaredMisfit => 0.5 * p.mean[0] / (p.variance[0] + r_o[0]),
    };
    if !phi.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite misfit at theta = {theta}")));
    }
    Ok(phi)
}

/// Random-walk Metropolis–Hastings with a zero-mean Gaussian proposal.
///
/// Candidates outside the prior bounds are rejected without evaluating `phi`.
/// A candidate is accepted when a uniform draw `b <= min(1, exp(phi_j - phi_cand))`.
/// The chain starts at the prior midpoint.
pub fn mh_sample<F>(
    mut phi: F,
    prior: &ParameterPrior,
    proposal_std: f64,
    n_total: usize,
    n_burnin: usize,
    seed: u64,
) -> Result<McmcChain>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(proposal_std > 0.0) {
        return Err(Error::InvalidInput(format!(
            "proposal std must be positive, got {proposal_std}"
        )));
    }
    if n_burnin >= n_total {
        return Err(Error::InvalidInput("burn-in must be shorter than the chain".into()));
    }
    let step = Normal::new(0.0, proposal_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut current = prior.midpoint();
    let mut phi_current = phi(current)?;
    let mut samples = Vec::with_capacity(n_total - n_burnin);
    let (mut accepted, mut in_bounds) = (0usize, 0usize);

    for j in 0..n_total {
        let candidate = current + step.sample(&mut rng);
        let b: f64 = rng.random();
        if prior.contains(candidate) {
            in_bounds += 1;
            let phi_candidate = phi(candidate)?;
            let alpha = (phi_current - phi_candidate).exp().min(1.0);
            if b <= alpha {
                current = candidate;
                phi_current = phi_candidate;
                accepted += 1;
            }
        }
        if j >= n_burnin {
            samples.push(current);
        }
    }

    Ok(McmcChain {
        samples,
        n_total,
        n_burnin,
        acceptance_rate: accepted as f64 / n_total as f64,
        in_bounds_acceptance_rate: if in_bounds == 0 {
            0.0
        } else {
            accepted as f64 / in_bounds as f64
        },
    })
}

/// Sample mean and (n - 1) variance of the chain, broadcast to `n_params`.
pub fn fit_gaussian(chain: &McmcChain, n_params: usize) -> Result<ClimatologyPrior> {
    let n = chain.samples.len();
    if n < 2 {
        return Err(Error::InvalidInput("chain needs at least two samples".into()));
    }
    let mean = chain.samples.iter().sum::<f64>() / n as f64;
    let var = chain.samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if !(var > 0.0) {
        return Err(Error::DegenerateStatistic("chain has zero variance".into()));
    }
    ClimatologyPrior::broadcast(mean, var, n_params)
}

/// Dumps the chain as `iteration,theta` CSV (iteration counted from the
/// start of the chain, including burn-in).
pub fn write_chain_csv(chain: &McmcChain, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "iteration,theta").map_err(io)?;
    for (i, s) in chain.samples.iter().enumerate() {
        writeln!(w, "{},{}", chain.n_burnin + i, s).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::{FitOptions, Matern52};

    fn wide() -> ParameterPrior {
        ParameterPrior::new(-10.0, 30.0).unwrap()
    }

    #[test]
    fn prior_validation() {
        assert!(ParameterPrior::new(1.0, 1.0).is_err());
        assert!(ParameterPrior::new(2.0, 1.0).is_err());
        let p = ParameterPrior::new(0.0, 30.0).unwrap();
        assert_eq!(p.midpoint(), 15.0);
        assert!((p.default_proposal_std() - 1.5).abs() < 1e-15);
    }

    /// A surrogate whose predictions are pinned: three flat outputs built from
    /// constant targets so the predicted mean equals the constant everywhere.
    fn flat_model(values: &[f64]) -> GpModel {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let targets: Vec<Vec<f64>> = values.iter().map(|&v| vec![v; 4]).collect();
        let opts = FitOptions {
            fixed: Some(Matern52 {
                signal_variance: 1.0,
                length_scale: 1.0,
            }),
            jitter: 1e-10,
            ..FitOptions::default()
        };
        GpModel::fit(&xs, &targets, SurrogateMode::IndexVector, &opts).unwrap()
    }

    #[test]
    fn zero_misfit_when_prediction_matches() {
        let m = flat_model(&[0.7, 0.5, 0.3]);
        let g = ClimIndex {
            values: vec![0.7, 0.5, 0.3],
            lags_mtu: vec![0.1, 0.15, 0.2],
        };
        assert!(log_misfit_phi(&m, 1.3, &g, &[0.1, 0.2, 0.3]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn misfit_matches_arithmetic_oracle() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64 * 2.5).collect();
        let targets = vec![
            xs.iter().map(|x| (0.2 * x).cos()).collect::<Vec<_>>(),
            xs.iter().map(|x| 0.01 * x).collect(),
        ];
        let m = GpModel::fit(&xs, &targets, SurrogateMode::IndexVector, &FitOptions::default()).unwrap();
        let g = ClimIndex {
            values: vec![0.3, 0.1],
            lags_mtu: vec![0.1, 0.15],
        };
        let ro = [0.02, 0.05];
        for theta in [1.0, 9.3, 21.4] {
            let p = m.predict(theta).unwrap();
            let mut want = 0.0;
            for i in 0..2 {
                let r = g.values[i] - p.mean[i];
                want += r * r / (p.variance[i] + ro[i]);
            }
            want *= 0.5;
            assert!((log_misfit_phi(&m, theta, &g, &ro).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn misfit_scalar_substitution() {
        // residual 2, R_gp ~ 0 (interpolating flat surrogate), R_o = 2 -> 1/2 * 4 / 2 = 1
        let m = flat_model(&[3.0]);
        let g = ClimIndex {
            values: vec![1.0],
            lags_mtu: vec![0.1],
        };
        let v = m.predict(1.0).unwrap().variance[0];
        assert!(v < 1e-8);
        let phi = log_misfit_phi(&m, 1.0, &g, &[2.0 - v]).unwrap();
        assert!((phi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn misfit_mode_uses_predicted_square() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let opts = FitOptions {
            fixed: Some(Matern52 {
                signal_variance: 1.0,
                length_scale: 1.0,
            }),
            jitter: 1e-10,
            ..FitOptions::default()
        };
        let m = GpModel::fit(&xs, &[vec![4.0; 4]], SurrogateMode::SquaredMisfit, &opts).unwrap();
        let g = ClimIndex {
            values: vec![],
            lags_mtu: vec![],
        };
        let p = m.predict(2.0).unwrap();
        let phi = log_misfit_phi(&m, 2.0, &g, &[1.0]).unwrap();
        assert!((phi - 0.5 * 4.0 / (p.variance[0] + 1.0)).abs() < 1e-12);
        assert!(log_misfit_phi(&m, 2.0, &g, &[0.0]).is_err());
    }

    #[test]
    fn flat_target_samples_uniformly() {
        let prior = ParameterPrior::new(0.0, 1.0).unwrap();
        let chain = mh_sample(|_| Ok(3.0), &prior, 0.3, MCMC_ITERATIONS, MCMC_BURNIN, 1).unwrap();
        assert_eq!(chain.samples.len(), 400_000);
        assert_eq!(chain.in_bounds_acceptance_rate, 1.0);
        let mut s = chain.samples.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let ks = s
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn gaussian_target_moments() {
        let chain = mh_sample(
            |t| Ok((t - 10.0).powi(2) / 8.0),
            &wide(),
            wide().default_proposal_std(),
            MCMC_ITERATIONS,
            MCMC_BURNIN,
            2024,
        )
        .unwrap();
        let g = fit_gaussian(&chain, 1).unwrap();
        assert!((g.theta_c[0] - 10.0).abs() < 0.05, "mean {}", g.theta_c[0]);
        assert!((g.c_diag[0] - 4.0).abs() < 0.15, "variance {}", g.c_diag[0]);
    }

    #[test]
    fn samples_stay_in_bounds_and_chain_is_reproducible() {
        let prior = ParameterPrior::new(2.0, 3.0).unwrap();
        let phi = |t: f64| Ok(-5.0 * t);
        let a = mh_sample(phi, &prior, 0.5, 20_000, 1_000, 9).unwrap();
        assert!(a.samples.iter().all(|&s| prior.contains(s)));
        let b = mh_sample(phi, &prior, 0.5, 20_000, 1_000, 9).unwrap();
        assert_eq!(a, b);
        assert!(mh_sample(phi, &prior, 0.0, 10, 1, 9).is_err());
        assert!(mh_sample(phi, &prior, 0.1, 10, 10, 9).is_err());
    }

    #[test]
    fn two_state_visit_frequencies_follow_boltzmann_weights() {
        // Steep walls confine the walker to two narrow wells at 1 and 3 whose
        // depths differ by ln 3, so it should visit the deeper well 3x as often.
        let prior = ParameterPrior::new(0.0, 4.0).unwrap();
        let phi = |t: f64| {
            let well = |c: f64| ((t - c) / 0.05).powi(2);
            Ok(if t < 2.0 { well(1.0) } else { well(3.0) + 3f64.ln() })
        };
        let chain = mh_sample(phi, &prior, 1.5, 1_000_000, 10_000, 3).unwrap();
        let left = chain.samples.iter().filter(|&&s| s < 2.0).count() as f64;
        let right = chain.samples.len() as f64 - left;
        let ratio = left / right;
        assert!((ratio - 3.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn fit_gaussian_cases() {
        let chain = McmcChain {
            samples: vec![1.0, 2.0, 3.0],
            n_total: 3,
            n_burnin: 0,
            acceptance_rate: 1.0,
            in_bounds_acceptance_rate: 1.0,
        };
        let g = fit_gaussian(&chain, 9).unwrap();
        assert_eq!(g.theta_c, vec![2.0; 9]);
        assert_eq!(g.c_diag, vec![1.0; 9]);
        let flat = McmcChain {
            samples: vec![2.0; 5],
            ..chain
        };
        assert!(matches!(fit_gaussian(&flat, 1), Err(Error::DegenerateStatistic(_))));
    }

    #[test]
    fn prior_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prior.txt");
        let prior = ClimatologyPrior::broadcast(9.123456789, 1.25, 9).unwrap();
        prior.save(&p).unwrap();
        assert_eq!(ClimatologyPrior::load(&p).unwrap(), prior);
        std::fs::write(&p, "1.0 -2.0\n").unwrap();
        assert!(ClimatologyPrior::load(&p).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fitted_moments_equal_chain_moments(samples in proptest::collection::vec(-50.0f64..50.0, 2..200)) {
                prop_assume!(samples.iter().any(|&s| (s - samples[0]).abs() > 1e-6));
                let chain = McmcChain {
                    samples: samples.clone(),
                    n_total: samples.len(),
                    n_burnin: 0,
                    acceptance_rate: 0.5,
                    in_bounds_acceptance_rate: 0.5,
                };
                let g = fit_gaussian(&chain, 3).unwrap();
                let n = samples.len() as f64;
                let m = samples.iter().sum::<f64>() / n;
                let ss: f64 = samples.iter().map(|x| x * x).sum();
                let var = (ss - n * m * m) / (n - 1.0);
                prop_assert!((g.theta_c[2] - m).abs() < 1e-12 * (1.0 + m.abs()));
                prop_assert!((g.c_diag[0] - var).abs() < 1e-9 * (1.0 + var));
            }
        }
    }
}
