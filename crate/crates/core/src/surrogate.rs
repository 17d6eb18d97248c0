//! Gaussian-process surrogate of the scalar-parameter to climatology map.
//!
//! Each output column gets an independent zero-mean GP on standardized
//! targets with a Matérn-5/2 kernel
//! `k(r) = s2 (1 + sqrt5 r / l + 5 r^2 / (3 l^2)) exp(-sqrt5 r / l)`.
//! Hyperparameters are picked by maximizing the log marginal likelihood
//! over a fixed logarithmic grid, which keeps fitting deterministic.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;

/// Which relationship the surrogate approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateMode {
    /// One GP per climatological index component.
    IndexVector,
    /// A single GP for the squared misfit against the observed index.
    SquaredMisfit,
}

impl SurrogateMode {
    fn as_str(self) -> &'static str {
        match self {
            SurrogateMode::IndexVector => "index",
            SurrogateMode::SquaredMisfit => "misfit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matern52 {
    pub signal_variance: f64,
    pub length_scale: f64,
}

impl Matern52 {
    pub fn eval(&self, r: f64) -> f64 {
        let s = SQRT5 * r.abs() / self.length_scale;
        self.signal_variance * (1.0 + s + s * s / 3.0) * (-s).exp()
    }
}

/// Hyperparameter search settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Number of log-spaced length scales in `[range/100, 10 range]`.
    pub n_length_scales: usize,
    /// Number of log-spaced signal variances in `[0.1, 10]` (standardized units).
    pub n_signal_variances: usize,
    /// Starting diagonal jitter in standardized units; escalated x10 on
    /// factorization failure up to [`MAX_JITTER`].
    pub jitter: f64,
    /// Optional observation-noise variances (standardized units) added to the
    /// grid. Empty means the GP interpolates up to jitter.
    pub noise_variances: Vec<f64>,
    /// Pins the hyperparameters instead of searching (standardized units).
    pub fixed: Option<Matern52>,
}

pub const MAX_JITTER: f64 = 1e-2;

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_length_scales: 20,
            n_signal_variances: 10,
            jitter: 1e-8,
            noise_variances: Vec::new(),
            fixed: None,
        }
    }
}

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// A fitted single-output GP in standardized target units.
#[derive(Debug, Clone)]
pub struct OutputGp {
    pub kernel: Matern52,
    /// Diagonal added to the Gram matrix (jitter plus any noise variance).
    pub noise: f64,
    pub target_mean: f64,
    pub target_scale: f64,
    pub log_marginal_likelihood: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpPrediction {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub mode: SurrogateMode,
    pub inputs: Vec<f64>,
    /// Training targets, one inner vector per output column.
    pub targets: Vec<Vec<f64>>,
    pub outputs: Vec<OutputGp>,
}

/// Predictive mean and variance per output, in original target units.
#[derive(Debug, Clone, PartialEq)]
pub struct GPPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

fn gram(inputs: &[f64], kernel: &Matern52, diag: f64) -> DMatrix<f64> {
    let n = inputs.len();
    DMatrix::from_fn(n, n, |i, j| {
        kernel.eval(inputs[i] - inputs[j]) + if i == j { diag } else { 0.0 }
    })
}

fn factor(inputs: &[f64], kernel: &Matern52, noise: f64) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = noise;
    loop {
        if let Some(ch) = gram(inputs, kernel, jitter).cholesky() {
            return Some((ch, jitter));
        }
        if jitter >= MAX_JITTER {
            return None;
        }
        jitter = (jitter * 10.0).clamp(1e-12, MAX_JITTER);
    }
}

fn log_marginal(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let alpha = chol.solve(y);
    let n = y.len() as f64;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    (lml, alpha)
}

fn fit_column(inputs: &[f64], column: &[f64], opts: &FitOptions) -> Result<OutputGp> {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let y = DVector::from_iterator(column.len(), column.iter().map(|v| (v - mean) / scale));

    let (lo, hi) = inputs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = hi - lo;

    let kernels: Vec<Matern52> = match opts.fixed {
        Some(k) => vec![k],
        None => {
            let mut ks = Vec::new();
            for &l in &logspace(range / 100.0, range * 10.0, opts.n_length_scales) {
                for &s in &logspace(0.1, 10.0, opts.n_signal_variances) {
                    ks.push(Matern52 {
                        signal_variance: s,
                        length_scale: l,
                    });
                }
            }
            ks
        }
    };
    let noises: Vec<f64> = if opts.noise_variances.is_empty() {
        vec![0.0]
    } else {
        opts.noise_variances.clone()
    };

    let mut best: Option<OutputGp> = None;
    for kernel in kernels {
        for &nv in &noises {
            let Some((chol, diag)) = factor(inputs, &kernel, nv + opts.jitter) else {
                continue;
            };
            let (lml, alpha) = log_marginal(&chol, &y);
            if !lml.is_finite() {
                continue;
            }
            if best.as_ref().is_none_or(|b| lml > b.log_marginal_likelihood) {
                best = Some(OutputGp {
                    kernel,
                    noise: diag,
                    target_mean: mean,
                    target_scale: scale,
                    log_marginal_likelihood: lml,
                    chol,
                    alpha,
                });
            }
        }
    }
    let mut best = best.ok_or_else(|| {
        Error::NotPositiveDefinite("Gram matrix singular at maximum jitter for every hyperparameter".into())
    })?;
    refine_alpha(inputs, &mut best, &y);
    Ok(best)
}

/// Iterative refinement of the weights; long length scales leave the Gram
/// matrix close to singular and a single Cholesky solve loses digits.
fn refine_alpha(inputs: &[f64], gp: &mut OutputGp, y: &DVector<f64>) {
    let k = gram(inputs, &gp.kernel, gp.noise);
    for _ in 0..3 {
        let r = y - &k * &gp.alpha;
        gp.alpha += gp.chol.solve(&r);
    }
}

impl OutputGp {
    fn rebuild(inputs: &[f64], column: &[f64], kernel: Matern52, noise: f64, mean: f64, scale: f64) -> Result<Self> {
        let chol = gram(inputs, &kernel, noise)
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("stored GP Gram matrix".into()))?;
        let y = DVector::from_iterator(column.len(), column.iter().map(|v| (v - mean) / scale));
        let (lml, alpha) = log_marginal(&chol, &y);
        let mut gp = Self {
            kernel,
            noise,
            target_mean: mean,
            target_scale: scale,
            log_marginal_likelihood: lml,
            chol,
            alpha,
        };
        refine_alpha(inputs, &mut gp, &y);
        Ok(gp)
    }

    fn predict(&self, inputs: &[f64], theta: f64) -> GpPrediction {
        let kstar = DVector::from_iterator(inputs.len(), inputs.iter().map(|&x| self.kernel.eval(theta - x)));
        let mean = kstar.dot(&self.alpha);
        // solve_lower_triangular only reads the lower factor of l_dirty
        let v = self.chol.l_dirty().solve_lower_triangular(&kstar).unwrap_or_else(|| kstar.clone());
        let var = (self.kernel.signal_variance - v.norm_squared()).max(0.0);
        GpPrediction {
            mean: self.target_mean + self.target_scale * mean,
            variance: var * self.target_scale * self.target_scale,
        }
    }
}

impl GpModel {
    pub fn fit(inputs: &[f64], targets: &[Vec<f64>], mode: SurrogateMode, opts: &FitOptions) -> Result<Self> {
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite GP input".into()));
        }
        let mut sorted = inputs.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() < 3 {
            return Err(Error::InvalidInput("GP needs at least 3 distinct inputs".into()));
        }
        if targets.is_empty() || targets.iter().any(|c| c.len() != inputs.len()) {
            return Err(Error::InvalidInput("target columns must match inputs".into()));
        }
        if mode == SurrogateMode::SquaredMisfit && targets.len() != 1 {
            return Err(Error::InvalidInput("misfit mode takes exactly one target column".into()));
        }
        let outputs = targets
            .iter()
            .map(|col| fit_column(inputs, col, opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            outputs,
        })
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn predict(&self, theta: f64) -> Result<GPPrediction> {
        if !theta.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite GP query {theta}")));
        }
        let (mean, variance) = self
            .outputs
            .iter()
            .map(|o| {
                let p = o.predict(&self.inputs, theta);
                (p.mean, p.variance)
            })
            .unzip();
        Ok(GPPrediction { mean, variance })
    }

    /// Writes the model as a flat text file.
    ///
    /// Layout: a `mode` line, an `n_train n_outputs` line, one
    /// `output <j> <signal_variance> <length_scale> <noise> <target_mean> <target_scale>`
    /// line per output (kernel values in standardized units), then `n_train`
    /// rows `theta target_1 .. target_m`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "# hoope gp surrogate, matern 5/2").map_err(io)?;
        writeln!(w, "mode {}", self.mode.as_str()).map_err(io)?;
        writeln!(w, "size {} {}", self.inputs.len(), self.outputs.len()).map_err(io)?;
        for (j, o) in self.outputs.iter().enumerate() {
            writeln!(
                w,
                "output {} {} {} {} {} {}",
                j, o.kernel.signal_variance, o.kernel.length_scale, o.noise, o.target_mean, o.target_scale
            )
            .map_err(io)?;
        }
        for (i, x) in self.inputs.iter().enumerate() {
            let mut row = x.to_string();
            for col in &self.targets {
                row.push(' ');
                row.push_str(&col[i].to_string());
            }
            writeln!(w, "{row}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::parse(path, m.to_string());
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(path, e.to_string()));
        let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty());

        let mode = match lines.next().and_then(|l| l.strip_prefix("mode ")) {
            Some("index") => SurrogateMode::IndexVector,
            Some("misfit") => SurrogateMode::SquaredMisfit,
            _ => return Err(bad("missing or unknown mode line")),
        };
        let size: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("size "))
            .ok_or_else(|| bad("missing size line"))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad size")))
            .collect::<Result<_>>()?;
        let [n_train, n_out] = size[..] else {
            return Err(bad("size line needs two integers"));
        };
        let mut hyper = Vec::with_capacity(n_out);
        for _ in 0..n_out {
            let f: Vec<&str> = lines
                .next()
                .and_then(|l| l.strip_prefix("output "))
                .ok_or_else(|| bad("missing output line"))?
                .split_whitespace()
                .collect();
            if f.len() != 6 {
                return Err(bad("output line needs 6 fields"));
            }
            hyper.push([num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?]);
        }
        let mut inputs = Vec::with_capacity(n_train);
        let mut targets = vec![Vec::with_capacity(n_train); n_out];
        for _ in 0..n_train {
            let row: Vec<f64> = lines
                .next()
                .ok_or_else(|| bad("truncated training table"))?
                .split_whitespace()
                .map(num)
                .collect::<Result<_>>()?;
            if row.len() != n_out + 1 {
                return Err(bad("training row has wrong width"));
            }
            inputs.push(row[0]);
            for (col, v) in targets.iter_mut().zip(&row[1..]) {
                col.push(*v);
            }
        }
        let outputs = hyper
            .iter()
            .zip(&targets)
            .map(|(h, col)| {
                let kernel = Matern52 {
                    signal_variance: h[0],
                    length_scale: h[1],
                };
                OutputGp::rebuild(&inputs, col, kernel, h[2], h[3], h[4])
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            mode,
            inputs,
            targets,
            outputs,
        })
    }
}
