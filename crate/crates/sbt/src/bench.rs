//! Synthetic test functions, evaluation metrics, and an experiment driver
//! comparing plain ensemble fits on data subsets against sharded fits at
//! several sharding depths.
//!
//! One experiment generates a single dataset from its seed, then runs every
//! (variant, replicate) fit on that dataset; replicates differ only in the
//! sampler seed. Held-out truths are always noise free.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bart::{bart_fit, bart_predict, BartConfig, PredictionSummary};
use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamDomain};
use crate::sharded::{sbt_fit, sbt_predict, AuxMode, SbtConfig};

/// Test functions on the unit cube. Dimensions beyond what a function
/// reads are inert.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TestFunction {
    Branin,
    Friedman,
    /// 0 below the midpoint of the first coordinate, 1 at or above it.
    Step,
    Constant(f64),
}

impl TestFunction {
    pub fn min_dim(&self) -> usize {
        match self {
            TestFunction::Branin => 2,
            TestFunction::Friedman => 5,
            TestFunction::Step | TestFunction::Constant(_) => 1,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            TestFunction::Branin => branin(x),
            TestFunction::Friedman => friedman(x),
            TestFunction::Step => {
                check_box(x, 1)?;
                Ok(if x[0] < 0.5 { 0.0 } else { 1.0 })
            }
            TestFunction::Constant(c) => {
                check_box(x, 1)?;
                Ok(*c)
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TestFunction::Branin => "branin",
            TestFunction::Friedman => "friedman",
            TestFunction::Step => "step",
            TestFunction::Constant(_) => "constant",
        }
    }
}

fn check_box(x: &[f64], min_dim: usize) -> Result<()> {
    if x.len() < min_dim {
        return Err(Error::Input(format!(
            "point has {} coordinates, need at least {min_dim}",
            x.len()
        )));
    }
    for (i, &v) in x.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!(
                "coordinate {i} is {v}, outside the unit cube"
            )));
        }
    }
    Ok(())
}

/// Branin function on unit coordinates, evaluated after the affine map of
/// the first two coordinates to [-5, 10] x [0, 15]. Global minimum
/// 0.397887 at three points, one of them (pi, 2.275) in mapped
/// coordinates.
pub fn branin(x: &[f64]) -> Result<f64> {
    check_box(x, 2)?;
    let x1 = -5.0 + 15.0 * x[0];
    let x2 = 15.0 * x[1];
    let pi = std::f64::consts::PI;
    let a = 1.0;
    let b = 5.1 / (4.0 * pi * pi);
    let c = 5.0 / pi;
    let r = 6.0;
    let s = 10.0;
    let t = 1.0 / (8.0 * pi);
    let hump = x2 - b * x1 * x1 + c * x1 - r;
    Ok(a * hump * hump + s * (1.0 - t) * x1.cos() + s)
}

/// Friedman function: `10 sin(pi x1 x2) + 20 (x3 - 1/2)^2 + 10 x4 + 5 x5`.
pub fn friedman(x: &[f64]) -> Result<f64> {
    check_box(x, 5)?;
    let pi = std::f64::consts::PI;
    Ok(10.0 * (pi * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4])
}

/// Root mean squared error.
pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(Error::Input(format!(
            "{} predictions against {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mse = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt())
}

/// Fraction of truths inside their `[lo, hi]` interval.
pub fn coverage95(intervals: &[(f64, f64)], truths: &[f64]) -> Result<f64> {
    if intervals.len() != truths.len() || intervals.is_empty() {
        return Err(Error::Input(format!(
            "{} intervals against {} truths",
            intervals.len(),
            truths.len()
        )));
    }
    let mut hits = 0usize;
    for (&(lo, hi), &t) in intervals.iter().zip(truths) {
        if !(lo <= hi) {
            return Err(Error::Input(format!("malformed interval [{lo}, {hi}]")));
        }
        if lo <= t && t <= hi {
            hits += 1;
        }
    }
    Ok(hits as f64 / truths.len() as f64)
}

/// n x d matrix of independent uniforms from the experiment's data stream.
fn uniform_design(n: usize, d: usize, seed: u64) -> Result<Matrix> {
    let mut rng = stream_rng(seed, StreamDomain::Data, 0, 0);
    let values: Vec<f64> = (0..n * d).map(|_| rng.random()).collect();
    Matrix::new(values, n, d)
}

/// Latin hypercube sample: each dimension is stratified into n equal cells
/// with exactly one jittered point per cell, independently permuted across
/// dimensions.
pub fn latin_hypercube(n: usize, d: usize, seed: u64) -> Result<Matrix> {
    if n == 0 || d == 0 {
        return Err(Error::Input("need n >= 1 points and d >= 1 dimensions".into()));
    }
    let mut rng = stream_rng(seed, StreamDomain::Data, 1, 0);
    let mut values = vec![0.0; n * d];
    for dim in 0..d {
        let mut cells: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            cells.swap(i, j);
        }
        for (row, &cell) in cells.iter().enumerate() {
            values[row * d + dim] = (cell as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    Matrix::new(values, n, d)
}

/// Full experiment description. One dataset is generated from `seed`;
/// every variant x replicate pair is fitted on it.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub function: TestFunction,
    pub n: usize,
    pub n_test: usize,
    pub d: usize,
    pub noise_sd: f64,
    pub m: usize,
    /// Subset fits: fractions of the training data given to the plain
    /// ensemble, e.g. 0.25, 0.5, 1.0.
    pub bart_fractions: Vec<f64>,
    /// Sharded fits, one per listed sharding depth.
    pub shardepths: Vec<usize>,
    pub replicates: usize,
    pub n_mcmc: usize,
    pub burn: usize,
    pub seed: u64,
}

impl ExperimentSpec {
    /// The six standard variants: subset fits at 25/50/100% and sharded
    /// fits at depths 0, 1, 2.
    pub fn standard(function: TestFunction, n: usize, d: usize, seed: u64) -> Self {
        ExperimentSpec {
            function,
            n,
            n_test: 1000,
            d,
            noise_sd: 0.0,
            m: 10,
            bart_fractions: vec![0.25, 0.5, 1.0],
            shardepths: vec![0, 1, 2],
            replicates: 20,
            n_mcmc: 1000,
            burn: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < self.function.min_dim() {
            return Err(Error::Input(format!(
                "{} needs at least {} dimensions, got {}",
                self.function.label(),
                self.function.min_dim(),
                self.d
            )));
        }
        if self.n_test < 1 || self.n < 1 {
            return Err(Error::Input("need n >= 1 and n_test >= 1".into()));
        }
        if self.replicates < 1 {
            return Err(Error::Input("need at least one replicate".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Input("noise_sd must be nonnegative".into()));
        }
        if self.bart_fractions.is_empty() && self.shardepths.is_empty() {
            return Err(Error::Input("no variants requested".into()));
        }
        for &f in &self.bart_fractions {
            if !(f > 0.01 && f <= 1.0) {
                return Err(Error::Input(format!(
                    "subset fraction {f} outside (0.01, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// One fitted variant within an experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// Plain ensemble on a seeded subsample of the given fraction.
    BartSubset { fraction: f64 },
    /// Sharded fit on the full data at the given sharding depth.
    Sbt { shardepth: usize },
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::BartSubset { fraction } => {
                format!("bart{}", (fraction * 100.0).round() as u32)
            }
            Variant::Sbt { shardepth } => format!("sbt{shardepth}"),
        }
    }
}

/// Metrics for one (variant, replicate) fit.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub variant: String,
    pub replicate: usize,
    /// Training rows the fit actually consumed.
    pub n_used: usize,
    pub d: usize,
    pub m: usize,
    pub shardepth: Option<usize>,
    pub rmse: f64,
    pub coverage95: f64,
    /// Fit wall time divided by the iteration count.
    pub wall_per_iteration: f64,
}

fn variants_of(spec: &ExperimentSpec) -> Vec<Variant> {
    let mut out: Vec<Variant> = spec
        .bart_fractions
        .iter()
        .map(|&fraction| Variant::BartSubset { fraction })
        .collect();
    out.extend(spec.shardepths.iter().map(|&shardepth| Variant::Sbt { shardepth }));
    out
}

/// Seeded subsample without replacement, returned in dataset order.
fn subsample_rows(n: usize, k: usize, seed: u64, stream_a: u64, stream_b: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, StreamDomain::Data, stream_a, stream_b);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut idx = pool[..k].to_vec();
    idx.sort_unstable();
    idx
}

fn run_one(
    spec: &ExperimentSpec,
    variant: Variant,
    replicate: usize,
    x_train: &Matrix,
    y_train: &[f64],
    x_test: &Matrix,
    y_truth: &[f64],
) -> Result<MetricsReport> {
    let fit_seed: u64 = stream_rng(spec.seed, StreamDomain::Data, 2, replicate as u64).random();
    let predict_seed: u64 =
        stream_rng(spec.seed, StreamDomain::Data, 3, replicate as u64).random();

    let (summaries, n_used, shardepth, elapsed): (Vec<PredictionSummary>, usize, Option<usize>, f64) =
        match variant {
            Variant::BartSubset { fraction } => {
                let k = ((spec.n as f64 * fraction).round() as usize).clamp(1, spec.n);
                let idx = if k == spec.n {
                    (0..spec.n).collect()
                } else {
                    let pct = (fraction * 100.0).round() as u64;
                    subsample_rows(spec.n, k, spec.seed, 4 + pct, replicate as u64)
                };
                let mut values = Vec::with_capacity(k * spec.d);
                let mut ys = Vec::with_capacity(k);
                for &i in &idx {
                    values.extend_from_slice(x_train.row(i));
                    ys.push(y_train[i]);
                }
                let xs = Matrix::new(values, k, spec.d)?;
                let config = BartConfig { m: spec.m, ..BartConfig::default() };
                let start = Instant::now();
                let fit = bart_fit(&xs, &ys, &config, spec.n_mcmc, spec.burn, fit_seed)?;
                let elapsed = start.elapsed().as_secs_f64();
                (bart_predict(&fit, x_test)?, k, None, elapsed)
            }
            Variant::Sbt { shardepth } => {
                let config = SbtConfig {
                    bart: BartConfig { m: spec.m, ..BartConfig::default() },
                    shardepth,
                    ..SbtConfig::default()
                };
                let start = Instant::now();
                let fit = sbt_fit(
                    x_train,
                    y_train,
                    &AuxMode::Uniform,
                    &config,
                    spec.n_mcmc,
                    spec.burn,
                    fit_seed,
                )?;
                let elapsed = start.elapsed().as_secs_f64();
                (
                    sbt_predict(&fit, x_test, predict_seed, 1)?,
                    spec.n,
                    Some(shardepth),
                    elapsed,
                )
            }
        };

    let means: Vec<f64> = summaries.iter().map(|p| p.mean).collect();
    let intervals: Vec<(f64, f64)> = summaries.iter().map(|p| (p.lo, p.hi)).collect();
    let report = MetricsReport {
        variant: variant.label(),
        replicate,
        n_used,
        d: spec.d,
        m: spec.m,
        shardepth,
        rmse: rmse(&means, y_truth)?,
        coverage95: coverage95(&intervals, y_truth)?,
        wall_per_iteration: elapsed / spec.n_mcmc as f64,
    };
    debug_assert!(report.rmse >= 0.0 && (0.0..=1.0).contains(&report.coverage95));
    Ok(report)
}

/// Run every variant x replicate fit on one shared dataset and return a
/// report per fit, variants grouped together and replicates ascending.
/// Fits run concurrently; all randomness derives from `spec.seed`, so the
/// report set is reproducible.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<MetricsReport>> {
    spec.validate()?;
    let x_train = uniform_design(spec.n, spec.d, spec.seed)?;
    let mut noise_rng = stream_rng(spec.seed, StreamDomain::Data, 0, 1);
    let mut y_train = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let z: f64 = noise_rng.sample(StandardNormal);
        y_train.push(spec.function.eval(x_train.row(i))? + spec.noise_sd * z);
    }
    let x_test = latin_hypercube(spec.n_test, spec.d, spec.seed)?;
    let mut y_truth = Vec::with_capacity(spec.n_test);
    for i in 0..spec.n_test {
        y_truth.push(spec.function.eval(x_test.row(i))?);
    }

    let jobs: Vec<(Variant, usize)> = variants_of(spec)
        .into_iter()
        .flat_map(|v| (0..spec.replicates).map(move |r| (v, r)))
        .collect();
    jobs.par_iter()
        .map(|&(variant, replicate)| {
            run_one(spec, variant, replicate, &x_train, &y_train, &x_test, &y_truth)
        })
        .collect()
}

/// Long-format CSV of an experiment's reports.
pub fn reports_to_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut out = String::from(
        "variant,replicate,n,d,m,shardepth,rmse,coverage95,seconds_per_iter\n",
    );
    for r in reports {
        let shardepth = r.shardepth.map_or(String::new(), |k| k.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.replicate,
            r.n_used,
            r.d,
            r.m,
            shardepth,
            r.rmse,
            r.coverage95,
            r.wall_per_iteration
        ));
    }
    Ok(out)
}
