//! Seeded Monte Carlo studies: consistency, the normal limit, L2
//! boundedness of the noise vector, the stationary variance and coupling.
//!
//! Each replicate draws its noise from `replicate_seed(master, n, r)`, so a
//! report is a function of its configuration alone and does not depend on
//! how many workers ran it.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asymptotics::{matrix_serde, stationary_variance, AsymptoticsError, LimitMatrices};
use crate::estimator::{estimate, EstimateOptions, EstimatorError, EstimatorMode};
use crate::fgn::{generate_fgn, FgnError, FgnSpec};
use crate::model::{coupling_gap, simulate_path, steps_per_period, BasisSet, FouModel, ModelError, StartMode};
use crate::parallel::par_map;
use crate::rng::replicate_seed;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fgn(#[from] FgnError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Asymptotics(#[from] AsymptoticsError),
    #[error("too few nondegenerate replicates at n = {n}: {included}")]
    TooFewReplicates { n: usize, included: usize },
    #[error("malformed replicate table: {0}")]
    Table(String),
}

/// One Monte Carlo study.
#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub model: FouModel,
    pub n_list: Vec<usize>,
    pub replicates: usize,
    pub step: f64,
    pub mode: EstimatorMode,
    pub master_seed: u64,
    pub workers: usize,
    pub start: StartMode,
    /// Solve for the correction rate instead of using the true `alpha`.
    pub plug_in: bool,
}

impl McConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate()?;
        steps_per_period(self.step)?;
        if self.replicates < 2 {
            return Err(ExperimentError::InvalidConfig("replicates must be at least 2".into()));
        }
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(ExperimentError::InvalidConfig("n_list must be nonempty and positive".into()));
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ExperimentError::InvalidConfig("n_list must be strictly increasing".into()));
        }
        if self.workers == 0 {
            return Err(ExperimentError::InvalidConfig("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn options(&self) -> EstimateOptions {
        match self.mode {
            EstimatorMode::NaivePathwise => EstimateOptions {
                sigma: self.model.sigma,
                ..EstimateOptions::naive()
            },
            EstimatorMode::OracleDivergence => {
                EstimateOptions::oracle(self.model.sigma, (!self.plug_in).then_some(self.model.alpha))
            }
        }
    }
}

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    /// `None` when the design was degenerate.
    pub theta_hat: Option<Vec<f64>>,
    /// `n^{-H} R_n`.
    #[serde(skip)]
    pub scaled_noise: Option<Vec<f64>>,
}

impl ReplicateRecord {
    pub fn degenerate(&self) -> bool {
        self.theta_hat.is_none()
    }
}

fn run_replicate(config: &McConfig, n: usize, r: usize) -> Result<ReplicateRecord, ExperimentError> {
    let seed = replicate_seed(config.master_seed, n as u64, r as u64);
    let path = simulate_path(&config.model, n, config.step, seed, config.start)?;
    let (theta_hat, scaled_noise) = match estimate(&path, &config.options()) {
        Ok(res) => {
            let scale = (n as f64).powf(-config.model.hurst.value());
            let noise = res.r_n.map(|r| r.iter().map(|v| v * scale).collect());
            (Some(res.theta_hat.as_slice().to_vec()), noise)
        }
        Err(EstimatorError::DegenerateDesign { .. }) => (None, None),
        Err(e) => return Err(e.into()),
    };
    Ok(ReplicateRecord {
        n,
        replicate: r,
        seed,
        theta_hat,
        scaled_noise,
    })
}

/// Runs every `(n, r)` pair, ordered by `n` then `r`.
pub fn run_replicates(config: &McConfig) -> Result<Vec<ReplicateRecord>, ExperimentError> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = config
        .n_list
        .iter()
        .flat_map(|&n| (0..config.replicates).map(move |r| (n, r)))
        .collect();
    par_map(&jobs, config.workers, |&(n, r)| run_replicate(config, n, r))
        .into_iter()
        .collect()
}

/// Summary over the nondegenerate replicates of one `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub included: usize,
    pub excluded: usize,
    pub mean: Vec<f64>,
    pub bias: Vec<f64>,
    /// Monte Carlo standard error of the mean.
    pub bias_se: Vec<f64>,
    pub rmse: Vec<f64>,
    /// Covariance of `n^{1-H} (theta_hat - theta)`.
    #[serde(with = "matrix_serde")]
    pub scaled_error_cov: DMatrix<f64>,
}

pub fn aggregate(
    records: &[ReplicateRecord],
    n: usize,
    theta: &[f64],
    hurst: f64,
) -> Result<Aggregate, ExperimentError> {
    let rows: Vec<&ReplicateRecord> = records.iter().filter(|r| r.n == n).collect();
    let estimates: Vec<&Vec<f64>> = rows.iter().filter_map(|r| r.theta_hat.as_ref()).collect();
    let included = estimates.len();
    if included < 2 {
        return Err(ExperimentError::TooFewReplicates { n, included });
    }
    let d = theta.len();
    let column = |j: usize| -> Vec<f64> { estimates.iter().map(|e| e[j]).collect() };
    let mean: Vec<f64> = (0..d).map(|j| stats::mean(&column(j))).collect();
    let scale = (n as f64).powf(1.0 - hurst);
    let scaled: Vec<Vec<f64>> = estimates
        .iter()
        .map(|e| e.iter().zip(theta).map(|(a, b)| scale * (a - b)).collect())
        .collect();
    Ok(Aggregate {
        n,
        included,
        excluded: rows.len() - included,
        bias: mean.iter().zip(theta).map(|(m, t)| m - t).collect(),
        bias_se: (0..d).map(|j| stats::standard_error(&column(j))).collect(),
        rmse: (0..d).map(|j| stats::rmse(&column(j), theta[j])).collect(),
        scaled_error_cov: stats::covariance(&scaled),
        mean,
    })
}

/// Consistency study report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub theta: Vec<f64>,
    pub hurst: f64,
    pub step: f64,
    pub replicates: usize,
    pub master_seed: u64,
    pub mode: EstimatorMode,
    pub aggregates: Vec<Aggregate>,
    /// Componentwise `rmse(n_max) / rmse(n_min)`.
    pub rmse_ratio: Vec<f64>,
    /// RMSE nonincreasing in `n` up to one inversion per component.
    pub rmse_monotone: bool,
    /// Every component has `rmse(n_max) <= rmse(n_min) / 2`.
    pub rmse_halved: bool,
    /// Largest `|bias| / se` at `n_max`.
    pub max_bias_z: f64,
    pub pass: bool,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

pub fn run_consistency(config: &McConfig) -> Result<ConsistencyReport, ExperimentError> {
    let started = Instant::now();
    let records = run_replicates(config)?;
    let theta = config.model.theta();
    let h = config.model.hurst.value();
    let aggregates = config
        .n_list
        .iter()
        .map(|&n| aggregate(&records, n, &theta, h))
        .collect::<Result<Vec<_>, _>>()?;
    let first = &aggregates[0];
    let last = &aggregates[aggregates.len() - 1];
    let rmse_ratio: Vec<f64> = last.rmse.iter().zip(&first.rmse).map(|(a, b)| a / b).collect();
    let rmse_monotone = (0..theta.len()).all(|j| {
        aggregates
            .windows(2)
            .filter(|w| w[1].rmse[j] > w[0].rmse[j])
            .count()
            <= 1
    });
    let rmse_halved = rmse_ratio.iter().all(|&r| r <= 0.5);
    let max_bias_z = last
        .bias
        .iter()
        .zip(&last.bias_se)
        .map(|(b, se)| (b / se).abs())
        .fold(0.0, f64::max);
    Ok(ConsistencyReport {
        theta,
        hurst: h,
        step: config.step,
        replicates: config.replicates,
        master_seed: config.master_seed,
        mode: config.mode,
        rmse_ratio,
        rmse_monotone,
        rmse_halved,
        max_bias_z,
        pass: rmse_monotone && rmse_halved,
        aggregates,
        records,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Normal-limit study report at a single `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub n: usize,
    pub theta: Vec<f64>,
    pub hurst: f64,
    pub replicates: usize,
    pub master_seed: u64,
    pub aggregate: Aggregate,
    pub limits: LimitMatrices,
    /// `|cov_mu - (sigma^2 C Sigma0 C)_mu|_F / |(sigma^2 C Sigma0 C)_mu|_F`.
    pub mu_block_rel_frobenius: f64,
    /// Same on the full matrix; `None` when the limit is degenerate.
    pub full_rel_frobenius: Option<f64>,
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
    /// Kolmogorov distance of each standardised component to `N(0, 1)`.
    pub ks_distance: Vec<f64>,
    /// Sample variance of each component of `n^{-H} R_n`.
    pub scaled_noise_variance: Vec<f64>,
    pub pass: bool,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

pub const CLT_FROBENIUS_TOLERANCE: f64 = 0.25;
pub const CLT_SKEWNESS_TOLERANCE: f64 = 0.3;
pub const CLT_KURTOSIS_TOLERANCE: f64 = 0.5;

pub fn run_clt(config: &McConfig) -> Result<CltReport, ExperimentError> {
    if config.n_list.len() != 1 {
        return Err(ExperimentError::InvalidConfig("the normal-limit study takes a single n".into()));
    }
    let started = Instant::now();
    let limits = LimitMatrices::compute(&config.model)?;
    let records = run_replicates(config)?;
    let n = config.n_list[0];
    let theta = config.model.theta();
    let h = config.model.hurst.value();
    let agg = aggregate(&records, n, &theta, h)?;
    let p = config.model.p();

    let scale = (n as f64).powf(1.0 - h);
    let errors: Vec<Vec<f64>> = (0..=p)
        .map(|j| {
            records
                .iter()
                .filter_map(|r| r.theta_hat.as_ref())
                .map(|e| scale * (e[j] - theta[j]))
                .collect()
        })
        .collect();
    let skewness: Vec<f64> = errors.iter().map(|e| stats::skewness(e)).collect();
    let excess_kurtosis: Vec<f64> = errors.iter().map(|e| stats::excess_kurtosis(e)).collect();
    let ks_distance = errors
        .iter()
        .map(|e| stats::ks_distance_normal(&stats::standardize(e)))
        .collect();
    let noise: Vec<&Vec<f64>> = records.iter().filter_map(|r| r.scaled_noise.as_ref()).collect();
    let scaled_noise_variance = if noise.len() >= 2 {
        (0..=p)
            .map(|j| stats::variance(&noise.iter().map(|v| v[j]).collect::<Vec<_>>()))
            .collect()
    } else {
        Vec::new()
    };

    let emp_mu = agg.scaled_error_cov.view((0, 0), (p, p)).into_owned();
    let mu_block_rel_frobenius = stats::relative_frobenius(&emp_mu, &limits.mu_block());
    let full_rel_frobenius =
        (!limits.flags.degenerate_limit).then(|| stats::relative_frobenius(&agg.scaled_error_cov, &limits.asym_cov));
    let pass = mu_block_rel_frobenius <= CLT_FROBENIUS_TOLERANCE
        && skewness.iter().all(|s| s.abs() <= CLT_SKEWNESS_TOLERANCE)
        && excess_kurtosis.iter().all(|k| k.abs() <= CLT_KURTOSIS_TOLERANCE);
    Ok(CltReport {
        n,
        theta,
        hurst: h,
        replicates: config.replicates,
        master_seed: config.master_seed,
        aggregate: agg,
        limits,
        mu_block_rel_frobenius,
        full_rel_frobenius,
        skewness,
        excess_kurtosis,
        ks_distance,
        scaled_noise_variance,
        pass,
        records,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Variance of `n^{-H} int_0^n phi_i dB^H` for each `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundednessReport {
    pub n_list: Vec<usize>,
    pub replicates: usize,
    /// `sup |phi_i|^2`, the isometry bound.
    pub bounds: Vec<f64>,
    /// `variances[k][i]` at `n_list[k]`.
    pub variances: Vec<Vec<f64>>,
    /// `(var(n_max) - var(n_min)) / se` per component; positive means upward.
    pub trend_z: Vec<f64>,
    pub within_bound: bool,
    pub no_upward_trend: bool,
    pub pass: bool,
}

/// Drives only the noise integrals; no path or estimate is needed.
pub fn run_boundedness(
    hurst: crate::fgn::HurstExponent,
    basis: &BasisSet,
    n_list: &[usize],
    replicates: usize,
    step: f64,
    master_seed: u64,
    workers: usize,
) -> Result<BoundednessReport, ExperimentError> {
    if replicates < 2 || n_list.is_empty() {
        return Err(ExperimentError::InvalidConfig("need replicates >= 2 and a nonempty n_list".into()));
    }
    let m = steps_per_period(step)?;
    let phases: Vec<Vec<f64>> = basis
        .functions()
        .iter()
        .map(|f| (0..m).map(|j| f.eval(j as f64 * step)).collect())
        .collect();
    let jobs: Vec<(usize, usize)> = n_list
        .iter()
        .flat_map(|&n| (0..replicates).map(move |r| (n, r)))
        .collect();
    let integrals = par_map(&jobs, workers, |&(n, r)| -> Result<Vec<f64>, ExperimentError> {
        let seed = replicate_seed(master_seed, n as u64, r as u64);
        let db = generate_fgn(&FgnSpec::new(hurst, step, n * m, seed)?)?;
        let scale = (n as f64).powf(-hurst.value());
        Ok(phases
            .iter()
            .map(|phase| scale * db.iter().enumerate().map(|(k, d)| phase[k % m] * d).sum::<f64>())
            .collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let p = basis.p();
    let variances: Vec<Vec<f64>> = integrals
        .chunks(replicates)
        .map(|chunk| {
            (0..p)
                .map(|i| stats::variance(&chunk.iter().map(|v| v[i]).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let bounds: Vec<f64> = basis.functions().iter().map(|f| f.sup_bound().powi(2)).collect();
    // sample variance of a Gaussian has relative standard error sqrt(2 / (R - 1))
    let rel_se = (2.0 / (replicates as f64 - 1.0)).sqrt();
    let (first, last) = (&variances[0], &variances[variances.len() - 1]);
    let trend_z: Vec<f64> = (0..p)
        .map(|i| (last[i] - first[i]) / (rel_se * (first[i].powi(2) + last[i].powi(2)).sqrt()))
        .collect();
    let within_bound = variances.iter().all(|v| v.iter().zip(&bounds).all(|(a, b)| a <= b));
    let no_upward_trend = trend_z.iter().all(|&z| z <= 2.0);
    Ok(BoundednessReport {
        n_list: n_list.to_vec(),
        replicates,
        bounds,
        variances,
        trend_z,
        within_bound,
        no_upward_trend,
        pass: within_bound && no_upward_trend,
    })
}

/// Long-run variance of a zero-mean stationary path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryVarianceReport {
    pub horizon: usize,
    pub step: f64,
    pub burn_in_periods: usize,
    /// Centred sample variance over the retained grid values.
    pub sample_variance: f64,
    /// Mean of `X^2` (the mean is known to be 0).
    pub second_moment: f64,
    pub theoretical: f64,
    pub relative_error: f64,
    pub pass: bool,
}

pub const STATIONARY_VARIANCE_TOLERANCE: f64 = 0.05;

pub fn run_stationary_variance(
    hurst: crate::fgn::HurstExponent,
    alpha: f64,
    sigma: f64,
    horizon: usize,
    step: f64,
    burn_in_periods: usize,
    seed: u64,
) -> Result<StationaryVarianceReport, ExperimentError> {
    let model = FouModel::new(hurst, alpha, vec![0.0], sigma, BasisSet::constant(), 0.0)?;
    let start = StartMode::Stationary {
        burn_in_periods: Some(burn_in_periods),
    };
    let path = simulate_path(&model, horizon, step, seed, start)?;
    let values = &path.x[1..];
    let sample_variance = stats::variance(values);
    let second_moment = values.iter().map(|x| x * x).sum::<f64>() / values.len() as f64;
    let theoretical = stationary_variance(alpha, sigma, hurst);
    let relative_error = (sample_variance - theoretical).abs() / theoretical;
    Ok(StationaryVarianceReport {
        horizon,
        step,
        burn_in_periods,
        sample_variance,
        second_moment,
        theoretical,
        relative_error,
        pass: relative_error <= STATIONARY_VARIANCE_TOLERANCE,
    })
}

/// Shared-noise coupling of two starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub alpha: f64,
    pub initial_gap: f64,
    /// `t = 1, ..., horizon`.
    pub times: Vec<f64>,
    pub gaps: Vec<f64>,
    /// Least-squares slope of `ln gap` against `t` over gaps above
    /// [`COUPLING_FLOOR`]; `None` when fewer than two qualify.
    pub slope: Option<f64>,
    pub exact_match: bool,
    pub pass: bool,
}

/// Gaps below this are dominated by rounding in the shared noise.
pub const COUPLING_FLOOR: f64 = 1e-10;
pub const COUPLING_TOLERANCE: f64 = 0.1;

pub fn run_coupling(
    model: &FouModel,
    other_start: f64,
    horizon: usize,
    step: f64,
    seed: u64,
) -> Result<CouplingReport, ExperimentError> {
    let other = FouModel {
        xi0: other_start,
        ..model.clone()
    };
    let a = simulate_path(model, horizon, step, seed, StartMode::FromInitial)?;
    let b = simulate_path(&other, horizon, step, seed, StartMode::FromInitial)?;
    let gap = coupling_gap(&a, &b)?;
    let m = a.steps_per_period;
    let times: Vec<f64> = (1..=horizon).map(|t| t as f64).collect();
    let gaps: Vec<f64> = (1..=horizon).map(|t| gap[t * m]).collect();
    let initial_gap = gap[0];
    let exact_match = gap.iter().all(|&g| g == 0.0);
    let (xs, ys): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&gaps)
        .filter(|(_, &g)| g > COUPLING_FLOOR)
        .map(|(&t, &g)| (t, g.ln()))
        .unzip();
    let slope = (xs.len() >= 2).then(|| stats::fit_line(&xs, &ys).slope);
    let pass = exact_match
        || slope.is_some_and(|s| (s + model.alpha).abs() <= COUPLING_TOLERANCE * model.alpha);
    Ok(CouplingReport {
        alpha: model.alpha,
        initial_gap,
        times,
        gaps,
        slope,
        exact_match,
        pass,
    })
}

fn fmt_f64(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

/// `n,replicate,seed,mu_hat_1..mu_hat_p,alpha_hat,degenerate`; degenerate
/// rows leave the estimates empty.
pub fn replicates_csv(records: &[ReplicateRecord], p: usize) -> String {
    let mut out = String::from("n,replicate,seed");
    for i in 1..=p {
        let _ = write!(out, ",mu_hat_{i}");
    }
    out.push_str(",alpha_hat,degenerate\n");
    for r in records {
        let _ = write!(out, "{},{},{}", r.n, r.replicate, r.seed);
        match &r.theta_hat {
            Some(theta) => {
                for &v in theta {
                    out.push(',');
                    fmt_f64(&mut out, v);
                }
                out.push_str(",false\n");
            }
            None => {
                out.push_str(&",".repeat(p + 1));
                out.push_str(",true\n");
            }
        }
    }
    out
}

pub fn parse_replicates_csv(text: &str) -> Result<Vec<ReplicateRecord>, ExperimentError> {
    let bad = |line: usize, what: &str| ExperimentError::Table(format!("line {line}: {what}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let width = header.split(',').count();
    if width < 5 {
        return Err(bad(1, "too few columns"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != width {
                return Err(bad(i + 2, "wrong column count"));
            }
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad(i + 2, "bad integer"));
            let degenerate = match cells[width - 1] {
                "true" => true,
                "false" => false,
                _ => return Err(bad(i + 2, "bad degenerate flag")),
            };
            let theta_hat = if degenerate {
                None
            } else {
                Some(
                    cells[3..width - 1]
                        .iter()
                        .map(|c| c.parse::<f64>().map_err(|_| bad(i + 2, "bad number")))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            };
            Ok(ReplicateRecord {
                n: int(cells[0])? as usize,
                replicate: int(cells[1])? as usize,
                seed: int(cells[2])?,
                theta_hat,
                scaled_noise: None,
            })
        })
        .collect()
}

/// `component,quantile,empirical,theoretical` of the standardised scaled
/// errors; components are `mu_1..mu_p, alpha`.
pub fn qq_csv(records: &[ReplicateRecord], theta: &[f64]) -> String {
    let mut out = String::from("component,quantile,empirical,theoretical\n");
    let p = theta.len() - 1;
    for j in 0..theta.len() {
        let name = if j < p { format!("mu_{}", j + 1) } else { "alpha".to_string() };
        let errors: Vec<f64> = records
            .iter()
            .filter_map(|r| r.theta_hat.as_ref())
            .map(|e| e[j] - theta[j])
            .collect();
        if errors.len() < 2 {
            continue;
        }
        for (q, emp, th) in stats::qq_points(&stats::standardize(&errors)) {
            let _ = write!(out, "{name},");
            fmt_f64(&mut out, q);
            out.push(',');
            fmt_f64(&mut out, emp);
            out.push(',');
            fmt_f64(&mut out, th);
            out.push('\n');
        }
    }
    out
}
