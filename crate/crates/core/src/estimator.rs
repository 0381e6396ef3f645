//! Least-squares drift estimator `theta_hat = Q_n^{-1} P_n`.
//!
//! All time integrals are left-endpoint sums on the simulation grid, so that
//! `P_n = Q_n theta + sigma R_n` holds exactly for a path produced by
//! [`crate::model::simulate_with_driver`].
//!
//! The last component of `P_n` is `-int X dX`. With a pathwise (forward
//! Riemann-Stieltjes) integral it carries the mean `sigma^2 * trace`, where
//! `trace = E[sum X_k dB_k] / sigma` comes from the correlation of the fBm
//! increments with the past of `X`. [`EstimatorMode::OracleDivergence`]
//! adds `sigma^2 * trace` back, which turns the stochastic integral into its
//! zero-mean (divergence) counterpart.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_lr};
use thiserror::Error;

use crate::fgn::{fgn_autocovariance, HurstExponent};
use crate::model::SamplePath;

/// `b/n - |Lambda_n|^2` at or below this value leaves alpha unidentified.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// Allowed `|G - n I|_max / n` for the closed-form inverse.
pub const GRAM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("integrand has {f} values for {dx} increments")]
    LengthMismatch { f: usize, dx: usize },
    #[error("path covers a partial period ({intervals} intervals, {steps_per_period} per period)")]
    PartialPeriod {
        intervals: usize,
        steps_per_period: usize,
    },
    #[error("degenerate design: b/n - |Lambda|^2 = {residual:e}")]
    DegenerateDesign { residual: f64 },
    #[error("G deviates from n I by {deviation:e} relative")]
    NonIdentityGram { deviation: f64 },
    #[error("oracle mode needs the driver increments of the path")]
    MissingDriver,
    #[error("invalid estimator input: {0}")]
    InvalidInput(String),
    #[error("plug-in correction has no positive fixed point")]
    PlugInFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Forward Riemann-Stieltjes sums of the observed path only.
    #[default]
    NaivePathwise,
    /// Pathwise sums plus the trace correction of `int X dB^H`.
    OracleDivergence,
}

/// Which trace is used by [`EstimatorMode::OracleDivergence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceCorrection {
    /// Exact mean of the grid sum `sum X_k dB_k` under the Euler recursion.
    #[default]
    ExactDiscrete,
    /// Continuous-time limit [`malliavin_trace_correction`].
    ContinuousLimit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub mode: EstimatorMode,
    /// Known noise scale.
    pub sigma: f64,
    /// Mean-reversion rate at which the trace is evaluated; `None` solves
    /// for a self-consistent plug-in value.
    pub alpha_for_correction: Option<f64>,
    pub correction: TraceCorrection,
}

impl EstimateOptions {
    pub fn naive() -> Self {
        Self {
            mode: EstimatorMode::NaivePathwise,
            sigma: 0.0,
            alpha_for_correction: None,
            correction: TraceCorrection::ExactDiscrete,
        }
    }

    pub fn oracle(sigma: f64, alpha: Option<f64>) -> Self {
        Self {
            mode: EstimatorMode::OracleDivergence,
            sigma,
            alpha_for_correction: alpha,
            correction: TraceCorrection::ExactDiscrete,
        }
    }
}

/// Time integrals entering `Q_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    /// `int_0^n phi_i phi_j dt`.
    pub g: DMatrix<f64>,
    /// `int_0^n phi_i X dt`.
    pub a: DVector<f64>,
    /// `int_0^n X^2 dt`.
    pub b: f64,
    /// `a / n`.
    pub lambda: DVector<f64>,
    /// `(b/n - |Lambda|^2)^{-1}`, `None` when degenerate.
    pub gamma: Option<f64>,
    /// `b/n - |Lambda|^2`.
    pub residual: f64,
    pub n: usize,
}

impl DesignMatrices {
    pub fn from_parts(g: DMatrix<f64>, a: DVector<f64>, b: f64, n: usize) -> Self {
        let nf = n as f64;
        let lambda = &a / nf;
        let residual = b / nf - lambda.norm_squared();
        let gamma = (residual > DEGENERACY_THRESHOLD).then(|| 1.0 / residual);
        Self {
            g,
            a,
            b,
            lambda,
            gamma,
            residual,
            n,
        }
    }

    pub fn p(&self) -> usize {
        self.a.len()
    }

    pub fn gamma_n(&self) -> Result<f64, EstimatorError> {
        self.gamma.ok_or(EstimatorError::DegenerateDesign {
            residual: self.residual,
        })
    }

    /// `[[G, -a], [-a', b]]`.
    pub fn q_matrix(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut q = DMatrix::zeros(p + 1, p + 1);
        q.view_mut((0, 0), (p, p)).copy_from(&self.g);
        for i in 0..p {
            q[(i, p)] = -self.a[i];
            q[(p, i)] = -self.a[i];
        }
        q[(p, p)] = self.b;
        q
    }

    /// `max |G/n - I|`.
    pub fn gram_deviation(&self) -> f64 {
        let nf = self.n as f64;
        let identity = DMatrix::<f64>::identity(self.p(), self.p());
        (&self.g / nf - identity).amax()
    }
}

/// `sum_k f(t_k) (X_{k+1} - X_k)` with left-endpoint evaluation. `f` may
/// carry one trailing value (the right end), which is ignored.
pub fn forward_stieltjes(f_values: &[f64], dx: &[f64]) -> Result<f64, EstimatorError> {
    if f_values.len() != dx.len() && f_values.len() != dx.len() + 1 {
        return Err(EstimatorError::LengthMismatch {
            f: f_values.len(),
            dx: dx.len(),
        });
    }
    Ok(f_values.iter().zip(dx).map(|(f, d)| f * d).sum())
}

/// Left-endpoint integrals `G`, `a`, `b` over the whole-period path.
pub fn build_design(path: &SamplePath) -> Result<DesignMatrices, EstimatorError> {
    let n = path.whole_periods().ok_or(EstimatorError::PartialPeriod {
        intervals: path.intervals(),
        steps_per_period: path.steps_per_period,
    })?;
    if n == 0 {
        return Err(EstimatorError::InvalidInput("path shorter than one period".into()));
    }
    let basis = path.model.basis.functions();
    let p = basis.len();
    let m = path.steps_per_period;
    let step = path.step();
    // The basis is 1-periodic and the grid aligned, so one period of values
    // serves every period.
    let phase: Vec<Vec<f64>> = basis
        .iter()
        .map(|f| (0..m).map(|j| f.eval(j as f64 * step)).collect())
        .collect();

    let mut g = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..=i {
            let per_period: f64 = phase[i].iter().zip(&phase[j]).map(|(u, v)| u * v).sum();
            let value = per_period * step * n as f64;
            g[(i, j)] = value;
            g[(j, i)] = value;
        }
    }
    let mut a = DVector::zeros(p);
    let mut b = 0.0;
    for (k, &x) in path.x[..path.intervals()].iter().enumerate() {
        let j = k % m;
        for i in 0..p {
            a[i] += phase[i][j] * x;
        }
        b += x * x;
    }
    a *= step;
    b *= step;
    Ok(DesignMatrices::from_parts(g, a, b, n))
}

/// `Q_n^{-1} = (1/n) [[I + gamma L L', gamma L], [gamma L', gamma]]`,
/// valid when `G = n I`.
pub fn invert_q_closed_form(design: &DesignMatrices) -> Result<DMatrix<f64>, EstimatorError> {
    let gamma = design.gamma_n()?;
    let deviation = design.gram_deviation();
    if deviation > GRAM_TOLERANCE {
        return Err(EstimatorError::NonIdentityGram { deviation });
    }
    Ok(closed_form_matrix(&design.lambda, gamma) / design.n as f64)
}

/// `[[I + gamma L L', gamma L], [gamma L', gamma]]`, the shape shared by
/// `n Q_n^{-1}` and its limit `C`.
pub fn closed_form_matrix(lambda: &DVector<f64>, gamma: f64) -> DMatrix<f64> {
    let p = lambda.len();
    let mut c = DMatrix::zeros(p + 1, p + 1);
    let outer = lambda * lambda.transpose() * gamma;
    c.view_mut((0, 0), (p, p))
        .copy_from(&(DMatrix::identity(p, p) + outer));
    for i in 0..p {
        c[(i, p)] = gamma * lambda[i];
        c[(p, i)] = gamma * lambda[i];
    }
    c[(p, p)] = gamma;
    c
}

/// `H(2H-1) int_0^T int_0^t e^{-alpha (t-s)} (t-s)^{2H-2} ds dt`, the
/// sigma-free trace separating the pathwise from the divergence integral
/// `int_0^T X dB^H` in continuous time. Evaluated in closed form with the
/// lower incomplete gamma function `g(a, x)`, `a = 2H - 1`:
/// `H(2H-1) [T alpha^{-a} g(a, alpha T) - alpha^{-a-1} g(a+1, alpha T)]`.
pub fn malliavin_trace_correction(alpha: f64, hurst: HurstExponent, horizon: f64) -> f64 {
    let h = hurst.value();
    assert!(alpha > 0.0, "alpha must be positive");
    assert!(h > 0.5, "trace correction needs H > 1/2");
    if horizon <= 0.0 {
        return 0.0;
    }
    let a = 2.0 * h - 1.0;
    let x = alpha * horizon;
    let lower = |s: f64| gamma(s) * gamma_lr(s, x);
    hurst.alpha_h() * (horizon * alpha.powf(-a) * lower(a) - alpha.powf(-a - 1.0) * lower(a + 1.0))
}

/// Exact `E[sum_{k<count} X_k dB_k] / sigma` for the Euler recursion with
/// step `1/steps_per_period` whose noise started `history` increments
/// before the window:
/// `sum_k sum_{j=1}^{k+history} (1 - alpha dt)^{j-1} dt^{2H} rho_H(j)`.
pub fn discrete_trace_correction(
    alpha: f64,
    hurst: HurstExponent,
    steps_per_period: usize,
    count: usize,
    history: usize,
) -> f64 {
    if count == 0 {
        return 0.0;
    }
    let step = 1.0 / steps_per_period as f64;
    let r = 1.0 - alpha * step;
    let scale = step.powf(2.0 * hurst.value());
    // S(M) = sum_{j=1}^{M} r^{j-1} rho(j); the trace sums S(M) for M in [history, last]
    let last = history + count - 1;
    let mut cumulative = 0.0;
    let mut weight = 1.0;
    let mut total = 0.0;
    for lag in 1..=last {
        cumulative += weight * fgn_autocovariance(hurst, lag as u64);
        weight *= r;
        if lag >= history {
            total += cumulative;
        }
        if weight.abs() < 1e-18 {
            // S is constant from here on
            let first = (lag + 1).max(history);
            if first <= last {
                total += cumulative * (last - first + 1) as f64;
            }
            break;
        }
    }
    scale * total
}

/// Output of [`estimate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    /// `(mu_1, ..., mu_p, alpha)`.
    pub theta_hat: DVector<f64>,
    pub p_vector: DVector<f64>,
    pub design: DesignMatrices,
    pub q_inverse: DMatrix<f64>,
    pub mode: EstimatorMode,
    /// `(int phi_i dB, ..., -int X dB)` from the driver, with the same
    /// correction as `P_n`. Present when the path carries its driver.
    pub r_n: Option<DVector<f64>>,
    /// sigma-free trace added to the last component of `P_n` (times sigma^2).
    pub trace: f64,
    pub alpha_for_correction: Option<f64>,
}

fn trace_at(path: &SamplePath, alpha: f64, kind: TraceCorrection) -> f64 {
    match kind {
        TraceCorrection::ExactDiscrete => discrete_trace_correction(
            alpha,
            path.model.hurst,
            path.steps_per_period,
            path.intervals(),
            path.history_steps,
        ),
        TraceCorrection::ContinuousLimit => malliavin_trace_correction(
            alpha,
            path.model.hurst,
            path.intervals() as f64 * path.step(),
        ),
    }
}

/// Estimates `theta` from a sample path.
pub fn estimate(path: &SamplePath, options: &EstimateOptions) -> Result<EstimateResult, EstimatorError> {
    if !(options.sigma >= 0.0 && options.sigma.is_finite()) {
        return Err(EstimatorError::InvalidInput(format!("sigma = {}", options.sigma)));
    }
    if options.mode == EstimatorMode::OracleDivergence {
        if path.driver_increments.is_none() {
            return Err(EstimatorError::MissingDriver);
        }
        if path.model.hurst.value() <= 0.5 {
            return Err(EstimatorError::InvalidInput("divergence correction needs H > 1/2".into()));
        }
    }
    let design = build_design(path)?;
    let q_inverse = invert_q_closed_form(&design)?;

    let p = design.p();
    let m = path.steps_per_period;
    let count = path.intervals();
    let step = path.step();
    let basis = path.model.basis.functions();
    let dx: Vec<f64> = path.x.windows(2).map(|w| w[1] - w[0]).collect();
    let x_left = &path.x[..count];

    let phases: Vec<Vec<f64>> = basis
        .iter()
        .map(|f| (0..m).map(|j| f.eval(j as f64 * step)).collect())
        .collect();
    let mut p_vector = DVector::zeros(p + 1);
    for (i, phase) in phases.iter().enumerate() {
        let values: Vec<f64> = (0..count).map(|k| phase[k % m]).collect();
        p_vector[i] = forward_stieltjes(&values, &dx)?;
    }
    p_vector[p] = -forward_stieltjes(x_left, &dx)?;

    let mut r_n = path.driver_increments.as_ref().map(|db| {
        let mut r = DVector::zeros(p + 1);
        for (k, &d) in db.iter().enumerate() {
            for (i, phase) in phases.iter().enumerate() {
                r[i] += phase[k % m] * d;
            }
            r[p] -= x_left[k] * d;
        }
        r
    });

    let sigma = options.sigma;
    let (trace, alpha_for_correction) = match options.mode {
        EstimatorMode::NaivePathwise => (0.0, None),
        EstimatorMode::OracleDivergence => {
            let alpha = match options.alpha_for_correction {
                Some(a) if a > 0.0 && a.is_finite() => a,
                Some(a) => {
                    return Err(EstimatorError::InvalidInput(format!("alpha_for_correction = {a}")))
                }
                None => {
                    let naive = &q_inverse * &p_vector;
                    plug_in_alpha(path, naive[p], sigma * sigma * q_inverse[(p, p)], options.correction)?
                }
            };
            (trace_at(path, alpha, options.correction), Some(alpha))
        }
    };
    if trace != 0.0 {
        p_vector[p] += sigma * sigma * trace;
        if let Some(r) = r_n.as_mut() {
            r[p] += sigma * trace;
        }
    }

    let theta_hat = &q_inverse * &p_vector;

    #[cfg(debug_assertions)]
    {
        if let Some(dense) = design.q_matrix().lu().solve(&p_vector) {
            let scale = 1.0 + theta_hat.amax();
            debug_assert!(
                (&dense - &theta_hat).amax() <= 1e-6 * scale,
                "closed-form and dense solves disagree"
            );
        }
    }

    Ok(EstimateResult {
        theta_hat,
        p_vector,
        design,
        q_inverse,
        mode: options.mode,
        r_n,
        trace,
        alpha_for_correction,
    })
}

/// Solves `a = naive_alpha + coef * trace(a)` by bisection; the right side
/// decreases in `a`, so the fixed point is unique when it exists.
fn plug_in_alpha(
    path: &SamplePath,
    naive_alpha: f64,
    coef: f64,
    kind: TraceCorrection,
) -> Result<f64, EstimatorError> {
    let excess = |a: f64| naive_alpha + coef * trace_at(path, a, kind) - a;
    let mut lo = 1e-9;
    // beyond one step per unit rate the Euler recursion is no longer a contraction
    let mut hi = path.steps_per_period as f64;
    if excess(lo) <= 0.0 || excess(hi) >= 0.0 {
        return Err(EstimatorError::PlugInFailed);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// JSON estimate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateReport {
    pub theta_hat: Option<Vec<f64>>,
    pub mode: EstimatorMode,
    pub gamma_n: Option<f64>,
    #[serde(rename = "Lambda_n")]
    pub lambda_n: Vec<f64>,
    pub degenerate: bool,
    pub trace_correction: f64,
    pub alpha_for_correction: Option<f64>,
    pub discretization: Discretization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    pub step: f64,
    pub steps_per_period: usize,
    pub n_periods: usize,
    pub intervals: usize,
    pub history_steps: usize,
    pub integral_rule: String,
}

impl Discretization {
    pub fn of(path: &SamplePath) -> Self {
        Self {
            step: path.step(),
            steps_per_period: path.steps_per_period,
            n_periods: path.whole_periods().unwrap_or(0),
            intervals: path.intervals(),
            history_steps: path.history_steps,
            integral_rule: "left_endpoint".into(),
        }
    }
}

impl EstimateReport {
    pub fn from_result(path: &SamplePath, result: &EstimateResult) -> Self {
        Self {
            theta_hat: Some(result.theta_hat.iter().copied().collect()),
            mode: result.mode,
            gamma_n: result.design.gamma,
            lambda_n: result.design.lambda.iter().copied().collect(),
            degenerate: false,
            trace_correction: result.trace,
            alpha_for_correction: result.alpha_for_correction,
            discretization: Discretization::of(path),
        }
    }

    /// Report for a path whose design is degenerate.
    pub fn degenerate(path: &SamplePath, design: &DesignMatrices, mode: EstimatorMode) -> Self {
        Self {
            theta_hat: None,
            mode,
            gamma_n: None,
            lambda_n: design.lambda.iter().copied().collect(),
            degenerate: true,
            trace_correction: 0.0,
            alpha_for_correction: None,
            discretization: Discretization::of(path),
        }
    }
}

/// Estimates and reports; a degenerate design yields a flagged report
/// instead of an error.
pub fn estimate_report(path: &SamplePath, options: &EstimateOptions) -> Result<EstimateReport, EstimatorError> {
    match estimate(path, options) {
        Ok(result) => Ok(EstimateReport::from_result(path, &result)),
        Err(EstimatorError::DegenerateDesign { .. }) => {
            Ok(EstimateReport::degenerate(path, &build_design(path)?, options.mode))
        }
        Err(e) => Err(e),
    }
}
