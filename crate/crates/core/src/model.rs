//! The periodic-mean fOU model, its Euler discretisation and the
//! deterministic responses `h~` (steady periodic) and `h` (started at 0).

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fgn::{generate_fgn, FgnError, FgnSpec, HurstExponent};
use crate::quadrature::UnitRule;

/// Nodes per period for the `h~` and inner-product quadratures.
pub const PERIOD_NODES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("step {0} is not 1/m for a positive integer m")]
    InvalidStep(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{mu} amplitudes given for {p} basis functions")]
    DimensionMismatch { mu: usize, p: usize },
    #[error("basis is not orthonormal: {0}")]
    NonOrthonormalBasis(String),
    #[error("paths do not share grid and driver")]
    GridMismatch,
    #[error(transparent)]
    Fgn(#[from] FgnError),
}

/// One element of the shipped orthonormal basis of `L^2[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BasisFunction {
    /// The constant 1.
    #[serde(rename = "const")]
    Constant,
    /// `sqrt(2) sin(2 pi k t)`.
    Sin { k: u32 },
    /// `sqrt(2) cos(2 pi k t)`.
    Cos { k: u32 },
}

impl BasisFunction {
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            BasisFunction::Constant => 1.0,
            BasisFunction::Sin { k } => SQRT_2 * (2.0 * PI * k as f64 * t).sin(),
            BasisFunction::Cos { k } => SQRT_2 * (2.0 * PI * k as f64 * t).cos(),
        }
    }

    /// `sup_t |phi(t)|`.
    pub fn sup_bound(&self) -> f64 {
        match self {
            BasisFunction::Constant => 1.0,
            _ => SQRT_2,
        }
    }

    /// Integral over one period.
    pub fn period_mean(&self) -> f64 {
        match self {
            BasisFunction::Constant => 1.0,
            _ => 0.0,
        }
    }
}

/// Ordered list of distinct basis functions; orthonormal in `L^2[0, 1]` by
/// construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BasisFunction>", into = "Vec<BasisFunction>")]
pub struct BasisSet {
    functions: Vec<BasisFunction>,
}

impl BasisSet {
    pub fn new(functions: Vec<BasisFunction>) -> Result<Self, ModelError> {
        if functions.is_empty() {
            return Err(ModelError::NonOrthonormalBasis("empty basis".into()));
        }
        for (i, f) in functions.iter().enumerate() {
            if let BasisFunction::Sin { k: 0 } | BasisFunction::Cos { k: 0 } = f {
                return Err(ModelError::NonOrthonormalBasis(format!(
                    "frequency 0 at position {i} (use the constant function)"
                )));
            }
            if functions[..i].contains(f) {
                return Err(ModelError::NonOrthonormalBasis(format!(
                    "{f:?} appears twice"
                )));
            }
        }
        Ok(Self { functions })
    }

    /// `{sqrt2 sin 2 pi t, sqrt2 cos 2 pi t}`.
    pub fn first_harmonic() -> Self {
        Self::new(vec![BasisFunction::Sin { k: 1 }, BasisFunction::Cos { k: 1 }])
            .expect("valid basis")
    }

    pub fn constant() -> Self {
        Self::new(vec![BasisFunction::Constant]).expect("valid basis")
    }

    pub fn p(&self) -> usize {
        self.functions.len()
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    /// Uniform bound `C` on all basis functions.
    pub fn bound(&self) -> f64 {
        self.functions
            .iter()
            .map(BasisFunction::sup_bound)
            .fold(0.0, f64::max)
    }

    /// `int_0^1 phi_i phi_j dt` by Gauss-Legendre quadrature.
    pub fn gram_matrix(&self) -> Vec<Vec<f64>> {
        let rule = period_rule();
        self.functions
            .iter()
            .map(|fi| {
                self.functions
                    .iter()
                    .map(|fj| rule.integrate(0.0, 1.0, |t| fi.eval(t) * fj.eval(t)))
                    .collect()
            })
            .collect()
    }
}

impl TryFrom<Vec<BasisFunction>> for BasisSet {
    type Error = ModelError;

    fn try_from(functions: Vec<BasisFunction>) -> Result<Self, Self::Error> {
        Self::new(functions)
    }
}

impl From<BasisSet> for Vec<BasisFunction> {
    fn from(b: BasisSet) -> Self {
        b.functions
    }
}

pub fn period_rule() -> &'static UnitRule {
    static RULE: OnceLock<UnitRule> = OnceLock::new();
    RULE.get_or_init(|| UnitRule::legendre(PERIOD_NODES))
}

/// Full parameterisation of the model; the period is fixed to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FouModel {
    pub hurst: HurstExponent,
    pub alpha: f64,
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub basis: BasisSet,
    pub xi0: f64,
}

impl FouModel {
    pub fn new(
        hurst: HurstExponent,
        alpha: f64,
        mu: Vec<f64>,
        sigma: f64,
        basis: BasisSet,
        xi0: f64,
    ) -> Result<Self, ModelError> {
        let model = Self {
            hurst,
            alpha,
            mu,
            sigma,
            basis,
            xi0,
        };
        model.validate()?;
        Ok(model)
    }

    /// `sigma = 0` is admitted for noiseless checks.
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        if self.mu.len() != self.basis.p() {
            return Err(ModelError::DimensionMismatch {
                mu: self.mu.len(),
                p: self.basis.p(),
            });
        }
        if self.mu.iter().any(|m| !m.is_finite()) || !self.xi0.is_finite() {
            return Err(ModelError::InvalidParameter("non-finite amplitude or xi0".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.basis.p()
    }

    /// `(mu_1, ..., mu_p, alpha)`.
    pub fn theta(&self) -> Vec<f64> {
        let mut theta = self.mu.clone();
        theta.push(self.alpha);
        theta
    }

    /// `L(t) = sum_i mu_i phi_i(t)`.
    #[inline]
    pub fn drift(&self, t: f64) -> f64 {
        self.mu
            .iter()
            .zip(self.basis.functions())
            .map(|(m, f)| m * f.eval(t))
            .sum()
    }

    /// Steady periodic solution of `h' = L - alpha h`:
    /// `(1 - e^{-alpha})^{-1} int_0^1 e^{-alpha u} L(t - u) du`.
    pub fn tilde_h(&self, t: f64) -> f64 {
        let a = self.alpha;
        let integral = period_rule().integrate(0.0, 1.0, |u| (-a * u).exp() * self.drift(t - u));
        integral / -(-a).exp_m1()
    }

    /// `e^{-alpha t} int_0^t e^{alpha s} L(s) ds`, one quadrature panel per
    /// started period.
    pub fn h_transient(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let a = self.alpha;
        let panels = t.ceil() as usize;
        period_rule().integrate_composite(0.0, t, panels, |u| (-a * u).exp() * self.drift(t - u))
    }
}

/// How the simulated path is started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum StartMode {
    /// `X_0 = xi0`.
    #[default]
    FromInitial,
    /// Run from `xi0` over `burn_in_periods` extra periods with jointly
    /// correlated noise and keep only the terminal state. `None` uses
    /// [`default_burn_in_periods`].
    Stationary { burn_in_periods: Option<usize> },
}

impl StartMode {
    pub fn stationary() -> Self {
        StartMode::Stationary {
            burn_in_periods: None,
        }
    }

    pub fn burn_in_periods(&self, alpha: f64) -> usize {
        match *self {
            StartMode::FromInitial => 0,
            StartMode::Stationary {
                burn_in_periods: Some(b),
            } => b,
            StartMode::Stationary {
                burn_in_periods: None,
            } => default_burn_in_periods(alpha),
        }
    }
}

/// `ceil(ln(1e8) / alpha)`: the initial condition is forgotten to 1e-8.
pub fn default_burn_in_periods(alpha: f64) -> usize {
    (1e8f64.ln() / alpha).ceil() as usize
}

/// Number of grid steps per period, or `InvalidStep` unless `step = 1/m`.
pub fn steps_per_period(step: f64) -> Result<usize, ModelError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(ModelError::InvalidStep(step));
    }
    let m = (1.0 / step).round();
    if (m * step - 1.0).abs() > 1e-12 {
        return Err(ModelError::InvalidStep(step));
    }
    Ok(m as usize)
}

/// A realisation on the grid `t_k = k / m`, `k = 0..=n m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub model: FouModel,
    pub steps_per_period: usize,
    pub x: Vec<f64>,
    /// sigma-free fBm increments driving `x`, one per grid interval.
    pub driver_increments: Option<Vec<f64>>,
    /// Number of correlated increments consumed before `t = 0` (burn-in).
    pub history_steps: usize,
}

impl SamplePath {
    pub fn new(
        model: FouModel,
        steps_per_period: usize,
        x: Vec<f64>,
        driver_increments: Option<Vec<f64>>,
        history_steps: usize,
    ) -> Result<Self, ModelError> {
        if steps_per_period == 0 || x.len() < 2 {
            return Err(ModelError::GridMismatch);
        }
        if let Some(d) = &driver_increments {
            if d.len() + 1 != x.len() {
                return Err(ModelError::GridMismatch);
            }
        }
        Ok(Self {
            model,
            steps_per_period,
            x,
            driver_increments,
            history_steps,
        })
    }

    pub fn step(&self) -> f64 {
        1.0 / self.steps_per_period as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps_per_period as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.x.len()).map(|k| self.time(k)).collect()
    }

    /// Number of grid intervals.
    pub fn intervals(&self) -> usize {
        self.x.len() - 1
    }

    /// Whole periods spanned, or `None` for a partial final period.
    pub fn whole_periods(&self) -> Option<usize> {
        let n = self.intervals();
        n.is_multiple_of(self.steps_per_period).then_some(n / self.steps_per_period)
    }
}

/// Euler recursion `x_{k+1} = x_k + (L(t_k) - alpha x_k)/m + sigma dB_k`
/// starting at phase 0.
pub fn simulate_with_driver(
    model: &FouModel,
    steps_per_period: usize,
    x0: f64,
    increments: &[f64],
) -> Vec<f64> {
    let m = steps_per_period;
    let step = 1.0 / m as f64;
    let drift: Vec<f64> = (0..m).map(|j| model.drift(j as f64 * step)).collect();
    let mut x = Vec::with_capacity(increments.len() + 1);
    let mut current = x0;
    x.push(current);
    for (k, &db) in increments.iter().enumerate() {
        current = current + (drift[k % m] - model.alpha * current) * step + model.sigma * db;
        x.push(current);
    }
    x
}

/// Simulates `n_periods` periods on the grid of spacing `step`.
pub fn simulate_path(
    model: &FouModel,
    n_periods: usize,
    step: f64,
    seed: u64,
    start: StartMode,
) -> Result<SamplePath, ModelError> {
    model.validate()?;
    let m = steps_per_period(step)?;
    if n_periods == 0 {
        return Err(ModelError::InvalidParameter("n_periods must be positive".into()));
    }
    let history = start.burn_in_periods(model.alpha) * m;
    let window = n_periods * m;
    let spec = FgnSpec::new(model.hurst, 1.0 / m as f64, history + window, seed)?;
    let increments = generate_fgn(&spec)?;
    let full = simulate_with_driver(model, m, model.xi0, &increments);
    let x = full[history..].to_vec();
    let driver = increments[history..].to_vec();
    SamplePath::new(model.clone(), m, x, Some(driver), history)
}

/// `|X_t - X~_t|` on the shared grid. Both paths must carry the same
/// driver increments.
pub fn coupling_gap(a: &SamplePath, b: &SamplePath) -> Result<Vec<f64>, ModelError> {
    if a.steps_per_period != b.steps_per_period || a.x.len() != b.x.len() {
        return Err(ModelError::GridMismatch);
    }
    match (&a.driver_increments, &b.driver_increments) {
        (Some(da), Some(db)) if da == db => {}
        _ => return Err(ModelError::GridMismatch),
    }
    Ok(a.x.iter().zip(&b.x).map(|(p, q)| (p - q).abs()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hurst(v: f64) -> HurstExponent {
        HurstExponent::new(v).unwrap()
    }

    fn sine_model(mu: f64, alpha: f64) -> FouModel {
        FouModel::new(
            hurst(0.7),
            alpha,
            vec![mu],
            0.0,
            BasisSet::new(vec![BasisFunction::Sin { k: 1 }]).unwrap(),
            0.0,
        )
        .unwrap()
    }

    fn constant_model(mu: f64, alpha: f64, sigma: f64, xi0: f64) -> FouModel {
        FouModel::new(hurst(0.7), alpha, vec![mu], sigma, BasisSet::constant(), xi0).unwrap()
    }

    fn sine_tilde_h(mu: f64, alpha: f64, t: f64) -> f64 {
        let w = 2.0 * PI;
        mu * SQRT_2 * (alpha * (w * t).sin() - w * (w * t).cos()) / (alpha * alpha + w * w)
    }

    #[test]
    fn basis_is_orthonormal_and_periodic() {
        let basis = BasisSet::new(vec![
            BasisFunction::Constant,
            BasisFunction::Sin { k: 1 },
            BasisFunction::Cos { k: 1 },
            BasisFunction::Sin { k: 3 },
            BasisFunction::Cos { k: 2 },
        ])
        .unwrap();
        let gram = basis.gram_matrix();
        for (i, row) in gram.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                let delta = if i == j { 1.0 } else { 0.0 };
                assert!((g - delta).abs() < 1e-8, "gram[{i}][{j}] = {g}");
            }
        }
        for f in basis.functions() {
            for k in 0..50 {
                let t = k as f64 * 0.0371 - 0.5;
                assert!((f.eval(t + 1.0) - f.eval(t)).abs() <= 1e-12);
                assert!(f.eval(t).abs() <= basis.bound());
            }
        }
        assert_eq!(basis.bound(), SQRT_2);
    }

    #[test]
    fn basis_rejects_duplicates_and_zero_frequency() {
        let dup = BasisSet::new(vec![BasisFunction::Sin { k: 1 }, BasisFunction::Sin { k: 1 }]);
        assert!(matches!(dup, Err(ModelError::NonOrthonormalBasis(_))));
        assert!(BasisSet::new(vec![BasisFunction::Cos { k: 0 }]).is_err());
        assert!(BasisSet::new(vec![]).is_err());
        let json = r#"[{"kind":"const"},{"kind":"sin","k":2}]"#;
        let parsed: BasisSet = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.p(), 2);
        assert!(serde_json::from_str::<BasisSet>(r#"[{"kind":"sin","k":1},{"kind":"sin","k":1}]"#).is_err());
    }

    #[test]
    fn model_validation() {
        let b = BasisSet::first_harmonic();
        assert!(FouModel::new(hurst(0.6), 0.0, vec![1.0, 2.0], 1.0, b.clone(), 0.0).is_err());
        assert!(FouModel::new(hurst(0.6), 1.0, vec![1.0, 2.0], -1.0, b.clone(), 0.0).is_err());
        assert_eq!(
            FouModel::new(hurst(0.6), 1.0, vec![1.0], 1.0, b, 0.0),
            Err(ModelError::DimensionMismatch { mu: 1, p: 2 })
        );
    }

    #[test]
    fn drift_examples() {
        let zero = sine_model(0.0, 1.0);
        assert_eq!(zero.drift(0.3), 0.0);
        let m = sine_model(1.0, 1.0);
        assert_relative_eq!(m.drift(0.25), SQRT_2, epsilon = 1e-15);
        for k in 0..20 {
            let t = 0.137 * k as f64;
            assert!((m.drift(t + 1.0) - m.drift(t)).abs() <= 1e-12);
        }
        assert_eq!(m.theta(), vec![1.0, 1.0]);
    }

    #[test]
    fn tilde_h_closed_forms() {
        assert_eq!(sine_model(0.0, 1.3).tilde_h(0.4), 0.0);
        for alpha in [0.3, 1.0, 2.5] {
            let c = constant_model(1.7, alpha, 0.0, 0.0);
            for t in [0.0, 0.3, 0.77] {
                assert_relative_eq!(c.tilde_h(t), 1.7 / alpha, max_relative = 1e-13);
            }
            let s = sine_model(0.8, alpha);
            for k in 0..13 {
                let t = k as f64 / 13.0;
                assert!((s.tilde_h(t) - sine_tilde_h(0.8, alpha, t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tilde_h_solves_the_ode_and_is_periodic() {
        let model = FouModel::new(
            hurst(0.6),
            0.8,
            vec![1.0, 0.5, -0.3],
            0.0,
            BasisSet::new(vec![
                BasisFunction::Sin { k: 1 },
                BasisFunction::Cos { k: 1 },
                BasisFunction::Sin { k: 2 },
            ])
            .unwrap(),
            0.0,
        )
        .unwrap();
        let delta = 1e-4;
        for k in 0..100 {
            let t = k as f64 / 100.0;
            let deriv = (model.tilde_h(t + delta) - model.tilde_h(t - delta)) / (2.0 * delta);
            let residual = deriv - (model.drift(t) - model.alpha * model.tilde_h(t));
            assert!(residual.abs() <= 1e-6, "residual {residual} at {t}");
            assert!((model.tilde_h(t + 1.0) - model.tilde_h(t)).abs() <= 1e-10);
        }
    }

    #[test]
    fn h_transient_identity() {
        let model = sine_model(1.2, 0.9);
        assert_eq!(model.h_transient(0.0), 0.0);
        assert_eq!(sine_model(0.0, 0.9).h_transient(2.5), 0.0);
        for t in [0.1, 0.5, 1.0, 2.3, 7.9] {
            let expected = model.tilde_h(t) - (-model.alpha * t).exp() * model.tilde_h(0.0);
            assert!((model.h_transient(t) - expected).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn invalid_step_rejected() {
        assert_eq!(steps_per_period(1.0 / 256.0), Ok(256));
        assert_eq!(steps_per_period(0.1), Ok(10));
        assert_eq!(steps_per_period(0.3), Err(ModelError::InvalidStep(0.3)));
        assert!(steps_per_period(2.0).is_err());
        let m = sine_model(1.0, 1.0);
        assert!(matches!(
            simulate_path(&m, 2, 0.3, 0, StartMode::FromInitial),
            Err(ModelError::InvalidStep(_))
        ));
    }

    #[test]
    fn noiseless_decay_tracks_exponential() {
        let m = constant_model(0.0, 1.0, 0.0, 1.0);
        let step = 1.0 / 64.0;
        let path = simulate_path(&m, 5, step, 0, StartMode::FromInitial).unwrap();
        assert_eq!(path.x[0], 1.0);
        let err = path
            .x
            .iter()
            .enumerate()
            .map(|(k, x)| (x - (-path.time(k)).exp()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 2.0 * step, "max error {err}");
    }

    #[test]
    fn constant_mean_relaxes_monotonically() {
        let m = constant_model(1.0, 1.0, 0.0, 0.0);
        let step = 1.0 / 256.0;
        let path = simulate_path(&m, 20, step, 0, StartMode::FromInitial).unwrap();
        assert!(path.x.windows(2).all(|w| w[1] >= w[0]));
        assert!((path.x.last().unwrap() - 1.0).abs() <= 1e-6 + step);
    }

    #[test]
    fn euler_converges_at_first_order() {
        let m = sine_model(1.0, 1.0);
        let model = FouModel { xi0: 0.5, ..m };
        let exact = |t: f64| model.tilde_h(t) + (-t).exp() * (0.5 - model.tilde_h(0.0));
        let max_err = |mm: usize| {
            let p = simulate_path(&model, 3, 1.0 / mm as f64, 0, StartMode::FromInitial).unwrap();
            p.x.iter()
                .enumerate()
                .map(|(k, x)| (x - exact(p.time(k))).abs())
                .fold(0.0, f64::max)
        };
        let coarse = max_err(128);
        let fine = max_err(256);
        let ratio = coarse / fine;
        assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
    }

    #[test]
    fn simulation_is_deterministic_with_driver() {
        let m = FouModel {
            sigma: 0.5,
            ..sine_model(1.0, 1.0)
        };
        let a = simulate_path(&m, 3, 1.0 / 32.0, 17, StartMode::stationary()).unwrap();
        let b = simulate_path(&m, 3, 1.0 / 32.0, 17, StartMode::stationary()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x.len(), 3 * 32 + 1);
        assert_eq!(a.driver_increments.as_ref().unwrap().len(), 3 * 32);
        assert_eq!(a.history_steps, default_burn_in_periods(1.0) * 32);
        assert_eq!(a.whole_periods(), Some(3));
    }

    #[test]
    fn response_is_linear_in_sigma() {
        let base = sine_model(1.0, 0.7);
        let increments = crate::fgn::generate_fgn(
            &FgnSpec::new(base.hurst, 1.0 / 64.0, 640, 4).unwrap(),
        )
        .unwrap();
        let run = |sigma: f64| {
            let m = FouModel { sigma, ..base.clone() };
            simulate_with_driver(&m, 64, 0.3, &increments)
        };
        let (x0, x1, x2) = (run(0.0), run(1.0), run(2.0));
        for k in 0..x0.len() {
            let noise = x1[k] - x0[k];
            assert!(((x2[k] - x1[k]) - noise).abs() <= 1e-12);
        }
    }

    #[test]
    fn coupling_gap_contracts() {
        let m = FouModel {
            sigma: 1.0,
            ..sine_model(1.0, 1.0)
        };
        let stationary = simulate_path(&m, 6, 1.0 / 64.0, 9, StartMode::stationary()).unwrap();
        let driver = stationary.driver_increments.clone().unwrap();
        let x = simulate_with_driver(&m, 64, stationary.x[0] + 1.0, &driver);
        let shifted = SamplePath::new(m.clone(), 64, x, Some(driver), 0).unwrap();
        let gap = coupling_gap(&shifted, &stationary).unwrap();
        let step = 1.0 / 64.0;
        for (k, g) in gap.iter().enumerate() {
            let t = k as f64 * step;
            assert!(*g <= gap[0] * (-m.alpha * t).exp() * (1.0 + 10.0 * step));
        }
        assert!(gap.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert!(coupling_gap(&stationary, &stationary).unwrap().iter().all(|g| *g == 0.0));

        let other = simulate_path(&m, 6, 1.0 / 64.0, 10, StartMode::stationary()).unwrap();
        assert_eq!(coupling_gap(&stationary, &other), Err(ModelError::GridMismatch));
    }
}
