//! Exact-covariance fractional Gaussian noise and fractional Brownian motion.
//!
//! Increments over a grid of spacing `step` are stationary with
//! autocovariance `step^{2H} rho_H(|i - j|)`. Two exact samplers are
//! provided: circulant embedding (`O(N log N)`, the default) and a Toeplitz
//! Cholesky factorisation (`O(N^2)` time, `O(N)` memory while sampling) that
//! serves as fallback and reference.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::fill_standard_normal;

/// Largest `count` accepted by the Cholesky sampler unless a different guard
/// is passed explicitly.
pub const CHOLESKY_GUARD: usize = 1 << 13;

/// Relative tolerance for negative circulant eigenvalues.
const EMBEDDING_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FgnError {
    #[error("Hurst exponent must lie in (0, 1), got {0}")]
    InvalidHurst(f64),
    #[error("step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("increment count must be at least 1")]
    EmptyCount,
    #[error("past segment length must be at least 1")]
    EmptyPast,
    #[error("circulant embedding has eigenvalue {min_eigenvalue:e} below tolerance (max {max_eigenvalue:e})")]
    NonnegativeEmbeddingFailure {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },
    #[error("Toeplitz covariance is not numerically positive definite at row {row}")]
    FactorizationFailure { row: usize },
    #[error("Cholesky sampler refuses count {count} above guard {guard}")]
    CountExceedsGuard { count: usize, guard: usize },
}

/// Hurst exponent `H` in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct HurstExponent(f64);

impl HurstExponent {
    pub fn new(value: f64) -> Result<Self, FgnError> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(FgnError::InvalidHurst(value))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// `H (2H - 1)`, the constant in front of the fBm isometry kernel.
    #[inline]
    pub fn alpha_h(self) -> f64 {
        self.0 * (2.0 * self.0 - 1.0)
    }
}

impl TryFrom<f64> for HurstExponent {
    type Error = FgnError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<HurstExponent> for f64 {
    fn from(h: HurstExponent) -> f64 {
        h.0
    }
}

impl fmt::Display for HurstExponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parameters of one fGn draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgnSpec {
    pub hurst: HurstExponent,
    pub step: f64,
    pub count: usize,
    pub seed: u64,
}

impl FgnSpec {
    pub fn new(hurst: HurstExponent, step: f64, count: usize, seed: u64) -> Result<Self, FgnError> {
        let spec = Self {
            hurst,
            step,
            count,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), FgnError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(FgnError::InvalidStep(self.step));
        }
        if self.count == 0 {
            return Err(FgnError::EmptyCount);
        }
        Ok(())
    }

    /// Marginal standard deviation `step^H` of one increment.
    pub fn scale(&self) -> f64 {
        self.step.powf(self.hurst.value())
    }
}

/// Autocovariance of unit-step fGn,
/// `rho_H(n) = ((n+1)^{2H} + |n-1|^{2H} - 2 n^{2H}) / 2`.
pub fn fgn_autocovariance(hurst: HurstExponent, lag: u64) -> f64 {
    let two_h = 2.0 * hurst.value();
    let n = lag as f64;
    if lag < SERIES_LAG {
        return 0.5 * ((n + 1.0).powf(two_h) + (n - 1.0).abs().powf(two_h) - 2.0 * n.powf(two_h));
    }
    // n^{2H} sum_{j>=1} binom(2H, 2j) n^{-2j}: the direct form cancels
    // catastrophically for large lags
    let x2 = 1.0 / (n * n);
    let mut coef = 1.0;
    let mut power = 1.0;
    let mut sum = 0.0;
    for j in 1..=12 {
        let k = 2 * j;
        coef *= (two_h - (k - 2) as f64) * (two_h - (k - 1) as f64) / ((k - 1) * k) as f64;
        power *= x2;
        sum += coef * power;
    }
    n.powf(two_h) * sum
}

/// Lags from which [`fgn_autocovariance`] switches to the binomial series.
const SERIES_LAG: u64 = 8;

/// First column of the unit-step Toeplitz covariance of `count` increments.
pub fn fgn_covariance_column(hurst: HurstExponent, count: usize) -> Vec<f64> {
    (0..count as u64).map(|k| fgn_autocovariance(hurst, k)).collect()
}

/// Circulant-embedding sampler with precomputed spectrum. Reusable across
/// seeds and safe to share between threads.
#[derive(Clone)]
pub struct CirculantFgn {
    hurst: HurstExponent,
    step: f64,
    count: usize,
    /// `sqrt(lambda_k / M)`.
    amplitudes: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for CirculantFgn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CirculantFgn")
            .field("hurst", &self.hurst)
            .field("step", &self.step)
            .field("count", &self.count)
            .field("embedding_size", &self.amplitudes.len())
            .finish()
    }
}

/// Smallest power of two that is at least `2 (count - 1)` (and at least 1).
pub fn embedding_size(count: usize) -> usize {
    (2 * count.saturating_sub(1)).max(1).next_power_of_two()
}

impl CirculantFgn {
    pub fn new(hurst: HurstExponent, step: f64, count: usize) -> Result<Self, FgnError> {
        FgnSpec {
            hurst,
            step,
            count,
            seed: 0,
        }
        .validate()?;
        let m = embedding_size(count);
        let mut row: Vec<Complex64> = (0..m)
            .map(|j| Complex64::new(fgn_autocovariance(hurst, j.min(m - j) as u64), 0.0))
            .collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        fft.process(&mut row);

        let max_eigenvalue = row.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
        let min_eigenvalue = row.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
        if min_eigenvalue < -EMBEDDING_TOLERANCE * max_eigenvalue {
            return Err(FgnError::NonnegativeEmbeddingFailure {
                min_eigenvalue,
                max_eigenvalue,
            });
        }
        let amplitudes = row
            .iter()
            .map(|c| (c.re.max(0.0) / m as f64).sqrt())
            .collect();
        Ok(Self {
            hurst,
            step,
            count,
            amplitudes,
            fft,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn embedding_size(&self) -> usize {
        self.amplitudes.len()
    }

    /// Draws `count` increments. The spectrum uses normals in the order
    /// `re_0, im_0, re_1, im_1, ...`.
    pub fn sample(&self, seed: u64) -> Vec<f64> {
        let m = self.amplitudes.len();
        let mut normals = vec![0.0; 2 * m];
        fill_standard_normal(seed, &mut normals);
        let mut spectrum: Vec<Complex64> = self
            .amplitudes
            .iter()
            .zip(normals.chunks_exact(2))
            .map(|(&a, z)| Complex64::new(a * z[0], a * z[1]))
            .collect();
        self.fft.process(&mut spectrum);
        let scale = self.step.powf(self.hurst.value());
        spectrum[..self.count].iter().map(|c| scale * c.re).collect()
    }
}

/// Circulant-embedding draw of `spec.count` increments.
pub fn generate_fgn_circulant(spec: &FgnSpec) -> Result<Vec<f64>, FgnError> {
    spec.validate()?;
    Ok(CirculantFgn::new(spec.hurst, spec.step, spec.count)?.sample(spec.seed))
}

/// Runs the Schur algorithm on a symmetric positive definite Toeplitz matrix
/// with first column `column`, handing each Cholesky column to `visit`.
/// `visit(k, col)` receives the full-length column; entries above `k` are 0.
fn toeplitz_cholesky_columns<F>(column: &[f64], mut visit: F) -> Result<(), FgnError>
where
    F: FnMut(usize, &[f64]),
{
    let n = column.len();
    if n == 0 {
        return Err(FgnError::EmptyCount);
    }
    let t0 = column[0];
    if t0.is_nan() || t0 <= 0.0 {
        return Err(FgnError::FactorizationFailure { row: 0 });
    }
    let root = t0.sqrt();
    let mut u: Vec<f64> = column.iter().map(|&c| c / root).collect();
    let mut v = u.clone();
    v[0] = 0.0;
    visit(0, &u);
    for k in 1..n {
        for i in (k..n).rev() {
            u[i] = u[i - 1];
        }
        u[k - 1] = 0.0;
        let rho = v[k] / u[k];
        if rho.is_nan() || rho.abs() >= 1.0 {
            return Err(FgnError::FactorizationFailure { row: k });
        }
        let s = ((1.0 - rho) * (1.0 + rho)).sqrt();
        for i in k..n {
            let (ui, vi) = (u[i], v[i]);
            u[i] = (ui - rho * vi) / s;
            v[i] = (vi - rho * ui) / s;
        }
        v[k] = 0.0;
        visit(k, &u);
    }
    Ok(())
}

/// Dense lower-triangular Cholesky factor of the covariance of `count`
/// increments of spacing `step`.
pub fn cholesky_factor(
    hurst: HurstExponent,
    step: f64,
    count: usize,
) -> Result<DMatrix<f64>, FgnError> {
    FgnSpec {
        hurst,
        step,
        count,
        seed: 0,
    }
    .validate()?;
    if count > CHOLESKY_GUARD {
        return Err(FgnError::CountExceedsGuard {
            count,
            guard: CHOLESKY_GUARD,
        });
    }
    let scale = step.powf(hurst.value());
    let mut factor = DMatrix::zeros(count, count);
    toeplitz_cholesky_columns(&fgn_covariance_column(hurst, count), |k, col| {
        for i in k..count {
            factor[(i, k)] = scale * col[i];
        }
    })?;
    Ok(factor)
}

/// Cholesky draw with the default size guard.
pub fn generate_fgn_cholesky(spec: &FgnSpec) -> Result<Vec<f64>, FgnError> {
    generate_fgn_cholesky_guarded(spec, CHOLESKY_GUARD)
}

/// Cholesky draw `L z`; the factor is streamed column by column so memory
/// stays linear in `count`.
pub fn generate_fgn_cholesky_guarded(spec: &FgnSpec, guard: usize) -> Result<Vec<f64>, FgnError> {
    spec.validate()?;
    if spec.count > guard {
        return Err(FgnError::CountExceedsGuard {
            count: spec.count,
            guard,
        });
    }
    let mut z = vec![0.0; spec.count];
    fill_standard_normal(spec.seed, &mut z);
    let mut out = vec![0.0; spec.count];
    toeplitz_cholesky_columns(&fgn_covariance_column(spec.hurst, spec.count), |k, col| {
        let zk = z[k];
        for (o, c) in out[k..].iter_mut().zip(&col[k..]) {
            *o += c * zk;
        }
    })?;
    let scale = spec.scale();
    out.iter_mut().for_each(|x| *x *= scale);
    Ok(out)
}

/// Circulant embedding, falling back to Cholesky when the embedding is
/// rejected and the size permits.
pub fn generate_fgn(spec: &FgnSpec) -> Result<Vec<f64>, FgnError> {
    match generate_fgn_circulant(spec) {
        Err(FgnError::NonnegativeEmbeddingFailure { .. }) if spec.count <= CHOLESKY_GUARD => {
            generate_fgn_cholesky(spec)
        }
        other => other,
    }
}

/// fBm sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FbmPath {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub hurst: HurstExponent,
}

impl FbmPath {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at time 0.
    pub fn origin_value(&self) -> Option<f64> {
        self.grid
            .iter()
            .position(|&t| t == 0.0)
            .map(|i| self.values[i])
    }

    /// Increments `values[k+1] - values[k]`.
    pub fn increments(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Cumulative sum of increments on the grid `t_k = k step`, anchored at 0.
pub fn fbm_from_fgn(increments: &[f64], step: f64, hurst: HurstExponent) -> Result<FbmPath, FgnError> {
    anchored_path(increments, step, 0, hurst)
}

fn anchored_path(
    increments: &[f64],
    step: f64,
    origin: usize,
    hurst: HurstExponent,
) -> Result<FbmPath, FgnError> {
    if increments.is_empty() {
        return Err(FgnError::EmptyCount);
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(FgnError::InvalidStep(step));
    }
    let mut values = Vec::with_capacity(increments.len() + 1);
    let mut acc = 0.0;
    values.push(acc);
    for &d in increments {
        acc += d;
        values.push(acc);
    }
    let shift = values[origin];
    if shift != 0.0 {
        values.iter_mut().for_each(|v| *v -= shift);
    }
    let grid = (0..values.len())
        .map(|k| (k as f64 - origin as f64) * step)
        .collect();
    Ok(FbmPath {
        grid,
        values,
        hurst,
    })
}

/// One jointly correlated draw covering `[-past_count step, count step]`,
/// re-anchored so that the value at time 0 is exactly 0.
pub fn generate_two_sided_driver(spec: &FgnSpec, past_count: usize) -> Result<FbmPath, FgnError> {
    if past_count == 0 {
        return Err(FgnError::EmptyPast);
    }
    spec.validate()?;
    let full = FgnSpec {
        count: spec.count + past_count,
        ..*spec
    };
    let increments = generate_fgn(&full)?;
    let mut path = anchored_path(&increments, spec.step, past_count, spec.hurst)?;
    path.values[past_count] = 0.0;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn h(v: f64) -> HurstExponent {
        HurstExponent::new(v).unwrap()
    }

    #[test]
    fn autocovariance_examples() {
        assert_eq!(fgn_autocovariance(h(0.75), 0), 1.0);
        assert!(fgn_autocovariance(h(0.5), 3).abs() < 1e-15);
        assert_relative_eq!(fgn_autocovariance(h(0.75), 1), 0.414_213_562_373_095_1, epsilon = 1e-15);
    }

    #[test]
    fn autocovariance_series_matches_direct_form() {
        for hv in [0.51, 0.6, 0.74, 0.3] {
            let hurst = h(hv);
            for lag in [8u64, 9, 10, 20, 100] {
                let n = lag as f64;
                let direct = 0.5 * ((n + 1.0).powf(2.0 * hv) + (n - 1.0).powf(2.0 * hv) - 2.0 * n.powf(2.0 * hv));
                assert_relative_eq!(fgn_autocovariance(hurst, lag), direct, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn autocovariance_high_precision_values() {
        // reference values from 50-digit evaluation of the defining formula
        let cases = [
            (0.51, 1u64, 0.013_959_479_790_029_14),
            (0.51, 10, 0.001_069_805_054_465_625),
            (0.51, 100, 0.000_111_842_584_543_453_78),
            (0.6, 1, 0.148_698_354_997_035_01),
            (0.6, 10, 0.019_041_622_119_962_69),
            (0.6, 100, 0.003_014_299_890_259_044),
            (0.74, 1, 0.394_743_666_350_405_4),
            (0.74, 10, 0.107_339_549_262_482_2),
            (0.74, 100, 0.032_394_838_392_827_95),
        ];
        for (hv, lag, expected) in cases {
            assert_relative_eq!(fgn_autocovariance(h(hv), lag), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn hurst_bounds() {
        assert!(HurstExponent::new(0.0).is_err());
        assert!(HurstExponent::new(1.0).is_err());
        assert!(HurstExponent::new(f64::NAN).is_err());
        assert!(serde_json::from_str::<HurstExponent>("1.5").is_err());
        assert_eq!(serde_json::from_str::<HurstExponent>("0.6").unwrap().value(), 0.6);
    }

    #[test]
    fn embedding_sizes() {
        assert_eq!(embedding_size(1), 1);
        assert_eq!(embedding_size(2), 2);
        assert_eq!(embedding_size(3), 4);
        assert_eq!(embedding_size(4096), 8192);
        assert_eq!(embedding_size(4097), 8192);
        assert_eq!(embedding_size(4098), 16384);
    }

    #[test]
    fn single_increment_is_scaled_first_normal() {
        let spec = FgnSpec::new(h(0.7), 0.25, 1, 99).unwrap();
        let z = crate::rng::standard_normals(99, 1)[0];
        let draw = generate_fgn_circulant(&spec).unwrap();
        assert_eq!(draw.len(), 1);
        assert_relative_eq!(draw[0], 0.25f64.powf(0.7) * z, epsilon = 1e-15);
    }

    #[test]
    fn circulant_is_deterministic() {
        let spec = FgnSpec::new(h(0.65), 1.0 / 256.0, 1000, 5).unwrap();
        let a = generate_fgn_circulant(&spec).unwrap();
        let b = generate_fgn_circulant(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_fgn_circulant(&FgnSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert_eq!(FgnSpec::new(h(0.6), 0.0, 4, 0), Err(FgnError::InvalidStep(0.0)));
        assert_eq!(FgnSpec::new(h(0.6), 1.0, 0, 0), Err(FgnError::EmptyCount));
    }

    #[test]
    fn brownian_cholesky_is_scaled_identity() {
        let l = cholesky_factor(h(0.5), 0.04, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.2 } else { 0.0 };
                assert!((l[(i, j)] - expected).abs() < 1e-12);
            }
        }
        let spec = FgnSpec::new(h(0.5), 0.04, 3, 11).unwrap();
        let z = crate::rng::standard_normals(11, 3);
        let draw = generate_fgn_cholesky(&spec).unwrap();
        for (d, z) in draw.iter().zip(&z) {
            assert_relative_eq!(*d, 0.2 * z, epsilon = 1e-12);
        }
    }

    #[test]
    fn schur_factor_matches_dense_cholesky() {
        let hurst = h(0.7);
        let n = 64;
        let col = fgn_covariance_column(hurst, n);
        let t = DMatrix::from_fn(n, n, |i, j| col[i.abs_diff(j)]);
        let dense = t.clone().cholesky().unwrap().l();
        let schur = cholesky_factor(hurst, 1.0, n).unwrap();
        assert!((dense - &schur).amax() < 1e-10);
        assert!((&schur * schur.transpose() - t).amax() < 1e-10);
    }

    #[test]
    fn cholesky_streamed_sample_equals_factor_times_normals() {
        let spec = FgnSpec::new(h(0.62), 0.5, 40, 3).unwrap();
        let l = cholesky_factor(spec.hurst, spec.step, spec.count).unwrap();
        let z = nalgebra::DVector::from_vec(crate::rng::standard_normals(3, 40));
        let expected = l * z;
        let draw = generate_fgn_cholesky(&spec).unwrap();
        for (a, b) in draw.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_guard() {
        let spec = FgnSpec::new(h(0.6), 1.0, CHOLESKY_GUARD + 1, 0).unwrap();
        assert!(matches!(
            generate_fgn_cholesky(&spec),
            Err(FgnError::CountExceedsGuard { .. })
        ));
        let small = FgnSpec::new(h(0.6), 1.0, 10, 0).unwrap();
        assert!(matches!(
            generate_fgn_cholesky_guarded(&small, 5),
            Err(FgnError::CountExceedsGuard { count: 10, guard: 5 })
        ));
    }

    #[test]
    fn indefinite_toeplitz_is_rejected() {
        // [[1, 0.9, 0.9], [0.9, 1, 0.9], ...] is fine; a lag-1 correlation of 1.2 is not
        let err = toeplitz_cholesky_columns(&[1.0, 1.2, 0.0], |_, _| {}).unwrap_err();
        assert_eq!(err, FgnError::FactorizationFailure { row: 1 });
    }

    #[test]
    fn fbm_cumulative_sum() {
        let p = fbm_from_fgn(&[1.0, 1.0, 1.0], 1.0, h(0.5)).unwrap();
        assert_eq!(p.values, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(p.grid, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(fbm_from_fgn(&[], 1.0, h(0.5)).is_err());
    }

    #[test]
    fn two_sided_driver_anchored_at_zero() {
        let spec = FgnSpec::new(h(0.7), 0.125, 16, 8).unwrap();
        assert_eq!(generate_two_sided_driver(&spec, 0), Err(FgnError::EmptyPast));
        let p = generate_two_sided_driver(&spec, 8).unwrap();
        assert_eq!(p.len(), 25);
        assert_eq!(p.grid[0], -1.0);
        assert_eq!(p.grid[24], 2.0);
        assert_eq!(p.origin_value(), Some(0.0));
        assert_eq!(p.values[8], 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fbm_telescopes(incs in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
                let p = fbm_from_fgn(&incs, 0.1, h(0.6)).unwrap();
                prop_assert_eq!(p.values[0], 0.0);
                prop_assert_eq!(p.len(), incs.len() + 1);
                let sum: f64 = incs.iter().sum();
                prop_assert!((p.values[incs.len()] - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
            }

            #[test]
            fn partial_sum_variance_is_self_similar(hv in 0.05f64..0.95, n in 1usize..256) {
                // 1' T 1 = N^{2H} telescopes exactly for the fGn Toeplitz matrix
                let hurst = h(hv);
                let col = fgn_covariance_column(hurst, n);
                let mut quad = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        quad += col[i.abs_diff(j)];
                    }
                }
                let expected = (n as f64).powf(2.0 * hv);
                prop_assert!((quad - expected).abs() <= 1e-8 * expected);
            }

            #[test]
            fn circulant_embedding_accepted(hv in 0.01f64..0.99, count in 1usize..3000) {
                prop_assert!(CirculantFgn::new(h(hv), 1.0, count).is_ok());
            }
        }
    }
}
