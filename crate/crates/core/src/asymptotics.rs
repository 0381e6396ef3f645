//! Limit objects of the estimator: `Lambda`, `gamma`, `C`, `Sigma0` and the
//! asymptotic covariance `sigma^2 C Sigma0 C`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::estimator::closed_form_matrix;
use crate::fgn::HurstExponent;
use crate::model::{period_rule, FouModel};
use crate::quadrature::UnitRule;

/// Nodes of the Gauss-Jacobi rule in the lag variable `u = t - s`.
pub const LAG_NODES: usize = 48;
/// Nodes of the Gauss-Legendre rule along the diagonal.
pub const DIAGONAL_NODES: usize = 48;
/// `b` at or below this marks the alpha row of the limit as vanishing.
pub const DEGENERATE_LIMIT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AsymptoticsError {
    #[error("the fBm isometry kernel needs 1/2 < H < 1, got {0}")]
    HurstOutOfRange(f64),
    #[error("gamma is unbounded: denominator {denominator} is not positive")]
    UnboundedGamma { denominator: f64 },
}

/// Tensor rule for `int_0^1 u^{2H-2} int_0^{1-u} F(s, s + u) ds du`.
#[derive(Debug, Clone)]
pub struct SingularPairRule {
    hurst: HurstExponent,
    lag: UnitRule,
    diagonal: UnitRule,
}

impl SingularPairRule {
    pub fn new(hurst: HurstExponent) -> Result<Self, AsymptoticsError> {
        Self::with_nodes(hurst, LAG_NODES, DIAGONAL_NODES)
    }

    pub fn with_nodes(hurst: HurstExponent, lag_nodes: usize, diagonal_nodes: usize) -> Result<Self, AsymptoticsError> {
        let h = hurst.value();
        if !(h > 0.5 && h < 1.0) {
            return Err(AsymptoticsError::HurstOutOfRange(h));
        }
        Ok(Self {
            hurst,
            lag: UnitRule::jacobi_left(lag_nodes, 2.0 * h - 2.0),
            diagonal: UnitRule::legendre(diagonal_nodes),
        })
    }

    /// Gram matrix `alpha_H int int f_i(s) f_j(t) |t - s|^{2H-2} ds dt`.
    ///
    /// Every function is evaluated once per node pair, and the entries are
    /// assembled as `sum w (A_i B_j + B_i A_j)` so the result is exactly
    /// symmetric.
    pub fn gram(&self, functions: &[&dyn Fn(f64) -> f64]) -> DMatrix<f64> {
        let k = functions.len();
        let mut left = vec![Vec::new(); k];
        let mut right = vec![Vec::new(); k];
        let mut weights = Vec::new();
        for (&u, &wu) in self.lag.nodes().iter().zip(self.lag.weights()) {
            let width = 1.0 - u;
            for (&x, &wx) in self.diagonal.nodes().iter().zip(self.diagonal.weights()) {
                let s = width * x;
                weights.push(wu * width * wx);
                for (i, f) in functions.iter().enumerate() {
                    left[i].push(f(s));
                    right[i].push(f(s + u));
                }
            }
        }
        let alpha_h = self.hurst.alpha_h();
        DMatrix::from_fn(k, k, |i, j| {
            let (i, j) = (i.min(j), i.max(j));
            alpha_h
                * weights
                    .iter()
                    .enumerate()
                    .map(|(q, w)| w * (left[i][q] * right[j][q] + right[i][q] * left[j][q]))
                    .sum::<f64>()
        })
    }
}

/// `alpha_H int_0^1 int_0^1 f(s) g(t) |t - s|^{2H-2} ds dt`, i.e.
/// `Cov(int f dB^H, int g dB^H)` on one period.
pub fn singular_pair_integral<F, G>(f: F, g: G, hurst: HurstExponent) -> Result<f64, AsymptoticsError>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let rule = SingularPairRule::new(hurst)?;
    Ok(rule.gram(&[&f, &g])[(0, 1)])
}

/// `Lambda_i = int_0^1 phi_i h~`.
pub fn lambda_limit(model: &FouModel) -> DVector<f64> {
    let rule = period_rule();
    let h: Vec<f64> = rule.nodes().iter().map(|&t| model.tilde_h(t)).collect();
    DVector::from_iterator(
        model.p(),
        model.basis.functions().iter().map(|f| {
            rule.nodes()
                .iter()
                .zip(rule.weights())
                .zip(&h)
                .map(|((&t, &w), &ht)| w * f.eval(t) * ht)
                .sum()
        }),
    )
}

/// `int_0^1 h~^2`.
pub fn tilde_h_energy(model: &FouModel) -> f64 {
    period_rule().integrate(0.0, 1.0, |t| model.tilde_h(t).powi(2))
}

/// `sigma^2 alpha^{-2H} H Gamma(2H)`, the variance of the zero-mean
/// stationary fOU.
pub fn stationary_variance(alpha: f64, sigma: f64, hurst: HurstExponent) -> f64 {
    let h = hurst.value();
    sigma * sigma * alpha.powf(-2.0 * h) * h * gamma(2.0 * h)
}

/// `(int_0^1 h~^2 + sigma^2 alpha^{-2H} H Gamma(2H) - |Lambda|^2)^{-1}`.
pub fn gamma_limit(model: &FouModel) -> Result<f64, AsymptoticsError> {
    let lambda = lambda_limit(model);
    gamma_from_parts(model, &lambda)
}

fn gamma_from_parts(model: &FouModel, lambda: &DVector<f64>) -> Result<f64, AsymptoticsError> {
    let denominator = tilde_h_energy(model) + stationary_variance(model.alpha, model.sigma, model.hurst)
        - lambda.norm_squared();
    if denominator > DEGENERATE_LIMIT_THRESHOLD && denominator.is_finite() {
        Ok(1.0 / denominator)
    } else {
        Err(AsymptoticsError::UnboundedGamma { denominator })
    }
}

/// `C = [[I + gamma L L', gamma L], [gamma L', gamma]]`, the limit of `n Q_n^{-1}`.
pub fn build_c(model: &FouModel) -> Result<DMatrix<f64>, AsymptoticsError> {
    let lambda = lambda_limit(model);
    let gamma = gamma_from_parts(model, &lambda)?;
    Ok(closed_form_matrix(&lambda, gamma))
}

/// `Sigma0`: the kernel Gram matrix of `(phi_1, ..., phi_p, -h~)`.
pub fn build_sigma0(model: &FouModel) -> Result<DMatrix<f64>, AsymptoticsError> {
    let rule = SingularPairRule::new(model.hurst)?;
    let neg_h = |t: f64| -model.tilde_h(t);
    let mut functions: Vec<&dyn Fn(f64) -> f64> = Vec::with_capacity(model.p() + 1);
    let basis: Vec<_> = model.basis.functions().to_vec();
    let evals: Vec<_> = basis.iter().map(|f| move |t: f64| f.eval(t)).collect();
    for e in &evals {
        functions.push(e);
    }
    functions.push(&neg_h);
    Ok(rule.gram(&functions))
}

/// `sigma^2 C Sigma0 C`.
pub fn asymptotic_covariance(model: &FouModel) -> Result<DMatrix<f64>, AsymptoticsError> {
    Ok(LimitMatrices::compute(model)?.asym_cov)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// All limit objects of one model, with validity flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitMatrices {
    #[serde(rename = "Lambda", with = "vector_serde")]
    pub lambda: DVector<f64>,
    pub gamma: f64,
    #[serde(rename = "C", with = "matrix_serde")]
    pub c: DMatrix<f64>,
    #[serde(rename = "Sigma0", with = "matrix_serde")]
    pub sigma0: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub asym_cov: DMatrix<f64>,
    #[serde(rename = "alpha_H")]
    pub alpha_h: f64,
    pub stationary_variance: f64,
    /// Frobenius norm of `Sigma0 - C^{-1}`; zero only in the Brownian case.
    pub sigma0_minus_c_inv_norm: f64,
    pub flags: LimitFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitFlags {
    /// `H < 3/4`, where `n^{1-H}` is the normalisation of the limit theorem.
    pub clt_valid: bool,
    /// `b <= 1e-12`: the alpha row of the limit covariance vanishes.
    pub degenerate_limit: bool,
}

impl LimitMatrices {
    pub fn compute(model: &FouModel) -> Result<Self, AsymptoticsError> {
        let h = model.hurst.value();
        if !(h > 0.5 && h < 1.0) {
            return Err(AsymptoticsError::HurstOutOfRange(h));
        }
        let lambda = lambda_limit(model);
        let gamma = gamma_from_parts(model, &lambda)?;
        let c = closed_form_matrix(&lambda, gamma);
        let sigma0 = build_sigma0(model)?;
        let asym_cov = symmetrize(&c * &sigma0 * &c * (model.sigma * model.sigma));
        let p = model.p();
        let sigma0_minus_c_inv_norm = c
            .clone()
            .try_inverse()
            .map(|ci| (&sigma0 - ci).norm())
            .unwrap_or(f64::NAN);
        Ok(Self {
            lambda,
            gamma,
            flags: LimitFlags {
                clt_valid: h < 0.75,
                degenerate_limit: sigma0[(p, p)] <= DEGENERATE_LIMIT_THRESHOLD,
            },
            c,
            sigma0,
            asym_cov,
            alpha_h: model.hurst.alpha_h(),
            stationary_variance: stationary_variance(model.alpha, model.sigma, model.hurst),
            sigma0_minus_c_inv_norm,
        })
    }

    pub fn p(&self) -> usize {
        self.lambda.len()
    }

    /// Upper-left `p x p` block of `asym_cov`.
    pub fn mu_block(&self) -> DMatrix<f64> {
        let p = self.p();
        self.asym_cov.view((0, 0), (p, p)).into_owned()
    }
}

pub(crate) mod matrix_serde {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

pub(crate) mod vector_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BasisFunction, BasisSet};
    use approx::assert_relative_eq;
    use std::f64::consts::{PI, SQRT_2};

    fn hurst(h: f64) -> HurstExponent {
        HurstExponent::new(h).unwrap()
    }

    fn sin1(t: f64) -> f64 {
        SQRT_2 * (2.0 * PI * t).sin()
    }

    fn model(h: f64, alpha: f64, mu: Vec<f64>, sigma: f64, basis: BasisSet) -> FouModel {
        FouModel::new(hurst(h), alpha, mu, sigma, basis, 0.0).unwrap()
    }

    // fBm increment covariance on cells of width 1/n, written out directly
    fn cell_kernel(h: f64, d: usize, n: usize) -> f64 {
        let d = d as f64;
        let e = 2.0 * h;
        0.5 * ((d + 1.0).powf(e) + (d - 1.0).abs().powf(e) - 2.0 * d.powf(e)) * (n as f64).powf(-e)
    }

    // midpoint values against the exact kernel mass of every cell
    fn brute_force(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, h: f64, n: usize) -> f64 {
        let fv: Vec<f64> = (0..n).map(|i| f((i as f64 + 0.5) / n as f64)).collect();
        let gv: Vec<f64> = (0..n).map(|i| g((i as f64 + 0.5) / n as f64)).collect();
        let mut total = 0.0;
        for d in 0..n {
            let k = cell_kernel(h, d, n);
            let mut s: f64 = (0..n - d).map(|i| fv[i] * gv[i + d]).sum();
            if d > 0 {
                s += (0..n - d).map(|i| fv[i + d] * gv[i]).sum::<f64>();
            }
            total += k * s;
        }
        total
    }

    #[test]
    fn constant_pair_is_fbm_variance() {
        for h in [0.55, 0.6, 0.65, 0.7, 0.74, 0.9] {
            let v = singular_pair_integral(|_| 1.0, |_| 1.0, hurst(h)).unwrap();
            assert!((v - 1.0).abs() < 1e-12, "H = {h}: {v}");
        }
    }

    #[test]
    fn linear_against_constant_is_one_half() {
        // (s, t) -> (1 - s, 1 - t) leaves the kernel invariant
        for h in [0.6, 0.7] {
            let v = singular_pair_integral(|s| s, |_| 1.0, hurst(h)).unwrap();
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_integral_symmetric() {
        let f = |t: f64| (3.0 * t).cos() + t * t;
        let g = |t: f64| sin1(t) - 0.3;
        let a = singular_pair_integral(f, g, hurst(0.65)).unwrap();
        let b = singular_pair_integral(g, f, hurst(0.65)).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn brute_force_agreement() {
        let h = 0.6;
        let fast = singular_pair_integral(|_| 1.0, sin1, hurst(h)).unwrap();
        let slow = brute_force(|_| 1.0, sin1, h, 1000);
        assert!((fast - slow).abs() < 1e-5, "{fast} vs {slow}");
        let fast = singular_pair_integral(sin1, sin1, hurst(0.7)).unwrap();
        let slow = brute_force(sin1, sin1, 0.7, 1000);
        assert!((fast - slow).abs() < 1e-5, "{fast} vs {slow}");
    }

    #[test]
    fn hurst_guard() {
        assert_eq!(
            singular_pair_integral(|_| 1.0, |_| 1.0, hurst(0.5)),
            Err(AsymptoticsError::HurstOutOfRange(0.5))
        );
    }

    #[test]
    fn gram_of_trigonometric_family_is_psd() {
        let rule = SingularPairRule::new(hurst(0.62)).unwrap();
        let fs: Vec<Box<dyn Fn(f64) -> f64>> = (0..6)
            .map(|k| -> Box<dyn Fn(f64) -> f64> {
                let c = 0.3 * k as f64 - 0.7;
                Box::new(move |t: f64| (2.0 * PI * k as f64 * t + c).cos() + c * t)
            })
            .collect();
        let refs: Vec<&dyn Fn(f64) -> f64> = fs.iter().map(|f| f.as_ref()).collect();
        let g = rule.gram(&refs);
        assert_eq!(g, g.transpose());
        assert!(g.symmetric_eigenvalues().min() >= -1e-10);
    }

    #[test]
    fn lambda_examples() {
        let zero = model(0.6, 1.0, vec![0.0, 0.0], 1.0, BasisSet::first_harmonic());
        assert!(lambda_limit(&zero).amax() < 1e-15);

        let constant = model(0.6, 1.7, vec![2.5], 1.0, BasisSet::constant());
        assert_relative_eq!(lambda_limit(&constant)[0], 2.5 / 1.7, max_relative = 1e-13);

        let sine = model(0.6, 1.0, vec![1.0], 1.0, BasisSet::new(vec![BasisFunction::Sin { k: 1 }]).unwrap());
        let expected = 1.0 / (1.0 + 4.0 * PI * PI);
        assert_relative_eq!(lambda_limit(&sine)[0], expected, max_relative = 1e-12);
        assert!((expected - 0.024_704_5).abs() < 1e-7);
    }

    #[test]
    fn stationary_variance_examples() {
        assert_relative_eq!(stationary_variance(1.0, 1.0, hurst(0.5)), 0.5, max_relative = 1e-14);
        assert_relative_eq!(
            stationary_variance(1.0, 1.0, hurst(0.6)),
            0.550_901_245_439_856_4,
            max_relative = 1e-12
        );
        let h = hurst(0.68);
        assert_relative_eq!(
            stationary_variance(4.0 * 1.3, 0.7, h),
            4f64.powf(-1.36) * stationary_variance(1.3, 0.7, h),
            max_relative = 1e-13
        );
    }

    #[test]
    fn gamma_examples() {
        let zero = model(0.6, 1.0, vec![0.0, 0.0], 1.0, BasisSet::first_harmonic());
        assert_relative_eq!(gamma_limit(&zero).unwrap(), 1.815_207_368_430_560_6, max_relative = 1e-12);
        for mu in [0.5, 3.0, -2.0] {
            let m = model(0.7, 1.3, vec![mu], 0.8, BasisSet::constant());
            assert_relative_eq!(
                gamma_limit(&m).unwrap(),
                1.0 / stationary_variance(1.3, 0.8, hurst(0.7)),
                max_relative = 1e-10
            );
        }
        let noiseless = model(0.7, 0.8, vec![1.0, 0.5], 0.0, BasisSet::first_harmonic());
        assert!(matches!(gamma_limit(&noiseless), Err(AsymptoticsError::UnboundedGamma { .. })));
    }

    #[test]
    fn bessel_inequality() {
        let basis = BasisSet::new(vec![
            BasisFunction::Constant,
            BasisFunction::Sin { k: 2 },
            BasisFunction::Cos { k: 1 },
        ])
        .unwrap();
        for (alpha, mu) in [(0.4, [1.0, -2.0, 0.3]), (2.5, [0.0, 1.0, 1.0]), (1.0, [-1.0, 0.2, 4.0])] {
            let m = model(0.65, alpha, mu.to_vec(), 0.5, basis.clone());
            assert!(lambda_limit(&m).norm_squared() <= tilde_h_energy(&m) + 1e-10);
            assert!(gamma_limit(&m).unwrap() > 0.0);
        }
    }

    #[test]
    fn zero_mean_limit_is_degenerate() {
        let m = model(0.65, 1.0, vec![0.0, 0.0], 0.5, BasisSet::first_harmonic());
        let lim = LimitMatrices::compute(&m).unwrap();
        assert!(lim.flags.degenerate_limit);
        assert!(lim.flags.clt_valid);
        assert!(lim.asym_cov[(2, 2)].abs() < 1e-14);
        for i in 0..2 {
            assert!(lim.sigma0[(i, 2)].abs() < 1e-14);
            assert!(lim.c[(i, 2)].abs() < 1e-14);
        }
        let g11 = singular_pair_integral(sin1, sin1, m.hurst).unwrap();
        assert_relative_eq!(lim.mu_block()[(0, 0)], 0.25 * g11, max_relative = 1e-12);
    }

    #[test]
    fn constant_basis_sigma0_is_rank_deficient() {
        let m = model(0.7, 2.0, vec![3.0], 1.0, BasisSet::constant());
        let s = build_sigma0(&m).unwrap();
        assert_relative_eq!(s[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s[(0, 1)], -1.5, epsilon = 1e-10);
        assert_relative_eq!(s[(1, 1)], 2.25, epsilon = 1e-10);
        let eig = s.symmetric_eigenvalues();
        assert!(eig.min().abs() < 1e-9 && eig.min() >= -1e-10);
    }

    #[test]
    fn acceptance_model_limit_is_psd() {
        let m = model(0.65, 1.0, vec![1.0, 2.0], 0.5, BasisSet::first_harmonic());
        let lim = LimitMatrices::compute(&m).unwrap();
        assert_eq!(lim.asym_cov, lim.asym_cov.transpose());
        assert!(lim.asym_cov.symmetric_eigenvalues().min() >= -1e-10);
        assert!(lim.sigma0.symmetric_eigenvalues().min() >= -1e-10);
        assert!(!lim.flags.degenerate_limit);
        assert!(lim.sigma0_minus_c_inv_norm > 1e-3);
        assert_eq!(lim.c, lim.c.transpose());
    }

    #[test]
    fn c_inverts_the_limit_design() {
        // C^{-1} = [[I, -L], [-L', 1/gamma + |L|^2]]
        let m = model(0.6, 1.4, vec![0.7, -1.1], 0.9, BasisSet::first_harmonic());
        let lim = LimitMatrices::compute(&m).unwrap();
        let mut q = DMatrix::identity(3, 3);
        for i in 0..2 {
            q[(i, 2)] = -lim.lambda[i];
            q[(2, i)] = -lim.lambda[i];
        }
        q[(2, 2)] = 1.0 / lim.gamma + lim.lambda.norm_squared();
        assert!((&lim.c * q - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn report_round_trip() {
        let m = model(0.8, 1.0, vec![1.0, 2.0], 0.5, BasisSet::first_harmonic());
        let lim = LimitMatrices::compute(&m).unwrap();
        assert!(!lim.flags.clt_valid);
        let json = serde_json::to_string(&lim).unwrap();
        for key in ["\"Lambda\"", "\"C\"", "\"Sigma0\"", "\"asym_cov\"", "\"alpha_H\"", "\"clt_valid\""] {
            assert!(json.contains(key), "{key}");
        }
        let back: LimitMatrices = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lim);
    }
}
