//! Scenario space and reference distribution.
//!
//! A scenario is a vector `s = (g, x)` whose first coordinate is the
//! geopolitical shock and whose remaining `d − 1` coordinates are
//! macro-financial shocks. The reference distribution is centred at zero
//! with scatter matrix `Σ = L Lᵀ`; all plausibility measures are functions
//! of the squared Mahalanobis distance `sᵀ Σ⁻¹ s = ‖L⁻¹ s‖²`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::special;

/// A point `s = (g, x)` of the scenario space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScenarioVector(Vec<f64>);

impl ScenarioVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(
                "scenario",
                format!("dimension must be at least 2, got {}", values.len()),
            ));
        }
        check_finite(&values, "scenario vector")?;
        Ok(Self(values))
    }

    pub fn from_parts(g: f64, x: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(x.len() + 1);
        values.push(g);
        values.extend_from_slice(x);
        Self::new(values)
    }

    /// The baseline scenario `s = 0`.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 2, "scenario dimension must be at least 2");
        Self(vec![0.0; dim])
    }

    /// Geopolitical coordinate.
    pub fn g(&self) -> f64 {
        self.0[0]
    }

    /// Macro-financial coordinates.
    pub fn x(&self) -> &[f64] {
        &self.0[1..]
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ScenarioVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Distribution family of the reference model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    StudentT { nu: f64 },
}

/// Plausibility of a scenario under the reference model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityScore {
    pub mahalanobis_sq: f64,
    /// Probability of a joint shock at least as extreme in the Mahalanobis metric.
    pub tail_probability: f64,
    /// `−log₁₀(tail_probability)`.
    pub rarity: f64,
}

/// Zero-mean reference distribution over scenarios.
#[derive(Debug, Clone)]
pub struct ReferenceModel {
    family: Family,
    sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
    factor_names: Vec<String>,
}

/// Lower Cholesky factor; fails on the first non-positive pivot.
pub(crate) fn cholesky(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut pivot = sigma[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let diag = pivot.sqrt();
        l[(j, j)] = diag;
        for i in (j + 1)..d {
            let mut v = sigma[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / diag;
        }
    }
    Ok(l)
}

impl ReferenceModel {
    /// Builds a model from a symmetric positive-definite scatter matrix.
    ///
    /// `factor_names[0]` labels the geopolitical factor.
    pub fn new(sigma: DMatrix<f64>, family: Family, factor_names: Vec<String>) -> Result<Self> {
        let d = sigma.nrows();
        if sigma.ncols() != d {
            return Err(Error::invalid(
                "sigma",
                format!("matrix must be square, got {}x{}", d, sigma.ncols()),
            ));
        }
        if d < 2 {
            return Err(Error::invalid("sigma", "dimension must be at least 2"));
        }
        check_dim(d, factor_names.len())?;
        check_finite(sigma.as_slice(), "covariance matrix")?;
        if let Family::StudentT { nu } = family {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::invalid("nu", format!("must be positive, got {nu}")));
            }
        }
        let scale = sigma.amax();
        for i in 0..d {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::invalid("sigma", format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        // Symmetrize exactly so that downstream products are consistent.
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let chol = cholesky(&sigma)?;
        Ok(Self {
            family,
            sigma,
            chol,
            factor_names,
        })
    }

    /// Gaussian model with default factor names `g, x1, …`.
    pub fn gaussian(sigma: DMatrix<f64>) -> Result<Self> {
        let names = default_factor_names(sigma.nrows());
        Self::new(sigma, Family::Gaussian, names)
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::gaussian(DMatrix::identity(dim, dim))
    }

    /// Same scatter matrix and labels under a different family.
    pub fn with_family(&self, family: Family) -> Result<Self> {
        Self::new(self.sigma.clone(), family, self.factor_names.clone())
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Lower-triangular `L` with `L Lᵀ = Σ`.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn factor_names(&self) -> &[String] {
        &self.factor_names
    }

    fn check(&self, s: &[f64]) -> Result<()> {
        check_dim(self.dim(), s.len())?;
        check_finite(s, "scenario vector")
    }

    /// `y = L⁻¹ s` by forward substitution.
    pub(crate) fn whiten_slice(&self, s: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut y = vec![0.0; d];
        for i in 0..d {
            let v = s[i] - (0..i).map(|k| self.chol[(i, k)] * y[k]).sum::<f64>();
            y[i] = v / self.chol[(i, i)];
        }
        y
    }

    /// `s = L y`.
    pub(crate) fn unwhiten_slice(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..=i).map(|k| self.chol[(i, k)] * y[k]).sum())
            .collect()
    }

    /// `Lᵀ v`, mapping a scenario-space gradient to whitened coordinates.
    pub(crate) fn pullback_gradient(&self, grad_s: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|k| (k..d).map(|i| self.chol[(i, k)] * grad_s[i]).sum())
            .collect()
    }

    pub(crate) fn mahalanobis_sq_slice(&self, s: &[f64]) -> f64 {
        self.whiten_slice(s).iter().map(|v| v * v).sum()
    }

    /// Squared Mahalanobis distance `sᵀ Σ⁻¹ s`.
    pub fn mahalanobis_sq(&self, s: &ScenarioVector) -> Result<f64> {
        self.check(s.as_slice())?;
        Ok(self.mahalanobis_sq_slice(s.as_slice()))
    }

    /// Whitened coordinates `y = L⁻¹ s`.
    pub fn whiten(&self, s: &ScenarioVector) -> Result<Vec<f64>> {
        self.check(s.as_slice())?;
        Ok(self.whiten_slice(s.as_slice()))
    }

    /// Scenario `s = L y` from whitened coordinates.
    pub fn unwhiten(&self, y: &[f64]) -> Result<ScenarioVector> {
        self.check(y)?;
        ScenarioVector::new(self.unwhiten_slice(y))
    }

    /// Negative log-density as a function of the squared distance, constants dropped.
    pub(crate) fn neg_log_density_from_m2(&self, m2: f64) -> f64 {
        match self.family {
            Family::Gaussian => 0.5 * m2,
            Family::StudentT { nu } => 0.5 * (nu + self.dim() as f64) * (m2 / nu).ln_1p(),
        }
    }

    /// Derivative of [`Self::neg_log_density_from_m2`] with respect to `m2`.
    pub(crate) fn neg_log_density_slope(&self, m2: f64) -> f64 {
        match self.family {
            Family::Gaussian => 0.5,
            Family::StudentT { nu } => 0.5 * (nu + self.dim() as f64) / (nu + m2),
        }
    }

    /// Negative log-density up to an additive constant.
    pub fn neg_log_density(&self, s: &ScenarioVector) -> Result<f64> {
        let m2 = self.mahalanobis_sq(s)?;
        Ok(self.neg_log_density_from_m2(m2))
    }

    /// `P(d²(S) ≥ m2)`: χ²_d tail for the Gaussian family and the scaled
    /// Fisher F(d, ν) tail for the Student-t family.
    pub fn tail_probability(&self, m2: f64) -> Result<f64> {
        if !(m2 >= 0.0) {
            return Err(Error::invalid(
                "m2",
                format!("squared distance must be non-negative, got {m2}"),
            ));
        }
        let d = self.dim() as f64;
        match self.family {
            Family::Gaussian => special::chi_squared_sf(d, m2),
            Family::StudentT { nu } => special::fisher_sf(d, nu, m2 / d),
        }
    }

    pub fn plausibility_from_m2(&self, m2: f64) -> Result<PlausibilityScore> {
        let tail_probability = self.tail_probability(m2)?;
        Ok(PlausibilityScore {
            mahalanobis_sq: m2,
            tail_probability,
            rarity: -tail_probability.log10(),
        })
    }

    pub fn plausibility(&self, s: &ScenarioVector) -> Result<PlausibilityScore> {
        self.plausibility_from_m2(self.mahalanobis_sq(s)?)
    }

    /// Quantile of the marginal distribution of the geopolitical coordinate.
    pub fn marginal_g_quantile(&self, p: f64) -> Result<f64> {
        let scale = self.sigma[(0, 0)].sqrt();
        let z = match self.family {
            Family::Gaussian => special::normal_quantile(p)?,
            Family::StudentT { nu } => special::student_t_quantile(nu, p)?,
        };
        Ok(scale * z)
    }
}

pub fn default_factor_names(dim: usize) -> Vec<String> {
    std::iter::once("g".to_string())
        .chain((1..dim).map(|j| format!("x{j}")))
        .collect()
}

/// Ridge handling for [`estimate_covariance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum RidgePolicy {
    /// Add `1e−8 · trace/d` to the diagonal only when the raw estimate is
    /// numerically singular.
    #[default]
    Fallback,
    /// Always add the given value to the diagonal.
    Fixed(f64),
    /// Never regularize.
    None,
}

/// Relative pivot floor below which a sample covariance is treated as singular.
const SINGULAR_PIVOT_RATIO: f64 = 1e-12;

fn well_conditioned(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky(sigma)?;
    for j in 0..sigma.nrows() {
        let ratio = l[(j, j)] * l[(j, j)] / sigma[(j, j)];
        if !(ratio > SINGULAR_PIVOT_RATIO) {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: l[(j, j)] * l[(j, j)],
            });
        }
    }
    Ok(l)
}

/// Centred sample covariance of a `T × d` history, geopolitical column first.
pub fn estimate_covariance(
    history: &DMatrix<f64>,
    factor_names: Vec<String>,
    family: Family,
    ridge: RidgePolicy,
) -> Result<ReferenceModel> {
    let (t, d) = history.shape();
    check_dim(d, factor_names.len())?;
    if t < d + 1 {
        return Err(Error::InsufficientData(format!(
            "need at least {} observations for {d} factors, got {t}",
            d + 1
        )));
    }
    check_finite(history.as_slice(), "history")?;
    let means: Vec<f64> = (0..d).map(|j| history.column(j).mean()).collect();
    let mut sigma = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut acc = 0.0;
            for r in 0..t {
                acc += (history[(r, i)] - means[i]) * (history[(r, j)] - means[j]);
            }
            let v = acc / (t as f64 - 1.0);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    let default_ridge = 1e-8 * sigma.trace() / d as f64;
    let sigma = match ridge {
        RidgePolicy::None => {
            well_conditioned(&sigma)?;
            sigma
        }
        RidgePolicy::Fixed(eps) => {
            if !(eps >= 0.0) {
                return Err(Error::invalid("ridge", format!("must be non-negative, got {eps}")));
            }
            sigma + DMatrix::identity(d, d) * eps
        }
        RidgePolicy::Fallback => match well_conditioned(&sigma) {
            Ok(_) => sigma,
            Err(_) => {
                log::warn!("sample covariance is singular; adding ridge {default_ridge:e}");
                sigma + DMatrix::identity(d, d) * default_ridge
            }
        },
    };
    ReferenceModel::new(sigma, family, factor_names)
}
