//! CET1 capital, risk-weighted assets and the stressed CET1 ratio.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::loss::{conditional_pd, conditional_pd_slope, loss_quantile_slice, LossQuantileSpec};
use crate::reference::ScenarioVector;
use crate::transmission::{ExposureRecord, Portfolio};

/// Default fractional depletion of the baseline ratio (300 bp of a 100% scale).
pub const DEFAULT_DEPLETION: f64 = 0.03;

/// RWA is never allowed below this fraction of `rwa_0`.
pub const RWA_FLOOR_FRACTION: f64 = 1e-6;

/// How risk-weighted assets respond to a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RwaMode {
    /// `Σ EAD_i · RW_i(s)` with the IRB risk-weight function.
    IrbFull,
    /// `RWA₀ + Σ α_i (PD_i(s) − PD_i⁰)`, with `α_i` in currency per unit PD.
    Linear { alpha: Vec<f64> },
    /// `Σ EAD_i (a_i + b_i (PD_i(s) − PD_i⁰))`: a risk weight linear in PD.
    LinearRiskWeight { intercept: Vec<f64>, slope: Vec<f64> },
    /// `RWA₀` for every scenario.
    #[default]
    Constant,
}

/// Which losses are charged against CET1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossBasis {
    /// `CET1₀ − L_q(s)`.
    Absolute,
    /// `CET1₀ − (L_q(s) − L_q(0))`, so that the ratio at `s = 0` is `R₀`.
    #[default]
    Incremental,
}

/// Balance-sheet starting point and capital threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapitalState {
    pub cet1_0: f64,
    pub rwa_0: f64,
    pub depletion: f64,
    /// Explicit threshold; overrides `depletion` when set.
    pub r_star_override: Option<f64>,
    pub rwa_mode: RwaMode,
    pub maturity_adjustment: bool,
    /// Linear loadings of non-credit P&L on the scenario (length `d`).
    pub pnl_noncredit: Vec<f64>,
    pub loss_basis: LossBasis,
}

impl CapitalState {
    /// State with default depletion, constant RWA, incremental losses and no
    /// non-credit P&L.
    pub fn new(cet1_0: f64, rwa_0: f64, dim: usize) -> Self {
        Self {
            cet1_0,
            rwa_0,
            depletion: DEFAULT_DEPLETION,
            r_star_override: None,
            rwa_mode: RwaMode::Constant,
            maturity_adjustment: true,
            pnl_noncredit: vec![0.0; dim],
            loss_basis: LossBasis::Incremental,
        }
    }

    pub fn r0(&self) -> f64 {
        self.cet1_0 / self.rwa_0
    }

    pub fn r_star(&self) -> f64 {
        self.r_star_override
            .unwrap_or_else(|| self.r0() * (1.0 - self.depletion))
    }

    pub fn validate(&self, n_exposures: usize, dim: usize) -> Result<()> {
        if !(self.cet1_0 > 0.0 && self.cet1_0.is_finite()) {
            return Err(Error::invalid(
                "cet1_0",
                format!("must be positive, got {}", self.cet1_0),
            ));
        }
        if !(self.rwa_0 > 0.0 && self.rwa_0.is_finite()) {
            return Err(Error::invalid("rwa_0", format!("must be positive, got {}", self.rwa_0)));
        }
        if !(self.depletion > 0.0 && self.depletion < 1.0) {
            return Err(Error::invalid(
                "depletion",
                format!("must lie in (0, 1), got {}", self.depletion),
            ));
        }
        let r_star = self.r_star();
        if !(r_star > 0.0 && r_star < self.r0()) {
            return Err(Error::invalid(
                "r_star",
                format!("threshold {r_star} must lie in (0, R0 = {})", self.r0()),
            ));
        }
        check_dim(dim, self.pnl_noncredit.len())?;
        check_finite(&self.pnl_noncredit, "non-credit P&L loadings")?;
        match &self.rwa_mode {
            RwaMode::Linear { alpha } => {
                check_dim(n_exposures, alpha.len())?;
                check_finite(alpha, "alpha")?;
            }
            RwaMode::LinearRiskWeight { intercept, slope } => {
                check_dim(n_exposures, intercept.len())?;
                check_dim(n_exposures, slope.len())?;
                check_finite(intercept, "risk-weight intercepts")?;
                check_finite(slope, "risk-weight slopes")?;
            }
            RwaMode::IrbFull | RwaMode::Constant => {}
        }
        Ok(())
    }
}

fn b_coefficient_root(pd: f64) -> f64 {
    0.11852 - 0.05478 * pd.ln()
}

/// Basel maturity adjustment `γ(M) = (1 + (M − 2.5) b) / (1 − 1.5 b)`.
pub fn maturity_factor(pd: f64, maturity: f64) -> f64 {
    let b = b_coefficient_root(pd).powi(2);
    (1.0 + (maturity - 2.5) * b) / (1.0 - 1.5 * b)
}

fn maturity_factor_slope(pd: f64, maturity: f64) -> f64 {
    let root = b_coefficient_root(pd);
    let b = root * root;
    let db = 2.0 * root * (-0.05478 / pd);
    (maturity - 1.0) / (1.0 - 1.5 * b).powi(2) * db
}

/// IRB risk weight `LGD · [C(PD) − PD] · γ(M)`; zero when `pd ≤ 0`.
pub fn risk_weight(
    exposure: &ExposureRecord,
    pd: f64,
    lgd: f64,
    spec: &LossQuantileSpec,
    maturity_adjustment: bool,
) -> f64 {
    risk_weight_parts(exposure, pd, lgd, spec.z(), maturity_adjustment).0
}

/// Risk weight with its partial derivatives in PD and LGD.
fn risk_weight_parts(e: &ExposureRecord, pd: f64, lgd: f64, zq: f64, maturity: bool) -> (f64, f64, f64) {
    if pd <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let c = conditional_pd(pd, e.rho, zq);
    let bracket = c - pd;
    let dbracket = conditional_pd_slope(pd, e.rho, zq) - 1.0;
    let (gamma, dgamma) = if maturity {
        (maturity_factor(pd, e.maturity), maturity_factor_slope(pd, e.maturity))
    } else {
        (1.0, 0.0)
    };
    let rw = lgd * bracket * gamma;
    let d_pd = lgd * (dbracket * gamma + bracket * dgamma);
    (rw, d_pd, bracket * gamma)
}

/// `α_i = EAD_i · ∂RW_i/∂PD_i` at the baseline: the Linear-mode coefficients
/// tangent to the full IRB RWA at `s = 0`.
pub fn tangent_alpha(portfolio: &Portfolio, spec: &LossQuantileSpec, maturity_adjustment: bool) -> Vec<f64> {
    let zero = vec![0.0; portfolio.dim()];
    let zq = spec.z();
    portfolio
        .exposures()
        .iter()
        .zip(portfolio.stressed_params(&zero))
        .map(|(e, p)| e.ead * risk_weight_parts(e, p.pd, p.lgd, zq, maturity_adjustment).1)
        .collect()
}

/// Anything that maps a scenario to a CET1 ratio with a threshold.
///
/// The solver and the scenario-set builders only see this interface, so
/// synthetic maps, exposure-level and sector-level engines are interchangeable.
pub trait CapitalModel: Sync {
    fn dim(&self) -> usize;

    fn ratio(&self, s: &[f64]) -> f64;

    /// Analytic gradient of the ratio, if available.
    fn ratio_gradient(&self, _s: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Ratio and gradient from one evaluation where the model can share work.
    fn ratio_and_gradient(&self, s: &[f64]) -> (f64, Option<Vec<f64>>) {
        (self.ratio(s), self.ratio_gradient(s))
    }

    /// Baseline ratio.
    fn r0(&self) -> f64;

    fn r_star(&self) -> f64;

    /// Rows `a` of the linear monotonicity constraints `a · s ≥ 0`.
    fn monotonicity_rows(&self) -> Vec<Vec<f64>> {
        Vec::new()
    }

    fn monotonicity_violation(&self, _s: &[f64]) -> f64 {
        0.0
    }

    /// `R(s) ≤ R*`, boundary inclusive.
    fn breach(&self, s: &[f64]) -> bool {
        self.ratio(s) <= self.r_star()
    }
}

/// Ratio affine in the scenario: `R(s) = r0 + slope · s`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCapital {
    pub r0: f64,
    pub slope: Vec<f64>,
    pub r_star: f64,
}

impl AffineCapital {
    pub fn new(r0: f64, slope: Vec<f64>, r_star: f64) -> Self {
        Self { r0, slope, r_star }
    }
}

impl CapitalModel for AffineCapital {
    fn dim(&self) -> usize {
        self.slope.len()
    }

    fn ratio(&self, s: &[f64]) -> f64 {
        self.r0 + self.slope.iter().zip(s).map(|(a, b)| a * b).sum::<f64>()
    }

    fn ratio_gradient(&self, _s: &[f64]) -> Option<Vec<f64>> {
        Some(self.slope.clone())
    }

    fn r0(&self) -> f64 {
        self.r0
    }

    fn r_star(&self) -> f64 {
        self.r_star
    }
}

/// Every intermediate quantity of one ratio evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapitalEvaluation {
    pub loss_quantile: f64,
    pub cet1: f64,
    pub rwa: f64,
    /// RWA fell below the floor and was clamped.
    pub rwa_clamped: bool,
    pub ratio: f64,
    pub breach: bool,
}

/// Capital engine over an exposure-level portfolio.
#[derive(Debug, Clone)]
pub struct PortfolioCapital {
    portfolio: Portfolio,
    state: CapitalState,
    spec: LossQuantileSpec,
    zq: f64,
    baseline_loss: f64,
}

impl PortfolioCapital {
    pub fn new(portfolio: Portfolio, state: CapitalState, spec: LossQuantileSpec) -> Result<Self> {
        spec.validate()?;
        state.validate(portfolio.exposures().len(), portfolio.dim())?;
        let zq = spec.z();
        let baseline_loss = loss_quantile_slice(&portfolio, &vec![0.0; portfolio.dim()], zq);
        let engine = Self {
            portfolio,
            state,
            spec,
            zq,
            baseline_loss,
        };
        let base = engine.evaluate_slice(&vec![0.0; engine.portfolio.dim()]);
        if !base.ratio.is_finite() {
            return Err(Error::NonFinite("baseline CET1 ratio"));
        }
        if matches!(engine.state.rwa_mode, RwaMode::IrbFull) {
            let rel = (base.rwa - engine.state.rwa_0).abs() / engine.state.rwa_0;
            if rel > 1e-6 {
                log::warn!(
                    "IRB risk-weighted assets at s = 0 are {:.6e}, not rwa_0 = {:.6e}; the baseline ratio differs from R0",
                    base.rwa,
                    engine.state.rwa_0
                );
            }
        }
        Ok(engine)
    }

    pub fn portfolio(&self) -> &Portfolio {
        &self.portfolio
    }

    pub fn state(&self) -> &CapitalState {
        &self.state
    }

    pub fn spec(&self) -> &LossQuantileSpec {
        &self.spec
    }

    /// `L_q(0)`.
    pub fn baseline_loss(&self) -> f64 {
        self.baseline_loss
    }

    pub fn evaluate(&self, s: &ScenarioVector) -> Result<CapitalEvaluation> {
        check_dim(self.portfolio.dim(), s.dim())?;
        let ev = self.evaluate_slice(s.as_slice());
        if !ev.ratio.is_finite() {
            return Err(Error::NonFinite("CET1 ratio"));
        }
        Ok(ev)
    }

    pub fn loss_quantile(&self, s: &ScenarioVector) -> Result<f64> {
        Ok(self.evaluate(s)?.loss_quantile)
    }

    pub fn cet1_stressed(&self, s: &ScenarioVector) -> Result<f64> {
        Ok(self.evaluate(s)?.cet1)
    }

    pub fn rwa_stressed(&self, s: &ScenarioVector) -> Result<f64> {
        Ok(self.evaluate(s)?.rwa)
    }

    pub fn cet1_ratio(&self, s: &ScenarioVector) -> Result<f64> {
        Ok(self.evaluate(s)?.ratio)
    }

    fn pnl(&self, s: &[f64]) -> f64 {
        self.state.pnl_noncredit.iter().zip(s).map(|(a, b)| a * b).sum()
    }

    fn charged_loss(&self, loss: f64) -> f64 {
        match self.state.loss_basis {
            LossBasis::Absolute => loss,
            LossBasis::Incremental => loss - self.baseline_loss,
        }
    }

    fn raw_rwa(&self, s: &[f64]) -> f64 {
        let st = &self.state;
        match &st.rwa_mode {
            RwaMode::Constant => st.rwa_0,
            RwaMode::IrbFull => self
                .portfolio
                .exposures()
                .iter()
                .zip(self.portfolio.stressed_params(s))
                .map(|(e, p)| e.ead * risk_weight_parts(e, p.pd, p.lgd, self.zq, st.maturity_adjustment).0)
                .sum(),
            RwaMode::Linear { alpha } => {
                st.rwa_0
                    + self
                        .portfolio
                        .exposures()
                        .iter()
                        .zip(self.portfolio.stressed_params(s))
                        .zip(alpha)
                        .map(|((e, p), a)| a * (p.pd - e.pd0))
                        .sum::<f64>()
            }
            RwaMode::LinearRiskWeight { intercept, slope } => self
                .portfolio
                .exposures()
                .iter()
                .zip(self.portfolio.stressed_params(s))
                .zip(intercept.iter().zip(slope))
                .map(|((e, p), (a, b))| e.ead * (a + b * (p.pd - e.pd0)))
                .sum(),
        }
    }

    pub(crate) fn evaluate_slice(&self, s: &[f64]) -> CapitalEvaluation {
        let loss = loss_quantile_slice(&self.portfolio, s, self.zq);
        let cet1 = self.state.cet1_0 - self.charged_loss(loss) + self.pnl(s);
        let raw = self.raw_rwa(s);
        let floor = RWA_FLOOR_FRACTION * self.state.rwa_0;
        let rwa_clamped = !(raw >= floor);
        let rwa = if rwa_clamped { floor } else { raw };
        let ratio = cet1 / rwa;
        CapitalEvaluation {
            loss_quantile: loss,
            cet1,
            rwa,
            rwa_clamped,
            ratio,
            breach: ratio <= self.state.r_star(),
        }
    }

    fn ratio_and_gradient_slice(&self, s: &[f64]) -> (f64, Vec<f64>) {
        let st = &self.state;
        let n_sectors = self.portfolio.sector_ids().len();
        // Per-sector sensitivities of L and RWA to the PD index z_k and LGD shift u_k.
        let mut dl_dz = vec![0.0; n_sectors];
        let mut dl_du = vec![0.0; n_sectors];
        let mut dr_dz = vec![0.0; n_sectors];
        let mut dr_du = vec![0.0; n_sectors];
        let mut loss = 0.0;
        let mut rwa_sum = 0.0;
        for (i, (e, p)) in self
            .portfolio
            .exposures()
            .iter()
            .zip(self.portfolio.stressed_params(s))
            .enumerate()
        {
            let k = self.portfolio.sector_index_of(i);
            let c = conditional_pd(p.pd, e.rho, self.zq);
            loss += e.ead * p.lgd * c;
            dl_dz[k] += e.ead * p.lgd * conditional_pd_slope(p.pd, e.rho, self.zq) * p.dpd;
            dl_du[k] += e.ead * c * p.dlgd;
            match &st.rwa_mode {
                RwaMode::Constant => {}
                RwaMode::IrbFull => {
                    let (rw, d_pd, d_lgd) = risk_weight_parts(e, p.pd, p.lgd, self.zq, st.maturity_adjustment);
                    rwa_sum += e.ead * rw;
                    dr_dz[k] += e.ead * d_pd * p.dpd;
                    dr_du[k] += e.ead * d_lgd * p.dlgd;
                }
                RwaMode::Linear { alpha } => {
                    rwa_sum += alpha[i] * (p.pd - e.pd0);
                    dr_dz[k] += alpha[i] * p.dpd;
                }
                RwaMode::LinearRiskWeight { intercept, slope } => {
                    rwa_sum += e.ead * (intercept[i] + slope[i] * (p.pd - e.pd0));
                    dr_dz[k] += e.ead * slope[i] * p.dpd;
                }
            }
        }
        let raw_rwa = match st.rwa_mode {
            RwaMode::Constant => st.rwa_0,
            RwaMode::Linear { .. } => st.rwa_0 + rwa_sum,
            _ => rwa_sum,
        };
        let cet1 = st.cet1_0 - self.charged_loss(loss) + self.pnl(s);
        let floor = RWA_FLOOR_FRACTION * st.rwa_0;
        let clamped = !(raw_rwa >= floor);
        let rwa = if clamped { floor } else { raw_rwa };

        let d = self.portfolio.dim();
        let mut grad = vec![0.0; d];
        for (k, id) in self.portfolio.sector_ids().iter().enumerate() {
            let sens = &self.portfolio.sectors()[id];
            let drwa_z = if clamped { 0.0 } else { dr_dz[k] };
            let drwa_u = if clamped { 0.0 } else { dr_du[k] };
            // dR = dCET1/RWA − CET1·dRWA/RWA², with dCET1 = −dL.
            let cz = -dl_dz[k] / rwa - cet1 * drwa_z / (rwa * rwa);
            let cu = -dl_du[k] / rwa - cet1 * drwa_u / (rwa * rwa);
            for (j, (a, b)) in sens.pd_row().iter().zip(sens.lgd_row()).enumerate() {
                grad[j] += cz * a + cu * b;
            }
        }
        for (g, p) in grad.iter_mut().zip(&st.pnl_noncredit) {
            *g += p / rwa;
        }
        (cet1 / rwa, grad)
    }
}

impl CapitalModel for PortfolioCapital {
    fn dim(&self) -> usize {
        self.portfolio.dim()
    }

    fn ratio(&self, s: &[f64]) -> f64 {
        self.evaluate_slice(s).ratio
    }

    fn ratio_gradient(&self, s: &[f64]) -> Option<Vec<f64>> {
        Some(self.ratio_and_gradient_slice(s).1)
    }

    fn ratio_and_gradient(&self, s: &[f64]) -> (f64, Option<Vec<f64>>) {
        let (r, g) = self.ratio_and_gradient_slice(s);
        (r, Some(g))
    }

    fn r0(&self) -> f64 {
        self.state.r0()
    }

    fn r_star(&self) -> f64 {
        self.state.r_star()
    }

    fn monotonicity_rows(&self) -> Vec<Vec<f64>> {
        self.portfolio.monotonicity_rows()
    }

    fn monotonicity_violation(&self, s: &[f64]) -> f64 {
        self.portfolio.monotonicity_violation_slice(s)
    }
}
