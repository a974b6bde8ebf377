//! Sector-level view: exposure-weighted stressed parameters per sector and a
//! sector-granular engine that plugs into the same solver.

use serde::{Deserialize, Serialize};

use crate::capital::{risk_weight, CapitalEvaluation, CapitalModel, CapitalState, PortfolioCapital, RwaMode};
use crate::error::{check_dim, Error, Result};
use crate::loss::{loss_quantile, LossQuantileSpec};
use crate::reference::ScenarioVector;
use crate::transmission::{ExposureRecord, Portfolio, SectorSensitivities, TransmissionOptions};

/// Default effective maturity for sectors that do not state one.
pub const DEFAULT_SECTOR_MATURITY: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorAggregate {
    pub sector_id: String,
    /// Total EAD in the sector.
    pub weight_total: f64,
    pub pd_star: f64,
    pub lgd_star: f64,
    /// `(exposure_id, ω)` with ω = EAD share within the sector.
    pub exposure_weights: Vec<(String, f64)>,
}

/// Exposure-weighted stressed PD and LGD per sector, in sorted sector order.
pub fn aggregate_sectors(portfolio: &Portfolio, s: &ScenarioVector) -> Result<Vec<SectorAggregate>> {
    let params = portfolio.stressed(s)?;
    let mut out = Vec::with_capacity(portfolio.sector_ids().len());
    for (k, id) in portfolio.sector_ids().iter().enumerate() {
        let members: Vec<usize> = (0..params.len())
            .filter(|&i| portfolio.sector_index_of(i) == k)
            .collect();
        let total: f64 = members.iter().map(|&i| portfolio.exposures()[i].ead).sum();
        if members.is_empty() || !(total > 0.0) {
            return Err(Error::EmptySector(id.clone()));
        }
        let mut pd_star = 0.0;
        let mut lgd_star = 0.0;
        let mut weights = Vec::with_capacity(members.len());
        for &i in &members {
            let e = &portfolio.exposures()[i];
            let w = e.ead / total;
            pd_star += w * params[i].0;
            lgd_star += w * params[i].1;
            weights.push((e.exposure_id.clone(), w));
        }
        out.push(SectorAggregate {
            sector_id: id.clone(),
            weight_total: total,
            pd_star,
            lgd_star,
            exposure_weights: weights,
        });
    }
    Ok(out)
}

/// One sector treated as a single pseudo-exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorRecord {
    pub sector_id: String,
    pub ead: f64,
    pub pd0: f64,
    pub lgd0: f64,
    pub rho: f64,
    #[serde(default = "default_maturity")]
    pub maturity: f64,
    pub delta: f64,
    pub eta: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

fn default_maturity() -> f64 {
    DEFAULT_SECTOR_MATURITY
}

/// Portfolio expressed directly at sector granularity.
#[derive(Debug, Clone)]
pub struct SectorPortfolio {
    records: Vec<SectorRecord>,
    portfolio: Portfolio,
}

impl SectorPortfolio {
    pub fn new(records: Vec<SectorRecord>, options: TransmissionOptions) -> Result<Self> {
        let exposures = records
            .iter()
            .map(|r| ExposureRecord {
                exposure_id: r.sector_id.clone(),
                sector_id: r.sector_id.clone(),
                ead: r.ead,
                pd0: r.pd0,
                lgd0: r.lgd0,
                rho: r.rho,
                maturity: r.maturity,
            })
            .collect();
        let sensitivities = records
            .iter()
            .map(|r| SectorSensitivities {
                sector_id: r.sector_id.clone(),
                delta: r.delta,
                eta: r.eta,
                beta: r.beta.clone(),
                gamma: r.gamma.clone(),
            })
            .collect();
        let portfolio = Portfolio::new(exposures, sensitivities, options)?;
        Ok(Self { records, portfolio })
    }

    /// Sector view of a portfolio holding exactly one exposure per sector,
    /// keeping the exposure order.
    pub fn from_single_exposure_portfolio(portfolio: &Portfolio) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        let mut records = Vec::with_capacity(portfolio.exposures().len());
        for e in portfolio.exposures() {
            if !seen.insert(e.sector_id.clone()) {
                return Err(Error::invalid(
                    "portfolio",
                    format!("sector {} holds more than one exposure", e.sector_id),
                ));
            }
            let sens = portfolio.sensitivities_for(e);
            records.push(SectorRecord {
                sector_id: e.sector_id.clone(),
                ead: e.ead,
                pd0: e.pd0,
                lgd0: e.lgd0,
                rho: e.rho,
                maturity: e.maturity,
                delta: sens.delta,
                eta: sens.eta,
                beta: sens.beta.clone(),
                gamma: sens.gamma.clone(),
            });
        }
        if seen.len() != portfolio.sector_ids().len() {
            return Err(Error::EmptySector(
                portfolio
                    .sector_ids()
                    .iter()
                    .find(|id| !seen.contains(*id))
                    .cloned()
                    .unwrap_or_default(),
            ));
        }
        Self::new(records, *portfolio.options())
    }

    pub fn records(&self) -> &[SectorRecord] {
        &self.records
    }

    pub fn dim(&self) -> usize {
        self.portfolio.dim()
    }

    /// The sectors as a one-exposure-per-sector portfolio.
    pub fn as_portfolio(&self) -> &Portfolio {
        &self.portfolio
    }

    fn index_of(&self, sector_id: &str) -> Result<usize> {
        self.records
            .iter()
            .position(|r| r.sector_id == sector_id)
            .ok_or_else(|| Error::invalid("sector_id", format!("unknown sector {sector_id}")))
    }

    /// Stressed `(PD_k, LGD_k)` per sector in record order.
    pub fn stressed(&self, s: &ScenarioVector) -> Result<Vec<(f64, f64)>> {
        self.portfolio.stressed(s)
    }
}

/// Sector-level analogue of the portfolio loss quantile.
pub fn sector_loss_quantile(sectors: &SectorPortfolio, s: &ScenarioVector, spec: &LossQuantileSpec) -> Result<f64> {
    loss_quantile(&sectors.portfolio, s, spec)
}

/// Risk-weight form for one sector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum SectorRiskWeight {
    Full {
        maturity_adjustment: bool,
    },
    /// `alpha + beta · (PD_k(s) − PD_k⁰)`.
    Linear {
        alpha: f64,
        beta: f64,
    },
}

pub fn sector_risk_weight(
    sectors: &SectorPortfolio,
    sector_id: &str,
    s: &ScenarioVector,
    spec: &LossQuantileSpec,
    form: SectorRiskWeight,
) -> Result<f64> {
    check_dim(sectors.dim(), s.dim())?;
    let k = sectors.index_of(sector_id)?;
    let (pd, lgd) = sectors.stressed(s)?[k];
    let e = &sectors.portfolio.exposures()[k];
    Ok(match form {
        SectorRiskWeight::Full { maturity_adjustment } => risk_weight(e, pd, lgd, spec, maturity_adjustment),
        SectorRiskWeight::Linear { alpha, beta } => alpha + beta * (pd - e.pd0),
    })
}

/// Linear risk-weight coefficients tangent to the full risk weight at the
/// baseline: `alpha_k = RW_k(0)`, `beta_k = ∂RW_k/∂PD_k` at `PD_k⁰`.
pub fn baseline_linear_risk_weights(
    sectors: &SectorPortfolio,
    spec: &LossQuantileSpec,
    maturity_adjustment: bool,
) -> Vec<(f64, f64)> {
    let alpha = crate::capital::tangent_alpha(&sectors.portfolio, spec, maturity_adjustment);
    sectors
        .portfolio
        .exposures()
        .iter()
        .zip(alpha)
        .map(|(e, a)| {
            (
                risk_weight(e, e.pd0, lgd_at_baseline(sectors, e), spec, maturity_adjustment),
                a / e.ead,
            )
        })
        .collect()
}

fn lgd_at_baseline(sectors: &SectorPortfolio, e: &ExposureRecord) -> f64 {
    sectors.portfolio.options().lgd_saturation.apply(e.lgd0)
}

/// Capital engine at sector granularity.
#[derive(Debug, Clone)]
pub struct SectorCapital {
    inner: PortfolioCapital,
}

impl SectorCapital {
    /// `state.rwa_mode` may use [`RwaMode::LinearRiskWeight`] with one
    /// `(alpha_k, beta_k)` pair per sector.
    pub fn new(sectors: &SectorPortfolio, state: CapitalState, spec: LossQuantileSpec) -> Result<Self> {
        Ok(Self {
            inner: PortfolioCapital::new(sectors.portfolio.clone(), state, spec)?,
        })
    }

    pub fn with_linear_risk_weights(
        sectors: &SectorPortfolio,
        mut state: CapitalState,
        spec: LossQuantileSpec,
        coefficients: &[(f64, f64)],
    ) -> Result<Self> {
        check_dim(sectors.records.len(), coefficients.len())?;
        state.rwa_mode = RwaMode::LinearRiskWeight {
            intercept: coefficients.iter().map(|c| c.0).collect(),
            slope: coefficients.iter().map(|c| c.1).collect(),
        };
        Self::new(sectors, state, spec)
    }

    pub fn evaluate(&self, s: &ScenarioVector) -> Result<CapitalEvaluation> {
        self.inner.evaluate(s)
    }
}

impl CapitalModel for SectorCapital {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn ratio(&self, s: &[f64]) -> f64 {
        self.inner.ratio(s)
    }

    fn ratio_gradient(&self, s: &[f64]) -> Option<Vec<f64>> {
        self.inner.ratio_gradient(s)
    }

    fn ratio_and_gradient(&self, s: &[f64]) -> (f64, Option<Vec<f64>>) {
        self.inner.ratio_and_gradient(s)
    }

    fn r0(&self) -> f64 {
        self.inner.r0()
    }

    fn r_star(&self) -> f64 {
        self.inner.r_star()
    }

    fn monotonicity_rows(&self) -> Vec<Vec<f64>> {
        self.inner.monotonicity_rows()
    }

    fn monotonicity_violation(&self, s: &[f64]) -> f64 {
        self.inner.monotonicity_violation(s)
    }
}
