//! Transmission of scenarios into exposure-level credit parameters.
//!
//! PDs move through a sector-level logit index `z = βᵀx + δg`; LGDs move
//! affinely, `LGD⁰ + γᵀx + ηg`, and are kept inside the unit interval by a
//! smooth saturation instead of hard truncation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::reference::ScenarioVector;

/// Sector loadings of the PD log-odds and of the LGD on the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorSensitivities {
    pub sector_id: String,
    /// PD log-odds loading on `g`.
    pub delta: f64,
    /// LGD loading on `g`.
    pub eta: f64,
    /// PD log-odds loadings on `x` (length `d − 1`).
    pub beta: Vec<f64>,
    /// LGD loadings on `x` (length `d − 1`).
    pub gamma: Vec<f64>,
}

impl SectorSensitivities {
    pub fn dim(&self) -> usize {
        self.beta.len() + 1
    }

    /// Change in PD log-odds under `s`.
    pub fn pd_index(&self, s: &[f64]) -> f64 {
        self.delta * s[0] + dot(&self.beta, &s[1..])
    }

    /// Additive LGD shift under `s`, before saturation.
    pub fn lgd_shift(&self, s: &[f64]) -> f64 {
        self.eta * s[0] + dot(&self.gamma, &s[1..])
    }

    /// `(δ, β)` as a row over the full scenario vector.
    pub fn pd_row(&self) -> Vec<f64> {
        std::iter::once(self.delta).chain(self.beta.iter().copied()).collect()
    }

    /// `(η, γ)` as a row over the full scenario vector.
    pub fn lgd_row(&self) -> Vec<f64> {
        std::iter::once(self.eta).chain(self.gamma.iter().copied()).collect()
    }

    fn validate(&self, sign_constraints: bool) -> Result<()> {
        if self.beta.len() != self.gamma.len() {
            return Err(Error::invalid(
                "sensitivities",
                format!(
                    "sector {}: beta has {} entries but gamma has {}",
                    self.sector_id,
                    self.beta.len(),
                    self.gamma.len()
                ),
            ));
        }
        if self.beta.is_empty() {
            return Err(Error::invalid(
                "sensitivities",
                format!(
                    "sector {}: at least one macro-financial loading is required",
                    self.sector_id
                ),
            ));
        }
        check_finite(&self.beta, "beta loadings")?;
        check_finite(&self.gamma, "gamma loadings")?;
        check_finite(&[self.delta, self.eta], "geopolitical loadings")?;
        if sign_constraints && (self.delta < 0.0 || self.eta < 0.0) {
            return Err(Error::invalid(
                "sensitivities",
                format!(
                    "sector {}: sign constraints require delta >= 0 and eta >= 0 (got {}, {})",
                    self.sector_id, self.delta, self.eta
                ),
            ));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// One credit exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRecord {
    pub exposure_id: String,
    pub sector_id: String,
    pub ead: f64,
    pub pd0: f64,
    pub lgd0: f64,
    /// Asset correlation with the systematic factor.
    pub rho: f64,
    /// Effective maturity in years.
    pub maturity: f64,
}

fn open_unit(name: &'static str, id: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            name,
            format!("exposure {id}: must lie in (0, 1), got {v}"),
        ))
    }
}

impl ExposureRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.ead > 0.0 && self.ead.is_finite()) {
            return Err(Error::invalid(
                "ead",
                format!("exposure {}: must be positive, got {}", self.exposure_id, self.ead),
            ));
        }
        open_unit("pd0", &self.exposure_id, self.pd0)?;
        open_unit("lgd0", &self.exposure_id, self.lgd0)?;
        open_unit("rho", &self.exposure_id, self.rho)?;
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(Error::invalid(
                "maturity",
                format!("exposure {}: must be positive, got {}", self.exposure_id, self.maturity),
            ));
        }
        Ok(())
    }
}

/// Smooth, strictly increasing map of ℝ onto `(lo, hi)`.
///
/// Identity on `[lo + width, hi − width]`; beyond each edge the excess is
/// compressed by `width · tanh(excess / width)`, a rescaled logistic that
/// matches value and slope at the joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftClip {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

impl Default for SoftClip {
    fn default() -> Self {
        Self {
            lo: 1e-6,
            hi: 1.0 - 1e-6,
            width: 0.02,
        }
    }
}

impl SoftClip {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo >= 0.0 && self.hi <= 1.0 && self.width > 0.0 && self.lo + 2.0 * self.width < self.hi) {
            return Err(Error::invalid(
                "lgd saturation",
                format!("need 0 <= lo, hi <= 1, width > 0 and lo + 2 width < hi (got {self:?})"),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, raw: f64) -> f64 {
        let upper = self.hi - self.width;
        let lower = self.lo + self.width;
        if raw > upper {
            upper + self.width * ((raw - upper) / self.width).tanh()
        } else if raw < lower {
            lower - self.width * ((lower - raw) / self.width).tanh()
        } else {
            raw
        }
    }

    pub fn derivative(&self, raw: f64) -> f64 {
        let upper = self.hi - self.width;
        let lower = self.lo + self.width;
        let sech2 = |t: f64| {
            let c = t.cosh();
            1.0 / (c * c)
        };
        if raw > upper {
            sech2((raw - upper) / self.width)
        } else if raw < lower {
            sech2((lower - raw) / self.width)
        } else {
            1.0
        }
    }
}

/// PD from the baseline PD and a log-odds shift, without overflow for large |z|.
pub(crate) fn pd_from_index(pd0: f64, z: f64) -> f64 {
    if z == 0.0 {
        pd0
    } else if z < 0.0 {
        let e = z.exp();
        pd0 * e / (1.0 - pd0 + pd0 * e)
    } else {
        pd0 / ((1.0 - pd0) * (-z).exp() + pd0)
    }
}

/// Stressed PD of an exposure under `s`.
pub fn stressed_pd(exposure: &ExposureRecord, sens: &SectorSensitivities, s: &ScenarioVector) -> Result<f64> {
    check_dim(sens.dim(), s.dim())?;
    let z = sens.pd_index(s.as_slice());
    if !z.is_finite() {
        return Err(Error::NonFinite("PD log-odds index"));
    }
    Ok(pd_from_index(exposure.pd0, z))
}

/// Stressed LGD of an exposure under `s`, after smooth saturation.
pub fn stressed_lgd(
    exposure: &ExposureRecord,
    sens: &SectorSensitivities,
    s: &ScenarioVector,
    clip: &SoftClip,
) -> Result<f64> {
    check_dim(sens.dim(), s.dim())?;
    Ok(clip.apply(exposure.lgd0 + sens.lgd_shift(s.as_slice())))
}

/// Options controlling how a portfolio maps scenarios into credit parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmissionOptions {
    /// Require `delta >= 0` and `eta >= 0` for every sector.
    pub sign_constraints: bool,
    pub lgd_saturation: SoftClip,
}

impl Default for TransmissionOptions {
    fn default() -> Self {
        Self {
            sign_constraints: true,
            lgd_saturation: SoftClip::default(),
        }
    }
}

/// Stressed parameters of one exposure together with their slopes with
/// respect to the sector indices.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StressedParams {
    pub pd: f64,
    pub lgd: f64,
    /// dPD/dz
    pub dpd: f64,
    /// dLGD/d(shift)
    pub dlgd: f64,
}

/// Exposure-level portfolio with sector loadings.
#[derive(Debug, Clone)]
pub struct Portfolio {
    exposures: Vec<ExposureRecord>,
    sectors: BTreeMap<String, SectorSensitivities>,
    options: TransmissionOptions,
    /// Sector of each exposure as an index into `sector_order`.
    sector_of: Vec<usize>,
    sector_order: Vec<String>,
    dim: usize,
}

impl Portfolio {
    pub fn new(
        exposures: Vec<ExposureRecord>,
        sectors: Vec<SectorSensitivities>,
        options: TransmissionOptions,
    ) -> Result<Self> {
        options.lgd_saturation.validate()?;
        if exposures.is_empty() {
            return Err(Error::invalid("portfolio", "no exposures"));
        }
        let mut by_id = BTreeMap::new();
        let mut dim = None;
        for sens in sectors {
            sens.validate(options.sign_constraints)?;
            match dim {
                None => dim = Some(sens.dim()),
                Some(d) => check_dim(d, sens.dim())?,
            }
            if by_id.contains_key(&sens.sector_id) {
                return Err(Error::invalid(
                    "sensitivities",
                    format!("duplicate sector {}", sens.sector_id),
                ));
            }
            by_id.insert(sens.sector_id.clone(), sens);
        }
        let dim = dim.ok_or_else(|| Error::invalid("sensitivities", "no sectors"))?;
        let sector_order: Vec<String> = by_id.keys().cloned().collect();
        let mut sector_of = Vec::with_capacity(exposures.len());
        for e in &exposures {
            e.validate()?;
            let idx = sector_order.binary_search(&e.sector_id).map_err(|_| {
                Error::invalid(
                    "portfolio",
                    format!("exposure {} refers to unknown sector {}", e.exposure_id, e.sector_id),
                )
            })?;
            sector_of.push(idx);
        }
        Ok(Self {
            exposures,
            sectors: by_id,
            options,
            sector_of,
            sector_order,
            dim,
        })
    }

    /// Scenario dimension `d` implied by the loadings.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn exposures(&self) -> &[ExposureRecord] {
        &self.exposures
    }

    pub fn sectors(&self) -> &BTreeMap<String, SectorSensitivities> {
        &self.sectors
    }

    pub fn options(&self) -> &TransmissionOptions {
        &self.options
    }

    pub fn total_ead(&self) -> f64 {
        self.exposures.iter().map(|e| e.ead).sum()
    }

    pub fn sensitivities_for(&self, exposure: &ExposureRecord) -> &SectorSensitivities {
        &self.sectors[&exposure.sector_id]
    }

    /// Sector ids in sorted order.
    pub fn sector_ids(&self) -> &[String] {
        &self.sector_order
    }

    pub(crate) fn sector_index_of(&self, exposure: usize) -> usize {
        self.sector_of[exposure]
    }

    /// Per-sector `(z, lgd_shift)` under `s`, in `sector_ids()` order.
    pub(crate) fn sector_shocks(&self, s: &[f64]) -> Vec<(f64, f64)> {
        self.sector_order
            .iter()
            .map(|id| {
                let sens = &self.sectors[id];
                (sens.pd_index(s), sens.lgd_shift(s))
            })
            .collect()
    }

    /// Stressed PD and LGD of every exposure, with slopes.
    pub(crate) fn stressed_params(&self, s: &[f64]) -> Vec<StressedParams> {
        let shocks = self.sector_shocks(s);
        let clip = &self.options.lgd_saturation;
        self.exposures
            .iter()
            .zip(&self.sector_of)
            .map(|(e, &k)| {
                let (z, shift) = shocks[k];
                let pd = pd_from_index(e.pd0, z);
                let raw = e.lgd0 + shift;
                StressedParams {
                    pd,
                    lgd: clip.apply(raw),
                    dpd: pd * (1.0 - pd),
                    dlgd: clip.derivative(raw),
                }
            })
            .collect()
    }

    /// Stressed `(PD, LGD)` for each exposure.
    pub fn stressed(&self, s: &ScenarioVector) -> Result<Vec<(f64, f64)>> {
        check_dim(self.dim, s.dim())?;
        let params = self.stressed_params(s.as_slice());
        if params.iter().any(|p| !p.pd.is_finite() || !p.lgd.is_finite()) {
            return Err(Error::NonFinite("stressed credit parameters"));
        }
        Ok(params.into_iter().map(|p| (p.pd, p.lgd)).collect())
    }

    /// Worst improvement in credit quality under `s`:
    /// `max_i max(PD⁰ − PD(s), LGD(0) − LGD(s), 0)`.
    ///
    /// The LGD reference is the saturated baseline, which equals `LGD⁰`
    /// whenever `LGD⁰` lies in the identity region of the saturation.
    pub fn monotonicity_violation(&self, s: &ScenarioVector) -> Result<f64> {
        check_dim(self.dim, s.dim())?;
        Ok(self.monotonicity_violation_slice(s.as_slice()))
    }

    pub(crate) fn monotonicity_violation_slice(&self, s: &[f64]) -> f64 {
        let clip = &self.options.lgd_saturation;
        let shocks = self.sector_shocks(s);
        // Only negative indices can lower a parameter; keying on the sign keeps
        // rounding in the PD formula from reporting spurious violations.
        self.exposures
            .iter()
            .zip(&self.sector_of)
            .map(|(e, &k)| {
                let (z, shift) = shocks[k];
                let pd_drop = if z < 0.0 { e.pd0 - pd_from_index(e.pd0, z) } else { 0.0 };
                let lgd_drop = if shift < 0.0 {
                    clip.apply(e.lgd0) - clip.apply(e.lgd0 + shift)
                } else {
                    0.0
                };
                pd_drop.max(lgd_drop).max(0.0)
            })
            .fold(0.0, f64::max)
    }

    /// Rows `a` such that the monotonicity constraints are `a · s ≥ 0`.
    ///
    /// PD is strictly increasing in its sector index and the saturated LGD in
    /// its shift, so "no exposure improves" is exactly "every sector index and
    /// every sector LGD shift is non-negative". Identically-zero rows are dropped.
    pub fn monotonicity_rows(&self) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        for sens in self.sectors.values() {
            for row in [sens.pd_row(), sens.lgd_row()] {
                if row.iter().any(|v| *v != 0.0) && !rows.contains(&row) {
                    rows.push(row);
                }
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exposure(pd0: f64, lgd0: f64) -> ExposureRecord {
        ExposureRecord {
            exposure_id: "e1".into(),
            sector_id: "s1".into(),
            ead: 100.0,
            pd0,
            lgd0,
            rho: 0.2,
            maturity: 2.5,
        }
    }

    fn sens(delta: f64, eta: f64, beta: f64, gamma: f64) -> SectorSensitivities {
        SectorSensitivities {
            sector_id: "s1".into(),
            delta,
            eta,
            beta: vec![beta],
            gamma: vec![gamma],
        }
    }

    fn sv(v: &[f64]) -> ScenarioVector {
        ScenarioVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn pd_examples() {
        let e = exposure(0.01, 0.4);
        let k = sens(0.5, 0.0, 0.3, 0.0);
        assert_eq!(stressed_pd(&e, &k, &sv(&[0.0, 0.0])).unwrap(), 0.01);
        let pd = stressed_pd(&e, &k, &sv(&[1.0, 0.0])).unwrap();
        let e05 = 0.5f64.exp();
        assert!((pd - 0.01 * e05 / (0.99 + 0.01 * e05)).abs() < 1e-16);
        assert!((pd - 0.016_380_946).abs() < 1e-9);
        let hi = stressed_pd(&e, &sens(1.0, 0.0, 0.0, 0.0), &sv(&[800.0, 0.0])).unwrap();
        let lo = stressed_pd(&e, &sens(1.0, 0.0, 0.0, 0.0), &sv(&[-800.0, 0.0])).unwrap();
        assert_eq!(hi, 1.0);
        assert_eq!(lo, 0.0);
        let near = stressed_pd(&e, &sens(1.0, 0.0, 0.0, 0.0), &sv(&[40.0, 0.0])).unwrap();
        assert!(near < 1.0 && near > 1.0 - 1e-12);
    }

    #[test]
    fn non_finite_index_is_an_error() {
        let e = exposure(0.01, 0.4);
        let k = sens(1e308, 0.0, 0.0, 0.0);
        assert!(matches!(
            stressed_pd(&e, &k, &sv(&[1e10, 0.0])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn lgd_examples() {
        let clip = SoftClip::default();
        let e = exposure(0.01, 0.4);
        let k = sens(0.0, 0.1, 0.0, 0.0);
        assert_eq!(stressed_lgd(&e, &k, &sv(&[0.0, 0.0]), &clip).unwrap(), 0.4);
        let v = stressed_lgd(&e, &k, &sv(&[2.0, 0.0]), &clip).unwrap();
        assert!((v - 0.6).abs() < 1e-9);
        let sat = clip.apply(1.2);
        assert!(sat < 1.0 && sat > 0.97);
        let low = clip.apply(-0.5);
        assert!(low > 0.0 && low < 0.03);
    }

    #[test]
    fn softclip_identity_region_and_smoothness() {
        let clip = SoftClip::default();
        let lo = clip.lo + clip.width;
        let hi = clip.hi - clip.width;
        for i in 0..=1000 {
            let raw = lo + (hi - lo) * i as f64 / 1000.0;
            assert!((clip.apply(raw) - raw).abs() <= 1e-9);
        }
        // Value and slope continuity at both joints.
        for joint in [lo, hi] {
            let h = 1e-9;
            assert!((clip.apply(joint + h) - clip.apply(joint - h) - 2.0 * h).abs() < 1e-15);
            assert!((clip.derivative(joint + h) - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softclip_bounded_and_increasing(raw in -50.0f64..50.0, step in 1e-6f64..1.0) {
            let clip = SoftClip::default();
            let v = clip.apply(raw);
            prop_assert!(v > 0.0 && v < 1.0);
            if (raw - 0.5).abs() < 0.6 {
                prop_assert!(clip.derivative(raw) > 0.0);
                prop_assert!(clip.apply(raw + step) > v);
            } else {
                prop_assert!(clip.apply(raw + step) >= v);
            }
        }

        #[test]
        fn pd_increasing_in_g_and_x(
            pd0 in 0.001f64..0.3,
            delta in 0.01f64..2.0,
            beta in 0.01f64..2.0,
            g in -3.0f64..3.0,
            x in -3.0f64..3.0,
        ) {
            let e = exposure(pd0, 0.4);
            let k = sens(delta, 0.0, beta, 0.0);
            let h = 1e-4;
            let base = stressed_pd(&e, &k, &sv(&[g, x])).unwrap();
            prop_assert!(base > 0.0 && base < 1.0);
            prop_assert!(stressed_pd(&e, &k, &sv(&[g + h, x])).unwrap() > base);
            prop_assert!(stressed_pd(&e, &k, &sv(&[g, x + h])).unwrap() > base);
        }

        #[test]
        fn analytic_slopes_match_central_differences(
            pd0 in 0.001f64..0.3,
            lgd0 in 0.05f64..0.95,
            z in -3.0f64..3.0,
            shift in -0.5f64..0.5,
        ) {
            let h = 1e-5;
            let pd = |z: f64| pd_from_index(pd0, z);
            let fd = (pd(z + h) - pd(z - h)) / (2.0 * h);
            let p = pd(z);
            prop_assert!((fd - p * (1.0 - p)).abs() < 1e-6);
            let clip = SoftClip::default();
            let raw = lgd0 + shift;
            let fd = (clip.apply(raw + h) - clip.apply(raw - h)) / (2.0 * h);
            prop_assert!((fd - clip.derivative(raw)).abs() < 1e-6);
        }
    }

    fn two_sector_portfolio(sign: bool, delta: f64) -> Result<Portfolio> {
        let exposures = vec![
            ExposureRecord {
                exposure_id: "a".into(),
                sector_id: "energy".into(),
                ..exposure(0.02, 0.45)
            },
            ExposureRecord {
                exposure_id: "b".into(),
                sector_id: "defence".into(),
                ..exposure(0.01, 0.3)
            },
        ];
        let sectors = vec![
            SectorSensitivities {
                sector_id: "energy".into(),
                ..sens(0.4, 0.05, 0.2, 0.02)
            },
            SectorSensitivities {
                sector_id: "defence".into(),
                ..sens(delta, 0.0, 0.1, 0.0)
            },
        ];
        Portfolio::new(
            exposures,
            sectors,
            TransmissionOptions {
                sign_constraints: sign,
                ..Default::default()
            },
        )
    }

    #[test]
    fn monotonicity_examples() {
        let p = two_sector_portfolio(true, 0.3).unwrap();
        assert_eq!(p.monotonicity_violation(&sv(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(p.monotonicity_violation(&sv(&[1.5, 0.7])).unwrap(), 0.0);
        assert!(p.monotonicity_violation(&sv(&[-1.0, 0.0])).unwrap() > 0.0);
    }

    #[test]
    fn monotonicity_rows_agree_with_violation() {
        let p = two_sector_portfolio(false, -0.2).unwrap();
        let rows = p.monotonicity_rows();
        assert_eq!(rows.len(), 3);
        for (g, x) in [(1.0, 0.0), (0.5, 2.0), (2.0, 1.0), (-0.5, 1.0), (0.1, -0.1)] {
            let s = sv(&[g, x]);
            let rows_ok = rows.iter().all(|r| r[0] * g + r[1] * x >= 0.0);
            let violation = p.monotonicity_violation(&s).unwrap();
            assert_eq!(rows_ok, violation == 0.0, "s=({g},{x})");
        }
    }

    #[test]
    fn portfolio_validation() {
        assert!(two_sector_portfolio(true, -0.2).is_err());
        assert!(two_sector_portfolio(false, -0.2).is_ok());
        let bad = vec![ExposureRecord {
            sector_id: "missing".into(),
            ..exposure(0.02, 0.4)
        }];
        assert!(Portfolio::new(bad, vec![sens(0.1, 0.0, 0.1, 0.0)], Default::default()).is_err());
        let bad_pd = vec![exposure(1.0, 0.4)];
        assert!(Portfolio::new(bad_pd, vec![sens(0.1, 0.0, 0.1, 0.0)], Default::default()).is_err());
        let mismatched = SectorSensitivities {
            beta: vec![0.1, 0.2],
            ..sens(0.1, 0.0, 0.1, 0.0)
        };
        assert!(Portfolio::new(vec![exposure(0.02, 0.4)], vec![mismatched], Default::default()).is_err());
    }
}
