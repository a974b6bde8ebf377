//! Portfolio tail loss under a scenario.
//!
//! The analytic quantile applies the one-factor asymptotic approximation
//! exposure by exposure. The Monte Carlo route simulates the latent-factor
//! default model directly and is used to quantify the approximation error.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::reference::ScenarioVector;
use crate::special::{normal_cdf, normal_quantile, probit};
use crate::transmission::Portfolio;

/// Confidence level of the loss quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossQuantileSpec {
    pub q: f64,
}

impl Default for LossQuantileSpec {
    fn default() -> Self {
        Self { q: 0.999 }
    }
}

impl LossQuantileSpec {
    pub fn new(q: f64) -> Result<Self> {
        let spec = Self { q };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        normal_quantile(self.q)
            .map(|_| ())
            .map_err(|_| Error::invalid("q", format!("confidence level must lie in (0, 1), got {}", self.q)))
    }

    /// `Φ⁻¹(q)`.
    pub fn z(&self) -> f64 {
        probit(self.q)
    }
}

/// Argument of Φ in the conditional default probability.
fn conditional_argument(pd: f64, rho: f64, zq: f64) -> (f64, f64) {
    let c = probit(pd);
    ((c + rho.sqrt() * zq) / (1.0 - rho).sqrt(), c)
}

/// Default probability conditional on the systematic factor sitting at its
/// `q`-quantile: `Φ((Φ⁻¹(PD) + √ρ Φ⁻¹(q)) / √(1 − ρ))`.
pub fn conditional_pd(pd: f64, rho: f64, zq: f64) -> f64 {
    let (a, _) = conditional_argument(pd, rho, zq);
    normal_cdf(a)
}

/// `d conditional_pd / d PD`, computed as `exp((c² − a²)/2) / √(1 − ρ)` to
/// stay finite where both densities underflow.
pub(crate) fn conditional_pd_slope(pd: f64, rho: f64, zq: f64) -> f64 {
    let (a, c) = conditional_argument(pd, rho, zq);
    if !a.is_finite() || !c.is_finite() {
        return 0.0;
    }
    (0.5 * (c - a) * (c + a)).exp() / (1.0 - rho).sqrt()
}

/// Analytic `q`-quantile of the portfolio loss under `s`.
pub fn loss_quantile(portfolio: &Portfolio, s: &ScenarioVector, spec: &LossQuantileSpec) -> Result<f64> {
    check_dim(portfolio.dim(), s.dim())?;
    spec.validate()?;
    let value = loss_quantile_slice(portfolio, s.as_slice(), spec.z());
    if !value.is_finite() {
        return Err(Error::NonFinite("loss quantile"));
    }
    Ok(value)
}

pub(crate) fn loss_quantile_slice(portfolio: &Portfolio, s: &[f64], zq: f64) -> f64 {
    portfolio
        .exposures()
        .iter()
        .zip(portfolio.stressed_params(s))
        .map(|(e, p)| e.ead * p.lgd * conditional_pd(p.pd, e.rho, zq))
        .sum()
}

/// Monte Carlo estimate of the loss quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub quantile: f64,
    /// Standard error of the quantile from the order-statistic band
    /// `⌈n q ± √(n q (1 − q))⌉`.
    pub std_error: f64,
    pub mean: f64,
    pub n_sims: usize,
    pub seed: u64,
}

/// Simulations per independent random stream.
pub const MC_BLOCK: usize = 10_000;
pub const MC_MIN_SIMS: usize = 10_000;

/// Exposures sharing a default threshold, correlation and loss amount.
struct Cohort {
    threshold: f64,
    sqrt_rho: f64,
    sqrt_one_minus_rho: f64,
    loss_given_default: f64,
    members: usize,
}

fn cohorts(portfolio: &Portfolio, s: &[f64]) -> Vec<Cohort> {
    let mut index: HashMap<(u64, u64, u64), usize> = HashMap::new();
    let mut out: Vec<Cohort> = Vec::new();
    for (e, p) in portfolio.exposures().iter().zip(portfolio.stressed_params(s)) {
        let threshold = probit(p.pd);
        let amount = e.ead * p.lgd;
        let key = (threshold.to_bits(), e.rho.to_bits(), amount.to_bits());
        match index.get(&key) {
            Some(&i) => out[i].members += 1,
            None => {
                index.insert(key, out.len());
                out.push(Cohort {
                    threshold,
                    sqrt_rho: e.rho.sqrt(),
                    sqrt_one_minus_rho: (1.0 - e.rho).sqrt(),
                    loss_given_default: amount,
                    members: 1,
                });
            }
        }
    }
    out
}

const TWO_POW_53: f64 = 9_007_199_254_740_992.0;

fn simulate_block(cohorts: &[Cohort], seed: u64, block: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    let mut losses = Vec::with_capacity(n);
    for _ in 0..n {
        // Systematic factor by inverse transform on an open-interval uniform.
        let u = ((rng.random::<u64>() >> 11) as f64 + 0.5) / TWO_POW_53;
        let z = probit(u);
        let mut loss = 0.0;
        for c in cohorts {
            // Y = √ρ Z + √(1−ρ) ε ≤ threshold  ⇔  Φ(ε) ≤ Φ((threshold − √ρ Z)/√(1−ρ)).
            // Φ(ε) is uniform, so each obligor's ε is drawn as a 53-bit uniform.
            let p = normal_cdf((c.threshold - c.sqrt_rho * z) / c.sqrt_one_minus_rho);
            let cut = (p * TWO_POW_53) as u64;
            let mut defaults = 0usize;
            for _ in 0..c.members {
                if (rng.random::<u64>() >> 11) < cut {
                    defaults += 1;
                }
            }
            loss += defaults as f64 * c.loss_given_default;
        }
        losses.push(loss);
    }
    losses
}

/// Empirical `q`-quantile of simulated portfolio losses under `s`.
///
/// Blocks of [`MC_BLOCK`] simulations each use their own ChaCha stream, so
/// the result depends only on `seed` and `n_sims`, not on thread count.
/// The quantile is the order statistic at 1-based rank `⌈q · n_sims⌉`.
pub fn mc_loss_quantile(
    portfolio: &Portfolio,
    s: &ScenarioVector,
    spec: &LossQuantileSpec,
    n_sims: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_dim(portfolio.dim(), s.dim())?;
    spec.validate()?;
    if n_sims < MC_MIN_SIMS {
        return Err(Error::invalid(
            "n_sims",
            format!("need at least {MC_MIN_SIMS} simulations, got {n_sims}"),
        ));
    }
    let cohorts = cohorts(portfolio, s.as_slice());
    let n_blocks = n_sims.div_ceil(MC_BLOCK);
    let mut losses: Vec<f64> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let n = MC_BLOCK.min(n_sims - b * MC_BLOCK);
            simulate_block(&cohorts, seed, b as u64, n)
        })
        .collect::<Vec<_>>()
        .concat();
    let mean = losses.iter().sum::<f64>() / n_sims as f64;
    losses.sort_by(f64::total_cmp);

    let n = n_sims as f64;
    let rank = |p: f64| -> usize { ((p * n).ceil() as usize).clamp(1, n_sims) - 1 };
    let spread = (spec.q * (1.0 - spec.q) / n).sqrt();
    let quantile = losses[rank(spec.q)];
    let lo = losses[rank((spec.q - spread).max(0.0))];
    let hi = losses[rank((spec.q + spread).min(1.0))];
    Ok(McEstimate {
        quantile,
        std_error: 0.5 * (hi - lo),
        mean,
        n_sims,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transmission::{ExposureRecord, SectorSensitivities, TransmissionOptions};

    fn portfolio(n: usize, pd0: f64, lgd0: f64, rho: f64) -> Portfolio {
        let exposures = (0..n)
            .map(|i| ExposureRecord {
                exposure_id: format!("e{i}"),
                sector_id: "s".into(),
                ead: 100.0,
                pd0,
                lgd0,
                rho,
                maturity: 1.0,
            })
            .collect();
        let sectors = vec![SectorSensitivities {
            sector_id: "s".into(),
            delta: 1.0,
            eta: 0.05,
            beta: vec![0.5],
            gamma: vec![0.02],
        }];
        Portfolio::new(exposures, sectors, TransmissionOptions::default()).unwrap()
    }

    fn zero() -> ScenarioVector {
        ScenarioVector::zeros(2)
    }

    #[test]
    fn worked_single_exposure_value() {
        // Hand evaluation: Φ⁻¹(0.02) = −2.053749, √0.2·3.090232 = 1.381994,
        // argument = −0.671755/√0.8 = −0.751045, Φ(·) = 0.2263128.
        let p = portfolio(1, 0.02, 0.5, 0.2);
        let l = loss_quantile(&p, &zero(), &LossQuantileSpec::default()).unwrap();
        assert!((l - 11.315_640_357_790_07).abs() < 1e-9, "{l}");
    }

    #[test]
    fn zero_correlation_collapses_to_expected_loss() {
        // ρ must be interior for a valid exposure, so check the formula limit directly.
        let zq = LossQuantileSpec::default().z();
        for pd in [0.001, 0.02, 0.3] {
            assert!((conditional_pd(pd, 0.0, zq) - pd).abs() < 1e-15);
        }
    }

    #[test]
    fn median_level_removes_quantile_shift() {
        let p = portfolio(3, 0.03, 0.4, 0.35);
        let spec = LossQuantileSpec::new(0.5).unwrap();
        let l = loss_quantile(&p, &zero(), &spec).unwrap();
        let expect = 3.0 * 100.0 * 0.4 * normal_cdf(probit(0.03) / 0.65f64.sqrt());
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn slope_matches_finite_difference() {
        let zq = LossQuantileSpec::default().z();
        for &(pd, rho) in &[(0.02, 0.2), (0.001, 0.12), (0.3, 0.05), (0.6, 0.24)] {
            let h = 1e-7 * pd;
            let fd = (conditional_pd(pd + h, rho, zq) - conditional_pd(pd - h, rho, zq)) / (2.0 * h);
            let an = conditional_pd_slope(pd, rho, zq);
            assert!((fd - an).abs() < 1e-5 * an.abs().max(1.0), "pd={pd} rho={rho}");
        }
    }

    #[test]
    fn monotone_in_level_and_bounded_by_notional() {
        let p = portfolio(5, 0.05, 0.45, 0.15);
        let s = ScenarioVector::new(vec![1.0, 0.5]).unwrap();
        let mut prev = 0.0;
        for q in [0.5, 0.9, 0.99, 0.999, 0.9999] {
            let l = loss_quantile(&p, &s, &LossQuantileSpec::new(q).unwrap()).unwrap();
            assert!(l >= prev);
            assert!(l <= p.total_ead());
            prev = l;
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(LossQuantileSpec::new(1.0).is_err());
        assert!(LossQuantileSpec::new(0.0).is_err());
        let p = portfolio(1, 0.02, 0.5, 0.2);
        assert!(mc_loss_quantile(&p, &zero(), &LossQuantileSpec::default(), 9_999, 1).is_err());
        let s3 = ScenarioVector::zeros(3);
        assert!(loss_quantile(&p, &s3, &LossQuantileSpec::default()).is_err());
    }

    #[test]
    fn mc_is_deterministic_given_seed() {
        let p = portfolio(50, 0.02, 0.5, 0.2);
        let spec = LossQuantileSpec::new(0.99).unwrap();
        let a = mc_loss_quantile(&p, &zero(), &spec, 20_000, 42).unwrap();
        let b = mc_loss_quantile(&p, &zero(), &spec, 20_000, 42).unwrap();
        let c = mc_loss_quantile(&p, &zero(), &spec, 20_000, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn mc_zero_pd_gives_zero_loss() {
        // A very negative index drives every PD to exactly zero.
        let p = portfolio(10, 0.02, 0.5, 0.2);
        let s = ScenarioVector::new(vec![-2000.0, 0.0]).unwrap();
        let est = mc_loss_quantile(&p, &s, &LossQuantileSpec::default(), 10_000, 3).unwrap();
        assert_eq!(est.quantile, 0.0);
        assert_eq!(est.mean, 0.0);
        assert_eq!(loss_quantile(&p, &s, &LossQuantileSpec::default()).unwrap(), 0.0);
    }

    #[test]
    fn mc_comonotone_limit_is_two_point() {
        let p = portfolio(1, 0.1, 0.5, 1.0 - 1e-12);
        let est = mc_loss_quantile(&p, &zero(), &LossQuantileSpec::new(0.95).unwrap(), 20_000, 9).unwrap();
        assert_eq!(est.quantile, 50.0);
        // Two-point distribution: the mean is EAD·LGD·PD up to sampling error.
        assert!((est.mean - 5.0).abs() < 0.5);
    }

    #[test]
    fn mc_law_of_large_numbers_with_tiny_correlation() {
        let p = portfolio(2_000, 0.05, 0.5, 1e-6);
        let spec = LossQuantileSpec::new(0.99).unwrap();
        let est = mc_loss_quantile(&p, &zero(), &spec, 10_000, 5).unwrap();
        let expected = 2_000.0 * 100.0 * 0.5 * 0.05;
        // Binomial sd of the loss is 50·√(2000·0.05·0.95) ≈ 487; the 99% point sits ≈ 2.33 sd out.
        assert!((est.mean - expected).abs() / expected < 0.01);
        assert!(est.quantile > expected && est.quantile < expected + 4.0 * 487.0);
    }
}
