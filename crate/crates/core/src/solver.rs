//! Design-point solver: the most plausible breaching scenario.
//!
//! Works in whitened coordinates `y = L⁻¹ s`, where the objective depends on
//! `‖y‖²` only. Each start runs an augmented Lagrangian loop with a BFGS inner
//! solver, then an active-set polish that solves the KKT system of
//! `min ½‖y‖²` on the active constraints to machine precision. The polish is
//! valid for any reference family because the negative log-density is an
//! increasing function of `‖y‖²`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capital::CapitalModel;
use crate::error::{check_dim, Error, Result};
use crate::random;
use crate::reference::{ReferenceModel, ScenarioVector};

/// Admissible region for scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintSet {
    /// Lower bound on `g` standing in for the strict `g > 0`.
    pub g_min: f64,
    pub g_max: Option<f64>,
    /// Per-coordinate bounds on the macro-financial block `x`.
    pub x_min: Option<Vec<f64>>,
    pub x_max: Option<Vec<f64>>,
    /// Forbid scenarios under which any PD or LGD falls below baseline.
    pub enforce_monotonicity: bool,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self {
            g_min: 1e-6,
            g_max: None,
            x_min: None,
            x_max: None,
            enforce_monotonicity: true,
        }
    }
}

impl ConstraintSet {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.g_min > 0.0 && self.g_min.is_finite()) {
            return Err(Error::invalid("g_min", format!("must be positive, got {}", self.g_min)));
        }
        if let Some(g_max) = self.g_max {
            if !(g_max > self.g_min) {
                return Err(Error::invalid(
                    "g_max",
                    format!("must exceed g_min = {}, got {g_max}", self.g_min),
                ));
            }
        }
        for b in [&self.x_min, &self.x_max].into_iter().flatten() {
            check_dim(dim - 1, b.len())?;
            if b.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite("x bounds"));
            }
        }
        if let (Some(lo), Some(hi)) = (&self.x_min, &self.x_max) {
            if let Some(j) = (0..lo.len()).find(|&j| !(lo[j] < hi[j])) {
                return Err(Error::invalid(
                    "x bounds",
                    format!("empty box on coordinate {}: [{}, {}]", j + 1, lo[j], hi[j]),
                ));
            }
        }
        Ok(())
    }

    pub fn upper_g(&self) -> f64 {
        self.g_max.unwrap_or(f64::INFINITY)
    }

    fn x_lo(&self, j: usize) -> f64 {
        self.x_min.as_ref().map_or(f64::NEG_INFINITY, |v| v[j])
    }

    fn x_hi(&self, j: usize) -> f64 {
        self.x_max.as_ref().map_or(f64::INFINITY, |v| v[j])
    }

    /// `s` lies in the box (inclusive).
    pub fn within_bounds(&self, s: &[f64]) -> bool {
        s[0] >= self.g_min
            && s[0] <= self.upper_g()
            && s[1..]
                .iter()
                .enumerate()
                .all(|(j, &v)| v >= self.x_lo(j) && v <= self.x_hi(j))
    }

    pub fn clamp(&self, s: &mut [f64]) {
        s[0] = s[0].clamp(self.g_min, self.upper_g());
        for j in 0..s.len() - 1 {
            s[j + 1] = s[j + 1].clamp(self.x_lo(j), self.x_hi(j));
        }
    }

    /// Box as rows `a · s ≥ b` in scenario space.
    fn bound_rows(&self, dim: usize) -> Vec<(Vec<f64>, f64)> {
        let unit = |j: usize, sign: f64| {
            let mut a = vec![0.0; dim];
            a[j] = sign;
            a
        };
        let mut rows = vec![(unit(0, 1.0), self.g_min)];
        if let Some(g_max) = self.g_max {
            rows.push((unit(0, -1.0), -g_max));
        }
        for j in 0..dim - 1 {
            let (lo, hi) = (self.x_lo(j), self.x_hi(j));
            if lo.is_finite() {
                rows.push((unit(j + 1, 1.0), lo));
            }
            if hi.is_finite() {
                rows.push((unit(j + 1, -1.0), -hi));
            }
        }
        rows
    }
}

/// Which gradient of the capital constraint the solver uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Analytic where the capital model provides one, else central differences.
    #[default]
    Auto,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub n_starts: usize,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    /// Maximum number of penalty escalations.
    pub penalty_increases: usize,
    /// Maximum multiplier updates per start.
    pub max_outer_rounds: usize,
    pub max_inner_iterations: usize,
    pub constraint_tol: f64,
    pub stationarity_tol: f64,
    pub gradient: GradientMode,
    /// Central-difference step in whitened units.
    pub fd_step: f64,
    /// Whitened distance below which two local optima are the same.
    pub dedup_radius: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_starts: 32,
            penalty_initial: 10.0,
            penalty_growth: 10.0,
            penalty_increases: 6,
            max_outer_rounds: 40,
            max_inner_iterations: 400,
            constraint_tol: 1e-8,
            stationarity_tol: 1e-8,
            gradient: GradientMode::Auto,
            fd_step: 1e-5,
            dedup_radius: 1e-3,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::invalid("n_starts", "need at least one start"));
        }
        if self.max_outer_rounds == 0 || self.max_inner_iterations == 0 {
            return Err(Error::invalid("iteration limits", "must be positive"));
        }
        let positive = [
            ("penalty_initial", self.penalty_initial),
            ("constraint_tol", self.constraint_tol),
            ("stationarity_tol", self.stationarity_tol),
            ("fd_step", self.fd_step),
            ("dedup_radius", self.dedup_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(
                    "solver tolerance",
                    format!("{name} must be positive, got {v}"),
                ));
            }
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::invalid("penalty_growth", "must exceed 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StartKind {
    Sphere { radius: f64 },
    GridWarm { g: f64 },
    Probe,
}

/// What one start produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub index: usize,
    #[serde(flatten)]
    pub kind: StartKind,
    pub initial: Vec<f64>,
    pub solution: Vec<f64>,
    pub mahalanobis_sq: f64,
    pub ratio: f64,
    pub feasible: bool,
    /// Augmented Lagrangian loop met its tolerances.
    pub converged: bool,
    /// Active-set polish succeeded.
    pub polished: bool,
    pub outer_rounds: usize,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOptimum {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub objective: f64,
    pub mahalanobis_sq: f64,
    pub ratio: f64,
    /// Starts that landed on this optimum.
    pub starts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPointResult {
    pub s_star: ScenarioVector,
    pub y_star: Vec<f64>,
    /// Negative log-density (constants dropped) at `s_star`.
    pub objective: f64,
    pub mahalanobis_sq: f64,
    pub tail_probability: f64,
    pub rarity: f64,
    pub ratio_at_optimum: f64,
    pub r_star: f64,
    /// `|R(s*) − R*| ≤ 1e−6 · R₀`.
    pub active: bool,
    /// Deduplicated feasible optima, best first.
    pub local_optima: Vec<LocalOptimum>,
    pub starts: Vec<StartRecord>,
}

/// Best feasible companion shock at a fixed `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalAnchor {
    pub s: ScenarioVector,
    pub mahalanobis_sq: f64,
    pub objective: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptimum {
    pub s: ScenarioVector,
    pub mahalanobis_sq: f64,
    pub ratio: f64,
    /// Grid spacing along `g` and `x`.
    pub cell: [f64; 2],
}

/// Allowed overshoot of `R*` at a returned solution.
const RATIO_TOL: f64 = 1e-8;
/// Allowed monotonicity violation (PD/LGD units) at a returned solution.
const MONOTONE_TOL: f64 = 1e-10;

/// `a · y ≥ b` with `‖a‖ = 1`.
#[derive(Debug, Clone)]
struct Halfspace {
    a: Vec<f64>,
    b: f64,
}

struct Problem<'a> {
    model: &'a ReferenceModel,
    capital: &'a dyn CapitalModel,
    halfspaces: Vec<Halfspace>,
    constraints: &'a ConstraintSet,
    cfg: &'a SolverConfig,
    cap_scale: f64,
    r_star: f64,
    /// Fixed whitened first coordinate for conditional programs.
    fixed_first: Option<f64>,
}

struct Outcome {
    y: Vec<f64>,
    converged: bool,
    polished: bool,
    outer_rounds: usize,
    inner_iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

impl<'a> Problem<'a> {
    fn new(
        model: &'a ReferenceModel,
        capital: &'a dyn CapitalModel,
        constraints: &'a ConstraintSet,
        cfg: &'a SolverConfig,
        fixed_first: Option<f64>,
    ) -> Result<Self> {
        let d = model.dim();
        check_dim(d, capital.dim())?;
        constraints.validate(d)?;
        cfg.validate()?;
        let mut rows = constraints.bound_rows(d);
        if constraints.enforce_monotonicity {
            rows.extend(capital.monotonicity_rows().into_iter().map(|a| (a, 0.0)));
        }
        let mut halfspaces = Vec::with_capacity(rows.len());
        for (a_s, b) in rows {
            let a = model.pullback_gradient(&a_s);
            let n = norm(&a);
            if n == 0.0 {
                if b > 0.0 {
                    return Err(Error::Infeasible("a linear constraint cannot be met".into()));
                }
                continue;
            }
            halfspaces.push(Halfspace {
                a: a.iter().map(|v| v / n).collect(),
                b: b / n,
            });
        }
        let r_star = capital.r_star();
        let mut problem = Self {
            model,
            capital,
            halfspaces,
            constraints,
            cfg,
            cap_scale: 1.0,
            r_star,
            fixed_first,
        };
        // Scale the capital constraint to unit slope at the origin so its
        // residual reads like a whitened distance.
        let slope = norm(&problem.ratio_gradient_y(&vec![0.0; d]));
        let gap = (capital.r0() - r_star).abs();
        problem.cap_scale = if slope.is_finite() && slope > 1e-12 * capital.r0().abs().max(gap) {
            slope
        } else if gap > 0.0 {
            gap
        } else {
            1.0
        };
        Ok(problem)
    }

    fn n_free(&self) -> usize {
        self.model.dim() - usize::from(self.fixed_first.is_some())
    }

    fn full(&self, z: &[f64]) -> Vec<f64> {
        match self.fixed_first {
            Some(y0) => std::iter::once(y0).chain(z.iter().copied()).collect(),
            None => z.to_vec(),
        }
    }

    fn free<'v>(&self, y: &'v [f64]) -> &'v [f64] {
        if self.fixed_first.is_some() {
            &y[1..]
        } else {
            y
        }
    }

    fn ratio_y(&self, y: &[f64]) -> f64 {
        self.capital.ratio(&self.model.unwhiten_slice(y))
    }

    fn analytic(&self) -> bool {
        self.cfg.gradient == GradientMode::Auto
    }

    /// Gradient of `R` in whitened coordinates.
    fn ratio_gradient_y(&self, y: &[f64]) -> Vec<f64> {
        if self.analytic() {
            if let Some(g) = self.capital.ratio_gradient(&self.model.unwhiten_slice(y)) {
                return self.model.pullback_gradient(&g);
            }
        }
        self.fd_gradient(y)
    }

    fn fd_gradient(&self, y: &[f64]) -> Vec<f64> {
        let h = self.cfg.fd_step;
        (0..y.len())
            .map(|j| {
                let mut up = y.to_vec();
                let mut dn = y.to_vec();
                up[j] += h;
                dn[j] -= h;
                (self.ratio_y(&up) - self.ratio_y(&dn)) / (2.0 * h)
            })
            .collect()
    }

    /// Scaled capital residual and its whitened gradient.
    fn capital_parts(&self, y: &[f64], need_grad: bool) -> (f64, Vec<f64>) {
        let s = self.model.unwhiten_slice(y);
        if !need_grad {
            return ((self.capital.ratio(&s) - self.r_star) / self.cap_scale, Vec::new());
        }
        let (r, g) = if self.analytic() {
            self.capital.ratio_and_gradient(&s)
        } else {
            (self.capital.ratio(&s), None)
        };
        let grad = match g {
            Some(g) => self.model.pullback_gradient(&g),
            None => self.fd_gradient(y),
        };
        (
            (r - self.r_star) / self.cap_scale,
            grad.into_iter().map(|v| v / self.cap_scale).collect(),
        )
    }

    /// All constraint residuals `c_i(y) ≤ 0`, capital first.
    fn residuals(&self, y: &[f64]) -> Vec<f64> {
        let mut c = vec![self.capital_parts(y, false).0];
        c.extend(self.halfspaces.iter().map(|h| h.b - dot(&h.a, y)));
        c
    }

    fn violation(&self, y: &[f64]) -> f64 {
        self.residuals(y).into_iter().fold(0.0, |m, c| m.max(c))
    }

    fn objective(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let y = self.full(z);
        let m2 = dot(&y, &y);
        let slope = 2.0 * self.model.neg_log_density_slope(m2);
        (
            self.model.neg_log_density_from_m2(m2),
            z.iter().map(|v| slope * v).collect(),
        )
    }

    /// Augmented Lagrangian (PHR form) for inequality constraints.
    fn lagrangian(&self, z: &[f64], lambda: &[f64], mu: f64) -> (f64, Vec<f64>) {
        let y = self.full(z);
        let (mut val, mut grad) = self.objective(z);
        let (c0, _) = self.capital_parts(&y, false);
        if !c0.is_finite() {
            return (f64::INFINITY, grad);
        }
        let t = lambda[0] + mu * c0;
        if t > 0.0 {
            let (_, g) = self.capital_parts(&y, true);
            for (gi, v) in grad.iter_mut().zip(self.free(&g)) {
                *gi += t * v;
            }
        }
        val += (t.max(0.0).powi(2) - lambda[0] * lambda[0]) / (2.0 * mu);
        for (h, &l) in self.halfspaces.iter().zip(&lambda[1..]) {
            let t = l + mu * (h.b - dot(&h.a, &y));
            if t > 0.0 {
                for (gi, a) in grad.iter_mut().zip(self.free(&h.a)) {
                    *gi -= t * a;
                }
            }
            val += (t.max(0.0).powi(2) - l * l) / (2.0 * mu);
        }
        (val, grad)
    }

    /// BFGS with Armijo backtracking on the augmented Lagrangian.
    fn minimize(&self, z0: &[f64], lambda: &[f64], mu: f64) -> (Vec<f64>, usize, bool) {
        let n = z0.len();
        let mut z = z0.to_vec();
        let (mut f, mut g) = self.lagrangian(&z, lambda, mu);
        if !f.is_finite() {
            return (z, 0, false);
        }
        let mut h = DMatrix::<f64>::identity(n, n);
        let mut fresh = true;
        for it in 0..self.cfg.max_inner_iterations {
            if inf_norm(&g) <= self.cfg.stationarity_tol {
                return (z, it, true);
            }
            let gv = DVector::from_column_slice(&g);
            let mut p: Vec<f64> = (-(&h * &gv)).iter().copied().collect();
            let mut slope = dot(&g, &p);
            if !(slope < 0.0) {
                h = DMatrix::identity(n, n);
                fresh = true;
                p = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = z.iter().zip(&p).map(|(a, b)| a + t * b).collect();
                let (ft, gt) = self.lagrangian(&trial, lambda, mu);
                if ft.is_finite() && ft <= f + 1e-4 * t * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                t *= 0.5;
            }
            let Some((trial, ft, gt)) = accepted else {
                if fresh {
                    return (z, it, inf_norm(&g) <= 1e3 * self.cfg.stationarity_tol);
                }
                h = DMatrix::identity(n, n);
                fresh = true;
                continue;
            };
            let step: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&step, &dg);
            let small_step = norm(&step) <= 1e-15 * (1.0 + norm(&z));
            let small_change = (f - ft).abs() <= 1e-16 * (1.0 + f.abs());
            z = trial;
            f = ft;
            g = gt;
            if small_step && small_change {
                return (z, it + 1, inf_norm(&g) <= 1e3 * self.cfg.stationarity_tol);
            }
            if sy > 1e-12 * norm(&step) * norm(&dg) {
                let sv = DVector::from_column_slice(&step);
                let yv = DVector::from_column_slice(&dg);
                if fresh {
                    h *= sy / dot(&dg, &dg);
                }
                let rho = 1.0 / sy;
                let hy = &h * &yv;
                let yhy = yv.dot(&hy);
                // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ, expanded.
                h += (&sv * sv.transpose()) * (rho * rho * yhy + rho)
                    - (&hy * sv.transpose() + &sv * hy.transpose()) * rho;
                fresh = false;
            }
        }
        (
            z,
            self.cfg.max_inner_iterations,
            inf_norm(&g) <= self.cfg.stationarity_tol,
        )
    }

    /// Constraint row over the free coordinates, or `None` if the constraint
    /// does not depend on them.
    fn free_row(&self, i: usize, y: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (c, g) = if i == 0 {
            self.capital_parts(y, true)
        } else {
            let h = &self.halfspaces[i - 1];
            (h.b - dot(&h.a, y), h.a.iter().map(|v| -v).collect())
        };
        let row = self.free(&g).to_vec();
        (norm(&row) > 1e-12).then_some((c, row))
    }

    /// Newton iteration for `z = Jᵀν`, `c_A(z) = 0` on a fixed active set.
    /// Returns the point and the multipliers `λ = −ν`.
    fn project_active(&self, z0: &[f64], active: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = z0.len();
        let mut z = z0.to_vec();
        if active.is_empty() {
            return Some((vec![0.0; n], Vec::new()));
        }
        for _ in 0..100 {
            let y = self.full(&z);
            let mut rows = Vec::with_capacity(active.len());
            for &i in active {
                rows.push(self.free_row(i, &y)?);
            }
            let m = rows.len();
            let j = DMatrix::from_fn(m, n, |r, c| rows[r].1[c]);
            let rhs = DVector::from_fn(m, |r, _| dot(&rows[r].1, &z) - rows[r].0);
            let jjt = &j * j.transpose();
            let nu = jjt.clone().svd(true, true).solve(&rhs, 1e-14).ok()?;
            let next: Vec<f64> = (j.transpose() * &nu).iter().copied().collect();
            if next.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let moved = norm(&next.iter().zip(&z).map(|(a, b)| a - b).collect::<Vec<_>>());
            let resid = rows.iter().fold(0.0f64, |m, r| m.max(r.0.abs()));
            z = next;
            if moved <= 1e-14 * (1.0 + norm(&z)) && resid <= 1e-13 {
                return Some((z, nu.iter().map(|v| -v).collect()));
            }
        }
        None
    }

    /// Active-set polish of an approximate KKT point.
    fn polish(&self, z: &[f64], lambda: &[f64]) -> Option<Vec<f64>> {
        let y = self.full(z);
        let c = self.residuals(&y);
        let mut active: Vec<usize> = (0..c.len())
            .filter(|&i| (c[i] >= -1e-6 || lambda[i] > 1e-9) && self.free_row(i, &y).is_some())
            .collect();
        for _ in 0..=c.len() {
            let (zp, mult) = self.project_active(z, &active)?;
            if let Some((pos, _)) = mult
                .iter()
                .enumerate()
                .filter(|(_, l)| **l < -1e-10)
                .min_by(|a, b| a.1.total_cmp(b.1))
            {
                active.remove(pos);
                continue;
            }
            let yp = self.full(&zp);
            let cp = self.residuals(&yp);
            let worst = (0..cp.len())
                .filter(|i| !active.contains(i))
                .max_by(|&a, &b| cp[a].total_cmp(&cp[b]));
            match worst {
                Some(i) if cp[i] > 1e-12 => {
                    active.push(i);
                    active.sort_unstable();
                }
                _ => return Some(zp),
            }
        }
        None
    }

    /// Pull a nearly feasible point inside the capital constraint.
    fn restore(&self, y: &mut [f64]) {
        for _ in 0..20 {
            let r = self.ratio_y(y);
            if r <= self.r_star {
                return;
            }
            let (c, g) = self.capital_parts(y, true);
            let g = self.free(&g).to_vec();
            let gg = dot(&g, &g);
            if !(gg > 0.0) {
                return;
            }
            let target = c + 1e-13;
            let off = usize::from(self.fixed_first.is_some());
            for (k, v) in g.iter().enumerate() {
                y[k + off] -= target / gg * v;
            }
        }
    }

    fn solve_from(&self, z0: Vec<f64>) -> Outcome {
        let m = 1 + self.halfspaces.len();
        let mut lambda = vec![0.0; m];
        let mut mu = self.cfg.penalty_initial;
        let mut increases = 0;
        let mut prev_violation = f64::INFINITY;
        let mut z = z0;
        let mut inner_total = 0;
        let mut converged = false;
        let mut rounds = 0;
        for round in 0..self.cfg.max_outer_rounds {
            rounds = round + 1;
            let (zn, iters, inner_ok) = self.minimize(&z, &lambda, mu);
            inner_total += iters;
            z = zn;
            let y = self.full(&z);
            let c = self.residuals(&y);
            let violation = c.iter().fold(0.0f64, |m, v| m.max(*v));
            let next: Vec<f64> = lambda.iter().zip(&c).map(|(l, ci)| (l + mu * ci).max(0.0)).collect();
            let shift = next.iter().zip(&lambda).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = inf_norm(&next).max(1.0);
            lambda = next;
            if violation <= self.cfg.constraint_tol && inner_ok && shift <= 1e-6 * scale {
                converged = true;
                break;
            }
            if violation > 0.25 * prev_violation && increases < self.cfg.penalty_increases {
                mu *= self.cfg.penalty_growth;
                increases += 1;
            }
            prev_violation = violation;
        }
        let (mut y, polished) = match self.polish(&z, &lambda) {
            Some(zp) => {
                let m2_al = dot(&self.full(&z), &self.full(&z));
                let yp = self.full(&zp);
                let m2_p = dot(&yp, &yp);
                let ok = self.violation(&yp) <= 1e-11 && m2_p <= m2_al + 1e-5 * (1.0 + m2_al);
                if ok {
                    (yp, true)
                } else {
                    (self.full(&z), false)
                }
            }
            None => (self.full(&z), false),
        };
        self.restore(&mut y);
        Outcome {
            y,
            converged,
            polished,
            outer_rounds: rounds,
            inner_iterations: inner_total,
        }
    }

    /// Scenario for a whitened solution, clamped to the box, and whether it
    /// is feasible.
    fn finish(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>, f64, bool) {
        let mut s = self.model.unwhiten_slice(y);
        self.constraints.clamp(&mut s);
        if let Some(y0) = self.fixed_first {
            // Keep the conditioning coordinate exactly where it was requested.
            s[0] = self.model.cholesky()[(0, 0)] * y0;
        }
        let y = self.model.whiten_slice(&s);
        let ratio = self.capital.ratio(&s);
        let feasible = ratio.is_finite()
            && ratio <= self.r_star + RATIO_TOL
            && (!self.constraints.enforce_monotonicity || self.capital.monotonicity_violation(&s) <= MONOTONE_TOL);
        (s, y, ratio, feasible)
    }
}

/// Points of the form `r · u` in whitened space, clamped to the box, checked
/// for feasibility. Returns the feasible one with the smallest distance.
fn feasibility_probe(problem: &Problem<'_>, seed: u64) -> Option<Vec<f64>> {
    let d = problem.model.dim();
    let mut rng = random::stream(seed, u64::MAX);
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let radii = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
    let sd_g = problem.model.sigma()[(0, 0)].sqrt();
    for &r in &radii {
        candidates.push(
            std::iter::once(r * sd_g)
                .chain(std::iter::repeat_n(0.0, d - 1))
                .collect(),
        );
        for _ in 0..48 {
            let u = random::unit_direction(&mut rng, d);
            let y: Vec<f64> = u.iter().map(|v| r * v).collect();
            candidates.push(problem.model.unwhiten_slice(&y));
        }
    }
    candidates
        .into_iter()
        .filter_map(|mut s| {
            problem.constraints.clamp(&mut s);
            let y = problem.model.whiten_slice(&s);
            let (s, y, _, feasible) = problem.finish(&y);
            feasible.then(|| (dot(&y, &y), s))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| lexicographic(&a.1, &b.1)))
        .map(|(_, s)| s)
}

/// Evenly spaced `g` values from `g_min` to the 99.9% marginal quantile (capped by `g_max`).
pub fn default_g_grid(model: &ReferenceModel, constraints: &ConstraintSet, n: usize) -> Result<Vec<f64>> {
    let top = model.marginal_g_quantile(0.999)?.min(constraints.upper_g());
    let lo = constraints.g_min;
    let hi = top.max(lo);
    Ok(match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    })
}

fn anchor_starts(d_free: usize, n: usize, seed: u64, stream_base: u64) -> Vec<Vec<f64>> {
    let radii = [1.0, 2.0, 3.0, 4.0];
    let mut out = vec![vec![0.0; d_free]];
    for k in 1..n {
        let mut rng = random::stream(seed, stream_base + k as u64);
        let u = random::unit_direction(&mut rng, d_free);
        let r = radii[(k - 1) % radii.len()];
        out.push(u.into_iter().map(|v| r * v).collect());
    }
    out
}

/// Least-unlikely scenario with `g` fixed at `g_j` that still breaches.
pub fn conditional_anchor(
    model: &ReferenceModel,
    capital: &dyn CapitalModel,
    constraints: &ConstraintSet,
    g_j: f64,
    config: &SolverConfig,
) -> Result<ConditionalAnchor> {
    conditional_anchor_with(model, capital, constraints, g_j, config, config.n_starts.min(8))
}

fn conditional_anchor_with(
    model: &ReferenceModel,
    capital: &dyn CapitalModel,
    constraints: &ConstraintSet,
    g_j: f64,
    config: &SolverConfig,
    n_starts: usize,
) -> Result<ConditionalAnchor> {
    if !(g_j >= constraints.g_min && g_j <= constraints.upper_g()) {
        return Err(Error::invalid(
            "g_j",
            format!("{g_j} lies outside [{}, {}]", constraints.g_min, constraints.upper_g()),
        ));
    }
    let y0 = g_j / model.cholesky()[(0, 0)];
    let problem = Problem::new(model, capital, constraints, config, Some(y0))?;
    let d_free = problem.n_free();
    let starts = anchor_starts(d_free, n_starts.max(1), config.seed ^ g_j.to_bits(), 1 << 32);
    let best = starts
        .into_par_iter()
        .map(|z0| {
            let out = problem.solve_from(z0);
            problem.finish(&out.y)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .filter(|(_, _, _, feasible)| *feasible)
        .min_by(|a, b| {
            dot(&a.1, &a.1)
                .total_cmp(&dot(&b.1, &b.1))
                .then_with(|| lexicographic(&a.1, &b.1))
        });
    let Some((s, y, ratio, _)) = best else {
        return Err(Error::Infeasible(format!("no breaching scenario with g = {g_j}")));
    };
    let m2 = dot(&y, &y);
    Ok(ConditionalAnchor {
        s: ScenarioVector::new(s)?,
        mahalanobis_sq: m2,
        objective: model.neg_log_density_from_m2(m2),
        ratio,
    })
}

/// Most plausible scenario satisfying `R(s) ≤ R*` and the constraint set.
pub fn solve_design_point(
    model: &ReferenceModel,
    capital: &dyn CapitalModel,
    constraints: &ConstraintSet,
    config: &SolverConfig,
) -> Result<DesignPointResult> {
    let problem = Problem::new(model, capital, constraints, config, None)?;
    let d = model.dim();
    let probe = feasibility_probe(&problem, config.seed);

    let n_grid = config.n_starts / 2;
    let n_sphere = config.n_starts - n_grid;
    let radii = [1.0, 2.0, 3.0, 4.0];
    let mut kinds: Vec<StartKind> = (0..n_sphere)
        .map(|k| StartKind::Sphere {
            radius: radii[k % radii.len()],
        })
        .collect();
    kinds.extend(
        default_g_grid(model, constraints, n_grid)?
            .into_iter()
            .map(|g| StartKind::GridWarm { g }),
    );
    if probe.is_some() {
        kinds.push(StartKind::Probe);
    }

    let records: Vec<(StartRecord, Vec<f64>)> = kinds
        .into_par_iter()
        .enumerate()
        .map(|(index, kind)| {
            let y0 = match &kind {
                StartKind::Sphere { radius } => {
                    let mut rng = random::stream(config.seed, index as u64);
                    random::unit_direction(&mut rng, d)
                        .into_iter()
                        .map(|v| radius * v)
                        .collect()
                }
                StartKind::GridWarm { g } => {
                    let mut warm = config.clone();
                    warm.seed = config.seed.wrapping_add(index as u64);
                    match conditional_anchor_with(model, capital, constraints, *g, &warm, 1) {
                        Ok(a) => model.whiten_slice(a.s.as_slice()),
                        Err(_) => {
                            let mut y = vec![0.0; d];
                            y[0] = g / model.cholesky()[(0, 0)];
                            y
                        }
                    }
                }
                StartKind::Probe => model.whiten_slice(probe.as_deref().unwrap_or(&vec![0.0; d])),
            };
            let out = problem.solve_from(y0.clone());
            let (s, y, ratio, feasible) = problem.finish(&out.y);
            let record = StartRecord {
                index,
                kind,
                initial: model.unwhiten_slice(&y0),
                solution: s,
                mahalanobis_sq: dot(&y, &y),
                ratio,
                feasible,
                converged: out.converged,
                polished: out.polished,
                outer_rounds: out.outer_rounds,
                inner_iterations: out.inner_iterations,
            };
            (record, y)
        })
        .collect();

    let mut feasible: Vec<&(StartRecord, Vec<f64>)> = records.iter().filter(|(r, _)| r.feasible).collect();
    if feasible.is_empty() {
        let best = records
            .iter()
            .min_by(|a, b| {
                problem
                    .violation(&a.1)
                    .total_cmp(&problem.violation(&b.1))
                    .then(a.0.index.cmp(&b.0.index))
            })
            .map(|(r, _)| r.solution.clone());
        return Err(if probe.is_some() {
            Error::NonConvergence {
                reason: format!("none of {} starts reached a feasible point", records.len()),
                best,
            }
        } else {
            Error::Infeasible("no breaching scenario found within the admissible region".into())
        });
    }
    feasible.sort_by(|a, b| {
        a.0.mahalanobis_sq
            .total_cmp(&b.0.mahalanobis_sq)
            .then(a.0.index.cmp(&b.0.index))
    });

    let mut optima: Vec<LocalOptimum> = Vec::new();
    for (rec, y) in feasible {
        if let Some(o) = optima
            .iter_mut()
            .find(|o| norm(&o.y.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>()) <= config.dedup_radius)
        {
            o.starts.push(rec.index);
            continue;
        }
        optima.push(LocalOptimum {
            s: rec.solution.clone(),
            y: y.clone(),
            objective: model.neg_log_density_from_m2(rec.mahalanobis_sq),
            mahalanobis_sq: rec.mahalanobis_sq,
            ratio: rec.ratio,
            starts: vec![rec.index],
        });
    }
    // Among optima tied on distance, the lexicographically smallest whitened point leads.
    let best_m2 = optima[0].mahalanobis_sq;
    let tie = 1e-9 * (1.0 + best_m2);
    let lead = (0..optima.len())
        .filter(|&i| optima[i].mahalanobis_sq <= best_m2 + tie)
        .min_by(|&a, &b| lexicographic(&optima[a].y, &optima[b].y))
        .unwrap_or(0);
    let leader = optima.remove(lead);
    optima.insert(0, leader);

    let best = &optima[0];
    let plaus = model.plausibility_from_m2(best.mahalanobis_sq)?;
    let r0 = capital.r0();
    let r_star = capital.r_star();
    Ok(DesignPointResult {
        s_star: ScenarioVector::new(best.s.clone())?,
        y_star: best.y.clone(),
        objective: best.objective,
        mahalanobis_sq: best.mahalanobis_sq,
        tail_probability: plaus.tail_probability,
        rarity: plaus.rarity,
        ratio_at_optimum: best.ratio,
        r_star,
        active: (best.ratio - r_star).abs() <= 1e-6 * r0.abs(),
        local_optima: optima,
        starts: records.into_iter().map(|(r, _)| r).collect(),
    })
}

/// Exhaustive scan of a `resolution × resolution` grid over the box for
/// two-dimensional problems; returns the feasible point with least distance.
pub fn grid_oracle(
    model: &ReferenceModel,
    capital: &dyn CapitalModel,
    constraints: &ConstraintSet,
    resolution: usize,
) -> Result<GridOptimum> {
    check_dim(2, model.dim())?;
    check_dim(2, capital.dim())?;
    constraints.validate(2)?;
    if resolution < 2 {
        return Err(Error::invalid(
            "resolution",
            format!("need at least 2, got {resolution}"),
        ));
    }
    let g_lo = constraints.g_min;
    let g_hi = constraints.upper_g();
    let x_lo = constraints.x_lo(0);
    let x_hi = constraints.x_hi(0);
    if ![g_hi, x_lo, x_hi].iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(
            "bounds",
            "the grid oracle needs finite g_max, x_min and x_max",
        ));
    }
    let steps = (resolution - 1) as f64;
    let hg = (g_hi - g_lo) / steps;
    let hx = (x_hi - x_lo) / steps;
    let r_star = capital.r_star();
    let best = (0..resolution)
        .into_par_iter()
        .filter_map(|i| {
            let g = g_lo + hg * i as f64;
            let mut row_best: Option<(f64, usize, usize, f64)> = None;
            for j in 0..resolution {
                let s = [g, x_lo + hx * j as f64];
                let m2 = model.mahalanobis_sq_slice(&s);
                if row_best.is_some_and(|b| b.0 <= m2) {
                    continue;
                }
                let ratio = capital.ratio(&s);
                let monotone = !constraints.enforce_monotonicity || capital.monotonicity_violation(&s) <= 0.0;
                if ratio <= r_star && monotone {
                    row_best = Some((m2, i, j, ratio));
                }
            }
            row_best
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let Some((m2, i, j, ratio)) = best else {
        return Err(Error::Infeasible("no feasible grid point".into()));
    };
    Ok(GridOptimum {
        s: ScenarioVector::new(vec![g_lo + hg * i as f64, x_lo + hx * j as f64])?,
        mahalanobis_sq: m2,
        ratio,
        cell: [hg, hx],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capital::AffineCapital;
    use crate::reference::Family;

    fn half_plane() -> AffineCapital {
        // R = 1 − 0.1 (g + x), R* = 0.6  ⇔  breach iff g + x ≥ 4.
        AffineCapital::new(1.0, vec![-0.1, -0.1], 0.6)
    }

    fn quick() -> SolverConfig {
        SolverConfig {
            n_starts: 8,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn half_plane_projection() {
        let model = ReferenceModel::identity(2).unwrap();
        let res = solve_design_point(&model, &half_plane(), &ConstraintSet::default(), &quick()).unwrap();
        assert!((res.s_star.g() - 2.0).abs() < 1e-9, "{:?}", res.s_star);
        assert!((res.s_star.x()[0] - 2.0).abs() < 1e-9);
        assert!((res.mahalanobis_sq - 8.0).abs() < 1e-9);
        assert!(res.active);
        assert!(res.ratio_at_optimum <= 0.6 + 1e-8);
    }

    #[test]
    fn lower_bound_on_g_becomes_active() {
        let model = ReferenceModel::identity(2).unwrap();
        let cap = AffineCapital::new(1.0, vec![0.0, -0.1], 0.7);
        let res = solve_design_point(&model, &cap, &ConstraintSet::default(), &quick()).unwrap();
        assert!((res.s_star.g() - 1e-6).abs() < 1e-12, "{:?}", res.s_star);
        assert!((res.s_star.x()[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn correlated_reference_matches_closed_form() {
        // min sᵀΣ⁻¹s s.t. aᵀs ≥ 4 has s* = 4 Σa / aᵀΣa.
        let sigma = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let model = ReferenceModel::gaussian(sigma.clone()).unwrap();
        let res = solve_design_point(&model, &half_plane(), &ConstraintSet::default(), &quick()).unwrap();
        let sa = [1.5, 2.5];
        let asa = 4.0;
        for (got, a) in res.s_star.as_slice().iter().zip(sa) {
            assert!((got - 4.0 * a / asa).abs() < 1e-9);
        }
        assert!((res.mahalanobis_sq - 16.0 / asa).abs() < 1e-9);
    }

    #[test]
    fn infeasible_box() {
        let model = ReferenceModel::identity(2).unwrap();
        let cap = AffineCapital::new(1.0, vec![0.0, -0.1], 0.7);
        let c = ConstraintSet {
            x_max: Some(vec![2.0]),
            ..ConstraintSet::default()
        };
        let err = solve_design_point(&model, &cap, &c, &quick()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err:?}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn conditional_anchor_examples() {
        let model = ReferenceModel::identity(2).unwrap();
        let cap = half_plane();
        let c = ConstraintSet::default();
        let a = conditional_anchor(&model, &cap, &c, 1.0, &quick()).unwrap();
        assert_eq!(a.s.g(), 1.0);
        assert!((a.s.x()[0] - 3.0).abs() < 1e-9);
        let at_star = conditional_anchor(&model, &cap, &c, 2.0, &quick()).unwrap();
        assert!((at_star.mahalanobis_sq - 8.0).abs() < 1e-6);

        let bounded = ConstraintSet {
            x_max: Some(vec![2.5]),
            ..ConstraintSet::default()
        };
        let err = conditional_anchor(&model, &cap, &bounded, 1.0, &quick()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        assert!(conditional_anchor(&model, &cap, &c, 0.0, &quick()).is_err());
    }

    #[test]
    fn grid_oracle_brackets_solution() {
        let model = ReferenceModel::identity(2).unwrap();
        let c = ConstraintSet {
            g_max: Some(6.0),
            x_min: Some(vec![0.0]),
            x_max: Some(vec![6.0]),
            ..ConstraintSet::default()
        };
        let grid = grid_oracle(&model, &half_plane(), &c, 2001).unwrap();
        assert!((grid.s.g() - 2.0).abs() <= grid.cell[0] + 1e-9);
        assert!((grid.s.x()[0] - 2.0).abs() <= grid.cell[1] + 1e-9);
        assert!(grid.mahalanobis_sq >= 8.0 - 1e-6);

        let never = AffineCapital::new(1.0, vec![0.0, 0.0], 0.6);
        assert!(matches!(grid_oracle(&model, &never, &c, 11), Err(Error::Infeasible(_))));
        let three = ReferenceModel::identity(3).unwrap();
        assert!(grid_oracle(&three, &AffineCapital::new(1.0, vec![-0.1; 3], 0.6), &c, 11).is_err());
    }

    #[test]
    fn student_t_same_minimiser() {
        let sigma = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 1.5]);
        let gauss = ReferenceModel::gaussian(sigma).unwrap();
        let base = solve_design_point(&gauss, &half_plane(), &ConstraintSet::default(), &quick()).unwrap();
        for nu in [3.0, 6.0, 30.0] {
            let t = gauss.with_family(Family::StudentT { nu }).unwrap();
            let res = solve_design_point(&t, &half_plane(), &ConstraintSet::default(), &quick()).unwrap();
            let dist = norm(
                &res.y_star
                    .iter()
                    .zip(&base.y_star)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            );
            assert!(dist < 1e-6, "nu={nu}: {dist}");
        }
    }

    #[test]
    fn symmetric_optima_are_all_reported() {
        // Breach when |x| ≥ 2: two mirror-image optima; the lexicographically
        // smaller whitened point (x = −2) leads.
        struct Abs;
        impl CapitalModel for Abs {
            fn dim(&self) -> usize {
                2
            }
            fn ratio(&self, s: &[f64]) -> f64 {
                1.0 - 0.1 * (s[1] * s[1] + 1e-12).sqrt()
            }
            fn r0(&self) -> f64 {
                1.0
            }
            fn r_star(&self) -> f64 {
                0.8
            }
        }
        let model = ReferenceModel::identity(2).unwrap();
        let res = solve_design_point(&model, &Abs, &ConstraintSet::default(), &SolverConfig::default()).unwrap();
        assert!(res.local_optima.len() >= 2);
        assert!((res.s_star.x()[0] + 2.0).abs() < 1e-6, "{:?}", res.s_star);
        assert!((res.local_optima[1].mahalanobis_sq - res.mahalanobis_sq).abs() < 1e-9);
    }

    #[test]
    fn deterministic_given_seed() {
        let model = ReferenceModel::identity(3).unwrap();
        let cap = AffineCapital::new(1.0, vec![-0.1, -0.05, 0.02], 0.6);
        let a = solve_design_point(&model, &cap, &ConstraintSet::default(), &quick()).unwrap();
        let b = solve_design_point(&model, &cap, &ConstraintSet::default(), &quick()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn finite_difference_mode_agrees() {
        let model = ReferenceModel::identity(2).unwrap();
        let cfg = SolverConfig {
            gradient: GradientMode::FiniteDifference,
            ..quick()
        };
        let res = solve_design_point(&model, &half_plane(), &ConstraintSet::default(), &cfg).unwrap();
        assert!((res.mahalanobis_sq - 8.0).abs() < 1e-8);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig {
            n_starts: 0,
            ..SolverConfig::default()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            fd_step: 0.0,
            ..SolverConfig::default()
        }
        .validate()
        .is_err());
        assert!(ConstraintSet {
            g_min: 0.0,
            ..ConstraintSet::default()
        }
        .validate(2)
        .is_err());
        assert!(ConstraintSet {
            g_max: Some(1e-7),
            ..ConstraintSet::default()
        }
        .validate(2)
        .is_err());
        assert!(ConstraintSet {
            x_min: Some(vec![1.0]),
            x_max: Some(vec![0.0]),
            ..ConstraintSet::default()
        }
        .validate(2)
        .is_err());
    }
}
