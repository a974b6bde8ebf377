//! Sets of breaching scenarios around the design point, candidate pools and
//! their reduction to a short, diverse scenario list.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capital::CapitalModel;
use crate::error::{check_dim, Error, Result};
use crate::random;
use crate::reference::{ReferenceModel, ScenarioVector};
use crate::solver::{conditional_anchor, ConstraintSet, DesignPointResult, SolverConfig};

/// Which set of scenarios is being explored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "set", rename_all = "snake_case")]
pub enum Target {
    /// Breaching scenarios with `d²(s − s*) ≤ radius_eta`.
    Neighbourhood { radius_eta: f64 },
    /// Breaching scenarios with `g > 0` whose negative log-density is within
    /// `epsilon / 2` of the design point's.
    NearOptimal { epsilon: f64 },
}

impl Target {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Target::Neighbourhood { radius_eta } if !(radius_eta > 0.0 && radius_eta.is_finite()) => Err(
                Error::invalid("radius_eta", format!("must be positive, got {radius_eta}")),
            ),
            Target::NearOptimal { epsilon } if !(epsilon >= 0.0 && epsilon.is_finite()) => Err(Error::invalid(
                "epsilon",
                format!("must be non-negative, got {epsilon}"),
            )),
            _ => Ok(()),
        }
    }

    /// Default whitened radius interval for local draws around an anchor.
    pub fn default_radius_interval(&self) -> (f64, f64) {
        match *self {
            Target::Neighbourhood { radius_eta } => (0.0, radius_eta.sqrt()),
            Target::NearOptimal { epsilon } => (0.0, epsilon.sqrt()),
        }
    }
}

/// Membership oracle for a target set, built once per design point.
pub struct Membership<'a> {
    target: Target,
    model: &'a ReferenceModel,
    capital: &'a dyn CapitalModel,
    s_star: Vec<f64>,
    nld_bound: f64,
}

impl<'a> Membership<'a> {
    pub fn new(
        target: Target,
        model: &'a ReferenceModel,
        capital: &'a dyn CapitalModel,
        s_star: &ScenarioVector,
    ) -> Result<Self> {
        target.validate()?;
        check_dim(model.dim(), s_star.dim())?;
        check_dim(model.dim(), capital.dim())?;
        let nld_bound = match target {
            Target::NearOptimal { epsilon } => {
                model.neg_log_density_from_m2(model.mahalanobis_sq_slice(s_star.as_slice())) + 0.5 * epsilon
            }
            Target::Neighbourhood { .. } => f64::NAN,
        };
        Ok(Self {
            target,
            model,
            capital,
            s_star: s_star.as_slice().to_vec(),
            nld_bound,
        })
    }

    pub fn target(&self) -> Target {
        self.target
    }

    /// Boundaries are inclusive.
    pub fn contains(&self, s: &[f64]) -> bool {
        if s.len() != self.s_star.len() || s.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let close = match self.target {
            Target::Neighbourhood { radius_eta } => {
                let diff: Vec<f64> = s.iter().zip(&self.s_star).map(|(a, b)| a - b).collect();
                self.model.mahalanobis_sq_slice(&diff) <= radius_eta
            }
            Target::NearOptimal { .. } => {
                s[0] > 0.0 && self.model.neg_log_density_from_m2(self.model.mahalanobis_sq_slice(s)) <= self.nld_bound
            }
        };
        close && self.capital.breach(s)
    }
}

/// One-shot membership test.
pub fn membership(
    target: Target,
    model: &ReferenceModel,
    capital: &dyn CapitalModel,
    s: &ScenarioVector,
    s_star: &ScenarioVector,
) -> Result<bool> {
    check_dim(model.dim(), s.dim())?;
    Ok(Membership::new(target, model, capital, s_star)?.contains(s.as_slice()))
}

/// Acceptance below this rate marks a region as thin.
pub const THIN_ACCEPTANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalSample {
    pub accepted: Vec<Vec<f64>>,
    pub draws: usize,
    pub acceptance_rate: f64,
    /// Acceptance rate fell below [`THIN_ACCEPTANCE`].
    pub thin: bool,
}

/// Draws `s = L (y_anchor + r u)` with `u` uniform on the unit sphere and `r`
/// uniform on `radius_interval`, keeping the draws that pass `member`.
pub fn local_sample(
    model: &ReferenceModel,
    anchor: &[f64],
    radius_interval: (f64, f64),
    n: usize,
    seed: u64,
    member: &(dyn Fn(&[f64]) -> bool + Sync),
) -> Result<LocalSample> {
    let mut rng = random::stream(seed, 0);
    local_sample_with(model, anchor, radius_interval, n, &mut rng, member)
}

fn local_sample_with(
    model: &ReferenceModel,
    anchor: &[f64],
    (r_lo, r_hi): (f64, f64),
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    member: &(dyn Fn(&[f64]) -> bool + Sync),
) -> Result<LocalSample> {
    check_dim(model.dim(), anchor.len())?;
    if !(r_lo >= 0.0 && r_lo <= r_hi && r_hi.is_finite()) {
        return Err(Error::invalid(
            "radius interval",
            format!("need 0 <= lo <= hi < inf, got [{r_lo}, {r_hi}]"),
        ));
    }
    let d = model.dim();
    let y_anchor = model.whiten_slice(anchor);
    let mut accepted = Vec::new();
    for _ in 0..n {
        let u = random::unit_direction(rng, d);
        let r = random::uniform(rng, r_lo, r_hi);
        let y: Vec<f64> = y_anchor.iter().zip(&u).map(|(a, b)| a + r * b).collect();
        let s = model.unwhiten_slice(&y);
        if member(&s) {
            accepted.push(s);
        }
    }
    let acceptance_rate = if n == 0 { 1.0 } else { accepted.len() as f64 / n as f64 };
    Ok(LocalSample {
        accepted,
        draws: n,
        acceptance_rate,
        thin: acceptance_rate < THIN_ACCEPTANCE,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitAndRunChain {
    /// One point per step; a stalled step repeats the current point.
    pub points: Vec<Vec<f64>>,
    pub stalls: usize,
    /// More than half of the steps stalled.
    pub stalled: bool,
}

const BRACKET_CAP_DOUBLINGS: usize = 40;
const BISECTIONS: usize = 40;
const MIN_CHORD: f64 = 1e-10;

/// Furthest whitened step `t ≥ 0` along `u` that stays in the set, found by
/// doubling then bisection on the yes/no oracle.
fn chord_end(y: &[f64], u: &[f64], sign: f64, inside: &dyn Fn(&[f64]) -> bool) -> f64 {
    let at = |t: f64| -> Vec<f64> { y.iter().zip(u).map(|(a, b)| a + sign * t * b).collect() };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    while inside(&at(hi)) {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings >= BRACKET_CAP_DOUBLINGS {
            return lo;
        }
    }
    for _ in 0..BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if inside(&at(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Hit-and-run chain in whitened space driven only by the oracle `member`.
pub fn hit_and_run(
    model: &ReferenceModel,
    start: &[f64],
    n_steps: usize,
    seed: u64,
    member: &(dyn Fn(&[f64]) -> bool + Sync),
) -> Result<HitAndRunChain> {
    let mut rng = random::stream(seed, 1);
    hit_and_run_with(model, start, n_steps, &mut rng, member)
}

fn hit_and_run_with(
    model: &ReferenceModel,
    start: &[f64],
    n_steps: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    member: &(dyn Fn(&[f64]) -> bool + Sync),
) -> Result<HitAndRunChain> {
    check_dim(model.dim(), start.len())?;
    if !member(start) {
        return Err(Error::invalid("start", "hit-and-run must start inside the set"));
    }
    let d = model.dim();
    let inside = |y: &[f64]| member(&model.unwhiten_slice(y));
    let mut y = model.whiten_slice(start);
    let mut points = Vec::with_capacity(n_steps);
    let mut stalls = 0;
    for _ in 0..n_steps {
        let u = random::unit_direction(rng, d);
        let mut t_hi = chord_end(&y, &u, 1.0, &inside);
        let mut t_lo = -chord_end(&y, &u, -1.0, &inside);
        let mut moved = false;
        // Shrink towards the current point when a draw lands in a gap.
        for _ in 0..50 {
            if t_hi - t_lo < MIN_CHORD {
                break;
            }
            let t = random::uniform(rng, t_lo, t_hi);
            let cand: Vec<f64> = y.iter().zip(&u).map(|(a, b)| a + t * b).collect();
            if inside(&cand) {
                y = cand;
                moved = true;
                break;
            }
            if t > 0.0 {
                t_hi = t;
            } else {
                t_lo = t;
            }
        }
        if !moved {
            stalls += 1;
        }
        points.push(model.unwhiten_slice(&y));
    }
    let stalled = 2 * stalls > n_steps;
    if stalled {
        log::warn!("hit-and-run stalled on {stalls} of {n_steps} steps");
    }
    Ok(HitAndRunChain {
        points,
        stalls,
        stalled,
    })
}

/// How a pool member was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum Origin {
    DesignPoint,
    /// Another local optimum of the design-point problem.
    Anchor,
    GridAnchor {
        g: f64,
    },
    LocalDraw {
        anchor: usize,
    },
    HitAndRun {
        anchor: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMember {
    pub s: Vec<f64>,
    #[serde(flatten)]
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub target: Target,
    pub anchors: Vec<PoolMember>,
    pub members: Vec<PoolMember>,
    /// Fewer members than requested.
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub n_target: usize,
    /// `g` values for conditional anchors; empty means the default grid.
    pub g_grid: Vec<f64>,
    pub g_grid_points: usize,
    /// Whitened radius interval for local draws; `None` means the target default.
    pub radius_interval: Option<(f64, f64)>,
    /// Local draws attempted per accepted member before giving up on an anchor.
    pub max_draw_factor: usize,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            n_target: 2000,
            g_grid: Vec::new(),
            g_grid_points: 8,
            radius_interval: None,
            max_draw_factor: 20,
            seed: 0,
        }
    }
}

fn whitened_distance(model: &ReferenceModel, a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    model.mahalanobis_sq_slice(&diff).sqrt()
}

/// Anchors: the design point, the other local optima and the conditional
/// anchors on the `g` grid, each kept only if it passes the membership test.
#[allow(clippy::too_many_arguments)]
fn collect_anchors(
    model: &ReferenceModel,
    capital: &dyn CapitalModel,
    constraints: &ConstraintSet,
    solver: &SolverConfig,
    design: &DesignPointResult,
    member: &Membership<'_>,
    g_grid: &[f64],
    dedup: f64,
) -> Vec<PoolMember> {
    let mut anchors = vec![PoolMember {
        s: design.s_star.as_slice().to_vec(),
        origin: Origin::DesignPoint,
    }];
    let push = |anchors: &mut Vec<PoolMember>, s: Vec<f64>, origin: Origin| {
        if member.contains(&s) && anchors.iter().all(|a| whitened_distance(model, &a.s, &s) > dedup) {
            anchors.push(PoolMember { s, origin });
        }
    };
    for opt in design.local_optima.iter().skip(1) {
        push(&mut anchors, opt.s.clone(), Origin::Anchor);
    }
    let conditional: Vec<Option<Vec<f64>>> = g_grid
        .par_iter()
        .map(|&g| match conditional_anchor(model, capital, constraints, g, solver) {
            Ok(a) => Some(a.s.into_vec()),
            Err(e) => {
                log::info!("conditional anchor at g = {g} skipped: {e}");
                None
            }
        })
        .collect();
    for (&g, s) in g_grid.iter().zip(conditional) {
        if let Some(s) = s {
            push(&mut anchors, s, Origin::GridAnchor { g });
        }
    }
    anchors
}

/// Candidate pool inside the target set: anchors plus local draws around
/// each anchor, switching to hit-and-run where local draws are thin.
#[allow(clippy::too_many_arguments)]
pub fn build_pool(
    model: &ReferenceModel,
    capital: &dyn CapitalModel,
    constraints: &ConstraintSet,
    solver: &SolverConfig,
    design: &DesignPointResult,
    target: Target,
    config: &PoolConfig,
) -> Result<CandidatePool> {
    let member = Membership::new(target, model, capital, &design.s_star)?;
    if !member.contains(design.s_star.as_slice()) {
        return Err(Error::Infeasible(
            "the design point does not pass the membership test".into(),
        ));
    }
    let g_grid = if config.g_grid.is_empty() {
        crate::solver::default_g_grid(model, constraints, config.g_grid_points)?
    } else {
        config.g_grid.clone()
    };
    let anchors = collect_anchors(
        model,
        capital,
        constraints,
        solver,
        design,
        &member,
        &g_grid,
        solver.dedup_radius,
    );
    let radius = config
        .radius_interval
        .unwrap_or_else(|| target.default_radius_interval());
    let quota = config.n_target.saturating_sub(anchors.len()).div_ceil(anchors.len());
    let oracle = |s: &[f64]| member.contains(s);

    let per_anchor: Vec<Result<Vec<PoolMember>>> = anchors
        .par_iter()
        .enumerate()
        .map(|(k, anchor)| {
            let mut rng = random::stream(config.seed, 2 * k as u64);
            let mut out = Vec::with_capacity(quota);
            let mut draws = 0;
            let budget = quota * config.max_draw_factor.max(1);
            let mut thin = false;
            while out.len() < quota && draws < budget {
                let batch = (quota - out.len()).max(16);
                let sample = local_sample_with(model, &anchor.s, radius, batch, &mut rng, &oracle)?;
                draws += sample.draws;
                out.extend(sample.accepted.into_iter().map(|s| PoolMember {
                    s,
                    origin: Origin::LocalDraw { anchor: k },
                }));
                if sample.thin {
                    thin = true;
                    break;
                }
            }
            out.truncate(quota);
            if out.len() < quota && (thin || draws >= budget) {
                let mut hr_rng = random::stream(config.seed, 2 * k as u64 + 1);
                let chain = hit_and_run_with(model, &anchor.s, quota - out.len(), &mut hr_rng, &oracle)?;
                out.extend(chain.points.into_iter().map(|s| PoolMember {
                    s,
                    origin: Origin::HitAndRun { anchor: k },
                }));
            }
            Ok(out)
        })
        .collect();

    let mut members = anchors.clone();
    for part in per_anchor {
        members.extend(part?);
    }
    let shortfall = members.len() < config.n_target;
    if shortfall {
        log::warn!(
            "candidate pool has {} members, {} requested",
            members.len(),
            config.n_target
        );
    }
    Ok(CandidatePool {
        target,
        anchors,
        members,
        shortfall,
    })
}

/// Indices selected by the maximin rule, starting from `start`.
///
/// Returns indices into `points`; the start itself is not part of the output.
/// Ties on distance go to the lexicographically smallest point.
pub fn farthest_point_order(points: &[Vec<f64>], start: &[f64], count: usize) -> Vec<usize> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut nearest: Vec<f64> = points.iter().map(|p| dist(p, start)).collect();
    let mut taken = vec![false; points.len()];
    let mut order = Vec::with_capacity(count);
    for _ in 0..count.min(points.len()) {
        let mut best: Option<usize> = None;
        for i in 0..points.len() {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let better = nearest[i] > nearest[b]
                        || (nearest[i] == nearest[b]
                            && points[i]
                                .iter()
                                .zip(&points[b])
                                .map(|(x, y)| x.total_cmp(y))
                                .find(|o| o.is_ne())
                                .is_some_and(|o| o.is_lt()));
                    Some(if better { i } else { b })
                }
            };
        }
        let Some(b) = best else { break };
        taken[b] = true;
        order.push(b);
        for i in 0..points.len() {
            nearest[i] = nearest[i].min(dist(&points[i], &points[b]));
        }
    }
    order
}

/// One signed whitened coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Driver {
    pub factor: String,
    pub index: usize,
    /// Signed whitened value.
    pub value: f64,
    pub magnitude: f64,
}

/// The `k` whitened coordinates of `s` with largest absolute value.
pub fn driver_decomposition(model: &ReferenceModel, s: &ScenarioVector, k: usize) -> Result<Vec<Driver>> {
    if k > model.dim() {
        return Err(Error::invalid(
            "k",
            format!("asked for {k} drivers of a {}-factor model", model.dim()),
        ));
    }
    let y = model.whiten(s)?;
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| y[b].abs().total_cmp(&y[a].abs()).then(a.cmp(&b)));
    Ok(idx
        .into_iter()
        .take(k)
        .map(|j| Driver {
            factor: model.factor_names()[j].clone(),
            index: j,
            value: y[j],
            magnitude: y[j].abs(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub s: Vec<f64>,
    pub g: f64,
    pub ratio: f64,
    pub mahalanobis_sq: f64,
    pub tail_probability: f64,
    pub rarity: f64,
    pub drivers: Vec<Driver>,
    #[serde(flatten)]
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioList {
    pub target: Target,
    pub entries: Vec<ScenarioEntry>,
}

fn entry(
    model: &ReferenceModel,
    capital: &dyn CapitalModel,
    s: &[f64],
    origin: Origin,
    k: usize,
) -> Result<ScenarioEntry> {
    let sv = ScenarioVector::new(s.to_vec())?;
    let score = model.plausibility(&sv)?;
    Ok(ScenarioEntry {
        s: s.to_vec(),
        g: s[0],
        ratio: capital.ratio(s),
        mahalanobis_sq: score.mahalanobis_sq,
        tail_probability: score.tail_probability,
        rarity: score.rarity,
        drivers: driver_decomposition(model, &sv, k)?,
        origin,
    })
}

/// Scenario list of `p` entries: the design point followed by pool members
/// chosen by the farthest-point rule in whitened space.
pub fn reduce_farthest_point(
    model: &ReferenceModel,
    capital: &dyn CapitalModel,
    pool: &CandidatePool,
    s_star: &ScenarioVector,
    p: usize,
    k: usize,
) -> Result<ScenarioList> {
    if p == 0 {
        return Err(Error::invalid("list size", "must be at least 1"));
    }
    if p > 1 && pool.members.is_empty() {
        return Err(Error::InsufficientData("empty candidate pool".into()));
    }
    if p > pool.members.len() + 1 {
        return Err(Error::InsufficientData(format!(
            "asked for {p} scenarios from a pool of {}",
            pool.members.len()
        )));
    }
    let y_pool: Vec<Vec<f64>> = pool.members.iter().map(|m| model.whiten_slice(&m.s)).collect();
    let y_star = model.whiten(s_star)?;
    let mut entries = vec![entry(model, capital, s_star.as_slice(), Origin::DesignPoint, k)?];
    for i in farthest_point_order(&y_pool, &y_star, p - 1) {
        let m = &pool.members[i];
        entries.push(entry(model, capital, &m.s, m.origin.clone(), k)?);
    }
    Ok(ScenarioList {
        target: pool.target,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capital::AffineCapital;
    use crate::solver::solve_design_point;

    fn setup() -> (ReferenceModel, AffineCapital) {
        (
            ReferenceModel::identity(2).unwrap(),
            AffineCapital::new(1.0, vec![-0.1, -0.1], 0.6),
        )
    }

    fn sv(v: &[f64]) -> ScenarioVector {
        ScenarioVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn membership_boundaries() {
        let (model, cap) = setup();
        let star = sv(&[2.0, 2.0]);
        let eta = Target::Neighbourhood { radius_eta: 1.0 };
        let eps = Target::NearOptimal { epsilon: 2.0 };
        assert!(membership(eta, &model, &cap, &star, &star).unwrap());
        assert!(membership(eps, &model, &cap, &star, &star).unwrap());
        // d² = 8 + 2 exactly and g + x ≥ 4.
        assert!(membership(eps, &model, &cap, &sv(&[1.0, 3.0]), &star).unwrap());
        assert!(!membership(eps, &model, &cap, &sv(&[1.0, 3.0 + 1e-9]), &star).unwrap());
        // d²(s − s*) = 1.01 > η.
        let far = sv(&[2.0 + 1.01f64.sqrt(), 2.0]);
        assert!(!membership(eta, &model, &cap, &far, &star).unwrap());
        // Not breaching.
        assert!(!membership(eta, &model, &cap, &sv(&[1.9, 1.9]), &star).unwrap());
        assert!(Target::NearOptimal { epsilon: -1.0 }.validate().is_err());
        assert!(Target::Neighbourhood { radius_eta: 0.0 }.validate().is_err());
    }

    #[test]
    fn local_sample_trivial_cases() {
        let model = ReferenceModel::identity(3).unwrap();
        let anchor = [0.5, -1.0, 2.0];
        let all = |_: &[f64]| true;
        let copies = local_sample(&model, &anchor, (0.0, 0.0), 25, 1, &all).unwrap();
        assert_eq!(copies.accepted.len(), 25);
        assert!(copies.accepted.iter().all(|s| s == &anchor.to_vec()));
        let spread = local_sample(&model, &anchor, (0.5, 1.0), 100, 1, &all).unwrap();
        assert_eq!(spread.acceptance_rate, 1.0);
        assert!(!spread.thin);
        for s in &spread.accepted {
            let r = whitened_distance(&model, s, &anchor);
            assert!((0.5 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
        let none = local_sample(&model, &anchor, (0.5, 1.0), 200, 1, &|_: &[f64]| false).unwrap();
        assert!(none.thin);
    }

    #[test]
    fn sphere_directions_are_centred() {
        let model = ReferenceModel::identity(4).unwrap();
        let zero = [0.0; 4];
        let res = local_sample(&model, &zero, (1.0, 1.0), 100_000, 7, &|_: &[f64]| true).unwrap();
        let mut mean = [0.0; 4];
        for s in &res.accepted {
            for j in 0..4 {
                mean[j] += s[j] / 1e5;
            }
        }
        let n: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n <= 0.02, "{mean:?}");
    }

    #[test]
    fn hit_and_run_singleton_stalls() {
        let model = ReferenceModel::identity(2).unwrap();
        let start = [0.3, 0.4];
        let only = move |s: &[f64]| s == start;
        let chain = hit_and_run(&model, &start, 20, 3, &only).unwrap();
        assert!(chain.points.iter().all(|p| p == &start.to_vec()));
        assert_eq!(chain.stalls, 20);
        assert!(chain.stalled);
        assert!(hit_and_run(&model, &[5.0, 5.0], 5, 3, &only).is_err());
    }

    #[test]
    fn hit_and_run_stays_in_ball() {
        let model = ReferenceModel::identity(3).unwrap();
        let ball = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>() <= 4.0;
        let chain = hit_and_run(&model, &[0.0; 3], 2000, 11, &ball).unwrap();
        assert!(chain.points.iter().all(|p| ball(p)));
        assert_eq!(chain.stalls, 0);
    }

    #[test]
    fn farthest_point_hand_trace() {
        let pool: Vec<Vec<f64>> = [0.0, 1.0, 2.0, 10.0].iter().map(|v| vec![*v]).collect();
        let order = farthest_point_order(&pool, &[0.0], 2);
        let picked: Vec<f64> = order.iter().map(|&i| pool[i][0]).collect();
        assert_eq!(picked, vec![10.0, 2.0]);
        assert!(farthest_point_order(&pool, &[0.0], 0).is_empty());
    }

    #[test]
    fn farthest_point_duplicates_are_deterministic() {
        let pool = vec![vec![1.0, 1.0]; 5];
        let a = farthest_point_order(&pool, &[1.0, 1.0], 3);
        let b = farthest_point_order(&pool, &[1.0, 1.0], 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn driver_examples() {
        let model = ReferenceModel::identity(3).unwrap();
        let d = driver_decomposition(&model, &sv(&[0.1, -3.2, 0.5]), 1).unwrap();
        assert_eq!(d[0].index, 1);
        assert_eq!(d[0].factor, "x1");
        assert_eq!(d[0].value, -3.2);
        assert_eq!(d[0].magnitude, 3.2);
        let z = driver_decomposition(&model, &ScenarioVector::zeros(3), 3).unwrap();
        assert!(z.iter().all(|d| d.magnitude == 0.0));
        assert!(driver_decomposition(&model, &ScenarioVector::zeros(3), 4).is_err());
    }

    #[test]
    fn pool_and_list_on_half_plane() {
        let (model, cap) = setup();
        let c = ConstraintSet::default();
        let solver = SolverConfig {
            n_starts: 8,
            ..SolverConfig::default()
        };
        let design = solve_design_point(&model, &cap, &c, &solver).unwrap();
        let target = Target::NearOptimal { epsilon: 3.0 };
        let cfg = PoolConfig {
            n_target: 300,
            g_grid: vec![1.0, 2.0, 3.0],
            ..PoolConfig::default()
        };
        let pool = build_pool(&model, &cap, &c, &solver, &design, target, &cfg).unwrap();
        let grid: Vec<Vec<f64>> = pool
            .anchors
            .iter()
            .filter(|a| matches!(a.origin, Origin::GridAnchor { .. }))
            .map(|a| a.s.clone())
            .collect();
        // (2,2) duplicates the design point; the other two slices survive.
        assert_eq!(grid.len(), 2);
        assert!((grid[0][0] - 1.0).abs() < 1e-12 && (grid[0][1] - 3.0).abs() < 1e-8);
        assert!((grid[1][0] - 3.0).abs() < 1e-12 && (grid[1][1] - 1.0).abs() < 1e-8);
        assert!(pool.members.len() >= 300);
        let member = Membership::new(target, &model, &cap, &design.s_star).unwrap();
        assert!(pool.members.iter().all(|m| member.contains(&m.s)));
        let list = reduce_farthest_point(&model, &cap, &pool, &design.s_star, 6, 2).unwrap();
        assert_eq!(list.entries.len(), 6);
        assert_eq!(list.entries[0].s, design.s_star.as_slice().to_vec());
        for e in &list.entries {
            assert!(member.contains(&e.s));
            assert!(e.mahalanobis_sq <= design.mahalanobis_sq + 3.0 + 1e-9);
        }
    }

    #[test]
    fn zero_slack_collapses_to_design_point() {
        let (model, cap) = setup();
        let c = ConstraintSet::default();
        let solver = SolverConfig {
            n_starts: 4,
            ..SolverConfig::default()
        };
        let design = solve_design_point(&model, &cap, &c, &solver).unwrap();
        let cfg = PoolConfig {
            n_target: 50,
            ..PoolConfig::default()
        };
        let pool = build_pool(
            &model,
            &cap,
            &c,
            &solver,
            &design,
            Target::NearOptimal { epsilon: 0.0 },
            &cfg,
        )
        .unwrap();
        for m in &pool.members {
            assert!(whitened_distance(&model, &m.s, design.s_star.as_slice()) < 1e-6);
        }
    }
}
