//! Config-driven runs: ingestion, solve, scenario lists and reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capital::{
    risk_weight, tangent_alpha, CapitalModel, CapitalState, LossBasis, PortfolioCapital, RwaMode, DEFAULT_DEPLETION,
};
use crate::error::{check_dim, Error, Result};
use crate::io;
use crate::loss::{loss_quantile, mc_loss_quantile, LossQuantileSpec, McEstimate};
use crate::reference::{estimate_covariance, Family, ReferenceModel, RidgePolicy, ScenarioVector};
use crate::sector::{aggregate_sectors, SectorCapital, SectorPortfolio};
use crate::sets::{build_pool, reduce_farthest_point, Membership, PoolConfig, ScenarioList, Target};
use crate::solver::{solve_design_point, ConstraintSet, DesignPointResult, SolverConfig};
use crate::transmission::{Portfolio, SoftClip, TransmissionOptions};

pub const ENGINE_NAME: &str = "revstress";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const DEFAULT_QUANTILE: f64 = 0.999;
pub const DEFAULT_POOL_SIZE: usize = 2000;
pub const DEFAULT_LIST_SIZE: usize = 8;
pub const DEFAULT_DRIVERS: usize = 3;
pub const DEFAULT_G_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    #[default]
    Gaussian,
    StudentT,
}

/// Where the scenario covariance comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub covariance: Option<PathBuf>,
    /// Factor history used when no covariance file is given.
    pub history: Option<PathBuf>,
    #[serde(default)]
    pub family: FamilyName,
    pub nu: Option<f64>,
    /// Fixed ridge added to an estimated covariance; absent means add one only
    /// when the estimate is singular.
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioConfig {
    pub exposures: Option<PathBuf>,
    pub sensitivities: Option<PathBuf>,
    /// Sector-level portfolio; replaces `exposures` and `sensitivities`.
    pub sectors: Option<PathBuf>,
    #[serde(default = "yes")]
    pub sign_constraints: bool,
    #[serde(default)]
    pub lgd_saturation: SoftClip,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub q: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { q: DEFAULT_QUANTILE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RwaModeName {
    #[default]
    Constant,
    IrbFull,
    /// Coefficients from `alpha_file`, or tangent to the IRB RWA at baseline.
    Linear,
    /// Risk weights linear in PD, tangent to the IRB risk weight at baseline.
    LinearRiskWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapitalConfig {
    pub cet1_0: f64,
    pub rwa_0: f64,
    #[serde(default = "default_depletion")]
    pub depletion: f64,
    pub r_star: Option<f64>,
    #[serde(default)]
    pub rwa_mode: RwaModeName,
    pub alpha_file: Option<PathBuf>,
    #[serde(default = "yes")]
    pub maturity_adjustment: bool,
    #[serde(default)]
    pub loss_basis: LossBasis,
    pub pnl_noncredit: Option<Vec<f64>>,
}

fn default_depletion() -> f64 {
    DEFAULT_DEPLETION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetName {
    Neighbourhood,
    #[default]
    NearOptimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub target: TargetName,
    /// Squared whitened radius of the neighbourhood around the design point.
    pub eta: f64,
    /// Allowed excess in `d²` over the design point.
    pub epsilon: f64,
    pub pool: usize,
    pub list: usize,
    pub drivers: usize,
    pub g_grid_points: usize,
    pub g_grid: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            target: TargetName::default(),
            eta: 1.0,
            epsilon: 1.0,
            pool: DEFAULT_POOL_SIZE,
            list: DEFAULT_LIST_SIZE,
            drivers: DEFAULT_DRIVERS,
            g_grid_points: 8,
            g_grid: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn target(&self) -> Target {
        match self.target {
            TargetName::Neighbourhood => Target::Neighbourhood { radius_eta: self.eta },
            TargetName::NearOptimal => Target::NearOptimal { epsilon: self.epsilon },
        }
    }
}

/// Everything a run needs. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub reference: ReferenceConfig,
    pub portfolio: PortfolioConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub capital: CapitalConfig,
    #[serde(default)]
    pub constraints: ConstraintSet,
    /// `solver.seed` is ignored; the top-level `seed` drives every stream.
    #[serde(default)]
    pub solver: SolverConfig,
    /// Present when a scenario list is requested.
    pub scenarios: Option<ScenarioConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse("<config>", e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// SHA-256 of the effective configuration, ignoring where output goes.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.solver.seed = self.seed;
        canonical.output_dir = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            seed: self.seed,
            ..self.solver.clone()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    /// As written in the config.
    pub path: PathBuf,
    pub sha256: String,
}

/// Capital engine at either granularity.
pub enum Engine {
    Exposure(PortfolioCapital),
    Sector {
        sectors: SectorPortfolio,
        capital: SectorCapital,
    },
}

impl Engine {
    pub fn capital(&self) -> &dyn CapitalModel {
        match self {
            Engine::Exposure(c) => c,
            Engine::Sector { capital, .. } => capital,
        }
    }

    pub fn portfolio(&self) -> &Portfolio {
        match self {
            Engine::Exposure(c) => c.portfolio(),
            Engine::Sector { sectors, .. } => sectors.as_portfolio(),
        }
    }
}

/// Parsed and cross-checked inputs of a run.
pub struct Inputs {
    pub model: ReferenceModel,
    pub engine: Engine,
    pub state: CapitalState,
    pub spec: LossQuantileSpec,
    pub files: Vec<InputFile>,
}

fn file_record(cfg: &RunConfig, role: &str, p: &Path) -> Result<InputFile> {
    let full = cfg.resolve(p);
    let bytes = std::fs::read(&full).map_err(|source| Error::Io { path: full, source })?;
    Ok(InputFile {
        role: role.to_string(),
        path: p.to_path_buf(),
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

fn load_reference(cfg: &RunConfig, files: &mut Vec<InputFile>) -> Result<ReferenceModel> {
    let r = &cfg.reference;
    let family = match r.family {
        FamilyName::Gaussian => Family::Gaussian,
        FamilyName::StudentT => Family::StudentT {
            nu: r.nu.ok_or_else(|| Error::invalid("nu", "student_t family needs nu"))?,
        },
    };
    match (&r.covariance, &r.history) {
        (Some(p), None) => {
            let (sigma, names) = io::read_covariance(&cfg.resolve(p))?;
            files.push(file_record(cfg, "covariance", p)?);
            ReferenceModel::new(sigma, family, names)
        }
        (None, Some(p)) => {
            let (history, names) = io::read_history(&cfg.resolve(p))?;
            files.push(file_record(cfg, "history", p)?);
            let ridge = r.ridge.map_or(RidgePolicy::Fallback, RidgePolicy::Fixed);
            estimate_covariance(&history, names, family, ridge)
        }
        _ => Err(Error::invalid("reference", "give exactly one of covariance or history")),
    }
}

fn load_portfolio(cfg: &RunConfig, files: &mut Vec<InputFile>) -> Result<PortfolioOrSectors> {
    let p = &cfg.portfolio;
    let options = TransmissionOptions {
        sign_constraints: p.sign_constraints,
        lgd_saturation: p.lgd_saturation,
    };
    match (&p.exposures, &p.sensitivities, &p.sectors) {
        (Some(e), Some(s), None) => {
            let exposures = io::read_portfolio(&cfg.resolve(e))?;
            files.push(file_record(cfg, "exposures", e)?);
            let sens = io::read_sensitivities(&cfg.resolve(s))?;
            files.push(file_record(cfg, "sensitivities", s)?);
            Ok(PortfolioOrSectors::Exposures(Portfolio::new(exposures, sens, options)?))
        }
        (None, None, Some(s)) => {
            let records = io::read_sector_portfolio(&cfg.resolve(s))?;
            files.push(file_record(cfg, "sectors", s)?);
            Ok(PortfolioOrSectors::Sectors(SectorPortfolio::new(records, options)?))
        }
        (Some(_), None, None) => Err(Error::invalid("portfolio", "exposures need a sensitivities file")),
        _ => Err(Error::invalid(
            "portfolio",
            "give either exposures with sensitivities, or sectors",
        )),
    }
}

enum PortfolioOrSectors {
    Exposures(Portfolio),
    Sectors(SectorPortfolio),
}

fn rwa_mode(
    cfg: &RunConfig,
    portfolio: &Portfolio,
    spec: &LossQuantileSpec,
    files: &mut Vec<InputFile>,
) -> Result<RwaMode> {
    let c = &cfg.capital;
    let ids: Vec<String> = portfolio.exposures().iter().map(|e| e.exposure_id.clone()).collect();
    Ok(match c.rwa_mode {
        RwaModeName::Constant => RwaMode::Constant,
        RwaModeName::IrbFull => RwaMode::IrbFull,
        RwaModeName::Linear => match &c.alpha_file {
            Some(p) => {
                let alpha = io::read_alpha(&cfg.resolve(p), &ids)?;
                files.push(file_record(cfg, "alpha", p)?);
                RwaMode::Linear { alpha }
            }
            None => RwaMode::Linear {
                alpha: tangent_alpha(portfolio, spec, c.maturity_adjustment),
            },
        },
        RwaModeName::LinearRiskWeight => {
            let alpha = tangent_alpha(portfolio, spec, c.maturity_adjustment);
            let clip = portfolio.options().lgd_saturation;
            let intercept = portfolio
                .exposures()
                .iter()
                .map(|e| risk_weight(e, e.pd0, clip.apply(e.lgd0), spec, c.maturity_adjustment))
                .collect();
            let slope = portfolio
                .exposures()
                .iter()
                .zip(alpha)
                .map(|(e, a)| a / e.ead)
                .collect();
            RwaMode::LinearRiskWeight { intercept, slope }
        }
    })
}

/// Reads every input and builds the capital engine.
pub fn load(cfg: &RunConfig) -> Result<Inputs> {
    let mut files = Vec::new();
    let model = load_reference(cfg, &mut files).map_err(|e| e.at("reference model"))?;
    let holdings = load_portfolio(cfg, &mut files).map_err(|e| e.at("portfolio"))?;
    let portfolio = match &holdings {
        PortfolioOrSectors::Exposures(p) => p,
        PortfolioOrSectors::Sectors(s) => s.as_portfolio(),
    };
    check_dim(model.dim(), portfolio.dim()).map_err(|e| e.at("portfolio"))?;

    let spec = LossQuantileSpec::new(cfg.loss.q).map_err(|e| e.at("capital"))?;
    let c = &cfg.capital;
    let mode = rwa_mode(cfg, portfolio, &spec, &mut files).map_err(|e| e.at("capital"))?;
    let state = CapitalState {
        cet1_0: c.cet1_0,
        rwa_0: c.rwa_0,
        depletion: c.depletion,
        r_star_override: c.r_star,
        rwa_mode: mode,
        maturity_adjustment: c.maturity_adjustment,
        pnl_noncredit: c.pnl_noncredit.clone().unwrap_or_else(|| vec![0.0; model.dim()]),
        loss_basis: c.loss_basis,
    };
    let engine = match holdings {
        PortfolioOrSectors::Exposures(p) => PortfolioCapital::new(p, state.clone(), spec).map(Engine::Exposure),
        PortfolioOrSectors::Sectors(s) => {
            SectorCapital::new(&s, state.clone(), spec).map(|capital| Engine::Sector { sectors: s, capital })
        }
    }
    .map_err(|e| e.at("capital"))?;
    cfg.constraints.validate(model.dim()).map_err(|e| e.at("constraints"))?;
    cfg.solver.validate().map_err(|e| e.at("solver"))?;
    Ok(Inputs {
        model,
        engine,
        state,
        spec,
        files,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub q: f64,
    pub depletion: f64,
    pub g_min: f64,
    pub pool_size: usize,
    pub list_size: usize,
    pub drivers: usize,
}

impl Settings {
    pub fn defaults() -> Self {
        Self {
            q: DEFAULT_QUANTILE,
            depletion: DEFAULT_DEPLETION,
            g_min: DEFAULT_G_MIN,
            pool_size: DEFAULT_POOL_SIZE,
            list_size: DEFAULT_LIST_SIZE,
            drivers: DEFAULT_DRIVERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub engine: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub defaults: Settings,
    /// Values in force for this run.
    pub used: Settings,
    pub inputs: Vec<InputFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub family: Family,
    pub dim: usize,
    pub factor_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapitalSummary {
    pub granularity: String,
    pub cet1_0: f64,
    pub rwa_0: f64,
    pub r0: f64,
    pub depletion: f64,
    pub r_star: f64,
    pub r_star_explicit: bool,
    pub rwa_mode: RwaModeName,
    pub loss_basis: LossBasis,
    pub maturity_adjustment: bool,
    pub loss_quantile_at_baseline: f64,
    pub ratio_at_baseline: f64,
    /// `Σ EAD · RW` at `s = 0` under the IRB formula.
    pub irb_rwa_at_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorRow {
    pub sector_id: String,
    pub ead: f64,
    pub pd0: f64,
    pub lgd0: f64,
    pub pd_star: f64,
    pub lgd_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub target: Target,
    pub requested: usize,
    pub size: usize,
    pub anchors: usize,
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: Metadata,
    pub reference: ReferenceSummary,
    pub capital: CapitalSummary,
    pub design_point: DesignPointResult,
    /// Exposure-weighted PD and LGD per sector at the baseline and at the design point.
    pub sectors: Vec<SectorRow>,
    pub pool: Option<PoolSummary>,
    pub scenario_list: Option<ScenarioList>,
}

/// Pretty JSON with a trailing newline.
fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

impl Report {
    pub fn to_json(&self) -> String {
        pretty(self)
    }
}

fn capital_summary(inputs: &Inputs) -> Result<CapitalSummary> {
    let portfolio = inputs.engine.portfolio();
    let zero = ScenarioVector::zeros(inputs.model.dim());
    let clip = portfolio.options().lgd_saturation;
    let st = &inputs.state;
    let irb_rwa = portfolio
        .exposures()
        .iter()
        .map(|e| e.ead * risk_weight(e, e.pd0, clip.apply(e.lgd0), &inputs.spec, st.maturity_adjustment))
        .sum();
    Ok(CapitalSummary {
        granularity: match inputs.engine {
            Engine::Exposure(_) => "exposure",
            Engine::Sector { .. } => "sector",
        }
        .into(),
        cet1_0: st.cet1_0,
        rwa_0: st.rwa_0,
        r0: st.r0(),
        depletion: st.depletion,
        r_star: st.r_star(),
        r_star_explicit: st.r_star_override.is_some(),
        rwa_mode: match st.rwa_mode {
            RwaMode::Constant => RwaModeName::Constant,
            RwaMode::IrbFull => RwaModeName::IrbFull,
            RwaMode::Linear { .. } => RwaModeName::Linear,
            RwaMode::LinearRiskWeight { .. } => RwaModeName::LinearRiskWeight,
        },
        loss_basis: st.loss_basis,
        maturity_adjustment: st.maturity_adjustment,
        loss_quantile_at_baseline: loss_quantile(portfolio, &zero, &inputs.spec)?,
        ratio_at_baseline: inputs.engine.capital().ratio(zero.as_slice()),
        irb_rwa_at_baseline: irb_rwa,
    })
}

fn sector_table(portfolio: &Portfolio, s_star: &ScenarioVector) -> Result<Vec<SectorRow>> {
    let base = aggregate_sectors(portfolio, &ScenarioVector::zeros(portfolio.dim()))?;
    let stressed = aggregate_sectors(portfolio, s_star)?;
    Ok(base
        .into_iter()
        .zip(stressed)
        .map(|(b, s)| SectorRow {
            sector_id: b.sector_id,
            ead: b.weight_total,
            pd0: b.pd_star,
            lgd0: b.lgd_star,
            pd_star: s.pd_star,
            lgd_star: s.lgd_star,
        })
        .collect())
}

fn pool_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

/// Full pipeline: load, solve and, when `scenarios` is configured, build and
/// reduce the candidate pool.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    let inputs = load(cfg)?;
    run_with(cfg, &inputs)
}

pub fn run_with(cfg: &RunConfig, inputs: &Inputs) -> Result<Report> {
    let solver = cfg.solver_config();
    let capital = inputs.engine.capital();
    let design =
        solve_design_point(&inputs.model, capital, &cfg.constraints, &solver).map_err(|e| e.at("design point"))?;
    let sectors = sector_table(inputs.engine.portfolio(), &design.s_star).map_err(|e| e.at("sector view"))?;

    let (pool, scenario_list) = match &cfg.scenarios {
        None => (None, None),
        Some(sc) => {
            let target = sc.target();
            let pool_cfg = PoolConfig {
                n_target: sc.pool,
                g_grid: sc.g_grid.clone(),
                g_grid_points: sc.g_grid_points,
                seed: pool_seed(cfg.seed),
                ..PoolConfig::default()
            };
            let pool = build_pool(
                &inputs.model,
                capital,
                &cfg.constraints,
                &solver,
                &design,
                target,
                &pool_cfg,
            )
            .map_err(|e| e.at("candidate pool"))?;
            let list = reduce_farthest_point(
                &inputs.model,
                capital,
                &pool,
                &design.s_star,
                sc.list,
                sc.drivers.min(inputs.model.dim()),
            )
            .map_err(|e| e.at("scenario list"))?;
            let summary = PoolSummary {
                target,
                requested: sc.pool,
                size: pool.members.len(),
                anchors: pool.anchors.len(),
                shortfall: pool.shortfall,
            };
            (Some(summary), Some(list))
        }
    };

    let sc = cfg.scenarios.clone().unwrap_or_default();
    let used = Settings {
        q: inputs.spec.q,
        depletion: inputs.state.depletion,
        g_min: cfg.constraints.g_min,
        pool_size: sc.pool,
        list_size: sc.list,
        drivers: sc.drivers.min(inputs.model.dim()),
    };
    Ok(Report {
        metadata: Metadata {
            engine: ENGINE_NAME.into(),
            version: ENGINE_VERSION.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            defaults: Settings::defaults(),
            used,
            inputs: inputs.files.clone(),
        },
        reference: ReferenceSummary {
            family: inputs.model.family(),
            dim: inputs.model.dim(),
            factor_names: inputs.model.factor_names().to_vec(),
        },
        capital: capital_summary(inputs)?,
        design_point: design,
        sectors,
        pool,
        scenario_list,
    })
}

/// Rectangle over `(g, x₁)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourBounds {
    pub g: (f64, f64),
    pub x: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourRow {
    pub g: f64,
    pub x: f64,
    pub m2: f64,
    pub ratio: f64,
    pub breach: bool,
    pub in_s_eta: bool,
    pub in_n_eps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourGrid {
    pub bounds: ContourBounds,
    pub resolution: usize,
    pub design_point: Option<Vec<f64>>,
    /// Row-major: `g` outer, `x` inner.
    pub rows: Vec<ContourRow>,
}

impl ContourGrid {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io_err = |e: csv::Error| Error::parse("<contour output>", e.to_string());
        w.write_record(["g", "x", "m2", "ratio", "breach", "in_S_eta", "in_N_eps"])
            .map_err(io_err)?;
        let flag = |b: bool| if b { "1" } else { "0" }.to_string();
        for r in &self.rows {
            w.write_record([
                r.g.to_string(),
                r.x.to_string(),
                r.m2.to_string(),
                r.ratio.to_string(),
                flag(r.breach),
                flag(r.in_s_eta),
                flag(r.in_n_eps),
            ])
            .map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::parse("<contour output>", e.to_string()))?;
        Ok(())
    }
}

/// Default window: `g` from 0 and `x₁` symmetric, both reaching twice the
/// largest design-point coordinate (at least 4).
pub fn default_contour_bounds(s_star: Option<&[f64]>) -> ContourBounds {
    let reach = s_star
        .map(|s| s[..2.min(s.len())].iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .unwrap_or(0.0);
    let r = (2.0 * reach).max(4.0);
    ContourBounds {
        g: (0.0, r),
        x: (-r, r),
    }
}

/// Grid over `(g, x₁)` with remaining coordinates fixed at zero.
///
/// Membership flags use the design point of the full problem; when the
/// problem is infeasible they are all false.
pub fn emit_contours(
    cfg: &RunConfig,
    inputs: &Inputs,
    bounds: Option<ContourBounds>,
    resolution: usize,
) -> Result<ContourGrid> {
    if resolution < 2 {
        return Err(Error::invalid(
            "resolution",
            format!("need at least 2, got {resolution}"),
        ));
    }
    let d = inputs.model.dim();
    if d < 2 {
        return Err(Error::invalid("contour", "need at least two factors"));
    }
    let capital = inputs.engine.capital();
    let s_star = match solve_design_point(&inputs.model, capital, &cfg.constraints, &cfg.solver_config()) {
        Ok(r) => Some(r.s_star),
        Err(Error::Infeasible(reason)) => {
            log::warn!("no design point ({reason}); membership columns are all zero");
            None
        }
        Err(e) => return Err(e.at("design point")),
    };
    let bounds = bounds.unwrap_or_else(|| default_contour_bounds(s_star.as_ref().map(|s| s.as_slice())));
    for (lo, hi) in [bounds.g, bounds.x] {
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::invalid(
                "contour bounds",
                format!("need lo < hi, got [{lo}, {hi}]"),
            ));
        }
    }
    let sc = cfg.scenarios.clone().unwrap_or_default();
    let oracles = match &s_star {
        Some(star) => Some((
            Membership::new(
                Target::Neighbourhood { radius_eta: sc.eta },
                &inputs.model,
                capital,
                star,
            )?,
            Membership::new(
                Target::NearOptimal { epsilon: sc.epsilon },
                &inputs.model,
                capital,
                star,
            )?,
        )),
        None => None,
    };
    let step = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
    let mut rows = Vec::with_capacity(resolution * resolution);
    let mut s = vec![0.0; d];
    for i in 0..resolution {
        for j in 0..resolution {
            s[0] = step(bounds.g, i);
            s[1] = step(bounds.x, j);
            let sv = ScenarioVector::new(s.clone())?;
            let ratio = capital.ratio(&s);
            let (in_s_eta, in_n_eps) = oracles
                .as_ref()
                .map_or((false, false), |(a, b)| (a.contains(&s), b.contains(&s)));
            rows.push(ContourRow {
                g: s[0],
                x: s[1],
                m2: inputs.model.mahalanobis_sq(&sv)?,
                ratio,
                breach: capital.breach(&s),
                in_s_eta,
                in_n_eps,
            });
        }
    }
    Ok(ContourGrid {
        bounds,
        resolution,
        design_point: s_star.map(ScenarioVector::into_vec),
        rows,
    })
}

/// Outcome of a dry-run ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub config_hash: String,
    pub dim: usize,
    pub factor_names: Vec<String>,
    pub n_exposures: usize,
    pub sectors: Vec<String>,
    pub total_ead: f64,
    pub capital: CapitalSummary,
    /// Baseline breaches the threshold.
    pub breached_at_baseline: bool,
    pub warnings: Vec<String>,
    pub inputs: Vec<InputFile>,
}

impl Validation {
    pub fn to_json(&self) -> String {
        pretty(self)
    }
}

pub fn validate(cfg: &RunConfig) -> Result<Validation> {
    let inputs = load(cfg)?;
    let capital = capital_summary(&inputs)?;
    let portfolio = inputs.engine.portfolio();
    let mut warnings = Vec::new();
    if matches!(inputs.state.rwa_mode, RwaMode::IrbFull) {
        let rel = (capital.irb_rwa_at_baseline - capital.rwa_0).abs() / capital.rwa_0;
        if rel > 1e-6 {
            warnings.push(format!(
                "IRB RWA at baseline {} differs from rwa_0 {}",
                capital.irb_rwa_at_baseline, capital.rwa_0
            ));
        }
    }
    let breached = inputs.engine.capital().breach(&vec![0.0; inputs.model.dim()]);
    if breached {
        warnings.push("the baseline scenario already breaches the threshold".into());
    }
    if let Some(sc) = &cfg.scenarios {
        sc.target().validate()?;
        if sc.list == 0 {
            warnings.push("scenario list size is zero".into());
        }
    }
    Ok(Validation {
        config_hash: cfg.hash(),
        dim: inputs.model.dim(),
        factor_names: inputs.model.factor_names().to_vec(),
        n_exposures: portfolio.exposures().len(),
        sectors: portfolio.sector_ids().to_vec(),
        total_ead: portfolio.total_ead(),
        capital,
        breached_at_baseline: breached,
        warnings,
        inputs: inputs.files,
    })
}

/// Analytic versus simulated loss quantile at one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCheck {
    pub scenario: Vec<f64>,
    pub q: f64,
    pub analytic: f64,
    pub monte_carlo: McEstimate,
    /// `(analytic − MC) / SE`.
    pub z_score: f64,
    pub within_three_se: bool,
}

impl McCheck {
    pub fn to_json(&self) -> String {
        pretty(self)
    }
}

pub fn mc_check(cfg: &RunConfig, scenario: Option<Vec<f64>>, n_sims: usize, seed: u64) -> Result<McCheck> {
    let inputs = load(cfg)?;
    let d = inputs.model.dim();
    let s = ScenarioVector::new(scenario.unwrap_or_else(|| vec![0.0; d]))?;
    check_dim(d, s.dim())?;
    let portfolio = inputs.engine.portfolio();
    let analytic = loss_quantile(portfolio, &s, &inputs.spec)?;
    let mc = mc_loss_quantile(portfolio, &s, &inputs.spec, n_sims, seed).map_err(|e| e.at("monte carlo"))?;
    let z = if mc.std_error > 0.0 {
        (analytic - mc.quantile) / mc.std_error
    } else if analytic == mc.quantile {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(McCheck {
        scenario: s.into_vec(),
        q: inputs.spec.q,
        analytic,
        monte_carlo: mc,
        z_score: z,
        within_three_se: z.abs() <= 3.0,
    })
}
