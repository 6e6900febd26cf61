//! Configuration-driven experiment runs: mesh and transport setup, one
//! eigenpair per exponent, level-set sweeps and the files they produce.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::cheeger::{
    marching_squares, sweep_levels, AreaMethod, CheegerError, LevelSetReport, RatioMode,
    SweepOptions, DEFAULT_LEVELS, DEFAULT_REFINE_TOL,
};
use crate::dynamics::{
    precompute_transport, CacheStatus, CylinderParams, FlowError, FlowKind, FlowMap,
    TransportCache, TransportData, STANDARD_MAP_A,
};
use crate::eigensolver::{
    init_p2, solve_first, solve_second, EigenError, EigenPair, Initialization, LadderMode,
    SolverParams, Which,
};
use crate::fem::{natural_constraint, read_dump, write_dump, FemError, PSetting};
use crate::mesh::{Domain, Mesh, MeshError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("mesh {found} does not match the flow domain {expected}")]
    SignatureMismatch { expected: String, found: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Cheeger(#[from] CheegerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    StaticSquare,
    DoubleGyre,
    Cylinder,
    StandardMap,
    Custom,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "static_square" => Some(Self::StaticSquare),
            "double_gyre" => Some(Self::DoubleGyre),
            "cylinder" => Some(Self::Cylinder),
            "standard_map" => Some(Self::StandardMap),
            "custom" => Some(Self::Custom),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::StaticSquare => "static_square",
            Self::DoubleGyre => "double_gyre",
            Self::Cylinder => "cylinder",
            Self::StandardMap => "standard_map",
            Self::Custom => "custom",
        }
    }

    pub fn default_grid(&self) -> (usize, usize) {
        match self {
            Self::Cylinder => (200, 100),
            _ => (100, 100),
        }
    }

    pub fn default_flow(&self) -> FlowMap {
        match self {
            Self::StaticSquare | Self::Custom => FlowMap::identity(),
            Self::DoubleGyre => FlowMap::transitory_double_gyre(),
            Self::Cylinder => FlowMap::cylinder_flow(),
            Self::StandardMap => FlowMap::standard_map(STANDARD_MAP_A),
        }
    }

    pub fn default_mode(&self) -> RatioMode {
        match self {
            Self::StaticSquare => RatioMode::Static,
            Self::DoubleGyre | Self::Cylinder => RatioMode::DynamicDirichlet,
            Self::StandardMap => RatioMode::DynamicNeumann,
            Self::Custom => RatioMode::DynamicDirichlet,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parse a flow description such as `identity`, `double_gyre`,
/// `double_gyre:time=0.5`, `cylinder:time=40,eps=0.25` or
/// `standard_map:a=0.971635`.
pub fn parse_flow_spec(spec: &str) -> Result<FlowMap, String> {
    let (name, args) = match spec.split_once(':') {
        Some((n, a)) => (n.trim(), a.trim()),
        None => (spec.trim(), ""),
    };
    let mut map = match name {
        "identity" => FlowMap::identity(),
        "double_gyre" => FlowMap::transitory_double_gyre(),
        "cylinder" => FlowMap::cylinder_flow(),
        "standard_map" => FlowMap::standard_map(STANDARD_MAP_A),
        _ => return Err(format!("unknown flow {name:?}")),
    };
    for kv in args.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("expected key=value in flow spec, got {kv:?}"))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| format!("bad number in flow spec: {v:?}"))?;
        match (&mut map.kind, k.trim()) {
            (FlowKind::StandardMap { a }, "a") => *a = v,
            (FlowKind::TransitoryDoubleGyre | FlowKind::CylinderFlow(_), "time") => {
                map.flow_time = v
            }
            (FlowKind::CylinderFlow(CylinderParams { c, .. }), "c") => *c = v,
            (FlowKind::CylinderFlow(CylinderParams { nu, .. }), "nu") => *nu = v,
            (FlowKind::CylinderFlow(CylinderParams { epsilon, .. }), "eps") => *epsilon = v,
            _ => return Err(format!("flow {name:?} has no parameter {k:?}")),
        }
    }
    Ok(map)
}

/// Parse a domain name: `unit_square`, `torus` (2π × 2π) or `cylinder`
/// (circumference 2π, height π).
pub fn parse_domain(s: &str) -> Result<Domain, String> {
    match s {
        "unit_square" | "square" => Ok(Domain::unit_square()),
        "torus" => Domain::torus(2.0 * std::f64::consts::PI, 2.0 * std::f64::consts::PI)
            .map_err(|e| e.to_string()),
        "cylinder" => Domain::cylinder(2.0 * std::f64::consts::PI, std::f64::consts::PI)
            .map_err(|e| e.to_string()),
        _ => Err(format!("unknown domain {s:?}")),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub nx: usize,
    pub ny: usize,
    pub p_values: Vec<f64>,
    pub solver: SolverParams,
    pub mode: RatioMode,
    pub n_levels: usize,
    pub refine_tol: f64,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
    pub ladder: LadderMode,
    pub flow: FlowMap,
    /// Only used for `custom` runs with the identity flow.
    pub domain: Domain,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        let (nx, ny) = experiment.default_grid();
        Self {
            experiment,
            nx,
            ny,
            p_values: vec![2.0, 1.6, 1.3],
            solver: SolverParams::default(),
            mode: experiment.default_mode(),
            n_levels: DEFAULT_LEVELS,
            refine_tol: DEFAULT_REFINE_TOL,
            output_dir: PathBuf::from("out").join(experiment.as_str()),
            cache_dir: None,
            workers: 1,
            ladder: LadderMode::Cold,
            flow: experiment.default_flow(),
            domain: Domain::unit_square(),
        }
    }

    /// Set one `key = value` entry. The experiment key resets defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let num = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number {v:?} for {key}"));
        let count = |v: &str| v.parse::<usize>().map_err(|_| format!("bad count {v:?} for {key}"));
        match key {
            "experiment" => {
                let kind = ExperimentKind::parse(value)
                    .ok_or_else(|| format!("unknown experiment {value:?}"))?;
                *self = Self::new(kind);
            }
            "grid" => {
                let (a, b) = value
                    .split_once(['x', 'X'])
                    .ok_or_else(|| format!("grid must look like 100x100, got {value:?}"))?;
                self.nx = count(a.trim())?;
                self.ny = count(b.trim())?;
            }
            "nx" => self.nx = count(value)?,
            "ny" => self.ny = count(value)?,
            "p_values" | "p" => {
                self.p_values = value
                    .split(',')
                    .map(|s| num(s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "alpha" => self.solver.alpha = num(value)?,
            "grad_tol" => self.solver.grad_tol = num(value)?,
            "step_tol" => self.solver.step_tol = num(value)?,
            "max_iter" => self.solver.max_iter = count(value)?,
            "max_halvings" => self.solver.max_halvings = count(value)?,
            "ratio_mode" | "mode" => {
                self.mode =
                    RatioMode::parse(value).ok_or_else(|| format!("unknown ratio mode {value:?}"))?
            }
            "levels" | "n_levels" => self.n_levels = count(value)?,
            "refine_tol" => self.refine_tol = num(value)?,
            "out" | "output_dir" => self.output_dir = PathBuf::from(value),
            "cache" | "cache_dir" => {
                self.cache_dir = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "workers" => self.workers = count(value)?.max(1),
            "init" => {
                self.ladder = match value {
                    "p2" | "cold" => LadderMode::Cold,
                    "warm" => LadderMode::Warm,
                    _ => return Err(format!("init must be p2 or warm, got {value:?}")),
                }
            }
            "flow" => self.flow = parse_flow_spec(value)?,
            "domain" => self.domain = parse_domain(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parse a flat `key = value` file; `#` starts a comment. An
    /// `experiment` line, if present, must come first.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg = Self::new(ExperimentKind::StaticSquare);
        let mut seen_other = false;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ExperimentError::Config {
                line: k + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "experiment" && seen_other {
                return Err(ExperimentError::Config {
                    line: k + 1,
                    msg: "experiment must be set before other keys".into(),
                });
            }
            seen_other |= key != "experiment";
            cfg.set(key, value)
                .map_err(|msg| ExperimentError::Config { line: k + 1, msg })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.p_values.is_empty() {
            return Err(invalid("p_values is empty"));
        }
        for &p in &self.p_values {
            PSetting::new(p).map_err(|e| invalid(e.to_string()))?;
        }
        if self.ladder == LadderMode::Warm && self.p_values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("warm starts need strictly descending p_values"));
        }
        if self.n_levels == 0 {
            return Err(invalid("levels must be positive"));
        }
        self.solver.validate()?;
        Ok(())
    }

    /// The domain the run takes place on.
    pub fn run_domain(&self) -> Domain {
        match self.experiment {
            ExperimentKind::StaticSquare => Domain::unit_square(),
            _ => self.flow.natural_domain().unwrap_or(self.domain),
        }
    }

    /// The map used for transport and evolved lengths.
    pub fn run_flow(&self) -> FlowMap {
        match self.experiment {
            ExperimentKind::StaticSquare => FlowMap::identity(),
            _ => self.flow,
        }
    }

    pub fn sweep_options(&self, mesh: &Mesh) -> SweepOptions {
        SweepOptions {
            n_levels: self.n_levels,
            area: AreaMethod::natural(mesh),
            refine_tol: self.refine_tol,
        }
    }

    /// Echo of the effective configuration in the file format.
    pub fn to_text(&self) -> String {
        let p: Vec<String> = self.p_values.iter().map(|p| format!("{p}")).collect();
        let mut s = String::new();
        s.push_str(&format!("experiment = {}\n", self.experiment));
        s.push_str(&format!("grid = {}x{}\n", self.nx, self.ny));
        s.push_str(&format!("p_values = {}\n", p.join(",")));
        s.push_str(&format!("alpha = {}\n", self.solver.alpha));
        s.push_str(&format!("grad_tol = {}\n", self.solver.grad_tol));
        s.push_str(&format!("step_tol = {}\n", self.solver.step_tol));
        s.push_str(&format!("max_iter = {}\n", self.solver.max_iter));
        s.push_str(&format!("max_halvings = {}\n", self.solver.max_halvings));
        s.push_str(&format!("ratio_mode = {}\n", self.mode.as_str()));
        s.push_str(&format!("levels = {}\n", self.n_levels));
        s.push_str(&format!("refine_tol = {}\n", self.refine_tol));
        s.push_str(&format!(
            "init = {}\n",
            if self.ladder == LadderMode::Warm { "warm" } else { "p2" }
        ));
        s
    }
}

/// Files written for one exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct PArtifacts {
    pub p: f64,
    pub eigenfunction: PathBuf,
    pub log: PathBuf,
    pub metadata: PathBuf,
    pub levels: Option<PathBuf>,
    pub contour: Option<PathBuf>,
}

/// Outcome of one exponent.
#[derive(Debug, Clone)]
pub struct PResult {
    pub p: f64,
    pub pair: Option<EigenPair>,
    pub report: Option<LevelSetReport>,
    pub error: Option<String>,
    pub artifacts: Option<PArtifacts>,
}

impl PResult {
    pub fn converged(&self) -> bool {
        self.error.is_none()
            && self
                .pair
                .as_ref()
                .is_some_and(|p| p.termination.is_success())
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: PathBuf,
    pub run_metadata: PathBuf,
    pub cache_status: CacheStatus,
    pub results: Vec<PResult>,
}

impl RunArtifacts {
    pub fn all_converged(&self) -> bool {
        self.results.iter().all(PResult::converged)
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        let mut v = vec![self.summary.clone(), self.run_metadata.clone()];
        for r in &self.results {
            if let Some(a) = &r.artifacts {
                v.extend([a.eigenfunction.clone(), a.log.clone(), a.metadata.clone()]);
                v.extend(a.levels.iter().cloned());
                v.extend(a.contour.iter().cloned());
            }
        }
        v
    }
}

/// `p1.60`-style tag used in file names.
pub fn p_tag(p: f64) -> String {
    format!("p{p:.2}")
}

fn load_transport(
    cfg: &ExperimentConfig,
    flow: &FlowMap,
    mesh: &Mesh,
) -> Result<(TransportData, CacheStatus), ExperimentError> {
    Ok(match &cfg.cache_dir {
        Some(dir) => TransportCache::new(dir).load_or_compute(flow, mesh)?,
        None if flow.kind == FlowKind::Identity => {
            (TransportData::identity(mesh), CacheStatus::Bypassed)
        }
        None => (precompute_transport(flow, mesh)?, CacheStatus::Bypassed),
    })
}

fn create(path: &Path) -> io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

struct Setup {
    mesh: Mesh,
    flow: FlowMap,
    transport: TransportData,
    which: Which,
}

fn solve_one(
    cfg: &ExperimentConfig,
    s: &Setup,
    p: f64,
    start: &EigenPair,
    init: Initialization,
) -> (Option<EigenPair>, Option<String>) {
    let setting = match PSetting::new(p) {
        Ok(v) => v,
        Err(e) => return (None, Some(e.to_string())),
    };
    let res = match s.which {
        Which::First => solve_first(setting, &s.mesh, &s.transport, &cfg.solver, &start.u),
        Which::Second => solve_second(setting, &s.mesh, &s.transport, &cfg.solver, &start.u),
    };
    match res {
        Ok(mut pair) => {
            pair.init = init;
            (Some(pair), None)
        }
        Err(EigenError::MaxIterations(pair)) => {
            let msg = format!("p = {p}: iteration budget exhausted");
            let mut pair = *pair;
            pair.init = init;
            (Some(pair), Some(msg))
        }
        Err(e) => (None, Some(format!("p = {p}: {e}"))),
    }
}

fn write_p_artifacts(
    cfg: &ExperimentConfig,
    s: &Setup,
    pair: &EigenPair,
) -> Result<(PArtifacts, Option<LevelSetReport>, Option<String>), ExperimentError> {
    let dir = &cfg.output_dir;
    let tag = p_tag(pair.p);
    let eigenfunction = dir.join(format!("eigenfunction_{tag}.txt"));
    let log = dir.join(format!("convergence_{tag}.csv"));
    let metadata = dir.join(format!("eigenpair_{tag}.json"));
    {
        let mut w = create(&eigenfunction)?;
        write_dump(&s.mesh, &pair.u, &mut w)?;
        w.flush()?;
    }
    {
        let mut w = create(&log)?;
        pair.write_log(&mut w)?;
        w.flush()?;
    }
    {
        let mut w = create(&metadata)?;
        pair.write_metadata(&mut w)?;
        w.flush()?;
    }
    let mut art = PArtifacts {
        p: pair.p,
        eigenfunction,
        log,
        metadata,
        levels: None,
        contour: None,
    };
    let report = match sweep_levels(&s.mesh, &pair.u, &s.flow, cfg.mode, &cfg.sweep_options(&s.mesh)) {
        Ok(r) => r,
        Err(e) => return Ok((art, None, Some(format!("p = {}: level sweep failed: {e}", pair.p)))),
    };
    let levels = dir.join(format!("levels_{tag}.csv"));
    {
        let mut w = create(&levels)?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    let contour = dir.join(format!("contour_{tag}.txt"));
    {
        let mut w = create(&contour)?;
        marching_squares(&s.mesh, &pair.u, report.argmin_level).write_dump(&mut w)?;
        w.flush()?;
    }
    art.levels = Some(levels);
    art.contour = Some(contour);
    Ok((art, Some(report), None))
}

fn nan_or(v: Option<f64>) -> String {
    format!("{:.16e}", v.unwrap_or(f64::NAN))
}

/// Run every exponent of `cfg`, writing artifacts under its output
/// directory. Solver failures are recorded per exponent; other errors abort.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, ExperimentError> {
    cfg.validate()?;
    let domain = cfg.run_domain();
    let flow = cfg.run_flow();
    let mesh = Mesh::build(domain, cfg.nx, cfg.ny)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let (transport, cache_status) = load_transport(cfg, &flow, &mesh)?;
    let which = if domain.has_boundary() {
        Which::First
    } else {
        Which::Second
    };
    let setup = Setup {
        mesh,
        flow,
        transport,
        which,
    };
    log::info!(
        "{}: mesh {}, flow {}, transport {:?}",
        cfg.experiment,
        setup.mesh.signature(),
        setup.flow.description(),
        cache_status
    );
    let init = init_p2(&setup.mesh, &setup.transport, which, &natural_constraint(&setup.mesh))?;

    let solved: Vec<(f64, Option<EigenPair>, Option<String>)> = match cfg.ladder {
        LadderMode::Cold => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| invalid(e.to_string()))?;
            pool.install(|| {
                cfg.p_values
                    .par_iter()
                    .map(|&p| {
                        let (pair, err) = solve_one(cfg, &setup, p, &init, Initialization::LinearP2);
                        (p, pair, err)
                    })
                    .collect()
            })
        }
        LadderMode::Warm => {
            let mut out: Vec<(f64, Option<EigenPair>, Option<String>)> = Vec::new();
            for &p in &cfg.p_values {
                let prev = out.iter().rev().find_map(|(_, pair, _)| pair.as_ref());
                let (start, how) = match prev {
                    Some(prev) => (prev, Initialization::Warm { from_p: prev.p }),
                    None => (&init, Initialization::LinearP2),
                };
                let (pair, err) = solve_one(cfg, &setup, p, start, how);
                out.push((p, pair, err));
            }
            out
        }
    };

    let mut results = Vec::with_capacity(solved.len());
    for (p, pair, mut error) in solved {
        if let Some(e) = &error {
            log::error!("{e}");
        }
        let (artifacts, report) = match &pair {
            Some(pair) => {
                let (a, r, e) = write_p_artifacts(cfg, &setup, pair)?;
                if let Some(e) = e {
                    log::error!("{e}");
                    error.get_or_insert(e);
                }
                (Some(a), r)
            }
            None => (None, None),
        };
        results.push(PResult {
            p,
            pair,
            report,
            error,
            artifacts,
        });
    }

    let summary = cfg.output_dir.join("summary.csv");
    {
        let mut w = create(&summary)?;
        writeln!(w, "p,lambda,iterations,best_ratio,best_level,median_ratio")?;
        for r in &results {
            let iterations = r
                .pair
                .as_ref()
                .map_or_else(|| "NaN".to_string(), |p| p.iterations.to_string());
            writeln!(
                w,
                "{:.16e},{},{},{},{},{}",
                r.p,
                nan_or(r.pair.as_ref().map(|p| p.lambda)),
                iterations,
                nan_or(r.report.as_ref().map(|x| x.min_ratio)),
                nan_or(r.report.as_ref().map(|x| x.argmin_level)),
                nan_or(r.report.as_ref().map(|x| x.median_ratio)),
            )?;
        }
        w.flush()?;
    }
    let run_metadata = cfg.output_dir.join("run.json");
    {
        let mut w = create(&run_metadata)?;
        writeln!(w, "{{")?;
        writeln!(w, "  \"experiment\": \"{}\",", cfg.experiment)?;
        writeln!(w, "  \"mesh\": \"{}\",", setup.mesh.signature())?;
        writeln!(w, "  \"flow\": \"{}\",", setup.flow.description())?;
        writeln!(w, "  \"ratio_mode\": \"{}\",", cfg.mode.as_str())?;
        writeln!(w, "  \"eigenpair\": \"{}\",", if which == Which::First { "first" } else { "second" })?;
        writeln!(w, "  \"p2_lambda\": {:.16e},", init.lambda)?;
        writeln!(w, "  \"max_volume_defect\": {:.16e},", setup.transport.max_volume_defect())?;
        let converged: Vec<String> = results.iter().map(|r| r.converged().to_string()).collect();
        writeln!(w, "  \"converged\": [{}]", converged.join(", "))?;
        writeln!(w, "}}")?;
        w.flush()?;
    }
    let mut cfg_echo = create(&cfg.output_dir.join("config.txt"))?;
    cfg_echo.write_all(cfg.to_text().as_bytes())?;
    cfg_echo.flush()?;

    Ok(RunArtifacts {
        dir: cfg.output_dir.clone(),
        summary,
        run_metadata,
        cache_status,
        results,
    })
}

/// Re-run the level sweep on a saved eigenfunction.
pub fn analyze(
    eigenfunction: &Path,
    flow: &FlowMap,
    mode: RatioMode,
    n_levels: usize,
    refine_tol: f64,
) -> Result<LevelSetReport, ExperimentError> {
    let (mesh, u) = read_dump(BufReader::new(File::open(eigenfunction)?))?;
    if let Some(d) = flow.natural_domain() {
        if d.signature() != mesh.domain().signature() {
            return Err(ExperimentError::SignatureMismatch {
                expected: d.signature(),
                found: mesh.signature(),
            });
        }
    }
    let opts = SweepOptions {
        n_levels,
        area: AreaMethod::natural(&mesh),
        refine_tol,
    };
    Ok(sweep_levels(&mesh, &u, flow, mode, &opts)?)
}
