//! Command-line front end: config ingestion, dispatch and artifact output.
//!
//! Each run reads one TOML config, executes one command and writes JSON
//! reports and CSV data into an output directory. Every artifact carries the
//! SHA-256 of the config bytes and the effective seed, and no timestamps, so
//! reruns with the same inputs are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{self, ChainError, StoppingRule, DEFAULT_CAP};
use crate::lattice::{self, LatticeError, QLatticeSettings, DEFAULT_SPAN_TOL};
use crate::laws::{CoefficientLaw, LawError, RegimeReport, DEFAULT_TOL_K};
use crate::pantograph::{self, BaseAtom, PantographError, PantographSpec};
use crate::rng::SeedStream;
use crate::solver::{self, GridFunction, Operator, QuadSettings, SolverError};
use crate::supercritical::{self, SupercriticalError, UpsilonSampler, DEFAULT_EPS_TAIL, DEFAULT_TERM_CAP};

/// Default output directory when neither `--out` nor the config sets one.
pub const OUT_DIR_ENV: &str = "ARCHETYPAL_OUT";
pub const FALLBACK_OUT_DIR: &str = "archetypal-out";
/// Capped-path rate above which a run warns.
pub const CAP_WARN_RATE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Classify,
    Simulate,
    Solve,
    Upsilon,
    Pantograph,
    Lattice,
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Classify => "classify",
            Command::Simulate => "simulate",
            Command::Solve => "solve",
            Command::Upsilon => "upsilon",
            Command::Pantograph => "pantograph",
            Command::Lattice => "lattice",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "archetypal",
    version,
    about = "Experiments for y(x) = E{y(alpha (x - beta))}"
)]
pub struct Args {
    pub command: Command,
    /// TOML experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `out`, then $ARCHETYPAL_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("precondition violated: {message}")]
    Precondition {
        message: String,
        report: Option<Box<RegimeReport>>,
    },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Precondition { .. } => 2,
        }
    }

    fn precondition(message: impl ToString, report: Option<RegimeReport>) -> Self {
        CliError::Precondition {
            message: message.to_string(),
            report: report.map(Box::new),
        }
    }
}

impl From<ChainError> for CliError {
    fn from(e: ChainError) -> Self {
        match e {
            ChainError::InvalidRule(_) => CliError::Config(e.to_string()),
            _ => CliError::precondition(e, None),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::QuadratureUnderflow { .. } => CliError::precondition(e, None),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<LawError> for CliError {
    fn from(e: LawError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PantographError> for CliError {
    fn from(e: PantographError) -> Self {
        match e {
            PantographError::Invalid(_) | PantographError::Law(_) | PantographError::GridTooShort { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::precondition(e, None),
        }
    }
}

impl From<LatticeError> for CliError {
    fn from(e: LatticeError) -> Self {
        match e {
            LatticeError::Chain(c) => c.into(),
            _ => CliError::precondition(e, None),
        }
    }
}

fn supercritical_error(e: SupercriticalError, law: &CoefficientLaw) -> CliError {
    match e {
        SupercriticalError::NotSupercritical(report) => CliError::Precondition {
            message: format!("upsilon needs a supercritical law; this law is {:?}", report.regime),
            report: Some(report),
        },
        SupercriticalError::Chain(c) => c.into(),
        other => CliError::precondition(other, Some(law.classify_regime(DEFAULT_TOL_K))),
    }
}

/// Uniform grid `[x_min, x_max]` with spacing `dx`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
}

fn one() -> f64 {
    1.0
}

/// A test function: `amplitude * sin(omega x + phase)` and friends, or a
/// grid CSV with columns `x,y` on uniform nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Sin {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    Cos {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    Constant {
        value: f64,
    },
    Grid {
        path: PathBuf,
    },
}

/// A profile ready to evaluate.
enum Evaluator {
    Closed(Profile),
    Grid(GridFunction),
}

impl Evaluator {
    fn eval(&self, x: f64) -> f64 {
        match self {
            Evaluator::Grid(g) => g.eval(x),
            Evaluator::Closed(p) => match *p {
                Profile::Sin {
                    amplitude,
                    omega,
                    phase,
                } => amplitude * (omega * x + phase).sin(),
                Profile::Cos {
                    amplitude,
                    omega,
                    phase,
                } => amplitude * (omega * x + phase).cos(),
                Profile::Constant { value } => value,
                Profile::Grid { .. } => unreachable!("grid profiles are loaded"),
            },
        }
    }

    fn grid(&self) -> Option<&GridFunction> {
        match self {
            Evaluator::Grid(g) => Some(g),
            Evaluator::Closed(_) => None,
        }
    }

    fn sample(&self, grid: &GridSpec) -> Result<GridFunction, CliError> {
        Ok(GridFunction::from_fn(grid.x_min, grid.x_max, grid.dx, |x| {
            self.eval(x)
        })?)
    }
}

fn load_profile(p: &Profile, base: &Path) -> Result<Evaluator, CliError> {
    match p {
        Profile::Grid { path } => {
            let full = base.join(path);
            Ok(Evaluator::Grid(read_grid_csv(&full)?))
        }
        other => Ok(Evaluator::Closed(other.clone())),
    }
}

/// Reads a grid CSV with columns `x,y`; lines starting with `#` are skipped.
pub fn read_grid_csv(path: &Path) -> Result<GridFunction, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let bad = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in reader.deserialize::<(f64, f64)>() {
        let (x, y) = row.map_err(|e| bad(e.to_string()))?;
        xs.push(x);
        ys.push(y);
    }
    if xs.len() < 2 {
        return Err(bad("needs at least two rows".into()));
    }
    let dx = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
    let uniform = xs
        .iter()
        .enumerate()
        .all(|(i, x)| (x - (xs[0] + i as f64 * dx)).abs() <= 1e-9 * (1.0 + x.abs()));
    if !uniform {
        return Err(bad("x column is not uniformly spaced".into()));
    }
    Ok(GridFunction::new(xs[0], dx, ys)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    pub tol_k: f64,
    /// Paths for the empirical law of the first zero of `A_n`.
    pub tau_paths: usize,
    /// Largest `n` reported for `P(tau_0 > n)`.
    pub tau_max: usize,
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self {
            tol_k: DEFAULT_TOL_K,
            tau_paths: 10_000,
            tau_max: 10,
        }
    }
}

fn default_cap() -> u64 {
    DEFAULT_CAP
}

fn default_record() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub x0: f64,
    pub rule: StoppingRule,
    pub n_paths: usize,
    #[serde(default = "default_cap")]
    pub cap: u64,
    /// Paths written to the paths CSV.
    #[serde(default = "default_record")]
    pub record_paths: usize,
    /// Function whose stopped mean is compared with its value at `x0`.
    #[serde(default)]
    pub observable: Option<Profile>,
}

fn default_thresholds() -> Vec<f64> {
    vec![1e-2, 1e-3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub grid: GridSpec,
    pub initial: Profile,
    pub iterations: usize,
    #[serde(default)]
    pub step_tol: f64,
    #[serde(default)]
    pub quad: QuadSettings,
    /// Dispersion levels whose first crossing is reported.
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
}

/// `count` evenly spaced points on `[from, to]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRange {
    pub from: f64,
    pub to: f64,
    pub count: usize,
}

impl ProbeRange {
    fn points(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![self.from],
            n => (0..n)
                .map(|i| self.from + (self.to - self.from) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeSection {
    pub points: Vec<f64>,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub horizon: Option<u64>,
    pub n_paths: usize,
}

fn default_eps_tail() -> f64 {
    DEFAULT_EPS_TAIL
}

fn default_term_cap() -> u64 {
    DEFAULT_TERM_CAP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsilonSection {
    pub n_samples: usize,
    #[serde(default = "default_eps_tail")]
    pub eps_tail: f64,
    #[serde(default = "default_term_cap")]
    pub term_cap: u64,
    pub probes: ProbeRange,
    /// Fresh draws of `(alpha, beta)` per probe.
    pub n_mc: usize,
    #[serde(default)]
    pub escape: Option<EscapeSection>,
}

fn default_residual_tol() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PantographSection {
    pub kappas: Vec<f64>,
    pub atoms: Vec<BaseAtom>,
    pub grid: GridSpec,
    pub initial: Profile,
    pub iterations: usize,
    #[serde(default)]
    pub step_tol: f64,
    /// Bound on `dx^2 ||y||` for the differential residual.
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
    /// Quadrature for the Picard run on the bridged law; omitted skips it.
    #[serde(default)]
    pub ae_quad: Option<QuadSettings>,
}

impl PantographSection {
    fn spec(&self) -> PantographSpec {
        PantographSpec {
            kappas: self.kappas.clone(),
            atoms: self.atoms.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSection {
    pub span_tol: f64,
    pub n_theta: usize,
    pub n_paths: usize,
    pub cap: u64,
    pub k_bound: u32,
    pub witness_eps: f64,
}

impl Default for LatticeSection {
    fn default() -> Self {
        let q = QLatticeSettings::default();
        Self {
            span_tol: DEFAULT_SPAN_TOL,
            n_theta: q.n_theta,
            n_paths: q.n_paths,
            cap: q.cap,
            k_bound: q.k_bound,
            witness_eps: q.witness_eps,
        }
    }
}

fn default_sigma() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub function: Profile,
    pub rule: StoppingRule,
    pub points: Vec<f64>,
    pub n_paths: usize,
    #[serde(default = "default_cap")]
    pub cap: u64,
    /// Grid for the one-step residual of a closed-form function.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub quad: QuadSettings,
    /// A point fails when `|mean - y(x)|` exceeds this many standard errors.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub law: Option<CoefficientLaw>,
    #[serde(default)]
    pub classify: ClassifySection,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub solve: Option<SolveSection>,
    #[serde(default)]
    pub upsilon: Option<UpsilonSection>,
    #[serde(default)]
    pub pantograph: Option<PantographSection>,
    #[serde(default)]
    pub lattice: LatticeSection,
    #[serde(default)]
    pub verify: Option<VerifySection>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// The configured law, or the one bridged from the pantograph section.
    pub fn law(&self) -> Result<CoefficientLaw, CliError> {
        match (&self.law, &self.pantograph) {
            (Some(law), _) => Ok(law.clone()),
            (None, Some(p)) => Ok(pantograph::pantograph_to_archetypal(&p.spec())?),
            (None, None) => Err(CliError::Config("config has neither [law] nor [pantograph]".into())),
        }
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    s.as_ref()
        .ok_or_else(|| CliError::Config(format!("missing [{name}] section")))
}

/// Provenance embedded in every artifact.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Command,
    pub config_sha256: String,
    pub seed: Option<u64>,
}

impl Meta {
    fn csv_comment(&self) -> String {
        format!(
            "# {} {} command={} config_sha256={} seed={}\n",
            self.tool,
            self.version,
            self.command.name(),
            self.config_sha256,
            self.seed.map_or("none".to_string(), |s| s.to_string())
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

struct Ctx {
    meta: Meta,
    out_dir: PathBuf,
    base: PathBuf,
    artifacts: Vec<PathBuf>,
    warnings: Vec<String>,
}

impl Ctx {
    fn seeds(&self) -> Result<SeedStream, CliError> {
        self.meta
            .seed
            .map(SeedStream::new)
            .ok_or_else(|| CliError::Config(format!("`{}` is stochastic and needs a seed", self.meta.command.name())))
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        self.artifacts.push(path);
        Ok(())
    }

    fn write_csv(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let text = self.meta.csv_comment() + body;
        self.write(name, &text)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Wrapped<'a, T> {
            meta: &'a Meta,
            warnings: &'a [String],
            #[serde(flatten)]
            body: &'a T,
        }
        let wrapped = Wrapped {
            meta: &self.meta,
            warnings: &self.warnings,
            body,
        };
        let mut text = serde_json::to_string_pretty(&wrapped).expect("reports serialize");
        text.push('\n');
        self.write(name, &text)
    }

    fn check_cap_rate(&mut self, what: &str, rate: f64) {
        if rate > CAP_WARN_RATE {
            self.warnings
                .push(format!("{what}: {:.2}% of paths hit the step cap", 100.0 * rate));
        }
    }
}

/// Runs one command. Output directory precedence: `overrides.out`, the
/// config's `out`, `$ARCHETYPAL_OUT`, then `archetypal-out`.
pub fn run(command: Command, config_path: &Path, overrides: &Overrides) -> Result<RunSummary, CliError> {
    let bytes = fs::read(config_path).map_err(|source| CliError::Io {
        path: config_path.to_path_buf(),
        source,
    })?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config(e.to_string()))?;
    let config = ExperimentConfig::parse(text)?;
    let out_dir = overrides
        .out
        .clone()
        .or_else(|| config.out.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR));
    let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ctx = Ctx {
        meta: Meta {
            tool: "archetypal",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: sha256_hex(&bytes),
            seed: overrides.seed.or(config.seed),
        },
        out_dir,
        base,
        artifacts: Vec::new(),
        warnings: Vec::new(),
    };
    // Validate everything the command needs before touching the filesystem.
    let law = config.law()?;
    fs::create_dir_all(&ctx.out_dir).map_err(|source| CliError::Io {
        path: ctx.out_dir.clone(),
        source,
    })?;
    match command {
        Command::Classify => classify(&mut ctx, &config, &law)?,
        Command::Simulate => simulate(&mut ctx, section(&config.simulate, "simulate")?, &law)?,
        Command::Solve => solve(&mut ctx, section(&config.solve, "solve")?, &law)?,
        Command::Upsilon => upsilon(&mut ctx, section(&config.upsilon, "upsilon")?, &law)?,
        Command::Pantograph => pantograph_cmd(&mut ctx, section(&config.pantograph, "pantograph")?)?,
        Command::Lattice => lattice_cmd(&mut ctx, &config.lattice, &law)?,
        Command::Verify => verify(&mut ctx, section(&config.verify, "verify")?, &law)?,
    }
    Ok(RunSummary {
        out_dir: ctx.out_dir,
        artifacts: ctx.artifacts,
        warnings: ctx.warnings,
    })
}

#[derive(Serialize)]
struct TauZero {
    n: Vec<usize>,
    /// `P(tau_0 > n) = P(A_n != 0) = (1 - p_zero)^n`.
    exact_survival: Vec<f64>,
    empirical_survival: Vec<f64>,
    stderr: Vec<f64>,
    n_paths: usize,
}

fn classify(ctx: &mut Ctx, config: &ExperimentConfig, law: &CoefficientLaw) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Out {
        report: RegimeReport,
        law: CoefficientLaw,
        tau_zero: Option<TauZero>,
    }
    let report = law.classify_regime(config.classify.tol_k);
    let mut tau_zero = None;
    if report.p_zero > 0.0 && config.classify.tau_paths > 0 {
        let seeds = ctx.seeds()?;
        let n_paths = config.classify.tau_paths;
        let tau = chain::tau_distribution(law, &StoppingRule::HitZero, n_paths, DEFAULT_CAP, &seeds)?;
        ctx.check_cap_rate("tau_0", tau.cap_rate);
        let ns: Vec<usize> = (1..=config.classify.tau_max).collect();
        let mut t = TauZero {
            exact_survival: ns.iter().map(|&n| (1.0 - report.p_zero).powi(n as i32)).collect(),
            empirical_survival: Vec::new(),
            stderr: Vec::new(),
            n: ns.clone(),
            n_paths,
        };
        for &n in &ns {
            let stopped: f64 = (1..=n).map(|j| tau.at(j)).sum();
            let s = 1.0 - stopped;
            t.empirical_survival.push(s);
            t.stderr.push((s * (1.0 - s) / n_paths as f64).sqrt());
        }
        tau_zero = Some(t);
    }
    ctx.write_json(
        "classify.json",
        &Out {
            report,
            law: law.clone(),
            tau_zero,
        },
    )
}

fn simulate(ctx: &mut Ctx, s: &SimulateSection, law: &CoefficientLaw) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Out {
        x0: f64,
        rule: StoppingRule,
        n_paths: usize,
        n_stopped: usize,
        cap: u64,
        cap_rate: f64,
        mean_tau: Option<f64>,
        observable: Option<ObservableCheck>,
    }
    #[derive(Serialize)]
    struct ObservableCheck {
        y_x0: f64,
        stopped_mean: f64,
        stderr: f64,
        z: f64,
    }
    let seeds = ctx.seeds()?;
    let observable = s.observable.as_ref().map(|p| load_profile(p, &ctx.base)).transpose()?;
    let outcomes = chain::simulate_paths(law, s.x0, &s.rule, s.n_paths, s.cap, &seeds)?;
    let tau = chain::tau_histogram(&outcomes);
    ctx.check_cap_rate("simulate", tau.cap_rate);
    let stopped: Vec<_> = outcomes
        .iter()
        .filter(|o| o.status == chain::StopStatus::Stopped)
        .collect();
    let taus: Vec<f64> = stopped.iter().map(|o| o.state.n as f64).collect();
    let check = match &observable {
        Some(y) => {
            let values: Vec<f64> = stopped.iter().map(|o| y.eval(o.state.x)).collect();
            crate::stats::MeanEstimate::from_values(&values).map(|m| {
                let y0 = y.eval(s.x0);
                ObservableCheck {
                    y_x0: y0,
                    stopped_mean: m.mean,
                    stderr: m.stderr,
                    z: if m.stderr > 0.0 { (m.mean - y0) / m.stderr } else { 0.0 },
                }
            })
        }
        None => None,
    };
    let recorded = &outcomes[..s.record_paths.min(outcomes.len())];
    ctx.write_csv("paths.csv", &chain::paths_csv(recorded))?;
    let mut tau_csv = String::from("n,pmf,stderr\n");
    for n in 1..tau.pmf.len() {
        writeln!(tau_csv, "{n},{},{}", tau.at(n), tau.stderr(n)).unwrap();
    }
    ctx.write_csv("tau.csv", &tau_csv)?;
    ctx.write_json(
        "simulate.json",
        &Out {
            x0: s.x0,
            rule: s.rule,
            n_paths: s.n_paths,
            n_stopped: stopped.len(),
            cap: s.cap,
            cap_rate: tau.cap_rate,
            mean_tau: crate::stats::MeanEstimate::from_values(&taus).map(|m| m.mean),
            observable: check,
        },
    )
}

#[derive(Serialize)]
struct TraceSummary {
    iterations: usize,
    converged_at: Option<usize>,
    final_dispersion: Option<f64>,
    final_range: Option<f64>,
    final_step: Option<f64>,
    final_residual: f64,
    /// `(threshold, first iteration with dispersion below it)`, 1-based.
    first_below: Vec<(f64, Option<usize>)>,
}

fn summarize(trace: &solver::IterationTrace, thresholds: &[f64]) -> TraceSummary {
    TraceSummary {
        iterations: trace.iterations(),
        converged_at: trace.converged_at.map(|k| k + 1),
        final_dispersion: trace.final_dispersion(),
        final_range: trace.range.last().copied(),
        final_step: trace.step_norm.last().copied(),
        final_residual: trace.final_residual,
        first_below: thresholds
            .iter()
            .map(|&t| (t, trace.first_below(t).map(|k| k + 1)))
            .collect(),
    }
}

fn solve(ctx: &mut Ctx, s: &SolveSection, law: &CoefficientLaw) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Out {
        grid: solver::GridHeader,
        window: (f64, f64),
        regime: RegimeReport,
        trace: TraceSummary,
    }
    let y0 = load_profile(&s.initial, &ctx.base)?.sample(&s.grid)?;
    let op = Operator::new(law, s.quad)?;
    let (y, trace) = solver::picard_iterate(&y0, &op, s.iterations, s.step_tol);
    ctx.write_csv("trace.csv", &trace.to_csv())?;
    ctx.write_csv("final_grid.csv", &y.to_csv())?;
    ctx.write_json(
        "solve.json",
        &Out {
            grid: y.header(),
            window: y.middle_half(),
            regime: law.classify_regime(DEFAULT_TOL_K),
            trace: summarize(&trace, &s.thresholds),
        },
    )
}

fn upsilon(ctx: &mut Ctx, s: &UpsilonSection, law: &CoefficientLaw) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Out {
        regime: RegimeReport,
        n_samples: usize,
        max_terms: u64,
        max_prefactor: f64,
        verification: supercritical::VerificationReport,
        escape: Vec<EscapeRow>,
    }
    #[derive(Serialize)]
    struct EscapeRow {
        estimate: supercritical::EscapeEstimate,
        cdf: f64,
    }
    let sampler = UpsilonSampler::new(law, s.eps_tail, s.term_cap).map_err(|e| supercritical_error(e, law))?;
    let seeds = ctx.seeds()?;
    let sample = sampler
        .sample_many(s.n_samples, &seeds)
        .map_err(|e| supercritical_error(e, law))?;
    let mut samples_csv = String::from("value\n");
    for v in &sample.values {
        writeln!(samples_csv, "{v}").unwrap();
    }
    let cdf = supercritical::build_cdf(sample.values.clone()).map_err(|e| supercritical_error(e, law))?;
    let verification = supercritical::verify_solution(&cdf, law, &s.probes.points(), s.n_mc, &seeds.substream(1))
        .map_err(|e| supercritical_error(e, law))?;
    if verification.flagged {
        ctx.warnings
            .push("some probe residual exceeds five standard errors".to_string());
    }
    let mut escape = Vec::new();
    if let Some(e) = &s.escape {
        let esc_seeds = seeds.substream(2);
        for (i, &x) in e.points.iter().enumerate() {
            let est = supercritical::estimate_escape_probability(
                law,
                x,
                e.b,
                e.horizon,
                e.n_paths,
                &esc_seeds.substream(i as u64),
            )
            .map_err(|err| supercritical_error(err, law))?;
            escape.push(EscapeRow {
                cdf: cdf.eval(x - e.b),
                estimate: est,
            });
        }
    }
    ctx.write_csv("samples.csv", &samples_csv)?;
    ctx.write_csv("cdf.csv", &cdf.to_csv())?;
    ctx.write_json(
        "upsilon.json",
        &Out {
            regime: law.classify_regime(DEFAULT_TOL_K),
            n_samples: s.n_samples,
            max_terms: sample.max_terms,
            max_prefactor: sample.max_prefactor,
            verification,
            escape,
        },
    )
}

fn pantograph_cmd(ctx: &mut Ctx, s: &PantographSection) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Out {
        spec: PantographSpec,
        law: CoefficientLaw,
        regime: RegimeReport,
        variation_of_constants: Option<TraceSummary>,
        ae_picard: Option<TraceSummary>,
        /// `sup |y_voc - y_ae|` over the grid.
        final_difference: Option<f64>,
        ode_residual: Option<pantograph::OdeResidual>,
    }
    let spec = s.spec();
    let law = pantograph::pantograph_to_archetypal(&spec)?;
    let y0 = load_profile(&s.initial, &ctx.base)?.sample(&s.grid)?;
    let thresholds = default_thresholds();
    let voc = if spec.kappas == [1.0] {
        let (y, trace) = pantograph::picard_variation_of_constants(&y0, &spec, s.iterations, s.step_tol)?;
        ctx.write_csv("voc_trace.csv", &trace.to_csv())?;
        ctx.write_csv("voc_grid.csv", &y.to_csv())?;
        Some((y, summarize(&trace, &thresholds)))
    } else {
        ctx.warnings
            .push("variation of constants needs kappas = [1]; skipped".to_string());
        None
    };
    let ae = match s.ae_quad {
        Some(quad) => {
            let op = Operator::new(&law, quad)?;
            let (y, trace) = solver::picard_iterate(&y0, &op, s.iterations, s.step_tol);
            ctx.write_csv("ae_trace.csv", &trace.to_csv())?;
            ctx.write_csv("ae_grid.csv", &y.to_csv())?;
            Some((y, summarize(&trace, &thresholds)))
        }
        None => None,
    };
    let final_difference = match (&voc, &ae) {
        (Some((a, _)), Some((b, _))) => Some(a.sup_distance(b)),
        _ => None,
    };
    let probe = voc.as_ref().or(ae.as_ref()).map(|(y, _)| y);
    let ode_residual = match probe.map(|y| pantograph::ode_residual(y, &spec, s.residual_tol)) {
        Some(Ok(r)) => Some(r),
        Some(Err(e)) => {
            ctx.warnings.push(format!("ode residual skipped: {e}"));
            None
        }
        None => None,
    };
    ctx.write_json(
        "pantograph.json",
        &Out {
            regime: law.classify_regime(DEFAULT_TOL_K),
            spec,
            law,
            variation_of_constants: voc.map(|(_, t)| t),
            ae_picard: ae.map(|(_, t)| t),
            final_difference,
            ode_residual,
        },
    )
}

fn lattice_cmd(ctx: &mut Ctx, s: &LatticeSection, law: &CoefficientLaw) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Out {
        /// Span of all point-mass shift values.
        span: Option<lattice::SpanReport>,
        unit_modulus: Option<lattice::UnitModulusReport>,
        q_lattice: Option<lattice::QLatticeReport>,
    }
    let span = law
        .atoms()
        .iter()
        .map(|a| a.shift.point())
        .collect::<Option<Vec<f64>>>()
        .map(|v| lattice::real_gcd_span(&v, s.span_tol));
    let unit_modulus = if law.is_unit_modulus() {
        Some(lattice::classify_unit_modulus(law, s.span_tol)?)
    } else {
        None
    };
    let q_lattice = if law.q_lattice().is_some() {
        let settings = QLatticeSettings {
            n_theta: s.n_theta,
            n_paths: s.n_paths,
            cap: s.cap,
            k_bound: s.k_bound,
            witness_eps: s.witness_eps,
            span_tol: s.span_tol,
        };
        let seeds = if s.n_paths > 0 {
            ctx.seeds()?
        } else {
            SeedStream::new(0)
        };
        let report = lattice::q_lattice_report(law, &settings, &seeds)?;
        if let Some(rate) = report.empirical_cap_rate {
            ctx.check_cap_rate("lattice return", rate);
        }
        Some(report)
    } else {
        None
    };
    if unit_modulus.is_none() && q_lattice.is_none() {
        return Err(CliError::precondition(
            "lattice analysis needs |alpha| = 1 almost surely or a declared q-lattice",
            Some(law.classify_regime(DEFAULT_TOL_K)),
        ));
    }
    ctx.write_json(
        "lattice.json",
        &Out {
            span,
            unit_modulus,
            q_lattice,
        },
    )
}

fn verify(ctx: &mut Ctx, s: &VerifySection, law: &CoefficientLaw) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct PointCheck {
        x: f64,
        y: f64,
        stopped_mean: f64,
        stderr: f64,
        cap_rate: f64,
        pass: bool,
    }
    #[derive(Serialize)]
    struct Out {
        rule: StoppingRule,
        n_paths: usize,
        sigma: f64,
        one_step_residual: Option<f64>,
        points: Vec<PointCheck>,
        all_pass: bool,
    }
    let seeds = ctx.seeds()?;
    let y = load_profile(&s.function, &ctx.base)?;
    let grid = match (y.grid(), &s.grid) {
        (Some(g), _) => Some(g.clone()),
        (None, Some(spec)) => Some(y.sample(spec)?),
        (None, None) => None,
    };
    let one_step_residual = match grid {
        Some(g) => Some(solver::residual_sup(&g, &Operator::new(law, s.quad)?)),
        None => None,
    };
    let mut points = Vec::with_capacity(s.points.len());
    for (i, &x) in s.points.iter().enumerate() {
        let m = chain::stopped_mean(
            |u| y.eval(u),
            law,
            x,
            &s.rule,
            s.n_paths,
            s.cap,
            &seeds.substream(i as u64),
        )?;
        ctx.check_cap_rate(&format!("verify x={x}"), m.cap_rate);
        let yx = y.eval(x);
        points.push(PointCheck {
            x,
            y: yx,
            stopped_mean: m.estimate,
            stderr: m.stderr,
            cap_rate: m.cap_rate,
            pass: (m.estimate - yx).abs() <= s.sigma * m.stderr + 1e-12,
        });
    }
    let all_pass = points.iter().all(|p| p.pass);
    if !all_pass {
        ctx.warnings
            .push("stopped mean differs from y(x) beyond the sigma budget".to_string());
    }
    ctx.write_json(
        "verify.json",
        &Out {
            rule: s.rule,
            n_paths: s.n_paths,
            sigma: s.sigma,
            one_step_residual,
            points,
            all_pass,
        },
    )
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args(args: Args) -> u8 {
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    let overrides = Overrides {
        out: args.out,
        seed: args.seed,
    };
    match run(args.command, &args.config, &overrides) {
        Ok(summary) => {
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            for a in &summary.artifacts {
                println!("{}", a.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Precondition { report: Some(r), .. } = &e {
                eprintln!("{}", serde_json::to_string_pretty(r).expect("report serializes"));
            }
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BERNOULLI: &str = r#"
seed = 1
[law]
atoms = [
  { a = 2.0, p = 0.5, shift = { kind = "point_mass", params = { b = 1.0 } } },
  { a = 2.0, p = 0.5, shift = { kind = "point_mass", params = { b = -1.0 } } },
]
"#;

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::parse(BERNOULLI).unwrap();
        assert_eq!(c.seed, Some(1));
        assert_eq!(c.law().unwrap().atoms().len(), 2);
        assert_eq!(c.classify, ClassifySection::default());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_laws() {
        assert!(matches!(
            ExperimentConfig::parse("sede = 1\n"),
            Err(CliError::Config(_))
        ));
        let bad = BERNOULLI.replace(
            "p = 0.5, shift = { kind = \"point_mass\", params = { b = -1.0 } }",
            "p = 0.4, shift = { kind = \"point_mass\", params = { b = -1.0 } }",
        );
        assert!(matches!(ExperimentConfig::parse(&bad), Err(CliError::Config(_))));
        let none = ExperimentConfig::parse("seed = 1\n").unwrap();
        assert!(matches!(none.law(), Err(CliError::Config(_))));
    }

    #[test]
    fn pantograph_section_supplies_the_law() {
        let c = ExperimentConfig::parse(
            r#"
[pantograph]
kappas = [1.0]
atoms = [{ a = -1.0, c = 0.0, p = 1.0 }]
grid = { x_min = -1.0, x_max = 1.0, dx = 0.1 }
initial = { kind = "sin" }
iterations = 3
"#,
        )
        .unwrap();
        let law = c.law().unwrap();
        assert_eq!(law.atoms()[0].a, -1.0);
        assert!(law.atoms()[0].shift.is_continuous());
    }

    #[test]
    fn profiles_evaluate() {
        let p = Profile::Cos {
            amplitude: 2.0,
            omega: std::f64::consts::TAU,
            phase: 0.0,
        };
        let e = load_profile(&p, Path::new(".")).unwrap();
        assert!((e.eval(0.5) + 2.0).abs() < 1e-12);
        assert_eq!(
            ProbeRange {
                from: -1.0,
                to: 1.0,
                count: 3
            }
            .points(),
            vec![-1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 1);
        assert_eq!(CliError::precondition("x", None).exit_code(), 2);
    }

    #[test]
    fn grid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridFunction::from_fn(-1.0, 1.0, 0.25, |x| x * x).unwrap();
        let path = dir.path().join("g.csv");
        fs::write(&path, format!("# comment\n{}", g.to_csv())).unwrap();
        let back = read_grid_csv(&path).unwrap();
        assert_eq!(back.values, g.values);
        assert!((back.dx - 0.25).abs() < 1e-15);
        fs::write(&path, "x,y\n0,1\n1,1\n3,1\n").unwrap();
        assert!(matches!(read_grid_csv(&path), Err(CliError::Config(_))));
    }
}
