//! Experiment configuration: one TOML document naming a problem, a grid, a
//! solver, per-decision-maker information declarations, and an output
//! directory. Matrices are row-major nested arrays; time-varying
//! coefficients are sampled tables interpolated linearly.

use std::f64::consts::TAU;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use teamopt::{
    find_builtin, BasisFn, BoxSet, BuiltinKind, DiscreteTeamProblem, GnfData, InfoSpec, LqData,
    TeamProblem, BUILTINS,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default, rename = "info")]
    pub infos: Vec<InfoSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub name: Option<String>,
    pub lq: Option<LqSection>,
    pub gnf: Option<GnfSection>,
    pub discrete: Option<DiscreteSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Builtin,
    Lq,
    Gnf,
    DiscreteLq,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(alias = "K")]
    pub k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub kind: SolverKind,
    pub tol: Option<f64>,
    pub max_iterations: Option<usize>,
    pub damping: Option<f64>,
    pub seed: Option<u64>,
    pub certificate_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    #[default]
    Team,
    Pbp,
    LqFixedPoint,
    DiscreteTeam,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Team => "team",
            Self::Pbp => "pbp",
            Self::LqFixedPoint => "lq-fixed-point",
            Self::DiscreteTeam => "discrete-team",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoSection {
    pub kind: InfoKind,
    pub functions: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfoKind {
    OpenLoop,
    Markov,
    Basis,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// A constant matrix, or samples at increasing times interpolated linearly
/// and clamped beyond the table's range.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Constant(Vec<Vec<f64>>),
    Table {
        times: Vec<f64>,
        values: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Constant(Vec<f64>),
    Table {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqSection {
    pub state_dim: usize,
    pub dm_dims: Vec<usize>,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub a: Option<MatrixSpec>,
    pub drift: Option<VectorSpec>,
    pub input: Option<MatrixSpec>,
    pub state_weight: Option<MatrixSpec>,
    pub control_weight: Option<MatrixSpec>,
    pub cross_weight: Option<Vec<Vec<f64>>>,
    pub state_offset: Option<VectorSpec>,
    pub control_offset: Option<Vec<f64>>,
    pub terminal_weight: Option<Vec<Vec<f64>>>,
    pub terminal_offset: Option<Vec<f64>>,
}

/// Drift-plus-input-affine problem with an affine drift A(t) x + b(t); the
/// genuinely state-dependent members of the family are only reachable as
/// builtins, since sampled tables cannot encode a function of the state.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GnfSection {
    pub state_dim: usize,
    pub dm_dims: Vec<usize>,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub a: Option<MatrixSpec>,
    pub drift: Option<VectorSpec>,
    pub input: Option<MatrixSpec>,
    pub control_weight: Option<MatrixSpec>,
    pub control_offset: Option<VectorSpec>,
    pub state_weight: Option<Vec<Vec<f64>>>,
    pub terminal_weight: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteSection {
    pub state_dim: usize,
    pub dm_dims: Vec<usize>,
    pub x0: Vec<f64>,
    pub a: Option<Vec<Vec<f64>>>,
    pub input: Option<Vec<Vec<f64>>>,
    pub affine: Option<Vec<f64>>,
    pub state_weight: Option<Vec<Vec<f64>>>,
    pub control_weight: Option<Vec<Vec<f64>>>,
    pub state_offset: Option<Vec<f64>>,
    pub control_offset: Option<Vec<f64>>,
    pub terminal_weight: Option<Vec<Vec<f64>>>,
    pub terminal_offset: Option<Vec<f64>>,
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).context("malformed config")?;
    if let Some(k) = cfg.grid.k {
        if k == 0 {
            bail!("grid.k must be at least 1");
        }
    }
    if let Some(tol) = cfg.solver.tol {
        if !(tol > 0.0 && tol.is_finite()) {
            bail!("solver.tol must be a positive number");
        }
    }
    Ok(cfg)
}

/// The problem a config resolves to, before a solver is attached.
pub enum ProblemInstance {
    Team(TeamProblem),
    Lq(LqData),
    Gnf(GnfData),
    Discrete(DiscreteTeamProblem),
}

impl ProblemInstance {
    pub fn horizon(&self) -> Option<f64> {
        match self {
            Self::Team(p) => Some(p.horizon()),
            Self::Lq(p) => Some(p.horizon()),
            Self::Gnf(p) => Some(p.horizon()),
            Self::Discrete(_) => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Team(_) => "team",
            Self::Lq(_) => "lq",
            Self::Gnf(_) => "gnf",
            Self::Discrete(_) => "discrete",
        }
    }
}

fn parse_matrix(data: &[Vec<f64>], rows: usize, cols: usize, field: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows {
        bail!("{field}: expected {rows} rows, found {}", data.len());
    }
    for (i, row) in data.iter().enumerate() {
        if row.len() != cols {
            bail!(
                "{field}: row {i} has {} entries, expected {cols}",
                row.len()
            );
        }
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| data[i][j]))
}

fn parse_vector(data: &[f64], len: usize, field: &str) -> Result<DVector<f64>> {
    if data.len() != len {
        bail!("{field}: expected {len} entries, found {}", data.len());
    }
    Ok(DVector::from_column_slice(data))
}

fn check_table_times(times: &[f64], count: usize, field: &str) -> Result<()> {
    if times.is_empty() {
        bail!("{field}: table must sample at least one time");
    }
    if times.len() != count {
        bail!("{field}: {} times but {count} sampled values", times.len());
    }
    for w in times.windows(2) {
        if w[1] <= w[0] {
            bail!("{field}: table times must be strictly increasing");
        }
    }
    Ok(())
}

/// Segment index and interpolation weight for `t`, clamped to the table.
fn table_weight(times: &[f64], t: f64) -> (usize, f64) {
    if t <= times[0] || times.len() == 1 {
        return (0, 0.0);
    }
    let last = times.len() - 1;
    if t >= times[last] {
        return (last - 1, 1.0);
    }
    let hi = times.partition_point(|&s| s <= t).min(last);
    let lo = hi - 1;
    ((lo), (t - times[lo]) / (times[hi] - times[lo]))
}

type MatFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
type VecFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

fn matrix_fn(spec: &MatrixSpec, rows: usize, cols: usize, field: &str) -> Result<MatFn> {
    match spec {
        MatrixSpec::Constant(data) => {
            let m = parse_matrix(data, rows, cols, field)?;
            Ok(Arc::new(move |_| m.clone()))
        }
        MatrixSpec::Table { times, values } => {
            check_table_times(times, values.len(), field)?;
            let samples: Vec<DMatrix<f64>> = values
                .iter()
                .enumerate()
                .map(|(i, v)| parse_matrix(v, rows, cols, &format!("{field}[{i}]")))
                .collect::<Result<_>>()?;
            let times = times.clone();
            Ok(Arc::new(move |t| {
                if samples.len() == 1 {
                    return samples[0].clone();
                }
                let (lo, w) = table_weight(&times, t);
                &samples[lo] * (1.0 - w) + &samples[lo + 1] * w
            }))
        }
    }
}

fn vector_fn(spec: &VectorSpec, len: usize, field: &str) -> Result<VecFn> {
    match spec {
        VectorSpec::Constant(data) => {
            let v = parse_vector(data, len, field)?;
            Ok(Arc::new(move |_| v.clone()))
        }
        VectorSpec::Table { times, values } => {
            check_table_times(times, values.len(), field)?;
            let samples: Vec<DVector<f64>> = values
                .iter()
                .enumerate()
                .map(|(i, v)| parse_vector(v, len, &format!("{field}[{i}]")))
                .collect::<Result<_>>()?;
            let times = times.clone();
            Ok(Arc::new(move |t| {
                if samples.len() == 1 {
                    return samples[0].clone();
                }
                let (lo, w) = table_weight(&times, t);
                &samples[lo] * (1.0 - w) + &samples[lo + 1] * w
            }))
        }
    }
}

fn check_dm_dims(state_dim: usize, dm_dims: &[usize], field: &str) -> Result<usize> {
    if state_dim == 0 {
        bail!("{field}.state_dim must be positive");
    }
    if dm_dims.is_empty() || dm_dims.contains(&0) {
        bail!("{field}.dm_dims must list positive dimensions");
    }
    Ok(dm_dims.iter().sum())
}

fn build_lq(sec: &LqSection) -> Result<LqData> {
    let n = sec.state_dim;
    let d = check_dm_dims(n, &sec.dm_dims, "problem.lq")?;
    let x0 = parse_vector(&sec.x0, n, "problem.lq.x0")?;
    let mut b = LqData::builder(n, sec.dm_dims.clone(), sec.horizon, x0);
    if let Some(spec) = &sec.a {
        let f = matrix_fn(spec, n, n, "problem.lq.a")?;
        b = b.state_matrix(move |t| f(t));
    }
    if let Some(spec) = &sec.drift {
        let f = vector_fn(spec, n, "problem.lq.drift")?;
        b = b.drift(move |t| f(t));
    }
    if let Some(spec) = &sec.input {
        let f = matrix_fn(spec, n, d, "problem.lq.input")?;
        b = b.input_matrix(move |t| f(t));
    }
    if let Some(spec) = &sec.state_weight {
        let f = matrix_fn(spec, n, n, "problem.lq.state_weight")?;
        b = b.state_weight(move |t| f(t));
    }
    if let Some(spec) = &sec.control_weight {
        let f = matrix_fn(spec, d, d, "problem.lq.control_weight")?;
        b = b.control_weight(move |t| f(t));
    }
    if let Some(data) = &sec.cross_weight {
        b = b.cross_weight_const(parse_matrix(data, d, n, "problem.lq.cross_weight")?);
    }
    if let Some(spec) = &sec.state_offset {
        let f = vector_fn(spec, n, "problem.lq.state_offset")?;
        b = b.state_offset(move |t| f(t));
    }
    if let Some(data) = &sec.control_offset {
        b = b.control_offset_const(parse_vector(data, d, "problem.lq.control_offset")?);
    }
    if let Some(data) = &sec.terminal_weight {
        b = b.terminal_weight(parse_matrix(data, n, n, "problem.lq.terminal_weight")?);
    }
    if let Some(data) = &sec.terminal_offset {
        b = b.terminal_offset(parse_vector(data, n, "problem.lq.terminal_offset")?);
    }
    b.build().map_err(|e| anyhow!("problem.lq: {e}"))
}

fn build_gnf(sec: &GnfSection) -> Result<GnfData> {
    let n = sec.state_dim;
    let d = check_dm_dims(n, &sec.dm_dims, "problem.gnf")?;
    let x0 = parse_vector(&sec.x0, n, "problem.gnf.x0")?;
    let mut b = GnfData::builder(n, sec.dm_dims.clone(), sec.horizon, x0);

    let a = match &sec.a {
        Some(spec) => Some(matrix_fn(spec, n, n, "problem.gnf.a")?),
        None => None,
    };
    let drift = match &sec.drift {
        Some(spec) => Some(vector_fn(spec, n, "problem.gnf.drift")?),
        None => None,
    };
    if a.is_some() || drift.is_some() {
        b = b.drift(move |t, x| {
            let mut f = match &drift {
                Some(g) => g(t),
                None => DVector::zeros(x.len()),
            };
            if let Some(g) = &a {
                f += g(t) * x;
            }
            f
        });
    }
    if let Some(spec) = &sec.input {
        let f = matrix_fn(spec, n, d, "problem.gnf.input")?;
        b = b.input_matrix(move |t, _x| f(t));
    }
    if let Some(spec) = &sec.control_weight {
        let f = matrix_fn(spec, d, d, "problem.gnf.control_weight")?;
        b = b.control_weight(move |t, _x| f(t));
    }
    if let Some(spec) = &sec.control_offset {
        let f = vector_fn(spec, d, "problem.gnf.control_offset")?;
        b = b.control_offset(move |t, _x| f(t));
    }
    if let Some(data) = &sec.state_weight {
        let h = parse_matrix(data, n, n, "problem.gnf.state_weight")?;
        b = b.state_cost(move |_t, x| 0.5 * (x.transpose() * &h * x)[(0, 0)]);
    }
    if let Some(data) = &sec.terminal_weight {
        let m = parse_matrix(data, n, n, "problem.gnf.terminal_weight")?;
        b = b.terminal_cost(move |x| 0.5 * (x.transpose() * &m * x)[(0, 0)]);
    }
    b.build().map_err(|e| anyhow!("problem.gnf: {e}"))
}

fn build_discrete(
    sec: &DiscreteSection,
    steps: usize,
    infos: Vec<InfoSpec>,
) -> Result<DiscreteTeamProblem> {
    let n = sec.state_dim;
    let d = check_dm_dims(n, &sec.dm_dims, "problem.discrete")?;
    let x0 = parse_vector(&sec.x0, n, "problem.discrete.x0")?;
    let a = match &sec.a {
        Some(data) => parse_matrix(data, n, n, "problem.discrete.a")?,
        None => DMatrix::identity(n, n),
    };
    let bm = match &sec.input {
        Some(data) => parse_matrix(data, n, d, "problem.discrete.input")?,
        None => DMatrix::zeros(n, d),
    };
    let c = match &sec.affine {
        Some(data) => parse_vector(data, n, "problem.discrete.affine")?,
        None => DVector::zeros(n),
    };
    let h = match &sec.state_weight {
        Some(data) => parse_matrix(data, n, n, "problem.discrete.state_weight")?,
        None => DMatrix::zeros(n, n),
    };
    let r = match &sec.control_weight {
        Some(data) => parse_matrix(data, d, d, "problem.discrete.control_weight")?,
        None => DMatrix::identity(d, d),
    };
    let f = match &sec.state_offset {
        Some(data) => parse_vector(data, n, "problem.discrete.state_offset")?,
        None => DVector::zeros(n),
    };
    let m = match &sec.control_offset {
        Some(data) => parse_vector(data, d, "problem.discrete.control_offset")?,
        None => DVector::zeros(d),
    };
    let tw = match &sec.terminal_weight {
        Some(data) => parse_matrix(data, n, n, "problem.discrete.terminal_weight")?,
        None => DMatrix::zeros(n, n),
    };
    let tn = match &sec.terminal_offset {
        Some(data) => parse_vector(data, n, "problem.discrete.terminal_offset")?,
        None => DVector::zeros(n),
    };

    let (ta, tb, tc) = (a.clone(), bm.clone(), c.clone());
    let (ja, jb) = (a.clone(), bm.clone());
    let (ch, cr, cf, cm) = (h.clone(), r.clone(), f.clone(), m.clone());
    let (gh, gf) = (h.clone(), f.clone());
    let (gr, gm) = (r.clone(), m.clone());
    let (pw, pn) = (tw.clone(), tn.clone());
    let mut builder = DiscreteTeamProblem::builder(n, steps, x0)
        .transition(move |_k, x, u| &ta * x + &tb * u + &tc)
        .transition_jacobians(move |_k, _x, _u| ja.clone(), move |_k, _x, _u| jb.clone())
        .running_cost(move |_k, x, u| {
            0.5 * (x.transpose() * &ch * x)[(0, 0)]
                + 0.5 * (u.transpose() * &cr * u)[(0, 0)]
                + cf.dot(x)
                + cm.dot(u)
        })
        .running_cost_gradients(
            move |_k, x, _u| &gh * x + &gf,
            move |_k, _x, u| &gr * u + &gm,
        )
        .terminal_cost(move |x| 0.5 * (x.transpose() * &pw * x)[(0, 0)] + pn.dot(x))
        .terminal_cost_gradient(move |x| &tw * x + &tn);
    for (i, &dim) in sec.dm_dims.iter().enumerate() {
        builder = builder.decision_maker(dim, BoxSet::free(dim), infos[i].clone());
    }
    builder
        .build()
        .map_err(|e| anyhow!("problem.discrete: {e}"))
}

/// Grid size (continuous) or stage count (discrete) a config resolves to.
pub fn resolve_steps(cfg: &ExperimentConfig, instance: &ProblemInstance) -> Result<usize> {
    match instance {
        ProblemInstance::Discrete(p) => match cfg.grid.k {
            Some(k) if k != p.steps() => bail!(
                "grid.k: problem defines {} stages, config asks for {k}",
                p.steps()
            ),
            _ => Ok(p.steps()),
        },
        _ => {
            let horizon = instance
                .horizon()
                .expect("continuous problems have a horizon");
            match cfg.grid.k {
                Some(k) => Ok(k),
                None => Ok((horizon * teamopt::DEFAULT_STEPS_PER_UNIT as f64).ceil() as usize),
            }
        }
    }
}

fn parse_basis_token(tok: &str, scale: f64, field: &str) -> Result<BasisFn> {
    let bad = || {
        anyhow!(
            "{field}: unrecognized basis token {tok:?} (expected \"1\", \"t\", \"t^n\", \"sin:n\", or \"cos:n\")"
        )
    };
    if tok == "1" {
        return Ok(Arc::new(|_| 1.0));
    }
    if tok == "t" {
        return Ok(Arc::new(|t| t));
    }
    if let Some(exp) = tok.strip_prefix("t^") {
        let n: i32 = exp.parse().map_err(|_| bad())?;
        if n < 1 {
            return Err(bad());
        }
        return Ok(Arc::new(move |t| t.powi(n)));
    }
    if let Some(freq) = tok.strip_prefix("sin:") {
        let j: u32 = freq.parse().map_err(|_| bad())?;
        if j < 1 {
            return Err(bad());
        }
        return Ok(Arc::new(move |t| (TAU * j as f64 * t / scale).sin()));
    }
    if let Some(freq) = tok.strip_prefix("cos:") {
        let j: u32 = freq.parse().map_err(|_| bad())?;
        if j < 1 {
            return Err(bad());
        }
        return Ok(Arc::new(move |t| (TAU * j as f64 * t / scale).cos()));
    }
    Err(bad())
}

/// Per-decision-maker info structures. `scale` is the horizon for continuous
/// problems and the stage count for discrete ones; trigonometric basis
/// tokens complete `n` periods over it.
pub fn build_info_specs(
    cfg: &ExperimentConfig,
    num_dms: usize,
    scale: f64,
) -> Result<Vec<InfoSpec>> {
    if cfg.infos.is_empty() {
        return Ok((0..num_dms).map(|_| InfoSpec::OpenLoop).collect());
    }
    if cfg.infos.len() != num_dms {
        bail!(
            "info: expected {num_dms} declarations (one per decision maker), found {}",
            cfg.infos.len()
        );
    }
    cfg.infos
        .iter()
        .enumerate()
        .map(|(i, sec)| {
            let field = format!("info[{i}]");
            match sec.kind {
                InfoKind::OpenLoop | InfoKind::Markov => {
                    if sec.functions.is_some() {
                        bail!("{field}.functions only applies to kind = \"basis\"");
                    }
                    Ok(match sec.kind {
                        InfoKind::OpenLoop => InfoSpec::OpenLoop,
                        _ => InfoSpec::ClosedLoopMarkov,
                    })
                }
                InfoKind::Basis => {
                    let tokens = sec.functions.as_ref().ok_or_else(|| {
                        anyhow!("{field}.functions is required for kind = \"basis\"")
                    })?;
                    if tokens.is_empty() {
                        bail!("{field}.functions must not be empty");
                    }
                    let basis = tokens
                        .iter()
                        .map(|tok| parse_basis_token(tok, scale, &format!("{field}.functions")))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(InfoSpec::FiniteBasis { basis })
                }
            }
        })
        .collect()
}

/// Instantiates the problem a config describes. Info declarations are
/// consumed here for discrete problems (they are baked into the instance)
/// and later for continuous ones.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<ProblemInstance> {
    match cfg.problem.kind {
        ProblemKind::Builtin => {
            let name = cfg.problem.name.as_deref().ok_or_else(|| {
                anyhow!("problem.name is required when problem.kind = \"builtin\"")
            })?;
            let builtin = find_builtin(name).ok_or_else(|| {
                let known: Vec<&str> = BUILTINS.iter().map(|b| b.name).collect();
                anyhow!(
                    "problem.name: no builtin named {name:?} (known: {})",
                    known.join(", ")
                )
            })?;
            Ok(match &builtin.kind {
                BuiltinKind::Team(make) => ProblemInstance::Team(make()),
                BuiltinKind::Lq(make) => ProblemInstance::Lq(make()),
                BuiltinKind::Gnf(make) => ProblemInstance::Gnf(make()),
                BuiltinKind::DiscreteTeam(make) => ProblemInstance::Discrete(make()),
            })
        }
        ProblemKind::Lq => {
            let sec = cfg.problem.lq.as_ref().ok_or_else(|| {
                anyhow!("problem.lq section is required when problem.kind = \"lq\"")
            })?;
            Ok(ProblemInstance::Lq(build_lq(sec)?))
        }
        ProblemKind::Gnf => {
            let sec = cfg.problem.gnf.as_ref().ok_or_else(|| {
                anyhow!("problem.gnf section is required when problem.kind = \"gnf\"")
            })?;
            Ok(ProblemInstance::Gnf(build_gnf(sec)?))
        }
        ProblemKind::DiscreteLq => {
            let sec = cfg.problem.discrete.as_ref().ok_or_else(|| {
                anyhow!("problem.discrete section is required when problem.kind = \"discrete-lq\"")
            })?;
            let steps = cfg
                .grid
                .k
                .ok_or_else(|| anyhow!("grid.k is required for discrete problems"))?;
            let infos = build_info_specs(cfg, sec.dm_dims.len(), steps as f64)?;
            build_discrete(sec, steps, infos).map(ProblemInstance::Discrete)
        }
    }
}
