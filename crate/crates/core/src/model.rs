use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fd;
use crate::grid::TimeGrid;
use crate::infostruct::InfoSpec;

pub type DynamicsFn = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type StateJacobianFn =
    Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ControlJacobianFn =
    Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type RunningCostFn = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type RunningCostGradFn =
    Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type TerminalCostFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type TerminalCostGradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Observation map: receives the time and the state path seen so far.
pub type ObservationFn = Arc<dyn Fn(f64, &Trajectory) -> DVector<f64> + Send + Sync>;

/// Sampled vector path over strictly increasing times, linearly interpolated
/// between nodes and clamped outside them.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidProblem(
                "trajectory needs at least one node".into(),
            ));
        }
        if times.len() != values.len() {
            return Err(Error::GridMismatch {
                context: "trajectory construction",
                lhs: times.len(),
                rhs: values.len(),
            });
        }
        let dim = values[0].len();
        for (k, w) in times.windows(2).enumerate() {
            // partial_cmp gives None for NaN, which must be rejected too
            if w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::InvalidProblem(format!(
                    "trajectory times must increase strictly (node {} -> {})",
                    k,
                    k + 1
                )));
            }
        }
        for (k, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "trajectory value",
                    expected: dim,
                    actual: v.len(),
                });
            }
            if !(times[k].is_finite() && v.iter().all(|c| c.is_finite())) {
                return Err(Error::NonFiniteEval {
                    context: "trajectory node",
                    t: times[k],
                });
            }
        }
        Ok(Self { times, values })
    }

    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        Self {
            times: grid.nodes(),
            values: vec![DVector::zeros(dim); grid.len()],
        }
    }

    pub fn constant(grid: &TimeGrid, value: DVector<f64>) -> Self {
        Self {
            times: grid.nodes(),
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn<F>(grid: &TimeGrid, dim: usize, f: F) -> Result<Self>
    where
        F: Fn(f64) -> DVector<f64>,
    {
        let times = grid.nodes();
        let values: Vec<_> = times.iter().map(|&t| f(t)).collect();
        let traj = Self::new(times, values)?;
        if traj.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "trajectory sample",
                expected: dim,
                actual: traj.dim(),
            });
        }
        Ok(traj)
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &DVector<f64> {
        &self.values[k]
    }

    pub fn first(&self) -> &DVector<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DVector<f64> {
        self.values.last().expect("nonempty")
    }

    /// Value at `t` by linear interpolation, clamped to the end nodes.
    pub fn at(&self, t: f64) -> DVector<f64> {
        let n = self.times.len();
        let right = self.times.partition_point(|&s| s <= t);
        if right == 0 {
            return self.values[0].clone();
        }
        if right == n {
            return self.values[n - 1].clone();
        }
        let (t0, t1) = (self.times[right - 1], self.times[right]);
        let theta = (t - t0) / (t1 - t0);
        &self.values[right - 1] * (1.0 - theta) + &self.values[right] * theta
    }

    /// Largest coordinate deviation over shared nodes.
    pub fn max_node_distance(&self, other: &Trajectory) -> Result<f64> {
        if self.len() != other.len() || self.dim() != other.dim() {
            return Err(Error::GridMismatch {
                context: "trajectory comparison",
                lhs: self.len(),
                rhs: other.len(),
            });
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.values.iter().zip(&other.values) {
            worst = worst.max((a - b).amax());
        }
        Ok(worst)
    }
}

/// Coordinate box `[lower_c, upper_c]`; bounds may be infinite.
#[derive(Debug, Clone)]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                context: "box bounds",
                expected: lower.len(),
                actual: upper.len(),
            });
        }
        for c in 0..lower.len() {
            if lower[c].is_nan() || upper[c].is_nan() || lower[c] > upper[c] {
                return Err(Error::InvalidProblem(format!(
                    "box coordinate {c} has empty or invalid range [{}, {}]",
                    lower[c], upper[c]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Unconstrained box, all coordinates `(-inf, inf)`.
    pub fn free(dim: usize) -> Self {
        Self {
            lower: DVector::from_element(dim, f64::NEG_INFINITY),
            upper: DVector::from_element(dim, f64::INFINITY),
        }
    }

    pub fn scalar(lower: f64, upper: f64) -> Result<Self> {
        Self::new(
            DVector::from_vec(vec![lower]),
            DVector::from_vec(vec![upper]),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn is_free(&self) -> bool {
        (0..self.dim())
            .all(|c| self.lower[c] == f64::NEG_INFINITY && self.upper[c] == f64::INFINITY)
    }

    pub fn clip(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |c, _| v[c].max(self.lower[c]).min(self.upper[c]))
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        (0..self.dim()).all(|c| v[c] >= self.lower[c] - tol && v[c] <= self.upper[c] + tol)
    }
}

/// Finite-horizon decision system shared by several decision makers, each
/// steering its own control block under its own action box and information
/// pattern. Derivative callbacks are optional; central differences stand in
/// when they are absent.
#[derive(Clone)]
pub struct TeamProblem {
    state_dim: usize,
    dm_dims: Vec<usize>,
    horizon: f64,
    x0: DVector<f64>,
    dynamics: DynamicsFn,
    jac_x: Option<StateJacobianFn>,
    jac_u: Option<ControlJacobianFn>,
    running_cost: RunningCostFn,
    running_grad_x: Option<RunningCostGradFn>,
    running_grad_u: Option<RunningCostGradFn>,
    terminal_cost: TerminalCostFn,
    terminal_grad: Option<TerminalCostGradFn>,
    action_sets: Vec<BoxSet>,
    info_specs: Vec<InfoSpec>,
    observations: Vec<Option<ObservationFn>>,
}

impl fmt::Debug for TeamProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TeamProblem")
            .field("state_dim", &self.state_dim)
            .field("dm_dims", &self.dm_dims)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl TeamProblem {
    pub fn builder(state_dim: usize, horizon: f64, x0: DVector<f64>) -> TeamProblemBuilder {
        TeamProblemBuilder {
            state_dim,
            horizon,
            x0,
            dynamics: None,
            jac_x: None,
            jac_u: None,
            running_cost: None,
            running_grad_x: None,
            running_grad_u: None,
            terminal_cost: None,
            terminal_grad: None,
            dm_dims: Vec::new(),
            action_sets: Vec::new(),
            info_specs: Vec::new(),
            observations: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn num_dms(&self) -> usize {
        self.dm_dims.len()
    }

    pub fn dm_dims(&self) -> &[usize] {
        &self.dm_dims
    }

    pub fn dm_dim(&self, i: usize) -> usize {
        self.dm_dims[i]
    }

    /// Total stacked control dimension.
    pub fn control_dim(&self) -> usize {
        self.dm_dims.iter().sum()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    /// Index range of decision maker `i` inside the stacked control vector.
    pub fn dm_block(&self, i: usize) -> Range<usize> {
        let start: usize = self.dm_dims[..i].iter().sum();
        start..start + self.dm_dims[i]
    }

    pub fn dynamics(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.dynamics)(t, x, u)
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jac_x.is_some() && self.jac_u.is_some()
    }

    pub fn state_jacobian(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac_x {
            Some(j) => j(t, x, u),
            None => fd::jacobian(|y| (self.dynamics)(t, y, u), x, self.state_dim),
        }
    }

    pub fn control_jacobian(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac_u {
            Some(j) => j(t, x, u),
            None => fd::jacobian(|v| (self.dynamics)(t, x, v), u, self.state_dim),
        }
    }

    pub fn running_cost(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.running_cost)(t, x, u)
    }

    pub fn running_grad_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.running_grad_x {
            Some(g) => g(t, x, u),
            None => fd::gradient(|y| (self.running_cost)(t, y, u), x),
        }
    }

    pub fn running_grad_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.running_grad_u {
            Some(g) => g(t, x, u),
            None => fd::gradient(|v| (self.running_cost)(t, x, v), u),
        }
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        (self.terminal_cost)(x)
    }

    pub fn terminal_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.terminal_grad {
            Some(g) => g(x),
            None => fd::gradient(|y| (self.terminal_cost)(y), x),
        }
    }

    pub fn action_set(&self, i: usize) -> &BoxSet {
        &self.action_sets[i]
    }

    pub fn info_spec(&self, i: usize) -> &InfoSpec {
        &self.info_specs[i]
    }

    /// Observation of decision maker `i` at time `t` given the state path.
    /// Defaults to the current state when no map was installed.
    pub fn observation(&self, i: usize, t: f64, x_path: &Trajectory) -> DVector<f64> {
        match &self.observations[i] {
            Some(h) => h(t, x_path),
            None => x_path.at(t),
        }
    }

    /// Clips each decision maker's block of a stacked control into its box.
    pub fn clip_stacked(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = u.clone();
        for i in 0..self.num_dms() {
            let range = self.dm_block(i);
            let clipped = self.action_sets[i].clip(&u.rows(range.start, range.len()).into_owned());
            out.rows_mut(range.start, range.len()).copy_from(&clipped);
        }
        out
    }

    pub fn stack_blocks(&self, blocks: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.control_dim());
        for (i, b) in blocks.iter().enumerate() {
            let range = self.dm_block(i);
            out.rows_mut(range.start, range.len()).copy_from(b);
        }
        out
    }

    pub fn split_blocks(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.num_dms())
            .map(|i| {
                let range = self.dm_block(i);
                u.rows(range.start, range.len()).into_owned()
            })
            .collect()
    }
}

pub struct TeamProblemBuilder {
    state_dim: usize,
    horizon: f64,
    x0: DVector<f64>,
    dynamics: Option<DynamicsFn>,
    jac_x: Option<StateJacobianFn>,
    jac_u: Option<ControlJacobianFn>,
    running_cost: Option<RunningCostFn>,
    running_grad_x: Option<RunningCostGradFn>,
    running_grad_u: Option<RunningCostGradFn>,
    terminal_cost: Option<TerminalCostFn>,
    terminal_grad: Option<TerminalCostGradFn>,
    dm_dims: Vec<usize>,
    action_sets: Vec<BoxSet>,
    info_specs: Vec<InfoSpec>,
    observations: Vec<Option<ObservationFn>>,
}

impl TeamProblemBuilder {
    pub fn dynamics<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.dynamics = Some(Arc::new(f));
        self
    }

    pub fn dynamics_jacobians<Fx, Fu>(mut self, fx: Fx, fu: Fu) -> Self
    where
        Fx: Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        Fu: Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jac_x = Some(Arc::new(fx));
        self.jac_u = Some(Arc::new(fu));
        self
    }

    pub fn running_cost<F>(mut self, l: F) -> Self
    where
        F: Fn(f64, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        self.running_cost = Some(Arc::new(l));
        self
    }

    pub fn running_cost_gradients<Gx, Gu>(mut self, lx: Gx, lu: Gu) -> Self
    where
        Gx: Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        Gu: Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.running_grad_x = Some(Arc::new(lx));
        self.running_grad_u = Some(Arc::new(lu));
        self
    }

    pub fn terminal_cost<F>(mut self, phi: F) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        self.terminal_cost = Some(Arc::new(phi));
        self
    }

    pub fn terminal_cost_gradient<G>(mut self, phix: G) -> Self
    where
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.terminal_grad = Some(Arc::new(phix));
        self
    }

    pub fn decision_maker(mut self, dim: usize, action_set: BoxSet, info: InfoSpec) -> Self {
        self.dm_dims.push(dim);
        self.action_sets.push(action_set);
        self.info_specs.push(info);
        self.observations.push(None);
        self
    }

    /// Installs an observation map for decision maker `i` (added earlier).
    pub fn observation<F>(mut self, i: usize, h: F) -> Self
    where
        F: Fn(f64, &Trajectory) -> DVector<f64> + Send + Sync + 'static,
    {
        if i < self.observations.len() {
            self.observations[i] = Some(Arc::new(h));
        } else {
            // surfaced as InvalidProblem in build()
            self.dm_dims.push(usize::MAX);
        }
        self
    }

    pub fn build(self) -> Result<TeamProblem> {
        if self.state_dim == 0 {
            return Err(Error::InvalidProblem(
                "state dimension must be positive".into(),
            ));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "horizon must be finite and positive, got {}",
                self.horizon
            )));
        }
        if self.x0.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: self.state_dim,
                actual: self.x0.len(),
            });
        }
        if self.dm_dims.is_empty() {
            return Err(Error::InvalidProblem(
                "at least one decision maker is required".into(),
            ));
        }
        if self.dm_dims.iter().any(|&d| d == 0 || d == usize::MAX) {
            return Err(Error::InvalidProblem(
                "decision-maker blocks must have positive dimension and valid indices".into(),
            ));
        }
        for (i, b) in self.action_sets.iter().enumerate() {
            if b.dim() != self.dm_dims[i] {
                return Err(Error::DimensionMismatch {
                    context: "action box",
                    expected: self.dm_dims[i],
                    actual: b.dim(),
                });
            }
        }
        let dynamics = self
            .dynamics
            .ok_or_else(|| Error::InvalidProblem("dynamics callback is required".into()))?;
        let running_cost = self.running_cost.unwrap_or_else(|| {
            Arc::new(|_: f64, _: &DVector<f64>, _: &DVector<f64>| 0.0) as RunningCostFn
        });
        let terminal_cost = self
            .terminal_cost
            .unwrap_or_else(|| Arc::new(|_: &DVector<f64>| 0.0) as TerminalCostFn);
        Ok(TeamProblem {
            state_dim: self.state_dim,
            dm_dims: self.dm_dims,
            horizon: self.horizon,
            x0: self.x0,
            dynamics,
            jac_x: self.jac_x,
            jac_u: self.jac_u,
            running_cost,
            running_grad_x: self.running_grad_x,
            running_grad_u: self.running_grad_u,
            terminal_cost,
            terminal_grad: self.terminal_grad,
            action_sets: self.action_sets,
            info_specs: self.info_specs,
            observations: self.observations,
        })
    }
}

/// Knobs for [`validate_problem`] sampling.
#[derive(Debug, Clone)]
pub struct ValidateOptions {
    pub samples: usize,
    pub seed: u64,
    /// Difference quotients and growth ratios above this are flagged.
    pub ratio_cap: f64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            samples: 25,
            seed: 0,
            ratio_cap: 1e6,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ValidationIssue {
    StateRatio { t: f64, ratio: f64 },
    ControlRatio { t: f64, ratio: f64 },
    GrowthRatio { t: f64, ratio: f64 },
    AnticipativeObservation { dm: usize, t: f64, deviation: f64 },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::StateRatio { t, ratio } => {
                write!(
                    f,
                    "state difference quotient {ratio:.3e} at t = {t:.4} exceeds the cap"
                )
            }
            Self::ControlRatio { t, ratio } => {
                write!(
                    f,
                    "control difference quotient {ratio:.3e} at t = {t:.4} exceeds the cap"
                )
            }
            Self::GrowthRatio { t, ratio } => {
                write!(
                    f,
                    "|f|/(1+|x|+|u|) = {ratio:.3e} at t = {t:.4} exceeds the cap"
                )
            }
            Self::AnticipativeObservation { dm, t, deviation } => write!(
                f,
                "observation of decision maker {dm} at t = {t:.4} depends on the future \
                 (deviation {deviation:.3e})"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub samples: usize,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

fn require_finite(context: &'static str, t: f64, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NonFiniteEval { context, t })
    }
}

/// Randomized sanity checks: callback dimensions, finiteness, sampled
/// difference quotients against `opts.ratio_cap`, linear-growth ratio, and an
/// exact prefix test that each observation ignores the path after `t`.
pub fn validate_problem(p: &TeamProblem, opts: &ValidateOptions) -> Result<ValidationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = p.state_dim();
    let d = p.control_dim();
    let mut issues = Vec::new();

    let u_zero = p.clip_stacked(&DVector::zeros(d));
    let f0 = p.dynamics(0.0, p.x0(), &u_zero);
    if f0.len() != n {
        return Err(Error::DimensionMismatch {
            context: "dynamics output",
            expected: n,
            actual: f0.len(),
        });
    }
    require_finite("dynamics", 0.0, f0.iter().all(|c| c.is_finite()))?;
    let jx = p.state_jacobian(0.0, p.x0(), &u_zero);
    if jx.nrows() != n || jx.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "state jacobian",
            expected: n * n,
            actual: jx.nrows() * jx.ncols(),
        });
    }
    let ju = p.control_jacobian(0.0, p.x0(), &u_zero);
    if ju.nrows() != n || ju.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "control jacobian",
            expected: n * d,
            actual: ju.nrows() * ju.ncols(),
        });
    }
    let lx = p.running_grad_x(0.0, p.x0(), &u_zero);
    if lx.len() != n {
        return Err(Error::DimensionMismatch {
            context: "running cost state gradient",
            expected: n,
            actual: lx.len(),
        });
    }
    let lu = p.running_grad_u(0.0, p.x0(), &u_zero);
    if lu.len() != d {
        return Err(Error::DimensionMismatch {
            context: "running cost control gradient",
            expected: d,
            actual: lu.len(),
        });
    }
    let phix = p.terminal_grad(p.x0());
    if phix.len() != n {
        return Err(Error::DimensionMismatch {
            context: "terminal cost gradient",
            expected: n,
            actual: phix.len(),
        });
    }
    require_finite(
        "running cost",
        0.0,
        p.running_cost(0.0, p.x0(), &u_zero).is_finite(),
    )?;
    require_finite("terminal cost", 0.0, p.terminal_cost(p.x0()).is_finite())?;

    let scale = 1.0 + p.x0().amax();
    for _ in 0..opts.samples {
        let t = rng.random_range(0.0..p.horizon());
        let x = DVector::from_fn(n, |c, _| p.x0()[c] + scale * rng.random_range(-1.0..1.0));
        let u = p.clip_stacked(&DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)));
        let f = p.dynamics(t, &x, &u);
        require_finite("dynamics", t, f.iter().all(|c| c.is_finite()))?;
        require_finite("running cost", t, p.running_cost(t, &x, &u).is_finite())?;

        let growth = f.norm() / (1.0 + x.norm() + u.norm());
        if growth > opts.ratio_cap {
            issues.push(ValidationIssue::GrowthRatio { t, ratio: growth });
        }

        let dx = DVector::from_fn(n, |_, _| 1e-3 * rng.random_range(-1.0..1.0));
        let x2 = &x + &dx;
        if dx.norm() > 1e-14 {
            let ratio = (p.dynamics(t, &x2, &u) - &f).norm() / dx.norm();
            if ratio > opts.ratio_cap {
                issues.push(ValidationIssue::StateRatio { t, ratio });
            }
        }
        let u2 =
            p.clip_stacked(&(&u + DVector::from_fn(d, |_, _| 1e-3 * rng.random_range(-1.0..1.0))));
        let du = (&u2 - &u).norm();
        if du > 1e-14 {
            let ratio = (p.dynamics(t, &x, &u2) - &f).norm() / du;
            if ratio > opts.ratio_cap {
                issues.push(ValidationIssue::ControlRatio { t, ratio });
            }
        }
    }

    // Observation causality: two state paths agreeing up to node k must give
    // bitwise-equal observations at node k.
    let probe_grid = TimeGrid::new(p.horizon(), 16)?;
    for i in 0..p.num_dms() {
        for _ in 0..3 {
            let k = rng.random_range(1..probe_grid.steps());
            let t = probe_grid.node(k);
            let base: Vec<DVector<f64>> = (0..probe_grid.len())
                .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let mut tail = base.clone();
            for v in tail.iter_mut().skip(k + 1) {
                *v += DVector::from_fn(n, |_, _| 1.0 + rng.random_range(0.0..1.0));
            }
            let path_a = Trajectory::new(probe_grid.nodes(), base)?;
            let path_b = Trajectory::new(probe_grid.nodes(), tail)?;
            let ya = p.observation(i, t, &path_a);
            let yb = p.observation(i, t, &path_b);
            require_finite("observation", t, ya.iter().all(|c| c.is_finite()))?;
            if ya.len() != yb.len() {
                return Err(Error::DimensionMismatch {
                    context: "observation output",
                    expected: ya.len(),
                    actual: yb.len(),
                });
            }
            let deviation = (&ya - &yb).amax();
            if deviation != 0.0 {
                issues.push(ValidationIssue::AnticipativeObservation {
                    dm: i,
                    t,
                    deviation,
                });
            }
        }
    }

    Ok(ValidationReport {
        samples: opts.samples,
        issues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_problem() -> TeamProblem {
        TeamProblem::builder(1, 1.0, DVector::from_vec(vec![1.0]))
            .dynamics(|_, _, u| u.clone())
            .running_cost(|_, _, u| 0.5 * u.dot(u))
            .terminal_cost(|x| 0.5 * x.dot(x))
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap()
    }

    #[test]
    fn trajectory_interpolates_linearly_and_clamps() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let traj =
            Trajectory::from_fn(&grid, 1, |t| DVector::from_vec(vec![2.0 * t + 1.0])).unwrap();
        assert_relative_eq!(traj.at(0.375)[0], 1.75, epsilon = 1e-15);
        assert_relative_eq!(traj.at(-3.0)[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(traj.at(7.0)[0], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn trajectory_rejects_bad_input() {
        assert!(Trajectory::new(vec![], vec![]).is_err());
        assert!(Trajectory::new(vec![0.0, 0.0], vec![DVector::zeros(1); 2]).is_err());
        assert!(Trajectory::new(vec![0.0, 1.0], vec![DVector::zeros(1)]).is_err());
        assert!(Trajectory::new(
            vec![0.0, 1.0],
            vec![DVector::from_vec(vec![f64::NAN]), DVector::zeros(1)]
        )
        .is_err());
    }

    #[test]
    fn box_clip_and_membership() {
        let b = BoxSet::new(
            DVector::from_vec(vec![-1.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        let clipped = b.clip(&DVector::from_vec(vec![2.0, -3.0]));
        assert_eq!(clipped, DVector::from_vec(vec![1.0, -1.0]));
        assert!(b.contains(&clipped, 0.0));
        assert!(!b.contains(&DVector::from_vec(vec![1.1, 0.0]), 1e-3));

        let free = BoxSet::free(2);
        assert!(free.is_free());
        let v = DVector::from_vec(vec![1e9, -1e9]);
        assert_eq!(free.clip(&v), v);

        assert!(BoxSet::scalar(1.0, -1.0).is_err());
        assert!(BoxSet::scalar(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn stacked_control_blocks_round_trip() {
        let p = TeamProblem::builder(2, 1.0, DVector::zeros(2))
            .dynamics(|_, _, u| u.clone())
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .decision_maker(1, BoxSet::scalar(-0.25, 0.25).unwrap(), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        assert_eq!(p.dm_block(0), 0..1);
        assert_eq!(p.dm_block(1), 1..2);
        let u = DVector::from_vec(vec![3.0, 3.0]);
        assert_eq!(p.clip_stacked(&u), DVector::from_vec(vec![3.0, 0.25]));
        let blocks = p.split_blocks(&u);
        assert_eq!(p.stack_blocks(&blocks), u);
    }

    #[test]
    fn fd_jacobians_back_the_missing_callbacks() {
        let p = scalar_problem();
        let x = DVector::from_vec(vec![0.7]);
        let u = DVector::from_vec(vec![-0.2]);
        assert!(!p.has_analytic_jacobians());
        assert_relative_eq!(p.state_jacobian(0.1, &x, &u)[(0, 0)], 0.0, epsilon = 1e-8);
        assert_relative_eq!(p.control_jacobian(0.1, &x, &u)[(0, 0)], 1.0, epsilon = 1e-8);
        assert_relative_eq!(p.running_grad_u(0.1, &x, &u)[0], -0.2, epsilon = 1e-8);
        assert_relative_eq!(p.terminal_grad(&x)[0], 0.7, epsilon = 1e-8);
    }

    #[test]
    fn validation_passes_a_well_posed_problem() {
        let report = validate_problem(&scalar_problem(), &ValidateOptions::default()).unwrap();
        assert!(report.is_clean(), "unexpected issues: {:?}", report.issues);
    }

    #[test]
    fn validation_flags_an_anticipative_observation() {
        let p = TeamProblem::builder(1, 1.0, DVector::from_vec(vec![1.0]))
            .dynamics(|_, _, u| u.clone())
            .decision_maker(1, BoxSet::free(1), InfoSpec::ClosedLoopMarkov)
            .observation(0, |_, path: &Trajectory| path.last().clone())
            .build()
            .unwrap();
        let report = validate_problem(&p, &ValidateOptions::default()).unwrap();
        assert!(report
            .issues
            .iter()
            .any(|i| matches!(i, ValidationIssue::AnticipativeObservation { dm: 0, .. })));
    }

    #[test]
    fn causal_observation_shows_zero_deviation() {
        let p = TeamProblem::builder(1, 1.0, DVector::from_vec(vec![1.0]))
            .dynamics(|_, _, u| u.clone())
            .decision_maker(1, BoxSet::free(1), InfoSpec::ClosedLoopMarkov)
            .observation(0, |t, path: &Trajectory| path.at(t))
            .build()
            .unwrap();
        let report = validate_problem(&p, &ValidateOptions::default()).unwrap();
        assert!(!report
            .issues
            .iter()
            .any(|i| matches!(i, ValidationIssue::AnticipativeObservation { .. })));
    }

    #[test]
    fn validation_flags_a_runaway_quotient() {
        let p = TeamProblem::builder(1, 1.0, DVector::from_vec(vec![0.0]))
            .dynamics(|_, x, _| x * 1e7)
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        let report = validate_problem(&p, &ValidateOptions::default()).unwrap();
        assert!(report
            .issues
            .iter()
            .any(|i| matches!(i, ValidationIssue::StateRatio { .. })));
    }

    #[test]
    fn builder_rejects_structural_mistakes() {
        let missing_dynamics = TeamProblem::builder(1, 1.0, DVector::zeros(1))
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build();
        assert!(missing_dynamics.is_err());

        let wrong_x0 = TeamProblem::builder(2, 1.0, DVector::zeros(1))
            .dynamics(|_, _, u| u.clone())
            .decision_maker(2, BoxSet::free(2), InfoSpec::OpenLoop)
            .build();
        assert!(wrong_x0.is_err());

        let no_dms = TeamProblem::builder(1, 1.0, DVector::zeros(1))
            .dynamics(|_, _, u| u.clone())
            .build();
        assert!(no_dms.is_err());

        let box_dim = TeamProblem::builder(1, 1.0, DVector::zeros(1))
            .dynamics(|_, _, u| u.clone())
            .decision_maker(2, BoxSet::free(1), InfoSpec::OpenLoop)
            .build();
        assert!(box_dim.is_err());
    }

    #[test]
    fn validation_reports_dimension_mismatches_as_errors() {
        let p = TeamProblem::builder(2, 1.0, DVector::zeros(2))
            .dynamics(|_, _, _| DVector::zeros(3))
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        match validate_problem(&p, &ValidateOptions::default()) {
            Err(Error::DimensionMismatch { context, .. }) => {
                assert_eq!(context, "dynamics output")
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }
}
