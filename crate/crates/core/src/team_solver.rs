use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::hamiltonian;
use crate::infostruct::{build_subspace, InfoSubspace};
use crate::integrate::{integrate_adjoint, integrate_forward};
use crate::model::{TeamProblem, Trajectory};

/// One decision maker's strategy: free nodewise values, or coefficients
/// against that decision maker's scalar feature basis (one coefficient column
/// per control coordinate).
#[derive(Debug, Clone)]
pub enum DmStrategy {
    Grid(Vec<DVector<f64>>),
    Basis(DMatrix<f64>),
}

/// Joint strategy of all decision makers together with its realized nodewise
/// control values. Realized values are always clipped into the action boxes;
/// when a box actually clips a basis-parameterized strategy the realized path
/// can leave the feature span.
#[derive(Debug, Clone)]
pub struct StrategyProfile {
    strategies: Vec<DmStrategy>,
    realized: Vec<Vec<DVector<f64>>>,
    nodes: usize,
}

impl StrategyProfile {
    /// All-zero controls, clipped into the action boxes.
    pub fn zeros(p: &TeamProblem, grid: &TimeGrid) -> Self {
        let realized: Vec<Vec<DVector<f64>>> = (0..p.num_dms())
            .map(|i| vec![p.action_set(i).clip(&DVector::zeros(p.dm_dim(i))); grid.len()])
            .collect();
        Self {
            strategies: realized
                .iter()
                .map(|v| DmStrategy::Grid(v.clone()))
                .collect(),
            realized,
            nodes: grid.len(),
        }
    }

    /// Nodewise values per decision maker; values are clipped on construction.
    pub fn from_node_values(
        p: &TeamProblem,
        grid: &TimeGrid,
        per_dm: Vec<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        if per_dm.len() != p.num_dms() {
            return Err(Error::DimensionMismatch {
                context: "strategy profile",
                expected: p.num_dms(),
                actual: per_dm.len(),
            });
        }
        let mut realized = Vec::with_capacity(per_dm.len());
        for (i, values) in per_dm.into_iter().enumerate() {
            if values.len() != grid.len() {
                return Err(Error::GridMismatch {
                    context: "strategy profile",
                    lhs: grid.len(),
                    rhs: values.len(),
                });
            }
            let mut clipped = Vec::with_capacity(values.len());
            for v in &values {
                if v.len() != p.dm_dim(i) {
                    return Err(Error::DimensionMismatch {
                        context: "strategy block",
                        expected: p.dm_dim(i),
                        actual: v.len(),
                    });
                }
                if !v.iter().all(|c| c.is_finite()) {
                    return Err(Error::NonFiniteEval {
                        context: "strategy value",
                        t: f64::NAN,
                    });
                }
                clipped.push(p.action_set(i).clip(v));
            }
            realized.push(clipped);
        }
        Ok(Self {
            strategies: realized
                .iter()
                .map(|v| DmStrategy::Grid(v.clone()))
                .collect(),
            realized,
            nodes: grid.len(),
        })
    }

    /// Constant stacked control, clipped.
    pub fn constant(p: &TeamProblem, grid: &TimeGrid, u: &DVector<f64>) -> Result<Self> {
        if u.len() != p.control_dim() {
            return Err(Error::DimensionMismatch {
                context: "strategy profile",
                expected: p.control_dim(),
                actual: u.len(),
            });
        }
        let blocks = p.split_blocks(u);
        Self::from_node_values(
            p,
            grid,
            blocks.into_iter().map(|b| vec![b; grid.len()]).collect(),
        )
    }

    pub(crate) fn from_parts(
        strategies: Vec<DmStrategy>,
        realized: Vec<Vec<DVector<f64>>>,
        nodes: usize,
    ) -> Self {
        Self {
            strategies,
            realized,
            nodes,
        }
    }

    pub fn num_dms(&self) -> usize {
        self.strategies.len()
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn strategy(&self, i: usize) -> &DmStrategy {
        &self.strategies[i]
    }

    /// Clipped nodewise control values of decision maker `i`.
    pub fn realized(&self, i: usize) -> &[DVector<f64>] {
        &self.realized[i]
    }

    /// Stacked control path on the grid.
    pub fn to_trajectory(&self, p: &TeamProblem, grid: &TimeGrid) -> Result<Trajectory> {
        if self.nodes != grid.len() {
            return Err(Error::GridMismatch {
                context: "strategy profile",
                lhs: grid.len(),
                rhs: self.nodes,
            });
        }
        let values: Vec<DVector<f64>> = (0..self.nodes)
            .map(|k| {
                let blocks: Vec<DVector<f64>> = (0..self.num_dms())
                    .map(|i| self.realized[i][k].clone())
                    .collect();
                p.stack_blocks(&blocks)
            })
            .collect();
        Trajectory::new(grid.nodes(), values)
    }

    /// Largest realized-control deviation from another profile.
    pub fn max_node_distance(&self, other: &StrategyProfile) -> Result<f64> {
        if self.num_dms() != other.num_dms() || self.nodes != other.nodes {
            return Err(Error::GridMismatch {
                context: "profile comparison",
                lhs: self.nodes,
                rhs: other.nodes,
            });
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.realized.iter().zip(&other.realized) {
            for (va, vb) in a.iter().zip(b) {
                worst = worst.max((va - vb).amax());
            }
        }
        Ok(worst)
    }
}

/// Solver knobs. Defaults: residual tolerance 1e-5, cost tolerance 1e-8,
/// at most 5000 iterations, damping 1/2 for fixed-point paths.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub cost_tol: f64,
    pub max_iterations: usize,
    /// Relaxation factor for fixed-point iterations, in (0, 1].
    pub damping: f64,
    pub seed: u64,
    pub armijo_c: f64,
    pub armijo_shrink: f64,
    pub max_line_search: usize,
    /// Sample count for the optimality certificate; 0 disables it.
    pub certificate_samples: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            cost_tol: 1e-8,
            max_iterations: 5000,
            damping: 0.5,
            seed: 0,
            armijo_c: 1e-4,
            armijo_shrink: 0.5,
            max_line_search: 40,
            certificate_samples: 48,
        }
    }
}

impl SolveOptions {
    pub(crate) fn check(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidProblem("tolerance must be positive".into()));
        }
        if !(self.cost_tol >= 0.0 && self.cost_tol.is_finite()) {
            return Err(Error::InvalidProblem(
                "cost tolerance must be nonnegative".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidProblem(
                "iteration cap must be positive".into(),
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidProblem("damping must lie in (0, 1]".into()));
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return Err(Error::InvalidProblem(
                "line-search shrink must lie in (0, 1)".into(),
            ));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::InvalidProblem(
                "line-search constant must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome summary of a solve run. `cost_history` holds the cost of every
/// accepted iterate, starting with the initial one; accepted steps never
/// increase it.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub cost: f64,
    pub residual: f64,
    pub converged: bool,
    pub cost_history: Vec<f64>,
    pub sufficiency: Option<SufficiencyCertificate>,
}

/// Sampled evidence that the solved point is a global team optimum: midpoint
/// convexity of the Hamiltonian in (state, control) along the trajectory,
/// midpoint convexity of the terminal cost, and nonnegative cost gaps under
/// random admissible perturbations.
#[derive(Debug, Clone)]
pub struct SufficiencyCertificate {
    pub holds: bool,
    /// Most positive relative violation of H(mid) <= (H_1 + H_2) / 2.
    pub hamiltonian_defect: f64,
    /// Same for the terminal cost.
    pub terminal_defect: f64,
    pub convexity_samples: usize,
    pub perturbation_samples: usize,
    /// Smallest observed J(perturbed) - J(solution).
    pub min_cost_margin: f64,
}

/// Stationarity data: `rho` is the largest nodewise violation of the
/// projected variational inequality; `projected_gradients` holds each
/// decision maker's projected control-gradient path.
#[derive(Debug, Clone)]
pub struct StationarityReport {
    pub rho: f64,
    pub projected_gradients: Vec<Trajectory>,
}

fn cost_from(p: &TeamProblem, grid: &TimeGrid, u: &Trajectory, x: &Trajectory) -> Result<f64> {
    let samples: Vec<f64> = (0..grid.len())
        .map(|k| p.running_cost(grid.node(k), x.value(k), u.value(k)))
        .collect();
    for (k, s) in samples.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFiniteEval {
                context: "running cost",
                t: grid.node(k),
            });
        }
    }
    let terminal = p.terminal_cost(x.last());
    if !terminal.is_finite() {
        return Err(Error::NonFiniteEval {
            context: "terminal cost",
            t: grid.horizon(),
        });
    }
    Ok(grid.trapezoid(&samples)? + terminal)
}

/// Cost of a strategy profile: trapezoid quadrature of the running cost along
/// the state response plus the terminal cost.
pub fn evaluate_cost(p: &TeamProblem, profile: &StrategyProfile, grid: &TimeGrid) -> Result<f64> {
    let u = profile.to_trajectory(p, grid)?;
    let x = integrate_forward(p, &u, grid)?;
    cost_from(p, grid, &u, &x)
}

fn build_dm_subspaces(
    p: &TeamProblem,
    grid: &TimeGrid,
    x: &Trajectory,
) -> Result<Vec<InfoSubspace>> {
    (0..p.num_dms())
        .map(|i| {
            let spec = p.info_spec(i);
            if spec.is_observation_dependent() {
                let times = grid.nodes();
                let values: Vec<DVector<f64>> =
                    times.iter().map(|&t| p.observation(i, t, x)).collect();
                let y = Trajectory::new(times, values)?;
                build_subspace(spec, i, &y, grid)
            } else {
                build_subspace(spec, i, &Trajectory::zeros(grid, 1), grid)
            }
        })
        .collect()
}

/// Fits the profile to the given subspaces: nodal strategies of restricted
/// decision makers are replaced by their span fit, coefficients against a
/// stale basis are refit from the realized values.
fn normalized(
    p: &TeamProblem,
    grid: &TimeGrid,
    profile: &StrategyProfile,
    subs: &[InfoSubspace],
) -> Result<StrategyProfile> {
    let mut strategies = Vec::with_capacity(p.num_dms());
    let mut realized = Vec::with_capacity(p.num_dms());
    for i in 0..p.num_dms() {
        let action = p.action_set(i);
        match &subs[i] {
            InfoSubspace::Full { .. } => {
                let values: Vec<DVector<f64>> =
                    profile.realized[i].iter().map(|v| action.clip(v)).collect();
                strategies.push(DmStrategy::Grid(values.clone()));
                realized.push(values);
            }
            InfoSubspace::Span(b) => {
                let theta = match &profile.strategies[i] {
                    DmStrategy::Basis(th) if th.nrows() == b.dim() && th.ncols() == p.dm_dim(i) => {
                        th.clone()
                    }
                    _ => b.coefficients_of(&profile.realized[i])?,
                };
                let values: Vec<DVector<f64>> = b
                    .synthesize(&theta)?
                    .iter()
                    .map(|v| action.clip(v))
                    .collect();
                strategies.push(DmStrategy::Basis(theta));
                realized.push(values);
            }
        }
    }
    Ok(StrategyProfile {
        strategies,
        realized,
        nodes: grid.len(),
    })
}

pub(crate) fn coordinate_violation(lo: f64, up: f64, u: f64, r: f64) -> f64 {
    // largest decrease rate -r (v - u) over feasible v with |v - u| <= 1
    let down = (lo - u).max(-1.0);
    let up_step = (up - u).min(1.0);
    (-r * down).max(-r * up_step).max(0.0)
}

fn residual_parts(
    p: &TeamProblem,
    subs: &[InfoSubspace],
    realized: &[Vec<DVector<f64>>],
    hu: &[DVector<f64>],
) -> Result<(f64, Vec<Vec<DVector<f64>>>)> {
    let nodes = hu.len();
    let mut projected = Vec::with_capacity(p.num_dms());
    for i in 0..p.num_dms() {
        let range = p.dm_block(i);
        let blocks: Vec<DVector<f64>> = hu
            .iter()
            .map(|g| g.rows(range.start, range.len()).into_owned())
            .collect();
        projected.push(subs[i].project_samples(&blocks)?);
    }
    let mut rho: f64 = 0.0;
    for k in 0..nodes {
        let mut sq = 0.0;
        for i in 0..p.num_dms() {
            let action = p.action_set(i);
            let u = &realized[i][k];
            let r = &projected[i][k];
            for c in 0..u.len() {
                let v = coordinate_violation(action.lower()[c], action.upper()[c], u[c], r[c]);
                sq += v * v;
            }
        }
        rho = rho.max(sq.sqrt());
    }
    Ok((rho, projected))
}

/// Largest nodewise violation of the projected first-order conditions for the
/// given profile: each decision maker's control-gradient path is projected
/// onto its restriction subspace and tested against its action box.
pub fn stationarity_residual(
    p: &TeamProblem,
    profile: &StrategyProfile,
    grid: &TimeGrid,
) -> Result<StationarityReport> {
    let u = profile.to_trajectory(p, grid)?;
    let x = integrate_forward(p, &u, grid)?;
    let psi = integrate_adjoint(p, &u, &x, grid)?;
    let hu = control_gradients(p, grid, &u, &x, &psi)?;
    let subs = build_dm_subspaces(p, grid, &x)?;
    let (rho, projected) = residual_parts(p, &subs, &profile.realized, &hu)?;
    let projected_gradients = projected
        .into_iter()
        .map(|values| Trajectory::new(grid.nodes(), values))
        .collect::<Result<Vec<_>>>()?;
    Ok(StationarityReport {
        rho,
        projected_gradients,
    })
}

fn control_gradients(
    p: &TeamProblem,
    grid: &TimeGrid,
    u: &Trajectory,
    x: &Trajectory,
    psi: &Trajectory,
) -> Result<Vec<DVector<f64>>> {
    (0..grid.len())
        .map(|k| hamiltonian::grad_u(p, grid.node(k), x.value(k), psi.value(k), u.value(k)))
        .collect()
}

struct LoopState {
    profile: StrategyProfile,
    cost: f64,
    hu: Vec<DVector<f64>>,
    subs: Vec<InfoSubspace>,
    rho: f64,
}

/// Forward response, subspace refresh, span refit, and backward data for the
/// given profile. Observation-dependent subspaces are rebuilt from the state
/// response of the incoming profile; when the refit changes the realized
/// controls the state and cost are recomputed for the refitted profile.
fn make_state(p: &TeamProblem, grid: &TimeGrid, profile: StrategyProfile) -> Result<LoopState> {
    let u0 = profile.to_trajectory(p, grid)?;
    let x0 = integrate_forward(p, &u0, grid)?;
    let subs = build_dm_subspaces(p, grid, &x0)?;
    let fitted = normalized(p, grid, &profile, &subs)?;
    let (u, x) = if fitted.max_node_distance(&profile)? > 0.0 {
        let u = fitted.to_trajectory(p, grid)?;
        let x = integrate_forward(p, &u, grid)?;
        (u, x)
    } else {
        (u0, x0)
    };
    let cost = cost_from(p, grid, &u, &x)?;
    let psi = integrate_adjoint(p, &u, &x, grid)?;
    let hu = control_gradients(p, grid, &u, &x, &psi)?;
    let (rho, _) = residual_parts(p, &subs, &fitted.realized, &hu)?;
    Ok(LoopState {
        profile: fitted,
        cost,
        hu,
        subs,
        rho,
    })
}

enum BlockGrad {
    Node(Vec<DVector<f64>>),
    Coeff(DMatrix<f64>),
}

fn block_gradient(
    p: &TeamProblem,
    grid: &TimeGrid,
    sub: &InfoSubspace,
    hu: &[DVector<f64>],
    i: usize,
) -> BlockGrad {
    let range = p.dm_block(i);
    match sub {
        InfoSubspace::Full { .. } => BlockGrad::Node(
            hu.iter()
                .map(|g| g.rows(range.start, range.len()).into_owned())
                .collect(),
        ),
        InfoSubspace::Span(b) => {
            let weights = grid.trapezoid_weights();
            let mut coeff = DMatrix::zeros(b.dim(), range.len());
            for k in 0..grid.len() {
                let block = hu[k].rows(range.start, range.len());
                for s in 0..b.dim() {
                    let f = weights[k] * b.feature(k, s);
                    for c in 0..range.len() {
                        coeff[(s, c)] += f * block[c];
                    }
                }
            }
            BlockGrad::Coeff(coeff)
        }
    }
}

fn stepped(
    p: &TeamProblem,
    state: &LoopState,
    grads: &[(usize, BlockGrad)],
    alpha: f64,
) -> Result<StrategyProfile> {
    let mut profile = state.profile.clone();
    for (i, grad) in grads {
        let action = p.action_set(*i);
        match (&state.profile.strategies[*i], grad) {
            (DmStrategy::Grid(values), BlockGrad::Node(g)) => {
                let new: Vec<DVector<f64>> = values
                    .iter()
                    .zip(g)
                    .map(|(v, gk)| action.clip(&(v - gk * alpha)))
                    .collect();
                profile.strategies[*i] = DmStrategy::Grid(new.clone());
                profile.realized[*i] = new;
            }
            (DmStrategy::Basis(theta), BlockGrad::Coeff(gc)) => {
                let new_theta = theta - gc * alpha;
                let b = state.subs[*i].span().expect("basis strategy has a span");
                let values: Vec<DVector<f64>> = b
                    .synthesize(&new_theta)?
                    .iter()
                    .map(|v| action.clip(v))
                    .collect();
                profile.strategies[*i] = DmStrategy::Basis(new_theta);
                profile.realized[*i] = values;
            }
            _ => {
                return Err(Error::InvalidProblem(
                    "strategy kind does not match its subspace".into(),
                ))
            }
        }
    }
    Ok(profile)
}

fn decrease_measure(
    state: &LoopState,
    trial: &StrategyProfile,
    grads: &[(usize, BlockGrad)],
    weights: &[f64],
) -> f64 {
    let mut m = 0.0;
    for (i, grad) in grads {
        match grad {
            BlockGrad::Node(g) => {
                for k in 0..g.len() {
                    let diff = &state.profile.realized[*i][k] - &trial.realized[*i][k];
                    m += weights[k] * g[k].dot(&diff);
                }
            }
            BlockGrad::Coeff(gc) => {
                let (old, new) = match (&state.profile.strategies[*i], &trial.strategies[*i]) {
                    (DmStrategy::Basis(a), DmStrategy::Basis(b)) => (a, b),
                    _ => continue,
                };
                m += gc.dot(&(old - new));
            }
        }
    }
    m
}

/// Backtracking step over the listed blocks. Returns the accepted profile,
/// its cost, and the accepted step size, or None when no step gives the
/// required decrease.
fn armijo_step(
    p: &TeamProblem,
    grid: &TimeGrid,
    state: &LoopState,
    grads: &[(usize, BlockGrad)],
    opts: &SolveOptions,
    warm_alpha: f64,
) -> Result<Option<(StrategyProfile, f64, f64)>> {
    let weights = grid.trapezoid_weights();
    let mut alpha = warm_alpha;
    for _ in 0..opts.max_line_search {
        let trial = stepped(p, state, grads, alpha)?;
        let m = decrease_measure(state, &trial, grads, &weights);
        if m <= 1e-18 {
            return Ok(None);
        }
        let u = trial.to_trajectory(p, grid)?;
        match integrate_forward(p, &u, grid) {
            Ok(x) => {
                let cost = cost_from(p, grid, &u, &x)?;
                if cost <= state.cost - opts.armijo_c * m {
                    return Ok(Some((trial, cost, alpha)));
                }
            }
            // a too-long step may blow up the state; shrink and retry
            Err(Error::IntegrationDiverged { .. }) => {}
            Err(e) => return Err(e),
        }
        alpha *= opts.armijo_shrink;
    }
    Ok(None)
}

fn certificate_for(
    p: &TeamProblem,
    grid: &TimeGrid,
    state: &LoopState,
    opts: &SolveOptions,
) -> Result<Option<SufficiencyCertificate>> {
    if opts.certificate_samples == 0 {
        return Ok(None);
    }
    sufficiency_certificate(p, &state.profile, grid, opts.certificate_samples, opts.seed).map(Some)
}

/// Joint projected-gradient descent over all decision makers at once:
/// forward/backward sweeps give each block's control gradient, blocks are
/// projected onto their restriction subspaces, and a monotone backtracking
/// step updates all of them together until the stationarity residual falls
/// below `opts.tol`.
pub fn solve_team(
    p: &TeamProblem,
    init: StrategyProfile,
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<(StrategyProfile, SolveReport)> {
    opts.check()?;
    let mut state = make_state(p, grid, init)?;
    let mut history = vec![state.cost];
    let mut iterations = 0;
    let mut warm = 1.0_f64;
    let mut converged = state.rho <= opts.tol;
    while !converged && iterations < opts.max_iterations {
        let grads: Vec<(usize, BlockGrad)> = (0..p.num_dms())
            .map(|i| (i, block_gradient(p, grid, &state.subs[i], &state.hu, i)))
            .collect();
        match armijo_step(p, grid, &state, &grads, opts, warm)? {
            Some((profile, _cost, alpha)) => {
                state = make_state(p, grid, profile)?;
                history.push(state.cost);
                iterations += 1;
                warm = (alpha * 2.0).min(4.0);
                converged = state.rho <= opts.tol;
            }
            None => break,
        }
    }
    let sufficiency = certificate_for(p, grid, &state, opts)?;
    Ok((
        state.profile,
        SolveReport {
            iterations,
            cost: state.cost,
            residual: state.rho,
            converged,
            cost_history: history,
            sufficiency,
        },
    ))
}

fn block_residual(p: &TeamProblem, state: &LoopState, i: usize) -> Result<f64> {
    let range = p.dm_block(i);
    let blocks: Vec<DVector<f64>> = state
        .hu
        .iter()
        .map(|g| g.rows(range.start, range.len()).into_owned())
        .collect();
    let projected = state.subs[i].project_samples(&blocks)?;
    let action = p.action_set(i);
    let mut rho: f64 = 0.0;
    for k in 0..blocks.len() {
        let mut sq = 0.0;
        let u = &state.profile.realized[i][k];
        for c in 0..u.len() {
            let v =
                coordinate_violation(action.lower()[c], action.upper()[c], u[c], projected[k][c]);
            sq += v * v;
        }
        rho = rho.max(sq.sqrt());
    }
    Ok(rho)
}

/// Cyclic block descent: each decision maker in turn minimizes the team cost
/// over its own strategy while the others stay frozen. Stops when every
/// block satisfies its projected stationarity condition, when a full cycle
/// improves the cost by less than `opts.cost_tol`, or at the iteration cap.
pub fn solve_pbp(
    p: &TeamProblem,
    init: StrategyProfile,
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<(StrategyProfile, SolveReport)> {
    opts.check()?;
    let mut state = make_state(p, grid, init)?;
    let mut history = vec![state.cost];
    let mut iterations = 0;
    let mut warms = vec![1.0_f64; p.num_dms()];
    let mut converged = state.rho <= opts.tol;
    'cycles: while !converged && iterations < opts.max_iterations {
        let cycle_start_cost = state.cost;
        let mut cycle_steps = 0;
        for i in 0..p.num_dms() {
            loop {
                if block_residual(p, &state, i)? <= opts.tol {
                    break;
                }
                if iterations >= opts.max_iterations {
                    break 'cycles;
                }
                let grads = vec![(i, block_gradient(p, grid, &state.subs[i], &state.hu, i))];
                match armijo_step(p, grid, &state, &grads, opts, warms[i])? {
                    Some((profile, _cost, alpha)) => {
                        state = make_state(p, grid, profile)?;
                        history.push(state.cost);
                        iterations += 1;
                        cycle_steps += 1;
                        warms[i] = (alpha * 2.0).min(4.0);
                    }
                    None => break,
                }
            }
        }
        converged = state.rho <= opts.tol;
        let improvement = cycle_start_cost - state.cost;
        if cycle_steps == 0 || improvement <= opts.cost_tol {
            break;
        }
    }
    converged = state.rho <= opts.tol;
    let sufficiency = certificate_for(p, grid, &state, opts)?;
    Ok((
        state.profile,
        SolveReport {
            iterations,
            cost: state.cost,
            residual: state.rho,
            converged,
            cost_history: history,
            sufficiency,
        },
    ))
}

/// Sampled global-optimality evidence at a candidate profile; see
/// [`SufficiencyCertificate`]. Deterministic for a fixed seed.
pub fn sufficiency_certificate(
    p: &TeamProblem,
    profile: &StrategyProfile,
    grid: &TimeGrid,
    samples: usize,
    seed: u64,
) -> Result<SufficiencyCertificate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = profile.to_trajectory(p, grid)?;
    let x = integrate_forward(p, &u, grid)?;
    let cost = cost_from(p, grid, &u, &x)?;
    let psi = integrate_adjoint(p, &u, &x, grid)?;
    let subs = build_dm_subspaces(p, grid, &x)?;

    let n = p.state_dim();
    let d = p.control_dim();
    let mut ham_defect = f64::NEG_INFINITY;
    let mut term_defect = f64::NEG_INFINITY;
    for _ in 0..samples.max(1) {
        let k = rng.random_range(0..grid.len());
        let t = grid.node(k);
        let xk = x.value(k);
        let uk = u.value(k);
        let sx = 0.5 * (1.0 + xk.amax());
        let su = 0.5 * (1.0 + uk.amax());
        let x1 = xk + DVector::from_fn(n, |_, _| sx * rng.random_range(-1.0..1.0));
        let x2 = xk + DVector::from_fn(n, |_, _| sx * rng.random_range(-1.0..1.0));
        let u1 =
            p.clip_stacked(&(uk + DVector::from_fn(d, |_, _| su * rng.random_range(-1.0..1.0))));
        let u2 =
            p.clip_stacked(&(uk + DVector::from_fn(d, |_, _| su * rng.random_range(-1.0..1.0))));
        let h1 = hamiltonian::hamiltonian_value(p, t, &x1, psi.value(k), &u1)?;
        let h2 = hamiltonian::hamiltonian_value(p, t, &x2, psi.value(k), &u2)?;
        let hm = hamiltonian::hamiltonian_value(
            p,
            t,
            &((&x1 + &x2) * 0.5),
            psi.value(k),
            &((&u1 + &u2) * 0.5),
        )?;
        let defect = (hm - 0.5 * (h1 + h2)) / (1.0 + h1.abs() + h2.abs());
        ham_defect = ham_defect.max(defect);

        let xt = x.last();
        let st = 0.5 * (1.0 + xt.amax());
        let y1 = xt + DVector::from_fn(n, |_, _| st * rng.random_range(-1.0..1.0));
        let y2 = xt + DVector::from_fn(n, |_, _| st * rng.random_range(-1.0..1.0));
        let p1 = p.terminal_cost(&y1);
        let p2 = p.terminal_cost(&y2);
        let pm = p.terminal_cost(&((&y1 + &y2) * 0.5));
        let tdef = (pm - 0.5 * (p1 + p2)) / (1.0 + p1.abs() + p2.abs());
        term_defect = term_defect.max(tdef);
    }

    let perturbations = (samples / 8).clamp(3, 12);
    let mut min_margin = f64::INFINITY;
    for _ in 0..perturbations {
        let mut pert = profile.clone();
        for i in 0..p.num_dms() {
            let action = p.action_set(i);
            let di = p.dm_dim(i);
            match (&profile.strategies[i], &subs[i]) {
                (DmStrategy::Basis(theta), InfoSubspace::Span(b)) => {
                    let amp = 0.3 * (1.0 + theta.amax());
                    let jitter = DMatrix::from_fn(theta.nrows(), theta.ncols(), |_, _| {
                        amp * rng.random_range(-1.0..1.0)
                    });
                    let new_theta = theta + jitter;
                    let values: Vec<DVector<f64>> = b
                        .synthesize(&new_theta)?
                        .iter()
                        .map(|v| action.clip(v))
                        .collect();
                    pert.strategies[i] = DmStrategy::Basis(new_theta);
                    pert.realized[i] = values;
                }
                _ => {
                    let base = &profile.realized[i];
                    let scale = 0.3 * (1.0 + base.iter().map(|v| v.amax()).fold(0.0, f64::max));
                    let a = DVector::from_fn(di, |_, _| scale * rng.random_range(-1.0..1.0));
                    let b2 = DVector::from_fn(di, |_, _| scale * rng.random_range(-1.0..1.0));
                    let c = DVector::from_fn(di, |_, _| scale * rng.random_range(-1.0..1.0));
                    let horizon = grid.horizon();
                    let values: Vec<DVector<f64>> = (0..grid.len())
                        .map(|k| {
                            let t = grid.node(k);
                            let w = 2.0 * std::f64::consts::PI * t / horizon;
                            let bump = &a * w.sin() + &b2 * (0.5 * w).cos() + &c;
                            action.clip(&(&base[k] + bump))
                        })
                        .collect();
                    pert.strategies[i] = DmStrategy::Grid(values.clone());
                    pert.realized[i] = values;
                }
            }
        }
        match evaluate_cost(p, &pert, grid) {
            Ok(pert_cost) => min_margin = min_margin.min(pert_cost - cost),
            // a perturbation that blows up the state certainly costs more
            Err(Error::IntegrationDiverged { .. }) => {}
            Err(e) => return Err(e),
        }
    }

    let convex_tol = 1e-9;
    let margin_tol = 1e-8 * (1.0 + cost.abs());
    Ok(SufficiencyCertificate {
        holds: ham_defect <= convex_tol && term_defect <= convex_tol && min_margin >= -margin_tol,
        hamiltonian_defect: ham_defect,
        terminal_defect: term_defect,
        convexity_samples: samples,
        perturbation_samples: perturbations,
        min_cost_margin: min_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infostruct::InfoSpec;
    use crate::model::BoxSet;
    use approx::assert_relative_eq;

    fn p1() -> TeamProblem {
        TeamProblem::builder(1, 1.0, DVector::from_vec(vec![1.0]))
            .dynamics(|_, _, u| u.clone())
            .dynamics_jacobians(
                |_, _, _| DMatrix::zeros(1, 1),
                |_, _, _| DMatrix::identity(1, 1),
            )
            .running_cost(|_, _, u| 0.5 * u.dot(u))
            .running_cost_gradients(|_, _, _| DVector::zeros(1), |_, _, u| u.clone())
            .terminal_cost(|x| 0.5 * x.dot(x))
            .terminal_cost_gradient(|x| x.clone())
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap()
    }

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 200).unwrap()
    }

    #[test]
    fn cost_of_rest_and_of_the_optimum() {
        let p = p1();
        let g = grid();
        let rest = StrategyProfile::zeros(&p, &g);
        assert_relative_eq!(evaluate_cost(&p, &rest, &g).unwrap(), 0.5, epsilon = 1e-9);

        let best = StrategyProfile::constant(&p, &g, &DVector::from_vec(vec![-0.5])).unwrap();
        assert_relative_eq!(evaluate_cost(&p, &best, &g).unwrap(), 0.25, epsilon = 1e-9);
    }

    #[test]
    fn residual_is_one_at_rest_and_zero_at_the_optimum() {
        let p = p1();
        let g = grid();
        let rest = stationarity_residual(&p, &StrategyProfile::zeros(&p, &g), &g).unwrap();
        assert_relative_eq!(rest.rho, 1.0, epsilon = 1e-6);

        let best = StrategyProfile::constant(&p, &g, &DVector::from_vec(vec![-0.5])).unwrap();
        let opt = stationarity_residual(&p, &best, &g).unwrap();
        assert!(opt.rho <= 1e-9, "rho = {}", opt.rho);
    }

    #[test]
    fn descent_reaches_the_scalar_optimum() {
        let p = p1();
        let g = grid();
        let (profile, report) = solve_team(
            &p,
            StrategyProfile::zeros(&p, &g),
            &g,
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(report.converged);
        assert!(report.residual <= 1e-5);
        assert_relative_eq!(report.cost, 0.25, epsilon = 1e-5);
        for v in profile.realized(0) {
            assert_relative_eq!(v[0], -0.5, epsilon = 1e-3);
        }
        for w in report.cost_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "cost history not monotone: {w:?}");
        }
        let cert = report
            .sufficiency
            .expect("certificate requested by default");
        assert!(cert.holds);
        assert!(cert.min_cost_margin >= -1e-8);
    }

    #[test]
    fn an_active_box_clips_the_optimum_and_zeroes_the_residual() {
        let p = TeamProblem::builder(1, 1.0, DVector::from_vec(vec![1.0]))
            .dynamics(|_, _, u| u.clone())
            .running_cost(|_, _, u| 0.5 * u.dot(u))
            .terminal_cost(|x| 0.5 * x.dot(x))
            .decision_maker(
                1,
                BoxSet::scalar(-0.3, f64::INFINITY).unwrap(),
                InfoSpec::OpenLoop,
            )
            .build()
            .unwrap();
        let g = grid();
        let (profile, report) = solve_team(
            &p,
            StrategyProfile::zeros(&p, &g),
            &g,
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(report.converged);
        for v in profile.realized(0) {
            assert_relative_eq!(v[0], -0.3, epsilon = 1e-6);
        }
        assert_relative_eq!(report.cost, 0.29, epsilon = 1e-4);
        assert!(report.residual <= 1e-5);
    }

    #[test]
    fn a_costless_problem_is_immediately_stationary() {
        let p = TeamProblem::builder(1, 1.0, DVector::from_vec(vec![1.0]))
            .dynamics(|_, _, u| u.clone())
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        let g = grid();
        let init = StrategyProfile::zeros(&p, &g);
        let (profile, report) = solve_team(&p, init.clone(), &g, &SolveOptions::default()).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
        assert_eq!(report.cost_history.len(), 1);
        assert_relative_eq!(profile.max_node_distance(&init).unwrap(), 0.0);
    }

    #[test]
    fn constant_restriction_still_finds_the_constant_optimum() {
        let p = TeamProblem::builder(1, 1.0, DVector::from_vec(vec![1.0]))
            .dynamics(|_, _, u| u.clone())
            .running_cost(|_, _, u| 0.5 * u.dot(u))
            .terminal_cost(|x| 0.5 * x.dot(x))
            .decision_maker(1, BoxSet::free(1), InfoSpec::constant())
            .build()
            .unwrap();
        let g = grid();
        let (profile, report) = solve_team(
            &p,
            StrategyProfile::zeros(&p, &g),
            &g,
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(report.converged);
        assert_relative_eq!(report.cost, 0.25, epsilon = 1e-5);
        // realized values stay inside the span: here, constant over nodes
        let first = profile.realized(0)[0][0];
        for v in profile.realized(0) {
            assert_relative_eq!(v[0], first, epsilon = 1e-12);
        }
        assert!(matches!(profile.strategy(0), DmStrategy::Basis(_)));
    }

    #[test]
    fn single_block_descent_and_joint_descent_coincide() {
        let p = p1();
        let g = grid();
        let opts = SolveOptions::default();
        let (team_profile, team_report) =
            solve_team(&p, StrategyProfile::zeros(&p, &g), &g, &opts).unwrap();
        let (pbp_profile, pbp_report) =
            solve_pbp(&p, StrategyProfile::zeros(&p, &g), &g, &opts).unwrap();
        assert_eq!(team_report.iterations, pbp_report.iterations);
        assert!(pbp_report.converged);
        assert!(
            team_profile.max_node_distance(&pbp_profile).unwrap() <= 1e-12,
            "iterate sequences should match for a single decision maker"
        );
        assert_eq!(team_report.cost_history, pbp_report.cost_history);
    }

    #[test]
    fn decoupled_blocks_solve_independently_under_block_descent() {
        // two scalar subsystems, no cross terms: optimum is -0.5 in each block
        let p = TeamProblem::builder(2, 1.0, DVector::from_vec(vec![1.0, 1.0]))
            .dynamics(|_, _, u| u.clone())
            .running_cost(|_, _, u| 0.5 * u.dot(u))
            .terminal_cost(|x| 0.5 * x.dot(x))
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        let g = grid();
        let opts = SolveOptions::default();
        let (profile, report) = solve_pbp(&p, StrategyProfile::zeros(&p, &g), &g, &opts).unwrap();
        assert!(report.converged);
        assert_relative_eq!(report.cost, 0.5, epsilon = 1e-5);
        for i in 0..2 {
            for v in profile.realized(i) {
                assert_relative_eq!(v[0], -0.5, epsilon = 1e-3);
            }
        }

        let (_, team_report) = solve_team(&p, StrategyProfile::zeros(&p, &g), &g, &opts).unwrap();
        assert!((team_report.cost - report.cost).abs() <= 1e-6);
    }

    #[test]
    fn concave_state_cost_fails_the_certificate() {
        let p = TeamProblem::builder(1, 1.0, DVector::from_vec(vec![1.0]))
            .dynamics(|_, _, u| u.clone())
            .running_cost(|_, x, u| 0.5 * u.dot(u) - x.dot(x))
            .terminal_cost(|x| 0.5 * x.dot(x))
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        let g = grid();
        let profile = StrategyProfile::zeros(&p, &g);
        let cert = sufficiency_certificate(&p, &profile, &g, 64, 7).unwrap();
        assert!(!cert.holds);
        assert!(cert.hamiltonian_defect > 1e-6);
    }

    #[test]
    fn certificates_are_deterministic_for_a_fixed_seed() {
        let p = p1();
        let g = grid();
        let profile = StrategyProfile::constant(&p, &g, &DVector::from_vec(vec![-0.5])).unwrap();
        let a = sufficiency_certificate(&p, &profile, &g, 32, 11).unwrap();
        let b = sufficiency_certificate(&p, &profile, &g, 32, 11).unwrap();
        assert_eq!(a.hamiltonian_defect, b.hamiltonian_defect);
        assert_eq!(a.min_cost_margin, b.min_cost_margin);
    }

    #[test]
    fn profiles_reject_mismatched_shapes() {
        let p = p1();
        let g = grid();
        assert!(StrategyProfile::from_node_values(&p, &g, vec![]).is_err());
        assert!(StrategyProfile::constant(&p, &g, &DVector::zeros(2)).is_err());
        let short = TimeGrid::new(1.0, 10).unwrap();
        let profile = StrategyProfile::zeros(&p, &short);
        assert!(matches!(
            evaluate_cost(&p, &profile, &g),
            Err(Error::GridMismatch { .. })
        ));
    }
}
