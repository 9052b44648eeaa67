use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fd;
use crate::infostruct::{InfoSpec, InfoSubspace};
use crate::model::{BoxSet, ObservationFn, Trajectory};
use crate::team_solver::{coordinate_violation, SolveOptions, SolveReport};

pub type StepDynamicsFn =
    Arc<dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type StepJacobianFn =
    Arc<dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type StepCostFn = Arc<dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type StepCostGradFn =
    Arc<dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type StepTerminalFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type StepTerminalGradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

struct StepDm {
    dim: usize,
    action: BoxSet,
    info: InfoSpec,
    observation: Option<ObservationFn>,
}

/// Multistage team problem: states x_0..x_K, one stacked control per stage,
/// x_{k+1} = f(k, x_k, u_k), cost sum_k l(k, x_k, u_k) + phi(x_K). Controls
/// live on stages 0..K-1; the backward recursion and the stagewise cost
/// gradient are exact, not discretizations.
pub struct DiscreteTeamProblem {
    state_dim: usize,
    steps: usize,
    x0: DVector<f64>,
    dms: Vec<StepDm>,
    transition: StepDynamicsFn,
    transition_jac_x: Option<StepJacobianFn>,
    transition_jac_u: Option<StepJacobianFn>,
    cost: StepCostFn,
    cost_grad_x: Option<StepCostGradFn>,
    cost_grad_u: Option<StepCostGradFn>,
    terminal: StepTerminalFn,
    terminal_grad: Option<StepTerminalGradFn>,
}

pub struct DiscreteTeamBuilder {
    problem: DiscreteTeamProblem,
}

impl DiscreteTeamProblem {
    pub fn builder(state_dim: usize, steps: usize, x0: DVector<f64>) -> DiscreteTeamBuilder {
        DiscreteTeamBuilder {
            problem: DiscreteTeamProblem {
                state_dim,
                steps,
                x0,
                dms: Vec::new(),
                transition: Arc::new(|_, x, _| x.clone()),
                transition_jac_x: None,
                transition_jac_u: None,
                cost: Arc::new(|_, _, _| 0.0),
                cost_grad_x: None,
                cost_grad_u: None,
                terminal: Arc::new(|_| 0.0),
                terminal_grad: None,
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Number of transitions; states carry one more index.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_dms(&self) -> usize {
        self.dms.len()
    }

    pub fn dm_dims(&self) -> Vec<usize> {
        self.dms.iter().map(|d| d.dim).collect()
    }

    pub fn dm_dim(&self, i: usize) -> usize {
        self.dms[i].dim
    }

    pub fn control_dim(&self) -> usize {
        self.dms.iter().map(|d| d.dim).sum()
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn dm_block(&self, i: usize) -> Range<usize> {
        let start: usize = self.dms[..i].iter().map(|d| d.dim).sum();
        start..start + self.dms[i].dim
    }

    pub fn action_set(&self, i: usize) -> &BoxSet {
        &self.dms[i].action
    }

    pub fn info_spec(&self, i: usize) -> &InfoSpec {
        &self.dms[i].info
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.transition_jac_x.is_some() && self.transition_jac_u.is_some()
    }

    pub fn transition(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let next = (self.transition)(k, x, u);
        if next.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                context: "stage transition",
                expected: self.state_dim,
                actual: next.len(),
            });
        }
        Ok(next)
    }

    pub fn state_jacobian(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.transition_jac_x {
            Some(j) => j(k, x, u),
            None => {
                let f = self.transition.clone();
                let uc = u.clone();
                fd::jacobian(|y| f(k, y, &uc), x, self.state_dim)
            }
        }
    }

    pub fn control_jacobian(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.transition_jac_u {
            Some(j) => j(k, x, u),
            None => {
                let f = self.transition.clone();
                let xc = x.clone();
                fd::jacobian(|v| f(k, &xc, v), u, self.state_dim)
            }
        }
    }

    pub fn running_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.cost)(k, x, u)
    }

    pub fn running_cost_grad_x(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        match &self.cost_grad_x {
            Some(g) => g(k, x, u),
            None => {
                let l = self.cost.clone();
                let uc = u.clone();
                fd::gradient(|y| l(k, y, &uc), x)
            }
        }
    }

    pub fn running_cost_grad_u(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        match &self.cost_grad_u {
            Some(g) => g(k, x, u),
            None => {
                let l = self.cost.clone();
                let xc = x.clone();
                fd::gradient(|v| l(k, &xc, v), u)
            }
        }
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        (self.terminal)(x)
    }

    pub fn terminal_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.terminal_grad {
            Some(g) => g(x),
            None => {
                let phi = self.terminal.clone();
                fd::gradient(|y| phi(y), x)
            }
        }
    }

    /// Observation of decision maker `i` at stage `k` given the state
    /// sequence packaged as a path over integer times; defaults to the stage
    /// state itself.
    pub fn observation(&self, i: usize, k: usize, path: &Trajectory) -> DVector<f64> {
        match &self.dms[i].observation {
            Some(h) => h(k as f64, path),
            None => path.at(k as f64),
        }
    }

    pub fn clip_stacked(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = u.clone();
        for i in 0..self.num_dms() {
            let r = self.dm_block(i);
            let clipped = self.dms[i]
                .action
                .clip(&u.rows(r.start, r.len()).into_owned());
            out.rows_mut(r.start, r.len()).copy_from(&clipped);
        }
        out
    }
}

impl DiscreteTeamBuilder {
    pub fn transition<F>(mut self, f: F) -> Self
    where
        F: Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.problem.transition = Arc::new(f);
        self
    }

    pub fn transition_jacobians<Fx, Fu>(mut self, fx: Fx, fu: Fu) -> Self
    where
        Fx: Fn(usize, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        Fu: Fn(usize, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.problem.transition_jac_x = Some(Arc::new(fx));
        self.problem.transition_jac_u = Some(Arc::new(fu));
        self
    }

    pub fn running_cost<F>(mut self, f: F) -> Self
    where
        F: Fn(usize, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        self.problem.cost = Arc::new(f);
        self
    }

    pub fn running_cost_gradients<Fx, Fu>(mut self, lx: Fx, lu: Fu) -> Self
    where
        Fx: Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        Fu: Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.problem.cost_grad_x = Some(Arc::new(lx));
        self.problem.cost_grad_u = Some(Arc::new(lu));
        self
    }

    pub fn terminal_cost<F>(mut self, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        self.problem.terminal = Arc::new(f);
        self
    }

    pub fn terminal_cost_gradient<F>(mut self, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.problem.terminal_grad = Some(Arc::new(f));
        self
    }

    pub fn decision_maker(mut self, dim: usize, action: BoxSet, info: InfoSpec) -> Self {
        self.problem.dms.push(StepDm {
            dim,
            action,
            info,
            observation: None,
        });
        self
    }

    pub fn observation<F>(mut self, i: usize, h: F) -> Self
    where
        F: Fn(f64, &Trajectory) -> DVector<f64> + Send + Sync + 'static,
    {
        self.problem.dms[i].observation = Some(Arc::new(h));
        self
    }

    pub fn build(self) -> Result<DiscreteTeamProblem> {
        let p = self.problem;
        if p.state_dim == 0 {
            return Err(Error::InvalidProblem(
                "state dimension must be positive".into(),
            ));
        }
        if p.steps == 0 {
            return Err(Error::InvalidProblem("stage count must be positive".into()));
        }
        if p.x0.len() != p.state_dim {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: p.state_dim,
                actual: p.x0.len(),
            });
        }
        if p.dms.is_empty() {
            return Err(Error::InvalidProblem(
                "at least one decision maker is required".into(),
            ));
        }
        for (i, dm) in p.dms.iter().enumerate() {
            if dm.dim == 0 {
                return Err(Error::InvalidProblem(format!(
                    "decision maker {i} has an empty control block"
                )));
            }
            if dm.action.dim() != dm.dim {
                return Err(Error::DimensionMismatch {
                    context: "action box",
                    expected: dm.dim,
                    actual: dm.action.dim(),
                });
            }
        }
        Ok(p)
    }
}

fn check_controls(p: &DiscreteTeamProblem, u: &[DVector<f64>]) -> Result<()> {
    if u.len() != p.steps {
        return Err(Error::GridMismatch {
            context: "stage controls",
            lhs: p.steps,
            rhs: u.len(),
        });
    }
    let d = p.control_dim();
    for v in u {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                context: "stage controls",
                expected: d,
                actual: v.len(),
            });
        }
    }
    Ok(())
}

/// State sequence x_0..x_K under the given stage controls.
pub fn discrete_forward(p: &DiscreteTeamProblem, u: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    check_controls(p, u)?;
    let mut xs = Vec::with_capacity(p.steps + 1);
    xs.push(p.x0.clone());
    for k in 0..p.steps {
        let next = p.transition(k, &xs[k], &u[k])?;
        if !next.iter().all(|c| c.is_finite()) {
            return Err(Error::IntegrationDiverged {
                node: k + 1,
                t: (k + 1) as f64,
            });
        }
        xs.push(next);
    }
    Ok(xs)
}

/// Exact backward recursion for the stage multipliers:
/// psi_K = dphi(x_K), psi_k = f_x(k)' psi_{k+1} + l_x(k).
pub fn discrete_adjoint(
    p: &DiscreteTeamProblem,
    u: &[DVector<f64>],
    xs: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    check_controls(p, u)?;
    if xs.len() != p.steps + 1 {
        return Err(Error::GridMismatch {
            context: "state sequence",
            lhs: p.steps + 1,
            rhs: xs.len(),
        });
    }
    let mut psi = vec![DVector::zeros(p.state_dim()); p.steps + 1];
    psi[p.steps] = p.terminal_grad(&xs[p.steps]);
    for k in (0..p.steps).rev() {
        let fx = p.state_jacobian(k, &xs[k], &u[k]);
        psi[k] = fx.transpose() * &psi[k + 1] + p.running_cost_grad_x(k, &xs[k], &u[k]);
        if !psi[k].iter().all(|c| c.is_finite()) {
            return Err(Error::IntegrationDiverged {
                node: k,
                t: k as f64,
            });
        }
    }
    Ok(psi)
}

/// Total cost of a stage control sequence along its state response.
pub fn discrete_cost(
    p: &DiscreteTeamProblem,
    u: &[DVector<f64>],
    xs: &[DVector<f64>],
) -> Result<f64> {
    check_controls(p, u)?;
    let mut total = 0.0;
    for k in 0..p.steps {
        total += p.running_cost(k, &xs[k], &u[k]);
    }
    total += p.terminal_cost(&xs[p.steps]);
    if !total.is_finite() {
        return Err(Error::NonFiniteEval {
            context: "stage cost",
            t: 0.0,
        });
    }
    Ok(total)
}

/// Exact stagewise cost gradient dJ/du_k = f_u(k)' psi_{k+1} + l_u(k).
pub fn discrete_control_gradients(
    p: &DiscreteTeamProblem,
    u: &[DVector<f64>],
    xs: &[DVector<f64>],
    psi: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    check_controls(p, u)?;
    if psi.len() != p.steps + 1 {
        return Err(Error::GridMismatch {
            context: "multiplier sequence",
            lhs: p.steps + 1,
            rhs: psi.len(),
        });
    }
    Ok((0..p.steps)
        .map(|k| {
            let fu = p.control_jacobian(k, &xs[k], &u[k]);
            fu.transpose() * &psi[k + 1] + p.running_cost_grad_u(k, &xs[k], &u[k])
        })
        .collect())
}

fn state_path(p: &DiscreteTeamProblem, xs: &[DVector<f64>]) -> Result<Trajectory> {
    let times: Vec<f64> = (0..=p.steps).map(|k| k as f64).collect();
    Trajectory::new(times, xs.to_vec())
}

/// Restriction subspaces over stage indices with unit quadrature weights.
fn build_stage_subspaces(
    p: &DiscreteTeamProblem,
    xs: &[DVector<f64>],
) -> Result<Vec<InfoSubspace>> {
    let path = state_path(p, xs)?;
    let weights = vec![1.0; p.steps];
    let mut subs = Vec::with_capacity(p.num_dms());
    for (i, dm) in p.dms.iter().enumerate() {
        let sub = match &dm.info {
            InfoSpec::OpenLoop => InfoSubspace::full(p.steps),
            InfoSpec::ClosedLoopMarkov => {
                let y0 = p.observation(i, 0, &path);
                let q = y0.len();
                let mut features = DMatrix::zeros(p.steps, q + 1);
                for k in 0..p.steps {
                    features[(k, 0)] = 1.0;
                    let y = if k == 0 {
                        y0.clone()
                    } else {
                        p.observation(i, k, &path)
                    };
                    if y.len() != q {
                        return Err(Error::DimensionMismatch {
                            context: "stage observation",
                            expected: q,
                            actual: y.len(),
                        });
                    }
                    for s in 0..q {
                        features[(k, s + 1)] = y[s];
                    }
                }
                InfoSubspace::from_feature_matrix(features, weights.clone())?
            }
            InfoSpec::ClosedLoopFeedback { features } => {
                if features.is_empty() {
                    return Err(Error::EmptyBasis { dm: i });
                }
                let mat =
                    DMatrix::from_fn(p.steps, features.len(), |k, s| features[s](k as f64, &path));
                InfoSubspace::from_feature_matrix(mat, weights.clone())?
            }
            InfoSpec::FiniteBasis { basis } => {
                if basis.is_empty() {
                    return Err(Error::EmptyBasis { dm: i });
                }
                let mat = DMatrix::from_fn(p.steps, basis.len(), |k, s| basis[s](k as f64));
                InfoSubspace::from_feature_matrix(mat, weights.clone())?
            }
        };
        subs.push(sub);
    }
    Ok(subs)
}

pub struct DiscreteStationarity {
    pub rho: f64,
    /// Per decision maker, per stage: the control gradient block projected
    /// onto that decision maker's restriction subspace.
    pub projected_gradients: Vec<Vec<DVector<f64>>>,
}

fn projected_blocks(
    p: &DiscreteTeamProblem,
    subs: &[InfoSubspace],
    g: &[DVector<f64>],
) -> Result<Vec<Vec<DVector<f64>>>> {
    let mut out = Vec::with_capacity(p.num_dms());
    for i in 0..p.num_dms() {
        let r = p.dm_block(i);
        let blocks: Vec<DVector<f64>> = g
            .iter()
            .map(|v| v.rows(r.start, r.len()).into_owned())
            .collect();
        out.push(subs[i].project_samples(&blocks)?);
    }
    Ok(out)
}

fn residual_from(
    p: &DiscreteTeamProblem,
    u: &[DVector<f64>],
    projected: &[Vec<DVector<f64>>],
) -> f64 {
    let mut rho: f64 = 0.0;
    for k in 0..p.steps {
        let mut sq = 0.0;
        for i in 0..p.num_dms() {
            let range = p.dm_block(i);
            let action = p.action_set(i);
            for (c, off) in range.clone().enumerate() {
                let v = coordinate_violation(
                    action.lower()[c],
                    action.upper()[c],
                    u[k][off],
                    projected[i][k][c],
                );
                sq += v * v;
            }
        }
        rho = rho.max(sq.sqrt());
    }
    rho
}

/// Largest stagewise violation of the projected first-order conditions.
pub fn discrete_stationarity_residual(
    p: &DiscreteTeamProblem,
    u: &[DVector<f64>],
) -> Result<DiscreteStationarity> {
    let xs = discrete_forward(p, u)?;
    let psi = discrete_adjoint(p, u, &xs)?;
    let g = discrete_control_gradients(p, u, &xs, &psi)?;
    let subs = build_stage_subspaces(p, &xs)?;
    let projected = projected_blocks(p, &subs, &g)?;
    let rho = residual_from(p, u, &projected);
    Ok(DiscreteStationarity {
        rho,
        projected_gradients: projected,
    })
}

struct StageState {
    u: Vec<DVector<f64>>,
    cost: f64,
    projected: Vec<Vec<DVector<f64>>>,
    raw: Vec<DVector<f64>>,
    rho: f64,
}

fn refit_controls(
    p: &DiscreteTeamProblem,
    subs: &[InfoSubspace],
    u: &[DVector<f64>],
) -> Result<(bool, Vec<DVector<f64>>)> {
    let mut fitted = u.to_vec();
    let mut changed = false;
    for i in 0..p.num_dms() {
        if subs[i].is_full() {
            continue;
        }
        let r = p.dm_block(i);
        let blocks: Vec<DVector<f64>> = u
            .iter()
            .map(|v| v.rows(r.start, r.len()).into_owned())
            .collect();
        let proj = subs[i].project_samples(&blocks)?;
        for k in 0..p.steps {
            let clipped = p.action_set(i).clip(&proj[k]);
            if (&clipped - &blocks[k]).amax() > 0.0 {
                changed = true;
            }
            fitted[k].rows_mut(r.start, r.len()).copy_from(&clipped);
        }
    }
    Ok((changed, fitted))
}

fn make_stage_state(p: &DiscreteTeamProblem, u: Vec<DVector<f64>>) -> Result<StageState> {
    let xs0 = discrete_forward(p, &u)?;
    let subs = build_stage_subspaces(p, &xs0)?;
    let (changed, u) = refit_controls(p, &subs, &u)?;
    let xs = if changed {
        discrete_forward(p, &u)?
    } else {
        xs0
    };
    let cost = discrete_cost(p, &u, &xs)?;
    let psi = discrete_adjoint(p, &u, &xs)?;
    let raw = discrete_control_gradients(p, &u, &xs, &psi)?;
    let projected = projected_blocks(p, &subs, &raw)?;
    let rho = residual_from(p, &u, &projected);
    Ok(StageState {
        u,
        cost,
        projected,
        raw,
        rho,
    })
}

fn stage_stepped(p: &DiscreteTeamProblem, state: &StageState, alpha: f64) -> Vec<DVector<f64>> {
    let mut trial = state.u.clone();
    for i in 0..p.num_dms() {
        let r = p.dm_block(i);
        let action = p.action_set(i);
        for k in 0..p.steps {
            let cur = state.u[k].rows(r.start, r.len()).into_owned();
            let stepped = action.clip(&(&cur - &state.projected[i][k] * alpha));
            trial[k].rows_mut(r.start, r.len()).copy_from(&stepped);
        }
    }
    trial
}

fn stage_decrease(p: &DiscreteTeamProblem, state: &StageState, trial: &[DVector<f64>]) -> f64 {
    let mut m = 0.0;
    for k in 0..p.steps {
        m += state.raw[k].dot(&(&state.u[k] - &trial[k]));
    }
    m
}

/// Joint projected-gradient descent over the stage controls, mirroring the
/// continuous-time team solver: exact gradients, per-block subspace
/// projection, monotone backtracking steps, stop on the stationarity
/// residual.
pub fn discrete_solve_team(
    p: &DiscreteTeamProblem,
    init: Vec<DVector<f64>>,
    opts: &SolveOptions,
) -> Result<(Vec<DVector<f64>>, SolveReport)> {
    opts.check()?;
    check_controls(p, &init)?;
    let init: Vec<DVector<f64>> = init.iter().map(|v| p.clip_stacked(v)).collect();
    let mut state = make_stage_state(p, init)?;
    let mut history = vec![state.cost];
    let mut iterations = 0;
    let mut converged = false;
    let mut warm = 1.0f64;

    while iterations < opts.max_iterations {
        if state.rho <= opts.tol {
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut alpha = warm;
        for _ in 0..opts.max_line_search {
            let trial = stage_stepped(p, &state, alpha);
            let m = stage_decrease(p, &state, &trial);
            if m <= 1e-18 {
                break;
            }
            match discrete_forward(p, &trial) {
                Ok(xs) => {
                    let cost = discrete_cost(p, &trial, &xs)?;
                    if cost <= state.cost - opts.armijo_c * m {
                        accepted = Some((trial, alpha));
                        break;
                    }
                }
                Err(Error::IntegrationDiverged { .. }) => {}
                Err(e) => return Err(e),
            }
            alpha *= opts.armijo_shrink;
        }
        match accepted {
            Some((trial, alpha)) => {
                iterations += 1;
                warm = (alpha * 2.0).min(4.0);
                state = make_stage_state(p, trial)?;
                history.push(state.cost);
            }
            None => break,
        }
    }
    if !converged && state.rho <= opts.tol {
        converged = true;
    }

    let report = SolveReport {
        iterations,
        cost: state.cost,
        residual: state.rho,
        converged,
        cost_history: history,
        sufficiency: None,
    };
    Ok((state.u, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Euler transcription of the scalar problem x' = u from x(0) = 1 with
    /// cost integral u^2/2 plus terminal x(1)^2/2; its exact optimum is
    /// u = -1/2 with cost 1/4 at every stage count.
    fn transcribed(steps: usize) -> DiscreteTeamProblem {
        let h = 1.0 / steps as f64;
        DiscreteTeamProblem::builder(1, steps, DVector::from_vec(vec![1.0]))
            .transition(move |_, x, u| x + u * h)
            .transition_jacobians(
                |_, _, _| DMatrix::identity(1, 1),
                move |_, _, _| DMatrix::from_vec(1, 1, vec![h]),
            )
            .running_cost(move |_, _, u| 0.5 * h * u.dot(u))
            .running_cost_gradients(|_, x, _| DVector::zeros(x.len()), move |_, _, u| u * h)
            .terminal_cost(|x| 0.5 * x.dot(x))
            .terminal_cost_gradient(|x| x.clone())
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap()
    }

    fn nonlinear_pair(steps: usize) -> DiscreteTeamProblem {
        DiscreteTeamProblem::builder(2, steps, DVector::from_vec(vec![0.4, -0.2]))
            .transition(|k, x, u| {
                let s = 0.1 * (k as f64 * 0.3).sin();
                DVector::from_vec(vec![
                    x[0] + 0.05 * x[1] * x[1] + 0.1 * u[0] + s,
                    x[1] - 0.04 * x[0] + 0.1 * (u[1] + 0.2 * u[0] * u[0]),
                ])
            })
            .running_cost(|_, x, u| 0.05 * (u.dot(u) + x.dot(x)) + 0.01 * x[0] * u[1])
            .terminal_cost(|x| x[0] * x[0] + 0.5 * x[1])
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap()
    }

    fn random_controls(steps: usize, dim: usize, scale: f64) -> Vec<DVector<f64>> {
        (0..steps)
            .map(|k| DVector::from_fn(dim, |c, _| scale * ((k * 7 + c * 13 + 1) as f64).sin()))
            .collect()
    }

    #[test]
    fn forward_states_follow_the_recursion() {
        let p = transcribed(4);
        let u = vec![DVector::from_vec(vec![-0.5]); 4];
        let xs = discrete_forward(&p, &u).unwrap();
        assert_eq!(xs.len(), 5);
        for (k, x) in xs.iter().enumerate() {
            assert_relative_eq!(x[0], 1.0 - 0.125 * k as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn stage_gradient_matches_finite_differences_of_the_total_cost() {
        let p = nonlinear_pair(12);
        let u = random_controls(12, 2, 0.4);
        let xs = discrete_forward(&p, &u).unwrap();
        let psi = discrete_adjoint(&p, &u, &xs).unwrap();
        let g = discrete_control_gradients(&p, &u, &xs, &psi).unwrap();

        let cost_at = |u: &[DVector<f64>]| {
            let xs = discrete_forward(&p, u).unwrap();
            discrete_cost(&p, u, &xs).unwrap()
        };
        let eps = 1e-6;
        for k in [0usize, 5, 11] {
            for c in 0..2 {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[k][c] += eps;
                dn[k][c] -= eps;
                let fd = (cost_at(&up) - cost_at(&dn)) / (2.0 * eps);
                assert_relative_eq!(g[k][c], fd, epsilon = 1e-8, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn analytic_and_differenced_jacobians_agree() {
        let trans = |_: usize, x: &DVector<f64>, u: &DVector<f64>| {
            DVector::from_vec(vec![
                x[0] * x[0] - 0.3 * x[1] + u[0],
                x[1] + 0.5 * u[0] * u[1] + 0.2 * x[0],
            ])
        };
        let with = DiscreteTeamProblem::builder(2, 3, DVector::zeros(2))
            .transition(trans)
            .transition_jacobians(
                |_, x, _| DMatrix::from_row_slice(2, 2, &[2.0 * x[0], -0.3, 0.2, 1.0]),
                |_, _, u| DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5 * u[1], 0.5 * u[0]]),
            )
            .decision_maker(2, BoxSet::free(2), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        let without = DiscreteTeamProblem::builder(2, 3, DVector::zeros(2))
            .transition(trans)
            .decision_maker(2, BoxSet::free(2), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        assert!(with.has_analytic_jacobians());
        assert!(!without.has_analytic_jacobians());
        let x = DVector::from_vec(vec![0.7, -0.4]);
        let u = DVector::from_vec(vec![0.3, 0.9]);
        let dx = &with.state_jacobian(1, &x, &u) - &without.state_jacobian(1, &x, &u);
        let du = &with.control_jacobian(1, &x, &u) - &without.control_jacobian(1, &x, &u);
        assert!(dx.amax() <= 1e-8, "state jacobian gap {}", dx.amax());
        assert!(du.amax() <= 1e-8, "control jacobian gap {}", du.amax());
    }

    #[test]
    fn transcribed_problem_solves_to_the_exact_optimum() {
        let p = transcribed(50);
        let init = vec![DVector::zeros(1); 50];
        let opts = SolveOptions {
            tol: 1e-8,
            ..SolveOptions::default()
        };
        let (u, report) = discrete_solve_team(&p, init, &opts).unwrap();
        assert!(report.converged, "residual {}", report.residual);
        assert_relative_eq!(report.cost, 0.25, epsilon = 1e-9);
        for v in &u {
            assert_relative_eq!(v[0], -0.5, epsilon = 1e-5);
        }
        for pair in report.cost_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn box_constraint_binds_at_the_clipped_optimum() {
        let steps = 40;
        let h = 1.0 / steps as f64;
        let p = DiscreteTeamProblem::builder(1, steps, DVector::from_vec(vec![1.0]))
            .transition(move |_, x, u| x + u * h)
            .running_cost(move |_, _, u| 0.5 * h * u.dot(u))
            .terminal_cost(|x| 0.5 * x.dot(x))
            .decision_maker(
                1,
                BoxSet::new(
                    DVector::from_vec(vec![-0.3]),
                    DVector::from_vec(vec![f64::INFINITY]),
                )
                .unwrap(),
                InfoSpec::OpenLoop,
            )
            .build()
            .unwrap();
        let (u, report) = discrete_solve_team(
            &p,
            vec![DVector::zeros(1); steps],
            &SolveOptions {
                tol: 1e-8,
                ..SolveOptions::default()
            },
        )
        .unwrap();
        assert!(report.converged);
        for v in &u {
            assert_relative_eq!(v[0], -0.3, epsilon = 1e-9);
        }
        assert_relative_eq!(report.cost, 0.5 * 0.09 + 0.5 * 0.49, epsilon = 1e-9);
    }

    #[test]
    fn constant_restriction_forces_a_flat_schedule() {
        // without the restriction the optimal schedule of this problem is
        // stage-dependent; the one-feature span forces a constant one
        let steps = 30;
        let h = 1.0 / steps as f64;
        let build = |spec: InfoSpec| {
            DiscreteTeamProblem::builder(1, steps, DVector::from_vec(vec![1.0]))
                .transition(move |_, x, u| x + u * h)
                .running_cost(move |k, _, u| 0.5 * h * (1.0 + k as f64 * h) * u.dot(u))
                .terminal_cost(|x| 0.5 * x.dot(x))
                .decision_maker(1, BoxSet::free(1), spec)
                .build()
                .unwrap()
        };
        let opts = SolveOptions {
            tol: 1e-7,
            ..SolveOptions::default()
        };
        let (u_free, _) = discrete_solve_team(
            &build(InfoSpec::OpenLoop),
            vec![DVector::zeros(1); steps],
            &opts,
        )
        .unwrap();
        let spread_free = u_free
            .iter()
            .map(|v| v[0])
            .fold(f64::NEG_INFINITY, f64::max)
            - u_free.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
        assert!(
            spread_free > 1e-3,
            "free schedule should vary, spread {spread_free}"
        );

        let (u_flat, report) = discrete_solve_team(
            &build(InfoSpec::constant()),
            vec![DVector::zeros(1); steps],
            &opts,
        )
        .unwrap();
        assert!(report.converged);
        let spread_flat = u_flat
            .iter()
            .map(|v| v[0])
            .fold(f64::NEG_INFINITY, f64::max)
            - u_flat.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
        assert!(
            spread_flat <= 1e-10,
            "restricted schedule must be flat, spread {spread_flat}"
        );
    }

    #[test]
    fn divergent_transition_is_reported_with_its_stage() {
        let p = DiscreteTeamProblem::builder(1, 10, DVector::from_vec(vec![2.0]))
            .transition(|_, x, _| x * x.dot(x))
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        match discrete_forward(&p, &vec![DVector::zeros(1); 10]) {
            Err(Error::IntegrationDiverged { node, .. }) => assert!(node >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn shape_errors_are_rejected() {
        let p = transcribed(5);
        assert!(discrete_forward(&p, &vec![DVector::zeros(1); 4]).is_err());
        assert!(discrete_forward(&p, &vec![DVector::zeros(2); 5]).is_err());
        let u = vec![DVector::zeros(1); 5];
        let xs = discrete_forward(&p, &u).unwrap();
        assert!(discrete_adjoint(&p, &u, &xs[..4]).is_err());
    }
}
