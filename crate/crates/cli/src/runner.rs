//! Dispatches a parsed config to the matching solver and writes the artifact
//! set. Exit code 0 means the solver converged, 2 means it ran but did not
//! (artifacts are still written, divergence noted in the report), and any
//! structural problem surfaces as an error the caller turns into exit 1.

use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use nalgebra::DVector;
use serde_json::Value;

use teamopt::{
    build_subspace, discrete_adjoint, discrete_forward, discrete_solve_team,
    discrete_stationarity_residual, integrate_adjoint, integrate_forward, solve_decentralized_lq,
    solve_pbp, solve_team, stationarity_residual, DiscreteTeamProblem, Error, InfoSpec,
    InfoSubspace, LqData, SolveOptions, SolveReport, StrategyProfile, TeamProblem, TimeGrid,
    Trajectory,
};

use crate::artifacts;
use crate::config::{
    build_info_specs, build_problem, resolve_steps, ExperimentConfig, ProblemInstance, ProblemKind,
    SolverKind,
};

fn solve_options(cfg: &ExperimentConfig) -> SolveOptions {
    let mut o = SolveOptions::default();
    let s = &cfg.solver;
    if let Some(v) = s.tol {
        o.tol = v;
    }
    if let Some(v) = s.max_iterations {
        o.max_iterations = v;
    }
    if let Some(v) = s.damping {
        o.damping = v;
    }
    if let Some(v) = s.seed {
        o.seed = v;
    }
    if let Some(v) = s.certificate_samples {
        o.certificate_samples = v;
    }
    o
}

/// A solver failure that counts as divergence rather than a structural error.
fn divergence_note(err: &Error) -> Option<String> {
    match err {
        Error::IntegrationDiverged { node, t } => Some(format!(
            "state integration diverged at node {node} (t = {t:.6})"
        )),
        Error::FixedPointDiverged { iterations, gap } => Some(format!(
            "fixed-point iteration diverged after {iterations} sweeps (successive gap {gap:.3e})"
        )),
        _ => None,
    }
}

struct ReportCtx<'a> {
    dir: &'a Path,
    echo: Value,
    problem_kind: &'a str,
    solver: &'a str,
    steps: usize,
    horizon: Option<f64>,
}

impl ReportCtx<'_> {
    fn finish(self, report: &SolveReport) -> Result<i32> {
        artifacts::write_report(
            self.dir,
            self.echo,
            self.problem_kind,
            self.solver,
            self.steps,
            self.horizon,
            Some(report),
            None,
        )?;
        info!(
            "cost {:.12e}, residual {:.3e}, {} iterations, converged: {}",
            report.cost, report.residual, report.iterations, report.converged
        );
        Ok(if report.converged { 0 } else { 2 })
    }

    fn diverged(self, note: String) -> Result<i32> {
        artifacts::write_report(
            self.dir,
            self.echo,
            self.problem_kind,
            self.solver,
            self.steps,
            self.horizon,
            None,
            Some(note),
        )?;
        Ok(2)
    }
}

/// Runs one config and returns the process exit code for it.
pub fn execute(cfg: &ExperimentConfig, config_text: &str, out_dir: &Path) -> Result<i32> {
    let instance = build_problem(cfg)?;
    let steps = resolve_steps(cfg, &instance)?;
    let opts = solve_options(cfg);
    let echo: Value = {
        let tv: toml::Value = toml::from_str(config_text).context("config echo")?;
        serde_json::to_value(tv).context("config echo")?
    };

    let fixed_structure = cfg.problem.kind == ProblemKind::Builtin
        && matches!(
            instance,
            ProblemInstance::Team(_) | ProblemInstance::Discrete(_)
        );
    if fixed_structure && !cfg.infos.is_empty() {
        bail!("info: this builtin problem fixes its own information structure");
    }

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;

    let ctx = ReportCtx {
        dir: out_dir,
        echo,
        problem_kind: instance.kind_name(),
        solver: cfg.solver.kind.name(),
        steps,
        horizon: instance.horizon(),
    };

    match (&instance, cfg.solver.kind) {
        (ProblemInstance::Discrete(p), SolverKind::DiscreteTeam) => run_discrete(p, &opts, ctx),
        (ProblemInstance::Discrete(_), other) => bail!(
            "solver.kind: {:?} cannot solve a discrete problem; use \"discrete-team\"",
            other.name()
        ),
        (_, SolverKind::DiscreteTeam) => {
            bail!("solver.kind: \"discrete-team\" requires a discrete problem")
        }
        (ProblemInstance::Lq(lq), SolverKind::LqFixedPoint) => {
            run_fixed_point(lq, cfg, steps, &opts, ctx)
        }
        (_, SolverKind::LqFixedPoint) => {
            bail!("solver.kind: \"lq-fixed-point\" requires a linear-quadratic problem")
        }
        (ProblemInstance::Team(p), kind) => {
            let grid = TimeGrid::new(p.horizon(), steps)?;
            run_continuous(p, kind, &grid, &opts, ctx)
        }
        (ProblemInstance::Lq(lq), kind) => {
            let infos = build_info_specs(cfg, lq.num_dms(), lq.horizon())?;
            let p = lq.to_team_problem(infos)?;
            let grid = TimeGrid::new(p.horizon(), steps)?;
            run_continuous(&p, kind, &grid, &opts, ctx)
        }
        (ProblemInstance::Gnf(gnf), kind) => {
            let infos = build_info_specs(cfg, gnf.num_dms(), gnf.horizon())?;
            let p = gnf.to_team_problem(infos)?;
            let grid = TimeGrid::new(p.horizon(), steps)?;
            run_continuous(&p, kind, &grid, &opts, ctx)
        }
    }
}

fn run_continuous(
    p: &TeamProblem,
    kind: SolverKind,
    grid: &TimeGrid,
    opts: &SolveOptions,
    ctx: ReportCtx<'_>,
) -> Result<i32> {
    let init = StrategyProfile::zeros(p, grid);
    let solved = match kind {
        SolverKind::Pbp => solve_pbp(p, init, grid, opts),
        _ => solve_team(p, init, grid, opts),
    };
    let (profile, report) = match solved {
        Ok(pair) => pair,
        Err(e) => {
            return match divergence_note(&e) {
                Some(note) => ctx.diverged(note),
                None => Err(e.into()),
            }
        }
    };

    let u = profile.to_trajectory(p, grid)?;
    let x = integrate_forward(p, &u, grid)?;
    let psi = integrate_adjoint(p, &u, &x, grid)?;
    write_continuous_artifacts(ctx.dir, p, grid, &profile, &u, &x, &psi)?;
    ctx.finish(&report)
}

fn run_fixed_point(
    lq: &LqData,
    cfg: &ExperimentConfig,
    steps: usize,
    opts: &SolveOptions,
    ctx: ReportCtx<'_>,
) -> Result<i32> {
    let grid = TimeGrid::new(lq.horizon(), steps)?;
    let infos = build_info_specs(cfg, lq.num_dms(), lq.horizon())?;
    let placeholder = Trajectory::zeros(&grid, lq.state_dim());
    let subspaces: Vec<InfoSubspace> = infos
        .iter()
        .enumerate()
        .map(|(i, spec)| match spec {
            InfoSpec::OpenLoop | InfoSpec::FiniteBasis { .. } => {
                Ok(build_subspace(spec, i, &placeholder, &grid)?)
            }
            _ => bail!(
                "info[{i}]: observation-dependent restrictions need the team solver; \
                 the fixed point iterates over fixed subspaces"
            ),
        })
        .collect::<Result<_>>()?;

    let solved = solve_decentralized_lq(lq, &subspaces, &grid, opts);
    let (profile, rep, report) = match solved {
        Ok(t) => t,
        Err(e) => {
            return match divergence_note(&e) {
                Some(note) => ctx.diverged(note),
                None => Err(e.into()),
            }
        }
    };

    let p = lq.to_team_problem(infos)?;
    let u = profile.to_trajectory(&p, &grid)?;
    let x = lq.integrate_forward(&u, &grid)?;
    let psi = rep.costate(&x)?;
    write_continuous_artifacts(ctx.dir, &p, &grid, &profile, &u, &x, &psi)?;
    ctx.finish(&report)
}

fn write_continuous_artifacts(
    dir: &Path,
    p: &TeamProblem,
    grid: &TimeGrid,
    profile: &StrategyProfile,
    u: &Trajectory,
    x: &Trajectory,
    psi: &Trajectory,
) -> Result<()> {
    let times = grid.nodes();
    artifacts::write_trajectories(
        dir,
        &times,
        x.values(),
        psi.values(),
        u.values(),
        p.dm_dims(),
    )?;
    let stat = stationarity_residual(p, profile, grid)?;
    let per_dm: Vec<Vec<f64>> = stat
        .projected_gradients
        .iter()
        .map(|traj| traj.values().iter().map(|g| g.norm()).collect())
        .collect();
    artifacts::write_residuals(dir, &times, &per_dm)
}

fn run_discrete(p: &DiscreteTeamProblem, opts: &SolveOptions, ctx: ReportCtx<'_>) -> Result<i32> {
    let init = vec![DVector::zeros(p.control_dim()); p.steps()];
    let (u, report) = match discrete_solve_team(p, init, opts) {
        Ok(pair) => pair,
        Err(e) => {
            return match divergence_note(&e) {
                Some(note) => ctx.diverged(note),
                None => Err(e.into()),
            }
        }
    };

    let xs = discrete_forward(p, &u)?;
    let psi = discrete_adjoint(p, &u, &xs)?;
    let node_times: Vec<f64> = (0..=p.steps()).map(|k| k as f64).collect();
    // Stage controls stop one node short of the states; the terminal row
    // repeats the last stage so the table stays rectangular.
    let mut padded = u.clone();
    match u.last() {
        Some(last) => padded.push(last.clone()),
        None => bail!("discrete problem has no stages"),
    }
    artifacts::write_trajectories(ctx.dir, &node_times, &xs, &psi, &padded, &p.dm_dims())?;

    let stat = discrete_stationarity_residual(p, &u)?;
    let stage_times: Vec<f64> = (0..p.steps()).map(|k| k as f64).collect();
    let per_dm: Vec<Vec<f64>> = stat
        .projected_gradients
        .iter()
        .map(|path| path.iter().map(|g| g.norm()).collect())
        .collect();
    artifacts::write_residuals(ctx.dir, &stage_times, &per_dm)?;
    ctx.finish(&report)
}
