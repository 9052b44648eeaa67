use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::hamiltonian;
use crate::model::{TeamProblem, Trajectory};

/// Classical fourth-order Runge-Kutta marching over the given nodes.
/// Grid quantities entering the right-hand side are linearly interpolated at
/// the half-step stage times.
pub(crate) fn rk4_forward_path<F>(
    times: &[f64],
    start: DVector<f64>,
    mut rhs: F,
) -> Result<Vec<DVector<f64>>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let mut values = Vec::with_capacity(times.len());
    values.push(start);
    for k in 0..times.len() - 1 {
        let t = times[k];
        let h = times[k + 1] - t;
        let x = values[k].clone();
        let k1 = rhs(t, &x)?;
        let k2 = rhs(t + 0.5 * h, &(&x + &k1 * (0.5 * h)))?;
        let k3 = rhs(t + 0.5 * h, &(&x + &k2 * (0.5 * h)))?;
        let k4 = rhs(t + h, &(&x + &k3 * h))?;
        let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !next.iter().all(|c| c.is_finite()) {
            return Err(Error::IntegrationDiverged {
                node: k + 1,
                t: times[k + 1],
            });
        }
        values.push(next);
    }
    Ok(values)
}

/// Same scheme marched from the final node toward the first (negative steps).
pub(crate) fn rk4_backward_path<F>(
    times: &[f64],
    end: DVector<f64>,
    mut rhs: F,
) -> Result<Vec<DVector<f64>>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let n = times.len();
    let mut values = vec![DVector::zeros(end.len()); n];
    values[n - 1] = end;
    for k in (0..n - 1).rev() {
        let t = times[k + 1];
        let h = times[k] - t;
        let x = values[k + 1].clone();
        let k1 = rhs(t, &x)?;
        let k2 = rhs(t + 0.5 * h, &(&x + &k1 * (0.5 * h)))?;
        let k3 = rhs(t + 0.5 * h, &(&x + &k2 * (0.5 * h)))?;
        let k4 = rhs(t + h, &(&x + &k3 * h))?;
        let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !next.iter().all(|c| c.is_finite()) {
            return Err(Error::IntegrationDiverged {
                node: k,
                t: times[k],
            });
        }
        values[k] = next;
    }
    Ok(values)
}

fn check_control(p: &TeamProblem, u: &Trajectory, grid: &TimeGrid) -> Result<()> {
    if u.len() != grid.len() {
        return Err(Error::GridMismatch {
            context: "control path",
            lhs: grid.len(),
            rhs: u.len(),
        });
    }
    if u.dim() != p.control_dim() {
        return Err(Error::DimensionMismatch {
            context: "control path",
            expected: p.control_dim(),
            actual: u.dim(),
        });
    }
    Ok(())
}

fn check_state(p: &TeamProblem, x: &Trajectory, grid: &TimeGrid) -> Result<()> {
    if x.len() != grid.len() {
        return Err(Error::GridMismatch {
            context: "state path",
            lhs: grid.len(),
            rhs: x.len(),
        });
    }
    if x.dim() != p.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "state path",
            expected: p.state_dim(),
            actual: x.dim(),
        });
    }
    Ok(())
}

/// State sweep x' = f(t, x, u(t)), x(0) = x0. A state escaping the finite
/// range mid-sweep is reported as divergence at the node being computed.
pub fn integrate_forward(p: &TeamProblem, u: &Trajectory, grid: &TimeGrid) -> Result<Trajectory> {
    check_control(p, u, grid)?;
    let times = grid.nodes();
    let values = rk4_forward_path(&times, p.x0().clone(), |t, x| {
        let f = p.dynamics(t, x, &u.at(t));
        if f.len() != p.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "dynamics output",
                expected: p.state_dim(),
                actual: f.len(),
            });
        }
        Ok(f)
    })?;
    Trajectory::new(times, values)
}

/// Costate sweep psi' = -H_x(t, x(t), psi, u(t)) backward from
/// psi(T) = terminal gradient at x(T). The right-hand side calls the same
/// state-gradient routine the Hamiltonian module exposes.
pub fn integrate_adjoint(
    p: &TeamProblem,
    u: &Trajectory,
    x: &Trajectory,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    check_control(p, u, grid)?;
    check_state(p, x, grid)?;
    let times = grid.nodes();
    let terminal = p.terminal_grad(x.last());
    if !terminal.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFiniteEval {
            context: "terminal gradient",
            t: grid.horizon(),
        });
    }
    let values = rk4_backward_path(&times, terminal, |t, psi| {
        Ok(-hamiltonian::grad_x(p, t, &x.at(t), psi, &u.at(t))?)
    })?;
    Trajectory::new(times, values)
}

/// First-variation sweep Z' = f_x Z + f_u du along (x, u), Z(0) = 0.
/// Z approximates d/d eps of the state under u + eps du at eps = 0.
pub fn integrate_variational(
    p: &TeamProblem,
    u: &Trajectory,
    du: &Trajectory,
    x: &Trajectory,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    check_control(p, u, grid)?;
    check_control(p, du, grid)?;
    check_state(p, x, grid)?;
    let times = grid.nodes();
    let values = rk4_forward_path(&times, DVector::zeros(p.state_dim()), |t, z| {
        let xt = x.at(t);
        let ut = u.at(t);
        let g = p.state_jacobian(t, &xt, &ut) * z + p.control_jacobian(t, &xt, &ut) * du.at(t);
        if !g.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFiniteEval {
                context: "variational right-hand side",
                t,
            });
        }
        Ok(g)
    })?;
    Trajectory::new(times, values)
}
