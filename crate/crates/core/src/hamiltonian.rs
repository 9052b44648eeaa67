use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::TeamProblem;

/// Value and first-order data of the control Hamiltonian
/// H(t, x, psi, u) = <f(t,x,u), psi> + l(t,x,u).
#[derive(Debug, Clone)]
pub struct HamiltonianEval {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub grad_u: DVector<f64>,
}

fn check_dims(
    p: &TeamProblem,
    x: &DVector<f64>,
    psi: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<()> {
    if x.len() != p.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "hamiltonian state",
            expected: p.state_dim(),
            actual: x.len(),
        });
    }
    if psi.len() != p.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "hamiltonian costate",
            expected: p.state_dim(),
            actual: psi.len(),
        });
    }
    if u.len() != p.control_dim() {
        return Err(Error::DimensionMismatch {
            context: "hamiltonian control",
            expected: p.control_dim(),
            actual: u.len(),
        });
    }
    Ok(())
}

pub fn hamiltonian_value(
    p: &TeamProblem,
    t: f64,
    x: &DVector<f64>,
    psi: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64> {
    check_dims(p, x, psi, u)?;
    let value = p.dynamics(t, x, u).dot(psi) + p.running_cost(t, x, u);
    if !value.is_finite() {
        return Err(Error::NonFiniteEval {
            context: "hamiltonian value",
            t,
        });
    }
    Ok(value)
}

/// State gradient H_x = f_x^T psi + l_x. The adjoint sweep integrates exactly
/// the negative of this function.
pub fn grad_x(
    p: &TeamProblem,
    t: f64,
    x: &DVector<f64>,
    psi: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g = p.state_jacobian(t, x, u).transpose() * psi + p.running_grad_x(t, x, u);
    if !g.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFiniteEval {
            context: "hamiltonian state gradient",
            t,
        });
    }
    Ok(g)
}

/// Control gradient H_u = f_u^T psi + l_u.
pub fn grad_u(
    p: &TeamProblem,
    t: f64,
    x: &DVector<f64>,
    psi: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g = p.control_jacobian(t, x, u).transpose() * psi + p.running_grad_u(t, x, u);
    if !g.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFiniteEval {
            context: "hamiltonian control gradient",
            t,
        });
    }
    Ok(g)
}

pub fn eval_hamiltonian(
    p: &TeamProblem,
    t: f64,
    x: &DVector<f64>,
    psi: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<HamiltonianEval> {
    let value = hamiltonian_value(p, t, x, psi, u)?;
    Ok(HamiltonianEval {
        value,
        grad_x: grad_x(p, t, x, psi, u)?,
        grad_u: grad_u(p, t, x, psi, u)?,
    })
}

/// Block of the control gradient owned by decision maker `i`.
pub fn dm_gradient(p: &TeamProblem, grad_u: &DVector<f64>, i: usize) -> DVector<f64> {
    let range = p.dm_block(i);
    grad_u.rows(range.start, range.len()).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infostruct::InfoSpec;
    use crate::model::BoxSet;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn scalar_integrator() -> TeamProblem {
        TeamProblem::builder(1, 1.0, DVector::from_vec(vec![1.0]))
            .dynamics(|_, _, u| u.clone())
            .running_cost(|_, _, u| 0.5 * u.dot(u))
            .terminal_cost(|x| 0.5 * x.dot(x))
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap()
    }

    #[test]
    fn scalar_integrator_hamiltonian_data() {
        let p = scalar_integrator();
        let x = DVector::from_vec(vec![1.0]);

        let at_rest = eval_hamiltonian(
            &p,
            0.0,
            &x,
            &DVector::from_vec(vec![1.0]),
            &DVector::zeros(1),
        )
        .unwrap();
        assert_relative_eq!(at_rest.value, 0.0, epsilon = 1e-12);
        assert_relative_eq!(at_rest.grad_u[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(at_rest.grad_x[0], 0.0, epsilon = 1e-8);

        let at_half = eval_hamiltonian(
            &p,
            0.0,
            &x,
            &DVector::from_vec(vec![0.5]),
            &DVector::from_vec(vec![-0.5]),
        )
        .unwrap();
        assert_relative_eq!(at_half.value, -0.125, epsilon = 1e-12);
        assert_relative_eq!(at_half.grad_u[0], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn affine_drift_with_state_multiplied_input() {
        // f = g(x) u with g = 1 + 0, quadratic control cost R = 1, offset eta = 0;
        // at psi = 2, u = 0 the control gradient is g psi = 2
        let p = TeamProblem::builder(1, 1.0, DVector::zeros(1))
            .dynamics(|_, _, u| u.clone())
            .running_cost(|_, _, u| 0.5 * u.dot(u))
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        let g = grad_u(
            &p,
            0.3,
            &DVector::zeros(1),
            &DVector::from_vec(vec![2.0]),
            &DVector::zeros(1),
        )
        .unwrap();
        assert_relative_eq!(g[0], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn linear_quadratic_state_gradient_matches_the_closed_form() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.3, 0.2, 0.1, -0.5]);
        let h = DMatrix::from_row_slice(2, 2, &[0.7, 0.1, 0.1, 0.4]);
        let (af, hf) = (a.clone(), h.clone());
        let p = TeamProblem::builder(2, 1.0, DVector::zeros(2))
            .dynamics(move |_, x, u| &af * x + u)
            .running_cost(move |_, x, _| 0.5 * (&hf * x).dot(x))
            .decision_maker(2, BoxSet::free(2), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        let x = DVector::from_vec(vec![0.4, -1.2]);
        let psi = DVector::from_vec(vec![1.0, -0.5]);
        let u = DVector::zeros(2);
        let expected = a.transpose() * &psi + &h * &x;
        let got = grad_x(&p, 0.2, &x, &psi, &u).unwrap();
        assert_relative_eq!((got - expected).amax(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn per_dm_blocks_partition_the_control_gradient() {
        let p = TeamProblem::builder(1, 1.0, DVector::zeros(1))
            .dynamics(|_, _, u| DVector::from_vec(vec![u[0] + 2.0 * u[1] + u[2]]))
            .running_cost(|_, _, u| 0.5 * u.dot(u))
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .decision_maker(2, BoxSet::free(2), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        let g = grad_u(
            &p,
            0.0,
            &DVector::zeros(1),
            &DVector::from_vec(vec![1.0]),
            &DVector::zeros(3),
        )
        .unwrap();
        let b0 = dm_gradient(&p, &g, 0);
        let b1 = dm_gradient(&p, &g, 1);
        assert_eq!(b0.len(), 1);
        assert_eq!(b1.len(), 2);
        assert_relative_eq!(b0[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(b1[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(b1[1], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn non_finite_costates_are_rejected() {
        let p = scalar_integrator();
        let res = hamiltonian_value(
            &p,
            0.0,
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![f64::INFINITY]),
            &DVector::from_vec(vec![1.0]),
        );
        assert!(matches!(res, Err(Error::NonFiniteEval { .. })));
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let p = scalar_integrator();
        let res = hamiltonian_value(
            &p,
            0.0,
            &DVector::zeros(2),
            &DVector::zeros(1),
            &DVector::zeros(1),
        );
        assert!(matches!(
            res,
            Err(Error::DimensionMismatch {
                context: "hamiltonian state",
                ..
            })
        ));
    }
}
