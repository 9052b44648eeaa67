use nalgebra::{DMatrix, DVector};

use crate::discrete::DiscreteTeamProblem;
use crate::infostruct::InfoSpec;
use crate::lq::{GnfData, LqData};
use crate::model::{BoxSet, TeamProblem};

/// Ready-made example problems with known structure, used by the command
/// line tool and as solver regression anchors.
pub enum BuiltinKind {
    Team(fn() -> TeamProblem),
    Lq(fn() -> LqData),
    Gnf(fn() -> GnfData),
    DiscreteTeam(fn() -> DiscreteTeamProblem),
}

pub struct Builtin {
    pub name: &'static str,
    pub summary: &'static str,
    /// Optimal cost when it is known in closed form.
    pub expected_cost: Option<f64>,
    pub kind: BuiltinKind,
}

fn p1() -> TeamProblem {
    TeamProblem::builder(1, 1.0, DVector::from_vec(vec![1.0]))
        .dynamics(|_, _, u| u.clone())
        .dynamics_jacobians(
            |_, _, _| DMatrix::zeros(1, 1),
            |_, _, _| DMatrix::identity(1, 1),
        )
        .running_cost(|_, _, u| 0.5 * u.dot(u))
        .running_cost_gradients(|_, x, _| DVector::zeros(x.len()), |_, _, u| u.clone())
        .terminal_cost(|x| 0.5 * x.dot(x))
        .terminal_cost_gradient(|x| x.clone())
        .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
        .build()
        .expect("builtin is well formed")
}

fn p1d() -> DiscreteTeamProblem {
    let steps = 200;
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
        .expect("builtin is well formed")
}

fn decoupled_pair() -> LqData {
    LqData::builder(2, vec![1, 1], 1.0, DVector::from_vec(vec![1.0, 1.0]))
        .input_matrix_const(DMatrix::identity(2, 2))
        .terminal_weight(DMatrix::identity(2, 2))
        .build()
        .expect("builtin is well formed")
}

fn lq2_coupled() -> LqData {
    LqData::builder(2, vec![1, 1], 1.0, DVector::from_vec(vec![1.0, -0.5]))
        .state_matrix_const(DMatrix::from_row_slice(2, 2, &[-0.4, 0.25, 0.2, -0.5]))
        .input_matrix_const(DMatrix::identity(2, 2))
        .control_weight_const(DMatrix::from_row_slice(2, 2, &[1.0, 0.15, 0.15, 1.0]))
        .state_weight_const(DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.5]))
        .terminal_weight(DMatrix::identity(2, 2) * 0.5)
        .build()
        .expect("builtin is well formed")
}

fn gnf_scalar() -> GnfData {
    GnfData::builder(1, vec![1], 1.0, DVector::from_vec(vec![1.0]))
        .drift(|_, x| -x)
        .input_matrix(|_, x| DMatrix::from_vec(1, 1, vec![1.0 + 0.5 * x[0].sin()]))
        .state_cost(|_, x| 0.5 * x.dot(x))
        .terminal_cost(|x| 0.5 * x.dot(x))
        .build()
        .expect("builtin is well formed")
}

pub static BUILTINS: &[Builtin] = &[
    Builtin {
        name: "p1",
        summary:
            "scalar integrator, quadratic effort and terminal penalty; optimum is the constant -1/2",
        expected_cost: Some(0.25),
        kind: BuiltinKind::Team(p1),
    },
    Builtin {
        name: "p1d",
        summary:
            "200-stage transcription of p1; its exact optimum is cost 1/4 at every stage count",
        expected_cost: Some(0.25),
        kind: BuiltinKind::DiscreteTeam(p1d),
    },
    Builtin {
        name: "decoupled-pair",
        summary: "two independent scalar integrators, one decision maker each; optimal cost 1/2",
        expected_cost: Some(0.5),
        kind: BuiltinKind::Lq(decoupled_pair),
    },
    Builtin {
        name: "lq2-coupled",
        summary: "two-state linear-quadratic team with cross weights coupling the decision makers",
        expected_cost: None,
        kind: BuiltinKind::Lq(lq2_coupled),
    },
    Builtin {
        name: "gnf-scalar",
        summary: "scalar drift-plus-input-affine problem with a state-dependent input gain",
        expected_cost: None,
        kind: BuiltinKind::Gnf(gnf_scalar),
    },
];

pub fn find_builtin(name: &str) -> Option<&'static Builtin> {
    BUILTINS.iter().find(|b| b.name == name)
}
