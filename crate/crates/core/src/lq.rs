use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fd;
use crate::grid::TimeGrid;
use crate::infostruct::{InfoSpec, InfoSubspace};
use crate::integrate::{rk4_backward_path, rk4_forward_path};
use crate::model::{BoxSet, TeamProblem, Trajectory};
use crate::team_solver::{DmStrategy, SolveOptions, SolveReport, StrategyProfile};

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;
pub type StateMatrixFn = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type StateVectorFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type StateScalarFn = Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Linear dynamics x' = A(t) x + b(t) + B(t) u with quadratic cost
/// integrand u'Ru/2 + x'Wx/2 + <x, F> + <u, E x> + <u, m> and terminal cost
/// x'Mx/2 + <x, N>. Coefficients are time callbacks; weights default to zero
/// except the control weight, which defaults to the identity.
#[derive(Clone)]
pub struct LqData {
    state_dim: usize,
    dm_dims: Vec<usize>,
    horizon: f64,
    x0: DVector<f64>,
    state_matrix: MatrixFn,
    drift: VectorFn,
    input_matrix: MatrixFn,
    state_weight: MatrixFn,
    control_weight: MatrixFn,
    cross_weight: MatrixFn,
    state_offset: VectorFn,
    control_offset: VectorFn,
    terminal_weight: DMatrix<f64>,
    terminal_offset: DVector<f64>,
}

pub struct LqBuilder {
    data: LqData,
}

fn const_mat(m: DMatrix<f64>) -> MatrixFn {
    Arc::new(move |_| m.clone())
}

fn const_vec(v: DVector<f64>) -> VectorFn {
    Arc::new(move |_| v.clone())
}

impl LqData {
    pub fn builder(
        state_dim: usize,
        dm_dims: Vec<usize>,
        horizon: f64,
        x0: DVector<f64>,
    ) -> LqBuilder {
        let d: usize = dm_dims.iter().sum();
        LqBuilder {
            data: LqData {
                state_dim,
                dm_dims,
                horizon,
                x0,
                state_matrix: const_mat(DMatrix::zeros(state_dim, state_dim)),
                drift: const_vec(DVector::zeros(state_dim)),
                input_matrix: const_mat(DMatrix::zeros(state_dim, d)),
                state_weight: const_mat(DMatrix::zeros(state_dim, state_dim)),
                control_weight: const_mat(DMatrix::identity(d, d)),
                cross_weight: const_mat(DMatrix::zeros(d, state_dim)),
                state_offset: const_vec(DVector::zeros(state_dim)),
                control_offset: const_vec(DVector::zeros(d)),
                terminal_weight: DMatrix::zeros(state_dim, state_dim),
                terminal_offset: DVector::zeros(state_dim),
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn dm_dims(&self) -> &[usize] {
        &self.dm_dims
    }

    pub fn num_dms(&self) -> usize {
        self.dm_dims.len()
    }

    pub fn control_dim(&self) -> usize {
        self.dm_dims.iter().sum()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn dm_block(&self, i: usize) -> Range<usize> {
        let start: usize = self.dm_dims[..i].iter().sum();
        start..start + self.dm_dims[i]
    }

    pub fn terminal_weight(&self) -> &DMatrix<f64> {
        &self.terminal_weight
    }

    pub fn terminal_offset(&self) -> &DVector<f64> {
        &self.terminal_offset
    }

    fn mat(
        &self,
        f: &MatrixFn,
        t: f64,
        rows: usize,
        cols: usize,
        what: &'static str,
    ) -> Result<DMatrix<f64>> {
        let m = f(t);
        if m.nrows() != rows || m.ncols() != cols {
            return Err(Error::DimensionMismatch {
                context: what,
                expected: rows * cols,
                actual: m.nrows() * m.ncols(),
            });
        }
        if !m.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFiniteEval { context: what, t });
        }
        Ok(m)
    }

    fn vec(&self, f: &VectorFn, t: f64, len: usize, what: &'static str) -> Result<DVector<f64>> {
        let v = f(t);
        if v.len() != len {
            return Err(Error::DimensionMismatch {
                context: what,
                expected: len,
                actual: v.len(),
            });
        }
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFiniteEval { context: what, t });
        }
        Ok(v)
    }

    pub fn state_matrix_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.mat(
            &self.state_matrix,
            t,
            self.state_dim,
            self.state_dim,
            "state matrix",
        )
    }

    pub fn drift_at(&self, t: f64) -> Result<DVector<f64>> {
        self.vec(&self.drift, t, self.state_dim, "drift")
    }

    pub fn input_matrix_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.mat(
            &self.input_matrix,
            t,
            self.state_dim,
            self.control_dim(),
            "input matrix",
        )
    }

    pub fn state_weight_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.mat(
            &self.state_weight,
            t,
            self.state_dim,
            self.state_dim,
            "state weight",
        )
    }

    pub fn control_weight_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.mat(
            &self.control_weight,
            t,
            self.control_dim(),
            self.control_dim(),
            "control weight",
        )
    }

    pub fn cross_weight_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.mat(
            &self.cross_weight,
            t,
            self.control_dim(),
            self.state_dim,
            "cross weight",
        )
    }

    pub fn state_offset_at(&self, t: f64) -> Result<DVector<f64>> {
        self.vec(&self.state_offset, t, self.state_dim, "state offset")
    }

    pub fn control_offset_at(&self, t: f64) -> Result<DVector<f64>> {
        self.vec(
            &self.control_offset,
            t,
            self.control_dim(),
            "control offset",
        )
    }

    /// Nodewise well-posedness: coefficient shapes, symmetric positive
    /// definite control weight, symmetric positive semidefinite state and
    /// terminal weights.
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.x0.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: self.state_dim,
                actual: self.x0.len(),
            });
        }
        if self.dm_dims.is_empty() || self.dm_dims.contains(&0) {
            return Err(Error::InvalidProblem(
                "decision-maker blocks must have positive dimension".into(),
            ));
        }
        check_sym_psd(&self.terminal_weight, "terminal weight".into())?;
        for k in 0..grid.len() {
            let t = grid.node(k);
            self.state_matrix_at(t)?;
            self.drift_at(t)?;
            self.input_matrix_at(t)?;
            self.cross_weight_at(t)?;
            self.state_offset_at(t)?;
            self.control_offset_at(t)?;
            let r = self.control_weight_at(t)?;
            check_sym_pd(&r, format!("control weight at t = {t:.4}"))?;
            let w = self.state_weight_at(t)?;
            check_sym_psd(&w, format!("state weight at t = {t:.4}"))?;
        }
        Ok(())
    }

    /// Running cost integrand at one node.
    pub fn running_cost(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let r = self.control_weight_at(t)?;
        let w = self.state_weight_at(t)?;
        let e = self.cross_weight_at(t)?;
        let f_off = self.state_offset_at(t)?;
        let m_off = self.control_offset_at(t)?;
        Ok(0.5 * (&r * u).dot(u)
            + 0.5 * (&w * x).dot(x)
            + f_off.dot(x)
            + (&e * x).dot(u)
            + m_off.dot(u))
    }

    /// Total cost of a control path along its state response.
    pub fn cost_of(&self, u: &Trajectory, x: &Trajectory, grid: &TimeGrid) -> Result<f64> {
        let samples = (0..grid.len())
            .map(|k| self.running_cost(grid.node(k), x.value(k), u.value(k)))
            .collect::<Result<Vec<f64>>>()?;
        let xt = x.last();
        let terminal = 0.5 * (&self.terminal_weight * xt).dot(xt) + self.terminal_offset.dot(xt);
        Ok(grid.trapezoid(&samples)? + terminal)
    }

    /// State sweep under a sampled control path.
    pub fn integrate_forward(&self, u: &Trajectory, grid: &TimeGrid) -> Result<Trajectory> {
        if u.len() != grid.len() {
            return Err(Error::GridMismatch {
                context: "control path",
                lhs: grid.len(),
                rhs: u.len(),
            });
        }
        if u.dim() != self.control_dim() {
            return Err(Error::DimensionMismatch {
                context: "control path",
                expected: self.control_dim(),
                actual: u.dim(),
            });
        }
        let times = grid.nodes();
        let values = rk4_forward_path(&times, self.x0.clone(), |t, x| {
            Ok(self.state_matrix_at(t)? * x
                + self.drift_at(t)?
                + self.input_matrix_at(t)? * u.at(t))
        })?;
        Trajectory::new(times, values)
    }

    /// Equivalent general team problem with analytic derivatives; action
    /// sets are unconstrained.
    pub fn to_team_problem(&self, infos: Vec<InfoSpec>) -> Result<TeamProblem> {
        if infos.len() != self.num_dms() {
            return Err(Error::DimensionMismatch {
                context: "information specs",
                expected: self.num_dms(),
                actual: infos.len(),
            });
        }
        let a = self.state_matrix.clone();
        let b = self.drift.clone();
        let bm = self.input_matrix.clone();
        let (a2, bm2) = (self.state_matrix.clone(), self.input_matrix.clone());
        let r = self.control_weight.clone();
        let w = self.state_weight.clone();
        let e = self.cross_weight.clone();
        let f_off = self.state_offset.clone();
        let m_off = self.control_offset.clone();
        let (r2, e2, m2) = (
            self.control_weight.clone(),
            self.cross_weight.clone(),
            self.control_offset.clone(),
        );
        let (w3, e3, f3) = (
            self.state_weight.clone(),
            self.cross_weight.clone(),
            self.state_offset.clone(),
        );
        let mt = self.terminal_weight.clone();
        let nt = self.terminal_offset.clone();
        let (mt2, nt2) = (mt.clone(), nt.clone());

        let mut builder = TeamProblem::builder(self.state_dim, self.horizon, self.x0.clone())
            .dynamics(move |t, x, u| a(t) * x + b(t) + bm(t) * u)
            .dynamics_jacobians(move |t, _, _| a2(t), move |t, _, _| bm2(t))
            .running_cost(move |t, x, u| {
                0.5 * (r(t) * u).dot(u)
                    + 0.5 * (w(t) * x).dot(x)
                    + f_off(t).dot(x)
                    + (e(t) * x).dot(u)
                    + m_off(t).dot(u)
            })
            .running_cost_gradients(
                move |t, x, u| w3(t) * x + f3(t) + e3(t).transpose() * u,
                move |t, x, u| r2(t) * u + e2(t) * x + m2(t),
            )
            .terminal_cost(move |x| 0.5 * (&mt * x).dot(x) + nt.dot(x))
            .terminal_cost_gradient(move |x| &mt2 * x + &nt2);
        for (i, spec) in infos.into_iter().enumerate() {
            builder = builder.decision_maker(self.dm_dims[i], BoxSet::free(self.dm_dims[i]), spec);
        }
        builder.build()
    }
}

fn check_sym_psd(m: &DMatrix<f64>, what: String) -> Result<()> {
    let scale = 1.0 + m.amax();
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidProblem(format!("{what} is not symmetric")));
    }
    let min_ev = m.clone().symmetric_eigenvalues().min();
    if min_ev < -1e-9 * scale {
        return Err(Error::InvalidProblem(format!(
            "{what} has negative eigenvalue {min_ev:.3e}"
        )));
    }
    Ok(())
}

fn check_sym_pd(m: &DMatrix<f64>, what: String) -> Result<()> {
    let scale = 1.0 + m.amax();
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidProblem(format!("{what} is not symmetric")));
    }
    let min_ev = m.clone().symmetric_eigenvalues().min();
    if min_ev <= 0.0 {
        return Err(Error::InvalidProblem(format!(
            "{what} is not positive definite (min eigenvalue {min_ev:.3e})"
        )));
    }
    Ok(())
}

impl LqBuilder {
    pub fn state_matrix<F>(mut self, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.data.state_matrix = Arc::new(f);
        self
    }

    pub fn state_matrix_const(self, m: DMatrix<f64>) -> Self {
        let data = LqData {
            state_matrix: const_mat(m),
            ..self.data
        };
        Self { data }
    }

    pub fn drift<F>(mut self, f: F) -> Self
    where
        F: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    {
        self.data.drift = Arc::new(f);
        self
    }

    pub fn drift_const(mut self, v: DVector<f64>) -> Self {
        self.data.drift = const_vec(v);
        self
    }

    pub fn input_matrix<F>(mut self, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.data.input_matrix = Arc::new(f);
        self
    }

    pub fn input_matrix_const(mut self, m: DMatrix<f64>) -> Self {
        self.data.input_matrix = const_mat(m);
        self
    }

    pub fn state_weight<F>(mut self, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.data.state_weight = Arc::new(f);
        self
    }

    pub fn state_weight_const(mut self, m: DMatrix<f64>) -> Self {
        self.data.state_weight = const_mat(m);
        self
    }

    pub fn control_weight<F>(mut self, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.data.control_weight = Arc::new(f);
        self
    }

    pub fn control_weight_const(mut self, m: DMatrix<f64>) -> Self {
        self.data.control_weight = const_mat(m);
        self
    }

    pub fn cross_weight_const(mut self, m: DMatrix<f64>) -> Self {
        self.data.cross_weight = const_mat(m);
        self
    }

    pub fn state_offset<F>(mut self, f: F) -> Self
    where
        F: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    {
        self.data.state_offset = Arc::new(f);
        self
    }

    pub fn state_offset_const(mut self, v: DVector<f64>) -> Self {
        self.data.state_offset = const_vec(v);
        self
    }

    pub fn control_offset_const(mut self, v: DVector<f64>) -> Self {
        self.data.control_offset = const_vec(v);
        self
    }

    pub fn terminal_weight(mut self, m: DMatrix<f64>) -> Self {
        self.data.terminal_weight = m;
        self
    }

    pub fn terminal_offset(mut self, v: DVector<f64>) -> Self {
        self.data.terminal_offset = v;
        self
    }

    pub fn build(self) -> Result<LqData> {
        let d = self.data;
        if d.state_dim == 0 {
            return Err(Error::InvalidProblem(
                "state dimension must be positive".into(),
            ));
        }
        if !(d.horizon.is_finite() && d.horizon > 0.0) {
            return Err(Error::InvalidProblem(
                "horizon must be finite and positive".into(),
            ));
        }
        if d.x0.len() != d.state_dim {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: d.state_dim,
                actual: d.x0.len(),
            });
        }
        if d.dm_dims.is_empty() || d.dm_dims.contains(&0) {
            return Err(Error::InvalidProblem(
                "decision-maker blocks must have positive dimension".into(),
            ));
        }
        if d.terminal_weight.nrows() != d.state_dim || d.terminal_weight.ncols() != d.state_dim {
            return Err(Error::DimensionMismatch {
                context: "terminal weight",
                expected: d.state_dim * d.state_dim,
                actual: d.terminal_weight.nrows() * d.terminal_weight.ncols(),
            });
        }
        if d.terminal_offset.len() != d.state_dim {
            return Err(Error::DimensionMismatch {
                context: "terminal offset",
                expected: d.state_dim,
                actual: d.terminal_offset.len(),
            });
        }
        // sample the callbacks once for early shape errors
        d.state_matrix_at(0.0)?;
        d.drift_at(0.0)?;
        d.input_matrix_at(0.0)?;
        d.state_weight_at(0.0)?;
        d.control_weight_at(0.0)?;
        d.cross_weight_at(0.0)?;
        d.state_offset_at(0.0)?;
        d.control_offset_at(0.0)?;
        Ok(d)
    }
}

/// Affine costate representation psi(t) = Sigma(t) x(t) + beta(t) on a grid.
#[derive(Clone)]
pub struct AdjointRep {
    times: Vec<f64>,
    sigma: Vec<DMatrix<f64>>,
    beta: Vec<DVector<f64>>,
}

impl AdjointRep {
    pub fn new(times: Vec<f64>, sigma: Vec<DMatrix<f64>>, beta: Vec<DVector<f64>>) -> Result<Self> {
        if times.len() != sigma.len() || times.len() != beta.len() || times.is_empty() {
            return Err(Error::GridMismatch {
                context: "adjoint representation",
                lhs: times.len(),
                rhs: sigma.len().min(beta.len()),
            });
        }
        Ok(Self { times, sigma, beta })
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

    pub fn sigma(&self, k: usize) -> &DMatrix<f64> {
        &self.sigma[k]
    }

    pub fn beta(&self, k: usize) -> &DVector<f64> {
        &self.beta[k]
    }

    /// Costate path induced by a state path: psi_k = Sigma_k x_k + beta_k.
    pub fn costate(&self, x: &Trajectory) -> Result<Trajectory> {
        if x.len() != self.len() {
            return Err(Error::GridMismatch {
                context: "adjoint representation",
                lhs: self.len(),
                rhs: x.len(),
            });
        }
        let values: Vec<DVector<f64>> = (0..self.len())
            .map(|k| &self.sigma[k] * x.value(k) + &self.beta[k])
            .collect();
        Trajectory::new(self.times.clone(), values)
    }
}

fn mat_to_vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn vec_to_mat(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

fn interp_mats(times: &[f64], mats: &[DMatrix<f64>], t: f64) -> DMatrix<f64> {
    let n = times.len();
    let right = times.partition_point(|&s| s <= t);
    if right == 0 {
        return mats[0].clone();
    }
    if right == n {
        return mats[n - 1].clone();
    }
    let (t0, t1) = (times[right - 1], times[right]);
    let theta = (t - t0) / (t1 - t0);
    &mats[right - 1] * (1.0 - theta) + &mats[right] * theta
}

/// Backward sweep of the quadratic costate coefficient:
/// Sigma' + A' Sigma + Sigma A + W = 0 with Sigma(T) equal to the terminal
/// weight. Returns Sigma at every grid node.
pub fn solve_sigma(lq: &LqData, grid: &TimeGrid) -> Result<Vec<DMatrix<f64>>> {
    let n = lq.state_dim();
    let times = grid.nodes();
    let end = mat_to_vec(&lq.terminal_weight);
    let values = rk4_backward_path(&times, end, |t, s| {
        let sm = vec_to_mat(s, n, n);
        let a = lq.state_matrix_at(t)?;
        let w = lq.state_weight_at(t)?;
        let ds = -(a.transpose() * &sm + &sm * &a + w);
        Ok(mat_to_vec(&ds))
    })?;
    Ok(values.iter().map(|v| vec_to_mat(v, n, n)).collect())
}

/// Backward sweep of the affine costate part along a fixed control path:
/// beta' + A' beta + Sigma b + F + Sigma B u + E' u = 0, beta(T) = terminal
/// offset. `sigma` must come from [`solve_sigma`] on the same grid.
pub fn solve_beta(
    lq: &LqData,
    sigma: &[DMatrix<f64>],
    u: &Trajectory,
    grid: &TimeGrid,
) -> Result<Vec<DVector<f64>>> {
    if sigma.len() != grid.len() {
        return Err(Error::GridMismatch {
            context: "sigma path",
            lhs: grid.len(),
            rhs: sigma.len(),
        });
    }
    if u.len() != grid.len() {
        return Err(Error::GridMismatch {
            context: "control path",
            lhs: grid.len(),
            rhs: u.len(),
        });
    }
    let times = grid.nodes();
    rk4_backward_path(&times, lq.terminal_offset.clone(), |t, beta| {
        let a = lq.state_matrix_at(t)?;
        let b = lq.drift_at(t)?;
        let bm = lq.input_matrix_at(t)?;
        let e = lq.cross_weight_at(t)?;
        let f_off = lq.state_offset_at(t)?;
        let s = interp_mats(&times, sigma, t);
        let ut = u.at(t);
        Ok(-(a.transpose() * beta + &s * b + f_off + &s * (bm * &ut) + e.transpose() * &ut))
    })
}

/// Both backward sweeps packaged as an [`AdjointRep`].
pub fn adjoint_representation(lq: &LqData, u: &Trajectory, grid: &TimeGrid) -> Result<AdjointRep> {
    let sigma = solve_sigma(lq, grid)?;
    let beta = solve_beta(lq, &sigma, u, grid)?;
    AdjointRep::new(grid.nodes(), sigma, beta)
}

/// Drift-plus-input-affine dynamics x' = b(t,x) + g(t,x) u with control cost
/// u'R(t,x)u/2 + <u, eta(t,x)> + state cost s(t,x) and optional terminal
/// cost. The control enters linearly; everything else may be nonlinear.
#[derive(Clone)]
pub struct GnfData {
    state_dim: usize,
    dm_dims: Vec<usize>,
    horizon: f64,
    x0: DVector<f64>,
    drift: StateVectorFn,
    input_matrix: StateMatrixFn,
    control_weight: StateMatrixFn,
    control_offset: StateVectorFn,
    state_cost: StateScalarFn,
    terminal_cost: TerminalFn,
}

pub struct GnfBuilder {
    data: GnfData,
}

impl GnfData {
    pub fn builder(
        state_dim: usize,
        dm_dims: Vec<usize>,
        horizon: f64,
        x0: DVector<f64>,
    ) -> GnfBuilder {
        let d: usize = dm_dims.iter().sum();
        GnfBuilder {
            data: GnfData {
                state_dim,
                dm_dims,
                horizon,
                x0,
                drift: Arc::new(move |_, _| DVector::zeros(state_dim)),
                input_matrix: Arc::new(move |_, _| DMatrix::zeros(state_dim, d)),
                control_weight: Arc::new(move |_, _| DMatrix::identity(d, d)),
                control_offset: Arc::new(move |_, _| DVector::zeros(d)),
                state_cost: Arc::new(|_, _| 0.0),
                terminal_cost: Arc::new(|_| 0.0),
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn num_dms(&self) -> usize {
        self.dm_dims.len()
    }

    pub fn control_dim(&self) -> usize {
        self.dm_dims.iter().sum()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dm_block(&self, i: usize) -> Range<usize> {
        let start: usize = self.dm_dims[..i].iter().sum();
        start..start + self.dm_dims[i]
    }

    /// Equivalent general team problem; the input jacobian is analytic, the
    /// state derivatives fall back to central differences.
    pub fn to_team_problem(&self, infos: Vec<InfoSpec>) -> Result<TeamProblem> {
        if infos.len() != self.num_dms() {
            return Err(Error::DimensionMismatch {
                context: "information specs",
                expected: self.num_dms(),
                actual: infos.len(),
            });
        }
        let n = self.state_dim;
        let drift = self.drift.clone();
        let gmat = self.input_matrix.clone();
        let (drift2, gmat2) = (self.drift.clone(), self.input_matrix.clone());
        let gmat3 = self.input_matrix.clone();
        let r = self.control_weight.clone();
        let eta = self.control_offset.clone();
        let sc = self.state_cost.clone();
        let (r2, eta2) = (self.control_weight.clone(), self.control_offset.clone());
        let (r3, eta3, sc3) = (
            self.control_weight.clone(),
            self.control_offset.clone(),
            self.state_cost.clone(),
        );
        let phi = self.terminal_cost.clone();

        let mut builder = TeamProblem::builder(self.state_dim, self.horizon, self.x0.clone())
            .dynamics(move |t, x, u| drift(t, x) + gmat(t, x) * u)
            .dynamics_jacobians(
                move |t, x, u| {
                    let uc = u.clone();
                    fd::jacobian(|y| drift2(t, y) + gmat2(t, y) * &uc, x, n)
                },
                move |t, x, _| gmat3(t, x),
            )
            .running_cost(move |t, x, u| 0.5 * (r(t, x) * u).dot(u) + eta(t, x).dot(u) + sc(t, x))
            .running_cost_gradients(
                move |t, x, u| {
                    let uc = u.clone();
                    fd::gradient(
                        |y| 0.5 * (r3(t, y) * &uc).dot(&uc) + eta3(t, y).dot(&uc) + sc3(t, y),
                        x,
                    )
                },
                move |t, x, u| r2(t, x) * u + eta2(t, x),
            )
            .terminal_cost(move |x| phi(x));
        for (i, spec) in infos.into_iter().enumerate() {
            builder = builder.decision_maker(self.dm_dims[i], BoxSet::free(self.dm_dims[i]), spec);
        }
        builder.build()
    }
}

impl GnfBuilder {
    pub fn drift<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.data.drift = Arc::new(f);
        self
    }

    pub fn input_matrix<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.data.input_matrix = Arc::new(f);
        self
    }

    pub fn control_weight<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.data.control_weight = Arc::new(f);
        self
    }

    pub fn control_offset<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.data.control_offset = Arc::new(f);
        self
    }

    pub fn state_cost<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        self.data.state_cost = Arc::new(f);
        self
    }

    pub fn terminal_cost<F>(mut self, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        self.data.terminal_cost = Arc::new(f);
        self
    }

    pub fn build(self) -> Result<GnfData> {
        let d = self.data;
        if d.state_dim == 0 || d.dm_dims.is_empty() || d.dm_dims.contains(&0) {
            return Err(Error::InvalidProblem(
                "state and decision-maker dimensions must be positive".into(),
            ));
        }
        if !(d.horizon.is_finite() && d.horizon > 0.0) {
            return Err(Error::InvalidProblem(
                "horizon must be finite and positive".into(),
            ));
        }
        if d.x0.len() != d.state_dim {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: d.state_dim,
                actual: d.x0.len(),
            });
        }
        Ok(d)
    }
}

fn check_subspaces(nodes: usize, num_dms: usize, subspaces: &[InfoSubspace]) -> Result<()> {
    if subspaces.len() != num_dms {
        return Err(Error::DimensionMismatch {
            context: "subspace list",
            expected: num_dms,
            actual: subspaces.len(),
        });
    }
    for s in subspaces {
        if s.nodes() != nodes {
            return Err(Error::GridMismatch {
                context: "subspace nodes",
                lhs: nodes,
                rhs: s.nodes(),
            });
        }
    }
    Ok(())
}

fn project_paths(sub: &InfoSubspace, values: Vec<DVector<f64>>) -> Result<Vec<DVector<f64>>> {
    sub.project_samples(&values)
}

/// One Gauss-Seidel pass of the explicit stationarity update for
/// drift-plus-input-affine data: for each decision maker in turn,
/// u^i = -{P_i(R_ii)}^-1 {P_i(eta^i) + sum_j P_i(R_ij u^j) + P_i(g^i' psi)}
/// nodewise, where P_i projects paths onto that decision maker's subspace
/// and blocks of already-updated decision makers enter with their new values.
pub fn gnf_strategy_update(
    gnf: &GnfData,
    x: &Trajectory,
    psi: &Trajectory,
    current: &StrategyProfile,
    subspaces: &[InfoSubspace],
    grid: &TimeGrid,
) -> Result<StrategyProfile> {
    let nodes = grid.len();
    check_subspaces(nodes, gnf.num_dms(), subspaces)?;
    if x.len() != nodes || psi.len() != nodes {
        return Err(Error::GridMismatch {
            context: "gnf update paths",
            lhs: nodes,
            rhs: x.len().min(psi.len()),
        });
    }
    if current.nodes() != nodes || current.num_dms() != gnf.num_dms() {
        return Err(Error::GridMismatch {
            context: "gnf update profile",
            lhs: nodes,
            rhs: current.nodes(),
        });
    }

    let d = gnf.control_dim();
    // coefficient paths evaluated once per node
    let rs: Vec<DMatrix<f64>> = (0..nodes)
        .map(|k| (gnf.control_weight)(grid.node(k), x.value(k)))
        .collect();
    let etas: Vec<DVector<f64>> = (0..nodes)
        .map(|k| (gnf.control_offset)(grid.node(k), x.value(k)))
        .collect();
    let gs: Vec<DMatrix<f64>> = (0..nodes)
        .map(|k| (gnf.input_matrix)(grid.node(k), x.value(k)))
        .collect();
    for (k, (rk, (ek, gk))) in rs.iter().zip(etas.iter().zip(&gs)).enumerate() {
        if rk.nrows() != d
            || rk.ncols() != d
            || ek.len() != d
            || gk.nrows() != gnf.state_dim()
            || gk.ncols() != d
        {
            return Err(Error::DimensionMismatch {
                context: "gnf coefficient",
                expected: d,
                actual: rk.nrows().max(ek.len()),
            });
        }
        if !(rk.iter().all(|c| c.is_finite())
            && ek.iter().all(|c| c.is_finite())
            && gk.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFiniteEval {
                context: "gnf coefficient",
                t: grid.node(k),
            });
        }
    }

    let mut blocks: Vec<Vec<DVector<f64>>> = (0..gnf.num_dms())
        .map(|i| current.realized(i).to_vec())
        .collect();

    for i in 0..gnf.num_dms() {
        let bi = gnf.dm_block(i);
        let di = bi.len();

        // projected entries of the own control-weight block, node by node
        let rii_raw: Vec<DVector<f64>> = (0..nodes)
            .map(|k| {
                let block = rs[k].view((bi.start, bi.start), (di, di)).into_owned();
                mat_to_vec(&block)
            })
            .collect();
        let rii_proj = project_paths(&subspaces[i], rii_raw)?;

        let eta_raw: Vec<DVector<f64>> = (0..nodes)
            .map(|k| etas[k].rows(bi.start, di).into_owned())
            .collect();
        let eta_proj = project_paths(&subspaces[i], eta_raw)?;

        let gpsi_raw: Vec<DVector<f64>> = (0..nodes)
            .map(|k| {
                let gi = gs[k].columns(bi.start, di);
                gi.transpose() * psi.value(k)
            })
            .collect();
        let gpsi_proj = project_paths(&subspaces[i], gpsi_raw)?;

        let mut cross_proj: Vec<Vec<DVector<f64>>> = Vec::new();
        for j in 0..gnf.num_dms() {
            if j == i {
                continue;
            }
            let bj = gnf.dm_block(j);
            let raw: Vec<DVector<f64>> = (0..nodes)
                .map(|k| {
                    let rij = rs[k].view((bi.start, bj.start), (di, bj.len()));
                    rij * &blocks[j][k]
                })
                .collect();
            cross_proj.push(project_paths(&subspaces[i], raw)?);
        }

        let mut new_block = Vec::with_capacity(nodes);
        for k in 0..nodes {
            let rii = vec_to_mat(&rii_proj[k], di, di);
            let mut rhs = eta_proj[k].clone() + &gpsi_proj[k];
            for c in &cross_proj {
                rhs += &c[k];
            }
            let lu = rii.lu();
            match lu.solve(&(-rhs)) {
                Some(sol) => new_block.push(sol),
                None => return Err(Error::SingularBlock { dm: i, node: k }),
            }
        }
        blocks[i] = new_block;
    }

    let strategies = blocks.iter().map(|b| DmStrategy::Grid(b.clone())).collect();
    Ok(StrategyProfile::from_parts(strategies, blocks, nodes))
}

/// Damped fixed-point iteration for the decentralized linear-quadratic team:
/// sweep the state forward, rebuild the affine costate representation, apply
/// the explicit per-decision-maker update
/// u^i = -R_ii^-1 [B^i' P_i(psi) + sum_j R_ij P_i(u^j) + E^i P_i(x) + m^i]
/// with relaxation `opts.damping`, and stop when the successive-iterate gap
/// falls below `opts.tol`. Deterministic coefficients multiply outside the
/// projections; only the path quantities psi, u, x are projected.
pub fn solve_decentralized_lq(
    lq: &LqData,
    subspaces: &[InfoSubspace],
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<(StrategyProfile, AdjointRep, SolveReport)> {
    opts.check()?;
    lq.validate(grid)?;
    let nodes = grid.len();
    check_subspaces(nodes, lq.num_dms(), subspaces)?;

    let d = lq.control_dim();
    let times = grid.nodes();
    let weights = grid.trapezoid_weights();
    let sigma = solve_sigma(lq, grid)?;

    // nodewise coefficients reused across iterations
    let r_path: Vec<DMatrix<f64>> = times
        .iter()
        .map(|&t| lq.control_weight_at(t))
        .collect::<Result<_>>()?;
    let b_path: Vec<DMatrix<f64>> = times
        .iter()
        .map(|&t| lq.input_matrix_at(t))
        .collect::<Result<_>>()?;
    let e_path: Vec<DMatrix<f64>> = times
        .iter()
        .map(|&t| lq.cross_weight_at(t))
        .collect::<Result<_>>()?;
    let m_path: Vec<DVector<f64>> = times
        .iter()
        .map(|&t| lq.control_offset_at(t))
        .collect::<Result<_>>()?;

    let mut u: Vec<DVector<f64>> = vec![DVector::zeros(d); nodes];
    let mut cost_history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut last_gap = f64::INFINITY;
    let mut growth_streak = 0usize;
    let mut first_gap: Option<f64> = None;

    while iterations < opts.max_iterations {
        let u_traj = Trajectory::new(times.clone(), u.clone())?;
        let x = lq.integrate_forward(&u_traj, grid)?;
        let beta = solve_beta(lq, &sigma, &u_traj, grid)?;
        let psi: Vec<DVector<f64>> = (0..nodes)
            .map(|k| &sigma[k] * x.value(k) + &beta[k])
            .collect();
        cost_history.push(lq.cost_of(&u_traj, &x, grid)?);

        // per decision maker: project the path quantities, then combine
        let mut target = vec![DVector::zeros(d); nodes];
        for i in 0..lq.num_dms() {
            let bi = lq.dm_block(i);
            let di = bi.len();
            let psi_proj = project_paths(&subspaces[i], psi.clone())?;
            let x_proj = project_paths(&subspaces[i], x.values().to_vec())?;
            let mut cross: Vec<DVector<f64>> = vec![DVector::zeros(di); nodes];
            for j in 0..lq.num_dms() {
                if j == i {
                    continue;
                }
                let bj = lq.dm_block(j);
                let uj: Vec<DVector<f64>> = (0..nodes)
                    .map(|k| u[k].rows(bj.start, bj.len()).into_owned())
                    .collect();
                let uj_proj = project_paths(&subspaces[i], uj)?;
                for k in 0..nodes {
                    let rij = r_path[k].view((bi.start, bj.start), (di, bj.len()));
                    cross[k] += rij * &uj_proj[k];
                }
            }
            for k in 0..nodes {
                let rii = r_path[k].view((bi.start, bi.start), (di, di)).into_owned();
                let bti = b_path[k].columns(bi.start, di).transpose() * &psi_proj[k];
                let exi = e_path[k].rows(bi.start, di) * &x_proj[k];
                let mi = m_path[k].rows(bi.start, di).into_owned();
                let rhs = bti + exi + mi + &cross[k];
                let sol = rii
                    .lu()
                    .solve(&(-rhs))
                    .ok_or(Error::SingularBlock { dm: i, node: k })?;
                target[k].rows_mut(bi.start, di).copy_from(&sol);
            }
        }

        let gamma = opts.damping;
        let mut gap_sq = 0.0;
        let mut next = Vec::with_capacity(nodes);
        for k in 0..nodes {
            let nk = &u[k] * (1.0 - gamma) + &target[k] * gamma;
            let diff = &nk - &u[k];
            gap_sq += weights[k] * diff.dot(&diff);
            next.push(nk);
        }
        let gap = gap_sq.max(0.0).sqrt();
        u = next;
        iterations += 1;

        if !gap.is_finite() {
            return Err(Error::FixedPointDiverged { iterations, gap });
        }
        let reference = *first_gap.get_or_insert(gap.max(f64::MIN_POSITIVE));
        if gap > last_gap {
            growth_streak += 1;
        } else {
            growth_streak = 0;
        }
        if growth_streak >= 30 && gap > reference {
            return Err(Error::FixedPointDiverged { iterations, gap });
        }
        last_gap = gap;

        if gap <= opts.tol {
            converged = true;
            break;
        }
    }

    // final sweeps for the converged control
    let u_traj = Trajectory::new(times.clone(), u.clone())?;
    let x = lq.integrate_forward(&u_traj, grid)?;
    let beta = solve_beta(lq, &sigma, &u_traj, grid)?;
    let rep = AdjointRep::new(times.clone(), sigma, beta)?;
    let psi = rep.costate(&x)?;
    let cost = lq.cost_of(&u_traj, &x, grid)?;
    cost_history.push(cost);

    // stationarity residual from the projected control-gradient blocks
    let mut rho: f64 = 0.0;
    let mut projected_blocks: Vec<Vec<DVector<f64>>> = Vec::new();
    for i in 0..lq.num_dms() {
        let bi = lq.dm_block(i);
        let raw: Vec<DVector<f64>> = (0..nodes)
            .map(|k| {
                let hu = &r_path[k] * &u[k]
                    + &e_path[k] * x.value(k)
                    + &m_path[k]
                    + b_path[k].transpose() * psi.value(k);
                hu.rows(bi.start, bi.len()).into_owned()
            })
            .collect();
        projected_blocks.push(project_paths(&subspaces[i], raw)?);
    }
    for k in 0..nodes {
        let mut sq = 0.0;
        for blocks in &projected_blocks {
            sq += blocks[k].dot(&blocks[k]);
        }
        rho = rho.max(sq.sqrt());
    }

    // package the profile; span-restricted blocks keep their coefficients
    let mut strategies = Vec::with_capacity(lq.num_dms());
    let mut realized = Vec::with_capacity(lq.num_dms());
    for i in 0..lq.num_dms() {
        let bi = lq.dm_block(i);
        let block: Vec<DVector<f64>> = (0..nodes)
            .map(|k| u[k].rows(bi.start, bi.len()).into_owned())
            .collect();
        match &subspaces[i] {
            InfoSubspace::Full { .. } => {
                strategies.push(DmStrategy::Grid(block.clone()));
                realized.push(block);
            }
            InfoSubspace::Span(basis) => {
                let theta = basis.coefficients_of(&block)?;
                let fitted = basis.synthesize(&theta)?;
                strategies.push(DmStrategy::Basis(theta));
                realized.push(fitted);
            }
        }
    }
    let profile = StrategyProfile::from_parts(strategies, realized, nodes);

    let report = SolveReport {
        iterations,
        cost,
        residual: rho,
        converged,
        cost_history,
        sufficiency: None,
    };
    Ok((profile, rep, report))
}
