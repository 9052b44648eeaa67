use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::Trajectory;

/// Scalar feature of the pair (time, observation path up to that time).
pub type FeatureFn = Arc<dyn Fn(f64, &Trajectory) -> f64 + Send + Sync>;
/// Scalar function of time only.
pub type BasisFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// What a decision maker is allowed to condition its control on. Strategies
/// are restricted to the span of the induced scalar features, applied to each
/// control coordinate independently; [`InfoSpec::OpenLoop`] leaves the control
/// unrestricted.
#[derive(Clone)]
pub enum InfoSpec {
    /// No restriction: any nodewise control path.
    OpenLoop,
    /// Affine functions of the current observation: span of {1, y_1, .., y_q}.
    ClosedLoopMarkov,
    /// Span of user-supplied features of (t, observation path).
    ClosedLoopFeedback { features: Vec<FeatureFn> },
    /// Span of explicit functions of time, independent of observations.
    FiniteBasis { basis: Vec<BasisFn> },
}

impl fmt::Debug for InfoSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::OpenLoop => write!(f, "OpenLoop"),
            Self::ClosedLoopMarkov => write!(f, "ClosedLoopMarkov"),
            Self::ClosedLoopFeedback { features } => {
                write!(f, "ClosedLoopFeedback({} features)", features.len())
            }
            Self::FiniteBasis { basis } => write!(f, "FiniteBasis({} functions)", basis.len()),
        }
    }
}

impl InfoSpec {
    pub fn feedback<F>(features: Vec<F>) -> Self
    where
        F: Fn(f64, &Trajectory) -> f64 + Send + Sync + 'static,
    {
        Self::ClosedLoopFeedback {
            features: features
                .into_iter()
                .map(|f| Arc::new(f) as FeatureFn)
                .collect(),
        }
    }

    pub fn basis<F>(fns: Vec<F>) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::FiniteBasis {
            basis: fns.into_iter().map(|f| Arc::new(f) as BasisFn).collect(),
        }
    }

    /// Constant strategies only.
    pub fn constant() -> Self {
        Self::basis(vec![|_t: f64| 1.0])
    }

    /// Whether the induced subspace changes with the observation path.
    pub fn is_observation_dependent(&self) -> bool {
        matches!(
            self,
            Self::ClosedLoopMarkov | Self::ClosedLoopFeedback { .. }
        )
    }
}

/// Relative ridge added to the Gram matrix before factorization.
pub const GRAM_RIDGE_REL: f64 = 1e-10;
/// Eigenvalues below this fraction of the largest do not count toward rank.
pub const RANK_REL_TOL: f64 = 1e-12;

/// Nodewise realization of an information restriction: either the full space
/// or the span of finitely many scalar features sampled on the grid.
#[derive(Clone)]
pub enum InfoSubspace {
    Full { nodes: usize },
    Span(SpanBasis),
}

impl fmt::Debug for InfoSubspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full { nodes } => write!(f, "InfoSubspace::Full({nodes} nodes)"),
            Self::Span(b) => write!(
                f,
                "InfoSubspace::Span({} features, {} nodes, rank {})",
                b.dim(),
                b.nodes(),
                b.effective_rank()
            ),
        }
    }
}

/// Feature samples, quadrature weights, and the factorized (ridged) Gram
/// matrix of one restriction subspace.
#[derive(Clone)]
pub struct SpanBasis {
    /// nodes x m feature samples.
    features: DMatrix<f64>,
    weights: Vec<f64>,
    gram: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    ridge: f64,
    effective_rank: usize,
}

impl SpanBasis {
    fn build(features: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        let nodes = features.nrows();
        let m = features.ncols();
        if m == 0 {
            return Err(Error::InvalidProblem(
                "subspace needs at least one feature".into(),
            ));
        }
        if weights.len() != nodes {
            return Err(Error::GridMismatch {
                context: "subspace weights",
                lhs: nodes,
                rhs: weights.len(),
            });
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteEval {
                context: "feature sample",
                t: f64::NAN,
            });
        }
        let mut weighted = features.clone();
        for (k, w) in weights.iter().enumerate() {
            for s in 0..m {
                weighted[(k, s)] *= *w;
            }
        }
        let gram = features.transpose() * &weighted;
        let ridge = GRAM_RIDGE_REL * gram.trace() / m as f64;
        let mut ridged = gram.clone();
        for s in 0..m {
            ridged[(s, s)] += ridge;
        }
        let chol = Cholesky::new(ridged).ok_or_else(|| {
            Error::InvalidProblem("information features vanish on the grid".into())
        })?;
        let eigen = gram.clone().symmetric_eigenvalues();
        let max_ev = eigen.iter().cloned().fold(0.0_f64, f64::max);
        let effective_rank = if max_ev <= 0.0 {
            0
        } else {
            eigen
                .iter()
                .filter(|&&ev| ev > RANK_REL_TOL * max_ev)
                .count()
        };
        Ok(Self {
            features,
            weights,
            gram,
            chol,
            ridge,
            effective_rank,
        })
    }

    pub fn nodes(&self) -> usize {
        self.features.nrows()
    }

    /// Number of scalar features spanning the subspace.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Number of Gram eigenvalues carrying numerical weight; smaller than
    /// [`Self::dim`] exactly when the features are dependent on this grid.
    pub fn effective_rank(&self) -> usize {
        self.effective_rank
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.effective_rank < self.dim()
    }

    pub fn feature(&self, node: usize, s: usize) -> f64 {
        self.features[(node, s)]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Least-squares coefficients of nodewise samples, one column per
    /// sample coordinate: solves (G + ridge I) theta = Phi^T W Y.
    pub fn coefficients_of(&self, samples: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let y = self.sample_matrix(samples)?;
        let mut rhs = DMatrix::zeros(self.dim(), y.ncols());
        for s in 0..self.dim() {
            for c in 0..y.ncols() {
                let mut acc = 0.0;
                for k in 0..self.nodes() {
                    acc += self.weights[k] * self.features[(k, s)] * y[(k, c)];
                }
                rhs[(s, c)] = acc;
            }
        }
        Ok(self.chol.solve(&rhs))
    }

    /// Nodewise values of the span element with the given coefficients.
    pub fn synthesize(&self, coeffs: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
        if coeffs.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "span coefficients",
                expected: self.dim(),
                actual: coeffs.nrows(),
            });
        }
        let values = &self.features * coeffs;
        Ok((0..self.nodes())
            .map(|k| values.row(k).transpose())
            .collect())
    }

    fn sample_matrix(&self, samples: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        if samples.len() != self.nodes() {
            return Err(Error::GridMismatch {
                context: "projection input",
                lhs: self.nodes(),
                rhs: samples.len(),
            });
        }
        let d = samples[0].len();
        let mut y = DMatrix::zeros(self.nodes(), d);
        for (k, v) in samples.iter().enumerate() {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "projection input",
                    expected: d,
                    actual: v.len(),
                });
            }
            y.row_mut(k).copy_from(&v.transpose());
        }
        Ok(y)
    }
}

impl InfoSubspace {
    /// Span of explicit nodewise feature samples under the given quadrature
    /// weights (one row per node, one column per feature).
    pub fn from_feature_matrix(features: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        Ok(Self::Span(SpanBasis::build(features, weights)?))
    }

    pub fn full(nodes: usize) -> Self {
        Self::Full { nodes }
    }

    pub fn nodes(&self) -> usize {
        match self {
            Self::Full { nodes } => *nodes,
            Self::Span(b) => b.nodes(),
        }
    }

    pub fn span(&self) -> Option<&SpanBasis> {
        match self {
            Self::Full { .. } => None,
            Self::Span(b) => Some(b),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Self::Full { .. })
    }

    /// Orthogonal projection of nodewise samples, coordinate by coordinate.
    pub fn project_samples(&self, samples: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        match self {
            Self::Full { nodes } => {
                if samples.len() != *nodes {
                    return Err(Error::GridMismatch {
                        context: "projection input",
                        lhs: *nodes,
                        rhs: samples.len(),
                    });
                }
                Ok(samples.to_vec())
            }
            Self::Span(b) => {
                let coeffs = b.coefficients_of(samples)?;
                b.synthesize(&coeffs)
            }
        }
    }
}

/// Builds the restriction subspace of one decision maker on a grid. `y` is
/// that decision maker's observation path sampled on the same grid; it is
/// ignored by [`InfoSpec::OpenLoop`] and [`InfoSpec::FiniteBasis`]. `dm` only
/// labels errors.
pub fn build_subspace(
    spec: &InfoSpec,
    dm: usize,
    y: &Trajectory,
    grid: &TimeGrid,
) -> Result<InfoSubspace> {
    let nodes = grid.len();
    let weights = grid.trapezoid_weights();
    match spec {
        InfoSpec::OpenLoop => Ok(InfoSubspace::full(nodes)),
        InfoSpec::ClosedLoopMarkov => {
            if y.len() != nodes {
                return Err(Error::GridMismatch {
                    context: "observation path",
                    lhs: nodes,
                    rhs: y.len(),
                });
            }
            let q = y.dim();
            let features =
                DMatrix::from_fn(
                    nodes,
                    q + 1,
                    |k, s| {
                        if s == 0 {
                            1.0
                        } else {
                            y.value(k)[s - 1]
                        }
                    },
                );
            InfoSubspace::from_feature_matrix(features, weights)
        }
        InfoSpec::ClosedLoopFeedback { features } => {
            if features.is_empty() {
                return Err(Error::EmptyBasis { dm });
            }
            if y.len() != nodes {
                return Err(Error::GridMismatch {
                    context: "observation path",
                    lhs: nodes,
                    rhs: y.len(),
                });
            }
            let mat = DMatrix::from_fn(nodes, features.len(), |k, s| features[s](grid.node(k), y));
            InfoSubspace::from_feature_matrix(mat, weights)
        }
        InfoSpec::FiniteBasis { basis } => {
            if basis.is_empty() {
                return Err(Error::EmptyBasis { dm });
            }
            let mat = DMatrix::from_fn(nodes, basis.len(), |k, s| basis[s](grid.node(k)));
            InfoSubspace::from_feature_matrix(mat, weights)
        }
    }
}

/// Projects a trajectory onto the subspace, node for node.
pub fn project(subspace: &InfoSubspace, traj: &Trajectory) -> Result<Trajectory> {
    if traj.len() != subspace.nodes() {
        return Err(Error::GridMismatch {
            context: "projection input",
            lhs: subspace.nodes(),
            rhs: traj.len(),
        });
    }
    let values = subspace.project_samples(traj.values())?;
    Trajectory::new(traj.times().to_vec(), values)
}

/// Weighted inner product of two nodewise sample paths.
pub fn weighted_inner(weights: &[f64], a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    weights
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (va, vb))| w * va.dot(vb))
        .sum()
}

/// Weighted L2 norm of a nodewise sample path.
pub fn weighted_norm(weights: &[f64], a: &[DVector<f64>]) -> f64 {
    weighted_inner(weights, a, a).max(0.0).sqrt()
}
