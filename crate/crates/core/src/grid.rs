use crate::error::{Error, Result};

/// Uniform partition of `[0, horizon]` into `steps` intervals (`steps + 1` nodes).
///
/// Node `k` is computed as `horizon * k / steps` so the final node equals the
/// horizon exactly in floating point.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

/// Nodes per unit horizon used when no grid is specified.
pub const DEFAULT_STEPS_PER_UNIT: usize = 200;

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "horizon must be finite and positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidProblem("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    /// Grid with [`DEFAULT_STEPS_PER_UNIT`] steps per unit of horizon.
    pub fn default_for(horizon: f64) -> Result<Self> {
        let steps = (horizon * DEFAULT_STEPS_PER_UNIT as f64).ceil().max(1.0) as usize;
        Self::new(horizon, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.horizon * (k as f64) / (self.steps as f64)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Trapezoid quadrature weights over the nodes; they sum to the horizon.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let h = self.step_size();
        (0..=self.steps)
            .map(|k| {
                if k == 0 || k == self.steps {
                    0.5 * h
                } else {
                    h
                }
            })
            .collect()
    }

    /// Trapezoid quadrature of nodewise samples.
    pub fn trapezoid(&self, samples: &[f64]) -> Result<f64> {
        if samples.len() != self.len() {
            return Err(Error::GridMismatch {
                context: "trapezoid quadrature",
                lhs: self.len(),
                rhs: samples.len(),
            });
        }
        let h = self.step_size();
        let mut acc = 0.5 * (samples[0] + samples[self.steps]);
        for s in &samples[1..self.steps] {
            acc += s;
        }
        Ok(acc * h)
    }
}
