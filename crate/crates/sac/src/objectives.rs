//! Quadratic state-tracking objectives with optional state-dependent
//! weights, angle wrapping, and the fixed comparison metric used when
//! scoring closed-loop runs.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{ControlVec, StateVec};
use crate::error::{Result, SacError};
use crate::integrator::Trajectory;

/// Running-cost state weight: either a constant PSD matrix or a
/// state-dependent weight with an exact quadratic-form gradient.
pub enum StateWeight {
    Constant(DMatrix<f64>),
    /// `weight(t, x)` returns Q(x); `weight_grad_quad(t, x, e)` returns the
    /// vector whose k-th entry is (1/2) e' (dQ/dx_k) e, the extra chain-rule
    /// term in the running-cost gradient.
    StateDependent {
        weight: Box<dyn Fn(f64, &StateVec) -> DMatrix<f64>>,
        weight_grad_quad: Box<dyn Fn(f64, &StateVec, &DVector<f64>) -> DVector<f64>>,
    },
}

impl StateWeight {
    pub fn eval(&self, t: f64, x: &StateVec) -> DMatrix<f64> {
        match self {
            StateWeight::Constant(q) => q.clone(),
            StateWeight::StateDependent { weight, .. } => weight(t, x),
        }
    }
}

/// Tracking objective
///   J = (1/2) \int (x - x_d)' Q (x - x_d) dt
///     + (1/2) (x(tf) - x_d(tf))' P1 (x(tf) - x_d(tf)),
/// with selected error coordinates wrapped to [-pi, pi).
pub struct QuadraticTrackingCost {
    pub q: StateWeight,
    pub p1: DMatrix<f64>,
    /// Reference signal; receives the current state so references may be
    /// scheduled on the state (terrain-following targets).
    pub desired: Box<dyn Fn(f64, &StateVec) -> StateVec>,
    /// Indices of state coordinates that are angles; tracking errors in
    /// these coordinates are wrapped to [-pi, pi).
    pub angle_indices: Vec<usize>,
}

/// Wraps an angle to [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

impl QuadraticTrackingCost {
    pub fn new(
        q: StateWeight,
        p1: DMatrix<f64>,
        desired: Box<dyn Fn(f64, &StateVec) -> StateVec>,
    ) -> Self {
        Self {
            q,
            p1,
            desired,
            angle_indices: Vec::new(),
        }
    }

    pub fn with_angle_indices(mut self, idx: Vec<usize>) -> Self {
        self.angle_indices = idx;
        self
    }

    /// Tracking error with angle coordinates wrapped.
    pub fn error(&self, t: f64, x: &StateVec) -> StateVec {
        let xd = (self.desired)(t, x);
        let mut e = x - xd;
        for &i in &self.angle_indices {
            e[i] = wrap_angle(e[i]);
        }
        e
    }

    /// Incremental (running) cost l1(t, x).
    pub fn incremental_cost(&self, t: f64, x: &StateVec) -> f64 {
        let e = self.error(t, x);
        let q = self.q.eval(t, x);
        0.5 * e.dot(&(&q * &e))
    }

    /// Gradient of the running cost with respect to the state, including the
    /// chain-rule term from a state-dependent weight. The reference is
    /// treated as exogenous even when scheduled on the state.
    pub fn incremental_gradient(&self, t: f64, x: &StateVec) -> DVector<f64> {
        let e = self.error(t, x);
        let q = self.q.eval(t, x);
        let mut g = &q * &e;
        if let StateWeight::StateDependent {
            weight_grad_quad, ..
        } = &self.q
        {
            g += weight_grad_quad(t, x, &e);
        }
        g
    }

    /// Terminal cost m(x(tf)).
    pub fn terminal_cost(&self, t: f64, x: &StateVec) -> f64 {
        let e = self.error(t, x);
        0.5 * e.dot(&(&self.p1 * &e))
    }

    /// Gradient of the terminal cost.
    pub fn terminal_gradient(&self, t: f64, x: &StateVec) -> DVector<f64> {
        let e = self.error(t, x);
        &self.p1 * &e
    }

    /// Total cost of a stored trajectory: trapezoidal quadrature of the
    /// running cost plus the terminal term.
    pub fn eval_cost(&self, traj: &Trajectory) -> Result<f64> {
        if traj.len() < 2 {
            return Err(SacError::Usage(
                "cost evaluation needs at least two trajectory nodes".into(),
            ));
        }
        let mut total = 0.0;
        let mut prev = self.incremental_cost(traj.times[0], &traj.states[0]);
        for k in 1..traj.len() {
            let cur = self.incremental_cost(traj.times[k], &traj.states[k]);
            total += 0.5 * (prev + cur) * (traj.times[k] - traj.times[k - 1]);
            prev = cur;
        }
        total += self.terminal_cost(traj.end_time(), traj.final_state());
        if !total.is_finite() {
            return Err(SacError::NonFinite {
                context: "trajectory cost".into(),
                time: traj.end_time(),
            });
        }
        Ok(total)
    }
}

/// Fixed benchmark score
///   J = (1/2) \int (x - x_d)' Q (x - x_d) + u' R u dt
/// over a stored closed-loop trajectory (trapezoidal quadrature). Angle
/// indices wrap the tracking error as in the tracking cost.
pub fn eval_comparison_metric(
    traj: &Trajectory,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    desired: &dyn Fn(f64) -> StateVec,
    angle_indices: &[usize],
) -> Result<f64> {
    if traj.len() < 2 {
        return Err(SacError::Usage(
            "metric evaluation needs at least two trajectory nodes".into(),
        ));
    }
    let integrand = |t: f64, x: &StateVec, u: &ControlVec| -> f64 {
        let mut e = x - desired(t);
        for &i in angle_indices {
            e[i] = wrap_angle(e[i]);
        }
        0.5 * (e.dot(&(q * &e)) + u.dot(&(r * u)))
    };
    let mut total = 0.0;
    let mut prev = integrand(traj.times[0], &traj.states[0], &traj.controls[0]);
    for k in 1..traj.len() {
        let cur = integrand(traj.times[k], &traj.states[k], &traj.controls[k]);
        total += 0.5 * (prev + cur) * (traj.times[k] - traj.times[k - 1]);
        prev = cur;
    }
    Ok(total)
}
