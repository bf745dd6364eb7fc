//! Verification suites: quantitative reproduction of the 1D bounce
//! reference scenario and finite-difference oracles for the smooth and
//! hybrid sensitivity computations.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use sac::benchmarks::{
    bouncing_ball, bouncing_mass_1d, cart_pendulum_reduced, double_integrator, GRAVITY,
    BOUNCE1D_TF,
};
use sac::control::{mode_insertion_gradient, simulate_adjoint};
use sac::dynamics::{HybridModel, StateVec, SystemModel};
use sac::hybrid::{
    eval_hybrid_cost, hybrid_sensitivity, needle_seed, propagate_variation,
    simulate_hybrid_adjoint, transition_time_derivative,
};
use sac::integrator::{integrate_hybrid, integrate_smooth};
use sac::objectives::{QuadraticTrackingCost, StateWeight};
use sac::{Result, SacError};

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn abs(name: &str, value: f64, expected: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            expected,
            tolerance,
            pass: (value - expected).abs() <= tolerance,
        }
    }

    fn rel(name: &str, value: f64, expected: f64, rel_tol: f64) -> Self {
        Check {
            name: name.into(),
            value,
            expected,
            tolerance: rel_tol * expected.abs(),
            pass: (value - expected).abs() <= rel_tol * expected.abs(),
        }
    }
}

fn bounce_cost() -> QuadraticTrackingCost {
    // The reference integrates x'Qx with Q = Diag[200, 0.01]; the
    // half-weighted tracking form doubles the weights to match.
    QuadraticTrackingCost::new(
        StateWeight::Constant(DMatrix::from_diagonal(&DVector::from_row_slice(&[
            400.0, 0.02,
        ]))),
        DMatrix::zeros(2, 2),
        Box::new(|_t, _x: &StateVec| DVector::zeros(2)),
    )
}

/// The 1D bounce scenario: a unit mass dropped from 1 m with a needle
/// perturbation w = -5 at tau = 0.1 s.
pub fn bounce1d_suite() -> Result<Vec<Check>> {
    let model = bouncing_mass_1d();
    let cost = bounce_cost();
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    let (tau, w, u1) = (0.1, DVector::from_element(1, -5.0), DVector::zeros(1));
    let epsilon = 0.1;

    let ht = integrate_hybrid(
        &model,
        0,
        &x0,
        &|_t| DVector::zeros(1),
        (0.0, BOUNCE1D_TF),
        1e-5,
        10,
    )?;
    let adjoint = simulate_hybrid_adjoint(&model, &cost, &ht)?;
    let (nu_a, nu_f) = hybrid_sensitivity(&model, &cost, &ht, &adjoint, tau, &w, &u1)?;

    let mut checks = vec![
        Check::abs("nu_tf_adjoint_route", nu_a, 4.0, 0.02),
        Check::abs("nu_tf_forward_route", nu_f, 4.0, 0.02),
    ];

    // Variational reset map at the impact state.
    let t_im = ht.transition_times[0];
    let x_minus = ht.segments[0].1.final_state().clone();
    let f_minus = model.location(0).eval_dynamics(t_im, &x_minus, &u1)?;
    let x_plus = model.apply_reset(0, 1, &x_minus)?;
    let f_plus = model.location(1).eval_dynamics(t_im, &x_plus, &u1)?;
    let pi = model.variational_reset(0, 1, &x_minus, &f_minus, &f_plus)?;
    let zdot = -(2.0 * GRAVITY).sqrt();
    checks.push(Check::abs("pi_00", pi[(0, 0)], -1.0, 1e-9));
    checks.push(Check::abs("pi_01", pi[(0, 1)], 0.0, 1e-9));
    checks.push(Check::abs("pi_10", pi[(1, 0)], -2.0 * GRAVITY / zdot, 1e-9));
    checks.push(Check::abs("pi_11", pi[(1, 1)], -1.0, 1e-9));

    // Transition-time sensitivity: propagate the needle variation to the
    // impact and apply the first-order shift formula.
    let seed = needle_seed(&model, &ht, tau, &w, &u1)?;
    let record = propagate_variation(&model, &cost, &ht, tau, &seed)?;
    let (_, psibar_minus) = record
        .iter()
        .find(|(t, _)| *t == t_im)
        .expect("impact instant recorded");
    let psi_minus = psibar_minus.rows(1, 2).clone_owned();
    let dt_deps = transition_time_derivative(&model, 0, 1, &x_minus, &f_minus, &psi_minus)?;
    checks.push(Check::rel("d_impact_time_d_epsilon", dt_deps, -0.4, 0.01));
    checks.push(Check::abs(
        "impact_time_shift",
        epsilon * dt_deps,
        -0.04,
        0.005,
    ));
    Ok(checks)
}

fn smooth_fd_check(
    name: &str,
    model: &SystemModel,
    x0: &StateVec,
    tau: f64,
    w: &DVector<f64>,
) -> Result<Check> {
    let q = DMatrix::from_diagonal(&DVector::from_element(model.state_dim(), 1.0));
    let cost = QuadraticTrackingCost::new(
        StateWeight::Constant(q),
        DMatrix::identity(model.state_dim(), model.state_dim()),
        Box::new(|_t, _x: &StateVec| DVector::zeros(2)),
    );
    let u1 = DVector::zeros(1);
    let span = (0.0, 1.0);
    let dt = 1e-5;
    let lambda = 1e-4;

    let traj = integrate_smooth(model, x0, &|_t| DVector::zeros(1), span, dt)?;
    let adjoint = simulate_adjoint(model, &cost, &traj)?;
    let rho = adjoint.sample(tau)?;
    let x_tau = traj.sample_state(tau)?;
    let nu = mode_insertion_gradient(model, tau, &x_tau, &rho, &u1, w)?;

    let j0 = cost.eval_cost(&traj)?;
    let pert = integrate_smooth(
        model,
        x0,
        &|t| {
            if t >= tau && t < tau + lambda {
                w.clone()
            } else {
                DVector::zeros(1)
            }
        },
        span,
        dt,
    )?;
    let j1 = cost.eval_cost(&pert)?;
    let fd = (j1 - j0) / lambda;
    Ok(Check::rel(name, fd, nu, 0.05))
}

fn ball_fd_check(seed: u64) -> Result<Check> {
    let model: HybridModel = bouncing_ball();
    let q = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 1.0, 0.1, 0.1]));
    let cost = QuadraticTrackingCost::new(
        StateWeight::Constant(q),
        DMatrix::zeros(4, 4),
        Box::new(|_t, _x: &StateVec| DVector::zeros(4)),
    );
    let x0 = DVector::from_vec(vec![0.0, 0.5, 0.3, 0.0]);
    let u1 = DVector::zeros(2);
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).max(1);
    let mut rand = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    let w = DVector::from_vec(vec![-4.0 + 8.0 * rand(), -8.0 * rand()]);
    let tau = 0.05 + 0.15 * rand(); // before the first impact at ~0.32 s
    let tau = (tau / 1e-5).round() * 1e-5;
    let span = (0.0, 0.6);
    let dt = 1e-5;
    let lambda = 1e-4;

    let ht = integrate_hybrid(&model, 0, &x0, &|_t| DVector::zeros(2), span, dt, 10)?;
    let adjoint = simulate_hybrid_adjoint(&model, &cost, &ht)?;
    let (nu_a, _) = hybrid_sensitivity(&model, &cost, &ht, &adjoint, tau, &w, &u1)?;

    let j0 = eval_hybrid_cost(&cost, &ht)?;
    let pert = integrate_hybrid(
        &model,
        0,
        &x0,
        &|t| {
            if t >= tau && t < tau + lambda {
                w.clone()
            } else {
                DVector::zeros(2)
            }
        },
        span,
        dt,
        10,
    )?;
    let j1 = eval_hybrid_cost(&cost, &pert)?;
    let fd = (j1 - j0) / lambda;
    Ok(Check::rel("bouncing_ball_fd", fd, nu_a, 0.05))
}

/// Finite-difference agreement of the first-order cost sensitivities on the
/// cart-pendulum, double integrator, and bouncing ball.
pub fn gradient_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    checks.push(smooth_fd_check(
        "cart_pendulum_fd",
        &cart_pendulum_reduced(),
        &DVector::from_vec(vec![std::f64::consts::PI - 0.8, 0.5]),
        0.35,
        &DVector::from_element(1, 6.0),
    )?);
    checks.push(smooth_fd_check(
        "double_integrator_fd",
        &double_integrator(),
        &DVector::from_vec(vec![1.0, -0.5]),
        0.25,
        &DVector::from_element(1, -3.0),
    )?);
    checks.push(ball_fd_check(seed)?);
    Ok(checks)
}

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<Check>> {
    match name {
        "bounce1d" => bounce1d_suite(),
        "gradient" => gradient_suite(seed),
        other => Err(SacError::Usage(format!("unknown verify suite '{other}'"))),
    }
}
