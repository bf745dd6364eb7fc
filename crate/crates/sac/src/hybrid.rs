//! First-order machinery for systems with guarded resets: cost augmentation
//! into Mayer form, the jump-corrected adjoint and variational equations,
//! hybrid cost sensitivities, and the hybrid sequential-action loop.

use nalgebra::{DMatrix, DVector};

use crate::control::{
    choose_alpha_d, line_search_duration, optimal_action_schedule_nodes, saturate_action,
    search_application_time, Action, ActionSchedule, SacParams, SacStepInfo, SacStepOutcome,
};
use crate::dynamics::{ControlVec, HybridModel, StateVec, GRAZING_TOL};
use crate::error::{Result, SacError};
use crate::integrator::{
    integrate_hybrid, rk4_step, HybridTrajectory, Side, Trajectory, MAX_TRANSITIONS_HORIZON,
    MAX_TRANSITIONS_RUN,
};
use crate::objectives::QuadraticTrackingCost;

/// Views a hybrid model and a running cost as one Mayer-form system on the
/// augmented state (y, x) with ydot = l1(t, x). All first-order objects
/// (state matrix, reset Jacobian) carry the extra cost coordinate in row
/// and column 0.
pub struct MayerAugmentedModel<'a> {
    pub model: &'a HybridModel,
    pub cost: &'a QuadraticTrackingCost,
}

impl<'a> MayerAugmentedModel<'a> {
    pub fn new(model: &'a HybridModel, cost: &'a QuadraticTrackingCost) -> Self {
        Self { model, cost }
    }

    pub fn augmented_dim(&self) -> usize {
        self.model.location(0).state_dim() + 1
    }

    /// Augmented vector field (l1, f).
    pub fn drift(&self, q: usize, t: f64, x: &StateVec, u: &ControlVec) -> Result<DVector<f64>> {
        let f = self.model.location(q).eval_dynamics(t, x, u)?;
        let n = f.len();
        let mut out = DVector::zeros(n + 1);
        out[0] = self.cost.incremental_cost(t, x);
        out.rows_mut(1, n).copy_from(&f);
        Ok(out)
    }

    /// Augmented state matrix: first row (0, grad l1), first column zero,
    /// lower-right block the location's linearization.
    pub fn state_matrix(&self, q: usize, t: f64, x: &StateVec, u: &ControlVec) -> DMatrix<f64> {
        let sys = self.model.location(q);
        let a = sys
            .eval_linearization(t, x, u)
            .expect("linearization of the location dynamics");
        let n = a.nrows();
        let mut out = DMatrix::zeros(n + 1, n + 1);
        let grad = self.cost.incremental_gradient(t, x);
        for j in 0..n {
            out[(0, j + 1)] = grad[j];
        }
        out.view_mut((1, 1), (n, n)).copy_from(&a);
        out
    }

    /// Augmented reset Jacobian at a transition: the state block is the
    /// variational reset map, and the cost row picks up the jump in the
    /// running cost across the reset,
    ///   row 0 = [1, (l+ - l-) DPhi / (DPhi . f-)].
    pub fn reset_jacobian(
        &self,
        q_from: usize,
        q_to: usize,
        t: f64,
        x_minus: &StateVec,
        u: &ControlVec,
    ) -> Result<DMatrix<f64>> {
        let sys_from = self.model.location(q_from);
        let f_minus = sys_from.eval_dynamics(t, x_minus, u)?;
        let x_plus = self.model.apply_reset(q_from, q_to, x_minus)?;
        let sys_to = self.model.location(q_to);
        let f_plus = sys_to.eval_dynamics(t, &x_plus, u)?;
        let pi = self
            .model
            .variational_reset(q_from, q_to, x_minus, &f_minus, &f_plus)?;
        let tr = self.model.transition(q_from, q_to)?;
        let dphi = tr.guard_grad(x_minus);
        let denom = dphi.dot(&f_minus);
        if denom.abs() < GRAZING_TOL {
            return Err(SacError::GrazingImpact {
                value: denom.abs(),
                tolerance: GRAZING_TOL,
            });
        }
        let l_minus = self.cost.incremental_cost(t, x_minus);
        let l_plus = self.cost.incremental_cost(t, &x_plus);
        let n = x_minus.len();
        let mut out = DMatrix::zeros(n + 1, n + 1);
        out[(0, 0)] = 1.0;
        for j in 0..n {
            out[(0, j + 1)] = (l_plus - l_minus) * dphi[j] / denom;
        }
        out.view_mut((1, 1), (n, n)).copy_from(&pi);
        Ok(out)
    }
}

/// First-order change of the transition time under a state variation at the
/// pre-impact point: d(Delta t)/d(epsilon) = -(DPhi . psi) / (DPhi . f-).
pub fn transition_time_derivative(
    model: &HybridModel,
    q_from: usize,
    q_to: usize,
    x_minus: &StateVec,
    f_minus: &StateVec,
    psi_minus: &DVector<f64>,
) -> Result<f64> {
    let tr = model.transition(q_from, q_to)?;
    let dphi = tr.guard_grad(x_minus);
    let denom = dphi.dot(f_minus);
    if denom.abs() < GRAZING_TOL {
        return Err(SacError::GrazingImpact {
            value: denom.abs(),
            tolerance: GRAZING_TOL,
        });
    }
    Ok(-dphi.dot(psi_minus) / denom)
}

/// Adjoint of the augmented system stored per segment of a hybrid
/// trajectory. The cost component is constant 1 everywhere; the state
/// components jump by the transposed reset Jacobian at transitions.
pub struct HybridAdjoint {
    pub segments: Vec<crate::control::AdjointTrajectory>,
    pub transition_times: Vec<f64>,
}

impl HybridAdjoint {
    /// Samples the augmented adjoint; `side` resolves transition instants.
    pub fn sample(&self, t: f64, side: Side) -> Result<DVector<f64>> {
        for (i, seg) in self.segments.iter().enumerate() {
            let (a, b) = (seg.times[0], *seg.times.last().unwrap());
            let at_end = (t - b).abs() <= 1e-12;
            let is_last = i + 1 == self.segments.len();
            if (t >= a - 1e-12 && t < b - 1e-12)
                || (at_end && (side == Side::Minus || is_last))
            {
                return seg.sample(t.clamp(a, b));
            }
        }
        Err(SacError::Usage(format!(
            "adjoint sample time {t} outside hybrid span"
        )))
    }
}

/// Integrates the augmented adjoint rhodot = -Abar' rho backward along a
/// stored hybrid trajectory, applying rho(ti-) = Pibar' rho(ti+) at each
/// transition. Terminal condition rho(tf) = (1, grad m).
pub fn simulate_hybrid_adjoint(
    model: &HybridModel,
    cost: &QuadraticTrackingCost,
    ht: &HybridTrajectory,
) -> Result<HybridAdjoint> {
    let aug = MayerAugmentedModel::new(model, cost);
    let n = model.location(0).state_dim();
    let mut segments: Vec<crate::control::AdjointTrajectory> =
        vec![
            crate::control::AdjointTrajectory {
                times: Vec::new(),
                values: Vec::new(),
            };
            ht.segments.len()
        ];

    // Terminal condition on the last segment.
    let tf = ht.end_time();
    let xf = ht.final_state();
    let mut rho_next = DVector::zeros(n + 1);
    rho_next[0] = 1.0;
    rho_next
        .rows_mut(1, n)
        .copy_from(&cost.terminal_gradient(tf, xf));

    for si in (0..ht.segments.len()).rev() {
        let (q, seg) = &ht.segments[si];
        let rhs = |t: f64, rho: &DVector<f64>| -> DVector<f64> {
            let x = seg
                .sample_state(t.clamp(seg.start_time(), seg.end_time()))
                .expect("time inside segment");
            let u = seg
                .sample_control(t.clamp(seg.start_time(), seg.end_time()))
                .expect("time inside segment");
            let a = aug.state_matrix(*q, t, &x, &u);
            -a.transpose() * rho
        };
        let m = seg.len();
        let mut values = vec![DVector::zeros(n + 1); m];
        values[m - 1] = rho_next.clone();
        for k in (0..m - 1).rev() {
            let h = seg.times[k] - seg.times[k + 1];
            values[k] = rk4_step(&rhs, seg.times[k + 1], &values[k + 1], h);
            if !values[k].iter().all(|v| v.is_finite()) {
                return Err(SacError::NonFinite {
                    context: "hybrid adjoint".into(),
                    time: seg.times[k],
                });
            }
        }
        segments[si] = crate::control::AdjointTrajectory {
            times: seg.times.clone(),
            values,
        };

        // Jump across the transition that starts this segment.
        if si > 0 {
            let (q_from, prev) = &ht.segments[si - 1];
            let t_i = prev.end_time();
            let x_minus = prev.final_state();
            let u = prev.sample_control(t_i)?;
            let pibar = aug.reset_jacobian(*q_from, *q, t_i, x_minus, &u)?;
            rho_next = pibar.transpose() * &segments[si].values[0];
        }
    }
    Ok(HybridAdjoint {
        segments,
        transition_times: ht.transition_times.clone(),
    })
}

/// Propagates an augmented variation (psi0 at time tau, just after any
/// transition) forward to the end of the trajectory through the linearized
/// flow and reset maps. Returns the variation sampled at every grid node in
/// [tau, tf] (transition instants appear twice: pre- and post-jump).
pub fn propagate_variation(
    model: &HybridModel,
    cost: &QuadraticTrackingCost,
    ht: &HybridTrajectory,
    tau: f64,
    psi0: &DVector<f64>,
) -> Result<Vec<(f64, DVector<f64>)>> {
    let aug = MayerAugmentedModel::new(model, cost);
    if psi0.len() != aug.augmented_dim() {
        return Err(SacError::DimensionMismatch {
            expected: aug.augmented_dim(),
            got: psi0.len(),
            context: "augmented variation".into(),
        });
    }
    let si0 = ht.segment_index(tau, Side::Plus)?;
    let mut psi = psi0.clone();
    let mut out = vec![(tau, psi.clone())];
    for si in si0..ht.segments.len() {
        let (q, seg) = &ht.segments[si];
        let rhs = |t: f64, v: &DVector<f64>| -> DVector<f64> {
            let x = seg
                .sample_state(t.clamp(seg.start_time(), seg.end_time()))
                .expect("time inside segment");
            let u = seg
                .sample_control(t.clamp(seg.start_time(), seg.end_time()))
                .expect("time inside segment");
            aug.state_matrix(*q, t, &x, &u) * v
        };
        let mut t = tau.max(seg.start_time());
        for k in 0..seg.len() {
            if seg.times[k] <= t + 1e-15 {
                continue;
            }
            psi = rk4_step(&rhs, t, &psi, seg.times[k] - t);
            t = seg.times[k];
            if !psi.iter().all(|v| v.is_finite()) {
                return Err(SacError::NonFinite {
                    context: "variation propagation".into(),
                    time: t,
                });
            }
            out.push((t, psi.clone()));
        }
        if si + 1 < ht.segments.len() {
            let q_to = ht.segments[si + 1].0;
            let t_i = seg.end_time();
            let x_minus = seg.final_state();
            let u = seg.sample_control(t_i)?;
            let pibar = aug.reset_jacobian(*q, q_to, t_i, x_minus, &u)?;
            psi = &pibar * &psi;
            out.push((t_i, psi.clone()));
        }
    }
    Ok(out)
}

/// Needle-variation seed at time tau: fbar(x, w) - fbar(x, u1) on the
/// augmented state (the cost row is zero because l1 does not depend on u).
pub fn needle_seed(
    model: &HybridModel,
    ht: &HybridTrajectory,
    tau: f64,
    w: &ControlVec,
    u1: &ControlVec,
) -> Result<DVector<f64>> {
    let q = ht.location_at(tau, Side::Plus)?;
    let x = ht.sample_state(tau, Side::Plus)?;
    let sys = model.location(q);
    let diff = sys.eval_dynamics(tau, &x, w)? - sys.eval_dynamics(tau, &x, u1)?;
    let n = diff.len();
    let mut seed = DVector::zeros(n + 1);
    seed.rows_mut(1, n).copy_from(&diff);
    Ok(seed)
}

/// First-order sensitivity of the total cost J1 to inserting control `w`
/// for an infinitesimal duration at tau, computed two independent ways:
/// through the backward adjoint and through forward variation propagation.
/// Returns (nu_adjoint, nu_forward).
pub fn hybrid_sensitivity(
    model: &HybridModel,
    cost: &QuadraticTrackingCost,
    ht: &HybridTrajectory,
    adjoint: &HybridAdjoint,
    tau: f64,
    w: &ControlVec,
    u1: &ControlVec,
) -> Result<(f64, f64)> {
    let seed = needle_seed(model, ht, tau, w, u1)?;
    let rho_tau = adjoint.sample(tau, Side::Plus)?;
    let nu_adjoint = rho_tau.dot(&seed);

    let record = propagate_variation(model, cost, ht, tau, &seed)?;
    let (_tf, psi_f) = record.last().unwrap();
    let n = model.location(0).state_dim();
    let mut rho_f = DVector::zeros(n + 1);
    rho_f[0] = 1.0;
    rho_f
        .rows_mut(1, n)
        .copy_from(&cost.terminal_gradient(ht.end_time(), ht.final_state()));
    let nu_forward = rho_f.dot(psi_f);
    Ok((nu_adjoint, nu_forward))
}

/// Total tracking cost of a hybrid trajectory: per-segment trapezoidal
/// quadrature of the running cost plus the terminal term.
pub fn eval_hybrid_cost(cost: &QuadraticTrackingCost, ht: &HybridTrajectory) -> Result<f64> {
    let mut total = 0.0;
    for (_q, seg) in &ht.segments {
        if seg.len() < 2 {
            continue;
        }
        let mut prev = cost.incremental_cost(seg.times[0], &seg.states[0]);
        for k in 1..seg.len() {
            let cur = cost.incremental_cost(seg.times[k], &seg.states[k]);
            total += 0.5 * (prev + cur) * (seg.times[k] - seg.times[k - 1]);
            prev = cur;
        }
    }
    total += cost.terminal_cost(ht.end_time(), ht.final_state());
    if !total.is_finite() {
        return Err(SacError::NonFinite {
            context: "hybrid trajectory cost".into(),
            time: ht.end_time(),
        });
    }
    Ok(total)
}

/// One synthesis cycle for a hybrid plant: predict under the null nominal
/// control, integrate the jump-corrected adjoint, evaluate the closed-form
/// schedule on every segment node, search the application time (transition
/// instants excluded), saturate, and line search the duration.
pub fn hybrid_sac_step(
    model: &HybridModel,
    cost: &QuadraticTrackingCost,
    q0: usize,
    t0: f64,
    x0: &StateVec,
    params: &SacParams,
) -> Result<SacStepOutcome> {
    let m = model.location(0).control_dim();
    params.validate(m)?;
    let zero = DVector::zeros(m);
    let u_null = |_t: f64| DVector::zeros(m);
    let tf = t0 + params.horizon;

    let ht = integrate_hybrid(
        model,
        q0,
        x0,
        &u_null,
        (t0, tf),
        params.pred_dt,
        MAX_TRANSITIONS_HORIZON,
    )?;
    let j1_init = eval_hybrid_cost(cost, &ht)?;
    let alpha_d = choose_alpha_d(params.alpha, j1_init);
    let adjoint = simulate_hybrid_adjoint(model, cost, &ht)?;

    // Assemble the action schedule over all segment nodes. Gamma uses the
    // state rows of the augmented adjoint and the local input map.
    let n = model.location(0).state_dim();
    let mut times = Vec::new();
    let mut nodes = Vec::new();
    for (si, (q, seg)) in ht.segments.iter().enumerate() {
        for k in 0..seg.len() {
            let t = seg.times[k];
            let x = &seg.states[k];
            let h = model.location(*q).input_map(t, x);
            let rho = adjoint.segments[si].values[k].rows(1, n).into_owned();
            times.push(t);
            nodes.push((h.transpose() * rho, seg.controls[k].clone()));
        }
    }
    let schedule: ActionSchedule =
        optimal_action_schedule_nodes(times, nodes, &params.r, alpha_d);
    let k = search_application_time(&schedule, t0, params, &ht.transition_times)?;
    let tau = schedule.times[k];
    let u_sat = saturate_action(&schedule.controls[k], &schedule.gammas[k], alpha_d, params);

    let resim = |lambda: f64| -> Result<f64> {
        let (a, b) = (
            (tau - 0.5 * lambda).max(t0 + params.t_calc),
            (tau + 0.5 * lambda).min(tf),
        );
        let u_fn = |t: f64| {
            if t >= a && t < b {
                u_sat.clone()
            } else {
                zero.clone()
            }
        };
        let pert = integrate_hybrid(
            model,
            q0,
            x0,
            &u_fn,
            (t0, tf),
            params.pred_dt,
            MAX_TRANSITIONS_HORIZON,
        )?;
        eval_hybrid_cost(cost, &pert)
    };
    let accepted = line_search_duration(resim, j1_init, params)?;

    let mut info = SacStepInfo {
        t0,
        j1_init,
        alpha_d,
        tau,
        lambda: None,
        j1_new: None,
    };
    let Some((lambda, j1_new)) = accepted else {
        return Ok(SacStepOutcome { action: None, info });
    };
    info.lambda = Some(lambda);
    info.j1_new = Some(j1_new);
    let start = (tau - 0.5 * lambda).max(t0 + params.t_calc);
    let end = (tau + 0.5 * lambda).min(t0 + params.ts + params.t_calc);
    let action = (end > start).then(|| Action {
        start,
        end,
        value: u_sat,
    });
    Ok(SacStepOutcome { action, info })
}

/// A recorded hybrid closed-loop run.
pub struct HybridClosedLoopResult {
    pub trajectory: HybridTrajectory,
    pub actions: Vec<Action>,
    pub cycles: Vec<SacStepInfo>,
}

/// Receding-horizon loop for hybrid plants. Transitions are counted across
/// the whole run against the run-level cap.
pub fn run_hybrid_closed_loop(
    model: &HybridModel,
    cost: &QuadraticTrackingCost,
    q0: usize,
    x0: &StateVec,
    span: (f64, f64),
    params: &SacParams,
    plant_dt: f64,
) -> Result<HybridClosedLoopResult> {
    let m = model.location(0).control_dim();
    params.validate(m)?;
    let (t_start, t_end) = span;
    if t_end <= t_start || plant_dt <= 0.0 {
        return Err(SacError::Usage(format!(
            "invalid closed-loop span [{t_start}, {t_end}] or plant_dt {plant_dt}"
        )));
    }

    let mut actions: Vec<Action> = Vec::new();
    let mut cycles = Vec::new();
    let mut segments: Vec<(usize, Trajectory)> = Vec::new();
    let mut transition_times: Vec<f64> = Vec::new();
    let mut location_sequence = vec![q0];
    let mut transitions_used = 0usize;

    let mut t0 = t_start;
    let mut q = q0;
    let mut x = x0.clone();
    while t0 < t_end - 1e-12 {
        let outcome = hybrid_sac_step(model, cost, q, t0, &x, params)?;
        cycles.push(outcome.info);
        if let Some(a) = outcome.action {
            actions.push(a);
        }
        let tape = actions.clone();
        let u_of = move |t: f64| -> ControlVec {
            tape.iter()
                .rev()
                .find(|a| t >= a.start && t < a.end)
                .map(|a| a.value.clone())
                .unwrap_or_else(|| DVector::zeros(m))
        };
        let cycle_end = (t0 + params.ts).min(t_end);
        let remaining = MAX_TRANSITIONS_RUN - transitions_used;
        let ht = integrate_hybrid(model, q, &x, &u_of, (t0, cycle_end), plant_dt, remaining)?;
        transitions_used += ht.transition_times.len();

        for (i, (qq, seg)) in ht.segments.iter().enumerate() {
            let continues = i == 0
                && segments
                    .last()
                    .map_or(false, |(lq, ls)| *lq == *qq && (ls.end_time() - seg.start_time()).abs() <= 1e-12);
            if continues {
                let (_lq, ls) = segments.last_mut().unwrap();
                for k in 1..seg.len() {
                    ls.times.push(seg.times[k]);
                    ls.states.push(seg.states[k].clone());
                    ls.controls.push(seg.controls[k].clone());
                }
            } else {
                segments.push((*qq, seg.clone()));
                if i > 0 {
                    location_sequence.push(*qq);
                }
            }
        }
        transition_times.extend_from_slice(&ht.transition_times);

        q = ht.final_location();
        x = ht.final_state().clone();
        t0 = cycle_end;
    }

    Ok(HybridClosedLoopResult {
        trajectory: HybridTrajectory {
            segments,
            transition_times,
            location_sequence,
        },
        actions,
        cycles,
    })
}
