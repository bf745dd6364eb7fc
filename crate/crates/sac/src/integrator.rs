//! Fixed-step RK4 integration of smooth and guarded hybrid systems, with
//! bisection-based event localization and stored-trajectory interpolation.

use nalgebra::DVector;

use crate::dynamics::{
    ControlVec, CrossingDirection, HybridModel, StateVec, SystemModel, GRAZING_TOL,
    GUARD_VALUE_TOL,
};
use crate::error::{Result, SacError};

/// Relative time tolerance for event localization (scaled by span length).
pub const EVENT_TIME_TOL: f64 = 1e-10;

/// Guard magnitude below which a segment start is considered still on the
/// surface; crossing detection arms once the guard leaves this band.
const GUARD_ARM_TOL: f64 = 1e-9;

/// Default transition cap for a single prediction horizon.
pub const MAX_TRANSITIONS_HORIZON: usize = 10;

/// Default transition cap for a closed-loop run.
pub const MAX_TRANSITIONS_RUN: usize = 10_000;

/// One RK4 step of `xdot = f(t, x)` with step `h`.
pub fn rk4_step<F>(f: &F, t: f64, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x + 0.5 * h * &k1));
    let k3 = f(t + 0.5 * h, &(x + 0.5 * h * &k2));
    let k4 = f(t + h, &(x + h * &k3));
    x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// A stored time-indexed trajectory: states and the applied control at each
/// grid node. Times are strictly increasing, uniform step except possibly
/// the last.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVec>,
    pub controls: Vec<ControlVec>,
}

impl Trajectory {
    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &StateVec {
        self.states.last().unwrap()
    }

    /// Index of the last node with `times[i] <= t`.
    fn bracket(&self, t: f64) -> Result<usize> {
        if t < self.start_time() - 1e-12 || t > self.end_time() + 1e-12 {
            return Err(SacError::Usage(format!(
                "sample time {t} outside span [{}, {}]",
                self.start_time(),
                self.end_time()
            )));
        }
        let i = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        Ok(i.min(self.times.len() - 1))
    }

    /// Linear interpolation of the state between bracketing nodes.
    pub fn sample_state(&self, t: f64) -> Result<StateVec> {
        let i = self.bracket(t)?;
        if i + 1 >= self.len() {
            return Ok(self.states[i].clone());
        }
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        Ok(&self.states[i] * (1.0 - w) + &self.states[i + 1] * w)
    }

    /// The control applied at time `t` (piecewise constant on the grid).
    pub fn sample_control(&self, t: f64) -> Result<ControlVec> {
        let i = self.bracket(t)?;
        Ok(self.controls[i].clone())
    }
}

/// Which side of a transition instant to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Minus,
    Plus,
}

/// A hybrid trajectory: per-location segments joined by localized
/// transitions.
#[derive(Debug, Clone)]
pub struct HybridTrajectory {
    /// (location, stored segment) in temporal order.
    pub segments: Vec<(usize, Trajectory)>,
    pub transition_times: Vec<f64>,
    pub location_sequence: Vec<usize>,
}

impl HybridTrajectory {
    pub fn start_time(&self) -> f64 {
        self.segments.first().unwrap().1.start_time()
    }

    pub fn end_time(&self) -> f64 {
        self.segments.last().unwrap().1.end_time()
    }

    pub fn final_state(&self) -> &StateVec {
        self.segments.last().unwrap().1.final_state()
    }

    pub fn final_location(&self) -> usize {
        self.segments.last().unwrap().0
    }

    /// Index of the segment containing `t`; `side` resolves transition
    /// instants.
    pub fn segment_index(&self, t: f64, side: Side) -> Result<usize> {
        if t < self.start_time() - 1e-12 || t > self.end_time() + 1e-12 {
            return Err(SacError::Usage(format!(
                "sample time {t} outside hybrid span"
            )));
        }
        for (i, (_q, seg)) in self.segments.iter().enumerate() {
            let at_end = (t - seg.end_time()).abs() <= 1e-12;
            let is_last = i + 1 == self.segments.len();
            if t < seg.end_time() - 1e-12 || (at_end && (side == Side::Minus || is_last)) {
                if t >= seg.start_time() - 1e-12 {
                    return Ok(i);
                }
            }
        }
        Ok(self.segments.len() - 1)
    }

    /// Linear interpolation within a segment; never interpolates across a
    /// transition.
    pub fn sample_state(&self, t: f64, side: Side) -> Result<StateVec> {
        let i = self.segment_index(t, side)?;
        let seg = &self.segments[i].1;
        seg.sample_state(t.clamp(seg.start_time(), seg.end_time()))
    }

    pub fn location_at(&self, t: f64, side: Side) -> Result<usize> {
        Ok(self.segments[self.segment_index(t, side)?].0)
    }

    /// True when `t` coincides with a stored transition instant.
    pub fn is_transition_time(&self, t: f64, tol: f64) -> bool {
        self.transition_times.iter().any(|ti| (t - ti).abs() <= tol)
    }
}

/// Fixed-step RK4 solution of a smooth control-affine system under the
/// control signal `u_fn`. Node count is the grid count plus one; spans that are near-exact multiples of `dt` snap to the grid.
pub fn integrate_smooth<U>(
    model: &SystemModel,
    x0: &StateVec,
    u_fn: &U,
    span: (f64, f64),
    dt: f64,
) -> Result<Trajectory>
where
    U: Fn(f64) -> ControlVec,
{
    let (t0, tf) = span;
    if dt <= 0.0 || tf <= t0 {
        return Err(SacError::Usage(format!(
            "invalid span/step: [{t0}, {tf}], dt = {dt}"
        )));
    }
    let rhs = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        let u = u_fn(t);
        model.drift(t, x) + model.input_map(t, x) * u
    };
    // Snap to the grid count when the span is a near-exact multiple of dt,
    // so rounding noise in accumulated cycle boundaries cannot add a step.
    let ratio = (tf - t0) / dt;
    let steps = if (ratio - ratio.round()).abs() < 1e-6 && ratio.round() >= 1.0 {
        ratio.round() as usize
    } else {
        ratio.ceil() as usize
    };
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    let mut t = t0;
    let mut x = x0.clone();
    times.push(t);
    states.push(x.clone());
    controls.push(u_fn(t));
    for k in 0..steps {
        let t_next = if k + 1 == steps { tf } else { t0 + (k + 1) as f64 * dt };
        let h = t_next - t;
        x = rk4_step(&rhs, t, &x, h);
        t = t_next;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(SacError::Divergence { time: t });
        }
        times.push(t);
        states.push(x.clone());
        controls.push(u_fn(t));
    }
    Ok(Trajectory {
        times,
        states,
        controls,
    })
}

/// Bisection root localization for a scalar guard over a time bracket with
/// opposite-sign endpoints.
pub fn detect_crossing<G>(guard_fn: &G, t_lo: f64, t_hi: f64, time_tol: f64) -> Result<f64>
where
    G: Fn(f64) -> f64,
{
    let (mut lo, mut hi) = (t_lo, t_hi);
    let g_lo = guard_fn(lo);
    let g_hi = guard_fn(hi);
    if g_lo * g_hi > 0.0 {
        return Err(SacError::Usage(format!(
            "detect_crossing bracket has same-sign guard values ({g_lo}, {g_hi})"
        )));
    }
    let mut sign_lo = g_lo.signum();
    if g_lo == 0.0 {
        return Ok(lo);
    }
    while hi - lo > time_tol {
        let mid = 0.5 * (lo + hi);
        let g_mid = guard_fn(mid);
        if g_mid == 0.0 {
            return Ok(mid);
        }
        if g_mid.signum() == sign_lo {
            lo = mid;
        } else {
            hi = mid;
        }
        sign_lo = guard_fn(lo).signum();
    }
    Ok(0.5 * (lo + hi))
}

/// Integrates a guarded hybrid system. When a declared guard changes sign
/// across a step, the transition time is localized by bisection on a
/// re-integrated partial step, the reset applied, and integration continues
/// in the target location.
/// True if the destination location of a transition would immediately fire a
/// transition of its own at the post-reset state: one of its guards is within
/// [`GUARD_VALUE_TOL`] of the surface and the destination flow moves it in
/// that guard's firing direction. Used to detect mode disagreements at
/// skimming contacts.
fn refires(
    model: &HybridModel,
    q_to: usize,
    t: f64,
    x_plus: &StateVec,
    u_plus: &ControlVec,
) -> bool {
    let sys_to = model.location(q_to);
    let f_plus = sys_to.drift(t, x_plus) + sys_to.input_map(t, x_plus) * u_plus;
    model.transitions_from(q_to).any(|tr2| {
        tr2.guard(x_plus).abs() <= GUARD_VALUE_TOL
            && tr2.direction.matches_rate(tr2.guard_grad(x_plus).dot(&f_plus))
    })
}

pub fn integrate_hybrid<U>(
    model: &HybridModel,
    q0: usize,
    x0: &StateVec,
    u_fn: &U,
    span: (f64, f64),
    dt: f64,
    max_transitions: usize,
) -> Result<HybridTrajectory>
where
    U: Fn(f64) -> ControlVec,
{
    let (t0, tf) = span;
    if dt <= 0.0 || tf <= t0 {
        return Err(SacError::Usage(format!(
            "invalid span/step: [{t0}, {tf}], dt = {dt}"
        )));
    }
    let time_tol = EVENT_TIME_TOL * (tf - t0);

    let mut segments: Vec<(usize, Trajectory)> = Vec::new();
    let mut transition_times = Vec::new();
    let mut location_sequence = vec![q0];

    let mut q = q0;
    let mut t = t0;
    let mut x = x0.clone();
    let mut transitions = 0usize;

    'outer: loop {
        let sys = model.location(q);
        let rhs = |tt: f64, xx: &DVector<f64>| -> DVector<f64> {
            let u = u_fn(tt);
            sys.drift(tt, xx) + sys.input_map(tt, xx) * u
        };

        let mut times = vec![t];
        let mut states = vec![x.clone()];
        let mut controls = vec![u_fn(t)];

        // Arming state per declared transition out of q: a guard fires only
        // after it has been seen strictly on its origin side, so a segment
        // that starts on (or crosses back over) the surface cannot re-fire
        // until the flow departs in the arming direction. This hysteresis is
        // what keeps grazing contacts from chattering.
        let out_transitions: Vec<&crate::dynamics::Transition> =
            model.transitions_from(q).collect();
        let mut armed_sign: Vec<f64> = out_transitions
            .iter()
            .map(|tr| {
                let phi = tr.guard(&x);
                if phi.abs() > GUARD_ARM_TOL {
                    phi.signum()
                } else {
                    0.0
                }
            })
            .collect();

        while t < tf - 1e-15 {
            // Snap the last step to tf; never leave a rounding-noise sliver.
            let h = if tf - t < dt * (1.0 + 1e-6) { tf - t } else { dt };
            let x_next = rk4_step(&rhs, t, &x, h);
            if !x_next.iter().all(|v| v.is_finite()) {
                return Err(SacError::Divergence { time: t + h });
            }

            // A transition whose condition is already met at the node (guard
            // past the surface on its destination side) was held back because
            // the destination flow would have undone it immediately (a
            // skimming contact). Commit it at the node as soon as the
            // destination flow agrees. The hold is derived from the state
            // alone, so it survives segment and call boundaries.
            let mut crossing: Option<usize> = None;
            let mut from_surface = false;
            let mut held_at_node = false;
            for (gi, tr) in out_transitions.iter().enumerate() {
                let phi = tr.guard(&x);
                if phi.abs() > GUARD_ARM_TOL && phi.signum() != tr.direction.origin_sign() {
                    let x_plus = tr.reset(&x);
                    if !refires(model, tr.to, t, &x_plus, &u_fn(t)) {
                        crossing = Some(gi);
                        held_at_node = true;
                        break;
                    }
                }
            }

            if crossing.is_none() {
                // Evaluate guards at the step end; collect crossings in each
                // transition's declared firing direction.
                for (gi, tr) in out_transitions.iter().enumerate() {
                    let phi_new = tr.guard(&x_next);
                    if armed_sign[gi] == 0.0 {
                        if phi_new.abs() > GUARD_ARM_TOL {
                            if phi_new.signum() == tr.direction.origin_sign()
                                || tr.guard(&x).abs() > GUARD_ARM_TOL
                            {
                                // Either the flow departed on the arming side,
                                // or the guard was already off the surface (a
                                // held contact): track the side; a later
                                // origin-side crossing re-arms it.
                                armed_sign[gi] = phi_new.signum();
                            } else {
                                // Unarmed guard left the surface straight onto
                                // its destination side (e.g. the ground rose
                                // under a foot at lift-off): the condition is
                                // met at the departure point, not at a later
                                // re-crossing.
                                if crossing.is_some() {
                                    return Err(SacError::AmbiguousTransition { time: t + h });
                                }
                                crossing = Some(gi);
                                from_surface = true;
                            }
                        }
                        continue;
                    }
                    if phi_new * armed_sign[gi] < 0.0 {
                        if armed_sign[gi] == tr.direction.origin_sign() {
                            if crossing.is_some() {
                                return Err(SacError::AmbiguousTransition { time: t + h });
                            }
                            crossing = Some(gi);
                        } else {
                            // Crossed against the firing direction: re-arm.
                            armed_sign[gi] = phi_new.signum();
                        }
                    }
                }
            }

            let Some(gi) = crossing else {
                t += h;
                x = x_next;
                times.push(t);
                states.push(x.clone());
                controls.push(u_fn(t));
                continue;
            };

            // Localize the event by bisection on re-integrated partial steps
            // from the pre-crossing node.
            let tr = out_transitions[gi];
            let t_base = t;
            let x_base = x.clone();
            let partial = |s: f64| -> DVector<f64> {
                if s <= 0.0 {
                    x_base.clone()
                } else {
                    rk4_step(&rhs, t_base, &x_base, s)
                }
            };
            let guard_of_s = |s: f64| tr.guard(&partial(s));
            let s_root = if held_at_node {
                // A held contact commits at the node itself.
                0.0
            } else if from_surface {
                // The step began inside the arming band; locate where the
                // guard exits the band on the destination side.
                let dest = -tr.direction.origin_sign();
                let exit = |s: f64| guard_of_s(s) * dest - GUARD_ARM_TOL;
                let (mut lo, mut hi) = (0.0, h);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if exit(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if hi - lo < time_tol {
                        break;
                    }
                }
                hi
            } else {
                // Establish a pre-crossing bracket endpoint. If the guard at
                // the node start is still inside the arming band (segment
                // began on the surface), scan geometrically for a point with
                // the armed sign.
                let mut s_lo = 0.0;
                if guard_of_s(0.0) * armed_sign[gi] <= 0.0 {
                    let mut found = false;
                    let mut s = 0.5 * h;
                    for _ in 0..60 {
                        if guard_of_s(s) * armed_sign[gi] > 0.0 {
                            s_lo = s;
                            found = true;
                            break;
                        }
                        s *= 0.5;
                    }
                    if !found {
                        return Err(SacError::GrazingImpact {
                            value: 0.0,
                            tolerance: GRAZING_TOL,
                        });
                    }
                }
                detect_crossing(&guard_of_s, s_lo, h, time_tol)?
            };
            let t_i = t_base + s_root;
            let x_minus = partial(s_root);
            let u_minus = u_fn(t_i);
            let f_minus = sys.drift(t_i, &x_minus) + sys.input_map(t_i, &x_minus) * &u_minus;
            let rate = tr.guard_grad(&x_minus).dot(&f_minus);
            if rate.abs() < GRAZING_TOL {
                return Err(SacError::GrazingImpact {
                    value: rate.abs(),
                    tolerance: GRAZING_TOL,
                });
            }

            let x_plus = tr.reset(&x_minus);
            let q_to = tr.to;

            // If the destination flow would immediately undo the transition
            // (its own guard on the surface moving back in the firing
            // direction), the two modes disagree — a skimming contact. Hold
            // the separated side: a unilateral contact cannot pull, so a
            // separation (rising) always commits, while a contact-making
            // (falling) transition waits — re-checked at every node above —
            // until the post-contact flow can sustain the contact.
            if tr.direction == CrossingDirection::Falling
                && !held_at_node
                && refires(model, q_to, t_i, &x_plus, &u_fn(t_i))
            {
                t += h;
                x = x_next;
                times.push(t);
                states.push(x.clone());
                controls.push(u_fn(t));
                armed_sign[gi] = 0.0;
                continue;
            }

            // Close the segment at t_i-.
            if t_i > *times.last().unwrap() + 1e-15 {
                times.push(t_i);
                states.push(x_minus.clone());
                controls.push(u_minus.clone());
            }
            segments.push((
                q,
                Trajectory {
                    times,
                    states,
                    controls,
                },
            ));
            transition_times.push(t_i);

            transitions += 1;
            if transitions > max_transitions {
                return Err(SacError::Zeno {
                    max: max_transitions,
                    time: t_i,
                });
            }

            x = x_plus;
            q = q_to;
            t = t_i;
            location_sequence.push(q);
            continue 'outer;
        }

        segments.push((
            q,
            Trajectory {
                times,
                states,
                controls,
            },
        ));
        break;
    }

    Ok(HybridTrajectory {
        segments,
        transition_times,
        location_sequence,
    })
}
