//! Closed-loop inference: the FIFO joint-state buffer, first-step
//! refinement against per-link twist targets, and the per-step pipeline
//! that ties them to the network.
//!
//! Refinement solves
//!
//! ```text
//! min  ||s - s~||^2 + ||sdot - sdot~||^2
//! s.t. ||G_i(s, H_B, sdot, v_B) - v_i||^2 <= eps   for every instrumented link i
//! ```
//!
//! with an augmented-Lagrangian outer loop over a damped Gauss-Newton inner
//! loop. The constraint map G_i is the differential-kinematics twist, affine
//! in `sdot` and smooth in `s`, so Gauss-Newton steps converge quickly near
//! the network's guess. Forward kinematics is deliberately not constrained;
//! only twists are.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Vector6};
use thiserror::Error;

use crate::kinematics::{differential_kinematics, dk_state_jacobian, forward_kinematics};
use crate::losses::BaseState;
use crate::model::{clamp_to_limits, Configuration, ModelError, RigidBodyModel, SystemVelocity};
use crate::network::{
    forward, BufferSnapshot, InputWindow, NetworkError, PredictionWindow, PredictorParams,
};

/// Default squared-residual tolerance per link.
pub const DEFAULT_EPSILON: f64 = 1e-4;
/// Default augmented-Lagrangian outer iteration cap.
pub const DEFAULT_MAX_OUTER: usize = 10;
/// Default Gauss-Newton inner iteration cap per outer iteration.
pub const DEFAULT_MAX_INNER: usize = 20;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("buffer initialization needs exactly {expected} states, got {actual}")]
    WrongCount { expected: usize, actual: usize },
    #[error("state dimension {actual} does not match buffer dof {expected}")]
    WrongDof { expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("refinement problem has {actual} twist targets, model instruments {expected} links")]
    WrongTargetCount { expected: usize, actual: usize },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("sequence too short for closed-loop run: {len} frames, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
}

/// FIFO ring of the most recent M-1 joint states (position and velocity),
/// oldest first. Always full once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct JointStateBuffer {
    dof: usize,
    entries: VecDeque<(DVector<f64>, DVector<f64>)>,
}

impl JointStateBuffer {
    /// Build a full buffer from exactly `capacity` ground-truth states,
    /// oldest first.
    pub fn init(
        capacity: usize,
        states: &[(DVector<f64>, DVector<f64>)],
    ) -> Result<Self, RuntimeError> {
        if states.len() != capacity || capacity == 0 {
            return Err(RuntimeError::WrongCount {
                expected: capacity,
                actual: states.len(),
            });
        }
        let dof = states[0].0.len();
        for (s, sdot) in states {
            if s.len() != dof || sdot.len() != dof {
                return Err(RuntimeError::WrongDof {
                    expected: dof,
                    actual: s.len().max(sdot.len()),
                });
            }
        }
        Ok(Self {
            dof,
            entries: states.iter().cloned().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    /// Evict the oldest entry and append `state` as the newest.
    pub fn push(&mut self, positions: DVector<f64>, velocities: DVector<f64>) {
        debug_assert_eq!(positions.len(), self.dof);
        debug_assert_eq!(velocities.len(), self.dof);
        self.entries.pop_front();
        self.entries.push_back((positions, velocities));
    }

    /// Entries oldest-first.
    pub fn entries(&self) -> impl Iterator<Item = &(DVector<f64>, DVector<f64>)> {
        self.entries.iter()
    }

    /// Flatten into the network's buffer-branch input, oldest first.
    pub fn snapshot(&self) -> BufferSnapshot {
        let mut snap = BufferSnapshot::zeros(self.entries.len(), self.dof);
        for (t, (s, sdot)) in self.entries.iter().enumerate() {
            for j in 0..self.dof {
                snap.set_position(t, j, s[j]);
                snap.set_velocity(t, j, sdot[j]);
            }
        }
        snap
    }
}

/// One first-step refinement instance.
#[derive(Debug, Clone)]
pub struct RefinementProblem {
    pub guess_positions: DVector<f64>,
    pub guess_velocities: DVector<f64>,
    /// Ground-truth base pose and twist (held fixed by the solver).
    pub base: BaseState,
    /// Target twist per instrumented link, in `instrumented_links` order.
    pub link_twists: Vec<Vector6<f64>>,
    /// Squared-residual tolerance per link.
    pub epsilon: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl RefinementProblem {
    pub fn new(
        guess_positions: DVector<f64>,
        guess_velocities: DVector<f64>,
        base: BaseState,
        link_twists: Vec<Vector6<f64>>,
    ) -> Self {
        Self {
            guess_positions,
            guess_velocities,
            base,
            link_twists,
            epsilon: DEFAULT_EPSILON,
            max_outer: DEFAULT_MAX_OUTER,
            max_inner: DEFAULT_MAX_INNER,
        }
    }
}

/// Solver outcome summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementReport {
    /// Every per-link squared residual is within tolerance.
    pub feasible: bool,
    /// Total accepted Gauss-Newton iterations across all outer iterations.
    pub iterations: usize,
    /// Largest per-link squared twist residual at the returned point.
    pub max_constraint: f64,
    /// Proximity objective ||s*-s~||^2 + ||sdot*-sdot~||^2 at the returned
    /// point.
    pub objective: f64,
    /// Objective plus the final shifted augmented-Lagrangian penalty; the
    /// solver's convergence scalar.
    pub merit: f64,
}

/// Per-link squared twist residuals at (s, sdot).
fn constraint_residuals(
    model: &RigidBodyModel,
    problem: &RefinementProblem,
    s: &DVector<f64>,
    sdot: &DVector<f64>,
) -> Result<Vec<f64>, RuntimeError> {
    let q = Configuration::new(problem.base.position, problem.base.rotation, s.clone())?;
    let nu = SystemVelocity::new(problem.base.linear, problem.base.angular, sdot.clone())?;
    let fk = forward_kinematics(model, &q);
    let mut out = Vec::with_capacity(problem.link_twists.len());
    for (slot, &link) in model.instrumented_links().iter().enumerate() {
        let twist = differential_kinematics(model, &fk, &nu, link).as_vector();
        out.push((twist - problem.link_twists[slot]).norm_squared());
    }
    Ok(out)
}

/// Augmented-Lagrangian value at x = (s; sdot) with constraints
/// ||e_i||^2 <= eps, plus the per-link squared residuals. Cheap: forward
/// and differential kinematics only, no derivatives. Used for trial steps.
struct AlValue {
    value: f64,
    residuals: Vec<f64>,
}

fn al_value(
    model: &RigidBodyModel,
    problem: &RefinementProblem,
    eps: f64,
    x: &DVector<f64>,
    mu: &[f64],
    rho: f64,
) -> Result<AlValue, RuntimeError> {
    let n = model.dof();
    let s = DVector::from_fn(n, |j, _| x[j]);
    let sdot = DVector::from_fn(n, |j, _| x[n + j]);
    let q = Configuration::new(problem.base.position, problem.base.rotation, s)?;
    let nu = SystemVelocity::new(problem.base.linear, problem.base.angular, sdot)?;
    let fk = forward_kinematics(model, &q);

    let mut value = 0.0;
    for j in 0..n {
        let a = x[j] - problem.guess_positions[j];
        let b = x[n + j] - problem.guess_velocities[j];
        value += a * a + b * b;
    }
    let mut residuals = Vec::with_capacity(problem.link_twists.len());
    for (slot, &link) in model.instrumented_links().iter().enumerate() {
        let twist = differential_kinematics(model, &fk, &nu, link).as_vector();
        let r2 = (twist - problem.link_twists[slot]).norm_squared();
        residuals.push(r2);
        let sigma = (mu[slot] + rho * (r2 - eps)).max(0.0);
        // Shifted quadratic penalty: (sigma^2 - mu^2) / (2 rho).
        value += (sigma * sigma - mu[slot] * mu[slot]) / (2.0 * rho);
    }
    Ok(AlValue { value, residuals })
}

/// Gradient and Gauss-Newton Hessian of the augmented Lagrangian. The
/// expensive evaluation, done once per accepted iterate.
struct AlDerivs {
    grad: DVector<f64>,
    hessian: DMatrix<f64>,
}

fn al_derivs(
    model: &RigidBodyModel,
    problem: &RefinementProblem,
    eps: f64,
    x: &DVector<f64>,
    mu: &[f64],
    rho: f64,
) -> Result<(AlValue, AlDerivs), RuntimeError> {
    let n = model.dof();
    let s = DVector::from_fn(n, |j, _| x[j]);
    let sdot = DVector::from_fn(n, |j, _| x[n + j]);
    let q = Configuration::new(problem.base.position, problem.base.rotation, s)?;
    let nu = SystemVelocity::new(problem.base.linear, problem.base.angular, sdot)?;
    let fk = forward_kinematics(model, &q);

    let mut value = 0.0;
    let mut grad = DVector::zeros(2 * n);
    for j in 0..n {
        let a = x[j] - problem.guess_positions[j];
        let b = x[n + j] - problem.guess_velocities[j];
        value += a * a + b * b;
        grad[j] = 2.0 * a;
        grad[n + j] = 2.0 * b;
    }
    let mut hessian = DMatrix::identity(2 * n, 2 * n) * 2.0;
    let mut residuals = Vec::with_capacity(problem.link_twists.len());

    for (slot, &link) in model.instrumented_links().iter().enumerate() {
        let twist = differential_kinematics(model, &fk, &nu, link).as_vector();
        let e = twist - problem.link_twists[slot];
        let r2 = e.norm_squared();
        residuals.push(r2);
        let sigma = (mu[slot] + rho * (r2 - eps)).max(0.0);
        value += (sigma * sigma - mu[slot] * mu[slot]) / (2.0 * rho);
        if sigma > 0.0 {
            let (d_s, d_sdot) = dk_state_jacobian(model, &fk, &nu, link);
            // E = [d_s  d_sdot], 6 x 2n; grad c = 2 E^T e.
            let mut e_mat = DMatrix::zeros(6, 2 * n);
            e_mat.view_mut((0, 0), (6, n)).copy_from(&d_s);
            e_mat.view_mut((0, n), (6, n)).copy_from(&d_sdot);
            let et_e: DVector<f64> = e_mat.tr_mul(&e);
            grad.axpy(2.0 * sigma, &et_e, 1.0);
            // Gauss-Newton curvature: rho * (grad c)(grad c)^T
            // + 2 sigma E^T E (second derivatives of e dropped).
            hessian.ger(4.0 * rho, &et_e, &et_e, 1.0);
            hessian.gemm_tr(2.0 * sigma, &e_mat, &e_mat, 1.0);
        }
    }
    Ok((AlValue { value, residuals }, AlDerivs { grad, hessian }))
}

/// Refine a first-step prediction toward per-link twist feasibility.
///
/// A guess that already satisfies every constraint is returned unchanged
/// (bitwise); otherwise the solver runs and the result is clamped to the
/// joint limits before returning.
pub fn refine_first_step(
    model: &RigidBodyModel,
    problem: &RefinementProblem,
) -> Result<(DVector<f64>, DVector<f64>, RefinementReport), RuntimeError> {
    let n = model.dof();
    if problem.link_twists.len() != model.instrumented_links().len() {
        return Err(RuntimeError::WrongTargetCount {
            expected: model.instrumented_links().len(),
            actual: problem.link_twists.len(),
        });
    }
    if !(problem.epsilon > 0.0) {
        return Err(RuntimeError::BadTolerance(problem.epsilon));
    }
    if problem.guess_positions.len() != n || problem.guess_velocities.len() != n {
        return Err(RuntimeError::WrongDof {
            expected: n,
            actual: problem.guess_positions.len().max(problem.guess_velocities.len()),
        });
    }
    let finite = problem.guess_positions.iter().all(|v| v.is_finite())
        && problem.guess_velocities.iter().all(|v| v.is_finite())
        && problem.link_twists.iter().all(|t| t.iter().all(|v| v.is_finite()))
        && problem.base.position.iter().all(|v| v.is_finite())
        && problem.base.rotation.iter().all(|v| v.is_finite())
        && problem.base.linear.iter().all(|v| v.is_finite())
        && problem.base.angular.iter().all(|v| v.is_finite());
    if !finite {
        return Err(RuntimeError::NonFinite("refinement problem"));
    }

    // Feasible start: exact no-op.
    let start_residuals =
        constraint_residuals(model, problem, &problem.guess_positions, &problem.guess_velocities)?;
    let start_max = start_residuals.iter().cloned().fold(0.0f64, f64::max);
    if start_max <= problem.epsilon {
        return Ok((
            problem.guess_positions.clone(),
            problem.guess_velocities.clone(),
            RefinementReport {
                feasible: true,
                iterations: 0,
                max_constraint: start_max,
                objective: 0.0,
                merit: 0.0,
            },
        ));
    }

    let mut x = DVector::zeros(2 * n);
    for j in 0..n {
        x[j] = problem.guess_positions[j];
        x[n + j] = problem.guess_velocities[j];
    }
    let mut mu = vec![0.0f64; problem.link_twists.len()];
    let mut rho = 10.0f64;
    let mut iterations = 0usize;
    // The twist constraints typically bind at the optimum, so the iterates
    // approach the tolerance boundary from outside. Solving against a
    // slightly tightened tolerance makes the limit point strictly feasible
    // for the requested one at finite penalty.
    let eps_solve = 0.9 * problem.epsilon;

    // Best feasible iterate by objective; fallback best by constraint.
    let objective_of = |x: &DVector<f64>| {
        let mut o = 0.0;
        for j in 0..n {
            let a = x[j] - problem.guess_positions[j];
            let b = x[n + j] - problem.guess_velocities[j];
            o += a * a + b * b;
        }
        o
    };
    let mut best_feasible: Option<(DVector<f64>, f64)> = None;
    let mut best_any = (x.clone(), start_max);
    let mut final_mu = mu.clone();
    let mut final_rho = rho;

    'outer: for _ in 0..problem.max_outer {
        let mut lambda = 1e-6f64;
        let (mut val, mut der) = al_derivs(model, problem, eps_solve, &x, &mu, rho)?;
        for _ in 0..problem.max_inner {
            if der.grad.amax() < 1e-9 {
                break;
            }
            // Damped Newton trial steps on the AL merit. Trials only need
            // the value; derivatives are recomputed at accepted points.
            let mut accepted = false;
            while lambda < 1e10 {
                let mut h = der.hessian.clone();
                for d in 0..2 * n {
                    h[(d, d)] += lambda;
                }
                let delta = match h.cholesky() {
                    Some(ch) => ch.solve(&(-&der.grad)),
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                };
                let trial = &x + &delta;
                let trial_val = al_value(model, problem, eps_solve, &trial, &mu, rho)?;
                if trial_val.value <= val.value {
                    x = trial;
                    val = trial_val;
                    lambda = (lambda / 3.0).max(1e-10);
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
            let (fresh_val, fresh_der) = al_derivs(model, problem, eps_solve, &x, &mu, rho)?;
            val = fresh_val;
            der = fresh_der;
            iterations += 1;

            let max_res = val.residuals.iter().cloned().fold(0.0f64, f64::max);
            if max_res < best_any.1 {
                best_any = (x.clone(), max_res);
            }
            if max_res <= problem.epsilon {
                let obj = objective_of(&x);
                if best_feasible.as_ref().map_or(true, |(_, o)| obj < *o) {
                    best_feasible = Some((x.clone(), obj));
                }
            }
        }
        final_mu = mu.clone();
        final_rho = rho;
        // Exit on feasibility for the requested tolerance; further outer
        // iterations would only tighten toward the solve tolerance at the
        // cost of a larger objective.
        let max_res = val.residuals.iter().cloned().fold(0.0f64, f64::max);
        if max_res <= problem.epsilon {
            break 'outer;
        }
        for (slot, &r2) in val.residuals.iter().enumerate() {
            mu[slot] = (mu[slot] + rho * (r2 - eps_solve)).max(0.0);
        }
        rho = (rho * 10.0).min(1e12);
    }

    let (solution, feasible) = match best_feasible {
        Some((x, _)) => (x, true),
        None => (best_any.0, false),
    };
    let s = clamp_to_limits(model, &DVector::from_fn(n, |j, _| solution[j]));
    let sdot = DVector::from_fn(n, |j, _| solution[n + j]);
    let mut clamped = DVector::zeros(2 * n);
    for j in 0..n {
        clamped[j] = s[j];
        clamped[n + j] = sdot[j];
    }
    let residuals = constraint_residuals(model, problem, &s, &sdot)?;
    let max_constraint = residuals.iter().cloned().fold(0.0f64, f64::max);
    let objective = objective_of(&clamped);
    let mut merit = objective;
    for (slot, &r2) in residuals.iter().enumerate() {
        let c = r2 - eps_solve;
        let sigma = (final_mu[slot] + final_rho * c).max(0.0);
        merit += (sigma * sigma - final_mu[slot] * final_mu[slot]) / (2.0 * final_rho);
    }
    Ok((
        s,
        sdot,
        RefinementReport {
            feasible: feasible && max_constraint <= problem.epsilon,
            iterations,
            max_constraint,
            objective,
            merit,
        },
    ))
}

/// How the per-step pipeline treats the joint-state buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BufferMode {
    /// Feed the buffer, refine the first step, push the refined state.
    #[default]
    Refined,
    /// Feed the buffer, skip refinement, push the raw first step.
    Raw,
    /// Feed zeros to the buffer branch (buffer ablation); skip refinement,
    /// push the raw first step.
    Zero,
}

/// Per-step pipeline options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub mode: BufferMode,
    pub epsilon: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            mode: BufferMode::Refined,
            epsilon: DEFAULT_EPSILON,
            max_outer: DEFAULT_MAX_OUTER,
            max_inner: DEFAULT_MAX_INNER,
        }
    }
}

/// Output of one closed-loop step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Full K-step prediction with index 0 replaced by the (possibly
    /// refined, always limit-clamped) first step.
    pub window: PredictionWindow,
    /// Present when refinement ran.
    pub report: Option<RefinementReport>,
}

/// Run one step: network forward on (window, buffer), first-step
/// refinement per `options.mode`, buffer push, horizon return.
pub fn step(
    model: &RigidBodyModel,
    params: &PredictorParams,
    buffer: &mut JointStateBuffer,
    window: &InputWindow,
    base: &BaseState,
    link_twists: &[Vector6<f64>],
    options: &StepOptions,
) -> Result<StepOutcome, RuntimeError> {
    let snapshot = match options.mode {
        BufferMode::Zero => BufferSnapshot::zeros(buffer.len(), buffer.dof()),
        _ => buffer.snapshot(),
    };
    let (mut prediction, _) = forward(params, window, &snapshot)?;
    let guess_s = prediction.positions_at(0);
    let guess_sdot = prediction.velocities_at(0);

    let (s, sdot, report) = match options.mode {
        BufferMode::Refined => {
            let mut problem = RefinementProblem::new(
                guess_s,
                guess_sdot,
                base.clone(),
                link_twists.to_vec(),
            );
            problem.epsilon = options.epsilon;
            problem.max_outer = options.max_outer;
            problem.max_inner = options.max_inner;
            let (s, sdot, report) = refine_first_step(model, &problem)?;
            (s, sdot, Some(report))
        }
        BufferMode::Raw | BufferMode::Zero => (guess_s, guess_sdot, None),
    };
    let s = clamp_to_limits(model, &s);
    for j in 0..model.dof() {
        prediction.set_position(0, j, s[j]);
        prediction.set_velocity(0, j, sdot[j]);
    }
    buffer.push(s, sdot);
    Ok(StepOutcome {
        window: prediction,
        report,
    })
}

/// One anchor's closed-loop result.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Sequence step the first prediction corresponds to.
    pub anchor: usize,
    pub window: PredictionWindow,
    pub report: Option<RefinementReport>,
}

/// Run the pipeline over a recorded sequence: buffer initialized from the
/// first M-1 ground-truth states, then one step per anchor m = M-1..L-1
/// with the sensor window ending at m and base/link twists from the
/// ground-truth channel. Deterministic.
pub fn closed_loop(
    model: &RigidBodyModel,
    params: &PredictorParams,
    sequence: &crate::data::RecordedSequence,
    options: &StepOptions,
) -> Result<Vec<StepRecord>, RuntimeError> {
    let m = params.descriptor.input_steps;
    if sequence.len() < m {
        return Err(RuntimeError::TooShort {
            len: sequence.len(),
            min: m,
        });
    }
    let init: Vec<(DVector<f64>, DVector<f64>)> = (0..m - 1)
        .map(|t| {
            let s = sequence.step(t);
            (
                s.configuration.joint_positions().clone(),
                s.velocity.joint_velocities().clone(),
            )
        })
        .collect();
    let mut buffer = JointStateBuffer::init(m - 1, &init)?;
    let mut records = Vec::with_capacity(sequence.len() - (m - 1));
    for anchor in m - 1..sequence.len() {
        let window = crate::training::input_window(sequence, anchor, m)?;
        let truth = sequence.step(anchor);
        let base = BaseState {
            position: *truth.configuration.base_position(),
            rotation: *truth.configuration.base_rotation(),
            linear: *truth.velocity.base_linear(),
            angular: *truth.velocity.base_angular(),
        };
        let outcome = step(
            model,
            params,
            &mut buffer,
            &window,
            &base,
            &truth.link_twists,
            options,
        )?;
        records.push(StepRecord {
            anchor,
            window: outcome.window,
            report: outcome.report,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_motion, simulate_imus, AccelConvention, MotionKind, NoiseParams};
    use crate::model::{neutral_configuration, reference_model};
    use crate::network::{init_params, NetworkDescriptor};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_of(vals: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(vals)
    }

    fn marker_state(dof: usize, tag: f64) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(dof, tag),
            DVector::from_element(dof, -tag),
        )
    }

    #[test]
    fn init_requires_exact_count() {
        let states: Vec<_> = (0..8).map(|i| marker_state(3, i as f64)).collect();
        assert!(matches!(
            JointStateBuffer::init(9, &states),
            Err(RuntimeError::WrongCount {
                expected: 9,
                actual: 8
            })
        ));
        let states: Vec<_> = (0..9).map(|i| marker_state(3, i as f64)).collect();
        let buffer = JointStateBuffer::init(9, &states).unwrap();
        assert_eq!(buffer.len(), 9);
        // Snapshot equals input, oldest first.
        let snap = buffer.snapshot();
        for t in 0..9 {
            for j in 0..3 {
                assert_eq!(snap.position(t, j), t as f64);
                assert_eq!(snap.velocity(t, j), -(t as f64));
            }
        }
    }

    #[test]
    fn push_evicts_oldest() {
        let states: Vec<_> = (0..4).map(|i| marker_state(2, i as f64)).collect();
        let mut buffer = JointStateBuffer::init(4, &states).unwrap();
        let (s, sdot) = marker_state(2, 100.0);
        buffer.push(s, sdot);
        let snap = buffer.snapshot();
        assert_eq!(snap.position(0, 0), 1.0);
        assert_eq!(snap.position(1, 0), 2.0);
        assert_eq!(snap.position(2, 0), 3.0);
        assert_eq!(snap.position(3, 0), 100.0);
        assert_eq!(buffer.len(), 4);
        // Full turnover: 4 fresh pushes replace everything, in order.
        for i in 0..4 {
            let (s, sdot) = marker_state(2, 200.0 + i as f64);
            buffer.push(s, sdot);
        }
        let snap = buffer.snapshot();
        for t in 0..4 {
            assert_eq!(snap.position(t, 0), 200.0 + t as f64);
        }
    }

    proptest! {
        // FIFO law: after any push sequence, the snapshot equals the last
        // M-1 pushed (or initial) states in order.
        #[test]
        fn fifo_law(tags in proptest::collection::vec(-1e3f64..1e3, 0..40)) {
            let capacity = 5usize;
            let dof = 2usize;
            let init: Vec<_> = (0..capacity).map(|i| marker_state(dof, i as f64 * 0.5)).collect();
            let mut buffer = JointStateBuffer::init(capacity, &init).unwrap();
            let mut reference: Vec<(DVector<f64>, DVector<f64>)> = init.clone();
            for &tag in &tags {
                let (s, sdot) = marker_state(dof, tag);
                buffer.push(s.clone(), sdot.clone());
                reference.push((s, sdot));
            }
            let expect = &reference[reference.len() - capacity..];
            let snap = buffer.snapshot();
            for (t, (s, sdot)) in expect.iter().enumerate() {
                for j in 0..dof {
                    prop_assert_eq!(snap.position(t, j), s[j]);
                    prop_assert_eq!(snap.velocity(t, j), sdot[j]);
                }
            }
            prop_assert_eq!(buffer.len(), capacity);
        }
    }

    /// A feasible problem built from a known state of the reference model.
    fn feasible_problem(seed: u64) -> (RigidBodyModel, RefinementProblem, DVector<f64>, DVector<f64>) {
        let model = reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let neutral = neutral_configuration(&model);
        let n = model.dof();
        // Interior states: keep each joint at least 10% of its span away
        // from the limits so the post-solve clamp cannot move the solution.
        let mut s = neutral.joint_positions().clone();
        for (j, joint) in model.joints().iter().enumerate() {
            let (lo, hi) = joint.limits;
            let margin = 0.1 * (hi - lo);
            s[j] = (s[j] + rng.gen_range(-0.3..0.3)).clamp(lo + margin, hi - margin);
        }
        let sdot = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let base = BaseState {
            position: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                0.9,
            ),
            rotation: crate::kinematics::axis_angle(
                &nalgebra::Unit::new_normalize(Vector3::new(0.1, -0.2, 0.97)),
                rng.gen_range(-0.4..0.4),
            ),
            linear: Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.2..0.2),
            ),
            angular: Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ),
        };
        let q = Configuration::new(base.position, base.rotation, s.clone()).unwrap();
        let nu = SystemVelocity::new(base.linear, base.angular, sdot.clone()).unwrap();
        let fk = forward_kinematics(&model, &q);
        let twists: Vec<Vector6<f64>> = model
            .instrumented_links()
            .iter()
            .map(|&l| differential_kinematics(&model, &fk, &nu, l).as_vector())
            .collect();
        let problem = RefinementProblem::new(s.clone(), sdot.clone(), base, twists);
        (model, problem, s, sdot)
    }

    #[test]
    fn feasible_start_is_exact_noop() {
        for seed in 0..5 {
            let (model, problem, s, sdot) = feasible_problem(seed);
            let (rs, rsdot, report) = refine_first_step(&model, &problem).unwrap();
            assert_eq!(rs, s);
            assert_eq!(rsdot, sdot);
            assert!(report.feasible);
            assert_eq!(report.iterations, 0);
            assert_eq!(report.objective, 0.0);
            assert_eq!(report.merit, 0.0);
        }
    }

    #[test]
    fn vacuous_tolerance_returns_guess_unchanged() {
        let (model, mut problem, _, _) = feasible_problem(11);
        // Garbage guess, but epsilon so large every point is feasible.
        let n = model.dof();
        problem.guess_positions = DVector::from_element(n, 0.33);
        problem.guess_velocities = DVector::from_element(n, -2.5);
        problem.epsilon = 1e6;
        let (rs, rsdot, report) = refine_first_step(&model, &problem).unwrap();
        assert_eq!(rs, problem.guess_positions);
        assert_eq!(rsdot, problem.guess_velocities);
        assert!(report.feasible);
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn perturbed_guess_recovers_feasibility() {
        let mut worst_obj = 0.0f64;
        for seed in 0..20u64 {
            let (model, mut problem, s, sdot) = feasible_problem(seed + 50);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let n = model.dof();
            for j in 0..n {
                problem.guess_positions[j] = s[j] + 0.05 * rng.gen_range(-1.0..1.0f64);
                problem.guess_velocities[j] = sdot[j] + 0.05 * rng.gen_range(-1.0..1.0f64);
            }
            let (rs, rsdot, report) = refine_first_step(&model, &problem).unwrap();
            assert!(
                report.feasible,
                "seed {seed}: infeasible exit, max constraint {}",
                report.max_constraint
            );
            // Verify the constraints directly through the kinematics map.
            let q = Configuration::new(problem.base.position, problem.base.rotation, rs.clone())
                .unwrap();
            let nu =
                SystemVelocity::new(problem.base.linear, problem.base.angular, rsdot.clone())
                    .unwrap();
            let fk = forward_kinematics(&model, &q);
            for (slot, &link) in model.instrumented_links().iter().enumerate() {
                let twist = differential_kinematics(&model, &fk, &nu, link).as_vector();
                let r2 = (twist - problem.link_twists[slot]).norm_squared();
                assert!(
                    r2 <= problem.epsilon * (1.0 + 1e-9),
                    "seed {seed} link {slot}: residual {r2}"
                );
            }
            // Optimality sanity: the unperturbed truth state is feasible, so
            // the minimum-objective feasible iterate cannot meaningfully
            // exceed its proximity objective.
            let obj_truth: f64 = (0..n)
                .map(|j| {
                    let a = s[j] - problem.guess_positions[j];
                    let b = sdot[j] - problem.guess_velocities[j];
                    a * a + b * b
                })
                .sum();
            assert!(
                report.objective <= obj_truth * 1.05 + 1e-9,
                "seed {seed}: objective {} vs truth objective {obj_truth}",
                report.objective
            );
            assert!(report.merit.is_finite());
            worst_obj = worst_obj.max(report.objective);
        }
        assert!(worst_obj > 0.0, "refinement should move infeasible guesses");
    }

    #[test]
    fn joint_limits_clamped_on_solver_path() {
        let (model, mut problem, s, _) = feasible_problem(77);
        let n = model.dof();
        // Push the guess outside the limits and far from feasibility.
        for j in 0..n {
            problem.guess_positions[j] = s[j] + 5.0;
            problem.guess_velocities[j] += 3.0;
        }
        let (rs, _, _) = refine_first_step(&model, &problem).unwrap();
        for (j, joint) in model.joints().iter().enumerate() {
            assert!(rs[j] >= joint.limits.0 - 1e-12 && rs[j] <= joint.limits.1 + 1e-12);
        }
    }

    #[test]
    fn nan_input_rejected() {
        let (model, mut problem, _, _) = feasible_problem(5);
        problem.guess_velocities[3] = f64::NAN;
        assert!(matches!(
            refine_first_step(&model, &problem),
            Err(RuntimeError::NonFinite(_))
        ));
        let (model, mut problem, _, _) = feasible_problem(5);
        problem.epsilon = 0.0;
        assert!(matches!(
            refine_first_step(&model, &problem),
            Err(RuntimeError::BadTolerance(_))
        ));
        let (model, mut problem, _, _) = feasible_problem(5);
        problem.link_twists.pop();
        assert!(matches!(
            refine_first_step(&model, &problem),
            Err(RuntimeError::WrongTargetCount { .. })
        ));
    }

    /// Tiny trained-free setup for pipeline tests: reference model with a
    /// small random network.
    fn pipeline_fixture(seed: u64) -> (RigidBodyModel, PredictorParams, crate::data::RecordedSequence) {
        let model = reference_model();
        let mut d = NetworkDescriptor::for_model(&model);
        d.input_steps = 5;
        d.horizon = 4;
        d.inertial_hidden = 16;
        d.buffer_hidden = 12;
        d.shared_hidden = 20;
        d.branch_hidden = 16;
        let params = init_params(&d, seed).unwrap();
        let mut seq = generate_motion(&model, MotionKind::ForwardWalk, 2.0, 60.0, seed).unwrap();
        simulate_imus(&model, &mut seq, NoiseParams::default(), AccelConvention::Proper, seed)
            .unwrap();
        (model, params, seq)
    }

    #[test]
    fn step_replaces_first_entry_and_pushes() {
        let (model, params, seq) = pipeline_fixture(3);
        let m = params.descriptor.input_steps;
        let init: Vec<_> = (0..m - 1)
            .map(|t| {
                let s = seq.step(t);
                (
                    s.configuration.joint_positions().clone(),
                    s.velocity.joint_velocities().clone(),
                )
            })
            .collect();
        let mut buffer = JointStateBuffer::init(m - 1, &init).unwrap();
        let window = crate::training::input_window(&seq, m - 1, m).unwrap();
        let truth = seq.step(m - 1);
        let base = BaseState {
            position: *truth.configuration.base_position(),
            rotation: *truth.configuration.base_rotation(),
            linear: *truth.velocity.base_linear(),
            angular: *truth.velocity.base_angular(),
        };
        let outcome = step(
            &model,
            &params,
            &mut buffer,
            &window,
            &base,
            &truth.link_twists,
            &StepOptions::default(),
        )
        .unwrap();
        // The newest buffer entry equals the returned first step.
        let snap = buffer.snapshot();
        for j in 0..model.dof() {
            assert_eq!(snap.position(m - 2, j), outcome.window.position(0, j));
            assert_eq!(snap.velocity(m - 2, j), outcome.window.velocity(0, j));
        }
        assert!(outcome.report.is_some());
    }

    #[test]
    fn identical_steps_differ_only_through_buffer() {
        let (model, params, seq) = pipeline_fixture(4);
        let m = params.descriptor.input_steps;
        let init: Vec<_> = (0..m - 1)
            .map(|t| {
                let s = seq.step(t);
                (
                    s.configuration.joint_positions().clone(),
                    s.velocity.joint_velocities().clone(),
                )
            })
            .collect();
        let options = StepOptions {
            mode: BufferMode::Raw,
            ..StepOptions::default()
        };
        let window = crate::training::input_window(&seq, m - 1, m).unwrap();
        let truth = seq.step(m - 1);
        let base = BaseState {
            position: *truth.configuration.base_position(),
            rotation: *truth.configuration.base_rotation(),
            linear: *truth.velocity.base_linear(),
            angular: *truth.velocity.base_angular(),
        };
        // Same window on identically initialized buffers: identical output.
        let mut b1 = JointStateBuffer::init(m - 1, &init).unwrap();
        let mut b2 = JointStateBuffer::init(m - 1, &init).unwrap();
        let o1 = step(&model, &params, &mut b1, &window, &base, &truth.link_twists, &options)
            .unwrap();
        let o2 = step(&model, &params, &mut b2, &window, &base, &truth.link_twists, &options)
            .unwrap();
        assert_eq!(o1.window, o2.window);
        assert_eq!(b1, b2);
        // Second call on the evolved buffer differs (buffer is the only
        // state).
        let o3 = step(&model, &params, &mut b1, &window, &base, &truth.link_twists, &options)
            .unwrap();
        assert_ne!(o1.window, o3.window);
        // With a zeroed buffer branch the evolution no longer matters.
        let zopts = StepOptions {
            mode: BufferMode::Zero,
            ..StepOptions::default()
        };
        let mut zb = JointStateBuffer::init(m - 1, &init).unwrap();
        let z1 = step(&model, &params, &mut zb, &window, &base, &truth.link_twists, &zopts)
            .unwrap();
        let z2 = step(&model, &params, &mut zb, &window, &base, &truth.link_twists, &zopts)
            .unwrap();
        assert_eq!(z1.window, z2.window);
    }

    #[test]
    fn closed_loop_buffer_matches_reference_replay() {
        let (model, params, seq) = pipeline_fixture(6);
        let m = params.descriptor.input_steps;
        let options = StepOptions::default();
        let records = closed_loop(&model, &params, &seq, &options).unwrap();
        assert_eq!(records.len(), seq.len() - (m - 1));
        // Replay manually, checking after every step that the buffer holds
        // the last M-1 refined first-step predictions (or initial truth).
        let init: Vec<_> = (0..m - 1)
            .map(|t| {
                let s = seq.step(t);
                (
                    s.configuration.joint_positions().clone(),
                    s.velocity.joint_velocities().clone(),
                )
            })
            .collect();
        let mut buffer = JointStateBuffer::init(m - 1, &init).unwrap();
        let mut expected: Vec<(DVector<f64>, DVector<f64>)> = init.clone();
        for record in &records {
            let window = crate::training::input_window(&seq, record.anchor, m).unwrap();
            let truth = seq.step(record.anchor);
            let base = BaseState {
                position: *truth.configuration.base_position(),
                rotation: *truth.configuration.base_rotation(),
                linear: *truth.velocity.base_linear(),
                angular: *truth.velocity.base_angular(),
            };
            let outcome = step(
                &model,
                &params,
                &mut buffer,
                &window,
                &base,
                &truth.link_twists,
                &options,
            )
            .unwrap();
            assert_eq!(outcome.window, record.window);
            expected.push((
                outcome.window.positions_at(0),
                outcome.window.velocities_at(0),
            ));
            let tail = &expected[expected.len() - (m - 1)..];
            let snap = buffer.snapshot();
            for (t, (s, sdot)) in tail.iter().enumerate() {
                for j in 0..model.dof() {
                    assert_eq!(snap.position(t, j), s[j]);
                    assert_eq!(snap.velocity(t, j), sdot[j]);
                }
            }
        }
    }

    #[test]
    fn closed_loop_is_deterministic() {
        let (model, params, seq) = pipeline_fixture(8);
        let options = StepOptions::default();
        let a = closed_loop(&model, &params, &seq, &options).unwrap();
        let b = closed_loop(&model, &params, &seq, &options).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.window, y.window);
            assert_eq!(x.report, y.report);
        }
    }

    #[test]
    fn closed_loop_too_short_rejected() {
        let (model, params, seq) = pipeline_fixture(9);
        let short = crate::data::RecordedSequence::new(
            seq.rate(),
            seq.kind(),
            seq.model_hash().to_string(),
            seq.steps()[..3].to_vec(),
        );
        assert!(matches!(
            closed_loop(&model, &params, &short, &StepOptions::default()),
            Err(RuntimeError::TooShort { .. })
        ));
    }

    #[test]
    fn refinement_pulls_toward_twist_targets() {
        // The refined state should track the target twists much better than
        // the perturbed guess did.
        let (model, mut problem, s, sdot) = feasible_problem(123);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = model.dof();
        for j in 0..n {
            problem.guess_positions[j] = s[j] + 0.05 * rng.gen_range(-1.0..1.0f64);
            problem.guess_velocities[j] = sdot[j] + 0.05 * rng.gen_range(-1.0..1.0f64);
        }
        let before = constraint_residuals(
            &model,
            &problem,
            &problem.guess_positions,
            &problem.guess_velocities,
        )
        .unwrap()
        .into_iter()
        .fold(0.0f64, f64::max);
        let (rs, rsdot, report) = refine_first_step(&model, &problem).unwrap();
        let after = constraint_residuals(&model, &problem, &rs, &rsdot)
            .unwrap()
            .into_iter()
            .fold(0.0f64, f64::max);
        assert!(before > problem.epsilon, "perturbation should be infeasible");
        assert!(after <= problem.epsilon * (1.0 + 1e-9));
        assert!(after < before / 10.0);
        assert!(report.iterations > 0);
        let _ = vec_of(&[0.0]);
    }
}

