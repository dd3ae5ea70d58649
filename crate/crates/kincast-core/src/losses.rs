//! Training losses: the data-fit terms on predicted joint positions and
//! velocities, and the kinematic-consistency terms that push predicted
//! states to reproduce reference link poses (through forward kinematics)
//! and link twists (through differential kinematics).
//!
//! Every loss returns its value together with an analytic gradient shaped
//! like the prediction window (K x 2 x n); channel 0 carries position
//! gradients, channel 1 velocity gradients. Base pose and twist always come
//! from ground truth and are never differentiated.

use nalgebra::{Matrix3, Vector3, Vector6};
use thiserror::Error;

use crate::kinematics::{
    differential_kinematics, forward_kinematics, orientation_distance, vjp_dk, vjp_fk,
};
use crate::model::{Configuration, ModelError, RigidBodyModel, SystemVelocity};
use crate::network::PredictionWindow;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("reference window missing instrumented link {link}")]
    MissingLink { link: usize },
    #[error("negative loss weight {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub position: f64,
    pub velocity: f64,
    pub fk: f64,
    pub dk: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            position: 1.0,
            velocity: 1.0,
            fk: 0.1,
            dk: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("position", self.position),
            ("velocity", self.velocity),
            ("fk", self.fk),
            ("dk", self.dk),
        ] {
            if !(value >= 0.0) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Ground-truth base state at one step: pose plus twist.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseState {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

/// Reference pose and twist of one instrumented link at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkReference {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub twist: Vector6<f64>,
}

/// Per-step references over a prediction horizon: ground-truth base states
/// and, for each instrumented link, its reference pose and twist.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkReferenceWindow {
    links: Vec<usize>,
    base: Vec<BaseState>,
    /// Indexed `[step][link slot]`.
    refs: Vec<Vec<LinkReference>>,
}

impl LinkReferenceWindow {
    pub fn new(
        links: Vec<usize>,
        base: Vec<BaseState>,
        refs: Vec<Vec<LinkReference>>,
    ) -> Result<Self, LossError> {
        if refs.len() != base.len() {
            return Err(LossError::ShapeMismatch {
                what: "reference window steps",
                expected: base.len(),
                actual: refs.len(),
            });
        }
        for row in &refs {
            if row.len() != links.len() {
                return Err(LossError::ShapeMismatch {
                    what: "reference links per step",
                    expected: links.len(),
                    actual: row.len(),
                });
            }
        }
        Ok(Self { links, base, refs })
    }

    /// Build references by evaluating the model on a ground-truth state
    /// trajectory: link poses from forward kinematics, twists from
    /// differential kinematics, for every instrumented link.
    pub fn from_states(
        model: &RigidBodyModel,
        states: &[(Configuration, SystemVelocity)],
    ) -> Self {
        let links = model.instrumented_links().to_vec();
        let mut base = Vec::with_capacity(states.len());
        let mut refs = Vec::with_capacity(states.len());
        for (q, nu) in states {
            let fk = forward_kinematics(model, q);
            base.push(BaseState {
                position: *q.base_position(),
                rotation: *q.base_rotation(),
                linear: *nu.base_linear(),
                angular: *nu.base_angular(),
            });
            let row = links
                .iter()
                .map(|&l| {
                    let pose = fk.pose(l);
                    let twist = differential_kinematics(model, &fk, nu, l);
                    LinkReference {
                        position: pose.position,
                        rotation: pose.rotation,
                        twist: twist.as_vector(),
                    }
                })
                .collect();
            refs.push(row);
        }
        Self { links, base, refs }
    }

    pub fn horizon(&self) -> usize {
        self.base.len()
    }

    pub fn links(&self) -> &[usize] {
        &self.links
    }

    pub fn base(&self, step: usize) -> &BaseState {
        &self.base[step]
    }

    pub fn reference(&self, step: usize, slot: usize) -> &LinkReference {
        &self.refs[step][slot]
    }

    fn check_covers(&self, model: &RigidBodyModel) -> Result<(), LossError> {
        for &l in model.instrumented_links() {
            if !self.links.contains(&l) {
                return Err(LossError::MissingLink { link: l });
            }
        }
        Ok(())
    }
}

/// One loss term: scalar value plus gradient shaped like the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: PredictionWindow,
}

impl LossTerm {
    pub fn zero(horizon: usize, dof: usize) -> Self {
        Self {
            value: 0.0,
            grad: PredictionWindow::zeros(horizon, dof),
        }
    }
}

fn check_shapes(
    pred: &PredictionWindow,
    target: &PredictionWindow,
) -> Result<(), LossError> {
    if pred.flat().len() != target.flat().len() {
        return Err(LossError::ShapeMismatch {
            what: "prediction vs target",
            expected: target.flat().len(),
            actual: pred.flat().len(),
        });
    }
    Ok(())
}

/// Position data-fit: `(1/2K) sum_t ||s_pred - s_target||^2`.
pub fn position_loss(
    pred: &PredictionWindow,
    target: &PredictionWindow,
) -> Result<LossTerm, LossError> {
    check_shapes(pred, target)?;
    let k = pred.horizon() as f64;
    let mut value = 0.0;
    let mut grad = PredictionWindow::zeros(pred.horizon(), pred.dof());
    for t in 0..pred.horizon() {
        for j in 0..pred.dof() {
            let d = pred.position(t, j) - target.position(t, j);
            value += d * d;
            grad.set_position(t, j, d / k);
        }
    }
    Ok(LossTerm {
        value: value / (2.0 * k),
        grad,
    })
}

/// Velocity data-fit: `(1/2K) sum_t ||sdot_pred - sdot_target||^2`.
pub fn velocity_loss(
    pred: &PredictionWindow,
    target: &PredictionWindow,
) -> Result<LossTerm, LossError> {
    check_shapes(pred, target)?;
    let k = pred.horizon() as f64;
    let mut value = 0.0;
    let mut grad = PredictionWindow::zeros(pred.horizon(), pred.dof());
    for t in 0..pred.horizon() {
        for j in 0..pred.dof() {
            let d = pred.velocity(t, j) - target.velocity(t, j);
            value += d * d;
            grad.set_velocity(t, j, d / k);
        }
    }
    Ok(LossTerm {
        value: value / (2.0 * k),
        grad,
    })
}

/// Combined data-fit over both channels:
/// `(1/2K) sum_t (||s_pred - s||^2 + ||sdot_pred - sdot||^2)`, gradient
/// `(1/K)(pred - target)`.
pub fn data_loss(
    pred: &PredictionWindow,
    target: &PredictionWindow,
) -> Result<LossTerm, LossError> {
    let pos = position_loss(pred, target)?;
    let vel = velocity_loss(pred, target)?;
    let mut grad = pos.grad;
    grad.flat_mut().zip_apply(vel.grad.flat(), |g, v| *g += v);
    Ok(LossTerm {
        value: pos.value + vel.value,
        grad,
    })
}

/// Forward-kinematics consistency: mean over links and steps of the squared
/// position residual plus the squared Frobenius orientation residual of the
/// instrumented link poses, with predicted joint positions and ground-truth
/// base pose. Gradient lands in the position channel.
pub fn fk_loss(
    model: &RigidBodyModel,
    pred: &PredictionWindow,
    refs: &LinkReferenceWindow,
) -> Result<LossTerm, LossError> {
    refs.check_covers(model)?;
    let k = pred.horizon();
    if refs.horizon() != k {
        return Err(LossError::ShapeMismatch {
            what: "reference horizon",
            expected: k,
            actual: refs.horizon(),
        });
    }
    let d = refs.links().len();
    let scale = 1.0 / (d as f64 * k as f64);
    let mut value = 0.0;
    let mut grad = PredictionWindow::zeros(k, pred.dof());
    for t in 0..k {
        let base = refs.base(t);
        let q = Configuration::new(base.position, base.rotation, pred.positions_at(t))?;
        let fk = forward_kinematics(model, &q);
        for (slot, &link) in refs.links().iter().enumerate() {
            let reference = refs.reference(t, slot);
            let pose = fk.pose(link);
            let dp = pose.position - reference.position;
            value += scale * (dp.norm_squared() + orientation_distance(&pose.rotation, &reference.rotation));
            let p_bar = 2.0 * scale * dp;
            let r_bar = 2.0 * scale * (pose.rotation - reference.rotation);
            let g = vjp_fk(model, &fk, link, &p_bar, &r_bar);
            for j in 0..pred.dof() {
                let cur = grad.position(t, j);
                grad.set_position(t, j, cur + g[j]);
            }
        }
    }
    Ok(LossTerm { value, grad })
}

/// Differential-kinematics consistency: mean over links and steps of the
/// squared twist residual of the instrumented links, with predicted joint
/// state and ground-truth base pose and twist. Gradient lands in both
/// channels.
pub fn dk_loss(
    model: &RigidBodyModel,
    pred: &PredictionWindow,
    refs: &LinkReferenceWindow,
) -> Result<LossTerm, LossError> {
    refs.check_covers(model)?;
    let k = pred.horizon();
    if refs.horizon() != k {
        return Err(LossError::ShapeMismatch {
            what: "reference horizon",
            expected: k,
            actual: refs.horizon(),
        });
    }
    let d = refs.links().len();
    let scale = 1.0 / (d as f64 * k as f64);
    let mut value = 0.0;
    let mut grad = PredictionWindow::zeros(k, pred.dof());
    for t in 0..k {
        let base = refs.base(t);
        let q = Configuration::new(base.position, base.rotation, pred.positions_at(t))?;
        let nu = SystemVelocity::new(base.linear, base.angular, pred.velocities_at(t))?;
        let fk = forward_kinematics(model, &q);
        for (slot, &link) in refs.links().iter().enumerate() {
            let reference = refs.reference(t, slot);
            let twist = differential_kinematics(model, &fk, &nu, link).as_vector();
            let residual = twist - reference.twist;
            value += scale * residual.norm_squared();
            let c = 2.0 * scale * residual;
            let (gs, gv) = vjp_dk(model, &fk, &nu, link, &c);
            for j in 0..pred.dof() {
                grad.set_position(t, j, grad.position(t, j) + gs[j]);
                grad.set_velocity(t, j, grad.velocity(t, j) + gv[j]);
            }
        }
    }
    Ok(LossTerm { value, grad })
}

/// Weighted combination of the four loss terms.
pub fn total_loss(
    weights: &LossWeights,
    position: &LossTerm,
    velocity: &LossTerm,
    fk: &LossTerm,
    dk: &LossTerm,
) -> Result<LossTerm, LossError> {
    weights.validate()?;
    let horizon = position.grad.horizon();
    let dof = position.grad.dof();
    let mut out = LossTerm::zero(horizon, dof);
    for (w, term) in [
        (weights.position, position),
        (weights.velocity, velocity),
        (weights.fk, fk),
        (weights.dk, dk),
    ] {
        out.value += w * term.value;
        out.grad
            .flat_mut()
            .zip_apply(term.grad.flat(), |g, t| *g += w * t);
    }
    Ok(out)
}

/// Per-term loss values of one evaluation, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub position: f64,
    pub velocity: f64,
    pub fk: f64,
    pub dk: f64,
    pub total: f64,
}

/// Evaluate all four terms and their weighted combination for one sample.
/// Terms with zero weight are skipped entirely (their value reports as 0).
pub fn evaluate_losses(
    model: &RigidBodyModel,
    weights: &LossWeights,
    pred: &PredictionWindow,
    target: &PredictionWindow,
    refs: &LinkReferenceWindow,
) -> Result<(LossBreakdown, LossTerm), LossError> {
    weights.validate()?;
    let horizon = pred.horizon();
    let dof = pred.dof();
    let pos = position_loss(pred, target)?;
    let vel = velocity_loss(pred, target)?;
    let fk = if weights.fk > 0.0 {
        fk_loss(model, pred, refs)?
    } else {
        LossTerm::zero(horizon, dof)
    };
    let dk = if weights.dk > 0.0 {
        dk_loss(model, pred, refs)?
    } else {
        LossTerm::zero(horizon, dof)
    };
    let combined = total_loss(weights, &pos, &vel, &fk, &dk)?;
    Ok((
        LossBreakdown {
            position: pos.value,
            velocity: vel.value,
            fk: fk.value,
            dk: dk.value,
            total: combined.value,
        },
        combined,
    ))
}
