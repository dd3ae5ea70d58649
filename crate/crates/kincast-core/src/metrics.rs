//! Horizon-resolved accuracy metrics.
//!
//! Joint-space errors (pMAE, vMAE) average absolute errors over a joint
//! subset; task-space errors (pRMSE, oRMSE, vRMSE) push predicted joints
//! through forward/differential kinematics with the ground-truth base state
//! and compare instrumented-link poses and twists. Each metric is reported
//! at selected prediction timestamps (1-based into the horizon).

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::kinematics::{differential_kinematics, forward_kinematics, rotation_angle};
use crate::losses::LinkReferenceWindow;
use crate::model::{Configuration, ModelError, RigidBodyModel, SystemVelocity};
use crate::network::PredictionWindow;

/// Default evaluation timestamps into a 60-step horizon.
pub const DEFAULT_EVAL_STEPS: [usize; 3] = [1, 30, 60];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("misaligned streams: {predictions} predictions vs {references} references")]
    MisalignedStreams {
        predictions: usize,
        references: usize,
    },
    #[error("empty evaluation stream")]
    EmptyStream,
    #[error("empty joint subset")]
    EmptySubset,
    #[error("joint index {joint} out of range for {dof} joints")]
    JointOutOfRange { joint: usize, dof: usize },
    #[error("evaluation step {step} outside horizon 1..={horizon}")]
    StepOutOfRange { step: usize, horizon: usize },
    #[error("instance {instance}: prediction and reference shapes disagree")]
    ShapeMismatch { instance: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Ground truth paired with one prediction window: the true joint states
/// over the horizon plus the instrumented-link references used for
/// task-space errors.
#[derive(Debug, Clone)]
pub struct EvalReference {
    pub joints: PredictionWindow,
    pub kinematics: LinkReferenceWindow,
}

/// All five metrics evaluated at one prediction timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsAtStep {
    /// 1-based timestamp into the prediction horizon.
    pub step: usize,
    /// Mean absolute joint position error, degrees.
    pub pmae_deg: f64,
    /// Mean absolute joint velocity error, degrees per second.
    pub vmae_deg_s: f64,
    /// Root-mean-square instrumented-link position error, meters.
    pub prmse_m: f64,
    /// Root-mean-square link orientation geodesic error, degrees.
    pub ormse_deg: f64,
    /// Root-mean-square link linear velocity error, meters per second.
    pub vrmse_linear_m_s: f64,
    /// Root-mean-square link angular velocity error, degrees per second.
    pub vrmse_angular_deg_s: f64,
}

/// Metric rows for every requested evaluation timestamp.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsAtStep>,
}

impl MetricsReport {
    /// Row for a given 1-based timestamp, if it was evaluated.
    pub fn at(&self, step: usize) -> Option<&MetricsAtStep> {
        self.rows.iter().find(|r| r.step == step)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,pmae_deg,vmae_deg_s,prmse_m,ormse_deg,vrmse_linear_m_s,vrmse_angular_deg_s\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step,
                r.pmae_deg,
                r.vmae_deg_s,
                r.prmse_m,
                r.ormse_deg,
                r.vrmse_linear_m_s,
                r.vrmse_angular_deg_s
            ));
        }
        out
    }
}

/// Compute the metric suite over aligned prediction/reference streams.
///
/// `joint_subset` selects which joints enter pMAE/vMAE (task-space metrics
/// always use every instrumented link); `eval_steps` are 1-based timestamps
/// into the horizon.
pub fn compute_metrics(
    model: &RigidBodyModel,
    predictions: &[PredictionWindow],
    references: &[EvalReference],
    joint_subset: &[usize],
    eval_steps: &[usize],
) -> Result<MetricsReport, MetricsError> {
    if predictions.len() != references.len() {
        return Err(MetricsError::MisalignedStreams {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyStream);
    }
    if joint_subset.is_empty() {
        return Err(MetricsError::EmptySubset);
    }
    let dof = model.dof();
    for &j in joint_subset {
        if j >= dof {
            return Err(MetricsError::JointOutOfRange { joint: j, dof });
        }
    }
    let horizon = predictions[0].horizon();
    for &step in eval_steps {
        if step == 0 || step > horizon {
            return Err(MetricsError::StepOutOfRange { step, horizon });
        }
    }
    for (i, (pred, reference)) in predictions.iter().zip(references).enumerate() {
        if pred.horizon() != horizon
            || pred.dof() != dof
            || reference.joints.horizon() != horizon
            || reference.joints.dof() != dof
            || reference.kinematics.horizon() != horizon
        {
            return Err(MetricsError::ShapeMismatch { instance: i });
        }
    }

    let mut rows = Vec::with_capacity(eval_steps.len());
    for &step in eval_steps {
        let t = step - 1;
        let mut abs_p = 0.0;
        let mut abs_v = 0.0;
        let mut sq_p = 0.0;
        let mut sq_o = 0.0;
        let mut sq_vl = 0.0;
        let mut sq_va = 0.0;
        let mut joint_count = 0usize;
        let mut link_count = 0usize;
        for (pred, reference) in predictions.iter().zip(references) {
            for &j in joint_subset {
                abs_p += (pred.position(t, j) - reference.joints.position(t, j))
                    .abs()
                    .to_degrees();
                abs_v += (pred.velocity(t, j) - reference.joints.velocity(t, j))
                    .abs()
                    .to_degrees();
                joint_count += 1;
            }
            let base = reference.kinematics.base(t);
            let q = Configuration::new(base.position, base.rotation, pred.positions_at(t))?;
            let nu = SystemVelocity::new(base.linear, base.angular, pred.velocities_at(t))?;
            let fk = forward_kinematics(model, &q);
            for (slot, &link) in reference.kinematics.links().iter().enumerate() {
                let truth = reference.kinematics.reference(t, slot);
                let pose = fk.pose(link);
                sq_p += (pose.position - truth.position).norm_squared();
                let angle = rotation_angle(&pose.rotation, &truth.rotation).to_degrees();
                sq_o += angle * angle;
                let twist = differential_kinematics(model, &fk, &nu, link).as_vector();
                let dlin = Vector3::new(
                    twist[0] - truth.twist[0],
                    twist[1] - truth.twist[1],
                    twist[2] - truth.twist[2],
                );
                let dang = Vector3::new(
                    twist[3] - truth.twist[3],
                    twist[4] - truth.twist[4],
                    twist[5] - truth.twist[5],
                );
                sq_vl += dlin.norm_squared();
                sq_va += dang.norm_squared();
                link_count += 1;
            }
        }
        let jc = joint_count as f64;
        let lc = link_count as f64;
        rows.push(MetricsAtStep {
            step,
            pmae_deg: abs_p / jc,
            vmae_deg_s: abs_v / jc,
            prmse_m: (sq_p / lc).sqrt(),
            ormse_deg: (sq_o / lc).sqrt(),
            vrmse_linear_m_s: (sq_vl / lc).sqrt(),
            vrmse_angular_deg_s: (sq_va / lc).sqrt().to_degrees(),
        });
    }
    Ok(MetricsReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_motion, MotionKind};
    use crate::model::reference_model;

    /// Build aligned (prediction, reference) pairs from a generated motion,
    /// with predictions equal to the truth.
    fn truth_stream(
        model: &RigidBodyModel,
        horizon: usize,
        count: usize,
    ) -> (Vec<PredictionWindow>, Vec<EvalReference>) {
        let seq = generate_motion(model, MotionKind::ForwardWalk, 4.0, 60.0, 31).unwrap();
        let mut predictions = Vec::new();
        let mut references = Vec::new();
        for i in 0..count {
            let start = i * 3;
            let states: Vec<_> = (start..start + horizon)
                .map(|f| {
                    let s = seq.step(f);
                    (s.configuration.clone(), s.velocity.clone())
                })
                .collect();
            let mut joints = PredictionWindow::zeros(horizon, model.dof());
            for (t, (q, nu)) in states.iter().enumerate() {
                for j in 0..model.dof() {
                    joints.set_position(t, j, q.joint_positions()[j]);
                    joints.set_velocity(t, j, nu.joint_velocities()[j]);
                }
            }
            let kinematics = LinkReferenceWindow::from_states(model, &states);
            predictions.push(joints.clone());
            references.push(EvalReference { joints, kinematics });
        }
        (predictions, references)
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let model = reference_model();
        let (predictions, references) = truth_stream(&model, 60, 3);
        let subset: Vec<usize> = (0..model.dof()).collect();
        let report =
            compute_metrics(&model, &predictions, &references, &subset, &DEFAULT_EVAL_STEPS)
                .unwrap();
        for row in &report.rows {
            assert_eq!(row.pmae_deg, 0.0);
            assert_eq!(row.vmae_deg_s, 0.0);
            assert_eq!(row.prmse_m, 0.0);
            assert_eq!(row.ormse_deg, 0.0);
            assert_eq!(row.vrmse_linear_m_s, 0.0);
            assert_eq!(row.vrmse_angular_deg_s, 0.0);
        }
    }

    #[test]
    fn constant_one_degree_offset_gives_exact_pmae() {
        // Zero ground truth with every predicted joint at +1 degree: each
        // absolute error converts to exactly 1.0 deg, so the mean is exact.
        let model = reference_model();
        let (_, references) = truth_stream(&model, 8, 2);
        let mut references = references;
        for r in &mut references {
            r.joints = PredictionWindow::zeros(8, model.dof());
        }
        let offset = 1.0f64.to_radians();
        let mut predictions = Vec::new();
        for _ in 0..references.len() {
            let mut w = PredictionWindow::zeros(8, model.dof());
            for t in 0..8 {
                for j in 0..model.dof() {
                    w.set_position(t, j, offset);
                }
            }
            predictions.push(w);
        }
        let subset: Vec<usize> = (0..model.dof()).collect();
        let report =
            compute_metrics(&model, &predictions, &references, &subset, &[1, 8]).unwrap();
        for row in &report.rows {
            assert_eq!(row.pmae_deg, 1.0);
            assert_eq!(row.vmae_deg_s, 0.0);
        }
    }

    #[test]
    fn joint_subset_restricts_joint_metrics_only() {
        let model = reference_model();
        let (predictions, references) = truth_stream(&model, 10, 2);
        let mut predictions = predictions;
        // Perturb only joint 0; a subset excluding it sees zero joint error.
        for w in &mut predictions {
            for t in 0..10 {
                w.set_position(t, 0, w.position(t, 0) + 0.2);
            }
        }
        let with = compute_metrics(&model, &predictions, &references, &[0, 1], &[5]).unwrap();
        let without = compute_metrics(&model, &predictions, &references, &[1, 2], &[5]).unwrap();
        assert!(with.rows[0].pmae_deg > 1.0);
        assert_eq!(without.rows[0].pmae_deg, 0.0);
        // Task-space metrics ignore the subset: both see the same link error.
        assert_eq!(with.rows[0].prmse_m, without.rows[0].prmse_m);
        assert!(with.rows[0].prmse_m >= 0.0);
    }

    #[test]
    fn matches_brute_force_oracle() {
        use nalgebra::DVector;
        use rand::{Rng, SeedableRng};
        let model = reference_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let horizon = 6;
        let (mut predictions, references) = truth_stream(&model, horizon, 4);
        for w in &mut predictions {
            for v in w.flat_mut().iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let subset = [9usize, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 8];
        let steps = [1usize, 3, 6];
        let report =
            compute_metrics(&model, &predictions, &references, &subset, &steps).unwrap();

        // Naive per-step recomputation with scalar loops.
        for (row, &step) in report.rows.iter().zip(&steps) {
            let t = step - 1;
            let mut abs_p = Vec::new();
            let mut abs_v = Vec::new();
            let mut sq_p = Vec::new();
            let mut sq_o = Vec::new();
            let mut sq_vl = Vec::new();
            let mut sq_va = Vec::new();
            for (w, r) in predictions.iter().zip(&references) {
                for &j in &subset {
                    abs_p.push((w.position(t, j) - r.joints.position(t, j)).abs().to_degrees());
                    abs_v.push((w.velocity(t, j) - r.joints.velocity(t, j)).abs().to_degrees());
                }
                let base = r.kinematics.base(t);
                let q = Configuration::new(
                    base.position,
                    base.rotation,
                    DVector::from_fn(model.dof(), |j, _| w.position(t, j)),
                )
                .unwrap();
                let nu = SystemVelocity::new(
                    base.linear,
                    base.angular,
                    DVector::from_fn(model.dof(), |j, _| w.velocity(t, j)),
                )
                .unwrap();
                let fk = forward_kinematics(&model, &q);
                for (slot, &link) in r.kinematics.links().iter().enumerate() {
                    let truth = r.kinematics.reference(t, slot);
                    let pose = fk.pose(link);
                    let mut dp = 0.0;
                    for k in 0..3 {
                        let d = pose.position[k] - truth.position[k];
                        dp += d * d;
                    }
                    sq_p.push(dp);
                    let ang = rotation_angle(&pose.rotation, &truth.rotation).to_degrees();
                    sq_o.push(ang * ang);
                    let tw = differential_kinematics(&model, &fk, &nu, link).as_vector();
                    let mut dl = 0.0;
                    let mut da = 0.0;
                    for k in 0..3 {
                        let e = tw[k] - truth.twist[k];
                        dl += e * e;
                        let e = tw[k + 3] - truth.twist[k + 3];
                        da += e * e;
                    }
                    sq_vl.push(dl);
                    sq_va.push(da);
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!((row.pmae_deg - mean(&abs_p)).abs() < 1e-12);
            assert!((row.vmae_deg_s - mean(&abs_v)).abs() < 1e-12);
            assert!((row.prmse_m - mean(&sq_p).sqrt()).abs() < 1e-12);
            assert!((row.ormse_deg - mean(&sq_o).sqrt()).abs() < 1e-12);
            assert!((row.vrmse_linear_m_s - mean(&sq_vl).sqrt()).abs() < 1e-12);
            assert!((row.vrmse_angular_deg_s - mean(&sq_va).sqrt().to_degrees()).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_and_argument_errors() {
        let model = reference_model();
        let (predictions, references) = truth_stream(&model, 5, 2);
        assert!(matches!(
            compute_metrics(&model, &predictions[..1], &references, &[0], &[1]),
            Err(MetricsError::MisalignedStreams { .. })
        ));
        assert!(matches!(
            compute_metrics(&model, &predictions, &references, &[], &[1]),
            Err(MetricsError::EmptySubset)
        ));
        assert!(matches!(
            compute_metrics(&model, &predictions, &references, &[0], &[6]),
            Err(MetricsError::StepOutOfRange { step: 6, horizon: 5 })
        ));
        assert!(matches!(
            compute_metrics(&model, &predictions, &references, &[0], &[0]),
            Err(MetricsError::StepOutOfRange { .. })
        ));
        assert!(matches!(
            compute_metrics(&model, &predictions, &references, &[99], &[1]),
            Err(MetricsError::JointOutOfRange { joint: 99, .. })
        ));
        assert!(matches!(
            compute_metrics(&model, &[], &[], &[0], &[1]),
            Err(MetricsError::EmptyStream)
        ));
    }

    #[test]
    fn report_serializes_to_csv_and_json() {
        let model = reference_model();
        let (predictions, references) = truth_stream(&model, 4, 1);
        let report =
            compute_metrics(&model, &predictions, &references, &[0, 1], &[1, 4]).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("step,pmae_deg"));
        assert_eq!(csv.lines().count(), 3);
        let json = report.to_json();
        assert!(json.contains("\"rows\""));
        assert!(json.contains("\"step\": 1"));
    }
}
