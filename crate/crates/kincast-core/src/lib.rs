//! Physics-informed prediction of full-body joint kinematics from a sparse
//! set of body-worn inertial sensors.
//!
//! The crate is organized around a small set of layers:
//!
//! - [`model`]: floating-base rigid-body trees, configurations, velocities.
//! - [`kinematics`]: forward and differential kinematics with closed-form
//!   reverse-mode derivatives.
//! - [`network`]: the dual-branch window predictor and its gradients.
//! - [`losses`]: data and kinematic-consistency training losses.
//! - [`data`]: synthetic motion generation, sensor simulation, dataset files.
//! - [`training`]: windowing, the optimizer loop, checkpoints.
//! - [`runtime`]: the joint-state buffer, constrained refinement, and the
//!   closed-loop prediction pipeline.
//! - [`metrics`]: horizon-resolved accuracy summaries.

pub mod data;
pub mod kinematics;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod network;
pub mod runtime;
pub mod training;

pub use data::io::{check_imu_counts, ensure_model_match, read_dataset, write_dataset};
pub use data::{
    generate_motion, simulate_imus, AccelConvention, DataError, ImuReading, MotionKind,
    NoiseParams, RecordedSequence, TimeStep,
};
pub use kinematics::{
    differential_kinematics, dk_state_jacobian, forward_kinematics, link_jacobian,
    orientation_distance, rotation_angle, vjp_dk, vjp_fk, ForwardKinematics, LinkPose, LinkTwist,
};
pub use metrics::{
    compute_metrics, EvalReference, MetricsAtStep, MetricsError, MetricsReport,
    DEFAULT_EVAL_STEPS,
};
pub use losses::{
    data_loss, dk_loss, evaluate_losses, fk_loss, position_loss, total_loss, velocity_loss,
    BaseState, LinkReference, LinkReferenceWindow, LossBreakdown, LossError, LossTerm,
    LossWeights,
};
pub use model::{
    clamp_to_limits, neutral_configuration, parse_model, reference_model, serialize_model,
    Configuration, JointKind, JointSpec, LinkSpec, ModelError, RigidBodyModel, SystemVelocity,
};
pub use training::{
    adam_step, buffer_snapshot, input_window, load_checkpoint, loss_log_csv, lr_at_epoch,
    make_windows, reference_window, save_checkpoint, split_sequences, target_window, train,
    AdamState, Checkpoint, EpochRecord, TrainConfig, TrainError, TrainingSample,
};
pub use network::{
    backward, elu, elu_prime, forward, init_params, ActivationCache, BufferSnapshot, InputWindow,
    Layer, NetworkDescriptor, NetworkError, Normalization, ParamGrads, PredictionWindow,
    PredictorParams, IMU_FEATURES,
};
pub use runtime::{
    closed_loop, refine_first_step, step, BufferMode, JointStateBuffer, RefinementProblem,
    RefinementReport, RuntimeError, StepOptions, StepOutcome, StepRecord, DEFAULT_EPSILON,
    DEFAULT_MAX_INNER, DEFAULT_MAX_OUTER,
};
