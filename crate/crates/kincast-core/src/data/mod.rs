//! Synthetic motion generation and inertial sensor simulation.
//!
//! Trajectories are analytic: each joint follows an envelope-gated sum of
//! phase-locked sinusoids, so velocities are exact derivatives and every
//! stored link pose/twist comes from the kinematics engine evaluated on the
//! stored configuration. Sensor readings are derived afterwards, with
//! accelerations from second-order central differences of link positions.

pub mod io;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::kinematics::{differential_kinematics, forward_kinematics};
use crate::model::{neutral_configuration, Configuration, ModelError, RigidBodyModel, SystemVelocity};

/// Standard gravity, m/s^2, pointing down the inertial z axis.
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sequence too short: {frames} frames, need at least {min}")]
    TooShort { frames: usize, min: usize },
    #[error("sequence has no sensor readings for step {step}")]
    MissingImu { step: usize },
    #[error("record {index} has {actual} sensor readings, expected {expected}")]
    WrongImuCount {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("dataset file corrupt: {reason}")]
    Corrupt { reason: String },
    #[error("unsupported dataset version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("dataset was written against model hash {found}, expected {expected}")]
    ModelHashMismatch { expected: String, found: String },
    #[error("unknown motion kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Motion archetypes the generator can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    ForwardWalk,
    BackwardWalk,
    SideStep,
    WalkLiftArms,
    WalkWaveArms,
    Stand,
}

impl MotionKind {
    pub const ALL: [MotionKind; 6] = [
        MotionKind::ForwardWalk,
        MotionKind::BackwardWalk,
        MotionKind::SideStep,
        MotionKind::WalkLiftArms,
        MotionKind::WalkWaveArms,
        MotionKind::Stand,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MotionKind::ForwardWalk => "forward_walk",
            MotionKind::BackwardWalk => "backward_walk",
            MotionKind::SideStep => "side_step",
            MotionKind::WalkLiftArms => "walk_lift_arms",
            MotionKind::WalkWaveArms => "walk_wave_arms",
            MotionKind::Stand => "stand",
        }
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == text)
            .ok_or_else(|| DataError::UnknownKind(text.to_string()))
    }

    /// Whether the hips and knees drive locomotion in this kind (false only
    /// for standing).
    pub fn is_locomotion(&self) -> bool {
        !matches!(self, MotionKind::Stand)
    }
}

/// One simulated sensor sample: proper acceleration in the sensor frame and
/// the sensor-to-inertial rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuReading {
    pub acceleration: Vector3<f64>,
    pub orientation: Matrix3<f64>,
}

/// One recorded timestep: system state, instrumented-link ground truth, and
/// (after [`simulate_imus`]) the sensor readings.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeStep {
    pub configuration: Configuration,
    pub velocity: SystemVelocity,
    /// Pose of each instrumented link, in `instrumented_links` order.
    pub link_positions: Vec<Vector3<f64>>,
    pub link_rotations: Vec<Matrix3<f64>>,
    /// Twist (linear; angular) of each instrumented link.
    pub link_twists: Vec<Vector6<f64>>,
    /// One reading per instrumented link; empty until sensors are simulated.
    pub imu: Vec<ImuReading>,
}

/// A uniformly sampled trajectory with ground truth and sensor channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedSequence {
    rate: f64,
    kind: MotionKind,
    model_hash: String,
    steps: Vec<TimeStep>,
}

impl RecordedSequence {
    pub fn new(rate: f64, kind: MotionKind, model_hash: String, steps: Vec<TimeStep>) -> Self {
        Self {
            rate,
            kind,
            model_hash,
            steps,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn kind(&self) -> MotionKind {
        self.kind
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, index: usize) -> &TimeStep {
        &self.steps[index]
    }

    pub fn steps(&self) -> &[TimeStep] {
        &self.steps
    }

    pub fn steps_mut(&mut self) -> &mut [TimeStep] {
        &mut self.steps
    }

    pub fn has_imu(&self) -> bool {
        self.steps.iter().all(|s| !s.imu.is_empty())
    }

    /// Check stored link poses and twists against the kinematics engine.
    /// Returns the largest deviation found.
    pub fn self_consistency(&self, model: &RigidBodyModel) -> f64 {
        let mut worst: f64 = 0.0;
        for step in &self.steps {
            let fk = forward_kinematics(model, &step.configuration);
            for (slot, &link) in model.instrumented_links().iter().enumerate() {
                let pose = fk.pose(link);
                worst = worst.max((pose.position - step.link_positions[slot]).amax());
                worst = worst.max((pose.rotation - step.link_rotations[slot]).amax());
                let twist =
                    differential_kinematics(model, &fk, &step.velocity, link).as_vector();
                worst = worst.max((twist - step.link_twists[slot]).amax());
            }
        }
        worst
    }
}

/// How simulated accelerometers treat gravity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccelConvention {
    /// Proper acceleration: gravity included, as a strapped-down sensor
    /// reads.
    #[default]
    Proper,
    /// Gravity already removed (free acceleration).
    GravityFree,
}

/// Additive sensor noise levels; zeros mean exact readings.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseParams {
    /// Accelerometer noise standard deviation per axis, m/s^2.
    pub accel_std: f64,
    /// Orientation noise: standard deviation of a small random rotation
    /// angle, rad.
    pub orient_std: f64,
}

/// One sinusoidal component of a joint profile.
#[derive(Debug, Clone, Copy)]
struct Harmonic {
    amp: f64,
    omega: f64,
    phase: f64,
}

/// An analytic profile `P(t) = constant + sum amp*sin(omega*t + phase)`.
#[derive(Debug, Clone, Default)]
struct Profile {
    constant: f64,
    harmonics: Vec<Harmonic>,
}

impl Profile {
    fn value(&self, t: f64) -> f64 {
        self.constant
            + self
                .harmonics
                .iter()
                .map(|h| h.amp * (h.omega * t + h.phase).sin())
                .sum::<f64>()
    }

    fn deriv(&self, t: f64) -> f64 {
        self.harmonics
            .iter()
            .map(|h| h.amp * h.omega * (h.omega * t + h.phase).cos())
            .sum()
    }

    /// Largest upward / downward deviation from zero the profile can reach.
    fn deviation(&self) -> (f64, f64) {
        let swing: f64 = self.harmonics.iter().map(|h| h.amp.abs()).sum();
        let up = (self.constant + swing).max(0.0);
        let down = (swing - self.constant).max(0.0);
        (up, down)
    }

    fn scale(&mut self, factor: f64) {
        self.constant *= factor;
        for h in &mut self.harmonics {
            h.amp *= factor;
        }
    }
}

/// Activity envelope: piecewise stand / ramp / walk segments covering the
/// whole duration, C^2 via quintic smoothstep ramps (the second derivative
/// vanishes at segment joins, which keeps central-difference velocity checks
/// at O(h^2) across transitions). Value, derivative, and running integral
/// are all closed-form.
#[derive(Debug, Clone)]
struct Envelope {
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy)]
enum SegmentKind {
    Stand,
    RampUp,
    Walk,
    RampDown,
}

/// Quintic smoothstep on [0, 1]: value, derivative (in u), and integral
/// from 0 to u.
fn smootherstep(u: f64) -> (f64, f64, f64) {
    let e = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
    let de = 30.0 * u * u * (1.0 - u) * (1.0 - u);
    let int = u * u * u * u * (2.5 - 3.0 * u + u * u);
    (e, de, int)
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: f64,
    duration: f64,
    kind: SegmentKind,
    /// Integral of the envelope over [0, start).
    integral_before: f64,
}

impl Envelope {
    fn stand() -> Self {
        Self {
            segments: vec![Segment {
                start: 0.0,
                duration: f64::INFINITY,
                kind: SegmentKind::Stand,
                integral_before: 0.0,
            }],
        }
    }

    /// Alternating stand/walk schedule with jittered segment lengths.
    fn cycling(total: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut segments = Vec::new();
        let mut t = 0.0;
        let mut integral = 0.0;
        let mut push = |kind: SegmentKind, duration: f64, t: &mut f64, integral: &mut f64| {
            segments.push(Segment {
                start: *t,
                duration,
                kind,
                integral_before: *integral,
            });
            *integral += match kind {
                SegmentKind::Stand => 0.0,
                SegmentKind::Walk => duration,
                SegmentKind::RampUp | SegmentKind::RampDown => duration / 2.0,
            };
            *t += duration;
        };
        push(
            SegmentKind::Stand,
            rng.gen_range(0.6..1.0),
            &mut t,
            &mut integral,
        );
        while t < total {
            push(
                SegmentKind::RampUp,
                rng.gen_range(2.2..2.6),
                &mut t,
                &mut integral,
            );
            push(
                SegmentKind::Walk,
                rng.gen_range(4.0..6.0),
                &mut t,
                &mut integral,
            );
            push(
                SegmentKind::RampDown,
                rng.gen_range(2.2..2.6),
                &mut t,
                &mut integral,
            );
            push(
                SegmentKind::Stand,
                rng.gen_range(0.8..1.2),
                &mut t,
                &mut integral,
            );
        }
        Self { segments }
    }

    /// (value, derivative, integral over [0, t]).
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let seg = self
            .segments
            .iter()
            .rev()
            .find(|s| t >= s.start)
            .unwrap_or(&self.segments[0]);
        let u = ((t - seg.start) / seg.duration).clamp(0.0, 1.0);
        let d = seg.duration;
        match seg.kind {
            SegmentKind::Stand => (0.0, 0.0, seg.integral_before),
            SegmentKind::Walk => (1.0, 0.0, seg.integral_before + (t - seg.start)),
            SegmentKind::RampUp => {
                let (e, de, int) = smootherstep(u);
                (e, de / d, seg.integral_before + d * int)
            }
            SegmentKind::RampDown => {
                let (e, de, int) = smootherstep(u);
                (1.0 - e, -de / d, seg.integral_before + d * (u - int))
            }
        }
    }
}

/// Per-joint role inferred from its name, shared by all motion kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JointRole {
    HipPitch,
    HipRoll,
    HipYaw,
    Knee,
    ShoulderPitch,
    ShoulderRoll,
    ShoulderYaw,
    ElbowFlex,
    ElbowTwist,
    TorsoPitch,
    TorsoYaw,
    Other,
}

fn classify(name: &str) -> (JointRole, f64) {
    // Side phase: left legs lead, right legs are half a cycle behind.
    let side_phase = if name.starts_with("r_") || name.contains("right") {
        std::f64::consts::PI
    } else {
        0.0
    };
    let role = if name.contains("hip_pitch") {
        JointRole::HipPitch
    } else if name.contains("hip_roll") {
        JointRole::HipRoll
    } else if name.contains("hip_yaw") {
        JointRole::HipYaw
    } else if name.contains("knee") {
        JointRole::Knee
    } else if name.contains("shoulder_pitch") {
        JointRole::ShoulderPitch
    } else if name.contains("shoulder_roll") {
        JointRole::ShoulderRoll
    } else if name.contains("shoulder_yaw") {
        JointRole::ShoulderYaw
    } else if name.contains("elbow_flex") {
        JointRole::ElbowFlex
    } else if name.contains("elbow_twist") {
        JointRole::ElbowTwist
    } else if name.contains("torso_pitch") {
        JointRole::TorsoPitch
    } else if name.contains("torso_yaw") {
        JointRole::TorsoYaw
    } else {
        JointRole::Other
    };
    (role, side_phase)
}

/// A non-negative oscillation `amp/2 * (1 + sin)`, used for joints whose
/// lower limit sits at the neutral pose (knees, elbows).
fn one_sided(amp: f64, omega: f64, phase: f64) -> Profile {
    Profile {
        constant: amp / 2.0,
        harmonics: vec![Harmonic {
            amp: amp / 2.0,
            omega,
            phase,
        }],
    }
}

fn two_sided(amp: f64, omega: f64, phase: f64) -> Profile {
    Profile {
        constant: 0.0,
        harmonics: vec![Harmonic { amp, omega, phase }],
    }
}

fn with_second_harmonic(mut profile: Profile, amp: f64, omega: f64, phase: f64) -> Profile {
    profile.harmonics.push(Harmonic {
        amp,
        omega: 2.0 * omega,
        phase,
    });
    profile
}

fn joint_profile(
    kind: MotionKind,
    role: JointRole,
    side_phase: f64,
    omega: f64,
    rng: &mut ChaCha8Rng,
) -> Profile {
    use JointRole::*;
    use MotionKind::*;
    let jitter = rng.gen_range(0.9..1.1);
    let dphase = rng.gen_range(-0.15..0.15);
    let pi = std::f64::consts::PI;
    let mut profile = match (kind, role) {
        (Stand, _) => Profile::default(),
        // Sagittal gait: hips and knees alternate, arms counter-swing.
        (ForwardWalk | WalkLiftArms | WalkWaveArms | BackwardWalk, HipPitch) => {
            let dir = if kind == BackwardWalk { pi } else { 0.0 };
            with_second_harmonic(
                two_sided(0.35 * jitter, omega, side_phase + dir + dphase),
                0.015,
                omega,
                side_phase + dphase * 0.5,
            )
        }
        (ForwardWalk | WalkLiftArms | WalkWaveArms | BackwardWalk, Knee) => {
            one_sided(0.5 * jitter, omega, side_phase - pi / 2.0 + dphase)
        }
        (ForwardWalk | WalkLiftArms | WalkWaveArms | BackwardWalk, HipRoll) => {
            two_sided(0.05 * jitter, omega, side_phase + pi / 2.0 + dphase)
        }
        (ForwardWalk | WalkLiftArms | WalkWaveArms | BackwardWalk, HipYaw) => {
            two_sided(0.03 * jitter, omega, side_phase + dphase)
        }
        (ForwardWalk | WalkLiftArms | WalkWaveArms | BackwardWalk, TorsoPitch) => Profile {
            constant: 0.03,
            harmonics: vec![Harmonic {
                amp: 0.02 * jitter,
                omega: 2.0 * omega,
                phase: dphase,
            }],
        },
        (ForwardWalk | WalkLiftArms | WalkWaveArms | BackwardWalk, TorsoYaw) => {
            two_sided(0.05 * jitter, omega, side_phase + pi + dphase)
        }
        // Lateral stepping: hip roll carries the motion.
        (SideStep, HipRoll) => two_sided(0.22 * jitter, omega, dphase),
        (SideStep, HipPitch) => two_sided(0.08 * jitter, omega, side_phase + dphase),
        (SideStep, Knee) => one_sided(0.3 * jitter, omega, side_phase - pi / 2.0 + dphase),
        (SideStep, HipYaw) => two_sided(0.05 * jitter, omega, side_phase + dphase),
        (SideStep, TorsoPitch) => two_sided(0.02 * jitter, 2.0 * omega, dphase),
        (SideStep, TorsoYaw) => two_sided(0.03 * jitter, omega, dphase),
        (SideStep, ShoulderPitch) => two_sided(0.08 * jitter, omega, side_phase + pi + dphase),
        // Arm overlays.
        (WalkLiftArms, ShoulderPitch) => Profile {
            constant: 0.55,
            harmonics: vec![Harmonic {
                amp: 0.5 * jitter,
                omega: omega / 3.0,
                phase: side_phase + dphase,
            }],
        },
        (WalkLiftArms, ElbowFlex) => one_sided(0.4 * jitter, omega / 3.0, side_phase + dphase),
        (WalkWaveArms, ShoulderRoll) => {
            two_sided(0.26 * jitter, 1.3 * omega, side_phase + dphase)
        }
        (WalkWaveArms, ShoulderYaw) => {
            two_sided(0.12 * jitter, 1.3 * omega, side_phase + pi / 2.0 + dphase)
        }
        (WalkWaveArms, ElbowFlex) => {
            let mut p = one_sided(0.4 * jitter, 1.3 * omega, side_phase + dphase);
            p.constant += 0.35;
            p
        }
        (WalkWaveArms, ShoulderPitch) => Profile {
            constant: 0.4,
            harmonics: vec![Harmonic {
                amp: 0.12 * jitter,
                omega,
                phase: side_phase + pi + dphase,
            }],
        },
        // Default swing for remaining arm/torso joints in walking kinds.
        (_, ShoulderPitch) => two_sided(0.25 * jitter, omega, side_phase + pi + dphase),
        (_, ShoulderRoll) => two_sided(0.03 * jitter, omega, side_phase + dphase),
        (_, ShoulderYaw) => two_sided(0.03 * jitter, omega, side_phase + dphase),
        (_, ElbowFlex) => one_sided(0.3 * jitter, omega, side_phase + pi + dphase),
        (_, ElbowTwist) => two_sided(0.04 * jitter, omega, side_phase + dphase),
        (_, Other) => two_sided(0.05 * jitter, omega, side_phase + dphase),
    };
    if profile.harmonics.is_empty() && profile.constant == 0.0 {
        profile = Profile::default();
    }
    profile
}

/// Generate a synthetic motion trajectory: analytic joint curves gated by a
/// stand/walk envelope, a consistent base path, and link ground truth from
/// the kinematics engine. Deterministic per seed.
pub fn generate_motion(
    model: &RigidBodyModel,
    kind: MotionKind,
    duration: f64,
    rate: f64,
    seed: u64,
) -> Result<RecordedSequence, DataError> {
    let frames = (duration * rate).round() as usize;
    let min = crate::network::DEFAULT_INPUT_STEPS + crate::network::DEFAULT_HORIZON;
    if frames < min {
        return Err(DataError::TooShort { frames, min });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b63_6173_7400_0000);
    let n = model.dof();
    let neutral = neutral_configuration(model);

    // Gait frequency ~0.32 Hz with mild per-seed jitter; slow enough that
    // third derivatives stay small and finite-difference velocity oracles
    // hold at 60 Hz.
    let omega = 2.0 * std::f64::consts::PI * 0.32 * rng.gen_range(0.95..1.05);

    let envelope = if kind.is_locomotion() {
        Envelope::cycling(duration, &mut rng)
    } else {
        Envelope::stand()
    };

    // Per-joint profiles, clipped into the joint limits around neutral.
    let margin = 0.02;
    let mut profiles = Vec::with_capacity(n);
    for (j, joint) in model.joints().iter().enumerate() {
        let (role, side_phase) = classify(&joint.name);
        let mut profile = joint_profile(kind, role, side_phase, omega, &mut rng);
        let center = neutral.joint_positions()[j];
        let (up, down) = profile.deviation();
        let avail_up = joint.limits.1 - margin - center;
        let avail_down = center - (joint.limits.0 + margin);
        let mut scale = 1.0f64;
        if up > 1e-12 {
            scale = scale.min((avail_up / up).max(0.0));
        }
        if down > 1e-12 {
            scale = scale.min((avail_down / down).max(0.0));
        }
        if scale < 1.0 {
            profile.scale(scale);
        }
        profiles.push(profile);
    }

    // Base path: translation along a heading direction at walk speed, with a
    // small vertical bob and yaw sway, all envelope-gated.
    let (heading, speed) = match kind {
        MotionKind::ForwardWalk | MotionKind::WalkLiftArms | MotionKind::WalkWaveArms => {
            (Vector3::new(1.0, 0.0, 0.0), rng.gen_range(0.5..0.7))
        }
        MotionKind::BackwardWalk => (Vector3::new(-1.0, 0.0, 0.0), rng.gen_range(0.4..0.55)),
        MotionKind::SideStep => {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (Vector3::new(0.0, sign, 0.0), rng.gen_range(0.3..0.4))
        }
        MotionKind::Stand => (Vector3::zeros(), 0.0),
    };
    let base_origin = Vector3::new(0.0, 0.0, 0.9 + rng.gen_range(-0.03..0.03));
    let bob = two_sided(0.015, 2.0 * omega, rng.gen_range(0.0..6.28));
    let yaw = two_sided(0.05, omega, rng.gen_range(0.0..6.28));

    let dt = 1.0 / rate;
    let mut steps = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 * dt;
        let (e, de, integral) = envelope.eval(t);

        let mut s = nalgebra::DVector::zeros(n);
        let mut sdot = nalgebra::DVector::zeros(n);
        for j in 0..n {
            let p = profiles[j].value(t);
            let dp = profiles[j].deriv(t);
            s[j] = neutral.joint_positions()[j] + e * p;
            sdot[j] = de * p + e * dp;
        }

        let bob_v = bob.value(t);
        let base_position = base_origin
            + heading * (speed * integral)
            + Vector3::new(0.0, 0.0, e * bob_v);
        let base_linear = heading * (speed * e)
            + Vector3::new(0.0, 0.0, de * bob_v + e * bob.deriv(t));
        let psi = e * yaw.value(t);
        let dpsi = de * yaw.value(t) + e * yaw.deriv(t);
        let base_rotation = Rotation3::from_axis_angle(&Vector3::z_axis(), psi).into_inner();
        let base_angular = Vector3::new(0.0, 0.0, dpsi);

        let q = Configuration::new(base_position, base_rotation, s)?;
        let nu = SystemVelocity::new(base_linear, base_angular, sdot)?;
        let fk = forward_kinematics(model, &q);
        let mut link_positions = Vec::with_capacity(model.instrumented_links().len());
        let mut link_rotations = Vec::with_capacity(model.instrumented_links().len());
        let mut link_twists = Vec::with_capacity(model.instrumented_links().len());
        for &link in model.instrumented_links() {
            let pose = fk.pose(link);
            link_positions.push(pose.position);
            link_rotations.push(pose.rotation);
            link_twists.push(differential_kinematics(model, &fk, &nu, link).as_vector());
        }
        steps.push(TimeStep {
            configuration: q,
            velocity: nu,
            link_positions,
            link_rotations,
            link_twists,
            imu: Vec::new(),
        });
    }

    Ok(RecordedSequence::new(
        rate,
        kind,
        model.content_hash(),
        steps,
    ))
}

/// Fill in sensor readings for every instrumented link: orientation from
/// forward kinematics, acceleration from second-order central differences of
/// the stored link positions (endpoints copy their neighbor), expressed in
/// the sensor frame with gravity per `convention`, plus optional Gaussian
/// noise.
pub fn simulate_imus(
    model: &RigidBodyModel,
    sequence: &mut RecordedSequence,
    noise: NoiseParams,
    convention: AccelConvention,
    seed: u64,
) -> Result<(), DataError> {
    let frames = sequence.len();
    if frames < 3 {
        return Err(DataError::TooShort { frames, min: 3 });
    }
    let num_links = model.instrumented_links().len();
    let rate = sequence.rate();
    let gravity = Vector3::new(0.0, 0.0, GRAVITY);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696d_7500_0000_0000);
    let accel_noise = Normal::new(0.0, noise.accel_std.max(0.0)).unwrap();
    let orient_noise = Normal::new(0.0, noise.orient_std.max(0.0)).unwrap();

    // World-frame second differences, one pass per link slot.
    let mut world_accels = vec![vec![Vector3::zeros(); frames]; num_links];
    for slot in 0..num_links {
        for f in 1..frames - 1 {
            let prev = sequence.step(f - 1).link_positions[slot];
            let cur = sequence.step(f).link_positions[slot];
            let next = sequence.step(f + 1).link_positions[slot];
            world_accels[slot][f] = (next - 2.0 * cur + prev) * (rate * rate);
        }
        world_accels[slot][0] = world_accels[slot][1];
        world_accels[slot][frames - 1] = world_accels[slot][frames - 2];
    }

    for f in 0..frames {
        let mut readings = Vec::with_capacity(num_links);
        for slot in 0..num_links {
            let rotation = sequence.step(f).link_rotations[slot];
            let world = match convention {
                AccelConvention::Proper => world_accels[slot][f] + gravity,
                AccelConvention::GravityFree => world_accels[slot][f],
            };
            let mut acceleration = rotation.transpose() * world;
            let mut orientation = rotation;
            if noise.accel_std > 0.0 {
                acceleration += Vector3::new(
                    accel_noise.sample(&mut rng),
                    accel_noise.sample(&mut rng),
                    accel_noise.sample(&mut rng),
                );
            }
            if noise.orient_std > 0.0 {
                let axis = Unit::new_normalize(Vector3::new(
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ));
                let angle = orient_noise.sample(&mut rng);
                orientation =
                    Rotation3::from_axis_angle(&axis, angle).into_inner() * orientation;
            }
            readings.push(ImuReading {
                acceleration,
                orientation,
            });
        }
        sequence.steps_mut()[f].imu = readings;
    }
    Ok(())
}
