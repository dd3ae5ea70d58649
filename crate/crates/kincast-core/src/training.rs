//! Windowing, mini-batch Adam training, and checkpoints.
//!
//! Sequences are sliced into (inertial window, joint-state buffer, target,
//! link references) samples; training shuffles them per epoch with a seeded
//! generator, accumulates mean gradients per batch, applies Adam with a
//! step learning-rate schedule, and records per-epoch loss components.
//! Everything is deterministic for a fixed seed.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::RecordedSequence;
use crate::losses::{
    evaluate_losses, BaseState, LinkReference, LinkReferenceWindow, LossError, LossWeights,
};
use crate::model::{ModelError, RigidBodyModel};
use crate::network::{
    backward, forward, init_params, BufferSnapshot, InputWindow, Layer, NetworkDescriptor,
    NetworkError, Normalization, ParamGrads, PredictionWindow, PredictorParams,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("sequence too short: {len} frames, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("no training samples")]
    EmptyDataset,
    #[error("step {step} has no sensor readings")]
    MissingImu { step: usize },
    #[error("descriptor inconsistent with model/config: {0}")]
    DescriptorMismatch(String),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}, sample {sample}: {detail}"
    )]
    NanLoss {
        epoch: usize,
        batch: usize,
        sample: usize,
        detail: String,
    },
    #[error("optimizer state does not match parameter shapes")]
    StateShapeMismatch,
    #[error("checkpoint file corrupt: {reason}")]
    Corrupt { reason: String },
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Input window length M.
    pub input_steps: usize,
    /// Prediction horizon K.
    pub horizon: usize,
    /// Anchor stride when slicing windows.
    pub stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            lr0: 1e-3,
            lr_step_epochs: 5,
            lr_gamma: 0.5,
            weights: LossWeights::default(),
            seed: 0,
            input_steps: crate::network::DEFAULT_INPUT_STEPS,
            horizon: crate::network::DEFAULT_HORIZON,
            stride: 1,
        }
    }
}

impl TrainConfig {
    /// `epochs == 0` is allowed and produces the initialization unchanged.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.lr_step_epochs < 1 {
            return Err(TrainError::BadConfig("lr_step_epochs must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(TrainError::BadConfig("lr0 must be > 0".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(TrainError::BadConfig("lr_gamma must be in (0, 1]".into()));
        }
        if self.input_steps < 2 {
            return Err(TrainError::BadConfig("input_steps must be >= 2".into()));
        }
        if self.horizon < 1 {
            return Err(TrainError::BadConfig("horizon must be >= 1".into()));
        }
        if self.stride < 1 {
            return Err(TrainError::BadConfig("stride must be >= 1".into()));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::BadConfig(e.to_string()))
    }

    /// Stable short hash of the configuration, stored in checkpoints.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One training instance sliced from a recorded sequence at anchor step m:
/// sensor window over m-M+1..=m, ground-truth buffer over m-M+1..=m-1,
/// target and link references over m..=m+K-1.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub window: InputWindow,
    pub buffer: BufferSnapshot,
    pub target: PredictionWindow,
    pub link_refs: LinkReferenceWindow,
}

/// Sensor window ending at `anchor` (inclusive), `steps` steps long.
pub fn input_window(
    sequence: &RecordedSequence,
    anchor: usize,
    steps: usize,
) -> Result<InputWindow, TrainError> {
    let first = anchor + 1 - steps;
    let imus = sequence.step(first).imu.len();
    let mut window = InputWindow::zeros(steps, imus);
    for t in 0..steps {
        let step = sequence.step(first + t);
        if step.imu.len() != imus || imus == 0 {
            return Err(TrainError::MissingImu { step: first + t });
        }
        for (i, reading) in step.imu.iter().enumerate() {
            window.set(t, i, 0, reading.acceleration.x);
            window.set(t, i, 1, reading.acceleration.y);
            window.set(t, i, 2, reading.acceleration.z);
            for r in 0..3 {
                for c in 0..3 {
                    window.set(t, i, 3 + r * 3 + c, reading.orientation[(r, c)]);
                }
            }
        }
    }
    Ok(window)
}

/// Ground-truth joint-state buffer for anchor m: the M-1 states at steps
/// m-M+1..=m-1, oldest first.
pub fn buffer_snapshot(
    sequence: &RecordedSequence,
    anchor: usize,
    input_steps: usize,
) -> BufferSnapshot {
    let dof = sequence.step(0).configuration.joint_positions().len();
    let len = input_steps - 1;
    let first = anchor + 1 - input_steps;
    let mut buffer = BufferSnapshot::zeros(len, dof);
    for t in 0..len {
        let step = sequence.step(first + t);
        for j in 0..dof {
            buffer.set_position(t, j, step.configuration.joint_positions()[j]);
            buffer.set_velocity(t, j, step.velocity.joint_velocities()[j]);
        }
    }
    buffer
}

/// Ground-truth joint states over steps anchor..=anchor+horizon-1 in
/// prediction-window layout.
pub fn target_window(
    sequence: &RecordedSequence,
    anchor: usize,
    horizon: usize,
) -> PredictionWindow {
    let dof = sequence.step(0).configuration.joint_positions().len();
    let mut target = PredictionWindow::zeros(horizon, dof);
    for t in 0..horizon {
        let step = sequence.step(anchor + t);
        for j in 0..dof {
            target.set_position(t, j, step.configuration.joint_positions()[j]);
            target.set_velocity(t, j, step.velocity.joint_velocities()[j]);
        }
    }
    target
}

/// Link references over steps anchor..=anchor+horizon-1, taken from the
/// recorded ground truth (no kinematics recomputation).
pub fn reference_window(
    model: &RigidBodyModel,
    sequence: &RecordedSequence,
    anchor: usize,
    horizon: usize,
) -> Result<LinkReferenceWindow, TrainError> {
    let links = model.instrumented_links().to_vec();
    let mut base = Vec::with_capacity(horizon);
    let mut refs = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let step = sequence.step(anchor + t);
        base.push(BaseState {
            position: *step.configuration.base_position(),
            rotation: *step.configuration.base_rotation(),
            linear: *step.velocity.base_linear(),
            angular: *step.velocity.base_angular(),
        });
        let row: Vec<LinkReference> = (0..links.len())
            .map(|slot| LinkReference {
                position: step.link_positions[slot],
                rotation: step.link_rotations[slot],
                twist: step.link_twists[slot],
            })
            .collect();
        refs.push(row);
    }
    Ok(LinkReferenceWindow::new(links, base, refs)?)
}

/// Slice a sequence into training samples at the configured stride.
///
/// Valid anchors are m = M-1, M-1+stride, ... up to L-K-1, giving
/// ceil((L-M-K+1)/stride) samples.
pub fn make_windows(
    model: &RigidBodyModel,
    sequence: &RecordedSequence,
    config: &TrainConfig,
) -> Result<Vec<TrainingSample>, TrainError> {
    let m = config.input_steps;
    let k = config.horizon;
    let len = sequence.len();
    if len < m + k {
        return Err(TrainError::TooShort { len, min: m + k });
    }
    let mut samples = Vec::new();
    let mut anchor = m - 1;
    while anchor + k < len {
        samples.push(TrainingSample {
            window: input_window(sequence, anchor, m)?,
            buffer: buffer_snapshot(sequence, anchor, m),
            target: target_window(sequence, anchor, k),
            link_refs: reference_window(model, sequence, anchor, k)?,
        });
        anchor += config.stride;
    }
    Ok(samples)
}

/// Split sequences into (train, validation) by whole sequences, never by
/// window, so overlapping windows cannot leak across the split. Deterministic
/// per seed; validation gets round(fraction * count) sequences, at most
/// count - 1.
pub fn split_sequences(
    sequences: Vec<RecordedSequence>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<RecordedSequence>, Vec<RecordedSequence>) {
    let count = sequences.len();
    if count < 2 || val_fraction <= 0.0 {
        return (sequences, Vec::new());
    }
    let val_count = ((count as f64 * val_fraction).round() as usize).clamp(1, count - 1);
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x73706c_6974);
    order.shuffle(&mut rng);
    let val_set: std::collections::HashSet<usize> =
        order[..val_count].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, seq) in sequences.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(seq);
        } else {
            train.push(seq);
        }
    }
    (train, val)
}

/// First and second moment estimates for Adam, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub first: ParamGrads,
    pub second: ParamGrads,
}

impl AdamState {
    pub fn new(params: &PredictorParams) -> Self {
        Self {
            step: 0,
            first: ParamGrads::zeros_like(params),
            second: ParamGrads::zeros_like(params),
        }
    }
}

fn shapes_match(a: &[Layer], b: &[Layer]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.weight.shape() == y.weight.shape() && x.bias.len() == y.bias.len()
        })
}

/// One Adam update with bias correction: standard beta1/beta2/epsilon
/// constants, deterministic.
pub fn adam_step(
    params: &mut PredictorParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if !shapes_match(&params.layers, &grads.layers)
        || !shapes_match(&params.layers, &state.first.layers)
    {
        return Err(TrainError::StateShapeMismatch);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for l in 0..params.layers.len() {
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPSILON);
        };
        {
            let layer = &mut params.layers[l];
            let g = &grads.layers[l];
            let m = &mut state.first.layers[l];
            let v = &mut state.second.layers[l];
            for idx in 0..layer.weight.len() {
                update(
                    &mut layer.weight[idx],
                    g.weight[idx],
                    &mut m.weight[idx],
                    &mut v.weight[idx],
                );
            }
            for idx in 0..layer.bias.len() {
                update(
                    &mut layer.bias[idx],
                    g.bias[idx],
                    &mut m.bias[idx],
                    &mut v.bias[idx],
                );
            }
        }
    }
    Ok(())
}

/// Step learning-rate schedule: lr0 * gamma^floor(epoch / step_epochs).
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr0 * config.lr_gamma.powi((epoch / config.lr_step_epochs) as i32)
}

/// Per-epoch loss log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_pos: f64,
    pub l_vel: f64,
    pub l_fk: f64,
    pub l_dk: f64,
    pub l_total: f64,
    /// Mean validation total loss; NaN when no validation samples exist.
    pub val_total: f64,
}

/// Render the loss log as CSV.
pub fn loss_log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,L_pos,L_vel,L_FK,L_DK,L_total,val_total\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.l_pos, r.l_vel, r.l_fk, r.l_dk, r.l_total, r.val_total
        ));
    }
    out
}

/// A trained predictor bound to the model and configuration that produced
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PredictorParams,
    pub model_hash: String,
    pub config_hash: String,
}

fn check_descriptor(
    model: &RigidBodyModel,
    descriptor: &NetworkDescriptor,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    descriptor.validate()?;
    if descriptor.dof != model.dof() {
        return Err(TrainError::DescriptorMismatch(format!(
            "descriptor dof {} vs model dof {}",
            descriptor.dof,
            model.dof()
        )));
    }
    if descriptor.num_imus != model.instrumented_links().len() {
        return Err(TrainError::DescriptorMismatch(format!(
            "descriptor sensors {} vs model instrumented {}",
            descriptor.num_imus,
            model.instrumented_links().len()
        )));
    }
    if descriptor.upper != model.upper_joints() || descriptor.lower != model.lower_joints() {
        return Err(TrainError::DescriptorMismatch(
            "descriptor joint partition differs from model".into(),
        ));
    }
    if descriptor.input_steps != config.input_steps || descriptor.horizon != config.horizon {
        return Err(TrainError::DescriptorMismatch(format!(
            "descriptor M/K {}/{} vs config {}/{}",
            descriptor.input_steps, descriptor.horizon, config.input_steps, config.horizon
        )));
    }
    Ok(())
}

fn mean_total_loss(
    model: &RigidBodyModel,
    weights: &LossWeights,
    params: &PredictorParams,
    samples: &[TrainingSample],
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for sample in samples {
        let (pred, _) = forward(params, &sample.window, &sample.buffer)?;
        let (breakdown, _) =
            evaluate_losses(model, weights, &pred, &sample.target, &sample.link_refs)?;
        total += breakdown.total;
    }
    Ok(total / samples.len() as f64)
}

/// Train the predictor on windows sliced from `train_seqs`, reporting one
/// loss row per epoch (validation loss from `val_seqs`, NaN when empty).
///
/// Deterministic: the same model, sequences, descriptor, and config produce
/// an identical checkpoint and log. Aborts on the first non-finite loss or
/// gradient with the offending epoch/batch/sample.
pub fn train(
    model: &RigidBodyModel,
    descriptor: &NetworkDescriptor,
    train_seqs: &[RecordedSequence],
    val_seqs: &[RecordedSequence],
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochRecord>), TrainError> {
    config.validate()?;
    check_descriptor(model, descriptor, config)?;

    let mut samples = Vec::new();
    for seq in train_seqs {
        samples.extend(make_windows(model, seq, config)?);
    }
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut val_samples = Vec::new();
    for seq in val_seqs {
        val_samples.extend(make_windows(model, seq, config)?);
    }

    let mut params = init_params(descriptor, config.seed)?;
    let windows: Vec<InputWindow> = samples.iter().map(|s| s.window.clone()).collect();
    params.normalization = Normalization::fit(&windows);
    drop(windows);

    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = ParamGrads::zeros_like(&params);
            for (in_batch, &si) in batch.iter().enumerate() {
                let sample = &samples[si];
                // A non-finite activation inside the network is the same
                // failure class as a NaN loss: report it with its location.
                let (pred, cache) = forward(&params, &sample.window, &sample.buffer)
                    .map_err(|e| match e {
                        NetworkError::NonFinite(what) => TrainError::NanLoss {
                            epoch,
                            batch: batch_idx,
                            sample: in_batch,
                            detail: format!("non-finite {what} in forward pass"),
                        },
                        other => TrainError::Network(other),
                    })?;
                let (breakdown, term) = evaluate_losses(
                    model,
                    &config.weights,
                    &pred,
                    &sample.target,
                    &sample.link_refs,
                )?;
                if !breakdown.total.is_finite() {
                    return Err(TrainError::NanLoss {
                        epoch,
                        batch: batch_idx,
                        sample: in_batch,
                        detail: format!(
                            "pos {} vel {} fk {} dk {}",
                            breakdown.position, breakdown.velocity, breakdown.fk, breakdown.dk
                        ),
                    });
                }
                let (sample_grads, _) = backward(&params, &cache, &term.grad)?;
                grads.accumulate(&sample_grads);
                sums[0] += breakdown.position;
                sums[1] += breakdown.velocity;
                sums[2] += breakdown.fk;
                sums[3] += breakdown.dk;
                sums[4] += breakdown.total;
                seen += 1;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                    sample: 0,
                    detail: "non-finite gradient after batch reduction".into(),
                });
            }
            adam_step(&mut params, &grads, &mut state, lr)?;
        }
        let val_total = mean_total_loss(model, &config.weights, &params, &val_samples)?;
        let n = seen as f64;
        log.push(EpochRecord {
            epoch,
            lr,
            l_pos: sums[0] / n,
            l_vel: sums[1] / n,
            l_fk: sums[2] / n,
            l_dk: sums[3] / n,
            l_total: sums[4] / n,
            val_total,
        });
    }

    Ok((
        Checkpoint {
            params,
            model_hash: model.content_hash(),
            config_hash: config.content_hash(),
        },
        log,
    ))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"KCCP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model_hash: String,
    config_hash: String,
    descriptor: NetworkDescriptor,
    normalization: Normalization,
    /// (rows, cols) per layer, in order; payload is each layer's weight
    /// row-major then its bias, f64 little-endian.
    layers: Vec<(usize, usize)>,
    param_count: usize,
}

/// Write a checkpoint: magic, version, JSON header, then all parameters as
/// f64 little-endian (per layer: weight row-major, then bias).
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), TrainError> {
    let d = &checkpoint.params.descriptor;
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model_hash: checkpoint.model_hash.clone(),
        config_hash: checkpoint.config_hash.clone(),
        descriptor: d.clone(),
        normalization: checkpoint.params.normalization.clone(),
        layers: d.layer_shapes().to_vec(),
        param_count: d.parameter_count(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| TrainError::Corrupt { reason: e.to_string() })?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for layer in &checkpoint.params.layers {
        for r in 0..layer.weight.nrows() {
            for c in 0..layer.weight.ncols() {
                file.write_all(&layer.weight[(r, c)].to_le_bytes())?;
            }
        }
        for v in layer.bias.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`]; bitwise inverse.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let corrupt = |reason: &str| TrainError::Corrupt {
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| corrupt("file truncated while reading magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes (not a checkpoint file)"));
    }
    let mut version_bytes = [0u8; 4];
    reader
        .read_exact(&mut version_bytes)
        .map_err(|_| corrupt("file truncated while reading version"))?;
    let version = u32::from_le_bytes(version_bytes);
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let mut len_bytes = [0u8; 8];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|_| corrupt("file truncated while reading header length"))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 24 {
        return Err(corrupt("implausible header length"));
    }
    let mut header_json = vec![0u8; header_len];
    reader
        .read_exact(&mut header_json)
        .map_err(|_| corrupt("file truncated while reading header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| TrainError::Corrupt {
            reason: format!("header is not valid JSON: {e}"),
        })?;
    header.descriptor.validate()?;
    if header.layers != header.descriptor.layer_shapes().to_vec()
        || header.param_count != header.descriptor.parameter_count()
    {
        return Err(corrupt("layer manifest disagrees with descriptor"));
    }
    if header.normalization.slots() != header.descriptor.num_imus * crate::network::IMU_FEATURES
    {
        return Err(corrupt("normalization size disagrees with descriptor"));
    }

    let mut payload = vec![0u8; header.param_count * 8];
    reader
        .read_exact(&mut payload)
        .map_err(|_| corrupt("file truncated while reading parameters"))?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after parameters"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut layers = Vec::with_capacity(header.layers.len());
    let mut cursor = 0usize;
    for &(rows, cols) in &header.layers {
        let mut weight = nalgebra::DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                weight[(r, c)] = values[cursor];
                cursor += 1;
            }
        }
        let mut bias = DVector::zeros(rows);
        for r in 0..rows {
            bias[r] = values[cursor];
            cursor += 1;
        }
        layers.push(Layer { weight, bias });
    }
    debug_assert_eq!(cursor, header.param_count);

    Ok(Checkpoint {
        params: PredictorParams {
            descriptor: header.descriptor,
            normalization: header.normalization,
            layers,
        },
        model_hash: header.model_hash,
        config_hash: header.config_hash,
    })
}
