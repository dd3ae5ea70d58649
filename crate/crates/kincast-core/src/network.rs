//! The dual-branch window predictor: an inertial branch over the flattened
//! sensor window and a buffer branch over the flattened joint-state history,
//! merged through shared layers and split into upper-body and lower-body
//! output blocks with identical structure.
//!
//! Forward and reverse passes are explicit; no autodiff tape. All math is
//! f64.
//!
//! Flattening conventions (fixed, relied on by file formats and tests):
//! - inertial window: index `(t * N + i) * F + f` for step `t`, sensor `i`,
//!   feature `f`; features are 3 acceleration entries then 9 row-major
//!   rotation entries.
//! - buffer snapshot: index `t * 2n + c * n + j` for history step `t`
//!   (oldest first), channel `c` (0 position, 1 velocity), joint `j`.
//! - prediction window: index `(t * 2 + c) * n + j`, same channel meaning.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::RigidBodyModel;

/// Features per sensor: 3 acceleration + 9 flattened rotation entries.
pub const IMU_FEATURES: usize = 12;

/// Default input window length M.
pub const DEFAULT_INPUT_STEPS: usize = 10;
/// Default prediction horizon K.
pub const DEFAULT_HORIZON: usize = 60;
/// Default sensor count N.
pub const DEFAULT_NUM_IMUS: usize = 5;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("inconsistent descriptor: {0}")]
    InconsistentDescriptor(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Exponential linear unit with alpha = 1.
#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of [`elu`].
#[inline]
pub fn elu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// A sliding window of sensor readings, steps x sensors x features.
#[derive(Debug, Clone, PartialEq)]
pub struct InputWindow {
    steps: usize,
    imus: usize,
    data: DVector<f64>,
}

impl InputWindow {
    pub fn zeros(steps: usize, imus: usize) -> Self {
        Self {
            steps,
            imus,
            data: DVector::zeros(steps * imus * IMU_FEATURES),
        }
    }

    pub fn from_flat(steps: usize, imus: usize, data: Vec<f64>) -> Result<Self, NetworkError> {
        let expected = steps * imus * IMU_FEATURES;
        if data.len() != expected {
            return Err(NetworkError::ShapeMismatch {
                what: "input window",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            steps,
            imus,
            data: DVector::from_vec(data),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn imus(&self) -> usize {
        self.imus
    }

    #[inline]
    pub fn get(&self, step: usize, imu: usize, feature: usize) -> f64 {
        self.data[(step * self.imus + imu) * IMU_FEATURES + feature]
    }

    #[inline]
    pub fn set(&mut self, step: usize, imu: usize, feature: usize, value: f64) {
        self.data[(step * self.imus + imu) * IMU_FEATURES + feature] = value;
    }

    pub fn flat(&self) -> &DVector<f64> {
        &self.data
    }
}

/// Flattened joint-state history fed to the buffer branch: `snapshots`
/// past (s, sdot) pairs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferSnapshot {
    snapshots: usize,
    dof: usize,
    data: DVector<f64>,
}

impl BufferSnapshot {
    pub fn zeros(snapshots: usize, dof: usize) -> Self {
        Self {
            snapshots,
            dof,
            data: DVector::zeros(snapshots * 2 * dof),
        }
    }

    pub fn from_flat(snapshots: usize, dof: usize, data: Vec<f64>) -> Result<Self, NetworkError> {
        let expected = snapshots * 2 * dof;
        if data.len() != expected {
            return Err(NetworkError::ShapeMismatch {
                what: "buffer snapshot",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            snapshots,
            dof,
            data: DVector::from_vec(data),
        })
    }

    pub fn snapshots(&self) -> usize {
        self.snapshots
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    #[inline]
    pub fn position(&self, step: usize, joint: usize) -> f64 {
        self.data[step * 2 * self.dof + joint]
    }

    #[inline]
    pub fn velocity(&self, step: usize, joint: usize) -> f64 {
        self.data[step * 2 * self.dof + self.dof + joint]
    }

    #[inline]
    pub fn set_position(&mut self, step: usize, joint: usize, value: f64) {
        self.data[step * 2 * self.dof + joint] = value;
    }

    #[inline]
    pub fn set_velocity(&mut self, step: usize, joint: usize, value: f64) {
        self.data[step * 2 * self.dof + self.dof + joint] = value;
    }

    pub fn flat(&self) -> &DVector<f64> {
        &self.data
    }
}

/// A horizon of predicted or target joint states, K x 2 x n: channel 0 holds
/// positions (rad), channel 1 velocities (rad/s).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionWindow {
    horizon: usize,
    dof: usize,
    data: DVector<f64>,
}

impl PredictionWindow {
    pub fn zeros(horizon: usize, dof: usize) -> Self {
        Self {
            horizon,
            dof,
            data: DVector::zeros(horizon * 2 * dof),
        }
    }

    pub fn from_flat(horizon: usize, dof: usize, data: Vec<f64>) -> Result<Self, NetworkError> {
        let expected = horizon * 2 * dof;
        if data.len() != expected {
            return Err(NetworkError::ShapeMismatch {
                what: "prediction window",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            horizon,
            dof,
            data: DVector::from_vec(data),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    #[inline]
    pub fn position(&self, step: usize, joint: usize) -> f64 {
        self.data[(step * 2) * self.dof + joint]
    }

    #[inline]
    pub fn velocity(&self, step: usize, joint: usize) -> f64 {
        self.data[(step * 2 + 1) * self.dof + joint]
    }

    #[inline]
    pub fn set_position(&mut self, step: usize, joint: usize, value: f64) {
        self.data[(step * 2) * self.dof + joint] = value;
    }

    #[inline]
    pub fn set_velocity(&mut self, step: usize, joint: usize, value: f64) {
        self.data[(step * 2 + 1) * self.dof + joint] = value;
    }

    /// Joint position vector at one step.
    pub fn positions_at(&self, step: usize) -> DVector<f64> {
        DVector::from_fn(self.dof, |j, _| self.position(step, j))
    }

    /// Joint velocity vector at one step.
    pub fn velocities_at(&self, step: usize) -> DVector<f64> {
        DVector::from_fn(self.dof, |j, _| self.velocity(step, j))
    }

    pub fn flat(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut DVector<f64> {
        &mut self.data
    }
}

/// Per-(sensor, feature) input standardization, applied to the inertial
/// window inside [`forward`]. Stored alongside the parameters so checkpoints
/// reproduce training-time behavior exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Identity normalization (mean 0, std 1) for `imus` sensors.
    pub fn identity(imus: usize) -> Self {
        Self {
            mean: vec![0.0; imus * IMU_FEATURES],
            std: vec![1.0; imus * IMU_FEATURES],
        }
    }

    /// Standardization statistics over a set of windows, computed per
    /// (sensor, feature) slot across all steps and windows. Standard
    /// deviations below 1e-8 are replaced by 1 so constant channels pass
    /// through centered but unscaled.
    pub fn fit(windows: &[InputWindow]) -> Self {
        let imus = windows.first().map_or(0, |w| w.imus());
        let slots = imus * IMU_FEATURES;
        let mut mean = vec![0.0; slots];
        let mut count = 0usize;
        for w in windows {
            for t in 0..w.steps() {
                for i in 0..imus {
                    for f in 0..IMU_FEATURES {
                        mean[i * IMU_FEATURES + f] += w.get(t, i, f);
                    }
                }
            }
            count += w.steps();
        }
        if count > 0 {
            for m in &mut mean {
                *m /= count as f64;
            }
        }
        let mut var = vec![0.0; slots];
        for w in windows {
            for t in 0..w.steps() {
                for i in 0..imus {
                    for f in 0..IMU_FEATURES {
                        let d = w.get(t, i, f) - mean[i * IMU_FEATURES + f];
                        var[i * IMU_FEATURES + f] += d * d;
                    }
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = if count > 0 { (v / count as f64).sqrt() } else { 1.0 };
                if s < 1e-8 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn slots(&self) -> usize {
        self.mean.len()
    }

    fn apply(&self, window: &InputWindow) -> DVector<f64> {
        let slots = self.slots();
        DVector::from_fn(window.flat().len(), |idx, _| {
            let slot = idx % slots;
            (window.flat()[idx] - self.mean[slot]) / self.std[slot]
        })
    }
}

/// Architecture descriptor: window geometry, joint partition, and hidden
/// widths. Shapes of every layer follow from this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescriptor {
    /// Input window length M.
    pub input_steps: usize,
    /// Prediction horizon K.
    pub horizon: usize,
    /// Sensor count N.
    pub num_imus: usize,
    /// Total joint DoF n.
    pub dof: usize,
    /// Upper-body joint indices, in output order.
    pub upper: Vec<usize>,
    /// Lower-body joint indices, in output order.
    pub lower: Vec<usize>,
    pub inertial_hidden: usize,
    pub buffer_hidden: usize,
    pub shared_hidden: usize,
    pub branch_hidden: usize,
}

impl NetworkDescriptor {
    /// Default architecture for a model: M=10, K=60, hidden widths
    /// 256/256/512/256.
    pub fn for_model(model: &RigidBodyModel) -> Self {
        Self {
            input_steps: DEFAULT_INPUT_STEPS,
            horizon: DEFAULT_HORIZON,
            num_imus: model.instrumented_links().len(),
            dof: model.dof(),
            upper: model.upper_joints().to_vec(),
            lower: model.lower_joints().to_vec(),
            inertial_hidden: 256,
            buffer_hidden: 256,
            shared_hidden: 512,
            branch_hidden: 256,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_steps < 2 {
            return Err(NetworkError::InconsistentDescriptor(
                "input window needs at least 2 steps".into(),
            ));
        }
        if self.horizon == 0 || self.num_imus == 0 {
            return Err(NetworkError::InconsistentDescriptor(
                "horizon and sensor count must be positive".into(),
            ));
        }
        let widths = [
            self.inertial_hidden,
            self.buffer_hidden,
            self.shared_hidden,
            self.branch_hidden,
        ];
        if widths.iter().any(|&w| w == 0) {
            return Err(NetworkError::InconsistentDescriptor(
                "hidden widths must be positive".into(),
            ));
        }
        let mut owner = vec![0u8; self.dof];
        for &j in self.upper.iter().chain(self.lower.iter()) {
            if j >= self.dof {
                return Err(NetworkError::InconsistentDescriptor(format!(
                    "partition index {j} out of range for {} DoF",
                    self.dof
                )));
            }
            owner[j] += 1;
        }
        if owner.iter().any(|&c| c != 1) {
            return Err(NetworkError::InconsistentDescriptor(
                "upper/lower must partition the joint set exactly".into(),
            ));
        }
        Ok(())
    }

    /// Flattened inertial input width, M*N*F.
    pub fn inertial_input(&self) -> usize {
        self.input_steps * self.num_imus * IMU_FEATURES
    }

    /// Flattened buffer input width, (M-1)*2n.
    pub fn buffer_input(&self) -> usize {
        (self.input_steps - 1) * 2 * self.dof
    }

    /// History length the buffer branch expects, M-1.
    pub fn buffer_len(&self) -> usize {
        self.input_steps - 1
    }

    /// (rows, cols) of each layer, in parameter order.
    pub fn layer_shapes(&self) -> [(usize, usize); 8] {
        let hi = self.inertial_hidden;
        let hb = self.buffer_hidden;
        let hs = self.shared_hidden;
        let hr = self.branch_hidden;
        let out_up = self.horizon * 2 * self.upper.len();
        let out_low = self.horizon * 2 * self.lower.len();
        [
            (hi, self.inertial_input()),
            (hb, self.buffer_input()),
            (hs, hi + hb),
            (hs, hs),
            (hr, hs),
            (out_up, hr),
            (hr, hs),
            (out_low, hr),
        ]
    }

    /// Total scalar parameter count: for each layer, rows x (cols + 1).
    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(r, c)| r * (c + 1))
            .sum()
    }
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// All parameters of the predictor, plus the descriptor and input
/// normalization they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub descriptor: NetworkDescriptor,
    pub normalization: Normalization,
    pub layers: Vec<Layer>,
}

/// Gradients with the same shapes as [`PredictorParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(params: &PredictorParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Accumulate `other` into `self`.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Scale every entry in place.
    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for l in &self.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                m = m.max(v.abs());
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Deterministic parameter initialization: weights uniform in
/// (-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero, identity normalization.
pub fn init_params(descriptor: &NetworkDescriptor, seed: u64) -> Result<PredictorParams, NetworkError> {
    descriptor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = descriptor
        .layer_shapes()
        .iter()
        .map(|&(rows, cols)| {
            let bound = (1.0 / cols as f64).sqrt();
            let mut weight = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    weight[(r, c)] = rng.gen_range(-bound..bound);
                }
            }
            Layer {
                weight,
                bias: DVector::zeros(rows),
            }
        })
        .collect();
    Ok(PredictorParams {
        descriptor: descriptor.clone(),
        normalization: Normalization::identity(descriptor.num_imus),
        layers,
    })
}

/// Intermediate activations retained by [`forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    inertial_norm: DVector<f64>,
    buffer_flat: DVector<f64>,
    pre: Vec<DVector<f64>>,
    post: Vec<DVector<f64>>,
}

fn affine(layer: &Layer, x: &DVector<f64>) -> DVector<f64> {
    &layer.weight * x + &layer.bias
}

/// Forward pass. Returns the scattered prediction window plus the cache the
/// reverse pass needs. Pure: identical inputs give identical outputs.
pub fn forward(
    params: &PredictorParams,
    window: &InputWindow,
    buffer: &BufferSnapshot,
) -> Result<(PredictionWindow, ActivationCache), NetworkError> {
    let d = &params.descriptor;
    if window.flat().len() != d.inertial_input() {
        return Err(NetworkError::ShapeMismatch {
            what: "input window",
            expected: d.inertial_input(),
            actual: window.flat().len(),
        });
    }
    if buffer.flat().len() != d.buffer_input() {
        return Err(NetworkError::ShapeMismatch {
            what: "buffer snapshot",
            expected: d.buffer_input(),
            actual: buffer.flat().len(),
        });
    }
    if params.normalization.slots() != d.num_imus * IMU_FEATURES {
        return Err(NetworkError::ShapeMismatch {
            what: "normalization stats",
            expected: d.num_imus * IMU_FEATURES,
            actual: params.normalization.slots(),
        });
    }

    let x_in = params.normalization.apply(window);
    let x_buf = buffer.flat().clone();

    let mut pre = Vec::with_capacity(8);
    let mut post = Vec::with_capacity(8);
    let run_elu = |layer: &Layer, x: &DVector<f64>, pre: &mut Vec<DVector<f64>>, post: &mut Vec<DVector<f64>>| {
        let z = affine(layer, x);
        let a = z.map(elu);
        pre.push(z);
        post.push(a.clone());
        a
    };

    let a0 = run_elu(&params.layers[0], &x_in, &mut pre, &mut post);
    let a1 = run_elu(&params.layers[1], &x_buf, &mut pre, &mut post);
    let mut concat = DVector::zeros(a0.len() + a1.len());
    concat.rows_mut(0, a0.len()).copy_from(&a0);
    concat.rows_mut(a0.len(), a1.len()).copy_from(&a1);
    let a2 = run_elu(&params.layers[2], &concat, &mut pre, &mut post);
    let a3 = run_elu(&params.layers[3], &a2, &mut pre, &mut post);
    let a4 = run_elu(&params.layers[4], &a3, &mut pre, &mut post);
    let z5 = affine(&params.layers[5], &a4);
    pre.push(z5.clone());
    post.push(z5.clone());
    let a6 = run_elu(&params.layers[6], &a3, &mut pre, &mut post);
    let z7 = affine(&params.layers[7], &a6);
    pre.push(z7.clone());
    post.push(z7.clone());

    let mut out = PredictionWindow::zeros(d.horizon, d.dof);
    scatter_outputs(d, &pre[5], &pre[7], &mut out);

    if !out.flat().iter().all(|v| v.is_finite()) {
        return Err(NetworkError::NonFinite("network output"));
    }

    Ok((
        out,
        ActivationCache {
            inertial_norm: x_in,
            buffer_flat: x_buf,
            pre,
            post,
        },
    ))
}

fn scatter_outputs(
    d: &NetworkDescriptor,
    upper_out: &DVector<f64>,
    lower_out: &DVector<f64>,
    out: &mut PredictionWindow,
) {
    let n_up = d.upper.len();
    let n_low = d.lower.len();
    for t in 0..d.horizon {
        for c in 0..2 {
            for (u, &j) in d.upper.iter().enumerate() {
                let v = upper_out[(t * 2 + c) * n_up + u];
                if c == 0 {
                    out.set_position(t, j, v);
                } else {
                    out.set_velocity(t, j, v);
                }
            }
            for (u, &j) in d.lower.iter().enumerate() {
                let v = lower_out[(t * 2 + c) * n_low + u];
                if c == 0 {
                    out.set_position(t, j, v);
                } else {
                    out.set_velocity(t, j, v);
                }
            }
        }
    }
}

fn gather_cotangent(
    d: &NetworkDescriptor,
    cotangent: &PredictionWindow,
) -> (DVector<f64>, DVector<f64>) {
    let n_up = d.upper.len();
    let n_low = d.lower.len();
    let mut g_up = DVector::zeros(d.horizon * 2 * n_up);
    let mut g_low = DVector::zeros(d.horizon * 2 * n_low);
    for t in 0..d.horizon {
        for c in 0..2 {
            for (u, &j) in d.upper.iter().enumerate() {
                g_up[(t * 2 + c) * n_up + u] = if c == 0 {
                    cotangent.position(t, j)
                } else {
                    cotangent.velocity(t, j)
                };
            }
            for (u, &j) in d.lower.iter().enumerate() {
                g_low[(t * 2 + c) * n_low + u] = if c == 0 {
                    cotangent.position(t, j)
                } else {
                    cotangent.velocity(t, j)
                };
            }
        }
    }
    (g_up, g_low)
}

/// Reverse pass: gradients of `dot(cotangent, forward output)` with respect
/// to every parameter, plus the gradient with respect to the flattened
/// buffer input.
pub fn backward(
    params: &PredictorParams,
    cache: &ActivationCache,
    cotangent: &PredictionWindow,
) -> Result<(ParamGrads, DVector<f64>), NetworkError> {
    let d = &params.descriptor;
    if cotangent.flat().len() != d.horizon * 2 * d.dof {
        return Err(NetworkError::ShapeMismatch {
            what: "cotangent",
            expected: d.horizon * 2 * d.dof,
            actual: cotangent.flat().len(),
        });
    }
    if cache.pre.len() != 8 || cache.pre[5].len() != d.horizon * 2 * d.upper.len() {
        return Err(NetworkError::InconsistentDescriptor(
            "activation cache does not match descriptor".into(),
        ));
    }

    let mut grads = ParamGrads::zeros_like(params);
    let (g_up, g_low) = gather_cotangent(d, cotangent);

    // Output layers are affine: the cotangent is already the pre-activation
    // gradient.
    grads.layers[5].weight = &g_up * cache.post[4].transpose();
    grads.layers[5].bias = g_up.clone();
    let mut g_a4 = params.layers[5].weight.transpose() * &g_up;
    g_a4.zip_apply(&cache.pre[4], |g, z| *g *= elu_prime(z));
    grads.layers[4].weight = &g_a4 * cache.post[3].transpose();
    grads.layers[4].bias = g_a4.clone();
    let g_a3_upper = params.layers[4].weight.transpose() * &g_a4;

    grads.layers[7].weight = &g_low * cache.post[6].transpose();
    grads.layers[7].bias = g_low.clone();
    let mut g_a6 = params.layers[7].weight.transpose() * &g_low;
    g_a6.zip_apply(&cache.pre[6], |g, z| *g *= elu_prime(z));
    grads.layers[6].weight = &g_a6 * cache.post[3].transpose();
    grads.layers[6].bias = g_a6.clone();
    let g_a3_lower = params.layers[6].weight.transpose() * &g_a6;

    let mut g_z3 = g_a3_upper + g_a3_lower;
    g_z3.zip_apply(&cache.pre[3], |g, z| *g *= elu_prime(z));
    grads.layers[3].weight = &g_z3 * cache.post[2].transpose();
    grads.layers[3].bias = g_z3.clone();

    let mut g_z2 = params.layers[3].weight.transpose() * &g_z3;
    g_z2.zip_apply(&cache.pre[2], |g, z| *g *= elu_prime(z));
    let hi = d.inertial_hidden;
    let hb = d.buffer_hidden;
    let mut concat = DVector::zeros(hi + hb);
    concat.rows_mut(0, hi).copy_from(&cache.post[0]);
    concat.rows_mut(hi, hb).copy_from(&cache.post[1]);
    grads.layers[2].weight = &g_z2 * concat.transpose();
    grads.layers[2].bias = g_z2.clone();

    let g_concat = params.layers[2].weight.transpose() * &g_z2;
    let mut g_z0 = g_concat.rows(0, hi).clone_owned();
    g_z0.zip_apply(&cache.pre[0], |g, z| *g *= elu_prime(z));
    grads.layers[0].weight = &g_z0 * cache.inertial_norm.transpose();
    grads.layers[0].bias = g_z0;

    let mut g_z1 = g_concat.rows(hi, hb).clone_owned();
    g_z1.zip_apply(&cache.pre[1], |g, z| *g *= elu_prime(z));
    grads.layers[1].weight = &g_z1 * cache.buffer_flat.transpose();
    grads.layers[1].bias = g_z1.clone();
    let g_buffer = params.layers[1].weight.transpose() * &g_z1;

    Ok((grads, g_buffer))
}
