//! The learned estimator: spectra of five consecutive frames in, `(θ_y, θ_z, d_z)` out.

mod layers;
mod linalg;
mod network;
mod stream;
mod train;

use serde::{Deserialize, Serialize};

use crate::dsp::{central_crop, fft_logmag};
use crate::error::{Error, Result};
use crate::optics::{Pose, SpeckleFrame};

pub use linalg::{matmul, Real};
pub use network::{mse_loss, Cache, Network, NetworkSpec, CONV_BLOCKS, LINEAR_LAYERS};
pub use stream::{infer_stream, StreamEstimator, StreamStats};
pub use train::{gradient_check, predict, train, train_on_stacks, EpochRecord, GradCheck, LrSchedule, TrainConfig, TrainOutcome};

/// Frames per input stack.
pub const STACK_LEN: usize = 5;

/// Affine target scaling: `normalized = (value - offset) / scale`, with depth
/// in meters. The defaults map the pose ranges onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetNorm {
    pub scale: [f64; 3],
    pub offset: [f64; 3],
}

impl Default for TargetNorm {
    fn default() -> Self {
        Self {
            scale: [40.0, 90.0, 0.12],
            offset: [0.0, 0.0, 0.16],
        }
    }
}

impl TargetNorm {
    pub fn normalize(&self, p: &Pose) -> [f64; 3] {
        let v = [p.theta_y_deg, p.theta_z_deg, p.d_z_m];
        std::array::from_fn(|i| (v[i] - self.offset[i]) / self.scale[i])
    }

    pub fn denormalize(&self, n: &[f64]) -> Pose {
        let v: [f64; 3] = std::array::from_fn(|i| n[i] * self.scale[i] + self.offset[i]);
        Pose::new(v[0], v[1], v[2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().chain(&self.offset).any(|v| !v.is_finite()) || self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("target scales must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Standardized spectra of one frame stack, laid out `[channel][a][b]` where
/// `a` runs along sensor columns and `b` along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct InputStack {
    pub values: Vec<f32>,
    pub shape: [usize; 3],
    /// Pose of the middle frame.
    pub label: Pose,
}

/// Crop kept from each spectrum: the central half in both directions.
pub fn crop_dims(sensor_w: usize, sensor_h: usize) -> (usize, usize) {
    (sensor_w / 2, sensor_h / 2)
}

/// Network input shape for frames of the given size.
pub fn input_shape(sensor_w: usize, sensor_h: usize) -> [usize; 3] {
    let (a, b) = crop_dims(sensor_w, sensor_h);
    [STACK_LEN, a, b]
}

/// Cropped log-magnitude spectrum of one frame in `[a][b]` order, not yet standardized.
pub fn spectrum_channel(frame: &SpeckleFrame) -> Result<Vec<f32>> {
    let (w, h) = frame.pixels.dims();
    let (cw, ch) = crop_dims(w, h);
    let crop = central_crop(&fft_logmag(frame), cw, ch)?.logmag;
    let mut out = Vec::with_capacity(cw * ch);
    for x in 0..cw {
        for y in 0..ch {
            out.push(crop.get(x, y) as f32);
        }
    }
    Ok(out)
}

/// Concatenates channels and standardizes the whole stack to zero mean and unit variance.
pub fn assemble_stack(channels: &[&[f32]]) -> Vec<f32> {
    let total: usize = channels.iter().map(|c| c.len()).sum();
    let n = total.max(1) as f64;
    let mean = channels.iter().flat_map(|c| c.iter()).map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = channels.iter().flat_map(|c| c.iter()).map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    channels
        .iter()
        .flat_map(|c| c.iter())
        .map(|&v| ((f64::from(v) - mean) * inv) as f32)
        .collect()
}

/// Builds the network input from five consecutive frames.
pub fn preprocess_stack(frames: &[SpeckleFrame]) -> Result<InputStack> {
    if frames.len() != STACK_LEN {
        return Err(Error::Input(format!("a stack needs {STACK_LEN} frames, got {}", frames.len())));
    }
    let dims = frames[0].pixels.dims();
    if frames.iter().any(|f| f.pixels.dims() != dims) {
        return Err(Error::Input("stack frames differ in size".into()));
    }
    if frames.windows(2).any(|w| w[1].frame_index != w[0].frame_index + 1) {
        return Err(Error::Input("stack frames are not consecutive".into()));
    }
    let channels = frames.iter().map(spectrum_channel).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f32]> = channels.iter().map(|c| c.as_slice()).collect();
    Ok(InputStack {
        values: assemble_stack(&refs),
        shape: input_shape(dims.0, dims.1),
        label: frames[STACK_LEN / 2].pose,
    })
}
