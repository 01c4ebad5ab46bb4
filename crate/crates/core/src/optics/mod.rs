//! Scalar optics of the marker-to-sensor light path.
//!
//! The marker is a rough reflective plane behind a coded aperture. Source and
//! sensor share the optical axis (beam splitter), so only the return path is
//! propagated; the double pass is folded into the reflection phase `4 pi h / lambda`.
//! A y-axis tilt becomes a linear phase ramp and a z-axis rotation turns the
//! aperture and height map in-plane. Each laser line is propagated on its own
//! and the intensities are summed, since distinct lines keep no stable mutual
//! phase over an exposure.

mod field;
mod propagate;
mod render;
mod surface;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub use field::{reflected_field, rotate_in_plane, ComplexField, Interpolation};
pub use propagate::{band_limit_frequency, propagate_angular_spectrum, BandLimit};
pub use render::{quantize_frame, render_intensity, render_speckle_frame, speckle_size_px};
pub use surface::generate_surface;

/// Marker pose: two absolute rotations and the marker depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub theta_y_deg: f64,
    pub theta_z_deg: f64,
    pub d_z_m: f64,
}

impl Pose {
    pub const THETA_Y_DEG: (f64, f64) = (0.0, 40.0);
    pub const THETA_Z_DEG: (f64, f64) = (0.0, 90.0);
    pub const DEPTH_M: (f64, f64) = (0.16, 0.28);

    pub fn new(theta_y_deg: f64, theta_z_deg: f64, d_z_m: f64) -> Self {
        Self {
            theta_y_deg,
            theta_z_deg,
            d_z_m,
        }
    }

    pub fn in_distribution(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo - 1e-9 && v <= hi + 1e-9;
        within(self.theta_y_deg, Self::THETA_Y_DEG)
            && within(self.theta_z_deg, Self::THETA_Z_DEG)
            && within(self.d_z_m, Self::DEPTH_M)
    }

    pub fn clamped(&self) -> Self {
        let c = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo, hi);
        Self {
            theta_y_deg: c(self.theta_y_deg, Self::THETA_Y_DEG),
            theta_z_deg: c(self.theta_z_deg, Self::THETA_Z_DEG),
            d_z_m: c(self.d_z_m, Self::DEPTH_M),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Gaussian read noise, DN.
    pub read_noise_dn: f64,
    /// Poisson photon noise on/off.
    pub shot_noise: bool,
    /// Conversion gain used for shot noise.
    pub electrons_per_dn: f64,
}

impl NoiseSpec {
    pub fn off() -> Self {
        Self {
            read_noise_dn: 0.0,
            shot_noise: false,
            electrons_per_dn: 1.0,
        }
    }

    pub fn is_off(&self) -> bool {
        self.read_noise_dn == 0.0 && !self.shot_noise
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            read_noise_dn: 1.0,
            shot_noise: true,
            electrons_per_dn: 4.0,
        }
    }
}

/// Simulation grid and sensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalParams {
    /// Samples per side of the (square) simulation field; a power of two.
    pub grid_n: usize,
    /// Sample pitch at the sensor plane, meters. Also the marker-plane pitch.
    pub pitch_m: f64,
    pub sensor_w_px: usize,
    pub sensor_h_px: usize,
    pub noise: NoiseSpec,
    /// 8 or 16.
    pub bit_depth: u8,
    /// Mean frame level as a fraction of full scale after exposure normalization.
    pub exposure: f64,
    /// Apply the band limit during propagation.
    pub band_limit: bool,
}

impl OpticalParams {
    /// Minutes-on-a-laptop profile: 512 grid, 256x256 sensor.
    pub fn desk() -> Self {
        Self {
            grid_n: 512,
            pitch_m: 12e-6,
            sensor_w_px: 256,
            sensor_h_px: 256,
            noise: NoiseSpec::default(),
            bit_depth: 8,
            exposure: 0.25,
            band_limit: true,
        }
    }

    /// Full-size profile: 1024 grid, 640x360 sensor with 3.45 um pixels.
    pub fn paper() -> Self {
        Self {
            grid_n: 1024,
            pitch_m: 3.45e-6,
            sensor_w_px: 640,
            sensor_h_px: 360,
            noise: NoiseSpec::default(),
            bit_depth: 8,
            exposure: 0.25,
            band_limit: true,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.noise = NoiseSpec::off();
        self
    }

    pub fn max_dn(&self) -> u32 {
        (1u32 << self.bit_depth) - 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.grid_n.is_power_of_two() || self.grid_n < 8 {
            return Err(Error::Config(format!(
                "grid_n must be a power of two >= 8, got {}",
                self.grid_n
            )));
        }
        if self.grid_n < self.sensor_w_px.max(self.sensor_h_px) {
            return Err(Error::Config(format!(
                "grid_n {} smaller than sensor {}x{}",
                self.grid_n, self.sensor_w_px, self.sensor_h_px
            )));
        }
        if self.sensor_w_px == 0 || self.sensor_h_px == 0 {
            return Err(Error::Config("sensor must be non-empty".into()));
        }
        if !(self.pitch_m > 0.0 && self.pitch_m.is_finite()) {
            return Err(Error::Config(format!("pitch_m must be > 0, got {}", self.pitch_m)));
        }
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return Err(Error::Config(format!("bit_depth must be 8 or 16, got {}", self.bit_depth)));
        }
        if !(self.exposure > 0.0 && self.exposure <= 1.0) {
            return Err(Error::Config(format!("exposure must be in (0, 1], got {}", self.exposure)));
        }
        let n = &self.noise;
        if n.read_noise_dn < 0.0 || !(n.electrons_per_dn > 0.0) {
            return Err(Error::Config("noise parameters must be non-negative".into()));
        }
        Ok(())
    }
}

/// The two laser lines and the source position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserSpec {
    /// Dominant wavelength, meters.
    pub lambda0_m: f64,
    /// `lambda0 - lambda1`, meters.
    pub delta_lambda_m: f64,
    /// Source position relative to the sensor center, meters.
    pub source_pos_m: [f64; 3],
    /// Power of the second line relative to the first.
    #[serde(default = "one")]
    pub power_ratio: f64,
}

fn one() -> f64 {
    1.0
}

impl LaserSpec {
    pub fn desk() -> Self {
        Self {
            lambda0_m: 532e-9,
            delta_lambda_m: 1.8e-9,
            source_pos_m: [0.0; 3],
            power_ratio: 1.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            lambda0_m: 532e-9,
            delta_lambda_m: 0.2e-9,
            source_pos_m: [0.0; 3],
            power_ratio: 1.0,
        }
    }

    pub fn lambda1_m(&self) -> f64 {
        self.lambda0_m - self.delta_lambda_m
    }

    pub fn ratio(&self) -> f64 {
        self.delta_lambda_m / self.lambda0_m
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0_m > 0.0 && self.lambda0_m.is_finite()) {
            return Err(Error::Config(format!("lambda0_m must be > 0, got {}", self.lambda0_m)));
        }
        if !(self.delta_lambda_m > 0.0 && self.delta_lambda_m < self.lambda0_m / 100.0) {
            return Err(Error::Config(format!(
                "delta_lambda_m must satisfy 0 < dl < lambda0/100, got {}",
                self.delta_lambda_m
            )));
        }
        if !(self.power_ratio >= 0.0 && self.power_ratio.is_finite()) {
            return Err(Error::Config("power_ratio must be >= 0".into()));
        }
        Ok(())
    }
}

/// Coded aperture geometry. Stripes and code columns run along the marker's y axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ApertureSpec {
    /// Fully transmitting.
    Open,
    /// Circular pupil of radius `radius_frac * grid_n`.
    Pupil { radius_frac: f64 },
    /// Circular pupil crossed by `stripes` opaque parallel bars.
    Striped {
        radius_frac: f64,
        stripes: usize,
        /// Bar width as a fraction of `grid_n`.
        width_frac: f64,
        /// Center-to-center bar spacing as a fraction of `grid_n`.
        period_frac: f64,
    },
    /// Circular pupil split into columns of width `unit_frac * grid_n`, starting
    /// at the pupil's left edge; column `k` transmits iff `code[k] == '1'`.
    Coded {
        radius_frac: f64,
        unit_frac: f64,
        code: String,
    },
}

/// Column code of the default aperture: an aperiodic sparse binary sequence
/// whose transmission autocorrelation is a narrow ridge over a low, flat floor.
/// The ridge gives a strongly oriented spectrum; the flat floor keeps the
/// autocorrelation free of side lobes that could pass for a wavelength peak.
pub const DEFAULT_APERTURE_CODE: &str =
    "00000000000000000010010100010111001100010010000011001011010100000000010100000000000000";

impl Default for ApertureSpec {
    fn default() -> Self {
        ApertureSpec::Coded {
            radius_frac: 0.25,
            unit_frac: 3.0 / 512.0,
            code: DEFAULT_APERTURE_CODE.to_string(),
        }
    }
}

impl ApertureSpec {
    /// Diameter of the illuminated region in samples.
    pub fn diameter_samples(&self, grid_n: usize) -> f64 {
        match *self {
            ApertureSpec::Open => grid_n as f64,
            ApertureSpec::Pupil { radius_frac }
            | ApertureSpec::Striped { radius_frac, .. }
            | ApertureSpec::Coded { radius_frac, .. } => {
                2.0 * radius_frac * grid_n as f64
            }
        }
    }
}

/// Physical marker: roughness and aperture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSpec {
    pub roughness_rms_m: f64,
    pub aperture: ApertureSpec,
}

impl Default for MarkerSpec {
    fn default() -> Self {
        Self {
            roughness_rms_m: 2e-6,
            aperture: ApertureSpec::default(),
        }
    }
}

/// One sampled marker: heights and aperture transmission on the simulation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceRealization {
    pub height_map: Grid<f64>,
    pub aperture_mask: Grid<f64>,
    pub pitch_m: f64,
    pub seed: u64,
    /// Aperture diameter in samples, used for sampling checks.
    pub aperture_diameter: f64,
}

impl SurfaceRealization {
    pub fn grid_n(&self) -> usize {
        self.height_map.width()
    }
}

/// Capture metadata carried by every frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub bit_depth: u8,
    pub pitch_m: f64,
    pub lambda0_m: f64,
    pub delta_lambda_m: f64,
}

/// A captured (here: simulated) intensity frame with its pose label.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeckleFrame {
    /// Digital numbers, `sensor_h_px` rows by `sensor_w_px` columns.
    pub pixels: Grid<u16>,
    pub pose: Pose,
    pub frame_index: u64,
    pub meta: FrameMeta,
}

impl SpeckleFrame {
    pub fn to_f64(&self) -> Grid<f64> {
        self.pixels.map(f64::from)
    }
}
