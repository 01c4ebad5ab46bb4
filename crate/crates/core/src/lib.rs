//! Multi-wavelength laser speckle pose sensing.
//!
//! A rough retroreflective marker carrying a coded aperture is lit by a laser
//! with two close spectral lines and imaged by a bare (lensless) sensor. The two
//! lines produce two near-identical speckle patterns whose mutual shift grows
//! with the marker's y-axis tilt, and the coded aperture imprints stripes on the
//! frame spectrum that turn with the marker's z-axis rotation.
//!
//! The crate is organised as a pipeline:
//!
//! 1. [`optics`] – surface synthesis, reflection, angular-spectrum propagation
//!    and frame rendering.
//! 2. [`scene`] – pose schedules, dataset simulation and splitting.
//! 3. [`dsp`] – spectra, autocorrelation, side-peak and stripe measurements.
//! 4. [`analytical`] – closed-form shift model, its inversion and calibration.
//! 5. [`learned`] – the 5-frame FFT stack network, training and streaming inference.
//! 6. [`io`] – PGM frames, JSON manifests, calibration and weight files.
//! 7. [`eval`] – metrics, comparison tables and throughput benchmarks.

pub mod analytical;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod fft;
pub mod grid;
pub mod io;
pub mod learned;
pub mod optics;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
pub use grid::Grid;
pub use optics::{LaserSpec, OpticalParams, Pose, SpeckleFrame};
