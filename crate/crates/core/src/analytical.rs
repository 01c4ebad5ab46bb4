//! Closed-form tilt and rotation estimates and their calibration.
//!
//! Tilting the marker by `θ_y` puts a linear phase ramp on the reflected field
//! whose angle depends on wavelength, so the two laser lines land as copies of
//! the same speckle pattern displaced by
//!
//! ```text
//! δ = 2 · d_eff · sin θ_y · (Δλ / λ0) / pitch  +  c1·θ + c2·θ²      (pixels, θ in radians)
//! ```
//!
//! with `d_eff = d_z − S_z`: the marker-to-sensor distance less the axial offset
//! of the source from the sensor plane. In the co-axial layout lateral source
//! offsets cancel, so only `S_z` enters.

use serde::{Deserialize, Serialize};

use crate::dsp::{
    autocorrelation_of, find_side_peaks, logmag_of, stripe_orientation_with, Autocorrelogram, PeakPair, Spectrum,
    DEFAULT_ANISOTROPY_THRESHOLD, DEFAULT_EXCLUSION_RADIUS_PX, DEFAULT_PEAK_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::optics::{LaserSpec, OpticalParams, Pose, SpeckleFrame};

/// Largest tilt the inversion searches.
pub const MAX_THETA_Y_DEG: f64 = 60.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationParams {
    pub lambda0_m: f64,
    pub delta_lambda_m: f64,
    /// Axial source offset `S_z` from the sensor plane, meters.
    pub source_pos_m: f64,
    pub pitch_m: f64,
    /// Residual coefficients `[c1, c2]` in pixels per radian and per radian².
    pub residual: [f64; 2],
    /// Stripe orientation of a `θ_z = 0` marker in the spectrum, degrees.
    pub reference_orientation_deg: f64,
}

impl CalibrationParams {
    pub fn from_setup(laser: &LaserSpec, optics: &OpticalParams) -> Self {
        Self {
            lambda0_m: laser.lambda0_m,
            delta_lambda_m: laser.delta_lambda_m,
            source_pos_m: 0.0,
            pitch_m: optics.pitch_m,
            residual: [0.0; 2],
            reference_orientation_deg: 90.0,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.delta_lambda_m / self.lambda0_m
    }

    pub fn validate(&self) -> Result<()> {
        LaserSpec {
            lambda0_m: self.lambda0_m,
            delta_lambda_m: self.delta_lambda_m,
            source_pos_m: [0.0, 0.0, self.source_pos_m],
            power_ratio: 1.0,
        }
        .validate()?;
        if !(self.pitch_m > 0.0 && self.pitch_m.is_finite()) {
            return Err(Error::Config(format!("pitch_m must be > 0, got {}", self.pitch_m)));
        }
        let rest = [self.source_pos_m, self.residual[0], self.residual[1], self.reference_orientation_deg];
        if rest.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("calibration values must be finite".into()));
        }
        Ok(())
    }
}

/// Predicted copy shift in pixels.
pub fn forward_shift_model(theta_y_deg: f64, pose_depth_m: f64, calib: &CalibrationParams) -> f64 {
    let t = theta_y_deg.to_radians();
    let d_eff = pose_depth_m - calib.source_pos_m;
    2.0 * d_eff * t.sin() * calib.ratio() / calib.pitch_m + calib.residual[0] * t + calib.residual[1] * t * t
}

/// Inverts [`forward_shift_model`] for the measured peak separation by bisection
/// on `[0, MAX_THETA_Y_DEG]`.
pub fn estimate_theta_y(peaks: &PeakPair, pose_depth_m: f64, calib: &CalibrationParams) -> Result<f64> {
    if !peaks.valid {
        return Err(Error::NotResolvable {
            prominence: peaks.prominence,
            threshold: f64::NAN,
        });
    }
    invert_shift(peaks.separation_px(), pose_depth_m, calib)
}

/// Tilt whose predicted shift is `shift_px`.
pub fn invert_shift(shift_px: f64, pose_depth_m: f64, calib: &CalibrationParams) -> Result<f64> {
    let f = |t: f64| forward_shift_model(t, pose_depth_m, calib);
    let (mut lo, mut hi) = (0.0, MAX_THETA_Y_DEG);
    let max_px = f(hi);
    if shift_px > max_px {
        return Err(Error::OutOfRange { shift_px, max_px });
    }
    if shift_px <= f(lo) {
        return Ok(lo);
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < shift_px {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `θ_z` from the stripe orientation relative to the calibrated reference,
/// folded into `[0, 90]`.
pub fn estimate_theta_z(spec: &Spectrum, reference_orientation_deg: f64) -> Result<f64> {
    estimate_theta_z_with(spec, reference_orientation_deg, &EstimatorOpts::default())
}

pub fn estimate_theta_z_with(spec: &Spectrum, reference_orientation_deg: f64, opts: &EstimatorOpts) -> Result<f64> {
    let o = stripe_orientation_with(spec, opts.exclusion_radius_px, opts.anisotropy_threshold);
    if !o.valid {
        return Err(Error::Isotropic { score: o.anisotropy });
    }
    Ok(fold_theta_z(o.angle_deg - reference_orientation_deg))
}

/// Maps an orientation difference (mod 180) into `[0, 90]`, sending the far side
/// of the half-turn to the nearer end.
pub fn fold_theta_z(diff_deg: f64) -> f64 {
    let t = diff_deg.rem_euclid(180.0);
    if t > 135.0 {
        0.0
    } else {
        t.min(90.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorOpts {
    pub exclusion_radius_px: usize,
    pub peak_threshold: f64,
    pub anisotropy_threshold: f64,
}

impl Default for EstimatorOpts {
    fn default() -> Self {
        Self {
            exclusion_radius_px: DEFAULT_EXCLUSION_RADIUS_PX,
            peak_threshold: DEFAULT_PEAK_THRESHOLD,
            anisotropy_threshold: DEFAULT_ANISOTROPY_THRESHOLD,
        }
    }
}

/// Averaged autocorrelation and spectrum of a frame stack.
pub struct StackMeasurement {
    pub ac: Autocorrelogram,
    pub spectrum: Spectrum,
}

pub fn measure_stack(frames: &[SpeckleFrame]) -> Result<StackMeasurement> {
    let first = frames.first().ok_or_else(|| Error::Input("empty frame stack".into()))?;
    let (w, h) = first.pixels.dims();
    let mut ac = Grid::new(w, h, 0.0);
    let mut spec = Grid::new(w, h, 0.0);
    for f in frames {
        if f.pixels.dims() != (w, h) {
            return Err(Error::Shape {
                expected: format!("{w}x{h}"),
                found: format!("{:?}", f.pixels.dims()),
            });
        }
        let values = f.to_f64();
        let a = autocorrelation_of(&values)?;
        let s = logmag_of(&values);
        for (acc, v) in ac.data_mut().iter_mut().zip(a.ac.data()) {
            *acc += v / frames.len() as f64;
        }
        for (acc, v) in spec.data_mut().iter_mut().zip(s.logmag.data()) {
            *acc += v / frames.len() as f64;
        }
    }
    Ok(StackMeasurement {
        ac: Autocorrelogram { ac },
        spectrum: Spectrum {
            logmag: spec,
            source_dims: (w, h),
        },
    })
}

/// Analytical pose estimate of one stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticalEstimate {
    pub theta_y_deg: f64,
    /// `None` when the spectrum is too isotropic.
    pub theta_z_deg: Option<f64>,
    /// Whether the side peak was resolved; otherwise `theta_y_deg` is the
    /// midpoint of the unresolvable tilt range.
    pub resolved: bool,
    pub shift_px: f64,
}

/// Tilt and rotation for a stack at known depth. Tilts too small for the side
/// peak to clear the exclusion disk are reported as half the smallest
/// resolvable tilt.
pub fn estimate_stack(
    frames: &[SpeckleFrame],
    pose_depth_m: f64,
    calib: &CalibrationParams,
    opts: &EstimatorOpts,
) -> Result<AnalyticalEstimate> {
    let m = measure_stack(frames)?;
    let peaks = find_side_peaks(&m.ac, opts.exclusion_radius_px, opts.peak_threshold)?;
    let (theta_y_deg, resolved) = if peaks.valid {
        match invert_shift(peaks.separation_px(), pose_depth_m, calib) {
            Ok(t) => (t, true),
            Err(Error::OutOfRange { .. }) => (MAX_THETA_Y_DEG, true),
            Err(e) => return Err(e),
        }
    } else {
        let edge = invert_shift(opts.exclusion_radius_px as f64, pose_depth_m, calib).unwrap_or(0.0);
        (0.5 * edge, false)
    };
    let theta_z_deg = estimate_theta_z_with(&m.spectrum, calib.reference_orientation_deg, opts).ok();
    Ok(AnalyticalEstimate {
        theta_y_deg,
        theta_z_deg,
        resolved,
        shift_px: if peaks.valid { peaks.separation_px() } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerOpts {
    pub max_iterations: usize,
    pub initial_step: f64,
    /// Halvings tried before a step is declared impossible.
    pub max_backoff: usize,
    /// Early stop when an accepted step changes the loss by less than this, relatively.
    pub rel_tol: f64,
    /// Gradient norm (relative to `1 + loss`) accepted as stationary when no step helps.
    pub grad_tol: f64,
    pub fit_source_offset: bool,
    pub fit_residual: bool,
    /// Ridge weight pulling offset and residual towards zero, so the ratio
    /// explains whatever a pure `sin θ` law can.
    pub ridge: f64,
    pub estimator: EstimatorOpts,
}

impl Default for OptimizerOpts {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            initial_step: 1e-2,
            max_backoff: 40,
            rel_tol: 1e-8,
            grad_tol: 1e-6,
            fit_source_offset: true,
            fit_residual: true,
            ridge: 1e-2,
            estimator: EstimatorOpts::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationResult {
    pub params: CalibrationParams,
    pub loss: f64,
    pub iterations: usize,
    /// Loss after every accepted step, starting with the initial loss.
    pub trace: Vec<f64>,
    /// Frames whose side peak was resolvable.
    pub used: usize,
    pub dropped: usize,
}

/// One labeled shift observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftObservation {
    pub theta_y_deg: f64,
    pub depth_m: f64,
    pub shift_px: f64,
}

// Parameters are optimized in unit-order coordinates:
// [ratio / ratio_init, S_z in cm, c1 px, c2 px].
const OFFSET_SCALE_M: f64 = 0.01;

fn unpack(p: &[f64; 4], init: &CalibrationParams) -> CalibrationParams {
    let mut c = init.clone();
    c.delta_lambda_m = init.delta_lambda_m * p[0];
    c.source_pos_m = p[1] * OFFSET_SCALE_M;
    c.residual = [p[2], p[3]];
    c
}

/// Mean squared shift residual plus the ridge term.
pub fn calibration_loss(obs: &[ShiftObservation], params: &CalibrationParams, ridge: f64) -> f64 {
    let n = obs.len().max(1) as f64;
    let data: f64 = obs
        .iter()
        .map(|o| (forward_shift_model(o.theta_y_deg, o.depth_m, params) - o.shift_px).powi(2))
        .sum::<f64>()
        / n;
    let off = params.source_pos_m / OFFSET_SCALE_M;
    data + ridge * (off * off + params.residual[0].powi(2) + params.residual[1].powi(2))
}

fn central_gradient(f: &dyn Fn(&[f64; 4]) -> f64, p: &[f64; 4], active: &[bool; 4], h: f64) -> [f64; 4] {
    let mut g = [0.0; 4];
    for i in 0..4 {
        if !active[i] {
            continue;
        }
        let (mut a, mut b) = (*p, *p);
        a[i] += h;
        b[i] -= h;
        g[i] = (f(&a) - f(&b)) / (2.0 * h);
    }
    g
}

const GRAD_STEP: f64 = 1e-6;

/// Extracts resolvable shift observations from labeled frames.
pub fn observe_shifts(training: &[(SpeckleFrame, Pose)], opts: &EstimatorOpts) -> Result<(Vec<ShiftObservation>, usize)> {
    let mut obs = Vec::with_capacity(training.len());
    let mut dropped = 0;
    for (frame, pose) in training {
        let ac = autocorrelation_of(&frame.to_f64())?;
        let peaks = find_side_peaks(&ac, opts.exclusion_radius_px, opts.peak_threshold)?;
        if peaks.valid {
            obs.push(ShiftObservation {
                theta_y_deg: pose.theta_y_deg,
                depth_m: pose.d_z_m,
                shift_px: peaks.separation_px(),
            });
        } else {
            dropped += 1;
        }
    }
    Ok((obs, dropped))
}

/// Fits the wavelength ratio, source offset and residual polynomial to labeled
/// frames by gradient descent, and the stripe reference orientation from the
/// frames' spectra.
pub fn calibrate(
    training: &[(SpeckleFrame, Pose)],
    init: &CalibrationParams,
    opts: &OptimizerOpts,
) -> Result<CalibrationResult> {
    init.validate()?;
    let (obs, dropped) = observe_shifts(training, &opts.estimator)?;
    let mut result = fit_shift_model(&obs, init, opts)?;
    result.dropped = dropped;
    result.params.reference_orientation_deg = fit_reference_orientation(training, &opts.estimator)
        .unwrap_or(init.reference_orientation_deg);
    Ok(result)
}

/// Gradient-descent fit of the shift model to observations.
pub fn fit_shift_model(
    obs: &[ShiftObservation],
    init: &CalibrationParams,
    opts: &OptimizerOpts,
) -> Result<CalibrationResult> {
    init.validate()?;
    let (lo, hi) = obs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), o| (l.min(o.theta_y_deg), h.max(o.theta_y_deg)));
    if obs.len() < 8 || hi - lo < 20.0 {
        return Err(Error::Input(format!(
            "calibration needs >= 8 resolvable frames spanning >= 20 deg of tilt, got {} spanning {:.1} deg",
            obs.len(),
            (hi - lo).max(0.0)
        )));
    }
    let active = [true, opts.fit_source_offset, opts.fit_residual, opts.fit_residual];
    let loss = |p: &[f64; 4]| calibration_loss(obs, &unpack(p, init), opts.ridge);

    let mut p = [1.0, init.source_pos_m / OFFSET_SCALE_M, init.residual[0], init.residual[1]];
    let mut l = loss(&p);
    let mut trace = vec![l];
    let mut step = opts.initial_step;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let g = central_gradient(&loss, &p, &active, GRAD_STEP);
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn == 0.0 {
            break;
        }
        let mut accepted = None;
        for _ in 0..=opts.max_backoff {
            let mut q = p;
            for i in 0..4 {
                q[i] -= step * g[i];
            }
            let lq = loss(&q);
            if lq.is_finite() && lq < l {
                accepted = Some((q, lq));
                break;
            }
            step *= 0.5;
        }
        let Some((q, lq)) = accepted else {
            if gn <= opts.grad_tol * (1.0 + l) {
                break;
            }
            return Err(Error::Convergence {
                iterations,
                loss: l,
                grad_norm: gn,
                trace,
            });
        };
        let rel = (l - lq) / l.max(f64::MIN_POSITIVE);
        p = q;
        l = lq;
        trace.push(l);
        step *= 1.5;
        if rel < opts.rel_tol {
            break;
        }
    }
    if p[0] <= 0.0 {
        return Err(Error::Convergence {
            iterations,
            loss: l,
            grad_norm: f64::NAN,
            trace,
        });
    }
    Ok(CalibrationResult {
        params: unpack(&p, init),
        loss: l,
        iterations,
        trace,
        used: obs.len(),
        dropped: 0,
    })
}

/// Circular mean (mod 180) of `orientation - θ_z` over frames with a valid
/// stripe reading. Untilted frames are preferred since their spectra carry no
/// two-copy fringes.
pub fn fit_reference_orientation(training: &[(SpeckleFrame, Pose)], opts: &EstimatorOpts) -> Option<f64> {
    let min_tilt = training.iter().map(|(_, p)| p.theta_y_deg).fold(f64::INFINITY, f64::min);
    let (mut sx, mut sy) = (0.0, 0.0);
    for (frame, pose) in training.iter().filter(|(_, p)| p.theta_y_deg <= min_tilt + 1e-9) {
        let o = stripe_orientation_with(&logmag_of(&frame.to_f64()), opts.exclusion_radius_px, opts.anisotropy_threshold);
        if o.valid {
            let a = (2.0 * (o.angle_deg - pose.theta_z_deg)).to_radians();
            sx += a.cos();
            sy += a.sin();
        }
    }
    (sx != 0.0 || sy != 0.0).then(|| (sy.atan2(sx).to_degrees() / 2.0).rem_euclid(180.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_calib() -> CalibrationParams {
        CalibrationParams {
            lambda0_m: 532e-9,
            delta_lambda_m: 0.2e-9,
            source_pos_m: 0.0,
            pitch_m: 3.45e-6,
            residual: [0.0; 2],
            reference_orientation_deg: 90.0,
        }
    }

    #[test]
    fn zero_tilt_zero_shift() {
        let mut c = paper_calib();
        c.residual = [0.3, -0.2];
        assert_eq!(forward_shift_model(0.0, 0.2, &c), 0.0);
    }

    #[test]
    fn shift_arithmetic() {
        // d_eff = 0.40 m at 20 degrees
        let want = 2.0 * 0.40 * 20f64.to_radians().sin() * (0.2 / 532.0) / 3.45e-6;
        assert!((want - 29.8).abs() < 0.05);
        let got = forward_shift_model(20.0, 0.40, &paper_calib());
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn source_offset_shortens_path() {
        let mut c = paper_calib();
        c.source_pos_m = 0.05;
        let a = forward_shift_model(20.0, 0.25, &c);
        let b = forward_shift_model(20.0, 0.20, &paper_calib());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn monotone_on_range() {
        let c = paper_calib();
        let v: Vec<f64> = (0..=600).map(|i| forward_shift_model(i as f64 * 0.1, 0.2, &c)).collect();
        assert!(v.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn round_trip_inversion() {
        let c = paper_calib();
        for t in [0.5, 5.0, 20.0, 39.9, 59.0] {
            let s = forward_shift_model(t, 0.2, &c);
            assert!((invert_shift(s, 0.2, &c).unwrap() - t).abs() < 1e-6);
        }
        let big = forward_shift_model(60.0, 0.2, &c) + 1.0;
        assert!(matches!(invert_shift(big, 0.2, &c), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn larger_shift_never_smaller_angle() {
        let c = paper_calib();
        let mut prev = -1.0;
        for i in 0..180 {
            let t = invert_shift(i as f64 * 0.2, 0.2, &c).unwrap();
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn invalid_peaks_not_resolvable() {
        let p = PeakPair {
            offset_px: (10.0, 0.0),
            mirror_px: (-10.0, 0.0),
            prominence: 0.01,
            valid: false,
        };
        assert!(matches!(estimate_theta_y(&p, 0.2, &paper_calib()), Err(Error::NotResolvable { .. })));
    }

    #[test]
    fn ratio_is_scale_identified() {
        let a = paper_calib();
        let mut b = a.clone();
        b.lambda0_m *= 2.0;
        b.delta_lambda_m *= 2.0;
        for t in [3.0, 17.0, 33.0] {
            assert!((forward_shift_model(t, 0.2, &a) - forward_shift_model(t, 0.2, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn fold_into_quarter_turn() {
        assert_eq!(fold_theta_z(45.0), 45.0);
        assert_eq!(fold_theta_z(-45.0 + 180.0), 90.0);
        assert_eq!(fold_theta_z(-0.3), 0.0);
        assert!((fold_theta_z(90.2) - 90.0).abs() < 1e-12);
        assert!((fold_theta_z(360.0 + 12.5) - 12.5).abs() < 1e-9);
    }

    fn synthetic_obs(c: &CalibrationParams, noise: f64) -> Vec<ShiftObservation> {
        let mut v = Vec::new();
        for (i, t) in (2..=40).step_by(2).enumerate() {
            for d in [0.16, 0.2, 0.24, 0.28] {
                let wiggle = noise * if (i + (d * 100.0) as usize) % 2 == 0 { 1.0 } else { -1.0 };
                v.push(ShiftObservation {
                    theta_y_deg: t as f64,
                    depth_m: d,
                    shift_px: forward_shift_model(t as f64, d, c) + wiggle,
                });
            }
        }
        v
    }

    #[test]
    fn calibration_from_truth_stays_put() {
        let truth = paper_calib();
        let obs = synthetic_obs(&truth, 0.05);
        let r = fit_shift_model(&obs, &truth, &OptimizerOpts::default()).unwrap();
        assert!((r.params.ratio() / truth.ratio() - 1.0).abs() < 0.01);
        assert!(r.loss < 0.05 * 0.05 * 1.5);
    }

    #[test]
    fn calibration_recovers_ratio_from_double() {
        let truth = paper_calib();
        let obs = synthetic_obs(&truth, 0.05);
        let mut init = truth.clone();
        init.delta_lambda_m *= 2.0;
        let r = fit_shift_model(&obs, &init, &OptimizerOpts::default()).unwrap();
        assert!((r.params.ratio() / truth.ratio() - 1.0).abs() < 0.05, "{:?}", r.params);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn calibration_needs_span() {
        let truth = paper_calib();
        let obs: Vec<_> = synthetic_obs(&truth, 0.0).into_iter().filter(|o| o.theta_y_deg < 15.0).collect();
        assert!(matches!(fit_shift_model(&obs, &truth, &OptimizerOpts::default()), Err(Error::Input(_))));
    }

    #[test]
    fn central_gradient_matches_richardson() {
        use rand::Rng;
        let truth = paper_calib();
        let obs = synthetic_obs(&truth, 0.1);
        let mut rng = crate::rng::rng_from(11);
        for _ in 0..10 {
            let p = [
                rng.random_range(0.5..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let f = |q: &[f64; 4]| calibration_loss(&obs, &unpack(q, &truth), 0.01);
            let g = central_gradient(&f, &p, &[true; 4], GRAD_STEP);
            let g1 = central_gradient(&f, &p, &[true; 4], 1e-3);
            let g2 = central_gradient(&f, &p, &[true; 4], 5e-4);
            for i in 0..4 {
                let rich = (4.0 * g2[i] - g1[i]) / 3.0;
                assert!((g[i] - rich).abs() <= 1e-4 * rich.abs().max(1.0), "{i}: {} vs {rich}", g[i]);
            }
        }
    }
}
