use rand_distr::{Distribution, Normal, Poisson};

use super::field::{reflected_field_rotated, rotated_surface};
use super::{
    propagate_angular_spectrum, BandLimit, FrameMeta, LaserSpec, OpticalParams, Pose, SpeckleFrame,
    SurfaceRealization,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::rng_from;

/// Mean speckle grain size (pixels) for an aperture `aperture_samples` wide.
pub fn speckle_size_px(lambda_m: f64, distance_m: f64, aperture_samples: f64, pitch_m: f64) -> f64 {
    lambda_m * distance_m / (aperture_samples * pitch_m * pitch_m)
}

/// Noiseless sensor intensity: both laser lines propagated over `d_z` and summed,
/// cropped to the sensor. Arbitrary units.
pub fn render_intensity(
    surface: &SurfaceRealization,
    pose: &Pose,
    laser: &LaserSpec,
    params: &OpticalParams,
) -> Result<Grid<f64>> {
    params.validate()?;
    laser.validate()?;
    if surface.grid_n() != params.grid_n {
        return Err(Error::Shape {
            expected: format!("surface grid {}", params.grid_n),
            found: format!("{}", surface.grid_n()),
        });
    }
    let d = pose.d_z_m;
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Sampling(format!("depth must be positive, got {d}")));
    }
    let grain = speckle_size_px(laser.lambda1_m(), d, surface.aperture_diameter, params.pitch_m);
    if grain < 2.0 {
        return Err(Error::Sampling(format!(
            "depth {d} m gives {grain:.2} px speckle on this grid; intensity would alias (need >= 2 px)"
        )));
    }
    if !(pose.theta_y_deg.abs() < 90.0 && pose.theta_z_deg.is_finite()) {
        return Err(Error::Input(format!("pose out of domain: {pose:?}")));
    }

    let band = if params.band_limit {
        BandLimit::Apply
    } else {
        BandLimit::None
    };
    let (mask, heights) = rotated_surface(surface, pose.theta_z_deg);
    let (w, h) = (params.sensor_w_px, params.sensor_h_px);
    let mut total = Grid::new(w, h, 0.0);
    for (lambda, weight) in [(laser.lambda0_m, 1.0), (laser.lambda1_m(), laser.power_ratio)] {
        if weight == 0.0 {
            continue;
        }
        let field = reflected_field_rotated(&mask, &heights, surface.pitch_m, pose.theta_y_deg, lambda)?;
        let out = propagate_angular_spectrum(&field, d, lambda, params.pitch_m, band)?;
        let crop = out.center_window(w, h)?;
        for (t, v) in total.data_mut().iter_mut().zip(crop.data()) {
            *t += weight * v.norm_sqr();
        }
    }
    Ok(total)
}

/// Renders one quantized sensor frame: intensity, exposure normalization to
/// `params.exposure` of full scale, optional shot and read noise, quantization.
pub fn render_speckle_frame(
    surface: &SurfaceRealization,
    pose: &Pose,
    laser: &LaserSpec,
    params: &OpticalParams,
    noise_seed: u64,
) -> Result<SpeckleFrame> {
    let intensity = render_intensity(surface, pose, laser, params)?;
    Ok(quantize_frame(&intensity, *pose, laser, params, noise_seed))
}

/// Turns a noiseless intensity into a sensor frame (frame index 0).
pub fn quantize_frame(
    intensity: &Grid<f64>,
    pose: Pose,
    laser: &LaserSpec,
    params: &OpticalParams,
    noise_seed: u64,
) -> SpeckleFrame {
    SpeckleFrame {
        pixels: quantize(intensity, params, noise_seed),
        pose,
        frame_index: 0,
        meta: FrameMeta {
            bit_depth: params.bit_depth,
            pitch_m: params.pitch_m,
            lambda0_m: laser.lambda0_m,
            delta_lambda_m: laser.delta_lambda_m,
        },
    }
}

fn quantize(intensity: &Grid<f64>, params: &OpticalParams, noise_seed: u64) -> Grid<u16> {
    let max_dn = params.max_dn() as f64;
    let mean = intensity.mean();
    let scale = if mean > 0.0 {
        params.exposure * max_dn / mean
    } else {
        0.0
    };
    let noise = params.noise;
    let mut rng = rng_from(noise_seed);
    let read = (noise.read_noise_dn > 0.0).then(|| Normal::new(0.0, noise.read_noise_dn).expect("finite"));
    intensity.map(|v| {
        let mut dn = v * scale;
        if noise.shot_noise && dn > 0.0 {
            let electrons = dn * noise.electrons_per_dn;
            dn = Poisson::new(electrons).expect("positive rate").sample(&mut rng) / noise.electrons_per_dn;
        }
        if let Some(r) = &read {
            dn += r.sample(&mut rng);
        }
        dn.round().clamp(0.0, max_dn) as u16
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{generate_surface, ApertureSpec, MarkerSpec};

    fn small() -> OpticalParams {
        OpticalParams {
            grid_n: 128,
            sensor_w_px: 64,
            sensor_h_px: 64,
            ..OpticalParams::desk()
        }
    }

    #[test]
    fn noiseless_render_is_deterministic() {
        let p = small().noiseless();
        let m = MarkerSpec::default();
        let s = generate_surface(3, &p, m.roughness_rms_m, &ApertureSpec::Pupil { radius_frac: 0.25 }).unwrap();
        let pose = Pose::new(10.0, 20.0, 0.2);
        let a = render_speckle_frame(&s, &pose, &LaserSpec::desk(), &p, 9).unwrap();
        let b = render_speckle_frame(&s, &pose, &LaserSpec::desk(), &p, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels.dims(), (64, 64));
    }

    #[test]
    fn noisy_render_depends_on_noise_seed_only() {
        let p = small();
        let s = generate_surface(3, &p, 2e-6, &ApertureSpec::Open).unwrap();
        let pose = Pose::new(10.0, 0.0, 0.2);
        let a = render_speckle_frame(&s, &pose, &LaserSpec::desk(), &p, 1).unwrap();
        let b = render_speckle_frame(&s, &pose, &LaserSpec::desk(), &p, 1).unwrap();
        let c = render_speckle_frame(&s, &pose, &LaserSpec::desk(), &p, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pixels_fit_bit_depth() {
        let mut p = small();
        p.exposure = 0.9;
        let s = generate_surface(3, &p, 2e-6, &ApertureSpec::Open).unwrap();
        let f = render_speckle_frame(&s, &Pose::new(0.0, 0.0, 0.2), &LaserSpec::desk(), &p, 1).unwrap();
        assert!(f.pixels.data().iter().all(|&v| (v as u32) <= p.max_dn()));
        assert!(f.pixels.data().iter().any(|&v| v as u32 == p.max_dn()));
    }

    #[test]
    fn too_close_is_a_sampling_error() {
        let p = small();
        let s = generate_surface(3, &p, 2e-6, &ApertureSpec::Open).unwrap();
        let r = render_speckle_frame(&s, &Pose::new(0.0, 0.0, 0.001), &LaserSpec::desk(), &p, 1);
        assert!(matches!(r, Err(Error::Sampling(_))));
        let r = render_speckle_frame(&s, &Pose::new(0.0, 0.0, -0.1), &LaserSpec::desk(), &p, 1);
        assert!(matches!(r, Err(Error::Sampling(_))));
    }

    #[test]
    fn invalid_laser_rejected() {
        let p = small();
        let s = generate_surface(3, &p, 2e-6, &ApertureSpec::Open).unwrap();
        let mut l = LaserSpec::desk();
        l.delta_lambda_m = l.lambda0_m / 50.0;
        assert!(render_speckle_frame(&s, &Pose::new(0.0, 0.0, 0.2), &l, &p, 1).is_err());
    }
}
