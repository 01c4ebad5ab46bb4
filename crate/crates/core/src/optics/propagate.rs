use std::f64::consts::PI;

use num_complex::Complex64;

use super::ComplexField;
use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, signed_bin};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandLimit {
    /// Exact transfer function on every bin (unitary for propagating waves).
    None,
    /// Zero spatial frequencies whose chirp would alias on the periodic grid.
    Apply,
}

/// Radius (cycles/m) of the band limit for a `grid_w * pitch` wide field.
///
/// Uses the per-axis anti-aliasing limit `1 / (lambda sqrt((2 d df)^2 + 1))` with
/// `df = 1 / (N pitch)` as the radius of a circular pass region, which keeps the
/// filter rotation invariant.
pub fn band_limit_frequency(grid_w: usize, pitch_m: f64, distance_m: f64, lambda_m: f64) -> f64 {
    let df = 1.0 / (grid_w as f64 * pitch_m);
    1.0 / (lambda_m * ((2.0 * distance_m.abs() * df).powi(2) + 1.0).sqrt())
}

/// Angular-spectrum free-space propagation over `distance_m` (negative: back-propagation).
pub fn propagate_angular_spectrum(
    field: &ComplexField,
    distance_m: f64,
    lambda_m: f64,
    pitch_m: f64,
    band_limit: BandLimit,
) -> Result<ComplexField> {
    if field.data().iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Input("field contains NaN or infinite samples".into()));
    }
    if !(lambda_m > 0.0 && pitch_m > 0.0 && distance_m.is_finite()) {
        return Err(Error::Input(format!(
            "invalid propagation parameters: lambda {lambda_m}, pitch {pitch_m}, distance {distance_m}"
        )));
    }
    let mut spec = field.clone();
    if distance_m == 0.0 {
        return Ok(spec);
    }
    let (w, h) = field.dims();
    fft2(&mut spec);

    let inv_l2 = 1.0 / (lambda_m * lambda_m);
    let (dfx, dfy) = (1.0 / (w as f64 * pitch_m), 1.0 / (h as f64 * pitch_m));
    let f_lim = match band_limit {
        BandLimit::None => f64::INFINITY,
        BandLimit::Apply => band_limit_frequency(w.max(h), pitch_m, distance_m, lambda_m),
    };
    let f_lim2 = f_lim * f_lim;
    for ky in 0..h {
        let fy = signed_bin(ky, h) * dfy;
        for kx in 0..w {
            let fx = signed_bin(kx, w) * dfx;
            let f2 = fx * fx + fy * fy;
            let t = if f2 > f_lim2 {
                Complex64::new(0.0, 0.0)
            } else if f2 <= inv_l2 {
                Complex64::from_polar(1.0, 2.0 * PI * distance_m * (inv_l2 - f2).sqrt())
            } else if distance_m > 0.0 {
                // evanescent: decays forward, would blow up backwards
                Complex64::new((-2.0 * PI * distance_m * (f2 - inv_l2).sqrt()).exp(), 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
            let i = ky * w + kx;
            spec.data_mut()[i] *= t;
        }
    }
    ifft2(&mut spec);
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::rng::rng_from;
    use rand::Rng;

    fn energy(f: &ComplexField) -> f64 {
        f.data().iter().map(|v| v.norm_sqr()).sum()
    }

    fn random_field(n: usize, seed: u64) -> ComplexField {
        let mut rng = rng_from(seed);
        let data = (0..n * n)
            .map(|_| Complex64::from_polar(rng.random::<f64>(), rng.random::<f64>() * 2.0 * PI))
            .collect();
        Grid::from_vec(n, n, data).unwrap()
    }

    #[test]
    fn zero_distance_is_identity() {
        let f = random_field(64, 1);
        let g = propagate_angular_spectrum(&f, 0.0, 532e-9, 8e-6, BandLimit::Apply).unwrap();
        for (a, b) in f.data().iter().zip(g.data()) {
            assert!((a - b).norm() <= 1e-12 * a.norm().max(1.0));
        }
    }

    #[test]
    fn plane_wave_picks_up_global_phase() {
        let (lambda, d) = (532e-9, 0.123);
        let f = Grid::new(32, 32, Complex64::new(1.0, 0.0));
        let g = propagate_angular_spectrum(&f, d, lambda, 8e-6, BandLimit::Apply).unwrap();
        let expect = Complex64::from_polar(1.0, 2.0 * PI * d / lambda);
        for v in g.data() {
            assert!((v - expect).norm() < 1e-9, "{v} vs {expect}");
        }
    }

    #[test]
    fn unlimited_propagation_conserves_energy() {
        let f = random_field(128, 2);
        let e0 = energy(&f);
        for d in [0.01, 0.2, -0.05] {
            let g = propagate_angular_spectrum(&f, d, 532e-9, 8e-6, BandLimit::None).unwrap();
            assert!(((energy(&g) - e0) / e0).abs() < 1e-9);
        }
    }

    #[test]
    fn band_limit_never_adds_energy() {
        let f = random_field(128, 3);
        let e0 = energy(&f);
        let g = propagate_angular_spectrum(&f, 0.25, 532e-9, 8e-6, BandLimit::Apply).unwrap();
        assert!(energy(&g) <= e0 * (1.0 + 1e-12));
    }

    #[test]
    fn back_propagation_undoes_forward() {
        let f = random_field(64, 4);
        let g = propagate_angular_spectrum(&f, 0.05, 532e-9, 8e-6, BandLimit::None).unwrap();
        let b = propagate_angular_spectrum(&g, -0.05, 532e-9, 8e-6, BandLimit::None).unwrap();
        for (a, c) in f.data().iter().zip(b.data()) {
            assert!((a - c).norm() < 1e-9);
        }
    }

    #[test]
    fn nan_rejected() {
        let mut f = random_field(8, 5);
        f.set(1, 1, Complex64::new(f64::NAN, 0.0));
        assert!(matches!(
            propagate_angular_spectrum(&f, 0.1, 532e-9, 8e-6, BandLimit::None),
            Err(Error::Input(_))
        ));
    }
}
