use rand_distr::{Distribution, Normal};

use super::{ApertureSpec, OpticalParams, SurfaceRealization};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::rng_from;

/// Samples a rough marker: i.i.d. Gaussian heights with standard deviation
/// `roughness_rms_m` and the rendered aperture transmission.
pub fn generate_surface(
    seed: u64,
    params: &OpticalParams,
    roughness_rms_m: f64,
    aperture: &ApertureSpec,
) -> Result<SurfaceRealization> {
    params.validate()?;
    if !(roughness_rms_m >= 0.0 && roughness_rms_m.is_finite()) {
        return Err(Error::Config(format!(
            "roughness_rms_m must be >= 0, got {roughness_rms_m}"
        )));
    }
    let n = params.grid_n;
    let aperture_mask = render_aperture(n, aperture)?;

    let height_map = if roughness_rms_m == 0.0 {
        Grid::new(n, n, 0.0)
    } else {
        let normal = Normal::new(0.0, roughness_rms_m).expect("finite std");
        let mut rng = rng_from(seed);
        let data = (0..n * n).map(|_| normal.sample(&mut rng)).collect();
        Grid::from_vec(n, n, data)?
    };

    Ok(SurfaceRealization {
        height_map,
        aperture_mask,
        pitch_m: params.pitch_m,
        seed,
        aperture_diameter: aperture.diameter_samples(n),
    })
}

fn render_aperture(n: usize, aperture: &ApertureSpec) -> Result<Grid<f64>> {
    let c = (n / 2) as f64;
    match aperture {
        ApertureSpec::Open => Ok(Grid::new(n, n, 1.0)),
        &ApertureSpec::Pupil { radius_frac } => {
            let r = pupil_radius(n, radius_frac)?;
            Ok(Grid::from_fn(n, n, |x, y| {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                if dx * dx + dy * dy <= r * r {
                    1.0
                } else {
                    0.0
                }
            }))
        }
        &ApertureSpec::Striped {
            radius_frac,
            stripes,
            width_frac,
            period_frac,
        } => {
            let r = pupil_radius(n, radius_frac)?;
            let width = width_frac * n as f64;
            let period = period_frac * n as f64;
            if width < 2.0 {
                return Err(Error::Config(format!(
                    "grid {n} too small for stripe width fraction {width_frac} ({width:.2} samples < 2)"
                )));
            }
            if stripes > 1 && period < width + 2.0 {
                return Err(Error::Config(format!(
                    "stripe period {period:.2} samples leaves no gap between {width:.2}-sample bars"
                )));
            }
            let centers: Vec<f64> = (0..stripes)
                .map(|k| (k as f64 - (stripes as f64 - 1.0) / 2.0) * period)
                .collect();
            if let Some(last) = centers.last() {
                if last.abs() + width / 2.0 > r {
                    return Err(Error::Config(format!(
                        "{stripes} stripes at period {period:.1} do not fit inside pupil radius {r:.1}"
                    )));
                }
            }
            Ok(Grid::from_fn(n, n, |x, y| {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                if dx * dx + dy * dy > r * r {
                    return 0.0;
                }
                if centers.iter().any(|&xc| (dx - xc).abs() < width / 2.0) {
                    0.0
                } else {
                    1.0
                }
            }))
        }
        ApertureSpec::Coded {
            radius_frac,
            unit_frac,
            code,
        } => {
            let r = pupil_radius(n, *radius_frac)?;
            let unit = unit_frac * n as f64;
            if !(unit >= 1.0) {
                return Err(Error::Config(format!(
                    "grid {n} too small for code unit fraction {unit_frac} ({unit:.2} samples < 1)"
                )));
            }
            let bits = parse_code(code)?;
            if bits.len() as f64 * unit > 2.0 * r + unit {
                return Err(Error::Config(format!(
                    "{}-element code of {unit:.1}-sample columns is wider than the pupil",
                    bits.len()
                )));
            }
            let first = ((c - r) / unit).floor() as i64;
            Ok(Grid::from_fn(n, n, |x, y| {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                if dx * dx + dy * dy > r * r {
                    return 0.0;
                }
                let k = (x as f64 / unit).floor() as i64 - first;
                match usize::try_from(k).ok().and_then(|k| bits.get(k)) {
                    Some(true) => 1.0,
                    _ => 0.0,
                }
            }))
        }
    }
}

fn parse_code(code: &str) -> Result<Vec<bool>> {
    let bits = code
        .chars()
        .map(|ch| match ch {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::Config(format!("aperture code may only hold 0/1, found {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if !bits.contains(&true) {
        return Err(Error::Config("aperture code has no open column".into()));
    }
    Ok(bits)
}

fn pupil_radius(n: usize, radius_frac: f64) -> Result<f64> {
    if !(radius_frac > 0.0 && radius_frac <= 0.5) {
        return Err(Error::Config(format!(
            "pupil radius fraction must be in (0, 0.5], got {radius_frac}"
        )));
    }
    let r = radius_frac * n as f64;
    if r < 4.0 {
        return Err(Error::Config(format!(
            "grid {n} too small for pupil radius fraction {radius_frac}"
        )));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize) -> OpticalParams {
        OpticalParams {
            grid_n: n,
            sensor_w_px: n / 2,
            sensor_h_px: n / 2,
            ..OpticalParams::desk()
        }
    }

    #[test]
    fn zero_roughness_is_specular() {
        let s = generate_surface(3, &params(64), 0.0, &ApertureSpec::Open).unwrap();
        assert!(s.height_map.data().iter().all(|&h| h == 0.0));
    }

    #[test]
    fn same_seed_same_surface() {
        let p = params(512);
        let a = generate_surface(7, &p, 2e-6, &ApertureSpec::default()).unwrap();
        let b = generate_surface(7, &p, 2e-6, &ApertureSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_surface(8, &p, 2e-6, &ApertureSpec::default()).unwrap();
        assert_ne!(a.height_map, c.height_map);
    }

    #[test]
    fn height_std_matches_roughness() {
        let s = generate_surface(11, &params(512), 2e-6, &ApertureSpec::Open).unwrap();
        let std = s.height_map.variance().sqrt();
        assert!((std / 2e-6 - 1.0).abs() < 0.05, "std {std}");
        assert!(s.height_map.mean().abs() < 0.05 * 2e-6);
    }

    #[test]
    fn stripes_too_thin_for_grid_rejected() {
        let ap = ApertureSpec::Striped {
            radius_frac: 0.25,
            stripes: 4,
            width_frac: 1.0 / 32.0,
            period_frac: 0.1,
        };
        assert!(matches!(
            generate_surface(1, &params(32), 1e-6, &ap),
            Err(Error::Config(_))
        ));
        assert!(generate_surface(1, &params(128), 1e-6, &ap).is_ok());
    }

    #[test]
    fn coded_columns_follow_code() {
        let ap = ApertureSpec::Coded {
            radius_frac: 0.25,
            unit_frac: 4.0 / 64.0,
            code: "10110001".into(),
        };
        let s = generate_surface(1, &params(64), 0.0, &ap).unwrap();
        // pupil spans x in [16, 48]; columns of 4 samples from x = 16
        let row = s.aperture_mask.row(32);
        let open: Vec<bool> = (0..8).map(|k| row[16 + 4 * k + 2] == 1.0).collect();
        assert_eq!(open, [true, false, true, true, false, false, false, true]);
        assert_eq!(row[10], 0.0);
        assert_eq!(s.aperture_mask.get(16 + 2, 2), 0.0, "outside the circle");
    }

    #[test]
    fn default_code_is_open_somewhere_and_symmetric_in_y() {
        let s = generate_surface(1, &params(512), 0.0, &ApertureSpec::default()).unwrap();
        let m = &s.aperture_mask;
        let open = m.data().iter().filter(|&&v| v == 1.0).count();
        assert!(open > 1000);
        for x in 0..512 {
            assert_eq!(m.get(x, 256 - 50), m.get(x, 256 + 50));
        }
    }

    #[test]
    fn bad_codes_rejected() {
        for code in ["", "0000", "10x1"] {
            let ap = ApertureSpec::Coded {
                radius_frac: 0.25,
                unit_frac: 1.0 / 64.0,
                code: code.into(),
            };
            assert!(matches!(generate_surface(1, &params(64), 0.0, &ap), Err(Error::Config(_))), "{code:?}");
        }
        let wide = ApertureSpec::Coded {
            radius_frac: 0.1,
            unit_frac: 1.0 / 8.0,
            code: "1".repeat(40),
        };
        assert!(generate_surface(1, &params(64), 0.0, &wide).is_err());
    }

    #[test]
    fn aperture_values_in_unit_interval_and_striped() {
        let ap = ApertureSpec::Striped {
            radius_frac: 0.25,
            stripes: 4,
            width_frac: 1.0 / 32.0,
            period_frac: 0.1,
        };
        let s = generate_surface(1, &params(256), 1e-6, &ap).unwrap();
        assert!(s.aperture_mask.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // center row crosses the bars, center column runs between bars 2 and 3
        let row: Vec<f64> = s.aperture_mask.row(128).to_vec();
        let transitions = row.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(transitions, 2 + 2 * 4);
    }

    #[test]
    fn negative_roughness_rejected() {
        assert!(generate_surface(1, &params(64), -1.0, &ApertureSpec::Open).is_err());
    }
}
