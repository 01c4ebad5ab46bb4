use std::f64::consts::PI;

use num_complex::Complex64;

use super::{Pose, SurfaceRealization};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub type ComplexField = Grid<Complex64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    /// Bilinear, zero outside the grid.
    Bilinear,
    /// Nearest sample, periodic outside the grid. Keeps sample values intact,
    /// so a rotated i.i.d. height map stays i.i.d. and rotates its speckle.
    Nearest,
}

/// Rotates `grid` by `angle_deg` about its center sample `(W/2, H/2)`.
///
/// Positive angles turn `+x` towards `+y` (row index), the same sense in which
/// [`crate::dsp::stripe_orientation`] measures angles.
pub fn rotate_in_plane(grid: &Grid<f64>, angle_deg: f64, interp: Interpolation) -> Grid<f64> {
    if angle_deg == 0.0 {
        return grid.clone();
    }
    let (w, h) = grid.dims();
    let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
    let (s, c) = angle_deg.to_radians().sin_cos();
    Grid::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        // inverse rotation: where did this output sample come from
        let sx = cx + c * dx + s * dy;
        let sy = cy - s * dx + c * dy;
        match interp {
            Interpolation::Bilinear => {
                // snap values within rounding of a sample onto it
                let rx = snap(sx);
                let ry = snap(sy);
                grid.bilinear(rx, ry).unwrap_or(0.0)
            }
            Interpolation::Nearest => {
                let ix = (sx.round() as i64).rem_euclid(w as i64) as usize;
                let iy = (sy.round() as i64).rem_euclid(h as i64) as usize;
                grid.get(ix, iy)
            }
        }
    })
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Field leaving the marker at wavelength `lambda_m`:
/// `A_rot(x, y) * exp(i 4 pi h_rot(x, y) / lambda) * exp(i 4 pi sin(theta_y) x / lambda)`.
///
/// `A_rot` and `h_rot` are the aperture and height map turned by `theta_z`.
pub fn reflected_field(surface: &SurfaceRealization, pose: &Pose, lambda_m: f64) -> Result<ComplexField> {
    let (mask, heights) = rotated_surface(surface, pose.theta_z_deg);
    reflected_field_rotated(&mask, &heights, surface.pitch_m, pose.theta_y_deg, lambda_m)
}

/// Aperture (bilinear) and heights (nearest) turned by `theta_z_deg`.
pub(crate) fn rotated_surface(surface: &SurfaceRealization, theta_z_deg: f64) -> (Grid<f64>, Grid<f64>) {
    (
        rotate_in_plane(&surface.aperture_mask, theta_z_deg, Interpolation::Bilinear),
        rotate_in_plane(&surface.height_map, theta_z_deg, Interpolation::Nearest),
    )
}

pub(crate) fn reflected_field_rotated(
    mask: &Grid<f64>,
    heights: &Grid<f64>,
    pitch_m: f64,
    theta_y_deg: f64,
    lambda_m: f64,
) -> Result<ComplexField> {
    if !(lambda_m > 0.0 && lambda_m.is_finite()) {
        return Err(Error::Input(format!("wavelength must be > 0, got {lambda_m}")));
    }
    let (w, h) = mask.dims();
    let k = 4.0 * PI / lambda_m;
    let ramp = k * theta_y_deg.to_radians().sin() * pitch_m;
    let cx = (w / 2) as f64;
    let data = (0..h)
        .flat_map(|y| {
            (0..w).map(move |x| {
                let a = mask.get(x, y);
                if a == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    let phase = k * heights.get(x, y) + ramp * (x as f64 - cx);
                    Complex64::from_polar(a, phase)
                }
            })
        })
        .collect();
    Grid::from_vec(w, h, data)
}
