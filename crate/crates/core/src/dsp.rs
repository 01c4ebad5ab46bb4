//! Frequency-domain measurements on speckle frames.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2};
use crate::grid::Grid;
use crate::optics::SpeckleFrame;

/// Log-magnitude spectrum, zero frequency at `(w/2, h/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub logmag: Grid<f64>,
    /// (width, height) of the frame the spectrum came from.
    pub source_dims: (usize, usize),
}

/// Normalized autocorrelation, zero lag at `(w/2, h/2)` with value 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Autocorrelogram {
    pub ac: Grid<f64>,
}

impl Autocorrelogram {
    pub fn center(&self) -> (usize, usize) {
        (self.ac.width() / 2, self.ac.height() / 2)
    }

    /// Value at integer lag `(du, dv)`, cyclic.
    pub fn at(&self, du: i64, dv: i64) -> f64 {
        let (w, h) = self.ac.dims();
        let (cx, cy) = self.center();
        let x = (cx as i64 + du).rem_euclid(w as i64) as usize;
        let y = (cy as i64 + dv).rem_euclid(h as i64) as usize;
        self.ac.get(x, y)
    }
}

/// A side-peak measurement: the copy shift seen in the autocorrelation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakPair {
    /// Sub-pixel lag `(du, dv)` of the peak in the positive half-plane.
    pub offset_px: (f64, f64),
    /// Sub-pixel lag of the mirrored peak (near `-offset_px`).
    pub mirror_px: (f64, f64),
    /// Peak height above the surrounding annulus median.
    pub prominence: f64,
    pub valid: bool,
}

impl PeakPair {
    pub fn separation_px(&self) -> f64 {
        self.offset_px.0.hypot(self.offset_px.1)
    }
}

pub const DEFAULT_EXCLUSION_RADIUS_PX: usize = 8;
/// Speckle-grain maxima in the autocorrelation of a single untilted desk frame
/// reach about 0.06 prominence; real side peaks sit above 0.35.
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.15;

fn centered_spectrum(values: &Grid<f64>) -> Grid<Complex64> {
    let mean = values.mean();
    let mut c = values.map(|v| Complex64::new(v - mean, 0.0));
    fft2(&mut c);
    c
}

/// Mean-removed FFT magnitude, `log1p`, zero frequency centered.
pub fn fft_logmag(frame: &SpeckleFrame) -> Spectrum {
    logmag_of(&frame.to_f64())
}

pub fn logmag_of(values: &Grid<f64>) -> Spectrum {
    let spec = centered_spectrum(values);
    Spectrum {
        logmag: spec.map(|v| v.norm().ln_1p()).fftshift(),
        source_dims: values.dims(),
    }
}

/// Keeps the centered `w`x`h` window of a spectrum.
pub fn central_crop(spec: &Spectrum, w: usize, h: usize) -> Result<Spectrum> {
    Ok(Spectrum {
        logmag: spec.logmag.center_window(w, h)?,
        source_dims: spec.source_dims,
    })
}

/// Wiener-Khinchin autocorrelation `IFFT(|FFT(I - mean)|^2)`, centered and
/// divided by its zero-lag value.
pub fn autocorrelation(frame: &SpeckleFrame) -> Result<Autocorrelogram> {
    autocorrelation_of(&frame.to_f64())
}

pub fn autocorrelation_of(values: &Grid<f64>) -> Result<Autocorrelogram> {
    if values.data().is_empty() {
        return Err(Error::Input("empty frame".into()));
    }
    let mut power = centered_spectrum(values).map(|v| Complex64::new(v.norm_sqr(), 0.0));
    ifft2(&mut power);
    let zero = power.get(0, 0).re;
    if !(zero > 0.0) || values.variance() == 0.0 {
        return Err(Error::Input("zero-variance frame has no normalized autocorrelation".into()));
    }
    let ac = power.map(|v| v.re / zero).fftshift();
    Ok(Autocorrelogram { ac })
}

/// Vertex of the parabola through `(-1, a), (0, b), (1, c)`.
#[inline]
pub fn parabola_vertex(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom.abs() < f64::EPSILON * (a.abs() + b.abs() + c.abs()).max(1e-300) {
        0.0
    } else {
        (0.5 * (a - c) / denom).clamp(-1.0, 1.0)
    }
}

fn refine(ac: &Autocorrelogram, du: i64, dv: i64) -> (f64, f64) {
    let b = ac.at(du, dv);
    let fu = parabola_vertex(ac.at(du - 1, dv), b, ac.at(du + 1, dv));
    let fv = parabola_vertex(ac.at(du, dv - 1), b, ac.at(du, dv + 1));
    (du as f64 + fu, dv as f64 + fv)
}

fn local_max_near(ac: &Autocorrelogram, du: i64, dv: i64) -> (i64, i64) {
    let mut best = (du, dv);
    for y in dv - 1..=dv + 1 {
        for x in du - 1..=du + 1 {
            if ac.at(x, y) > ac.at(best.0, best.1) {
                best = (x, y);
            }
        }
    }
    best
}

fn annulus_level(ac: &Autocorrelogram, du: i64, dv: i64, r_in: i64, r_out: i64, q: f64) -> f64 {
    let mut vals = Vec::new();
    for y in -r_out..=r_out {
        for x in -r_out..=r_out {
            let r2 = x * x + y * y;
            if r2 > r_in * r_in && r2 <= r_out * r_out {
                vals.push(ac.at(du + x, dv + y));
            }
        }
    }
    vals.sort_by(f64::total_cmp);
    let i = ((vals.len() - 1) as f64 * q).round() as usize;
    vals[i]
}

const BACKGROUND_QUANTILE: f64 = 0.8;

/// Finds the autocorrelation side peak produced by two shifted speckle copies.
///
/// The zero-lag lobe is masked out to `exclusion_radius_px`; the global maximum of
/// the remaining half-plane (`dv > 0`, or `dv == 0, du > 0`) is refined with
/// separable 3-point parabola fits. `valid` iff prominence exceeds `threshold`.
pub fn find_side_peaks(ac: &Autocorrelogram, exclusion_radius_px: usize, threshold: f64) -> Result<PeakPair> {
    if exclusion_radius_px < 2 {
        return Err(Error::Config(format!(
            "exclusion radius must be >= 2 px, got {exclusion_radius_px}"
        )));
    }
    let (w, h) = ac.ac.dims();
    let (cx, cy) = ac.center();
    let r_ex = exclusion_radius_px as i64;
    // stay one sample inside the map so the parabola has neighbours
    let (u_min, u_max) = (-(cx as i64) + 1, (w - cx) as i64 - 2);
    let v_max = (h - cy) as i64 - 2;
    if u_max <= r_ex && v_max <= r_ex {
        return Err(Error::Config("autocorrelogram smaller than exclusion disk".into()));
    }

    let mut best: Option<(i64, i64, f64)> = None;
    for dv in 0..=v_max {
        for du in u_min..=u_max {
            if dv == 0 && du <= 0 {
                continue;
            }
            if du * du + dv * dv <= r_ex * r_ex {
                continue;
            }
            let v = ac.at(du, dv);
            if best.is_none_or(|(_, _, b)| v > b) {
                best = Some((du, dv, v));
            }
        }
    }
    let (du, dv, peak) = best.ok_or_else(|| Error::Config("no lags outside exclusion disk".into()))?;
    let offset_px = refine(ac, du, dv);
    let (mu, mv) = local_max_near(ac, -du, -dv);
    let mirror_px = refine(ac, mu, mv);
    let background = annulus_level(ac, du, dv, 3, 6, BACKGROUND_QUANTILE);
    let prominence = peak - background;
    let mirrored = (offset_px.0 + mirror_px.0).abs() <= 0.5 && (offset_px.1 + mirror_px.1).abs() <= 0.5;
    Ok(PeakPair {
        offset_px,
        mirror_px,
        prominence,
        valid: prominence > threshold && mirrored,
    })
}

/// Orientation of the stripe pattern in a spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    /// Direction of maximal ray energy in `[0, 180)` degrees, measured from
    /// `+u` towards `+v` (row index).
    pub angle_deg: f64,
    /// `(E_max - E_mean) / E_mean` of the angular energy profile.
    pub anisotropy: f64,
    pub valid: bool,
}

pub const ORIENTATION_STEP_DEG: f64 = 0.1;
pub const DEFAULT_ANISOTROPY_THRESHOLD: f64 = 0.02;

/// Angular energy profile of `spec`: for each direction in `[0, 180)` at
/// [`ORIENTATION_STEP_DEG`] steps, the bilinear sum of `logmag` along the full
/// line through the center, skipping radii below `exclusion_radius_px`.
pub fn angular_profile(spec: &Spectrum, exclusion_radius_px: usize) -> Vec<f64> {
    let g = &spec.logmag;
    let (w, h) = g.dims();
    let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
    let r_max = support_radius(g, exclusion_radius_px);
    let steps = (180.0 / ORIENTATION_STEP_DEG).round() as usize;
    (0..steps)
        .map(|i| {
            let (s, c) = (i as f64 * ORIENTATION_STEP_DEG).to_radians().sin_cos();
            let mut e = 0.0;
            for r in exclusion_radius_px.max(1)..=r_max {
                let r = r as f64;
                for sign in [1.0, -1.0] {
                    e += g.bilinear(cx + sign * r * c, cy + sign * r * s).unwrap_or(0.0);
                }
            }
            e
        })
        .collect()
}

/// Radius where the ring-averaged log-magnitude has fallen most of the way from
/// its inner level to the outer floor. Beyond it rays only collect noise.
fn support_radius(g: &Grid<f64>, exclusion_radius_px: usize) -> usize {
    let (w, h) = g.dims();
    let (cx, cy) = (w / 2, h / 2);
    let r_nyq = cx.min(cy) - 1;
    let r0 = exclusion_radius_px.max(1);
    if r0 + 16 >= r_nyq {
        return r_nyq;
    }
    let mut sum = vec![0.0; r_nyq + 1];
    let mut cnt = vec![0usize; r_nyq + 1];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
            let r = (dx * dx + dy * dy).sqrt().round() as usize;
            if r <= r_nyq {
                sum[r] += g.get(x, y);
                cnt[r] += 1;
            }
        }
    }
    let ring: Vec<f64> = (0..=r_nyq).map(|r| sum[r] / cnt[r].max(1) as f64).collect();
    let band_mean = |a: usize, b: usize| ring[a..b].iter().sum::<f64>() / (b - a) as f64;
    let top = band_mean(r0, r0 + 8);
    let floor = band_mean(r_nyq - 7, r_nyq + 1);
    if top - floor < SUPPORT_MIN_CONTRAST {
        return r_nyq;
    }
    let level = floor + SUPPORT_LEVEL * (top - floor);
    (r0..=r_nyq).rev().find(|&r| ring[r] >= level).unwrap_or(r_nyq).max(r0 + 8)
}

const SUPPORT_LEVEL: f64 = 0.35;
const SUPPORT_MIN_CONTRAST: f64 = 1.0;

/// Stripe orientation of a coded-aperture spectrum, modulo 180 degrees.
pub fn stripe_orientation(spec: &Spectrum, exclusion_radius_px: usize) -> Orientation {
    stripe_orientation_with(spec, exclusion_radius_px, DEFAULT_ANISOTROPY_THRESHOLD)
}

pub fn stripe_orientation_with(spec: &Spectrum, exclusion_radius_px: usize, threshold: f64) -> Orientation {
    let profile = angular_profile(spec, exclusion_radius_px);
    let n = profile.len();
    let (imax, &emax) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty profile");
    let mean = profile.iter().sum::<f64>() / n as f64;
    let frac = parabola_vertex(profile[(imax + n - 1) % n], emax, profile[(imax + 1) % n]);
    let angle = ((imax as f64 + frac) * ORIENTATION_STEP_DEG).rem_euclid(180.0);
    let anisotropy = if mean.abs() > 0.0 { (emax - mean) / mean.abs() } else { 0.0 };
    Orientation {
        angle_deg: angle,
        anisotropy,
        valid: anisotropy > threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{rotate_in_plane, Interpolation};
    use crate::rng::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise(w: usize, h: usize, seed: u64) -> Grid<f64> {
        let mut rng = rng_from(seed);
        Grid::from_fn(w, h, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn brute_ac(g: &Grid<f64>) -> Grid<f64> {
        let (w, h) = g.dims();
        let m = g.mean();
        let raw = Grid::from_fn(w, h, |du, dv| {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += (g.get(x, y) - m) * (g.get((x + du) % w, (y + dv) % h) - m);
                }
            }
            acc
        });
        let z = raw.get(0, 0);
        raw.map(|v| v / z).fftshift()
    }

    #[test]
    fn constant_frame_spectrum_is_zero() {
        let s = logmag_of(&Grid::new(16, 8, 42.0));
        assert!(s.logmag.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn cosine_peaks_on_horizontal_axis() {
        let (w, h) = (64, 32);
        let g = Grid::from_fn(w, h, |x, _| (2.0 * std::f64::consts::PI * x as f64 / 8.0).cos());
        let s = logmag_of(&g);
        let mut best = (0, 0, f64::MIN);
        for y in 0..h {
            for x in 0..w {
                if s.logmag.get(x, y) > best.2 {
                    best = (x, y, s.logmag.get(x, y));
                }
            }
        }
        assert_eq!(best.1, h / 2);
        assert_eq!((best.0 as i64 - 32).abs(), 8); // 64 / 8 bins = 1/8 cycles/px
        assert!((s.logmag.get(32 + 8, 16) - s.logmag.get(32 - 8, 16)).abs() < 1e-9);
    }

    #[test]
    fn logmag_point_symmetric() {
        let s = logmag_of(&noise(32, 16, 1));
        for y in 1..16 {
            for x in 1..32 {
                let (mx, my) = (32 - x, 16 - y);
                assert!((s.logmag.get(x, y) - s.logmag.get(mx, my)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn crop_keeps_zero_frequency_centered() {
        let g = noise(64, 36, 2);
        let s = logmag_of(&g);
        let c = central_crop(&s, 32, 18).unwrap();
        assert_eq!(c.logmag.dims(), (32, 18));
        assert_eq!(c.logmag.get(16, 9), s.logmag.get(32, 18));
        assert_eq!(central_crop(&s, 64, 36).unwrap().logmag, s.logmag);
        assert!(central_crop(&s, 65, 36).is_err());
    }

    #[test]
    fn wiener_khinchin_matches_brute_force() {
        let g = noise(32, 32, 3);
        let fast = autocorrelation_of(&g).unwrap();
        let slow = brute_ac(&g);
        for (a, b) in fast.ac.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn white_noise_ac_is_delta_like() {
        let ac = autocorrelation_of(&noise(256, 256, 4)).unwrap();
        assert!((ac.at(0, 0) - 1.0).abs() < 1e-12);
        for dv in -128i64..128 {
            for du in -128i64..128 {
                if du.abs() <= 1 && dv.abs() <= 1 {
                    continue;
                }
                assert!(ac.at(du, dv).abs() < 0.1);
            }
        }
    }

    #[test]
    fn ac_symmetric_unit_center() {
        let ac = autocorrelation_of(&noise(48, 40, 5)).unwrap();
        let (w, h) = ac.ac.dims();
        let max = ac.ac.data().iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        for dv in -(h as i64 / 2) + 1..(h as i64 / 2) {
            for du in -(w as i64 / 2) + 1..(w as i64 / 2) {
                assert!((ac.at(du, dv) - ac.at(-du, -dv)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_variance_rejected() {
        assert!(autocorrelation_of(&Grid::new(8, 8, 3.0)).is_err());
    }

    /// Blurred noise stands in for a speckle pattern with a few-pixel grain.
    fn blobs(w: usize, h: usize, seed: u64) -> Grid<f64> {
        let n = noise(w, h, seed);
        Grid::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                    let yy = (y as i64 + dy).rem_euclid(h as i64) as usize;
                    acc += n.get(xx, yy);
                }
            }
            acc * acc
        })
    }

    fn shifted_copy_frame(shift: usize) -> Grid<f64> {
        let p = blobs(256, 256, 6);
        Grid::from_fn(256, 256, |x, y| p.get(x, y) + p.get((x + 256 - shift) % 256, y))
    }

    #[test]
    fn shifted_copies_give_side_peaks() {
        let ac = autocorrelation_of(&shifted_copy_frame(6)).unwrap();
        let pk = find_side_peaks(&ac, 3, DEFAULT_PEAK_THRESHOLD).unwrap();
        assert!(pk.valid);
        assert!((pk.offset_px.0 - 6.0).abs() <= 0.25, "{:?}", pk);
        assert!(pk.offset_px.1.abs() <= 0.25);
        assert!((pk.prominence - 0.5).abs() < 0.1, "{}", pk.prominence);
        assert!((pk.mirror_px.0 + 6.0).abs() <= 0.25);
    }

    #[test]
    fn single_pattern_has_no_side_peak() {
        let ac = autocorrelation_of(&blobs(256, 256, 7)).unwrap();
        let pk = find_side_peaks(&ac, 3, DEFAULT_PEAK_THRESHOLD).unwrap();
        assert!(!pk.valid, "{pk:?}");
    }

    #[test]
    fn exclusion_radius_must_be_at_least_two() {
        let ac = autocorrelation_of(&noise(32, 32, 8)).unwrap();
        assert!(find_side_peaks(&ac, 1, 0.05).is_err());
    }

    #[test]
    fn parabola_recovers_quadratic_vertex() {
        for &(v, a, c) in &[(0.3, -2.0, 5.0), (-0.45, -0.7, 1.0), (0.0, -1.0, 0.0)] {
            let f = |x: f64| a * (x - v) * (x - v) + c;
            let got = parabola_vertex(f(-1.0), f(0.0), f(1.0));
            assert!((got - v).abs() < 1e-12);
        }
    }

    fn grating(w: usize, h: usize, angle_deg: f64, period: f64) -> Grid<f64> {
        // lines running along angle_deg: intensity varies along the normal
        let (s, c) = angle_deg.to_radians().sin_cos();
        let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
        Grid::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let across = -s * dx + c * dy;
            1.0 + (2.0 * std::f64::consts::PI * across / period).cos()
        })
    }

    #[test]
    fn vertical_stripes_read_ninety_degrees() {
        let spec = Spectrum {
            logmag: grating(128, 128, 90.0, 9.0),
            source_dims: (128, 128),
        };
        let o = stripe_orientation(&spec, 4);
        assert!(o.valid);
        assert!((o.angle_deg - 90.0).abs() <= 0.2, "{o:?}");
    }

    #[test]
    fn orientation_follows_image_rotation() {
        let base = grating(128, 128, 20.0, 7.0);
        let a = stripe_orientation(&Spectrum { logmag: base.clone(), source_dims: (128, 128) }, 4);
        let rot = rotate_in_plane(&base, 45.0, Interpolation::Bilinear);
        let b = stripe_orientation(&Spectrum { logmag: rot, source_dims: (128, 128) }, 4);
        let diff = (b.angle_deg - a.angle_deg).rem_euclid(180.0);
        assert!((diff - 45.0).abs() <= 0.5, "{a:?} {b:?}");
    }

    #[test]
    fn isotropic_spectrum_flagged() {
        let g = Grid::from_fn(128, 128, |x, y| {
            let r = ((x as f64 - 64.0).powi(2) + (y as f64 - 64.0).powi(2)).sqrt();
            (-r / 20.0).exp()
        });
        let o = stripe_orientation(&Spectrum { logmag: g, source_dims: (128, 128) }, 4);
        assert!(!o.valid, "{o:?}");
    }

    #[test]
    fn logmag_invariant_under_cyclic_translation() {
        let g = noise(64, 48, 9);
        let t = Grid::from_fn(64, 48, |x, y| g.get((x + 13) % 64, (y + 5) % 48));
        let a = logmag_of(&g);
        let b = logmag_of(&t);
        for (u, v) in a.logmag.data().iter().zip(b.logmag.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}
