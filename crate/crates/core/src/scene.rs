//! Pose sweeps, dataset simulation and train/val/test splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{
    generate_surface, quantize_frame, render_intensity, LaserSpec, MarkerSpec, OpticalParams, Pose, SpeckleFrame,
};
use crate::rng::{derive_seed, rng_from, STREAM_FRAME_NOISE, STREAM_SPLIT, STREAM_SURFACE};

/// Inclusive `lo..=hi` in steps of `step`. A degenerate range (`lo == hi`)
/// ignores `step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub step: f64,
}

impl RangeSpec {
    pub fn new(lo: f64, hi: f64, step: f64) -> Self {
        Self { lo, hi, step }
    }

    pub fn fixed(v: f64) -> Self {
        Self::new(v, v, 0.0)
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        let RangeSpec { lo, hi, step } = *self;
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::Config(format!("empty range [{lo}, {hi}]")));
        }
        if lo == hi {
            return Ok(vec![lo]);
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Config(format!("range [{lo}, {hi}] needs a positive step, got {step}")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| lo + i as f64 * step).collect())
    }
}

/// Axis the marker turns about while a stack is captured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionAxis {
    Y,
    #[default]
    Z,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub theta_y_range_deg: RangeSpec,
    pub theta_z_range_deg: RangeSpec,
    pub depth_range_m: RangeSpec,
    /// Rotation speeds in revolutions per minute; every grid pose is captured at each.
    pub rpm: Vec<f64>,
    pub fps: f64,
    pub frames_per_pose: usize,
    #[serde(default)]
    pub motion_axis: MotionAxis,
    /// Sweep y (at the lowest z) and z (at the lowest y) separately instead of
    /// the full Cartesian grid.
    #[serde(default)]
    pub separate_axes: bool,
}

impl SweepSpec {
    /// Small sweep used by the desk-scale examples: y step 5, z step 15, one depth.
    pub fn desk() -> Self {
        Self {
            theta_y_range_deg: RangeSpec::new(0.0, 40.0, 5.0),
            theta_z_range_deg: RangeSpec::new(0.0, 90.0, 15.0),
            depth_range_m: RangeSpec::fixed(0.20),
            rpm: vec![0.0],
            fps: 30.0,
            frames_per_pose: 5,
            motion_axis: MotionAxis::Z,
            separate_axes: false,
        }
    }

    /// Full sweep: y 0-40 step 1, z 0-90 step 1, depth 16-28 cm step 4 cm.
    pub fn paper() -> Self {
        Self {
            theta_y_range_deg: RangeSpec::new(0.0, 40.0, 1.0),
            theta_z_range_deg: RangeSpec::new(0.0, 90.0, 1.0),
            depth_range_m: RangeSpec::new(0.16, 0.28, 0.04),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames_per_pose < 5 {
            return Err(Error::Config(format!(
                "frames_per_pose must be >= 5, got {}",
                self.frames_per_pose
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config(format!("fps must be > 0, got {}", self.fps)));
        }
        if self.rpm.is_empty() || self.rpm.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("rpm must be a non-empty list of speeds >= 0".into()));
        }
        let ranges = [
            ("theta_y_range_deg", self.theta_y_range_deg, Pose::THETA_Y_DEG),
            ("theta_z_range_deg", self.theta_z_range_deg, Pose::THETA_Z_DEG),
            ("depth_range_m", self.depth_range_m, Pose::DEPTH_M),
        ];
        for (name, r, (lo, hi)) in ranges {
            r.values()?;
            if r.lo < lo - 1e-9 || r.hi > hi + 1e-9 {
                return Err(Error::Config(format!("{name} [{}, {}] leaves [{lo}, {hi}]", r.lo, r.hi)));
            }
        }
        Ok(())
    }

    /// Degrees turned between consecutive frames at `rpm`.
    pub fn increment_deg(&self, rpm: f64) -> f64 {
        rpm * 360.0 / 60.0 / self.fps
    }

    /// Grid poses (stack centers before range adjustment), rpm-major.
    pub fn grid_poses(&self) -> Result<Vec<(f64, Pose)>> {
        self.validate()?;
        let ys = self.theta_y_range_deg.values()?;
        let zs = self.theta_z_range_deg.values()?;
        let ds = self.depth_range_m.values()?;
        let mut angles = Vec::new();
        if self.separate_axes {
            for &y in &ys {
                angles.push((y, zs[0]));
            }
            for &z in zs.iter().skip(1) {
                angles.push((ys[0], z));
            }
        } else {
            for &y in &ys {
                for &z in &zs {
                    angles.push((y, z));
                }
            }
        }
        let mut out = Vec::with_capacity(self.rpm.len() * angles.len() * ds.len());
        for &rpm in &self.rpm {
            for &(y, z) in &angles {
                for &d in &ds {
                    out.push((rpm, Pose::new(y, z, d)));
                }
            }
        }
        Ok(out)
    }

    pub fn group_count(&self) -> Result<usize> {
        Ok(self.grid_poses()?.len())
    }
}

/// Per-frame poses: `frames_per_pose` consecutive frames per grid pose, turning
/// about the motion axis at the pose's rpm. The middle frame sits on the grid
/// pose; stacks that would leave the pose range are slid back inside.
pub fn make_schedule(spec: &SweepSpec) -> Result<Vec<Pose>> {
    let grid = spec.grid_poses()?;
    let f = spec.frames_per_pose;
    let mid = (f / 2) as f64;
    let mut out = Vec::with_capacity(grid.len() * f);
    for (rpm, center) in grid {
        let inc = spec.increment_deg(rpm);
        let (value, (lo, hi)) = match spec.motion_axis {
            MotionAxis::Y => (center.theta_y_deg, Pose::THETA_Y_DEG),
            MotionAxis::Z => (center.theta_z_deg, Pose::THETA_Z_DEG),
        };
        let span = inc * (f - 1) as f64;
        if span > hi - lo {
            return Err(Error::Config(format!(
                "{rpm} rpm sweeps {span:.2} deg per stack, more than the whole range"
            )));
        }
        let start = (value - mid * inc).clamp(lo, hi - span);
        for k in 0..f {
            let a = start + k as f64 * inc;
            let mut p = center;
            match spec.motion_axis {
                MotionAxis::Y => p.theta_y_deg = a,
                MotionAxis::Z => p.theta_z_deg = a,
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// Seeds and configuration a sequence was produced from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub sweep: SweepSpec,
    pub master_seed: u64,
    pub surface_seed: u64,
}

/// Ordered, labeled frames. `frames[i].pose == schedule[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureSequence {
    pub frames: Vec<SpeckleFrame>,
    pub schedule: Vec<Pose>,
    pub provenance: Provenance,
}

impl CaptureSequence {
    pub fn frames_per_pose(&self) -> usize {
        self.provenance.sweep.frames_per_pose
    }

    pub fn group_count(&self) -> usize {
        self.frames.len() / self.frames_per_pose()
    }

    /// Frames of each pose group together with the group's label (middle frame).
    pub fn stacks(&self) -> impl Iterator<Item = (&[SpeckleFrame], Pose)> {
        let f = self.frames_per_pose();
        self.frames.chunks_exact(f).map(move |c| (c, c[f / 2].pose))
    }

    /// Rotation speed of the group a frame belongs to.
    pub fn rpm_of(&self, frame_index: u64) -> f64 {
        let sweep = &self.provenance.sweep;
        let per_rpm = (sweep.group_count().unwrap_or(1) / sweep.rpm.len()).max(1);
        let g = frame_index as usize / sweep.frames_per_pose;
        sweep.rpm[(g / per_rpm).min(sweep.rpm.len() - 1)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.schedule.len() {
            return Err(Error::Input(format!(
                "{} frames but {} scheduled poses",
                self.frames.len(),
                self.schedule.len()
            )));
        }
        if self.frames.len() % self.frames_per_pose() != 0 {
            return Err(Error::Input("frame count is not a whole number of stacks".into()));
        }
        if self.frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
            return Err(Error::Input("frame indices must increase strictly".into()));
        }
        Ok(())
    }
}

/// Renders every scheduled pose of `spec`. One surface per dataset; each frame
/// draws sensor noise from `derive_seed(master, FRAME_NOISE, frame_index)`.
pub fn simulate_dataset(
    spec: &SweepSpec,
    optics: &OpticalParams,
    laser: &LaserSpec,
    marker: &MarkerSpec,
    master_seed: u64,
) -> Result<CaptureSequence> {
    let schedule = make_schedule(spec)?;
    let surface_seed = derive_seed(master_seed, STREAM_SURFACE, 0);
    let surface = generate_surface(surface_seed, optics, marker.roughness_rms_m, &marker.aperture)?;

    // consecutive frames at the same pose share one noiseless rendering
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, p) in schedule.iter().enumerate() {
        match runs.last_mut() {
            Some((start, len)) if schedule[*start] == *p => *len += 1,
            _ => runs.push((i, 1)),
        }
    }
    let rendered: Vec<Vec<SpeckleFrame>> = runs
        .par_iter()
        .map(|&(start, len)| {
            let pose = schedule[start];
            let intensity = render_intensity(&surface, &pose, laser, optics)?;
            Ok((start..start + len)
                .map(|i| {
                    let seed = derive_seed(master_seed, STREAM_FRAME_NOISE, i as u64);
                    let mut f = quantize_frame(&intensity, pose, laser, optics, seed);
                    f.frame_index = i as u64;
                    f
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    Ok(CaptureSequence {
        frames: rendered.into_iter().flatten().collect(),
        schedule,
        provenance: Provenance {
            sweep: spec.clone(),
            master_seed,
            surface_seed,
        },
    })
}

/// Group counts for `ratios` over `groups`: every split but the last gets
/// `floor(r * groups)`, the last takes the remainder.
pub fn split_counts(groups: usize, ratios: (f64, f64, f64)) -> Result<[usize; 3]> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must be >= 0 and sum to 1, got {r:?}")));
    }
    let wanted = r.iter().filter(|v| **v > 0.0).count();
    if groups < wanted {
        return Err(Error::Config(format!("{groups} pose groups cannot fill {wanted} splits")));
    }
    let a = (r[0] * groups as f64 + 1e-9).floor() as usize;
    let b = ((r[1] * groups as f64 + 1e-9).floor() as usize).min(groups - a);
    let counts = [a, b, groups - a - b];
    if counts.iter().zip(&r).any(|(&c, &v)| v > 0.0 && c == 0) {
        return Err(Error::Config(format!("{groups} pose groups leave a requested split empty")));
    }
    Ok(counts)
}

/// Splits whole pose groups into (train, val, test), spreading each split evenly
/// over θ_y deciles. Deterministic in `seed`.
pub fn split_dataset(
    seq: &CaptureSequence,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(CaptureSequence, CaptureSequence, CaptureSequence)> {
    seq.validate()?;
    let assignment = split_assignment(seq, ratios, seed)?;
    let f = seq.frames_per_pose();
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (g, &s) in assignment.iter().enumerate() {
        parts[s].push(g);
    }
    let take = |groups: &[usize]| CaptureSequence {
        frames: groups
            .iter()
            .flat_map(|&g| seq.frames[g * f..(g + 1) * f].iter().cloned())
            .collect(),
        schedule: groups.iter().flat_map(|&g| seq.schedule[g * f..(g + 1) * f].iter().copied()).collect(),
        provenance: seq.provenance.clone(),
    };
    Ok((take(&parts[0]), take(&parts[1]), take(&parts[2])))
}

/// Split index (0 train, 1 val, 2 test) for every pose group of `seq`.
pub fn split_assignment(seq: &CaptureSequence, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<usize>> {
    let labels: Vec<Pose> = seq.stacks().map(|(_, p)| p).collect();
    let g = labels.len();
    let counts = split_counts(g, ratios)?;

    let mut rng = rng_from(derive_seed(seed, STREAM_SPLIT, 0));
    let mut order: Vec<usize> = (0..g).collect();
    order.shuffle(&mut rng);
    order.sort_by(|&a, &b| labels[a].theta_y_deg.total_cmp(&labels[b].theta_y_deg));
    let mut deciles: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (rank, &grp) in order.iter().enumerate() {
        deciles.entry(rank * 10 / g.max(1)).or_default().push(grp);
    }
    let mut sequence = Vec::with_capacity(g);
    for (_, mut members) in deciles {
        members.shuffle(&mut rng);
        sequence.extend(members);
    }

    let mut assigned = [0usize; 3];
    let mut out = vec![0; g];
    for (t, &grp) in sequence.iter().enumerate() {
        let deficit = |s: usize| counts[s] as f64 * (t + 1) as f64 / g as f64 - assigned[s] as f64;
        let s = (0..3)
            .filter(|&s| assigned[s] < counts[s])
            .max_by(|&a, &b| deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a)))
            .expect("counts sum to group count");
        assigned[s] += 1;
        out[grp] = s;
    }
    Ok(out)
}
