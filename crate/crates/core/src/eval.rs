//! Error statistics, the comparison table and the throughput benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytical::{estimate_stack, AnalyticalEstimate, CalibrationParams, EstimatorOpts};
use crate::error::{Error, Result};
use crate::learned::{infer_stream, predict, Network};
use crate::optics::{Pose, SpeckleFrame};
use crate::scene::CaptureSequence;

/// Tilt substituted when the analytical estimator cannot read a rotation.
pub const FALLBACK_THETA_Z_DEG: f64 = 45.0;

/// Published hardware accuracies (degrees) for the learned and analytical methods.
pub const PAPER_LEARNED_MAE_DEG: f64 = 0.3;
pub const PAPER_BASELINE_MAE_DEG: f64 = 0.6;

/// Mean and population standard deviation of absolute errors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mae: f64,
    pub std: f64,
}

impl ErrorStats {
    pub fn of(abs_errors: &[f64]) -> Self {
        let n = abs_errors.len().max(1) as f64;
        let mae = abs_errors.iter().sum::<f64>() / n;
        let var = abs_errors.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / n;
        Self { mae, std: var.sqrt() }
    }
}

/// Per-target errors: angles in degrees, depth in centimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub count: usize,
    pub theta_y_deg: ErrorStats,
    pub theta_z_deg: ErrorStats,
    /// Absent for estimators that take depth as an input.
    pub depth_cm: Option<ErrorStats>,
}

pub fn mae_std(predictions: &[Pose], labels: &[Pose]) -> Result<PoseErrors> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let err = |f: fn(&Pose) -> f64, k: f64| -> ErrorStats {
        let e: Vec<f64> = predictions.iter().zip(labels).map(|(p, l)| (f(p) - f(l)).abs() * k).collect();
        ErrorStats::of(&e)
    };
    Ok(PoseErrors {
        count: labels.len(),
        theta_y_deg: err(|p| p.theta_y_deg, 1.0),
        theta_z_deg: err(|p| p.theta_z_deg, 1.0),
        depth_cm: Some(err(|p| p.d_z_m, 100.0)),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_s: f64,
    pub per_stack_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpmMetrics {
    pub rpm: f64,
    #[serde(flatten)]
    pub errors: PoseErrors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    #[serde(flatten)]
    pub errors: PoseErrors,
    /// Hash of the dataset manifest and, for learned reports, the weights.
    pub config_hash: String,
    /// Identifies the evaluated frames; see [`split_hash`].
    pub split_hash: String,
    pub timing: Timing,
    pub by_rpm: Vec<RpmMetrics>,
}

impl MetricsReport {
    fn build(method: &str, seq: &CaptureSequence, pred: &[Pose], config_hash: &str, total_s: f64) -> Result<Self> {
        let labels: Vec<Pose> = seq.stacks().map(|(_, p)| p).collect();
        let errors = mae_std(pred, &labels)?;
        let rpms: Vec<f64> = seq.stacks().map(|(f, _)| seq.rpm_of(f[0].frame_index)).collect();
        let mut distinct = rpms.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut by_rpm = Vec::new();
        for rpm in distinct {
            let (p, l): (Vec<Pose>, Vec<Pose>) = rpms
                .iter()
                .zip(pred.iter().zip(&labels))
                .filter(|(r, _)| **r == rpm)
                .map(|(_, (p, l))| (*p, *l))
                .unzip();
            by_rpm.push(RpmMetrics {
                rpm,
                errors: mae_std(&p, &l)?,
            });
        }
        Ok(Self {
            method: method.to_string(),
            errors,
            config_hash: config_hash.to_string(),
            split_hash: split_hash(seq),
            timing: Timing {
                total_s,
                per_stack_ms: total_s * 1e3 / labels.len() as f64,
            },
            by_rpm,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// SHA-256 over frame indices, labels and pixels of a sequence.
pub fn split_hash(seq: &CaptureSequence) -> String {
    let mut h = Sha256::new();
    for f in &seq.frames {
        h.update(f.frame_index.to_le_bytes());
        for v in [f.pose.theta_y_deg, f.pose.theta_z_deg, f.pose.d_z_m] {
            h.update(v.to_le_bytes());
        }
        for p in f.pixels.data() {
            h.update(p.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn evaluate_learned(net: &Network<f32>, seq: &CaptureSequence, config_hash: &str) -> Result<MetricsReport> {
    let start = Instant::now();
    let pred = predict(net, seq)?;
    MetricsReport::build("learned", seq, &pred, config_hash, start.elapsed().as_secs_f64())
}

/// Runs the analytical estimator at each stack's labeled depth. Depth errors are
/// therefore not reported; unreadable rotations fall back to
/// [`FALLBACK_THETA_Z_DEG`].
pub fn evaluate_analytical(
    seq: &CaptureSequence,
    calib: &CalibrationParams,
    opts: &EstimatorOpts,
    config_hash: &str,
) -> Result<(MetricsReport, Vec<AnalyticalEstimate>)> {
    let start = Instant::now();
    let estimates = seq
        .stacks()
        .map(|(f, p)| estimate_stack(f, p.d_z_m, calib, opts))
        .collect::<Result<Vec<_>>>()?;
    let total = start.elapsed().as_secs_f64();
    let pred: Vec<Pose> = estimates
        .iter()
        .zip(seq.stacks())
        .map(|(e, (_, l))| Pose::new(e.theta_y_deg, e.theta_z_deg.unwrap_or(FALLBACK_THETA_Z_DEG), l.d_z_m))
        .collect();
    let mut report = MetricsReport::build("analytical", seq, &pred, config_hash, total)?;
    report.errors.depth_cm = None;
    for r in &mut report.by_rpm {
        r.errors.depth_cm = None;
    }
    Ok((report, estimates))
}

fn cell(s: Option<ErrorStats>) -> String {
    s.map_or("-".into(), |s| format!("{:.2} ± {:.2}", s.mae, s.std))
}

/// Markdown table setting published hardware accuracies beside this run's
/// synthetic ones. Refuses reports computed on different frames.
pub fn comparison_table(analytical: &MetricsReport, learned: &MetricsReport) -> Result<String> {
    if analytical.split_hash != learned.split_hash || analytical.errors.count != learned.errors.count {
        return Err(Error::SplitMismatch(format!(
            "analytical report covers {} stacks ({}), learned report {} ({})",
            analytical.errors.count, analytical.split_hash, learned.errors.count, learned.split_hash
        )));
    }
    let mut t = String::new();
    t.push_str("| method | type | DOF | sensors | θy MAE (°) paper (hardware) | θy MAE ± std (°) this run (synthetic) | θz MAE ± std (°) this run (synthetic) | depth MAE ± std (cm) this run (synthetic) |\n");
    t.push_str("|---|---|---|---|---|---|---|---|\n");
    let rows = [
        ("learned (FFT stack CNN)", 3, PAPER_LEARNED_MAE_DEG, learned),
        ("analytical (side-peak shift)", 2, PAPER_BASELINE_MAE_DEG, analytical),
    ];
    for (name, dof, paper, r) in rows {
        t.push_str(&format!(
            "| {name} | Abs. | {dof} | 1 | {paper:.1} | {} | {} | {} |\n",
            cell(Some(r.errors.theta_y_deg)),
            cell(Some(r.errors.theta_z_deg)),
            cell(r.errors.depth_cm)
        ));
    }
    t.push_str(&format!(
        "\n{} test stacks, split {}.\n",
        learned.errors.count,
        &learned.split_hash[..16]
    ));
    Ok(t)
}

pub const BENCH_RUNS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub frames: usize,
    pub runs_fps: Vec<f64>,
    pub median_fps: f64,
}

/// Sliding-window inference over `n_frames` frames (the dataset's frames
/// repeated as needed and renumbered consecutively), spectra included, on a
/// single worker thread. Reports the median of [`BENCH_RUNS`] runs.
pub fn bench_throughput(net: &Network<f32>, frames: &[SpeckleFrame], n_frames: usize) -> Result<BenchResult> {
    if n_frames < 50 {
        return Err(Error::Input(format!("benchmark needs at least 50 frames, got {n_frames}")));
    }
    if frames.is_empty() {
        return Err(Error::Input("no frames to benchmark".into()));
    }
    let stream: Vec<SpeckleFrame> = (0..n_frames)
        .map(|i| SpeckleFrame {
            frame_index: i as u64,
            ..frames[i % frames.len()].clone()
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    let mut runs_fps = Vec::with_capacity(BENCH_RUNS);
    for _ in 0..BENCH_RUNS {
        let (_, stats) = pool.install(|| infer_stream(net, &stream))?;
        runs_fps.push(stats.frames_per_second());
    }
    let mut sorted = runs_fps.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchResult {
        frames: n_frames,
        median_fps: sorted[BENCH_RUNS / 2],
        runs_fps,
    })
}
