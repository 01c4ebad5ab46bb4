use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use speckle_core::analytical::{calibrate, CalibrationParams, OptimizerOpts};
use speckle_core::config::{ExperimentConfig, Scale};
use speckle_core::dsp::{autocorrelation_of, logmag_of};
use speckle_core::eval::{bench_throughput, comparison_table, evaluate_analytical, evaluate_learned};
use speckle_core::io::{
    read_bytes, read_calibration, read_dataset, read_frame_pixels, read_weights, sha256_hex, write_bytes,
    write_calibration, write_dataset, write_weights, Dataset, SplitSpec,
};
use speckle_core::learned::{input_shape, train, Network, NetworkSpec};
use speckle_core::scene::{simulate_dataset, CaptureSequence};
use speckle_core::{Error, Grid};

const TRAIN: u8 = 0;
const VAL: u8 = 1;
const TEST: u8 = 2;

#[derive(Parser)]
#[command(name = "speckle", version, about = "Multi-wavelength laser speckle pose sensing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled dataset of speckle frames.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scale: Option<Scale>,
    },
    /// Write the autocorrelation map and log spectrum of one frame as images.
    Inspect {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        out_ac: PathBuf,
        #[arg(long)]
        out_spectrum: PathBuf,
    },
    /// Fit the shift model to the training split.
    Calibrate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the analytical estimator on the test split.
    Estimate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train the network on the training split, selecting on the validation split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        history: PathBuf,
    },
    /// Score the network and the analytical estimator on the test split.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Calibration for the analytical rows; fitted on the training split when absent.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        table: PathBuf,
    },
    /// Time single-threaded sliding-window inference.
    Bench {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        frames: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(e) if e.is_validity() => 3,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            config,
            out,
            seed,
            scale,
        } => simulate(&config, &out, seed, scale),
        Command::Inspect {
            frame,
            out_ac,
            out_spectrum,
        } => inspect(&frame, &out_ac, &out_spectrum),
        Command::Calibrate { dataset, init, out } => {
            let ds = read_dataset(&dataset)?;
            let init = read_calibration(&init)?;
            let params = fit_calibration(&ds, &init)?;
            write_calibration(&out, &params)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Estimate { dataset, calib, report } => {
            let ds = read_dataset(&dataset)?;
            let params = read_calibration(&calib)?;
            let hash = combined_hash(&[ds.hash()?, sha256_hex(&read_bytes(&calib)?)]);
            let test = nonempty_split(&ds, TEST)?;
            let (r, estimates) = evaluate_analytical(&test, &params, &Default::default(), &hash)?;
            let body = json!({ "report": r, "estimates": estimates });
            write_bytes(&report, (serde_json::to_string_pretty(&body)? + "\n").as_bytes())?;
            println!(
                "analytical on {} test stacks: θy MAE {:.3}° (std {:.3}°), θz MAE {:.3}°",
                r.errors.count, r.errors.theta_y_deg.mae, r.errors.theta_y_deg.std, r.errors.theta_z_deg.mae
            );
            Ok(())
        }
        Command::Train {
            dataset,
            config,
            out_weights,
            history,
        } => {
            let ds = read_dataset(&dataset)?;
            let cfg = ExperimentConfig::load(&config, None)?;
            let start = Instant::now();
            let outcome = train(&nonempty_split(&ds, TRAIN)?, &nonempty_split(&ds, VAL)?, &cfg.train)?;
            write_weights(&out_weights, &outcome.network.to_weights())?;
            write_bytes(&history, outcome.history_csv().as_bytes())?;
            let best = &outcome.history[outcome.best_epoch - 1];
            println!(
                "trained {} epochs in {:.1} s; best epoch {} (val loss {:.5}); wrote {}",
                outcome.history.len(),
                start.elapsed().as_secs_f64(),
                outcome.best_epoch,
                best.val_loss,
                out_weights.display()
            );
            Ok(())
        }
        Command::Evaluate {
            dataset,
            weights,
            calib,
            report,
            table,
        } => {
            let ds = read_dataset(&dataset)?;
            let net = load_network(&weights, &ds)?;
            let test = nonempty_split(&ds, TEST)?;
            let learned = evaluate_learned(&net, &test, &combined_hash(&[ds.hash()?, sha256_hex(&read_bytes(&weights)?)]))?;
            let (params, calib_hash) = match calib {
                Some(p) => (read_calibration(&p)?, sha256_hex(&read_bytes(&p)?)),
                None => {
                    let m = &ds.manifest;
                    let params = fit_calibration(&ds, &CalibrationParams::from_setup(&m.laser, &m.optics))?;
                    let hash = sha256_hex(speckle_core::io::format_calibration(&params).as_bytes());
                    (params, hash)
                }
            };
            let (analytical, _) = evaluate_analytical(&test, &params, &Default::default(), &combined_hash(&[ds.hash()?, calib_hash]))?;
            let text = comparison_table(&analytical, &learned)?;
            let body = json!({ "learned": learned, "analytical": analytical });
            write_bytes(&report, (serde_json::to_string_pretty(&body)? + "\n").as_bytes())?;
            write_bytes(&table, text.as_bytes())?;
            print!("{text}");
            Ok(())
        }
        Command::Bench {
            weights,
            dataset,
            frames,
        } => {
            let ds = read_dataset(&dataset)?;
            let net = load_network(&weights, &ds)?;
            let r = bench_throughput(&net, &ds.sequence.frames, frames)?;
            let runs: Vec<String> = r.runs_fps.iter().map(|f| format!("{f:.1}")).collect();
            println!(
                "{} frames, single thread: median {:.1} frames/s (runs {})",
                r.frames,
                r.median_fps,
                runs.join(", ")
            );
            Ok(())
        }
    }
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>, scale: Option<Scale>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config, scale)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let start = Instant::now();
    let seq = simulate_dataset(&cfg.sweep, &cfg.optics, &cfg.laser, &cfg.marker, cfg.seed)?;
    let split = SplitSpec {
        ratios: cfg.split.ratios,
        seed: cfg.split.seed,
    };
    let ds = Dataset::new(seq, cfg.scale.name(), &cfg.optics, &cfg.laser, &cfg.marker, split)?;
    write_dataset(out, &ds)?;
    println!(
        "simulated {} frames ({} stacks) in {:.1} s; manifest {}",
        ds.sequence.frames.len(),
        ds.sequence.group_count(),
        start.elapsed().as_secs_f64(),
        &ds.hash()?[..16]
    );
    Ok(())
}

fn inspect(frame: &Path, out_ac: &Path, out_spectrum: &Path) -> Result<()> {
    for p in [out_ac, out_spectrum] {
        image_format(p)?;
    }
    let (pixels, _) = read_frame_pixels(frame)?;
    let values = pixels.map(f64::from);
    let ac = autocorrelation_of(&values)?;
    let spec = logmag_of(&values);
    save_image(out_ac, &ac.ac)?;
    save_image(out_spectrum, &spec.logmag)?;
    println!("wrote {} and {}", out_ac.display(), out_spectrum.display());
    Ok(())
}

#[derive(Clone, Copy)]
enum ImageFormat {
    Png,
    Pgm,
}

fn image_format(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm") => Ok(ImageFormat::Pgm),
        _ => Err(Error::Config(format!("{}: image output must end in .png or .pgm", path.display())).into()),
    }
}

/// Min-max scales a map to 8 bits.
fn to_gray8(g: &Grid<f64>) -> Grid<u16> {
    let (lo, hi) = g.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    g.map(|v| ((v - lo) / span * 255.0).round() as u16)
}

fn save_image(path: &Path, g: &Grid<f64>) -> Result<()> {
    let gray = to_gray8(g);
    match image_format(path)? {
        ImageFormat::Pgm => write_bytes(path, &speckle_core::io::encode_pgm(&gray, 8)?)?,
        ImageFormat::Png => {
            let (w, h) = gray.dims();
            let buf: Vec<u8> = gray.data().iter().map(|&v| v as u8).collect();
            let img = image::GrayImage::from_raw(w as u32, h as u32, buf).context("image buffer size")?;
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            img.save(path).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

fn nonempty_split(ds: &Dataset, which: u8) -> Result<CaptureSequence> {
    let s = ds.split(which);
    if s.frames.is_empty() {
        let name = ["training", "validation", "test"][which as usize];
        return Err(Error::Config(format!("dataset has an empty {name} split")).into());
    }
    Ok(s)
}

fn fit_calibration(ds: &Dataset, init: &CalibrationParams) -> Result<CalibrationParams> {
    let train = nonempty_split(ds, TRAIN)?;
    let frames: Vec<_> = train
        .stacks()
        .map(|(f, p)| (f[f.len() / 2].clone(), p))
        .collect();
    let r = calibrate(&frames, init, &OptimizerOpts::default())?;
    println!(
        "calibrated on {} frames ({} dropped) in {} iterations: Δλ/λ0 = {:.5e}, S = {:.4} m, loss {:.3e}",
        r.used,
        r.dropped,
        r.iterations,
        r.params.ratio(),
        r.params.source_pos_m,
        r.loss
    );
    Ok(r.params)
}

fn load_network(weights: &Path, ds: &Dataset) -> Result<Network<f32>> {
    let w = read_weights(weights)?;
    let o = &ds.manifest.optics;
    let spec = NetworkSpec::from_weights(&w, input_shape(o.sensor_w_px, o.sensor_h_px))?;
    Ok(Network::from_weights(&spec, &w)?)
}

fn combined_hash(parts: &[String]) -> String {
    sha256_hex(parts.join("\n").as_bytes())
}
