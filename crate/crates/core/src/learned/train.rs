use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{mse_loss, Network, NetworkSpec};
use super::{input_shape, preprocess_stack, InputStack, TargetNorm};
use crate::error::{Error, Result};
use crate::optics::Pose;
use crate::rng::{derive_seed, rng_from, STREAM_INIT, STREAM_SHUFFLE};
use crate::scene::CaptureSequence;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate at the first epoch down to 1% of it at the last.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = if epochs > 1 { (epoch - 1) as f64 / (epochs - 1) as f64 } else { 0.0 };
                base * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub norm: TargetNorm,
    pub conv_channels: Vec<usize>,
    pub mlp_widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = NetworkSpec::desk();
        Self {
            learning_rate: 1e-3,
            schedule: LrSchedule::Constant,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            norm: TargetNorm::default(),
            conv_channels: s.conv_channels,
            mlp_widths: s.mlp_widths,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.adam_eps, self.beta1, self.beta2];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("learning rate, betas and eps must be positive (betas < 1)".into()));
        }
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::Config("batch_size must be >= 2 and epochs >= 1".into()));
        }
        self.norm.validate()
    }

    /// Architecture for frames of the given size.
    pub fn network_spec(&self, sensor_w: usize, sensor_h: usize) -> NetworkSpec {
        NetworkSpec {
            input: input_shape(sensor_w, sensor_h),
            conv_channels: self.conv_channels.clone(),
            mlp_widths: self.mlp_widths.clone(),
            outputs: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub network: Network<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    /// `epoch,train_loss,val_loss` lines with a header.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.history {
            s.push_str(&format!("{},{:e},{:e}\n", r.epoch, r.train_loss, r.val_loss));
        }
        s
    }
}

fn stacks_of(seq: &CaptureSequence) -> Result<Vec<InputStack>> {
    let chunks: Vec<_> = seq.stacks().map(|(f, _)| f).collect();
    chunks.par_iter().map(|f| preprocess_stack(f)).collect()
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f32], grad: &[f32], cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let lr = lr as f32;
        let eps = cfg.adam_eps as f32;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

fn gather(stacks: &[InputStack], idx: &[usize], norm: &TargetNorm) -> (Vec<f32>, Vec<f32>) {
    let mut x = Vec::with_capacity(idx.len() * stacks[0].values.len());
    let mut t = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        x.extend_from_slice(&stacks[i].values);
        t.extend(norm.normalize(&stacks[i].label).iter().map(|&v| v as f32));
    }
    (x, t)
}

const EVAL_BATCH: usize = 16;

fn eval_loss(net: &Network<f32>, stacks: &[InputStack]) -> Result<f64> {
    let idx: Vec<usize> = (0..stacks.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, t) = gather(stacks, chunk, &net.norm);
        let out = net.forward_infer(&x, chunk.len())?;
        total += mse_loss(&out, &t).0 * chunk.len() as f64;
    }
    Ok(total / stacks.len().max(1) as f64)
}

/// Mini-batch Adam on the normalized-target MSE. Shuffling and initialization
/// come from fixed streams of `cfg.seed`, so equal inputs give bitwise-equal
/// weights and history. Returns the weights of the best validation epoch.
pub fn train(train: &CaptureSequence, val: &CaptureSequence, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tr = stacks_of(train)?;
    let va = stacks_of(val)?;
    train_on_stacks(&tr, &va, cfg)
}

pub fn train_on_stacks(tr: &[InputStack], va: &[InputStack], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if tr.len() < 2 {
        return Err(Error::Input(format!("training needs at least 2 stacks, got {}", tr.len())));
    }
    let [_, a, b] = tr[0].shape;
    let spec = NetworkSpec {
        input: tr[0].shape,
        ..cfg.network_spec(2 * a, 2 * b)
    };
    if tr.iter().chain(va).any(|s| s.shape != spec.input) {
        return Err(Error::Input("stacks differ in shape".into()));
    }
    let mut net = Network::<f32>::init(&spec, cfg.norm, derive_seed(cfg.seed, STREAM_INIT, 0))?;
    let mut adam = Adam {
        m: vec![0.0; net.param_count()],
        v: vec![0.0; net.param_count()],
        t: 0,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..tr.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64)));
        let (mut sum, mut count) = (0.0, 0usize);
        let lr = cfg.schedule.rate(cfg.learning_rate, epoch, cfg.epochs);
        for batch in order.chunks(cfg.batch_size) {
            // batch statistics of a single sample are degenerate
            if batch.len() < 2 {
                continue;
            }
            let (x, t) = gather(tr, batch, &net.norm);
            let (out, cache) = net.forward_train(&x, batch.len())?;
            let (loss, dout) = mse_loss(&out, &t);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    lr: cfg.learning_rate,
                });
            }
            let grad = net.backward(&cache, &dout);
            adam.step(&mut net.params, &grad, cfg, lr);
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = sum / count.max(1) as f64;
        let val_loss = if va.is_empty() { train_loss } else { eval_loss(&net, va)? };
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                lr: cfg.learning_rate,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            best = Some((val_loss, epoch, net.clone()));
        }
    }
    let (_, best_epoch, network) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        network,
        history,
        best_epoch,
    })
}

/// Denormalized predictions for every stack of `seq`, in order.
pub fn predict(net: &Network<f32>, seq: &CaptureSequence) -> Result<Vec<Pose>> {
    let stacks = stacks_of(seq)?;
    let mut out = Vec::with_capacity(stacks.len());
    let idx: Vec<usize> = (0..stacks.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = gather(&stacks, chunk, &net.norm);
        let y = net.forward_infer(&x, chunk.len())?;
        for row in y.chunks_exact(3) {
            let v: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            out.push(net.norm.denormalize(&v));
        }
    }
    Ok(out)
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub probes: usize,
    /// Probes drawn again because the perturbation crossed a ReLU or pooling kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
}

/// Checks `probes` randomly chosen parameters of a freshly initialized f64
/// network on a random batch: reverse-mode gradient against
/// `(L(p + h) - L(p - h)) / 2h`. Relative error uses `max(|a|, |b|, 1e-5)`;
/// the floor sits above the round-off of the difference quotient. A probe whose
/// perturbation flips any ReLU or pooling choice is replaced by a fresh draw.
pub fn gradient_check(spec: &NetworkSpec, batch: usize, probes: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = rng_from(seed);
    let mut net = Network::<f64>::init(spec, TargetNorm::default(), seed)?;
    // random affine parameters so batch norm is not at its identity point
    for (name, _) in net.param_names() {
        if name.contains(".bn.") {
            let r = net.param_range(&name).expect("listed");
            for v in &mut net.params[r] {
                *v = rng.random_range(0.5..1.5) * if name.ends_with("beta") { 0.2 } else { 1.0 };
            }
        }
    }
    let x: Vec<f64> = (0..batch * spec.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t: Vec<f64> = (0..batch * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let run = |net: &Network<f64>| -> Result<(f64, super::Cache<f64>)> {
        let mut scratch = net.clone();
        let (out, cache) = scratch.forward_train(&x, batch)?;
        Ok((mse_loss(&out, &t).0, cache))
    };
    let (grad, base) = {
        let mut scratch = net.clone();
        let (out, cache) = scratch.forward_train(&x, batch)?;
        (scratch.backward(&cache, &mse_loss(&out, &t).1), cache)
    };
    let names = net.param_names();
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    let (mut done, mut redrawn) = (0, 0);
    while done < probes {
        if redrawn > 10 * probes {
            return Err(Error::Input("gradient check: too many probes hit a kink".into()));
        }
        let (name, _) = &names[rng.random_range(0..names.len())];
        let r = net.param_range(name).expect("listed");
        let i = rng.random_range(r);
        let orig = net.params[i];
        net.params[i] = orig + h;
        let (lp, cp) = run(&net)?;
        net.params[i] = orig - h;
        let (lm, cm) = run(&net)?;
        net.params[i] = orig;
        if !(base.same_pattern(&cp) && base.same_pattern(&cm)) {
            redrawn += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-5);
        max_rel = max_rel.max(rel);
        done += 1;
    }
    Ok(GradCheck {
        probes,
        redrawn,
        max_rel_error: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::optics::FrameMeta;
    use crate::SpeckleFrame;

    #[test]
    fn tiny_gradients_match_finite_differences() {
        for seed in 0..60 {
            let g = gradient_check(&NetworkSpec::tiny(), 4, 100, seed).unwrap();
            assert!(g.max_rel_error < 1e-4 && g.redrawn < 20, "{seed} {g:?}");
        }
    }

    fn toy_stacks(n: usize, seed: u64) -> Vec<InputStack> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| {
                let pose = Pose::new(rng.random_range(0.0..40.0), rng.random_range(0.0..90.0), rng.random_range(0.16..0.28));
                let v = TargetNorm::default().normalize(&pose);
                // inputs carry the target as smooth ramps plus noise
                let values = (0..5 * 16 * 16)
                    .map(|i| {
                        let k = i % 3;
                        (v[k] * ((i / 3) as f64 * 0.01).cos() + rng.random_range(-0.05..0.05)) as f32
                    })
                    .collect();
                InputStack {
                    values,
                    shape: [5, 16, 16],
                    label: pose,
                }
            })
            .collect()
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            conv_channels: vec![4, 4, 4],
            mlp_widths: vec![32, 32, 16, 16, 8],
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_falls_and_is_reproducible() {
        let tr = toy_stacks(48, 1);
        let va = toy_stacks(8, 2);
        let a = train_on_stacks(&tr, &va, &small_cfg(5)).unwrap();
        assert!(a.history[4].train_loss < a.history[0].train_loss, "{:?}", a.history);
        let b = train_on_stacks(&tr, &va, &small_cfg(5)).unwrap();
        assert_eq!(a.history_csv(), b.history_csv());
        assert_eq!(a.network.params, b.network.params);
        let c = train_on_stacks(&tr, &va, &TrainConfig { seed: 4, ..small_cfg(5) }).unwrap();
        assert_ne!(a.network.params, c.network.params);
    }

    #[test]
    fn overfits_ten_samples() {
        let tr = toy_stacks(10, 5);
        let cfg = TrainConfig {
            batch_size: 10,
            ..small_cfg(500)
        };
        let out = train_on_stacks(&tr, &[], &cfg).unwrap();
        let best = out.history.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-3, "best normalized MSE {best}");
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let tr = toy_stacks(16, 1);
        let cfg = TrainConfig {
            learning_rate: 1e30,
            ..small_cfg(3)
        };
        assert!(matches!(train_on_stacks(&tr, &[], &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn predictions_cover_every_stack() {
        let meta = FrameMeta {
            bit_depth: 8,
            pitch_m: 1e-5,
            lambda0_m: 5e-7,
            delta_lambda_m: 1e-9,
        };
        let frames: Vec<SpeckleFrame> = (0..10u64)
            .map(|i| SpeckleFrame {
                pixels: Grid::from_fn(32, 32, |x, y| ((x * 7 + y * 3 + i as usize) % 17) as u16),
                pose: Pose::new(10.0, 20.0, 0.2),
                frame_index: i,
                meta,
            })
            .collect();
        let seq = CaptureSequence {
            schedule: frames.iter().map(|f| f.pose).collect(),
            frames,
            provenance: crate::scene::Provenance {
                sweep: crate::scene::SweepSpec::desk(),
                master_seed: 0,
                surface_seed: 0,
            },
        };
        let spec = NetworkSpec {
            input: [5, 16, 16],
            ..NetworkSpec::tiny()
        };
        let net = Network::<f32>::init(&spec, TargetNorm::default(), 1).unwrap();
        assert_eq!(predict(&net, &seq).unwrap().len(), 2);
    }
}
