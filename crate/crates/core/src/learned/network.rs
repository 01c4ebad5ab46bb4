use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::*;
use super::linalg::Real;
use super::TargetNorm;
use crate::error::{Error, Result};
use crate::io::{TensorRecord, WeightsFile};
use crate::rng::rng_from;

/// Architecture: three conv blocks (3x3 conv, batch norm, ReLU, 2x2 max pool)
/// then six linear layers, batch norm and ReLU after all but the last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// `(channels, a, b)` of the input tensor.
    pub input: [usize; 3],
    pub conv_channels: Vec<usize>,
    /// Widths of the five hidden linear layers.
    pub mlp_widths: Vec<usize>,
    pub outputs: usize,
}

pub const CONV_BLOCKS: usize = 3;
pub const LINEAR_LAYERS: usize = 6;

impl NetworkSpec {
    pub fn with_input(input: [usize; 3]) -> Self {
        Self {
            input,
            conv_channels: vec![16, 32, 64],
            mlp_widths: vec![512, 256, 128, 64, 32],
            outputs: 3,
        }
    }

    pub fn paper() -> Self {
        Self::with_input([5, 320, 180])
    }

    pub fn desk() -> Self {
        Self::with_input([5, 128, 128])
    }

    /// Small variant for gradient checks.
    pub fn tiny() -> Self {
        Self {
            input: [5, 16, 16],
            conv_channels: vec![2, 2, 2],
            mlp_widths: vec![8; 5],
            outputs: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != CONV_BLOCKS || self.mlp_widths.len() != LINEAR_LAYERS - 1 {
            return Err(Error::Config(format!(
                "network needs {CONV_BLOCKS} conv blocks and {LINEAR_LAYERS} linear layers, got {} and {}",
                self.conv_channels.len(),
                self.mlp_widths.len() + 1
            )));
        }
        if self.outputs != 3 {
            return Err(Error::Config(format!("head must have 3 outputs, got {}", self.outputs)));
        }
        let [c, a, b] = self.input;
        if c == 0 || a >> CONV_BLOCKS == 0 || b >> CONV_BLOCKS == 0 {
            return Err(Error::Config(format!("input {:?} too small for {CONV_BLOCKS} poolings", self.input)));
        }
        if self.conv_channels.iter().chain(&self.mlp_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// `(channels, a, b)` after the last conv block.
    pub fn conv_output(&self) -> [usize; 3] {
        let [_, mut a, mut b] = self.input;
        for _ in 0..CONV_BLOCKS {
            a /= 2;
            b /= 2;
        }
        [*self.conv_channels.last().unwrap_or(&0), a, b]
    }

    pub fn flatten_len(&self) -> usize {
        self.conv_output().iter().product()
    }

    /// Linear layer widths including the head.
    pub fn linear_widths(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.flatten_len()];
        dims.extend(&self.mlp_widths);
        dims.push(self.outputs);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Architecture of a weights file for inputs of shape `input`: layer widths
    /// are read from the tensor dimensions, then the fingerprint is checked.
    pub fn from_weights(w: &WeightsFile, input: [usize; 3]) -> Result<Self> {
        let dims = |name: String| -> Result<&[usize]> {
            w.tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.dims.as_slice())
                .ok_or_else(|| Error::Format(format!("weights lack tensor {name}")))
        };
        let conv_channels = (0..CONV_BLOCKS).map(|i| dims(format!("conv{i}.weight")).map(|d| d[0])).collect::<Result<Vec<_>>>()?;
        let mut mlp_widths = (0..LINEAR_LAYERS).map(|i| dims(format!("fc{i}.weight")).map(|d| d[0])).collect::<Result<Vec<_>>>()?;
        let outputs = mlp_widths.pop().unwrap_or(0);
        let spec = Self {
            input,
            conv_channels,
            mlp_widths,
            outputs,
        };
        if spec.fingerprint() != w.fingerprint {
            return Err(Error::Fingerprint {
                expected: spec.fingerprint(),
                found: w.fingerprint,
            });
        }
        Ok(spec)
    }

    /// Hash of the architecture, stored with weights and checked on load.
    pub fn fingerprint(&self) -> u64 {
        let text = format!(
            "speckle-net/1 in={:?} conv={:?} k=3 pad=1 pool=2 bn mlp={:?} out={}",
            self.input, self.conv_channels, self.mlp_widths, self.outputs
        );
        let d = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    dims: Vec<usize>,
    offset: usize,
}

impl Entry {
    fn len(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Layout {
    entries: Vec<Entry>,
    total: usize,
}

impl Layout {
    fn add(&mut self, name: String, dims: Vec<usize>) -> usize {
        let offset = self.total;
        let e = Entry { name, dims, offset };
        self.total += e.len();
        self.entries.push(e);
        offset
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvIdx {
    shape: ConvShape,
    w: usize,
    b: usize,
    bn: Bn,
}

#[derive(Clone, Debug, PartialEq)]
struct FcIdx {
    inp: usize,
    out: usize,
    w: usize,
    b: usize,
    bn: Option<Bn>,
}

#[derive(Clone, Debug, PartialEq)]
struct Plan {
    convs: Vec<ConvIdx>,
    fcs: Vec<FcIdx>,
    params: Layout,
    buffers: Layout,
}

impl Plan {
    fn new(spec: &NetworkSpec) -> Self {
        let (mut params, mut buffers) = (Layout::default(), Layout::default());
        let bn = |params: &mut Layout, buffers: &mut Layout, prefix: &str, c: usize| Bn {
            gamma: params.add(format!("{prefix}.bn.gamma"), vec![c]),
            beta: params.add(format!("{prefix}.bn.beta"), vec![c]),
            mean: buffers.add(format!("{prefix}.bn.running_mean"), vec![c]),
            var: buffers.add(format!("{prefix}.bn.running_var"), vec![c]),
        };
        let [mut cin, mut h, mut w] = spec.input;
        let mut convs = Vec::new();
        for (i, &cout) in spec.conv_channels.iter().enumerate() {
            let p = format!("conv{i}");
            let wo = params.add(format!("{p}.weight"), vec![cout, cin, 3, 3]);
            let bo = params.add(format!("{p}.bias"), vec![cout]);
            let norm = bn(&mut params, &mut buffers, &p, cout);
            convs.push(ConvIdx {
                shape: ConvShape { cin, cout, h, w },
                w: wo,
                b: bo,
                bn: norm,
            });
            cin = cout;
            h /= 2;
            w /= 2;
        }
        let widths = spec.linear_widths();
        let mut fcs = Vec::new();
        for (i, &(inp, out)) in widths.iter().enumerate() {
            let p = format!("fc{i}");
            let wo = params.add(format!("{p}.weight"), vec![out, inp]);
            let bo = params.add(format!("{p}.bias"), vec![out]);
            let norm = (i + 1 < widths.len()).then(|| bn(&mut params, &mut buffers, &p, out));
            fcs.push(FcIdx {
                inp,
                out,
                w: wo,
                b: bo,
                bn: norm,
            });
        }
        Self {
            convs,
            fcs,
            params,
            buffers,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct ConvCache<T> {
    input: Vec<T>,
    bn: BnCache<T>,
    act: Vec<T>,
    argmax: Vec<u32>,
}

#[derive(Clone, Debug, Default)]
struct FcCache<T> {
    input: Vec<T>,
    bn: Option<BnCache<T>>,
    act: Vec<T>,
}

/// Activations saved by a training-mode forward pass.
#[derive(Clone, Debug, Default)]
pub struct Cache<T> {
    n: usize,
    conv: Vec<ConvCache<T>>,
    fc: Vec<FcCache<T>>,
}

impl<T: Real> Cache<T> {
    /// True when both passes share every ReLU on/off state and pooling choice,
    /// i.e. the loss is smooth between them.
    pub fn same_pattern(&self, other: &Cache<T>) -> bool {
        let on = |a: &[T], b: &[T]| a.iter().zip(b).all(|(x, y)| (*x > T::zero()) == (*y > T::zero()));
        self.n == other.n
            && self.conv.iter().zip(&other.conv).all(|(a, b)| a.argmax == b.argmax && on(&a.act, &b.act))
            && self.fc.iter().zip(&other.fc).all(|(a, b)| a.bn.is_none() || on(&a.act, &b.act))
    }
}

/// Network parameters (trainable) and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub norm: TargetNorm,
    plan: Plan,
    pub params: Vec<T>,
    pub buffers: Vec<T>,
}

fn slice<T>(v: &[T], off: usize, len: usize) -> &[T] {
    &v[off..off + len]
}

impl<T: Real> Network<T> {
    /// Fan-in scaled uniform initialization: `±sqrt(6 / fan_in)` for layers
    /// feeding a ReLU, `±sqrt(3 / fan_in)` for the head. The target
    /// normalization is kept at f32 precision so it survives the weights file.
    pub fn init(spec: &NetworkSpec, norm: TargetNorm, seed: u64) -> Result<Self> {
        spec.validate()?;
        let plan = Plan::new(spec);
        let mut params = vec![T::zero(); plan.params.total];
        let mut buffers = vec![T::zero(); plan.buffers.total];
        let mut rng = rng_from(seed);
        for e in &plan.params.entries {
            let dst = &mut params[e.offset..e.offset + e.len()];
            if e.name.ends_with(".weight") {
                let fan_in: usize = e.dims[1..].iter().product();
                let gain = if e.name == format!("fc{}.weight", LINEAR_LAYERS - 1) { 3.0 } else { 6.0 };
                let lim = (gain / fan_in as f64).sqrt();
                for v in dst {
                    *v = T::from_f64_lossy(rng.random_range(-lim..lim));
                }
            } else if e.name.ends_with(".gamma") {
                dst.fill(T::one());
            }
        }
        for e in &plan.buffers.entries {
            if e.name.ends_with("running_var") {
                buffers[e.offset..e.offset + e.len()].fill(T::one());
            }
        }
        let f32_round = |a: [f64; 3]| a.map(|v| f64::from(v as f32));
        Ok(Self {
            spec: spec.clone(),
            norm: TargetNorm {
                scale: f32_round(norm.scale),
                offset: f32_round(norm.offset),
            },
            plan,
            params,
            buffers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn conv_block_count(&self) -> usize {
        self.plan.convs.len()
    }

    pub fn linear_layer_count(&self) -> usize {
        self.plan.fcs.len()
    }

    /// Names and shapes of the trainable tensors, in storage order.
    pub fn param_names(&self) -> Vec<(String, Vec<usize>)> {
        self.plan.params.entries.iter().map(|e| (e.name.clone(), e.dims.clone())).collect()
    }

    /// Offset and length of a named trainable tensor in [`Network::params`].
    pub fn param_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let e = self.plan.params.entries.iter().find(|e| e.name == name)?;
        Some(e.offset..e.offset + e.len())
    }

    fn check_input(&self, x: &[T], n: usize) -> Result<()> {
        if n == 0 || x.len() != n * self.spec.input_len() {
            return Err(Error::Shape {
                expected: format!("{n} x {:?}", self.spec.input),
                found: format!("{} values", x.len()),
            });
        }
        Ok(())
    }

    /// Inference-mode forward: batch norm uses running statistics. Returns
    /// `n x 3` normalized outputs.
    pub fn forward_infer(&self, x: &[T], n: usize) -> Result<Vec<T>> {
        self.check_input(x, n)?;
        let p = &self.params;
        let buf = &self.buffers;
        let mut a = x.to_vec();
        let mut cols = Vec::new();
        for c in &self.plan.convs {
            let s = c.shape;
            let mut z = vec![T::zero(); n * s.out_len()];
            conv_forward(&a, n, s, slice(p, c.w, s.cout * s.patch()), slice(p, c.b, s.cout), &mut z, &mut cols);
            let mut y = vec![T::zero(); z.len()];
            let k = s.cout;
            bn_forward_infer(
                &z,
                n,
                k,
                s.h * s.w,
                slice(p, c.bn.gamma, k),
                slice(p, c.bn.beta, k),
                slice(buf, c.bn.mean, k),
                slice(buf, c.bn.var, k),
                &mut y,
            );
            relu_in_place(&mut y);
            a = vec![T::zero(); n * s.cout * (s.h / 2) * (s.w / 2)];
            maxpool_forward(&y, n * s.cout, s.h, s.w, &mut a, &mut Vec::new());
        }
        for f in &self.plan.fcs {
            let mut z = vec![T::zero(); n * f.out];
            linear_forward(&a, n, f.inp, f.out, slice(p, f.w, f.inp * f.out), slice(p, f.b, f.out), &mut z);
            if let Some(bn) = f.bn {
                let mut y = vec![T::zero(); z.len()];
                let k = f.out;
                bn_forward_infer(
                    &z,
                    n,
                    k,
                    1,
                    slice(p, bn.gamma, k),
                    slice(p, bn.beta, k),
                    slice(buf, bn.mean, k),
                    slice(buf, bn.var, k),
                    &mut y,
                );
                relu_in_place(&mut y);
                z = y;
            }
            a = z;
        }
        Ok(a)
    }

    /// Training-mode forward: batch statistics, running statistics updated.
    pub fn forward_train(&mut self, x: &[T], n: usize) -> Result<(Vec<T>, Cache<T>)> {
        self.check_input(x, n)?;
        let p = &self.params;
        let buf = &mut self.buffers;
        let mut cache = Cache {
            n,
            ..Cache::default()
        };
        let mut a = x.to_vec();
        let mut cols = Vec::new();
        for c in &self.plan.convs {
            let s = c.shape;
            let k = s.cout;
            let mut z = vec![T::zero(); n * s.out_len()];
            conv_forward(&a, n, s, slice(p, c.w, k * s.patch()), slice(p, c.b, k), &mut z, &mut cols);
            let mut y = vec![T::zero(); z.len()];
            let (mean, var) = split_two(buf, c.bn.mean, c.bn.var, k);
            let bn = bn_forward_train(&z, n, k, s.h * s.w, slice(p, c.bn.gamma, k), slice(p, c.bn.beta, k), mean, var, &mut y);
            relu_in_place(&mut y);
            let mut pooled = vec![T::zero(); n * k * (s.h / 2) * (s.w / 2)];
            let mut argmax = Vec::new();
            maxpool_forward(&y, n * k, s.h, s.w, &mut pooled, &mut argmax);
            cache.conv.push(ConvCache {
                input: std::mem::replace(&mut a, pooled),
                bn,
                act: y,
                argmax,
            });
        }
        for f in &self.plan.fcs {
            let mut z = vec![T::zero(); n * f.out];
            linear_forward(&a, n, f.inp, f.out, slice(p, f.w, f.inp * f.out), slice(p, f.b, f.out), &mut z);
            let mut bn_cache = None;
            if let Some(bn) = f.bn {
                let k = f.out;
                let mut y = vec![T::zero(); z.len()];
                let (mean, var) = split_two(buf, bn.mean, bn.var, k);
                bn_cache = Some(bn_forward_train(&z, n, k, 1, slice(p, bn.gamma, k), slice(p, bn.beta, k), mean, var, &mut y));
                relu_in_place(&mut y);
                z = y;
            }
            cache.fc.push(FcCache {
                input: std::mem::replace(&mut a, z.clone()),
                bn: bn_cache,
                act: z,
            });
        }
        Ok((a, cache))
    }

    /// Parameter gradients of a loss whose gradient w.r.t. the outputs is `dout`.
    pub fn backward(&self, cache: &Cache<T>, dout: &[T]) -> Vec<T> {
        let p = &self.params;
        let n = cache.n;
        let mut g = vec![T::zero(); p.len()];
        let mut d = dout.to_vec();
        for (f, fc) in self.plan.fcs.iter().zip(&cache.fc).rev() {
            if let (Some(bn), Some(bc)) = (f.bn, &fc.bn) {
                relu_backward_in_place(&fc.act, &mut d);
                let k = f.out;
                let mut dz = vec![T::zero(); d.len()];
                let (dgamma, dbeta) = split_two(&mut g, bn.gamma, bn.beta, k);
                bn_backward(&d, bc, n, k, 1, slice(p, bn.gamma, k), dgamma, dbeta, &mut dz);
                d = dz;
            }
            let mut dx = vec![T::zero(); n * f.inp];
            let (dw, db) = split_two_sized(&mut g, f.w, f.inp * f.out, f.b, f.out);
            linear_backward(&fc.input, &d, n, f.inp, f.out, slice(p, f.w, f.inp * f.out), dw, db, Some(&mut dx));
            d = dx;
        }
        let (mut cols, mut dcols) = (Vec::new(), Vec::new());
        for (i, (c, cc)) in self.plan.convs.iter().zip(&cache.conv).enumerate().rev() {
            let s = c.shape;
            let k = s.cout;
            let mut dy = vec![T::zero(); n * s.out_len()];
            maxpool_backward(&d, &cc.argmax, &mut dy);
            relu_backward_in_place(&cc.act, &mut dy);
            let mut dz = vec![T::zero(); dy.len()];
            let (dgamma, dbeta) = split_two(&mut g, c.bn.gamma, c.bn.beta, k);
            bn_backward(&dy, &cc.bn, n, k, s.h * s.w, slice(p, c.bn.gamma, k), dgamma, dbeta, &mut dz);
            let mut dx = if i > 0 { vec![T::zero(); n * s.in_len()] } else { Vec::new() };
            let (dw, db) = split_two_sized(&mut g, c.w, k * s.patch(), c.b, k);
            conv_backward(
                &cc.input,
                &dz,
                n,
                s,
                slice(p, c.w, k * s.patch()),
                dw,
                db,
                (i > 0).then_some(&mut dx[..]),
                &mut cols,
                &mut dcols,
            );
            d = dx;
        }
        g
    }

    /// Trainable tensors, running statistics and target normalization as named
    /// f32 tensors with this architecture's fingerprint.
    pub fn to_weights(&self) -> WeightsFile {
        let mut tensors = Vec::new();
        let mut push = |layout: &Layout, data: &[T]| {
            for e in &layout.entries {
                tensors.push(TensorRecord {
                    name: e.name.clone(),
                    dims: e.dims.clone(),
                    values: data[e.offset..e.offset + e.len()].iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
                });
            }
        };
        push(&self.plan.params, &self.params);
        push(&self.plan.buffers, &self.buffers);
        tensors.push(TensorRecord {
            name: "target.scale".into(),
            dims: vec![3],
            values: self.norm.scale.iter().map(|&v| v as f32).collect(),
        });
        tensors.push(TensorRecord {
            name: "target.offset".into(),
            dims: vec![3],
            values: self.norm.offset.iter().map(|&v| v as f32).collect(),
        });
        WeightsFile {
            fingerprint: self.spec.fingerprint(),
            tensors,
        }
    }

    /// Rebuilds a network of architecture `spec` from stored weights.
    pub fn from_weights(spec: &NetworkSpec, w: &WeightsFile) -> Result<Self> {
        if w.fingerprint != spec.fingerprint() {
            return Err(Error::Fingerprint {
                expected: spec.fingerprint(),
                found: w.fingerprint,
            });
        }
        let mut net = Self::init(spec, TargetNorm::default(), 0)?;
        let find = |name: &str, dims: &[usize]| -> Result<&TensorRecord> {
            let t = w
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("weights lack tensor {name}")))?;
            if t.dims != dims {
                return Err(Error::Format(format!("tensor {name} has dims {:?}, expected {dims:?}", t.dims)));
            }
            Ok(t)
        };
        for (layout, data) in [(&net.plan.params, &mut net.params), (&net.plan.buffers, &mut net.buffers)] {
            for e in &layout.entries {
                let t = find(&e.name, &e.dims)?;
                for (d, &v) in data[e.offset..].iter_mut().zip(&t.values) {
                    *d = T::from_f32(v).expect("f32 fits");
                }
            }
        }
        let scale = find("target.scale", &[3])?;
        let offset = find("target.offset", &[3])?;
        for i in 0..3 {
            net.norm.scale[i] = f64::from(scale.values[i]);
            net.norm.offset[i] = f64::from(offset.values[i]);
        }
        if w.tensors.len() != net.plan.params.entries.len() + net.plan.buffers.entries.len() + 2 {
            return Err(Error::Format("weights hold tensors this architecture does not use".into()));
        }
        Ok(net)
    }

    /// Same parameters and statistics in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN))).collect();
        Network {
            spec: self.spec.clone(),
            norm: self.norm,
            plan: self.plan.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }
}

fn split_two<T>(v: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    split_two_sized(v, a, len, b, len)
}

/// Two disjoint mutable windows `[a, a+la)` and `[b, b+lb)` of one buffer.
fn split_two_sized<T>(v: &mut [T], a: usize, la: usize, b: usize, lb: usize) -> (&mut [T], &mut [T]) {
    assert!(a + la <= b || b + lb <= a, "windows overlap");
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a..a + la], &mut hi[..lb])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[..la], &mut lo[b..b + lb])
    }
}

/// Mean squared error over all outputs and its gradient.
pub fn mse_loss<T: Real>(out: &[T], target: &[T]) -> (f64, Vec<T>) {
    let n = out.len().max(1) as f64;
    let k = T::from_f64_lossy(2.0 / n);
    let mut loss = 0.0;
    let grad = out
        .iter()
        .zip(target)
        .map(|(&o, &t)| {
            let d = o - t;
            loss += d.to_f64().unwrap_or(f64::NAN).powi(2);
            k * d
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn paper_shapes() {
        let s = NetworkSpec::paper();
        assert_eq!(s.conv_output(), [64, 40, 22]);
        assert_eq!(s.flatten_len(), 56_320);
        let w = s.linear_widths();
        assert_eq!(w.len(), 6);
        assert_eq!(w[0], (56_320, 512));
        assert_eq!(w[5], (32, 3));
    }

    #[test]
    fn counts_and_validation() {
        let net = Network::<f32>::init(&NetworkSpec::tiny(), TargetNorm::default(), 1).unwrap();
        assert_eq!((net.conv_block_count(), net.linear_layer_count()), (3, 6));
        let mut bad = NetworkSpec::tiny();
        bad.mlp_widths.pop();
        assert!(Network::<f32>::init(&bad, TargetNorm::default(), 1).is_err());
        let mut bad = NetworkSpec::tiny();
        bad.input = [5, 4, 16];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut net = Network::<f64>::init(&NetworkSpec::tiny(), TargetNorm::default(), 1).unwrap();
        net.params.fill(0.0);
        let x = vec![1.5; 2 * net.spec.input_len()];
        assert_eq!(net.forward_infer(&x, 2).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn infer_is_deterministic_and_order_independent() {
        let net = Network::<f32>::init(&NetworkSpec::tiny(), TargetNorm::default(), 3).unwrap();
        let len = net.spec.input_len();
        let mut rng = rng_from(5);
        let x: Vec<f32> = (0..3 * len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = net.forward_infer(&x, 3).unwrap();
        assert_eq!(a, net.forward_infer(&x, 3).unwrap());
        let mut swapped = x[len..2 * len].to_vec();
        swapped.extend_from_slice(&x[..len]);
        swapped.extend_from_slice(&x[2 * len..]);
        let b = net.forward_infer(&swapped, 3).unwrap();
        assert_eq!(&b[..3], &a[3..6]);
        assert_eq!(&b[3..6], &a[..3]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = Network::<f32>::init(&NetworkSpec::tiny(), TargetNorm::default(), 3).unwrap();
        assert!(matches!(net.forward_infer(&[0.0; 10], 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn exact_targets_give_zero_head_bias_gradient() {
        let mut net = Network::<f64>::init(&NetworkSpec::tiny(), TargetNorm::default(), 2).unwrap();
        let mut rng = rng_from(9);
        let x: Vec<f64> = (0..4 * net.spec.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (out, cache) = net.forward_train(&x, 4).unwrap();
        let (loss, dout) = mse_loss(&out, &out);
        assert_eq!(loss, 0.0);
        let g = net.backward(&cache, &dout);
        let r = net.param_range("fc5.bias").unwrap();
        assert!(g[r].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut net = Network::<f64>::init(&NetworkSpec::tiny(), TargetNorm::default(), 2).unwrap();
        // beta far negative: every unit of fc4 is dead after batch norm + ReLU
        let beta = net.param_range("fc4.bn.beta").unwrap();
        net.params[beta].fill(-100.0);
        let mut rng = rng_from(4);
        let x: Vec<f64> = (0..4 * net.spec.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (out, cache) = net.forward_train(&x, 4).unwrap();
        let target = vec![0.5; out.len()];
        let g = net.backward(&cache, &mse_loss(&out, &target).1);
        for name in ["fc4.weight", "fc4.bias", "fc3.weight", "conv0.weight"] {
            let r = net.param_range(name).unwrap();
            assert!(g[r].iter().all(|&v| v == 0.0), "{name}");
        }
        assert!(g[net.param_range("fc5.bias").unwrap()].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn weights_round_trip() {
        let net = Network::<f32>::init(&NetworkSpec::tiny(), TargetNorm::default(), 8).unwrap();
        let w = net.to_weights();
        let back = Network::<f32>::from_weights(&NetworkSpec::tiny(), &w).unwrap();
        assert!(back == net, "round trip changed the network");
        assert_eq!(NetworkSpec::from_weights(&w, NetworkSpec::tiny().input).unwrap(), NetworkSpec::tiny());
        assert!(NetworkSpec::from_weights(&w, [5, 32, 32]).is_err());
        assert!(matches!(
            Network::<f32>::from_weights(&NetworkSpec::desk(), &w),
            Err(Error::Fingerprint { .. })
        ));
    }
}
