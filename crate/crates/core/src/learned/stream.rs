use std::collections::VecDeque;
use std::time::Instant;

use super::network::Network;
use super::{assemble_stack, spectrum_channel, STACK_LEN};
use crate::error::Result;
use crate::optics::{Pose, SpeckleFrame};

/// Sliding five-frame estimator: each frame's spectrum is computed once and
/// reused by the next four windows.
pub struct StreamEstimator<'a> {
    net: &'a Network<f32>,
    window: VecDeque<(u64, Vec<f32>)>,
}

impl<'a> StreamEstimator<'a> {
    pub fn new(net: &'a Network<f32>) -> Self {
        Self {
            net,
            window: VecDeque::with_capacity(STACK_LEN),
        }
    }

    /// Adds a frame; yields an estimate for the middle of the last five once
    /// five consecutive frames are buffered. A gap in frame indices restarts
    /// the window.
    pub fn push(&mut self, frame: &SpeckleFrame) -> Result<Option<Pose>> {
        if self.window.back().is_some_and(|(i, _)| *i + 1 != frame.frame_index) {
            self.window.clear();
        }
        if self.window.len() == STACK_LEN {
            self.window.pop_front();
        }
        self.window.push_back((frame.frame_index, spectrum_channel(frame)?));
        if self.window.len() < STACK_LEN {
            return Ok(None);
        }
        let refs: Vec<&[f32]> = self.window.iter().map(|(_, c)| c.as_slice()).collect();
        let x = assemble_stack(&refs);
        let y = self.net.forward_infer(&x, 1)?;
        let v: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        Ok(Some(self.net.norm.denormalize(&v)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamStats {
    pub frames: usize,
    pub estimates: usize,
    pub total_s: f64,
    /// Wall time per input frame, preprocessing included.
    pub mean_latency_s: f64,
}

impl StreamStats {
    pub fn frames_per_second(&self) -> f64 {
        if self.total_s > 0.0 {
            self.frames as f64 / self.total_s
        } else {
            f64::INFINITY
        }
    }
}

/// Runs the sliding-window estimator over `frames`.
pub fn infer_stream<'f>(
    net: &Network<f32>,
    frames: impl IntoIterator<Item = &'f SpeckleFrame>,
) -> Result<(Vec<Pose>, StreamStats)> {
    let mut est = StreamEstimator::new(net);
    let mut out = Vec::new();
    let mut n = 0;
    let start = Instant::now();
    for f in frames {
        n += 1;
        if let Some(p) = est.push(f)? {
            out.push(p);
        }
    }
    let total_s = start.elapsed().as_secs_f64();
    let stats = StreamStats {
        frames: n,
        estimates: out.len(),
        total_s,
        mean_latency_s: total_s / n.max(1) as f64,
    };
    Ok((out, stats))
}
