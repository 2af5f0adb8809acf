//! Spike-domain attention kernels: cumulative spike products for Q*K^T and
//! the count-based softmax substitute.
//!
//! Each matrix element is rate-coded into a set of spike steps, and the
//! per-step product accumulation sum_t S_Q(t)*S_K(t)^T reduces to popcounts
//! of step-mask intersections, so the whole kernel runs on integer ops.
//! Two spike placements are supported: `FrontLoaded` (all spikes in the
//! first |count| steps; pairwise sums obey an exact min law) and `Strided`
//! (spike k of m at step ceil(k*T/m); pairwise sums approximate the product
//! law the decode convention assumes). Strided is the default.

use crate::error::{Error, Result};
use crate::neuron::rate_count;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    FrontLoaded,
    Strided,
}

/// Accumulated signed spike-product counts for one attention block.
#[derive(Debug, Clone)]
pub struct AttentionScores {
    /// m x n signed integer counts.
    pub accumulated: Vec<i64>,
    pub m: usize,
    pub n: usize,
    pub t_steps: u32,
    pub scale_q: f64,
    pub scale_k: f64,
}

/// Step mask for one element: bit t-1 set means a spike at step t.
fn step_mask(count: i64, t_steps: u32, schedule: Schedule) -> u128 {
    let c = count.unsigned_abs().min(t_steps as u64) as u32;
    if c == 0 {
        return 0;
    }
    match schedule {
        Schedule::FrontLoaded => {
            if c >= 128 {
                u128::MAX
            } else {
                (1u128 << c) - 1
            }
        }
        Schedule::Strided => {
            let mut m = 0u128;
            for k in 1..=c as u64 {
                // ceil(k*T/c), 1-based step index.
                let step = (k * t_steps as u64).div_ceil(c as u64);
                m |= 1u128 << (step - 1);
            }
            m
        }
    }
}

fn encode_matrix(
    x: &Tensor,
    scale: f64,
    t_steps: u32,
    schedule: Schedule,
) -> Result<(Vec<u128>, Vec<i8>)> {
    let mut masks = Vec::with_capacity(x.len());
    let mut signs = Vec::with_capacity(x.len());
    for &v in &x.data {
        // Clip to the representable range, mirroring the quantizer's clip
        // (also absorbs one-ulp overshoot from f32 storage).
        let scaled = (v as f64 / scale).clamp(-1.0, 1.0);
        let c = rate_count(scaled, t_steps);
        masks.push(step_mask(c, t_steps, schedule));
        signs.push(c.signum() as i8);
    }
    Ok((masks, signs))
}

/// Spike-product of Q (m x d) against K (n x d) over T steps.
pub fn snn_matmul(
    q: &Tensor,
    k: &Tensor,
    t_steps: u32,
    scale_q: f64,
    scale_k: f64,
    schedule: Schedule,
) -> Result<AttentionScores> {
    if q.shape.len() != 2 || k.shape.len() != 2 || q.shape[1] != k.shape[1] {
        return Err(Error::Dimension(format!(
            "snn_matmul shapes {:?} vs {:?}",
            q.shape, k.shape
        )));
    }
    if t_steps == 0 || t_steps > 128 {
        return Err(Error::Argument("snn_matmul supports 1 <= T <= 128".into()));
    }
    let (m, d) = (q.shape[0], q.shape[1]);
    let n = k.shape[0];
    let (qm, qs) = encode_matrix(q, scale_q, t_steps, schedule)?;
    let (km, ks) = encode_matrix(k, scale_k, t_steps, schedule)?;
    let mut accumulated = vec![0i64; m * n];
    for i in 0..m {
        let qrow_m = &qm[i * d..(i + 1) * d];
        let qrow_s = &qs[i * d..(i + 1) * d];
        for j in 0..n {
            let krow_m = &km[j * d..(j + 1) * d];
            let krow_s = &ks[j * d..(j + 1) * d];
            let mut acc = 0i64;
            for p in 0..d {
                let hits = (qrow_m[p] & krow_m[p]).count_ones() as i64;
                acc += hits * (qrow_s[p] * krow_s[p]) as i64;
            }
            accumulated[i * n + j] = acc;
        }
    }
    Ok(AttentionScores {
        accumulated,
        m,
        n,
        t_steps,
        scale_q,
        scale_k,
    })
}

/// Total spike events both factors emitted (energy proxy).
pub fn spike_events(x: &Tensor, scale: f64, t_steps: u32) -> u64 {
    x.data
        .iter()
        .map(|&v| rate_count((v as f64 / scale).clamp(-1.0, 1.0), t_steps).unsigned_abs())
        .sum()
}

/// Maps accumulated counts back to the value domain. Under the strided
/// schedule each pairwise sum approximates count_q*count_k/T, so one factor
/// of T rescales counts to Q*K^T units: A/T * scale_q * scale_k.
pub fn decode_scores(scores: &AttentionScores) -> Tensor {
    let f = scores.scale_q * scores.scale_k / scores.t_steps as f64;
    Tensor {
        shape: vec![scores.m, scores.n],
        data: scores.accumulated.iter().map(|&a| (a as f64 * f) as f32).collect(),
    }
}

/// Count-based softmax substitute: shift each row by its (unmasked) minimum
/// and divide by the row sum. All-equal rows fall back to uniform. Masked
/// entries get probability zero.
pub fn snn_softmax_masked(scores: &AttentionScores, mask: Option<&[bool]>) -> Tensor {
    normalize_rows(&scores.accumulated, scores.m, scores.n, mask)
}

pub fn snn_softmax(scores: &AttentionScores) -> Tensor {
    snn_softmax_masked(scores, None)
}

/// Row normalization shared by the kernel and the model's attention path.
/// `mask`, when present, is m x n with `true` meaning the entry participates.
pub fn normalize_rows(counts: &[i64], m: usize, n: usize, mask: Option<&[bool]>) -> Tensor {
    let mut data = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &counts[i * n..(i + 1) * n];
        let active: Vec<usize> = (0..n)
            .filter(|&j| mask.map_or(true, |mk| mk[i * n + j]))
            .collect();
        if active.is_empty() {
            continue;
        }
        let min = active.iter().map(|&j| row[j]).min().unwrap();
        let sum: i64 = active.iter().map(|&j| row[j] - min).sum();
        if sum == 0 {
            let u = 1.0 / active.len() as f32;
            for &j in &active {
                data[i * n + j] = u;
            }
        } else {
            for &j in &active {
                data[i * n + j] = ((row[j] - min) as f64 / sum as f64) as f32;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data,
    }
}
