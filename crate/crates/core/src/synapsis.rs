//! Spike-driven linear layer: rate-encode the input, push ternary spikes
//! through the weight matrix with signed accumulation only (no multiplies in
//! the spike path), and divide the accumulated sum by T at the end.

use crate::error::{Error, Result};
use crate::neuron::{decode_rate, encode_rate, SpikeTrain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynapsisLayer {
    /// out x in.
    pub weight: Tensor,
    /// in x out copy of `weight` so per-spike column gathers are contiguous.
    weight_t: Vec<f32>,
    pub bias: Tensor,
    pub scaling_factor: f64,
    pub t_steps: u32,
}

impl SynapsisLayer {
    pub fn new(weight: Tensor, bias: Tensor, scaling_factor: f64, t_steps: u32) -> Result<Self> {
        if weight.shape.len() != 2 {
            return Err(Error::Dimension("synapsis weight must be 2-D".into()));
        }
        let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
        if bias.len() != out_dim {
            return Err(Error::Dimension("synapsis bias length mismatch".into()));
        }
        if scaling_factor <= 0.0 {
            return Err(Error::Argument("scaling_factor must be > 0".into()));
        }
        if t_steps == 0 {
            return Err(Error::Argument("T must be >= 1".into()));
        }
        let mut weight_t = vec![0.0f32; out_dim * in_dim];
        for i in 0..out_dim {
            for j in 0..in_dim {
                weight_t[j * out_dim + i] = weight.data[i * in_dim + j];
            }
        }
        Ok(SynapsisLayer {
            weight,
            weight_t,
            bias,
            scaling_factor,
            t_steps,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    /// Accumulate one step of ternary spikes into `acc` (add/sub only).
    fn accumulate_spikes(&self, spikes: &[i8], acc: &mut [f64]) {
        let out_dim = self.out_dim();
        for (j, &s) in spikes.iter().enumerate() {
            if s == 0 {
                continue;
            }
            let col = &self.weight_t[j * out_dim..(j + 1) * out_dim];
            if s > 0 {
                for (a, &w) in acc.iter_mut().zip(col) {
                    *a += w as f64;
                }
            } else {
                for (a, &w) in acc.iter_mut().zip(col) {
                    *a -= w as f64;
                }
            }
        }
    }

    /// H/T + b in the scaled input domain: W * (round(T*x/scale)/T) + b.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let train = self.encode_input(x)?;
        self.forward_from_train(&train)
    }

    /// Like `forward` but maps the spike sum back to the input's value
    /// domain: (scale/T) * H + b. This is the form conversion composes with
    /// a post-synaptic rate encoder.
    pub fn forward_dequant(&self, x: &Tensor) -> Result<Tensor> {
        let train = self.encode_input(x)?;
        self.forward_dequant_from_train(&train)
    }

    /// Value-domain output from an already-encoded train: (scale/T)*H + b.
    pub fn forward_dequant_from_train(&self, train: &SpikeTrain) -> Result<Tensor> {
        let acc = self.accumulate_train(train)?;
        let s = self.scaling_factor / self.t_steps as f64;
        let data = acc
            .iter()
            .zip(&self.bias.data)
            .map(|(&h, &b)| (s * h + b as f64) as f32)
            .collect();
        Tensor::new(vec![self.out_dim()], data)
    }

    pub fn encode_input(&self, x: &Tensor) -> Result<SpikeTrain> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "synapsis input {} vs in_dim {}",
                x.len(),
                self.in_dim()
            )));
        }
        let scaled = Tensor::new(
            x.shape.clone(),
            x.data
                .iter()
                .map(|&v| (v as f64 / self.scaling_factor) as f32)
                .collect(),
        )?;
        if scaled.max_abs() > 1.0 {
            return Err(Error::Argument(format!(
                "synapsis input exceeds scaling_factor {} (max |x_scaled| = {})",
                self.scaling_factor,
                scaled.max_abs()
            )));
        }
        encode_rate(&scaled, self.t_steps)
    }

    fn accumulate_train(&self, train: &SpikeTrain) -> Result<Vec<f64>> {
        let mut acc = vec![0.0f64; self.out_dim()];
        for t in 0..self.t_steps as usize {
            self.accumulate_spikes(train.spikes_at(t), &mut acc);
        }
        Ok(acc)
    }

    pub fn forward_from_train(&self, train: &SpikeTrain) -> Result<Tensor> {
        let acc = self.accumulate_train(train)?;
        let t = self.t_steps as f64;
        let data = acc
            .iter()
            .zip(&self.bias.data)
            .map(|(&h, &b)| (h / t + b as f64) as f32)
            .collect();
        Tensor::new(vec![self.out_dim()], data)
    }
}

/// Column-gather add/sub product of a weight matrix with one ternary spike
/// vector. Equals matmul(weight, spikes) exactly.
pub fn spike_matvec(weight: &Tensor, spikes: &[i8]) -> Result<Tensor> {
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    if spikes.len() != in_dim {
        return Err(Error::Dimension("spike_matvec length mismatch".into()));
    }
    let mut acc = vec![0.0f64; out_dim];
    for (j, &s) in spikes.iter().enumerate() {
        if s == 0 {
            continue;
        }
        for i in 0..out_dim {
            let w = weight.data[i * in_dim + j] as f64;
            if s > 0 {
                acc[i] += w;
            } else {
                acc[i] -= w;
            }
        }
    }
    Tensor::new(vec![out_dim], acc.iter().map(|&v| v as f32).collect())
}

/// Re-exported so callers can decode a train this layer produced.
pub fn decode_train(train: &SpikeTrain, t_steps: u32) -> Result<Tensor> {
    decode_rate(train, t_steps)
}
