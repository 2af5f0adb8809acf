//! EI_IF neuron dynamics and the deterministic rate-code encoder.
//!
//! The neuron integrates input current, fires a +1/-1 spike when the
//! membrane potential crosses an adaptive threshold theta(t) = theta_base
//! + t * alpha (equality fires), then attenuates the potential. With the
//! schedule theta_base = -1/(2T), alpha = 1/T and full attenuation, the
//! signed spike count over T steps on constant input x is exactly
//! sign(x) * min(T, floor(T*|x| + 1/2)), which is what ties rate coding to
//! the quantizer's levels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EiIfParams {
    pub theta_base: f64,
    /// Threshold growth per step; 0 disables adaptation.
    pub alpha: f64,
    /// Membrane attenuation in [0,1]; 1.0 resets the potential every step.
    pub attenuation_rate: f64,
}

impl EiIfParams {
    pub fn new(theta_base: f64, alpha: f64, attenuation_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&attenuation_rate) {
            return Err(Error::Argument(format!(
                "attenuation_rate {} outside [0,1]",
                attenuation_rate
            )));
        }
        if alpha < 0.0 {
            return Err(Error::Argument("alpha must be >= 0".into()));
        }
        Ok(EiIfParams {
            theta_base,
            alpha,
            attenuation_rate,
        })
    }

    /// Threshold schedule that makes the T-step spike count equal
    /// round(T * |x|) for constant |x| <= 1.
    pub fn rate_schedule(t_steps: u32) -> Self {
        let t = t_steps as f64;
        EiIfParams {
            theta_base: -1.0 / (2.0 * t),
            alpha: 1.0 / t,
            attenuation_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EiIfState {
    pub v: f64,
    pub t: u32,
}

impl Default for EiIfState {
    fn default() -> Self {
        EiIfState { v: 0.0, t: 0 }
    }
}

/// One EI_IF step: integrate, compare against theta(t), attenuate.
pub fn ei_if_step(
    params: &EiIfParams,
    state: &EiIfState,
    input_current: f64,
) -> Result<(i8, EiIfState)> {
    if !input_current.is_finite() {
        return Err(Error::Numeric("non-finite input current".into()));
    }
    let t = state.t + 1;
    let mut v = state.v + input_current;
    let theta = params.theta_base + t as f64 * params.alpha;
    let spike: i8 = if v >= theta {
        1
    } else if v <= -theta {
        -1
    } else {
        0
    };
    v *= 1.0 - params.attenuation_rate;
    Ok((spike, EiIfState { v, t }))
}

/// Signed T-step spike count of the rate encoder for one scalar.
/// Runs the step dynamics; no closed form is used here.
pub fn rate_count(x: f64, t_steps: u32) -> i64 {
    let params = EiIfParams::rate_schedule(t_steps);
    let mut state = EiIfState::default();
    let mut count = 0i64;
    for _ in 0..t_steps {
        let (s, next) = ei_if_step(&params, &state, x).expect("finite input");
        count += s as i64;
        state = next;
    }
    count
}

/// Per-timestep ternary spike records plus their accumulated signed counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    pub shape: Vec<usize>,
    pub t_steps: u32,
    /// T x n, row-major over steps.
    pub spikes: Vec<i8>,
    pub accumulated: Vec<i32>,
}

impl SpikeTrain {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn spikes_at(&self, step: usize) -> &[i8] {
        let n = self.elements();
        &self.spikes[step * n..(step + 1) * n]
    }

    /// Step index (1-based) of the first spike of element `idx`, if any.
    pub fn first_spike_step(&self, idx: usize) -> Option<u32> {
        let n = self.elements();
        (0..self.t_steps as usize).find(|&s| self.spikes[s * n + idx] != 0).map(|s| s as u32 + 1)
    }
}

/// Rate-codes a pre-scaled tensor (|x| <= 1 elementwise) over T steps.
pub fn encode_rate(x: &Tensor, t_steps: u32) -> Result<SpikeTrain> {
    if t_steps == 0 {
        return Err(Error::Argument("T must be >= 1".into()));
    }
    let n = x.len();
    let params = EiIfParams::rate_schedule(t_steps);
    let mut spikes = vec![0i8; t_steps as usize * n];
    let mut accumulated = vec![0i32; n];
    for (i, &xi) in x.data.iter().enumerate() {
        let xi = xi as f64;
        if xi.abs() > 1.0 {
            return Err(Error::Argument(format!(
                "encode_rate input {} exceeds |1|; scale first",
                xi
            )));
        }
        let mut state = EiIfState::default();
        for s in 0..t_steps as usize {
            let (sp, next) = ei_if_step(&params, &state, xi)?;
            spikes[s * n + i] = sp;
            accumulated[i] += sp as i32;
            state = next;
        }
    }
    Ok(SpikeTrain {
        shape: x.shape.clone(),
        t_steps,
        spikes,
        accumulated,
    })
}

/// Inverse of `encode_rate` at representable levels: accumulated / T.
pub fn decode_rate(train: &SpikeTrain, t_steps: u32) -> Result<Tensor> {
    if train.t_steps != t_steps {
        return Err(Error::Argument(format!(
            "decode_rate: train has T={}, asked for T={}",
            train.t_steps, t_steps
        )));
    }
    let data = train
        .accumulated
        .iter()
        .map(|&c| (c as f64 / t_steps as f64) as f32)
        .collect();
    Tensor::new(train.shape.clone(), data)
}
