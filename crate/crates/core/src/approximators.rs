//! CustomNeuron function approximators: per-segment spiking units fitted to
//! square, sqrt and SiLU targets, plus the RMS normalization built on them.
//!
//! Each segment owns one neuron (two for the curved SiLU region) whose
//! accumulated, amplitude-weighted spike count over T_n steps approximates
//! the target on that segment. Fitting is derivative-free: a refined grid
//! search over threshold, threshold growth and membrane decay, with the
//! amplitude solved in closed form by least squares. Membrane decay is what
//! buys affine (non-through-origin) responses, so it is part of the search
//! space.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CustomNeuronParams {
    pub amplitude_pos: f64,
    pub amplitude_neg: f64,
    pub theta_base: f64,
    pub alpha: f64,
    /// Membrane decay factor in (0, 1]; 1 keeps the potential, smaller
    /// values leak it and shift the response off the origin.
    pub decay: f64,
    pub steps: u32,
}

impl CustomNeuronParams {
    pub fn zero(steps: u32) -> Self {
        CustomNeuronParams {
            amplitude_pos: 0.0,
            amplitude_neg: 0.0,
            theta_base: 1.0,
            alpha: 0.0,
            decay: 1.0,
            steps,
        }
    }
}

/// Positive/negative spike counts over the neuron's window for constant
/// input x. Subtract-threshold reset on both branches.
fn run_counts(theta_base: f64, alpha: f64, decay: f64, steps: u32, x: f64) -> (u32, u32) {
    let mut v = 0.0f64;
    let (mut pos, mut neg) = (0u32, 0u32);
    for t in 1..=steps {
        v = v * decay + x;
        let theta = theta_base + alpha * t as f64;
        if v >= theta {
            pos += 1;
            v -= theta;
        } else if v <= -theta {
            neg += 1;
            v += theta;
        }
    }
    (pos, neg)
}

/// Amplitude-weighted accumulated spike output for constant input x.
pub fn custom_neuron_run(params: &CustomNeuronParams, x: f64) -> f64 {
    let (pos, neg) = run_counts(
        params.theta_base,
        params.alpha,
        params.decay,
        params.steps,
        x,
    );
    params.amplitude_pos * pos as f64 + params.amplitude_neg * neg as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BankKind {
    Square,
    Sqrt,
    SiluPos,
    SiluNeg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Partition {
    /// x_i = lo + (hi-lo) * (i/N)^p.
    Power { p: f64 },
    /// x_i = lo * (hi/lo)^(i/N); requires lo > 0.
    Logarithmic,
    /// Uniform spacing.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximatorBank {
    pub kind: BankKind,
    /// N+1 strictly increasing segment edges.
    pub bounds: Vec<f64>,
    /// One entry per segment; the curved SiLU segment carries two summed
    /// neurons, everything else one.
    pub segments: Vec<Vec<CustomNeuronParams>>,
    pub final_mse: f64,
}

pub fn target_eval(kind: BankKind, x: f64) -> f64 {
    match kind {
        BankKind::Square => x * x,
        BankKind::Sqrt => x.max(0.0).sqrt(),
        BankKind::SiluPos | BankKind::SiluNeg => x / (1.0 + (-x).exp()),
    }
}

fn partition_edges(lo: f64, hi: f64, n: usize, partition: Partition) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::Argument("degenerate interval".into()));
    }
    let mut edges = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let f = i as f64 / n as f64;
        let x = match partition {
            Partition::Power { p } => lo + (hi - lo) * f.powf(p),
            Partition::Uniform => lo + (hi - lo) * f,
            Partition::Logarithmic => {
                if lo <= 0.0 {
                    return Err(Error::Argument("logarithmic partition needs lo > 0".into()));
                }
                lo * (hi / lo).powf(f)
            }
        };
        edges.push(x);
    }
    Ok(edges)
}

struct FitSample {
    x: f64,
    target: f64,
    weight: f64,
}

/// Least-squares amplitude for one count profile under the sample weights.
fn solve_amplitude(counts: &[f64], samples: &[FitSample]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, s) in counts.iter().zip(samples) {
        num += s.weight * c * s.target;
        den += s.weight * c * c;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn weighted_mse(counts: &[f64], amp: f64, samples: &[FitSample]) -> f64 {
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for (c, s) in counts.iter().zip(samples) {
        let e = amp * c - s.target;
        acc += s.weight * e * e;
        wsum += s.weight;
    }
    acc / wsum.max(1e-300)
}

/// Fit a single neuron to `samples` (already reduced to residual targets if
/// this is a second neuron). Returns the fitted neuron and its weighted MSE.
fn fit_neuron(samples: &[FitSample], steps: u32, negative_input: bool) -> (CustomNeuronParams, f64) {
    let xmax = samples
        .iter()
        .map(|s| s.x.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut best = (CustomNeuronParams::zero(steps), f64::INFINITY);
    // theta relative to the segment's input magnitude; alpha relative to
    // theta; decay from none to strong leak.
    let mut theta_grid: Vec<f64> = (0..14)
        .map(|i| xmax * (1.0 / (2.0 * steps as f64)) * (8.0 * steps as f64).powf(i as f64 / 13.0))
        .collect();
    let mut alpha_grid: Vec<f64> = vec![0.0, 0.02, 0.05, 0.1, 0.2, 0.5];
    let mut decay_grid: Vec<f64> = vec![1.0, 0.999, 0.995, 0.99, 0.97, 0.94, 0.9, 0.8, 0.6];
    for _level in 0..3 {
        for &theta in &theta_grid {
            if theta <= 0.0 {
                continue;
            }
            for &ar in &alpha_grid {
                let alpha = ar * theta;
                for &decay in &decay_grid {
                    if !(0.0 < decay && decay <= 1.0) {
                        continue;
                    }
                    let counts: Vec<f64> = samples
                        .iter()
                        .map(|s| {
                            let (p, n) = run_counts(theta, alpha, decay, steps, s.x);
                            if negative_input {
                                n as f64
                            } else {
                                p as f64
                            }
                        })
                        .collect();
                    let amp = solve_amplitude(&counts, samples);
                    let mse = weighted_mse(&counts, amp, samples);
                    if mse < best.1 {
                        let mut p = CustomNeuronParams::zero(steps);
                        p.theta_base = theta;
                        p.alpha = alpha;
                        p.decay = decay;
                        if negative_input {
                            p.amplitude_neg = amp;
                        } else {
                            p.amplitude_pos = amp;
                        }
                        best = (p, mse);
                    }
                }
            }
        }
        // Refine around the incumbent.
        let b = best.0;
        let t0 = b.theta_base.max(1e-12);
        theta_grid = (-4..=4).map(|i| t0 * 1.35f64.powi(i)).collect();
        let a0 = if t0 > 0.0 { b.alpha / t0 } else { 0.0 };
        alpha_grid = (-3..=3)
            .map(|i| (a0 + i as f64 * 0.02).max(0.0))
            .collect();
        let d0 = b.decay;
        decay_grid = (-4..=4)
            .map(|i| (d0 + i as f64 * (1.0 - d0).max(0.01) * 0.25).clamp(0.05, 1.0))
            .collect();
    }
    best
}

fn eval_segment(neurons: &[CustomNeuronParams], x: f64) -> f64 {
    neurons.iter().map(|n| custom_neuron_run(n, x)).sum()
}

/// Fit a bank of per-segment neurons to the named target.
///
/// `mse_ceiling`, when finite, turns a bad fit into an error instead of a
/// silently degraded bank. The rng only jitters sample placement so repeated
/// fits with one seed are identical.
#[allow(clippy::too_many_arguments)]
pub fn fit_bank(
    kind: BankKind,
    interval: (f64, f64),
    n_segments: usize,
    partition: Partition,
    sample_count: usize,
    steps: u32,
    mse_ceiling: f64,
    rng: &mut Rng,
) -> Result<ApproximatorBank> {
    if n_segments == 0 {
        return Err(Error::Argument("need at least one segment".into()));
    }
    let bounds = partition_edges(interval.0, interval.1, n_segments, partition)?;
    let per_seg = (sample_count / n_segments).max(8);
    let negative_input = matches!(kind, BankKind::SiluNeg);
    let two_neurons = matches!(kind, BankKind::SiluPos);
    let relative = matches!(kind, BankKind::Sqrt);
    let mut segments = Vec::with_capacity(n_segments);
    let mut sse = 0.0;
    let mut total = 0usize;
    for seg in 0..n_segments {
        let (x0, x1) = (bounds[seg], bounds[seg + 1]);
        let mut samples: Vec<FitSample> = (0..per_seg)
            .map(|i| {
                let jitter = (rng.next_f64() - 0.5) / per_seg as f64;
                let f = ((i as f64 + 0.5) / per_seg as f64 + jitter).clamp(0.0, 1.0);
                let x = x0 + (x1 - x0) * f;
                let target = target_eval(kind, x);
                let weight = if relative {
                    1.0 / target.max(1e-6).powi(2)
                } else {
                    1.0
                };
                FitSample { x, target, weight }
            })
            .collect();
        let (first, _) = fit_neuron(&samples, steps, negative_input);
        let mut neurons = vec![first];
        if two_neurons && seg == 0 {
            // Curved region: second neuron fits the residual.
            for s in samples.iter_mut() {
                s.target -= custom_neuron_run(&neurons[0], s.x);
            }
            let (second, _) = fit_neuron(&samples, steps, negative_input);
            neurons.push(second);
            for s in samples.iter_mut() {
                s.target += custom_neuron_run(&neurons[0], s.x);
            }
        }
        for s in &samples {
            let e = eval_segment(&neurons, s.x) - s.target;
            sse += e * e;
        }
        total += samples.len();
        segments.push(neurons);
    }
    let final_mse = sse / total as f64;
    let bank = ApproximatorBank {
        kind,
        bounds,
        segments,
        final_mse,
    };
    if final_mse > mse_ceiling {
        return Err(Error::Fit(format!(
            "{:?} bank MSE {:.3e} exceeds ceiling {:.3e} (N={}, T_n={})",
            kind, final_mse, mse_ceiling, n_segments, steps
        )));
    }
    Ok(bank)
}

/// Route x to its segment's neuron(s); out-of-range inputs clamp to the
/// nearest segment edge. Segments are half-open [x_{i-1}, x_i), the last
/// closed.
pub fn approx_eval(bank: &ApproximatorBank, x: f64) -> f64 {
    let lo = bank.bounds[0];
    let hi = *bank.bounds.last().unwrap();
    let x = x.clamp(lo, hi);
    let n = bank.segments.len();
    let mut seg = match bank
        .bounds
        .binary_search_by(|b| b.partial_cmp(&x).unwrap())
    {
        Ok(i) => i,
        Err(i) => i.saturating_sub(1),
    };
    if seg >= n {
        seg = n - 1;
    }
    eval_segment(&bank.segments[seg], x)
}

/// Piecewise SiLU: negative bank on [-6, 0), exactly zero below -6,
/// positive bank on [0, 8] with a linear continuation beyond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiluApprox {
    pub pos: ApproximatorBank,
    pub neg: ApproximatorBank,
    tail_value: f64,
    tail_slope: f64,
}

impl SiluApprox {
    pub fn new(pos: ApproximatorBank, neg: ApproximatorBank) -> Self {
        let hi = *pos.bounds.last().unwrap();
        let tail_value = approx_eval(&pos, hi);
        // The bank output is piecewise constant (quantized spike counts), so
        // a narrow secant through it is meaningless; extend with the target's
        // analytic slope at the bound, anchored to the bank's value there.
        let sig = 1.0 / (1.0 + (-hi).exp());
        let tail_slope = sig + hi * sig * (1.0 - sig);
        SiluApprox {
            pos,
            neg,
            tail_value,
            tail_slope,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x < -6.0 {
            0.0
        } else if x < 0.0 {
            approx_eval(&self.neg, x)
        } else {
            let hi = *self.pos.bounds.last().unwrap();
            if x > hi {
                self.tail_value + self.tail_slope * (x - hi)
            } else {
                approx_eval(&self.pos, x)
            }
        }
    }
}

pub fn silu_approx(pos: &ApproximatorBank, neg: &ApproximatorBank, x: f64) -> f64 {
    // Convenience wrapper over the composed form.
    SiluApprox::new(pos.clone(), neg.clone()).eval(x)
}

/// RMS normalization with bank-approximated square and sqrt. Falls back to
/// the exact sqrt (with a warning on stderr) if the approximated root is
/// not positive.
pub fn snn_rmsnorm(
    x: &Tensor,
    w: &Tensor,
    eps: f64,
    square_bank: &ApproximatorBank,
    sqrt_bank: &ApproximatorBank,
) -> Result<Tensor> {
    if x.len() != w.len() || x.is_empty() {
        return Err(Error::Dimension("snn_rmsnorm shapes".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Argument("eps must be > 0".into()));
    }
    let n = x.len() as f64;
    let mut mean = 0.0f64;
    for &xi in &x.data {
        // The square bank is fitted on nonnegative inputs; squaring is even.
        mean += approx_eval(square_bank, (xi as f64).abs());
    }
    mean /= n;
    let mut root = approx_eval(sqrt_bank, mean + eps);
    if root <= 0.0 {
        eprintln!(
            "snn_rmsnorm: approximated root {} not positive, using exact sqrt",
            root
        );
        root = (mean + eps).sqrt();
    }
    let data = x
        .data
        .iter()
        .zip(&w.data)
        .map(|(&xi, &wi)| ((xi as f64 / root) * wi as f64) as f32)
        .collect();
    Tensor::new(x.shape.clone(), data)
}

/// Exact RMSNorm, used as the ANN-mode path and the oracle in tests.
pub fn exact_rmsnorm(x: &Tensor, w: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.len() as f64;
    let mean: f64 = x.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n;
    let root = (mean + eps).sqrt();
    let data = x
        .data
        .iter()
        .zip(&w.data)
        .map(|(&xi, &wi)| ((xi as f64 / root) * wi as f64) as f32)
        .collect();
    Tensor::new(x.shape.clone(), data)
}

/// Default bank geometry used by the fit command and conversion.
pub struct BankDefaults {
    pub square_interval: (f64, f64),
    pub square_segments: usize,
    pub square_power: f64,
    pub sqrt_interval: (f64, f64),
    pub sqrt_segments: usize,
    pub silu_pos_hi: f64,
    pub steps: u32,
    pub square_mse_ceiling: f64,
    pub sqrt_mse_ceiling: f64,
    pub silu_mse_ceiling: f64,
    pub sample_count: usize,
}

impl Default for BankDefaults {
    fn default() -> Self {
        BankDefaults {
            square_interval: (0.0, 4.0),
            square_segments: 32,
            square_power: 1.5,
            sqrt_interval: (1e-4, 16.0),
            sqrt_segments: 32,
            silu_pos_hi: 8.0,
            steps: 64,
            square_mse_ceiling: 1e-2,
            sqrt_mse_ceiling: 1e-2,
            silu_mse_ceiling: 1e-2,
            sample_count: 1024,
        }
    }
}

/// Fitted banks for everything the SNN-mode model needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSet {
    pub square: ApproximatorBank,
    pub sqrt: ApproximatorBank,
    pub silu: SiluApprox,
}

pub fn fit_default_banks(defaults: &BankDefaults, rng: &mut Rng) -> Result<BankSet> {
    let square = fit_bank(
        BankKind::Square,
        defaults.square_interval,
        defaults.square_segments,
        Partition::Power {
            p: defaults.square_power,
        },
        defaults.sample_count,
        defaults.steps,
        defaults.square_mse_ceiling,
        &mut rng.split(1),
    )?;
    let sqrt = fit_bank(
        BankKind::Sqrt,
        defaults.sqrt_interval,
        defaults.sqrt_segments,
        Partition::Logarithmic,
        defaults.sample_count,
        defaults.steps,
        defaults.sqrt_mse_ceiling,
        &mut rng.split(2),
    )?;
    // SiLU per its fixed breakpoints: [0,1) curved (two neurons), then the
    // near-linear stretch; negative side in three width-2 segments.
    let pos = {
        let bounds = vec![0.0, 1.0, defaults.silu_pos_hi];
        fit_fixed(
            BankKind::SiluPos,
            bounds,
            defaults.sample_count,
            defaults.steps,
            defaults.silu_mse_ceiling,
            &mut rng.split(3),
        )?
    };
    let neg = fit_fixed(
        BankKind::SiluNeg,
        vec![-6.0, -4.0, -2.0, 0.0],
        defaults.sample_count,
        defaults.steps,
        defaults.silu_mse_ceiling,
        &mut rng.split(4),
    )?;
    Ok(BankSet {
        square,
        sqrt,
        silu: SiluApprox::new(pos, neg),
    })
}

/// Fit with explicit segment edges (the SiLU breakpoints are fixed).
pub fn fit_fixed(
    kind: BankKind,
    bounds: Vec<f64>,
    sample_count: usize,
    steps: u32,
    mse_ceiling: f64,
    rng: &mut Rng,
) -> Result<ApproximatorBank> {
    if bounds.len() < 2 || bounds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("bounds must be strictly increasing".into()));
    }
    let n = bounds.len() - 1;
    let per_seg = (sample_count / n).max(8);
    let negative_input = matches!(kind, BankKind::SiluNeg);
    let two_neurons = matches!(kind, BankKind::SiluPos);
    let mut segments = Vec::with_capacity(n);
    let mut sse = 0.0;
    let mut total = 0usize;
    for seg in 0..n {
        let (x0, x1) = (bounds[seg], bounds[seg + 1]);
        let mut samples: Vec<FitSample> = (0..per_seg)
            .map(|i| {
                let jitter = (rng.next_f64() - 0.5) / per_seg as f64;
                let f = ((i as f64 + 0.5) / per_seg as f64 + jitter).clamp(0.0, 1.0);
                let x = x0 + (x1 - x0) * f;
                FitSample {
                    x,
                    target: target_eval(kind, x),
                    weight: 1.0,
                }
            })
            .collect();
        let (first, _) = fit_neuron(&samples, steps, negative_input);
        let mut neurons = vec![first];
        if two_neurons && seg == 0 {
            for s in samples.iter_mut() {
                s.target -= custom_neuron_run(&neurons[0], s.x);
            }
            let (second, _) = fit_neuron(&samples, steps, negative_input);
            neurons.push(second);
            for s in samples.iter_mut() {
                s.target += custom_neuron_run(&neurons[0], s.x);
            }
        }
        for s in &samples {
            let e = eval_segment(&neurons, s.x) - s.target;
            sse += e * e;
        }
        total += samples.len();
        segments.push(neurons);
    }
    let final_mse = sse / total as f64;
    let bank = ApproximatorBank {
        kind,
        bounds,
        segments,
        final_mse,
    };
    if final_mse > mse_ceiling {
        return Err(Error::Fit(format!(
            "{:?} bank MSE {:.3e} exceeds ceiling {:.3e}",
            kind, final_mse, mse_ceiling
        )));
    }
    Ok(bank)
}
