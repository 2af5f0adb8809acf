//! Bit-width quantizer, quantized synapse forward, and the straight-through
//! gradient rule used while training the ANN surrogate.
//!
//! Scale convention: s = max|x| / (2^(b-1) - 1), rounding is half-away-from-
//! zero (this preserves odd symmetry), and an all-zero tensor gets s = 1.
//! The backward pass is a clipped STE: gradients pass unchanged where the
//! pre-clip level lands inside the clip range and are zeroed outside.

use crate::error::{Error, Result};
use crate::tensor::{Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub mode: QuantMode,
    pub clip_lo: i64,
    pub clip_hi: i64,
}

impl QuantSpec {
    pub fn symmetric(bits: u32) -> Result<Self> {
        if bits < 2 {
            return Err(Error::QuantSpec(format!("bit width {} < 2", bits)));
        }
        Ok(QuantSpec {
            bits,
            mode: QuantMode::Symmetric,
            clip_lo: -(1i64 << (bits - 1)),
            clip_hi: (1i64 << (bits - 1)) - 1,
        })
    }

    pub fn asymmetric(bits: u32) -> Result<Self> {
        let mut s = Self::symmetric(bits)?;
        s.mode = QuantMode::Asymmetric;
        Ok(s)
    }

    /// Number of positive levels, 2^(b-1)-1. Doubles as the matched SNN
    /// step count T.
    pub fn positive_levels(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    pub values: Tensor,
    pub levels: Vec<i64>,
    pub scale: f64,
    pub zero_point: i64,
}

fn round_half_away(v: f64) -> f64 {
    // f64::round already rounds half away from zero.
    v.round()
}

/// Scale a calibrated max-abs down to the per-level step for `spec`.
pub fn scale_for(max_abs: f64, spec: &QuantSpec) -> f64 {
    if max_abs <= 0.0 {
        1.0
    } else {
        max_abs / spec.positive_levels() as f64
    }
}

/// Quantize one scalar to its integer level given a frozen scale.
pub fn quantize_level(x: f64, scale: f64, spec: &QuantSpec) -> i64 {
    let lev = round_half_away(x / scale) as i64;
    lev.clamp(spec.clip_lo, spec.clip_hi)
}

/// Quantize with a frozen scale (calibration-time scales stay fixed for
/// inference and conversion).
pub fn quantize_with_scale(x: &Tensor, spec: &QuantSpec, scale: f64) -> Result<QuantResult> {
    if x.is_empty() {
        return Err(Error::Argument("quantize: empty tensor".into()));
    }
    let zero_point = match spec.mode {
        QuantMode::Symmetric => 0,
        QuantMode::Asymmetric => {
            let min = x.data.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            round_half_away(-min / scale) as i64
        }
    };
    let mut levels = Vec::with_capacity(x.len());
    let mut values = Vec::with_capacity(x.len());
    for &xi in &x.data {
        let lev = (round_half_away(xi as f64 / scale) as i64 + zero_point)
            .clamp(spec.clip_lo, spec.clip_hi);
        levels.push(lev);
        values.push((scale * (lev - zero_point) as f64) as f32);
    }
    Ok(QuantResult {
        values: Tensor::new(x.shape.clone(), values)?,
        levels,
        scale,
        zero_point,
    })
}

/// Quantize with the per-tensor scale derived from max|x|.
pub fn quantize(x: &Tensor, spec: &QuantSpec) -> Result<QuantResult> {
    let scale = scale_for(x.max_abs() as f64, spec);
    quantize_with_scale(x, spec, scale)
}

/// Clipped straight-through estimator: upstream gradient passes where the
/// pre-clip level is inside the clip range, zero elsewhere.
pub fn ste_grad(upstream: &Tensor, x: &Tensor, spec: &QuantSpec, scale: f64) -> Result<Tensor> {
    if upstream.shape != x.shape {
        return Err(Error::Dimension("ste_grad: shape mismatch".into()));
    }
    let data = upstream
        .data
        .iter()
        .zip(&x.data)
        .map(|(&g, &xi)| {
            let lev = round_half_away(xi as f64 / scale) as i64;
            if lev >= spec.clip_lo && lev <= spec.clip_hi {
                g
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(x.shape.clone(), data)
}

/// Q_post(W * Q_pre(x) + b). The linear map runs on integer pre-levels and
/// dequantizes once after the accumulation, which is what the SNN side
/// reproduces spike-by-spike. Returns the output plus the post scale.
pub fn qsynapsis_forward(
    weight: &Tensor,
    bias: &Tensor,
    spec: &QuantSpec,
    s_pre: f64,
    s_post: f64,
    x: &Tensor,
) -> Result<(Tensor, Vec<i64>)> {
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    if x.len() != in_dim || bias.len() != out_dim {
        return Err(Error::Dimension(format!(
            "qsynapsis: W {}x{}, x {}, b {}",
            out_dim,
            in_dim,
            x.len(),
            bias.len()
        )));
    }
    let pre = quantize_with_scale(x, spec, s_pre)?;
    let mut out = Vec::with_capacity(out_dim);
    let mut levels_post = Vec::with_capacity(out_dim);
    for i in 0..out_dim {
        let mut acc = 0.0f64;
        for j in 0..in_dim {
            acc += weight.data[i * in_dim + j] as f64 * pre.levels[j] as f64;
        }
        let y = s_pre * acc + bias.data[i] as f64;
        let lev = quantize_level(y, s_post, spec);
        levels_post.push(lev);
        out.push((s_post * lev as f64) as f32);
    }
    Ok((Tensor::new(vec![out_dim], out)?, levels_post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, rand_uniform, Rng};
    use proptest::prelude::*;

    #[test]
    fn hand_case_b3() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 0.25]).unwrap();
        let spec = QuantSpec::symmetric(3).unwrap();
        let q = quantize(&x, &spec).unwrap();
        assert!((q.scale - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(q.levels, vec![2, -3, 1]);
        assert!((q.values.data[0] - 2.0 / 3.0).abs() < 1e-7);
        assert_eq!(q.values.data[1], -1.0);
        assert!((q.values.data[2] - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn all_zero_degenerate_scale() {
        let x = Tensor::zeros(&[4]);
        let q = quantize(&x, &QuantSpec::symmetric(4).unwrap()).unwrap();
        assert_eq!(q.scale, 1.0);
        assert!(q.levels.iter().all(|&l| l == 0));
        assert!(q.values.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_element_exact() {
        for bits in [3u32, 4, 8] {
            let spec = QuantSpec::symmetric(bits).unwrap();
            let x = Tensor::new(vec![2], vec![0.875, 0.1]).unwrap();
            let q = quantize(&x, &spec).unwrap();
            assert_eq!(q.levels[0], spec.positive_levels());
            assert!((q.values.data[0] - 0.875).abs() < 1e-7);
        }
    }

    #[test]
    fn bad_bit_width() {
        assert!(QuantSpec::symmetric(1).is_err());
    }

    #[test]
    fn ste_passes_in_range_zeroes_outside() {
        let spec = QuantSpec::symmetric(4).unwrap();
        let x = Tensor::new(vec![2], vec![0.5, 100.0]).unwrap();
        let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let out = ste_grad(&g, &x, &spec, 0.1).unwrap();
        assert_eq!(out.data, vec![1.0, 0.0]);
    }

    #[test]
    fn qsynapsis_identity_at_levels() {
        let spec = QuantSpec::symmetric(8).unwrap();
        let n = 4;
        let w = Tensor::eye(n);
        let b = Tensor::zeros(&[n]);
        let s = 1.0 / spec.positive_levels() as f64;
        // Inputs already on the level grid pass through unchanged.
        let x = Tensor::new(
            vec![n],
            (0..n).map(|i| (s * (i as f64 * 10.0)) as f32).collect(),
        )
        .unwrap();
        let (z, _) = qsynapsis_forward(&w, &b, &spec, s, s, &x).unwrap();
        for (a, b) in z.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn qsynapsis_zero_weights_give_quantized_bias() {
        let spec = QuantSpec::symmetric(4).unwrap();
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::new(vec![2], vec![0.4, -0.2]).unwrap();
        let x = Tensor::new(vec![3], vec![0.1, 0.5, -0.3]).unwrap();
        let (z, _) = qsynapsis_forward(&w, &b, &spec, 0.1, 0.1, &x).unwrap();
        let expect = quantize_with_scale(&b, &spec, 0.1).unwrap();
        assert_eq!(z.data, expect.values.data);
    }

    #[test]
    fn qsynapsis_matches_composition_oracle() {
        let spec = QuantSpec::symmetric(6).unwrap();
        let mut rng = Rng::new(42);
        let w = rand_uniform(&mut rng, &[4, 4], -0.5, 0.5).unwrap();
        let b = rand_uniform(&mut rng, &[4], -0.1, 0.1).unwrap();
        let x = rand_uniform(&mut rng, &[4], -1.0, 1.0).unwrap();
        let s_pre = scale_for(x.max_abs() as f64, &spec);
        let (z, _) = qsynapsis_forward(&w, &b, &spec, s_pre, 0.05, &x).unwrap();
        // Oracle: quantize -> dense matmul -> add bias -> quantize.
        let q = quantize_with_scale(&x, &spec, s_pre).unwrap();
        let col = Tensor::new(vec![4, 1], q.values.data.clone()).unwrap();
        let y = matmul(&w, &col).unwrap();
        let y = Tensor::new(
            vec![4],
            y.data.iter().zip(&b.data).map(|(a, c)| a + c).collect(),
        )
        .unwrap();
        let zq = quantize_with_scale(&y, &spec, 0.05).unwrap();
        for (a, b) in z.data.iter().zip(&zq.values.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn idempotent(xs in proptest::collection::vec(-1.0f32..1.0, 1..32), bits in 2u32..9) {
            let spec = QuantSpec::symmetric(bits).unwrap();
            let x = Tensor::new(vec![xs.len()], xs).unwrap();
            let q1 = quantize(&x, &spec).unwrap();
            let q2 = quantize_with_scale(&q1.values, &spec, q1.scale).unwrap();
            prop_assert_eq!(q1.values, q2.values);
        }

        #[test]
        fn bounded_error(xs in proptest::collection::vec(-1.0f32..1.0, 1..32), bits in 2u32..9) {
            let spec = QuantSpec::symmetric(bits).unwrap();
            let x = Tensor::new(vec![xs.len()], xs).unwrap();
            let q = quantize(&x, &spec).unwrap();
            for (a, b) in x.data.iter().zip(&q.values.data) {
                prop_assert!(((a - b).abs() as f64) <= q.scale / 2.0 + 1e-6);
            }
        }

        #[test]
        fn odd_symmetry(xs in proptest::collection::vec(-1.0f32..1.0, 1..32), bits in 2u32..9) {
            let spec = QuantSpec::symmetric(bits).unwrap();
            let x = Tensor::new(vec![xs.len()], xs.clone()).unwrap();
            let nx = x.map(|v| -v);
            let s = scale_for(x.max_abs() as f64, &spec);
            let q = quantize_with_scale(&x, &spec, s).unwrap();
            let nq = quantize_with_scale(&nx, &spec, s).unwrap();
            for (a, b) in q.levels.iter().zip(&nq.levels) {
                // The lone asymmetric clip level is -2^(b-1); inside the
                // symmetric range negation mirrors exactly.
                if *a < spec.clip_hi {
                    prop_assert_eq!(*a, -*b);
                }
            }
        }
    }
}
