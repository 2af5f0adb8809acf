//! Spike-product attention kernels: SNNMatmul error versus T, the exact
//! front-loaded min law, and the shift/normalize SNNSoftmax on spike counts.

use spikeformer::attention::{decode_scores, snn_matmul, snn_softmax_masked, Schedule};
use spikeformer::tensor::{matmul, rand_uniform};
use spikeformer::{Rng, Tensor};

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape[0], t.shape[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data[j * r + i] = t.data[i * c + j];
        }
    }
    out
}

fn main() -> spikeformer::Result<()> {
    let mut rng = Rng::new(9);
    let q = rand_uniform(&mut rng, &[4, 8], -1.0, 1.0)?;
    let k = rand_uniform(&mut rng, &[4, 8], -1.0, 1.0)?;
    let exact = matmul(&q, &transpose(&k))?;

    println!("decoded Q*K^T error by T (strided schedule):");
    for t in [8u32, 16, 32, 64, 128] {
        let scores = snn_matmul(&q, &k, t, 1.0, 1.0, Schedule::Strided)?;
        let dec = decode_scores(&scores);
        let err: f32 = exact
            .data
            .iter()
            .zip(&dec.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        println!("  T = {:3}: max error {:.4}", t, err);
    }

    // Front-loaded schedule realizes the scalar min law exactly: the spike
    // trains overlap on min(count_a, count_b) steps.
    let a = Tensor::new(vec![1, 1], vec![0.75])?;
    let b = Tensor::new(vec![1, 1], vec![0.5])?;
    let t = 8u32;
    let s = snn_matmul(&a, &b, t, 1.0, 1.0, Schedule::FrontLoaded)?;
    println!(
        "front-loaded scalar: decode {} == min(6,4)/T = {}",
        decode_scores(&s).data[0],
        4.0 / t as f32
    );

    // Count-domain softmax: row shift by the min count, divide by the sum.
    let scores = snn_matmul(&q, &k, 32, 1.0, 1.0, Schedule::Strided)?;
    let mut mask = vec![false; 16];
    for i in 0..4 {
        for j in 0..=i {
            mask[i * 4 + j] = true;
        }
    }
    let probs = snn_softmax_masked(&scores, Some(&mask));
    for i in 0..4 {
        let row: Vec<String> = (0..4).map(|j| format!("{:.3}", probs.data[i * 4 + j])).collect();
        let sum: f32 = (0..4).map(|j| probs.data[i * 4 + j]).sum();
        println!("  causal row {}: [{}] (sum {:.3})", i, row.join(", "), sum);
    }
    Ok(())
}
