//! EI_IF rate coding and its exact match with the symmetric quantizer:
//! at T = 2^(b-1) - 1 the signed spike count equals the quantizer level.

use spikeformer::neuron::{decode_rate, encode_rate, rate_count};
use spikeformer::quantization::{quantize_level, QuantSpec};
use spikeformer::{Rng, Tensor};

fn main() -> spikeformer::Result<()> {
    let mut rng = Rng::new(42);

    println!("signed spike counts over T = 8:");
    for &x in &[-1.0, -0.4, -0.05, 0.0, 0.3, 0.75, 1.0] {
        println!("  x = {:+.2} -> count {:+}", x, rate_count(x, 8));
    }

    // Encode a vector, decode it, and show the rounding error shrink with T.
    let x = Tensor::new(
        vec![5],
        vec![0.11, -0.62, 0.98, -0.07, 0.5],
    )?;
    for t in [4u32, 16, 64] {
        let train = encode_rate(&x, t)?;
        let back = decode_rate(&train, t)?;
        let err: f32 = x
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        println!("T = {:2}: max decode error {:.4} (bound 1/(2T) = {:.4})", t, err, 0.5 / t as f32);
    }

    // Quantizer correspondence: count == level for every scalar.
    for bits in [3u32, 4, 6, 8] {
        let spec = QuantSpec::symmetric(bits)?;
        let t = spec.positive_levels() as u32;
        let mut mismatches = 0u32;
        for _ in 0..10_000 {
            let x = 2.0 * rng.next_f64() - 1.0;
            if rate_count(x, t) != quantize_level(x, 1.0 / t as f64, &spec) {
                mismatches += 1;
            }
        }
        println!("bits = {} (T = {:3}): {} mismatches in 10k draws", bits, t, mismatches);
    }
    Ok(())
}
