//! CustomNeuron approximator banks for square, sqrt and SiLU, plus the
//! spike-domain RMSNorm they compose into.

use spikeformer::approximators::{
    approx_eval, exact_rmsnorm, fit_default_banks, snn_rmsnorm, BankDefaults,
};
use spikeformer::tensor::rand_uniform;
use spikeformer::{Rng, Tensor};

fn main() -> spikeformer::Result<()> {
    let mut rng = Rng::new(7);
    let banks = fit_default_banks(&BankDefaults::default(), &mut rng)?;
    println!("bank fit MSE: square {:.2e}, sqrt (weighted) {:.2e}", banks.square.final_mse, banks.sqrt.final_mse);

    println!("x^2 on [0,4] via spiking segments:");
    for &x in &[0.1, 0.5, 1.0, 2.0, 3.7] {
        let y = approx_eval(&banks.square, x);
        println!("  x = {:.2}: approx {:.4}, exact {:.4}", x, y, x * x);
    }

    println!("sqrt on [1e-3,16]:");
    for &x in &[0.01, 0.1, 1.0, 4.0, 15.0] {
        let y = approx_eval(&banks.sqrt, x);
        println!("  x = {:5.2}: approx {:.4}, exact {:.4} (rel {:.2}%)", x, y, x.sqrt(), 100.0 * (y - x.sqrt()).abs() / x.sqrt());
    }

    println!("SiLU with its hard zero tail below -6 and linear tail above 8:");
    for &x in &[-8.0, -3.0, -0.5, 0.5, 4.0, 10.0] {
        let y = banks.silu.eval(x);
        let exact = x / (1.0 + (-x).exp());
        println!("  x = {:+5.1}: approx {:+.4}, exact {:+.4}", x, y, exact);
    }

    // RMSNorm from the square and sqrt banks.
    let w = Tensor::new(vec![8], vec![1.0; 8])?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = rand_uniform(&mut rng, &[8], -1.0, 1.0)?;
        let approx = snn_rmsnorm(&x, &w, 1e-5, &banks.square, &banks.sqrt)?;
        let exact = exact_rmsnorm(&x, &w, 1e-5)?;
        for (a, e) in approx.data.iter().zip(&exact.data) {
            if e.abs() > 1e-3 {
                worst = worst.max(((a - e) / e).abs() as f64);
            }
        }
    }
    println!("snn_rmsnorm worst relative error over 20 vectors: {:.2}%", 100.0 * worst);
    Ok(())
}
