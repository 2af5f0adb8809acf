//! The full pipeline in memory: quantized ANN training with STE, frozen
//! scale calibration, conversion to a spiking checkpoint, and the
//! equivalence audit over the two.

use spikeformer::approximators::{fit_default_banks, BankDefaults};
use spikeformer::attention::Schedule;
use spikeformer::conversion::{audit_equivalence, convert};
use spikeformer::model::{calibrate, train_ann, Mode, Model, ModelConfig, TrainParams, VOCAB};
use spikeformer::Rng;

fn main() -> spikeformer::Result<()> {
    let corpus = std::fs::read("crates/core/data/corpus.txt")
        .unwrap_or_else(|_| b"the cat sat on the mat. ".repeat(500));

    let config = ModelConfig {
        vocab_size: VOCAB,
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        bits: 4,
        t_steps: ModelConfig::tied_t(4),
        max_seq_len: 32,
        mode: Mode::Ann,
        eps: 1e-5,
        schedule: Schedule::Strided,
    };
    let mut rng = Rng::new(1);
    let mut model = Model::init(config, 0.08, &mut rng.split(1))?;

    let params = TrainParams {
        lr: 0.05,
        momentum: 0.9,
        epochs: 2,
        batch: 8,
        steps_per_epoch: 40,
        seq_len: 24,
    };
    let report = train_ann(&mut model, &corpus, &params, &mut rng.split(2))?;
    println!("ANN training: loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);

    calibrate(&mut model, &corpus, 8, 24, &mut rng.split(3))?;
    let ann = model.to_container()?;

    let banks = fit_default_banks(&BankDefaults::default(), &mut rng.split(4))?;
    let (snn, summary) = convert(&ann, banks)?;
    println!("converted: {} sites, bits {}, T {}", summary.sites_replaced, summary.bits, summary.t_steps);

    let audit = audit_equivalence(&ann, &snn, &corpus[..200])?;
    println!("audit over {} tokens:", audit.tokens);
    for site in audit.sites.iter().take(6) {
        println!(
            "  {:12} [{:9}] max gap {:.6}{}",
            site.name,
            site.kind,
            site.max_abs_gap,
            match site.bound {
                Some(b) => format!(" (bound {:.4}, pass {})", b, site.pass),
                None => String::new(),
            }
        );
    }
    println!("  ...");
    println!(
        "linear gate {} | argmax agreement {:.3} | total spikes {}",
        if audit.linear_gate_pass { "pass" } else { "FAIL" },
        audit.argmax_agreement,
        audit.total_spikes
    );
    Ok(())
}
