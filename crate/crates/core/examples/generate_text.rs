//! Train the byte-level toy model briefly and decode greedily in both
//! modes; spiking generation also reports its total spike count.

use spikeformer::approximators::{fit_default_banks, BankDefaults};
use spikeformer::attention::Schedule;
use spikeformer::conversion::convert;
use spikeformer::model::{calibrate, generate, train_ann, Mode, Model, ModelConfig, TrainParams, VOCAB};
use spikeformer::Rng;

fn main() -> spikeformer::Result<()> {
    let corpus = std::fs::read("crates/core/data/corpus.txt")
        .unwrap_or_else(|_| b"the cat sat on the mat. ".repeat(500));
    let mut rng = Rng::new(11);

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
    let mut model = Model::init(config, 0.08, &mut rng.split(1))?;
    let params = TrainParams {
        lr: 0.05,
        momentum: 0.9,
        epochs: 3,
        batch: 8,
        steps_per_epoch: 40,
        seq_len: 24,
    };
    let report = train_ann(&mut model, &corpus, &params, &mut rng.split(2))?;
    println!("trained: loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
    calibrate(&mut model, &corpus, 8, 24, &mut rng.split(3))?;

    let prompt = b"the cat ";
    let out = generate(&model, prompt, 32, 0.0, &mut rng.split(4))?;
    println!(
        "ann greedy: {:?} ({:.0} tok/s)",
        String::from_utf8_lossy(&out.text_bytes),
        out.tokens_per_sec
    );

    let banks = fit_default_banks(&BankDefaults::default(), &mut rng.split(5))?;
    let (snn_c, _) = convert(&model.to_container()?, banks)?;
    let snn = Model::from_container(&snn_c)?;
    let out = generate(&snn, prompt, 32, 0.0, &mut rng.split(6))?;
    println!(
        "snn greedy: {:?} ({:.0} tok/s, {} spikes)",
        String::from_utf8_lossy(&out.text_bytes),
        out.tokens_per_sec,
        out.total_spikes.unwrap_or(0)
    );
    Ok(())
}
