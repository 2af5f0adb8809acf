//! STDP fine-tuning on a converted spiking model: loss-modulated pairwise
//! updates on Tag-gated synapses, with the composite-loss breakdown.

use spikeformer::approximators::{fit_default_banks, BankDefaults};
use spikeformer::attention::Schedule;
use spikeformer::conversion::convert;
use spikeformer::model::{calibrate, train_ann, Mode, Model, ModelConfig, TrainParams, VOCAB};
use spikeformer::plasticity::{stdp_finetune, CompositeLossWeights, StdpConfig, StdpParams};
use spikeformer::Rng;

fn main() -> spikeformer::Result<()> {
    let corpus = std::fs::read("crates/core/data/corpus.txt")
        .unwrap_or_else(|_| b"the cat sat on the mat. ".repeat(500));
    let mut rng = Rng::new(5);

    let config = ModelConfig {
        vocab_size: VOCAB,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        bits: 4,
        t_steps: ModelConfig::tied_t(4),
        max_seq_len: 32,
        mode: Mode::Ann,
        eps: 1e-5,
        schedule: Schedule::Strided,
    };
    let mut ann = Model::init(config, 0.08, &mut rng.split(1))?;
    let params = TrainParams {
        lr: 0.08,
        momentum: 0.9,
        epochs: 2,
        batch: 4,
        steps_per_epoch: 40,
        seq_len: 16,
    };
    train_ann(&mut ann, &corpus, &params, &mut rng.split(2))?;
    calibrate(&mut ann, &corpus, 4, 16, &mut rng.split(3))?;
    let banks = fit_default_banks(&BankDefaults::default(), &mut rng.split(4))?;
    let (snn_c, _) = convert(&ann.to_container()?, banks)?;
    let mut model = Model::from_container(&snn_c)?;

    let t = model.config.t_steps as f64;
    let cfg = StdpConfig {
        params: StdpParams::default(),
        beta_mod: 1.0,
        window: 32,
        eta_w: 1e-3,
        eta_theta: 1e-3,
        eta_alpha: 1e-3,
        eta_r: 1e-3,
        eta_grad: 0.0,
        weights: CompositeLossWeights::default(),
        lambda_scale: 1.0,
        s_target: 0.2 * t,
        v_target: 0.0,
        v_rest: 0.0,
        t_target: t / 2.0,
        ema: 0.99,
        homeostatic_sign_flip: false,
        steps: 30,
        seq_len: 16,
    };
    let report = stdp_finetune(&mut model, &corpus, &cfg, &mut rng.split(5))?;
    for m in report.metrics.iter().step_by(5) {
        println!(
            "step {:3}: L_task {:.4} | G {:.3} | baseline {:.4} | pairs updated {:5} | composite {:.2}",
            m.step, m.l_task, m.g, m.baseline, m.updated_pairs, m.breakdown.total
        );
    }
    println!(
        "loss EMA {:.4} -> {:.4} (stability gate {})",
        report.initial_loss_ema,
        report.final_loss_ema,
        if report.stable { "pass" } else { "FAIL" }
    );
    Ok(())
}
