//! Acceptance gate: one line per criterion, every tolerance pinned in this
//! file. Run with `cargo test --test acceptance -- --nocapture` to watch the
//! lines stream; the test fails if any criterion fails.

use spikeformer::approximators::{
    approx_eval, exact_rmsnorm, fit_default_banks, snn_rmsnorm, BankDefaults, BankSet,
};
use spikeformer::attention::{decode_scores, snn_matmul, Schedule};
use spikeformer::checkpoint::Container;
use spikeformer::conversion::{audit_equivalence, convert, validate_report_json};
use spikeformer::model::{
    calibrate, train_ann, Mode, Model, ModelConfig, TrainParams, VOCAB,
};
use spikeformer::neuron::{encode_rate, rate_count};
use spikeformer::plasticity::{
    composite_loss, expected_time_steps, stdp_finetune, CompositeLossWeights, FinetuneState,
    LossSnapshot, ModulationState, StdpConfig, StdpParams,
};
use spikeformer::quantization::{quantize_level, QuantSpec};
use spikeformer::synapsis::SynapsisLayer;
use spikeformer::tensor::{matmul, rand_uniform};
use spikeformer::{Rng, Tensor};
use std::time::Instant;

fn corpus() -> Vec<u8> {
    std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt")).unwrap()
}

fn banks() -> BankSet {
    fit_default_banks(&BankDefaults::default(), &mut Rng::new(77)).unwrap()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn toy_config(bits: u32, d_model: usize, d_ff: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB,
        d_model,
        n_heads: 2,
        n_layers: 2,
        d_ff,
        bits,
        t_steps: ModelConfig::tied_t(bits),
        max_seq_len,
        mode: Mode::Ann,
        eps: 1e-5,
        schedule: Schedule::Strided,
    }
}

/// Train, calibrate, convert, audit over the first 1000 corpus bytes.
fn pipeline_agreement(
    bits: u32,
    seed: u64,
    corpus: &[u8],
    banks: &BankSet,
) -> Result<f64, String> {
    let mut rng = Rng::new(seed);
    let mut m = Model::init(toy_config(bits, 16, 32, 32), 0.08, &mut rng.split(1)).unwrap();
    let p = TrainParams {
        lr: 0.05,
        momentum: 0.9,
        epochs: 2,
        batch: 8,
        steps_per_epoch: 150,
        seq_len: 32,
    };
    train_ann(&mut m, corpus, &p, &mut rng.split(2)).unwrap();
    calibrate(&mut m, corpus, 8, 32, &mut rng.split(3)).unwrap();
    let ann = m.to_container().unwrap();
    let (snn, _) = convert(&ann, banks.clone()).unwrap();
    let audit = audit_equivalence(&ann, &snn, &corpus[..1000]).unwrap();
    if !audit.linear_gate_pass {
        return Err(format!("linear gate failed at bits {} seed {}", bits, seed));
    }
    Ok(audit.argmax_agreement)
}

// Criterion 1: signed spike count equals quantizer level, zero tolerance,
// 1e5 scalars per bit width, under 10 seconds.
fn criterion_1() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    for bits in [3u32, 4, 6, 8] {
        let spec = QuantSpec::symmetric(bits).unwrap();
        let t = spec.positive_levels() as u32;
        let scale = 1.0 / t as f64;
        for i in 0..100_000u32 {
            let x = 2.0 * rng.next_f64() - 1.0;
            let count = rate_count(x, t);
            let level = quantize_level(x, scale, &spec);
            if count != level {
                return Err(format!(
                    "bits {} draw {}: x {} count {} level {}",
                    bits, i, x, count, level
                ));
            }
        }
    }
    let dt = start.elapsed().as_secs_f64();
    if dt >= 10.0 {
        return Err(format!("took {:.1}s (limit 10s)", dt));
    }
    Ok(format!("4e5 scalars exact in {:.1}s", dt))
}

// Criterion 2: SNN Synapsis + post encoder equals QSynapsis elementwise,
// b = 4, 16x16 random weights, 100 random inputs.
fn criterion_2() -> Result<String, String> {
    let mut rng = Rng::new(202);
    let spec = QuantSpec::symmetric(4).unwrap();
    let l = spec.positive_levels();
    let t = l as u32;
    for trial in 0..5 {
        let w = rand_uniform(&mut rng, &[16, 16], -0.5, 0.5).unwrap();
        let b = rand_uniform(&mut rng, &[16], -0.2, 0.2).unwrap();
        let (s_pre, s_post) = (1.0 / l as f64, 4.0 / l as f64);
        let layer = SynapsisLayer::new(w.clone(), b.clone(), s_pre * l as f64, t).unwrap();
        for i in 0..100 {
            let x = rand_uniform(&mut rng, &[16], -1.0, 1.0).unwrap();
            let (q_out, _) = spikeformer::quantization::qsynapsis_forward(
                &w, &b, &spec, s_pre, s_post, &x,
            )
            .unwrap();
            let train = layer.encode_input(&x).unwrap();
            let y = layer.forward_dequant_from_train(&train).unwrap();
            let y_scaled = Tensor::new(
                vec![16],
                y.data
                    .iter()
                    .map(|&v| ((v as f64 / (s_post * l as f64)).clamp(-1.0, 1.0)) as f32)
                    .collect(),
            )
            .unwrap();
            let post = encode_rate(&y_scaled, t).unwrap();
            for k in 0..16 {
                let snn = (post.accumulated[k] as f64 * s_post) as f32;
                if snn != q_out.data[k] {
                    return Err(format!(
                        "trial {} input {} elem {}: snn {} qsynapsis {}",
                        trial, i, k, snn, q_out.data[k]
                    ));
                }
            }
        }
    }
    Ok("500 inputs x 16 elems exact".into())
}

// Criterion 3: linear gate (every synapsis site within one
// post-quantization step) must hold; median argmax agreement
// >= 0.90 per bit width, medians non-decreasing over bits {4,6,8},
// 10 seeds each, 1k-token stream.
fn criterion_3(corpus: &[u8], banks: &BankSet) -> Result<String, String> {
    let mut medians = Vec::new();
    for bits in [4u32, 6, 8] {
        let mut agreements: Vec<f64> = (0..10)
            .map(|s| pipeline_agreement(bits, 300 + s, corpus, banks))
            .collect::<Result<_, _>>()?;
        medians.push(median(&mut agreements));
    }
    for (i, &m) in medians.iter().enumerate() {
        if m < 0.90 {
            return Err(format!("median agreement {:.3} < 0.90 at bits {}", m, [4, 6, 8][i]));
        }
    }
    if !(medians[0] <= medians[1] && medians[1] <= medians[2]) {
        return Err(format!("medians not non-decreasing: {:?}", medians));
    }
    Ok(format!(
        "median agreement {:.3}/{:.3}/{:.3} at bits 4/6/8",
        medians[0], medians[1], medians[2]
    ))
}

// Criterion 4: median decoded-product error halves-or-better is not
// required, only non-increasing when T doubles (T in {8,16,32,64}, 20
// seeds); scalar min law exact under the front-loaded schedule.
fn criterion_4() -> Result<String, String> {
    let mut med = Vec::new();
    for t in [8u32, 16, 32, 64, 128] {
        let mut errs = Vec::new();
        for seed in 0..20u64 {
            let mut rng = Rng::new(400 + seed);
            let q = rand_uniform(&mut rng, &[4, 8], -1.0, 1.0).unwrap();
            let k = rand_uniform(&mut rng, &[4, 8], -1.0, 1.0).unwrap();
            let mut kt = Tensor::zeros(&[8, 4]);
            for i in 0..4 {
                for j in 0..8 {
                    kt.data[j * 4 + i] = k.data[i * 8 + j];
                }
            }
            let exact = matmul(&q, &kt).unwrap();
            let scores = snn_matmul(&q, &k, t, 1.0, 1.0, Schedule::Strided).unwrap();
            let dec = decode_scores(&scores);
            let err: f64 = exact
                .data
                .iter()
                .zip(&dec.data)
                .map(|(a, b)| ((a - b) as f64).abs())
                .sum::<f64>()
                / exact.data.len() as f64;
            errs.push(err);
        }
        med.push(median(&mut errs));
    }
    for w in med.windows(2) {
        if w[1] > w[0] {
            return Err(format!("median error rose when T doubled: {:?}", med));
        }
    }
    // Scalar min law: front-loaded trains overlap on min(|ca|,|cb|) steps.
    let mut rng = Rng::new(404);
    for _ in 0..200 {
        let a = 2.0 * rng.next_f64() - 1.0;
        let b = 2.0 * rng.next_f64() - 1.0;
        let t = 16u32;
        let qa = Tensor::new(vec![1, 1], vec![a as f32]).unwrap();
        let qb = Tensor::new(vec![1, 1], vec![b as f32]).unwrap();
        let s = snn_matmul(&qa, &qb, t, 1.0, 1.0, Schedule::FrontLoaded).unwrap();
        let ca = rate_count(a, t);
        let cb = rate_count(b, t);
        let want = if ca.signum() * cb.signum() >= 0 {
            ca.abs().min(cb.abs()) * if ca.signum() * cb.signum() < 0 { -1 } else { 1 }
        } else {
            -ca.abs().min(cb.abs())
        };
        if s.accumulated[0] != want {
            return Err(format!("min law: a {} b {} got {} want {}", a, b, s.accumulated[0], want));
        }
    }
    Ok(format!("median errors {:?} non-increasing; min law exact", med))
}

// Criterion 5: bank gates. square MSE <= 1e-2 on [0,4]; sqrt relative
// error <= 5% on a log grid over [1e-3,16]; SiLU MSE <= 1e-2 on [-6,4]
// and exactly 0 below -6; SNNRMSNorm relative error <= 5%.
fn criterion_5(banks: &BankSet) -> Result<String, String> {
    let n = 2000;
    let mut mse = 0.0;
    for i in 0..n {
        let x = 4.0 * (i as f64 + 0.5) / n as f64;
        mse += (approx_eval(&banks.square, x) - x * x).powi(2);
    }
    mse /= n as f64;
    if mse > 1e-2 {
        return Err(format!("square MSE {:.4e} > 1e-2", mse));
    }
    let (lo, hi) = (1e-3f64, 16.0f64);
    let mut worst_rel = 0.0f64;
    for i in 0..n {
        let x = lo * (hi / lo).powf((i as f64 + 0.5) / n as f64);
        let rel = ((approx_eval(&banks.sqrt, x) - x.sqrt()) / x.sqrt()).abs();
        worst_rel = worst_rel.max(rel);
    }
    if worst_rel > 0.05 {
        return Err(format!("sqrt relative error {:.3} > 5%", worst_rel));
    }
    let mut silu_mse = 0.0;
    for i in 0..n {
        let x = -6.0 + 10.0 * (i as f64 + 0.5) / n as f64;
        let exact = x / (1.0 + (-x).exp());
        silu_mse += (banks.silu.eval(x) - exact).powi(2);
    }
    silu_mse /= n as f64;
    if silu_mse > 1e-2 {
        return Err(format!("silu MSE {:.4e} > 1e-2", silu_mse));
    }
    for x in [-6.01, -7.0, -50.0, -1e6] {
        if banks.silu.eval(x) != 0.0 {
            return Err(format!("silu({}) != 0", x));
        }
    }
    let mut rng = Rng::new(505);
    let w = Tensor::new(vec![16], vec![1.0; 16]).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = rand_uniform(&mut rng, &[16], -1.0, 1.0).unwrap();
        let approx = snn_rmsnorm(&x, &w, 1e-5, &banks.square, &banks.sqrt).unwrap();
        let exact = exact_rmsnorm(&x, &w, 1e-5).unwrap();
        for (a, e) in approx.data.iter().zip(&exact.data) {
            if e.abs() > 1e-3 {
                worst = worst.max(((a - e) / e).abs() as f64);
            }
        }
    }
    if worst > 0.05 {
        return Err(format!("rmsnorm relative error {:.3} > 5%", worst));
    }
    Ok(format!(
        "square {:.1e}, sqrt rel {:.1}%, silu {:.1e}, rmsnorm rel {:.1}%",
        mse,
        100.0 * worst_rel,
        silu_mse,
        100.0 * worst
    ))
}

// Criterion 6: plasticity unit laws plus the zero-rate no-op.
fn criterion_6(corpus: &[u8], banks: &BankSet) -> Result<String, String> {
    let p = StdpParams::default();
    if spikeformer::plasticity::stdp_delta(0.0, &p) != -p.a_minus {
        return Err("stdp_delta(0) != -A_minus".into());
    }
    if (spikeformer::plasticity::stdp_delta(p.tau_plus, &p) - p.a_plus * (-1.0f64).exp()).abs()
        >= 1e-9
    {
        return Err("stdp_delta(tau+) != A+ e^-1".into());
    }
    let mut m = ModulationState::new(1.0, 8).unwrap();
    m.update_baseline(3.25);
    if m.global_modulation(3.25) != 0.5 {
        return Err("G(baseline, baseline) != 0.5".into());
    }
    let mut rng = Rng::new(606);
    for len in 1..=12usize {
        let probs: Vec<f64> = (0..len).map(|_| rng.next_f64()).collect();
        let mut expect = 0.0f64;
        for mask in 0u32..(1 << len) {
            let mut pr = 1.0f64;
            for (k, &pk) in probs.iter().enumerate() {
                pr *= if mask >> k & 1 == 1 { pk } else { 1.0 - pk };
            }
            let first = (0..len).find(|&k| mask >> k & 1 == 1).map(|k| k + 1).unwrap_or(len + 1);
            expect += pr * first as f64;
        }
        if (expected_time_steps(&probs).unwrap() - expect).abs() >= 1e-9 {
            return Err(format!("expected_time_steps oracle mismatch at len {}", len));
        }
    }
    let snap = LossSnapshot {
        w: vec![0.3, -0.2],
        delta: vec![0.1, 0.4],
        tag: vec![0.6, 0.7],
        s_bar: vec![1.0],
        s_target: 1.4,
        v_bar: vec![0.2],
        v_target: 0.0,
        v_rest: 0.1,
        row_sums: vec![0.1],
        c_targets: vec![0.3],
        t_exp: 3.0,
        t_target: 3.5,
        l_task: 0.8,
    };
    let (total, b) = composite_loss(&CompositeLossWeights::default(), &snap).unwrap();
    let re_sum: f64 = b.terms().iter().sum();
    if (total - re_sum).abs() >= 1e-9 {
        return Err("breakdown does not sum to total".into());
    }
    // Zero-rate no-op on a converted model.
    let mut rng = Rng::new(607);
    let mut model = {
        let mut m = Model::init(toy_config(4, 16, 32, 32), 0.08, &mut rng.split(1)).unwrap();
        calibrate(&mut m, corpus, 2, 16, &mut rng.split(2)).unwrap();
        let (c, _) = convert(&m.to_container().unwrap(), banks.clone()).unwrap();
        Model::from_container(&c).unwrap()
    };
    let before = model.to_container().unwrap().to_bytes().unwrap();
    let cfg = StdpConfig {
        params: StdpParams::default(),
        beta_mod: 1.0,
        window: 32,
        eta_w: 0.0,
        eta_theta: 0.0,
        eta_alpha: 0.0,
        eta_r: 0.0,
        eta_grad: 0.0,
        weights: CompositeLossWeights::default(),
        lambda_scale: 1.0,
        s_target: 1.4,
        v_target: 0.0,
        v_rest: 0.0,
        t_target: 3.5,
        ema: 0.99,
        homeostatic_sign_flip: false,
        steps: 2,
        seq_len: 8,
    };
    let mut state = FinetuneState::new(&cfg).unwrap();
    let toks: Vec<usize> = corpus[..8].iter().map(|&b| b as usize).collect();
    let tgts: Vec<usize> = corpus[1..9].iter().map(|&b| b as usize).collect();
    spikeformer::plasticity::stdp_finetune_step(&mut model, &toks, &tgts, &mut state, &cfg)
        .unwrap();
    let after = model.to_container().unwrap().to_bytes().unwrap();
    if before != after {
        return Err("zero-rate stdp step modified the checkpoint bytes".into());
    }
    Ok("branch values, G, T_exp oracle, breakdown, zero-rate no-op".into())
}

// Criterion 7: training sanity on the ~100kB corpus: d_model 64, 2 layers,
// >= 20% loss reduction in 3 epochs; lr = 0 leaves weights bit-identical;
// 200-step STDP keeps the task-loss EMA within +5%.
fn criterion_7(corpus: &[u8], banks: &BankSet) -> Result<String, String> {
    let start = Instant::now();
    let mut rng = Rng::new(700);
    let mut m = Model::init(toy_config(4, 64, 128, 48), 0.08, &mut rng.split(1)).unwrap();
    let p = TrainParams {
        lr: 0.05,
        momentum: 0.9,
        epochs: 3,
        batch: 8,
        steps_per_epoch: 60,
        seq_len: 48,
    };
    let report = train_ann(&mut m, corpus, &p, &mut rng.split(2)).unwrap();
    let reduction = 1.0 - report.final_loss / report.initial_loss;
    if reduction < 0.20 {
        return Err(format!("loss reduction {:.1}% < 20%", 100.0 * reduction));
    }
    // lr = 0: weights unchanged bit for bit.
    let mut frozen = Model::init(toy_config(4, 16, 32, 32), 0.08, &mut Rng::new(701)).unwrap();
    let before = frozen.to_container().unwrap().to_bytes().unwrap();
    let p0 = TrainParams {
        lr: 0.0,
        momentum: 0.9,
        epochs: 1,
        batch: 4,
        steps_per_epoch: 5,
        seq_len: 16,
    };
    train_ann(&mut frozen, corpus, &p0, &mut Rng::new(702)).unwrap();
    let after = frozen.to_container().unwrap().to_bytes().unwrap();
    if before != after {
        return Err("lr = 0 training changed the weights".into());
    }
    // 200-step STDP stability on a trained, converted small model.
    let mut rng = Rng::new(703);
    let mut small = Model::init(toy_config(4, 16, 32, 32), 0.08, &mut rng.split(1)).unwrap();
    let ps = TrainParams {
        lr: 0.05,
        momentum: 0.9,
        epochs: 2,
        batch: 8,
        steps_per_epoch: 150,
        seq_len: 32,
    };
    train_ann(&mut small, corpus, &ps, &mut rng.split(2)).unwrap();
    calibrate(&mut small, corpus, 8, 32, &mut rng.split(3)).unwrap();
    let (snn_c, _) = convert(&small.to_container().unwrap(), banks.clone()).unwrap();
    let mut snn = Model::from_container(&snn_c).unwrap();
    let t = snn.config.t_steps as f64;
    let cfg = StdpConfig {
        params: StdpParams::default(),
        beta_mod: 1.0,
        window: 32,
        eta_w: 1e-4,
        eta_theta: 1e-4,
        eta_alpha: 1e-4,
        eta_r: 1e-4,
        eta_grad: 0.0,
        weights: CompositeLossWeights::default(),
        lambda_scale: 1.0,
        s_target: 0.2 * t,
        v_target: 0.0,
        v_rest: 0.0,
        t_target: t / 2.0,
        ema: 0.99,
        homeostatic_sign_flip: false,
        steps: 200,
        seq_len: 16,
    };
    let sr = stdp_finetune(&mut snn, corpus, &cfg, &mut rng.split(4)).unwrap();
    if !sr.stable {
        return Err(format!(
            "stdp loss EMA {:.4} -> {:.4} (> +5%)",
            sr.initial_loss_ema, sr.final_loss_ema
        ));
    }
    let dt = start.elapsed().as_secs_f64();
    if dt >= 600.0 {
        return Err(format!("took {:.0}s (limit 600s)", dt));
    }
    Ok(format!(
        "loss -{:.0}%, lr=0 no-op, stdp EMA {:.3}->{:.3} in {:.0}s",
        100.0 * reduction,
        sr.initial_loss_ema,
        sr.final_loss_ema,
        dt
    ))
}

// Criterion 8: seeded determinism of every CLI command (hash-identical
// artifacts), BTSF round-trip bit-identity, report schema validation.
fn criterion_8(corpus_path: &str) -> Result<String, String> {
    let bin = env!("CARGO_BIN_EXE_spikeformer");
    let base = tempfile::tempdir().unwrap();
    let cfg_path = base.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string(&serde_json::json!({
            "run.seed": 11,
            "train.corpus": corpus_path,
            "model.d_model": 16, "model.n_heads": 2, "model.d_ff": 32,
            "train.epochs": 1, "train.steps_per_epoch": 20,
            "train.seq_len": 16, "train.batch": 4,
            "audit.tokens": 64,
            "stdp.steps": 2, "stdp.seq_len": 8,
            "generate.max_tokens": 8
        }))
        .unwrap(),
    )
    .unwrap();
    let run_all = |out: &std::path::Path| -> Result<(), String> {
        for (cmd, extra) in [
            ("fit-approximators", vec![]),
            ("train-ann", vec![]),
            ("convert", vec![("convert.ann_checkpoint", "ann.btsf")]),
            (
                "audit",
                vec![
                    ("audit.ann_checkpoint", "ann.btsf"),
                    ("audit.snn_checkpoint", "snn.btsf"),
                ],
            ),
            ("stdp", vec![("stdp.checkpoint", "snn.btsf")]),
            ("generate", vec![("generate.checkpoint", "ann.btsf")]),
        ] {
            // Point input-path keys into this run's own out dir.
            let mut cfg: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
            for (k, f) in &extra {
                cfg[k] = serde_json::json!(out.join(f).to_str().unwrap());
            }
            let run_cfg = out.join(format!("cfg_{}.json", cmd));
            std::fs::write(&run_cfg, serde_json::to_string(&cfg).unwrap()).unwrap();
            let st = std::process::Command::new(bin)
                .args(["--config", run_cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), cmd])
                .output()
                .map_err(|e| format!("spawn {}: {}", cmd, e))?;
            if !st.status.success() {
                return Err(format!(
                    "{} exited {:?}: {}",
                    cmd,
                    st.status.code(),
                    String::from_utf8_lossy(&st.stderr)
                ));
            }
        }
        Ok(())
    };
    let (d1, d2) = (base.path().join("a"), base.path().join("b"));
    std::fs::create_dir_all(&d1).unwrap();
    std::fs::create_dir_all(&d2).unwrap();
    run_all(&d1)?;
    run_all(&d2)?;
    let mut compared = 0;
    for name in [
        "banks.json",
        "fit_report.json",
        "ann.btsf",
        "train_log.ndjson",
        "snn.btsf",
        "audit_report.json",
        "stdp_metrics.ndjson",
        "snn_finetuned.btsf",
        "stdp_report.json",
        "generation.txt",
    ] {
        let a = std::fs::read(d1.join(name)).map_err(|e| format!("{}: {}", name, e))?;
        let b = std::fs::read(d2.join(name)).map_err(|e| format!("{}: {}", name, e))?;
        if a != b {
            return Err(format!("artifact {} differs between identical runs", name));
        }
        compared += 1;
    }
    // BTSF round trip.
    let bytes = std::fs::read(d1.join("ann.btsf")).unwrap();
    let c = Container::from_bytes(&bytes).map_err(|e| format!("btsf: {}", e))?;
    if c.to_bytes().unwrap() != bytes {
        return Err("BTSF round trip not bit-identical".into());
    }
    // Schema validation of the emitted report.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d1.join("audit_report.json")).unwrap())
            .unwrap();
    validate_report_json(&report).map_err(|e| format!("schema: {}", e))?;
    Ok(format!("{} artifacts hash-identical; round trip + schema ok", compared))
}

#[test]
fn acceptance_criteria() {
    let corpus = corpus();
    let corpus_path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt");
    let banks = banks();
    let results: Vec<(&str, Result<String, String>)> = vec![
        ("1 quantizer-rate exactness", criterion_1()),
        ("2 synapsis equivalence", criterion_2()),
        ("3 conversion audit", criterion_3(&corpus, &banks)),
        ("4 snn_matmul convergence", criterion_4()),
        ("5 approximator gates", criterion_5(&banks)),
        ("6 plasticity laws", criterion_6(&corpus, &banks)),
        ("7 training sanity", criterion_7(&corpus, &banks)),
        ("8 determinism and formats", criterion_8(corpus_path)),
    ];
    let mut failed = false;
    for (name, r) in &results {
        match r {
            Ok(msg) => println!("criterion {}: pass ({})", name, msg),
            Err(msg) => {
                failed = true;
                println!("criterion {}: FAIL ({})", name, msg);
            }
        }
    }
    assert!(!failed, "one or more acceptance criteria failed");
}
