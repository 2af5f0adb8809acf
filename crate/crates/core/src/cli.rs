//! Command-line pipeline: fit approximator banks, train the quantized ANN,
//! convert, audit equivalence, STDP fine-tune, and generate text.
//!
//! Exit codes: 0 ok, 1 input/config error, 2 gate failure, 3 internal error.
//! All randomness flows from run.seed; each command draws its stream with a
//! fixed split tag so pipelines are reproducible end to end.

use crate::approximators::{fit_default_banks, BankDefaults, BankSet};
use crate::checkpoint::Container;
use crate::config::{self, ConfigValue, RunConfig};
use crate::conversion::{audit_equivalence, convert};
use crate::error::{Error, Result};
use crate::model::{calibrate, generate, train_ann, Model, ModelConfig, TrainParams};
use crate::plasticity::{stdp_finetune, StdpConfig};
use crate::tensor::Rng;
use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

const SPLIT_FIT: u64 = 0xF17;
const SPLIT_TRAIN: u64 = 0x7A14;
const SPLIT_CALIBRATE: u64 = 0xCA11;
const SPLIT_STDP: u64 = 0x57D9;
const SPLIT_GENERATE: u64 = 0x6E4;

#[derive(Parser)]
#[command(
    name = "spikeformer",
    version,
    about = "Spiking transformer pipeline: fit, train, convert, audit, stdp, generate",
    after_long_help = config::help_text()
)]
struct Cli {
    /// JSON config file with flat module.key entries; see --help for keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Escalate soft gates (audit agreement, stdp stability) to failures.
    #[arg(long, global = true)]
    strict: bool,
    /// Output directory; overrides run.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the square/sqrt/SiLU CustomNeuron banks and write a fit report.
    FitApproximators,
    /// Train the quantized ANN on the byte corpus and write ann.btsf.
    TrainAnn,
    /// Convert an ANN checkpoint to a spiking one (snn.btsf).
    Convert,
    /// Replay both checkpoints and emit the equivalence report.
    Audit,
    /// STDP fine-tune an SNN checkpoint; stream metrics, write the result.
    Stdp,
    /// Autoregressive decoding from a checkpoint.
    Generate,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_json(&serde_json::json!({}))?,
    };
    if let Some(seed) = cli.seed {
        cfg.set("run.seed", ConfigValue::Int(seed as i64))?;
    }
    if let Some(out) = &cli.out {
        let s = out
            .to_str()
            .ok_or_else(|| Error::Input("--out path is not valid UTF-8".into()))?;
        cfg.set("run.out_dir", ConfigValue::Str(s.to_string()))?;
    }
    let out_dir = PathBuf::from(cfg.str("run.out_dir")?);
    std::fs::create_dir_all(&out_dir)?;
    let mut root = Rng::new(cfg.int("run.seed")? as u64);
    match cli.cmd {
        Cmd::FitApproximators => cmd_fit_approximators(&cfg, &out_dir, &mut root),
        Cmd::TrainAnn => cmd_train_ann(&cfg, &out_dir, &mut root),
        Cmd::Convert => cmd_convert(&cfg, &out_dir, &mut root),
        Cmd::Audit => cmd_audit(&cfg, &out_dir, cli.strict),
        Cmd::Stdp => cmd_stdp(&cfg, &out_dir, cli.strict, &mut root),
        Cmd::Generate => cmd_generate(&cfg, &out_dir, &mut root),
    }
}

fn read_ckpt(path: &str) -> Result<Container> {
    if !Path::new(path).is_file() {
        return Err(Error::Input(format!("checkpoint {} not found", path)));
    }
    Container::read_from(Path::new(path))
}

fn read_corpus(cfg: &RunConfig) -> Result<Vec<u8>> {
    let path = cfg.str("train.corpus")?;
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Input(format!("corpus {} unreadable: {}", path, e)))?;
    if bytes.is_empty() {
        return Err(Error::Input(format!("corpus {} is empty", path)));
    }
    Ok(bytes)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(value)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

fn bank_defaults(cfg: &RunConfig) -> Result<BankDefaults> {
    Ok(BankDefaults {
        square_segments: cfg.usize("fit.square_segments")?,
        square_power: cfg.num("fit.square_power")?,
        sqrt_segments: cfg.usize("fit.sqrt_segments")?,
        steps: cfg.usize("fit.steps")? as u32,
        sample_count: cfg.usize("fit.samples")?,
        square_mse_ceiling: cfg.num("fit.square_mse_ceiling")?,
        sqrt_mse_ceiling: cfg.num("fit.sqrt_mse_ceiling")?,
        silu_mse_ceiling: cfg.num("fit.silu_mse_ceiling")?,
        ..BankDefaults::default()
    })
}

/// Banks are refit from the seed stream rather than read back from disk so a
/// command's outputs depend only on its config and seed.
fn fit_banks(cfg: &RunConfig, root: &mut Rng) -> Result<BankSet> {
    fit_default_banks(&bank_defaults(cfg)?, &mut root.split(SPLIT_FIT))
}

fn cmd_fit_approximators(cfg: &RunConfig, out_dir: &Path, root: &mut Rng) -> Result<()> {
    let banks = fit_banks(cfg, root)?;
    let banks_path = out_dir.join("banks.json");
    write_json(&banks_path, &serde_json::to_value(&banks)?)?;
    let report = serde_json::json!({
        "square_mse": banks.square.final_mse,
        "sqrt_weighted_mse": banks.sqrt.final_mse,
        "silu_pos_mse": banks.silu.pos.final_mse,
        "silu_neg_mse": banks.silu.neg.final_mse,
        "square_segments": banks.square.segments.len(),
        "sqrt_segments": banks.sqrt.segments.len(),
    });
    write_json(&out_dir.join("fit_report.json"), &report)?;
    println!("wrote {}", banks_path.display());
    println!("{}", report);
    Ok(())
}

fn cmd_train_ann(cfg: &RunConfig, out_dir: &Path, root: &mut Rng) -> Result<()> {
    let corpus = read_corpus(cfg)?;
    let params = TrainParams::from_run_config(cfg)?;
    let resume = cfg.str("train.resume")?;
    let mut model = if resume.is_empty() {
        let mc = ModelConfig::from_run_config(cfg)?;
        Model::init(
            mc,
            cfg.num("train.init_scale")? as f32,
            &mut root.split(SPLIT_TRAIN ^ 1),
        )?
    } else {
        Model::from_container(&read_ckpt(resume)?)?
    };
    let report = train_ann(&mut model, &corpus, &params, &mut root.split(SPLIT_TRAIN))?;
    calibrate(
        &mut model,
        &corpus,
        cfg.usize("train.calibration_batches")?,
        params.seq_len,
        &mut root.split(SPLIT_CALIBRATE),
    )?;
    let ckpt = out_dir.join("ann.btsf");
    model.to_container()?.write_to(&ckpt)?;
    let mut log = std::fs::File::create(out_dir.join("train_log.ndjson"))?;
    for r in &report.records {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
    }
    println!(
        "wrote {} (initial loss {:.4}, final loss {:.4})",
        ckpt.display(),
        report.initial_loss,
        report.final_loss
    );
    Ok(())
}

fn cmd_convert(cfg: &RunConfig, out_dir: &Path, root: &mut Rng) -> Result<()> {
    let ann_path = cfg.str("convert.ann_checkpoint")?;
    let ann = read_ckpt(ann_path)?;
    let banks = fit_banks(cfg, root)?;
    let (snn, summary) = convert(&ann, banks)?;
    let ckpt = out_dir.join("snn.btsf");
    snn.write_to(&ckpt)?;
    println!(
        "wrote {} (sites replaced {}, bits {}, T {})",
        ckpt.display(),
        summary.sites_replaced,
        summary.bits,
        summary.t_steps
    );
    Ok(())
}

fn cmd_audit(cfg: &RunConfig, out_dir: &Path, strict: bool) -> Result<()> {
    let ann = read_ckpt(cfg.str("audit.ann_checkpoint")?)?;
    let snn = read_ckpt(cfg.str("audit.snn_checkpoint")?)?;
    let corpus = read_corpus(cfg)?;
    let n = cfg.usize("audit.tokens")?.min(corpus.len());
    if n < 2 {
        return Err(Error::Input("audit.tokens must be >= 2".into()));
    }
    let report = audit_equivalence(&ann, &snn, &corpus[..n])?;
    let value = serde_json::to_value(&report)?;
    write_json(&out_dir.join("audit_report.json"), &value)?;
    println!(
        "sites {} | linear gate {} | logits max gap {:.4} | argmax agreement {:.3}",
        report.sites.len(),
        if report.linear_gate_pass { "pass" } else { "FAIL" },
        report.logits_max_gap,
        report.argmax_agreement
    );
    if !report.linear_gate_pass {
        return Err(Error::Audit(
            "a synapsis site gap exceeded its post-quantization bound".into(),
        ));
    }
    if strict && report.argmax_agreement < 0.9 {
        return Err(Error::Audit(format!(
            "strict gate: argmax agreement {:.3} < 0.9",
            report.argmax_agreement
        )));
    }
    Ok(())
}

fn cmd_stdp(cfg: &RunConfig, out_dir: &Path, strict: bool, root: &mut Rng) -> Result<()> {
    let ckpt = read_ckpt(cfg.str("stdp.checkpoint")?)?;
    let mut model = Model::from_container(&ckpt)?;
    if model.banks.is_none() {
        return Err(Error::Contract("stdp requires a converted snn checkpoint".into()));
    }
    let corpus = read_corpus(cfg)?;
    let scfg = StdpConfig::from_run_config(cfg, model.config.t_steps)?;
    let report = stdp_finetune(&mut model, &corpus, &scfg, &mut root.split(SPLIT_STDP))?;
    let mut stream = std::fs::File::create(out_dir.join("stdp_metrics.ndjson"))?;
    for m in &report.metrics {
        writeln!(stream, "{}", serde_json::to_string(m)?)?;
    }
    let out_ckpt = out_dir.join("snn_finetuned.btsf");
    model.to_container()?.write_to(&out_ckpt)?;
    write_json(
        &out_dir.join("stdp_report.json"),
        &serde_json::json!({
            "steps": report.steps,
            "initial_loss_ema": report.initial_loss_ema,
            "final_loss_ema": report.final_loss_ema,
            "stable": report.stable,
        }),
    )?;
    println!(
        "wrote {} (loss EMA {:.4} -> {:.4}, stable {})",
        out_ckpt.display(),
        report.initial_loss_ema,
        report.final_loss_ema,
        report.stable
    );
    if strict && !report.stable {
        return Err(Error::Audit(
            "strict gate: task-loss EMA rose more than 5% during stdp".into(),
        ));
    }
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, out_dir: &Path, root: &mut Rng) -> Result<()> {
    let ckpt = read_ckpt(cfg.str("generate.checkpoint")?)?;
    let model = Model::from_container(&ckpt)?;
    let prompt = cfg.str("generate.prompt")?.as_bytes().to_vec();
    if prompt.is_empty() {
        return Err(Error::Input("generate.prompt must be non-empty".into()));
    }
    let report = generate(
        &model,
        &prompt,
        cfg.usize("generate.max_tokens")?,
        cfg.num("generate.temperature")?,
        &mut root.split(SPLIT_GENERATE),
    )?;
    let text = String::from_utf8_lossy(&report.text_bytes).into_owned();
    std::fs::write(out_dir.join("generation.txt"), &report.text_bytes)?;
    println!("{}", text);
    // Timing stays off the artifacts so outputs hash identically per seed.
    match report.total_spikes {
        Some(s) => eprintln!("{:.1} tokens/sec, {} spikes", report.tokens_per_sec, s),
        None => eprintln!("{:.1} tokens/sec", report.tokens_per_sec),
    }
    Ok(())
}
