//! Command-line surface: corpus generation, training, evaluation,
//! gradient checking, and the ablation grid.
//!
//! Every run is deterministic for a given seed; `UNIMEEC_SEED` overrides
//! the config seeds. Usage errors exit with code 2 (the parser's
//! default), runtime failures print a message to stderr and exit 1.

use clap::{Parser, Subcommand, ValueEnum};
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use crate::ablation;
use crate::checkpoint;
use crate::config::Config;
use crate::corpus::{self, Conversation, Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::PairMode;
use crate::objective::{self, evaluate_model, fit_with};

#[derive(Parser)]
#[command(
    name = "unimeec",
    version,
    about = "Unified multimodal emotion recognition and emotion-cause pair extraction"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multimodal conversation corpus as JSONL.
    Synth {
        /// Config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<String>,
        /// Output corpus path.
        #[arg(long)]
        out: String,
    },
    /// Train a model; writes checkpoint.bin and train_log.jsonl.
    Train {
        /// Corpus JSONL produced by `synth` (or hand-written).
        #[arg(long)]
        data: String,
        /// Config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<String>,
        /// Output directory for the checkpoint and epoch log.
        #[arg(long, default_value = ".")]
        out: String,
    },
    /// Evaluate a checkpoint on a corpus and write a JSON metric report.
    Eval {
        #[arg(long)]
        data: String,
        #[arg(long)]
        checkpoint: String,
        /// Output report path.
        #[arg(long)]
        report: String,
        /// Pair scoring: `strict` also requires the emotion to match,
        /// `position` only the cause utterance.
        #[arg(long, value_enum, default_value_t = PairModeArg::Strict)]
        pair_mode: PairModeArg,
        /// Which conversations to score.
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
    },
    /// Compare tape gradients against central finite differences on a
    /// freshly generated batch; nonzero exit above tolerance.
    Gradcheck {
        /// Config JSON; a small built-in configuration when omitted.
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Train and evaluate every component-switch configuration; writes
    /// one combined JSON report.
    Ablate {
        /// Corpus JSONL; generated from the config when omitted.
        #[arg(long)]
        data: Option<String>,
        /// Config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<String>,
        /// Output report path.
        #[arg(long)]
        out: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PairModeArg {
    Strict,
    Position,
}

impl From<PairModeArg> for PairMode {
    fn from(v: PairModeArg) -> PairMode {
        match v {
            PairModeArg::Strict => PairMode::Strict,
            PairModeArg::Position => PairMode::Position,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Valid,
    Test,
}

/// Parse `argv` and run; the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { config, out } => synth(config.as_deref(), &out),
        Cmd::Train { data, config, out } => train(&data, config.as_deref(), &out),
        Cmd::Eval {
            data,
            checkpoint,
            report,
            pair_mode,
            split,
        } => eval(&data, &checkpoint, &report, pair_mode.into(), split),
        Cmd::Gradcheck {
            config,
            step,
            tolerance,
        } => gradcheck(config.as_deref(), step, tolerance),
        Cmd::Ablate { data, config, out } => ablate(data.as_deref(), config.as_deref(), &out),
    }
}

fn synth(config: Option<&str>, out: &str) -> Result<()> {
    let cfg = Config::load_or_default(config)?;
    let corpus = corpus::generate(&cfg.synth);
    corpus::save_jsonl(&corpus, out)?;
    println!("wrote {} conversations to {out}", corpus.conversations.len());
    Ok(())
}

fn train(data: &str, config: Option<&str>, out: &str) -> Result<()> {
    let cfg = Config::load_or_default(config)?;
    let corpus = corpus::load_jsonl(data)?;

    let out_dir = PathBuf::from(out);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(out, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let log_err = |e: std::io::Error| Error::io(log_path.display().to_string(), e);
    let mut log_file = io::BufWriter::new(fs::File::create(&log_path).map_err(log_err)?);
    let outcome = fit_with(&cfg, &corpus, |record| {
        serde_json::to_writer(&mut log_file, record)?;
        log_file.write_all(b"\n").map_err(log_err)?;
        log_file.flush().map_err(log_err)
    })?;

    let ckpt_path = out_dir.join("checkpoint.bin");
    checkpoint::save(&outcome.model, &ckpt_path)?;

    println!(
        "trained {} epochs; wrote {} and {}",
        outcome.log.len(),
        log_path.display(),
        ckpt_path.display()
    );
    Ok(())
}

fn eval(data: &str, ckpt: &str, report_path: &str, mode: PairMode, split: SplitArg) -> Result<()> {
    let corpus = corpus::load_jsonl(data)?;
    let model = checkpoint::load(Path::new(ckpt))?;
    checkpoint::check_compat(&model, &corpus)?;

    let subset: Vec<&Conversation> = match split {
        SplitArg::All => corpus.conversations.iter().collect(),
        SplitArg::Train => corpus.by_split(Split::Train),
        SplitArg::Valid => corpus.by_split(Split::Valid),
        SplitArg::Test => corpus.by_split(Split::Test),
    };
    if subset.is_empty() {
        return Err(Error::Config(format!(
            "no conversations to evaluate in {data} for the requested split"
        )));
    }

    let report = evaluate_model(&model, &subset, mode);
    let mut bytes = serde_json::to_vec(&report)?;
    bytes.push(b'\n');
    fs::write(report_path, bytes).map_err(|e| Error::io(report_path, e))?;
    println!(
        "evaluated {} conversations; wrote {report_path}",
        subset.len()
    );
    Ok(())
}

/// Small architecture that still exercises every component, sized so the
/// exhaustive finite-difference sweep stays fast.
pub fn gradcheck_config() -> Result<Config> {
    let mut cfg = Config::default();
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.d_ffn = 24;
    cfg.model.n_text_layers = 2;
    cfg.model.n_audio_layers = 1;
    cfg.model.n_vision_layers = 1;
    cfg.model.max_conv_len = 4;
    cfg.thc.layers = 2;
    cfg.thc.heads = vec![1, 2];
    cfg.thc.window = 1;
    cfg.prompt.x_capacity = 3;
    cfg.synth.conversations = 1;
    cfg.synth.min_utterances = 4;
    cfg.synth.max_utterances = 4;
    cfg.synth.tokens_per_utterance = 3;
    cfg.synth.vocab_size = 12;
    cfg.synth.audio_dim = 3;
    cfg.synth.vision_dim = 3;
    cfg.synth.audio_len = 5;
    cfg.synth.vision_len = 2;
    cfg.apply_env_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

fn gradcheck(config: Option<&str>, step: f64, tolerance: f64) -> Result<()> {
    let cfg = match config {
        Some(p) => Config::from_path(p)?,
        None => gradcheck_config()?,
    };
    let corpus = corpus::generate(&cfg.synth);
    let report = objective::gradient_check(&cfg, &corpus.conversations, step, tolerance)?;
    println!(
        "checked {} parameters ({} entries); max relative error {:.3e} at {} (tolerance {:.1e})",
        report.params_checked,
        report.entries_checked,
        report.max_rel_err,
        report.worst_param,
        report.tolerance
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "max relative error {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn ablate(data: Option<&str>, config: Option<&str>, out: &str) -> Result<()> {
    let cfg = Config::load_or_default(config)?;
    let corpus: Corpus = match data {
        Some(p) => corpus::load_jsonl(p)?,
        None => corpus::generate(&cfg.synth),
    };
    let report = ablation::run(&cfg, &corpus)?;
    let mut bytes = serde_json::to_vec(&report)?;
    bytes.push(b'\n');
    fs::write(out, bytes).map_err(|e| Error::io(out, e))?;
    println!("ran {} configurations; wrote {out}", report.rows.len());
    Ok(())
}
