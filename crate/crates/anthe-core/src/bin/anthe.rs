//! Command-line front end: parameter census, training, evaluation,
//! gradient checking, SVD decomposition of dense weights, greedy
//! generation, and synthetic-corpus creation.
//!
//! Every subcommand is deterministic under a fixed `--seed`, exits 0 on
//! success, and prints a one-line diagnostic on failure. `--out FILE`
//! additionally writes the printed quantities as `key=value` lines.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use anthe_core::checkpoint::{self, Record};
use anthe_core::config::{preset, ArchConfig};
use anthe_core::data::{
    self, make_batches, read_corpus, split_corpus, SynthKind, TokenizerKind, Vocabulary,
};
use anthe_core::gradcheck::{model_suite, op_suite};
use anthe_core::model::{greedy_decode, Model, ModelPlan};
use anthe_core::tc::{decompose, plan_factors, DecomposeTarget};
use anthe_core::train::{evaluate, train_loop, TrainConfig};
use anthe_core::{Array, Error, Result};

#[derive(Parser)]
#[command(
    name = "anthe",
    version,
    about = "Sequence-to-sequence transformers with gated attention, \
             hierarchical soft positions, and tensor-chain layers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the exact parameter census of a configuration
    CountParams(CountParamsArgs),
    /// Train a model on a TSV corpus and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split
    Eval(EvalArgs),
    /// Finite-difference verification of gradients
    Gradcheck(GradcheckArgs),
    /// Decompose a dense matrix into tensor-chain factors
    Decompose(DecomposeArgs),
    /// Greedy-decode translations for source lines
    Generate(GenerateArgs),
    /// Generate a synthetic copy/reverse corpus
    Synth(SynthArgs),
}

/// Flags shared by every subcommand that builds a configuration.
#[derive(Args)]
struct ConfigFlags {
    /// Named architecture preset
    #[arg(long)]
    preset: Option<String>,
    /// Configuration file of `key = value` lines
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<ArchConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(name), _) => preset(name)?,
            (None, Some(path)) => ArchConfig::from_file(path)?,
            (None, None) => ArchConfig::default(),
        };
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct CountParamsArgs {
    #[command(flatten)]
    config: ConfigFlags,
    /// Also write the census as key=value lines
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TSV corpus: `source<TAB>target`, one pair per line
    #[arg(long)]
    data: PathBuf,
    /// Where to write the trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
    /// Tokenizer granularity
    #[arg(long, default_value = "char")]
    tokenizer: String,
    /// Maximum number of epochs
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 3.16e-5)]
    lr: f64,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Seed for the corpus split, initialization, and dropout
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append per-epoch log lines to this file
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the final summary as key=value lines
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// TSV corpus to split and evaluate on
    #[arg(long)]
    data: PathBuf,
    /// Corpus portion: train, val, test, or all
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Seed that reproduces the training split
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// What to check: `ops` (every differentiable op) or `model`
    #[arg(long, default_value = "ops")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum allowed relative error (default 1e-4 for ops, 1e-3 for model)
    #[arg(long)]
    tolerance: Option<f64>,
    /// Coordinates probed per tensor in model scope
    #[arg(long, default_value_t = 2)]
    probes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    /// Checkpoint (first matrix record) or whitespace-separated text matrix
    #[arg(long)]
    input: PathBuf,
    /// Parameter-budget ratio in (0, 1]; 1 keeps every singular value
    #[arg(long)]
    r: Option<f64>,
    /// Relative Frobenius mass allowed to be discarded per split
    #[arg(long, conflicts_with = "r")]
    tolerance: Option<f64>,
    /// Chain length
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Where to write the factor checkpoint
    #[arg(long)]
    out_ckpt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Source line to translate (repeatable)
    #[arg(long, required = true)]
    input: Vec<String>,
    /// Maximum generated tokens per line
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Task: copy or reverse
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 512)]
    n_pairs: usize,
    #[arg(long, default_value_t = 4)]
    len_min: usize,
    #[arg(long, default_value_t = 12)]
    len_max: usize,
    #[arg(long, default_value = "abcdefgh")]
    alphabet: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output TSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn run_count_params(args: &CountParamsArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let plan = ModelPlan::new(cfg)?;
    let census = plan.census();
    let mut kv: Vec<(String, String)> = Vec::new();
    for (name, count) in census.components() {
        println!("{name:<20} {count}");
        kv.push((name.to_string(), count.to_string()));
    }
    println!("{:<20} {}", "total", census.total);
    kv.push(("total".to_string(), census.total.to_string()));
    for (label, r_actual) in &plan.tc_actual {
        println!("tc_actual.{label:<10} {r_actual:.6}");
        kv.push((format!("tc_actual.{label}"), format!("{r_actual:.6}")));
    }
    if let Some(path) = &args.out {
        write_kv(path, &kv)?;
    }
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let kind = TokenizerKind::parse(&args.tokenizer)?;
    let pairs = read_corpus(&args.data)?;
    let (train_pairs, val_pairs, test_pairs) = split_corpus(&pairs, args.seed);
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::data(
            "corpus too small to produce train and validation splits",
        ));
    }
    let vocab = Vocabulary::build(&train_pairs, kind);
    let mut cfg = args.config.resolve()?;
    cfg.n_vocab = vocab.len();
    cfg.validate()?;

    let train_batches = make_batches(&train_pairs, &vocab, args.batch_size)?;
    let val_batches = make_batches(&val_pairs, &vocab, args.batch_size)?;
    let mut model: Model<f32> = Model::build(cfg, args.seed)?;
    let census = model.census();
    println!(
        "corpus {} pairs: {} train / {} val / {} test",
        pairs.len(),
        train_pairs.len(),
        val_pairs.len(),
        test_pairs.len()
    );
    println!("vocab {} tokens ({})", vocab.len(), kind.name());
    println!("params {}", census.total);

    let tc = TrainConfig {
        lr: args.lr,
        max_epochs: args.epochs,
        patience: args.patience,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let mut log_file = match &args.log {
        Some(path) => Some(fs::OpenOptions::new().create(true).append(true).open(path)?),
        None => None,
    };
    let report = train_loop(&mut model, &train_batches, &val_batches, &tc, |stats| {
        let line = stats.log_line();
        println!("{line}");
        if let Some(f) = log_file.as_mut() {
            // Logging must not abort training; surface problems on stderr.
            if let Err(e) = writeln!(f, "{line}") {
                eprintln!("warning: could not append to log: {e}");
            }
        }
    })?;
    println!(
        "stopped after {} epochs (best epoch {}, val loss {:.6})",
        report.epochs.len(),
        report.best_epoch,
        report.best_val_loss
    );

    checkpoint::save_model(&args.ckpt, &model, &vocab)?;
    println!("saved checkpoint to {}", args.ckpt.display());

    let mut kv = vec![
        ("pairs".to_string(), pairs.len().to_string()),
        ("vocab".to_string(), vocab.len().to_string()),
        ("params".to_string(), census.total.to_string()),
        ("epochs".to_string(), report.epochs.len().to_string()),
        ("best_epoch".to_string(), report.best_epoch.to_string()),
        (
            "best_val_loss".to_string(),
            format!("{:.6}", report.best_val_loss),
        ),
    ];
    if !test_pairs.is_empty() {
        let test_batches = make_batches(&test_pairs, &vocab, args.batch_size)?;
        let (loss, ppl) = evaluate(&model, &test_batches)?;
        println!("test_loss {loss:.6} test_ppl {ppl:.6}");
        kv.push(("test_loss".to_string(), format!("{loss:.6}")));
        kv.push(("test_ppl".to_string(), format!("{ppl:.6}")));
    }
    if let Some(path) = &args.out {
        write_kv(path, &kv)?;
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (model, vocab) = checkpoint::load_model(&args.ckpt)?;
    let pairs = read_corpus(&args.data)?;
    let (train_pairs, val_pairs, test_pairs) = split_corpus(&pairs, args.seed);
    let chosen: Vec<data::Pair> = match args.split.as_str() {
        "train" => train_pairs,
        "val" => val_pairs,
        "test" => test_pairs,
        "all" => pairs,
        other => {
            return Err(Error::parse(format!(
                "unknown split {other:?}; expected train, val, test, or all"
            )))
        }
    };
    if chosen.is_empty() {
        return Err(Error::data(format!("split {} is empty", args.split)));
    }
    let batches = make_batches(&chosen, &vocab, args.batch_size)?;
    let (loss, ppl) = evaluate(&model, &batches)?;
    println!(
        "split {}: loss {loss:.6} ppl {ppl:.6} ({} pairs)",
        args.split,
        chosen.len()
    );
    if let Some(path) = &args.out {
        write_kv(
            path,
            &[
                ("split".to_string(), args.split.clone()),
                ("pairs".to_string(), chosen.len().to_string()),
                ("loss".to_string(), format!("{loss:.6}")),
                ("ppl".to_string(), format!("{ppl:.6}")),
            ],
        )?;
    }
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut kv: Vec<(String, String)> = Vec::new();
    let failures: Vec<String> = match args.scope.as_str() {
        "ops" => {
            let tol = args.tolerance.unwrap_or(1e-4);
            let reports = op_suite(args.seed)?;
            let mut bad = Vec::new();
            for (name, r) in &reports {
                let ok = r.max_rel_err < tol;
                println!(
                    "op {name:<16} probes {:<5} max_rel_err {:.3e} {}",
                    r.probes,
                    r.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
                kv.push((format!("ops.{name}"), format!("{:.3e}", r.max_rel_err)));
                if !ok {
                    bad.push(format!("{name} ({:.3e})", r.max_rel_err));
                }
            }
            bad
        }
        "model" => {
            let tol = args.tolerance.unwrap_or(1e-3);
            let r = model_suite(args.seed, args.probes.max(1))?;
            let ok = r.max_rel_err < tol;
            println!(
                "model probes {} max_rel_err {:.3e} {}",
                r.probes,
                r.max_rel_err,
                if ok { "ok" } else { "FAIL" }
            );
            kv.push(("model".to_string(), format!("{:.3e}", r.max_rel_err)));
            if ok {
                Vec::new()
            } else {
                vec![format!("model ({:.3e})", r.max_rel_err)]
            }
        }
        other => {
            return Err(Error::parse(format!(
                "unknown scope {other:?}; expected ops or model"
            )))
        }
    };
    if let Some(path) = &args.out {
        write_kv(path, &kv)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::data(format!(
            "gradient check failed: {}",
            failures.join(", ")
        )))
    }
}

/// Reads a matrix either from a checkpoint (first rank-2 record) or from a
/// text file of whitespace-separated rows.
fn read_matrix(path: &Path) -> Result<(String, Array<f64>)> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&checkpoint::MAGIC) {
        let records = checkpoint::read_records(path)?;
        let rec = records
            .into_iter()
            .find(|r| r.shape.len() == 2)
            .ok_or_else(|| Error::data("checkpoint contains no matrix record"))?;
        let data: Vec<f64> = rec.data.iter().map(|&v| v as f64).collect();
        return Ok((rec.name.clone(), Array::new(rec.shape, data)?));
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::parse("matrix file is neither a checkpoint nor UTF-8 text"))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::parse(format!("line {}: bad number {tok:?}", i + 1)))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::parse(format!(
                    "line {}: expected {} columns, got {}",
                    i + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data("matrix file is empty"));
    }
    let shape = vec![rows.len(), rows[0].len()];
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(("matrix".to_string(), Array::new(shape, data)?))
}

fn run_decompose(args: &DecomposeArgs) -> Result<()> {
    if args.n < 2 {
        return Err(Error::config("chain length n must be at least 2"));
    }
    let (name, w) = read_matrix(&args.input)?;
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let result = match (args.r, args.tolerance) {
        (Some(r), None) => {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config("r must lie in (0, 1]"));
            }
            if r == 1.0 {
                // A full budget asks for losslessness: keep every singular
                // value rather than truncating to the budgeted bond.
                decompose(&w, DecomposeTarget::Tolerance { n: args.n, tol: 0.0 })?
            } else {
                let plan = plan_factors(rows, cols, args.n, r)?;
                decompose(&w, DecomposeTarget::Plan(&plan))?
            }
        }
        (None, Some(tol)) => {
            if !(tol >= 0.0 && tol.is_finite()) {
                return Err(Error::config("tolerance must be finite and >= 0"));
            }
            decompose(&w, DecomposeTarget::Tolerance { n: args.n, tol })?
        }
        _ => return Err(Error::config("pass exactly one of --r or --tolerance")),
    };
    let plan = &result.layer.plan;
    let params_before = rows * cols;
    let params_after: usize = result.layer.factors.iter().map(|f| f.numel()).sum();
    println!("input {name} [{rows}x{cols}]");
    println!(
        "chain n {} bond {} a {:?} c {:?}",
        plan.n(),
        plan.bond,
        plan.a,
        plan.c
    );
    println!("params_before {params_before}");
    println!("params_after {params_after}");
    println!("rel_frobenius_error {:.6e}", result.rel_error);

    let mut records = Vec::with_capacity(plan.n() + 1);
    for (i, f) in result.layer.factors.iter().enumerate() {
        let data: Vec<f32> = f.data().iter().map(|&v| v as f32).collect();
        records.push(Record::new(format!("f{i}"), f.shape().to_vec(), data)?);
    }
    records.push(Record::from_text(
        "meta/tc",
        &format!(
            "a={:?};c={:?};bond={};r_target={};r_actual={}",
            plan.a, plan.c, plan.bond, plan.r_target, plan.r_actual
        ),
    ));
    checkpoint::write_records(&args.out_ckpt, &records)?;
    println!("wrote factors to {}", args.out_ckpt.display());
    if let Some(path) = &args.out {
        write_kv(
            path,
            &[
                ("rows".to_string(), rows.to_string()),
                ("cols".to_string(), cols.to_string()),
                ("bond".to_string(), plan.bond.to_string()),
                ("params_before".to_string(), params_before.to_string()),
                ("params_after".to_string(), params_after.to_string()),
                (
                    "rel_frobenius_error".to_string(),
                    format!("{:.6e}", result.rel_error),
                ),
            ],
        )?;
    }
    Ok(())
}

fn run_generate(args: &GenerateArgs) -> Result<()> {
    let (model, vocab) = checkpoint::load_model(&args.ckpt)?;
    let sources: Vec<Vec<usize>> = args.input.iter().map(|s| vocab.encode(s)).collect();
    let decoded = greedy_decode(&model, &sources, args.max_len, data::BOS, data::EOS)?;
    let mut kv = Vec::new();
    for (src, ids) in args.input.iter().zip(&decoded) {
        let text = vocab.decode(ids);
        println!("{text}");
        kv.push((src.clone(), text));
    }
    if let Some(path) = &args.out {
        write_kv(path, &kv)?;
    }
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let kind = SynthKind::parse(&args.task)?;
    let text = data::synth_task(
        kind,
        args.n_pairs,
        (args.len_min, args.len_max),
        &args.alphabet,
        args.seed,
    )?;
    match &args.out {
        Some(path) => {
            fs::write(path, &text)?;
            println!("wrote {} pairs to {}", args.n_pairs, path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::CountParams(a) => run_count_params(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Gradcheck(a) => run_gradcheck(a),
        Cmd::Decompose(a) => run_decompose(a),
        Cmd::Generate(a) => run_generate(a),
        Cmd::Synth(a) => run_synth(a),
    }
}

/// Restore the default SIGPIPE disposition so piped output (e.g. into
/// `head`) terminates the process quietly instead of panicking on a
/// closed stdout.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
