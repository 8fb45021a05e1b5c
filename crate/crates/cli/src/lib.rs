//! `flowgen` subcommands. Exit codes: 0 success, 1 user or configuration
//! error, 2 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use flowgen_core::eval::{
    aggregate, emit_report, read_records_jsonl, rmse_baseline, topk_stats, verify_distribution, write_records_jsonl,
    MetricThresholds, MoleculeRecord, PocketResult,
};
use flowgen_core::fraggraph::{FragEnv, FragmentVocabulary, ENUMERATION_BUDGET};
use flowgen_core::gfn::{
    finetune, sample_unique, thread_pool, train, ComposedReward, DoubleGfn, RewardSource, TopK, TrainerConfig,
    DEFAULT_TOP_K, FINETUNE_BATCH, FINETUNE_STEPS, LOG_HEADER,
};
use flowgen_core::pocket::{load_pockets, parse_pocket};
use flowgen_core::policy::condition;
use flowgen_core::proxy::{read_docking_records, rmse, train_proxy, ProxyTrainConfig};
use flowgen_core::reward::{Scorer, ScorerBinding};
use flowgen_core::vocab::{build_vocabulary_with_stats, read_corpus, DecompositionRules};
use flowgen_core::Error;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Oracle(_)
            | Error::BudgetExceeded(_)
            | Error::Nn(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::NonFinite(_) => 2,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "flowgen", about = "Pocket-conditioned fragment GFlowNet", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration value, e.g. `--set trainer.steps=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScorerKind {
    Synthetic,
    /// External process named by FLOWGEN_ORACLE_CMD.
    Oracle,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ScorerArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    pub scorer: ScorerKind,
    /// Use a trained docking-score predictor instead.
    #[arg(long)]
    pub proxy_checkpoint: Option<PathBuf>,
}

impl ScorerArgs {
    fn binding(&self) -> ScorerBinding {
        match (&self.proxy_checkpoint, self.scorer) {
            (Some(p), _) => ScorerBinding::Proxy { checkpoint: p.clone() },
            (None, ScorerKind::Synthetic) => ScorerBinding::Synthetic,
            (None, ScorerKind::Oracle) => ScorerBinding::Oracle { command: vec![], timeout_secs: 120.0 },
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Decompose a corpus into a fragment vocabulary.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        /// Decomposition rules (JSON); defaults when absent.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        min_count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional policy on a pocket set.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the docking-score predictor.
    TrainProxy {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Fine-tune a pretrained checkpoint on one pocket.
    Finetune {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Draw unique molecules for a pocket.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pocket: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 64.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Compare sampled frequencies with the exact tempered reward distribution.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pocket: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = ENUMERATION_BUDGET)]
        budget: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Metrics and report files for a molecule record set.
    Eval {
        /// Records as JSON lines (as written by `sample`).
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        reference_ds: Option<f64>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every seed below when present.
    #[serde(default)]
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    /// A pocket file or a directory of pocket files.
    #[serde(default)]
    pub pockets: Option<PathBuf>,
    #[serde(default)]
    pub scorer: ScorerBinding,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub verify: Option<VerifySection>,
    #[serde(default)]
    pub finetune: Option<FinetuneSection>,
    #[serde(default)]
    pub proxy: Option<ProxySection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub beta: f64,
    pub n_samples: usize,
    pub budget: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { beta: 1.0, n_samples: 10_000, budget: ENUMERATION_BUDGET }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub checkpoint: PathBuf,
    pub pocket: PathBuf,
    #[serde(default = "finetune_steps")]
    pub steps: usize,
    #[serde(default = "finetune_batch")]
    pub batch_size: usize,
    #[serde(default = "top_k")]
    pub top_k: usize,
}

fn finetune_steps() -> usize {
    FINETUNE_STEPS
}

fn finetune_batch() -> usize {
    FINETUNE_BATCH
}

fn top_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySection {
    pub records: PathBuf,
    #[serde(default)]
    pub train: ProxyTrainConfig,
}

/// Sets `key` (dot-separated) in a JSON object tree, creating objects on the way.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| CliError::user(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::user(format!("empty key segment in `{key}`")));
        }
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().ok_or_else(|| CliError::user(format!("`{key}`: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Object(Default::default()));
    }
    Ok(())
}

fn require_exists(what: &str, path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::user(format!("{what} {} does not exist", path.display())))
    }
}

/// Reads, overrides, deserializes and validates a run configuration.
pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cfg.seed {
        cfg.trainer.seed = seed;
        if let Some(p) = cfg.proxy.as_mut() {
            p.train.seed = seed;
        }
    }
    cfg.trainer.validate()?;
    for (what, p) in [("vocabulary", &cfg.vocabulary), ("pockets", &cfg.pockets)] {
        if let Some(p) = p {
            require_exists(what, p)?;
        }
    }
    if let Some(f) = &cfg.finetune {
        require_exists("finetune checkpoint", &f.checkpoint)?;
        require_exists("finetune pocket", &f.pocket)?;
        if f.batch_size == 0 {
            return Err(CliError::user("finetune batch_size must be positive"));
        }
    }
    if let Some(p) = &cfg.proxy {
        require_exists("docking records", &p.records)?;
    }
    if let ScorerBinding::Proxy { checkpoint } = &cfg.scorer {
        require_exists("proxy checkpoint", checkpoint)?;
    }
    Ok(cfg)
}

fn workers(n: Option<usize>) -> usize {
    n.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn required<'a>(what: &str, p: &'a Option<PathBuf>) -> CliResult<&'a PathBuf> {
    p.as_ref().ok_or_else(|| CliError::user(format!("configuration needs `{what}`")))
}

fn log_writer(path: &Path, append: bool) -> CliResult<csv::Writer<File>> {
    let fresh = !append || !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(LOG_HEADER).map_err(|e| io_err(path, e))?;
        w.flush().map_err(|e| io_err(path, e))?;
    }
    Ok(w)
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::BuildVocab { corpus, rules, min_count, out } => cmd_build_vocab(&corpus, rules.as_deref(), min_count, &out),
        Command::Train { args, resume } => cmd_train(&load_config(&args.config, &args.overrides)?, workers(args.workers), resume),
        Command::TrainProxy { args } => cmd_train_proxy(&load_config(&args.config, &args.overrides)?, workers(args.workers)),
        Command::Finetune { args } => cmd_finetune(&load_config(&args.config, &args.overrides)?, workers(args.workers)),
        Command::Sample { checkpoint, pocket, n, beta, seed, out, workers: w, scorer } => {
            cmd_sample(&checkpoint, &pocket, n, beta, seed, &out, workers(w), &scorer.binding())
        }
        Command::Verify { checkpoint, pocket, beta, n, seed, budget, out, workers: w, scorer } => {
            cmd_verify(&checkpoint, &pocket, beta, n, seed, budget, out.as_deref(), workers(w), &scorer.binding())
        }
        Command::Eval { records, thresholds, reference_ds, top_k, out } => {
            cmd_eval(&records, thresholds.as_deref(), reference_ds, top_k, &out)
        }
    }
}

pub fn cmd_build_vocab(corpus: &Path, rules: Option<&Path>, min_count: Option<usize>, out: &Path) -> CliResult<()> {
    let mut rules: DecompositionRules = match rules {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::user(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", p.display())))?
        }
        None => DecompositionRules::default(),
    };
    if let Some(m) = min_count {
        rules.min_count = m;
    }
    rules.validate()?;
    let mols = read_corpus(corpus)?;
    let (vocab, stats) = build_vocabulary_with_stats(&mols, &rules)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(out, vocab.to_json()?).map_err(|e| io_err(out, e))?;
    println!(
        "{} fragments kept of {} distinct (threshold {} molecules, corpus {})",
        vocab.len(),
        stats.distinct_fragments,
        stats.threshold,
        mols.len()
    );
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for c in &stats.counts {
        *hist.entry(c.next_power_of_two()).or_insert(0) += 1;
    }
    println!("molecules containing fragment (upper bound) : fragments");
    for (b, k) in hist {
        println!("  <= {b:>8} : {k}");
    }
    println!("hash {}", vocab.version_hash);
    Ok(())
}

fn composed(binding: &ScorerBinding, model: &DoubleGfn) -> CliResult<ComposedReward> {
    Ok(ComposedReward { scorer: Scorer::from_binding(binding)?, spec: model.config.reward })
}

pub fn cmd_train(cfg: &RunConfig, workers: usize, resume: bool) -> CliResult<()> {
    let vocab = FragmentVocabulary::load(required("vocabulary", &cfg.vocabulary)?)?;
    let pockets = load_pockets(required("pockets", &cfg.pockets)?)?;
    for p in &pockets {
        p.validate()?;
    }
    let out = &cfg.output_dir;
    let ckpt = out.join("checkpoint");
    let mut model = if resume && ckpt.join("meta.json").exists() {
        let (mut m, v) = DoubleGfn::load(&ckpt)?;
        if v.version_hash != vocab.version_hash {
            return Err(CliError::user("checkpoint was trained with a different vocabulary"));
        }
        m.config.steps = cfg.trainer.steps;
        m
    } else {
        DoubleGfn::new(cfg.trainer.clone(), &vocab)?
    };
    let mut rewards = ComposedReward { scorer: Scorer::from_binding(&cfg.scorer)?, spec: cfg.trainer.reward };
    let pool = thread_pool(workers)?;
    create_dir(out)?;
    let env = FragEnv::new(Arc::new(vocab), model.config.max_nodes);
    let ctx = model.pocket_contexts(&pockets)?;

    let mut verify_log = match &cfg.verify {
        Some(_) => Some(csv_writer(&out.join("verify_log.csv"), &["step", "pocket_id", "beta", "tv", "exact_tv"], resume)?),
        None => None,
    };
    let mut check = |model: &DoubleGfn, rewards: &mut ComposedReward| -> CliResult<()> {
        if let (Some(v), Some(w)) = (&cfg.verify, verify_log.as_mut()) {
            let r = verify_distribution(
                &model.net, &model.target, &env, &ctx[0], rewards, v.beta, v.n_samples, model.config.seed, v.budget, &pool,
            )?;
            println!("step {:>6}  TV {:.4}  exact TV {:.4}  ({})", model.step, r.tv, r.exact_tv, ctx[0].pocket.id);
            w.write_record([
                model.step.to_string(),
                ctx[0].pocket.id.clone(),
                v.beta.to_string(),
                format!("{:.6}", r.tv),
                format!("{:.6}", r.exact_tv),
            ])
            .and_then(|_| w.flush().map_err(Into::into))
            .map_err(|e| CliError::runtime(e.to_string()))?;
        }
        Ok(())
    };
    check(&model, &mut rewards)?;
    let t0 = Instant::now();
    let mut log = log_writer(&out.join("train_log.csv"), resume)?;
    let hist = train(&mut model, &env, &ctx, &mut rewards, &pool, Some(&mut log), Some(&ckpt))?;
    if let Some(last) = hist.last() {
        println!(
            "trained to step {} in {:.1}s: loss {:.4}, mean reward {:.4}, mean log Z {:.4}",
            model.step,
            t0.elapsed().as_secs_f64(),
            last.loss,
            last.mean_reward,
            last.mean_log_z
        );
    } else {
        println!("no steps to run; checkpoint at step {}", model.step);
    }
    check(&model, &mut rewards)?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn csv_writer(path: &Path, header: &[&str], append: bool) -> CliResult<csv::Writer<File>> {
    let fresh = !append || !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| io_err(path, e))?;
    }
    Ok(w)
}

#[derive(Serialize)]
struct ProxyReport {
    train_pockets: Vec<String>,
    validation_pockets: Vec<String>,
    best_iteration: usize,
    best_validation_loss: f64,
    validation_rmse: f64,
    baseline_rmse: f64,
}

pub fn cmd_train_proxy(cfg: &RunConfig, _workers: usize) -> CliResult<()> {
    let section = cfg.proxy.as_ref().ok_or_else(|| CliError::user("configuration needs a `proxy` section"))?;
    let vocab = FragmentVocabulary::load(required("vocabulary", &cfg.vocabulary)?)?;
    let pockets = load_pockets(required("pockets", &cfg.pockets)?)?;
    let records = read_docking_records(&section.records)?;
    let t0 = Instant::now();
    let report = train_proxy(&records, &pockets, &vocab, &section.train)?;
    let val: Vec<_> = records.iter().filter(|r| report.validation_pockets.contains(&r.pocket_id)).cloned().collect();
    let train_targets: Vec<f64> =
        records.iter().filter(|r| !report.validation_pockets.contains(&r.pocket_id)).map(|r| r.ds).collect();
    let validation_rmse = rmse(&report.model, &val, &pockets, &vocab)?;
    let baseline_rmse = rmse_baseline(&train_targets, &val.iter().map(|r| r.ds).collect::<Vec<_>>())?;
    create_dir(&cfg.output_dir)?;
    let dir = cfg.output_dir.join("proxy");
    report.model.save(&dir)?;
    let summary = ProxyReport {
        train_pockets: report.train_pockets.clone(),
        validation_pockets: report.validation_pockets.clone(),
        best_iteration: report.best_iteration,
        best_validation_loss: report.best_validation_loss,
        validation_rmse,
        baseline_rmse,
    };
    let path = cfg.output_dir.join("proxy_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).map_err(|e| CliError::runtime(e.to_string()))?)
        .map_err(|e| io_err(&path, e))?;
    let mut w = csv_writer(&cfg.output_dir.join("proxy_log.csv"), &["iteration", "loss"], false)?;
    for (i, l) in report.losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.9e}")]).map_err(|e| CliError::runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    println!(
        "proxy trained in {:.1}s: validation RMSE {validation_rmse:.4} vs constant-mean {baseline_rmse:.4} ({} validation pockets)",
        t0.elapsed().as_secs_f64(),
        summary.validation_pockets.len()
    );
    println!("model: {}", dir.display());
    Ok(())
}

fn topk_records(top: &TopK, pocket_id: &str) -> Vec<MoleculeRecord> {
    top.sorted().iter().map(|e| MoleculeRecord::new(pocket_id, &e.molecule, e.triple, e.reward)).collect()
}

pub fn cmd_finetune(cfg: &RunConfig, workers: usize) -> CliResult<()> {
    let f = cfg.finetune.as_ref().ok_or_else(|| CliError::user("configuration needs a `finetune` section"))?;
    let (mut model, vocab) = DoubleGfn::load(&f.checkpoint)?;
    let pocket = parse_pocket(&f.pocket)?;
    pocket.validate()?;
    if f.batch_size == 0 {
        return Err(CliError::user("finetune batch_size must be positive"));
    }
    model.config.batch_size = f.batch_size;
    if let Some(seed) = cfg.seed {
        model.config.seed = seed;
    }
    let mut rewards = composed(&cfg.scorer, &model)?;
    let pool = thread_pool(workers)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let env = FragEnv::new(Arc::new(vocab.clone()), model.config.max_nodes);
    let ctx = model.pocket_contexts(std::slice::from_ref(&pocket))?;
    let mut log = log_writer(&out.join("finetune_log.csv"), false)?;
    let mut top = TopK::new(f.top_k);
    let t0 = Instant::now();
    let result = finetune(&mut model, &env, &ctx[0], &mut rewards, &pool, f.steps, &mut top, |s| {
        log.write_record([
            s.step.to_string(),
            format!("{:.9e}", s.loss),
            format!("{:.9e}", s.mean_reward),
            format!("{:.9e}", s.mean_log_z),
            format!("{:.3}", s.trajectories_per_sec),
        ])?;
        log.flush()?;
        Ok(())
    });
    let records = topk_records(&top, &pocket.id);
    write_records_jsonl(&records, &out.join("topk.jsonl"))?;
    if let Err(e) = result {
        return Err(CliError::runtime(format!("fine-tuning stopped: {e}; {} molecules kept in topk.jsonl", records.len())));
    }
    model.save(&out.join("checkpoint"), &vocab)?;
    println!(
        "fine-tuned {} steps in {:.1}s; top-{} mean reward {:.4}",
        f.steps,
        t0.elapsed().as_secs_f64(),
        top.len(),
        top.mean_reward()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    checkpoint: &Path,
    pocket: &Path,
    n: usize,
    beta: f64,
    seed: u64,
    out: &Path,
    workers: usize,
    binding: &ScorerBinding,
) -> CliResult<()> {
    require_exists("checkpoint", checkpoint)?;
    let pocket = parse_pocket(pocket)?;
    pocket.validate()?;
    if n == 0 {
        return Err(CliError::user("n must be positive"));
    }
    let (model, vocab) = DoubleGfn::load(checkpoint)?;
    let mut rewards = composed(binding, &model)?;
    let pool = thread_pool(workers)?;
    let t0 = Instant::now();
    let env = FragEnv::new(Arc::new(vocab), model.config.max_nodes);
    let ctx = model.pocket_contexts(std::slice::from_ref(&pocket))?;
    let cond = condition(&ctx[0].embedding, beta)?;
    let (mols, draws) = sample_unique(&model.net, &model.target, &env, &cond, n, 10 * n, seed, 0.0, &pool)?;
    let sample_secs = t0.elapsed().as_secs_f64();
    let scored = rewards.rewards(&env, &ctx[0], &mols)?;
    let records: Vec<MoleculeRecord> =
        mols.iter().zip(&scored).map(|(m, (t, r))| MoleculeRecord::new(&pocket.id, m, *t, *r)).collect();
    create_dir(out)?;
    write_records_jsonl(&records, &out.join("molecules.jsonl"))?;
    let wall = t0.elapsed().as_secs_f64();
    let result = PocketResult { pocket_id: pocket.id.clone(), records, reference_ds: None, wall_time_secs: wall };
    emit_report(std::slice::from_ref(&result), &MetricThresholds::default(), out)?;
    println!(
        "{} unique molecules from {draws} rollouts in {sample_secs:.2}s sampling, {wall:.2}s total",
        result.records.len()
    );
    if result.records.len() < n {
        return Err(CliError::runtime(format!(
            "only {} unique molecules after the retry budget of {} rollouts",
            result.records.len(),
            10 * n
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_verify(
    checkpoint: &Path,
    pocket: &Path,
    beta: f64,
    n: usize,
    seed: u64,
    budget: usize,
    out: Option<&Path>,
    workers: usize,
    binding: &ScorerBinding,
) -> CliResult<()> {
    require_exists("checkpoint", checkpoint)?;
    let pocket = parse_pocket(pocket)?;
    pocket.validate()?;
    let (model, vocab) = DoubleGfn::load(checkpoint)?;
    let mut rewards = composed(binding, &model)?;
    let pool = thread_pool(workers)?;
    let env = FragEnv::new(Arc::new(vocab), model.config.max_nodes);
    let ctx = model.pocket_contexts(std::slice::from_ref(&pocket))?;
    let report = verify_distribution(&model.net, &model.target, &env, &ctx[0], &mut rewards, beta, n, seed, budget, &pool)?;
    println!(
        "TV {:.6} over {} terminals ({} samples, beta {}); exact model TV {:.6}",
        report.tv,
        report.table.len(),
        n,
        beta,
        report.exact_tv
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("verify.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report).map_err(|e| CliError::runtime(e.to_string()))?)
            .map_err(|e| io_err(&path, e))?;
        let mut w = csv_writer(&dir.join("verify_table.csv"), &["canonical_key", "reward", "target", "empirical", "model"], false)?;
        for r in &report.table {
            w.write_record([
                r.key.clone(),
                format!("{:.9e}", r.reward),
                format!("{:.9e}", r.target),
                format!("{:.9e}", r.empirical),
                format!("{:.9e}", r.model),
            ])
            .map_err(|e| CliError::runtime(e.to_string()))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PocketMetrics {
    #[serde(flatten)]
    aggregate: flowgen_core::eval::Aggregate,
    top_k: Option<flowgen_core::eval::TopKStats>,
}

pub fn cmd_eval(records: &Path, thresholds: Option<&Path>, reference_ds: Option<f64>, k: usize, out: &Path) -> CliResult<()> {
    let t: MetricThresholds = match thresholds {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::user(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", p.display())))?
        }
        None => MetricThresholds::default(),
    };
    require_exists("records", records)?;
    let recs = read_records_jsonl(records)?;
    if recs.is_empty() {
        return Err(CliError::user("no records"));
    }
    let mut by_pocket: BTreeMap<String, Vec<MoleculeRecord>> = BTreeMap::new();
    for r in recs {
        by_pocket.entry(r.pocket_id.clone()).or_default().push(r);
    }
    let results: Vec<PocketResult> = by_pocket
        .into_iter()
        .map(|(pocket_id, records)| PocketResult { pocket_id, records, reference_ds, wall_time_secs: 0.0 })
        .collect();
    emit_report(&results, &t, out)?;
    let mut metrics = Vec::new();
    for r in &results {
        let a = aggregate(r, &t);
        println!(
            "{}: n {} success {:.3} median ds {:.3} qed {:.3} sa {:.3} diversity {}",
            a.pocket_id,
            a.n,
            a.success_rate,
            a.median_ds,
            a.avg_qed,
            a.avg_sa,
            a.diversity.map_or_else(|| "n/a".to_string(), |d| format!("{d:.3}"))
        );
        metrics.push(PocketMetrics { aggregate: a, top_k: topk_stats(&r.records, k).ok() });
    }
    let path = out.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&metrics).map_err(|e| CliError::runtime(e.to_string()))?)
        .map_err(|e| io_err(&path, e))?;
    Ok(())
}
