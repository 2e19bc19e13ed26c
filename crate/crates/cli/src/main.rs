//! `hico`: corpus generation, training, evaluation, gradient self-check and
//! the sampling-theory experiment.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use hico::eval::{evaluate, EmbedOptions, ProbeConfig};
use hico::gradcheck::{run_gradcheck, Component, Mutation, GRADCHECK_TOL};
use hico::losses::{ConcatMode, TopicalPairs};
use hico::model::{HicoModel, ModelConfig};
use hico::numerics::Rng;
use hico::theory::{run_comparison, ComparisonConfig};
use hico::timeline::{generate_corpus, Corpus, CorpusConfig, EVAL_VIDEO_OFFSET};
use hico::trainer::{train, TrainConfig};

use manifest::RunManifest;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "hico", version, about = "Hierarchical video-clip contrastive pretraining on synthetic timelines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Pretrain a model on a corpus.
    Train(TrainArgs),
    /// Linear probe and retrieval on frozen embeddings.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Random vs gradual sampling on the two-group quadratic problem.
    Theory(TheoryArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON file whose keys override the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Untrimmed,
    Trimmed,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "untrimmed")]
    mode: Mode,
    /// Draw videos disjoint from any training corpus of the same seed.
    #[arg(long)]
    eval_split: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Concat {
    Bi,
    Uni,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    /// Sample visual pairs from anywhere in the video.
    #[arg(long)]
    no_vcl: bool,
    /// Drop the topical clip: no extra negatives, no pair prediction.
    #[arg(long)]
    no_tcl: bool,
    /// Use the final sampling caps from the first epoch.
    #[arg(long)]
    no_gs: bool,
    /// Visual pair distance cap in seconds.
    #[arg(long)]
    delta_cap: Option<f64>,
    /// Topical clip distance cap in seconds, or `inf`.
    #[arg(long, value_parser = parse_cap)]
    topical_cap: Option<f64>,
    #[arg(long, value_enum)]
    concat: Option<Concat>,
    /// Keep topical clips out of the contrastive negative pool.
    #[arg(long)]
    no_vk_neg: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, required_unless_present = "random_init", conflicts_with = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Evaluate an untrained model initialized from `--seed`.
    #[arg(long)]
    random_init: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Negate one component's analytic gradient (self-test of the checker).
    #[arg(long, hide = true)]
    inject_sign_flip: Option<String>,
}

#[derive(Debug, Args)]
struct TheoryArgs {
    #[command(flatten)]
    common: Common,
    /// Zero weak-growth constant and group-optimum gap.
    #[arg(long)]
    control: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    embed: EmbedOptions,
    probe: ProbeConfig,
    /// Architecture for `--random-init`.
    model: ModelConfig,
}

fn parse_cap(s: &str) -> Result<f64, String> {
    match s {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        _ => s.parse::<f64>().map_err(|e| format!("{s}: {e}")),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<hico::Error> for Failure {
    fn from(e: hico::Error) -> Self {
        use hico::Error as E;
        match e {
            E::NonFiniteLoss { .. } | E::Divergence { .. } | E::NonFiniteEvaluation { .. } | E::DegenerateVector { .. } => {
                Failure::Numeric(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<Vec<String>, Failure>;

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with the keys of the JSON file at `path` laid over it. Unknown
/// keys are rejected by name.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return serde_json::to_value(base)
            .and_then(serde_json::from_value)
            .map_err(|e| Failure::Usage(e.to_string()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let over: Value = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut value = serde_json::to_value(base).map_err(|e| Failure::Usage(e.to_string()))?;
    merge(&mut value, over);
    serde_json::from_value(value).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write(out: &Path, name: &str, contents: &str, written: &mut Vec<String>) -> Result<(), Failure> {
    std::fs::write(out.join(name), contents)?;
    written.push(name.to_string());
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("corpus not found: {}", path.display())));
    }
    Ok(Corpus::load(path)?)
}

fn cmd_gen(a: &GenArgs) -> Outcome {
    let base = match a.mode {
        Mode::Untrimmed => CorpusConfig::untrimmed(),
        Mode::Trimmed => CorpusConfig::trimmed(),
    };
    let mut cfg = overlay(&base, a.common.config.as_deref())?;
    if a.eval_split {
        cfg.video_offset = EVAL_VIDEO_OFFSET;
    }
    let corpus = generate_corpus(&cfg, &Rng::new(a.common.seed.unwrap_or(0)))?;
    let mut written = Vec::new();
    write(&a.common.out, "corpus.json", &corpus.to_json()?, &mut written)?;
    write(&a.common.out, "corpus_config.json", &to_json(&cfg)?, &mut written)?;
    println!("{} videos, {} topics -> {}", corpus.len(), corpus.n_topics, a.common.out.join("corpus.json").display());
    Ok(written)
}

fn cmd_train(a: &TrainArgs) -> Outcome {
    let corpus = load_corpus(&a.corpus)?;
    let mut cfg = overlay(&TrainConfig::default(), a.common.config.as_deref())?;
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    if let Some(d) = a.delta_cap {
        cfg.sampler.delta_cap = d;
    }
    if let Some(d) = a.topical_cap {
        cfg.sampler.topical_cap = d;
    }
    if a.no_vcl {
        cfg.sampler.delta_cap = f64::INFINITY;
    }
    if a.no_tcl {
        cfg.loss.enable_tcl = false;
        cfg.loss.include_vk_negatives = false;
        cfg.loss.topical_pairs = TopicalPairs::None;
    }
    if a.no_gs {
        cfg.sampler.gs_visual = false;
        cfg.sampler.gs_topical = false;
    }
    if let Some(c) = a.concat {
        cfg.loss.concat_mode = match c {
            Concat::Bi => ConcatMode::Bidirectional,
            Concat::Uni => ConcatMode::Unidirectional,
        };
    }
    if a.no_vk_neg {
        cfg.loss.include_vk_negatives = false;
    }
    cfg.validate()?;
    let (model, log) = train(&corpus, &cfg)?;
    let mut written = Vec::new();
    write(&a.common.out, "train_config.json", &to_json(&cfg)?, &mut written)?;
    model.save(&a.common.out.join("checkpoint.json"))?;
    written.push("checkpoint.json".into());
    log.save(&a.common.out.join("metrics.csv"))?;
    written.push("metrics.csv".into());
    if let Some(last) = log.last() {
        println!("epoch {}: l_cl {:.4} l_tp {:.4} total {:.4}", last.epoch, last.l_cl, last.l_tp, last.total);
    }
    Ok(written)
}

fn cmd_eval(a: &EvalArgs) -> Outcome {
    let corpus = load_corpus(&a.corpus)?;
    let cfg = overlay(&EvalConfig::default(), a.common.config.as_deref())?;
    let seed = a.common.seed.unwrap_or(0);
    let model = match &a.checkpoint {
        Some(path) => HicoModel::load(path)?,
        None => {
            let mc = ModelConfig {
                d_feat: corpus.d_feat(),
                ..cfg.model
            };
            HicoModel::init(&mc, &Rng::new(seed))?
        }
    };
    let report = evaluate(&model, &corpus, &cfg.embed, &cfg.probe, seed)?;
    let mut written = Vec::new();
    write(&a.common.out, "eval.csv", &report.to_csv()?, &mut written)?;
    write(&a.common.out, "summary.txt", &report.summary(), &mut written)?;
    print!("{}", report.summary());
    Ok(written)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Outcome {
    let sign_flip = match &a.inject_sign_flip {
        Some(name) => Some(Component::from_name(name).ok_or_else(|| Failure::Usage(format!("unknown component {name}")))?),
        None => None,
    };
    let reports = run_gradcheck(a.points, a.seed, Mutation { sign_flip })?;
    let mut csv = String::from("component,points,worst_rel_error,passed\n");
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<15} worst rel err {:.3e} over {} points", r.component.name(), r.worst_rel_error, r.points);
        csv.push_str(&format!("{},{},{:e},{}\n", r.component.name(), r.points, r.worst_rel_error, r.passed()));
        if !r.passed() {
            failed.push(r.component.name());
        }
    }
    let mut written = Vec::new();
    write(&a.out, "gradcheck.csv", &csv, &mut written)?;
    if failed.is_empty() {
        Ok(written)
    } else {
        Err(Failure::Numeric(format!("gradient check above {GRADCHECK_TOL:e}: {}", failed.join(", "))))
    }
}

fn cmd_theory(a: &TheoryArgs) -> Outcome {
    let mut cfg = overlay(&ComparisonConfig::default(), a.common.config.as_deref())?;
    if let Some(seed) = a.common.seed {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (seed..seed + n).collect();
    }
    if a.control {
        cfg.h = 0.0;
        cfg.delta_hat = 0.0;
    }
    let s = run_comparison(&cfg)?;
    let summary = format!(
        "seeds: {}\nmean excess risk RS: {:.6e}\nmean excess risk GS: {:.6e}\nmean gap RS-GS: {:.6e}\n95% CI: [{:.6e}, {:.6e}]\nsignificant: {}\n",
        cfg.seeds.len(),
        s.mean_rs,
        s.mean_gs,
        s.mean_gap,
        s.ci.0,
        s.ci.1,
        s.gap_is_significant()
    );
    let mut written = Vec::new();
    write(&a.common.out, "theory.csv", &s.to_csv()?, &mut written)?;
    write(&a.common.out, "summary.txt", &summary, &mut written)?;
    write(&a.common.out, "theory_config.json", &to_json(&cfg)?, &mut written)?;
    print!("{summary}");
    Ok(written)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("HICO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Failure::Usage(format!("HICO_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(Failure::Usage("HICO_THREADS must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let (name, config, seed, out): (&str, Option<&Path>, Option<u64>, &Path) = match &cli.cmd {
        Cmd::Gen(a) => ("gen", a.common.config.as_deref(), a.common.seed, &a.common.out),
        Cmd::Train(a) => ("train", a.common.config.as_deref(), a.common.seed, &a.common.out),
        Cmd::Eval(a) => ("eval", a.common.config.as_deref(), a.common.seed, &a.common.out),
        Cmd::Gradcheck(a) => ("gradcheck", None, Some(a.seed), &a.out),
        Cmd::Theory(a) => ("theory", a.common.config.as_deref(), a.common.seed, &a.common.out),
    };
    let manifest = RunManifest::start(name, config, seed, out)?;
    let result = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Theory(a) => cmd_theory(a),
    };
    match result {
        Ok(written) => Ok(manifest.finish(0, written)?),
        Err(f) => {
            manifest.finish(f.code() as i32, Vec::new())?;
            Err(f)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Numeric(m) => eprintln!("numeric failure: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
