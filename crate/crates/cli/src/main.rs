use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sign_lookup::datastore::{self, Corpus, Split};
use sign_lookup::features::{extract_adaptive_query, extract_target_sequence, FeatureExtractor, ProjectionExtractor};
use sign_lookup::metrics::{evaluate, segments_from_frames, ScoredWindow, DEFAULT_KS};
use sign_lookup::model::{tiny_grad_check, ModelConfig};
use sign_lookup::numerics::gradcheck::DEFAULT_EPS;
use sign_lookup::synthgen::{gen_corpus, SynthConfig};
use sign_lookup::training::{fit_corpus, spot_probabilities, TrainConfig, HISTORY_HEADER, WINDOW_LEN, WINDOW_STRIDE};
use sign_lookup::Error;

const SEED_ENV: &str = "SIGNLOOKUP_SEED";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "sign-lookup", version, about = "One-shot sign spotting on frame-vector clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Score every frame of a target clip for one query clip.
    Spot(SpotArgs),
    /// Frame accuracy and segmental F1 of a prediction file.
    Eval(EvalArgs),
    /// Check analytic gradients of a tiny model against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// History CSV; defaults to the model path with `.history.csv` appended.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct SpotArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Segment TSV; defaults to the CSV path with a `.tsv` extension.
    #[arg(long)]
    segments: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f32>,
    /// Gloss id written into the segment file.
    #[arg(long, default_value_t = 0)]
    gloss: u32,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS.to_vec())]
    k: Vec<u32>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SpotConfig {
    threshold: f32,
    window: usize,
    stride: usize,
}

impl Default for SpotConfig {
    fn default() -> Self {
        SpotConfig {
            threshold: 0.5,
            window: WINDOW_LEN,
            stride: WINDOW_STRIDE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CliConfig {
    model: ModelConfig,
    train: TrainConfig,
    synth: SynthConfig,
    spot: SpotConfig,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => 3,
            Error::Divergence { .. } => 4,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

type CmdResult = Result<(), Failure>;

/// Config file (or defaults), with which seed keys the file set explicitly.
fn load_config(path: Option<&Path>) -> Result<(CliConfig, Value), Failure> {
    let Some(path) = path else {
        return Ok((CliConfig::default(), Value::Null));
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let cfg: CliConfig = serde_json::from_value(raw.clone()).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.synth.validate()?;
    Ok((cfg, raw))
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// `--seed`, else a seed written in the config file, else the environment,
/// else the built-in default.
fn resolve_seed(flag: Option<u64>, raw: &Value, section: &str, current: u64) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if raw.get(section).and_then(|v| v.get("seed")).is_some() {
        return Ok(current);
    }
    Ok(env_seed()?.unwrap_or(current))
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let (mut cfg, raw) = load_config(a.config.as_deref())?;
    cfg.synth.seed = resolve_seed(a.seed, &raw, "synth", cfg.synth.seed)?;
    let corpus = gen_corpus(&cfg.synth, &a.out)?;
    let val = corpus.split(Split::Val).count();
    println!("dictionary clips: {}", corpus.dictionary.len());
    println!("target clips: {} ({} train, {} val)", corpus.targets.len(), corpus.targets.len() - val, val);
    println!("annotation files: {}", corpus.targets.len());
    println!("manifest: {}", a.out.join(datastore::MANIFEST_FILE).display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let (mut cfg, raw) = load_config(a.config.as_deref())?;
    cfg.train.seed = resolve_seed(a.seed, &raw, "train", cfg.train.seed)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let corpus: Corpus = datastore::load_corpus(&a.data)?;
    let history_path = a.history.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    let mut history = File::create(&history_path).map_err(|e| io_failure(&history_path, e))?;
    writeln!(history, "{HISTORY_HEADER}").map_err(|e| io_failure(&history_path, e))?;
    let mut write_err = None;
    let outcome = fit_corpus(&corpus, &cfg.model, &cfg.train, |r| {
        eprintln!("epoch {} train {:.4} val {:.4} acc {:.4} lr {:.0e}", r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr);
        if let Err(e) = writeln!(history, "{}", r.csv_line()).and_then(|_| history.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_failure(&history_path, e));
    }
    datastore::save_model(&a.out, &outcome.model, outcome.extractor.spec())?;
    match outcome.history.last() {
        Some(r) => println!("final validation accuracy: {:.4}", r.val_acc),
        None => println!("no epochs run; wrote initialized model"),
    }
    println!("model: {}", a.out.display());
    println!("history: {}", history_path.display());
    Ok(())
}

fn cmd_spot(a: SpotArgs) -> CmdResult {
    let (cfg, _) = load_config(a.config.as_deref())?;
    let threshold = a.threshold.unwrap_or(cfg.spot.threshold);
    let (model, spec) = datastore::load_model(&a.model)?;
    let ex = ProjectionExtractor::from(spec);
    let query = datastore::read_clip(&a.query)?;
    let target = datastore::read_clip(&a.target)?;
    for (what, clip) in [("query", &query), ("target", &target)] {
        if clip.d_frame() != ex.d_frame() {
            return Err(usage(format!(
                "{what} frames have width {}, model expects {}",
                clip.d_frame(),
                ex.d_frame()
            )));
        }
    }
    let x = extract_adaptive_query(&query, &ex, model.config().levels)?;
    let y = extract_target_sequence(&target, &ex)?;
    let probs = spot_probabilities(&model, &x, &y, cfg.spot.window, cfg.spot.stride)?;
    datastore::write_predictions(&a.out, &probs)?;
    let segs = segments_from_frames(&probs, threshold, a.gloss);
    let seg_path = a.segments.unwrap_or_else(|| a.out.with_extension("tsv"));
    datastore::write_annotations(&seg_path, &segs)?;
    println!("frames: {}", probs.len());
    println!("segments: {}", segs.len());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let probs = datastore::read_predictions(&a.pred)?;
    let gt = datastore::read_annotations(&a.gt)?;
    if probs.is_empty() {
        return Err(usage(format!("{}: no frames", a.pred.display())));
    }
    if let Some(s) = gt.iter().find(|s| s.end > probs.len()) {
        return Err(usage(format!(
            "annotation [{}, {}) extends past the {} predicted frames",
            s.start,
            s.end,
            probs.len()
        )));
    }
    let report = evaluate(&[ScoredWindow { probs, gt }], a.threshold, &a.k)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("Acc {:.3}", report.acc);
        for (k, f) in &report.f1 {
            println!("F1@{k} {f:.3}");
        }
        println!("{}", report.table_row());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let r = tiny_grad_check(seed, DEFAULT_EPS)?;
    println!("max relative error: {:.3e}", r.report.max_rel_error);
    println!(
        "checked {} of {} scalars, {} skipped at kinks",
        r.report.checked, r.num_scalars, r.report.skipped
    );
    if r.report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            msg: format!(
                "gradient check failed: worst parameter {}[{}]",
                r.worst_name, r.report.worst_index
            ),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Spot(a) => cmd_spot(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
