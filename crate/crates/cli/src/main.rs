use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xdabsa::data::{parse_conll, write_conll, DomainLabel, TransferPair, TransferPaths, UnifiedTag};
use xdabsa::diffcore::gradcheck::CheckOptions;
use xdabsa::evaluation::{attention, evaluate_corpus, predict};
use xdabsa::model::ModelMode;
use xdabsa::synth::SynthSpec;
use xdabsa::training::{check_model_gradients, run_suite, LoadedModel, ToyDims, TrainingConfig, MODEL_CHECK_EPS};

#[derive(Parser)]
#[command(name = "xdabsa", version, about = "Cross-domain end-to-end aspect-based sentiment tagging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and score each on the target test split.
    Train(TrainArgs),
    /// Score a checkpoint on a tagged corpus (AD and ADS micro-F1 as JSON).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Tag a corpus and write it in the token-per-line format.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dump per-hop aspect and opinion attention as JSON.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Write the JSON here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also print a plain-text heat table per sentence.
        #[arg(long)]
        table: bool,
    },
    /// Finite-difference check of the full model at toy sizes.
    GradCheck(GradCheckArgs),
    /// Write a synthetic two-domain corpus and its opinion lexicon.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON file with a complete generator spec.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding source_train.conll, target_train.conll,
    /// source_test.conll, target_test.conll and optionally lexicon.txt.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    source_train: Option<PathBuf>,
    #[arg(long)]
    target_train: Option<PathBuf>,
    #[arg(long)]
    source_test: Option<PathBuf>,
    #[arg(long)]
    target_test: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Pretrained word vectors in word2vec text format; their width must match `embed_dim`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory for logs, checkpoints and the summary.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value = "AD_SAL")]
    mode: String,
    #[arg(long, default_value_t = 3)]
    tokens: usize,
    /// Embedding and hidden size.
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    hops: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = MODEL_CHECK_EPS)]
    eps: f64,
    /// Check at most this many coordinates per parameter.
    #[arg(long)]
    max_coords: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
}

fn resolve_config(a: &TrainArgs) -> Result<TrainingConfig> {
    let mut cfg = TrainingConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_file(p)?;
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(m) = &a.mode {
        cfg.set("mode", m)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = &a.seeds {
        cfg.set("seeds", s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_paths(a: &TrainArgs) -> Result<TransferPaths> {
    let mut p = match &a.data {
        Some(d) => TransferPaths::in_dir(d),
        None => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone().with_context(|| format!("--{flag} is required without --data"))
            };
            TransferPaths {
                source_train: need(&a.source_train, "source-train")?,
                target_train: need(&a.target_train, "target-train")?,
                source_test: need(&a.source_test, "source-test")?,
                target_test: need(&a.target_test, "target-test")?,
                lexicon: None,
            }
        }
    };
    for (field, v) in [
        (&mut p.source_train, &a.source_train),
        (&mut p.target_train, &a.target_train),
        (&mut p.source_test, &a.source_test),
        (&mut p.target_test, &a.target_test),
    ] {
        if let Some(v) = v {
            *field = v.clone();
        }
    }
    if a.lexicon.is_some() {
        p.lexicon = a.lexicon.clone();
    }
    Ok(p)
}

fn header(cfg: &TrainingConfig) -> String {
    let mut s = String::from("# resolved config\n");
    for line in cfg.to_text().lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let paths = resolve_paths(&a)?;
    print!("{}", header(&cfg));
    let pair = TransferPair::load(&paths)?;
    if paths.lexicon.is_none() && cfg.model.mode.uses_dmi() {
        eprintln!("warning: no opinion lexicon; every opinion label is negative");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let report = run_suite(&pair, &cfg, a.embeddings.as_deref(), Some(&a.out), |line| println!("{line}"))?;
    let summary = serde_json::to_string_pretty(&report)?;
    std::fs::write(a.out.join("summary.json"), &summary)?;
    println!(
        "{} over {} seed(s): target AD {:.2} ± {:.2}  ADS {:.2} ± {:.2}",
        report.mode.as_str(),
        report.runs.len(),
        100.0 * report.ad_mean,
        100.0 * report.ad_std,
        100.0 * report.ads_mean,
        100.0 * report.ads_std
    );
    Ok(())
}

fn load(checkpoint: &Path) -> Result<LoadedModel<f32>> {
    LoadedModel::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))
}

fn read_corpus(path: &Path) -> Result<Vec<xdabsa::data::Sentence>> {
    Ok(parse_conll(path, DomainLabel::Target)?.sentences)
}

fn evaluate(checkpoint: &Path, corpus: &Path) -> Result<()> {
    let m = load(checkpoint)?;
    let sentences = read_corpus(corpus)?;
    let r = evaluate_corpus(&m.model, &m.store, &m.meta.vocab, &sentences)?;
    let out = serde_json::json!({ "ad": r.ad, "ads": r.ads });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn write_or_print(output: Option<&Path>, body: &str) -> Result<()> {
    match output {
        Some(p) => std::fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn run_predict(checkpoint: &Path, input: &Path, output: Option<&Path>) -> Result<()> {
    let m = load(checkpoint)?;
    let sentences = read_corpus(input)?;
    let preds = predict(&m.model, &m.store, &m.meta.vocab, &sentences)?;
    let tags: Vec<Vec<UnifiedTag>> = preds.into_iter().map(|p| p.unified).collect();
    write_or_print(output, &write_conll(&sentences, &tags))
}

fn inspect(checkpoint: &Path, input: &Path, output: Option<&Path>, table: bool) -> Result<()> {
    let m = load(checkpoint)?;
    let sentences = read_corpus(input)?;
    let Some(dumps) = attention(&m.model, &m.store, &m.meta.vocab, &sentences)? else {
        bail!("{} has no memory interaction to inspect", m.model.config.mode.as_str());
    };
    let json = serde_json::to_string_pretty(&dumps)? + "\n";
    if table {
        if output.is_some() {
            write_or_print(output, &json)?;
        }
        for d in &dumps {
            println!("{}", d.render_table());
        }
        Ok(())
    } else {
        write_or_print(output, &json)
    }
}

fn grad_check(a: GradCheckArgs) -> Result<bool> {
    let dims = ToyDims {
        mode: a.mode.parse::<ModelMode>()?,
        tokens: a.tokens,
        dim: a.dim,
        k: a.k,
        hops: a.hops,
        seed: a.seed,
        ..ToyDims::default()
    };
    let opts = CheckOptions {
        eps: a.eps,
        max_coords: a.max_coords,
        seed: a.seed,
        ..CheckOptions::default()
    };
    let r = check_model_gradients(&dims, &opts)?;
    for p in &r.per_param {
        println!("{:<20} {:>6} coords  max rel error {:.3e}", p.name, p.coords, p.max_rel_error);
    }
    let ok = r.max_rel_error < a.threshold;
    println!(
        "{}: {} coordinates, max relative error {:.3e} (threshold {:.1e})",
        if ok { "PASS" } else { "FAIL" },
        r.coords,
        r.max_rel_error,
        a.threshold
    );
    Ok(ok)
}

fn synth(out: &Path, seed: Option<u64>, spec: Option<&Path>) -> Result<()> {
    let mut s = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let c = xdabsa::synth::generate(&s, out)?;
    println!(
        "wrote {} / {} source and {} / {} target train/test sentences to {}",
        c.source_train.len(),
        c.source_test.len(),
        c.target_train.len(),
        c.target_test.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => train(a)?,
        Command::Evaluate { checkpoint, corpus } => evaluate(&checkpoint, &corpus)?,
        Command::Predict {
            checkpoint,
            input,
            output,
        } => run_predict(&checkpoint, &input, output.as_deref())?,
        Command::Inspect {
            checkpoint,
            input,
            output,
            table,
        } => inspect(&checkpoint, &input, output.as_deref(), table)?,
        Command::GradCheck(a) => return grad_check(a),
        Command::Synth { out, seed, spec } => synth(&out, seed, spec.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
