use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pama::checkpoint::Checkpoint;
use pama::config::{Config, InferenceMode};
use pama::corpus::{self, SyntheticUtterance};
use pama::inference::synthesize;
use pama::metrics::{self, duration_from_attention};
use pama::textio::write_matrix;
use pama::tokens::{TokenSequence, Vocabulary};
use pama::train::{self, RunDir, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MANIFEST: &str = "manifest.txt";

#[derive(Parser)]
#[command(
    name = "pama",
    version,
    about = "Duration-controllable monotonic-attention TTS on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with exact alignments.
    Gen(GenArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Synthesize one token sequence.
    Synth(SynthArgs),
    /// Measure duration error and alignment failures on a corpus split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, env = "PAMA_SEED", default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    phonemes: usize,
    #[arg(long, default_value_t = 8)]
    mel_dim: usize,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set learning_rate=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// After training, report alignment loss and classifier cross-entropy
    /// on both splits with noise and dropout off.
    #[arg(long, default_value_t = false)]
    eval_losses: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Tokens such as `p3 p7 t3 #1 p2 t5 #3`; silences are added at both ends.
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    factor: f64,
    #[arg(long)]
    out: PathBuf,
    /// Attention stepping: soft or hard. Defaults to the checkpoint config.
    #[arg(long)]
    mode: Option<InferenceMode>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.75,1.0,1.5",
        allow_negative_numbers = true
    )]
    factors: Vec<f64>,
    /// Which part of the corpus to evaluate: heldout, train or all.
    #[arg(long, default_value = "heldout")]
    split: String,
    #[arg(long)]
    mode: Option<InferenceMode>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(dir: &Path, command: &str, entries: &[(&str, String)], config: Option<&Config>) -> Result<()> {
    let mut text = format!("command = {command}\ntimestamp = {}\n", timestamp());
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    if let Some(cfg) = config {
        text.push_str("\n# config\n");
        text.push_str(&cfg.to_text());
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

/// Reads `key = value` entries from a manifest file.
fn manifest_value(dir: &Path, key: &str) -> Result<Option<String>> {
    let p = dir.join(MANIFEST);
    let text = match fs::read_to_string(&p) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e).with_context(|| format!("reading {}", p.display())),
    };
    Ok(text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    }))
}

fn load_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => Config::default(),
    };
    cfg.apply_env()?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{o}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct CorpusSplit {
    train: Vec<SyntheticUtterance>,
    heldout: Vec<SyntheticUtterance>,
}

fn load_split(data: &Path, phonemes: usize, fraction: f64) -> Result<CorpusSplit> {
    let utts = corpus::read_corpus(data, &Vocabulary::new(phonemes))
        .with_context(|| format!("reading corpus {}", data.display()))?;
    if utts.is_empty() {
        bail!("corpus {} is empty", data.display());
    }
    let seed = match manifest_value(data, "corpus_seed")? {
        Some(s) => s.parse().map_err(|_| anyhow!("bad corpus_seed `{s}` in manifest"))?,
        None => 0,
    };
    let (tr, he) = corpus::split(utts.len(), fraction, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| utts[i].clone()).collect();
    Ok(CorpusSplit {
        train: pick(&tr),
        heldout: pick(&he),
    })
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let utts = corpus::generate(a.seed, a.count, a.phonemes, a.mel_dim)?;
    corpus::write_corpus(&a.out, &utts)?;
    write_manifest(
        &a.out,
        "gen",
        &[
            ("corpus_seed", a.seed.to_string()),
            ("count", a.count.to_string()),
            ("phonemes", a.phonemes.to_string()),
            ("mel_dim", a.mel_dim.to_string()),
        ],
        None,
    )?;
    eprintln!("wrote {} utterances to {}", utts.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let run_dir = RunDir::new(&a.out)?;
    let mut trainer = if a.resume {
        let ck = Checkpoint::load(&run_dir.checkpoint_path())?;
        let mut cfg = ck.config.clone();
        if let Some(s) = a.steps {
            cfg.steps = s;
        }
        let split = load_split(&a.data, cfg.phonemes, cfg.train_fraction)?;
        let examples = split.train.iter().map(|u| u.to_example()).collect();
        let ck = Checkpoint { config: cfg, ..ck };
        Trainer::resume(&ck, examples, run_dir.load_history()?)?
    } else {
        let mut cfg = load_config(&a.config)?;
        if let Some(s) = a.steps {
            cfg.steps = s;
        }
        let split = load_split(&a.data, cfg.phonemes, cfg.train_fraction)?;
        Trainer::new(&cfg, split.train.iter().map(|u| u.to_example()).collect())?
    };
    let cfg = trainer.model.config.clone();
    write_manifest(
        &a.out,
        "train",
        &[
            ("data", a.data.display().to_string()),
            (
                "corpus_seed",
                manifest_value(&a.data, "corpus_seed")?.unwrap_or_default(),
            ),
            ("checkpoint", run_dir.checkpoint_path().display().to_string()),
        ],
        Some(&cfg),
    )?;
    let result = train::run(&mut trainer, &run_dir, |r| {
        if r.step % 100 == 0 || r.step + 1 == cfg.steps {
            eprintln!(
                "step {:>5} total {:.4} mel {:.4} pc {:.4} dur {:.4} align {:.4}",
                r.step, r.total, r.mel, r.pc, r.dur, r.align
            );
        }
    });
    if let Err(e) = result {
        let last = run_dir.checkpoint_path();
        return Err(anyhow!(e))
            .with_context(|| format!("training stopped; last good checkpoint is {}", last.display()));
    }
    eprintln!("saved {}", run_dir.checkpoint_path().display());
    if a.eval_losses {
        let split = load_split(&a.data, cfg.phonemes, cfg.train_fraction)?;
        for (name, utts) in [("train", &split.train), ("heldout", &split.heldout)] {
            if utts.is_empty() {
                continue;
            }
            let ex: Vec<_> = utts.iter().map(|u| u.to_example()).collect();
            let (align, ce) = train::evaluate_losses(&trainer.model, &trainer.store, &ex)?;
            eprintln!("{name} split: align {align:.4} pc {ce:.4}");
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if !(a.factor.is_finite() && a.factor > 0.0) {
        bail!("--factor must be positive, got {}", a.factor);
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let (model, store) = train::model_from_checkpoint(&ck)?;
    let tokens = TokenSequence::parse(&a.text, &model.vocab)?;
    let mode = a.mode.unwrap_or(model.config.inference_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    let syn = synthesize(&model, &store, &tokens, a.factor, mode, &mut rng)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_matrix(&a.out.join("mel.txt"), &syn.mel)?;
    write_matrix(&a.out.join("attention.txt"), &syn.attention)?;
    let join = |v: &[String]| v.join(" ");
    let durations = format!(
        "predicted: {}\nscaled: {}\nmeasured: {}\n",
        join(&syn.predicted.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>()),
        join(&syn.scaled.iter().map(|d| d.to_string()).collect::<Vec<_>>()),
        join(
            &duration_from_attention(&syn.attention)
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
        ),
    );
    fs::write(a.out.join("durations.txt"), durations)?;
    write_manifest(
        &a.out,
        "synth",
        &[
            ("checkpoint", a.ckpt.display().to_string()),
            ("text", a.text.clone()),
            ("factor", a.factor.to_string()),
            ("mode", mode.to_string()),
            ("truncated", syn.truncated.to_string()),
        ],
        Some(&model.config),
    )?;
    eprintln!("{} frames written to {}", syn.path.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if let Some(f) = a.factors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        bail!("duration factors must be positive, got {f}");
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let (model, store) = train::model_from_checkpoint(&ck)?;
    let split = load_split(&a.data, model.config.phonemes, model.config.train_fraction)?;
    let utts = match a.split.as_str() {
        "heldout" => split.heldout,
        "train" => split.train,
        "all" => split.train.into_iter().chain(split.heldout).collect(),
        other => bail!("--split must be heldout, train or all, got `{other}`"),
    };
    if utts.is_empty() {
        bail!("evaluation set is empty");
    }
    let pairs: Vec<(String, TokenSequence)> = utts.iter().map(|u| (u.id.clone(), u.tokens.clone())).collect();
    let mode = a.mode.unwrap_or(model.config.inference_mode);
    let report = metrics::evaluate(&model, &store, &pairs, &a.factors, mode)?;
    let tsv = report.to_tsv();
    match &a.out {
        Some(p) => {
            fs::write(p, &tsv).with_context(|| format!("writing {}", p.display()))?;
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                write_manifest(
                    dir,
                    "eval",
                    &[
                        ("checkpoint", a.ckpt.display().to_string()),
                        ("data", a.data.display().to_string()),
                        ("split", a.split.clone()),
                        ("mode", mode.to_string()),
                    ],
                    Some(&model.config),
                )?;
            }
        }
        None => print!("{tsv}"),
    }
    for f in &report.factors {
        let r = f.robustness();
        eprintln!(
            "factor {}: mae {:.3} frames, skipped {}, regressions {}, truncations {}",
            f.factor,
            f.mae(),
            r.skipped,
            r.regressions,
            r.truncations
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
