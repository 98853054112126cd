use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mdfn::data::synth::{generate, SynthConfig};
use mdfn::data::{read_jsonl, read_records, Record};
use mdfn::dialogue::{assemble, Vocab, SPECIAL_TOKENS};
use mdfn::model::{Mdfn, ModelSpec, Prepared, PRESETS};
use mdfn::train::{self, checkpoint, Metric, OptimConfig};

/// Response selection with masked decoupling and gated fusion.
#[derive(Parser)]
#[command(name = "mdfn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus: train/valid/test JSONL and vocab.txt.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Train on `<data>/train.jsonl`, selecting on `<data>/valid.jsonl`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model settings (JSON); defaults when absent.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Optimizer settings (JSON); defaults when absent.
        #[arg(long)]
        optim: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Ablation preset applied on top of the model settings.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        ablation: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Score a JSONL file and print ranking metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: r@k, map, mrr, p@1.
        #[arg(long, default_value = "r@1,r@2,mrr")]
        metrics: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        threads: ThreadsArg,
    },
    /// Print the candidates of every record sorted by score.
    Rank {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        threads: ThreadsArg,
    },
    /// Dump the four masks of one (context, candidate) sequence and the
    /// mean gate ratio of each channel.
    InspectMasks {
        #[arg(long)]
        input: PathBuf,
        /// Record index in the input file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        candidate: usize,
        /// Trained model; a freshly initialized one is used otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
}

#[derive(Args)]
struct SeedArg {
    /// Overrides the seed of the config file and of `MDFN_SEED`.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self, fallback: u64) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var("MDFN_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .with_context(|| format!("MDFN_SEED={v:?} is not an unsigned integer")),
            Err(_) => Ok(fallback),
        }
    }
}

#[derive(Args)]
struct ThreadsArg {
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_model(ckpt: &Path, vocab: Option<&Path>) -> Result<(Mdfn<f32>, Vocab)> {
    let (model, _) = checkpoint::load(ckpt, None)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let path = vocab
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.join("vocab.txt"));
    let vocab = Vocab::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if vocab.len() != model.config().encoder.vocab_size {
        bail!(
            "vocabulary {} has {} tokens, model expects {}",
            path.display(),
            vocab.len(),
            model.config().encoder.vocab_size
        );
    }
    Ok((model, vocab))
}

fn gen_data(config: &Path, out: &Path, seed: &SeedArg) -> Result<()> {
    let mut cfg: SynthConfig = read_json(config)?;
    cfg.seed = seed.resolve(cfg.seed)?;
    let data = generate(&cfg)?;
    data.write(out)?;
    println!(
        "{}",
        json!({
            "out": out,
            "train": data.train.len(),
            "valid": data.valid.len(),
            "test": data.test.len(),
            "vocab": data.vocab.len(),
            "seed": cfg.seed,
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    data: &Path,
    model_config: Option<&Path>,
    optim: Option<&Path>,
    out: &Path,
    ablation: Option<&str>,
    epochs: Option<usize>,
    seed: &SeedArg,
) -> Result<()> {
    let mut spec: ModelSpec = match model_config {
        Some(p) => read_json(p)?,
        None => ModelSpec::default(),
    };
    if let Some(name) = ablation {
        spec.head = spec.head.with_preset(name)?;
    }
    let mut opt: OptimConfig = match optim {
        Some(p) => read_json(p)?,
        None => OptimConfig::default(),
    };
    opt.seed = seed.resolve(opt.seed)?;
    if let Some(e) = epochs {
        opt.epochs = e;
    }
    let vocab = Vocab::load(data.join("vocab.txt"))
        .with_context(|| format!("loading {}", data.join("vocab.txt").display()))?;
    let cfg = spec.build(vocab.len())?;
    let load = |name: &str| -> Result<_> {
        let path = data.join(name);
        let loaded = read_jsonl(&path, &vocab, cfg.mode)
            .with_context(|| format!("reading {}", path.display()))?;
        if !loaded.rejected.is_empty() {
            log::warn!(
                "{}: skipped {} lines",
                path.display(),
                loaded.rejected.len()
            );
        }
        Ok(loaded.dialogues)
    };
    let train_set = load("train.jsonl")?;
    let valid_set = if data.join("valid.jsonl").exists() {
        load("valid.jsonl")?
    } else {
        Vec::new()
    };
    log::info!(
        "training on {} dialogues, validating on {}",
        train_set.len(),
        valid_set.len()
    );
    let model = Mdfn::new(cfg, opt.seed)?;
    let outcome = train::train(model, &train_set, &valid_set, &opt, Some(out))?;
    for dir in ["best", "last"] {
        vocab.save(out.join(dir).join("vocab.txt"))?;
    }
    println!(
        "{}",
        json!({
            "out": out,
            "seed": opt.seed,
            "best_epoch": outcome.best_snapshot.epoch,
            "metrics": outcome.best_snapshot.metrics,
        })
    );
    Ok(())
}

fn eval_cmd(
    ckpt: &Path,
    data: &Path,
    metrics: &str,
    vocab: Option<&Path>,
    as_json: bool,
    threads: usize,
) -> Result<()> {
    let metrics = metrics
        .split(',')
        .map(Metric::parse)
        .collect::<mdfn::Result<Vec<_>>>()?;
    let (model, vocab) = load_model(ckpt, vocab)?;
    let loaded = read_jsonl(data, &vocab, model.config().mode)?;
    if loaded.dialogues.is_empty() {
        bail!("{} has no valid records", data.display());
    }
    let instances = train::rank_all(&model, &loaded.dialogues, threads)?;
    let values = train::evaluate(&instances, &metrics)?;
    let n = instances[0].scores.len();
    if as_json {
        let map: serde_json::Map<String, serde_json::Value> =
            values.iter().map(|(m, v)| (m.label(n), json!(v))).collect();
        println!(
            "{}",
            json!({"metrics": map, "instances": instances.len(), "rejected": loaded.rejected.len()})
        );
    } else {
        let labels: Vec<String> = values.iter().map(|(m, _)| m.label(n)).collect();
        let width = labels.iter().map(String::len).max().unwrap_or(5).max(5);
        let row = |cells: Vec<String>| {
            cells
                .iter()
                .map(|c| format!("{c:>width$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        println!("{}", row(labels));
        println!(
            "{}",
            row(values.iter().map(|(_, v)| format!("{v:.3}")).collect())
        );
    }
    Ok(())
}

fn rank_cmd(
    ckpt: &Path,
    input: &Path,
    vocab: Option<&Path>,
    as_json: bool,
    threads: usize,
) -> Result<()> {
    let (model, vocab) = load_model(ckpt, vocab)?;
    let records = read_records(input)?;
    let mut dialogues = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        dialogues.push(r.to_dialogue(&vocab, model.config().mode, i + 1)?);
    }
    let instances = train::rank_all(&model, &dialogues, threads)?;
    for (inst, rec) in instances.iter().zip(&records) {
        let order = inst.ranking();
        if as_json {
            let ranked: Vec<_> = order
                .iter()
                .map(|&c| {
                    json!({
                        "candidate": c,
                        "score": inst.scores[c],
                        "label": inst.labels[c],
                        "text": rec.candidates[c],
                    })
                })
                .collect();
            println!("{}", json!({"record": inst.context_id, "ranking": ranked}));
        } else {
            println!("record {}", inst.context_id);
            for (rank, &c) in order.iter().enumerate() {
                println!(
                    "{:>4}  {:>4}  {:.6}  {}  {}",
                    rank + 1,
                    c,
                    inst.scores[c],
                    inst.labels[c],
                    rec.candidates[c]
                );
            }
        }
    }
    Ok(())
}

/// Vocabulary holding every word of `record`.
fn vocab_of(record: &Record) -> Result<Vocab> {
    let mut words: Vec<String> = record
        .context
        .iter()
        .map(|t| t.text.as_str())
        .chain(record.candidates.iter().map(String::as_str))
        .flat_map(str::split_whitespace)
        .map(str::to_lowercase)
        .filter(|w| !SPECIAL_TOKENS.contains(&w.as_str()))
        .collect();
    words.sort();
    words.dedup();
    Ok(Vocab::from_tokens(
        SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words),
    )?)
}

#[allow(clippy::too_many_arguments)]
fn inspect_masks(
    input: &Path,
    index: usize,
    candidate: usize,
    ckpt: Option<&Path>,
    vocab: Option<&Path>,
    model_config: Option<&Path>,
    seed: &SeedArg,
) -> Result<()> {
    let records = read_records(input)?;
    let record = records
        .get(index)
        .with_context(|| format!("{} has {} records", input.display(), records.len()))?;
    let (model, vocab, trained) = match ckpt {
        Some(c) => {
            let (m, v) = load_model(c, vocab)?;
            (m, v, true)
        }
        None => {
            let vocab = match vocab {
                Some(p) => Vocab::load(p)?,
                None => vocab_of(record)?,
            };
            let mut spec: ModelSpec = match model_config {
                Some(p) => read_json(p)?,
                None => ModelSpec::default(),
            };
            let dialogue = record.to_dialogue(&vocab, spec.mode, index + 1)?;
            let len: usize = dialogue
                .context
                .iter()
                .map(|u| u.tokens.len() + 1)
                .sum::<usize>()
                + dialogue
                    .candidates
                    .iter()
                    .map(|c| c.tokens.len() + 2)
                    .max()
                    .unwrap_or(0);
            spec.max_len = spec.max_len.max(len);
            let model = Mdfn::new(spec.build(vocab.len())?, seed.resolve(0)?)?;
            (model, vocab, false)
        }
    };
    let dialogue = record.to_dialogue(&vocab, model.config().mode, index + 1)?;
    let seq = assemble(&dialogue, candidate, &model.config().assembly)?;
    let prep = Prepared::new(&seq);
    let (p1, p2) = model.gate_means(&prep)?;
    let tokens: Vec<&str> = prep
        .seq
        .token_ids
        .iter()
        .map(|&t| vocab.token(t).unwrap_or("[UNK]"))
        .collect();
    let out = json!({
        "record": index,
        "candidate": candidate,
        "tokens": tokens,
        "utt_index": prep.seq.utt_index,
        "speaker": prep.seq.speaker,
        "masks": prep.masks.to_view(),
        "gate": {"trained": trained, "utterance_mean_p": p1, "speaker_mean_p": p2},
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(&config, &out, &seed),
        Command::Train {
            data,
            model_config,
            optim,
            out,
            ablation,
            epochs,
            seed,
        } => train_cmd(
            &data,
            model_config.as_deref(),
            optim.as_deref(),
            &out,
            ablation.as_deref(),
            epochs,
            &seed,
        ),
        Command::Eval {
            ckpt,
            data,
            metrics,
            vocab,
            json,
            threads,
        } => eval_cmd(
            &ckpt,
            &data,
            &metrics,
            vocab.as_deref(),
            json,
            threads.threads,
        ),
        Command::Rank {
            ckpt,
            input,
            vocab,
            json,
            threads,
        } => rank_cmd(&ckpt, &input, vocab.as_deref(), json, threads.threads),
        Command::InspectMasks {
            input,
            index,
            candidate,
            ckpt,
            vocab,
            model_config,
            seed,
        } => inspect_masks(
            &input,
            index,
            candidate,
            ckpt.as_deref(),
            vocab.as_deref(),
            model_config.as_deref(),
            &seed,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
