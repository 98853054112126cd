//! Acceptance suite. Every criterion prints one PASS or FAIL line; the
//! process exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mdfn::data::synth::{generate, SynthConfig, SynthTask};
use mdfn::data::Record;
use mdfn::dialogue::{Dialogue, SpeakerRole, Utterance, Vocab};
use mdfn::masks::build_masks;
use mdfn::model::{Channels, Mdfn, ModelConfig, ModelSpec, TaskMode};
use mdfn::nn::layers::{self, Mhsa};
use mdfn::nn::{gradcheck, Graph, Initializer, ParamRegistry, Tensor};
use mdfn::train::{self, metrics, OptimConfig, RankingInstance, Schedule};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || {
        format!("took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs())
    })
}

fn masks_partition() -> Outcome {
    let started = Instant::now();
    let mut rng = SplitMix64::seed_from_u64(1);
    for n in 0..200 {
        let len = rng.gen_range(1..=64);
        let seq = common::random_sequence(&mut rng, len);
        let masks = build_masks(&seq);
        common::check_masks(&seq, &masks).map_err(|e| format!("sequence {n}: {e}"))?;
        common::check_padding_opacity(&mut rng, &seq, &masks)
            .map_err(|e| format!("sequence {n}: {e}"))?;
    }
    within(started, Duration::from_secs(5))?;
    Ok("200 sequences".into())
}

fn masked_attention_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = SplitMix64::seed_from_u64(2);
    let mut worst = 0.0f64;
    for n in 0..50 {
        let (d, heads) = [(8, 2), (16, 4), (32, 4)][n % 3];
        let len = rng.gen_range(1..=64);
        let seq = common::random_sequence(&mut rng, len);
        let masks = build_masks(&seq);
        let mut reg = ParamRegistry::<f32>::new();
        Mhsa::declare(&mut reg, &mut Initializer::new(n as u64), "att", d, heads)
            .map_err(|e| e.to_string())?;
        let x = Tensor::<f32>::from_fn(len, d, |_, _| rng.gen_range(-1.0..1.0));
        let mut g = Graph::with_params(&reg);
        let p = Mhsa::bind(&mut g, "att", heads).map_err(|e| e.to_string())?;
        let xv = g.constant(x.clone());
        let y = layers::mhsa(&mut g, xv, &masks.m1, &p).map_err(|e| e.to_string())?;
        let got: Vec<Vec<f64>> = (0..len)
            .map(|i| g.value(y).row_slice(i).iter().map(|&v| f64::from(v)).collect())
            .collect();

        let rows: Vec<Vec<f64>> = (0..len)
            .map(|i| x.row_slice(i).iter().map(|&v| f64::from(v)).collect())
            .collect();
        let allowed: Vec<Vec<usize>> = (0..len)
            .map(|i| {
                if seq.pad_mask[i] {
                    seq.utterance_positions(seq.utt_index[i])
                } else {
                    vec![i]
                }
            })
            .collect();
        let w: Vec<Vec<f64>> = ["w_q", "w_k", "w_v", "w_o"]
            .iter()
            .map(|name| {
                reg.get(&format!("att.{name}"))
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect()
            })
            .collect();
        let want =
            common::restricted_attention(&rows, &allowed, [&w[0], &w[1], &w[2], &w[3]], heads);
        let err = common::max_rel_err(&got, &want);
        worst = worst.max(err);
        ensure(err < 1e-5, || format!("instance {n}: rel err {err:.2e}"))?;
    }
    within(started, Duration::from_secs(10))?;
    Ok(format!("50 instances, max rel err {worst:.2e}"))
}

fn gradient_suite() -> Outcome {
    use SpeakerRole::*;
    let started = Instant::now();
    let mut cfg = ModelConfig::new(16, 12, TaskMode::MultiChoice).with_width(8, 2);
    cfg.encoder.ffn = Some(8);
    let model = Mdfn::<f64>::new(cfg, 3).map_err(|e| e.to_string())?;
    let d = Dialogue {
        context: vec![
            Utterance::new(vec![4, 5, 6], Sender),
            Utterance::new(vec![7, 8], Receiver),
        ],
        candidates: vec![
            Utterance::new(vec![9, 10], Sender),
            Utterance::new(vec![11, 5], Sender),
        ],
        labels: vec![0, 1],
    };
    let report = gradcheck::check_params(
        model.params(),
        |g| model.loss(g, &d).map(|(l, _)| l),
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    ensure(report.max_rel_err < 1e-4, || {
        format!(
            "{}: analytic {} numeric {} (rel {:.2e})",
            report.worst, report.worst_analytic, report.worst_numeric, report.max_rel_err
        )
    })?;
    within(started, Duration::from_secs(60))?;
    Ok(format!(
        "{} parameters, max rel err {:.2e}",
        report.checked, report.max_rel_err
    ))
}

fn metric_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = SplitMix64::seed_from_u64(4);
    let n = 10;
    let insts: Vec<RankingInstance> = (0..1000)
        .map(|i| common::random_instance(&mut rng, i, n))
        .collect();
    let brute: Vec<common::BruteScores> = insts
        .iter()
        .filter(|i| i.has_positive())
        .map(common::brute_scores)
        .collect();
    let mean = |f: &dyn Fn(&common::BruteScores) -> f64| {
        brute.iter().map(f).sum::<f64>() / brute.len() as f64
    };
    let e = |r: mdfn::Result<f64>| r.map_err(|e| e.to_string());
    for k in 1..=n {
        let got = e(metrics::recall_at_k(&insts, n, k))?;
        let want = mean(&|b| b.recall[k - 1]);
        ensure(got == want, || format!("R@{k}: {got} vs {want}"))?;
    }
    for (name, got, want) in [
        ("MAP", e(metrics::map(&insts))?, mean(&|b| b.ap)),
        ("MRR", e(metrics::mrr(&insts))?, mean(&|b| b.rr)),
        ("P@1", e(metrics::p_at_1(&insts))?, mean(&|b| b.p1)),
    ] {
        ensure(got == want, || format!("{name}: {got} vs {want}"))?;
    }
    let hand = RankingInstance {
        context_id: 0,
        scores: vec![0.9, 0.7, 0.5, 0.1],
        labels: vec![1, 0, 1, 0],
    };
    let ap = e(metrics::map(&[hand]))?;
    ensure((ap - 0.833333).abs() <= 1e-6, || format!("hand AP {ap}"))?;
    within(started, Duration::from_secs(5))?;
    Ok(format!("1000 instances, hand AP {ap:.6}"))
}

fn records_to_dialogues(records: &[Record], vocab: &Vocab) -> Result<Vec<Dialogue>, String> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_dialogue(vocab, TaskMode::MultiChoice, i + 1))
        .collect::<mdfn::Result<_>>()
        .map_err(|e| e.to_string())
}

struct Corpus {
    vocab: Vocab,
    train: Vec<Dialogue>,
    valid: Vec<Dialogue>,
    test: Vec<Dialogue>,
}

fn corpus(cfg: &SynthConfig) -> Result<Corpus, String> {
    let data = generate(cfg).map_err(|e| e.to_string())?;
    Ok(Corpus {
        train: records_to_dialogues(&data.train, &data.vocab)?,
        valid: records_to_dialogues(&data.valid, &data.vocab)?,
        test: records_to_dialogues(&data.test, &data.vocab)?,
        vocab: data.vocab,
    })
}

/// Synthetic corpus used by the learning criteria: 6000 train, 750
/// valid and 750 test dialogues with 4 candidates.
fn synth(task: SynthTask) -> SynthConfig {
    SynthConfig {
        task,
        n_dialogues: 7500,
        turns: (3, 5),
        utterance_len: (1, 2),
        n_candidates: 4,
        seed: 1,
        ..SynthConfig::default()
    }
}

fn learning_optim() -> OptimConfig {
    OptimConfig {
        lr: 1e-3,
        schedule: Schedule::Linear,
        warmup_steps: 100,
        batch_size: 16,
        epochs: 5,
        seed: 0,
        ..OptimConfig::default()
    }
}

/// Trains with `channels` and returns test `R_4@1` of the model selected
/// on the validation split.
fn test_recall(c: &Corpus, channels: Channels) -> Result<f64, String> {
    let mut spec = ModelSpec::default();
    spec.head.channels = channels;
    let cfg = spec.build(c.vocab.len()).map_err(|e| e.to_string())?;
    let model = Mdfn::new(cfg, 0).map_err(|e| e.to_string())?;
    let outcome = train::train(model, &c.train, &c.valid, &learning_optim(), None)
        .map_err(|e| e.to_string())?;
    let inst = train::rank_all(&outcome.best, &c.test, 1).map_err(|e| e.to_string())?;
    metrics::recall_at_k(&inst, 4, 1).map_err(|e| e.to_string())
}

fn speaker_echo_learning() -> Outcome {
    let started = Instant::now();
    let c = corpus(&synth(SynthTask::SpeakerEcho))?;
    ensure(c.train.len() >= 4000 && c.test.len() >= 500, || {
        format!("{} train / {} test", c.train.len(), c.test.len())
    })?;
    let both = test_recall(&c, Channels::Both)?;
    let none = test_recall(&c, Channels::None)?;
    let utt = test_recall(&c, Channels::UtteranceOnly)?;
    let summary = format!("Both {both:.3}, None {none:.3}, UtteranceOnly {utt:.3}");
    ensure(both >= 0.95, || format!("{summary}: Both below 0.95"))?;
    ensure(both - none >= 0.10, || format!("{summary}: None within 0.10 of Both"))?;
    ensure(utt < both, || format!("{summary}: UtteranceOnly not below Both"))?;
    within(started, Duration::from_secs(15 * 60))?;
    Ok(summary)
}

fn last_utterance_learning() -> Outcome {
    let started = Instant::now();
    let c = corpus(&synth(SynthTask::LastUtteranceEcho))?;
    let both = test_recall(&c, Channels::Both)?;
    let speaker = test_recall(&c, Channels::SpeakerOnly)?;
    let summary = format!("Both {both:.3}, SpeakerOnly {speaker:.3}");
    ensure(both - speaker >= 0.05, || {
        format!("{summary}: gap below 0.05")
    })?;
    within(started, Duration::from_secs(15 * 60))?;
    Ok(summary)
}

fn loss_sanity() -> Outcome {
    let mut found = Vec::new();
    for (mode, n, want) in [
        (TaskMode::Binary, 1, 0.693147),
        (TaskMode::MultiChoice, 4, 1.386294),
    ] {
        let mut model = Mdfn::<f64>::new(ModelConfig::new(30, 64, mode), 5)
            .map_err(|e| e.to_string())?;
        model.params_mut().fill(0.0);
        let d = Dialogue {
            context: vec![
                Utterance::new(vec![4, 5], SpeakerRole::Receiver),
                Utterance::new(vec![6], SpeakerRole::Sender),
                Utterance::new(vec![7, 8, 9], SpeakerRole::Receiver),
            ],
            candidates: (0..n)
                .map(|i| Utterance::new(vec![10 + i as u32], SpeakerRole::Sender))
                .collect(),
            labels: (0..n).map(|i| u8::from(i == 0)).collect(),
        };
        let mut g = Graph::with_params(model.params());
        let (loss, _) = model.loss(&mut g, &d).map_err(|e| e.to_string())?;
        let got = g.value(loss).item();
        ensure((got - want).abs() <= 1e-6, || {
            format!("{mode:?}: loss {got}, expected {want}")
        })?;
        found.push(format!("{got:.6}"));
    }
    Ok(found.join(", "))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mdfn"))
        .args(args)
        .env_remove("MDFN_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut files = 0;
    for name in names {
        let (x, y) = (a.join(&name), b.join(&name));
        if x.is_dir() {
            files += same_tree(&x, &y)?;
        } else {
            let same = fs::read(&x).ok() == fs::read(&y).ok();
            ensure(same, || format!("{} differs", x.display()))?;
            files += 1;
        }
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    fs::write(
        d.join("synth.json"),
        r#"{"n_dialogues":120,"utterance_len":[1,2],"seed":3}"#,
    )
    .map_err(|e| e.to_string())?;
    fs::write(d.join("model.json"), r#"{"head":{"d":16,"heads":2}}"#)
        .map_err(|e| e.to_string())?;
    fs::write(d.join("optim.json"), r#"{"epochs":2,"batch_size":8,"seed":11}"#)
        .map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        let data = d.join(format!("data_{run}"));
        cli(&["gen-data", "--config", &s(&d.join("synth.json")), "--out", &s(&data)])?;
        cli(&[
            "train",
            "--data",
            &s(&data),
            "--model-config",
            &s(&d.join("model.json")),
            "--optim",
            &s(&d.join("optim.json")),
            "--out",
            &s(&d.join(format!("ckpt_{run}"))),
        ])?;
    }
    let data_files = same_tree(&d.join("data_a"), &d.join("data_b"))?;
    let ckpt_files = same_tree(&d.join("ckpt_a"), &d.join("ckpt_b"))?;
    Ok(format!(
        "{data_files} data files and {ckpt_files} checkpoint files identical"
    ))
}

fn presets_execute() -> Outcome {
    let cfg = SynthConfig {
        n_dialogues: 250,
        valid_fraction: 0.1,
        test_fraction: 0.1,
        utterance_len: (1, 2),
        seed: 9,
        ..SynthConfig::default()
    };
    let c = corpus(&cfg)?;
    ensure(c.train.len() == 200, || format!("{} smoke dialogues", c.train.len()))?;
    let mut variants: Vec<(String, ModelSpec)> = Vec::new();
    for name in ["-Gate", "-Original Info", "Mean-Pool", "CNN", "CNN-Multi"] {
        let mut spec = ModelSpec::default();
        spec.head = spec.head.with_preset(name).map_err(|e| e.to_string())?;
        variants.push((name.to_string(), spec));
    }
    for n in 1..=3 {
        let mut spec = ModelSpec::default();
        spec.head.n_decoupling = n;
        variants.push((format!("n_decoupling={n}"), spec));
    }
    for n in 1..=3 {
        let mut spec = ModelSpec::default();
        spec.head.n_bigru_layers = n;
        variants.push((format!("n_bigru_layers={n}"), spec));
    }
    let optim = OptimConfig {
        epochs: 1,
        ..OptimConfig::default()
    };
    let mut slowest = 0.0f64;
    for (name, spec) in &variants {
        let started = Instant::now();
        let cfg = spec.build(c.vocab.len()).map_err(|e| e.to_string())?;
        let model = Mdfn::new(cfg, 0).map_err(|e| format!("{name}: {e}"))?;
        let outcome = train::train(model, &c.train, &c.valid, &optim, None)
            .map_err(|e| format!("{name}: {e}"))?;
        ensure(outcome.log.iter().all(|r| r.loss.is_finite()), || {
            format!("{name}: non-finite loss")
        })?;
        within(started, Duration::from_secs(120)).map_err(|e| format!("{name}: {e}"))?;
        slowest = slowest.max(started.elapsed().as_secs_f64());
    }
    Ok(format!(
        "{} variants, slowest {slowest:.1}s",
        variants.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("mask partition suite", masks_partition),
        ("masked-attention oracle", masked_attention_oracle),
        ("gradient suite", gradient_suite),
        ("metric oracle", metric_oracle),
        ("speaker echo learning", speaker_echo_learning),
        ("last utterance echo", last_utterance_learning),
        ("loss sanity", loss_sanity),
        ("determinism", determinism),
        ("ablation presets execute", presets_execute),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let result = run();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{detail}] {secs:.1}s"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{detail}] {secs:.1}s");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
