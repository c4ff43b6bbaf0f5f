//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! for each and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use promptqa::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use promptqa::config::RunConfig;
use promptqa::corpus::{corpus_to_jsonl, ChunkRecord, Record};
use promptqa::encoder::EncoderConfig;
use promptqa::gradcheck::{model_gradcheck, ModelCheckSettings};
use promptqa::metrics::{aggregate, evaluate, SlotScore};
use promptqa::model::Inference;
use promptqa::params::ParamGroup;
use promptqa::pipeline::{apply_author_rule, build_input, classify_event, postprocess, predict_corpus, PipelineConfig, SpanOrAuthor};
use promptqa::prompt::PromptConfig;
use promptqa::span_head::{decode_span, SpanPrediction};
use promptqa::synth::gen_synthetic;
use promptqa::trainer::{build_instances, build_vocab, span_accuracy, train, train_with, Instance, Trainer};
use promptqa::{EventType, ModelConfig, ModelParams, SlotFiller, SlotId, SlotKind, SlotRegistry, SlotSpec, TweetExample, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn desk() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    RunConfig::load(path).expect("desk preset parses")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_fidelity() -> Outcome {
    let config = desk().model();
    let registry = SlotRegistry::default_registry();
    let settings = ModelCheckSettings::default();
    let start = Instant::now();
    let mut worst = (0.0f64, 0u64);
    for seed in 0..20 {
        let r = model_gradcheck(&config, &registry, seed, &settings).map_err(|e| e.to_string())?;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, seed);
        }
    }
    let took = start.elapsed();
    let summary = format!("20 seeds, worst {:.2e} (seed {}), {:.1}s", worst.0, worst.1, took.as_secs_f64());
    ensure(worst.0 <= 1e-4, || format!("{summary}: error above 1e-4"))?;
    ensure(took < Duration::from_secs(60), || format!("{summary}: slower than 60s"))?;
    Ok(summary)
}

fn brute_force(start: &[f64], end: &[f64], valid: &[bool]) -> (usize, usize) {
    let mut best = ((0, 0), start[0] + end[0]);
    for s in 1..start.len() {
        for e in s..start.len() {
            if valid[s] && valid[e] && start[s] + end[e] > best.1 {
                best = ((s, e), start[s] + end[e]);
            }
        }
    }
    best.0
}

fn span_decoder_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    for len in 1..=32 {
        for _ in 0..100 {
            // Coarse logits make ties common.
            let mut draw = || (0..len).map(|_| f64::from(rng.random_range(-3i32..=3)) * 0.5).collect::<Vec<_>>();
            let (start, end) = (draw(), draw());
            let mut valid: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
            valid[0] = true;
            let got = decode_span(&start, &end, &valid);
            let want = brute_force(&start, &end, &valid);
            ensure((got.start, got.end) == want, || {
                format!("L={len}: got {:?}, want {want:?} for {start:?} / {end:?} / {valid:?}", (got.start, got.end))
            })?;
            cases += 1;
        }
    }
    Ok(format!("{cases} instances over L = 1..=32, zero mismatches"))
}

/// Trains on the 32-example fixture, scoring every 10 epochs. Returns the
/// best accuracy seen, the epoch it was first reached at, and the wall time.
fn overfit_run(run: &RunConfig, stop_at: Option<f64>) -> Result<(f64, usize, Duration), String> {
    let registry = SlotRegistry::default_registry();
    let corpus = gen_synthetic(42, 32, &registry).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&corpus, &registry);
    let instances = build_instances(&corpus, &registry, &vocab, &run.model()).map_err(|e| e.to_string())?;
    let mut train_config = run.train.clone();
    train_config.epochs = 200;
    train_config.seed = 1;
    let mut best = (0.0f64, 0usize);
    let mut failure = None;
    let start = Instant::now();
    train_with(&train_config, &run.model(), &corpus, &registry, None, |rec, params| {
        if rec.epoch % 10 != 0 {
            return true;
        }
        match span_accuracy(params, &instances) {
            Ok(acc) => {
                if acc > best.0 {
                    best = (acc, rec.epoch);
                }
                stop_at.is_none_or(|t| acc < t)
            }
            Err(e) => {
                failure = Some(e.to_string());
                false
            }
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((best.0, best.1, start.elapsed()))
}

fn overfit_capability() -> Outcome {
    let run = desk();
    let (acc, epoch, took) = overfit_run(&run, Some(0.95))?;
    let full = format!("prompts on: {acc:.3} at epoch {epoch} in {:.1}s", took.as_secs_f64());
    ensure(acc >= 0.95, || format!("{full}: below 0.95 after 200 epochs"))?;
    ensure(took < Duration::from_secs(300), || format!("{full}: slower than 5 min"))?;

    let mut ablated = desk();
    ablated.prompt.enabled = false;
    ablated.train.freeze_encoder = true;
    let (abl, abl_epoch, _) = overfit_run(&ablated, None)?;
    let summary = format!("{full}; prompts off + frozen encoder: best {abl:.3} (epoch {abl_epoch})");
    ensure(abl <= 0.6, || format!("{summary}: ablation exceeds 0.6"))?;
    Ok(summary)
}

fn slot_independence() -> Outcome {
    let run = desk();
    let registry = SlotRegistry::default_registry();
    let corpus = gen_synthetic(11, 24, &registry).map_err(|e| e.to_string())?;
    let params = ModelParams::init(run.model(), build_vocab(&corpus, &registry), &registry.ids(), 3)
        .map_err(|e| e.to_string())?;
    let instances = build_instances(&corpus, &registry, &params.vocab, &params.config).map_err(|e| e.to_string())?;
    let a = SlotId::new(EventType::TestedPositive, "who");
    let b = SlotId::new(EventType::TestedPositive, "where");
    let only_a: Vec<&Instance> = instances.iter().filter(|i| i.slot == a).collect();
    ensure(!only_a.is_empty(), || "no instances for slot A".into())?;
    let mut trainer = Trainer::new(params.clone(), run.train.clone()).map_err(|e| e.to_string())?;
    for step in 0..50 {
        let k = (step * 4) % only_a.len();
        let batch: Vec<&Instance> = (0..4).map(|j| only_a[(k + j) % only_a.len()]).collect();
        trainer.step(&batch).map_err(|e| e.to_string())?;
    }
    let before = params.named_tensors();
    let after = trainer.params.named_tensors();
    let (mut b_tensors, mut a_moved) = (0, false);
    for ((name, group, x), (_, _, y)) in before.iter().zip(&after) {
        match group {
            ParamGroup::Prompt(slot) if *slot == b => {
                ensure(x.bit_eq(y), || format!("{name} changed"))?;
                b_tensors += 1;
            }
            ParamGroup::Prompt(slot) if *slot == a => a_moved |= !x.bit_eq(y),
            _ => {}
        }
    }
    ensure(b_tensors > 0, || "slot B has no prompt tensors".into())?;
    ensure(a_moved, || "slot A's prompt did not move".into())?;
    Ok(format!("50 steps on {a}: {b_tensors} tensors of {b} bitwise unchanged, {a} moved"))
}

/// Parses a tweet whose chunks are given as substrings of the text.
fn tweet(id: &str, text: &str, event_type: EventType, chunks: &[&str], registry: &SlotRegistry) -> TweetExample {
    let chunks = chunks
        .iter()
        .map(|c| {
            let start = text.find(c).unwrap_or_else(|| panic!("`{c}` not in `{text}`"));
            ChunkRecord {
                start,
                end: start + c.len(),
            }
        })
        .collect();
    let record = Record {
        id: id.into(),
        text: text.into(),
        event_type,
        chunks,
        gold: BTreeMap::new(),
    };
    TweetExample::from_record(record, registry).expect("fixture tweet parses")
}

/// Runs post-processing with logits that decode to tweet tokens
/// `first..=last`, or with the given binary answer.
fn fill(
    registry: &SlotRegistry,
    tweet: &TweetExample,
    slot: &str,
    span: Option<(usize, usize)>,
    yes: bool,
) -> Result<SlotFiller, String> {
    let spec = registry.find(tweet.event_type, slot).ok_or("no such slot")?;
    let vocab = Vocab::build(tweet.normalized_tokens());
    let input = build_input(spec, tweet, &vocab, 512).map_err(|e| e.to_string())?;
    let mut start_logits = vec![0.0; input.len()];
    let mut end_logits = vec![0.0; input.len()];
    if let Some((first, last)) = span {
        start_logits[input.tweet_offset + first] = 10.0;
        end_logits[input.tweet_offset + last] = 10.0;
    }
    let inference = Inference {
        start_logits,
        end_logits,
        binary_logits: if yes { [0.0, 1.0] } else { [1.0, 0.0] },
    };
    postprocess(spec, tweet, &input, &inference, &PipelineConfig::default()).map_err(|e| e.to_string())
}

fn token_index(t: &TweetExample, word: &str) -> usize {
    t.tokens.iter().position(|x| x.text == word).unwrap_or_else(|| panic!("no token `{word}`"))
}

fn postprocessing_golden() -> Outcome {
    let reg = SlotRegistry::default_registry();
    let config = PipelineConfig::default();
    // Author rule boundary.
    let dummy = SpanPrediction { start: 1, end: 1, score: 0.0 };
    let rule = |n| apply_author_rule(SlotKind::SpanOrAuthor, dummy, n, &config).map_err(|e| e.to_string());
    ensure(rule(8)? == SpanOrAuthor::Span(dummy), || "8 tokens must pass through".into())?;
    ensure(rule(9)? == SpanOrAuthor::Author, || "9 tokens must become AUTHOR".into())?;
    ensure(apply_author_rule(SlotKind::Span, dummy, 9, &config).is_err(), || "rule accepted a span slot".into())?;
    let mut passed = 3;
    let mut check = |name: &str, got: SlotFiller, want: SlotFiller| -> Result<(), String> {
        ensure(got == want, || format!("{name}: got {got:?}, want {want:?}"))?;
        passed += 1;
        Ok(())
    };
    let t = tweet(
        "author",
        "Every single person working at the local bakery tested positive",
        EventType::TestedPositive,
        &["Every single person working at the local bakery", "the local bakery"],
        &reg,
    );
    check("8-token who", fill(&reg, &t, "who", Some((0, 7)), false)?, SlotFiller::Chunks(vec![0]))?;
    check("9-token who", fill(&reg, &t, "who", Some((0, 8)), false)?, SlotFiller::AuthorOfTweet)?;
    check("9-token where is no author", fill(&reg, &t, "where", Some((0, 8)), false)?, SlotFiller::Chunks(vec![0]))?;

    // Multi-span splitting.
    let t = tweet(
        "split",
        "Try hydroxychloroquine, zinc and vitamin c today",
        EventType::CureAndPrevention,
        &["hydroxychloroquine", "zinc", "vitamin c"],
        &reg,
    );
    let (first, last) = (token_index(&t, "hydroxychloroquine"), token_index(&t, "c"));
    check("list split", fill(&reg, &t, "what", Some((first, last)), false)?, SlotFiller::Chunks(vec![0, 1, 2]))?;
    let zinc = token_index(&t, "zinc");
    check("single item", fill(&reg, &t, "what", Some((zinc, zinc)), false)?, SlotFiller::Chunks(vec![1]))?;
    let and = token_index(&t, "and");
    check("delimiter only", fill(&reg, &t, "what", Some((and, and)), false)?, SlotFiller::Missing)?;

    // Employer scenario: a span spilling past the short chunk.
    let t = tweet(
        "notre-dame",
        "A Notre Dame football player has tested positive for COVID-19",
        EventType::TestedPositive,
        &["A Notre Dame football player", "Notre Dame", "COVID-19"],
        &reg,
    );
    let notre = token_index(&t, "Notre");
    let (football, player) = (token_index(&t, "football"), token_index(&t, "player"));
    check("Notre Dame football", fill(&reg, &t, "employer", Some((notre, football)), false)?, SlotFiller::Chunks(vec![1]))?;
    check(
        "Notre Dame football player",
        fill(&reg, &t, "employer", Some((notre, player)), false)?,
        SlotFiller::Chunks(vec![0]),
    )?;
    check("missing", fill(&reg, &t, "employer", None, false)?, SlotFiller::Missing)?;

    // Cure scenario: a cure and the people promoting it.
    let t = tweet(
        "vaping",
        "No doubt that vaping could have prevented a multitude of Covid19 deaths as reported by some French scientists",
        EventType::CureAndPrevention,
        &["vaping", "Covid19 deaths", "French scientists"],
        &reg,
    );
    let vaping = token_index(&t, "vaping");
    let (some, scientists) = (token_index(&t, "some"), token_index(&t, "scientists"));
    let what = fill(&reg, &t, "what", Some((vaping, vaping)), false)?;
    let who = fill(&reg, &t, "who", Some((some, scientists)), false)?;
    let opinion = fill(&reg, &t, "opinion", None, true)?;
    check("vaping what", what.clone(), SlotFiller::Chunks(vec![0]))?;
    check("some French scientists", who.clone(), SlotFiller::Chunks(vec![2]))?;
    check("opinion", opinion.clone(), SlotFiller::Binary(true))?;
    let fillers: BTreeMap<String, SlotFiller> =
        [("what".into(), what), ("who".into(), who), ("opinion".into(), opinion)].into();
    ensure(classify_event(&fillers), || "vaping event not identified".into())?;

    Ok(format!("{}/{} fixtures", passed + 1, passed + 1))
}

fn close(name: &str, got: f64, want: f64) -> Result<(), String> {
    ensure((got - want).abs() <= 1e-12, || format!("{name}: {got} vs {want}"))
}

fn counts(name: &str, s: &SlotScore, tp: u64, fp: u64, fn_: u64, p: f64, r: f64, f1: f64) -> Result<(), String> {
    ensure((s.tp, s.fp, s.fn_) == (tp, fp, fn_), || {
        format!("{name}: counts {:?}, want {:?}", (s.tp, s.fp, s.fn_), (tp, fp, fn_))
    })?;
    close(&format!("{name} precision"), s.precision, p)?;
    close(&format!("{name} recall"), s.recall, r)?;
    close(&format!("{name} F1"), s.f1, f1)
}

fn metrics_oracle() -> Outcome {
    use SlotFiller::{AuthorOfTweet as A, Binary, Missing};
    let ch = |c: &[usize]| SlotFiller::chunks(c.iter().copied());
    let registry = SlotRegistry::new(vec![
        SlotSpec {
            event_type: EventType::CureAndPrevention,
            name: "s1".into(),
            kind: SlotKind::Span,
            question: "What is the cure?".into(),
        },
        SlotSpec {
            event_type: EventType::CureAndPrevention,
            name: "s2".into(),
            kind: SlotKind::SpanOrAuthor,
            question: "Who is promoting it?".into(),
        },
        SlotSpec {
            event_type: EventType::CureAndPrevention,
            name: "s3".into(),
            kind: SlotKind::Binary,
            question: "Does it work?".into(),
        },
    ])
    .map_err(|e| e.to_string())?;
    // (gold s1, pred s1, gold s2, pred s2, gold s3, pred s3) per example.
    let table = [
        (ch(&[0]), ch(&[0]), A, A, true, true),
        (ch(&[1, 2]), ch(&[1]), A, ch(&[0]), true, false),
        (Missing, ch(&[3]), ch(&[1]), A, false, true),
        (ch(&[0]), Missing, Missing, Missing, false, false),
        (ch(&[2]), ch(&[1]), ch(&[0]), ch(&[0]), true, true),
        (Missing, Missing, A, Missing, false, false),
        (ch(&[0, 1]), ch(&[0, 1, 2]), Missing, A, true, true),
        (ch(&[4]), ch(&[4]), ch(&[2]), ch(&[2]), false, true),
        (Missing, Missing, Missing, Missing, false, true),
        (ch(&[3]), ch(&[2, 3]), Missing, Missing, true, false),
    ];
    let base = tweet(
        "e",
        "alpha beta gamma delta epsilon",
        EventType::CureAndPrevention,
        &["alpha", "beta", "gamma", "delta", "epsilon"],
        &registry,
    );
    let example = |i: usize, s1: &SlotFiller, s2: &SlotFiller, s3: bool| {
        let mut t = base.clone();
        t.id = format!("e{i}");
        t.gold = [("s1".into(), s1.clone()), ("s2".into(), s2.clone()), ("s3".into(), Binary(s3))].into();
        t
    };
    let golds: Vec<_> = table.iter().enumerate().map(|(i, r)| example(i, &r.0, &r.2, r.4)).collect();
    let preds: Vec<_> = table.iter().enumerate().map(|(i, r)| example(i, &r.1, &r.3, r.5)).collect();
    let report = evaluate(&preds, &golds, &registry).map_err(|e| e.to_string())?;

    let slot = |name: &str| {
        report
            .slots
            .iter()
            .find(|(id, _)| id.name == name)
            .map(|(_, s)| s.clone())
            .ok_or_else(|| format!("no score for {name}"))
    };
    counts("s1", &slot("s1")?, 6, 4, 3, 3.0 / 5.0, 2.0 / 3.0, 12.0 / 19.0)?;
    counts("s2", &slot("s2")?, 3, 3, 3, 0.5, 0.5, 0.5)?;
    counts("s3", &slot("s3")?, 3, 3, 2, 0.5, 3.0 / 5.0, 6.0 / 11.0)?;
    counts("micro", &report.micro, 12, 10, 8, 6.0 / 11.0, 3.0 / 5.0, 4.0 / 7.0)?;
    close("macro F1", report.macro_f1, (12.0 / 19.0 + 0.5 + 6.0 / 11.0) / 3.0)?;
    let events = report
        .events
        .iter()
        .find(|(e, _)| *e == EventType::CureAndPrevention)
        .map(|(_, s)| s.clone())
        .ok_or("no event score")?;
    counts("event", &events, 7, 1, 2, 7.0 / 8.0, 7.0 / 9.0, 14.0 / 17.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..1000 {
        let n = rng.random_range(1..8);
        let scores: Vec<SlotScore> = (0..n)
            .map(|_| SlotScore::from_counts(rng.random_range(0..50), rng.random_range(0..50), rng.random_range(0..50)))
            .collect();
        let (micro, _) = aggregate(&scores).map_err(|e| e.to_string())?;
        let (tp, fp, fn_) = scores.iter().fold((0, 0, 0), |a, s| (a.0 + s.tp, a.1 + s.fp, a.2 + s.fn_));
        let want = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        ensure((micro.tp, micro.fp, micro.fn_) == (tp, fp, fn_), || format!("trial {trial}: counts not pooled"))?;
        close(&format!("trial {trial} micro F1"), micro.f1, want)?;
    }
    Ok("hand-counted fixture exact to 1e-12; 1000 pooled-micro trials".into())
}

/// train → predict → eval; returns checkpoint, predictions and report bytes.
fn full_run() -> Result<[Vec<u8>; 3], String> {
    let mut run = desk();
    run.train.epochs = 3;
    run.train.seed = 5;
    let registry = SlotRegistry::default_registry();
    let corpus = gen_synthetic(8, 12, &registry).map_err(|e| e.to_string())?;
    let out = train(&run.train, &run.model(), &corpus, &registry, None).map_err(|e| e.to_string())?;
    let preds = predict_corpus(&out.params, &registry, &corpus, &run.pipeline).map_err(|e| e.to_string())?;
    let report = evaluate(&preds, &corpus, &registry).map_err(|e| e.to_string())?;
    Ok([
        to_bytes(&out.params),
        corpus_to_jsonl(&preds).into_bytes(),
        report.to_jsonl().into_bytes(),
    ])
}

fn determinism() -> Outcome {
    let a = full_run()?;
    let b = full_run()?;
    for (name, (x, y)) in ["checkpoint", "predictions", "report"].iter().zip(a.iter().zip(&b)) {
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    Ok(format!(
        "checkpoint {} B, predictions {} B, report {} B identical",
        a[0].len(),
        a[1].len(),
        a[2].len()
    ))
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let registry = SlotRegistry::default_registry();
    let mut rejected = 0;
    for i in 0..10 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let config = ModelConfig {
            encoder: EncoderConfig {
                d_model: heads * rng.random_range(2..6),
                n_layers: rng.random_range(1..3),
                n_heads: heads,
                d_ff: rng.random_range(4..24),
                max_seq_len: 64,
                ..EncoderConfig::default()
            },
            prompt: PromptConfig {
                enabled: rng.random_bool(0.8),
                n_virtual: rng.random_range(1..6),
                d_seed: rng.random_range(1..8),
                mlp_hidden: rng.random_range(1..8),
            },
        };
        let corpus = gen_synthetic(i, 3, &registry).map_err(|e| e.to_string())?;
        let params = ModelParams::init(config, build_vocab(&corpus, &registry), &registry.ids(), rng.random())
            .map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("m{i}.ckpt"));
        save_checkpoint(&params, &path).map_err(|e| e.to_string())?;
        let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
        let same = params.vocab == back.vocab
            && params.config == back.config
            && params
                .named_tensors()
                .iter()
                .zip(back.named_tensors())
                .all(|((n, _, a), (m, _, b))| *n == m && a.bit_eq(b));
        ensure(same, || format!("set {i} did not round-trip bitwise"))?;

        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let cut = rng.random_range(0..bytes.len());
            ensure(from_bytes(&bytes[..cut]).is_err(), || format!("set {i}: truncation at {cut} accepted"))?;
            let mut flipped = bytes.clone();
            let at = rng.random_range(0..bytes.len());
            flipped[at] ^= 1 << rng.random_range(0..8);
            std::fs::write(&path, &flipped).map_err(|e| e.to_string())?;
            ensure(load_checkpoint(&path).is_err(), || format!("set {i}: bit flip at {at} accepted"))?;
            rejected += 2;
        }
    }
    Ok(format!("10 parameter sets bitwise; {rejected} corrupted files rejected"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient fidelity", gradient_fidelity),
        ("2 span decoder oracle", span_decoder_oracle),
        ("3 overfit capability", overfit_capability),
        ("4 slot independence", slot_independence),
        ("5 post-processing golden suite", postprocessing_golden),
        ("6 metrics oracle", metrics_oracle),
        ("7 determinism", determinism),
        ("8 checkpoint round-trip", checkpoint_round_trip),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
