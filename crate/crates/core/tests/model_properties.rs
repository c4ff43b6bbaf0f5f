use promptqa::encoder::{encode_tensor, EncoderConfig, EncoderParams};
use promptqa::gradcheck::{model_gradcheck, ModelCheckSettings};
use promptqa::model::Trainable;
use promptqa::params::ParamGroup;
use promptqa::prompt::PromptConfig;
use promptqa::span_head::span_logits;
use promptqa::synth::gen_synthetic;
use promptqa::trainer::{build_instances, build_vocab, loss_and_grads, train_with, TrainConfig, Trainer};
use promptqa::{ModelConfig, ModelParams, SlotRegistry, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            ..EncoderConfig::default()
        },
        prompt: PromptConfig {
            n_virtual: 4,
            d_seed: 8,
            mlp_hidden: 16,
            ..PromptConfig::default()
        },
    }
}

fn model(config: ModelConfig, seed: u64) -> (ModelParams, Vec<promptqa::trainer::Instance>) {
    let reg = SlotRegistry::default_registry();
    let corpus = gen_synthetic(seed, 6, &reg).unwrap();
    let params = ModelParams::init(config, build_vocab(&corpus, &reg), &reg.ids(), seed).unwrap();
    let inst = build_instances(&corpus, &reg, &params.vocab, &params.config).unwrap();
    (params, inst)
}

#[test]
fn two_layer_d16_model_passes_gradcheck() {
    let reg = SlotRegistry::default_registry();
    for seed in 0..5 {
        let r = model_gradcheck(&small_config(), &reg, seed, &ModelCheckSettings::default()).unwrap();
        assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn masked_positions_do_not_leak() {
    let config = EncoderConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 32,
        vocab_size: 10,
        max_seq_len: 16,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = EncoderParams::init(&config, &mut rng);
    let mask = [true, true, false, true, false, false, true, true];
    let x = Tensor::randn(&[8, 16], 1.0, &mut rng);
    let base = encode_tensor(&params, &config, &x, &mask).unwrap();
    for trial in 0..10 {
        let mut y = x.clone();
        let noise = Tensor::randn(&[8, 16], 5.0, &mut rng);
        for (r, &ok) in mask.iter().enumerate() {
            if !ok {
                for c in 0..16 {
                    y.data_mut()[r * 16 + c] += noise.data()[r * 16 + c];
                }
            }
        }
        let out = encode_tensor(&params, &config, &y, &mask).unwrap();
        for (r, &ok) in mask.iter().enumerate() {
            if ok {
                for (a, b) in base.row(r).iter().zip(out.row(r)) {
                    assert!((a - b).abs() <= 1e-9, "trial {trial}, row {r}");
                }
            }
        }
    }
}

#[test]
fn prompt_seed_receives_gradient() {
    let (params, inst) = model(small_config(), 2);
    let first = &inst[0];
    let (_, grads) = loss_and_grads(&params, &[first], Trainable::ALL).unwrap();
    let name = format!("prompt.{}.seed", first.slot);
    let g = grads.get(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
    assert!(g.data().iter().any(|v| *v != 0.0));
}

#[test]
fn prompts_off_is_plain_question_answering() {
    let mut config = small_config();
    config.prompt.enabled = false;
    let (params, inst) = model(config, 4);
    for i in inst.iter().take(5) {
        let got = params.infer(&i.input, &i.slot).unwrap();

        // Token + position embeddings, encoder, span head; nothing else.
        let mut tape = Tape::new();
        let enc = params.encoder.bind(&mut tape, false, &mut Default::default());
        let head = params.span_head.bind(&mut tape, false, &mut Default::default());
        let tok = tape.gather_rows(enc.tok_emb, &i.input.ids).unwrap();
        let pos = tape.slice_rows(enc.pos_emb, 0..i.input.len()).unwrap();
        let emb = tape.add(tok, pos).unwrap();
        let h = promptqa::encoder::encode(&mut tape, emb, &i.input.attn_mask, &enc, &params.config.encoder).unwrap();
        let (s, e) = span_logits(&mut tape, h, &head).unwrap();
        assert_eq!(got.start_logits, tape.value(s).data());
        assert_eq!(got.end_logits, tape.value(e).data());
    }
}

#[test]
fn prompt_bank_accounting_identity() {
    let (on, _) = model(small_config(), 5);
    let mut off_config = small_config();
    off_config.prompt.enabled = false;
    let (off, _) = model(off_config, 5);
    let c = &on.config.prompt;
    let d = on.config.encoder.d_model;
    let per_slot = c.n_virtual * c.d_seed + c.d_seed * c.mlp_hidden + c.mlp_hidden + c.mlp_hidden * d + d;
    let slots = SlotRegistry::default_registry().ids().len();
    assert_eq!(on.prompts.numel(), per_slot * slots);
    assert_eq!(off.param_count(), on.param_count() - on.prompts.numel());
}

#[test]
fn frozen_encoder_is_bitwise_unchanged_while_the_rest_moves() {
    let (params, inst) = model(small_config(), 6);
    let config = TrainConfig {
        freeze_encoder: true,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(params.clone(), config).unwrap();
    for chunk in inst.chunks(4).take(6) {
        let batch: Vec<_> = chunk.iter().collect();
        trainer.step(&batch).unwrap();
    }
    let before = params.named_tensors();
    let after = trainer.params.named_tensors();
    let mut moved = [false; 2];
    for ((name, group, a), (_, _, b)) in before.iter().zip(&after) {
        match group {
            ParamGroup::Encoder => assert!(a.bit_eq(b), "{name} changed"),
            ParamGroup::Prompt(_) => moved[0] |= !a.bit_eq(b),
            _ => moved[1] |= !a.bit_eq(b),
        }
    }
    assert_eq!(moved, [true, true]);
}

/// After a 10-epoch warm-up, no epoch's mean loss exceeds the lowest earlier
/// post-warm-up mean by more than 5% of the epoch-10 loss. Full-batch, so the
/// epoch means carry no minibatch sampling noise.
#[test]
fn overfit_loss_is_non_increasing_after_warm_up() {
    let reg = SlotRegistry::default_registry();
    let corpus = gen_synthetic(42, 32, &reg).unwrap();
    let config = TrainConfig {
        epochs: 200,
        seed: 1,
        batch_size: usize::MAX,
        ..TrainConfig::default()
    };
    let model_config = ModelConfig {
        encoder: EncoderConfig::default(),
        prompt: PromptConfig::default(),
    };
    let out = train_with(&config, &model_config, &corpus, &reg, None, |_, _| true).unwrap();
    let losses: Vec<f64> = out.losses.iter().map(|e| e.mean_loss).collect();
    let slack = 0.05 * losses[9];
    let mut best = losses[9];
    for (i, &l) in losses.iter().enumerate().skip(10) {
        assert!(l <= best + slack, "epoch {}: {l} vs best {best} (+{slack})", i + 1);
        best = best.min(l);
    }
    assert!(losses[199] < 0.1 * losses[9], "{losses:?}");
}
