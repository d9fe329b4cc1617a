use proptest::prelude::*;
use tinylm_core::model::{NamedTensor, Objective, PosType};
use tinylm_core::tokenizer::{EOS_ID, MASK_ID, NUM_SPECIAL, PAD_ID};
use tinylm_core::training::*;
use tinylm_core::{train_bpe, Activation, ModelConfig, RngState, Tensor, TokenizerConfig, TransformerModel};

fn tiny(objective: Objective, vocab_size: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        objective,
        vocab_size,
        max_seq_len,
        num_layers: 2,
        num_heads: 2,
        head_size: 8,
        ffn_size: 32,
        activation: Activation::Gelu,
        dropout: 0.0,
        attention_dropout: 0.0,
        pos_type: if objective == Objective::Mlm {
            PosType::RelativeKeyQuery
        } else {
            PosType::Absolute
        },
        tie_lm_head: true,
        mask_token_id: (objective == Objective::Mlm).then_some(MASK_ID),
    }
}

#[test]
fn masking_edge_policies() {
    let ids: Vec<u32> = (0..200).map(|i| i % 50).collect();
    let mut rng = RngState::new(1);
    let none = MaskingPolicy {
        select_prob: 0.0,
        ..MaskingPolicy::default()
    };
    let (c, l) = apply_mlm_masking(&ids, &none, 50, &mut rng);
    assert_eq!(c, ids);
    assert!(l.iter().all(|&x| x == IGNORE_INDEX));

    let all_mask = MaskingPolicy {
        select_prob: 0.5,
        mask_frac: 1.0,
        random_frac: 0.0,
        keep_frac: 0.0,
    };
    let (c, l) = apply_mlm_masking(&ids, &all_mask, 50, &mut rng);
    for i in 0..ids.len() {
        if l[i] != IGNORE_INDEX {
            assert_eq!(c[i], MASK_ID);
            assert_eq!(l[i], ids[i]);
        } else {
            assert_eq!(c[i], ids[i]);
        }
    }
    assert!(MaskingPolicy { keep_frac: 0.1, ..MaskingPolicy::default() }.validate().is_err());
    MaskingPolicy::default().validate().unwrap();
}

#[test]
fn masking_rates_over_a_million_tokens() {
    let n = 1_000_000;
    let mut rng = RngState::new(99);
    let ids: Vec<u32> = (0..n).map(|_| NUM_SPECIAL as u32 + rng.below(8000 - NUM_SPECIAL) as u32).collect();
    let (c, l) = apply_mlm_masking(&ids, &MaskingPolicy::default(), 8000, &mut RngState::new(7));
    let selected = l.iter().filter(|&&x| x != IGNORE_INDEX).count();
    let masked = c.iter().filter(|&&x| x == MASK_ID).count();
    let rate = selected as f64 / n as f64;
    let frac = masked as f64 / selected as f64;
    assert!((rate - 0.135).abs() < 0.002, "{rate}");
    assert!((frac - 8.0 / 9.0).abs() < 0.004, "{frac}");
}

proptest! {
    #[test]
    fn masking_never_touches_specials(ids in prop::collection::vec(0u32..40, 1..200), seed: u64) {
        let p = MaskingPolicy { select_prob: 0.9, ..MaskingPolicy::default() };
        let (c, l) = apply_mlm_masking(&ids, &p, 40, &mut RngState::new(seed));
        for i in 0..ids.len() {
            if (ids[i] as usize) < NUM_SPECIAL {
                prop_assert_eq!(c[i], ids[i]);
                prop_assert_eq!(l[i], IGNORE_INDEX);
            }
            if c[i] != ids[i] && c[i] != MASK_ID {
                prop_assert!(c[i] as usize >= NUM_SPECIAL && (c[i] as usize) < 40);
            }
        }
    }

    #[test]
    fn packing_conserves_tokens(docs in prop::collection::vec(prop::collection::vec(5u32..100, 0..20), 1..10), window in 1usize..16) {
        let nonempty: Vec<&Vec<u32>> = docs.iter().filter(|d| !d.is_empty()).collect();
        prop_assume!(!nonempty.is_empty());
        let p = pack_corpus(&docs, window, EOS_ID, PAD_ID).unwrap();
        let content: usize = nonempty.iter().map(|d| d.len()).sum();
        prop_assert_eq!(p.num_tokens(), content + nonempty.len() - 1);
        prop_assert_eq!(p.ids.len() % window, 0);
        prop_assert!(p.ids.len() - p.num_tokens() < window);
    }
}

#[test]
fn clm_shift_examples() {
    let (i, l) = clm_shift(&[7, 8, 9], PAD_ID).unwrap();
    assert_eq!(i, vec![7, 8]);
    assert_eq!(l, vec![8, 9]);
    assert!(clm_shift(&[PAD_ID; 4], PAD_ID).is_err());
    assert!(clm_shift(&[7], PAD_ID).is_err());
    let (_, l) = clm_shift(&[7, 8, PAD_ID, PAD_ID], PAD_ID).unwrap();
    assert_eq!(l, vec![8, IGNORE_INDEX, IGNORE_INDEX]);
}

#[test]
fn clm_shift_on_packed_windows_matches_index_oracle() {
    let docs: Vec<Vec<u32>> = vec![(10..17).collect(), (20..23).collect(), (30..39).collect()];
    let p = pack_corpus(&docs, 6, EOS_ID, PAD_ID).unwrap();
    let mut stream: Vec<u32> = Vec::new();
    for (k, d) in docs.iter().enumerate() {
        if k > 0 {
            stream.push(EOS_ID);
        }
        stream.extend(d);
    }
    for w in 0..p.num_windows() {
        let (row, _) = p.row(w);
        let (inputs, labels) = clm_shift(row, PAD_ID).unwrap();
        for t in 0..5 {
            let at = w * 6 + t;
            assert_eq!(inputs[t], stream.get(at).copied().unwrap_or(PAD_ID));
            let next = stream.get(at + 1).copied().filter(|_| at + 1 < w * 6 + 6);
            assert_eq!(labels[t], next.unwrap_or(IGNORE_INDEX));
        }
    }
}

#[test]
fn packing_examples() {
    let p = pack_corpus(&[vec![5u32, 6, 7, 8, 9]], 8, EOS_ID, PAD_ID).unwrap();
    assert_eq!(p.num_windows(), 1);
    assert_eq!(p.ids, vec![5, 6, 7, 8, 9, PAD_ID, PAD_ID, PAD_ID]);
    assert_eq!(p.attn_mask.iter().filter(|&&m| !m).count(), 3);

    let p = pack_corpus(&[vec![10u32, 11, 12, 13], vec![20, 21, 22, 23]], 8, EOS_ID, PAD_ID).unwrap();
    assert_eq!(p.ids, vec![10, 11, 12, 13, EOS_ID, 20, 21, 22, 23, 0, 0, 0, 0, 0, 0, 0]);
    assert_eq!(p.num_windows(), 2);
    assert_eq!(p.num_tokens(), 9);

    let empty: Vec<Vec<u32>> = vec![vec![], vec![]];
    assert!(pack_corpus(&empty, 8, EOS_ID, PAD_ID).is_err());
}

fn named(shape: &[usize], data: Vec<f32>) -> NamedTensor {
    NamedTensor {
        name: "w".into(),
        tensor: Tensor::new(shape.to_vec(), data).unwrap(),
    }
}

#[test]
fn adamw_zero_grad_no_decay_is_identity() {
    let mut p = vec![named(&[2, 2], vec![1.0, -2.0, 3.0, 0.5])];
    let before = p.clone();
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &p);
    for _ in 0..3 {
        opt.step(&mut p, &[Tensor::zeros(&[2, 2])], 1e-2).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adamw_weight_decay_only() {
    let mut p = vec![named(&[1, 1], vec![2.0])];
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    opt.step(&mut p, &[Tensor::zeros(&[1, 1])], 0.1).unwrap();
    let expect = 2.0 - 0.1 * 0.01 * 2.0;
    assert!((p[0].tensor.data()[0] as f64 - expect).abs() < 1e-6);
    // vectors are exempt from decay
    let mut b = vec![named(&[1], vec![2.0])];
    let mut opt = AdamW::new(AdamWConfig::default(), &b);
    opt.step(&mut b, &[Tensor::zeros(&[1])], 0.1).unwrap();
    assert_eq!(b[0].tensor.data()[0], 2.0);
}

#[test]
fn adamw_two_steps_match_hand_computation() {
    let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64, 0.01f64);
    let grads = [0.5f64, -0.25];
    let mut p = vec![named(&[1, 1], vec![1.0])];
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (t, g) in grads.iter().enumerate() {
        opt.step(&mut p, &[Tensor::new(vec![1, 1], vec![*g as f32]).unwrap()], lr).unwrap();
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        x -= lr * wd * x;
        x -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    assert!((p[0].tensor.data()[0] as f64 - x).abs() < 1e-6, "{} vs {x}", p[0].tensor.data()[0]);
}

#[test]
fn adamw_rejects_nan_without_touching_params() {
    let mut p = vec![named(&[1, 2], vec![1.0, 2.0]), named(&[2], vec![3.0, 4.0])];
    let before = p.clone();
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    let grads = [Tensor::ones(&[1, 2]), Tensor::new(vec![2], vec![0.0, f32::NAN]).unwrap()];
    assert!(opt.step(&mut p, &grads, 0.1).is_err());
    assert_eq!(p, before);
    assert_eq!(opt.steps_taken(), 0);
}

#[test]
fn schedule_is_piecewise_linear() {
    let s = LinearSchedule::new(1e-3, 0.06, 100);
    assert_eq!(s.warmup_steps, 6);
    for step in 1..=100u64 {
        let expect = if step <= 6 {
            1e-3 * step as f64 / 6.0
        } else {
            1e-3 * (100 - step) as f64 / 94.0
        };
        assert!((s.lr(step) - expect).abs() < 1e-15, "step {step}");
    }
    assert_eq!(s.lr(6), 1e-3);
    assert_eq!(s.lr(100), 0.0);
}

#[test]
fn perplexity_definitions() {
    assert_eq!(perplexity(0.0), 1.0);
    assert!((perplexity(3.54) - 34.47).abs() < 0.01);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut cfg = tiny(Objective::Mlm, 8000, 16);
    cfg.num_layers = 1;
    let mut model = TransformerModel::init(cfg, 0).unwrap();
    for p in model.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let docs: Vec<Vec<u32>> = (0..20).map(|d| (0..13).map(|i| 5 + (d * 13 + i) % 7000).collect()).collect();
    let data = pack_corpus(&docs, 16, EOS_ID, PAD_ID).unwrap();
    let r = evaluate_perplexity(&model, &data, &MaskingPolicy::default(), 3, 4).unwrap();
    assert!((r.loss - (8000f64).ln()).abs() < 1e-4, "{}", r.loss);
    assert!((r.perplexity / 8000.0 - 1.0).abs() < 1e-3);
    assert!(r.tokens > 0);

    let empty = Packed {
        window: 16,
        ids: vec![],
        attn_mask: vec![],
    };
    assert!(evaluate_perplexity(&model, &empty, &MaskingPolicy::default(), 3, 4).is_err());
}

#[test]
fn config_validation() {
    TrainConfig::pretrain().validate().unwrap();
    assert_eq!(TrainConfig::finetune_encoder().learning_rate, 5e-5);
    assert_eq!(TrainConfig::finetune_decoder().epochs, 5);
    for bad in [
        TrainConfig { learning_rate: -1e-3, ..TrainConfig::pretrain() },
        TrainConfig { epochs: 0, ..TrainConfig::pretrain() },
        TrainConfig { grad_accum: 0, ..TrainConfig::pretrain() },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn synthetic_docs(n: usize, seed: u64) -> Vec<String> {
    let subjects = ["the cat", "a dog", "my friend", "the old man", "our teacher"];
    let verbs = ["sees", "likes", "finds", "carries", "paints"];
    let objects = ["the ball", "a red box", "the garden", "some bread", "the river"];
    let mut rng = RngState::new(seed);
    (0..n)
        .map(|_| {
            format!(
                "{} {} {} .",
                subjects[rng.below(5)],
                verbs[rng.below(5)],
                objects[rng.below(5)]
            )
        })
        .collect()
}

fn synthetic_data(objective: Objective) -> (ModelConfig, Packed, Packed) {
    let train_lines = synthetic_docs(200, 1);
    let valid_lines = synthetic_docs(40, 2);
    let tok = train_bpe(&train_lines, &TokenizerConfig::new(300, false)).unwrap();
    let enc = |lines: &[String]| -> Vec<Vec<u32>> { lines.iter().map(|l| tok.encode(l)).collect() };
    let cfg = tiny(objective, tok.vocab_size(), 32);
    let train = pack_corpus(&enc(&train_lines), 32, EOS_ID, PAD_ID).unwrap();
    let valid = pack_corpus(&enc(&valid_lines), 32, EOS_ID, PAD_ID).unwrap();
    (cfg, train, valid)
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs: 3,
        batch_size: 4,
        grad_accum: 1,
        seed: 5,
        ..TrainConfig::pretrain()
    }
}

#[test]
fn training_reduces_validation_loss() {
    for objective in [Objective::Mlm, Objective::Clm] {
        let (cfg, train_data, valid) = synthetic_data(objective);
        let mut model = TransformerModel::init(cfg, 11).unwrap();
        let log = train(&mut model, &train_data, &valid, &smoke_config(), &MaskingPolicy::default(), &mut NoHooks).unwrap();
        let e = log.epochs();
        assert_eq!(e.len(), 3);
        assert!(e[2].valid_loss < e[0].valid_loss, "{objective}: {e:?}");
        for m in e {
            assert_eq!(m.perplexity, m.valid_loss.exp());
        }
    }
}

#[test]
fn training_is_deterministic() {
    let (cfg, train_data, valid) = synthetic_data(Objective::Mlm);
    let mut tc = smoke_config();
    tc.epochs = 2;
    let run = || {
        let mut model = TransformerModel::init(cfg.clone(), 3).unwrap();
        let log = train(&mut model, &train_data, &valid, &tc, &MaskingPolicy::default(), &mut NoHooks).unwrap();
        (model, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
}

#[test]
fn gradient_accumulation_matches_a_single_batch() {
    for objective in [Objective::Mlm, Objective::Clm] {
        let (cfg, train_data, valid) = synthetic_data(objective);
        let four = Packed {
            window: train_data.window,
            ids: train_data.ids[..4 * train_data.window].to_vec(),
            attn_mask: train_data.attn_mask[..4 * train_data.window].to_vec(),
        };
        let base = TransformerModel::init(cfg, 21).unwrap();
        let run = |batch_size, grad_accum| {
            let mut m = base.clone();
            let tc = TrainConfig {
                learning_rate: 1e-2,
                epochs: 1,
                batch_size,
                grad_accum,
                ..TrainConfig::pretrain()
            };
            train(&mut m, &four, &valid, &tc, &MaskingPolicy::default(), &mut NoHooks).unwrap();
            m
        };
        let a = run(1, 4);
        let b = run(4, 1);
        // Adam's first step is nearly sign(g)·lr, which amplifies rounding in
        // near-zero gradient entries, so the update is compared norm-wise.
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for ((pa, pb), p0) in a.params().iter().zip(b.params()).zip(base.params()) {
            for ((&x, &y), &z) in pa.tensor.data().iter().zip(pb.tensor.data()).zip(p0.tensor.data()) {
                let (dx, dy) = (x as f64 - z as f64, y as f64 - z as f64);
                diff += (dx - dy).powi(2);
                norm += dy.powi(2);
            }
        }
        assert!(norm > 0.0);
        assert!((diff / norm).sqrt() < 1e-5, "{objective}: {}", (diff / norm).sqrt());
    }
}

#[test]
fn accumulated_gradients_do_not_depend_on_micro_batch() {
    for objective in [Objective::Mlm, Objective::Clm] {
        let (cfg, data, _) = synthetic_data(objective);
        let model = TransformerModel::init(cfg.clone(), 8).unwrap();
        let examples: Vec<Example> = (0..6)
            .map(|i| make_example(objective, &data, i, &MaskingPolicy::default(), cfg.vocab_size, 4))
            .collect();
        let whole = accumulate_gradients(&model, &examples, 6, 0).unwrap();
        for micro in [1, 2, 4] {
            let acc = accumulate_gradients(&model, &examples, micro, 0).unwrap();
            assert_eq!(acc.tokens, whole.tokens);
            assert!((acc.loss_sum - whole.loss_sum).abs() < 1e-5 * whole.loss_sum);
            let (ga, gb) = (acc.grads.unwrap(), whole.grads.as_ref().unwrap().clone());
            // key biases have exactly zero gradient, so the floor is global
            let scale = gb.iter().flat_map(|g| g.data()).fold(0.0f32, |m, v| m.max(v.abs())) as f64;
            for ((x, y), p) in ga.iter().zip(&gb).zip(model.params()) {
                for (&u, &v) in x.data().iter().zip(y.data()) {
                    let err = (u as f64 - v as f64).abs();
                    assert!(err <= 1e-5 * (v as f64).abs().max(1e-2 * scale), "{}: {u} vs {v}", p.name);
                }
            }
        }
    }
}

struct StopAfter(usize);

impl TrainHooks for StopAfter {
    fn on_epoch(&mut self, _: &TransformerModel, m: &EpochMetrics) -> tinylm_core::Result<Control> {
        Ok(if m.epoch >= self.0 { Control::Stop } else { Control::Continue })
    }
}

#[test]
fn hooks_can_stop_training_and_log_is_ordered() {
    let (cfg, train_data, valid) = synthetic_data(Objective::Clm);
    let mut model = TransformerModel::init(cfg, 1).unwrap();
    let log = train(&mut model, &train_data, &valid, &smoke_config(), &MaskingPolicy::default(), &mut StopAfter(1)).unwrap();
    assert_eq!(log.epochs().len(), 1);
    let mut log = MetricsLog::new();
    let m = |epoch| EpochMetrics {
        epoch,
        train_loss: 1.0,
        valid_loss: 1.0,
        perplexity: 1.0f64.exp(),
        wall_time_secs: 0.0,
    };
    log.push(m(1)).unwrap();
    assert!(log.push(m(1)).is_err());
    log.push(m(2)).unwrap();
}
