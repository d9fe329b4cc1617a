use proptest::prelude::*;
use tinylm_core::eval::*;
use tinylm_core::model::{BatchView, Objective, PosType};
use tinylm_core::tokenizer::{BOS_ID, MASK_ID, NUM_SPECIAL};
use tinylm_core::training::TrainConfig;
use tinylm_core::{Activation, Error, ModelConfig, RngState, TransformerModel};

fn tiny(objective: Objective, vocab_size: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        objective,
        vocab_size,
        max_seq_len,
        num_layers: 1,
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

fn zeroed(cfg: ModelConfig) -> TransformerModel {
    let mut m = TransformerModel::init(cfg, 0).unwrap();
    for p in m.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    m
}

fn oracle_log_prob(logits: &[f32], target: u32) -> f64 {
    let lse = logits.iter().map(|&x| (x as f64).exp()).sum::<f64>().ln();
    logits[target as usize] as f64 - lse
}

#[test]
fn uniform_model_scores_minus_n_log_v() {
    let v = 50;
    for obj in [Objective::Clm, Objective::Mlm] {
        let m = zeroed(tiny(obj, v, 16));
        let ids = [7, 9, 30, 12];
        let s = score_ids(&m, &ids).unwrap();
        assert_eq!(s.tokens, 4);
        assert!((s.log_prob + 4.0 * (v as f64).ln()).abs() < 1e-5, "{obj:?} {}", s.log_prob);
    }
}

#[test]
fn one_token_clm_score_is_the_bos_conditional() {
    let m = TransformerModel::init(tiny(Objective::Clm, 40, 8), 3).unwrap();
    let s = score_ids(&m, &[17]).unwrap();
    let logits = m.forward(&BatchView::new(&[BOS_ID], &[true], 1, 1).unwrap()).unwrap();
    assert!((s.log_prob - oracle_log_prob(logits.data(), 17)).abs() < 1e-6);
}

#[test]
fn clm_score_matches_prefix_forwards() {
    let m = TransformerModel::init(tiny(Objective::Clm, 40, 8), 5).unwrap();
    let ids = [9u32, 22, 31, 8];
    let mut expected = 0.0;
    for t in 0..ids.len() {
        let input: Vec<u32> = std::iter::once(BOS_ID).chain(ids[..t].iter().copied()).collect();
        let mask = vec![true; input.len()];
        let logits = m.forward(&BatchView::new(&input, &mask, 1, input.len()).unwrap()).unwrap();
        let v = 40;
        expected += oracle_log_prob(&logits.data()[t * v..(t + 1) * v], ids[t]);
    }
    let s = score_ids(&m, &ids).unwrap();
    assert!((s.log_prob - expected).abs() < 1e-5, "{} vs {expected}", s.log_prob);
}

/// One forward per masked position.
fn pll_oracle(m: &TransformerModel, ids: &[u32]) -> f64 {
    let v = m.config().vocab_size;
    let mut total = 0.0;
    for t in 0..ids.len() {
        if (ids[t] as usize) < NUM_SPECIAL {
            continue;
        }
        let mut x = ids.to_vec();
        x[t] = MASK_ID;
        let mask = vec![true; x.len()];
        let logits = m.forward(&BatchView::new(&x, &mask, 1, x.len()).unwrap()).unwrap();
        total += oracle_log_prob(&logits.data()[t * v..(t + 1) * v], ids[t]);
    }
    total
}

#[test]
fn mlm_pseudo_log_likelihood_matches_loop_of_forwards() {
    let m = TransformerModel::init(tiny(Objective::Mlm, 60, 96), 8).unwrap();
    let s = score_ids(&m, &[12, 40, 7]).unwrap();
    assert!((s.log_prob - pll_oracle(&m, &[12, 40, 7])).abs() < 1e-5);

    // longer than one scoring chunk, with a special that is not scored
    let mut rng = RngState::new(2);
    let mut ids: Vec<u32> = (0..90).map(|_| (NUM_SPECIAL + rng.below(55)) as u32).collect();
    ids[10] = 3;
    let s = score_ids(&m, &ids).unwrap();
    assert_eq!(s.tokens, 89);
    let o = pll_oracle(&m, &ids);
    assert!((s.log_prob - o).abs() < 1e-5 * o.abs().max(1.0), "{} vs {o}", s.log_prob);
}

#[test]
fn scoring_is_pure() {
    for obj in [Objective::Clm, Objective::Mlm] {
        let m = TransformerModel::init(tiny(obj, 40, 16), 1).unwrap();
        assert_eq!(score_ids(&m, &[8, 9, 10]).unwrap(), score_ids(&m, &[8, 9, 10]).unwrap());
    }
}

#[test]
fn over_length_input_is_an_error() {
    for obj in [Objective::Clm, Objective::Mlm] {
        let m = TransformerModel::init(tiny(obj, 40, 4), 1).unwrap();
        assert!(score_ids(&m, &[8, 9, 10, 11]).is_ok());
        assert!(matches!(
            score_ids(&m, &[8, 9, 10, 11, 12]),
            Err(Error::SequenceTooLong { len: 5, max: 4 })
        ));
        assert!(score_ids(&m, &[]).is_err());
    }
}

fn pair(good: &str, bad: &str, phenomenon: &str) -> MinimalPair {
    MinimalPair {
        good: good.into(),
        bad: bad.into(),
        phenomenon: phenomenon.into(),
        paradigm: String::new(),
    }
}

#[test]
fn pair_accuracy_examples() {
    let pairs = vec![
        pair("a good", "a bad", "x"),
        pair("b good", "b bad", "y"),
        pair("c good", "c bad", "x"),
    ];
    let always = minimal_pair_accuracy(&pairs, |s| Ok(if s.ends_with("good") { 1.0 } else { 0.0 })).unwrap();
    assert_eq!(always.overall.accuracy(), 1.0);
    let ties = minimal_pair_accuracy(&pairs, |_| Ok(-3.0)).unwrap();
    assert_eq!(ties.overall.accuracy(), 0.0);
    assert_eq!(ties.phenomena.len(), 2);
    assert!(minimal_pair_accuracy(&[], |_| Ok(0.0)).is_err());
}

#[test]
fn random_scorer_is_at_chance() {
    let pairs: Vec<MinimalPair> = (0..10_000).map(|i| pair(&format!("g{i}"), &format!("b{i}"), "p")).collect();
    let mut rng = RngState::new(77);
    let r = minimal_pair_accuracy(&pairs, |_| Ok(rng.uniform())).unwrap();
    assert!((r.overall.accuracy() - 0.5).abs() < 0.02, "{}", r.overall.accuracy());
}

#[test]
fn overall_is_the_size_weighted_mean_of_phenomena() {
    let mut rng = RngState::new(4);
    let pairs: Vec<MinimalPair> = (0..300)
        .map(|i| pair(&format!("g{i}"), &format!("b{i}"), ["p", "q", "r"][rng.below(3)]))
        .collect();
    let r = minimal_pair_accuracy(&pairs, |_| Ok(rng.uniform())).unwrap();
    let weighted: f64 = r.phenomena.iter().map(|g| g.accuracy() * g.total as f64).sum::<f64>() / 300.0;
    assert!((weighted - r.overall.accuracy()).abs() < 1e-12);
}

#[test]
fn minimal_pairs_parse_from_json_lines() {
    let line = r#"{"sentence_good": "The cats sleep.", "sentence_bad": "The cats sleeps.", "phenomenon": "agreement", "UID": "x"}"#;
    let p: MinimalPair = serde_json::from_str(line).unwrap();
    assert_eq!(p.bad, "The cats sleeps.");
    p.validate().unwrap();
    assert!(pair("same", "same", "x").validate().is_err());
}

fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
    ConfusionCounts { tp, tn, fp, fn_ }
}

#[test]
fn mcc_examples() {
    assert_eq!(mcc(counts(5, 7, 0, 0)), 1.0);
    assert_eq!(mcc(counts(1, 1, 1, 1)), 0.0);
    let v = mcc(counts(6, 3, 1, 2));
    assert!((v - 16.0 / 1120f64.sqrt()).abs() < 1e-12);
    assert!((v - 0.4781).abs() < 1e-4);
    assert_eq!(mcc(counts(0, 5, 0, 3)), 0.0);
}

#[test]
fn metrics_on_a_hand_tallied_fixture() {
    let labels = [1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0];
    let preds = [1, 1, 1, 1, 1, 0, 0, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0];
    let m = classification_metrics(&preds, &labels).unwrap();
    assert_eq!(m.counts, counts(6, 8, 3, 3));
    assert_eq!(m.accuracy, 0.7);
    assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    assert!((m.mcc - 39.0 / 99.0).abs() < 1e-12);
}

#[test]
fn metric_edge_cases() {
    let all = classification_metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
    assert_eq!((all.accuracy, all.f1, all.mcc), (1.0, 1.0, 1.0));
    let none = classification_metrics(&[0, 0], &[0, 0]).unwrap();
    assert_eq!((none.f1, none.mcc), (0.0, 0.0));
    assert!(classification_metrics(&[0], &[0, 1]).is_err());
    assert!(classification_metrics(&[], &[]).is_err());
}

proptest! {
    #[test]
    fn mcc_is_bounded_and_swap_invariant(tp in 0u64..50, tn in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
        let c = counts(tp, tn, fp, fn_);
        let v = mcc(c);
        prop_assert!((-1.0..=1.0).contains(&v));
        prop_assert!((v - mcc(counts(tn, tp, fn_, fp))).abs() < 1e-12);
        let f = f1(c);
        prop_assert!((0.0..=1.0).contains(&f));
    }
}

/// BOS, filler tokens, and a marker (5 = positive, 6 = negative) somewhere.
fn marker_task(n: usize, seed: u64) -> Vec<EncodedExample> {
    let mut rng = RngState::new(seed);
    (0..n)
        .map(|_| {
            let label = rng.below(2);
            let len = 4 + rng.below(6);
            let mut ids: Vec<u32> = (0..len).map(|_| 7 + rng.below(33) as u32).collect();
            ids.insert(rng.below(len + 1), if label == 1 { 5 } else { 6 });
            ids.insert(0, BOS_ID);
            EncodedExample { ids, label }
        })
        .collect()
}

fn quick_config(lr: f64, epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        train: TrainConfig {
            learning_rate: lr,
            epochs,
            batch_size: 16,
            grad_accum: 1,
            ..TrainConfig::finetune_encoder()
        },
        class_weights: None,
    }
}

#[test]
fn classifier_learns_a_marker_task() {
    let train = marker_task(400, 1);
    let valid = marker_task(200, 2);
    for obj in [Objective::Mlm, Objective::Clm] {
        let model = TransformerModel::init(tiny(obj, 40, 16), 9).unwrap();
        let (_, report) = finetune_classifier(model, 2, &train, &valid, &quick_config(3e-3, 10)).unwrap();
        let last = report.last().unwrap();
        assert_eq!(report.len(), 10);
        assert!(last.valid.accuracy > 0.95, "{obj:?}: {:?}", last.valid);
    }
}

#[test]
fn zero_learning_rate_keeps_the_untrained_metrics() {
    let train = marker_task(40, 3);
    let valid = marker_task(40, 4);
    let model = TransformerModel::init(tiny(Objective::Mlm, 40, 16), 2).unwrap();
    let cfg = quick_config(0.0, 2);
    let untrained = SequenceClassifier::new(model.clone(), 2, cfg.train.seed).unwrap();
    let before = untrained.evaluate(&valid, 8).unwrap();
    let (clf, report) = finetune_classifier(model, 2, &train, &valid, &cfg).unwrap();
    assert_eq!(clf, untrained);
    assert!(report.iter().all(|e| e.valid == before));
}

#[test]
fn finetuning_is_deterministic_and_checks_labels() {
    let train = marker_task(48, 5);
    let valid = marker_task(16, 6);
    let run = |weights: Option<Vec<f32>>| {
        let model = TransformerModel::init(tiny(Objective::Clm, 40, 16), 4).unwrap();
        let cfg = FinetuneConfig {
            class_weights: weights,
            ..quick_config(1e-3, 2)
        };
        finetune_classifier(model, 2, &train, &valid, &cfg).unwrap().1
    };
    assert_eq!(run(None), run(None));
    let w = balanced_class_weights(&train, 2);
    assert_eq!(w.len(), 2);
    assert_ne!(run(Some(vec![1.0, 3.0])), run(None));

    let model = TransformerModel::init(tiny(Objective::Clm, 40, 16), 4).unwrap();
    let mut bad = train.clone();
    bad[0].label = 2;
    assert!(finetune_classifier(model.clone(), 2, &bad, &valid, &quick_config(1e-3, 1)).is_err());
    assert!(finetune_classifier(model, 1, &train, &valid, &quick_config(1e-3, 1)).is_err());
}

#[test]
fn balanced_weights_are_inverse_frequency() {
    let ex = |label| EncodedExample { ids: vec![BOS_ID], label };
    let data = vec![ex(0), ex(0), ex(0), ex(1)];
    let w = balanced_class_weights(&data, 3);
    assert_eq!(w, vec![4.0 / 6.0, 2.0, 0.0]);
}
