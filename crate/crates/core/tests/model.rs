use tinylm_core::model::{attention_scores, param_count, param_manifest};
use tinylm_core::{Activation, BatchView, Error, ModelConfig, Objective, PosType, RngState, Tensor, TransformerModel};

fn tiny(objective: Objective, pos_type: PosType) -> ModelConfig {
    ModelConfig {
        objective,
        vocab_size: 40,
        max_seq_len: 8,
        num_layers: 2,
        num_heads: 2,
        head_size: 4,
        ffn_size: 16,
        activation: Activation::GeluNew,
        dropout: 0.1,
        attention_dropout: 0.1,
        pos_type,
        tie_lm_head: true,
        mask_token_id: Some(4),
    }
}

/// Independent enumeration of parameter shapes from the architecture description.
fn oracle_shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
    let d = c.num_heads * c.head_size;
    let mut s = vec![vec![c.vocab_size, d]];
    if c.pos_type == PosType::Absolute {
        s.push(vec![c.max_seq_len, d]);
    }
    if c.objective == Objective::Mlm {
        s.extend([vec![d], vec![d]]);
    }
    for _ in 0..c.num_layers {
        for _ in 0..4 {
            s.extend([vec![d, d], vec![d]]);
        }
        if c.pos_type != PosType::Absolute {
            s.push(vec![2 * c.max_seq_len - 1, c.head_size]);
        }
        s.extend([vec![d], vec![d], vec![d, c.ffn_size], vec![c.ffn_size], vec![c.ffn_size, d], vec![d], vec![d], vec![d]]);
    }
    if c.objective == Objective::Clm {
        s.extend([vec![d], vec![d]]);
    }
    if !c.tie_lm_head {
        s.push(vec![d, c.vocab_size]);
    }
    s.push(vec![c.vocab_size]);
    s
}

#[test]
fn init_is_deterministic_and_validated() {
    let cfg = tiny(Objective::Mlm, PosType::RelativeKeyQuery);
    let a = TransformerModel::init(cfg.clone(), 7).unwrap();
    let b = TransformerModel::init(cfg.clone(), 7).unwrap();
    let c = TransformerModel::init(cfg.clone(), 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let mut bad = cfg.clone();
    bad.num_layers = 0;
    match TransformerModel::init(bad, 7) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "num_layers"),
        other => panic!("{other:?}"),
    }
    let mut bad = cfg.clone();
    bad.mask_token_id = None;
    assert!(matches!(TransformerModel::init(bad, 1), Err(Error::Config { .. })));
    let mut bad = cfg;
    bad.attention_dropout = 1.0;
    assert!(matches!(TransformerModel::init(bad, 1), Err(Error::Config { .. })));
}

#[test]
fn init_distribution() {
    let cfg = tiny(Objective::Clm, PosType::Absolute);
    let m = TransformerModel::init(cfg, 3).unwrap();
    for p in m.params() {
        let d = p.tensor.data();
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            assert!(d.iter().all(|&v| v == 0.0), "{}", p.name);
        } else if p.name.ends_with(".gamma") {
            assert!(d.iter().all(|&v| v == 1.0), "{}", p.name);
        }
    }
    let w = m.param("embeddings.token").unwrap().data();
    let var = w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.len() as f64;
    assert!((var.sqrt() - 0.02).abs() < 0.003, "{}", var.sqrt());
}

#[test]
fn manifest_matches_enumeration() {
    for cfg in [
        ModelConfig::bebeshka(),
        ModelConfig::zlata(),
        tiny(Objective::Mlm, PosType::RelativeKey),
        ModelConfig {
            tie_lm_head: false,
            ..tiny(Objective::Clm, PosType::RelativeKeyQuery)
        },
    ] {
        let shapes: Vec<Vec<usize>> = param_manifest(&cfg).into_iter().map(|(_, s)| s).collect();
        assert_eq!(shapes, oracle_shapes(&cfg), "{cfg}");
        let total: u64 = shapes.iter().map(|s| s.iter().product::<usize>() as u64).sum();
        assert_eq!(param_count(&cfg), total);
    }
}

#[test]
fn preset_parameter_counts() {
    let b = param_count(&ModelConfig::bebeshka());
    let z = param_count(&ModelConfig::zlata());
    assert_eq!(b, 15_929_688);
    assert_eq!(z, 66_385_200);
    assert!((b as f64 - 16e6).abs() <= 0.1 * 16e6);
    assert!((z as f64 - 66e6).abs() <= 0.1 * 66e6);
}

#[test]
fn unit_config_parameter_count_by_hand() {
    let unit = ModelConfig {
        objective: Objective::Mlm,
        vocab_size: 1,
        max_seq_len: 1,
        num_layers: 1,
        num_heads: 1,
        head_size: 1,
        ffn_size: 1,
        activation: Activation::Relu,
        dropout: 0.0,
        attention_dropout: 0.0,
        pos_type: PosType::RelativeKeyQuery,
        tie_lm_head: true,
        mask_token_id: Some(0),
    };
    // token 1 + embedding norm 2 + q,k,v,o 4·2 + rel table 1 + two norms 4
    // + ffn 1+1+1+1 + head bias 1
    assert_eq!(param_count(&unit), 21);
    let decoder = ModelConfig {
        objective: Objective::Clm,
        pos_type: PosType::Absolute,
        tie_lm_head: false,
        ..unit
    };
    // token 1 + position 1 + attention 8 + norms 4 + ffn 4 + final norm 2
    // + head weight 1 + head bias 1
    assert_eq!(param_count(&decoder), 22);
}

#[test]
fn presets_have_two_heads_per_layer() {
    for cfg in [ModelConfig::bebeshka(), ModelConfig::zlata()] {
        assert_eq!(cfg.num_heads, 2 * cfg.num_layers);
        cfg.validate().unwrap();
    }
}

#[test]
fn attention_scores_examples() {
    let mut rng = RngState::new(4);
    let (a, t, h, max) = (2, 3, 4, 5);
    let q = Tensor::randn(&[a, t, h], 1.0, &mut rng);
    let k = Tensor::randn(&[a, t, h], 1.0, &mut rng);
    let zeros = Tensor::zeros(&[2 * max - 1, h]);
    let abs = attention_scores(&q, &k, None, PosType::Absolute, max).unwrap();
    for pos in [PosType::RelativeKey, PosType::RelativeKeyQuery] {
        let rel = attention_scores(&q, &k, Some(&zeros), pos, max).unwrap();
        assert_eq!(rel, abs);
    }
    let q1 = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 0.5, -1.0]).unwrap();
    let k1 = Tensor::new(vec![1, 1, 4], vec![0.5, 1.0, 2.0, 3.0]).unwrap();
    let s = attention_scores(&q1, &k1, None, PosType::Absolute, 1).unwrap();
    assert_eq!(s.shape(), &[1, 1, 1]);
    assert!((s.data()[0] - (0.5 + 2.0 + 1.0 - 3.0) / 2.0).abs() < 1e-7);
    let long = Tensor::zeros(&[1, 6, 4]);
    assert!(matches!(
        attention_scores(&long, &long, None, PosType::Absolute, 5),
        Err(Error::SequenceTooLong { len: 6, max: 5 })
    ));
}

#[test]
fn attention_scores_match_scalar_loop() {
    let (t, h, max) = (3usize, 2usize, 4usize);
    let q = Tensor::new(vec![1, t, h], vec![1.0, 0.0, 0.5, -1.0, 2.0, 1.0]).unwrap();
    let k = Tensor::new(vec![1, t, h], vec![0.0, 1.0, 1.0, 1.0, -0.5, 2.0]).unwrap();
    let table: Vec<f32> = (0..(2 * max - 1) * h).map(|i| 0.1 * i as f32 - 0.3).collect();
    let r = Tensor::new(vec![2 * max - 1, h], table.clone()).unwrap();
    for pos in [PosType::RelativeKey, PosType::RelativeKeyQuery] {
        let got = attention_scores(&q, &k, Some(&r), pos, max).unwrap();
        for i in 0..t {
            for j in 0..t {
                let dist = (j as i64 - i as i64 + max as i64 - 1) as usize;
                let (mut qk, mut qr, mut kr) = (0.0f64, 0.0f64, 0.0f64);
                for c in 0..h {
                    let (qi, kj, rc) = (q.data()[i * h + c] as f64, k.data()[j * h + c] as f64, table[dist * h + c] as f64);
                    qk += qi * kj;
                    qr += qi * rc;
                    kr += kj * rc;
                }
                let mut want = qk / (h as f64).sqrt() + qr;
                if pos == PosType::RelativeKeyQuery {
                    want += kr;
                }
                assert!((got.data()[i * t + j] as f64 - want).abs() < 1e-6, "{pos} {i} {j}");
            }
        }
    }
}

fn batch_ids(b: usize, t: usize, v: u32, seed: u64) -> Vec<u32> {
    let mut rng = RngState::new(seed);
    (0..b * t).map(|_| 5 + rng.below((v - 5) as usize) as u32).collect()
}

#[test]
fn forward_shape_and_errors() {
    for pos in [PosType::Absolute, PosType::RelativeKey, PosType::RelativeKeyQuery] {
        for obj in [Objective::Mlm, Objective::Clm] {
            let m = TransformerModel::init(tiny(obj, pos), 1).unwrap();
            let ids = batch_ids(3, 5, 40, 2);
            let mask = vec![true; 15];
            let out = m.forward(&BatchView::new(&ids, &mask, 3, 5).unwrap()).unwrap();
            assert_eq!(out.shape(), &[3, 5, 40]);
            assert!(out.is_finite());
        }
    }
    let m = TransformerModel::init(tiny(Objective::Clm, PosType::Absolute), 1).unwrap();
    let ids = batch_ids(1, 9, 40, 2);
    let mask = vec![true; 9];
    let err = m.forward(&BatchView::new(&ids, &mask, 1, 9).unwrap()).unwrap_err();
    assert!(matches!(err, Error::SequenceTooLong { len: 9, max: 8 }));
    let bad = [41u32, 5];
    assert!(matches!(
        m.forward(&BatchView::new(&bad, &[true, true], 1, 2).unwrap()),
        Err(Error::TokenOutOfRange { id: 41, .. })
    ));
    assert!(BatchView::new(&bad, &[true], 1, 2).is_err());
}

#[test]
fn clm_is_causal() {
    for pos in [PosType::Absolute, PosType::RelativeKeyQuery] {
        let m = TransformerModel::init(tiny(Objective::Clm, pos), 5).unwrap();
        let ids = batch_ids(1, 8, 40, 9);
        let mask = vec![true; 8];
        let base = m.forward(&BatchView::new(&ids, &mask, 1, 8).unwrap()).unwrap();
        for t in 0..7 {
            let mut changed = ids.clone();
            for x in &mut changed[t + 1..] {
                *x = 5 + (*x + 7) % 35;
            }
            let out = m.forward(&BatchView::new(&changed, &mask, 1, 8).unwrap()).unwrap();
            let n = (t + 1) * 40;
            assert_eq!(&out.data()[..n], &base.data()[..n], "{pos} t={t}");
            assert_ne!(&out.data()[n..], &base.data()[n..]);
        }
    }
}

#[test]
fn mlm_ignores_padding_content() {
    let m = TransformerModel::init(tiny(Objective::Mlm, PosType::RelativeKeyQuery), 6).unwrap();
    let mut ids = batch_ids(2, 7, 40, 3);
    let mask: Vec<bool> = (0..14).map(|i| i % 7 < if i < 7 { 4 } else { 6 }).collect();
    let base = m.forward(&BatchView::new(&ids, &mask, 2, 7).unwrap()).unwrap();
    for (i, x) in ids.iter_mut().enumerate() {
        if !mask[i] {
            *x = 0;
        }
    }
    let out = m.forward(&BatchView::new(&ids, &mask, 2, 7).unwrap()).unwrap();
    for i in 0..14 {
        if mask[i] {
            for v in 0..40 {
                let (a, b) = (out.data()[i * 40 + v], base.data()[i * 40 + v]);
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn from_params_checks_manifest() {
    let cfg = tiny(Objective::Mlm, PosType::RelativeKey);
    let m = TransformerModel::init(cfg.clone(), 1).unwrap();
    let back = TransformerModel::from_params(cfg.clone(), m.params().to_vec()).unwrap();
    assert_eq!(back, m);
    let mut params = m.params().to_vec();
    params.swap(0, 1);
    assert!(TransformerModel::from_params(cfg.clone(), params).is_err());
    let mut params = m.params().to_vec();
    params[3].tensor.data_mut()[0] = f32::NAN;
    assert!(matches!(TransformerModel::from_params(cfg, params), Err(Error::NonFinite(_))));
}
