use proptest::prelude::*;
use tinylm_core::data::*;
use tinylm_core::tokenizer::MIN_VOCAB;
use tinylm_core::{train_bpe, Tokenizer, TokenizerConfig};

fn doc(source: &str, lines: &[&str]) -> Document {
    Document {
        source: source.into(),
        lines: lines.iter().map(|s| s.to_string()).collect(),
    }
}

/// Byte-level tokenizer without merges: one token per byte.
fn bytes_only() -> Tokenizer {
    train_bpe(["x"], &TokenizerConfig::new(MIN_VOCAB, false)).unwrap()
}

#[test]
fn question_rule() {
    assert!(is_question("Hi?"));
    assert!(is_question("Is it?\"  "));
    assert!(is_question("'Really?'"));
    assert!(is_question("\u{201C}Why?\u{201D}"));
    assert!(!is_question("Hello."));
    assert!(!is_question("? no"));
    assert!(!is_question(""));
}

#[test]
fn stats_examples() {
    let tok = bytes_only();
    let c = Corpus::new(vec![doc("chat", &["Hi?", "Hello."])]).unwrap();
    let s = compute_stats(&c, &tok).unwrap();
    assert_eq!(s.sources[0].question_proportion, 0.5);
    assert_eq!(s.sources[0].corpus_proportion, 1.0);
    assert_eq!(s.sources[0].avg_tokens, 4.5);
    assert!(compute_stats(&Corpus::default(), &tok).is_err());
}

#[test]
fn stats_on_a_ten_line_fixture() {
    let tok = bytes_only();
    let c = Corpus::new(vec![
        doc("a", &["ab", "abc?", "a", "\"ok?\"", "xyz"]),
        doc("b", &["hello", "hi?", "no", "yes.", "w"]),
    ])
    .unwrap();
    let s = compute_stats(&c, &tok).unwrap();
    // a: 2+4+1+5+3 = 15 tokens, 2 questions; b: 5+3+2+4+1 = 15 tokens, 1 question
    assert_eq!(s.sources[0].avg_tokens, 3.0);
    assert_eq!(s.sources[0].question_proportion, 0.4);
    assert_eq!(s.sources[1].avg_tokens, 3.0);
    assert_eq!(s.sources[1].question_proportion, 0.2);
    assert_eq!(s.sources[1].corpus_proportion, 0.5);
    assert_eq!(s.total.sentences, 10);
    assert_eq!(s.total.avg_tokens, 3.0);
    assert!((s.total.question_proportion - 0.3).abs() < 1e-12);
    let tsv = s.to_tsv();
    assert_eq!(tsv.lines().count(), 4);
    assert_eq!(tsv.lines().nth(1), Some("a\t5\t3.00\t0.4000\t0.5000"));
    assert_eq!(compute_stats(&c, &tok).unwrap(), s);
}

#[test]
fn corpus_invariants() {
    assert!(Corpus::new(vec![doc("a", &[])]).is_err());
    assert!(Corpus::new(vec![doc("a", &["x"]), doc("a", &["y"])]).is_err());
}

#[test]
fn split_examples() {
    let c = Corpus::new(vec![doc("a", &["1", "2", "3", "4"]), doc("b", &["5", "6"])]).unwrap();
    assert_eq!(split(&c, &[1.0], 3).unwrap(), vec![c.clone()]);
    assert_eq!(split(&c, &[0.5, 0.5], 3).unwrap(), split(&c, &[0.5, 0.5], 3).unwrap());
    assert!(split(&c, &[0.5, 0.4], 3).is_err());
    assert!(split(&c, &[1.5, -0.5], 3).is_err());
}

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(prop::collection::vec("[a-z]{1,6}", 1..40), 1..4).prop_map(|docs| Corpus {
        documents: docs
            .into_iter()
            .enumerate()
            .map(|(i, lines)| Document {
                source: format!("s{i}"),
                lines,
            })
            .collect(),
    })
}

proptest! {
    #[test]
    fn split_conserves_lines(c in corpus_strategy(), seed: u64, a in 1u32..10, b in 1u32..10, d in 1u32..10) {
        let total = (a + b + d) as f64;
        let fr = [a as f64 / total, b as f64 / total, 1.0 - (a + b) as f64 / total];
        let parts = split(&c, &fr, seed).unwrap();
        prop_assert_eq!(parts.iter().map(Corpus::num_lines).sum::<usize>(), c.num_lines());
        for d in &c.documents {
            let mut got: Vec<&String> = parts
                .iter()
                .flat_map(|p| p.documents.iter().filter(|x| x.source == d.source))
                .flat_map(|x| x.lines.iter())
                .collect();
            let mut want: Vec<&String> = d.lines.iter().collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
        }
        for p in &parts {
            prop_assert!(p.validate().is_ok());
        }
    }

    #[test]
    fn totals_are_line_weighted(c in corpus_strategy()) {
        let s = compute_stats(&c, &bytes_only()).unwrap();
        let n = s.total.sentences as f64;
        let avg: f64 = s.sources.iter().map(|r| r.avg_tokens * r.sentences as f64).sum::<f64>() / n;
        let q: f64 = s.sources.iter().map(|r| r.question_proportion * r.sentences as f64).sum::<f64>() / n;
        prop_assert!((avg - s.total.avg_tokens).abs() < 1e-9);
        prop_assert!((q - s.total.question_proportion).abs() < 1e-9);
        prop_assert!((s.sources.iter().map(|r| r.corpus_proportion).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
