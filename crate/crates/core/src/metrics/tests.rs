use super::*;
use crate::adapters::init_adapters;
use crate::model::ModelConfig;

const E: f64 = std::f64::consts::E;

#[test]
fn rouge_n_hand_examples() {
    assert_eq!(rouge_n_f1(&["a", "b", "c"], &["a", "b", "c"], 2), 1.0);
    let f = rouge_n_f1(&["a", "b", "c"], &["a", "c", "d"], 1);
    assert!((f - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(rouge_n_f1(&["a", "b"], &["a"], 2), 0.0);
    assert_eq!(rouge_n_f1::<&str>(&[], &["a"], 1), 0.0);
}

#[test]
fn rouge_n_clips_repeats() {
    // cand "a a a", ref "a b": one clipped hit, P = 1/3, R = 1/2.
    let f = rouge_n_f1(&["a", "a", "a"], &["a", "b"], 1);
    assert!((f - 0.4).abs() < 1e-15);
}

#[test]
fn rouge_l_hand_examples() {
    assert_eq!(lcs_len(&["a", "b", "c", "d"], &["a", "c", "b", "d"]), 3);
    assert_eq!(rouge_l_f1(&["a", "b", "c", "d"], &["a", "c", "b", "d"]), 0.75);
    assert_eq!(rouge_l_f1(&["a", "b"], &["c", "d"]), 0.0);
    assert_eq!(rouge_l_f1::<u8>(&[], &[]), 0.0);
}

#[test]
fn bleu_identical_is_one() {
    let s = [1, 2, 3, 4, 5];
    for k in 1..=4 {
        assert_eq!(bleu_k(&s, &s, k), 1.0);
        assert_eq!(bleu_k_with(&s, &s, k, false), 1.0);
    }
    assert_eq!(bleu_n_avg(&s, &s), 1.0);
}

#[test]
fn bleu_brevity_penalty() {
    let reference = [1, 2, 3, 4, 5, 6, 7, 8];
    let cand = &reference[..4];
    for k in 1..=4 {
        assert!((bleu_k(cand, &reference, k) - 1.0 / E).abs() < 1e-15);
    }
}

#[test]
fn bleu_unigram_only_overlap() {
    // cand [1,2,3,4] vs ref [4,3,2,1]: every unigram matches, no higher n-gram.
    let (c, r) = ([1, 2, 3, 4], [4, 3, 2, 1]);
    let b1 = bleu_k(&c, &r, 1);
    assert_eq!(b1, 1.0);
    // smoothed p2 = 1/4, p3 = 1/3, p4 = 1/2
    let b2 = (1.0f64 * 0.25).sqrt();
    let b3 = (1.0f64 * 0.25 * (1.0 / 3.0)).powf(1.0 / 3.0);
    let b4 = (1.0f64 * 0.25 * (1.0 / 3.0) * 0.5).powf(0.25);
    assert!((bleu_k(&c, &r, 2) - b2).abs() < 1e-15);
    assert!((bleu_k(&c, &r, 3) - b3).abs() < 1e-15);
    assert!((bleu_k(&c, &r, 4) - b4).abs() < 1e-15);
    let avg = bleu_n_avg(&c, &r);
    assert!((avg - (b1 + b2 + b3 + b4) / 4.0).abs() < 1e-15);
    assert_eq!(bleu_k_with(&c, &r, 2, false), 0.0);
}

#[test]
fn bleu_degenerate_inputs() {
    assert_eq!(bleu_k::<u8>(&[], &[1], 1), 0.0);
    assert_eq!(bleu_k(&[1], &[1], 0), 0.0);
    assert_eq!(bleu_k(&[1], &[1], 5), 0.0);
    assert_eq!(bleu_k(&[9], &[1], 1), 0.0);
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let cfg = ModelConfig::default();
    let mut model = BaseModel::<f64>::init(&cfg).unwrap();
    model.tok_embed.data_mut().iter_mut().for_each(|x| *x = 0.0);
    let set = init_adapters::<f64>(&cfg, 4, 0).unwrap();
    let test = vec![
        TokenizedExample::new("abc", "de", 128).unwrap(),
        TokenizedExample::new("x", "yz!", 128).unwrap(),
    ];
    let ppl = perplexity(&model, &set, &test).unwrap();
    assert!((ppl - 259.0).abs() < 1e-9, "{ppl}");
}

#[test]
fn perplexity_ignores_order() {
    let cfg = ModelConfig::default();
    let model = BaseModel::<f64>::init(&cfg).unwrap();
    let set = init_adapters::<f64>(&cfg, 4, 0).unwrap();
    let mut test = vec![
        TokenizedExample::new("abc", "de", 128).unwrap(),
        TokenizedExample::new("x", "yz!", 128).unwrap(),
        TokenizedExample::new("hello", "w", 128).unwrap(),
    ];
    let a = perplexity(&model, &set, &test).unwrap();
    test.reverse();
    let b = perplexity(&model, &set, &test).unwrap();
    assert!((a - b).abs() < 1e-9 * a);
    assert!(perplexity(&model, &set, &[]).is_err());
}

#[test]
fn evaluate_fills_a_report() {
    let cfg = ModelConfig::default();
    let model = BaseModel::<f64>::init(&cfg).unwrap();
    let set = init_adapters::<f64>(&cfg, 4, 0).unwrap();
    let test = vec![
        InstructionExample::new("Q: can a minor sue a firm?", "1) has claim"),
        InstructionExample::new("hi", "yo"),
    ];
    let opts = EvalOptions {
        generate_limit: 2,
        ..EvalOptions::default()
    };
    let r = evaluate(&model, &set, &test, "m", "c", &opts).unwrap();
    assert!(r.perplexity >= 1.0);
    for v in [r.rouge1_f1, r.rouge2_f1, r.rouge_l_f1, r.bleu4, r.bleu_n] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!((r.model.as_str(), r.corpus.as_str()), ("m", "c"));
}

#[test]
fn whitespace_units() {
    assert_eq!(units("a  b\tc", TokenUnit::Whitespace), vec!["a", "b", "c"]);
    assert_eq!(units("ab", TokenUnit::Byte), vec!["97", "98"]);
}
