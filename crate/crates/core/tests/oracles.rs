mod common;

use embinv::metrics::{bleu, token_f1, F1Mode};
use proptest::prelude::*;

#[test]
fn projection_gradients_match_finite_differences() {
    for seed in 0..5 {
        let err = common::projection_gradient_error(3, 2, 2, seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
    assert!(common::projection_gradient_error(5, 3, 4, 9) < 1e-4);
}

#[test]
fn encoder_length_is_three_s_plus_n() {
    assert_eq!(common::encoder_length_failures(40, 1), 0);
}

#[test]
fn bleu_matches_nltk_fixtures() {
    for &(pred, reference, expected) in common::NLTK_BLEU {
        let got = bleu(pred, reference);
        assert!((got - expected).abs() < 1e-6, "{pred:?} vs {reference:?}: {got} != {expected}");
        assert!((common::reference_bleu(pred, reference) - expected).abs() < 1e-6);
    }
}

#[test]
fn token_f1_hand_cases() {
    assert!((token_f1("a b", "a b c", F1Mode::Multiset) - 80.0).abs() < 1e-9);
    assert!((token_f1("a b x", "a b y", F1Mode::Multiset) - 200.0 / 3.0).abs() < 1e-9);
    assert!((token_f1("a a", "a", F1Mode::Multiset) - 200.0 / 3.0).abs() < 1e-9);
    assert_eq!(token_f1("a a", "a", F1Mode::Set), 100.0);
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["x", "y", "z", "w", "v"]), 1..14).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn bleu_agrees_with_reference_implementation(p in sentence(), r in sentence()) {
        prop_assert!((bleu(&p, &r) - common::reference_bleu(&p, &r)).abs() < 1e-6);
    }
}
