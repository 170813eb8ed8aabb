use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialsum_core::decoding::{
    beam_search, decode, greedy, teacher_force, DecodeConfig, DecodeError, Session, Stepper,
};
use trialsum_core::model::gradcheck::random_example;
use trialsum_core::model::{Architecture, Model, ModelConfig, ModelError, StepOutput};
use trialsum_core::tokenizer::{TokenId, BOS, EOS};

fn dist(probs: Vec<f64>) -> StepOutput {
    StepOutput {
        aspect_states: Vec::new(),
        aspect_probs: Vec::new(),
        gate_logits: Vec::new(),
        gate: Vec::new(),
        probs,
    }
}

/// Puts all mass on the next token of `seq`, then on EOS.
struct Forced {
    seq: Vec<TokenId>,
    vocab: usize,
}

impl Stepper for Forced {
    fn step(&self, prefix: &[TokenId]) -> Result<StepOutput, ModelError> {
        let mut p = vec![0.0; self.vocab];
        let next = self.seq.get(prefix.len() - 1).copied().unwrap_or(EOS);
        p[next as usize] = 1.0;
        Ok(dist(p))
    }
}

/// Seeded pseudo-random table keyed by the prefix.
struct Table {
    seed: u64,
    vocab: usize,
}

impl Stepper for Table {
    fn step(&self, prefix: &[TokenId]) -> Result<StepOutput, ModelError> {
        assert_eq!(prefix[0], BOS);
        let key = prefix
            .iter()
            .fold(self.seed, |h, &t| h.wrapping_mul(0x100000001b3).wrapping_add(t as u64 + 7));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let raw: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(0.01..1.0f64).powi(3)).collect();
        let z: f64 = raw.iter().sum();
        Ok(dist(raw.into_iter().map(|x| x / z).collect()))
    }
}

fn cfg(beam_size: usize, min_len: usize, max_len: usize) -> DecodeConfig {
    DecodeConfig {
        beam_size,
        min_len,
        max_len,
        alpha: 0.0,
    }
}

#[test]
fn forced_distribution_yields_its_sequence() {
    let seq = vec![5, 9, 3, 7, 7];
    let s = Forced { seq: seq.clone(), vocab: 12 };
    for beam in [1, 2, 5] {
        let out = decode(&s, &cfg(beam, 1, 20)).unwrap();
        assert_eq!(out.tokens, seq);
        assert!(out.finished);
        assert_eq!(out.score, 0.0);
        assert_eq!(out.trace.len(), seq.len());
    }
}

#[test]
fn min_len_masks_eos() {
    let s = Forced { seq: vec![6], vocab: 8 };
    for beam in [1, 3] {
        let out = decode(&s, &cfg(beam, 4, 10)).unwrap();
        assert!(out.tokens.len() >= 4, "{:?}", out.tokens);
        assert!(!out.tokens.contains(&EOS));
    }
}

#[test]
fn max_len_caps_unfinished_output() {
    let s = Forced {
        seq: vec![4; 50],
        vocab: 6,
    };
    for beam in [1, 4] {
        let out = decode(&s, &cfg(beam, 1, 7)).unwrap();
        assert_eq!(out.tokens.len(), 7);
        assert!(!out.finished);
        assert_eq!(out.trace.len(), 7);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let s = Forced { seq: vec![], vocab: 4 };
    for c in [cfg(0, 1, 5), cfg(17, 1, 5), cfg(2, 0, 5), cfg(2, 6, 5)] {
        assert!(matches!(beam_search(&s, &c), Err(DecodeError::Config(_))));
        assert!(matches!(greedy(&s, &c), Err(DecodeError::Config(_))));
    }
}

/// Best sequence by enumeration; finished sequences carry EOS in the
/// tie-break key.
fn enumerate(s: &Table, min_len: usize, max_len: usize) -> (Vec<TokenId>, bool, f64) {
    let mut all: Vec<(f64, Vec<TokenId>, bool)> = Vec::new();
    fn walk(s: &Table, toks: &mut Vec<TokenId>, score: f64, min_len: usize, max_len: usize, all: &mut Vec<(f64, Vec<TokenId>, bool)>) {
        if toks.len() == max_len {
            all.push((score, toks.clone(), false));
            return;
        }
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(toks);
        let p = s.step(&prefix).unwrap().probs;
        for v in 0..s.vocab as TokenId {
            if v == EOS {
                if toks.len() >= min_len {
                    all.push((score + p[v as usize].ln(), toks.clone(), true));
                }
                continue;
            }
            toks.push(v);
            walk(s, toks, score + p[v as usize].ln(), min_len, max_len, all);
            toks.pop();
        }
    }
    walk(s, &mut Vec::new(), 0.0, min_len, max_len, &mut all);
    let key = |e: &(f64, Vec<TokenId>, bool)| {
        let mut k = e.1.clone();
        if e.2 {
            k.push(EOS);
        }
        k
    };
    let best = all
        .iter()
        .min_by(|a, b| b.0.total_cmp(&a.0).then_with(|| key(a).cmp(&key(b))))
        .unwrap()
        .clone();
    (best.1, best.2, best.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wide_beam_finds_exhaustive_argmax(seed in any::<u64>(), max_len in 1usize..=4, min_off in 0usize..4) {
        let min_len = 1 + min_off.min(max_len - 1);
        let s = Table { seed, vocab: 3 };
        let out = beam_search(&s, &cfg(16, min_len, max_len)).unwrap().best;
        let (toks, finished, score) = enumerate(&s, min_len, max_len);
        prop_assert_eq!(out.tokens, toks);
        prop_assert_eq!(out.finished, finished);
        prop_assert!((out.score - score).abs() < 1e-9);
    }

    #[test]
    fn beam_one_is_greedy(seed in any::<u64>(), vocab in 3usize..8, min_len in 1usize..4, extra in 0usize..6) {
        let s = Table { seed, vocab };
        let c = cfg(1, min_len, min_len + extra);
        let g = greedy(&s, &c).unwrap();
        let b = beam_search(&s, &c).unwrap().best;
        prop_assert_eq!(&g.tokens, &b.tokens);
        prop_assert_eq!(g.finished, b.finished);
        prop_assert_eq!(g.score, b.score);
        prop_assert_eq!(g.trace, b.trace);
    }

    #[test]
    fn scores_match_teacher_forcing(seed in any::<u64>(), beam in 1usize..6, alpha in prop_oneof![Just(0.0), Just(0.7)]) {
        let s = Table { seed, vocab: 6 };
        let c = DecodeConfig { alpha, ..cfg(beam, 2, 8) };
        let out = decode(&s, &c).unwrap();
        let (trace, score) = teacher_force(&s, &out.tokens, out.finished).unwrap();
        prop_assert!((score - out.score).abs() < 1e-9);
        prop_assert_eq!(trace.len(), out.tokens.len());
        prop_assert_eq!(out.trace, trace);
        prop_assert!(out.tokens.len() >= 2 && out.tokens.len() <= 8);
        prop_assert!(!out.tokens.contains(&EOS));
    }

    #[test]
    fn completed_beam_is_sorted(seed in any::<u64>(), beam in 2usize..8) {
        let s = Table { seed, vocab: 5 };
        let out = beam_search(&s, &cfg(beam, 1, 6)).unwrap();
        for w in out.beam.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        prop_assert_eq!(out.beam[0].score, out.best.score);
    }
}

#[test]
fn beam_one_is_greedy_on_tiny_models() {
    for seed in 0..100u64 {
        let c = ModelConfig::tiny(Architecture::Multihead, 20);
        let model = Model::<f32>::new(c.clone(), seed).unwrap();
        let ex = random_example(&c, 3, seed);
        let s = Session::new(&model, &ex.bundle).unwrap();
        let dc = cfg(1, 1 + (seed as usize % 3), 10);
        let g = greedy(&s, &dc).unwrap();
        let b = beam_search(&s, &dc).unwrap().best;
        assert_eq!((g.tokens, g.finished, g.score), (b.tokens, b.finished, b.score), "seed {seed}");
    }
}

/// Widening the beam never lowers the returned score, over beams 1, 2, 4, 8.
#[test]
#[ignore = "does not hold: seeds 42 and 57 score lower with a wider beam"]
fn wider_beams_never_score_lower_on_tiny_models() {
    let mut violations = Vec::new();
    for seed in 0..60u64 {
        let c = ModelConfig::tiny(Architecture::Multihead, 20);
        let model = Model::<f32>::new(c.clone(), 500 + seed).unwrap();
        let ex = random_example(&c, 3, seed);
        let s = Session::new(&model, &ex.bundle).unwrap();
        let scores: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|&b| beam_search(&s, &cfg(b, 1, 8)).unwrap().best.score)
            .collect();
        if scores.windows(2).any(|w| w[1] < w[0] - 1e-9) {
            violations.push((seed, scores));
        }
    }
    assert!(violations.is_empty(), "score dropped as the beam widened: {violations:?}");
}

/// Beam 2 prunes the greedy path after three tokens and ends on a worse
/// unfinished hypothesis.
#[test]
fn wider_beam_can_lose_the_greedy_path() {
    let c = ModelConfig::tiny(Architecture::Multihead, 20);
    let model = Model::<f32>::new(c.clone(), 557).unwrap();
    let ex = random_example(&c, 3, 57);
    let s = Session::new(&model, &ex.bundle).unwrap();
    let g = beam_search(&s, &cfg(1, 1, 8)).unwrap().best;
    let b = beam_search(&s, &cfg(2, 1, 8)).unwrap().best;
    assert_eq!(g.tokens, vec![19, 19, 19]);
    assert!(g.finished);
    assert!(!b.finished);
    assert!(b.score < g.score);
}
