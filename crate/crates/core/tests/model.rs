use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialsum_core::aspect::{Aspect, NUM_ASPECTS};
use trialsum_core::bundle::AspectBundle;
use trialsum_core::model::gradcheck::gradient_check;
use trialsum_core::model::{
    mix_distributions, Architecture, Model, ModelConfig, ModelError, TokenizedExample,
};
use trialsum_core::tokenizer::{TokenId, BOS, EOS, NUM_SPECIALS};

const VOCAB: usize = 20;

fn random_bundle(rng: &mut ChaCha8Rng, vocab: usize, max_src_len: usize) -> AspectBundle {
    let n_docs = rng.random_range(1..=3);
    let docs = (0..n_docs)
        .map(|_| {
            std::array::from_fn(|_| {
                let len = rng.random_range(0..=4);
                (0..len)
                    .map(|_| rng.random_range(NUM_SPECIALS as TokenId..vocab as TokenId))
                    .collect()
            })
        })
        .collect::<Vec<_>>();
    let mut b = AspectBundle::new(docs, (0..n_docs).map(|i| format!("t{i}")).collect(), max_src_len);
    if b.is_empty() {
        b = b.with_aspect(Aspect::Punchline, vec![vec![NUM_SPECIALS as TokenId]; n_docs]);
    }
    b
}

fn random_example(rng: &mut ChaCha8Rng, cfg: &ModelConfig, len: usize) -> TokenizedExample {
    let mut target: Vec<TokenId> = (0..len - 1)
        .map(|_| rng.random_range(NUM_SPECIALS as TokenId..cfg.vocab_size as TokenId))
        .collect();
    target.push(EOS);
    let labels = (0..len)
        .map(|i| (i + 1 < len && rng.random_bool(0.7)).then(|| rng.random_range(0..NUM_ASPECTS)))
        .collect();
    TokenizedExample {
        bundle: random_bundle(rng, cfg.vocab_size, cfg.max_src_len),
        target,
        labels,
    }
}

fn check_gradients(arch: Architecture) {
    let cfg = ModelConfig::tiny(arch, VOCAB);
    let model = Model::<f64>::new(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ex = random_example(&mut rng, &cfg, 5);
    let report = gradient_check(&model, &ex, 0.5, 240, 1).unwrap();
    assert!(report.coordinates.len() >= 200);
    if let Some(g) = model.gate_param() {
        let gate_name = &model.params().names[g];
        let n = report.coordinates.iter().filter(|c| &c.tensor == gate_name).count();
        assert_eq!(n, cfg.d_model);
    }
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst()
    );
}

#[test]
fn multihead_gradients_match_finite_differences() {
    check_gradients(Architecture::Multihead);
}

#[test]
fn baseline_gradients_match_finite_differences() {
    check_gradients(Architecture::Baseline);
}

/// Straight-line loss: mean over tokens of `-log sum_k z_k o_k[y]` plus
/// `lambda` times the mean of `-log z[label]`, from step outputs alone.
fn reference_loss(model: &Model<f64>, ex: &TokenizedExample, lambda: f64) -> f64 {
    let enc = model.encode(&ex.bundle).unwrap();
    let mut prefix = vec![BOS];
    let mut nll = 0.0;
    let mut aux = 0.0;
    let mut n_labelled = 0usize;
    for (i, &y) in ex.target.iter().enumerate() {
        let step = model.decode_step(&prefix, &enc).unwrap();
        let mut p = 0.0;
        for k in 0..NUM_ASPECTS {
            p += step.gate[k] * step.aspect_probs[k][y as usize];
        }
        nll -= p.ln();
        if let Some(l) = ex.labels[i] {
            aux -= step.gate[l].ln();
            n_labelled += 1;
        }
        prefix.push(y);
    }
    let n = ex.target.len() as f64;
    nll / n + if n_labelled > 0 { lambda * aux / n_labelled as f64 } else { 0.0 }
}

#[test]
fn loss_matches_straight_line_reference() {
    let cfg = ModelConfig::tiny(Architecture::Multihead, VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..5 {
        let model = Model::<f64>::new(cfg.clone(), seed).unwrap();
        let ex = random_example(&mut rng, &cfg, 3);
        for lambda in [0.0, 0.5, 2.0] {
            let got = model.forward_loss(&ex, lambda).unwrap().loss;
            let want = reference_loss(&model, &ex, lambda);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
}

#[test]
fn zero_lambda_is_pure_nll() {
    let cfg = ModelConfig::tiny(Architecture::Multihead, VOCAB);
    let model = Model::<f64>::new(cfg.clone(), 2).unwrap();
    let ex = random_example(&mut ChaCha8Rng::seed_from_u64(2), &cfg, 4);
    let out = model.forward_loss(&ex, 0.0).unwrap();
    assert_eq!(out.loss, out.nll);
    let mean = out.token_nll.iter().sum::<f64>() / out.token_nll.len() as f64;
    assert!((mean - out.nll).abs() < 1e-12);
}

/// Makes every head emit EOS with probability one regardless of input.
fn force_eos(model: &mut Model<f64>) {
    let d = model.config().d_model;
    let names = model.params().names.clone();
    for (name, t) in names.iter().zip(model.params_mut().tensors.iter_mut()) {
        if name == "embed" {
            t.data.iter_mut().for_each(|x| *x = 0.0);
            t.data[EOS as usize * d] = 10.0;
        } else if name.ends_with("ln_out.gain") && !name.starts_with("enc") {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        } else if name.ends_with("ln_out.bias") && !name.starts_with("enc") {
            t.data.iter_mut().for_each(|x| *x = 0.0);
            t.data[0] = 10.0;
        }
    }
}

#[test]
fn zero_loss_construction_is_stationary() {
    for arch in [Architecture::Multihead, Architecture::Baseline] {
        let cfg = ModelConfig::tiny(arch, VOCAB);
        let mut model = Model::<f64>::new(cfg.clone(), 4).unwrap();
        force_eos(&mut model);
        let mut ex = random_example(&mut ChaCha8Rng::seed_from_u64(4), &cfg, 1);
        ex.labels = vec![None];
        let (out, grads) = model.loss_and_grad(&ex, 0.5).unwrap();
        assert!(out.loss.abs() < 1e-12, "{arch}: loss {}", out.loss);
        let norm: f64 = grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "{arch}: gradient norm {norm}");
    }
}

#[test]
fn gate_override_selects_one_head_exactly() {
    let cfg = ModelConfig::tiny(Architecture::Multihead, VOCAB);
    let model = Model::<f32>::new(cfg.clone(), 8).unwrap();
    let ex = random_example(&mut ChaCha8Rng::seed_from_u64(8), &cfg, 3);
    let enc = model.encode(&ex.bundle).unwrap();
    let prefix = [BOS, ex.target[0]];
    for k in 0..NUM_ASPECTS {
        let mut z = vec![0.0; NUM_ASPECTS];
        z[k] = 1.0;
        let step = model.decode_step_with_gate(&prefix, &enc, Some(&z)).unwrap();
        assert_eq!(step.probs, step.aspect_probs[k]);
    }
    let bad = model.decode_step_with_gate(&prefix, &enc, Some(&[0.5, 0.5, 0.5, 0.0]));
    assert_eq!(bad.unwrap_err(), ModelError::BadGate { expected: NUM_ASPECTS });
}

#[test]
fn equal_gate_logits_give_uniform_weights() {
    let cfg = ModelConfig::tiny(Architecture::Multihead, VOCAB);
    let mut model = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let g = model.gate_param().unwrap();
    model.params_mut().tensors[g].data.iter_mut().for_each(|x| *x = 0.0);
    let ex = random_example(&mut ChaCha8Rng::seed_from_u64(3), &cfg, 2);
    let enc = model.encode(&ex.bundle).unwrap();
    let step = model.decode_step(&[BOS], &enc).unwrap();
    assert_eq!(step.gate, vec![0.25; 4]);
}

#[test]
fn two_component_mixture_arithmetic() {
    let a = vec![0.5, 0.5, 0.0];
    let b = vec![0.0, 1.0, 0.0];
    assert_eq!(mix_distributions(&[a, b], &[0.5, 0.5]), vec![0.25, 0.75, 0.0]);
}

#[test]
fn editing_one_aspect_leaves_other_heads_bit_identical() {
    let cfg = ModelConfig::tiny(Architecture::Multihead, VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..20 {
        let model = Model::<f32>::new(cfg.clone(), trial).unwrap();
        let ex = random_example(&mut rng, &cfg, 4);
        let j = Aspect::ALL[rng.random_range(0..NUM_ASPECTS)];
        let texts = (0..ex.bundle.num_docs())
            .map(|_| vec![rng.random_range(NUM_SPECIALS as TokenId..VOCAB as TokenId); 3])
            .collect();
        let edited = ex.bundle.with_aspect(j, texts);
        let (e1, e2) = (model.encode(&ex.bundle).unwrap(), model.encode(&edited).unwrap());
        let mut prefix = vec![BOS];
        for &y in &ex.target {
            let (s1, s2) = (
                model.decode_step(&prefix, &e1).unwrap(),
                model.decode_step(&prefix, &e2).unwrap(),
            );
            for k in (0..NUM_ASPECTS).filter(|&k| k != j.index()) {
                assert_eq!(s1.aspect_probs[k], s2.aspect_probs[k]);
                assert_eq!(s1.aspect_states[k], s2.aspect_states[k]);
            }
            prefix.push(y);
        }
    }
}

#[test]
fn both_architectures_share_the_step_interface() {
    for arch in [Architecture::Baseline, Architecture::Multihead] {
        let cfg = ModelConfig::tiny(arch, VOCAB);
        let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
        let ex = random_example(&mut ChaCha8Rng::seed_from_u64(1), &cfg, 2);
        let enc = model.encode(&ex.bundle).unwrap();
        let step = model.decode_step(&[BOS], &enc).unwrap();
        assert_eq!(step.probs.len(), VOCAB);
        assert!((step.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let cfg = ModelConfig::tiny(Architecture::Multihead, VOCAB);
    let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let empty = AspectBundle::new(vec![Default::default()], vec!["x".into()], 8);
    assert_eq!(model.encode(&empty).unwrap_err(), ModelError::EmptyBundle);

    let ex = random_example(&mut ChaCha8Rng::seed_from_u64(1), &cfg, 2);
    let enc = model.encode(&ex.bundle).unwrap();
    let long = vec![BOS; cfg.max_tgt_len + 1];
    assert!(matches!(model.decode_step(&long, &enc), Err(ModelError::TooLong { .. })));
    assert_eq!(model.decode_step(&[EOS], &enc).unwrap_err(), ModelError::MissingBos);

    let mut bad = ex.clone();
    bad.labels[0] = Some(7);
    assert_eq!(model.forward_loss(&bad, 0.5).unwrap_err(), ModelError::UnknownAspectLabel(7));

    let odd = ModelConfig {
        n_heads: 3,
        ..cfg.clone()
    };
    assert!(matches!(Model::<f32>::new(odd, 0), Err(ModelError::Config(_))));
    let shallow = ModelConfig {
        n_dec_layers: 1,
        ..cfg
    };
    assert!(matches!(Model::<f32>::new(shallow, 0), Err(ModelError::Config(_))));
}

#[test]
fn aspect_groups_have_equal_size() {
    let model = Model::<f32>::new(ModelConfig::new(Architecture::Multihead, 100), 0).unwrap();
    let groups = model.aspect_param_groups();
    assert_eq!(groups.len(), NUM_ASPECTS);
    let count = |g: &Vec<usize>| g.iter().map(|&i| model.params().tensors[i].len()).sum::<usize>();
    assert!(groups.iter().all(|g| count(g) == count(&groups[0])));
    let g = model.gate_param().unwrap();
    assert_eq!(model.params().tensors[g].shape(), (64, 1));
    let base = Model::<f32>::new(ModelConfig::new(Architecture::Baseline, 100), 0).unwrap();
    assert!(base.gate_param().is_none());
}
