use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, TokenizedExample};
use crate::aspect::{Aspect, NUM_ASPECTS};
use crate::bundle::AspectBundle;
use crate::tokenizer::{TokenId, EOS, NUM_SPECIALS};

pub const STEP: f64 = 1e-5;
/// Relative errors are taken against `max(|analytic|, |numeric|, FLOOR)`.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub grad_norm: f64,
    pub coordinates: Vec<Coordinate>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Coordinate> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares analytic gradients with central differences on `samples`
/// randomly drawn coordinates plus every coordinate of the gate vector.
pub fn gradient_check(
    model: &Model<f64>,
    ex: &TokenizedExample,
    lambda: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let (_, grads) = model.loss_and_grad(ex, lambda)?;
    let grad_norm = grads
        .iter()
        .flat_map(|g| &g.data)
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();

    let sizes: Vec<usize> = model.params().tensors.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(usize, usize)> = sample(&mut rng, total, samples.min(total))
        .into_iter()
        .map(|flat| locate(&sizes, flat))
        .collect();
    if let Some(g) = model.gate_param() {
        let missing: Vec<_> = (0..sizes[g]).map(|i| (g, i)).filter(|c| !coords.contains(c)).collect();
        coords.extend(missing);
    }

    let mut probe = model.clone();
    let mut coordinates = Vec::with_capacity(coords.len());
    for (t, i) in coords {
        let orig = probe.params().tensors[t].data[i];
        probe.params_mut().tensors[t].data[i] = orig + STEP;
        let up = probe.forward_loss(ex, lambda)?.loss;
        probe.params_mut().tensors[t].data[i] = orig - STEP;
        let down = probe.forward_loss(ex, lambda)?.loss;
        probe.params_mut().tensors[t].data[i] = orig;

        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads[t].data[i];
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        coordinates.push(Coordinate {
            tensor: model.params().names[t].clone(),
            index: i,
            analytic,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        grad_norm,
        coordinates,
    })
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (t, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (t, flat);
        }
        flat -= n;
    }
    unreachable!("flat index beyond parameter count")
}

/// Random non-special input and target of `target_len` tokens (EOS last),
/// with about 70% of content tokens carrying an aspect label.
pub fn random_example(cfg: &ModelConfig, target_len: usize, seed: u64) -> TokenizedExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = NUM_SPECIALS as TokenId..cfg.vocab_size as TokenId;
    let n_docs = rng.random_range(1..=3);
    let docs = (0..n_docs)
        .map(|_| {
            std::array::from_fn(|_| {
                let len = rng.random_range(0..=4);
                (0..len).map(|_| rng.random_range(content.clone())).collect()
            })
        })
        .collect::<Vec<_>>();
    let mut bundle = AspectBundle::new(docs, (0..n_docs).map(|i| format!("t{i}")).collect(), cfg.max_src_len);
    if bundle.is_empty() {
        bundle = bundle.with_aspect(Aspect::Punchline, vec![vec![NUM_SPECIALS as TokenId]; n_docs]);
    }
    let len = target_len.max(1);
    let mut target: Vec<TokenId> = (0..len - 1).map(|_| rng.random_range(content.clone())).collect();
    target.push(EOS);
    let labels = (0..len)
        .map(|i| (i + 1 < len && rng.random_bool(0.7)).then(|| rng.random_range(0..NUM_ASPECTS)))
        .collect();
    TokenizedExample { bundle, target, labels }
}
