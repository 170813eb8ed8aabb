use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::Mat;
use super::{Architecture, Model, ModelError, TokenizedExample};
use crate::aspect::NUM_ASPECTS;
use crate::bundle::AspectBundle;
use crate::tokenizer::{tag_aspect, TokenId, Vocabulary, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Stop after the first epoch whose mean loss falls below this.
    pub target_loss: Option<f64>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            epochs: 3,
            learning_rate: 3e-5,
            lambda: 0.5,
            seed: 0,
            target_loss: None,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Settings for from-scratch training of the toy model.
    pub fn toy() -> Self {
        Self {
            batch_size: 4,
            epochs: 400,
            learning_rate: 1e-3,
            target_loss: Some(0.05),
            clip_norm: Some(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda >= 0.0) {
            return Err(TrainError::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became non-finite at step {step} (epoch {epoch})")]
    Diverged { step: usize, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Turns a tagged target into token ids and per-token aspect labels.
///
/// The multihead model drops tag tokens from the target and labels every
/// token inside a span with the span's aspect; the baseline keeps tags as
/// ordinary tokens. EOS is appended and never labelled.
pub fn encode_target(
    vocab: &Vocabulary,
    text: &str,
    arch: Architecture,
) -> Result<(Vec<TokenId>, Vec<Option<usize>>), ModelError> {
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut open: Option<usize> = None;
    for id in vocab.encode(text) {
        match tag_aspect(id) {
            Some((aspect, is_open)) => {
                let k = aspect.index();
                if is_open {
                    open = Some(k);
                } else if open == Some(k) {
                    open = None;
                } else {
                    return Err(ModelError::UnknownAspectLabel(k));
                }
                if arch == Architecture::Baseline {
                    tokens.push(id);
                    labels.push(None);
                }
            }
            None => {
                tokens.push(id);
                labels.push(if arch == Architecture::Multihead { open } else { None });
            }
        }
    }
    tokens.push(EOS);
    labels.push(None);
    debug_assert!(labels.iter().flatten().all(|&l| l < NUM_ASPECTS));
    Ok((tokens, labels))
}

pub fn make_example(
    vocab: &Vocabulary,
    bundle: AspectBundle,
    target: &str,
    arch: Architecture,
) -> Result<TokenizedExample, ModelError> {
    let (target, labels) = encode_target(vocab, target, arch)?;
    Ok(TokenizedExample {
        bundle,
        target,
        labels,
    })
}

struct Adam {
    m: Vec<Mat<f32>>,
    v: Vec<Mat<f32>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Mat<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Mat<f32>], grads: &[Mat<f32>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let (b1, b2) = (Self::B1 as f32, Self::B2 as f32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (Self::EPS * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= step * m.data[i] / (v.data[i].sqrt() + eps);
            }
        }
    }
}

/// Minibatch Adam on the mean example loss.
///
/// `on_epoch` sees the epoch index and its mean loss.
pub fn train(
    model: &mut Model<f32>,
    data: &[TokenizedExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params().tensors);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        steps: 0,
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let m = &*model;
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| m.loss_and_grad(&data[i], cfg.lambda))
                .collect();
            let mut grads: Option<Vec<Mat<f32>>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (out, g) = r?;
                batch_loss += out.loss;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            report.steps += 1;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged {
                    step: report.steps,
                    epoch,
                });
            }
            total += batch_loss;
            let mut grads = grads.expect("non-empty batch");
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(max) = cfg.clip_norm {
                let norm = grads
                    .iter()
                    .flat_map(|g| &g.data)
                    .map(|&x| (x as f64 * scale).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    scale *= max / norm;
                }
            }
            for g in &mut grads {
                g.data.iter_mut().for_each(|x| *x *= scale as f32);
            }
            adam.step(&mut model.params_mut().tensors, &grads, cfg.learning_rate);
        }
        let mean = total / data.len() as f64;
        report.epoch_losses.push(mean);
        log::info!("epoch {epoch}: mean loss {mean:.5}");
        on_epoch(epoch, mean);
        if cfg.target_loss.is_some_and(|t| mean < t) {
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["<population> adults </population> <punchline> it reduced pain </punchline>"])
            .unwrap()
    }

    #[test]
    fn multihead_targets_drop_tags_and_carry_labels() {
        let v = vocab();
        let text = "<population> adults </population> <punchline> it reduced pain </punchline>";
        let (tokens, labels) = encode_target(&v, text, Architecture::Multihead).unwrap();
        assert_eq!(v.decode(&tokens).unwrap(), "adults it reduced pain <eos>");
        assert_eq!(labels, vec![Some(0), Some(3), Some(3), Some(3), None]);
        let (tokens, labels) = encode_target(&v, text, Architecture::Baseline).unwrap();
        assert_eq!(tokens.len(), 9);
        assert!(labels.iter().all(Option::is_none));
    }

    #[test]
    fn unbalanced_tags_are_rejected() {
        let v = vocab();
        let err = encode_target(&v, "adults </population>", Architecture::Multihead).unwrap_err();
        assert_eq!(err, ModelError::UnknownAspectLabel(0));
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let cfg = TrainConfig {
            lambda: -0.1,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let v = vocab();
        let arch = Architecture::Multihead;
        let bundle = AspectBundle::new(
            vec![[v.encode("adults"), vec![], vec![], v.encode("it reduced pain")]],
            vec!["t".into()],
            16,
        );
        let ex = make_example(&v, bundle, "<punchline> it reduced pain </punchline>", arch).unwrap();
        let data = vec![ex.clone(), ex];
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 1e-2,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::<f32>::new(ModelConfig::tiny(arch, v.len()), 1).unwrap();
            let r = train(&mut m, &data, &cfg, |_, _| {}).unwrap();
            (r, m.params().clone())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0]);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut m = Model::<f32>::new(ModelConfig::tiny(Architecture::Baseline, 20), 0).unwrap();
        let err = train(&mut m, &[], &TrainConfig::default(), |_, _| {}).unwrap_err();
        assert_eq!(err, TrainError::EmptyDataset);
    }
}
