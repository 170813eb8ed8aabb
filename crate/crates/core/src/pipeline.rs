//! Glue between the synthetic corpus, the vocabulary and the model.

use crate::bundle::AspectBundle;
use crate::model::train::make_example;
use crate::model::{Architecture, ModelConfig, ModelError, TokenizedExample};
use crate::synth::{corpus_texts, SynthExample};
use crate::templates::{Segment, TemplateCatalog};
use crate::tokenizer::{TokenizerError, Vocabulary};

/// Vocabulary over every corpus text plus the template literals.
pub fn build_vocabulary(examples: &[SynthExample], templates: &TemplateCatalog) -> Result<Vocabulary, TokenizerError> {
    let mut texts = corpus_texts(examples);
    for t in templates.list() {
        for s in &t.segments {
            if let Segment::Literal { text } = s {
                texts.push(text.clone());
            }
        }
    }
    Vocabulary::build(&texts)
}

pub fn bundle_for(example: &SynthExample, vocab: &Vocabulary, max_src_len: usize) -> AspectBundle {
    AspectBundle::from_records(&example.record_refs(), vocab, max_src_len)
}

pub fn tokenize_examples(
    examples: &[SynthExample],
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<Vec<TokenizedExample>, ModelError> {
    examples
        .iter()
        .map(|e| {
            make_example(
                vocab,
                bundle_for(e, vocab, config.max_src_len),
                &e.target,
                config.architecture,
            )
        })
        .collect()
}

/// Model shape used for from-scratch training on the synthetic corpus.
pub fn toy_config(architecture: Architecture, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        max_src_len: 96,
        ..ModelConfig::new(architecture, vocab_size)
    }
}
