//! Token-level provenance from mixture weights.

use serde::{Deserialize, Serialize};

use crate::aspect::{Aspect, NUM_ASPECTS};
use crate::decoding::argmax;
use crate::model::StepOutput;
use crate::store::TrialRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub z: Vec<f64>,
    pub aspect: Aspect,
    pub entropy: f64,
}

/// Mixture weights per output token; empty entries mean the step had no
/// gate (baseline model).
pub fn mixture_trace(trace: &[StepOutput]) -> Vec<Option<MixtureEntry>> {
    trace
        .iter()
        .map(|s| {
            if s.gate.len() != NUM_ASPECTS {
                return None;
            }
            let entropy = -s.gate.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            Some(MixtureEntry {
                z: s.gate.clone(),
                aspect: Aspect::ALL[argmax(&s.gate)],
                entropy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLabel {
    pub text: String,
    pub aspect: Option<Aspect>,
    pub confidence: Option<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ProvenanceError {
    #[error("trace has {trace} steps for {tokens} tokens")]
    LengthMismatch { trace: usize, tokens: usize },
    #[error("token index {index} out of range for {len} tokens")]
    OutOfRange { index: usize, len: usize },
}

/// Labels each token with its most influential aspect and that aspect's
/// mixture weight. Baseline steps get no label.
pub fn trace_summary(trace: &[StepOutput], tokens: &[String]) -> Result<Vec<TokenLabel>, ProvenanceError> {
    if trace.len() != tokens.len() {
        return Err(ProvenanceError::LengthMismatch {
            trace: trace.len(),
            tokens: tokens.len(),
        });
    }
    Ok(mixture_trace(trace)
        .into_iter()
        .zip(tokens)
        .map(|(m, text)| TokenLabel {
            text: text.clone(),
            aspect: m.as_ref().map(|m| m.aspect),
            confidence: m.map(|m| m.z[m.aspect.index()]),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub trial_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceView {
    pub token: String,
    pub aspect: Option<Aspect>,
    pub confidence: Option<f64>,
    pub literal: bool,
    pub snippets: Vec<Snippet>,
    /// Why no snippets are shown, when there are none.
    pub note: Option<String>,
}

pub const NO_PROVENANCE: &str = "no provenance available for this model";
pub const LITERAL_TOKEN: &str = "template text; not generated";

/// The labelled aspect's text from every input record, in input order.
/// `literal` marks template text, which has no snippets.
pub fn snippets_for_token(
    index: usize,
    labels: &[TokenLabel],
    literal: &[bool],
    records: &[TrialRecord],
) -> Result<ProvenanceView, ProvenanceError> {
    let label = labels.get(index).ok_or(ProvenanceError::OutOfRange {
        index,
        len: labels.len(),
    })?;
    let is_literal = literal.get(index).copied().unwrap_or(false);
    let (snippets, note) = match label.aspect {
        _ if is_literal => (Vec::new(), Some(LITERAL_TOKEN.to_string())),
        None => (Vec::new(), Some(NO_PROVENANCE.to_string())),
        Some(a) => (
            records
                .iter()
                .map(|r| Snippet {
                    trial_id: r.id.clone(),
                    text: r.aspect_text(a).to_string(),
                })
                .collect(),
            None,
        ),
    };
    Ok(ProvenanceView {
        token: label.text.clone(),
        aspect: label.aspect,
        confidence: label.confidence,
        literal: is_literal,
        snippets,
        note,
    })
}
