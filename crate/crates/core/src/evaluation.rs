//! ROUGE-L and directionality scoring.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::AspectBundle;
use crate::decoding::{decode, DecodeConfig, DecodeError, Session};
use crate::direction::DirectionLabel;
use crate::model::Model;
use crate::synth::SynthExample;
use crate::tokenizer::{content_words, split, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: PartialEq>(hyp: &[T], reference: &[T]) -> RougeScore {
    if hyp.is_empty() || reference.is_empty() {
        return RougeScore {
            precision: 0.0,
            recall: 0.0,
            f: 0.0,
        };
    }
    let l = lcs_len(hyp, reference) as f64;
    let precision = l / hyp.len() as f64;
    let recall = l / reference.len() as f64;
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    RougeScore {
        precision,
        recall,
        f,
    }
}

/// Sentence-level ROUGE-L over lowercased word tokens; tag tokens are ignored.
pub fn rouge_l(hypothesis: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&content_words(hypothesis), &content_words(reference))
}

pub trait DirectionClassifier: Sync {
    fn classify(&self, text: &str) -> DirectionLabel;
}

const SIGNIFICANT: &[&str] = &[
    "significantly reduced",
    "significantly reduces",
    "significantly lower",
    "significantly improved",
    "significant reduction",
    "significant improvement",
    "significant benefit",
    "is effective",
    "was effective",
    "effective",
    "may reduce",
    "reduced",
    "reduces",
    "reduce",
    "reducing",
    "improved",
    "improves",
    "improve",
    "beneficial",
    "benefit",
    "lowered",
    "superior",
];

const NOT_SIGNIFICANT: &[&str] = &[
    "no significant difference",
    "no significant effect",
    "no significant",
    "not significant",
    "not significantly",
    "little or no difference",
    "little effect",
    "no difference",
    "no benefit",
    "no effect",
    "not effective",
    "insufficient evidence",
    "not enough evidence",
    "uncertain",
    "inconclusive",
    "unclear",
    "did not",
    "does not",
    "failed to",
    "similar",
    "underpowered",
    "low certainty",
    "imprecise",
    "could not determine",
    "are needed",
];

const NEGATORS: &[&str] = &["not", "no", "without", "failed", "neither", "nor", "never"];
const NEGATION_WINDOW: usize = 3;
const CLAUSE_BREAKS: &[&str] = &[".", ",", ";", ":"];

/// Cue-phrase classifier.
///
/// Scans left to right, taking the longest cue at each position. A
/// significance cue preceded within three words (same clause) by a negator
/// counts as not significant. The majority label wins; ties and texts
/// without cues are not significant.
#[derive(Debug, Clone)]
pub struct RuleClassifier {
    cues: Vec<(Vec<String>, DirectionLabel)>,
}

impl Default for RuleClassifier {
    fn default() -> Self {
        let mut cues: Vec<(Vec<String>, DirectionLabel)> = SIGNIFICANT
            .iter()
            .map(|c| (split(c), DirectionLabel::Significant))
            .chain(NOT_SIGNIFICANT.iter().map(|c| (split(c), DirectionLabel::NotSignificant)))
            .collect();
        cues.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        Self { cues }
    }
}

/// A cue occurrence: token offset, length and resulting label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CueMatch {
    pub start: usize,
    pub len: usize,
    pub label: DirectionLabel,
    pub negated: bool,
}

impl RuleClassifier {
    pub fn matches(&self, text: &str) -> Vec<CueMatch> {
        let words = content_words(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let hit = self.cues.iter().find(|(cue, _)| {
                words.len() - i >= cue.len() && words[i..i + cue.len()] == cue[..]
            });
            match hit {
                Some((cue, label)) => {
                    let negated = *label == DirectionLabel::Significant && negated_at(&words, i);
                    out.push(CueMatch {
                        start: i,
                        len: cue.len(),
                        label: if negated {
                            DirectionLabel::NotSignificant
                        } else {
                            *label
                        },
                        negated,
                    });
                    i += cue.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

fn negated_at(words: &[String], i: usize) -> bool {
    for w in words[..i].iter().rev().take(NEGATION_WINDOW) {
        if CLAUSE_BREAKS.contains(&w.as_str()) {
            return false;
        }
        if NEGATORS.contains(&w.as_str()) {
            return true;
        }
    }
    false
}

impl DirectionClassifier for RuleClassifier {
    fn classify(&self, text: &str) -> DirectionLabel {
        let m = self.matches(text);
        if m.is_empty() {
            log::debug!("no direction cue in {text:?}; defaulting to not_significant");
            return DirectionLabel::NotSignificant;
        }
        let sig = m.iter().filter(|c| c.label == DirectionLabel::Significant).count();
        if 2 * sig > m.len() {
            DirectionLabel::Significant
        } else {
            DirectionLabel::NotSignificant
        }
    }
}

pub fn classify_direction(text: &str) -> DirectionLabel {
    RuleClassifier::default().classify(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Vocab(#[from] crate::tokenizer::TokenizerError),
}

/// Binary scores with `significant` as the positive class. With no
/// positive predictions, precision is 1 when there were also no missed
/// positives (and 0 otherwise); recall is treated the same way.
pub fn binary_scores(pred: &[DirectionLabel], gold: &[DirectionLabel]) -> Result<BinaryScores, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            hyps: pred.len(),
            refs: gold.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        match (p, g) {
            (DirectionLabel::Significant, DirectionLabel::Significant) => tp += 1,
            (DirectionLabel::Significant, DirectionLabel::NotSignificant) => fp += 1,
            (DirectionLabel::NotSignificant, DirectionLabel::Significant) => fn_ += 1,
            (DirectionLabel::NotSignificant, DirectionLabel::NotSignificant) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize, other_err: usize| {
        if den > 0 {
            num as f64 / den as f64
        } else if other_err == 0 {
            1.0
        } else {
            0.0
        }
    };
    let precision = ratio(tp, tp + fp, fn_);
    let recall = ratio(tp, tp + fn_, fp);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BinaryScores {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
    })
}

pub fn directionality_f1_with(
    classifier: &dyn DirectionClassifier,
    hypotheses: &[String],
    references: &[String],
) -> Result<BinaryScores, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    let pred: Vec<_> = hypotheses.iter().map(|h| classifier.classify(h)).collect();
    let gold: Vec<_> = references.iter().map(|r| classifier.classify(r)).collect();
    binary_scores(&pred, &gold)
}

pub fn directionality_f1(hypotheses: &[String], references: &[String]) -> Result<BinaryScores, EvalError> {
    directionality_f1_with(&RuleClassifier::default(), hypotheses, references)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_examples: usize,
    pub rouge_l: RougeScore,
    pub directionality: BinaryScores,
    pub hypotheses: Vec<String>,
}

impl EvalReport {
    /// Aligned-column table; scores in percent.
    pub fn table(&self) -> String {
        let pct = |x: f64| format!("{:.1}", 100.0 * x);
        let header = [
            "Split", "N", "ROUGE-L P", "ROUGE-L R", "ROUGE-L F", "Dir P", "Dir R", "Dir F1",
        ];
        let row = [
            self.split.clone(),
            self.n_examples.to_string(),
            pct(self.rouge_l.precision),
            pct(self.rouge_l.recall),
            pct(self.rouge_l.f),
            pct(self.directionality.precision),
            pct(self.directionality.recall),
            pct(self.directionality.f1),
        ];
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let mut out = String::new();
        for (i, cells) in [header.map(String::from).to_vec(), row.to_vec()].iter().enumerate() {
            let line: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  "));
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }
}

/// Decodes every example, then reports macro-averaged ROUGE-L and
/// corpus-level directionality scores.
pub fn evaluate_split(
    model: &Model<f32>,
    vocab: &Vocabulary,
    examples: &[SynthExample],
    cfg: &DecodeConfig,
    split: &str,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let max_src = model.config().max_src_len;
    let hypotheses = examples
        .par_iter()
        .map(|ex| -> Result<String, EvalError> {
            let bundle = AspectBundle::from_records(&ex.record_refs(), vocab, max_src);
            let session = Session::new(model, &bundle).map_err(DecodeError::from)?;
            let out = decode(&session, cfg)?;
            Ok(vocab.decode_plain(&out.tokens)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let references: Vec<String> = examples.iter().map(|e| e.target.clone()).collect();
    let n = examples.len() as f64;
    let mut acc = [0.0; 3];
    for (h, r) in hypotheses.iter().zip(&references) {
        let s = rouge_l(h, r);
        acc[0] += s.precision;
        acc[1] += s.recall;
        acc[2] += s.f;
    }
    Ok(EvalReport {
        split: split.to_string(),
        n_examples: examples.len(),
        rouge_l: RougeScore {
            precision: acc[0] / n,
            recall: acc[1] / n,
            f: acc[2] / n,
        },
        directionality: directionality_f1(&hypotheses, &references)?,
        hypotheses,
    })
}
