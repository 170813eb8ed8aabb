//! Direction templates and head-forced in-filling.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aspect::Aspect;
use crate::bundle::AspectBundle;
use crate::decoding::argmax;
use crate::direction::Direction;
use crate::model::{Architecture, Model, ModelError, StepOutput};
use crate::tokenizer::{split, TokenId, Vocabulary, BOS, NUM_SPECIALS, UNK};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Segment {
    Literal { text: String },
    Blank { aspect: Aspect },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub direction: Direction,
    pub segments: Vec<Segment>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template file: {0}")]
    Io(String),
    #[error("template file is not a JSON array of templates: {0}")]
    Format(String),
    #[error("template {template:?}: {reason}")]
    Template { template: String, reason: String },
    #[error("template {template:?}, segment {segment}: {reason}")]
    Segment {
        template: String,
        segment: usize,
        reason: String,
    },
    #[error("duplicate template id {0:?}")]
    Duplicate(String),
}

impl Template {
    pub fn validate(&self) -> Result<(), TemplateError> {
        let blanks: Vec<(usize, Aspect)> = self
            .segments
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Segment::Blank { aspect } => Some((i, *aspect)),
                Segment::Literal { .. } => None,
            })
            .collect();
        if blanks.is_empty() {
            return Err(TemplateError::Template {
                template: self.id.clone(),
                reason: "needs at least one blank".into(),
            });
        }
        for w in self.segments.windows(2).enumerate() {
            if let (i, [Segment::Blank { aspect: a }, Segment::Blank { aspect: b }]) = w {
                if a == b {
                    return Err(TemplateError::Segment {
                        template: self.id.clone(),
                        segment: i + 1,
                        reason: format!("adjacent blanks share aspect {a}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn blanks(&self) -> impl Iterator<Item = Aspect> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Blank { aspect } => Some(*aspect),
            Segment::Literal { .. } => None,
        })
    }

    /// Literal words in order, normalized.
    pub fn literal_words(&self) -> Vec<String> {
        self.segments
            .iter()
            .flat_map(|s| match s {
                Segment::Literal { text } => split(text),
                Segment::Blank { .. } => Vec::new(),
            })
            .collect()
    }
}

fn segment_from_value(template: &str, index: usize, v: &Value) -> Result<Segment, TemplateError> {
    let err = |reason: String| TemplateError::Segment {
        template: template.to_string(),
        segment: index,
        reason,
    };
    let obj = v.as_object().ok_or_else(|| err("segment must be an object".into()))?;
    match obj.get("kind").and_then(Value::as_str) {
        Some("literal") => {
            let text = obj
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| err("literal needs a string `text`".into()))?;
            if obj.len() != 2 {
                return Err(err("literal takes only `kind` and `text`".into()));
            }
            Ok(Segment::Literal { text: text.into() })
        }
        Some("blank") => {
            let aspect = obj
                .get("aspect")
                .and_then(Value::as_str)
                .ok_or_else(|| err("blank needs a string `aspect`".into()))?;
            if obj.len() != 2 {
                return Err(err("blank takes only `kind` and `aspect`".into()));
            }
            let aspect = aspect.parse::<Aspect>().map_err(|e| err(e.to_string()))?;
            Ok(Segment::Blank { aspect })
        }
        Some(other) => Err(err(format!("unknown segment kind {other:?}"))),
        None => Err(err("segment needs a string `kind`".into())),
    }
}

/// Parses a JSON array of templates, reporting the first invalid segment.
pub fn parse_templates(json: &str) -> Result<Vec<Template>, TemplateError> {
    let raw: Vec<Value> = serde_json::from_str(json).map_err(|e| TemplateError::Format(e.to_string()))?;
    raw.iter()
        .enumerate()
        .map(|(ti, v)| {
            let obj = v
                .as_object()
                .ok_or_else(|| TemplateError::Format(format!("entry {ti} is not an object")))?;
            let id = obj
                .get("id")
                .and_then(Value::as_str)
                .ok_or_else(|| TemplateError::Format(format!("entry {ti} needs a string `id`")))?
                .to_string();
            let bad = |reason: String| TemplateError::Template {
                template: id.clone(),
                reason,
            };
            let direction = obj
                .get("direction")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("needs a string `direction`".into()))?
                .parse::<Direction>()
                .map_err(bad)?;
            let segments = obj
                .get("segments")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("needs a `segments` array".into()))?
                .iter()
                .enumerate()
                .map(|(si, s)| segment_from_value(&id, si, s))
                .collect::<Result<Vec<_>, _>>()?;
            let t = Template {
                id,
                direction,
                segments,
            };
            t.validate()?;
            Ok(t)
        })
        .collect()
}

/// Built-in templates plus any user-supplied ones, keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateCatalog {
    templates: BTreeMap<String, Template>,
    order: Vec<String>,
}

impl TemplateCatalog {
    pub fn builtin() -> Self {
        let list = parse_templates(include_str!("../data/templates.json")).expect("built-in templates are valid");
        let mut c = Self {
            templates: BTreeMap::new(),
            order: Vec::new(),
        };
        c.extend(list).expect("built-in ids are unique");
        c
    }

    pub fn extend(&mut self, list: Vec<Template>) -> Result<(), TemplateError> {
        for t in list {
            if self.templates.contains_key(&t.id) {
                return Err(TemplateError::Duplicate(t.id));
            }
            self.order.push(t.id.clone());
            self.templates.insert(t.id.clone(), t);
        }
        Ok(())
    }

    pub fn with_file(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io(e.to_string()))?;
        let mut c = Self::builtin();
        c.extend(parse_templates(&text)?)?;
        Ok(c)
    }

    pub fn get(&self, id: &str) -> Option<&Template> {
        self.templates.get(id)
    }

    /// Templates in insertion order (built-ins first).
    pub fn list(&self) -> Vec<&Template> {
        self.order.iter().map(|id| &self.templates[id]).collect()
    }

    pub fn for_direction(&self, d: Direction) -> Option<&Template> {
        self.list().into_iter().find(|t| t.direction == d)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillOptions {
    pub min_blank_len: usize,
    pub blank_cap: usize,
}

impl Default for InfillOptions {
    fn default() -> Self {
        Self {
            min_blank_len: 1,
            blank_cap: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilledSpan {
    pub segment: usize,
    pub aspect: Aspect,
    /// Token range `start..end` in the output.
    pub start: usize,
    pub end: usize,
    pub truncated: bool,
    /// Mixture weights at the step that ended the blank.
    pub stop_gate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillResult {
    pub template_id: String,
    pub direction: Direction,
    pub text: String,
    pub words: Vec<String>,
    pub tokens: Vec<TokenId>,
    pub literal: Vec<bool>,
    pub spans: Vec<FilledSpan>,
    /// One step per output token; literal steps are teacher-forced.
    pub trace: Vec<StepOutput>,
}

impl InfillResult {
    /// Output words outside every filled span.
    pub fn literal_words(&self) -> Vec<String> {
        self.words
            .iter()
            .zip(&self.literal)
            .filter(|(_, &l)| l)
            .map(|(w, _)| w.clone())
            .collect()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum InfillError {
    #[error("template in-filling requires the multihead model, not {0}")]
    Unsupported(Architecture),
    #[error("aspect {0} has no text in the selected trials")]
    EmptyAspect(Aspect),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Replaces the free mixture weights seen by the stop rule. Called with the
/// blank's ordinal and the number of tokens it has emitted so far.
pub type GateHook<'a> = &'a dyn Fn(usize, usize) -> Option<Vec<f64>>;

/// Largest non-special entry of a distribution; ties to the lowest id.
fn content_argmax(probs: &[f64]) -> TokenId {
    (NUM_SPECIALS + argmax(&probs[NUM_SPECIALS..])) as TokenId
}

/// Fills each blank greedily from its aspect's head, stopping once the free
/// mixture weights favour another aspect.
pub fn infill(
    model: &Model<f32>,
    vocab: &Vocabulary,
    template: &Template,
    bundle: &AspectBundle,
    opts: &InfillOptions,
    hook: Option<GateHook<'_>>,
) -> Result<InfillResult, InfillError> {
    if model.architecture() != Architecture::Multihead {
        return Err(InfillError::Unsupported(model.architecture()));
    }
    template.validate()?;
    if let Some(a) = template.blanks().find(|&a| bundle.aspect_is_empty(a)) {
        return Err(InfillError::EmptyAspect(a));
    }
    let enc = model.encode(bundle)?;
    let mut prefix = vec![BOS];
    let mut pending: Option<StepOutput> = None;
    let mut out = InfillResult {
        template_id: template.id.clone(),
        direction: template.direction,
        text: String::new(),
        words: Vec::new(),
        tokens: Vec::new(),
        literal: Vec::new(),
        spans: Vec::new(),
        trace: Vec::new(),
    };
    let mut blank_no = 0;
    for (si, seg) in template.segments.iter().enumerate() {
        match seg {
            Segment::Literal { text } => {
                for word in split(text) {
                    let step = match pending.take() {
                        Some(s) => s,
                        None => model.decode_step(&prefix, &enc)?,
                    };
                    let id = vocab.id(&word).unwrap_or(UNK);
                    out.trace.push(step);
                    out.tokens.push(id);
                    out.words.push(word);
                    out.literal.push(true);
                    prefix.push(id);
                }
            }
            Segment::Blank { aspect } => {
                let a = aspect.index();
                let start = out.tokens.len();
                let mut emitted = 0;
                let (truncated, stop_gate) = loop {
                    let forced = hook.and_then(|h| h(blank_no, emitted));
                    let step = model.decode_step_with_gate(&prefix, &enc, forced.as_deref())?;
                    if emitted >= opts.min_blank_len && argmax(&step.gate) != a {
                        let gate = step.gate.clone();
                        pending = forced.is_none().then_some(step);
                        break (false, gate);
                    }
                    if emitted >= opts.blank_cap {
                        let gate = step.gate.clone();
                        pending = forced.is_none().then_some(step);
                        break (true, gate);
                    }
                    let id = content_argmax(&step.aspect_probs[a]);
                    let word = vocab.token(id).map_err(|_| ModelError::TokenOutOfRange(id))?;
                    out.words.push(word.to_string());
                    out.trace.push(step);
                    out.tokens.push(id);
                    out.literal.push(false);
                    prefix.push(id);
                    emitted += 1;
                };
                out.spans.push(FilledSpan {
                    segment: si,
                    aspect: *aspect,
                    start,
                    end: out.tokens.len(),
                    truncated,
                    stop_gate,
                });
                blank_no += 1;
            }
        }
    }
    out.text = out.words.join(" ");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_cover_each_direction() {
        let c = TemplateCatalog::builtin();
        assert_eq!(c.len(), 3);
        for d in Direction::ALL {
            assert_eq!(c.list().iter().filter(|t| t.direction == d).count(), 1);
        }
    }

    #[test]
    fn malformed_segment_reports_its_index() {
        let json = r#"[{"id":"x","direction":"effective","segments":[
            {"kind":"literal","text":"a"},{"kind":"blank","aspect":"nonsense"}]}]"#;
        match parse_templates(json) {
            Err(TemplateError::Segment { segment, .. }) => assert_eq!(segment, 1),
            other => panic!("unexpected {other:?}"),
        }
        let json = r#"[{"id":"x","direction":"effective","segments":[{"kind":"blank"}]}]"#;
        assert!(matches!(parse_templates(json), Err(TemplateError::Segment { segment: 0, .. })));
    }

    #[test]
    fn structural_rules() {
        let only_literal = r#"[{"id":"x","direction":"no_effect","segments":[{"kind":"literal","text":"a"}]}]"#;
        assert!(matches!(parse_templates(only_literal), Err(TemplateError::Template { .. })));
        let twin = r#"[{"id":"x","direction":"no_effect","segments":[
            {"kind":"blank","aspect":"outcomes"},{"kind":"blank","aspect":"outcomes"}]}]"#;
        assert!(matches!(parse_templates(twin), Err(TemplateError::Segment { segment: 1, .. })));
        let leading = r#"[{"id":"x","direction":"no_effect","segments":[
            {"kind":"blank","aspect":"outcomes"},{"kind":"blank","aspect":"population"}]}]"#;
        assert!(parse_templates(leading).is_ok());
    }

    #[test]
    fn user_templates_extend_the_catalog() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(
            &path,
            r#"[{"id":"mine","direction":"inconclusive","segments":[{"kind":"blank","aspect":"punchline"}]}]"#,
        )
        .unwrap();
        let c = TemplateCatalog::with_file(&path).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.get("mine").is_some());
        std::fs::write(&path, r#"[{"id":"insufficient-evidence","direction":"inconclusive","segments":[{"kind":"blank","aspect":"punchline"}]}]"#).unwrap();
        assert!(matches!(TemplateCatalog::with_file(&path), Err(TemplateError::Duplicate(_))));
    }
}
