//! Deterministic synthetic trials and reference summaries.
//!
//! Each topic pairs one condition, intervention and outcome with an effect
//! direction. Its trials get punchlines that entail the direction; its
//! reference summary is a tagged sentence whose connective words form the
//! punchline spans and whose population, intervention and outcome slots are
//! the topic's canonical phrases.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aspect::Aspect;
use crate::direction::Direction;
use crate::store::{rank_order, StoreError, TrialRecord, TrialStore};

#[derive(Debug, Deserialize)]
struct Banks {
    conditions: Vec<String>,
    groups: Vec<String>,
    qualifiers: Vec<String>,
    settings: Vec<String>,
    interventions: Vec<String>,
    controls: Vec<String>,
    outcomes: Vec<String>,
    outcome_suffixes: Vec<String>,
    punchlines: BTreeMap<Direction, Vec<String>>,
    frames: BTreeMap<Direction, Vec<String>>,
}

fn banks() -> &'static Banks {
    static BANKS: OnceLock<Banks> = OnceLock::new();
    BANKS.get_or_init(|| {
        serde_json::from_str(include_str!("../data/phrase_banks.json")).expect("valid phrase banks")
    })
}

/// Summary frames for one direction, with `{P}`, `{I}`, `{O}` slots.
pub fn frames(direction: Direction) -> &'static [String] {
    &banks().frames[&direction]
}

/// Trial punchline patterns for one direction, with `{I}`, `{O}`, `{C}` slots.
pub fn punchlines(direction: Direction) -> &'static [String] {
    &banks().punchlines[&direction]
}

/// Every population, intervention and outcome phrase the generator can emit.
pub fn slot_phrases() -> Vec<&'static str> {
    let b = banks();
    [&b.conditions, &b.groups, &b.qualifiers, &b.settings, &b.interventions, &b.controls]
        .into_iter()
        .chain([&b.outcomes, &b.outcome_suffixes])
        .flatten()
        .map(String::as_str)
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_topics: usize,
    pub trials_per_topic: usize,
    /// Direction per topic; cycled through a seeded order when absent.
    pub directions: Option<Vec<Direction>>,
}

impl SynthSpec {
    pub fn new(seed: u64, n_topics: usize, trials_per_topic: usize) -> Self {
        Self {
            seed,
            n_topics,
            trials_per_topic,
            directions: None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("n_topics and trials_per_topic must be positive")]
    Empty,
    #[error("{given} directions given for {topics} topics")]
    DirectionCount { given: usize, topics: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthExample {
    pub topic_id: String,
    pub records: Vec<TrialRecord>,
    pub target: String,
    pub direction: Direction,
}

/// One line of the targets file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetLine {
    pub topic_id: String,
    pub trial_ids: Vec<String>,
    pub target: String,
    pub direction: Direction,
}

impl SynthExample {
    pub fn target_line(&self) -> TargetLine {
        TargetLine {
            topic_id: self.topic_id.clone(),
            trial_ids: self.records.iter().map(|r| r.id.clone()).collect(),
            target: self.target.clone(),
            direction: self.direction,
        }
    }

    pub fn record_refs(&self) -> Vec<&TrialRecord> {
        self.records.iter().collect()
    }
}

struct Topic {
    condition: &'static str,
    group: &'static str,
    intervention: &'static str,
    outcome: &'static str,
    direction: Direction,
}

fn fill(pattern: &str, slots: &[(&str, &str)]) -> String {
    let mut out = pattern.to_string();
    for (k, v) in slots {
        out = out.replace(k, v);
    }
    out
}

fn join(parts: &[&str]) -> String {
    parts
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Expands a frame into a tagged summary: slot phrases become aspect spans,
/// runs of frame words become punchline spans.
pub fn tag_frame(frame: &str, population: &str, interventions: &str, outcomes: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut run: Vec<&str> = Vec::new();
    let flush = |run: &mut Vec<&str>, out: &mut Vec<String>| {
        if !run.is_empty() {
            let p = Aspect::Punchline;
            out.push(format!("{} {} {}", p.open_tag(), run.join(" "), p.close_tag()));
            run.clear();
        }
    };
    for word in frame.split_whitespace() {
        let slot = match word {
            "{P}" => Some((Aspect::Population, population)),
            "{I}" => Some((Aspect::Interventions, interventions)),
            "{O}" => Some((Aspect::Outcomes, outcomes)),
            _ => None,
        };
        match slot {
            Some((a, text)) => {
                flush(&mut run, &mut out);
                out.push(format!("{} {} {}", a.open_tag(), text, a.close_tag()));
            }
            None => run.push(word),
        }
    }
    flush(&mut run, &mut out);
    out.join(" ")
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthExample>, SynthError> {
    if spec.n_topics == 0 || spec.trials_per_topic == 0 {
        return Err(SynthError::Empty);
    }
    if let Some(d) = &spec.directions {
        if d.len() != spec.n_topics {
            return Err(SynthError::DirectionCount {
                given: d.len(),
                topics: spec.n_topics,
            });
        }
    }
    let b = banks();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cycle = Direction::ALL;
    cycle.shuffle(&mut rng);
    let mut frame_next: BTreeMap<Direction, usize> = Direction::ALL
        .iter()
        .map(|&d| (d, rng.random_range(0..frames(d).len())))
        .collect();

    let mut out = Vec::with_capacity(spec.n_topics);
    for t in 0..spec.n_topics {
        let direction = match &spec.directions {
            Some(d) => d[t],
            None => cycle[t % cycle.len()],
        };
        let slot = frame_next.get_mut(&direction).expect("all directions present");
        let fs = frames(direction);
        let frame = fs[*slot % fs.len()].as_str();
        *slot += 1;
        let topic = Topic {
            condition: b.conditions.choose(&mut rng).expect("non-empty bank"),
            group: b.groups.choose(&mut rng).expect("non-empty bank"),
            intervention: b.interventions.choose(&mut rng).expect("non-empty bank"),
            outcome: b.outcomes.choose(&mut rng).expect("non-empty bank"),
            direction,
        };
        let topic_id = format!("syn{}-{t:03}", spec.seed);
        let mut records: Vec<TrialRecord> = (0..spec.trials_per_topic)
            .map(|i| make_record(&mut rng, &topic, format!("{topic_id}-{i}")))
            .collect();
        records.sort_by(rank_order);
        let population = format!("{} with {}", topic.group, topic.condition);
        let target = tag_frame(frame, &population, topic.intervention, topic.outcome);
        out.push(SynthExample {
            topic_id,
            records,
            target,
            direction,
        });
    }
    Ok(out)
}

fn make_record(rng: &mut ChaCha8Rng, topic: &Topic, id: String) -> TrialRecord {
    let b = banks();
    let pick = |rng: &mut ChaCha8Rng, bank: &'static [String]| -> &'static str {
        bank.choose(rng).expect("non-empty bank")
    };
    let control = pick(rng, &b.controls);
    let qualifier = pick(rng, &b.qualifiers);
    let setting = pick(rng, &b.settings);
    let suffix = pick(rng, &b.outcome_suffixes);
    let punch = pick(rng, punchlines(topic.direction));
    let arms = rng.random_range(0..3);
    let sample_size = rng.random_range(20..=2000u64);
    let rob = f64::from(rng.random_range(1..=12u8)) * 0.25;

    let slots = [("{I}", topic.intervention), ("{O}", topic.outcome), ("{C}", control)];
    let punchline = fill(punch, &slots);
    let interventions = match arms {
        0 => topic.intervention.to_string(),
        1 => format!("{} versus {control}", topic.intervention),
        _ => format!("{} compared with {control}", topic.intervention),
    };
    TrialRecord {
        id,
        title: format!(
            "{} for {} : a randomized controlled trial",
            topic.intervention, topic.condition
        ),
        abstract_text: format!(
            "we randomized {sample_size} {} with {} to {} or {control} . {punchline}",
            topic.group, topic.condition, topic.intervention
        ),
        population: join(&[qualifier, topic.group, "with", topic.condition, setting]),
        interventions,
        outcomes: join(&[topic.outcome, suffix]),
        punchline,
        p_mesh: vec![topic.condition.to_string(), topic.group.to_string()],
        i_mesh: vec![topic.intervention.to_string()],
        o_mesh: vec![topic.outcome.to_string()],
        sample_size,
        rob,
    }
}

/// All texts of a corpus, for building a vocabulary.
pub fn corpus_texts(examples: &[SynthExample]) -> Vec<String> {
    let mut texts = Vec::new();
    for ex in examples {
        for r in &ex.records {
            texts.extend([
                r.title.clone(),
                r.abstract_text.clone(),
                r.population.clone(),
                r.interventions.clone(),
                r.outcomes.clone(),
                r.punchline.clone(),
            ]);
        }
        texts.push(ex.target.clone());
    }
    texts
}

pub fn trials_jsonl(examples: &[SynthExample]) -> String {
    let mut s = String::new();
    for r in examples.iter().flat_map(|e| &e.records) {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn targets_jsonl(examples: &[SynthExample]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(&e.target_line()).expect("targets serialize"));
        s.push('\n');
    }
    s
}

/// Writes `trials.jsonl` and `targets.jsonl` into `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, examples: &[SynthExample]) -> std::io::Result<()> {
    let dir: std::path::PathBuf = dir.as_ref().components().collect();
    std::fs::create_dir_all(&dir)?;
    std::fs::File::create(dir.join("trials.jsonl"))?.write_all(trials_jsonl(examples).as_bytes())?;
    std::fs::File::create(dir.join("targets.jsonl"))?.write_all(targets_jsonl(examples).as_bytes())?;
    Ok(())
}

pub fn parse_targets(text: &str) -> Result<Vec<TargetLine>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("trials: {0}")]
    Store(#[from] StoreError),
    #[error("targets line {line}: {source}")]
    Target { line: usize, source: serde_json::Error },
    #[error("topic {topic} refers to unknown trial {id}")]
    UnknownTrial { topic: String, id: String },
}

/// Reads a corpus written by [`write_corpus`] back into examples.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Vec<SynthExample>, CorpusError> {
    let dir = dir.as_ref();
    let (store, _) = TrialStore::ingest(dir.join("trials.jsonl"))?;
    let path = dir.join("targets.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let t: TargetLine = serde_json::from_str(line).map_err(|source| CorpusError::Target { line: i + 1, source })?;
        let records = t
            .trial_ids
            .iter()
            .map(|id| {
                store.get(id).cloned().ok_or_else(|| CorpusError::UnknownTrial {
                    topic: t.topic_id.clone(),
                    id: id.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        out.push(SynthExample {
            topic_id: t.topic_id,
            records,
            target: t.target,
            direction: t.direction,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_expand_into_tagged_spans() {
        let t = tag_frame("{I} may reduce {O} in {P} .", "adults with gout", "colchicine", "pain scores");
        assert_eq!(
            t,
            "<interventions> colchicine </interventions> <punchline> may reduce </punchline> \
             <outcomes> pain scores </outcomes> <punchline> in </punchline> \
             <population> adults with gout </population> <punchline> . </punchline>"
        );
    }

    #[test]
    fn one_topic_has_the_requested_trials() {
        let ex = generate(&SynthSpec::new(0, 1, 5)).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].records.len(), 5);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert_eq!(generate(&SynthSpec::new(0, 0, 5)), Err(SynthError::Empty));
        let spec = SynthSpec {
            directions: Some(vec![Direction::Effective]),
            ..SynthSpec::new(0, 2, 1)
        };
        assert!(matches!(generate(&spec), Err(SynthError::DirectionCount { .. })));
    }
}
