use crate::aspect::{Aspect, NUM_ASPECTS};
use crate::store::TrialRecord;
use crate::tokenizer::{close_tag, open_tag, TokenId, Vocabulary, DOC_SEP};

/// Multi-document input split by aspect.
///
/// `sequence(a)` is `<a> doc1 <doc> doc2 ... </a>` for that aspect's text
/// across all documents, in document order. Sequences longer than the
/// limit lose content tokens from the tail; the tag pair always survives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AspectBundle {
    docs: Vec<[Vec<TokenId>; NUM_ASPECTS]>,
    trial_ids: Vec<String>,
    sequences: [Vec<TokenId>; NUM_ASPECTS],
    max_src_len: usize,
}

impl AspectBundle {
    /// `docs[d][a]` holds document `d`'s content tokens for aspect `a`.
    pub fn new(
        docs: Vec<[Vec<TokenId>; NUM_ASPECTS]>,
        trial_ids: Vec<String>,
        max_src_len: usize,
    ) -> Self {
        assert!(max_src_len >= 2, "max_src_len must fit the tag pair");
        let sequences = std::array::from_fn(|k| {
            build_sequence(&docs, Aspect::ALL[k], max_src_len)
        });
        Self {
            docs,
            trial_ids,
            sequences,
            max_src_len,
        }
    }

    pub fn from_records(records: &[&TrialRecord], vocab: &Vocabulary, max_src_len: usize) -> Self {
        let docs = records
            .iter()
            .map(|r| std::array::from_fn(|k| vocab.encode(r.aspect_text(Aspect::ALL[k]))))
            .collect();
        let ids = records.iter().map(|r| r.id.clone()).collect();
        Self::new(docs, ids, max_src_len)
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn trial_ids(&self) -> &[String] {
        &self.trial_ids
    }

    pub fn max_src_len(&self) -> usize {
        self.max_src_len
    }

    pub fn doc_tokens(&self, doc: usize, aspect: Aspect) -> &[TokenId] {
        &self.docs[doc][aspect.index()]
    }

    pub fn sequence(&self, aspect: Aspect) -> &[TokenId] {
        &self.sequences[aspect.index()]
    }

    /// True when no document has text for `aspect`.
    pub fn aspect_is_empty(&self, aspect: Aspect) -> bool {
        self.docs.iter().all(|d| d[aspect.index()].is_empty())
    }

    pub fn is_empty(&self) -> bool {
        Aspect::ALL.iter().all(|&a| self.aspect_is_empty(a))
    }

    /// Returns a copy with aspect `aspect` of every document replaced.
    pub fn with_aspect(&self, aspect: Aspect, texts: Vec<Vec<TokenId>>) -> Self {
        assert_eq!(texts.len(), self.docs.len());
        let mut docs = self.docs.clone();
        for (d, t) in docs.iter_mut().zip(texts) {
            d[aspect.index()] = t;
        }
        Self::new(docs, self.trial_ids.clone(), self.max_src_len)
    }

    /// Single-stream input: each document's tagged aspects followed by a
    /// separator. Whole trailing documents are dropped to fit `limit`; a
    /// lone oversized document has its spans cut evenly.
    pub fn single_stream(&self, limit: usize) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (i, doc) in self.docs.iter().enumerate() {
            let piece = tagged_doc(doc, usize::MAX);
            let sep = usize::from(i > 0);
            if out.len() + sep + piece.len() > limit {
                if i == 0 {
                    let budget = limit.saturating_sub(2 * NUM_ASPECTS) / NUM_ASPECTS;
                    out = tagged_doc(doc, budget);
                }
                break;
            }
            if i > 0 {
                out.push(DOC_SEP);
            }
            out.extend(piece);
        }
        out
    }
}

fn tagged_doc(doc: &[Vec<TokenId>; NUM_ASPECTS], per_aspect: usize) -> Vec<TokenId> {
    let mut out = Vec::new();
    for a in Aspect::ALL {
        out.push(open_tag(a));
        let text = &doc[a.index()];
        out.extend_from_slice(&text[..text.len().min(per_aspect)]);
        out.push(close_tag(a));
    }
    out
}

fn build_sequence(
    docs: &[[Vec<TokenId>; NUM_ASPECTS]],
    aspect: Aspect,
    max_len: usize,
) -> Vec<TokenId> {
    let mut body = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            body.push(DOC_SEP);
        }
        body.extend_from_slice(&d[aspect.index()]);
    }
    if body.len() > max_len - 2 {
        body.truncate(max_len - 2);
        while body.last() == Some(&DOC_SEP) {
            body.pop();
        }
    }
    let mut seq = Vec::with_capacity(body.len() + 2);
    seq.push(open_tag(aspect));
    seq.extend(body);
    seq.push(close_tag(aspect));
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::NUM_SPECIALS;

    fn w(i: u32) -> TokenId {
        NUM_SPECIALS as TokenId + i
    }

    fn docs() -> Vec<[Vec<TokenId>; NUM_ASPECTS]> {
        vec![
            [vec![w(0)], vec![w(1), w(2)], vec![w(3)], vec![w(4)]],
            [vec![w(5)], vec![w(6)], vec![], vec![w(7)]],
        ]
    }

    #[test]
    fn per_aspect_concatenation_keeps_document_order() {
        let b = AspectBundle::new(docs(), vec!["a".into(), "b".into()], 64);
        let p = Aspect::Population;
        assert_eq!(b.sequence(p), &[open_tag(p), w(0), DOC_SEP, w(5), close_tag(p)]);
        let o = Aspect::Outcomes;
        assert_eq!(b.sequence(o), &[open_tag(o), w(3), DOC_SEP, close_tag(o)]);
        assert!(!b.is_empty());
    }

    #[test]
    fn truncation_cuts_tail_and_keeps_tags() {
        let b = AspectBundle::new(docs(), vec!["a".into(), "b".into()], 4);
        let i = Aspect::Interventions;
        assert_eq!(b.sequence(i), &[open_tag(i), w(1), w(2), close_tag(i)]);
        let p = Aspect::Population;
        // separator left dangling at the cut is removed
        assert_eq!(b.sequence(p), &[open_tag(p), w(0), close_tag(p)]);
    }

    #[test]
    fn absent_aspect_is_empty_tag_pair() {
        let b = AspectBundle::new(vec![[vec![], vec![w(1)], vec![], vec![]]], vec!["x".into()], 16);
        let p = Aspect::Population;
        assert_eq!(b.sequence(p), &[open_tag(p), close_tag(p)]);
        assert!(b.aspect_is_empty(p));
        assert!(!b.aspect_is_empty(Aspect::Interventions));
        let empty = AspectBundle::new(vec![Default::default()], vec!["x".into()], 16);
        assert!(empty.is_empty());
    }

    #[test]
    fn single_stream_drops_whole_documents() {
        let b = AspectBundle::new(docs(), vec!["a".into(), "b".into()], 64);
        let full = b.single_stream(usize::MAX);
        assert_eq!(full.len(), 13 + 1 + 11);
        assert_eq!(full[13], DOC_SEP);
        let first_only = b.single_stream(20);
        assert_eq!(first_only.len(), 13);
        let cut = b.single_stream(12);
        assert_eq!(cut.len(), 12);
        assert_eq!(cut[0], open_tag(Aspect::Population));
        assert_eq!(*cut.last().unwrap(), close_tag(Aspect::Punchline));
    }
}
