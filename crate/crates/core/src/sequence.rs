//! Vocabulary, three-segment input layout and input embeddings.
//!
//! ```text
//! [CLS] subject words (predicate words) object words [SEP] | [MASK] [SEP] | [IMG] [IMG] ([IMG]) [SEP]
//!   segment A (linguistic)                                  segment B       segment C (visual)
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{union_box, BoundingBox};
use crate::data::Mode;
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::Real;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const IMG: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[IMG]"];
pub const DEFAULT_P_MAX: usize = 64;

/// Dataset-derived whitespace vocabulary with reserved special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

fn split_label(label: &str) -> Result<Vec<String>> {
    let words: Vec<String> = label.split_whitespace().map(str::to_lowercase).collect();
    if words.is_empty() {
        return Err(Error::invalid("tokenize_term", "empty label"));
    }
    Ok(words)
}

impl Vocabulary {
    pub fn new() -> Self {
        let words: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = Self::new();
        for l in labels {
            v.insert_label(l)?;
        }
        Ok(v)
    }

    /// Tokenizes while building: unseen words get the next free id.
    pub fn insert_label(&mut self, label: &str) -> Result<Vec<usize>> {
        Ok(split_label(label)?
            .into_iter()
            .map(|w| match self.index.get(&w) {
                Some(&id) => id,
                None => {
                    let id = self.words.len();
                    self.index.insert(w.clone(), id);
                    self.words.push(w);
                    id
                }
            })
            .collect())
    }

    /// Lowercased whitespace split; every word must already be known.
    pub fn tokenize_term(&self, label: &str) -> Result<Vec<usize>> {
        split_label(label)?
            .into_iter()
            .map(|w| self.index.get(&w).copied().ok_or(Error::UnknownWord(w)))
            .collect()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `word<TAB>id` per line, specials first.
    pub fn to_text(&self) -> String {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{w}\t{i}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::invalid("vocabulary", format!("line {}: expected 'word<TAB>id'", n + 1));
            let (w, id) = line.split_once('\t').ok_or_else(bad)?;
            let id: usize = id.trim().parse().map_err(|_| bad())?;
            if id != words.len() {
                return Err(Error::invalid(
                    "vocabulary",
                    format!("line {}: ids must be dense, got {id}", n + 1),
                ));
            }
            words.push(w.to_string());
        }
        if words.len() < SPECIAL_TOKENS.len() || words.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::invalid("vocabulary", "special tokens missing or reordered"));
        }
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(Error::invalid("vocabulary", "duplicate word"));
        }
        Ok(Self { words, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Linguistic = 0,
    Answer = 1,
    Visual = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Subject,
    Predicate,
    Object,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Subject => "subject",
            Role::Predicate => "predicate",
            Role::Object => "object",
        }
    }
}

/// Which visual feature an element receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Whole-image feature.
    Whole,
    /// Attention-guided feature of the sequence's n-th term.
    Term(usize),
    /// Region feature: subject box, union box (`Predicate`) or object box.
    Region(Role),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Element {
    pub token: usize,
    pub segment: Segment,
    pub position: usize,
    pub slot: Slot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermSpan {
    pub role: Role,
    pub word_ids: Vec<usize>,
    /// Own box for subject/object, union box for the predicate.
    pub bbox: BoundingBox,
    pub first_element: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence {
    pub elements: Vec<Element>,
    pub n_linguistic: usize,
    pub n_answer: usize,
    pub n_visual: usize,
    pub mask_index: usize,
    pub terms: Vec<TermSpan>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Labels and boxes of one relationship instance.
#[derive(Clone, Debug)]
pub struct TermInput<'a> {
    pub label: &'a str,
    pub bbox: BoundingBox,
}

pub fn build_sequence(
    vocab: &Vocabulary,
    subject: &TermInput<'_>,
    predicate: Option<&str>,
    object: &TermInput<'_>,
    mode: Mode,
) -> Result<InputSequence> {
    let mut terms = vec![(Role::Subject, vocab.tokenize_term(subject.label)?, subject.bbox)];
    if mode == Mode::TripletBinary {
        let p = predicate.ok_or_else(|| Error::invalid("build_sequence", "triplet mode needs a predicate"))?;
        terms.push((
            Role::Predicate,
            vocab.tokenize_term(p)?,
            union_box(&subject.bbox, &object.bbox),
        ));
    }
    terms.push((Role::Object, vocab.tokenize_term(object.label)?, object.bbox));

    let mut elements = Vec::new();
    let mut push = |token, segment, slot| {
        let position = elements.len();
        elements.push(Element {
            token,
            segment,
            position,
            slot,
        });
    };
    push(CLS, Segment::Linguistic, Slot::Whole);
    let mut spans = Vec::with_capacity(terms.len());
    let mut next = 1;
    for (t, (role, ids, bbox)) in terms.into_iter().enumerate() {
        for &id in &ids {
            push(id, Segment::Linguistic, Slot::Term(t));
        }
        let n = ids.len();
        spans.push(TermSpan {
            role,
            word_ids: ids,
            bbox,
            first_element: next,
        });
        next += n;
    }
    push(SEP, Segment::Linguistic, Slot::Whole);
    let n_linguistic = next + 1;
    push(MASK, Segment::Answer, Slot::Whole);
    push(SEP, Segment::Answer, Slot::Whole);
    let regions: &[Role] = match mode {
        Mode::TripletBinary => &[Role::Subject, Role::Predicate, Role::Object],
        Mode::DoubletVrd => &[Role::Subject, Role::Object],
    };
    for &r in regions {
        push(IMG, Segment::Visual, Slot::Region(r));
    }
    push(SEP, Segment::Visual, Slot::Whole);
    Ok(InputSequence {
        n_linguistic,
        n_answer: 2,
        n_visual: regions.len() + 1,
        mask_index: n_linguistic,
        terms: spans,
        elements,
    })
}

/// Rows of a visual feature bank available to one sequence.
#[derive(Clone, Debug, Default)]
pub struct VisualRows {
    pub whole: usize,
    pub subject: usize,
    pub object: usize,
    pub union: Option<usize>,
    /// One row per term; `None` when mask attention is disabled, in which
    /// case words take the whole-image feature.
    pub terms: Option<Vec<usize>>,
}

/// Bank row feeding each element of `seq`.
pub fn assign_visual_features(seq: &InputSequence, rows: &VisualRows) -> Result<Vec<usize>> {
    seq.elements
        .iter()
        .map(|e| match e.slot {
            Slot::Whole => Ok(rows.whole),
            Slot::Term(t) => match &rows.terms {
                None => Ok(rows.whole),
                Some(terms) => terms
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::invalid("assign_visual_features", format!("missing feature for term {t}"))),
            },
            Slot::Region(Role::Subject) => Ok(rows.subject),
            Slot::Region(Role::Object) => Ok(rows.object),
            Slot::Region(Role::Predicate) => rows
                .union
                .ok_or_else(|| Error::invalid("assign_visual_features", "missing union-box feature")),
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
    pub p_max: usize,
}

impl EmbeddingTables {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        vocab_size: usize,
        d: usize,
        p_max: usize,
    ) -> Result<Self> {
        Ok(Self {
            token: store.add("embeddings.token", truncated_normal(rng, &[vocab_size, d], 0.02), true)?,
            segment: store.add("embeddings.segment", truncated_normal(rng, &[3, d], 0.02), true)?,
            position: store.add("embeddings.position", truncated_normal(rng, &[p_max, d], 0.02), true)?,
            p_max,
        })
    }

    /// `x_i = token[t_i] + v_i + segment[s_i] + position[p_i]` for every
    /// element of every sequence, stacked row-wise. `visuals` holds one row
    /// per element in the same order.
    pub fn embed_sequences<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seqs: &[&InputSequence],
        visuals: Var,
    ) -> Result<Var> {
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        let mut positions = Vec::new();
        for s in seqs {
            for e in &s.elements {
                if e.position >= self.p_max {
                    return Err(Error::invalid(
                        "embed_sequence",
                        format!("position {} exceeds the table size {}", e.position, self.p_max),
                    ));
                }
                tokens.push(e.token);
                segments.push(e.segment as usize);
                positions.push(e.position);
            }
        }
        if tape.shape(visuals).first() != Some(&tokens.len()) {
            return Err(Error::shape(
                "embed_sequence",
                &[tokens.len()],
                tape.shape(visuals),
                Some(0),
            ));
        }
        let token_table = tape.param(store, self.token);
        let segment_table = tape.param(store, self.segment);
        let position_table = tape.param(store, self.position);
        let t = tape.gather_rows(token_table, &tokens)?;
        let s = tape.gather_rows(segment_table, &segments)?;
        let p = tape.gather_rows(position_table, &positions)?;
        let x = tape.add(t, visuals)?;
        let x = tape.add(x, s)?;
        tape.add(x, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_labels(["goose", "window", "to the right of", "person", "shoe"]).unwrap()
    }

    #[test]
    fn multiword_term_tokenizes_in_order() {
        let v = vocab();
        let ids = v.tokenize_term("to the right of").unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(v.word(ids[2]), Some("right"));
        assert!(matches!(v.tokenize_term("zebra"), Err(Error::UnknownWord(w)) if w == "zebra"));
        assert!(v.tokenize_term("   ").is_err());
    }

    #[test]
    fn triplet_and_doublet_counts() {
        let v = vocab();
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let s = TermInput {
            label: "goose",
            bbox: b,
        };
        let o = TermInput {
            label: "window",
            bbox: b,
        };
        let seq = build_sequence(&v, &s, Some("to the right of"), &o, Mode::TripletBinary).unwrap();
        assert_eq!((seq.n_linguistic, seq.n_answer, seq.n_visual, seq.len()), (8, 2, 4, 14));
        assert_eq!(seq.elements[seq.mask_index].token, MASK);
        let s = TermInput {
            label: "person",
            bbox: b,
        };
        let o = TermInput { label: "shoe", bbox: b };
        let seq = build_sequence(&v, &s, None, &o, Mode::DoubletVrd).unwrap();
        assert_eq!((seq.n_linguistic, seq.n_answer, seq.n_visual, seq.len()), (4, 2, 3, 9));
        assert!(build_sequence(&v, &s, None, &o, Mode::TripletBinary).is_err());
    }

    #[test]
    fn doublet_slot_assignment() {
        let v = vocab();
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let seq = build_sequence(
            &v,
            &TermInput {
                label: "person",
                bbox: b,
            },
            None,
            &TermInput { label: "shoe", bbox: b },
            Mode::DoubletVrd,
        )
        .unwrap();
        let rows = VisualRows {
            whole: 0,
            subject: 1,
            object: 2,
            union: None,
            terms: Some(vec![3, 4]),
        };
        assert_eq!(
            assign_visual_features(&seq, &rows).unwrap(),
            vec![0, 3, 4, 0, 0, 0, 1, 2, 0]
        );
        let off = VisualRows { terms: None, ..rows };
        assert_eq!(
            assign_visual_features(&seq, &off).unwrap(),
            vec![0, 0, 0, 0, 0, 0, 1, 2, 0]
        );
    }

    #[test]
    fn vocabulary_text_roundtrip() {
        let v = vocab();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(v.to_text().starts_with("[PAD]\t0\n[CLS]\t1\n"));
    }
}
