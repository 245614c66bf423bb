//! Whitespace tokenizer over a closed vocabulary with reserved special ids.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Schema};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
/// The slot/value separator `-` of teacher inputs.
pub const DASH: u32 = 4;
const FIRST_SLOT_MARKER: u32 = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends `n` padding positions.
    pub fn padded(mut self, n: usize) -> Self {
        self.ids.extend(std::iter::repeat_n(PAD, n));
        self.mask.extend(std::iter::repeat_n(false, n));
        self
    }
}

/// Lowercased whitespace tokens.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Vocab {
    n_slots: usize,
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    #[serde(skip)]
    truncations: AtomicUsize,
}

impl Clone for Vocab {
    fn clone(&self) -> Self {
        Self {
            n_slots: self.n_slots,
            words: self.words.clone(),
            index: self.index.clone(),
            truncations: AtomicUsize::new(self.truncations()),
        }
    }
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.n_slots == other.n_slots && self.words == other.words
    }
}

impl Vocab {
    /// Vocabulary over slot names, candidate values, and every utterance in `dialogues`.
    pub fn build<'d>(schema: &Schema, dialogues: impl IntoIterator<Item = &'d Dialogue>) -> Self {
        let mut words = BTreeSet::new();
        for slot in schema.slots() {
            words.extend(split_words(&slot.name));
            for v in &slot.values {
                words.extend(split_words(v));
            }
        }
        for d in dialogues {
            for t in &d.turns {
                words.extend(split_words(&t.user));
                words.extend(split_words(&t.system));
            }
        }
        Self::from_words(schema.len(), words.into_iter().collect())
    }

    pub fn from_words(n_slots: usize, words: Vec<String>) -> Self {
        let mut v = Self {
            n_slots,
            words,
            index: HashMap::new(),
            truncations: AtomicUsize::new(0),
        };
        v.reindex();
        v
    }

    /// Rebuilds the lookup table (needed after deserialization).
    pub fn reindex(&mut self) {
        let base = self.first_word_id();
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), base + i as u32))
            .collect();
    }

    fn first_word_id(&self) -> u32 {
        FIRST_SLOT_MARKER + 2 * self.n_slots as u32
    }

    pub fn size(&self) -> usize {
        self.first_word_id() as usize + self.words.len()
    }

    pub fn num_slots(&self) -> usize {
        self.n_slots
    }

    pub fn teacher_marker(&self, j: usize) -> u32 {
        assert!(j < self.n_slots);
        FIRST_SLOT_MARKER + j as u32
    }

    pub fn student_marker(&self, j: usize) -> u32 {
        assert!(j < self.n_slots);
        FIRST_SLOT_MARKER + (self.n_slots + j) as u32
    }

    pub fn token_id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text).map(|w| self.token_id(&w)).collect()
    }

    pub fn token_str(&self, id: u32) -> String {
        match id {
            PAD => "[PAD]".into(),
            UNK => "[UNK]".into(),
            CLS => "[CLS]".into(),
            SEP => "[SEP]".into(),
            DASH => "-".into(),
            _ if id < FIRST_SLOT_MARKER + self.n_slots as u32 => format!("[SLOT_{}_tea]", id - FIRST_SLOT_MARKER + 1),
            _ if id < self.first_word_id() => {
                format!("[SLOT_{}_stu]", id - FIRST_SLOT_MARKER - self.n_slots as u32 + 1)
            }
            _ => self
                .words
                .get((id - self.first_word_id()) as usize)
                .cloned()
                .unwrap_or_else(|| "[UNK]".into()),
        }
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token_str(i)).collect::<Vec<_>>().join(" ")
    }

    /// `[CLS] text [SEP]`, the input of the fixed encoder.
    pub fn encode_single(&self, text: &str) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend(self.tokenize(text));
        ids.push(SEP);
        TokenSequence::new(ids)
    }

    /// `[CLS] user [SEP] system [SEP]`, truncated to `max_len` by dropping the
    /// oldest user tokens first (then the oldest system tokens). Every
    /// truncation bumps [`Vocab::truncations`].
    pub fn encode_pair(&self, user: &str, system: &str, max_len: usize) -> TokenSequence {
        let mut u = self.tokenize(user);
        let mut s = self.tokenize(system);
        let budget = max_len.saturating_sub(3);
        if u.len() + s.len() > budget {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            let overflow = u.len() + s.len() - budget;
            let drop_u = overflow.min(u.len());
            u.drain(..drop_u);
            let drop_s = overflow - drop_u;
            s.drain(..drop_s.min(s.len()));
        }
        let mut ids = Vec::with_capacity(u.len() + s.len() + 3);
        ids.push(CLS);
        ids.extend(u);
        ids.push(SEP);
        ids.extend(s);
        ids.push(SEP);
        TokenSequence::new(ids)
    }

    pub fn truncations(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }
}
