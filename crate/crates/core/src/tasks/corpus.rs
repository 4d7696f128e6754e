//! Character-level language-modelling data over a raw byte alphabet.

use std::sync::Arc;

use super::instance::{TaskInstance, TaskMeta};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Every byte is its own token, so any file is a valid corpus.
pub const BYTE_VOCAB: usize = 256;

/// Fixed-length next-byte prediction windows over a shared text buffer.
/// Window `i` starts at byte `i * stride`; its tokens are `len` bytes and its
/// targets are the same span shifted by one.
#[derive(Debug, Clone)]
pub struct CorpusWindows {
    text: Arc<[u8]>,
    len: usize,
    stride: usize,
    count: usize,
}

pub fn corpus_windows(text: &[u8], len: usize, stride: usize) -> Result<CorpusWindows> {
    CorpusWindows::new(Arc::from(text), len, stride)
}

impl CorpusWindows {
    pub fn new(text: Arc<[u8]>, len: usize, stride: usize) -> Result<Self> {
        if len == 0 || stride == 0 {
            return Err(Error::Config(
                "window length and stride must be positive".into(),
            ));
        }
        if text.len() < len + 1 {
            return Err(Error::Config(format!(
                "corpus of {} bytes is too short for windows of {len} (need {})",
                text.len(),
                len + 1
            )));
        }
        let count = (text.len() - 1 - len) / stride + 1;
        Ok(Self {
            text,
            len,
            stride,
            count,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn window_len(&self) -> usize {
        self.len
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn text(&self) -> &[u8] {
        &self.text
    }

    /// Input bytes of window `i` as token ids.
    pub fn tokens(&self, i: usize) -> Vec<usize> {
        let s = i * self.stride;
        self.text[s..s + self.len]
            .iter()
            .map(|&b| b as usize)
            .collect()
    }

    pub fn get(&self, i: usize) -> Option<TaskInstance> {
        if i >= self.count {
            return None;
        }
        let s = i * self.stride;
        let tokens = self.tokens(i);
        let targets = self.text[s + 1..s + 1 + self.len]
            .iter()
            .map(|&b| b as usize)
            .collect();
        let meta = TaskMeta::default();
        Some(
            TaskInstance::new(tokens, targets, vec![true; self.len], meta)
                .expect("window lengths agree"),
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = TaskInstance> + '_ {
        (0..self.count).map(|i| self.get(i).expect("index in range"))
    }

    /// One epoch of window indices in seeded random order, cut into batches
    /// of `batch_size`. A trailing partial batch is dropped.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.count).collect();
        Rng::new(seed).shuffle(&mut order);
        order
            .chunks_exact(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Seeded generator of English-like prose for tests and desk-scale language
/// modelling when no natural corpus is supplied. Documents reuse a small set
/// of names and nouns, so predicting a byte benefits from earlier context.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::new(seed);
    let lex = Lexicon::new(&mut rng);
    let mut out = String::with_capacity(n_bytes + 256);
    while out.len() < n_bytes {
        lex.document(&mut rng, &mut out);
        out.push_str("\n\n");
    }
    out.truncate(n_bytes);
    out.into_bytes()
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "cl", "dr",
    "st", "th", "sh", "tr", "gr", "pl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "ie"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "nd", "st", "m", "ck"];
const DETERMINERS: &[&str] = &[
    "the", "the", "the", "a", "this", "that", "every", "her", "his", "their",
];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "under", "near", "with", "from", "over", "beside", "behind", "to",
];
const CONJUNCTIONS: &[&str] = &["and", "but", "so", "while", "because", "although"];
const PRONOUNS: &[&str] = &["she", "he", "they", "it", "we"];

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    names: Vec<String>,
}

fn pick<'a>(rng: &mut Rng, items: &'a [&'a str]) -> &'a str {
    items[rng.below(items.len())]
}

/// Skewed index in `0..n`: low indices are much more frequent.
fn skewed(rng: &mut Rng, n: usize) -> usize {
    let u = rng.uniform();
    ((u * u * u) * n as f64) as usize % n
}

fn pseudo_word(rng: &mut Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(pick(rng, ONSETS));
        w.push_str(pick(rng, VOWELS));
    }
    w.push_str(pick(rng, CODAS));
    w
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
        .unwrap_or_default()
}

impl Lexicon {
    fn new(rng: &mut Rng) -> Self {
        let mut words = |n: usize, lo: usize, hi: usize, suffix: &str| -> Vec<String> {
            (0..n)
                .map(|_| {
                    let syl = lo + rng.below(hi - lo + 1);
                    pseudo_word(rng, syl) + suffix
                })
                .collect()
        };
        let nouns = words(900, 1, 3, "");
        let verbs = words(300, 1, 2, "ed");
        let adjectives = words(250, 1, 3, "y");
        let names = words(120, 2, 3, "").iter().map(|w| capitalize(w)).collect();
        Self {
            nouns,
            verbs,
            adjectives,
            names,
        }
    }

    fn document(&self, rng: &mut Rng, out: &mut String) {
        let names: Vec<usize> = (0..3).map(|_| rng.below(self.names.len())).collect();
        let nouns: Vec<usize> = (0..8).map(|_| skewed(rng, self.nouns.len())).collect();
        let topic = Topic { names, nouns };
        let title = &self.nouns[topic.nouns[0]];
        out.push_str(&capitalize(title));
        out.push_str(" of ");
        out.push_str(&self.names[topic.names[0]]);
        out.push_str("\n\n");
        let paragraphs = 2 + rng.below(5);
        for p in 0..paragraphs {
            if p > 0 {
                out.push('\n');
            }
            let sentences = 3 + rng.below(5);
            for s in 0..sentences {
                if s > 0 {
                    out.push(' ');
                }
                self.sentence(rng, &topic, out);
            }
            out.push('\n');
        }
    }

    fn noun_phrase(&self, rng: &mut Rng, topic: &Topic, out: &mut String) {
        if rng.uniform() < 0.3 {
            out.push_str(&self.names[topic.names[rng.below(topic.names.len())]]);
            return;
        }
        out.push_str(pick(rng, DETERMINERS));
        out.push(' ');
        if rng.uniform() < 0.35 {
            out.push_str(&self.adjectives[skewed(rng, self.adjectives.len())]);
            out.push(' ');
        }
        let noun = if rng.uniform() < 0.55 {
            topic.nouns[rng.below(topic.nouns.len())]
        } else {
            skewed(rng, self.nouns.len())
        };
        out.push_str(&self.nouns[noun]);
    }

    fn clause(&self, rng: &mut Rng, topic: &Topic, out: &mut String, subject_pronoun: bool) {
        if subject_pronoun {
            out.push_str(pick(rng, PRONOUNS));
        } else {
            self.noun_phrase(rng, topic, out);
        }
        out.push(' ');
        out.push_str(&self.verbs[skewed(rng, self.verbs.len())]);
        out.push(' ');
        if rng.uniform() < 0.5 {
            out.push_str(pick(rng, PREPOSITIONS));
            out.push(' ');
        }
        self.noun_phrase(rng, topic, out);
    }

    fn sentence(&self, rng: &mut Rng, topic: &Topic, out: &mut String) {
        let start = out.len();
        let quoted = rng.uniform() < 0.1;
        if quoted {
            out.push('"');
        }
        self.clause(rng, topic, out, false);
        if rng.uniform() < 0.4 {
            out.push_str(", ");
            out.push_str(pick(rng, CONJUNCTIONS));
            out.push(' ');
            self.clause(rng, topic, out, true);
        }
        let body_start = start + usize::from(quoted);
        let first = out[body_start..]
            .chars()
            .next()
            .map(|c| c.to_ascii_uppercase());
        if let Some(c) = first {
            out.replace_range(body_start..body_start + 1, &c.to_string());
        }
        out.push(if rng.uniform() < 0.1 { '?' } else { '.' });
        if quoted {
            out.push('"');
        }
    }
}

struct Topic {
    names: Vec<usize>,
    nouns: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shift_by_one() {
        let w = corpus_windows(b"abcd", 3, 1).unwrap();
        assert_eq!(w.len(), 1);
        let inst = w.get(0).unwrap();
        assert_eq!(
            inst.tokens,
            vec![b'a' as usize, b'b' as usize, b'c' as usize]
        );
        assert_eq!(
            inst.targets,
            vec![b'b' as usize, b'c' as usize, b'd' as usize]
        );
        assert!(inst.loss_mask.iter().all(|&m| m));
        assert!(w.get(1).is_none());
    }

    #[test]
    fn too_short() {
        assert!(corpus_windows(b"abc", 3, 1).is_err());
        assert!(corpus_windows(b"abcd", 0, 1).is_err());
    }

    #[test]
    fn stride_equal_to_length_partitions() {
        let text: Vec<u8> = (0..=200u8).collect();
        let w = corpus_windows(&text, 10, 10).unwrap();
        let covered: Vec<usize> = w.iter().flat_map(|i| i.tokens).collect();
        assert_eq!(covered, (0..w.len() * 10).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn window_count_matches_counting_oracle(n in 2usize..400, len in 1usize..50, stride in 1usize..60) {
            prop_assume!(n > len);
            let text = vec![b'x'; n];
            let w = corpus_windows(&text, len, stride).unwrap();
            let mut oracle = 0;
            let mut start = 0;
            while start + len < n {
                oracle += 1;
                start += stride;
            }
            prop_assert_eq!(w.len(), oracle);
        }
    }

    #[test]
    fn epoch_batches_are_a_seeded_permutation() {
        let w = corpus_windows(&[0u8; 101], 4, 4).unwrap();
        let a = w.epoch_batches(5, 3);
        assert_eq!(a, w.epoch_batches(5, 3));
        assert_ne!(a, w.epoch_batches(5, 4));
        assert_eq!(a.len(), w.len() / 5);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), (w.len() / 5) * 5);
    }

    #[test]
    fn synthetic_corpus_is_seeded_text() {
        let a = synthetic_corpus(20_000, 1);
        assert_eq!(a.len(), 20_000);
        assert_eq!(a, synthetic_corpus(20_000, 1));
        assert_ne!(a, synthetic_corpus(20_000, 2));
        assert!(a.iter().all(|b| b.is_ascii()));
        let text = String::from_utf8(a).unwrap();
        assert!(text.contains("\n\n"));
        assert!(text.contains(". "));
        let distinct: std::collections::HashSet<u8> = text.bytes().collect();
        assert!(distinct.len() > 30);
    }
}
