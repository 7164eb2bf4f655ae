use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids at the front of every vocabulary.
pub const RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Lowercase, drop everything but ASCII letters and whitespace, split on
/// whitespace.
pub fn normalize_tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter_map(|c| {
            if c.is_whitespace() {
                Some(' ')
            } else {
                let l = c.to_ascii_lowercase();
                l.is_ascii_lowercase().then_some(l)
            }
        })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Token ↔ id map with training-corpus counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    /// Position of each id in the frequency ranking (reserved ids: `None`).
    rank: Vec<Option<usize>>,
}

impl Vocabulary {
    /// Count tokens and keep those seen at least `min_count` times. Kept
    /// words get ids after the reserved block, by descending count then
    /// alphabetically; the UNK count absorbs every dropped occurrence.
    pub fn build<I, S>(streams: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::invalid("min_count must be at least 1"));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for stream in streams {
            for tok in stream {
                *counts.entry(tok.as_ref().to_string()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, u64)> = Vec::new();
        let mut unk = 0;
        for (tok, n) in counts {
            if RESERVED_TOKENS.contains(&tok.as_str()) {
                return Err(Error::invalid(format!("corpus contains reserved token `{tok}`")));
            }
            if n >= min_count {
                kept.push((tok, n));
            } else {
                unk += n;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut entries: Vec<(String, u64)> = RESERVED_TOKENS.iter().map(|t| (t.to_string(), 0)).collect();
        entries[UNK].1 = unk;
        entries.extend(kept);
        Self::from_entries(entries)
    }

    /// Rebuild from `(token, count)` pairs in id order, reserved block first.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        if entries.len() < RESERVED {
            return Err(Error::Format("vocabulary lacks the reserved tokens".into()));
        }
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if entries[i].0 != *r {
                return Err(Error::Format(format!("vocabulary id {i} must be `{r}`")));
            }
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (tok, _)) in entries.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary token `{tok}`")));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        let (tokens, counts): (Vec<String>, Vec<u64>) = entries.into_iter().unzip();
        let mut order: Vec<usize> = (RESERVED..tokens.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut rank = vec![None; tokens.len()];
        for (r, &id) in order.iter().enumerate() {
            rank[id] = Some(r);
        }
        Ok(Vocabulary {
            tokens,
            counts,
            index,
            rank,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Non-reserved entries.
    pub fn word_count(&self) -> usize {
        self.tokens.len() - RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED_TOKENS[UNK])
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode(&normalize_tokenize(text))
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Words joined by single spaces; START, END and PAD are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != START && i != END)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Position of `id` in the frequency ranking.
    pub fn frequency_rank(&self, id: usize) -> Option<usize> {
        self.rank.get(id).copied().flatten()
    }

    /// `token<TAB>count` lines in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            let _ = writeln!(out, "{t}\t{c}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocabulary line {}: expected `token<TAB>count`", n + 1)))?;
            let count = count
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("vocabulary line {}: bad count", n + 1)))?;
            entries.push((tok.to_string(), count));
        }
        Self::from_entries(entries)
    }
}

/// Frequency-rank indices of the caption's words that are among the
/// `n_frequent` most frequent training words, ascending and deduplicated.
pub fn frequent_word_set(vocab: &Vocabulary, caption: &[usize], n_frequent: usize) -> Vec<usize> {
    let mut out: Vec<usize> = caption
        .iter()
        .filter_map(|&id| vocab.frequency_rank(id))
        .filter(|&r| r < n_frequent)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(normalize_tokenize("A Red Circle."), vec!["a", "red", "circle"]);
        assert!(normalize_tokenize("").is_empty());
        assert_eq!(normalize_tokenize("big   STAR"), vec!["big", "star"]);
        assert_eq!(normalize_tokenize("it's 2 o'clock\tnow"), vec!["its", "oclock", "now"]);
    }

    #[test]
    fn min_count_threshold() {
        let mut stream: Vec<&str> = vec!["cat"; 5];
        stream.extend(["dog"; 4]);
        let v = Vocabulary::build([stream.clone()], 5).unwrap();
        assert!(v.contains("cat"));
        assert!(!v.contains("dog"));
        assert_eq!(v.id("dog"), UNK);
        assert_eq!(v.count(UNK), 4);
        let all = Vocabulary::build([stream], 1).unwrap();
        assert_eq!(all.id("dog"), RESERVED + 1);
        assert!(Vocabulary::build([vec!["x"]], 0).is_err());
    }

    #[test]
    fn ids_are_deterministic() {
        let corpus = vec![vec!["b", "a", "c", "a"], vec!["c", "b"]];
        let v1 = Vocabulary::build(corpus.clone(), 1).unwrap();
        let v2 = Vocabulary::build(corpus, 1).unwrap();
        assert_eq!(v1, v2);
        // a:2, b:2, c:2 tie on count and fall back to alphabetical order.
        assert_eq!(v1.decode(&[4, 5, 6]), vec!["a", "b", "c"]);
    }

    #[test]
    fn frequent_set_by_rank() {
        let mut stream = vec!["a"; 10];
        stream.extend(["b"; 5]);
        stream.push("c");
        let v = Vocabulary::build([stream], 1).unwrap();
        let cap = v.encode(&["a", "c"]);
        assert_eq!(frequent_word_set(&v, &cap, 2), vec![v.frequency_rank(v.id("a")).unwrap()]);
        assert_eq!(frequent_word_set(&v, &cap, 2), vec![0]);
        assert!(frequent_word_set(&v, &v.encode(&["c"]), 2).is_empty());
        assert_eq!(frequent_word_set(&v, &[START, UNK, END], v.len()), Vec::<usize>::new());
        assert_eq!(frequent_word_set(&v, &cap, v.len()), vec![0, 2]);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build([vec!["x", "y", "y"]], 1).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\t1\n").is_err());
    }
}
