use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

type Counts<T> = BTreeMap<Vec<T>, usize>;

fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> Counts<T> {
    let mut out = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and total candidate n-grams of order `n`.
fn clipped_matches<T: Ord + Clone>(cand: &[T], refs: &[&[T]], n: usize) -> (usize, usize) {
    let counts = ngram_counts(cand, n);
    let total = cand.len().saturating_sub(n - 1);
    let mut max_ref: Counts<T> = BTreeMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = counts
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len<T>(c: usize, refs: &[&[T]]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0)
}

fn combine(matched: &[usize], totals: &[usize], c: usize, r: usize) -> Vec<f64> {
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut out = Vec::with_capacity(matched.len());
    let mut log_sum = 0.0;
    let mut zero = false;
    for (i, (&m, &t)) in matched.iter().zip(totals).enumerate() {
        if m == 0 || t == 0 {
            zero = true;
        } else {
            log_sum += (m as f64 / t as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (i + 1) as f64).exp() });
    }
    out
}

/// Sentence BLEU-1..`max_n` without smoothing.
pub fn bleu<T: Ord + Clone>(candidate: &[T], references: &[&[T]], max_n: usize) -> Result<Vec<f64>> {
    if references.is_empty() {
        return Err(Error::invalid("BLEU needs at least one reference"));
    }
    if candidate.is_empty() {
        return Ok(vec![0.0; max_n]);
    }
    let (matched, totals): (Vec<_>, Vec<_>) = (1..=max_n).map(|n| clipped_matches(candidate, references, n)).unzip();
    Ok(combine(&matched, &totals, candidate.len(), closest_ref_len(candidate.len(), references)))
}

/// Corpus BLEU: clipped counts, candidate lengths and closest reference
/// lengths are summed over all examples before combining.
pub fn corpus_bleu<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    max_n: usize,
) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::invalid("BLEU needs at least one reference"));
        }
        let refs: Vec<&[T]> = refs.iter().map(Vec::as_slice).collect();
        for n in 1..=max_n {
            let (m, t) = clipped_matches(cand, &refs, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), &refs);
    }
    Ok(combine(&matched, &totals, c, r))
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// CIDEr-D with document frequencies fixed by a reference corpus.
#[derive(Clone, Debug)]
pub struct CiderD<T: Ord> {
    df: BTreeMap<Vec<T>, f64>,
    log_n: f64,
}

struct TfIdf<T> {
    vec: Vec<BTreeMap<Vec<T>, f64>>,
    norm: [f64; CIDER_N],
    /// Bigram count, used by the length penalty.
    length: f64,
}

impl<T: Ord + Clone> CiderD<T> {
    /// `corpus` holds one reference set per image; an n-gram's document
    /// frequency is the number of sets containing it.
    pub fn new(corpus: &[Vec<Vec<T>>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("CIDEr-D needs a non-empty reference corpus"));
        }
        let mut df: BTreeMap<Vec<T>, f64> = BTreeMap::new();
        for refs in corpus {
            let mut seen: BTreeSet<Vec<T>> = BTreeSet::new();
            for r in refs {
                for n in 1..=CIDER_N {
                    for w in r.windows(n) {
                        seen.insert(w.to_vec());
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Ok(CiderD {
            df,
            log_n: (corpus.len() as f64).ln(),
        })
    }

    fn tfidf(&self, tokens: &[T]) -> TfIdf<T> {
        let mut vec = vec![BTreeMap::new(); CIDER_N];
        let mut norm = [0.0; CIDER_N];
        let mut length = 0.0;
        for n in 1..=CIDER_N {
            for (g, tf) in ngram_counts(tokens, n) {
                let df = self.df.get(&g).copied().unwrap_or(0.0).max(1.0);
                let w = tf as f64 * (self.log_n - df.ln());
                norm[n - 1] += w * w;
                if n == 2 {
                    length += tf as f64;
                }
                vec[n - 1].insert(g, w);
            }
        }
        for v in &mut norm {
            *v = v.sqrt();
        }
        TfIdf { vec, norm, length }
    }

    fn sim(hyp: &TfIdf<T>, rf: &TfIdf<T>) -> [f64; CIDER_N] {
        let delta = hyp.length - rf.length;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut val = [0.0; CIDER_N];
        for n in 0..CIDER_N {
            for (g, &w) in &hyp.vec[n] {
                if let Some(&r) = rf.vec[n].get(g) {
                    val[n] += w.min(r) * r;
                }
            }
            if hyp.norm[n] != 0.0 && rf.norm[n] != 0.0 {
                val[n] /= hyp.norm[n] * rf.norm[n];
            }
            val[n] *= penalty;
        }
        val
    }

    /// Score of one candidate against its references.
    pub fn score(&self, candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::invalid("CIDEr-D needs at least one reference"));
        }
        let hyp = self.tfidf(candidate);
        let mut total = [0.0; CIDER_N];
        for r in references {
            let s = Self::sim(&hyp, &self.tfidf(r));
            for n in 0..CIDER_N {
                total[n] += s[n];
            }
        }
        let mean = total.iter().sum::<f64>() / CIDER_N as f64;
        Ok(mean / references.len() as f64 * 10.0)
    }

    pub fn scores(&self, candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<Vec<f64>> {
        if candidates.len() != references.len() {
            return Err(Error::invalid(format!(
                "{} candidates for {} reference sets",
                candidates.len(),
                references.len()
            )));
        }
        candidates.iter().zip(references).map(|(c, r)| self.score(c, r)).collect()
    }
}

/// CIDEr-D scores with document frequencies from `corpus_refs`.
pub fn cider<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    corpus_refs: &[Vec<Vec<T>>],
) -> Result<Vec<f64>> {
    CiderD::new(corpus_refs)?.scores(candidates, references)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let c = toks("a b c");
        let r = toks("a b c d");
        let b = bleu(&c, &[&r], 3).unwrap();
        assert!((b[2] - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!((b[2] - 0.71653).abs() < 1e-5);
        let b = bleu(&toks("a a a"), &[&toks("a b")], 1).unwrap();
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-12);
        let s = toks("the cat sat on the mat");
        assert_eq!(bleu(&s, &[&s], 4).unwrap(), vec![1.0; 4]);
        assert_eq!(bleu::<&str>(&[], &[&s], 4).unwrap(), vec![0.0; 4]);
        assert!(bleu(&s, &[], 4).is_err());
    }

    #[test]
    fn bleu_zero_precision_zeroes_higher_orders() {
        let b = bleu(&toks("a c b"), &[&toks("a b c")], 3).unwrap();
        assert!(b[0] > 0.0);
        assert_eq!(b[1], 0.0);
        assert_eq!(b[2], 0.0);
    }

    #[test]
    fn cider_identity_and_disjoint() {
        let corpus = vec![vec![toks("a b c d e")], vec![toks("f g h i j")]];
        let c = CiderD::new(&corpus).unwrap();
        let s = c.score(&toks("a b c d e"), &corpus[0]).unwrap();
        assert!((s - 10.0).abs() < 1e-12, "{s}");
        assert_eq!(c.score(&toks("f g h"), &corpus[0]).unwrap(), 0.0);
        assert!(c.score(&toks("a"), &[]).is_err());
        assert!(CiderD::<&str>::new(&[]).is_err());
    }

    #[test]
    fn cider_duplicated_corpus_is_unchanged() {
        let corpus = vec![
            vec![toks("a red circle"), toks("a big red circle")],
            vec![toks("a blue square"), toks("one blue square")],
            vec![toks("a red square")],
        ];
        let doubled: Vec<_> = corpus.iter().chain(&corpus).cloned().collect();
        let cand = toks("a red square");
        let a = CiderD::new(&corpus).unwrap().score(&cand, &corpus[0]).unwrap();
        let b = CiderD::new(&doubled).unwrap().score(&cand, &corpus[0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
