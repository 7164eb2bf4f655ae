use std::cmp::Ordering;

use crate::corpus::{END, PAD, START};
use crate::error::{Error, Result};

/// Anything that yields next-token log-probabilities for a batch of
/// partial captions. Token ids follow the corpus layout: PAD and START are
/// never emitted and END terminates a caption.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Decoder state before the first token of `example`.
    fn initial(&self, example: usize) -> Result<Self::State>;

    /// Advance each state by its previous token and return the log-probs
    /// over the vocabulary together with the new state.
    fn step(&self, states: &[Self::State], prev: &[usize]) -> Result<Vec<(Vec<f64>, Self::State)>>;
}

fn emittable(token: usize) -> bool {
    token != PAD && token != START
}

/// Highest-scoring emittable token, lowest id on ties.
fn argmax(log_probs: &[f64]) -> usize {
    let mut best = END;
    let mut best_lp = f64::NEG_INFINITY;
    for (t, &lp) in log_probs.iter().enumerate() {
        if emittable(t) && (lp > best_lp || (lp == best_lp && t < best)) {
            best = t;
            best_lp = lp;
        }
    }
    best
}

fn check_len(scorer_vocab: usize, lps: &[f64]) -> Result<()> {
    if lps.len() != scorer_vocab || lps.iter().any(|x| x.is_nan()) {
        return Err(Error::invalid("scorer returned malformed log-probabilities"));
    }
    Ok(())
}

/// Greedy captions for examples `0..count`, decoded together. Each stops
/// at END or after `max_len` tokens; END is not included.
pub fn greedy_decode_batch<S: StepScorer>(scorer: &S, count: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut out = vec![Vec::new(); count];
    let mut live: Vec<usize> = (0..count).collect();
    let mut states = (0..count).map(|e| scorer.initial(e)).collect::<Result<Vec<_>>>()?;
    let mut prev = vec![START; count];
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let stepped = scorer.step(&states, &prev)?;
        let (mut next_live, mut next_states, mut next_prev) = (Vec::new(), Vec::new(), Vec::new());
        for (&e, (lps, state)) in live.iter().zip(stepped) {
            check_len(scorer.vocab_size(), &lps)?;
            let tok = argmax(&lps);
            if tok != END {
                out[e].push(tok);
                next_live.push(e);
                next_states.push(state);
                next_prev.push(tok);
            }
        }
        live = next_live;
        states = next_states;
        prev = next_prev;
    }
    Ok(out)
}

/// Greedy caption of example 0.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Vec<usize>> {
    Ok(greedy_decode_batch(scorer, 1, max_len)?.pop().expect("one example"))
}

/// A (possibly finished) beam entry; `tokens` excludes START and END.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher log-probability first, then token-id lexicographic order.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Length-unnormalized beam search over example `example`. Every step keeps
/// the `beam_k` best extensions; those ending in END leave the beam as
/// finished hypotheses. Hypotheses still open after `max_len` tokens join
/// the final ranking. Returns up to `beam_k` hypotheses, best first.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    example: usize,
    beam_k: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_k == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    struct Open<St> {
        tokens: Vec<usize>,
        log_prob: f64,
        state: St,
    }
    let mut open = vec![Open {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: scorer.initial(example)?,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if open.is_empty() {
            break;
        }
        let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if open.iter().all(|o| o.log_prob < best_done) {
            // Extensions only lower the score, so nothing open can win.
            break;
        }
        let states: Vec<S::State> = open.iter().map(|o| o.state.clone()).collect();
        let prev: Vec<usize> = open.iter().map(|o| o.tokens.last().copied().unwrap_or(START)).collect();
        let stepped = scorer.step(&states, &prev)?;
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        let mut new_states = Vec::with_capacity(open.len());
        for (i, (lps, state)) in stepped.into_iter().enumerate() {
            check_len(scorer.vocab_size(), &lps)?;
            for (t, &lp) in lps.iter().enumerate() {
                if emittable(t) {
                    let mut seq = open[i].tokens.clone();
                    seq.push(t);
                    cands.push((open[i].log_prob + lp, seq, i));
                }
            }
            new_states.push(state);
        }
        cands.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(beam_k);
        let mut next = Vec::with_capacity(beam_k);
        for (lp, mut seq, parent) in cands {
            if seq.last() == Some(&END) {
                seq.pop();
                done.push(Hypothesis {
                    tokens: seq,
                    log_prob: lp,
                    finished: true,
                });
            } else {
                next.push(Open {
                    tokens: seq,
                    log_prob: lp,
                    state: new_states[parent].clone(),
                });
            }
        }
        open = next;
    }
    done.extend(open.into_iter().map(|o| Hypothesis {
        tokens: o.tokens,
        log_prob: o.log_prob,
        finished: false,
    }));
    done.sort_by(|a, b| {
        rank((a.log_prob, &a.tokens), (b.log_prob, &b.tokens)).then(b.finished.cmp(&a.finished))
    });
    done.truncate(beam_k);
    Ok(done)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Fixed next-token distributions keyed by the full prefix.
    pub(crate) struct TableScorer {
        pub vocab: usize,
        pub table: fn(&[usize]) -> Vec<f64>,
    }

    impl StepScorer for TableScorer {
        type State = Vec<usize>;

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn initial(&self, _example: usize) -> Result<Vec<usize>> {
            Ok(Vec::new())
        }

        fn step(&self, states: &[Vec<usize>], prev: &[usize]) -> Result<Vec<(Vec<f64>, Vec<usize>)>> {
            Ok(states
                .iter()
                .zip(prev)
                .map(|(s, &p)| {
                    let mut s = s.clone();
                    if p != START {
                        s.push(p);
                    }
                    let probs = (self.table)(&s);
                    (probs.iter().map(|p| p.ln()).collect(), s)
                })
                .collect())
        }
    }

    const A: usize = 4;
    const B: usize = 5;

    fn toy(prefix: &[usize]) -> Vec<f64> {
        let mut p = vec![0.0; 6];
        match prefix {
            [] => {
                p[A] = 0.6;
                p[B] = 0.4;
            }
            [A] => {
                p[END] = 0.3;
                p[A] = 0.35;
                p[B] = 0.35;
            }
            [B] => {
                p[END] = 0.9;
                p[A] = 0.05;
                p[B] = 0.05;
            }
            _ => p[END] = 1.0,
        }
        p
    }

    #[test]
    fn toy_beam_prefers_likelier_short_caption() {
        let s = TableScorer { vocab: 6, table: toy };
        let top = beam_search(&s, 0, 2, 5).unwrap();
        assert_eq!(top[0].tokens, vec![B]);
        assert!((top[0].log_prob - 0.36f64.ln()).abs() < 1e-12);
        assert!(top[0].finished);
        // Greedy commits to A first.
        assert_eq!(greedy_decode(&s, 5).unwrap(), vec![A, A]);
        assert_eq!(beam_search(&s, 0, 1, 5).unwrap()[0].tokens, vec![A, A]);
    }

    #[test]
    fn greedy_ties_take_lowest_id_and_skip_reserved() {
        let s = TableScorer {
            vocab: 6,
            table: |prefix| {
                if prefix.is_empty() {
                    vec![0.3, 0.3, 0.0, 0.0, 0.2, 0.2]
                } else {
                    vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
                }
            },
        };
        assert_eq!(greedy_decode(&s, 4).unwrap(), vec![4]);
    }

    #[test]
    fn max_len_caps_open_hypotheses() {
        let s = TableScorer {
            vocab: 5,
            table: |_| vec![0.0, 0.0, 0.0, 0.0, 1.0],
        };
        assert_eq!(greedy_decode(&s, 3).unwrap(), vec![4, 4, 4]);
        let b = beam_search(&s, 0, 3, 3).unwrap();
        assert_eq!(b[0].tokens, vec![4, 4, 4]);
        assert!(!b[0].finished);
        assert!(beam_search(&s, 0, 0, 3).is_err());
        assert!(greedy_decode(&s, 0).is_err());
    }
}
