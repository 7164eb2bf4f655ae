//! Soft attention over an annotation set and the gated LSTM transition.
//!
//! Everything works on row batches: a hidden state is `B × s`, and an
//! annotation set for `B` examples with `k` annotations each is stored as a
//! `(B·k) × d` matrix whose rows `b·k .. b·k + k` belong to example `b`.

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamId, ParamSet, Rng, Var};

/// Hidden state and memory cell.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// `k` annotation vectors of width `d` per example, stacked as `(B·k) × d`.
#[derive(Clone, Copy, Debug)]
pub struct AnnotationSet {
    pub rows: Var,
    pub per_example: usize,
}

impl AnnotationSet {
    pub fn new(g: &Graph<'_>, rows: Var, per_example: usize) -> Result<Self> {
        if per_example == 0 {
            return Err(Error::invalid("annotation set must hold at least one vector"));
        }
        if g.shape(rows)[0] % per_example != 0 {
            return Err(Error::invalid(format!(
                "{} annotation rows are not a multiple of {per_example}",
                g.shape(rows)[0]
            )));
        }
        Ok(AnnotationSet { rows, per_example })
    }

    /// Wraps a list of `T` states (`B × s` each) as a set of `T` thought vectors.
    pub fn from_states(g: &mut Graph<'_>, states: &[Var]) -> Result<Self> {
        let rows = g.interleave_rows(states)?;
        AnnotationSet::new(g, rows, states.len())
    }

    pub fn width(&self, g: &Graph<'_>) -> usize {
        g.shape(self.rows)[1]
    }

    pub fn batch(&self, g: &Graph<'_>) -> usize {
        g.shape(self.rows)[0] / self.per_example
    }
}

/// Two-layer perceptron scorer `eᵢ = v·tanh(W_a aᵢ + W_h h + b)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub w_ann: ParamId,
    pub w_query: ParamId,
    pub bias: ParamId,
    pub score: ParamId,
    pub ann_width: usize,
    pub query_width: usize,
    pub hidden: usize,
}

/// Annotation set with its query-independent projection `A·W_a` cached.
#[derive(Clone, Copy, Debug)]
pub struct Prepared {
    pub set: AnnotationSet,
    projected: Var,
}

impl Attention {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        ann_width: usize,
        query_width: usize,
        hidden: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Attention {
            w_ann: params.insert_uniform(format!("{prefix}.w_ann"), ann_width, hidden, scale, rng)?,
            w_query: params.insert_uniform(format!("{prefix}.w_query"), query_width, hidden, scale, rng)?,
            bias: params.insert_uniform(format!("{prefix}.bias"), 1, hidden, scale, rng)?,
            score: params.insert_uniform(format!("{prefix}.score"), hidden, 1, scale, rng)?,
            ann_width,
            query_width,
            hidden,
        })
    }

    pub fn prepare(&self, g: &mut Graph<'_>, p: &Bound, set: AnnotationSet) -> Result<Prepared> {
        let w = set.width(g);
        if w != self.ann_width {
            return Err(Error::ShapeMismatch {
                kind: "attend",
                left: [set.per_example, w],
                right: [self.ann_width, self.hidden],
            });
        }
        let projected = g.matmul(set.rows, p[self.w_ann])?;
        Ok(Prepared { set, projected })
    }

    /// Raw scores `e` as a `B × k` matrix.
    pub fn scores(&self, g: &mut Graph<'_>, p: &Bound, ann: &Prepared, query: Var) -> Result<Var> {
        let q = g.shape(query);
        let batch = ann.set.batch(g);
        if q[1] != self.query_width || q[0] != batch {
            return Err(Error::ShapeMismatch {
                kind: "attend",
                left: q,
                right: [batch, self.query_width],
            });
        }
        let k = ann.set.per_example;
        let qp = g.matmul(query, p[self.w_query])?;
        let qp = g.add(qp, p[self.bias])?;
        let qp = g.repeat_rows(qp, k)?;
        let pre = g.add(ann.projected, qp)?;
        let act = g.tanh(pre);
        let e = g.matmul(act, p[self.score])?;
        g.reshape(e, batch, k)
    }

    /// Context `z = Σ αᵢ aᵢ` with `α = softmax(e)`. Returns `(z, α)`.
    pub fn attend(&self, g: &mut Graph<'_>, p: &Bound, ann: &Prepared, query: Var) -> Result<(Var, Var)> {
        let e = self.scores(g, p, ann, query)?;
        pool_with_scores(g, ann.set, e)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w_ann, self.w_query, self.bias, self.score]
    }
}

/// `α = softmax(e)` and `z = Σ αᵢ aᵢ` for externally supplied scores.
pub fn pool_with_scores(g: &mut Graph<'_>, set: AnnotationSet, scores: Var) -> Result<(Var, Var)> {
    let alpha = g.softmax(scores)?;
    let z = g.attention_pool(alpha, set.rows)?;
    Ok((z, alpha))
}

/// LSTM unit whose linear map `T` consumes `concat(x, h_prev, z)` and emits
/// the four gate pre-activations in the order (i, f, o, g).
#[derive(Clone, Debug)]
pub struct LstmUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_width: usize,
    pub context_width: usize,
    pub hidden: usize,
}

impl LstmUnit {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        input_width: usize,
        context_width: usize,
        hidden: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("hidden size must be positive"));
        }
        let fan_in = input_width + hidden + context_width;
        Ok(LstmUnit {
            weight: params.insert_uniform(format!("{prefix}.weight"), fan_in, 4 * hidden, scale, rng)?,
            bias: params.insert_uniform(format!("{prefix}.bias"), 1, 4 * hidden, scale, rng)?,
            input_width,
            context_width,
            hidden,
        })
    }

    /// One gated transition. `x` must be `None` exactly when the declared
    /// input width is zero.
    pub fn step(&self, g: &mut Graph<'_>, p: &Bound, state: LstmState, x: Option<Var>, z: Var) -> Result<LstmState> {
        let s = self.hidden;
        let hs = g.shape(state.h);
        if hs[1] != s || g.shape(state.c) != hs {
            return Err(Error::ShapeMismatch {
                kind: "lstm_step",
                left: hs,
                right: [hs[0], s],
            });
        }
        let zs = g.shape(z);
        if zs != [hs[0], self.context_width] {
            return Err(Error::ShapeMismatch {
                kind: "lstm_step",
                left: zs,
                right: [hs[0], self.context_width],
            });
        }
        let mut parts = Vec::with_capacity(3);
        match x {
            Some(x) => {
                let xs = g.shape(x);
                if xs != [hs[0], self.input_width] {
                    return Err(Error::ShapeMismatch {
                        kind: "lstm_step",
                        left: xs,
                        right: [hs[0], self.input_width],
                    });
                }
                parts.push(x);
            }
            None if self.input_width == 0 => {}
            None => return Err(Error::invalid(format!("lstm_step: missing input of width {}", self.input_width))),
        }
        parts.push(state.h);
        parts.push(z);
        let input = g.concat_cols(&parts)?;
        let pre = g.matmul(input, p[self.weight])?;
        let pre = g.add(pre, p[self.bias])?;

        let gi = g.slice_cols(pre, 0, s)?;
        let gf = g.slice_cols(pre, s, s)?;
        let go = g.slice_cols(pre, 2 * s, s)?;
        let gg = g.slice_cols(pre, 3 * s, s)?;
        let i = g.sigmoid(gi);
        let f = g.sigmoid(gf);
        let o = g.sigmoid(go);
        let cand = g.tanh(gg);

        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        if !g.value(c).is_finite() || !g.value(h).is_finite() {
            return Err(Error::NonFinite { kind: "lstm_step" });
        }
        Ok(LstmState { h, c })
    }
}

/// `lstm.step(state, x, attend(A, h_prev).z)`, with the previous hidden
/// state as the attention query.
pub fn attentive_lstm_step(
    g: &mut Graph<'_>,
    p: &Bound,
    lstm: &LstmUnit,
    attention: &Attention,
    state: LstmState,
    x: Option<Var>,
    ann: &Prepared,
) -> Result<LstmState> {
    let (z, _) = attention.attend(g, p, ann, state.h)?;
    lstm.step(g, p, state, x, z)
}
