use crate::cells::{attentive_lstm_step, AnnotationSet, Attention, LstmState, LstmUnit, Prepared};
use crate::corpus::{END, PAD, START};
use crate::error::{Error, Result};
use crate::numerics::{dropout, softmax_in_place, Bound, Graph, ParamId, ParamSet, Rng, Tensor, Var};

use super::config::{Ablation, ModelConfig};

/// Features of one encoder view: a global vector and `k` annotation rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures {
    pub global: Vec<f64>,
    pub annotations: Tensor,
}

/// Output of all `M` encoders for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub views: Vec<ViewFeatures>,
}

impl EncoderOutput {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::invalid("encoder output has no views"));
        }
        for (m, v) in self.views.iter().enumerate() {
            if v.annotations.rows() == 0 {
                return Err(Error::invalid(format!("view {m} has no annotation vectors")));
            }
            if v.global.len() != v.annotations.cols() {
                return Err(Error::ShapeMismatch {
                    kind: "encoder output",
                    left: [1, v.global.len()],
                    right: v.annotations.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Dropout setting for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    pub training: bool,
    pub dropout: f64,
}

impl Mode {
    pub fn eval() -> Self {
        Mode {
            training: false,
            dropout: 0.0,
        }
    }

    pub fn train(dropout: f64) -> Self {
        Mode {
            training: true,
            dropout,
        }
    }
}

/// Number of distinct LSTM units and attention models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Census {
    pub lstm_units: usize,
    pub attention_models: usize,
}

impl Census {
    /// Counts implied by the configuration alone.
    pub fn expected(m: usize, t1: usize, t2: usize, ablation: Ablation) -> Census {
        match ablation {
            Ablation::Full | Ablation::NoInteraction => Census {
                lstm_units: m * t1 + t2 + 1,
                attention_models: m * t1 + t2 * m + 1,
            },
            Ablation::NoStageII => Census {
                lstm_units: m * t1 + 1,
                attention_models: m * t1 + m,
            },
            Ablation::NoStageI => Census {
                lstm_units: t2 + 1,
                attention_models: t2 * m + 1,
            },
        }
    }
}

#[derive(Clone, Debug)]
struct ReviewStep {
    lstm: LstmUnit,
    attention: Attention,
}

#[derive(Clone, Debug)]
struct MultiStep {
    lstm: LstmUnit,
    attentions: Vec<Attention>,
}

#[derive(Clone, Debug)]
enum InitProjection {
    PerView(Vec<ParamId>),
    Joint(ParamId),
}

/// Per-view inputs placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ViewInputs {
    pub global: Var,
    pub annotations: AnnotationSet,
}

/// Thought vectors exposed to discriminative supervision. `b[m][t]` and
/// `c[t]` are `B × s`; either list is empty when its stage is ablated.
#[derive(Clone, Debug, Default)]
pub struct ThoughtVectors {
    pub b: Vec<Vec<Var>>,
    pub c: Vec<Var>,
}

impl ThoughtVectors {
    pub fn sets(&self) -> Vec<&[Var]> {
        let mut out: Vec<&[Var]> = Vec::new();
        if !self.c.is_empty() {
            out.push(&self.c);
        }
        out.extend(self.b.iter().map(Vec::as_slice));
        out
    }
}

/// Result of the fusion procedure for a batch.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub thoughts: ThoughtVectors,
    pub decoder_sets: Vec<AnnotationSet>,
    pub init: LstmState,
}

/// Loss switches for one training batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub lambda: f64,
    pub lsr: f64,
    pub ss_prob: f64,
    /// When false the discriminative branch is never built.
    pub discriminative: bool,
}

/// Graph nodes of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub xe: Var,
    pub disc: Option<Var>,
}

/// A training batch: encoder outputs, one caption each (with START and
/// END) and the caption's frequent-word index set.
#[derive(Clone, Debug)]
pub struct TrainBatch<'a> {
    pub encoders: Vec<&'a EncoderOutput>,
    pub captions: Vec<&'a [usize]>,
    pub frequent: Vec<Vec<usize>>,
}

/// Captions drawn from the model inside a differentiable graph.
#[derive(Clone, Debug)]
pub struct SampledCaptions {
    /// Word ids per example, END excluded.
    pub tokens: Vec<Vec<usize>>,
    /// Whether each caption was closed by END within the length limit.
    pub finished: Vec<bool>,
    steps: Vec<(Var, Vec<usize>, Vec<bool>)>,
}

/// Numeric decoder inputs for a set of examples, detached from any graph.
#[derive(Clone, Debug)]
pub struct DecoderContext {
    /// One `(rows·T_j) × w_j` tensor per decoder attention, with `T_j`.
    pub sets: Vec<(Tensor, usize)>,
    pub h: Tensor,
    pub c: Tensor,
}

impl DecoderContext {
    pub fn examples(&self) -> usize {
        self.h.rows()
    }

    /// Context rows for the listed examples (repeats allowed).
    pub fn select(&self, examples: &[usize]) -> DecoderContext {
        let sets = self
            .sets
            .iter()
            .map(|(t, per)| {
                let mut data = Vec::with_capacity(examples.len() * per * t.cols());
                for &e in examples {
                    for r in e * per..(e + 1) * per {
                        data.extend_from_slice(t.row_slice(r));
                    }
                }
                (Tensor::new(examples.len() * per, t.cols(), data).expect("sized above"), *per)
            })
            .collect();
        let pick = |t: &Tensor| {
            let mut data = Vec::with_capacity(examples.len() * t.cols());
            for &e in examples {
                data.extend_from_slice(t.row_slice(e));
            }
            Tensor::new(examples.len(), t.cols(), data).expect("sized above")
        };
        DecoderContext {
            sets,
            h: pick(&self.h),
            c: pick(&self.c),
        }
    }
}

/// The recurrent fusion captioning model.
#[derive(Clone, Debug)]
pub struct RfNet {
    config: ModelConfig,
    pub params: ParamSet,
    active: Vec<usize>,
    init: InitProjection,
    /// `stage1[m][t]`
    stage1: Vec<Vec<ReviewStep>>,
    stage2: Vec<MultiStep>,
    decoder: MultiStep,
    embed: ParamId,
    out_weight: ParamId,
    out_bias: ParamId,
    disc: ParamId,
}

impl RfNet {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let f = &config.fusion;
        let active = f.active_views();
        let m_count = active.len();
        let dims: Vec<usize> = active.iter().map(|&v| config.view_dims[v]).collect();
        let s = f.hidden;
        let a = config.attention;
        let sc = config.init_scale;
        let mut params = ParamSet::new();

        let init = if f.ablation.has_stage1() {
            let mut ids = Vec::with_capacity(m_count);
            for (m, &d) in dims.iter().enumerate() {
                ids.push(params.insert_uniform(format!("init.v{m}"), d, s, sc, rng)?);
            }
            InitProjection::PerView(ids)
        } else {
            let total: usize = dims.iter().sum();
            InitProjection::Joint(params.insert_uniform("init.joint", total, s, sc, rng)?)
        };

        let mut stage1 = Vec::new();
        if f.ablation.has_stage1() {
            let interaction = f.ablation != Ablation::NoInteraction;
            let input_width = if interaction { (m_count - 1) * s } else { 0 };
            for (m, &d) in dims.iter().enumerate() {
                let mut steps = Vec::with_capacity(f.t1);
                for t in 0..f.t1 {
                    let prefix = format!("stage1.v{m}.t{t}");
                    let lstm = LstmUnit::new(&mut params, &format!("{prefix}.lstm"), input_width, d, s, sc, rng)?;
                    let attention = Attention::new(&mut params, &format!("{prefix}.att"), d, s, a, sc, rng)?;
                    steps.push(ReviewStep { lstm, attention });
                }
                stage1.push(steps);
            }
        }

        // Widths of the sets attended by stage II (or by the decoder without it).
        let fused_widths: Vec<usize> = if f.ablation.has_stage1() {
            vec![s; m_count]
        } else {
            dims.clone()
        };

        let mut stage2 = Vec::new();
        if f.ablation.has_stage2() {
            let ctx: usize = fused_widths.iter().sum();
            for t in 0..f.t2 {
                let prefix = format!("stage2.t{t}");
                let lstm = LstmUnit::new(&mut params, &format!("{prefix}.lstm"), 0, ctx, s, sc, rng)?;
                let mut attentions = Vec::with_capacity(m_count);
                for (m, &w) in fused_widths.iter().enumerate() {
                    attentions.push(Attention::new(&mut params, &format!("{prefix}.v{m}.att"), w, s, a, sc, rng)?);
                }
                stage2.push(MultiStep { lstm, attentions });
            }
        }

        let decoder_widths = if f.ablation.has_stage2() { vec![s] } else { fused_widths };
        let ctx: usize = decoder_widths.iter().sum();
        let lstm = LstmUnit::new(&mut params, "decoder.lstm", config.embed, ctx, s, sc, rng)?;
        let mut attentions = Vec::with_capacity(decoder_widths.len());
        for (j, &w) in decoder_widths.iter().enumerate() {
            let name = if decoder_widths.len() == 1 {
                "decoder.att".to_string()
            } else {
                format!("decoder.v{j}.att")
            };
            attentions.push(Attention::new(&mut params, &name, w, s, a, sc, rng)?);
        }
        let decoder = MultiStep { lstm, attentions };

        let embed = params.insert_uniform("embed", config.vocab_size, config.embed, sc, rng)?;
        let out_weight = params.insert_uniform("out.weight", s, config.vocab_size, sc, rng)?;
        let out_bias = params.insert_uniform("out.bias", 1, config.vocab_size, sc, rng)?;
        let disc = params.insert_uniform("disc.weight", s, config.n_frequent, sc, rng)?;

        let model = RfNet {
            config,
            params,
            active,
            init,
            stage1,
            stage2,
            decoder,
            embed,
            out_weight,
            out_bias,
            disc,
        };
        let f = &model.config.fusion;
        let expected = Census::expected(m_count, f.t1, f.t2, f.ablation);
        if model.census() != expected {
            return Err(Error::invalid(format!(
                "constructed {:?}, configuration implies {:?}",
                model.census(),
                expected
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Number of views the model fuses.
    pub fn view_count(&self) -> usize {
        self.active.len()
    }

    pub fn census(&self) -> Census {
        let stage1_units: usize = self.stage1.iter().map(Vec::len).sum();
        let stage2_att: usize = self.stage2.iter().map(|s| s.attentions.len()).sum();
        Census {
            lstm_units: stage1_units + self.stage2.len() + 1,
            attention_models: stage1_units + stage2_att + self.decoder.attentions.len(),
        }
    }

    pub fn output_bias(&self) -> ParamId {
        self.out_bias
    }

    pub fn output_weight(&self) -> ParamId {
        self.out_weight
    }

    pub fn discriminative_weight(&self) -> ParamId {
        self.disc
    }

    /// Place the active views of a batch on the graph.
    pub fn inputs(&self, g: &mut Graph<'_>, batch: &[&EncoderOutput]) -> Result<Vec<ViewInputs>> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for enc in batch {
            if enc.views.len() != self.config.fusion.views {
                return Err(Error::ViewCountMismatch {
                    expected: self.config.fusion.views,
                    actual: enc.views.len(),
                });
            }
            enc.validate()?;
        }
        let mut out = Vec::with_capacity(self.active.len());
        for &v in &self.active {
            let d = self.config.view_dims[v];
            let k = batch[0].views[v].annotations.rows();
            let mut globals = Vec::with_capacity(batch.len() * d);
            let mut rows = Vec::with_capacity(batch.len() * k * d);
            for enc in batch {
                let view = &enc.views[v];
                if view.global.len() != d || view.annotations.rows() != k {
                    return Err(Error::ShapeMismatch {
                        kind: "encoder output",
                        left: view.annotations.shape(),
                        right: [k, d],
                    });
                }
                globals.extend_from_slice(&view.global);
                rows.extend_from_slice(view.annotations.data());
            }
            let global = g.constant(Tensor::new(batch.len(), d, globals)?);
            let ann = g.constant(Tensor::new(batch.len() * k, d, rows)?);
            out.push(ViewInputs {
                global,
                annotations: AnnotationSet::new(g, ann, k)?,
            });
        }
        Ok(out)
    }

    fn regularize(&self, g: &mut Graph<'_>, state: LstmState, mode: Mode, rng: &mut Rng) -> Result<LstmState> {
        let h = dropout(g, state.h, mode.dropout, mode.training, rng)?;
        Ok(LstmState { h, c: state.c })
    }

    /// Stage I: `M` review components updated synchronously for `T1` steps.
    /// Returns the thought vectors `B[m][t]` and the final state of each
    /// component.
    pub fn run_stage1(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        views: &[ViewInputs],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Vec<Vec<Var>>, Vec<LstmState>)> {
        let InitProjection::PerView(init) = &self.init else {
            return Err(Error::invalid("stage I is ablated in this model"));
        };
        if views.len() != self.active.len() {
            return Err(Error::ViewCountMismatch {
                expected: self.active.len(),
                actual: views.len(),
            });
        }
        let m_count = views.len();
        let mut fed = Vec::with_capacity(m_count);
        for (view, &w) in views.iter().zip(init) {
            let h = g.matmul(view.global, p[w])?;
            fed.push(LstmState { h, c: h });
        }
        let interaction = self.config.fusion.ablation != Ablation::NoInteraction && m_count > 1;
        let mut b = vec![Vec::with_capacity(self.config.fusion.t1); m_count];
        let mut raw = fed.clone();
        for t in 0..self.config.fusion.t1 {
            for m in 0..m_count {
                let x = if interaction {
                    let others: Vec<Var> = (0..m_count).filter(|&j| j != m).map(|j| fed[j].h).collect();
                    Some(g.concat_cols(&others)?)
                } else {
                    None
                };
                let step = &self.stage1[m][t];
                let prep = step.attention.prepare(g, p, views[m].annotations)?;
                raw[m] = attentive_lstm_step(g, p, &step.lstm, &step.attention, fed[m], x, &prep)?;
                b[m].push(raw[m].h);
            }
            for m in 0..m_count {
                fed[m] = self.regularize(g, raw[m], mode, rng)?;
            }
        }
        Ok((b, raw))
    }

    /// Stage II: `T2` steps, each reading every set through its own
    /// attention model. Returns `C` and the final (undropped) state.
    pub fn run_stage2(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        sets: &[AnnotationSet],
        init: LstmState,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Vec<Var>, LstmState)> {
        if self.stage2.is_empty() {
            return Err(Error::invalid("stage II is ablated in this model"));
        }
        if sets.is_empty() {
            return Err(Error::invalid("stage II needs at least one set to attend"));
        }
        if sets.len() != self.active.len() {
            return Err(Error::ViewCountMismatch {
                expected: self.active.len(),
                actual: sets.len(),
            });
        }
        let mut state = init;
        let mut last = init;
        let mut c = Vec::with_capacity(self.stage2.len());
        for step in &self.stage2 {
            let mut parts = Vec::with_capacity(sets.len());
            for (att, &set) in step.attentions.iter().zip(sets) {
                let prep = att.prepare(g, p, set)?;
                parts.push(att.attend(g, p, &prep, state.h)?.0);
            }
            let z = concat(g, &parts)?;
            last = step.lstm.step(g, p, state, None, z)?;
            c.push(last.h);
            state = self.regularize(g, last, mode, rng)?;
        }
        Ok((c, last))
    }

    /// Fusion stages for a batch of encoder outputs.
    pub fn fuse(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        batch: &[&EncoderOutput],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Fusion> {
        let views = self.inputs(g, batch)?;
        match self.config.fusion.ablation {
            Ablation::NoStageI => {
                let InitProjection::Joint(w) = self.init else {
                    unreachable!("joint projection exists without stage I")
                };
                let globals: Vec<Var> = views.iter().map(|v| v.global).collect();
                let joint = concat(g, &globals)?;
                let h = g.matmul(joint, p[w])?;
                let sets: Vec<AnnotationSet> = views.iter().map(|v| v.annotations).collect();
                let (c, last) = self.run_stage2(g, p, &sets, LstmState { h, c: h }, mode, rng)?;
                let decoder_sets = vec![AnnotationSet::from_states(g, &c)?];
                Ok(Fusion {
                    thoughts: ThoughtVectors { b: Vec::new(), c },
                    decoder_sets,
                    init: last,
                })
            }
            Ablation::NoStageII => {
                let (b, finals) = self.run_stage1(g, p, &views, mode, rng)?;
                let init = init_stage2(g, &finals)?;
                let decoder_sets = b
                    .iter()
                    .map(|states| AnnotationSet::from_states(g, states))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Fusion {
                    thoughts: ThoughtVectors { b, c: Vec::new() },
                    decoder_sets,
                    init,
                })
            }
            Ablation::Full | Ablation::NoInteraction => {
                let (b, finals) = self.run_stage1(g, p, &views, mode, rng)?;
                let init = init_stage2(g, &finals)?;
                let sets = b
                    .iter()
                    .map(|states| AnnotationSet::from_states(g, states))
                    .collect::<Result<Vec<_>>>()?;
                let (c, last) = self.run_stage2(g, p, &sets, init, mode, rng)?;
                let decoder_sets = vec![AnnotationSet::from_states(g, &c)?];
                Ok(Fusion {
                    thoughts: ThoughtVectors { b, c },
                    decoder_sets,
                    init: last,
                })
            }
        }
    }

    /// Project the decoder's attention sets once per forward pass.
    pub fn prepare_decoder(&self, g: &mut Graph<'_>, p: &Bound, sets: &[AnnotationSet]) -> Result<Vec<Prepared>> {
        if sets.len() != self.decoder.attentions.len() {
            return Err(Error::invalid(format!(
                "decoder expects {} attention sets, got {}",
                self.decoder.attentions.len(),
                sets.len()
            )));
        }
        self.decoder
            .attentions
            .iter()
            .zip(sets)
            .map(|(att, &set)| att.prepare(g, p, set))
            .collect()
    }

    /// One decoder step on the previous tokens. Returns the state to feed
    /// into the next step and the `B × V` logits.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_step(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        prepared: &[Prepared],
        state: LstmState,
        tokens: &[usize],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(LstmState, Var)> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidCaption(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let x = g.gather_rows(p[self.embed], tokens)?;
        let mut parts = Vec::with_capacity(prepared.len());
        for (att, prep) in self.decoder.attentions.iter().zip(prepared) {
            parts.push(att.attend(g, p, prep, state.h)?.0);
        }
        let z = concat(g, &parts)?;
        let raw = self.decoder.lstm.step(g, p, state, Some(x), z)?;
        let next = self.regularize(g, raw, mode, rng)?;
        let logits = g.matmul(next.h, p[self.out_weight])?;
        let logits = g.add(logits, p[self.out_bias])?;
        Ok((next, logits))
    }

    fn check_captions(&self, captions: &[&[usize]]) -> Result<()> {
        for cap in captions {
            if cap.len() < 2 {
                return Err(Error::InvalidCaption(format!("caption of {} tokens is too short", cap.len())));
            }
            if cap[0] != START || cap[cap.len() - 1] != END {
                return Err(Error::InvalidCaption("caption must start with START and end with END".into()));
            }
            if let Some(&bad) = cap.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::InvalidCaption(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Mean per-token cross-entropy of the captions under teacher forcing,
    /// with scheduled sampling at rate `ss_prob` and label smoothing `lsr`.
    #[allow(clippy::too_many_arguments)]
    pub fn xe_loss(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        fusion: &Fusion,
        captions: &[&[usize]],
        ss_prob: f64,
        lsr: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.check_captions(captions)?;
        if !(0.0..=1.0).contains(&ss_prob) {
            return Err(Error::invalid(format!("scheduled sampling probability {ss_prob} outside [0, 1]")));
        }
        let batch = g.shape(fusion.init.h)[0];
        if captions.len() != batch {
            return Err(Error::invalid(format!("{} captions for a batch of {batch}", captions.len())));
        }
        let len = captions.iter().map(|c| c.len()).max().unwrap_or(0);
        let targets: usize = captions.iter().map(|c| c.len() - 1).sum();
        let unit = 1.0 / targets as f64;
        let prepared = self.prepare_decoder(g, p, &fusion.decoder_sets)?;
        let mut state = fusion.init;
        let mut prev_logits: Option<Var> = None;
        let mut total: Option<Var> = None;
        for t in 0..len - 1 {
            let mut tokens: Vec<usize> = captions.iter().map(|c| c.get(t).copied().unwrap_or(PAD)).collect();
            if let (Some(prev), true) = (prev_logits, ss_prob > 0.0) {
                let logits = g.value(prev);
                for (b, tok) in tokens.iter_mut().enumerate() {
                    if rng.uniform() < ss_prob {
                        let mut probs = logits.row_slice(b).to_vec();
                        softmax_in_place(&mut probs);
                        *tok = rng.categorical(&probs);
                    }
                }
            }
            let (next, logits) = self.decoder_step(g, p, &prepared, state, &tokens, mode, rng)?;
            let gold: Vec<usize> = captions.iter().map(|c| c.get(t + 1).copied().unwrap_or(PAD)).collect();
            let weights: Vec<f64> = captions.iter().map(|c| if t + 1 < c.len() { unit } else { 0.0 }).collect();
            let ce = g.cross_entropy(logits, &gold, lsr, &weights)?;
            let step_loss = g.sum(ce);
            total = Some(match total {
                Some(acc) => g.add(acc, step_loss)?,
                None => step_loss,
            });
            state = next;
            prev_logits = Some(logits);
        }
        Ok(total.expect("captions have at least two tokens"))
    }

    /// Row-wise max over the thought vectors of `W_disc`-projected scores:
    /// a `B × n_frequent` matrix.
    pub fn discriminative_scores(&self, g: &mut Graph<'_>, p: &Bound, vectors: &[Var]) -> Result<Var> {
        let (first, rest) = vectors
            .split_first()
            .ok_or_else(|| Error::invalid("discriminative scores need at least one thought vector"))?;
        let mut best = g.matmul(*first, p[self.disc])?;
        for &v in rest {
            let s = g.matmul(v, p[self.disc])?;
            best = g.maximum(best, s)?;
        }
        Ok(best)
    }

    /// Sum over thought-vector sets of the batch-mean margin loss, together
    /// with the number of sets.
    pub fn discriminative_loss(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        thoughts: &ThoughtVectors,
        frequent: &[Vec<usize>],
    ) -> Result<(Var, usize)> {
        let sets = thoughts.sets();
        let mut total: Option<Var> = None;
        for set in &sets {
            let scores = self.discriminative_scores(g, p, set)?;
            let margins = g.margin_rank(scores, frequent)?;
            let mean = g.mean(margins)?;
            total = Some(match total {
                Some(acc) => g.add(acc, mean)?,
                None => mean,
            });
        }
        let total = total.ok_or_else(|| Error::invalid("no thought vectors to supervise"))?;
        Ok((total, sets.len()))
    }

    /// Training objective `L + λ/(#sets)·Σ L_d` for one batch.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        batch: &TrainBatch<'_>,
        opts: LossOptions,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<LossParts> {
        if opts.lambda < 0.0 {
            return Err(Error::invalid("discriminative weight must be non-negative"));
        }
        let fusion = self.fuse(g, p, &batch.encoders, mode, rng)?;
        let xe = self.xe_loss(g, p, &fusion, &batch.captions, opts.ss_prob, opts.lsr, mode, rng)?;
        if !opts.discriminative {
            return Ok(LossParts {
                total: xe,
                xe,
                disc: None,
            });
        }
        if batch.frequent.len() != batch.encoders.len() {
            return Err(Error::invalid("one frequent-word set per example is required"));
        }
        let (disc, count) = self.discriminative_loss(g, p, &fusion.thoughts, &batch.frequent)?;
        let weighted = g.scale(disc, opts.lambda / count as f64);
        let total = g.add(xe, weighted)?;
        Ok(LossParts {
            total,
            xe,
            disc: Some(disc),
        })
    }

    /// Draw one caption per example from the model's step distributions,
    /// keeping the logits on the graph for the policy-gradient loss.
    pub fn sample(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        fusion: &Fusion,
        max_len: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<SampledCaptions> {
        let batch = g.shape(fusion.init.h)[0];
        let prepared = self.prepare_decoder(g, p, &fusion.decoder_sets)?;
        let mut state = fusion.init;
        let mut prev = vec![START; batch];
        let mut alive = vec![true; batch];
        let mut tokens = vec![Vec::new(); batch];
        let mut steps = Vec::new();
        for _ in 0..max_len {
            if !alive.iter().any(|&a| a) {
                break;
            }
            let (next, logits) = self.decoder_step(g, p, &prepared, state, &prev, mode, rng)?;
            let values = g.value(logits);
            let mut drawn = Vec::with_capacity(batch);
            for b in 0..batch {
                let mut probs = values.row_slice(b).to_vec();
                softmax_in_place(&mut probs);
                let tok = if alive[b] { rng.categorical(&probs) } else { END };
                drawn.push(tok);
            }
            steps.push((logits, drawn.clone(), alive.clone()));
            for b in 0..batch {
                if alive[b] {
                    if drawn[b] == END {
                        alive[b] = false;
                    } else {
                        tokens[b].push(drawn[b]);
                    }
                }
            }
            prev = drawn;
            state = next;
        }
        let finished = alive.iter().map(|&a| !a).collect();
        Ok(SampledCaptions {
            tokens,
            finished,
            steps,
        })
    }

    /// Rebuild the graph of a previous [`RfNet::sample`] call for fixed
    /// captions, so the policy loss can be re-evaluated at other parameters.
    pub fn replay(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        fusion: &Fusion,
        tokens: &[Vec<usize>],
        finished: &[bool],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<SampledCaptions> {
        let batch = g.shape(fusion.init.h)[0];
        if tokens.len() != batch || finished.len() != batch {
            return Err(Error::invalid(format!("replay of {} captions for a batch of {batch}", tokens.len())));
        }
        let seqs: Vec<Vec<usize>> = tokens
            .iter()
            .zip(finished)
            .map(|(t, &f)| {
                let mut s = t.clone();
                if f {
                    s.push(END);
                }
                s
            })
            .collect();
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let prepared = self.prepare_decoder(g, p, &fusion.decoder_sets)?;
        let mut state = fusion.init;
        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let prev: Vec<usize> = seqs
                .iter()
                .map(|s| if t == 0 { START } else { s.get(t - 1).copied().unwrap_or(END) })
                .collect();
            let (next, logits) = self.decoder_step(g, p, &prepared, state, &prev, mode, rng)?;
            let drawn = seqs.iter().map(|s| s.get(t).copied().unwrap_or(END)).collect();
            let alive = seqs.iter().map(|s| t < s.len()).collect();
            steps.push((logits, drawn, alive));
            state = next;
        }
        Ok(SampledCaptions {
            tokens: tokens.to_vec(),
            finished: finished.to_vec(),
            steps,
        })
    }

    /// `−(1/B) Σ_b r_b Σ_t log p(y_bt)` over the sampled tokens.
    pub fn policy_loss(&self, g: &mut Graph<'_>, sampled: &SampledCaptions, rewards: &[f64]) -> Result<Var> {
        let batch = sampled.tokens.len();
        if rewards.len() != batch {
            return Err(Error::invalid(format!("{} rewards for {batch} samples", rewards.len())));
        }
        let mut total: Option<Var> = None;
        for (logits, drawn, alive) in &sampled.steps {
            let weights: Vec<f64> = (0..batch)
                .map(|b| if alive[b] { rewards[b] / batch as f64 } else { 0.0 })
                .collect();
            let ce = g.cross_entropy(*logits, drawn, 0.0, &weights)?;
            let s = g.sum(ce);
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        match total {
            Some(t) => Ok(t),
            None => Ok(g.constant(Tensor::scalar(0.0))),
        }
    }

    /// Evaluation-mode fusion for a batch, detached into plain tensors.
    pub fn decoder_context(&self, batch: &[&EncoderOutput]) -> Result<DecoderContext> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let mut rng = Rng::new(0);
        let fusion = self.fuse(&mut g, &p, batch, Mode::eval(), &mut rng)?;
        let sets = fusion
            .decoder_sets
            .iter()
            .map(|s| (g.value(s.rows).clone(), s.per_example))
            .collect();
        Ok(DecoderContext {
            sets,
            h: g.value(fusion.init.h).clone(),
            c: g.value(fusion.init.c).clone(),
        })
    }

    /// Evaluation-mode decoder step on detached tensors, one row per
    /// context example. Returns `(logits, h, c)`.
    pub fn decode_values(
        &self,
        ctx: &DecoderContext,
        h: &Tensor,
        c: &Tensor,
        prev: &[usize],
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let mut sets = Vec::with_capacity(ctx.sets.len());
        for (t, per) in &ctx.sets {
            let rows = g.borrowed(t, false);
            sets.push(AnnotationSet::new(&g, rows, *per)?);
        }
        let prepared = self.prepare_decoder(&mut g, &p, &sets)?;
        let state = LstmState {
            h: g.borrowed(h, false),
            c: g.borrowed(c, false),
        };
        let mut rng = Rng::new(0);
        let (next, logits) = self.decoder_step(&mut g, &p, &prepared, state, prev, Mode::eval(), &mut rng)?;
        Ok((g.value(logits).clone(), g.value(next.h).clone(), g.value(next.c).clone()))
    }
}

fn concat(g: &mut Graph<'_>, parts: &[Var]) -> Result<Var> {
    match parts {
        [one] => Ok(*one),
        _ => g.concat_cols(parts),
    }
}

/// Average of the final stage-I states.
pub fn init_stage2(g: &mut Graph<'_>, finals: &[LstmState]) -> Result<LstmState> {
    let (first, rest) = finals
        .split_first()
        .ok_or_else(|| Error::invalid("stage II initialization needs at least one state"))?;
    if rest.is_empty() {
        return Ok(*first);
    }
    let mut h = first.h;
    let mut c = first.c;
    for s in rest {
        h = g.add(h, s.h)?;
        c = g.add(c, s.c)?;
    }
    let inv = 1.0 / finals.len() as f64;
    Ok(LstmState {
        h: g.scale(h, inv),
        c: g.scale(c, inv),
    })
}

/// `L + λ/(n)·Σ terms` where `n` is the number of discriminative terms.
pub fn combine_losses(xe: f64, disc_terms: &[f64], lambda: f64) -> f64 {
    if disc_terms.is_empty() {
        return xe;
    }
    xe + lambda / disc_terms.len() as f64 * disc_terms.iter().sum::<f64>()
}
