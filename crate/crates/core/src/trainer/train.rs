use std::time::Instant;

use crate::corpus::{frequent_word_set, with_markers, Dataset, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::inference::{caption_images, CiderD};
use crate::numerics::{clip_global_norm, AdamState, Graph, ParamSet, Rng};
use crate::rfnet::{Checkpoint, EncoderOutput, LossOptions, Mode, RfNet, TrainBatch};

use super::log::{EpochRecord, TrainingLog};
use super::schedule::TrainConfig;

/// Training and validation scenes with the vocabulary they are encoded in.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'d> {
    pub train: &'d [Example],
    pub val: &'d [Example],
    pub vocab: &'d Vocabulary,
}

impl<'d> TrainData<'d> {
    pub fn from_dataset(d: &'d Dataset) -> Self {
        TrainData {
            train: &d.train,
            val: &d.val,
            vocab: &d.vocab,
        }
    }
}

/// Loss terms of one cross-entropy batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub total: f64,
    pub xe: f64,
    pub disc: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: Vec<BatchStats>,
}

/// Rewards of one self-critical batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlStats {
    pub loss: f64,
    pub sample_cider: f64,
    pub greedy_cider: f64,
}

/// Model, optimizer and random state of a training run.
pub struct Trainer<'d> {
    pub model: RfNet,
    pub adam: AdamState,
    pub rng: Rng,
    pub config: TrainConfig,
    /// Completed epochs of either kind.
    pub epoch: usize,
    data: TrainData<'d>,
    cider: CiderD<usize>,
}

fn non_finite_as_loss(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

/// Mean CIDEr-D of the captions the model produces for `examples`.
pub fn split_cider(
    model: &RfNet,
    examples: &[Example],
    cider: &CiderD<usize>,
    beam: usize,
    max_len: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot score an empty split"));
    }
    let images: Vec<&EncoderOutput> = examples.iter().map(|e| &e.features).collect();
    let caps = caption_images(model, &images, beam, max_len)?;
    let mut total = 0.0;
    for (c, ex) in caps.iter().zip(examples) {
        total += cider.score(c, &ex.captions)?;
    }
    Ok(total / examples.len() as f64)
}

/// CIDEr-D with document frequencies from the training references.
pub fn training_cider(train: &[Example]) -> Result<CiderD<usize>> {
    let refs: Vec<Vec<Vec<usize>>> = train.iter().map(|e| e.captions.clone()).collect();
    CiderD::new(&refs)
}

/// Mean per-token cross-entropy of every reference caption under teacher
/// forcing, without dropout, smoothing or discriminative terms.
pub fn teacher_forced_xe(model: &RfNet, examples: &[Example]) -> Result<f64> {
    let pairs: Vec<(&EncoderOutput, Vec<usize>)> = examples
        .iter()
        .flat_map(|e| e.captions.iter().map(move |c| (&e.features, with_markers(c))))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("no captions to evaluate"));
    }
    let mut weighted = 0.0;
    let mut tokens = 0usize;
    for chunk in pairs.chunks(50) {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let mut rng = Rng::new(0);
        let images: Vec<&EncoderOutput> = chunk.iter().map(|(f, _)| *f).collect();
        let caps: Vec<&[usize]> = chunk.iter().map(|(_, c)| c.as_slice()).collect();
        let fusion = model.fuse(&mut g, &p, &images, Mode::eval(), &mut rng)?;
        let xe = model.xe_loss(&mut g, &p, &fusion, &caps, 0.0, 0.0, Mode::eval(), &mut rng)?;
        let n: usize = caps.iter().map(|c| c.len() - 1).sum();
        weighted += g.value(xe).data()[0] * n as f64;
        tokens += n;
    }
    Ok(weighted / tokens as f64)
}

impl<'d> Trainer<'d> {
    pub fn new(model: RfNet, data: TrainData<'d>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::invalid("training needs non-empty train and validation splits"));
        }
        if model.config().vocab_size != data.vocab.len() {
            return Err(Error::invalid(format!(
                "model vocabulary of {} entries, dataset vocabulary of {}",
                model.config().vocab_size,
                data.vocab.len()
            )));
        }
        let adam = AdamState::new(&model.params);
        let rng = Rng::new(config.seed);
        Ok(Trainer {
            cider: training_cider(data.train)?,
            model,
            adam,
            rng,
            config,
            epoch: 0,
            data,
        })
    }

    /// Continue from a checkpoint's parameters, optimizer and rng state.
    pub fn resume(ckpt: Checkpoint, data: TrainData<'d>, config: TrainConfig) -> Result<Self> {
        let mut t = Trainer::new(ckpt.model, data, config)?;
        if let Some(adam) = ckpt.adam {
            t.adam = adam;
        }
        if let Some(state) = ckpt.rng {
            t.rng = Rng::from_state(state);
        }
        t.epoch = ckpt.epoch as usize;
        Ok(t)
    }

    pub fn data(&self) -> TrainData<'d> {
        self.data
    }

    pub fn cider(&self) -> &CiderD<usize> {
        &self.cider
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.data.vocab.clone(),
            adam: Some(self.adam.clone()),
            epoch: self.epoch as u64,
            seed: self.config.seed,
            rng: Some(self.rng.state()),
            run_config: String::new(),
        }
    }

    fn mode(&self) -> Mode {
        Mode::train(self.model.config().fusion.dropout)
    }

    fn apply(&mut self, mut grads: Vec<crate::numerics::Tensor>, lr: f64) -> Result<f64> {
        let norm = match self.config.clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => grads.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt(),
        };
        self.adam.step(&mut self.model.params, &grads, lr)?;
        Ok(norm)
    }

    /// One cross-entropy update on `batch`, each scene contributing one of
    /// its references chosen at random. `epoch` selects the learning rate
    /// and scheduled-sampling probability.
    pub fn xe_batch(&mut self, batch: &[&Example], epoch: usize, index: usize) -> Result<BatchStats> {
        let captions: Vec<Vec<usize>> = batch
            .iter()
            .map(|ex| with_markers(&ex.captions[self.rng.below(ex.captions.len())]))
            .collect();
        let n_frequent = self.model.config().n_frequent;
        let tb = TrainBatch {
            encoders: batch.iter().map(|e| &e.features).collect(),
            captions: captions.iter().map(Vec::as_slice).collect(),
            frequent: captions
                .iter()
                .map(|c| frequent_word_set(self.data.vocab, c, n_frequent))
                .collect(),
        };
        let opts = LossOptions {
            lambda: self.config.lambda,
            lsr: self.config.lsr,
            ss_prob: self.config.ss_at(epoch),
            discriminative: self.config.discriminative,
        };
        let mode = self.mode();
        let (stats, grads) = {
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g);
            let parts = self
                .model
                .loss(&mut g, &p, &tb, opts, mode, &mut self.rng)
                .map_err(|e| non_finite_as_loss(e, epoch, index))?;
            let total = g.value(parts.total).data()[0];
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: index });
            }
            let grads = g
                .backward(parts.total)
                .map_err(|e| non_finite_as_loss(e, epoch, index))?;
            let stats = BatchStats {
                total,
                xe: g.value(parts.xe).data()[0],
                disc: parts.disc.map(|d| g.value(d).data()[0]),
                grad_norm: 0.0,
            };
            (stats, self.model.params.collect_grads(&grads, &p))
        };
        let grad_norm = self
            .apply(grads, self.config.lr_at(epoch))
            .map_err(|e| non_finite_as_loss(e, epoch, index))?;
        Ok(BatchStats { grad_norm, ..stats })
    }

    fn shuffled_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        self.rng.shuffle(&mut order);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// One pass over the training scenes in shuffled mini-batches.
    pub fn xe_epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.epoch;
        let data = self.data;
        let mut batches = Vec::new();
        for (i, idx) in self.shuffled_batches().into_iter().enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&j| &data.train[j]).collect();
            batches.push(self.xe_batch(&batch, epoch, i)?);
        }
        self.epoch += 1;
        let mean_loss = batches.iter().map(|b| b.total).sum::<f64>() / batches.len() as f64;
        Ok(EpochStats { mean_loss, batches })
    }

    /// One self-critical update: a sampled caption per scene is rewarded by
    /// its CIDEr-D minus that of the greedy caption.
    pub fn rl_batch(&mut self, batch: &[&Example], index: usize) -> Result<RlStats> {
        let images: Vec<&EncoderOutput> = batch.iter().map(|e| &e.features).collect();
        let greedy = caption_images(&self.model, &images, 1, self.config.max_len)?;
        let mode = self.mode();
        let (stats, grads) = {
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g);
            let epoch = self.epoch;
            let fusion = self
                .model
                .fuse(&mut g, &p, &images, mode, &mut self.rng)
                .map_err(|e| non_finite_as_loss(e, epoch, index))?;
            let sampled = self
                .model
                .sample(&mut g, &p, &fusion, self.config.max_len, mode, &mut self.rng)
                .map_err(|e| non_finite_as_loss(e, epoch, index))?;
            let mut rewards = Vec::with_capacity(batch.len());
            let (mut s_sum, mut g_sum) = (0.0, 0.0);
            for ((ex, s), gr) in batch.iter().zip(&sampled.tokens).zip(&greedy) {
                let sc = self.cider.score(s, &ex.captions)?;
                let gc = self.cider.score(gr, &ex.captions)?;
                rewards.push(sc - gc);
                s_sum += sc;
                g_sum += gc;
            }
            let loss = self.model.policy_loss(&mut g, &sampled, &rewards)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: index });
            }
            let grads = g.backward(loss).map_err(|e| non_finite_as_loss(e, epoch, index))?;
            let n = batch.len() as f64;
            let stats = RlStats {
                loss: value,
                sample_cider: s_sum / n,
                greedy_cider: g_sum / n,
            };
            (stats, self.model.params.collect_grads(&grads, &p))
        };
        let epoch = self.epoch;
        self.apply(grads, self.config.lr_rl)
            .map_err(|e| non_finite_as_loss(e, epoch, index))?;
        Ok(stats)
    }

    /// One self-critical pass over the training scenes.
    pub fn rl_epoch(&mut self) -> Result<Vec<RlStats>> {
        let data = self.data;
        let mut out = Vec::new();
        for (i, idx) in self.shuffled_batches().into_iter().enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&j| &data.train[j]).collect();
            out.push(self.rl_batch(&batch, i)?);
        }
        self.epoch += 1;
        Ok(out)
    }

    /// Greedy-decoded validation CIDEr-D.
    pub fn val_cider(&self) -> Result<f64> {
        split_cider(&self.model, self.data.val, &self.cider, 1, self.config.max_len)
    }
}

/// Result of a training phase: the log and the best-validation parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_val_cider: f64,
    pub best_params: ParamSet,
}

fn run_phase<F, G>(
    trainer: &mut Trainer<'_>,
    max_epochs: usize,
    patience: usize,
    mut epoch_fn: G,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
    G: FnMut(&mut Trainer<'_>) -> Result<(f64, f64, f64)>,
{
    let mut log = TrainingLog::new();
    let mut best = (0, f64::NEG_INFINITY, trainer.model.params.clone());
    let mut since_best = 0;
    for _ in 0..max_epochs {
        let start = Instant::now();
        let e = trainer.epoch;
        let (lr, ss, loss) = epoch_fn(trainer)?;
        let val = trainer.val_cider()?;
        let rec = EpochRecord {
            epoch: e,
            lr,
            ss_prob: ss,
            train_loss: loss,
            val_cider: val,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.push(rec)?;
        if val > best.1 {
            best = (e, val, trainer.model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= patience {
                break;
            }
        }
    }
    trainer.model.params = best.2.clone();
    Ok(TrainOutcome {
        log,
        best_epoch: best.0,
        best_val_cider: best.1,
        best_params: best.2,
    })
}

/// Cross-entropy training with validation-CIDEr early stopping. The
/// trainer's model ends holding the best parameters.
pub fn train_xe<F: FnMut(&EpochRecord)>(trainer: &mut Trainer<'_>, on_epoch: F) -> Result<TrainOutcome> {
    let (max, patience) = (trainer.config.max_epochs_xe, trainer.config.patience_xe);
    run_phase(
        trainer,
        max,
        patience,
        |t| {
            let epoch = t.epoch;
            let (lr, ss) = (t.config.lr_at(epoch), t.config.ss_at(epoch));
            let stats = t.xe_epoch()?;
            Ok((lr, ss, stats.mean_loss))
        },
        on_epoch,
    )
}

/// Self-critical fine-tuning with a fixed learning rate and
/// validation-CIDEr early stopping.
pub fn finetune_rl<F: FnMut(&EpochRecord)>(trainer: &mut Trainer<'_>, on_epoch: F) -> Result<TrainOutcome> {
    let (max, patience) = (trainer.config.max_epochs_rl, trainer.config.patience_rl);
    run_phase(
        trainer,
        max,
        patience,
        |t| {
            let stats = t.rl_epoch()?;
            let loss = stats.iter().map(|s| s.loss).sum::<f64>() / stats.len() as f64;
            Ok((t.config.lr_rl, 0.0, loss))
        },
        on_epoch,
    )
}
