use crate::corpus::{frequent_word_set, with_markers, Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::numerics::{check_params, GradCheckReport, Rng, Tensor};

use super::config::{Ablation, FusionConfig, ModelConfig};
use super::model::{EncoderOutput, LossOptions, Mode, RfNet, TrainBatch, ViewFeatures};

/// A small random model and one captioned image, used to compare the tape
/// gradient of the full training objective with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSetup {
    pub views: usize,
    pub hidden: usize,
    pub t1: usize,
    pub t2: usize,
    /// Annotation vectors per view.
    pub annotations: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    /// Words in the caption, markers excluded.
    pub caption_words: usize,
    pub lambda: f64,
    pub lsr: f64,
    pub step: f64,
    pub ablation: Ablation,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            views: 2,
            hidden: 8,
            t1: 2,
            t2: 2,
            annotations: 3,
            feature_dim: 5,
            vocab_size: 20,
            caption_words: 6,
            lambda: 10.0,
            lsr: 0.1,
            step: 1e-4,
            ablation: Ablation::Full,
        }
    }
}

impl GradCheckSetup {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        if self.vocab_size <= RESERVED || self.annotations == 0 || self.feature_dim == 0 || self.caption_words == 0 {
            return Err(Error::invalid("gradient check needs words, annotations and a non-empty caption"));
        }
        let fusion = FusionConfig {
            views: self.views,
            t1: self.t1,
            t2: self.t2,
            hidden: self.hidden,
            ablation: self.ablation,
            dropout: 0.0,
            view_subset: None,
        };
        let config = ModelConfig::new(fusion, vec![self.feature_dim; self.views], self.vocab_size);
        let mut rng = Rng::new(seed);
        let model = RfNet::new(config, &mut rng)?;

        let words = self.vocab_size - RESERVED;
        // Word i occurs words − i times, so ids follow frequency rank.
        let corpus: Vec<Vec<String>> = (0..words).map(|i| vec![format!("w{i:03}"); words - i]).collect();
        let vocab = Vocabulary::build(corpus, 1)?;
        let caption: Vec<usize> = (0..self.caption_words).map(|_| RESERVED + rng.below(words)).collect();
        let frequent = frequent_word_set(&vocab, &caption, model.config().n_frequent);
        let caption = with_markers(&caption);

        let views = (0..self.views)
            .map(|_| {
                let data = (0..self.annotations * self.feature_dim).map(|_| rng.range(-1.0, 1.0)).collect();
                let annotations = Tensor::new(self.annotations, self.feature_dim, data)?;
                let global = (0..self.feature_dim)
                    .map(|j| (0..self.annotations).map(|r| annotations.get(r, j)).sum::<f64>() / self.annotations as f64)
                    .collect();
                Ok(ViewFeatures { global, annotations })
            })
            .collect::<Result<Vec<_>>>()?;
        let image = EncoderOutput { views };
        let opts = LossOptions {
            lambda: self.lambda,
            lsr: self.lsr,
            ss_prob: 0.0,
            discriminative: true,
        };
        check_params(
            &model.params,
            |g, p| {
                let batch = TrainBatch {
                    encoders: vec![&image],
                    captions: vec![caption.as_slice()],
                    frequent: vec![frequent.clone()],
                };
                Ok(model.loss(g, p, &batch, opts, Mode::eval(), &mut Rng::new(0))?.total)
            },
            self.step,
        )
    }
}
