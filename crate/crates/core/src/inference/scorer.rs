use crate::error::{Error, Result};
use crate::numerics::{log_softmax, Tensor};
use crate::rfnet::{DecoderContext, EncoderOutput, RfNet};

use super::search::{beam_search, greedy_decode_batch, StepScorer};

/// Decoder state of one partial caption.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderRow {
    pub example: usize,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Evaluation-mode scorer over the fused context of a batch of images.
pub struct ModelScorer<'m> {
    model: &'m RfNet,
    ctx: DecoderContext,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m RfNet, images: &[&EncoderOutput]) -> Result<Self> {
        Ok(ModelScorer {
            model,
            ctx: model.decoder_context(images)?,
        })
    }
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.flatten().collect();
    Tensor::new(data.len() / cols.max(1), cols, data)
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderRow;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn initial(&self, example: usize) -> Result<DecoderRow> {
        if example >= self.ctx.examples() {
            return Err(Error::invalid(format!("example {example} outside batch")));
        }
        Ok(DecoderRow {
            example,
            h: self.ctx.h.row_slice(example).to_vec(),
            c: self.ctx.c.row_slice(example).to_vec(),
        })
    }

    fn step(&self, states: &[DecoderRow], prev: &[usize]) -> Result<Vec<(Vec<f64>, DecoderRow)>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let examples: Vec<usize> = states.iter().map(|s| s.example).collect();
        let ctx = self.ctx.select(&examples);
        let s = self.ctx.h.cols();
        let h = stack(states.iter().map(|r| r.h.clone()), s)?;
        let c = stack(states.iter().map(|r| r.c.clone()), s)?;
        let (logits, h, c) = self.model.decode_values(&ctx, &h, &c, prev)?;
        Ok((0..states.len())
            .map(|i| {
                (
                    log_softmax(logits.row_slice(i)),
                    DecoderRow {
                        example: examples[i],
                        h: h.row_slice(i).to_vec(),
                        c: c.row_slice(i).to_vec(),
                    },
                )
            })
            .collect())
    }
}

/// Images decoded together by [`caption_images`] in greedy mode.
const GREEDY_CHUNK: usize = 100;

/// Captions (word ids, no markers) for each image: greedy when
/// `beam == 1`, beam search otherwise.
pub fn caption_images(model: &RfNet, images: &[&EncoderOutput], beam: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
    if beam == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    let mut out = Vec::with_capacity(images.len());
    if beam == 1 {
        for chunk in images.chunks(GREEDY_CHUNK) {
            let scorer = ModelScorer::new(model, chunk)?;
            out.extend(greedy_decode_batch(&scorer, chunk.len(), max_len)?);
        }
    } else {
        for img in images {
            let scorer = ModelScorer::new(model, &[img])?;
            let best = beam_search(&scorer, 0, beam, max_len)?;
            out.push(best.into_iter().next().map(|h| h.tokens).unwrap_or_default());
        }
    }
    Ok(out)
}
