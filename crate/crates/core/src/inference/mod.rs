//! Caption generation (greedy and beam search) and the BLEU / CIDEr-D
//! metrics.

mod metrics;
mod report;
mod scorer;
mod search;

pub use metrics::{bleu, cider, corpus_bleu, CiderD};
pub use report::{ExampleScores, MetricReport};
pub use scorer::{caption_images, DecoderRow, ModelScorer};
pub use search::{beam_search, greedy_decode, greedy_decode_batch, Hypothesis, StepScorer};
