use std::fmt::Write as _;

use crate::error::Result;

use super::metrics::{bleu, corpus_bleu, CiderD};

/// Per-image scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleScores {
    pub bleu: [f64; 4],
    pub cider: f64,
    pub references: usize,
}

/// Corpus-level BLEU-1..4 and mean CIDEr-D with per-image detail.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub cider: f64,
    pub examples: Vec<ExampleScores>,
}

impl MetricReport {
    pub fn evaluate<T: Ord + Clone>(
        candidates: &[Vec<T>],
        references: &[Vec<Vec<T>>],
        cider: &CiderD<T>,
    ) -> Result<Self> {
        let corpus = corpus_bleu(candidates, references, 4)?;
        let ciders = cider.scores(candidates, references)?;
        let mut examples = Vec::with_capacity(candidates.len());
        for ((cand, refs), &c) in candidates.iter().zip(references).zip(&ciders) {
            let refs_slices: Vec<&[T]> = refs.iter().map(Vec::as_slice).collect();
            let b = bleu(cand, &refs_slices, 4)?;
            examples.push(ExampleScores {
                bleu: [b[0], b[1], b[2], b[3]],
                cider: c,
                references: refs.len(),
            });
        }
        let mean = if ciders.is_empty() {
            0.0
        } else {
            ciders.iter().sum::<f64>() / ciders.len() as f64
        };
        Ok(MetricReport {
            bleu: [corpus[0], corpus[1], corpus[2], corpus[3]],
            cider: mean,
            examples,
        })
    }

    /// `key = value` lines: corpus values first, then
    /// `example.<i>.<metric>` for every image.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "examples = {}", self.examples.len());
        let refs: usize = self.examples.iter().map(|e| e.references).sum();
        let _ = writeln!(out, "references = {refs}");
        for (i, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(out, "bleu{} = {b:.6}", i + 1);
        }
        let _ = writeln!(out, "cider = {:.6}", self.cider);
        for (i, e) in self.examples.iter().enumerate() {
            for (n, b) in e.bleu.iter().enumerate() {
                let _ = writeln!(out, "example.{i}.bleu{} = {b:.6}", n + 1);
            }
            let _ = writeln!(out, "example.{i}.cider = {:.6}", e.cider);
            let _ = writeln!(out, "example.{i}.references = {}", e.references);
        }
        out
    }
}
