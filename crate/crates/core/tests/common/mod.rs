#![allow(dead_code)]

use std::collections::HashMap;

use rfnet_core::corpus::{generate_dataset, Dataset, DatasetConfig, END, PAD, RESERVED, START};
use rfnet_core::numerics::{Graph, Rng, Tensor};
use rfnet_core::rfnet::{Ablation, EncoderOutput, FusionConfig, ModelConfig, Mode, RfNet, ViewFeatures};

pub fn random_encoder(rng: &mut Rng, dims: &[usize], ks: &[usize]) -> EncoderOutput {
    let views = dims
        .iter()
        .zip(ks)
        .map(|(&d, &k)| {
            let data: Vec<f64> = (0..k * d).map(|_| rng.range(-1.0, 1.0)).collect();
            let annotations = Tensor::new(k, d, data).unwrap();
            let global = (0..d)
                .map(|j| (0..k).map(|r| annotations.get(r, j)).sum::<f64>() / k as f64)
                .collect();
            ViewFeatures { global, annotations }
        })
        .collect();
    EncoderOutput { views }
}

pub fn tiny_config(m: usize, s: usize, t1: usize, t2: usize, vocab: usize, ablation: Ablation) -> ModelConfig {
    let fusion = FusionConfig {
        views: m,
        t1,
        t2,
        hidden: s,
        ablation,
        dropout: 0.0,
        view_subset: None,
    };
    ModelConfig::new(fusion, (0..m).map(|i| 3 + i).collect(), vocab)
}

pub fn tiny_model(cfg: ModelConfig, seed: u64) -> RfNet {
    RfNet::new(cfg, &mut Rng::new(seed)).unwrap()
}

/// Encoder outputs matching `cfg`, with `k = 2 + view` annotations.
pub fn inputs_for(cfg: &ModelConfig, count: usize, rng: &mut Rng) -> Vec<EncoderOutput> {
    let ks: Vec<usize> = (0..cfg.view_dims.len()).map(|v| 2 + v).collect();
    (0..count).map(|_| random_encoder(rng, &cfg.view_dims, &ks)).collect()
}

pub fn random_caption(rng: &mut Rng, vocab: usize, words: usize) -> Vec<usize> {
    let mut c = vec![START];
    c.extend((0..words).map(|_| RESERVED + rng.below(vocab - RESERVED)));
    c.push(END);
    c
}

pub fn small_dataset(train: usize, val: usize, seed: u64) -> Dataset {
    generate_dataset(&DatasetConfig {
        train,
        val,
        test: val,
        min_count: 1,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

/// `log p(tokens [END])` computed on the autodiff graph, independently of
/// the detached decoding path.
pub fn sequence_log_prob(model: &RfNet, image: &EncoderOutput, tokens: &[usize], finished: bool) -> f64 {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let mut rng = Rng::new(0);
    let fusion = model.fuse(&mut g, &p, &[image], Mode::eval(), &mut rng).unwrap();
    let replay = model
        .replay(&mut g, &p, &fusion, &[tokens.to_vec()], &[finished], Mode::eval(), &mut rng)
        .unwrap();
    let loss = model.policy_loss(&mut g, &replay, &[-1.0]).unwrap();
    g.value(loss).data()[0]
}

/// Best caption over every emittable sequence a decoder of length
/// `max_len` can produce: finished ones of up to `max_len - 1` words and
/// unfinished ones of exactly `max_len` words. Ties go to the
/// lexicographically smaller token list.
pub fn brute_force_best(model: &RfNet, image: &EncoderOutput, max_len: usize) -> (Vec<usize>, f64) {
    let vocab = model.config().vocab_size;
    let words: Vec<usize> = (0..vocab).filter(|&t| t != PAD && t != START && t != END).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for len in 0..=max_len {
        for seq in &frontier {
            let finished = len < max_len;
            let lp = sequence_log_prob(model, image, seq, finished);
            let better = match &best {
                None => true,
                Some((b, blp)) => lp > *blp || (lp == *blp && seq < b),
            };
            if better {
                best = Some((seq.clone(), lp));
            }
        }
        frontier = frontier
            .iter()
            .flat_map(|s| {
                words.iter().map(move |&w| {
                    let mut n = s.clone();
                    n.push(w);
                    n
                })
            })
            .collect();
    }
    best.unwrap()
}

/// Plain CIDEr-D: per-order tf-idf vectors with raw counts, clipped cosine
/// against each reference, Gaussian bigram-length penalty, times ten.
pub fn cider_oracle(cand: &[String], refs: &[Vec<String>], corpus: &[Vec<Vec<String>>]) -> f64 {
    fn grams(t: &[String], n: usize) -> HashMap<String, f64> {
        let mut m = HashMap::new();
        if t.len() >= n {
            for i in 0..=t.len() - n {
                *m.entry(t[i..i + n].join(" ")).or_insert(0.0) += 1.0;
            }
        }
        m
    }
    let docs = corpus.len() as f64;
    let df = |g: &str, n: usize| {
        let c = corpus
            .iter()
            .filter(|set| set.iter().any(|r| grams(r, n).contains_key(g)))
            .count() as f64;
        c.max(1.0)
    };
    let vector = |t: &[String], n: usize| -> HashMap<String, f64> {
        grams(t, n)
            .into_iter()
            .map(|(g, tf)| {
                let w = tf * (docs / df(&g, n)).ln();
                (g, w)
            })
            .collect()
    };
    let norm = |v: &HashMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let bigrams = |t: &[String]| t.len().saturating_sub(1) as f64;
    let mut total = 0.0;
    for r in refs {
        let delta = bigrams(cand) - bigrams(r);
        let pen = (-delta * delta / 72.0).exp();
        for n in 1..=4 {
            let (vc, vr) = (vector(cand, n), vector(r, n));
            let dot: f64 = vc.iter().map(|(g, &a)| vr.get(g).map_or(0.0, |&b| a.min(b) * b)).sum();
            let (nc, nr) = (norm(&vc), norm(&vr));
            let cos = if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { dot };
            total += cos * pen;
        }
    }
    total / 4.0 / refs.len() as f64 * 10.0
}
