mod common;

use std::collections::HashSet;

use common::small_dataset;
use nalgebra::{DMatrix, DVector};
use rfnet_core::corpus::{
    encode_scene, normalize_tokenize, Attribute, DatasetConfig, Scene, SyntheticEncoder, INFO_MASKS, TEMPLATE_COUNT,
};
use rfnet_core::numerics::Rng;

/// Ridge one-vs-rest least-squares probe; returns held-out accuracy and the
/// majority-class rate on the held-out half.
fn probe(features: &[Vec<f64>], labels: &[usize], classes: usize) -> (f64, f64) {
    let n = features.len() / 2;
    let dim = features[0].len() + 1;
    let design = |rows: &[Vec<f64>]| {
        DMatrix::from_fn(rows.len(), dim, |r, c| if c + 1 == dim { 1.0 } else { rows[r][c] })
    };
    let x = design(&features[..n]);
    let gram = x.transpose() * &x + DMatrix::identity(dim, dim) * 1.0;
    let inv = gram.try_inverse().expect("ridge system is invertible");
    let weights: Vec<DVector<f64>> = (0..classes)
        .map(|k| {
            let y = DVector::from_fn(n, |r, _| if labels[r] == k { 1.0 } else { 0.0 });
            &inv * (x.transpose() * y)
        })
        .collect();
    let test = design(&features[n..]);
    let scores: Vec<DVector<f64>> = weights.iter().map(|w| &test * w).collect();
    let mut correct = 0;
    let mut counts = vec![0usize; classes];
    for r in 0..test.nrows() {
        let guess = (0..classes)
            .max_by(|&a, &b| scores[a][r].total_cmp(&scores[b][r]))
            .unwrap();
        if guess == labels[n + r] {
            correct += 1;
        }
        counts[labels[n + r]] += 1;
    }
    let m = test.nrows() as f64;
    (correct as f64 / m, *counts.iter().max().unwrap() as f64 / m)
}

#[test]
fn single_view_probe_is_at_chance_for_hidden_attributes() {
    let cfg = DatasetConfig {
        cells: vec![4, 6, 8],
        ..DatasetConfig::default()
    };
    let encoders: Vec<SyntheticEncoder> = cfg.encoders().unwrap();
    let mut rng = Rng::new(17);
    let scenes: Vec<Scene> = (0..2000).map(|_| Scene::random(&mut rng)).collect();
    let encoded: Vec<_> = scenes.iter().map(|s| encode_scene(&encoders, s, &mut rng)).collect();
    for (v, enc) in encoders.iter().enumerate() {
        let features: Vec<Vec<f64>> = encoded.iter().map(|e| e.views[v].annotations.data().to_vec()).collect();
        for a in Attribute::ALL {
            let labels: Vec<usize> = scenes.iter().map(|s| a.of(&s.objects[0])).collect();
            let (acc, chance) = probe(&features, &labels, a.classes());
            if enc.exposes(a) {
                assert!(acc > chance + 0.3, "view {v} should reveal {a:?}: {acc} vs {chance}");
            } else {
                assert!((acc - chance).abs() <= 0.1, "view {v} leaks {a:?}: {acc} vs {chance}");
            }
        }
    }
}

#[test]
fn every_attribute_is_hidden_from_some_view() {
    for a in Attribute::ALL {
        assert!(INFO_MASKS[..3].iter().any(|m| !m.contains(&a)));
    }
    let distinct: HashSet<_> = INFO_MASKS.iter().map(|m| m.to_vec()).collect();
    assert_eq!(distinct.len(), INFO_MASKS.len());
}

#[test]
fn captions_round_trip_through_text() {
    let ds = small_dataset(200, 20, 3);
    for ex in ds.train.iter().chain(&ds.val) {
        for cap in &ex.captions {
            let text = ds.vocab.detokenize(cap);
            assert_eq!(ds.vocab.encode(&normalize_tokenize(&text)), *cap);
            assert!(cap.len() <= ds.config.max_caption_len);
            assert!(cap.iter().all(|&t| t < ds.vocab.len()));
        }
        assert!((2..=5).contains(&ex.captions.len()));
    }
}

#[test]
fn splits_are_disjoint_and_exhaustive() {
    let ds = small_dataset(300, 40, 4);
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (300, 40, 40));
    let mut seen = HashSet::new();
    for ex in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        assert!(seen.insert(format!("{:?}", ex.features)));
    }
}

#[test]
fn every_scene_renders_every_template_within_limits() {
    let mut rng = Rng::new(8);
    for _ in 0..500 {
        let scene = Scene::random(&mut rng);
        for t in 0..TEMPLATE_COUNT {
            let words = scene.caption(t);
            assert!(!words.is_empty() && words.len() <= 16);
        }
    }
}
