mod common;

use common::{inputs_for, small_dataset, tiny_config, tiny_model};
use rfnet_core::corpus::Dataset;
use rfnet_core::numerics::{check_params, Graph, Rng};
use rfnet_core::rfnet::{Ablation, Checkpoint, EncoderOutput, FusionConfig, ModelConfig, Mode, RfNet};
use rfnet_core::trainer::{
    finetune_rl, lr_at, ss_probability, teacher_forced_xe, train_xe, TrainConfig, TrainData, Trainer, LOG_HEADER,
};
use rfnet_core::Error;

fn model_for(ds: &Dataset, hidden: usize, seed: u64) -> RfNet {
    let fusion = FusionConfig {
        hidden,
        ..FusionConfig::default()
    };
    let cfg = ModelConfig::new(fusion, ds.config.dims.clone(), ds.vocab.len());
    RfNet::new(cfg, &mut Rng::new(seed)).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        max_epochs_xe: 2,
        max_epochs_rl: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn schedules_are_monotone() {
    let cfg = TrainConfig::default();
    for e in 0..300 {
        assert!(lr_at(e + 1, &cfg) <= lr_at(e, &cfg));
        assert!(ss_probability(e + 1) >= ss_probability(e));
        assert!(ss_probability(e) <= 0.25);
    }
}

#[test]
fn same_seed_same_run() {
    let ds = small_dataset(30, 6, 4);
    let run = || {
        let mut t = Trainer::new(model_for(&ds, 8, 1), TrainData::from_dataset(&ds), quick_config()).unwrap();
        let out = train_xe(&mut t, |_| {}).unwrap();
        (out.log, t.checkpoint().to_bytes())
    };
    let (log_a, bytes_a) = run();
    let (log_b, bytes_b) = run();
    assert!(log_a.same_trajectory(&log_b));
    assert_eq!(bytes_a, bytes_b);
    let text = log_a.to_tsv();
    assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn resuming_from_checkpoint_replays_exactly() {
    let ds = small_dataset(30, 6, 5);
    let data = TrainData::from_dataset(&ds);
    let mut a = Trainer::new(model_for(&ds, 8, 2), data, quick_config()).unwrap();
    a.xe_epoch().unwrap();
    let saved = Checkpoint::from_bytes(&a.checkpoint().to_bytes()).unwrap();
    let after_a: Vec<f64> = (0..2).map(|_| a.xe_epoch().unwrap().mean_loss).collect();
    a.rl_epoch().unwrap();

    let mut b = Trainer::resume(saved, data, quick_config()).unwrap();
    assert_eq!(b.epoch, 1);
    let after_b: Vec<f64> = (0..2).map(|_| b.xe_epoch().unwrap().mean_loss).collect();
    b.rl_epoch().unwrap();
    assert_eq!(after_a, after_b);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.rng.state(), b.rng.state());
    assert_eq!(a.epoch, b.epoch);
    assert_eq!(a.adam.step_count, b.adam.step_count);
    assert_eq!(a.adam.first, b.adam.first);
    assert_eq!(a.adam.second, b.adam.second);
    assert!(a.checkpoint().to_bytes() == b.checkpoint().to_bytes());
}

#[test]
fn training_returns_best_validation_parameters() {
    let ds = small_dataset(30, 6, 6);
    let cfg = TrainConfig {
        max_epochs_xe: 4,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model_for(&ds, 8, 3), TrainData::from_dataset(&ds), cfg).unwrap();
    let out = train_xe(&mut t, |_| {}).unwrap();
    let best = out
        .log
        .records()
        .iter()
        .map(|r| r.val_cider)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_cider, best);
    assert_eq!(t.model.params, out.best_params);
    assert_eq!(t.val_cider().unwrap(), best);
    for (i, r) in out.log.records().iter().enumerate() {
        assert_eq!(r.epoch, i);
        assert_eq!(r.lr, lr_at(i, &t.config));
    }
}

#[test]
fn rl_phase_uses_fixed_rate() {
    let ds = small_dataset(20, 5, 7);
    let cfg = TrainConfig {
        max_epochs_rl: 3,
        patience_rl: 5,
        ..quick_config()
    };
    let mut t = Trainer::new(model_for(&ds, 8, 4), TrainData::from_dataset(&ds), cfg).unwrap();
    let out = finetune_rl(&mut t, |_| {}).unwrap();
    assert_eq!(out.log.records().len(), 3);
    assert!(out.log.records().iter().all(|r| r.lr == 5e-5 && r.ss_prob == 0.0));
}

#[test]
fn invalid_inputs_are_rejected() {
    let ds = small_dataset(10, 3, 8);
    let empty = TrainData {
        train: &ds.train,
        val: &[],
        vocab: &ds.vocab,
    };
    assert!(Trainer::new(model_for(&ds, 8, 1), empty, quick_config()).is_err());
    let mut wrong = model_for(&ds, 8, 1).config().clone();
    wrong.vocab_size += 1;
    let model = RfNet::new(wrong, &mut Rng::new(0)).unwrap();
    assert!(Trainer::new(model, TrainData::from_dataset(&ds), quick_config()).is_err());
}

#[test]
fn non_finite_loss_names_epoch_and_batch() {
    let ds = small_dataset(20, 3, 9);
    let mut model = model_for(&ds, 8, 1);
    let id = model.output_bias();
    model.params.get_mut(id).data_mut()[5] = f64::NAN;
    let mut t = Trainer::new(model, TrainData::from_dataset(&ds), quick_config()).unwrap();
    match t.xe_epoch() {
        Err(Error::NonFiniteLoss { epoch: 0, batch: 0 }) => {}
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn teacher_forced_xe_is_positive() {
    let ds = small_dataset(10, 3, 10);
    let model = model_for(&ds, 8, 1);
    let xe = teacher_forced_xe(&model, &ds.train).unwrap();
    assert!(xe > 0.0 && xe.is_finite());
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let mut rng = Rng::new(13);
    for ablation in [Ablation::Full, Ablation::NoStageII] {
        let cfg = tiny_config(2, 4, 1, 1, 9, ablation);
        let model = tiny_model(cfg.clone(), 21);
        let images = inputs_for(&cfg, 3, &mut rng);
        let refs: Vec<&EncoderOutput> = images.iter().collect();
        let sampled = {
            let mut g = Graph::new();
            let p = model.params.bind_frozen(&mut g);
            let fusion = model.fuse(&mut g, &p, &refs, Mode::eval(), &mut rng).unwrap();
            model.sample(&mut g, &p, &fusion, 5, Mode::eval(), &mut rng).unwrap()
        };
        let rewards = [0.7, -1.3, 0.4];
        let report = check_params(
            &model.params,
            |g, p| {
                let mut r = Rng::new(0);
                let fusion = model.fuse(g, p, &refs, Mode::eval(), &mut r)?;
                let replay =
                    model.replay(g, p, &fusion, &sampled.tokens, &sampled.finished, Mode::eval(), &mut r)?;
                model.policy_loss(g, &replay, &rewards)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{ablation}: {report:?}");
    }
}

#[test]
fn zero_reward_gives_zero_gradient() {
    let cfg = tiny_config(2, 4, 1, 1, 9, Ablation::Full);
    let model = tiny_model(cfg.clone(), 3);
    let images = inputs_for(&cfg, 2, &mut Rng::new(1));
    let refs: Vec<&EncoderOutput> = images.iter().collect();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let mut rng = Rng::new(2);
    let fusion = model.fuse(&mut g, &p, &refs, Mode::eval(), &mut rng).unwrap();
    let sampled = model.sample(&mut g, &p, &fusion, 6, Mode::eval(), &mut rng).unwrap();
    let loss = model.policy_loss(&mut g, &sampled, &[0.0, 0.0]).unwrap();
    let grads = g.backward(loss).unwrap();
    for t in model.params.collect_grads(&grads, &p) {
        assert!(t.data().iter().all(|&x| x == 0.0));
    }
}
