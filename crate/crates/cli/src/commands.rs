use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rfnet_core::corpus::{generate_dataset, Dataset};
use rfnet_core::inference::{caption_images, CiderD, MetricReport};
use rfnet_core::numerics::Rng;
use rfnet_core::rfnet::{Checkpoint, RfNet};
use rfnet_core::trainer::{
    finetune_rl, run_ablation, thread_budget, train_xe, AblationSpec, EpochRecord, TrainData, Trainer, TrainingLog,
};

use crate::config::{ConfigError, RunConfig};
use crate::Command;

const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    if command == Command::Gradcheck {
        return gradcheck(cfg);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_text()).with_context(|| format!("writing into {}", out.display()))?;
    match command {
        Command::GenData => gen_data(cfg, out),
        Command::Train => train(cfg, out),
        Command::FinetuneRl => finetune(cfg, out),
        Command::Caption => caption(cfg, out),
        Command::Evaluate => evaluate(cfg, out),
        Command::Ablate => ablate(cfg, out),
        Command::Gradcheck => unreachable!(),
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = &cfg.run.data_dir;
    Dataset::load(dir).with_context(|| {
        format!(
            "loading the dataset from {} (create it with `rfnet gen-data --out {}`)",
            dir.display(),
            dir.display()
        )
    })
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let Some(path) = &cfg.run.checkpoint else {
        return Err(ConfigError("this command needs --checkpoint or run.checkpoint".into()).into());
    };
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn progress(r: &EpochRecord) {
    eprintln!("{}", TrainingLog::line(r));
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate_dataset(&cfg.data)?;
    ds.save(out)?;
    println!(
        "wrote {} / {} / {} scenes with a {}-token vocabulary to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        ds.vocab.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_data(cfg)?;
    let model = RfNet::new(
        cfg.model_config(ds.config.dims.clone(), ds.vocab.len()),
        &mut Rng::new(cfg.train.seed),
    )?;
    let mut trainer = Trainer::new(model, TrainData::from_dataset(&ds), cfg.train.clone())?;
    let outcome = train_xe(&mut trainer, progress)?;
    let mut ckpt = trainer.checkpoint();
    ckpt.run_config = cfg.to_text();
    ckpt.save(&out.join("model.ckpt"))?;
    fs::write(out.join("train_log.tsv"), outcome.log.to_tsv())?;
    println!(
        "best validation CIDEr-D {:.4} at epoch {}; checkpoint {}",
        outcome.best_val_cider,
        outcome.best_epoch,
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn finetune(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_data(cfg)?;
    let ckpt = load_checkpoint(cfg)?;
    check_vocab(&ckpt, &ds)?;
    let mut trainer = Trainer::resume(ckpt, TrainData::from_dataset(&ds), cfg.train.clone())?;
    let start = trainer.val_cider()?;
    let outcome = finetune_rl(&mut trainer, progress)?;
    let mut ckpt = trainer.checkpoint();
    ckpt.run_config = cfg.to_text();
    ckpt.save(&out.join("model_rl.ckpt"))?;
    fs::write(out.join("rl_log.tsv"), outcome.log.to_tsv())?;
    println!(
        "validation CIDEr-D {start:.4} -> {:.4} (epoch {}); checkpoint {}",
        outcome.best_val_cider.max(start),
        outcome.best_epoch,
        out.join("model_rl.ckpt").display()
    );
    Ok(())
}

fn check_vocab(ckpt: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ckpt.vocab.to_text() != ds.vocab.to_text() {
        bail!("the checkpoint's vocabulary differs from the dataset's; was it trained on another dataset?");
    }
    Ok(())
}

fn generate(cfg: &RunConfig) -> Result<(Dataset, Vec<Vec<usize>>)> {
    let ds = load_data(cfg)?;
    let ckpt = load_checkpoint(cfg)?;
    check_vocab(&ckpt, &ds)?;
    let images: Vec<_> = ds.split(cfg.run.split).iter().map(|e| &e.features).collect();
    let caps = caption_images(&ckpt.model, &images, cfg.run.beam, cfg.train.max_len)?;
    Ok((ds, caps))
}

fn caption(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (ds, caps) = generate(cfg)?;
    let mut text = String::new();
    for (i, c) in caps.iter().enumerate() {
        let _ = writeln!(text, "{i}\t{}", ds.vocab.detokenize(c));
    }
    let name = format!("captions_{}.txt", cfg.run.split.name());
    fs::write(out.join(&name), text)?;
    println!("{} captions in {}", caps.len(), out.join(name).display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (ds, caps) = generate(cfg)?;
    let refs: Vec<Vec<Vec<usize>>> = ds.split(cfg.run.split).iter().map(|e| e.captions.clone()).collect();
    let report = MetricReport::evaluate(&caps, &refs, &CiderD::new(&refs)?)?;
    let name = format!("metrics_{}.txt", cfg.run.split.name());
    fs::write(out.join(&name), report.to_key_value())?;
    let b = report.bleu;
    println!(
        "{}: BLEU-1 {:.4}  BLEU-2 {:.4}  BLEU-3 {:.4}  BLEU-4 {:.4}  CIDEr-D {:.4}",
        cfg.run.split.name(),
        b[0],
        b[1],
        b[2],
        b[3],
        report.cider
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_data(cfg)?;
    let budget = thread_budget();
    let threads = if cfg.run.threads == 0 { budget } else { cfg.run.threads.min(budget) };
    let spec = AblationSpec {
        variants: cfg.run.variants.clone(),
        seeds: cfg.run.seeds.clone(),
        fusion: cfg.fusion(),
        init_scale: cfg.model.init_scale,
        train: cfg.train.clone(),
        beam: cfg.run.beam,
        threads,
    };
    eprintln!(
        "{} runs on {threads} thread(s)",
        spec.variants.len() * spec.seeds.len()
    );
    let table = run_ablation(&ds, &spec, |r| {
        eprintln!(
            "{} seed {}: best epoch {}, val {:.4}, test {:.4}",
            r.variant, r.seed, r.best_epoch, r.val_cider, r.test_cider
        );
    })?;
    let mut runs = String::from("variant\tseed\tbest_epoch\tval_cider\ttest_cider\n");
    for r in &table.runs {
        let _ = writeln!(
            runs,
            "{}\t{}\t{}\t{:.6}\t{:.6}",
            r.variant, r.seed, r.best_epoch, r.val_cider, r.test_cider
        );
    }
    fs::write(out.join("ablation_runs.tsv"), runs)?;
    fs::write(out.join("ablation.tsv"), table.to_tsv())?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let report = cfg.gradcheck.run(cfg.gradcheck_seed)?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {})",
        report.max_rel_error, report.coordinates, report.worst
    );
    if !(report.max_rel_error < GRADCHECK_TOLERANCE) {
        bail!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", report.max_rel_error);
    }
    Ok(())
}
