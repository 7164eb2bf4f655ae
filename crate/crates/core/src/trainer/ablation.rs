use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::corpus::{Dataset, Example};
use crate::error::{Error, Result};
use crate::inference::CiderD;
use crate::numerics::Rng;
use crate::rfnet::{Ablation, FusionConfig, ModelConfig, RfNet};

use super::schedule::TrainConfig;
use super::train::{split_cider, train_xe, TrainData, Trainer};

/// Worker threads for parallel runs: `RFNET_THREADS` when set to a
/// positive integer, otherwise the available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("RFNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// A grid of variants × seeds trained with identical settings.
#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub variants: Vec<Ablation>,
    pub seeds: Vec<u64>,
    /// Shape shared by every variant; its `ablation` field is overridden.
    pub fusion: FusionConfig,
    pub init_scale: f64,
    pub train: TrainConfig,
    pub beam: usize,
    pub threads: usize,
}

/// Outcome of one variant/seed cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Ablation,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_cider: f64,
    pub test_cider: f64,
}

/// Test CIDEr-D per variant (rows) and seed (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn variants(&self) -> Vec<Ablation> {
        let mut out: Vec<Ablation> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    pub fn scores(&self, variant: Ablation) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|&s| self.runs.iter().find(|r| r.variant == variant && r.seed == s))
            .map(|r| r.test_cider)
            .collect()
    }

    pub fn mean(&self, variant: Ablation) -> f64 {
        let s = self.scores(variant);
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    /// Tab-separated table: a header of seeds, one row per variant and a
    /// trailing mean column.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant");
        for s in &self.seeds {
            let _ = write!(out, "\tseed{s}");
        }
        out.push_str("\tmean\n");
        for v in self.variants() {
            out.push_str(v.name());
            for c in self.scores(v) {
                let _ = write!(out, "\t{c:.4}");
            }
            let _ = writeln!(out, "\t{:.4}", self.mean(v));
        }
        out
    }
}

/// Test-split CIDEr-D with document frequencies taken from the test
/// references themselves.
pub fn test_cider(model: &RfNet, test: &[Example], beam: usize, max_len: usize) -> Result<f64> {
    let refs: Vec<Vec<Vec<usize>>> = test.iter().map(|e| e.captions.clone()).collect();
    split_cider(model, test, &CiderD::new(&refs)?, beam, max_len)
}

/// Train and score one variant with one seed.
pub fn run_cell(ds: &Dataset, spec: &AblationSpec, variant: Ablation, seed: u64) -> Result<AblationRun> {
    let fusion = FusionConfig {
        ablation: variant,
        ..spec.fusion.clone()
    };
    let mut config = ModelConfig::new(fusion, ds.config.dims.clone(), ds.vocab.len());
    config.init_scale = spec.init_scale;
    let model = RfNet::new(config, &mut Rng::new(seed))?;
    let train = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let mut trainer = Trainer::new(model, TrainData::from_dataset(ds), train)?;
    let outcome = train_xe(&mut trainer, |_| {})?;
    Ok(AblationRun {
        variant,
        seed,
        best_epoch: outcome.best_epoch,
        val_cider: outcome.best_val_cider,
        test_cider: test_cider(&trainer.model, &ds.test, spec.beam, trainer.config.max_len)?,
    })
}

/// Every variant/seed cell, spread over `spec.threads` workers. Results do
/// not depend on the thread count. `on_run` sees cells as they finish.
pub fn run_ablation<F>(ds: &Dataset, spec: &AblationSpec, on_run: F) -> Result<AblationTable>
where
    F: Fn(&AblationRun) + Sync,
{
    if spec.variants.is_empty() || spec.seeds.is_empty() {
        return Err(Error::invalid("an ablation needs at least one variant and one seed"));
    }
    let cells: Vec<(Ablation, u64)> = spec
        .variants
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRun>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = spec.threads.clamp(1, cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(v, s)) = cells.get(i) else { break };
                let r = run_cell(ds, spec, v, s);
                if let Ok(run) = &r {
                    on_run(run);
                }
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let runs = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        seeds: spec.seeds.clone(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(variant: Ablation, seed: u64, c: f64) -> AblationRun {
        AblationRun {
            variant,
            seed,
            best_epoch: 0,
            val_cider: 0.0,
            test_cider: c,
        }
    }

    #[test]
    fn table_layout() {
        let t = AblationTable {
            seeds: vec![1, 2],
            runs: vec![
                run(Ablation::NoStageI, 1, 1.0),
                run(Ablation::NoStageI, 2, 2.0),
                run(Ablation::Full, 1, 3.0),
                run(Ablation::Full, 2, 4.5),
            ],
        };
        assert_eq!(t.mean(Ablation::Full), 3.75);
        assert_eq!(
            t.to_tsv(),
            "variant\tseed1\tseed2\tmean\nno-stage-I\t1.0000\t2.0000\t1.5000\nfull\t3.0000\t4.5000\t3.7500\n"
        );
    }
}
