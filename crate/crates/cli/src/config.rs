use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rfnet_core::corpus::{DatasetConfig, Split};
use rfnet_core::rfnet::{Ablation, FusionConfig, GradCheckSetup, ModelConfig};
use rfnet_core::trainer::TrainConfig;

/// Bad config file, bad value or bad flag combination.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub t1: usize,
    pub t2: usize,
    pub hidden: usize,
    pub ablation: Ablation,
    pub dropout: f64,
    pub views: Option<Vec<usize>>,
    pub init_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub data_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub beam: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<Ablation>,
    /// 0 means "as many as RFNET_THREADS or the machine allows".
    pub threads: usize,
}

/// Everything a command needs, loaded from a sectioned `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub run: RunSection,
    pub gradcheck: GradCheckSetup,
    pub gradcheck_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let f = FusionConfig::default();
        RunConfig {
            data: DatasetConfig::default(),
            model: ModelSection {
                t1: f.t1,
                t2: f.t2,
                hidden: f.hidden,
                ablation: f.ablation,
                dropout: f.dropout,
                views: None,
                init_scale: 0.1,
            },
            train: TrainConfig::default(),
            run: RunSection {
                data_dir: PathBuf::from("data"),
                checkpoint: None,
                split: Split::Test,
                beam: 3,
                seeds: (1..=5).collect(),
                variants: Ablation::ALL.to_vec(),
                threads: 0,
            },
            gradcheck: GradCheckSetup::default(),
            gradcheck_seed: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| err(format!("bad value `{v}` for `{key}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(format!("bad value `{v}` for `{key}` (expected true or false)"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Ok(Self::parse(&text)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["data", "model", "train", "run", "gradcheck"].contains(&section.as_str()) {
                    return Err(err(format!("line {}: unknown section `[{section}]`", n + 1)));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("line {}: expected `key = value`", n + 1)))?;
            if section.is_empty() {
                return Err(err(format!("line {}: `{}` appears before any section", n + 1, k.trim())));
            }
            cfg.set(&section, k.trim(), v.trim())
                .map_err(|e| err(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), ConfigError> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        match k {
            "data.dir" => self.run.data_dir = PathBuf::from(v),
            "data.train" => self.data.train = parse(k, v)?,
            "data.val" => self.data.val = parse(k, v)?,
            "data.test" => self.data.test = parse(k, v)?,
            "data.cells" => self.data.cells = list(k, v)?,
            "data.dims" => self.data.dims = list(k, v)?,
            "data.captions_min" => self.data.captions_min = parse(k, v)?,
            "data.captions_max" => self.data.captions_max = parse(k, v)?,
            "data.min_count" => self.data.min_count = parse(k, v)?,
            "data.max_caption_len" => self.data.max_caption_len = parse(k, v)?,
            "data.noise" => self.data.noise = parse(k, v)?,
            "data.seed" => self.data.seed = parse(k, v)?,

            "model.t1" => self.model.t1 = parse(k, v)?,
            "model.t2" => self.model.t2 = parse(k, v)?,
            "model.hidden" => self.model.hidden = parse(k, v)?,
            "model.ablation" => self.model.ablation = v.parse().map_err(|e| err(format!("{e}")))?,
            "model.dropout" => self.model.dropout = parse(k, v)?,
            "model.views" => self.model.views = if v == "all" { None } else { Some(list(k, v)?) },
            "model.init_scale" => self.model.init_scale = parse(k, v)?,

            "train.lr_xe" => self.train.lr_xe = parse(k, v)?,
            "train.lr_decay" => self.train.lr_decay = parse(k, v)?,
            "train.decay_every" => self.train.decay_every = parse(k, v)?,
            "train.lr_rl" => self.train.lr_rl = parse(k, v)?,
            "train.batch_size" => self.train.batch_size = parse(k, v)?,
            "train.lambda" => self.train.lambda = parse(k, v)?,
            "train.lsr" => self.train.lsr = parse(k, v)?,
            "train.ss_max" => self.train.ss_max = parse(k, v)?,
            "train.ss_ramp" => self.train.ss_ramp = parse(k, v)?,
            "train.patience_xe" => self.train.patience_xe = parse(k, v)?,
            "train.patience_rl" => self.train.patience_rl = parse(k, v)?,
            "train.max_epochs_xe" => self.train.max_epochs_xe = parse(k, v)?,
            "train.max_epochs_rl" => self.train.max_epochs_rl = parse(k, v)?,
            "train.clip" => {
                let c: f64 = parse(k, v)?;
                self.train.clip = (c > 0.0).then_some(c);
            }
            "train.max_len" => self.train.max_len = parse(k, v)?,
            "train.discriminative" => self.train.discriminative = boolean(k, v)?,
            "train.seed" => self.train.seed = parse(k, v)?,

            "run.checkpoint" => self.run.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "run.split" => self.run.split = v.parse().map_err(|e| err(format!("{e}")))?,
            "run.beam" => self.run.beam = parse(k, v)?,
            "run.seeds" => self.run.seeds = list(k, v)?,
            "run.variants" => {
                self.run.variants = v
                    .split(',')
                    .map(|x| x.trim().parse::<Ablation>().map_err(|e| err(format!("{e}"))))
                    .collect::<Result<_, _>>()?
            }
            "run.threads" => self.run.threads = parse(k, v)?,

            "gradcheck.views" => self.gradcheck.views = parse(k, v)?,
            "gradcheck.hidden" => self.gradcheck.hidden = parse(k, v)?,
            "gradcheck.t1" => self.gradcheck.t1 = parse(k, v)?,
            "gradcheck.t2" => self.gradcheck.t2 = parse(k, v)?,
            "gradcheck.annotations" => self.gradcheck.annotations = parse(k, v)?,
            "gradcheck.feature_dim" => self.gradcheck.feature_dim = parse(k, v)?,
            "gradcheck.vocab_size" => self.gradcheck.vocab_size = parse(k, v)?,
            "gradcheck.caption_words" => self.gradcheck.caption_words = parse(k, v)?,
            "gradcheck.lambda" => self.gradcheck.lambda = parse(k, v)?,
            "gradcheck.lsr" => self.gradcheck.lsr = parse(k, v)?,
            "gradcheck.step" => self.gradcheck.step = parse(k, v)?,
            "gradcheck.ablation" => self.gradcheck.ablation = v.parse().map_err(|e| err(format!("{e}")))?,
            "gradcheck.seed" => self.gradcheck_seed = parse(k, v)?,
            _ => return Err(err(format!("unknown key `{key}` in section [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.validate().map_err(|e| err(format!("[data] {e}")))?;
        self.fusion().validate().map_err(|e| err(format!("[model] {e}")))?;
        self.train.validate().map_err(|e| err(format!("[train] {e}")))?;
        if self.run.beam == 0 {
            return Err(err("[run] beam must be at least 1"));
        }
        if self.run.seeds.is_empty() || self.run.variants.is_empty() {
            return Err(err("[run] seeds and variants must not be empty"));
        }
        if !(self.model.init_scale > 0.0) {
            return Err(err("[model] init_scale must be positive"));
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            views: self.data.cells.len(),
            t1: self.model.t1,
            t2: self.model.t2,
            hidden: self.model.hidden,
            ablation: self.model.ablation,
            dropout: self.model.dropout,
            view_subset: self.model.views.clone(),
        }
    }

    pub fn model_config(&self, view_dims: Vec<usize>, vocab_size: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.fusion(), view_dims, vocab_size);
        cfg.init_scale = self.model.init_scale;
        cfg
    }

    /// The resolved configuration in the same format [`RunConfig::parse`]
    /// reads.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let d = &self.data;
        let _ = writeln!(o, "[data]");
        let _ = writeln!(o, "dir = {}", self.run.data_dir.display());
        let _ = writeln!(o, "train = {}\nval = {}\ntest = {}", d.train, d.val, d.test);
        let _ = writeln!(o, "cells = {}\ndims = {}", join(&d.cells), join(&d.dims));
        let _ = writeln!(o, "captions_min = {}\ncaptions_max = {}", d.captions_min, d.captions_max);
        let _ = writeln!(o, "min_count = {}\nmax_caption_len = {}", d.min_count, d.max_caption_len);
        let _ = writeln!(o, "noise = {}\nseed = {}", d.noise, d.seed);

        let m = &self.model;
        let _ = writeln!(o, "\n[model]");
        let _ = writeln!(o, "t1 = {}\nt2 = {}\nhidden = {}", m.t1, m.t2, m.hidden);
        let _ = writeln!(o, "ablation = {}\ndropout = {}", m.ablation, m.dropout);
        let _ = writeln!(o, "views = {}", m.views.as_deref().map_or("all".to_string(), join));
        let _ = writeln!(o, "init_scale = {}", m.init_scale);

        let t = &self.train;
        let _ = writeln!(o, "\n[train]");
        let _ = writeln!(o, "lr_xe = {}\nlr_decay = {}\ndecay_every = {}", t.lr_xe, t.lr_decay, t.decay_every);
        let _ = writeln!(o, "lr_rl = {}\nbatch_size = {}", t.lr_rl, t.batch_size);
        let _ = writeln!(o, "lambda = {}\nlsr = {}", t.lambda, t.lsr);
        let _ = writeln!(o, "ss_max = {}\nss_ramp = {}", t.ss_max, t.ss_ramp);
        let _ = writeln!(o, "patience_xe = {}\npatience_rl = {}", t.patience_xe, t.patience_rl);
        let _ = writeln!(o, "max_epochs_xe = {}\nmax_epochs_rl = {}", t.max_epochs_xe, t.max_epochs_rl);
        let _ = writeln!(o, "clip = {}", t.clip.unwrap_or(0.0));
        let _ = writeln!(o, "max_len = {}\ndiscriminative = {}\nseed = {}", t.max_len, t.discriminative, t.seed);

        let r = &self.run;
        let _ = writeln!(o, "\n[run]");
        let _ = writeln!(o, "checkpoint = {}", r.checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string()));
        let _ = writeln!(o, "split = {}\nbeam = {}", r.split.name(), r.beam);
        let _ = writeln!(o, "seeds = {}\nvariants = {}", join(&r.seeds), join(&r.variants));
        let _ = writeln!(o, "threads = {}", r.threads);

        let g = &self.gradcheck;
        let _ = writeln!(o, "\n[gradcheck]");
        let _ = writeln!(o, "views = {}\nhidden = {}\nt1 = {}\nt2 = {}", g.views, g.hidden, g.t1, g.t2);
        let _ = writeln!(o, "annotations = {}\nfeature_dim = {}", g.annotations, g.feature_dim);
        let _ = writeln!(o, "vocab_size = {}\ncaption_words = {}", g.vocab_size, g.caption_words);
        let _ = writeln!(o, "lambda = {}\nlsr = {}\nstep = {}", g.lambda, g.lsr, g.step);
        let _ = writeln!(o, "ablation = {}\nseed = {}", g.ablation, self.gradcheck_seed);
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse("# profile\n[train]\nlambda = 0  # off\nclip = 0\n[model]\nviews = 0,2\n").unwrap();
        assert_eq!(cfg.train.lambda, 0.0);
        assert_eq!(cfg.train.clip, None);
        assert_eq!(cfg.model.views, Some(vec![0, 2]));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        assert!(RunConfig::parse("[train]\nlearning_rate = 1\n").is_err());
        assert!(RunConfig::parse("[optim]\n").is_err());
        assert!(RunConfig::parse("lambda = 1\n").is_err());
        assert!(RunConfig::parse("[train]\nlambda = lots\n").is_err());
        assert!(RunConfig::parse("[model]\nviews = 0,5\n").is_err());
    }
}
