use std::fmt;
use std::str::FromStr;

use crate::corpus::RESERVED;
use crate::error::{Error, Result};

/// Which parts of the fusion procedure are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    /// Stage II attends the raw annotation sets; no review components.
    NoStageI,
    /// The decoder attends the stage-I thought vectors directly.
    NoStageII,
    /// Each review component sees only its own previous hidden state.
    NoInteraction,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoStageI,
        Ablation::NoStageII,
        Ablation::NoInteraction,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoStageI => "no-stage-I",
            Ablation::NoStageII => "no-stage-II",
            Ablation::NoInteraction => "no-interaction",
        }
    }

    pub fn has_stage1(self) -> bool {
        self != Ablation::NoStageI
    }

    pub fn has_stage2(self) -> bool {
        self != Ablation::NoStageII
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Ablation::Full),
            "no-stage-i" | "no-stage1" | "no-stage-1" => Ok(Ablation::NoStageI),
            "no-stage-ii" | "no-stage2" | "no-stage-2" => Ok(Ablation::NoStageII),
            "no-interaction" => Ok(Ablation::NoInteraction),
            other => Err(Error::invalid(format!(
                "unknown ablation `{other}` (expected full, no-stage-I, no-stage-II or no-interaction)"
            ))),
        }
    }
}

/// Shape of the fusion procedure.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Number of views in the encoder output.
    pub views: usize,
    pub t1: usize,
    pub t2: usize,
    pub hidden: usize,
    pub ablation: Ablation,
    pub dropout: f64,
    /// Restrict the model to these views of the encoder output.
    pub view_subset: Option<Vec<usize>>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            views: 3,
            t1: 2,
            t2: 2,
            hidden: 64,
            ablation: Ablation::Full,
            dropout: 0.3,
            view_subset: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.t1 == 0 || self.t2 == 0 || self.hidden == 0 {
            return Err(Error::invalid("views, t1, t2 and hidden must all be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(subset) = &self.view_subset {
            if subset.is_empty() {
                return Err(Error::invalid("view subset is empty"));
            }
            for (i, &v) in subset.iter().enumerate() {
                if v >= self.views {
                    return Err(Error::invalid(format!("view index {v} out of range for {} views", self.views)));
                }
                if subset[..i].contains(&v) {
                    return Err(Error::invalid(format!("view index {v} listed twice")));
                }
            }
        }
        Ok(())
    }

    /// Encoder views the model actually consumes, in order.
    pub fn active_views(&self) -> Vec<usize> {
        match &self.view_subset {
            Some(v) => v.clone(),
            None => (0..self.views).collect(),
        }
    }
}

/// Everything needed to construct an [`RfNet`](super::RfNet).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    /// Feature width of every encoder view (length `fusion.views`).
    pub view_dims: Vec<usize>,
    pub vocab_size: usize,
    pub n_frequent: usize,
    pub embed: usize,
    pub attention: usize,
    pub init_scale: f64,
}

impl ModelConfig {
    /// Embedding and attention sizes follow the hidden size; every
    /// non-reserved word (at most 1000) counts as frequent.
    pub fn new(fusion: FusionConfig, view_dims: Vec<usize>, vocab_size: usize) -> Self {
        let s = fusion.hidden;
        ModelConfig {
            fusion,
            view_dims,
            vocab_size,
            n_frequent: vocab_size.saturating_sub(RESERVED).clamp(1, 1000),
            embed: s,
            attention: s,
            init_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.view_dims.len() != self.fusion.views {
            return Err(Error::ViewCountMismatch {
                expected: self.fusion.views,
                actual: self.view_dims.len(),
            });
        }
        if self.view_dims.contains(&0) {
            return Err(Error::invalid("view feature width must be positive"));
        }
        if self.vocab_size < 5 {
            return Err(Error::invalid("vocabulary must hold the reserved tokens and at least one word"));
        }
        if self.n_frequent == 0 || self.n_frequent > self.vocab_size {
            return Err(Error::invalid(format!(
                "n_frequent {} must be in 1..={}",
                self.n_frequent, self.vocab_size
            )));
        }
        if self.embed == 0 || self.attention == 0 {
            return Err(Error::invalid("embedding and attention sizes must be positive"));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::invalid("init scale must be positive"));
        }
        Ok(())
    }

    /// `key = value` lines, read back by [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let f = &self.fusion;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        out += &format!("views = {}\n", f.views);
        out += &format!("t1 = {}\n", f.t1);
        out += &format!("t2 = {}\n", f.t2);
        out += &format!("hidden = {}\n", f.hidden);
        out += &format!("ablation = {}\n", f.ablation);
        out += &format!("dropout = {}\n", f.dropout);
        if let Some(sub) = &f.view_subset {
            out += &format!("view_subset = {}\n", join(sub));
        }
        out += &format!("view_dims = {}\n", join(&self.view_dims));
        out += &format!("vocab_size = {}\n", self.vocab_size);
        out += &format!("n_frequent = {}\n", self.n_frequent);
        out += &format!("embed = {}\n", self.embed);
        out += &format!("attention = {}\n", self.attention);
        out += &format!("init_scale = {}\n", self.init_scale);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |k: &str, v: &str| Error::Format(format!("model config: bad value `{v}` for `{k}`"));
        let mut cfg = ModelConfig::new(FusionConfig::default(), Vec::new(), 0);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("model config: malformed line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<usize>().map_err(|_| bad(k, v));
            let list = || -> Result<Vec<usize>> {
                v.split(',').map(|x| x.trim().parse::<usize>().map_err(|_| bad(k, v))).collect()
            };
            match k {
                "views" => cfg.fusion.views = num()?,
                "t1" => cfg.fusion.t1 = num()?,
                "t2" => cfg.fusion.t2 = num()?,
                "hidden" => cfg.fusion.hidden = num()?,
                "ablation" => cfg.fusion.ablation = v.parse()?,
                "dropout" => cfg.fusion.dropout = v.parse().map_err(|_| bad(k, v))?,
                "view_subset" => cfg.fusion.view_subset = Some(list()?),
                "view_dims" => cfg.view_dims = list()?,
                "vocab_size" => cfg.vocab_size = num()?,
                "n_frequent" => cfg.n_frequent = num()?,
                "embed" => cfg.embed = num()?,
                "attention" => cfg.attention = num()?,
                "init_scale" => cfg.init_scale = v.parse().map_err(|_| bad(k, v))?,
                _ => return Err(Error::Format(format!("model config: unknown key `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("partial".parse::<Ablation>().is_err());
    }

    #[test]
    fn rejects_bad_subset() {
        let mut f = FusionConfig {
            view_subset: Some(vec![0, 3]),
            ..FusionConfig::default()
        };
        assert!(f.validate().is_err());
        f.view_subset = Some(vec![1, 1]);
        assert!(f.validate().is_err());
        f.view_subset = Some(vec![2, 0]);
        assert!(f.validate().is_ok());
        assert_eq!(f.active_views(), vec![2, 0]);
    }

    #[test]
    fn model_config_text_round_trip() {
        let mut cfg = ModelConfig::new(
            FusionConfig {
                ablation: Ablation::NoStageII,
                view_subset: Some(vec![1, 2]),
                ..FusionConfig::default()
            },
            vec![16, 24, 32],
            60,
        );
        cfg.init_scale = 0.08;
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }
}
