use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::rfnet::{EncoderOutput, ViewFeatures};

use super::encoder::{encode_scene, SyntheticEncoder};
use super::scene::{Object, Scene, TEMPLATE_COUNT};
use super::vocab::{Vocabulary, END, START};

const RECORD_MAGIC: &[u8; 4] = b"RFD1";
const MANIFEST_FORMAT: &str = "rfnet-dataset-1";

/// Parameters of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Annotation vectors per view; its length is the view count.
    pub cells: Vec<usize>,
    /// Feature width per view.
    pub dims: Vec<usize>,
    pub captions_min: usize,
    pub captions_max: usize,
    pub min_count: u64,
    pub max_caption_len: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 2000,
            val: 200,
            test: 200,
            cells: vec![4, 6, 8],
            dims: vec![32, 32, 32],
            captions_min: 2,
            captions_max: 5,
            min_count: 5,
            max_caption_len: 16,
            noise: 0.05,
            seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn views(&self) -> usize {
        self.cells.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::invalid("every split needs at least one scene"));
        }
        if self.cells.is_empty() || self.cells.len() != self.dims.len() {
            return Err(Error::invalid(format!(
                "{} cell counts for {} feature widths",
                self.cells.len(),
                self.dims.len()
            )));
        }
        if self.captions_min == 0 || self.captions_min > self.captions_max || self.captions_max > TEMPLATE_COUNT {
            return Err(Error::invalid(format!(
                "captions per scene must satisfy 1 <= min <= max <= {TEMPLATE_COUNT}"
            )));
        }
        if self.min_count == 0 {
            return Err(Error::invalid("min_count must be at least 1"));
        }
        if self.max_caption_len == 0 {
            return Err(Error::invalid("max caption length must be positive"));
        }
        Ok(())
    }

    pub fn encoders(&self) -> Result<Vec<SyntheticEncoder>> {
        self.cells
            .iter()
            .zip(&self.dims)
            .enumerate()
            .map(|(m, (&k, &d))| SyntheticEncoder::new(m, k, d, self.noise, self.seed))
            .collect()
    }

    fn manifest(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "format = {MANIFEST_FORMAT}\nseed = {}\ntrain = {}\nval = {}\ntest = {}\ncells = {}\ndims = {}\n\
             captions_min = {}\ncaptions_max = {}\nmin_count = {}\nmax_caption_len = {}\nnoise = {}\n",
            self.seed,
            self.train,
            self.val,
            self.test,
            join(&self.cells),
            join(&self.dims),
            self.captions_min,
            self.captions_max,
            self.min_count,
            self.max_caption_len,
            self.noise
        )
    }

    fn from_manifest(text: &str) -> Result<Self> {
        let mut cfg = DatasetConfig::default();
        let mut format = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest: malformed line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Format(format!("manifest: bad value `{v}` for `{k}`"));
            let list = || -> Result<Vec<usize>> { v.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect() };
            match k {
                "format" => format = Some(v.to_string()),
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "train" => cfg.train = v.parse().map_err(|_| bad())?,
                "val" => cfg.val = v.parse().map_err(|_| bad())?,
                "test" => cfg.test = v.parse().map_err(|_| bad())?,
                "cells" => cfg.cells = list()?,
                "dims" => cfg.dims = list()?,
                "captions_min" => cfg.captions_min = v.parse().map_err(|_| bad())?,
                "captions_max" => cfg.captions_max = v.parse().map_err(|_| bad())?,
                "min_count" => cfg.min_count = v.parse().map_err(|_| bad())?,
                "max_caption_len" => cfg.max_caption_len = v.parse().map_err(|_| bad())?,
                "noise" => cfg.noise = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Format(format!("manifest: unknown key `{k}`"))),
            }
        }
        if format.as_deref() != Some(MANIFEST_FORMAT) {
            return Err(Error::Format(format!("manifest: expected format `{MANIFEST_FORMAT}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One scene with its reference captions (word ids, no START/END) and
/// encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub scene: Scene,
    pub captions: Vec<Vec<usize>>,
    pub features: EncoderOutput,
}

/// Caption framed by START and END.
pub fn with_markers(words: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(words.len() + 2);
    out.push(START);
    out.extend_from_slice(words);
    out.push(END);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

struct RawExample {
    scene: Scene,
    captions: Vec<Vec<&'static str>>,
    features: EncoderOutput,
}

fn generate_scene(cfg: &DatasetConfig, encoders: &[SyntheticEncoder], index: usize) -> Result<RawExample> {
    let mut rng = Rng::with_stream(cfg.seed, index as u64);
    let scene = Scene::random(&mut rng);
    let n = cfg.captions_min + rng.below(cfg.captions_max - cfg.captions_min + 1);
    let mut templates: Vec<usize> = (0..TEMPLATE_COUNT).collect();
    rng.shuffle(&mut templates);
    let mut chosen = templates[..n].to_vec();
    chosen.sort_unstable();
    let captions: Vec<Vec<&'static str>> = chosen.iter().map(|&t| scene.caption(t)).collect();
    if let Some(c) = captions.iter().find(|c| c.len() > cfg.max_caption_len) {
        return Err(Error::invalid(format!(
            "caption of {} tokens exceeds the maximum of {}",
            c.len(),
            cfg.max_caption_len
        )));
    }
    let features = encode_scene(encoders, &scene, &mut rng);
    Ok(RawExample {
        scene,
        captions,
        features,
    })
}

/// Scenes `0..train`, then validation, then test. Scene `i` draws from rng
/// stream `i`, so any subset can be regenerated independently.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let encoders = cfg.encoders()?;
    let total = cfg.train + cfg.val + cfg.test;
    let raw = (0..total)
        .map(|i| generate_scene(cfg, &encoders, i))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::build(
        raw[..cfg.train].iter().flat_map(|r| r.captions.iter().map(|c| c.iter().copied())),
        cfg.min_count,
    )?;
    let mut examples = raw.into_iter().map(|r| Example {
        captions: r.captions.iter().map(|c| vocab.encode(c)).collect(),
        scene: r.scene,
        features: r.features,
    });
    let train = examples.by_ref().take(cfg.train).collect();
    let val = examples.by_ref().take(cfg.val).collect();
    let test = examples.collect();
    Ok(Dataset {
        config: cfg.clone(),
        vocab,
        train,
        val,
        test,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Write `manifest.txt`, `vocab.txt` and one record file per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.txt"), self.config.manifest())?;
        fs::write(dir.join("vocab.txt"), self.vocab.to_text())?;
        for split in [Split::Train, Split::Val, Split::Test] {
            fs::write(dir.join(format!("{}.bin", split.name())), encode_split(self.split(split)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
            })
        };
        let text = |name: &str| -> Result<String> {
            String::from_utf8(read(name)?).map_err(|_| Error::Format(format!("{name}: invalid utf-8")))
        };
        let config = DatasetConfig::from_manifest(&text("manifest.txt")?)?;
        let vocab = Vocabulary::from_text(&text("vocab.txt")?)?;
        let mut splits = Vec::with_capacity(3);
        for (split, expected) in [(Split::Train, config.train), (Split::Val, config.val), (Split::Test, config.test)] {
            let name = format!("{}.bin", split.name());
            let examples = decode_split(&read(&name)?, vocab.len())
                .map_err(|e| Error::Format(format!("{name}: {e}")))?;
            if examples.len() != expected {
                return Err(Error::Format(format!(
                    "{name}: {} records, manifest says {expected}",
                    examples.len()
                )));
            }
            splits.push(examples);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Dataset {
            config,
            vocab,
            train,
            val,
            test,
        })
    }
}

fn encode_split(examples: &[Example]) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(RECORD_MAGIC);
    w.u64(examples.len() as u64);
    for ex in examples {
        let mut r = Writer::new();
        r.u8(ex.scene.objects.len() as u8);
        for o in &ex.scene.objects {
            for v in [o.shape, o.color, o.size, o.position] {
                r.u8(v);
            }
        }
        r.u32(ex.captions.len() as u32);
        for c in &ex.captions {
            r.u32(c.len() as u32);
            for &id in c {
                r.u32(id as u32);
            }
        }
        r.u32(ex.features.views.len() as u32);
        for v in &ex.features.views {
            r.tensor(&v.annotations);
            for &x in &v.global {
                r.f64(x);
            }
        }
        w.bytes(&r.buf);
    }
    w.buf
}

fn decode_split(data: &[u8], vocab_len: usize) -> Result<Vec<Example>> {
    let mut r = Reader::new(data);
    if r.take(4)? != RECORD_MAGIC {
        return Err(Error::Format("bad record file magic".into()));
    }
    let n = r.len()?;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let mut rec = Reader::new(r.bytes()?);
        let count = rec.u8()? as usize;
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            objects.push(Object {
                shape: rec.u8()?,
                color: rec.u8()?,
                size: rec.u8()?,
                position: rec.u8()?,
            });
        }
        let scene = Scene::new(objects)?;
        let n_caps = rec.u32()? as usize;
        let mut captions = Vec::with_capacity(n_caps.min(64));
        for _ in 0..n_caps {
            let len = rec.u32()? as usize;
            let mut c = Vec::with_capacity(len.min(256));
            for _ in 0..len {
                let id = rec.u32()? as usize;
                if id >= vocab_len {
                    return Err(Error::Format(format!("token id {id} outside vocabulary")));
                }
                c.push(id);
            }
            captions.push(c);
        }
        let n_views = rec.u32()? as usize;
        let mut views = Vec::with_capacity(n_views.min(64));
        for _ in 0..n_views {
            let annotations: Tensor = rec.tensor()?;
            let mut global = Vec::with_capacity(annotations.cols());
            for _ in 0..annotations.cols() {
                global.push(rec.f64()?);
            }
            views.push(ViewFeatures { global, annotations });
        }
        if !rec.is_done() {
            return Err(Error::Format("trailing bytes in record".into()));
        }
        out.push(Example {
            scene,
            captions,
            features: EncoderOutput { views },
        });
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}
