//! Versioned binary checkpoint.
//!
//! Layout: magic `RFN1`, `u32` format version, `u32` record count, then
//! records of `u32` name length, UTF-8 name, `u64` payload length, payload.
//! All integers and floats are little-endian. Records:
//!
//! | name              | payload                                          |
//! |-------------------|--------------------------------------------------|
//! | `config`          | model configuration, `key = value` text          |
//! | `run_config`      | free-form echo of the run configuration          |
//! | `vocab`           | `token<TAB>count` lines in id order              |
//! | `epoch`           | `u64`                                            |
//! | `seed`            | `u64`                                            |
//! | `rng`             | `u64` seed, `u64` stream, `u128` word position   |
//! | `param/<name>`    | `u32` rows, `u32` cols, `f64` values row-major   |
//! | `adam`            | `u64` steps, `f64` beta1, beta2, epsilon         |
//! | `adam.m/<name>`   | tensor, as for parameters                        |
//! | `adam.v/<name>`   | tensor, as for parameters                        |

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Rng, RngState, Tensor};

use super::config::ModelConfig;
use super::model::RfNet;

const MAGIC: &[u8; 4] = b"RFN1";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: RfNet,
    pub vocab: Vocabulary,
    pub adam: Option<AdamState>,
    pub epoch: u64,
    pub seed: u64,
    pub rng: Option<RngState>,
    pub run_config: String,
}

fn text(payload: &[u8], what: &str) -> Result<String> {
    String::from_utf8(payload.to_vec()).map_err(|_| Error::Format(format!("checkpoint {what}: invalid utf-8")))
}

impl Checkpoint {
    pub fn new(model: RfNet, vocab: Vocabulary) -> Self {
        Checkpoint {
            model,
            vocab,
            adam: None,
            epoch: 0,
            seed: 0,
            rng: None,
            run_config: String::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records = Writer::new();
        let mut count = 0u32;
        let mut put = |name: &str, payload: &[u8]| {
            records.record(name, payload);
            count += 1;
        };
        put("config", self.model.config().to_text().as_bytes());
        put("run_config", self.run_config.as_bytes());
        put("vocab", self.vocab.to_text().as_bytes());
        put("epoch", &self.epoch.to_le_bytes());
        put("seed", &self.seed.to_le_bytes());
        if let Some(s) = self.rng {
            let mut w = Writer::new();
            w.u64(s.seed);
            w.u64(s.stream);
            w.u128(s.word_pos);
            put("rng", &w.buf);
        }
        let tensor = |t: &Tensor| {
            let mut w = Writer::new();
            w.tensor(t);
            w.buf
        };
        for p in self.model.params.iter() {
            put(&format!("param/{}", p.name), &tensor(&p.value));
        }
        if let Some(adam) = &self.adam {
            let mut w = Writer::new();
            w.u64(adam.step_count);
            w.f64(adam.beta1);
            w.f64(adam.beta2);
            w.f64(adam.epsilon);
            put("adam", &w.buf);
            for (i, p) in self.model.params.iter().enumerate() {
                put(&format!("adam.m/{}", p.name), &tensor(&adam.first[i]));
                put(&format!("adam.v/{}", p.name), &tensor(&adam.second[i]));
            }
        }
        let mut out = Writer::new();
        out.buf.extend_from_slice(MAGIC);
        out.u32(VERSION);
        out.u32(count);
        out.buf.extend_from_slice(&records.buf);
        out.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut records: HashMap<&str, &[u8]> = HashMap::new();
        for _ in 0..count {
            let (name, payload) = r.record()?;
            if records.insert(name, payload).is_some() {
                return Err(Error::Format(format!("duplicate checkpoint record `{name}`")));
            }
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after checkpoint records".into()));
        }
        let need = |name: &str| {
            records
                .get(name)
                .copied()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks record `{name}`")))
        };
        let u64_of = |name: &str| -> Result<u64> {
            let mut rd = Reader::new(need(name)?);
            let v = rd.u64()?;
            if !rd.is_done() {
                return Err(Error::Format(format!("record `{name}` has trailing bytes")));
            }
            Ok(v)
        };
        let tensor_of = |name: &str, shape: [usize; 2]| -> Result<Tensor> {
            let mut rd = Reader::new(need(name)?);
            let t = rd.tensor()?;
            if t.shape() != shape || !rd.is_done() {
                return Err(Error::Format(format!(
                    "record `{name}`: expected a {}x{} tensor",
                    shape[0], shape[1]
                )));
            }
            Ok(t)
        };

        let config = ModelConfig::from_text(&text(need("config")?, "config")?)?;
        let mut model = RfNet::new(config, &mut Rng::new(0))?;
        let vocab = Vocabulary::from_text(&text(need("vocab")?, "vocab")?)?;
        if vocab.len() != model.config().vocab_size {
            return Err(Error::Format(format!(
                "vocabulary of {} entries for a model of {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        for p in model.params.iter_mut() {
            p.value = tensor_of(&format!("param/{}", p.name), p.value.shape())?;
        }
        let adam = match records.get("adam") {
            None => None,
            Some(payload) => {
                let mut rd = Reader::new(payload);
                let step_count = rd.u64()?;
                let (b1, b2, eps) = (rd.f64()?, rd.f64()?, rd.f64()?);
                let mut state = AdamState::with_hyper(&model.params, b1, b2, eps);
                state.step_count = step_count;
                for (i, p) in model.params.iter().enumerate() {
                    state.first[i] = tensor_of(&format!("adam.m/{}", p.name), p.value.shape())?;
                    state.second[i] = tensor_of(&format!("adam.v/{}", p.name), p.value.shape())?;
                }
                Some(state)
            }
        };
        let rng = match records.get("rng") {
            None => None,
            Some(payload) => {
                let mut rd = Reader::new(payload);
                Some(RngState {
                    seed: rd.u64()?,
                    stream: rd.u64()?,
                    word_pos: rd.u128()?,
                })
            }
        };
        Ok(Checkpoint {
            model,
            vocab,
            adam,
            epoch: u64_of("epoch")?,
            seed: u64_of("seed")?,
            rng,
            run_config: text(need("run_config")?, "run_config")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&data)
    }
}
