//! Binary checkpoint format.
//!
//! ```text
//! "UEDN" | version u32 | json_len u32 | json
//! | count u32 | { name_len u16 | name | rank u8 | dims u64* | f32 LE* }   parameters
//! | count u32 | { same framing }                                      adam.m/* and adam.v/*
//! | count u32 | { same framing, raw u32 words }                       rng.*
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::StreamState;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamStore, Tensor};

use super::adam::{AdamConfig, OptimState};

pub const MAGIC: &[u8; 4] = b"UEDN";
pub const FORMAT_VERSION: u32 = 1;

/// JSON header of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Resolved run configuration, kept for reproducibility.
    #[serde(default)]
    pub run: serde_json::Value,
    pub step: u64,
    /// Tokens by id, so decoding needs no side files.
    #[serde(default)]
    pub vocab: Vec<String>,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default)]
    pub adam: Option<AdamConfig>,
    #[serde(default)]
    pub adam_step: u64,
}

/// Batch stream position plus the seed it was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: StreamState,
}

impl RngState {
    fn to_words(self) -> Vec<u32> {
        let mut w = Vec::with_capacity(10);
        let split = |x: u64| [x as u32, (x >> 32) as u32];
        w.extend(split(self.seed));
        w.extend(split(self.stream.epoch));
        w.extend(split(self.stream.cursor as u64));
        let p = self.stream.rng_word_pos;
        w.extend(split(p as u64));
        w.extend(split((p >> 64) as u64));
        w
    }

    fn from_words(w: &[u32]) -> Result<Self> {
        if w.len() != 10 {
            return Err(Error::Integrity(format!("rng block holds {} words, expected 10", w.len())));
        }
        let join = |i: usize| w[i] as u64 | (w[i + 1] as u64) << 32;
        Ok(RngState {
            seed: join(0),
            stream: StreamState {
                epoch: join(2),
                cursor: join(4) as usize,
                rng_word_pos: join(6) as u128 | (join(8) as u128) << 64,
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optim: Option<OptimState<f32>>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, step: u64) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                run: serde_json::Value::Null,
                step,
                vocab: Vec::new(),
                answers: Vec::new(),
                adam: None,
                adam_step: 0,
            },
            params: model.params.clone(),
            optim: None,
            rng: None,
        }
    }

    /// Rebuild the model described by the header and load every tensor.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut m = Model::new(self.meta.model.clone(), 0)?;
        self.load_into(&mut m)?;
        Ok(m)
    }

    /// Overwrite `model`'s parameters. Every parameter must be present with
    /// its exact shape; extra tensors (say, a head the model lacks) are
    /// ignored.
    pub fn load_into(&self, model: &mut Model<f32>) -> Result<()> {
        for (name, t) in model.params.iter() {
            match self.params.by_name(name) {
                None => return Err(Error::Integrity(format!("checkpoint lacks tensor `{name}`"))),
                Some(c) if c.shape() != t.shape() => {
                    return Err(Error::Shape {
                        op: "load parameter",
                        lhs: t.shape().to_vec(),
                        rhs: c.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        model.params.overwrite_from(&self.params)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        if let Some(o) = &self.optim {
            meta.adam = Some(o.config);
            meta.adam_step = o.step;
        }
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);

        let params: Vec<(&str, &Tensor<f32>)> = self.params.iter().collect();
        write_block(&mut out, params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec(), bits(t.data()))))?;

        let mut opt = Vec::new();
        if let Some(o) = &self.optim {
            if o.m.len() != params.len() {
                return Err(Error::contract("optimizer state does not match the parameter table"));
            }
            for (k, (name, _)) in params.iter().enumerate() {
                opt.push((format!("adam.m/{name}"), o.m[k].shape().to_vec(), bits(o.m[k].data())));
            }
            for (k, (name, _)) in params.iter().enumerate() {
                opt.push((format!("adam.v/{name}"), o.v[k].shape().to_vec(), bits(o.v[k].data())));
            }
        }
        write_block(&mut out, opt.into_iter())?;

        let rng = self.rng.map(|r| {
            let w = r.to_words();
            ("rng.stream".to_string(), vec![w.len()], w)
        });
        write_block(&mut out, rng.into_iter())?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Version {
                found: format!("magic {:?}", String::from_utf8_lossy(magic)),
                expected: format!("magic {:?}", "UEDN"),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let jl = r.u32("header length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(jl, "header")?)?;

        let mut params = ParamStore::new();
        for (name, shape, words) in read_block(&mut r)? {
            params.add(name, Tensor::new(shape, floats(&words))?)?;
        }

        let opt = read_block(&mut r)?;
        let optim = if opt.is_empty() {
            None
        } else {
            let n = params.len();
            if opt.len() != 2 * n {
                return Err(Error::Integrity(format!("optimizer block has {} tensors for {n} parameters", opt.len())));
            }
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for (k, (name, shape, words)) in opt.into_iter().enumerate() {
                let (prefix, dst) = if k < n { ("adam.m/", &mut m) } else { ("adam.v/", &mut v) };
                let pname = params.name(crate::tensor::ParamId(k % n));
                if name != format!("{prefix}{pname}") {
                    return Err(Error::Integrity(format!("unexpected optimizer tensor `{name}`")));
                }
                dst.push(Tensor::new(shape, floats(&words))?);
            }
            Some(OptimState {
                config: meta.adam.unwrap_or_default(),
                step: meta.adam_step,
                m,
                v,
            })
        };

        let rng_block = read_block(&mut r)?;
        let rng = match rng_block.as_slice() {
            [] => None,
            [(name, _, words)] if name == "rng.stream" => Some(RngState::from_words(words)?),
            _ => return Err(Error::Integrity("unrecognised rng block".into())),
        };
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            meta,
            params,
            optim,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract(format!("length {n} overflows u32")))
}

fn bits(data: &[f32]) -> Vec<u32> {
    data.iter().map(|x| x.to_bits()).collect()
}

fn floats(words: &[u32]) -> Vec<f32> {
    words.iter().map(|&w| f32::from_bits(w)).collect()
}

type Record = (String, Vec<usize>, Vec<u32>);

fn write_block(out: &mut Vec<u8>, records: impl Iterator<Item = Record>) -> Result<()> {
    let records: Vec<Record> = records.collect();
    out.extend_from_slice(&len_u32(records.len())?.to_le_bytes());
    for (name, shape, words) in records {
        let nl = u16::try_from(name.len()).map_err(|_| Error::contract(format!("tensor name `{name}` too long")))?;
        let rank = u8::try_from(shape.len()).map_err(|_| Error::contract(format!("tensor `{name}` rank too high")))?;
        out.extend_from_slice(&nl.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Integrity(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn read_block(r: &mut Reader<'_>) -> Result<Vec<Record>> {
    let n = r.u32("block count")?;
    let mut out = Vec::new();
    for _ in 0..n {
        let nl = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(nl, "name")?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.take(8, "dims")?.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| Error::Integrity(format!("dimension {d} of `{name}`")))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Integrity(format!("tensor `{name}` size overflows")))?;
        let raw = r.take(len, &format!("data of `{name}`"))?;
        let words = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, shape, words));
    }
    Ok(out)
}
