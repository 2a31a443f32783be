//! Versioned checkpoint files.
//!
//! Layout: a UTF-8 header of newline-terminated lines, then the raw tensor
//! data as little-endian `f32`.
//!
//! ```text
//! bugprio-checkpoint 1
//! stage mlm
//! vocab <sha-256 hex>
//! config <key> = <value>          (one line per RunConfig key)
//! tensor <name> <d0>x<d1>... <offset> <count>
//! data <byte length>
//! <blob>
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &str = "bugprio-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mlm,
    Cl,
    Finetuned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Mlm => "mlm",
            Stage::Cl => "cl",
            Stage::Finetuned => "finetuned",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(Stage::Mlm),
            "cl" => Ok(Stage::Cl),
            "finetuned" => Ok(Stage::Finetuned),
            _ => Err(Error::Checkpoint(format!("unknown stage tag {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub vocab_hash: String,
    pub config: RunConfig,
    pub model: Model<f32>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        vocab: &Vocabulary,
        config: RunConfig,
        model: Model<f32>,
    ) -> Result<Self> {
        if config.encoder != model.config {
            return Err(ck(
                "config snapshot disagrees with the model's encoder config",
            ));
        }
        if model.config.vocab_size != vocab.len() {
            return Err(ck(format!(
                "model vocabulary size {} but vocabulary has {} ids",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            stage,
            vocab_hash: vocab.fingerprint(),
            config,
            model,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!(
            "{MAGIC} {VERSION}\nstage {}\nvocab {}\n",
            self.stage, self.vocab_hash
        );
        for (k, v) in self.config.entries() {
            header.push_str(&format!("config {k} = {v}\n"));
        }
        let mut offset = 0usize;
        let named = self.model.named_tensors();
        for (name, t) in &named {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!(
                "tensor {name} {} {offset} {}\n",
                dims.join("x"),
                t.numel()
            ));
            offset += t.numel();
        }
        header.push_str(&format!("data {}\n", offset * 4));
        let mut out = header.into_bytes();
        out.reserve(offset * 4);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| ck("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| ck("header is not UTF-8"))
        };

        let first = next_line()?;
        let (magic, version) = first
            .split_once(' ')
            .ok_or_else(|| ck("missing magic line"))?;
        if magic != MAGIC {
            return Err(ck("not a checkpoint file"));
        }
        let version: u32 = version.parse().map_err(|_| ck("bad version field"))?;
        if version != VERSION {
            return Err(ck(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let stage: Stage = next_line()?
            .strip_prefix("stage ")
            .ok_or_else(|| ck("missing stage line"))?
            .parse()?;
        let vocab_hash = next_line()?
            .strip_prefix("vocab ")
            .ok_or_else(|| ck("missing vocab line"))?
            .to_string();

        let mut config_text = String::new();
        let mut manifest: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        let data_len = loop {
            let line = next_line()?;
            if let Some(kv) = line.strip_prefix("config ") {
                config_text.push_str(kv);
                config_text.push('\n');
            } else if let Some(t) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = t.split(' ').collect();
                if f.len() != 4 {
                    return Err(ck(format!("malformed tensor line {line:?}")));
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| ck(format!("bad shape in {line:?}")))?;
                let offset = f[2]
                    .parse()
                    .map_err(|_| ck(format!("bad offset in {line:?}")))?;
                let count = f[3]
                    .parse()
                    .map_err(|_| ck(format!("bad count in {line:?}")))?;
                manifest.push((f[0].to_string(), shape, offset, count));
            } else if let Some(n) = line.strip_prefix("data ") {
                break n.parse::<usize>().map_err(|_| ck("bad data length"))?;
            } else {
                return Err(ck(format!("unexpected header line {line:?}")));
            }
        };
        let config =
            RunConfig::parse(&config_text).map_err(|e| ck(format!("config snapshot: {e}")))?;
        let blob = &bytes[pos..];
        if blob.len() < data_len {
            return Err(ck(format!(
                "truncated data: {} of {data_len} bytes",
                blob.len()
            )));
        }
        if blob.len() > data_len {
            return Err(ck("trailing bytes after tensor data"));
        }

        let expected = Model::<f32>::expected_shapes(&config.encoder)?;
        if expected.len() != manifest.len() {
            return Err(ck(format!(
                "manifest lists {} tensors, config implies {}",
                manifest.len(),
                expected.len()
            )));
        }
        let mut model: Model<f32> = {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            Model::init(config.encoder, &mut rng)?
        };
        let mut cursor = 0usize;
        for ((name, shape, offset, count), ((ename, eshape), slot)) in manifest
            .iter()
            .zip(expected.iter().zip(model.tensors_mut()))
        {
            if name != ename {
                return Err(ck(format!("tensor {name:?} where {ename:?} was expected")));
            }
            if shape != eshape {
                return Err(ck(format!(
                    "tensor {name}: shape {shape:?}, config implies {eshape:?}"
                )));
            }
            if *offset != cursor || *count != shape.iter().product::<usize>() {
                return Err(ck(format!("tensor {name}: inconsistent offset/count")));
            }
            let raw = &blob[offset * 4..(offset + count) * 4];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *slot = Tensor::new(shape.clone(), data)?;
            cursor += count;
        }
        if cursor * 4 != data_len {
            return Err(ck("data length disagrees with the manifest"));
        }
        Ok(Self {
            stage,
            vocab_hash,
            config,
            model,
        })
    }

    /// Writes to a sibling temporary file first so a failed save never
    /// leaves a partial checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses a vocabulary other than the one the model was trained with.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let h = vocab.fingerprint();
        if h != self.vocab_hash {
            return Err(ck(format!(
                "vocabulary hash mismatch: checkpoint was trained with {}, supplied vocabulary is {h}",
                self.vocab_hash
            )));
        }
        Ok(())
    }
}
