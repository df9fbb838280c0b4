//! `MSFC` checkpoint files: model kind, a JSON snapshot of everything
//! needed to rebuild the model, and the named parameter tensors.
//!
//! Layout (little-endian): magic `MSFC`, u32 version, u8 kind (0 span
//! detector, 1 classifier), u32 length + UTF-8 JSON metadata, u64 step,
//! u8 has-score + f64 score, u32 tensor count; per tensor: u32 length +
//! UTF-8 name, u32 rank, rank × u32 dims, u8 payload width (32 or 64),
//! row-major values.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, EntityClassifier};
use crate::crf::SpanDetector;
use crate::encoder::TokenEncoder;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Precision, Tensor};
use crate::trainer::{Model, ModelKind, TrainerConfig};

const MAGIC: [u8; 4] = *b"MSFC";
const VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

/// Everything besides the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: TokenEncoder,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierConfig>,
    pub trainer: TrainerConfig,
    /// Target label set, recorded once the model is fine-tuned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub meta: CheckpointMeta,
    pub step: u64,
    pub valid_score: Option<f64>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(model: &Model, trainer: TrainerConfig, params: ParamSet) -> Self {
        Self {
            kind: model.kind(),
            meta: CheckpointMeta {
                encoder: model.encoder().clone(),
                classifier: model.classifier_config().cloned(),
                trainer,
                labels: None,
            },
            step: 0,
            valid_score: None,
            params,
        }
    }

    pub fn model(&self) -> Result<Model> {
        let encoder = self.meta.encoder.clone();
        match self.kind {
            ModelKind::Esd => Ok(Model::Esd(SpanDetector::new(encoder))),
            ModelKind::Ec => {
                let config = self.meta.classifier.clone().ok_or_else(|| {
                    Error::invalid("classifier checkpoint without classifier settings")
                })?;
                Ok(Model::Ec(EntityClassifier::new(encoder, config)?))
            }
        }
    }

    fn precision(&self) -> Precision {
        self.meta.trainer.precision
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(&MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u8(match self.kind {
            ModelKind::Esd => 0,
            ModelKind::Ec => 1,
        })?;
        let meta = serde_json::to_vec(&self.meta)?;
        out.write_u32::<LittleEndian>(meta.len() as u32)?;
        out.write_all(&meta)?;
        out.write_u64::<LittleEndian>(self.step)?;
        out.write_u8(u8::from(self.valid_score.is_some()))?;
        out.write_f64::<LittleEndian>(self.valid_score.unwrap_or(0.0))?;
        out.write_u32::<LittleEndian>(self.params.len() as u32)?;
        let wide = self.precision() == Precision::F64;
        for (name, t) in self.params.iter() {
            out.write_u32::<LittleEndian>(name.len() as u32)?;
            out.write_all(name.as_bytes())?;
            out.write_u32::<LittleEndian>(t.rank() as u32)?;
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32)?;
            }
            out.write_u8(if wide { 64 } else { 32 })?;
            for &v in t.data() {
                if wide {
                    out.write_f64::<LittleEndian>(v)?;
                } else {
                    out.write_f32::<LittleEndian>(v as f32)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| truncated("missing header"))?;
        if magic != MAGIC {
            return Err(Error::BadMagic { what: WHAT, expected: MAGIC, found: magic });
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| truncated("missing header"))?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { what: WHAT, version });
        }
        let kind = match r.read_u8().map_err(|_| truncated("model kind"))? {
            0 => ModelKind::Esd,
            1 => ModelKind::Ec,
            other => return Err(Error::invalid(format!("unknown model kind byte {other}"))),
        };
        let meta_len = r.read_u32::<LittleEndian>().map_err(|_| truncated("metadata length"))? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|_| truncated("metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let step = r.read_u64::<LittleEndian>().map_err(|_| truncated("step"))?;
        let has_score = r.read_u8().map_err(|_| truncated("score flag"))? != 0;
        let score = r.read_f64::<LittleEndian>().map_err(|_| truncated("score"))?;
        let count = r.read_u32::<LittleEndian>().map_err(|_| truncated("tensor count"))?;

        let mut params = ParamSet::new();
        for i in 0..count {
            let ctx = |field: &str| truncated(format!("tensor {i}: {field}"));
            let name_len = r.read_u32::<LittleEndian>().map_err(|_| ctx("name length"))? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| ctx("name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::invalid(format!("tensor {i}: name is not UTF-8")))?;
            let rank = r.read_u32::<LittleEndian>().map_err(|_| ctx("rank"))? as usize;
            if rank > 2 {
                return Err(Error::invalid(format!("tensor {name:?}: rank {rank} unsupported")));
            }
            let shape = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize).map_err(|_| ctx("dims")))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = match r.read_u8().map_err(|_| ctx("payload width"))? {
                64 => {
                    let mut v = vec![0f64; len];
                    r.read_f64_into::<LittleEndian>(&mut v).map_err(|_| ctx("values"))?;
                    v
                }
                32 => {
                    let mut v = vec![0f32; len];
                    r.read_f32_into::<LittleEndian>(&mut v).map_err(|_| ctx("values"))?;
                    v.into_iter().map(f64::from).collect()
                }
                other => return Err(Error::invalid(format!("tensor {name:?}: payload width {other}"))),
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { what: WHAT, detail: format!("tensor {name:?}") });
            }
            if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::invalid(format!("duplicate tensor {name:?}")));
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::invalid("trailing bytes after checkpoint tensors"));
        }
        Ok(Self { kind, meta, step, valid_score: has_score.then_some(score), params })
    }
}

fn truncated(detail: impl Into<String>) -> Error {
    Error::Truncated { what: WHAT, detail: detail.into() }
}
