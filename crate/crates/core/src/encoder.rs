//! Token encoders producing contextual representations `h` (one row per
//! token).
//!
//! Two interchangeable modes feed the same downstream code:
//!
//! * `Trainable`: embedding lookup, concatenation of a symmetric context
//!   window (zero padding past the sentence ends), one ReLU layer, then
//!   dropout in training mode.
//! * `Precomputed`: vectors read from an embedding file, passed through a
//!   trainable affine projection (identity-initialised when dims match).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot, BoundParams, Graph, ParamSet, Tensor, Var};

pub const DEFAULT_MAX_LEN: usize = 128;
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::invalid(format!("sentence {id:?} has no tokens")));
        }
        Ok(Self { id, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Trainable,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    /// Upper bound on vocabulary rows, UNK included.
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Width `d` of the token representations.
    pub hidden_dim: usize,
    /// Context radius on each side of a token.
    pub window: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Width of precomputed vectors.
    pub input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Trainable,
            vocab_size: 20_000,
            embed_dim: 32,
            hidden_dim: 64,
            window: 1,
            dropout: 0.2,
            max_len: DEFAULT_MAX_LEN,
            input_dim: 768,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_len", self.max_len),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Token to row mapping. Row 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Keeps the `max_size - 1` most frequent tokens (ties broken
    /// lexicographically) after the UNK row.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut list = vec![UNK.to_string()];
        list.extend(
            ranked
                .into_iter()
                .filter(|(t, _)| *t != UNK)
                .take(max_size.saturating_sub(1))
                .map(|(t, _)| t.to_string()),
        );
        Self::from(list)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }
}

/// Precomputed token vectors keyed by sentence id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    dim: Option<usize>,
    sentences: BTreeMap<String, Tensor>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.sentences.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.sentences.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, id: impl Into<String>, vectors: Tensor) -> Result<()> {
        let id = id.into();
        if vectors.rank() != 2 {
            return Err(Error::shape(format!("embeddings for {id:?} must be a matrix")));
        }
        match self.dim {
            Some(d) if d != vectors.cols() => {
                return Err(Error::shape(format!(
                    "embeddings for {id:?} have dim {}, store has {d}",
                    vectors.cols()
                )))
            }
            _ => self.dim = Some(vectors.cols()),
        }
        if self.sentences.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate sentence id {id:?}")));
        }
        self.sentences.insert(id, vectors);
        Ok(())
    }

    pub fn merge(&mut self, other: EmbeddingStore) -> Result<()> {
        for (id, t) in other.sentences {
            self.insert(id, t)?;
        }
        Ok(())
    }
}

const EMBED_MAGIC: [u8; 4] = *b"MSFE";
const EMBED_VERSION: u32 = 1;
const EMBED_WHAT: &str = "embedding";

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let bytes = fs::read(path)?;
    read_embeddings(&bytes)
}

fn truncated(detail: impl Into<String>) -> Error {
    Error::Truncated { what: EMBED_WHAT, detail: detail.into() }
}

/// Parses the little-endian `MSFE` layout.
pub fn read_embeddings(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated("missing header"))?;
    if magic != EMBED_MAGIC {
        return Err(Error::BadMagic { what: EMBED_WHAT, expected: EMBED_MAGIC, found: magic });
    }
    let header = |r: &mut Cursor<&[u8]>| {
        r.read_u32::<LittleEndian>().map_err(|_| truncated("missing header"))
    };
    let version = header(&mut r)?;
    if version != EMBED_VERSION {
        return Err(Error::UnsupportedVersion { what: EMBED_WHAT, version });
    }
    let count = header(&mut r)?;
    let dim = header(&mut r)? as usize;

    let mut store = EmbeddingStore::new();
    for s in 0..count {
        let ctx = |field: &str| truncated(format!("sentence {s}: {field}"));
        let id_len = r.read_u32::<LittleEndian>().map_err(|_| ctx("id length"))? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|_| ctx("id bytes"))?;
        let id = String::from_utf8(id)
            .map_err(|_| Error::invalid(format!("sentence {s}: id is not UTF-8")))?;
        let n = r.read_u32::<LittleEndian>().map_err(|_| ctx("token count"))? as usize;
        if n == 0 || dim == 0 {
            return Err(Error::invalid(format!("sentence {id:?}: empty embedding matrix")));
        }
        let mut values = vec![0f32; n * dim];
        r.read_f32_into::<LittleEndian>(&mut values).map_err(|_| ctx("vector data"))?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                what: EMBED_WHAT,
                detail: format!("sentence {id:?}, token {}, dim {}", pos / dim, pos % dim),
            });
        }
        let data = values.into_iter().map(f64::from).collect();
        store.insert(id, Tensor::matrix(n, dim, data)?)?;
    }
    if store.dim.is_none() && dim > 0 {
        store.dim = Some(dim);
    }
    Ok(store)
}

/// Serialises to the `MSFE` layout; values are stored as `f32`.
pub fn write_embeddings(store: &EmbeddingStore, out: &mut impl Write) -> Result<()> {
    out.write_all(&EMBED_MAGIC)?;
    out.write_u32::<LittleEndian>(EMBED_VERSION)?;
    out.write_u32::<LittleEndian>(store.len() as u32)?;
    out.write_u32::<LittleEndian>(store.dim.unwrap_or(0) as u32)?;
    for (id, t) in &store.sentences {
        out.write_u32::<LittleEndian>(id.len() as u32)?;
        out.write_all(id.as_bytes())?;
        out.write_u32::<LittleEndian>(t.rows() as u32)?;
        for v in t.data() {
            out.write_f32::<LittleEndian>(*v as f32)?;
        }
    }
    Ok(())
}

pub fn write_embedding_file(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_embeddings(store, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

const EMBED_TABLE: &str = "encoder.embedding";
const WINDOW_W: &str = "encoder.window.weight";
const WINDOW_B: &str = "encoder.window.bias";
const PROJ_W: &str = "encoder.projection.weight";
const PROJ_B: &str = "encoder.projection.bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEncoder {
    pub config: EncoderConfig,
    /// Required in trainable mode.
    pub vocab: Option<Vocab>,
}

impl TokenEncoder {
    pub fn trainable(config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if config.mode != EncoderMode::Trainable {
            return Err(Error::Config("trainable encoder needs mode = trainable".into()));
        }
        Ok(Self { config, vocab: Some(vocab) })
    }

    pub fn precomputed(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        if config.mode != EncoderMode::Precomputed {
            return Err(Error::Config("precomputed encoder needs mode = precomputed".into()));
        }
        Ok(Self { config, vocab: None })
    }

    pub fn output_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let c = &self.config;
        let mut params = ParamSet::new();
        match c.mode {
            EncoderMode::Trainable => {
                let rows = self.vocab.as_ref().map_or(1, Vocab::len).max(1);
                let data = (0..rows * c.embed_dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
                params.insert(EMBED_TABLE, Tensor::matrix(rows, c.embed_dim, data).expect("dims"));
                let fan_in = (2 * c.window + 1) * c.embed_dim;
                params.insert(WINDOW_W, glorot(rng, fan_in, c.hidden_dim));
                params.insert(WINDOW_B, Tensor::zeros(&[c.hidden_dim]));
            }
            EncoderMode::Precomputed => {
                let w = if c.input_dim == c.hidden_dim {
                    Tensor::identity(c.hidden_dim)
                } else {
                    glorot(rng, c.input_dim, c.hidden_dim)
                };
                params.insert(PROJ_W, w);
                params.insert(PROJ_B, Tensor::zeros(&[c.hidden_dim]));
            }
        }
        params
    }

    /// Adds the encoding of `sentence` to `g`, returning an `n×d` node.
    /// Dropout is applied only when `dropout_seed` is given (training mode).
    pub fn encode_node(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        sentence: &Sentence,
        store: Option<&EmbeddingStore>,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let n = sentence.len();
        if n == 0 {
            return Err(Error::invalid(format!("sentence {:?} is empty", sentence.id)));
        }
        if n > self.config.max_len {
            return Err(Error::invalid(format!(
                "sentence {:?} has {n} tokens, max length is {}",
                sentence.id, self.config.max_len
            )));
        }
        match self.config.mode {
            EncoderMode::Trainable => {
                let vocab = self
                    .vocab
                    .as_ref()
                    .ok_or_else(|| Error::Config("trainable encoder without a vocabulary".into()))?;
                let ids: Vec<usize> = sentence.tokens.iter().map(|t| vocab.lookup(t)).collect();
                let table = p.get(EMBED_TABLE)?;
                let r = self.config.window as isize;
                let mut columns = Vec::with_capacity(2 * self.config.window + 1);
                for offset in -r..=r {
                    let rows: Vec<Option<usize>> = (0..n as isize)
                        .map(|i| {
                            let j = i + offset;
                            (j >= 0 && j < n as isize).then(|| ids[j as usize])
                        })
                        .collect();
                    columns.push(g.gather_rows(table, &rows)?);
                }
                let x = g.concat_cols(&columns)?;
                let z = g.matmul(x, p.get(WINDOW_W)?)?;
                let z = g.add_row(z, p.get(WINDOW_B)?)?;
                let h = g.relu(z);
                match dropout_seed {
                    Some(seed) => g.dropout(h, self.config.dropout, seed),
                    None => Ok(h),
                }
            }
            EncoderMode::Precomputed => {
                let store = store.ok_or_else(|| {
                    Error::Config("precomputed encoder needs an embedding store".into())
                })?;
                let vectors = store
                    .get(&sentence.id)
                    .ok_or_else(|| Error::MissingEmbedding(sentence.id.clone()))?;
                if vectors.rows() != n {
                    return Err(Error::shape(format!(
                        "sentence {:?}: {n} tokens but {} embedding rows",
                        sentence.id,
                        vectors.rows()
                    )));
                }
                if vectors.cols() != self.config.input_dim {
                    return Err(Error::shape(format!(
                        "sentence {:?}: embedding dim {} but encoder expects {}",
                        sentence.id,
                        vectors.cols(),
                        self.config.input_dim
                    )));
                }
                let v = g.constant(vectors.clone());
                let z = g.matmul(v, p.get(PROJ_W)?)?;
                g.add_row(z, p.get(PROJ_B)?)
            }
        }
    }

    /// Value-level encoding. `train_mode` enables seeded dropout.
    pub fn encode(
        &self,
        sentence: &Sentence,
        params: &ParamSet,
        store: Option<&EmbeddingStore>,
        train_mode: bool,
        seed: u64,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind_frozen(params);
        let h = self.encode_node(&mut g, &p, sentence, store, train_mode.then_some(seed))?;
        let out = g.value(h).clone();
        out.check_finite("encoder output")?;
        Ok(out)
    }
}
