//! Hybrid inference: Viterbi span detection, then typing each detected
//! span by interpolating a nearest-neighbour vote over support entities
//! with the prototype softmax.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{label_index, proto_distribution, EntityClassifier, Prototypes, TypeDistribution};
use crate::crf::{EntitySpan, SpanDetector};
use crate::encoder::{EmbeddingStore, Sentence};
use crate::episodes::AnnotatedSentence;
use crate::error::{Error, Result};
use crate::numerics::{squared_distance, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Neighbours consulted per query; clamped to the store size.
    pub k: usize,
    /// Weight λ of the neighbour vote against the prototype softmax.
    pub lambda: f64,
    /// Distance temperature of the neighbour weights.
    pub temperature: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { k: 10, lambda: 0.1, temperature: 1.0 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("knn k must be at least 1".into()));
        }
        check_lambda(self.lambda)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("knn temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda {lambda} not in [0, 1]")))
    }
}

/// Support entity vectors keyed to their types. Keys are held at `f32`
/// precision so a saved store reproduces in-memory results exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    labels: Vec<String>,
    dim: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<usize>,
}

impl Datastore {
    pub fn new(labels: Vec<String>, dim: usize) -> Result<Self> {
        if labels.is_empty() || dim == 0 {
            return Err(Error::invalid("datastore needs labels and a positive dimension"));
        }
        Ok(Self { labels, dim, keys: Vec::new(), values: Vec::new() })
    }

    pub fn push(&mut self, key: &[f64], label: usize) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::shape(format!("datastore key dim {} vs store dim {}", key.len(), self.dim)));
        }
        if label >= self.labels.len() {
            return Err(Error::invalid(format!("label index {label} out of range")));
        }
        if key.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("datastore key".into()));
        }
        self.keys.push(key.iter().map(|&v| f64::from(v as f32)).collect());
        self.values.push(label);
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.keys.iter().map(Vec::as_slice).zip(self.values.iter().copied())
    }
}

/// One entry per gold support entity, keyed by its eval-mode span vector.
pub fn build_datastore(
    model: &EntityClassifier,
    params: &ParamSet,
    support: &[AnnotatedSentence],
    labels: &[String],
    store: Option<&EmbeddingStore>,
) -> Result<Datastore> {
    let mut ds = Datastore::new(labels.to_vec(), model.encoder.output_dim())?;
    for s in support {
        let embeddings = model.embed_spans(params, &s.sentence, &s.spans, store)?;
        for (e, span) in embeddings.iter().zip(&s.spans) {
            ds.push(e, label_index(labels, AnnotatedSentence::label_of(span))?)?;
        }
    }
    if ds.is_empty() {
        return Err(Error::invalid("support set has no entities for the datastore"));
    }
    Ok(ds)
}

/// Distance-weighted vote over the `min(k, |store|)` nearest entries (ties
/// keep insertion order). Types with no retrieved entry get zero mass.
pub fn knn_distribution(query: &[f64], store: &Datastore, config: &DecoderConfig) -> Result<TypeDistribution> {
    if store.is_empty() {
        return Err(Error::invalid("empty datastore"));
    }
    if query.len() != store.dim {
        return Err(Error::shape(format!("query dim {} vs datastore dim {}", query.len(), store.dim)));
    }
    let mut ranked: Vec<(f64, usize)> =
        store.keys.iter().enumerate().map(|(i, key)| (squared_distance(query, key), i)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    ranked.truncate(config.k.min(store.len()));

    // Shifting by the nearest distance leaves the normalised weights
    // unchanged and keeps the largest weight at exactly one.
    let nearest = ranked[0].0;
    let mut weights = vec![0.0; store.labels.len()];
    for (d, i) in ranked {
        weights[store.values[i]] += (-(d - nearest) / config.temperature).exp();
    }
    Ok(TypeDistribution::from_weights(weights))
}

/// `λ p_knn + (1 − λ) p_soft`.
pub fn interpolate(knn: &TypeDistribution, soft: &TypeDistribution, lambda: f64) -> Result<TypeDistribution> {
    check_lambda(lambda)?;
    if knn.len() != soft.len() {
        return Err(Error::invalid(format!(
            "distributions over {} and {} types",
            knn.len(),
            soft.len()
        )));
    }
    let probs = knn
        .probs()
        .iter()
        .zip(soft.probs())
        .map(|(k, s)| lambda * k + (1.0 - lambda) * s)
        .collect();
    Ok(TypeDistribution::from_probs(probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedSpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
    /// Combined distribution over the label set, in label order.
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePrediction {
    pub id: String,
    pub spans: Vec<PredictedSpan>,
    /// Index of the episode the sentence was decoded in, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<usize>,
}

impl SentencePrediction {
    pub fn typed_spans(&self) -> Vec<EntitySpan> {
        self.spans.iter().map(|s| EntitySpan::typed(s.start, s.end, s.label.clone())).collect()
    }
}

/// Both trained models with the parameters to decode with.
#[derive(Debug, Clone, Copy)]
pub struct HybridModel<'a> {
    pub detector: &'a SpanDetector,
    pub detector_params: &'a ParamSet,
    pub classifier: &'a EntityClassifier,
    pub classifier_params: &'a ParamSet,
}

/// Detects spans with Viterbi and types each one by the interpolated
/// distribution. Prototypes and datastore must share one label set and
/// the classifier's representation space.
pub fn infer(
    model: HybridModel<'_>,
    query: &[Sentence],
    protos: &Prototypes,
    datastore: &Datastore,
    config: &DecoderConfig,
    store: Option<&EmbeddingStore>,
) -> Result<Vec<SentencePrediction>> {
    config.validate()?;
    if protos.labels != datastore.labels {
        return Err(Error::invalid("prototype and datastore label sets differ"));
    }
    let dim = model.classifier.encoder.output_dim();
    if datastore.dim != dim || protos.vectors.iter().any(|c| c.len() != dim) {
        return Err(Error::shape(format!(
            "classifier output dim {dim} vs datastore dim {}",
            datastore.dim
        )));
    }
    query
        .par_iter()
        .map(|sentence| {
            let spans = model.detector.decode(model.detector_params, sentence, store)?;
            let embeddings = model.classifier.embed_spans(model.classifier_params, sentence, &spans, store)?;
            let typed = spans
                .iter()
                .zip(&embeddings)
                .map(|(span, e)| {
                    let soft = proto_distribution(e, protos, model.classifier.config.distance)?;
                    let knn = knn_distribution(e, datastore, config)?;
                    let p = interpolate(&knn, &soft, config.lambda)?;
                    Ok(PredictedSpan {
                        start: span.start,
                        end: span.end,
                        label: protos.labels[p.argmax()].clone(),
                        p: p.probs().to_vec(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SentencePrediction { id: sentence.id.clone(), spans: typed, episode: None })
        })
        .collect()
}

pub fn write_predictions(out: &mut impl Write, predictions: &[SentencePrediction]) -> Result<()> {
    for p in predictions {
        serde_json::to_writer(&mut *out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<SentencePrediction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

const MAGIC: [u8; 4] = *b"MSFD";
const VERSION: u32 = 1;
const WHAT: &str = "datastore";

fn truncated(detail: impl Into<String>) -> Error {
    Error::Truncated { what: WHAT, detail: detail.into() }
}

impl Datastore {
    /// Little-endian `MSFD` layout: magic, u32 version, u32 entry count,
    /// u32 dim, u32 label count with length-prefixed UTF-8 names, then per
    /// entry a u32 label index and `dim` f32 values.
    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(&MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(self.len() as u32)?;
        out.write_u32::<LittleEndian>(self.dim as u32)?;
        out.write_u32::<LittleEndian>(self.labels.len() as u32)?;
        for l in &self.labels {
            out.write_u32::<LittleEndian>(l.len() as u32)?;
            out.write_all(l.as_bytes())?;
        }
        for (key, label) in self.entries() {
            out.write_u32::<LittleEndian>(label as u32)?;
            for &v in key {
                out.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
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
        let mut header = || r.read_u32::<LittleEndian>().map_err(|_| truncated("missing header"));
        let version = header()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { what: WHAT, version });
        }
        let count = header()? as usize;
        let dim = header()? as usize;
        let n_labels = header()? as usize;
        let mut labels = Vec::with_capacity(n_labels);
        for i in 0..n_labels {
            let len = r.read_u32::<LittleEndian>().map_err(|_| truncated(format!("label {i}")))? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| truncated(format!("label {i}")))?;
            labels.push(
                String::from_utf8(name).map_err(|_| Error::invalid(format!("label {i} is not UTF-8")))?,
            );
        }
        let mut ds = Datastore::new(labels, dim)?;
        let mut key = vec![0f32; dim];
        for e in 0..count {
            let label = r.read_u32::<LittleEndian>().map_err(|_| truncated(format!("entry {e}")))? as usize;
            r.read_f32_into::<LittleEndian>(&mut key).map_err(|_| truncated(format!("entry {e}")))?;
            if key.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { what: WHAT, detail: format!("entry {e}") });
            }
            let wide: Vec<f64> = key.iter().map(|&v| f64::from(v)).collect();
            ds.push(&wide, label)?;
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> TypeDistribution {
        TypeDistribution::new(p.to_vec()).unwrap()
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn single_entry_store() {
        let mut ds = Datastore::new(labels(3), 2).unwrap();
        ds.push(&[1.0, 1.0], 2).unwrap();
        let p = knn_distribution(&[5.0, -3.0], &ds, &DecoderConfig::default()).unwrap();
        assert_eq!(p.probs(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_store_errors() {
        let ds = Datastore::new(labels(2), 2).unwrap();
        assert!(knn_distribution(&[0.0, 0.0], &ds, &DecoderConfig::default()).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let knn = dist(&[1.0, 0.0]);
        let soft = dist(&[0.5, 0.5]);
        assert_eq!(interpolate(&knn, &soft, 0.0).unwrap(), soft);
        assert_eq!(interpolate(&knn, &soft, 1.0).unwrap(), knn);
        let p = interpolate(&knn, &soft, 0.1).unwrap();
        assert!((p.probs()[0] - 0.55).abs() < 1e-12);
        assert!((p.probs()[1] - 0.45).abs() < 1e-12);
        assert!(interpolate(&knn, &soft, 1.5).is_err());
        assert!(interpolate(&knn, &dist(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn far_queries_do_not_underflow() {
        let mut ds = Datastore::new(labels(2), 1).unwrap();
        ds.push(&[0.0], 0).unwrap();
        ds.push(&[1.0], 1).unwrap();
        let p = knn_distribution(&[1e6], &ds, &DecoderConfig::default()).unwrap();
        assert!(p.probs().iter().all(|v| v.is_finite()));
        assert_eq!(p.argmax(), 1);
    }

    #[test]
    fn file_round_trip() {
        let mut ds = Datastore::new(labels(2), 3).unwrap();
        ds.push(&[0.1, 0.2, 0.3], 1).unwrap();
        ds.push(&[-1.0, 2.5, 7.0], 0).unwrap();
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        assert_eq!(Datastore::from_bytes(&buf).unwrap(), ds);
        assert!(matches!(Datastore::from_bytes(&buf[..buf.len() - 1]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn prediction_json_shape() {
        let p = SentencePrediction {
            id: "q:0".into(),
            spans: vec![PredictedSpan { start: 0, end: 1, label: "t".into(), p: vec![1.0] }],
            episode: None,
        };
        let mut out = Vec::new();
        write_predictions(&mut out, &[p]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"id\":\"q:0\",\"spans\":[{\"start\":0,\"end\":1,\"type\":\"t\",\"p\":[1.0]}]}\n"
        );
    }
}
