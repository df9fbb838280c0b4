//! Entity classification head.
//!
//! Span representations are the column-wise max over the span's token rows.
//! A two-layer projection head maps them to diagonal Gaussians (mean and
//! log-variance) for the supervised contrastive objective; classification
//! itself works on the raw span vectors against per-type prototypes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::EntitySpan;
use crate::encoder::{EmbeddingStore, Sentence, TokenEncoder};
use crate::error::{Error, Result};
use crate::numerics::{glorot, softmax, squared_distance, BoundParams, Graph, ParamSet, Tensor, Var};

/// Tolerance for "sums to one".
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Distance between span vectors and prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    SqEuclid,
    Euclid,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let d = squared_distance(a, b);
        match self {
            Distance::SqEuclid => d,
            Distance::Euclid => (d + EUCLID_EPS).sqrt(),
        }
    }
}

// Keeps the square root differentiable when a query sits on a prototype.
const EUCLID_EPS: f64 = 1e-12;

/// Pairwise similarity used by the contrastive loss. Higher is more similar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMode {
    /// Negated symmetrised KL divergence between diagonal Gaussians.
    GaussianKl,
    /// Negated squared Euclidean distance between means.
    NegSqEuclid,
}

impl SimilarityMode {
    /// Gaussian KL for multi-shot episodes, Euclidean for one-shot.
    pub fn for_shots(k: usize) -> Self {
        if k > 1 {
            SimilarityMode::GaussianKl
        } else {
            SimilarityMode::NegSqEuclid
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub projection_dim: usize,
    /// Contrastive temperature τ.
    pub temperature: f64,
    /// `None` picks the mode from the episode's shot count.
    pub similarity: Option<SimilarityMode>,
    pub distance: Distance,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { projection_dim: 32, temperature: 0.1, similarity: None, distance: Distance::SqEuclid }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.projection_dim == 0 {
            return Err(Error::Config("projection_dim must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }

    pub fn similarity_for(&self, k: usize) -> SimilarityMode {
        self.similarity.unwrap_or_else(|| SimilarityMode::for_shots(k))
    }
}

/// Probability vector over an episode's entity types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeDistribution(Vec<f64>);

impl TypeDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty type distribution"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid(format!("invalid probabilities {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self(probs))
    }

    /// Normalises non-negative weights with a positive sum.
    pub(crate) fn from_weights(weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        Self(weights.into_iter().map(|w| w / total).collect())
    }

    /// Wraps values already known to form a distribution.
    pub(crate) fn from_probs(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate().skip(1) {
            if *p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOutput {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Per-type mean span vectors, aligned with `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub labels: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

pub fn label_index(labels: &[String], name: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == name)
        .ok_or_else(|| Error::invalid(format!("entity type {name:?} is not in the label set {labels:?}")))
}

/// Column-wise max of rows `start..=end`.
pub fn pool_span(h: &Tensor, start: usize, end: usize) -> Result<Vec<f64>> {
    if start > end || end >= h.rows() {
        return Err(Error::invalid(format!(
            "span ({start}, {end}) out of range for {} tokens",
            h.rows()
        )));
    }
    let mut out = h.row(start).to_vec();
    for i in start + 1..=end {
        for (o, v) in out.iter_mut().zip(h.row(i)) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    Ok(out)
}

pub fn similarity(a: &ProjectionOutput, b: &ProjectionOutput, mode: SimilarityMode) -> Result<f64> {
    let d = a.mean.len();
    if [a.log_var.len(), b.mean.len(), b.log_var.len()].iter().any(|&l| l != d) {
        return Err(Error::shape("similarity operands differ in dimension"));
    }
    let sq: f64 = squared_distance(&a.mean, &b.mean);
    Ok(match mode {
        SimilarityMode::NegSqEuclid => -sq,
        SimilarityMode::GaussianKl => {
            let mut total = 0.0;
            for i in 0..d {
                let (la, lb) = (a.log_var[i], b.log_var[i]);
                let diff = a.mean[i] - b.mean[i];
                total += (la - lb).exp() + (lb - la).exp()
                    + diff * diff * ((-la).exp() + (-lb).exp())
                    - 2.0;
            }
            // KL(a||b) + KL(b||a) = total / 2; similarity is half the negation.
            -0.25 * total
        }
    })
}

/// Mean span vector per label. Every label needs at least one entity.
pub fn prototypes(support: &[(Vec<f64>, usize)], labels: &[String]) -> Result<Prototypes> {
    let dim = support.first().map(|(e, _)| e.len()).unwrap_or(0);
    let mut sums = vec![vec![0.0; dim]; labels.len()];
    let mut counts = vec![0usize; labels.len()];
    for (e, y) in support {
        if e.len() != dim {
            return Err(Error::shape("support embeddings differ in dimension"));
        }
        let slot = sums
            .get_mut(*y)
            .ok_or_else(|| Error::invalid(format!("label index {y} out of range")))?;
        for (s, v) in slot.iter_mut().zip(e) {
            *s += v;
        }
        counts[*y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(labels[empty].clone()));
    }
    let vectors = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    Ok(Prototypes { labels: labels.to_vec(), vectors })
}

/// Softmax over negated distances to each prototype.
pub fn proto_distribution(
    embedding: &[f64],
    protos: &Prototypes,
    distance: Distance,
) -> Result<TypeDistribution> {
    if protos.vectors.is_empty() {
        return Err(Error::invalid("no prototypes"));
    }
    if protos.vectors.iter().any(|c| c.len() != embedding.len()) {
        return Err(Error::shape(format!(
            "embedding dim {} does not match prototypes",
            embedding.len()
        )));
    }
    let logits: Vec<f64> = protos.vectors.iter().map(|c| -distance.eval(c, embedding)).collect();
    Ok(TypeDistribution(softmax(&logits)))
}

/// Summed negative log-probability of each entity's gold type.
pub fn ec_loss(dists: &[TypeDistribution], gold: &[usize]) -> Result<f64> {
    if dists.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} distributions for {} gold labels",
            dists.len(),
            gold.len()
        )));
    }
    let mut total = 0.0;
    for (d, &y) in dists.iter().zip(gold) {
        let p = d
            .probs()
            .get(y)
            .ok_or_else(|| Error::invalid(format!("gold index {y} out of range")))?;
        total -= p.ln();
    }
    Ok(total)
}

/// Similarities for the listed row pairs of the projected batch, as a
/// vector with one entry per pair.
pub fn pair_similarities(
    g: &mut Graph,
    mean: Var,
    log_var: Var,
    pairs: &[(usize, usize)],
    mode: SimilarityMode,
) -> Result<Var> {
    let left: Vec<Option<usize>> = pairs.iter().map(|p| Some(p.0)).collect();
    let right: Vec<Option<usize>> = pairs.iter().map(|p| Some(p.1)).collect();
    let dim = g.value(mean).cols();
    let ones = g.constant(Tensor::full(&[dim, 1], 1.0));

    let ma = g.gather_rows(mean, &left)?;
    let mb = g.gather_rows(mean, &right)?;
    let diff = g.sub(ma, mb)?;
    let sq = g.mul(diff, diff)?;
    let per_pair = match mode {
        SimilarityMode::NegSqEuclid => {
            let s = g.matmul(sq, ones)?;
            g.neg(s)
        }
        SimilarityMode::GaussianKl => {
            let la = g.gather_rows(log_var, &left)?;
            let lb = g.gather_rows(log_var, &right)?;
            let dl = g.sub(la, lb)?;
            let ratio_ab = g.exp(dl);
            let neg_dl = g.neg(dl);
            let ratio_ba = g.exp(neg_dl);
            let neg_la = g.neg(la);
            let neg_lb = g.neg(lb);
            let prec_a = g.exp(neg_la);
            let prec_b = g.exp(neg_lb);
            let prec = g.add(prec_a, prec_b)?;
            let mahal = g.mul(sq, prec)?;
            let ratios = g.add(ratio_ab, ratio_ba)?;
            let terms = g.add(ratios, mahal)?;
            let summed = g.matmul(terms, ones)?;
            let scaled = g.scale(summed, -0.25);
            let offset = g.constant(Tensor::full(&[pairs.len(), 1], 0.5 * dim as f64));
            g.add(scaled, offset)?
        }
    };
    g.reshape(per_pair, &[pairs.len()])
}

/// Supervised contrastive loss over a projected batch (`mean`, `log_var`
/// are `M×d'`). Anchors without a same-label partner contribute nothing.
pub fn contrastive_loss_node(
    g: &mut Graph,
    mean: Var,
    log_var: Var,
    labels: &[usize],
    temperature: f64,
    mode: SimilarityMode,
) -> Result<Var> {
    let m = labels.len();
    if m < 2 {
        return Err(Error::invalid(format!("contrastive loss needs at least 2 entities, got {m}")));
    }
    if g.value(mean).rows() != m || g.value(log_var).rows() != m {
        return Err(Error::shape("contrastive batch and labels differ in size"));
    }
    let mut pairs = Vec::with_capacity(m * (m - 1) / 2);
    let mut pair_index = vec![vec![0usize; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            pair_index[i][j] = pairs.len();
            pair_index[j][i] = pairs.len();
            pairs.push((i, j));
        }
    }
    let sims = pair_similarities(g, mean, log_var, &pairs, mode)?;
    let logits = g.scale(sims, 1.0 / temperature);

    let mut denom_idx = Vec::new();
    let mut pos_idx = Vec::new();
    let mut pos_weight = Vec::new();
    let mut anchors = 0;
    for j in 0..m {
        let positives: Vec<usize> = (0..m).filter(|&p| p != j && labels[p] == labels[j]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        denom_idx.extend((0..m).filter(|&a| a != j).map(|a| pair_index[j][a]));
        let w = 1.0 / positives.len() as f64;
        for p in positives {
            pos_idx.push(pair_index[j][p]);
            pos_weight.push(w);
        }
    }
    if anchors == 0 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(zero);
    }
    let denom_flat = g.gather(logits, &denom_idx)?;
    let denom_rows = g.reshape(denom_flat, &[anchors, m - 1])?;
    let denoms = g.row_log_sum_exp(denom_rows);
    let denom_total = g.sum(denoms);
    let pos = g.gather(logits, &pos_idx)?;
    let weights = g.constant(Tensor::vector(pos_weight));
    let weighted = g.mul(pos, weights)?;
    let pos_total = g.sum(weighted);
    g.sub(denom_total, pos_total)
}

/// Prototype matrix (`N×d`) as label-wise means of the rows of `embeddings`.
pub fn prototypes_node(
    g: &mut Graph,
    embeddings: Var,
    labels: &[usize],
    label_names: &[String],
) -> Result<Var> {
    let m = labels.len();
    if g.value(embeddings).rows() != m {
        return Err(Error::shape("prototype inputs and labels differ in size"));
    }
    let n = label_names.len();
    let mut counts = vec![0usize; n];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::invalid(format!("label index {y} out of range")))? += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(label_names[empty].clone()));
    }
    let mut avg = Tensor::zeros(&[n, m]);
    for (k, &y) in labels.iter().enumerate() {
        avg.data_mut()[y * m + k] = 1.0 / counts[y] as f64;
    }
    let avg = g.constant(avg);
    g.matmul(avg, embeddings)
}

/// Negative log-likelihood of the gold types of `queries` (`m×d`) under the
/// prototype softmax, summed over entities.
pub fn ec_loss_node(
    g: &mut Graph,
    queries: Var,
    protos: Var,
    gold: &[usize],
    distance: Distance,
) -> Result<Var> {
    let m = g.value(queries).rows();
    let n = g.value(protos).rows();
    if gold.len() != m {
        return Err(Error::invalid(format!("{} gold labels for {m} entities", gold.len())));
    }
    if let Some(bad) = gold.iter().find(|&&y| y >= n) {
        return Err(Error::invalid(format!("gold index {bad} out of range")));
    }
    let d = g.sq_dist(queries, protos)?;
    let d = match distance {
        Distance::SqEuclid => d,
        Distance::Euclid => {
            let eps = g.constant(Tensor::full(g.value(d).shape(), EUCLID_EPS));
            let shifted = g.add(d, eps)?;
            g.sqrt(shifted)
        }
    };
    let logits = g.neg(d);
    let norm = g.row_log_sum_exp(logits);
    let norm_total = g.sum(norm);
    let gold_idx: Vec<usize> = gold.iter().enumerate().map(|(i, &y)| i * n + y).collect();
    let picked = g.gather(logits, &gold_idx)?;
    let picked_total = g.sum(picked);
    g.sub(norm_total, picked_total)
}

const HID_W: &str = "proj.hidden.weight";
const HID_B: &str = "proj.hidden.bias";
const MEAN_W: &str = "proj.mean.weight";
const MEAN_B: &str = "proj.mean.bias";
const LOGVAR_W: &str = "proj.logvar.weight";
const LOGVAR_B: &str = "proj.logvar.bias";

/// Encoder plus projection head: the entity classification model.
#[derive(Debug, Clone)]
pub struct EntityClassifier {
    pub encoder: TokenEncoder,
    pub config: ClassifierConfig,
}

impl EntityClassifier {
    pub fn new(encoder: TokenEncoder, config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { encoder, config })
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.encoder.init_params(&mut rng);
        let d = self.encoder.output_dim();
        let dp = self.config.projection_dim;
        params.insert(HID_W, glorot(&mut rng, d, d));
        params.insert(HID_B, Tensor::zeros(&[d]));
        params.insert(MEAN_W, glorot(&mut rng, d, dp));
        params.insert(MEAN_B, Tensor::zeros(&[dp]));
        params.insert(LOGVAR_W, glorot(&mut rng, d, dp).map(|v| 0.1 * v));
        params.insert(LOGVAR_B, Tensor::zeros(&[dp]));
        params
    }

    /// Max-pooled span vectors for every span of every sentence, stacked in
    /// order as an `M×d` node. `None` if there are no spans.
    pub fn span_embeddings_node(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        items: &[(&Sentence, &[EntitySpan])],
        store: Option<&EmbeddingStore>,
        dropout_seed: Option<u64>,
    ) -> Result<Option<Var>> {
        let mut rows = Vec::new();
        for (k, (sentence, spans)) in items.iter().enumerate() {
            if spans.is_empty() {
                continue;
            }
            let seed = dropout_seed.map(|s| s.wrapping_add(k as u64));
            let h = self.encoder.encode_node(g, p, sentence, store, seed)?;
            for span in spans.iter() {
                rows.push(g.max_pool_rows(h, span.start, span.end)?);
            }
        }
        if rows.is_empty() {
            return Ok(None);
        }
        g.concat_rows(&rows).map(Some)
    }

    /// Projection head: ReLU hidden layer of width `d`, then mean and
    /// log-variance heads of width `d'`.
    pub fn project_node(&self, g: &mut Graph, p: &BoundParams, e: Var) -> Result<(Var, Var)> {
        let hid = g.matmul(e, p.get(HID_W)?)?;
        let hid = g.add_row(hid, p.get(HID_B)?)?;
        let hid = g.relu(hid);
        let mean = g.matmul(hid, p.get(MEAN_W)?)?;
        let mean = g.add_row(mean, p.get(MEAN_B)?)?;
        let log_var = g.matmul(hid, p.get(LOGVAR_W)?)?;
        let log_var = g.add_row(log_var, p.get(LOGVAR_B)?)?;
        Ok((mean, log_var))
    }

    pub fn project(&self, params: &ParamSet, e: &[f64]) -> Result<ProjectionOutput> {
        let mut g = Graph::new();
        let p = g.bind_frozen(params);
        let x = g.constant(Tensor::matrix(1, e.len(), e.to_vec())?);
        let (mean, log_var) = self.project_node(&mut g, &p, x)?;
        Ok(ProjectionOutput {
            mean: g.value(mean).data().to_vec(),
            log_var: g.value(log_var).data().to_vec(),
        })
    }

    /// Eval-mode span vectors for one sentence.
    pub fn embed_spans(
        &self,
        params: &ParamSet,
        sentence: &Sentence,
        spans: &[EntitySpan],
        store: Option<&EmbeddingStore>,
    ) -> Result<Vec<Vec<f64>>> {
        if spans.is_empty() {
            return Ok(Vec::new());
        }
        let h = self.encoder.encode(sentence, params, store, false, 0)?;
        spans.iter().map(|s| pool_span(&h, s.start, s.end)).collect()
    }
}
