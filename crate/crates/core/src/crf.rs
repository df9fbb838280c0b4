//! Linear-chain CRF over untyped BIOES tags.
//!
//! Transition matrices are `7×7`: rows are the previous tag, columns the
//! next one, with START at index 5 and STOP at index 6. Invalid BIOES moves
//! are pinned to [`MASK_SCORE`] so decodes are always well formed.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingStore, Sentence, TokenEncoder};
use crate::error::{Error, Result};
use crate::numerics::{glorot, BoundParams, Graph, ParamSet, Tensor, Var};

pub const NUM_TAGS: usize = 5;
pub const START: usize = NUM_TAGS;
pub const STOP: usize = NUM_TAGS + 1;
pub const TRANSITION_SIZE: usize = NUM_TAGS + 2;
pub const MASK_SCORE: f64 = -1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    O = 0,
    B = 1,
    I = 2,
    E = 3,
    S = 4,
}

impl Tag {
    pub const ALL: [Tag; NUM_TAGS] = [Tag::O, Tag::B, Tag::I, Tag::E, Tag::S];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::O => "O",
            Tag::B => "B",
            Tag::I => "I",
            Tag::E => "E",
            Tag::S => "S",
        };
        f.write_str(s)
    }
}

/// Inclusive token span, optionally typed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: Option<String>,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end, label: None }
    }

    pub fn typed(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self { start, end, label: Some(label.into()) }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Whether `from -> to` is a legal BIOES move. Indices follow the
/// transition matrix layout, including START and STOP.
pub fn is_allowed_transition(from: usize, to: usize) -> bool {
    const O: usize = 0;
    const B: usize = 1;
    const I: usize = 2;
    const E: usize = 3;
    const S: usize = 4;
    let into_inside = to == I || to == E;
    match from {
        START | O | E | S => !into_inside,
        B | I => to == I || to == E,
        _ => true,
    }
}

/// `1` where a transition is allowed, `0` where it is masked.
pub fn allowed_transitions() -> Tensor {
    let mut t = Tensor::zeros(&[TRANSITION_SIZE, TRANSITION_SIZE]);
    for from in 0..TRANSITION_SIZE {
        for to in 0..TRANSITION_SIZE {
            if is_allowed_transition(from, to) {
                t.data_mut()[from * TRANSITION_SIZE + to] = 1.0;
            }
        }
    }
    t
}

/// `0` where a transition is allowed, [`MASK_SCORE`] where it is not.
pub fn transition_mask() -> Tensor {
    allowed_transitions().map(|a| if a > 0.0 { 0.0 } else { MASK_SCORE })
}

/// Overwrites masked entries of a raw transition matrix.
pub fn apply_mask(transitions: &Tensor) -> Tensor {
    transitions
        .zip_map(&transition_mask(), |t, m| if m < 0.0 { m } else { t })
        .expect("transition shape")
}

pub fn is_well_formed(tags: &[Tag]) -> bool {
    let mut prev = START;
    for t in tags {
        if !is_allowed_transition(prev, t.index()) {
            return false;
        }
        prev = t.index();
    }
    is_allowed_transition(prev, STOP)
}

fn check_shapes(em: &Tensor, trans: &Tensor) -> Result<(usize, usize)> {
    if em.rank() != 2 {
        return Err(Error::shape(format!("emissions must be n×L, got {:?}", em.shape())));
    }
    let labels = em.cols();
    let t = labels + 2;
    if trans.shape() != [t, t] {
        return Err(Error::shape(format!(
            "transitions must be {t}×{t} for {labels} labels, got {:?}",
            trans.shape()
        )));
    }
    Ok((em.rows(), labels))
}

/// Score of one tag path: start, emission, pairwise and stop terms.
pub fn sequence_score(em: &Tensor, trans: &Tensor, tags: &[Tag]) -> Result<f64> {
    let (n, labels) = check_shapes(em, trans)?;
    if tags.len() != n {
        return Err(Error::shape(format!("{} tags for {n} tokens", tags.len())));
    }
    let t = labels + 2;
    let (start, stop) = (labels, labels + 1);
    let mut score = trans.data()[start * t + tags[0].index()];
    for (i, tag) in tags.iter().enumerate() {
        score += em.at(i, tag.index());
        if i > 0 {
            score += trans.data()[tags[i - 1].index() * t + tag.index()];
        }
    }
    score += trans.data()[tags[n - 1].index() * t + stop];
    Ok(score)
}

fn lse_iter(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    crate::numerics::log_sum_exp(&v).unwrap_or(f64::NEG_INFINITY)
}

fn forward_scores(em: &Tensor, trans: &Tensor, labels: usize) -> Vec<Vec<f64>> {
    let t = labels + 2;
    let start = labels;
    let n = em.rows();
    let mut alpha = vec![vec![0.0; labels]; n];
    for y in 0..labels {
        alpha[0][y] = trans.data()[start * t + y] + em.at(0, y);
    }
    for i in 1..n {
        for y in 0..labels {
            let acc = lse_iter((0..labels).map(|p| alpha[i - 1][p] + trans.data()[p * t + y]));
            alpha[i][y] = acc + em.at(i, y);
        }
    }
    alpha
}

/// Log of the sum over all `L^n` tag paths of `exp(sequence_score)`,
/// by the forward recursion.
pub fn log_partition(em: &Tensor, trans: &Tensor) -> Result<f64> {
    let (n, labels) = check_shapes(em, trans)?;
    if !em.is_finite() || !trans.is_finite() {
        return Err(Error::NonFinite("CRF scores".into()));
    }
    let t = labels + 2;
    let stop = labels + 1;
    let alpha = forward_scores(em, trans, labels);
    Ok(lse_iter((0..labels).map(|y| alpha[n - 1][y] + trans.data()[y * t + stop])))
}

/// Per-token tag marginals (`n×L`) and expected transition counts
/// (`(L+2)×(L+2)`); together they are the gradient of [`log_partition`].
pub fn marginals(em: &Tensor, trans: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, labels) = check_shapes(em, trans)?;
    let t = labels + 2;
    let (start, stop) = (labels, labels + 1);
    let tr = |a: usize, b: usize| trans.data()[a * t + b];

    let alpha = forward_scores(em, trans, labels);
    let mut beta = vec![vec![0.0; labels]; n];
    for y in 0..labels {
        beta[n - 1][y] = tr(y, stop);
    }
    for i in (0..n - 1).rev() {
        for y in 0..labels {
            beta[i][y] =
                lse_iter((0..labels).map(|q| tr(y, q) + em.at(i + 1, q) + beta[i + 1][q]));
        }
    }
    let log_z = lse_iter((0..labels).map(|y| alpha[n - 1][y] + tr(y, stop)));

    let mut node = Tensor::zeros(em.shape());
    for i in 0..n {
        for y in 0..labels {
            node.data_mut()[i * labels + y] = (alpha[i][y] + beta[i][y] - log_z).exp();
        }
    }
    let mut pair = Tensor::zeros(trans.shape());
    for y in 0..labels {
        pair.data_mut()[start * t + y] += node.at(0, y);
        pair.data_mut()[y * t + stop] += node.at(n - 1, y);
    }
    for i in 1..n {
        for p in 0..labels {
            for q in 0..labels {
                let lp = alpha[i - 1][p] + tr(p, q) + em.at(i, q) + beta[i][q] - log_z;
                pair.data_mut()[p * t + q] += lp.exp();
            }
        }
    }
    Ok((node, pair))
}

/// Negative log-likelihood of `tags`.
pub fn crf_nll(em: &Tensor, trans: &Tensor, tags: &[Tag]) -> Result<f64> {
    let score = sequence_score(em, trans, tags)?;
    Ok(log_partition(em, trans)? - score)
}

/// Highest-scoring path and its score. Ties go to the lowest label index.
pub fn viterbi(em: &Tensor, trans: &Tensor) -> Result<(Vec<Tag>, f64)> {
    let (n, labels) = check_shapes(em, trans)?;
    if labels != NUM_TAGS {
        return Err(Error::shape(format!("viterbi decodes {NUM_TAGS} BIOES tags, got {labels}")));
    }
    if !em.is_finite() || !trans.is_finite() {
        return Err(Error::NonFinite("CRF scores".into()));
    }
    let t = labels + 2;
    let tr = |a: usize, b: usize| trans.data()[a * t + b];
    let mut delta = vec![0.0; labels];
    for (y, d) in delta.iter_mut().enumerate() {
        *d = tr(START, y) + em.at(0, y);
    }
    let mut back = vec![vec![0usize; labels]; n];
    for i in 1..n {
        let mut next = vec![0.0; labels];
        for y in 0..labels {
            let mut best = 0;
            let mut best_score = delta[0] + tr(0, y);
            for p in 1..labels {
                let s = delta[p] + tr(p, y);
                if s > best_score {
                    best = p;
                    best_score = s;
                }
            }
            back[i][y] = best;
            next[y] = best_score + em.at(i, y);
        }
        delta = next;
    }
    let mut last = 0;
    let mut best_score = delta[0] + tr(0, STOP);
    for (y, d) in delta.iter().enumerate().skip(1) {
        let s = d + tr(y, STOP);
        if s > best_score {
            last = y;
            best_score = s;
        }
    }
    let mut path = vec![last; n];
    for i in (1..n).rev() {
        path[i - 1] = back[i][path[i]];
    }
    let tags = path.into_iter().map(|i| Tag::from_index(i).expect("label index")).collect();
    Ok((tags, best_score))
}

/// Decodes spans from tags: one per `S` and one per `B I* E` run. Fragments
/// that do not form a complete entity are dropped.
pub fn tags_to_spans(tags: &[Tag]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Tag::O => open = None,
            Tag::S => {
                open = None;
                spans.push(EntitySpan::new(i, i));
            }
            Tag::B => open = Some(i),
            Tag::I => {}
            Tag::E => {
                if let Some(start) = open.take() {
                    spans.push(EntitySpan::new(start, i));
                }
            }
        }
    }
    spans
}

/// Encodes non-overlapping spans over `n` tokens.
pub fn spans_to_tags(spans: &[EntitySpan], n: usize) -> Result<Vec<Tag>> {
    let mut tags = vec![Tag::O; n];
    let mut used = vec![false; n];
    for span in spans {
        if span.start > span.end || span.end >= n {
            return Err(Error::invalid(format!(
                "span ({}, {}) out of range for {n} tokens",
                span.start, span.end
            )));
        }
        if used[span.start..=span.end].iter().any(|&u| u) {
            return Err(Error::invalid(format!(
                "span ({}, {}) overlaps another span",
                span.start, span.end
            )));
        }
        used[span.start..=span.end].iter_mut().for_each(|u| *u = true);
        if span.start == span.end {
            tags[span.start] = Tag::S;
        } else {
            tags[span.start] = Tag::B;
            tags[span.start + 1..span.end].iter_mut().for_each(|t| *t = Tag::I);
            tags[span.end] = Tag::E;
        }
    }
    Ok(tags)
}

/// In-graph negative log-likelihood of `tags` under emissions `em` (`n×L`)
/// and transitions `trans`.
pub fn nll_node(g: &mut Graph, em: Var, trans: Var, tags: &[Tag]) -> Result<Var> {
    let (n, labels) = check_shapes(g.value(em), g.value(trans))?;
    if tags.len() != n {
        return Err(Error::shape(format!("{} tags for {n} tokens", tags.len())));
    }
    let t = labels + 2;
    let (start, stop) = (labels, labels + 1);
    let em_idx: Vec<usize> = tags.iter().enumerate().map(|(i, y)| i * labels + y.index()).collect();
    let mut tr_idx = vec![start * t + tags[0].index()];
    tr_idx.extend(tags.windows(2).map(|w| w[0].index() * t + w[1].index()));
    tr_idx.push(tags[n - 1].index() * t + stop);

    let em_terms = g.gather(em, &em_idx)?;
    let tr_terms = g.gather(trans, &tr_idx)?;
    let em_sum = g.sum(em_terms);
    let tr_sum = g.sum(tr_terms);
    let score = g.add(em_sum, tr_sum)?;
    let log_z = g.crf_log_partition(em, trans)?;
    g.sub(log_z, score)
}

const EMIT_W: &str = "crf.emission.weight";
const EMIT_B: &str = "crf.emission.bias";
const TRANS: &str = "crf.transitions";

/// Encoder plus CRF head: the entity-span detection model.
#[derive(Debug, Clone)]
pub struct SpanDetector {
    pub encoder: TokenEncoder,
}

impl SpanDetector {
    pub fn new(encoder: TokenEncoder) -> Self {
        Self { encoder }
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.encoder.init_params(&mut rng);
        let d = self.encoder.config.hidden_dim;
        params.insert(EMIT_W, glorot(&mut rng, d, NUM_TAGS));
        params.insert(EMIT_B, Tensor::zeros(&[NUM_TAGS]));
        params.insert(TRANS, apply_mask(&Tensor::zeros(&[TRANSITION_SIZE, TRANSITION_SIZE])));
        params
    }

    /// `n×5` emission scores `h W + b`.
    pub fn emissions(&self, g: &mut Graph, p: &BoundParams, h: Var) -> Result<Var> {
        let em = g.matmul(h, p.get(EMIT_W)?)?;
        g.add_row(em, p.get(EMIT_B)?)
    }

    /// Stored transitions with the BIOES mask re-applied; masked entries
    /// carry no gradient.
    pub fn masked_transitions(&self, g: &mut Graph, p: &BoundParams) -> Result<Var> {
        let allowed = g.constant(allowed_transitions());
        let mask = g.constant(transition_mask());
        let kept = g.mul(p.get(TRANS)?, allowed)?;
        g.add(kept, mask)
    }

    pub fn sentence_nll(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        sentence: &Sentence,
        tags: &[Tag],
        store: Option<&EmbeddingStore>,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let h = self.encoder.encode_node(g, p, sentence, store, dropout_seed)?;
        let em = self.emissions(g, p, h)?;
        let trans = self.masked_transitions(g, p)?;
        nll_node(g, em, trans, tags)
    }

    /// Eval-mode emissions and masked transitions for one sentence.
    pub fn scores(
        &self,
        params: &ParamSet,
        sentence: &Sentence,
        store: Option<&EmbeddingStore>,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = g.bind_frozen(params);
        let h = self.encoder.encode_node(&mut g, &p, sentence, store, None)?;
        let em = self.emissions(&mut g, &p, h)?;
        let trans = self.masked_transitions(&mut g, &p)?;
        Ok((g.value(em).clone(), g.value(trans).clone()))
    }

    pub fn decode(
        &self,
        params: &ParamSet,
        sentence: &Sentence,
        store: Option<&EmbeddingStore>,
    ) -> Result<Vec<EntitySpan>> {
        let (em, trans) = self.scores(params, sentence, store)?;
        let (tags, _) = viterbi(&em, &trans)?;
        Ok(tags_to_spans(&tags))
    }
}
