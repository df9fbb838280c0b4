//! Episodic meta-training: one SGD inner step per task on the support set,
//! first-order outer update from query-set gradients at the adapted
//! parameters, validation-based model selection and target fine-tuning.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    contrastive_loss_node, ec_loss_node, label_index, proto_distribution, prototypes, prototypes_node,
    ClassifierConfig, EntityClassifier, SimilarityMode,
};
use crate::crf::{spans_to_tags, EntitySpan, SpanDetector};
use crate::encoder::{EmbeddingStore, Sentence, TokenEncoder};
use crate::episodes::{micro_f1, sample_episode_with, AnnotatedSentence, Corpus, Episode, EvalReport, SamplerConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    adaptive_step, derive_seed, sgd_step, AdamConfig, AdamState, BoundParams, Graph, ParamSet, Precision, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Esd,
    Ec,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Esd => "esd",
            ModelKind::Ec => "ec",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "esd" => Ok(ModelKind::Esd),
            "ec" => Ok(ModelKind::Ec),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    #[default]
    Adaptive,
    Sgd,
}

impl FromStr for OuterOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" | "adamw" => Ok(OuterOptimizer::Adaptive),
            "sgd" => Ok(OuterOptimizer::Sgd),
            other => Err(Error::Config(format!("unknown outer optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Inner-loop (and fine-tuning) learning rate α.
    pub inner_lr: f64,
    /// Outer-loop learning rate β.
    pub outer_lr: f64,
    pub outer_optimizer: OuterOptimizer,
    pub adam: AdamConfig,
    /// Tasks per meta step.
    pub batch_size: usize,
    pub steps: usize,
    /// Weight γ of the contrastive term in the classifier objective.
    pub contrastive_weight: f64,
    pub finetune_steps: usize,
    /// Validate every this many steps; 0 validates only at the start and end.
    pub valid_interval: usize,
    pub valid_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_k: Option<usize>,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-2,
            outer_lr: 3e-5,
            outer_optimizer: OuterOptimizer::Adaptive,
            adam: AdamConfig::default(),
            batch_size: 32,
            steps: 1000,
            contrastive_weight: 1.0,
            finetune_steps: 20,
            valid_interval: 100,
            valid_episodes: 16,
            n_way: 5,
            k_shot: 1,
            query_k: None,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("inner_lr", self.inner_lr)?;
        positive("outer_lr", self.outer_lr)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.n_way == 0 || self.k_shot == 0 || self.query_k == Some(0) {
            return Err(Error::Config("n_way, k_shot and query_k must be positive".into()));
        }
        if !(self.contrastive_weight >= 0.0 && self.contrastive_weight.is_finite()) {
            return Err(Error::Config(format!(
                "contrastive_weight must be non-negative, got {}",
                self.contrastive_weight
            )));
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { query_k: self.query_k, ..SamplerConfig::new(self.n_way, self.k_shot) }
    }
}

/// Either stage's model. Both share the encoder design; the heads differ.
#[derive(Debug, Clone)]
pub enum Model {
    Esd(SpanDetector),
    Ec(EntityClassifier),
}

// Keeps support and query dropout masks apart within one task.
const QUERY_STREAM: u64 = 1;

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Esd(_) => ModelKind::Esd,
            Model::Ec(_) => ModelKind::Ec,
        }
    }

    pub fn encoder(&self) -> &TokenEncoder {
        match self {
            Model::Esd(m) => &m.encoder,
            Model::Ec(m) => &m.encoder,
        }
    }

    pub fn classifier_config(&self) -> Option<&ClassifierConfig> {
        match self {
            Model::Esd(_) => None,
            Model::Ec(m) => Some(&m.config),
        }
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        match self {
            Model::Esd(m) => m.init_params(seed),
            Model::Ec(m) => m.init_params(seed),
        }
    }

    /// Loss on `query` after adaptation. The classifier builds prototypes
    /// from `support`; the span detector ignores it.
    #[allow(clippy::too_many_arguments)]
    pub fn task_loss(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        support: &[AnnotatedSentence],
        query: &[AnnotatedSentence],
        task: &TaskSpec,
        store: Option<&EmbeddingStore>,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        match self {
            Model::Esd(m) => esd_loss(m, g, p, query, store, dropout_seed),
            Model::Ec(m) => ec_task_loss(m, g, p, support, query, task, store, dropout_seed),
        }
    }

    /// Inner-loop / fine-tuning objective on a single labelled set.
    pub fn support_loss(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        support: &[AnnotatedSentence],
        task: &TaskSpec,
        store: Option<&EmbeddingStore>,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        self.task_loss(g, p, support, support, task, store, dropout_seed)
    }

    /// Scalar support loss in eval mode.
    pub fn support_loss_value(
        &self,
        params: &ParamSet,
        support: &[AnnotatedSentence],
        task: &TaskSpec,
        store: Option<&EmbeddingStore>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.bind_frozen(params);
        let loss = self.support_loss(&mut g, &p, support, task, store, None)?;
        g.value(loss).item()
    }

    /// Query loss in eval mode, prototypes from `support`.
    pub fn query_loss_value(
        &self,
        params: &ParamSet,
        support: &[AnnotatedSentence],
        query: &[AnnotatedSentence],
        task: &TaskSpec,
        store: Option<&EmbeddingStore>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.bind_frozen(params);
        let loss = self.task_loss(&mut g, &p, support, query, task, store, None)?;
        g.value(loss).item()
    }
}

/// Per-task settings that depend on the episode rather than the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub labels: Vec<String>,
    pub similarity: SimilarityMode,
    pub contrastive_weight: f64,
}

impl TaskSpec {
    pub fn for_episode(model: &Model, episode: &Episode, contrastive_weight: f64) -> Self {
        Self::new(model, episode.types.clone(), episode.k, contrastive_weight)
    }

    pub fn new(model: &Model, labels: Vec<String>, k: usize, contrastive_weight: f64) -> Self {
        let similarity = model
            .classifier_config()
            .map_or(SimilarityMode::for_shots(k), |c| c.similarity_for(k));
        Self { labels, similarity, contrastive_weight }
    }

    /// Label set and shot count read off a labelled support set: types in
    /// sorted order, K = the rarest type's mention count.
    pub fn from_support(model: &Model, support: &[AnnotatedSentence], contrastive_weight: f64) -> Self {
        let corpus = Corpus::from_sentences(support.to_vec());
        let counts: Vec<usize> = corpus
            .types
            .iter()
            .map(|t| {
                support
                    .iter()
                    .flat_map(|s| &s.spans)
                    .filter(|sp| AnnotatedSentence::label_of(sp) == t)
                    .count()
            })
            .collect();
        let k = counts.into_iter().min().unwrap_or(1);
        Self::new(model, corpus.types, k, contrastive_weight)
    }
}

/// Mean CRF negative log-likelihood over sentences.
fn esd_loss(
    model: &SpanDetector,
    g: &mut Graph,
    p: &BoundParams,
    sentences: &[AnnotatedSentence],
    store: Option<&EmbeddingStore>,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    if sentences.is_empty() {
        return Err(Error::invalid("span detector loss over an empty set"));
    }
    let mut terms = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        let tags = spans_to_tags(&s.spans, s.sentence.len())?;
        let seed = dropout_seed.map(|d| derive_seed(d, &[i as u64]));
        terms.push(model.sentence_nll(g, p, &s.sentence, &tags, store, seed)?);
    }
    let stacked = g.concat(&terms)?;
    Ok(g.mean(stacked))
}

type SpanItems<'a> = Vec<(&'a Sentence, &'a [EntitySpan])>;

fn span_items(set: &[AnnotatedSentence]) -> SpanItems<'_> {
    set.iter().map(|s| (&s.sentence, s.spans.as_slice())).collect()
}

fn gold_indices(set: &[AnnotatedSentence], labels: &[String]) -> Result<Vec<usize>> {
    set.iter()
        .flat_map(|s| &s.spans)
        .map(|sp| label_index(labels, AnnotatedSentence::label_of(sp)))
        .collect()
}

/// Prototype cross-entropy of the query entities plus γ times their
/// contrastive loss. Prototypes come from the support entities under the
/// same parameters.
#[allow(clippy::too_many_arguments)]
fn ec_task_loss(
    model: &EntityClassifier,
    g: &mut Graph,
    p: &BoundParams,
    support: &[AnnotatedSentence],
    query: &[AnnotatedSentence],
    task: &TaskSpec,
    store: Option<&EmbeddingStore>,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    let support_gold = gold_indices(support, &task.labels)?;
    let query_gold = gold_indices(query, &task.labels)?;
    let support_emb = model
        .span_embeddings_node(g, p, &span_items(support), store, dropout_seed)?
        .ok_or_else(|| Error::invalid("support set has no entities"))?;
    let protos = prototypes_node(g, support_emb, &support_gold, &task.labels)?;

    let query_seed = dropout_seed.map(|d| derive_seed(d, &[QUERY_STREAM]));
    let Some(query_emb) = model.span_embeddings_node(g, p, &span_items(query), store, query_seed)? else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let ec = ec_loss_node(g, query_emb, protos, &query_gold, model.config.distance)?;
    if task.contrastive_weight == 0.0 || query_gold.len() < 2 {
        return Ok(ec);
    }
    let (mean, log_var) = model.project_node(g, p, query_emb)?;
    let cl = contrastive_loss_node(g, mean, log_var, &query_gold, model.config.temperature, task.similarity)?;
    let weighted = g.scale(cl, task.contrastive_weight);
    g.add(ec, weighted)
}

/// Loss value and its gradient with respect to every parameter.
pub fn loss_and_grad<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params);
    let out = f(&mut g, &bound)?;
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    let grads = g.backward(out)?.collect(&bound, params)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    Ok((value, grads))
}

/// One SGD step of size `lr` on `loss`. `params` is left untouched.
/// Returns the adapted parameters and the pre-step loss.
pub fn inner_update<F>(params: &ParamSet, lr: f64, loss: F) -> Result<(ParamSet, f64)>
where
    F: FnOnce(&mut Graph, &BoundParams) -> Result<Var>,
{
    let (value, grads) = loss_and_grad(params, loss)?;
    Ok((sgd_step(params, &grads, lr)?, value))
}

/// Per-task outcome of the inner/outer computation.
#[derive(Debug, Clone)]
pub struct TaskGradient {
    pub support_loss: f64,
    pub query_loss: f64,
    /// Query-loss gradient at the adapted parameters.
    pub grads: ParamSet,
}

pub fn task_gradient(
    model: &Model,
    params: &ParamSet,
    episode: &Episode,
    store: Option<&EmbeddingStore>,
    config: &TrainerConfig,
    dropout_seed: Option<u64>,
) -> Result<TaskGradient> {
    if model.kind() == ModelKind::Ec {
        episode.check_coverage()?;
    }
    let task = TaskSpec::for_episode(model, episode, config.contrastive_weight);
    let (adapted, support_loss) = inner_update(params, config.inner_lr, |g, p| {
        model.support_loss(g, p, &episode.support, &task, store, dropout_seed)
    })?;
    let query_seed = dropout_seed.map(|d| derive_seed(d, &[QUERY_STREAM]));
    let (query_loss, grads) = loss_and_grad(&adapted, |g, p| {
        model.task_loss(g, p, &episode.support, &episode.query, &task, store, query_seed)
    })?;
    Ok(TaskGradient { support_loss, query_loss, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// `None` for the initial validation-only record.
    pub support_loss: Option<f64>,
    pub query_loss: Option<f64>,
    pub valid_score: Option<f64>,
}

/// Outer optimiser state plus the current base parameters.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub params: ParamSet,
    pub adam: AdamState,
}

/// One meta step over `episodes`. Tasks run in parallel; their gradients
/// are summed in episode order so the result does not depend on
/// scheduling.
pub fn meta_step(
    model: &Model,
    state: &MetaState,
    episodes: &[Episode],
    store: Option<&EmbeddingStore>,
    config: &TrainerConfig,
    dropout_base: Option<u64>,
) -> Result<(MetaState, f64, f64)> {
    if episodes.is_empty() {
        return Err(Error::invalid("meta step needs at least one episode"));
    }
    let results: Vec<Result<TaskGradient>> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let seed = dropout_base.map(|d| derive_seed(d, &[i as u64]));
            task_gradient(model, &state.params, e, store, config, seed)
        })
        .collect();
    let mut total = state.params.zeros_like();
    let (mut support, mut query) = (0.0, 0.0);
    for r in results {
        let t = r?;
        total.accumulate(&t.grads)?;
        support += t.support_loss;
        query += t.query_loss;
    }
    let (adam, mut params) = match config.outer_optimizer {
        OuterOptimizer::Adaptive => adaptive_step(&config.adam, &state.adam, &state.params, &total, config.outer_lr)?,
        OuterOptimizer::Sgd => (state.adam.clone(), sgd_step(&state.params, &total, config.outer_lr)?),
    };
    params.round_to(config.precision);
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters diverged after outer update".into()));
    }
    let n = episodes.len() as f64;
    Ok((MetaState { params, adam }, support / n, query / n))
}

/// Validation after one inner step on each episode's support set. The span
/// detector is scored by untyped span F1 on the query set, the classifier
/// by type accuracy on gold query spans (reported through the same
/// counts, so its F1 equals its accuracy).
pub fn evaluate_episode(
    model: &Model,
    params: &ParamSet,
    episode: &Episode,
    store: Option<&EmbeddingStore>,
    config: &TrainerConfig,
) -> Result<EvalReport> {
    let task = TaskSpec::for_episode(model, episode, config.contrastive_weight);
    let (adapted, _) = inner_update(params, config.inner_lr, |g, p| {
        model.support_loss(g, p, &episode.support, &task, store, None)
    })?;
    match model {
        Model::Esd(m) => {
            let mut predicted = Vec::with_capacity(episode.query.len());
            let mut gold = Vec::with_capacity(episode.query.len());
            for q in &episode.query {
                predicted.push(m.decode(&adapted, &q.sentence, store)?);
                gold.push(q.spans.iter().map(|s| EntitySpan::new(s.start, s.end)).collect());
            }
            micro_f1(&predicted, &gold)
        }
        Model::Ec(m) => {
            let protos = support_prototypes(m, &adapted, &episode.support, &task.labels, store)?;
            let (mut total, mut correct) = (0, 0);
            for q in &episode.query {
                let embeddings = m.embed_spans(&adapted, &q.sentence, &q.spans, store)?;
                for (e, span) in embeddings.iter().zip(&q.spans) {
                    let gold = label_index(&task.labels, AnnotatedSentence::label_of(span))?;
                    let dist = proto_distribution(e, &protos, m.config.distance)?;
                    total += 1;
                    correct += usize::from(dist.argmax() == gold);
                }
            }
            Ok(EvalReport::from_counts(total, total, correct))
        }
    }
}

/// Eval-mode prototypes from the gold entities of `support`.
pub fn support_prototypes(
    model: &EntityClassifier,
    params: &ParamSet,
    support: &[AnnotatedSentence],
    labels: &[String],
    store: Option<&EmbeddingStore>,
) -> Result<crate::classifier::Prototypes> {
    let mut items = Vec::new();
    for s in support {
        let embeddings = model.embed_spans(params, &s.sentence, &s.spans, store)?;
        for (e, span) in embeddings.into_iter().zip(&s.spans) {
            items.push((e, label_index(labels, AnnotatedSentence::label_of(span))?));
        }
    }
    prototypes(&items, labels)
}

/// Pooled score over validation episodes.
pub fn validate(
    model: &Model,
    params: &ParamSet,
    episodes: &[Episode],
    store: Option<&EmbeddingStore>,
    config: &TrainerConfig,
) -> Result<f64> {
    let reports: Vec<Result<EvalReport>> =
        episodes.par_iter().map(|e| evaluate_episode(model, params, e, store, config)).collect();
    let (mut p, mut g, mut c) = (0, 0, 0);
    for r in reports {
        let r = r?;
        p += r.predicted;
        g += r.gold;
        c += r.correct;
    }
    Ok(EvalReport::from_counts(p, g, c).f1)
}

/// Where training tasks come from.
#[derive(Debug, Clone, Copy)]
pub enum TaskSource<'a> {
    /// Fresh episodes sampled from a corpus each step.
    Corpus(&'a Corpus),
    /// A fixed episode list, cycled in order.
    Episodes(&'a [Episode]),
}

impl TaskSource<'_> {
    fn batch(&self, config: &TrainerConfig, step: usize) -> Result<Vec<Episode>> {
        match self {
            TaskSource::Corpus(corpus) => {
                let sampler = config.sampler();
                (0..config.batch_size)
                    .map(|i| {
                        let seed = derive_seed(config.seed, &[TRAIN_STREAM, step as u64, i as u64]);
                        sample_episode_with(corpus, &sampler, seed)
                    })
                    .collect()
            }
            TaskSource::Episodes(list) => {
                if list.is_empty() {
                    return Err(Error::invalid("empty episode list"));
                }
                Ok((0..config.batch_size)
                    .map(|i| list[(step * config.batch_size + i) % list.len()].clone())
                    .collect())
            }
        }
    }
}

const TRAIN_STREAM: u64 = 0x7261_696e;
const VALID_STREAM: u64 = 0x7661_6c69;
const DROPOUT_STREAM: u64 = 0x6472_6f70;
const INIT_STREAM: u64 = 0x696e_6974;
const FINETUNE_STREAM: u64 = 0x6669_6e65;

/// Validation episodes drawn deterministically from `corpus`.
pub fn sample_validation_episodes(corpus: &Corpus, config: &TrainerConfig) -> Result<Vec<Episode>> {
    let sampler = config.sampler();
    (0..config.valid_episodes)
        .map(|i| sample_episode_with(corpus, &sampler, derive_seed(config.seed, &[VALID_STREAM, i as u64])))
        .collect()
}

/// Seed used to initialise a fresh model for a run.
pub fn init_seed(config: &TrainerConfig) -> u64 {
    derive_seed(config.seed, &[INIT_STREAM])
}

/// Best parameters seen so far and where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: ParamSet,
    pub step: usize,
    pub valid_score: Option<f64>,
}

/// Meta-training loop with best-on-validation selection. Keeps the best
/// snapshot available even when a later step fails.
pub struct Trainer<'a> {
    model: &'a Model,
    config: TrainerConfig,
    source: TaskSource<'a>,
    valid: Vec<Episode>,
    store: Option<&'a EmbeddingStore>,
    state: MetaState,
    step: usize,
    best: Option<Snapshot>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a Model,
        config: TrainerConfig,
        params: ParamSet,
        source: TaskSource<'a>,
        valid: Vec<Episode>,
        store: Option<&'a EmbeddingStore>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            source,
            valid,
            store,
            state: MetaState { params, adam: AdamState::default() },
            step: 0,
            best: None,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.state.params
    }

    pub fn best(&self) -> Option<&Snapshot> {
        self.best.as_ref()
    }

    fn consider(&mut self, score: Option<f64>) {
        let better = match (&self.best, score) {
            (None, _) => true,
            (Some(b), Some(s)) => b.valid_score.is_none_or(|old| s >= old),
            (Some(_), None) => true,
        };
        if better {
            self.best = Some(Snapshot { params: self.state.params.clone(), step: self.step, valid_score: score });
        }
    }

    fn score(&self) -> Result<Option<f64>> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        validate(self.model, &self.state.params, &self.valid, self.store, &self.config).map(Some)
    }

    /// Runs every remaining step, reporting metrics after each. Step 0 is
    /// the initial validation and carries no training losses.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<Snapshot> {
        if self.step == 0 && self.best.is_none() {
            let score = self.score()?;
            self.consider(score);
            on_step(&StepMetrics { step: 0, support_loss: None, query_loss: None, valid_score: score });
        }
        while self.step < self.config.steps {
            let m = self.step_once()?;
            on_step(&m);
        }
        Ok(self.best.clone().expect("initial snapshot recorded"))
    }

    fn step_once(&mut self) -> Result<StepMetrics> {
        let episodes = self.source.batch(&self.config, self.step)?;
        let dropout = derive_seed(self.config.seed, &[DROPOUT_STREAM, self.step as u64]);
        let (state, support_loss, query_loss) =
            meta_step(self.model, &self.state, &episodes, self.store, &self.config, Some(dropout))
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("step {}: {msg}", self.step + 1)),
                    other => other,
                })?;
        self.state = state;
        self.step += 1;
        let interval = self.config.valid_interval;
        let due = self.step == self.config.steps || (interval > 0 && self.step.is_multiple_of(interval));
        let valid_score = if due { self.score()? } else { None };
        if due {
            self.consider(valid_score);
        }
        Ok(StepMetrics {
            step: self.step,
            support_loss: Some(support_loss),
            query_loss: Some(query_loss),
            valid_score,
        })
    }
}

/// Plain gradient descent on the support objective of a single target
/// task, `config.finetune_steps` steps at the inner learning rate.
pub fn finetune(
    model: &Model,
    params: &ParamSet,
    support: &[AnnotatedSentence],
    store: Option<&EmbeddingStore>,
    config: &TrainerConfig,
) -> Result<ParamSet> {
    if support.is_empty() || support.iter().all(|s| s.spans.is_empty()) {
        return Err(Error::invalid("fine-tuning needs a support set with at least one entity"));
    }
    let task = TaskSpec::from_support(model, support, config.contrastive_weight);
    let mut current = params.clone();
    for step in 0..config.finetune_steps {
        let seed = derive_seed(config.seed, &[FINETUNE_STREAM, step as u64]);
        let (next, _) = inner_update(&current, config.inner_lr, |g, p| {
            model.support_loss(g, p, support, &task, store, Some(seed))
        })
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("fine-tuning step {}: {msg}", step + 1)),
            other => other,
        })?;
        current = next;
        current.round_to(config.precision);
    }
    Ok(current)
}
