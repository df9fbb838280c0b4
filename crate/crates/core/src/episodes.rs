//! Corpus ingestion, N-way K~2K-shot episode sampling and span-level
//! micro-F1.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::EntitySpan;
use crate::encoder::Sentence;
use crate::error::{Error, Result};
use crate::numerics::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// `B-type`, `I-type`, `E-type`, `S-type`, `O`.
    BioesTyped,
    /// Bare type labels or `O`; maximal runs of one type form a span.
    IoTyped,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bioes-typed" => Ok(CorpusFormat::BioesTyped),
            "io-typed" => Ok(CorpusFormat::IoTyped),
            other => Err(Error::Config(format!(
                "unknown corpus format {other:?} (expected bioes-typed or io-typed)"
            ))),
        }
    }
}

/// A sentence with gold typed spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSentence {
    pub sentence: Sentence,
    pub spans: Vec<EntitySpan>,
}

impl AnnotatedSentence {
    pub fn new(sentence: Sentence, spans: Vec<EntitySpan>) -> Result<Self> {
        let n = sentence.len();
        let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
        sorted.sort();
        for s in &sorted {
            if s.start > s.end || s.end >= n {
                return Err(Error::invalid(format!(
                    "sentence {:?}: span ({}, {}) out of range",
                    sentence.id, s.start, s.end
                )));
            }
            if s.label.is_none() {
                return Err(Error::invalid(format!(
                    "sentence {:?}: span ({}, {}) has no type",
                    sentence.id, s.start, s.end
                )));
            }
        }
        if sorted.windows(2).any(|w| w[0].overlaps(w[1])) {
            return Err(Error::invalid(format!("sentence {:?}: overlapping spans", sentence.id)));
        }
        Ok(Self { sentence, spans })
    }

    pub fn label_of(span: &EntitySpan) -> &str {
        span.label.as_deref().unwrap_or_default()
    }

    pub fn types(&self) -> BTreeSet<&str> {
        self.spans.iter().map(Self::label_of).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub sentences: Vec<AnnotatedSentence>,
    /// Sorted inventory of every type that occurs.
    pub types: Vec<String>,
}

impl Corpus {
    pub fn from_sentences(sentences: Vec<AnnotatedSentence>) -> Self {
        let types: BTreeSet<String> = sentences
            .iter()
            .flat_map(|s| s.spans.iter().map(|sp| AnnotatedSentence::label_of(sp).to_string()))
            .collect();
        Self { sentences, types: types.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().flat_map(|s| s.sentence.tokens.iter().map(String::as_str))
    }
}

/// Reads a corpus file. Sentence ids are `<file stem>:<index>`.
pub fn parse_corpus(path: impl AsRef<Path>, format: CorpusFormat, max_len: usize) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_corpus_str(&text, &stem, &path.display().to_string(), format, max_len)
}

fn parse_error(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: source.to_string(), line, message: message.into() }
}

pub fn parse_corpus_str(
    text: &str,
    id_prefix: &str,
    source: &str,
    format: CorpusFormat,
    max_len: usize,
) -> Result<Corpus> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut first_line = 0;

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, line: usize| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        if tokens.len() > max_len {
            return Err(parse_error(
                source,
                line,
                format!("sentence has {} tokens, max length is {max_len}", tokens.len()),
            ));
        }
        let spans = match format {
            CorpusFormat::IoTyped => io_spans(tags),
            CorpusFormat::BioesTyped => bioes_spans(tags),
        };
        let id = format!("{id_prefix}:{}", sentences.len());
        let sentence = Sentence::new(id, std::mem::take(tokens))?;
        tags.clear();
        sentences.push(AnnotatedSentence::new(sentence, spans)?);
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, first_line)?;
            continue;
        }
        let (token, tag) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(source, line_no, "expected token<TAB>tag"))?;
        let tag = tag.trim();
        if token.is_empty() || tag.is_empty() {
            return Err(parse_error(source, line_no, "empty token or tag"));
        }
        if format == CorpusFormat::BioesTyped && tag != "O" {
            let ok = tag
                .split_once('-')
                .is_some_and(|(p, t)| matches!(p, "B" | "I" | "E" | "S") && !t.is_empty());
            if !ok {
                return Err(parse_error(source, line_no, format!("bad BIOES tag {tag:?}")));
            }
        }
        if tokens.is_empty() {
            first_line = line_no;
        }
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags, first_line)?;
    Ok(Corpus::from_sentences(sentences))
}

fn io_spans(tags: &[String]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if tags[i] == "O" {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < tags.len() && tags[i + 1] == tags[start] {
            i += 1;
        }
        spans.push(EntitySpan::typed(start, i, tags[start].clone()));
        i += 1;
    }
    spans
}

fn bioes_spans(tags: &[String]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, ty) = tag.split_once('-').unwrap_or(("O", ""));
        match prefix {
            "S" => {
                open = None;
                spans.push(EntitySpan::typed(i, i, ty));
            }
            "B" => open = Some((i, ty)),
            "I" => {
                if open.is_some_and(|(_, t)| t != ty) {
                    open = None;
                }
            }
            "E" => {
                if let Some((start, t)) = open.take() {
                    if t == ty {
                        spans.push(EntitySpan::typed(start, i, ty));
                    }
                }
            }
            _ => open = None,
        }
    }
    spans
}

/// Writes a corpus back out in `format`.
pub fn serialize_corpus(corpus: &Corpus, format: CorpusFormat) -> String {
    let mut out = String::new();
    for (k, s) in corpus.sentences.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let n = s.sentence.len();
        let mut tags = vec!["O".to_string(); n];
        for span in &s.spans {
            let ty = AnnotatedSentence::label_of(span);
            match format {
                CorpusFormat::IoTyped => {
                    for t in &mut tags[span.start..=span.end] {
                        *t = ty.to_string();
                    }
                }
                CorpusFormat::BioesTyped => {
                    if span.start == span.end {
                        tags[span.start] = format!("S-{ty}");
                    } else {
                        tags[span.start] = format!("B-{ty}");
                        for t in &mut tags[span.start + 1..span.end] {
                            *t = format!("I-{ty}");
                        }
                        tags[span.end] = format!("E-{ty}");
                    }
                }
            }
        }
        for (token, tag) in s.sentence.tokens.iter().zip(tags) {
            out.push_str(token);
            out.push('\t');
            out.push_str(&tag);
            out.push('\n');
        }
    }
    out
}

/// One N-way task: support and query sets over a closed label set.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n: usize,
    pub k: usize,
    pub types: Vec<String>,
    pub support: Vec<AnnotatedSentence>,
    pub query: Vec<AnnotatedSentence>,
}

impl Episode {
    /// Number of support mentions per type, in label order.
    pub fn support_counts(&self) -> Vec<usize> {
        count_types(&self.support, &self.types)
    }

    /// Every type has at least one support entity and every span's type is
    /// in the label set.
    pub fn check_coverage(&self) -> Result<()> {
        for (ty, count) in self.types.iter().zip(self.support_counts()) {
            if count == 0 {
                return Err(Error::EmptyClass(ty.clone()));
            }
        }
        for s in self.support.iter().chain(&self.query) {
            for span in &s.spans {
                let ty = AnnotatedSentence::label_of(span);
                if !self.types.iter().any(|t| t == ty) {
                    return Err(Error::invalid(format!(
                        "sentence {:?}: type {ty:?} is outside the episode label set",
                        s.sentence.id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn count_types(sentences: &[AnnotatedSentence], types: &[String]) -> Vec<usize> {
    let mut counts = vec![0; types.len()];
    for s in sentences {
        for span in &s.spans {
            if let Some(i) = types.iter().position(|t| t == AnnotatedSentence::label_of(span)) {
                counts[i] += 1;
            }
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n: usize,
    pub k: usize,
    /// Shot count for the query set; defaults to `k`.
    pub query_k: Option<usize>,
    pub max_attempts: usize,
}

impl SamplerConfig {
    pub fn new(n: usize, k: usize) -> Self {
        Self { n, k, query_k: None, max_attempts: 16 }
    }
}

pub fn sample_episode(corpus: &Corpus, n: usize, k: usize, seed: u64) -> Result<Episode> {
    sample_episode_with(corpus, &SamplerConfig::new(n, k), seed)
}

/// Greedy K~2K sampling. Picks `n` types, then walks a shuffled sentence
/// order accepting sentences whose types are all chosen and that keep
/// every count at or below `2k`, until each type has at least `k`
/// mentions. The query set is drawn the same way from the remaining
/// sentences.
pub fn sample_episode_with(corpus: &Corpus, config: &SamplerConfig, seed: u64) -> Result<Episode> {
    let (n, k) = (config.n, config.k);
    if n == 0 || k == 0 {
        return Err(Error::Config("episode N and K must be positive".into()));
    }
    if corpus.types.len() < n {
        return Err(Error::Infeasible(format!(
            "corpus has {} entity types, episode needs {n}",
            corpus.types.len()
        )));
    }
    let query_k = config.query_k.unwrap_or(k);
    for attempt in 0..config.max_attempts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[attempt as u64]));
        let mut types: Vec<String> =
            corpus.types.choose_multiple(&mut rng, n).cloned().collect();
        types.sort();
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);

        let mut used = HashSet::new();
        let Some(support) = greedy_fill(corpus, &order, &types, k, &mut used) else { continue };
        let Some(query) = greedy_fill(corpus, &order, &types, query_k, &mut used) else { continue };
        return Ok(Episode {
            n,
            k,
            types,
            support: support.into_iter().map(|i| corpus.sentences[i].clone()).collect(),
            query: query.into_iter().map(|i| corpus.sentences[i].clone()).collect(),
        });
    }
    Err(Error::Infeasible(format!(
        "no {n}-way {k}~{}-shot episode found after {} attempts",
        2 * k,
        config.max_attempts
    )))
}

fn greedy_fill(
    corpus: &Corpus,
    order: &[usize],
    types: &[String],
    k: usize,
    used: &mut HashSet<usize>,
) -> Option<Vec<usize>> {
    let mut counts = vec![0usize; types.len()];
    let mut picked = Vec::new();
    for &idx in order {
        if used.contains(&idx) {
            continue;
        }
        let s = &corpus.sentences[idx];
        if s.spans.is_empty() {
            continue;
        }
        let mut next = counts.clone();
        let mut fits = true;
        for span in &s.spans {
            match types.iter().position(|t| t == AnnotatedSentence::label_of(span)) {
                Some(i) => next[i] += 1,
                None => {
                    fits = false;
                    break;
                }
            }
        }
        if !fits || next.iter().any(|&c| c > 2 * k) {
            continue;
        }
        counts = next;
        picked.push(idx);
        used.insert(idx);
        if counts.iter().all(|&c| c >= k) {
            return Some(picked);
        }
    }
    for idx in picked {
        used.remove(&idx);
    }
    None
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    tokens: Vec<String>,
    spans: Vec<(usize, usize, String)>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    n: usize,
    k: usize,
    types: Vec<String>,
    support: Vec<SentenceRecord>,
    query: Vec<SentenceRecord>,
}

fn to_record(s: &AnnotatedSentence) -> SentenceRecord {
    SentenceRecord {
        id: Some(s.sentence.id.clone()),
        tokens: s.sentence.tokens.clone(),
        spans: s
            .spans
            .iter()
            .map(|sp| (sp.start, sp.end, AnnotatedSentence::label_of(sp).to_string()))
            .collect(),
    }
}

fn from_record(r: SentenceRecord, fallback_id: String) -> Result<AnnotatedSentence> {
    let sentence = Sentence::new(r.id.unwrap_or(fallback_id), r.tokens)?;
    let spans = r.spans.into_iter().map(|(s, e, t)| EntitySpan::typed(s, e, t)).collect();
    AnnotatedSentence::new(sentence, spans)
}

impl Episode {
    pub fn to_json(&self) -> Result<String> {
        let record = EpisodeRecord {
            n: self.n,
            k: self.k,
            types: self.types.clone(),
            support: self.support.iter().map(to_record).collect(),
            query: self.query.iter().map(to_record).collect(),
        };
        Ok(serde_json::to_string(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EpisodeRecord = serde_json::from_str(text)?;
        let support = r
            .support
            .into_iter()
            .enumerate()
            .map(|(i, s)| from_record(s, format!("support:{i}")))
            .collect::<Result<_>>()?;
        let query = r
            .query
            .into_iter()
            .enumerate()
            .map(|(i, s)| from_record(s, format!("query:{i}")))
            .collect::<Result<_>>()?;
        Ok(Self { n: r.n, k: r.k, types: r.types, support, query })
    }
}

/// Reads one episode per non-blank line, or a single (possibly
/// pretty-printed) episode object.
pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let text = fs::read_to_string(path)?;
    if let Ok(single) = Episode::from_json(&text) {
        return Ok(vec![single]);
    }
    text.lines().filter(|l| !l.trim().is_empty()).map(Episode::from_json).collect()
}

pub fn write_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let mut out = String::new();
    for e in episodes {
        out.push_str(&e.to_json()?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Micro-averaged exact-match span scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
}

impl EvalReport {
    pub fn from_counts(predicted: usize, gold: usize, correct: usize) -> Self {
        let precision = if predicted > 0 { correct as f64 / predicted as f64 } else { 0.0 };
        let recall = if gold > 0 { correct as f64 / gold as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1, predicted, gold, correct }
    }
}

type SpanKey<'a> = (usize, usize, &'a str);

fn span_keys(spans: &[EntitySpan]) -> BTreeMap<SpanKey<'_>, usize> {
    let mut keys = BTreeMap::new();
    for s in spans {
        *keys.entry((s.start, s.end, AnnotatedSentence::label_of(s))).or_insert(0) += 1;
    }
    keys
}

/// A prediction is correct when start, end and type all match a gold span
/// of the same sentence.
pub fn micro_f1(predicted: &[Vec<EntitySpan>], gold: &[Vec<EntitySpan>]) -> Result<EvalReport> {
    if predicted.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predicted sentences vs {} gold sentences",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut n_pred, mut n_gold, mut n_correct) = (0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        let pk = span_keys(p);
        let gk = span_keys(g);
        n_pred += p.len();
        n_gold += g.len();
        n_correct += pk.iter().map(|(key, c)| (*c).min(gk.get(key).copied().unwrap_or(0))).sum::<usize>();
    }
    Ok(EvalReport::from_counts(n_pred, n_gold, n_correct))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}
