//! Subcommand implementations. Every command checks its inputs and config
//! before doing any work, and writes its outputs only once they are ready.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msfner::checkpoint::Checkpoint;
use msfner::classifier::EntityClassifier;
use msfner::config::RunConfig;
use msfner::crf::{EntitySpan, SpanDetector};
use msfner::encoder::{load_embedding_file, EmbeddingStore, EncoderMode, TokenEncoder, Vocab};
use msfner::episodes::{
    load_episodes, mean_std, micro_f1, parse_corpus, sample_episode, write_episodes, AnnotatedSentence,
    Corpus, Episode, EvalReport,
};
use msfner::knn::{build_datastore, infer, read_predictions, write_predictions, Datastore, HybridModel};
use msfner::numerics::derive_seed;
use msfner::trainer::{
    finetune, init_seed, sample_validation_episodes, Model, ModelKind, TaskSource, Trainer,
};
use msfner::Error;

use crate::{Command, Common, TaskArgs, TrainArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainEsd { common, args } => train(ModelKind::Esd, &common, &args),
        Command::TrainEc { common, args } => train(ModelKind::Ec, &common, &args),
        Command::Finetune { common, checkpoint, task, out } => cmd_finetune(&common, &checkpoint, &task, &out),
        Command::BuildDatastore { common, checkpoint, task, out } => {
            cmd_build_datastore(&common, &checkpoint, &task, &out)
        }
        Command::SampleEpisodes { common, corpus, count, n, k, out } => {
            cmd_sample_episodes(&common, &corpus, count, n, k, &out)
        }
        Command::Infer { common, esd, ec, task, query, datastore, out } => {
            cmd_infer(&common, &esd, &ec, &task, query.as_deref(), datastore.as_deref(), &out)
        }
        Command::Eval { common, predictions, gold, episode, out } => {
            cmd_eval(&common, &predictions, &gold, episode, out.as_deref())
        }
        Command::Config { common } => emit(&resolve(&common)?.dump()),
    }
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing to stdout"),
        _ => Ok(()),
    }
}

fn config_error(message: String) -> anyhow::Error {
    Error::Config(message).into()
}

/// Config file, then `--set` overrides in order, then `--seed`.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &common.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set {item:?}: expected KEY=VALUE")))?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        config.seed = Some(seed);
    }
    config.resolve_seed()?;
    config.validate()?;
    Ok(config)
}

fn require_file(field: &str, path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(config_error(format!("{field}: {} does not exist", path.display())));
    }
    Ok(())
}

fn require_output(field: &str, path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(config_error(format!("{field}: directory {} does not exist", parent.display())));
    }
    Ok(())
}

fn require_embeddings(config: &RunConfig) -> Result<()> {
    for path in &config.embeddings {
        require_file("embeddings", path)?;
    }
    Ok(())
}

/// Merged store of every configured embedding file; `None` when the
/// encoder does not read precomputed vectors.
fn load_store(config: &RunConfig, mode: EncoderMode) -> Result<Option<EmbeddingStore>> {
    if mode == EncoderMode::Trainable {
        return Ok(None);
    }
    if config.embeddings.is_empty() {
        return Err(config_error("embeddings: precomputed encoder needs at least one embedding file".into()));
    }
    let mut store = EmbeddingStore::new();
    for path in &config.embeddings {
        let part = load_embedding_file(path).with_context(|| format!("reading {}", path.display()))?;
        store.merge(part)?;
    }
    Ok(Some(store))
}

fn load_corpus(config: &RunConfig, path: &Path) -> Result<Corpus> {
    parse_corpus(path, config.corpus_format, config.encoder.max_len)
        .with_context(|| format!("reading corpus {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn build_model(kind: ModelKind, config: &RunConfig, vocab_source: &[&AnnotatedSentence]) -> Result<Model> {
    let encoder = match config.encoder.mode {
        EncoderMode::Trainable => {
            let tokens = vocab_source.iter().flat_map(|s| s.sentence.tokens.iter().map(String::as_str));
            TokenEncoder::trainable(config.encoder.clone(), Vocab::build(tokens, config.encoder.vocab_size))?
        }
        EncoderMode::Precomputed => TokenEncoder::precomputed(config.encoder.clone())?,
    };
    Ok(match kind {
        ModelKind::Esd => Model::Esd(SpanDetector::new(encoder)),
        ModelKind::Ec => Model::Ec(EntityClassifier::new(encoder, config.classifier.clone())?),
    })
}

fn train(kind: ModelKind, common: &Common, args: &TrainArgs) -> Result<()> {
    let mut config = resolve(common)?;
    if let Some(p) = &args.train {
        config.train_corpus = Some(p.clone());
    }
    if let Some(p) = &args.valid {
        config.valid_corpus = Some(p.clone());
    }
    config.validate_encoder_inputs()?;
    match (&args.train_episodes, &config.train_corpus) {
        (Some(p), _) => require_file("train_episodes", p)?,
        (None, Some(p)) => require_file("train_corpus", p)?,
        (None, None) => return Err(config_error("train_corpus: not set (use --train or train_corpus)".into())),
    }
    if let Some(p) = &config.valid_corpus {
        require_file("valid_corpus", p)?;
    }
    require_embeddings(&config)?;
    let metrics_path = args.metrics.clone().unwrap_or_else(|| {
        let mut name = args.out.clone().into_os_string();
        name.push(".metrics.jsonl");
        PathBuf::from(name)
    });
    require_output("out", &args.out)?;
    require_output("metrics", &metrics_path)?;
    if let Some(p) = &args.dump_config {
        require_output("dump_config", p)?;
    }

    let store = load_store(&config, config.encoder.mode)?;
    let fixed = match &args.train_episodes {
        Some(p) => Some(load_episodes(p).with_context(|| format!("reading episodes {}", p.display()))?),
        None => None,
    };
    let corpus = match (&fixed, &config.train_corpus) {
        (None, Some(p)) => Some(load_corpus(&config, p)?),
        _ => None,
    };
    let valid = match &config.valid_corpus {
        Some(p) => sample_validation_episodes(&load_corpus(&config, p)?, &config.trainer)
            .context("sampling validation episodes")?,
        None => Vec::new(),
    };
    let vocab_source: Vec<&AnnotatedSentence> = match (&fixed, &corpus) {
        (Some(list), _) => list.iter().flat_map(|e| e.support.iter().chain(&e.query)).collect(),
        (None, Some(c)) => c.sentences.iter().collect(),
        (None, None) => unreachable!("checked above"),
    };
    let model = build_model(kind, &config, &vocab_source)?;
    let source = match (&fixed, &corpus) {
        (Some(list), _) => TaskSource::Episodes(list),
        (None, Some(c)) => TaskSource::Corpus(c),
        (None, None) => unreachable!("checked above"),
    };
    if let Some(p) = &args.dump_config {
        fs::write(p, config.dump())?;
    }

    let params = model.init_params(init_seed(&config.trainer));
    let mut trainer = Trainer::new(&model, config.trainer.clone(), params, source, valid, store.as_ref())?;
    let mut log = BufWriter::new(File::create(&metrics_path)?);
    let mut log_error = None;
    let outcome = trainer.run(|m| {
        let line = serde_json::to_string(m).map_err(anyhow::Error::from);
        if let Err(e) = line.and_then(|l| writeln!(log, "{l}").map_err(anyhow::Error::from)) {
            log_error.get_or_insert(e);
        }
    });
    log.flush()?;
    if let Some(e) = log_error {
        return Err(e.context(format!("writing {}", metrics_path.display())));
    }
    let (best, failure) = match outcome {
        Ok(best) => (best, None),
        Err(e) => match trainer.best() {
            Some(best) => (best.clone(), Some(e)),
            None => return Err(e.into()),
        },
    };
    let mut checkpoint = Checkpoint::new(&model, config.trainer.clone(), best.params);
    checkpoint.step = best.step as u64;
    checkpoint.valid_score = best.valid_score;
    checkpoint.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(e) = failure {
        return Err(anyhow::Error::from(e)
            .context(format!("training aborted; best checkpoint (step {}) written", best.step)));
    }
    match best.valid_score {
        Some(s) => eprintln!("{kind}: best step {} (validation {s:.4}) -> {}", best.step, args.out.display()),
        None => eprintln!("{kind}: step {} -> {}", best.step, args.out.display()),
    }
    Ok(())
}

/// One support/query pair and the episode it came from.
struct Task {
    episode: Option<usize>,
    support: Vec<AnnotatedSentence>,
    query: Vec<AnnotatedSentence>,
}

impl Task {
    fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> =
            self.support.iter().flat_map(|s| s.types()).map(str::to_string).collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

fn check_task_inputs(task: &TaskArgs, query: Option<&Path>) -> Result<()> {
    match (&task.episodes, &task.support) {
        (Some(p), _) => require_file("episodes", p)?,
        (None, Some(p)) => require_file("support", p)?,
        (None, None) => return Err(config_error("support: pass --episodes or --support".into())),
    }
    if let Some(p) = query {
        require_file("query", p)?;
    }
    Ok(())
}

fn load_tasks(config: &RunConfig, task: &TaskArgs, query: Option<&Path>) -> Result<Vec<Task>> {
    if let Some(path) = &task.episodes {
        let episodes = load_episodes(path).with_context(|| format!("reading episodes {}", path.display()))?;
        let pick: Vec<usize> = if task.all_episodes {
            (0..episodes.len()).collect()
        } else {
            let i = task.episode.unwrap_or(0);
            if i >= episodes.len() {
                bail!(Error::InvalidInput(format!(
                    "episode {i} out of range: {} has {} episodes",
                    path.display(),
                    episodes.len()
                )));
            }
            vec![i]
        };
        let mut episodes: Vec<Option<Episode>> = episodes.into_iter().map(Some).collect();
        return Ok(pick
            .into_iter()
            .map(|i| {
                let e = episodes[i].take().expect("each episode picked once");
                Task { episode: Some(i), support: e.support, query: e.query }
            })
            .collect());
    }
    let support = task.support.as_deref().expect("checked by check_task_inputs");
    let support = load_corpus(config, support)?.sentences;
    let query = match query {
        Some(p) => load_corpus(config, p)?.sentences,
        None => Vec::new(),
    };
    Ok(vec![Task { episode: None, support, query }])
}

fn single_task(config: &RunConfig, task: &TaskArgs) -> Result<Task> {
    if task.all_episodes {
        return Err(config_error("all_episodes: this command takes a single support set".into()));
    }
    Ok(load_tasks(config, task, None)?.remove(0))
}

fn cmd_finetune(common: &Common, checkpoint: &Path, task: &TaskArgs, out: &Path) -> Result<()> {
    let config = resolve(common)?;
    require_file("checkpoint", checkpoint)?;
    check_task_inputs(task, None)?;
    require_embeddings(&config)?;
    require_output("out", out)?;

    let source = load_checkpoint(checkpoint)?;
    let model = source.model()?;
    let store = load_store(&config, model.encoder().config.mode)?;
    let task = single_task(&config, task)?;
    let labels = task.labels();
    let params = finetune(&model, &source.params, &task.support, store.as_ref(), &config.trainer)?;

    let mut tuned = source.clone();
    tuned.meta.trainer = config.trainer.clone();
    tuned.meta.labels = Some(labels.clone());
    tuned.params = params;
    tuned.save(out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!(
        "{}: fine-tuned {} steps on {} support sentences ({}) -> {}",
        source.kind,
        config.trainer.finetune_steps,
        task.support.len(),
        labels.join(", "),
        out.display()
    );
    Ok(())
}

fn classifier_of(model: &Model, path: &Path) -> Result<EntityClassifier> {
    match model {
        Model::Ec(c) => Ok(c.clone()),
        Model::Esd(_) => Err(config_error(format!("{}: expected an entity classifier checkpoint", path.display()))),
    }
}

fn cmd_build_datastore(common: &Common, checkpoint: &Path, task: &TaskArgs, out: &Path) -> Result<()> {
    let config = resolve(common)?;
    require_file("checkpoint", checkpoint)?;
    check_task_inputs(task, None)?;
    require_embeddings(&config)?;
    require_output("out", out)?;

    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let classifier = classifier_of(&model, checkpoint)?;
    let store = load_store(&config, model.encoder().config.mode)?;
    let task = single_task(&config, task)?;
    let labels = task.labels();
    check_labels(&ckpt, checkpoint, &labels)?;
    let ds = build_datastore(&classifier, &ckpt.params, &task.support, &labels, store.as_ref())?;
    ds.save(out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("datastore: {} entries over {} types -> {}", ds.len(), labels.len(), out.display());
    Ok(())
}

fn cmd_sample_episodes(
    common: &Common,
    corpus: &Path,
    count: usize,
    n: Option<usize>,
    k: Option<usize>,
    out: &Path,
) -> Result<()> {
    let config = resolve(common)?;
    require_file("corpus", corpus)?;
    require_output("out", out)?;
    let (n, k) = (n.unwrap_or(config.trainer.n_way), k.unwrap_or(config.trainer.k_shot));
    if n == 0 || k == 0 {
        return Err(config_error("n and k must be positive".into()));
    }
    let corpus = load_corpus(&config, corpus)?;
    let seed = config.trainer.seed;
    let episodes = (0..count)
        .map(|i| sample_episode(&corpus, n, k, derive_seed(seed, &[i as u64])))
        .collect::<msfner::Result<Vec<_>>>()?;
    write_episodes(out, &episodes).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("sampled {count} episodes ({n}-way {k}-shot) -> {}", out.display());
    Ok(())
}

/// Fine-tuned checkpoints record their target labels; decoding another
/// label set with them is a data error.
fn check_labels(ckpt: &Checkpoint, path: &Path, labels: &[String]) -> Result<()> {
    match &ckpt.meta.labels {
        Some(expected) if expected.as_slice() != labels => bail!(Error::InvalidInput(format!(
            "{} was fine-tuned on [{}] but the support set has [{}]",
            path.display(),
            expected.join(", "),
            labels.join(", ")
        ))),
        _ => Ok(()),
    }
}

fn cmd_infer(
    common: &Common,
    esd_path: &Path,
    ec_path: &Path,
    task: &TaskArgs,
    query: Option<&Path>,
    datastore: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let config = resolve(common)?;
    require_file("esd", esd_path)?;
    require_file("ec", ec_path)?;
    check_task_inputs(task, query)?;
    if let Some(p) = datastore {
        require_file("datastore", p)?;
    }
    require_embeddings(&config)?;
    require_output("out", out)?;

    let esd = load_checkpoint(esd_path)?;
    let ec = load_checkpoint(ec_path)?;
    let (esd_model, ec_model) = (esd.model()?, ec.model()?);
    let Model::Esd(detector) = &esd_model else {
        return Err(config_error(format!("{}: expected a span detector checkpoint", esd_path.display())));
    };
    let classifier = classifier_of(&ec_model, ec_path)?;
    if esd_model.encoder().config.mode != classifier.encoder.config.mode {
        return Err(config_error("esd and ec checkpoints use different encoder modes".into()));
    }
    let store = load_store(&config, classifier.encoder.config.mode)?;
    let prebuilt = datastore.map(Datastore::load).transpose().context("reading datastore")?;
    let tasks = load_tasks(&config, task, query)?;

    let model =
        HybridModel { detector, detector_params: &esd.params, classifier: &classifier, classifier_params: &ec.params };
    let mut predictions = Vec::new();
    for task in &tasks {
        let labels = task.labels();
        check_labels(&esd, esd_path, &labels)?;
        check_labels(&ec, ec_path, &labels)?;
        let protos =
            msfner::trainer::support_prototypes(&classifier, &ec.params, &task.support, &labels, store.as_ref())?;
        let ds = match &prebuilt {
            Some(ds) if ds.labels() != labels.as_slice() => bail!(Error::InvalidInput(format!(
                "datastore labels [{}] differ from support labels [{}]",
                ds.labels().join(", "),
                labels.join(", ")
            ))),
            Some(ds) => ds.clone(),
            None => build_datastore(&classifier, &ec.params, &task.support, &labels, store.as_ref())?,
        };
        let sentences: Vec<_> = task.query.iter().map(|s| s.sentence.clone()).collect();
        let mut decoded = infer(model, &sentences, &protos, &ds, &config.decoder, store.as_ref())?;
        for p in &mut decoded {
            p.episode = task.episode;
        }
        predictions.extend(decoded);
    }
    let mut buf = Vec::new();
    write_predictions(&mut buf, &predictions)?;
    fs::write(out, buf).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("decoded {} sentences in {} task(s) -> {}", predictions.len(), tasks.len(), out.display());
    Ok(())
}

/// Gold sentences grouped by episode; a plain corpus is one group.
fn load_gold(config: &RunConfig, path: &Path, only: Option<usize>) -> Result<Vec<(Option<usize>, Vec<AnnotatedSentence>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let episodes = load_episodes(path).with_context(|| format!("reading episodes {}", path.display()))?;
        if let Some(i) = only {
            if i >= episodes.len() {
                bail!(Error::InvalidInput(format!("episode {i} out of range: {} has {} episodes", path.display(), episodes.len())));
            }
        }
        return Ok(episodes
            .into_iter()
            .enumerate()
            .filter(|(i, _)| only.is_none_or(|o| o == *i))
            .map(|(i, e)| (Some(i), e.query))
            .collect());
    }
    if only.is_some() {
        return Err(config_error("episode: --gold is a corpus, not an episode file".into()));
    }
    Ok(vec![(None, load_corpus(config, path)?.sentences)])
}

fn cmd_eval(common: &Common, predictions: &Path, gold: &Path, episode: Option<usize>, out: Option<&Path>) -> Result<()> {
    let config = resolve(common)?;
    require_file("predictions", predictions)?;
    require_file("gold", gold)?;
    if let Some(p) = out {
        require_output("out", p)?;
    }
    let groups = load_gold(&config, gold, episode)?;
    let episodic = groups.first().is_some_and(|(e, _)| e.is_some());

    let mut by_key: HashMap<(Option<usize>, String), Vec<EntitySpan>> = HashMap::new();
    for p in read_predictions(predictions).with_context(|| format!("reading {}", predictions.display()))? {
        // Corpus gold ignores episode tags; unmarked lines against an
        // episode file belong to the selected (or only) episode.
        let group = match (episodic, p.episode) {
            (false, _) => None,
            (true, Some(e)) => Some(e),
            (true, None) if groups.len() == 1 => groups[0].0,
            (true, None) => bail!(Error::InvalidInput(format!(
                "prediction for {:?} has no episode index but the gold file has {} episodes",
                p.id,
                groups.len()
            ))),
        };
        by_key.entry((group, p.id.clone())).or_default().extend(p.typed_spans());
    }

    let mut reports = Vec::new();
    let (mut predicted, mut gold_count, mut correct) = (0, 0, 0);
    for (group, sentences) in &groups {
        let gold_spans: Vec<Vec<EntitySpan>> = sentences.iter().map(|s| s.spans.clone()).collect();
        let pred_spans: Vec<Vec<EntitySpan>> = sentences
            .iter()
            .map(|s| by_key.remove(&(*group, s.sentence.id.clone())).unwrap_or_default())
            .collect();
        let report = micro_f1(&pred_spans, &gold_spans)?;
        predicted += report.predicted;
        gold_count += report.gold;
        correct += report.correct;
        reports.push((*group, report));
    }
    if let Some(((group, id), _)) = by_key.into_iter().min() {
        let place = group.map(|g| format!(" in episode {g}")).unwrap_or_default();
        bail!(Error::InvalidInput(format!("prediction for unknown sentence {id:?}{place}")));
    }

    let f1s: Vec<f64> = reports.iter().map(|(_, r)| r.f1).collect();
    let (f1_mean, f1_std) = mean_std(&f1s);
    let micro = EvalReport::from_counts(predicted, gold_count, correct);
    let json = serde_json::json!({
        "episodes": reports
            .iter()
            .map(|(g, r)| {
                let mut v = serde_json::to_value(r).expect("report serializes");
                if let Some(g) = g {
                    v["episode"] = (*g).into();
                }
                v
            })
            .collect::<Vec<_>>(),
        "micro": micro,
        "f1_mean": f1_mean,
        "f1_std": f1_std,
    });
    let text = serde_json::to_string_pretty(&json)?;
    if let Some(p) = out {
        fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(&format!("{text}\n"))?;
    eprintln!(
        "P {:.4} R {:.4} F1 {:.4} (micro); F1 {f1_mean:.4} ± {f1_std:.4} over {} episode(s)",
        micro.precision,
        micro.recall,
        micro.f1,
        reports.len()
    );
    Ok(())
}
