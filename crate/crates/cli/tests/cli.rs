//! End-to-end behaviour of the `msfner` binary on small synthetic data.

mod common;

use std::sync::OnceLock;

use common::{code, msfner, write, Fixture, Sizes};
use msfner::checkpoint::Checkpoint;
use msfner::config::RunConfig;
use msfner::episodes::load_episodes;
use msfner::knn::{build_datastore, infer, write_predictions, HybridModel};
use msfner::trainer::{support_prototypes, Model};
use serde_json::Value;

const QUICK: &[(&str, &str)] = &[
    ("steps", "3"),
    ("batch_size", "2"),
    ("lr", "0.003"),
    ("valid_interval", "0"),
    ("valid_episodes", "2"),
    ("n_way", "4"),
];

/// A fixture with both models briefly trained and target episodes sampled.
fn trained() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let f = Fixture::new(Sizes { train: 200, valid: 60, target: 120 }, QUICK);
        let (train, valid) = (f.arg("train.txt"), f.arg("valid.txt"));
        for (cmd, out) in [("train-esd", "esd.ckpt"), ("train-ec", "ec.ckpt")] {
            f.ok(cmd, &["--train", &train, "--valid", &valid, "--out", &f.arg(out)]);
        }
        let target = f.arg("target.txt");
        f.ok("sample-episodes", &["--corpus", &target, "--count", "3", "--n", "4", "--k", "1", "--out", &f.arg("eps.jsonl")]);
        f.ok("sample-episodes", &["--corpus", &target, "--count", "6", "--n", "2", "--k", "1", "--out", &f.arg("pairs.jsonl")]);
        f
    })
}

fn infer_args<'a>(f: &'a Fixture, esd: &'a str, ec: &'a str, out: &'a str) -> Vec<String> {
    ["--esd", esd, "--ec", ec, "--episodes", &f.arg("eps.jsonl"), "--all-episodes", "--out", out]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn run_infer(f: &Fixture, extra: &[&str], out: &str) -> Vec<u8> {
    let (esd, ec, out_path) = (f.arg("esd.ckpt"), f.arg("ec.ckpt"), f.arg(out));
    let mut args = infer_args(f, &esd, &ec, &out_path);
    args.extend(extra.iter().map(|s| s.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    f.ok("infer", &args);
    f.read(out)
}

#[test]
fn exit_codes_follow_error_class() {
    let f = trained();
    assert_eq!(code(&msfner(&[])), 2);
    assert_eq!(code(&msfner(&["config", "--set", "nonsense=1"])), 2);
    assert_eq!(code(&msfner(&["config", "--set", "steps=-1"])), 2);
    assert_eq!(code(&msfner(&["config", "--config", &f.arg("absent.conf")])), 2);
    assert_eq!(code(&f.run("train-esd", &["--train", &f.arg("absent.txt"), "--out", &f.arg("x.ckpt")])), 2);
    assert_eq!(code(&f.run("train-esd", &["--train", &f.arg("train.txt"), "--out", &f.arg("no/such/dir/x.ckpt")])), 2);

    write(&f.path("broken.txt"), "a\tO\nb\tQ-per\n");
    let out = f.run("train-esd", &["--train", &f.arg("broken.txt"), "--out", &f.arg("x.ckpt")]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.txt:2:"));

    let swapped = f.run("infer", &infer_args(f, &f.arg("ec.ckpt"), &f.arg("ec.ckpt"), &f.arg("x.jsonl")).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&swapped), 2);
    assert!(!f.path("x.ckpt").exists() && !f.path("x.jsonl").exists());
}

#[test]
fn divergence_exits_numeric_and_keeps_best_checkpoint() {
    let f = trained();
    let out = f.run(
        "train-ec",
        &["--train", &f.arg("train.txt"), "--set", "inner_lr=1e300", "--out", &f.arg("diverged.ckpt")],
    );
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    Checkpoint::load(f.path("diverged.ckpt")).unwrap();
}

#[test]
fn zero_steps_writes_initial_checkpoint_and_metrics() {
    let f = trained();
    f.ok("train-esd", &["--train", &f.arg("train.txt"), "--set", "steps=0", "--out", &f.arg("zero.ckpt")]);
    let ckpt = Checkpoint::load(f.path("zero.ckpt")).unwrap();
    let model = ckpt.model().unwrap();
    let init = model.init_params(msfner::trainer::init_seed(&ckpt.meta.trainer));
    assert_eq!(ckpt.params, init);
    let log = String::from_utf8(f.read("zero.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert!(first["query_loss"].is_null());
}

#[test]
fn finetune_with_no_steps_copies_parameters() {
    let f = trained();
    f.ok("finetune", &[
        "--checkpoint", &f.arg("ec.ckpt"), "--episodes", &f.arg("eps.jsonl"), "--set", "finetune_steps=0",
        "--out", &f.arg("ec0.ckpt"),
    ]);
    let (src, tuned) = (Checkpoint::load(f.path("ec.ckpt")).unwrap(), Checkpoint::load(f.path("ec0.ckpt")).unwrap());
    assert_eq!(tuned.params, src.params);
    let mut labels = load_episodes(f.path("eps.jsonl")).unwrap()[0].types.clone();
    labels.sort();
    assert_eq!(tuned.meta.labels, Some(labels));
}

#[test]
fn infer_matches_library_decoding() {
    let f = trained();
    for lambda in ["0", "0.3"] {
        let got = run_infer(f, &["--set", &format!("knn_lambda={lambda}")], &format!("lib{lambda}.jsonl"));

        let mut config = RunConfig::load(f.path("run.conf")).unwrap();
        config.set("knn_lambda", lambda).unwrap();
        let store = msfner::encoder::load_embedding_file(f.path("vectors.msfe")).unwrap();
        let (esd, ec) = (Checkpoint::load(f.path("esd.ckpt")).unwrap(), Checkpoint::load(f.path("ec.ckpt")).unwrap());
        let (Model::Esd(detector), Model::Ec(classifier)) = (esd.model().unwrap(), ec.model().unwrap()) else {
            panic!("checkpoint kinds");
        };
        let hybrid = HybridModel {
            detector: &detector,
            detector_params: &esd.params,
            classifier: &classifier,
            classifier_params: &ec.params,
        };
        let mut expected = Vec::new();
        for (i, e) in load_episodes(f.path("eps.jsonl")).unwrap().into_iter().enumerate() {
            let mut labels = e.types.clone();
            labels.sort();
            let protos = support_prototypes(&classifier, &ec.params, &e.support, &labels, Some(&store)).unwrap();
            let ds = build_datastore(&classifier, &ec.params, &e.support, &labels, Some(&store)).unwrap();
            let query: Vec<_> = e.query.iter().map(|s| s.sentence.clone()).collect();
            let mut preds = infer(hybrid, &query, &protos, &ds, &config.decoder, Some(&store)).unwrap();
            preds.iter_mut().for_each(|p| p.episode = Some(i));
            write_predictions(&mut expected, &preds).unwrap();
        }
        assert_eq!(got, expected, "lambda {lambda}");
    }

    // The prebuilt-datastore path decodes identically.
    let esd_ckpt = f.arg("ec.ckpt");
    f.ok("build-datastore", &["--checkpoint", &esd_ckpt, "--episodes", &f.arg("eps.jsonl"), "--out", &f.arg("ds.msfd")]);
    let (esd, ec, out) = (f.arg("esd.ckpt"), f.arg("ec.ckpt"), f.arg("prebuilt.jsonl"));
    f.ok("infer", &["--esd", &esd, "--ec", &ec, "--episodes", &f.arg("eps.jsonl"), "--datastore", &f.arg("ds.msfd"), "--out", &out]);
    f.ok("infer", &["--esd", &esd, "--ec", &ec, "--episodes", &f.arg("eps.jsonl"), "--out", &f.arg("built.jsonl")]);
    assert_eq!(f.read("prebuilt.jsonl"), f.read("built.jsonl"));
}

#[test]
fn zero_lambda_types_by_prototype_argmax() {
    let f = trained();
    let text = String::from_utf8(run_infer(f, &["--set", "knn_lambda=0"], "proto.jsonl")).unwrap();
    let episodes = load_episodes(f.path("eps.jsonl")).unwrap();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let mut labels = episodes[v["episode"].as_u64().unwrap() as usize].types.clone();
        labels.sort();
        for span in v["spans"].as_array().unwrap() {
            let p: Vec<f64> = span["p"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            assert_eq!(span["type"], labels[best].as_str());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn empty_query_gives_empty_output() {
    let f = trained();
    write(&f.path("empty.txt"), "");
    let (esd, ec, out) = (f.arg("esd.ckpt"), f.arg("ec.ckpt"), f.arg("empty.jsonl"));
    f.ok("infer", &["--esd", &esd, "--ec", &ec, "--support", &f.arg("target.txt"), "--query", &f.arg("empty.txt"), "--out", &out]);
    assert!(f.read("empty.jsonl").is_empty());
}

#[test]
fn mismatched_labels_are_rejected() {
    let f = trained();
    let pairs = load_episodes(f.path("pairs.jsonl")).unwrap();
    let sorted = |i: usize| {
        let mut t = pairs[i].types.clone();
        t.sort();
        t
    };
    let other = (1..pairs.len()).find(|&i| sorted(i) != sorted(0)).expect("two label sets among six episodes");
    f.ok("finetune", &["--checkpoint", &f.arg("ec.ckpt"), "--episodes", &f.arg("pairs.jsonl"), "--set", "finetune_steps=1", "--out", &f.arg("ec_pair.ckpt")]);
    let (esd, ec) = (f.arg("esd.ckpt"), f.arg("ec_pair.ckpt"));
    let index = other.to_string();
    let (mismatch, matched) = (f.arg("mismatch.jsonl"), f.arg("match.jsonl"));
    let common = ["--esd", &esd, "--ec", &ec, "--episodes", &f.arg("pairs.jsonl")];
    let mut bad = common.to_vec();
    bad.extend(["--episode", &index, "--out", &mismatch]);
    let out = f.run("infer", &bad);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fine-tuned on"));
    let mut good = common.to_vec();
    good.extend(["--episode", "0", "--out", &matched]);
    f.ok("infer", &good);
}

const GOLD: &str = "ann\tB-per\nlee\tE-per\nran\tO\n\nin\tO\nthe\tO\nparis\tS-loc\n\nacme\tS-org\nand\tO\nthen\tO\nbob\tB-per\nsmith\tE-per\n";

fn pred(id: &str, spans: &[(usize, usize, &str)]) -> String {
    let spans: Vec<Value> =
        spans.iter().map(|(s, e, t)| serde_json::json!({"start": s, "end": e, "type": t, "p": [1.0]})).collect();
    serde_json::json!({"id": id, "spans": spans}).to_string()
}

#[test]
fn eval_scores_hand_built_predictions() {
    let f = trained();
    write(&f.path("gold.txt"), GOLD);
    let lines = [
        pred("gold:0", &[(0, 1, "per")]),
        pred("gold:1", &[(2, 2, "org")]),
        pred("gold:2", &[(3, 4, "per"), (1, 1, "loc")]),
    ];
    write(&f.path("pred.jsonl"), &format!("{}\n", lines.join("\n")));
    let report: Value = serde_json::from_str(&f.ok("eval", &["--predictions", &f.arg("pred.jsonl"), "--gold", &f.arg("gold.txt")])).unwrap();
    let micro = &report["micro"];
    assert_eq!((micro["predicted"].as_u64(), micro["gold"].as_u64(), micro["correct"].as_u64()), (Some(4), Some(4), Some(2)));
    for key in ["precision", "recall", "f1"] {
        assert!((micro[key].as_f64().unwrap() - 0.5).abs() < 1e-12, "{key}");
    }
    assert_eq!(report["f1_std"], 0.0);

    let shuffled = [lines[2].clone(), lines[0].clone(), lines[1].clone()];
    write(&f.path("shuffled.jsonl"), &shuffled.join("\n"));
    let again: Value = serde_json::from_str(&f.ok("eval", &["--predictions", &f.arg("shuffled.jsonl"), "--gold", &f.arg("gold.txt")])).unwrap();
    assert_eq!(again, report);

    // A sentence without a prediction line counts as predicting nothing.
    write(&f.path("partial.jsonl"), &lines[0]);
    let partial: Value = serde_json::from_str(&f.ok("eval", &["--predictions", &f.arg("partial.jsonl"), "--gold", &f.arg("gold.txt")])).unwrap();
    assert_eq!(partial["micro"]["precision"], 1.0);
    assert_eq!(partial["micro"]["recall"], 0.25);

    write(&f.path("unknown.jsonl"), &pred("gold:9", &[]));
    let out = f.run("eval", &["--predictions", &f.arg("unknown.jsonl"), "--gold", &f.arg("gold.txt")]);
    assert_eq!(code(&out), 3);
}

#[test]
fn config_dump_round_trips() {
    let f = trained();
    let dumped = f.ok("config", &["--seed", "5"]);
    write(&f.path("dumped.conf"), &dumped);
    let again = String::from_utf8(msfner(&["config", "--config", &f.arg("dumped.conf")]).stdout).unwrap();
    assert_eq!(again, dumped);
    assert!(dumped.contains("seed = 5"));
}
