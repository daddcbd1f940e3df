use std::fs;
use std::path::Path;

use clap::Parser;
use dedr_cli::config::ExperimentConfig;
use dedr_cli::error::CliError;
use dedr_cli::manifest::{read_manifest, sha256_file};
use dedr_cli::{execute, run, Cli};

const SMALL: &[&str] = &[
    "synthetic_queries=40",
    "synthetic_passages=150",
    "encoder_width=16",
    "encoder_heads=2",
    "encoder_ffn=32",
    "embedding_dim=16",
    "warm_start_steps=10",
    "warm_start_region_steps=5",
    "retriever_epochs=1",
    "distill_max_rounds=1",
    "reader_steps=2",
    "reader_eval_every=1",
    "reader_warmup_steps=0",
    "reader_accumulation=2",
    "sweep_ks=[1,2,4]",
];

fn argv<'a>(work: &'a Path, args: &[&'a str]) -> Vec<String> {
    let mut v = vec![
        "dedr".to_string(),
        "--work".into(),
        work.display().to_string(),
    ];
    for s in SMALL {
        v.push("--set".into());
        v.push(s.to_string());
    }
    v.extend(args.iter().map(|s| s.to_string()));
    v
}

fn dedr(work: &Path, args: &[&str]) -> i32 {
    run(argv(work, args))
}

fn dedr_err(work: &Path, args: &[&str]) -> CliError {
    let cli = Cli::try_parse_from(argv(work, args)).expect("arguments parse");
    execute(cli).expect_err("command should fail")
}

fn small_config() -> ExperimentConfig {
    let overrides: Vec<String> = SMALL.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load("toy", None, &overrides).unwrap()
}

#[test]
fn documented_pipeline_produces_retrieval_report() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    for args in [
        &["gen-data", "--seed", "7"][..],
        &["train-retriever", "--path", "T"],
        &["train-retriever", "--path", "MM"],
        &["distill"],
        &["build-index"],
        &["retrieve", "--k", "5"],
        &["evaluate"],
    ] {
        assert_eq!(dedr(w, args), 0, "{args:?}");
    }
    let text = fs::read_to_string(w.join("reports/eval_dedr_test.txt")).unwrap();
    for key in ["MRR@5", "P@5", "P@1", "hit@1", "hit@4"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.join("reports/eval_dedr_test.json")).unwrap())
            .unwrap();
    assert!(json["mrr_at_5"].as_f64().is_some());
    assert!(json["vqa_accuracy"].is_null());

    let m = read_manifest(&w.join("index/dedr_distilled.idx")).unwrap();
    assert_eq!(m.command, "build-index");
    assert_eq!(m.config_hash, small_config().hash());
    assert_eq!(m.seed, 7);
    assert!(m.inputs.contains_key("models/distilled_T.ckpt"));
    assert_eq!(
        m.outputs["index/dedr_distilled.idx"],
        sha256_file(&w.join("index/dedr_distilled.idx")).unwrap()
    );

    for r in ["bm25", "bm25-obj", "T", "MM"] {
        assert_eq!(
            dedr(w, &["retrieve", "--retriever", r, "--k", "4"]),
            0,
            "{r}"
        );
        assert!(w.join(format!("runs/{r}_test.run")).exists());
    }
    assert_eq!(dedr(w, &["train-retriever", "--path", "joint"]), 0);
    assert_eq!(dedr(w, &["build-index", "--stage", "joint"]), 0);
    assert_eq!(dedr(w, &["retrieve", "--stage", "joint"]), 0);

    // a tiny run can leave every stage identical, so swap in a checkpoint
    // from a differently seeded model to make the index stale
    let other = tempfile::tempdir().unwrap();
    assert_eq!(dedr(other.path(), &["gen-data", "--seed", "7"]), 0);
    assert_eq!(
        dedr(
            other.path(),
            &["--set", "seed=8", "train-retriever", "--path", "T"]
        ),
        0
    );
    fs::copy(
        other.path().join("models/isolated_T.ckpt"),
        w.join("models/distilled_T.ckpt"),
    )
    .unwrap();
    let err = dedr_err(w, &["retrieve"]);
    assert!(err.to_string().contains("build-index"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn reader_commands_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    for args in [
        &["gen-data"][..],
        &["mine-negatives", "--m", "3"],
        &[
            "retrieve",
            "--retriever",
            "bm25",
            "--split",
            "test",
            "--k",
            "2",
        ],
    ] {
        assert_eq!(dedr(w, args), 0, "{args:?}");
    }
    assert!(matches!(
        dedr_err(w, &["answer", "--retriever", "bm25"]),
        CliError::MissingArtifact { ref producer, .. } if producer == "train-reader"
    ));
    assert_eq!(dedr(w, &["train-reader", "--support", "gold"]), 0);
    assert!(w.join("reader/reader.ckpt.manifest.json").exists());
    assert_eq!(dedr(w, &["answer", "--retriever", "bm25", "--n", "2"]), 0);
    let answers = fs::read_to_string(w.join("answers/bm25_test.tsv")).unwrap();
    assert_eq!(answers.lines().count(), 6);
    assert_eq!(dedr(w, &["evaluate", "--retriever", "bm25"]), 0);
    let text = fs::read_to_string(w.join("reports/eval_bm25_test.txt")).unwrap();
    assert!(text.contains("accuracy") && text.contains("EM"), "{text}");

    let err = dedr_err(w, &["sweep-k", "--retriever", "bm25", "--ks", "1,4"]);
    assert!(matches!(err, CliError::StaleArtifact { .. }), "{err}");
    assert!(err.to_string().contains("--k 4"), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert_eq!(dedr(w, &["retrieve", "--retriever", "bm25", "--k", "4"]), 0);
    assert_eq!(
        dedr(w, &["sweep-k", "--retriever", "bm25", "--ks", "4,1,2"]),
        0
    );
    let tsv = fs::read_to_string(w.join("reports/sweep_bm25_test.tsv")).unwrap();
    let ks: Vec<&str> = tsv
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(ks, ["1", "2", "4"]);
    let train_run = dedr_err(w, &["train-reader"]);
    assert!(train_run
        .to_string()
        .contains("dedr retrieve --retriever dedr --split train"));
}

#[test]
fn reruns_reproduce_artifact_hashes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for w in [a.path(), b.path()] {
        assert_eq!(dedr(w, &["gen-data", "--seed", "3"]), 0);
        assert_eq!(dedr(w, &["train-retriever", "--path", "MM"]), 0);
    }
    let ma = read_manifest(&a.path().join("models/isolated_MM.ckpt")).unwrap();
    let mb = read_manifest(&b.path().join("models/isolated_MM.ckpt")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.seed, 7);
    let da = read_manifest(&a.path().join("data")).unwrap();
    assert_eq!(da.seed, 3);
    assert_eq!(da, read_manifest(&b.path().join("data")).unwrap());

    // ingesting a generated corpus reproduces its files
    let c = tempfile::tempdir().unwrap();
    let src = a.path().join("data");
    assert_eq!(
        dedr(c.path(), &["ingest", "--src", src.to_str().unwrap()]),
        0
    );
    let ingested = read_manifest(&c.path().join("data")).unwrap();
    assert_eq!(ingested.outputs, da.outputs);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    assert_eq!(dedr(w, &["--set", "retriever_batch=0", "gen-data"]), 2);
    assert_eq!(dedr(w, &["--set", "no_such_key=1", "gen-data"]), 2);
    assert_eq!(dedr(w, &["--preset", "huge", "gen-data"]), 2);
    assert_eq!(dedr(w, &["frobnicate"]), 2);
    assert_eq!(dedr(w, &["ingest", "--src", "/definitely/not/here"]), 3);
    let bad = w.join("bad.toml");
    fs::write(&bad, "bm25_b = 2.0\n").unwrap();
    let err = dedr_err(w, &["--config", bad.to_str().unwrap(), "gen-data"]);
    assert!(err.to_string().contains("bm25_b"), "{err}");
    assert_eq!(err.exit_code(), 2);

    let err = dedr_err(w, &["distill"]);
    assert!(err.to_string().contains("dedr gen-data"), "{err}");
    assert_eq!(dedr(w, &["gen-data"]), 0);
    let err = dedr_err(w, &["distill"]);
    assert!(
        err.to_string().contains("dedr train-retriever --path T"),
        "{err}"
    );
    let err = dedr_err(w, &["retrieve"]);
    assert!(
        err.to_string()
            .contains("dedr build-index --stage distilled"),
        "{err}"
    );
    let err = dedr_err(w, &["retrieve", "--retriever", "MM", "--stage", "isolated"]);
    assert!(
        err.to_string().contains("train-retriever --path MM"),
        "{err}"
    );
    assert_eq!(err.exit_code(), 3);

    fs::write(w.join("data/passages.jsonl"), "{\"passage_id\": \"p1\"}\n").unwrap();
    assert_eq!(dedr(w, &["mine-negatives"]), 3);
}
