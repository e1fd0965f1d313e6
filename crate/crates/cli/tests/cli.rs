use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn spanlight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spanlight"))
        .args(args)
        .env_remove("FGR_PARAMS")
        .output()
        .unwrap()
}

fn summary(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(stdout.lines().count(), 1, "{stdout}");
    serde_json::from_str(stdout.trim()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes_for_user_errors() {
    assert_eq!(spanlight(&["index", "--bogus"]).status.code(), Some(1));
    assert_eq!(spanlight(&[]).status.code(), Some(1));
    assert_eq!(spanlight(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = spanlight(&["eval-recall", "--index", p(&missing), "--queries", "q", "--qrels", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no index"));
    assert_eq!(spanlight(&["--help"]).status.code(), Some(0));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = ["--dim", "16"];
    let data = d.join("data");
    let s = summary(&spanlight(
        &[&["synth", "--out", p(&data), "--queries", "8", "--corpus-size", "40"], &small[..]].concat(),
    ));
    assert_eq!(s["passages"], 40);

    let idx = d.join("idx");
    let s = summary(&spanlight(
        &[&["index", "--corpus", p(&data.join("corpus.jsonl")), "--out", p(&idx)], &small[..]].concat(),
    ));
    assert_eq!(s["manifest"], p(&idx.join("manifest.json")));

    let train = |out: &Path| {
        summary(&spanlight(
            &[
                &[
                    "train",
                    "--data",
                    p(&data.join("train.jsonl")),
                    "--out",
                    p(out),
                    "--seed",
                    "7",
                    "--epochs",
                    "5",
                    "--hidden-dim",
                    "12",
                ],
                &small[..],
            ]
            .concat(),
        ))
    };
    let (pa, pb) = (d.join("a.bin"), d.join("b.bin"));
    train(&pa);
    train(&pb);
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

    // a trained projection needs its own index
    let tidx = d.join("tidx");
    summary(&spanlight(
        &[
            &["index", "--corpus", p(&data.join("corpus.jsonl")), "--out", p(&tidx), "--params", p(&pa)],
            &small[..],
        ]
        .concat(),
    ));
    let stale = spanlight(&[
        "eval-recall",
        "--index",
        p(&idx),
        "--queries",
        p(&data.join("queries.jsonl")),
        "--qrels",
        p(&data.join("qrels.jsonl")),
        "--params",
        p(&pa),
    ]);
    assert_eq!(stale.status.code(), Some(1));

    let s = summary(&spanlight(&[
        "eval-recall",
        "--index",
        p(&tidx),
        "--queries",
        p(&data.join("queries.jsonl")),
        "--qrels",
        p(&data.join("qrels.jsonl")),
        "--params",
        p(&pa),
        "--k",
        "5",
    ]));
    assert!(s["recall"].as_f64().unwrap() >= 0.0);

    let report = d.join("plaus.json");
    let s = summary(&spanlight(&[
        "eval-plausibility",
        "--index",
        p(&tidx),
        "--queries",
        p(&data.join("queries.jsonl")),
        "--gold",
        p(&data.join("gold.jsonl")),
        "--params",
        p(&pa),
        "--out",
        p(&report),
    ]));
    assert_eq!(s["count"], 8);
    assert!(report.exists());

    let ann = d.join("ann.jsonl");
    let s = summary(&spanlight(&[
        "annotate",
        "--pairs",
        p(&data.join("pairs.jsonl")),
        "--out",
        p(&ann),
        "--mock",
        "lexical",
    ]));
    assert_eq!(s["annotated"], 8);
    let s = summary(&spanlight(&[
        "annotate",
        "--pairs",
        p(&data.join("pairs.jsonl")),
        "--out",
        p(&ann),
        "--mock",
        "lexical",
    ]));
    assert_eq!((s["annotated"].as_u64(), s["skipped"].as_u64()), (Some(0), Some(8)));
    // annotation output doubles as gold input
    summary(&spanlight(&[
        "eval-plausibility",
        "--index",
        p(&idx),
        "--queries",
        p(&data.join("queries.jsonl")),
        "--gold",
        p(&ann),
    ]));

    let bench = d.join("bench.json");
    let s = summary(&spanlight(&[
        "bench",
        "--index",
        p(&idx),
        "--queries",
        p(&data.join("queries.jsonl")),
        "--k",
        "5",
        "--hidden-dim",
        "32",
        "--limit",
        "3",
        "--out",
        p(&bench),
    ]));
    assert_eq!(s["report"], p(&bench));
    assert_eq!(s["counted_mul_adds"], s["analytic_mul_adds"]);
    let stored: Value = serde_json::from_str(&std::fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(stored["transform"]["repetitions"], 30);

    let few = spanlight(&[
        "bench",
        "--index",
        p(&idx),
        "--queries",
        p(&data.join("queries.jsonl")),
        "--reps",
        "5",
        "--out",
        p(&bench),
    ]);
    assert_eq!(few.status.code(), Some(1));
}
