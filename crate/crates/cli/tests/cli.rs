use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use partaog::eval::EvalSummary;
use partaog::fmap::{Corpus, NormStatistic};
use partaog::miner::{learn_model, MinerConfig};
use partaog::model::{load_model, save_model, ScoreWeights};
use partaog::oracle::{OracleRecord, ScriptedOracle};
use partaog::parser::ParseRecord;
use partaog::qa::{run_session, LogEntry, QaConfig};
use partaog::records::{read_jsonl, write_jsonl, AnnotationRecord};
use partaog::synth::{synth_generate, SynthSpec, ORACLE_FILE};

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_partaog")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "partaog {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The first three present images of every template.
fn three_per_template(oracle: &[OracleRecord]) -> Vec<AnnotationRecord> {
    let mut names: Vec<&str> = oracle.iter().filter_map(|r| r.gt_template.as_deref()).collect();
    names.sort();
    names.dedup();
    let mut out = Vec::new();
    for (t, name) in names.iter().enumerate() {
        for r in oracle.iter().filter(|r| r.gt_template.as_deref() == Some(name)).take(3) {
            out.push(AnnotationRecord {
                image_id: r.image_id.clone(),
                bbox: r.gt_bbox.unwrap(),
                template_id: t as u32 + 1,
                flipped: false,
                template_name: Some(name.to_string()),
            });
        }
    }
    out
}

#[test]
fn batch_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&["synth", "--out", s(&data), "--seed", "3", "--images", "24", "--templates", "2", "--noise", "0.1"]);
    let spec = SynthSpec::standard(3, 24, 2, 0.1);
    let expected = synth_generate(&spec).unwrap();
    let oracle: Vec<OracleRecord> = read_jsonl(&data.join(ORACLE_FILE)).unwrap();
    assert_eq!(oracle, expected.oracle);

    let annotations = dir.path().join("ann.jsonl");
    let records = three_per_template(&oracle);
    write_jsonl(&annotations, &records).unwrap();
    let model_path = dir.path().join("model.json");
    run(&["learn", "--fmaps", s(&data), "--annotations", s(&annotations), "--out", s(&model_path)]);
    let corpus = Corpus::from_raw(expected.maps, NormStatistic::MeanPositive).unwrap();
    let direct = learn_model("part", &corpus, &records, &MinerConfig::default(), ScoreWeights::default()).unwrap();
    assert_eq!(fs::read_to_string(&model_path).unwrap(), save_model(&direct).unwrap());

    let parses_path = dir.path().join("parses.jsonl");
    run(&["parse", "--model", s(&model_path), "--fmaps", s(&data), "--out", s(&parses_path)]);
    let parses: Vec<ParseRecord> = read_jsonl(&parses_path).unwrap();
    assert_eq!(parses.len(), 24);

    let summary: EvalSummary =
        serde_json::from_str(run(&["eval", "--parses", s(&parses_path), "--oracle", s(&data.join(ORACLE_FILE))]).trim())
            .unwrap();
    assert_eq!(summary.count, 24);
    assert!(summary.pcp > 0.8, "{summary:?}");

    let csv = run(&["stats", "--model", s(&model_path), "--fmaps", s(&data)]);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "image_id,layer,inferred_units,energy_ratio,relative_magnitude,activation_ratio"
    );
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 6);
        let energy: f64 = cols[3].parse().unwrap();
        let active: f64 = cols[5].parse().unwrap();
        assert!((0.0..=1.0).contains(&energy) && (0.0..=1.0).contains(&active));
        assert!(cols[4].parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn qa_run_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&["synth", "--out", s(&data), "--seed", "8", "--images", "16", "--templates", "2", "--absent-rate", "0.2"]);
    let (model_path, log_path) = (dir.path().join("model.json"), dir.path().join("log.jsonl"));
    run(&[
        "qa", "run", "--fmaps", s(&data), "--oracle", s(&data.join(ORACLE_FILE)), "--budget", "6", "--out",
        s(&model_path), "--log", s(&log_path),
    ]);
    let corpus = Arc::new(partaog_cli::commands::load_corpus(&data).unwrap());
    let mut oracle = ScriptedOracle::load(&data.join(ORACLE_FILE)).unwrap();
    let (model, log) = run_session(corpus, "part", &mut oracle, QaConfig { budget: 6, ..QaConfig::default() }).unwrap();
    assert_eq!(load_model(&fs::read_to_string(&model_path).unwrap()).unwrap(), model);
    let written: Vec<LogEntry> = read_jsonl(&log_path).unwrap();
    assert_eq!(written, log);
}

#[test]
fn synth_reads_a_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::standard(1, 3, 1, 0.0);
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let out = dir.path().join("out");
    run(&["synth", "--spec", s(&spec_path), "--out", s(&out)]);
    let maps = partaog::fmap::load_fmap_dir(&out).unwrap();
    assert_eq!(maps, synth_generate(&spec).unwrap().maps);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_partaog"))
        .args(["parse", "--model", "missing.json", "--fmaps", s(dir.path()), "--out", "x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}
