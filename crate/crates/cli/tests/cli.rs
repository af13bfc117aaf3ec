use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acae::acae::{assemble_chiral, swap_sides, AcaeWeights, Checkpoint};
use acae::corpus::load_jsonl;
use acae::skeleton::{build_catalog, latent_partition, preset};

fn acae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acae")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = acae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, formats: &str, k: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["synth", "--latents", "10", "--formats", formats, "--k", k, "--sigma", "5", "--seed", seed, "--out", s(&out)]);
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic_and_records_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "a", "demo2", "300", "7");
    let b = synth(tmp.path(), "b", "demo2", "300", "7");
    let c = synth(tmp.path(), "c", "demo2", "300", "8");
    let read = |d: &Path| std::fs::read(d.join("corpus.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(manifest(&a)["outputs"], manifest(&b)["outputs"]);
    assert_eq!(manifest(&a)["run"]["command"], "synth");
    assert_eq!(load_jsonl(&a.join("corpus.jsonl")).unwrap().len(), 300);
    assert!(a.join("mixing.json").exists());
}

#[test]
fn usage_and_config_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let missing = acae(&["synth", "--formats", "demo2", "--k", "10", "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    let zero = acae(&["synth", "--latents", "10", "--formats", "demo2", "--k", "0", "--out", s(&out)]);
    assert_eq!(zero.status.code(), Some(3));
    let unknown = acae(&["synth", "--latents", "10", "--formats", "nope", "--k", "5", "--out", s(&out)]);
    assert_eq!(unknown.status.code(), Some(3));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn fit_writes_a_bit_exact_chiral_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "data", "demo2", "200", "1");
    let corpus = data.join("corpus.jsonl");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "fit", "--corpus", s(&corpus), "--formats", "demo2", "--latents", "10", "--steps", "400", "--lr", "1e-2",
            "--chirality", "on", "--head-weighting", "on", "--seed", "3", "--out", s(&out),
        ]);
        out
    };
    let a = run("fit_a");
    let b = run("fit_b");
    let log = |d: &Path| std::fs::read(d.join("train_log.csv")).unwrap();
    assert_eq!(log(&a), log(&b));
    assert!(String::from_utf8(log(&a)).unwrap().starts_with("step,total,reconstr,sparse\n"));

    let text = std::fs::read_to_string(a.join("checkpoint.json")).unwrap();
    let ck = Checkpoint::from_json(&text).unwrap();
    assert_eq!(ck.to_json().unwrap(), text);
    let catalog = build_catalog(&preset("demo2").unwrap()).unwrap();
    assert_eq!(ck.catalog_hash, catalog.hash());
    let part = latent_partition(&catalog, 10).unwrap();
    match ck.weights().unwrap() {
        AcaeWeights::Chiral { enc, dec } => {
            let e = assemble_chiral(&enc).unwrap();
            let d = assemble_chiral(&dec).unwrap();
            assert_eq!(swap_sides(&e, &part.blocks(), &catalog.sides()), e);
            assert_eq!(swap_sides(&d, &catalog.sides(), &part.blocks()), d);
        }
        AcaeWeights::Dense { .. } => panic!("expected chiral weights"),
    }

    let wrong = acae(&[
        "fit", "--corpus", s(&corpus), "--formats", "h36m", "--latents", "5", "--out", s(&tmp.path().join("w")),
    ]);
    assert_eq!(wrong.status.code(), Some(5));
}

#[test]
fn elbow_writes_one_row_per_latent_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "data", "demo2", "200", "2");
    let corpus = data.join("corpus.jsonl");
    let out = tmp.path().join("elbow");
    ok(&[
        "elbow", "--corpus", s(&corpus), "--formats", "demo2", "--latents", "4,10,20", "--steps", "300", "--lr", "1e-2",
        "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(out.join("elbow.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "latents,validation_error_mm");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("4,"));

    let empty = acae(&["elbow", "--corpus", s(&corpus), "--formats", "demo2", "--latents", "", "--out", s(&out)]);
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn consistency_demo_reports_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("demo");
    ok(&[
        "consistency-demo", "--k", "300", "--k-test", "100", "--acae-steps", "3000", "--steps", "3000", "--seed", "2",
        "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "variant,lambda_cons,lambda_teach,mpjpe,pmpjpe,pck100,cps200,inconsistency_mm"
    );
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["separate", "regularized", "latent", "hybrid"]);
    let inc = |i: usize| rows[i][7].parse::<f64>().unwrap();
    for r in &rows {
        assert!(r[3..7].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    assert!(inc(1) < inc(0));
    assert!(inc(2).abs() < 1e-9);
    assert!(inc(3).abs() < 1e-9);

    let single = tmp.path().join("single");
    ok(&[
        "consistency-demo", "--k", "100", "--k-test", "20", "--acae-steps", "200", "--steps", "100", "--variant", "latent",
        "--out", s(&single),
    ]);
    assert_eq!(std::fs::read_to_string(single.join("metrics.csv")).unwrap().lines().count(), 2);
}

#[test]
fn eval_scores_identity_and_rejects_mismatched_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = synth(tmp.path(), "gt", "demo2", "40", "3").join("corpus.jsonl");
    let out = tmp.path().join("ev");
    ok(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--out", s(&out)]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mpjpe"].as_f64().unwrap(), 0.0);
    assert!(report["pmpjpe"].as_f64().unwrap() < 1e-9);
    assert_eq!(report["pck100"].as_f64().unwrap(), 100.0);
    assert_eq!(report["cps200"].as_f64().unwrap(), 100.0);
    assert!(std::fs::read_to_string(out.join("report.csv")).unwrap().starts_with("pose,mpjpe,pmpjpe,pck100,cps200\n"));

    let other = synth(tmp.path(), "other", "h36m", "40", "3").join("corpus.jsonl");
    let bad = acae(&["eval", "--pred", s(&other), "--gt", s(&gt), "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(bad.status.code(), Some(5));
}

#[test]
fn eval_agrees_with_a_scalar_mpjpe_loop() {
    let tmp = tempfile::tempdir().unwrap();
    let gt_path = synth(tmp.path(), "gt", "h36m", "30", "4").join("corpus.jsonl");
    let pred_path = synth(tmp.path(), "pred", "h36m", "30", "5").join("corpus.jsonl");
    let out = tmp.path().join("ev");
    ok(&["eval", "--pred", s(&pred_path), "--gt", s(&gt_path), "--root", "3", "--out", s(&out)]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();

    let pred = load_jsonl(&pred_path).unwrap();
    let gt = load_jsonl(&gt_path).unwrap();
    let mut per_pose = Vec::new();
    for (p, g) in pred.examples.iter().zip(&gt.examples) {
        let (pr, gr) = (p.pose.joints[3], g.pose.joints[3]);
        let mut sum = 0.0;
        for j in 0..p.pose.len() {
            let d = (p.pose.joints[j] - pr) - (g.pose.joints[j] - gr);
            sum += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        }
        per_pose.push(sum / p.pose.len() as f64);
    }
    let expected = per_pose.iter().sum::<f64>() / per_pose.len() as f64;
    let got = report["mpjpe"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-12 * expected, "{got} vs {expected}");
}

#[test]
fn replay_reproduces_outputs_and_detects_changed_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "data", "h36m", "100", "6");
    let corpus = data.join("corpus.jsonl");
    let fit = tmp.path().join("fit");
    ok(&["fit", "--corpus", s(&corpus), "--formats", "h36m", "--latents", "5", "--steps", "200", "--out", s(&fit)]);

    let again = tmp.path().join("again");
    ok(&["replay", "--manifest", s(&fit.join("manifest.json")), "--out", s(&again)]);
    for f in ["checkpoint.json", "train_log.csv"] {
        assert_eq!(std::fs::read(fit.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
    }

    let mut bytes = std::fs::read(&corpus).unwrap();
    bytes.extend_from_slice(b"\n");
    std::fs::write(&corpus, bytes).unwrap();
    let changed = acae(&["replay", "--manifest", s(&fit.join("manifest.json")), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(changed.status.code(), Some(6));
}
