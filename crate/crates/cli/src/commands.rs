use std::path::{Path, PathBuf};
use std::time::Instant;

use acae::acae::Checkpoint;
use acae::consistency::{run_consistency_demo, write_metrics_csv, ConsistencyDemoConfig, LifterConfig};
use acae::corpus::{read_jsonl, synth_corpus, write_jsonl, GroundTruthMixing, PoseCorpus, SynthConfig};
use acae::eval::evaluate;
use acae::geometry::PoseMatrix;
use acae::skeleton::{build_catalog, preset, JointCatalog};
use acae::training::{elbow_curve, fit_acae, write_elbow_csv, TrainConfig};
use acae::AcaeError;
use anyhow::{Context, Result};
use serde::Serialize;

use crate::args::{Command, DemoArgs, ElbowArgs, EvalArgs, FitArgs, ReplayArgs, SynthArgs};
use crate::manifest::{
    compare_outputs, read_file, sha256_hex, write_atomic, FileHash, ReplayMismatch, RunManifest, MANIFEST_FILE,
};

/// Files produced by a command, before they are written.
#[derive(Default)]
struct Produced {
    inputs: Vec<FileHash>,
    files: Vec<(String, Vec<u8>)>,
}

impl Produced {
    fn load_corpus(&mut self, path: &Path) -> Result<PoseCorpus> {
        let bytes = read_file(path)?;
        self.inputs.push(FileHash {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        read_jsonl(bytes.as_slice()).with_context(|| format!("reading {}", path.display()))
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Replay(r) => replay(&r),
        other => execute(other).map(|_| ()),
    }
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::Synth(a) => &a.out,
        Command::Fit(a) => &a.out,
        Command::Elbow(a) => &a.out,
        Command::ConsistencyDemo(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Replay(a) => &a.out,
    }
}

fn with_out(mut cmd: Command, out: PathBuf) -> Command {
    match &mut cmd {
        Command::Synth(a) => a.out = out,
        Command::Fit(a) => a.out = out,
        Command::Elbow(a) => a.out = out,
        Command::ConsistencyDemo(a) => a.out = out,
        Command::Eval(a) => a.out = out,
        Command::Replay(a) => a.out = out,
    }
    cmd
}

fn seed(cmd: &Command) -> Option<u64> {
    match cmd {
        Command::Synth(a) => Some(a.seed),
        Command::Fit(a) => Some(a.seed),
        Command::Elbow(a) => Some(a.seed),
        Command::ConsistencyDemo(a) => Some(a.seed),
        Command::Eval(_) | Command::Replay(_) => None,
    }
}

fn execute(cmd: Command) -> Result<RunManifest> {
    let start = Instant::now();
    let produced = match &cmd {
        Command::Synth(a) => synth(a)?,
        Command::Fit(a) => fit(a)?,
        Command::Elbow(a) => elbow(a)?,
        Command::ConsistencyDemo(a) => consistency_demo(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Replay(_) => {
            return Err(AcaeError::ConfigInvalid("a replay cannot be recorded".into()).into());
        }
    };
    let out = out_dir(&cmd);
    std::fs::create_dir_all(out).map_err(|e| AcaeError::Io(format!("{}: {e}", out.display())))?;
    let mut outputs = Vec::with_capacity(produced.files.len());
    for (name, bytes) in &produced.files {
        write_atomic(&out.join(name), bytes)?;
        outputs.push(FileHash {
            path: name.into(),
            sha256: sha256_hex(bytes),
        });
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: seed(&cmd),
        run: cmd.clone(),
        inputs: produced.inputs,
        outputs,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    write_atomic(&out.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let bytes = read_file(&args.manifest)?;
    let recorded: RunManifest = serde_json::from_slice(&bytes)
        .map_err(|e| AcaeError::Parse(format!("{}: {e}", args.manifest.display())))?;
    let mut diffs = Vec::new();
    for input in &recorded.inputs {
        let now = sha256_hex(&read_file(&input.path)?);
        if now != input.sha256 {
            diffs.push(format!("input {} changed since the recorded run", input.path.display()));
        }
    }
    if !diffs.is_empty() {
        return Err(ReplayMismatch(diffs).into());
    }
    let replayed = execute(with_out(recorded.run.clone(), args.out.clone()))?;
    let diffs = compare_outputs(&recorded.outputs, &replayed.outputs);
    if !diffs.is_empty() {
        return Err(ReplayMismatch(diffs).into());
    }
    println!("replay of {}: {} outputs identical", recorded.run.name(), recorded.outputs.len());
    Ok(())
}

fn catalog_for(formats: &str) -> Result<JointCatalog> {
    Ok(build_catalog(&preset(formats)?)?)
}

#[derive(Serialize)]
struct MixingFile<'a> {
    formats: &'a str,
    catalog_hash: String,
    config: &'a SynthConfig,
    mixing: &'a GroundTruthMixing,
}

fn synth(a: &SynthArgs) -> Result<Produced> {
    let catalog = catalog_for(&a.formats)?;
    let cfg = SynthConfig {
        latent_count: a.latents,
        noise_sigma: a.sigma,
        k: a.k,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let (corpus, mixing) = synth_corpus(&catalog, &cfg)?;
    let mut p = Produced::default();
    let mut buf = Vec::new();
    write_jsonl(&corpus, &mut buf)?;
    p.add("corpus.jsonl", buf);
    let sidecar = MixingFile {
        formats: &a.formats,
        catalog_hash: catalog.hash(),
        config: &cfg,
        mixing: &mixing,
    };
    p.add("mixing.json", serde_json::to_vec_pretty(&sidecar)?);
    Ok(p)
}

fn fit(a: &FitArgs) -> Result<Produced> {
    let catalog = catalog_for(&a.formats)?;
    let mut p = Produced::default();
    let corpus = p.load_corpus(&a.corpus)?;
    let cfg: TrainConfig = a.optim.train_config(a.latents, a.seed);
    let (weights, log) = fit_acae(&corpus, &catalog, &cfg, None)?;
    p.add(
        "checkpoint.json",
        Checkpoint::from_weights(&weights, &catalog.hash()).to_json()?.into_bytes(),
    );
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    p.add("train_log.csv", buf);
    Ok(p)
}

fn elbow(a: &ElbowArgs) -> Result<Produced> {
    let catalog = catalog_for(&a.formats)?;
    let mut p = Produced::default();
    let corpus = p.load_corpus(&a.corpus)?;
    let cfg = a.optim.train_config(0, a.seed);
    let points = elbow_curve(&corpus, &catalog, &a.latents, &cfg)?;
    let mut buf = Vec::new();
    write_elbow_csv(&points, &mut buf)?;
    p.add("elbow.csv", buf);
    Ok(p)
}

fn consistency_demo(a: &DemoArgs) -> Result<Produced> {
    let defaults = ConsistencyDemoConfig::default();
    let cfg = ConsistencyDemoConfig {
        formats: a.formats.clone(),
        planted_latents: a.latents,
        noise_sigma: a.sigma,
        k_per_source: a.k,
        k_test: a.k_test,
        acae: TrainConfig {
            latents: a.latents,
            steps: a.acae_steps,
            ..defaults.acae
        },
        lifter: LifterConfig {
            steps: a.steps,
            learning_rate: a.lr,
            batch_size: a.batch_size,
            ..defaults.lifter
        },
        lambda_cons: a.lambda_cons,
        lambda_teach: a.lambda_teach,
        seed: a.seed,
    };
    let rows = run_consistency_demo(&cfg, &a.variants())?;
    let mut buf = Vec::new();
    write_metrics_csv(&rows, &mut buf)?;
    let mut p = Produced::default();
    p.add("metrics.csv", buf);
    Ok(p)
}

fn eval(a: &EvalArgs) -> Result<Produced> {
    let mut p = Produced::default();
    let pred = p.load_corpus(&a.pred)?;
    let gt = p.load_corpus(&a.gt)?;
    let poses = |c: &PoseCorpus| -> Vec<PoseMatrix> { c.examples.iter().map(|e| e.pose.clone()).collect() };
    let report = evaluate(&poses(&pred), &poses(&gt), a.root)?;
    p.add("report.json", report.to_json()?.into_bytes());
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    p.add("report.csv", buf);
    Ok(p)
}
