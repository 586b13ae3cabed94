use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use speechemb_core::config::RunConfig;
use speechemb_core::filter::{filter_pipeline, FilterConfig};
use speechemb_core::model::SpeechTextSystem;
use speechemb_core::retrieval::{
    bench_latency, build_index, eval_suite, format_table, median, query_embedding, LatencyStats, Method,
};
use speechemb_core::synth::io::{read_dataset, write_dataset};
use speechemb_core::synth::{gen_dataset, Dataset, SpeechUtterance};
use speechemb_core::train::{
    finetune_stage, load_checkpoint, pretrain_stage, save_checkpoint, split_utterances, Ablation, TrainReport,
    STAGE1_TAG, STAGE2_TAG,
};
use speechemb_core::Error;

pub const REPORT_FILE: &str = "train_report.jsonl";
pub const RUN_FILE: &str = "run.json";

/// Missing prerequisite artifact of a later stage.
#[derive(Debug)]
pub struct DependencyError(pub String);

impl std::fmt::Display for DependencyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "dependency error: {}", self.0)
    }
}

impl std::error::Error for DependencyError {}

/// Bad flags or config contents.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<UsageError>() || matches!(c.downcast_ref::<Error>(), Some(Error::Config(_)))) {
        2
    } else {
        1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pre,
    Fine,
    All,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_corpus(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading corpus {}", path.display()))
}

/// Machine output tagged with the hash of the config that produced it.
#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

pub fn gen_data(config: Option<&Path>, docs: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(d) = docs {
        cfg.data.docs = d;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let ds = gen_dataset(&cfg.data)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_dataset(out, &ds).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "generated {} docs, {} topics, {} utterances -> {}",
        ds.documents.len(),
        ds.topics.len(),
        ds.utterances.len(),
        out.display()
    );
    Ok(())
}

pub fn filter(
    corpus: &Path,
    out: &Path,
    report: Option<&Path>,
    config: Option<&Path>,
    quality_threshold: f64,
    energy_threshold: f64,
    iqr_multiplier: f64,
) -> Result<()> {
    let cfg = load_config(config)?;
    let fcfg = FilterConfig {
        energy_threshold,
        min_segment_frames: cfg.model.kernel,
        quality_threshold,
        iqr_multiplier,
    };
    if !(1.0..=5.0).contains(&quality_threshold) || energy_threshold < 0.0 || iqr_multiplier < 0.0 {
        bail!(UsageError(format!(
            "invalid filter thresholds: quality {quality_threshold} (in [1, 5]), energy {energy_threshold} (>= 0), iqr {iqr_multiplier} (>= 0)"
        )));
    }
    let mut ds = read_corpus(corpus)?;
    let ids: Vec<u32> = ds.utterances.iter().map(|u| u.utt_id).collect();
    let (kept, rep) = filter_pipeline(std::mem::take(&mut ds.utterances), &fcfg)?;
    rep.check_conservation(&ids, &kept)?;
    ds.utterances = kept;
    write_dataset(out, &ds).with_context(|| format!("writing {}", out.display()))?;
    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let hash = cfg.hash()?;
    write_json(&report_path, &Tagged { config_hash: &hash, body: &rep })?;
    for s in &rep.stages {
        println!("{:<13} in {:>5}  out {:>5}  rejected {:>5}", s.stage, s.input, s.output, s.rejected.len());
    }
    println!("kept {} of {} utterances -> {}", ds.utterances.len(), ids.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config_hash: String,
    config: &'a RunConfig,
    stage: &'static str,
    ablate: &'static str,
    checkpoints: Vec<String>,
    steps: usize,
}

fn append_report(path: &Path, report: &TrainReport, fresh: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .with_context(|| format!("writing {}", path.display()))?;
    for r in &report.records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn train(config: Option<&Path>, corpus: &Path, out: &Path, stage: Stage, ablation: Ablation) -> Result<()> {
    let cfg = load_config(config)?;
    let hash = cfg.hash()?;
    let stage1_dir = out.join(STAGE1_TAG);
    let run_pre = stage != Stage::Fine && ablation != Ablation::Only2;
    let run_fine = stage != Stage::Pre && ablation != Ablation::Only1;
    if !run_pre && !run_fine {
        bail!(UsageError(format!(
            "--stage {} with --ablate {} selects no stage",
            if stage == Stage::Pre { "pre" } else { "fine" },
            ablation.as_str()
        )));
    }
    let mut sys = if stage == Stage::Fine && ablation != Ablation::Only2 {
        if !stage1_dir.join("manifest.json").exists() {
            bail!(DependencyError(format!(
                "--stage fine needs a stage-1 checkpoint at {} (run --stage pre first, or pass --ablate only2)",
                stage1_dir.display()
            )));
        }
        let (sys, manifest) = load_checkpoint(&stage1_dir)?;
        if manifest.model != cfg.model {
            bail!(UsageError("stage-1 checkpoint model config differs from --config".into()));
        }
        sys
    } else {
        SpeechTextSystem::new(&cfg.model)?
    };
    let ds = read_corpus(corpus)?;
    let split = split_utterances(&ds);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut report = TrainReport::default();
    let started = Instant::now();
    let mut checkpoints = Vec::new();
    if run_pre {
        pretrain_stage(&mut sys, &ds, &split, &cfg.train, &mut report)?;
        save_checkpoint(&stage1_dir, &sys, STAGE1_TAG, report.records.len() as u64, &hash)?;
        checkpoints.push(stage1_dir.display().to_string());
        println!("stage1: {} steps -> {}", report.records.len(), stage1_dir.display());
    }
    if run_fine {
        let before = report.records.len();
        let (_, telemetry) = finetune_stage(&mut sys, &ds, &split, &cfg.train, &mut report)?;
        let dir = out.join(STAGE2_TAG);
        save_checkpoint(&dir, &sys, STAGE2_TAG, report.records.len() as u64, &hash)?;
        checkpoints.push(dir.display().to_string());
        println!(
            "stage2: {} steps (info_nce {}, cosent {}, cls_contrastive {}) -> {}",
            report.records.len() - before,
            telemetry.info_nce,
            telemetry.cosent,
            telemetry.cls_contrastive,
            dir.display()
        );
    }
    append_report(&out.join(REPORT_FILE), &report, stage != Stage::Fine)?;
    write_json(
        &out.join(RUN_FILE),
        &RunRecord {
            config_hash: hash,
            config: &cfg,
            stage: match stage {
                Stage::Pre => "pre",
                Stage::Fine => "fine",
                Stage::All => "all",
            },
            ablate: ablation.as_str(),
            checkpoints,
            steps: report.records.len(),
        },
    )?;
    println!("trained in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn held_out(ds: &Dataset) -> Vec<SpeechUtterance> {
    split_utterances(ds).eval.iter().map(|&i| ds.utterances[i].clone()).collect()
}

fn per_query_latency(sys: &SpeechTextSystem, queries: &[SpeechUtterance], method: Method, wer: f64, seed: u64) -> LatencyStats {
    let times: Vec<f64> = queries
        .iter()
        .map(|q| {
            let t = Instant::now();
            let _ = std::hint::black_box(query_embedding(sys, q, method, wer, seed));
            t.elapsed().as_secs_f64()
        })
        .collect();
    LatencyStats {
        median_s: median(&times),
        mean_s: times.iter().sum::<f64>() / times.len().max(1) as f64,
    }
}

pub fn eval(
    checkpoint: &Path,
    corpus: &Path,
    method: Method,
    wer: Option<f64>,
    config: Option<&Path>,
    out: &Path,
    save_index: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let wer = wer.unwrap_or(cfg.eval.wer);
    if !(0.0..=1.0).contains(&wer) {
        bail!(UsageError(format!("--wer must be in [0, 1], got {wer}")));
    }
    let (sys, manifest) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ds = read_corpus(corpus)?;
    let queries = held_out(&ds);
    let mut report = eval_suite(&sys, &ds, &queries, method, wer, cfg.eval.seed)?;
    report.latency = Some(per_query_latency(&sys, &queries, method, wer, cfg.eval.seed));
    write_json(out, &Tagged { config_hash: &manifest.config_hash, body: &report })?;
    if let Some(dir) = save_index {
        build_index(&ds.documents, method.key_model(&sys), &manifest.params_sha256)?
            .save(dir)
            .with_context(|| format!("writing index {}", dir.display()))?;
    }
    print!("{}", format_table(std::slice::from_ref(&report)));
    Ok(())
}

pub fn bench(checkpoint: &Path, corpus: &Path, repeats: Option<usize>, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let repeats = repeats.unwrap_or(cfg.bench.repeats);
    let (sys, manifest) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ds = read_corpus(corpus)?;
    let queries = held_out(&ds);
    let n = cfg.bench.queries.min(queries.len());
    if n == 0 {
        return Err(anyhow!("corpus has no held-out queries"));
    }
    let report = bench_latency(&sys, &queries[..n], repeats)?;
    if let Some(path) = out {
        write_json(path, &Tagged { config_hash: &manifest.config_hash, body: &report })?;
    }
    print!("{}", report.format_table());
    Ok(())
}
