//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each, and exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;
use sha2::{Digest, Sha256};
use speechemb_core::filter::{duration_iqr_filter, filter_pipeline, quality_filter, FilterConfig, RejectReason};
use speechemb_core::gradcheck::GradTolerance;
use speechemb_core::gradsuite::run_suite;
use speechemb_core::loss::ctc_oracle::exhaustive_check;
use speechemb_core::synth::io::read_dataset;
use speechemb_core::synth::SpeechUtterance;
use speechemb_core::Tensor2D;

const BIN: &str = env!("CARGO_BIN_EXE_speechemb");

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

fn run(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`speechemb {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("missing `{key}`"))
}

fn without_latency(mut v: Value) -> String {
    if let Some(m) = v.as_object_mut() {
        m.remove("latency");
    }
    serde_json::to_string(&v).unwrap_or_default()
}

fn sha_file(path: &Path) -> Result<String, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

struct Workspace {
    dir: tempfile::TempDir,
    config: String,
}

impl Workspace {
    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    fn corpus(&self) -> String {
        self.path("corpus.jsonl")
    }

    fn eval(&self, ckpt: &str, method: &str, wer: f64, out: &str) -> Result<Value, String> {
        let out = self.path(out);
        run(&[
            "eval", "--checkpoint", ckpt, "--corpus", &self.corpus(), "--method", method, "--wer",
            &wer.to_string(), "--config", &self.config, "--out", &out,
        ])?;
        read_json(Path::new(&out))
    }

    fn train(&self, out: &str, ablate: &str) -> Result<String, String> {
        let out = self.path(out);
        run(&[
            "train", "--config", &self.config, "--corpus", &self.corpus(), "--out", &out, "--stage", "all",
            "--ablate", ablate,
        ])?;
        Ok(out)
    }
}

type Outcome = Result<String, String>;

fn criterion_ctc() -> Outcome {
    let t = Instant::now();
    let s = exhaustive_check(4, 6, 3, 1e-9, 2024).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    if !s.mismatches.is_empty() {
        return Err(format!("{} mismatches, first: {}", s.mismatches.len(), s.mismatches[0]));
    }
    if secs >= 30.0 {
        return Err(format!("took {secs:.1}s"));
    }
    Ok(format!(
        "{} instances ({} infeasible), max |err| {:.2e}, {secs:.2}s",
        s.instances, s.infeasible, s.max_abs_error
    ))
}

fn criterion_gradients() -> Outcome {
    let t = Instant::now();
    let results = run_suite(0..20, GradTolerance::default()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| r.failure.as_ref().map(|f| format!("{}: {f}", r.name)))
        .collect();
    if !failed.is_empty() {
        return Err(failed.join("; "));
    }
    if secs >= 120.0 {
        return Err(format!("took {secs:.1}s"));
    }
    let checked: usize = results.iter().map(|r| r.checked).sum();
    Ok(format!("{} cases x 20 seeds, {checked} coordinates, {secs:.2}s", results.len()))
}

struct Trained {
    all: String,
    only1: String,
    only2: String,
    train_time: Duration,
}

fn train_all_modes(ws: &Workspace) -> Result<Trained, String> {
    let t = Instant::now();
    let all = ws.train("run_all", "none")?;
    let train_time = t.elapsed();
    Ok(Trained {
        all: format!("{all}/stage2"),
        only1: format!("{}/stage1", ws.train("run_only1", "only1")?),
        only2: format!("{}/stage2", ws.train("run_only2", "only2")?),
        train_time,
    })
}

fn criterion_toy_training(ws: &Workspace, tr: &Trained) -> Outcome {
    let t = Instant::now();
    let r = ws.eval(&tr.all, "ours", 0.0, "eval_ours.json")?;
    let total = tr.train_time + t.elapsed();
    let (t1, t3) = (num(&r, "top1_acc")?, num(&r, "top3_acc")?);
    let line = format!("top1 {t1:.3} (>= 0.80), top3 {t3:.3} (>= 0.90), {:.0}s", total.as_secs_f64());
    if t1 >= 0.80 && t3 >= 0.90 && total < Duration::from_secs(900) {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_ablation(ws: &Workspace, tr: &Trained) -> Outcome {
    let all = num(&ws.eval(&tr.all, "ours", 0.0, "abl_all.json")?, "top1_acc")?;
    let o1 = num(&ws.eval(&tr.only1, "ours", 0.0, "abl_only1.json")?, "top1_acc")?;
    let o2 = num(&ws.eval(&tr.only2, "ours", 0.0, "abl_only2.json")?, "top1_acc")?;
    let line = format!(
        "all {all:.3} > max(only1 {o1:.3}, only2 {o2:.3}); only1 > only2: {} (not gated)",
        o1 > o2
    );
    if all > o1.max(o2) {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_methods(ws: &Workspace, tr: &Trained) -> Outcome {
    let text = num(&ws.eval(&tr.all, "text_only", 0.0, "m_text.json")?, "top1_acc")?;
    let ours = num(&ws.eval(&tr.all, "ours", 0.0, "m_ours.json")?, "top1_acc")?;
    let asr = num(&ws.eval(&tr.all, "asr_pipeline", 0.15, "m_asr.json")?, "top1_acc")?;
    let line = format!("text_only {text:.3} > ours {ours:.3} > asr_pipeline@0.15 {asr:.3}");
    if text > ours && ours > asr {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_latency(ws: &Workspace, tr: &Trained) -> Outcome {
    let out = ws.path("bench.json");
    run(&[
        "bench", "--checkpoint", &tr.all, "--corpus", &ws.corpus(), "--repeats", "7", "--config", &ws.config,
        "--out", &out,
    ])?;
    let ratio = num(&read_json(Path::new(&out))?, "ours_over_asr")?;
    let line = format!("median(ours)/median(asr_pipeline) = {ratio:.3} (<= 0.60)");
    if ratio <= 0.60 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_error_propagation(ws: &Workspace, tr: &Trained) -> Outcome {
    let mut accs = Vec::new();
    let mut ours = Vec::new();
    for (i, wer) in [0.0, 0.1, 0.2, 0.4].into_iter().enumerate() {
        accs.push(num(&ws.eval(&tr.all, "asr_pipeline", wer, &format!("wer_asr_{i}.json"))?, "top1_acc")?);
        ours.push(without_latency(ws.eval(&tr.all, "ours", wer, &format!("wer_ours_{i}.json"))?));
    }
    let monotone = accs.windows(2).all(|w| w[1] <= w[0]);
    let identical = ours.windows(2).all(|w| w[0] == w[1]);
    let line = format!(
        "cascade top1 {:?} non-increasing: {monotone}; ours identical across sweep: {identical}",
        accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
    );
    if monotone && identical {
        Ok(line)
    } else {
        Err(line)
    }
}

fn utt(id: u32, quality: f64, duration: usize) -> SpeechUtterance {
    SpeechUtterance {
        utt_id: id,
        source_doc: 0,
        voice_id: 0,
        noise_sigma: 0.0,
        quality_score: quality,
        transcript: vec![0],
        phoneme_durations: vec![duration],
        frames: Tensor2D::from_fn(duration.max(1), 2, |_, _| 1.0),
    }
}

fn criterion_filter(ws: &Workspace) -> Outcome {
    let (kept, _) = quality_filter(vec![utt(0, 3.0, 2), utt(1, 3.0001, 2)], 3.0).map_err(|e| e.to_string())?;
    let strict = kept.len() == 1 && kept[0].utt_id == 1;
    let batch = [1, 1, 1, 1, 10].iter().enumerate().map(|(i, &d)| utt(i as u32, 4.0, d)).collect();
    let (_, rep) = duration_iqr_filter(batch, 1.5).map_err(|e| e.to_string())?;
    let fence = rep.rejected.len() == 1 && rep.rejected[0].utt_id == 4 && rep.rejected[0].reason == RejectReason::DurationOutlier;

    let ds = read_dataset(Path::new(&ws.corpus())).map_err(|e| e.to_string())?;
    let ids: Vec<u32> = ds.utterances.iter().map(|u| u.utt_id).collect();
    let (kept, report) = filter_pipeline(ds.utterances, &FilterConfig::default()).map_err(|e| e.to_string())?;
    let lib_ok = report.check_conservation(&ids, &kept).is_ok();
    let out = ws.path("filtered.jsonl");
    run(&["filter", "--corpus", &ws.corpus(), "--out", &out, "--config", &ws.config])?;
    let cli_report = read_json(Path::new(&format!("{out}.report.json")))?;
    let stages = cli_report["stages"].as_array().cloned().unwrap_or_default();
    let rejected: usize = stages.iter().map(|s| s["rejected"].as_array().map_or(0, Vec::len)).sum();
    let survivors = read_dataset(Path::new(&out)).map_err(|e| e.to_string())?.utterances.len();
    let cli_ok = stages.len() == 3 && survivors + rejected == ids.len();
    let line = format!(
        "3.0 rejected at threshold 3.0: {strict}; {{1,1,1,1,10}} rejects 10: {fence}; conservation lib {lib_ok}, cli {cli_ok} ({survivors} kept + {rejected} rejected of {})",
        ids.len()
    );
    if strict && fence && lib_ok && cli_ok {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_reproducibility(ws: &Workspace) -> Outcome {
    let cfg = ws.path("small.json");
    std::fs::write(
        &cfg,
        r#"{"data": {"docs": 40, "seed": 3}, "train": {"stage1_lr": 0.005, "stage2_lr": 0.002, "asr_lr": 0.002, "projection_lr": 0.002, "epochs_per_stage": 2, "asr_epochs": 1}}"#,
    )
    .map_err(|e| e.to_string())?;
    let mut digests = Vec::new();
    for rep in 0..2 {
        let corpus = ws.path(&format!("small_{rep}.jsonl"));
        run(&["gen-data", "--config", &cfg, "--out", &corpus])?;
        let out = ws.path(&format!("repro_{rep}"));
        run(&["train", "--config", &cfg, "--corpus", &corpus, "--out", &out, "--stage", "all"])?;
        let eval_out = ws.path(&format!("repro_eval_{rep}.json"));
        let index = ws.path(&format!("repro_index_{rep}"));
        run(&[
            "eval", "--checkpoint", &format!("{out}/stage2"), "--corpus", &corpus, "--method", "ours", "--config",
            &cfg, "--out", &eval_out, "--save-index", &index,
        ])?;
        let mut d = Vec::new();
        d.push(sha_file(Path::new(&corpus))?);
        for stage in ["stage1", "stage2"] {
            for f in ["manifest.json", "params.bin"] {
                d.push(sha_file(&Path::new(&out).join(stage).join(f))?);
            }
        }
        for f in ["manifest.json", "embeddings.bin"] {
            d.push(sha_file(&Path::new(&index).join(f))?);
        }
        d.push(hex::encode(Sha256::digest(without_latency(read_json(Path::new(&eval_out))?))));
        digests.push(d);
    }
    let line = format!("{} artifacts hashed twice, identical: {}", digests[0].len(), digests[0] == digests[1]);
    if digests[0] == digests[1] {
        Ok(line)
    } else {
        Err(line)
    }
}

fn report(id: usize, name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(msg) => println!("criterion {id} [{name}]: PASS  {msg}"),
        Err(msg) => {
            *failures += 1;
            println!("criterion {id} [{name}]: FAIL  {msg}");
        }
    }
}

fn main() {
    let mut failures = 0;
    report(1, "ctc oracle", criterion_ctc(), &mut failures);
    report(2, "gradient suite", criterion_gradients(), &mut failures);

    let ws = Workspace {
        dir: tempfile::tempdir().expect("tempdir"),
        config: desk_config().display().to_string(),
    };
    let setup = run(&["gen-data", "--docs", "200", "--seed", "1", "--config", &ws.config, "--out", &ws.corpus()])
        .and_then(|_| train_all_modes(&ws));
    match setup {
        Ok(tr) => {
            report(3, "toy end-to-end training", criterion_toy_training(&ws, &tr), &mut failures);
            report(4, "ablation ordering", criterion_ablation(&ws, &tr), &mut failures);
            report(5, "method ordering", criterion_methods(&ws, &tr), &mut failures);
            report(6, "latency ratio", criterion_latency(&ws, &tr), &mut failures);
            report(7, "error propagation", criterion_error_propagation(&ws, &tr), &mut failures);
        }
        Err(e) => {
            for (id, name) in [
                (3, "toy end-to-end training"),
                (4, "ablation ordering"),
                (5, "method ordering"),
                (6, "latency ratio"),
                (7, "error propagation"),
            ] {
                report(id, name, Err(format!("setup failed: {e}")), &mut failures);
            }
        }
    }
    report(8, "filter pipeline", criterion_filter(&ws), &mut failures);
    report(9, "reproducibility", criterion_reproducibility(&ws), &mut failures);
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
