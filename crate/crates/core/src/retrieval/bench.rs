//! Wall-clock latency per query embedding method.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::cascade::{query_embedding, Method};
use super::eval::LatencyStats;
use crate::error::{Error, Result};
use crate::model::SpeechTextSystem;
use crate::synth::SpeechUtterance;

pub const MIN_REPEATS: usize = 5;
pub const WARMUP_REPEATS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodLatency {
    pub method: Method,
    pub median_s: f64,
    pub mean_s: f64,
    /// Per-query seconds for each measured repeat.
    pub samples_s: Vec<f64>,
}

impl MethodLatency {
    pub fn stats(&self) -> LatencyStats {
        LatencyStats { median_s: self.median_s, mean_s: self.mean_s }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub n_queries: usize,
    pub methods: Vec<MethodLatency>,
    /// median(ours) / median(asr_pipeline).
    pub ours_over_asr: f64,
}

impl BenchReport {
    pub fn get(&self, method: Method) -> Option<&MethodLatency> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn format_table(&self) -> String {
        let mut out = format!("{:<16} {:>12} {:>12}\n", "Method", "median(s)", "mean(s)");
        for m in &self.methods {
            out += &format!("{:<16} {:>12.6} {:>12.6}\n", m.method.as_str(), m.median_s, m.mean_s);
        }
        out += &format!("ours/asr_pipeline median ratio: {:.3}\n", self.ours_over_asr);
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn run_once(sys: &SpeechTextSystem, utts: &[SpeechUtterance], method: Method) -> f64 {
    let start = Instant::now();
    for u in utts {
        // Empty transcripts still pay the recognizer cost; the error is the result.
        let _ = black_box(query_embedding(sys, black_box(u), method, 0.0, 0));
    }
    start.elapsed().as_secs_f64() / utts.len() as f64
}

/// Per-query latency of every method; methods are interleaved within each
/// repeat so drift affects them alike.
pub fn bench_latency(sys: &SpeechTextSystem, utts: &[SpeechUtterance], repeats: usize) -> Result<BenchReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::range("repeats", repeats, "[5, inf)"));
    }
    if utts.is_empty() {
        return Err(Error::EmptyInput("bench_latency"));
    }
    for _ in 0..WARMUP_REPEATS {
        for m in Method::ALL {
            run_once(sys, utts, m);
        }
    }
    let mut samples = vec![Vec::with_capacity(repeats); Method::ALL.len()];
    for _ in 0..repeats {
        for (i, m) in Method::ALL.into_iter().enumerate() {
            samples[i].push(run_once(sys, utts, m));
        }
    }
    let methods: Vec<MethodLatency> = Method::ALL
        .into_iter()
        .zip(samples)
        .map(|(method, s)| MethodLatency {
            method,
            median_s: median(&s),
            mean_s: s.iter().sum::<f64>() / s.len() as f64,
            samples_s: s,
        })
        .collect();
    let med = |m: Method| methods.iter().find(|x| x.method == m).map_or(f64::NAN, |x| x.median_s);
    Ok(BenchReport {
        repeats,
        n_queries: utts.len(),
        ours_over_asr: med(Method::Ours) / med(Method::AsrPipeline),
        methods,
    })
}
