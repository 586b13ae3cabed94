//! Top-k retrieval accuracy plus reranking, pair-classification and
//! classification scores over spoken queries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::cascade::{query_embedding, Method};
use super::index::{build_index, RetrievalIndex};
use crate::error::{Error, Result};
use crate::model::SpeechTextSystem;
use crate::ops;
use crate::synth::{rng_for, Dataset, SpeechUtterance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskScores {
    pub retrieval: f64,
    pub reranking: f64,
    pub pair_classification: f64,
    pub classification: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyStats {
    pub median_s: f64,
    pub mean_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub method: Method,
    pub wer: f64,
    pub seed: u64,
    pub n_queries: usize,
    /// Queries whose embedding could not be produced (scored as misses).
    pub failed_queries: usize,
    pub top1_acc: f64,
    pub top3_acc: f64,
    pub tasks: TaskScores,
    /// Wall-clock only; absent from the deterministic part of the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

impl EvalReport {
    /// JSON without wall-clock fields; stable for a fixed model and seed.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.latency = None;
        Ok(serde_json::to_string_pretty(&r)? + "\n")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Plain-text table: one row per report, numbers rendered from the report
/// fields at four decimals.
pub fn format_table(reports: &[EvalReport]) -> String {
    let header = [
        "Method",
        "Time(s)",
        "Top1-Acc.",
        "Top3-Acc.",
        "Retrieval",
        "Reranking",
        "PairClass.",
        "Classif.",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                r.latency.as_ref().map_or("-".to_string(), |l| format!("{:.6}", l.median_s)),
                fmt4(r.top1_acc),
                fmt4(r.top3_acc),
                fmt4(r.tasks.retrieval),
                fmt4(r.tasks.reranking),
                fmt4(r.tasks.pair_classification),
                fmt4(r.tasks.classification),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&rule.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    for r in &rows {
        line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    }
    out
}

/// Best accuracy of `score >= threshold` over all thresholds.
pub fn best_threshold_accuracy(scored: &[(f64, bool)]) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    let mut s = scored.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = s.len();
    // Threshold below everything: all predicted positive.
    let mut correct = s.iter().filter(|x| x.1).count();
    let mut best = correct;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && s[j].0 == s[i].0 {
            correct = if s[j].1 { correct - 1 } else { correct + 1 };
            j += 1;
        }
        best = best.max(correct);
        i = j;
    }
    best as f64 / n as f64
}

/// Rank (1-based) of `gold` after a stable descending sort of `scored`.
fn rank_of(scored: &[(u32, f32)], gold: u32) -> Option<usize> {
    let mut s = scored.to_vec();
    s.sort_by(|a, b| b.1.total_cmp(&a.1));
    s.iter().position(|x| x.0 == gold).map(|p| p + 1)
}

struct QueryOutcome {
    failed: bool,
    hit1: bool,
    hit3: bool,
    reciprocal_rank: f64,
    pair_scores: [(f64, bool); 2],
    label_hit: bool,
}

impl QueryOutcome {
    fn miss() -> Self {
        Self {
            failed: true,
            hit1: false,
            hit3: false,
            reciprocal_rank: 0.0,
            pair_scores: [(f64::NEG_INFINITY, true), (f64::NEG_INFINITY, false)],
            label_hit: false,
        }
    }
}

/// Evaluates `method` on `queries`, each scored against its source document.
pub fn eval_suite(
    sys: &SpeechTextSystem,
    ds: &Dataset,
    queries: &[SpeechUtterance],
    method: Method,
    wer: f64,
    seed: u64,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("eval_suite"));
    }
    if !(0.0..=1.0).contains(&wer) {
        return Err(Error::range("wer", wer, "[0, 1]"));
    }
    for q in queries {
        ds.document(q.source_doc)?;
    }
    let keys = method.key_model(sys);
    let index = build_index(&ds.documents, keys, "")?;
    let labels: Vec<Vec<f32>> = ds
        .topics
        .iter()
        .map(|t| keys.embed_text(&t.tokens))
        .collect::<Result<_>>()?;
    let mut by_topic: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for d in &ds.documents {
        by_topic.entry(d.semantic_seed as usize).or_default().push(d.doc_id);
    }
    let all_ids: Vec<u32> = ds.documents.iter().map(|d| d.doc_id).collect();
    let k3 = 3.min(index.len());

    let mut outcomes = Vec::with_capacity(queries.len());
    for q in queries {
        let emb = match query_embedding(sys, q, method, wer, seed) {
            Ok(e) => e,
            Err(Error::EmptyTranscript | Error::DegenerateVector(_)) => {
                outcomes.push(QueryOutcome::miss());
                continue;
            }
            Err(e) => return Err(e),
        };
        let scores = match index.scores(&emb) {
            Ok(s) => s,
            Err(Error::DegenerateVector(_)) => {
                outcomes.push(QueryOutcome::miss());
                continue;
            }
            Err(e) => return Err(e),
        };
        let score_of = |id: u32| scores[index.doc_ids().iter().position(|&d| d == id).unwrap_or(0)];
        let top = index.search_topk(&emb, k3)?;
        let gold = q.source_doc;
        let topic = ds.topic_of(gold)?;

        let mut rng = rng_for(seed, 40, q.utt_id as u64);
        let mut candidates: Vec<(u32, f32)> = by_topic[&topic].iter().map(|&id| (id, score_of(id))).collect();
        candidates.shuffle(&mut rng);
        let rr = rank_of(&candidates, gold).map_or(0.0, |r| 1.0 / r as f64);

        let same: Vec<u32> = by_topic[&topic].iter().copied().filter(|&d| d != gold).collect();
        let other: Vec<u32> = all_ids.iter().copied().filter(|&d| d != gold).collect();
        let neg = *same.choose(&mut rng).or_else(|| other.choose(&mut rng)).unwrap_or(&gold);

        let mut best = (0usize, f32::NEG_INFINITY);
        for (i, l) in labels.iter().enumerate() {
            let s = ops::cosine_sim(&emb, l).unwrap_or(f32::NEG_INFINITY);
            if s > best.1 {
                best = (i, s);
            }
        }
        outcomes.push(QueryOutcome {
            failed: false,
            hit1: top[0].0 == gold,
            hit3: top.iter().any(|t| t.0 == gold),
            reciprocal_rank: rr,
            pair_scores: [(score_of(gold) as f64, true), (score_of(neg) as f64, false)],
            label_hit: best.0 == topic,
        });
    }

    let n = outcomes.len() as f64;
    let frac = |f: &dyn Fn(&QueryOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
    let top1 = frac(&|o| o.hit1);
    let pairs: Vec<(f64, bool)> = outcomes.iter().flat_map(|o| o.pair_scores).collect();
    Ok(EvalReport {
        method,
        wer: if method.uses_wer() { wer } else { 0.0 },
        seed,
        n_queries: outcomes.len(),
        failed_queries: outcomes.iter().filter(|o| o.failed).count(),
        top1_acc: top1,
        top3_acc: frac(&|o| o.hit3),
        tasks: TaskScores {
            retrieval: top1,
            reranking: outcomes.iter().map(|o| o.reciprocal_rank).sum::<f64>() / n,
            pair_classification: best_threshold_accuracy(&pairs),
            classification: frac(&|o| o.label_hit),
        },
        latency: None,
    })
}

/// Top-1 and Top-3 of precomputed query embeddings against an index.
pub fn topk_accuracy(index: &RetrievalIndex, queries: &[(Vec<f32>, u32)]) -> Result<(f64, f64)> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("topk_accuracy"));
    }
    let k = 3.min(index.len());
    let (mut h1, mut h3) = (0usize, 0usize);
    for (q, gold) in queries {
        if !index.doc_ids().contains(gold) {
            return Err(Error::Dataset(format!("gold document {gold} missing from the index")));
        }
        let top = index.search_topk(q, k)?;
        h1 += (top[0].0 == *gold) as usize;
        h3 += top.iter().any(|t| t.0 == *gold) as usize;
    }
    let n = queries.len() as f64;
    Ok((h1 as f64 / n, h3 as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_normal;
    use crate::model::ModelConfig;
    use crate::synth::{gen_dataset, DataConfig};
    use crate::tensor::Tensor2D;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_accuracy_oracle() {
        assert_eq!(best_threshold_accuracy(&[(0.9, true), (0.1, false)]), 1.0);
        assert_eq!(best_threshold_accuracy(&[(0.1, true), (0.9, false)]), 0.5);
        let s = [(0.2, true), (0.5, false), (0.6, true), (0.7, true), (0.3, false)];
        // Brute force over every candidate threshold.
        let mut best = 0.0f64;
        for t in s.iter().map(|x| x.0).chain([1.0]) {
            let c = s.iter().filter(|x| (x.0 >= t) == x.1).count() as f64 / s.len() as f64;
            best = best.max(c);
        }
        assert_eq!(best_threshold_accuracy(&s), best);
    }

    #[test]
    fn perfect_and_chance_retrieval() {
        let m: Tensor2D<f32> = init_normal(100, 16, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let entries: Vec<_> = (0..100).map(|i| (i as u32, m.row(i).to_vec())).collect();
        let idx = RetrievalIndex::from_embeddings(entries.clone(), "h").unwrap();
        let (t1, t3) = topk_accuracy(&idx, &entries.iter().map(|(i, e)| (e.clone(), *i)).collect::<Vec<_>>()).unwrap();
        assert_eq!((t1, t3), (1.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 4000;
        let queries: Vec<(Vec<f32>, u32)> = (0..trials)
            .map(|i| (init_normal(1, 16, 1.0, &mut rng).into_data(), (i % 100) as u32))
            .collect();
        let (t1, t3) = topk_accuracy(&idx, &queries).unwrap();
        // 99.9% binomial interval around p = 0.01.
        let sd = (0.01f64 * 0.99 / trials as f64).sqrt();
        assert!((t1 - 0.01).abs() < 3.3 * sd, "{t1}");
        assert!(t3 >= t1);
        assert!(topk_accuracy(&idx, &[(vec![1.0; 16], 500)]).is_err());
    }

    #[test]
    fn untrained_report_is_well_formed_and_deterministic() {
        let ds = gen_dataset(&DataConfig { docs: 30, ..DataConfig::default() }).unwrap();
        let sys = SpeechTextSystem::new(&ModelConfig::default()).unwrap();
        let q = &ds.utterances[..24];
        for m in Method::ALL {
            let r = eval_suite(&sys, &ds, q, m, 0.2, 5).unwrap();
            assert!(r.top3_acc >= r.top1_acc);
            for v in [r.top1_acc, r.top3_acc, r.tasks.reranking, r.tasks.pair_classification, r.tasks.classification] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert_eq!(r.deterministic_json().unwrap(), eval_suite(&sys, &ds, q, m, 0.2, 5).unwrap().deterministic_json().unwrap());
        }
        let a = eval_suite(&sys, &ds, q, Method::Ours, 0.0, 5).unwrap();
        let b = eval_suite(&sys, &ds, q, Method::Ours, 0.4, 5).unwrap();
        assert_eq!(a, b);
        let mut bad = ds.utterances[0].clone();
        bad.source_doc = 9999;
        assert!(matches!(eval_suite(&sys, &ds, &[bad], Method::Ours, 0.0, 0), Err(Error::Dataset(_))));
    }

    #[test]
    fn text_only_on_transcripts_beats_chance() {
        let ds = gen_dataset(&DataConfig { docs: 50, ..DataConfig::default() }).unwrap();
        let sys = SpeechTextSystem::new(&ModelConfig::default()).unwrap();
        let r = eval_suite(&sys, &ds, &ds.utterances, Method::TextOnly, 0.0, 0).unwrap();
        assert!(r.top1_acc > 0.1, "{}", r.top1_acc);
    }

    #[test]
    fn table_mirrors_json_numbers() {
        let r = EvalReport {
            method: Method::Ours,
            wer: 0.0,
            seed: 0,
            n_queries: 4,
            failed_queries: 0,
            top1_acc: 0.75,
            top3_acc: 1.0,
            tasks: TaskScores { retrieval: 0.75, reranking: 0.8125, pair_classification: 0.875, classification: 0.5 },
            latency: Some(LatencyStats { median_s: 0.00125, mean_s: 0.0013 }),
        };
        let t = format_table(std::slice::from_ref(&r));
        let row = t.lines().nth(2).unwrap();
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cells[0], "ours");
        let nums: Vec<f64> = cells[1..].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(nums, vec![0.00125, 0.75, 1.0, 0.75, 0.8125, 0.875, 0.5]);
        assert!(!r.deterministic_json().unwrap().contains("latency"));
        assert!(r.to_json().unwrap().contains("median_s"));
    }
}
