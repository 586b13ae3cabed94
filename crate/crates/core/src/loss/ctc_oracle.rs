//! Reference CTC likelihoods by enumerating every frame-level path. Cost is
//! `(V+1)^T`; intended for tiny instances only.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::log_softmax_rows;
use crate::tensor::Tensor2D;

use super::ctc::{ctc_loss, CtcLoss};

/// Collapses repeats, then drops `blank`.
pub fn collapse(path: &[usize], blank: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p as u32);
        }
        prev = Some(p);
    }
    out
}

/// `log P(y)` for every label sequence `y` reachable from some path.
pub fn enumerate_alignments(lp: &Tensor2D<f64>) -> HashMap<Vec<u32>, f64> {
    let (frames, classes) = lp.shape();
    let mut buckets: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
    let mut path = vec![0usize; frames];
    loop {
        let score: f64 = path.iter().enumerate().map(|(t, &c)| lp.get(t, c)).sum();
        buckets.entry(collapse(&path, classes - 1)).or_default().push(score);
        let mut i = 0;
        while i < frames {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == frames {
            break;
        }
    }
    buckets
        .into_iter()
        .map(|(k, v)| {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (k, m + v.iter().map(|s| (s - m).exp()).sum::<f64>().ln())
        })
        .collect()
}

/// Every sequence over `0..vocab` of length `0..=max_len`.
pub fn all_targets(vocab: usize, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<u32>> = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<u32>> = frontier
            .iter()
            .flat_map(|t| {
                (0..vocab as u32).map(move |v| {
                    let mut n = t.clone();
                    n.push(v);
                    n
                })
            })
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct OracleSummary {
    pub instances: usize,
    /// Instances where both sides agree the target cannot be aligned.
    pub infeasible: usize,
    pub max_abs_error: f64,
    pub mismatches: Vec<String>,
}

/// Compares [`ctc_loss`] with enumeration for all `V <= max_vocab`,
/// `T <= max_frames` and `|y| <= max_target`, one random posterior per `(V, T)`.
pub fn exhaustive_check(max_vocab: usize, max_frames: usize, max_target: usize, tol: f64, seed: u64) -> Result<OracleSummary> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut s = OracleSummary::default();
    for vocab in 1..=max_vocab {
        for frames in 1..=max_frames {
            let raw = Tensor2D::from_fn(frames, vocab + 1, |_, _| rng.random_range(-3.0..3.0));
            let lp = log_softmax_rows(&raw)?;
            let oracle = enumerate_alignments(&lp);
            for target in all_targets(vocab, max_target) {
                s.instances += 1;
                match (ctc_loss(&lp, &target), oracle.get(&target)) {
                    (Ok(CtcLoss { loss, .. }), Some(&log_p)) => {
                        let err = (-loss - log_p).abs();
                        s.max_abs_error = s.max_abs_error.max(err);
                        if !(err <= tol) {
                            s.mismatches.push(format!("V={vocab} T={frames} y={target:?}: {} vs {log_p}", -loss));
                        }
                    }
                    (Err(Error::Infeasible { .. }), None) => s.infeasible += 1,
                    (res, want) => s.mismatches.push(format!(
                        "V={vocab} T={frames} y={target:?}: got {:?}, oracle {want:?}",
                        res.map(|o| o.loss)
                    )),
                }
            }
        }
    }
    Ok(s)
}
