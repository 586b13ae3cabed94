//! Connectionist Temporal Classification in the log domain.
//!
//! Inputs are `T x (V + 1)` log-probability rows; the blank symbol is the last
//! column (index `V`), so vocabulary indices are the same as everywhere else.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor2D};

#[inline]
fn lse2<T: Real>(a: T, b: T) -> T {
    let m = a.max(b);
    if m == T::neg_infinity() {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

#[inline]
fn lse3<T: Real>(a: T, b: T, c: T) -> T {
    let m = a.max(b).max(c);
    if m == T::neg_infinity() {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
    }
}

/// Number of adjacent equal labels; each one forces an extra blank frame.
pub fn adjacent_repeats(target: &[u32]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward and backward lattices over the blank-extended target.
#[derive(Clone, Debug)]
pub struct CtcTable<T> {
    /// `l'`: blank, y1, blank, y2, ..., blank.
    pub extended: Vec<usize>,
    /// `alpha[t][s]`, log domain, emission at `t` included.
    pub alpha: Tensor2D<T>,
    /// `beta[t][s]`, log domain, emission at `t` included.
    pub beta: Tensor2D<T>,
    pub log_likelihood: T,
}

fn validate<T: Real>(log_probs: &Tensor2D<T>, target: &[u32]) -> Result<usize> {
    let classes = log_probs.cols();
    if classes < 2 {
        return Err(Error::Parameter(format!(
            "CTC needs at least one label plus blank, got {classes} columns"
        )));
    }
    if log_probs.rows() == 0 {
        return Err(Error::EmptySequence("ctc"));
    }
    let blank = classes - 1;
    if let Some(&token) = target.iter().find(|&&t| t as usize >= blank) {
        return Err(Error::Vocabulary {
            token,
            vocab: blank,
        });
    }
    let repeats = adjacent_repeats(target);
    if log_probs.rows() < target.len() + repeats {
        return Err(Error::Infeasible {
            target_len: target.len(),
            repeats,
            frames: log_probs.rows(),
        });
    }
    Ok(blank)
}

/// Runs the forward-backward recursions.
pub fn ctc_forward<T: Real>(log_probs: &Tensor2D<T>, target: &[u32]) -> Result<CtcTable<T>> {
    let blank = validate(log_probs, target)?;
    let frames = log_probs.rows();
    let mut extended = Vec::with_capacity(2 * target.len() + 1);
    extended.push(blank);
    for &t in target {
        extended.push(t as usize);
        extended.push(blank);
    }
    let states = extended.len();
    let ninf = T::neg_infinity();
    // s-2 transition allowed into s (forward) or from s+2 into s (backward)
    let can_skip = |s: usize| s >= 2 && extended[s] != blank && extended[s] != extended[s - 2];

    let mut alpha = Tensor2D::from_fn(frames, states, |_, _| ninf);
    alpha.set(0, 0, log_probs.get(0, blank));
    if states > 1 {
        alpha.set(0, 1, log_probs.get(0, extended[1]));
    }
    for t in 1..frames {
        for s in 0..states {
            let stay = alpha.get(t - 1, s);
            let step = if s >= 1 { alpha.get(t - 1, s - 1) } else { ninf };
            let skip = if can_skip(s) { alpha.get(t - 1, s - 2) } else { ninf };
            let prev = lse3(stay, step, skip);
            if prev != ninf {
                alpha.set(t, s, prev + log_probs.get(t, extended[s]));
            }
        }
    }

    let last = frames - 1;
    let mut beta = Tensor2D::from_fn(frames, states, |_, _| ninf);
    beta.set(last, states - 1, log_probs.get(last, extended[states - 1]));
    if states > 1 {
        beta.set(last, states - 2, log_probs.get(last, extended[states - 2]));
    }
    for t in (0..last).rev() {
        for s in 0..states {
            let stay = beta.get(t + 1, s);
            let step = if s + 1 < states { beta.get(t + 1, s + 1) } else { ninf };
            let skip = if s + 2 < states && can_skip(s + 2) {
                beta.get(t + 1, s + 2)
            } else {
                ninf
            };
            let next = lse3(stay, step, skip);
            if next != ninf {
                beta.set(t, s, next + log_probs.get(t, extended[s]));
            }
        }
    }

    let log_likelihood = if states > 1 {
        lse2(alpha.get(last, states - 1), alpha.get(last, states - 2))
    } else {
        alpha.get(last, 0)
    };
    Ok(CtcTable {
        extended,
        alpha,
        beta,
        log_likelihood,
    })
}

#[derive(Clone, Debug)]
pub struct CtcLoss<T> {
    pub loss: T,
    /// Gradient of the loss with respect to each log-probability entry.
    pub grad: Tensor2D<T>,
}

/// `-log P(target | log_probs)` and its gradient.
pub fn ctc_loss<T: Real>(log_probs: &Tensor2D<T>, target: &[u32]) -> Result<CtcLoss<T>> {
    let table = ctc_forward(log_probs, target)?;
    let log_p = table.log_likelihood;
    let (frames, classes) = log_probs.shape();
    let mut grad = Tensor2D::zeros(frames, classes);
    if log_p == T::neg_infinity() {
        // every path underflowed; report it instead of emitting NaN gradients
        return Err(Error::Parameter("CTC likelihood underflowed to zero".into()));
    }
    let ninf = T::neg_infinity();
    let mut occupancy = vec![ninf; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = ninf);
        for (s, &label) in table.extended.iter().enumerate() {
            let ab = table.alpha.get(t, s) + table.beta.get(t, s);
            occupancy[label] = lse2(occupancy[label], ab);
        }
        for (c, &occ) in occupancy.iter().enumerate() {
            if occ != ninf {
                grad.set(t, c, -(occ - log_probs.get(t, c) - log_p).exp());
            }
        }
    }
    Ok(CtcLoss { loss: -log_p, grad })
}

/// Per-frame argmax (ties go to the lower index), collapse repeats, drop blanks.
pub fn ctc_greedy_decode<T: Real>(log_probs: &Tensor2D<T>) -> Vec<u32> {
    let blank = log_probs.cols().saturating_sub(1);
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.iter_rows() {
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if Some(best) != prev && best != blank {
            out.push(best as u32);
        }
        prev = Some(best);
    }
    out
}
