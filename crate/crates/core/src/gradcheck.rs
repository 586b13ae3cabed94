//! Central finite-difference gradient checking in 64-bit precision.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Parameterized;

/// Step and tolerance for a gradient check. An entry passes when its
/// absolute error is within `atol` or its relative error within `rtol`.
#[derive(Clone, Copy, Debug)]
pub struct GradTolerance {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradTolerance {
    fn default() -> Self {
        Self {
            h: 1e-3,
            rtol: 1e-4,
            atol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}[{}]: analytic {:.9e} vs numeric {:.9e}",
            self.param, self.index, self.analytic, self.numeric
        )
    }
}

impl GradTolerance {
    pub fn within(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        diff <= self.atol || diff <= self.rtol * scale
    }

    pub fn compare(&self, name: &str, analytic: &[f64], numeric: &[f64]) -> Result<(), GradMismatch> {
        assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch for {name}");
        for (index, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            if !self.within(a, n) {
                return Err(GradMismatch {
                    param: name.to_string(),
                    index,
                    analytic: a,
                    numeric: n,
                });
            }
        }
        Ok(())
    }

    pub fn assert_close(&self, analytic: &[f64], numeric: &[f64]) {
        if let Err(m) = self.compare("input", analytic, numeric) {
            panic!("gradient mismatch: {m}");
        }
    }
}

/// Fourth-order central difference from samples at `x-2h, x-h, x+h, x+2h`.
#[inline]
pub fn central_difference(m2: f64, m1: f64, p1: f64, p2: f64, h: f64) -> f64 {
    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numerical_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut at = |offset: f64| {
                probe[i] = orig + offset;
                f(&probe)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * h), at(-h), at(h), at(2.0 * h));
            probe[i] = orig;
            central_difference(m2, m1, p1, p2, h)
        })
        .collect()
}

/// Checks every trainable parameter of `model`.
///
/// `backward` accumulates gradients of the scalar loss into the parameters
/// (they are zeroed first); `loss` evaluates it. At most
/// `max_entries` coordinates per parameter are probed, chosen by `seed`.
pub fn check_model<M: Parameterized<f64>>(
    model: &mut M,
    loss: impl Fn(&M) -> Result<f64>,
    backward: impl Fn(&mut M) -> Result<()>,
    max_entries: usize,
    seed: u64,
    tol: GradTolerance,
) -> Result<Result<usize, GradMismatch>> {
    model.zero_grad();
    backward(model)?;
    let analytic: Vec<(bool, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.is_trainable(), p.grad.data().to_vec()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for (pi, (trainable, grad)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        let len = grad.len();
        let picks: Vec<usize> = if len <= max_entries {
            (0..len).collect()
        } else {
            sample(&mut rng, len, max_entries).into_vec()
        };
        for idx in picks {
            let orig = model.params()[pi].value.data()[idx];
            let mut samples = [0.0; 4];
            for (slot, offset) in samples.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
                model.params_mut()[pi].value.data_mut()[idx] = orig + offset * tol.h;
                *slot = loss(model)?;
            }
            model.params_mut()[pi].value.data_mut()[idx] = orig;
            let [m2, m1, p1, p2] = samples;
            let numeric = central_difference(m2, m1, p1, p2, tol.h);
            if !tol.within(grad[idx], numeric) {
                return Ok(Err(GradMismatch {
                    param: model.params()[pi].name().to_string(),
                    index: idx,
                    analytic: grad[idx],
                    numeric,
                }));
            }
            checked += 1;
        }
    }
    Ok(Ok(checked))
}
