use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{lit, Param, Real};

/// Decoupled-weight-decay Adam. Moments are kept per parameter name and only
/// trainable parameters are touched, so frozen values and moments stay put.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Number of updates applied to `name` so far.
    pub fn steps_for(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.step)
    }

    pub fn moments_for(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.state.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    pub fn step<'a, T: Real + 'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param<T>>,
        lr: f64,
    ) -> Result<()> {
        let params: Vec<&mut Param<T>> = params.into_iter().filter(|p| p.is_trainable()).collect();
        // validate everything first so a divergent step leaves no partial update
        for p in &params {
            if !p.grad.is_finite() {
                return Err(Error::Divergence(p.name().to_string()));
            }
        }
        for p in params {
            let n = p.len();
            let st = self.state.entry(p.name().to_string()).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let decay = 1.0 - lr * self.weight_decay;
            let grad = p.grad.data().to_vec();
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                let g = g.to_f64().unwrap_or(f64::NAN);
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                let wv = w.to_f64().unwrap_or(f64::NAN);
                *w = lit(wv * decay - lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first 10% of steps, then linear decay to zero.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    lr_schedule_with_warmup(step, total_steps, base_lr, 0.1)
}

/// Warmup length is `ceil(warmup_fraction * total_steps)`.
pub fn lr_schedule_with_warmup(
    step: usize,
    total_steps: usize,
    base_lr: f64,
    warmup_fraction: f64,
) -> Result<f64> {
    if total_steps < 10 {
        return Err(Error::range("total_steps", total_steps, ">= 10"));
    }
    if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
        return Err(Error::range("warmup_fraction", warmup_fraction, "(0, 1)"));
    }
    if step > total_steps {
        return Err(Error::ScheduleExhausted {
            step,
            total: total_steps,
        });
    }
    let warmup = warmup_steps(total_steps, warmup_fraction);
    Ok(if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    })
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    // the small slack keeps 0.1 * 30 = 3.0000000000000004 at 3
    ((total_steps as f64 * warmup_fraction) - 1e-9).ceil().max(1.0) as usize
}
