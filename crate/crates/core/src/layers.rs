//! Parameterized building blocks. Each layer exposes `forward` and a
//! `backward` that accumulates into its own parameters and returns the
//! gradient with respect to its input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{lit, Param, Parameterized, Real, Tensor2D};

/// Gaussian initialization with the given standard deviation.
pub fn init_normal<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor2D<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor2D::from_fn(rows, cols, |_, _| lit(normal.sample(rng)))
}

/// `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug)]
pub struct Linear<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / input as f64).sqrt();
        Self::from_parts(
            name,
            init_normal(input, output, std, rng),
            Tensor2D::zeros(1, output),
        )
    }

    pub fn from_parts(name: &str, weight: Tensor2D<T>, bias: Tensor2D<T>) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        ops::add_row(&ops::matmul(x, &self.weight.value)?, &self.bias.value)
    }

    pub fn backward(&mut self, x: &Tensor2D<T>, d_out: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        let (dx, dw) = ops::matmul_backward(x, &self.weight.value, d_out)?;
        self.weight.accumulate(&dw)?;
        self.bias.accumulate(&ops::sum_rows(d_out))?;
        Ok(dx)
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Temporal convolution with kernel `k`, stride `s`.
#[derive(Clone, Debug)]
pub struct Conv1d<T = f32> {
    pub kernel: Param<T>,
    pub bias: Param<T>,
    pub k: usize,
    pub s: usize,
}

impl<T: Real> Conv1d<T> {
    pub fn new(
        name: &str,
        input: usize,
        output: usize,
        k: usize,
        s: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k == 0 || s == 0 {
            return Err(Error::Parameter(format!("{name}: kernel={k} stride={s}")));
        }
        let std = (1.0 / (k * input) as f64).sqrt();
        Ok(Self {
            kernel: Param::new(format!("{name}.kernel"), init_normal(k * input, output, std, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor2D::zeros(1, output)),
            k,
            s,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.value.rows() / self.k
    }

    pub fn output_dim(&self) -> usize {
        self.kernel.value.cols()
    }

    pub fn forward(&self, seq: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        ops::conv1d(seq, &self.kernel.value, &self.bias.value, self.k, self.s)
    }

    pub fn backward(&mut self, seq: &Tensor2D<T>, d_out: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        let g = ops::conv1d_backward(seq, &self.kernel.value, self.k, self.s, d_out)?;
        self.kernel.accumulate(&g.d_kernel)?;
        self.bias.accumulate(&g.d_bias)?;
        Ok(g.d_seq)
    }
}

impl<T: Real> Parameterized<T> for Conv1d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.kernel, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

/// Token embedding table, `vocab x dim`.
#[derive(Clone, Debug)]
pub struct Embedding<T = f32> {
    pub table: Param<T>,
}

impl<T: Real> Embedding<T> {
    pub fn new(name: &str, vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: Param::new(format!("{name}.table"), init_normal(vocab, dim, 1.0, rng)),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.value.cols()
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("embedding lookup"));
        }
        match tokens.iter().find(|&&t| t as usize >= self.vocab()) {
            Some(&token) => Err(Error::Vocabulary {
                token,
                vocab: self.vocab(),
            }),
            None => Ok(()),
        }
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor2D<T>> {
        self.check_tokens(tokens)?;
        let rows: Vec<&[T]> = tokens.iter().map(|&t| self.table.value.row(t as usize)).collect();
        Tensor2D::from_rows(&rows)
    }

    pub fn backward(&mut self, tokens: &[u32], d_out: &Tensor2D<T>) -> Result<()> {
        if !self.table.is_trainable() {
            return Ok(());
        }
        if d_out.rows() != tokens.len() || d_out.cols() != self.dim() {
            return Err(Error::Dimension {
                op: "embedding_backward",
                left: (tokens.len(), self.dim()),
                right: d_out.shape(),
            });
        }
        for (r, &t) in tokens.iter().enumerate() {
            let dst = self.table.grad.row_mut(t as usize);
            for (g, &d) in dst.iter_mut().zip(d_out.row(r)) {
                *g = *g + d;
            }
        }
        Ok(())
    }
}

impl<T: Real> Parameterized<T> for Embedding<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.table]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.table]
    }
}

/// `W2 * GELU(W1 x + b1) + b2`, applied framewise.
#[derive(Clone, Debug)]
pub struct Mlp<T = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Activations kept from an [`Mlp`] forward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace<T> {
    pub input: Tensor2D<T>,
    pub pre: Tensor2D<T>,
    pub hidden: Tensor2D<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new(name: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), input, hidden, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, output, rng),
        }
    }

    pub fn forward(&self, x: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        Ok(self.forward_trace(x)?.0)
    }

    pub fn forward_trace(&self, x: &Tensor2D<T>) -> Result<(Tensor2D<T>, MlpTrace<T>)> {
        let pre = self.fc1.forward(x)?;
        let hidden = ops::gelu(&pre);
        let out = self.fc2.forward(&hidden)?;
        Ok((
            out,
            MlpTrace {
                input: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, trace: &MlpTrace<T>, d_out: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        let d_hidden = self.fc2.backward(&trace.hidden, d_out)?;
        let d_pre = ops::gelu_backward(&trace.pre, &d_hidden)?;
        self.fc1.backward(&trace.input, &d_pre)
    }
}

impl<T: Real> Parameterized<T> for Mlp<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_model, GradTolerance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_gradients_over_seeds() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mlp = Mlp::<f64>::new("mlp", 4, 6, 3, &mut rng);
            let x: Tensor2D<f64> = init_normal(5, 4, 1.0, &mut rng);
            let w: Tensor2D<f64> = init_normal(5, 3, 1.0, &mut rng);
            let loss = |m: &Mlp<f64>| -> Result<f64> {
                let y = m.forward(&x)?;
                Ok(ops::dot(y.data(), w.data()))
            };
            let backward = |m: &mut Mlp<f64>| -> Result<()> {
                let (_, trace) = m.forward_trace(&x)?;
                m.backward(&trace, &w)?;
                Ok(())
            };
            let res = check_model(&mut mlp, loss, backward, 64, seed, GradTolerance::default())
                .unwrap();
            assert!(res.is_ok(), "seed {seed}: {}", res.unwrap_err());
        }
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Embedding::<f32>::new("e", 8, 4, &mut rng);
        assert!(matches!(
            e.forward(&[1, 8]),
            Err(Error::Vocabulary { token: 8, vocab: 8 })
        ));
        assert_eq!(e.forward(&[1, 2, 1]).unwrap().shape(), (3, 4));
    }
}
