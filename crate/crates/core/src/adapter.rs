//! Speech-to-text-width adapter and the shared scaling head.
//!
//! The adapter is a temporal convolution (`d_s -> d_t`, kernel `k`, stride
//! `s`) followed by a framewise two-layer GELU MLP. The head is one affine map
//! `d_t -> d_e` applied to pooled features of either modality.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv1d, Linear, Mlp, MlpTrace};
use crate::ops;
use crate::tensor::{Param, Parameterized, Real, Tensor2D};

#[derive(Clone, Debug)]
pub struct Adapter<T = f32> {
    pub conv: Conv1d<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug)]
pub struct AdapterTrace<T> {
    pub input: Tensor2D<T>,
    pub mlp: MlpTrace<T>,
}

impl<T: Real> Adapter<T> {
    pub fn new(
        name: &str,
        speech_dim: usize,
        text_dim: usize,
        hidden: usize,
        k: usize,
        s: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(&format!("{name}.conv"), speech_dim, text_dim, k, s, rng)?,
            mlp: Mlp::new(&format!("{name}.mlp"), text_dim, hidden, text_dim, rng),
        })
    }

    pub fn kernel(&self) -> usize {
        self.conv.k
    }

    pub fn stride(&self) -> usize {
        self.conv.s
    }

    pub fn output_len(&self, frames: usize) -> Result<usize> {
        ops::conv_output_len(frames, self.conv.k, self.conv.s)
    }

    pub fn forward(&self, h_s: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        Ok(self.forward_trace(h_s)?.0)
    }

    pub fn forward_trace(&self, h_s: &Tensor2D<T>) -> Result<(Tensor2D<T>, AdapterTrace<T>)> {
        let conv = self.conv.forward(h_s)?;
        let (out, mlp) = self.mlp.forward_trace(&conv)?;
        Ok((
            out,
            AdapterTrace {
                input: h_s.clone(),
                mlp,
            },
        ))
    }

    /// Returns the gradient with respect to the adapter input.
    pub fn backward(&mut self, trace: &AdapterTrace<T>, d_out: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        let d_conv = self.mlp.backward(&trace.mlp, d_out)?;
        self.conv.backward(&trace.input, &d_conv)
    }
}

impl<T: Real> Parameterized<T> for Adapter<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv.params();
        p.extend(self.mlp.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv.params_mut();
        p.extend(self.mlp.params_mut());
        p
    }
}

/// Affine `d_t -> d_e` map shared by the speech and document paths.
#[derive(Clone, Debug)]
pub struct ScaleHead<T = f32> {
    pub linear: Linear<T>,
}

impl<T: Real> ScaleHead<T> {
    pub fn new(name: &str, text_dim: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(name, text_dim, embed_dim, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.linear.output_dim()
    }

    /// Maps one pooled `1 x d_t` row to an embedding vector.
    pub fn forward(&self, pooled: &Tensor2D<T>) -> Result<Vec<T>> {
        if pooled.rows() != 1 {
            return Err(Error::Dimension {
                op: "scale_head",
                left: pooled.shape(),
                right: (1, self.linear.input_dim()),
            });
        }
        Ok(self.linear.forward(pooled)?.into_data())
    }

    pub fn backward(&mut self, pooled: &Tensor2D<T>, d_embedding: &[T]) -> Result<Tensor2D<T>> {
        self.linear.backward(pooled, &Tensor2D::row_vector(d_embedding))
    }
}

impl<T: Real> Parameterized<T> for ScaleHead<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.linear.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.linear.params_mut()
    }
}
