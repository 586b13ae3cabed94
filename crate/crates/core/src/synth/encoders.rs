//! Toy trainable encoders standing in for pretrained speech and text models.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Embedding, Linear};
use crate::ops;
use crate::tensor::{Param, Parameterized, Real, Tensor2D};

/// Text encoder: token lookup followed by one affine+GELU mixing layer.
#[derive(Clone, Debug)]
pub struct TextEncoder<T = f32> {
    pub embedding: Embedding<T>,
    pub mix: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct TextTrace<T> {
    pub tokens: Vec<u32>,
    pub embedded: Tensor2D<T>,
    pub pre: Tensor2D<T>,
}

impl<T: Real> TextEncoder<T> {
    pub fn new(name: &str, vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            embedding: Embedding::new(&format!("{name}.embedding"), vocab, dim, rng),
            mix: Linear::new(&format!("{name}.mix"), dim, dim, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.vocab()
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim()
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor2D<T>> {
        Ok(self.forward_trace(tokens)?.0)
    }

    pub fn forward_trace(&self, tokens: &[u32]) -> Result<(Tensor2D<T>, TextTrace<T>)> {
        let embedded = self.embedding.forward(tokens)?;
        let pre = self.mix.forward(&embedded)?;
        Ok((
            ops::gelu(&pre),
            TextTrace {
                tokens: tokens.to_vec(),
                embedded,
                pre,
            },
        ))
    }

    pub fn backward(&mut self, trace: &TextTrace<T>, d_out: &Tensor2D<T>) -> Result<()> {
        let d_embedded = self.mix_backward(&trace.embedded, &trace.pre, d_out)?;
        self.embedding.backward(&trace.tokens, &d_embedded)
    }

    /// The mixing layer alone, applied to already-embedded frames.
    pub fn mix_forward(&self, frames: &Tensor2D<T>) -> Result<(Tensor2D<T>, Tensor2D<T>)> {
        let pre = self.mix.forward(frames)?;
        Ok((ops::gelu(&pre), pre))
    }

    /// Reverse of [`Self::mix_forward`]; returns the gradient for `frames`.
    pub fn mix_backward(
        &mut self,
        frames: &Tensor2D<T>,
        pre: &Tensor2D<T>,
        d_out: &Tensor2D<T>,
    ) -> Result<Tensor2D<T>> {
        let d_pre = ops::gelu_backward(pre, d_out)?;
        self.mix.backward(frames, &d_pre)
    }
}

impl<T: Real> Parameterized<T> for TextEncoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.embedding.params();
        p.extend(self.mix.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.embedding.params_mut();
        p.extend(self.mix.params_mut());
        p
    }
}

/// Speech encoder: a framewise affine+GELU transform; length preserving.
#[derive(Clone, Debug)]
pub struct SpeechEncoder<T = f32> {
    pub proj: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct SpeechTrace<T> {
    pub input: Tensor2D<T>,
    pub pre: Tensor2D<T>,
}

impl<T: Real> SpeechEncoder<T> {
    pub fn new(name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(&format!("{name}.proj"), dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.output_dim()
    }

    pub fn forward(&self, frames: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        Ok(self.forward_trace(frames)?.0)
    }

    pub fn forward_trace(&self, frames: &Tensor2D<T>) -> Result<(Tensor2D<T>, SpeechTrace<T>)> {
        if frames.rows() == 0 {
            return Err(Error::EmptySequence("speech_encoder"));
        }
        let pre = self.proj.forward(frames)?;
        Ok((
            ops::gelu(&pre),
            SpeechTrace {
                input: frames.clone(),
                pre,
            },
        ))
    }

    /// Accumulates parameter gradients; the input gradient is not needed.
    pub fn backward(&mut self, trace: &SpeechTrace<T>, d_out: &Tensor2D<T>) -> Result<()> {
        if !self.proj.weight.is_trainable() && !self.proj.bias.is_trainable() {
            return Ok(());
        }
        let d_pre = ops::gelu_backward(&trace.pre, d_out)?;
        self.proj.backward(&trace.input, &d_pre)?;
        Ok(())
    }
}

impl<T: Real> Parameterized<T> for SpeechEncoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.proj.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.proj.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_model, GradTolerance};
    use crate::layers::init_normal;
    use crate::loss::mse_align;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_encoder_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = TextEncoder::<f32>::new("text", 64, 16, &mut rng);
        let out = enc.forward(&[3, 1, 4, 1, 5]).unwrap();
        assert_eq!(out.shape(), (5, 16));
        assert_eq!(out, enc.forward(&[3, 1, 4, 1, 5]).unwrap());
        assert!(matches!(enc.forward(&[64]), Err(Error::Vocabulary { .. })));
        assert!(enc.forward(&[]).is_err());
    }

    #[test]
    fn speech_encoder_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = SpeechEncoder::<f32>::new("speech", 8, &mut rng);
        let x: Tensor2D<f32> = init_normal(11, 8, 1.0, &mut rng);
        assert_eq!(enc.forward(&x).unwrap().shape(), (11, 8));
        // zero bias at init, so zero input maps to gelu(0) = 0
        let zeros = enc.forward(&Tensor2D::zeros(4, 8)).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            enc.forward(&Tensor2D::zeros(0, 8)),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn text_encoder_pooled_mse_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut enc = TextEncoder::<f64>::new("text", 12, 6, &mut rng);
            let tokens = [1u32, 5, 5, 9, 0];
            let target: Tensor2D<f64> = init_normal(3, 6, 1.0, &mut rng);
            let loss = |e: &TextEncoder<f64>| Ok(mse_align(&e.forward(&tokens)?, &target)?.loss);
            let backward = |e: &mut TextEncoder<f64>| {
                let (out, trace) = e.forward_trace(&tokens)?;
                let g = mse_align(&out, &target)?;
                e.backward(&trace, &g.d_speech)
            };
            let res = check_model(&mut enc, loss, backward, 48, seed, GradTolerance::default()).unwrap();
            assert!(res.is_ok(), "seed {seed}: {}", res.unwrap_err());
        }
    }

    #[test]
    fn speech_encoder_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let mut enc = SpeechEncoder::<f64>::new("speech", 5, &mut rng);
            let x: Tensor2D<f64> = init_normal(7, 5, 1.0, &mut rng);
            let target: Tensor2D<f64> = init_normal(2, 5, 1.0, &mut rng);
            let loss = |e: &SpeechEncoder<f64>| Ok(mse_align(&e.forward(&x)?, &target)?.loss);
            let backward = |e: &mut SpeechEncoder<f64>| {
                let (out, trace) = e.forward_trace(&x)?;
                let g = mse_align(&out, &target)?;
                e.backward(&trace, &g.d_speech)
            };
            let res = check_model(&mut enc, loss, backward, 48, seed, GradTolerance::default()).unwrap();
            assert!(res.is_ok(), "seed {seed}: {}", res.unwrap_err());
        }
    }
}
