//! Model assemblies: the end-to-end embedding model, the projection-to-text
//! baseline, the CTC recognizer used by the cascaded and alignment arms, and
//! the bundle that is checkpointed as one unit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterTrace, ScaleHead};
use crate::error::{Error, Result};
use crate::layers::{Conv1d, Linear};
use crate::ops;
use crate::synth::{derive_seed, SpeechEncoder, SpeechTrace, TextEncoder, TextTrace};
use crate::tensor::{lit, Param, Parameterized, Real, Tensor2D};

/// Architecture sizes. `embed_dim` must exceed `text_dim`: the head scales up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub speech_dim: usize,
    pub text_dim: usize,
    pub embed_dim: usize,
    pub adapter_hidden: usize,
    pub kernel: usize,
    pub stride: usize,
    pub asr_hidden: usize,
    /// Odd kernel width of the recognizer's convolution ("same" padding).
    pub asr_kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            speech_dim: 32,
            text_dim: 64,
            embed_dim: 128,
            adapter_hidden: 128,
            kernel: 5,
            stride: 4,
            asr_hidden: 128,
            asr_kernel: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("speech_dim", self.speech_dim),
            ("text_dim", self.text_dim),
            ("embed_dim", self.embed_dim),
            ("adapter_hidden", self.adapter_hidden),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("asr_hidden", self.asr_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.embed_dim <= self.text_dim {
            return Err(Error::Config(format!(
                "model.embed_dim ({}) must exceed model.text_dim ({})",
                self.embed_dim, self.text_dim
            )));
        }
        if self.asr_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "model.asr_kernel ({}) must be odd",
                self.asr_kernel
            )));
        }
        Ok(())
    }

    fn rng(&self, component: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 100, component))
    }
}

/// Which components receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub speech_encoder: bool,
    pub adapter: bool,
    pub text_encoder: bool,
    pub head: bool,
}

impl FreezeMask {
    pub const ALL: Self = Self {
        speech_encoder: true,
        adapter: true,
        text_encoder: true,
        head: true,
    };

    /// Alignment pre-training: the text side is the fixed target.
    pub const ALIGN: Self = Self {
        speech_encoder: true,
        adapter: true,
        text_encoder: false,
        head: false,
    };
}

/// Trainable components for stage 1, 2 or 3 of the projection baseline.
pub fn freeze_schedule_projection_baseline(stage: u8) -> Result<FreezeMask> {
    let none = FreezeMask {
        speech_encoder: false,
        adapter: false,
        text_encoder: false,
        head: false,
    };
    match stage {
        1 => Ok(FreezeMask { adapter: true, ..none }),
        2 => Ok(FreezeMask {
            adapter: true,
            speech_encoder: true,
            ..none
        }),
        3 => Ok(FreezeMask::ALL),
        _ => Err(Error::range("projection stage", stage, "{1, 2, 3}")),
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingModel<T = f32> {
    pub speech_encoder: SpeechEncoder<T>,
    pub adapter: Adapter<T>,
    pub text_encoder: TextEncoder<T>,
    pub head: ScaleHead<T>,
}

#[derive(Clone, Debug)]
pub struct AdaptTrace<T> {
    pub speech: SpeechTrace<T>,
    pub adapter: AdapterTrace<T>,
}

#[derive(Clone, Debug)]
pub struct SpeechEmbedTrace<T> {
    pub adapt: AdaptTrace<T>,
    pub frames: usize,
    pub pooled: Tensor2D<T>,
}

#[derive(Clone, Debug)]
pub struct TextEmbedTrace<T> {
    pub text: TextTrace<T>,
    pub pooled: Tensor2D<T>,
}

impl<T: Real> EmbeddingModel<T> {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let tag = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            speech_encoder: SpeechEncoder::new(&tag("speech_encoder"), cfg.speech_dim, &mut cfg.rng(1)),
            adapter: Adapter::new(
                &tag("adapter"),
                cfg.speech_dim,
                cfg.text_dim,
                cfg.adapter_hidden,
                cfg.kernel,
                cfg.stride,
                &mut cfg.rng(2),
            )?,
            text_encoder: TextEncoder::new(&tag("text_encoder"), cfg.vocab, cfg.text_dim, &mut cfg.rng(3)),
            head: ScaleHead::new(&tag("head"), cfg.text_dim, cfg.embed_dim, &mut cfg.rng(4)),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.head.embed_dim()
    }

    pub fn apply_mask(&mut self, mask: &FreezeMask) {
        self.speech_encoder.set_trainable(mask.speech_encoder);
        self.adapter.set_trainable(mask.adapter);
        self.text_encoder.set_trainable(mask.text_encoder);
        self.head.set_trainable(mask.head);
    }

    /// `z_s = Adapter(f_s(x_s))`, `T' x d_t`.
    pub fn adapt(&self, frames: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        Ok(self.adapt_trace(frames)?.0)
    }

    pub fn adapt_trace(&self, frames: &Tensor2D<T>) -> Result<(Tensor2D<T>, AdaptTrace<T>)> {
        let (h_s, speech) = self.speech_encoder.forward_trace(frames)?;
        let (z_s, adapter) = self.adapter.forward_trace(&h_s)?;
        Ok((z_s, AdaptTrace { speech, adapter }))
    }

    pub fn adapt_backward(&mut self, trace: &AdaptTrace<T>, d_z: &Tensor2D<T>) -> Result<()> {
        let d_h = self.adapter.backward(&trace.adapter, d_z)?;
        self.speech_encoder.backward(&trace.speech, &d_h)
    }

    /// Query embedding `q`: pool the adapted frames, then apply the head.
    pub fn embed_speech(&self, frames: &Tensor2D<T>) -> Result<Vec<T>> {
        Ok(self.embed_speech_trace(frames)?.0)
    }

    pub fn embed_speech_trace(&self, frames: &Tensor2D<T>) -> Result<(Vec<T>, SpeechEmbedTrace<T>)> {
        let (z_s, adapt) = self.adapt_trace(frames)?;
        let pooled = ops::mean_pool(&z_s)?;
        let q = self.head.forward(&pooled)?;
        Ok((
            q,
            SpeechEmbedTrace {
                adapt,
                frames: z_s.rows(),
                pooled,
            },
        ))
    }

    pub fn speech_backward(&mut self, trace: &SpeechEmbedTrace<T>, d_q: &[T]) -> Result<()> {
        let d_pooled = self.head.backward(&trace.pooled, d_q)?;
        let d_z = ops::mean_pool_backward(trace.frames, &d_pooled)?;
        self.adapt_backward(&trace.adapt, &d_z)
    }

    /// Document key: pooled text features through the same head instance.
    pub fn embed_text(&self, tokens: &[u32]) -> Result<Vec<T>> {
        Ok(self.embed_text_trace(tokens)?.0)
    }

    pub fn embed_text_trace(&self, tokens: &[u32]) -> Result<(Vec<T>, TextEmbedTrace<T>)> {
        let (z_t, text) = self.text_encoder.forward_trace(tokens)?;
        let pooled = ops::mean_pool(&z_t)?;
        Ok((self.head.forward(&pooled)?, TextEmbedTrace { text, pooled }))
    }

    pub fn text_backward(&mut self, trace: &TextEmbedTrace<T>, d_k: &[T]) -> Result<()> {
        let d_pooled = self.head.backward(&trace.pooled, d_k)?;
        let d_z = ops::mean_pool_backward(trace.text.tokens.len(), &d_pooled)?;
        self.text_encoder.backward(&trace.text, &d_z)
    }
}

impl<T: Real> Parameterized<T> for EmbeddingModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.speech_encoder.params();
        p.extend(self.adapter.params());
        p.extend(self.text_encoder.params());
        p.extend(self.head.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.speech_encoder.params_mut();
        p.extend(self.adapter.params_mut());
        p.extend(self.text_encoder.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

/// Baseline that feeds adapted speech frames into the text encoder's mixing
/// layer, `h = f_t(Adapter(f_s(x_s)))`, before pooling and the head.
#[derive(Clone, Debug)]
pub struct ProjectionModel<T = f32> {
    pub net: EmbeddingModel<T>,
}

#[derive(Clone, Debug)]
pub struct ProjectTrace<T> {
    pub adapt: AdaptTrace<T>,
    pub adapted: Tensor2D<T>,
    pub mix_pre: Tensor2D<T>,
    pub pooled: Tensor2D<T>,
}

impl<T: Real> ProjectionModel<T> {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut shifted = cfg.clone();
        shifted.seed = derive_seed(cfg.seed, 101, 0);
        Ok(Self {
            net: EmbeddingModel::new(prefix, &shifted)?,
        })
    }

    pub fn embed_speech(&self, frames: &Tensor2D<T>) -> Result<Vec<T>> {
        Ok(self.embed_speech_trace(frames)?.0)
    }

    pub fn embed_speech_trace(&self, frames: &Tensor2D<T>) -> Result<(Vec<T>, ProjectTrace<T>)> {
        let (adapted, adapt) = self.net.adapt_trace(frames)?;
        let (mixed, mix_pre) = self.net.text_encoder.mix_forward(&adapted)?;
        let pooled = ops::mean_pool(&mixed)?;
        let q = self.net.head.forward(&pooled)?;
        Ok((
            q,
            ProjectTrace {
                adapt,
                adapted,
                mix_pre,
                pooled,
            },
        ))
    }

    pub fn speech_backward(&mut self, trace: &ProjectTrace<T>, d_q: &[T]) -> Result<()> {
        let d_pooled = self.net.head.backward(&trace.pooled, d_q)?;
        let d_mixed = ops::mean_pool_backward(trace.adapted.rows(), &d_pooled)?;
        let d_adapted = self
            .net
            .text_encoder
            .mix_backward(&trace.adapted, &trace.mix_pre, &d_mixed)?;
        self.net.adapt_backward(&trace.adapt, &d_adapted)
    }
}

impl<T: Real> Parameterized<T> for ProjectionModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }
}

/// Frame-level recognizer trained with CTC: its own speech encoder, a
/// "same"-padded convolution with GELU, and a projection to `V + 1` classes.
#[derive(Clone, Debug)]
pub struct AsrModel<T = f32> {
    pub speech_encoder: SpeechEncoder<T>,
    pub conv: Conv1d<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct AsrTrace<T> {
    pub speech: SpeechTrace<T>,
    pub padded: Tensor2D<T>,
    pub conv_pre: Tensor2D<T>,
    pub hidden: Tensor2D<T>,
    pub log_probs: Tensor2D<T>,
}

impl<T: Real> AsrModel<T> {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            speech_encoder: SpeechEncoder::new(&format!("{prefix}.speech_encoder"), cfg.speech_dim, &mut cfg.rng(11)),
            conv: Conv1d::new(
                &format!("{prefix}.conv"),
                cfg.speech_dim,
                cfg.asr_hidden,
                cfg.asr_kernel,
                1,
                &mut cfg.rng(12),
            )?,
            out: Linear::new(&format!("{prefix}.out"), cfg.asr_hidden, cfg.vocab + 1, &mut cfg.rng(13)),
        })
    }

    /// Token vocabulary size; the blank is index `vocab()`.
    pub fn vocab(&self) -> usize {
        self.out.output_dim() - 1
    }

    pub fn log_probs(&self, frames: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        Ok(self.log_probs_trace(frames)?.log_probs)
    }

    pub fn log_probs_trace(&self, frames: &Tensor2D<T>) -> Result<AsrTrace<T>> {
        let (h, speech) = self.speech_encoder.forward_trace(frames)?;
        let pad = self.conv.k / 2;
        let mut padded = Tensor2D::zeros(h.rows() + 2 * pad, h.cols());
        let start = pad * h.cols();
        padded.data_mut()[start..start + h.data().len()].copy_from_slice(h.data());
        let conv_pre = self.conv.forward(&padded)?;
        let hidden = ops::gelu(&conv_pre);
        let log_probs = ops::log_softmax_rows(&self.out.forward(&hidden)?)?;
        Ok(AsrTrace {
            speech,
            padded,
            conv_pre,
            hidden,
            log_probs,
        })
    }

    pub fn backward(&mut self, trace: &AsrTrace<T>, d_log_probs: &Tensor2D<T>) -> Result<()> {
        let d_logits = ops::log_softmax_rows_backward(&trace.log_probs, d_log_probs)?;
        let d_hidden = self.out.backward(&trace.hidden, &d_logits)?;
        let d_pre = ops::gelu_backward(&trace.conv_pre, &d_hidden)?;
        let d_padded = self.conv.backward(&trace.padded, &d_pre)?;
        let pad = self.conv.k / 2;
        let (rows, cols) = (trace.log_probs.rows(), d_padded.cols());
        let d_h = Tensor2D::new(
            rows,
            cols,
            d_padded.data()[pad * cols..(pad + rows) * cols].to_vec(),
        )?;
        self.speech_encoder.backward(&trace.speech, &d_h)
    }

    pub fn transcribe(&self, frames: &Tensor2D<T>) -> Result<Vec<u32>> {
        Ok(crate::loss::ctc_greedy_decode(&self.log_probs(frames)?))
    }
}

impl<T: Real> Parameterized<T> for AsrModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.speech_encoder.params();
        p.extend(self.conv.params());
        p.extend(self.out.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.speech_encoder.params_mut();
        p.extend(self.conv.params_mut());
        p.extend(self.out.params_mut());
        p
    }
}

/// CTC-alignment embedding: recognizer posteriors select a soft mixture of
/// text-encoder token embeddings per frame, which then pass through the mixing
/// layer and are pooled with weights `1 - p(blank)`.
pub fn ctc_align_embed<T: Real>(
    asr: &AsrModel<T>,
    model: &EmbeddingModel<T>,
    frames: &Tensor2D<T>,
) -> Result<Vec<T>> {
    let vocab = asr.vocab();
    if vocab != model.text_encoder.vocab() {
        return Err(Error::Dimension {
            op: "ctc_align_embed",
            left: (1, vocab),
            right: (1, model.text_encoder.vocab()),
        });
    }
    let lp = asr.log_probs(frames)?;
    let table = &model.text_encoder.embedding.table.value;
    let mut weights = Vec::with_capacity(lp.rows());
    let mut soft = Tensor2D::zeros(lp.rows(), table.cols());
    for t in 0..lp.rows() {
        let probs: Vec<T> = lp.row(t)[..vocab].iter().map(|v| v.exp()).collect();
        let mass: T = probs.iter().copied().sum();
        weights.push(mass);
        if mass > T::zero() {
            let row = soft.row_mut(t);
            for (tok, &p) in probs.iter().enumerate() {
                let w = p / mass;
                for (o, &e) in row.iter_mut().zip(table.row(tok)) {
                    *o = *o + w * e;
                }
            }
        }
    }
    let total: T = weights.iter().copied().sum();
    if !(total > lit(1e-12)) {
        return Err(Error::EmptyTranscript);
    }
    let (mixed, _) = model.text_encoder.mix_forward(&soft)?;
    let mut pooled = Tensor2D::zeros(1, mixed.cols());
    for (t, &w) in weights.iter().enumerate() {
        for (o, &v) in pooled.data_mut().iter_mut().zip(mixed.row(t)) {
            *o = *o + w / total * v;
        }
    }
    model.head.forward(&pooled)
}

/// Everything a checkpoint holds: the end-to-end model and both baselines.
#[derive(Clone, Debug)]
pub struct SpeechTextSystem<T = f32> {
    pub config: ModelConfig,
    pub main: EmbeddingModel<T>,
    pub asr: AsrModel<T>,
    pub projection: ProjectionModel<T>,
}

impl<T: Real> SpeechTextSystem<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            main: EmbeddingModel::new("main", config)?,
            asr: AsrModel::new("asr", config)?,
            projection: ProjectionModel::new("proj", config)?,
        })
    }
}

impl<T: Real> Parameterized<T> for SpeechTextSystem<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.main.params();
        p.extend(self.asr.params());
        p.extend(self.projection.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.main.params_mut();
        p.extend(self.asr.params_mut());
        p.extend(self.projection.params_mut());
        p
    }
}
