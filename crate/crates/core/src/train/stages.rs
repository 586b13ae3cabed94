use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::examples::{epoch_batches, split_utterances, Batch, ExampleBuilder, Split};
use super::optim::{lr_schedule_with_warmup, AdamW};
use super::{Ablation, TrainConfig, TrainReport, STAGE1_TAG, STAGE2_TAG};
use crate::error::{Error, Result};
use crate::loss::{ctc_loss, mse_align, select_loss, task_loss, LossKind};
use crate::model::{
    freeze_schedule_projection_baseline, EmbeddingModel, FreezeMask, ProjectTrace, ProjectionModel,
    SpeechEmbedTrace, SpeechTextSystem,
};
use crate::ops;
use crate::synth::{derive_seed, Dataset};
use crate::tensor::{lit, Parameterized, Tensor2D};

/// A model whose queries come from speech and whose keys come from an
/// [`EmbeddingModel`]'s document path.
pub trait QueryEncoder: Parameterized<f32> {
    type Trace;
    fn encode(&self, frames: &Tensor2D<f32>) -> Result<(Vec<f32>, Self::Trace)>;
    fn encode_backward(&mut self, trace: &Self::Trace, d_q: &[f32]) -> Result<()>;
    fn keys(&self) -> &EmbeddingModel<f32>;
    fn keys_mut(&mut self) -> &mut EmbeddingModel<f32>;
    /// Adds the pooled alignment loss for this query; returns its value.
    fn align_backward(&mut self, _trace: &Self::Trace, _transcript: &[u32], _scale: f32) -> Result<f64> {
        Ok(0.0)
    }
}

impl QueryEncoder for EmbeddingModel<f32> {
    type Trace = SpeechEmbedTrace<f32>;

    fn encode(&self, frames: &Tensor2D<f32>) -> Result<(Vec<f32>, Self::Trace)> {
        self.embed_speech_trace(frames)
    }

    fn encode_backward(&mut self, trace: &Self::Trace, d_q: &[f32]) -> Result<()> {
        self.speech_backward(trace, d_q)
    }

    fn keys(&self) -> &EmbeddingModel<f32> {
        self
    }

    fn keys_mut(&mut self) -> &mut EmbeddingModel<f32> {
        self
    }

    fn align_backward(&mut self, trace: &Self::Trace, transcript: &[u32], scale: f32) -> Result<f64> {
        let (z_t, text) = self.text_encoder.forward_trace(transcript)?;
        let pooled_t = ops::mean_pool(&z_t)?;
        let diff: Vec<f32> = trace
            .pooled
            .data()
            .iter()
            .zip(pooled_t.data())
            .map(|(a, b)| a - b)
            .collect();
        let loss: f64 = diff.iter().map(|&d| (d as f64) * (d as f64)).sum();
        let d_s = Tensor2D::row_vector(&diff.iter().map(|&d| 2.0 * d * scale).collect::<Vec<_>>());
        self.adapt_backward(&trace.adapt, &ops::mean_pool_backward(trace.frames, &d_s)?)?;
        let d_t = d_s.scale(-1.0);
        self.text_encoder
            .backward(&text, &ops::mean_pool_backward(transcript.len(), &d_t)?)?;
        Ok(loss)
    }
}

impl QueryEncoder for ProjectionModel<f32> {
    type Trace = ProjectTrace<f32>;

    fn encode(&self, frames: &Tensor2D<f32>) -> Result<(Vec<f32>, Self::Trace)> {
        self.embed_speech_trace(frames)
    }

    fn encode_backward(&mut self, trace: &Self::Trace, d_q: &[f32]) -> Result<()> {
        self.speech_backward(trace, d_q)
    }

    fn keys(&self) -> &EmbeddingModel<f32> {
        &self.net
    }

    fn keys_mut(&mut self) -> &mut EmbeddingModel<f32> {
        &mut self.net
    }
}

/// Counts of objective evaluations, by dispatched loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossTelemetry {
    pub info_nce: usize,
    pub cosent: usize,
    pub cls_contrastive: usize,
}

impl LossTelemetry {
    fn record(&mut self, kind: LossKind) {
        match kind {
            LossKind::InfoNce => self.info_nce += 1,
            LossKind::Cosent => self.cosent += 1,
            LossKind::ClsContrastive => self.cls_contrastive += 1,
        }
    }
}

fn check_compatible(sys: &SpeechTextSystem, ds: &Dataset) -> Result<()> {
    if ds.vocab != sys.config.vocab {
        return Err(Error::Config(format!(
            "corpus vocabulary {} differs from model.vocab {}",
            ds.vocab, sys.config.vocab
        )));
    }
    if let Some(u) = ds.utterances.iter().find(|u| u.frames.cols() != sys.config.speech_dim) {
        return Err(Error::Config(format!(
            "utterance {} has {} feature columns, model.speech_dim is {}",
            u.utt_id,
            u.frames.cols(),
            sys.config.speech_dim
        )));
    }
    Ok(())
}

/// Shuffled fixed-size batches of utterance indices for each epoch.
fn utterance_plan(train: &[usize], epochs: usize, batch: usize, seed: u64, stream: u64) -> Vec<Vec<usize>> {
    let mut plan = Vec::new();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, epoch as u64));
        let mut order = train.to_vec();
        order.shuffle(&mut rng);
        plan.extend(order.chunks(batch).map(<[usize]>::to_vec));
    }
    plan
}

struct Schedule {
    total: usize,
    base: f64,
    warmup: f64,
}

impl Schedule {
    fn lr(&self, step: usize) -> Result<f64> {
        lr_schedule_with_warmup(step, self.total, self.base, self.warmup)
    }
}

fn scaled(v: &[f32], s: f32) -> Vec<f32> {
    v.iter().map(|x| x * s).collect()
}

fn align_batch(model: &mut EmbeddingModel<f32>, ds: &Dataset, batch: &[usize]) -> Result<f64> {
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    for &i in batch {
        let u = &ds.utterances[i];
        let (z_s, trace) = model.adapt_trace(&u.frames)?;
        let (z_t, text) = model.text_encoder.forward_trace(&u.transcript)?;
        let g = mse_align(&z_s, &z_t)?;
        total += g.loss as f64;
        model.adapt_backward(&trace, &g.d_speech.scale(scale))?;
        if model.text_encoder.params().iter().any(|p| p.is_trainable()) {
            model.text_encoder.backward(&text, &g.d_text.scale(scale))?;
        }
    }
    Ok(total / batch.len() as f64)
}

fn contrastive_batch<M: QueryEncoder>(
    model: &mut M,
    ds: &Dataset,
    batch: &Batch,
    tau: f32,
    joint_pre_loss: bool,
    telemetry: &mut LossTelemetry,
) -> Result<f64> {
    let kind = select_loss(batch.task);
    let scale = 1.0 / batch.examples.len() as f32;
    let mut total = 0.0;
    for ex in &batch.examples {
        let u = &ds.utterances[ex.utt];
        let (q, q_trace) = model.encode(&u.frames)?;
        let keys = ex
            .keys()
            .map(|k| model.keys().embed_text_trace(k.tokens(ds)?))
            .collect::<Result<Vec<_>>>()?;
        let mut embs: Vec<&[f32]> = vec![&q];
        embs.extend(keys.iter().map(|(k, _)| k.as_slice()));
        let g = task_loss(kind, &embs, &ex.graded_pairs, tau)?;
        telemetry.record(kind);
        total += g.loss as f64;
        model.encode_backward(&q_trace, &scaled(&g.grads[0], scale))?;
        for ((_, trace), d) in keys.iter().zip(&g.grads[1..]) {
            model.keys_mut().text_backward(trace, &scaled(d, scale))?;
        }
        if joint_pre_loss {
            total += model.align_backward(&q_trace, &u.transcript, scale)?;
        }
    }
    Ok(total / batch.examples.len() as f64)
}

/// Runs `steps` optimizer updates, one per call of `step_fn`.
fn optimize<M: Parameterized<f32>>(
    model: &mut M,
    sched: &Schedule,
    weight_decay: f64,
    stage: &str,
    report: &mut TrainReport,
    mut step_fn: impl FnMut(&mut M, usize) -> Result<(f64, String)>,
) -> Result<usize> {
    let mut opt = AdamW::new(weight_decay);
    for step in 0..sched.total {
        model.zero_grad();
        let (loss, task) = step_fn(model, step)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("{stage} loss at step {step}")));
        }
        let lr = sched.lr(step)?;
        opt.step(model.params_mut(), lr)?;
        report.push(stage, step, lr, loss, &task);
    }
    Ok(sched.total)
}

/// Fine-tunes `model` over an explicit batch sequence (all epochs).
#[allow(clippy::too_many_arguments)]
pub fn finetune_on_batches<M: QueryEncoder>(
    model: &mut M,
    ds: &Dataset,
    plan: &[Batch],
    cfg: &TrainConfig,
    base_lr: f64,
    stage: &str,
    report: &mut TrainReport,
    telemetry: &mut LossTelemetry,
) -> Result<usize> {
    let sched = Schedule {
        total: plan.len(),
        base: base_lr,
        warmup: cfg.warmup_fraction,
    };
    let tau = cfg.tau as f32;
    optimize(model, &sched, cfg.weight_decay, stage, report, |m, step| {
        let batch = &plan[step];
        let loss = contrastive_batch(m, ds, batch, tau, cfg.joint_pre_loss, telemetry)?;
        Ok((loss, batch.task.as_str().to_string()))
    })
}

fn multitask_plan(ds: &Dataset, split: &Split, cfg: &TrainConfig, epochs: usize, epoch_offset: usize) -> Result<Vec<Batch>> {
    let builder = ExampleBuilder::new(ds, cfg.mining())?;
    let mut plan = Vec::new();
    for e in 0..epochs {
        plan.extend(epoch_batches(&builder, &split.train, &cfg.tasks, cfg.batch_size, epoch_offset + e)?);
    }
    Ok(plan)
}

/// CTC training of the recognizer arm on every training utterance.
pub fn train_asr(sys: &mut SpeechTextSystem, ds: &Dataset, split: &Split, cfg: &TrainConfig, report: &mut TrainReport) -> Result<usize> {
    let plan = utterance_plan(&split.train, cfg.asr_epochs, cfg.batch_size, cfg.seed, 301);
    let sched = Schedule {
        total: plan.len(),
        base: cfg.asr_lr,
        warmup: cfg.warmup_fraction,
    };
    sys.asr.set_trainable(true);
    optimize(&mut sys.asr, &sched, cfg.weight_decay, "asr", report, |asr, step| {
        let batch = &plan[step];
        let scale: f32 = lit(1.0 / batch.len() as f64);
        let mut total = 0.0;
        for &i in batch {
            let u = &ds.utterances[i];
            let trace = asr.log_probs_trace(&u.frames)?;
            let g = ctc_loss(&trace.log_probs, &u.transcript)?;
            total += g.loss as f64;
            asr.backward(&trace, &g.grad.scale(scale))?;
        }
        Ok((total / batch.len() as f64, "ctc".to_string()))
    })
}

/// The projection arm's three freeze stages.
pub fn train_projection(sys: &mut SpeechTextSystem, ds: &Dataset, split: &Split, cfg: &TrainConfig, report: &mut TrainReport) -> Result<usize> {
    let proj = &mut sys.projection;
    let mut steps = 0;
    proj.net.apply_mask(&freeze_schedule_projection_baseline(1)?);
    // stage 1: adapted frames regress onto the text encoder's token inputs
    let plan = utterance_plan(&split.train, cfg.projection_epochs, cfg.batch_size, cfg.seed, 311);
    let sched = Schedule {
        total: plan.len(),
        base: cfg.projection_lr,
        warmup: cfg.warmup_fraction,
    };
    steps += optimize(proj, &sched, cfg.weight_decay, "proj1", report, |p, step| {
        let batch = &plan[step];
        let scale = 1.0 / batch.len() as f32;
        let mut total = 0.0;
        for &i in batch {
            let u = &ds.utterances[i];
            let (z, trace) = p.net.adapt_trace(&u.frames)?;
            let target = p.net.text_encoder.embedding.forward(&u.transcript)?;
            let g = mse_align(&z, &target)?;
            total += g.loss as f64;
            p.net.adapt_backward(&trace, &g.d_speech.scale(scale))?;
        }
        Ok((total / batch.len() as f64, "align".to_string()))
    })?;
    let mut telemetry = LossTelemetry::default();
    for (stage, tag) in [(2u8, "proj2"), (3, "proj3")] {
        proj.net.apply_mask(&freeze_schedule_projection_baseline(stage)?);
        let plan = multitask_plan(ds, split, cfg, cfg.projection_epochs, 1000 * stage as usize)?;
        let no_joint = TrainConfig {
            joint_pre_loss: false,
            ..cfg.clone()
        };
        steps += finetune_on_batches(proj, ds, &plan, &no_joint, cfg.projection_lr, tag, report, &mut telemetry)?;
    }
    Ok(steps)
}

/// Stage 1: pooled-feature alignment of the main model, plus the recognizer.
/// Returns the number of main-model steps.
pub fn pretrain_stage(sys: &mut SpeechTextSystem, ds: &Dataset, split: &Split, cfg: &TrainConfig, report: &mut TrainReport) -> Result<usize> {
    cfg.validate()?;
    check_compatible(sys, ds)?;
    sys.main.apply_mask(&cfg.stage1_trainable);
    let plan = utterance_plan(&split.train, cfg.epochs_per_stage, cfg.batch_size, cfg.seed, 300);
    let sched = Schedule {
        total: plan.len(),
        base: cfg.stage1_lr,
        warmup: cfg.warmup_fraction,
    };
    let steps = optimize(&mut sys.main, &sched, cfg.weight_decay, "pre", report, |m, step| {
        Ok((align_batch(m, ds, &plan[step])?, "align".to_string()))
    })?;
    sys.main.apply_mask(&FreezeMask::ALL);
    train_asr(sys, ds, split, cfg, report)?;
    Ok(steps)
}

/// Stage 2: task-dispatched fine-tuning of the main model, plus the
/// projection arm. Returns the main-model step count and loss telemetry.
pub fn finetune_stage(
    sys: &mut SpeechTextSystem,
    ds: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
    report: &mut TrainReport,
) -> Result<(usize, LossTelemetry)> {
    cfg.validate()?;
    check_compatible(sys, ds)?;
    sys.main.apply_mask(&cfg.stage2_trainable);
    let plan = multitask_plan(ds, split, cfg, cfg.epochs_per_stage, 0)?;
    let mut telemetry = LossTelemetry::default();
    let steps = finetune_on_batches(&mut sys.main, ds, &plan, cfg, cfg.stage2_lr, "fine", report, &mut telemetry)?;
    sys.main.apply_mask(&FreezeMask::ALL);
    train_projection(sys, ds, split, cfg, report)?;
    sys.projection.net.apply_mask(&FreezeMask::ALL);
    Ok((steps, telemetry))
}

/// Runs the stages selected by `ablation`, handing each finished stage to
/// `sink` with its tag and cumulative main-model step count.
pub fn train_all(
    sys: &mut SpeechTextSystem,
    ds: &Dataset,
    cfg: &TrainConfig,
    ablation: Ablation,
    report: &mut TrainReport,
    mut sink: impl FnMut(&str, &SpeechTextSystem, u64) -> Result<()>,
) -> Result<()> {
    let split = split_utterances(ds);
    let mut steps = 0u64;
    if ablation != Ablation::Only2 {
        steps += pretrain_stage(sys, ds, &split, cfg, report)? as u64;
        sink(STAGE1_TAG, sys, steps)?;
    }
    if ablation != Ablation::Only1 {
        steps += finetune_stage(sys, ds, &split, cfg, report)?.0 as u64;
        sink(STAGE2_TAG, sys, steps)?;
    }
    Ok(())
}
