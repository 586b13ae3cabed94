//! Corpus filtering: energy VAD segmentation, quality thresholding and a
//! Tukey-fence filter on mean phoneme duration, applied in that order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::synth::SpeechUtterance;
use crate::tensor::Tensor2D;

pub const DEFAULT_QUALITY_THRESHOLD: f64 = 3.0;
pub const DEFAULT_IQR_MULTIPLIER: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    LowQuality,
    DurationOutlier,
    EmptyAfterVad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub utt_id: u32,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub input: usize,
    pub output: usize,
    pub rejected: Vec<Rejection>,
}

impl StageReport {
    fn new(stage: &str, input: usize, output: usize, rejected: Vec<Rejection>) -> Self {
        Self { stage: stage.to_string(), input, output, rejected }
    }

    /// Segmentation may emit several outputs per input, so only stages that
    /// map one input to at most one output conserve counts exactly.
    pub fn conserves(&self) -> bool {
        self.stage == "vad" || self.input == self.output + self.rejected.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub stages: Vec<StageReport>,
}

impl FilterReport {
    pub fn rejected(&self) -> impl Iterator<Item = &Rejection> {
        self.stages.iter().flat_map(|s| s.rejected.iter())
    }

    /// Every input id appears exactly once among `survivors` and rejections.
    pub fn check_conservation(&self, input_ids: &[u32], survivors: &[SpeechUtterance]) -> Result<()> {
        let mut seen = BTreeSet::new();
        let surviving: BTreeSet<u32> = survivors.iter().map(|u| u.utt_id).collect();
        for id in surviving.iter().copied().chain(self.rejected().map(|r| r.utt_id)) {
            if !seen.insert(id) {
                return Err(Error::Dataset(format!("utterance {id} accounted for twice")));
            }
        }
        let inputs: BTreeSet<u32> = input_ids.iter().copied().collect();
        if seen != inputs {
            return Err(Error::Dataset("filter report does not cover the input set".into()));
        }
        for s in &self.stages {
            if !s.conserves() {
                return Err(Error::Dataset(format!("stage {} loses utterances", s.stage)));
            }
        }
        Ok(())
    }
}

/// Splits on maximal runs of frames with L2 energy below `threshold`.
/// Segments shorter than `min_len` are dropped.
pub fn vad_segment(utt: &SpeechUtterance, energy_threshold: f64, min_len: usize) -> Result<Vec<SpeechUtterance>> {
    if !(energy_threshold >= 0.0) {
        return Err(Error::range("energy_threshold", energy_threshold, "[0, inf)"));
    }
    let voiced: Vec<bool> = utt
        .frames
        .iter_rows()
        .map(|r| ops::l2_norm(r) as f64 >= energy_threshold)
        .collect();
    if voiced.iter().all(|&v| v) {
        return Ok(if utt.num_frames() >= min_len { vec![utt.clone()] } else { vec![] });
    }
    let mut runs = Vec::new();
    let mut start = None;
    for (t, &v) in voiced.iter().chain([&false]).enumerate() {
        match (v, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push(s..t);
                start = None;
            }
            _ => {}
        }
    }
    runs.into_iter()
        .filter(|r| r.len() >= min_len)
        .map(|r| {
            let cols = utt.frames.cols();
            let frames = Tensor2D::new(r.len(), cols, utt.frames.data()[r.start * cols..r.end * cols].to_vec())?;
            Ok(SpeechUtterance { frames, ..utt.clone() })
        })
        .collect()
}

pub fn quality_filter(utts: Vec<SpeechUtterance>, threshold: f64) -> Result<(Vec<SpeechUtterance>, StageReport)> {
    if !(1.0..=5.0).contains(&threshold) {
        return Err(Error::range("quality threshold", threshold, "[1, 5]"));
    }
    let n = utts.len();
    let (kept, dropped): (Vec<_>, Vec<_>) = utts.into_iter().partition(|u| u.quality_score > threshold);
    let rejected = dropped
        .iter()
        .map(|u| Rejection { utt_id: u.utt_id, reason: RejectReason::LowQuality })
        .collect();
    let report = StageReport::new("quality", n, kept.len(), rejected);
    Ok((kept, report))
}

/// Quartile by linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Upper Tukey fence `Q3 + multiplier * IQR` over `values`.
pub fn tukey_upper_fence(values: &[f64], multiplier: f64) -> Result<f64> {
    if values.len() < 4 {
        return Err(Error::InsufficientSample { needed: 4, got: values.len() });
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.75));
    Ok(q3 + multiplier * (q3 - q1))
}

pub fn duration_iqr_filter(
    utts: Vec<SpeechUtterance>,
    multiplier: f64,
) -> Result<(Vec<SpeechUtterance>, StageReport)> {
    let durations: Vec<f64> = utts.iter().map(|u| u.mean_phoneme_duration()).collect();
    let fence = tukey_upper_fence(&durations, multiplier)?;
    let n = utts.len();
    let mut kept = Vec::with_capacity(n);
    let mut rejected = Vec::new();
    for (u, d) in utts.into_iter().zip(durations) {
        if d > fence {
            rejected.push(Rejection { utt_id: u.utt_id, reason: RejectReason::DurationOutlier });
        } else {
            kept.push(u);
        }
    }
    let report = StageReport::new("duration_iqr", n, kept.len(), rejected);
    Ok((kept, report))
}

/// Source separation and diarization: synthetic speech is single-speaker.
pub fn separate_sources(utts: Vec<SpeechUtterance>) -> Vec<SpeechUtterance> {
    utts
}

pub fn diarize(utts: Vec<SpeechUtterance>) -> Vec<SpeechUtterance> {
    utts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub energy_threshold: f64,
    pub min_segment_frames: usize,
    pub quality_threshold: f64,
    pub iqr_multiplier: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            energy_threshold: 0.0,
            min_segment_frames: 5,
            quality_threshold: DEFAULT_QUALITY_THRESHOLD,
            iqr_multiplier: DEFAULT_IQR_MULTIPLIER,
        }
    }
}

/// VAD, then quality, then duration IQR. Output order follows input id.
pub fn filter_pipeline(utts: Vec<SpeechUtterance>, cfg: &FilterConfig) -> Result<(Vec<SpeechUtterance>, FilterReport)> {
    let mut utts = diarize(separate_sources(utts));
    utts.sort_by_key(|u| u.utt_id);
    let n = utts.len();
    let mut segmented = Vec::with_capacity(n);
    let mut vad_rejected = Vec::new();
    for u in &utts {
        let segs = vad_segment(u, cfg.energy_threshold, cfg.min_segment_frames)?;
        if segs.is_empty() {
            vad_rejected.push(Rejection { utt_id: u.utt_id, reason: RejectReason::EmptyAfterVad });
        }
        segmented.extend(segs);
    }
    let mut report = FilterReport::default();
    report.stages.push(StageReport::new("vad", n, segmented.len(), vad_rejected));
    let (kept, q) = quality_filter(segmented, cfg.quality_threshold)?;
    report.stages.push(q);
    let (kept, d) = duration_iqr_filter(kept, cfg.iqr_multiplier)?;
    report.stages.push(d);
    Ok((kept, report))
}
