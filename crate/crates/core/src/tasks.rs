//! Multi-task objective: which media streams a task generates, image
//! conditioning on the first video frame, and the weighted sum of per-task
//! flow-matching losses.

use std::fmt;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::flow::{fm_loss_graph, interpolate, sample_t, LossTerm};
use crate::mmdit::{patchify, MMDiT, ModelInput};
use crate::numerics::{Element, Graph, Tensor, Var};
use crate::synthdata::SynthSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    T2V,
    T2A,
    T2AV,
    I2V,
    I2AV,
}

impl TaskKind {
    /// Canonical order, also the column order of the metrics log.
    pub const ALL: [TaskKind; 5] = [TaskKind::T2V, TaskKind::T2A, TaskKind::T2AV, TaskKind::I2V, TaskKind::I2AV];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn uses_video(self) -> bool {
        !matches!(self, TaskKind::T2A)
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, TaskKind::T2A | TaskKind::T2AV | TaskKind::I2AV)
    }

    pub fn image_conditioned(self) -> bool {
        matches!(self, TaskKind::I2V | TaskKind::I2AV)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::T2V => "t2v",
            TaskKind::T2A => "t2a",
            TaskKind::T2AV => "t2av",
            TaskKind::I2V => "i2v",
            TaskKind::I2AV => "i2av",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        TaskKind::ALL.into_iter().find(|t| t.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

/// A task plus its image condition, present exactly for I2V and I2AV.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec<T> {
    pub kind: TaskKind,
    /// Clean first-frame latent `[H, W, C]`.
    pub image_condition: Option<Tensor<T>>,
}

impl<T: Element> TaskSpec<T> {
    pub fn new(kind: TaskKind, image_condition: Option<Tensor<T>>) -> Result<Self> {
        if kind.image_conditioned() != image_condition.is_some() {
            return Err(Error::Task(if kind.image_conditioned() {
                format!("{kind} requires an image condition")
            } else {
                format!("{kind} takes no image condition")
            }));
        }
        Ok(Self { kind, image_condition })
    }

    pub fn text(kind: TaskKind) -> Result<Self> {
        Self::new(kind, None)
    }
}

/// Per-task weights of the overall objective; all 1.0 by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights(pub [f64; 5]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([1.0; 5])
    }
}

impl LossWeights {
    pub fn new(weights: [f64; 5]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Invalid(format!(
                "loss weights must be nonnegative with one positive, got {weights:?}"
            )));
        }
        Ok(LossWeights(weights))
    }

    pub fn get(&self, task: TaskKind) -> f64 {
        self.0[task.index()]
    }
}

/// Replaces temporal slice 0 of `x_t: [T, H, W, C]` with `frame: [H, W, C]`.
pub fn apply_image_conditioning<T: Element>(x_t: &Tensor<T>, frame: &Tensor<T>) -> Result<Tensor<T>> {
    if x_t.rank() != 4 || frame.shape() != &x_t.shape()[1..] {
        return Err(shape_err!(
            "image condition {:?} does not match a frame of {:?}",
            frame.shape(),
            x_t.shape()
        ));
    }
    let mut out = x_t.clone();
    out.data_mut()[..frame.numel()].copy_from_slice(frame.data());
    Ok(out)
}

/// Per-element loss weights for the media streams of a task: `None` for a
/// stream the task does not generate; for image-conditioned tasks the tokens
/// of frame 0 get weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MediaLossMask<T> {
    pub video: Option<Tensor<T>>,
    pub audio: Option<Tensor<T>>,
}

/// Loss masks for predictions shaped `video: [L_V, D_v]`, `audio: [L_A, D_a]`.
/// `frame_tokens` is the number of video tokens per frame.
pub fn media_loss_mask<T: Element>(
    task: TaskKind,
    video_shape: &[usize],
    audio_shape: &[usize],
    frame_tokens: usize,
) -> Result<MediaLossMask<T>> {
    let video = if task.uses_video() {
        let [len, width] = *video_shape else {
            return Err(shape_err!("video prediction must be rank 2, got {video_shape:?}"));
        };
        if len == 0 {
            return Err(Error::Task(format!("{task} prediction has no video tokens")));
        }
        let skip = if task.image_conditioned() { frame_tokens } else { 0 };
        if skip >= len {
            return Err(Error::Task(format!("{task} leaves no unconditioned video frame")));
        }
        Some(Tensor::from_fn(&[len, width], |i| if i / width < skip { T::zero() } else { T::one() }))
    } else {
        None
    };
    let audio = if task.uses_audio() {
        if audio_shape.len() != 2 || audio_shape[0] == 0 {
            return Err(Error::Task(format!("{task} prediction has no audio tokens")));
        }
        Some(Tensor::ones(audio_shape))
    } else {
        None
    };
    Ok(MediaLossMask { video, audio })
}

/// Applies the task's loss mask to a prediction pair: dropped streams come
/// back as `None`, conditioned video tokens are zeroed.
pub fn mask_media_loss<T: Element>(
    video: &Tensor<T>,
    audio: &Tensor<T>,
    task: TaskKind,
    frame_tokens: usize,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let mask = media_loss_mask::<T>(task, video.shape(), audio.shape(), frame_tokens)?;
    let apply = |x: &Tensor<T>, m: Option<Tensor<T>>| -> Result<Option<Tensor<T>>> {
        m.map(|m| x.zip_map(&m, |a, b| a * b)).transpose()
    };
    Ok((apply(video, mask.video)?, apply(audio, mask.audio)?))
}

/// Noise and time for one flow-matching draw on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw<T> {
    pub t: f64,
    pub video_noise: Tensor<T>,
    pub audio_noise: Tensor<T>,
}

impl<T: Element> FlowDraw<T> {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, video_shape: &[usize], audio_shape: &[usize]) -> Self {
        let t = sample_t(rng);
        Self {
            t,
            video_noise: Tensor::randn(video_shape, rng),
            audio_noise: Tensor::randn(audio_shape, rng),
        }
    }

    pub fn for_sample<R: Rng + ?Sized>(rng: &mut R, sample: &SynthSample) -> Self {
        Self::sample(rng, sample.video_latent.shape(), sample.audio_latent.shape())
    }
}

/// Model input and regression targets for one sample under one task.
#[derive(Debug, Clone)]
pub struct PreparedExample<T> {
    pub input: ModelInput<T>,
    pub video_target: Tensor<T>,
    pub audio_target: Tensor<T>,
    pub mask: MediaLossMask<T>,
}

/// Builds interpolants `x_t = (1-t)·x0 + t·x1` and targets `u = x1 - x0` for
/// both media streams. Streams the task does not generate are still fed to
/// the model (the attention mask hides them); for image-conditioned tasks
/// frame 0 of the video interpolant is the clean latent.
pub fn prepare_example<T: Element>(
    sample: &SynthSample,
    task: &TaskSpec<T>,
    draw: &FlowDraw<T>,
    patch_size: usize,
) -> Result<PreparedExample<T>> {
    let x1v: Tensor<T> = sample.video_latent.cast();
    let x1a: Tensor<T> = sample.audio_latent.cast();
    let mut xv = interpolate(&draw.video_noise, &x1v, draw.t)?;
    let xa = interpolate(&draw.audio_noise, &x1a, draw.t)?;
    if let Some(frame) = &task.image_condition {
        xv = apply_image_conditioning(&xv, frame)?;
    }
    let uv = x1v.zip_map(&draw.video_noise, |a, b| a - b)?;
    let ua = x1a.zip_map(&draw.audio_noise, |a, b| a - b)?;
    let video_target = patchify(&uv, patch_size)?;
    let [_, h, w, _] = *x1v.shape() else {
        return Err(shape_err!("video latent must be rank 4"));
    };
    let frame_tokens = (h / patch_size) * (w / patch_size);
    let mask = media_loss_mask(task.kind, video_target.shape(), ua.shape(), frame_tokens)?;
    Ok(PreparedExample {
        input: ModelInput {
            video: Some(xv),
            audio: Some(xa),
            video_caption: sample.video_caption.clone(),
            audio_caption: sample.audio_caption.clone(),
        },
        video_target,
        audio_target: ua,
        mask,
    })
}

/// Flow-matching loss of one sample under one task, recorded on `g`.
pub fn task_loss_graph<T: Element>(
    g: &mut Graph<T>,
    model: &MMDiT<T>,
    p: &[Var],
    sample: &SynthSample,
    task: &TaskSpec<T>,
    draw: &FlowDraw<T>,
) -> Result<Var> {
    let ex = prepare_example(sample, task, draw, model.config().patch_size)?;
    let out = model.forward_graph(g, p, &ex.input, draw.t, task.kind)?;
    let mut terms = Vec::with_capacity(2);
    if let Some(w) = &ex.mask.video {
        terms.push(LossTerm { prediction: out.video, target: &ex.video_target, weights: Some(w) });
    }
    if let Some(w) = &ex.mask.audio {
        terms.push(LossTerm { prediction: out.audio, target: &ex.audio_target, weights: Some(w) });
    }
    fm_loss_graph(g, &terms)
}

pub fn task_loss<T: Element>(model: &MMDiT<T>, sample: &SynthSample, task: &TaskSpec<T>, draw: &FlowDraw<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let loss = task_loss_graph(&mut g, model, &p, sample, task, draw)?;
    Ok(g.value(loss).item().to_f64().unwrap())
}

/// One `(sample, task, draw)` entry of a multi-task batch.
pub struct BatchItem<'a, T> {
    pub sample: &'a SynthSample,
    pub task: TaskSpec<T>,
    pub draw: FlowDraw<T>,
}

/// `Σ_task weight_task · mean(loss of that task's items)` over the tasks
/// present in the batch.
pub fn overall_loss_graph<T: Element>(
    g: &mut Graph<T>,
    model: &MMDiT<T>,
    p: &[Var],
    batch: &[BatchItem<'_, T>],
    weights: &LossWeights,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Invalid("overall loss of an empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for kind in TaskKind::ALL {
        let items: Vec<&BatchItem<T>> = batch.iter().filter(|b| b.task.kind == kind).collect();
        if items.is_empty() {
            continue;
        }
        let mut sum: Option<Var> = None;
        for item in &items {
            let l = task_loss_graph(g, model, p, item.sample, &item.task, &item.draw)?;
            sum = Some(match sum {
                Some(s) => g.add(s, l)?,
                None => l,
            });
        }
        let scale = T::from_f64_lossy(weights.get(kind) / items.len() as f64);
        let term = g.scale(sum.expect("nonempty"), scale);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty batch"))
}

pub fn overall_loss<T: Element>(model: &MMDiT<T>, batch: &[BatchItem<'_, T>], weights: &LossWeights) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let loss = overall_loss_graph(&mut g, model, &p, batch, weights)?;
    Ok(g.value(loss).item().to_f64().unwrap())
}

/// Combines precomputed per-task mean losses with weights.
pub fn combine_task_losses(per_task: &[(TaskKind, f64)], weights: &LossWeights) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Invalid("no task losses to combine".into()));
    }
    Ok(per_task.iter().map(|(k, l)| weights.get(*k) * l).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_stream_usage() {
        assert!(TaskKind::T2V.uses_video() && !TaskKind::T2V.uses_audio());
        assert!(!TaskKind::T2A.uses_video() && TaskKind::T2A.uses_audio());
        assert!(TaskKind::I2AV.uses_video() && TaskKind::I2AV.uses_audio() && TaskKind::I2AV.image_conditioned());
        for t in TaskKind::ALL {
            assert_eq!(TaskKind::parse(t.as_str()), Some(t));
        }
        assert_eq!(TaskKind::parse("T2AV"), Some(TaskKind::T2AV));
        assert_eq!(TaskKind::parse("v2a"), None);
    }

    #[test]
    fn image_condition_presence_is_enforced() {
        let frame = Tensor::<f64>::zeros(&[2, 2, 3]);
        assert!(TaskSpec::new(TaskKind::I2V, Some(frame.clone())).is_ok());
        assert!(TaskSpec::<f64>::new(TaskKind::I2V, None).is_err());
        assert!(TaskSpec::new(TaskKind::T2V, Some(frame)).is_err());
    }

    #[test]
    fn image_conditioning_replaces_only_frame_zero() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 2, 1], |i| i as f64);
        let frame = Tensor::<f64>::full(&[2, 2, 1], -1.0);
        let out = apply_image_conditioning(&x, &frame).unwrap();
        assert_eq!(&out.data()[..4], frame.data());
        assert_eq!(&out.data()[4..], &x.data()[4..]);
        assert!(apply_image_conditioning(&x, &Tensor::zeros(&[2, 1, 1])).is_err());
    }

    #[test]
    fn loss_masks_follow_the_task() {
        let v = Tensor::<f64>::ones(&[6, 2]);
        let a = Tensor::<f64>::ones(&[4, 3]);
        let (mv, ma) = mask_media_loss(&v, &a, TaskKind::T2A, 2).unwrap();
        assert!(mv.is_none());
        assert_eq!(ma.unwrap(), a);
        let (mv, ma) = mask_media_loss(&v, &a, TaskKind::T2AV, 2).unwrap();
        assert!(mv.is_some() && ma.is_some());
        let (mv, ma) = mask_media_loss(&v, &a, TaskKind::I2V, 2).unwrap();
        assert!(ma.is_none());
        let mv = mv.unwrap();
        assert!(mv.data()[..4].iter().all(|&x| x == 0.0));
        assert!(mv.data()[4..].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::new([0.0; 5]).is_err());
        assert!(LossWeights::new([1.0, -1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(LossWeights::new([0.0, 0.0, 2.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn combining_unit_weights_sums() {
        let losses: Vec<_> = TaskKind::ALL.into_iter().zip([1.0, 2.0, 3.0, 4.0, 5.0]).collect();
        assert_eq!(combine_task_losses(&losses, &LossWeights::default()).unwrap(), 15.0);
        assert!(combine_task_losses(&[], &LossWeights::default()).is_err());
    }
}
