//! Conditional flow matching on the linear path `x_t = (1-t)·x0 + t·x1`
//! with target velocity `u = x1 - x0`, and explicit Euler integration of the
//! learned velocity from noise at `t = 0` to data at `t = 1`.

pub mod toy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::mmdit::{unpatchify, MMDiT, ModelInput};
use crate::numerics::{Element, Graph, Tensor, Var};
use crate::tasks::{apply_image_conditioning, TaskKind, TaskSpec};

/// One noise/data pair on the interpolation path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch<T> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: f64,
    pub x_t: Tensor<T>,
    pub u: Tensor<T>,
}

impl<T: Element> FlowBatch<T> {
    pub fn new(x0: Tensor<T>, x1: Tensor<T>, t: f64) -> Result<Self> {
        let x_t = interpolate(&x0, &x1, t)?;
        let u = x1.zip_map(&x0, |a, b| a - b)?;
        Ok(Self { x0, x1, t, x_t, u })
    }
}

pub fn interpolate<T: Element>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    let (a, b) = (T::from_f64_lossy(1.0 - t), T::from_f64_lossy(t));
    x0.zip_map(x1, |p, q| a * p + b * q)
}

/// Uniform draw from the open interval (0, 1).
pub fn sample_t<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// One stream's contribution to the flow-matching loss.
pub struct LossTerm<'a, T> {
    pub prediction: Var,
    pub target: &'a Tensor<T>,
    /// Per-element 0/1 weights; `None` keeps every element.
    pub weights: Option<&'a Tensor<T>>,
}

/// Mean squared error over all kept elements of all terms.
pub fn fm_loss_graph<T: Element>(g: &mut Graph<T>, terms: &[LossTerm<'_, T>]) -> Result<Var> {
    let mut count = 0.0;
    let mut total: Option<Var> = None;
    for term in terms {
        if g.shape(term.prediction) != term.target.shape() {
            return Err(shape_err!(
                "prediction {:?} vs target {:?}",
                g.shape(term.prediction),
                term.target.shape()
            ));
        }
        let target = g.constant(term.target.clone());
        let diff = g.sub(term.prediction, target)?;
        let mut sq = g.square(diff);
        match term.weights {
            Some(w) => {
                count += w.data().iter().map(|x| x.to_f64().unwrap()).sum::<f64>();
                let wv = g.constant(w.clone());
                sq = g.mul(sq, wv)?;
            }
            None => count += term.target.numel() as f64,
        }
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) if count > 0.0 => Ok(g.scale(t, T::from_f64_lossy(1.0 / count))),
        _ => Err(Error::Task("flow-matching loss over zero unmasked elements".into())),
    }
}

/// Value-level [`fm_loss_graph`]: `(prediction, target, weights)` triples.
pub fn fm_loss<T: Element>(terms: &[(&Tensor<T>, &Tensor<T>, Option<&Tensor<T>>)]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = terms.iter().map(|(p, _, _)| g.constant((*p).clone())).collect();
    let terms: Vec<LossTerm<T>> = terms
        .iter()
        .zip(vars)
        .map(|((_, target, weights), prediction)| LossTerm { prediction, target, weights: *weights })
        .collect();
    let loss = fm_loss_graph(&mut g, &terms)?;
    Ok(g.value(loss).item().to_f64().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Strictly increasing time grid from 0 to 1.
    pub schedule: Vec<f64>,
    pub seed: u64,
    /// Classifier-free guidance scale against empty captions; `None`
    /// disables guidance.
    pub guidance_scale: Option<f64>,
}

impl SamplerConfig {
    pub fn uniform(steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("sampler needs at least one step".into()));
        }
        Self::with_schedule((0..=steps).map(|k| k as f64 / steps as f64).collect(), seed)
    }

    pub fn with_schedule(schedule: Vec<f64>, seed: u64) -> Result<Self> {
        let cfg = Self { schedule, seed, guidance_scale: None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn steps(&self) -> usize {
        self.schedule.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.len() < 2 || s[0] != 0.0 || s[s.len() - 1] != 1.0 || s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(
                "sampler schedule must increase strictly from 0 to 1".into(),
            ));
        }
        Ok(())
    }
}

/// A time-dependent velocity over a list of state tensors.
pub trait VelocityField<T: Element> {
    fn velocity(&self, state: &[Tensor<T>], t: f64) -> Result<Vec<Tensor<T>>>;
}

/// `z ← z + (t_{k+1} - t_k)·v(z, t_k)` over `schedule`; `project` runs on the
/// initial state and after every step.
pub fn euler_integrate<T: Element, F: VelocityField<T> + ?Sized>(
    field: &F,
    mut state: Vec<Tensor<T>>,
    schedule: &[f64],
    project: &dyn Fn(&mut [Tensor<T>]) -> Result<()>,
) -> Result<Vec<Tensor<T>>> {
    project(&mut state)?;
    for w in schedule.windows(2) {
        let v = field.velocity(&state, w[0])?;
        if v.len() != state.len() {
            return Err(shape_err!("velocity has {} streams, state has {}", v.len(), state.len()));
        }
        let dt = T::from_f64_lossy(w[1] - w[0]);
        for (z, dz) in state.iter_mut().zip(&v) {
            z.axpy(dt, dz)?;
        }
        project(&mut state)?;
        if let Some(bad) = state.iter().find(|z| !z.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sampler state {:?} diverged at t = {}",
                bad.shape(),
                w[1]
            )));
        }
    }
    Ok(state)
}

/// What the generator is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions {
    pub video_caption: Vec<usize>,
    pub audio_caption: Vec<usize>,
    /// `(frames, height, width)` of the video latent to generate.
    pub video_grid: (usize, usize, usize),
    pub audio_len: usize,
}

/// Generated latents; streams outside the task are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated<T> {
    /// `[T, H, W, C_v]`.
    pub video: Option<Tensor<T>>,
    /// `[T_a, C_a]`.
    pub audio: Option<Tensor<T>>,
}

struct ModelField<'a, T> {
    model: &'a MMDiT<T>,
    cond: &'a Conditions,
    task: TaskKind,
    guidance: Option<f64>,
}

impl<T: Element> ModelField<'_, T> {
    fn input(&self, state: &[Tensor<T>], captions: bool) -> ModelInput<T> {
        let mut it = state.iter();
        let video = self.task.uses_video().then(|| it.next().cloned()).flatten();
        let audio = self.task.uses_audio().then(|| it.next().cloned()).flatten();
        let cap = |c: &Vec<usize>, on: bool| if captions && on { c.clone() } else { vec![] };
        ModelInput {
            video,
            audio,
            video_caption: cap(&self.cond.video_caption, self.task.uses_video()),
            audio_caption: cap(&self.cond.audio_caption, self.task.uses_audio()),
        }
    }

    fn predict(&self, input: &ModelInput<T>, t: f64) -> Result<Vec<Tensor<T>>> {
        let (v, a) = self.model.forward(input, t, self.task)?;
        let cfg = self.model.config();
        let mut out = Vec::with_capacity(2);
        if self.task.uses_video() {
            out.push(unpatchify(&v, self.cond.video_grid, cfg.patch_size, cfg.video_latent_channels)?);
        }
        if self.task.uses_audio() {
            out.push(a);
        }
        Ok(out)
    }
}

impl<T: Element> VelocityField<T> for ModelField<'_, T> {
    fn velocity(&self, state: &[Tensor<T>], t: f64) -> Result<Vec<Tensor<T>>> {
        let cond = self.predict(&self.input(state, true), t)?;
        let Some(scale) = self.guidance else {
            return Ok(cond);
        };
        let uncond = self.predict(&self.input(state, false), t)?;
        let s = T::from_f64_lossy(scale);
        cond.iter()
            .zip(&uncond)
            .map(|(c, u)| c.zip_map(u, |c, u| u + s * (c - u)))
            .collect()
    }
}

/// Draws `z0 ~ N(0, I)` for every stream the task generates (video first,
/// then audio, from one seeded stream) and integrates the model's velocity
/// to `t = 1`. Streams outside the task are left out of the input entirely;
/// the attention mask makes that equivalent to feeding them masked.
pub fn euler_sample<T: Element>(
    model: &MMDiT<T>,
    cond: &Conditions,
    task: &TaskSpec<T>,
    cfg: &SamplerConfig,
) -> Result<Generated<T>> {
    cfg.validate()?;
    let mcfg = model.config();
    let (frames, h, w) = cond.video_grid;
    let kind = task.kind;
    if kind.uses_audio() && cond.audio_len == 0 {
        return Err(Error::Task(format!("{kind} needs a positive audio length")));
    }
    if kind.uses_video() && frames * h * w == 0 {
        return Err(Error::Task(format!("{kind} needs a non-empty video grid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = Vec::with_capacity(2);
    if kind.uses_video() {
        state.push(Tensor::randn(&[frames, h, w, mcfg.video_latent_channels], &mut rng));
    }
    if kind.uses_audio() {
        state.push(Tensor::randn(&[cond.audio_len, mcfg.audio_latent_channels], &mut rng));
    }
    let field = ModelField { model, cond, task: kind, guidance: cfg.guidance_scale };
    let image = task.image_condition.clone();
    let project = move |s: &mut [Tensor<T>]| -> Result<()> {
        if let Some(frame) = &image {
            s[0] = apply_image_conditioning(&s[0], frame)?;
        }
        Ok(())
    };
    let mut out = euler_integrate(&field, state, &cfg.schedule, &project)?.into_iter();
    Ok(Generated {
        video: kind.uses_video().then(|| out.next()).flatten(),
        audio: kind.uses_audio().then(|| out.next()).flatten(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Vec<Tensor<f64>>);

    impl VelocityField<f64> for Constant {
        fn velocity(&self, _: &[Tensor<f64>], _: f64) -> Result<Vec<Tensor<f64>>> {
            Ok(self.0.clone())
        }
    }

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[data.len()], data).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x0 = t(&[0.3, -1.7, 2.2]);
        let x1 = t(&[5.0, 0.25, -3.0]);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(interpolate(&t(&[0.0, 0.0]), &t(&[2.0, 4.0]), 0.5).unwrap(), t(&[1.0, 2.0]));
        assert!(interpolate(&x0, &t(&[1.0]), 0.5).is_err());
        assert!(interpolate(&x0, &x1, 1.5).is_err());
    }

    #[test]
    fn flow_batch_construction() {
        let b = FlowBatch::new(t(&[1.0, 2.0]), t(&[3.0, -2.0]), 0.25).unwrap();
        assert_eq!(b.u, t(&[2.0, -4.0]));
        assert_eq!(b.x_t, t(&[1.5, 1.0]));
    }

    #[test]
    fn loss_of_oracle_and_zero_predictors() {
        let u = t(&[1.0, -2.0, 0.5, 3.0]);
        assert_eq!(fm_loss(&[(&u, &u, None)]).unwrap(), 0.0);
        let zero = Tensor::zeros(&[4]);
        let mean_sq = u.sum_squares() / 4.0;
        assert!((fm_loss(&[(&zero, &u, None)]).unwrap() - mean_sq).abs() < 1e-15);
        let w = t(&[1.0, 0.0, 0.0, 1.0]);
        assert!((fm_loss(&[(&zero, &u, Some(&w))]).unwrap() - 5.0).abs() < 1e-15);
        let none = Tensor::zeros(&[4]);
        assert!(fm_loss(&[(&zero, &u, Some(&none))]).is_err());
    }

    #[test]
    fn sample_t_is_open_and_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..1000).map(|_| sample_t(&mut a)).collect();
        let ys: Vec<f64> = (0..1000).map(|_| sample_t(&mut b)).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn sample_t_mean_is_one_half() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let mean = (0..100_000).map(|_| sample_t(&mut r)).sum::<f64>() / 1e5;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn schedule_validation() {
        assert!(SamplerConfig::uniform(0, 0).is_err());
        assert_eq!(SamplerConfig::uniform(4, 0).unwrap().schedule, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(SamplerConfig::with_schedule(vec![0.0, 0.6, 0.5, 1.0], 0).is_err());
        assert!(SamplerConfig::with_schedule(vec![0.1, 1.0], 0).is_err());
        assert!(SamplerConfig::with_schedule(vec![0.0, 0.3, 1.0], 0).is_ok());
    }

    #[test]
    fn zero_field_returns_the_initial_state() {
        let z0 = vec![t(&[0.1, -0.4]), t(&[2.0])];
        let field = Constant(vec![Tensor::zeros(&[2]), Tensor::zeros(&[1])]);
        let cfg = SamplerConfig::uniform(7, 0).unwrap();
        let out = euler_integrate(&field, z0.clone(), &cfg.schedule, &|_| Ok(())).unwrap();
        assert_eq!(out, z0);
    }

    #[test]
    fn constant_field_telescopes() {
        let z0 = vec![t(&[0.1, -0.4, 3.0])];
        let v = t(&[1.5, -2.0, 0.3]);
        let cfg = SamplerConfig::with_schedule(vec![0.0, 0.1, 0.35, 0.8, 1.0], 0).unwrap();
        let out = euler_integrate(&Constant(vec![v.clone()]), z0.clone(), &cfg.schedule, &|_| Ok(())).unwrap();
        let expect = z0[0].zip_map(&v, |a, b| a + b).unwrap();
        assert!(out[0].max_abs_diff(&expect) < 1e-6);
    }
}
