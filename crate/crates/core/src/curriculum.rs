//! Three-stage training schedule: pretraining over all tasks, validation
//! driven task rebalancing, and fine-tuning on quality-filtered data.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mmdit::MMDiT;
use crate::numerics::{Element, Graph, Tensor};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::synthdata::SynthSample;
use crate::tasks::{task_loss, task_loss_graph, FlowDraw, TaskKind, TaskSpec};

pub const CSV_HEADER: &str = "step,stage,task,loss,w_t2v,w_t2a,w_t2av,w_i2v,w_i2av";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn next(self) -> Option<Stage> {
        match self {
            Stage::I => Some(Stage::II),
            Stage::II => Some(Stage::III),
            Stage::III => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage_steps: [usize; 3],
    pub learning_rates: [f64; 3],
    /// Linear warm-up at the start of training.
    pub warmup_steps: usize,
    /// Validation and (in stage II) rebalancing period.
    pub rebalance_period: usize,
    pub quality_threshold: f64,
    pub temperature: f64,
    pub weight_floor: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    /// One CSV row every `log_period` steps.
    pub log_period: usize,
    /// Validation samples per task.
    pub val_samples: usize,
    /// Size of the training corpus.
    pub train_samples: usize,
    /// Tasks that may be sampled at all.
    pub enabled_tasks: [bool; 5],
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage_steps: [2000, 1000, 500],
            learning_rates: [1e-3, 5e-4, 2e-4],
            warmup_steps: 100,
            rebalance_period: 100,
            quality_threshold: 0.5,
            temperature: 1.0,
            weight_floor: 0.02,
            batch_size: 8,
            grad_clip: 1.0,
            log_period: 10,
            val_samples: 8,
            train_samples: 4000,
            enabled_tasks: [true; 5],
        }
    }
}

impl StageConfig {
    pub fn total_steps(&self) -> usize {
        self.stage_steps.iter().sum()
    }

    /// Step at which `stage` ends.
    pub fn stage_end(&self, stage: Stage) -> usize {
        self.stage_steps[..=stage.index()].iter().sum()
    }

    pub fn enabled_count(&self) -> usize {
        self.enabled_tasks.iter().filter(|&&e| e).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.rebalance_period == 0 || self.log_period == 0 || self.batch_size == 0 {
            return bad("rebalance_period, log_period and batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.quality_threshold) {
            return bad(format!("quality_threshold {} outside [0, 1]", self.quality_threshold));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        let n = self.enabled_count();
        if n == 0 {
            return bad("no task enabled".into());
        }
        if !(self.weight_floor >= 0.0 && self.weight_floor * n as f64 <= 1.0) {
            return bad(format!("weight_floor {} infeasible for {n} tasks", self.weight_floor));
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return bad(format!("learning rates must be finite and nonnegative, got {:?}", self.learning_rates));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.val_samples == 0 || self.train_samples == 0 {
            return bad("val_samples and train_samples must be positive".into());
        }
        Ok(())
    }
}

/// Raises every enabled weight to at least `floor` and renormalizes so the
/// result still sums to 1 with no enabled weight below `floor`; disabled
/// entries become 0.
pub fn apply_floor(weights: [f64; 5], floor: f64, enabled: [bool; 5]) -> Result<[f64; 5]> {
    let n = enabled.iter().filter(|&&e| e).count();
    if n == 0 || floor * n as f64 > 1.0 + 1e-12 {
        return Err(Error::Curriculum(format!("floor {floor} infeasible for {n} tasks")));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Curriculum(format!("invalid weights {weights:?}")));
    }
    let mut floored = [false; 5];
    loop {
        let fixed = floored.iter().filter(|&&f| f).count() as f64 * floor;
        let free: f64 = (0..5).filter(|&i| enabled[i] && !floored[i]).map(|i| weights[i]).sum();
        let rest = 1.0 - fixed;
        let mut out = [0.0; 5];
        let mut changed = false;
        for i in (0..5).filter(|&i| enabled[i]) {
            if floored[i] {
                out[i] = floor;
                continue;
            }
            let free_n = (0..5).filter(|&j| enabled[j] && !floored[j]).count() as f64;
            out[i] = if free > 0.0 { rest * weights[i] / free } else { rest / free_n };
            if out[i] < floor {
                floored[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(out);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub stage: Stage,
    pub task_weights: [f64; 5],
    /// `(step, per-task validation loss)`; NaN for disabled tasks.
    pub metric_history: Vec<(usize, [f64; 5])>,
    pub step: usize,
    pub weight_floor: f64,
    pub temperature: f64,
    pub enabled_tasks: [bool; 5],
}

impl CurriculumState {
    pub fn new(cfg: &StageConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.enabled_tasks;
        let uniform = e.map(|on| if on { 1.0 } else { 0.0 });
        Ok(Self {
            stage: Stage::I,
            task_weights: apply_floor(uniform, cfg.weight_floor, e)?,
            metric_history: Vec::new(),
            step: 0,
            weight_floor: cfg.weight_floor,
            temperature: cfg.temperature,
            enabled_tasks: e,
        })
    }

    /// Replaces the weights (after flooring and renormalization).
    pub fn set_weights(&mut self, weights: [f64; 5]) -> Result<()> {
        self.task_weights = apply_floor(weights, self.weight_floor, self.enabled_tasks)?;
        Ok(())
    }

    /// Categorical draw from the task weights.
    pub fn next_task<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskKind {
        let u: f64 = rng.random::<f64>() * self.task_weights.iter().sum::<f64>();
        let mut acc = 0.0;
        let mut last = TaskKind::T2V;
        for k in TaskKind::ALL {
            if self.task_weights[k.index()] <= 0.0 {
                continue;
            }
            acc += self.task_weights[k.index()];
            last = k;
            if u < acc {
                return k;
            }
        }
        last
    }

    /// New weights `∝ exp((loss_i - min loss) / τ)` over enabled tasks,
    /// floored and renormalized. Stores and returns them.
    pub fn rebalance(&mut self, metrics: &[f64; 5]) -> Result<[f64; 5]> {
        let e = self.enabled_tasks;
        if let Some(i) = (0..5).find(|&i| e[i] && !metrics[i].is_finite()) {
            return Err(Error::Curriculum(format!(
                "non-finite validation metric {} for {}",
                metrics[i],
                TaskKind::ALL[i]
            )));
        }
        let min = (0..5).filter(|&i| e[i]).map(|i| metrics[i]).fold(f64::INFINITY, f64::min);
        let raw: [f64; 5] = std::array::from_fn(|i| {
            if e[i] {
                ((metrics[i] - min) / self.temperature).exp()
            } else {
                0.0
            }
        });
        self.set_weights(raw)?;
        Ok(self.task_weights)
    }

    /// Moves to the next stage once its step budget is reached. Weights
    /// are carried over.
    pub fn advance_stage(&mut self, cfg: &StageConfig) -> Result<Stage> {
        let Some(next) = self.stage.next() else {
            return Err(Error::Curriculum("stage III is terminal".into()));
        };
        let end = cfg.stage_end(self.stage);
        if self.step < end {
            return Err(Error::Curriculum(format!(
                "stage {} runs until step {end}, now at {}",
                self.stage, self.step
            )));
        }
        self.stage = next;
        Ok(next)
    }
}

/// Samples whose quality tag is at least `threshold`, in order.
pub fn filter_quality(samples: &[SynthSample], threshold: f64) -> Vec<SynthSample> {
    samples.iter().filter(|s| s.quality >= threshold).cloned().collect()
}

/// Fixed validation problems: for every task, the same samples, noise and
/// times at every evaluation.
#[derive(Debug, Clone)]
pub struct ValidationSet<T> {
    items: Vec<(TaskSpec<T>, usize, FlowDraw<T>)>,
    samples: Vec<SynthSample>,
}

impl<T: Element> ValidationSet<T> {
    pub fn new(samples: Vec<SynthSample>, tasks: &[TaskKind], seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty validation set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = Vec::new();
        for &kind in tasks {
            for (i, s) in samples.iter().enumerate() {
                items.push((task_spec(kind, s)?, i, FlowDraw::for_sample(&mut rng, s)));
            }
        }
        Ok(Self { items, samples })
    }

    /// Mean loss per task; NaN for tasks not in the set.
    pub fn evaluate(&self, model: &MMDiT<T>) -> Result<[f64; 5]> {
        let mut sums = [0.0; 5];
        let mut counts = [0usize; 5];
        for (task, i, draw) in &self.items {
            let l = task_loss(model, &self.samples[*i], task, draw)?;
            sums[task.kind.index()] += l;
            counts[task.kind.index()] += 1;
        }
        Ok(std::array::from_fn(|k| if counts[k] > 0 { sums[k] / counts[k] as f64 } else { f64::NAN }))
    }
}

/// The task spec for `kind` on `sample`, taking frame 0 as the image
/// condition where needed.
pub fn task_spec<T: Element>(kind: TaskKind, sample: &SynthSample) -> Result<TaskSpec<T>> {
    let cond = if kind.image_conditioned() {
        let [_, h, w, c] = *sample.video_latent.shape() else {
            return Err(Error::Shape("video latent must be rank 4".into()));
        };
        let frame = &sample.video_latent.data()[..h * w * c];
        Some(Tensor::<f64>::new(&[h, w, c], frame.to_vec())?.cast())
    } else {
        None
    };
    TaskSpec::new(kind, cond)
}

/// Output of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Metrics CSV including the header line.
    pub csv: String,
    /// Per-task validation losses before the first update.
    pub initial_validation: [f64; 5],
    pub final_validation: [f64; 5],
}

/// Runs all three stages on `model`. `on_checkpoint(step, model)` is called
/// every `checkpoint_every` steps (when nonzero) and never for the final
/// state, which the caller holds.
pub fn train<T: Element>(
    model: &mut MMDiT<T>,
    train_set: &[SynthSample],
    val_set: &[SynthSample],
    cfg: &StageConfig,
    state: &mut CurriculumState,
    seed: u64,
    checkpoint_every: usize,
    on_checkpoint: &mut dyn FnMut(usize, &MMDiT<T>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let enabled: Vec<TaskKind> = TaskKind::ALL.into_iter().filter(|k| state.enabled_tasks[k.index()]).collect();
    let val = ValidationSet::<T>::new(val_set.to_vec(), &enabled, seed ^ 0x5eed_0001)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(AdamConfig::default(), model.params().tensors());
    let mut pool: Vec<SynthSample> = train_set.to_vec();
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');

    let initial_validation = val.evaluate(model)?;
    state.metric_history.push((state.step, initial_validation));
    if state.stage == Stage::III {
        pool = filter_quality(train_set, cfg.quality_threshold);
    }

    while state.step < cfg.total_steps() {
        while state.stage != Stage::III && state.step >= cfg.stage_end(state.stage) {
            if state.advance_stage(cfg)? == Stage::III {
                pool = filter_quality(train_set, cfg.quality_threshold);
                if pool.is_empty() {
                    return Err(Error::Curriculum(format!(
                        "quality threshold {} leaves no training samples",
                        cfg.quality_threshold
                    )));
                }
            }
        }
        let kind = state.next_task(&mut rng);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let mut total = None;
        for _ in 0..cfg.batch_size {
            let sample = &pool[rng.random_range(0..pool.len())];
            let task = task_spec::<T>(kind, sample)?;
            let draw = FlowDraw::for_sample(&mut rng, sample);
            let l = task_loss_graph(&mut g, model, &p, sample, &task, &draw)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("batch_size >= 1"), T::from_f64_lossy(1.0 / cfg.batch_size as f64));
        let value = g.value(loss).item().to_f64().unwrap();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {value} at step {} (stage {}, task {kind})",
                state.step, state.stage
            )));
        }
        g.backward(loss)?;
        let mut grads: Vec<Tensor<T>> = p.iter().map(|&v| g.grad(v)).collect();
        drop(g);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let warm = if cfg.warmup_steps > 0 { ((state.step + 1) as f64 / cfg.warmup_steps as f64).min(1.0) } else { 1.0 };
        adam.step(model.params_mut().tensors_mut(), &grads, cfg.learning_rates[state.stage.index()] * warm)?;

        if state.step % cfg.log_period == 0 {
            let w = state.task_weights;
            let _ = writeln!(
                csv,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                state.step,
                state.stage,
                kind.as_str(),
                value,
                w[0],
                w[1],
                w[2],
                w[3],
                w[4]
            );
        }
        state.step += 1;

        if state.step % cfg.rebalance_period == 0 && state.step < cfg.total_steps() {
            let metrics = val.evaluate(model)?;
            state.metric_history.push((state.step, metrics));
            if state.stage == Stage::II {
                state.rebalance(&metrics)?;
            }
        }
        if checkpoint_every > 0 && state.step % checkpoint_every == 0 && state.step < cfg.total_steps() {
            on_checkpoint(state.step, model)?;
        }
    }
    let final_validation = val.evaluate(model)?;
    state.metric_history.push((state.step, final_validation));
    Ok(TrainLog { csv, initial_validation, final_validation })
}
