//! Command implementations behind the `avdit` binary: `train`, `sample`,
//! `eval` and `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 check failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_model, read_tensor_table, save_model, write_tensor_table};
use crate::checks::{faulty_case, model_case, op_cases, run_cases};
use crate::config::RunConfig;
use crate::curriculum::{train, CurriculumState, TrainLog, ValidationSet};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, Conditions, SamplerConfig};
use crate::mmdit::MMDiT;
use crate::numerics::Tensor;
use crate::synthdata::{
    decode_audio, decode_video, generate, generate_split, oracle_alignment, sample_events, CaptionMode, Codebooks,
    Split,
};
use crate::tasks::{TaskKind, TaskSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, error: Error::Invalid(message.into()) }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config { .. } | Error::Invalid(_) | Error::Task(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self { code, error }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

fn exit_code(r: CmdResult<i32>) -> i32 {
    match r {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

/// Reads and parses a run configuration; any failure is a usage error.
pub fn load_config(path: &Path) -> CmdResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure { code: EXIT_USAGE, error: Error::io(path, e) })?;
    RunConfig::parse(&text).map_err(|error| Failure { code: EXIT_USAGE, error })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub log: TrainLog,
    pub state: CurriculumState,
}

/// Trains per `run`, writing `checkpoint_<step>.aplo` every
/// `run.checkpoint_every` steps, `final.aplo` and `metrics.csv` into
/// `run.output_dir`.
pub fn train_run(run: &RunConfig) -> CmdResult<TrainOutcome> {
    run.validate()?;
    run.check_trainable()?;
    let c = &run.curriculum;
    let train_set = generate(&run.data, c.train_samples)?;
    let val_set = generate_split(&run.data, Split::Validation, c.val_samples)?;
    let mut model = MMDiT::<f32>::new(run.model.clone(), run.seed)?;
    let mut state = CurriculumState::new(c)?;
    let dir = &run.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut save = |step: usize, m: &MMDiT<f32>| save_model(&dir.join(format!("checkpoint_{step}.aplo")), m, run);
    let log = train(&mut model, &train_set, &val_set, c, &mut state, run.seed, run.checkpoint_every, &mut save)?;
    let metrics = dir.join("metrics.csv");
    write(&metrics, &log.csv)?;
    let final_checkpoint = dir.join("final.aplo");
    save_model(&final_checkpoint, &model, run)?;
    Ok(TrainOutcome { final_checkpoint, metrics, log, state })
}

pub fn cmd_train(config: &Path) -> i32 {
    exit_code(load_config(config).and_then(|run| {
        let out = train_run(&run)?;
        eprintln!(
            "trained {} steps; wrote {} and {}",
            out.state.step,
            out.final_checkpoint.display(),
            out.metrics.display()
        );
        Ok(EXIT_OK)
    }))
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub task: TaskKind,
    /// Event ids to caption; drawn from the data generator when `None`.
    pub events: Option<Vec<usize>>,
    /// Euler steps; the checkpoint's sampler setting when `None`.
    pub steps: Option<usize>,
    pub seed: u64,
    /// Tensor-table file holding one `[H, W, C]` first-frame latent.
    pub image: Option<PathBuf>,
    pub out: PathBuf,
}

fn read_image(path: &Path) -> CmdResult<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Failure { code: EXIT_USAGE, error: Error::io(path, e) })?;
    let mut table = read_tensor_table(&bytes)?;
    if table.len() != 1 {
        return Err(Failure::usage(format!("{}: expected one image tensor, found {}", path.display(), table.len())));
    }
    Ok(table.remove(0).1.to_f64().cast())
}

/// Writes `sample.bin` (tensors `video` `[T, H, W, C]` and/or `audio`
/// `[T_a, C]`) and `manifest.txt` into `args.out`.
pub fn sample_run(args: &SampleArgs) -> CmdResult<PathBuf> {
    let kind = args.task;
    if kind.image_conditioned() != args.image.is_some() {
        return Err(Failure::usage(if kind.image_conditioned() {
            format!("{kind} needs --image")
        } else {
            format!("{kind} takes no --image")
        }));
    }
    let (model, run) = load_model::<f32>(&args.checkpoint)?;
    let data = &run.data;
    let events = match &args.events {
        Some(e) => e.clone(),
        None => sample_events(data, &mut ChaCha8Rng::seed_from_u64(args.seed)),
    };
    if events.len() != data.frames {
        return Err(Failure::usage(format!("expected {} events, got {}", data.frames, events.len())));
    }
    let codec = data.codec();
    let cond = Conditions {
        video_caption: codec.encode(&events, CaptionMode::Video)?,
        audio_caption: codec.encode(&events, CaptionMode::Audio)?,
        video_grid: (data.frames, data.height, data.width),
        audio_len: data.audio_len,
    };
    let image = args.image.as_deref().map(read_image).transpose()?;
    let task = TaskSpec::new(kind, image)?;
    let steps = args.steps.unwrap_or(run.sampler.steps);
    let mut sampler = SamplerConfig::uniform(steps, args.seed)?;
    sampler.guidance_scale = run.sampler.guidance_scale;
    let out = euler_sample(&model, &cond, &task, &sampler)?;

    let mut table = Vec::new();
    if let Some(v) = out.video {
        table.push(("video".to_string(), v));
    }
    if let Some(a) = out.audio {
        table.push(("audio".to_string(), a));
    }
    let mut bytes = Vec::new();
    write_tensor_table(&mut bytes, &table)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("sample.bin");
    write(&path, bytes)?;
    let ids = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut manifest = String::new();
    let _ = writeln!(manifest, "task = {}", kind.as_str());
    let _ = writeln!(manifest, "seed = {}", args.seed);
    let _ = writeln!(manifest, "steps = {steps}");
    let _ = writeln!(manifest, "checkpoint = {}", args.checkpoint.display());
    let _ = writeln!(manifest, "events = {}", ids(&events));
    let _ = writeln!(manifest, "video_caption = {}", ids(&cond.video_caption));
    let _ = writeln!(manifest, "audio_caption = {}", ids(&cond.audio_caption));
    let _ = writeln!(manifest, "tensors = {}", table.iter().map(|t| t.0.as_str()).collect::<Vec<_>>().join(","));
    write(&args.out.join("manifest.txt"), manifest)?;
    Ok(path)
}

pub fn cmd_sample(args: &SampleArgs) -> i32 {
    exit_code(sample_run(args).map(|path| {
        eprintln!("wrote {}", path.display());
        EXIT_OK
    }))
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Run configuration whose `data.*` section replaces the checkpoint's.
    pub data_config: Option<PathBuf>,
    pub n: usize,
    pub steps: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// CSV with header and `n` rows.
    pub csv: String,
    pub mean_alignment: f64,
    /// Alignment of each generated video with the next sample's audio.
    pub shuffled_alignment: f64,
    pub validation_losses: [f64; 5],
}

/// Generates `n` T2AV samples from test-split captions and scores them.
pub fn eval_run(args: &EvalArgs) -> CmdResult<EvalReport> {
    if args.n == 0 {
        return Err(Failure::usage("eval needs n > 0"));
    }
    let (model, mut run) = load_model::<f32>(&args.checkpoint)?;
    if let Some(path) = &args.data_config {
        run.data = load_config(path)?.data;
    }
    let data = &run.data;
    let books = Codebooks::new(data)?;
    let tests = generate_split(data, Split::Test, args.n)?;
    let steps = args.steps.unwrap_or(run.sampler.steps);
    let spec = TaskSpec::text(TaskKind::T2AV)?;
    let mut csv = String::from("index,alignment,video_accuracy,audio_accuracy\n");
    let mut generated = Vec::with_capacity(args.n);
    let mut total = 0.0;
    let accuracy = |d: &[usize], e: &[usize]| d.iter().zip(e).filter(|(a, b)| a == b).count() as f64 / e.len() as f64;
    for (i, s) in tests.iter().enumerate() {
        let cond = Conditions {
            video_caption: s.video_caption.clone(),
            audio_caption: s.audio_caption.clone(),
            video_grid: (data.frames, data.height, data.width),
            audio_len: data.audio_len,
        };
        let mut sampler = SamplerConfig::uniform(steps, i as u64)?;
        sampler.guidance_scale = run.sampler.guidance_scale;
        let g = euler_sample(&model, &cond, &spec, &sampler)?;
        let (v, a) = (g.video.expect("t2av video"), g.audio.expect("t2av audio"));
        let score = oracle_alignment(&v, &a, &books)?;
        let va = accuracy(&decode_video(&v, &books)?, &s.events);
        let aa = accuracy(&decode_audio(&a, &books, data.frames)?, &s.events);
        let _ = writeln!(csv, "{i},{score:.6},{va:.6},{aa:.6}");
        total += score;
        generated.push((v, a));
    }
    let n = args.n as f64;
    let mut shuffled = 0.0;
    for i in 0..args.n {
        shuffled += oracle_alignment(&generated[i].0, &generated[(i + 1) % args.n].1, &books)?;
    }
    let val_set = generate_split(data, Split::Validation, run.curriculum.val_samples)?;
    let val = ValidationSet::<f32>::new(val_set, &TaskKind::ALL, run.seed ^ 0x5eed_0001)?;
    let validation_losses = val.evaluate(&model)?;
    Ok(EvalReport { csv, mean_alignment: total / n, shuffled_alignment: shuffled / n, validation_losses })
}

pub fn cmd_eval(args: &EvalArgs) -> i32 {
    exit_code(eval_run(args).and_then(|r| {
        print!("{}", r.csv);
        let mut summary = format!(
            "mean_alignment = {:.6}\nshuffled_alignment = {:.6}\n",
            r.mean_alignment, r.shuffled_alignment
        );
        for k in TaskKind::ALL {
            let _ = writeln!(summary, "val_loss_{} = {:.6}", k.as_str(), r.validation_losses[k.index()]);
        }
        eprint!("{summary}");
        std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
        write(&args.out.join("eval.csv"), &r.csv)?;
        write(&args.out.join("eval_summary.txt"), summary)?;
        Ok(EXIT_OK)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Finite-difference checks of every operation and a 2-layer, width-16
/// model. `inject_fault` appends a case with a wrong backward rule.
pub fn gradcheck_run(run: &RunConfig, inject_fault: bool) -> Vec<CheckLine> {
    let mut cases = op_cases(run.seed);
    match model_case(16, 2, run.seed) {
        Ok(c) => cases.push(c),
        Err(e) => {
            return vec![CheckLine { name: format!("mmdit setup failed: {e}"), max_rel_error: f64::NAN, passed: false }]
        }
    }
    if inject_fault {
        cases.push(faulty_case());
    }
    run_cases(&cases)
        .into_iter()
        .map(|(name, r)| match r {
            Ok(rep) => CheckLine { name, max_rel_error: rep.max_rel_error, passed: rep.passed },
            Err(_) => CheckLine { name, max_rel_error: f64::NAN, passed: false },
        })
        .collect()
}

pub fn cmd_gradcheck(config: Option<&Path>, inject_fault: bool) -> i32 {
    let run = match config {
        Some(p) => match load_config(p) {
            Ok(r) => r,
            Err(f) => return exit_code(Err(f)),
        },
        None => RunConfig::toy(),
    };
    let lines = gradcheck_run(&run, inject_fault);
    for l in &lines {
        println!("{:<24} {:.3e} {}", l.name, l.max_rel_error, if l.passed { "PASS" } else { "FAIL" });
    }
    if lines.iter().all(|l| l.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK
    }
}
