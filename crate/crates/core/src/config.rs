//! Run configuration files: UTF-8 text, one `section.key = value` per line,
//! `#` starts a comment. Unknown or repeated keys are errors.
//!
//! ```text
//! run.profile = toy
//! run.seed = 7
//! model.layers = 2
//! curriculum.tasks = t2v,t2av
//! ```
//!
//! `run.profile` is applied first wherever it appears; every other key
//! overrides the profile's default.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::curriculum::StageConfig;
use crate::error::{Error, Result};
use crate::mmdit::ModelConfig;
use crate::rope::{AudioTimeMode, RopeConfig};
use crate::synthdata::GeneratorConfig;
use crate::tasks::TaskKind;

/// Models above this many parameters are refused for training.
pub const PARAMETER_CAP: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Paper,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Toy => "toy",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub guidance_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Intermediate checkpoint period in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub sampler: SamplerSettings,
    pub curriculum: StageConfig,
    pub data: GeneratorConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        let data = GeneratorConfig::default();
        let codec = data.codec();
        let model = ModelConfig {
            caption_vocab: codec.vocab_size(),
            max_caption_len: codec.max_len(),
            ..ModelConfig::toy()
        };
        Self {
            profile: Profile::Toy,
            seed: 0,
            output_dir: PathBuf::from("out"),
            checkpoint_every: 500,
            model,
            sampler: SamplerSettings { steps: 50, guidance_scale: None },
            curriculum: StageConfig::default(),
            data,
        }
    }

    pub fn paper() -> Self {
        let model = ModelConfig::paper();
        let data = GeneratorConfig {
            video_channels: model.video_latent_channels,
            audio_channels: model.audio_latent_channels,
            ..GeneratorConfig::default()
        };
        Self {
            profile: Profile::Paper,
            model,
            data,
            curriculum: StageConfig { learning_rates: [1e-4; 3], ..StageConfig::default() },
            ..Self::toy()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Toy => Self::toy(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Cross-section consistency: the data must fit the model.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.curriculum.validate()?;
        self.data.validate()?;
        let m = &self.model;
        let d = &self.data;
        let codec = d.codec();
        if d.video_channels != m.video_latent_channels || d.audio_channels != m.audio_latent_channels {
            return Err(Error::Invalid(format!(
                "data channels ({}, {}) differ from model channels ({}, {})",
                d.video_channels, d.audio_channels, m.video_latent_channels, m.audio_latent_channels
            )));
        }
        if codec.vocab_size() > m.caption_vocab || codec.max_len() > m.max_caption_len {
            return Err(Error::Invalid(format!(
                "captions need vocab {} and length {}, model has {} and {}",
                codec.vocab_size(),
                codec.max_len(),
                m.caption_vocab,
                m.max_caption_len
            )));
        }
        if d.frames > m.max_video_frames || d.height > m.max_video_height || d.width > m.max_video_width || d.audio_len > m.max_audio_len {
            return Err(Error::Invalid("data extents exceed the model's maxima".into()));
        }
        if self.sampler.steps == 0 {
            return Err(Error::Invalid("sampler.steps must be positive".into()));
        }
        Ok(())
    }

    /// Refuses configurations too large to train here.
    pub fn check_trainable(&self) -> Result<()> {
        let n = self.model.parameter_count();
        if n > PARAMETER_CAP {
            return Err(Error::Invalid(format!(
                "parameter cap exceeded: {n} parameters, cap is {PARAMETER_CAP}"
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::Config { line, message: format!("expected `section.key = value`, got `{body}`") });
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(Error::Config { line, message: format!("`{key}` already set on line {first}") });
            }
            entries.push((line, key.to_string(), value.to_string()));
        }
        let profile = match entries.iter().find(|e| e.1 == "run.profile") {
            None => Profile::Toy,
            Some((line, _, v)) => match v.as_str() {
                "toy" => Profile::Toy,
                "paper" => Profile::Paper,
                other => {
                    return Err(Error::Config { line: *line, message: format!("unknown profile `{other}` (toy or paper)") })
                }
            },
        };
        let mut cfg = Self::for_profile(profile);
        let mut rope = RopeOverrides::default();
        for (line, key, value) in &entries {
            cfg.set(key, value, &mut rope).map_err(|message| Error::Config { line: *line, message })?;
        }
        let mut r = RopeConfig::new(cfg.model.head_dim())?;
        if let Some(s) = rope.axis_split {
            r.axis_split = s;
        }
        if let Some(b) = rope.base {
            r.base_theta = b;
        }
        if let Some(m) = rope.mode {
            r.audio_time_mode = m;
        }
        cfg.model.rope = r;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, rope: &mut RopeOverrides) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let c = &mut self.curriculum;
        let d = &mut self.data;
        match key {
            "run.profile" => {}
            "run.seed" => self.seed = num(v)?,
            "run.output_dir" => self.output_dir = PathBuf::from(v),
            "run.checkpoint_every" => self.checkpoint_every = num(v)?,

            "model.layers" => m.layers = num(v)?,
            "model.d_model" => m.d_model = num(v)?,
            "model.heads" => m.heads = num(v)?,
            "model.ff_dim" => m.ff_dim = num(v)?,
            "model.video_latent_channels" => m.video_latent_channels = num(v)?,
            "model.audio_latent_channels" => m.audio_latent_channels = num(v)?,
            "model.caption_vocab" => m.caption_vocab = num(v)?,
            "model.max_video_frames" => m.max_video_frames = num(v)?,
            "model.max_video_height" => m.max_video_height = num(v)?,
            "model.max_video_width" => m.max_video_width = num(v)?,
            "model.max_audio_len" => m.max_audio_len = num(v)?,
            "model.max_caption_len" => m.max_caption_len = num(v)?,
            "model.patch_size" => m.patch_size = num(v)?,
            "model.timestep_features" => m.timestep_features = num(v)?,
            "model.norm_eps" => m.norm_eps = num(v)?,
            "model.drop_captions" => m.drop_captions = num(v)?,
            "model.audio_rate_hz" => m.audio_rate_hz = num(v)?,
            "model.audio_downsample" => m.audio_downsample = num(v)?,
            "model.video_rate_hz" => m.video_rate_hz = num(v)?,
            "model.video_spatial_compression" => m.video_spatial_compression = num(v)?,
            "model.rope_base" => rope.base = Some(num(v)?),
            "model.rope_axis_split" => {
                let parts = list::<usize>(v)?;
                let [t, h, w] = parts[..] else {
                    return Err(format!("rope_axis_split needs three sizes, got `{v}`"));
                };
                rope.axis_split = Some((t, h, w));
            }
            "model.audio_time_mode" => {
                rope.mode = Some(AudioTimeMode::parse(v).ok_or(format!("unknown audio_time_mode `{v}`"))?)
            }

            "sampler.steps" => self.sampler.steps = num(v)?,
            "sampler.guidance_scale" => {
                self.sampler.guidance_scale = if v == "none" { None } else { Some(num(v)?) }
            }

            "curriculum.stage1_steps" => c.stage_steps[0] = num(v)?,
            "curriculum.stage2_steps" => c.stage_steps[1] = num(v)?,
            "curriculum.stage3_steps" => c.stage_steps[2] = num(v)?,
            "curriculum.stage1_lr" => c.learning_rates[0] = num(v)?,
            "curriculum.stage2_lr" => c.learning_rates[1] = num(v)?,
            "curriculum.stage3_lr" => c.learning_rates[2] = num(v)?,
            "curriculum.warmup_steps" => c.warmup_steps = num(v)?,
            "curriculum.rebalance_period" => c.rebalance_period = num(v)?,
            "curriculum.quality_threshold" => c.quality_threshold = num(v)?,
            "curriculum.temperature" => c.temperature = num(v)?,
            "curriculum.weight_floor" => c.weight_floor = num(v)?,
            "curriculum.batch_size" => c.batch_size = num(v)?,
            "curriculum.grad_clip" => c.grad_clip = num(v)?,
            "curriculum.log_period" => c.log_period = num(v)?,
            "curriculum.val_samples" => c.val_samples = num(v)?,
            "curriculum.train_samples" => c.train_samples = num(v)?,
            "curriculum.tasks" => {
                let mut on = [false; 5];
                for name in v.split(',').map(str::trim) {
                    let k = TaskKind::parse(name).ok_or(format!("unknown task `{name}`"))?;
                    on[k.index()] = true;
                }
                c.enabled_tasks = on;
            }

            "data.seed" => d.seed = num(v)?,
            "data.n_events" => d.n_events = num(v)?,
            "data.frames" => d.frames = num(v)?,
            "data.height" => d.height = num(v)?,
            "data.width" => d.width = num(v)?,
            "data.audio_len" => d.audio_len = num(v)?,
            "data.video_channels" => d.video_channels = num(v)?,
            "data.audio_channels" => d.audio_channels = num(v)?,
            "data.noise_sigma" => d.noise_sigma = num(v)?,
            "data.mean_dwell" => d.mean_dwell = num(v)?,
            "data.quality_low" => d.quality_low = num(v)?,
            "data.quality_high" => d.quality_high = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::parse`]; lists every key.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let c = &self.curriculum;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("run.profile", self.profile.as_str().into());
        kv("run.seed", self.seed.to_string());
        kv("run.output_dir", self.output_dir.display().to_string());
        kv("run.checkpoint_every", self.checkpoint_every.to_string());
        kv("model.layers", m.layers.to_string());
        kv("model.d_model", m.d_model.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.ff_dim", m.ff_dim.to_string());
        kv("model.video_latent_channels", m.video_latent_channels.to_string());
        kv("model.audio_latent_channels", m.audio_latent_channels.to_string());
        kv("model.caption_vocab", m.caption_vocab.to_string());
        kv("model.max_video_frames", m.max_video_frames.to_string());
        kv("model.max_video_height", m.max_video_height.to_string());
        kv("model.max_video_width", m.max_video_width.to_string());
        kv("model.max_audio_len", m.max_audio_len.to_string());
        kv("model.max_caption_len", m.max_caption_len.to_string());
        kv("model.patch_size", m.patch_size.to_string());
        kv("model.timestep_features", m.timestep_features.to_string());
        kv("model.norm_eps", format!("{:?}", m.norm_eps));
        kv("model.drop_captions", m.drop_captions.to_string());
        kv("model.audio_rate_hz", format!("{:?}", m.audio_rate_hz));
        kv("model.audio_downsample", m.audio_downsample.to_string());
        kv("model.video_rate_hz", format!("{:?}", m.video_rate_hz));
        kv("model.video_spatial_compression", m.video_spatial_compression.to_string());
        kv("model.rope_base", format!("{:?}", m.rope.base_theta));
        let (t, h, w) = m.rope.axis_split;
        kv("model.rope_axis_split", format!("{t},{h},{w}"));
        kv("model.audio_time_mode", m.rope.audio_time_mode.as_str().into());
        kv("sampler.steps", self.sampler.steps.to_string());
        kv(
            "sampler.guidance_scale",
            self.sampler.guidance_scale.map_or("none".into(), |g| format!("{g:?}")),
        );
        for i in 0..3 {
            kv(&format!("curriculum.stage{}_steps", i + 1), c.stage_steps[i].to_string());
        }
        for i in 0..3 {
            kv(&format!("curriculum.stage{}_lr", i + 1), format!("{:?}", c.learning_rates[i]));
        }
        kv("curriculum.warmup_steps", c.warmup_steps.to_string());
        kv("curriculum.rebalance_period", c.rebalance_period.to_string());
        kv("curriculum.quality_threshold", format!("{:?}", c.quality_threshold));
        kv("curriculum.temperature", format!("{:?}", c.temperature));
        kv("curriculum.weight_floor", format!("{:?}", c.weight_floor));
        kv("curriculum.batch_size", c.batch_size.to_string());
        kv("curriculum.grad_clip", format!("{:?}", c.grad_clip));
        kv("curriculum.log_period", c.log_period.to_string());
        kv("curriculum.val_samples", c.val_samples.to_string());
        kv("curriculum.train_samples", c.train_samples.to_string());
        let tasks: Vec<&str> = TaskKind::ALL.into_iter().filter(|k| c.enabled_tasks[k.index()]).map(TaskKind::as_str).collect();
        kv("curriculum.tasks", tasks.join(","));
        s.push_str(&render_generator(&self.data));
        s
    }
}

/// `data.*` lines for a generator configuration.
pub fn render_generator(d: &GeneratorConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "data.{k} = {v}");
    };
    kv("seed", d.seed.to_string());
    kv("n_events", d.n_events.to_string());
    kv("frames", d.frames.to_string());
    kv("height", d.height.to_string());
    kv("width", d.width.to_string());
    kv("audio_len", d.audio_len.to_string());
    kv("video_channels", d.video_channels.to_string());
    kv("audio_channels", d.audio_channels.to_string());
    kv("noise_sigma", format!("{:?}", d.noise_sigma));
    kv("mean_dwell", format!("{:?}", d.mean_dwell));
    kv("quality_low", format!("{:?}", d.quality_low));
    kv("quality_high", format!("{:?}", d.quality_high));
    s
}

#[derive(Default)]
struct RopeOverrides {
    axis_split: Option<(usize, usize, usize)>,
    base: Option<f64>,
    mode: Option<AudioTimeMode>,
}

fn num<N: FromStr>(v: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as {}", std::any::type_name::<N>()))
}

fn list<N: FromStr>(v: &str) -> std::result::Result<Vec<N>, String> {
    v.split(',').map(|p| num(p.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = RunConfig::toy();
        cfg.seed = 42;
        cfg.curriculum.enabled_tasks = [true, false, true, false, false];
        cfg.sampler.guidance_scale = Some(1.5);
        cfg.data.noise_sigma = 0.123456789;
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::paper().render()).unwrap(), RunConfig::paper());
    }

    #[test]
    fn empty_file_is_the_toy_profile() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::toy());
    }

    #[test]
    fn profile_applies_before_overrides() {
        let cfg = RunConfig::parse("model.layers = 2\nrun.profile = paper\n").unwrap();
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.model.ff_dim, 4096);
        assert_eq!(cfg.curriculum.learning_rates, [1e-4; 3]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("run.seed = 1\n# ok\nmodel.colour = red\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = RunConfig::parse("run.seed = 1\nrun.seed = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
        let err = RunConfig::parse("model.layers = many\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }), "{err}");
        let err = RunConfig::parse("just words\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }), "{err}");
    }

    #[test]
    fn head_dim_follows_model_overrides() {
        let cfg = RunConfig::parse("model.d_model = 32\nmodel.heads = 2\nmodel.ff_dim = 64\n").unwrap();
        assert_eq!(cfg.model.rope.head_dim, 16);
        assert_eq!(cfg.model.rope.axis_split, (8, 4, 4));
    }

    #[test]
    fn paper_profile_exceeds_the_cap() {
        let err = RunConfig::paper().check_trainable().unwrap_err().to_string();
        assert!(err.contains("parameter cap exceeded"), "{err}");
        assert!(RunConfig::toy().check_trainable().is_ok());
    }

    #[test]
    fn inconsistent_sections_are_rejected() {
        assert!(RunConfig::parse("data.video_channels = 4\n").is_err());
        assert!(RunConfig::parse("data.frames = 32\ndata.audio_len = 64\n").is_err());
    }
}
