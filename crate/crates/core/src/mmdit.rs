//! Single-tower multimodal diffusion transformer.
//!
//! All four streams share one set of attention and feed-forward weights.
//! Each stream has its own normalization gains and its own timestep-driven
//! modulation (shift, scale, gate). Gates, modulation maps and velocity heads
//! start at zero, so a fresh model predicts a zero velocity everywhere.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    active_streams, build_task_mask_with, omni_attention_graph, AttentionMask, SegmentTable,
    Stream, StreamBundle, StreamLengths,
};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Element, Graph, RotaryTables, Tensor, Var};
use crate::params::{ParamId, ParamStore};
use crate::rope::{build_bundle_positions, PositionGrid, RopeConfig};
use crate::tasks::TaskKind;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub rope: RopeConfig,
    pub video_latent_channels: usize,
    pub audio_latent_channels: usize,
    pub caption_vocab: usize,
    pub max_video_frames: usize,
    pub max_video_height: usize,
    pub max_video_width: usize,
    pub max_audio_len: usize,
    pub max_caption_len: usize,
    /// Spatial patch edge for video latents.
    pub patch_size: usize,
    /// Width of the sinusoidal timestep features.
    pub timestep_features: usize,
    pub norm_eps: f64,
    /// Switch caption streams off in every task mask.
    pub drop_captions: bool,
    /// Media constants of the reference codecs. Recorded for documentation
    /// and validated, never used by the toy encoders.
    pub audio_rate_hz: f64,
    pub audio_downsample: usize,
    pub video_rate_hz: f64,
    pub video_spatial_compression: usize,
}

impl ModelConfig {
    /// Desk-scale profile.
    pub fn toy() -> Self {
        let d_model = 128;
        let heads = 4;
        Self {
            layers: 4,
            d_model,
            heads,
            ff_dim: 256,
            rope: RopeConfig::new(d_model / heads).expect("valid head dim"),
            video_latent_channels: 8,
            audio_latent_channels: 8,
            caption_vocab: 32,
            max_video_frames: 16,
            max_video_height: 8,
            max_video_width: 8,
            max_audio_len: 128,
            max_caption_len: 32,
            patch_size: 1,
            timestep_features: 64,
            norm_eps: 1e-6,
            drop_captions: false,
            audio_rate_hz: 43.0,
            audio_downsample: 1024,
            video_rate_hz: 3.0,
            video_spatial_compression: 16,
        }
    }

    /// Reference-scale constants: 32 joint layers, feed-forward width 4096.
    /// Too large to instantiate on a desk machine.
    pub fn paper() -> Self {
        let d_model = 3072;
        let heads = 24;
        Self {
            layers: 32,
            d_model,
            heads,
            ff_dim: 4096,
            rope: RopeConfig::new(d_model / heads).expect("valid head dim"),
            video_latent_channels: 16,
            audio_latent_channels: 64,
            caption_vocab: 151_936,
            max_video_frames: 64,
            max_video_height: 90,
            max_video_width: 160,
            max_audio_len: 1024,
            max_caption_len: 512,
            timestep_features: 256,
            ..Self::toy()
        }
    }

    /// Minimal configuration used by gradient checks.
    pub fn tiny(d_model: usize, layers: usize) -> Self {
        let heads = 2;
        Self {
            layers,
            d_model,
            heads,
            ff_dim: 2 * d_model,
            rope: RopeConfig::new(d_model / heads).expect("valid head dim"),
            video_latent_channels: 3,
            audio_latent_channels: 2,
            caption_vocab: 10,
            max_video_frames: 4,
            max_video_height: 4,
            max_video_width: 4,
            max_audio_len: 16,
            max_caption_len: 8,
            timestep_features: 8,
            ..Self::toy()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn video_token_dim(&self) -> usize {
        self.video_latent_channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.ff_dim < self.d_model {
            return bad(format!("ff_dim {} must be at least d_model {}", self.ff_dim, self.d_model));
        }
        if self.rope.head_dim != self.head_dim() {
            return bad(format!(
                "rope head_dim {} differs from d_model / heads = {}",
                self.rope.head_dim,
                self.head_dim()
            ));
        }
        self.rope.validate()?;
        let positive = [
            ("video_latent_channels", self.video_latent_channels),
            ("audio_latent_channels", self.audio_latent_channels),
            ("caption_vocab", self.caption_vocab),
            ("patch_size", self.patch_size),
            ("audio_downsample", self.audio_downsample),
            ("video_spatial_compression", self.video_spatial_compression),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.timestep_features == 0 || self.timestep_features % 2 != 0 {
            return bad(format!(
                "timestep_features must be even and positive, got {}",
                self.timestep_features
            ));
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if !(self.audio_rate_hz > 0.0 && self.video_rate_hz > 0.0) {
            return bad("media rates must be positive".into());
        }
        Ok(())
    }

    /// Parameters inside one joint block.
    pub fn block_parameter_count(&self) -> usize {
        let d = self.d_model;
        let modulation = 4 * (d * 6 * d + 6 * d);
        let norms = 8 * d;
        let attention = 4 * d * d;
        let ff = d * self.ff_dim + self.ff_dim + self.ff_dim * d + d;
        modulation + norms + attention + ff
    }

    /// Exact parameter count without allocating the model.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let embed = (self.video_token_dim() * d + d)
            + (self.audio_latent_channels * d + d)
            + (self.caption_vocab + self.max_caption_len) * d
            + (self.timestep_features * d + d)
            + (d * d + d);
        let head = 2 * (d + d * 2 * d + 2 * d)
            + (d * self.video_token_dim() + self.video_token_dim())
            + (d * self.audio_latent_channels + self.audio_latent_channels);
        embed + head + self.layers * self.block_parameter_count()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.w.0], self.b.map(|b| p[b.0]))
    }
}

#[derive(Debug, Clone)]
struct Block {
    modulation: [Linear; 4],
    norm_attn: [ParamId; 4],
    norm_ff: [ParamId; 4],
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    video_in: Linear,
    audio_in: Linear,
    caption_table: ParamId,
    caption_positions: ParamId,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    final_norm: [ParamId; 2],
    final_modulation: [Linear; 2],
    video_head: Linear,
    audio_head: Linear,
}

/// Conditioning and latents for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    /// `[frames, height, width, channels]`.
    pub video: Option<Tensor<T>>,
    /// `[audio_len, channels]`.
    pub audio: Option<Tensor<T>>,
    pub video_caption: Vec<usize>,
    pub audio_caption: Vec<usize>,
}

impl<T: Element> ModelInput<T> {
    /// The same input with the audio stream and its caption removed.
    pub fn without_audio(&self) -> Self {
        Self {
            audio: None,
            audio_caption: vec![],
            ..self.clone()
        }
    }

    /// The same input with the video stream and its caption removed.
    pub fn without_video(&self) -> Self {
        Self {
            video: None,
            video_caption: vec![],
            ..self.clone()
        }
    }
}

/// Predicted velocities in token layout: video `[L_V, C_v·p²]`, audio
/// `[L_A, C_a]`. Streams outside the task are all zeros.
#[derive(Debug, Clone, Copy)]
pub struct VelocityVars {
    pub video: Var,
    pub audio: Var,
}

#[derive(Debug, Clone)]
pub struct MMDiT<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Timestep features: `[cos(1000·t·f_i), sin(1000·t·f_i)]` with
/// `f_i = 10000^(-i/half)`.
pub fn timestep_features<T: Element>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freq = |i: usize| (-(10_000f64.ln()) * i as f64 / half as f64).exp();
    for i in 0..half {
        out.push(T::from_f64_lossy((1000.0 * t * freq(i)).cos()));
    }
    for i in 0..half {
        out.push(T::from_f64_lossy((1000.0 * t * freq(i)).sin()));
    }
    Tensor::new(&[dim], out).expect("sized")
}

/// `[T, H, W, C]` latent to `[T·(H/p)·(W/p), p·p·C]` tokens.
pub fn patchify<T: Element>(latent: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [frames, h, w, c] = *latent.shape() else {
        return Err(shape_err!("video latent must be [T, H, W, C], got {:?}", latent.shape()));
    };
    if h % p != 0 || w % p != 0 {
        return Err(shape_err!("patch size {p} does not divide {h}x{w}"));
    }
    if p == 1 {
        return latent.clone().reshape(&[frames * h * w, c]);
    }
    let (hp, wp) = (h / p, w / p);
    let mut data = Vec::with_capacity(latent.numel());
    for t in 0..frames {
        for i in 0..hp {
            for j in 0..wp {
                for di in 0..p {
                    for dj in 0..p {
                        let off = ((t * h + i * p + di) * w + j * p + dj) * c;
                        data.extend_from_slice(&latent.data()[off..off + c]);
                    }
                }
            }
        }
    }
    Tensor::new(&[frames * hp * wp, p * p * c], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Element>(tokens: &Tensor<T>, grid: (usize, usize, usize), p: usize, c: usize) -> Result<Tensor<T>> {
    let (frames, h, w) = grid;
    if tokens.shape() != [frames * (h / p) * (w / p), p * p * c] || h % p != 0 || w % p != 0 {
        return Err(shape_err!(
            "tokens {:?} do not tile a {frames}x{h}x{w}x{c} latent with patch {p}",
            tokens.shape()
        ));
    }
    if p == 1 {
        return tokens.clone().reshape(&[frames, h, w, c]);
    }
    let (hp, wp) = (h / p, w / p);
    let mut out = Tensor::zeros(&[frames, h, w, c]);
    let mut src = 0;
    for t in 0..frames {
        for i in 0..hp {
            for j in 0..wp {
                for di in 0..p {
                    for dj in 0..p {
                        let off = ((t * h + i * p + di) * w + j * p + dj) * c;
                        out.data_mut()[off..off + c].copy_from_slice(&tokens.data()[src..src + c]);
                        src += c;
                    }
                }
            }
        }
    }
    Ok(out)
}

struct Context<T> {
    c: Var,
    table: SegmentTable,
    mask: AttentionMask,
    active: [bool; 4],
    rope: Rc<RotaryTables<T>>,
}

impl<T: Element> MMDiT<T> {
    /// Projections use variance-scaled normal init (`std = 1/sqrt(fan_in)`);
    /// modulation maps, gates and velocity heads start at zero.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::default();
        let d = cfg.d_model;
        let dense = |ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, zero: bool, bias: bool| {
            let w = if zero {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                let std = 1.0 / (fan_in as f64).sqrt();
                Tensor::<T>::randn(&[fan_in, fan_out], rng).map(|x| x * T::from_f64_lossy(std))
            };
            let w = ps.add(format!("{name}.weight"), w);
            let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
            Linear { w, b }
        };
        let video_in = dense(&mut ps, &mut rng, "embed.video", cfg.video_token_dim(), d, false, true);
        let audio_in = dense(&mut ps, &mut rng, "embed.audio", cfg.audio_latent_channels, d, false, true);
        let table = Tensor::<T>::randn(&[cfg.caption_vocab, d], &mut rng);
        let caption_table = ps.add("embed.caption", table);
        let positions = Tensor::<T>::randn(&[cfg.max_caption_len, d], &mut rng);
        let caption_positions = ps.add("embed.caption_position", positions);
        let time_in = dense(&mut ps, &mut rng, "time.in", cfg.timestep_features, d, false, true);
        let time_out = dense(&mut ps, &mut rng, "time.out", d, d, false, true);
        let stream_names = ["video", "video_text", "audio_text", "audio"];
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let modulation = stream_names
                .map(|s| dense(&mut ps, &mut rng, &format!("blocks.{l}.modulation.{s}"), d, 6 * d, true, true));
            let norm_attn = stream_names.map(|s| ps.add(format!("blocks.{l}.norm_attn.{s}"), Tensor::ones(&[d])));
            let norm_ff = stream_names.map(|s| ps.add(format!("blocks.{l}.norm_ff.{s}"), Tensor::ones(&[d])));
            let wq = dense(&mut ps, &mut rng, &format!("blocks.{l}.attn.q"), d, d, false, false).w;
            let wk = dense(&mut ps, &mut rng, &format!("blocks.{l}.attn.k"), d, d, false, false).w;
            let wv = dense(&mut ps, &mut rng, &format!("blocks.{l}.attn.v"), d, d, false, false).w;
            let wo = dense(&mut ps, &mut rng, &format!("blocks.{l}.attn.o"), d, d, false, false).w;
            let ff_in = dense(&mut ps, &mut rng, &format!("blocks.{l}.ff.in"), d, cfg.ff_dim, false, true);
            let ff_out = dense(&mut ps, &mut rng, &format!("blocks.{l}.ff.out"), cfg.ff_dim, d, false, true);
            blocks.push(Block {
                modulation,
                norm_attn,
                norm_ff,
                wq,
                wk,
                wv,
                wo,
                ff_in,
                ff_out,
            });
        }
        let final_norm = ["video", "audio"].map(|s| ps.add(format!("final.norm.{s}"), Tensor::ones(&[d])));
        let final_modulation = ["video", "audio"].map(|s| dense(&mut ps, &mut rng, &format!("final.modulation.{s}"), d, 2 * d, true, true));
        let video_head = dense(&mut ps, &mut rng, "head.video", d, cfg.video_token_dim(), true, true);
        let audio_head = dense(&mut ps, &mut rng, "head.audio", d, cfg.audio_latent_channels, true, true);
        let layout = Layout {
            video_in,
            audio_in,
            caption_table,
            caption_positions,
            time_in,
            time_out,
            blocks,
            final_norm,
            final_modulation,
            video_head,
            audio_head,
        };
        Ok(Self {
            cfg,
            params: ps,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Adds `N(0, std²)` noise to every parameter, zero-initialized ones
    /// included. Used to exercise all code paths in tests and checks.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.params.tensors_mut() {
            let noise = Tensor::<T>::randn(t.shape(), &mut rng);
            t.axpy(T::from_f64_lossy(std), &noise).expect("same shape");
        }
    }

    pub fn cast<U: Element>(&self) -> MMDiT<U> {
        let mut params = ParamStore::default();
        for (name, t) in self.params.iter() {
            params.add(name, t.cast());
        }
        MMDiT {
            cfg: self.cfg.clone(),
            params,
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, input: &ModelInput<T>) -> Result<(Option<(usize, usize, usize)>, StreamLengths)> {
        let cfg = &self.cfg;
        let p = cfg.patch_size;
        let grid = match &input.video {
            Some(v) => {
                let [frames, h, w, c] = *v.shape() else {
                    return Err(shape_err!("video latent must be [T, H, W, C], got {:?}", v.shape()));
                };
                if c != cfg.video_latent_channels {
                    return Err(shape_err!("video latent has {c} channels, model expects {}", cfg.video_latent_channels));
                }
                if frames == 0 || h == 0 || w == 0 {
                    return Err(shape_err!("video latent {:?} has an empty axis", v.shape()));
                }
                if frames > cfg.max_video_frames || h > cfg.max_video_height || w > cfg.max_video_width {
                    return Err(Error::Invalid(format!(
                        "video latent {:?} exceeds max extents ({}, {}, {})",
                        v.shape(),
                        cfg.max_video_frames,
                        cfg.max_video_height,
                        cfg.max_video_width
                    )));
                }
                if h % p != 0 || w % p != 0 {
                    return Err(shape_err!("patch size {p} does not divide {h}x{w}"));
                }
                Some((frames, h / p, w / p))
            }
            None => None,
        };
        let audio_len = match &input.audio {
            Some(a) => {
                let [len, c] = *a.shape() else {
                    return Err(shape_err!("audio latent must be [T_a, C], got {:?}", a.shape()));
                };
                if c != cfg.audio_latent_channels {
                    return Err(shape_err!("audio latent has {c} channels, model expects {}", cfg.audio_latent_channels));
                }
                if len > cfg.max_audio_len {
                    return Err(Error::Invalid(format!(
                        "audio length {len} exceeds max {}",
                        cfg.max_audio_len
                    )));
                }
                len
            }
            None => 0,
        };
        for (name, cap) in [("video", &input.video_caption), ("audio", &input.audio_caption)] {
            if cap.len() > cfg.max_caption_len {
                return Err(Error::Invalid(format!(
                    "{name} caption length {} exceeds max {}",
                    cap.len(),
                    cfg.max_caption_len
                )));
            }
            if let Some(&bad) = cap.iter().find(|&&id| id >= cfg.caption_vocab) {
                return Err(Error::Invalid(format!(
                    "{name} caption token {bad} overflows vocabulary of {}",
                    cfg.caption_vocab
                )));
            }
        }
        let lv = grid.map_or(0, |(f, h, w)| f * h * w);
        Ok((grid, [lv, input.video_caption.len(), input.audio_caption.len(), audio_len]))
    }

    /// Positions of the concatenated sequence for `input` under `task`.
    /// When the task masks the video out, the audio clock starts as if no
    /// video were present.
    pub fn positions(&self, input: &ModelInput<T>, task: TaskKind) -> Result<PositionGrid> {
        let (grid, l) = self.check_input(input)?;
        let mut pos = build_bundle_positions(grid, l[1], l[2], l[3], &self.cfg.rope)?;
        if grid.is_some() && !task.uses_video() && l[3] > 0 {
            let audio = build_bundle_positions(None, 0, 0, l[3], &self.cfg.rope)?;
            let start = pos.len() - l[3];
            pos.entries[start..].copy_from_slice(&audio.entries);
        }
        Ok(pos)
    }

    fn embed_graph(&self, g: &mut Graph<T>, p: &[Var], input: &ModelInput<T>, lengths: StreamLengths) -> Result<[Var; 4]> {
        let d = self.cfg.d_model;
        let lay = &self.layout;
        let video = match &input.video {
            Some(v) => {
                let tokens = g.constant(patchify(v, self.cfg.patch_size)?);
                lay.video_in.apply(g, p, tokens)?
            }
            None => g.constant(Tensor::zeros(&[0, d])),
        };
        let mut caption = |ids: &[usize]| -> Result<Var> {
            let tokens = g.embedding(p[lay.caption_table.0], ids)?;
            let index: Vec<usize> = (0..ids.len()).collect();
            let pos = g.embedding(p[lay.caption_positions.0], &index)?;
            g.add(tokens, pos)
        };
        let vt = caption(&input.video_caption)?;
        let at = caption(&input.audio_caption)?;
        let audio = match &input.audio {
            Some(a) => {
                let frames = g.constant(a.clone());
                lay.audio_in.apply(g, p, frames)?
            }
            None => g.constant(Tensor::zeros(&[0, d])),
        };
        debug_assert_eq!(g.shape(video)[0], lengths[0]);
        Ok([video, vt, at, audio])
    }

    /// Token embeddings of every stream plus their positions.
    pub fn embed_inputs(&self, input: &ModelInput<T>) -> Result<StreamBundle<T>> {
        let (grid, lengths) = self.check_input(input)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let vars = self.embed_graph(&mut g, &p, input, lengths)?;
        let positions = build_bundle_positions(grid, lengths[1], lengths[2], lengths[3], &self.cfg.rope)?;
        Ok(StreamBundle {
            streams: vars.map(|v| g.value(v).clone()),
            positions,
        })
    }

    /// `silu(MLP(sinusoid(t)))`, the conditioning vector fed to every
    /// modulation map.
    fn conditioning(&self, g: &mut Graph<T>, p: &[Var], t: f64) -> Result<Var> {
        let feats = g.constant(timestep_features(t, self.cfg.timestep_features));
        let h = self.layout.time_in.apply(g, p, feats)?;
        let h = g.silu(h);
        let emb = self.layout.time_out.apply(g, p, h)?;
        Ok(g.silu(emb))
    }

    fn context(&self, g: &mut Graph<T>, p: &[Var], t: f64, positions: &PositionGrid, mask: AttentionMask, lengths: StreamLengths) -> Result<Context<T>> {
        let table = SegmentTable::new(lengths);
        let active = stream_activity(&mask, &table)?;
        Ok(Context {
            c: self.conditioning(g, p, t)?,
            table,
            mask,
            active,
            rope: Rc::new(positions.tables(&self.cfg.rope)),
        })
    }

    fn block_graph(&self, g: &mut Graph<T>, p: &[Var], block: &Block, xs: [Var; 4], ctx: &Context<T>) -> Result<[Var; 4]> {
        let d = self.cfg.d_model;
        let eps = T::from_f64_lossy(self.cfg.norm_eps);
        let live = |s: usize| ctx.active[s] && ctx.table.lengths[s] > 0;

        // shift_a, scale_a, gate_a, shift_f, scale_f, gate_f per live stream
        let mut mods: [Option<Vec<Var>>; 4] = Default::default();
        for s in (0..4).filter(|&s| live(s)) {
            let m = block.modulation[s].apply(g, p, ctx.c)?;
            mods[s] = Some(g.split(m, &[d; 6], 0)?);
        }

        let heads = self.cfg.heads;
        let hd = self.cfg.head_dim();
        let mut q_parts = Vec::with_capacity(4);
        let mut k_parts = Vec::with_capacity(4);
        let mut v_parts = Vec::with_capacity(4);
        for s in 0..4 {
            let len = ctx.table.lengths[s];
            if let Some(m) = &mods[s] {
                let h = g.rms_norm(xs[s], p[block.norm_attn[s].0], eps)?;
                let h = modulate(g, h, m[0], m[1])?;
                q_parts.push(g.matmul(h, p[block.wq.0])?);
                k_parts.push(g.matmul(h, p[block.wk.0])?);
                v_parts.push(g.matmul(h, p[block.wv.0])?);
            } else if len > 0 {
                // Inactive rows never influence active ones; zeros stand in.
                let z = g.constant(Tensor::zeros(&[len, d]));
                q_parts.push(z);
                k_parts.push(z);
                v_parts.push(z);
            }
        }
        let total = ctx.table.total();
        let mut qkv = [q_parts, k_parts, v_parts].into_iter().map(|parts| {
            let x = g.concat(&parts, 0)?;
            g.reshape(x, &[total, heads, hd])
        });
        let (q, k, v) = (qkv.next().unwrap()?, qkv.next().unwrap()?, qkv.next().unwrap()?);
        drop(qkv);
        let attn = omni_attention_graph(g, q, k, v, &ctx.mask, ctx.rope.clone())?;
        let attn = g.reshape(attn, &[total, d])?;

        let mut out = xs;
        for s in (0..4).filter(|&s| live(s)) {
            let m = mods[s].as_ref().expect("live stream has modulation");
            let range = ctx.table.range(Stream::ALL[s]);
            let a = g.slice(attn, 0, range.start, range.len())?;
            let o = g.matmul(a, p[block.wo.0])?;
            let o = g.mul(o, m[2])?;
            let x = g.add(xs[s], o)?;

            let h = g.rms_norm(x, p[block.norm_ff[s].0], eps)?;
            let h = modulate(g, h, m[3], m[4])?;
            let f = block.ff_in.apply(g, p, h)?;
            let f = g.gelu(f);
            let f = block.ff_out.apply(g, p, f)?;
            let f = g.mul(f, m[5])?;
            out[s] = g.add(x, f)?;
        }
        Ok(out)
    }

    /// Runs the network on `input` at time `t` with the attention restricted
    /// to `task`'s streams. Parameters are the graph variables in `p`, one
    /// per entry of [`MMDiT::params`].
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &[Var], input: &ModelInput<T>, t: f64, task: TaskKind) -> Result<VelocityVars> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Invalid(format!("timestep {t} outside [0, 1]")));
        }
        let (_, lengths) = self.check_input(input)?;
        let positions = self.positions(input, task)?;
        let mask = build_task_mask_with(lengths, task, self.cfg.drop_captions)?;
        let mut xs = self.embed_graph(g, p, input, lengths)?;
        let ctx = self.context(g, p, t, &positions, mask, lengths)?;
        for block in &self.layout.blocks {
            xs = self.block_graph(g, p, block, xs, &ctx)?;
        }
        let on = active_streams(task, self.cfg.drop_captions);
        let lay = &self.layout;
        let eps = T::from_f64_lossy(self.cfg.norm_eps);
        let mut head = |s: Stream, k: usize, lin: Linear, width: usize| -> Result<Var> {
            let len = lengths[s.index()];
            if !on[s.index()] || len == 0 {
                return Ok(g.constant(Tensor::zeros(&[len, width])));
            }
            let m = lay.final_modulation[k].apply(g, p, ctx.c)?;
            let parts = g.split(m, &[self.cfg.d_model; 2], 0)?;
            let h = g.rms_norm(xs[s.index()], p[lay.final_norm[k].0], eps)?;
            let h = modulate(g, h, parts[0], parts[1])?;
            lin.apply(g, p, h)
        };
        let video = head(Stream::Video, 0, lay.video_head, self.cfg.video_token_dim())?;
        let audio = head(Stream::Audio, 1, lay.audio_head, self.cfg.audio_latent_channels)?;
        Ok(VelocityVars { video, audio })
    }

    /// Inference forward: `(video velocity [L_V, C_v·p²], audio velocity [L_A, C_a])`.
    pub fn forward(&self, input: &ModelInput<T>, t: f64, task: TaskKind) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward_graph(&mut g, &p, input, t, task)?;
        Ok((g.value(out.video).clone(), g.value(out.audio).clone()))
    }

    /// One joint block applied to an embedded bundle.
    pub fn block_forward(&self, layer: usize, bundle: &StreamBundle<T>, t: f64, mask: &AttentionMask) -> Result<StreamBundle<T>> {
        let block = self
            .layout
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("model has {} layers, asked for {layer}", self.cfg.layers)))?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xs = bundle.streams.clone().map(|s| g.constant(s));
        let ctx = self.context(&mut g, &p, t, &bundle.positions, mask.clone(), bundle.lengths())?;
        let out = self.block_graph(&mut g, &p, block, xs, &ctx)?;
        Ok(StreamBundle {
            streams: out.map(|v| g.value(v).clone()),
            positions: bundle.positions.clone(),
        })
    }

    /// Graph version of [`MMDiT::block_forward`] taking stream variables.
    pub fn block_forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        layer: usize,
        xs: [Var; 4],
        positions: &PositionGrid,
        t: f64,
        mask: &AttentionMask,
    ) -> Result<[Var; 4]> {
        let lengths = xs.map(|v| g.shape(v)[0]);
        let ctx = self.context(g, p, t, positions, mask.clone(), lengths)?;
        self.block_graph(g, p, &self.layout.blocks[layer], xs, &ctx)
    }
}

/// `h ⊙ (1 + scale) + shift` with per-feature `scale`, `shift`.
fn modulate<T: Element>(g: &mut Graph<T>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let hs = g.mul(h, scale)?;
    let h = g.add(h, hs)?;
    g.add(h, shift)
}

/// Whether each stream is active; a mask that splits a stream is rejected.
fn stream_activity(mask: &AttentionMask, table: &SegmentTable) -> Result<[bool; 4]> {
    if mask.len() != table.total() {
        return Err(shape_err!(
            "mask covers {} tokens, bundle has {}",
            mask.len(),
            table.total()
        ));
    }
    let mut out = [false; 4];
    for s in Stream::ALL {
        let bits = &mask.active()[table.range(s)];
        let on = bits.first().copied().unwrap_or(false);
        if bits.iter().any(|&b| b != on) {
            return Err(Error::Invalid(format!("mask partially covers the {s:?} stream")));
        }
        out[s.index()] = on;
    }
    Ok(out)
}
