//! Synthetic paired audio/video/caption corpus driven by a hidden event
//! sequence, and a nearest-codebook oracle that scores cross-modal
//! alignment.
//!
//! Each sample draws a piecewise-constant event sequence of length `T` with
//! geometric dwell times. Video frame `t` is the video codeword of
//! `events[t]` at every spatial cell; audio frame `k` is the audio codeword
//! of `events[k / r]`; both get i.i.d. Gaussian noise.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::write_tensor_table;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_events: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_len: usize,
    pub video_channels: usize,
    pub audio_channels: usize,
    pub noise_sigma: f64,
    /// Expected run length in frames; switches happen with probability
    /// `1 / mean_dwell` per frame.
    pub mean_dwell: f64,
    /// Quality tags are `U(quality_low, quality_high)`.
    pub quality_low: f64,
    pub quality_high: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_events: 8,
            frames: 8,
            height: 2,
            width: 2,
            audio_len: 64,
            video_channels: 8,
            audio_channels: 8,
            noise_sigma: 0.1,
            mean_dwell: 3.0,
            quality_low: 0.0,
            quality_high: 1.0,
        }
    }
}

impl GeneratorConfig {
    /// Audio frames per video frame.
    pub fn rate_ratio(&self) -> usize {
        self.audio_len / self.frames.max(1)
    }

    pub fn codec(&self) -> CaptionCodec {
        CaptionCodec { n_events: self.n_events, max_duration: self.frames }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_events < 2 {
            return bad(format!("n_events must be at least 2, got {}", self.n_events));
        }
        let dims = [self.frames, self.height, self.width, self.audio_len, self.video_channels, self.audio_channels];
        if dims.contains(&0) {
            return bad("frames, height, width, audio_len and channels must be positive".into());
        }
        if self.audio_len % self.frames != 0 {
            return bad(format!(
                "audio_len {} must be a multiple of frames {}",
                self.audio_len, self.frames
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and nonnegative, got {}", self.noise_sigma));
        }
        if !(self.mean_dwell >= 1.0 && self.mean_dwell.is_finite()) {
            return bad(format!("mean_dwell must be at least 1, got {}", self.mean_dwell));
        }
        if !(0.0 <= self.quality_low && self.quality_low <= self.quality_high && self.quality_high <= 1.0) {
            return bad(format!(
                "quality range [{}, {}] must lie inside [0, 1]",
                self.quality_low, self.quality_high
            ));
        }
        Ok(())
    }
}

/// Event codewords for each modality: `[K, C]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub video: Tensor<f64>,
    pub audio: Tensor<f64>,
}

impl Codebooks {
    /// Codewords with squared norm `C`, derived from the seed alone.
    /// Orthogonal when `K ≤ C`.
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let video = codebook(cfg.n_events, cfg.video_channels, &mut rng);
        let audio = codebook(cfg.n_events, cfg.audio_channels, &mut rng);
        let books = Self { video, audio };
        let sep = books.min_separation();
        if sep <= 4.0 * cfg.noise_sigma {
            return Err(Error::Invalid(format!(
                "codebook separation {sep:.4} does not exceed 4 x noise_sigma {}",
                cfg.noise_sigma
            )));
        }
        Ok(books)
    }

    pub fn n_events(&self) -> usize {
        self.video.shape()[0]
    }

    /// Smallest pairwise distance within either codebook.
    pub fn min_separation(&self) -> f64 {
        min_pairwise(&self.video).min(min_pairwise(&self.audio))
    }
}

fn codebook<R: Rng>(k: usize, c: usize, rng: &mut R) -> Tensor<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut v = Tensor::<f64>::randn(&[c], rng).into_data();
        if i < c {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        rows.push(v);
    }
    let scale = (c as f64).sqrt();
    let data: Vec<f64> = rows.into_iter().flatten().map(|x| x * scale).collect();
    Tensor::new(&[k, c], data).expect("sized")
}

fn min_pairwise(book: &Tensor<f64>) -> f64 {
    let [k, c] = *book.shape() else { unreachable!() };
    let d = book.data();
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let dist = (0..c).map(|x| (d[i * c + x] - d[j * c + x]).powi(2)).sum::<f64>().sqrt();
            best = best.min(dist);
        }
    }
    best
}

/// Index of the codeword nearest to `x`; ties go to the lower index.
fn nearest(book: &Tensor<f64>, x: &[f64]) -> usize {
    let c = book.shape()[1];
    let mut best = (f64::INFINITY, 0);
    for (i, row) in book.data().chunks(c).enumerate() {
        let d: f64 = row.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn majority(votes: impl Iterator<Item = usize>, k: usize) -> usize {
    let mut counts = vec![0usize; k];
    votes.for_each(|v| counts[v] += 1);
    let top = *counts.iter().max().expect("k >= 1");
    counts.iter().position(|&c| c == top).expect("max exists")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// Hidden event per video frame.
    pub events: Vec<usize>,
    /// `[T, H, W, C_v]`.
    pub video_latent: Tensor<f64>,
    /// `[T_a, C_a]`.
    pub audio_latent: Tensor<f64>,
    pub video_caption: Vec<usize>,
    pub audio_caption: Vec<usize>,
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }
}

/// `n` training samples.
pub fn generate(cfg: &GeneratorConfig, n: usize) -> Result<Vec<SynthSample>> {
    generate_split(cfg, Split::Train, n)
}

/// `n` samples of one split. Sample `i` depends only on `(cfg, split, i)`.
pub fn generate_split(cfg: &GeneratorConfig, split: Split, n: usize) -> Result<Vec<SynthSample>> {
    let books = Codebooks::new(cfg)?;
    (0..n as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((split.stream() << 48) | i);
            sample_one(cfg, &books, &mut rng)
        })
        .collect()
}

/// Piecewise-constant events with geometric dwell times.
pub fn sample_events<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Vec<usize> {
    let k = cfg.n_events;
    let mut events = Vec::with_capacity(cfg.frames);
    let mut e = rng.random_range(0..k);
    for t in 0..cfg.frames {
        if t > 0 && rng.random::<f64>() < 1.0 / cfg.mean_dwell {
            e = (e + rng.random_range(1..k)) % k;
        }
        events.push(e);
    }
    events
}

/// Noisy latents for a given event sequence.
pub fn render<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    books: &Codebooks,
    events: &[usize],
    rng: &mut R,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if events.len() != cfg.frames || events.iter().any(|&e| e >= cfg.n_events) {
        return Err(Error::Invalid(format!(
            "events must be {} ids below {}",
            cfg.frames, cfg.n_events
        )));
    }
    let (cv, ca) = (cfg.video_channels, cfg.audio_channels);
    let mut noise = |n: usize| -> Vec<f64> {
        let z: Tensor<f64> = Tensor::randn(&[n], rng);
        z.into_data().into_iter().map(|x| cfg.noise_sigma * x).collect()
    };
    let cells = cfg.height * cfg.width;
    let mut video = noise(cfg.frames * cells * cv);
    for (t, &e) in events.iter().enumerate() {
        let code = &books.video.data()[e * cv..(e + 1) * cv];
        for cell in 0..cells {
            let base = (t * cells + cell) * cv;
            video[base..base + cv].iter_mut().zip(code).for_each(|(x, c)| *x += c);
        }
    }
    let r = cfg.rate_ratio();
    let mut audio = noise(cfg.audio_len * ca);
    for k in 0..cfg.audio_len {
        let e = events[k / r];
        let code = &books.audio.data()[e * ca..(e + 1) * ca];
        audio[k * ca..(k + 1) * ca].iter_mut().zip(code).for_each(|(x, c)| *x += c);
    }
    Ok((
        Tensor::new(&[cfg.frames, cfg.height, cfg.width, cv], video)?,
        Tensor::new(&[cfg.audio_len, ca], audio)?,
    ))
}

fn sample_one<R: Rng>(cfg: &GeneratorConfig, books: &Codebooks, rng: &mut R) -> Result<SynthSample> {
    let events = sample_events(cfg, rng);
    let (video_latent, audio_latent) = render(cfg, books, &events, rng)?;
    let codec = cfg.codec();
    let quality = cfg.quality_low + (cfg.quality_high - cfg.quality_low) * rng.random::<f64>();
    Ok(SynthSample {
        video_caption: codec.encode(&events, CaptionMode::Video)?,
        audio_caption: codec.encode(&events, CaptionMode::Audio)?,
        events,
        video_latent,
        audio_latent,
        quality,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionMode {
    Video,
    Audio,
}

/// Run-length caption tokens. Per mode the vocabulary is `K` event tokens
/// followed by `max_duration` duration tokens (durations in video frames);
/// audio tokens sit after the whole video range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionCodec {
    pub n_events: usize,
    pub max_duration: usize,
}

impl CaptionCodec {
    fn mode_size(&self) -> usize {
        self.n_events + self.max_duration
    }

    fn offset(&self, mode: CaptionMode) -> usize {
        match mode {
            CaptionMode::Video => 0,
            CaptionMode::Audio => self.mode_size(),
        }
    }

    /// Total vocabulary across both modes.
    pub fn vocab_size(&self) -> usize {
        2 * self.mode_size()
    }

    /// Longest possible caption.
    pub fn max_len(&self) -> usize {
        2 * self.max_duration
    }

    pub fn encode(&self, events: &[usize], mode: CaptionMode) -> Result<Vec<usize>> {
        let off = self.offset(mode);
        let mut out = Vec::new();
        for (e, d) in run_lengths(events) {
            if e >= self.n_events || d > self.max_duration {
                return Err(Error::Invalid(format!(
                    "caption vocabulary overflow: event {e} for {} events, run {d} for max duration {}",
                    self.n_events, self.max_duration
                )));
            }
            out.push(off + e);
            out.push(off + self.n_events + d - 1);
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode): the run-length pairs.
    pub fn decode_runs(&self, tokens: &[usize], mode: CaptionMode) -> Result<Vec<(usize, usize)>> {
        if tokens.len() % 2 != 0 {
            return Err(Error::Invalid(format!("caption of odd length {}", tokens.len())));
        }
        let off = self.offset(mode);
        tokens
            .chunks(2)
            .map(|pair| {
                let (e, d) = (pair[0].wrapping_sub(off), pair[1].wrapping_sub(off + self.n_events));
                if e >= self.n_events || d >= self.max_duration {
                    return Err(Error::Invalid(format!("token pair {pair:?} is not a {mode:?} run")));
                }
                Ok((e, d + 1))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize], mode: CaptionMode) -> Result<Vec<usize>> {
        Ok(self
            .decode_runs(tokens, mode)?
            .into_iter()
            .flat_map(|(e, d)| std::iter::repeat_n(e, d))
            .collect())
    }
}

/// `(event, run length)` pairs of a sequence.
pub fn run_lengths(events: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &e in events {
        match runs.last_mut() {
            Some((last, n)) if *last == e => *n += 1,
            _ => runs.push((e, 1)),
        }
    }
    runs
}

/// Per-frame events decoded from a `[T, H, W, C]` video latent by
/// nearest codeword per cell and a majority vote across cells.
pub fn decode_video<T: Element>(video: &Tensor<T>, books: &Codebooks) -> Result<Vec<usize>> {
    let [frames, h, w, c] = *video.shape() else {
        return Err(shape_err!("video latent must be [T, H, W, C], got {:?}", video.shape()));
    };
    if c != books.video.shape()[1] {
        return Err(shape_err!("video channels {c} vs codebook {:?}", books.video.shape()));
    }
    let x = video.to_f64_vec();
    let cells = h * w;
    Ok((0..frames)
        .map(|t| {
            let votes = (0..cells).map(|i| nearest(&books.video, &x[(t * cells + i) * c..(t * cells + i + 1) * c]));
            majority(votes, books.n_events())
        })
        .collect())
}

/// Per-frame audio events: nearest codeword then a majority over each group
/// of `T_a / frames` consecutive audio frames.
pub fn decode_audio<T: Element>(audio: &Tensor<T>, books: &Codebooks, frames: usize) -> Result<Vec<usize>> {
    let [len, c] = *audio.shape() else {
        return Err(shape_err!("audio latent must be [T_a, C], got {:?}", audio.shape()));
    };
    if c != books.audio.shape()[1] {
        return Err(shape_err!("audio channels {c} vs codebook {:?}", books.audio.shape()));
    }
    if frames == 0 || len % frames != 0 {
        return Err(shape_err!("audio length {len} is not a multiple of {frames} video frames"));
    }
    let r = len / frames;
    let x = audio.to_f64_vec();
    Ok((0..frames)
        .map(|t| majority((t * r..(t + 1) * r).map(|k| nearest(&books.audio, &x[k * c..(k + 1) * c])), books.n_events()))
        .collect())
}

/// Fraction of video frames whose decoded video event equals the decoded
/// audio event over the aligned audio frames.
pub fn oracle_alignment<T: Element>(video: &Tensor<T>, audio: &Tensor<T>, books: &Codebooks) -> Result<f64> {
    let v = decode_video(video, books)?;
    if v.is_empty() {
        return Err(shape_err!("video latent has no frames"));
    }
    let a = decode_audio(audio, books, v.len())?;
    Ok(v.iter().zip(&a).filter(|(x, y)| x == y).count() as f64 / v.len() as f64)
}

/// Writes `corpus.bin` (tensor table: per sample `{i}.video`, `{i}.audio`,
/// `{i}.events`, `{i}.video_caption`, `{i}.audio_caption`, `{i}.quality`, all
/// f64) and `manifest.txt` into `dir`.
pub fn dump_corpus(dir: &Path, cfg: &GeneratorConfig, samples: &[SynthSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids = |v: &[usize]| {
        let f: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        Tensor::<f64>::from_f64(&[f.len()], &f).expect("sized")
    };
    let mut table = Vec::with_capacity(6 * samples.len());
    for (i, s) in samples.iter().enumerate() {
        table.push((format!("{i}.video"), s.video_latent.clone()));
        table.push((format!("{i}.audio"), s.audio_latent.clone()));
        table.push((format!("{i}.events"), ids(&s.events)));
        table.push((format!("{i}.video_caption"), ids(&s.video_caption)));
        table.push((format!("{i}.audio_caption"), ids(&s.audio_caption)));
        table.push((format!("{i}.quality"), Tensor::scalar(s.quality)));
    }
    let mut bytes = Vec::new();
    write_tensor_table(&mut bytes, &table)?;
    let path = dir.join("corpus.bin");
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "samples = {}", samples.len());
    let _ = write!(manifest, "{}", crate::config::render_generator(cfg));
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> GeneratorConfig {
        GeneratorConfig { noise_sigma: 0.0, ..GeneratorConfig::default() }
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let cfg = GeneratorConfig::default();
        let a = generate(&cfg, 5).unwrap();
        assert_eq!(a, generate(&cfg, 5).unwrap());
        assert_eq!(&a[..3], &generate(&cfg, 3).unwrap()[..]);
        assert!(generate(&cfg, 0).unwrap().is_empty());
        let v = generate_split(&cfg, Split::Validation, 1).unwrap();
        assert_ne!(v[0], a[0]);
    }

    #[test]
    fn shapes_follow_the_config() {
        let s = &generate(&GeneratorConfig::default(), 1).unwrap()[0];
        assert_eq!(s.video_latent.shape(), &[8, 2, 2, 8]);
        assert_eq!(s.audio_latent.shape(), &[64, 8]);
        assert_eq!(s.events.len(), 8);
        assert!((0.0..=1.0).contains(&s.quality));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = GeneratorConfig::default();
        assert!(generate(&GeneratorConfig { n_events: 1, ..base.clone() }, 1).is_err());
        assert!(generate(&GeneratorConfig { audio_len: 60, ..base.clone() }, 1).is_err());
        assert!(generate(&GeneratorConfig { noise_sigma: 2.0, ..base.clone() }, 1).is_err());
        assert!(generate(&GeneratorConfig { noise_sigma: -0.1, ..base }, 1).is_err());
    }

    #[test]
    fn orthogonal_codebooks() {
        let books = Codebooks::new(&GeneratorConfig::default()).unwrap();
        assert!((books.min_separation() - 4.0).abs() < 1e-9);
        let d = books.video.data();
        let dot: f64 = (0..8).map(|i| d[i] * d[8 + i]).sum();
        assert!(dot.abs() < 1e-9);
    }

    #[test]
    fn zero_noise_decodes_exactly() {
        let cfg = quiet();
        let books = Codebooks::new(&cfg).unwrap();
        for s in generate(&cfg, 50).unwrap() {
            assert_eq!(decode_video(&s.video_latent, &books).unwrap(), s.events);
            assert_eq!(decode_audio(&s.audio_latent, &books, 8).unwrap(), s.events);
            assert_eq!(oracle_alignment(&s.video_latent, &s.audio_latent, &books).unwrap(), 1.0);
        }
    }

    #[test]
    fn default_noise_decodes_exactly() {
        let cfg = GeneratorConfig::default();
        let books = Codebooks::new(&cfg).unwrap();
        for s in generate(&cfg, 200).unwrap() {
            assert_eq!(decode_video(&s.video_latent, &books).unwrap(), s.events);
            assert_eq!(decode_audio(&s.audio_latent, &books, 8).unwrap(), s.events);
        }
    }

    #[test]
    fn constant_events_align() {
        let cfg = quiet();
        let books = Codebooks::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (v, a) = render(&cfg, &books, &[5; 8], &mut rng).unwrap();
        assert_eq!(oracle_alignment(&v, &a, &books).unwrap(), 1.0);
    }

    #[test]
    fn alignment_length_mismatch_errors() {
        let cfg = quiet();
        let books = Codebooks::new(&cfg).unwrap();
        let s = &generate(&cfg, 1).unwrap()[0];
        let short = s.audio_latent.slice_rows(0, 60).unwrap();
        assert!(oracle_alignment(&s.video_latent, &short, &books).is_err());
    }

    #[test]
    fn single_run_caption() {
        let codec = CaptionCodec { n_events: 8, max_duration: 8 };
        assert_eq!(codec.encode(&[3, 3, 3], CaptionMode::Video).unwrap(), vec![3, 8 + 2]);
        assert_eq!(codec.encode(&[3, 3, 3], CaptionMode::Audio).unwrap(), vec![16 + 3, 16 + 8 + 2]);
        assert_eq!(codec.vocab_size(), 32);
    }

    #[test]
    fn caption_round_trip_and_mode_checks() {
        let codec = CaptionCodec { n_events: 8, max_duration: 8 };
        let events = [1, 1, 4, 4, 4, 0, 7, 7];
        for mode in [CaptionMode::Video, CaptionMode::Audio] {
            let tokens = codec.encode(&events, mode).unwrap();
            assert_eq!(codec.decode(&tokens, mode).unwrap(), events);
            assert_eq!(codec.decode_runs(&tokens, mode).unwrap(), run_lengths(&events));
        }
        let video = codec.encode(&events, CaptionMode::Video).unwrap();
        assert!(codec.decode(&video, CaptionMode::Audio).is_err());
        assert!(codec.encode(&[8], CaptionMode::Video).is_err());
        assert!(codec.encode(&[0; 9], CaptionMode::Video).is_err());
    }

    #[test]
    fn captions_are_injective_over_small_space() {
        let codec = CaptionCodec { n_events: 3, max_duration: 4 };
        let mut seen = std::collections::HashSet::new();
        for code in 0..81usize {
            let events: Vec<usize> = (0..4).map(|i| code / 3usize.pow(i) % 3).collect();
            assert!(seen.insert(codec.encode(&events, CaptionMode::Video).unwrap()));
        }
        assert_eq!(seen.len(), 81);
    }

    #[test]
    fn dwell_times_are_geometric() {
        let cfg = GeneratorConfig { frames: 4000, audio_len: 4000, ..GeneratorConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let events = sample_events(&cfg, &mut rng);
        let runs = run_lengths(&events);
        let mean = events.len() as f64 / runs.len() as f64;
        assert!((mean - 3.0).abs() < 0.2, "{mean}");
    }
}
