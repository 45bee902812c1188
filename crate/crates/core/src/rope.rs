//! Mixed-dimension rotary positions: 3D (time, height, width) rotations for
//! video tokens and 1D temporal rotations for audio tokens on the same time
//! axis. Caption tokens are not rotated.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Element, RotaryTables, Tensor};

/// How audio temporal IDs relate to video temporal IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AudioTimeMode {
    /// Audio IDs start one past the largest video ID.
    #[default]
    Offset,
    /// Audio frame `k` takes the ID of the video frame it overlaps,
    /// `k * frames / audio_len`.
    SharedClock,
}

impl AudioTimeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AudioTimeMode::Offset => "offset",
            AudioTimeMode::SharedClock => "shared_clock",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "offset" => Some(AudioTimeMode::Offset),
            "shared_clock" => Some(AudioTimeMode::SharedClock),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    /// Sub-block sizes for the (time, height, width) axes.
    pub axis_split: (usize, usize, usize),
    pub base_theta: f64,
    pub audio_time_mode: AudioTimeMode,
}

impl RopeConfig {
    /// Default 2:1:1 split of `head_dim` between time, height and width, in
    /// whole rotation pairs.
    pub fn new(head_dim: usize) -> Result<Self> {
        let quarter = 2 * (head_dim / 8);
        let cfg = Self {
            head_dim,
            axis_split: (head_dim.saturating_sub(2 * quarter), quarter, quarter),
            base_theta: 10_000.0,
            audio_time_mode: AudioTimeMode::Offset,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.axis_split;
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Invalid(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if t % 2 != 0 || h % 2 != 0 || w % 2 != 0 || t + h + w != self.head_dim {
            return Err(Error::Invalid(format!(
                "rope axis split {:?} must be even parts summing to head_dim {}",
                self.axis_split, self.head_dim
            )));
        }
        if self.base_theta.is_nan() || self.base_theta <= 1.0 {
            return Err(Error::Invalid(format!(
                "rope base_theta must exceed 1, got {}",
                self.base_theta
            )));
        }
        Ok(())
    }

    /// Rotation angles of every coordinate pair for one token, laid out as
    /// time pairs, then height pairs, then width pairs.
    pub fn angles(&self, pos: TokenPosition) -> Vec<f64> {
        let (dt, dh, dw) = self.axis_split;
        let (t, h, w) = match pos {
            TokenPosition::Video { t, h, w } => (t, h, w),
            TokenPosition::Audio { t } => (t, 0, 0),
            TokenPosition::Text => (0, 0, 0),
        };
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (coord, dim) in [(t, dt), (h, dh), (w, dw)] {
            for i in 0..dim / 2 {
                let freq = self.base_theta.powf(-2.0 * i as f64 / dim as f64);
                out.push(coord as f64 * freq);
            }
        }
        out
    }
}

/// Position of one token in the concatenated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenPosition {
    Video { t: usize, h: usize, w: usize },
    /// Audio rotates only the temporal sub-block; height and width are 0.
    Audio { t: usize },
    /// Caption tokens are left unrotated.
    Text,
}

impl TokenPosition {
    pub fn temporal(self) -> Option<usize> {
        match self {
            TokenPosition::Video { t, .. } | TokenPosition::Audio { t } => Some(t),
            TokenPosition::Text => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PositionGrid {
    pub entries: Vec<TokenPosition>,
}

impl PositionGrid {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn text(len: usize) -> Self {
        Self {
            entries: vec![TokenPosition::Text; len],
        }
    }

    pub fn extend(&mut self, other: &PositionGrid) {
        self.entries.extend_from_slice(&other.entries);
    }

    pub fn max_video_t(&self) -> Option<usize> {
        self.entries
            .iter()
            .filter_map(|p| match p {
                TokenPosition::Video { t, .. } => Some(*t),
                _ => None,
            })
            .max()
    }

    pub fn audio_ts(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter_map(|p| match p {
                TokenPosition::Audio { t } => Some(*t),
                _ => None,
            })
            .collect()
    }

    pub fn tables<T: Element>(&self, cfg: &RopeConfig) -> RotaryTables<T> {
        let pairs = cfg.head_dim / 2;
        let mut cos = Vec::with_capacity(self.len() * pairs);
        let mut sin = Vec::with_capacity(self.len() * pairs);
        for &pos in &self.entries {
            for a in cfg.angles(pos) {
                cos.push(T::from_f64_lossy(a.cos()));
                sin.push(T::from_f64_lossy(a.sin()));
            }
        }
        RotaryTables {
            tokens: self.len(),
            pairs,
            cos,
            sin,
        }
    }
}

/// One `(t, h, w)` entry per latent cell in row-major order.
pub fn build_video_positions(frames: usize, height: usize, width: usize) -> Result<PositionGrid> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Invalid(format!(
            "video grid extents must be positive, got ({frames}, {height}, {width})"
        )));
    }
    let mut entries = Vec::with_capacity(frames * height * width);
    for t in 0..frames {
        for h in 0..height {
            for w in 0..width {
                entries.push(TokenPosition::Video { t, h, w });
            }
        }
    }
    Ok(PositionGrid { entries })
}

/// Audio temporal IDs `video_max_t + 1 ..= video_max_t + audio_len`.
pub fn build_audio_positions(audio_len: usize, video_max_t: usize) -> Result<PositionGrid> {
    if audio_len == 0 {
        return Err(Error::Invalid("audio length must be positive".into()));
    }
    Ok(PositionGrid {
        entries: (1..=audio_len)
            .map(|k| TokenPosition::Audio { t: video_max_t + k })
            .collect(),
    })
}

/// Audio IDs on the video clock: frame `k` maps to `k * frames / audio_len`.
pub fn build_audio_positions_shared_clock(audio_len: usize, frames: usize) -> Result<PositionGrid> {
    if audio_len == 0 || frames == 0 {
        return Err(Error::Invalid("audio and video lengths must be positive".into()));
    }
    Ok(PositionGrid {
        entries: (0..audio_len)
            .map(|k| TokenPosition::Audio { t: k * frames / audio_len })
            .collect(),
    })
}

/// Positions of a whole bundle in canonical order: video, video caption,
/// audio caption, audio. Absent media streams have length zero.
pub fn build_bundle_positions(
    video_grid: Option<(usize, usize, usize)>,
    video_caption_len: usize,
    audio_caption_len: usize,
    audio_len: usize,
    cfg: &RopeConfig,
) -> Result<PositionGrid> {
    let mut grid = PositionGrid::default();
    let mut frames = None;
    if let Some((t, h, w)) = video_grid {
        grid.extend(&build_video_positions(t, h, w)?);
        frames = Some(t);
    }
    grid.extend(&PositionGrid::text(video_caption_len));
    grid.extend(&PositionGrid::text(audio_caption_len));
    if audio_len > 0 {
        let audio = match (cfg.audio_time_mode, frames) {
            (AudioTimeMode::SharedClock, Some(f)) => build_audio_positions_shared_clock(audio_len, f)?,
            // Without a video stream the audio clock starts where an
            // empty video grid would end.
            (_, None) => build_audio_positions(audio_len, 0)?,
            (AudioTimeMode::Offset, Some(f)) => build_audio_positions(audio_len, f - 1)?,
        };
        grid.extend(&audio);
    }
    Ok(grid)
}

/// Rotates a `[tokens, heads, head_dim]` tensor by the grid's positions.
pub fn apply_rope<T: Element>(qk: &Tensor<T>, grid: &PositionGrid, cfg: &RopeConfig) -> Result<Tensor<T>> {
    let [tokens, _, dim] = *qk.shape() else {
        return Err(shape_err!(
            "apply_rope expects [tokens, heads, head_dim], got {:?}",
            qk.shape()
        ));
    };
    if tokens != grid.len() || dim != cfg.head_dim {
        return Err(shape_err!(
            "apply_rope: input {:?} vs {} positions and head_dim {}",
            qk.shape(),
            grid.len(),
            cfg.head_dim
        ));
    }
    let mut g = crate::numerics::Graph::new();
    let x = g.constant(qk.clone());
    let y = g.rope(x, Rc::new(grid.tables(cfg)))?;
    Ok(g.value(y).clone())
}
