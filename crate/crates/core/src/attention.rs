//! Omni-full attention: the four token streams are concatenated in the order
//! video, video caption, audio caption, audio; attention runs once over the
//! joint sequence; the result is split back per stream. Task masks switch
//! whole streams on or off.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Element, Graph, RotaryTables, Tensor, Var};
use crate::rope::PositionGrid;
use crate::tasks::TaskKind;

/// The four token streams, in canonical concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Video,
    VideoText,
    AudioText,
    Audio,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Video, Stream::VideoText, Stream::AudioText, Stream::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_media(self) -> bool {
        matches!(self, Stream::Video | Stream::Audio)
    }
}

/// Per-stream lengths `(L_V, L_VT, L_AT, L_A)`.
pub type StreamLengths = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct StreamBundle<T> {
    /// `[L_s, d_model]` per stream, canonical order.
    pub streams: [Tensor<T>; 4],
    /// Positions of the concatenated sequence.
    pub positions: PositionGrid,
}

impl<T: Element> StreamBundle<T> {
    pub fn lengths(&self) -> StreamLengths {
        std::array::from_fn(|i| self.streams[i].shape()[0])
    }

    pub fn total_len(&self) -> usize {
        self.lengths().iter().sum()
    }

    pub fn stream(&self, s: Stream) -> &Tensor<T> {
        &self.streams[s.index()]
    }
}

/// Offsets of each stream in the concatenated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentTable {
    pub offsets: [usize; 4],
    pub lengths: StreamLengths,
}

impl SegmentTable {
    pub fn new(lengths: StreamLengths) -> Self {
        let mut offsets = [0; 4];
        for i in 1..4 {
            offsets[i] = offsets[i - 1] + lengths[i - 1];
        }
        Self { offsets, lengths }
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn range(&self, s: Stream) -> std::ops::Range<usize> {
        let i = s.index();
        self.offsets[i]..self.offsets[i] + self.lengths[i]
    }
}

/// Token-level on/off mask over the concatenated sequence. An inactive token
/// neither attends nor is attended to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    active: Vec<bool>,
}

impl AttentionMask {
    pub fn new(active: Vec<bool>) -> Result<Self> {
        if !active.iter().any(|&a| a) {
            return Err(Error::Invalid("attention mask has no active token".into()));
        }
        Ok(Self { active })
    }

    pub fn full(len: usize) -> Result<Self> {
        Self::new(vec![true; len])
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }
}

/// Which streams a task attends over. With `drop_captions` the caption
/// streams are switched off as well.
pub fn active_streams(task: TaskKind, drop_captions: bool) -> [bool; 4] {
    let (video, audio) = (task.uses_video(), task.uses_audio());
    [video, video && !drop_captions, audio && !drop_captions, audio]
}

pub fn build_task_mask(lengths: StreamLengths, task: TaskKind) -> Result<AttentionMask> {
    build_task_mask_with(lengths, task, false)
}

pub fn build_task_mask_with(
    lengths: StreamLengths,
    task: TaskKind,
    drop_captions: bool,
) -> Result<AttentionMask> {
    let on = active_streams(task, drop_captions);
    for s in [Stream::Video, Stream::Audio] {
        if on[s.index()] && lengths[s.index()] == 0 {
            return Err(Error::Task(format!(
                "{task} needs a non-empty {s:?} stream"
            )));
        }
    }
    let mut active = Vec::with_capacity(lengths.iter().sum());
    for (i, &len) in lengths.iter().enumerate() {
        active.extend(std::iter::repeat(on[i]).take(len));
    }
    AttentionMask::new(active)
}

pub fn concat_streams<T: Element>(bundle: &StreamBundle<T>) -> Result<(Tensor<T>, SegmentTable)> {
    let d = bundle.streams[0].shape().get(1).copied().unwrap_or(0);
    for s in &bundle.streams {
        if s.rank() != 2 || s.shape()[1] != d {
            return Err(shape_err!(
                "stream shape {:?} does not match d_model {d}",
                s.shape()
            ));
        }
    }
    let table = SegmentTable::new(bundle.lengths());
    let mut data = Vec::with_capacity(table.total() * d);
    for s in &bundle.streams {
        data.extend_from_slice(s.data());
    }
    Ok((Tensor::new(&[table.total(), d], data)?, table))
}

pub fn split_streams<T: Element>(
    x: &Tensor<T>,
    table: &SegmentTable,
    positions: PositionGrid,
) -> Result<StreamBundle<T>> {
    if x.rank() != 2 || x.shape()[0] != table.total() {
        return Err(shape_err!(
            "cannot split {:?} by segment lengths {:?}",
            x.shape(),
            table.lengths
        ));
    }
    let streams = [
        x.slice_rows(table.offsets[0], table.lengths[0])?,
        x.slice_rows(table.offsets[1], table.lengths[1])?,
        x.slice_rows(table.offsets[2], table.lengths[2])?,
        x.slice_rows(table.offsets[3], table.lengths[3])?,
    ];
    Ok(StreamBundle { streams, positions })
}

/// Rotary-embedded, masked attention on the graph. `q`, `k`, `v` are
/// `[L, heads, head_dim]`.
pub fn omni_attention_graph<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
    rope: Rc<RotaryTables<T>>,
) -> Result<Var> {
    let q = g.rope(q, rope.clone())?;
    let k = g.rope(k, rope)?;
    g.attention(q, k, v, Some(mask.active()))
}

/// Value-level [`omni_attention_graph`].
pub fn omni_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
    rope: &RotaryTables<T>,
) -> Result<Tensor<T>> {
    if mask.len() != q.shape().first().copied().unwrap_or(0) {
        return Err(shape_err!(
            "mask covers {} tokens, q is {:?}",
            mask.len(),
            q.shape()
        ));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = omni_attention_graph(&mut g, qv, kv, vv, mask, Rc::new(rope.clone()))?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::rope::{build_bundle_positions, RopeConfig};

    fn identity_tables(len: usize, dim: usize) -> RotaryTables<f64> {
        PositionGrid::text(len).tables(&RopeConfig::new(dim).unwrap())
    }

    fn bundle(lengths: StreamLengths, d: usize, seed: u64) -> StreamBundle<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        StreamBundle {
            streams: std::array::from_fn(|i| Tensor::randn(&[lengths[i], d], &mut r)),
            positions: PositionGrid::text(lengths.iter().sum()),
        }
    }

    #[test]
    fn task_masks_select_streams() {
        let l = [2, 1, 1, 2];
        let active = |t| build_task_mask(l, t).unwrap().active_indices();
        assert_eq!(active(TaskKind::T2V), vec![0, 1, 2]);
        assert_eq!(active(TaskKind::I2V), vec![0, 1, 2]);
        assert_eq!(active(TaskKind::T2A), vec![3, 4, 5]);
        assert_eq!(active(TaskKind::T2AV), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(active(TaskKind::I2AV).len(), 6);
    }

    #[test]
    fn task_mask_requires_media() {
        assert!(build_task_mask([0, 1, 1, 2], TaskKind::T2V).is_err());
        assert!(build_task_mask([2, 1, 1, 0], TaskKind::T2AV).is_err());
        assert!(build_task_mask([2, 1, 1, 0], TaskKind::T2V).is_ok());
    }

    #[test]
    fn caption_dropping_is_opt_in() {
        let m = build_task_mask_with([2, 1, 1, 2], TaskKind::T2AV, true).unwrap();
        assert_eq!(m.active_indices(), vec![0, 1, 4, 5]);
    }

    #[test]
    fn concat_split_round_trip() {
        let b = bundle([3, 2, 0, 4], 5, 1);
        let (x, table) = concat_streams(&b).unwrap();
        assert_eq!(table.offsets, [0, 3, 5, 5]);
        assert_eq!(x.shape(), &[9, 5]);
        let back = split_streams(&x, &table, b.positions.clone()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.streams[2].shape(), &[0, 5]);
    }

    #[test]
    fn concat_of_single_stream_is_identity() {
        let b = bundle([0, 0, 0, 4], 3, 2);
        let (x, _) = concat_streams(&b).unwrap();
        assert_eq!(x, b.streams[3]);
    }

    #[test]
    fn concat_rejects_model_width_mismatch() {
        let mut b = bundle([1, 1, 1, 1], 3, 3);
        b.streams[2] = Tensor::zeros(&[1, 4]);
        assert!(concat_streams(&b).is_err());
        let (x, table) = concat_streams(&bundle([1, 1, 1, 1], 3, 3)).unwrap();
        let bad = SegmentTable::new([1, 1, 1, 2]);
        assert!(split_streams(&x, &bad, PositionGrid::default()).is_err());
        assert!(split_streams(&x, &table, PositionGrid::default()).is_ok());
    }

    #[test]
    fn zero_queries_average_values() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::<f64>::zeros(&[4, 2, 4]);
        let k = Tensor::randn(&[4, 2, 4], &mut r);
        let v = Tensor::randn(&[4, 2, 4], &mut r);
        let out = omni_attention(&q, &k, &v, &AttentionMask::full(4).unwrap(), &identity_tables(4, 4)).unwrap();
        for i in 0..4 {
            for h in 0..2 {
                for d in 0..4 {
                    let mean: f64 = (0..4).map(|j| v.get(&[j, h, d])).sum::<f64>() / 4.0;
                    assert!((out.get(&[i, h, d]) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_returns_value() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::<f64>::randn(&[1, 2, 4], &mut r);
        let v = Tensor::randn(&[1, 2, 4], &mut r);
        let out = omni_attention(&q, &q, &v, &AttentionMask::full(1).unwrap(), &identity_tables(1, 4)).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn t2v_mask_matches_reduced_sequence() {
        let lengths = [4, 2, 3, 6];
        let cfg = RopeConfig::new(8).unwrap();
        let full_pos = build_bundle_positions(Some((2, 2, 1)), 2, 3, 6, &cfg).unwrap();
        let reduced_pos = build_bundle_positions(Some((2, 2, 1)), 2, 0, 0, &cfg).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (
            Tensor::<f64>::randn(&[15, 2, 8], &mut r),
            Tensor::<f64>::randn(&[15, 2, 8], &mut r),
            Tensor::<f64>::randn(&[15, 2, 8], &mut r),
        );
        let mask = build_task_mask(lengths, TaskKind::T2V).unwrap();
        let full = omni_attention(&q, &k, &v, &mask, &full_pos.tables(&cfg)).unwrap();
        let keep = 6;
        let reduced = omni_attention(
            &q.slice_rows(0, keep).unwrap(),
            &k.slice_rows(0, keep).unwrap(),
            &v.slice_rows(0, keep).unwrap(),
            &AttentionMask::full(keep).unwrap(),
            &reduced_pos.tables(&cfg),
        )
        .unwrap();
        assert!(full.slice_rows(0, keep).unwrap().max_abs_diff(&reduced) < 1e-12);
        // inactive rows are exactly zero
        assert!(full.slice_rows(keep, 9).unwrap().data().iter().all(|&x| x == 0.0));
    }
}
