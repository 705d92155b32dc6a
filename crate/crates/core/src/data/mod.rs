//! Dataset plumbing: slice records, padding and normalization, classical
//! augmentation, deterministic batch iteration, and a synthetic phantom
//! family that stands in for restricted MR data at desk scale.

pub mod pgm;
pub mod phantom;

pub use pgm::{
    load_manifest_dataset, load_slice, read_manifest, read_pgm, write_dataset, write_manifest,
    write_pgm, ManifestRow,
};
pub use phantom::{phantom_generate, PhantomParams};

use crate::error::{Error, Result};
use crate::rng::{child_stream, permutation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One preprocessed 2-D slice, normalized to `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct SliceRecord<E: Scalar> {
    /// Image tensor `[1, H, W]` with every pixel in `[-1, 1]`.
    pub pixels: Tensor<E>,
    pub source_id: String,
    pub slice_index: usize,
    /// Extent before padding, `(rows, cols)`.
    pub original_extent: (usize, usize),
    /// Padding added before the first row / column; odd remainders put the
    /// extra row/column at the bottom/right.
    pub pad_applied: (usize, usize),
}

impl<E: Scalar> SliceRecord<E> {
    pub fn validate(&self) -> Result<()> {
        let s = self.pixels.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Data(format!(
                "slice pixels must be [1,H,W], got {:?}",
                s
            )));
        }
        for v in self.pixels.data() {
            let v = Scalar::to_f64(*v);
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("pixel {v} outside [-1, 1]")));
            }
        }
        for (axis, (extent, orig, pad)) in [
            (s[1], self.original_extent.0, self.pad_applied.0),
            (s[2], self.original_extent.1, self.pad_applied.1),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, t)| (i, t))
        {
            let total = extent.checked_sub(orig).ok_or_else(|| {
                Error::Data(format!("axis {axis}: extent {extent} below original {orig}"))
            })?;
            if total != 2 * pad && total != 2 * pad + 1 {
                return Err(Error::Data(format!(
                    "axis {axis}: padding {pad} inconsistent with {orig} -> {extent}"
                )));
            }
        }
        Ok(())
    }
}

/// Pick one slice out of a volume stack. Interior slices are the useful
/// ones — the first and last slices of an MR volume carry almost no
/// anatomy — so protocols default to slice 64 of a 155-slice volume.
pub fn select_slice<E: Scalar>(volume: &[Tensor<E>], index: usize) -> Result<Tensor<E>> {
    if index >= volume.len() {
        return Err(Error::Data(format!(
            "slice index {index} out of range for depth {}",
            volume.len()
        )));
    }
    Ok(volume[index].clone())
}

/// Center an image inside a `target x target` canvas of zeros (raw
/// background). Odd remainders put the extra row/column at bottom/right.
/// Returns the padded image and the `(top, left)` padding applied.
pub fn zero_pad<E: Scalar>(
    image: &Tensor<E>,
    target: usize,
) -> Result<(Tensor<E>, (usize, usize))> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Data(format!("zero_pad expects [1,H,W], got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    if h > target || w > target {
        return Err(Error::Data(format!(
            "image {h}x{w} larger than pad target {target}"
        )));
    }
    let top = (target - h) / 2;
    let left = (target - w) / 2;
    let mut out = vec![E::lit(0.0); target * target];
    let src = image.data();
    for r in 0..h {
        let dst_off = (top + r) * target + left;
        out[dst_off..dst_off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
    }
    Ok((Tensor::from_vec(&[1, target, target], out)?, (top, left)))
}

/// Undo [`zero_pad`]: cut the `original` window back out of the canvas.
pub fn crop_back<E: Scalar>(
    padded: &Tensor<E>,
    original: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<E>> {
    let s = padded.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Data(format!(
            "crop_back expects [1,H,W], got {:?}",
            s
        )));
    }
    if pad.0 + original.0 > s[1] || pad.1 + original.1 > s[2] {
        return Err(Error::Data("crop window exceeds padded extent".into()));
    }
    let mut out = Vec::with_capacity(original.0 * original.1);
    let src = padded.data();
    for r in 0..original.0 {
        let off = (pad.0 + r) * s[2] + pad.1;
        out.extend_from_slice(&src[off..off + original.1]);
    }
    Tensor::from_vec(&[1, original.0, original.1], out)
}

/// Affine per-slice intensity normalization: min maps to -1, max to +1.
/// A constant slice maps to all `-1`; the second return value reports that
/// degenerate case so callers can warn.
pub fn normalize_intensity<E: Scalar>(raw: &Tensor<E>) -> Result<(Tensor<E>, bool)> {
    if raw.numel() == 0 {
        return Err(Error::Data("cannot normalize an empty image".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in raw.data() {
        let v = Scalar::to_f64(*v);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Ok((Tensor::full(raw.shape(), E::lit(-1.0)), true));
    }
    let scale = 2.0 / (hi - lo);
    let data: Vec<E> = raw
        .data()
        .iter()
        .map(|v| E::lit(((Scalar::to_f64(*v) - lo) * scale - 1.0).clamp(-1.0, 1.0)))
        .collect();
    Ok((Tensor::from_vec(raw.shape(), data)?, false))
}

/// Classical augmentation operations on normalized `[1,H,W]` slices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Clockwise quarter turns.
    Rotate90 { quarter_turns: u32 },
    /// Shift right by `dx`, down by `dy`; vacated pixels fill with -1.
    Translate { dx: i64, dy: i64 },
    /// Keep the central `fraction` of each axis, then resize back to the
    /// original extent with nearest-neighbor sampling.
    CenterCrop { fraction: f64 },
}

pub fn classic_augment<E: Scalar>(image: &Tensor<E>, op: &AugmentOp) -> Result<Tensor<E>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Data(format!(
            "classic_augment expects [1,H,W], got {:?}",
            s
        )));
    }
    let (h, w) = (s[1], s[2]);
    let src = image.data();
    let at = |r: usize, c: usize| src[r * w + c];
    match *op {
        AugmentOp::HFlip => {
            let mut out = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    out.push(at(r, w - 1 - c));
                }
            }
            Tensor::from_vec(s, out)
        }
        AugmentOp::VFlip => {
            let mut out = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    out.push(at(h - 1 - r, c));
                }
            }
            Tensor::from_vec(s, out)
        }
        AugmentOp::Rotate90 { quarter_turns } => {
            let mut cur = image.clone();
            for _ in 0..(quarter_turns % 4) {
                let cs = cur.shape().to_vec();
                let (ch, cw) = (cs[1], cs[2]);
                let cd = cur.data().to_vec();
                let mut out = Vec::with_capacity(ch * cw);
                // clockwise: out[r][c] = in[H-1-c][r], output is W x H
                for r in 0..cw {
                    for c in 0..ch {
                        out.push(cd[(ch - 1 - c) * cw + r]);
                    }
                }
                cur = Tensor::from_vec(&[1, cw, ch], out)?;
            }
            Ok(cur)
        }
        AugmentOp::Translate { dx, dy } => {
            if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
                return Err(Error::Data(format!(
                    "translation ({dx},{dy}) out of range for {h}x{w}"
                )));
            }
            let fill = E::lit(-1.0);
            let mut out = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let sr = r as i64 - dy;
                    let sc = c as i64 - dx;
                    if sr >= 0 && sr < h as i64 && sc >= 0 && sc < w as i64 {
                        out.push(at(sr as usize, sc as usize));
                    } else {
                        out.push(fill);
                    }
                }
            }
            Tensor::from_vec(s, out)
        }
        AugmentOp::CenterCrop { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Data(format!(
                    "crop fraction {fraction} outside (0, 1]"
                )));
            }
            let ch = ((h as f64 * fraction).round() as usize).clamp(1, h);
            let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
            let top = (h - ch) / 2;
            let left = (w - cw) / 2;
            let mut out = Vec::with_capacity(h * w);
            for r in 0..h {
                let sr = top + (((r as f64 + 0.5) * ch as f64 / h as f64) as usize).min(ch - 1);
                for c in 0..w {
                    let sc =
                        left + (((c as f64 + 0.5) * cw as f64 / w as f64) as usize).min(cw - 1);
                    out.push(at(sr, sc));
                }
            }
            Tensor::from_vec(s, out)
        }
    }
}

/// Stack records into one `[N, 1, H, W]` batch tensor.
pub fn stack_records<E: Scalar>(records: &[&SliceRecord<E>]) -> Result<Tensor<E>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("cannot stack zero records".into()))?;
    let s = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(records.len() * first.pixels.numel());
    for r in records {
        if r.pixels.shape() != s {
            return Err(Error::Data(format!(
                "record {} extent {:?} differs from {:?}",
                r.source_id,
                r.pixels.shape(),
                s
            )));
        }
        data.extend_from_slice(r.pixels.data());
    }
    Tensor::from_vec(&[records.len(), 1, s[1], s[2]], data)
}

/// Average-pool a `[N,1,H,W]` batch down to `target x target` (both
/// extents must be power-of-two multiples of the target).
pub fn downsample_to<E: Scalar>(batch: &Tensor<E>, target: usize) -> Result<Tensor<E>> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::Data(format!(
            "downsample_to expects [N,C,H,W], got {:?}",
            s
        )));
    }
    let mut cur = batch.clone();
    while cur.shape()[2] > target || cur.shape()[3] > target {
        if cur.shape()[2] % 2 != 0 || cur.shape()[3] % 2 != 0 || cur.shape()[2] <= target {
            return Err(Error::Data(format!(
                "cannot pool {}x{} down to {target}",
                s[2], s[3]
            )));
        }
        cur = cur.avgpool2x()?;
    }
    if cur.shape()[2] != target || cur.shape()[3] != target {
        return Err(Error::Data(format!(
            "extent {}x{} is not a power-of-two multiple of {target}",
            s[2], s[3]
        )));
    }
    Ok(cur)
}

/// Deterministic epoch-shuffled minibatch stream. Every epoch reshuffles
/// with a fresh child stream of the seed; the last partial batch of each
/// epoch is dropped.
pub struct DatasetIterator<'a, E: Scalar> {
    records: &'a [SliceRecord<E>],
    batch: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl<'a, E: Scalar> DatasetIterator<'a, E> {
    pub fn new(records: &'a [SliceRecord<E>], batch: usize, shuffle_seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if batch == 0 || batch > records.len() {
            return Err(Error::Data(format!(
                "batch size {batch} invalid for {} records",
                records.len()
            )));
        }
        let shape = records[0].pixels.shape();
        for r in records {
            if r.pixels.shape() != shape {
                return Err(Error::Data(format!(
                    "record {} extent {:?} differs from {:?}",
                    r.source_id,
                    r.pixels.shape(),
                    shape
                )));
            }
        }
        let mut rng = child_stream(shuffle_seed, "shuffle", 0);
        let order = permutation(&mut rng, records.len());
        Ok(DatasetIterator {
            records,
            batch,
            seed: shuffle_seed,
            epoch: 0,
            cursor: 0,
            order,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.records.len() / self.batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next `[batch, 1, H, W]` tensor, advancing epochs as needed.
    pub fn next_batch(&mut self) -> Result<Tensor<E>> {
        if self.cursor + self.batch > self.records.len() {
            self.epoch += 1;
            let mut rng = child_stream(self.seed, "shuffle", self.epoch);
            self.order = permutation(&mut rng, self.records.len());
            self.cursor = 0;
        }
        let picks: Vec<&SliceRecord<E>> = self.order[self.cursor..self.cursor + self.batch]
            .iter()
            .map(|&i| &self.records[i])
            .collect();
        self.cursor += self.batch;
        stack_records(&picks)
    }

    /// Batch for an absolute step index, independent of iteration history.
    /// Step `k` always maps to epoch `k / batches_per_epoch`, position
    /// `k % batches_per_epoch`, so a resumed run sees the same batches as
    /// an uninterrupted one.
    pub fn batch_at_step(&mut self, step: u64) -> Result<Tensor<E>> {
        let bpe = self.batches_per_epoch() as u64;
        let epoch = step / bpe;
        let index = (step % bpe) as usize;
        if epoch != self.epoch || self.order.len() != self.records.len() {
            let mut rng = child_stream(self.seed, "shuffle", epoch);
            self.order = permutation(&mut rng, self.records.len());
            self.epoch = epoch;
        }
        self.cursor = (index + 1) * self.batch;
        let start = index * self.batch;
        let picks: Vec<&SliceRecord<E>> = self.order[start..start + self.batch]
            .iter()
            .map(|&i| &self.records[i])
            .collect();
        stack_records(&picks)
    }
}
