//! Class-balanced contrastive batches and two-view fast/slow augmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array4, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clipgen::{Split, SyntheticDataset, VideoClip};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    pub fast_stride: usize,
    pub slow_stride: usize,
    pub out_frames: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { crop_scale_range: (0.7, 1.0), flip_prob: 0.5, fast_stride: 1, slow_stride: 2, out_frames: 8 }
    }
}

impl AugmentParams {
    /// Parameters that leave every frame untouched.
    pub fn identity(out_frames: usize) -> Self {
        Self { crop_scale_range: (1.0, 1.0), flip_prob: 0.0, fast_stride: 1, slow_stride: 1, out_frames }
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(invalid(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if self.fast_stride == 0 || self.slow_stride == 0 || self.out_frames == 0 {
            return Err(invalid("strides and out_frames must be positive"));
        }
        let needed = self.out_frames * self.fast_stride.max(self.slow_stride);
        if needed > frames {
            return Err(invalid(format!(
                "clip of {frames} frames too short for {} output frames at stride {}",
                self.out_frames,
                self.fast_stride.max(self.slow_stride)
            )));
        }
        Ok(())
    }
}

/// Draws `n_c` distinct train classes and `n_v` distinct train clips of each.
/// Returns `(clip_id, class_id)` grouped by class.
pub fn balanced_batch(dataset: &SyntheticDataset, n_c: usize, n_v: usize, rng: &mut Rng) -> Result<Vec<(u32, usize)>> {
    let mut by_class: BTreeMap<usize, Vec<u32>> = (0..dataset.num_classes).map(|k| (k, Vec::new())).collect();
    for r in dataset.records(Split::Train) {
        by_class.entry(r.class_id).or_default().push(r.id);
    }
    balanced_from_pools(&by_class, n_c, n_v, rng)
}

/// [`balanced_batch`] over explicit per-class clip pools.
pub fn balanced_from_pools(by_class: &BTreeMap<usize, Vec<u32>>, n_c: usize, n_v: usize, rng: &mut Rng) -> Result<Vec<(u32, usize)>> {
    if n_c == 0 || n_v == 0 {
        return Err(invalid("n_c and n_v must be positive"));
    }
    let eligible: Vec<usize> = by_class.iter().filter(|(_, ids)| ids.len() >= n_v).map(|(&k, _)| k).collect();
    if eligible.len() < n_c {
        let deficient = by_class
            .iter()
            .find(|(_, ids)| ids.len() < n_v)
            .map(|(k, ids)| format!("class {k} has {} train clips", ids.len()))
            .unwrap_or_else(|| format!("only {} classes exist", by_class.len()));
        return Err(Error::Insufficient(format!(
            "need {n_c} classes with >= {n_v} train clips, found {}; {deficient}",
            eligible.len()
        )));
    }
    let mut out = Vec::with_capacity(n_c * n_v);
    for ci in index::sample(rng, eligible.len(), n_c) {
        let class = eligible[ci];
        let ids = &by_class[&class];
        for vi in index::sample(rng, ids.len(), n_v) {
            out.push((ids[vi], class));
        }
    }
    Ok(out)
}

/// Plain shuffled minibatches of `ids`, last one possibly short.
pub fn shuffled_batches<T: Clone>(ids: &[T], batch: usize, rng: &mut Rng) -> Vec<Vec<T>> {
    let mut v = ids.to_vec();
    v.shuffle(rng);
    v.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// One drawn spatial transform: optional horizontal flip, then the crop
/// `[y0, y0 + crop_h) x [x0, x0 + crop_w)` resized back to the frame size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialDraw {
    pub flip: bool,
    pub crop_h: usize,
    pub crop_w: usize,
    pub y0: usize,
    pub x0: usize,
}

impl SpatialDraw {
    pub fn identity(height: usize, width: usize) -> Self {
        Self { flip: false, crop_h: height, crop_w: width, y0: 0, x0: 0 }
    }

    pub fn draw(params: &AugmentParams, height: usize, width: usize, rng: &mut Rng) -> Self {
        let flip = rng.random::<f64>() < params.flip_prob;
        let (lo, hi) = params.crop_scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let crop_h = ((scale * height as f64).round() as usize).clamp(2, height);
        let crop_w = ((scale * width as f64).round() as usize).clamp(2, width);
        let y0 = rng.random_range(0..=height - crop_h);
        let x0 = rng.random_range(0..=width - crop_w);
        Self { flip, crop_h, crop_w, y0, x0 }
    }
}

/// Applies one spatial transform to every frame; output keeps the input size.
pub fn spatial_augment(clip: &VideoClip, draw: &SpatialDraw) -> Result<VideoClip> {
    let d = clip.dims();
    if draw.crop_h < 2 || draw.crop_w < 2 || draw.y0 + draw.crop_h > d.height || draw.x0 + draw.crop_w > d.width {
        return Err(Error::Degenerate(format!("crop {draw:?} does not fit a {}x{} frame", d.height, d.width)));
    }
    let src = if draw.flip { clip.data.slice(s![.., .., .., ..;-1]).to_owned() } else { clip.data.clone() };
    if draw.crop_h == d.height && draw.crop_w == d.width {
        return Ok(VideoClip { data: src, fps_tag: clip.fps_tag });
    }
    let (ys, xs) = (sample_grid(draw.y0, draw.crop_h, d.height), sample_grid(draw.x0, draw.crop_w, d.width));
    let mut out = Array4::zeros(src.raw_dim());
    for c in 0..3 {
        for t in 0..d.frames {
            let plane = src.slice(s![c, t, .., ..]);
            for (i, &(y, wy)) in ys.iter().enumerate() {
                for (j, &(x, wx)) in xs.iter().enumerate() {
                    let y1 = (y + 1).min(d.height - 1);
                    let x1 = (x + 1).min(d.width - 1);
                    let top = plane[[y, x]] * (1.0 - wx) + plane[[y, x1]] * wx;
                    let bottom = plane[[y1, x]] * (1.0 - wx) + plane[[y1, x1]] * wx;
                    out[[c, t, i, j]] = top * (1.0 - wy) + bottom * wy;
                }
            }
        }
    }
    Ok(VideoClip { data: out, fps_tag: clip.fps_tag })
}

/// Source coordinate (integer part, fraction) for each of `n` output samples
/// spread corner-to-corner over `[start, start + len - 1]`.
fn sample_grid(start: usize, len: usize, n: usize) -> Vec<(usize, f64)> {
    (0..n)
        .map(|i| {
            let pos = start as f64 + i as f64 * (len - 1) as f64 / (n - 1).max(1) as f64;
            let base = pos.floor();
            (base as usize, pos - base)
        })
        .collect()
}

/// Frames `start, start + stride, ...`, `n` of them.
pub fn temporal_subsample(clip: &VideoClip, start: usize, stride: usize, n: usize) -> Result<VideoClip> {
    let frames = clip.dims().frames;
    if stride == 0 || n == 0 || start + (n - 1) * stride >= frames {
        return Err(invalid(format!("cannot take {n} frames at stride {stride} from offset {start} of {frames}")));
    }
    let idx: Vec<usize> = (0..n).map(|k| start + k * stride).collect();
    Ok(VideoClip { data: clip.data.select(Axis(1), &idx), fps_tag: clip.fps_tag / stride as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SslVariant {
    None,
    SpatialOnly,
    TemporalOnly,
    #[default]
    Both,
}

impl SslVariant {
    pub const ALL: [SslVariant; 4] = [SslVariant::None, SslVariant::SpatialOnly, SslVariant::TemporalOnly, SslVariant::Both];

    pub fn label(self) -> &'static str {
        match self {
            SslVariant::None => "none",
            SslVariant::SpatialOnly => "spatial_only",
            SslVariant::TemporalOnly => "temporal_only",
            SslVariant::Both => "both",
        }
    }
}

impl fmt::Display for SslVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SslVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SslVariant::None),
            "spatial_only" | "spatial" => Ok(SslVariant::SpatialOnly),
            "temporal_only" | "temporal" => Ok(SslVariant::TemporalOnly),
            "both" => Ok(SslVariant::Both),
            other => Err(invalid(format!("unknown ssl variant {other:?} (none|spatial_only|temporal_only|both)"))),
        }
    }
}

/// Everything drawn for one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewDraw {
    pub start: usize,
    pub stride: usize,
    pub spatial: SpatialDraw,
}

fn draw_start(frames: usize, stride: usize, n: usize, rng: &mut Rng) -> usize {
    let span = (n - 1) * stride + 1;
    rng.random_range(0..=frames - span)
}

/// Draws the parameters of both views. Each view's parameters come from its
/// own draws; nothing is shared unless the variant removes that axis.
pub fn draw_views(frames: usize, height: usize, width: usize, params: &AugmentParams, variant: SslVariant, rng: &mut Rng) -> Result<(ViewDraw, ViewDraw)> {
    params.validate(frames)?;
    let n = params.out_frames;
    let ident = SpatialDraw::identity(height, width);
    let spatial = |rng: &mut Rng| SpatialDraw::draw(params, height, width, rng);
    match variant {
        SslVariant::None => Err(invalid("ssl variant `none` defines no views")),
        SslVariant::Both => {
            let s1 = draw_start(frames, params.fast_stride, n, rng);
            let a1 = spatial(rng);
            let s2 = draw_start(frames, params.slow_stride, n, rng);
            let a2 = spatial(rng);
            Ok((
                ViewDraw { start: s1, stride: params.fast_stride, spatial: a1 },
                ViewDraw { start: s2, stride: params.slow_stride, spatial: a2 },
            ))
        }
        SslVariant::SpatialOnly => {
            let start = draw_start(frames, params.fast_stride, n, rng);
            let a1 = spatial(rng);
            let a2 = spatial(rng);
            Ok((
                ViewDraw { start, stride: params.fast_stride, spatial: a1 },
                ViewDraw { start, stride: params.fast_stride, spatial: a2 },
            ))
        }
        SslVariant::TemporalOnly => {
            let s1 = draw_start(frames, params.fast_stride, n, rng);
            let s2 = draw_start(frames, params.slow_stride, n, rng);
            Ok((
                ViewDraw { start: s1, stride: params.fast_stride, spatial: ident },
                ViewDraw { start: s2, stride: params.slow_stride, spatial: ident },
            ))
        }
    }
}

pub fn apply_view(clip: &VideoClip, view: &ViewDraw, out_frames: usize) -> Result<VideoClip> {
    spatial_augment(&temporal_subsample(clip, view.start, view.stride, out_frames)?, &view.spatial)
}

/// Fast and slow views of one clip.
pub fn two_view(clip: &VideoClip, params: &AugmentParams, variant: SslVariant, rng: &mut Rng) -> Result<(VideoClip, VideoClip)> {
    let d = clip.dims();
    let (v1, v2) = draw_views(d.frames, d.height, d.width, params, variant, rng)?;
    Ok((apply_view(clip, &v1, params.out_frames)?, apply_view(clip, &v2, params.out_frames)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn probe(frames: usize, h: usize, w: usize) -> VideoClip {
        let data = Array4::from_shape_fn((3, frames, h, w), |(c, t, y, x)| ((c * 7 + t * 13 + y * 3 + x) % 17) as f64 / 17.0);
        VideoClip { data, fps_tag: 8.0 }
    }

    #[test]
    fn identity_augment_is_exact() {
        let clip = probe(4, 12, 10);
        let out = spatial_augment(&clip, &SpatialDraw::identity(12, 10)).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn double_flip_is_identity() {
        let clip = probe(4, 12, 10);
        let mut d = SpatialDraw::identity(12, 10);
        d.flip = true;
        let once = spatial_augment(&clip, &d).unwrap();
        assert_ne!(once, clip);
        assert_eq!(spatial_augment(&once, &d).unwrap(), clip);
    }

    #[test]
    fn bad_crop_rejected() {
        let clip = probe(4, 12, 10);
        let d = SpatialDraw { flip: false, crop_h: 8, crop_w: 8, y0: 6, x0: 0 };
        assert!(matches!(spatial_augment(&clip, &d), Err(Error::Degenerate(_))));
    }

    #[test]
    fn stride_span() {
        let clip = probe(16, 8, 8);
        let p = AugmentParams::default();
        let mut rng = seeded(3);
        let (a, b) = draw_views(16, 8, 8, &p, SslVariant::Both, &mut rng).unwrap();
        assert_eq!((a.stride, b.stride), (1, 2));
        let fast = apply_view(&clip, &a, 8).unwrap();
        let slow = apply_view(&clip, &b, 8).unwrap();
        assert_eq!(fast.dims().frames, 8);
        assert_eq!(slow.dims().frames, 8);
        assert!(two_view(&probe(15, 8, 8), &p, SslVariant::Both, &mut rng).is_err());
    }

    #[test]
    fn deficient_class_named() {
        let mut pools = BTreeMap::new();
        pools.insert(0, vec![1, 2, 3]);
        pools.insert(1, vec![4]);
        let err = balanced_from_pools(&pools, 2, 2, &mut seeded(0)).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
        assert_eq!(balanced_from_pools(&pools, 1, 2, &mut seeded(0)).unwrap().len(), 2);
    }
}
