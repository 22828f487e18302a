//! Factorized spatiotemporal backbone.
//!
//! Each stage is a spatial `1 x k x k` convolution followed by a temporal
//! `k x 1 x 1` convolution, both rectified except the very last temporal
//! convolution, which stays linear ahead of pooling. A single parameter set
//! serves every stream that is encoded with it.

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::clipgen::{Dims, VideoClip};
use crate::conv::ConvGeom;
use crate::error::{shape, Error, Result};
use crate::params::{fan_in_uniform, Parameters};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStride {
    pub temporal: usize,
    pub spatial: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub stages: Vec<StageStride>,
}

impl Default for EncoderConfig {
    /// Three stages mapping `[3, 16, 32, 32]` to `[32, 8, 4, 4]`.
    fn default() -> Self {
        Self {
            channels: 32,
            stages: vec![
                StageStride { temporal: 2, spatial: 4 },
                StageStride { temporal: 1, spatial: 2 },
                StageStride { temporal: 1, spatial: 1 },
            ],
        }
    }
}

fn kernel_and_pad(stride: usize) -> (usize, usize) {
    let k = stride.max(3);
    (k, (k - stride + 1) / 2)
}

impl EncoderConfig {
    /// Stride schedule mapping `[3, 64, 112, 112]` clips to `[512, 8, 7, 7]`.
    pub fn full_scale() -> Self {
        Self {
            channels: 512,
            stages: vec![
                StageStride { temporal: 2, spatial: 2 },
                StageStride { temporal: 2, spatial: 2 },
                StageStride { temporal: 2, spatial: 2 },
                StageStride { temporal: 1, spatial: 2 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.stages.is_empty() {
            return Err(Error::InvalidArgument("encoder needs channels > 0 and at least one stage".into()));
        }
        if self.stages.iter().any(|s| s.temporal == 0 || s.spatial == 0) {
            return Err(Error::InvalidArgument("strides must be >= 1".into()));
        }
        Ok(())
    }

    pub fn temporal_factor(&self) -> usize {
        self.stages.iter().map(|s| s.temporal).product()
    }

    pub fn spatial_factor(&self) -> usize {
        self.stages.iter().map(|s| s.spatial).product()
    }

    /// Conv geometry of each stage, `(spatial, temporal)`.
    pub fn geometries(&self, in_channels: usize) -> Vec<(ConvGeom, ConvGeom)> {
        let c = self.channels;
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (ks, ps) = kernel_and_pad(s.spatial);
                let (kt, pt) = kernel_and_pad(s.temporal);
                let cin = if i == 0 { in_channels } else { c };
                (
                    ConvGeom { in_channels: cin, out_channels: c, kernel: [1, ks, ks], stride: [1, s.spatial, s.spatial], pad: [0, ps, ps] },
                    ConvGeom { in_channels: c, out_channels: c, kernel: [kt, 1, 1], stride: [s.temporal, 1, 1], pad: [pt, 0, 0] },
                )
            })
            .collect()
    }

    /// Feature-map shape `[C, T, h, w]` for an input clip of `dims`.
    pub fn output_dims(&self, dims: Dims) -> Result<[usize; 4]> {
        self.validate()?;
        let (tf, sf) = (self.temporal_factor(), self.spatial_factor());
        if dims.frames % tf != 0 || dims.height % sf != 0 || dims.width % sf != 0 {
            return Err(shape(format!(
                "clip {dims} incompatible with encoder: frames must be a multiple of {tf}, height and width multiples of {sf}"
            )));
        }
        let mut extent = [dims.frames, dims.height, dims.width];
        for (spatial, temporal) in self.geometries(3) {
            extent = spatial.out_extent(extent)?;
            extent = temporal.out_extent(extent)?;
        }
        let expected = [dims.frames / tf, dims.height / sf, dims.width / sf];
        if extent != expected {
            return Err(shape(format!("stride arithmetic produced {extent:?}, required {expected:?}")));
        }
        Ok([self.channels, extent[0], extent[1], extent[2]])
    }
}

/// Backbone output `[C, T, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array4<f64>,
}

/// Per-timestep features `[T, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub data: Array2<f64>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

/// Unit-norm clip descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub data: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    spatial_geom: ConvGeom,
    temporal_geom: ConvGeom,
    spatial_weight: Array2<f64>,
    spatial_bias: Array1<f64>,
    temporal_weight: Array2<f64>,
    temporal_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Stage>,
}

struct StageCache {
    in_extent: [usize; 3],
    mid_extent: [usize; 3],
    spatial_cols: Array2<f64>,
    spatial_out: Array4<f64>,
    temporal_cols: Array2<f64>,
    temporal_out: Array4<f64>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct EncoderCache {
    stages: Vec<StageCache>,
}

impl EncoderCache {
    /// Hash of every rectifier on/off state; changes iff some unit crossed its kink.
    pub fn activation_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let n = self.stages.len();
        for (i, s) in self.stages.iter().enumerate() {
            let mut feed = |a: &Array4<f64>| {
                for v in a.iter() {
                    h ^= (*v > 0.0) as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            };
            feed(&s.spatial_out);
            if i + 1 < n {
                feed(&s.temporal_out);
            }
        }
        h
    }
}

/// Subtracts each channel's clip-wide mean, removing the DC component that
/// would otherwise dominate every feature.
pub fn center_channels(data: &Array4<f64>) -> Array4<f64> {
    let mut x = data.clone();
    for mut ch in x.outer_iter_mut() {
        let m = ch.mean().unwrap_or(0.0);
        ch.mapv_inplace(|v| v - m);
    }
    x
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, |geom, rng| fan_in_uniform((geom.out_channels, geom.patch_len()), geom.patch_len(), rng), rng)
    }

    /// All weights and biases zero.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        let mut dummy = crate::rng::seeded(0);
        Self::build(config, |geom, _| Array2::zeros((geom.out_channels, geom.patch_len())), &mut dummy)
    }

    fn build(config: EncoderConfig, mut init: impl FnMut(&ConvGeom, &mut Rng) -> Array2<f64>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let stages = config
            .geometries(3)
            .into_iter()
            .map(|(s, t)| Stage {
                spatial_weight: init(&s, rng),
                spatial_bias: Array1::zeros(s.out_channels),
                temporal_weight: init(&t, rng),
                temporal_bias: Array1::zeros(t.out_channels),
                spatial_geom: s,
                temporal_geom: t,
            })
            .collect();
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    fn forward_impl(&self, clip: &VideoClip, keep: bool) -> Result<(FeatureMap, Option<EncoderCache>)> {
        self.config.output_dims(clip.dims())?;
        let last = self.stages.len() - 1;
        let mut x = center_channels(&clip.data);
        let mut caches = Vec::with_capacity(if keep { self.stages.len() } else { 0 });
        for (i, st) in self.stages.iter().enumerate() {
            let (_, t, h, w) = x.dim();
            let in_extent = [t, h, w];
            let (mut mid, spatial_cols) = st.spatial_geom.forward(&st.spatial_weight, &st.spatial_bias, x.view())?;
            mid.mapv_inplace(|v| v.max(0.0));
            let (_, t2, h2, w2) = mid.dim();
            let (mut out, temporal_cols) = st.temporal_geom.forward(&st.temporal_weight, &st.temporal_bias, mid.view())?;
            if i != last {
                out.mapv_inplace(|v| v.max(0.0));
            }
            if keep {
                caches.push(StageCache {
                    in_extent,
                    mid_extent: [t2, h2, w2],
                    spatial_cols,
                    spatial_out: mid,
                    temporal_cols,
                    temporal_out: out.clone(),
                });
            }
            x = out;
        }
        Ok((FeatureMap { data: x }, keep.then_some(EncoderCache { stages: caches })))
    }

    /// Forward pass without retaining activations.
    pub fn encode(&self, clip: &VideoClip) -> Result<FeatureMap> {
        Ok(self.forward_impl(clip, false)?.0)
    }

    pub fn forward(&self, clip: &VideoClip) -> Result<(FeatureMap, EncoderCache)> {
        let (fm, cache) = self.forward_impl(clip, true)?;
        Ok((fm, cache.expect("cache requested")))
    }

    /// Parameter gradients given `d loss / d feature_map`.
    pub fn backward(&self, cache: &EncoderCache, d_out: &Array4<f64>) -> Result<Encoder> {
        let mut grads = self.zeroed();
        self.backward_into(cache, d_out, &mut grads)?;
        Ok(grads)
    }

    /// Adds gradients into an existing accumulator.
    pub fn backward_into(&self, cache: &EncoderCache, d_out: &Array4<f64>, grads: &mut Encoder) -> Result<()> {
        let last = self.stages.len() - 1;
        let mut d = d_out.clone();
        for i in (0..self.stages.len()).rev() {
            let st = &self.stages[i];
            let c = &cache.stages[i];
            if i != last {
                ndarray::Zip::from(&mut d).and(&c.temporal_out).for_each(|g, &o| {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let tg = st.temporal_geom.backward(&st.temporal_weight, &c.temporal_cols, &d, c.mid_extent, true)?;
            let gs = &mut grads.stages[i];
            gs.temporal_weight += &tg.d_weight;
            gs.temporal_bias += &tg.d_bias;
            let mut d_mid = tg.d_input.expect("requested");
            ndarray::Zip::from(&mut d_mid).and(&c.spatial_out).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
            let sg = st.spatial_geom.backward(&st.spatial_weight, &c.spatial_cols, &d_mid, c.in_extent, i > 0)?;
            gs.spatial_weight += &sg.d_weight;
            gs.spatial_bias += &sg.d_bias;
            if let Some(next) = sg.d_input {
                d = next;
            }
        }
        Ok(())
    }
}

impl Parameters for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, s) in self.stages.iter().enumerate() {
            f(&format!("stage{i}.spatial.weight"), s.spatial_weight.view().into_dyn());
            f(&format!("stage{i}.spatial.bias"), s.spatial_bias.view().into_dyn());
            f(&format!("stage{i}.temporal.weight"), s.temporal_weight.view().into_dyn());
            f(&format!("stage{i}.temporal.bias"), s.temporal_bias.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("stage{i}.spatial.weight"), s.spatial_weight.view_mut().into_dyn());
            f(&format!("stage{i}.spatial.bias"), s.spatial_bias.view_mut().into_dyn());
            f(&format!("stage{i}.temporal.weight"), s.temporal_weight.view_mut().into_dyn());
            f(&format!("stage{i}.temporal.bias"), s.temporal_bias.view_mut().into_dyn());
        }
    }
}

/// `out[t, c] = mean over (h, w) of fm[c, t]`.
pub fn spatial_gap(fm: &FeatureMap) -> FeatureSequence {
    let (c, t, _, _) = fm.data.dim();
    let mut out = Array2::<f64>::zeros((t, c));
    for ci in 0..c {
        for ti in 0..t {
            let slice = fm.data.index_axis(Axis(0), ci);
            let plane = slice.index_axis(Axis(0), ti);
            out[[ti, ci]] = plane.mean().unwrap_or(0.0);
        }
    }
    FeatureSequence { data: out }
}

/// Adjoint of [`spatial_gap`]: spreads `d_seq[t, c] / (h w)` over the plane.
pub fn spatial_gap_backward(d_seq: &Array2<f64>, fm_dims: [usize; 4]) -> Array4<f64> {
    let [c, t, h, w] = fm_dims;
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((c, t, h, w), |(ci, ti, _, _)| d_seq[[ti, ci]] * scale)
}

/// Pooled (pre-normalization) channel means and their norm.
pub struct EmbeddingCache {
    pub pooled: Array1<f64>,
    pub norm: f64,
    fm_dims: [usize; 4],
}

/// Global average over `(t, h, w)` per channel, then L2 normalization.
pub fn clip_embedding(fm: &FeatureMap) -> Result<Embedding> {
    Ok(clip_embedding_cached(fm)?.0)
}

pub fn clip_embedding_cached(fm: &FeatureMap) -> Result<(Embedding, EmbeddingCache)> {
    let (c, t, h, w) = fm.data.dim();
    let pooled = fm
        .data
        .to_shape((c, t * h * w))
        .map_err(|e| shape(e.to_string()))?
        .mean_axis(Axis(1))
        .ok_or_else(|| Error::Degenerate("empty feature map".into()))?;
    let norm = pooled.dot(&pooled).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("pooled feature has norm {norm}; cannot normalize")));
    }
    let data = &pooled / norm;
    Ok((Embedding { data }, EmbeddingCache { pooled, norm, fm_dims: [c, t, h, w] }))
}

/// Maps `d loss / d embedding` back onto the feature map.
pub fn clip_embedding_backward(cache: &EmbeddingCache, d_emb: &Array1<f64>) -> Array4<f64> {
    let z = &cache.pooled / cache.norm;
    let d_pooled = (d_emb - &(&z * z.dot(d_emb))) / cache.norm;
    let [c, t, h, w] = cache.fm_dims;
    let scale = 1.0 / (t * h * w) as f64;
    Array4::from_shape_fn((c, t, h, w), |(ci, _, _, _)| d_pooled[ci] * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn default_and_full_scale_shapes() {
        assert_eq!(EncoderConfig::default().output_dims(Dims::new(16, 32, 32)).unwrap(), [32, 8, 4, 4]);
        assert_eq!(EncoderConfig::full_scale().output_dims(Dims::new(64, 112, 112)).unwrap(), [512, 8, 7, 7]);
        let two_stage = EncoderConfig {
            channels: 32,
            stages: vec![StageStride { temporal: 2, spatial: 4 }, StageStride { temporal: 1, spatial: 2 }],
        };
        assert_eq!(two_stage.output_dims(Dims::new(16, 32, 32)).unwrap(), [32, 8, 4, 4]);
    }

    #[test]
    fn incompatible_clip_is_rejected_with_dims() {
        let err = EncoderConfig::default().output_dims(Dims::new(15, 32, 32)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("15x32x32") && msg.contains("multiple of 2"), "{msg}");
    }

    #[test]
    fn forward_matches_declared_shape() {
        let mut r = rng::seeded(1);
        let enc = Encoder::new(EncoderConfig::default(), &mut r).unwrap();
        let clip = VideoClip::new(Array4::from_shape_simple_fn((3, 16, 32, 32), || r.random_range(0.0..1.0)), 8.0).unwrap();
        let fm = enc.encode(&clip).unwrap();
        assert_eq!(fm.data.shape(), &[32, 8, 4, 4]);
        assert!(fm.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_network_gives_zero_features() {
        let enc = Encoder::zeros(EncoderConfig::default()).unwrap();
        let clip = VideoClip::new(Array4::from_elem((3, 16, 32, 32), 0.7), 8.0).unwrap();
        assert!(enc.encode(&clip).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_closed_forms() {
        let fm = FeatureMap { data: Array4::from_elem((4, 3, 2, 5), 1.5) };
        assert!(spatial_gap(&fm).data.iter().all(|&v| v == 1.5));
        let mut data = Array4::zeros((4, 3, 2, 5));
        data[[2, 1, 1, 3]] = 7.0;
        let seq = spatial_gap(&FeatureMap { data });
        assert_eq!(seq.data.shape(), &[3, 4]);
        assert!((seq.data[[1, 2]] - 0.7).abs() < 1e-15);
        assert_eq!(seq.data.sum(), seq.data[[1, 2]]);
    }

    #[test]
    fn embedding_of_axis_vector_and_zero() {
        let fm = FeatureMap { data: Array4::from_shape_fn((3, 2, 2, 2), |(c, _, _, _)| if c == 0 { 4.0 } else { 0.0 }) };
        let e = clip_embedding(&fm).unwrap();
        assert_eq!(e.data.to_vec(), vec![1.0, 0.0, 0.0]);
        let zero = FeatureMap { data: Array4::zeros((3, 2, 2, 2)) };
        assert!(matches!(clip_embedding(&zero), Err(Error::Degenerate(_))));
    }
}
