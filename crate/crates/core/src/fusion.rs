//! Stream fusion (gated, static, single-stream) and the temporal
//! transformer head shared by teacher and student.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureSequence;
use crate::error::{invalid, shape, Error, Result};
use crate::nn::{softmax, LayerNorm, LayerNormCache, Linear, TransformerLayer, TransformerLayerCache};
use crate::params::{gaussian, Parameters};
use crate::rng::Rng;

/// Per-timestep stream weights `[T, 2]`: column 0 dark, column 1 retinex.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub data: Array2<f64>,
}

impl GateWeights {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn constant(steps: usize, dark: f64) -> Self {
        Self { data: Array2::from_shape_fn((steps, 2), |(_, j)| if j == 0 { dark } else { 1.0 - dark }) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.ncols() != 2 {
            return Err(shape(format!("gate weights need 2 columns, got {}", self.data.ncols())));
        }
        for (t, row) in self.data.axis_iter(Axis(0)).enumerate() {
            let sum = row[0] + row[1];
            if row.iter().any(|&w| !(0.0..=1.0).contains(&w)) || (sum - 1.0).abs() > Self::TOLERANCE {
                return Err(Error::Invariant(format!("gate row {t} = ({}, {}) is not on the simplex", row[0], row[1])));
            }
        }
        Ok(())
    }
}

fn check_pair(dark: &Array2<f64>, ret: &Array2<f64>) -> Result<()> {
    if dark.dim() != ret.dim() {
        return Err(shape(format!("dark stream {:?} and retinex stream {:?} differ", dark.dim(), ret.dim())));
    }
    Ok(())
}

/// Two-layer rectified MLP scoring `[f_dark ; f_ret]` at each timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMlp {
    pub hidden: Linear,
    pub output: Linear,
}

pub struct GateCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    weights: Array2<f64>,
    dark: Array2<f64>,
    ret: Array2<f64>,
}

impl GateCache {
    pub fn weights(&self) -> GateWeights {
        GateWeights { data: self.weights.clone() }
    }

    pub fn activation_signature(&self) -> u64 {
        self.pre.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ (*v > 0.0) as u64).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

impl GateMlp {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        Self { hidden: Linear::new(2 * channels, channels, rng), output: Linear::new(channels, 2, rng) }
    }

    pub fn zeros(channels: usize) -> Self {
        Self { hidden: Linear::zeros(2 * channels, channels), output: Linear::zeros(channels, 2) }
    }

    fn forward(&self, dark: &Array2<f64>, ret: &Array2<f64>) -> GateCache {
        let input = concatenate![Axis(1), *dark, *ret];
        let pre = self.hidden.forward(&input);
        let act = pre.mapv(|v| v.max(0.0));
        let logits = self.output.forward(&act);
        let mut weights = Array2::zeros((dark.nrows(), 2));
        for (t, row) in logits.axis_iter(Axis(0)).enumerate() {
            let p = softmax(&[row[0], row[1]]);
            weights[[t, 0]] = p[0];
            weights[[t, 1]] = p[1];
        }
        GateCache { input, pre, act, weights, dark: dark.clone(), ret: ret.clone() }
    }

    /// Returns `(d dark, d ret)` given `d loss / d fused`; accumulates into `grads`.
    fn backward(&self, cache: &GateCache, d_fused: &Array2<f64>, grads: &mut GateMlp) -> (Array2<f64>, Array2<f64>) {
        let w = &cache.weights;
        let steps = w.nrows();
        let c = cache.dark.ncols();
        let mut d_dark = Array2::zeros((steps, c));
        let mut d_ret = Array2::zeros((steps, c));
        let mut d_logits = Array2::zeros((steps, 2));
        for t in 0..steps {
            let g = d_fused.row(t);
            d_dark.row_mut(t).scaled_add(w[[t, 0]], &g);
            d_ret.row_mut(t).scaled_add(w[[t, 1]], &g);
            let dw0 = g.dot(&cache.dark.row(t));
            let dw1 = g.dot(&cache.ret.row(t));
            let mean = w[[t, 0]] * dw0 + w[[t, 1]] * dw1;
            d_logits[[t, 0]] = w[[t, 0]] * (dw0 - mean);
            d_logits[[t, 1]] = w[[t, 1]] * (dw1 - mean);
        }
        let mut d_act = self.output.backward(&cache.act, &d_logits, &mut grads.output);
        ndarray::Zip::from(&mut d_act).and(&cache.pre).for_each(|g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let d_input = self.hidden.backward(&cache.input, &d_act, &mut grads.hidden);
        d_dark += &d_input.slice(s![.., ..c]);
        d_ret += &d_input.slice(s![.., c..]);
        (d_dark, d_ret)
    }
}

/// Gate weights `softmax(MLP([f_t^dark ; f_t^ret]))` for every timestep.
pub fn dff_gate(seq_dark: &FeatureSequence, seq_ret: &FeatureSequence, gate: &GateMlp) -> Result<GateWeights> {
    check_pair(&seq_dark.data, &seq_ret.data)?;
    if gate.hidden.fan_in() != 2 * seq_dark.channels() {
        return Err(shape(format!(
            "gate expects {} input features, streams give {}",
            gate.hidden.fan_in(),
            2 * seq_dark.channels()
        )));
    }
    Ok(gate.forward(&seq_dark.data, &seq_ret.data).weights())
}

/// `f_t = w_t^dark f_t^dark + w_t^ret f_t^ret`.
pub fn dff_fuse(seq_dark: &FeatureSequence, seq_ret: &FeatureSequence, weights: &GateWeights) -> Result<FeatureSequence> {
    check_pair(&seq_dark.data, &seq_ret.data)?;
    weights.validate()?;
    if weights.data.nrows() != seq_dark.len() {
        return Err(shape(format!("{} gate rows for {} timesteps", weights.data.nrows(), seq_dark.len())));
    }
    let wd = weights.data.column(0).insert_axis(Axis(1));
    let wr = weights.data.column(1).insert_axis(Axis(1));
    Ok(FeatureSequence { data: &seq_dark.data * &wd + &seq_ret.data * &wr })
}

/// Per-timestep `[f_dark ; f_ret]` projected back to `C` channels.
pub fn static_concat_fuse(seq_dark: &FeatureSequence, seq_ret: &FeatureSequence, projection: &Linear) -> Result<FeatureSequence> {
    check_pair(&seq_dark.data, &seq_ret.data)?;
    if projection.fan_in() != 2 * seq_dark.channels() {
        return Err(shape(format!("projection expects {} inputs, streams give {}", projection.fan_in(), 2 * seq_dark.channels())));
    }
    let input = concatenate![Axis(1), seq_dark.data, seq_ret.data];
    Ok(FeatureSequence { data: projection.forward(&input) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    Dff,
    Static,
    DarkOnly,
    RetinexOnly,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [FusionVariant::DarkOnly, FusionVariant::RetinexOnly, FusionVariant::Static, FusionVariant::Dff];

    pub fn uses_dark(self) -> bool {
        self != FusionVariant::RetinexOnly
    }

    pub fn uses_retinex(self) -> bool {
        self != FusionVariant::DarkOnly
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionVariant::Dff => "dff",
            FusionVariant::Static => "static",
            FusionVariant::DarkOnly => "dark_only",
            FusionVariant::RetinexOnly => "retinex_only",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dff" => Ok(Self::Dff),
            "static" => Ok(Self::Static),
            "dark_only" | "dark" => Ok(Self::DarkOnly),
            "retinex_only" | "retinex" => Ok(Self::RetinexOnly),
            other => Err(invalid(format!("unknown fusion variant {other:?} (dff|static|dark_only|retinex_only)"))),
        }
    }
}

/// Trainable fusion stage of the teacher.
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    Dff(GateMlp),
    Static(Linear),
    DarkOnly,
    RetinexOnly,
}

pub enum FusionCache {
    Dff(GateCache),
    Static(Array2<f64>),
    Passthrough,
}

impl FusionCache {
    pub fn gate_weights(&self) -> Option<GateWeights> {
        match self {
            FusionCache::Dff(c) => Some(c.weights()),
            _ => None,
        }
    }

    pub fn activation_signature(&self) -> u64 {
        match self {
            FusionCache::Dff(c) => c.activation_signature(),
            _ => 0,
        }
    }
}

impl Fusion {
    pub fn new(variant: FusionVariant, channels: usize, rng: &mut Rng) -> Self {
        match variant {
            FusionVariant::Dff => Fusion::Dff(GateMlp::new(channels, rng)),
            FusionVariant::Static => Fusion::Static(Linear::new(2 * channels, channels, rng)),
            FusionVariant::DarkOnly => Fusion::DarkOnly,
            FusionVariant::RetinexOnly => Fusion::RetinexOnly,
        }
    }

    pub fn variant(&self) -> FusionVariant {
        match self {
            Fusion::Dff(_) => FusionVariant::Dff,
            Fusion::Static(_) => FusionVariant::Static,
            Fusion::DarkOnly => FusionVariant::DarkOnly,
            Fusion::RetinexOnly => FusionVariant::RetinexOnly,
        }
    }

    pub fn forward(&self, dark: Option<&Array2<f64>>, ret: Option<&Array2<f64>>) -> Result<(Array2<f64>, FusionCache)> {
        let need = |s: Option<&Array2<f64>>, name: &str| s.cloned().ok_or_else(|| invalid(format!("{} fusion needs the {name} stream", self.variant())));
        match self {
            Fusion::Dff(gate) => {
                let (d, r) = (need(dark, "dark")?, need(ret, "retinex")?);
                check_pair(&d, &r)?;
                let cache = gate.forward(&d, &r);
                let wd = cache.weights.column(0).insert_axis(Axis(1)).to_owned();
                let wr = cache.weights.column(1).insert_axis(Axis(1)).to_owned();
                Ok((&d * &wd + &r * &wr, FusionCache::Dff(cache)))
            }
            Fusion::Static(proj) => {
                let (d, r) = (need(dark, "dark")?, need(ret, "retinex")?);
                check_pair(&d, &r)?;
                let input = concatenate![Axis(1), d, r];
                Ok((proj.forward(&input), FusionCache::Static(input)))
            }
            Fusion::DarkOnly => Ok((need(dark, "dark")?, FusionCache::Passthrough)),
            Fusion::RetinexOnly => Ok((need(ret, "retinex")?, FusionCache::Passthrough)),
        }
    }

    /// `(d dark, d retinex)` for the streams the variant consumes.
    pub fn backward(&self, cache: &FusionCache, d_fused: &Array2<f64>, grads: &mut Fusion) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
        match (self, cache, grads) {
            (Fusion::Dff(gate), FusionCache::Dff(c), Fusion::Dff(g)) => {
                let (dd, dr) = gate.backward(c, d_fused, g);
                (Some(dd), Some(dr))
            }
            (Fusion::Static(proj), FusionCache::Static(input), Fusion::Static(g)) => {
                let d_in = proj.backward(input, d_fused, g);
                let c = d_fused.ncols();
                (Some(d_in.slice(s![.., ..c]).to_owned()), Some(d_in.slice(s![.., c..]).to_owned()))
            }
            (Fusion::DarkOnly, _, _) => (Some(d_fused.clone()), None),
            (Fusion::RetinexOnly, _, _) => (None, Some(d_fused.clone())),
            _ => unreachable!("fusion cache and gradient layout do not match the module"),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        match self {
            Fusion::Dff(g) => {
                g.hidden.visit(&format!("{prefix}.gate.hidden"), f);
                g.output.visit(&format!("{prefix}.gate.output"), f);
            }
            Fusion::Static(p) => p.visit(&format!("{prefix}.projection"), f),
            Fusion::DarkOnly | Fusion::RetinexOnly => {}
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        match self {
            Fusion::Dff(g) => {
                g.hidden.visit_mut(&format!("{prefix}.gate.hidden"), f);
                g.output.visit_mut(&format!("{prefix}.gate.output"), f);
            }
            Fusion::Static(p) => p.visit_mut(&format!("{prefix}.projection"), f),
            Fusion::DarkOnly | Fusion::RetinexOnly => {}
        }
    }
}

/// Class scores `[K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub data: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalHeadConfig {
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    /// Length `T` of the positional embedding.
    pub seq_len: usize,
    pub ff_mult: usize,
}

impl TemporalHeadConfig {
    pub fn new(model_dim: usize, seq_len: usize, num_classes: usize) -> Self {
        Self { model_dim, num_layers: 2, num_heads: 4, num_classes, seq_len, ff_mult: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(invalid(format!("num_heads {} must divide model_dim {}", self.num_heads, self.model_dim)));
        }
        if self.num_classes < 2 || self.seq_len == 0 || self.ff_mult == 0 {
            return Err(invalid("head needs >= 2 classes, seq_len >= 1 and ff_mult >= 1"));
        }
        Ok(())
    }
}

/// Positional embedding, prepended CLS token, pre-norm transformer layers and
/// a linear classifier on the CLS output.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalHead {
    config: TemporalHeadConfig,
    pub positional: Array2<f64>,
    pub cls_token: Array1<f64>,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
    pub classifier: Linear,
}

pub struct HeadCache {
    layers: Vec<TransformerLayerCache>,
    final_norm: LayerNormCache,
    cls_out: Array1<f64>,
}

impl TemporalHead {
    pub fn new(config: TemporalHeadConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.model_dim;
        let layers = (0..config.num_layers)
            .map(|_| TransformerLayer::new(c, config.num_heads, config.ff_mult * c, rng))
            .collect();
        Ok(Self {
            positional: gaussian((config.seq_len, c), 0.02, rng),
            cls_token: Array1::zeros(c),
            layers,
            final_norm: LayerNorm::new(c),
            classifier: Linear::new(c, config.num_classes, rng),
            config,
        })
    }

    pub fn config(&self) -> &TemporalHeadConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Zeroes every attention and feed-forward weight.
    pub fn zero_mixing(&mut self) {
        for l in &mut self.layers {
            l.zero_mixing();
        }
    }

    pub fn forward(&self, seq: &Array2<f64>) -> Result<(Logits, HeadCache)> {
        let (t, c) = seq.dim();
        if t != self.config.seq_len || c != self.config.model_dim {
            return Err(shape(format!(
                "sequence [{t}, {c}] does not match positional embedding [{}, {}]",
                self.config.seq_len, self.config.model_dim
            )));
        }
        let mut x = Array2::zeros((t + 1, c));
        x.row_mut(0).assign(&self.cls_token);
        x.slice_mut(s![1.., ..]).assign(&(seq + &self.positional));
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x);
            caches.push(cache);
            x = y;
        }
        let (normed, final_norm) = self.final_norm.forward(&x);
        let cls_out = normed.row(0).to_owned();
        let logits = self.classifier.forward_vec(&cls_out);
        Ok((Logits { data: logits }, HeadCache { layers: caches, final_norm, cls_out }))
    }

    /// Returns `d loss / d seq`; accumulates parameter gradients into `grads`.
    pub fn backward(&self, cache: &HeadCache, d_logits: &Array1<f64>, grads: &mut TemporalHead) -> Array2<f64> {
        let d_cls = self.classifier.backward_vec(&cache.cls_out, d_logits, &mut grads.classifier);
        let rows = self.config.seq_len + 1;
        let mut d_normed = Array2::zeros((rows, self.config.model_dim));
        d_normed.row_mut(0).assign(&d_cls);
        let mut dx = self.final_norm.backward(&cache.final_norm, &d_normed, &mut grads.final_norm);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            dx = layer.backward(&cache.layers[i], &dx, &mut grads.layers[i]);
        }
        grads.cls_token += &dx.row(0);
        let d_in = dx.slice(s![1.., ..]).to_owned();
        grads.positional += &d_in;
        d_in
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.positional"), self.positional.view().into_dyn());
        f(&format!("{prefix}.cls_token"), self.cls_token.view().into_dyn());
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
        self.final_norm.visit(&format!("{prefix}.final_norm"), f);
        self.classifier.visit(&format!("{prefix}.classifier"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.positional"), self.positional.view_mut().into_dyn());
        f(&format!("{prefix}.cls_token"), self.cls_token.view_mut().into_dyn());
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
        self.final_norm.visit_mut(&format!("{prefix}.final_norm"), f);
        self.classifier.visit_mut(&format!("{prefix}.classifier"), f);
    }
}

impl Parameters for TemporalHead {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        TemporalHead::visit(self, "head", f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        TemporalHead::visit_mut(self, "head", f)
    }
}

/// Runs the head on a sequence.
pub fn temporal_head(seq: &FeatureSequence, head: &TemporalHead) -> Result<Logits> {
    Ok(head.forward(&seq.data)?.0)
}
