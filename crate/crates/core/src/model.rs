//! Teacher (dual stream, fused) and student (single stream) models, and the
//! batch loss-and-gradient steps used for training and gradient checking.
//!
//! Per-clip forward/backward passes run through [`crate::par`]; per-clip
//! gradients are then summed in batch order so results do not depend on
//! thread scheduling.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

use crate::clipgen::{Dims, VideoClip};
use crate::encoder::{
    clip_embedding_backward, clip_embedding_cached, spatial_gap, spatial_gap_backward, Embedding, EmbeddingCache, Encoder, EncoderCache,
    EncoderConfig,
};
use crate::error::{invalid, Result};
use crate::fusion::{Fusion, FusionCache, FusionVariant, HeadCache, Logits, TemporalHead, TemporalHeadConfig};
use crate::nn::Linear;
use crate::objectives::{ce_grad, ssl_grad, student_objective, teacher_objective, Component, LossValue};
use crate::par;
use crate::params::Parameters;
use crate::rng::Rng;

/// Architecture shared by teacher and student.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub head_layers: usize,
    pub head_heads: usize,
    pub ff_mult: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), head_layers: 2, head_heads: 4, ff_mult: 4 }
    }
}

impl Architecture {
    pub fn head_config(&self, dims: Dims, num_classes: usize) -> Result<TemporalHeadConfig> {
        let [c, t, _, _] = self.encoder.output_dims(dims)?;
        let cfg = TemporalHeadConfig {
            model_dim: c,
            num_layers: self.head_layers,
            num_heads: self.head_heads,
            num_classes,
            seq_len: t,
            ff_mult: self.ff_mult,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn visit_prefixed<P: Parameters>(p: &P, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
    p.visit(&mut |n, a| f(&format!("{prefix}.{n}"), a));
}

fn visit_mut_prefixed<P: Parameters>(p: &mut P, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
    p.visit_mut(&mut |n, a| f(&format!("{prefix}.{n}"), a));
}

/// One encoded stream with everything needed to backpropagate into the encoder.
pub struct StreamPass {
    fm_dims: [usize; 4],
    cache: EncoderCache,
    pub sequence: Array2<f64>,
    embedding: Option<(Embedding, EmbeddingCache)>,
}

impl StreamPass {
    fn run(encoder: &Encoder, clip: &VideoClip, want_embedding: bool) -> Result<Self> {
        let (fm, cache) = encoder.forward(clip)?;
        let embedding = if want_embedding { Some(clip_embedding_cached(&fm)?) } else { None };
        let d = fm.data.dim();
        Ok(Self { fm_dims: [d.0, d.1, d.2, d.3], cache, sequence: spatial_gap(&fm).data, embedding })
    }

    pub fn embedding(&self) -> Option<&Embedding> {
        self.embedding.as_ref().map(|(e, _)| e)
    }

    fn backward(&self, encoder: &Encoder, d_seq: Option<&Array2<f64>>, d_emb: Option<&Array1<f64>>, grads: &mut Encoder) -> Result<()> {
        let mut d_fm = ndarray::Array4::zeros(self.fm_dims);
        if let Some(ds) = d_seq {
            d_fm += &spatial_gap_backward(ds, self.fm_dims);
        }
        if let (Some(de), Some((_, ec))) = (d_emb, &self.embedding) {
            d_fm += &clip_embedding_backward(ec, de);
        }
        encoder.backward_into(&self.cache, &d_fm, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub head: TemporalHead,
}

pub struct TeacherPass {
    pub dark: Option<StreamPass>,
    pub retinex: Option<StreamPass>,
    fusion: FusionCache,
    head: HeadCache,
    pub logits: Logits,
}

impl TeacherPass {
    /// Changes iff some rectifier in the encoder or gate switched state.
    pub fn activation_signature(&self) -> u64 {
        let mut h = self.fusion.activation_signature();
        for s in [&self.dark, &self.retinex].into_iter().flatten() {
            h = h.rotate_left(17) ^ s.cache.activation_signature();
        }
        h
    }

    pub fn gate_weights(&self) -> Option<crate::fusion::GateWeights> {
        self.fusion.gate_weights()
    }
}

impl Teacher {
    pub fn new(arch: &Architecture, variant: FusionVariant, dims: Dims, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        let head_cfg = arch.head_config(dims, num_classes)?;
        let encoder = Encoder::new(arch.encoder.clone(), rng)?;
        let fusion = Fusion::new(variant, arch.encoder.channels, rng);
        let head = TemporalHead::new(head_cfg, rng)?;
        Ok(Self { encoder, fusion, head })
    }

    pub fn variant(&self) -> FusionVariant {
        self.fusion.variant()
    }

    fn check_streams(&self, dark: Option<&VideoClip>, retinex: Option<&VideoClip>) -> Result<()> {
        let v = self.variant();
        if v.uses_dark() && dark.is_none() || v.uses_retinex() && retinex.is_none() {
            return Err(invalid(format!("{v} teacher is missing an input stream")));
        }
        Ok(())
    }

    pub fn forward(&self, dark: Option<&VideoClip>, retinex: Option<&VideoClip>, want_embeddings: bool) -> Result<TeacherPass> {
        self.check_streams(dark, retinex)?;
        let v = self.variant();
        let dark = match dark.filter(|_| v.uses_dark()) {
            Some(c) => Some(StreamPass::run(&self.encoder, c, want_embeddings)?),
            None => None,
        };
        let retinex = match retinex.filter(|_| v.uses_retinex()) {
            Some(c) => Some(StreamPass::run(&self.encoder, c, want_embeddings)?),
            None => None,
        };
        let (fused, fusion) = self.fusion.forward(dark.as_ref().map(|s| &s.sequence), retinex.as_ref().map(|s| &s.sequence))?;
        let (logits, head) = self.head.forward(&fused)?;
        Ok(TeacherPass { dark, retinex, fusion, head, logits })
    }

    /// Inference-only logits.
    pub fn logits(&self, dark: Option<&VideoClip>, retinex: Option<&VideoClip>) -> Result<Logits> {
        self.check_streams(dark, retinex)?;
        let v = self.variant();
        let seq = |c: Option<&VideoClip>, used: bool| -> Result<Option<Array2<f64>>> {
            match c.filter(|_| used) {
                Some(c) => Ok(Some(spatial_gap(&self.encoder.encode(c)?).data)),
                None => Ok(None),
            }
        };
        let d = seq(dark, v.uses_dark())?;
        let r = seq(retinex, v.uses_retinex())?;
        let (fused, _) = self.fusion.forward(d.as_ref(), r.as_ref())?;
        Ok(self.head.forward(&fused)?.0)
    }

    pub fn backward(
        &self,
        pass: &TeacherPass,
        d_logits: &Array1<f64>,
        d_emb_dark: Option<&Array1<f64>>,
        d_emb_ret: Option<&Array1<f64>>,
        grads: &mut Teacher,
    ) -> Result<()> {
        let d_seq = self.head.backward(&pass.head, d_logits, &mut grads.head);
        let (dd, dr) = self.fusion.backward(&pass.fusion, &d_seq, &mut grads.fusion);
        if let Some(s) = &pass.dark {
            s.backward(&self.encoder, dd.as_ref(), d_emb_dark, &mut grads.encoder)?;
        }
        if let Some(s) = &pass.retinex {
            s.backward(&self.encoder, dr.as_ref(), d_emb_ret, &mut grads.encoder)?;
        }
        Ok(())
    }
}

impl Parameters for Teacher {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        visit_prefixed(&self.encoder, "encoder", f);
        self.fusion.visit("fusion", f);
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        visit_mut_prefixed(&mut self.encoder, "encoder", f);
        self.fusion.visit_mut("fusion", f);
        self.head.visit_mut("head", f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub encoder: Encoder,
    pub head: TemporalHead,
}

pub struct StudentPass {
    stream: StreamPass,
    head: HeadCache,
    pub logits: Logits,
}

impl StudentPass {
    pub fn activation_signature(&self) -> u64 {
        self.stream.cache.activation_signature()
    }
}

impl Student {
    pub fn new(arch: &Architecture, dims: Dims, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        let head_cfg = arch.head_config(dims, num_classes)?;
        let encoder = Encoder::new(arch.encoder.clone(), rng)?;
        let head = TemporalHead::new(head_cfg, rng)?;
        Ok(Self { encoder, head })
    }

    /// Student around a given encoder with a freshly initialized head.
    pub fn with_encoder(encoder: Encoder, arch: &Architecture, dims: Dims, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        let head = TemporalHead::new(arch.head_config(dims, num_classes)?, rng)?;
        Ok(Self { encoder, head })
    }

    pub fn forward(&self, dark: &VideoClip) -> Result<StudentPass> {
        let stream = StreamPass::run(&self.encoder, dark, false)?;
        let (logits, head) = self.head.forward(&stream.sequence)?;
        Ok(StudentPass { stream, head, logits })
    }

    /// Single-stream inference on the dark clip.
    pub fn logits(&self, dark: &VideoClip) -> Result<Logits> {
        let seq = spatial_gap(&self.encoder.encode(dark)?);
        Ok(self.head.forward(&seq.data)?.0)
    }

    pub fn backward(&self, pass: &StudentPass, d_logits: &Array1<f64>, grads: &mut Student) -> Result<()> {
        let d_seq = self.head.backward(&pass.head, d_logits, &mut grads.head);
        pass.stream.backward(&self.encoder, Some(&d_seq), None, &mut grads.encoder)
    }
}

impl Parameters for Student {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        visit_prefixed(&self.encoder, "encoder", f);
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        visit_mut_prefixed(&mut self.encoder, "encoder", f);
        self.head.visit_mut("head", f);
    }
}

/// Loss, summed gradient and a combined rectifier signature for one batch.
pub struct BatchOutput<P> {
    pub loss: LossValue,
    pub grads: P,
    pub signature: u64,
}

fn fold_signatures(sigs: impl Iterator<Item = u64>) -> u64 {
    sigs.fold(0x9e37_79b9_7f4a_7c15, |h, s| h.rotate_left(5) ^ s)
}

fn ordered_sum<P: Parameters + Clone>(zero: P, parts: Vec<Result<P>>) -> Result<P> {
    let mut total = zero;
    for p in parts {
        total.accumulate(&p?);
    }
    Ok(total)
}

/// One labeled clip for the teacher with whichever streams its variant reads.
#[derive(Clone, Copy)]
pub struct TeacherSample<'a> {
    pub dark: Option<&'a VideoClip>,
    pub retinex: Option<&'a VideoClip>,
    pub label: usize,
}

/// `CE(fused head) + lambda_sup * SupCon(per-stream embeddings)` over a batch.
/// Embedding rows are ordered clip by clip, dark before retinex.
pub fn teacher_batch(model: &Teacher, batch: &[TeacherSample<'_>], tau: f64, lambda_sup: f64) -> Result<BatchOutput<Teacher>> {
    if batch.is_empty() {
        return Err(invalid("empty teacher batch"));
    }
    let use_supcon = lambda_sup > 0.0;
    let passes: Vec<TeacherPass> = par::map(batch, |s| model.forward(s.dark, s.retinex, use_supcon)).into_iter().collect::<Result<_>>()?;
    let logits: Vec<Array1<f64>> = passes.iter().map(|p| p.logits.data.clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

    let (loss, d_logits, d_emb) = if use_supcon {
        let mut rows = Vec::new();
        let mut emb_labels = Vec::new();
        for (p, s) in passes.iter().zip(batch) {
            for e in [&p.dark, &p.retinex].into_iter().flatten().filter_map(|st| st.embedding()) {
                rows.push(e.data.view());
                emb_labels.push(s.label);
            }
        }
        let emb = ndarray::stack(ndarray::Axis(0), &rows).map_err(|e| invalid(e.to_string()))?;
        let obj = teacher_objective(&logits, &labels, &emb, &emb_labels, tau, lambda_sup)?;
        (obj.value, obj.d_logits, Some(obj.d_embeddings))
    } else {
        let n = batch.len() as f64;
        let mut ce = 0.0;
        let mut d = Vec::with_capacity(batch.len());
        for (z, &y) in logits.iter().zip(&labels) {
            let (l, g) = ce_grad(z, y)?;
            ce += l;
            d.push(g / n);
        }
        (LossValue::single(Component::Ce, ce / n), d, None)
    };

    // Map clip index to its embedding rows.
    let mut row_of = Vec::with_capacity(batch.len());
    let mut next = 0;
    for p in &passes {
        let dark_row = p.dark.as_ref().filter(|s| s.embedding().is_some()).map(|_| {
            next += 1;
            next - 1
        });
        let ret_row = p.retinex.as_ref().filter(|s| s.embedding().is_some()).map(|_| {
            next += 1;
            next - 1
        });
        row_of.push((dark_row, ret_row));
    }
    let zero = model.zeroed();
    let parts = par::map_range(batch.len(), |i| {
        let mut g = zero.clone();
        let (dr, rr) = row_of[i];
        let de = d_emb.as_ref().and_then(|m| dr.map(|r| m.row(r).to_owned()));
        let re = d_emb.as_ref().and_then(|m| rr.map(|r| m.row(r).to_owned()));
        model.backward(&passes[i], &d_logits[i], de.as_ref(), re.as_ref(), &mut g)?;
        Ok(g)
    });
    let grads = ordered_sum(zero, parts)?;
    let signature = fold_signatures(passes.iter().map(|p| p.activation_signature()));
    Ok(BatchOutput { loss, grads, signature })
}

/// One clip for distillation: the dark clip, cached teacher logits and the label.
#[derive(Clone, Copy)]
pub struct KdSample<'a> {
    pub dark: &'a VideoClip,
    pub teacher_logits: &'a Array1<f64>,
    pub label: usize,
}

/// Batch-mean `lambda_ce * CE + lambda_kd * KD` for the student.
pub fn student_batch(model: &Student, batch: &[KdSample<'_>], tau: f64, lambda_ce: f64, lambda_kd: f64) -> Result<BatchOutput<Student>> {
    if batch.is_empty() {
        return Err(invalid("empty distillation batch"));
    }
    let passes: Vec<StudentPass> = par::map(batch, |s| model.forward(s.dark)).into_iter().collect::<Result<_>>()?;
    let zt: Vec<Array1<f64>> = batch.iter().map(|s| s.teacher_logits.clone()).collect();
    let zs: Vec<Array1<f64>> = passes.iter().map(|p| p.logits.data.clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let (loss, d) = student_objective(&zt, &zs, &labels, tau, lambda_ce, lambda_kd)?;
    let zero = model.zeroed();
    let parts = par::map_range(batch.len(), |i| {
        let mut g = zero.clone();
        model.backward(&passes[i], &d[i], &mut g)?;
        Ok(g)
    });
    let grads = ordered_sum(zero, parts)?;
    let signature = fold_signatures(passes.iter().map(|p| p.activation_signature()));
    Ok(BatchOutput { loss, grads, signature })
}

/// Two-view loss on encoder embeddings of the fast and slow views.
pub fn ssl_batch(encoder: &Encoder, fast: &[VideoClip], slow: &[VideoClip], tau: f64) -> Result<BatchOutput<Encoder>> {
    if fast.len() != slow.len() {
        return Err(invalid(format!("{} fast views but {} slow views", fast.len(), slow.len())));
    }
    let views: Vec<&VideoClip> = fast.iter().chain(slow).collect();
    let passes: Vec<StreamPass> = par::map(&views, |c| StreamPass::run(encoder, c, true)).into_iter().collect::<Result<_>>()?;
    let b = fast.len();
    let rows: Vec<_> = passes.iter().map(|p| p.embedding().expect("requested").data.view()).collect();
    let all = ndarray::stack(ndarray::Axis(0), &rows).map_err(|e| invalid(e.to_string()))?;
    let (zf, zs) = (all.slice(ndarray::s![..b, ..]).to_owned(), all.slice(ndarray::s![b.., ..]).to_owned());
    let out = ssl_grad(&zf, &zs, tau)?;
    let d_all = ndarray::concatenate![ndarray::Axis(0), out.d_fast, out.d_slow];
    let zero = encoder.zeroed();
    let parts = par::map_range(passes.len(), |i| {
        let mut g = zero.clone();
        passes[i].backward(encoder, None, Some(&d_all.row(i).to_owned()), &mut g)?;
        Ok(g)
    });
    let grads = ordered_sum(zero, parts)?;
    let signature = fold_signatures(passes.iter().map(|p| p.cache.activation_signature()));
    Ok(BatchOutput { loss: LossValue::single(Component::Ssl, out.loss), grads, signature })
}

/// Linear classifier on standardized pooled features of a frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub linear: Linear,
}

/// Channel means over `(t, h, w)` of the encoder output.
pub fn pooled_features(encoder: &Encoder, clip: &VideoClip) -> Result<Array1<f64>> {
    let seq = spatial_gap(&encoder.encode(clip)?);
    Ok(seq.data.mean_axis(ndarray::Axis(0)).expect("non-empty sequence"))
}

impl LinearProbe {
    pub fn fit_standardizer(features: &Array2<f64>, num_classes: usize, rng: &mut Rng) -> Self {
        let mean = features.mean_axis(ndarray::Axis(0)).expect("non-empty features");
        let std = features.std_axis(ndarray::Axis(0), 0.0).mapv(|s| s.max(1e-8));
        Self { mean, std, linear: Linear::new(features.ncols(), num_classes, rng) }
    }

    pub fn standardize(&self, x: &Array1<f64>) -> Array1<f64> {
        (x - &self.mean) / &self.std
    }

    pub fn logits(&self, feature: &Array1<f64>) -> Logits {
        Logits { data: self.linear.forward_vec(&self.standardize(feature)) }
    }

    /// Mean CE over the batch and its gradient w.r.t. the linear layer.
    pub fn batch(&self, features: &[&Array1<f64>], labels: &[usize]) -> Result<(LossValue, Linear)> {
        let mut grads = self.linear.zeroed();
        let n = features.len() as f64;
        let mut ce = 0.0;
        for (f, &y) in features.iter().zip(labels) {
            let x = self.standardize(f);
            let (l, g) = ce_grad(&self.linear.forward_vec(&x), y)?;
            ce += l;
            self.linear.backward_vec(&x, &(g / n), &mut grads);
        }
        Ok((LossValue::single(Component::Ce, ce / n), grads))
    }
}
