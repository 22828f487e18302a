//! Central finite-difference checks of every analytic gradient.
//!
//! End-to-end checks perturb every model parameter. A component whose
//! perturbation flips a rectifier (detected through activation signatures)
//! is skipped, since the loss is not differentiable across the kink; the
//! report counts those. Components that miss the tolerance under the
//! second-order stencil are re-estimated with a fourth-order one.

use ndarray::{Array1, Array2, Array4};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clipgen::{Dims, VideoClip};
use crate::encoder::{EncoderConfig, StageStride};
use crate::error::{invalid, Result};
use crate::fusion::{FusionVariant, TemporalHead};
use crate::model::{student_batch, teacher_batch, Architecture, KdSample, Student, Teacher, TeacherSample};
use crate::objectives::{ce_grad, kd_grad, ssl_grad, student_objective, supcon_grad, teacher_objective};
use crate::params::Parameters;
use crate::rng::{self, Rng};

pub const LOSS_NAMES: [&str; 8] = ["supcon", "ssl", "ce", "kd", "teacher_total", "student_total", "end_to_end_teacher", "end_to_end_student"];
pub const FD_STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so components whose true value
/// is zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub loss: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Worst component as `name[index] analytic=.. numeric=..`.
    pub worst: String,
    pub passed: bool,
}

struct Comparison {
    worst: f64,
    checked: usize,
    skipped: usize,
    at: Option<(usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `x0`.
/// `f` returns the loss and an activation signature.
fn compare(x0: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> Result<(f64, u64)>) -> Result<Comparison> {
    let (_, sig0) = f(x0)?;
    let mut x = x0.to_vec();
    let (mut worst, mut checked, mut skipped, mut at) = (0.0f64, 0, 0, None);
    for i in 0..x0.len() {
        x[i] = x0[i] + FD_STEP;
        let (up, su) = f(&x)?;
        x[i] = x0[i] - FD_STEP;
        let (down, sd) = f(&x)?;
        x[i] = x0[i];
        if su != sig0 || sd != sig0 {
            skipped += 1;
            continue;
        }
        let mut numeric = (up - down) / (2.0 * FD_STEP);
        let mut err = relative_error(analytic[i], numeric);
        if err >= REL_TOLERANCE {
            // Curvature-limited components get a fourth-order stencil at the same step.
            x[i] = x0[i] + 2.0 * FD_STEP;
            let (up2, su2) = f(&x)?;
            x[i] = x0[i] - 2.0 * FD_STEP;
            let (down2, sd2) = f(&x)?;
            x[i] = x0[i];
            if su2 == sig0 && sd2 == sig0 {
                numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * FD_STEP);
                err = relative_error(analytic[i], numeric);
            }
        }
        if err >= worst {
            worst = err;
            at = Some((i, analytic[i], numeric));
        }
        checked += 1;
    }
    Ok(Comparison { worst, checked, skipped, at })
}

fn uniform(rng: &mut Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

/// Rows with random directions and norms in `[0.5, 1.5]`, away from the
/// normalization singularity at zero.
fn spread_rows(rng: &mut Rng, shape: (usize, usize)) -> Array2<f64> {
    let mut m = uniform(rng, shape, -1.0, 1.0);
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-3);
        let target = rng.random_range(0.5..1.5);
        row.mapv_inplace(|v| v * target / n);
    }
    m
}

fn from_flat(x: &[f64], shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_vec(shape, x.to_vec()).expect("shape matches")
}

/// Micro architecture used by the end-to-end checks: three factorized
/// stages on `4 x 8 x 8` clips, one attention layer.
pub fn micro_architecture() -> (Architecture, Dims, usize) {
    let encoder = EncoderConfig {
        channels: 4,
        stages: vec![
            StageStride { temporal: 2, spatial: 2 },
            StageStride { temporal: 1, spatial: 2 },
            StageStride { temporal: 1, spatial: 1 },
        ],
    };
    (Architecture { encoder, head_layers: 1, head_heads: 2, ff_mult: 2 }, Dims::new(4, 8, 8), 3)
}

fn random_clip(dims: Dims, rng: &mut Rng) -> VideoClip {
    let data = Array4::from_shape_simple_fn((3, dims.frames, dims.height, dims.width), || rng.random::<f64>());
    VideoClip { data, fps_tag: 8.0 }
}

/// The CLS token starts at zero, where its layer norm sees zero variance and
/// central differences lose accuracy. Checks run at a generic point instead.
fn randomize_cls(head: &mut TemporalHead, rng: &mut Rng) {
    head.cls_token.mapv_inplace(|_| rng.random_range(-1.0..1.0));
}

fn check_model<P: Parameters + Clone>(model: &P, analytic: &P, f: impl Fn(&P) -> Result<(f64, u64)>) -> Result<Comparison> {
    let x0 = model.flatten();
    compare(&x0, &analytic.flatten(), |x| {
        let mut m = model.clone();
        let mut idx = 0;
        m.visit_mut(&mut |_, mut a| {
            for v in a.iter_mut() {
                *v = x[idx];
                idx += 1;
            }
        });
        f(&m)
    })
}

fn tensor_sizes<P: Parameters>(model: &P) -> Vec<(String, usize)> {
    let mut v = Vec::new();
    model.visit(&mut |n, a| v.push((n.to_string(), a.len())));
    v
}

fn component_name(names: Option<&[(String, usize)]>, mut i: usize) -> String {
    for (n, len) in names.unwrap_or(&[]) {
        if i < *len {
            return format!("{n}[{i}]");
        }
        i -= len;
    }
    format!("x[{i}]")
}

/// Runs one seeded micro-instance of the named loss.
pub fn grad_check(loss_name: &str, seed: u64) -> Result<GradReport> {
    let mut rng = rng::derived(seed, loss_name);
    let mut names: Option<Vec<(String, usize)>> = None;
    let cmp = match loss_name {
        "supcon" => {
            let (b, c) = (4, 3);
            let labels = [0, 0, 1, 1];
            let tau = rng.random_range(0.1..1.0);
            let z = uniform(&mut rng, (b, c), -1.0, 1.0);
            let g = supcon_grad(&z, &labels, tau)?.grad;
            compare(z.as_slice().unwrap(), g.as_slice().unwrap(), |x| Ok((supcon_grad(&from_flat(x, (b, c)), &labels, tau)?.loss, 0)))?
        }
        "ssl" => {
            let (b, c) = (3, 4);
            let tau = rng.random_range(0.1..1.0);
            let zf = spread_rows(&mut rng, (b, c));
            let zs = spread_rows(&mut rng, (b, c));
            let out = ssl_grad(&zf, &zs, tau)?;
            let x0: Vec<f64> = zf.iter().chain(zs.iter()).copied().collect();
            let g: Vec<f64> = out.d_fast.iter().chain(out.d_slow.iter()).copied().collect();
            compare(&x0, &g, |x| Ok((ssl_grad(&from_flat(&x[..b * c], (b, c)), &from_flat(&x[b * c..], (b, c)), tau)?.loss, 0)))?
        }
        "ce" => {
            let k = 5;
            let z = Array1::from_shape_simple_fn(k, || rng.random_range(-3.0..3.0));
            let y = rng.random_range(0..k);
            let (_, g) = ce_grad(&z, y)?;
            compare(z.as_slice().unwrap(), g.as_slice().unwrap(), |x| Ok((ce_grad(&Array1::from(x.to_vec()), y)?.0, 0)))?
        }
        "kd" => {
            let k = 5;
            let tau = rng.random_range(1.0..5.0);
            let zt = Array1::from_shape_simple_fn(k, || rng.random_range(-6.0..6.0));
            let zs = Array1::from_shape_simple_fn(k, || rng.random_range(-6.0..6.0));
            let (_, g) = kd_grad(&zt, &zs, tau)?;
            compare(zs.as_slice().unwrap(), g.as_slice().unwrap(), |x| Ok((kd_grad(&zt, &Array1::from(x.to_vec()), tau)?.0, 0)))?
        }
        "teacher_total" => {
            let (b, k, c) = (4, 3, 3);
            let labels = vec![0, 0, 1, 1];
            let emb_labels: Vec<usize> = labels.iter().flat_map(|&y| [y, y]).collect();
            let tau = rng.random_range(0.1..1.0);
            let lambda = rng.random_range(0.05..1.0);
            let logits = uniform(&mut rng, (b, k), -3.0, 3.0);
            let emb = uniform(&mut rng, (2 * b, c), -1.0, 1.0);
            let rows = |m: &Array2<f64>| -> Vec<Array1<f64>> { m.rows().into_iter().map(|r| r.to_owned()).collect() };
            let obj = teacher_objective(&rows(&logits), &labels, &emb, &emb_labels, tau, lambda)?;
            let x0: Vec<f64> = logits.iter().chain(emb.iter()).copied().collect();
            let g: Vec<f64> = obj.d_logits.iter().flat_map(|r| r.iter().copied()).chain(obj.d_embeddings.iter().copied()).collect();
            compare(&x0, &g, |x| {
                let l = from_flat(&x[..b * k], (b, k));
                let e = from_flat(&x[b * k..], (2 * b, c));
                Ok((teacher_objective(&rows(&l), &labels, &e, &emb_labels, tau, lambda)?.value.total, 0))
            })?
        }
        "student_total" => {
            let (b, k) = (3, 4);
            let tau = rng.random_range(1.0..5.0);
            let (lce, lkd) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
            let zt: Vec<Array1<f64>> = (0..b).map(|_| Array1::from_shape_simple_fn(k, || rng.random_range(-4.0..4.0))).collect();
            let zs: Vec<Array1<f64>> = (0..b).map(|_| Array1::from_shape_simple_fn(k, || rng.random_range(-4.0..4.0))).collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let (_, g) = student_objective(&zt, &zs, &labels, tau, lce, lkd)?;
            let x0: Vec<f64> = zs.iter().flat_map(|r| r.iter().copied()).collect();
            let gf: Vec<f64> = g.iter().flat_map(|r| r.iter().copied()).collect();
            compare(&x0, &gf, |x| {
                let s: Vec<Array1<f64>> = x.chunks(k).map(|c| Array1::from(c.to_vec())).collect();
                Ok((student_objective(&zt, &s, &labels, tau, lce, lkd)?.0.total, 0))
            })?
        }
        "end_to_end_teacher" => {
            let (arch, dims, k) = micro_architecture();
            let mut model = Teacher::new(&arch, FusionVariant::Dff, dims, k, &mut rng)?;
            randomize_cls(&mut model.head, &mut rng);
            let dark: Vec<VideoClip> = (0..2).map(|_| random_clip(dims, &mut rng)).collect();
            let ret: Vec<VideoClip> = (0..2).map(|_| random_clip(dims, &mut rng)).collect();
            let batch: Vec<TeacherSample> = (0..2).map(|i| TeacherSample { dark: Some(&dark[i]), retinex: Some(&ret[i]), label: i }).collect();
            let out = teacher_batch(&model, &batch, 0.1, 0.1)?;
            names = Some(tensor_sizes(&model));
            check_model(&model, &out.grads, |m| {
                let o = teacher_batch(m, &batch, 0.1, 0.1)?;
                Ok((o.loss.total, o.signature))
            })?
        }
        "end_to_end_student" => {
            let (arch, dims, k) = micro_architecture();
            let mut model = Student::new(&arch, dims, k, &mut rng)?;
            randomize_cls(&mut model.head, &mut rng);
            let clips: Vec<VideoClip> = (0..2).map(|_| random_clip(dims, &mut rng)).collect();
            let zt: Vec<Array1<f64>> = (0..2).map(|_| Array1::from_shape_simple_fn(k, || rng.random_range(-3.0..3.0))).collect();
            let batch: Vec<KdSample> = (0..2).map(|i| KdSample { dark: &clips[i], teacher_logits: &zt[i], label: i }).collect();
            let out = student_batch(&model, &batch, 4.0, 1.0, 1.0)?;
            names = Some(tensor_sizes(&model));
            check_model(&model, &out.grads, |m| {
                let o = student_batch(m, &batch, 4.0, 1.0, 1.0)?;
                Ok((o.loss.total, o.signature))
            })?
        }
        other => return Err(invalid(format!("unknown loss {other:?}; expected one of {}", LOSS_NAMES.join(", ")))),
    };
    let worst = match cmp.at {
        None => "none".to_string(),
        Some((i, a, n)) => format!("{} analytic={a:.6e} numeric={n:.6e}", component_name(names.as_deref(), i)),
    };
    Ok(GradReport {
        loss: loss_name.to_string(),
        seed,
        max_rel_error: cmp.worst,
        checked: cmp.checked,
        skipped_kinks: cmp.skipped,
        worst,
        passed: cmp.checked > 0 && cmp.worst < REL_TOLERANCE,
    })
}
