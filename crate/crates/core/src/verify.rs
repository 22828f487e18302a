//! Self-check suite behind `actlumos verify`: loss oracles, gradient checks,
//! sampler, fusion, retinex, encoder and checkpoint invariants.

use std::path::Path;

use ndarray::{array, Array1, Array2, Array4, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clipgen::{generate_clip, generate_dataset, Dims, IlluminationProfile, VideoClip};
use crate::encoder::{clip_embedding, EncoderConfig, FeatureMap, StageStride};
use crate::enhance::{retinex_enhance, RetinexParams};
use crate::error::Result;
use crate::fusion::{dff_fuse, dff_gate, FusionVariant, GateMlp, GateWeights, Logits};
use crate::model::Teacher;
use crate::objectives::{
    ce_loss, kd_loss, positive_negative_sets, ssl_grad, student_loss, supcon_with_denominator, LossValue, Component, SupConDenominator,
};
use crate::params::Parameters;
use crate::rng::{self, RngState};
use crate::sampler::{balanced_batch, draw_views, AugmentParams, SslVariant};
use crate::trainer::gradcheck::{grad_check, micro_architecture, LOSS_NAMES};
use crate::trainer::{teacher_from_checkpoint, Checkpoint, Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        format!("{} {} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// Use the SupCon variant whose denominator also contains the anchor.
    /// The suite must then report failures.
    pub mutate_supcon_denominator: bool,
    pub grad_instances: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { mutate_supcon_denominator: false, grad_instances: 20 }
    }
}

struct Suite {
    opts: VerifyOptions,
    checks: Vec<Check>,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce(&VerifyOptions) -> Result<(bool, String)>) {
        let (passed, detail) = match f(&self.opts) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        self.checks.push(Check { name: name.to_string(), passed, detail });
    }
}

fn supcon(z: &Array2<f64>, labels: &[usize], tau: f64, o: &VerifyOptions) -> Result<f64> {
    let d = if o.mutate_supcon_denominator { SupConDenominator::IncludeAnchor } else { SupConDenominator::ExcludeAnchor };
    Ok(supcon_with_denominator(z, labels, tau, d)?.loss)
}

fn close(value: f64, expected: f64, tol: f64) -> (bool, String) {
    ((value - expected).abs() <= tol, format!("value={value:.12} expected={expected:.12} tol={tol:e}"))
}

const TABLE1_LABELS: [usize; 16] = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3];

fn random_unit_rows(rng: &mut rng::Rng, b: usize, c: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((b, c), || rng.random_range(-1.0..1.0));
    for mut r in m.rows_mut() {
        let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r /= n;
    }
    m
}

/// Runs every check and returns them in order.
pub fn run_all(opts: VerifyOptions) -> Vec<Check> {
    let mut s = Suite { opts, checks: Vec::new() };

    s.run("supcon.uniform_log15", |o| {
        let z = Array2::from_elem((16, 4), 0.5);
        Ok(close(supcon(&z, &TABLE1_LABELS, 0.1, o)?, 15f64.ln(), 1e-9))
    });
    s.run("supcon.two_class_micro", |o| {
        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        Ok(close(supcon(&z, &[0, 0, 1, 1], 0.1, o)?, (1.0 + 2.0 * (-10f64).exp()).ln(), 1e-9))
    });
    s.run("supcon.tau_limit", |o| {
        let z = random_unit_rows(&mut rng::seeded(11), 16, 8);
        Ok(close(supcon(&z, &TABLE1_LABELS, 1e6, o)?, 15f64.ln(), 1e-5))
    });
    s.run("supcon.label_permutation", |o| {
        let mut r = rng::seeded(12);
        let z = random_unit_rows(&mut r, 16, 8);
        let base = supcon(&z, &TABLE1_LABELS, 0.1, o)?;
        let relabeled: Vec<usize> = TABLE1_LABELS.iter().map(|&y| [7, 2, 9, 0][y]).collect();
        Ok(close(supcon(&z, &relabeled, 0.1, o)?, base, 1e-12))
    });
    s.run("supcon.view_symmetry", |o| {
        // Rows alternate dark/retinex per clip; swapping the tags swaps row pairs.
        let mut r = rng::seeded(13);
        let z = random_unit_rows(&mut r, 16, 8);
        let mut swapped = z.clone();
        for i in (0..16).step_by(2) {
            swapped.row_mut(i).assign(&z.row(i + 1));
            swapped.row_mut(i + 1).assign(&z.row(i));
        }
        Ok(close(supcon(&swapped, &TABLE1_LABELS, 0.1, o)?, supcon(&z, &TABLE1_LABELS, 0.1, o)?, 1e-12))
    });
    s.run("supcon.table1_sets", |_| {
        let (p0, _) = positive_negative_sets(&TABLE1_LABELS, 0);
        let all = (0..16).all(|i| {
            let (p, n) = positive_negative_sets(&TABLE1_LABELS, i);
            p.len() == 3 && n.len() == 12
        });
        Ok((all && p0 == vec![1, 2, 3], format!("P(0)={p0:?}")))
    });
    s.run("ssl.micro_oracle", |_| {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        Ok(close(ssl_grad(&z, &z, 0.5)?.loss, (1.0 + 2.0 * (-2f64).exp()).ln(), 1e-9))
    });
    s.run("ssl.orthogonal_closed_form", |_| {
        let (b, tau) = (5usize, 0.3f64);
        let z = Array2::eye(b);
        let expected = (1.0 + 2.0 * (b as f64 - 1.0) * (-1.0 / tau).exp()).ln();
        Ok(close(ssl_grad(&z, &z, tau)?.loss, expected, 1e-9))
    });
    s.run("ssl.scale_invariance", |_| {
        let mut r = rng::seeded(14);
        let f = random_unit_rows(&mut r, 6, 5);
        let sl = random_unit_rows(&mut r, 6, 5);
        let mut scaled = f.clone();
        scaled.row_mut(2).mapv_inplace(|v| v * 37.5);
        Ok(close(ssl_grad(&scaled, &sl, 0.1)?.loss, ssl_grad(&f, &sl, 0.1)?.loss, 1e-12))
    });
    s.run("ssl.batch_permutation", |_| {
        let mut r = rng::seeded(15);
        let f = random_unit_rows(&mut r, 6, 5);
        let sl = random_unit_rows(&mut r, 6, 5);
        let perm = [4usize, 2, 0, 5, 1, 3];
        let a = ssl_grad(&f, &sl, 0.1)?;
        let b = ssl_grad(&f.select(Axis(0), &perm), &sl.select(Axis(0), &perm), 0.1)?;
        let permuted_ok = perm.iter().enumerate().all(|(i, &p)| (b.per_anchor[i] - a.per_anchor[p]).abs() < 1e-12);
        Ok((permuted_ok && (a.loss - b.loss).abs() < 1e-12, format!("mean={:.12}", a.loss)))
    });
    s.run("ce.uniform_logK", |_| Ok(close(ce_loss(&Logits { data: Array1::zeros(10) }, 3)?, 10f64.ln(), 1e-9)));
    s.run("ce.micro_oracle", |_| Ok(close(ce_loss(&Logits { data: array![1.0, 0.0] }, 0)?, (1.0 + (-1f64).exp()).ln(), 1e-12)));
    s.run("kd.example", |_| {
        let e = 1f64.exp();
        let pt = [e / (e + 1.0), 1.0 / (e + 1.0)];
        let expected = 16.0 * pt.iter().map(|p| p * (p / 0.5).ln()).sum::<f64>();
        let v = kd_loss(&Logits { data: array![4.0, 0.0] }, &Logits { data: array![0.0, 0.0] }, 4.0)?;
        let (ok, d) = close(v, expected, 1e-3);
        Ok((ok, format!("{d} (rounded reference 1.777 differs by {:.4})", (v - 1.777).abs())))
    });
    s.run("kd.identity", |_| {
        let z = Logits { data: array![3.0, -1.0, 0.5, 8.0] };
        Ok(close(kd_loss(&z, &z, 4.0)?, 0.0, 1e-12))
    });
    s.run("kd.nonnegative_1000", |_| {
        let mut r = rng::seeded(16);
        let mut worst = f64::INFINITY;
        for _ in 0..1000 {
            let zt = Logits { data: Array1::from_shape_simple_fn(6, || r.random_range(-10.0..10.0)) };
            let zs = Logits { data: Array1::from_shape_simple_fn(6, || r.random_range(-10.0..10.0)) };
            worst = worst.min(kd_loss(&zt, &zs, r.random_range(0.5..8.0))?);
        }
        Ok((worst >= 0.0, format!("min={worst:e}")))
    });
    s.run("kd.temperature_limit", |_| {
        let tau = 1e-3;
        let zt = array![0.3, 1.0, -0.2];
        let zs = array![0.1, 0.2, 0.25];
        let v = kd_loss(&Logits { data: zt }, &Logits { data: zs.clone() }, tau)? / (tau * tau);
        let scaled: Vec<f64> = zs.iter().map(|x| x / tau).collect();
        let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + scaled.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let expected = lse - scaled[1];
        Ok(close(v / expected, 1.0, 1e-9))
    });
    s.run("student_total.composition", |_| {
        let zt = Logits { data: array![4.0, 0.0] };
        let zs = Logits { data: array![1.0, 0.0] };
        let v = student_loss(&zt, &zs, 0, 4.0, 1.0, 1.0)?;
        let expected = ce_loss(&zs, 0)? + kd_loss(&zt, &zs, 4.0)?;
        let pure = student_loss(&zt, &zs, 0, 4.0, 1.0, 0.0)?.total == ce_loss(&zs, 0)?;
        let (ok, d) = close(v.total, expected, 1e-12);
        Ok((ok && pure, d))
    });
    s.run("teacher_total.composition", |_| {
        let v = LossValue::weighted(&[(Component::Ce, 1.0, 2.0), (Component::SupCon, 0.1, 1.0)]);
        Ok(close(v.total, 2.1, 1e-12))
    });
    s.run("losses.stability_1e3", |o| {
        let mut r = rng::seeded(17);
        let big = Logits { data: Array1::from_shape_simple_fn(10, || r.random_range(-1e3..1e3)) };
        let other = Logits { data: Array1::from_shape_simple_fn(10, || r.random_range(-1e3..1e3)) };
        let z = random_unit_rows(&mut r, 16, 8);
        let vals = [
            ce_loss(&big, 2)?,
            kd_loss(&big, &other, 1.0)?,
            supcon(&z, &TABLE1_LABELS, 1e-3, o)?,
            ssl_grad(&z, &z.mapv(|v| -v), 1e-3)?.loss,
        ];
        Ok((vals.iter().all(|v| v.is_finite()), format!("{vals:?}")))
    });
    for name in LOSS_NAMES {
        s.run(&format!("grad.{name}"), |o| {
            let mut worst = 0.0f64;
            let mut failed = 0;
            let mut skipped = 0;
            for seed in 0..o.grad_instances {
                let r = grad_check(name, seed)?;
                worst = worst.max(r.max_rel_error);
                skipped += r.skipped_kinks;
                failed += usize::from(!r.passed);
            }
            Ok((failed == 0, format!("instances={} max_rel={worst:.3e} failed={failed} kink_skips={skipped}", o.grad_instances)))
        });
    }
    s.run("sampler.balanced_10000", |_| {
        let ds = generate_dataset(10, 12, Dims::new(2, 8, 8), 3)?;
        let mut r = rng::seeded(18);
        let mut violations = 0;
        for _ in 0..10_000 {
            let batch = balanced_batch(&ds, 4, 2, &mut r)?;
            let labels: Vec<usize> = batch.iter().flat_map(|&(_, y)| [y, y]).collect();
            let mut ids: Vec<u32> = batch.iter().map(|&(id, _)| id).collect();
            ids.sort_unstable();
            ids.dedup();
            let sets_ok = (0..labels.len()).all(|i| {
                let (p, n) = positive_negative_sets(&labels, i);
                p.len() == 3 && n.len() == 12
            });
            if !sets_ok || ids.len() != 8 {
                violations += 1;
            }
        }
        Ok((violations == 0, format!("violations={violations}")))
    });
    s.run("sampler.independence_chi2", |_| {
        let mut r = rng::seeded(19);
        let p = AugmentParams::default();
        let mut counts = [[0f64; 2]; 2];
        for _ in 0..1000 {
            let (a, b) = draw_views(16, 32, 32, &p, SslVariant::Both, &mut r)?;
            counts[a.spatial.flip as usize][b.spatial.flip as usize] += 1.0;
        }
        let chi2 = chi_square_2x2(&counts);
        Ok((chi2 < 6.635, format!("chi2={chi2:.4} (critical 6.635 at p=0.01)")))
    });
    s.run("fusion.gate_simplex_1000", |_| {
        let mut r = rng::seeded(20);
        let gate = GateMlp::new(8, &mut r);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let d = crate::encoder::FeatureSequence { data: Array2::from_shape_simple_fn((4, 8), || r.random_range(-5.0..5.0)) };
            let e = crate::encoder::FeatureSequence { data: Array2::from_shape_simple_fn((4, 8), || r.random_range(-5.0..5.0)) };
            let w = dff_gate(&d, &e, &gate)?;
            w.validate()?;
            for row in w.data.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
        Ok((worst <= 1e-6, format!("max |row sum - 1| = {worst:e}")))
    });
    s.run("fusion.endpoints", |_| {
        let mut r = rng::seeded(21);
        let d = crate::encoder::FeatureSequence { data: Array2::from_shape_simple_fn((5, 6), || r.random_range(-3.0..3.0)) };
        let e = crate::encoder::FeatureSequence { data: Array2::from_shape_simple_fn((5, 6), || r.random_range(-3.0..3.0)) };
        let a = dff_fuse(&d, &e, &GateWeights::constant(5, 1.0))?;
        let b = dff_fuse(&d, &e, &GateWeights::constant(5, 0.0))?;
        Ok((a == d && b == e, "exact".into()))
    });
    s.run("fusion.convexity", |_| {
        let mut r = rng::seeded(22);
        let mut ok = true;
        for _ in 0..200 {
            let d = crate::encoder::FeatureSequence { data: Array2::from_shape_simple_fn((4, 6), || r.random_range(-3.0..3.0)) };
            let e = crate::encoder::FeatureSequence { data: Array2::from_shape_simple_fn((4, 6), || r.random_range(-3.0..3.0)) };
            let w = GateWeights::constant(4, r.random::<f64>());
            let f = dff_fuse(&d, &e, &w)?;
            ndarray::Zip::from(&f.data).and(&d.data).and(&e.data).for_each(|&x, &a, &b| ok &= x >= a.min(b) - 1e-12 && x <= a.max(b) + 1e-12);
        }
        Ok((ok, "200 random fusions".into()))
    });
    s.run("retinex.no_nan_brightening_1000", |_| {
        let mut r = rng::seeded(23);
        let params = RetinexParams::default();
        let mut bad = 0;
        for _ in 0..1000 {
            let scale = r.random_range(0.0..1.0);
            let data = Array4::from_shape_simple_fn((3, 2, 8, 8), || r.random::<f64>() * scale);
            let clip = VideoClip { data, fps_tag: 8.0 };
            let out = retinex_enhance(&clip, &params)?;
            let fine = ndarray::Zip::from(&out.data).and(&clip.data).all(|&y, &x| y.is_finite() && y >= x && y <= 1.0);
            bad += usize::from(!fine);
        }
        Ok((bad == 0, format!("bad_clips={bad}")))
    });
    s.run("retinex.uniform_gray", |_| {
        let clip = VideoClip { data: Array4::from_elem((3, 2, 10, 10), 0.2), fps_tag: 8.0 };
        let out = retinex_enhance(&clip, &RetinexParams { illum_gamma: 1.0, ..Default::default() })?;
        let worst = out.data.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        Ok((worst <= 1e-6, format!("max |x - 1| = {worst:e}")))
    });
    s.run("encoder.shape_contract_20", |_| {
        let mut r = rng::seeded(24);
        let mut ok = true;
        for _ in 0..20 {
            let n = r.random_range(1..4);
            let stages: Vec<StageStride> = (0..n).map(|_| StageStride { temporal: r.random_range(1..3), spatial: r.random_range(1..3) }).collect();
            let cfg = EncoderConfig { channels: r.random_range(1..5), stages };
            let tf: usize = cfg.stages.iter().map(|s| s.temporal).product();
            let sf: usize = cfg.stages.iter().map(|s| s.spatial).product();
            let dims = Dims::new(tf * r.random_range(1..3), (sf * r.random_range(1..3)).max(8), (sf * r.random_range(1..3)).max(8));
            let dims = Dims::new(dims.frames.max(2).next_multiple_of(tf), dims.height.next_multiple_of(sf), dims.width.next_multiple_of(sf));
            let expected = [cfg.channels, dims.frames / tf, dims.height / sf, dims.width / sf];
            let enc = crate::encoder::Encoder::new(cfg.clone(), &mut r)?;
            let clip = VideoClip { data: Array4::from_shape_simple_fn((3, dims.frames, dims.height, dims.width), || r.random()), fps_tag: 8.0 };
            let fm = enc.encode(&clip)?;
            ok &= cfg.output_dims(dims)? == expected && fm.data.shape() == expected;
        }
        Ok((ok, "20 random configs".into()))
    });
    s.run("encoder.embedding_unit_norm", |_| {
        let mut r = rng::seeded(25);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let fm = FeatureMap { data: Array4::from_shape_simple_fn((6, 3, 2, 2), || r.random_range(-2.0..2.0)) };
            let e = clip_embedding(&fm)?;
            worst = worst.max((e.data.dot(&e.data).sqrt() - 1.0).abs());
        }
        Ok((worst <= 1e-6, format!("max |norm - 1| = {worst:e}")))
    });
    s.run("checkpoint.round_trip", |_| checkpoint_round_trip());
    s.run("clipgen.determinism", |_| {
        let p = IlluminationProfile::constant(0.3, 0.01);
        let a = generate_clip(3, &p, 99, Dims::new(4, 16, 16))?;
        let b = generate_clip(3, &p, 99, Dims::new(4, 16, 16))?;
        Ok((a == b, "same seed, same voxels".into()))
    });
    s.checks
}

/// Pearson chi-square statistic of a 2x2 contingency table.
pub fn chi_square_2x2(counts: &[[f64; 2]; 2]) -> f64 {
    let n: f64 = counts.iter().flatten().sum();
    let rows = [counts[0][0] + counts[0][1], counts[1][0] + counts[1][1]];
    let cols = [counts[0][0] + counts[1][0], counts[0][1] + counts[1][1]];
    let mut chi2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            if e > 0.0 {
                chi2 += (counts[i][j] - e).powi(2) / e;
            }
        }
    }
    chi2
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let (arch, dims, k) = micro_architecture();
    let mut r = rng::seeded(26);
    let teacher = Teacher::new(&arch, FusionVariant::Dff, dims, k, &mut r)?;
    let config = TrainConfig { architecture: arch, ..Default::default() };
    let ck = Checkpoint {
        stage: Stage::Teacher,
        fingerprint: config.fingerprint(),
        config,
        dims,
        num_classes: k,
        epoch: 0,
        rng: RngState::capture(&r),
        history: Vec::new(),
        step_losses: Vec::new(),
        params: teacher.named_arrays(),
        optimizer: None,
    };
    let bytes = ck.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes, Path::new("<memory>"))?;
    let restored = teacher_from_checkpoint(&back)?;
    let mut clips = Vec::new();
    for _ in 0..2 {
        clips.push(VideoClip { data: Array4::from_shape_simple_fn((3, dims.frames, dims.height, dims.width), || r.random()), fps_tag: 8.0 });
    }
    let a = teacher.logits(Some(&clips[0]), Some(&clips[1]))?;
    let b = restored.logits(Some(&clips[0]), Some(&clips[1]))?;
    let same = a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    let mut corrupted = bytes.clone();
    let mid = corrupted.len() / 2;
    corrupted[mid] ^= 1;
    let detects = Checkpoint::from_bytes(&corrupted, Path::new("<memory>")).is_err();
    Ok((same && back == ck && detects, format!("{} bytes, bit-identical logits={same}, corruption detected={detects}", bytes.len())))
}
