//! End-to-end acceptance run. Every criterion prints one PASS/FAIL line; the
//! test fails if any criterion fails. Lines go straight to the stderr handle
//! so they show up even when the harness captures output.

use std::io::Write;

use actlumos::ablate::{ordering_checks, Bench};
use actlumos::clipgen::{generate_dataset, Dims, Split, SyntheticDataset, VideoClip};
use actlumos::encoder::FeatureSequence;
use actlumos::enhance::{retinex_call_count, retinex_enhance, RetinexParams};
use actlumos::fusion::{dff_fuse, dff_gate, GateMlp, GateWeights, Logits};
use actlumos::objectives::{ce_loss, kd_loss, positive_negative_sets, ssl_loss, supcon_grad};
use actlumos::rng;
use actlumos::sampler::balanced_batch;
use actlumos::trainer::gradcheck::{grad_check, LOSS_NAMES};
use actlumos::trainer::{distill_student, distill_with_targets, evaluate_student, teacher_targets, train_teacher, ClipStore, RunOptions, Stage, TrainConfig};
use ndarray::{Array1, Array2, Array4};
use rand::Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

fn cpu_seconds() -> f64 {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage fills the struct it is given; RUSAGE_SELF is always valid.
    let usage = unsafe {
        libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr());
        usage.assume_init()
    };
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    tv(usage.ru_utime) + tv(usage.ru_stime)
}

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn line(&mut self, name: &str, passed: bool, detail: impl AsRef<str>) {
        let tag = if passed { "PASS" } else { "FAIL" };
        let _ = writeln!(std::io::stderr().lock(), "{tag} {name}: {}", detail.as_ref());
        if !passed {
            self.failed.push(name.to_string());
        }
    }
}

fn desk_dataset() -> SyntheticDataset {
    generate_dataset(10, 40, Dims::new(16, 32, 32), 0).unwrap()
}

fn gradient_suite(r: &mut Report) {
    let start = cpu_seconds();
    let mut worst = (0.0f64, String::new());
    let mut failures = 0;
    for loss in LOSS_NAMES {
        for seed in 0..20 {
            let rep = grad_check(loss, seed).unwrap();
            failures += usize::from(!rep.passed);
            if rep.max_rel_error > worst.0 {
                worst = (rep.max_rel_error, format!("{loss} seed {seed}"));
            }
        }
    }
    let cpu = cpu_seconds() - start;
    r.line(
        "gradient_suite",
        failures == 0 && worst.0 < 1e-4 && cpu < 120.0,
        format!("8 losses x 20 instances, {failures} failed, worst rel err {:.2e} ({}), {cpu:.1} CPU-s (limit 120)", worst.0, worst.1),
    );
}

// Independent scalar oracles: plain loops, no log-sum-exp, no shared code.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn naive_supcon(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let b = z.len();
    let mut total = 0.0;
    for i in 0..b {
        let denom: f64 = (0..b).filter(|&a| a != i).map(|a| (dot(&z[i], &z[a]) / tau).exp()).sum();
        let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let s: f64 = pos.iter().map(|&p| ((dot(&z[i], &z[p]) / tau).exp() / denom).ln()).sum();
        total += -s / pos.len() as f64;
    }
    total / b as f64
}

fn naive_ssl(fast: &[Vec<f64>], slow: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
    let p = |a: &[f64], b: &[f64]| (cos(a, b) / tau).exp();
    let n = fast.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = p(&fast[i], &slow[i]);
        let mut denom = pos;
        for q in (0..n).filter(|&q| q != i) {
            denom += p(&fast[i], &fast[q]) + p(&fast[i], &slow[q]);
        }
        total += -(pos / denom).ln();
    }
    total / n as f64
}

fn naive_kd(zt: &[f64], zs: &[f64], tau: f64) -> f64 {
    let soft = |z: &[f64]| {
        let e: Vec<f64> = z.iter().map(|v| (v / tau).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (pt, ps) = (soft(zt), soft(zs));
    tau * tau * pt.iter().zip(&ps).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
}

fn rows(v: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((v.len(), v[0].len()), |(i, j)| v[i][j])
}

fn loss_oracles(r: &mut Report) {
    let table: Vec<usize> = (0..16).map(|i| i / 4).collect();
    let same = vec![vec![0.6, 0.8, 0.0]; 16];
    let uniform = supcon_grad(&rows(&same), &table, 0.1).unwrap().loss;
    let want = 15f64.ln();
    let two = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    let micro = supcon_grad(&rows(&two), &[0, 0, 1, 1], 0.1).unwrap().loss;
    let micro_want = (1.0 + 2.0 * (-10f64).exp()).ln();
    let micro_naive = naive_supcon(&two, &[0, 0, 1, 1], 0.1);
    let ok = (uniform - want).abs() < 1e-9 && (micro - micro_want).abs() < 1e-9 && (micro_naive - micro_want).abs() < 1e-9;
    r.line("oracle_supcon", ok, format!("uniform {uniform:.12} vs log15 {want:.12}; micro {micro:.6e} vs {micro_want:.6e}"));

    let (f, s) = (vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let ssl = ssl_loss(&rows(&f), &rows(&s), 0.5).unwrap().total;
    let ssl_want = (1.0 + 2.0 * (-2f64).exp()).ln();
    let ssl_naive = naive_ssl(&f, &s, 0.5);
    r.line(
        "oracle_ssl",
        (ssl - ssl_want).abs() < 1e-9 && (ssl_naive - ssl_want).abs() < 1e-9,
        format!("{ssl:.12} vs log(1+2e^-2) {ssl_want:.12}"),
    );

    let kd = kd_loss(&Logits { data: Array1::from(vec![4.0, 0.0]) }, &Logits { data: Array1::from(vec![0.0, 0.0]) }, 4.0).unwrap();
    let kd_naive = naive_kd(&[4.0, 0.0], &[0.0, 0.0], 4.0);
    r.line("oracle_kd", (kd - kd_naive).abs() < 1e-3, format!("{kd:.6} vs independent {kd_naive:.6} (quoted approx 1.777)"));

    let ce = ce_loss(&Logits { data: Array1::zeros(10) }, 3).unwrap();
    r.line("oracle_ce", (ce - 10f64.ln()).abs() < 1e-9, format!("{ce:.12} vs log10 {:.12}", 10f64.ln()));
}

fn batch_construction(r: &mut Report, data: &SyntheticDataset) {
    let mut rng = rng::seeded(2024);
    let mut violations = 0;
    for _ in 0..10_000 {
        let batch = balanced_batch(data, 4, 2, &mut rng).unwrap();
        // Two views per clip.
        let labels: Vec<usize> = batch.iter().flat_map(|&(_, y)| [y, y]).collect();
        for i in 0..labels.len() {
            let (p, n) = positive_negative_sets(&labels, i);
            let naive_p = (0..labels.len()).filter(|&j| j != i && labels[j] == labels[i]).count();
            if p.len() != 3 || n.len() != 12 || naive_p != 3 {
                violations += 1;
            }
        }
    }
    r.line("batch_construction", violations == 0, format!("10000 batches x 16 anchors, {violations} violations"));
}

fn fusion_properties(r: &mut Report) {
    let mut rng = rng::seeded(77);
    let (t, c) = (8, 32);
    let (mut off_simplex, mut endpoint_err, mut out_of_bounds) = (0usize, 0usize, 0usize);
    for _ in 0..1000 {
        let gate = GateMlp::new(c, &mut rng);
        let scale = rng.random_range(0.1..20.0);
        let d = FeatureSequence { data: Array2::from_shape_simple_fn((t, c), || rng.random_range(-scale..scale)) };
        let e = FeatureSequence { data: Array2::from_shape_simple_fn((t, c), || rng.random_range(-1.0..1.0)) };
        let w = dff_gate(&d, &e, &gate).unwrap();
        for row in w.data.rows() {
            if (row.sum() - 1.0).abs() > 1e-6 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                off_simplex += 1;
            }
        }
        let fused = dff_fuse(&d, &e, &w).unwrap();
        for ((f, a), b) in fused.data.iter().zip(d.data.iter()).zip(e.data.iter()) {
            if *f < a.min(*b) || *f > a.max(*b) {
                out_of_bounds += 1;
            }
        }
        let pure_dark = dff_fuse(&d, &e, &GateWeights::constant(t, 1.0)).unwrap();
        let pure_ret = dff_fuse(&d, &e, &GateWeights::constant(t, 0.0)).unwrap();
        if pure_dark.data != d.data || pure_ret.data != e.data {
            endpoint_err += 1;
        }
    }
    r.line(
        "fusion_properties",
        off_simplex == 0 && endpoint_err == 0 && out_of_bounds == 0,
        format!("1000 gates: {off_simplex} rows off simplex, {endpoint_err} endpoint mismatches, {out_of_bounds} components out of bounds"),
    );
}

fn retinex_properties(r: &mut Report) {
    let params = RetinexParams::default();
    let mut rng = rng::seeded(5);
    let (mut non_finite, mut darker) = (0usize, 0usize);
    for _ in 0..1000 {
        let level = rng.random_range(0.0..1.0);
        let data = Array4::from_shape_simple_fn((3, 2, 16, 16), || rng.random::<f64>() * level);
        let clip = VideoClip::new(data, 8.0).unwrap();
        let out = retinex_enhance(&clip, &params).unwrap();
        non_finite += out.data.iter().filter(|v| !v.is_finite()).count();
        darker += out.data.iter().zip(clip.data.iter()).filter(|(o, i)| o < i).count();
    }
    let gray = VideoClip::new(Array4::from_elem((3, 2, 16, 16), 0.2), 8.0).unwrap();
    let unit = RetinexParams { illum_gamma: 1.0, ..params };
    let mapped = retinex_enhance(&gray, &unit).unwrap();
    let max_dev = mapped.data.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    r.line(
        "retinex_properties",
        non_finite == 0 && darker == 0 && max_dev < 1e-6,
        format!("1000 clips: {non_finite} non-finite, {darker} voxels darkened; uniform 0.2 -> max |out-1| {max_dev:.2e}"),
    );
}

/// Determinism plus the frozen-teacher and single-stream contracts, on a
/// one-epoch desk-scale teacher.
fn training_contracts(r: &mut Report, data: &SyntheticDataset) {
    let cfg = TrainConfig { epochs: 1, seed: 7, ..TrainConfig::for_stage(Stage::Teacher) };
    let store = ClipStore::new(data, cfg.retinex.clone()).unwrap();
    let a = train_teacher(&cfg, data, &store, RunOptions::default()).unwrap();
    let b = train_teacher(&cfg, data, &store, RunOptions::default()).unwrap();
    let same_trace = a.checkpoint.step_losses.len() == b.checkpoint.step_losses.len()
        && a.checkpoint.step_losses.iter().zip(&b.checkpoint.step_losses).all(|(x, y)| x.to_bits() == y.to_bits());
    let (ha, hb) = (a.checkpoint.content_hash().unwrap(), b.checkpoint.content_hash().unwrap());
    r.line(
        "determinism",
        same_trace && ha == hb,
        format!("{} first-epoch step losses identical: {same_trace}; checkpoint hashes {}.. / {}..", a.checkpoint.step_losses.len(), &ha[..12], &hb[..12]),
    );

    let before = a.checkpoint.to_bytes().unwrap();
    let student_cfg = TrainConfig { epochs: 1, seed: 7, ..TrainConfig::for_stage(Stage::Distill) };
    distill_student(&student_cfg, data, &store, &a.checkpoint, None, RunOptions::default()).unwrap();
    let frozen = a.checkpoint.to_bytes().unwrap() == before;

    let ids: Vec<u32> = store.split(Split::Train).into_iter().map(|(id, _)| id).collect();
    let targets = teacher_targets(&a.model, &store, &ids).unwrap();
    let calls_before = retinex_call_count();
    let student = distill_with_targets(&student_cfg, data, &store, &targets, None, RunOptions::default()).unwrap();
    evaluate_student(&student.model, &store, Split::Test).unwrap();
    let student_calls = retinex_call_count() - calls_before;
    r.line(
        "frozen_teacher_single_stream",
        frozen && student_calls == 0,
        format!("teacher bytes unchanged: {frozen}; retinex calls during student train+eval: {student_calls}"),
    );
}

fn ordering_benchmark(r: &mut Report, data: SyntheticDataset) {
    let start = cpu_seconds();
    let mut bench = Bench::new(TrainConfig::default(), data, None).unwrap();
    let checks = ordering_checks(&mut bench, &SEEDS).unwrap();
    let cpu = cpu_seconds() - start;
    for c in checks {
        r.line(&format!("ordering_{}", c.name), c.passed, c.detail);
    }
    r.line("ordering_budget", cpu <= 90.0 * 60.0, format!("{:.1} CPU-minutes for 3 seeds (limit 90)", cpu / 60.0));
}

#[test]
fn acceptance() {
    let mut r = Report { failed: Vec::new() };
    let data = desk_dataset();
    gradient_suite(&mut r);
    loss_oracles(&mut r);
    batch_construction(&mut r, &data);
    fusion_properties(&mut r);
    retinex_properties(&mut r);
    training_contracts(&mut r, &data);
    ordering_benchmark(&mut r, data);
    assert!(r.failed.is_empty(), "failed criteria: {}", r.failed.join(", "));
}
