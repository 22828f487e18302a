use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::clipgen::{Split, SyntheticDataset, VideoClip};
use crate::encoder::Encoder;
use crate::error::{invalid, Error, Result};
use crate::fusion::Logits;
use crate::model::{pooled_features, ssl_batch, student_batch, teacher_batch, KdSample, LinearProbe, Student, Teacher, TeacherSample};
use crate::objectives::Component;
use crate::optim::AdamW;
use crate::par;
use crate::params::Parameters;
use crate::rng::{self, Rng, RngState};
use crate::sampler::{apply_view, balanced_batch, draw_views, shuffled_batches};

use super::checkpoint::Checkpoint;
use super::config::{Stage, TrainConfig};
use super::data::ClipStore;
use super::metrics::{loss_trend_ok, metrics_from_logits, EpochRecord, Metrics};

/// Knobs that do not affect results.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Continue from this checkpoint; its fingerprint must match the config.
    pub resume: Option<&'a Checkpoint>,
    /// Stop after this many completed epochs (for interrupted-run tests).
    pub stop_after: Option<usize>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

pub struct Trained<M> {
    pub model: M,
    pub checkpoint: Checkpoint,
    /// Median of the last 10 step losses is below that of the first 10.
    pub loss_trend_ok: bool,
}

struct Progress {
    epoch: usize,
    rng: Rng,
    history: Vec<EpochRecord>,
    step_losses: Vec<f64>,
}

fn start<P: Parameters>(config: &TrainConfig, stage: Stage, model: &mut P, opt: &mut AdamW, rng_label: &str, resume: Option<&Checkpoint>) -> Result<Progress> {
    match resume {
        None => Ok(Progress { epoch: 0, rng: rng::derived(config.seed, rng_label), history: Vec::new(), step_losses: Vec::new() }),
        Some(ck) => {
            ck.expect_stage(stage)?;
            ck.check_fingerprint(config)?;
            model.load_arrays(&ck.params)?;
            *opt = ck.optimizer.clone().ok_or_else(|| Error::Invariant("checkpoint has no optimizer state to resume from".into()))?;
            Ok(Progress { epoch: ck.epoch, rng: ck.rng.restore(), history: ck.history.clone(), step_losses: ck.step_losses.clone() })
        }
    }
}

#[derive(Default)]
struct EpochAccumulator {
    total: f64,
    components: BTreeMap<Component, f64>,
    steps: usize,
}

impl EpochAccumulator {
    fn add(&mut self, loss: &crate::objectives::LossValue) {
        self.total += loss.total;
        for (c, v) in &loss.components {
            *self.components.entry(*c).or_insert(0.0) += v;
        }
        self.steps += 1;
    }

    fn record(&self, stage: Stage, epoch: usize, val: Option<&Metrics>) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        EpochRecord {
            stage,
            epoch,
            loss: self.total / n,
            components: self.components.iter().map(|(c, v)| (*c, v / n)).collect(),
            val_top1: val.map(|m| m.top1),
            val_top5: val.map(|m| m.top5),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish<M: Parameters>(
    config: &TrainConfig,
    stage: Stage,
    dataset: &SyntheticDataset,
    model: M,
    params: Vec<(String, ndarray::ArrayD<f64>)>,
    opt: AdamW,
    p: Progress,
) -> Trained<M> {
    let checkpoint = Checkpoint {
        stage,
        fingerprint: config.fingerprint(),
        config: config.clone(),
        dims: dataset.dims,
        num_classes: dataset.num_classes,
        epoch: p.epoch,
        rng: RngState::capture(&p.rng),
        history: p.history,
        step_losses: p.step_losses.clone(),
        params,
        optimizer: Some(opt),
    };
    Trained { model, checkpoint, loss_trend_ok: loss_trend_ok(&p.step_losses) }
}

fn check_stage(config: &TrainConfig, stage: Stage) -> Result<()> {
    config.validate()?;
    if config.stage != stage {
        return Err(Error::Stage { expected: stage.to_string(), found: config.stage.to_string() });
    }
    Ok(())
}

fn epoch_end(rec: EpochRecord, p: &mut Progress, on_epoch: &mut Option<&mut dyn FnMut(&EpochRecord)>) {
    if let Some(cb) = on_epoch.as_mut() {
        cb(&rec);
    }
    p.history.push(rec);
    p.epoch += 1;
}

fn done(config: &TrainConfig, p: &Progress, stop_after: Option<usize>) -> bool {
    p.epoch >= config.epochs || stop_after.is_some_and(|s| p.epoch >= s)
}

/// Teacher streams for one clip, as required by the fusion variant.
fn teacher_sample<'a>(teacher: &Teacher, store: &'a ClipStore, id: u32, label: usize) -> Result<TeacherSample<'a>> {
    let v = teacher.variant();
    Ok(TeacherSample {
        dark: if v.uses_dark() { Some(store.dark(id)?) } else { None },
        retinex: if v.uses_retinex() { Some(store.retinex(id)?) } else { None },
        label,
    })
}

pub fn new_teacher(config: &TrainConfig, dataset: &SyntheticDataset) -> Result<Teacher> {
    Teacher::new(&config.architecture, config.fusion_variant, dataset.dims, dataset.num_classes, &mut rng::derived(config.seed, "teacher-init"))
}

/// Teacher training: class-balanced batches, per-stream SupCon plus CE on the fused head.
pub fn train_teacher(config: &TrainConfig, dataset: &SyntheticDataset, store: &ClipStore, mut opts: RunOptions<'_>) -> Result<Trained<Teacher>> {
    check_stage(config, Stage::Teacher)?;
    let single = !(config.fusion_variant.uses_dark() && config.fusion_variant.uses_retinex());
    if single && config.lambda_sup > 0.0 && config.n_v < 2 {
        return Err(invalid("a single-stream teacher with SupCon needs n_v >= 2 so every anchor has a positive"));
    }
    let mut model = new_teacher(config, dataset)?;
    let mut opt = AdamW::new(config.optimizer.adamw, &model);
    let mut p = start(config, Stage::Teacher, &mut model, &mut opt, "teacher-data", opts.resume)?;
    let n_train = dataset.count(Split::Train);
    let steps = n_train.div_ceil(config.n_c * config.n_v).max(1);
    while !done(config, &p, opts.stop_after) {
        let mut acc = EpochAccumulator::default();
        for _ in 0..steps {
            let batch = balanced_batch(dataset, config.n_c, config.n_v, &mut p.rng)?;
            let samples = batch.iter().map(|&(id, y)| teacher_sample(&model, store, id, y)).collect::<Result<Vec<_>>>()?;
            let out = teacher_batch(&model, &samples, config.tau_supcon, config.lambda_sup)?;
            opt.update(&mut model, &out.grads)?;
            p.step_losses.push(out.loss.total);
            acc.add(&out.loss);
        }
        let val = if config.eval_every_epoch { Some(evaluate_teacher(&model, store, Split::Val)?) } else { None };
        epoch_end(acc.record(Stage::Teacher, p.epoch + 1, val.as_ref()), &mut p, &mut opts.on_epoch);
    }
    let params = model.named_arrays();
    Ok(finish(config, Stage::Teacher, dataset, model, params, opt, p))
}

pub fn teacher_from_checkpoint(ck: &Checkpoint) -> Result<Teacher> {
    ck.expect_stage(Stage::Teacher)?;
    let mut t = Teacher::new(&ck.config.architecture, ck.config.fusion_variant, ck.dims, ck.num_classes, &mut rng::seeded(0))?;
    t.load_arrays(&ck.params)?;
    Ok(t)
}

pub fn evaluate_teacher(teacher: &Teacher, store: &ClipStore, split: Split) -> Result<Metrics> {
    let items = store.split(split);
    let v = teacher.variant();
    let logits = par::map(&items, |&(id, _)| -> Result<Logits> {
        let d = if v.uses_dark() { Some(store.dark(id)?) } else { None };
        let r = if v.uses_retinex() { Some(store.retinex(id)?) } else { None };
        teacher.logits(d, r)
    });
    let logits: Vec<Array1<f64>> = logits.into_iter().map(|l| l.map(|l| l.data)).collect::<Result<_>>()?;
    let labels: Vec<usize> = items.iter().map(|&(_, y)| y).collect();
    metrics_from_logits(&logits, &labels, teacher.head.num_classes())
}

fn encoder_arrays(encoder: &Encoder) -> Vec<(String, ndarray::ArrayD<f64>)> {
    encoder.named_arrays().into_iter().map(|(n, a)| (format!("encoder.{n}"), a)).collect()
}

fn new_student_encoder(config: &TrainConfig) -> Result<Encoder> {
    Encoder::new(config.architecture.encoder.clone(), &mut rng::derived(config.seed, "student-encoder-init"))
}

/// Two-view self-supervised pretraining of the student encoder on an unlabeled pool.
pub fn pretrain_student_ssl(config: &TrainConfig, dataset: &SyntheticDataset, pool: &[VideoClip], mut opts: RunOptions<'_>) -> Result<Trained<Encoder>> {
    check_stage(config, Stage::Ssl)?;
    if pool.len() < 2 {
        return Err(Error::Insufficient(format!("SSL pool has {} clips; need >= 2", pool.len())));
    }
    let mut encoder = new_student_encoder(config)?;
    let mut opt = AdamW::new(config.optimizer.adamw, &encoder);
    if let Some(ck) = opts.resume {
        // Stored names carry the `encoder.` prefix.
        let stripped: Vec<_> = ck.params.iter().map(|(n, a)| (n.trim_start_matches("encoder.").to_string(), a.clone())).collect();
        let mut tmp = ck.clone();
        tmp.params = stripped;
        let p = start(config, Stage::Ssl, &mut encoder, &mut opt, "ssl-data", Some(&tmp))?;
        return ssl_loop(config, dataset, pool, encoder, opt, p, &mut opts);
    }
    let p = start(config, Stage::Ssl, &mut encoder, &mut opt, "ssl-data", None)?;
    ssl_loop(config, dataset, pool, encoder, opt, p, &mut opts)
}

fn ssl_loop(
    config: &TrainConfig,
    dataset: &SyntheticDataset,
    pool: &[VideoClip],
    mut encoder: Encoder,
    mut opt: AdamW,
    mut p: Progress,
    opts: &mut RunOptions<'_>,
) -> Result<Trained<Encoder>> {
    let aug = config.augment;
    let indices: Vec<usize> = (0..pool.len()).collect();
    while !done(config, &p, opts.stop_after) {
        let mut acc = EpochAccumulator::default();
        for batch in shuffled_batches(&indices, config.batch_ssl, &mut p.rng) {
            if batch.len() < 2 {
                continue;
            }
            let draws = batch
                .iter()
                .map(|&i| {
                    let d = pool[i].dims();
                    draw_views(d.frames, d.height, d.width, &aug, config.ssl_variant, &mut p.rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let jobs: Vec<(usize, _)> = batch.iter().copied().zip(draws).collect();
            let views = par::map(&jobs, |(i, (a, b))| -> Result<(VideoClip, VideoClip)> {
                Ok((apply_view(&pool[*i], a, aug.out_frames)?, apply_view(&pool[*i], b, aug.out_frames)?))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let (fast, slow): (Vec<_>, Vec<_>) = views.into_iter().unzip();
            let out = ssl_batch(&encoder, &fast, &slow, config.tau_ssl)?;
            opt.update(&mut encoder, &out.grads)?;
            p.step_losses.push(out.loss.total);
            acc.add(&out.loss);
        }
        epoch_end(acc.record(Stage::Ssl, p.epoch + 1, None), &mut p, &mut opts.on_epoch);
    }
    let params = encoder_arrays(&encoder);
    Ok(finish(config, Stage::Ssl, dataset, encoder, params, opt, p))
}

pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<Encoder> {
    ck.expect_stage(Stage::Ssl)?;
    let mut e = Encoder::zeros(ck.config.architecture.encoder.clone())?;
    let stripped: Vec<_> = ck.params.iter().map(|(n, a)| (n.trim_start_matches("encoder.").to_string(), a.clone())).collect();
    e.load_arrays(&stripped)?;
    Ok(e)
}

/// Frozen-teacher logits for the given clips. This is the only place the
/// distillation stage touches retinex inputs, and it runs before any student
/// code.
pub fn teacher_targets(teacher: &Teacher, store: &ClipStore, ids: &[u32]) -> Result<BTreeMap<u32, Array1<f64>>> {
    let v = teacher.variant();
    let logits = par::map(ids, |&id| -> Result<Array1<f64>> {
        let d = if v.uses_dark() { Some(store.dark(id)?) } else { None };
        let r = if v.uses_retinex() { Some(store.retinex(id)?) } else { None };
        Ok(teacher.logits(d, r)?.data)
    });
    ids.iter().copied().zip(logits).map(|(id, l)| Ok((id, l?))).collect()
}

/// Student with the SSL encoder (or a fresh one) and a freshly initialized head.
pub fn initial_student(config: &TrainConfig, dataset: &SyntheticDataset, ssl: Option<&Checkpoint>) -> Result<Student> {
    let encoder = match ssl {
        Some(ck) => encoder_from_checkpoint(ck)?,
        None => new_student_encoder(config)?,
    };
    if encoder.config() != &config.architecture.encoder {
        return Err(invalid("SSL checkpoint encoder does not match the configured architecture"));
    }
    Student::with_encoder(encoder, &config.architecture, dataset.dims, dataset.num_classes, &mut rng::derived(config.seed, "student-head-init"))
}

/// Stage-2 distillation from a teacher checkpoint.
pub fn distill_student(
    config: &TrainConfig,
    dataset: &SyntheticDataset,
    store: &ClipStore,
    teacher_ckpt: &Checkpoint,
    ssl_ckpt: Option<&Checkpoint>,
    opts: RunOptions<'_>,
) -> Result<Trained<Student>> {
    let teacher = teacher_from_checkpoint(teacher_ckpt)?;
    if teacher.head.num_classes() != dataset.num_classes {
        return Err(invalid(format!(
            "teacher head has {} classes but the dataset has {}",
            teacher.head.num_classes(),
            dataset.num_classes
        )));
    }
    let ids: Vec<u32> = store.split(Split::Train).into_iter().map(|(id, _)| id).collect();
    let targets = teacher_targets(&teacher, store, &ids)?;
    distill_with_targets(config, dataset, store, &targets, ssl_ckpt, opts)
}

/// Distillation given precomputed teacher logits. Reads dark clips only.
pub fn distill_with_targets(
    config: &TrainConfig,
    dataset: &SyntheticDataset,
    store: &ClipStore,
    targets: &BTreeMap<u32, Array1<f64>>,
    ssl_ckpt: Option<&Checkpoint>,
    mut opts: RunOptions<'_>,
) -> Result<Trained<Student>> {
    check_stage(config, Stage::Distill)?;
    if let Some(ck) = ssl_ckpt {
        ck.expect_stage(Stage::Ssl)?;
    }
    let mut model = initial_student(config, dataset, ssl_ckpt)?;
    let mut opt = AdamW::new(config.optimizer.adamw, &model);
    let mut p = start(config, Stage::Distill, &mut model, &mut opt, "distill-data", opts.resume)?;
    let train = store.split(Split::Train);
    for (id, _) in &train {
        let z = targets.get(id).ok_or_else(|| Error::MissingArtifact(format!("no teacher logits for clip {id}")))?;
        if z.len() != dataset.num_classes {
            return Err(invalid(format!("teacher logits have {} classes, dataset {}", z.len(), dataset.num_classes)));
        }
    }
    while !done(config, &p, opts.stop_after) {
        let mut acc = EpochAccumulator::default();
        for batch in shuffled_batches(&train, config.batch_kd, &mut p.rng) {
            let samples = batch
                .iter()
                .map(|&(id, y)| Ok(KdSample { dark: store.dark(id)?, teacher_logits: &targets[&id], label: y }))
                .collect::<Result<Vec<_>>>()?;
            let out = student_batch(&model, &samples, config.tau_kd, config.lambda_ce, config.lambda_kd)?;
            opt.update(&mut model, &out.grads)?;
            p.step_losses.push(out.loss.total);
            acc.add(&out.loss);
        }
        let val = if config.eval_every_epoch { Some(evaluate_student(&model, store, Split::Val)?) } else { None };
        epoch_end(acc.record(Stage::Distill, p.epoch + 1, val.as_ref()), &mut p, &mut opts.on_epoch);
    }
    let params = model.named_arrays();
    Ok(finish(config, Stage::Distill, dataset, model, params, opt, p))
}

pub fn student_from_checkpoint(ck: &Checkpoint) -> Result<Student> {
    ck.expect_stage(Stage::Distill)?;
    let mut s = Student::new(&ck.config.architecture, ck.dims, ck.num_classes, &mut rng::seeded(0))?;
    s.load_arrays(&ck.params)?;
    Ok(s)
}

/// Single-stream evaluation on dark clips.
pub fn evaluate_student(student: &Student, store: &ClipStore, split: Split) -> Result<Metrics> {
    let items = store.split(split);
    let logits = par::map(&items, |&(id, _)| -> Result<Array1<f64>> { Ok(student.logits(store.dark(id)?)?.data) });
    let logits: Vec<Array1<f64>> = logits.into_iter().collect::<Result<_>>()?;
    let labels: Vec<usize> = items.iter().map(|&(_, y)| y).collect();
    metrics_from_logits(&logits, &labels, student.head.num_classes())
}

/// Teacher or distilled-student checkpoint on a split.
pub fn evaluate(ck: &Checkpoint, store: &ClipStore, split: Split) -> Result<Metrics> {
    match ck.stage {
        Stage::Teacher => evaluate_teacher(&teacher_from_checkpoint(ck)?, store, split),
        Stage::Distill => evaluate_student(&student_from_checkpoint(ck)?, store, split),
        Stage::Ssl => Err(invalid("ssl checkpoints carry no classifier; distill or probe them first")),
    }
}

/// SSL-only baseline: a linear classifier trained with CE on the frozen encoder.
pub struct ProbeOutcome {
    pub probe: LinearProbe,
    pub val: Metrics,
    pub test: Metrics,
}

pub fn train_linear_probe(config: &TrainConfig, encoder: &Encoder, store: &ClipStore, num_classes: usize) -> Result<ProbeOutcome> {
    let features = |split: Split| -> Result<(Vec<Array1<f64>>, Vec<usize>)> {
        let items = store.split(split);
        let f = par::map(&items, |&(id, _)| pooled_features(encoder, store.dark(id)?)).into_iter().collect::<Result<Vec<_>>>()?;
        Ok((f, items.iter().map(|&(_, y)| y).collect()))
    };
    let (train_x, train_y) = features(Split::Train)?;
    let mut rng = rng::derived(config.seed, "probe");
    let views: Vec<_> = train_x.iter().map(|x| x.view()).collect();
    let stacked: Array2<f64> = ndarray::stack(ndarray::Axis(0), &views).map_err(|e| invalid(e.to_string()))?;
    let mut probe = LinearProbe::fit_standardizer(&stacked, num_classes, &mut rng);
    let mut opt = AdamW::new(config.optimizer.adamw, &probe.linear);
    let idx: Vec<usize> = (0..train_x.len()).collect();
    for _ in 0..config.epochs {
        for batch in shuffled_batches(&idx, config.batch_kd, &mut rng) {
            let xs: Vec<&Array1<f64>> = batch.iter().map(|&i| &train_x[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let (_, g) = probe.batch(&xs, &ys)?;
            opt.update(&mut probe.linear, &g)?;
        }
    }
    let eval = |split: Split| -> Result<Metrics> {
        let (x, y) = features(split)?;
        let logits: Vec<Array1<f64>> = x.iter().map(|f| probe.logits(f).data).collect();
        metrics_from_logits(&logits, &y, num_classes)
    };
    Ok(ProbeOutcome { val: eval(Split::Val)?, test: eval(Split::Test)?, probe })
}
