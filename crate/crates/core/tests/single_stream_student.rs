//! Kept in its own test binary: the retinex call counter is process-wide.

mod common;

use actlumos::clipgen::Split;
use actlumos::enhance::retinex_call_count;
use actlumos::trainer::{
    distill_with_targets, evaluate_student, pretrain_student_ssl, ssl_pool, teacher_targets, train_linear_probe, train_teacher, RunOptions, Stage,
    TrainConfig,
};
use common::{micro_config, micro_dataset, store};

#[test]
fn student_phases_never_touch_retinex() {
    let data = micro_dataset(4, 10);
    let clips = store(&data);
    let teacher = train_teacher(&TrainConfig { epochs: 1, ..micro_config(Stage::Teacher) }, &data, &clips, RunOptions::default()).unwrap();
    let ids: Vec<u32> = clips.split(Split::Train).into_iter().map(|(id, _)| id).collect();
    let targets = teacher_targets(&teacher.model, &clips, &ids).unwrap();
    assert!(retinex_call_count() > 0, "teacher phase enhances clips");

    let before = retinex_call_count();
    let ssl_cfg = TrainConfig { epochs: 1, ..micro_config(Stage::Ssl) };
    let pool = ssl_pool(&data, ssl_cfg.ssl_extra_clips, data.sampler_seed).unwrap();
    let ssl = pretrain_student_ssl(&ssl_cfg, &data, &pool, RunOptions::default()).unwrap();
    let student = distill_with_targets(&micro_config(Stage::Distill), &data, &clips, &targets, Some(&ssl.checkpoint), RunOptions::default()).unwrap();
    let m = evaluate_student(&student.model, &clips, Split::Test).unwrap();
    assert!(m.top5 >= m.top1);
    train_linear_probe(&ssl_cfg, &ssl.model, &clips, data.num_classes).unwrap();
    assert_eq!(retinex_call_count() - before, 0);
}
