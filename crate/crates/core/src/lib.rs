//! Dark-video action recognition with a dual-stream (dark + retinex) teacher
//! and a single-stream student trained by two-view self-supervision and
//! knowledge distillation. Everything runs on small synthetic clips.

pub mod ablate;
pub mod array_dump;
pub mod cli;
pub mod clipgen;
pub mod conv;
pub mod encoder;
pub mod enhance;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod verify;
