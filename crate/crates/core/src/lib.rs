//! Hierarchical visuomotor locomotion: a vision-driven high level emitting
//! latent commands and durations, a linear low level modulating a trot
//! trajectory generator, and an augmented-random-search trainer.

pub mod analysis;
pub mod ars;
pub mod checkpoint;
pub mod config;
pub mod nnet;
pub mod policy;
pub mod runner;
pub mod stats;
pub mod tg;
pub mod train;
pub mod world;
