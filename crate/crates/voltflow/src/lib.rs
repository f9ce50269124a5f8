//! Operator-guided conditional flow matching for battery discharge waveforms.
//!
//! The crate trains a generative model for fixed-length discharge curves in
//! three stages: a spectral neural operator is pretrained with a ranking loss
//! that orders mean voltage by temperature, then frozen; a conditional
//! flow-matching velocity field learns to generate waveforms with the frozen
//! operator's output as guidance; finally a hierarchy of physics validators,
//! scored counterfactually over a temperature grid and deconfounded with a
//! backdoor adjustment, gates phase-scheduled constraint penalties during a
//! refinement stage.
//!
//! Modules follow the data path: [`tape`] (reverse-mode autodiff),
//! [`condition`] (temperature encoding), [`fno`] (spectral operator),
//! [`flow`] (flow matching + ODE sampling), [`hierarchy`] (validators, gate,
//! schedules), [`synth`] (waveform corpus), [`metrics`] (RMSE / feature-space
//! Fréchet / discrimination), [`pipeline`] (stages, checkpoints, experiment
//! suite).

#![forbid(unsafe_code)]

pub mod checkpoint;
pub mod condition;
pub mod config;
pub mod flow;
pub mod fno;
pub mod hierarchy;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tape;
