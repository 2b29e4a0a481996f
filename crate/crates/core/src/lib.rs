//! Desk-scale simulation, training, and evaluation toolkit for visual
//! tool-to-target alignment.
//!
//! The crate simulates a two-camera robot rig servoing a handheld tool tip
//! onto a small target, and provides everything needed to reproduce the
//! pipeline end to end: serial-arm kinematics with bound-constrained IK,
//! a synthetic pinhole-camera scene, kinematics-derived dataset collection,
//! a multi-perception-head loss with gain-scheduled weighting, a small
//! encoder-decoder distance estimation network with hand-rolled training-grade
//! differentiation, and a dual-frequency servo controller closed against the
//! simulator.

pub mod config;
pub mod controller;
pub mod dataset;
pub mod kinematics;
pub mod model;
pub mod mph;
pub mod scene;
