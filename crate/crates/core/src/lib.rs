//! Core algorithms for a desk-scale constrained policy optimization
//! laboratory.
//!
//! The crate models reward hacking in miniature: synthetic token-sequence
//! environments score several proxy reward channels whose naive maximization
//! drifts away from a hidden gold objective ([`envs`]). A linear-softmax
//! policy ([`policy`]) is trained by clipped-surrogate policy optimization
//! with per-channel critics ([`trainer`]), optionally under Lagrangian
//! constraints whose multipliers reweight per-channel advantages
//! ([`lagrange`], [`advantage`]). Measurements from single-channel runs feed a
//! polynomial response-surface fit with kernel-density support masking
//! ([`proxyfit`]), and a budgeted Nelder–Mead search tunes constraint
//! thresholds against the gold objective ([`neldermead`]).
//!
//! Everything is deterministic given its seeds: all randomness flows through
//! explicitly seeded ChaCha8 streams, and no iteration order depends on hash
//! maps. The crate is `no_std`-compatible (with `alloc`); the `std` feature
//! (on by default) only forwards to dependencies.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod linalg;

pub mod advantage;
pub mod envs;
pub mod lagrange;
pub mod neldermead;
pub mod policy;
pub mod proxyfit;
pub mod trainer;

pub use envs::{EnvError, EnvState, GoodhartSpec, ProbeResult, RewardVector};
pub use policy::{ReferencePolicy, SoftmaxPolicy, ValueHeads};
