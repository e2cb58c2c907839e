//! Learning trading policies with DDPG and prioritized replay, checked against
//! closed-form and grid-searched reference strategies.
//!
//! The crate is organised bottom-up:
//!
//! - [`env`]: the three trading environments and rollouts.
//! - [`reference`]: the LQR closed form, band and threshold grid searches.
//! - [`nn`]: a small MLP with reverse-mode gradients and Adam.
//! - [`replay`]: a prioritized replay buffer on a sum tree.
//! - [`agent`]: DDPG training with checkpoints.
//! - [`harness`]: coupled evaluation, seed summaries and policy exports.
//! - [`config`] and [`cli`]: run configuration and the `detpo` commands.

// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod cli;
pub mod config;
pub mod env;
pub mod harness;
pub mod nn;
pub mod reference;
pub mod replay;
