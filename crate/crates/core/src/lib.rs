//! Permutation-invariant Bayesian exploratory factor analysis for ordinal
//! rating data with crossed and nested measurement structure.
//!
//! The pipeline runs in stages, each usable on its own:
//!
//! 1. [`data`] loads long-format rating events and validates the
//!    teacher/section/lesson/segment hierarchy.
//! 2. [`gibbs`] samples the hierarchical ordinal-probit model whose teacher
//!    effects follow a parameter-expanded factor model ([`effects`],
//!    [`ordinal`]).
//! 3. [`identify`] rotates every loading draw to varimax and aligns the
//!    draws to a common column order and sign.
//! 4. [`modelcheck`] scores factor counts (LPML, parallel analysis) and
//!    checks convergence and unimodality; [`stage2`] correlates factor
//!    scores with external teacher measures.
//!
//! [`synthetic`] simulates data from the full generative model and is the
//! ground truth for the recovery tests.

pub mod archive;
pub mod data;
pub mod dip;
pub mod effects;
pub mod error;
pub mod gibbs;
pub mod identify;
pub mod kv;
pub mod linalg;
pub mod modelcheck;
pub mod ordinal;
pub mod report;
pub mod stage2;
pub mod synthetic;

pub use error::{BefaError, Result};
