//! Tree-based learners for longitudinal and clustered data.
//!
//! The crate covers single regression trees ([`cart`]), bagged forests
//! ([`forest`]), linear mixed models ([`lmm`]), RE-EM trees ([`reem`]) and
//! mixed effects random forests ([`merf`]), plus the data handling
//! ([`dataset`]), simulation ([`synthgen`]) and cross-validation
//! ([`evaluation`]) needed to compare them.

// Negated comparisons are used on purpose so NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cart;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod forest;
pub mod lmm;
pub mod merf;
pub mod model_io;
pub mod reem;
pub mod synthgen;

pub use cart::{CpTable, Tree, TreeParams};
pub use dataset::{CsvSchema, FeatureMatrix, FoldAssignment, FoldMode, Observation, PanelDataset};
pub use error::{Error, Result};
pub use forest::{Forest, ForestParams};
pub use lmm::{Correlation, FixedSpec, LmmFit, LmmOptions, RandomSpec, VarianceComponents};
pub use merf::{MerfModel, MerfParams};
pub use reem::{ReemModel, ReemParams};
