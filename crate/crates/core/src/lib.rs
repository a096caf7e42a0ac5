//! Marginalizable density models.
//!
//! A joint CDF over `d` variables is assembled from `m × d` monotone univariate CDF networks
//! combined through a diagonal hierarchical Tucker tensor:
//!
//! ```text
//! F(x) = Σ_{i_1..i_d} A_{i_1..i_d} Π_j φ_{i_j, j}(x_j)
//! ```
//!
//! Because the combination is multilinear in the univariate factors, marginals are obtained by
//! replacing a factor with one, densities by replacing it with its derivative, and conditionals
//! as ratios of two such contractions. All of these are exact and cost `O(d m²)`.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! double-precision types used by the CLI and the test suites.

pub mod archive;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod ht;
pub mod inference;
pub mod model;
pub mod sampler;
pub mod scalar;
pub mod stats;
pub mod training;
pub mod univariate;

pub use engine::{GradientTape, LeafKind, ModelGrad};
pub use archive::{load_model, read_model, save_model, write_model};
pub use dataset::{load_csv, read_csv, save_csv, write_csv, Dataset};
pub use error::{MdmaError, Result};
pub use ht::{build_tree, EffectiveHt, HtTensor, TreeShape};
pub use inference::{
    anomaly_score, anomaly_scores, ci_test, estimate_mi, estimate_mi_sampled, CiTestResult,
    NmdmaModel,
};
pub use model::{MdmaModel, PreparedModel, QuerySpec, QueryTag};
pub use sampler::{sample, sample_autoregressive, sample_component, ComponentPath};
pub use scalar::Scalar;
pub use training::{adaptive_coupling, fit, init_model, loss_and_grad, Adam, FitOutcome, FitStatus, TrainConfig};
pub use univariate::{EffectiveNet, UnivariateCdfNet};

pub type Mdma = MdmaModel<f64>;
pub type Mdma32 = MdmaModel<f32>;
pub type Query = QuerySpec<f64>;
pub type CdfNet = UnivariateCdfNet<f64>;
pub type Ht = HtTensor<f64>;
