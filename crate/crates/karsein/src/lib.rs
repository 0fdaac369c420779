//! Feature-interaction networks with B-spline learnable activations for CTR
//! prediction: the two-tower interaction model, a vanilla per-edge KAN and a
//! plain MLP as references, sparsity-regularized training with hand-derived
//! gradients, pruning-based feature de-redundancy, and symbolic (cubic)
//! explanation of learned activations.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod kan;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod spline;
pub mod training;

pub use error::{Error, Result};
pub use matrix::{sigmoid, silu, silu_grad, Matrix, Scalar};
pub use model::{HeadMode, KarseinHyper, KarseinModel, TowerSet};
pub use optim::{adam_update, finite_diff_check, AdamState, GradSlot, ParamGrads};
pub use spline::{edge_activate, BSplineBasis, EdgeActivation};
pub use training::{train, TrainConfig, TrainReport};
