//! Joint cluster cross-modal hashing (JCCH).
//!
//! Two modalities are hashed into a shared Hamming space by pulling each
//! item's real-valued hash activations towards learned semantic cluster
//! centers, one per label, shared between the two encoders. The training
//! objective is an O(n) unary loss whose per-item, per-label coefficients
//! are chosen so that it upper-bounds the O(n³) cross-modal triplet ranking
//! loss, including for multilabel data with correlated, unbalanced labels.
//!
//! Crate map:
//!
//! - [`labels`], [`data`]: label sets, similarity, synthetic datasets, splits.
//! - [`coefficients`]: anchor-sampled coefficient estimation, exact and
//!   brute-force references, rescaling.
//! - [`losses`]: every loss term of the objective with analytic gradients.
//! - [`ablation`]: tuned comparison against the constant-coefficient baseline.
//! - [`bounds`]: brute-force triplet losses and numeric certification of the
//!   upper bounds.
//! - [`trainer`]: two-modality MLP encoders, SGD with momentum, training loop
//!   and gradient checking.
//! - [`retrieval`]: sign codes, packed Hamming search, MAP and precision@k.
//! - [`io`]: the binary file formats and CSV import.
//! - [`config`], [`cli`]: flat key-value run configs and the command drivers
//!   behind the `jcch` binary.
//!
//! Runnable walkthroughs of each capability live in this crate's `examples/`
//! directory (`cargo run --release --example <name>`).

pub mod ablation;
pub mod bounds;
pub mod cli;
pub mod coefficients;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod labels;
pub mod losses;
pub mod matrix;
pub mod retrieval;
pub mod rng;
pub mod trainer;

pub use coefficients::{AnchorSet, CoefficientSet, FullTripletCoefficients};
pub use data::{CrossModalDataset, LabelModel, Split, SplitSpec, SynthSpec};
pub use error::{Error, Result};
pub use labels::LabelMatrix;
pub use losses::{CenterMatrix, LossWeights, Metric};
pub use matrix::{FeatureMatrix, Matrix};
pub use retrieval::{EvalReport, HashCodeSet};
pub use trainer::{EncoderParams, TrainConfig, TrainReport};
