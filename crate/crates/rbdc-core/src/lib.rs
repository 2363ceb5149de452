//! Recursive block-diagonal coupling (RBDC) for width-scaled model
//! families, at desk scale.
//!
//! The library trains narrow models, couples pairs of them into a
//! model of twice the width by placing their weight matrices on the
//! block diagonal, and repeats until the target width is reached. At
//! coupling time the wide model's logits are exactly the average of
//! its parents' logits, so every wide phase starts from an ensemble
//! rather than from noise.
//!
//! Modules:
//! - [`tensor`]: dense row-major tensors with an explicit numeric
//!   precision and order-stable (pairwise) reductions.
//! - [`rng`]: seed derivation and the truncated-normal initializer.
//! - [`tape`]: reverse-mode autodiff over the ops the model zoo needs.
//! - [`zoo`]: the three width-parameterized families (MLP, mini CNN,
//!   mini ViT) behind one forward interface.
//! - [`checkpoint`]: a self-describing binary format with lineage.
//! - [`coupling`]: the per-role coupling rules, the structural audit,
//!   and ensemble-equivalence verification.
//! - [`budget`]: FLOPs accounting and epoch planning under a budget.
//! - [`data`]: synthetic class-mean tasks and IDX image/label files.
//! - [`protocol`]: the trainer, the recursion driver, and experiment
//!   runs.

pub mod budget;
pub mod checkpoint;
pub mod coupling;
pub mod data;
pub mod error;
pub mod protocol;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod zoo;

pub use budget::{BudgetPlan, CostModel, Flops};
pub use checkpoint::{Checkpoint, Lineage, Metadata};
pub use coupling::{CouplingReport, EnsembleMode, PaddingMode};
pub use error::{Error, Result};
pub use protocol::{ExperimentPlan, PlanKind, RunRecord, RunTree, SplitMode, TrainConfig};
pub use tensor::{Precision, Tensor};
pub use zoo::{Family, Model, ModelSpec};
