//! Shared fixtures for the benchmark suite: specs, checkpoints, and probe
//! batches sized large enough that the timed operations dominate setup.

use rbdc_core::checkpoint::{Checkpoint, Lineage};
use rbdc_core::rng::{derive_seed, rng_from_seed, standard_normal_vec};
use rbdc_core::tensor::{Precision, Tensor};
use rbdc_core::zoo::{Family, Model, ModelSpec};

/// A mid-sized MLP: wide enough that coupling moves real data.
pub fn mlp_spec(width: usize) -> ModelSpec {
    ModelSpec {
        family: Family::Mlp,
        width,
        depth: 4,
        heads: 0,
        head_dim: 0,
        patch_size: 0,
        input_shape: vec![64],
        num_classes: 10,
        min_width: 4,
    }
}

/// A small transformer, the structurally richest family.
pub fn vit_spec(width: usize) -> ModelSpec {
    ModelSpec {
        family: Family::MiniVit,
        width,
        depth: 2,
        heads: width / 8,
        head_dim: 8,
        patch_size: 4,
        input_shape: vec![1, 16, 16],
        num_classes: 10,
        min_width: 8,
    }
}

/// Freshly initialized checkpoint for `spec`, seeded per label.
pub fn checkpoint(spec: &ModelSpec, label: &str, seed: u64) -> Checkpoint {
    let model = Model::build(spec, seed, Precision::F64).expect("buildable spec");
    Checkpoint::from_model(&model, seed, 0, Lineage::leaf(label, spec.width, seed, 0))
}

/// Standard-normal probe batch shaped for `spec`.
pub fn probes(spec: &ModelSpec, count: usize, seed: u64) -> Tensor {
    let mut shape = vec![count];
    shape.extend_from_slice(&spec.input_shape);
    let n: usize = shape.iter().product();
    let mut rng = rng_from_seed(derive_seed(seed, "bench/probes"));
    Tensor::new(shape, standard_normal_vec(&mut rng, n), Precision::F64).expect("valid probe shape")
}
