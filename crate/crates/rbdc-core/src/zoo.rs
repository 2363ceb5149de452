//! Width-parameterized model families: a toy MLP, a mini CNN with batch
//! norm, and a mini ViT with layer norm and multi-head attention.
//!
//! Every family is defined by a [`ModelSpec`] whose `width` scales all
//! feature dimensions. `halve()` produces the spec of the narrow model
//! whose parameters block-couple into the wide one: widths halve, ViT
//! head counts halve with head_dim constant, and everything else is
//! untouched. Parameter tensors carry a [`LayerRole`] that selects the
//! coupling rule applied to them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, trunc_normal_vec, Rng64};
use crate::tape::{Tape, Var};
use crate::tensor::{Precision, Tensor};

/// Weight-init standard deviation (truncated at two sigma).
pub const INIT_STD: f64 = 0.02;
/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;
/// Batch-norm epsilon and running-statistics momentum.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// The mini CNN is a fixed 3-stage stack; `depth` sets blocks per stage.
pub const CNN_STAGES: usize = 3;
/// Hidden expansion factor of MLP blocks (transformer convention).
pub const MLP_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Mlp,
    MiniCnn,
    MiniVit,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::MiniCnn => "mini_cnn",
            Family::MiniVit => "mini_vit",
        }
    }
}

/// Complete structural description of a model. Two models with equal
/// specs are architecturally identical; only their parameters differ.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    /// Embedding dim (mlp, mini_vit) or base channel count (mini_cnn).
    pub width: usize,
    /// Blocks: MLP blocks, conv blocks per stage, or transformer blocks.
    pub depth: usize,
    /// mini_vit only; halves along with width.
    #[serde(default)]
    pub heads: usize,
    /// mini_vit only; constant under halving.
    #[serde(default)]
    pub head_dim: usize,
    /// mini_vit only.
    #[serde(default)]
    pub patch_size: usize,
    /// `[D]` for mlp, `[C, H, W]` for the image families.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Narrowest width the family supports; halve() refuses to go below.
    #[serde(default = "default_min_width")]
    pub min_width: usize,
}

fn default_min_width() -> usize {
    1
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::InvalidSpec {
                detail: format!("width {} and depth {} must be positive", self.width, self.depth),
            });
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec {
                detail: format!("need at least 2 classes, got {}", self.num_classes),
            });
        }
        if self.min_width == 0 {
            return Err(Error::InvalidSpec { detail: "min_width must be positive".into() });
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec {
                detail: format!("degenerate input shape {:?}", self.input_shape),
            });
        }
        match self.family {
            Family::Mlp => Ok(()),
            Family::MiniCnn => {
                if self.input_shape.len() != 3 {
                    return Err(Error::InvalidSpec {
                        detail: format!("mini_cnn expects [C, H, W] input, got {:?}", self.input_shape),
                    });
                }
                cnn_geometry(self).map(|_| ())
            }
            Family::MiniVit => {
                if self.input_shape.len() != 3 {
                    return Err(Error::InvalidSpec {
                        detail: format!("mini_vit expects [C, H, W] input, got {:?}", self.input_shape),
                    });
                }
                if self.heads == 0 || self.head_dim == 0 {
                    return Err(Error::InvalidSpec {
                        detail: "mini_vit needs heads and head_dim".into(),
                    });
                }
                if self.heads * self.head_dim != self.width {
                    return Err(Error::InvalidSpec {
                        detail: format!(
                            "heads x head_dim = {}x{} != width {}",
                            self.heads, self.head_dim, self.width
                        ),
                    });
                }
                if self.patch_size == 0
                    || self.input_shape[1] % self.patch_size != 0
                    || self.input_shape[2] % self.patch_size != 0
                {
                    return Err(Error::InvalidSpec {
                        detail: format!(
                            "patch size {} must divide spatial dims {}x{}",
                            self.patch_size, self.input_shape[1], self.input_shape[2]
                        ),
                    });
                }
                Ok(())
            }
        }
    }

    /// Spec of the narrow sibling: width/2, and for mini_vit heads/2
    /// with head_dim unchanged.
    pub fn halve(&self) -> Result<ModelSpec> {
        if self.width % 2 != 0 {
            return Err(Error::InvalidSpec {
                detail: format!("width {} is not divisible by 2", self.width),
            });
        }
        if self.width / 2 < self.min_width {
            return Err(Error::InvalidSpec {
                detail: format!("halving width {} would go below min_width {}", self.width, self.min_width),
            });
        }
        let mut spec = self.clone();
        spec.width /= 2;
        if self.family == Family::MiniVit {
            if self.heads % 2 != 0 {
                return Err(Error::InvalidSpec {
                    detail: format!("head count {} is not divisible by 2", self.heads),
                });
            }
            spec.heads /= 2;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Spec of the width-doubled model (inverse of [`halve`]).
    pub fn double(&self) -> Result<ModelSpec> {
        let mut spec = self.clone();
        spec.width *= 2;
        if self.family == Family::MiniVit {
            spec.heads *= 2;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Flattened input dimensionality.
    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Role a parameter tensor plays; the coupling rule is selected by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    AttnQkv,
    AttnProj,
    MlpFc,
    Head,
    Conv,
    ConvStem,
    LayerNorm,
    BatchNorm,
    PosEmbed,
    ClassToken,
}

impl LayerRole {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerRole::AttnQkv => "attn_qkv",
            LayerRole::AttnProj => "attn_proj",
            LayerRole::MlpFc => "mlp_fc",
            LayerRole::Head => "head",
            LayerRole::Conv => "conv",
            LayerRole::ConvStem => "conv_stem",
            LayerRole::LayerNorm => "layer_norm",
            LayerRole::BatchNorm => "batch_norm",
            LayerRole::PosEmbed => "pos_embed",
            LayerRole::ClassToken => "class_token",
        }
    }

    pub fn from_str_tag(s: &str) -> Option<Self> {
        Some(match s {
            "attn_qkv" => LayerRole::AttnQkv,
            "attn_proj" => LayerRole::AttnProj,
            "mlp_fc" => LayerRole::MlpFc,
            "head" => LayerRole::Head,
            "conv" => LayerRole::Conv,
            "conv_stem" => LayerRole::ConvStem,
            "layer_norm" => LayerRole::LayerNorm,
            "batch_norm" => LayerRole::BatchNorm,
            "pos_embed" => LayerRole::PosEmbed,
            "class_token" => LayerRole::ClassToken,
            _ => return None,
        })
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub role: LayerRole,
    pub tensor: Tensor,
    /// Running statistics are carried but never touched by the optimizer.
    pub trainable: bool,
}

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Layout of layer-norm statistics: joint over the full feature axis
/// (the real model), or split into the two coupled halves (a debugging
/// layout that makes ensemble equivalence exact for mini_vit).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormLayout {
    Joint,
    SplitHalves,
}

impl NormLayout {
    fn segments(self) -> usize {
        match self {
            NormLayout::Joint => 1,
            NormLayout::SplitHalves => 2,
        }
    }
}

/// Result of one forward pass through a model on a tape.
pub struct ForwardOut {
    pub logits: Var,
    /// mini_vit only: assembled token matrix before the first layer
    /// norm (patch embedding + class token + positional offsets).
    pub pre_norm_tokens: Option<Var>,
    /// Tape handle of every parameter that entered the graph, by
    /// parameter index; the optimizer reads gradients through these.
    pub param_vars: Vec<(usize, Var)>,
}

/// A built model: spec plus parameters in canonical layout order.
pub struct Model {
    pub spec: ModelSpec,
    pub precision: Precision,
    params: Vec<Param>,
    /// Forward passes completed in train mode; batch-norm eval requires
    /// at least one so the running statistics are meaningful.
    pub bn_batches_tracked: u64,
    index: HashMap<String, usize>,
}

// ── parameter layout ────────────────────────────────────────────────

enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// Declarative description of one parameter slot.
pub struct ParamDef {
    pub name: String,
    pub role: LayerRole,
    pub shape: Vec<usize>,
    pub trainable: bool,
    init: Init,
}

fn def(name: String, role: LayerRole, shape: Vec<usize>, trainable: bool, init: Init) -> ParamDef {
    ParamDef { name, role, shape, trainable, init }
}

/// Conv layer dimensions used by both the builder and the FLOPs model.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if extent + 2 * pad < kernel {
        return Err(Error::InvalidSpec {
            detail: format!("spatial extent {} too small for kernel {}", extent, kernel),
        });
    }
    Ok((extent + 2 * pad - kernel) / stride + 1)
}

/// Stem plus every stage conv of the mini CNN, in forward order.
pub fn cnn_geometry(spec: &ModelSpec) -> Result<Vec<ConvGeom>> {
    let (c0, mut h, mut w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
    let mut layers = Vec::new();
    h = conv_out(h, 3, 1, 1)?;
    w = conv_out(w, 3, 1, 1)?;
    layers.push(ConvGeom { c_in: c0, c_out: spec.width, kernel: 3, stride: 1, pad: 1, h_out: h, w_out: w });
    let mut c_prev = spec.width;
    for stage in 0..CNN_STAGES {
        let c_stage = spec.width << stage;
        for block in 0..spec.depth {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            h = conv_out(h, 3, stride, 1)?;
            w = conv_out(w, 3, stride, 1)?;
            if h == 0 || w == 0 {
                return Err(Error::InvalidSpec {
                    detail: "input too small for the 3-stage downsampling stack".into(),
                });
            }
            layers.push(ConvGeom { c_in: c_prev, c_out: c_stage, kernel: 3, stride, pad: 1, h_out: h, w_out: w });
            c_prev = c_stage;
        }
    }
    Ok(layers)
}

/// Patch-token count of the mini ViT (excluding the class token).
pub fn vit_patch_tokens(spec: &ModelSpec) -> usize {
    (spec.input_shape[1] / spec.patch_size) * (spec.input_shape[2] / spec.patch_size)
}

/// Feature dimension entering the classification head.
pub fn head_in_dim(spec: &ModelSpec) -> usize {
    match spec.family {
        Family::Mlp => spec.width,
        Family::MiniCnn => spec.width << (CNN_STAGES - 1),
        Family::MiniVit => spec.width,
    }
}

/// Canonical parameter layout of a spec: names, roles, shapes, and
/// trainability in build order. Checkpoints are validated against this.
pub fn param_layout(spec: &ModelSpec) -> Result<Vec<ParamDef>> {
    spec.validate()?;
    let w = spec.width;
    let c = spec.num_classes;
    let mut defs = Vec::new();
    match spec.family {
        Family::Mlp => {
            let d = spec.input_dim();
            defs.push(def("stem.weight".into(), LayerRole::ConvStem, vec![w, d], true, Init::TruncNormal));
            defs.push(def("stem.bias".into(), LayerRole::ConvStem, vec![w], true, Init::Zeros));
            let hidden = MLP_EXPANSION * w;
            for i in 0..spec.depth {
                defs.push(def(format!("block.{i}.fc1.weight"), LayerRole::MlpFc, vec![hidden, w], true, Init::TruncNormal));
                defs.push(def(format!("block.{i}.fc1.bias"), LayerRole::MlpFc, vec![hidden], true, Init::Zeros));
                defs.push(def(format!("block.{i}.fc2.weight"), LayerRole::MlpFc, vec![w, hidden], true, Init::TruncNormal));
                defs.push(def(format!("block.{i}.fc2.bias"), LayerRole::MlpFc, vec![w], true, Init::Zeros));
            }
        }
        Family::MiniCnn => {
            let geom = cnn_geometry(spec)?;
            let stem = geom[0];
            defs.push(def("stem.weight".into(), LayerRole::ConvStem, vec![stem.c_out, stem.c_in, 3, 3], true, Init::TruncNormal));
            defs.push(def("stem.bias".into(), LayerRole::ConvStem, vec![stem.c_out], true, Init::Zeros));
            for (li, g) in geom[1..].iter().enumerate() {
                let stage = li / spec.depth;
                let block = li % spec.depth;
                let p = format!("stage.{stage}.block.{block}");
                defs.push(def(format!("{p}.conv.weight"), LayerRole::Conv, vec![g.c_out, g.c_in, 3, 3], true, Init::TruncNormal));
                defs.push(def(format!("{p}.conv.bias"), LayerRole::Conv, vec![g.c_out], true, Init::Zeros));
                defs.push(def(format!("{p}.bn.gamma"), LayerRole::BatchNorm, vec![g.c_out], true, Init::Ones));
                defs.push(def(format!("{p}.bn.beta"), LayerRole::BatchNorm, vec![g.c_out], true, Init::Zeros));
                defs.push(def(format!("{p}.bn.running_mean"), LayerRole::BatchNorm, vec![g.c_out], false, Init::Zeros));
                defs.push(def(format!("{p}.bn.running_var"), LayerRole::BatchNorm, vec![g.c_out], false, Init::Ones));
            }
        }
        Family::MiniVit => {
            let c_in = spec.input_shape[0];
            let p = spec.patch_size;
            let tokens = vit_patch_tokens(spec);
            defs.push(def("patch_embed.weight".into(), LayerRole::ConvStem, vec![w, c_in, p, p], true, Init::TruncNormal));
            defs.push(def("patch_embed.bias".into(), LayerRole::ConvStem, vec![w], true, Init::Zeros));
            defs.push(def("class_token".into(), LayerRole::ClassToken, vec![w], true, Init::TruncNormal));
            defs.push(def("pos_embed".into(), LayerRole::PosEmbed, vec![tokens + 1, w], true, Init::TruncNormal));
            let hidden = MLP_EXPANSION * w;
            for i in 0..spec.depth {
                let b = format!("block.{i}");
                defs.push(def(format!("{b}.norm1.gamma"), LayerRole::LayerNorm, vec![w], true, Init::Ones));
                defs.push(def(format!("{b}.norm1.beta"), LayerRole::LayerNorm, vec![w], true, Init::Zeros));
                defs.push(def(format!("{b}.attn_qkv.weight"), LayerRole::AttnQkv, vec![3 * w, w], true, Init::TruncNormal));
                defs.push(def(format!("{b}.attn_qkv.bias"), LayerRole::AttnQkv, vec![3 * w], true, Init::Zeros));
                defs.push(def(format!("{b}.attn_proj.weight"), LayerRole::AttnProj, vec![w, w], true, Init::TruncNormal));
                defs.push(def(format!("{b}.attn_proj.bias"), LayerRole::AttnProj, vec![w], true, Init::Zeros));
                defs.push(def(format!("{b}.norm2.gamma"), LayerRole::LayerNorm, vec![w], true, Init::Ones));
                defs.push(def(format!("{b}.norm2.beta"), LayerRole::LayerNorm, vec![w], true, Init::Zeros));
                defs.push(def(format!("{b}.mlp_fc1.weight"), LayerRole::MlpFc, vec![hidden, w], true, Init::TruncNormal));
                defs.push(def(format!("{b}.mlp_fc1.bias"), LayerRole::MlpFc, vec![hidden], true, Init::Zeros));
                defs.push(def(format!("{b}.mlp_fc2.weight"), LayerRole::MlpFc, vec![w, hidden], true, Init::TruncNormal));
                defs.push(def(format!("{b}.mlp_fc2.bias"), LayerRole::MlpFc, vec![w], true, Init::Zeros));
            }
            defs.push(def("norm.gamma".into(), LayerRole::LayerNorm, vec![w], true, Init::Ones));
            defs.push(def("norm.beta".into(), LayerRole::LayerNorm, vec![w], true, Init::Zeros));
        }
    }
    defs.push(def("head.weight".into(), LayerRole::Head, vec![c, head_in_dim(spec)], true, Init::TruncNormal));
    defs.push(def("head.bias".into(), LayerRole::Head, vec![c], true, Init::Zeros));
    Ok(defs)
}

// ── model construction ──────────────────────────────────────────────

fn materialize(d: &ParamDef, rng: &mut Rng64, precision: Precision) -> Result<Tensor> {
    let n: usize = d.shape.iter().product();
    let data = match d.init {
        Init::TruncNormal => trunc_normal_vec(rng, n, INIT_STD),
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    };
    Tensor::new(d.shape.clone(), data, precision)
}

impl Model {
    /// Deterministically initialize a model from its spec and seed.
    pub fn build(spec: &ModelSpec, seed: u64, precision: Precision) -> Result<Model> {
        let defs = param_layout(spec)?;
        let mut rng = rng_from_seed(seed);
        let mut params = Vec::with_capacity(defs.len());
        for d in &defs {
            params.push(Param {
                name: d.name.clone(),
                role: d.role,
                tensor: materialize(d, &mut rng, precision)?,
                trainable: d.trainable,
            });
        }
        Model::from_params(spec.clone(), precision, params, 0)
    }

    /// Assemble a model from externally supplied parameters (checkpoint
    /// loading, coupling). Validates names, roles, shapes, and order
    /// against the canonical layout of the spec.
    pub fn from_params(
        spec: ModelSpec,
        precision: Precision,
        params: Vec<Param>,
        bn_batches_tracked: u64,
    ) -> Result<Model> {
        let defs = param_layout(&spec)?;
        if defs.len() != params.len() {
            return Err(Error::Incompatible {
                detail: format!("expected {} parameters for the spec, got {}", defs.len(), params.len()),
            });
        }
        for (d, p) in defs.iter().zip(params.iter()) {
            if d.name != p.name || d.role != p.role {
                return Err(Error::Incompatible {
                    detail: format!(
                        "parameter `{}` ({}) does not match layout slot `{}` ({})",
                        p.name,
                        p.role.as_str(),
                        d.name,
                        d.role.as_str()
                    ),
                });
            }
            if d.shape != p.tensor.shape() {
                return Err(Error::Incompatible {
                    detail: format!("parameter `{}` has shape {:?}, layout expects {:?}", p.name, p.tensor.shape(), d.shape),
                });
            }
            if p.tensor.precision() != precision {
                return Err(Error::Incompatible {
                    detail: format!("parameter `{}` precision differs from the model's", p.name),
                });
            }
        }
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Model { spec, precision, params, bn_batches_tracked, index })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.param_index(name).map(|i| &self.params[i])
    }

    /// Replace one parameter tensor in place (optimizer updates).
    /// The shape and precision must be unchanged.
    pub fn set_param_tensor(&mut self, idx: usize, tensor: Tensor) -> Result<()> {
        let current = &self.params[idx].tensor;
        if current.shape() != tensor.shape() || current.precision() != tensor.precision() {
            return Err(Error::Incompatible {
                detail: format!("replacement for `{}` changes shape or precision", self.params[idx].name),
            });
        }
        self.params[idx].tensor = tensor;
        Ok(())
    }

    pub fn num_scalar_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast(&self, precision: Precision) -> Model {
        let params = self
            .params
            .iter()
            .map(|p| Param { name: p.name.clone(), role: p.role, tensor: p.tensor.cast(precision), trainable: p.trainable })
            .collect();
        Model::from_params(self.spec.clone(), precision, params, self.bn_batches_tracked)
            .expect("cast preserves layout")
    }

    fn leaf(&self, tape: &mut Tape, idx: usize, vars: &mut Vec<(usize, Var)>) -> Var {
        let v = tape.leaf(self.params[idx].tensor.clone());
        vars.push((idx, v));
        v
    }

    fn named(&self, name: &str) -> Result<usize> {
        self.param_index(name).ok_or_else(|| Error::State {
            detail: format!("parameter `{name}` missing from model"),
        })
    }

    /// Forward pass with the ordinary joint-norm layout.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<ForwardOut> {
        self.forward_with_layout(tape, x, mode, NormLayout::Joint)
    }

    /// Forward pass; `layout` selects joint or split layer norms.
    pub fn forward_with_layout(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        layout: NormLayout,
    ) -> Result<ForwardOut> {
        if x.precision() != self.precision {
            return Err(Error::PrecisionMismatch { op: "forward" });
        }
        let batch = *x.shape().first().ok_or_else(|| Error::ShapeMismatch {
            op: "forward",
            detail: "input must have a batch axis".into(),
        })?;
        let expected: Vec<usize> = std::iter::once(batch).chain(self.spec.input_shape.iter().copied()).collect();
        if x.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("input shape {:?}, spec expects {:?}", x.shape(), expected),
            });
        }
        match self.spec.family {
            Family::Mlp => self.forward_mlp(tape, x),
            Family::MiniCnn => self.forward_cnn(tape, x, mode),
            Family::MiniVit => self.forward_vit(tape, x, layout),
        }
    }

    /// Convenience: eval-mode logits on a fresh tape.
    pub fn eval_logits(&mut self, x: &Tensor) -> Result<Tensor> {
        self.eval_logits_with_layout(x, NormLayout::Joint)
    }

    pub fn eval_logits_with_layout(&mut self, x: &Tensor, layout: NormLayout) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_with_layout(&mut tape, x, Mode::Eval, layout)?;
        Ok(tape.value(out.logits).clone())
    }

    fn forward_mlp(&mut self, tape: &mut Tape, x: &Tensor) -> Result<ForwardOut> {
        let batch = x.shape()[0];
        let d = self.spec.input_dim();
        let mut vars = Vec::new();
        let input = tape.leaf(x.clone());
        let flat = tape.reshape(input, vec![batch, d])?;
        let sw = self.leaf(tape, self.named("stem.weight")?, &mut vars);
        let sb = self.leaf(tape, self.named("stem.bias")?, &mut vars);
        let mut h = tape.linear(flat, sw, Some(sb))?;
        h = tape.relu(h)?;
        for i in 0..self.spec.depth {
            let w1 = self.leaf(tape, self.named(&format!("block.{i}.fc1.weight"))?, &mut vars);
            let b1 = self.leaf(tape, self.named(&format!("block.{i}.fc1.bias"))?, &mut vars);
            let w2 = self.leaf(tape, self.named(&format!("block.{i}.fc2.weight"))?, &mut vars);
            let b2 = self.leaf(tape, self.named(&format!("block.{i}.fc2.bias"))?, &mut vars);
            let mid = tape.linear(h, w1, Some(b1))?;
            let act = tape.relu(mid)?;
            h = tape.linear(act, w2, Some(b2))?;
        }
        let hw = self.leaf(tape, self.named("head.weight")?, &mut vars);
        let hb = self.leaf(tape, self.named("head.bias")?, &mut vars);
        let logits = tape.linear(h, hw, Some(hb))?;
        Ok(ForwardOut { logits, pre_norm_tokens: None, param_vars: vars })
    }

    fn forward_cnn(&mut self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<ForwardOut> {
        if mode == Mode::Eval && self.bn_batches_tracked == 0 {
            return Err(Error::State {
                detail: "batch-norm running statistics were never updated; run a train-mode forward first".into(),
            });
        }
        let mut vars = Vec::new();
        let input = tape.leaf(x.clone());
        let sw = self.leaf(tape, self.named("stem.weight")?, &mut vars);
        let sb = self.leaf(tape, self.named("stem.bias")?, &mut vars);
        let mut h = tape.conv2d(input, sw, Some(sb), 1, 1)?;
        h = tape.relu(h)?;
        let mut running_updates: Vec<(usize, Tensor)> = Vec::new();
        for stage in 0..CNN_STAGES {
            for block in 0..self.spec.depth {
                let p = format!("stage.{stage}.block.{block}");
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                let cw = self.leaf(tape, self.named(&format!("{p}.conv.weight"))?, &mut vars);
                let cb = self.leaf(tape, self.named(&format!("{p}.conv.bias"))?, &mut vars);
                h = tape.conv2d(h, cw, Some(cb), stride, 1)?;
                let gamma = self.leaf(tape, self.named(&format!("{p}.bn.gamma"))?, &mut vars);
                let beta = self.leaf(tape, self.named(&format!("{p}.bn.beta"))?, &mut vars);
                let rm_idx = self.named(&format!("{p}.bn.running_mean"))?;
                let rv_idx = self.named(&format!("{p}.bn.running_var"))?;
                match mode {
                    Mode::Train => {
                        let (y, new_mean, new_var) = tape.batch_norm_train(
                            h,
                            gamma,
                            beta,
                            &self.params[rm_idx].tensor,
                            &self.params[rv_idx].tensor,
                            BN_MOMENTUM,
                            BN_EPS,
                        )?;
                        h = y;
                        running_updates.push((rm_idx, new_mean));
                        running_updates.push((rv_idx, new_var));
                    }
                    Mode::Eval => {
                        h = tape.batch_norm_eval(
                            h,
                            gamma,
                            beta,
                            &self.params[rm_idx].tensor,
                            &self.params[rv_idx].tensor,
                            BN_EPS,
                        )?;
                    }
                }
                h = tape.relu(h)?;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let hw = self.leaf(tape, self.named("head.weight")?, &mut vars);
        let hb = self.leaf(tape, self.named("head.bias")?, &mut vars);
        let logits = tape.linear(pooled, hw, Some(hb))?;
        for (idx, tensor) in running_updates {
            self.params[idx].tensor = tensor;
        }
        if mode == Mode::Train {
            self.bn_batches_tracked += 1;
        }
        Ok(ForwardOut { logits, pre_norm_tokens: None, param_vars: vars })
    }

    fn forward_vit(&mut self, tape: &mut Tape, x: &Tensor, layout: NormLayout) -> Result<ForwardOut> {
        let w = self.spec.width;
        let heads = self.spec.heads;
        let segments = layout.segments();
        if segments > 1 && (w % segments != 0 || heads % segments != 0) {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("split layout needs width {} and heads {} divisible by {}", w, heads, segments),
            });
        }
        let mut vars = Vec::new();
        let input = tape.leaf(x.clone());
        let pw = self.leaf(tape, self.named("patch_embed.weight")?, &mut vars);
        let pb = self.leaf(tape, self.named("patch_embed.bias")?, &mut vars);
        let patches = tape.conv2d(input, pw, Some(pb), self.spec.patch_size, 0)?;
        let tokens = tape.nchw_to_tokens(patches)?;
        let ct = self.leaf(tape, self.named("class_token")?, &mut vars);
        let with_class = tape.prepend_token(tokens, ct)?;
        let pe = self.leaf(tape, self.named("pos_embed")?, &mut vars);
        let mut h = tape.add(with_class, pe)?;
        let pre_norm_tokens = Some(h);
        for i in 0..self.spec.depth {
            let b = format!("block.{i}");
            let n1g = self.leaf(tape, self.named(&format!("{b}.norm1.gamma"))?, &mut vars);
            let n1b = self.leaf(tape, self.named(&format!("{b}.norm1.beta"))?, &mut vars);
            let normed1 = tape.layer_norm(h, n1g, n1b, LN_EPS, segments)?;
            let qkv_w = self.leaf(tape, self.named(&format!("{b}.attn_qkv.weight"))?, &mut vars);
            let qkv_b = self.leaf(tape, self.named(&format!("{b}.attn_qkv.bias"))?, &mut vars);
            let qkv = tape.linear(normed1, qkv_w, Some(qkv_b))?;
            let q = tape.slice_last(qkv, 0, w)?;
            let k = tape.slice_last(qkv, w, w)?;
            let v = tape.slice_last(qkv, 2 * w, w)?;
            let attn = tape.attention(q, k, v, heads)?;
            let proj_w = self.leaf(tape, self.named(&format!("{b}.attn_proj.weight"))?, &mut vars);
            let proj_b = self.leaf(tape, self.named(&format!("{b}.attn_proj.bias"))?, &mut vars);
            let projected = tape.linear(attn, proj_w, Some(proj_b))?;
            h = tape.add(h, projected)?;
            let n2g = self.leaf(tape, self.named(&format!("{b}.norm2.gamma"))?, &mut vars);
            let n2b = self.leaf(tape, self.named(&format!("{b}.norm2.beta"))?, &mut vars);
            let normed2 = tape.layer_norm(h, n2g, n2b, LN_EPS, segments)?;
            let f1w = self.leaf(tape, self.named(&format!("{b}.mlp_fc1.weight"))?, &mut vars);
            let f1b = self.leaf(tape, self.named(&format!("{b}.mlp_fc1.bias"))?, &mut vars);
            let f2w = self.leaf(tape, self.named(&format!("{b}.mlp_fc2.weight"))?, &mut vars);
            let f2b = self.leaf(tape, self.named(&format!("{b}.mlp_fc2.bias"))?, &mut vars);
            let mid = tape.linear(normed2, f1w, Some(f1b))?;
            let act = tape.gelu(mid)?;
            let ff = tape.linear(act, f2w, Some(f2b))?;
            h = tape.add(h, ff)?;
        }
        let ng = self.leaf(tape, self.named("norm.gamma")?, &mut vars);
        let nb = self.leaf(tape, self.named("norm.beta")?, &mut vars);
        let normed = tape.layer_norm(h, ng, nb, LN_EPS, segments)?;
        let class_feat = tape.select_token(normed, 0)?;
        let hw = self.leaf(tape, self.named("head.weight")?, &mut vars);
        let hb = self.leaf(tape, self.named("head.bias")?, &mut vars);
        let logits = tape.linear(class_feat, hw, Some(hb))?;
        Ok(ForwardOut { logits, pre_norm_tokens, param_vars: vars })
    }
}

// ── mlp hidden width, exposed for the FLOPs model ───────────────────

/// Hidden width of one MLP block.
pub fn mlp_hidden(spec: &ModelSpec) -> usize {
    MLP_EXPANSION * spec.width
}
