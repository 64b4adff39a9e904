//! Residual-network models as an ordered composition of prunable blocks.
//!
//! A model is `classifier ∘ block_n ∘ … ∘ block_1 ∘ stem`. Each residual
//! block is one prunable unit with a stable 1-based id assigned at build
//! time; ids survive surgery, so a pruning decision made on the full model
//! still names the same physical blocks afterwards.

mod blocks;
mod checkpoint;
mod layout;

pub use blocks::{Block, BlockEvalTrace, BlockTrainCache, Stem, StemEvalTrace, StemTrainCache};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use layout::{stem_layout, unit_layouts, StemLayout, UnitLayout};

use std::collections::BTreeSet;

use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ops, Linear, TensorKind, VisitTensors, VisitTensorsMut};
use crate::rng::{stream_rng, Stream};

/// Model family. Determines the stem, block wiring, and classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// 3×3 stem, three-ish stages of basic blocks, CIFAR-style input.
    ResnetCifar,
    /// 7×7/stride-2 stem plus max-pool, ImageNet-style input.
    ResnetImagenet,
    /// Small CIFAR-style network for desk experiments.
    TinyResnet,
    /// Residual multi-layer perceptron on `(d, 1, 1)` inputs; blocks are
    /// pointwise maps `x + relu(Wx + b)`.
    ResidualMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

/// One stage: `block_count` blocks at `channels` output channels. When
/// `downsample` is set the stage entry block halves the spatial size
/// (projection shortcut); for `residual-mlp` it only switches width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub block_count: usize,
    pub channels: usize,
    pub downsample: bool,
}

/// Architecture description. Round-trips through serde unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub family: Family,
    pub stages: Vec<StageSpec>,
    pub block_kind: BlockKind,
    pub num_classes: usize,
    /// `(channels, height, width)`.
    pub input_shape: (usize, usize, usize),
}

impl NetworkSpec {
    /// CIFAR ResNet-56: three stages of nine basic blocks at 16/32/64
    /// channels.
    pub fn resnet56(num_classes: usize) -> Self {
        NetworkSpec {
            family: Family::ResnetCifar,
            stages: vec![
                StageSpec { block_count: 9, channels: 16, downsample: false },
                StageSpec { block_count: 9, channels: 32, downsample: true },
                StageSpec { block_count: 9, channels: 64, downsample: true },
            ],
            block_kind: BlockKind::Basic,
            num_classes,
            input_shape: (3, 32, 32),
        }
    }

    /// ImageNet ResNet-50: bottleneck blocks 3/4/6/3.
    pub fn resnet50(num_classes: usize) -> Self {
        NetworkSpec {
            family: Family::ResnetImagenet,
            stages: vec![
                StageSpec { block_count: 3, channels: 256, downsample: false },
                StageSpec { block_count: 4, channels: 512, downsample: true },
                StageSpec { block_count: 6, channels: 1024, downsample: true },
                StageSpec { block_count: 3, channels: 2048, downsample: true },
            ],
            block_kind: BlockKind::Bottleneck,
            num_classes,
            input_shape: (3, 224, 224),
        }
    }

    /// Residual MLP with `blocks` equal-width blocks.
    pub fn residual_mlp(input_dim: usize, width: usize, blocks: usize, num_classes: usize) -> Self {
        NetworkSpec {
            family: Family::ResidualMlp,
            stages: vec![StageSpec { block_count: blocks, channels: width, downsample: false }],
            block_kind: BlockKind::Basic,
            num_classes,
            input_shape: (input_dim, 1, 1),
        }
    }

    /// Collects every validation problem (empty when the spec is valid).
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.stages.is_empty() {
            errs.push("arch.stages: at least one stage required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.block_count < 1 {
                errs.push(format!("arch.stages[{i}].block_count: must be >= 1"));
            }
            if s.channels == 0 {
                errs.push(format!("arch.stages[{i}].channels: must be > 0"));
            }
            if self.block_kind == BlockKind::Bottleneck && s.channels % 4 != 0 {
                errs.push(format!(
                    "arch.stages[{i}].channels: bottleneck stages need channels divisible by 4"
                ));
            }
        }
        if self.num_classes < 2 {
            errs.push("arch.num_classes: must be >= 2".into());
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            errs.push("arch.input_shape: all dimensions must be > 0".into());
        }
        match (self.family, self.block_kind) {
            (Family::ResnetCifar | Family::TinyResnet, BlockKind::Bottleneck) => {
                errs.push(format!(
                    "arch.block_kind: {:?} does not support bottleneck blocks",
                    self.family
                ));
            }
            (Family::ResidualMlp, BlockKind::Bottleneck) => {
                errs.push("arch.block_kind: residual-mlp only supports basic blocks".into());
            }
            _ => {}
        }
        if self.family == Family::ResidualMlp && (h != 1 || w != 1) {
            errs.push("arch.input_shape: residual-mlp expects (d, 1, 1) inputs".into());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Total unit count (sum of stage block counts).
    pub fn unit_count(&self) -> usize {
        self.stages.iter().map(|s| s.block_count).sum()
    }
}

/// Stable identifier of a prunable unit; the 1-based position of the block
/// in the original (unpruned) composition.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct UnitId(pub u32);

impl std::fmt::Display for UnitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Description of one residual block as a pruning candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunableUnit {
    /// Stable id (1-based).
    pub id: UnitId,
    /// 1-based stage index.
    pub stage_id: usize,
    /// True iff the block's input and output shapes match, i.e. the block
    /// can be deleted without breaking the feedforward mapping.
    pub identity_shortcut: bool,
    /// Output feature dimension (channels) of the block.
    pub feature_dim: usize,
    /// Trainable scalars owned by the block (including its shortcut
    /// projection and norm affine parameters).
    pub param_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// One live block with its stable id.
#[derive(Debug, Clone)]
pub struct Unit {
    pub id: UnitId,
    pub stage_id: usize,
    pub block: Block,
}

/// A live, editable model: stem, ordered prunable units, classifier.
#[derive(Debug, Clone)]
pub struct ModelState {
    spec: NetworkSpec,
    stem: Stem,
    units: Vec<Unit>,
    classifier: Linear,
    mode: Mode,
}

/// Caches produced by a training-mode forward pass.
pub struct TrainCache {
    stem: StemTrainCache,
    blocks: Vec<BlockTrainCache>,
    gap_in_dim: (usize, usize, usize, usize),
    feats: Array2<f32>,
}

/// Activation traces from an inference forward pass, for gradient-based
/// interpretability.
pub struct EvalTrace {
    stem: StemEvalTrace,
    blocks: Vec<BlockEvalTrace>,
    /// Output activation of every unit, in forward order.
    pub unit_outputs: Vec<Array4<f32>>,
    gap_in_dim: (usize, usize, usize, usize),
    feats: Array2<f32>,
}

impl ModelState {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Number of prunable units currently in the model.
    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit(&self, id: UnitId) -> Option<&Unit> {
        self.units.iter().find(|u| u.id == id)
    }

    pub(crate) fn unit_mut(&mut self, id: UnitId) -> Option<&mut Unit> {
        self.units.iter_mut().find(|u| u.id == id)
    }

    pub(crate) fn from_parts(
        spec: NetworkSpec,
        stem: Stem,
        units: Vec<Unit>,
        classifier: Linear,
        mode: Mode,
    ) -> Self {
        ModelState { spec, stem, units, classifier, mode }
    }

    /// Inference logits `(N, num_classes)`; always uses running statistics
    /// and never mutates the model.
    pub fn logits_eval(&self, x: &Array4<f32>) -> Array2<f32> {
        let mut h = self.stem.forward_eval(x);
        for unit in &self.units {
            h = unit.block.forward_eval(&h);
        }
        let feats = ops::global_avg_pool(&h);
        self.classifier.forward(&feats)
    }

    /// Training forward pass: batch statistics, running-stat updates, and
    /// caches for [`ModelState::backward_train`].
    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array2<f32>, TrainCache) {
        let (h, stem_cache) = self.stem.forward_train(x);
        let mut h = h;
        let mut blocks = Vec::with_capacity(self.units.len());
        for unit in &mut self.units {
            let (next, cache) = unit.block.forward_train(&h);
            blocks.push(cache);
            h = next;
        }
        let gap_in_dim = h.dim();
        let feats = ops::global_avg_pool(&h);
        let logits = self.classifier.forward(&feats);
        (logits, TrainCache { stem: stem_cache, blocks, gap_in_dim, feats })
    }

    /// Backpropagates `dlogits`, accumulating parameter gradients.
    pub fn backward_train(&mut self, dlogits: &Array2<f32>, cache: &TrainCache) {
        let dfeats = self.classifier.backward(&cache.feats, dlogits, true);
        let (_, _, h, w) = cache.gap_in_dim;
        let mut g = ops::global_avg_pool_backward(dfeats.view(), h, w);
        for (unit, bcache) in self.units.iter_mut().zip(cache.blocks.iter()).rev() {
            g = unit.block.backward_train(bcache, &g);
        }
        self.stem.backward_train(&cache.stem, &g);
    }

    /// Inference forward pass that records activation traces.
    pub fn forward_eval_traced(&self, x: &Array4<f32>) -> (Array2<f32>, EvalTrace) {
        let (h, stem_trace) = self.stem.forward_eval_traced(x);
        let mut h = h;
        let mut blocks = Vec::with_capacity(self.units.len());
        let mut unit_outputs = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let (next, trace) = unit.block.forward_eval_traced(&h);
            blocks.push(trace);
            unit_outputs.push(next.clone());
            h = next;
        }
        let gap_in_dim = h.dim();
        let feats = ops::global_avg_pool(&h);
        let logits = self.classifier.forward(&feats);
        (logits, EvalTrace { stem: stem_trace, blocks, unit_outputs, gap_in_dim, feats })
    }

    /// Backpropagates `dlogits` through the traced inference pass without
    /// touching parameters.
    ///
    /// Returns the gradient at `stop_at`'s *output* when given, otherwise
    /// the gradient at the network input. `rule` selects the rectifier
    /// backward rule (standard or guided).
    pub fn backward_eval(
        &self,
        dlogits: &Array2<f32>,
        trace: &EvalTrace,
        stop_at: Option<UnitId>,
        rule: ops::ReluRule,
    ) -> Result<Array4<f32>> {
        if let Some(id) = stop_at {
            if self.unit(id).is_none() {
                return Err(Error::argument(format!("unknown unit id {id}")));
            }
        }
        let dfeats = self.classifier.backward_data(dlogits);
        let (_, _, h, w) = trace.gap_in_dim;
        let mut g = ops::global_avg_pool_backward(dfeats.view(), h, w);
        for (unit, btrace) in self.units.iter().zip(trace.blocks.iter()).rev() {
            if stop_at == Some(unit.id) {
                return Ok(g);
            }
            g = unit.block.backward_eval(btrace, &g, rule);
        }
        Ok(self.stem.backward_eval(&trace.stem, &g, rule))
    }

    /// Walks every named tensor (stem, units in order, classifier).
    pub fn visit(&self, f: &mut dyn FnMut(&str, TensorKind, ArrayViewD<'_, f32>)) {
        self.stem.visit("stem", f);
        for unit in &self.units {
            unit.block.visit(&format!("unit{}", unit.id), f);
        }
        self.classifier.visit("classifier", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorKind, ArrayViewMutD<'_, f32>)) {
        self.stem.visit_mut("stem", f);
        for unit in &mut self.units {
            unit.block.visit_mut(&format!("unit{}", unit.id), f);
        }
        self.classifier.visit_mut("classifier", f);
    }

    pub fn visit_param_grad(
        &mut self,
        f: &mut dyn FnMut(&str, TensorKind, ArrayViewMutD<'_, f32>, ArrayViewD<'_, f32>),
    ) {
        self.stem.visit_param_grad("stem", f);
        for unit in &mut self.units {
            unit.block.visit_param_grad(&format!("unit{}", unit.id), f);
        }
        self.classifier.visit_param_grad("classifier", f);
    }

    pub fn zero_grad(&mut self) {
        self.stem.zero_grad();
        for unit in &mut self.units {
            unit.block.zero_grad();
        }
        VisitTensorsMut::zero_grad(&mut self.classifier);
    }

    /// Input/output `(C, H, W)` of every unit currently in the model.
    pub fn unit_io_shapes(&self) -> Vec<(UnitId, (usize, usize, usize), (usize, usize, usize))> {
        let (_, h, w) = self.stem.output_shape(self.spec.input_shape);
        let mut cur = (self.stem.out_channels(), h, w);
        let mut out = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let next = unit.block.output_shape(cur);
            out.push((unit.id, cur, next));
            cur = next;
        }
        out
    }

    /// A deterministic fingerprint of every parameter byte; used to check
    /// that read-only operations really left the model untouched.
    pub fn param_fingerprint(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit(&mut |name, _, view| {
            hasher.update(name.as_bytes());
            for v in view.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher.finalize().into()
    }
}

/// Builds a Kaiming-initialized model from a spec; deterministic given
/// `seed`.
pub fn build_model(spec: &NetworkSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Stream::Init);
    let stem = Stem::build(spec, &mut rng);
    let mut units = Vec::with_capacity(spec.unit_count());
    for lay in unit_layouts(spec) {
        let block = Block::build(&lay, spec, &mut rng);
        units.push(Unit { id: lay.id, stage_id: lay.stage_id, block });
    }
    let feat = units
        .last()
        .map(|u| u.block.out_channels())
        .unwrap_or_else(|| stem.out_channels());
    let classifier = Linear::randn(spec.num_classes, feat, &mut rng);
    Ok(ModelState::from_parts(spec.clone(), stem, units, classifier, Mode::Train))
}

/// Lists every unit in forward order with its eligibility flag.
///
/// `identity_shortcut` is computed from input/output shape equality, which
/// by construction coincides with the absence of a projection shortcut.
pub fn enumerate_prunable_units(model: &ModelState) -> Vec<PrunableUnit> {
    model
        .unit_io_shapes()
        .into_iter()
        .zip(model.units())
        .map(|((id, input, output), unit)| {
            debug_assert_eq!(id, unit.id);
            let identity = input == output;
            debug_assert_eq!(identity, !unit.block.has_projection());
            let mut params = 0usize;
            unit.block.visit("", &mut |_, kind, view| {
                if kind.trainable() {
                    params += view.len();
                }
            });
            PrunableUnit {
                id,
                stage_id: unit.stage_id,
                identity_shortcut: identity,
                feature_dim: output.0,
                param_count: params,
            }
        })
        .collect()
}

/// Returns a copy of the model with the given units deleted and the rest
/// re-linked; the original is untouched.
///
/// Every id must name an identity-shortcut unit: removing a projection or
/// downsampling block would break the consecutive feedforward mapping, so
/// that is rejected with a compatibility error.
pub fn remove_units(model: &ModelState, ids: &BTreeSet<UnitId>) -> Result<ModelState> {
    let eligible: std::collections::HashMap<UnitId, bool> = enumerate_prunable_units(model)
        .into_iter()
        .map(|u| (u.id, u.identity_shortcut))
        .collect();
    for id in ids {
        match eligible.get(id) {
            None => {
                return Err(Error::argument(format!(
                    "unit id {id} does not exist in the model"
                )))
            }
            Some(false) => {
                return Err(Error::compatibility(format!(
                    "unit {id} has a projection/downsampling shortcut and cannot be removed"
                )))
            }
            Some(true) => {}
        }
    }
    let mut pruned = model.clone();
    pruned.units.retain(|u| !ids.contains(&u.id));
    Ok(pruned)
}

/// Splits logits into per-row argmax labels.
pub fn predictions(logits: &Array2<f32>) -> Vec<u32> {
    logits
        .axis_iter(Axis(0))
        .map(|row| ops::argmax_row(row.as_slice().expect("contiguous")) as u32)
        .collect()
}
