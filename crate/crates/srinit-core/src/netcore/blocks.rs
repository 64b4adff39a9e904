//! Stem and residual-block implementations with explicit backward passes.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use super::layout::{stem_layout, UnitLayout};
use super::NetworkSpec;
use crate::nn::ops::{self, ReluRule};
use crate::nn::{BatchNorm2d, BnCache, Conv2d, TensorKind, VisitTensors, VisitTensorsMut};

/// Projection shortcut: 1×1 convolution (optionally strided) plus norm.
#[derive(Debug, Clone)]
pub struct Projection {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
}

/// Basic residual block: `relu(bn2(conv2(relu(bn1(conv1 x)))) + shortcut)`.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub proj: Option<Projection>,
}

/// Bottleneck residual block: 1×1 reduce, 3×3, 1×1 expand.
#[derive(Debug, Clone)]
pub struct BottleneckBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
    pub proj: Option<Projection>,
}

/// Pointwise residual block for the MLP family: `x + relu(Wx + b)`; no
/// post-add rectifier and no normalization.
#[derive(Debug, Clone)]
pub struct MlpBlock {
    pub conv: Conv2d,
    pub proj: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub enum Block {
    Basic(BasicBlock),
    Bottleneck(BottleneckBlock),
    Mlp(MlpBlock),
}

/// Caches from a training-mode block forward.
pub enum BlockTrainCache {
    Basic {
        x: Array4<f32>,
        c1: Array4<f32>,
        bn1: BnCache,
        r1: Array4<f32>,
        c2: Array4<f32>,
        bn2: BnCache,
        proj_out: Option<(Array4<f32>, BnCache)>,
        y: Array4<f32>,
    },
    Bottleneck {
        x: Array4<f32>,
        c1: Array4<f32>,
        bn1: BnCache,
        r1: Array4<f32>,
        c2: Array4<f32>,
        bn2: BnCache,
        r2: Array4<f32>,
        c3: Array4<f32>,
        bn3: BnCache,
        proj_out: Option<(Array4<f32>, BnCache)>,
        y: Array4<f32>,
    },
    Mlp {
        x: Array4<f32>,
        r: Array4<f32>,
    },
}

/// Activation traces from an inference-mode block forward; enough for
/// input-gradient backpropagation (parameter gradients are never computed
/// on this path).
pub enum BlockEvalTrace {
    Basic {
        in_hw: (usize, usize),
        mid_hw: (usize, usize),
        r1: Array4<f32>,
        y: Array4<f32>,
    },
    Bottleneck {
        in_hw: (usize, usize),
        mid_hw: (usize, usize),
        r1: Array4<f32>,
        r2: Array4<f32>,
        y: Array4<f32>,
    },
    Mlp {
        in_hw: (usize, usize),
        r: Array4<f32>,
    },
}

impl Block {
    pub fn build(lay: &UnitLayout, spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Block {
        let needs_proj = lay.stride != 1 || lay.in_channels != lay.out_channels;
        match (spec.family, spec.block_kind) {
            (super::Family::ResidualMlp, _) => Block::Mlp(MlpBlock {
                conv: Conv2d::randn(lay.out_channels, lay.in_channels, 1, 1, 0, true, rng),
                proj: needs_proj
                    .then(|| Conv2d::randn(lay.out_channels, lay.in_channels, 1, 1, 0, false, rng)),
            }),
            (_, super::BlockKind::Basic) => Block::Basic(BasicBlock {
                conv1: Conv2d::randn(lay.out_channels, lay.in_channels, 3, lay.stride, 1, false, rng),
                bn1: BatchNorm2d::new(lay.out_channels),
                conv2: Conv2d::randn(lay.out_channels, lay.out_channels, 3, 1, 1, false, rng),
                bn2: BatchNorm2d::new(lay.out_channels),
                proj: needs_proj.then(|| Projection {
                    conv: Conv2d::randn(lay.out_channels, lay.in_channels, 1, lay.stride, 0, false, rng),
                    bn: Some(BatchNorm2d::new(lay.out_channels)),
                }),
            }),
            (_, super::BlockKind::Bottleneck) => {
                let planes = lay.out_channels / 4;
                Block::Bottleneck(BottleneckBlock {
                    conv1: Conv2d::randn(planes, lay.in_channels, 1, 1, 0, false, rng),
                    bn1: BatchNorm2d::new(planes),
                    conv2: Conv2d::randn(planes, planes, 3, lay.stride, 1, false, rng),
                    bn2: BatchNorm2d::new(planes),
                    conv3: Conv2d::randn(lay.out_channels, planes, 1, 1, 0, false, rng),
                    bn3: BatchNorm2d::new(lay.out_channels),
                    proj: needs_proj.then(|| Projection {
                        conv: Conv2d::randn(lay.out_channels, lay.in_channels, 1, lay.stride, 0, false, rng),
                        bn: Some(BatchNorm2d::new(lay.out_channels)),
                    }),
                })
            }
        }
    }

    pub fn has_projection(&self) -> bool {
        match self {
            Block::Basic(b) => b.proj.is_some(),
            Block::Bottleneck(b) => b.proj.is_some(),
            Block::Mlp(b) => b.proj.is_some(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Basic(b) => b.conv2.out_channels(),
            Block::Bottleneck(b) => b.conv3.out_channels(),
            Block::Mlp(b) => b.conv.out_channels(),
        }
    }

    pub fn output_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        let (_, h, w) = input;
        match self {
            Block::Basic(b) => {
                let (oh, ow) = b.conv1.output_hw(h, w);
                (b.conv2.out_channels(), oh, ow)
            }
            Block::Bottleneck(b) => {
                let (oh, ow) = b.conv2.output_hw(h, w);
                (b.conv3.out_channels(), oh, ow)
            }
            Block::Mlp(b) => (b.conv.out_channels(), h, w),
        }
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        match self {
            Block::Basic(b) => {
                let branch = b.bn2.forward_eval(&b.conv2.forward(&ops::relu(
                    &b.bn1.forward_eval(&b.conv1.forward(x)),
                )));
                let shortcut = match &b.proj {
                    Some(p) => p.bn.as_ref().unwrap().forward_eval(&p.conv.forward(x)),
                    None => x.clone(),
                };
                ops::relu(&(branch + &shortcut))
            }
            Block::Bottleneck(b) => {
                let h1 = ops::relu(&b.bn1.forward_eval(&b.conv1.forward(x)));
                let h2 = ops::relu(&b.bn2.forward_eval(&b.conv2.forward(&h1)));
                let branch = b.bn3.forward_eval(&b.conv3.forward(&h2));
                let shortcut = match &b.proj {
                    Some(p) => p.bn.as_ref().unwrap().forward_eval(&p.conv.forward(x)),
                    None => x.clone(),
                };
                ops::relu(&(branch + &shortcut))
            }
            Block::Mlp(b) => {
                let branch = ops::relu(&b.conv.forward(x));
                match &b.proj {
                    Some(p) => p.forward(x) + &branch,
                    None => x + &branch,
                }
            }
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BlockTrainCache) {
        match self {
            Block::Basic(b) => {
                let c1 = b.conv1.forward(x);
                let (n1, bn1) = b.bn1.forward_train(&c1);
                let r1 = ops::relu(&n1);
                let c2 = b.conv2.forward(&r1);
                let (n2, bn2) = b.bn2.forward_train(&c2);
                let (shortcut, proj_out) = match &mut b.proj {
                    Some(p) => {
                        let pc = p.conv.forward(x);
                        let (pn, pcache) = p.bn.as_mut().unwrap().forward_train(&pc);
                        (pn, Some((pc, pcache)))
                    }
                    None => (x.clone(), None),
                };
                let y = ops::relu(&(n2 + &shortcut));
                let cache = BlockTrainCache::Basic {
                    x: x.clone(),
                    c1,
                    bn1,
                    r1,
                    c2,
                    bn2,
                    proj_out,
                    y: y.clone(),
                };
                (y, cache)
            }
            Block::Bottleneck(b) => {
                let c1 = b.conv1.forward(x);
                let (n1, bn1) = b.bn1.forward_train(&c1);
                let r1 = ops::relu(&n1);
                let c2 = b.conv2.forward(&r1);
                let (n2, bn2) = b.bn2.forward_train(&c2);
                let r2 = ops::relu(&n2);
                let c3 = b.conv3.forward(&r2);
                let (n3, bn3) = b.bn3.forward_train(&c3);
                let (shortcut, proj_out) = match &mut b.proj {
                    Some(p) => {
                        let pc = p.conv.forward(x);
                        let (pn, pcache) = p.bn.as_mut().unwrap().forward_train(&pc);
                        (pn, Some((pc, pcache)))
                    }
                    None => (x.clone(), None),
                };
                let y = ops::relu(&(n3 + &shortcut));
                let cache = BlockTrainCache::Bottleneck {
                    x: x.clone(),
                    c1,
                    bn1,
                    r1,
                    c2,
                    bn2,
                    r2,
                    c3,
                    bn3,
                    proj_out,
                    y: y.clone(),
                };
                (y, cache)
            }
            Block::Mlp(b) => {
                let r = ops::relu(&b.conv.forward(x));
                let y = match &b.proj {
                    Some(p) => p.forward(x) + &r,
                    None => x + &r,
                };
                (y, BlockTrainCache::Mlp { x: x.clone(), r })
            }
        }
    }

    pub fn backward_train(&mut self, cache: &BlockTrainCache, dy: &Array4<f32>) -> Array4<f32> {
        match (self, cache) {
            (
                Block::Basic(b),
                BlockTrainCache::Basic { x, c1, bn1, r1, c2, bn2, proj_out, y },
            ) => {
                let g = ops::relu_backward(y, dy, ReluRule::Standard);
                let gb2 = b.bn2.backward_train(c2, &g, bn2, true);
                let gr1 = b.conv2.backward(r1, &gb2, true);
                let gb1 = ops::relu_backward(r1, &gr1, ReluRule::Standard);
                let gc1 = b.bn1.backward_train(c1, &gb1, bn1, true);
                let mut gx = b.conv1.backward(x, &gc1, true);
                match (&mut b.proj, proj_out) {
                    (Some(p), Some((pc, pcache))) => {
                        let gp = p.bn.as_mut().unwrap().backward_train(pc, &g, pcache, true);
                        gx += &p.conv.backward(x, &gp, true);
                    }
                    _ => gx += &g,
                }
                gx
            }
            (
                Block::Bottleneck(b),
                BlockTrainCache::Bottleneck {
                    x,
                    c1,
                    bn1,
                    r1,
                    c2,
                    bn2,
                    r2,
                    c3,
                    bn3,
                    proj_out,
                    y,
                },
            ) => {
                let g = ops::relu_backward(y, dy, ReluRule::Standard);
                let gb3 = b.bn3.backward_train(c3, &g, bn3, true);
                let gr2 = b.conv3.backward(r2, &gb3, true);
                let gb2 = ops::relu_backward(r2, &gr2, ReluRule::Standard);
                let gc2 = b.bn2.backward_train(c2, &gb2, bn2, true);
                let gr1 = b.conv2.backward(r1, &gc2, true);
                let gb1 = ops::relu_backward(r1, &gr1, ReluRule::Standard);
                let gc1 = b.bn1.backward_train(c1, &gb1, bn1, true);
                let mut gx = b.conv1.backward(x, &gc1, true);
                match (&mut b.proj, proj_out) {
                    (Some(p), Some((pc, pcache))) => {
                        let gp = p.bn.as_mut().unwrap().backward_train(pc, &g, pcache, true);
                        gx += &p.conv.backward(x, &gp, true);
                    }
                    _ => gx += &g,
                }
                gx
            }
            (Block::Mlp(b), BlockTrainCache::Mlp { x, r }) => {
                let gc = ops::relu_backward(r, dy, ReluRule::Standard);
                let mut gx = b.conv.backward(x, &gc, true);
                match &mut b.proj {
                    Some(p) => gx += &p.backward(x, dy, true),
                    None => gx += dy,
                }
                gx
            }
            _ => unreachable!("cache kind matches block kind"),
        }
    }

    pub fn forward_eval_traced(&self, x: &Array4<f32>) -> (Array4<f32>, BlockEvalTrace) {
        let (_, _, h, w) = x.dim();
        match self {
            Block::Basic(b) => {
                let r1 = ops::relu(&b.bn1.forward_eval(&b.conv1.forward(x)));
                let branch = b.bn2.forward_eval(&b.conv2.forward(&r1));
                let shortcut = match &b.proj {
                    Some(p) => p.bn.as_ref().unwrap().forward_eval(&p.conv.forward(x)),
                    None => x.clone(),
                };
                let y = ops::relu(&(branch + &shortcut));
                let mid = (r1.dim().2, r1.dim().3);
                (y.clone(), BlockEvalTrace::Basic { in_hw: (h, w), mid_hw: mid, r1, y })
            }
            Block::Bottleneck(b) => {
                let r1 = ops::relu(&b.bn1.forward_eval(&b.conv1.forward(x)));
                let r2 = ops::relu(&b.bn2.forward_eval(&b.conv2.forward(&r1)));
                let branch = b.bn3.forward_eval(&b.conv3.forward(&r2));
                let shortcut = match &b.proj {
                    Some(p) => p.bn.as_ref().unwrap().forward_eval(&p.conv.forward(x)),
                    None => x.clone(),
                };
                let y = ops::relu(&(branch + &shortcut));
                let mid = (r2.dim().2, r2.dim().3);
                (
                    y.clone(),
                    BlockEvalTrace::Bottleneck { in_hw: (h, w), mid_hw: mid, r1, r2, y },
                )
            }
            Block::Mlp(b) => {
                let r = ops::relu(&b.conv.forward(x));
                let y = match &b.proj {
                    Some(p) => p.forward(x) + &r,
                    None => x + &r,
                };
                (y, BlockEvalTrace::Mlp { in_hw: (h, w), r })
            }
        }
    }

    /// Input gradient through the inference-mode block.
    pub fn backward_eval(
        &self,
        trace: &BlockEvalTrace,
        dy: &Array4<f32>,
        rule: ReluRule,
    ) -> Array4<f32> {
        match (self, trace) {
            (Block::Basic(b), BlockEvalTrace::Basic { in_hw, mid_hw, r1, y }) => {
                let g = ops::relu_backward(y, dy, rule);
                let gb2 = b.bn2.backward_eval(&g);
                let gr1 = b.conv2.backward_data(&gb2, *mid_hw);
                let gb1 = ops::relu_backward(r1, &gr1, rule);
                let gc1 = b.bn1.backward_eval(&gb1);
                let mut gx = b.conv1.backward_data(&gc1, *in_hw);
                match &b.proj {
                    Some(p) => {
                        let gp = p.bn.as_ref().unwrap().backward_eval(&g);
                        gx += &p.conv.backward_data(&gp, *in_hw);
                    }
                    None => gx += &g,
                }
                gx
            }
            (Block::Bottleneck(b), BlockEvalTrace::Bottleneck { in_hw, mid_hw, r1, r2, y }) => {
                let g = ops::relu_backward(y, dy, rule);
                let gb3 = b.bn3.backward_eval(&g);
                let gr2 = b.conv3.backward_data(&gb3, *mid_hw);
                let gb2 = ops::relu_backward(r2, &gr2, rule);
                let gc2 = b.bn2.backward_eval(&gb2);
                let r1_hw = (r1.dim().2, r1.dim().3);
                let gr1 = b.conv2.backward_data(&gc2, r1_hw);
                let gb1 = ops::relu_backward(r1, &gr1, rule);
                let gc1 = b.bn1.backward_eval(&gb1);
                let mut gx = b.conv1.backward_data(&gc1, *in_hw);
                match &b.proj {
                    Some(p) => {
                        let gp = p.bn.as_ref().unwrap().backward_eval(&g);
                        gx += &p.conv.backward_data(&gp, *in_hw);
                    }
                    None => gx += &g,
                }
                gx
            }
            (Block::Mlp(b), BlockEvalTrace::Mlp { in_hw, r }) => {
                let gc = ops::relu_backward(r, dy, rule);
                let mut gx = b.conv.backward_data(&gc, *in_hw);
                match &b.proj {
                    Some(p) => gx += &p.backward_data(dy, *in_hw),
                    None => gx += dy,
                }
                gx
            }
            _ => unreachable!("trace kind matches block kind"),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewD<'_, f32>)) {
        match self {
            Block::Basic(b) => {
                b.conv1.visit(&sub(prefix, "conv1"), f);
                b.bn1.visit(&sub(prefix, "bn1"), f);
                b.conv2.visit(&sub(prefix, "conv2"), f);
                b.bn2.visit(&sub(prefix, "bn2"), f);
                if let Some(p) = &b.proj {
                    p.conv.visit(&sub(prefix, "proj"), f);
                    if let Some(bn) = &p.bn {
                        bn.visit(&sub(prefix, "proj_bn"), f);
                    }
                }
            }
            Block::Bottleneck(b) => {
                b.conv1.visit(&sub(prefix, "conv1"), f);
                b.bn1.visit(&sub(prefix, "bn1"), f);
                b.conv2.visit(&sub(prefix, "conv2"), f);
                b.bn2.visit(&sub(prefix, "bn2"), f);
                b.conv3.visit(&sub(prefix, "conv3"), f);
                b.bn3.visit(&sub(prefix, "bn3"), f);
                if let Some(p) = &b.proj {
                    p.conv.visit(&sub(prefix, "proj"), f);
                    if let Some(bn) = &p.bn {
                        bn.visit(&sub(prefix, "proj_bn"), f);
                    }
                }
            }
            Block::Mlp(b) => {
                b.conv.visit(&sub(prefix, "fc"), f);
                if let Some(p) = &b.proj {
                    p.visit(&sub(prefix, "proj"), f);
                }
            }
        }
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewMutD<'_, f32>),
    ) {
        match self {
            Block::Basic(b) => {
                b.conv1.visit_mut(&sub(prefix, "conv1"), f);
                b.bn1.visit_mut(&sub(prefix, "bn1"), f);
                b.conv2.visit_mut(&sub(prefix, "conv2"), f);
                b.bn2.visit_mut(&sub(prefix, "bn2"), f);
                if let Some(p) = &mut b.proj {
                    p.conv.visit_mut(&sub(prefix, "proj"), f);
                    if let Some(bn) = &mut p.bn {
                        bn.visit_mut(&sub(prefix, "proj_bn"), f);
                    }
                }
            }
            Block::Bottleneck(b) => {
                b.conv1.visit_mut(&sub(prefix, "conv1"), f);
                b.bn1.visit_mut(&sub(prefix, "bn1"), f);
                b.conv2.visit_mut(&sub(prefix, "conv2"), f);
                b.bn2.visit_mut(&sub(prefix, "bn2"), f);
                b.conv3.visit_mut(&sub(prefix, "conv3"), f);
                b.bn3.visit_mut(&sub(prefix, "bn3"), f);
                if let Some(p) = &mut b.proj {
                    p.conv.visit_mut(&sub(prefix, "proj"), f);
                    if let Some(bn) = &mut p.bn {
                        bn.visit_mut(&sub(prefix, "proj_bn"), f);
                    }
                }
            }
            Block::Mlp(b) => {
                b.conv.visit_mut(&sub(prefix, "fc"), f);
                if let Some(p) = &mut b.proj {
                    p.visit_mut(&sub(prefix, "proj"), f);
                }
            }
        }
    }

    pub fn visit_param_grad(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewMutD<'_, f32>, ndarray::ArrayViewD<'_, f32>),
    ) {
        match self {
            Block::Basic(b) => {
                b.conv1.visit_param_grad(&sub(prefix, "conv1"), f);
                b.bn1.visit_param_grad(&sub(prefix, "bn1"), f);
                b.conv2.visit_param_grad(&sub(prefix, "conv2"), f);
                b.bn2.visit_param_grad(&sub(prefix, "bn2"), f);
                if let Some(p) = &mut b.proj {
                    p.conv.visit_param_grad(&sub(prefix, "proj"), f);
                    if let Some(bn) = &mut p.bn {
                        bn.visit_param_grad(&sub(prefix, "proj_bn"), f);
                    }
                }
            }
            Block::Bottleneck(b) => {
                b.conv1.visit_param_grad(&sub(prefix, "conv1"), f);
                b.bn1.visit_param_grad(&sub(prefix, "bn1"), f);
                b.conv2.visit_param_grad(&sub(prefix, "conv2"), f);
                b.bn2.visit_param_grad(&sub(prefix, "bn2"), f);
                b.conv3.visit_param_grad(&sub(prefix, "conv3"), f);
                b.bn3.visit_param_grad(&sub(prefix, "bn3"), f);
                if let Some(p) = &mut b.proj {
                    p.conv.visit_param_grad(&sub(prefix, "proj"), f);
                    if let Some(bn) = &mut p.bn {
                        bn.visit_param_grad(&sub(prefix, "proj_bn"), f);
                    }
                }
            }
            Block::Mlp(b) => {
                b.conv.visit_param_grad(&sub(prefix, "fc"), f);
                if let Some(p) = &mut b.proj {
                    p.visit_param_grad(&sub(prefix, "proj"), f);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            Block::Basic(b) => {
                VisitTensorsMut::zero_grad(&mut b.conv1);
                VisitTensorsMut::zero_grad(&mut b.bn1);
                VisitTensorsMut::zero_grad(&mut b.conv2);
                VisitTensorsMut::zero_grad(&mut b.bn2);
                if let Some(p) = &mut b.proj {
                    VisitTensorsMut::zero_grad(&mut p.conv);
                    if let Some(bn) = &mut p.bn {
                        VisitTensorsMut::zero_grad(bn);
                    }
                }
            }
            Block::Bottleneck(b) => {
                VisitTensorsMut::zero_grad(&mut b.conv1);
                VisitTensorsMut::zero_grad(&mut b.bn1);
                VisitTensorsMut::zero_grad(&mut b.conv2);
                VisitTensorsMut::zero_grad(&mut b.bn2);
                VisitTensorsMut::zero_grad(&mut b.conv3);
                VisitTensorsMut::zero_grad(&mut b.bn3);
                if let Some(p) = &mut b.proj {
                    VisitTensorsMut::zero_grad(&mut p.conv);
                    if let Some(bn) = &mut p.bn {
                        VisitTensorsMut::zero_grad(bn);
                    }
                }
            }
            Block::Mlp(b) => {
                VisitTensorsMut::zero_grad(&mut b.conv);
                if let Some(p) = &mut b.proj {
                    VisitTensorsMut::zero_grad(p);
                }
            }
        }
    }
}

fn sub(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Network stem: convolution, optional norm, rectifier, optional max-pool.
#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub max_pool: Option<(usize, usize, usize)>,
}

pub struct StemTrainCache {
    x: Array4<f32>,
    c: Array4<f32>,
    bn: Option<BnCache>,
    r: Array4<f32>,
    pool: Option<(Vec<u32>, (usize, usize, usize, usize))>,
}

pub struct StemEvalTrace {
    in_hw: (usize, usize),
    r: Array4<f32>,
    pool: Option<(Vec<u32>, (usize, usize, usize, usize))>,
}

impl Stem {
    pub fn build(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Stem {
        let lay = stem_layout(spec);
        let (c, _, _) = spec.input_shape;
        Stem {
            conv: Conv2d::randn(lay.out_channels, c, lay.kernel, lay.stride, lay.padding, lay.bias, rng),
            bn: lay.batch_norm.then(|| BatchNorm2d::new(lay.out_channels)),
            max_pool: lay.max_pool,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn output_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        let (_, h, w) = input;
        let (mut oh, mut ow) = self.conv.output_hw(h, w);
        if let Some((k, s, p)) = self.max_pool {
            oh = ops::conv_out_dim(oh, k, s, p);
            ow = ops::conv_out_dim(ow, k, s, p);
        }
        (self.conv.out_channels(), oh, ow)
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut h = self.conv.forward(x);
        if let Some(bn) = &self.bn {
            h = bn.forward_eval(&h);
        }
        h = ops::relu(&h);
        if let Some((k, s, p)) = self.max_pool {
            h = ops::max_pool(&h, k, s, p).0;
        }
        h
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, StemTrainCache) {
        let c = self.conv.forward(x);
        let (normed, bn_cache) = match &mut self.bn {
            Some(bn) => {
                let (y, cache) = bn.forward_train(&c);
                (y, Some(cache))
            }
            None => (c.clone(), None),
        };
        let r = ops::relu(&normed);
        let (out, pool) = match self.max_pool {
            Some((k, s, p)) => {
                let dim = r.dim();
                let (y, idx) = ops::max_pool(&r, k, s, p);
                (y, Some((idx, dim)))
            }
            None => (r.clone(), None),
        };
        (out, StemTrainCache { x: x.clone(), c, bn: bn_cache, r, pool })
    }

    pub fn backward_train(&mut self, cache: &StemTrainCache, dy: &Array4<f32>) {
        let g = match (&cache.pool, self.max_pool) {
            (Some((idx, dim)), Some(_)) => ops::max_pool_backward(dy, idx, *dim),
            _ => dy.clone(),
        };
        let gb = ops::relu_backward(&cache.r, &g, ReluRule::Standard);
        let gc = match (&mut self.bn, &cache.bn) {
            (Some(bn), Some(stats)) => bn.backward_train(&cache.c, &gb, stats, true),
            _ => gb,
        };
        self.conv.backward(&cache.x, &gc, true);
    }

    pub fn forward_eval_traced(&self, x: &Array4<f32>) -> (Array4<f32>, StemEvalTrace) {
        let (_, _, h, w) = x.dim();
        let mut a = self.conv.forward(x);
        if let Some(bn) = &self.bn {
            a = bn.forward_eval(&a);
        }
        let r = ops::relu(&a);
        let (out, pool) = match self.max_pool {
            Some((k, s, p)) => {
                let dim = r.dim();
                let (y, idx) = ops::max_pool(&r, k, s, p);
                (y, Some((idx, dim)))
            }
            None => (r.clone(), None),
        };
        (out, StemEvalTrace { in_hw: (h, w), r, pool })
    }

    /// Input gradient through the inference-mode stem.
    pub fn backward_eval(&self, trace: &StemEvalTrace, dy: &Array4<f32>, rule: ReluRule) -> Array4<f32> {
        let g = match (&trace.pool, self.max_pool) {
            (Some((idx, dim)), Some(_)) => ops::max_pool_backward(dy, idx, *dim),
            _ => dy.clone(),
        };
        let gb = ops::relu_backward(&trace.r, &g, rule);
        let gc = match &self.bn {
            Some(bn) => bn.backward_eval(&gb),
            None => gb,
        };
        self.conv.backward_data(&gc, trace.in_hw)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewD<'_, f32>)) {
        self.conv.visit(&sub(prefix, "conv"), f);
        if let Some(bn) = &self.bn {
            bn.visit(&sub(prefix, "bn"), f);
        }
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewMutD<'_, f32>),
    ) {
        self.conv.visit_mut(&sub(prefix, "conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&sub(prefix, "bn"), f);
        }
    }

    pub fn visit_param_grad(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewMutD<'_, f32>, ndarray::ArrayViewD<'_, f32>),
    ) {
        self.conv.visit_param_grad(&sub(prefix, "conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_param_grad(&sub(prefix, "bn"), f);
        }
    }

    pub fn zero_grad(&mut self) {
        VisitTensorsMut::zero_grad(&mut self.conv);
        if let Some(bn) = &mut self.bn {
            VisitTensorsMut::zero_grad(bn);
        }
    }
}
