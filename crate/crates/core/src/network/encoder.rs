//! Three-branch residual encoder with per-stage SUM + ReLU fusion of the
//! hint branches into the image branch.

use crate::autograd::{Graph, NodeId};
use crate::tensor::Element;

use super::config::NetworkConfig;
use super::params::{BnSpec, ConvSpec, LayoutBuilder, ParamGroup};

#[derive(Clone, Debug)]
pub struct ResBlockSpec {
    pub conv1: ConvSpec,
    pub bn1: BnSpec,
    pub conv2: ConvSpec,
    pub bn2: BnSpec,
    pub shortcut: Option<(ConvSpec, BnSpec)>,
}

#[derive(Clone, Debug)]
pub struct BranchSpec {
    pub stem_conv: ConvSpec,
    pub stem_bn: BnSpec,
    pub stem_pool: bool,
    pub stages: Vec<Vec<ResBlockSpec>>,
}

#[derive(Clone, Debug)]
pub struct EncoderSpec {
    pub image: BranchSpec,
    pub fg: BranchSpec,
    pub bg: BranchSpec,
    /// 1x1 projections of hint features to image width: index 0 after the
    /// stem, index `t + 1` after stage `t`.
    pub fg_proj: Vec<ConvSpec>,
    pub bg_proj: Vec<ConvSpec>,
}

/// Stage outputs of all branches. Every vector has one node per stage.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub image: Vec<NodeId>,
    pub fg: Vec<NodeId>,
    pub bg: Vec<NodeId>,
    /// Hint features projected to the image branch's channel count.
    pub fg_proj: Vec<NodeId>,
    pub bg_proj: Vec<NodeId>,
    /// `ReLU(image + fg_proj + bg_proj)`, the input to the next stage.
    pub fused: Vec<NodeId>,
}

fn build_branch(b: &mut LayoutBuilder, prefix: &str, in_ch: usize, widths: &[usize], cfg: &NetworkConfig) -> BranchSpec {
    let g = ParamGroup::Encoder;
    let stem_stride = if cfg.stem_downsample >= 2 { 2 } else { 1 };
    let stem_conv = b.conv(&format!("{prefix}.stem.conv"), g, in_ch, widths[0], 3, stem_stride, 1, false);
    let stem_bn = b.bn(&format!("{prefix}.stem.bn"), g, widths[0]);
    let mut prev = widths[0];
    let mut stages = Vec::with_capacity(cfg.stages);
    for (t, &w) in widths.iter().enumerate() {
        let mut blocks = Vec::with_capacity(cfg.blocks_per_stage[t]);
        for k in 0..cfg.blocks_per_stage[t] {
            let stride = if t > 0 && k == 0 { 2 } else { 1 };
            let p = format!("{prefix}.stage{}.block{k}", t + 1);
            let conv1 = b.conv(&format!("{p}.conv1"), g, prev, w, 3, stride, 1, false);
            let bn1 = b.bn(&format!("{p}.bn1"), g, w);
            let conv2 = b.conv(&format!("{p}.conv2"), g, w, w, 3, 1, 1, false);
            let bn2 = b.bn(&format!("{p}.bn2"), g, w);
            let shortcut = (stride != 1 || prev != w).then(|| {
                (
                    b.conv(&format!("{p}.shortcut.conv"), g, prev, w, 1, stride, 0, false),
                    b.bn(&format!("{p}.shortcut.bn"), g, w),
                )
            });
            blocks.push(ResBlockSpec { conv1, bn1, conv2, bn2, shortcut });
            prev = w;
        }
        stages.push(blocks);
    }
    BranchSpec { stem_conv, stem_bn, stem_pool: cfg.stem_downsample == 4, stages }
}

impl EncoderSpec {
    pub(crate) fn build(b: &mut LayoutBuilder, cfg: &NetworkConfig) -> EncoderSpec {
        let img_w = cfg.channels_per_stage.clone();
        let hint_w: Vec<usize> = (0..cfg.stages).map(|t| cfg.hint_channels(t)).collect();
        let image = build_branch(b, "encoder.image", 3, &img_w, cfg);
        let fg = build_branch(b, "encoder.fg", 1, &hint_w, cfg);
        let bg = build_branch(b, "encoder.bg", 1, &hint_w, cfg);
        let g = ParamGroup::Encoder;
        let mut fg_proj = Vec::with_capacity(cfg.stages + 1);
        let mut bg_proj = Vec::with_capacity(cfg.stages + 1);
        for i in 0..=cfg.stages {
            // Index 0 follows the stem, which has stage-0 width.
            let t = i.saturating_sub(1);
            fg_proj.push(b.conv(&format!("encoder.fg_proj{i}"), g, hint_w[t], img_w[t], 1, 1, 0, true));
            bg_proj.push(b.conv(&format!("encoder.bg_proj{i}"), g, hint_w[t], img_w[t], 1, 1, 0, true));
        }
        EncoderSpec { image, fg, bg, fg_proj, bg_proj }
    }
}

pub fn apply_conv<T: Element>(g: &mut Graph<'_, T>, x: NodeId, spec: &ConvSpec) -> NodeId {
    let w = g.param(spec.weight);
    let b = spec.bias.map(|b| g.param(b));
    g.conv(x, w, b, spec.stride, spec.pad)
}

pub fn apply_bn<T: Element>(g: &mut Graph<'_, T>, x: NodeId, spec: &BnSpec) -> NodeId {
    g.batch_norm(x, spec.gamma, spec.beta, spec.mean, spec.var)
}

fn res_block<T: Element>(g: &mut Graph<'_, T>, x: NodeId, spec: &ResBlockSpec) -> NodeId {
    let y = apply_conv(g, x, &spec.conv1);
    let y = apply_bn(g, y, &spec.bn1);
    let y = g.relu(y);
    let y = apply_conv(g, y, &spec.conv2);
    let y = apply_bn(g, y, &spec.bn2);
    let skip = match &spec.shortcut {
        Some((conv, bn)) => {
            let s = apply_conv(g, x, conv);
            apply_bn(g, s, bn)
        }
        None => x,
    };
    let y = g.add(y, skip);
    g.relu(y)
}

fn stem<T: Element>(g: &mut Graph<'_, T>, x: NodeId, spec: &BranchSpec) -> NodeId {
    let y = apply_conv(g, x, &spec.stem_conv);
    let y = apply_bn(g, y, &spec.stem_bn);
    let y = g.relu(y);
    if spec.stem_pool {
        g.max_pool(y, 3, 2, 1)
    } else {
        y
    }
}

fn stage<T: Element>(g: &mut Graph<'_, T>, mut x: NodeId, blocks: &[ResBlockSpec]) -> NodeId {
    for b in blocks {
        x = res_block(g, x, b);
    }
    x
}

impl EncoderSpec {
    /// Full hyper-fusion encoder.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, image: NodeId, fg: NodeId, bg: NodeId) -> EncoderOutput {
        let mut xi = stem(g, image, &self.image);
        let mut xf = stem(g, fg, &self.fg);
        let mut xb = stem(g, bg, &self.bg);
        let pf = apply_conv(g, xf, &self.fg_proj[0]);
        let pb = apply_conv(g, xb, &self.bg_proj[0]);
        let mut input = fuse(g, xi, pf, pb);

        let n = self.image.stages.len();
        let mut out = EncoderOutput {
            image: Vec::with_capacity(n),
            fg: Vec::with_capacity(n),
            bg: Vec::with_capacity(n),
            fg_proj: Vec::with_capacity(n),
            bg_proj: Vec::with_capacity(n),
            fused: Vec::with_capacity(n),
        };
        for t in 0..n {
            xi = stage(g, input, &self.image.stages[t]);
            xf = stage(g, xf, &self.fg.stages[t]);
            xb = stage(g, xb, &self.bg.stages[t]);
            let pf = apply_conv(g, xf, &self.fg_proj[t + 1]);
            let pb = apply_conv(g, xb, &self.bg_proj[t + 1]);
            input = fuse(g, xi, pf, pb);
            out.image.push(xi);
            out.fg.push(xf);
            out.bg.push(xb);
            out.fg_proj.push(pf);
            out.bg_proj.push(pb);
            out.fused.push(input);
        }
        out
    }

    /// The image branch alone, with `ReLU` in place of each fusion. Returns
    /// the per-stage fused-equivalent outputs.
    pub fn forward_image_only<T: Element>(&self, g: &mut Graph<'_, T>, image: NodeId) -> Vec<NodeId> {
        let xi = stem(g, image, &self.image);
        let mut input = g.relu(xi);
        let mut fused = Vec::with_capacity(self.image.stages.len());
        for blocks in &self.image.stages {
            let xi = stage(g, input, blocks);
            input = g.relu(xi);
            fused.push(input);
        }
        fused
    }
}

fn fuse<T: Element>(g: &mut Graph<'_, T>, image: NodeId, fg: NodeId, bg: NodeId) -> NodeId {
    let s = g.add(image, fg);
    let s = g.add(s, bg);
    g.relu(s)
}
