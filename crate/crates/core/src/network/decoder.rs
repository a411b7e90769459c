//! Decoder built from hyper-integration modules: a guidance and constraint
//! unit (channel then spatial attention from the hint features), a fusion
//! unit (upsample and sum), and a chained residual pooling unit.

use crate::autograd::{Graph, NodeId};
use crate::error::{HfnError, Result};
use crate::tensor::Element;

use super::config::{NetworkConfig, CRPU_POOL, GCU_SPATIAL_KERNEL};
use super::encoder::{apply_bn, apply_conv, EncoderOutput};
use super::params::{BnSpec, ConvSpec, LayoutBuilder, ParamGroup};

const CRPU_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct GcuSpec {
    /// Shared fully connected pair, as 1x1 convolutions on pooled vectors.
    pub fc1: ConvSpec,
    pub fc2: ConvSpec,
    pub spatial_conv: ConvSpec,
    pub spatial_bn: BnSpec,
}

#[derive(Clone, Debug)]
pub struct CrpuSpec {
    pub convs: Vec<ConvSpec>,
}

#[derive(Clone, Debug)]
pub struct HimSpec {
    pub gcu: Option<GcuSpec>,
    /// Projection of the deeper decoder output to this stage's width
    /// (absent for the deepest stage).
    pub fu_proj: Option<ConvSpec>,
    pub crpu: Option<CrpuSpec>,
}

#[derive(Clone, Debug)]
pub struct DecoderSpec {
    /// One module per encoder stage, index = stage.
    pub hims: Vec<HimSpec>,
    pub head: ConvSpec,
}

impl GcuSpec {
    pub(crate) fn build(b: &mut LayoutBuilder, prefix: &str, channels: usize, reduction: usize) -> GcuSpec {
        let g = ParamGroup::Decoder;
        let cat = 2 * channels;
        let hidden = (cat / reduction).max(1);
        let k = GCU_SPATIAL_KERNEL;
        GcuSpec {
            fc1: b.conv(&format!("{prefix}.fc1"), g, cat, hidden, 1, 1, 0, true),
            fc2: b.conv(&format!("{prefix}.fc2"), g, hidden, channels, 1, 1, 0, true),
            spatial_conv: b.conv(&format!("{prefix}.spatial.conv"), g, 2, 1, k, 1, k / 2, true),
            spatial_bn: b.bn(&format!("{prefix}.spatial.bn"), g, 1),
        }
    }
}

impl CrpuSpec {
    pub(crate) fn build(b: &mut LayoutBuilder, prefix: &str, channels: usize, chain: usize) -> CrpuSpec {
        let convs: Vec<ConvSpec> = (0..chain)
            .map(|i| b.conv(&format!("{prefix}.conv{i}"), ParamGroup::Decoder, channels, channels, 3, 1, 1, false))
            .collect();
        // Small residual branches so the chained sums start near ReLU(x).
        for c in &convs {
            b.set_gain(c.weight, CRPU_INIT_GAIN);
        }
        CrpuSpec { convs }
    }
}

impl DecoderSpec {
    pub(crate) fn build(b: &mut LayoutBuilder, cfg: &NetworkConfig) -> DecoderSpec {
        let g = ParamGroup::Decoder;
        let c = &cfg.channels_per_stage;
        let hims = (0..cfg.stages)
            .map(|t| {
                let p = format!("decoder.him{}", t + 1);
                HimSpec {
                    gcu: cfg.use_him.then(|| GcuSpec::build(b, &format!("{p}.gcu"), c[t], cfg.gcu_reduction)),
                    fu_proj: (t + 1 < cfg.stages).then(|| b.conv(&format!("{p}.fu_proj"), g, c[t + 1], c[t], 1, 1, 0, true)),
                    crpu: cfg.use_him.then(|| CrpuSpec::build(b, &format!("{p}.crpu"), c[t], cfg.crpu_chain_length)),
                }
            })
            .collect();
        let head = b.conv("decoder.head", g, c[0], 2, 1, 1, 0, true);
        // Start from uniform predictions.
        b.set_gain(head.weight, 0.0);
        DecoderSpec { hims, head }
    }
}

/// Output of a guidance and constraint unit, with both gates exposed.
#[derive(Clone, Copy, Debug)]
pub struct GcuOutput {
    pub output: NodeId,
    /// `[n, c, 1, 1]`
    pub channel_gate: NodeId,
    /// `[n, 1, h, w]`
    pub spatial_gate: NodeId,
}

/// Gate `image` features with attention computed from the concatenated hint features.
pub fn gcu<T: Element>(
    g: &mut Graph<'_, T>,
    fg: NodeId,
    bg: NodeId,
    image: NodeId,
    spec: &GcuSpec,
) -> Result<GcuOutput> {
    let (sf, sb, si) = (g.shape(fg), g.shape(bg), g.shape(image));
    if sf != si || sb != si {
        return Err(HfnError::ShapeMismatch(format!(
            "guidance unit inputs differ: fg {sf:?}, bg {sb:?}, image {si:?}"
        )));
    }
    let fc1 = g.param(spec.fc1.weight);
    let expected_cat = g.shape(fc1)[1];
    if 2 * si[1] != expected_cat {
        return Err(HfnError::ShapeMismatch(format!(
            "guidance unit expects {} channels per input, got {}",
            expected_cat / 2,
            si[1]
        )));
    }
    let cat = g.concat(fg, bg);

    let mx = g.global_max_pool(cat);
    let av = g.global_avg_pool(cat);
    let hm = apply_conv(g, mx, &spec.fc1);
    let hm = g.relu(hm);
    let hm = apply_conv(g, hm, &spec.fc2);
    let ha = apply_conv(g, av, &spec.fc1);
    let ha = g.relu(ha);
    let ha = apply_conv(g, ha, &spec.fc2);
    let s = g.add(hm, ha);
    let channel_gate = g.sigmoid(s);

    let cm = g.channel_max(cat);
    let ca = g.channel_mean(cat);
    let pooled = g.concat(cm, ca);
    let sp = apply_conv(g, pooled, &spec.spatial_conv);
    let sp = apply_bn(g, sp, &spec.spatial_bn);
    let sp = g.relu(sp);
    let spatial_gate = g.sigmoid(sp);

    let y = g.mul_channel(image, channel_gate);
    let output = g.mul_spatial(y, spatial_gate);
    Ok(GcuOutput { output, channel_gate, spatial_gate })
}

/// `current + bilinear_upsample(prev)`.
pub fn fusion_unit<T: Element>(g: &mut Graph<'_, T>, prev: NodeId, current: NodeId) -> Result<NodeId> {
    let [pn, pc, ph, pw] = g.shape(prev);
    let [cn, cc, ch, cw] = g.shape(current);
    if pn != cn || pc != cc {
        return Err(HfnError::ShapeMismatch(format!(
            "fusion unit: previous stage has {pc} channels, current has {cc}"
        )));
    }
    if ph > ch || pw > cw {
        return Err(HfnError::ShapeMismatch(format!(
            "fusion unit: previous stage {ph}x{pw} is larger than current {ch}x{cw}"
        )));
    }
    let up = g.resize(prev, ch, cw);
    Ok(g.add(current, up))
}

/// `y = ReLU(x); p = y; repeat: p = conv(maxpool(p)); y += p`.
pub fn crpu<T: Element>(g: &mut Graph<'_, T>, x: NodeId, spec: &CrpuSpec) -> NodeId {
    let mut y = g.relu(x);
    let mut p = y;
    for conv in &spec.convs {
        let pooled = g.max_pool(p, CRPU_POOL, 1, CRPU_POOL / 2);
        p = apply_conv(g, pooled, conv);
        y = g.add(y, p);
    }
    y
}

impl DecoderSpec {
    /// Deepest to shallowest; returns logits at the resolution of stage 0
    /// after the classification head.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, enc: &EncoderOutput) -> Result<NodeId> {
        let mut prev: Option<NodeId> = None;
        for t in (0..self.hims.len()).rev() {
            let him = &self.hims[t];
            let gated = match &him.gcu {
                Some(spec) => gcu(g, enc.fg_proj[t], enc.bg_proj[t], enc.fused[t], spec)?.output,
                None => enc.fused[t],
            };
            let merged = match (prev, &him.fu_proj) {
                (Some(p), Some(proj)) => {
                    let p = apply_conv(g, p, proj);
                    fusion_unit(g, p, gated)?
                }
                _ => gated,
            };
            prev = Some(match &him.crpu {
                Some(spec) => crpu(g, merged, spec),
                None => merged,
            });
        }
        let last = prev.expect("at least one stage");
        Ok(apply_conv(g, last, &self.head))
    }
}
