//! Harmonic dense blocks and the encoder built from them.
//!
//! Layer `l` of a block reads the outputs of layers `l − 2^j` for every power of
//! two dividing `l`; layers whose index has a high 2-adic valuation are wider.
//! The encoder exposes three named taps at strides 8, 16 and 32.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{params_for, run, Eager, Graph, GraphBuilder, NodeId};
use crate::io::WeightStore;
use crate::tensor::{Activation, ConvSpec, Element, Tensor4};

/// 2-adic valuation: the largest `j` with `2^j | l` (`l ≥ 1`).
pub fn v2(l: usize) -> u32 {
    l.trailing_zeros()
}

/// `(t odd ? t + 1 : t)` with `t = floor(x)`.
fn round_up_to_even(x: f64) -> usize {
    let t = x.floor() as usize;
    t + (t & 1)
}

/// Input links and output width of layer `l` of a harmonic block.
///
/// Links are returned ascending. Width is `k · m^v2(l)` rounded up to even.
pub fn hard_links(l: usize, k: usize, m: f64) -> Result<(Vec<usize>, usize)> {
    if l < 1 {
        return Err(Error::invalid("hard_links", "layer index must be at least 1"));
    }
    let mut links = Vec::new();
    let mut width = k as f64;
    for j in 0..=v2(l) {
        links.push(l - (1usize << j));
        if j > 0 {
            width *= m;
        }
    }
    links.reverse();
    Ok((links, round_up_to_even(width)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    /// `l − 2^j` links.
    #[default]
    Harmonic,
    /// Every earlier layer, block input included; widths unchanged.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarDBlockCfg {
    pub n_layers: usize,
    pub growth_rate: usize,
    pub multiplier: f64,
    pub base_ch: usize,
    #[serde(default)]
    pub connectivity: Connectivity,
}

/// One resolved block layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    /// Source layers in concatenation order (0 is the block input).
    pub links: Vec<usize>,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl HarDBlockCfg {
    pub fn new(n_layers: usize, growth_rate: usize, multiplier: f64, base_ch: usize) -> Self {
        HarDBlockCfg {
            n_layers,
            growth_rate,
            multiplier,
            base_ch,
            connectivity: Connectivity::Harmonic,
        }
    }

    pub fn dense(self) -> Self {
        HarDBlockCfg {
            connectivity: Connectivity::Dense,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.growth_rate == 0 || self.base_ch == 0 {
            return Err(Error::Config(format!(
                "block needs positive n_layers, growth_rate and base_ch, got {self:?}"
            )));
        }
        if !(self.multiplier.is_finite() && self.multiplier > 1.0) {
            return Err(Error::Config(format!(
                "growth multiplier must be > 1, got {}",
                self.multiplier
            )));
        }
        Ok(())
    }

    /// Layers `1..=n_layers`. Concatenation order is descending layer index,
    /// which is the order the published checkpoints were trained with.
    pub fn layers(&self) -> Result<Vec<LayerPlan>> {
        self.validate()?;
        let mut widths = vec![self.base_ch];
        let mut plans = Vec::with_capacity(self.n_layers);
        for l in 1..=self.n_layers {
            let (mut links, out_ch) = hard_links(l, self.growth_rate, self.multiplier)?;
            if self.connectivity == Connectivity::Dense {
                links = (0..l).collect();
            }
            links.reverse();
            let in_ch = links.iter().map(|&i| widths[i]).sum();
            widths.push(out_ch);
            plans.push(LayerPlan { links, in_ch, out_ch });
        }
        Ok(plans)
    }

    /// Layers concatenated into the block output: every odd layer plus the last.
    pub fn output_layers(&self) -> Vec<usize> {
        (1..=self.n_layers)
            .filter(|&l| l % 2 == 1 || l == self.n_layers)
            .collect()
    }

    pub fn out_ch(&self) -> Result<usize> {
        let plans = self.layers()?;
        Ok(self.output_layers().iter().map(|&l| plans[l - 1].out_ch).sum())
    }

    /// Total number of input links over all layers.
    pub fn connection_count(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(|p| p.links.len()).sum())
    }
}

/// Per-conv post-processing shared by the encoder and decoder builders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStyle {
    /// Batch norm after each conv (conv then has no bias); otherwise conv with bias.
    pub norm: bool,
    pub bn_eps: f64,
    pub activation: Option<Activation>,
}

/// Conv, then optional batch norm, then optional activation.
pub fn conv_unit(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    spec: ConvSpec,
    style: ConvStyle,
) -> Result<NodeId> {
    let mut y = b.conv(&format!("{name}.conv"), x, spec.bias(!style.norm))?;
    if style.norm {
        y = b.batchnorm(&format!("{name}.bn"), y, style.bn_eps)?;
    }
    if let Some(a) = style.activation {
        y = b.activation(&format!("{name}.act"), y, a)?;
    }
    Ok(y)
}

/// Adds a block reading `x` (which must have `cfg.base_ch` channels).
/// Returns the block output node and its channel count.
pub fn build_hardblock(
    b: &mut GraphBuilder,
    prefix: &str,
    x: NodeId,
    cfg: &HarDBlockCfg,
    style: ConvStyle,
) -> Result<(NodeId, usize)> {
    if b.channels(x) != cfg.base_ch {
        return Err(Error::Build {
            stage: prefix.to_string(),
            detail: format!("block input has {} channels, cfg says {}", b.channels(x), cfg.base_ch),
        });
    }
    let plans = cfg.layers()?;
    let mut outs = vec![x];
    for (i, plan) in plans.iter().enumerate() {
        let l = i + 1;
        let srcs: Vec<NodeId> = plan.links.iter().map(|&j| outs[j]).collect();
        let cat = b.concat(&format!("{prefix}.layers.{l}.cat"), &srcs)?;
        let spec = ConvSpec::new(plan.in_ch, plan.out_ch, 3).padding(1);
        outs.push(conv_unit(b, &format!("{prefix}.layers.{l}"), cat, spec, style)?);
    }
    let sel: Vec<NodeId> = cfg.output_layers().iter().map(|&l| outs[l]).collect();
    let y = b.concat(&format!("{prefix}.out"), &sel)?;
    Ok((y, b.channels(y)))
}

/// A block on its own: input node with `base_ch` channels, output `"out"`.
pub fn hardblock_graph(cfg: &HarDBlockCfg, style: ConvStyle) -> Result<(Graph, usize)> {
    let (mut b, x) = GraphBuilder::new(cfg.base_ch);
    let (y, c) = build_hardblock(&mut b, "block", x, cfg, style)?;
    b.mark_output("out", y);
    Ok((b.finish(), c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemLayer {
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCfg {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCfg {
    pub growth_rate: usize,
    pub n_layers: usize,
    /// Width of the 1×1 transition conv after the block.
    pub out_ch: usize,
    pub downsample: bool,
}

/// Where in a stage a tap is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapPoint {
    /// After the transition conv, before any downsampling.
    Transition,
    /// End of the stage (after downsampling when the stage has one).
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapCfg {
    pub name: String,
    pub stage: usize,
    pub point: TapPoint,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneCfg {
    #[serde(default = "default_in_ch")]
    pub in_ch: usize,
    pub multiplier: f64,
    pub activation: Activation,
    pub norm: bool,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    pub stem: Vec<StemLayer>,
    pub stem_pool: Option<PoolCfg>,
    pub downsample: PoolCfg,
    pub stages: Vec<StageCfg>,
    pub taps: Vec<TapCfg>,
}

fn default_in_ch() -> usize {
    3
}

pub(crate) fn default_bn_eps() -> f64 {
    1e-5
}

impl BackboneCfg {
    pub fn style(&self) -> ConvStyle {
        ConvStyle {
            norm: self.norm,
            bn_eps: self.bn_eps,
            activation: Some(self.activation),
        }
    }

    /// Block config of every stage, input widths resolved.
    pub fn blocks(&self) -> Result<Vec<HarDBlockCfg>> {
        let mut ch = self
            .stem
            .last()
            .map(|s| s.out_ch)
            .ok_or_else(|| Error::Config("backbone needs at least one stem layer".into()))?;
        let mut v = Vec::new();
        for st in &self.stages {
            v.push(HarDBlockCfg::new(st.n_layers, st.growth_rate, self.multiplier, ch));
            ch = st.out_ch;
        }
        Ok(v)
    }

    /// Channel count of a tap, from the config alone.
    pub fn tap_channels(&self, name: &str) -> Option<usize> {
        let t = self.taps.iter().find(|t| t.name == name)?;
        self.stages.get(t.stage).map(|s| s.out_ch)
    }
}

/// Adds the encoder on top of `x` and returns its taps by name.
pub fn add_backbone(
    b: &mut GraphBuilder,
    x: NodeId,
    cfg: &BackboneCfg,
) -> Result<IndexMap<String, NodeId>> {
    let style = cfg.style();
    let mut y = x;
    for (i, s) in cfg.stem.iter().enumerate() {
        let spec = ConvSpec::new(b.channels(y), s.out_ch, s.kernel)
            .stride(s.stride)
            .padding(s.kernel / 2);
        y = conv_unit(b, &format!("stem.{i}"), y, spec, style)?;
    }
    if let Some(p) = cfg.stem_pool {
        y = b.maxpool("stem.pool", y, p.kernel, p.stride, p.padding)?;
    }
    let blocks = cfg.blocks()?;
    let mut points: Vec<(NodeId, NodeId)> = Vec::new();
    for (i, (st, blk)) in cfg.stages.iter().zip(&blocks).enumerate() {
        let stage = format!("stages.{i}");
        let (blk_out, c) = build_hardblock(b, &format!("{stage}.block"), y, blk, style)?;
        let spec = ConvSpec::new(c, st.out_ch, 1);
        let trans = conv_unit(b, &format!("{stage}.transition"), blk_out, spec, style)?;
        y = trans;
        if st.downsample {
            let p = cfg.downsample;
            y = b.maxpool(&format!("{stage}.down"), y, p.kernel, p.stride, p.padding)?;
        }
        points.push((trans, y));
    }
    let mut taps = IndexMap::new();
    for t in &cfg.taps {
        let &(trans, out) = points.get(t.stage).ok_or_else(|| Error::Build {
            stage: format!("tap {}", t.name),
            detail: format!("stage {} does not exist", t.stage),
        })?;
        let id = match t.point {
            TapPoint::Transition => trans,
            TapPoint::Output => out,
        };
        if b.stride(id) != t.stride {
            return Err(Error::Build {
                stage: format!("stages.{}", t.stage),
                detail: format!(
                    "tap {} declared at stride {} but the op chain gives {}",
                    t.name,
                    t.stride,
                    b.stride(id)
                ),
            });
        }
        taps.insert(t.name.clone(), id);
    }
    Ok(taps)
}

/// Encoder graph with one output per tap.
pub fn build_backbone(cfg: &BackboneCfg) -> Result<Graph> {
    let (mut b, x) = GraphBuilder::new(cfg.in_ch);
    for (name, id) in add_backbone(&mut b, x, cfg)? {
        b.mark_output(&name, id);
    }
    Ok(b.finish())
}

/// Encoder features at strides 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Element = f32> {
    pub f8: Tensor4<T>,
    pub f16: Tensor4<T>,
    pub f32: Tensor4<T>,
}

/// Runs an encoder graph (or any graph with `f8`/`f16`/`f32` outputs).
pub fn forward_backbone<T: Element>(
    graph: &Graph,
    weights: &WeightStore,
    x: &Tensor4<T>,
) -> Result<FeaturePyramid<T>> {
    if x.shape().c != 3 {
        return Err(Error::shape(
            "forward_backbone",
            format!("expected 3 input channels, got {}", x.shape().c),
        ));
    }
    let params = params_for::<T>(graph, weights)?;
    let mut outs = run(graph, &mut Eager::new(&params), std::sync::Arc::new(x.clone()))?;
    let mut take = |k: &str| {
        outs.shift_remove(k)
            .map(std::sync::Arc::unwrap_or_clone)
            .ok_or_else(|| Error::invalid("forward_backbone", format!("graph has no `{k}` output")))
    };
    Ok(FeaturePyramid {
        f8: take("f8")?,
        f16: take("f16")?,
        f32: take("f32")?,
    })
}
