//! RFB skip modules, the multiplicative aggregation decoder, and the full model.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{params_for, run, Eager, Graph, GraphBuilder, NodeId};
use crate::hardnet::{add_backbone, conv_unit, default_bn_eps, BackboneCfg, ConvStyle};
use crate::io::{preprocess, ImageBuffer, Normalization, ParamMap, WeightStore};
use crate::tensor::{upsample_bilinear, Activation, ConvSpec, Element, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderCfg {
    pub rfb_out_ch: usize,
    /// Dilations of the last conv in branches b, c, d. The asymmetric kernel
    /// sizes follow as `2·i + 1` for branch `i = 1, 2, 3`.
    #[serde(default = "default_dilations")]
    pub dilations: [usize; 3],
    /// Kernel of the conv merging the four branches.
    #[serde(default = "one")]
    pub merge_kernel: usize,
    #[serde(default)]
    pub align_corners: bool,
    pub norm: bool,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

fn default_dilations() -> [usize; 3] {
    [3, 5, 7]
}

fn one() -> usize {
    1
}

impl DecoderCfg {
    pub fn new(rfb_out_ch: usize, norm: bool) -> Self {
        DecoderCfg {
            rfb_out_ch,
            dilations: default_dilations(),
            merge_kernel: 1,
            align_corners: false,
            norm,
            bn_eps: default_bn_eps(),
        }
    }

    pub fn head_hidden_ch(&self) -> usize {
        3 * self.rfb_out_ch
    }

    /// Decoder convs carry no activation.
    fn style(&self) -> ConvStyle {
        ConvStyle {
            norm: self.norm,
            bn_eps: self.bn_eps,
            activation: None,
        }
    }
}

/// Receptive field block: four branches of growing dilation, concatenated,
/// merged, added to a 1×1 shortcut of the input, then ReLU.
pub fn build_rfb(
    b: &mut GraphBuilder,
    prefix: &str,
    x: NodeId,
    cfg: &DecoderCfg,
) -> Result<NodeId> {
    let (cin, c) = (b.channels(x), cfg.rfb_out_ch);
    if cin == 0 || c == 0 {
        return Err(Error::Build {
            stage: prefix.to_string(),
            detail: "RFB channel counts must be positive".into(),
        });
    }
    let style = cfg.style();
    let mut branches = vec![conv_unit(b, &format!("{prefix}.branch0.0"), x, ConvSpec::new(cin, c, 1), style)?];
    for (i, &d) in cfg.dilations.iter().enumerate() {
        let k = 2 * (i + 1) + 1;
        let p = format!("{prefix}.branch{}", i + 1);
        let specs = [
            ConvSpec::new(cin, c, 1),
            ConvSpec::new(c, c, 1).kernel2(1, k).padding2(0, k / 2),
            ConvSpec::new(c, c, 1).kernel2(k, 1).padding2(k / 2, 0),
            ConvSpec::new(c, c, 3).padding(d).dilation(d),
        ];
        let mut y = x;
        for (j, spec) in specs.into_iter().enumerate() {
            y = conv_unit(b, &format!("{p}.{j}"), y, spec, style)?;
        }
        branches.push(y);
    }
    let cat = b.concat(&format!("{prefix}.cat"), &branches)?;
    let mk = cfg.merge_kernel;
    let merged = conv_unit(
        b,
        &format!("{prefix}.conv_cat"),
        cat,
        ConvSpec::new(4 * c, c, mk).padding(mk / 2),
        style,
    )?;
    let res = conv_unit(b, &format!("{prefix}.conv_res"), x, ConvSpec::new(cin, c, 1), style)?;
    let sum = b.add(&format!("{prefix}.sum"), merged, res)?;
    b.activation(&format!("{prefix}.relu"), sum, Activation::Relu)
}

/// Dense multiplicative aggregation of three `rfb_out_ch` features at strides
/// 32/16/8. Returns 1-channel logits at the size of `g8`.
pub fn build_aggregation(
    b: &mut GraphBuilder,
    prefix: &str,
    g32: NodeId,
    g16: NodeId,
    g8: NodeId,
    cfg: &DecoderCfg,
) -> Result<NodeId> {
    let c = cfg.rfb_out_ch;
    for (n, g) in [("g32", g32), ("g16", g16), ("g8", g8)] {
        if b.channels(g) != c {
            return Err(Error::Build {
                stage: prefix.to_string(),
                detail: format!("{n} has {} channels, expected {c}", b.channels(g)),
            });
        }
    }
    let style = cfg.style();
    let al = cfg.align_corners;
    let conv3 = |b: &mut GraphBuilder, name: &str, x: NodeId, cin: usize, cout: usize| {
        conv_unit(b, &format!("{prefix}.{name}"), x, ConvSpec::new(cin, cout, 3).padding(1), style)
    };
    let up = |b: &mut GraphBuilder, name: &str, x: NodeId, like: NodeId| {
        b.resize_like(&format!("{prefix}.{name}"), x, like, al)
    };

    // x2 = cu1(up(g32)) ∘ g16
    let g32_up = up(b, "up_a", g32, g16)?;
    let t = conv3(b, "conv_upsample1", g32_up, c, c)?;
    let x2 = b.mul(&format!("{prefix}.x2"), t, g16)?;

    // x3 = cu2(up(up(g32))) ∘ cu3(up(g16)) ∘ g8
    let u = up(b, "up_b", g32_up, g8)?;
    let t1 = conv3(b, "conv_upsample2", u, c, c)?;
    let u = up(b, "up_c", g16, g8)?;
    let t2 = conv3(b, "conv_upsample3", u, c, c)?;
    let m = b.mul(&format!("{prefix}.x3_a"), t1, t2)?;
    let x3 = b.mul(&format!("{prefix}.x3"), m, g8)?;

    // c2 = cc2(cat(x2, cu4(up(g32))))
    let t = conv3(b, "conv_upsample4", g32_up, c, c)?;
    let cat = b.concat(&format!("{prefix}.cat2"), &[x2, t])?;
    let c2 = conv3(b, "conv_concat2", cat, 2 * c, 2 * c)?;

    // c3 = cc3(cat(x3, cu5(up(c2))))
    let u = up(b, "up_d", c2, g8)?;
    let t = conv3(b, "conv_upsample5", u, 2 * c, 2 * c)?;
    let cat = b.concat(&format!("{prefix}.cat3"), &[x3, t])?;
    let c3 = conv3(b, "conv_concat3", cat, 3 * c, 3 * c)?;

    let h = conv3(b, "conv4", c3, 3 * c, 3 * c)?;
    b.conv(&format!("{prefix}.conv5"), h, ConvSpec::new(3 * c, 1, 1))
}

/// Encoder and decoder hyperparameters of one model variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCfg {
    pub name: String,
    pub backbone: BackboneCfg,
    pub decoder: DecoderCfg,
}

/// A built model: config plus graph with outputs
/// `f8`, `f16`, `f32`, `logits` (full resolution) and `prob`.
#[derive(Clone, Debug)]
pub struct MsegModel {
    pub cfg: ModelCfg,
    pub graph: Graph,
}

pub fn build_mseg(cfg: &ModelCfg) -> Result<MsegModel> {
    let (mut b, x) = GraphBuilder::new(cfg.backbone.in_ch);
    let taps = add_backbone(&mut b, x, &cfg.backbone)?;
    let tap = |n: &str| {
        taps.get(n).copied().ok_or_else(|| Error::Build {
            stage: "decoder".into(),
            detail: format!("backbone exposes no `{n}` tap"),
        })
    };
    let (f8, f16, f32) = (tap("f8")?, tap("f16")?, tap("f32")?);
    let d = &cfg.decoder;
    // decoder convs have no activation after them
    b.set_uniform_conv_init(true);
    let g8 = build_rfb(&mut b, "rfb2", f8, d)?;
    let g16 = build_rfb(&mut b, "rfb3", f16, d)?;
    let g32 = build_rfb(&mut b, "rfb4", f32, d)?;
    let low = build_aggregation(&mut b, "agg", g32, g16, g8, d)?;
    let logits = b.resize_like("head.resize", low, x, d.align_corners)?;
    let prob = b.activation("head.sigmoid", logits, Activation::Sigmoid)?;
    for (k, v) in [("f8", f8), ("f16", f16), ("f32", f32), ("logits", logits), ("prob", prob)] {
        b.mark_output(k, v);
    }
    Ok(MsegModel {
        cfg: cfg.clone(),
        graph: b.finish(),
    })
}

impl MsegModel {
    pub fn init_weights(&self, seed: u64) -> WeightStore {
        self.graph.init_params(seed)
    }

    pub fn params<T: Element>(&self, weights: &WeightStore) -> Result<ParamMap<T>> {
        params_for(&self.graph, weights)
    }
}

fn check_input<T: Element>(x: &Tensor4<T>) -> Result<()> {
    let s = x.shape();
    if s.c != 3 || s.h < 64 || s.w < 64 {
        return Err(Error::shape(
            "forward_mseg",
            format!("expected N×3×H×W with H, W ≥ 64, got {s}"),
        ));
    }
    Ok(())
}

/// Probability mask `N×1×H×W` for an `N×3×H×W` input.
pub fn forward_mseg<T: Element>(
    model: &MsegModel,
    params: &ParamMap<T>,
    x: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    check_input(x)?;
    let mut outs = run(&model.graph, &mut Eager::new(params), Arc::new(x.clone()))?;
    let prob = outs.shift_remove("prob").expect("model graph has a prob output");
    Ok(Arc::unwrap_or_clone(prob))
}

/// Probability map at the image's own resolution: resize to `size × size`,
/// normalize, run, resize back.
pub fn segment_image(
    model: &MsegModel,
    params: &ParamMap<f32>,
    img: &ImageBuffer,
    size: usize,
) -> Result<Tensor4<f32>> {
    let x = preprocess(img, size, size, &Normalization::IMAGENET)?;
    let prob = forward_mseg(model, params, &x)?;
    upsample_bilinear(&prob, img.height, img.width, model.cfg.decoder.align_corners)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn rfb_graph(cin: usize, cfg: &DecoderCfg) -> Graph {
        let (mut b, x) = GraphBuilder::new(cin);
        let y = build_rfb(&mut b, "rfb", x, cfg).unwrap();
        b.mark_output("out", y);
        b.finish()
    }

    #[test]
    fn rfb_preserves_spatial_size() {
        let cfg = DecoderCfg::new(4, false);
        let g = rfb_graph(3, &cfg);
        for hw in [13, 17, 22] {
            let shapes = g.infer_shapes(Shape4::new(1, 3, hw, hw)).unwrap();
            assert_eq!(*shapes.last().unwrap(), Shape4::new(1, 4, hw, hw));
        }
    }

    #[test]
    fn rfb_inventory() {
        let cfg = DecoderCfg::new(32, true);
        let g = rfb_graph(320, &cfg);
        let shape = |n: &str| g.params().iter().find(|p| p.name == n).unwrap().shape.clone();
        assert_eq!(shape("rfb.branch3.1.conv.weight"), vec![32, 32, 1, 7]);
        assert_eq!(shape("rfb.branch2.2.conv.weight"), vec![32, 32, 5, 1]);
        assert_eq!(shape("rfb.conv_cat.conv.weight"), vec![32, 128, 1, 1]);
        assert_eq!(shape("rfb.conv_res.conv.weight"), vec![32, 320, 1, 1]);
    }
}
