use indexmap::IndexMap;

use super::{BatchNormParams, Graph, GraphNode, Init, NodeId, OpKind, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvSpec};

/// Incremental graph construction with channel and stride bookkeeping.
///
/// Every node records its channel count and its stride relative to the input,
/// so builders can validate wiring before any tensor exists.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<GraphNode>,
    params: Vec<ParamSpec>,
    outputs: IndexMap<String, NodeId>,
    channels: Vec<usize>,
    strides: Vec<usize>,
    names: IndexMap<String, NodeId>,
    uniform_conv_init: bool,
}

impl GraphBuilder {
    /// Builder whose first node is the network input with `channels` channels.
    pub fn new(channels: usize) -> (Self, NodeId) {
        let mut b = GraphBuilder {
            nodes: Vec::new(),
            params: Vec::new(),
            outputs: IndexMap::new(),
            channels: Vec::new(),
            strides: Vec::new(),
            names: IndexMap::new(),
            uniform_conv_init: false,
        };
        let id = b
            .push("input", OpKind::Input, vec![], channels, 1)
            .expect("first node name is unique");
        (b, id)
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.channels[id.0]
    }

    pub fn stride(&self, id: NodeId) -> usize {
        self.strides[id.0]
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    /// Convs added from now on use [`Init::Uniform`] instead of [`Init::He`].
    pub fn set_uniform_conv_init(&mut self, on: bool) {
        self.uniform_conv_init = on;
    }

    fn push(
        &mut self,
        name: &str,
        op: OpKind,
        inputs: Vec<NodeId>,
        channels: usize,
        stride: usize,
    ) -> Result<NodeId> {
        if self.names.contains_key(name) {
            return Err(Error::Build {
                stage: name.to_string(),
                detail: "duplicate node name".into(),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            name: name.to_string(),
            op,
            inputs,
        });
        self.channels.push(channels);
        self.strides.push(stride);
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    fn add_param(&mut self, name: String, shape: Vec<usize>, trainable: bool, init: Init) -> String {
        self.params.push(ParamSpec {
            name: name.clone(),
            shape,
            trainable,
            init,
        });
        name
    }

    /// Convolution with parameters `{name}.weight` and (if `spec.has_bias`) `{name}.bias`.
    pub fn conv(&mut self, name: &str, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
        spec.validate()?;
        if self.channels(x) != spec.in_ch {
            return Err(Error::Build {
                stage: name.to_string(),
                detail: format!(
                    "input `{}` has {} channels, conv expects {}",
                    self.nodes[x.0].name,
                    self.channels(x),
                    spec.in_ch
                ),
            });
        }
        if spec.stride.0 != spec.stride.1 {
            return Err(Error::Build {
                stage: name.to_string(),
                detail: "anisotropic strides break stride bookkeeping".into(),
            });
        }
        let ws = spec.weight_shape();
        let fan_in = ws.c * ws.h * ws.w;
        let init = if self.uniform_conv_init {
            Init::Uniform { fan_in }
        } else {
            Init::He { fan_in }
        };
        let weight = self.add_param(format!("{name}.weight"), ws.to_vec(), true, init);
        let bias = spec
            .has_bias
            .then(|| self.add_param(format!("{name}.bias"), vec![spec.out_ch], true, Init::Zeros));
        let stride = self.stride(x) * spec.stride.0;
        self.push(name, OpKind::Conv { spec, weight, bias }, vec![x], spec.out_ch, stride)
    }

    /// Inference batch norm with `{name}.weight`, `.bias`, `.running_mean`, `.running_var`.
    pub fn batchnorm(&mut self, name: &str, x: NodeId, eps: f64) -> Result<NodeId> {
        let c = self.channels(x);
        let p = BatchNormParams {
            gamma: self.add_param(format!("{name}.weight"), vec![c], true, Init::Ones),
            beta: self.add_param(format!("{name}.bias"), vec![c], true, Init::Zeros),
            mean: self.add_param(format!("{name}.running_mean"), vec![c], false, Init::Zeros),
            var: self.add_param(format!("{name}.running_var"), vec![c], false, Init::Ones),
            eps,
        };
        let s = self.stride(x);
        self.push(name, OpKind::BatchNorm(p), vec![x], c, s)
    }

    pub fn activation(&mut self, name: &str, x: NodeId, kind: Activation) -> Result<NodeId> {
        let (c, s) = (self.channels(x), self.stride(x));
        self.push(name, OpKind::Activation(kind), vec![x], c, s)
    }

    pub fn maxpool(
        &mut self,
        name: &str,
        x: NodeId,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Build {
                stage: name.to_string(),
                detail: "pool kernel and stride must be positive".into(),
            });
        }
        let (c, s) = (self.channels(x), self.stride(x));
        self.push(
            name,
            OpKind::MaxPool {
                kernel,
                stride,
                padding,
            },
            vec![x],
            c,
            s * stride,
        )
    }

    /// Bilinear resize of `x` to the spatial size of `like`.
    pub fn resize_like(
        &mut self,
        name: &str,
        x: NodeId,
        like: NodeId,
        align_corners: bool,
    ) -> Result<NodeId> {
        let (c, s) = (self.channels(x), self.stride(like));
        self.push(name, OpKind::Resize { align_corners }, vec![x, like], c, s)
    }

    fn binary(&mut self, name: &str, op: OpKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.channels(a) != self.channels(b) || self.stride(a) != self.stride(b) {
            return Err(Error::Build {
                stage: name.to_string(),
                detail: format!(
                    "operands differ: `{}` is {}ch@/{} and `{}` is {}ch@/{}",
                    self.nodes[a.0].name,
                    self.channels(a),
                    self.stride(a),
                    self.nodes[b.0].name,
                    self.channels(b),
                    self.stride(b)
                ),
            });
        }
        let (c, s) = (self.channels(a), self.stride(a));
        self.push(name, op, vec![a, b], c, s)
    }

    pub fn mul(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(name, OpKind::Mul, a, b)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(name, OpKind::Add, a, b)
    }

    /// Channel concatenation. A single input is returned as is, without a node.
    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        match xs {
            [] => Err(Error::Build {
                stage: name.to_string(),
                detail: "concat of zero inputs".into(),
            }),
            [x] => Ok(*x),
            _ => {
                let s = self.stride(xs[0]);
                if let Some(bad) = xs.iter().find(|x| self.stride(**x) != s) {
                    return Err(Error::Build {
                        stage: name.to_string(),
                        detail: format!("`{}` is at a different stride", self.nodes[bad.0].name),
                    });
                }
                let c = xs.iter().map(|x| self.channels(*x)).sum();
                self.push(name, OpKind::Concat, xs.to_vec(), c, s)
            }
        }
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn finish(self) -> Graph {
        Graph {
            nodes: self.nodes,
            params: self.params,
            outputs: self.outputs,
        }
    }
}
