//! Static dataflow description of a network.
//!
//! A [`Graph`] is a list of nodes in a valid topological order. Nodes refer to
//! their parameters by name; the values live in a [`crate::io::WeightStore`]
//! (or a [`crate::io::ParamMap`]) so one graph can be evaluated with many
//! weight sets and numeric types.

mod builder;
mod exec;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ParamMap, StoredTensor, WeightStore};
use crate::tensor::{
    pool_output_shape, shape_of_concat, Activation, ConvSpec, Element, Shape4, Tensor4,
};

pub use builder::GraphBuilder;
pub use exec::{run, run_with_order, Backend, Eager, TapeBackend};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// How a parameter is initialized by [`Graph::init_params`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    /// Uniform on `±1/sqrt(fan_in)`, for layers without a following activation.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: String,
    pub beta: String,
    pub mean: String,
    pub var: String,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OpKind {
    Input,
    Conv {
        spec: ConvSpec,
        weight: String,
        bias: Option<String>,
    },
    BatchNorm(BatchNormParams),
    Activation(Activation),
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Bilinear resize of `inputs[0]` to the spatial size of `inputs[1]`.
    Resize { align_corners: bool },
    Mul,
    Add,
    Concat,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv { .. } => "conv",
            OpKind::BatchNorm(_) => "batchnorm",
            OpKind::Activation(a) => a.name(),
            OpKind::MaxPool { .. } => "maxpool",
            OpKind::Resize { .. } => "resize",
            OpKind::Mul => "mul",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
        }
    }

    /// Parameter names referenced by this op, in a fixed order.
    pub fn param_names(&self) -> Vec<&str> {
        match self {
            OpKind::Conv { weight, bias, .. } => {
                let mut v = vec![weight.as_str()];
                v.extend(bias.as_deref());
                v
            }
            OpKind::BatchNorm(p) => vec![&p.gamma, &p.beta, &p.mean, &p.var],
            _ => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    nodes: Vec<GraphNode>,
    params: Vec<ParamSpec>,
    outputs: IndexMap<String, NodeId>,
}

impl Graph {
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn outputs(&self) -> &IndexMap<String, NodeId> {
        &self.outputs
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    /// Total parameter elements, running statistics included.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    /// Expected `(name, shape)` pairs of a matching weight file.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect()
    }

    /// Output shape of every node for an input of shape `input`.
    pub fn infer_shapes(&self, input: Shape4) -> Result<Vec<Shape4>> {
        let mut shapes: Vec<Shape4> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Shape4> = node.inputs.iter().map(|i| shapes[i.0]).collect();
            let s = node_shape(node, &ins, input).map_err(|e| Error::Build {
                stage: node.name.clone(),
                detail: e.to_string(),
            })?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Differences between this graph's manifest and a weight store:
    /// missing names, shape mismatches, and unexpected extras.
    pub fn check_manifest(&self, store: &WeightStore) -> Vec<String> {
        let mut diffs = Vec::new();
        for p in &self.params {
            match store.get(&p.name) {
                None => diffs.push(format!("missing `{}` {:?}", p.name, p.shape)),
                Some(t) if t.shape != p.shape => diffs.push(format!(
                    "shape of `{}`: expected {:?}, stored {:?}",
                    p.name, p.shape, t.shape
                )),
                Some(_) => {}
            }
        }
        for (name, t) in store.iter() {
            if !self.params.iter().any(|p| p.name == name) {
                diffs.push(format!("unexpected `{name}` {:?}", t.shape));
            }
        }
        diffs
    }

    /// Fresh weights drawn from each parameter's [`Init`], deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> WeightStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for p in &self.params {
            let n = p.numel();
            let data = match p.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::He { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let shape = Shape4::new(1, 1, 1, n);
                    Tensor4::<f32>::randn(shape, std, &mut rng).into_data()
                }
                Init::Uniform { fan_in } => {
                    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let shape = Shape4::new(1, 1, 1, n);
                    Tensor4::<f32>::uniform(shape, -b, b, &mut rng).into_data()
                }
            };
            store.insert(
                p.name.clone(),
                StoredTensor::new(p.shape.clone(), data).expect("shape matches data"),
            );
        }
        store
    }

    /// Same computation with nodes renumbered into `order`, which must be a
    /// valid topological order of this graph.
    pub fn permuted(&self, order: &[NodeId]) -> Result<Graph> {
        self.check_order(order)?;
        let mut new_id = vec![0usize; self.nodes.len()];
        for (pos, id) in order.iter().enumerate() {
            new_id[id.0] = pos;
        }
        let nodes = order
            .iter()
            .map(|id| {
                let n = &self.nodes[id.0];
                GraphNode {
                    name: n.name.clone(),
                    op: n.op.clone(),
                    inputs: n.inputs.iter().map(|i| NodeId(new_id[i.0])).collect(),
                }
            })
            .collect();
        let outputs = self
            .outputs
            .iter()
            .map(|(k, v)| (k.clone(), NodeId(new_id[v.0])))
            .collect();
        Ok(Graph {
            nodes,
            params: self.params.clone(),
            outputs,
        })
    }

    /// Uniformly chosen ready node at every step: a random topological order.
    pub fn random_topo_order<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<NodeId> {
        let n = self.nodes.len();
        let mut pending: Vec<usize> = self.nodes.iter().map(|nd| nd.inputs.len()).collect();
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, nd) in self.nodes.iter().enumerate() {
            for inp in &nd.inputs {
                users[inp.0].push(i);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| pending[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while !ready.is_empty() {
            ready.shuffle(rng);
            let i = ready.pop().expect("nonempty");
            order.push(NodeId(i));
            for &u in &users[i] {
                pending[u] -= 1;
                if pending[u] == 0 {
                    ready.push(u);
                }
            }
        }
        order
    }

    pub(crate) fn check_order(&self, order: &[NodeId]) -> Result<()> {
        let mut seen = vec![false; self.nodes.len()];
        if order.len() != self.nodes.len() {
            return Err(Error::invalid(
                "graph_order",
                format!("order has {} entries for {} nodes", order.len(), self.nodes.len()),
            ));
        }
        for id in order {
            let node = self.nodes.get(id.0).ok_or_else(|| {
                Error::invalid("graph_order", format!("node id {} out of range", id.0))
            })?;
            if seen[id.0] {
                return Err(Error::invalid("graph_order", format!("`{}` repeated", node.name)));
            }
            if let Some(i) = node.inputs.iter().find(|i| !seen[i.0]) {
                return Err(Error::invalid(
                    "graph_order",
                    format!("`{}` scheduled before its input `{}`", node.name, self.nodes[i.0].name),
                ));
            }
            seen[id.0] = true;
        }
        Ok(())
    }

    /// Merge each batch norm that directly follows a convolution (and is that
    /// convolution's only consumer) into the convolution's weights and bias.
    pub fn fold_batchnorm(&self, store: &WeightStore) -> Result<(Graph, WeightStore)> {
        let mut consumers = vec![0usize; self.nodes.len()];
        for nd in &self.nodes {
            for i in &nd.inputs {
                consumers[i.0] += 1;
            }
        }
        for id in self.outputs.values() {
            consumers[id.0] += 1;
        }
        let params: ParamMap<f32> = store.to_params()?;
        let get = |node: &str, name: &str| {
            params.get(name).cloned().ok_or_else(|| Error::MissingWeight {
                node: node.to_string(),
                weight: name.to_string(),
            })
        };

        // remap[i] = index of node i in the folded graph
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut folded_into = vec![None; self.nodes.len()];
        for (i, nd) in self.nodes.iter().enumerate() {
            if let (OpKind::BatchNorm(_), [src]) = (&nd.op, nd.inputs.as_slice()) {
                if matches!(self.nodes[src.0].op, OpKind::Conv { .. }) && consumers[src.0] == 1 {
                    folded_into[src.0] = Some(i);
                }
            }
        }

        let mut nodes = Vec::new();
        let mut new_params: Vec<ParamSpec> = Vec::new();
        let mut out_store = WeightStore::new();
        let spec_of = |name: &str| self.params.iter().find(|p| p.name == name);

        for (i, nd) in self.nodes.iter().enumerate() {
            let is_folded_bn = matches!(nd.op, OpKind::BatchNorm(_))
                && nd.inputs.len() == 1
                && folded_into[nd.inputs[0].0] == Some(i);
            if is_folded_bn {
                remap[i] = remap[nd.inputs[0].0];
                continue;
            }
            let inputs: Vec<NodeId> = nd.inputs.iter().map(|x| NodeId(remap[x.0])).collect();
            let op = match (&nd.op, folded_into[i]) {
                (OpKind::Conv { spec, weight, bias }, Some(bn_idx)) => {
                    let OpKind::BatchNorm(bn) = &self.nodes[bn_idx].op else {
                        unreachable!("folded_into points at a batch norm");
                    };
                    let w = get(&nd.name, weight)?;
                    let b = match bias {
                        Some(b) => Some(get(&nd.name, b)?),
                        None => None,
                    };
                    let bn_name = &self.nodes[bn_idx].name;
                    let (w2, b2) = crate::tensor::batchnorm_fold(
                        &w,
                        b.as_ref().map(|t| t.data()),
                        get(bn_name, &bn.gamma)?.data(),
                        get(bn_name, &bn.beta)?.data(),
                        get(bn_name, &bn.mean)?.data(),
                        get(bn_name, &bn.var)?.data(),
                        bn.eps as f32,
                    )?;
                    let bias_name = bias.clone().unwrap_or_else(|| format!("{}.folded_bias", nd.name));
                    let wspec = spec_of(weight).cloned().ok_or_else(|| Error::MissingWeight {
                        node: nd.name.clone(),
                        weight: weight.clone(),
                    })?;
                    out_store.insert(weight.clone(), StoredTensor::new(wspec.shape.clone(), w2.into_data())?);
                    new_params.push(wspec);
                    out_store.insert(bias_name.clone(), StoredTensor::new(vec![spec.out_ch], b2)?);
                    new_params.push(ParamSpec {
                        name: bias_name.clone(),
                        shape: vec![spec.out_ch],
                        trainable: true,
                        init: Init::Zeros,
                    });
                    OpKind::Conv {
                        spec: spec.bias(true),
                        weight: weight.clone(),
                        bias: Some(bias_name),
                    }
                }
                (op, _) => {
                    for name in op.param_names() {
                        if out_store.get(name).is_none() {
                            let t = store.get(name).ok_or_else(|| Error::MissingWeight {
                                node: nd.name.clone(),
                                weight: name.to_string(),
                            })?;
                            out_store.insert(name.to_string(), t.clone());
                            if let Some(s) = spec_of(name) {
                                new_params.push(s.clone());
                            }
                        }
                    }
                    op.clone()
                }
            };
            remap[i] = nodes.len();
            nodes.push(GraphNode {
                name: nd.name.clone(),
                op,
                inputs,
            });
        }
        let outputs = self
            .outputs
            .iter()
            .map(|(k, v)| (k.clone(), NodeId(remap[v.0])))
            .collect();
        Ok((
            Graph {
                nodes,
                params: new_params,
                outputs,
            },
            out_store,
        ))
    }
}

pub(crate) fn node_shape(node: &GraphNode, ins: &[Shape4], input: Shape4) -> Result<Shape4> {
    let one = |op: &'static str| -> Result<Shape4> {
        ins.first()
            .copied()
            .ok_or_else(|| Error::shape(op, "missing input"))
    };
    match &node.op {
        OpKind::Input => Ok(input),
        OpKind::Conv { spec, .. } => {
            let x = one("conv2d")?;
            if x.c != spec.in_ch {
                return Err(Error::shape(
                    "conv2d",
                    format!("input channels {} but spec expects {}", x.c, spec.in_ch),
                ));
            }
            spec.output_shape(x)
        }
        OpKind::BatchNorm(_) | OpKind::Activation(_) => one(node.op.name()),
        OpKind::MaxPool {
            kernel,
            stride,
            padding,
        } => pool_output_shape(one("maxpool2d")?, *kernel, *stride, *padding),
        OpKind::Resize { .. } => {
            let (x, like) = match ins {
                [x, like] => (*x, *like),
                _ => return Err(Error::shape("resize", "expects [x, like] inputs")),
            };
            Ok(x.with_hw(like.h, like.w))
        }
        OpKind::Mul | OpKind::Add => match ins {
            [a, b] if a == b => Ok(*a),
            [a, b] => Err(Error::shape("ewise", format!("{a} vs {b}"))),
            _ => Err(Error::shape("ewise", "expects two inputs")),
        },
        OpKind::Concat => shape_of_concat(ins),
    }
}

/// Weights for `graph` as typed tensors, failing on the first missing name.
pub fn params_for<T: Element>(graph: &Graph, store: &WeightStore) -> Result<ParamMap<T>> {
    for nd in graph.nodes() {
        for name in nd.op.param_names() {
            if store.get(name).is_none() {
                return Err(Error::MissingWeight {
                    node: nd.name.clone(),
                    weight: name.to_string(),
                });
            }
        }
    }
    store.to_params()
}

#[cfg(test)]
mod tests;
