use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;

use super::{Graph, GraphNode, NodeId, OpKind};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::ParamMap;
use crate::tensor::{
    activation, batchnorm_infer, concat_channels, conv2d, ewise, maxpool2d, upsample_bilinear,
    Element, EwiseOp, Tensor4,
};

/// Evaluates single graph nodes on some value representation.
pub trait Backend {
    type Value: Clone;

    /// Output of `node` given its input values (in `node.inputs` order).
    /// Never called for [`OpKind::Input`].
    fn apply(&mut self, node: &GraphNode, inputs: &[&Self::Value]) -> Result<Self::Value>;
}

/// Runs `graph` in its stored order and returns the named outputs.
pub fn run<B: Backend>(
    graph: &Graph,
    backend: &mut B,
    input: B::Value,
) -> Result<IndexMap<String, B::Value>> {
    let order: Vec<NodeId> = (0..graph.len()).map(NodeId).collect();
    run_ordered(graph, backend, input, &order)
}

/// Runs `graph` visiting nodes in `order`, which must be topological.
pub fn run_with_order<B: Backend>(
    graph: &Graph,
    backend: &mut B,
    input: B::Value,
    order: &[NodeId],
) -> Result<IndexMap<String, B::Value>> {
    graph.check_order(order)?;
    run_ordered(graph, backend, input, order)
}

fn run_ordered<B: Backend>(
    graph: &Graph,
    backend: &mut B,
    input: B::Value,
    order: &[NodeId],
) -> Result<IndexMap<String, B::Value>> {
    let n = graph.len();
    // position after which each value is dead
    let mut last_use = vec![0usize; n];
    for (pos, id) in order.iter().enumerate() {
        last_use[id.0] = last_use[id.0].max(pos);
        for i in &graph.node(*id).inputs {
            last_use[i.0] = last_use[i.0].max(pos);
        }
    }
    for id in graph.outputs().values() {
        last_use[id.0] = usize::MAX;
    }

    let mut slots: Vec<Option<B::Value>> = vec![None; n];
    for (pos, id) in order.iter().enumerate() {
        let node = graph.node(*id);
        let value = if let OpKind::Input = node.op {
            input.clone()
        } else {
            let ins: Vec<&B::Value> = node
                .inputs
                .iter()
                .map(|i| slots[i.0].as_ref().expect("inputs evaluated before use"))
                .collect();
            backend.apply(node, &ins).map_err(|e| match e {
                e @ (Error::MissingWeight { .. } | Error::NonFinite { .. }) => e,
                e => Error::Node {
                    node: node.name.clone(),
                    source: Box::new(e),
                },
            })?
        };
        slots[id.0] = Some(value);
        for i in &node.inputs {
            if last_use[i.0] == pos {
                slots[i.0] = None;
            }
        }
        if last_use[id.0] == pos {
            slots[id.0] = None;
        }
    }
    Ok(graph
        .outputs()
        .iter()
        .map(|(k, id)| (k.clone(), slots[id.0].clone().expect("outputs are kept")))
        .collect())
}

fn weight<'p, T>(params: &'p ParamMap<T>, node: &GraphNode, name: &str) -> Result<&'p Tensor4<T>> {
    params
        .get(name)
        .map(|t| t.as_ref())
        .ok_or_else(|| Error::MissingWeight {
            node: node.name.clone(),
            weight: name.to_string(),
        })
}

/// Direct evaluation. Values are reference counted and freed after their last use.
pub struct Eager<'p, T: Element> {
    params: &'p ParamMap<T>,
    check_finite: bool,
}

impl<'p, T: Element> Eager<'p, T> {
    pub fn new(params: &'p ParamMap<T>) -> Self {
        Eager {
            params,
            check_finite: true,
        }
    }

    /// Skip the per-node NaN/Inf scan (used by the benchmark loop).
    pub fn unchecked(params: &'p ParamMap<T>) -> Self {
        Eager {
            params,
            check_finite: false,
        }
    }
}

impl<T: Element> Backend for Eager<'_, T> {
    type Value = Arc<Tensor4<T>>;

    fn apply(&mut self, node: &GraphNode, ins: &[&Self::Value]) -> Result<Self::Value> {
        let p = self.params;
        let y = match &node.op {
            OpKind::Input => unreachable!("input is bound by the executor"),
            OpKind::Conv { spec, weight: w, bias } => {
                let b = match bias {
                    Some(b) => Some(weight(p, node, b)?.data()),
                    None => None,
                };
                conv2d(ins[0], weight(p, node, w)?, b, spec)?
            }
            OpKind::BatchNorm(bn) => batchnorm_infer(
                ins[0],
                weight(p, node, &bn.gamma)?.data(),
                weight(p, node, &bn.beta)?.data(),
                weight(p, node, &bn.mean)?.data(),
                weight(p, node, &bn.var)?.data(),
                T::from_f64_lossy(bn.eps),
            )?,
            OpKind::Activation(kind) => activation(ins[0], *kind),
            OpKind::MaxPool {
                kernel,
                stride,
                padding,
            } => maxpool2d(ins[0], *kernel, *stride, *padding)?,
            OpKind::Resize { align_corners } => {
                let like = ins[1].shape();
                upsample_bilinear(ins[0], like.h, like.w, *align_corners)?
            }
            OpKind::Mul => ewise(ins[0], ins[1], EwiseOp::Mul)?,
            OpKind::Add => ewise(ins[0], ins[1], EwiseOp::Add)?,
            OpKind::Concat => {
                let refs: Vec<&Tensor4<T>> = ins.iter().map(|v| v.as_ref()).collect();
                concat_channels(&refs)?
            }
        };
        if self.check_finite && !y.is_finite() {
            return Err(Error::NonFinite {
                node: node.name.clone(),
            });
        }
        Ok(Arc::new(y))
    }
}

/// Records the graph on a [`Tape`]. Parameters become leaves on first use:
/// trainable ones via [`Tape::param`], frozen statistics via [`Tape::constant`].
pub struct TapeBackend<'t, 'p, T: Element> {
    tape: &'t mut Tape<T>,
    params: &'p ParamMap<T>,
    trainable: HashMap<String, bool>,
    vars: IndexMap<String, Var>,
}

impl<'t, 'p, T: Element> TapeBackend<'t, 'p, T> {
    pub fn new(tape: &'t mut Tape<T>, graph: &Graph, params: &'p ParamMap<T>) -> Self {
        TapeBackend {
            tape,
            params,
            trainable: graph
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.trainable))
                .collect(),
            vars: IndexMap::new(),
        }
    }

    pub fn tape(&mut self) -> &mut Tape<T> {
        self.tape
    }

    /// Use an existing variable for parameter `name` instead of creating a leaf.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// Leaf variables created so far, keyed by parameter name.
    pub fn vars(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    pub fn into_vars(self) -> IndexMap<String, Var> {
        self.vars
    }

    fn leaf(&mut self, node: &GraphNode, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = weight(self.params, node, name)?.clone();
        let v = if self.trainable.get(name).copied().unwrap_or(true) {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }
}

impl<T: Element> Backend for TapeBackend<'_, '_, T> {
    type Value = Var;

    fn apply(&mut self, node: &GraphNode, ins: &[&Var]) -> Result<Var> {
        let x = *ins[0];
        match &node.op {
            OpKind::Input => unreachable!("input is bound by the executor"),
            OpKind::Conv { spec, weight, bias } => {
                let w = self.leaf(node, weight)?;
                let b = match bias {
                    Some(b) => Some(self.leaf(node, b)?),
                    None => None,
                };
                self.tape.conv2d(x, w, b, spec)
            }
            OpKind::BatchNorm(bn) => {
                let g = self.leaf(node, &bn.gamma)?;
                let b = self.leaf(node, &bn.beta)?;
                let m = self.leaf(node, &bn.mean)?;
                let v = self.leaf(node, &bn.var)?;
                self.tape.batchnorm(x, g, b, m, v, T::from_f64_lossy(bn.eps))
            }
            OpKind::Activation(kind) => Ok(self.tape.activation(x, *kind)),
            OpKind::MaxPool {
                kernel,
                stride,
                padding,
            } => self.tape.maxpool(x, *kernel, *stride, *padding),
            OpKind::Resize { align_corners } => {
                let like = self.tape.shape(*ins[1]);
                self.tape.upsample(x, like.h, like.w, *align_corners)
            }
            OpKind::Mul => self.tape.mul(x, *ins[1]),
            OpKind::Add => self.tape.add(x, *ins[1]),
            OpKind::Concat => {
                let xs: Vec<Var> = ins.iter().map(|v| **v).collect();
                self.tape.concat(&xs)
            }
        }
    }
}
