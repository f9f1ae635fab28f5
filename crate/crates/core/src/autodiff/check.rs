//! Finite-difference verification of [`Tape::backward`](super::Tape::backward).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Var};
use crate::decoder::{build_aggregation, build_rfb, DecoderCfg};
use crate::error::Result;
use crate::graph::{run, Graph, GraphBuilder, TapeBackend};
use crate::io::ParamMap;
use crate::tensor::{max_rel_err, Activation, ConvSpec, Shape4, Tensor4};

/// Relative error bound for a passing case.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    /// Largest per-tensor `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    pub passed: bool,
}

/// Central differences `(f(p + eps·e) − f(p − eps·e)) / 2eps` for every entry
/// of every tensor in `params`.
pub fn finite_diff<F>(mut f: F, params: &[Tensor4<f64>], eps: f64) -> Result<Vec<Tensor4<f64>>>
where
    F: FnMut(&[Tensor4<f64>]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut g = Tensor4::zeros(params[i].shape());
        for j in 0..params[i].numel() {
            let orig = params[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = f(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = f(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Records a scalar function of the given leaves on a tape.
type Builder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients of `build` against central differences.
pub fn check_case(name: &str, params: &[Tensor4<f64>], build: &Builder<'_>) -> Result<GradCheckResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let numeric = finite_diff(
        |ps| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
            let l = build(&mut t, &vs)?;
            Ok(t.value(l).data()[0])
        },
        params,
        GRADCHECK_EPS,
    )?;
    let mut worst = 0.0f64;
    for (v, num) in vars.iter().zip(&numeric) {
        let ana = grads.get(*v).expect("every param gets a gradient");
        worst = worst.max(max_rel_err(ana, num));
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        max_rel_err: worst,
        checked: params.iter().map(Tensor4::numel).sum(),
        passed: worst < GRADCHECK_TOLERANCE,
    })
}

/// `sum(y ∘ r)` for a fixed random `r`, so every output entry gets a distinct weight.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor4::randn(tape.shape(y), 1.0, &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn randn(shape: Shape4, scale: f64, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::randn(shape, scale, rng)
}

fn conv_case(name: &str, x: Shape4, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Result<GradCheckResult> {
    let mut params = vec![randn(x, 1.0, rng), randn(spec.weight_shape(), 0.5, rng)];
    if spec.has_bias {
        params.push(randn(Shape4::new(1, 1, 1, spec.out_ch), 0.5, rng));
    }
    let seed = rng.random();
    check_case(name, &params, &|t, v| {
        let y = t.conv2d(v[0], v[1], v.get(2).copied(), &spec)?;
        weighted_sum(t, y, seed)
    })
}

/// Runs `graph` on a tape with both the input and all trainable parameters as leaves.
fn graph_case(name: &str, graph: &Graph, input: Shape4, seed: u64) -> Result<GradCheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = graph.init_params(rng.random());
    let mut base: ParamMap<f64> = store.to_params()?;
    // perturb the deterministic inits so no gradient is trivially symmetric
    for (pname, t) in base.iter_mut() {
        let frozen = graph.params().iter().any(|p| &p.name == pname && !p.trainable);
        let noise: Tensor4<f64> = randn(t.shape(), 0.2, &mut rng);
        let mut v = (**t).clone();
        for (a, n) in v.data_mut().iter_mut().zip(noise.data()) {
            *a = if frozen { 1.0 + n.abs() } else { *a + n };
        }
        *t = Arc::new(v);
    }
    let trainable: Vec<String> = graph
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    let mut params = vec![randn(input, 1.0, &mut rng)];
    params.extend(trainable.iter().map(|n| (*base[n]).clone()));
    let out_seed = rng.random();
    check_case(name, &params, &|t, v| {
        let y = {
            let mut be = TapeBackend::new(t, graph, &base);
            for (n, p) in trainable.iter().zip(&v[1..]) {
                be.bind(n, *p);
            }
            run(graph, &mut be, v[0])?[0]
        };
        weighted_sum(t, y, out_seed)
    })
}

/// RFB with batch norm on a small odd-sized input.
fn rfb_graph() -> Result<Graph> {
    let cfg = DecoderCfg::new(3, true);
    let (mut b, x) = GraphBuilder::new(2);
    let y = build_rfb(&mut b, "rfb", x, &cfg)?;
    b.mark_output("out", y);
    Ok(b.finish())
}

/// Aggregation fed by a pooled pyramid of the input, so the three scales
/// have non-power-of-two size ratios.
fn aggregation_graph() -> Result<Graph> {
    let cfg = DecoderCfg::new(2, true);
    let (mut b, x) = GraphBuilder::new(2);
    let g16 = b.maxpool("p16", x, 2, 2, 0)?;
    let g32 = b.maxpool("p32", g16, 2, 2, 0)?;
    let y = build_aggregation(&mut b, "agg", g32, g16, x, &cfg)?;
    b.mark_output("out", y);
    Ok(b.finish())
}

/// Every op kind on a randomized micro-graph, then the RFB and aggregation
/// composites, all at 64-bit precision.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(conv_case(
        "conv3x3_stride2_bias",
        Shape4::new(2, 3, 7, 6),
        ConvSpec::new(3, 4, 3).stride(2).padding(1),
        &mut rng,
    )?);
    out.push(conv_case(
        "conv_dilated_asymmetric",
        Shape4::new(1, 2, 9, 8),
        ConvSpec::new(2, 3, 1).kernel2(1, 3).padding2(1, 2).dilation(2).bias(false),
        &mut rng,
    )?);
    out.push(conv_case(
        "conv_grouped",
        Shape4::new(1, 4, 5, 5),
        ConvSpec::new(4, 4, 3).padding(1).groups(4),
        &mut rng,
    )?);

    let s = Shape4::new(2, 3, 4, 5);
    let c = Shape4::new(1, 1, 1, 3);
    let params = vec![
        randn(s, 1.0, &mut rng),
        randn(c, 1.0, &mut rng),
        randn(c, 1.0, &mut rng),
    ];
    let stats = (randn(c, 0.5, &mut rng), randn(c, 0.5, &mut rng).map(|v| 0.5 + v.abs()));
    let seed_bn = rng.random();
    out.push(check_case("batchnorm", &params, &|t, v| {
        let m = t.constant(stats.0.clone());
        let var = t.constant(stats.1.clone());
        let y = t.batchnorm(v[0], v[1], v[2], m, var, 1e-5)?;
        weighted_sum(t, y, seed_bn)
    })?);

    for kind in [Activation::Relu, Activation::Relu6, Activation::Sigmoid] {
        let x = randn(Shape4::new(2, 2, 4, 4), 4.0, &mut rng);
        let seed_a = rng.random();
        out.push(check_case(kind.name(), &[x], &|t, v| {
            let y = t.activation(v[0], kind);
            weighted_sum(t, y, seed_a)
        })?);
    }

    let x = randn(Shape4::new(1, 2, 9, 7), 1.0, &mut rng);
    let seed_p = rng.random();
    out.push(check_case("maxpool", &[x], &|t, v| {
        let y = t.maxpool(v[0], 3, 2, 1)?;
        weighted_sum(t, y, seed_p)
    })?);

    for align in [false, true] {
        let x = randn(Shape4::new(1, 2, 3, 4), 1.0, &mut rng);
        let seed_r = rng.random();
        let name = if align { "resize_align_corners" } else { "resize_half_pixel" };
        out.push(check_case(name, &[x], &|t, v| {
            let y = t.upsample(v[0], 7, 5, align)?;
            weighted_sum(t, y, seed_r)
        })?);
    }

    let s = Shape4::new(1, 3, 4, 4);
    let ab = vec![randn(s, 1.0, &mut rng), randn(s, 1.0, &mut rng)];
    let seed_m = rng.random();
    out.push(check_case("mul", &ab, &|t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, seed_m)
    })?);
    let seed_add = rng.random();
    out.push(check_case("add", &ab, &|t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, seed_add)
    })?);

    let xs = vec![
        randn(Shape4::new(2, 1, 3, 3), 1.0, &mut rng),
        randn(Shape4::new(2, 3, 3, 3), 1.0, &mut rng),
        randn(Shape4::new(2, 2, 3, 3), 1.0, &mut rng),
    ];
    let seed_c = rng.random();
    out.push(check_case("concat", &xs, &|t, v| {
        let y = t.concat(v)?;
        weighted_sum(t, y, seed_c)
    })?);

    let logits = randn(Shape4::new(2, 1, 4, 4), 1.5, &mut rng);
    let target = Tensor4::from_fn(logits.shape(), |_, _, _, _| {
        if rng.random_bool(0.4) {
            1.0
        } else {
            0.0
        }
    });
    out.push(check_case("seg_loss", &[logits], &|t, v| {
        let tg = t.constant(target.clone());
        t.seg_loss(v[0], tg)
    })?);

    let seed_rfb = rng.random();
    out.push(graph_case("rfb_composite", &rfb_graph()?, Shape4::new(1, 2, 13, 13), seed_rfb)?);
    let seed_agg = rng.random();
    out.push(graph_case(
        "aggregation_composite",
        &aggregation_graph()?,
        Shape4::new(1, 2, 13, 11),
        seed_agg,
    )?);
    Ok(out)
}
