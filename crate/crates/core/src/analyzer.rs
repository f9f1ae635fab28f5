//! Per-layer cost accounting and wall-clock benchmarking.
//!
//! Traffic is a model, not a measurement: every tensor a node reads or writes
//! (inputs, output, parameters) is counted once at 4 bytes per element.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::MsegModel;
use crate::error::{Error, Result};
use crate::graph::{params_for, run, Eager, Graph, OpKind};
use crate::hardnet::{hardblock_graph, ConvStyle, HarDBlockCfg};
use crate::io::WeightStore;
use crate::tensor::{Activation, Shape4, Tensor4};

pub const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStat {
    pub node: String,
    pub op: String,
    pub output_shape: Shape4,
    pub params: u64,
    pub macs: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
    pub weight_bytes: u64,
    pub traffic_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub traffic_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub input_shape: Shape4,
    pub layers: Vec<LayerStat>,
    pub totals: Totals,
}

/// Parameter, MAC and traffic counts of every node for one input shape.
pub fn summarize(graph: &Graph, input_shape: Shape4) -> Result<Summary> {
    let shapes = graph.infer_shapes(input_shape)?;
    let numel = |name: &str| -> u64 {
        graph
            .params()
            .iter()
            .find(|p| p.name == name)
            .map_or(0, |p| p.numel() as u64)
    };
    let mut layers = Vec::with_capacity(graph.len());
    let mut totals = Totals::default();
    for (i, node) in graph.nodes().iter().enumerate() {
        let out = shapes[i];
        let out_elems = out.numel() as u64;
        let params: u64 = node.op.param_names().iter().map(|n| numel(n)).sum();
        let macs = match &node.op {
            OpKind::Conv { spec, .. } => {
                out_elems * (spec.in_ch / spec.groups) as u64 * (spec.kernel.0 * spec.kernel.1) as u64
            }
            OpKind::BatchNorm(_) => out_elems,
            _ => 0,
        };
        let read = match &node.op {
            OpKind::Input => 0,
            // the second input only supplies a target size
            OpKind::Resize { .. } => shapes[node.inputs[0].0].numel() as u64,
            _ => node.inputs.iter().map(|j| shapes[j.0].numel() as u64).sum(),
        };
        let (input_bytes, output_bytes, weight_bytes) = if let OpKind::Input = node.op {
            (0, 0, 0)
        } else {
            (
                read * BYTES_PER_ELEMENT,
                out_elems * BYTES_PER_ELEMENT,
                params * BYTES_PER_ELEMENT,
            )
        };
        let traffic_bytes = input_bytes + output_bytes + weight_bytes;
        totals.params += params;
        totals.macs += macs;
        totals.traffic_bytes += traffic_bytes;
        layers.push(LayerStat {
            node: node.name.clone(),
            op: node.op.name().to_string(),
            output_shape: out,
            params,
            macs,
            input_bytes,
            output_bytes,
            weight_bytes,
            traffic_bytes,
        });
    }
    Ok(Summary {
        input_shape,
        layers,
        totals,
    })
}

fn human(v: u64) -> String {
    match v {
        v if v >= 1_000_000_000 => format!("{:.2}G", v as f64 / 1e9),
        v if v >= 1_000_000 => format!("{:.2}M", v as f64 / 1e6),
        v if v >= 1_000 => format!("{:.1}K", v as f64 / 1e3),
        v => v.to_string(),
    }
}

impl Summary {
    pub fn to_table(&self) -> String {
        let w = self.layers.iter().map(|l| l.node.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w$}  {:<10} {:>16} {:>10} {:>10} {:>10}",
            "node", "op", "output", "params", "macs", "traffic"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<w$}  {:<10} {:>16} {:>10} {:>10} {:>10}",
                l.node,
                l.op,
                l.output_shape.to_string(),
                human(l.params),
                human(l.macs),
                human(l.traffic_bytes)
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "total ({} nodes, input {}): params {} ({}), MACs {} ({}), traffic {} bytes ({}B)",
            self.layers.len(),
            self.input_shape,
            t.params,
            human(t.params),
            t.macs,
            human(t.macs),
            t.traffic_bytes,
            human(t.traffic_bytes)
        );
        s
    }
}

/// Bytes read by the block's convolutions: the concatenated inputs of every layer.
pub fn hardblock_concat_traffic(cfg: &HarDBlockCfg, hw: usize) -> Result<u64> {
    let style = ConvStyle {
        norm: true,
        bn_eps: 1e-5,
        activation: Some(Activation::Relu6),
    };
    let (g, _) = hardblock_graph(cfg, style)?;
    let s = summarize(&g, Shape4::new(1, cfg.base_ch, hw, hw))?;
    Ok(s
        .layers
        .iter()
        .filter(|l| l.op == "conv")
        .map(|l| l.input_bytes)
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub input_shape: Shape4,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    pub threads: usize,
    pub latencies_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub platform: String,
    pub batchnorm_folded: bool,
    pub scope: String,
}

/// CPU model, architecture and logical core count.
pub fn platform_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu} ({}, {cores} logical cores)", std::env::consts::ARCH)
}

/// Sorted-sample statistics: (mean, median, nearest-rank p95).
pub fn latency_stats(samples: &[f64]) -> (f64, f64, f64) {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (mean, median, v[rank - 1])
}

/// Times full forward passes (resize, sigmoid included; image decode and mask
/// encode excluded) on a fixed random input drawn from `seed`.
pub fn bench(
    model: &MsegModel,
    weights: &WeightStore,
    input_shape: Shape4,
    warmup_iters: usize,
    measure_iters: usize,
    threads: usize,
    seed: u64,
) -> Result<BenchReport> {
    if warmup_iters < 1 || measure_iters < 10 || threads < 1 {
        return Err(Error::invalid(
            "bench",
            format!("need warmup ≥ 1, iters ≥ 10, threads ≥ 1; got {warmup_iters}, {measure_iters}, {threads}"),
        ));
    }
    let (graph, folded_weights) = model.graph.fold_batchnorm(weights)?;
    let params = params_for::<f32>(&graph, &folded_weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Arc::new(Tensor4::<f32>::randn(input_shape, 1.0, &mut rng));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("bench", e.to_string()))?;
    let latencies = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..warmup_iters {
            run(&graph, &mut Eager::new(&params), x.clone())?;
        }
        let mut v = Vec::with_capacity(measure_iters);
        for _ in 0..measure_iters {
            let t = Instant::now();
            let out = run(&graph, &mut Eager::unchecked(&params), x.clone())?;
            std::hint::black_box(&out);
            v.push(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(v)
    })?;
    let (mean_ms, median_ms, p95_ms) = latency_stats(&latencies);
    Ok(BenchReport {
        model: model.cfg.name.clone(),
        input_shape,
        warmup_iters,
        measured_iters: measure_iters,
        threads,
        latencies_ms: latencies,
        mean_ms,
        median_ms,
        p95_ms,
        fps: 1e3 / mean_ms,
        platform: platform_string(),
        batchnorm_folded: true,
        scope: "forward pass only; image decode, preprocessing and mask encode excluded".into(),
    })
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        format!(
            "model {}  input {}  threads {}\nwarmup {}  measured {}\nmean {:.3} ms  median {:.3} ms  p95 {:.3} ms  fps {:.2}\nplatform {}\n{}\n",
            self.model,
            self.input_shape,
            self.threads,
            self.warmup_iters,
            self.measured_iters,
            self.mean_ms,
            self.median_ms,
            self.p95_ms,
            self.fps,
            self.platform,
            self.scope
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::tensor::ConvSpec;

    #[test]
    fn single_pointwise_conv() {
        let (mut b, x) = GraphBuilder::new(3);
        let c = b.conv("c", x, ConvSpec::new(3, 4, 1)).unwrap();
        let a = b.activation("a", c, Activation::Relu).unwrap();
        b.mark_output("y", a);
        let s = summarize(&b.finish(), Shape4::new(1, 3, 8, 8)).unwrap();
        assert_eq!(s.layers[1].params, 16);
        assert_eq!(s.layers[1].macs, 768);
        assert_eq!(s.layers[1].traffic_bytes, (3 * 64 + 4 * 64 + 16) * 4);
        assert_eq!((s.layers[2].params, s.layers[2].macs), (0, 0));
        assert_eq!(s.totals.params, 16);
    }

    #[test]
    fn stats_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        let (mean, med, p95) = latency_stats(&v);
        assert_eq!((mean, med, p95), (10.5, 10.5, 19.0));
    }

    #[test]
    fn sparse_block_reads_less_than_dense() {
        for n in [8, 16] {
            let cfg = HarDBlockCfg::new(n, 14, 1.7, 64);
            let sparse = hardblock_concat_traffic(&cfg, 16).unwrap();
            let dense = hardblock_concat_traffic(&cfg.dense(), 16).unwrap();
            assert!(sparse < dense, "{n}: {sparse} vs {dense}");
        }
    }
}
