//! Training loop and the synthetic blob task used to exercise it.

mod blobs;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blobs::{gen_blobs, BlobDataset, BlobSample, Ellipse, AREA_RANGE};

use crate::autodiff::{OptimKind, OptimState, Tape, Var};
use crate::decoder::{forward_mseg, MsegModel};
use crate::error::{Error, Result};
use crate::graph::{run, TapeBackend};
use crate::io::{Normalization, ParamMap, WeightStore};
use crate::metrics::{evaluate_image, MetricReport};
use crate::tensor::Tensor4;

/// Optimizer recipe: `sgd-policy` (lr 1e-2, random flips) or
/// `adam-policy` (lr 1e-4, no augmentation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    SgdPolicy,
    AdamPolicy,
}

impl Policy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd-policy" | "sgd" => Ok(Policy::SgdPolicy),
            "adam-policy" | "adam" => Ok(Policy::AdamPolicy),
            _ => Err(Error::Config(format!(
                "unknown policy `{s}` (expected sgd-policy or adam-policy)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::SgdPolicy => "sgd-policy",
            Policy::AdamPolicy => "adam-policy",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Policy::SgdPolicy => 1e-2,
            Policy::AdamPolicy => 1e-4,
        }
    }

    pub fn augments(self) -> bool {
        self == Policy::SgdPolicy
    }

    pub fn optim(self) -> OptimKind {
        match self {
            Policy::SgdPolicy => OptimKind::Sgd { momentum: 0.0 },
            Policy::AdamPolicy => OptimKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub policy: Policy,
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides the policy's learning rate.
    pub lr: Option<f64>,
    pub seed: u64,
    pub threshold: f64,
    /// Trailing share of the dataset (by index) held out for evaluation.
    pub held_out_fraction: f64,
}

impl TrainOptions {
    pub fn new(policy: Policy) -> Self {
        TrainOptions {
            policy,
            epochs: 30,
            batch_size: 4,
            lr: None,
            seed: 0,
            threshold: 0.5,
            held_out_fraction: 0.2,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(self.policy.default_lr())
    }
}

/// Mutable training state: trainable tensors, frozen statistics, optimizer.
pub struct Trainer<'m> {
    model: &'m MsegModel,
    base: WeightStore,
    names: Vec<String>,
    values: Vec<Tensor4<f32>>,
    frozen: ParamMap<f32>,
    optim: OptimState<f32>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m MsegModel, weights: &WeightStore, kind: OptimKind, lr: f64) -> Result<Self> {
        let all = model.params::<f32>(weights)?;
        let mut names = Vec::new();
        let mut values = Vec::new();
        let mut frozen = ParamMap::new();
        for spec in model.graph.params() {
            let t = all[&spec.name].clone();
            if spec.trainable {
                names.push(spec.name.clone());
                values.push(Arc::unwrap_or_clone(t));
            } else {
                frozen.insert(spec.name.clone(), t);
            }
        }
        Ok(Trainer {
            model,
            base: weights.clone(),
            names,
            values,
            frozen,
            optim: OptimState::new(kind, lr),
        })
    }

    pub fn steps(&self) -> u64 {
        self.optim.step_count()
    }

    /// One optimizer update on a batch; returns the loss before the update.
    pub fn step(&mut self, x: &Tensor4<f32>, y: &Tensor4<f32>) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.values.iter().map(|v| tape.param(v.clone())).collect();
        let xv = tape.constant(x.clone());
        let logits = {
            let mut be = TapeBackend::new(&mut tape, &self.model.graph, &self.frozen);
            for (name, v) in self.names.iter().zip(&vars) {
                be.bind(name, *v);
            }
            let mut outs = run(&self.model.graph, &mut be, xv)?;
            outs.shift_remove("logits").expect("model graph has a logits output")
        };
        let yv = tape.constant(y.clone());
        let loss = tape.seg_loss(logits, yv)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { node: "loss".into() });
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Option<&Tensor4<f32>>> = vars.iter().map(|v| grads.get(*v)).collect();
        self.optim.step(&mut self.values, &g)?;
        Ok(value)
    }

    pub fn params(&self) -> ParamMap<f32> {
        let mut p = self.frozen.clone();
        for (n, v) in self.names.iter().zip(&self.values) {
            p.insert(n.clone(), Arc::new(v.clone()));
        }
        p
    }

    pub fn predict(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        forward_mseg(self.model, &self.params(), x)
    }

    /// Current weights in storage form.
    pub fn weights(&self) -> Result<WeightStore> {
        let mut store = self.base.clone();
        for spec in self.model.graph.params() {
            if let Some(i) = self.names.iter().position(|n| *n == spec.name) {
                store.insert_tensor(spec.name.clone(), spec.shape.clone(), &self.values[i])?;
            }
        }
        Ok(store)
    }
}

fn flip(t: &Tensor4<f32>, horizontal: bool, vertical: bool) -> Tensor4<f32> {
    let s = t.shape();
    Tensor4::from_fn(s, |n, c, y, x| {
        let yy = if vertical { s.h - 1 - y } else { y };
        let xx = if horizontal { s.w - 1 - x } else { x };
        t.at(n, c, yy, xx)
    })
}

fn sample_id(i: usize) -> String {
    format!("blob-{i:04}")
}

/// Metrics of the current model on `indices` of `data`.
pub fn evaluate_blobs(
    trainer: &Trainer<'_>,
    data: &BlobDataset,
    indices: &[usize],
    threshold: f64,
) -> Result<MetricReport> {
    let params = trainer.params();
    let mut records = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(8) {
        let xs: Vec<Tensor4<f32>> = chunk
            .iter()
            .map(|&i| data.samples[i].image_tensor(&Normalization::IMAGENET))
            .collect();
        let refs: Vec<&Tensor4<f32>> = xs.iter().collect();
        let prob = forward_mseg(trainer.model, &params, &Tensor4::stack(&refs)?)?;
        for (k, &i) in chunk.iter().enumerate() {
            let gt = data.samples[i].mask_tensor();
            records.push(evaluate_image(&sample_id(i), &prob.sample(k), &gt, threshold)?);
        }
    }
    Ok(MetricReport::from_records(threshold, records))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub policy: Policy,
    pub learning_rate: f64,
    pub epochs: usize,
    pub steps: u64,
    pub train_samples: usize,
    pub held_out_samples: usize,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub held_out: MetricReport,
}

/// Trains `model` from `weights` on the leading part of `data` and evaluates
/// on the held-out tail.
pub fn train_toy(
    model: &MsegModel,
    weights: &WeightStore,
    data: &BlobDataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(WeightStore, TrainReport)> {
    if opts.batch_size == 0 || opts.epochs == 0 || !(0.0..1.0).contains(&opts.held_out_fraction) {
        return Err(Error::invalid(
            "train_toy",
            "need batch_size ≥ 1, epochs ≥ 1 and held_out_fraction in [0, 1)",
        ));
    }
    let n = data.len();
    let n_held = ((n as f64) * opts.held_out_fraction).round() as usize;
    let n_train = n - n_held;
    if n_train == 0 || n_held == 0 {
        return Err(Error::invalid(
            "train_toy",
            format!("{n} samples leave an empty train or held-out split"),
        ));
    }
    let lr = opts.learning_rate();
    let mut trainer = Trainer::new(model, weights, opts.policy.optim(), lr)?;
    let xs: Vec<Tensor4<f32>> = data
        .samples
        .iter()
        .map(|s| s.image_tensor(&Normalization::IMAGENET))
        .collect();
    let ys: Vec<Tensor4<f32>> = data.samples.iter().map(|s| s.mask_tensor()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            let mut bx = Vec::with_capacity(chunk.len());
            let mut by = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if opts.policy.augments() {
                    let (h, v) = (rng.random_bool(0.5), rng.random_bool(0.5));
                    bx.push(flip(&xs[i], h, v));
                    by.push(flip(&ys[i], h, v));
                } else {
                    bx.push(xs[i].clone());
                    by.push(ys[i].clone());
                }
            }
            let x = Tensor4::stack(&bx.iter().collect::<Vec<_>>())?;
            let y = Tensor4::stack(&by.iter().collect::<Vec<_>>())?;
            let loss = trainer.step(&x, &y).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                },
                e => e,
            })?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    let held: Vec<usize> = (n_train..n).collect();
    let held_out = evaluate_blobs(&trainer, data, &held, opts.threshold)?;
    let report = TrainReport {
        policy: opts.policy,
        learning_rate: lr,
        epochs: opts.epochs,
        steps: trainer.steps(),
        train_samples: n_train,
        held_out_samples: n_held,
        epoch_losses,
        held_out,
    };
    Ok((trainer.weights()?, report))
}

#[derive(Clone, Debug, Serialize)]
pub struct MemorizeReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub dice: f64,
}

/// Fits a single sample for `steps` updates and reports its training Dice.
pub fn memorize(
    model: &MsegModel,
    weights: &WeightStore,
    sample: &BlobSample,
    steps: usize,
    kind: OptimKind,
    lr: f64,
) -> Result<MemorizeReport> {
    let mut trainer = Trainer::new(model, weights, kind, lr)?;
    let x = sample.image_tensor(&Normalization::IMAGENET);
    let y = sample.mask_tensor();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(trainer.step(&x, &y)?);
    }
    let rec = evaluate_image(&sample_id(0), &trainer.predict(&x)?, &y, 0.5)?;
    Ok(MemorizeReport {
        steps,
        losses,
        dice: rec.metrics.dice,
    })
}
