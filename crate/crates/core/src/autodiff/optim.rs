use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimKind {
    /// `buf ← μ·buf + g; p ← p − lr·buf` (plain SGD when `μ = 0`).
    Sgd { momentum: f64 },
    /// Bias-corrected first/second moment update.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer hyperparameters plus per-parameter state.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub kind: OptimKind,
    pub learning_rate: f64,
    step: u64,
    first: Vec<Tensor4<T>>,
    second: Vec<Tensor4<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(kind: OptimKind, learning_rate: f64) -> Self {
        OptimState {
            kind,
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimKind::Sgd { momentum: 0.0 }, learning_rate)
    }

    /// Adam with betas 0.9 / 0.999 and eps 1e-8.
    pub fn adam(learning_rate: f64) -> Self {
        Self::new(
            OptimKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
        )
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` is the gradient of `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor4<T>], grads: &[Option<&Tensor4<T>>]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            let g = grads.get(i).copied().flatten().ok_or(Error::MissingGradient(i))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("param #{i} is {} but its gradient is {}", p.shape(), g.shape()),
                ));
            }
        }
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| Tensor4::zeros(p.shape())).collect();
            self.second = match self.kind {
                OptimKind::Adam { .. } => params.iter().map(|p| Tensor4::zeros(p.shape())).collect(),
                OptimKind::Sgd { .. } => Vec::new(),
            };
        }
        self.step += 1;
        let lr = T::from_f64_lossy(self.learning_rate);
        match self.kind {
            OptimKind::Sgd { momentum } => {
                let mu = T::from_f64_lossy(momentum);
                for (i, p) in params.iter_mut().enumerate() {
                    let g = grads[i].expect("checked above");
                    if momentum == 0.0 {
                        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                            *pv = *pv - lr * gv;
                        }
                    } else {
                        let buf = &mut self.first[i];
                        for ((pv, bv), &gv) in p
                            .data_mut()
                            .iter_mut()
                            .zip(buf.data_mut())
                            .zip(g.data())
                        {
                            *bv = mu * *bv + gv;
                            *pv = *pv - lr * *bv;
                        }
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = T::from_f64_lossy(1.0 - beta1.powi(t));
                let c2 = T::from_f64_lossy(1.0 - beta2.powi(t));
                let (b1, b2, e) = (
                    T::from_f64_lossy(beta1),
                    T::from_f64_lossy(beta2),
                    T::from_f64_lossy(eps),
                );
                for (i, p) in params.iter_mut().enumerate() {
                    let g = grads[i].expect("checked above");
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((pv, mv), vv), &gv) in
                        p.data_mut().iter_mut().zip(m).zip(v).zip(g.data())
                    {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv = *pv - lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn scalar(v: f64) -> Tensor4<f64> {
        Tensor4::scalar(v)
    }

    #[test]
    fn sgd_single_step() {
        let mut opt = OptimState::<f64>::sgd(0.1);
        let mut p = [scalar(1.0)];
        opt.step(&mut p, &[Some(&scalar(0.5))]).unwrap();
        assert!((p[0].data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let shape = Shape4::new(1, 2, 2, 2);
        let init = Tensor4::<f64>::from_fn(shape, |_, c, h, w| (c + h + w) as f64);
        for mut opt in [OptimState::<f64>::sgd(0.1), OptimState::adam(0.1)] {
            let mut p = [init.clone()];
            let g = Tensor4::zeros(shape);
            for _ in 0..3 {
                opt.step(&mut p, &[Some(&g)]).unwrap();
            }
            assert_eq!(p[0], init);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        // step 1: m̂ = g, v̂ = g² → Δ = lr·g/(|g| + eps)
        for g in [0.5, -3.0, 1e-3] {
            let mut opt = OptimState::<f64>::adam(1e-2);
            let mut p = [scalar(2.0)];
            opt.step(&mut p, &[Some(&scalar(g))]).unwrap();
            let expect = 2.0 - 1e-2 * g / (g.abs() + 1e-8);
            assert!((p[0].data()[0] - expect).abs() < 1e-12, "g = {g}");
        }
    }

    #[test]
    fn missing_and_mismatched_grads_error() {
        let mut opt = OptimState::<f64>::sgd(0.1);
        let mut p = [scalar(1.0), scalar(2.0)];
        let g = scalar(1.0);
        assert!(matches!(
            opt.step(&mut p, &[Some(&g)]),
            Err(Error::MissingGradient(1))
        ));
        assert!(matches!(
            opt.step(&mut p, &[Some(&g), None]),
            Err(Error::MissingGradient(1))
        ));
        let wrong = Tensor4::zeros(Shape4::new(1, 1, 1, 2));
        assert!(opt.step(&mut p, &[Some(&g), Some(&wrong)]).is_err());
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = OptimState::<f64>::new(OptimKind::Sgd { momentum: 0.9 }, 1.0);
        let mut p = [scalar(0.0)];
        let g = scalar(1.0);
        opt.step(&mut p, &[Some(&g)]).unwrap();
        opt.step(&mut p, &[Some(&g)]).unwrap();
        // buf: 1 then 1.9 → p = −2.9
        assert!((p[0].data()[0] + 2.9).abs() < 1e-12);
    }
}
