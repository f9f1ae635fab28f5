use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Element, Tensor4};

/// Additive smoothing `s` in the soft-dice term.
pub const DICE_SMOOTH: f64 = 1.0;

/// Segmentation loss and its gradient with respect to the logits.
///
/// `loss = mean BCE-with-logits + mean over samples of soft-dice`, where
/// soft-dice = `1 − (2Σpt + s)/(Σp + Σt + s)` with `p = sigmoid(logit)`.
pub fn seg_loss_with_grad<T: Element>(
    logits: &Tensor4<T>,
    target: &Tensor4<T>,
) -> Result<(T, Tensor4<T>)> {
    let s = logits.shape();
    if s != target.shape() {
        return Err(Error::shape(
            "loss_seg",
            format!("logits {s} vs target {}", target.shape()),
        ));
    }
    if s.c != 1 {
        return Err(Error::shape(
            "loss_seg",
            format!("expected single-channel logits, got {} channels", s.c),
        ));
    }
    if let Some(bad) = target
        .data()
        .iter()
        .find(|&&t| t != T::zero() && t != T::one())
    {
        return Err(Error::invalid(
            "loss_seg",
            format!("target values must be 0 or 1, found {bad}"),
        ));
    }
    let total = T::from_f64_lossy(s.numel() as f64);
    let batch = T::from_f64_lossy(s.n as f64);
    let smooth = T::from_f64_lossy(DICE_SMOOTH);
    let two = T::from_f64_lossy(2.0);
    let p = s.plane();

    let mut bce = T::zero();
    let mut dice = T::zero();
    let mut grad = Tensor4::zeros(s);
    for n in 0..s.n {
        let l = logits.plane(n, 0);
        let t = target.plane(n, 0);
        let probs: Vec<T> = l.iter().map(|&v| sigmoid(v)).collect();
        let (mut sp, mut st, mut inter) = (T::zero(), T::zero(), T::zero());
        for ((&lv, &tv), &pv) in l.iter().zip(t).zip(&probs) {
            bce = bce + lv.max(T::zero()) - lv * tv + (T::one() + (-lv.abs()).exp()).ln();
            sp = sp + pv;
            st = st + tv;
            inter = inter + pv * tv;
        }
        let denom = sp + st + smooth;
        let numer = two * inter + smooth;
        dice = dice + (T::one() - numer / denom);
        let g = &mut grad.data_mut()[n * p..(n + 1) * p];
        for ((gv, &tv), &pv) in g.iter_mut().zip(t).zip(&probs) {
            let d_bce = (pv - tv) / total;
            let d_dice_dp = -(two * tv * denom - numer) / (denom * denom);
            *gv = d_bce + d_dice_dp * pv * (T::one() - pv) / batch;
        }
    }
    Ok((bce / total + dice / batch, grad))
}

/// Binary cross-entropy with logits plus soft-dice (equal weights, `s = 1`).
pub fn loss_seg<T: Element>(logits: &Tensor4<T>, target: &Tensor4<T>) -> Result<T> {
    seg_loss_with_grad(logits, target).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let target = Tensor4::<f64>::from_fn(Shape4::new(2, 1, 4, 4), |n, _, h, w| {
            ((h + w + n) % 2) as f64
        });
        let logits = target.map(|t| if t == 1.0 { 100.0 } else { -100.0 });
        assert!(loss_seg(&logits, &target).unwrap() <= 1e-3);
    }

    #[test]
    fn zero_logits_give_ln2_bce() {
        let target = Tensor4::<f64>::ones(Shape4::new(1, 1, 3, 5));
        let logits = Tensor4::<f64>::zeros(target.shape());
        // BCE = ln 2; dice = 1 − (2·7.5 + 1)/(7.5 + 15 + 1)
        let dice = 1.0 - (2.0 * 7.5 + 1.0) / (7.5 + 15.0 + 1.0);
        let l = loss_seg(&logits, &target).unwrap();
        assert!((l - (std::f64::consts::LN_2 + dice)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_binary_targets() {
        let target = Tensor4::<f32>::full(Shape4::new(1, 1, 2, 2), 0.5);
        let err = loss_seg(&Tensor4::zeros(target.shape()), &target).unwrap_err();
        assert!(err.to_string().contains("0 or 1"));
    }
}
