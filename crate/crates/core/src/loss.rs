//! Training objective: binary cross-entropy plus an uncertainty penalty
//! `1 - |2p - 1|^2` whose weight ramps up along a cosine curve.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Probability clamp used inside the logarithms.
pub const PROB_EPS: f64 = 1e-7;
pub const UAL_BASE_WEIGHT: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    #[default]
    CosineIncrease,
    /// λ fixed at 1.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub ual_base_weight: f64,
    pub lambda_schedule: LambdaSchedule,
    pub total_steps: u64,
    pub use_ual: bool,
}

impl LossConfig {
    pub fn new(total_steps: u64) -> Self {
        Self { ual_base_weight: UAL_BASE_WEIGHT, lambda_schedule: LambdaSchedule::CosineIncrease, total_steps, use_ual: true }
    }

    pub fn lambda(&self, step: u64) -> f64 {
        match self.lambda_schedule {
            LambdaSchedule::CosineIncrease => lambda_at(step, self.total_steps),
            LambdaSchedule::Constant => 1.0,
        }
    }
}

/// `0.5 (1 - cos(π step / total))`, clamped to [0, 1].
pub fn lambda_at(step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let r = (step as f64 / total_steps as f64).min(1.0);
    (0.5 * (1.0 - (std::f64::consts::PI * r).cos())).clamp(0.0, 1.0)
}

fn check_shapes<T: Scalar>(p: &Var<T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!("prediction {:?} and mask {:?} differ", p.shape(), g.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `p` against a binary mask.
pub fn bce<T: Scalar>(p: &Var<T>, g: &Tensor<T>) -> Result<Var<T>> {
    check_shapes(p, g)?;
    let eps: T = cast(PROB_EPS);
    let n: T = cast(p.value().numel() as f64);
    let pv = p.value();
    let mut total = T::zero();
    for (&pi, &gi) in pv.data().iter().zip(g.data()) {
        let q = pi.max(eps).min(T::one() - eps);
        total -= gi * q.ln() + (T::one() - gi) * (T::one() - q).ln();
    }
    let value = Tensor::scalar(total / n);
    Ok(Var::from_op(value, vec![p.clone()], {
        let g = g.clone();
        move |grad, parents| {
            let scale = grad.item() / n;
            let pv = parents[0].value();
            let dp = pv.zip_map(&g, |pi, gi| {
                if pi < eps || pi > T::one() - eps {
                    return T::zero();
                }
                scale * (-gi / pi + (T::one() - gi) / (T::one() - pi))
            });
            vec![Some(dp)]
        }
    }))
}

/// Cross-entropy computed from logits `z`: equal to [`bce`] of `sigmoid(z)`
/// wherever the clamp is inactive, with gradient `sigmoid(z) - g` everywhere.
pub fn bce_with_logits<T: Scalar>(z: &Var<T>, g: &Tensor<T>) -> Result<Var<T>> {
    check_shapes(z, g)?;
    let n: T = cast(z.value().numel() as f64);
    let total: T = z
        .value()
        .data()
        .iter()
        .zip(g.data())
        .map(|(&zi, &gi)| zi.max(T::zero()) - gi * zi + (-zi.abs()).exp().ln_1p())
        .sum();
    Ok(Var::from_op(Tensor::scalar(total / n), vec![z.clone()], {
        let g = g.clone();
        move |grad, parents| {
            let scale = grad.item() / n;
            vec![Some(parents[0].value().zip_map(&g, |zi, gi| scale * (crate::ops::sigmoid(zi) - gi)))]
        }
    }))
}

/// Mean of `1 - |2p - 1|^2`.
pub fn ual<T: Scalar>(p: &Var<T>) -> Var<T> {
    let two: T = cast(2.0);
    let n: T = cast(p.value().numel() as f64);
    let total: T = p.value().data().iter().map(|&pi| {
        let c = two * pi - T::one();
        T::one() - c * c
    }).sum();
    Var::from_op(Tensor::scalar(total / n), vec![p.clone()], move |grad, parents| {
        let scale = grad.item() / n;
        let four: T = cast(4.0);
        vec![Some(parents[0].value().map(|pi| -scale * four * (two * pi - T::one())))]
    })
}

/// Loss components at one step.
pub struct LossParts<T: Scalar> {
    pub total: Var<T>,
    pub bce: T,
    pub ual: T,
    pub lambda: f64,
}

pub fn total_loss<T: Scalar>(p: &Var<T>, g: &Tensor<T>, step: u64, cfg: &LossConfig) -> Result<LossParts<T>> {
    let b = bce(p, g)?;
    let bce_value = b.value().item();
    if !cfg.use_ual {
        return Ok(LossParts { total: b, bce: bce_value, ual: T::zero(), lambda: 0.0 });
    }
    let u = ual(p);
    let lambda = cfg.lambda(step);
    let total = b.add(&u.scale(cast(cfg.ual_base_weight * lambda)));
    Ok(LossParts { total, bce: bce_value, ual: u.value().item(), lambda })
}

/// [`total_loss`] evaluated from logits, with the cross-entropy term from
/// [`bce_with_logits`]. Used for training.
pub fn total_loss_logits<T: Scalar>(z: &Var<T>, g: &Tensor<T>, step: u64, cfg: &LossConfig) -> Result<LossParts<T>> {
    let b = bce_with_logits(z, g)?;
    let bce_value = b.value().item();
    if !cfg.use_ual {
        return Ok(LossParts { total: b, bce: bce_value, ual: T::zero(), lambda: 0.0 });
    }
    let u = ual(&z.sigmoid());
    let lambda = cfg.lambda(step);
    let total = b.add(&u.scale(cast(cfg.ual_base_weight * lambda)));
    Ok(LossParts { total, bce: bce_value, ual: u.value().item(), lambda })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(v: &[f64]) -> Var<f64> {
        Var::leaf(Tensor::from_f64(&[1, 1, 1, v.len()], v))
    }

    #[test]
    fn closed_forms() {
        let half = var(&[0.5; 4]);
        let ones = Tensor::ones(&[1, 1, 1, 4]);
        assert!((bce(&half, &ones).unwrap().value().item() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(ual(&half).value().item(), 1.0);
        assert_eq!(ual(&var(&[0.0, 1.0])).value().item(), 0.0);
        assert_eq!(ual(&var(&[0.75; 3])).value().item(), 0.75);
    }

    #[test]
    fn lambda_endpoints() {
        assert_eq!(lambda_at(0, 100), 0.0);
        assert!((lambda_at(100, 100) - 1.0).abs() < 1e-12);
        assert!((lambda_at(50, 100) - 0.5).abs() < 1e-12);
        assert_eq!(lambda_at(500, 100), 1.0);
    }

    #[test]
    fn total_at_end_and_start() {
        let cfg = LossConfig::new(10);
        let p = var(&[0.5; 4]);
        let g = Tensor::ones(&[1, 1, 1, 4]);
        let end = total_loss(&p, &g, 10, &cfg).unwrap();
        assert!((end.total.value().item() - (2f64.ln() + 1.5)).abs() < 1e-12);
        let start = total_loss(&p, &g, 0, &cfg).unwrap();
        assert_eq!(start.total.value().item(), start.bce);
    }

    #[test]
    fn logits_form_agrees_with_probability_form() {
        let z = [-3.0, -0.2, 0.0, 1.5, 4.0, 9.0];
        let g = Tensor::from_f64(&[1, 1, 1, 6], &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let zv = var(&z);
        let a = bce_with_logits(&zv, &g).unwrap().value().item();
        let b = bce(&zv.sigmoid(), &g).unwrap().value().item();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn shape_mismatch() {
        assert!(bce(&var(&[0.5; 4]), &Tensor::ones(&[1, 1, 2, 2])).is_err());
    }
}
