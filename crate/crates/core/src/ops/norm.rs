//! Batch normalization over the channel axis of NCHW tensors.

use crate::autograd::Var;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Per-channel statistics of the current batch.
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (used for running-stat updates).
    pub var_unbiased: Vec<T>,
}

/// Normalizes with batch statistics. Returns the output and the batch moments.
pub fn batch_norm_train<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: T,
) -> (Var<T>, BatchMoments<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let m = n * hw;
    let mf: T = cast(m as f64);
    let xd = x.value().data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
        let mu = s / mf;
        let mut q = T::zero();
        for b in 0..n {
            for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                q += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = q / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let v = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                y[i] = v * gd[ch] + bd[ch];
            }
        }
    }
    let var_unbiased = if m > 1 {
        let corr: T = cast(m as f64 / (m as f64 - 1.0));
        var.iter().map(|&v| v * corr).collect()
    } else {
        var.clone()
    };
    let xhat = Tensor::from_vec(x.shape(), xhat);
    let out = Var::from_op(
        Tensor::from_vec(x.shape(), y),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gy, p| {
            let gyd = gy.data();
            let xh = xhat.data();
            let gd = p[1].value().data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        dgamma[ch] += gyd[i] * xh[i];
                        dbeta[ch] += gyd[i];
                    }
                }
            }
            let dx = p[0].requires_grad().then(|| {
                let mut dx = vec![T::zero(); gyd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        let scale = gd[ch] * inv_std[ch] / mf;
                        for i in off..off + hw {
                            dx[i] = scale * (mf * gyd[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                        }
                    }
                }
                Tensor::from_vec(gy.shape(), dx)
            });
            vec![dx, Some(Tensor::from_vec(&[c], dgamma)), Some(Tensor::from_vec(&[c], dbeta))]
        },
    );
    (out, BatchMoments { mean, var_unbiased })
}

/// Normalizes with fixed (running) statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Var<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = running_mean.data().to_vec();
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let xd = x.value().data();
    let mut y = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (s, t) = (gd[ch] * inv_std[ch], bd[ch] - mean[ch] * gd[ch] * inv_std[ch]);
            for i in off..off + hw {
                y[i] = xd[i] * s + t;
            }
        }
    }
    Var::from_op(
        Tensor::from_vec(x.shape(), y),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gy, p| {
            let gyd = gy.data();
            let xd = p[0].value().data();
            let gd = p[1].value().data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); gyd.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        dgamma[ch] += gyd[i] * (xd[i] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gyd[i];
                        dx[i] = gyd[i] * gd[ch] * inv_std[ch];
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(gy.shape(), dx)),
                Some(Tensor::from_vec(&[c], dgamma)),
                Some(Tensor::from_vec(&[c], dbeta)),
            ]
        },
    )
}
