//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use crate::autograd::Var;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Source taps `(i0, i1, frac)` for one output coordinate.
pub fn bilinear_taps(out_index: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let scale = input as f64 / output as f64;
    let src = ((out_index as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(input - 1);
    let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize of a plain tensor.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    Var::constant(x.clone()).resize_bilinear(oh, ow).value().clone()
}

impl<T: Scalar> Var<T> {
    /// Bilinear resize to `oh × ow`; identity when the size already matches.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        assert!(oh >= 1 && ow >= 1, "resize to an empty grid");
        if (h, w) == (oh, ow) {
            return self.clone();
        }
        let ys: Vec<(usize, usize, T)> = (0..oh)
            .map(|i| {
                let (a, b, f) = bilinear_taps(i, h, oh);
                (a, b, cast(f))
            })
            .collect();
        let xs: Vec<(usize, usize, T)> = (0..ow)
            .map(|i| {
                let (a, b, f) = bilinear_taps(i, w, ow);
                (a, b, cast(f))
            })
            .collect();
        let xd = self.value().data();
        let mut y = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let p = &xd[plane * h * w..(plane + 1) * h * w];
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = p[y0 * w + x0] * (T::one() - fx) + p[y0 * w + x1] * fx;
                    let bot = p[y1 * w + x0] * (T::one() - fx) + p[y1 * w + x1] * fx;
                    y.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        Var::from_op(Tensor::from_vec(&[n, c, oh, ow], y), vec![self.clone()], move |gy, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let d = dx.data_mut();
            let g = gy.data();
            for plane in 0..n * c {
                let p = &mut d[plane * h * w..(plane + 1) * h * w];
                let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let v = gp[oy * ow + ox];
                        let (top, bot) = (v * (T::one() - fy), v * fy);
                        p[y0 * w + x0] += top * (T::one() - fx);
                        p[y0 * w + x1] += top * fx;
                        p[y1 * w + x0] += bot * (T::one() - fx);
                        p[y1 * w + x1] += bot * fx;
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_stays_constant() {
        let x = Var::constant(Tensor::<f64>::full(&[1, 1, 8, 8], 2.25));
        let y = x.resize_bilinear(12, 12);
        assert!(y.value().data().iter().all(|&v| (v - 2.25).abs() < 1e-12));
    }

    #[test]
    fn upsample_by_two_uses_quarter_weights() {
        // 1x2 -> 1x4: outputs at source coords -0.25(clamped 0), 0.25, 0.75, 1.25(->1)
        let x = Var::constant(Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![0.0, 4.0]));
        let y = x.resize_bilinear(1, 4);
        assert_eq!(y.value().data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn gradient_is_adjoint_of_forward() {
        // <R(x), g> == <x, R^T(g)> for linear R
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
        let g = Tensor::<f64>::from_vec(&[1, 1, 3, 5], (0..15).map(|v| (v as f64).sin()).collect());
        let xv = Var::leaf(x.clone());
        let y = xv.resize_bilinear(3, 5);
        let lhs: f64 = y.value().data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        y.backward_with(g);
        let rhs: f64 = x.data().iter().zip(xv.grad().unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
