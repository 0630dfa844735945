//! Pointwise and reduction operations.

use crate::autograd::Var;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "shapes {a:?} and {b:?} do not broadcast");
            x.max(y)
        })
        .collect()
}

/// Row-major strides with zero stride on broadcast (size-1) axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let (ad, bd) = (a.data(), b.data());
    for _ in 0..n {
        let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        data.push(f(ad[ia], bd[ib]));
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out, data)
}

/// Sums `grad` over the axes along which `shape` was broadcast.
pub(crate) fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape();
    let strides = broadcast_strides(shape, out);
    let mut acc = Tensor::zeros(shape);
    let mut idx = vec![0usize; out.len()];
    let dst = acc.data_mut();
    for &g in grad.data() {
        let i: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        dst[i] += g;
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    acc
}

impl<T: Scalar> Var<T> {
    /// Broadcasting sum.
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = binary(self.value(), other.value(), |a, b| a + b);
        Var::from_op(value, vec![self.clone(), other.clone()], |g, p| {
            vec![Some(reduce_to(g, p[0].shape())), Some(reduce_to(g, p[1].shape()))]
        })
    }

    /// Broadcasting difference.
    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = binary(self.value(), other.value(), |a, b| a - b);
        Var::from_op(value, vec![self.clone(), other.clone()], |g, p| {
            let neg = g.map(|v| -v);
            vec![Some(reduce_to(g, p[0].shape())), Some(reduce_to(&neg, p[1].shape()))]
        })
    }

    /// Broadcasting product.
    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let value = binary(self.value(), other.value(), |a, b| a * b);
        Var::from_op(value, vec![self.clone(), other.clone()], |g, p| {
            let ga = p[0].requires_grad().then(|| {
                reduce_to(&binary(g, p[1].value(), |a, b| a * b), p[0].shape())
            });
            let gb = p[1].requires_grad().then(|| {
                reduce_to(&binary(g, p[0].value(), |a, b| a * b), p[1].shape())
            });
            vec![ga, gb]
        })
    }

    pub fn scale(&self, factor: T) -> Var<T> {
        let value = self.value().map(|v| v * factor);
        Var::from_op(value, vec![self.clone()], move |g, _| vec![Some(g.map(|v| v * factor))])
    }

    pub fn relu(&self) -> Var<T> {
        let value = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        Var::from_op(value, vec![self.clone()], |g, p| {
            vec![Some(g.zip_map(p[0].value(), |g, x| if x > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let value = self.value().map(sigmoid);
        let out = value.clone();
        Var::from_op(value, vec![self.clone()], move |g, _| {
            vec![Some(g.zip_map(&out, |g, y| g * y * (T::one() - y)))]
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<T> {
        let value = Tensor::scalar(self.value().sum());
        Var::from_op(value, vec![self.clone()], |g, p| {
            vec![Some(Tensor::full(p[0].shape(), g.item()))]
        })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Var<T> {
        let n: T = cast(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Softmax across axis 1 of an NCHW tensor.
    pub fn softmax_channels(&self) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let hw = h * w;
        let x = self.value().data();
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            let base = b * c * hw;
            for s in 0..hw {
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(x[base + k * hw + s]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (x[base + k * hw + s] - m).exp();
                    y[base + k * hw + s] = e;
                    z += e;
                }
                for k in 0..c {
                    y[base + k * hw + s] /= z;
                }
            }
        }
        let value = Tensor::from_vec(self.shape(), y);
        let out = value.clone();
        Var::from_op(value, vec![self.clone()], move |g, _| {
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![T::zero(); y.len()];
            for b in 0..n {
                let base = b * c * hw;
                for s in 0..hw {
                    let dot: T = (0..c).map(|k| gd[base + k * hw + s] * y[base + k * hw + s]).sum();
                    for k in 0..c {
                        let i = base + k * hw + s;
                        dx[i] = y[i] * (gd[i] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_vec(out.shape(), dx))]
        })
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_mul_gradients_reduce() {
        let a = Var::leaf(Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = Var::leaf(Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![10.0, -1.0]));
        let y = a.mul(&w);
        assert_eq!(y.value().data(), &[10.0, 20.0, -3.0, -4.0]);
        y.sum().backward();
        assert_eq!(w.grad().unwrap().data(), &[3.0, 7.0]);
        assert_eq!(a.grad().unwrap().data(), &[10.0, 10.0, -1.0, -1.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::<f64>::from_vec(&[1, 3, 1, 2], vec![0.0, 5.0, 1.0, -5.0, 2.0, 0.0]);
        let y = Var::constant(x).softmax_channels();
        for s in 0..2 {
            let total: f64 = (0..3).map(|k| y.value().at4(0, k, 0, s)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
