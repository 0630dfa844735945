//! Spatial pooling: adaptive average/max pooling and strided max pooling.

use crate::autograd::Var;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Half-open input window `[start, end)` feeding adaptive output cell `i`.
pub fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Routes an output gradient back to saved flat input indices.
fn scatter_argmax<T: Scalar>(gy: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in gy.data().iter().zip(argmax) {
        d[i] += g;
    }
    dx
}

impl<T: Scalar> Var<T> {
    pub fn adaptive_avg_pool(&self, oh: usize, ow: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        assert!(oh >= 1 && ow >= 1, "adaptive pooling to an empty grid");
        let xd = self.value().data();
        let mut y = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let (y0, y1) = adaptive_window(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_window(ox, w, ow);
                    let mut s = T::zero();
                    for iy in y0..y1 {
                        s += xd[base + iy * w + x0..base + iy * w + x1].iter().copied().sum::<T>();
                    }
                    y.push(s / cast(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        Var::from_op(Tensor::from_vec(&[n, c, oh, ow], y), vec![self.clone()], move |gy, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let d = dx.data_mut();
            let g = gy.data();
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    let (y0, y1) = adaptive_window(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = adaptive_window(ox, w, ow);
                        let share = g[(plane * oh + oy) * ow + ox] / cast(((y1 - y0) * (x1 - x0)) as f64);
                        for iy in y0..y1 {
                            for v in &mut d[base + iy * w + x0..base + iy * w + x1] {
                                *v += share;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn adaptive_max_pool(&self, oh: usize, ow: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        assert!(oh >= 1 && ow >= 1, "adaptive pooling to an empty grid");
        let xd = self.value().data();
        let mut y = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let (y0, y1) = adaptive_window(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_window(ox, w, ow);
                    let mut best = base + y0 * w + x0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let i = base + iy * w + ix;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    y.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = self.shape().to_vec();
        Var::from_op(Tensor::from_vec(&[n, c, oh, ow], y), vec![self.clone()], move |gy, _| {
            vec![Some(scatter_argmax(gy, &argmax, &shape))]
        })
    }

    /// Global average pooling to `[N, C, 1, 1]`.
    pub fn global_avg_pool(&self) -> Var<T> {
        self.adaptive_avg_pool(1, 1)
    }

    /// Max pooling with a square window and implicit `-inf` padding.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let xd = self.value().data();
        let mut y = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best: Option<usize> = None;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if best.is_none_or(|b| xd[i] > xd[b]) {
                                best = Some(i);
                            }
                        }
                    }
                    let b = best.expect("pool window inside input");
                    y.push(xd[b]);
                    argmax.push(b);
                }
            }
        }
        let shape = self.shape().to_vec();
        Var::from_op(Tensor::from_vec(&[n, c, ho, wo], y), vec![self.clone()], move |gy, _| {
            vec![Some(scatter_argmax(gy, &argmax, &shape))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_windows_cover_input() {
        assert_eq!(adaptive_window(0, 14, 12), (0, 2));
        assert_eq!(adaptive_window(11, 14, 12), (12, 14));
        assert_eq!(adaptive_window(0, 4, 3), (0, 2));
        assert_eq!(adaptive_window(1, 4, 3), (1, 3));
        assert_eq!(adaptive_window(2, 4, 3), (2, 4));
    }

    #[test]
    fn max_pool_stride_two_halves_with_ceil() {
        let x = Var::constant(Tensor::<f32>::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f32).collect()));
        let y = x.max_pool2d(3, 2, 1);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.value().data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn constant_field_pools_to_itself() {
        let x = Var::constant(Tensor::<f64>::full(&[1, 2, 5, 5], 3.5));
        let a = x.adaptive_avg_pool(3, 3);
        let m = x.adaptive_max_pool(3, 3);
        assert!(a.value().data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
        assert!(m.value().data().iter().all(|&v| v == 3.5));
    }
}
