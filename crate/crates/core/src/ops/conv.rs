//! 2-D convolution via im2col + GEMM, with groups, stride, padding and dilation.

use crate::autograd::Var;
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

/// Cap on im2col buffer size (elements); larger outputs are processed in row bands.
const COLS_LIMIT: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dOpts {
    /// Stride-1 convolution that preserves spatial size for odd `kernel`.
    pub fn same(kernel: usize) -> Self {
        Self { padding: kernel / 2, ..Self::default() }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }
}

/// Output spatial extent along one axis.
pub fn conv_out_size(input: usize, kernel: usize, opts: &Conv2dOpts) -> usize {
    let span = opts.dilation * (kernel - 1) + 1;
    let padded = input + 2 * opts.padding;
    assert!(padded >= span, "convolution kernel span {span} exceeds padded input {padded}");
    (padded - span) / opts.stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cg: usize,
    cog: usize,
    opts: Conv2dOpts,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    fn band_rows(&self) -> usize {
        (COLS_LIMIT / (self.k() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Offset of channel `ch` of sample `b` in the input.
    fn x_off(&self, b: usize, ch: usize) -> usize {
        (b * self.c + ch) * self.h * self.w
    }

    fn y_off(&self, b: usize, ch: usize) -> usize {
        (b * self.co + ch) * self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, oy0: usize, oy1: usize, cols: &mut [T]) {
    let ncols = (oy1 - oy0) * g.wo;
    let (s, p, d) = (g.opts.stride as isize, g.opts.padding as isize, g.opts.dilation as isize);
    for c in 0..g.cg {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in oy0..oy1 {
                    let seg = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    let iy = oy as isize * s + ki as isize * d - p;
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize * d - p;
                        *v = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, oy0: usize, oy1: usize, dx: &mut [T]) {
    let ncols = (oy1 - oy0) * g.wo;
    let (s, p, d) = (g.opts.stride as isize, g.opts.padding as isize, g.opts.dilation as isize);
    for c in 0..g.cg {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in oy0..oy1 {
                    let iy = oy as isize * s + ki as isize * d - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let seg = &src[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = ox as isize * s + kj as isize * d - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Geometry) -> Vec<T> {
    let mut y = vec![T::zero(); g.n * g.co * g.ho * g.wo];
    let k = g.k();
    let howo = g.ho * g.wo;
    let groups = g.opts.groups;
    let band = g.band_rows();
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * band * g.wo] };
    for b in 0..g.n {
        for gi in 0..groups {
            let wg = &w.data()[gi * g.cog * k..(gi + 1) * g.cog * k];
            let xg = &x.data()[g.x_off(b, gi * g.cg)..g.x_off(b, (gi + 1) * g.cg)];
            let yoff = g.y_off(b, gi * g.cog);
            if g.pointwise() {
                gemm(g.cog, k, howo, T::one(), Mat::new(wg, k), Mat::new(xg, howo), T::zero(), &mut y[yoff..], howo);
                continue;
            }
            let mut oy0 = 0;
            while oy0 < g.ho {
                let oy1 = (oy0 + band).min(g.ho);
                let ncols = (oy1 - oy0) * g.wo;
                im2col(xg, g, oy0, oy1, &mut cols[..k * ncols]);
                gemm(
                    g.cog,
                    k,
                    ncols,
                    T::one(),
                    Mat::new(wg, k),
                    Mat::new(&cols[..k * ncols], ncols),
                    T::zero(),
                    &mut y[yoff + oy0 * g.wo..],
                    howo,
                );
                oy0 = oy1;
            }
        }
    }
    y
}

/// Returns `(dx, dw)`; each is computed only when requested.
fn backward<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Geometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let k = g.k();
    let howo = g.ho * g.wo;
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.numel()]);
    let band = g.band_rows();
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * band * g.wo] };
    let gyd = gy.data();
    for b in 0..g.n {
        for gi in 0..g.opts.groups {
            let wg = &w.data()[gi * g.cog * k..(gi + 1) * g.cog * k];
            let xr = g.x_off(b, gi * g.cg)..g.x_off(b, (gi + 1) * g.cg);
            let xg = &x.data()[xr.clone()];
            let yoff = g.y_off(b, gi * g.cog);
            if g.pointwise() {
                if let Some(dw) = dw.as_mut() {
                    let dwg = &mut dw[gi * g.cog * k..(gi + 1) * g.cog * k];
                    gemm(g.cog, howo, k, T::one(), Mat::new(&gyd[yoff..], howo), Mat::t(xg, howo), T::one(), dwg, k);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(k, g.cog, howo, T::one(), Mat::t(wg, k), Mat::new(&gyd[yoff..], howo), T::zero(), &mut dx[xr], howo);
                }
                continue;
            }
            let mut oy0 = 0;
            while oy0 < g.ho {
                let oy1 = (oy0 + band).min(g.ho);
                let ncols = (oy1 - oy0) * g.wo;
                let gband = &gyd[yoff + oy0 * g.wo..];
                if let Some(dw) = dw.as_mut() {
                    im2col(xg, g, oy0, oy1, &mut cols[..k * ncols]);
                    let dwg = &mut dw[gi * g.cog * k..(gi + 1) * g.cog * k];
                    gemm(g.cog, ncols, k, T::one(), Mat::new(gband, howo), Mat::t(&cols[..k * ncols], ncols), T::one(), dwg, k);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(k, g.cog, ncols, T::one(), Mat::t(wg, k), Mat::new(gband, howo), T::zero(), &mut cols[..k * ncols], ncols);
                    col2im(&cols[..k * ncols], g, oy0, oy1, &mut dx[xr.clone()]);
                }
                oy0 = oy1;
            }
        }
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d)),
        dw.map(|d| Tensor::from_vec(w.shape(), d)),
    )
}

/// Cross-correlation of `x: [N, C, H, W]` with `weight: [Co, C/groups, kh, kw]`.
pub fn conv2d<T: Scalar>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>, opts: Conv2dOpts) -> Var<T> {
    let (n, c, h, w) = x.dims4();
    let (co, cg, kh, kw) = weight.dims4();
    let groups = opts.groups;
    assert!(groups >= 1 && c % groups == 0 && co % groups == 0, "bad group count {groups} for {c}->{co}");
    assert_eq!(cg, c / groups, "weight expects {} input channels per group, input has {}", cg, c / groups);
    let geo = Geometry {
        n,
        c,
        h,
        w,
        co,
        kh,
        kw,
        ho: conv_out_size(h, kh, &opts),
        wo: conv_out_size(w, kw, &opts),
        cg,
        cog: co / groups,
        opts,
    };
    let mut y = forward(x.value(), weight.value(), &geo);
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[co], "bias shape");
        let howo = geo.ho * geo.wo;
        for bi in 0..n {
            for (o, &bv) in b.value().data().iter().enumerate() {
                let off = geo.y_off(bi, o);
                for v in &mut y[off..off + howo] {
                    *v += bv;
                }
            }
        }
        parents.push(b.clone());
    }
    let value = Tensor::from_vec(&[n, co, geo.ho, geo.wo], y);
    Var::from_op(value, parents, move |gy, p| {
        let (dx, dw) = backward(gy, p[0].value(), p[1].value(), &geo, p[0].requires_grad(), p[1].requires_grad());
        let mut grads = vec![dx, dw];
        if p.len() == 3 {
            let howo = geo.ho * geo.wo;
            let mut db = vec![T::zero(); geo.co];
            for bi in 0..geo.n {
                for (o, acc) in db.iter_mut().enumerate() {
                    let off = geo.y_off(bi, o);
                    *acc += gy.data()[off..off + howo].iter().copied().sum::<T>();
                }
            }
            grads.push(Some(Tensor::from_vec(&[geo.co], db)));
        }
        grads
    })
}
