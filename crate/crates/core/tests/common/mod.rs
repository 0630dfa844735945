//! Straight-loop reference implementations used as oracles. Nothing here
//! calls the crate's tensor operations; weights are read from the parameter
//! store by name.
#![allow(dead_code)]

use mgnet::nn::ParamStore;
use mgnet::Tensor;
use rand::Rng;

/// Dense `[n, c, h, w]` array of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct A4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl A4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, d: vec![0.0; n * c * h * w] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let (n, c, h, w) = t.dims4();
        Self { n, c, h, w, d: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.n, self.c, self.h, self.w], self.d.clone())
    }

    pub fn idx(&self, b: usize, ch: usize, y: usize, x: usize) -> usize {
        ((b * self.c + ch) * self.h + y) * self.w + x
    }

    pub fn at(&self, b: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.d[self.idx(b, ch, y, x)]
    }

    pub fn set(&mut self, b: usize, ch: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(b, ch, y, x);
        self.d[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { d: self.d.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn add(&self, o: &A4) -> Self {
        assert_eq!((self.n, self.c, self.h, self.w), (o.n, o.c, o.h, o.w));
        Self { d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(), ..self.clone() }
    }
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get(name).unwrap_or_else(|| panic!("no parameter {name}")).data().to_vec()
}

pub fn buffer(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get_buffer(name).unwrap_or_else(|| panic!("no buffer {name}")).data().to_vec()
}

/// Overwrites every parameter and buffer with random values so batch norm
/// and biases are not identities.
pub fn randomize<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R, scale: f64) {
    let params: Vec<String> = store.param_names().map(String::from).collect();
    for name in params {
        let shape = store.shape_of(&name).unwrap();
        store.set(&name, Tensor::randn(&shape, scale, rng)).unwrap();
    }
    let buffers: Vec<String> = store.buffer_names().map(String::from).collect();
    for name in buffers {
        let shape = store.shape_of(&name).unwrap();
        let t = if name.ends_with("running_var") {
            Tensor::rand_uniform(&shape, 0.5, 1.5, rng)
        } else {
            Tensor::randn(&shape, 0.2, rng)
        };
        store.set(&name, t).unwrap();
    }
}

/// Dense cross-correlation with zero padding.
pub fn conv(x: &A4, wt: &[f64], bias: Option<&[f64]>, co: usize, k: usize, pad: usize, dil: usize) -> A4 {
    let span = dil * (k - 1) + 1;
    let ho = x.h + 2 * pad - span + 1;
    let wo = x.w + 2 * pad - span + 1;
    let mut y = A4::zeros(x.n, co, ho, wo);
    for b in 0..x.n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for i in 0..x.c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy + ki * dil) as isize - pad as isize;
                                let ix = (ox + kj * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += x.at(b, i, iy as usize, ix as usize) * wt[((o * x.c + i) * k + ki) * k + kj];
                            }
                        }
                    }
                    y.set(b, o, oy, ox, acc);
                }
            }
        }
    }
    y
}

pub fn bn_eval(x: &A4, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> A4 {
    let mut y = x.clone();
    for b in 0..x.n {
        for ch in 0..x.c {
            for yy in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.at(b, ch, yy, xx) - mean[ch]) / (var[ch] + 1e-5).sqrt() * gamma[ch] + beta[ch];
                    y.set(b, ch, yy, xx, v);
                }
            }
        }
    }
    y
}

pub fn relu(x: &A4) -> A4 {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Conv (no bias) + eval-mode BN + ReLU with weights under `prefix`.
pub fn cbr(store: &ParamStore<f64>, prefix: &str, x: &A4, k: usize) -> A4 {
    let w = param(store, &format!("{prefix}.conv.weight"));
    let co = w.len() / (x.c * k * k);
    let y = conv(x, &w, None, co, k, k / 2, 1);
    relu(&bn_eval(
        &y,
        &param(store, &format!("{prefix}.bn.weight")),
        &param(store, &format!("{prefix}.bn.bias")),
        &buffer(store, &format!("{prefix}.bn.running_mean")),
        &buffer(store, &format!("{prefix}.bn.running_var")),
    ))
}

/// Conv with bias under `prefix`.
pub fn conv_b(store: &ParamStore<f64>, prefix: &str, x: &A4, k: usize, pad: usize, dil: usize) -> A4 {
    let w = param(store, &format!("{prefix}.weight"));
    let b = param(store, &format!("{prefix}.bias"));
    conv(x, &w, Some(&b), b.len(), k, pad, dil)
}

pub fn concat(parts: &[&A4]) -> A4 {
    let c: usize = parts.iter().map(|p| p.c).sum();
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let mut y = A4::zeros(n, c, h, w);
    for b in 0..n {
        let mut off = 0;
        for p in parts {
            for ch in 0..p.c {
                for yy in 0..h {
                    for xx in 0..w {
                        y.set(b, off + ch, yy, xx, p.at(b, ch, yy, xx));
                    }
                }
            }
            off += p.c;
        }
    }
    y
}

pub fn split(x: &A4, parts: usize) -> Vec<A4> {
    let c = x.c / parts;
    (0..parts)
        .map(|p| {
            let mut y = A4::zeros(x.n, c, x.h, x.w);
            for b in 0..x.n {
                for ch in 0..c {
                    for yy in 0..x.h {
                        for xx in 0..x.w {
                            y.set(b, ch, yy, xx, x.at(b, p * c + ch, yy, xx));
                        }
                    }
                }
            }
            y
        })
        .collect()
}

/// Half-pixel bilinear resampling written out per output pixel.
pub fn bilinear(x: &A4, oh: usize, ow: usize) -> A4 {
    let src = |o: usize, inp: usize, out: usize| {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut y = A4::zeros(x.n, x.c, oh, ow);
    for b in 0..x.n {
        for ch in 0..x.c {
            for oy in 0..oh {
                let (y0, y1, fy) = src(oy, x.h, oh);
                for ox in 0..ow {
                    let (x0, x1, fx) = src(ox, x.w, ow);
                    let top = x.at(b, ch, y0, x0) * (1.0 - fx) + x.at(b, ch, y0, x1) * fx;
                    let bot = x.at(b, ch, y1, x0) * (1.0 - fx) + x.at(b, ch, y1, x1) * fx;
                    y.set(b, ch, oy, ox, top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    y
}

pub fn global_avg(x: &A4) -> A4 {
    let mut y = A4::zeros(x.n, x.c, 1, 1);
    for b in 0..x.n {
        for ch in 0..x.c {
            let mut s = 0.0;
            for yy in 0..x.h {
                for xx in 0..x.w {
                    s += x.at(b, ch, yy, xx);
                }
            }
            y.set(b, ch, 0, 0, s / (x.h * x.w) as f64);
        }
    }
    y
}

/// Pooling window bounds `[floor(i·in/out), ceil((i+1)·in/out))`.
pub fn window(i: usize, inp: usize, out: usize) -> (usize, usize) {
    ((i * inp) / out, ((i + 1) * inp).div_ceil(out))
}

pub fn adaptive_pool(x: &A4, oh: usize, ow: usize, max: bool) -> A4 {
    let mut y = A4::zeros(x.n, x.c, oh, ow);
    for b in 0..x.n {
        for ch in 0..x.c {
            for oy in 0..oh {
                let (y0, y1) = window(oy, x.h, oh);
                for ox in 0..ow {
                    let (x0, x1) = window(ox, x.w, ow);
                    let mut vals = Vec::new();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            vals.push(x.at(b, ch, yy, xx));
                        }
                    }
                    let v = if max {
                        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    };
                    y.set(b, ch, oy, ox, v);
                }
            }
        }
    }
    y
}

/// Attention weights and fused output for one level, given aligned branches.
pub fn frm_fuse(store: &ParamStore<f64>, gen: &str, f12: &A4, f10: &A4, f07: &A4) -> (A4, A4) {
    let mut y = concat(&[f12, f10, f07]);
    for i in 1..=3 {
        y = cbr(store, &format!("{gen}.cbr{i}"), &y, 3);
    }
    let logits = conv_b(store, &format!("{gen}.head"), &y, 1, 0, 1);
    let mut att = logits.clone();
    let mut out = f10.clone();
    for b in 0..f10.n {
        for yy in 0..f10.h {
            for xx in 0..f10.w {
                let l: Vec<f64> = (0..3).map(|k| logits.at(b, k, yy, xx)).collect();
                let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for k in 0..3 {
                    att.set(b, k, yy, xx, e[k] / s);
                }
                for ch in 0..f10.c {
                    let v = e[0] / s * f12.at(b, ch, yy, xx) + e[1] / s * f10.at(b, ch, yy, xx) + e[2] / s * f07.at(b, ch, yy, xx);
                    out.set(b, ch, yy, xx, v);
                }
            }
        }
    }
    (out, att)
}

/// Chunk interaction of one decoder unit with carried middle sub-features.
pub fn hcdu_pyramid(store: &ParamStore<f64>, u: &str, f: &A4) -> A4 {
    let k = split(&cbr(store, &format!("{u}.expand"), f, 1), 6);
    let mut firsts = Vec::new();
    let mut lasts = Vec::new();
    let s1 = split(&cbr(store, &format!("{u}.solo_first"), &k[0], 3), 2);
    firsts.push(s1[0].clone());
    lasts.push(s1[1].clone());
    let mut carry = k[0].clone();
    for j in 1..=5 {
        let g = split(&cbr(store, &format!("{u}.pair{j}"), &concat(&[&carry, &k[j]]), 3), 3);
        firsts.push(g[0].clone());
        lasts.push(g[2].clone());
        carry = g[1].clone();
    }
    let s6 = split(&cbr(store, &format!("{u}.solo_last"), &k[5], 3), 2);
    firsts.push(s6[0].clone());
    lasts.push(s6[1].clone());
    let t = concat(&firsts.iter().collect::<Vec<_>>());
    let m = concat(&lasts.iter().collect::<Vec<_>>());
    let z = relu(&conv_b(store, &format!("{u}.weight_gen.squeeze"), &global_avg(&m), 1, 0, 1));
    let wgt = conv_b(store, &format!("{u}.weight_gen.excite"), &z, 1, 0, 1).map(sigmoid);
    let mut gated = t.clone();
    for b in 0..t.n {
        for ch in 0..t.c {
            for yy in 0..t.h {
                for xx in 0..t.w {
                    gated.set(b, ch, yy, xx, t.at(b, ch, yy, xx) * wgt.at(b, ch, 0, 0));
                }
            }
        }
    }
    let w = param(store, &format!("{u}.fuse_conv.weight"));
    let y = conv(&gated, &w, None, f.c, 3, 1, 1);
    let y = bn_eval(
        &y,
        &param(store, &format!("{u}.fuse_bn.weight")),
        &param(store, &format!("{u}.fuse_bn.bias")),
        &buffer(store, &format!("{u}.fuse_bn.running_mean")),
        &buffer(store, &format!("{u}.fuse_bn.running_var")),
    );
    relu(&f.add(&y))
}

/// One refinement step.
pub fn ppg_step(store: &ParamStore<f64>, p: &str, x: &A4, m: &A4) -> A4 {
    let block = |name: &str, inp: &A4| {
        let h = relu(&conv_b(store, &format!("{p}.{name}.conv_a"), inp, 3, 1, 1));
        relu(&conv_b(store, &format!("{p}.{name}.conv_b"), &h, 3, 1, 1))
    };
    let k1 = x.add(&block("block1", &concat(&[x, m])));
    let k2 = k1.add(&block("block2", &k1));
    let k3 = k2.add(&block("block3", &k2));
    let mut branches: Vec<A4> = [6, 12, 18]
        .iter()
        .map(|&r| relu(&conv_b(store, &format!("{p}.aspp.rate{r}"), &k3, 3, r, r)))
        .collect();
    let pooled = relu(&conv_b(store, &format!("{p}.aspp.pooled"), &global_avg(&k3), 1, 0, 1));
    branches.push(bilinear(&pooled, k3.h, k3.w));
    let a = relu(&conv_b(store, &format!("{p}.aspp.fuse"), &concat(&branches.iter().collect::<Vec<_>>()), 1, 0, 1));
    let h = relu(&conv_b(store, &format!("{p}.head_a"), &a, 1, 0, 1));
    conv_b(store, &format!("{p}.head_b"), &h, 1, 0, 1)
}

pub fn bce(p: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
        s += -g[i] * q.ln() - (1.0 - g[i]) * (1.0 - q).ln();
    }
    s / p.len() as f64
}

pub fn ual(p: &[f64]) -> f64 {
    let mut s = 0.0;
    for &v in p {
        s += 1.0 - (2.0 * v - 1.0).abs().powi(2);
    }
    s / p.len() as f64
}

/// `(tp, fp, tn, fn)` by pixel loop.
pub fn counts(pred: &[f64], gt: &[bool], thr: f64) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for i in 0..pred.len() {
        let p = pred[i] >= thr;
        if p && gt[i] {
            tp += 1;
        } else if p {
            fp += 1;
        } else if gt[i] {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    (tp, fp, tn, fn_)
}

/// Largest elementwise difference relative to the largest reference magnitude.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
