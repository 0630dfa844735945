//! Primary prediction guiding: the decoder feature `x` is re-read `T_max`
//! times, each pass conditioned on the previous logits map. One set of
//! weights is shared across passes.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::hcdd::DECODER_WIDTH;
use crate::nn::{Conv2d, Ctx, Init, Scope};
use crate::ops::{concat_channels, Conv2dOpts};
use crate::scalar::Scalar;

pub const DEFAULT_T_REFINE: usize = 2;
pub const ASPP_RATES: [usize; 3] = [6, 12, 18];
pub const ASPP_WIDTH: usize = 128;
const HEAD_WIDTH: usize = 32;

fn conv<T: Scalar>(s: &mut Scope<'_, T>, name: &str, cin: usize, cout: usize, k: usize, opts: Conv2dOpts) -> Conv2d {
    Conv2d::new(&mut s.sub(name), cin, cout, k, opts, true, Init::KaimingFanIn)
}

/// Two conv-ReLU layers with an identity skip.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

impl ResidualBlock {
    fn new<T: Scalar>(s: &mut Scope<'_, T>, cin: usize, mid: usize, cout: usize) -> Self {
        Self {
            conv_a: conv(s, "conv_a", cin, mid, 3, Conv2dOpts::same(3)),
            conv_b: conv(s, "conv_b", mid, cout, 3, Conv2dOpts::same(3)),
        }
    }

    fn body<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let h = self.conv_a.forward(ctx, x).relu();
        self.conv_b.forward(ctx, &h).relu()
    }
}

#[derive(Clone, Debug)]
pub struct Aspp {
    pub dilated: Vec<Conv2d>,
    pub pooled: Conv2d,
    pub fuse: Conv2d,
}

impl Aspp {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, channels: usize) -> Self {
        let dilated = ASPP_RATES
            .iter()
            .map(|&r| conv(s, &format!("rate{r}"), channels, channels, 3, Conv2dOpts::same(3).with_dilation(r).with_padding(r)))
            .collect();
        let pooled = conv(s, "pooled", channels, channels, 1, Conv2dOpts::default());
        let fuse = conv(s, "fuse", 4 * channels, ASPP_WIDTH, 1, Conv2dOpts::default());
        Self { dilated, pooled, fuse }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, _, h, w) = x.dims4();
        if h == 0 || w == 0 {
            return Err(Error::Shape("ASPP input has an empty spatial extent".into()));
        }
        let mut branches: Vec<Var<T>> = self.dilated.iter().map(|c| c.forward(ctx, x).relu()).collect();
        let pooled = self.pooled.forward(ctx, &x.global_avg_pool()).relu();
        branches.push(pooled.resize_bilinear(h, w));
        Ok(self.fuse.forward(ctx, &concat_channels(&branches)).relu())
    }
}

/// The refinement function applied at every iteration.
#[derive(Clone, Debug)]
pub struct Ppg {
    pub block1: ResidualBlock,
    pub block2: ResidualBlock,
    pub block3: ResidualBlock,
    pub aspp: Aspp,
    pub head_a: Conv2d,
    pub head_b: Conv2d,
}

/// Logits after refinement together with every intermediate map, `M_0` first.
pub struct Refined<T: Scalar> {
    pub logits: Var<T>,
    pub trace: Vec<Var<T>>,
}

impl Ppg {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>) -> Self {
        let c = DECODER_WIDTH;
        Self {
            block1: ResidualBlock::new(&mut s.sub("block1"), c + 1, c + 1, c),
            block2: ResidualBlock::new(&mut s.sub("block2"), c, c, c),
            block3: ResidualBlock::new(&mut s.sub("block3"), c, c, c),
            aspp: Aspp::new(&mut s.sub("aspp"), c),
            head_a: conv(s, "head_a", ASPP_WIDTH, HEAD_WIDTH, 1, Conv2dOpts::default()),
            head_b: conv(s, "head_b", HEAD_WIDTH, 1, 1, Conv2dOpts::default()),
        }
    }

    /// One application: `M_t = F(x, M_{t-1})`.
    pub fn refine_step<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>, m_prev: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = x.dims4();
        if c != DECODER_WIDTH {
            return Err(Error::Shape(format!("refinement expects {DECODER_WIDTH} feature channels, got {c}")));
        }
        if m_prev.dims4() != (n, 1, h, w) {
            return Err(Error::Shape(format!("logits map {:?} does not match feature [{n}, 1, {h}, {w}]", m_prev.shape())));
        }
        let k1 = x.add(&self.block1.body(ctx, &concat_channels(&[x.clone(), m_prev.clone()])));
        let k2 = k1.add(&self.block2.body(ctx, &k1));
        let k3 = k2.add(&self.block3.body(ctx, &k2));
        let a = self.aspp.forward(ctx, &k3)?;
        Ok(self.head_b.forward(ctx, &self.head_a.forward(ctx, &a).relu()))
    }

    pub fn refine<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>, m0: &Var<T>, t_max: usize) -> Result<Refined<T>> {
        let mut trace = vec![m0.clone()];
        for _ in 0..t_max {
            let next = self.refine_step(ctx, x, trace.last().unwrap())?;
            trace.push(next);
        }
        Ok(Refined { logits: trace.last().unwrap().clone(), trace })
    }
}
