//! Hierarchical channel-down decoder.
//!
//! Five units integrate the fused pyramid top-down (deepest level first).
//! Each unit merges its fused input with the upsampled output of the previous
//! unit, then lets six channel chunks interact pyramid-wise through
//! concatenate-conv-BN-ReLU-split groups, gates the concatenated first
//! sub-features with a squeeze-style weight map computed from the
//! concatenated last sub-features, and adds the result back residually.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Ctx, Init, Scope};
use crate::ops::{concat_channels, Conv2dOpts};
use crate::scalar::Scalar;

pub const NUM_UNITS: usize = 5;
/// Output width of each unit, deepest first, for the full profile.
pub const FULL_PLAN: [usize; NUM_UNITS] = [1024, 512, 256, 64, 32];
/// Width of the decoder feature handed to refinement.
pub const DECODER_WIDTH: usize = 32;
const CHUNKS: usize = 6;
/// Number of interaction groups: two solo groups plus five pairwise groups.
pub const GROUPS: usize = 7;

/// Unit output widths (deepest first) mirroring a backbone's channel ladder.
pub fn plan_for(level_channels: &[usize]) -> [usize; NUM_UNITS] {
    [level_channels[3], level_channels[2], level_channels[1], level_channels[0], DECODER_WIDTH]
}

/// How the five pairwise groups pick their inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairWiring {
    /// Group j consumes the middle sub-feature of group j-1 (k1 for j = 1) and chunk j+1.
    #[default]
    Carry,
    /// Group j consumes raw chunks k_j and k_{j+1}.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HcduConfig {
    pub in_channels: usize,
    /// Width of the previous unit's output, `None` for the deepest unit.
    pub prev_channels: Option<usize>,
    pub out_channels: usize,
    pub group_width: usize,
    pub wiring: PairWiring,
}

impl HcduConfig {
    pub fn new(in_channels: usize, prev_channels: Option<usize>, out_channels: usize) -> Result<Self> {
        if out_channels == 0 || out_channels % 2 != 0 {
            return Err(Error::Shape(format!("unit output width {out_channels} must be even and positive")));
        }
        Ok(Self { in_channels, prev_channels, out_channels, group_width: out_channels / 2, wiring: PairWiring::Carry })
    }

    pub fn with_wiring(mut self, wiring: PairWiring) -> Self {
        self.wiring = wiring;
        self
    }

    /// Channels of T and M.
    pub fn gated_width(&self) -> usize {
        GROUPS * self.group_width
    }
}

/// Squeeze-style gate: global average pool, 1×1 conv, ReLU, 1×1 conv, sigmoid.
#[derive(Clone, Debug)]
pub struct WeightGenerator {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

impl WeightGenerator {
    fn new<T: Scalar>(s: &mut Scope<'_, T>, channels: usize) -> Self {
        let hidden = (channels / 4).max(1);
        Self {
            squeeze: Conv2d::new(&mut s.sub("squeeze"), channels, hidden, 1, Conv2dOpts::default(), true, Init::KaimingFanIn),
            excite: Conv2d::new(&mut s.sub("excite"), hidden, channels, 1, Conv2dOpts::default(), true, Init::KaimingFanIn),
        }
    }

    /// Gate in (0, 1), shape `[N, C, 1, 1]`.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, m: &Var<T>) -> Var<T> {
        let z = self.squeeze.forward(ctx, &m.global_avg_pool()).relu();
        self.excite.forward(ctx, &z).sigmoid()
    }
}

/// Intermediate tensors of one unit's chunk interaction, for inspection.
pub struct PyramidTrace<T: Scalar> {
    pub chunks: Vec<Var<T>>,
    pub t: Var<T>,
    pub m: Var<T>,
    pub weight: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Hcdu {
    pub cfg: HcduConfig,
    pub reduce: ConvBnRelu,
    pub prev_proj: Option<ConvBnRelu>,
    pub expand: ConvBnRelu,
    pub solo_first: ConvBnRelu,
    pub solo_last: ConvBnRelu,
    pub pairs: Vec<ConvBnRelu>,
    pub weight_gen: WeightGenerator,
    pub fuse_conv: Conv2d,
    pub fuse_bn: BatchNorm2d,
}

impl Hcdu {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, cfg: HcduConfig) -> Self {
        let out = cfg.out_channels;
        let cu = cfg.group_width;
        let reduce = ConvBnRelu::same(&mut s.sub("reduce"), cfg.in_channels, out, 3);
        let prev_proj = cfg
            .prev_channels
            .filter(|&p| p != out)
            .map(|p| ConvBnRelu::new(&mut s.sub("prev_proj"), p, out, 1, Conv2dOpts::default()));
        let expand = ConvBnRelu::new(&mut s.sub("expand"), out, CHUNKS * out, 1, Conv2dOpts::default());
        let solo_first = ConvBnRelu::same(&mut s.sub("solo_first"), out, 2 * cu, 3);
        let solo_last = ConvBnRelu::same(&mut s.sub("solo_last"), out, 2 * cu, 3);
        let pairs = (1..CHUNKS)
            .map(|j| {
                let input = match (cfg.wiring, j) {
                    (PairWiring::Raw, _) | (PairWiring::Carry, 1) => 2 * out,
                    (PairWiring::Carry, _) => cu + out,
                };
                ConvBnRelu::same(&mut s.sub(&format!("pair{j}")), input, 3 * cu, 3)
            })
            .collect();
        let weight_gen = WeightGenerator::new(&mut s.sub("weight_gen"), cfg.gated_width());
        let fuse_conv = Conv2d::new(&mut s.sub("fuse_conv"), cfg.gated_width(), out, 3, Conv2dOpts::same(3), false, Init::KaimingFanIn);
        let fuse_bn = BatchNorm2d::new(&mut s.sub("fuse_bn"), out);
        Self { cfg, reduce, prev_proj, expand, solo_first, solo_last, pairs, weight_gen, fuse_conv, fuse_bn }
    }

    /// `f = reduce(f_i) + upsample(f_prev)`; the deepest unit drops the second term.
    pub fn merge<T: Scalar>(&self, ctx: &Ctx<'_, T>, f_i: &Var<T>, f_prev: Option<&Var<T>>) -> Result<Var<T>> {
        if f_i.dims4().1 != self.cfg.in_channels {
            return Err(Error::Shape(format!("unit expects {} input channels, got {}", self.cfg.in_channels, f_i.dims4().1)));
        }
        let reduced = self.reduce.forward(ctx, f_i);
        let Some(prev) = f_prev else { return Ok(reduced) };
        let (_, _, h, w) = reduced.dims4();
        let prev = match &self.prev_proj {
            Some(proj) => proj.forward(ctx, prev),
            None => prev.clone(),
        };
        if prev.dims4().1 != self.cfg.out_channels {
            return Err(Error::Shape(format!(
                "previous unit output has {} channels, expected {}",
                prev.dims4().1,
                self.cfg.out_channels
            )));
        }
        Ok(reduced.add(&prev.resize_bilinear(h, w)))
    }

    /// Chunk interaction and gated residual: returns f̃ and the intermediates.
    pub fn pyramid_traced<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: &Var<T>) -> Result<(Var<T>, PyramidTrace<T>)> {
        if f.dims4().1 != self.cfg.out_channels {
            return Err(Error::Shape(format!("pyramid expects {} channels, got {}", self.cfg.out_channels, f.dims4().1)));
        }
        let k = self.expand.forward(ctx, f).chunk_channels(CHUNKS);
        let mut groups: Vec<Vec<Var<T>>> = Vec::with_capacity(GROUPS);
        groups.push(self.solo_first.forward(ctx, &k[0]).chunk_channels(2));
        let mut carry = k[0].clone();
        for (j, pair) in self.pairs.iter().enumerate() {
            let left = match self.cfg.wiring {
                PairWiring::Carry => carry.clone(),
                PairWiring::Raw => k[j].clone(),
            };
            let g = pair.forward(ctx, &concat_channels(&[left, k[j + 1].clone()])).chunk_channels(3);
            carry = g[1].clone();
            groups.push(g);
        }
        groups.push(self.solo_last.forward(ctx, &k[CHUNKS - 1]).chunk_channels(2));
        let t = concat_channels(&groups.iter().map(|g| g[0].clone()).collect::<Vec<_>>());
        let m = concat_channels(&groups.iter().map(|g| g.last().unwrap().clone()).collect::<Vec<_>>());
        let weight = self.weight_gen.forward(ctx, &m);
        let gated = t.mul(&weight);
        let out = f.add(&self.fuse_bn.forward(ctx, &self.fuse_conv.forward(ctx, &gated))).relu();
        Ok((out, PyramidTrace { chunks: k, t, m, weight }))
    }

    pub fn pyramid<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: &Var<T>) -> Result<Var<T>> {
        Ok(self.pyramid_traced(ctx, f)?.0)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, f_i: &Var<T>, f_prev: Option<&Var<T>>) -> Result<Var<T>> {
        let f = self.merge(ctx, f_i, f_prev)?;
        self.pyramid(ctx, &f)
    }
}

/// Decoder output: feature `x` (stride 2) and the coarse logits map.
pub struct DecoderOutput<T: Scalar> {
    pub x: Var<T>,
    pub coarse_logits: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Hcdd {
    /// Units in execution order, deepest first.
    pub units: Vec<Hcdu>,
    pub head: Conv2d,
}

impl Hcdd {
    /// `level_channels` are the fused widths shallow to deep; `plan` the unit widths deepest first.
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, level_channels: &[usize], plan: &[usize], wiring: PairWiring) -> Result<Self> {
        if level_channels.len() != NUM_UNITS || plan.len() != NUM_UNITS {
            return Err(Error::Shape(format!("decoder needs {NUM_UNITS} levels and widths")));
        }
        if plan[NUM_UNITS - 1] != DECODER_WIDTH {
            return Err(Error::Shape(format!("last unit must output {DECODER_WIDTH} channels")));
        }
        let mut units = Vec::with_capacity(NUM_UNITS);
        let mut prev = None;
        for (u, &out) in plan.iter().enumerate() {
            let cfg = HcduConfig::new(level_channels[NUM_UNITS - 1 - u], prev, out)?.with_wiring(wiring);
            units.push(Hcdu::new(&mut s.sub(&format!("unit{}", u + 1)), cfg));
            prev = Some(out);
        }
        let head = Conv2d::new(&mut s.sub("head"), DECODER_WIDTH, 1, 1, Conv2dOpts::default(), true, Init::KaimingFanIn);
        Ok(Self { units, head })
    }

    /// Decodes five fused features given shallow to deep.
    pub fn decode<T: Scalar>(&self, ctx: &Ctx<'_, T>, fused: &[Var<T>]) -> Result<DecoderOutput<T>> {
        if fused.len() != NUM_UNITS {
            return Err(Error::Shape(format!("expected {NUM_UNITS} fused levels, got {}", fused.len())));
        }
        let mut prev: Option<Var<T>> = None;
        for (u, unit) in self.units.iter().enumerate() {
            let f_i = &fused[NUM_UNITS - 1 - u];
            prev = Some(unit.forward(ctx, f_i, prev.as_ref())?);
        }
        let x = prev.expect("five units");
        let coarse_logits = self.head.forward(ctx, &x);
        Ok(DecoderOutput { x, coarse_logits })
    }
}
