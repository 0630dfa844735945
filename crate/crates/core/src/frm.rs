//! Fine-rescaling and merging: per-level fusion of features computed from the
//! 0.7x, 1.0x and 1.2x rescaled inputs via per-pixel softmax attention over
//! scales.

use crate::autograd::Var;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Ctx, Init, Scope};
use crate::ops::{concat_channels, Conv2dOpts};
use crate::scalar::Scalar;

/// Input rescaling factors, in the order `[low, mid, high]`.
pub const DEFAULT_SCALES: [f64; 3] = [0.7, 1.0, 1.2];

/// Granularity every rescaled side is snapped to.
pub const SIZE_QUANTUM: usize = 32;

/// Side length after rescaling by `scale` and snapping to a multiple of 32.
pub fn scaled_side(side: usize, scale: f64) -> Result<usize> {
    let raw = side as f64 * scale;
    if raw < SIZE_QUANTUM as f64 {
        return Err(Error::InvalidInput(format!(
            "side {side} scaled by {scale} is {raw:.1}, below the minimum of {SIZE_QUANTUM}"
        )));
    }
    Ok(((raw / SIZE_QUANTUM as f64).round() as usize).max(1) * SIZE_QUANTUM)
}

/// Rescales a `[N, 3, H, W]` batch to each factor in `scales` (bilinear,
/// snapped to multiples of 32). The factor 1.0 returns the input itself.
pub fn make_scale_set<T: Scalar>(image: &Var<T>, scales: &[f64]) -> Result<Vec<Var<T>>> {
    let (_, _, h, w) = image.dims4();
    if h % SIZE_QUANTUM != 0 || w % SIZE_QUANTUM != 0 {
        return Err(Error::InvalidInput(format!("input {h}x{w} is not a multiple of {SIZE_QUANTUM}")));
    }
    scales
        .iter()
        .map(|&k| {
            if k == 1.0 {
                return Ok(image.clone());
            }
            Ok(image.resize_bilinear(scaled_side(h, k)?, scaled_side(w, k)?))
        })
        .collect()
}

/// Features of one pyramid level at the three input scales.
#[derive(Clone, Debug)]
pub struct ScaleTriplet<T: Scalar> {
    pub f07: Var<T>,
    pub f10: Var<T>,
    pub f12: Var<T>,
    /// 1-based level index, shallow to deep.
    pub level_index: usize,
    /// Spatial size of the 1.0x feature.
    pub target_size: (usize, usize),
}

impl<T: Scalar> ScaleTriplet<T> {
    pub fn new(f07: Var<T>, f10: Var<T>, f12: Var<T>, level_index: usize) -> Self {
        let (_, _, h, w) = f10.dims4();
        Self { f07, f10, f12, level_index, target_size: (h, w) }
    }

    fn check_aligned(&self) -> Result<()> {
        let c = self.f10.dims4().1;
        for (name, f) in [("1.2x", &self.f12), ("0.7x", &self.f07)] {
            let (_, fc, h, w) = f.dims4();
            if fc != c {
                return Err(Error::Shape(format!("{name} branch has {fc} channels, 1.0x has {c}")));
            }
            if (h, w) != self.target_size {
                return Err(Error::Shape(format!(
                    "{name} branch is {h}x{w}, expected {}x{}",
                    self.target_size.0, self.target_size.1
                )));
            }
        }
        Ok(())
    }
}

/// Three Conv-BN-ReLU layers (3C → C → C/2 → C/4) and a final 1×1
/// convolution to one logit per scale.
#[derive(Clone, Debug)]
pub struct AttentionGenerator {
    pub layers: Vec<ConvBnRelu>,
    pub head: Conv2d,
}

impl AttentionGenerator {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, channels: usize) -> Self {
        let widths = [3 * channels, channels, (channels / 2).max(1), (channels / 4).max(1)];
        let layers = (0..3).map(|i| ConvBnRelu::same(&mut s.sub(&format!("cbr{}", i + 1)), widths[i], widths[i + 1], 3)).collect();
        let head = Conv2d::new(&mut s.sub("head"), widths[3], 3, 1, Conv2dOpts::default(), true, Init::KaimingFanIn);
        Self { layers, head }
    }

    /// Unnormalized scale logits `[N, 3, h, w]` for the concatenation `[f12, f10, f07]`.
    pub fn logits<T: Scalar>(&self, ctx: &Ctx<'_, T>, stacked: &Var<T>) -> Var<T> {
        let y = self.layers.iter().fold(stacked.clone(), |y, l| l.forward(ctx, &y));
        self.head.forward(ctx, &y)
    }
}

/// Weighted sum `A[0]*f12 + A[1]*f10 + A[2]*f07` with per-pixel weights
/// `attention: [N, 3, h, w]` broadcast over channels.
pub fn fuse_with_attention<T: Scalar>(triplet: &ScaleTriplet<T>, attention: &Var<T>) -> Result<Var<T>> {
    triplet.check_aligned()?;
    let (n, k, h, w) = attention.dims4();
    if k != 3 || (h, w) != triplet.target_size || n != triplet.f10.dims4().0 {
        return Err(Error::Shape(format!("attention map {:?} does not match triplet", attention.shape())));
    }
    let a = attention.chunk_channels(3);
    Ok(a[0].mul(&triplet.f12).add(&a[1].mul(&triplet.f10)).add(&a[2].mul(&triplet.f07)))
}

/// Generates softmax attention over scales and fuses the aligned triplet.
/// Returns the fused feature and the attention weights.
pub fn fuse<T: Scalar>(ctx: &Ctx<'_, T>, triplet: &ScaleTriplet<T>, gen: &AttentionGenerator) -> Result<(Var<T>, Var<T>)> {
    triplet.check_aligned()?;
    let stacked = concat_channels(&[triplet.f12.clone(), triplet.f10.clone(), triplet.f07.clone()]);
    let attention = gen.logits(ctx, &stacked).softmax_channels();
    let fused = fuse_with_attention(triplet, &attention)?;
    Ok((fused, attention))
}

/// 1.2x branch: 3×3 then 5×5 Conv-BN-ReLU, then adaptive max + average
/// pooling down to the target size.
#[derive(Clone, Debug)]
pub struct HighBranch {
    pub cbr3: ConvBnRelu,
    pub cbr5: ConvBnRelu,
}

impl HighBranch {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, channels: usize) -> Self {
        Self {
            cbr3: ConvBnRelu::same(&mut s.sub("cbr3"), channels, channels, 3),
            cbr5: ConvBnRelu::same(&mut s.sub("cbr5"), channels, channels, 5),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, f12: &Var<T>, target: (usize, usize)) -> Var<T> {
        let y = self.cbr5.forward(ctx, &self.cbr3.forward(ctx, f12));
        pool_mix(&y, target)
    }
}

/// Sum of adaptive max pooling and adaptive average pooling to `target`.
pub fn pool_mix<T: Scalar>(x: &Var<T>, target: (usize, usize)) -> Var<T> {
    x.adaptive_max_pool(target.0, target.1).add(&x.adaptive_avg_pool(target.0, target.1))
}

/// 0.7x branch: two 3×3 Conv-BN-ReLU then bilinear upsampling to the target size.
#[derive(Clone, Debug)]
pub struct LowBranch {
    pub cbr_a: ConvBnRelu,
    pub cbr_b: ConvBnRelu,
}

impl LowBranch {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, channels: usize) -> Self {
        Self {
            cbr_a: ConvBnRelu::same(&mut s.sub("cbr_a"), channels, channels, 3),
            cbr_b: ConvBnRelu::same(&mut s.sub("cbr_b"), channels, channels, 3),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, f07: &Var<T>, target: (usize, usize)) -> Var<T> {
        let y = self.cbr_b.forward(ctx, &self.cbr_a.forward(ctx, f07));
        y.resize_bilinear(target.0, target.1)
    }
}

#[derive(Clone, Debug)]
pub struct MultiScale {
    pub high: HighBranch,
    pub low: LowBranch,
    pub generator: AttentionGenerator,
}

/// Fusion unit of one pyramid level.
#[derive(Clone, Debug)]
pub struct FrmLevel {
    /// 1.0x branch: one 3×3 Conv-BN-ReLU. Present with or without fusion.
    pub mid: ConvBnRelu,
    pub multi: Option<MultiScale>,
}

impl FrmLevel {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, channels: usize, multi_scale: bool) -> Self {
        let mid = ConvBnRelu::same(&mut s.sub("mid"), channels, channels, 3);
        let multi = multi_scale.then(|| MultiScale {
            high: HighBranch::new(&mut s.sub("high"), channels),
            low: LowBranch::new(&mut s.sub("low"), channels),
            generator: AttentionGenerator::new(&mut s.sub("attention"), channels),
        });
        Self { mid, multi }
    }

    /// Aligned branch outputs for one level.
    pub fn branches<T: Scalar>(&self, ctx: &Ctx<'_, T>, f07: &Var<T>, f10: &Var<T>, f12: &Var<T>, level_index: usize) -> Result<ScaleTriplet<T>> {
        let multi = self.multi.as_ref().ok_or_else(|| Error::InvalidInput("level built without multi-scale fusion".into()))?;
        let mid = self.mid.forward(ctx, f10);
        let (_, _, h, w) = mid.dims4();
        let high = multi.high.forward(ctx, f12, (h, w));
        let low = multi.low.forward(ctx, f07, (h, w));
        Ok(ScaleTriplet::new(low, mid, high, level_index))
    }
}

/// Per-level fusion across the pyramid.
#[derive(Clone, Debug)]
pub struct Frm {
    pub levels: Vec<FrmLevel>,
}

/// Fused features plus the attention maps (empty when single-scale).
pub struct FrmOutput<T: Scalar> {
    pub fused: Vec<Var<T>>,
    pub attention: Vec<Var<T>>,
}

impl Frm {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, channels: &[usize], multi_scale: bool) -> Self {
        let levels = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| FrmLevel::new(&mut s.sub(&format!("level{}", i + 1)), c, multi_scale))
            .collect();
        Self { levels }
    }

    pub fn multi_scale(&self) -> bool {
        self.levels.iter().all(|l| l.multi.is_some())
    }

    /// Fuses pyramids computed from the 0.7x, 1.0x and 1.2x inputs.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        p07: &FeaturePyramid<T>,
        p10: &FeaturePyramid<T>,
        p12: &FeaturePyramid<T>,
    ) -> Result<FrmOutput<T>> {
        let mut fused = Vec::with_capacity(self.levels.len());
        let mut attention = Vec::with_capacity(self.levels.len());
        for (i, level) in self.levels.iter().enumerate() {
            let triplet = level.branches(ctx, &p07.levels[i], &p10.levels[i], &p12.levels[i], i + 1)?;
            let gen = &level.multi.as_ref().expect("checked in branches").generator;
            let (f, a) = fuse(ctx, &triplet, gen)?;
            fused.push(f);
            attention.push(a);
        }
        Ok(FrmOutput { fused, attention })
    }

    /// Single-scale path: each level passes through its 1.0x branch only.
    pub fn forward_single<T: Scalar>(&self, ctx: &Ctx<'_, T>, p10: &FeaturePyramid<T>) -> FrmOutput<T> {
        let fused = self.levels.iter().zip(&p10.levels).map(|(l, f)| l.mid.forward(ctx, f)).collect();
        FrmOutput { fused, attention: Vec::new() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_set_snaps_to_multiples_of_32() {
        let img = Var::constant(Tensor::<f32>::zeros(&[1, 3, 384, 384]));
        let set = make_scale_set(&img, &DEFAULT_SCALES).unwrap();
        let sizes: Vec<_> = set.iter().map(|v| (v.dims4().2, v.dims4().3)).collect();
        assert_eq!(sizes, vec![(256, 256), (384, 384), (448, 448)]);
    }

    #[test]
    fn identity_scale_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Var::constant(Tensor::<f32>::randn(&[1, 3, 64, 96], 1.0, &mut rng));
        let set = make_scale_set(&img, &[1.0]).unwrap();
        assert_eq!(set[0].value(), img.value());
    }

    #[test]
    fn too_small_scale_is_rejected() {
        let img = Var::constant(Tensor::<f32>::zeros(&[1, 3, 32, 32]));
        assert!(make_scale_set(&img, &[0.7]).is_err());
        assert!(make_scale_set(&img, &[1.0, 1.2]).is_ok());
    }

    fn triplet(seed: u64, c: usize, h: usize) -> ScaleTriplet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || Var::constant(Tensor::<f64>::randn(&[1, c, h, h], 1.0, &mut rng));
        ScaleTriplet::new(t(), t(), t(), 1)
    }

    #[test]
    fn equal_logits_average_branches() {
        let tr = triplet(3, 2, 3);
        let a = Var::constant(Tensor::full(&[1, 3, 3, 3], 1.0 / 3.0));
        let out = fuse_with_attention(&tr, &a).unwrap();
        for i in 0..out.value().numel() {
            let mean = (tr.f07.value().data()[i] + tr.f10.value().data()[i] + tr.f12.value().data()[i]) / 3.0;
            assert!((out.value().data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_generator_selects_mid_scale_exactly() {
        let mut store = ParamStore::<f64>::new();
        let gen = AttentionGenerator::new(&mut store.root(0).sub("g"), 2);
        store.set("g.head.weight", Tensor::zeros(&[3, 1, 1, 1])).unwrap();
        store.set("g.head.bias", Tensor::from_vec(&[3], vec![-1e4, 1e4, -1e4])).unwrap();
        let tr = triplet(5, 2, 3);
        let (out, att) = fuse(&Ctx::new(&store, Mode::EVAL), &tr, &gen).unwrap();
        assert_eq!(out.value(), tr.f10.value());
        assert!(att.value().data()[9..18].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let tr = triplet(1, 2, 3);
        let bad = ScaleTriplet::new(Var::constant(Tensor::zeros(&[1, 3, 3, 3])), tr.f10.clone(), tr.f12.clone(), 1);
        assert!(matches!(fuse_with_attention(&bad, &Var::constant(Tensor::zeros(&[1, 3, 3, 3]))), Err(Error::Shape(_))));
    }

    #[test]
    fn high_branch_pooling_of_constant_is_doubled() {
        let x = Var::constant(Tensor::<f64>::full(&[1, 4, 14, 14], 0.75));
        let y = pool_mix(&x, (12, 12));
        assert_eq!(y.shape(), &[1, 4, 12, 12]);
        assert!(y.value().data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn branch_shapes_align_to_target() {
        let mut store = ParamStore::<f32>::new();
        let level = FrmLevel::new(&mut store.root(0).sub("l"), 4, true);
        let ctx = Ctx::new(&store, Mode::EVAL);
        let mk = |h| Var::constant(Tensor::<f32>::full(&[1, 4, h, h], 0.5));
        let tr = level.branches(&ctx, &mk(8), &mk(12), &mk(14), 1).unwrap();
        for f in [&tr.f07, &tr.f10, &tr.f12] {
            assert_eq!(f.shape(), &[1, 4, 12, 12]);
        }
    }
}
