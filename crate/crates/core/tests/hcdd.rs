mod common;

use common::*;
use mgnet::hcdd::{plan_for, Hcdd, Hcdu, HcduConfig, PairWiring, DECODER_WIDTH, FULL_PLAN};
use mgnet::nn::{Ctx, Mode, ParamStore};
use mgnet::{Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(out: usize, prev: Option<usize>, wiring: PairWiring, seed: u64) -> (Hcdu, ParamStore<f64>) {
    let mut store = ParamStore::<f64>::new();
    let cfg = HcduConfig::new(5, prev, out).unwrap().with_wiring(wiring);
    let u = Hcdu::new(&mut store.root(seed).sub("u"), cfg);
    randomize(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), 0.6);
    (u, store)
}

#[test]
fn plans() {
    assert_eq!(plan_for(&[64, 256, 512, 1024, 2048]), FULL_PLAN);
    assert_eq!(plan_for(&[8, 16, 32, 64, 128])[4], DECODER_WIDTH);
    assert!(HcduConfig::new(8, None, 3).is_err());
    assert!(HcduConfig::new(8, None, 0).is_err());
    assert_eq!(HcduConfig::new(8, None, 6).unwrap().gated_width(), 21);
}

#[test]
fn pyramid_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (out, h, w) in [(2, 2, 2), (4, 3, 5)] {
        let (u, store) = unit(out, None, PairWiring::Carry, out as u64);
        let f = Tensor::<f64>::randn(&[2, out, h, w], 1.0, &mut rng);
        let got = u.pyramid(&Ctx::new(&store, Mode::EVAL), &Var::constant(f.clone())).unwrap();
        let want = hcdu_pyramid(&store, "u", &A4::from_tensor(&f));
        assert!(rel_err(got.value().data(), &want.d) < 1e-10, "out {out}");
    }
}

#[test]
fn merge_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (u, store) = unit(4, Some(6), PairWiring::Carry, 2);
    let fi = Tensor::<f64>::randn(&[1, 5, 4, 4], 1.0, &mut rng);
    let prev = Tensor::<f64>::randn(&[1, 6, 2, 2], 1.0, &mut rng);
    let ctx = Ctx::new(&store, Mode::EVAL);
    let got = u.merge(&ctx, &Var::constant(fi.clone()), Some(&Var::constant(prev.clone()))).unwrap();
    let reduced = cbr(&store, "u.reduce", &A4::from_tensor(&fi), 3);
    let projected = cbr(&store, "u.prev_proj", &A4::from_tensor(&prev), 1);
    let want = reduced.add(&bilinear(&projected, 4, 4));
    assert!(rel_err(got.value().data(), &want.d) < 1e-10);
    assert!(u.merge(&ctx, &Var::constant(prev), None).is_err());
}

#[test]
fn raw_wiring_differs_from_carry() {
    let (carry, cs) = unit(4, None, PairWiring::Carry, 3);
    let (raw, rs) = unit(4, None, PairWiring::Raw, 3);
    assert_eq!(cs.shape_of("u.pair2.conv.weight").unwrap()[1], 2 + 4);
    assert_eq!(rs.shape_of("u.pair2.conv.weight").unwrap()[1], 8);
    let f = Var::constant(Tensor::<f64>::randn(&[1, 4, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
    let a = carry.pyramid(&Ctx::new(&cs, Mode::EVAL), &f).unwrap();
    let b = raw.pyramid(&Ctx::new(&rs, Mode::EVAL), &f).unwrap();
    assert_eq!(a.shape(), b.shape());
}

#[test]
fn trace_shapes() {
    let (u, store) = unit(6, None, PairWiring::Carry, 4);
    let f = Var::constant(Tensor::<f64>::zeros(&[1, 6, 4, 4]));
    let (_, trace) = u.pyramid_traced(&Ctx::new(&store, Mode::EVAL), &f).unwrap();
    assert_eq!(trace.chunks.len(), 6);
    assert_eq!(trace.t.shape(), [1, 21, 4, 4]);
    assert_eq!(trace.m.shape(), [1, 21, 4, 4]);
    assert_eq!(trace.weight.shape(), [1, 21, 1, 1]);
    assert!(trace.weight.value().data().iter().all(|&w| w > 0.0 && w < 1.0));
}

#[test]
fn decoder_output_is_stride_two_at_width_32() {
    let levels = [4, 8, 8, 16, 16];
    let mut store = ParamStore::<f32>::new();
    let dec = Hcdd::new(&mut store.root(0), &levels, &plan_for(&levels), PairWiring::Carry).unwrap();
    let fused: Vec<Var<f32>> = levels
        .iter()
        .enumerate()
        .map(|(i, &c)| Var::constant(Tensor::zeros(&[1, c, 32 >> i, 32 >> i])))
        .collect();
    let out = dec.decode(&Ctx::new(&store, Mode::EVAL), &fused).unwrap();
    assert_eq!(out.x.shape(), [1, DECODER_WIDTH, 32, 32]);
    assert_eq!(out.coarse_logits.shape(), [1, 1, 32, 32]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_preserves_shape_and_is_nonnegative(half in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..100) {
        let (u, store) = unit(2 * half, None, PairWiring::Carry, seed);
        let f = Tensor::<f64>::randn(&[1, 2 * half, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = u.pyramid(&Ctx::new(&store, Mode::EVAL), &Var::constant(f)).unwrap();
        prop_assert_eq!(out.shape().to_vec(), vec![1, 2 * half, h, w]);
        prop_assert!(out.value().data().iter().all(|&v| v >= 0.0));
    }
}
