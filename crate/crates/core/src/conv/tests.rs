use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::{Graph, ParamStore};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

#[test]
fn dirac_kernel_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, "c", ConvSpec::regular(1, 1, 3), &mut rng()).unwrap();
    let w = conv.kernel_ids()[0];
    *store.get_mut(w) = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| if (y, x) == (1, 1) { 1.0 } else { 0.0 });
    *store.get_mut(conv.bias_id().unwrap()) = Tensor::zeros(Shape::new(1, 1, 1, 1));
    let x = Tensor::uniform(Shape::new(2, 1, 5, 4), -1.0, 1.0, &mut rng());
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone()).unwrap();
    let y = conv.forward(&mut g, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn one_group_equals_regular_bitwise() {
    let mut s1 = ParamStore::<f64>::new();
    let mut s2 = ParamStore::<f64>::new();
    let a = Conv2d::new(&mut s1, "a", ConvSpec::regular(3, 4, 3), &mut rng()).unwrap();
    let b = Conv2d::new(&mut s2, "b", ConvSpec::regular(3, 4, 3).with_variant(ConvVariant::Grouped(1)), &mut rng()).unwrap();
    assert_eq!(s1.tensors(), s2.tensors());
    let x = Tensor::uniform(Shape::new(1, 3, 6, 5), -1.0, 1.0, &mut rng());
    let run = |store: &ParamStore<f64>, c: &Conv2d| {
        let mut g = Graph::new(store);
        let xv = g.constant(x.clone()).unwrap();
        let y = c.forward(&mut g, xv).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(&s1, &a), run(&s2, &b));
}

#[test]
fn shapes_and_param_counts() {
    let mut store = ParamStore::<f32>::new();
    let mut r = rng();
    let reg = Conv2d::new(&mut store, "r", ConvSpec::regular(4, 6, 3), &mut r).unwrap();
    let grp = Conv2d::new(&mut store, "g", ConvSpec::regular(4, 6, 3).with_variant(ConvVariant::Grouped(2)), &mut r).unwrap();
    let sep = Conv2d::new(&mut store, "s", ConvSpec::regular(4, 6, 3).with_variant(ConvVariant::DepthwiseSeparable), &mut r).unwrap();
    assert_eq!(store.count(&reg.param_ids()), 6 * 4 * 9 + 6);
    assert_eq!(store.count(&grp.param_ids()), 6 * 2 * 9 + 6);
    assert_eq!(store.count(&sep.param_ids()), 4 * 9 + 6 * 4 + 6);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(Shape::new(2, 4, 7, 3))).unwrap();
    for c in [&reg, &grp, &sep] {
        let y = c.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(2, 6, 7, 3));
    }
}

#[test]
fn spec_validation() {
    assert!(ConvSpec::regular(2, 2, 2).validate().is_err());
    assert!(ConvSpec::regular(3, 4, 3).with_variant(ConvVariant::Grouped(2)).validate().is_err());
    assert!(ConvSpec::regular(4, 4, 3).with_variant(ConvVariant::Grouped(0)).validate().is_err());
    assert!(ConvSpec::regular(0, 4, 3).validate().is_err());
    assert!(ConvSpec::regular(4, 4, 5).validate().is_ok());
}

#[test]
fn channel_mismatch_is_dimension_error() {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, "c", ConvSpec::regular(2, 2, 3), &mut rng()).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4))).unwrap();
    assert!(matches!(conv.forward(&mut g, x), Err(WauError::Dimension { .. })));
}

#[test]
fn variant_names_round_trip() {
    for v in [ConvVariant::Regular, ConvVariant::Grouped(4), ConvVariant::DepthwiseSeparable] {
        assert_eq!(ConvVariant::parse(&v.to_string()).unwrap(), v);
    }
    assert!(ConvVariant::parse("dilated").is_err());
    assert!(ConvVariant::parse("grouped:x").is_err());
}

#[test]
fn bilinear_constant_and_identity() {
    let c = Tensor::<f64>::full(Shape::new(1, 2, 3, 2), 5.0);
    for n in 1..5 {
        let up = bilinear_upsample(&c, n).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 2, 3 * n, 2 * n));
        assert!(up.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }
    let x = Tensor::<f64>::uniform(Shape::new(2, 1, 3, 3), -1.0, 1.0, &mut rng());
    assert_eq!(bilinear_upsample(&x, 1).unwrap(), x);
    assert!(bilinear_upsample(&x, 0).is_err());
}

#[test]
fn bilinear_composition_shape_law() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 2));
    let ab = bilinear_upsample(&bilinear_upsample(&x, 2).unwrap(), 3).unwrap();
    assert_eq!(ab.shape(), bilinear_upsample(&x, 6).unwrap().shape());
}

#[test]
fn transposed_single_pixel_expands_kernel() {
    let mut store = ParamStore::<f64>::new();
    let t = TransposedUpsample::new(&mut store, "t", 1, 1, 2, &mut rng()).unwrap();
    *store.get_mut(t.bias_id()) = Tensor::zeros(Shape::new(1, 1, 1, 1));
    let w = store.get(t.weight_id()).clone();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::scalar(3.0)).unwrap();
    let y = t.forward(&mut g, x).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
    // output pixel o reads kernel tap o + pad with pad = 1
    for oy in 0..2 {
        for ox in 0..2 {
            assert_eq!(y.at(0, 0, oy, ox), 3.0 * w.at(0, 0, oy + 1, ox + 1));
        }
    }
}

#[test]
fn transposed_zero_weights_and_bad_factor() {
    let mut store = ParamStore::<f64>::new();
    let t = TransposedUpsample::new(&mut store, "t", 2, 3, 3, &mut rng()).unwrap();
    for p in store.tensors_mut() {
        *p = Tensor::zeros(p.shape());
    }
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::uniform(Shape::new(2, 2, 3, 2), -1.0, 1.0, &mut rng())).unwrap();
    let y = t.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), Shape::new(2, 3, 9, 6));
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert!(TransposedUpsample::new(&mut store, "u", 1, 1, 1, &mut rng()).is_err());
}
