mod common;

use common::rng;
use liptok::autodiff::{Tape, Tensor};
use liptok::nn::{lipschitz_normalize, max_abs_row_sum, Layer, LipschitzLinear, MlpStack, Module};
use liptok::smoothness::empirical_lipschitz_ratio;
use proptest::prelude::*;
use rand::Rng;

fn random_constrained(seed: u64) -> MlpStack {
    let mut r = rng(seed);
    let depth = r.gen_range(2..=4);
    let mut dims = vec![r.gen_range(2..=9)];
    for _ in 0..depth {
        dims.push(r.gen_range(2..=24));
    }
    let layers = dims
        .windows(2)
        .map(|w| {
            let n = w[0] * w[1];
            let weight = Tensor::new(vec![w[1], w[0]], (0..n).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
            let bias = Tensor::new(vec![w[1]], (0..w[1]).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
            Layer::Lipschitz(LipschitzLinear::from_parts(weight, bias, r.gen_range(-2.0..2.0)).unwrap())
        })
        .collect();
    MlpStack::from_layers(layers).unwrap()
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn constrained_stack_never_exceeds_its_bound() {
    for seed in 0..10 {
        let net = random_constrained(seed);
        let bound = net.lipschitz_bound().unwrap();
        let mut r = rng(1000 + seed);
        let d = net.in_dim();
        let pairs = 2000;
        let xs: Vec<f64> = (0..2 * pairs * d).map(|_| r.gen_range(-5.0..5.0)).collect();
        let out = net.eval(&Tensor::new(vec![2 * pairs, d], xs.clone()).unwrap()).unwrap();
        let o = net.out_dim();
        for p in 0..pairs {
            let (a, b) = (2 * p, 2 * p + 1);
            let din = inf_dist(&xs[a * d..(a + 1) * d], &xs[b * d..(b + 1) * d]);
            let dout = inf_dist(&out.data()[a * o..(a + 1) * o], &out.data()[b * o..(b + 1) * o]);
            assert!(dout <= bound * din + 1e-9, "seed {seed}: {dout} > {bound} * {din}");
        }
    }
}

#[test]
fn lipschitz_loss_is_the_bound_product() {
    let net = random_constrained(3);
    let mut tape = Tape::new();
    let l = net.lipschitz_loss(&mut tape).unwrap();
    assert!((tape.item(l) - net.lipschitz_bound().unwrap()).abs() < 1e-12);
}

#[test]
fn unconstrained_stack_has_no_bound() {
    let net = MlpStack::new(&[3, 4, 2], false, &mut rng(0)).unwrap();
    assert!(net.lipschitz_bound().is_err());
}

#[test]
fn fresh_constrained_layer_starts_unscaled() {
    let l = LipschitzLinear::new(6, 5, &mut rng(2)).unwrap();
    let w = lipschitz_normalize(&l.weight, l.raw_bound.item()).unwrap();
    for (a, b) in w.data().iter().zip(l.weight.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ratio_oracles() {
    let inputs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1, (i * i % 7) as f64]).collect();
    let id = empirical_lipschitz_ratio(|x| Ok(x.to_vec()), &inputs, 200, 0).unwrap();
    assert!((id - 1.0).abs() < 1e-12);
    let twice = empirical_lipschitz_ratio(|x| Ok(x.iter().map(|v| 2.0 * v).collect()), &inputs, 200, 0).unwrap();
    assert!((twice - 2.0).abs() < 1e-12);
    let net = random_constrained(7);
    let d = net.in_dim();
    let mut r = rng(8);
    let xs: Vec<Vec<f64>> = (0..100).map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let ratio = empirical_lipschitz_ratio(
        |x| Ok(net.eval(&Tensor::new(vec![1, d], x.to_vec())?)?.into_data()),
        &xs,
        500,
        1,
    )
    .unwrap();
    assert!(ratio <= net.lipschitz_bound().unwrap() + 1e-9);
}

#[test]
fn parameters_are_named_by_layer() {
    let net = MlpStack::new(&[2, 3, 1], true, &mut rng(0)).unwrap();
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["0.weight", "0.bias", "0.raw_bound", "1.weight", "1.bias", "1.raw_bound"]);
}

proptest! {
    #[test]
    fn normalization_is_idempotent_and_bounded(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in 0u64..1000,
        c in -3.0f64..3.0,
    ) {
        let mut r = rng(seed);
        let w = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.gen_range(-4.0..4.0)).collect()).unwrap();
        let once = lipschitz_normalize(&w, c).unwrap();
        let twice = lipschitz_normalize(&once, c).unwrap();
        prop_assert_eq!(once.data(), twice.data());
        let bound = liptok::autodiff::softplus_value(c);
        prop_assert!(max_abs_row_sum(&once) <= bound * (1.0 + 1e-12));
    }
}
