mod common;

use common::rng;
use liptok::autodiff::{Tape, Tensor};
use liptok::quantize::{
    codebook_perplexity, lfq_quantize, perplexity, vq_lookup, vq_quantize, BinSpec, Codebook,
    LFQ_MAX_DIM,
};
use liptok::Error;
use proptest::prelude::*;
use rand::Rng;

fn brute_force(entries: &[f64], d: usize, x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, e) in entries.chunks(d).enumerate() {
        let dist: f64 = x.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.0 {
            best = (dist, k);
        }
    }
    best.1
}

#[test]
fn lookup_matches_brute_force_with_ties() {
    let (k, d) = (1024, 8);
    let mut r = rng(11);
    let mut entries: Vec<f64> = (0..k * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    // Duplicate rows force exact ties between distinct indices.
    for (dst, src) in [(700, 3), (900, 3), (512, 17)] {
        let row = entries[src * d..(src + 1) * d].to_vec();
        entries[dst * d..(dst + 1) * d].copy_from_slice(&row);
    }
    let mut cb = Codebook::from_entries(Tensor::new(vec![k, d], entries.clone()).unwrap()).unwrap();
    let mut latents: Vec<f64> = (0..1000 * d).map(|_| r.gen_range(-1.2..1.2)).collect();
    for (i, src) in [(0, 3), (1, 17), (2, 700)] {
        let row = entries[src * d..(src + 1) * d].to_vec();
        latents[i * d..(i + 1) * d].copy_from_slice(&row);
    }
    let res = vq_lookup(&mut cb, &latents).unwrap();
    for (i, x) in latents.chunks(d).enumerate() {
        assert_eq!(res.indices[i], brute_force(&entries, d, x), "latent {i}");
    }
    assert_eq!(&res.indices[..3], &[3, 17, 3]);
    assert_eq!(cb.usage_counts().iter().sum::<u64>(), 1000);
}

#[test]
fn tape_quantization_gradient_partition() {
    let cb = Codebook::new(16, 4, &mut rng(0)).unwrap();
    let x = Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap().into_param();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let q = vq_quantize(&mut tape, &cb, xv).unwrap();
    assert_eq!(tape.value(q.output), vq_lookup(&mut cb.clone(), x.data()).unwrap().quantized.as_slice());

    let g = tape.backward(q.codebook_loss).unwrap();
    assert!(g.of(xv).map_or(true, |g| g.iter().all(|v| *v == 0.0)));
    assert!(g.of_param(cb.entries()).unwrap().iter().any(|v| *v != 0.0));

    let g = tape.backward(q.commitment_loss).unwrap();
    assert!(g.of_param(cb.entries()).map_or(true, |g| g.iter().all(|v| *v == 0.0)));
    assert!(g.of(xv).unwrap().iter().any(|v| *v != 0.0));

    // Straight-through: d(Σ out)/dx is all ones.
    let s = tape.sum(q.output);
    let g = tape.backward(s).unwrap();
    assert!(g.of(xv).unwrap().iter().all(|v| *v == 1.0));
}

#[test]
fn lfq_examples() {
    let r = lfq_quantize(&[0.3, -0.2, 0.0], 3).unwrap();
    assert_eq!(r.quantized, vec![1.0, -1.0, 1.0]);
    assert_eq!(r.indices, vec![0b101]);
    assert!(matches!(lfq_quantize(&[0.0; 31], 31), Err(Error::IndexOverflow { .. })));
    assert!(lfq_quantize(&[0.0; LFQ_MAX_DIM], LFQ_MAX_DIM).is_ok());
}

#[test]
fn uniform_data_bin_error_matches_quantization_noise() {
    let spec = BinSpec::unit(3);
    let mut r = rng(5);
    let n = 20_000;
    let mut se = 0.0;
    for _ in 0..n {
        let x: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = spec.decode(&spec.encode(&x).unwrap()).unwrap();
        se += x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let mse = se / (3 * n) as f64;
    let w = spec.width(0);
    assert!((mse / (w * w / 12.0) - 1.0).abs() < 0.1, "mse {mse}");
}

#[test]
fn perplexity_extremes() {
    assert!((perplexity(&[5, 5, 5, 5]).unwrap() - 4.0).abs() < 1e-12);
    assert!((perplexity(&[9, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
    assert!(perplexity(&[0, 0]).is_err());
    let cb = Codebook::new(8, 2, &mut rng(0)).unwrap();
    assert!(codebook_perplexity(&cb).is_err());
}

proptest! {
    #[test]
    fn bin_round_trip_within_half_width(xs in proptest::collection::vec(-3.0f64..3.0, 1..8)) {
        let spec = BinSpec::unit(xs.len());
        let y = spec.decode(&spec.encode(&xs).unwrap()).unwrap();
        for (a, b) in xs.iter().zip(&y) {
            prop_assert!((a.clamp(-1.0, 1.0) - b).abs() <= spec.width(0) / 2.0 + 1e-12);
        }
    }

    #[test]
    fn lfq_outputs_are_signs(xs in proptest::collection::vec(-2.0f64..2.0, 6)) {
        let r = lfq_quantize(&xs, 6).unwrap();
        prop_assert!(r.quantized.iter().all(|v| *v == 1.0 || *v == -1.0));
        prop_assert!(r.indices[0] < 64);
    }
}
