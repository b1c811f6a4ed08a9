//! Brute-force oracles and fixtures shared by the integration targets.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;

use distill_dynamics::rng::StreamRng;
use distill_dynamics::tensor::{ActivationStack, Precision};
use ndarray::{Array4, Array5, ArrayView2};
use rustfft::num_complex::Complex64;

/// `F[k] = (1/C) sum_c a[c] exp(-2 pi i k c / C)` by direct summation.
pub fn naive_channel_dft(a: &[f64]) -> Vec<Complex64> {
    let n = a.len();
    (0..n)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (c, &v) in a.iter().enumerate() {
                let theta = -2.0 * PI * ((k * c) % n) as f64 / n as f64;
                acc += Complex64::from_polar(v, theta);
            }
            acc / n as f64
        })
        .collect()
}

/// Unnormalized 2-D half spectrum by direct summation, shape `(H, W/2+1)`.
pub fn naive_rfft2(x: ArrayView2<'_, f64>) -> Vec<Vec<Complex64>> {
    let (hh, ww) = x.dim();
    (0..hh)
        .map(|p| {
            (0..ww / 2 + 1)
                .map(|q| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for h in 0..hh {
                        for w in 0..ww {
                            let phase = ((p * h) % hh) as f64 / hh as f64 + ((q * w) % ww) as f64 / ww as f64;
                            acc += Complex64::from_polar(x[[h, w]], -2.0 * PI * phase);
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Histogram entropy in bits: bins located by counting crossed edges, then
/// `-sum p log2 p`.
pub fn oracle_entropy(values: &[f64], min: f64, max: f64, bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    let width = (max - min) / bins as f64;
    for &v in values {
        let n = if max <= min {
            0
        } else {
            (1..bins).filter(|&n| v >= min + n as f64 * width).count()
        };
        counts[n] += 1;
    }
    let total = values.len() as f64;
    -counts
        .iter()
        .filter(|&&h| h > 0)
        .map(|&h| {
            let p = h as f64 / total;
            p * p.log2()
        })
        .sum::<f64>()
}

pub fn random_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
}

pub fn random_layer(seed: u64, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut rng = StreamRng::new(seed);
    Array4::from_shape_simple_fn(dim, || rng.uniform_in(-1.0, 1.0))
}

pub fn random_stack(seed: u64, dim: (usize, usize, usize, usize, usize)) -> ActivationStack {
    let mut rng = StreamRng::new(seed);
    let data = Array5::from_shape_simple_fn(dim, || rng.uniform_in(-1.0, 1.0));
    ActivationStack::with_default_names(data, Precision::F64).unwrap()
}

pub fn ddyn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ddyn"))
        .args(args)
        .output()
        .expect("spawn ddyn")
}

pub fn write_logits(path: &Path, logits: &[Vec<f64>], labels: &[usize]) {
    let value = serde_json::json!({ "logits": logits, "labels": labels });
    std::fs::write(path, serde_json::to_vec(&value).unwrap()).unwrap();
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}
