#![allow(dead_code)]

use drl_core::model::{ArchConfig, Batch, Model, ModelConfig, ModelDims, ModelMeta};
use drl_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(d_u: usize, include_u: bool) -> ModelConfig {
    ModelConfig {
        d_z: 2,
        d_u,
        include_u,
        include_action_likelihood: true,
        arch: ArchConfig {
            conv_channels: vec![],
            kernel: 3,
            branch_width: 6,
            trunk: vec![6],
            decoder: vec![6],
            lstm: 4,
        },
        ..Default::default()
    }
}

pub fn tiny_dims(d_u: usize) -> ModelDims {
    ModelDims {
        d_x: 4,
        d_a: 1,
        d_r: 1,
        d_z: 2,
        d_u,
        t: 3,
        height: 2,
        width: 2,
    }
}

pub fn tiny_model(seed: u64, d_u: usize, include_u: bool) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(
        tiny_config(d_u, include_u),
        tiny_dims(d_u),
        ModelMeta::default(),
        &mut rng,
    )
    .unwrap()
}

pub fn random_batch(seed: u64, b: usize, t: usize, d_x: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |cols: usize, lo: f64, hi: f64| {
        Tensor::matrix(b, cols, (0..b * cols).map(|_| rng.gen_range(lo..hi)).collect())
    };
    let x = (0..t).map(|_| m(d_x, 0.0, 1.0)).collect();
    let a = (0..t).map(|_| m(1, -1.0, 1.0)).collect();
    let r = (0..t).map(|_| m(1, 0.0, 1.0)).collect();
    Batch {
        x,
        a,
        r,
        u: vec![0; b],
    }
}

pub fn logmeanexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Standard error of `log(mean(exp(v)))` by the delta method.
pub fn logmeanexp_se(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt() / mean
}

pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
