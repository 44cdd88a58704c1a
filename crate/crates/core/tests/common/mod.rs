//! Loop-level reference arithmetic shared by the oracle tests.
#![allow(dead_code)]

use crosstok_core::{PointCloud, RngStream, Tensor};

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `y = x W + b` one output at a time.
pub fn linear(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.cols())
        .map(|o| b.data()[o] + (0..w.rows()).map(|i| x[i] * w.data()[i * w.cols() + o]).sum::<f64>())
        .collect()
}

pub fn layer_norm(x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g.data()[i] + b.data()[i])
        .collect()
}

pub fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= rel * x.abs().max(y.abs()).max(1e-12))
}

pub fn random_cloud(n: usize, c: usize, rng: &mut RngStream) -> PointCloud<f64> {
    PointCloud::new(
        (0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect(),
        (0..n * c).map(|_| rng.normal()).collect(),
        c,
    )
    .unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
}
