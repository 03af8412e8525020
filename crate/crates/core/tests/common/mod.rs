#![allow(dead_code)]

use bnn_core::io::Dataset;
use bnn_core::layers::{InitConfig, LayerSpec};
use bnn_core::rng::sample_normal;
use bnn_core::tensor::Padding;
use bnn_core::{ModelGraph, Scalar, SeededRng, Tensor};

/// `n` points in `dim` dimensions from `classes` unit-variance blobs whose
/// centres sit at distance 3 along distinct axes.
pub fn blobs<T: Scalar>(n: usize, dim: usize, classes: usize, seed: u64) -> Dataset<T> {
    let mut rng = SeededRng::new(seed, 0);
    let noise: Tensor<f64> = sample_normal(&mut rng, &[n, dim]);
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % classes).collect();
    let mut data = noise.data().to_vec();
    for (i, &l) in labels.iter().enumerate() {
        data[i * dim + l % dim] += 3.0;
    }
    let images = Tensor::<T>::from_f64(&[n, dim], &data).unwrap();
    Dataset::new(images, labels, "blobs").unwrap()
}

/// Conv → ReLU → pool → flatten → dense → ReLU → dense on 6×6×1 inputs; 179 parameters.
pub fn toy_graph(seed: u64) -> ModelGraph<f64> {
    let mut g = ModelGraph::new(
        &[6, 6, 1],
        vec![
            ("conv".into(), LayerSpec::conv(3, 1, 2, 1, Padding::Valid)),
            ("relu_1".into(), LayerSpec::Relu),
            ("pool".into(), LayerSpec::MaxPool2d { window: 2, stride: 2 }),
            ("flatten".into(), LayerSpec::Flatten),
            ("hidden".into(), LayerSpec::dense(8, 6)),
            ("relu_2".into(), LayerSpec::Relu),
            ("out".into(), LayerSpec::dense(6, 3)),
        ],
    )
    .unwrap();
    let cfg = InitConfig {
        mu_std: 0.5,
        rho_mean: -1.5,
        rho_std: 0.3,
    };
    g.init_params(&mut SeededRng::new(seed, 1), &cfg).unwrap();
    g
}
