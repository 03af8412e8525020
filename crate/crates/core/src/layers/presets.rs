//! The two pruning-study architectures, with ReLU after every hidden layer.

use super::{LayerSpec, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::Padding;

/// 784 → 256 → 256 → 10 dense flipout network (538,122 parameters).
pub fn bnn_fc<T: Scalar>() -> ModelGraph<T> {
    ModelGraph::new(
        &[784],
        vec![
            ("den_1".into(), LayerSpec::dense(784, 256)),
            ("relu_1".into(), LayerSpec::Relu),
            ("den_2".into(), LayerSpec::dense(256, 256)),
            ("relu_2".into(), LayerSpec::Relu),
            ("den_3".into(), LayerSpec::dense(256, 10)),
        ],
    )
    .expect("preset is consistent")
}

/// 28×28×1 → conv 5×5/2 → pool 2×2/2 → conv 5×5/1 → dense 10, all valid padding.
///
/// `filters` is 256 for the reference geometry; the flatten width is `4·filters`.
pub fn bnn_conv<T: Scalar>(filters: usize) -> ModelGraph<T> {
    ModelGraph::new(
        &[28, 28, 1],
        vec![
            ("Conv_1".into(), LayerSpec::conv(5, 1, filters, 2, Padding::Valid)),
            ("relu_1".into(), LayerSpec::Relu),
            ("Max_I_1".into(), LayerSpec::MaxPool2d { window: 2, stride: 2 }),
            ("Conv_2".into(), LayerSpec::conv(5, filters, filters, 1, Padding::Valid)),
            ("relu_2".into(), LayerSpec::Relu),
            ("flatten".into(), LayerSpec::Flatten),
            ("Dense_I_4".into(), LayerSpec::dense(4 * filters, 10)),
        ],
    )
    .expect("preset is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_total_matches_table() {
        assert_eq!(bnn_fc::<f32>().param_count(), 538_122);
        assert_eq!(bnn_fc::<f32>().variational_weight_count(), 268_800);
    }

    #[test]
    fn conv_reference_geometry() {
        let g = bnn_conv::<f32>(256);
        assert_eq!(g.output_shape(), vec![10]);
        let counts: Vec<usize> = g.layers().iter().map(|l| l.spec.param_count()).collect();
        assert_eq!(counts, vec![13_056, 0, 0, 3_277_056, 0, 0, 20_490]);
    }
}
