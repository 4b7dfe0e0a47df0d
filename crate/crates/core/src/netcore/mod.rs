//! Masked multilayer perceptron: forward pass with cached activations, dense
//! parameter gradients, Adam restricted to active connections, weight
//! clipping and polyak averaging.

mod adam;
mod network;

pub use adam::{AdamConfig, AdamState, LayerMoments};
pub use network::{mlp_spec, Activation, FullGradients, ForwardCache, LayerSpec, MaskedLayer, MaskedNetwork};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("network spec is empty")]
    EmptySpec,
    #[error("layer with zero width ({fan_in}x{fan_out})")]
    EmptyLayer { fan_in: usize, fan_out: usize },
    #[error("layer {layer} expects fan_in {expected} but has {got}")]
    DimensionMismatch { layer: usize, expected: usize, got: usize },
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("stale forward cache: {reason}")]
    StaleCache { reason: String },
    #[error("networks have different layer specs")]
    SpecMismatch,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn two_layer() -> MaskedNetwork<f64> {
        let spec = [
            LayerSpec::new(2, 3, Activation::Relu, true),
            LayerSpec::new(3, 1, Activation::Identity, true),
        ];
        MaskedNetwork::build(&spec, 0).unwrap()
    }

    fn identity_unit(w: Array2<f64>, mask: Array2<bool>) -> MaskedNetwork<f64> {
        let spec = LayerSpec::new(w.ncols(), w.nrows(), Activation::Identity, false);
        let mut net = MaskedNetwork::build(&[spec], 0).unwrap();
        net.layers[0].weights = w;
        net.layers[0].mask = mask;
        net
    }

    #[test]
    fn build_counts_parameters() {
        let net = two_layer();
        assert_eq!(net.layers.len(), 2);
        assert_eq!(net.num_weights(), 9);
        assert_eq!(net.num_biases(), 4);
        assert!(net.layers.iter().all(|l| l.mask.iter().all(|&m| m)));
        assert!(net.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        for l in &net.layers {
            let b = 1.0 / (l.spec.fan_in as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= b));
        }
    }

    #[test]
    fn clip_bound_uses_fan_in() {
        let net: MaskedNetwork<f64> = MaskedNetwork::build(&[LayerSpec::new(4, 2, Activation::Relu, true)], 1).unwrap();
        assert_eq!(net.layers[0].clip_bound, 0.5);
    }

    #[test]
    fn build_rejects_dimension_mismatch() {
        let spec = [
            LayerSpec::new(2, 3, Activation::Relu, true),
            LayerSpec::new(4, 1, Activation::Identity, true),
        ];
        let err = MaskedNetwork::<f64>::build(&spec, 0).unwrap_err();
        assert_eq!(err, NetError::DimensionMismatch { layer: 1, expected: 3, got: 4 });
        assert_eq!(MaskedNetwork::<f64>::build(&[], 0).unwrap_err(), NetError::EmptySpec);
    }

    #[test]
    fn forward_drops_masked_columns() {
        let net = identity_unit(array![[1.0, 2.0]], array![[true, false]]);
        let (out, _) = net.forward(array![[3.0, 5.0]].view()).unwrap();
        assert_eq!(out, array![[3.0]]);
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
    }

    #[test]
    fn forward_cache_is_consistent() {
        let net = two_layer();
        let x = array![[0.3, -0.7], [1.0, 2.0]];
        let (out, cache) = net.forward(x.view()).unwrap();
        for (l, (pre, post)) in net.layers.iter().zip(cache.pre.iter().zip(&cache.post)) {
            assert_eq!(post, &pre.mapv(|v| l.spec.activation.apply(v)));
        }
        assert_eq!(&out, cache.output());
        assert_eq!(net.predict(x.view()).unwrap(), out);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = two_layer();
        assert!(matches!(
            net.forward(array![[1.0, 2.0, 3.0]].view()),
            Err(NetError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn masked_coordinate_still_gets_gradient() {
        let net = identity_unit(array![[0.7]], array![[false]]);
        let (_, cache) = net.forward(array![[2.0]].view()).unwrap();
        let grads = net.backward(&cache, array![[1.0]].view()).unwrap();
        assert_eq!(grads.weights[0][[0, 0]], 2.0);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let net = two_layer();
        let (_, cache) = net.forward(array![[0.1, 0.2]].view()).unwrap();
        let grads = net.backward(&cache, Array2::zeros((1, 1)).view()).unwrap();
        assert_eq!(grads.param_norm_sq(), 0.0);
        assert!(grads.input.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_detects_stale_cache() {
        let net = two_layer();
        let (_, cache) = net.forward(array![[0.1, 0.2]].view()).unwrap();
        let err = net.backward(&cache, Array2::zeros((2, 1)).view()).unwrap_err();
        assert!(matches!(err, NetError::StaleCache { .. }));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = two_layer();
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let grads = FullGradients::zeros_like(&net, 1);
        adam.update(&mut net, &grads, None).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_skips_masked_coordinates() {
        let mut net = identity_unit(array![[0.3, 0.4]], array![[true, false]]);
        let mut adam = AdamState::new(&net, AdamConfig::with_lr(0.1));
        let mut grads = FullGradients::zeros_like(&net, 1);
        grads.weights[0][[0, 1]] = 1e9;
        grads.weights[0][[0, 0]] = 1.0;
        adam.update(&mut net, &grads, None).unwrap();
        assert_eq!(net.layers[0].weights[[0, 1]], 0.4);
        assert_eq!(adam.layers[0].m_w[[0, 1]], 0.0);
        assert_eq!(adam.layers[0].v_w[[0, 1]], 0.0);
        assert_ne!(net.layers[0].weights[[0, 0]], 0.3);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        // m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1.
        let mut net = identity_unit(array![[0.0]], array![[true]]);
        let mut adam = AdamState::new(&net, AdamConfig::with_lr(0.1));
        let mut grads = FullGradients::zeros_like(&net, 1);
        grads.weights[0][[0, 0]] = 1.0;
        adam.update(&mut net, &grads, None).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert_abs_diff_eq!(net.layers[0].weights[[0, 0]], expected, epsilon = 1e-15);
    }

    #[test]
    fn clip_examples() {
        let mut net: MaskedNetwork<f64> = MaskedNetwork::build(&[LayerSpec::new(4, 1, Activation::Relu, false)], 0).unwrap();
        net.layers[0].weights = array![[2.0, -0.1, -7.0, 0.3]];
        net.layers[0].mask = array![[true, true, true, false]];
        net.layers[0].bias[0] = 10.0;
        net.layers[0].clip_weights(3.0);
        assert_eq!(net.layers[0].weights, array![[1.5, -0.1, -1.5, 0.3]]);
        assert_eq!(net.layers[0].bias[0], 10.0);
    }

    #[test]
    fn adam_update_clips() {
        let mut net = identity_unit(array![[0.99]], array![[true]]);
        let mut adam = AdamState::new(&net, AdamConfig::with_lr(10.0));
        let mut grads = FullGradients::zeros_like(&net, 1);
        grads.weights[0][[0, 0]] = -1.0;
        adam.update(&mut net, &grads, Some(1.0)).unwrap();
        assert_eq!(net.layers[0].weights[[0, 0]], 1.0);
    }

    #[test]
    fn polyak_examples() {
        let online = identity_unit(array![[1.0]], array![[true]]);
        let mut target = identity_unit(array![[0.0]], array![[true]]);
        target.polyak_from(&online, 0.005).unwrap();
        assert_abs_diff_eq!(target.layers[0].weights[[0, 0]], 0.005, epsilon = 1e-15);

        let mut full = identity_unit(array![[0.0]], array![[true]]);
        full.polyak_from(&online, 1.0).unwrap();
        assert_eq!(full.layers[0].weights, online.layers[0].weights);

        let mut same = online.clone();
        same.polyak_from(&online, 0.3).unwrap();
        assert_eq!(same, online);

        let mut other = two_layer();
        assert_eq!(other.polyak_from(&online, 0.1).unwrap_err(), NetError::SpecMismatch);
    }

    #[test]
    fn mask_sync_adopts_new_connections() {
        let online = identity_unit(array![[1.0, 2.0]], array![[true, true]]);
        let mut target = identity_unit(array![[0.5, 9.0]], array![[true, false]]);
        target.sync_masks_from(&online).unwrap();
        assert_eq!(target.layers[0].mask, online.layers[0].mask);
        assert_eq!(target.layers[0].weights, array![[0.5, 2.0]]);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = mlp_spec(3, &[8, 8], 2, Activation::Tanh);
        let a = MaskedNetwork::<f64>::build(&spec, 42).unwrap();
        let b = MaskedNetwork::<f64>::build(&spec, 42).unwrap();
        let c = MaskedNetwork::<f64>::build(&spec, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mlp_spec_shape() {
        let spec = mlp_spec(3, &[8, 6], 1, Activation::Identity);
        assert_eq!(spec.len(), 3);
        assert!(spec[0].force_dense && !spec[1].force_dense && spec[2].force_dense);
        assert_eq!(spec[1].activation, Activation::Relu);
        assert_eq!(spec[2].activation, Activation::Identity);
    }

    #[test]
    fn f32_network_runs() {
        let spec = mlp_spec(2, &[4], 1, Activation::Identity);
        let net = MaskedNetwork::<f32>::build(&spec, 0).unwrap();
        let (out, cache) = net.forward(ndarray::array![[0.5f32, -0.5]].view()).unwrap();
        let g = net.backward(&cache, Array2::ones((1, 1)).view()).unwrap();
        assert_eq!(out.dim(), (1, 1));
        assert_eq!(g.weights.len(), 2);
    }
}
