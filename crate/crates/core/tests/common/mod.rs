//! Shared oracles for the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use neuroplastic::netcore::{Activation, LayerSpec, MaskedNetwork};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// `L = sum(c * net(x))`.
pub fn weighted_output(net: &MaskedNetwork<f64>, x: ArrayView2<'_, f64>, c: &Array2<f64>) -> f64 {
    (net.predict(x).unwrap() * c).sum()
}

/// Random small network: 1 to 3 layers, at most `max_params` weights plus
/// biases, mixed ReLU and Tanh, random masks on every layer.
pub fn random_net<R: Rng>(rng: &mut R, max_params: usize) -> MaskedNetwork<f64> {
    loop {
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=4)];
        for _ in 0..depth {
            dims.push(rng.random_range(1..=4));
        }
        let params: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params > max_params {
            continue;
        }
        let spec: Vec<LayerSpec> = dims
            .windows(2)
            .map(|w| {
                let act = match rng.random_range(0..3) {
                    0 => Activation::Relu,
                    1 => Activation::Tanh,
                    _ => Activation::Identity,
                };
                LayerSpec::new(w[0], w[1], act, false)
            })
            .collect();
        let mut net = MaskedNetwork::build(&spec, rng.random()).unwrap();
        for layer in &mut net.layers {
            layer.mask.mapv_inplace(|_| rng.random_bool(0.6));
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        return net;
    }
}

/// True when no ReLU pre-activation is within `margin` of its kink, so
/// central differences never straddle it.
pub fn away_from_kinks(net: &MaskedNetwork<f64>, x: ArrayView2<'_, f64>, margin: f64) -> bool {
    let (_, cache) = net.forward(x).unwrap();
    net.layers
        .iter()
        .zip(&cache.pre)
        .all(|(l, z)| l.spec.activation != Activation::Relu || z.iter().all(|v| v.abs() > margin))
}

/// Central-difference derivative of `L` with respect to weight `(l, r, c)`.
///
/// An inactive coordinate is switched on at value 0 first, so the result is
/// the derivative of adding that connection: the quantity growth ranks by.
pub fn fd_weight(net: &MaskedNetwork<f64>, x: ArrayView2<'_, f64>, c: &Array2<f64>, l: usize, r: usize, col: usize) -> f64 {
    let mut probe = net.clone();
    let base = if probe.layers[l].mask[[r, col]] {
        probe.layers[l].weights[[r, col]]
    } else {
        probe.layers[l].mask[[r, col]] = true;
        0.0
    };
    probe.layers[l].weights[[r, col]] = base + FD_STEP;
    let up = weighted_output(&probe, x, c);
    probe.layers[l].weights[[r, col]] = base - FD_STEP;
    let down = weighted_output(&probe, x, c);
    (up - down) / (2.0 * FD_STEP)
}

pub fn fd_bias(net: &MaskedNetwork<f64>, x: ArrayView2<'_, f64>, c: &Array2<f64>, l: usize, i: usize) -> f64 {
    let mut probe = net.clone();
    let base = probe.layers[l].bias[i];
    probe.layers[l].bias[i] = base + FD_STEP;
    let up = weighted_output(&probe, x, c);
    probe.layers[l].bias[i] = base - FD_STEP;
    let down = weighted_output(&probe, x, c);
    (up - down) / (2.0 * FD_STEP)
}

pub fn fd_input(net: &MaskedNetwork<f64>, x: &Array2<f64>, c: &Array2<f64>, row: usize, col: usize) -> f64 {
    let mut xp = x.clone();
    xp[[row, col]] += FD_STEP;
    let up = weighted_output(net, xp.view(), c);
    xp[[row, col]] -= 2.0 * FD_STEP;
    let down = weighted_output(net, xp.view(), c);
    (up - down) / (2.0 * FD_STEP)
}

/// Relative error with a floor on the scale, so that gradients that are zero
/// up to rounding compare in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error over every weight, bias and input coordinate of a
/// random network, or `None` if the sampled inputs sit too close to a ReLU kink.
pub fn gradient_check<R: Rng>(rng: &mut R) -> Option<f64> {
    let net = random_net(rng, 64);
    let batch = rng.random_range(1..=3);
    let x = Array2::from_shape_fn((batch, net.input_dim()), |_| rng.random_range(-1.0..1.0));
    let c = Array2::from_shape_fn((batch, net.output_dim()), |_| rng.random_range(-1.0..1.0));
    if !away_from_kinks(&net, x.view(), 1e-3) {
        return None;
    }
    let (_, cache) = net.forward(x.view()).unwrap();
    let grads = net.backward(&cache, c.view()).unwrap();
    let mut worst: f64 = 0.0;
    for (l, layer) in net.layers.iter().enumerate() {
        for ((r, col), &g) in grads.weights[l].indexed_iter() {
            worst = worst.max(rel_err(g, fd_weight(&net, x.view(), &c, l, r, col)));
        }
        for i in 0..layer.bias.len() {
            worst = worst.max(rel_err(grads.biases[l][i], fd_bias(&net, x.view(), &c, l, i)));
        }
    }
    for ((r, col), &g) in grads.input.indexed_iter() {
        worst = worst.max(rel_err(g, fd_input(&net, &x, &c, r, col)));
    }
    Some(worst)
}

/// Deterministic rows of a metrics CSV with the trailing `wall_ms` column removed.
pub fn strip_wall_ms(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
        .collect()
}
