use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NetError;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    x
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the cached pre- and post-activation.
    #[inline]
    fn derivative<S: Scalar>(self, pre: S, post: S) -> S {
        match self {
            Activation::Relu => {
                if pre > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => S::one() - post * post,
            Activation::Identity => S::one(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    /// Dense layers keep an all-ones mask and are never touched by growth or pruning.
    pub force_dense: bool,
}

impl LayerSpec {
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation, force_dense: bool) -> Self {
        Self {
            fan_in,
            fan_out,
            activation,
            force_dense,
        }
    }

    pub fn size(&self) -> usize {
        self.fan_in * self.fan_out
    }
}

/// Builds the usual MLP spec: ReLU hidden layers, dense first and last layer,
/// every interior layer sparse-capable.
pub fn mlp_spec(input: usize, hidden: &[usize], output: usize, output_activation: Activation) -> Vec<LayerSpec> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    let n = dims.len() - 1;
    (0..n)
        .map(|i| {
            let activation = if i + 1 == n { output_activation } else { Activation::Relu };
            LayerSpec::new(dims[i], dims[i + 1], activation, i == 0 || i + 1 == n)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MaskedLayer<S: Scalar> {
    pub spec: LayerSpec,
    /// `fan_out x fan_in`; stored values of masked-out coordinates are kept but never used.
    pub weights: Array2<S>,
    pub bias: Array1<S>,
    pub mask: Array2<bool>,
    /// `s_l = 1 / sqrt(fan_in)`
    pub clip_bound: S,
}

impl<S: Scalar> MaskedLayer<S> {
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self, NetError> {
        if spec.fan_in == 0 || spec.fan_out == 0 {
            return Err(NetError::EmptyLayer {
                fan_in: spec.fan_in,
                fan_out: spec.fan_out,
            });
        }
        let mut layer = Self {
            spec,
            weights: Array2::zeros((spec.fan_out, spec.fan_in)),
            bias: Array1::zeros(spec.fan_out),
            mask: Array2::from_elem((spec.fan_out, spec.fan_in), true),
            clip_bound: S::one() / S::of(spec.fan_in as f64).sqrt(),
        };
        layer.reinit_weights(rng);
        Ok(layer)
    }

    /// Half-width of the uniform init distribution, `1 / sqrt(fan_in)`.
    pub fn init_bound(&self) -> S {
        S::one() / S::of(self.spec.fan_in as f64).sqrt()
    }

    pub fn sample_init_weight<R: Rng + ?Sized>(&self, rng: &mut R) -> S {
        let b = self.init_bound();
        rng.random_range(-b..=b)
    }

    /// Redraws every stored weight (masked or not) and zeroes the bias.
    pub fn reinit_weights<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let b = self.init_bound();
        for w in self.weights.iter_mut() {
            *w = rng.random_range(-b..=b);
        }
        self.bias.fill(S::zero());
    }

    pub fn effective_weights(&self) -> Array2<S> {
        let mut eff = Array2::zeros(self.weights.raw_dim());
        Zip::from(&mut eff)
            .and(&self.weights)
            .and(&self.mask)
            .for_each(|e, &w, &m| {
                if m {
                    *e = w;
                }
            });
        eff
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn density(&self) -> f64 {
        self.active_count() as f64 / self.mask.len() as f64
    }

    /// Clamps every active weight into `[-kappa * s_l, kappa * s_l]`. Biases are never clipped.
    pub fn clip_weights(&mut self, kappa: S) {
        let bound = kappa * self.clip_bound;
        Zip::from(&mut self.weights)
            .and(&self.mask)
            .for_each(|w, &m| {
                if m {
                    *w = w.max(-bound).min(bound);
                }
            });
    }

    /// Largest `|w| / s_l` over active weights; `<= kappa` after clipping.
    pub fn max_active_ratio(&self) -> S {
        let mut best = S::zero();
        Zip::from(&self.weights).and(&self.mask).for_each(|&w, &m| {
            if m && w.abs() > best {
                best = w.abs();
            }
        });
        best / self.clip_bound
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MaskedNetwork<S: Scalar> {
    pub layers: Vec<MaskedLayer<S>>,
}

/// Intermediates of one forward pass, consumed by [`MaskedNetwork::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<S: Scalar> {
    pub input: Array2<S>,
    pub pre: Vec<Array2<S>>,
    pub post: Vec<Array2<S>>,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    pub fn output(&self) -> &Array2<S> {
        self.post.last().expect("cache of a non-empty network")
    }
}

/// Dense parameter gradients: every coordinate is populated, masked or not.
#[derive(Clone, Debug, PartialEq)]
pub struct FullGradients<S: Scalar> {
    pub weights: Vec<Array2<S>>,
    pub biases: Vec<Array1<S>>,
    /// Gradient with respect to the network input, `B x fan_in`.
    pub input: Array2<S>,
}

impl<S: Scalar> FullGradients<S> {
    pub fn zeros_like(net: &MaskedNetwork<S>, batch: usize) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            input: Array2::zeros((batch, net.input_dim())),
        }
    }

    /// Squared L2 norm over parameter gradients (input gradient excluded).
    pub fn param_norm_sq(&self) -> S {
        let w = self
            .weights
            .iter()
            .flat_map(|g| g.iter())
            .fold(S::zero(), |acc, &g| acc + g * g);
        self.biases.iter().flat_map(|g| g.iter()).fold(w, |acc, &g| acc + g * g)
    }
}

impl<S: Scalar> MaskedNetwork<S> {
    pub fn build(spec: &[LayerSpec], seed: u64) -> Result<Self, NetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with_rng(spec, &mut rng)
    }

    pub fn build_with_rng<R: Rng + ?Sized>(spec: &[LayerSpec], rng: &mut R) -> Result<Self, NetError> {
        validate_spec(spec)?;
        let layers = spec
            .iter()
            .map(|&ls| MaskedLayer::new(ls, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { layers })
    }

    pub fn spec(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.fan_out
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn num_biases(&self) -> usize {
        self.layers.iter().map(|l| l.bias.len()).sum()
    }

    pub fn masks(&self) -> Vec<Array2<bool>> {
        self.layers.iter().map(|l| l.mask.clone()).collect()
    }

    pub fn active_count(&self) -> usize {
        self.layers.iter().map(|l| l.active_count()).sum()
    }

    pub fn density(&self) -> f64 {
        self.active_count() as f64 / self.num_weights() as f64
    }

    pub fn clip_weights(&mut self, kappa: S) {
        for layer in &mut self.layers {
            layer.clip_weights(kappa);
        }
    }

    /// Runs the masked forward pass and keeps every intermediate for backprop.
    pub fn forward(&self, batch: ArrayView2<'_, S>) -> Result<(Array2<S>, ForwardCache<S>), NetError> {
        if batch.ncols() != self.input_dim() {
            return Err(NetError::ShapeMismatch {
                what: "input batch width",
                expected: self.input_dim(),
                got: batch.ncols(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<S>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { batch.view() } else { post[i - 1].view() };
            let mut z = x.dot(&layer.effective_weights().t());
            z += &layer.bias;
            let act = layer.spec.activation;
            let h = z.mapv(|v| act.apply(v));
            pre.push(z);
            post.push(h);
        }
        let out = post.last().expect("validated non-empty").clone();
        Ok((
            out,
            ForwardCache {
                input: batch.to_owned(),
                pre,
                post,
            },
        ))
    }

    /// Output only; skips building a cache.
    pub fn predict(&self, batch: ArrayView2<'_, S>) -> Result<Array2<S>, NetError> {
        if batch.ncols() != self.input_dim() {
            return Err(NetError::ShapeMismatch {
                what: "input batch width",
                expected: self.input_dim(),
                got: batch.ncols(),
            });
        }
        let mut x = batch.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.effective_weights().t());
            z += &layer.bias;
            let act = layer.spec.activation;
            z.mapv_inplace(|v| act.apply(v));
            x = z;
        }
        Ok(x)
    }

    /// Backpropagates `output_grad = dL/d(output)`.
    ///
    /// Activation gradients flow through the masked graph, but weight
    /// gradients `dL/dw_ij = delta_i * x_j` are recorded for every coordinate,
    /// including the ones the mask currently switches off. Growth selection
    /// ranks inactive coordinates by exactly these values.
    pub fn backward(&self, cache: &ForwardCache<S>, output_grad: ArrayView2<'_, S>) -> Result<FullGradients<S>, NetError> {
        if cache.pre.len() != self.layers.len() {
            return Err(NetError::StaleCache {
                reason: format!("cache has {} layers, network has {}", cache.pre.len(), self.layers.len()),
            });
        }
        let batch = cache.batch_size();
        if output_grad.nrows() != batch || output_grad.ncols() != self.output_dim() {
            return Err(NetError::StaleCache {
                reason: format!(
                    "output gradient is {}x{}, cache expects {}x{}",
                    output_grad.nrows(),
                    output_grad.ncols(),
                    batch,
                    self.output_dim()
                ),
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if cache.pre[i].dim() != (batch, layer.spec.fan_out) {
                return Err(NetError::StaleCache {
                    reason: format!("layer {i} activations do not match the network"),
                });
            }
        }

        let n = self.layers.len();
        let mut weights = vec![Array2::zeros((0, 0)); n];
        let mut biases = vec![Array1::zeros(0); n];
        let mut upstream = output_grad.to_owned();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let act = layer.spec.activation;
            let mut delta = upstream;
            Zip::from(&mut delta)
                .and(&cache.pre[i])
                .and(&cache.post[i])
                .for_each(|d, &z, &h| *d *= act.derivative(z, h));
            let x = if i == 0 { cache.input.view() } else { cache.post[i - 1].view() };
            weights[i] = delta.t().dot(&x);
            biases[i] = delta.sum_axis(Axis(0));
            upstream = delta.dot(&layer.effective_weights());
        }
        Ok(FullGradients {
            weights,
            biases,
            input: upstream,
        })
    }

    /// Soft update `self <- (1 - rho) * self + rho * online` on active coordinates and biases.
    pub fn polyak_from(&mut self, online: &MaskedNetwork<S>, rho: S) -> Result<(), NetError> {
        if self.spec() != online.spec() {
            return Err(NetError::SpecMismatch);
        }
        let keep = S::one() - rho;
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weights)
                .and(&o.weights)
                .and(&o.mask)
                .for_each(|tw, &ow, &m| {
                    if m {
                        *tw = keep * *tw + rho * ow;
                    }
                });
            Zip::from(&mut t.bias)
                .and(&o.bias)
                .for_each(|tb, &ob| *tb = keep * *tb + rho * ob);
        }
        Ok(())
    }

    /// Copies masks from `online`; coordinates that became active take the online value.
    pub fn sync_masks_from(&mut self, online: &MaskedNetwork<S>) -> Result<(), NetError> {
        if self.spec() != online.spec() {
            return Err(NetError::SpecMismatch);
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weights)
                .and(&mut t.mask)
                .and(&o.weights)
                .and(&o.mask)
                .for_each(|tw, tm, &ow, &om| {
                    if om && !*tm {
                        *tw = ow;
                    }
                    *tm = om;
                });
        }
        Ok(())
    }

    /// Flattens active weights and all biases; used for change detection in tests and hooks.
    pub fn flat_params(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_weights() + self.num_biases());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// View of the first `cols` input columns of an input-gradient matrix.
    pub fn input_grad_columns(grads: &FullGradients<S>, start: usize, cols: usize) -> Array2<S> {
        grads.input.slice(s![.., start..start + cols]).to_owned()
    }
}

fn validate_spec(spec: &[LayerSpec]) -> Result<(), NetError> {
    if spec.is_empty() {
        return Err(NetError::EmptySpec);
    }
    for (i, pair) in spec.windows(2).enumerate() {
        if pair[0].fan_out != pair[1].fan_in {
            return Err(NetError::DimensionMismatch {
                layer: i + 1,
                expected: pair[0].fan_out,
                got: pair[1].fan_in,
            });
        }
    }
    Ok(())
}
