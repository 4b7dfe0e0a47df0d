use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::network::{FullGradients, MaskedNetwork};
use super::NetError;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LayerMoments<S: Scalar> {
    pub m_w: Array2<S>,
    pub v_w: Array2<S>,
    pub m_b: Array1<S>,
    pub v_b: Array1<S>,
}

impl<S: Scalar> LayerMoments<S> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m_w: Array2::zeros((rows, cols)),
            v_w: Array2::zeros((rows, cols)),
            m_b: Array1::zeros(rows),
            v_b: Array1::zeros(rows),
        }
    }

    pub fn reset(&mut self) {
        self.m_w.fill(S::zero());
        self.v_w.fill(S::zero());
        self.m_b.fill(S::zero());
        self.v_b.fill(S::zero());
    }

    pub fn reset_weight(&mut self, row: usize, col: usize) {
        self.m_w[[row, col]] = S::zero();
        self.v_w[[row, col]] = S::zero();
    }
}

/// Adam moments for one network. Moments of masked-out coordinates stay at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamState<S: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub layers: Vec<LayerMoments<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(net: &MaskedNetwork<S>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            layers: net
                .layers
                .iter()
                .map(|l| LayerMoments::zeros(l.spec.fan_out, l.spec.fan_in))
                .collect(),
        }
    }

    fn check_shapes(&self, net: &MaskedNetwork<S>, grads: &FullGradients<S>) -> Result<(), NetError> {
        if self.layers.len() != net.layers.len() || grads.weights.len() != net.layers.len() {
            return Err(NetError::ShapeMismatch {
                what: "optimizer layer count",
                expected: net.layers.len(),
                got: self.layers.len().min(grads.weights.len()),
            });
        }
        for (i, (m, l)) in self.layers.iter().zip(&net.layers).enumerate() {
            if m.m_w.dim() != l.weights.dim() || grads.weights[i].dim() != l.weights.dim() {
                return Err(NetError::ShapeMismatch {
                    what: "optimizer weight shape",
                    expected: l.weights.len(),
                    got: m.m_w.len(),
                });
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam step on active coordinates and biases, then an
    /// optional clip to `kappa * s_l` in every layer.
    pub fn update(&mut self, net: &mut MaskedNetwork<S>, grads: &FullGradients<S>, clip_kappa: Option<S>) -> Result<(), NetError> {
        self.check_shapes(net, grads)?;
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let correction1 = S::one() - S::of(c.beta1.powf(self.step as f64));
        let correction2 = S::one() - S::of(c.beta2.powf(self.step as f64));
        let lr = S::of(c.lr);
        let eps = S::of(c.eps);
        let adam = |w: &mut S, m: &mut S, v: &mut S, g: S| {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        };

        for ((layer, mom), (gw, gb)) in net
            .layers
            .iter_mut()
            .zip(self.layers.iter_mut())
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            Zip::from(&mut layer.weights)
                .and(&layer.mask)
                .and(&mut mom.m_w)
                .and(&mut mom.v_w)
                .and(gw)
                .for_each(|w, &active, m, v, &g| {
                    if active {
                        adam(w, m, v, g);
                    }
                });
            Zip::from(&mut layer.bias)
                .and(&mut mom.m_b)
                .and(&mut mom.v_b)
                .and(gb)
                .for_each(|b, m, v, &g| adam(b, m, v, g));
            if let Some(kappa) = clip_kappa {
                layer.clip_weights(kappa);
            }
        }
        Ok(())
    }
}
