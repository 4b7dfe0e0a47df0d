//! Growth/prune controller for masked networks.
//!
//! One topology event per network:
//!
//! 1. budget `k_l = ceil(g(t) * inactive_l)` per sparse layer, with `g` cosine-annealed;
//! 2. grow set: the `k_l` inactive coordinates with largest full-gradient magnitude;
//! 3. prune set: every active edge into or out of a dormant hidden neuron;
//! 4. truncate the prune set to `floor(omega * |grow_l|)` per layer;
//! 5. apply both atomically, re-drawing weights and clearing optimizer moments.
//!
//! Force-dense layers never appear in either set.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{AdamState, LayerSpec, MaskedNetwork, NetError};
use crate::scalar::Scalar;

/// Slack for floating point products that are meant to land on integers
/// (`0.4 * 10`, `0.01 * 1000`).
const COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("grow coordinate ({layer},{row},{col}) is already active")]
    GrowActive { layer: usize, row: usize, col: usize },
    #[error("prune coordinate ({layer},{row},{col}) is not active")]
    PruneInactive { layer: usize, row: usize, col: usize },
    #[error("coordinate ({layer},{row},{col}) is in both grow and prune sets")]
    Overlap { layer: usize, row: usize, col: usize },
    #[error("layer {layer} is force-dense and cannot change topology")]
    DenseLayer { layer: usize },
    #[error("coordinate ({layer},{row},{col}) is out of range")]
    OutOfRange { layer: usize, row: usize, col: usize },
    #[error("set covers {got} layers, network has {expected}")]
    LayerCount { expected: usize, got: usize },
    #[error("probe batch is empty")]
    EmptyProbe,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthConfig {
    /// Initial sparsity of the sparse layers, `Sp`.
    pub initial_sparsity: f64,
    /// Steps between topology events, `Delta T`.
    pub interval: u64,
    /// Initial (and peak) growth fraction of the cosine schedule.
    pub alpha: f64,
    /// Optional override of the peak growth fraction; `alpha` is ignored when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grow_fraction: Option<f64>,
    /// Last step at which growth may fire. Filled with the run length when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_step: Option<u64>,
    /// Prune discount: at most `floor(omega * |grow|)` prunes per layer and event.
    pub omega: f64,
    /// Clip multiplier.
    pub kappa: f64,
    /// Dormancy threshold on post-activations.
    pub tau: f64,
    pub probe_batch_size: usize,
    pub weight_clipping: bool,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        Self {
            initial_sparsity: 0.75,
            interval: 5_000,
            alpha: 0.02,
            grow_fraction: None,
            end_step: None,
            omega: 0.4,
            kappa: 3.0,
            tau: 0.0,
            probe_batch_size: 128,
            weight_clipping: true,
        }
    }
}

impl GrowthConfig {
    pub fn end_step(&self) -> u64 {
        self.end_step.unwrap_or(u64::MAX)
    }

    /// Range checks; errors name the offending key.
    pub fn validate(&self) -> Result<(), String> {
        let c = self;
        if !(0.0..1.0).contains(&c.initial_sparsity) {
            return Err(format!("growth.initial_sparsity must be in [0, 1), got {}", c.initial_sparsity));
        }
        if c.interval < 1 {
            return Err("growth.interval must be >= 1, got 0".into());
        }
        if !(c.alpha > 0.0 && c.alpha <= 1.0) {
            return Err(format!("growth.alpha must be in (0, 1], got {}", c.alpha));
        }
        if let Some(f) = c.grow_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(format!("growth.grow_fraction must be in (0, 1], got {f}"));
            }
        }
        if let Some(end) = c.end_step {
            if end < c.interval {
                return Err(format!("growth.end_step must be >= growth.interval ({}), got {end}", c.interval));
            }
        }
        if !(0.0..1.0).contains(&c.omega) {
            return Err(format!("growth.omega must be in [0, 1), got {}", c.omega));
        }
        if !(c.kappa > 0.0 && c.kappa.is_finite()) {
            return Err(format!("growth.kappa must be > 0, got {}", c.kappa));
        }
        if !(c.tau >= 0.0 && c.tau.is_finite()) {
            return Err(format!("growth.tau must be >= 0, got {}", c.tau));
        }
        if c.probe_batch_size == 0 {
            return Err("growth.probe_batch_size must be >= 1, got 0".into());
        }
        Ok(())
    }

    /// Fraction of the remaining capacity grown at step `t`.
    pub fn growth_fraction(&self, t: u64) -> f64 {
        let end = self.end_step();
        match self.grow_fraction {
            Some(peak) => cosine_growth_fraction(t, end, 2.0) * peak / 2.0,
            None => cosine_growth_fraction(t, end, self.alpha),
        }
    }
}

/// `g(t) = alpha / 2 * (1 + cos(t * pi / t_end))`, zero past `t_end`.
pub fn cosine_growth_fraction(t: u64, t_end: u64, alpha: f64) -> f64 {
    if t > t_end {
        return 0.0;
    }
    if t_end == 0 {
        return alpha;
    }
    alpha / 2.0 * (1.0 + (t as f64 * PI / t_end as f64).cos())
}

/// `ceil(fraction * inactive)`, capped at `inactive`.
pub fn growth_budget(inactive: usize, fraction: f64) -> usize {
    if inactive == 0 || fraction <= 0.0 {
        return 0;
    }
    let k = (fraction * inactive as f64 - COUNT_EPS).ceil().max(0.0) as usize;
    k.min(inactive)
}

/// `floor(omega * grow)` with integer-landing slack.
pub fn prune_bound(omega: f64, grow: usize) -> usize {
    (omega * grow as f64 + COUNT_EPS).floor().max(0.0) as usize
}

/// Per-layer lists of `(row, col)` coordinates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionSet {
    pub layers: Vec<Vec<(usize, usize)>>,
}

pub type GrowSet = ConnectionSet;
pub type PruneSet = ConnectionSet;

impl ConnectionSet {
    pub fn empty(layers: usize) -> Self {
        Self {
            layers: vec![Vec::new(); layers],
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }
}

/// Erdos-Renyi masks: sparse-layer density proportional to
/// `(fan_in + fan_out) / (fan_in * fan_out)`, scaled so the sparse layers hold
/// `round((1 - sparsity) * total)` connections in total.
pub fn erdos_renyi_masks<R: Rng + ?Sized>(spec: &[LayerSpec], sparsity: f64, rng: &mut R) -> Vec<Array2<bool>> {
    let counts = erdos_renyi_counts(spec, sparsity);
    spec.iter()
        .zip(counts)
        .map(|(ls, count)| {
            let shape = (ls.fan_out, ls.fan_in);
            if ls.force_dense || count == ls.size() {
                return Array2::from_elem(shape, true);
            }
            let mut mask = Array2::from_elem(shape, false);
            for idx in sample(rng, ls.size(), count) {
                mask[[idx / ls.fan_in, idx % ls.fan_in]] = true;
            }
            mask
        })
        .collect()
}

/// Active-connection count per layer chosen by [`erdos_renyi_masks`].
pub fn erdos_renyi_counts(spec: &[LayerSpec], sparsity: f64) -> Vec<usize> {
    let sparse: Vec<usize> = (0..spec.len()).filter(|&i| !spec[i].force_dense).collect();
    let mut counts: Vec<usize> = spec.iter().map(LayerSpec::size).collect();
    if sparse.is_empty() || sparsity <= 0.0 {
        return counts;
    }
    let total: usize = sparse.iter().map(|&i| spec[i].size()).sum();
    let target = ((1.0 - sparsity) * total as f64).round() as usize;

    // Active count of layer l at scale c is min(size_l, c * (fan_in + fan_out)).
    let filled = |c: f64| -> f64 {
        sparse
            .iter()
            .map(|&i| {
                let ls = &spec[i];
                (c * (ls.fan_in + ls.fan_out) as f64).min(ls.size() as f64)
            })
            .sum()
    };
    let mut lo = 0.0;
    let mut hi = sparse
        .iter()
        .map(|&i| spec[i].size() as f64 / (spec[i].fan_in + spec[i].fan_out) as f64)
        .fold(0.0, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if filled(mid) < target as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = hi;

    // Largest-remainder rounding keeps the global total exact.
    let mut exact: Vec<(usize, f64)> = sparse
        .iter()
        .map(|&i| {
            let ls = &spec[i];
            (i, (c * (ls.fan_in + ls.fan_out) as f64).min(ls.size() as f64))
        })
        .collect();
    for &(i, x) in &exact {
        counts[i] = x.floor() as usize;
    }
    let assigned: usize = sparse.iter().map(|&i| counts[i]).sum();
    let mut missing = target.saturating_sub(assigned);
    exact.sort_by(|a, b| {
        let fa = a.1 - a.1.floor();
        let fb = b.1 - b.1.floor();
        fb.total_cmp(&fa).then(a.0.cmp(&b.0))
    });
    for &(i, _) in &exact {
        if missing == 0 {
            break;
        }
        if counts[i] < spec[i].size() {
            counts[i] += 1;
            missing -= 1;
        }
    }
    counts
}

/// Installs Erdos-Renyi masks in `net` and zeroes nothing else.
pub fn apply_initial_masks<S: Scalar, R: Rng + ?Sized>(net: &mut MaskedNetwork<S>, sparsity: f64, rng: &mut R) {
    let masks = erdos_renyi_masks(&net.spec(), sparsity, rng);
    for (layer, mask) in net.layers.iter_mut().zip(masks) {
        layer.mask = mask;
    }
}

fn inactive_count(mask: &Array2<bool>) -> usize {
    mask.iter().filter(|&&m| !m).count()
}

/// Growth budget for every layer of `net`; zero for force-dense layers.
pub fn layer_budgets<S: Scalar>(net: &MaskedNetwork<S>, fraction: f64) -> Vec<usize> {
    net.layers
        .iter()
        .map(|l| {
            if l.spec.force_dense {
                0
            } else {
                growth_budget(inactive_count(&l.mask), fraction)
            }
        })
        .collect()
}

/// Top-`k_l` inactive coordinates by `|gradient|`, ties broken by ascending `(row, col)`.
pub fn select_growth<S: Scalar>(grads: &[Array2<S>], net: &MaskedNetwork<S>, budgets: &[usize]) -> GrowSet {
    let mut set = GrowSet::empty(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let k = budgets.get(l).copied().unwrap_or(0);
        if layer.spec.force_dense || k == 0 {
            continue;
        }
        set.layers[l] = top_k_inactive(grads[l].view(), layer.mask.view(), k);
    }
    set
}

fn top_k_inactive<S: Scalar>(grad: ArrayView2<'_, S>, mask: ArrayView2<'_, bool>, k: usize) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = mask
        .indexed_iter()
        .filter(|(_, &m)| !m)
        .map(|((r, c), _)| {
            let g = grad[[r, c]].to_f64_lossy().abs();
            // NaN ranks below everything.
            (if g.is_nan() { -1.0 } else { g }, r, c)
        })
        .collect();
    let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2)));
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k, order);
        candidates.truncate(k);
    }
    candidates.sort_by(order);
    candidates.into_iter().map(|(_, r, c)| (r, c)).collect()
}

/// Uniformly chosen inactive coordinates, `k_l` per sparse layer, without replacement.
pub fn random_growth_select<S: Scalar, R: Rng + ?Sized>(net: &MaskedNetwork<S>, budgets: &[usize], rng: &mut R) -> GrowSet {
    let mut set = GrowSet::empty(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let k = budgets.get(l).copied().unwrap_or(0);
        if layer.spec.force_dense || k == 0 {
            continue;
        }
        let inactive: Vec<(usize, usize)> = layer
            .mask
            .indexed_iter()
            .filter(|(_, &m)| !m)
            .map(|(rc, _)| rc)
            .collect();
        let k = k.min(inactive.len());
        let mut picked: Vec<usize> = sample(rng, inactive.len(), k).into_vec();
        picked.sort_unstable();
        set.layers[l] = picked.into_iter().map(|i| inactive[i]).collect();
    }
    set
}

/// Hidden neurons whose post-activation is `<= tau` on every probe input.
/// Entry `l` lists neurons in the output of layer `l`; the output layer is never reported.
pub fn detect_dormant<S: Scalar>(net: &MaskedNetwork<S>, probe: ArrayView2<'_, S>, tau: f64) -> Result<Vec<Vec<usize>>, TopologyError> {
    if probe.nrows() == 0 {
        return Err(TopologyError::EmptyProbe);
    }
    let (_, cache) = net.forward(probe)?;
    let tau = S::of(tau);
    let hidden = net.layers.len() - 1;
    Ok(cache.post[..hidden]
        .iter()
        .map(|post| {
            (0..post.ncols())
                .filter(|&j| post.column(j).iter().all(|&h| h <= tau))
                .collect()
        })
        .collect())
}

/// Active in- and out-edges of every dormant neuron, skipping force-dense layers.
pub fn assemble_prune_set<S: Scalar>(dormant: &[Vec<usize>], net: &MaskedNetwork<S>) -> PruneSet {
    let mut set = PruneSet::empty(net.layers.len());
    for (l, neurons) in dormant.iter().enumerate() {
        for &n in neurons {
            let into = &net.layers[l];
            if !into.spec.force_dense {
                for c in 0..into.spec.fan_in {
                    if into.mask[[n, c]] {
                        set.layers[l].push((n, c));
                    }
                }
            }
            if let Some(out) = net.layers.get(l + 1) {
                if !out.spec.force_dense {
                    for r in 0..out.spec.fan_out {
                        if out.mask[[r, n]] {
                            set.layers[l + 1].push((r, n));
                        }
                    }
                }
            }
        }
    }
    for layer in &mut set.layers {
        layer.sort_unstable();
        layer.dedup();
    }
    set
}

/// Randomly drops prune elements until each layer holds at most
/// `floor(omega * |grow_l|)`. The survivors keep their original order.
pub fn truncate<R: Rng + ?Sized>(prune: &PruneSet, grow: &GrowSet, omega: f64, rng: &mut R) -> PruneSet {
    let mut out = PruneSet::empty(prune.layers.len());
    for (l, coords) in prune.layers.iter().enumerate() {
        let grow_l = grow.layers.get(l).map_or(0, Vec::len);
        let bound = prune_bound(omega, grow_l);
        if coords.len() <= bound {
            out.layers[l] = coords.clone();
        } else {
            let mut keep = sample(rng, coords.len(), bound).into_vec();
            keep.sort_unstable();
            out.layers[l] = keep.into_iter().map(|i| coords[i]).collect();
        }
    }
    out
}

/// Per-layer record of one topology event.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerEvent {
    pub grow: usize,
    pub prune_before: usize,
    pub prune_after: usize,
    pub active_before: usize,
    pub active_after: usize,
    pub density_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrowPruneEvent {
    pub step: u64,
    pub network: String,
    pub layers: Vec<LayerEvent>,
}

impl GrowPruneEvent {
    pub fn grow_total(&self) -> usize {
        self.layers.iter().map(|l| l.grow).sum()
    }

    pub fn prune_total(&self) -> usize {
        self.layers.iter().map(|l| l.prune_after).sum()
    }
}

fn check_sets<S: Scalar>(net: &MaskedNetwork<S>, grow: &GrowSet, prune: &PruneSet) -> Result<(), TopologyError> {
    let n = net.layers.len();
    for set in [grow, prune] {
        if set.layers.len() != n {
            return Err(TopologyError::LayerCount {
                expected: n,
                got: set.layers.len(),
            });
        }
    }
    for (l, layer) in net.layers.iter().enumerate() {
        if layer.spec.force_dense && !(grow.layers[l].is_empty() && prune.layers[l].is_empty()) {
            return Err(TopologyError::DenseLayer { layer: l });
        }
        let (rows, cols) = layer.mask.dim();
        let mut seen = Array2::from_elem((rows, cols), false);
        for &(row, col) in &grow.layers[l] {
            if row >= rows || col >= cols {
                return Err(TopologyError::OutOfRange { layer: l, row, col });
            }
            if layer.mask[[row, col]] || seen[[row, col]] {
                return Err(TopologyError::GrowActive { layer: l, row, col });
            }
            seen[[row, col]] = true;
        }
        for &(row, col) in &prune.layers[l] {
            if row >= rows || col >= cols {
                return Err(TopologyError::OutOfRange { layer: l, row, col });
            }
            if seen[[row, col]] {
                return Err(TopologyError::Overlap { layer: l, row, col });
            }
            if !layer.mask[[row, col]] {
                return Err(TopologyError::PruneInactive { layer: l, row, col });
            }
        }
    }
    Ok(())
}

/// Applies a grow and prune set to `net` after validating both.
///
/// Pruned coordinates are switched off and their stored weight is re-drawn so
/// it can rejoin later. Grown coordinates are switched on with a fresh weight
/// clamped to `kappa * s_l`. Optimizer moments of every touched coordinate are
/// cleared. Nothing is modified when validation fails.
pub fn apply_topology_event<S: Scalar, R: Rng + ?Sized>(
    net: &mut MaskedNetwork<S>,
    adam: &mut AdamState<S>,
    grow: &GrowSet,
    prune: &PruneSet,
    kappa: f64,
    rng: &mut R,
) -> Result<Vec<LayerEvent>, TopologyError> {
    check_sets(net, grow, prune)?;
    let kappa = S::of(kappa);
    let mut events = Vec::with_capacity(net.layers.len());
    for (l, (layer, moments)) in net.layers.iter_mut().zip(adam.layers.iter_mut()).enumerate() {
        let active_before = layer.active_count();
        for &(r, c) in &prune.layers[l] {
            layer.mask[[r, c]] = false;
            layer.weights[[r, c]] = layer.sample_init_weight(rng);
            moments.reset_weight(r, c);
        }
        let bound = kappa * layer.clip_bound;
        for &(r, c) in &grow.layers[l] {
            layer.mask[[r, c]] = true;
            let w = layer.sample_init_weight(rng);
            layer.weights[[r, c]] = w.max(-bound).min(bound);
            moments.reset_weight(r, c);
        }
        events.push(LayerEvent {
            grow: grow.layers[l].len(),
            prune_before: prune.layers[l].len(),
            prune_after: prune.layers[l].len(),
            active_before,
            active_after: layer.active_count(),
            density_after: layer.density(),
        });
    }
    Ok(events)
}

/// How the grow set is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrowthRule {
    /// Largest full-gradient magnitude, with dormant-neuron pruning.
    Gradient,
    /// Uniform over inactive coordinates, no pruning.
    Random,
}

/// Runs the whole pipeline for one network and returns its event record.
#[allow(clippy::too_many_arguments)]
pub fn neuroplastic_event<S: Scalar, R: Rng + ?Sized>(
    net: &mut MaskedNetwork<S>,
    adam: &mut AdamState<S>,
    weight_grads: &[Array2<S>],
    probe: ArrayView2<'_, S>,
    config: &GrowthConfig,
    rule: GrowthRule,
    step: u64,
    label: &str,
    rng: &mut R,
) -> Result<GrowPruneEvent, TopologyError> {
    let budgets = layer_budgets(net, config.growth_fraction(step));
    let (grow, prune_before) = match rule {
        GrowthRule::Gradient => {
            let grow = select_growth(weight_grads, net, &budgets);
            let dormant = detect_dormant(net, probe, config.tau)?;
            (grow, assemble_prune_set(&dormant, net))
        }
        GrowthRule::Random => (random_growth_select(net, &budgets, rng), PruneSet::empty(net.layers.len())),
    };
    let prune = truncate(&prune_before, &grow, config.omega, rng);
    let mut layers = apply_topology_event(net, adam, &grow, &prune, config.kappa, rng)?;
    for (ev, before) in layers.iter_mut().zip(prune_before.counts()) {
        ev.prune_before = before;
    }
    Ok(GrowPruneEvent {
        step,
        network: label.to_string(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{mlp_spec, Activation, AdamConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn sparse_unit(mask: Array2<bool>) -> MaskedNetwork<f64> {
        let spec = [LayerSpec::new(mask.ncols(), mask.nrows(), Activation::Relu, false)];
        let mut net = MaskedNetwork::build(&spec, 0).unwrap();
        net.layers[0].mask = mask;
        net
    }

    #[test]
    fn er_zero_sparsity_is_dense() {
        let spec = mlp_spec(4, &[16, 16, 8], 2, Activation::Tanh);
        let masks = erdos_renyi_masks(&spec, 0.0, &mut rng());
        assert!(masks.iter().all(|m| m.iter().all(|&b| b)));
    }

    #[test]
    fn er_dense_only_network() {
        let spec = [
            LayerSpec::new(3, 5, Activation::Relu, true),
            LayerSpec::new(5, 1, Activation::Identity, true),
        ];
        let masks = erdos_renyi_masks(&spec, 0.75, &mut rng());
        assert!(masks.iter().all(|m| m.iter().all(|&b| b)));
    }

    #[test]
    fn er_counts_match_target() {
        // Sparse layers 64x64 and 64x32; c solves c * (128 + 96) = 0.25 * 6144.
        let spec = mlp_spec(4, &[64, 64, 32], 1, Activation::Identity);
        let counts = erdos_renyi_counts(&spec, 0.75);
        assert_eq!(counts[1] + counts[2], 1536);
        let c = 1536.0 / 224.0;
        assert!((counts[1] as f64 - c * 128.0).abs() <= 1.0);
        assert!((counts[2] as f64 - c * 96.0).abs() <= 1.0);
        let masks = erdos_renyi_masks(&spec, 0.75, &mut rng());
        for (m, &k) in masks.iter().zip(&counts) {
            assert_eq!(m.iter().filter(|&&b| b).count(), k);
        }
    }

    #[test]
    fn er_saturated_layers_cap_at_dense() {
        // A 2x2 sparse layer next to a 64x64 one saturates first.
        let spec = [
            LayerSpec::new(3, 64, Activation::Relu, true),
            LayerSpec::new(64, 64, Activation::Relu, false),
            LayerSpec::new(64, 2, Activation::Relu, false),
            LayerSpec::new(2, 2, Activation::Relu, false),
            LayerSpec::new(2, 1, Activation::Identity, true),
        ];
        let counts = erdos_renyi_counts(&spec, 0.5);
        assert_eq!(counts[3], 4);
        let total = 64 * 64 + 128 + 4;
        assert_eq!(counts[1] + counts[2] + counts[3], (0.5 * total as f64).round() as usize);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_growth_fraction(0, 100, 0.02), 0.02);
        assert_abs_diff_eq!(cosine_growth_fraction(50, 100, 0.02), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_growth_fraction(100, 100, 0.02), 0.0, epsilon = 1e-15);
        assert_eq!(cosine_growth_fraction(101, 100, 0.02), 0.0);
    }

    #[test]
    fn budget_examples() {
        assert_eq!(growth_budget(0, 0.5), 0);
        assert_eq!(growth_budget(1000, 0.01), 10);
        assert_eq!(growth_budget(1000, 0.0), 0);
        assert_eq!(growth_budget(3, 0.9), 3);
        assert_eq!(growth_budget(1000, 0.0101), 11);
        let cfg = GrowthConfig {
            end_step: Some(100),
            ..GrowthConfig::default()
        };
        let net = sparse_unit(Array2::from_elem((10, 10), false));
        assert_eq!(layer_budgets(&net, cfg.growth_fraction(100)), vec![0]);
    }

    #[test]
    fn grow_fraction_override_sets_peak() {
        let cfg = GrowthConfig {
            grow_fraction: Some(0.15),
            end_step: Some(10),
            ..GrowthConfig::default()
        };
        assert_abs_diff_eq!(cfg.growth_fraction(0), 0.15, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.growth_fraction(5), 0.075, epsilon = 1e-15);
    }

    #[test]
    fn select_growth_example() {
        let net = sparse_unit(array![[true, false], [false, false]]);
        let grads = vec![array![[0.5, 0.1], [0.3, -0.2]]];
        let set = select_growth(&grads, &net, &[2]);
        assert_eq!(set.layers[0], vec![(1, 0), (1, 1)]);
        assert!(select_growth(&grads, &net, &[0]).is_empty());
        assert_eq!(select_growth(&grads, &net, &[10]).layers[0].len(), 3);
    }

    #[test]
    fn select_growth_ties_prefer_low_coordinates() {
        let net = sparse_unit(Array2::from_elem((3, 3), false));
        let grads = vec![Array2::from_elem((3, 3), 0.25)];
        let set = select_growth(&grads, &net, &[4]);
        assert_eq!(set.layers[0], vec![(0, 0), (0, 1), (0, 2), (1, 0)]);
    }

    #[test]
    fn dormant_detection_cases() {
        let spec = [
            LayerSpec::new(2, 2, Activation::Relu, true),
            LayerSpec::new(2, 1, Activation::Identity, true),
        ];
        let mut net = MaskedNetwork::<f64>::build(&spec, 0).unwrap();
        net.layers[0].weights.fill(0.0);
        net.layers[0].bias = array![-1.0, 1.0];
        let probe = array![[0.3, 0.1], [-2.0, 5.0]];
        let dormant = detect_dormant(&net, probe.view(), 0.0).unwrap();
        assert_eq!(dormant, vec![vec![0]]);
        let empty = Array2::<f64>::zeros((0, 2));
        assert_eq!(detect_dormant(&net, empty.view(), 0.0).unwrap_err(), TopologyError::EmptyProbe);
    }

    #[test]
    fn prune_set_collects_both_directions() {
        let spec = [
            LayerSpec::new(3, 4, Activation::Relu, true),
            LayerSpec::new(4, 3, Activation::Relu, false),
            LayerSpec::new(3, 2, Activation::Relu, false),
            LayerSpec::new(2, 1, Activation::Identity, true),
        ];
        let mut net = MaskedNetwork::<f64>::build(&spec, 0).unwrap();
        net.layers[1].mask = array![
            [true, false, true, false],
            [true, true, true, true],
            [false, false, false, false]
        ];
        net.layers[2].mask = array![[true, true, false], [false, true, true]];
        assert!(assemble_prune_set(&[vec![], vec![], vec![]], &net).is_empty());

        // Neuron 1 of the second hidden layer: 4 active in-edges, 2 active out-edges.
        let set = assemble_prune_set(&[vec![], vec![1], vec![]], &net);
        assert_eq!(set.counts(), vec![0, 4, 2, 0]);

        // Neuron 0 of the third hidden layer feeds the dense head: in-edges only.
        let set = assemble_prune_set(&[vec![], vec![], vec![0]], &net);
        assert_eq!(set.layers[2], vec![(0, 0), (0, 1)]);
        assert!(set.layers[3].is_empty());

        // Dormant neuron of the first hidden layer keeps its dense in-edges.
        let set = assemble_prune_set(&[vec![0], vec![], vec![]], &net);
        assert_eq!(set.layers[0], vec![]);
        assert_eq!(set.layers[1], vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn truncate_examples() {
        let prune = ConnectionSet {
            layers: vec![(0..10).map(|i| (i, 0)).collect()],
        };
        let grow = ConnectionSet {
            layers: vec![(0..10).map(|i| (i, 1)).collect()],
        };
        let out = truncate(&prune, &grow, 0.4, &mut rng());
        assert_eq!(out.layers[0].len(), 4);
        assert!(out.layers[0].iter().all(|c| prune.layers[0].contains(c)));

        let small = ConnectionSet {
            layers: vec![vec![(0, 0), (1, 0)]],
        };
        assert_eq!(truncate(&small, &grow, 0.4, &mut rng()), small);
        assert!(truncate(&small, &ConnectionSet::empty(1), 0.4, &mut rng()).is_empty());
    }

    #[test]
    fn apply_event_empty_is_noop() {
        let mut net = sparse_unit(array![[true, false], [false, true]]);
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let ev = apply_topology_event(&mut net, &mut adam, &ConnectionSet::empty(1), &ConnectionSet::empty(1), 3.0, &mut rng()).unwrap();
        assert_eq!(net, before);
        assert_eq!(ev[0].grow + ev[0].prune_after, 0);
    }

    #[test]
    fn apply_event_grows_and_clamps() {
        let mut net = sparse_unit(Array2::from_elem((4, 4), false));
        net.layers[0].mask[[0, 0]] = true;
        net.layers[0].mask[[0, 1]] = true;
        let mut adam = AdamState::new(&net, AdamConfig::default());
        adam.layers[0].m_w.fill(1.0);
        let grow = ConnectionSet {
            layers: vec![vec![(1, 0), (1, 1), (2, 2), (3, 3), (3, 0)]],
        };
        let prune = ConnectionSet {
            layers: vec![vec![(0, 0), (0, 1)]],
        };
        let ev = apply_topology_event(&mut net, &mut adam, &grow, &prune, 0.1, &mut rng()).unwrap();
        assert_eq!(ev[0].active_after - ev[0].active_before, 3);
        let layer = &net.layers[0];
        let bound = 0.1 * layer.clip_bound;
        for &(r, c) in &grow.layers[0] {
            assert!(layer.mask[[r, c]]);
            assert!(layer.weights[[r, c]].abs() <= bound);
            assert_eq!(adam.layers[0].m_w[[r, c]], 0.0);
        }
        for &(r, c) in &prune.layers[0] {
            assert!(!layer.mask[[r, c]]);
            assert_eq!(adam.layers[0].m_w[[r, c]], 0.0);
        }
        assert_eq!(adam.layers[0].m_w[[2, 0]], 1.0);
    }

    #[test]
    fn apply_event_rejects_bad_sets_without_mutation() {
        let mut net = sparse_unit(array![[true, false], [false, false]]);
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let bad_grow = ConnectionSet {
            layers: vec![vec![(1, 1), (0, 0)]],
        };
        let err = apply_topology_event(&mut net, &mut adam, &bad_grow, &ConnectionSet::empty(1), 3.0, &mut rng()).unwrap_err();
        assert_eq!(err, TopologyError::GrowActive { layer: 0, row: 0, col: 0 });
        assert_eq!(net, before);

        let bad_prune = ConnectionSet {
            layers: vec![vec![(1, 0)]],
        };
        let err = apply_topology_event(&mut net, &mut adam, &ConnectionSet::empty(1), &bad_prune, 3.0, &mut rng()).unwrap_err();
        assert_eq!(err, TopologyError::PruneInactive { layer: 0, row: 1, col: 0 });

        let overlap = ConnectionSet {
            layers: vec![vec![(1, 0)]],
        };
        let err = apply_topology_event(&mut net, &mut adam, &overlap, &overlap, 3.0, &mut rng()).unwrap_err();
        assert_eq!(err, TopologyError::Overlap { layer: 0, row: 1, col: 0 });
    }

    #[test]
    fn apply_event_refuses_dense_layers() {
        let spec = [LayerSpec::new(2, 2, Activation::Relu, true)];
        let mut net = MaskedNetwork::<f64>::build(&spec, 0).unwrap();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let prune = ConnectionSet {
            layers: vec![vec![(0, 0)]],
        };
        let err = apply_topology_event(&mut net, &mut adam, &ConnectionSet::empty(1), &prune, 3.0, &mut rng()).unwrap_err();
        assert_eq!(err, TopologyError::DenseLayer { layer: 0 });
    }

    #[test]
    fn random_growth_saturates() {
        let net = sparse_unit(array![[true, false], [false, false]]);
        assert!(random_growth_select(&net, &[0], &mut rng()).is_empty());
        let all = random_growth_select(&net, &[9], &mut rng());
        assert_eq!(all.layers[0], vec![(0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn config_validation_names_keys() {
        let bad = GrowthConfig {
            omega: 1.2,
            ..GrowthConfig::default()
        };
        assert!(bad.validate().unwrap_err().contains("omega"));
        let bad = GrowthConfig {
            interval: 0,
            ..GrowthConfig::default()
        };
        assert!(bad.validate().unwrap_err().contains("interval"));
        assert!(GrowthConfig::default().validate().is_ok());
    }
}
