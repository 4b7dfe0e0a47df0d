//! TD3 on masked networks: twin critics, clipped double-Q targets, target
//! policy smoothing and delayed actor updates.
//!
//! Actions are `scale * tanh(actor(s))` per dimension. A zero scale marks a
//! padded action dimension (continual runs with mixed action widths); it is
//! always zero and receives no gradient.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::replay::{concat_cols, Batch};
use crate::netcore::{mlp_spec, Activation, AdamConfig, AdamState, LayerMoments, MaskedLayer, MaskedNetwork, NetError};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Td3Params {
    pub gamma: f64,
    pub polyak: f64,
    pub policy_delay: u64,
    pub exploration_noise: f64,
    pub target_noise: f64,
    pub noise_clip: f64,
    /// Clip multiplier applied after every optimizer step; `None` disables clipping.
    pub clip_kappa: Option<f64>,
}

impl Default for Td3Params {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            polyak: 0.005,
            policy_delay: 2,
            exploration_noise: 0.1,
            target_noise: 0.2,
            noise_clip: 0.5,
            clip_kappa: Some(3.0),
        }
    }
}

/// `y = r + gamma * (1 - done) * min(q1, q2)`
#[inline]
pub fn td3_critic_target(r: f64, done: bool, gamma: f64, q1_next: f64, q2_next: f64) -> f64 {
    if done {
        r
    } else {
        r + gamma * q1_next.min(q2_next)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Losses {
    pub critic: [f64; 2],
    /// `-mean Q1(s, pi(s))`, present on actor steps.
    pub actor: Option<f64>,
}

/// Everything that belongs to one output head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct HeadSlot<S: Scalar> {
    pub actor: MaskedLayer<S>,
    pub actor_target: MaskedLayer<S>,
    pub actor_moments: LayerMoments<S>,
    pub critics: [MaskedLayer<S>; 2],
    pub critic_targets: [MaskedLayer<S>; 2],
    pub critic_moments: [LayerMoments<S>; 2],
    pub action_scale: Vec<f64>,
}

impl<S: Scalar> HeadSlot<S> {
    /// Flattened parameters of all layers in the slot.
    pub fn flat_params(&self) -> Vec<S> {
        let mut out = Vec::new();
        for l in [&self.actor, &self.actor_target]
            .into_iter()
            .chain(self.critics.iter())
            .chain(self.critic_targets.iter())
        {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct HeadBank<S: Scalar> {
    pub active: usize,
    /// `slots[active]` is checked out into the live networks and holds stale values.
    pub slots: Vec<HeadSlot<S>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Td3Agent<S: Scalar> {
    pub actor: MaskedNetwork<S>,
    pub actor_target: MaskedNetwork<S>,
    pub critics: [MaskedNetwork<S>; 2],
    pub critic_targets: [MaskedNetwork<S>; 2],
    pub actor_opt: AdamState<S>,
    pub critic_opts: [AdamState<S>; 2],
    pub params: Td3Params,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_scale: Vec<f64>,
    /// Dense weight gradients of the latest actor update.
    #[serde(skip)]
    pub last_actor_grads: Option<Vec<Array2<S>>>,
    /// Dense weight gradients of the latest update of each critic.
    #[serde(skip)]
    pub last_critic_grads: [Option<Vec<Array2<S>>>; 2],
    pub heads: Option<HeadBank<S>>,
}

impl<S: Scalar> Td3Agent<S> {
    /// Builds dense networks; topology masks are installed by the caller.
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_scale: Vec<f64>,
        hidden: &[usize],
        params: Td3Params,
        actor_adam: AdamConfig,
        critic_adam: AdamConfig,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let act_dim = action_scale.len();
        let actor = MaskedNetwork::build_with_rng(&mlp_spec(obs_dim, hidden, act_dim, Activation::Tanh), rng)?;
        let critic_spec = mlp_spec(obs_dim + act_dim, hidden, 1, Activation::Identity);
        let critics = [
            MaskedNetwork::build_with_rng(&critic_spec, rng)?,
            MaskedNetwork::build_with_rng(&critic_spec, rng)?,
        ];
        Ok(Self {
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor_opt: AdamState::new(&actor, actor_adam),
            critic_opts: [AdamState::new(&critics[0], critic_adam), AdamState::new(&critics[1], critic_adam)],
            actor,
            critics,
            params,
            obs_dim,
            act_dim,
            action_scale,
            last_actor_grads: None,
            last_critic_grads: [None, None],
            heads: None,
        })
    }

    /// Re-copies the online networks into the targets.
    pub fn hard_sync_targets(&mut self) {
        self.actor_target = self.actor.clone();
        self.critic_targets = self.critics.clone();
    }

    /// Creates one output head per task. Each head gets fresh output layers;
    /// head 0 becomes active.
    pub fn install_heads<R: Rng + ?Sized>(&mut self, scales: Vec<Vec<f64>>, rng: &mut R) -> Result<(), NetError> {
        let mut slots = Vec::with_capacity(scales.len());
        for scale in scales {
            assert_eq!(scale.len(), self.act_dim, "head action width");
            let actor = MaskedLayer::new(last(&self.actor).spec, rng)?;
            let critics = [
                MaskedLayer::new(last(&self.critics[0]).spec, rng)?,
                MaskedLayer::new(last(&self.critics[1]).spec, rng)?,
            ];
            slots.push(HeadSlot {
                actor_target: actor.clone(),
                actor_moments: zero_moments(&actor),
                critic_targets: critics.clone(),
                critic_moments: [zero_moments(&critics[0]), zero_moments(&critics[1])],
                actor,
                critics,
                action_scale: scale,
            });
        }
        let mut bank = HeadBank { active: 0, slots };
        self.swap_head(&mut bank.slots[0]);
        self.heads = Some(bank);
        Ok(())
    }

    fn swap_head(&mut self, slot: &mut HeadSlot<S>) {
        let n = self.actor.layers.len() - 1;
        std::mem::swap(&mut self.actor.layers[n], &mut slot.actor);
        std::mem::swap(&mut self.actor_target.layers[n], &mut slot.actor_target);
        std::mem::swap(&mut self.actor_opt.layers[n], &mut slot.actor_moments);
        let m = self.critics[0].layers.len() - 1;
        for j in 0..2 {
            std::mem::swap(&mut self.critics[j].layers[m], &mut slot.critics[j]);
            std::mem::swap(&mut self.critic_targets[j].layers[m], &mut slot.critic_targets[j]);
            std::mem::swap(&mut self.critic_opts[j].layers[m], &mut slot.critic_moments[j]);
        }
        std::mem::swap(&mut self.action_scale, &mut slot.action_scale);
    }

    /// Routes the live networks to `task`'s head; other heads are left untouched.
    pub fn switch_head(&mut self, task: usize) {
        let Some(mut bank) = self.heads.take() else {
            return;
        };
        if bank.active != task {
            let active = bank.active;
            self.swap_head(&mut bank.slots[active]);
            self.swap_head(&mut bank.slots[task]);
            bank.active = task;
        }
        self.heads = Some(bank);
    }

    pub fn active_head(&self) -> Option<usize> {
        self.heads.as_ref().map(|b| b.active)
    }

    /// Parameters of every head that is not currently routed.
    pub fn inactive_head_params(&self) -> Vec<(usize, Vec<S>)> {
        match &self.heads {
            None => Vec::new(),
            Some(bank) => bank
                .slots
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != bank.active)
                .map(|(i, s)| (i, s.flat_params()))
                .collect(),
        }
    }

    fn scale_row(&self) -> Array1<S> {
        self.action_scale.iter().map(|&x| S::of(x)).collect()
    }

    /// Deterministic policy output `scale * tanh(.)` for a batch of states.
    pub fn policy(&self, states: &Array2<S>) -> Result<Array2<S>, NetError> {
        let out = self.actor.predict(states.view())?;
        Ok(out * &self.scale_row())
    }

    /// `clamp(pi(s) + n, bounds)` with `n ~ N(0, sigma * scale)` per dimension.
    pub fn select_action<R: Rng + ?Sized>(&self, state: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>, NetError> {
        let s = Array2::from_shape_fn((1, state.len()), |(_, j)| S::of(state[j]));
        let a = self.policy(&s)?;
        Ok(self
            .action_scale
            .iter()
            .enumerate()
            .map(|(i, &scale)| {
                let mean = a[[0, i]].to_f64_lossy();
                if sigma == 0.0 || scale == 0.0 {
                    return mean;
                }
                let n: f64 = rng.sample(StandardNormal);
                (mean + n * sigma * scale).clamp(-scale, scale)
            })
            .collect())
    }

    /// The policy mean, used for evaluation.
    pub fn greedy_action(&self, state: &[f64]) -> Result<Vec<f64>, NetError> {
        let s = Array2::from_shape_fn((1, state.len()), |(_, j)| S::of(state[j]));
        Ok(self.policy(&s)?.row(0).iter().map(|x| x.to_f64_lossy()).collect())
    }

    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.action_scale
            .iter()
            .map(|&scale| if scale == 0.0 { 0.0 } else { rng.random_range(-scale..=scale) })
            .collect()
    }

    /// Bootstrapped critic targets with smoothed target-policy actions.
    pub fn critic_targets_for<R: Rng + ?Sized>(&self, batch: &Batch<S>, rng: &mut R) -> Result<Array1<S>, NetError> {
        let p = &self.params;
        let mut u = self.actor_target.predict(batch.s_next.view())?;
        let clip = S::of(p.noise_clip);
        let sigma = S::of(p.target_noise);
        u.mapv_inplace(|x| {
            let n: f64 = rng.sample(StandardNormal);
            let noise = (S::of(n) * sigma).max(-clip).min(clip);
            (x + noise).max(-S::one()).min(S::one())
        });
        let next_a = u * &self.scale_row();
        let x = concat_cols(&batch.s_next, &next_a);
        let q1 = self.critic_targets[0].predict(x.view())?;
        let q2 = self.critic_targets[1].predict(x.view())?;
        let gamma = S::of(p.gamma);
        let mut y = Array1::zeros(batch.len());
        Zip::from(&mut y)
            .and(&batch.r)
            .and(&batch.done)
            .and(q1.column(0))
            .and(q2.column(0))
            .for_each(|y, &r, &d, &a, &b| {
                *y = r + gamma * (S::one() - d) * a.min(b);
            });
        Ok(y)
    }

    /// One squared-error step of critic `j` toward `y`; returns the loss.
    pub fn critic_step(&mut self, j: usize, x: &Array2<S>, y: ArrayView1<'_, S>) -> Result<f64, NetError> {
        let (q, cache) = self.critics[j].forward(x.view())?;
        let b = S::of(y.len() as f64);
        let diff = &q.column(0) - &y;
        let loss = diff.iter().fold(S::zero(), |acc, &d| acc + d * d) / b;
        let grad = (diff * (S::of(2.0) / b)).insert_axis(Axis(1));
        let grads = self.critics[j].backward(&cache, grad.view())?;
        let kappa = self.params.clip_kappa.map(S::of);
        self.critic_opts[j].update(&mut self.critics[j], &grads, kappa)?;
        self.last_critic_grads[j] = Some(grads.weights);
        Ok(loss.to_f64_lossy())
    }

    /// One ascent step of `Q1(s, pi(s))` for the actor; returns `-mean Q1`.
    pub fn actor_step(&mut self, states: &Array2<S>) -> Result<f64, NetError> {
        let (out, actor_cache) = self.actor.forward(states.view())?;
        let scale = self.scale_row();
        let actions = &out * &scale;
        let x = concat_cols(states, &actions);
        let (q, critic_cache) = self.critics[0].forward(x.view())?;
        let b = S::of(states.nrows() as f64);
        let loss = -q.sum() / b;
        let dq = Array2::from_elem(q.raw_dim(), -S::one() / b);
        let critic_grads = self.critics[0].backward(&critic_cache, dq.view())?;
        let d_action = critic_grads.input.slice(s![.., self.obs_dim..]).to_owned();
        let d_out = d_action * &scale;
        let grads = self.actor.backward(&actor_cache, d_out.view())?;
        let kappa = self.params.clip_kappa.map(S::of);
        self.actor_opt.update(&mut self.actor, &grads, kappa)?;
        self.last_actor_grads = Some(grads.weights);
        Ok(loss.to_f64_lossy())
    }

    pub fn polyak_targets(&mut self) -> Result<(), NetError> {
        let rho = S::of(self.params.polyak);
        self.actor_target.polyak_from(&self.actor, rho)?;
        for j in 0..2 {
            self.critic_targets[j].polyak_from(&self.critics[j], rho)?;
        }
        Ok(())
    }

    /// Critic updates every step; actor and targets every `policy_delay` steps.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch<S>, step: u64, rng: &mut R) -> Result<Losses, NetError> {
        let y = self.critic_targets_for(batch, rng)?;
        let x = batch.state_action();
        let critic = [self.critic_step(0, &x, y.view())?, self.critic_step(1, &x, y.view())?];
        let actor = if step.is_multiple_of(self.params.policy_delay) {
            let loss = self.actor_step(&batch.s)?;
            self.polyak_targets()?;
            Some(loss)
        } else {
            None
        };
        Ok(Losses { critic, actor })
    }

    /// Re-initializes the last two layers of the actor and both critics.
    /// Masks are kept; optimizer moments of those layers are cleared and the
    /// targets take the fresh values.
    pub fn reset_last_layers<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        fn reset_net<S: Scalar, R: Rng + ?Sized>(net: &mut MaskedNetwork<S>, target: &mut MaskedNetwork<S>, opt: &mut AdamState<S>, rng: &mut R) {
            let n = net.layers.len();
            for l in n.saturating_sub(2)..n {
                net.layers[l].reinit_weights(rng);
                opt.layers[l].reset();
                target.layers[l] = net.layers[l].clone();
            }
        }
        reset_net(&mut self.actor, &mut self.actor_target, &mut self.actor_opt, rng);
        for j in 0..2 {
            reset_net(&mut self.critics[j], &mut self.critic_targets[j], &mut self.critic_opts[j], rng);
        }
    }

    /// Largest `|w| / (kappa s_l)` over every active weight of every live network.
    pub fn max_clip_ratio(&self, kappa: f64) -> f64 {
        [&self.actor, &self.actor_target, &self.critics[0], &self.critics[1]]
            .iter()
            .flat_map(|n| n.layers.iter())
            .map(|l| l.max_active_ratio().to_f64_lossy() / kappa)
            .fold(0.0, f64::max)
    }
}

fn last<S: Scalar>(net: &MaskedNetwork<S>) -> &MaskedLayer<S> {
    net.layers.last().expect("non-empty network")
}

fn zero_moments<S: Scalar>(layer: &MaskedLayer<S>) -> LayerMoments<S> {
    LayerMoments {
        m_w: Array2::zeros(layer.weights.raw_dim()),
        v_w: Array2::zeros(layer.weights.raw_dim()),
        m_b: Array1::zeros(layer.bias.len()),
        v_b: Array1::zeros(layer.bias.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn agent(scale: Vec<f64>) -> Td3Agent<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Td3Agent::new(3, scale, &[8, 8], Td3Params::default(), AdamConfig::with_lr(1e-3), AdamConfig::with_lr(1e-3), &mut rng).unwrap()
    }

    fn batch(n: usize, obs: usize, act: usize) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Batch {
            s: Array2::from_shape_fn((n, obs), |_| rng.random_range(-1.0..1.0)),
            a: Array2::from_shape_fn((n, act), |_| rng.random_range(-1.0..1.0)),
            r: Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0)),
            s_next: Array2::from_shape_fn((n, obs), |_| rng.random_range(-1.0..1.0)),
            done: Array1::zeros(n),
        }
    }

    #[test]
    fn target_formula() {
        assert_abs_diff_eq!(td3_critic_target(1.0, false, 0.99, 2.0, 3.0), 2.98, epsilon = 1e-12);
        assert_eq!(td3_critic_target(1.5, true, 0.99, 2.0, 3.0), 1.5);
        assert_eq!(td3_critic_target(0.7, false, 0.99, 0.0, 0.0), 0.7);
    }

    #[test]
    fn zero_sigma_is_the_policy() {
        let a = agent(vec![2.0]);
        let s = [0.1, -0.3, 0.5];
        let act = a.select_action(&s, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let pi = a.policy(&Array2::from_shape_vec((1, 3), s.to_vec()).unwrap()).unwrap();
        assert_eq!(act[0], pi[[0, 0]]);
        assert!(act[0].abs() <= 2.0);
    }

    #[test]
    fn noisy_action_is_clamped() {
        let mut a = agent(vec![1.0]);
        // Saturate the output: huge bias on the tanh head.
        let n = a.actor.layers.len() - 1;
        a.actor.layers[n].bias[0] = 50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let act = a.select_action(&[0.0, 0.0, 0.0], 0.5, &mut rng).unwrap();
            assert!(act[0] <= 1.0 && act[0] >= -1.0);
        }
    }

    #[test]
    fn actor_moves_only_on_delay_steps() {
        let mut a = agent(vec![1.0]);
        let b = batch(16, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for step in 1..=6u64 {
            let before = a.actor.flat_params();
            let losses = a.update(&b, step, &mut rng).unwrap();
            let changed = a.actor.flat_params() != before;
            assert_eq!(changed, step % 2 == 0, "step {step}");
            assert_eq!(losses.actor.is_some(), step % 2 == 0);
        }
    }

    #[test]
    fn zero_reward_zero_q_gives_zero_loss() {
        let mut a = agent(vec![1.0]);
        a.params.gamma = 0.0;
        for net in a.critics.iter_mut().chain(a.critic_targets.iter_mut()) {
            let n = net.layers.len() - 1;
            net.layers[n].weights.fill(0.0);
            net.layers[n].bias.fill(0.0);
        }
        let mut b = batch(4, 3, 1);
        b.r.fill(0.0);
        let before = a.critics.clone();
        let y = a.critic_targets_for(&b, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let loss = a.critic_step(0, &b.state_action(), y.view()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(a.critics[0], before[0]);
    }

    #[test]
    fn twin_min_bounds_target() {
        let a = agent(vec![1.0]);
        let b = batch(32, 3, 1);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let y = a.critic_targets_for(&b, &mut r1).unwrap();
        // Same noise stream reproduces the smoothed actions.
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let mut u = a.actor_target.predict(b.s_next.view()).unwrap();
        u.mapv_inplace(|x| {
            let n: f64 = r2.sample(StandardNormal);
            (x + (n * 0.2).clamp(-0.5, 0.5)).clamp(-1.0, 1.0)
        });
        let x = concat_cols(&b.s_next, &u);
        for j in 0..2 {
            let q = a.critic_targets[j].predict(x.view()).unwrap();
            for i in 0..b.len() {
                assert!(y[i] <= b.r[i] + 0.99 * q[[i, 0]] + 1e-12);
            }
        }
    }

    #[test]
    fn padded_action_dims_stay_zero() {
        let a = agent(vec![1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            assert_eq!(a.select_action(&[0.3, 0.2, 0.1], 0.3, &mut rng).unwrap()[1], 0.0);
            assert_eq!(a.random_action(&mut rng)[1], 0.0);
        }
    }

    #[test]
    fn head_switch_preserves_inactive_heads() {
        let mut a = agent(vec![1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        a.install_heads(vec![vec![2.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]], &mut rng).unwrap();
        assert_eq!(a.action_scale, vec![2.0, 0.0]);
        let b = batch(8, 3, 2);
        let frozen = a.inactive_head_params();
        for step in 0..4 {
            a.update(&b, step, &mut rng).unwrap();
            assert_eq!(a.inactive_head_params(), frozen);
        }
        let head0 = {
            let n = a.actor.layers.len() - 1;
            a.actor.layers[n].clone()
        };
        a.switch_head(1);
        assert_eq!(a.action_scale, vec![1.0, 1.0]);
        a.switch_head(0);
        let n = a.actor.layers.len() - 1;
        assert_eq!(a.actor.layers[n], head0);
        assert_eq!(a.action_scale, vec![2.0, 0.0]);
    }

    #[test]
    fn reset_touches_only_last_two_layers() {
        let mut a: Td3Agent<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            Td3Agent::new(3, vec![1.0], &[8, 8, 8], Td3Params::default(), AdamConfig::default(), AdamConfig::default(), &mut rng).unwrap()
        };
        let before = a.clone();
        a.reset_last_layers(&mut ChaCha8Rng::seed_from_u64(77));
        for (new, old) in [(&a.actor, &before.actor), (&a.critics[0], &before.critics[0])] {
            assert_eq!(new.layers[0], old.layers[0]);
            assert_eq!(new.layers[1], old.layers[1]);
            assert_ne!(new.layers[3].weights, old.layers[3].weights);
            assert_ne!(new.layers[2].weights, old.layers[2].weights);
        }
        assert_eq!(a.actor_target.layers[3], a.actor.layers[3]);
    }
}
