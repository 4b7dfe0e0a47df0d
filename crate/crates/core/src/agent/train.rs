//! The training loop: acting, replay, TD3 updates, topology events, resets and
//! periodic evaluation, driven one environment step at a time.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::epsilon::EpsilonTracker;
use super::replay::{review_sample, ReplayBuffer, Transition};
use super::td3::{Losses, Td3Agent, Td3Params};
use crate::config::{ConfigError, Mode, Precision, RunConfig, StaticDensity};
use crate::envs::{pad, ContinualEnv, Env, EnvName};
use crate::metrics::{activated_ratio, write_csv, MetricsError, MetricsRow, CONFIG_FILE, METRICS_FILE};
use crate::netcore::{AdamConfig, MaskedNetwork, NetError};
use crate::scalar::Scalar;
use crate::topology::{apply_initial_masks, neuroplastic_event, GrowPruneEvent, GrowthRule, TopologyError};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EVENTS_FILE: &str = "events.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    CheckpointVersion { found: u32 },
}

/// Evaluation at the end of one task block of a continual schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBlock {
    pub cycle: usize,
    pub task: usize,
    pub step: u64,
    pub eval_return: f64,
}

/// What happened during one call to [`Trainer::step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub losses: Option<Losses>,
    /// Batch drawn from the oldest quarter of the buffer.
    pub reviewed: bool,
    pub topology_events: usize,
    pub reset: bool,
    pub row: Option<MetricsRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Checkpoint<S: Scalar> {
    pub version: u32,
    pub label: String,
    pub seed: u64,
    pub step: u64,
    pub config: RunConfig,
    pub agent: Td3Agent<S>,
    pub epsilon: EpsilonTracker,
    pub rngs: Vec<ChaCha8Rng>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|source| TrainError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(TrainError::CheckpointVersion { found: ckpt.version });
        }
        Ok(ckpt)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult<S: Scalar> {
    pub config: RunConfig,
    pub rows: Vec<MetricsRow>,
    pub events: Vec<GrowPruneEvent>,
    pub blocks: Vec<TaskBlock>,
    pub reset_steps: Vec<u64>,
    /// Steps on which a parameter of a non-routed head changed. Always 0.
    pub head_violations: u64,
    pub checkpoint: Checkpoint<S>,
}

impl<S: Scalar> RunResult<S> {
    /// Writes `metrics.csv`, `resolved_config.toml`, `events.json` and `checkpoint.json`.
    pub fn write_to(&self, dir: &Path) -> Result<(), TrainError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TrainError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        write_csv(&self.rows, &dir.join(METRICS_FILE))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, self.config.to_toml()).map_err(io(&cfg_path))?;
        let ev_path = dir.join(EVENTS_FILE);
        let events = serde_json::to_string(&self.events).expect("events serialize");
        std::fs::write(&ev_path, events).map_err(io(&ev_path))?;
        self.checkpoint.save(&dir.join(CHECKPOINT_FILE))
    }
}

enum Source {
    Single(Env),
    Continual(ContinualEnv),
}

// Independent random streams, one per concern, so that e.g. evaluation never
// shifts the exploration noise.
const STREAM_INIT: u64 = 1;
const STREAM_ENV: u64 = 2;
const STREAM_ACT: u64 = 3;
const STREAM_SAMPLE: u64 = 4;
const STREAM_TOPOLOGY: u64 = 5;
const STREAM_PROBE: u64 = 6;
const STREAM_EVAL: u64 = 7;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Fraction of active coordinates over the sparse-capable layers, or over the
/// whole network when every layer is dense.
pub fn sparse_density<S: Scalar>(net: &MaskedNetwork<S>) -> f64 {
    let sparse: Vec<_> = net.layers.iter().filter(|l| !l.spec.force_dense).collect();
    if sparse.is_empty() {
        return net.density();
    }
    let active: usize = sparse.iter().map(|l| l.active_count()).sum();
    let total: usize = sparse.iter().map(|l| l.mask.len()).sum();
    active as f64 / total as f64
}

pub struct Trainer<S: Scalar> {
    cfg: RunConfig,
    agent: Td3Agent<S>,
    source: Source,
    /// One buffer per task (a single one outside continual runs).
    buffers: Vec<ReplayBuffer>,
    epsilon: EpsilonTracker,
    rng_env: ChaCha8Rng,
    rng_act: ChaCha8Rng,
    rng_sample: ChaCha8Rng,
    rng_topology: ChaCha8Rng,
    rng_probe: ChaCha8Rng,
    eval_seeds: Vec<u64>,
    obs: Vec<f64>,
    t: u64,
    rows: Vec<MetricsRow>,
    events: Vec<GrowPruneEvent>,
    blocks: Vec<TaskBlock>,
    reset_steps: Vec<u64>,
    pending_grow: u64,
    pending_prune: u64,
    head_snapshot: Vec<(usize, Vec<S>)>,
    head_violations: u64,
    started: Instant,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: &RunConfig) -> Result<Self, TrainError> {
        let cfg = cfg.clone().resolved();
        cfg.validate()?;
        let seed = cfg.seed();
        let mode = cfg.mode();
        let mut rng_init = stream(seed, STREAM_INIT);
        let mut rng_env = stream(seed, STREAM_ENV);

        let (obs_dim, action_scale, tasks) = match &cfg.continual {
            Some(c) => (c.obs_dim(), vec![1.0; c.act_dim()], c.tasks.clone()),
            None => {
                let spec = cfg.env.name.spec();
                (spec.obs_dim, vec![spec.max_action; spec.act_dim], vec![cfg.env.name])
            }
        };
        let t = &cfg.td3;
        let params = Td3Params {
            gamma: t.gamma,
            polyak: t.polyak,
            policy_delay: t.policy_delay,
            exploration_noise: t.exploration_noise,
            target_noise: t.target_noise,
            noise_clip: t.noise_clip,
            // Clipping applies to every mode so that baselines are comparable.
            clip_kappa: cfg.growth.weight_clipping.then_some(cfg.growth.kappa),
        };
        let mut agent = Td3Agent::new(
            obs_dim,
            action_scale,
            &t.hidden,
            params,
            AdamConfig::with_lr(t.actor_lr),
            AdamConfig::with_lr(t.critic_lr),
            &mut rng_init,
        )?;
        let (sparse_actor, sparse_critic) = match mode {
            Mode::Ne | Mode::Random => (cfg.run.ne_actor, cfg.run.ne_critic),
            Mode::Static => {
                let sparse = cfg.run.static_density == StaticDensity::Sparse;
                (sparse, sparse)
            }
            Mode::Reset => (false, false),
        };
        let sp = cfg.growth.initial_sparsity;
        if sparse_actor {
            apply_initial_masks(&mut agent.actor, sp, &mut rng_init);
        }
        if sparse_critic {
            for c in agent.critics.iter_mut() {
                apply_initial_masks(c, sp, &mut rng_init);
            }
        }
        agent.hard_sync_targets();
        if cfg.continual.is_some() {
            let width = agent.act_dim;
            let scales = tasks
                .iter()
                .map(|name| {
                    let spec = name.spec();
                    (0..width).map(|i| if i < spec.act_dim { spec.max_action } else { 0.0 }).collect()
                })
                .collect();
            agent.install_heads(scales, &mut rng_init)?;
        }

        let buffers = tasks
            .iter()
            .map(|_| ReplayBuffer::new(t.buffer_capacity, obs_dim, agent.act_dim))
            .collect();
        let mut source = match &cfg.continual {
            Some(c) => Source::Continual(ContinualEnv::new(c.clone())),
            None => Source::Single(Env::new(cfg.env.name)),
        };
        let first_seed = rng_env.random();
        let obs = match &mut source {
            Source::Single(env) => env.reset(first_seed),
            Source::Continual(env) => env.reset(first_seed).expect("schedule has episodes"),
        };
        let mut rng_eval = stream(seed, STREAM_EVAL);
        let eval_seeds = (0..cfg.run.eval_episodes).map(|_| rng_eval.random()).collect();

        let mut trainer = Self {
            epsilon: EpsilonTracker::new(cfg.review.window, cfg.review.lower_bound),
            rng_env,
            rng_act: stream(seed, STREAM_ACT),
            rng_sample: stream(seed, STREAM_SAMPLE),
            rng_topology: stream(seed, STREAM_TOPOLOGY),
            rng_probe: stream(seed, STREAM_PROBE),
            eval_seeds,
            obs,
            t: 0,
            rows: Vec::new(),
            events: Vec::new(),
            blocks: Vec::new(),
            reset_steps: Vec::new(),
            pending_grow: 0,
            pending_prune: 0,
            head_snapshot: Vec::new(),
            head_violations: 0,
            started: Instant::now(),
            agent,
            source,
            buffers,
            cfg,
        };
        trainer.head_snapshot = trainer.agent.inactive_head_params();
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn agent(&self) -> &Td3Agent<S> {
        &self.agent
    }

    pub fn steps_done(&self) -> u64 {
        self.t
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn events(&self) -> &[GrowPruneEvent] {
        &self.events
    }

    pub fn epsilon(&self) -> &EpsilonTracker {
        &self.epsilon
    }

    pub fn is_done(&self) -> bool {
        match &self.source {
            Source::Single(_) => self.t >= self.cfg.run.total_steps,
            Source::Continual(env) => env.is_finished(),
        }
    }

    fn task(&self) -> usize {
        match &self.source {
            Source::Single(_) => 0,
            Source::Continual(env) => env.task().unwrap_or(0),
        }
    }

    fn task_env_name(&self, task: usize) -> EnvName {
        match &self.source {
            Source::Single(_) => self.cfg.env.name,
            Source::Continual(env) => env.schedule().tasks[task],
        }
    }

    fn review_enabled(&self) -> bool {
        self.cfg.mode() == Mode::Ne && self.cfg.run.experience_review
    }

    /// Advances one environment step. Does nothing once the run is done.
    pub fn step(&mut self) -> Result<StepInfo, TrainError> {
        if self.is_done() {
            return Ok(StepInfo {
                step: self.t,
                ..StepInfo::default()
            });
        }
        self.t += 1;
        let t = self.t;
        let mut info = StepInfo {
            step: t,
            ..StepInfo::default()
        };
        let task = self.task();
        let warm = self.buffers[task].len() as u64 >= self.cfg.run.warmup_steps;
        let action = if warm {
            self.agent.select_action(&self.obs, self.cfg.td3.exploration_noise, &mut self.rng_act)?
        } else {
            self.agent.random_action(&mut self.rng_act)
        };
        let res = match &mut self.source {
            Source::Single(env) => env.step(&action),
            Source::Continual(env) => env.step(&action).expect("schedule not finished"),
        };
        // Episodes end only at the time limit, so the bootstrap is never cut.
        self.buffers[task].push(&Transition {
            s: std::mem::take(&mut self.obs),
            a: action,
            r: res.reward,
            s_next: res.obs.clone(),
            done: false,
        });
        self.obs = res.obs;

        let buffer = &self.buffers[task];
        let batch_size = self.cfg.td3.batch_size;
        if warm && buffer.len() >= batch_size {
            let eps = if self.review_enabled() { self.epsilon.epsilon() } else { 1.0 };
            let draw = review_sample(buffer, eps, batch_size, &mut self.rng_sample);
            let batch = buffer.gather::<S>(&draw.positions);
            info.losses = Some(self.agent.update(&batch, t, &mut self.rng_sample)?);
            info.reviewed = draw.reviewed;
            if self.agent.heads.is_some() && self.agent.inactive_head_params() != self.head_snapshot {
                self.head_violations += 1;
            }
        }

        let g = &self.cfg.growth;
        if matches!(self.cfg.mode(), Mode::Ne | Mode::Random) && t.is_multiple_of(g.interval) && t <= g.end_step() {
            info.topology_events = self.topology_event(task)?;
        }
        if self.cfg.mode() == Mode::Reset {
            let every = self.cfg.run.reset_interval.unwrap_or(u64::MAX);
            if t.is_multiple_of(every) {
                self.agent.reset_last_layers(&mut self.rng_topology);
                self.reset_steps.push(t);
                info.reset = true;
            }
        }
        if t.is_multiple_of(self.cfg.run.eval_interval) {
            info.row = Some(self.record_row(task)?);
        }

        if res.done {
            let seed = self.rng_env.random();
            let mut finished_block = None;
            self.obs = match &mut self.source {
                Source::Single(env) => env.reset(seed),
                Source::Continual(env) => {
                    let ep = env.episode();
                    let per = env.schedule().episodes_per_task;
                    if ep % per == 0 {
                        finished_block = Some(env.schedule().cycle_at(ep - 1));
                    }
                    env.reset(seed).unwrap_or_default()
                }
            };
            if let Some(cycle) = finished_block {
                let eval_return = self.evaluate(task)?;
                self.blocks.push(TaskBlock {
                    cycle,
                    task,
                    step: t,
                    eval_return,
                });
                let next = self.task();
                if !self.is_done() && next != task {
                    self.agent.switch_head(next);
                    self.head_snapshot = self.agent.inactive_head_params();
                }
            }
        }
        Ok(info)
    }

    fn probe(&mut self, task: usize) -> (Array2<S>, Array2<S>) {
        let buffer = &self.buffers[task];
        let positions = buffer.uniform_positions(self.cfg.growth.probe_batch_size, &mut self.rng_probe);
        let batch = buffer.gather::<S>(&positions);
        let sa = batch.state_action();
        (batch.s, sa)
    }

    fn topology_event(&mut self, task: usize) -> Result<usize, TrainError> {
        let rule = match self.cfg.mode() {
            Mode::Random => GrowthRule::Random,
            _ => GrowthRule::Gradient,
        };
        let (states, state_actions) = self.probe(task);
        let t = self.t;
        let g = self.cfg.growth.clone();
        let mut fired = 0;
        let a = &mut self.agent;
        if self.cfg.run.ne_actor {
            if let Some(grads) = a.last_actor_grads.as_ref() {
                let ev = neuroplastic_event(&mut a.actor, &mut a.actor_opt, grads, states.view(), &g, rule, t, "actor", &mut self.rng_topology)?;
                a.actor_target.sync_masks_from(&a.actor)?;
                self.pending_grow += ev.grow_total() as u64;
                self.pending_prune += ev.prune_total() as u64;
                self.events.push(ev);
                fired += 1;
            }
        }
        if self.cfg.run.ne_critic {
            for j in 0..2 {
                if let Some(grads) = a.last_critic_grads[j].as_ref() {
                    let label = if j == 0 { "critic1" } else { "critic2" };
                    let ev = neuroplastic_event(
                        &mut a.critics[j],
                        &mut a.critic_opts[j],
                        grads,
                        state_actions.view(),
                        &g,
                        rule,
                        t,
                        label,
                        &mut self.rng_topology,
                    )?;
                    a.critic_targets[j].sync_masks_from(&a.critics[j])?;
                    self.pending_grow += ev.grow_total() as u64;
                    self.pending_prune += ev.prune_total() as u64;
                    self.events.push(ev);
                    fired += 1;
                }
            }
        }
        Ok(fired)
    }

    /// Mean undiscounted return of deterministic episodes on `task` with its head.
    fn evaluate(&self, task: usize) -> Result<f64, TrainError> {
        let name = self.task_env_name(task);
        let width = self.agent.obs_dim;
        let mut env = Env::new(name);
        let mut total = 0.0;
        for &seed in &self.eval_seeds {
            let mut obs = pad(&env.reset(seed), width);
            loop {
                let a = self.agent.greedy_action(&obs)?;
                let r = env.step(&a);
                total += r.reward;
                if r.done {
                    break;
                }
                obs = pad(&r.obs, width);
            }
        }
        Ok(total / self.eval_seeds.len() as f64)
    }

    fn record_row(&mut self, task: usize) -> Result<MetricsRow, TrainError> {
        let eval_return = self.evaluate(task)?;
        let (states, state_actions) = self.probe(task);
        let tau = self.cfg.growth.tau;
        let a = &self.agent;
        let actor_ratio = activated_ratio(&a.actor, states.view(), tau)?.aggregate;
        let critic_ratio = (activated_ratio(&a.critics[0], state_actions.view(), tau)?.aggregate
            + activated_ratio(&a.critics[1], state_actions.view(), tau)?.aggregate)
            / 2.0;
        self.epsilon.record(critic_ratio);
        let row = MetricsRow {
            step: self.t,
            eval_return,
            actor_act_ratio: actor_ratio,
            critic_act_ratio: critic_ratio,
            actor_density: sparse_density(&a.actor),
            critic_density: (sparse_density(&a.critics[0]) + sparse_density(&a.critics[1])) / 2.0,
            grow_count: std::mem::take(&mut self.pending_grow),
            prune_count: std::mem::take(&mut self.pending_prune),
            epsilon: if self.review_enabled() { self.epsilon.epsilon() } else { 1.0 },
            task_index: task,
            wall_ms: self.started.elapsed().as_millis() as u64,
        };
        self.rows.push(row.clone());
        Ok(row)
    }

    /// Snapshot of the learner. Cached gradients are not part of it.
    pub fn checkpoint(&self) -> Checkpoint<S> {
        let mut agent = self.agent.clone();
        agent.last_actor_grads = None;
        agent.last_critic_grads = [None, None];
        Checkpoint {
            version: CHECKPOINT_VERSION,
            label: self.cfg.label(),
            seed: self.cfg.seed(),
            step: self.t,
            config: self.cfg.clone(),
            agent,
            epsilon: self.epsilon.clone(),
            rngs: vec![
                self.rng_env.clone(),
                self.rng_act.clone(),
                self.rng_sample.clone(),
                self.rng_topology.clone(),
                self.rng_probe.clone(),
            ],
        }
    }

    pub fn run_to_end(mut self) -> Result<RunResult<S>, TrainError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> RunResult<S> {
        RunResult {
            checkpoint: self.checkpoint(),
            config: self.cfg,
            rows: self.rows,
            events: self.events,
            blocks: self.blocks,
            reset_steps: self.reset_steps,
            head_violations: self.head_violations,
        }
    }
}

/// Trains one (mode, seed) configuration to completion.
pub fn train<S: Scalar>(cfg: &RunConfig) -> Result<RunResult<S>, TrainError> {
    Trainer::new(cfg)?.run_to_end()
}

/// Precision-independent part of a [`RunResult`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub config: RunConfig,
    pub rows: Vec<MetricsRow>,
    pub events: Vec<GrowPruneEvent>,
    pub blocks: Vec<TaskBlock>,
    pub reset_steps: Vec<u64>,
    pub head_violations: u64,
}

impl<S: Scalar> From<RunResult<S>> for RunSummary {
    fn from(r: RunResult<S>) -> Self {
        Self {
            config: r.config,
            rows: r.rows,
            events: r.events,
            blocks: r.blocks,
            reset_steps: r.reset_steps,
            head_violations: r.head_violations,
        }
    }
}

/// Trains at the configured precision, optionally writing the run directory.
pub fn train_at_precision(cfg: &RunConfig, dir: Option<&Path>) -> Result<RunSummary, TrainError> {
    fn go<S: Scalar>(cfg: &RunConfig, dir: Option<&Path>) -> Result<RunSummary, TrainError> {
        let result = train::<S>(cfg)?;
        if let Some(dir) = dir {
            result.write_to(dir)?;
        }
        Ok(result.into())
    }
    match cfg.run.precision {
        Precision::F64 => go::<f64>(cfg, dir),
        Precision::F32 => go::<f32>(cfg, dir),
    }
}
