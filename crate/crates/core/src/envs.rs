//! Small deterministic continuous-control tasks and a continual task schedule.
//!
//! All dynamics use semi-implicit Euler: velocity first, then position with the
//! new velocity.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DT: f64 = 0.05;

const PENDULUM_G: f64 = 10.0;
const PENDULUM_MASS: f64 = 1.0;
const PENDULUM_LENGTH: f64 = 1.0;
const PENDULUM_MAX_TORQUE: f64 = 2.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;
const SPARSE_TOLERANCE: f64 = 0.2;
const POINT_MAX_SPEED: f64 = 2.0;
const REACHER_LINK: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    PendulumSwingUp,
    /// Pays 1 only while the pole is within 0.2 rad of upright.
    PendulumSparse,
    TwoLinkReacher,
    PointMass,
}

impl EnvName {
    pub const ALL: [EnvName; 4] = [
        EnvName::PendulumSwingUp,
        EnvName::PendulumSparse,
        EnvName::TwoLinkReacher,
        EnvName::PointMass,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::PendulumSwingUp => "pendulum_swing_up",
            EnvName::PendulumSparse => "pendulum_sparse",
            EnvName::TwoLinkReacher => "two_link_reacher",
            EnvName::PointMass => "point_mass",
        }
    }

    pub fn spec(self) -> EnvSpec {
        match self {
            EnvName::PendulumSwingUp | EnvName::PendulumSparse => EnvSpec {
                name: self,
                obs_dim: 3,
                act_dim: 1,
                max_action: PENDULUM_MAX_TORQUE,
                horizon: 200,
                dt: DT,
            },
            EnvName::TwoLinkReacher => EnvSpec {
                name: self,
                obs_dim: 8,
                act_dim: 2,
                max_action: 1.0,
                horizon: 150,
                dt: DT,
            },
            EnvName::PointMass => EnvSpec {
                name: self,
                obs_dim: 4,
                act_dim: 2,
                max_action: 1.0,
                horizon: 100,
                dt: DT,
            },
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvName::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown environment `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: EnvName,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Symmetric per-dimension action bound.
    pub max_action: f64,
    pub horizon: usize,
    pub dt: f64,
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

#[derive(Clone, Debug, PartialEq)]
enum State {
    /// `theta = 0` is upright, `theta = pi` hangs down.
    Pendulum { theta: f64, omega: f64 },
    Reacher { q: [f64; 2], qd: [f64; 2], goal: [f64; 2] },
    Point { pos: [f64; 2], vel: [f64; 2] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
    state: State,
    t: usize,
}

impl Env {
    pub fn new(name: EnvName) -> Self {
        let mut env = Self {
            spec: name.spec(),
            state: State::Point {
                pos: [0.0; 2],
                vel: [0.0; 2],
            },
            t: 0,
        };
        env.reset(0);
        env
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.t = 0;
        self.state = match self.spec.name {
            EnvName::PendulumSwingUp | EnvName::PendulumSparse => State::Pendulum {
                theta: rng.random_range(PI - 0.1..PI + 0.1),
                omega: 0.0,
            },
            EnvName::TwoLinkReacher => {
                let q = [rng.random_range(-PI..PI), rng.random_range(-PI..PI)];
                let phi: f64 = rng.random_range(-PI..PI);
                State::Reacher {
                    q,
                    qd: [0.0; 2],
                    goal: [phi.cos(), phi.sin()],
                }
            }
            EnvName::PointMass => State::Point {
                pos: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                vel: [0.0; 2],
            },
        };
        self.observe()
    }

    /// Places a point mass at an explicit state; used for hand-checked dynamics.
    pub fn set_point_mass(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        assert_eq!(self.spec.name, EnvName::PointMass);
        self.state = State::Point { pos, vel };
    }

    pub fn set_pendulum(&mut self, theta: f64, omega: f64) {
        assert!(matches!(self.state, State::Pendulum { .. }));
        self.state = State::Pendulum { theta, omega };
    }

    pub fn pendulum_state(&self) -> Option<(f64, f64)> {
        match self.state {
            State::Pendulum { theta, omega } => Some((theta, omega)),
            _ => None,
        }
    }

    pub fn observe(&self) -> Vec<f64> {
        match &self.state {
            State::Pendulum { theta, omega } => vec![theta.cos(), theta.sin(), *omega],
            State::Reacher { q, qd, goal } => vec![
                q[0].cos(),
                q[0].sin(),
                q[1].cos(),
                q[1].sin(),
                qd[0],
                qd[1],
                goal[0],
                goal[1],
            ],
            State::Point { pos, vel } => vec![pos[0], pos[1], vel[0], vel[1]],
        }
    }

    /// Advances one step; actions outside the bound are clamped, extra dimensions ignored.
    pub fn step(&mut self, action: &[f64]) -> StepResult {
        let max = self.spec.max_action;
        let u: Vec<f64> = (0..self.spec.act_dim)
            .map(|i| action.get(i).copied().unwrap_or(0.0).clamp(-max, max))
            .collect();
        let dt = self.spec.dt;
        let sparse = self.spec.name == EnvName::PendulumSparse;
        let reward = match &mut self.state {
            State::Pendulum { theta, omega } => {
                let acc = PENDULUM_G / PENDULUM_LENGTH * theta.sin() + u[0] / (PENDULUM_MASS * PENDULUM_LENGTH * PENDULUM_LENGTH);
                *omega = (*omega + acc * dt).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                *theta = wrap_angle(*theta + *omega * dt);
                let err = wrap_angle(*theta);
                if sparse {
                    if err.abs() < SPARSE_TOLERANCE {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    -(err * err + 0.1 * *omega * *omega + 0.001 * u[0] * u[0])
                }
            }
            State::Point { pos, vel } => {
                for i in 0..2 {
                    vel[i] = (vel[i] + u[i] * dt).clamp(-POINT_MAX_SPEED, POINT_MAX_SPEED);
                    pos[i] += vel[i] * dt;
                }
                -(pos[0].hypot(pos[1])) - 0.01 * u[0].hypot(u[1])
            }
            State::Reacher { q, qd, goal } => {
                for i in 0..2 {
                    qd[i] = u[i];
                    q[i] = wrap_angle(q[i] + qd[i] * dt);
                }
                let tip = reacher_fingertip(*q);
                -((tip[0] - goal[0]).hypot(tip[1] - goal[1]))
            }
        };
        self.t += 1;
        StepResult {
            obs: self.observe(),
            reward,
            done: self.t >= self.spec.horizon,
        }
    }
}

pub fn reacher_fingertip(q: [f64; 2]) -> [f64; 2] {
    [
        REACHER_LINK * q[0].cos() + REACHER_LINK * (q[0] + q[1]).cos(),
        REACHER_LINK * q[0].sin() + REACHER_LINK * (q[0] + q[1]).sin(),
    ]
}

/// Ordered task list repeated for a number of cycles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualSchedule {
    pub tasks: Vec<EnvName>,
    pub episodes_per_task: usize,
    pub cycles: usize,
}

impl ContinualSchedule {
    pub fn total_episodes(&self) -> usize {
        self.tasks.len() * self.episodes_per_task * self.cycles
    }

    /// Task (and head) index of the `episode`-th episode, or `None` once finished.
    pub fn task_at(&self, episode: usize) -> Option<usize> {
        if episode >= self.total_episodes() || self.episodes_per_task == 0 {
            return None;
        }
        Some((episode / self.episodes_per_task) % self.tasks.len())
    }

    /// Environment steps needed to finish the schedule.
    pub fn total_steps(&self) -> u64 {
        let per_cycle: usize = self.tasks.iter().map(|t| t.spec().horizon).sum();
        (per_cycle * self.episodes_per_task * self.cycles) as u64
    }

    pub fn cycle_at(&self, episode: usize) -> usize {
        episode / (self.episodes_per_task * self.tasks.len()).max(1)
    }

    pub fn obs_dim(&self) -> usize {
        self.tasks.iter().map(|t| t.spec().obs_dim).max().unwrap_or(0)
    }

    pub fn act_dim(&self) -> usize {
        self.tasks.iter().map(|t| t.spec().act_dim).max().unwrap_or(0)
    }
}

/// Zero-pads `obs` to `width`.
pub fn pad(obs: &[f64], width: usize) -> Vec<f64> {
    let mut out = obs.to_vec();
    out.resize(width.max(obs.len()), 0.0);
    out
}

/// Steps through a [`ContinualSchedule`], switching environments at episode boundaries.
#[derive(Clone, Debug)]
pub struct ContinualEnv {
    schedule: ContinualSchedule,
    envs: Vec<Env>,
    episode: usize,
}

impl ContinualEnv {
    pub fn new(schedule: ContinualSchedule) -> Self {
        let envs = schedule.tasks.iter().map(|&t| Env::new(t)).collect();
        Self {
            schedule,
            envs,
            episode: 0,
        }
    }

    pub fn schedule(&self) -> &ContinualSchedule {
        &self.schedule
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn task(&self) -> Option<usize> {
        self.schedule.task_at(self.episode)
    }

    pub fn is_finished(&self) -> bool {
        self.task().is_none()
    }

    pub fn current(&self) -> Option<&Env> {
        self.task().map(|t| &self.envs[t])
    }

    /// Resets the current task's environment; observation is padded.
    pub fn reset(&mut self, seed: u64) -> Option<Vec<f64>> {
        let width = self.schedule.obs_dim();
        let task = self.task()?;
        Some(pad(&self.envs[task].reset(seed), width))
    }

    /// Steps the current task; finishing an episode advances the schedule.
    pub fn step(&mut self, action: &[f64]) -> Option<StepResult> {
        let width = self.schedule.obs_dim();
        let task = self.task()?;
        let mut res = self.envs[task].step(action);
        res.obs = pad(&res.obs, width);
        if res.done {
            self.episode += 1;
        }
        Some(res)
    }
}
