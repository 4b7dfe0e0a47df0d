use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// FIFO transition store with flat per-field storage.
///
/// Positions handed out by the samplers are insertion-order positions among
/// the retained items: position 0 is the oldest transition still stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    size: usize,
    write_index: usize,
    s: Vec<f64>,
    a: Vec<f64>,
    r: Vec<f64>,
    s_next: Vec<f64>,
    done: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Batch<S: Scalar> {
    pub s: Array2<S>,
    pub a: Array2<S>,
    pub r: Array1<S>,
    pub s_next: Array2<S>,
    pub done: Array1<S>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// `[s, a]` rows, the critic input.
    pub fn state_action(&self) -> Array2<S> {
        concat_cols(&self.s, &self.a)
    }
}

pub(crate) fn concat_cols<S: Scalar>(left: &Array2<S>, right: &Array2<S>) -> Array2<S> {
    ndarray::concatenate(ndarray::Axis(1), &[left.view(), right.view()]).expect("row counts match")
}

/// Result of one [`review_sample`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct ReviewDraw {
    pub positions: Vec<usize>,
    /// True when the batch came from the oldest quarter.
    pub reviewed: bool,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            obs_dim,
            act_dim,
            size: 0,
            write_index: 0,
            s: vec![0.0; capacity * obs_dim],
            a: vec![0.0; capacity * act_dim],
            r: vec![0.0; capacity],
            s_next: vec![0.0; capacity * obs_dim],
            done: vec![false; capacity],
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) {
        assert_eq!(t.s.len(), self.obs_dim, "state width");
        assert_eq!(t.a.len(), self.act_dim, "action width");
        assert_eq!(t.s_next.len(), self.obs_dim, "next-state width");
        let i = self.write_index;
        self.s[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(&t.s);
        self.a[i * self.act_dim..(i + 1) * self.act_dim].copy_from_slice(&t.a);
        self.s_next[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(&t.s_next);
        self.r[i] = t.r;
        self.done[i] = t.done;
        self.write_index = (i + 1) % self.capacity;
        self.size = (self.size + 1).min(self.capacity);
    }

    fn slot(&self, position: usize) -> usize {
        debug_assert!(position < self.size);
        if self.size < self.capacity {
            position
        } else {
            (self.write_index + position) % self.capacity
        }
    }

    pub fn get(&self, position: usize) -> Transition {
        let i = self.slot(position);
        Transition {
            s: self.s[i * self.obs_dim..(i + 1) * self.obs_dim].to_vec(),
            a: self.a[i * self.act_dim..(i + 1) * self.act_dim].to_vec(),
            r: self.r[i],
            s_next: self.s_next[i * self.obs_dim..(i + 1) * self.obs_dim].to_vec(),
            done: self.done[i],
        }
    }

    /// Uniform positions over the whole buffer, with replacement.
    pub fn uniform_positions<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        assert!(self.size > 0, "sampling from an empty buffer");
        (0..n).map(|_| rng.random_range(0..self.size)).collect()
    }

    pub fn gather<S: Scalar>(&self, positions: &[usize]) -> Batch<S> {
        let n = positions.len();
        let mut s = Array2::zeros((n, self.obs_dim));
        let mut a = Array2::zeros((n, self.act_dim));
        let mut s_next = Array2::zeros((n, self.obs_dim));
        let mut r = Array1::zeros(n);
        let mut done = Array1::zeros(n);
        for (row, &p) in positions.iter().enumerate() {
            let i = self.slot(p);
            for j in 0..self.obs_dim {
                s[[row, j]] = S::of(self.s[i * self.obs_dim + j]);
                s_next[[row, j]] = S::of(self.s_next[i * self.obs_dim + j]);
            }
            for j in 0..self.act_dim {
                a[[row, j]] = S::of(self.a[i * self.act_dim + j]);
            }
            r[row] = S::of(self.r[i]);
            done[row] = if self.done[i] { S::one() } else { S::zero() };
        }
        Batch { s, a, r, s_next, done }
    }
}

/// Draws `m ~ U(0, 1)` once; if `m > epsilon` the whole batch comes from the
/// oldest quarter of the buffer, otherwise from the whole buffer. Buffers with
/// fewer than four items always sample the whole buffer.
pub fn review_sample<R: Rng + ?Sized>(buffer: &ReplayBuffer, epsilon: f64, batch_size: usize, rng: &mut R) -> ReviewDraw {
    let m: f64 = rng.random();
    let quarter = buffer.len() / 4;
    if m > epsilon && quarter > 0 {
        ReviewDraw {
            positions: (0..batch_size).map(|_| rng.random_range(0..quarter)).collect(),
            reviewed: true,
        }
    } else {
        ReviewDraw {
            positions: buffer.uniform_positions(batch_size, rng),
            reviewed: false,
        }
    }
}
