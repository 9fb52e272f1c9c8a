//! Ring-buffer replay with uniform sampling.

use rand::Rng;

use crate::nn::Matrix;
use crate::Error;

pub const DEFAULT_CAPACITY: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub terminal: bool,
}

/// Column-stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub s: Matrix,
    pub a: Matrix,
    pub r: Vec<f64>,
    pub s_next: Matrix,
    pub terminal: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn from_transitions(transitions: &[Transition]) -> Result<Self, Error> {
        let first = transitions.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (sd, ad) = (first.s.len(), first.a.len());
        let mut s = Vec::with_capacity(transitions.len() * sd);
        let mut a = Vec::with_capacity(transitions.len() * ad);
        let mut s_next = Vec::with_capacity(transitions.len() * sd);
        for t in transitions {
            if t.s.len() != sd || t.s_next.len() != sd || t.a.len() != ad {
                return Err(Error::Shape("transitions in a batch differ in shape".into()));
            }
            s.extend(&t.s);
            a.extend(&t.a);
            s_next.extend(&t.s_next);
        }
        let n = transitions.len();
        Ok(Self {
            s: Matrix::from_vec(n, sd, s)?,
            a: Matrix::from_vec(n, ad, a)?,
            r: transitions.iter().map(|t| t.r).collect(),
            s_next: Matrix::from_vec(n, sd, s_next)?,
            terminal: transitions.iter().map(|t| t.terminal).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Total transitions ever pushed; the next write goes to `inserted % capacity`.
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, Error> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), inserted: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            let slot = (self.inserted % self.capacity as u64) as usize;
            self.items[slot] = t;
        }
        self.inserted += 1;
    }

    pub fn extend(&mut self, transitions: impl IntoIterator<Item = Transition>) {
        for t in transitions {
            self.push(t);
        }
    }

    /// Stored transitions from oldest to newest.
    pub fn iter_ordered(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            (self.inserted % self.capacity as u64) as usize
        };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>, Error> {
        if self.items.len() < n.max(1) {
            return Err(Error::NotReady { have: self.items.len(), need: n.max(1) });
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>, Error> {
        Ok(self.sample_indices(n, rng)?.into_iter().map(|i| self.items[i].clone()).collect())
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch, Error> {
        let idx = self.sample_indices(n, rng)?;
        let picked: Vec<Transition> = idx.into_iter().map(|i| self.items[i].clone()).collect();
        Batch::from_transitions(&picked)
    }
}
