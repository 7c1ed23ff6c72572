//! Reproducible random streams.
//!
//! Every random quantity in the crate is drawn from a stream identified by a
//! [`StreamKey`]: a root seed plus a path of `(role, index)` pairs. A key is
//! hashed into a ChaCha seed, so a stream is a pure function of its key and
//! never depends on evaluation order or thread count. Child keys extend the
//! parent's path, which keeps the environment copies of a particle, the
//! Brownian motion driving it and the Gaussian field of a limit member in
//! disjoint subtrees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

use crate::error::{Error, Result};

/// Role tag of one step in a key path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    /// Output replication of a study.
    Replication,
    /// Particle of an interacting system.
    Particle,
    /// Picard level.
    Picard,
    /// Gaussian field sample.
    Field,
    /// Environment (mean-field copy) draws.
    Environment,
    /// Member of a law cloud.
    Cloud,
    /// Auxiliary path sharing a replication's environment.
    Companion,
    /// Member of a limit-system ensemble.
    Member,
    /// Centering cloud for fluctuation fields.
    Center,
    /// Study-level split (one subtree per N, per stage, ...).
    Stage,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Replication => 1,
            Role::Particle => 2,
            Role::Picard => 3,
            Role::Field => 4,
            Role::Environment => 5,
            Role::Cloud => 6,
            Role::Companion => 7,
            Role::Member => 8,
            Role::Center => 9,
            Role::Stage => 10,
        }
    }
}

/// Identifier of a random stream.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    seed: u64,
    path: Vec<(Role, u64)>,
}

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey {
            seed,
            path: Vec::new(),
        }
    }

    pub fn from_path(seed: u64, path: &[(Role, u64)]) -> Self {
        StreamKey {
            seed,
            path: path.to_vec(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[(Role, u64)] {
        &self.path
    }

    pub fn derive(&self, role: Role, index: u64) -> StreamKey {
        let mut path = Vec::with_capacity(self.path.len() + 1);
        path.extend_from_slice(&self.path);
        path.push((role, index));
        StreamKey {
            seed: self.seed,
            path,
        }
    }

    /// True when `self` is an ancestor of (or equal to) `other`.
    pub fn is_prefix_of(&self, other: &StreamKey) -> bool {
        self.seed == other.seed
            && self.path.len() <= other.path.len()
            && other.path[..self.path.len()] == self.path[..]
    }

    fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"mfbsde-stream-v1");
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.path.len() as u64).to_le_bytes());
        for (role, index) in &self.path {
            hasher.update([role.tag()]);
            hasher.update(index.to_le_bytes());
        }
        let out = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&out);
        seed
    }

    /// Fresh generator positioned at the start of this key's stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.digest())
    }
}

impl fmt::Display for StreamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.seed)?;
        for (role, index) in &self.path {
            write!(f, "/{role:?}:{index}")?;
        }
        Ok(())
    }
}

/// Extends `parent` by one `(role, index)` step.
pub fn derive_key(parent: &StreamKey, role: Role, index: u64) -> StreamKey {
    parent.derive(role, index)
}

/// `count` i.i.d. standard normal draws from the stream of `key`.
pub fn standard_normals(key: &StreamKey, count: usize) -> Vec<f64> {
    let mut rng = key.rng();
    (0..count).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `count` i.i.d. uniform indices in `0..bound` from the stream of `key`.
pub fn uniform_indices(key: &StreamKey, count: usize, bound: usize) -> Vec<u32> {
    let mut rng = key.rng();
    (0..count)
        .map(|_| rng.random_range(0..bound as u32))
        .collect()
}

/// Uniform time discretization of `[0, horizon]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter("grid needs at least one step".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes_len(&self) -> usize {
        self.steps + 1
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.step_size()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// Index of the node closest to `t`.
    pub fn nearest_node(&self, t: f64) -> usize {
        let i = (t / self.step_size()).round();
        (i.max(0.0) as usize).min(self.steps)
    }
}

/// Brownian increments on `grid`, laid out step-major: entry `i * dim + c`
/// is the increment of coordinate `c` over `[t_i, t_{i+1}]`.
pub fn brownian_increments(key: &StreamKey, grid: &TimeGrid, dim: usize) -> Vec<f64> {
    let sqrt_h = grid.step_size().sqrt();
    let mut rng = key.rng();
    (0..grid.steps() * dim)
        .map(|_| sqrt_h * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Brownian path values `W_{t_i}` (step-major, `steps + 1` nodes) from increments.
pub fn brownian_path(increments: &[f64], dim: usize) -> Vec<f64> {
    let steps = increments.len() / dim;
    let mut w = vec![0.0; (steps + 1) * dim];
    for i in 0..steps {
        for c in 0..dim {
            w[(i + 1) * dim + c] = w[i * dim + c] + increments[i * dim + c];
        }
    }
    w
}
