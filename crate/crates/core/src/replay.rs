//! Ring replay buffer with proportional sampling over a SumTree.

use rand::Rng;
use thiserror::Error;

/// Number of tree writes between exact rebuilds.
pub const REBUILD_INTERVAL: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("priority must be finite and >= 0, got {0}")]
    BadPriority(f64),
    #[error("index {index} is not live (size {size})")]
    StaleIndex { index: usize, size: usize },
    #[error("buffer is empty")]
    Empty,
    #[error("total priority is zero")]
    ZeroTotal,
    #[error("buffer holds {size} items, below warmup {warmup}")]
    BelowWarmup { size: usize, warmup: usize },
    #[error("capacity must be > 0")]
    ZeroCapacity,
}

pub type Result<T> = std::result::Result<T, ReplayError>;

/// Array-backed binary tree of priority partial sums.
///
/// Leaves sit at `[size, 2 * size)` where `size` is the capacity rounded up to a
/// power of two. Parents are recomputed from both children on every write.
#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    size: usize,
    nodes: Vec<f64>,
    writes: u64,
    visits: u64,
}

impl SumTree {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        let size = capacity.next_power_of_two();
        Ok(Self {
            capacity,
            size,
            nodes: vec![0.0; 2 * size],
            writes: 0,
            visits: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.size + i]
    }

    pub fn set(&mut self, i: usize, priority: f64) -> Result<()> {
        if !(priority >= 0.0 && priority.is_finite()) {
            return Err(ReplayError::BadPriority(priority));
        }
        assert!(i < self.capacity, "leaf {i} out of range");
        let mut node = self.size + i;
        self.nodes[node] = priority;
        self.visits += 1;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
            self.visits += 1;
        }
        self.writes += 1;
        if self.writes % REBUILD_INTERVAL == 0 {
            self.rebuild();
        }
        Ok(())
    }

    /// Recomputes every internal node from the leaves.
    pub fn rebuild(&mut self) {
        for node in (1..self.size).rev() {
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Leaf whose prefix-sum interval contains `u`, for `u` in `[0, total)`.
    /// Zero-priority leaves are never returned while the total is positive.
    pub fn find(&mut self, u: f64) -> usize {
        let mut u = u.clamp(0.0, self.total());
        let mut node = 1;
        while node < self.size {
            self.visits += 1;
            let left = self.nodes[2 * node];
            let right = self.nodes[2 * node + 1];
            if (u < left && left > 0.0) || right <= 0.0 {
                node *= 2;
            } else {
                u = (u - left).max(0.0);
                node = 2 * node + 1;
            }
        }
        self.visits += 1;
        node - self.size
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize> {
        let total = self.total();
        if !(total > 0.0) {
            return Err(ReplayError::ZeroTotal);
        }
        let u = rng.random::<f64>() * total;
        Ok(self.find(u))
    }

    /// Nodes touched since construction; used to check logarithmic cost.
    pub fn node_visits(&self) -> u64 {
        self.visits
    }

    /// Largest `|parent - (left + right)|` over all internal nodes.
    pub fn max_inconsistency(&self) -> f64 {
        (1..self.size)
            .map(|n| (self.nodes[n] - (self.nodes[2 * n] + self.nodes[2 * n + 1])).abs())
            .fold(0.0, f64::max)
    }
}

/// Oldest-first ring of items with one priority per slot.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    tree: SumTree,
    next: usize,
    warmup: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, warmup: usize) -> Result<Self> {
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 20)),
            tree: SumTree::new(capacity)?,
            next: 0,
            warmup,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.tree.capacity()
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn is_ready(&self) -> bool {
        !self.items.is_empty() && self.items.len() >= self.warmup
    }

    /// Stores `item`, evicting the oldest entry when full. Returns its slot.
    pub fn insert(&mut self, item: T, rho: f64) -> Result<usize> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(ReplayError::BadPriority(rho));
        }
        let slot = self.next;
        if slot == self.items.len() {
            self.items.push(item);
        } else {
            self.items[slot] = item;
        }
        self.tree.set(slot, rho)?;
        self.next = (slot + 1) % self.capacity();
        Ok(slot)
    }

    pub fn get(&self, slot: usize) -> Option<&T> {
        self.items.get(slot)
    }

    pub fn priority(&self, slot: usize) -> Result<f64> {
        self.check_live(slot)?;
        Ok(self.tree.get(slot))
    }

    pub fn total_priority(&self) -> f64 {
        self.tree.total()
    }

    pub fn mean_priority(&self) -> Result<f64> {
        if self.items.is_empty() {
            return Err(ReplayError::Empty);
        }
        Ok(self.tree.total() / self.items.len() as f64)
    }

    pub fn update_priority(&mut self, slot: usize, rho: f64) -> Result<()> {
        self.check_live(slot)?;
        self.tree.set(slot, rho)
    }

    fn check_live(&self, slot: usize) -> Result<()> {
        if slot >= self.items.len() {
            return Err(ReplayError::StaleIndex {
                index: slot,
                size: self.items.len(),
            });
        }
        Ok(())
    }

    fn check_ready(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(ReplayError::Empty);
        }
        if self.items.len() < self.warmup {
            return Err(ReplayError::BelowWarmup {
                size: self.items.len(),
                warmup: self.warmup,
            });
        }
        Ok(())
    }

    /// I.i.d. draws with probability proportional to priority, with replacement.
    pub fn sample_proportional<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        self.check_ready()?;
        (0..batch).map(|_| self.tree.sample(rng)).collect()
    }

    /// Uniform draws with replacement.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        self.check_ready()?;
        let n = self.items.len();
        Ok((0..batch).map(|_| rng.random_range(0..n)).collect())
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }
}
