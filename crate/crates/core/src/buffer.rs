//! Prioritized ring buffers of detached subtrajectories, one per subtrajectory index.

use ndarray::{Array3, ArrayView3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::smc::{resample_indices, ResampleScheme};

/// Priorities are clipped to `±PRIORITY_CLIP` before the softmax.
pub const PRIORITY_CLIP: f64 = 50.0;

#[derive(Debug, Clone)]
struct Store {
    points: Vec<f64>,
    log_priority: Vec<f64>,
    origin: Vec<u64>,
    len: usize,
    cursor: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    stores: Vec<Store>,
    capacity: usize,
    steps: usize,
    dim: usize,
}

fn clip_priority(p: f64) -> Result<f64> {
    if p.is_nan() {
        return Err(Error::Buffer("priority is NaN".into()));
    }
    Ok(p.clamp(-PRIORITY_CLIP, PRIORITY_CLIP))
}

impl ReplayBuffer {
    /// `n_sub` stores, each holding up to `capacity` records of `steps × dim` points.
    pub fn new(n_sub: usize, capacity: usize, steps: usize, dim: usize) -> Self {
        let store = Store {
            points: Vec::new(),
            log_priority: Vec::new(),
            origin: Vec::new(),
            len: 0,
            cursor: 0,
        };
        Self {
            stores: vec![store; n_sub],
            capacity,
            steps,
            dim,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn store(&self, n: usize) -> Result<&Store> {
        self.stores
            .get(n.wrapping_sub(1))
            .ok_or_else(|| Error::Buffer(format!("no store for subtrajectory {n}")))
    }

    fn store_mut(&mut self, n: usize) -> Result<&mut Store> {
        self.stores
            .get_mut(n.wrapping_sub(1))
            .ok_or_else(|| Error::Buffer(format!("no store for subtrajectory {n}")))
    }

    pub fn len(&self, n: usize) -> usize {
        self.store(n).map_or(0, |s| s.len)
    }

    pub fn is_empty(&self, n: usize) -> bool {
        self.len(n) == 0
    }

    pub fn cursor(&self, n: usize) -> usize {
        self.store(n).map_or(0, |s| s.cursor)
    }

    /// Writes records over the oldest entries once full.
    pub fn insert(&mut self, n: usize, records: ArrayView3<f64>, log_priorities: &[f64], iteration: u64) -> Result<()> {
        let (k, steps, dim) = records.dim();
        if k > self.capacity {
            return Err(Error::Buffer(format!("cannot insert {k} records into capacity {}", self.capacity)));
        }
        if steps != self.steps || dim != self.dim || log_priorities.len() != k {
            return Err(Error::Buffer(format!("record batch of shape {:?} does not match the buffer", records.dim())));
        }
        let clipped: Vec<f64> = log_priorities.iter().map(|&p| clip_priority(p)).collect::<Result<_>>()?;
        let cap = self.capacity;
        let rl = steps * dim;
        let store = self.store_mut(n)?;
        if store.points.is_empty() {
            store.points = vec![0.0; cap * rl];
            store.log_priority = vec![0.0; cap];
            store.origin = vec![0; cap];
        }
        for (r, rec) in records.outer_iter().enumerate() {
            let slot = store.cursor;
            for (dst, src) in store.points[slot * rl..(slot + 1) * rl].iter_mut().zip(rec.iter()) {
                *dst = *src;
            }
            store.log_priority[slot] = clipped[r];
            store.origin[slot] = iteration;
            store.cursor = (store.cursor + 1) % cap;
            store.len = (store.len + 1).min(cap);
        }
        Ok(())
    }

    /// Draws `count` records with replacement, proportionally to `exp(priority)`.
    pub fn sample_prioritized<R: Rng + ?Sized>(&self, n: usize, count: usize, rng: &mut R) -> Result<(Array3<f64>, Vec<usize>)> {
        let store = self.store(n)?;
        if store.len == 0 {
            return Err(Error::Buffer(format!("store for subtrajectory {n} is empty")));
        }
        let idx = resample_indices(&store.log_priority[..store.len], count, ResampleScheme::Multinomial, rng)?;
        Ok((self.gather(n, &idx)?, idx))
    }

    /// Copies of the stored records at `indices`.
    pub fn gather(&self, n: usize, indices: &[usize]) -> Result<Array3<f64>> {
        let store = self.store(n)?;
        let rl = self.steps * self.dim;
        let mut out = Vec::with_capacity(indices.len() * rl);
        for &i in indices {
            if i >= store.len {
                return Err(Error::Buffer(format!("index {i} out of range for {} records", store.len)));
            }
            out.extend_from_slice(&store.points[i * rl..(i + 1) * rl]);
        }
        Ok(Array3::from_shape_vec((indices.len(), self.steps, self.dim), out).expect("shape"))
    }

    pub fn log_priorities(&self, n: usize) -> Result<&[f64]> {
        let s = self.store(n)?;
        Ok(&s.log_priority[..s.len])
    }

    pub fn origins(&self, n: usize) -> Result<&[u64]> {
        let s = self.store(n)?;
        Ok(&s.origin[..s.len])
    }

    /// Replaces priorities of the given records; later duplicates win.
    pub fn update_priorities(&mut self, n: usize, indices: &[usize], log_rnds: &[f64]) -> Result<()> {
        if indices.len() != log_rnds.len() {
            return Err(Error::Buffer("indices and priorities differ in length".into()));
        }
        let store = self.store_mut(n)?;
        for (&i, &p) in indices.iter().zip(log_rnds) {
            if i >= store.len {
                return Err(Error::Buffer(format!("index {i} out of range for {} records", store.len)));
            }
            store.log_priority[i] = clip_priority(p)?;
        }
        Ok(())
    }
}
