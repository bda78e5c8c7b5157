//! Proportional prioritized replay over a sum tree.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("shape mismatch: {field} has length {found}, expected {expected}")]
    ShapeMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("underfilled buffer: {size} stored, batch of {batch} requested")]
    Underfilled { size: usize, batch: usize },
    #[error("invalid replay configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Binary tree of partial sums over a fixed number of leaves. Parents are
/// recomputed from their children on every write, so the root never drifts
/// from the leaf sum by more than the rounding of one pass.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let mut n = self.leaves + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass`; never returns a
    /// zero-valued leaf while the total is positive.
    pub fn find(&self, mass: f64) -> usize {
        let mut mass = mass.max(0.0);
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if mass < left || self.nodes[2 * n + 1] <= 0.0 {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        n - self.leaves
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub priority_floor: f64,
    /// Environment steps over which β is annealed.
    pub beta_horizon: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity: 50_000,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            priority_floor: 1e-3,
            beta_horizon: 200_000,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: &str| Err(ReplayError::InvalidConfig(m.into()));
        if self.capacity == 0 {
            return bad("capacity must be > 0");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.beta_start) || !(0.0..=1.0).contains(&self.beta_end) {
            return bad("beta endpoints must lie in [0, 1]");
        }
        if !(self.priority_floor > 0.0) {
            return bad("priority_floor must be > 0");
        }
        if self.beta_horizon == 0 {
            return bad("beta_horizon must be > 0");
        }
        Ok(())
    }
}

/// Slot plus the insertion stamp it had when sampled; a stamp mismatch on
/// write-back means the slot was overwritten in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleIndex {
    pub slot: usize,
    pub stamp: u64,
}

#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub indices: Vec<SampleIndex>,
    pub transitions: Vec<Transition>,
    pub is_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PrioritizedReplay {
    cfg: ReplayConfig,
    state_dim: usize,
    action_dim: usize,
    tree: SumTree,
    data: Vec<Option<Transition>>,
    stamps: Vec<u64>,
    next: usize,
    size: usize,
    pushes: u64,
    max_priority: f64,
    beta: f64,
    stale_updates: u64,
}

impl PrioritizedReplay {
    pub fn new(cfg: ReplayConfig, state_dim: usize, action_dim: usize) -> Result<Self, ReplayError> {
        cfg.validate()?;
        Ok(PrioritizedReplay {
            tree: SumTree::new(cfg.capacity),
            data: vec![None; cfg.capacity],
            stamps: vec![0; cfg.capacity],
            next: 0,
            size: 0,
            pushes: 0,
            max_priority: 1.0,
            beta: cfg.beta_start,
            stale_updates: 0,
            state_dim,
            action_dim,
            cfg,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    /// Write-backs skipped because their slot had been overwritten.
    pub fn stale_updates(&self) -> u64 {
        self.stale_updates
    }

    pub fn tree_total(&self) -> f64 {
        self.tree.total()
    }

    /// Raw priority `p_i` of a slot (before the α exponent).
    pub fn priority(&self, slot: usize) -> Option<f64> {
        self.data.get(slot)?.as_ref()?;
        let stored = self.tree.get(slot);
        Some(if self.cfg.alpha == 0.0 { stored } else { stored.powf(1.0 / self.cfg.alpha) })
    }

    /// Sampling probability `p_i^α / Σ p_k^α`.
    pub fn probability(&self, slot: usize) -> Option<f64> {
        self.data.get(slot)?.as_ref()?;
        Some(self.tree.get(slot) / self.tree.total())
    }

    pub fn push(&mut self, t: Transition) -> Result<SampleIndex, ReplayError> {
        check_len("state", &t.state, self.state_dim)?;
        check_len("action", &t.action, self.action_dim)?;
        check_len("next_state", &t.next_state, self.state_dim)?;
        let slot = self.next;
        let p = self.max_priority.max(self.cfg.priority_floor);
        self.tree.set(slot, p.powf(self.cfg.alpha));
        self.data[slot] = Some(t);
        self.pushes += 1;
        self.stamps[slot] = self.pushes;
        self.next = (self.next + 1) % self.cfg.capacity;
        self.size = (self.size + 1).min(self.cfg.capacity);
        Ok(SampleIndex {
            slot,
            stamp: self.pushes,
        })
    }

    /// Stratified proportional draw of `batch` transitions with IS weights
    /// normalized by the batch maximum.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<SampledBatch, ReplayError> {
        if batch == 0 || self.size < batch {
            return Err(ReplayError::Underfilled {
                size: self.size,
                batch,
            });
        }
        let total = self.tree.total();
        let segment = total / batch as f64;
        let n = self.size as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut transitions = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for k in 0..batch {
            let mass = segment * (k as f64 + rng.random::<f64>());
            let mut slot = self.tree.find(mass.min(total));
            if self.data.get(slot).and_then(Option::as_ref).is_none() {
                // rounding at the right edge can land past the live slots
                slot = self.tree.find(0.0);
            }
            let prob = self.tree.get(slot) / total;
            weights.push((n * prob).powf(-self.beta));
            indices.push(SampleIndex {
                slot,
                stamp: self.stamps[slot],
            });
            transitions.push(self.data[slot].clone().expect("live slot"));
        }
        let max_w = weights.iter().cloned().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= max_w;
        }
        Ok(SampledBatch {
            indices,
            transitions,
            is_weights: weights,
        })
    }

    /// `p_i ← |δ_i| + floor`; the running max tracks `|δ|`. Overwritten slots
    /// are skipped and counted.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], td_errors: &[f64]) {
        for (idx, delta) in indices.iter().zip(td_errors) {
            let live = self.data.get(idx.slot).is_some_and(Option::is_some) && self.stamps[idx.slot] == idx.stamp;
            if !live || !delta.is_finite() {
                self.stale_updates += 1;
                continue;
            }
            let p = delta.abs() + self.cfg.priority_floor;
            self.max_priority = self.max_priority.max(delta.abs());
            self.tree.set(idx.slot, p.powf(self.cfg.alpha));
        }
    }

    pub fn anneal_beta(&mut self, fraction: f64) {
        let f = fraction.clamp(0.0, 1.0);
        self.beta = self.cfg.beta_start + f * (self.cfg.beta_end - self.cfg.beta_start);
    }

    /// Anneals β by elapsed environment steps over the configured horizon.
    pub fn anneal_beta_steps(&mut self, env_steps: u64) {
        self.anneal_beta(env_steps as f64 / self.cfg.beta_horizon as f64);
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta;
    }
}

fn check_len(field: &'static str, v: &[f64], expected: usize) -> Result<(), ReplayError> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(ReplayError::ShapeMismatch {
            field,
            expected,
            found: v.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tr(tag: f64) -> Transition {
        Transition {
            state: vec![tag; 3],
            action: vec![tag; 2],
            reward: tag,
            next_state: vec![tag; 3],
            done: false,
        }
    }

    fn buf(capacity: usize, alpha: f64) -> PrioritizedReplay {
        let cfg = ReplayConfig {
            capacity,
            alpha,
            ..Default::default()
        };
        PrioritizedReplay::new(cfg, 3, 2).unwrap()
    }

    /// Leaf-by-leaf sum over live slots.
    fn brute_total(b: &PrioritizedReplay) -> f64 {
        (0..b.cfg.capacity)
            .filter(|&i| b.data[i].is_some())
            .map(|i| b.tree.get(i))
            .sum()
    }

    #[test]
    fn first_push_has_priority_one() {
        let mut b = buf(4, 0.6);
        b.push(tr(0.0)).unwrap();
        assert_eq!(b.priority(0), Some(1.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut b = buf(4, 0.6);
        let mut t = tr(0.0);
        t.action.push(1.0);
        let err = b.push(t).unwrap_err();
        assert!(err.to_string().starts_with("shape mismatch"));
        assert!(b.is_empty());
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = buf(3, 0.6);
        for k in 0..4 {
            b.push(tr(k as f64)).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.data[0].as_ref().unwrap().reward, 3.0);
    }

    #[test]
    fn raised_max_carries_to_next_push() {
        let mut b = buf(4, 0.6);
        let i = b.push(tr(0.0)).unwrap();
        b.update_priorities(&[i], &[5.0]);
        b.push(tr(1.0)).unwrap();
        assert!((b.priority(1).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn zero_error_gets_floor_and_sign_is_ignored() {
        let mut b = buf(4, 0.6);
        let i = b.push(tr(0.0)).unwrap();
        let j = b.push(tr(1.0)).unwrap();
        b.update_priorities(&[i], &[0.0]);
        assert!((b.priority(0).unwrap() - 1e-3).abs() < 1e-12);
        b.update_priorities(&[i, j], &[2.0, -2.0]);
        assert_eq!(b.priority(0), b.priority(1));
    }

    #[test]
    fn probabilities_follow_alpha() {
        for (alpha, expect) in [(1.0, 0.75), (0.6, 3f64.powf(0.6) / (3f64.powf(0.6) + 1.0))] {
            let mut b = buf(2, alpha);
            let i = b.push(tr(0.0)).unwrap();
            let j = b.push(tr(1.0)).unwrap();
            b.update_priorities(&[i, j], &[3.0 - 1e-3, 1.0 - 1e-3]);
            assert!((b.probability(0).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_priorities_give_unit_weights() {
        let mut b = buf(8, 0.6);
        for k in 0..8 {
            b.push(tr(k as f64)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = b.sample(8, &mut rng).unwrap();
        assert!(s.is_weights.iter().all(|&w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn underfilled_sample_errors() {
        let mut b = buf(8, 0.6);
        b.push(tr(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = b.sample(2, &mut rng).unwrap_err();
        assert!(err.to_string().starts_with("underfilled buffer"));
    }

    #[test]
    fn beta_anneal_is_linear() {
        let mut b = buf(2, 0.6);
        b.anneal_beta(0.0);
        assert!((b.beta() - 0.4).abs() < 1e-12);
        b.anneal_beta(0.5);
        assert!((b.beta() - 0.7).abs() < 1e-12);
        b.anneal_beta(1.0);
        assert!((b.beta() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stale_indices_are_counted() {
        let mut b = buf(2, 0.6);
        let i = b.push(tr(0.0)).unwrap();
        b.push(tr(1.0)).unwrap();
        b.push(tr(2.0)).unwrap();
        b.update_priorities(&[i], &[9.0]);
        assert_eq!(b.stale_updates(), 1);
        assert_eq!(b.priority(0), Some(1.0));
    }

    #[test]
    fn empirical_frequency_matches_probability() {
        let mut b = buf(10, 0.6);
        let idx: Vec<_> = (0..10).map(|k| b.push(tr(k as f64)).unwrap()).collect();
        let errs: Vec<f64> = (0..10).map(|k| 0.5 + k as f64).collect();
        b.update_priorities(&idx, &errs);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws / 10 {
            for i in b.sample(10, &mut rng).unwrap().indices {
                counts[i.slot] += 1;
            }
        }
        for (slot, &c) in counts.iter().enumerate() {
            let p = b.probability(slot).unwrap();
            assert!((c as f64 / draws as f64 - p).abs() < 0.01);
        }
    }

    proptest! {
        #[test]
        fn root_matches_brute_sum(ops in prop::collection::vec((any::<bool>(), 0.0..20.0f64), 1..400), seed in 0u64..100) {
            let mut b = buf(16, 0.6);
            let mut live = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (push, delta) in ops {
                if push || live.is_empty() {
                    live.push(b.push(tr(delta)).unwrap());
                } else {
                    let k = rng.random_range(0..live.len());
                    b.update_priorities(&[live[k]], &[delta]);
                }
                let brute = brute_total(&b);
                prop_assert!((b.tree_total() - brute).abs() <= 1e-6 * brute.max(1e-12));
            }
        }

        #[test]
        fn weights_in_unit_interval(errs in prop::collection::vec(0.0..50.0f64, 12), beta in 0.0..1.0f64, seed in 0u64..50) {
            let mut b = buf(12, 0.6);
            let idx: Vec<_> = (0..12).map(|k| b.push(tr(k as f64)).unwrap()).collect();
            b.update_priorities(&idx, &errs);
            b.set_beta(beta);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = b.sample(6, &mut rng).unwrap();
            prop_assert!(s.is_weights.iter().all(|&w| w > 0.0 && w <= 1.0));
            b.set_beta(0.0);
            let s = b.sample(6, &mut rng).unwrap();
            prop_assert!(s.is_weights.iter().all(|&w| w == 1.0));
        }

        #[test]
        fn sampling_is_seed_deterministic(seed in 0u64..1000) {
            let mut b = buf(12, 0.6);
            let idx: Vec<_> = (0..12).map(|k| b.push(tr(k as f64)).unwrap()).collect();
            b.update_priorities(&idx, &(0..12).map(|k| k as f64).collect::<Vec<_>>());
            let a = b.sample(4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().indices;
            let c = b.sample(4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().indices;
            prop_assert_eq!(a, c);
        }
    }
}
