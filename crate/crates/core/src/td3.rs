//! Twin-delayed deterministic policy gradient learner.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::nn::{soft_update, DenseNet, NnError, Optimizer, OptimizerKind, OutputActivation};
use crate::replay::Transition;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Td3Error {
    #[error("divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error("invalid learner configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: u64,
    pub smoothing_sigma: f64,
    pub smoothing_clip: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch: usize,
    pub action_bound: f64,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; non-positive disables it.
    pub grad_clip: f64,
    /// Multiplier applied to rewards before they enter the targets.
    pub reward_scale: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Td3Config {
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            smoothing_sigma: 0.2,
            smoothing_clip: 0.5,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            batch: 128,
            action_bound: 3.0,
            hidden: vec![256, 256],
            optimizer: OptimizerKind::Sgd,
            grad_clip: 10.0,
            reward_scale: 1.0,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<(), Td3Error> {
        let bad = |m: &str| Err(Td3Error::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.policy_delay == 0 {
            return bad("policy_delay must be >= 1");
        }
        if !(self.smoothing_clip > 0.0) || self.smoothing_sigma < 0.0 {
            return bad("smoothing_clip must be > 0 and smoothing_sigma >= 0");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.batch == 0 {
            return bad("batch must be > 0");
        }
        if !(self.action_bound > 0.0) {
            return bad("action_bound must be > 0");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be non-empty and > 0");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward_scale must be > 0");
        }
        Ok(())
    }
}

/// `r + γ (1 − done) min(q1, q2)`
pub fn clipped_double_q_target(reward: f64, done: bool, q1: f64, q2: f64, gamma: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q1.min(q2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnReport {
    /// `y − Q1(s, a)` before the critic step.
    pub td_errors: Vec<f64>,
    pub critic_loss: f64,
    pub actor_updated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Td3Agent {
    cfg: Td3Config,
    state_dim: usize,
    action_dim: usize,
    /// Per-feature divisor applied to states before they enter any network.
    state_scale: Vec<f64>,
    pub actor: DenseNet,
    pub critic1: DenseNet,
    pub critic2: DenseNet,
    pub actor_target: DenseNet,
    pub critic1_target: DenseNet,
    pub critic2_target: DenseNet,
    actor_opt: Optimizer,
    critic1_opt: Optimizer,
    critic2_opt: Optimizer,
    learn_steps: u64,
    actor_updates: u64,
}

impl Td3Agent {
    pub fn new<R: Rng + ?Sized>(
        cfg: Td3Config,
        state_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self, Td3Error> {
        cfg.validate()?;
        let mut actor_dims = vec![state_dim];
        actor_dims.extend(&cfg.hidden);
        actor_dims.push(action_dim);
        let mut critic_dims = vec![state_dim + action_dim];
        critic_dims.extend(&cfg.hidden);
        critic_dims.push(1);
        let actor = DenseNet::new(&actor_dims, OutputActivation::Tanh { scale: cfg.action_bound }, rng)?;
        let critic1 = DenseNet::new(&critic_dims, OutputActivation::Linear, rng)?;
        let critic2 = DenseNet::new(&critic_dims, OutputActivation::Linear, rng)?;
        let opt = |lr: f64, n: usize| Optimizer::new(cfg.optimizer, lr, cfg.grad_clip, n);
        Ok(Td3Agent {
            actor_opt: opt(cfg.actor_lr, actor.param_count()),
            critic1_opt: opt(cfg.critic_lr, critic1.param_count()),
            critic2_opt: opt(cfg.critic_lr, critic2.param_count()),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            state_scale: vec![1.0; state_dim],
            learn_steps: 0,
            actor_updates: 0,
            state_dim,
            action_dim,
            cfg,
        })
    }

    pub fn config(&self) -> &Td3Config {
        &self.cfg
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn learn_steps(&self) -> u64 {
        self.learn_steps
    }

    pub fn actor_updates(&self) -> u64 {
        self.actor_updates
    }

    pub fn set_learn_steps(&mut self, steps: u64) {
        self.learn_steps = steps;
        self.actor_updates = steps / self.cfg.policy_delay;
    }

    pub fn set_state_scale(&mut self, scale: Vec<f64>) -> Result<(), Td3Error> {
        if scale.len() != self.state_dim {
            return Err(NnError::ShapeMismatch {
                expected: self.state_dim,
                found: scale.len(),
            }
            .into());
        }
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Td3Error::InvalidConfig("state scales must be > 0".into()));
        }
        self.state_scale = scale;
        Ok(())
    }

    /// Live networks then targets: actor, critic 1, critic 2.
    pub fn networks(&self) -> [&DenseNet; 6] {
        [
            &self.actor,
            &self.critic1,
            &self.critic2,
            &self.actor_target,
            &self.critic1_target,
            &self.critic2_target,
        ]
    }

    pub fn networks_mut(&mut self) -> [&mut DenseNet; 6] {
        [
            &mut self.actor,
            &mut self.critic1,
            &mut self.critic2,
            &mut self.actor_target,
            &mut self.critic1_target,
            &mut self.critic2_target,
        ]
    }

    fn scaled_states<'a>(&self, rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
        let mut out = Vec::new();
        for row in rows {
            out.extend(row.iter().zip(&self.state_scale).map(|(v, s)| v / s));
        }
        out
    }

    fn critic_input(&self, scaled_states: &[f64], actions: &[f64], batch: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(batch * (self.state_dim + self.action_dim));
        for k in 0..batch {
            out.extend_from_slice(&scaled_states[k * self.state_dim..(k + 1) * self.state_dim]);
            out.extend(
                actions[k * self.action_dim..(k + 1) * self.action_dim]
                    .iter()
                    .map(|a| a / self.cfg.action_bound),
            );
        }
        out
    }

    /// Deterministic policy action for one raw state.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>, Td3Error> {
        if state.len() != self.state_dim {
            return Err(NnError::ShapeMismatch {
                expected: self.state_dim,
                found: state.len(),
            }
            .into());
        }
        let x = self.scaled_states(std::iter::once(state));
        Ok(self.actor.forward(&x)?)
    }

    /// Both live critic values for raw states and actions.
    pub fn q_values(&self, states: &[f64], actions: &[f64], batch: usize) -> Result<(Vec<f64>, Vec<f64>), Td3Error> {
        let s = self.scaled_states(states.chunks_exact(self.state_dim));
        let x = self.critic_input(&s, actions, batch);
        Ok((
            self.critic1.forward_batch(&x, batch)?.output,
            self.critic2.forward_batch(&x, batch)?.output,
        ))
    }

    /// Smoothed clipped-double-Q targets for a batch.
    pub fn compute_targets<R: Rng + ?Sized>(&self, batch: &[Transition], rng: &mut R) -> Result<Vec<f64>, Td3Error> {
        let n = batch.len();
        let next = self.scaled_states(batch.iter().map(|t| t.next_state.as_slice()));
        let mut actions = self.actor_target.forward_batch(&next, n)?.output;
        if self.cfg.smoothing_sigma > 0.0 {
            let normal = Normal::new(0.0, self.cfg.smoothing_sigma).expect("sigma validated");
            let c = self.cfg.smoothing_clip;
            for a in &mut actions {
                let eps: f64 = normal.sample(rng);
                *a = (*a + eps.clamp(-c, c)).clamp(-self.cfg.action_bound, self.cfg.action_bound);
            }
        }
        let x = self.critic_input(&next, &actions, n);
        let q1 = self.critic1_target.forward_batch(&x, n)?.output;
        let q2 = self.critic2_target.forward_batch(&x, n)?.output;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(k, t)| clipped_double_q_target(self.cfg.reward_scale * t.reward, t.done, q1[k], q2[k], self.cfg.gamma))
            .collect())
    }

    /// One IS-weighted squared-error step on each critic; returns `y − Q1`
    /// measured before the step and the mean weighted loss of critic 1.
    pub fn update_critics(
        &mut self,
        batch: &[Transition],
        targets: &[f64],
        is_weights: &[f64],
    ) -> Result<(Vec<f64>, f64), Td3Error> {
        let n = batch.len();
        let s = self.scaled_states(batch.iter().map(|t| t.state.as_slice()));
        let actions: Vec<f64> = batch.iter().flat_map(|t| t.action.iter().copied()).collect();
        let x = self.critic_input(&s, &actions, n);
        let mut deltas = Vec::new();
        let mut loss1 = 0.0;
        for which in 0..2 {
            let (net, opt) = if which == 0 {
                (&mut self.critic1, &mut self.critic1_opt)
            } else {
                (&mut self.critic2, &mut self.critic2_opt)
            };
            let cache = net.forward_batch(&x, n)?;
            let q = &cache.output;
            let mut loss = 0.0;
            let mut grad = vec![0.0; n];
            for k in 0..n {
                let diff = q[k] - targets[k];
                loss += is_weights[k] * diff * diff / n as f64;
                grad[k] = 2.0 * is_weights[k] * diff / n as f64;
            }
            if !loss.is_finite() {
                return Err(Td3Error::Divergence(format!(
                    "critic {} loss is {loss} after {} learn steps",
                    which + 1,
                    self.learn_steps
                )));
            }
            if which == 0 {
                deltas = targets.iter().zip(q).map(|(y, q)| y - q).collect();
                loss1 = loss;
            }
            let (g, _) = net.backward(&cache, &grad)?;
            opt.step(net.params_mut(), &g);
            if !net.all_finite() {
                return Err(Td3Error::Divergence(format!(
                    "critic {} parameters became non-finite after {} learn steps",
                    which + 1,
                    self.learn_steps
                )));
            }
        }
        Ok((deltas, loss1))
    }

    /// Ascends `Q1(s, π(s))` with one actor step.
    pub fn update_actor(&mut self, batch: &[Transition]) -> Result<(), Td3Error> {
        let n = batch.len();
        let s = self.scaled_states(batch.iter().map(|t| t.state.as_slice()));
        let actor_cache = self.actor.forward_batch(&s, n)?;
        let x = self.critic_input(&s, &actor_cache.output, n);
        let critic_cache = self.critic1.forward_batch(&x, n)?;
        let (_, dx) = self.critic1.backward(&critic_cache, &vec![-1.0 / n as f64; n])?;
        let width = self.state_dim + self.action_dim;
        let mut da = Vec::with_capacity(n * self.action_dim);
        for k in 0..n {
            da.extend(dx[k * width + self.state_dim..(k + 1) * width].iter().map(|g| g / self.cfg.action_bound));
        }
        let (g, _) = self.actor.backward(&actor_cache, &da)?;
        self.actor_opt.step(self.actor.params_mut(), &g);
        if !self.actor.all_finite() {
            return Err(Td3Error::Divergence(format!(
                "actor parameters became non-finite after {} learn steps",
                self.learn_steps
            )));
        }
        Ok(())
    }

    /// Soft-updates all three target networks with rate `tau`.
    pub fn update_targets(&mut self, tau: f64) {
        soft_update(&mut self.actor_target, &self.actor, tau);
        soft_update(&mut self.critic1_target, &self.critic1, tau);
        soft_update(&mut self.critic2_target, &self.critic2, tau);
    }

    /// Runs the actor and target step when the learn counter is a multiple
    /// of the policy delay; returns whether it did.
    pub fn update_actor_and_targets(&mut self, batch: &[Transition]) -> Result<bool, Td3Error> {
        if self.learn_steps % self.cfg.policy_delay != 0 {
            return Ok(false);
        }
        self.update_actor(batch)?;
        self.update_targets(self.cfg.tau);
        self.actor_updates += 1;
        Ok(true)
    }

    /// One full learner step on a sampled batch.
    pub fn learn<R: Rng + ?Sized>(
        &mut self,
        batch: &[Transition],
        is_weights: &[f64],
        rng: &mut R,
    ) -> Result<LearnReport, Td3Error> {
        let targets = self.compute_targets(batch, rng)?;
        let (td_errors, critic_loss) = self.update_critics(batch, &targets, is_weights)?;
        self.learn_steps += 1;
        let actor_updated = self.update_actor_and_targets(batch)?;
        Ok(LearnReport {
            td_errors,
            critic_loss,
            actor_updated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> Td3Config {
        Td3Config {
            hidden: vec![16, 16],
            batch: 8,
            ..Default::default()
        }
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|k| Transition {
                state: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: (0..2).map(|_| rng.random_range(-3.0..3.0)).collect(),
                reward: rng.random_range(-1.0..1.0),
                next_state: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                done: k % 3 == 0,
            })
            .collect()
    }

    #[test]
    fn target_formula_examples() {
        assert!((clipped_double_q_target(1.0, false, 2.0, 3.0, 0.99) - 2.98).abs() < 1e-12);
        assert_eq!(clipped_double_q_target(1.0, true, 2.0, 3.0, 0.99), 1.0);
    }

    #[test]
    fn zero_sigma_uses_target_actor_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = Td3Config {
            smoothing_sigma: 0.0,
            ..small_cfg()
        };
        let agent = Td3Agent::new(cfg, 6, 2, &mut rng).unwrap();
        let b = batch(&mut rng, 4);
        let y = agent.compute_targets(&b, &mut rng).unwrap();
        for (t, y) in b.iter().zip(y) {
            let a = agent.actor_target.forward(&t.next_state).unwrap();
            let mut x = t.next_state.clone();
            x.extend(a.iter().map(|v| v / 3.0));
            let q1 = agent.critic1_target.forward(&x).unwrap()[0];
            let q2 = agent.critic2_target.forward(&x).unwrap()[0];
            assert!((clipped_double_q_target(t.reward, t.done, q1, q2, 0.99) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_critics_get_zero_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut agent = Td3Agent::new(small_cfg(), 6, 2, &mut rng).unwrap();
        let b = batch(&mut rng, 5);
        let states: Vec<f64> = b.iter().flat_map(|t| t.state.clone()).collect();
        let actions: Vec<f64> = b.iter().flat_map(|t| t.action.clone()).collect();
        let (q1, _) = agent.q_values(&states, &actions, 5).unwrap();
        let before = agent.critic1.clone();
        let (d, loss) = agent.update_critics(&b, &q1, &[1.0; 5]).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
        assert_eq!(loss, 0.0);
        assert_eq!(agent.critic1, before);
    }

    #[test]
    fn critic_loss_decreases_on_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = Td3Config {
            critic_lr: 5e-2,
            ..small_cfg()
        };
        let mut agent = Td3Agent::new(cfg, 6, 2, &mut rng).unwrap();
        let b = batch(&mut rng, 8);
        let y: Vec<f64> = b.iter().map(|t| t.reward).collect();
        let losses: Vec<f64> = (0..100).map(|_| agent.update_critics(&b, &y, &[1.0; 8]).unwrap().1).collect();
        let early: f64 = losses[..10].iter().sum();
        let late: f64 = losses[90..].iter().sum();
        assert!(late < 0.5 * early, "{early} -> {late}");
        assert!(losses.windows(2).filter(|w| w[1] > w[0]).count() < 10);
    }

    #[test]
    fn actor_updates_every_other_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agent = Td3Agent::new(small_cfg(), 6, 2, &mut rng).unwrap();
        let b = batch(&mut rng, 8);
        for k in 1..=9u64 {
            agent.learn(&b, &[1.0; 8], &mut rng).unwrap();
            assert_eq!(agent.actor_updates(), k / 2);
        }
    }

    #[test]
    fn soft_update_contracts_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut agent = Td3Agent::new(small_cfg(), 6, 2, &mut rng).unwrap();
        for p in agent.actor.params_mut() {
            *p += 0.5;
        }
        let dist = |a: &DenseNet, b: &DenseNet| {
            a.params().iter().zip(b.params()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let before = dist(&agent.actor_target, &agent.actor);
        agent.update_targets(0.005);
        let after = dist(&agent.actor_target, &agent.actor);
        assert!((after - 0.995 * before).abs() < 1e-9 * before);
    }

    #[test]
    fn actor_step_raises_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = Td3Config {
            actor_lr: 1e-2,
            ..small_cfg()
        };
        let mut agent = Td3Agent::new(cfg, 6, 2, &mut rng).unwrap();
        let b = batch(&mut rng, 8);
        let mean_q = |agent: &Td3Agent| {
            let s: Vec<f64> = b.iter().flat_map(|t| t.state.clone()).collect();
            let a: Vec<f64> = b.iter().flat_map(|t| agent.act(&t.state).unwrap()).collect();
            agent.q_values(&s, &a, 8).unwrap().0.iter().sum::<f64>()
        };
        let before = mean_q(&agent);
        agent.update_actor(&b).unwrap();
        assert!(mean_q(&agent) > before);
    }

    #[test]
    fn non_finite_targets_report_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut agent = Td3Agent::new(small_cfg(), 6, 2, &mut rng).unwrap();
        let b = batch(&mut rng, 2);
        let err = agent.update_critics(&b, &[f64::NAN, 0.0], &[1.0, 1.0]).unwrap_err();
        assert!(err.to_string().starts_with("divergence"));
    }
}
