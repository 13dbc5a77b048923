//! Meta-reinforcement learning on a 2-D goal navigation environment.
//!
//! The policy is a diagonal Gaussian whose mean network is a context model;
//! the inner loop ascends a reward-to-go policy-gradient objective in the
//! context vector, and the outer loop ascends the average post-adaptation
//! objective in `theta` (differentiating through the inner ascent).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{grad, Graph, Tensor, TensorData};
use crate::error::{CaviaError, Result};
use crate::metasup::{pairwise_mean, MetaAlgorithm};
use crate::models::{Architecture, BoundModel, ContextModel};
use crate::optim::AdamState;

pub const HORIZON: usize = 100;
pub const ACTION_CLIP: f64 = 0.1;
pub const GOAL_RADIUS: f64 = 0.01;
pub const GOAL_RANGE: f64 = 0.5;
pub const DEFAULT_DISCOUNT: f64 = 0.99;
const LOG_2PI: f64 = 1.8378770664093453;

/// Point navigation: start at the origin, move by clipped actions, reward is
/// the negative distance of the next state to the goal. An episode ends at
/// the horizon or within `GOAL_RADIUS` of the goal.
#[derive(Debug, Clone)]
pub struct Nav2dEnv {
    pub goal: [f64; 2],
    state: [f64; 2],
    steps: usize,
}

pub struct StepOutcome {
    pub next: [f64; 2],
    pub reward: f64,
    pub done: bool,
}

impl Nav2dEnv {
    pub fn new(goal: [f64; 2]) -> Self {
        Self { goal, state: [0.0, 0.0], steps: 0 }
    }

    pub fn reset(&mut self) -> [f64; 2] {
        self.state = [0.0, 0.0];
        self.steps = 0;
        self.state
    }

    pub fn state(&self) -> [f64; 2] {
        self.state
    }

    pub fn step(&mut self, action: [f64; 2]) -> StepOutcome {
        let ax = action[0].clamp(-ACTION_CLIP, ACTION_CLIP);
        let ay = action[1].clamp(-ACTION_CLIP, ACTION_CLIP);
        let next = [self.state[0] + ax, self.state[1] + ay];
        let dist = ((next[0] - self.goal[0]).powi(2) + (next[1] - self.goal[1]).powi(2)).sqrt();
        self.state = next;
        self.steps += 1;
        StepOutcome {
            next,
            reward: -dist,
            done: self.steps >= HORIZON || dist < GOAL_RADIUS,
        }
    }
}

pub fn sample_goal(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [
        rng.gen_range(-GOAL_RANGE..GOAL_RANGE),
        rng.gen_range(-GOAL_RANGE..GOAL_RANGE),
    ]
}

/// One episode segment: `states.len() == actions.len() + 1`.
#[derive(Debug, Clone, Default)]
pub struct Episode {
    pub states: Vec<[f64; 2]>,
    pub actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Ordered (state, action, reward) records; the environment resets between
/// episode segments.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub episodes: Vec<Episode>,
}

impl Trajectory {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn mean_episode_return(&self) -> f64 {
        crate::util::mean(&self.episodes.iter().map(Episode::total_reward).collect::<Vec<_>>())
    }
}

/// Per-timestep discounted reward-to-go, grouped by episode.
#[derive(Debug, Clone)]
pub struct ReturnEstimate {
    pub per_step: Vec<Vec<f64>>,
    pub gamma: f64,
    pub baseline: Option<f64>,
}

impl ReturnEstimate {
    /// G_t = r_t + gamma * G_{t+1}.
    pub fn compute(traj: &Trajectory, gamma: f64) -> Self {
        let per_step = traj
            .episodes
            .iter()
            .map(|ep| {
                let mut g = vec![0.0; ep.rewards.len()];
                let mut acc = 0.0;
                for (slot, &r) in g.iter_mut().zip(&ep.rewards).rev() {
                    acc = r + gamma * acc;
                    *slot = acc;
                }
                g
            })
            .collect();
        Self { per_step, gamma, baseline: None }
    }

    /// Install the mean of all reward-to-go values as the baseline.
    pub fn with_mean_baseline(mut self) -> Self {
        let flat: Vec<f64> = self.per_step.iter().flatten().copied().collect();
        self.baseline = Some(crate::util::mean(&flat));
        self
    }
}

/// Diagonal Gaussian policy: a context-model mean network plus a learned
/// per-dimension log standard deviation stored in `theta`.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    pub net: ContextModel,
}

impl GaussianPolicy {
    pub fn init(hidden: Vec<usize>, context_dim: usize, seed: u64) -> Result<Self> {
        let arch = Architecture::mlp(2, hidden, 2, context_dim);
        let mut net = ContextModel::init(arch, seed)?;
        net.theta.insert("log_std".into(), TensorData::vector(vec![0.0, 0.0]));
        Ok(Self { net })
    }

    pub fn from_model(net: ContextModel) -> Result<Self> {
        if !net.theta.contains_key("log_std") {
            return Err(CaviaError::Load("policy checkpoint lacks log_std".into()));
        }
        Ok(Self { net })
    }

    pub fn log_std(&self) -> &[f64] {
        &self.net.theta["log_std"].values
    }

    pub fn action_mean(&self, phi: &[f64], state: [f64; 2]) -> Result<[f64; 2]> {
        let out = self.net.forward_values(phi, &state);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(CaviaError::Divergence {
                iteration: 0,
                detail: "non-finite action mean".into(),
            });
        }
        Ok([out[0], out[1]])
    }

    pub fn act(&self, phi: &[f64], state: [f64; 2], rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        let mean = self.action_mean(phi, state)?;
        let std = self.log_std();
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        Ok([mean[0] + std[0].exp() * e0, mean[1] + std[1].exp() * e1])
    }

    pub fn bind(&self, graph: &Graph) -> BoundPolicy {
        BoundPolicy { net: self.net.bind(graph) }
    }
}

/// Exactly `interactions` environment steps, resetting at episode ends.
pub fn collect_rollout(
    policy: &GaussianPolicy,
    phi: &[f64],
    goal: [f64; 2],
    interactions: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut env = Nav2dEnv::new(goal);
    let mut traj = Trajectory::default();
    let mut episode = Episode::default();
    episode.states.push(env.reset());
    for _ in 0..interactions {
        let state = env.state();
        let action = policy.act(phi, state, rng)?;
        let out = env.step(action);
        episode.actions.push(action);
        episode.rewards.push(out.reward);
        episode.states.push(out.next);
        if out.done {
            traj.episodes.push(std::mem::take(&mut episode));
            episode.states.push(env.reset());
        }
    }
    if !episode.is_empty() {
        traj.episodes.push(episode);
    }
    Ok(traj)
}

/// Run `count` complete episodes (to termination), for return measurement.
pub fn collect_episodes(
    policy: &GaussianPolicy,
    phi: &[f64],
    goal: [f64; 2],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut traj = Trajectory::default();
    for _ in 0..count {
        let mut env = Nav2dEnv::new(goal);
        let mut episode = Episode::default();
        episode.states.push(env.reset());
        loop {
            let state = env.state();
            let action = policy.act(phi, state, rng)?;
            let out = env.step(action);
            episode.actions.push(action);
            episode.rewards.push(out.reward);
            episode.states.push(out.next);
            if out.done {
                break;
            }
        }
        traj.episodes.push(episode);
    }
    Ok(traj)
}

/// A policy lifted into a graph for one adaptation episode.
pub struct BoundPolicy {
    pub net: BoundModel,
}

impl BoundPolicy {
    pub fn reset_context(&mut self) {
        self.net.reset_context();
    }

    pub fn reset_theta(&mut self) {
        self.net.reset_theta();
    }

    fn log_std_tensor(&self) -> Tensor {
        self.net.theta()["log_std"].clone()
    }

    /// Log-density of the recorded actions under the current parameters,
    /// one entry per timestep.
    pub fn log_prob(&self, states: &Tensor, actions: &TensorData) -> Result<Tensor> {
        let graph = self.net.graph().clone();
        let mean = self.net.forward(states)?;
        let log_std = self.log_std_tensor();
        let inv_sigma = log_std.scale(-1.0)?.exp()?;
        let diff = graph.constant(actions).sub(&mean)?;
        let z = diff.mul(&inv_sigma)?;
        let quad = z.square()?.sum(Some(1))?;
        let sum_log_std = log_std.sum(None)?;
        quad.scale(-0.5)?.sub(&sum_log_std)?.add_const(-LOG_2PI)
    }
}

/// Reward-to-go REINFORCE objective with a trajectory-mean baseline:
/// the per-episode sums of `log pi(a|s) * (G - baseline)`, averaged over
/// episodes. Ascending it improves expected return.
pub fn pg_objective(policy: &BoundPolicy, traj: &Trajectory, gamma: f64) -> Result<Tensor> {
    if traj.episodes.is_empty() || traj.total_steps() == 0 {
        return Err(CaviaError::Contract("policy-gradient objective over an empty trajectory".into()));
    }
    let returns = ReturnEstimate::compute(traj, gamma).with_mean_baseline();
    let baseline = returns.baseline.unwrap();
    let episodes = traj.episodes.len() as f64;

    let steps = traj.total_steps();
    let mut states = Vec::with_capacity(steps * 2);
    let mut actions = Vec::with_capacity(steps * 2);
    let mut weights = Vec::with_capacity(steps);
    for (ep, g) in traj.episodes.iter().zip(&returns.per_step) {
        for t in 0..ep.len() {
            states.extend_from_slice(&ep.states[t]);
            actions.extend_from_slice(&ep.actions[t]);
            weights.push((g[t] - baseline) / episodes);
        }
    }
    let graph = policy.net.graph().clone();
    let states = graph.constant(&TensorData { shape: vec![steps, 2], values: states });
    let actions = TensorData { shape: vec![steps, 2], values: actions };
    let weights = graph.constant(&TensorData::vector(weights));

    let logp = policy.log_prob(&states, &actions)?;
    logp.mul(&weights)?.sum(None)
}

/// One ascent step on the context vector only.
pub fn rl_inner_adapt(
    policy: &mut BoundPolicy,
    traj_train: &Trajectory,
    inner_lr: f64,
    gamma: f64,
    track_meta_graph: bool,
) -> Result<()> {
    let objective = pg_objective(policy, traj_train, gamma)?;
    let phi = policy.net.phi().clone();
    let grads = grad(&objective, &[&phi], track_meta_graph)?;
    let update = grads.gradient(&phi).scale(inner_lr)?;
    policy.net.set_phi(phi.add(&update)?);
    Ok(())
}

/// One ascent step on every `theta` tensor (full-adaptation baseline).
pub fn maml_rl_inner_adapt(
    policy: &mut BoundPolicy,
    traj_train: &Trajectory,
    inner_lr: f64,
    gamma: f64,
    track_meta_graph: bool,
) -> Result<()> {
    let objective = pg_objective(policy, traj_train, gamma)?;
    let current: Vec<(String, Tensor)> = policy
        .net
        .theta()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let refs: Vec<&Tensor> = current.iter().map(|(_, t)| t).collect();
    let grads = grad(&objective, &refs, track_meta_graph)?;
    for (name, t) in &current {
        let update = grads.gradient(t).scale(inner_lr)?;
        policy.net.set_theta(name, t.add(&update)?);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RlConfig {
    pub algorithm: MetaAlgorithm,
    pub inner_lr: f64,
    pub gamma: f64,
    pub first_order: bool,
    /// Environment interactions per pre-update rollout.
    pub m_train: usize,
    /// Environment interactions per post-update rollout.
    pub m_test: usize,
}

#[derive(Debug, Clone)]
pub struct RlStepDiagnostics {
    pub pre_update_return: f64,
    pub post_update_return: f64,
    pub meta_grad_norm: f64,
}

/// One outer-loop update over a batch of goals: collect a pre-update rollout,
/// adapt, collect a post-update rollout, and ascend the averaged objective in
/// `theta` with Adam.
pub fn rl_meta_step(
    policy: &mut GaussianPolicy,
    goals: &[[f64; 2]],
    cfg: &RlConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<RlStepDiagnostics> {
    if goals.is_empty() {
        return Err(CaviaError::Contract("rl_meta_step needs at least one goal".into()));
    }
    let graph = Graph::new();
    let mut bound = policy.bind(&graph);
    let track = !cfg.first_order;

    let mut objectives = Vec::with_capacity(goals.len());
    let mut pre_returns = Vec::with_capacity(goals.len());
    let mut post_returns = Vec::with_capacity(goals.len());
    for (task_idx, &goal) in goals.iter().enumerate() {
        let with_task = |e: CaviaError| match e {
            CaviaError::Divergence { iteration, detail } => CaviaError::Divergence {
                iteration,
                detail: format!("task {task_idx}: {detail}"),
            },
            CaviaError::NonFinite { op } => CaviaError::Divergence {
                iteration: 0,
                detail: format!("task {task_idx}: non-finite value in {op}"),
            },
            other => other,
        };
        bound.reset_context();
        bound.reset_theta();
        let zero_phi = vec![0.0; policy.net.arch.context_dim];
        let traj_train =
            collect_rollout(policy, &zero_phi, goal, cfg.m_train, rng).map_err(with_task)?;
        match cfg.algorithm {
            MetaAlgorithm::Cavia => {
                rl_inner_adapt(&mut bound, &traj_train, cfg.inner_lr, cfg.gamma, track)
                    .map_err(with_task)?;
            }
            MetaAlgorithm::Maml => {
                maml_rl_inner_adapt(&mut bound, &traj_train, cfg.inner_lr, cfg.gamma, track)
                    .map_err(with_task)?;
            }
        }
        // Roll out the adapted policy values, then evaluate the objective
        // through the graph-connected parameters (on-policy).
        let adapted = GaussianPolicy { net: bound.net.snapshot() };
        let traj_test = collect_rollout(&adapted, &adapted.net.phi, goal, cfg.m_test, rng)
            .map_err(with_task)?;
        let objective = pg_objective(&bound, &traj_test, cfg.gamma).map_err(with_task)?;
        pre_returns.push(traj_train.mean_episode_return());
        post_returns.push(traj_test.mean_episode_return());
        objectives.push(objective);
    }

    let mean_objective = pairwise_mean(&objectives)?;
    let value = mean_objective.value();
    if !value.is_finite() || value.abs() > crate::metasup::MAX_META_LOSS {
        return Err(CaviaError::Divergence {
            iteration: 0,
            detail: format!("meta objective {value:e}"),
        });
    }

    let leaves: Vec<(String, Tensor)> = bound
        .net
        .theta_leaves()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let refs: Vec<&Tensor> = leaves.iter().map(|(_, t)| t).collect();
    let grads = grad(&mean_objective, &refs, false)?;
    // Adam minimizes; negate for ascent.
    let grad_values: indexmap::IndexMap<String, TensorData> = leaves
        .iter()
        .map(|(name, t)| {
            let mut g = grads.gradient(t).data();
            g.values.iter_mut().for_each(|v| *v = -*v);
            (name.clone(), g)
        })
        .collect();
    let meta_grad_norm = grad_values
        .values()
        .map(|g| g.values.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    adam.step(&mut policy.net.theta, &grad_values)?;
    policy.net.reset_context();

    Ok(RlStepDiagnostics {
        pre_update_return: crate::util::mean(&pre_returns),
        post_update_return: crate::util::mean(&post_returns),
        meta_grad_norm,
    })
}

#[derive(Debug, Clone)]
pub struct RlEvalConfig {
    pub algorithm: MetaAlgorithm,
    pub inner_lr: f64,
    pub gamma: f64,
    /// Interactions per adaptation rollout.
    pub adapt_interactions: usize,
    /// Complete episodes per return measurement.
    pub eval_episodes: usize,
    /// Halve the learning rate after the first update (the full-adaptation
    /// baseline's test-time schedule).
    pub lr_halving: bool,
}

/// For each goal: mean return before adaptation and after 1..=`steps` updates,
/// each using fresh rollouts; `theta` frozen throughout.
pub fn rl_adapt_and_eval(
    policy: &GaussianPolicy,
    goals: &[[f64; 2]],
    steps: usize,
    cfg: &RlEvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut all = Vec::with_capacity(goals.len());
    for &goal in goals {
        let mut adapted = policy.net.clone();
        adapted.reset_context();
        let mut returns = Vec::with_capacity(steps + 1);
        let measure = |model: &ContextModel, rng: &mut ChaCha8Rng| -> Result<f64> {
            let p = GaussianPolicy { net: model.clone() };
            let traj = collect_episodes(&p, &model.phi, goal, cfg.eval_episodes, rng)?;
            Ok(traj.mean_episode_return())
        };
        returns.push(measure(&adapted, rng)?);
        for step in 1..=steps {
            let lr = if cfg.lr_halving && step > 1 { cfg.inner_lr / 2.0 } else { cfg.inner_lr };
            let p = GaussianPolicy { net: adapted.clone() };
            let traj = collect_rollout(&p, &adapted.phi, goal, cfg.adapt_interactions, rng)?;
            let graph = Graph::new();
            let mut bound = p.bind(&graph);
            match cfg.algorithm {
                MetaAlgorithm::Cavia => {
                    rl_inner_adapt(&mut bound, &traj, lr, cfg.gamma, false)?;
                }
                MetaAlgorithm::Maml => {
                    maml_rl_inner_adapt(&mut bound, &traj, lr, cfg.gamma, false)?;
                }
            }
            adapted = bound.net.snapshot();
            returns.push(measure(&adapted, rng)?);
        }
        all.push(returns);
    }
    Ok(all)
}

/// Trajectory dump rows: `task_id,episode,t,s_x,s_y,a_x,a_y,r`.
pub fn write_trajectories_csv(
    trajectories: &[(usize, &Trajectory)],
    mut w: impl std::io::Write,
) -> Result<()> {
    writeln!(w, "task_id,episode,t,s_x,s_y,a_x,a_y,r")?;
    for (task_id, traj) in trajectories {
        for (e, ep) in traj.episodes.iter().enumerate() {
            for t in 0..ep.len() {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    task_id,
                    e,
                    t,
                    crate::util::format_g17(ep.states[t][0]),
                    crate::util::format_g17(ep.states[t][1]),
                    crate::util::format_g17(ep.actions[t][0]),
                    crate::util::format_g17(ep.actions[t][1]),
                    crate::util::format_g17(ep.rewards[t]),
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_policy(seed: u64) -> GaussianPolicy {
        GaussianPolicy::init(vec![8], 2, seed).unwrap()
    }

    #[test]
    fn env_determinism_and_reward_definition() {
        let goal = [0.3, -0.2];
        let actions = [[0.05, 0.0], [0.2, -0.05], [-0.01, 0.08]];
        let run = || {
            let mut env = Nav2dEnv::new(goal);
            env.reset();
            actions.iter().map(|&a| {
                let out = env.step(a);
                (out.next, out.reward)
            }).collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        for ((s1, r1), (s2, r2)) in a.iter().zip(&b) {
            assert_eq!(s1, s2);
            assert_eq!(r1, r2);
            let dist = ((s1[0] - goal[0]).powi(2) + (s1[1] - goal[1]).powi(2)).sqrt();
            assert!((r1 + dist).abs() < 1e-12);
        }
    }

    #[test]
    fn actions_are_clipped() {
        let mut env = Nav2dEnv::new([0.0, 0.0]);
        env.reset();
        let out = env.step([5.0, -5.0]);
        assert_eq!(out.next, [ACTION_CLIP, -ACTION_CLIP]);
    }

    #[test]
    fn reward_zero_at_goal() {
        let mut env = Nav2dEnv::new([0.1, 0.0]);
        env.reset();
        let out = env.step([0.1, 0.0]);
        assert_eq!(out.reward, 0.0);
        assert!(out.done);
    }

    #[test]
    fn rollout_of_200_steps_has_two_episodes() {
        // Goal far enough that early termination cannot occur.
        let mut policy = tiny_policy(0);
        // Make the policy nearly deterministic and stationary.
        for t in policy.net.theta.values_mut() {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        policy.net.theta["log_std"] = TensorData::vector(vec![(1e-8f64).ln(), (1e-8f64).ln()]);
        let traj = collect_rollout(&policy, &[0.0, 0.0], [0.4, 0.4], 200, &mut rng(1)).unwrap();
        assert_eq!(traj.episodes.len(), 2);
        assert_eq!(traj.total_steps(), 200);
        for ep in &traj.episodes {
            assert_eq!(ep.states.len(), ep.actions.len() + 1);
        }
    }

    #[test]
    fn zero_policy_stays_near_origin() {
        let mut policy = tiny_policy(0);
        for t in policy.net.theta.values_mut() {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        policy.net.theta["log_std"] = TensorData::vector(vec![(1e-8f64).ln(), (1e-8f64).ln()]);
        let goal = [0.3, 0.4];
        let m = 50;
        let traj = collect_rollout(&policy, &[0.0, 0.0], goal, m, &mut rng(2)).unwrap();
        let total: f64 = traj.episodes.iter().map(Episode::total_reward).sum();
        let goal_dist = (goal[0] * goal[0] + goal[1] * goal[1]).sqrt();
        assert!((total + m as f64 * goal_dist).abs() < 1e-3, "total {total}");
    }

    #[test]
    fn reward_to_go_recursion_holds() {
        let policy = tiny_policy(3);
        let traj = collect_rollout(&policy, &[0.0, 0.0], [0.2, 0.1], 120, &mut rng(3)).unwrap();
        let gamma = 0.97;
        let returns = ReturnEstimate::compute(&traj, gamma);
        for (ep, g) in traj.episodes.iter().zip(&returns.per_step) {
            for t in 0..ep.len() {
                let next = if t + 1 < ep.len() { g[t + 1] } else { 0.0 };
                assert!((g[t] - (ep.rewards[t] + gamma * next)).abs() < 1e-12);
            }
        }
        // gamma = 0 reduces reward-to-go to the instantaneous reward.
        let flat = ReturnEstimate::compute(&traj, 0.0);
        for (ep, g) in traj.episodes.iter().zip(&flat.per_step) {
            assert_eq!(&ep.rewards, g);
        }
    }

    #[test]
    fn constant_advantages_give_exactly_zero_gradient() {
        // Constant rewards, gamma = 0: baseline equals every reward-to-go.
        let policy = tiny_policy(4);
        let mut traj = Trajectory::default();
        let mut episode = Episode::default();
        episode.states.push([0.0, 0.0]);
        for i in 0..5 {
            episode.actions.push([0.01 * i as f64, -0.02]);
            episode.rewards.push(-0.5);
            episode.states.push([0.01, 0.01]);
        }
        traj.episodes.push(episode);

        let graph = Graph::new();
        let mut bound = policy.bind(&graph);
        bound.reset_context();
        let objective = pg_objective(&bound, &traj, 0.0).unwrap();
        let phi = bound.net.phi().clone();
        let grads = grad(&objective, &[&phi], false).unwrap();
        assert!(grads.gradient(&phi).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_trajectory_is_a_contract_error() {
        let policy = tiny_policy(5);
        let graph = Graph::new();
        let bound = policy.bind(&graph);
        let traj = Trajectory::default();
        assert!(matches!(
            pg_objective(&bound, &traj, 0.99),
            Err(CaviaError::Contract(_))
        ));
    }

    #[test]
    fn zero_lr_keeps_context_at_zero_and_update_is_ascent() {
        let policy = tiny_policy(6);
        let traj = collect_rollout(&policy, &[0.0, 0.0], [0.2, 0.3], 80, &mut rng(6)).unwrap();

        let graph = Graph::new();
        let mut bound = policy.bind(&graph);
        bound.reset_context();
        rl_inner_adapt(&mut bound, &traj, 0.0, 0.99, false).unwrap();
        assert_eq!(bound.net.phi().values(), vec![0.0, 0.0]);

        // After one step of size alpha from zero, phi = alpha * grad J.
        let objective = pg_objective(&bound, &traj, 0.99).unwrap();
        let phi0 = bound.net.phi().clone();
        let g = grad(&objective, &[&phi0], false).unwrap();
        let gv = g.gradient(&phi0).values();
        let alpha = 0.37;
        rl_inner_adapt(&mut bound, &traj, alpha, 0.99, false).unwrap();
        let adapted = bound.net.phi().values();
        for (a, gi) in adapted.iter().zip(&gv) {
            assert!((a - alpha * gi).abs() < 1e-12);
        }
    }

    #[test]
    fn pg_gradient_matches_finite_differences_with_frozen_actions() {
        // Common random numbers: the trajectory (states, actions, returns) is
        // held fixed; only the log-density depends on the parameters.
        let policy = tiny_policy(7);
        let traj = collect_rollout(&policy, &[0.1, -0.1], [0.2, 0.3], 60, &mut rng(7)).unwrap();
        let gamma = 0.99;
        let phi0 = [0.1, -0.1];

        let objective_at = |phi: &[f64]| -> f64 {
            let graph = Graph::new();
            let mut bound = policy.bind(&graph);
            bound.net.set_phi(graph.leaf(&TensorData::vector(phi.to_vec()), true));
            pg_objective(&bound, &traj, gamma).unwrap().value()
        };
        let numeric = crate::metarl::tests::fd(&phi0, objective_at);

        let graph = Graph::new();
        let mut bound = policy.bind(&graph);
        bound.net.set_phi(graph.leaf(&TensorData::vector(phi0.to_vec()), true));
        let objective = pg_objective(&bound, &traj, gamma).unwrap();
        let phi = bound.net.phi().clone();
        let grads = grad(&objective, &[&phi], false).unwrap();
        let analytic = grads.gradient(&phi).values();
        for (a, n) in analytic.iter().zip(&numeric) {
            let tol = 1e-4 * a.abs().max(n.abs()).max(1e-4);
            assert!((a - n).abs() < tol, "analytic {a} vs fd {n}");
        }
    }

    fn fd(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        let mut probe = x.to_vec();
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            out.push((up - down) / (2.0 * h));
        }
        out
    }

    #[test]
    fn trajectory_csv_has_expected_header() {
        let policy = tiny_policy(8);
        let traj = collect_rollout(&policy, &[0.0, 0.0], [0.1, 0.1], 10, &mut rng(8)).unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&[(0, &traj)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("task_id,episode,t,s_x,s_y,a_x,a_y,r\n"));
        assert_eq!(text.lines().count(), 11);
    }
}
