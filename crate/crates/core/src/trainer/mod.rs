//! Multi-objective policy training.
//!
//! Two proximal policy optimization paths share one rollout collector and
//! optimizer:
//!
//! * the dense path trains a bare trunk against a fixed linear preference
//!   (used to produce the per-objective source policies and the
//!   per-preference upper-bound baseline),
//! * the router path trains only a router's scorers and fresh critic heads
//!   on top of frozen low-rank experts, mixing per-objective advantages with
//!   mirror-descent weights that chase the worst objective.

pub mod backprop;
pub mod env;
pub mod scalarize;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::adapters::{LoraExpert, WeightMap};
use crate::error::{Error, Result};
use crate::numkernel::RngStream;
use crate::policy::{gae_per_objective, gae_raw, PolicyNetwork, TrajectoryBatch};
use crate::router::{HoeModel, RouterExpert};
use crate::simplex::{nearest_experts, PreferenceVector};

pub use backprop::{
    dense_loss_grad, dense_param_count, dense_read, dense_write, routed_act, routed_forward,
    routed_greedy, router_loss_grad, router_param_count, router_read, router_write, Adam,
    LossReport, PpoHyper, RoutedCache, VALUE_LOSS_COEF,
};
pub use env::{make_env, oracle_best, EnvSpec, FrontierShape, TokenTradeEnv};
pub use scalarize::{
    linear_scalarize, mixed_advantage, omd_update, stch_weights, tch_value, AlphaSchedule,
    OmdState, OmdUpdateRule, Scalarizer,
};

/// Rollout seed streams, kept distinct per training path.
const DENSE_STREAM: u64 = 17;
const ROUTER_STREAM: u64 = 19;

/// Clipped-surrogate training settings shared by both paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_ratio: f64,
    pub epochs_per_batch: usize,
    pub batch_episodes: usize,
    pub learning_rate: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub total_iterations: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_ratio: 0.2,
            epochs_per_batch: 4,
            batch_episodes: 64,
            learning_rate: 0.01,
            gae_lambda: 0.95,
            gamma: 1.0,
            entropy_coef: 0.01,
            total_iterations: 75,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "clip_ratio {} outside (0, 1)",
                self.clip_ratio
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::InvalidConfig(format!(
                "gae_lambda {} outside [0, 1]",
                self.gae_lambda
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_episodes == 0 || self.epochs_per_batch == 0 {
            return Err(Error::InvalidConfig(
                "batch_episodes and epochs_per_batch must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLogRecord {
    pub iteration: usize,
    /// Mean per-objective episode return of the collection batch.
    pub mean_rewards: Vec<f64>,
    /// Advantage-mixing weights used this iteration.
    pub w: Vec<f64>,
    /// Worst-case weighted gap to the reference point; absent on the dense
    /// path, which has no reference point.
    pub tch_value: Option<f64>,
    /// Linear-scalarized mean return under the training preference.
    pub scalarized: f64,
}

pub type TrainingLog = Vec<TrainingLogRecord>;

/// Writes the log as line-delimited JSON records.
pub fn write_training_log(log: &[TrainingLogRecord], mut out: impl Write) -> Result<()> {
    for record in log {
        let line =
            serde_json::to_string(record).map_err(|e| Error::Io(format!("log encode: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::Io(e.to_string()))?;
    }
    Ok(())
}

/// Reads a line-delimited training log back.
pub fn read_training_log(reader: impl BufRead) -> Result<TrainingLog> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::Io(format!("log line {}: {e}", k + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// Rolls out `episodes` full episodes under a sampling policy that returns
/// (action, log-probability, per-objective values) per state.
pub fn collect_batch<F>(
    env: &TokenTradeEnv,
    episodes: usize,
    rng: &mut RngStream,
    mut policy: F,
) -> Result<TrajectoryBatch>
where
    F: FnMut(&[f32], &mut RngStream) -> Result<(usize, f64, Vec<f64>)>,
{
    let mut batch = TrajectoryBatch { discount: 1.0, ..TrajectoryBatch::default() };
    for _ in 0..episodes {
        batch.episode_starts.push(batch.actions.len());
        let mut obs = env.initial_obs();
        for _ in 0..env.horizon() {
            let (action, logp, values) = policy(&obs, rng)?;
            if action >= env.vocab_size() {
                return Err(Error::InvalidInput(format!(
                    "action {action} outside vocabulary of {}",
                    env.vocab_size()
                )));
            }
            batch.states.push(std::mem::replace(&mut obs, env.obs_after(action)));
            batch.actions.push(action);
            batch.logprobs.push(logp);
            batch.rewards.push(env.reward(action).to_vec());
            batch.values.push(values);
        }
    }
    Ok(batch)
}

/// Mean per-objective episode returns over sampled rollouts.
pub fn evaluate_sampled_returns<F>(
    env: &TokenTradeEnv,
    episodes: usize,
    rng: &mut RngStream,
    mut act: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f32], &mut RngStream) -> Result<usize>,
{
    let batch = collect_batch(env, episodes, rng, |s, r| Ok((act(s, r)?, 0.0, Vec::new())))?;
    Ok(batch.mean_returns())
}

/// Mean per-objective episode returns under deterministic greedy actions.
pub fn evaluate_greedy_returns<F>(
    env: &TokenTradeEnv,
    episodes: usize,
    mut act: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f32]) -> Result<usize>,
{
    let n = env.n_objectives();
    let mut acc = vec![0.0f64; n];
    for _ in 0..episodes.max(1) {
        let mut obs = env.initial_obs();
        for _ in 0..env.horizon() {
            let action = act(&obs)?;
            for (a, r) in acc.iter_mut().zip(env.reward(action)) {
                *a += r;
            }
            obs = env.obs_after(action);
        }
    }
    acc.iter_mut().for_each(|v| *v /= episodes.max(1) as f64);
    Ok(acc)
}

/// Reference point for worst-case scalarization: per objective, the maximum
/// return its dedicated policy reaches over greedy evaluation episodes, plus
/// a margin.
pub fn reference_point(
    policies: &[PolicyNetwork],
    env: &TokenTradeEnv,
    episodes: usize,
    margin: f64,
) -> Result<Vec<f64>> {
    if policies.len() != env.n_objectives() {
        return Err(Error::InvalidInput(format!(
            "{} policies for {} objectives",
            policies.len(),
            env.n_objectives()
        )));
    }
    let mut z = Vec::with_capacity(policies.len());
    for (i, policy) in policies.iter().enumerate() {
        let omegas = policy.empty_omegas();
        let mut best = f64::NEG_INFINITY;
        for _ in 0..episodes.max(1) {
            let mut obs = env.initial_obs();
            let mut ret = 0.0;
            for _ in 0..env.horizon() {
                let action = policy.act_greedy(&obs, &omegas)?;
                ret += env.reward(action)[i];
                obs = env.obs_after(action);
            }
            best = best.max(ret);
        }
        z.push(best + margin);
    }
    Ok(z)
}

/// Normalizes a scalar advantage sequence to zero mean, unit variance. A
/// near-constant batch comes back all zero: dividing residual noise by a
/// vanishing deviation would amplify it into spurious updates.
fn normalize_scalar(adv: &[f64]) -> Vec<f64> {
    let n = adv.len().max(1) as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-6 {
        return vec![0.0; adv.len()];
    }
    adv.iter().map(|a| (a - mean) / std).collect()
}

fn check_env_compat(net: &PolicyNetwork, env: &TokenTradeEnv) -> Result<()> {
    if net.obs_dim() != env.obs_dim() || net.action_count() != env.vocab_size() {
        return Err(Error::IncompatibleModels(format!(
            "network is {}->{} but environment needs {}->{}",
            net.obs_dim(),
            net.action_count(),
            env.obs_dim(),
            env.vocab_size()
        )));
    }
    if net.n_objectives() != env.n_objectives() {
        return Err(Error::IncompatibleModels(format!(
            "network has {} value heads, environment has {} objectives",
            net.n_objectives(),
            env.n_objectives()
        )));
    }
    Ok(())
}

/// Trains a bare dense trunk against a fixed linear preference. Returns the
/// trained network and its per-iteration log. Trunk biases stay frozen so
/// the result folds losslessly into a task delta.
pub fn train_dense(
    base: &PolicyNetwork,
    lambda: &PreferenceVector,
    env: &TokenTradeEnv,
    cfg: &PpoConfig,
) -> Result<(PolicyNetwork, TrainingLog)> {
    cfg.validate()?;
    check_env_compat(base, env)?;
    if lambda.dim() != env.n_objectives() {
        return Err(Error::InvalidInput(format!(
            "preference has {} objectives, environment has {}",
            lambda.dim(),
            env.n_objectives()
        )));
    }
    if base.attached_count() != 0 {
        return Err(Error::InvalidInput(
            "dense training starts from a bare trunk, detach experts first".into(),
        ));
    }
    let mut net = base.clone();
    let mut rng = RngStream::new(cfg.seed, DENSE_STREAM);
    let mut adam = Adam::new(cfg.learning_rate, dense_param_count(&net));
    let mut params = dense_read(&net);
    let hyper = PpoHyper { clip_ratio: cfg.clip_ratio, entropy_coef: cfg.entropy_coef };
    let omegas = net.empty_omegas();
    let mut log = Vec::with_capacity(cfg.total_iterations);

    for iteration in 0..cfg.total_iterations {
        let batch = {
            let net_ref = &net;
            let omegas_ref = &omegas;
            collect_batch(env, cfg.batch_episodes, &mut rng, |s, r| {
                let (action, logp) = net_ref.act(s, omegas_ref, r)?;
                let values = net_ref.values(s, omegas_ref)?;
                Ok((action, logp, values))
            })?
        };
        let raw = gae_raw(&batch, cfg.gae_lambda, cfg.gamma);
        let targets: Vec<Vec<f64>> = raw
            .iter()
            .zip(&batch.values)
            .map(|(a, v)| a.iter().zip(v).map(|(ai, vi)| ai + vi).collect())
            .collect();
        let adv = normalize_scalar(&mixed_advantage(&raw, lambda.weights())?);
        let mean_rewards = batch.mean_returns();

        for _ in 0..cfg.epochs_per_batch {
            let (report, grad) = dense_loss_grad(&net, &batch, &adv, &targets, &hyper)?;
            if !report.total.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite loss at iteration {iteration}"
                )));
            }
            adam.step(&mut params, &grad);
            dense_write(&mut net, &params)?;
        }

        let scalarized = linear_scalarize(&mean_rewards, lambda)?;
        log.push(TrainingLogRecord {
            iteration,
            mean_rewards,
            w: lambda.weights().to_vec(),
            tch_value: None,
            scalarized,
        });
    }
    Ok((net, log))
}

/// Standard single-objective training: the dense path at a one-hot
/// preference. Returns the trained trunk weights for expert extraction.
pub fn train_single_objective(
    base: &PolicyNetwork,
    objective_index: usize,
    env: &TokenTradeEnv,
    cfg: &PpoConfig,
) -> Result<WeightMap> {
    if objective_index >= env.n_objectives() {
        return Err(Error::InvalidInput(format!(
            "objective {objective_index} out of {}",
            env.n_objectives()
        )));
    }
    let lambda = PreferenceVector::one_hot(env.n_objectives(), objective_index)?;
    let (net, _) = train_dense(base, &lambda, env, cfg)?;
    Ok(net.weight_map())
}

/// FNV-1a over every tensor of every expert, for the frozen-expert contract.
pub fn lora_checksum(experts: &[LoraExpert]) -> u64 {
    let mut h = Fnv::new();
    for e in experts {
        h.eat(e.id.as_bytes());
        h.eat(&(e.rank as u64).to_le_bytes());
        h.eat(&e.rescale.to_bits().to_le_bytes());
        for (path, pair) in &e.modules {
            h.eat(path.as_bytes());
            h.eat_matrix(&pair.down);
            h.eat_matrix(&pair.up);
        }
    }
    h.0
}

/// Checksum over everything the router path must not touch: trunk weights,
/// biases, and every attached expert tensor.
fn frozen_checksum(net: &PolicyNetwork) -> u64 {
    let mut h = Fnv::new();
    for layer in &net.layers {
        h.eat(layer.module_path().as_bytes());
        h.eat_matrix(layer.w_pre());
        for b in &layer.bias {
            h.eat(&b.to_bits().to_le_bytes());
        }
        for a in layer.attached() {
            h.eat(a.expert_id.as_bytes());
            h.eat(&a.gamma.to_bits().to_le_bytes());
            h.eat_matrix(&a.down);
            h.eat_matrix(&a.up);
        }
    }
    h.0
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn eat(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn eat_matrix(&mut self, m: &crate::numkernel::DenseMatrix) {
        self.eat(&(m.rows() as u64).to_le_bytes());
        self.eat(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            self.eat(&v.to_bits().to_le_bytes());
        }
    }
}

/// Trains a router at preference `lambda` on top of an assembled model.
///
/// The router's assigned experts are the N nearest registered low-rank
/// experts; only the router's scorers and fresh critic heads receive
/// updates. Each iteration collects a batch under the current router,
/// refreshes the mirror-descent weights from the batch's mean returns, mixes
/// the per-objective normalized advantages, and applies clipped surrogate
/// epochs. If any log-weight exceeds 50 in magnitude the step size is halved
/// in place; a non-finite loss aborts with `TrainingDiverged`.
pub fn train_router(
    model: &HoeModel,
    lambda: &PreferenceVector,
    env: &TokenTradeEnv,
    cfg: &PpoConfig,
    omd: OmdState,
) -> Result<(RouterExpert, TrainingLog)> {
    cfg.validate()?;
    check_env_compat(model.base(), env)?;
    let n = env.n_objectives();
    if lambda.dim() != n || omd.log_w.len() != n {
        return Err(Error::InvalidInput(format!(
            "preference of {} and weight state of {} for {} objectives",
            lambda.dim(),
            omd.log_w.len(),
            n
        )));
    }
    if model.lora_len() < n {
        return Err(Error::InvalidInput(format!(
            "router needs {n} assignable experts, registry has {}",
            model.lora_len()
        )));
    }

    let prefs: Vec<PreferenceVector> =
        model.lora_registry().iter().map(|e| e.preference.clone()).collect();
    let chosen = nearest_experts(lambda, &prefs, n)?;
    let assigned: Vec<String> =
        chosen.iter().map(|&i| model.lora_registry()[i].id.clone()).collect();

    let mut net = model.base().clone();
    net.detach_all();
    for &i in &chosen {
        net.attach_expert(&model.lora_registry()[i])?;
    }
    for head in net.value_heads.iter_mut() {
        head.w.fill(0.0);
        head.b = 0.0;
    }
    let frozen_before = frozen_checksum(&net);

    let dims: Vec<(String, usize)> =
        net.layers.iter().map(|l| (l.module_path().to_string(), l.in_dim())).collect();
    let router_id = format!(
        "router_{}",
        lambda.weights().iter().map(|w| format!("{w:.2}")).collect::<Vec<_>>().join("_")
    );
    let mut router = RouterExpert::zeros(router_id, lambda.clone(), assigned, &dims)?;

    let mut omd = omd;
    let mut rng = RngStream::new(cfg.seed, ROUTER_STREAM);
    let mut adam = Adam::new(cfg.learning_rate, router_param_count(&router, &net));
    let mut params = router_read(&router, &net);
    let hyper = PpoHyper { clip_ratio: cfg.clip_ratio, entropy_coef: cfg.entropy_coef };
    let mut log = Vec::with_capacity(cfg.total_iterations);

    for iteration in 0..cfg.total_iterations {
        let batch = {
            let net_ref = &net;
            let router_ref = &router;
            collect_batch(env, cfg.batch_episodes, &mut rng, |s, r| {
                routed_act(net_ref, router_ref, s, r)
            })?
        };
        let raw = gae_raw(&batch, cfg.gae_lambda, cfg.gamma);
        let targets: Vec<Vec<f64>> = raw
            .iter()
            .zip(&batch.values)
            .map(|(a, v)| a.iter().zip(v).map(|(ai, vi)| ai + vi).collect())
            .collect();
        let mean_rewards = batch.mean_returns();

        omd = omd_update(&omd, lambda, &mean_rewards)?;
        if omd.log_w.iter().any(|l| l.abs() > 50.0) {
            omd.alpha *= 0.5;
        }
        let w = omd.weights();

        let batch = gae_per_objective(batch, cfg.gae_lambda, cfg.gamma);
        let adv = mixed_advantage(&batch.advantages, &w)?;

        for _ in 0..cfg.epochs_per_batch {
            let (report, grad) = router_loss_grad(&net, &router, &batch, &adv, &targets, &hyper)?;
            if !report.total.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite loss at iteration {iteration}"
                )));
            }
            adam.step(&mut params, &grad);
            router_write(&mut router, &mut net, &params)?;
        }

        let tch = tch_value(&mean_rewards, lambda, &omd.z_star)?;
        let scalarized = linear_scalarize(&mean_rewards, lambda)?;
        log.push(TrainingLogRecord {
            iteration,
            mean_rewards,
            w,
            tch_value: Some(tch),
            scalarized,
        });
    }

    assert_eq!(
        frozen_before,
        frozen_checksum(&net),
        "router training must leave trunk and expert tensors untouched"
    );
    Ok((router, log))
}
