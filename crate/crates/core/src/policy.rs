//! Toy policy networks whose linear layers accept plug-in low-rank experts.
//!
//! Every linear module computes `w_pre * x + bias + sum_i omega_i * gamma_i *
//! up_i * (down_i * x)`. The base weights stay fixed once built; experts are
//! attached and weighted per forward pass, which is what lets one network
//! serve a whole family of preference-conditioned behaviors.

use crate::adapters::{to_dense, LoraExpert, ObjectiveVector, WeightMap};
use crate::error::{Error, Result};
use crate::numkernel::{sample_categorical, softmax, DenseMatrix, RngStream};

/// One expert factor pair attached to a plugin layer.
#[derive(Debug, Clone)]
pub struct AttachedExpert {
    pub expert_id: String,
    pub down: DenseMatrix,
    pub up: DenseMatrix,
    pub gamma: f64,
}

/// A linear module with immutable base weights and pluggable expert deltas.
#[derive(Debug, Clone)]
pub struct PluginLinear {
    module_path: String,
    w_pre: DenseMatrix,
    pub bias: Vec<f32>,
    attached: Vec<AttachedExpert>,
}

impl PluginLinear {
    pub fn new(module_path: impl Into<String>, w_pre: DenseMatrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != w_pre.rows() {
            return Err(Error::InvalidInput(format!(
                "bias length {} does not match {} output rows",
                bias.len(),
                w_pre.rows()
            )));
        }
        Ok(Self { module_path: module_path.into(), w_pre, bias, attached: Vec::new() })
    }

    pub fn module_path(&self) -> &str {
        &self.module_path
    }

    pub fn w_pre(&self) -> &DenseMatrix {
        &self.w_pre
    }

    /// Trainer-only access; plugin composition never writes the base weights.
    pub(crate) fn w_pre_mut(&mut self) -> &mut DenseMatrix {
        &mut self.w_pre
    }

    pub fn attached(&self) -> &[AttachedExpert] {
        &self.attached
    }

    pub fn in_dim(&self) -> usize {
        self.w_pre.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w_pre.rows()
    }

    /// Attaches one expert's factor pair for this module.
    pub fn attach(
        &mut self,
        expert_id: impl Into<String>,
        down: DenseMatrix,
        up: DenseMatrix,
        gamma: f64,
    ) -> Result<()> {
        let expert_id = expert_id.into();
        if self.attached.iter().any(|a| a.expert_id == expert_id) {
            return Err(Error::DuplicateExpert(expert_id));
        }
        if down.cols() != self.in_dim() || up.rows() != self.out_dim() || down.rows() != up.cols()
        {
            return Err(Error::InvalidInput(format!(
                "factor shapes {:?}/{:?} incompatible with {}x{} module {}",
                down.shape(),
                up.shape(),
                self.out_dim(),
                self.in_dim(),
                self.module_path
            )));
        }
        self.attached.push(AttachedExpert { expert_id, down, up, gamma });
        Ok(())
    }

    pub fn detach_all(&mut self) {
        self.attached.clear();
    }

    /// Per-expert delta contributions `gamma * up * (down * x)`.
    pub fn expert_contributions(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.attached
            .iter()
            .map(|a| {
                let t = a.down.matvec_f64(x).expect("factor shapes checked at attach");
                let mut u = a.up.matvec_f64(&t).expect("factor shapes checked at attach");
                for v in u.iter_mut() {
                    *v *= a.gamma;
                }
                u
            })
            .collect()
    }

    fn base_forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.w_pre.matvec_f64(x).expect("caller validated input length");
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += *b as f64;
        }
        out
    }
}

/// Mixture forward for one plugin layer.
///
/// Zero mixture weights are skipped outright, so `omega_l = 0` reproduces the
/// base module bit for bit.
pub fn plugin_forward(layer: &PluginLinear, x: &[f64], omega_l: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.in_dim() {
        return Err(Error::InvalidInput(format!(
            "input length {} does not match module width {}",
            x.len(),
            layer.in_dim()
        )));
    }
    if omega_l.len() != layer.attached.len() {
        return Err(Error::InvalidInput(format!(
            "{} mixture weights for {} attached experts",
            omega_l.len(),
            layer.attached.len()
        )));
    }
    let mut out = layer.base_forward(x);
    for (a, &w) in layer.attached.iter().zip(omega_l) {
        if w == 0.0 {
            continue;
        }
        let t = a.down.matvec_f64(x).expect("factor shapes checked at attach");
        let u = a.up.matvec_f64(&t).expect("factor shapes checked at attach");
        for (o, v) in out.iter_mut().zip(u) {
            *o += w * a.gamma * v;
        }
    }
    Ok(out)
}

/// One per-objective value estimate head over the trunk's hidden state.
#[derive(Debug, Clone)]
pub struct ValueHead {
    pub w: Vec<f32>,
    pub b: f32,
}

/// Intermediate activations kept for gradient computation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input fed to each layer (layer 0 sees the observation).
    pub layer_inputs: Vec<Vec<f64>>,
    /// Per layer, per attached expert: the delta contribution vector.
    pub expert_contribs: Vec<Vec<Vec<f64>>>,
    /// Pre-nonlinearity outputs per layer.
    pub pre_activations: Vec<Vec<f64>>,
    /// Hidden state after the trunk nonlinearity.
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    /// Per-objective value estimates.
    pub values: Vec<f64>,
}

/// Two-layer tanh perceptron with plugin linear modules and per-objective
/// value heads.
#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    pub layers: Vec<PluginLinear>,
    pub value_heads: Vec<ValueHead>,
    obs_dim: usize,
    hidden_dim: usize,
    action_count: usize,
}

/// Module path of the first trunk layer.
pub const MODULE_FC1: &str = "fc1";
/// Module path of the output layer.
pub const MODULE_FC2: &str = "fc2";

impl PolicyNetwork {
    /// Fresh base network with seeded normal weights scaled by 1/sqrt(fan_in),
    /// zero biases, and zero-initialized value heads.
    pub fn new_base(
        obs_dim: usize,
        hidden_dim: usize,
        action_count: usize,
        n_objectives: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if obs_dim == 0 || hidden_dim == 0 || action_count == 0 || n_objectives == 0 {
            return Err(Error::InvalidInput("network dimensions must be positive".into()));
        }
        let scale1 = 1.0 / (obs_dim as f64).sqrt();
        let w1 = DenseMatrix::from_fn(hidden_dim, obs_dim, |_, _| {
            (rng.next_normal() * scale1) as f32
        });
        let scale2 = 1.0 / (hidden_dim as f64).sqrt();
        let w2 = DenseMatrix::from_fn(action_count, hidden_dim, |_, _| {
            (rng.next_normal() * scale2) as f32
        });
        let layers = vec![
            PluginLinear::new(MODULE_FC1, w1, vec![0.0; hidden_dim])?,
            PluginLinear::new(MODULE_FC2, w2, vec![0.0; action_count])?,
        ];
        let value_heads = (0..n_objectives)
            .map(|_| ValueHead { w: vec![0.0; hidden_dim], b: 0.0 })
            .collect();
        Self::from_parts(layers, value_heads)
    }

    pub fn from_parts(layers: Vec<PluginLinear>, value_heads: Vec<ValueHead>) -> Result<Self> {
        if layers.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "trunk must have exactly 2 layers, got {}",
                layers.len()
            )));
        }
        if layers[0].out_dim() != layers[1].in_dim() {
            return Err(Error::InvalidInput("layer dimension chain mismatch".into()));
        }
        let hidden_dim = layers[0].out_dim();
        if value_heads.is_empty() || value_heads.iter().any(|h| h.w.len() != hidden_dim) {
            return Err(Error::InvalidInput("value heads must match hidden width".into()));
        }
        Ok(Self {
            obs_dim: layers[0].in_dim(),
            hidden_dim,
            action_count: layers[1].out_dim(),
            layers,
            value_heads,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn n_objectives(&self) -> usize {
        self.value_heads.len()
    }

    pub fn attached_count(&self) -> usize {
        self.layers[0].attached().len()
    }

    /// Attaches an expert to every trunk module it factorizes; the expert
    /// must cover exactly the network's module set.
    pub fn attach_expert(&mut self, expert: &LoraExpert) -> Result<()> {
        for layer in &self.layers {
            if !expert.modules.contains_key(layer.module_path()) {
                return Err(Error::UnknownModule(format!(
                    "expert {} lacks module {}",
                    expert.id,
                    layer.module_path()
                )));
            }
        }
        for name in expert.modules.keys() {
            if !self.layers.iter().any(|l| l.module_path() == name) {
                return Err(Error::UnknownModule(format!(
                    "expert {} adapts unknown module {name}",
                    expert.id
                )));
            }
        }
        for layer in &mut self.layers {
            let pair = &expert.modules[layer.module_path()];
            layer.attach(expert.id.clone(), pair.down.clone(), pair.up.clone(), expert.rescale)?;
        }
        Ok(())
    }

    pub fn detach_all(&mut self) {
        for layer in &mut self.layers {
            layer.detach_all();
        }
    }

    /// Per-layer zero-length mixture vectors for an expert-free network.
    pub fn empty_omegas(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|_| Vec::new()).collect()
    }

    /// The same mixture vector replicated for every layer.
    pub fn shared_omegas(&self, omega: &[f64]) -> Vec<Vec<f64>> {
        self.layers.iter().map(|_| omega.to_vec()).collect()
    }

    fn check_forward_args(&self, state: &[f32], omegas: &[Vec<f64>]) -> Result<()> {
        if state.len() != self.obs_dim {
            return Err(Error::InvalidInput(format!(
                "state length {} does not match observation width {}",
                state.len(),
                self.obs_dim
            )));
        }
        if omegas.len() != self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "{} mixture vectors for {} layers",
                omegas.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Action logits under the given per-layer expert mixtures.
    pub fn logits(&self, state: &[f32], omegas: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_forward_args(state, omegas)?;
        let x: Vec<f64> = state.iter().map(|&v| v as f64).collect();
        let z1 = plugin_forward(&self.layers[0], &x, &omegas[0])?;
        let h1: Vec<f64> = z1.iter().map(|v| v.tanh()).collect();
        plugin_forward(&self.layers[1], &h1, &omegas[1])
    }

    /// Per-objective value estimates at this state.
    pub fn values(&self, state: &[f32], omegas: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_forward_args(state, omegas)?;
        let x: Vec<f64> = state.iter().map(|&v| v as f64).collect();
        let z1 = plugin_forward(&self.layers[0], &x, &omegas[0])?;
        let h1: Vec<f64> = z1.iter().map(|v| v.tanh()).collect();
        Ok(self.head_values(&h1))
    }

    fn head_values(&self, hidden: &[f64]) -> Vec<f64> {
        self.value_heads
            .iter()
            .map(|h| {
                let mut acc = h.b as f64;
                for (w, x) in h.w.iter().zip(hidden) {
                    acc += *w as f64 * x;
                }
                acc
            })
            .collect()
    }

    /// Full forward pass retaining activations and per-expert contributions
    /// for gradient computation. Contributions are computed even for zero
    /// mixture weights, since the trainer differentiates through them.
    pub fn forward_cached(&self, state: &[f32], omegas: &[Vec<f64>]) -> Result<ForwardCache> {
        self.check_forward_args(state, omegas)?;
        let x: Vec<f64> = state.iter().map(|&v| v as f64).collect();

        let contribs0 = self.layers[0].expert_contributions(&x);
        let mut z1 = self.layers[0].base_forward(&x);
        if omegas[0].len() != contribs0.len() {
            return Err(Error::InvalidInput("mixture length mismatch on layer 0".into()));
        }
        for (c, &w) in contribs0.iter().zip(&omegas[0]) {
            for (o, v) in z1.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        let h1: Vec<f64> = z1.iter().map(|v| v.tanh()).collect();

        let contribs1 = self.layers[1].expert_contributions(&h1);
        let mut z2 = self.layers[1].base_forward(&h1);
        if omegas[1].len() != contribs1.len() {
            return Err(Error::InvalidInput("mixture length mismatch on layer 1".into()));
        }
        for (c, &w) in contribs1.iter().zip(&omegas[1]) {
            for (o, v) in z2.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        let values = self.head_values(&h1);
        let logits = z2.clone();
        Ok(ForwardCache {
            layer_inputs: vec![x, h1.clone()],
            expert_contribs: vec![contribs0, contribs1],
            pre_activations: vec![z1, z2],
            hidden: h1,
            logits,
            values,
        })
    }

    /// Samples an action from softmax(logits); returns the action and its
    /// log-probability under the same distribution.
    pub fn act(
        &self,
        state: &[f32],
        omegas: &[Vec<f64>],
        rng: &mut RngStream,
    ) -> Result<(usize, f64)> {
        let logits = self.logits(state, omegas)?;
        let probs = softmax(&logits, 1.0)?;
        let action = sample_categorical(&probs, rng)?;
        let logp = log_softmax(&logits)[action];
        Ok((action, logp))
    }

    /// Greedy action: argmax of the logits, ties to the lowest index.
    pub fn act_greedy(&self, state: &[f32], omegas: &[Vec<f64>]) -> Result<usize> {
        let logits = self.logits(state, omegas)?;
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Base trunk weights keyed by module path (biases excluded; experts
    /// adapt weight matrices only).
    pub fn weight_map(&self) -> WeightMap {
        self.layers
            .iter()
            .map(|l| (l.module_path().to_string(), l.w_pre().clone()))
            .collect()
    }

    /// A new network whose base weights are shifted by the given deltas.
    /// Biases, value heads, and attached experts carry over unchanged.
    pub fn with_delta(&self, tau: &ObjectiveVector) -> Result<PolicyNetwork> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let Some(delta) = tau.deltas.get(layer.module_path()) else {
                return Err(Error::UnknownModule(format!(
                    "delta lacks module {}",
                    layer.module_path()
                )));
            };
            let shifted = layer.w_pre().add(delta)?;
            let mut fresh =
                PluginLinear::new(layer.module_path(), shifted, layer.bias.clone())?;
            for a in layer.attached() {
                fresh.attach(a.expert_id.clone(), a.down.clone(), a.up.clone(), a.gamma)?;
            }
            layers.push(fresh);
        }
        Self::from_parts(layers, self.value_heads.clone())
    }

    /// A new network with one attached expert folded densely into the base
    /// weights, for equivalence checks and parameter-space baselines.
    pub fn with_expert_folded(&self, expert: &LoraExpert) -> Result<PolicyNetwork> {
        self.with_delta(&to_dense(expert)?)
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Rollout storage for one training batch. All per-objective arrays are
/// step-major: `rewards[t][i]` is objective i's reward at step t.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryBatch {
    pub states: Vec<Vec<f32>>,
    pub actions: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub rewards: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    /// Start index of each episode, ascending, first entry 0.
    pub episode_starts: Vec<usize>,
    pub discount: f64,
}

impl TrajectoryBatch {
    pub fn n_steps(&self) -> usize {
        self.actions.len()
    }

    pub fn n_objectives(&self) -> usize {
        self.rewards.first().map_or(0, Vec::len)
    }

    /// Half-open step ranges per episode.
    pub fn episode_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.episode_starts.len());
        for (k, &start) in self.episode_starts.iter().enumerate() {
            let end = self
                .episode_starts
                .get(k + 1)
                .copied()
                .unwrap_or(self.n_steps());
            out.push((start, end));
        }
        out
    }

    /// Undiscounted per-objective return of each episode.
    pub fn episode_returns(&self) -> Vec<Vec<f64>> {
        let n = self.n_objectives();
        self.episode_ranges()
            .iter()
            .map(|&(s, e)| {
                let mut acc = vec![0.0; n];
                for t in s..e {
                    for i in 0..n {
                        acc[i] += self.rewards[t][i];
                    }
                }
                acc
            })
            .collect()
    }

    /// Mean per-objective return across episodes.
    pub fn mean_returns(&self) -> Vec<f64> {
        let per_ep = self.episode_returns();
        let n = self.n_objectives();
        let mut acc = vec![0.0; n];
        for ep in &per_ep {
            for i in 0..n {
                acc[i] += ep[i];
            }
        }
        let count = per_ep.len().max(1) as f64;
        acc.iter_mut().for_each(|v| *v /= count);
        acc
    }
}

/// Unnormalized generalized advantage estimates, one column per objective.
/// Episodes terminate with a zero bootstrap value.
pub fn gae_raw(batch: &TrajectoryBatch, gae_lambda: f64, gamma: f64) -> Vec<Vec<f64>> {
    let t_total = batch.n_steps();
    let n = batch.n_objectives();
    let mut adv = vec![vec![0.0f64; n]; t_total];
    for &(start, end) in &batch.episode_ranges() {
        for i in 0..n {
            let mut running = 0.0f64;
            for t in (start..end).rev() {
                let next_value = if t + 1 < end { batch.values[t + 1][i] } else { 0.0 };
                let delta = batch.rewards[t][i] + gamma * next_value - batch.values[t][i];
                running = delta + gamma * gae_lambda * running;
                adv[t][i] = running;
            }
        }
    }
    adv
}

/// Fills `advantages` with per-objective GAE, each objective normalized to
/// zero mean and unit variance over the whole batch. A near-constant
/// objective column is zeroed instead: normalizing it would blow residual
/// noise up to unit scale and destabilize an already-converged policy.
pub fn gae_per_objective(
    mut batch: TrajectoryBatch,
    gae_lambda: f64,
    gamma: f64,
) -> TrajectoryBatch {
    let mut adv = gae_raw(&batch, gae_lambda, gamma);
    let t_total = batch.n_steps();
    let n = batch.n_objectives();
    for i in 0..n {
        let mean = adv.iter().map(|row| row[i]).sum::<f64>() / t_total.max(1) as f64;
        let var =
            adv.iter().map(|row| (row[i] - mean).powi(2)).sum::<f64>() / t_total.max(1) as f64;
        let std = var.sqrt();
        if std < 1e-6 {
            for row in adv.iter_mut() {
                row[i] = 0.0;
            }
            continue;
        }
        for row in adv.iter_mut() {
            row[i] = (row[i] - mean) / std;
        }
    }
    batch.advantages = adv;
    batch.discount = gamma;
    batch
}
