//! Hierarchical expert assembly and preference-conditioned inference.
//!
//! A model holds a base policy, a registry of low-rank experts, and a
//! registry of router experts (one-layer affine scorers). Serving a user
//! preference proceeds in three stages: geometric selection of the nearest
//! registry entries, convex mass assignment over the selection, and
//! per-module score-based mixing of the low-rank experts at every plugin
//! layer.

use std::collections::BTreeMap;

use crate::adapters::LoraExpert;
use crate::error::{Error, Result};
use crate::numkernel::{sample_categorical, softmax, DenseMatrix, RngStream};
use crate::policy::{log_softmax, plugin_forward, PolicyNetwork};
use crate::simplex::{assign, PreferenceVector, RoutingAssignment};

/// One affine scorer for a single module: `weight * x + bias` produces one
/// score per assigned low-rank expert.
#[derive(Debug, Clone)]
pub struct RouterLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f32>,
}

/// A trainable router: per-module scorers over a fixed set of assigned
/// low-rank experts, registered at its own preference point.
#[derive(Debug, Clone)]
pub struct RouterExpert {
    pub id: String,
    pub preference: PreferenceVector,
    /// Ids of the low-rank experts this router mixes, in score order.
    pub assigned: Vec<String>,
    pub modules: BTreeMap<String, RouterLayer>,
}

impl RouterExpert {
    /// Zero-initialized router (uniform mixing until trained).
    pub fn zeros(
        id: impl Into<String>,
        preference: PreferenceVector,
        assigned: Vec<String>,
        module_dims: &[(String, usize)],
    ) -> Result<Self> {
        if assigned.is_empty() {
            return Err(Error::InvalidInput("router needs at least one assigned expert".into()));
        }
        let n = assigned.len();
        let mut modules = BTreeMap::new();
        for (path, d_in) in module_dims {
            modules.insert(
                path.clone(),
                RouterLayer { weight: DenseMatrix::zeros(n, *d_in), bias: vec![0.0; n] },
            );
        }
        Ok(Self { id: id.into(), preference, assigned, modules })
    }
}

/// Raw router scores for one module input.
pub fn router_scores(r: &RouterExpert, module_path: &str, x: &[f64]) -> Result<Vec<f64>> {
    let Some(layer) = r.modules.get(module_path) else {
        return Err(Error::UnknownModule(format!(
            "router {} has no scorer for module {module_path}",
            r.id
        )));
    };
    let mut out = layer.weight.matvec_f64(x)?;
    for (o, b) in out.iter_mut().zip(&layer.bias) {
        *o += *b as f64;
    }
    Ok(out)
}

/// Either kind of registry entry, for open-ended model extension.
#[derive(Debug, Clone)]
pub enum RegistryExpert {
    Lora(LoraExpert),
    Router(RouterExpert),
}

/// An assembled hierarchy: base policy, low-rank expert registry, router
/// registry, and the aligned preference list over all entries (low-rank
/// experts first, routers after). Immutable once assembled.
#[derive(Debug, Clone)]
pub struct HoeModel {
    base: PolicyNetwork,
    plugged: PolicyNetwork,
    lora_registry: Vec<LoraExpert>,
    router_registry: Vec<RouterExpert>,
    preferences: Vec<PreferenceVector>,
    lora_index: BTreeMap<String, usize>,
}

impl HoeModel {
    pub fn base(&self) -> &PolicyNetwork {
        &self.base
    }

    /// The base network with every registry expert attached, in registry
    /// order; mixture vectors from [`HoeModel::mix_weights`] align with it.
    pub fn plugged(&self) -> &PolicyNetwork {
        &self.plugged
    }

    pub fn lora_registry(&self) -> &[LoraExpert] {
        &self.lora_registry
    }

    pub fn router_registry(&self) -> &[RouterExpert] {
        &self.router_registry
    }

    /// Aligned preferences over all registry entries.
    pub fn preferences(&self) -> &[PreferenceVector] {
        &self.preferences
    }

    pub fn n_objectives(&self) -> usize {
        self.preferences[0].dim()
    }

    pub fn lora_len(&self) -> usize {
        self.lora_registry.len()
    }

    /// Geometric stage: nearest entries over the registry preferences plus
    /// convex mass assignment, with k equal to the objective count.
    pub fn route(&self, user: &PreferenceVector) -> Result<RoutingAssignment> {
        if user.dim() != self.n_objectives() {
            return Err(Error::IncompatibleModels(format!(
                "user preference has {} objectives, model has {}",
                user.dim(),
                self.n_objectives()
            )));
        }
        let k = self.n_objectives().min(self.preferences.len());
        assign(user, &self.preferences, k)
    }

    /// Mixture over the low-rank registry for one module, given the module's
    /// own input. Router entries contribute softmaxed scores over their
    /// assigned experts; plain expert entries pass their mass straight
    /// through.
    pub fn mix_weights(
        &self,
        assignment: &RoutingAssignment,
        module_path: &str,
        x: &[f64],
    ) -> Result<Vec<f64>> {
        let mut omega_l = vec![0.0f64; self.lora_registry.len()];
        for &entry in &assignment.selected {
            let mass = assignment.omega_r[entry];
            if mass == 0.0 {
                continue;
            }
            if entry < self.lora_registry.len() {
                omega_l[entry] += mass;
                continue;
            }
            let router = &self.router_registry[entry - self.lora_registry.len()];
            let scores = router_scores(router, module_path, x)?;
            let probs = softmax(&scores, 1.0)?;
            for (id, p) in router.assigned.iter().zip(probs) {
                let idx = self.lora_index[id];
                omega_l[idx] += mass * p;
            }
        }
        Ok(omega_l)
    }

    /// Logits for a routed forward pass; the mixture is recomputed at every
    /// plugin layer from that layer's own input.
    pub fn logits_routed(
        &self,
        assignment: &RoutingAssignment,
        state: &[f32],
    ) -> Result<Vec<f64>> {
        let x: Vec<f64> = state.iter().map(|&v| v as f64).collect();
        let layer0 = &self.plugged.layers[0];
        let omega0 = self.mix_weights(assignment, layer0.module_path(), &x)?;
        let z1 = plugin_forward(layer0, &x, &omega0)?;
        let h1: Vec<f64> = z1.iter().map(|v| v.tanh()).collect();
        let layer1 = &self.plugged.layers[1];
        let omega1 = self.mix_weights(assignment, layer1.module_path(), &h1)?;
        plugin_forward(layer1, &h1, &omega1)
    }

    /// Routes the preference and samples one action.
    pub fn infer(
        &self,
        user: &PreferenceVector,
        state: &[f32],
        rng: &mut RngStream,
    ) -> Result<(usize, f64)> {
        let assignment = self.route(user)?;
        self.infer_with(&assignment, state, rng)
    }

    /// Samples one action under a precomputed routing assignment.
    pub fn infer_with(
        &self,
        assignment: &RoutingAssignment,
        state: &[f32],
        rng: &mut RngStream,
    ) -> Result<(usize, f64)> {
        let logits = self.logits_routed(assignment, state)?;
        let probs = softmax(&logits, 1.0)?;
        let action = sample_categorical(&probs, rng)?;
        Ok((action, log_softmax(&logits)[action]))
    }

    /// Greedy routed action, ties to the lowest index.
    pub fn infer_greedy(&self, assignment: &RoutingAssignment, state: &[f32]) -> Result<usize> {
        let logits = self.logits_routed(assignment, state)?;
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// A new model with one more registry entry. A higher-dimensional
    /// preference on the newcomer zero-pads every existing registry
    /// preference; a lower-dimensional newcomer is itself padded.
    pub fn add_expert(&self, expert: RegistryExpert) -> Result<HoeModel> {
        let new_dim = match &expert {
            RegistryExpert::Lora(e) => e.preference.dim(),
            RegistryExpert::Router(e) => e.preference.dim(),
        };
        let target = new_dim.max(self.n_objectives());
        let mut lora = self.lora_registry.clone();
        let mut routers = self.router_registry.clone();
        for e in lora.iter_mut() {
            e.preference = e.preference.zero_pad(target)?;
        }
        for r in routers.iter_mut() {
            r.preference = r.preference.zero_pad(target)?;
        }
        match expert {
            RegistryExpert::Lora(mut e) => {
                e.preference = e.preference.zero_pad(target)?;
                lora.push(e);
            }
            RegistryExpert::Router(mut r) => {
                r.preference = r.preference.zero_pad(target)?;
                routers.push(r);
            }
        }
        assemble(self.base.clone(), lora, routers)
    }
}

/// Builds the hierarchy, validating shapes, preference dimensions, and id
/// uniqueness across both registries.
pub fn assemble(
    base: PolicyNetwork,
    lora_experts: Vec<LoraExpert>,
    router_experts: Vec<RouterExpert>,
) -> Result<HoeModel> {
    if lora_experts.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    let n = lora_experts[0].preference.dim();
    let mut lora_index = BTreeMap::new();
    for (i, e) in lora_experts.iter().enumerate() {
        if e.preference.dim() != n {
            return Err(Error::IncompatibleModels(format!(
                "expert {} has {}-objective preference, expected {n}",
                e.id,
                e.preference.dim()
            )));
        }
        if lora_index.insert(e.id.clone(), i).is_some() {
            return Err(Error::DuplicateExpert(e.id.clone()));
        }
    }
    let mut plugged = base.clone();
    for e in &lora_experts {
        // attach_expert validates module coverage and factor shapes
        plugged.attach_expert(e)?;
    }
    for r in &router_experts {
        if lora_index.contains_key(&r.id) {
            return Err(Error::DuplicateExpert(r.id.clone()));
        }
        if r.preference.dim() != n {
            return Err(Error::IncompatibleModels(format!(
                "router {} has {}-objective preference, expected {n}",
                r.id,
                r.preference.dim()
            )));
        }
        if r.assigned.is_empty() {
            return Err(Error::InvalidInput(format!("router {} assigns no experts", r.id)));
        }
        for id in &r.assigned {
            if !lora_index.contains_key(id) {
                return Err(Error::UnknownModule(format!(
                    "router {} assigns unknown expert {id}",
                    r.id
                )));
            }
        }
        for layer in &base.layers {
            let Some(scorer) = r.modules.get(layer.module_path()) else {
                return Err(Error::IncompatibleModels(format!(
                    "router {} lacks a scorer for module {}",
                    r.id,
                    layer.module_path()
                )));
            };
            if scorer.weight.cols() != layer.in_dim()
                || scorer.weight.rows() != r.assigned.len()
                || scorer.bias.len() != r.assigned.len()
            {
                return Err(Error::IncompatibleModels(format!(
                    "router {} scorer for {} has shape {:?}, expected {}x{}",
                    r.id,
                    layer.module_path(),
                    scorer.weight.shape(),
                    r.assigned.len(),
                    layer.in_dim()
                )));
            }
        }
        if r.modules.len() != base.layers.len() {
            return Err(Error::UnknownModule(format!(
                "router {} scores modules outside the base network",
                r.id
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &router_experts {
        if !seen.insert(r.id.clone()) {
            return Err(Error::DuplicateExpert(r.id.clone()));
        }
    }
    let mut preferences: Vec<PreferenceVector> =
        lora_experts.iter().map(|e| e.preference.clone()).collect();
    preferences.extend(router_experts.iter().map(|r| r.preference.clone()));
    Ok(HoeModel {
        base,
        plugged,
        lora_registry: lora_experts,
        router_registry: router_experts,
        preferences,
        lora_index,
    })
}
