//! Hand-rolled gradients for the two proximal policy update paths.
//!
//! Two disjoint trainable sets share one flat-vector convention so the same
//! Adam state can drive either:
//!
//! * dense path: both trunk weight matrices plus the value heads (trunk
//!   biases stay frozen so a trained dense network folds losslessly into a
//!   task delta),
//! * router path: the per-module scorer weights and biases plus fresh value
//!   heads, with the trunk and every attached expert frozen.
//!
//! Parameters live in f32 inside the network structures; optimization keeps
//! an f64 master copy and writes back after each step. Losses and gradients
//! are computed in f64 throughout.

use crate::error::{Error, Result};
use crate::numkernel::{sample_categorical, softmax, DenseMatrix};
use crate::numkernel::RngStream;
use crate::policy::{log_softmax, plugin_forward, ForwardCache, PolicyNetwork, TrajectoryBatch};
use crate::router::{router_scores, RouterExpert};

/// Weight on the mean squared value error inside the total loss.
pub const VALUE_LOSS_COEF: f64 = 0.5;

/// Clipping and entropy settings for one update phase.
#[derive(Debug, Clone, Copy)]
pub struct PpoHyper {
    pub clip_ratio: f64,
    pub entropy_coef: f64,
}

/// Loss decomposition for one full-batch evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    /// Sum actually differentiated: policy + entropy penalty + value.
    pub total: f64,
    /// Negated clipped surrogate, averaged over steps.
    pub policy: f64,
    /// Weighted mean squared value error.
    pub value: f64,
    /// Mean policy entropy (reported positively; enters `total` scaled by
    /// `-entropy_coef`).
    pub entropy: f64,
}

/// Adam with bias correction over a flat f64 parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `m^T * g` for a row-major f32 matrix and an f64 vector of length
/// `m.rows()`.
fn matvec_t(m: &DenseMatrix, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; m.cols()];
    for r in 0..m.rows() {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(m.row(r)) {
            *o += *w as f64 * gr;
        }
    }
    out
}

/// Pullback through `p = softmax(s)`: given dL/dp, returns dL/ds.
fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let mix = dot(p, g);
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - mix)).collect()
}

/// Per-step gradient of the clipped surrogate plus entropy bonus with
/// respect to the logits. Returns (dL/dlogits, policy loss contribution,
/// step entropy). The clipped branch carries no gradient, so steps pushed
/// outside the trust region fall silent instead of overshooting.
fn step_policy_grad(
    logits: &[f64],
    action: usize,
    old_logp: f64,
    adv: f64,
    hyper: &PpoHyper,
    inv_steps: f64,
) -> (Vec<f64>, f64, f64) {
    let logp = log_softmax(logits);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let ratio = (logp[action] - old_logp).exp();
    let clipped = ratio.clamp(1.0 - hyper.clip_ratio, 1.0 + hyper.clip_ratio);
    let surr = ratio * adv;
    let surr_clipped = clipped * adv;
    let objective = surr.min(surr_clipped);
    let coef = if surr <= surr_clipped { adv } else { 0.0 };
    let entropy = -dot(&probs, &logp);
    let mut g = vec![0.0f64; logits.len()];
    for k in 0..logits.len() {
        let indicator = if k == action { 1.0 } else { 0.0 };
        let d_policy = -inv_steps * coef * ratio * (indicator - probs[k]);
        let d_entropy = inv_steps * hyper.entropy_coef * probs[k] * (logp[k] + entropy);
        g[k] = d_policy + d_entropy;
    }
    (g, -inv_steps * objective, entropy)
}

/// dL/dvalues for one step plus that step's value loss contribution.
fn step_value_grad(
    values: &[f64],
    targets: &[f64],
    inv_steps: f64,
) -> (Vec<f64>, f64) {
    let n = values.len() as f64;
    let mut dv = vec![0.0f64; values.len()];
    let mut loss = 0.0;
    for i in 0..values.len() {
        let diff = values[i] - targets[i];
        dv[i] = VALUE_LOSS_COEF * inv_steps * diff / n;
        loss += VALUE_LOSS_COEF * inv_steps * 0.5 * diff * diff / n;
    }
    (dv, loss)
}

fn check_batch_shapes(
    net: &PolicyNetwork,
    batch: &TrajectoryBatch,
    adv: &[f64],
    value_targets: &[Vec<f64>],
) -> Result<()> {
    let n = batch.n_steps();
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if adv.len() != n || value_targets.len() != n || batch.logprobs.len() != n {
        return Err(Error::InvalidInput(format!(
            "batch of {n} steps got {} advantages, {} value targets, {} old logprobs",
            adv.len(),
            value_targets.len(),
            batch.logprobs.len()
        )));
    }
    let heads = net.value_heads.len();
    if value_targets.iter().any(|t| t.len() != heads) {
        return Err(Error::InvalidInput(format!(
            "value targets must have {heads} objectives"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dense path
// ---------------------------------------------------------------------------

/// Flat parameter count of the dense trainable set.
pub fn dense_param_count(net: &PolicyNetwork) -> usize {
    let w: usize = net.layers.iter().map(|l| l.in_dim() * l.out_dim()).sum();
    w + net.value_heads.len() * (net.hidden_dim() + 1)
}

/// Reads the dense trainable set into a flat vector: trunk weights in layer
/// order (row-major), then per head the weights and bias.
pub fn dense_read(net: &PolicyNetwork) -> Vec<f64> {
    let mut out = Vec::with_capacity(dense_param_count(net));
    for layer in &net.layers {
        out.extend(layer.w_pre().data().iter().map(|&v| v as f64));
    }
    for head in &net.value_heads {
        out.extend(head.w.iter().map(|&v| v as f64));
        out.push(head.b as f64);
    }
    out
}

/// Writes a flat vector back into the dense trainable set (f32 storage).
pub fn dense_write(net: &mut PolicyNetwork, params: &[f64]) -> Result<()> {
    if params.len() != dense_param_count(net) {
        return Err(Error::InvalidInput(format!(
            "expected {} dense parameters, got {}",
            dense_param_count(net),
            params.len()
        )));
    }
    let mut cursor = 0;
    for layer in net.layers.iter_mut() {
        let data = layer.w_pre_mut().data_mut();
        for v in data.iter_mut() {
            *v = params[cursor] as f32;
            cursor += 1;
        }
    }
    for head in net.value_heads.iter_mut() {
        for w in head.w.iter_mut() {
            *w = params[cursor] as f32;
            cursor += 1;
        }
        head.b = params[cursor] as f32;
        cursor += 1;
    }
    Ok(())
}

/// Full-batch loss and gradient over the dense trainable set. The network
/// must carry no attached experts; `adv` is the already-mixed scalar
/// advantage per step.
pub fn dense_loss_grad(
    net: &PolicyNetwork,
    batch: &TrajectoryBatch,
    adv: &[f64],
    value_targets: &[Vec<f64>],
    hyper: &PpoHyper,
) -> Result<(LossReport, Vec<f64>)> {
    if net.attached_count() != 0 {
        return Err(Error::InvalidInput(
            "dense training expects a bare trunk without attached experts".into(),
        ));
    }
    check_batch_shapes(net, batch, adv, value_targets)?;
    let n_steps = batch.n_steps();
    let inv = 1.0 / n_steps as f64;
    let omegas = net.empty_omegas();

    let d = net.obs_dim();
    let h = net.hidden_dim();
    let a = net.action_count();
    let off_w2 = h * d;
    let off_heads = off_w2 + a * h;

    let mut grad = vec![0.0f64; dense_param_count(net)];
    let mut policy_loss = 0.0;
    let mut value_loss = 0.0;
    let mut entropy_sum = 0.0;

    for t in 0..n_steps {
        let cache = net.forward_cached(&batch.states[t], &omegas)?;
        let (g2, pol, ent) = step_policy_grad(
            &cache.logits,
            batch.actions[t],
            batch.logprobs[t],
            adv[t],
            hyper,
            inv,
        );
        policy_loss += pol;
        entropy_sum += ent;
        let (dv, vloss) = step_value_grad(&cache.values, &value_targets[t], inv);
        value_loss += vloss;

        let x = &cache.layer_inputs[0];
        let hid = &cache.hidden;

        // Output layer weights: g2 outer h.
        for (q, gq) in g2.iter().enumerate() {
            if *gq == 0.0 {
                continue;
            }
            let base = off_w2 + q * h;
            for (j, hj) in hid.iter().enumerate() {
                grad[base + j] += gq * hj;
            }
        }
        // Pull back into the hidden state: trunk output plus value heads.
        let mut gh = matvec_t(net.layers[1].w_pre(), &g2);
        for (i, head) in net.value_heads.iter().enumerate() {
            let dvi = dv[i];
            let base = off_heads + i * (h + 1);
            for (j, hj) in hid.iter().enumerate() {
                grad[base + j] += dvi * hj;
                gh[j] += dvi * head.w[j] as f64;
            }
            grad[base + h] += dvi;
        }
        // Through tanh, then the first layer weights: gz1 outer x.
        for (j, ghj) in gh.iter().enumerate() {
            let gz = ghj * (1.0 - hid[j] * hid[j]);
            if gz == 0.0 {
                continue;
            }
            let base = j * d;
            for (k, xk) in x.iter().enumerate() {
                grad[base + k] += gz * xk;
            }
        }
    }

    let entropy = entropy_sum * inv;
    let total = policy_loss - hyper.entropy_coef * entropy + value_loss;
    Ok((LossReport { total, policy: policy_loss, value: value_loss, entropy }, grad))
}

// ---------------------------------------------------------------------------
// Router path
// ---------------------------------------------------------------------------

/// Forward activations for one routed step: the mixture weights are
/// recomputed per module from that module's own input.
#[derive(Debug, Clone)]
pub struct RoutedCache {
    pub cache: ForwardCache,
    /// Per-layer softmax mixture over the attached experts.
    pub omegas: Vec<Vec<f64>>,
}

fn check_router_compat(net: &PolicyNetwork, router: &RouterExpert) -> Result<()> {
    let j = router.assigned.len();
    for layer in &net.layers {
        let Some(scorer) = router.modules.get(layer.module_path()) else {
            return Err(Error::UnknownModule(format!(
                "router {} lacks a scorer for module {}",
                router.id,
                layer.module_path()
            )));
        };
        if scorer.weight.rows() != j || scorer.weight.cols() != layer.in_dim() {
            return Err(Error::InvalidInput(format!(
                "scorer for {} is {:?}, expected {}x{}",
                layer.module_path(),
                scorer.weight.shape(),
                j,
                layer.in_dim()
            )));
        }
        if layer.attached().len() != j {
            return Err(Error::InvalidInput(format!(
                "module {} has {} attached experts but the router scores {}",
                layer.module_path(),
                layer.attached().len(),
                j
            )));
        }
    }
    Ok(())
}

/// Routed forward pass retaining per-layer scores, mixtures, and expert
/// contributions.
pub fn routed_forward(
    net: &PolicyNetwork,
    router: &RouterExpert,
    state: &[f32],
) -> Result<RoutedCache> {
    check_router_compat(net, router)?;
    let x: Vec<f64> = state.iter().map(|&v| v as f64).collect();
    let s1 = router_scores(router, net.layers[0].module_path(), &x)?;
    let omega1 = softmax(&s1, 1.0)?;
    let z1 = plugin_forward(&net.layers[0], &x, &omega1)?;
    let h: Vec<f64> = z1.iter().map(|v| v.tanh()).collect();
    let s2 = router_scores(router, net.layers[1].module_path(), &h)?;
    let omega2 = softmax(&s2, 1.0)?;
    let omegas = vec![omega1, omega2];
    let cache = net.forward_cached(state, &omegas)?;
    Ok(RoutedCache { cache, omegas })
}

/// Samples an action under the routed policy; returns (action, logprob,
/// per-objective values).
pub fn routed_act(
    net: &PolicyNetwork,
    router: &RouterExpert,
    state: &[f32],
    rng: &mut RngStream,
) -> Result<(usize, f64, Vec<f64>)> {
    let rc = routed_forward(net, router, state)?;
    let probs = softmax(&rc.cache.logits, 1.0)?;
    let action = sample_categorical(&probs, rng)?;
    let logp = log_softmax(&rc.cache.logits)[action];
    Ok((action, logp, rc.cache.values))
}

/// Greedy action under the routed policy, ties to the lowest index.
pub fn routed_greedy(net: &PolicyNetwork, router: &RouterExpert, state: &[f32]) -> Result<usize> {
    let rc = routed_forward(net, router, state)?;
    let mut best = 0;
    for (i, &l) in rc.cache.logits.iter().enumerate() {
        if l > rc.cache.logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Flat parameter count of the router trainable set.
pub fn router_param_count(router: &RouterExpert, net: &PolicyNetwork) -> usize {
    let scorers: usize = router
        .modules
        .values()
        .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
        .sum();
    scorers + net.value_heads.len() * (net.hidden_dim() + 1)
}

/// Reads the router trainable set: per module in path order the scorer
/// weight (row-major) then bias, then the value heads.
pub fn router_read(router: &RouterExpert, net: &PolicyNetwork) -> Vec<f64> {
    let mut out = Vec::with_capacity(router_param_count(router, net));
    for layer in router.modules.values() {
        out.extend(layer.weight.data().iter().map(|&v| v as f64));
        out.extend(layer.bias.iter().map(|&v| v as f64));
    }
    for head in &net.value_heads {
        out.extend(head.w.iter().map(|&v| v as f64));
        out.push(head.b as f64);
    }
    out
}

/// Writes a flat vector back into the router scorers and the network's value
/// heads.
pub fn router_write(
    router: &mut RouterExpert,
    net: &mut PolicyNetwork,
    params: &[f64],
) -> Result<()> {
    if params.len() != router_param_count(router, net) {
        return Err(Error::InvalidInput(format!(
            "expected {} router parameters, got {}",
            router_param_count(router, net),
            params.len()
        )));
    }
    let mut cursor = 0;
    for layer in router.modules.values_mut() {
        for v in layer.weight.data_mut().iter_mut() {
            *v = params[cursor] as f32;
            cursor += 1;
        }
        for b in layer.bias.iter_mut() {
            *b = params[cursor] as f32;
            cursor += 1;
        }
    }
    for head in net.value_heads.iter_mut() {
        for w in head.w.iter_mut() {
            *w = params[cursor] as f32;
            cursor += 1;
        }
        head.b = params[cursor] as f32;
        cursor += 1;
    }
    Ok(())
}

/// Full-batch loss and gradient over the router trainable set. The trunk and
/// all attached experts are treated as constants; gradient flows through the
/// mixture softmax of both modules, including the second scorer's dependence
/// on the hidden state.
pub fn router_loss_grad(
    net: &PolicyNetwork,
    router: &RouterExpert,
    batch: &TrajectoryBatch,
    adv: &[f64],
    value_targets: &[Vec<f64>],
    hyper: &PpoHyper,
) -> Result<(LossReport, Vec<f64>)> {
    check_router_compat(net, router)?;
    check_batch_shapes(net, batch, adv, value_targets)?;
    let n_steps = batch.n_steps();
    let inv = 1.0 / n_steps as f64;
    let h = net.hidden_dim();
    let j_count = router.assigned.len();

    // Flat offsets per scorer module, in map order (matches router_read).
    let mut scorer_offsets: Vec<(String, usize, usize)> = Vec::new();
    let mut cursor = 0;
    for (path, layer) in &router.modules {
        scorer_offsets.push((path.clone(), cursor, layer.weight.cols()));
        cursor += layer.weight.rows() * layer.weight.cols() + layer.bias.len();
    }
    let off_heads = cursor;
    let offset_of = |path: &str| -> (usize, usize) {
        scorer_offsets
            .iter()
            .find(|(p, _, _)| p == path)
            .map(|(_, off, cols)| (*off, *cols))
            .expect("compat check covered every module")
    };

    let mut grad = vec![0.0f64; router_param_count(router, net)];
    let mut policy_loss = 0.0;
    let mut value_loss = 0.0;
    let mut entropy_sum = 0.0;

    for t in 0..n_steps {
        let rc = routed_forward(net, router, &batch.states[t])?;
        let cache = &rc.cache;
        let (g2, pol, ent) = step_policy_grad(
            &cache.logits,
            batch.actions[t],
            batch.logprobs[t],
            adv[t],
            hyper,
            inv,
        );
        policy_loss += pol;
        entropy_sum += ent;
        let (dv, vloss) = step_value_grad(&cache.values, &value_targets[t], inv);
        value_loss += vloss;

        let x = &cache.layer_inputs[0];
        let hid = &cache.hidden;

        // Output-module scorer: dL/domega2 through the expert contributions,
        // pulled back through the mixture softmax.
        let domega2: Vec<f64> =
            cache.expert_contribs[1].iter().map(|c| dot(&g2, c)).collect();
        let ds2 = softmax_backward(&rc.omegas[1], &domega2);
        let (off2, _) = offset_of(net.layers[1].module_path());
        for (jj, ds) in ds2.iter().enumerate() {
            let base = off2 + jj * h;
            for (k, hk) in hid.iter().enumerate() {
                grad[base + k] += ds * hk;
            }
            grad[off2 + j_count * h + jj] += ds;
        }

        // Hidden-state gradient: frozen trunk output weights, frozen expert
        // factors scaled by their mixture weights, the second scorer's input,
        // and the value heads.
        let mut gh = matvec_t(net.layers[1].w_pre(), &g2);
        for (jj, att) in net.layers[1].attached().iter().enumerate() {
            let w = rc.omegas[1][jj] * att.gamma;
            if w == 0.0 {
                continue;
            }
            let up_pull = matvec_t(&att.up, &g2);
            let down_pull = matvec_t(&att.down, &up_pull);
            for (k, v) in down_pull.iter().enumerate() {
                gh[k] += w * v;
            }
        }
        let scorer2 = &router.modules[net.layers[1].module_path()];
        let scorer_pull = matvec_t(&scorer2.weight, &ds2);
        for (k, v) in scorer_pull.iter().enumerate() {
            gh[k] += v;
        }
        for (i, head) in net.value_heads.iter().enumerate() {
            let dvi = dv[i];
            let base = off_heads + i * (h + 1);
            for (k, hk) in hid.iter().enumerate() {
                grad[base + k] += dvi * hk;
                gh[k] += dvi * head.w[k] as f64;
            }
            grad[base + h] += dvi;
        }

        // Through tanh into the first module's mixture, then its scorer.
        let gz1: Vec<f64> = gh
            .iter()
            .zip(hid)
            .map(|(g, hk)| g * (1.0 - hk * hk))
            .collect();
        let domega1: Vec<f64> =
            cache.expert_contribs[0].iter().map(|c| dot(&gz1, c)).collect();
        let ds1 = softmax_backward(&rc.omegas[0], &domega1);
        let (off1, cols1) = offset_of(net.layers[0].module_path());
        for (jj, ds) in ds1.iter().enumerate() {
            let base = off1 + jj * cols1;
            for (k, xk) in x.iter().enumerate() {
                grad[base + k] += ds * xk;
            }
            grad[off1 + j_count * cols1 + jj] += ds;
        }
    }

    let entropy = entropy_sum * inv;
    let total = policy_loss - hyper.entropy_coef * entropy + value_loss;
    Ok((LossReport { total, policy: policy_loss, value: value_loss, entropy }, grad))
}
