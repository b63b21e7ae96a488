//! Synthetic token-emission environments with conflicting per-token rewards
//! and exact brute-force oracles.
//!
//! Episodes emit `horizon` tokens; each token pays a fixed reward vector, so
//! the expected return of any policy depends only on its average per-step
//! token distribution. That additivity is what makes the oracles exact: the
//! best achievable scalarized value is a search over stationary
//! distributions.

use crate::error::{Error, Result};
use crate::numkernel::RngStream;
use crate::simplex::PreferenceVector;
use crate::trainer::scalarize::{linear_scalarize, tch_value, Scalarizer};

/// Shape of the attainable reward set around the compromise token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontierShape {
    /// The compromise token dominates the vertex hull (outside it), so both
    /// linear and worst-case scalarization can prefer it.
    Convex,
    /// The compromise token sits strictly inside the vertex hull, so
    /// worst-case-optimal behavior is a stochastic vertex mixture that no
    /// deterministic linear optimum reproduces.
    Nonconvex,
}

/// Construction parameters for [`make_env`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EnvSpec {
    pub vocab_size: usize,
    pub n_objectives: usize,
    pub horizon: usize,
    pub frontier_shape: FrontierShape,
    pub seed: u64,
}

impl Default for EnvSpec {
    /// The canonical two-objective environment: three tokens, two conflicting
    /// vertex rewards plus a compromise, ten steps.
    fn default() -> Self {
        Self {
            vocab_size: 3,
            n_objectives: 2,
            horizon: 10,
            frontier_shape: FrontierShape::Convex,
            seed: 0,
        }
    }
}

/// Deterministic multi-objective token environment.
#[derive(Debug, Clone)]
pub struct TokenTradeEnv {
    vocab_size: usize,
    n_objectives: usize,
    horizon: usize,
    reward_table: Vec<Vec<f64>>,
}

impl TokenTradeEnv {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn n_objectives(&self) -> usize {
        self.n_objectives
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Observation width: one-hot of the last token plus a start symbol.
    pub fn obs_dim(&self) -> usize {
        self.vocab_size + 1
    }

    /// Observation at episode start (one-hot on the start symbol).
    pub fn initial_obs(&self) -> Vec<f32> {
        let mut obs = vec![0.0; self.obs_dim()];
        obs[self.vocab_size] = 1.0;
        obs
    }

    /// Observation after emitting `action`.
    pub fn obs_after(&self, action: usize) -> Vec<f32> {
        let mut obs = vec![0.0; self.obs_dim()];
        obs[action] = 1.0;
        obs
    }

    /// Per-objective reward paid for emitting `action`.
    pub fn reward(&self, action: usize) -> &[f64] {
        &self.reward_table[action]
    }

    pub fn reward_table(&self) -> &[Vec<f64>] {
        &self.reward_table
    }

    /// Token with the best linear value under `lambda`, ties to the lowest
    /// index.
    pub fn linear_argmax_token(&self, lambda: &PreferenceVector) -> Result<usize> {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (v, row) in self.reward_table.iter().enumerate() {
            let val = linear_scalarize(row, lambda)?;
            if val > best_v {
                best_v = val;
                best = v;
            }
        }
        Ok(best)
    }
}

/// Builds a reward table where each objective has a dedicated vertex token
/// and one compromise token trades between all objectives; extra vocabulary
/// is filled with dominated noise rows.
pub fn make_env(spec: &EnvSpec) -> Result<TokenTradeEnv> {
    let (v, n, t) = (spec.vocab_size, spec.n_objectives, spec.horizon);
    if n == 0 || t == 0 {
        return Err(Error::InvalidInput("need at least one objective and one step".into()));
    }
    if v < n + 1 {
        return Err(Error::InvalidInput(format!(
            "vocabulary of {v} cannot host {n} vertex tokens plus a compromise"
        )));
    }
    let mut table = vec![vec![0.0f64; n]; v];
    // Vertex tokens: token i maximizes objective i alone. The nonconvex
    // variant pays later vertices less so the centroid's linear optimum is
    // unique.
    for i in 0..n {
        table[i][i] = match spec.frontier_shape {
            FrontierShape::Convex => 1.0,
            FrontierShape::Nonconvex => {
                if i == 0 {
                    1.0
                } else {
                    0.8
                }
            }
        };
    }
    // Compromise token: equal pay on every objective. Outside the vertex
    // hull for the convex shape, strictly inside it for the nonconvex shape.
    let compromise = match spec.frontier_shape {
        FrontierShape::Convex => 0.6,
        FrontierShape::Nonconvex => 0.9 / (1.0 + 1.25 * (n as f64 - 1.0)),
    };
    for i in 0..n {
        table[n][i] = compromise;
    }
    // Dominated filler strictly below the compromise on every coordinate.
    let mut rng = RngStream::new(spec.seed, 7001);
    let filler_cap = (compromise * 0.95).min(0.25);
    for row in table.iter_mut().skip(n + 1) {
        for cell in row.iter_mut() {
            *cell = 0.05 + rng.next_uniform() * (filler_cap - 0.05);
        }
    }
    Ok(TokenTradeEnv { vocab_size: v, n_objectives: n, horizon: t, reward_table: table })
}

/// Best achievable scalarized expected return over stationary per-step token
/// distributions.
///
/// Linear scalarization admits the exact closed form (the best single
/// token). The worst-case form is maximized by grid search over the token
/// simplex at resolution 1e-2, which is exact whenever the optimum sits on
/// the grid and within one grid step otherwise.
pub fn oracle_best(
    env: &TokenTradeEnv,
    lambda: &PreferenceVector,
    scalarizer: Scalarizer,
    z_star: &[f64],
) -> Result<f64> {
    if lambda.dim() != env.n_objectives() {
        return Err(Error::InvalidInput(format!(
            "preference has {} objectives, environment has {}",
            lambda.dim(),
            env.n_objectives()
        )));
    }
    let t = env.horizon() as f64;
    match scalarizer {
        Scalarizer::Linear => {
            let mut best = f64::NEG_INFINITY;
            for row in env.reward_table() {
                best = best.max(linear_scalarize(row, lambda)?);
            }
            Ok(best * t)
        }
        Scalarizer::Tch => {
            let v = env.vocab_size();
            let n = env.n_objectives();
            let steps = 100u32; // resolution 1e-2 on the token simplex
            let mut best = f64::NEG_INFINITY;
            let mut counts = vec![0u32; v];
            enumerate_compositions(&mut counts, 0, steps, &mut |c| {
                let mut returns = vec![0.0f64; n];
                for (token, &k) in c.iter().enumerate() {
                    if k == 0 {
                        continue;
                    }
                    let p = k as f64 / steps as f64;
                    for i in 0..n {
                        returns[i] += p * env.reward_table()[token][i];
                    }
                }
                for r in returns.iter_mut() {
                    *r *= t;
                }
                let val = tch_value(&returns, lambda, z_star)
                    .expect("dimensions checked before enumeration");
                if val > best {
                    best = val;
                }
            });
            Ok(best)
        }
    }
}

fn enumerate_compositions(
    counts: &mut Vec<u32>,
    pos: usize,
    remaining: u32,
    visit: &mut impl FnMut(&[u32]),
) {
    if pos + 1 == counts.len() {
        counts[pos] = remaining;
        visit(counts);
        return;
    }
    for c in 0..=remaining {
        counts[pos] = c;
        enumerate_compositions(counts, pos + 1, remaining - c, visit);
    }
}
