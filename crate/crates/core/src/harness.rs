//! Preference-grid evaluation: greedy sweeps, Pareto-front extraction,
//! hypervolume, and the three baseline comparators (parameter soup, logit
//! fusion, and the per-preference dedicated-training upper bound).
//!
//! Every method is swept over the same preference grid with the same
//! episode budget so frontiers and win counts compare like for like.

use std::collections::BTreeMap;

use crate::adapters::ObjectiveVector;
use crate::error::{Error, Result};
use crate::numkernel::RngStream;
use crate::policy::PolicyNetwork;
use crate::router::HoeModel;
use crate::simplex::{eval_set_3obj, grid, PreferenceVector};
use crate::trainer::{
    evaluate_greedy_returns, linear_scalarize, tch_value, train_dense, PpoConfig, TokenTradeEnv,
};

pub const METHOD_HOE: &str = "hoe";
pub const METHOD_RS_SOUP: &str = "rs_soup";
pub const METHOD_MOD_FUSE: &str = "mod_fuse";
pub const METHOD_MORLHF: &str = "morlhf";

/// One evaluated preference: the per-objective Monte Carlo episode means of
/// one method's greedy policy.
#[derive(Debug, Clone)]
pub struct ParetoPoint {
    pub preference: PreferenceVector,
    pub mean_rewards: Vec<f64>,
    pub episodes: usize,
    pub method: String,
    pub seed: u64,
}

impl ParetoPoint {
    pub fn scalarized(&self) -> Result<f64> {
        linear_scalarize(&self.mean_rewards, &self.preference)
    }
}

/// Aggregated sweep comparison across methods sharing one grid.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub points: Vec<ParetoPoint>,
    /// Hypervolume of each method's point set against the shared reference.
    pub hypervolume: BTreeMap<String, f64>,
    /// Per method: at how many grid preferences it attains the best
    /// scalarized return (ties award every tied method).
    pub wins: BTreeMap<String, usize>,
    /// Shared hypervolume reference: coordinate-wise minimum over all points
    /// minus 5% of the coordinate range.
    pub reference_point: Vec<f64>,
    /// Reference point used for the worst-case columns in exports.
    pub z_star: Vec<f64>,
    pub episodes: usize,
    pub seed: u64,
}

/// The evaluation grid used throughout: 11 preferences for two objectives,
/// the fixed 13-point set for three, coarser compositions beyond.
pub fn default_grid(n_objectives: usize) -> Result<Vec<PreferenceVector>> {
    match n_objectives {
        0 => Err(Error::InvalidInput("need at least one objective".into())),
        1 => Ok(vec![PreferenceVector::one_hot(1, 0)?]),
        2 => grid(2, 0.1),
        3 => Ok(eval_set_3obj()),
        n => grid(n, 0.5),
    }
}

/// Greedy evaluation of one policy at one preference.
fn measure<G>(
    method: &str,
    lambda: &PreferenceVector,
    env: &TokenTradeEnv,
    episodes: usize,
    seed: u64,
    act: G,
) -> Result<ParetoPoint>
where
    G: FnMut(&[f32]) -> Result<usize>,
{
    if episodes == 0 {
        return Err(Error::InvalidInput("need at least one evaluation episode".into()));
    }
    let mean_rewards = evaluate_greedy_returns(env, episodes, act)?;
    if mean_rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite mean rewards for method {method}"
        )));
    }
    Ok(ParetoPoint {
        preference: lambda.clone(),
        mean_rewards,
        episodes,
        method: method.to_string(),
        seed,
    })
}

/// Sweeps a method over a preference grid: for each preference the factory
/// produces a greedy policy, which is evaluated for `episodes` rollouts.
pub fn sweep<F, G>(
    method: &str,
    grid: &[PreferenceVector],
    env: &TokenTradeEnv,
    episodes: usize,
    seed: u64,
    mut policy_for: F,
) -> Result<Vec<ParetoPoint>>
where
    F: FnMut(&PreferenceVector) -> Result<G>,
    G: FnMut(&[f32]) -> Result<usize>,
{
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty preference grid".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    for lambda in grid {
        let act = policy_for(lambda)?;
        out.push(measure(method, lambda, env, episodes, seed, act)?);
    }
    Ok(out)
}

/// Sweep of an assembled model: route once per preference, then act greedily
/// under the routed mixture.
pub fn sweep_hoe(
    model: &HoeModel,
    grid: &[PreferenceVector],
    env: &TokenTradeEnv,
    episodes: usize,
    seed: u64,
) -> Result<Vec<ParetoPoint>> {
    sweep(METHOD_HOE, grid, env, episodes, seed, |lambda| {
        let assignment = model.route(lambda)?;
        Ok(move |state: &[f32]| model.infer_greedy(&assignment, state))
    })
}

/// Parameter-space soup baseline: the dense policy `base + sum_i lambda_i *
/// tau_i`, with no merging or routing.
pub fn rs_soup(
    base: &PolicyNetwork,
    taus: &[ObjectiveVector],
    lambda: &PreferenceVector,
) -> Result<PolicyNetwork> {
    if taus.is_empty() {
        return Err(Error::InvalidInput("soup needs at least one task delta".into()));
    }
    if lambda.dim() != taus.len() {
        return Err(Error::InvalidInput(format!(
            "{} preference entries for {} task deltas",
            lambda.dim(),
            taus.len()
        )));
    }
    let mut combined = ObjectiveVector { deltas: BTreeMap::new() };
    for (path, delta0) in &taus[0].deltas {
        let mut acc = delta0.scale(lambda.weights()[0]);
        for (tau, &w) in taus.iter().zip(lambda.weights()).skip(1) {
            let Some(delta) = tau.deltas.get(path) else {
                return Err(Error::IncompatibleModels(format!(
                    "task delta lacks module {path}"
                )));
            };
            acc = acc.add(&delta.scale(w)).map_err(|_| {
                Error::IncompatibleModels(format!("module {path} shapes disagree across deltas"))
            })?;
        }
        combined.deltas.insert(path.clone(), acc);
    }
    for tau in taus {
        if tau.deltas.len() != taus[0].deltas.len() {
            return Err(Error::IncompatibleModels(
                "task deltas cover different module sets".into(),
            ));
        }
    }
    base.with_delta(&combined)
}

/// Sweep of the parameter-soup baseline.
pub fn sweep_rs_soup(
    base: &PolicyNetwork,
    taus: &[ObjectiveVector],
    grid: &[PreferenceVector],
    env: &TokenTradeEnv,
    episodes: usize,
    seed: u64,
) -> Result<Vec<ParetoPoint>> {
    sweep(METHOD_RS_SOUP, grid, env, episodes, seed, |lambda| {
        let net = rs_soup(base, taus, lambda)?;
        let omegas = net.empty_omegas();
        Ok(move |state: &[f32]| net.act_greedy(state, &omegas))
    })
}

/// Decoding-time fusion baseline: the preference-weighted sum of every
/// policy's logits at this state.
pub fn mod_fuse(
    policies: &[PolicyNetwork],
    lambda: &PreferenceVector,
    state: &[f32],
) -> Result<Vec<f64>> {
    if policies.is_empty() {
        return Err(Error::InvalidInput("fusion needs at least one policy".into()));
    }
    if lambda.dim() != policies.len() {
        return Err(Error::InvalidInput(format!(
            "{} preference entries for {} policies",
            lambda.dim(),
            policies.len()
        )));
    }
    let actions = policies[0].action_count();
    if policies.iter().any(|p| p.action_count() != actions) {
        return Err(Error::IncompatibleModels(
            "fused policies must share one action space".into(),
        ));
    }
    let mut fused = vec![0.0f64; actions];
    for (policy, &w) in policies.iter().zip(lambda.weights()) {
        let logits = policy.logits(state, &policy.empty_omegas())?;
        for (f, l) in fused.iter_mut().zip(&logits) {
            *f += w * l;
        }
    }
    Ok(fused)
}

/// Sweep of the logit-fusion baseline (greedy over fused logits, ties to the
/// lowest index).
pub fn sweep_mod_fuse(
    policies: &[PolicyNetwork],
    grid: &[PreferenceVector],
    env: &TokenTradeEnv,
    episodes: usize,
    seed: u64,
) -> Result<Vec<ParetoPoint>> {
    sweep(METHOD_MOD_FUSE, grid, env, episodes, seed, |lambda| {
        let lambda = lambda.clone();
        Ok(move |state: &[f32]| {
            let fused = mod_fuse(policies, &lambda, state)?;
            let mut best = 0;
            for (i, &l) in fused.iter().enumerate() {
                if l > fused[best] {
                    best = i;
                }
            }
            Ok(best)
        })
    })
}

/// Per-preference upper bound: a dedicated dense policy trained with
/// linear-scalarized updates at exactly this preference, then evaluated like
/// any sweep point.
pub fn morlhf_oracle(
    base: &PolicyNetwork,
    lambda: &PreferenceVector,
    env: &TokenTradeEnv,
    cfg: &PpoConfig,
    episodes: usize,
) -> Result<ParetoPoint> {
    let (net, _) = train_dense(base, lambda, env, cfg)?;
    let omegas = net.empty_omegas();
    measure(METHOD_MORLHF, lambda, env, episodes, cfg.seed, |state| {
        net.act_greedy(state, &omegas)
    })
}

/// Sweep of the dedicated-training upper bound; each preference trains from
/// a seed derived from the grid position so runs stay reproducible.
pub fn sweep_morlhf(
    base: &PolicyNetwork,
    grid: &[PreferenceVector],
    env: &TokenTradeEnv,
    cfg: &PpoConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<ParetoPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty preference grid".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    for (idx, lambda) in grid.iter().enumerate() {
        let mut dedicated = cfg.clone();
        dedicated.seed = RngStream::new(cfg.seed, 7100 + idx as u64).next_u64();
        let mut point = morlhf_oracle(base, lambda, env, &dedicated, episodes)?;
        point.seed = seed;
        out.push(point);
    }
    Ok(out)
}

/// True when `a` is at least `b` everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x >= y)
        && a.iter().zip(b).any(|(x, y)| x > y)
}

/// The non-dominated subset. Two objectives use a sort-and-scan skyline;
/// higher dimensions fall back to pairwise filtering. Exact duplicates do
/// not dominate each other and are all retained.
pub fn pareto_front(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let n = points[0].mean_rewards.len();
    if points.iter().any(|p| p.mean_rewards.len() != n) {
        return Err(Error::InvalidInput("points mix objective counts".into()));
    }
    if n == 2 {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&i, &j| {
            let (a, b) = (&points[i].mean_rewards, &points[j].mean_rewards);
            b[0].partial_cmp(&a[0]).unwrap().then(b[1].partial_cmp(&a[1]).unwrap())
        });
        let mut kept: Vec<usize> = Vec::new();
        let mut best_second = f64::NEG_INFINITY;
        for &i in &order {
            let r = &points[i].mean_rewards;
            let duplicate_of_last = kept
                .last()
                .is_some_and(|&k| points[k].mean_rewards == *r);
            if r[1] > best_second || duplicate_of_last {
                kept.push(i);
                best_second = best_second.max(r[1]);
            }
        }
        kept.sort_unstable();
        return Ok(kept.into_iter().map(|i| points[i].clone()).collect());
    }
    let mut out = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let dominated = points
            .iter()
            .enumerate()
            .any(|(j, q)| j != i && dominates(&q.mean_rewards, &p.mean_rewards));
        if !dominated {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Lebesgue measure of the union of boxes `[ref_point, p]`. Points that fail
/// to dominate the reference coordinate-wise are discarded. Exact staircase
/// sweep in two dimensions, recursive slicing above.
pub fn hypervolume(points: &[Vec<f64>], ref_point: &[f64]) -> Result<f64> {
    if ref_point.is_empty() {
        return Err(Error::InvalidInput("empty reference point".into()));
    }
    for p in points {
        if p.len() != ref_point.len() {
            return Err(Error::InvalidInput(format!(
                "point of dimension {} against reference of {}",
                p.len(),
                ref_point.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite point".into()));
        }
    }
    let live: Vec<Vec<f64>> = points
        .iter()
        .filter(|p| p.iter().zip(ref_point).all(|(v, r)| v > r))
        .cloned()
        .collect();
    Ok(hv_recursive(live, ref_point))
}

fn hv_recursive(mut points: Vec<Vec<f64>>, ref_point: &[f64]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = ref_point.len();
    if n == 1 {
        return points.iter().map(|p| p[0] - ref_point[0]).fold(0.0, f64::max);
    }
    // Slice along the last axis from the top down; each slab's cross-section
    // is the union over every point tall enough to span it.
    points.sort_by(|a, b| b[n - 1].partial_cmp(&a[n - 1]).unwrap());
    let mut acc = 0.0;
    for k in 0..points.len() {
        let z_hi = points[k][n - 1];
        let z_lo = if k + 1 < points.len() {
            points[k + 1][n - 1].max(ref_point[n - 1])
        } else {
            ref_point[n - 1]
        };
        let thickness = z_hi - z_lo;
        if thickness <= 0.0 {
            continue;
        }
        let projected: Vec<Vec<f64>> =
            points[..=k].iter().map(|p| p[..n - 1].to_vec()).collect();
        acc += thickness * hv_recursive(projected, &ref_point[..n - 1]);
    }
    acc
}

/// Assembles the cross-method comparison: shared reference point, per-method
/// hypervolume, and per-preference scalarized win counts. Every method must
/// cover the identical preference grid.
pub fn build_report(
    points: Vec<ParetoPoint>,
    z_star: &[f64],
    episodes: usize,
    seed: u64,
) -> Result<SweepReport> {
    if points.is_empty() {
        return Err(Error::InvalidInput("report needs at least one point".into()));
    }
    let n = points[0].mean_rewards.len();
    if points.iter().any(|p| p.mean_rewards.len() != n || p.preference.dim() != n) {
        return Err(Error::InvalidInput("points mix objective counts".into()));
    }
    if z_star.len() != n {
        return Err(Error::InvalidInput(format!(
            "reference point of {} entries for {n} objectives",
            z_star.len()
        )));
    }

    let mut methods: Vec<String> = Vec::new();
    for p in &points {
        if !methods.contains(&p.method) {
            methods.push(p.method.clone());
        }
    }
    // Distinct preferences in first-appearance order.
    let mut prefs: Vec<PreferenceVector> = Vec::new();
    for p in &points {
        if !prefs.iter().any(|q| q.coincides_with(&p.preference)) {
            prefs.push(p.preference.clone());
        }
    }
    // Paired evaluation: each method contributes exactly one point per
    // preference.
    for m in &methods {
        for lam in &prefs {
            let count = points
                .iter()
                .filter(|p| p.method == *m && p.preference.coincides_with(lam))
                .count();
            if count != 1 {
                return Err(Error::InvalidInput(format!(
                    "method {m} has {count} points at one preference; grids must be identical"
                )));
            }
        }
    }

    let mut reference_point = vec![0.0f64; n];
    for i in 0..n {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &points {
            lo = lo.min(p.mean_rewards[i]);
            hi = hi.max(p.mean_rewards[i]);
        }
        reference_point[i] = lo - 0.05 * (hi - lo);
    }

    let mut hv = BTreeMap::new();
    for m in &methods {
        let coords: Vec<Vec<f64>> = points
            .iter()
            .filter(|p| p.method == *m)
            .map(|p| p.mean_rewards.clone())
            .collect();
        hv.insert(m.clone(), hypervolume(&coords, &reference_point)?);
    }

    let mut wins: BTreeMap<String, usize> = methods.iter().map(|m| (m.clone(), 0)).collect();
    for lam in &prefs {
        let mut scored: Vec<(&str, f64)> = Vec::new();
        for p in points.iter().filter(|p| p.preference.coincides_with(lam)) {
            scored.push((&p.method, p.scalarized()?));
        }
        let best = scored.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        for (m, s) in scored {
            if (best - s).abs() < 1e-12 {
                *wins.get_mut(m).expect("method key present") += 1;
            }
        }
    }

    Ok(SweepReport {
        points,
        hypervolume: hv,
        wins,
        reference_point,
        z_star: z_star.to_vec(),
        episodes,
        seed,
    })
}

/// Worst-case scalarized value of one point against a reference, for report
/// exports.
pub fn point_tch(point: &ParetoPoint, z_star: &[f64]) -> Result<f64> {
    tch_value(&point.mean_rewards, &point.preference, z_star)
}
