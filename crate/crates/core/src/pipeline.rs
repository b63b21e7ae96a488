//! End-to-end run orchestration: each function here is one CLI step, reading
//! and writing checkpoints in a run directory.
//!
//! Steps share a [`RunConfig`] and a root seed. Each consumes earlier
//! artifacts by well-known file name and validates everything it needs before
//! writing anything, so a failed step never leaves partial output. All
//! randomness derives from the root seed through fixed stream ids, which
//! makes reruns of any step byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use crate::adapters::{
    calibrate_rescale, magnitude_prune, merge, objective_vector, task_svd, LoraExpert,
    ObjectiveVector,
};
use crate::error::{Error, Result};
use crate::harness::{
    build_report, sweep_hoe, sweep_mod_fuse, sweep_morlhf, sweep_rs_soup, ParetoPoint,
    SweepReport, METHOD_HOE, METHOD_MOD_FUSE, METHOD_MORLHF, METHOD_RS_SOUP,
};
use crate::numkernel::RngStream;
use crate::persist::{
    atomic_write, load, read_calibration, read_sweep_csv, render_frontier_svg, save,
    write_calibration, write_sweep_csv, Artifact, CalibrationEntry, CalibrationReport, RunConfig,
};
use crate::policy::PolicyNetwork;
use crate::router::{assemble, HoeModel, RouterExpert};
use crate::simplex::{eval_set_3obj, grid, PreferenceVector};
use crate::trainer::{
    evaluate_greedy_returns, linear_scalarize, lora_checksum, make_env, oracle_best,
    reference_point, write_training_log, OmdState, Scalarizer, TokenTradeEnv,
};

pub const BASE_CKPT: &str = "base.ckpt";
pub const HOE_CKPT: &str = "hoe_model.ckpt";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SVG: &str = "sweep.svg";
pub const REPORT_JSON: &str = "report.json";
pub const CALIBRATION_JSON: &str = "calibration.json";

pub fn dense_ckpt(objective: usize) -> String {
    format!("dense_{objective}.ckpt")
}

pub fn lora_ckpt(objective: usize) -> String {
    format!("lora_{objective}.ckpt")
}

pub fn merged_ckpt(k: usize) -> String {
    format!("merged_{k}.ckpt")
}

pub fn router_ckpt(r: usize) -> String {
    format!("router_{r}.ckpt")
}

pub fn router_log(r: usize) -> String {
    format!("router_{r}.log.jsonl")
}

// Seed streams, one per artifact family, so adding a step never shifts the
// randomness of another.
const STREAM_BASE_INIT: u64 = 100;
const STREAM_SINGLE: u64 = 200;
const STREAM_ROUTER: u64 = 300;

fn derived_seed(root: u64, stream: u64) -> u64 {
    RngStream::new(root, stream).next_u64()
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{} is missing; run the {produced_by} step first",
            path.display()
        )))
    }
}

fn load_dense(path: &Path) -> Result<PolicyNetwork> {
    match load(path)? {
        Artifact::Dense(net) => Ok(net),
        other => Err(Error::CorruptCheckpoint(format!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            other.kind(),
            crate::persist::KIND_DENSE
        ))),
    }
}

fn load_lora(path: &Path) -> Result<LoraExpert> {
    match load(path)? {
        Artifact::Lora(e) => Ok(e),
        other => Err(Error::CorruptCheckpoint(format!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            other.kind(),
            crate::persist::KIND_LORA
        ))),
    }
}

fn load_router(path: &Path) -> Result<RouterExpert> {
    match load(path)? {
        Artifact::Router(r) => Ok(r),
        other => Err(Error::CorruptCheckpoint(format!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            other.kind(),
            crate::persist::KIND_ROUTER
        ))),
    }
}

fn load_model(path: &Path) -> Result<HoeModel> {
    match load(path)? {
        Artifact::Model(m) => Ok(m),
        other => Err(Error::CorruptCheckpoint(format!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            other.kind(),
            crate::persist::KIND_MODEL
        ))),
    }
}

fn one_hot_index(p: &PreferenceVector) -> Option<usize> {
    (0..p.dim()).find(|&i| {
        PreferenceVector::one_hot(p.dim(), i).map(|h| p.coincides_with(&h)).unwrap_or(false)
    })
}

/// The checkpoint file backing each planned low-rank expert, in plan order:
/// one-hot entries come from extraction, interior entries from merging.
fn planned_lora_files(cfg: &RunConfig, out: &Path) -> Result<Vec<(PreferenceVector, PathBuf)>> {
    let mut files = Vec::new();
    let mut interior = 0;
    for pref in cfg.lora_plan()? {
        let name = match one_hot_index(&pref) {
            Some(i) => lora_ckpt(i),
            None => {
                let name = merged_ckpt(interior);
                interior += 1;
                name
            }
        };
        files.push((pref, out.join(name)));
    }
    Ok(files)
}

fn load_planned_loras(cfg: &RunConfig, out: &Path) -> Result<Vec<LoraExpert>> {
    let files = planned_lora_files(cfg, out)?;
    for (pref, path) in &files {
        let step = if one_hot_index(pref).is_some() { "extract" } else { "merge" };
        require(path, step)?;
    }
    files.iter().map(|(_, path)| load_lora(path)).collect()
}

fn load_base_and_denses(
    cfg: &RunConfig,
    out: &Path,
) -> Result<(PolicyNetwork, Vec<PolicyNetwork>)> {
    require(&out.join(BASE_CKPT), "train-singles")?;
    let base = load_dense(&out.join(BASE_CKPT))?;
    let mut denses = Vec::with_capacity(cfg.env.n_objectives);
    for i in 0..cfg.env.n_objectives {
        let path = out.join(dense_ckpt(i));
        require(&path, "train-singles")?;
        denses.push(load_dense(&path)?);
    }
    Ok((base, denses))
}

fn fresh_base(cfg: &RunConfig, env: &TokenTradeEnv) -> Result<PolicyNetwork> {
    let mut rng = RngStream::new(cfg.seed, STREAM_BASE_INIT);
    PolicyNetwork::new_base(
        env.obs_dim(),
        cfg.training.hidden_dim,
        env.vocab_size(),
        env.n_objectives(),
        &mut rng,
    )
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))
}

/// Trains one dense policy per objective from a shared random base and
/// checkpoints base plus all singles. Each single must reach 95% of the
/// closed-form best linear return for its objective or the whole step fails
/// without writing anything.
pub fn cmd_train_singles(cfg: &RunConfig, out: &Path) -> Result<()> {
    let env = make_env(&cfg.env)?;
    let base = fresh_base(cfg, &env)?;
    let n = env.n_objectives();
    let mut tuned = Vec::with_capacity(n);
    for i in 0..n {
        let hot = PreferenceVector::one_hot(n, i)?;
        let mut ppo = cfg.training.ppo.clone();
        ppo.seed = derived_seed(cfg.seed, STREAM_SINGLE + i as u64);
        let (net, _log) = crate::trainer::train_dense(&base, &hot, &env, &ppo)?;
        let omegas = net.empty_omegas();
        let returns =
            evaluate_greedy_returns(&env, cfg.eval.episodes, |s| net.act_greedy(s, &omegas))?;
        let oracle = oracle_best(&env, &hot, Scalarizer::Linear, &[])?;
        let bar = oracle - 0.05 * oracle.abs();
        if returns[i] < bar {
            return Err(Error::GateFailed(format!(
                "single for objective {i} reached {:.4}, needs {bar:.4} (oracle {oracle:.4})",
                returns[i]
            )));
        }
        tuned.push(net);
    }
    ensure_dir(out)?;
    save(&out.join(BASE_CKPT), &Artifact::Dense(base), cfg.seed)?;
    for (i, net) in tuned.into_iter().enumerate() {
        save(&out.join(dense_ckpt(i)), &Artifact::Dense(net), cfg.seed)?;
    }
    Ok(())
}

fn task_vectors(base: &PolicyNetwork, denses: &[PolicyNetwork]) -> Result<Vec<ObjectiveVector>> {
    denses.iter().map(|d| objective_vector(&d.weight_map(), &base.weight_map())).collect()
}

/// Greedy scalarized return of the base with exactly one expert attached at
/// full mixing weight. This is the calibration probe: it scores a rescale
/// candidate by what the expert actually delivers at inference time.
fn probe_score(
    base: &PolicyNetwork,
    expert: &LoraExpert,
    lambda: &PreferenceVector,
    env: &TokenTradeEnv,
    episodes: usize,
) -> f64 {
    let mut net = base.clone();
    if net.attach_expert(expert).is_err() {
        return f64::NEG_INFINITY;
    }
    let omegas = net.shared_omegas(&[1.0]);
    match evaluate_greedy_returns(env, episodes, |s| net.act_greedy(s, &omegas)) {
        Ok(returns) => linear_scalarize(&returns, lambda).unwrap_or(f64::NEG_INFINITY),
        Err(_) => f64::NEG_INFINITY,
    }
}

fn calibrated_expert(
    raw: &LoraExpert,
    base: &PolicyNetwork,
    lambda: &PreferenceVector,
    env: &TokenTradeEnv,
    episodes: usize,
    candidates: &[f64],
) -> Result<(LoraExpert, CalibrationEntry)> {
    let score = |e: &LoraExpert| probe_score(base, e, lambda, env, episodes);
    let chosen = calibrate_rescale(raw, score, candidates)?;
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite candidates"));
    let scores = sorted
        .iter()
        .map(|&c| {
            let mut probe = raw.clone();
            probe.rescale = c;
            score(&probe)
        })
        .collect();
    let entry = CalibrationEntry {
        id: chosen.id.clone(),
        preference: lambda.weights().to_vec(),
        candidates: sorted,
        scores,
        chosen: chosen.rescale,
    };
    Ok((chosen, entry))
}

fn upsert_calibration(path: &Path, new_entries: Vec<CalibrationEntry>) -> Result<()> {
    let mut report =
        if path.is_file() { read_calibration(path)? } else { CalibrationReport::default() };
    for entry in new_entries {
        report.experts.retain(|e| e.id != entry.id);
        report.experts.push(entry);
    }
    write_calibration(path, &report)
}

/// Compresses each single's weight delta into a low-rank expert: global
/// magnitude pruning, truncated SVD per module, then rescale calibration
/// against the greedy probe. Writes one expert per objective plus the
/// calibration report.
pub fn cmd_extract(cfg: &RunConfig, out: &Path) -> Result<()> {
    let env = make_env(&cfg.env)?;
    let (base, denses) = load_base_and_denses(cfg, out)?;
    let taus = task_vectors(&base, &denses)?;
    let mut experts = Vec::new();
    let mut entries = Vec::new();
    for (i, tau) in taus.iter().enumerate() {
        let hot = PreferenceVector::one_hot(env.n_objectives(), i)?;
        let pruned = magnitude_prune(tau, cfg.extraction.keep_fraction)?;
        let raw = task_svd(&pruned, cfg.extraction.rank, 1.0, &hot)?;
        let (expert, entry) = calibrated_expert(
            &raw,
            &base,
            &hot,
            &env,
            cfg.eval.episodes,
            &cfg.extraction.rescale_candidates,
        )?;
        experts.push(expert);
        entries.push(entry);
    }
    for (i, expert) in experts.into_iter().enumerate() {
        save(&out.join(lora_ckpt(i)), &Artifact::Lora(expert), cfg.seed)?;
    }
    upsert_calibration(&out.join(CALIBRATION_JSON), entries)
}

/// Builds one merged expert per planned interior preference by
/// preference-weighted sign-elected averaging of the task vectors, then the
/// same compression and calibration as extraction.
pub fn cmd_merge(cfg: &RunConfig, out: &Path) -> Result<()> {
    let env = make_env(&cfg.env)?;
    let interior: Vec<PreferenceVector> =
        cfg.lora_plan()?.into_iter().filter(|p| one_hot_index(p).is_none()).collect();
    if interior.is_empty() {
        return Ok(());
    }
    let (base, denses) = load_base_and_denses(cfg, out)?;
    let taus = task_vectors(&base, &denses)?;
    let mut outputs = Vec::new();
    let mut entries = Vec::new();
    for lambda in &interior {
        let merged = merge(&taus, lambda, cfg.extraction.keep_fraction)?;
        let raw = task_svd(&merged, cfg.extraction.rank, 1.0, lambda)?;
        let (expert, entry) = calibrated_expert(
            &raw,
            &base,
            lambda,
            &env,
            cfg.eval.episodes,
            &cfg.extraction.rescale_candidates,
        )?;
        outputs.push(expert);
        entries.push(entry);
    }
    for (k, expert) in outputs.into_iter().enumerate() {
        save(&out.join(merged_ckpt(k)), &Artifact::Lora(expert), cfg.seed)?;
    }
    upsert_calibration(&out.join(CALIBRATION_JSON), entries)
}

/// Trains one router expert per planned router preference over the frozen
/// expert registry. The initial reference point comes from the singles'
/// greedy returns; expert weights are checksummed before and after to prove
/// they never moved.
pub fn cmd_train_routers(cfg: &RunConfig, out: &Path) -> Result<()> {
    let env = make_env(&cfg.env)?;
    let router_prefs = cfg.router_plan()?;
    if router_prefs.is_empty() {
        return Ok(());
    }
    let (base, denses) = load_base_and_denses(cfg, out)?;
    let loras = load_planned_loras(cfg, out)?;
    let frozen = lora_checksum(&loras);
    let model = assemble(base, loras, Vec::new())?;
    let z_star = reference_point(&denses, &env, cfg.eval.episodes, 0.1)?;

    let mut trained = Vec::new();
    for (r, pref) in router_prefs.iter().enumerate() {
        let mut ppo = cfg.training.ppo.clone();
        ppo.seed = derived_seed(cfg.seed, STREAM_ROUTER + r as u64);
        let mut omd = OmdState::new(z_star.clone(), cfg.training.omd_alpha)?;
        omd.smoothing_mu = cfg.training.omd_smoothing_mu;
        let (router, log) = crate::trainer::train_router(&model, pref, &env, &ppo, omd)?;
        if log.len() != ppo.total_iterations {
            return Err(Error::TrainingDiverged(format!(
                "router {r} logged {} iterations, expected {}",
                log.len(),
                ppo.total_iterations
            )));
        }
        trained.push((router, log));
    }
    if lora_checksum(model.lora_registry()) != frozen {
        return Err(Error::GateFailed(
            "expert weights changed during router training".into(),
        ));
    }
    for (r, (router, log)) in trained.into_iter().enumerate() {
        save(&out.join(router_ckpt(r)), &Artifact::Router(router), cfg.seed)?;
        let mut bytes = Vec::new();
        write_training_log(&log, &mut bytes)?;
        atomic_write(&out.join(router_log(r)), &bytes)?;
    }
    Ok(())
}

/// Assembles base, planned experts, and trained routers into one
/// serving-ready model checkpoint.
pub fn cmd_assemble(cfg: &RunConfig, out: &Path) -> Result<()> {
    require(&out.join(BASE_CKPT), "train-singles")?;
    let base = load_dense(&out.join(BASE_CKPT))?;
    let loras = load_planned_loras(cfg, out)?;
    let mut routers = Vec::new();
    for r in 0..cfg.router_plan()?.len() {
        let path = out.join(router_ckpt(r));
        require(&path, "train-routers")?;
        routers.push(load_router(&path)?);
    }
    let model = assemble(base, loras, routers)?;
    save(&out.join(HOE_CKPT), &Artifact::Model(model), cfg.seed)
}

fn sweep_grid(cfg: &RunConfig) -> Result<Vec<PreferenceVector>> {
    match cfg.env.n_objectives {
        3 => Ok(eval_set_3obj()),
        n => grid(n, cfg.eval.grid_step),
    }
}

/// Ideal-point estimate used by sweep reports: the best observed return per
/// objective plus a small positive margin, so every worst-case gap stays
/// strictly positive.
fn report_z_star(points: &[ParetoPoint], n: usize) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no sweep points".into()));
    }
    let mut z = vec![f64::NEG_INFINITY; n];
    for p in points {
        if p.mean_rewards.len() != n {
            return Err(Error::InvalidInput(format!(
                "point has {} objectives, expected {n}",
                p.mean_rewards.len()
            )));
        }
        for (zi, &r) in z.iter_mut().zip(&p.mean_rewards) {
            *zi = zi.max(r);
        }
    }
    for zi in z.iter_mut() {
        *zi += 0.1;
    }
    Ok(z)
}

/// Runs the paired preference sweep for the requested methods and writes the
/// CSV (and, for two objectives, the frontier SVG).
pub fn cmd_sweep(cfg: &RunConfig, out: &Path, methods: &[String]) -> Result<()> {
    if methods.is_empty() {
        return Err(Error::InvalidInput("no sweep methods requested".into()));
    }
    for m in methods {
        if !matches!(m.as_str(), METHOD_HOE | METHOD_RS_SOUP | METHOD_MOD_FUSE | METHOD_MORLHF) {
            return Err(Error::InvalidInput(format!("unknown sweep method {m}")));
        }
    }
    let env = make_env(&cfg.env)?;
    let grid = sweep_grid(cfg)?;
    let episodes = cfg.eval.episodes;

    // Validate and load every input before running anything.
    let needs_model = methods.iter().any(|m| m == METHOD_HOE);
    let needs_denses = methods.iter().any(|m| m != METHOD_HOE);
    let model = if needs_model {
        require(&out.join(HOE_CKPT), "assemble")?;
        Some(load_model(&out.join(HOE_CKPT))?)
    } else {
        None
    };
    let base_denses = if needs_denses { Some(load_base_and_denses(cfg, out)?) } else { None };

    let mut points = Vec::new();
    for method in methods {
        match method.as_str() {
            METHOD_HOE => {
                let model = model.as_ref().expect("loaded above");
                points.extend(sweep_hoe(model, &grid, &env, episodes, cfg.seed)?);
            }
            METHOD_RS_SOUP => {
                let (base, denses) = base_denses.as_ref().expect("loaded above");
                let taus = task_vectors(base, denses)?;
                points.extend(sweep_rs_soup(base, &taus, &grid, &env, episodes, cfg.seed)?);
            }
            METHOD_MOD_FUSE => {
                let (_, denses) = base_denses.as_ref().expect("loaded above");
                points.extend(sweep_mod_fuse(denses, &grid, &env, episodes, cfg.seed)?);
            }
            METHOD_MORLHF => {
                let (base, _) = base_denses.as_ref().expect("loaded above");
                let mut ppo = cfg.training.ppo.clone();
                ppo.seed = cfg.seed;
                points.extend(sweep_morlhf(base, &grid, &env, &ppo, episodes, cfg.seed)?);
            }
            _ => unreachable!("method names validated above"),
        }
    }
    let z_star = report_z_star(&points, env.n_objectives())?;
    let report = build_report(points, &z_star, episodes, cfg.seed)?;

    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &report)?;
    ensure_dir(out)?;
    atomic_write(&out.join(SWEEP_CSV), &csv)?;
    if env.n_objectives() == 2 {
        atomic_write(&out.join(SWEEP_SVG), render_frontier_svg(&report)?.as_bytes())?;
    }
    Ok(())
}

/// Per-method summary row of a sweep report.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub hypervolume: f64,
    pub wins: usize,
    pub points: usize,
}

/// Serializable digest of a sweep, written by the report step.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ReportSummary {
    pub methods: Vec<MethodSummary>,
    pub reference_point: Vec<f64>,
    pub z_star: Vec<f64>,
    pub episodes: usize,
    pub seed: u64,
}

fn summarize(report: &SweepReport) -> ReportSummary {
    let mut methods = Vec::new();
    for (method, hv) in &report.hypervolume {
        methods.push(MethodSummary {
            method: method.clone(),
            hypervolume: *hv,
            wins: report.wins.get(method).copied().unwrap_or(0),
            points: report.points.iter().filter(|p| &p.method == method).count(),
        });
    }
    ReportSummary {
        methods,
        reference_point: report.reference_point.clone(),
        z_star: report.z_star.clone(),
        episodes: report.episodes,
        seed: report.seed,
    }
}

fn format_report(summary: &ReportSummary) -> String {
    let mut text = String::new();
    text.push_str(&format!("{:<12} {:>14} {:>6} {:>7}\n", "method", "hypervolume", "wins", "points"));
    for m in &summary.methods {
        text.push_str(&format!(
            "{:<12} {:>14.6} {:>6} {:>7}\n",
            m.method, m.hypervolume, m.wins, m.points
        ));
    }
    let fmt = |v: &[f64]| {
        let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
        format!("[{}]", parts.join(", "))
    };
    text.push_str(&format!("reference point {}\n", fmt(&summary.reference_point)));
    text.push_str(&format!("ideal estimate  {}\n", fmt(&summary.z_star)));
    text.push_str(&format!("episodes {} seed {}\n", summary.episodes, summary.seed));
    text
}

/// Rebuilds the comparison report from the sweep CSV, writes the JSON digest,
/// and returns the printable table.
pub fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<String> {
    let csv_path = out.join(SWEEP_CSV);
    require(&csv_path, "sweep")?;
    let bytes = fs::read(&csv_path).map_err(|e| Error::Io(format!("{}: {e}", csv_path.display())))?;
    let points = read_sweep_csv(bytes.as_slice())?;
    let z_star = report_z_star(&points, cfg.env.n_objectives)?;
    let report = build_report(points, &z_star, cfg.eval.episodes, cfg.seed)?;
    let summary = summarize(&report);
    let mut json = serde_json::to_vec_pretty(&summary)
        .map_err(|e| Error::Io(format!("report serialization: {e}")))?;
    json.push(b'\n');
    atomic_write(&out.join(REPORT_JSON), &json)?;
    Ok(format_report(&summary))
}

/// Convenience wrapper running every step in order. Primarily for tests; the
/// CLI exposes the steps individually.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<String> {
    cmd_train_singles(cfg, out)?;
    cmd_extract(cfg, out)?;
    cmd_merge(cfg, out)?;
    cmd_train_routers(cfg, out)?;
    cmd_assemble(cfg, out)?;
    cmd_sweep(cfg, out, &cfg.eval.methods)?;
    cmd_report(cfg, out)
}
