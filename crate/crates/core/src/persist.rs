//! Artifact plumbing: the checkpoint container format, run configuration
//! files, sweep CSV export, and frontier SVG rendering.
//!
//! A checkpoint is a single file: an 8-byte magic, a little-endian u64
//! manifest length, a JSON manifest describing kind, metadata, and a tensor
//! shape table, then every tensor's f32 values little-endian in table order.
//! Round trips are bit-exact; anything malformed loads as
//! [`Error::CorruptCheckpoint`]. All writes go through a temp-file rename so
//! no torn file is ever observable at the target path.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{LoraExpert, LoraPair};
use crate::error::{Error, Result};
use crate::harness::{pareto_front, point_tch, ParetoPoint, SweepReport};
use crate::numkernel::DenseMatrix;
use crate::policy::{PluginLinear, PolicyNetwork, ValueHead};
use crate::router::{assemble, HoeModel, RouterExpert, RouterLayer};
use crate::simplex::PreferenceVector;
use crate::trainer::{make_env, EnvSpec, PpoConfig};

const MAGIC: &[u8; 8] = b"HOECKPT1";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_DENSE: &str = "dense";
pub const KIND_LORA: &str = "lora_expert";
pub const KIND_ROUTER: &str = "router_expert";
pub const KIND_MODEL: &str = "hoe_model";

/// One tensor's place in the blob: `rows * cols` f32 values, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Registry description for one expert inside a full-model checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: String,
    /// "lora" or "router".
    pub kind: String,
    pub preference: Vec<f64>,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub rescale: Option<f64>,
    #[serde(default)]
    pub assigned: Option<Vec<String>>,
}

/// Structured checkpoint header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub created_by: String,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub preference: Option<Vec<f64>>,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub rescale: Option<f64>,
    #[serde(default)]
    pub assigned: Option<Vec<String>>,
    #[serde(default)]
    pub registry: Vec<RegistryEntry>,
    pub tensors: Vec<TensorEntry>,
}

/// Anything the pipeline checkpoints.
#[derive(Debug, Clone)]
pub enum Artifact {
    Dense(PolicyNetwork),
    Lora(LoraExpert),
    Router(RouterExpert),
    Model(HoeModel),
}

impl Artifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Dense(_) => KIND_DENSE,
            Self::Lora(_) => KIND_LORA,
            Self::Router(_) => KIND_ROUTER,
            Self::Model(_) => KIND_MODEL,
        }
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Writes `bytes` to `path` through a sibling temp file and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Serializes a manifest and tensor data into checkpoint bytes.
pub fn container_bytes(manifest: &Manifest, blob: &[f32]) -> Result<Vec<u8>> {
    let declared: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    if declared != blob.len() {
        return Err(Error::InvalidInput(format!(
            "shape table declares {declared} values, blob has {}",
            blob.len()
        )));
    }
    let mjson = serde_json::to_vec(manifest)
        .map_err(|e| Error::Io(format!("manifest serialization: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + mjson.len() + blob.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&mjson);
    for v in blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Parses checkpoint bytes into the manifest and per-tensor values.
pub fn parse_container(bytes: &[u8]) -> Result<(Manifest, Vec<Vec<f32>>)> {
    if bytes.len() < 16 {
        return Err(corrupt("file shorter than the fixed header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let Some(manifest_bytes) = bytes.get(16..16 + mlen) else {
        return Err(corrupt("manifest extends past end of file"));
    };
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    for t in &manifest.tensors {
        if t.rows == 0 || t.cols == 0 {
            return Err(corrupt(format!("tensor {} declares an empty shape", t.name)));
        }
    }
    let blob = &bytes[16 + mlen..];
    let want: usize = manifest.tensors.iter().map(|t| t.rows * t.cols * 4).sum();
    if blob.len() != want {
        return Err(corrupt(format!(
            "blob is {} bytes, shape table requires {want}",
            blob.len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut off = 0;
    for t in &manifest.tensors {
        let n = t.rows * t.cols;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(f32::from_le_bytes(blob[off..off + 4].try_into().expect("4 bytes")));
            off += 4;
        }
        tensors.push(v);
    }
    Ok((manifest, tensors))
}

/// Saves any artifact to `path`, atomically.
pub fn save(path: &Path, artifact: &Artifact, seed: u64) -> Result<()> {
    let (manifest, blob) = encode(artifact, seed)?;
    atomic_write(path, &container_bytes(&manifest, &blob)?)
}

/// Loads an artifact of whatever kind the manifest declares.
pub fn load(path: &Path) -> Result<Artifact> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let (manifest, tensors) = parse_container(&bytes)?;
    decode(manifest, tensors)
}

/// Loads the manifest only (for listings and validation).
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(parse_container(&bytes)?.0)
}

fn created_by() -> String {
    format!("hoe-core {}", env!("CARGO_PKG_VERSION"))
}

fn blank_manifest(kind: &str, seed: u64) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        seed,
        created_by: created_by(),
        id: None,
        preference: None,
        rank: None,
        rescale: None,
        assigned: None,
        registry: Vec::new(),
        tensors: Vec::new(),
    }
}

fn push_tensor(
    entries: &mut Vec<TensorEntry>,
    blob: &mut Vec<f32>,
    name: String,
    rows: usize,
    cols: usize,
    data: &[f32],
) {
    debug_assert_eq!(rows * cols, data.len(), "{name}");
    entries.push(TensorEntry { name, rows, cols });
    blob.extend_from_slice(data);
}

fn emit_dense(
    net: &PolicyNetwork,
    prefix: &str,
    entries: &mut Vec<TensorEntry>,
    blob: &mut Vec<f32>,
) -> Result<()> {
    if net.attached_count() != 0 {
        return Err(Error::InvalidInput(
            "a dense checkpoint cannot carry attached experts".into(),
        ));
    }
    for layer in &net.layers {
        let p = layer.module_path();
        push_tensor(
            entries,
            blob,
            format!("{prefix}{p}.weight"),
            layer.out_dim(),
            layer.in_dim(),
            layer.w_pre().data(),
        );
        push_tensor(entries, blob, format!("{prefix}{p}.bias"), layer.bias.len(), 1, &layer.bias);
    }
    for (i, head) in net.value_heads.iter().enumerate() {
        push_tensor(entries, blob, format!("{prefix}head_{i}.w"), head.w.len(), 1, &head.w);
        push_tensor(entries, blob, format!("{prefix}head_{i}.b"), 1, 1, &[head.b]);
    }
    Ok(())
}

fn emit_lora(
    expert: &LoraExpert,
    prefix: &str,
    entries: &mut Vec<TensorEntry>,
    blob: &mut Vec<f32>,
) {
    for (path, pair) in &expert.modules {
        push_tensor(
            entries,
            blob,
            format!("{prefix}{path}.down"),
            pair.down.rows(),
            pair.down.cols(),
            pair.down.data(),
        );
        push_tensor(
            entries,
            blob,
            format!("{prefix}{path}.up"),
            pair.up.rows(),
            pair.up.cols(),
            pair.up.data(),
        );
    }
}

fn emit_router(
    router: &RouterExpert,
    prefix: &str,
    entries: &mut Vec<TensorEntry>,
    blob: &mut Vec<f32>,
) {
    for (path, layer) in &router.modules {
        push_tensor(
            entries,
            blob,
            format!("{prefix}{path}.weight"),
            layer.weight.rows(),
            layer.weight.cols(),
            layer.weight.data(),
        );
        push_tensor(entries, blob, format!("{prefix}{path}.bias"), layer.bias.len(), 1, &layer.bias);
    }
}

fn encode(artifact: &Artifact, seed: u64) -> Result<(Manifest, Vec<f32>)> {
    let mut manifest = blank_manifest(artifact.kind(), seed);
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    match artifact {
        Artifact::Dense(net) => {
            emit_dense(net, "", &mut entries, &mut blob)?;
        }
        Artifact::Lora(e) => {
            manifest.id = Some(e.id.clone());
            manifest.preference = Some(e.preference.weights().to_vec());
            manifest.rank = Some(e.rank);
            manifest.rescale = Some(e.rescale);
            emit_lora(e, "", &mut entries, &mut blob);
        }
        Artifact::Router(r) => {
            manifest.id = Some(r.id.clone());
            manifest.preference = Some(r.preference.weights().to_vec());
            manifest.assigned = Some(r.assigned.clone());
            emit_router(r, "", &mut entries, &mut blob);
        }
        Artifact::Model(m) => {
            emit_dense(m.base(), "base.", &mut entries, &mut blob)?;
            for e in m.lora_registry() {
                manifest.registry.push(RegistryEntry {
                    id: e.id.clone(),
                    kind: "lora".into(),
                    preference: e.preference.weights().to_vec(),
                    rank: Some(e.rank),
                    rescale: Some(e.rescale),
                    assigned: None,
                });
                emit_lora(e, &format!("lora.{}.", e.id), &mut entries, &mut blob);
            }
            for r in m.router_registry() {
                manifest.registry.push(RegistryEntry {
                    id: r.id.clone(),
                    kind: "router".into(),
                    preference: r.preference.weights().to_vec(),
                    rank: None,
                    rescale: None,
                    assigned: Some(r.assigned.clone()),
                });
                emit_router(r, &format!("router.{}.", r.id), &mut entries, &mut blob);
            }
        }
    }
    manifest.tensors = entries;
    Ok((manifest, blob))
}

type TensorIter = std::iter::Peekable<std::vec::IntoIter<(TensorEntry, Vec<f32>)>>;

fn next_tensor(
    it: &mut TensorIter,
    prefix: &str,
    suffix: &str,
) -> Result<(String, TensorEntry, Vec<f32>)> {
    let Some((entry, data)) = it.next() else {
        return Err(corrupt(format!("missing tensor {prefix}*{suffix}")));
    };
    let Some(stem) = entry.name.strip_prefix(prefix).and_then(|s| s.strip_suffix(suffix)) else {
        return Err(corrupt(format!(
            "unexpected tensor {} while reading {prefix}*{suffix}",
            entry.name
        )));
    };
    Ok((stem.to_string(), entry, data))
}

fn peek_prefixed(it: &mut TensorIter, prefix: &str) -> bool {
    it.peek().is_some_and(|(e, _)| e.name.starts_with(prefix))
}

fn matrix(entry: &TensorEntry, data: Vec<f32>) -> Result<DenseMatrix> {
    DenseMatrix::from_vec(entry.rows, entry.cols, data)
        .map_err(|e| corrupt(format!("tensor {}: {e}", entry.name)))
}

fn read_dense(it: &mut TensorIter, prefix: &str) -> Result<PolicyNetwork> {
    let mut layers = Vec::new();
    for _ in 0..2 {
        let (module, we, wd) = next_tensor(it, prefix, ".weight")?;
        let w = matrix(&we, wd)?;
        let (bmod, be, bd) = next_tensor(it, prefix, ".bias")?;
        if bmod != module || be.cols != 1 || be.rows != w.rows() {
            return Err(corrupt(format!("bias of module {module} is misshapen or misplaced")));
        }
        layers.push(
            PluginLinear::new(module, w, bd).map_err(|e| corrupt(format!("layer: {e}")))?,
        );
    }
    let head_prefix = format!("{prefix}head_");
    let mut heads = Vec::new();
    while peek_prefixed(it, &head_prefix) {
        let (hname, we, wd) = next_tensor(it, prefix, ".w")?;
        if we.cols != 1 {
            return Err(corrupt(format!("head tensor {hname} must be a column")));
        }
        let (bname, be, bd) = next_tensor(it, prefix, ".b")?;
        if bname != hname || be.rows != 1 || be.cols != 1 {
            return Err(corrupt(format!("head {hname} bias is misshapen or misplaced")));
        }
        heads.push(ValueHead { w: wd, b: bd[0] });
    }
    PolicyNetwork::from_parts(layers, heads).map_err(|e| corrupt(format!("network: {e}")))
}

fn read_lora(
    it: &mut TensorIter,
    prefix: &str,
    id: String,
    preference: PreferenceVector,
    rank: usize,
    rescale: f64,
) -> Result<LoraExpert> {
    let mut modules = BTreeMap::new();
    while if prefix.is_empty() { it.peek().is_some() } else { peek_prefixed(it, prefix) } {
        let (module, de, dd) = next_tensor(it, prefix, ".down")?;
        let down = matrix(&de, dd)?;
        let (umod, ue, ud) = next_tensor(it, prefix, ".up")?;
        if umod != module {
            return Err(corrupt(format!("up factor for {module} is misplaced")));
        }
        let up = matrix(&ue, ud)?;
        if down.rows() != rank || up.cols() != rank {
            return Err(corrupt(format!("module {module} factors disagree with rank {rank}")));
        }
        modules.insert(module, LoraPair { down, up });
    }
    if modules.is_empty() {
        return Err(corrupt(format!("expert {id} has no modules")));
    }
    Ok(LoraExpert { id, preference, rank, rescale, modules })
}

fn read_router(
    it: &mut TensorIter,
    prefix: &str,
    id: String,
    preference: PreferenceVector,
    assigned: Vec<String>,
) -> Result<RouterExpert> {
    let mut modules = BTreeMap::new();
    while if prefix.is_empty() { it.peek().is_some() } else { peek_prefixed(it, prefix) } {
        let (module, we, wd) = next_tensor(it, prefix, ".weight")?;
        let weight = matrix(&we, wd)?;
        let (bmod, be, bd) = next_tensor(it, prefix, ".bias")?;
        if bmod != module || be.cols != 1 {
            return Err(corrupt(format!("scorer bias for {module} is misplaced")));
        }
        if weight.rows() != assigned.len() || bd.len() != assigned.len() {
            return Err(corrupt(format!(
                "scorer for {module} emits {} scores for {} assigned experts",
                weight.rows(),
                assigned.len()
            )));
        }
        modules.insert(module, RouterLayer { weight, bias: bd });
    }
    if modules.is_empty() {
        return Err(corrupt(format!("router {id} has no scorers")));
    }
    Ok(RouterExpert { id, preference, assigned, modules })
}

fn manifest_preference(p: &Option<Vec<f64>>) -> Result<PreferenceVector> {
    let w = p.as_ref().ok_or_else(|| corrupt("missing preference"))?;
    PreferenceVector::new(w.clone()).map_err(|e| corrupt(format!("preference: {e}")))
}

fn decode(manifest: Manifest, tensors: Vec<Vec<f32>>) -> Result<Artifact> {
    let items: Vec<(TensorEntry, Vec<f32>)> =
        manifest.tensors.iter().cloned().zip(tensors).collect();
    let mut it = items.into_iter().peekable();
    let artifact = match manifest.kind.as_str() {
        KIND_DENSE => Artifact::Dense(read_dense(&mut it, "")?),
        KIND_LORA => {
            let id = manifest.id.clone().ok_or_else(|| corrupt("lora checkpoint missing id"))?;
            let pref = manifest_preference(&manifest.preference)?;
            let rank = manifest.rank.ok_or_else(|| corrupt("lora checkpoint missing rank"))?;
            let rescale =
                manifest.rescale.ok_or_else(|| corrupt("lora checkpoint missing rescale"))?;
            Artifact::Lora(read_lora(&mut it, "", id, pref, rank, rescale)?)
        }
        KIND_ROUTER => {
            let id =
                manifest.id.clone().ok_or_else(|| corrupt("router checkpoint missing id"))?;
            let pref = manifest_preference(&manifest.preference)?;
            let assigned = manifest
                .assigned
                .clone()
                .ok_or_else(|| corrupt("router checkpoint missing assigned expert list"))?;
            Artifact::Router(read_router(&mut it, "", id, pref, assigned)?)
        }
        KIND_MODEL => {
            let base = read_dense(&mut it, "base.")?;
            let mut loras = Vec::new();
            let mut routers = Vec::new();
            for entry in &manifest.registry {
                let pref = PreferenceVector::new(entry.preference.clone())
                    .map_err(|e| corrupt(format!("registry preference: {e}")))?;
                match entry.kind.as_str() {
                    "lora" => {
                        let rank = entry
                            .rank
                            .ok_or_else(|| corrupt(format!("entry {} missing rank", entry.id)))?;
                        let rescale = entry.rescale.ok_or_else(|| {
                            corrupt(format!("entry {} missing rescale", entry.id))
                        })?;
                        loras.push(read_lora(
                            &mut it,
                            &format!("lora.{}.", entry.id),
                            entry.id.clone(),
                            pref,
                            rank,
                            rescale,
                        )?);
                    }
                    "router" => {
                        let assigned = entry.assigned.clone().ok_or_else(|| {
                            corrupt(format!("entry {} missing assigned list", entry.id))
                        })?;
                        routers.push(read_router(
                            &mut it,
                            &format!("router.{}.", entry.id),
                            entry.id.clone(),
                            pref,
                            assigned,
                        )?);
                    }
                    other => return Err(corrupt(format!("unknown registry kind {other}"))),
                }
            }
            Artifact::Model(assemble(base, loras, routers)?)
        }
        other => return Err(corrupt(format!("unknown checkpoint kind {other}"))),
    };
    if it.next().is_some() {
        return Err(corrupt("trailing tensors after the artifact"));
    }
    Ok(artifact)
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Task-vector extraction settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Fraction of entries kept by global magnitude pruning, in (0, 1].
    pub keep_fraction: f64,
    /// Truncation rank of every adapter factor pair.
    pub rank: usize,
    /// Rescale candidates scored during calibration; the best one wins.
    pub rescale_candidates: Vec<f64>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        // Candidates 0.8 .. 2.0 in steps of 0.1.
        let rescale_candidates = (8..=20).map(|k| k as f64 / 10.0).collect();
        Self { keep_fraction: crate::adapters::DEFAULT_KEEP_FRACTION, rank: 2, rescale_candidates }
    }
}

/// Which experts to build: preferences of low-rank experts (one-hots are
/// extracted, interior points merged) and of trained routers. Empty lists
/// are filled with the arity defaults by [`RunConfig::normalized`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertPlan {
    pub lora_preferences: Vec<Vec<f64>>,
    pub router_preferences: Vec<Vec<f64>>,
}

/// Optimization settings shared by dense and router training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Width of the policy trunk's hidden layer.
    pub hidden_dim: usize,
    pub ppo: PpoConfig,
    /// Mirror-descent step size for the objective-weight update.
    pub omd_alpha: f64,
    /// Softmax temperature of the smooth worst-case indicator.
    pub omd_smoothing_mu: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { hidden_dim: 8, ppo: PpoConfig::default(), omd_alpha: 0.1, omd_smoothing_mu: 1.0 }
    }
}

/// Evaluation settings for sweeps and gates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Preference grid resolution for two objectives (three objectives use
    /// the fixed 13-point set).
    pub grid_step: f64,
    /// Rollouts per evaluated preference.
    pub episodes: usize,
    /// Methods swept by default; the sweep command can override.
    pub methods: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { grid_step: 0.1, episodes: 200, methods: vec!["hoe".into(), "rs_soup".into()] }
    }
}

/// Everything one end-to-end run needs, loadable from a TOML file. Omitted
/// fields take defaults, so an empty file is a valid canonical run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvSpec,
    pub extraction: ExtractionConfig,
    pub plan: ExpertPlan,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            env: EnvSpec::default(),
            extraction: ExtractionConfig::default(),
            plan: ExpertPlan::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// The expert plan used when a config leaves the plan empty: one extracted
/// expert per objective, one merged interior expert, and one router. The
/// interior and router preferences are fixed per arity (five objectives get
/// a three-way interior expert and a uniform router; other arities get the
/// centroid and a router biased toward the last objective).
pub fn default_plan(n_objectives: usize) -> ExpertPlan {
    let mut lora: Vec<Vec<f64>> = (0..n_objectives)
        .map(|i| (0..n_objectives).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut router = Vec::new();
    if n_objectives >= 2 {
        let n = n_objectives;
        match n {
            2 => {
                lora.push(vec![0.5, 0.5]);
                router.push(vec![0.25, 0.75]);
            }
            3 => {
                lora.push(vec![1.0 / 3.0; 3]);
                router.push(vec![0.25, 0.25, 0.5]);
            }
            5 => {
                lora.push(vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]);
                router.push(vec![0.2; 5]);
            }
            _ => {
                lora.push(vec![1.0 / n as f64; n]);
                router.push(vec![1.0 / n as f64; n]);
            }
        }
    }
    ExpertPlan { lora_preferences: lora, router_preferences: router }
}

impl RunConfig {
    /// Reads and normalizes a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("parse: {e}")))?;
        cfg.normalized()
    }

    /// Fills an empty expert plan with the arity default and validates
    /// everything.
    pub fn normalized(mut self) -> Result<Self> {
        let defaults = default_plan(self.env.n_objectives);
        if self.plan.lora_preferences.is_empty() {
            self.plan.lora_preferences = defaults.lora_preferences;
        }
        if self.plan.router_preferences.is_empty() {
            self.plan.router_preferences = defaults.router_preferences;
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        make_env(&self.env).map_err(|e| Error::InvalidConfig(format!("env: {e}")))?;
        self.training.ppo.validate()?;
        if self.training.hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be positive".into()));
        }
        if !(self.training.omd_alpha > 0.0 && self.training.omd_alpha.is_finite()) {
            return Err(Error::InvalidConfig("omd_alpha must be positive".into()));
        }
        if !(self.training.omd_smoothing_mu > 0.0 && self.training.omd_smoothing_mu.is_finite()) {
            return Err(Error::InvalidConfig("omd_smoothing_mu must be positive".into()));
        }
        if !(self.extraction.keep_fraction > 0.0 && self.extraction.keep_fraction <= 1.0) {
            return Err(Error::InvalidConfig("keep_fraction outside (0, 1]".into()));
        }
        if self.extraction.rank == 0 {
            return Err(Error::InvalidConfig("rank must be positive".into()));
        }
        if self.extraction.rescale_candidates.is_empty()
            || self.extraction.rescale_candidates.iter().any(|&c| !(c.is_finite() && c > 0.0))
        {
            return Err(Error::InvalidConfig("rescale_candidates must be positive".into()));
        }
        if self.eval.episodes == 0 {
            return Err(Error::InvalidConfig("eval.episodes must be positive".into()));
        }
        for m in &self.eval.methods {
            if !matches!(m.as_str(), "hoe" | "rs_soup" | "mod_fuse" | "morlhf") {
                return Err(Error::InvalidConfig(format!("unknown sweep method {m}")));
            }
        }
        if self.eval.methods.is_empty() {
            return Err(Error::InvalidConfig("eval.methods is empty".into()));
        }

        let n = self.env.n_objectives;
        let lora = self.lora_plan()?;
        for i in 0..n {
            let hot = PreferenceVector::one_hot(n, i).expect("valid one-hot");
            let count = lora.iter().filter(|p| p.coincides_with(&hot)).count();
            if count != 1 {
                return Err(Error::InvalidConfig(format!(
                    "plan must contain the one-hot preference for objective {i} exactly once"
                )));
            }
        }
        for (i, a) in lora.iter().enumerate() {
            for b in lora.iter().skip(i + 1) {
                if a.coincides_with(b) {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate expert preference {:?}",
                        a.weights()
                    )));
                }
            }
        }
        self.router_plan()?;
        Ok(())
    }

    pub fn lora_plan(&self) -> Result<Vec<PreferenceVector>> {
        parse_plan(&self.plan.lora_preferences, self.env.n_objectives, "lora")
    }

    pub fn router_plan(&self) -> Result<Vec<PreferenceVector>> {
        parse_plan(&self.plan.router_preferences, self.env.n_objectives, "router")
    }
}

fn parse_plan(raw: &[Vec<f64>], n: usize, what: &str) -> Result<Vec<PreferenceVector>> {
    raw.iter()
        .map(|w| {
            let p = PreferenceVector::new(w.clone())
                .map_err(|e| Error::InvalidConfig(format!("{what} plan: {e}")))?;
            if p.dim() != n {
                return Err(Error::InvalidConfig(format!(
                    "{what} plan entry has {} objectives, env has {n}",
                    p.dim()
                )));
            }
            Ok(p)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sweep CSV
// ---------------------------------------------------------------------------

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Writes a sweep report as CSV: method, seed, episodes, preference
/// components, mean rewards, linear-scalarized value, and worst-case value,
/// floats at nine significant digits. Output is deterministic byte-for-byte.
pub fn write_sweep_csv<W: Write>(mut w: W, report: &SweepReport) -> Result<()> {
    let n = report.z_star.len();
    let mut header = String::from("method,seed,episodes");
    for i in 0..n {
        header.push_str(&format!(",lambda_{i}"));
    }
    for i in 0..n {
        header.push_str(&format!(",reward_{i}"));
    }
    header.push_str(",linear,tch\n");
    w.write_all(header.as_bytes()).map_err(|e| Error::Io(format!("csv: {e}")))?;
    for p in &report.points {
        let mut row = format!("{},{},{}", p.method, p.seed, p.episodes);
        for l in p.preference.weights() {
            row.push(',');
            row.push_str(&sig9(*l));
        }
        for r in &p.mean_rewards {
            row.push(',');
            row.push_str(&sig9(*r));
        }
        row.push(',');
        row.push_str(&sig9(p.scalarized()?));
        row.push(',');
        row.push_str(&sig9(point_tch(p, &report.z_star)?));
        row.push('\n');
        w.write_all(row.as_bytes()).map_err(|e| Error::Io(format!("csv: {e}")))?;
    }
    Ok(())
}

/// Parses sweep CSV back into points (the two derived columns are dropped;
/// they are recomputable).
pub fn read_sweep_csv<R: BufRead>(r: R) -> Result<Vec<ParetoPoint>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty sweep csv".into()))?
        .map_err(|e| Error::Io(format!("csv: {e}")))?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    let n = cols.iter().filter(|c| c.starts_with("lambda_")).count();
    if n == 0 || cols.len() != 5 + 2 * n {
        return Err(Error::InvalidInput(format!("unrecognized sweep csv header: {header}")));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Io(format!("csv: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::InvalidInput(format!(
                "csv row {} has {} fields, header has {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        let bad = |what: &str| Error::InvalidInput(format!("csv row {}: bad {what}", lineno + 2));
        let seed: u64 = fields[1].parse().map_err(|_| bad("seed"))?;
        let episodes: usize = fields[2].parse().map_err(|_| bad("episodes"))?;
        let mut lambda = Vec::with_capacity(n);
        for i in 0..n {
            lambda.push(fields[3 + i].parse::<f64>().map_err(|_| bad("preference"))?);
        }
        let mut rewards = Vec::with_capacity(n);
        for i in 0..n {
            rewards.push(fields[3 + n + i].parse::<f64>().map_err(|_| bad("reward"))?);
        }
        out.push(ParetoPoint {
            preference: PreferenceVector::new(lambda)
                .map_err(|e| Error::InvalidInput(format!("csv row {}: {e}", lineno + 2)))?,
            mean_rewards: rewards,
            episodes,
            method: fields[0].to_string(),
            seed,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Frontier SVG
// ---------------------------------------------------------------------------

const SVG_PALETTE: [&str; 6] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];

/// Renders the two-objective frontier comparison as a standalone SVG: every
/// point as a dot and one polyline per method tracing its non-dominated
/// front.
pub fn render_frontier_svg(report: &SweepReport) -> Result<String> {
    if report.z_star.len() != 2 {
        return Err(Error::InvalidInput(
            "frontier plots are drawn for exactly two objectives".into(),
        ));
    }
    let (width, height) = (640.0, 480.0);
    let (ml, mr, mt, mb) = (64.0, 24.0, 44.0, 56.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);

    let mut methods: Vec<String> = Vec::new();
    for p in &report.points {
        if !methods.contains(&p.method) {
            methods.push(p.method.clone());
        }
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &report.points {
        x0 = x0.min(p.mean_rewards[0]);
        x1 = x1.max(p.mean_rewards[0]);
        y0 = y0.min(p.mean_rewards[1]);
        y1 = y1.max(p.mean_rewards[1]);
    }
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let padx = 0.06 * (x1 - x0);
    let pady = 0.06 * (y1 - y0);
    x0 -= padx;
    x1 += padx;
    y0 -= pady;
    y1 += pady;
    let sx = |v: f64| ml + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| mt + ph - (v - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" font-size=\"15\" fill=\"#111111\">Frontier comparison \
         (episodes {}, seed {})</text>\n",
        ml, report.episodes, report.seed
    ));

    // Axes and ticks.
    svg.push_str(&format!(
        "  <line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#444444\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    ));
    svg.push_str(&format!(
        "  <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"#444444\"/>\n",
        mt + ph
    ));
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let px = sx(fx);
        let py = sy(fy);
        svg.push_str(&format!(
            "  <line x1=\"{px:.1}\" y1=\"{}\" x2=\"{px:.1}\" y2=\"{}\" stroke=\"#444444\"/>\n",
            mt + ph,
            mt + ph + 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{px:.1}\" y=\"{}\" font-size=\"11\" fill=\"#333333\" \
             text-anchor=\"middle\">{fx:.2}</text>\n",
            mt + ph + 18.0
        ));
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{py:.1}\" x2=\"{ml}\" y2=\"{py:.1}\" stroke=\"#444444\"/>\n",
            ml - 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{:.1}\" font-size=\"11\" fill=\"#333333\" \
             text-anchor=\"end\">{fy:.2}</text>\n",
            ml - 8.0,
            py + 4.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"#111111\" \
         text-anchor=\"middle\">objective 0 return</text>\n",
        ml + pw / 2.0,
        height - 14.0
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" font-size=\"12\" fill=\"#111111\" \
         transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">objective 1 return</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0
    ));

    for (mi, method) in methods.iter().enumerate() {
        let color = SVG_PALETTE[mi % SVG_PALETTE.len()];
        let mine: Vec<ParetoPoint> =
            report.points.iter().filter(|p| &p.method == method).cloned().collect();
        let mut front = pareto_front(&mine)?;
        front.sort_by(|a, b| {
            a.mean_rewards[0]
                .partial_cmp(&b.mean_rewards[0])
                .unwrap()
                .then(b.mean_rewards[1].partial_cmp(&a.mean_rewards[1]).unwrap())
        });
        let pts: Vec<String> = front
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.mean_rewards[0]), sy(p.mean_rewards[1])))
            .collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            pts.join(" ")
        ));
        for p in &mine {
            svg.push_str(&format!(
                "  <circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.2\" fill=\"{color}\" \
                 fill-opacity=\"0.85\"/>\n",
                sx(p.mean_rewards[0]),
                sy(p.mean_rewards[1])
            ));
        }
        let ly = mt + 14.0 + 18.0 * mi as f64;
        svg.push_str(&format!(
            "  <rect x=\"{}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            ml + pw - 120.0,
            ly - 10.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{ly:.1}\" font-size=\"12\" fill=\"#111111\">{method}</text>\n",
            ml + pw - 102.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

// ---------------------------------------------------------------------------
// Calibration report
// ---------------------------------------------------------------------------

/// Rescale calibration outcome for one expert.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub id: String,
    pub preference: Vec<f64>,
    pub candidates: Vec<f64>,
    /// Greedy scalarized return measured at each candidate.
    pub scores: Vec<f64>,
    pub chosen: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub experts: Vec<CalibrationEntry>,
}

pub fn write_calibration(path: &Path, report: &CalibrationReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::Io(format!("calibration serialization: {e}")))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_calibration(path: &Path) -> Result<CalibrationReport> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Io(format!("calibration parse: {e}")))
}
