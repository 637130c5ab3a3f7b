//! Stage cost estimates for every (layer span, submesh) candidate.
//!
//! Spans are identified structurally: two spans whose member layers carry the
//! same signatures share one canonical profile per (mesh, shape). Infeasible
//! candidates (out of memory, or a compute share far from the submesh's
//! capacity share) are pruned before any timing is computed, so the number of
//! timing computations equals the number of distinct feasible keys.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{enumerate_submeshes, ClusterSpec, MeshShape, Submesh};
use crate::model_graph::LayerSequence;

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("no feasible stage candidate; tightest violation: {0}")]
    NoFeasible(String),
    #[error("profile override for unknown mesh `{0}`")]
    UnknownMesh(String),
    #[error("profile override for `{mesh}` uses shape {shape}, which the mesh cannot form")]
    UnknownShape { mesh: String, shape: MeshShape },
    #[error("profile override signature `{0}` matches no layer span")]
    UnknownSignature(String),
    #[error("profile override `{key}`: {reason}")]
    InvalidOverride { key: String, reason: String },
    #[error("invalid profiler setting: {0}")]
    Config(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing profile overrides: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilerConfig {
    /// Backward / forward compute ratio.
    pub beta: f64,
    /// Achieved fraction of peak FLOP/s.
    pub efficiency: f64,
    /// Collective overhead factor for stages spanning several devices.
    pub alpha: f64,
    /// Imbalance ratio: compute share over capacity share must lie in `[1/rho, rho]`.
    pub rho: f64,
    /// Bytes held per parameter byte (weights, gradients, optimizer state).
    pub param_memory_factor: f64,
    /// Share one profile among structurally identical candidates.
    pub dedup: bool,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            efficiency: 0.5,
            alpha: 0.0,
            rho: 3.0,
            param_memory_factor: 8.0,
            dedup: true,
        }
    }
}

impl ProfilerConfig {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.beta) {
            return Err(ProfileError::Config(format!("beta = {}", self.beta)));
        }
        if !(positive(self.efficiency) && self.efficiency <= 1.0) {
            return Err(ProfileError::Config(format!("efficiency = {}", self.efficiency)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(ProfileError::Config(format!("alpha = {}", self.alpha)));
        }
        if !(self.rho >= 1.0) {
            return Err(ProfileError::Config(format!("rho = {}", self.rho)));
        }
        if !(self.param_memory_factor.is_finite() && self.param_memory_factor >= 0.0) {
            return Err(ProfileError::Config(format!(
                "param_memory_factor = {}",
                self.param_memory_factor
            )));
        }
        Ok(())
    }
}

/// Layers `start..end` (0-based, half-open).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerSpan {
    pub start: usize,
    pub end: usize,
}

impl LayerSpan {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start < end, "empty layer span {start}..{end}");
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

impl fmt::Display for LayerSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start + 1, self.end)
    }
}

/// Aggregated costs of a layer span.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCandidate {
    pub span: LayerSpan,
    pub flops: f64,
    pub param_bytes: f64,
    /// Sum of the output activation sizes of the member layers.
    pub activation_bytes: f64,
}

impl StageCandidate {
    pub fn from_layers(layers: &LayerSequence, span: LayerSpan) -> Self {
        let members = &layers.layers[span.start..span.end];
        Self {
            span,
            flops: members.iter().map(|l| l.flops).sum(),
            param_bytes: members.iter().map(|l| l.param_bytes).sum(),
            activation_bytes: members.iter().map(|l| l.boundary_bytes).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageMeshProfile {
    /// `t_f + t_b` per microbatch.
    pub t: f64,
    pub t_f: f64,
    pub t_b: f64,
    /// Resident bytes per device independent of in-flight microbatches.
    pub mem_p: f64,
    /// Bytes per device per in-flight microbatch.
    pub mem_a: f64,
}

/// Memory terms of a candidate; they alone decide OOM pruning.
pub fn analytic_memory(cand: &StageCandidate, devices: u32, cfg: &ProfilerConfig) -> (f64, f64) {
    let n = devices as f64;
    (
        cand.param_bytes * cfg.param_memory_factor / n,
        2.0 * cand.activation_bytes / n,
    )
}

/// Proportional compute model: perfect tensor-parallel scaling plus an
/// optional collective overhead when the stage spans several devices.
pub fn analytic_profile(
    cand: &StageCandidate,
    sub: &Submesh,
    cluster: &ClusterSpec,
    cfg: &ProfilerConfig,
) -> StageMeshProfile {
    let mesh = &cluster.meshes[sub.mesh];
    let n = sub.device_count();
    let mut t_f = cand.flops / (n as f64 * mesh.peak_flops * cfg.efficiency);
    if n > 1 && cfg.alpha > 0.0 {
        let bw = if sub.shape.hosts == 1 {
            mesh.intra_host_bw
        } else {
            mesh.inter_host_bw
        };
        t_f += cfg.alpha * cand.activation_bytes / bw;
    }
    let t_b = cfg.beta * t_f;
    let (mem_p, mem_a) = analytic_memory(cand, n, cfg);
    StageMeshProfile {
        t: t_f + t_b,
        t_f,
        t_b,
        mem_p,
        mem_a,
    }
}

/// A measured replacement for one canonical profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOverride {
    /// Member-layer signatures joined with `|`.
    pub signature: String,
    pub mesh: String,
    pub shape: MeshShape,
    pub t: f64,
    /// Forward share of `t`; defaults to the configured beta split.
    #[serde(default)]
    pub t_f: Option<f64>,
    #[serde(default)]
    pub mem_p: Option<f64>,
    #[serde(default)]
    pub mem_a: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OverrideFile {
    #[serde(default)]
    profile: Vec<OverrideRow>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OverrideRow {
    signature: String,
    mesh: String,
    shape: [u32; 2],
    t: f64,
    t_f: Option<f64>,
    mem_p: Option<f64>,
    mem_a: Option<f64>,
}

pub fn parse_profile_overrides(text: &str) -> Result<Vec<ProfileOverride>, ProfileError> {
    let file: OverrideFile = toml::from_str(text)?;
    let rows = file
        .profile
        .into_iter()
        .map(|r| ProfileOverride {
            signature: r.signature,
            mesh: r.mesh,
            shape: MeshShape::new(r.shape[0], r.shape[1]),
            t: r.t,
            t_f: r.t_f,
            mem_p: r.mem_p,
            mem_a: r.mem_a,
        })
        .collect::<Vec<_>>();
    for o in &rows {
        o.check()?;
    }
    Ok(rows)
}

pub fn import_profiles(path: impl AsRef<Path>) -> Result<Vec<ProfileOverride>, ProfileError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_profile_overrides(&text)
}

impl ProfileOverride {
    fn key(&self) -> String {
        format!("{}@{}{}", self.signature, self.mesh, self.shape)
    }

    fn check(&self) -> Result<(), ProfileError> {
        let bad = |reason: String| ProfileError::InvalidOverride {
            key: self.key(),
            reason,
        };
        if !(self.t.is_finite() && self.t > 0.0) {
            return Err(bad(format!("t must be positive, got {}", self.t)));
        }
        if let Some(t_f) = self.t_f {
            if !(t_f > 0.0 && t_f < self.t) {
                return Err(bad(format!("t_f must lie in (0, t), got {t_f}")));
            }
        }
        for (name, v) in [("mem_p", self.mem_p), ("mem_a", self.mem_a)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(bad(format!("{name} must be >= 0, got {v}")));
                }
            }
        }
        Ok(())
    }

    fn apply(&self, base: &StageMeshProfile, beta: f64) -> StageMeshProfile {
        let t_f = self.t_f.unwrap_or(self.t / (1.0 + beta));
        StageMeshProfile {
            t: self.t,
            t_f,
            t_b: self.t - t_f,
            mem_p: self.mem_p.unwrap_or(base.mem_p),
            mem_a: self.mem_a.unwrap_or(base.mem_a),
        }
    }
}

/// Per-boundary transfer times for every ordered pair of meshes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCost {
    num_meshes: usize,
    /// Output bytes of each layer but the last.
    pub bytes: Vec<f64>,
    /// `[(from * meshes + to) * (L - 1) + i]`.
    table: Vec<f64>,
}

impl BoundaryCost {
    /// Seconds to move the activation after layer `boundary` (0-based) from a
    /// stage on mesh `from` to a stage on mesh `to`.
    pub fn get(&self, boundary: usize, from: usize, to: usize) -> f64 {
        let n = self.bytes.len();
        self.table[(from * self.num_meshes + to) * n + boundary]
    }

    pub fn num_boundaries(&self) -> usize {
        self.bytes.len()
    }
}

/// `bytes / bandwidth`, plus the cross latency for non-empty transfers between meshes.
pub fn boundary_costs(layers: &LayerSequence, cluster: &ClusterSpec) -> BoundaryCost {
    let l = layers.len();
    let bytes: Vec<f64> = layers.layers[..l.saturating_sub(1)]
        .iter()
        .map(|x| x.boundary_bytes)
        .collect();
    let c = cluster.meshes.len();
    let mut table = Vec::with_capacity(c * c * bytes.len());
    for from in 0..c {
        for to in 0..c {
            let bw = cluster.mesh_pair_bandwidth(from, to);
            let latency = if from == to { 0.0 } else { cluster.cross_latency };
            table.extend(bytes.iter().map(|&b| if b > 0.0 { b / bw + latency } else { 0.0 }));
        }
    }
    BoundaryCost {
        num_meshes: c,
        bytes,
        table,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Identity {
    Signature(u32),
    Span(LayerSpan),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CanonicalKey {
    identity: Identity,
    mesh: usize,
    shape: MeshShape,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    /// Every (span, mesh, shape) triple.
    pub candidates: usize,
    /// Timing computations performed.
    pub canonical: usize,
    /// Feasible candidates served by another candidate's profile.
    pub aliased: usize,
    pub pruned_oom: usize,
    pub pruned_imbalance: usize,
    pub overrides_applied: usize,
}

/// Hash-consed span signatures: span id = cons(prefix span id, last layer id).
#[derive(Debug, Clone, Default)]
struct SignatureTable {
    layer_ids: HashMap<String, u32>,
    layer_names: Vec<String>,
    cons: HashMap<(u32, u32), u32>,
    /// `(prefix or u32::MAX, layer)` per span id.
    cells: Vec<(u32, u32)>,
}

impl SignatureTable {
    fn layer_id(&mut self, sig: &str) -> u32 {
        if let Some(&id) = self.layer_ids.get(sig) {
            return id;
        }
        let id = self.layer_names.len() as u32;
        self.layer_names.push(sig.to_string());
        self.layer_ids.insert(sig.to_string(), id);
        id
    }

    fn cons(&mut self, prefix: u32, layer: u32) -> u32 {
        let next = self.cells.len() as u32;
        let id = *self.cons.entry((prefix, layer)).or_insert(next);
        if id == next {
            self.cells.push((prefix, layer));
        }
        id
    }

    fn lookup(&self, signature: &str) -> Option<u32> {
        let mut prefix = u32::MAX;
        for part in signature.split('|') {
            let layer = *self.layer_ids.get(part)?;
            prefix = *self.cons.get(&(prefix, layer))?;
        }
        Some(prefix)
    }

    fn render(&self, mut id: u32) -> String {
        let mut parts = Vec::new();
        while id != u32::MAX {
            let (prefix, layer) = self.cells[id as usize];
            parts.push(self.layer_names[layer as usize].as_str());
            id = prefix;
        }
        parts.reverse();
        parts.join("|")
    }
}

const NONE: u32 = u32::MAX;

/// `[mesh][shape][start]` feasible `(end, canonical id)` pairs.
type SpanIndex = Vec<Vec<Vec<Vec<(usize, u32)>>>>;

/// Immutable table of feasible stage profiles with a sparse per-(mesh, shape) index.
#[derive(Debug, Clone)]
pub struct ProfileStore {
    num_layers: usize,
    shapes: Vec<Vec<MeshShape>>,
    profiles: Vec<StageMeshProfile>,
    keys: Vec<CanonicalKey>,
    /// `[mesh][shape]` dense `start * L + (end - 1)` to canonical id.
    dense: Vec<Vec<Vec<u32>>>,
    /// `[mesh][shape][start]` feasible `(end, canonical id)` ascending in `end`.
    index: SpanIndex,
    span_sig: Vec<u32>,
    signatures: SignatureTable,
    pub stats: StoreStats,
}

impl ProfileStore {
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_meshes(&self) -> usize {
        self.shapes.len()
    }

    /// Submesh shapes of `mesh`, ascending in device count.
    pub fn shapes(&self, mesh: usize) -> &[MeshShape] {
        &self.shapes[mesh]
    }

    pub fn profiles(&self) -> &[StageMeshProfile] {
        &self.profiles
    }

    pub fn profile_by_id(&self, id: u32) -> &StageMeshProfile {
        &self.profiles[id as usize]
    }

    /// Profile of a feasible candidate, `None` when pruned.
    pub fn lookup(&self, span: LayerSpan, mesh: usize, shape_idx: usize) -> Option<(u32, &StageMeshProfile)> {
        let id = self.dense[mesh][shape_idx][span.start * self.num_layers + span.end - 1];
        (id != NONE).then(|| (id, &self.profiles[id as usize]))
    }

    pub fn lookup_submesh(&self, span: LayerSpan, sub: &Submesh) -> Option<&StageMeshProfile> {
        let idx = self.shapes.get(sub.mesh)?.iter().position(|s| *s == sub.shape)?;
        self.lookup(span, sub.mesh, idx).map(|(_, p)| p)
    }

    /// Feasible `(end, canonical id)` pairs for spans starting at `start`.
    pub fn feasible_from(&self, mesh: usize, shape_idx: usize, start: usize) -> &[(usize, u32)] {
        &self.index[mesh][shape_idx][start]
    }

    pub fn signature(&self, span: LayerSpan) -> String {
        self.signatures.render(self.span_sig[span.start * self.num_layers + span.end - 1])
    }

    /// Sorted, deduplicated `t` over feasible canonical profiles.
    pub fn t_values(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.profiles.iter().map(|p| p.t).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    /// Canonical entries as `(signature, mesh, shape, profile)` rows.
    pub fn dump(&self, cluster: &ClusterSpec) -> Vec<ProfileRow> {
        self.keys
            .iter()
            .zip(&self.profiles)
            .map(|(key, p)| ProfileRow {
                signature: match key.identity {
                    Identity::Signature(id) => self.signatures.render(id),
                    Identity::Span(span) => self.signature(span),
                },
                mesh: cluster.meshes[key.mesh].id.clone(),
                shape: key.shape,
                profile: *p,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub signature: String,
    pub mesh: String,
    pub shape: MeshShape,
    #[serde(flatten)]
    pub profile: StageMeshProfile,
}

struct Violation {
    severity: f64,
    detail: String,
}

impl Violation {
    fn keep_tighter(slot: &mut Option<Violation>, severity: f64, detail: impl FnOnce() -> String) {
        if slot.as_ref().is_none_or(|v| severity < v.severity) {
            *slot = Some(Violation {
                severity,
                detail: detail(),
            });
        }
    }
}

pub fn build_store(
    layers: &LayerSequence,
    cluster: &ClusterSpec,
    cfg: &ProfilerConfig,
    overrides: &[ProfileOverride],
) -> Result<ProfileStore, ProfileError> {
    cfg.validate()?;
    let l = layers.len();
    let mut signatures = SignatureTable::default();
    let layer_ids: Vec<u32> = layers
        .layers
        .iter()
        .map(|x| signatures.layer_id(&x.signature))
        .collect();
    let mut span_sig = vec![NONE; l * l];
    for start in 0..l {
        let mut prefix = NONE;
        for end in start + 1..=l {
            prefix = signatures.cons(prefix, layer_ids[end - 1]);
            span_sig[start * l + end - 1] = prefix;
        }
    }

    let shapes: Vec<Vec<MeshShape>> = cluster.meshes.iter().map(enumerate_submeshes).collect();
    let mut override_map: HashMap<CanonicalKey, &ProfileOverride> = HashMap::new();
    for o in overrides {
        o.check()?;
        let mesh = cluster
            .mesh_index(&o.mesh)
            .map_err(|_| ProfileError::UnknownMesh(o.mesh.clone()))?;
        if !shapes[mesh].contains(&o.shape) {
            return Err(ProfileError::UnknownShape {
                mesh: o.mesh.clone(),
                shape: o.shape,
            });
        }
        let sig = signatures
            .lookup(&o.signature)
            .ok_or_else(|| ProfileError::UnknownSignature(o.signature.clone()))?;
        let identity = Identity::Signature(sig);
        override_map.insert(
            CanonicalKey {
                identity,
                mesh,
                shape: o.shape,
            },
            o,
        );
    }

    let total_flops = layers.total_flops();
    let total_peak = cluster.total_peak();
    let mut stats = StoreStats::default();
    let mut tightest: Option<Violation> = None;
    let mut keys: Vec<CanonicalKey> = Vec::new();
    let mut candidates: Vec<(StageCandidate, Submesh)> = Vec::new();
    let mut key_ids: HashMap<CanonicalKey, u32> = HashMap::new();
    let mut dense: Vec<Vec<Vec<u32>>> = shapes
        .iter()
        .map(|s| vec![vec![NONE; l * l]; s.len()])
        .collect();
    let mut index: SpanIndex = shapes
        .iter()
        .map(|s| vec![vec![Vec::new(); l]; s.len()])
        .collect();

    for start in 0..l {
        for end in start + 1..=l {
            let span = LayerSpan::new(start, end);
            let cand = StageCandidate::from_layers(layers, span);
            let flops_share = cand.flops / total_flops;
            for (mesh, mesh_shapes) in shapes.iter().enumerate() {
                for (si, &shape) in mesh_shapes.iter().enumerate() {
                    stats.candidates += 1;
                    let sub = Submesh { mesh, shape };
                    let sig_key = CanonicalKey {
                        identity: Identity::Signature(span_sig[start * l + end - 1]),
                        mesh,
                        shape,
                    };
                    let key = if cfg.dedup {
                        sig_key
                    } else {
                        CanonicalKey {
                            identity: Identity::Span(span),
                            mesh,
                            shape,
                        }
                    };
                    if let Some(&id) = key_ids.get(&key) {
                        dense[mesh][si][start * l + end - 1] = id;
                        index[mesh][si][start].push((end, id));
                        stats.aliased += 1;
                        continue;
                    }

                    let devices = shape.device_count();
                    let (mut mem_p, mut mem_a) = analytic_memory(&cand, devices, cfg);
                    let ov = override_map.get(&sig_key);
                    if let Some(o) = ov {
                        mem_p = o.mem_p.unwrap_or(mem_p);
                        mem_a = o.mem_a.unwrap_or(mem_a);
                    }
                    let mem_device = cluster.meshes[mesh].mem_device;
                    if mem_p + mem_a > mem_device {
                        stats.pruned_oom += 1;
                        Violation::keep_tighter(&mut tightest, (mem_p + mem_a) / mem_device, || {
                            format!(
                                "memory: layers {span} on {} need {:.3e} B per device, {:.3e} B available",
                                cluster.submesh_label(&sub),
                                mem_p + mem_a,
                                mem_device
                            )
                        });
                        continue;
                    }
                    let cap_share = sub.device_count() as f64 * cluster.meshes[mesh].peak_flops / total_peak;
                    let ratio = flops_share / cap_share;
                    if ratio > cfg.rho || ratio * cfg.rho < 1.0 {
                        stats.pruned_imbalance += 1;
                        let severity = ratio.max(1.0 / ratio) / cfg.rho;
                        Violation::keep_tighter(&mut tightest, severity, || {
                            format!(
                                "imbalance: layers {span} on {} hold {:.1}% of compute on {:.1}% of capacity (rho = {})",
                                cluster.submesh_label(&sub),
                                100.0 * flops_share,
                                100.0 * cap_share,
                                cfg.rho
                            )
                        });
                        continue;
                    }

                    let id = keys.len() as u32;
                    key_ids.insert(key, id);
                    keys.push(key);
                    candidates.push((cand.clone(), sub));
                    dense[mesh][si][start * l + end - 1] = id;
                    index[mesh][si][start].push((end, id));
                }
            }
        }
    }

    if keys.is_empty() {
        let detail = tightest.map_or_else(|| "model has no layers".to_string(), |v| v.detail);
        return Err(ProfileError::NoFeasible(detail));
    }

    let profiles: Vec<StageMeshProfile> = candidates
        .par_iter()
        .zip(keys.par_iter())
        .map(|((cand, sub), key)| {
            let base = analytic_profile(cand, sub, cluster, cfg);
            let sig_key = CanonicalKey {
                identity: Identity::Signature(span_sig[cand.span.start * l + cand.span.end - 1]),
                ..*key
            };
            match override_map.get(&sig_key) {
                Some(o) => o.apply(&base, cfg.beta),
                None => base,
            }
        })
        .collect();
    stats.canonical = profiles.len();
    stats.overrides_applied = candidates
        .iter()
        .zip(&keys)
        .filter(|((cand, _), key)| {
            override_map.contains_key(&CanonicalKey {
                identity: Identity::Signature(span_sig[cand.span.start * l + cand.span.end - 1]),
                ..**key
            })
        })
        .count();

    Ok(ProfileStore {
        num_layers: l,
        shapes,
        profiles,
        keys,
        dense,
        index,
        span_sig,
        signatures,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::DeviceMesh;
    use crate::model_graph::{build_layers, generate_gpt_sequence, GptConfig, Layer};
    use std::collections::HashSet;

    fn mesh(id: &str, hosts: u32, per_host: u32, peak: f64, mem: f64) -> DeviceMesh {
        DeviceMesh {
            id: id.into(),
            hosts,
            devices_per_host: per_host,
            peak_flops: peak,
            mem_device: mem,
            intra_host_bw: 2.5e10,
            inter_host_bw: 2.5e10,
        }
    }

    fn unit_cfg() -> ProfilerConfig {
        ProfilerConfig {
            efficiency: 1.0,
            rho: f64::INFINITY,
            ..ProfilerConfig::default()
        }
    }

    #[test]
    fn analytic_examples() {
        let cluster = ClusterSpec::new(vec![mesh("a", 1, 2, 1e12, 1e12)], 1e9).unwrap();
        let layers = LayerSequence::uniform(2, 3e12, 1e6, 1e6);
        let cand = StageCandidate::from_layers(&layers, LayerSpan::new(0, 2));
        let one = analytic_profile(&cand, &Submesh { mesh: 0, shape: MeshShape::new(1, 1) }, &cluster, &unit_cfg());
        assert_eq!(one.t_f, 6.0);
        assert_eq!(one.t, 18.0);
        assert_eq!(one.t, one.t_f + one.t_b);
        let two = analytic_profile(&cand, &Submesh { mesh: 0, shape: MeshShape::new(1, 2) }, &cluster, &unit_cfg());
        assert_eq!(two.t * 2.0, one.t);
        assert_eq!(two.mem_p * 2.0, one.mem_p);

        let v100 = ClusterSpec::new(vec![mesh("v", 1, 1, 125e12, 1e12)], 1e9).unwrap();
        let a100 = ClusterSpec::new(vec![mesh("a", 1, 1, 312e12, 1e12)], 1e9).unwrap();
        let sub = Submesh { mesh: 0, shape: MeshShape::new(1, 1) };
        let tv = analytic_profile(&cand, &sub, &v100, &unit_cfg()).t;
        let ta = analytic_profile(&cand, &sub, &a100, &unit_cfg()).t;
        assert!((tv / ta - 2.496).abs() < 1e-12);
    }

    #[test]
    fn collective_overhead_uses_link_of_shape() {
        let mut m = mesh("a", 2, 2, 1e12, 1e12);
        m.intra_host_bw = 1e10;
        m.inter_host_bw = 1e9;
        let cluster = ClusterSpec::new(vec![m], 1e9).unwrap();
        let layers = LayerSequence::uniform(1, 1e12, 0.0, 1e9);
        let cand = StageCandidate::from_layers(&layers, LayerSpan::new(0, 1));
        let cfg = ProfilerConfig {
            alpha: 1.0,
            efficiency: 1.0,
            ..ProfilerConfig::default()
        };
        let at = |h, d| analytic_profile(&cand, &Submesh { mesh: 0, shape: MeshShape::new(h, d) }, &cluster, &cfg).t_f;
        assert_eq!(at(1, 1), 1.0);
        assert_eq!(at(1, 2), 0.5 + 0.1);
        assert_eq!(at(2, 2), 0.25 + 1.0);
    }

    #[test]
    fn more_devices_never_slower_without_overhead() {
        let cluster = ClusterSpec::new(vec![mesh("a", 4, 8, 1e12, 1e15)], 1e9).unwrap();
        let layers = LayerSequence::uniform(3, 1e12, 1e6, 1e6);
        let cand = StageCandidate::from_layers(&layers, LayerSpan::new(0, 3));
        let times: Vec<f64> = enumerate_submeshes(&cluster.meshes[0])
            .into_iter()
            .map(|shape| analytic_profile(&cand, &Submesh { mesh: 0, shape }, &cluster, &unit_cfg()).t_f)
            .collect();
        assert!(times.windows(2).all(|w| w[1] <= w[0]));
    }

    /// Brute-force count of distinct (signature string, mesh, shape) keys over feasible candidates.
    fn distinct_keys(layers: &LayerSequence, store: &ProfileStore) -> usize {
        let l = layers.len();
        let mut seen = HashSet::new();
        for start in 0..l {
            for end in start + 1..=l {
                let sig: Vec<&str> = layers.layers[start..end].iter().map(|x| x.signature.as_str()).collect();
                for mesh in 0..store.num_meshes() {
                    for (si, shape) in store.shapes(mesh).iter().enumerate() {
                        if store.lookup(LayerSpan::new(start, end), mesh, si).is_some() {
                            seen.insert((sig.join("|"), mesh, *shape));
                        }
                    }
                }
            }
        }
        seen.len()
    }

    #[test]
    fn repeated_modules_share_profiles() {
        // 4 identical modules of 2 layers each.
        let layers = LayerSequence::from_layers(
            (0..8)
                .map(|i| Layer {
                    op_start: i,
                    op_end: i + 1,
                    flops: if i % 2 == 0 { 1e12 } else { 2e12 },
                    param_bytes: 1e6,
                    boundary_bytes: 1e6,
                    signature: format!("g0[{}:{}]", i % 2, i % 2 + 1),
                })
                .collect(),
        )
        .unwrap();
        let cluster = ClusterSpec::new(vec![mesh("a", 1, 1, 1e12, 1e12)], 1e9).unwrap();
        let store = build_store(&layers, &cluster, &unit_cfg(), &[]).unwrap();
        let a = store.lookup(LayerSpan::new(0, 2), 0, 0).unwrap();
        let b = store.lookup(LayerSpan::new(2, 4), 0, 0).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(store.signature(LayerSpan::new(2, 4)), "g0[0:1]|g0[1:2]");
        assert_eq!(store.stats.canonical, distinct_keys(&layers, &store));
        assert_eq!(store.stats.candidates, 36);
        assert_eq!(store.stats.aliased + store.stats.canonical, 36);

        let plain = build_store(&layers, &cluster, &ProfilerConfig { dedup: false, ..unit_cfg() }, &[]).unwrap();
        assert_eq!(plain.stats.canonical, 36);
        for start in 0..8 {
            for end in start + 1..=8 {
                let span = LayerSpan::new(start, end);
                let x = store.lookup(span, 0, 0).unwrap().1;
                let y = plain.lookup(span, 0, 0).unwrap().1;
                assert_eq!(x.t.to_bits(), y.t.to_bits());
                assert_eq!(x.mem_a.to_bits(), y.mem_a.to_bits());
            }
        }
    }

    #[test]
    fn gpt_dedup_matches_brute_force() {
        let cfg = GptConfig {
            num_blocks: 4,
            hidden_dim: 256,
            seq_len: 128,
            mb_size: 1,
            vocab: 1000,
        };
        let layers = build_layers(&generate_gpt_sequence(&cfg).unwrap(), 2, 2).unwrap();
        let cluster = ClusterSpec::new(vec![mesh("a", 1, 2, 1e12, 1e15)], 1e9).unwrap();
        let store = build_store(&layers, &cluster, &unit_cfg(), &[]).unwrap();
        assert_eq!(store.stats.canonical, distinct_keys(&layers, &store));
        assert!(store.stats.aliased > 0);
    }

    #[test]
    fn oom_and_imbalance_pruning() {
        let layers = LayerSequence::uniform(4, 1e12, 1e9, 1e6);
        // 4 layers x 1e9 param bytes x 8 = 3.2e10 bytes on one device.
        let cluster = ClusterSpec::new(vec![mesh("a", 1, 2, 1e12, 2e10)], 1e9).unwrap();
        let store = build_store(&layers, &cluster, &unit_cfg(), &[]).unwrap();
        assert!(store.lookup(LayerSpan::new(0, 4), 0, 0).is_none());
        assert!(store.lookup(LayerSpan::new(0, 4), 0, 1).is_some());
        assert!(store.stats.pruned_oom > 0);

        let big = ClusterSpec::new(vec![mesh("a", 2, 8, 1e12, 1e15)], 1e9).unwrap();
        let cfg = ProfilerConfig { rho: 2.0, ..unit_cfg() };
        let store = build_store(&layers, &big, &cfg, &[]).unwrap();
        assert!(store.lookup(LayerSpan::new(0, 4), 0, 0).is_none());
        assert!(store.lookup(LayerSpan::new(0, 4), 0, 4).is_some());
        // One layer on all 16 devices is too little work for the capacity.
        assert!(store.lookup(LayerSpan::new(0, 1), 0, 4).is_none());
        assert!(store.stats.pruned_imbalance > 0);
    }

    #[test]
    fn nothing_feasible_reports_tightest() {
        let layers = LayerSequence::uniform(2, 1e12, 1e9, 1e6);
        let cluster = ClusterSpec::new(vec![mesh("a", 1, 2, 1e12, 1e9)], 1e9).unwrap();
        let err = build_store(&layers, &cluster, &unit_cfg(), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("memory") && msg.contains("layers 1-1") && msg.contains("a(1,2)"), "{msg}");
    }

    #[test]
    fn overrides() {
        let layers = LayerSequence::uniform(3, 1e12, 1e6, 1e6);
        let cluster = ClusterSpec::new(vec![mesh("a", 1, 2, 1e12, 1e12)], 1e9).unwrap();
        let base = build_store(&layers, &cluster, &unit_cfg(), &[]).unwrap();
        let empty = parse_profile_overrides("").unwrap();
        let same = build_store(&layers, &cluster, &unit_cfg(), &empty).unwrap();
        assert_eq!(base.profiles(), same.profiles());

        let ov = parse_profile_overrides(
            "[[profile]]\nsignature = \"uniform|uniform\"\nmesh = \"a\"\nshape = [1, 2]\nt = 0.25\n",
        )
        .unwrap();
        let store = build_store(&layers, &cluster, &unit_cfg(), &ov).unwrap();
        assert_eq!(store.stats.overrides_applied, 1);
        for start in 0..3 {
            for end in start + 1..=3 {
                for si in 0..2 {
                    let span = LayerSpan::new(start, end);
                    let got = store.lookup(span, 0, si).unwrap().1;
                    let want = base.lookup(span, 0, si).unwrap().1;
                    if span.len() == 2 && si == 1 {
                        assert_eq!(got.t, 0.25);
                        assert!((got.t_f - 0.25 / 3.0).abs() < 1e-15);
                        assert_eq!(got.mem_p, want.mem_p);
                    } else {
                        assert_eq!(got, want);
                    }
                }
            }
        }

        let bad = |text: &str| {
            parse_profile_overrides(text).and_then(|ov| build_store(&layers, &cluster, &unit_cfg(), &ov))
        };
        assert!(matches!(
            bad("[[profile]]\nsignature = \"uniform\"\nmesh = \"a\"\nshape = [1, 1]\nt = 0.0\n"),
            Err(ProfileError::InvalidOverride { .. })
        ));
        assert!(matches!(
            bad("[[profile]]\nsignature = \"uniform\"\nmesh = \"zz\"\nshape = [1, 1]\nt = 1.0\n"),
            Err(ProfileError::UnknownMesh(_))
        ));
        assert!(matches!(
            bad("[[profile]]\nsignature = \"uniform\"\nmesh = \"a\"\nshape = [1, 4]\nt = 1.0\n"),
            Err(ProfileError::UnknownShape { .. })
        ));
        assert!(matches!(
            bad("[[profile]]\nsignature = \"nope\"\nmesh = \"a\"\nshape = [1, 1]\nt = 1.0\n"),
            Err(ProfileError::UnknownSignature(_))
        ));
        assert!(matches!(bad("[[profile]]\nsignature = 3\n"), Err(ProfileError::Parse(_))));
    }

    #[test]
    fn boundary_cost_examples() {
        let mut v = mesh("v", 1, 2, 125e12, 1e12);
        v.inter_host_bw = 2.5e10;
        let a = mesh("a", 2, 2, 312e12, 1e12);
        let cluster = ClusterSpec::new(vec![v, a], 6.25e8).unwrap();
        let mut layers = LayerSequence::uniform(3, 1e12, 1e6, 6.25e8);
        layers.layers[1].boundary_bytes = 0.0;
        let c = boundary_costs(&layers, &cluster);
        assert_eq!(c.num_boundaries(), 2);
        assert_eq!(c.get(0, 0, 1), 1.0);
        assert_eq!(c.get(0, 1, 0), 1.0);
        assert_eq!(c.get(1, 0, 1), 0.0);
        assert!(c.get(0, 0, 1) >= 40.0 * c.get(0, 0, 0));
        assert!(c.get(0, 0, 1) >= 40.0 * c.get(0, 1, 1));
    }

    #[test]
    fn t_values_sorted_unique() {
        let layers = LayerSequence::uniform(3, 1e12, 1e6, 1e6);
        let cluster = ClusterSpec::new(vec![mesh("a", 1, 2, 1e12, 1e12)], 1e9).unwrap();
        let store = build_store(&layers, &cluster, &unit_cfg(), &[]).unwrap();
        let ts = store.t_values();
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        assert!(ts.len() <= store.stats.canonical);
        // 3 span lengths x 2 shapes, with len 2 on (1,2) equal to len 1 on (1,1).
        assert_eq!(ts.len(), 5);
    }
}
