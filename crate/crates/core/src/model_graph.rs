//! Operator sequences and structural layer construction.
//!
//! The model is a topologically ordered list of operators. Layer construction
//! runs in two passes: [`detect_modules`] splits the sequence into repeated and
//! non-repeated modules, then [`cluster_layers`] cuts every module into a fixed
//! number of flops-balanced layers. Occurrences of the same repeated module get
//! identical cuts, so their layers share signatures and downstream profiling
//! can be deduplicated.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("operator sequence is empty")]
    Empty,
    #[error("operator {index}: {reason}")]
    InvalidOperator { index: usize, reason: String },
    #[error("module {module} [{start}, {end}) has {ops} operators, cannot cut into {requested} layers")]
    Granularity {
        module: usize,
        start: usize,
        end: usize,
        ops: usize,
        requested: usize,
    },
    #[error("occurrences of repeated group {group} disagree on operator costs")]
    InconsistentRepeat { group: usize },
    #[error("layers do not tile the operator sequence at layer {0}")]
    BadLayers(usize),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing model spec: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// GEMM / convolution class.
    Heavy,
    Light,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub index: usize,
    pub kind: OpKind,
    /// Forward FLOPs per microbatch.
    pub flops: f64,
    pub param_bytes: f64,
    /// Output tensor bytes per microbatch.
    pub out_activation_bytes: f64,
    /// Operator type plus tensor dims; two operators are "the same" iff their tags match.
    pub shape_tag: String,
}

/// Operators in topological order with contiguous indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSequence {
    ops: Vec<OperatorNode>,
}

impl OperatorSequence {
    pub fn new(ops: Vec<OperatorNode>) -> Result<Self, ModelError> {
        if ops.is_empty() {
            return Err(ModelError::Empty);
        }
        for (i, op) in ops.iter().enumerate() {
            let bad = |reason: &str| ModelError::InvalidOperator {
                index: i,
                reason: reason.to_string(),
            };
            if op.index != i {
                return Err(bad("indices must be contiguous from 0"));
            }
            for v in [op.flops, op.param_bytes, op.out_activation_bytes] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(bad("costs must be finite and non-negative"));
                }
            }
        }
        Ok(Self { ops })
    }

    pub fn ops(&self) -> &[OperatorNode] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn total_flops(&self) -> f64 {
        self.ops.iter().map(|o| o.flops).sum()
    }

    pub fn total_param_bytes(&self) -> f64 {
        self.ops.iter().map(|o| o.param_bytes).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModuleKind {
    Repeated { group: usize, occurrence: usize },
    NonRepeated,
}

/// Half-open operator range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModuleSpan {
    pub start: usize,
    pub end: usize,
    #[serde(flatten)]
    pub kind: ModuleKind,
}

impl ModuleSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn group(&self) -> Option<usize> {
        match self.kind {
            ModuleKind::Repeated { group, .. } => Some(group),
            ModuleKind::NonRepeated => None,
        }
    }
}

/// Splits `ops` into repeated and non-repeated modules.
///
/// Starting from one non-repeated module covering everything, each round picks
/// the contiguous tag sub-sequence with the most non-overlapping occurrences
/// inside the current non-repeated modules, among those containing at least
/// `z` heavy operators and occurring at least twice. Ties go to the longer
/// pattern, then to the earlier first occurrence. All greedy left-to-right
/// occurrences become repeated modules of a new group.
pub fn detect_modules(ops: &OperatorSequence, z: usize) -> Vec<ModuleSpan> {
    let z = z.max(1);
    let n = ops.len();
    let mut interner: HashMap<&str, u32> = HashMap::new();
    let tags: Vec<u32> = ops
        .ops()
        .iter()
        .map(|o| {
            let next = interner.len() as u32;
            *interner.entry(o.shape_tag.as_str()).or_insert(next)
        })
        .collect();
    let mut heavy_prefix = vec![0usize; n + 1];
    for (i, op) in ops.ops().iter().enumerate() {
        heavy_prefix[i + 1] = heavy_prefix[i] + usize::from(op.kind == OpKind::Heavy);
    }

    // (start, end, group, occurrence) of repeated modules; `free` holds the rest.
    let mut repeated: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut free: Vec<(usize, usize)> = vec![(0, n)];
    let mut next_group = 0;

    while let Some(found) = most_frequent_pattern(&tags, &heavy_prefix, &free, z) {
        let len = found.len;
        for (occ, &pos) in found.occurrences.iter().enumerate() {
            repeated.push((pos, pos + len, next_group, occ));
        }
        let mut rest = Vec::new();
        for &(s, e) in &free {
            let mut cursor = s;
            for &pos in found.occurrences.iter().filter(|&&p| p >= s && p + len <= e) {
                if pos > cursor {
                    rest.push((cursor, pos));
                }
                cursor = pos + len;
            }
            if cursor < e {
                rest.push((cursor, e));
            }
        }
        free = rest;
        next_group += 1;
    }

    let mut spans: Vec<ModuleSpan> = repeated
        .into_iter()
        .map(|(start, end, group, occurrence)| ModuleSpan {
            start,
            end,
            kind: ModuleKind::Repeated { group, occurrence },
        })
        .chain(free.into_iter().map(|(start, end)| ModuleSpan {
            start,
            end,
            kind: ModuleKind::NonRepeated,
        }))
        .collect();
    spans.sort_by_key(|s| s.start);
    spans
}

struct Pattern {
    len: usize,
    occurrences: Vec<usize>,
}

fn most_frequent_pattern(
    tags: &[u32],
    heavy_prefix: &[usize],
    free: &[(usize, usize)],
    z: usize,
) -> Option<Pattern> {
    let longest_free = free.iter().map(|&(s, e)| e - s).max().unwrap_or(0);
    let total_free: usize = free.iter().map(|&(s, e)| e - s).sum();
    let max_len = longest_free.min(total_free / 2);
    // (count, len, first) of the incumbent; bigger count, bigger len, smaller first wins.
    let mut best: Option<(usize, usize, usize, Vec<usize>)> = None;

    for len in 1..=max_len {
        // Bucket windows by content; positions are visited in ascending order.
        let mut buckets: HashMap<&[u32], Vec<usize>> = HashMap::new();
        for &(s, e) in free {
            if e - s < len {
                continue;
            }
            for pos in s..=e - len {
                buckets.entry(&tags[pos..pos + len]).or_default().push(pos);
            }
        }
        let mut any_repeat = false;
        for positions in buckets.into_values() {
            if positions.len() < 2 {
                continue;
            }
            any_repeat |= greedy_disjoint(positions.iter().copied(), len).len() >= 2;
            let qualifying = positions
                .iter()
                .copied()
                .filter(|&p| heavy_prefix[p + len] - heavy_prefix[p] >= z);
            let chosen = greedy_disjoint(qualifying, len);
            if chosen.len() < 2 {
                continue;
            }
            let first = chosen[0];
            let better = match &best {
                None => true,
                Some((c, l, f, _)) => {
                    (chosen.len(), len, std::cmp::Reverse(first)) > (*c, *l, std::cmp::Reverse(*f))
                }
            };
            if better {
                best = Some((chosen.len(), len, first, chosen));
            }
        }
        // Any longer repeated window has a repeated prefix of this length.
        if !any_repeat {
            break;
        }
    }
    best.map(|(_, len, _, occurrences)| Pattern { len, occurrences })
}

/// Left-to-right non-overlapping selection from ascending positions.
fn greedy_disjoint(positions: impl Iterator<Item = usize>, len: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for p in positions {
        if chosen.last().is_none_or(|&last| p >= last + len) {
            chosen.push(p);
        }
    }
    chosen
}

/// A contiguous group of operators treated as one unit by the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub op_start: usize,
    pub op_end: usize,
    pub flops: f64,
    pub param_bytes: f64,
    /// Output bytes of the last operator, i.e. what crosses a cut after this layer.
    pub boundary_bytes: f64,
    pub signature: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSequence {
    pub layers: Vec<Layer>,
    pub module_spans: Vec<ModuleSpan>,
}

impl LayerSequence {
    /// Builds a sequence from explicit layers (one non-repeated module).
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut cursor = 0;
        for (i, l) in layers.iter().enumerate() {
            if l.op_start != cursor || l.op_end <= l.op_start {
                return Err(ModelError::BadLayers(i));
            }
            cursor = l.op_end;
        }
        Ok(Self {
            module_spans: vec![ModuleSpan {
                start: 0,
                end: cursor,
                kind: ModuleKind::NonRepeated,
            }],
            layers,
        })
    }

    /// `count` identical layers, one operator each, sharing a signature.
    pub fn uniform(count: usize, flops: f64, param_bytes: f64, boundary_bytes: f64) -> Self {
        let layers = (0..count)
            .map(|i| Layer {
                op_start: i,
                op_end: i + 1,
                flops,
                param_bytes,
                boundary_bytes,
                signature: "uniform".to_string(),
            })
            .collect();
        let module_spans = (0..count)
            .map(|i| ModuleSpan {
                start: i,
                end: i + 1,
                kind: ModuleKind::Repeated {
                    group: 0,
                    occurrence: i,
                },
            })
            .collect();
        Self {
            layers,
            module_spans,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn total_flops(&self) -> f64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layer sequence serializes")
    }
}

/// Cuts each module into `layers_per_module` contiguous layers minimizing the
/// largest per-layer flops. All occurrences of a repeated group reuse the cut
/// of the first occurrence.
pub fn cluster_layers(
    spans: &[ModuleSpan],
    ops: &OperatorSequence,
    layers_per_module: usize,
) -> Result<LayerSequence, ModelError> {
    let k = layers_per_module.max(1);
    let all = ops.ops();
    let mut group_cuts: HashMap<usize, (usize, Vec<usize>)> = HashMap::new();
    let mut layers = Vec::new();

    for (m, span) in spans.iter().enumerate() {
        if span.len() < k {
            return Err(ModelError::Granularity {
                module: m,
                start: span.start,
                end: span.end,
                ops: span.len(),
                requested: k,
            });
        }
        let module_ops = &all[span.start..span.end];
        let cuts = match span.kind {
            ModuleKind::Repeated { group, .. } => {
                if let Some((first_start, cuts)) = group_cuts.get(&group) {
                    let reference = &all[*first_start..*first_start + span.len()];
                    let same = reference.iter().zip(module_ops).all(|(a, b)| {
                        a.flops == b.flops
                            && a.param_bytes == b.param_bytes
                            && a.out_activation_bytes == b.out_activation_bytes
                    });
                    if !same {
                        return Err(ModelError::InconsistentRepeat { group });
                    }
                    cuts.clone()
                } else {
                    let weights: Vec<f64> = module_ops.iter().map(|o| o.flops).collect();
                    let cuts = min_max_partition(&weights, k);
                    group_cuts.insert(group, (span.start, cuts.clone()));
                    cuts
                }
            }
            ModuleKind::NonRepeated => {
                let weights: Vec<f64> = module_ops.iter().map(|o| o.flops).collect();
                min_max_partition(&weights, k)
            }
        };

        let mut lo = 0;
        for &hi in cuts.iter().chain(std::iter::once(&span.len())) {
            let members = &module_ops[lo..hi];
            let signature = match span.kind {
                ModuleKind::Repeated { group, .. } => format!("g{group}[{lo}:{hi}]"),
                ModuleKind::NonRepeated => format!("u[{}:{}]", span.start + lo, span.start + hi),
            };
            layers.push(Layer {
                op_start: span.start + lo,
                op_end: span.start + hi,
                flops: members.iter().map(|o| o.flops).sum(),
                param_bytes: members.iter().map(|o| o.param_bytes).sum(),
                boundary_bytes: members.last().map_or(0.0, |o| o.out_activation_bytes),
                signature,
            });
            lo = hi;
        }
    }

    Ok(LayerSequence {
        layers,
        module_spans: spans.to_vec(),
    })
}

/// Balanced contiguous partition of `weights` into `parts` non-empty pieces.
/// Returns the interior cut positions (exclusive ends of all but the last piece).
pub fn min_max_partition(weights: &[f64], parts: usize) -> Vec<usize> {
    let n = weights.len();
    assert!(parts >= 1 && parts <= n, "need 1 <= parts <= len");
    let mut prefix = vec![0.0; n + 1];
    for (i, w) in weights.iter().enumerate() {
        prefix[i + 1] = prefix[i] + w;
    }
    // best[j][i]: min over partitions of the first i weights into j pieces.
    let mut best = vec![vec![f64::INFINITY; n + 1]; parts + 1];
    let mut arg = vec![vec![0usize; n + 1]; parts + 1];
    best[0][0] = 0.0;
    for j in 1..=parts {
        for i in j..=n {
            for s in (j - 1)..i {
                let cand = best[j - 1][s].max(prefix[i] - prefix[s]);
                if cand < best[j][i] {
                    best[j][i] = cand;
                    arg[j][i] = s;
                }
            }
        }
    }
    let mut cuts = Vec::with_capacity(parts - 1);
    let mut i = n;
    for j in (2..=parts).rev() {
        i = arg[j][i];
        cuts.push(i);
    }
    cuts.reverse();
    cuts
}

/// Dimensions of a synthetic GPT-style decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GptConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub mb_size: usize,
    pub vocab: usize,
}

const FP16: f64 = 2.0;

impl GptConfig {
    /// Parameter count `V h + S h + blocks (12 h^2 + 13 h) + 2 h` (tied output head).
    pub fn analytic_params(&self) -> f64 {
        let h = self.hidden_dim as f64;
        (self.vocab + self.seq_len) as f64 * h
            + self.num_blocks as f64 * (12.0 * h * h + 13.0 * h)
            + 2.0 * h
    }
}

/// Generates the operator sequence of a GPT-style model: embeddings, then
/// `num_blocks` identical transformer blocks, then the output head. GEMMs are
/// heavy; norms, activations and residual adds are light. All tensors fp16.
pub fn generate_gpt_sequence(cfg: &GptConfig) -> Result<OperatorSequence, ModelError> {
    let GptConfig {
        num_blocks,
        hidden_dim: h,
        seq_len: s,
        mb_size: b,
        vocab: v,
    } = *cfg;
    if [num_blocks, h, s, b, v].contains(&0) {
        return Err(ModelError::Spec("all GPT dimensions must be positive".into()));
    }
    let (hf, sf, bf, vf) = (h as f64, s as f64, b as f64, v as f64);
    let tokens = bf * sf;
    let hidden_act = tokens * hf * FP16;
    let score_act = bf * sf * sf * FP16;

    let mut ops = Vec::new();
    let mut push = |kind, flops: f64, params: f64, out: f64, tag: String| {
        ops.push(OperatorNode {
            index: ops.len(),
            kind,
            flops,
            param_bytes: params * FP16,
            out_activation_bytes: out,
            shape_tag: tag,
        });
    };
    use OpKind::{Heavy, Light};
    let act = format!("{b}x{s}x{h}");

    push(Light, 0.0, vf * hf, hidden_act, format!("embedding[{v}x{h}]"));
    push(Light, 0.0, sf * hf, hidden_act, format!("pos_embedding[{s}x{h}]"));
    push(Light, tokens * hf, 0.0, hidden_act, format!("embed_add[{act}]"));

    for _ in 0..num_blocks {
        push(Light, 5.0 * tokens * hf, 2.0 * hf, hidden_act, format!("layernorm[{act}]"));
        push(
            Heavy,
            2.0 * tokens * hf * 3.0 * hf,
            3.0 * hf * hf + 3.0 * hf,
            3.0 * hidden_act,
            format!("matmul[{b}x{s}x{h}x{}]", 3 * h),
        );
        push(Heavy, 2.0 * bf * sf * sf * hf, 0.0, score_act, format!("bmm_qk[{b}x{s}x{s}x{h}]"));
        push(Light, 5.0 * bf * sf * sf, 0.0, score_act, format!("softmax[{b}x{s}x{s}]"));
        push(Heavy, 2.0 * bf * sf * sf * hf, 0.0, hidden_act, format!("bmm_av[{b}x{s}x{s}x{h}]"));
        push(
            Heavy,
            2.0 * tokens * hf * hf,
            hf * hf + hf,
            hidden_act,
            format!("matmul[{b}x{s}x{h}x{h}]"),
        );
        push(Light, tokens * hf, 0.0, hidden_act, format!("add[{act}]"));
        push(Light, 5.0 * tokens * hf, 2.0 * hf, hidden_act, format!("layernorm[{act}]"));
        push(
            Heavy,
            8.0 * tokens * hf * hf,
            4.0 * hf * hf + 4.0 * hf,
            4.0 * hidden_act,
            format!("matmul[{b}x{s}x{h}x{}]", 4 * h),
        );
        push(Light, 32.0 * tokens * hf, 0.0, 4.0 * hidden_act, format!("gelu[{b}x{s}x{}]", 4 * h));
        push(
            Heavy,
            8.0 * tokens * hf * hf,
            4.0 * hf * hf + hf,
            hidden_act,
            format!("matmul[{b}x{s}x{}x{h}]", 4 * h),
        );
        push(Light, tokens * hf, 0.0, hidden_act, format!("add[{act}]"));
    }

    push(Light, 5.0 * tokens * hf, 2.0 * hf, hidden_act, format!("layernorm[{act}]"));
    push(Heavy, 2.0 * tokens * hf * vf, 0.0, tokens * vf * FP16, format!("lm_head[{b}x{s}x{h}x{v}]"));
    push(Light, 5.0 * tokens * vf, 0.0, bf * 4.0, format!("cross_entropy[{b}x{s}x{v}]"));

    OperatorSequence::new(ops)
}

/// Model input file: either a generator section or an explicit operator list.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[serde(default)]
    gpt: Option<GptConfig>,
    #[serde(default, rename = "op")]
    ops: Vec<OpFile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct OpFile {
    #[serde(default)]
    kind: Option<OpKind>,
    flops: f64,
    #[serde(default)]
    param_bytes: f64,
    #[serde(default)]
    out_activation_bytes: f64,
    shape_tag: String,
    /// Repeat this operator entry `repeat` times (default 1).
    #[serde(default)]
    repeat: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Gpt(GptConfig),
    Ops(OperatorSequence),
}

impl ModelSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = toml::from_str(text)?;
        match (file.gpt, file.ops.is_empty()) {
            (Some(cfg), true) => Ok(ModelSpec::Gpt(cfg)),
            (None, false) => {
                let mut ops = Vec::new();
                for entry in file.ops {
                    // Unspecified kind: anything that does arithmetic counts as heavy.
                    let kind = entry.kind.unwrap_or(if entry.flops > 0.0 {
                        OpKind::Heavy
                    } else {
                        OpKind::Light
                    });
                    for _ in 0..entry.repeat.unwrap_or(1) {
                        ops.push(OperatorNode {
                            index: ops.len(),
                            kind,
                            flops: entry.flops,
                            param_bytes: entry.param_bytes,
                            out_activation_bytes: entry.out_activation_bytes,
                            shape_tag: entry.shape_tag.clone(),
                        });
                    }
                }
                Ok(ModelSpec::Ops(OperatorSequence::new(ops)?))
            }
            (Some(_), false) => Err(ModelError::Spec(
                "give either a [gpt] generator or [[op]] entries, not both".into(),
            )),
            (None, true) => Err(ModelError::Spec("no [gpt] generator and no [[op]] entries".into())),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn operators(&self) -> Result<OperatorSequence, ModelError> {
        match self {
            ModelSpec::Gpt(cfg) => generate_gpt_sequence(cfg),
            ModelSpec::Ops(ops) => Ok(ops.clone()),
        }
    }
}

/// Operator sequence to layer sequence in one call.
pub fn build_layers(
    ops: &OperatorSequence,
    z: usize,
    layers_per_module: usize,
) -> Result<LayerSequence, ModelError> {
    let spans = detect_modules(ops, z);
    cluster_layers(&spans, ops, layers_per_module)
}
