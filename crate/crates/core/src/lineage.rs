//! Family assignment: which stored model should a new model be delta-encoded
//! against?
//!
//! A base declared in the model's metadata wins when it names a registered
//! model with the same tensor layout. Otherwise every registered base with an
//! identical layout is scored by bit distance and the closest one is taken if
//! it falls under the threshold.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::bitdist::{model_bit_distance, DistanceOptions, TensorSource};
use crate::error::{Error, Result};
use crate::par;
use crate::pool::ContentId;
use crate::safetensors::TensorDescriptor;

/// Default bit-distance threshold separating same-family pairs (BF16 scale).
pub const DEFAULT_THRESHOLD: f64 = 4.0;

/// Bumped whenever the extraction patterns below change.
pub const PATTERN_SET_VERSION: u32 = 1;

static FRONT_MATTER_BASE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^base_model\s*:[ \t]*(.*)$").unwrap());
static YAML_LIST_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*-\s*(.+?)\s*$").unwrap());
static BODY_PATTERNS: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        r"(?i)fine-?tuned\s+(?:version\s+)?(?:of|from)\s+\[?`?([A-Za-z0-9][\w.\-]*/[\w.\-]+)",
        r"(?i)base\s+model\s*:?\s*\[?`?([A-Za-z0-9][\w.\-]*/[\w.\-]+)",
    ]
    .iter()
    .map(|p| Regex::new(p).unwrap())
    .collect()
});
static CONCRETE_ID: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^[A-Za-z0-9][A-Za-z0-9_.\-]*/[A-Za-z0-9][A-Za-z0-9_.\-]*$").unwrap()
});

/// What the metadata says about a model's base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum BaseDeclaration {
    /// A specific `org/name` identifier.
    Concrete(String),
    /// Only a family or bare name, e.g. `Llama`.
    Ambiguous(String),
    Absent,
}

impl BaseDeclaration {
    pub fn concrete(&self) -> Option<&str> {
        match self {
            BaseDeclaration::Concrete(s) => Some(s),
            _ => None,
        }
    }

    /// The declared name, concrete or not.
    pub fn name(&self) -> Option<&str> {
        match self {
            BaseDeclaration::Concrete(s) | BaseDeclaration::Ambiguous(s) => Some(s),
            BaseDeclaration::Absent => None,
        }
    }

    fn from_value(raw: &str) -> Self {
        let v = raw.trim().trim_matches(|c| c == '"' || c == '\'').trim();
        if v.is_empty() {
            BaseDeclaration::Absent
        } else if CONCRETE_ID.is_match(v) {
            BaseDeclaration::Concrete(v.to_string())
        } else {
            BaseDeclaration::Ambiguous(v.to_string())
        }
    }
}

/// Looks for a declared base model in config files and model cards.
///
/// Checked in order: `base_model` in README front matter, `base_model` /
/// `base_model_name_or_path` in JSON files, then the card body patterns. The
/// first concrete identifier wins; a bare family name is reported as
/// ambiguous only when nothing concrete is found.
pub fn extract_declared_base(files: &[(String, Vec<u8>)]) -> BaseDeclaration {
    let mut fallback = BaseDeclaration::Absent;
    let mut consider = |decl: BaseDeclaration| -> Option<String> {
        match decl {
            BaseDeclaration::Concrete(s) => Some(s),
            amb @ BaseDeclaration::Ambiguous(_) => {
                if fallback == BaseDeclaration::Absent {
                    fallback = amb;
                }
                None
            }
            BaseDeclaration::Absent => None,
        }
    };

    let cards: Vec<(&str, &str)> = files
        .iter()
        .filter(|(n, _)| n.to_ascii_lowercase().ends_with(".md"))
        .filter_map(|(n, b)| std::str::from_utf8(b).ok().map(|t| (n.as_str(), t)))
        .collect();

    for (_, text) in &cards {
        if let Some(front) = front_matter(text) {
            for decl in front_matter_bases(front) {
                if let Some(s) = consider(decl) {
                    return BaseDeclaration::Concrete(s);
                }
            }
        }
    }

    for (name, bytes) in files.iter().filter(|(n, _)| n.to_ascii_lowercase().ends_with(".json")) {
        let value: serde_json::Value = match serde_json::from_slice(bytes) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("ignoring malformed metadata file {name}: {e}");
                continue;
            }
        };
        for key in ["base_model", "base_model_name_or_path"] {
            let found = match value.get(key) {
                Some(serde_json::Value::String(s)) => vec![s.clone()],
                Some(serde_json::Value::Array(items)) => items
                    .iter()
                    .filter_map(|v| v.as_str().map(str::to_string))
                    .collect(),
                _ => continue,
            };
            for s in found {
                if let Some(s) = consider(BaseDeclaration::from_value(&s)) {
                    return BaseDeclaration::Concrete(s);
                }
            }
        }
    }

    for (_, text) in &cards {
        let body = front_matter(text).map_or(*text, |fm| &text[fm.len()..]);
        for re in BODY_PATTERNS.iter() {
            if let Some(c) = re.captures(body) {
                let id = c[1].trim_end_matches(['.', ')', ']', '`']);
                if let Some(s) = consider(BaseDeclaration::from_value(id)) {
                    return BaseDeclaration::Concrete(s);
                }
            }
        }
    }
    fallback
}

/// The YAML front matter block including its delimiters, if present.
fn front_matter(text: &str) -> Option<&str> {
    let text_start = text.trim_start_matches('\u{feff}');
    let offset = text.len() - text_start.len();
    let rest = text_start.strip_prefix("---")?;
    let rest = rest.strip_prefix("\r\n").or_else(|| rest.strip_prefix('\n'))?;
    let mut pos = 0;
    for line in rest.split_inclusive('\n') {
        if line.trim_end() == "---" {
            let end = offset + 3 + (text_start.len() - 3 - rest.len()) + pos + line.len();
            return Some(&text[..end]);
        }
        pos += line.len();
    }
    None
}

fn front_matter_bases(front: &str) -> Vec<BaseDeclaration> {
    let Some(c) = FRONT_MATTER_BASE.captures(front) else {
        return Vec::new();
    };
    let inline = c[1].trim();
    if let Some(list) = inline.strip_prefix('[') {
        return list
            .trim_end_matches(']')
            .split(',')
            .map(BaseDeclaration::from_value)
            .collect();
    }
    if !inline.is_empty() {
        return vec![BaseDeclaration::from_value(inline)];
    }
    let after = &front[c.get(0).unwrap().end()..];
    after
        .lines()
        .skip(1)
        .map_while(|l| YAML_LIST_ITEM.captures(l).map(|c| BaseDeclaration::from_value(&c[1])))
        .collect()
}

/// Identity and layout summary of a stored model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    /// SHA-256 over the name-sorted `(name, dtype, shape)` list.
    pub tensor_shapes_digest: ContentId,
    pub declared_base: Option<String>,
    pub param_count: u64,
    pub dtype_summary: BTreeMap<String, u64>,
}

impl ModelRecord {
    pub fn from_descriptors(
        model_id: &str,
        descriptors: &[TensorDescriptor],
        declared_base: Option<String>,
    ) -> Self {
        let mut sorted: Vec<&TensorDescriptor> = descriptors.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut canon = String::new();
        let mut dtype_summary = BTreeMap::new();
        let mut param_count = 0;
        for t in sorted {
            let shape: Vec<String> = t.shape.iter().map(u64::to_string).collect();
            canon.push_str(&format!("{}\t{}\t[{}]\n", t.name, t.dtype, shape.join(",")));
            let n = t.num_elements().unwrap_or(0);
            param_count += n;
            *dtype_summary.entry(t.dtype.to_string()).or_insert(0) += n;
        }
        ModelRecord {
            model_id: model_id.to_string(),
            tensor_shapes_digest: ContentId::of(canon.as_bytes()),
            declared_base,
            param_count,
            dtype_summary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub record: ModelRecord,
    /// Ingested with the base flag.
    pub is_base: bool,
    /// Registration order.
    pub seq: u64,
}

/// Registered models that may serve as a base for `model`: flagged bases and
/// models some other model declares as its base, with the same tensor
/// layout, excluding `model` itself, in registration order.
pub fn candidate_bases<'r>(model: &ModelRecord, registry: &'r [RegistryEntry]) -> Vec<&'r RegistryEntry> {
    let declared: std::collections::HashSet<&str> = registry
        .iter()
        .filter_map(|e| e.record.declared_base.as_deref())
        .chain(model.declared_base.as_deref())
        .collect();
    let mut out: Vec<&RegistryEntry> = registry
        .iter()
        .filter(|e| e.record.model_id != model.model_id)
        .filter(|e| e.record.tensor_shapes_digest == model.tensor_shapes_digest)
        .filter(|e| e.is_base || declared.contains(e.record.model_id.as_str()))
        .collect();
    out.sort_by_key(|e| e.seq);
    out
}

/// Opens stored models for distance computation.
pub trait ModelSource: Sync {
    fn open<'a>(&'a self, model_id: &str) -> Result<Box<dyn TensorSource + 'a>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMethod {
    Declared,
    BitDistance,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDistance {
    pub model_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyAssignment {
    pub model_id: String,
    pub base_id: Option<String>,
    pub method: AssignMethod,
    /// Distance to the chosen base, or to the closest rejected candidate.
    pub distance: Option<f64>,
    pub threshold: f64,
    /// Candidates sharing the minimal distance, when more than one did.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ties: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateDistance>,
}

impl FamilyAssignment {
    pub fn none(model_id: &str, threshold: f64) -> Self {
        FamilyAssignment {
            model_id: model_id.to_string(),
            base_id: None,
            method: AssignMethod::None,
            distance: None,
            threshold,
            ties: Vec::new(),
            candidates: Vec::new(),
        }
    }
}

/// Options for distance-based family decisions. FP32 tensors are compared on
/// their top 16 bits so the BF16 threshold applies to both.
pub fn lineage_distance_options(sampling: crate::bitdist::Sampling) -> DistanceOptions {
    DistanceOptions {
        sampling,
        fp32_top16: true,
        ..DistanceOptions::default()
    }
}

/// Picks a base for `model` from `registry`.
pub fn assign_family(
    model: &ModelRecord,
    tensors: &dyn TensorSource,
    registry: &[RegistryEntry],
    source: &dyn ModelSource,
    threshold: f64,
    opts: &DistanceOptions,
) -> Result<FamilyAssignment> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::InvalidParams(format!("threshold must be > 0, got {threshold}")));
    }
    let mut out = FamilyAssignment::none(&model.model_id, threshold);

    if let Some(declared) = &model.declared_base {
        let hit = registry.iter().any(|e| {
            &e.record.model_id == declared
                && e.record.model_id != model.model_id
                && e.record.tensor_shapes_digest == model.tensor_shapes_digest
        });
        if hit {
            out.base_id = Some(declared.clone());
            out.method = AssignMethod::Declared;
            return Ok(out);
        }
    }

    let candidates = candidate_bases(model, registry);
    let scored = par::try_map(&candidates, |entry| {
        let other = source.open(&entry.record.model_id)?;
        match model_bit_distance(tensors, other.as_ref(), opts) {
            Ok(r) => Ok(Some(CandidateDistance {
                model_id: entry.record.model_id.clone(),
                distance: r.distance,
            })),
            Err(Error::NoComparableTensors) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    out.candidates = scored.into_iter().flatten().collect();

    let Some(min) = out.candidates.iter().map(|c| c.distance).min_by(f64::total_cmp) else {
        return Ok(out);
    };
    let mut tied: Vec<&str> = out
        .candidates
        .iter()
        .filter(|c| c.distance == min)
        .map(|c| c.model_id.as_str())
        .collect();
    tied.sort_unstable();
    let chosen = tied[0].to_string();
    if tied.len() > 1 {
        out.ties = tied.into_iter().map(str::to_string).collect();
    }
    out.distance = Some(min);
    if min < threshold {
        out.base_id = Some(chosen);
        out.method = AssignMethod::BitDistance;
    }
    Ok(out)
}

/// A model taking part in similarity-graph construction.
pub struct GraphNode<'a> {
    pub model_id: String,
    pub shapes_digest: ContentId,
    pub source: &'a dyn TensorSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub distance: f64,
}

/// Undirected edges between layout-compatible models closer than
/// `threshold`. Bit-identical pairs (distance 0) are always connected.
pub fn build_similarity_graph(
    nodes: &[GraphNode<'_>],
    threshold: f64,
    opts: &DistanceOptions,
) -> Result<Vec<Edge>> {
    let mut pairs = Vec::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            if nodes[i].shapes_digest == nodes[j].shapes_digest {
                pairs.push((i, j));
            }
        }
    }
    let scored = par::try_map(&pairs, |&(i, j)| {
        match model_bit_distance(nodes[i].source, nodes[j].source, opts) {
            Ok(r) => Ok(Some(r.distance)),
            Err(Error::NoComparableTensors) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    Ok(pairs
        .into_iter()
        .zip(scored)
        .filter_map(|((i, j), d)| {
            let d = d?;
            (d < threshold || d == 0.0).then(|| Edge {
                a: nodes[i].model_id.clone(),
                b: nodes[j].model_id.clone(),
                distance: d,
            })
        })
        .collect())
}

/// Edge list as `a<TAB>b<TAB>distance` lines.
pub fn edges_to_tsv(edges: &[Edge]) -> String {
    edges
        .iter()
        .map(|e| format!("{}\t{}\t{:.6}\n", e.a, e.b, e.distance))
        .collect()
}

/// Connected components of the graph, each sorted, ordered by first member.
pub fn components(ids: &[String], edges: &[Edge]) -> Vec<Vec<String>> {
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in edges {
        if let (Some(&a), Some(&b)) = (index.get(e.a.as_str()), index.get(e.b.as_str())) {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(id.clone());
    }
    let mut out: Vec<Vec<String>> = groups.into_values().collect();
    for g in &mut out {
        g.sort();
    }
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Classification metrics for each threshold over labeled `(distance,
/// same_family)` pairs. A pair is predicted same-family when its distance is
/// below the threshold. Undefined ratios are reported as 0.
pub fn threshold_sweep(labeled: &[(f64, bool)], thresholds: &[f64]) -> Vec<SweepPoint> {
    thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp, mut tn, mut fneg) = (0u64, 0u64, 0u64, 0u64);
            for &(d, same) in labeled {
                match (d < t, same) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fneg += 1,
                }
            }
            let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fneg);
            SweepPoint {
                threshold: t,
                accuracy: ratio(tp + tn, tp + tn + fp + fneg),
                precision,
                recall,
                f1: if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                },
            }
        })
        .collect()
}
