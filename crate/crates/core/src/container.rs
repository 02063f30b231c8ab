//! On-disk container: a JSON manifest plus one little-endian `f32` blob.
//!
//! The blob lives next to the manifest with the extension replaced by
//! `.bin`. Entries are laid out back to back in manifest order; the reader
//! still checks every offset because manifests may be edited by hand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_opt::PatchBatch;
use crate::decomp::{DecomposedLayer, Factor, Factors, SpatialOrder};
use crate::gates::{Gate, GateKind, GateVector, HardConcreteGate, VibGate};
use crate::linalg::Matrix;
use crate::rank_select::RankPlan;
use crate::tensor::Kernel4D;

pub const FORMAT: &str = "conv-compress/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContainerError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("entry '{name}' ends at byte {end} but the blob has {blob_len} bytes")]
    Truncated { name: String, end: u64, blob_len: u64 },

    #[error("entries '{first}' and '{second}' overlap")]
    Overlap { first: String, second: String },

    #[error("entry '{name}': shape {shape:?} needs {expected} bytes, manifest says {byte_length}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        byte_length: u64,
    },

    #[error("duplicate entry name '{0}'")]
    Duplicate(String),

    #[error("missing entry '{0}'")]
    Missing(String),

    #[error("entry '{name}': {message}")]
    BadEntry { name: String, message: String },
}

type CResult<T> = std::result::Result<T, ContainerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Kernel,
    Factor,
    Patchbatch,
    Gates,
    Plan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    blob: String,
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<Entry>,
    blob: Vec<u8>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assembles a container from parts and validates the layout.
    pub fn from_parts(entries: Vec<Entry>, blob: Vec<u8>) -> CResult<Self> {
        let c = Self { entries, blob };
        c.validate()?;
        Ok(c)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Appends an entry, converting `values` to `f32`.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        kind: EntryKind,
        shape: Vec<usize>,
        values: &[f64],
        metadata: BTreeMap<String, String>,
    ) -> CResult<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(ContainerError::Duplicate(name));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(ContainerError::ShapeMismatch {
                name,
                shape,
                expected: 4 * n as u64,
                byte_length: 4 * values.len() as u64,
            });
        }
        let byte_offset = self.blob.len() as u64;
        for &v in values {
            self.blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.entries.push(Entry {
            name,
            kind,
            dtype: "f32".into(),
            shape,
            byte_offset,
            byte_length: 4 * values.len() as u64,
            metadata,
        });
        Ok(())
    }

    /// Sets one metadata key on an existing entry.
    pub fn set_metadata(&mut self, name: &str, key: &str, value: impl Into<String>) -> CResult<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| ContainerError::Missing(name.into()))?;
        e.metadata.insert(key.into(), value.into());
        Ok(())
    }

    /// Values of one entry widened to `f64`.
    pub fn values(&self, name: &str) -> CResult<Vec<f64>> {
        let e = self.get(name).ok_or_else(|| ContainerError::Missing(name.into()))?;
        let start = e.byte_offset as usize;
        let bytes = &self.blob[start..start + e.byte_length as usize];
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    /// Checks dtype, shape/length agreement, bounds and overlap.
    pub fn validate(&self) -> CResult<()> {
        let blob_len = self.blob.len() as u64;
        for (idx, e) in self.entries.iter().enumerate() {
            if e.dtype != "f32" {
                return Err(ContainerError::BadEntry {
                    name: e.name.clone(),
                    message: format!("unsupported dtype '{}'", e.dtype),
                });
            }
            if self.entries[..idx].iter().any(|p| p.name == e.name) {
                return Err(ContainerError::Duplicate(e.name.clone()));
            }
            let expected = 4 * e.shape.iter().product::<usize>() as u64;
            if expected != e.byte_length {
                return Err(ContainerError::ShapeMismatch {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    expected,
                    byte_length: e.byte_length,
                });
            }
        }
        let mut order: Vec<&Entry> = self.entries.iter().filter(|e| e.byte_length > 0).collect();
        order.sort_by_key(|e| (e.byte_offset, e.byte_length));
        for pair in order.windows(2) {
            if pair[0].byte_offset + pair[0].byte_length > pair[1].byte_offset {
                return Err(ContainerError::Overlap {
                    first: pair[0].name.clone(),
                    second: pair[1].name.clone(),
                });
            }
        }
        for e in &self.entries {
            let end = e.byte_offset.saturating_add(e.byte_length);
            if end > blob_len {
                return Err(ContainerError::Truncated {
                    name: e.name.clone(),
                    end,
                    blob_len,
                });
            }
        }
        Ok(())
    }
}

/// Path of the blob that accompanies `manifest`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn io_err(path: &Path, e: std::io::Error) -> ContainerError {
    ContainerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_container(c: &Container, path: &Path) -> CResult<()> {
    c.validate()?;
    let blob = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries: c.entries.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| ContainerError::Manifest(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    fs::write(&blob, &c.blob).map_err(|e| io_err(&blob, e))?;
    Ok(())
}

pub fn read_container(path: &Path) -> CResult<Container> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ContainerError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(ContainerError::Manifest(format!("unknown format '{}'", manifest.format)));
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| io_err(&blob_file, e))?;
    Container::from_parts(manifest.entries, blob)
}

fn bad(name: &str, message: impl Into<String>) -> ContainerError {
    ContainerError::BadEntry {
        name: name.into(),
        message: message.into(),
    }
}

fn meta_get<'a>(e: &'a Entry, key: &str) -> CResult<&'a str> {
    e.metadata
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| bad(&e.name, format!("metadata key '{key}' missing")))
}

fn parse_list(name: &str, s: &str) -> CResult<Vec<usize>> {
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| bad(name, format!("bad integer list '{s}'"))))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Stores a kernel as `name` (shape `t, s, k, k`) and its bias, if any,
/// as `name/bias`.
pub fn put_kernel(c: &mut Container, name: &str, kernel: &Kernel4D) -> CResult<()> {
    let (t, s, k) = kernel.dims();
    c.push(name, EntryKind::Kernel, vec![t, s, k, k], kernel.data(), BTreeMap::new())?;
    if let Some(b) = &kernel.bias {
        let md = BTreeMap::from([("role".to_string(), "bias".to_string())]);
        c.push(format!("{name}/bias"), EntryKind::Kernel, vec![t], b, md)?;
    }
    Ok(())
}

pub fn get_kernel(c: &Container, name: &str) -> CResult<Kernel4D> {
    let e = c.get(name).ok_or_else(|| ContainerError::Missing(name.into()))?;
    if e.kind != EntryKind::Kernel || e.shape.len() != 4 || e.shape[2] != e.shape[3] {
        return Err(bad(name, "not a (t, s, k, k) kernel entry"));
    }
    let (t, s, k) = (e.shape[0], e.shape[1], e.shape[2]);
    let mut kernel = Kernel4D::new(t, s, k, c.values(name)?).map_err(|err| bad(name, err.to_string()))?;
    if c.get(&format!("{name}/bias")).is_some() {
        let b = c.values(&format!("{name}/bias"))?;
        kernel = kernel.with_bias(b).map_err(|err| bad(name, err.to_string()))?;
    }
    Ok(kernel)
}

/// Stores every factor of `layer` as `name/<factor>`. The first factor
/// carries the method, ranks, source dims and the layer's own metadata
/// (prefixed `layer.`).
pub fn put_layer(c: &mut Container, name: &str, layer: &DecomposedLayer) -> CResult<()> {
    let (t, s, k) = layer.source_dims;
    let mut head = BTreeMap::new();
    head.insert("method".to_string(), layer.method().name().to_string());
    head.insert("ranks".to_string(), join(&layer.ranks));
    head.insert("source_dims".to_string(), join(&[t, s, k]));
    if let Factors::SpatialSvd { order, .. } = &layer.factors {
        head.insert("order".to_string(), order.name().to_string());
    }
    for (key, v) in &layer.metadata {
        head.insert(format!("layer.{key}"), v.clone());
    }
    let named = layer.factors.named();
    let factor_names = named.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(",");
    head.insert("factors".to_string(), factor_names);
    for (idx, (fname, f)) in named.into_iter().enumerate() {
        let md = if idx == 0 { head.clone() } else { BTreeMap::new() };
        c.push(format!("{name}/{fname}"), EntryKind::Factor, f.shape().to_vec(), f.data(), md)?;
    }
    if let Some(b) = &layer.bias {
        c.push(format!("{name}/bias"), EntryKind::Factor, vec![t], b, BTreeMap::new())?;
    }
    Ok(())
}

/// Name of the first factor entry of every stored layer, with its prefix.
pub fn layer_names(c: &Container) -> Vec<String> {
    c.entries()
        .iter()
        .filter(|e| e.kind == EntryKind::Factor && e.metadata.contains_key("method"))
        .filter_map(|e| e.name.rsplit_once('/').map(|(p, _)| p.to_string()))
        .collect()
}

pub fn get_layer(c: &Container, name: &str) -> CResult<DecomposedLayer> {
    let head = c
        .entries()
        .iter()
        .find(|e| e.kind == EntryKind::Factor && e.metadata.contains_key("method") && e.name.rsplit_once('/').map(|(p, _)| p) == Some(name))
        .ok_or_else(|| ContainerError::Missing(name.into()))?;
    let method = meta_get(head, "method")?;
    let ranks = parse_list(&head.name, meta_get(head, "ranks")?)?;
    let dims = parse_list(&head.name, meta_get(head, "source_dims")?)?;
    if dims.len() != 3 {
        return Err(bad(&head.name, "source_dims needs three values"));
    }
    let factor = |fname: &str| -> CResult<Factor> {
        let full = format!("{name}/{fname}");
        let e = c.get(&full).ok_or_else(|| ContainerError::Missing(full.clone()))?;
        Factor::new(e.shape.clone(), c.values(&full)?).map_err(|err| bad(&full, err.to_string()))
    };
    let factors = match method {
        "weight-svd" => Factors::WeightSvd {
            first: factor("first")?,
            second: factor("second")?,
        },
        "spatial-svd" => Factors::SpatialSvd {
            first: factor("first")?,
            second: factor("second")?,
            order: SpatialOrder::parse(head.metadata.get("order").map_or("horizontal-first", String::as_str))
                .map_err(|err| bad(&head.name, err.to_string()))?,
        },
        "cp" => Factors::Cp {
            input: factor("input")?,
            vertical: factor("vertical")?,
            horizontal: factor("horizontal")?,
            output: factor("output")?,
        },
        "tucker" => Factors::Tucker {
            input: factor("input")?,
            core: factor("core")?,
            output: factor("output")?,
        },
        "tt" => Factors::Tt {
            first: factor("first")?,
            second: factor("second")?,
            third: factor("third")?,
            fourth: factor("fourth")?,
        },
        "asym3d" => Factors::Asym3d {
            first: factor("first")?,
            second: factor("second")?,
            pointwise: factor("pointwise")?,
        },
        other => return Err(bad(&head.name, format!("unknown method '{other}'"))),
    };
    let bias_name = format!("{name}/bias");
    let bias = match c.get(&bias_name) {
        Some(_) => Some(c.values(&bias_name)?),
        None => None,
    };
    let mut layer = DecomposedLayer::new(factors, ranks, (dims[0], dims[1], dims[2]), bias)
        .map_err(|err| bad(&head.name, err.to_string()))?;
    for (key, v) in &head.metadata {
        if let Some(stripped) = key.strip_prefix("layer.") {
            layer.metadata.insert(stripped.to_string(), v.clone());
        }
    }
    Ok(layer)
}

/// Stores a patch batch as `name/inputs`, `name/cur_inputs`,
/// `name/locations` and, when attached, `name/ref_outputs` and
/// `name/cur_outputs`.
pub fn put_batch(c: &mut Container, name: &str, batch: &PatchBatch) -> CResult<()> {
    let head = BTreeMap::from([
        ("k".to_string(), batch.k.to_string()),
        ("channels".to_string(), batch.channels.to_string()),
    ]);
    let m = |x: &Matrix| vec![x.rows(), x.cols()];
    c.push(format!("{name}/inputs"), EntryKind::Patchbatch, m(&batch.inputs), batch.inputs.as_slice(), head)?;
    c.push(
        format!("{name}/cur_inputs"),
        EntryKind::Patchbatch,
        m(&batch.cur_inputs),
        batch.cur_inputs.as_slice(),
        BTreeMap::new(),
    )?;
    let loc: Vec<f64> = batch.locations.iter().flat_map(|&(p, x, y)| [p as f64, x as f64, y as f64]).collect();
    c.push(format!("{name}/locations"), EntryKind::Patchbatch, vec![batch.locations.len(), 3], &loc, BTreeMap::new())?;
    if batch.ref_outputs.cols() > 0 {
        for (part, x) in [("ref_outputs", &batch.ref_outputs), ("cur_outputs", &batch.cur_outputs)] {
            c.push(format!("{name}/{part}"), EntryKind::Patchbatch, m(x), x.as_slice(), BTreeMap::new())?;
        }
    }
    Ok(())
}

pub fn get_batch(c: &Container, name: &str) -> CResult<PatchBatch> {
    let matrix = |part: &str| -> CResult<Matrix> {
        let full = format!("{name}/{part}");
        let e = c.get(&full).ok_or_else(|| ContainerError::Missing(full.clone()))?;
        if e.kind != EntryKind::Patchbatch || e.shape.len() != 2 {
            return Err(bad(&full, "not a 2-D patch batch entry"));
        }
        Ok(Matrix::from_vec(e.shape[0], e.shape[1], c.values(&full)?))
    };
    let inputs = matrix("inputs")?;
    let head = c.get(&format!("{name}/inputs")).expect("just read");
    let k: usize = meta_get(head, "k")?.parse().map_err(|_| bad(&head.name, "bad k"))?;
    let channels: usize = meta_get(head, "channels")?.parse().map_err(|_| bad(&head.name, "bad channels"))?;
    if inputs.cols() != k * k * channels {
        return Err(bad(&head.name, "patch width does not match k and channels"));
    }
    let cur_inputs = matrix("cur_inputs")?;
    let loc = matrix("locations")?;
    if cur_inputs.shape() != inputs.shape() || loc.rows() != inputs.rows() || loc.cols() != 3 {
        return Err(bad(name, "batch parts disagree in shape"));
    }
    let locations = (0..loc.rows())
        .map(|r| (loc[(r, 0)] as usize, loc[(r, 1)] as usize, loc[(r, 2)] as usize))
        .collect();
    let n = inputs.rows();
    let (ref_outputs, cur_outputs) = if c.get(&format!("{name}/ref_outputs")).is_some() {
        let (y, z) = (matrix("ref_outputs")?, matrix("cur_outputs")?);
        if y.rows() != n || z.shape() != y.shape() {
            return Err(bad(name, "batch outputs disagree in shape"));
        }
        (y, z)
    } else {
        (Matrix::zeros(n, 0), Matrix::zeros(n, 0))
    };
    let (y_mean, z_mean) = if ref_outputs.cols() > 0 {
        (ref_outputs.column_means(), cur_outputs.column_means())
    } else {
        (vec![], vec![])
    };
    Ok(PatchBatch {
        inputs,
        cur_inputs,
        ref_outputs,
        cur_outputs,
        y_mean,
        z_mean,
        k,
        channels,
        locations,
    })
}

/// Stores a gate vector as one `n × 4` (hard-concrete: log α, β, ζ, γ) or
/// `n × 2` (VIB: μ, σ) entry.
pub fn put_gates(c: &mut Container, name: &str, gates: &GateVector) -> CResult<()> {
    let kind = match gates.gates.first() {
        Some(Gate::Vib(_)) => GateKind::Vib,
        _ => GateKind::L0,
    };
    let mut values = Vec::new();
    for g in &gates.gates {
        match (kind, g) {
            (GateKind::L0, Gate::HardConcrete(h)) => values.extend([h.log_alpha, h.beta, h.zeta, h.gamma]),
            (GateKind::Vib, Gate::Vib(v)) => values.extend([v.mu, v.sigma]),
            _ => return Err(bad(name, "gate vector mixes gate kinds")),
        }
    }
    let width = if kind == GateKind::L0 { 4 } else { 2 };
    let md = BTreeMap::from([
        ("gate_kind".to_string(), kind.name().to_string()),
        ("lambda".to_string(), gates.lambda_reg.to_string()),
    ]);
    c.push(name, EntryKind::Gates, vec![gates.len(), width], &values, md)
}

pub fn get_gates(c: &Container, name: &str) -> CResult<GateVector> {
    let e = c.get(name).ok_or_else(|| ContainerError::Missing(name.into()))?;
    if e.kind != EntryKind::Gates || e.shape.len() != 2 {
        return Err(bad(name, "not a gates entry"));
    }
    let kind = GateKind::parse(meta_get(e, "gate_kind")?).map_err(|err| bad(name, err.to_string()))?;
    let lambda_reg: f64 = meta_get(e, "lambda")?.parse().map_err(|_| bad(name, "bad lambda"))?;
    let v = c.values(name)?;
    let gates = match (kind, e.shape[1]) {
        (GateKind::L0, 4) => v
            .chunks_exact(4)
            .map(|g| HardConcreteGate::with_params(g[0], g[1], g[2], g[3]).map(Gate::HardConcrete))
            .collect::<Result<Vec<_>, _>>(),
        (GateKind::Vib, 2) => v
            .chunks_exact(2)
            .map(|g| VibGate::new(g[0], g[1]).map(Gate::Vib))
            .collect::<Result<Vec<_>, _>>(),
        _ => return Err(bad(name, "gate width does not match its kind")),
    }
    .map_err(|err| bad(name, err.to_string()))?;
    Ok(GateVector { gates, lambda_reg })
}

/// Stores a rank plan as a zero-length entry whose `plan` metadata holds
/// the plan as JSON.
pub fn put_plan(c: &mut Container, name: &str, plan: &RankPlan) -> CResult<()> {
    let json = serde_json::to_string(plan).map_err(|err| bad(name, err.to_string()))?;
    let md = BTreeMap::from([("plan".to_string(), json)]);
    c.push(name, EntryKind::Plan, vec![0], &[], md)
}

pub fn get_plan(c: &Container, name: &str) -> CResult<RankPlan> {
    let e = c.get(name).ok_or_else(|| ContainerError::Missing(name.into()))?;
    if e.kind != EntryKind::Plan {
        return Err(bad(name, "not a plan entry"));
    }
    serde_json::from_str(meta_get(e, "plan")?).map_err(|err| bad(name, err.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_and_read_back() {
        let mut c = Container::new();
        c.push("a", EntryKind::Kernel, vec![2, 2], &[1.0, 2.0, 3.0, 4.5], BTreeMap::new())
            .unwrap();
        assert_eq!(c.values("a").unwrap(), vec![1.0, 2.0, 3.0, 4.5]);
        assert_eq!(c.blob().len(), 16);
    }

    #[test]
    fn duplicate_rejected() {
        let mut c = Container::new();
        c.push("a", EntryKind::Plan, vec![1], &[1.0], BTreeMap::new()).unwrap();
        assert!(matches!(
            c.push("a", EntryKind::Plan, vec![1], &[1.0], BTreeMap::new()),
            Err(ContainerError::Duplicate(_))
        ));
    }

    #[test]
    fn overlap_detected() {
        let mut c = Container::new();
        c.push("a", EntryKind::Factor, vec![2], &[1.0, 2.0], BTreeMap::new()).unwrap();
        c.push("b", EntryKind::Factor, vec![2], &[3.0, 4.0], BTreeMap::new()).unwrap();
        let mut entries = c.entries().to_vec();
        entries[1].byte_offset = 4;
        assert!(matches!(
            Container::from_parts(entries, c.blob().to_vec()),
            Err(ContainerError::Overlap { .. })
        ));
    }
}
