//! Checkpoints: named f32 tensors with a safetensors-compatible on-disk
//! layout.
//!
//! File layout:
//!
//! ```text
//! [0..8)        u64 little-endian header length L
//! [8..8+L)      UTF-8 JSON header, space padded to a multiple of 8
//! [8+L..)       raw little-endian f32 data, tensors packed in name order
//! ```
//!
//! Each header entry is `{"dtype":"F32","shape":[..],"data_offsets":[begin,end]}`
//! with offsets relative to the start of the data section. An optional
//! `"__metadata__"` entry holds a string map.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, so NaN payloads and signed zeros count.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named tensors plus string metadata. Iteration is always in lexicographic
/// name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    fn first_nonfinite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MismatchReason {
    MissingInA,
    MissingInB,
    ShapeMismatch,
}

impl fmt::Display for MismatchReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MismatchReason::MissingInA => "missing-in-a",
            MismatchReason::MissingInB => "missing-in-b",
            MismatchReason::ShapeMismatch => "shape-mismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompatReport {
    pub compatible: bool,
    pub mismatches: Vec<(String, MismatchReason)>,
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.compatible {
            return f.write_str("compatible");
        }
        for (i, (name, reason)) in self.mismatches.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{name} ({reason})")?;
        }
        Ok(())
    }
}

/// Structural comparison: same tensor names and same shapes per name.
pub fn validate_compat(a: &Checkpoint, b: &Checkpoint) -> CompatReport {
    let mut mismatches = Vec::new();
    for (name, ta) in &a.tensors {
        match b.tensors.get(name) {
            None => mismatches.push((name.clone(), MismatchReason::MissingInB)),
            Some(tb) if tb.shape() != ta.shape() => {
                mismatches.push((name.clone(), MismatchReason::ShapeMismatch))
            }
            Some(_) => {}
        }
    }
    for name in b.tensors.keys() {
        if !a.tensors.contains_key(name) {
            mismatches.push((name.clone(), MismatchReason::MissingInA));
        }
    }
    mismatches.sort_by(|x, y| x.0.cmp(&y.0));
    CompatReport {
        compatible: mismatches.is_empty(),
        mismatches,
    }
}

pub(crate) fn ensure_compat(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    let report = validate_compat(a, b);
    if report.compatible {
        Ok(())
    } else {
        Err(Error::Incompatible(report))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IoOptions {
    /// Accept NaN/Inf elements instead of rejecting them.
    pub allow_nonfinite: bool,
}

/// Serializes a checkpoint. The output is a pure function of the tensors and
/// metadata.
pub fn to_bytes(ckpt: &Checkpoint, opts: IoOptions) -> Result<Vec<u8>> {
    if !opts.allow_nonfinite {
        if let Some(name) = ckpt.first_nonfinite() {
            return Err(Error::invalid(format!(
                "tensor {name:?} contains non-finite values"
            )));
        }
    }

    // serde_json's default Map is a BTreeMap, so keys come out sorted.
    let mut header = Map::new();
    let mut offset = 0usize;
    for (name, tensor) in &ckpt.tensors {
        let end = offset + tensor.len() * 4;
        header.insert(
            name.clone(),
            json!({"dtype": "F32", "shape": tensor.shape(), "data_offsets": [offset, end]}),
        );
        offset = end;
    }
    if !ckpt.metadata.is_empty() {
        header.insert(METADATA_KEY.to_owned(), json!(ckpt.metadata));
    }
    let mut header_bytes =
        serde_json::to_vec(&Value::Object(header)).expect("header serialization is infallible");
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for tensor in ckpt.tensors.values() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_entry(name: &str, value: &Value) -> Result<Entry> {
    let obj = value
        .as_object()
        .ok_or_else(|| bad(format!("entry {name:?} is not an object")))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad(format!("entry {name:?} has no dtype")))?;
    if dtype != "F32" {
        return Err(bad(format!(
            "tensor {name:?} has dtype {dtype}; only F32 is supported"
        )));
    }
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad(format!("entry {name:?} has no shape")))?
        .iter()
        .map(|d| {
            d.as_u64()
                .map(|d| d as usize)
                .ok_or_else(|| bad(format!("tensor {name:?} has a non-integer dimension")))
        })
        .collect::<Result<Vec<_>>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|o| o.len() == 2)
        .ok_or_else(|| bad(format!("entry {name:?} needs data_offsets [begin, end]")))?;
    let begin = offsets[0]
        .as_u64()
        .ok_or_else(|| bad(format!("tensor {name:?} has a bad begin offset")))? as usize;
    let end = offsets[1]
        .as_u64()
        .ok_or_else(|| bad(format!("tensor {name:?} has a bad end offset")))? as usize;
    if end < begin {
        return Err(bad(format!("tensor {name:?} has end < begin")));
    }
    let elems = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad(format!("tensor {name:?} shape overflows")))?;
    if (end - begin) != elems * 4 {
        return Err(bad(format!(
            "tensor {name:?}: {} bytes declared for shape {shape:?}",
            end - begin
        )));
    }
    Ok(Entry {
        name: name.to_owned(),
        shape,
        begin,
        end,
    })
}

pub fn from_bytes(bytes: &[u8], opts: IoOptions) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(bad("file shorter than the 8-byte header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let data_start = 8u64
        .checked_add(header_len)
        .filter(|&s| s <= bytes.len() as u64)
        .ok_or_else(|| {
            bad(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })? as usize;
    let header: Value = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| bad(format!("header is not valid JSON: {e}")))?;
    let header = header
        .as_object()
        .ok_or_else(|| bad("header is not a JSON object"))?;
    let data = &bytes[data_start..];

    let mut ckpt = Checkpoint::new();
    let mut entries = Vec::with_capacity(header.len());
    for (name, value) in header {
        if name == METADATA_KEY {
            let meta = value
                .as_object()
                .ok_or_else(|| bad("__metadata__ is not an object"))?;
            for (k, v) in meta {
                let v = v
                    .as_str()
                    .ok_or_else(|| bad(format!("metadata value for {k:?} is not a string")))?;
                ckpt.metadata.insert(k.clone(), v.to_owned());
            }
            continue;
        }
        entries.push(parse_entry(name, value)?);
    }

    entries.sort_by_key(|e| (e.begin, e.end));
    let mut prev: Option<&Entry> = None;
    for e in &entries {
        if e.end > data.len() {
            return Err(bad(format!(
                "tensor {:?} ends at {} beyond data section of {} bytes",
                e.name,
                e.end,
                data.len()
            )));
        }
        if let Some(p) = prev {
            if e.begin < p.end {
                return Err(bad(format!(
                    "tensors {:?} and {:?} have overlapping data_offsets",
                    p.name, e.name
                )));
            }
        }
        prev = Some(e);
    }

    for e in entries {
        let values: Vec<f32> = data[e.begin..e.end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor {
            shape: e.shape,
            data: values,
        };
        if !opts.allow_nonfinite && !tensor.is_finite() {
            return Err(Error::invalid(format!(
                "tensor {:?} contains non-finite values",
                e.name
            )));
        }
        ckpt.tensors.insert(e.name, tensor);
    }
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with(ckpt, path, IoOptions::default())
}

pub fn save_checkpoint_with(
    ckpt: &Checkpoint,
    path: impl AsRef<Path>,
    opts: IoOptions,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ckpt, opts)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    load_checkpoint_with(path, IoOptions::default())
}

pub fn load_checkpoint_with(path: impl AsRef<Path>, opts: IoOptions) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, opts)
}
