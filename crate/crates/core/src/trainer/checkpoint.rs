//! Binary checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "FBSN"                     magic
//! u32                        format version
//! u32 + bytes                metadata, UTF-8 `key=value` lines (sorted by key)
//! u32                        tensor count
//! per tensor: u32 rows, u32 cols, rows·cols f64
//! ```
//!
//! Tensors are the network parameters in canonical order (`W0, b0, W1, b1, …`)
//! followed by the Adam first moments and then the second moments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::ad::{Activation, Tensor};
use crate::error::{Error, Result};
use crate::net::{InputScaling, NetParams};
use crate::trainer::adam::{AdamState, BETA1, BETA2, EPSILON};

pub const MAGIC: &[u8; 4] = b"FBSN";
pub const FORMAT_VERSION: u32 = 1;

const RESERVED: [&str; 11] = [
    "activation",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "adam_step",
    "input_scale",
    "input_shift",
    "iteration",
    "layer_sizes",
    "problem",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub problem: String,
    pub seed: u64,
    /// Number of completed training iterations.
    pub iteration: u64,
    /// Free-form provenance entries.
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetParams,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn encode(params: &NetParams, adam: &AdamState, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (k, v) in &meta.extra {
        if RESERVED.contains(&k.as_str()) {
            return Err(Error::Contract(format!("metadata key '{k}' is reserved")));
        }
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Contract(format!(
                "metadata entry '{k}' is not representable"
            )));
        }
        kv.insert(k.clone(), v.clone());
    }
    if meta.problem.contains('\n') {
        return Err(Error::Contract("problem name contains a newline".into()));
    }
    kv.insert("activation".into(), params.activation().to_string());
    kv.insert("adam_beta1".into(), BETA1.to_string());
    kv.insert("adam_beta2".into(), BETA2.to_string());
    kv.insert("adam_epsilon".into(), EPSILON.to_string());
    kv.insert("adam_step".into(), adam.step.to_string());
    kv.insert("iteration".into(), meta.iteration.to_string());
    kv.insert("layer_sizes".into(), join(params.layer_sizes()));
    kv.insert("problem".into(), meta.problem.clone());
    kv.insert("seed".into(), meta.seed.to_string());
    if let Some(s) = params.scaling() {
        kv.insert("input_shift".into(), join(&s.shift));
        kv.insert("input_scale".into(), join(&s.scale));
    }
    let text: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

    let tensors: Vec<&Tensor> = params
        .tensors()
        .chain(&adam.first)
        .chain(&adam.second)
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    params: &NetParams,
    adam: &AdamState,
    meta: &CheckpointMeta,
) -> Result<()> {
    let bytes = encode(params, adam, meta)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn field<'m>(kv: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("metadata is missing '{key}'")))
}

fn parse_field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = field(kv, key)?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("metadata '{key}' has unparsable value '{raw}'")))
}

fn parse_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.parse().map_err(|_| {
                Error::Checkpoint(format!("metadata '{key}' has unparsable entry '{s}'"))
            })
        })
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic bytes (not an fbsnn checkpoint)".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let text = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| Error::Checkpoint("metadata is not valid UTF-8".into()))?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed metadata line '{line}'")))?;
        kv.insert(k.to_string(), v.to_string());
    }

    let layer_sizes: Vec<usize> = parse_list(field(&kv, "layer_sizes")?, "layer_sizes")?;
    let activation: Activation = field(&kv, "activation")?
        .parse()
        .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
    if layer_sizes.len() < 2 {
        return Err(Error::Checkpoint(format!(
            "layer_sizes {layer_sizes:?} too short"
        )));
    }
    let layers = layer_sizes.len() - 1;

    let count = r.u32("tensor count")? as usize;
    if count != 6 * layers {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors for {layers} layers, found {count}",
            6 * layers
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let rows = r.u32("tensor shape")? as usize;
        let cols = r.u32("tensor shape")? as usize;
        let layer = (i % (2 * layers)) / 2;
        let expect = if i % 2 == 0 {
            (layer_sizes[layer], layer_sizes[layer + 1])
        } else {
            (1, layer_sizes[layer + 1])
        };
        if (rows, cols) != expect {
            return Err(Error::Checkpoint(format!(
                "tensor {i} has shape {rows}x{cols}, layer_sizes imply {}x{}",
                expect.0, expect.1
            )));
        }
        let raw = r.take(rows * cols * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let second: Vec<Tensor> = tensors.split_off(4 * layers);
    let first: Vec<Tensor> = tensors.split_off(2 * layers);
    let (weights, biases): (Vec<Tensor>, Vec<Tensor>) = {
        let mut w = Vec::with_capacity(layers);
        let mut b = Vec::with_capacity(layers);
        for (i, t) in tensors.into_iter().enumerate() {
            if i % 2 == 0 {
                w.push(t)
            } else {
                b.push(t)
            }
        }
        (w, b)
    };
    let mut params = NetParams::from_parts(weights, biases, activation)
        .map_err(|e| Error::Checkpoint(format!("inconsistent network: {e}")))?;
    if let (Some(shift), Some(scale)) = (kv.get("input_shift"), kv.get("input_scale")) {
        let scaling = InputScaling {
            shift: parse_list(shift, "input_shift")?,
            scale: parse_list(scale, "input_scale")?,
        };
        params = params
            .with_scaling(scaling)
            .map_err(|e| Error::Checkpoint(format!("inconsistent input scaling: {e}")))?;
    }

    let adam = AdamState {
        first,
        second,
        step: parse_field(&kv, "adam_step")?,
    };
    let meta = CheckpointMeta {
        problem: field(&kv, "problem")?.to_string(),
        seed: parse_field(&kv, "seed")?,
        iteration: parse_field(&kv, "iteration")?,
        extra: kv
            .into_iter()
            .filter(|(k, _)| !RESERVED.contains(&k.as_str()))
            .collect(),
    };
    Ok(Checkpoint { params, adam, meta })
}
