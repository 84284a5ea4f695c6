//! Binary tensor container and the network checkpoint built on it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "SPOSTNSR"
//! hlen     u32       byte length of the JSON header
//! header   hlen      UTF-8 JSON {"version", "tensors": [{"name", "shape", "offset"}], "meta"}
//! payload            f64 values, row-major per tensor, concatenated in header order
//! ```
//!
//! `offset` counts f64 elements from the start of the payload. A tensor's
//! length is the product of its shape (1 for an empty shape).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{ActivationKind, ActivationParam, Block, ConvKernel, ConvNetParams};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::train::TrainConfig;
use crate::vsa::{KeyKind, KeyVector, UnbindMatrix};

pub const MAGIC: &[u8; 8] = b"SPOSTNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<HeaderEntry>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer {
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

fn format_err(m: impl Into<String>) -> Error {
    Error::Format(m.into())
}

impl TensorContainer {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorContainer { tensors: Vec::new(), meta }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(format_err(format!("{name}: shape {shape:?} holds {len} values, got {}", data.len())));
        }
        if self.get(&name).is_some() {
            return Err(format_err(format!("duplicate tensor {name}")));
        }
        self.tensors.push(TensorEntry { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// The tensor `name`, which must have exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self.get(name).ok_or_else(|| format_err(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(format_err(format!("{name}: expected shape {shape:?}, found {:?}", t.shape)));
        }
        Ok(&t.data)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = HeaderEntry { name: t.name.clone(), shape: t.shape.clone(), offset };
                offset += t.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { version: FORMAT_VERSION, tensors, meta: self.meta.clone() })?;
        let hlen = u32::try_from(header.len()).map_err(|_| format_err("header too large"))?;
        w.write_all(MAGIC)?;
        w.write_all(&hlen.to_le_bytes())?;
        w.write_all(&header)?;
        let mut payload = Vec::with_capacity(offset * 8);
        for v in self.tensors.iter().flat_map(|t| &t.data) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("bad magic"));
        }
        let mut hlen = [0u8; 4];
        r.read_exact(&mut hlen)?;
        let mut header = vec![0u8; u32::from_le_bytes(hlen) as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {}", header.version)));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(format_err("payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let mut out = TensorContainer::new(header.meta);
        let mut expected = 0;
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + len > payload.len() {
                return Err(format_err(format!("{}: offset {} out of place", e.name, e.offset)));
            }
            out.push(e.name, e.shape, payload[e.offset..e.offset + len].to_vec())?;
            expected += len;
        }
        if expected != payload.len() {
            return Err(format_err(format!("{} trailing payload values", payload.len() - expected)));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsMeta {
    first_stride: usize,
    activations: Vec<ActivationKind>,
    key_kind: KeyKind,
}

fn kernel_shape(k: &ConvKernel) -> Vec<usize> {
    vec![k.c_out, k.c_in, k.k, k.k]
}

fn read_kernel(c: &TensorContainer, name: &str, stride: usize) -> Result<ConvKernel> {
    let t = c.get(name).ok_or_else(|| format_err(format!("missing tensor {name}")))?;
    let [co, ci, k, k2] = t.shape[..] else {
        return Err(format_err(format!("{name}: kernel needs 4 axes, found {:?}", t.shape)));
    };
    if k != k2 {
        return Err(format_err(format!("{name}: kernel must be square")));
    }
    ConvKernel::new(co, ci, k, stride, t.data.clone())
}

/// Tensors in this order: `first_conv` `[C_o, C_i, k, k]`; per trunk block
/// `trunk.{l}.conv` and `trunk.{l}.act` `[C]`; per channel `bind_key.{i}` `[D]`
/// and `unbind.{i}` `[D_o, D_o]`; `classifier.weight` `[classes, D_o]`;
/// `classifier.bias` `[classes]`. `meta["params"]` holds the first-layer
/// stride, the activation kind of each block and the key kind.
pub fn params_to_container(params: &ConvNetParams, meta: serde_json::Value) -> Result<TensorContainer> {
    params.validate()?;
    let key_kind = params.bind_keys[0].kind();
    let pm = ParamsMeta {
        first_stride: params.first_conv.stride,
        activations: params.trunk.iter().map(|b| b.act.kind).collect(),
        key_kind,
    };
    let mut meta = match meta {
        serde_json::Value::Object(m) => m,
        serde_json::Value::Null => serde_json::Map::new(),
        other => return Err(format_err(format!("meta must be an object, got {other}"))),
    };
    meta.insert("params".into(), serde_json::to_value(pm)?);
    let mut c = TensorContainer::new(serde_json::Value::Object(meta));
    c.push("first_conv", kernel_shape(&params.first_conv), params.first_conv.weights.clone())?;
    for (l, b) in params.trunk.iter().enumerate() {
        c.push(format!("trunk.{l}.conv"), kernel_shape(&b.conv), b.conv.weights.clone())?;
        c.push(format!("trunk.{l}.act"), vec![b.act.b.len()], b.act.b.clone())?;
    }
    for (i, (k, u)) in params.bind_keys.iter().zip(&params.unbind).enumerate() {
        if k.kind() != key_kind {
            return Err(format_err("binding keys of mixed kinds"));
        }
        c.push(format!("bind_key.{i}"), vec![k.dim()], k.entries().to_vec())?;
        let m = u.matrix();
        c.push(format!("unbind.{i}"), vec![m.rows, m.cols], m.data.clone())?;
    }
    let w = &params.classifier;
    c.push("classifier.weight", vec![w.rows, w.cols], w.data.clone())?;
    c.push("classifier.bias", vec![params.classifier_bias.len()], params.classifier_bias.clone())?;
    Ok(c)
}

pub fn params_from_container(c: &TensorContainer) -> Result<ConvNetParams> {
    let pm: ParamsMeta = serde_json::from_value(
        c.meta.get("params").cloned().ok_or_else(|| format_err("meta has no params section"))?,
    )?;
    let first_conv = read_kernel(c, "first_conv", pm.first_stride)?;
    let mut trunk = Vec::with_capacity(pm.activations.len());
    for (l, &kind) in pm.activations.iter().enumerate() {
        let conv = read_kernel(c, &format!("trunk.{l}.conv"), 1)?;
        let b = c.expect(&format!("trunk.{l}.act"), &[conv.c_out])?.to_vec();
        trunk.push(Block { conv, act: ActivationParam { kind, b } });
    }
    let d = first_conv.c_out;
    let d_o = trunk.last().map_or(d, |b| b.conv.c_out);
    let (mut bind_keys, mut unbind) = (Vec::new(), Vec::new());
    while let Some(t) = c.get(&format!("bind_key.{}", bind_keys.len())) {
        let i = bind_keys.len();
        if t.shape != [d] {
            return Err(format_err(format!("bind_key.{i}: expected shape [{d}], found {:?}", t.shape)));
        }
        bind_keys.push(KeyVector::from_entries(pm.key_kind, t.data.clone())?);
        let u = c.expect(&format!("unbind.{i}"), &[d_o, d_o])?;
        unbind.push(UnbindMatrix::new(Matrix::from_vec(d_o, d_o, u.to_vec())?)?);
    }
    let t = c.get("classifier.weight").ok_or_else(|| format_err("missing tensor classifier.weight"))?;
    let [classes, cols] = t.shape[..] else {
        return Err(format_err("classifier.weight needs 2 axes"));
    };
    let classifier = Matrix::from_vec(classes, cols, t.data.clone())?;
    let classifier_bias = c.expect("classifier.bias", &[classes])?.to_vec();
    let p = ConvNetParams { first_conv, trunk, bind_keys, unbind, classifier, classifier_bias };
    p.validate()?;
    Ok(p)
}

/// Trained parameters together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ConvNetParams,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<TensorContainer> {
        params_to_container(&self.params, serde_json::json!({ "train_config": self.config }))
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let config = serde_json::from_value(
            c.meta.get("train_config").cloned().ok_or_else(|| format_err("meta has no train_config"))?,
        )?;
        Ok(Checkpoint { config, params: params_from_container(c)? })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?)
    }
}
