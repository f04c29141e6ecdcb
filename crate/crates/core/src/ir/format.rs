//! LDFC container: magic, version byte, little-endian u64 manifest length,
//! UTF-8 JSON manifest, zero padding to a 64-byte boundary, then the tensor
//! blob. Every tensor starts at a 64-byte aligned offset relative to the blob
//! start and is stored little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    Activation, BatchNormParams, Block, ChannelStats, Combine, EqBuffers, NetworkGraph, Pool, QuantParams, StrState,
};
use crate::error::{Error, FormatError, Result};
use crate::tensor::{ConvSpec, Tensor};

pub const MODEL_MAGIC: [u8; 4] = *b"LDFC";
pub const FORMAT_VERSION: u8 = 0x01;
const ALIGN: usize = 64;
const HEADER_LEN: usize = 4 + 1 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U32,
}

/// One named tensor inside a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl ContainerTensor {
    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, data: &[f32]) -> Self {
        ContainerTensor {
            name: name.into(),
            shape,
            dtype: Dtype::F32,
            bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_u32(name: impl Into<String>, shape: Vec<usize>, data: &[u32]) -> Self {
        ContainerTensor {
            name: name.into(),
            shape,
            dtype: Dtype::U32,
            bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        if self.dtype != Dtype::F32 {
            return Err(FormatError::Manifest(format!("tensor '{}' is not f32", self.name)).into());
        }
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_u32(&self) -> Result<Vec<u32>> {
        if self.dtype != Dtype::U32 {
            return Err(FormatError::Manifest(format!("tensor '{}' is not u32", self.name)).into());
        }
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes `meta` (a JSON object) plus tensors into container bytes.
pub fn write_container(magic: [u8; 4], meta: Value, tensors: &[ContainerTensor]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for t in tensors {
        offset = align_up(offset);
        entries.push(TensorEntry {
            name: t.name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
            offset: offset as u64,
            length: t.bytes.len() as u64,
        });
        offset += t.bytes.len();
    }
    let mut manifest = match meta {
        Value::Object(m) => m,
        _ => return Err(FormatError::Manifest("manifest metadata must be a JSON object".into()).into()),
    };
    manifest.insert(
        "tensors".into(),
        serde_json::to_value(&entries).map_err(|e| FormatError::Manifest(e.to_string()))?,
    );
    let json = serde_json::to_vec(&Value::Object(manifest)).map_err(|e| FormatError::Manifest(e.to_string()))?;

    let blob_start = align_up(HEADER_LEN + json.len());
    let mut out = Vec::with_capacity(blob_start + offset);
    out.extend_from_slice(&magic);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(blob_start, 0);
    for (t, e) in tensors.iter().zip(&entries) {
        out.resize(blob_start + e.offset as usize, 0);
        out.extend_from_slice(&t.bytes);
    }
    Ok(out)
}

/// Parses container bytes, returning the manifest (without the tensor table) and the tensors.
pub fn read_container(magic: [u8; 4], bytes: &[u8]) -> Result<(Value, Vec<ContainerTensor>)> {
    if bytes.len() < 4 || bytes[..4] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found,
        }
        .into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated("header".into()).into());
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: bytes[4],
        }
        .into());
    }
    let json_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let json_end = HEADER_LEN
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| FormatError::Truncated("manifest".into()))?;
    let mut manifest: Value =
        serde_json::from_slice(&bytes[HEADER_LEN..json_end]).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let entries: Vec<TensorEntry> = match manifest.as_object_mut().and_then(|m| m.remove("tensors")) {
        Some(v) => serde_json::from_value(v).map_err(|e| FormatError::Manifest(e.to_string()))?,
        None => return Err(FormatError::Manifest("missing tensor table".into()).into()),
    };
    let blob_start = align_up(json_end);
    let blob = bytes.get(blob_start..).unwrap_or(&[]);
    let mut expected_end = 0usize;
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let offset = e.offset as usize;
        let length = e.length as usize;
        let numel: usize = e.shape.iter().product();
        if length != numel * 4 {
            return Err(FormatError::BlobLength {
                name: e.name,
                detail: format!(
                    "byte length {length} does not match {numel} elements of shape {:?}",
                    e.shape
                ),
            }
            .into());
        }
        if offset % ALIGN != 0 || offset < expected_end {
            return Err(FormatError::BlobLength {
                name: e.name,
                detail: format!("offset {offset} is not 64-byte aligned in manifest order"),
            }
            .into());
        }
        let end = offset + length;
        if end > blob.len() {
            return Err(FormatError::BlobLength {
                name: e.name,
                detail: format!("needs bytes up to {end} but the blob has {}", blob.len()),
            }
            .into());
        }
        expected_end = end;
        tensors.push(ContainerTensor {
            name: e.name,
            shape: e.shape,
            dtype: e.dtype,
            bytes: blob[offset..end].to_vec(),
        });
    }
    if blob.len() != expected_end && !(tensors.is_empty() && blob.is_empty()) {
        return Err(FormatError::BlobLength {
            name: "<blob>".into(),
            detail: format!("blob has {} bytes, manifest accounts for {expected_end}", blob.len()),
        }
        .into());
    }
    Ok((manifest, tensors))
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    input_shape: [usize; 3],
    output: String,
    blocks: Vec<BlockEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    id: String,
    predecessors: Vec<String>,
    combine: String,
    #[serde(default)]
    pool: Option<Pool>,
    conv: ConvEntry,
    #[serde(default)]
    batchnorm: Option<BnEntry>,
    activation: Activation,
    #[serde(default)]
    eq: Option<PairEntry>,
    #[serde(default)]
    stats: Option<StatsEntry>,
    #[serde(default)]
    weight_quant: Option<QuantParams>,
    #[serde(default)]
    act_quant: Option<QuantParams>,
    #[serde(default)]
    str_state: Option<StrState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConvEntry {
    weight: String,
    bias: String,
    stride: [usize; 2],
    padding: [usize; 2],
    groups: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnEntry {
    eps: f64,
    mu: String,
    sigma: String,
    gamma: String,
    beta: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairEntry {
    v_in: String,
    v_out: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsEntry {
    mean: String,
    std: String,
}

fn vec_tensor(name: String, data: &[f32]) -> ContainerTensor {
    ContainerTensor::from_f32(name, vec![data.len()], data)
}

/// Encodes a graph as LDFC bytes.
pub fn write_model(graph: &NetworkGraph) -> Result<Vec<u8>> {
    graph.validate()?;
    let mut tensors = Vec::new();
    let mut blocks = Vec::with_capacity(graph.blocks.len());
    for b in &graph.blocks {
        let id = &b.id;
        let weight = format!("{id}.weight");
        let bias = format!("{id}.bias");
        tensors.push(ContainerTensor::from_f32(
            &weight,
            b.conv.weight.shape().to_vec(),
            b.conv.weight.data(),
        ));
        tensors.push(vec_tensor(bias.clone(), b.conv.bias.data()));
        let batchnorm = b.batchnorm.as_ref().map(|bn| {
            let names = ["mu", "sigma", "gamma", "beta"].map(|k| format!("{id}.bn.{k}"));
            for (n, v) in names.iter().zip([&bn.mu, &bn.sigma, &bn.gamma, &bn.beta]) {
                tensors.push(vec_tensor(n.clone(), v));
            }
            let [mu, sigma, gamma, beta] = names;
            BnEntry {
                eps: bn.eps,
                mu,
                sigma,
                gamma,
                beta,
            }
        });
        let eq = PairEntry {
            v_in: format!("{id}.eq.v_in"),
            v_out: format!("{id}.eq.v_out"),
        };
        tensors.push(vec_tensor(eq.v_in.clone(), &b.eq.v_in));
        tensors.push(vec_tensor(eq.v_out.clone(), &b.eq.v_out));
        let stats = b.stats.as_ref().map(|st| {
            let e = StatsEntry {
                mean: format!("{id}.stats.mean"),
                std: format!("{id}.stats.std"),
            };
            tensors.push(vec_tensor(e.mean.clone(), &st.mean));
            tensors.push(vec_tensor(e.std.clone(), &st.std));
            e
        });
        blocks.push(BlockEntry {
            id: id.clone(),
            predecessors: b.predecessors.iter().map(|&p| graph.blocks[p].id.clone()).collect(),
            combine: match b.combine {
                Combine::Single => "single".into(),
                Combine::Add => "add".into(),
            },
            pool: b.pool,
            conv: ConvEntry {
                weight,
                bias,
                stride: b.conv.stride,
                padding: b.conv.padding,
                groups: b.conv.groups,
            },
            batchnorm,
            activation: b.activation.clone(),
            eq: Some(eq),
            stats,
            weight_quant: b.weight_quant,
            act_quant: b.act_quant,
            str_state: b.str_state,
        });
    }
    let meta = ModelMeta {
        format: "ldfc".into(),
        input_shape: graph.input_shape,
        output: graph.blocks[graph.output].id.clone(),
        blocks,
    };
    let meta = serde_json::to_value(&meta).map_err(|e| FormatError::Manifest(e.to_string()))?;
    write_container(MODEL_MAGIC, meta, &tensors)
}

struct TensorTable(HashMap<String, ContainerTensor>);

impl TensorTable {
    fn take(&mut self, name: &str) -> Result<ContainerTensor> {
        self.0
            .remove(name)
            .ok_or_else(|| FormatError::Manifest(format!("manifest references missing tensor '{name}'")).into())
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        let t = self.take(name)?;
        let data = t.to_f32()?;
        if data.len() != len {
            return Err(Error::shape(
                format!("tensor '{name}'"),
                format!("expected {len} elements, found {}", data.len()),
            ));
        }
        Ok(data)
    }
}

/// Decodes LDFC bytes into a validated graph.
pub fn read_model(bytes: &[u8]) -> Result<NetworkGraph> {
    let (manifest, tensors) = read_container(MODEL_MAGIC, bytes)?;
    let meta: ModelMeta = serde_json::from_value(manifest).map_err(|e| FormatError::Manifest(e.to_string()))?;
    if meta.format != "ldfc" {
        return Err(FormatError::Manifest(format!("unexpected format tag '{}'", meta.format)).into());
    }
    let mut table = TensorTable(tensors.into_iter().map(|t| (t.name.clone(), t)).collect());
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut blocks = Vec::with_capacity(meta.blocks.len());
    for (i, e) in meta.blocks.into_iter().enumerate() {
        let combine = match e.combine.as_str() {
            "single" => Combine::Single,
            "add" => Combine::Add,
            "concat" | "cat" | "concatenate" => return Err(FormatError::UnsupportedCombine(e.combine).into()),
            other => return Err(FormatError::Manifest(format!("unknown combine '{other}'")).into()),
        };
        let predecessors = e
            .predecessors
            .iter()
            .map(|p| {
                index.get(p).copied().ok_or_else(|| {
                    Error::from(FormatError::NotDag(format!(
                        "block '{}' reads '{p}', which is not an earlier block",
                        e.id
                    )))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w = table.take(&e.conv.weight)?;
        let weight = Tensor::new(w.shape.clone(), w.to_f32()?)?;
        let c_out = weight.shape().first().copied().unwrap_or(0);
        let bias = Tensor::new(vec![c_out], table.vector(&e.conv.bias, c_out)?)?;
        let conv = ConvSpec::new(weight, bias, e.conv.stride, e.conv.padding, e.conv.groups)
            .map_err(|err| err.in_block(&e.id))?;
        let c_in = conv.in_channels();
        let batchnorm = match e.batchnorm {
            Some(bn) => Some(BatchNormParams {
                mu: table.vector(&bn.mu, c_out)?,
                sigma: table.vector(&bn.sigma, c_out)?,
                gamma: table.vector(&bn.gamma, c_out)?,
                beta: table.vector(&bn.beta, c_out)?,
                eps: bn.eps,
            }),
            None => None,
        };
        let eq = match e.eq {
            Some(p) => EqBuffers {
                v_in: table.vector(&p.v_in, c_in)?,
                v_out: table.vector(&p.v_out, c_out)?,
            },
            None => EqBuffers::ones(c_in, c_out),
        };
        let stats = match e.stats {
            Some(s) => Some(ChannelStats {
                mean: table.vector(&s.mean, c_out)?,
                std: table.vector(&s.std, c_out)?,
            }),
            None => None,
        };
        index.insert(e.id.clone(), i);
        let mut block = Block {
            id: e.id,
            conv,
            batchnorm,
            activation: e.activation,
            eq,
            predecessors,
            combine,
            pool: e.pool,
            stats,
            weight_quant: e.weight_quant,
            act_quant: e.act_quant,
            str_state: e.str_state,
        };
        block.snapshot_stats();
        blocks.push(block);
    }
    if let Some(name) = table.0.keys().next() {
        return Err(FormatError::Manifest(format!("tensor '{name}' is not referenced by any block")).into());
    }
    let output = *index
        .get(&meta.output)
        .ok_or_else(|| FormatError::Manifest(format!("unknown output block '{}'", meta.output)))?;
    let graph = NetworkGraph::new(blocks, meta.input_shape)?;
    if graph.output != output {
        return Err(FormatError::NotDag(format!("declared output '{}' is not the unique sink", meta.output)).into());
    }
    Ok(graph)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    read_model(&fs::read(path)?)
}

pub fn save_model(graph: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_model(graph)?)?;
    Ok(())
}
