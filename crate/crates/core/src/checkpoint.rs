//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "COMETCKP" | u32 version | u32 header_len | header JSON (spec + baseline config)
//! u32 section_count | sections... | u32 CRC-32 of every preceding byte
//! ```
//!
//! A section is `u8 kind | u16 group | u16 layer | u32 rows | u32 cols | payload`.
//! Weight, bias, routing and gate-projection payloads are `rows * cols` `f32`s;
//! a mask-table payload is `u64 len` followed by the table bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{MlpSpec, ModelParams, Variant};
use crate::baselines::{BaselineConfig, Gate, MaskTable, MoeParams};
use crate::error::{CometError, Result};
use crate::model::{Body, Model};
use crate::numerics::Matrix;
use crate::routing::RoutingParams;

pub const MAGIC: &[u8; 8] = b"COMETCKP";
pub const VERSION: u32 = 1;

const KIND_WEIGHT: u8 = 1;
const KIND_BIAS: u8 = 2;
const KIND_ROUTING: u8 = 3;
const KIND_GATE_PROJECTION: u8 = 4;
const KIND_MASK_TABLE: u8 = 5;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: MlpSpec,
    baseline: BaselineConfig,
}

fn put_section(out: &mut Vec<u8>, kind: u8, group: usize, layer: usize, rows: usize, cols: usize, data: &[f32]) {
    out.push(kind);
    out.extend_from_slice(&(group as u16).to_le_bytes());
    out.extend_from_slice(&(layer as u16).to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        spec: model.spec().clone(),
        baseline: model.baseline().clone(),
    })?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);

    let mut body = Vec::new();
    let mut count = 0u32;
    let mut put_params = |body: &mut Vec<u8>, group: usize, p: &ModelParams| {
        for (l, (w, b)) in p.weights.iter().zip(&p.biases).enumerate() {
            put_section(body, KIND_WEIGHT, group, l, w.rows(), w.cols(), w.as_slice());
            put_section(body, KIND_BIAS, group, l, 1, b.len(), b);
            count += 2;
        }
    };
    match model.body() {
        Body::Dense(p) => put_params(&mut body, 0, p),
        Body::Moe(m) => {
            for (g, e) in m.experts.iter().enumerate() {
                put_params(&mut body, g, e);
            }
            match &m.gate {
                Gate::Trainable(g) => put_params(&mut body, m.experts.len(), g),
                Gate::Fixed(v) => {
                    put_section(&mut body, KIND_GATE_PROJECTION, 0, 0, v.rows(), v.cols(), v.as_slice());
                    count += 1;
                }
            }
        }
    }
    if let Some(r) = model.routing() {
        for (l, v) in r.matrices().iter().enumerate() {
            put_section(&mut body, KIND_ROUTING, 0, l, v.rows(), v.cols(), v.as_slice());
            count += 1;
        }
    }
    if let Some(t) = model.mask_table() {
        let bytes = t.to_bytes();
        put_section(&mut body, KIND_MASK_TABLE, 0, 0, 0, 0, &[]);
        body.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        body.extend_from_slice(&bytes);
        count += 1;
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CometError::Format("unexpected end of checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| CometError::Format("section too large".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[derive(Default)]
struct Group {
    weights: Vec<(usize, Matrix)>,
    biases: Vec<(usize, Vec<f32>)>,
}

impl Group {
    fn into_params(mut self) -> Result<ModelParams> {
        self.weights.sort_by_key(|(l, _)| *l);
        self.biases.sort_by_key(|(l, _)| *l);
        ModelParams::new(
            self.weights.into_iter().map(|(_, w)| w).collect(),
            self.biases.into_iter().map(|(_, b)| b).collect(),
        )
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..8] != MAGIC {
        return Err(CometError::Format("not a checkpoint (bad magic)".into()));
    }
    let (payload, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(CometError::Format("checksum mismatch".into()));
    }
    let mut cur = Cursor { bytes: payload, pos: 8 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CometError::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)?;
    let sections = cur.u32()?;

    let mut groups: Vec<Group> = Vec::new();
    let mut routing: Vec<(usize, Matrix)> = Vec::new();
    let mut gate_projection = None;
    let mut mask_table = None;
    for _ in 0..sections {
        let kind = cur.take(1)?[0];
        let group = cur.u16()? as usize;
        let layer = cur.u16()? as usize;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        if kind == KIND_MASK_TABLE {
            let len = cur.u64()? as usize;
            mask_table = Some(MaskTable::from_bytes(cur.take(len)?)?);
            continue;
        }
        let data = cur.f32s(rows * cols)?;
        match kind {
            KIND_WEIGHT | KIND_BIAS => {
                if groups.len() <= group {
                    groups.resize_with(group + 1, Group::default);
                }
                if kind == KIND_WEIGHT {
                    groups[group].weights.push((layer, Matrix::from_vec(rows, cols, data)?));
                } else {
                    groups[group].biases.push((layer, data));
                }
            }
            KIND_ROUTING => routing.push((layer, Matrix::from_vec(rows, cols, data)?)),
            KIND_GATE_PROJECTION => gate_projection = Some(Matrix::from_vec(rows, cols, data)?),
            other => return Err(CometError::Format(format!("unknown section kind {other}"))),
        }
    }
    if cur.pos != payload.len() {
        return Err(CometError::Format("trailing bytes before checksum".into()));
    }

    let mut params = groups
        .into_iter()
        .map(Group::into_params)
        .collect::<Result<Vec<_>>>()?;
    let body = match header.spec.variant {
        Variant::MoeTrainable | Variant::MoeFixed => {
            let gate = match gate_projection {
                Some(v) => Gate::Fixed(v),
                None => Gate::Trainable(
                    params
                        .pop()
                        .ok_or_else(|| CometError::Format("missing gate".into()))?,
                ),
            };
            Body::Moe(MoeParams { experts: params, gate })
        }
        _ => {
            if params.len() != 1 {
                return Err(CometError::Format("expected one parameter group".into()));
            }
            Body::Dense(params.pop().expect("one group"))
        }
    };
    let routing = if routing.is_empty() {
        None
    } else {
        routing.sort_by_key(|(l, _)| *l);
        Some(RoutingParams::new(routing.into_iter().map(|(_, m)| m).collect())?)
    };
    Model::from_parts(header.spec, header.baseline, body, routing, mask_table)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&std::fs::read(path)?)
}
