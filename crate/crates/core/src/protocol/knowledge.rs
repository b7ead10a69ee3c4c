//! Knowledge triplets and their upload encoding.
//!
//! Each triplet is sent as one length-prefixed little-endian record:
//!
//! ```text
//! u32 body length (bytes after this field)
//! u32 client id
//! u16 boundary layer (1-based)
//! tensor H1
//! tensor Hl
//! u32 label count, then u16 per label
//! ```
//!
//! A tensor is `u8 rank`, `rank × u32` dimensions, then the `f64` values.
//! Records for one client are concatenated.

use super::ProtocolError;
use crate::data::Dataset;
use crate::nn::{forward_prefix, forward_range, ModelParams, ModelSpec, Tensor};

/// First-layer features, boundary features and labels for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeTriplet {
    pub h1: Tensor,
    pub hl: Tensor,
    pub labels: Vec<usize>,
}

/// A decoded upload record.
#[derive(Clone, Debug, PartialEq)]
pub struct WireRecord {
    pub client_id: usize,
    pub layer: usize,
    pub triplet: KnowledgeTriplet,
}

/// Computes the triplet for one batch of a client's training data.
pub fn extract_local_knowledge(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Dataset,
    batch: &[usize],
    layer: usize,
) -> Result<KnowledgeTriplet, ProtocolError> {
    if layer == 0 || layer > spec.num_layers() {
        return Err(ProtocolError::Config(format!("boundary {layer} outside 1..={}", spec.num_layers())));
    }
    let (x, labels) = data.batch(batch);
    let h1 = forward_prefix(spec, params, &x, 1)?;
    let hl = forward_range(spec, params, &h1, 1, layer)?;
    Ok(KnowledgeTriplet { h1, hl, labels })
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Encodes a client's triplets for upload.
pub fn encode_knowledge(
    client_id: usize,
    layer: usize,
    triplets: &[KnowledgeTriplet],
) -> Result<Vec<u8>, ProtocolError> {
    let id = u32::try_from(client_id).map_err(|_| wire(0, format!("client id {client_id} exceeds u32")))?;
    let layer = u16::try_from(layer).map_err(|_| wire(0, format!("layer {layer} exceeds u16")))?;
    let mut out = Vec::new();
    for t in triplets {
        let mut body = Vec::new();
        body.extend_from_slice(&id.to_le_bytes());
        body.extend_from_slice(&layer.to_le_bytes());
        put_tensor(&mut body, &t.h1);
        put_tensor(&mut body, &t.hl);
        body.extend_from_slice(&(t.labels.len() as u32).to_le_bytes());
        for &y in &t.labels {
            let y = u16::try_from(y).map_err(|_| wire(out.len(), format!("label {y} exceeds u16")))?;
            body.extend_from_slice(&y.to_le_bytes());
        }
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
    }
    Ok(out)
}

fn wire(offset: usize, msg: String) -> ProtocolError {
    ProtocolError::Wire { offset, msg }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], ProtocolError> {
        if self.end - self.pos < n {
            return Err(wire(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor, ProtocolError> {
        let at = self.pos;
        let rank = self.take(1, what)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(what)? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.end - self.pos));
        let n = n.ok_or_else(|| wire(at, format!("{what} dimensions {shape:?} exceed the record")))?;
        let data = self.take(n * 8, what)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|e| wire(at, format!("{what}: {e}")))
    }
}

/// Parses concatenated upload records.
pub fn decode_knowledge(bytes: &[u8]) -> Result<Vec<WireRecord>, ProtocolError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let mut head = Reader { bytes, pos, end: bytes.len() };
        let len = head.u32("record length")? as usize;
        let end = head.pos.checked_add(len).filter(|&e| e <= bytes.len());
        let end = end.ok_or_else(|| wire(pos, format!("record length {len} runs past the end")))?;
        let mut r = Reader { bytes, pos: head.pos, end };
        let client_id = r.u32("client id")? as usize;
        let layer = r.u16("layer")? as usize;
        let h1 = r.tensor("H1")?;
        let hl = r.tensor("Hl")?;
        let count = r.u32("label count")? as usize;
        let mut labels = Vec::with_capacity(count.min(len / 2));
        for _ in 0..count {
            labels.push(r.u16("labels")? as usize);
        }
        if r.pos != end {
            return Err(wire(r.pos, format!("{} trailing bytes in record", end - r.pos)));
        }
        out.push(WireRecord { client_id, layer, triplet: KnowledgeTriplet { h1, hl, labels } });
        pos = end;
    }
    Ok(out)
}
