//! Active-parameter payloads and their binary wire format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   "FSPU" | version u8 = 1 | client_id u32 | round u32 | n_k u32
//!          | status u8 | layer_count u16
//! layer l  layer_index u16 | active_count u32 | active_count x u32 indices
//!          | values (l >= 1 only): f32 weights over active_out x active_in,
//!            row-major, then f32 biases of the active_out neurons
//! ```
//!
//! One layer record exists per neuron layer, input and output included. The
//! input layer carries no values. Indices are strictly increasing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{MaskError, NeuronMask};
use crate::nn::{Architecture, Model};

pub const MAGIC: [u8; 4] = *b"FSPU";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 4 + 1 + 4 + 4 + 4 + 1 + 2;
const LAYER_HEADER_BYTES: usize = 2 + 4;
const INDEX_BYTES: usize = 4;
const VALUE_BYTES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported payload version {0}")]
    UnsupportedVersion(u8),
    #[error("payload truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("indices of layer {layer} are not strictly increasing")]
    NonMonotoneIndices { layer: usize },
    #[error("invalid status byte {0}")]
    InvalidStatus(u8),
    #[error("layer record {found} where {expected} was expected")]
    LayerOutOfOrder { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("payload does not fit architecture: {0}")]
    ArchMismatch(String),
}

impl ProtocolError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            ProtocolError::BadMagic(_) => 1,
            ProtocolError::UnsupportedVersion(_) => 2,
            ProtocolError::Truncated { .. } => 3,
            ProtocolError::NonMonotoneIndices { .. } => 4,
            ProtocolError::InvalidStatus(_) => 5,
            ProtocolError::LayerOutOfOrder { .. } => 6,
            ProtocolError::TrailingBytes(_) => 7,
            ProtocolError::ArchMismatch(_) => 8,
        }
    }
}

impl From<MaskError> for ProtocolError {
    fn from(e: MaskError) -> Self {
        ProtocolError::ArchMismatch(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientStatus {
    On,
    Stopped,
}

impl ClientStatus {
    fn to_byte(self) -> u8 {
        match self {
            ClientStatus::On => 0,
            ClientStatus::Stopped => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ClientStatus::On),
            1 => Ok(ClientStatus::Stopped),
            other => Err(ProtocolError::InvalidStatus(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadMeta {
    pub client_id: u32,
    pub round: u32,
    pub n_k: u32,
    pub status: ClientStatus,
}

/// One neuron layer of a payload.
#[derive(Debug, Clone, PartialEq)]
pub struct PayloadLayer {
    pub neurons: Vec<u32>,
    /// Weights then biases of the parameters entering this layer. Empty for
    /// the input layer.
    pub values: Vec<f64>,
}

/// Active neuron positions plus the values of every parameter they span.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivePayload {
    pub meta: PayloadMeta,
    pub layers: Vec<PayloadLayer>,
}

/// Location of one parameter inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Weight layer `l` (1-based), flat row-major offset.
    Weight(usize, usize),
    /// Weight layer `l`, bias of output neuron `i`.
    Bias(usize, usize),
}

/// Visit every parameter spanned by `active`, in wire order.
pub fn for_each_slot(arch: &Architecture, active: &[Vec<usize>], mut f: impl FnMut(Slot)) {
    for l in 1..arch.neuron_layers() {
        let (fan_in, _) = arch.fans(l);
        for &i in &active[l] {
            for &j in &active[l - 1] {
                f(Slot::Weight(l, i * fan_in + j));
            }
        }
        for &i in &active[l] {
            f(Slot::Bias(l, i));
        }
    }
}

pub fn read_slot(model: &Model, slot: Slot) -> f64 {
    match slot {
        Slot::Weight(l, k) => model.layer(l).weights[k],
        Slot::Bias(l, i) => model.layer(l).bias[i],
    }
}

pub fn slot_mut(model: &mut Model, slot: Slot) -> &mut f64 {
    match slot {
        Slot::Weight(l, k) => &mut model.layer_mut(l).weights[k],
        Slot::Bias(l, i) => &mut model.layer_mut(l).bias[i],
    }
}

fn mask_indices(nm: &NeuronMask) -> Vec<Vec<usize>> {
    (0..nm.arch().neuron_layers())
        .map(|l| nm.active_indices(l))
        .collect()
}

impl ActivePayload {
    /// Collect the values of `model` at the positions spanned by `nm`.
    pub fn extract(model: &Model, nm: &NeuronMask, meta: PayloadMeta) -> Result<Self> {
        if nm.arch() != model.arch() {
            return Err(ProtocolError::ArchMismatch(format!(
                "mask for {:?}, model {:?}",
                nm.arch().widths(),
                model.arch().widths()
            )));
        }
        let active = mask_indices(nm);
        let mut layers: Vec<PayloadLayer> = active
            .iter()
            .map(|idx| PayloadLayer {
                neurons: idx.iter().map(|&i| i as u32).collect(),
                values: Vec::new(),
            })
            .collect();
        for_each_slot(model.arch(), &active, |slot| {
            let l = match slot {
                Slot::Weight(l, _) | Slot::Bias(l, _) => l,
            };
            layers[l].values.push(read_slot(model, slot));
        });
        Ok(Self { meta, layers })
    }

    pub fn active_indices(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| l.neurons.iter().map(|&i| i as usize).collect())
            .collect()
    }

    /// Reconstruct the neuron mask, checking the payload against `arch`.
    pub fn neuron_mask(&self, arch: &Architecture) -> Result<NeuronMask> {
        let nm = NeuronMask::from_indices(arch, &self.active_indices())?;
        for l in 1..arch.neuron_layers() {
            let expect = self.layers[l].neurons.len() * (self.layers[l - 1].neurons.len() + 1);
            if self.layers[l].values.len() != expect {
                return Err(ProtocolError::ArchMismatch(format!(
                    "layer {l} carries {} values, mask spans {expect}",
                    self.layers[l].values.len()
                )));
            }
        }
        if !self.layers[0].values.is_empty() {
            return Err(ProtocolError::ArchMismatch("input layer carries values".into()));
        }
        Ok(nm)
    }

    /// Values in wire order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.values.iter())
    }

    pub fn value_count(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    /// Copy with every value rounded to 32-bit precision, as the wire would.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for v in &mut layer.values {
                *v = *v as f32 as f64;
            }
        }
        out
    }

    pub fn wire_len(&self) -> usize {
        HEADER_BYTES
            + self
                .layers
                .iter()
                .map(|l| LAYER_HEADER_BYTES + INDEX_BYTES * l.neurons.len() + VALUE_BYTES * l.values.len())
                .sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.meta.client_id.to_le_bytes());
        out.extend_from_slice(&self.meta.round.to_le_bytes());
        out.extend_from_slice(&self.meta.n_k.to_le_bytes());
        out.push(self.meta.status.to_byte());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend_from_slice(&(l as u16).to_le_bytes());
            out.extend_from_slice(&(layer.neurons.len() as u32).to_le_bytes());
            for &i in &layer.neurons {
                out.extend_from_slice(&i.to_le_bytes());
            }
            for &v in &layer.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }
}

/// Serialize the parameters of `model` spanned by `nm`.
pub fn encode_payload(model: &Model, nm: &NeuronMask, meta: PayloadMeta) -> Result<Vec<u8>> {
    Ok(ActivePayload::extract(model, nm, meta)?.encode())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(ProtocolError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse a payload. Values come back widened from 32-bit floats.
pub fn decode_payload(bytes: &[u8]) -> Result<ActivePayload> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let client_id = r.u32()?;
    let round = r.u32()?;
    let n_k = r.u32()?;
    let status = ClientStatus::from_byte(r.u8()?)?;
    let layer_count = r.u16()? as usize;

    let mut layers: Vec<PayloadLayer> = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let found = r.u16()? as usize;
        if found != l {
            return Err(ProtocolError::LayerOutOfOrder { expected: l, found });
        }
        let count = r.u32()? as usize;
        // Check the index block exists before allocating for it.
        let available = bytes.len() - r.pos;
        if count.saturating_mul(INDEX_BYTES) > available {
            return Err(ProtocolError::Truncated {
                offset: r.pos,
                needed: count * INDEX_BYTES,
                available,
            });
        }
        let mut neurons = Vec::with_capacity(count);
        for _ in 0..count {
            let i = r.u32()?;
            if neurons.last().is_some_and(|&prev| i <= prev) {
                return Err(ProtocolError::NonMonotoneIndices { layer: l });
            }
            neurons.push(i);
        }
        let n_values = match layers.last() {
            Some(prev) => count * prev.neurons.len() + count,
            None => 0,
        };
        let mut values = Vec::with_capacity(n_values.min(bytes.len() / VALUE_BYTES));
        for _ in 0..n_values {
            values.push(r.f32()? as f64);
        }
        layers.push(PayloadLayer { neurons, values });
    }
    if r.pos != bytes.len() {
        return Err(ProtocolError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(ActivePayload {
        meta: PayloadMeta {
            client_id,
            round,
            n_k,
            status,
        },
        layers,
    })
}

/// Byte breakdown of an encoded payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireSize {
    pub header_bytes: usize,
    /// Per-layer records: layer index, count and neuron indices.
    pub index_bytes: usize,
    pub param_bytes: usize,
    pub total_bytes: usize,
}

/// Closed-form size of the payload `nm` would produce.
pub fn payload_wire_size(nm: &NeuronMask, arch: &Architecture) -> Result<WireSize> {
    if nm.arch() != arch {
        return Err(ProtocolError::ArchMismatch("mask architecture".into()));
    }
    let counts: Vec<usize> = (0..arch.neuron_layers()).map(|l| nm.active_in_layer(l)).collect();
    let index_bytes: usize = counts
        .iter()
        .map(|&c| LAYER_HEADER_BYTES + INDEX_BYTES * c)
        .sum();
    let values: usize = counts.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
    let param_bytes = VALUE_BYTES * values;
    Ok(WireSize {
        header_bytes: HEADER_BYTES,
        index_bytes,
        param_bytes,
        total_bytes: HEADER_BYTES + index_bytes + param_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_neuron_mask, MaskStrategy};
    use crate::nn::init_model;
    use crate::rng::{stream, Purpose};

    fn arch(w: &[usize]) -> Architecture {
        Architecture::new(w.to_vec()).unwrap()
    }

    fn meta() -> PayloadMeta {
        PayloadMeta {
            client_id: 4,
            round: 9,
            n_k: 70,
            status: ClientStatus::On,
        }
    }

    fn sample(a: &Architecture, p: f64, seed: u64) -> (Model, NeuronMask) {
        let m = init_model(a, seed);
        let nm = sample_neuron_mask(a, p, MaskStrategy::Random, None, &mut stream(seed, Purpose::Mask, &[]))
            .unwrap();
        (m, nm)
    }

    #[test]
    fn test_full_mask_value_count() {
        let a = arch(&[2, 2, 2]);
        let m = init_model(&a, 1);
        let p = ActivePayload::extract(&m, &NeuronMask::full(&a), meta()).unwrap();
        assert_eq!(p.value_count(), 12);
        let size = payload_wire_size(&NeuronMask::full(&a), &a).unwrap();
        assert_eq!(size.param_bytes, 48);
    }

    #[test]
    fn test_width_one_hidden_layer() {
        let a = arch(&[3, 1, 2]);
        let (m, nm) = sample(&a, 0.05, 2);
        let bytes = encode_payload(&m, &nm, meta()).unwrap();
        let back = decode_payload(&bytes).unwrap();
        assert_eq!(back.layers[1].neurons, vec![0]);
        assert_eq!(back.value_count(), (3 + 1) + (2 + 2));
    }

    #[test]
    fn test_header_layout() {
        let a = arch(&[2, 2, 2]);
        let m = init_model(&a, 1);
        let bytes = encode_payload(&m, &NeuronMask::full(&a), meta()).unwrap();
        assert_eq!(&bytes[0..4], b"FSPU");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &4u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &9u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &70u32.to_le_bytes());
        assert_eq!(bytes[17], 0);
        assert_eq!(&bytes[18..20], &3u16.to_le_bytes());
        // first layer record: index 0, two neurons 0 and 1
        assert_eq!(&bytes[20..22], &0u16.to_le_bytes());
        assert_eq!(&bytes[22..26], &2u32.to_le_bytes());
        assert_eq!(&bytes[26..30], &0u32.to_le_bytes());
        assert_eq!(&bytes[30..34], &1u32.to_le_bytes());
        // layer 1 record then its first weight W1[0,0]
        assert_eq!(&bytes[34..36], &1u16.to_le_bytes());
        let w = f32::from_le_bytes(bytes[48..52].try_into().unwrap());
        assert_eq!(w, m.layer(1).weight(0, 0) as f32);
    }

    #[test]
    fn test_roundtrip_is_f32_exact() {
        let a = arch(&[5, 12, 9, 3]);
        let (m, nm) = sample(&a, 0.4, 3);
        let p = ActivePayload::extract(&m, &nm, meta()).unwrap();
        let back = decode_payload(&p.encode()).unwrap();
        assert_eq!(back, p.quantized());
        assert_eq!(back.neuron_mask(&a).unwrap(), NeuronMask::from_indices(&a, &p.active_indices()).unwrap());
    }

    #[test]
    fn test_size_matches_encoding() {
        for (seed, p) in [(1, 0.2), (2, 0.5), (3, 1.0), (4, 0.8)] {
            let a = arch(&[7, 20, 13, 4]);
            let (m, nm) = sample(&a, p, seed);
            let size = payload_wire_size(&nm, &a).unwrap();
            let bytes = encode_payload(&m, &nm, meta()).unwrap();
            assert_eq!(size.total_bytes, bytes.len());
            assert_eq!(size.total_bytes, size.header_bytes + size.index_bytes + size.param_bytes);
        }
    }

    #[test]
    fn test_index_overhead_small_for_wide_layer() {
        let a = arch(&[784, 1000, 10]);
        let (_, nm) = sample(&a, 0.2, 5);
        let size = payload_wire_size(&nm, &a).unwrap();
        let ratio = size.index_bytes as f64 / size.param_bytes as f64;
        assert!(ratio < 0.05, "{ratio}");
    }

    #[test]
    fn test_malformed_inputs() {
        let a = arch(&[3, 4, 2]);
        let (m, nm) = sample(&a, 0.5, 6);
        let good = encode_payload(&m, &nm, meta()).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_payload(&bad), Err(ProtocolError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode_payload(&bad), Err(ProtocolError::UnsupportedVersion(2)));

        let bad = &good[..good.len() - 3];
        assert!(matches!(decode_payload(bad), Err(ProtocolError::Truncated { .. })));

        let mut bad = good.clone();
        bad[17] = 7;
        assert_eq!(decode_payload(&bad), Err(ProtocolError::InvalidStatus(7)));

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(decode_payload(&bad), Err(ProtocolError::TrailingBytes(1)));

        // swap the first two input indices
        let mut bad = good.clone();
        bad[26..30].copy_from_slice(&1u32.to_le_bytes());
        bad[30..34].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode_payload(&bad), Err(ProtocolError::NonMonotoneIndices { layer: 0 }));

        let mut bad = good.clone();
        bad[20..22].copy_from_slice(&5u16.to_le_bytes());
        assert_eq!(
            decode_payload(&bad),
            Err(ProtocolError::LayerOutOfOrder { expected: 0, found: 5 })
        );
    }

    #[test]
    fn test_error_codes_distinct() {
        let errs = [
            ProtocolError::BadMagic(*b"XXXX"),
            ProtocolError::UnsupportedVersion(0),
            ProtocolError::Truncated { offset: 0, needed: 1, available: 0 },
            ProtocolError::NonMonotoneIndices { layer: 0 },
            ProtocolError::InvalidStatus(9),
            ProtocolError::LayerOutOfOrder { expected: 0, found: 1 },
            ProtocolError::TrailingBytes(1),
            ProtocolError::ArchMismatch(String::new()),
        ];
        let mut codes: Vec<u8> = errs.iter().map(ProtocolError::code).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), errs.len());
    }

    #[test]
    fn test_payload_arch_checks() {
        let a = arch(&[3, 4, 2]);
        let (m, nm) = sample(&a, 0.5, 6);
        let p = ActivePayload::extract(&m, &nm, meta()).unwrap();
        assert!(p.neuron_mask(&arch(&[3, 4, 3])).is_err());
        assert!(p.neuron_mask(&arch(&[4, 4, 2])).is_err());
        assert!(ActivePayload::extract(&init_model(&arch(&[3, 5, 2]), 1), &nm, meta()).is_err());
    }
}
