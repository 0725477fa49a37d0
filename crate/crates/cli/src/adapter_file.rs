//! Adapter weights on disk.
//!
//! Layout: magic `CODAW1`, `d` as u32 LE, `d²` f64 LE row-major, then a
//! u32 LE byte length and that many bytes of JSON training config.

use std::fs;
use std::path::Path;

use chainshift_core::repair::{AdapterW, RepairConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, IoContext, Result};

pub const MAGIC: &[u8; 6] = b"CODAW1";

/// What produced the weights, stored alongside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub config: RepairConfig,
    pub student_seed: u64,
    pub teacher_seed: u64,
    pub train_seed: u64,
    pub trace: Vec<f64>,
}

pub fn encode_adapter(w: &AdapterW, meta: &AdapterMeta) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("adapter meta serializes");
    let d = u32::try_from(w.dim()).expect("adapter dim fits u32");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + 8 * w.as_slice().len() + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&d.to_le_bytes());
    w.as_slice().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out.extend_from_slice(&u32::try_from(json.len()).expect("config fits u32").to_le_bytes());
    out.extend_from_slice(&json);
    out
}

pub fn decode_adapter(bytes: &[u8]) -> Result<(AdapterW, AdapterMeta)> {
    let bad = |msg: &str| HarnessError::format(format!("adapter file: {msg}"));
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| bad("bad magic"))?;
    let (d, rest) = take_u32(rest).ok_or_else(|| bad("truncated header"))?;
    let n = (d as usize).checked_mul(d as usize).ok_or_else(|| bad("dimension overflow"))?;
    if rest.len() < 8 * n {
        return Err(bad("truncated weights"));
    }
    let (weights, rest) = rest.split_at(8 * n);
    let data = weights.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let (len, rest) = take_u32(rest).ok_or_else(|| bad("missing config length"))?;
    if rest.len() != len as usize {
        return Err(bad("config length does not match file size"));
    }
    let meta = serde_json::from_slice(rest).map_err(|e| bad(&e.to_string()))?;
    Ok((AdapterW::from_vec(d as usize, data)?, meta))
}

fn take_u32(b: &[u8]) -> Option<(u32, &[u8])> {
    let (head, rest) = b.split_first_chunk::<4>()?;
    Some((u32::from_le_bytes(*head), rest))
}

pub fn write_adapter(path: &Path, w: &AdapterW, meta: &AdapterMeta) -> Result<()> {
    fs::write(path, encode_adapter(w, meta)).at(path)
}

pub fn read_adapter(path: &Path) -> Result<(AdapterW, AdapterMeta)> {
    decode_adapter(&fs::read(path).at(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_bit_exactly_and_rejects_damage() {
        let data: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 1e-3 + f64::EPSILON).collect();
        let w = AdapterW::from_vec(3, data).unwrap();
        let meta = AdapterMeta { config: RepairConfig::default(), student_seed: 1, teacher_seed: 2, train_seed: 3, trace: vec![0.5, 0.25] };
        let bytes = encode_adapter(&w, &meta);
        assert_eq!(&bytes[..6], b"CODAW1");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        let (w2, meta2) = decode_adapter(&bytes).unwrap();
        assert_eq!(w2.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), w.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(meta2, meta);
        assert!(decode_adapter(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_adapter(&bytes[1..]).is_err());
        let mut extra = bytes.clone();
        extra.push(b' ');
        assert!(decode_adapter(&extra).is_err());
    }
}
