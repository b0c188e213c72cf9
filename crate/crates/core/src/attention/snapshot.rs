//! Binary parameter snapshots.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "EGAPARM1"
//! shared       u8       1 if projections are shared across views
//! entries      u32
//! per entry:
//!   view       u32
//!   scale      u32
//!   name_len   u32
//!   name       name_len bytes of UTF-8 (e.g. "w_q", "query_norm.gain")
//!   rows       u64
//!   cols       u64
//!   values     rows·cols f64, row-major
//! ```
//!
//! Entries are written in (view, scale, name) order, so equal stores give
//! byte-identical snapshots.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::params::{EgaParams, ParamStore};
use crate::error::{EgaError, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"EGAPARM1";

pub fn write_snapshot(store: &ParamStore, mut out: impl Write) -> Result<()> {
    let mut entries = Vec::new();
    for (&(view, scale), p) in store.blocks() {
        let mut named = p.named_matrices();
        named.sort_by_key(|(name, _)| *name);
        for (name, m) in named {
            entries.push((view, scale, name, m));
        }
    }
    out.write_all(MAGIC)?;
    out.write_all(&[u8::from(store.shared_projections())])?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (view, scale, name, m) in entries {
        out.write_all(&(view as u32).to_le_bytes())?;
        out.write_all(&(scale as u32).to_le_bytes())?;
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(m.rows() as u64).to_le_bytes())?;
        out.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| EgaError::Format(format!("truncated snapshot: {e}")))?;
    Ok(buf)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(input)?))
}

pub fn read_snapshot(mut input: impl Read) -> Result<ParamStore> {
    if &read_array::<8>(&mut input)? != MAGIC {
        return Err(EgaError::Format("not a parameter snapshot (bad magic)".into()));
    }
    let shared = match read_array::<1>(&mut input)?[0] {
        0 => false,
        1 => true,
        b => return Err(EgaError::Format(format!("bad shared flag {b}"))),
    };
    let count = read_u32(&mut input)?;
    let mut named: BTreeMap<(usize, usize), Vec<(String, Matrix)>> = BTreeMap::new();
    for _ in 0..count {
        let view = read_u32(&mut input)? as usize;
        let scale = read_u32(&mut input)? as usize;
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|e| EgaError::Format(format!("truncated snapshot: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| EgaError::Format(e.to_string()))?;
        let rows = read_u64(&mut input)? as usize;
        let cols = read_u64(&mut input)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(read_array(&mut input)?));
        }
        named.entry((view, scale)).or_default().push((name, Matrix::new(rows, cols, data)?));
    }
    let mut blocks = BTreeMap::new();
    for (key, entries) in named {
        let channels = entries
            .iter()
            .find(|(n, _)| n == "w_q")
            .map(|(_, m)| m.rows())
            .ok_or_else(|| EgaError::Format(format!("block {key:?} has no w_q")))?;
        let mut p = EgaParams::init(channels, None, 0);
        for (name, m) in entries {
            p.set_named(&name, m)?;
        }
        p.validate(channels, p.projection_shape())?;
        blocks.insert(key, p);
    }
    Ok(ParamStore::from_blocks(blocks, shared))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::{Preset, RigConfig};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn snapshot_round_trip(seed in any::<u64>(), shared in any::<bool>(), frames in 0usize..2) {
            let mut cfg = RigConfig::preset(Preset::Minimal).with_temporal_frames(frames);
            cfg.share_projections = shared;
            let store = ParamStore::init(&cfg, seed);
            let mut bytes = Vec::new();
            write_snapshot(&store, &mut bytes).unwrap();
            let back = read_snapshot(bytes.as_slice()).unwrap();
            prop_assert_eq!(&back, &store);
            let mut again = Vec::new();
            write_snapshot(&back, &mut again).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_snapshot(&b"NOTPARAMS"[..]), Err(EgaError::Format(_))));
        let store = ParamStore::init(&RigConfig::preset(Preset::Minimal), 1);
        let mut bytes = Vec::new();
        write_snapshot(&store, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_snapshot(bytes.as_slice()), Err(EgaError::Format(_))));
    }

    #[test]
    fn floats_are_little_endian() {
        let store = ParamStore::init(&RigConfig::preset(Preset::Minimal), 5);
        let mut bytes = Vec::new();
        write_snapshot(&store, &mut bytes).unwrap();
        // first entry is view 0, scale 0, "p_k"
        let name_len = u32::from_le_bytes(bytes[21..25].try_into().unwrap()) as usize;
        assert_eq!(&bytes[25..25 + name_len], b"p_k");
        let off = 25 + name_len + 16;
        let first = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        assert_eq!(first, store.get(0, 0).unwrap().p_k.as_ref().unwrap().get(0, 0));
    }
}
