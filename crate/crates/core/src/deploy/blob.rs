//! Binary helper blob.
//!
//! ```text
//! 0   "CNNH"
//! 4   version (u8)
//! 5   p (u8)
//! 6   m (u16 LE)
//! 8   history_len (u16 LE)
//! 10  reserved, zero up to byte 16
//! 16  t (i64 LE)
//! 24  table S plane, table V plane, Layer-2 S plane, Layer-2 V plane
//! ```
//!
//! Each plane is packed bit `k` at byte `k / 8`, bit `k % 8`, padded with
//! zero bits to a whole byte.

use super::{BitPlanes, DeployError, DeployedHelper, LookupTable};

pub const BLOB_MAGIC: &[u8; 4] = b"CNNH";
pub const BLOB_VERSION: u8 = 0x01;
pub const BLOB_HEADER_LEN: usize = 16;

pub fn serialize_helper(helper: &DeployedHelper) -> Result<Vec<u8>, DeployError> {
    let m = u16::try_from(helper.m())
        .map_err(|_| DeployError::Dimension(format!("m = {} exceeds u16", helper.m())))?;
    let len = u16::try_from(helper.history_len()).map_err(|_| {
        DeployError::Dimension(format!(
            "history_len = {} exceeds u16",
            helper.history_len()
        ))
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.push(BLOB_VERSION);
    out.push(helper.p());
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.resize(BLOB_HEADER_LEN, 0);
    out.extend_from_slice(&helper.threshold().to_le_bytes());
    for planes in [helper.table().planes(), helper.l2_planes()] {
        out.extend(BitPlanes::plane_bytes(planes.sign_words(), planes.len()));
        out.extend(BitPlanes::plane_bytes(planes.value_words(), planes.len()));
    }
    Ok(out)
}

pub fn deserialize_helper(bytes: &[u8]) -> Result<DeployedHelper, DeployError> {
    let fmt = |msg: String| DeployError::Format(msg);
    if bytes.len() < BLOB_HEADER_LEN + 8 {
        return Err(fmt(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != BLOB_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    if bytes[4] != BLOB_VERSION {
        return Err(fmt(format!("unsupported version {}", bytes[4])));
    }
    let p = bytes[5];
    let m = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes[10..BLOB_HEADER_LEN].iter().any(|&b| b != 0) {
        return Err(fmt("nonzero reserved header bytes".into()));
    }
    if !(2..=16).contains(&p) || m == 0 || len == 0 {
        return Err(DeployError::Dimension(format!(
            "p = {p}, m = {m}, history_len = {len}"
        )));
    }
    let t = i64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let table_codes = (1usize << p) * m;
    let l2_codes = len * m;
    let tb = table_codes.div_ceil(8);
    let lb = l2_codes.div_ceil(8);
    let expected = 24 + 2 * tb + 2 * lb;
    if bytes.len() != expected {
        return Err(fmt(format!(
            "expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut at = 24;
    let mut take = |n: usize| {
        let s = &bytes[at..at + n];
        at += n;
        s
    };
    let (ts, tv) = (take(tb), take(tb));
    let table = LookupTable::from_planes(p, m, BitPlanes::from_plane_bytes(ts, tv, table_codes)?);
    let (ls, lv) = (take(lb), take(lb));
    let l2 = BitPlanes::from_plane_bytes(ls, lv, l2_codes)?;
    DeployedHelper::from_parts(table, len, l2, t)
}
