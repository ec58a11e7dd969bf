//! Versioned binary container: magic, version, a JSON header and
//! length-prefixed binary blobs.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ByteReader;

pub(crate) fn encode<H: Serialize>(
    magic: &[u8; 8],
    version: u32,
    header: &H,
    blobs: &[Vec<u8>],
) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out =
        Vec::with_capacity(24 + json.len() + blobs.iter().map(|b| b.len() + 8).sum::<usize>());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in blobs {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        out.extend_from_slice(b);
    }
    Ok(out)
}

pub(crate) fn decode<H: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 8],
    version: u32,
) -> Result<(H, Vec<Vec<u8>>)> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(8)? != magic {
        return Err(Error::Format(format!(
            "bad magic bytes, expected {}",
            String::from_utf8_lossy(magic).trim_end_matches('\0')
        )));
    }
    let found = r.u32()?;
    if found != version {
        return Err(Error::Format(format!(
            "container version {found}, expected {version}"
        )));
    }
    let len = r.u64()? as usize;
    let header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("container header: {e}")))?;
    let count = r.u32()? as usize;
    let mut blobs = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u64()? as usize;
        blobs.push(r.take(len)?.to_vec());
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after container".into()));
    }
    Ok((header, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let bytes = encode(b"TESTCONT", 3, &vec![1, 2, 3], &[vec![9, 8], vec![]]).unwrap();
        let (h, blobs): (Vec<i32>, _) = decode(&bytes, b"TESTCONT", 3).unwrap();
        assert_eq!(h, vec![1, 2, 3]);
        assert_eq!(blobs, vec![vec![9, 8], vec![]]);
        for cut in 0..bytes.len() {
            assert!(decode::<Vec<i32>>(&bytes[..cut], b"TESTCONT", 3).is_err());
        }
        assert!(decode::<Vec<i32>>(&bytes, b"TESTCONT", 4).is_err());
        assert!(decode::<Vec<i32>>(&bytes, b"OTHERMAG", 3).is_err());
    }
}
