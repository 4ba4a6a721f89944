//! DCTG files: `"DCTG"`, then little-endian u32 version, blocks_h, blocks_w,
//! channels, then the coefficients as little-endian f32 in channel-major
//! order.

use afd_core::dct_grid::{DctBlockGrid, DCT_CHANNELS};

use crate::error::{AfdError, Result};

pub const MAGIC: &[u8; 4] = b"DCTG";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_dctg(grid: &DctBlockGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, grid.blocks_h() as u32, grid.blocks_w() as u32, DCT_CHANNELS as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dctg(bytes: &[u8], context: &str) -> Result<DctBlockGrid> {
    let bad = |m: String| AfdError::format(context, m);
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing DCTG magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (version, bh, bw, channels) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
    if version != VERSION {
        return Err(bad(format!("unsupported DCTG version {version}")));
    }
    if channels != DCT_CHANNELS {
        return Err(bad(format!("expected {DCT_CHANNELS} channels, found {channels}")));
    }
    let count = bh
        .checked_mul(bw)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| bad("grid size overflows".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 4 {
        return Err(bad(format!("expected {} data bytes, found {}", count * 4, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(DctBlockGrid::new(bh, bw, data)?)
}
