//! `GDEC` checkpoints: same layout idea as `RFLW`, with decoder sizes.

use std::path::Path;

use super::{DecoderConfig, GaussianDecoder};
use crate::format::{put_f64, put_u32, put_u64, read_file, write_atomic, FormatError, Reader};

const MAGIC: &[u8; 4] = b"GDEC";
const VERSION: u32 = 1;
const MAX_DIM: u32 = 1 << 12;

pub fn encode_decoder(d: &GaussianDecoder) -> Vec<u8> {
    let c = &d.cfg;
    let mut out = Vec::with_capacity(48 + 8 * d.params.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for v in [c.dim, c.heads, c.blocks, c.mlp_hidden, c.head_mid, c.head_out] {
        put_u32(&mut out, v as u32);
    }
    put_u64(&mut out, d.seed);
    put_u64(&mut out, d.params.len() as u64);
    for &p in &d.params {
        put_f64(&mut out, p);
    }
    out
}

pub fn decode_decoder(bytes: &[u8]) -> Result<GaussianDecoder, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Unsupported {
            what: "GDEC version",
            value: version as u64,
        });
    }
    let mut v = [0usize; 6];
    for x in v.iter_mut() {
        let d = r.u32()?;
        if d > MAX_DIM {
            return Err(FormatError::Unsupported {
                what: "decoder dimension",
                value: d as u64,
            });
        }
        *x = d as usize;
    }
    if v[0] == 0 || v[1] == 0 || v[2] > 64 || v[3] == 0 || v[4] == 0 || v[5] == 0 {
        return Err(FormatError::Invalid("decoder architecture out of range".into()));
    }
    let cfg = DecoderConfig {
        dim: v[0],
        heads: v[1],
        blocks: v[2],
        mlp_hidden: v[3],
        head_mid: v[4],
        head_out: v[5],
    };
    let seed = r.u64()?;
    let n = r.u64()?;
    let need = n.saturating_mul(8);
    if need > r.remaining() as u64 {
        return Err(FormatError::Truncated {
            need: need.min(usize::MAX as u64) as usize,
            have: r.remaining(),
        });
    }
    if need < r.remaining() as u64 {
        return Err(FormatError::Invalid("trailing bytes after parameters".into()));
    }
    let mut params = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let p = r.f64()?;
        if !p.is_finite() {
            return Err(FormatError::Invalid("non-finite parameter".into()));
        }
        params.push(p);
    }
    r.finish()?;
    GaussianDecoder::from_parts(cfg, seed, params)
        .ok_or_else(|| FormatError::Invalid("parameter count does not match architecture".into()))
}

pub fn write_decoder(path: &Path, d: &GaussianDecoder) -> Result<(), FormatError> {
    write_atomic(path, &encode_decoder(d))
}

pub fn read_decoder(path: &Path) -> Result<GaussianDecoder, FormatError> {
    decode_decoder(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_rejection() {
        let cfg = DecoderConfig {
            dim: 8,
            heads: 2,
            blocks: 1,
            mlp_hidden: 8,
            head_mid: 4,
            head_out: 4,
        };
        let d = GaussianDecoder::new(cfg, 5);
        let bytes = encode_decoder(&d);
        let back = decode_decoder(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_decoder(&back), bytes);
        assert!(decode_decoder(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9; // dim 9 is not divisible by 2 heads
        assert!(decode_decoder(&wrong).is_err());
    }
}
