//! `RFLW` checkpoints: architecture header, seed, tags and raw f64 parameters.

use std::path::Path;

use super::{FieldConfig, VelocityField};
use crate::conditions::ConditionEncoderConfig;
use crate::format::{put_f64, put_string, put_u32, put_u64, read_file, write_atomic, FormatError, Reader};

const MAGIC: &[u8; 4] = b"RFLW";
const VERSION: u32 = 1;
const MAX_DIM: u32 = 1 << 22;
const MAX_TAGS: u32 = 1 << 12;

pub fn encode_field(f: &VelocityField) -> Vec<u8> {
    let c = &f.cfg;
    let mut out = Vec::with_capacity(64 + 8 * f.params.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for v in [c.latent_dim, c.hidden, c.layers, c.s_embed, c.render_dim] {
        put_u32(&mut out, v as u32);
    }
    match &c.encoder {
        None => out.push(0),
        Some(e) => {
            out.push(1);
            for v in [
                e.max_timesteps,
                e.box_hidden,
                e.box_dim,
                e.traj_hidden,
                e.traj_dim,
                e.tag_dim,
                e.sketch_pool,
                e.sketch_dim,
                e.out_dim,
            ] {
                put_u32(&mut out, v as u32);
            }
        }
    }
    put_u32(&mut out, c.tags.len() as u32);
    for t in &c.tags {
        put_string(&mut out, t);
    }
    put_f64(&mut out, c.denom_floor);
    put_u64(&mut out, f.seed);
    put_u64(&mut out, f.params.len() as u64);
    for &p in &f.params {
        put_f64(&mut out, p);
    }
    out
}

fn dim(r: &mut Reader, what: &'static str) -> Result<usize, FormatError> {
    let v = r.u32()?;
    if v > MAX_DIM {
        return Err(FormatError::Unsupported { what, value: v as u64 });
    }
    Ok(v as usize)
}

pub fn decode_field(bytes: &[u8]) -> Result<VelocityField, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Unsupported {
            what: "RFLW version",
            value: version as u64,
        });
    }
    let latent_dim = dim(&mut r, "latent dimension")?;
    let hidden = dim(&mut r, "hidden width")?;
    let layers = dim(&mut r, "layer count")?;
    let s_embed = dim(&mut r, "time embedding")?;
    let render_dim = dim(&mut r, "render dimension")?;
    if layers > 64 || hidden > 1 << 12 || s_embed > 1 << 10 || latent_dim == 0 || hidden == 0 || s_embed % 2 == 1 {
        return Err(FormatError::Invalid("architecture out of range".into()));
    }
    if render_dim != 0 && render_dim != latent_dim {
        return Err(FormatError::Invalid("render dimension must match latent".into()));
    }
    let encoder = match r.u8()? {
        0 => None,
        1 => {
            let mut v = [0usize; 9];
            for x in v.iter_mut() {
                *x = dim(&mut r, "encoder dimension")?;
                if *x > 1 << 10 {
                    return Err(FormatError::Invalid("encoder dimension out of range".into()));
                }
            }
            if v.contains(&0) {
                return Err(FormatError::Invalid("encoder dimension must be positive".into()));
            }
            Some(ConditionEncoderConfig {
                max_timesteps: v[0],
                box_hidden: v[1],
                box_dim: v[2],
                traj_hidden: v[3],
                traj_dim: v[4],
                tag_dim: v[5],
                sketch_pool: v[6],
                sketch_dim: v[7],
                out_dim: v[8],
            })
        }
        other => {
            return Err(FormatError::Unsupported {
                what: "encoder flag",
                value: other as u64,
            })
        }
    };
    let n_tags = r.u32()?;
    if n_tags > MAX_TAGS {
        return Err(FormatError::Unsupported {
            what: "tag count",
            value: n_tags as u64,
        });
    }
    let mut tags = Vec::with_capacity(n_tags as usize);
    for _ in 0..n_tags {
        tags.push(r.string(1 << 10)?);
    }
    let denom_floor = r.f64()?;
    if !(denom_floor > 0.0 && denom_floor <= 1.0) {
        return Err(FormatError::Invalid(format!("denominator floor {denom_floor}")));
    }
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
    let cfg = FieldConfig {
        latent_dim,
        hidden,
        layers,
        s_embed,
        render_dim,
        encoder,
        tags,
        denom_floor,
    };
    let mut params = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let v = r.f64()?;
        if !v.is_finite() {
            return Err(FormatError::Invalid("non-finite parameter".into()));
        }
        params.push(v);
    }
    r.finish()?;
    VelocityField::from_parts(cfg, seed, params)
        .ok_or_else(|| FormatError::Invalid("parameter count does not match architecture".into()))
}

pub fn write_field(path: &Path, f: &VelocityField) -> Result<(), FormatError> {
    write_atomic(path, &encode_field(f))
}

pub fn read_field(path: &Path) -> Result<VelocityField, FormatError> {
    decode_field(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut cfg = FieldConfig::new(5).with_conditions(Default::default(), vec!["x".into()]);
        cfg.hidden = 8;
        let f = VelocityField::new(cfg.with_render(), 11);
        let bytes = encode_field(&f);
        let back = decode_field(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(encode_field(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let f = VelocityField::new(FieldConfig { hidden: 4, ..FieldConfig::new(2) }, 1);
        let bytes = encode_field(&f);
        assert!(decode_field(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_field(&bad).is_err());
        let mut extra = bytes;
        extra.extend_from_slice(&[0; 8]);
        assert!(decode_field(&extra).is_err());
    }
}
