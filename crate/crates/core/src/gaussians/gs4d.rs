//! `GS4D` binary Gaussian sets.
//!
//! ```text
//! magic "GS4D" | version u32 | count u32 | convention u32
//! count × { 14 × f32 (mu3, rot4 wxyz, scale3, opacity, color3) | u8 dynamic }
//! ```
//! All little-endian. Convention `1` means Hamilton `wxyz` quaternions.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};

use super::{Gaussian3D, GAUSSIAN_CHANNELS};
use crate::format::{put_f32, put_u32, read_file, write_atomic, FormatError, Reader};
use crate::geometry::Vec3;

const MAGIC: &[u8; 4] = b"GS4D";
const VERSION: u32 = 1;
const CONVENTION_WXYZ: u32 = 1;
const RECORD: usize = GAUSSIAN_CHANNELS * 4 + 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian3D>,
    pub dynamic: Vec<bool>,
}

impl GaussianSet {
    /// Rounds every parameter to the nearest `f32`, which is what a write and
    /// reload would produce.
    pub fn quantized(&self) -> GaussianSet {
        decode_gs4d(&encode_gs4d(self)).expect("own encoding is valid")
    }
}

pub fn encode_gs4d(set: &GaussianSet) -> Vec<u8> {
    assert_eq!(set.gaussians.len(), set.dynamic.len());
    let mut out = Vec::with_capacity(16 + RECORD * set.gaussians.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, set.gaussians.len() as u32);
    put_u32(&mut out, CONVENTION_WXYZ);
    for (g, &d) in set.gaussians.iter().zip(&set.dynamic) {
        for v in g.to_array() {
            put_f32(&mut out, v as f32);
        }
        out.push(d as u8);
    }
    out
}

pub fn decode_gs4d(bytes: &[u8]) -> Result<GaussianSet, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Unsupported {
            what: "GS4D version",
            value: version as u64,
        });
    }
    let count = r.u32()? as usize;
    let convention = r.u32()?;
    if convention != CONVENTION_WXYZ {
        return Err(FormatError::Unsupported {
            what: "GS4D convention",
            value: convention as u64,
        });
    }
    let need = count.checked_mul(RECORD).ok_or_else(|| FormatError::Invalid("count overflow".into()))?;
    if r.remaining() != need {
        return Err(FormatError::Truncated {
            need: 16 + need,
            have: bytes.len(),
        });
    }
    let mut set = GaussianSet {
        gaussians: Vec::with_capacity(count),
        dynamic: Vec::with_capacity(count),
    };
    for i in 0..count {
        let mut v = [0f64; GAUSSIAN_CHANNELS];
        for x in v.iter_mut() {
            *x = r.f32()? as f64;
            if !x.is_finite() {
                return Err(FormatError::Invalid(format!("gaussian {i}: non-finite value")));
            }
        }
        let q = Quaternion::new(v[3], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-5 {
            return Err(FormatError::Invalid(format!("gaussian {i}: quaternion norm {}", q.norm())));
        }
        let scale = Vec3::new(v[7], v[8], v[9]);
        let color = Vec3::new(v[11], v[12], v[13]);
        if scale.iter().any(|&s| s <= 0.0)
            || !(0.0..=1.0).contains(&v[10])
            || color.iter().any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(FormatError::Invalid(format!("gaussian {i}: parameter out of range")));
        }
        let flag = r.u8()?;
        if flag > 1 {
            return Err(FormatError::Invalid(format!("gaussian {i}: flag {flag}")));
        }
        set.gaussians.push(Gaussian3D {
            mu: Vec3::new(v[0], v[1], v[2]),
            // Stored components are kept exactly so files reload bit-for-bit.
            rot: UnitQuaternion::new_unchecked(q),
            scale,
            opacity: v[10],
            color,
        });
        set.dynamic.push(flag == 1);
    }
    r.finish()?;
    Ok(set)
}

pub fn write_gs4d(path: &Path, set: &GaussianSet) -> Result<(), FormatError> {
    write_atomic(path, &encode_gs4d(set))
}

pub fn read_gs4d(path: &Path) -> Result<GaussianSet, FormatError> {
    decode_gs4d(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_gaussian() -> impl Strategy<Value = (Gaussian3D, bool)> {
        (
            prop::array::uniform3(-100.0f64..100.0),
            prop::array::uniform4(-1.0f64..1.0),
            prop::array::uniform3(0.001f64..10.0),
            0.0f64..1.0,
            prop::array::uniform3(0.0f64..1.0),
            any::<bool>(),
        )
            .prop_filter("nonzero quaternion", |(_, q, ..)| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .prop_map(|(mu, q, s, o, c, d)| {
                (
                    Gaussian3D {
                        mu: Vec3::from(mu),
                        rot: UnitQuaternion::new_normalize(Quaternion::new(q[0], q[1], q[2], q[3])),
                        scale: Vec3::from(s),
                        opacity: o,
                        color: Vec3::from(c),
                    },
                    d,
                )
            })
    }

    proptest! {
        #[test]
        fn write_read_write_is_byte_stable(items in prop::collection::vec(arb_gaussian(), 0..40)) {
            let set = GaussianSet {
                gaussians: items.iter().map(|(g, _)| *g).collect(),
                dynamic: items.iter().map(|(_, d)| *d).collect(),
            };
            let first = encode_gs4d(&set);
            let back = decode_gs4d(&first).unwrap();
            prop_assert_eq!(encode_gs4d(&back), first);
            prop_assert_eq!(back.dynamic, set.dynamic);
        }
    }

    #[test]
    fn rejects_corruption() {
        let set = GaussianSet {
            gaussians: vec![Gaussian3D::isotropic(Vec3::zeros(), 0.1, 0.5, Vec3::repeat(0.5))],
            dynamic: vec![true],
        };
        let good = encode_gs4d(&set);
        assert!(decode_gs4d(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_gs4d(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = good.clone();
        *bad.last_mut().unwrap() = 7;
        assert!(decode_gs4d(&bad).is_err());
        let mut bad = good.clone();
        bad[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_gs4d(&bad).is_err());
        let mut bad = good;
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_gs4d(&bad).is_err());
    }
}
