//! Image files: binary PPM (P6) for RGB, PGM (P5) for masks and `DPTH` for
//! float depth maps.
//!
//! ```text
//! DPTH: magic "DPTH" | width u32 | height u32 | reserved u32 (0) | width·height × f32
//! ```

use std::path::Path;

use crate::format::{put_f32, put_u32, read_file, write_atomic, FormatError, Reader};

/// Refuse headers describing more pixels than this.
const MAX_PIXELS: usize = 1 << 26;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved, row-major.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl RgbImage {
    /// Quantizes `[0,1]` floats to 8 bits (round to nearest).
    pub fn from_f32(width: usize, height: usize, rgb: &[f32]) -> Self {
        assert_eq!(rgb.len(), 3 * width * height);
        Self {
            width,
            height,
            data: rgb.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }
}

impl GrayImage {
    pub fn from_mask(width: usize, height: usize, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), width * height);
        Self {
            width,
            height,
            data: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        }
    }

    pub fn to_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&b| b >= 128).collect()
    }
}

fn encode_pnm(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Parses a binary PNM header, returning (width, height, data offset).
fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize), FormatError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and comments before each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| FormatError::Invalid(format!("bad PNM header field {text:?}")))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(FormatError::Invalid("PNM header not terminated".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(FormatError::Unsupported {
            what: "PNM maxval",
            value: maxval as u64,
        });
    }
    if width == 0 || height == 0 || width.saturating_mul(height) > MAX_PIXELS {
        return Err(FormatError::Invalid(format!("PNM size {width}x{height}")));
    }
    Ok((width, height, pos + 1))
}

fn body(bytes: &[u8], offset: usize, need: usize) -> Result<&[u8], FormatError> {
    let have = bytes.len() - offset;
    if have != need {
        return Err(FormatError::Truncated {
            need: offset + need,
            have: bytes.len(),
        });
    }
    Ok(&bytes[offset..])
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    encode_pnm("P6", img.width, img.height, &img.data)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, FormatError> {
    let (width, height, off) = parse_pnm_header(bytes, b"P6")?;
    Ok(RgbImage {
        width,
        height,
        data: body(bytes, off, 3 * width * height)?.to_vec(),
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    encode_pnm("P5", img.width, img.height, &img.data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, FormatError> {
    let (width, height, off) = parse_pnm_header(bytes, b"P5")?;
    Ok(GrayImage {
        width,
        height,
        data: body(bytes, off, width * height)?.to_vec(),
    })
}

pub fn encode_dpth(img: &DepthImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.data.len());
    out.extend_from_slice(b"DPTH");
    put_u32(&mut out, img.width as u32);
    put_u32(&mut out, img.height as u32);
    put_u32(&mut out, 0);
    for &d in &img.data {
        put_f32(&mut out, d);
    }
    out
}

pub fn decode_dpth(bytes: &[u8]) -> Result<DepthImage, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(b"DPTH")?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let reserved = r.u32()?;
    if reserved != 0 {
        return Err(FormatError::Invalid(format!("DPTH reserved field {reserved}")));
    }
    if width.saturating_mul(height) > MAX_PIXELS {
        return Err(FormatError::Invalid(format!("DPTH size {width}x{height}")));
    }
    let n = width * height;
    if r.remaining() != 4 * n {
        return Err(FormatError::Truncated {
            need: 16 + 4 * n,
            have: bytes.len(),
        });
    }
    let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
    Ok(DepthImage { width, height, data })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), FormatError> {
    write_atomic(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, FormatError> {
    decode_ppm(&read_file(path)?)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), FormatError> {
    write_atomic(path, &encode_pgm(img))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, FormatError> {
    decode_pgm(&read_file(path)?)
}

pub fn write_dpth(path: &Path, img: &DepthImage) -> Result<(), FormatError> {
    write_atomic(path, &encode_dpth(img))
}

pub fn read_dpth(path: &Path) -> Result<DepthImage, FormatError> {
    decode_dpth(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dpth_roundtrip(w in 1usize..12, h in 1usize..12, seed in any::<u32>()) {
            let data = (0..w * h).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let img = DepthImage { width: w, height: h, data };
            let bytes = encode_dpth(&img);
            prop_assert_eq!(encode_dpth(&decode_dpth(&bytes).unwrap()), bytes);
        }

        #[test]
        fn ppm_pgm_roundtrip(w in 1usize..12, h in 1usize..12, fill in any::<u8>()) {
            let rgb = RgbImage { width: w, height: h, data: (0..3 * w * h).map(|i| fill.wrapping_add(i as u8)).collect() };
            let bytes = encode_ppm(&rgb);
            prop_assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()), bytes);
            let gray = GrayImage { width: w, height: h, data: vec![fill; w * h] };
            let bytes = encode_pgm(&gray);
            prop_assert_eq!(encode_pgm(&decode_pgm(&bytes).unwrap()), bytes);
        }
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.to_mask(), vec![false, true]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n65535\n").is_err());
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00").is_err());
        assert!(decode_dpth(b"DPTH\x01\0\0\0\x01\0\0\0\0\0\0\0").is_err());
        assert!(decode_dpth(b"DPTH\xff\xff\xff\xff\xff\xff\xff\xff\0\0\0\0").is_err());
    }
}
