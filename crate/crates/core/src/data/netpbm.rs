//! Binary PGM (P5) and PPM (P6) rasters with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::LabelMap;
use crate::tensor::Tensor;

/// Decoded netpbm raster.
#[derive(Clone, Debug, PartialEq)]
pub enum Netpbm {
    /// P5, read as raw class indices.
    Gray(LabelMap),
    /// P6, as a `1 x 3 x H x W` tensor in `[0, 1]`.
    Rgb(Tensor),
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    body: usize,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err(malformed("expected magic P5 or P6"));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(format!("missing header field {}", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed("zero extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(format!("maxval {} out of range", maxval)));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval as u32));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width: width as usize,
        height: height as usize,
        body: pos,
    })
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Netpbm> {
    let h = parse_header(bytes)?;
    let channels = if h.magic[1] == b'5' { 1 } else { 3 };
    let expected = h.width * h.height * channels;
    let body = &bytes[h.body..];
    if body.len() < expected {
        return Err(Error::TruncatedBody { expected, found: body.len() });
    }
    let body = &body[..expected];
    if channels == 1 {
        return Ok(Netpbm::Gray(LabelMap::new(h.height, h.width, body.to_vec())?));
    }
    let plane = h.width * h.height;
    let mut data = vec![0.0; expected];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Ok(Netpbm::Rgb(Tensor::new(vec![1, 3, h.height, h.width], data)?))
}

/// Nearest 8-bit level of a `[0, 1]` intensity.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend_from_slice(&labels.data);
    out
}

/// Encodes a `1 x 3 x H x W` (or `3 x H x W`) image, quantizing to 8 bits.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    let (c, h, w) = match *shape {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "expected a single 3-channel image".into(),
            })
        }
    };
    if c != 3 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected 3 channels".into(),
        });
    }
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn read_netpbm(path: impl AsRef<Path>) -> Result<Netpbm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    match read_netpbm(path)? {
        Netpbm::Gray(l) => Ok(l),
        Netpbm::Rgb(_) => Err(malformed("expected a P5 label raster, found P6")),
    }
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    match read_netpbm(path)? {
        Netpbm::Rgb(t) => Ok(t),
        Netpbm::Gray(_) => Err(malformed("expected a P6 image, found P5")),
    }
}

pub fn write_pgm(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(labels)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}
