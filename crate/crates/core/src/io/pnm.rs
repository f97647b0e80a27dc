//! Binary PGM (masks) and PPM (RGB images).
//!
//! Writers emit the canonical header `P5\n<w> <h>\n255\n` (or `P6`); readers
//! also accept comments and arbitrary whitespace. Masks are written as
//! 0/255; any nonzero byte reads back as set.

use std::path::Path;

use crate::geometry::Mask;
use crate::io::IoError;
use crate::lift::ImageFrame;

fn encode(kind: &str, w: usize, h: usize, payload: impl IntoIterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("{kind}\n{w} {h}\n255\n").into_bytes();
    out.extend(payload);
    out
}

/// Returns `(width, height, payload)`.
fn decode<'a>(path: &Path, data: &'a [u8], kind: &[u8; 2], channels: usize) -> Result<(usize, usize, &'a [u8]), IoError> {
    let bad = |m: String| IoError::invariant(path, "header", m);
    if data.len() < 2 || &data[..2] != kind {
        return Err(bad(format!("expected {} magic", String::from_utf8_lossy(kind))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        *field = std::str::from_utf8(&data[start..pos]).unwrap().parse().map_err(|_| bad("header number overflows".into()))?;
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace after maxval".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval}, only 255 is supported")));
    }
    let payload = &data[pos..];
    if payload.len() != w * h * channels {
        return Err(IoError::invariant(
            path,
            "pixels",
            format!("array length mismatch: header declares {w}x{h}x{channels} bytes, found {}", payload.len()),
        ));
    }
    Ok((w, h, payload))
}

pub fn encode_mask(m: &Mask) -> Vec<u8> {
    encode("P5", m.width(), m.height(), m.bits().iter().map(|&b| if b { 255 } else { 0 }))
}

pub fn decode_mask(path: &Path, data: &[u8]) -> Result<Mask, IoError> {
    let (w, h, px) = decode(path, data, b"P5", 1)?;
    Mask::new(w, h, px.iter().map(|&v| v != 0).collect()).map_err(|e| IoError::invariant(path, "mask", e.to_string()))
}

pub fn encode_image(img: &ImageFrame) -> Vec<u8> {
    encode("P6", img.width(), img.height(), img.rgb().iter().copied())
}

pub fn decode_image(path: &Path, data: &[u8]) -> Result<ImageFrame, IoError> {
    let (w, h, px) = decode(path, data, b"P6", 3)?;
    ImageFrame::new(w, h, px.to_vec()).map_err(|e| IoError::invariant(path, "image", e.to_string()))
}

pub fn read_mask(path: &Path) -> Result<Mask, IoError> {
    decode_mask(path, &std::fs::read(path).map_err(|e| IoError::from_io(path, e))?)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<(), IoError> {
    super::write_bytes(path, &encode_mask(m))
}

pub fn read_image(path: &Path) -> Result<ImageFrame, IoError> {
    decode_image(path, &std::fs::read(path).map_err(|e| IoError::from_io(path, e))?)
}

pub fn write_image(path: &Path, img: &ImageFrame) -> Result<(), IoError> {
    super::write_bytes(path, &encode_image(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip_and_comments() {
        let m = Mask::new(3, 2, vec![true, false, false, false, true, true]).unwrap();
        let bytes = encode_mask(&m);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_mask(Path::new("m.pgm"), &bytes).unwrap(), m);
        let commented = b"P5 # a comment\n3\n2 255\n\x01\x00\x00\x00\x07\xff";
        assert_eq!(decode_mask(Path::new("m.pgm"), commented).unwrap(), m);
    }

    #[test]
    fn image_round_trip_and_truncation() {
        let img = ImageFrame::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = encode_image(&img);
        assert_eq!(decode_image(Path::new("i.ppm"), &bytes).unwrap(), img);
        let err = decode_image(Path::new("i.ppm"), &bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, IoError::InvariantViolation { .. }));
    }
}
