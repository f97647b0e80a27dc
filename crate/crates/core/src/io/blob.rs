//! Little-endian binary blobs.
//!
//! Every blob starts with a 16-byte magic, a `u32` format version (1), the
//! dimensions as `u32`s, then the payload. Dimensions are always read from the
//! header; the payload length must match them exactly.
//!
//! | kind     | magic              | header after version  | payload                         |
//! |----------|--------------------|-----------------------|---------------------------------|
//! | depth    | `EDREG_DEPTH_F32\0`| `w, h`                | `w*h` f32 meters, NaN = invalid |
//! | features | `EDREG_FEATS_F32\0`| `w, h, dim`           | `w*h*dim` f32, row-major        |
//! | points   | `EDREG_PMAP_F64\0\0`| `w, h`               | `w*h*3` f64 xyz, NaN = invalid  |
//! | cloud    | `EDREG_CLOUD_V1\0\0`| `n, dim, img_w, img_h`| see [`write_cloud`]             |

use std::path::Path;

use crate::geometry::{FeatureCloud, Label, Vec3};
use crate::io::IoError;
use crate::lift::{DepthMap, FeatureMap, PointMap};

pub const VERSION: u32 = 1;
pub const DEPTH_MAGIC: &[u8; 16] = b"EDREG_DEPTH_F32\0";
pub const FEATURES_MAGIC: &[u8; 16] = b"EDREG_FEATS_F32\0";
pub const POINTS_MAGIC: &[u8; 16] = b"EDREG_PMAP_F64\0\0";
pub const CLOUD_MAGIC: &[u8; 16] = b"EDREG_CLOUD_V1\0\0";

struct Reader<'a> {
    file: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(file: &'a Path, data: &'a [u8], magic: &[u8; 16]) -> Result<Self, IoError> {
        if data.len() < 20 {
            return Err(IoError::invariant(file, "header", format!("file is {} bytes, header needs 20", data.len())));
        }
        if &data[..16] != magic {
            return Err(IoError::invariant(
                file,
                "magic",
                format!("expected {:?}, found {:?}", String::from_utf8_lossy(magic), String::from_utf8_lossy(&data[..16])),
            ));
        }
        let version = u32::from_le_bytes(data[16..20].try_into().unwrap());
        if version != VERSION {
            return Err(IoError::FormatVersionMismatch { file: file.to_path_buf(), found: version, expected: VERSION });
        }
        Ok(Self { file, data, pos: 20 })
    }

    fn u32(&mut self, field: &str) -> Result<u32, IoError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.data.len() {
            return Err(IoError::invariant(
                self.file,
                field,
                format!("needs {} bytes at offset {}, file has {}", n, self.pos, self.data.len()),
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Takes an array of `count` elements of `width` bytes, checking the
    /// remaining length first so truncation names the array.
    fn array(&mut self, count: usize, width: usize, field: &str, decl: &str) -> Result<&'a [u8], IoError> {
        let need = count * width;
        let have = self.data.len() - self.pos;
        if have < need {
            return Err(IoError::invariant(
                self.file,
                field,
                format!("array length mismatch: header declares {decl} = {count} values ({need} bytes), only {have} bytes present"),
            ));
        }
        self.take(need, field)
    }

    fn finish(&self) -> Result<(), IoError> {
        if self.pos != self.data.len() {
            return Err(IoError::invariant(
                self.file,
                "payload",
                format!("{} trailing bytes after declared arrays", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::from_io(path, e))
}

fn header(magic: &[u8; 16], dims: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * dims.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

fn dim32(v: usize, path: &Path, field: &str) -> Result<u32, IoError> {
    u32::try_from(v).map_err(|_| IoError::invariant(path, field, format!("{v} does not fit in u32")))
}

pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let mut out = header(DEPTH_MAGIC, &[d.width() as u32, d.height() as u32]);
    for v in d.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(path: &Path, data: &[u8]) -> Result<DepthMap, IoError> {
    let mut r = Reader::new(path, data, DEPTH_MAGIC)?;
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let vals = f32s(r.array(w * h, 4, "depth", "width*height")?);
    r.finish()?;
    DepthMap::new(w, h, vals).map_err(|e| IoError::invariant(path, "depth", e.to_string()))
}

pub fn read_depth(path: &Path) -> Result<DepthMap, IoError> {
    decode_depth(path, &read_file(path)?)
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<(), IoError> {
    super::write_bytes(path, &encode_depth(d))
}

pub fn encode_features(f: &FeatureMap) -> Vec<u8> {
    let mut out = header(FEATURES_MAGIC, &[f.width() as u32, f.height() as u32, f.dim() as u32]);
    out.reserve(f.data().len() * 4);
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(path: &Path, data: &[u8]) -> Result<FeatureMap, IoError> {
    let mut r = Reader::new(path, data, FEATURES_MAGIC)?;
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(IoError::invariant(path, "dim", "feature dimension is zero".into()));
    }
    let vals = f32s(r.array(w * h * dim, 4, "features", "width*height*dim")?);
    r.finish()?;
    FeatureMap::new(w, h, dim, vals).map_err(|e| IoError::invariant(path, "features", e.to_string()))
}

pub fn read_features(path: &Path) -> Result<FeatureMap, IoError> {
    decode_features(path, &read_file(path)?)
}

pub fn write_features(path: &Path, f: &FeatureMap) -> Result<(), IoError> {
    super::write_bytes(path, &encode_features(f))
}

pub fn encode_points(p: &PointMap) -> Vec<u8> {
    let mut out = header(POINTS_MAGIC, &[p.width() as u32, p.height() as u32]);
    for xyz in p.raw() {
        for v in xyz {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_points(path: &Path, data: &[u8]) -> Result<PointMap, IoError> {
    let mut r = Reader::new(path, data, POINTS_MAGIC)?;
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let vals = f64s(r.array(w * h * 3, 8, "points", "width*height*3")?);
    r.finish()?;
    let pts = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    PointMap::new(w, h, pts).map_err(|e| IoError::invariant(path, "points", e.to_string()))
}

pub fn read_points(path: &Path) -> Result<PointMap, IoError> {
    decode_points(path, &read_file(path)?)
}

pub fn write_points(path: &Path, p: &PointMap) -> Result<(), IoError> {
    super::write_bytes(path, &encode_points(p))
}

/// Cloud dump: header `n, dim, image_width, image_height`, then
/// `n*3` f64 points, `n*2` u32 pixel indices (row, col), `n` u8 labels
/// (0 background, 1 active, 2 passive) and `n*dim` f32 features.
pub fn encode_cloud(c: &FeatureCloud) -> Vec<u8> {
    let (iw, ih) = c.image_size();
    let mut out = header(CLOUD_MAGIC, &[c.len() as u32, c.feature_dim() as u32, iw as u32, ih as u32]);
    for p in c.points() {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &(r, col) in c.pixel_index() {
        out.extend_from_slice(&r.to_le_bytes());
        out.extend_from_slice(&col.to_le_bytes());
    }
    out.extend(c.labels().iter().map(|l| l.code()));
    for v in c.features() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cloud(path: &Path, data: &[u8]) -> Result<FeatureCloud, IoError> {
    let mut r = Reader::new(path, data, CLOUD_MAGIC)?;
    let n = r.u32("n")? as usize;
    let dim = r.u32("dim")? as usize;
    let iw = r.u32("image_width")? as usize;
    let ih = r.u32("image_height")? as usize;
    let pts = f64s(r.array(n * 3, 8, "points", "n*3")?);
    let pix: Vec<u32> =
        r.array(n * 2, 4, "pixel_index", "n*2")?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    let codes = r.array(n, 1, "labels", "n")?;
    let feats = f32s(r.array(n * dim, 4, "features", "n*dim")?);
    r.finish()?;
    let labels = codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            Label::from_code(c).ok_or_else(|| IoError::invariant(path, "labels", format!("label code {c} at point {i}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    FeatureCloud::new(
        pts.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        dim,
        feats,
        pix.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
        labels,
        iw,
        ih,
    )
    .map_err(|e| IoError::invariant(path, "cloud", e.to_string()))
}

pub fn read_cloud(path: &Path) -> Result<FeatureCloud, IoError> {
    decode_cloud(path, &read_file(path)?)
}

pub fn write_cloud(path: &Path, c: &FeatureCloud) -> Result<(), IoError> {
    dim32(c.len(), path, "n")?;
    super::write_bytes(path, &encode_cloud(c))
}
