//! PWV1 volume files: 8-byte magic, one JSON header line, raw little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dims, LabelMap, Volume};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PWVOL1\n\0";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 4],
    dtype: String,
    spacing: [f64; 3],
}

/// Contents of a PWV1 file: real-valued volumes are `f32`, label maps `u8`.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Volume(Volume),
    Labels(LabelMap),
}

impl VolumeFile {
    pub fn into_volume(self) -> Result<Volume> {
        match self {
            VolumeFile::Volume(v) => Ok(v),
            VolumeFile::Labels(_) => Err(Error::format("dtype", "expected f32 volume, found u8 labels")),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            VolumeFile::Labels(l) => Ok(l),
            VolumeFile::Volume(_) => Err(Error::format("dtype", "expected u8 labels, found f32 volume")),
        }
    }
}

impl From<Volume> for VolumeFile {
    fn from(v: Volume) -> Self {
        VolumeFile::Volume(v)
    }
}

impl From<LabelMap> for VolumeFile {
    fn from(l: LabelMap) -> Self {
        VolumeFile::Labels(l)
    }
}

pub fn encode(file: &VolumeFile) -> Vec<u8> {
    let (header, payload) = match file {
        VolumeFile::Volume(v) => {
            let d = v.dims();
            let header = Header {
                dims: [v.channels(), d.h, d.w, d.d],
                dtype: "f32".into(),
                spacing: v.spacing(),
            };
            let payload: Vec<u8> = v.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
            (header, payload)
        }
        VolumeFile::Labels(l) => {
            let d = l.dims();
            let header = Header {
                dims: [1, d.h, d.w, d.d],
                dtype: "u8".into(),
                spacing: l.spacing(),
            };
            (header, l.labels().to_vec())
        }
    };
    let mut out = Vec::with_capacity(payload.len() + 128);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<VolumeFile> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("magic", "not a PWV1 file"));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("header", "missing header terminator"))?;
    let text = std::str::from_utf8(&rest[..nl]).map_err(|e| Error::format("header", e.to_string()))?;
    let header: Header = serde_json::from_str(text).map_err(|e| Error::format("header", e.to_string()))?;
    let payload = &rest[nl + 1..];

    let [c, h, w, d] = header.dims;
    if c == 0 || h == 0 || w == 0 || d == 0 {
        return Err(Error::format("dims", format!("zero extent in {:?}", header.dims)));
    }
    if header.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::format("spacing", format!("invalid spacing {:?}", header.spacing)));
    }
    let dims = Dims::new(h, w, d);
    let count = c
        .checked_mul(dims.voxels())
        .ok_or_else(|| Error::format("dims", "element count overflows"))?;

    match header.dtype.as_str() {
        "f32" => {
            if payload.len() != count * 4 {
                return Err(Error::format(
                    "dims",
                    format!("header implies {} bytes, payload has {}", count * 4, payload.len()),
                ));
            }
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let vol = Volume::from_data(c, dims, data).map_err(|e| Error::format("payload", e.to_string()))?;
            Ok(VolumeFile::Volume(vol.with_spacing(header.spacing)))
        }
        "u8" => {
            if c != 1 {
                return Err(Error::format("dims", format!("u8 label maps need C=1, got {c}")));
            }
            if payload.len() != count {
                return Err(Error::format(
                    "dims",
                    format!("header implies {} bytes, payload has {}", count, payload.len()),
                ));
            }
            let lm = LabelMap::from_labels(dims, payload.to_vec())?;
            Ok(VolumeFile::Labels(lm.with_spacing(header.spacing)))
        }
        other => Err(Error::format("dtype", format!("unknown dtype `{other}`"))),
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    decode(&fs::read(path)?)
}

/// Writes `file` in PWV1 format. Real values are narrowed to `f32`.
pub fn write_volume(file: &VolumeFile, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(file))?;
    Ok(())
}
