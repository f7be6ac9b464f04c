//! `FIF1` feature interchange files.
//!
//! Layout (all little-endian): `b"FIF1"`, `u32` version, `u32` V, `u32` N,
//! `u32` d, then `V * N * d` `f32` values in row-major `[view][point][dim]`
//! order. A JSON sidecar at `<file>.json` records
//! `{branch, K?, d, source_model}`; geometric fields have `V = 1`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{FeatureField, ViewFeatureStack};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FIF1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Img,
    Geo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMeta {
    pub branch: Branch,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub d: usize,
    pub source_model: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureData {
    Geo(FeatureField),
    Img(ViewFeatureStack),
}

impl FeatureData {
    pub fn len(&self) -> usize {
        match self {
            FeatureData::Geo(f) => f.len(),
            FeatureData::Img(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureData::Geo(f) => f.dim(),
            FeatureData::Img(s) => s.dim(),
        }
    }

    pub fn branch(&self) -> Branch {
        match self {
            FeatureData::Geo(_) => Branch::Geo,
            FeatureData::Img(_) => Branch::Img,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode(views: usize, n: usize, d: usize, values: impl Iterator<Item = f32>) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{what} = {v}")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + views * n * d * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (v, what) in [(views, "V"), (n, "N"), (d, "d")] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for x in values {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Validated header plus the decoded payload.
struct Decoded {
    views: usize,
    n: usize,
    d: usize,
    values: Vec<f32>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let k = bytes.len().min(4);
        found[..k].copy_from_slice(&bytes[..k]);
        return Err(Error::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = field(0);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let (views, n, d) = (field(1), field(2), field(3));
    let payload = (views as u64)
        .checked_mul(n as u64)
        .and_then(|x| x.checked_mul(d as u64))
        .and_then(|x| x.checked_mul(4))
        .filter(|&x| usize::try_from(x).is_ok() && x <= isize::MAX as u64 - HEADER_LEN as u64)
        .ok_or_else(|| Error::DimensionOverflow(format!("V={views} N={n} d={d}")))?;
    let expected = HEADER_LEN as u64 + payload;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Decoded {
        views: views as usize,
        n: n as usize,
        d: d as usize,
        values,
    })
}

/// Writes the binary file and its JSON sidecar.
pub fn write_features(path: impl AsRef<Path>, data: &FeatureData, source_model: &str) -> Result<()> {
    let path = path.as_ref();
    let (bytes, k) = match data {
        FeatureData::Geo(f) => (encode(1, f.len(), f.dim(), f.descriptors().iter().copied())?, None),
        FeatureData::Img(s) => (
            encode(s.views(), s.len(), s.dim(), s.descriptors().iter().copied())?,
            Some(s.k()),
        ),
    };
    let meta = FeatureMeta {
        branch: data.branch(),
        k,
        d: data.dim(),
        source_model: source_model.to_owned(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

fn isqrt_exact(v: usize) -> Option<usize> {
    let r = (v as f64).sqrt().round() as usize;
    (r * r == v).then_some(r)
}

/// Reads and validates a feature file. The sidecar is optional; without it
/// `V = 1` means a geometric field and any other square `V` an image stack.
pub fn read_features(path: impl AsRef<Path>) -> Result<(FeatureData, Option<FeatureMeta>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dec = decode(&bytes)?;

    let side = sidecar_path(path);
    let meta: Option<FeatureMeta> = match fs::read_to_string(&side) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&side, e)),
    };
    if let Some(m) = &meta {
        if m.d != dec.d {
            return Err(Error::DimensionMismatch(format!(
                "sidecar d = {} but header d = {}",
                m.d, dec.d
            )));
        }
    }

    let branch = meta.as_ref().map_or(
        if dec.views == 1 { Branch::Geo } else { Branch::Img },
        |m| m.branch,
    );
    let data = match branch {
        Branch::Geo => {
            if dec.views != 1 {
                return Err(Error::DimensionMismatch(format!(
                    "geometric field must have V = 1, header has V = {}",
                    dec.views
                )));
            }
            FeatureField::new(Array2::from_shape_vec((dec.n, dec.d), dec.values).unwrap())
                .map(FeatureData::Geo)?
        }
        Branch::Img => {
            let k = match meta.as_ref().and_then(|m| m.k) {
                Some(k) => k,
                None => isqrt_exact(dec.views).ok_or(Error::ViewCount {
                    views: dec.views,
                    k: (dec.views as f64).sqrt().floor() as usize,
                })?,
            };
            let arr = Array3::from_shape_vec((dec.views, dec.n, dec.d), dec.values).unwrap();
            ViewFeatureStack::new(k, arr).map(FeatureData::Img)?
        }
    };
    Ok((data, meta))
}
