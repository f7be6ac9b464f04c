//! Point cloud, depth image and camera sidecar files.
//!
//! Clouds are either ASCII `.xyz` (one `x y z` triple per line, meters) or
//! the binary `PCB1` layout: magic, little-endian `u32` count, then `count`
//! little-endian `f32` triplets. Depth maps are 16-bit grayscale PNG in
//! millimeters or raw little-endian `f32` meters; both need the camera JSON
//! sidecar for their dimensions.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap, PointCloud};

pub const CLOUD_MAGIC: [u8; 4] = *b"PCB1";

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Reads a cloud, detecting the binary layout by its magic bytes.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 4 && bytes[..4] == CLOUD_MAGIC {
        decode_binary_cloud(path, &bytes)
    } else {
        parse_xyz(path, &bytes)
    }
}

fn decode_binary_cloud(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let expected = 8 + count * 12;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    let points = bytes[8..]
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().unwrap()) as f64;
            Point3::new(f(0), f(4), f(8))
        })
        .collect();
    PointCloud::new(points).map_err(|e| Error::format(path, e.to_string()))
}

fn parse_xyz(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8 text"))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let coords: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        if coords.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 values, found {}", lineno + 1, coords.len()),
            ));
        }
        points.push(Point3::new(coords[0], coords[1], coords[2]));
    }
    PointCloud::new(points).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `.xyz` text for that extension, the binary layout otherwise.
pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = if has_extension(path, "xyz") {
        cloud
            .points()
            .iter()
            .try_for_each(|p| writeln!(w, "{} {} {}", p.x, p.y, p.z))
    } else {
        let count = u32::try_from(cloud.len())
            .map_err(|_| Error::DimensionOverflow(format!("{} points", cloud.len())))?;
        w.write_all(&CLOUD_MAGIC)
            .and_then(|_| w.write_all(&count.to_le_bytes()))
            .and_then(|_| {
                cloud.points().iter().try_for_each(|p| {
                    for c in [p.x, p.y, p.z] {
                        w.write_all(&(c as f32).to_le_bytes())?;
                    }
                    Ok(())
                })
            })
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_camera(path: impl AsRef<Path>) -> Result<CameraModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cam: CameraModel =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    cam.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(cam)
}

pub fn write_camera(path: impl AsRef<Path>, cam: &CameraModel) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(cam)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a 16-bit PNG (millimeters) or raw `f32` (meters) depth image of the
/// camera's size.
pub fn read_depth(path: impl AsRef<Path>, width: usize, height: usize) -> Result<DepthMap> {
    let path = path.as_ref();
    let values = if has_extension(path, "png") {
        let (w, h, values) = read_png_millimeters(path)?;
        if (w, h) != (width, height) {
            return Err(Error::DimensionMismatch(format!(
                "{}: image is {w}x{h}, camera is {width}x{height}",
                path.display()
            )));
        }
        values
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let expected = (width * height * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    DepthMap::new(width, height, values).map_err(|e| Error::format(path, e.to_string()))
}

fn read_png_millimeters(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::format(path, "depth PNG must be 16-bit grayscale"));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; width * height * 2];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let values = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 1000.0)
        .collect();
    Ok((width, height, values))
}

/// Writes a depth map as 16-bit millimeter PNG (`.png`) or raw `f32` meters.
pub fn write_depth(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if has_extension(path, "png") {
        let mut data = Vec::with_capacity(depth.values().len() * 2);
        for &m in depth.values() {
            let mm = (m * 1000.0).round();
            if mm > u16::MAX as f64 {
                return Err(Error::InvalidParameter(format!(
                    "depth {m} m does not fit a 16-bit millimeter PNG"
                )));
            }
            data.extend_from_slice(&(mm as u16).to_be_bytes());
        }
        let mut enc = png::Encoder::new(&mut w, depth.width() as u32, depth.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .write_image_data(&data)
            .map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .finish()
            .map_err(|e| Error::format(path, e.to_string()))?;
    } else {
        depth
            .values()
            .iter()
            .try_for_each(|&v| w.write_all(&(v as f32).to_le_bytes()))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
