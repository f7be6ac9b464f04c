use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

/// Row-major depth image in meters. A value of exactly 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} depth values for a {width}x{height} image",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "depth value {} at index {i} is negative or non-finite",
                values[i]
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidParameter(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    /// Largest 3D displacement introduced by rounding a projection of a point
    /// at depth `z` to the nearest pixel centre.
    pub fn quantization_bound(&self, z: f64) -> f64 {
        0.5 * z * (self.fx.powi(-2) + self.fy.powi(-2)).sqrt()
    }
}

/// Equidistant fisheye: image radius `r = f * theta`, theta measured from +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FThetaCamera {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub theta_max: f64,
    pub width: usize,
    pub height: usize,
}

impl FThetaCamera {
    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0) {
            return Err(Error::InvalidParameter("f must be positive".into()));
        }
        if !(self.theta_max > 0.0 && self.theta_max <= PI) {
            return Err(Error::InvalidParameter("theta_max must lie in (0, pi]".into()));
        }
        Ok(())
    }

    /// Largest 3D displacement introduced by pixel rounding at `range` meters.
    ///
    /// Rounding moves the image point by at most `sqrt(2)/2` px; the ray angle
    /// changes by at most that over `f` in both the radial and tangential
    /// directions (`sin(theta) <= theta`).
    pub fn quantization_bound(&self, range: f64) -> f64 {
        range * FRAC_1_SQRT_2 / self.f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum CameraModel {
    Pinhole(PinholeCamera),
    Ftheta(FThetaCamera),
}

impl CameraModel {
    pub fn width(&self) -> usize {
        match self {
            CameraModel::Pinhole(c) => c.width,
            CameraModel::Ftheta(c) => c.width,
        }
    }

    pub fn height(&self) -> usize {
        match self {
            CameraModel::Pinhole(c) => c.height,
            CameraModel::Ftheta(c) => c.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CameraModel::Pinhole(c) => c.validate(),
            CameraModel::Ftheta(c) => c.validate(),
        }
    }

    pub fn lift(&self, depth: &DepthMap) -> Result<(PointCloud, Vec<usize>)> {
        match self {
            CameraModel::Pinhole(c) => lift_depth(depth, c),
            CameraModel::Ftheta(c) => lift_ftheta(depth, c),
        }
    }

    pub fn render(&self, cloud: &PointCloud) -> Result<Rendering> {
        match self {
            CameraModel::Pinhole(c) => render_pinhole(cloud, c),
            CameraModel::Ftheta(c) => render_ftheta(cloud, c),
        }
    }
}

/// A z-buffered rendering together with the index of the input point that
/// won each pixel.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub depth: DepthMap,
    pub source: Vec<Option<usize>>,
}

fn check_dims(d: &DepthMap, width: usize, height: usize) -> Result<()> {
    if d.width != width || d.height != height {
        return Err(Error::DimensionMismatch(format!(
            "depth map is {}x{}, camera is {width}x{height}",
            d.width, d.height
        )));
    }
    Ok(())
}

/// Back-projects valid pixels through a pinhole camera. Returns the cloud and,
/// for every output point, its row-major pixel index.
pub fn lift_depth(d: &DepthMap, cam: &PinholeCamera) -> Result<(PointCloud, Vec<usize>)> {
    cam.validate()?;
    check_dims(d, cam.width, cam.height)?;
    let mut points = Vec::with_capacity(d.valid_count());
    let mut pixels = Vec::with_capacity(d.valid_count());
    for (idx, &z) in d.values.iter().enumerate() {
        if z <= 0.0 {
            continue;
        }
        let (u, v) = ((idx % d.width) as f64, (idx / d.width) as f64);
        points.push(Point3::new(
            z * (u - cam.cx) / cam.fx,
            z * (v - cam.cy) / cam.fy,
            z,
        ));
        pixels.push(idx);
    }
    Ok((PointCloud::from_points(points), pixels))
}

/// Back-projects valid pixels of a range image through an f-theta camera.
pub fn lift_ftheta(d: &DepthMap, cam: &FThetaCamera) -> Result<(PointCloud, Vec<usize>)> {
    cam.validate()?;
    check_dims(d, cam.width, cam.height)?;
    let mut points = Vec::with_capacity(d.valid_count());
    let mut pixels = Vec::with_capacity(d.valid_count());
    for (idx, &range) in d.values.iter().enumerate() {
        if range <= 0.0 {
            continue;
        }
        let du = (idx % d.width) as f64 - cam.cx;
        let dv = (idx / d.width) as f64 - cam.cy;
        let theta = du.hypot(dv) / cam.f;
        let phi = dv.atan2(du);
        let (st, ct) = theta.sin_cos();
        points.push(Point3::new(
            range * st * phi.cos(),
            range * st * phi.sin(),
            range * ct,
        ));
        pixels.push(idx);
    }
    Ok((PointCloud::from_points(points), pixels))
}

/// Z-buffer splat: keeps the nearest depth per pixel, first (lowest index)
/// point on exact ties.
fn splat(
    width: usize,
    height: usize,
    hits: impl Iterator<Item = (usize, f64, f64, f64)>,
) -> Rendering {
    let mut depth = vec![0.0; width * height];
    let mut source = vec![None; width * height];
    for (i, u, v, value) in hits {
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= width as f64 || v >= height as f64 {
            continue;
        }
        let pix = v as usize * width + u as usize;
        if source[pix].is_none() || value < depth[pix] {
            depth[pix] = value;
            source[pix] = Some(i);
        }
    }
    Rendering {
        depth: DepthMap {
            width,
            height,
            values: depth,
        },
        source,
    }
}

pub fn render_pinhole(c: &PointCloud, cam: &PinholeCamera) -> Result<Rendering> {
    cam.validate()?;
    let hits = c.points().iter().enumerate().filter_map(|(i, p)| {
        (p.z > 0.0).then(|| {
            (
                i,
                cam.fx * p.x / p.z + cam.cx,
                cam.fy * p.y / p.z + cam.cy,
                p.z,
            )
        })
    });
    Ok(splat(cam.width, cam.height, hits))
}

/// Renders a depth map (`z` per pixel) through a pinhole camera.
pub fn project_pinhole(c: &PointCloud, cam: &PinholeCamera) -> Result<DepthMap> {
    Ok(render_pinhole(c, cam)?.depth)
}

pub fn render_ftheta(c: &PointCloud, cam: &FThetaCamera) -> Result<Rendering> {
    cam.validate()?;
    let hits = c.points().iter().enumerate().filter_map(|(i, p)| {
        let range = p.coords.norm();
        if range <= 0.0 {
            return None;
        }
        let theta = (p.z / range).clamp(-1.0, 1.0).acos();
        if theta > cam.theta_max {
            return None;
        }
        let phi = p.y.atan2(p.x);
        let r = cam.f * theta;
        Some((i, cam.cx + r * phi.cos(), cam.cy + r * phi.sin(), range))
    });
    Ok(splat(cam.width, cam.height, hits))
}

/// Renders a range image (Euclidean distance per pixel) through an f-theta
/// camera. Points outside `theta_max` or off the sensor are dropped.
pub fn project_ftheta(c: &PointCloud, cam: &FThetaCamera) -> Result<DepthMap> {
    Ok(render_ftheta(c, cam)?.depth)
}
