//! Multi-view depth rendering and the stand-in image encoder.
//!
//! Cameras sit on a ring around the up (z) axis and look at the origin.
//! Each point is splatted into one pixel and the nearest depth wins. Depth
//! is the distance along the optical axis, so a point at the origin always
//! lands at the principal point with depth equal to the ring radius.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::pointcloud::PointCloud;
use crate::rng::Rng;
use crate::tensor::l2_normalize;

/// Side length of the grid the stand-in image encoder pools to.
pub const POOLED_SIDE: usize = 32;
const NORMALIZED_SLACK: f32 = 1e-3;
const NEAR_PLANE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRing {
    pub view_count: usize,
    pub step_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    /// Focal length in pixels. The default frames the unit sphere at about
    /// 70% of a 64-pixel image.
    pub focal_px: f64,
}

impl Default for CameraRing {
    fn default() -> Self {
        CameraRing { view_count: 30, step_deg: 12.0, elevation_deg: 20.0, radius: 2.5, focal_px: 51.2 }
    }
}

struct Pose {
    eye: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    forward: [f64; 3],
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl CameraRing {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("camera ring: {m}")));
        if self.view_count == 0 {
            return bad("view_count must be positive");
        }
        if ((self.view_count as f64) * self.step_deg - 360.0).abs() > 1e-9 {
            return bad("view_count * step_deg must equal 360");
        }
        if !(self.radius > 1.0) {
            return bad("radius must exceed the unit sphere");
        }
        if !(self.focal_px > 0.0) {
            return bad("focal length must be positive");
        }
        if !(self.elevation_deg.abs() < 90.0) {
            return bad("elevation must be strictly between -90 and 90 degrees");
        }
        Ok(())
    }

    pub fn azimuth_deg(&self, view: usize) -> f64 {
        view as f64 * self.step_deg
    }

    /// Depth range any unit-sphere point can occupy.
    pub fn depth_range(&self) -> (f32, f32) {
        ((self.radius - 1.0) as f32, (self.radius + 1.0) as f32)
    }

    fn pose(&self, view: usize) -> Pose {
        let az = self.azimuth_deg(view).to_radians();
        let el = self.elevation_deg.to_radians();
        let eye = [self.radius * el.cos() * az.cos(), self.radius * el.cos() * az.sin(), self.radius * el.sin()];
        let forward = unit([-eye[0], -eye[1], -eye[2]]);
        let right = unit(cross(forward, [0.0, 0.0, 1.0]));
        let up = cross(right, forward);
        Pose { eye, right, up, forward }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    /// Row-major depth; background pixels hold `f32::INFINITY`.
    depth: Vec<f32>,
    view: usize,
    near: f32,
    far: f32,
}

impl DepthMap {
    pub fn background(width: usize, height: usize, view: usize, near: f32, far: f32) -> Self {
        DepthMap { width, height, depth: vec![f32::INFINITY; width * height], view, near, far }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn view(&self) -> usize {
        self.view
    }

    pub fn range(&self) -> (f32, f32) {
        (self.near, self.far)
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.width + col]
    }

    pub fn is_foreground(&self, row: usize, col: usize) -> bool {
        self.at(row, col).is_finite()
    }

    pub fn foreground_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }
}

/// Camera-space projection of one point: `(col, row, depth)`, or `None` when
/// the point is behind the camera or outside the frame.
fn project(pose: &Pose, ring: &CameraRing, res: usize, p: [f32; 3]) -> Option<(usize, usize, f64)> {
    let d = [f64::from(p[0]) - pose.eye[0], f64::from(p[1]) - pose.eye[1], f64::from(p[2]) - pose.eye[2]];
    let z = dot3(d, pose.forward);
    if z <= NEAR_PLANE {
        return None;
    }
    let c = res as f64 / 2.0;
    let px = c + ring.focal_px * dot3(d, pose.right) / z;
    let py = c - ring.focal_px * dot3(d, pose.up) / z;
    if !(px >= 0.0 && py >= 0.0 && px < res as f64 && py < res as f64) {
        return None;
    }
    Some((px as usize, py as usize, z))
}

pub fn render_depth(pc: &PointCloud, ring: &CameraRing, view: usize, res: usize) -> Result<DepthMap> {
    ring.validate()?;
    if view >= ring.view_count {
        return Err(Error::InvalidConfig(format!("view {view} out of range for {} views", ring.view_count)));
    }
    if res == 0 {
        return Err(Error::InvalidConfig("resolution must be positive".into()));
    }
    let r = pc.max_radius();
    if r > 1.0 + NORMALIZED_SLACK {
        return Err(Error::UnnormalizedCloud(r));
    }
    let pose = ring.pose(view);
    let (near, far) = ring.depth_range();
    let mut map = DepthMap::background(res, res, view, near, far);
    for &p in pc.points() {
        if let Some((col, row, z)) = project(&pose, ring, res, p) {
            let cell = &mut map.depth[row * res + col];
            let z = z as f32;
            if z < *cell {
                *cell = z;
            }
        }
    }
    Ok(map)
}

pub fn render_views(pc: &PointCloud, ring: &CameraRing, res: usize) -> Result<Vec<DepthMap>> {
    (0..ring.view_count).map(|v| render_depth(pc, ring, v, res)).collect()
}

/// Frozen random-projection surrogate for an image encoder. The depth map
/// is area-pooled to 32x32 with background as zero, then projected by a
/// seed-derived Gaussian matrix and normalized.
#[derive(Clone, Debug)]
pub struct StandInImageEncoder {
    resolution: usize,
    dim: usize,
    seed: u64,
    projection: Vec<f32>,
}

impl StandInImageEncoder {
    pub fn new(resolution: usize, dim: usize, seed: u64) -> Result<Self> {
        if resolution < POOLED_SIDE || !resolution.is_multiple_of(POOLED_SIDE) {
            return Err(Error::InvalidConfig(format!(
                "image encoder resolution {resolution} must be a positive multiple of {POOLED_SIDE}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        let mut rng = Rng::new(seed, 0).derive("image.projection", 0);
        let projection = (0..dim * POOLED_SIDE * POOLED_SIDE).map(|_| rng.normal() as f32).collect();
        Ok(StandInImageEncoder { resolution, dim, seed, projection })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed(&self, map: &DepthMap) -> Result<Vec<f32>> {
        if map.width != self.resolution || map.height != self.resolution {
            return Err(Error::ResolutionMismatch { expected: self.resolution, got: map.width, got_h: map.height });
        }
        let pooled = area_pool(map, POOLED_SIDE);
        let feat: Vec<f32> = self
            .projection
            .chunks_exact(pooled.len())
            .map(|w| w.iter().zip(&pooled).map(|(&a, &b)| f64::from(a) * b).sum::<f64>() as f32)
            .collect();
        l2_normalize(&feat)
    }
}

fn area_pool(map: &DepthMap, side: usize) -> Vec<f64> {
    let block = map.width / side;
    let area = (block * block) as f64;
    let mut out = vec![0.0f64; side * side];
    for row in 0..map.height {
        for col in 0..map.width {
            let d = map.at(row, col);
            if d.is_finite() {
                out[(row / block) * side + col / block] += f64::from(d);
            }
        }
    }
    out.iter_mut().for_each(|x| *x /= area);
    out
}

pub fn stand_in_image_embed(map: &DepthMap, encoder: &StandInImageEncoder) -> Result<Vec<f32>> {
    encoder.embed(map)
}

const PGM_TAG: &str = "# ulip-depth";
const PGM_MAX: u16 = 65535;

/// 16-bit binary PGM. Foreground depths map linearly onto 1..=65535 over the
/// map's near/far range; 0 marks background.
pub fn encode_pgm(map: &DepthMap) -> Vec<u8> {
    let mut header = String::new();
    let _ = write!(
        header,
        "P5\n{PGM_TAG} near={} far={} view={}\n{} {}\n{PGM_MAX}\n",
        map.near, map.far, map.view, map.width, map.height
    );
    let mut out = header.into_bytes();
    out.reserve(2 * map.depth.len());
    let span = f64::from(map.far) - f64::from(map.near);
    for &d in &map.depth {
        let q: u16 = if d.is_finite() {
            let t = ((f64::from(d) - f64::from(map.near)) / span).clamp(0.0, 1.0);
            1 + (t * f64::from(PGM_MAX - 1)).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let bad = |reason: &str| Error::BadHeader { path: path.to_owned(), reason: reason.to_owned() };
    let mut lines = Vec::with_capacity(4);
    let mut pos = 0;
    while lines.len() < 4 {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("header ended early"))?;
        lines.push(std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8"))?);
        pos += end + 1;
    }
    if lines[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let tags = lines[1].strip_prefix(PGM_TAG).ok_or_else(|| bad("missing ulip-depth comment"))?;
    let mut near = None;
    let mut far = None;
    let mut view = None;
    for kv in tags.split_whitespace() {
        match kv.split_once('=') {
            Some(("near", v)) => near = v.parse::<f32>().ok(),
            Some(("far", v)) => far = v.parse::<f32>().ok(),
            Some(("view", v)) => view = v.parse::<usize>().ok(),
            _ => return Err(bad("unrecognized header field")),
        }
    }
    let (near, far, view) = match (near, far, view) {
        (Some(n), Some(f), Some(v)) if f > n => (n, f, v),
        _ => return Err(bad("near/far/view missing or invalid")),
    };
    let dims: Vec<usize> = lines[2].split_whitespace().filter_map(|s| s.parse().ok()).collect();
    let [width, height] = dims[..] else {
        return Err(bad("bad width/height line"));
    };
    if lines[3] != PGM_MAX.to_string() {
        return Err(bad("maxval must be 65535"));
    }
    let payload = &bytes[pos..];
    if payload.len() < 2 * width * height {
        return Err(Error::TruncatedFile(path.to_owned()));
    }
    if payload.len() > 2 * width * height {
        return Err(bad("trailing bytes after pixel data"));
    }
    let span = f64::from(far) - f64::from(near);
    let depth = payload
        .chunks_exact(2)
        .map(|c| match u16::from_be_bytes([c[0], c[1]]) {
            0 => f32::INFINITY,
            q => (f64::from(near) + f64::from(q - 1) / f64::from(PGM_MAX - 1) * span) as f32,
        })
        .collect();
    Ok(DepthMap { width, height, depth, view, near, far })
}

pub fn export_depth(map: &DepthMap, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode_pgm(map))
}

pub fn import_depth(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_pgm(&bytes, path)
}
