//! Point clouds: sampling, normalization, training-time augmentation,
//! the binary file format, and a parametric shape generator used for
//! synthetic benchmarks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::Rng;

pub type Point = [f32; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(PointCloud { points, label })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    /// Coordinates as a flat `N × 3` row-major buffer.
    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += f64::from(p[k]);
            }
        }
        c.map(|v| v / self.points.len() as f64)
    }

    /// Largest distance of any point from the origin.
    pub fn max_radius(&self) -> f32 {
        self.points
            .iter()
            .map(|p| (p.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>()).sqrt())
            .fold(0.0f64, f64::max) as f32
    }

    /// Applies `f` to every point, computing in f64.
    pub fn map_points(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| f(p.map(f64::from)).map(|v| v as f32))
            .collect();
        PointCloud { points, label: self.label }
    }

    /// Rotation about the up (z) axis by `radians`, counter-clockwise seen from +z.
    pub fn rotate_z(&self, radians: f64) -> PointCloud {
        let (s, c) = radians.sin_cos();
        self.map_points(|[x, y, z]| [c * x - s * y, s * x + c * y, z])
    }
}

/// Draws exactly `n_points` rows: without replacement when the cloud has at
/// least that many points, with replacement otherwise.
pub fn resample(pc: &PointCloud, n_points: usize, rng: &mut Rng) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if n_points == 0 {
        return Err(Error::InvalidConfig("n_points must be at least 1".into()));
    }
    let n = pc.len();
    let points = if n_points <= n {
        // partial Fisher-Yates
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..n_points {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        idx[..n_points].iter().map(|&i| pc.points[i]).collect()
    } else {
        (0..n_points).map(|_| pc.points[rng.below(n)]).collect()
    };
    Ok(PointCloud { points, label: pc.label })
}

/// Centers the cloud on its centroid and scales it so the farthest point
/// lies on the unit sphere. A cloud whose points all coincide maps to the origin.
pub fn normalize_unit_sphere(pc: &PointCloud) -> PointCloud {
    let c = pc.centroid();
    let radius = pc
        .points
        .iter()
        .map(|p| (0..3).map(|k| (f64::from(p[k]) - c[k]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max);
    let scale = if radius > 1e-12 { 1.0 / radius } else { 0.0 };
    pc.map_points(|p| [(p[0] - c[0]) * scale, (p[1] - c[1]) * scale, (p[2] - c[2]) * scale])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub drop: bool,
    pub drop_max_ratio: f64,
    pub scale: bool,
    pub scale_range: [f64; 2],
    pub shift: bool,
    pub shift_max: f64,
    pub rotate: bool,
    pub rot_sigma: f64,
    pub rot_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            drop: true,
            drop_max_ratio: 0.4,
            scale: true,
            scale_range: [0.8, 1.25],
            shift: true,
            shift_max: 0.1,
            rotate: true,
            rot_sigma: 0.06,
            rot_clip: 0.18,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        AugmentConfig { drop: false, scale: false, shift: false, rotate: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        let ok = (0.0..1.0).contains(&self.drop_max_ratio)
            && lo > 0.0
            && lo <= hi
            && self.shift_max >= 0.0
            && self.rot_sigma >= 0.0
            && self.rot_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad augmentation ranges: {self:?}")))
        }
    }
}

/// Random point drop, scaling, shift and small-angle rotation, in that order.
///
/// Dropped points are overwritten with the first surviving point so the
/// point count never changes.
pub fn augment(pc: &PointCloud, cfg: &AugmentConfig, rng: &mut Rng) -> PointCloud {
    let mut pts: Vec<[f64; 3]> = pc.points.iter().map(|p| p.map(f64::from)).collect();

    if cfg.drop {
        let ratio = rng.uniform_range(0.0, cfg.drop_max_ratio);
        let dropped: Vec<bool> = (0..pts.len()).map(|_| rng.uniform() < ratio).collect();
        if let Some(keep) = dropped.iter().position(|d| !d) {
            let fill = pts[keep];
            for (p, _) in pts.iter_mut().zip(&dropped).filter(|(_, &d)| d) {
                *p = fill;
            }
        }
    }
    if cfg.scale {
        let s = rng.uniform_range(cfg.scale_range[0], cfg.scale_range[1]);
        pts.iter_mut().flatten().for_each(|v| *v *= s);
    }
    if cfg.shift {
        let t: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(-cfg.shift_max, cfg.shift_max));
        for p in &mut pts {
            for k in 0..3 {
                p[k] += t[k];
            }
        }
    }
    if cfg.rotate {
        let angles: [f64; 3] =
            std::array::from_fn(|_| (cfg.rot_sigma * rng.normal()).clamp(-cfg.rot_clip, cfg.rot_clip));
        let r = perturbation_rotation(angles);
        for p in &mut pts {
            // row vector times R
            let q = *p;
            *p = std::array::from_fn(|j| q[0] * r[0][j] + q[1] * r[1][j] + q[2] * r[2][j]);
        }
    }

    let points = pts.into_iter().map(|p| p.map(|v| v as f32)).collect();
    PointCloud { points, label: pc.label }
}

/// `Rz · Ry · Rx` for per-axis angles `[ax, ay, az]`.
fn perturbation_rotation([ax, ay, az]: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat3_mul(&rz, &mat3_mul(&ry, &rx))
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// The synthetic shape taxonomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeCategory {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    Pyramid,
    Helix,
}

impl ShapeCategory {
    pub const ALL: [ShapeCategory; 8] = [
        ShapeCategory::Sphere,
        ShapeCategory::Cube,
        ShapeCategory::Cylinder,
        ShapeCategory::Cone,
        ShapeCategory::Torus,
        ShapeCategory::Plane,
        ShapeCategory::Pyramid,
        ShapeCategory::Helix,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeCategory::Sphere => "sphere",
            ShapeCategory::Cube => "cube",
            ShapeCategory::Cylinder => "cylinder",
            ShapeCategory::Cone => "cone",
            ShapeCategory::Torus => "torus",
            ShapeCategory::Plane => "plane",
            ShapeCategory::Pyramid => "pyramid",
            ShapeCategory::Helix => "helix",
        }
    }
}

impl fmt::Display for ShapeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownCategory(s.to_string()))
    }
}

/// Samples `n_points` on the surface of `category`, adds isotropic Gaussian
/// noise, and normalizes the result onto the unit sphere.
pub fn gen_shape(category: ShapeCategory, n_points: usize, noise_sigma: f64, rng: &mut Rng) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(Error::InvalidConfig(format!("shape generator needs at least 8 points, got {n_points}")));
    }
    let mut pts: Vec<[f64; 3]> = match category {
        ShapeCategory::Sphere => sample_sphere(n_points, rng),
        _ => (0..n_points).map(|_| sample_surface(category, rng)).collect(),
    };
    if noise_sigma > 0.0 {
        for v in pts.iter_mut().flatten() {
            *v += noise_sigma * rng.normal();
        }
    }
    let raw = PointCloud::new(pts.into_iter().map(|p| p.map(|v| v as f32)).collect(), Some(category.id()))?;
    Ok(normalize_unit_sphere(&raw))
}

/// Name-based variant of [`gen_shape`].
pub fn gen_shape_named(category: &str, n_points: usize, noise_sigma: f64, rng: &mut Rng) -> Result<PointCloud> {
    gen_shape(category.parse()?, n_points, noise_sigma, rng)
}

fn unit_gaussian_direction(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

/// Uniform sphere samples arranged so the sample centroid is exactly the
/// origin: antipodal pairs, plus one equilateral triple when `n` is odd.
/// This keeps every sample on the unit sphere after centering.
fn sample_sphere(n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(n);
    if n % 2 == 1 {
        let u = unit_gaussian_direction(rng);
        let mut w = unit_gaussian_direction(rng);
        // make w orthogonal to u
        let d: f64 = (0..3).map(|k| u[k] * w[k]).sum();
        w = std::array::from_fn(|k| w[k] - d * u[k]);
        let wn = (w.iter().map(|x| x * x).sum::<f64>()).sqrt().max(1e-12);
        w = w.map(|x| x / wn);
        for t in 0..3 {
            let a = t as f64 * 2.0 * std::f64::consts::PI / 3.0;
            pts.push(std::array::from_fn(|k| a.cos() * u[k] + a.sin() * w[k]));
        }
    }
    while pts.len() < n {
        let p = unit_gaussian_direction(rng);
        pts.push(p);
        pts.push(p.map(|v| -v));
    }
    pts
}

fn uniform_disk(radius: f64, rng: &mut Rng) -> (f64, f64) {
    let r = radius * rng.uniform().sqrt();
    let t = 2.0 * std::f64::consts::PI * rng.uniform();
    (r * t.cos(), r * t.sin())
}

fn uniform_triangle(a: [f64; 3], b: [f64; 3], c: [f64; 3], rng: &mut Rng) -> [f64; 3] {
    let (mut u, mut v) = (rng.uniform(), rng.uniform());
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    std::array::from_fn(|k| a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]))
}

fn sample_surface(category: ShapeCategory, rng: &mut Rng) -> [f64; 3] {
    use std::f64::consts::PI;
    match category {
        ShapeCategory::Sphere => unit_gaussian_direction(rng),
        ShapeCategory::Cube => {
            let face = rng.below(6);
            let (u, v) = (rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0));
            let s = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            }
        }
        ShapeCategory::Cylinder => {
            let (r, h) = (0.6, 1.0);
            let side = 2.0 * PI * r * 2.0 * h;
            let cap = PI * r * r;
            let pick = rng.uniform() * (side + 2.0 * cap);
            if pick < side {
                let t = 2.0 * PI * rng.uniform();
                [r * t.cos(), r * t.sin(), rng.uniform_range(-h, h)]
            } else {
                let (x, y) = uniform_disk(r, rng);
                [x, y, if pick < side + cap { h } else { -h }]
            }
        }
        ShapeCategory::Cone => {
            let (r, h) = (0.8f64, 2.0f64);
            let slant = (r * r + h * h).sqrt();
            let side = PI * r * slant;
            let base = PI * r * r;
            if rng.uniform() * (side + base) < side {
                // distance from apex grows as sqrt(u) for uniform area
                let f = rng.uniform().sqrt();
                let t = 2.0 * PI * rng.uniform();
                [f * r * t.cos(), f * r * t.sin(), 1.0 - f * h]
            } else {
                let (x, y) = uniform_disk(r, rng);
                [x, y, 1.0 - h]
            }
        }
        ShapeCategory::Torus => {
            let (big, small) = (0.7, 0.25);
            loop {
                let theta = 2.0 * PI * rng.uniform();
                // area element is proportional to (R + r cos θ)
                if rng.uniform() * (big + small) <= big + small * theta.cos() {
                    let phi = 2.0 * PI * rng.uniform();
                    let ring = big + small * theta.cos();
                    return [ring * phi.cos(), ring * phi.sin(), small * theta.sin()];
                }
            }
        }
        ShapeCategory::Plane => [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0), 0.0],
        ShapeCategory::Pyramid => {
            let apex = [0.0, 0.0, 1.0];
            let corners = [[-1.0, -1.0, -1.0], [1.0, -1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, 1.0, -1.0]];
            // each side face: base 2, slant height sqrt(1 + 4) → area sqrt(5); base area 4
            let side_area = 5f64.sqrt();
            let pick = rng.uniform() * (4.0 * side_area + 4.0);
            if pick < 4.0 * side_area {
                let f = ((pick / side_area) as usize).min(3);
                uniform_triangle(apex, corners[f], corners[(f + 1) % 4], rng)
            } else {
                [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0), -1.0]
            }
        }
        ShapeCategory::Helix => {
            // thin tube around a two-turn helix; the centerline has constant speed
            let (radius, tube, turns) = (0.6, 0.06, 2.0);
            let t = rng.uniform() * turns * 2.0 * PI;
            let phi = 2.0 * PI * rng.uniform();
            let c = [radius * t.cos(), radius * t.sin(), t / (turns * PI) - 1.0];
            let normal = [t.cos(), t.sin(), 0.0];
            [c[0] + tube * phi.cos() * normal[0], c[1] + tube * phi.cos() * normal[1], c[2] + tube * phi.sin()]
        }
    }
}

const CLOUD_MAGIC: &[u8; 8] = b"ULIPPC01";

/// Serializes a cloud: magic, `u32` LE point count, then `N × 3` LE `f32`.
pub fn encode_cloud(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + pc.len() * 12);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(pc.len() as u32).to_le_bytes());
    for v in pc.points.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() < 8 || &bytes[..8] != CLOUD_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "ULIPPC01" });
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedFile(path.to_path_buf()));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < n * 12 {
        return Err(Error::TruncatedFile(path.to_path_buf()));
    }
    if body.len() > n * 12 {
        return Err(Error::BadHeader { path: path.to_path_buf(), reason: "trailing bytes after points".into() });
    }
    let points = body
        .chunks_exact(12)
        .map(|c| std::array::from_fn(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap())))
        .collect();
    PointCloud::new(points, None)
}

pub fn write_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    fsutil::write_atomic(path, &encode_cloud(pc))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_cloud(&bytes, path)
}
