//! LiDAR point clouds to depth images aligned with the thermal frame.
//!
//! Points are moved into the camera frame with a rigid extrinsic, projected
//! through a pinhole model, rounded to the nearest pixel, and z-buffered so
//! the nearest return wins.

use std::path::Path;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Points closer than this along the optical axis are culled.
pub const DEFAULT_Z_MIN: f64 = 0.1;
/// Metres mapped to 1.0 when depth enters the network.
pub const DEFAULT_MAX_RANGE: f64 = 10.0;
pub const DEFAULT_WIDTH: usize = 256;
pub const DEFAULT_HEIGHT: usize = 192;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Usage(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Parses `x y z` lines; blank lines and `#` comments are skipped.
    /// Errors name the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse::<f64>().ok()).collect();
            match parsed {
                Some(v) if v.len() == 3 && v.iter().all(|c| c.is_finite()) => {
                    points.push([v[0], v[1], v[2]])
                }
                _ => {
                    return Err(Error::Format(format!(
                        "line {}: expected three finite numbers `x y z`, got `{raw}`",
                        n + 1
                    )))
                }
            }
        }
        Ok(Self { points })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Rigid transform `p' = R·p + t`, LiDAR frame to camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsic {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for Extrinsic {
    fn default() -> Self {
        Self::identity()
    }
}

impl Extrinsic {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation by `angle` radians about the z axis.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "extrinsic rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        if self.translation.iter().chain(r.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Config("extrinsic has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub z_min: f64,
    pub extrinsic: Extrinsic,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fx: 200.0,
            fy: 200.0,
            cx: DEFAULT_WIDTH as f64 / 2.0,
            cy: DEFAULT_HEIGHT as f64 / 2.0,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            z_min: DEFAULT_Z_MIN,
            extrinsic: Extrinsic::identity(),
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside the {}×{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if !(self.z_min > 0.0) {
            return Err(Error::Config("z_min must be positive".into()));
        }
        self.extrinsic.validate()
    }

    /// Parses a camera description of `key=value` lines. Keys may carry a
    /// `camera.` prefix. Rotation is given row-major as `r00 .. r22`,
    /// translation as `tx ty tz`; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cam = CameraModel::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("camera line {}: expected key=value", n + 1)))?;
            let key = key.trim();
            let key = key.strip_prefix("camera.").unwrap_or(key);
            let value = value.trim();
            let num = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("camera line {}: bad number `{value}`", n + 1)))
            };
            let int = || -> Result<usize> {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("camera line {}: bad integer `{value}`", n + 1)))
            };
            match key {
                "fx" => cam.fx = num()?,
                "fy" => cam.fy = num()?,
                "cx" => cam.cx = num()?,
                "cy" => cam.cy = num()?,
                "width" => cam.width = int()?,
                "height" => cam.height = int()?,
                "z_min" => cam.z_min = num()?,
                "tx" => cam.extrinsic.translation[0] = num()?,
                "ty" => cam.extrinsic.translation[1] = num()?,
                "tz" => cam.extrinsic.translation[2] = num()?,
                k if k.len() == 3 && k.starts_with('r') => {
                    let b = k.as_bytes();
                    let (i, j) = (b[1].wrapping_sub(b'0'), b[2].wrapping_sub(b'0'));
                    if i > 2 || j > 2 {
                        return Err(Error::Format(format!("camera line {}: unknown key `{key}`", n + 1)));
                    }
                    cam.extrinsic.rotation[i as usize][j as usize] = num()?;
                }
                _ => return Err(Error::Format(format!("camera line {}: unknown key `{key}`", n + 1))),
            }
        }
        cam.validate()?;
        Ok(cam)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Camera-frame point at pixel `(u, v)` seen at range `depth`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Point3 {
        [(u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth]
    }
}

pub fn transform_points(cloud: &PointCloud, extrinsic: &Extrinsic) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|&p| extrinsic.apply(p)).collect(),
    }
}

/// Pixel coordinates and range of a camera-frame point, or `None` when the
/// point is behind `z_min` or falls outside the image.
pub fn project_point(p: Point3, cam: &CameraModel) -> Option<(f64, f64, f64)> {
    let [x, y, z] = p;
    if !(z > cam.z_min) {
        return None;
    }
    let u = cam.fx * x / z + cam.cx;
    let v = cam.fy * y / z + cam.cy;
    if u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64 {
        Some((u, v, z))
    } else {
        None
    }
}

/// Per-pixel range in metres; 0 means no return.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    /// Depth scaled into `[0, 1]` by `max_range`, clamped above.
    pub fn normalized(&self, max_range: f64) -> Vec<f64> {
        self.values.iter().map(|&d| (d / max_range).min(1.0)).collect()
    }

    /// Millimetre quantization used by the PGM format.
    pub fn to_millimetres(&self) -> Vec<u16> {
        self.values
            .iter()
            .map(|&d| (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect()
    }

    pub fn from_millimetres(width: usize, height: usize, mm: &[u16]) -> Self {
        Self {
            width,
            height,
            values: mm.iter().map(|&v| v as f64 / 1000.0).collect(),
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm16(path, self.width, self.height, &self.to_millimetres())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let (w, h, px) = read_pgm16(path)?;
        Ok(Self::from_millimetres(w, h, &px))
    }
}

/// Nearest-pixel z-buffer rendering of a LiDAR-frame cloud. Points are moved
/// into the camera frame by `cam.extrinsic` before projection.
pub fn render_depth_map(cloud: &PointCloud, cam: &CameraModel) -> DepthMap {
    let mut map = DepthMap::empty(cam.width, cam.height);
    for &p in &cloud.points {
        let q = cam.extrinsic.apply(p);
        if let Some((col, row, z)) = project_point(q, cam).and_then(|hit| pixel_of(hit, cam)) {
            let cur = map.get(col, row);
            if cur == 0.0 || z < cur {
                map.set(col, row, z);
            }
        }
    }
    map
}

/// Rounds a projection to its pixel; projections within half a pixel of the
/// right or bottom border round off the image and are dropped.
fn pixel_of((u, v, z): (f64, f64, f64), cam: &CameraModel) -> Option<(usize, usize, f64)> {
    let col = u.round() as usize;
    let row = v.round() as usize;
    (col < cam.width && row < cam.height).then_some((col, row, z))
}

/// Fills empty pixels with the nearest (minimum) return inside a
/// `(2r+1)²` window. Radius 0 is the identity.
pub fn densify(map: &DepthMap, radius: usize) -> DepthMap {
    if radius == 0 {
        return map.clone();
    }
    let mut out = map.clone();
    let r = radius as isize;
    for row in 0..map.height {
        for col in 0..map.width {
            if map.get(col, row) != 0.0 {
                continue;
            }
            let mut best = f64::INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (row as isize + dy, col as isize + dx);
                    if y < 0 || x < 0 || y >= map.height as isize || x >= map.width as isize {
                        continue;
                    }
                    let d = map.get(x as usize, y as usize);
                    if d > 0.0 && d < best {
                        best = d;
                    }
                }
            }
            if best.is_finite() {
                out.set(col, row, best);
            }
        }
    }
    out
}

/// Writes a binary 16-bit PGM (`P5`, maxval 65535, big-endian samples).
pub fn write_pgm16(path: &Path, width: usize, height: usize, pixels: &[u16]) -> Result<()> {
    std::fs::write(path, encode_pgm16(width, height, pixels)).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm16(width: usize, height: usize, pixels: &[u16]) -> Vec<u8> {
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    bytes.reserve(pixels.len() * 2);
    for &p in pixels {
        bytes.extend_from_slice(&p.to_be_bytes());
    }
    bytes
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm16(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if header[0] != "P5" {
        return Err(Error::Format(format!("expected P5 magic, found `{}`", header[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field `{s}`")));
    let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
    if maxval != 65535 {
        return Err(Error::Format(format!("expected 16-bit PGM (maxval 65535), found {maxval}")));
    }
    let need = w * h * 2;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(Error::Format(format!(
            "PGM raster has {} bytes, expected {need}",
            raster.len()
        )));
    }
    let px = raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, px))
}
