//! Point-cloud containers, rigid transforms, multi-scan stacking and voxel
//! downsampling.
//!
//! Every consumer of LiDAR geometry in this crate goes through these types.
//! Scan files are KITTI-style flat binaries of little-endian `f32`
//! `(x, y, z, intensity)` quadruples; pose files are text with 12
//! whitespace-separated floats per line (top three rows of a 4x4 matrix,
//! row-major).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A LiDAR return: position, reflectance and range from the sensor origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point5 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance in `[0, 1]`.
    pub intensity: f64,
    /// Euclidean norm of `(x, y, z)`; recomputed whenever the point moves.
    pub range: f64,
}

impl Point5 {
    /// Build a point, deriving `range` from the coordinates.
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        let range = (x * x + y * y + z * z).sqrt();
        Point5 {
            x,
            y,
            z,
            intensity,
            range,
        }
    }

    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.intensity.is_finite()
            && self.range.is_finite()
    }
}

/// Rigid transform stored as a 4x4 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    m: [[f64; 4]; 4],
}

impl Pose {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Pose { m }
    }

    /// Construct from a rotation block and translation, validating rigidity.
    pub fn from_parts(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = rotation[i][j];
            }
            m[i][3] = translation[i];
        }
        m[3][3] = 1.0;
        let pose = Pose { m };
        pose.validate()?;
        Ok(pose)
    }

    /// Pure translation.
    pub fn translation(t: [f64; 3]) -> Self {
        let mut pose = Pose::identity();
        pose.m[0][3] = t[0];
        pose.m[1][3] = t[1];
        pose.m[2][3] = t[2];
        pose
    }

    /// Rotation about the z axis by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut pose = Pose::identity();
        pose.m[0][0] = c;
        pose.m[0][1] = -s;
        pose.m[1][0] = s;
        pose.m[1][1] = c;
        pose
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.m[i][j];
            }
        }
        r
    }

    pub fn translation_vec(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    /// Checks orthonormality (det +1) of the rotation block and the
    /// homogeneous last row, both within 1e-6.
    pub fn validate(&self) -> Result<()> {
        const TOL: f64 = 1e-6;
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let cdot: f64 = r.iter().map(|row| row[i] * row[j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (cdot - expect).abs() > TOL {
                    return Err(Error::data(format!(
                        "pose rotation not orthonormal: col {i}.col {j} = {cdot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > TOL {
            return Err(Error::data(format!(
                "pose rotation determinant {det} != +1"
            )));
        }
        let last = self.m[3];
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::data("pose last row is not (0,0,0,1)".to_string()));
        }
        Ok(())
    }

    /// Apply to a 3D position.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Compose: `self * other` (apply `other` first).
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for (k, brow) in b.iter().enumerate() {
                    s += a[i][k] * brow[j];
                }
                m[i][j] = s;
            }
        }
        Pose { m }
    }

    /// Rigid inverse: transpose the rotation, negate the rotated translation.
    pub fn inverse(&self) -> Pose {
        let r = self.rotation();
        let t = self.translation_vec();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[j][i];
            }
            m[i][3] = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
        }
        m[3][3] = 1.0;
        Pose { m }
    }
}

/// A single LiDAR sweep tagged with its frame index.
#[derive(Debug, Clone)]
pub struct Scan {
    pub frame_index: usize,
    pub points: Vec<Point5>,
}

/// Several scans aligned into one frame; `source_offset[i]` is how many
/// frames back point `i` originated (0 = current frame).
#[derive(Debug, Clone)]
pub struct StackedCloud {
    pub points: Vec<Point5>,
    pub source_offset: Vec<u32>,
}

impl StackedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rigidly transform points; intensity is preserved, range recomputed.
pub fn transform_points(points: &[Point5], pose: &Pose) -> Result<Vec<Point5>> {
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::data(format!("non-finite coordinates at point {i}")));
        }
        let [x, y, z] = pose.apply(p.coords());
        out.push(Point5::new(x, y, z, p.intensity));
    }
    Ok(out)
}

/// Stack scans into frame `t`. `poses[i]` must map scan `i` into frame `t`;
/// scans are ordered oldest to current with the current scan last.
pub fn stack_scans(scans: &[Scan], poses: &[Pose], t: usize) -> Result<StackedCloud> {
    if scans.len() != poses.len() {
        return Err(Error::config(format!(
            "stack_scans: {} scans but {} poses",
            scans.len(),
            poses.len()
        )));
    }
    let mut points = Vec::new();
    let mut source_offset = Vec::new();
    for (scan, pose) in scans.iter().zip(poses) {
        if scan.frame_index > t {
            return Err(Error::config(format!(
                "stack_scans: scan frame {} is newer than target frame {t}",
                scan.frame_index
            )));
        }
        let offset = (t - scan.frame_index) as u32;
        let transformed = transform_points(&scan.points, pose)?;
        source_offset.extend(std::iter::repeat_n(offset, transformed.len()));
        points.extend(transformed);
    }
    Ok(StackedCloud {
        points,
        source_offset,
    })
}

/// Integer voxel key: `floor(coordinate / cell)` per axis.
pub fn voxel_key(p: [f64; 3], cell: f64) -> (i64, i64, i64) {
    (
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    )
}

/// Keep the first point (in input order) of every occupied voxel.
pub fn voxel_downsample(cloud: &StackedCloud, cell: f64) -> Result<StackedCloud> {
    let (cloud, _) = voxel_downsample_indices(cloud, cell)?;
    Ok(cloud)
}

/// As [`voxel_downsample`], additionally returning the input index of each
/// surviving point so callers can carry per-point metadata through.
pub fn voxel_downsample_indices(
    cloud: &StackedCloud,
    cell: f64,
) -> Result<(StackedCloud, Vec<usize>)> {
    if cell <= 0.0 {
        return Err(Error::config(format!(
            "voxel cell must be positive, got {cell}"
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(cloud.len());
    let mut points = Vec::new();
    let mut source_offset = Vec::new();
    let mut kept = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if seen.insert(voxel_key(p.coords(), cell)) {
            points.push(*p);
            source_offset.push(cloud.source_offset[i]);
            kept.push(i);
        }
    }
    Ok((
        StackedCloud {
            points,
            source_offset,
        },
        kept,
    ))
}

// --- KITTI-style file IO ---------------------------------------------------

/// Read a flat binary scan of `(x, y, z, intensity)` f32 quadruples.
pub fn read_scan_bin(path: &Path, frame_index: usize) -> Result<Scan> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() % 16 != 0 {
        return Err(Error::parse(
            buf.len() / 16 * 16,
            format!(
                "scan file {} length {} is not a multiple of 16",
                path.display(),
                buf.len()
            ),
        ));
    }
    let n = buf.len() / 16;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let at = |j: usize| {
            let o = i * 16 + j * 4;
            f32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]) as f64
        };
        let p = Point5::new(at(0), at(1), at(2), at(3));
        if !p.is_finite() {
            return Err(Error::parse(
                i * 16,
                format!("non-finite point {i} in {}", path.display()),
            ));
        }
        points.push(p);
    }
    Ok(Scan {
        frame_index,
        points,
    })
}

/// Write a scan in the same binary layout [`read_scan_bin`] expects.
pub fn write_scan_bin(path: &Path, scan: &Scan) -> Result<()> {
    let mut buf = Vec::with_capacity(scan.points.len() * 16);
    for p in &scan.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a poses file: one line per frame, 12 floats forming the top three
/// rows of the 4x4 matrix, row-major.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::parse(lineno, format!("bad float '{tok}' in {}", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(Error::parse(
                lineno,
                format!(
                    "pose line {} has {} values, expected 12",
                    lineno,
                    vals.len()
                ),
            ));
        }
        let rotation = [
            [vals[0], vals[1], vals[2]],
            [vals[4], vals[5], vals[6]],
            [vals[8], vals[9], vals[10]],
        ];
        let translation = [vals[3], vals[7], vals[11]];
        poses.push(Pose::from_parts(rotation, translation)?);
    }
    Ok(poses)
}

/// Write poses in the format [`read_poses`] expects.
pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut out = String::new();
    for pose in poses {
        let r = pose.rotation();
        let t = pose.translation_vec();
        let row = [
            r[0][0], r[0][1], r[0][2], t[0], //
            r[1][0], r[1][1], r[1][2], t[1], //
            r[2][0], r[2][1], r[2][2], t[2],
        ];
        let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
