//! Point-cloud and mesh file parsing, surface sampling and dataset manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sparse_core::{svt, SparseError, SparseVoxelTensor};
use crate::voxelizer::{voxelize, Point, PointCloud, VoxelConfig, VoxelError};

/// Radius that normalized mesh samples are scaled to; keeps them strictly
/// inside the +-0.2 m classification clip box.
pub const NORMALIZED_RADIUS: f64 = 0.18;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("bad OFF header: {0}")]
    BadHeader(String),
    #[error("face {face} references vertex {index}, mesh has {num_vertices}")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        num_vertices: usize,
    },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("mesh has zero surface area")]
    DegenerateMesh,
    #[error("unsupported input file {0}")]
    UnsupportedFormat(PathBuf),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Strips a `#` comment and surrounding whitespace.
fn content(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Whitespace-separated `x y z [intensity]` rows. Blank lines and `#`
/// comments are skipped.
pub fn parse_xyz<R: Read>(reader: R) -> Result<PointCloud, DataError> {
    let mut points = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let body = content(&line);
        if body.is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = body.split_whitespace().map(str::parse::<f64>).collect();
        let malformed = |reason: String| DataError::MalformedRow { line: n + 1, reason };
        let vals = vals.map_err(|e| malformed(e.to_string()))?;
        if !(3..=4).contains(&vals.len()) {
            return Err(malformed(format!("expected 3 or 4 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(malformed("non-finite value".into()));
        }
        let mut p = Point::new(vals[0], vals[1], vals[2]);
        if let Some(&i) = vals.get(3) {
            p.intensity = Some(i as f32);
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn write_xyz<W: Write>(pc: &PointCloud, mut w: W) -> std::io::Result<()> {
    for p in &pc.points {
        match p.intensity {
            Some(i) => writeln!(w, "{} {} {} {}", p.x, p.y, p.z, i)?,
            None => writeln!(w, "{} {} {}", p.x, p.y, p.z)?,
        }
    }
    w.flush()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn triangle_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        let u = sub(b, a);
        let v = sub(c, a);
        0.5 * norm(cross(u, v))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).sum()
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Parses an OFF mesh. Polygons with `n > 3` vertices are fan-split into
/// `n - 2` triangles; trailing per-face tokens (colors) are ignored. The
/// counts may follow `OFF` on the header line.
pub fn parse_off<R: Read>(reader: R) -> Result<TriangleMesh, DataError> {
    let text = {
        let mut s = String::new();
        BufReader::new(reader).read_to_string(&mut s)?;
        s
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, content(l)))
        .filter(|(_, l)| !l.is_empty());

    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::BadHeader("empty file".into()))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| DataError::BadHeader(format!("expected OFF, found {header:?}")))?;
    let counts_line = if rest.trim().is_empty() {
        lines
            .next()
            .ok_or_else(|| DataError::TruncatedFile("missing counts line".into()))?
    } else {
        (1, rest.trim())
    };
    let counts: Vec<usize> = counts_line
        .1
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| DataError::BadHeader(format!("bad counts line: {e}")))?;
    if counts.len() < 2 {
        return Err(DataError::BadHeader("counts line needs vertex and face counts".into()));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv.min(1 << 22));
    for v in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| DataError::TruncatedFile(format!("expected {nv} vertices, found {v}")))?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| DataError::MalformedRow {
                line: ln,
                reason: e.to_string(),
            })?;
        if vals.len() < 3 {
            return Err(DataError::MalformedRow {
                line: ln,
                reason: "vertex needs 3 coordinates".into(),
            });
        }
        vertices.push([vals[0], vals[1], vals[2]]);
    }

    let mut faces = Vec::with_capacity(nf.min(1 << 22));
    for f in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| DataError::TruncatedFile(format!("expected {nf} faces, found {f}")))?;
        let mut toks = l.split_whitespace();
        let malformed = |reason: &str| DataError::MalformedRow {
            line: ln,
            reason: reason.into(),
        };
        let n: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| malformed("missing polygon size"))?;
        if n < 3 {
            return Err(malformed("polygon needs at least 3 vertices"));
        }
        let idx: Vec<usize> = toks
            .by_ref()
            .take(n)
            .map(|t| t.parse().map_err(|_| malformed("bad vertex index")))
            .collect::<Result<_, _>>()?;
        if idx.len() < n {
            return Err(DataError::TruncatedFile(format!("face {f} lists fewer than {n} indices")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(DataError::IndexOutOfRange {
                face: f,
                index: bad,
                num_vertices: nv,
            });
        }
        for j in 1..n - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(TriangleMesh { vertices, faces })
}

/// Area-weighted uniform samples on the mesh surface, in mesh coordinates.
pub fn sample_surface_raw(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud, DataError> {
    let areas: Vec<f64> = (0..mesh.faces.len()).map(|f| mesh.triangle_area(f)).collect();
    let total: f64 = areas.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(DataError::DegenerateMesh);
    }
    let pick = WeightedIndex::new(&areas).map_err(|_| DataError::DegenerateMesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let f = pick.sample(&mut rng);
        let [a, b, c] = mesh.faces[f].map(|i| mesh.vertices[i]);
        let r1: f64 = rng.random();
        let r2: f64 = rng.random();
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        points.push(Point::new(
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ));
    }
    Ok(PointCloud::new(points))
}

/// Similarity transform `p -> (p - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.center[0]) * self.scale,
            (p[1] - self.center[1]) * self.scale,
            (p[2] - self.center[2]) * self.scale,
        ]
    }
}

/// Centers the cloud on its centroid and scales its farthest point to `radius`.
pub fn normalize_cloud(pc: &mut PointCloud, radius: f64) -> Normalization {
    let n = pc.len().max(1) as f64;
    let mut center = [0.0; 3];
    for p in &pc.points {
        center[0] += p.x / n;
        center[1] += p.y / n;
        center[2] += p.z / n;
    }
    let far = pc
        .points
        .iter()
        .map(|p| norm(sub(p.xyz(), center)))
        .fold(0.0, f64::max);
    let scale = if far > 0.0 { radius / far } else { 1.0 };
    let t = Normalization { center, scale };
    for p in &mut pc.points {
        let q = t.apply(p.xyz());
        (p.x, p.y, p.z) = (q[0], q[1], q[2]);
    }
    t
}

/// Surface samples normalized to [`NORMALIZED_RADIUS`].
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud, DataError> {
    let mut pc = sample_surface_raw(mesh, n, seed)?;
    normalize_cloud(&mut pc, NORMALIZED_RADIUS);
    Ok(pc)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

/// `path,label` rows. Relative paths resolve against `base`.
pub fn parse_manifest<R: Read>(reader: R, base: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let body = content(&line);
        if body.is_empty() {
            continue;
        }
        let (path, label) = body.rsplit_once(',').ok_or_else(|| DataError::MalformedRow {
            line: n + 1,
            reason: "expected path,label".into(),
        })?;
        let label = label.trim().parse().map_err(|_| DataError::MalformedRow {
            line: n + 1,
            reason: format!("bad label {label:?}"),
        })?;
        let path = PathBuf::from(path.trim());
        let path = if path.is_relative() { base.join(path) } else { path };
        out.push(ManifestEntry { path, label });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, DataError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(File::open(path)?, base)
}

pub fn write_manifest<W: Write>(entries: &[(String, usize)], mut w: W) -> std::io::Result<()> {
    for (p, l) in entries {
        writeln!(w, "{p},{l}")?;
    }
    w.flush()
}

/// Options for turning an input file into a voxel tensor.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub voxel: VoxelConfig,
    /// Points sampled from `.off` meshes.
    pub mesh_points: usize,
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            voxel: VoxelConfig::modelnet(),
            mesh_points: 1024,
            seed: 0,
        }
    }
}

pub fn load_point_cloud(path: &Path, opts: &LoadOptions) -> Result<PointCloud, DataError> {
    let wrap = |e: DataError| DataError::File {
        path: path.to_path_buf(),
        source: Box::new(e),
    };
    let open = || File::open(path).map_err(|e| wrap(e.into()));
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") | Some("txt") => parse_xyz(open()?).map_err(wrap),
        Some("off") => {
            let mesh = parse_off(open()?).map_err(wrap)?;
            sample_surface(&mesh, opts.mesh_points, opts.seed).map_err(wrap)
        }
        _ => Err(DataError::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Loads `.svt` directly, or reads and voxelizes `.xyz`/`.off`.
pub fn load_tensor(path: &Path, opts: &LoadOptions) -> Result<SparseVoxelTensor, DataError> {
    if path.extension().and_then(|e| e.to_str()) == Some("svt") {
        return svt::load_svt(path).map_err(|e| DataError::File {
            path: path.to_path_buf(),
            source: Box::new(e.into()),
        });
    }
    let pc = load_point_cloud(path, opts)?;
    voxelize(&pc, &opts.voxel).map_err(|e| DataError::File {
        path: path.to_path_buf(),
        source: Box::new(e.into()),
    })
}

pub fn save_xyz(pc: &PointCloud, path: &Path) -> std::io::Result<()> {
    write_xyz(pc, BufWriter::new(File::create(path)?))
}
