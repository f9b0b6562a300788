//! Synthetic shape sampling, partial views, `.xyz` i/o and dataset
//! manifests.
//!
//! Five parametric surface families (sphere, cube, cylinder, torus, plane)
//! are sampled uniformly by area from seeded generators, so any shape can be
//! re-drawn deterministically or re-sampled independently. Ground-truth
//! clouds are normalized to `[-1, 1]` and centered at the origin; partial
//! inputs are a half-space crop of the ground truth, thinned to a fixed size
//! by farthest point sampling.

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, Point, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Ground-truth cloud size used by dataset generation.
pub const GT_POINTS: usize = 2048;
/// Partial cloud size after the farthest-point thinning step.
pub const PARTIAL_POINTS: usize = 512;
/// Fraction of the ground truth kept by the half-space crop.
pub const PARTIAL_KEEP_RATIO: f64 = 0.5;

/// The five synthetic surface families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Plane,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::Plane,
    ];
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
        };
        f.write_str(s)
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "cube" => Ok(ShapeKind::Cube),
            "cylinder" => Ok(ShapeKind::Cylinder),
            "torus" => Ok(ShapeKind::Torus),
            "plane" => Ok(ShapeKind::Plane),
            other => Err(Error::config(format!(
                "unknown shape category '{other}' (expected one of sphere, cube, cylinder, torus, plane)"
            ))),
        }
    }
}

/// A reproducible recipe for one sampled cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub n: usize,
    pub seed: u64,
}

// Fixed proportions of the parametric surfaces (before normalization).
const CYL_RADIUS: f64 = 0.6;
const CYL_HALF_HEIGHT: f64 = 0.8;
const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.25;

/// Samples `spec.n` points uniformly by surface area from the seeded
/// generator.
pub fn gen_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    if spec.n == 0 {
        return Err(Error::data("cannot sample a shape with zero points".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points = (0..spec.n).map(|_| sample_point(spec.kind, &mut rng)).collect();
    Ok(PointCloud::new(points))
}

/// A fresh, independent sampling of the same surface.
pub fn resample_surface(spec: &ShapeSpec, seed: u64) -> Result<PointCloud> {
    gen_shape(&ShapeSpec { seed, ..*spec })
}

fn sample_point(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Point {
    match kind {
        ShapeKind::Sphere => {
            // Uniform z plus uniform azimuth is area-uniform on the sphere.
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            [r * phi.cos(), r * phi.sin(), z]
        }
        ShapeKind::Cube => {
            // Six faces of equal area on the [-1, 1]^3 surface.
            let face = rng.gen_range(0..6u8);
            let u: f64 = rng.gen_range(-1.0..=1.0);
            let v: f64 = rng.gen_range(-1.0..=1.0);
            match face {
                0 => [1.0, u, v],
                1 => [-1.0, u, v],
                2 => [u, 1.0, v],
                3 => [u, -1.0, v],
                4 => [u, v, 1.0],
                _ => [u, v, -1.0],
            }
        }
        ShapeKind::Cylinder => {
            // Choose lateral surface or a cap proportionally to area.
            let lateral = std::f64::consts::TAU * CYL_RADIUS * 2.0 * CYL_HALF_HEIGHT;
            let cap = std::f64::consts::PI * CYL_RADIUS * CYL_RADIUS;
            let pick: f64 = rng.gen_range(0.0..lateral + 2.0 * cap);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            if pick < lateral {
                let z: f64 = rng.gen_range(-CYL_HALF_HEIGHT..=CYL_HALF_HEIGHT);
                [CYL_RADIUS * phi.cos(), CYL_RADIUS * phi.sin(), z]
            } else {
                // Uniform over a disc: radius proportional to sqrt(u).
                let r = CYL_RADIUS * rng.gen_range(0.0f64..=1.0).sqrt();
                let z = if pick < lateral + cap { CYL_HALF_HEIGHT } else { -CYL_HALF_HEIGHT };
                [r * phi.cos(), r * phi.sin(), z]
            }
        }
        ShapeKind::Torus => {
            // Area element scales with (A + a cos psi); rejection-sample the
            // tube angle against that density.
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let psi = loop {
                let candidate: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let accept: f64 = rng.gen_range(0.0..=1.0);
                let density = (TORUS_MAJOR + TORUS_MINOR * candidate.cos())
                    / (TORUS_MAJOR + TORUS_MINOR);
                if accept <= density {
                    break candidate;
                }
            };
            let ring = TORUS_MAJOR + TORUS_MINOR * psi.cos();
            [ring * theta.cos(), ring * theta.sin(), TORUS_MINOR * psi.sin()]
        }
        ShapeKind::Plane => {
            [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), 0.0]
        }
    }
}

/// Keeps the `ceil(keep_ratio * n)` points with the smallest projection onto
/// `view_dir` — a half-space crop simulating a single viewpoint. The output
/// is ordered by projection; projection ties resolve to the lower index.
pub fn make_partial(cloud: &PointCloud, view_dir: &Point, keep_ratio: f64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::data("cannot crop an empty cloud".to_string()));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::data(format!(
            "keep_ratio must lie in (0, 1], got {keep_ratio}"
        )));
    }
    let norm = (view_dir[0] * view_dir[0] + view_dir[1] * view_dir[1] + view_dir[2] * view_dir[2])
        .sqrt();
    if norm == 0.0 {
        return Err(Error::data("view direction must be non-zero".to_string()));
    }
    let keep = (keep_ratio * cloud.len() as f64).ceil() as usize;
    let mut order: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let proj = (p[0] * view_dir[0] + p[1] * view_dir[1] + p[2] * view_dir[2]) / norm;
            (proj, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(PointCloud::new(
        order[..keep].iter().map(|&(_, i)| cloud.points()[i]).collect(),
    ))
}

/// Centers the cloud on its centroid and scales the largest absolute
/// coordinate to exactly one. A cloud whose points all coincide cannot be
/// normalized.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::data("cannot normalize an empty cloud".to_string()));
    }
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in cloud.points() {
        for c in 0..3 {
            centroid[c] += p[c] / n;
        }
    }
    let mut extent: f64 = 0.0;
    for p in cloud.points() {
        for c in 0..3 {
            extent = extent.max((p[c] - centroid[c]).abs());
        }
    }
    if extent == 0.0 {
        return Err(Error::numeric(
            "degenerate cloud: all points coincide, nothing to normalize".to_string(),
        ));
    }
    Ok(PointCloud::new(
        cloud
            .points()
            .iter()
            .map(|p| [
                (p[0] - centroid[0]) / extent,
                (p[1] - centroid[1]) / extent,
                (p[2] - centroid[2]) / extent,
            ])
            .collect(),
    ))
}

// ── .xyz text format ────────────────────────────────────────────────────

/// Reads a cloud from the text format: one point per line, three decimal
/// reals separated by single spaces; lines starting with `#` are comments.
/// Parse failures name the offending line number.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| {
            Error::data(format!("{}:{}: read failure: {e}", path.display(), lineno + 1))
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(' ').collect();
        if fields.len() != 3 {
            return Err(Error::data(format!(
                "{}:{}: expected 3 coordinates, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let mut p = [0.0; 3];
        for (c, field) in fields.iter().enumerate() {
            p[c] = field.parse::<f64>().map_err(|_| {
                Error::data(format!(
                    "{}:{}: '{field}' is not a real number",
                    path.display(),
                    lineno + 1
                ))
            })?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::data(format!(
            "{}: no points (empty or comment-only file)",
            path.display()
        )));
    }
    Ok(PointCloud::new(points))
}

/// Writes a cloud in the `.xyz` text format. Coordinates use the shortest
/// decimal representation that round-trips the 64-bit value, so
/// write-then-read reproduces the cloud bit for bit.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| {
        Error::data(format!("cannot create {}: {e}", path.display()))
    })?);
    for p in cloud.points() {
        writeln!(out, "{} {} {}", p[0], p[1], p[2])
            .map_err(|e| Error::data(format!("write to {} failed: {e}", path.display())))?;
    }
    out.flush()?;
    Ok(())
}

// ── dataset manifests ───────────────────────────────────────────────────

/// Train/test membership of a dataset entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One partial/ground-truth pair in a manifest. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub category: String,
    pub split: Split,
    pub partial: String,
    pub gt: String,
}

/// The JSON document describing a generated dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub categories: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{} is not a valid manifest: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// An entry with its clouds loaded into memory.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub id: String,
    pub category: String,
    pub split: Split,
    pub partial: PointCloud,
    pub gt: PointCloud,
}

/// A fully loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    /// Loads every cloud referenced by the manifest in `dir`.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = Manifest::load(dir)?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            entries.push(DatasetEntry {
                id: e.id.clone(),
                category: e.category.clone(),
                split: e.split,
                partial: read_xyz(&dir.join(&e.partial))?,
                gt: read_xyz(&dir.join(&e.gt))?,
            });
        }
        Ok(Dataset { categories: manifest.categories, entries })
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// SplitMix64-style seed mixing so every entry gets an independent stream.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut x = base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generates the normalized ground truth and its partial view for one entry.
///
/// Pipeline: sample `GT_POINTS` by area, normalize, crop a seeded half-space
/// keeping `PARTIAL_KEEP_RATIO`, then thin to `PARTIAL_POINTS` by farthest
/// point sampling.
pub fn synth_pair(kind: ShapeKind, seed: u64) -> Result<(PointCloud, PointCloud)> {
    let gt = normalize(&gen_shape(&ShapeSpec { kind, n: GT_POINTS, seed })?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x71e8, 0));
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    let view = [r * phi.cos(), r * phi.sin(), z];
    let cropped = make_partial(&gt, &view, PARTIAL_KEEP_RATIO)?;
    let thinned = farthest_point_sample(&cropped, PARTIAL_POINTS.min(cropped.len()), 0)?;
    Ok((gt, PointCloud::new(thinned.centers)))
}

/// Writes a complete dataset under `dir`: per-entry `.xyz` files for the
/// partial and ground-truth clouds plus a `manifest.json`. `per_category` is
/// the number of training entries per category; the test split gets a fifth
/// of that (at least one).
pub fn generate_dataset(
    dir: &Path,
    seed: u64,
    categories: &[ShapeKind],
    per_category: usize,
) -> Result<Manifest> {
    if categories.is_empty() || per_category == 0 {
        return Err(Error::config(
            "dataset generation needs at least one category and one entry".to_string(),
        ));
    }
    let test_per_category = (per_category / 5).max(1);
    for sub in ["train", "test"] {
        std::fs::create_dir_all(dir.join(sub))
            .map_err(|e| Error::data(format!("cannot create {}: {e}", dir.join(sub).display())))?;
    }
    let mut entries = Vec::new();
    for (ci, &kind) in categories.iter().enumerate() {
        for (split, count, salt) in [
            (Split::Train, per_category, 1u64),
            (Split::Test, test_per_category, 2u64),
        ] {
            for i in 0..count {
                let entry_seed = mix_seed(seed, (ci as u64) << 8 | salt, i as u64);
                let (gt, partial) = synth_pair(kind, entry_seed)?;
                let sub = match split {
                    Split::Train => "train",
                    Split::Test => "test",
                };
                let id = format!("{kind}_{sub}_{i:04}");
                let partial_rel = format!("{sub}/{id}_partial.xyz");
                let gt_rel = format!("{sub}/{id}_gt.xyz");
                write_xyz(&dir.join(&partial_rel), &partial)?;
                write_xyz(&dir.join(&gt_rel), &gt)?;
                entries.push(ManifestEntry {
                    id,
                    category: kind.to_string(),
                    split,
                    partial: partial_rel,
                    gt: gt_rel,
                });
            }
        }
    }
    let manifest = Manifest {
        version: 1,
        seed,
        categories: categories.iter().map(|k| k.to_string()).collect(),
        entries,
    };
    manifest.save(dir)?;
    Ok(manifest)
}
