//! Procedural voxel shapes: unions of axis-aligned boxes, spheres and cylinders.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{depth_for_resolution, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Box,
    Sphere,
    Cylinder,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 3] = [PrimitiveKind::Box, PrimitiveKind::Sphere, PrimitiveKind::Cylinder];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Box => "box",
            PrimitiveKind::Sphere => "sphere",
            PrimitiveKind::Cylinder => "cylinder",
        }
    }
}

/// A solid in continuous voxel coordinates, `[0, res]` per axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    Cylinder { axis: usize, center: [f64; 2], radius: f64, lo: f64, hi: f64 },
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Box { .. } => PrimitiveKind::Box,
            Primitive::Sphere { .. } => PrimitiveKind::Sphere,
            Primitive::Cylinder { .. } => PrimitiveKind::Cylinder,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Primitive::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
            Primitive::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
                d2 <= radius * radius
            }
            Primitive::Cylinder { axis, center, radius, lo, hi } => {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let d2 = (p[u] - center[0]).powi(2) + (p[v] - center[1]).powi(2);
                d2 <= radius * radius && p[*axis] >= *lo && p[*axis] <= *hi
            }
        }
    }

    /// Random primitive spanning between a quarter and three quarters of the grid.
    pub fn random(kind: PrimitiveKind, res: u32, rng: &mut impl Rng) -> Self {
        let r = res as f64;
        let extent = |rng: &mut dyn rand::RngCore| -> (f64, f64) {
            let len = rng.gen_range(0.25 * r..=0.75 * r);
            let lo = rng.gen_range(0.0..=r - len);
            (lo, lo + len)
        };
        match kind {
            PrimitiveKind::Box => {
                let (a, b, c) = (extent(rng), extent(rng), extent(rng));
                Primitive::Box {
                    min: [a.0, b.0, c.0],
                    max: [a.1, b.1, c.1],
                }
            }
            PrimitiveKind::Sphere => {
                let radius = rng.gen_range(0.15 * r..=0.4 * r);
                let center = [0; 3].map(|_| rng.gen_range(radius..=r - radius));
                Primitive::Sphere { center, radius }
            }
            PrimitiveKind::Cylinder => {
                let axis = rng.gen_range(0..3);
                let radius = rng.gen_range(0.15 * r..=0.35 * r);
                let center = [0; 2].map(|_| rng.gen_range(radius..=r - radius));
                let (lo, hi) = extent(rng);
                Primitive::Cylinder { axis, center, radius, lo, hi }
            }
        }
    }

    pub fn describe(&self) -> String {
        let f = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
        match self {
            Primitive::Box { min, max } => format!("box min={} max={}", f(min), f(max)),
            Primitive::Sphere { center, radius } => format!("sphere c={} r={radius:.3}", f(center)),
            Primitive::Cylinder { axis, center, radius, lo, hi } => {
                format!("cylinder axis={axis} c={} r={radius:.3} span={lo:.3}..{hi:.3}", f(center))
            }
        }
    }
}

/// Occupancy of the union of `parts`, tested at voxel centres.
pub fn rasterize(res: u32, parts: &[Primitive]) -> Result<VoxelGrid> {
    VoxelGrid::from_fn(res, |x, y, z| {
        let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
        parts.iter().any(|s| s.contains(p))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Single(PrimitiveKind),
    /// `k` parts of one randomly chosen kind.
    Union(usize),
    /// Random kind and 1 to 3 parts per shape.
    Mixed,
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "box" => GeneratorKind::Single(PrimitiveKind::Box),
            "sphere" => GeneratorKind::Single(PrimitiveKind::Sphere),
            "cylinder" => GeneratorKind::Single(PrimitiveKind::Cylinder),
            "mixed" => GeneratorKind::Mixed,
            _ => {
                let k = s
                    .strip_prefix("union-")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|k| (1..=3).contains(k))
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "unknown generator {s:?}; use box, sphere, cylinder, union-1..3 or mixed"
                        ))
                    })?;
                GeneratorKind::Union(k)
            }
        })
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorKind::Single(k) => f.write_str(k.name()),
            GeneratorKind::Union(k) => write!(f, "union-{k}"),
            GeneratorKind::Mixed => f.write_str("mixed"),
        }
    }
}

/// How class labels are assigned to generated shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Primitive kind index.
    Kind,
    /// Shape index, one class per shape.
    Index,
    None,
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kind" => Ok(LabelMode::Kind),
            "index" => Ok(LabelMode::Index),
            "none" => Ok(LabelMode::None),
            _ => Err(Error::InvalidArgument(format!("unknown label mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: GeneratorKind,
    pub resolution: u32,
    pub count: usize,
    pub labels: LabelMode,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("dataset count must be at least 1".into()));
        }
        if self.resolution < 2 || depth_for_resolution(self.resolution).is_none() {
            return Err(Error::InvalidArgument(format!(
                "resolution {} is not a power of two >= 2",
                self.resolution
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub grid: VoxelGrid,
    pub class: Option<u32>,
    pub kind: PrimitiveKind,
    pub parts: Vec<Primitive>,
}

/// Generates `spec.count` shapes; output depends only on the spec.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Shape>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|i| {
            let (kind, n) = match spec.kind {
                GeneratorKind::Single(k) => (k, 1),
                GeneratorKind::Union(n) => (PrimitiveKind::ALL[rng.gen_range(0..3)], n),
                GeneratorKind::Mixed => (PrimitiveKind::ALL[rng.gen_range(0..3)], rng.gen_range(1..=3)),
            };
            let parts: Vec<Primitive> = (0..n).map(|_| Primitive::random(kind, spec.resolution, &mut rng)).collect();
            let class = match spec.labels {
                LabelMode::Kind => Some(kind.index()),
                LabelMode::Index => Some(i as u32),
                LabelMode::None => None,
            };
            Ok(Shape {
                grid: rasterize(spec.resolution, &parts)?,
                class,
                kind,
                parts,
            })
        })
        .collect()
}

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub class: Option<u32>,
    pub kind: String,
    pub parts: usize,
    pub params: String,
}

/// Writes `shape_NNNN.octv` files and the manifest into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    let shapes = generate(spec)?;
    fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST_NAME))?;
    let mut entries = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let file = format!("shape_{i:04}.octv");
        shape.grid.write_octv(dir.join(&file))?;
        let entry = ManifestEntry {
            file,
            class: shape.class,
            kind: shape.kind.name().into(),
            parts: shape.parts.len(),
            params: shape.parts.iter().map(Primitive::describe).collect::<Vec<_>>().join("; "),
        };
        manifest.serialize(&entry)?;
        entries.push(entry);
    }
    manifest.flush()?;
    Ok(entries)
}

/// A grid loaded from a corpus directory with its optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub grid: VoxelGrid,
    pub class: Option<u32>,
}

/// Reads a corpus: the manifest order when present, otherwise every `.octv`
/// file sorted by name without labels.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST_NAME);
    let listed: Vec<(PathBuf, Option<u32>)> = if manifest.exists() {
        let mut r = csv::Reader::from_path(&manifest)?;
        r.deserialize::<ManifestEntry>()
            .map(|e| e.map(|e| (dir.join(e.file), e.class)))
            .collect::<std::result::Result<_, _>>()?
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "octv"))
            .collect();
        files.sort();
        files.into_iter().map(|p| (p, None)).collect()
    };
    if listed.is_empty() {
        return Err(Error::EmptyDataset(format!("no .octv files in {}", dir.display())));
    }
    listed
        .into_iter()
        .map(|(path, class)| {
            let grid = VoxelGrid::read_octv(&path)?;
            Ok(Sample { path, grid, class })
        })
        .collect()
}
