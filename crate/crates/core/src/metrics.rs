//! Set-level generative metrics: coverage (COV) and minimum matching distance (MMD).

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::model::Model;
use crate::sampler::{sample_many, SampleConfig};

/// MMD is reported multiplied by this factor.
pub const MMD_SCALE: f64 = 1e4;

/// A symmetric shape distance with values in `[0, 1]`.
pub trait ShapeDistance {
    fn name(&self) -> &'static str;
    fn distance(&self, a: &VoxelGrid, b: &VoxelGrid) -> Result<f64>;
}

/// `1 - |A & B| / |A | B|`, zero for two empty grids.
#[derive(Clone, Copy, Debug, Default)]
pub struct IouDistance;

impl ShapeDistance for IouDistance {
    fn name(&self) -> &'static str {
        "iou"
    }

    fn distance(&self, a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
        let (inter, union) = a.overlap(b)?;
        if union == 0 {
            return Ok(0.0);
        }
        Ok(1.0 - inter as f64 / union as f64)
    }
}

/// `d[i][j]` = distance from generated shape `i` to reference `j`.
pub fn distance_matrix(gen: &[VoxelGrid], reference: &[VoxelGrid], dist: &dyn ShapeDistance) -> Result<Vec<Vec<f64>>> {
    if gen.is_empty() || reference.is_empty() {
        return Err(Error::EmptyDataset("COV and MMD need two nonempty sets".into()));
    }
    gen.iter()
        .map(|g| reference.iter().map(|r| dist.distance(g, r)).collect())
        .collect()
}

/// Percentage of references that are the nearest neighbour of some generated
/// shape; ties go to the lowest reference index.
pub fn coverage_from_matrix(d: &[Vec<f64>]) -> f64 {
    let m = d[0].len();
    let mut hit = vec![false; m];
    for row in d {
        let best = (0..m).fold(0, |b, j| if row[j] < row[b] { j } else { b });
        hit[best] = true;
    }
    100.0 * hit.iter().filter(|&&h| h).count() as f64 / m as f64
}

/// Mean over references of the distance to the closest generated shape.
pub fn mmd_from_matrix(d: &[Vec<f64>]) -> f64 {
    let m = d[0].len();
    let total: f64 = (0..m)
        .map(|j| d.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .sum();
    total / m as f64
}

pub fn coverage(gen: &[VoxelGrid], reference: &[VoxelGrid], dist: &dyn ShapeDistance) -> Result<f64> {
    Ok(coverage_from_matrix(&distance_matrix(gen, reference, dist)?))
}

pub fn mmd(gen: &[VoxelGrid], reference: &[VoxelGrid], dist: &dyn ShapeDistance) -> Result<f64> {
    Ok(mmd_from_matrix(&distance_matrix(gen, reference, dist)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub cov_percent: f64,
    /// MMD times `MMD_SCALE`.
    pub mmd_scaled: f64,
    pub generated: usize,
    pub reference: usize,
    pub distance: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn compute(gen: &[VoxelGrid], reference: &[VoxelGrid], dist: &dyn ShapeDistance, seed: u64) -> Result<Self> {
        let d = distance_matrix(gen, reference, dist)?;
        Ok(Self {
            cov_percent: coverage_from_matrix(&d),
            mmd_scaled: mmd_from_matrix(&d) * MMD_SCALE,
            generated: gen.len(),
            reference: reference.len(),
            distance: dist.name().into(),
            seed,
        })
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(self)?;
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "distance   {}", self.distance)?;
        writeln!(f, "generated  {}", self.generated)?;
        writeln!(f, "reference  {}", self.reference)?;
        writeln!(f, "COV        {:.2} %", self.cov_percent)?;
        writeln!(f, "MMD x1e4   {:.2}", self.mmd_scaled)?;
        write!(f, "seed       {}", self.seed)
    }
}

/// Samples `multiplier * |reference|` shapes and scores them against `reference`.
pub fn evaluate_model(
    model: &Model,
    reference: &[VoxelGrid],
    multiplier: usize,
    cfg: &SampleConfig,
) -> Result<MetricsReport> {
    if reference.is_empty() {
        return Err(Error::EmptyDataset("reference set is empty".into()));
    }
    if multiplier == 0 {
        return Err(Error::InvalidArgument("multiplier must be at least 1".into()));
    }
    let res = 1u32 << cfg.max_depth;
    if let Some(r) = reference.iter().find(|r| r.resolution() != res) {
        return Err(Error::Shape(format!(
            "reference resolution {} differs from sampling resolution {res}",
            r.resolution()
        )));
    }
    let gen: Vec<VoxelGrid> = sample_many(model, cfg, multiplier * reference.len())?
        .into_iter()
        .map(|s| s.grid)
        .collect();
    MetricsReport::compute(&gen, reference, &IouDistance, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(res: u32, f: impl FnMut(u32, u32, u32) -> bool) -> VoxelGrid {
        VoxelGrid::from_fn(res, f).unwrap()
    }

    #[test]
    fn iou_distance_values() {
        let empty = VoxelGrid::empty(4).unwrap();
        let full = VoxelGrid::filled(4, true).unwrap();
        let half = g(4, |x, _, _| x < 2);
        let d = IouDistance;
        assert_eq!(d.distance(&empty, &empty).unwrap(), 0.0);
        assert_eq!(d.distance(&empty, &full).unwrap(), 1.0);
        assert_eq!(d.distance(&half, &full).unwrap(), 0.5);
        assert!(d.distance(&half, &VoxelGrid::empty(8).unwrap()).is_err());
    }

    #[test]
    fn identical_sets() {
        let s: Vec<VoxelGrid> = (0..4).map(|k| g(4, move |x, y, _| x + y <= k)).collect();
        assert_eq!(coverage(&s, &s, &IouDistance).unwrap(), 100.0);
        assert_eq!(mmd(&s, &s, &IouDistance).unwrap(), 0.0);
    }

    #[test]
    fn all_generated_identical() {
        let refs: Vec<VoxelGrid> = (0..4).map(|k| g(4, move |x, _, _| x <= k)).collect();
        let gen = vec![refs[2].clone(); 5];
        assert_eq!(coverage(&gen, &refs, &IouDistance).unwrap(), 25.0);
    }

    #[test]
    fn ties_pick_lowest_reference() {
        let a = g(2, |x, y, z| x + y + z == 0);
        let refs = vec![a.clone(), a.clone()];
        let d = distance_matrix(&[a], &refs, &IouDistance).unwrap();
        assert_eq!(coverage_from_matrix(&d), 50.0);
    }

    #[test]
    fn empty_sets_are_errors() {
        let a = VoxelGrid::empty(2).unwrap();
        assert!(coverage(&[], &[a.clone()], &IouDistance).is_err());
        assert!(mmd(&[a], &[], &IouDistance).is_err());
    }

    #[test]
    fn report_formats() {
        let s = vec![VoxelGrid::filled(2, true).unwrap()];
        let r = MetricsReport::compute(&s, &s, &IouDistance, 3).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cov_percent,mmd_scaled,generated,reference,distance,seed\n100.0,0.0,1,1,iou,3"));
        assert!(r.to_string().contains("COV        100.00 %"));
    }
}
