//! Seeded synthetic datasets.
//!
//! * Two isotropic Gaussian classes in 2-D: a common class `N(0, I) × 10000`
//!   and an uncommon class `N([2.2, 2.2], 0.5·I) × 400`.
//! * A "hard" variant whose uncommon mean sits at `[1, 1]`, where the
//!   prior-weighted common density dominates everywhere.
//! * A dense per-pixel regression grid with a spatially clustered rare band
//!   of far targets.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::record::Record;
use crate::rng::{self, purpose, NormalSampler};

pub const COMMON_CLASS: usize = 0;
pub const UNCOMMON_CLASS: usize = 1;

/// Isotropic Gaussian class generator with covariance `cov_scale · I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub mean: [f64; 2],
    pub cov_scale: f64,
    pub count: usize,
    pub label: usize,
}

impl GaussianSpec {
    pub fn common() -> Self {
        Self {
            mean: [0.0, 0.0],
            cov_scale: 1.0,
            count: 10_000,
            label: COMMON_CLASS,
        }
    }

    pub fn uncommon() -> Self {
        Self {
            mean: [2.2, 2.2],
            cov_scale: 0.5,
            count: 400,
            label: UNCOMMON_CLASS,
        }
    }

    /// Uncommon class moved to `[1, 1]`; everything else unchanged.
    pub fn hard_uncommon() -> Self {
        Self {
            mean: [1.0, 1.0],
            ..Self::uncommon()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cov_scale > 0.0 && self.cov_scale.is_finite()) {
            return Err(Error::InvalidConfig("covariance scale must be positive".into()));
        }
        if self.count == 0 {
            return Err(Error::InvalidConfig("class count must be at least 1".into()));
        }
        if !self.mean.iter().all(|m| m.is_finite()) {
            return Err(Error::InvalidConfig("class mean must be finite".into()));
        }
        Ok(())
    }

    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        let c = self.cov_scale;
        let d2 = (x[0] - self.mean[0]).powi(2) + (x[1] - self.mean[1]).powi(2);
        -(std::f64::consts::TAU * c).ln() - d2 / (2.0 * c)
    }

    pub fn density(&self, x: [f64; 2]) -> f64 {
        self.log_density(x).exp()
    }

    /// Gradient of [`GaussianSpec::log_density`] at `x`.
    pub fn log_density_grad(&self, x: [f64; 2]) -> [f64; 2] {
        let c = self.cov_scale;
        [-(x[0] - self.mean[0]) / c, -(x[1] - self.mean[1]) / c]
    }

    fn write_into(&self, record: &mut Record, prefix: &str) {
        record.set_list(&format!("{prefix}.mean"), &self.mean);
        record.set(&format!("{prefix}.cov_scale"), self.cov_scale);
        record.set(&format!("{prefix}.count"), self.count);
        record.set(&format!("{prefix}.label"), self.label);
    }

    fn read_from(record: &Record, prefix: &str) -> Result<Self> {
        let mean: Vec<f64> = record.parse_list(&format!("{prefix}.mean"))?;
        let mean: [f64; 2] = mean
            .try_into()
            .map_err(|_| Error::Record(format!("`{prefix}.mean` needs two values")))?;
        let spec = Self {
            mean,
            cov_scale: record.parse_value(&format!("{prefix}.cov_scale"))?,
            count: record.parse_value(&format!("{prefix}.count"))?,
            label: record.parse_value(&format!("{prefix}.label"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Labeled 2-D points plus the generator settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset2D {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub common: GaussianSpec,
    pub uncommon: GaussianSpec,
    pub seed: u64,
}

impl Dataset2D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn manifest(&self) -> Record {
        let mut record = Record::new("dataset-manifest");
        record.set("dataset.seed", self.seed);
        record.set("dataset.rows", self.len());
        record.set("dataset.columns", "x1,x2,label");
        self.common.write_into(&mut record, "dataset.common");
        self.uncommon.write_into(&mut record, "dataset.uncommon");
        record
    }

    /// Regenerates the dataset described by a manifest.
    pub fn from_manifest(record: &Record) -> Result<Self> {
        record.expect_kind("dataset-manifest")?;
        let common = GaussianSpec::read_from(record, "dataset.common")?;
        let uncommon = GaussianSpec::read_from(record, "dataset.uncommon")?;
        gen_two_gaussians(record.parse_value("dataset.seed")?, common, uncommon)
    }

    /// Writes `x1,x2,label` rows to `csv_path`.
    pub fn write_csv(&self, csv_path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(csv_path).map_err(|e| Error::csv(csv_path, e))?;
        writer
            .write_record(["x1", "x2", "label"])
            .map_err(|e| Error::csv(csv_path, e))?;
        for (p, l) in self.points.iter().zip(&self.labels) {
            writer
                .write_record([p[0].to_string(), p[1].to_string(), l.to_string()])
                .map_err(|e| Error::csv(csv_path, e))?;
        }
        writer.flush().map_err(|e| Error::io(csv_path, e))
    }

    /// Reads rows written by [`Dataset2D::write_csv`]; the generator settings
    /// come from the accompanying manifest.
    pub fn read_csv(csv_path: &Path, manifest: &Record) -> Result<Self> {
        manifest.expect_kind("dataset-manifest")?;
        let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::csv(csv_path, e))?;
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::csv(csv_path, e))?;
            let field = |i: usize| -> Result<&str> {
                row.get(i)
                    .ok_or_else(|| Error::Record(format!("{}: short row", csv_path.display())))
            };
            let parse_f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Record(format!("{}: bad number `{s}`", csv_path.display())))
            };
            points.push([parse_f(field(0)?)?, parse_f(field(1)?)?]);
            labels.push(
                field(2)?
                    .parse()
                    .map_err(|_| Error::Record(format!("{}: bad label", csv_path.display())))?,
            );
        }
        Ok(Self {
            points,
            labels,
            common: GaussianSpec::read_from(manifest, "dataset.common")?,
            uncommon: GaussianSpec::read_from(manifest, "dataset.uncommon")?,
            seed: manifest.parse_value("dataset.seed")?,
        })
    }
}

fn sample_class(seed: u64, stream: u64, spec: &GaussianSpec) -> Vec<[f64; 2]> {
    let mut rng = rng::stream(seed, stream);
    let mut normal = NormalSampler::new();
    let sd = spec.cov_scale.sqrt();
    (0..spec.count)
        .map(|_| {
            let z0 = normal.sample(&mut rng);
            let z1 = normal.sample(&mut rng);
            [spec.mean[0] + sd * z0, spec.mean[1] + sd * z1]
        })
        .collect()
}

/// Common points first, then uncommon points. Each class draws from its own
/// stream of `seed`.
pub fn gen_two_gaussians(seed: u64, common: GaussianSpec, uncommon: GaussianSpec) -> Result<Dataset2D> {
    common.validate()?;
    uncommon.validate()?;
    if common.label == uncommon.label {
        return Err(Error::InvalidConfig("the two classes need distinct labels".into()));
    }
    let mut points = sample_class(seed, purpose::COMMON_CLASS, &common);
    let mut labels = vec![common.label; common.count];
    points.extend(sample_class(seed, purpose::UNCOMMON_CLASS, &uncommon));
    labels.extend(std::iter::repeat_n(uncommon.label, uncommon.count));
    Ok(Dataset2D {
        points,
        labels,
        common,
        uncommon,
        seed,
    })
}

pub fn gen_toy(seed: u64) -> Dataset2D {
    gen_two_gaussians(seed, GaussianSpec::common(), GaussianSpec::uncommon())
        .expect("default specs are valid")
}

pub fn gen_hard_variant(seed: u64) -> Dataset2D {
    gen_two_gaussians(seed, GaussianSpec::common(), GaussianSpec::hard_uncommon())
        .expect("default specs are valid")
}

/// Square evaluation grid of `n × n` nodes spanning `[min, max]²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl GridSpec {
    /// Model-evaluation grid.
    pub fn evaluation() -> Self {
        Self {
            min: -4.0,
            max: 5.0,
            n: 200,
        }
    }

    /// Grid used for the dominance precondition.
    pub fn dominance() -> Self {
        Self {
            min: -5.0,
            max: 5.0,
            n: 200,
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        if self.n == 1 {
            return self.min;
        }
        self.min + (self.max - self.min) * i as f64 / (self.n - 1) as f64
    }

    /// Nodes in row-major order (second coordinate outer).
    pub fn nodes(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.n).flat_map(move |j| (0..self.n).map(move |i| [self.coord(i), self.coord(j)]))
    }
}

/// Which generating density is larger at a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySide {
    Common,
    Uncommon,
    OnBoundary,
}

/// `ln φ_common(x) − ln φ_uncommon(x)`, optionally including the empirical
/// class priors `count / total`.
pub fn boundary_log_ratio(x: [f64; 2], common: &GaussianSpec, uncommon: &GaussianSpec, with_priors: bool) -> f64 {
    let mut r = common.log_density(x) - uncommon.log_density(x);
    if with_priors {
        r += (common.count as f64).ln() - (uncommon.count as f64).ln();
    }
    r
}

/// Side of the equal-density boundary `φ_common = φ_uncommon` (no priors).
pub fn analytic_boundary_side(x: [f64; 2], common: &GaussianSpec, uncommon: &GaussianSpec) -> BoundarySide {
    side_of(boundary_log_ratio(x, common, uncommon, false))
}

pub fn side_of(log_ratio: f64) -> BoundarySide {
    if log_ratio.abs() <= 1e-12 {
        BoundarySide::OnBoundary
    } else if log_ratio > 0.0 {
        BoundarySide::Common
    } else {
        BoundarySide::Uncommon
    }
}

/// Whether `π_c·φ_c(x) ≥ π_u·φ_u(x)` at every grid node.
pub fn dominance_holds(common: &GaussianSpec, uncommon: &GaussianSpec, grid: GridSpec) -> bool {
    grid.nodes()
        .all(|x| boundary_log_ratio(x, common, uncommon, true) >= 0.0)
}

// ---------------------------------------------------------------------------
// Dense regression task

/// Per-pixel regression grid. `inputs` holds `feature_dim` values per pixel in
/// row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
    /// Whether a pixel was generated in the rare band.
    pub rare: Vec<bool>,
}

/// Target range of ordinary pixels.
pub const DENSE_COMMON_BAND: (f64, f64) = (2.0, 20.0);
/// Target range of rare (far) pixels, half-open.
pub const DENSE_RARE_BAND: (f64, f64) = (40.0, 60.0);
/// Fraction of pixels without ground truth.
pub const DENSE_MISSING_FRACTION: f64 = 0.05;

impl DenseGrid {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn input(&self, pixel: usize) -> &[f64] {
        &self.inputs[pixel * self.feature_dim..(pixel + 1) * self.feature_dim]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Valid pixels whose target lies in the rare band.
    pub fn rare_valid_count(&self) -> usize {
        self.mask
            .iter()
            .zip(&self.targets)
            .filter(|(&m, &t)| m && t >= DENSE_RARE_BAND.0 && t < DENSE_RARE_BAND.1)
            .count()
    }
}

/// Maps a depth to the per-pixel appearance cue the model sees.
fn depth_cue(depth: f64) -> f64 {
    4.0 / depth.sqrt()
}

/// Generates one dense grid.
///
/// A smooth random field (a sum of Gaussian bumps) picks the rare region: the
/// `round(rare_fraction · pixels)` pixels with the highest field values get
/// far targets in [`DENSE_RARE_BAND`]; all other pixels get targets in
/// [`DENSE_COMMON_BAND`] that grow with image row. Features per pixel are a
/// noisy depth cue and the normalized row and column. A random
/// [`DENSE_MISSING_FRACTION`] of pixels is masked out.
pub fn gen_dense_task(seed: u64, height: usize, width: usize, rare_fraction: f64) -> Result<DenseGrid> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimensions(format!("{height}x{width} grid")));
    }
    if !(rare_fraction > 0.0 && rare_fraction < 1.0) {
        return Err(Error::InvalidConfig("rare_fraction must lie in (0, 1)".into()));
    }
    let mut rng = rng::stream(seed, purpose::DENSE_TASK);
    let mut normal = NormalSampler::new();
    let n = height * width;
    let scale = height.min(width) as f64;

    let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let r = rng.gen_range(0.0..height as f64);
            let c = rng.gen_range(0.0..width as f64);
            let s = rng.gen_range(scale / 12.0..scale / 6.0);
            let a = rng.gen_range(0.5..1.0);
            (r, c, s, a)
        })
        .collect();
    let field: Vec<f64> = (0..n)
        .map(|p| {
            let (r, c) = ((p / width) as f64, (p % width) as f64);
            bumps
                .iter()
                .map(|(br, bc, s, a)| a * (-((r - br).powi(2) + (c - bc).powi(2)) / (2.0 * s * s)).exp())
                .sum()
        })
        .collect();

    let rare_count = ((rare_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut rare = vec![false; n];
    let mut rank = vec![0usize; n];
    for (k, &p) in order.iter().take(rare_count).enumerate() {
        rare[p] = true;
        rank[p] = k;
    }

    let mut targets = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n * 3);
    for p in 0..n {
        let row = (p / width) as f64 / (height.max(2) - 1) as f64;
        let col = (p % width) as f64 / (width.max(2) - 1) as f64;
        let depth = if rare[p] {
            // Highest field value maps to the far end of the half-open band.
            let t = 1.0 - (rank[p] as f64 + 0.5) / rare_count as f64;
            DENSE_RARE_BAND.0 + (DENSE_RARE_BAND.1 - DENSE_RARE_BAND.0) * t
        } else {
            let (lo, hi) = DENSE_COMMON_BAND;
            let jitter = 0.05 * normal.sample(&mut rng);
            let u = (0.15 + 0.8 * (1.0 - row) + jitter).clamp(0.0, 0.999);
            lo + (hi - lo) * u
        };
        targets.push(depth);
        inputs.push(depth_cue(depth) + 0.02 * normal.sample(&mut rng));
        inputs.push(row);
        inputs.push(col);
    }

    let mut mask_rng = rng::stream(seed, purpose::DENSE_MASK);
    let mask = (0..n)
        .map(|_| mask_rng.gen::<f64>() >= DENSE_MISSING_FRACTION)
        .collect();

    Ok(DenseGrid {
        height,
        width,
        feature_dim: 3,
        inputs,
        targets,
        mask,
        rare,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults() {
        let d = gen_toy(3);
        assert_eq!(d.len(), 10_400);
        assert_eq!(d.class_counts(), vec![10_000, 400]);
        assert_eq!(gen_toy(3), d);
        let n: f64 = 400.0;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (p, &l) in d.points.iter().zip(&d.labels) {
            if l == UNCOMMON_CLASS {
                sx += p[0];
                sy += p[1];
            }
        }
        let bound = 3.0 * 0.5f64.sqrt() / n.sqrt();
        assert!((sx / n - 2.2).abs() < bound);
        assert!((sy / n - 2.2).abs() < bound);
    }

    #[test]
    fn spec_validation() {
        let bad = GaussianSpec { cov_scale: 0.0, ..GaussianSpec::common() };
        assert!(gen_two_gaussians(0, bad, GaussianSpec::uncommon()).is_err());
        let zero = GaussianSpec { count: 0, ..GaussianSpec::uncommon() };
        assert!(gen_two_gaussians(0, GaussianSpec::common(), zero).is_err());
    }

    #[test]
    fn boundary_sides() {
        let (c, u) = (GaussianSpec::common(), GaussianSpec::uncommon());
        assert_eq!(analytic_boundary_side([0.0, 0.0], &c, &u), BoundarySide::Common);
        assert_eq!(analytic_boundary_side([2.2, 2.2], &c, &u), BoundarySide::Uncommon);
        assert_eq!(analytic_boundary_side([0.3, -7.0], &c, &c), BoundarySide::OnBoundary);
        // Densities at the origin.
        assert!((c.density([0.0, 0.0]) - 1.0 / std::f64::consts::TAU).abs() < 1e-15);
        let expected_u = (-9.68f64).exp() / std::f64::consts::PI;
        assert!((u.density([0.0, 0.0]) - expected_u).abs() < 1e-18);
    }

    #[test]
    fn dominance_oracle() {
        let c = GaussianSpec::common();
        assert!(dominance_holds(&c, &GaussianSpec::hard_uncommon(), GridSpec::dominance()));
        assert!(!dominance_holds(&c, &GaussianSpec::uncommon(), GridSpec::dominance()));
    }

    #[test]
    fn manifest_regenerates_and_csv_round_trips() {
        let d = gen_hard_variant(5);
        let manifest = Record::parse(&d.manifest().to_text()).unwrap();
        assert_eq!(Dataset2D::from_manifest(&manifest).unwrap(), d);
        let dir = std::env::temp_dir().join(format!("gt-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.csv");
        d.write_csv(&path).unwrap();
        assert_eq!(Dataset2D::read_csv(&path, &manifest).unwrap(), d);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dense_grid_basics() {
        let g = gen_dense_task(1, 64, 64, 0.05).unwrap();
        assert_eq!(g.targets.len(), 4096);
        assert_eq!(g.inputs.len(), 4096 * 3);
        assert!(g.targets.iter().all(|t| t.is_finite() && *t > 0.0));
        let frac = g.rare_valid_count() as f64 / g.valid_count() as f64;
        assert!((0.03..=0.07).contains(&frac), "{frac}");
        assert_eq!(gen_dense_task(1, 64, 64, 0.05).unwrap(), g);
        assert!(gen_dense_task(1, 0, 64, 0.05).is_err());
        assert!(gen_dense_task(1, 8, 8, 1.0).is_err());
    }
}
