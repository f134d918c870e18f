//! Random rectangular patch proposals over a dense output grid.
//!
//! A draw consists of `count` rectangles with uniformly sampled sizes and
//! positions (they may overlap) plus the complement: every pixel not covered
//! by any rectangle. Together they cover the grid exactly.

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_SIZE_MIN: usize = 20;
pub const DEFAULT_SIZE_MAX: usize = 100;
pub const DEFAULT_PATCH_COUNT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row0 + self.h && col >= self.col0 && col < self.col0 + self.w
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }

    /// Row-major pixel indices on a grid of the given width.
    pub fn pixels(&self, width: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.area());
        for r in self.row0..self.row0 + self.h {
            out.extend((self.col0..self.col0 + self.w).map(|c| r * width + c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSet {
    pub height: usize,
    pub width: usize,
    pub rects: Vec<Rect>,
    /// Pixels outside every rectangle, ascending.
    pub complement: Vec<usize>,
}

impl PatchSet {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Pixel lists of the regions that take part in a training step: every
    /// rectangle, then the complement when it is non-empty.
    pub fn regions(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.rects.iter().map(|r| r.pixels(self.width)).collect();
        if !self.complement.is_empty() {
            out.push(self.complement.clone());
        }
        out
    }
}

/// Draws one patch set. Side lengths are uniform over
/// `[min(size_min, dim), min(size_max, dim)]`, so grids smaller than
/// `size_min` yield full-grid rectangles.
pub fn sample_patches<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    rng: &mut R,
    size_min: usize,
    size_max: usize,
    count: usize,
) -> Result<PatchSet> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimensions(format!("{height}x{width} grid")));
    }
    if size_min == 0 || size_min > size_max {
        return Err(Error::InvalidConfig(format!(
            "patch size range [{size_min}, {size_max}] is invalid"
        )));
    }
    let side = |dim: usize, rng: &mut R| {
        let lo = size_min.min(dim);
        let hi = size_max.min(dim);
        let len = rng.gen_range(lo..=hi);
        let start = rng.gen_range(0..=dim - len);
        (start, len)
    };
    let mut rects = Vec::with_capacity(count);
    for _ in 0..count {
        let (row0, h) = side(height, rng);
        let (col0, w) = side(width, rng);
        rects.push(Rect { row0, col0, h, w });
    }
    let mut covered = vec![false; height * width];
    for r in &rects {
        for p in r.pixels(width) {
            covered[p] = true;
        }
    }
    let complement = covered
        .iter()
        .enumerate()
        .filter(|(_, &c)| !c)
        .map(|(p, _)| p)
        .collect();
    Ok(PatchSet {
        height,
        width,
        rects,
        complement,
    })
}

/// Mean of `losses` over the region's valid pixels; 0 when none are valid.
pub fn patch_mean_loss(losses: &[f64], mask: &[bool], region: &[usize]) -> f64 {
    let (sum, n) = region
        .iter()
        .filter(|&&p| mask[p])
        .fold((0.0, 0usize), |(s, n), &p| (s + losses[p], n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn full_size_grid_coverage() {
        let mut r = rng::stream(0, 5);
        let set = sample_patches(192, 480, &mut r, 20, 100, 6).unwrap();
        assert_eq!(set.pixel_count(), 92_160);
        let mut covered = vec![0u8; 92_160];
        for region in set.regions() {
            for p in region {
                covered[p] = 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        assert!(set.rects.iter().all(|r| (20..=100).contains(&r.h) && (20..=100).contains(&r.w)));
    }

    #[test]
    fn tiny_grid_clamps() {
        let mut r = rng::stream(1, 5);
        let set = sample_patches(10, 10, &mut r, 20, 100, 6).unwrap();
        assert!(set.rects.iter().all(|r| *r == Rect { row0: 0, col0: 0, h: 10, w: 10 }));
        assert!(set.complement.is_empty());
        assert_eq!(set.regions().len(), 6);
    }

    #[test]
    fn errors() {
        let mut r = rng::stream(1, 5);
        assert!(sample_patches(0, 10, &mut r, 20, 100, 6).is_err());
        assert!(sample_patches(10, 10, &mut r, 30, 20, 6).is_err());
    }

    #[test]
    fn patch_mean_examples() {
        let losses = vec![2.5; 16];
        let mask = vec![true; 16];
        let region: Vec<usize> = (0..16).collect();
        assert_eq!(patch_mean_loss(&losses, &mask, &region), 2.5);
        assert_eq!(patch_mean_loss(&losses, &mask, &[]), 0.0);
        let checker: Vec<f64> = (0..16).map(|p| ((p / 4 + p % 4) % 2) as f64).collect();
        assert_eq!(patch_mean_loss(&checker, &mask, &region), 0.5);
        let none = vec![false; 16];
        assert_eq!(patch_mean_loss(&losses, &none, &region), 0.0);
    }
}
