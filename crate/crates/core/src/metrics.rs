//! Binary segmentation metrics: Dice overlap and the 95th-percentile
//! Hausdorff distance over pooled directed nearest-neighbor distances.

use thiserror::Error;

use crate::data::Volume;
use crate::edt::squared_edt_3d;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: [usize; 3],
        right: [usize; 3],
    },
    #[error("{which} mask is empty: nearest-neighbor distances are undefined")]
    EmptyMask { which: &'static str },
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Foreground voxel set over a 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub shape: (usize, usize, usize),
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: (usize, usize, usize), bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), shape.0 * shape.1 * shape.2);
        BinaryMask { shape, bits }
    }

    /// Binarizes a probability volume at `threshold` (inclusive).
    pub fn from_volume(vol: &Volume, threshold: f64) -> Self {
        BinaryMask {
            shape: vol.shape,
            bits: vol.voxels.iter().map(|&v| v as f64 >= threshold).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_shapes(&self, other: &BinaryMask) -> Result<()> {
        if self.shape != other.shape {
            return Err(MetricError::ShapeMismatch {
                left: [self.shape.0, self.shape.1, self.shape.2],
                right: [other.shape.0, other.shape.1, other.shape.2],
            });
        }
        Ok(())
    }
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks score 1.0.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_shapes(b)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// 95th percentile of the pooled directed nearest-neighbor Euclidean
/// distances A→B and B→A, with linear interpolation between order
/// statistics. Errors when either mask is empty.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    percentile_hausdorff(a, b, 0.95)
}

/// Same pooled construction at an arbitrary percentile in [0, 1].
pub fn percentile_hausdorff(a: &BinaryMask, b: &BinaryMask, p: f64) -> Result<f64> {
    a.check_shapes(b)?;
    if a.is_empty_mask() {
        return Err(MetricError::EmptyMask { which: "first" });
    }
    if b.is_empty_mask() {
        return Err(MetricError::EmptyMask { which: "second" });
    }
    // The exact distance transform gives every voxel its nearest-member
    // distance in one pass per mask.
    let edt_a = squared_edt_3d(a.shape, &a.bits);
    let edt_b = squared_edt_3d(b.shape, &b.bits);
    let mut pooled = Vec::with_capacity(a.count() + b.count());
    for (i, &m) in a.bits.iter().enumerate() {
        if m {
            pooled.push(edt_b[i].sqrt());
        }
    }
    for (i, &m) in b.bits.iter().enumerate() {
        if m {
            pooled.push(edt_a[i].sqrt());
        }
    }
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(percentile_linear(&pooled, p))
}

/// Linear-interpolation percentile of an ascending-sorted sample.
fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from_indices(shape: (usize, usize, usize), idx: &[usize]) -> BinaryMask {
        let mut bits = vec![false; shape.0 * shape.1 * shape.2];
        for &i in idx {
            bits[i] = true;
        }
        BinaryMask::new(shape, bits)
    }

    #[test]
    fn dice_identical_and_disjoint() {
        let a = mask_from_indices((2, 2, 2), &[0, 3, 5]);
        let b = mask_from_indices((2, 2, 2), &[1, 2]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_both_empty_is_one_by_convention() {
        let a = mask_from_indices((2, 2, 2), &[]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dice_matches_set_oracle() {
        let mut seed = 9u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(11);
            (seed >> 33) % 5 == 0
        };
        let shape = (8, 8, 8);
        let a = BinaryMask::new(shape, (0..512).map(|_| next()).collect());
        let b = BinaryMask::new(shape, (0..512).map(|_| next()).collect());
        let inter = a
            .bits()
            .iter()
            .zip(b.bits())
            .filter(|(&x, &y)| x && y)
            .count();
        let want = 2.0 * inter as f64 / (a.count() + b.count()) as f64;
        assert_eq!(dice(&a, &b).unwrap(), want);
    }

    #[test]
    fn hd95_identical_masks_is_zero() {
        let a = mask_from_indices((3, 3, 3), &[0, 13, 26]);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hd95_singletons_at_distance_three() {
        let shape = (1, 1, 5);
        let a = mask_from_indices(shape, &[0]);
        let b = mask_from_indices(shape, &[3]);
        assert_eq!(hd95(&a, &b).unwrap(), 3.0);
    }

    #[test]
    fn hd95_rejects_empty_masks() {
        let a = mask_from_indices((2, 2, 2), &[1]);
        let e = mask_from_indices((2, 2, 2), &[]);
        assert!(matches!(
            hd95(&a, &e),
            Err(MetricError::EmptyMask { which: "second" })
        ));
        assert!(matches!(
            hd95(&e, &a),
            Err(MetricError::EmptyMask { which: "first" })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = mask_from_indices((2, 2, 2), &[0]);
        let b = mask_from_indices((2, 2, 3), &[0]);
        assert!(matches!(
            dice(&a, &b),
            Err(MetricError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile_linear(&xs, 0.0), 0.0);
        assert_eq!(percentile_linear(&xs, 1.0), 3.0);
        assert_eq!(percentile_linear(&xs, 0.5), 1.5);
    }
}
