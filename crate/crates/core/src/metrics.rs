//! Geometry and image quality metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ImageBuffer, Vec3};
use crate::spatial::PointIndex;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn nearest_distances(from: &[Vec3], to: &PointIndex) -> Vec<f64> {
    from.par_iter().map(|p| to.nearest(p).map_or(f64::INFINITY, |(_, d)| d)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn nonempty(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("point sets must be nonempty".into()));
    }
    Ok(())
}

/// Symmetric mean nearest-neighbor distance: ½(mean_a min_b + mean_b min_a).
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    nonempty(a, b)?;
    let ia = PointIndex::new(a.to_vec(), 0.0);
    let ib = PointIndex::new(b.to_vec(), 0.0);
    Ok(0.5 * (mean(&nearest_distances(a, &ib)) + mean(&nearest_distances(b, &ia))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and their harmonic mean at distance `tau`.
pub fn f1_score(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<F1Score> {
    nonempty(pred, gt)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("F1 threshold {tau} must be positive")));
    }
    let ip = PointIndex::new(pred.to_vec(), 0.0);
    let ig = PointIndex::new(gt.to_vec(), 0.0);
    let frac = |d: Vec<f64>| d.iter().filter(|&&x| x <= tau).count() as f64 / d.len() as f64;
    let precision = frac(nearest_distances(pred, &ig));
    let recall = frac(nearest_distances(gt, &ip));
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(F1Score { precision, recall, f1 })
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::InvalidInput("PSNR of differently shaped images".into()));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Fraction of `surface` samples within `radius` of some point of `centers`.
pub fn coverage(surface: &[Vec3], centers: &[Vec3], radius: f64) -> f64 {
    if surface.is_empty() {
        return 0.0;
    }
    let index = PointIndex::new(centers.to_vec(), radius);
    let hits: usize = surface.par_iter().map(|p| usize::from(index.any_within(p, radius))).sum();
    hits as f64 / surface.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
        let one = |x: &[Vec3], y: &[Vec3]| {
            let mut s = 0.0;
            for p in x {
                let mut best = f64::INFINITY;
                for q in y {
                    best = best.min((p - q).norm());
                }
                s += best;
            }
            s / x.len() as f64
        };
        0.5 * (one(a, b) + one(b, a))
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Vec3::zeros()];
        let b = vec![Vec3::x()];
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert!(chamfer_distance(&a, &[]).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let na = rng.random_range(1..200);
            let nb = rng.random_range(1..200);
            let a = cloud(&mut rng, na);
            let b = cloud(&mut rng, nb);
            assert_eq!(chamfer_distance(&a, &b).unwrap(), brute_chamfer(&a, &b));
        }
    }

    #[test]
    fn f1_examples() {
        let gt = vec![Vec3::zeros(), Vec3::new(10.0, 0.0, 0.0)];
        assert_eq!(f1_score(&gt, &gt, 0.1).unwrap().f1, 1.0);
        let far = vec![Vec3::new(5.0, 5.0, 5.0)];
        assert_eq!(f1_score(&far, &gt, 0.1).unwrap().f1, 0.0);
        // every prediction is right, half the ground truth is found
        let s = f1_score(&[Vec3::zeros()], &gt, 0.1).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(f1_score(&gt, &gt, 0.0).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = ImageBuffer::filled(4, 4, 3, 0.0);
        let b = ImageBuffer::filled(4, 4, 3, 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        let c = ImageBuffer::filled(4, 4, 3, 0.1);
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &ImageBuffer::filled(4, 3, 3, 0.0)).is_err());
    }

    #[test]
    fn coverage_counts_within_radius() {
        let s = vec![Vec3::zeros(), Vec3::x(), Vec3::new(3.0, 0.0, 0.0)];
        let c = vec![Vec3::new(0.0, 0.05, 0.0), Vec3::new(1.0, 0.2, 0.0)];
        assert!((coverage(&s, &c, 0.1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((coverage(&s, &c, 0.25) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(coverage(&s, &[], 1.0), 0.0);
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric_and_nonnegative(seed in 0u64..1000, na in 1usize..50, nb in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, na);
            let b = cloud(&mut rng, nb);
            let ab = chamfer_distance(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - chamfer_distance(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn f1_is_monotone_in_tau(seed in 0u64..1000, t1 in 0.01f64..1.0, dt in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, 30);
            let b = cloud(&mut rng, 30);
            prop_assert!(f1_score(&a, &b, t1).unwrap().f1 <= f1_score(&a, &b, t1 + dt).unwrap().f1);
        }
    }
}
