//! Uniform hash grid for exact nearest-neighbor queries over 3-D points.

use std::collections::HashMap;

use crate::scene::Vec3;

#[derive(Clone, Debug)]
pub struct PointIndex {
    points: Vec<Vec3>,
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl PointIndex {
    /// Builds an index; `cell` ≤ 0 picks a size giving about two points per bucket.
    pub fn new(points: Vec<Vec3>, cell: f64) -> PointIndex {
        let cell = if cell > 0.0 { cell } else { auto_cell(&points) };
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = key(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            buckets.entry(k).or_default().push(i);
        }
        PointIndex { points, cell, buckets, lo, hi }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn max_ring(&self, c: &[i64; 3]) -> i64 {
        if self.points.is_empty() {
            return -1;
        }
        (0..3).map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs())).max().unwrap_or(0)
    }

    /// Rings closer than this hold no bucket at all.
    fn min_ring(&self, c: &[i64; 3]) -> i64 {
        if self.points.is_empty() {
            return 0;
        }
        (0..3).map(|a| (self.lo[a] - c[a]).max(c[a] - self.hi[a]).max(0)).max().unwrap_or(0)
    }

    /// Visits buckets at Chebyshev distance exactly `r` from `c`, clipped to the occupied box.
    fn visit_ring(&self, c: &[i64; 3], r: i64, mut f: impl FnMut(usize)) {
        let range = |a: usize| ((c[a] - r).max(self.lo[a]), (c[a] + r).min(self.hi[a]));
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            for y in y0..=y1 {
                let edge = (x - c[0]).abs() == r || (y - c[1]).abs() == r;
                let mut visit = |z: i64| {
                    if let Some(ids) = self.buckets.get(&[x, y, z]) {
                        ids.iter().for_each(|&i| f(i));
                    }
                };
                if edge {
                    (z0..=z1).for_each(&mut visit);
                } else {
                    if c[2] - r >= z0 {
                        visit(c[2] - r);
                    }
                    if r > 0 && c[2] + r <= z1 {
                        visit(c[2] + r);
                    }
                }
            }
        }
    }

    /// Index and distance of the nearest point; ties go to the lowest index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let c = key(q, self.cell);
        let max_r = self.max_ring(&c);
        for r in self.min_ring(&c)..=max_r {
            self.visit_ring(&c, r, |i| {
                let d = (self.points[i] - q).norm();
                if best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                    best = Some((i, d));
                }
            });
            // everything in ring r+1 is at least r·cell away
            if let Some((_, bd)) = best {
                if bd <= r as f64 * self.cell {
                    break;
                }
            }
        }
        best
    }

    /// Up to `k` nearest points as (index, distance), sorted by distance then index.
    pub fn k_nearest(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut found: Vec<(usize, f64)> = Vec::new();
        if k == 0 {
            return found;
        }
        let c = key(q, self.cell);
        let max_r = self.max_ring(&c);
        for r in self.min_ring(&c)..=max_r {
            self.visit_ring(&c, r, |i| found.push((i, (self.points[i] - q).norm())));
            if found.len() >= k {
                found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                if found[k - 1].1 <= r as f64 * self.cell {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        found.truncate(k);
        found
    }

    /// Whether some point lies within `radius` of `q`.
    pub fn any_within(&self, q: &Vec3, radius: f64) -> bool {
        self.nearest(q).is_some_and(|(_, d)| d <= radius)
    }
}

fn key(p: &Vec3, cell: f64) -> [i64; 3] {
    [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
}

fn auto_cell(points: &[Vec3]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    if !(ext.max() > 0.0 && ext.max().is_finite()) {
        return 1.0;
    }
    // points usually sample a surface, so size buckets by area rather than volume
    let area = ext.x * ext.y + ext.y * ext.z + ext.x * ext.z;
    let s = (2.0 * area / points.len() as f64).sqrt();
    // at most 64 buckets along the longest axis keeps ring scans short
    s.max(ext.max() / 64.0)
}
