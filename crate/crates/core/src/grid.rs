//! Multi-level octree of occupied voxel cells.
//!
//! Cells live in one arena; each level keeps a coordinate → cell index map.
//! Vertices are shared between cells of the same level and keyed by
//! `(level, integer corner coordinate)`, so the vertex table of the neural
//! field grows in lockstep with the grid.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Vec3;

/// Corner order shared with marching cubes: bottom face counter-clockwise, then top face.
pub const CORNER_OFFSETS: [[i64; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Bounds> {
        if (0..3).any(|k| !(min[k] < max[k])) {
            return Err(Error::InvalidParameter(format!("empty bounds {min:?}..{max:?}")));
        }
        Ok(Bounds { min, max })
    }

    pub fn cube(half: f64) -> Bounds {
        Bounds { min: [-half; 3], max: [half; 3] }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::new(self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2])
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }
}

/// One occupied voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelCell {
    pub level: usize,
    pub coord: [i64; 3],
    pub center: Vec3,
    /// Rows of the Gaussian store owned by this cell.
    pub gaussian_ids: Vec<usize>,
    /// Rows of the vertex feature table, in [`CORNER_OFFSETS`] order.
    pub vertex_ids: [usize; 8],
}

#[derive(Clone, Debug)]
pub struct LodGrid {
    pub base_size: f64,
    pub max_level: usize,
    pub origin: Vec3,
    pub bounds: Bounds,
    pub gaussians_per_cell: usize,
    cells: Vec<VoxelCell>,
    lookup: Vec<HashMap<[i64; 3], usize>>,
    vertex_keys: Vec<(usize, [i64; 3])>,
    vertex_lookup: HashMap<(usize, [i64; 3]), usize>,
}

impl LodGrid {
    /// Empty grid anchored at the minimum corner of `bounds`.
    pub fn new(base_size: f64, max_level: usize, bounds: Bounds, gaussians_per_cell: usize) -> Result<LodGrid> {
        if !(base_size > 0.0 && base_size.is_finite()) {
            return Err(Error::InvalidParameter(format!("base size {base_size} must be positive")));
        }
        if gaussians_per_cell == 0 {
            return Err(Error::InvalidParameter("cells need at least one Gaussian".into()));
        }
        Bounds::new(bounds.min, bounds.max)?;
        Ok(LodGrid {
            base_size,
            max_level,
            origin: Vec3::from(bounds.min),
            bounds,
            gaussians_per_cell,
            cells: Vec::new(),
            lookup: vec![HashMap::new(); max_level + 1],
            vertex_keys: Vec::new(),
            vertex_lookup: HashMap::new(),
        })
    }

    /// Occupies every cell holding at least `min_points` input points, at every level.
    pub fn init_from_points(
        points: &[Vec3],
        bounds: Bounds,
        base_size: f64,
        max_level: usize,
        min_points: usize,
        gaussians_per_cell: usize,
    ) -> Result<LodGrid> {
        if points.is_empty() {
            return Err(Error::InvalidInput("cannot initialize a grid from zero points".into()));
        }
        if min_points == 0 {
            return Err(Error::InvalidParameter("min_points must be at least 1".into()));
        }
        let mut grid = LodGrid::new(base_size, max_level, bounds, gaussians_per_cell)?;
        for level in 0..=max_level {
            let mut counts: BTreeMap<[i64; 3], usize> = BTreeMap::new();
            for p in points {
                if !grid.bounds.contains(p) {
                    continue;
                }
                *counts.entry(grid.cell_of(p, level)?).or_default() += 1;
            }
            for (coord, n) in counts {
                if n >= min_points {
                    grid.insert_coord(level, coord);
                }
            }
        }
        Ok(grid)
    }

    pub fn voxel_size(&self, level: usize) -> Result<f64> {
        if level > self.max_level {
            return Err(Error::InvalidLevel { level, max: self.max_level });
        }
        Ok(self.base_size * 0.5f64.powi(level as i32))
    }

    pub(crate) fn voxel(&self, level: usize) -> f64 {
        self.base_size * 0.5f64.powi(level as i32)
    }

    pub fn cell_of(&self, p: &Vec3, level: usize) -> Result<[i64; 3]> {
        let size = self.voxel_size(level)?;
        if !self.bounds.contains(p) {
            return Err(Error::OutOfBounds([p.x, p.y, p.z]));
        }
        Ok(self.coord_unchecked(p, size))
    }

    fn coord_unchecked(&self, p: &Vec3, size: f64) -> [i64; 3] {
        let r = (p - self.origin) / size;
        [r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64]
    }

    pub fn cell_center(&self, level: usize, coord: [i64; 3]) -> Vec3 {
        let s = self.voxel(level);
        self.origin + Vec3::new(coord[0] as f64 + 0.5, coord[1] as f64 + 0.5, coord[2] as f64 + 0.5) * s
    }

    pub fn vertex_position(&self, vertex: usize) -> Vec3 {
        let (level, c) = self.vertex_keys[vertex];
        self.origin + Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * self.voxel(level)
    }

    pub fn vertex_key(&self, vertex: usize) -> (usize, [i64; 3]) {
        self.vertex_keys[vertex]
    }

    pub fn corner_positions(&self, cell: usize) -> [Vec3; 8] {
        self.cells[cell].vertex_ids.map(|v| self.vertex_position(v))
    }

    /// Index of the occupied cell at `coord`, if any.
    pub fn find(&self, level: usize, coord: [i64; 3]) -> Option<usize> {
        self.lookup.get(level)?.get(&coord).copied()
    }

    /// Occupied cell containing `p` at `level`.
    pub fn locate(&self, p: &Vec3, level: usize) -> Result<usize> {
        let coord = self.cell_of(p, level)?;
        self.find(level, coord).ok_or(Error::MissingCell { level, coord })
    }

    /// Returns the cell containing `p`, creating it (without Gaussians) when absent.
    pub fn find_or_insert(&mut self, p: &Vec3, level: usize) -> Result<(usize, bool)> {
        let coord = self.cell_of(p, level)?;
        if let Some(id) = self.find(level, coord) {
            return Ok((id, false));
        }
        Ok((self.insert_coord(level, coord), true))
    }

    fn insert_coord(&mut self, level: usize, coord: [i64; 3]) -> usize {
        let vertex_ids = CORNER_OFFSETS.map(|o| {
            let key = (level, [coord[0] + o[0], coord[1] + o[1], coord[2] + o[2]]);
            match self.vertex_lookup.get(&key) {
                Some(&v) => v,
                None => {
                    self.vertex_keys.push(key);
                    self.vertex_lookup.insert(key, self.vertex_keys.len() - 1);
                    self.vertex_keys.len() - 1
                }
            }
        });
        let id = self.cells.len();
        self.cells.push(VoxelCell {
            level,
            coord,
            center: self.cell_center(level, coord),
            gaussian_ids: Vec::with_capacity(self.gaussians_per_cell),
            vertex_ids,
        });
        self.lookup[level].insert(coord, id);
        id
    }

    /// Rebuilds a grid from stored cells and vertex keys, keeping both orders.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        base_size: f64,
        max_level: usize,
        bounds: Bounds,
        gaussians_per_cell: usize,
        cells: &[(usize, [i64; 3])],
        cell_vertices: &[[usize; 8]],
        vertex_keys: Vec<(usize, [i64; 3])>,
    ) -> Result<LodGrid> {
        let mut grid = LodGrid::new(base_size, max_level, bounds, gaussians_per_cell)?;
        if cells.len() != cell_vertices.len() {
            return Err(Error::InvalidInput("cell and vertex-id counts differ".into()));
        }
        for (i, &key) in vertex_keys.iter().enumerate() {
            if key.0 > max_level || grid.vertex_lookup.insert(key, i).is_some() {
                return Err(Error::InvalidInput(format!("bad or duplicate vertex key {key:?}")));
            }
        }
        grid.vertex_keys = vertex_keys;
        for (&(level, coord), ids) in cells.iter().zip(cell_vertices) {
            if level > max_level || grid.lookup[level].contains_key(&coord) {
                return Err(Error::InvalidInput(format!("bad or duplicate cell {level}:{coord:?}")));
            }
            for (k, o) in CORNER_OFFSETS.iter().enumerate() {
                let key = (level, [coord[0] + o[0], coord[1] + o[1], coord[2] + o[2]]);
                if grid.vertex_lookup.get(&key) != Some(&ids[k]) {
                    return Err(Error::InvalidInput(format!("cell {level}:{coord:?} has inconsistent vertex ids")));
                }
            }
            grid.lookup[level].insert(coord, grid.cells.len());
            grid.cells.push(VoxelCell {
                level,
                coord,
                center: grid.cell_center(level, coord),
                gaussian_ids: Vec::new(),
                vertex_ids: *ids,
            });
        }
        Ok(grid)
    }

    pub fn vertex_keys(&self) -> &[(usize, [i64; 3])] {
        &self.vertex_keys
    }

    pub fn cells(&self) -> &[VoxelCell] {
        &self.cells
    }

    pub fn cell(&self, id: usize) -> &VoxelCell {
        &self.cells[id]
    }

    pub(crate) fn cell_mut(&mut self, id: usize) -> &mut VoxelCell {
        &mut self.cells[id]
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_keys.len()
    }

    /// Occupied cell count per level.
    pub fn occupied_counts(&self) -> Vec<usize> {
        self.lookup.iter().map(|m| m.len()).collect()
    }

    /// Deletes the flagged cells; returns the old → new cell index map.
    pub(crate) fn remove_cells(&mut self, remove: &[bool]) -> Vec<Option<usize>> {
        let mut map = vec![None; self.cells.len()];
        let old = std::mem::take(&mut self.cells);
        for m in &mut self.lookup {
            m.clear();
        }
        for (i, cell) in old.into_iter().enumerate() {
            if remove[i] {
                continue;
            }
            map[i] = Some(self.cells.len());
            self.lookup[cell.level].insert(cell.coord, self.cells.len());
            self.cells.push(cell);
        }
        map
    }

    /// Drops vertices no longer referenced by any cell; returns the old → new vertex map.
    pub(crate) fn compact_vertices(&mut self) -> Vec<Option<usize>> {
        let mut used = vec![false; self.vertex_keys.len()];
        for c in &self.cells {
            for &v in &c.vertex_ids {
                used[v] = true;
            }
        }
        let mut map = vec![None; used.len()];
        let old = std::mem::take(&mut self.vertex_keys);
        self.vertex_lookup.clear();
        for (i, key) in old.into_iter().enumerate() {
            if used[i] {
                map[i] = Some(self.vertex_keys.len());
                self.vertex_lookup.insert(key, self.vertex_keys.len());
                self.vertex_keys.push(key);
            }
        }
        for c in &mut self.cells {
            c.vertex_ids = c.vertex_ids.map(|v| map[v].expect("referenced vertex survives"));
        }
        map
    }

    /// Bounding box of all occupied cells at `level`, if any.
    pub fn occupied_bounds(&self, level: usize) -> Option<Bounds> {
        let s = self.voxel(level);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in self.cells.iter().filter(|c| c.level == level) {
            for k in 0..3 {
                lo[k] = lo[k].min(c.center[k] - 0.5 * s);
                hi[k] = hi[k].max(c.center[k] + 0.5 * s);
            }
        }
        (lo[0] < hi[0]).then_some(Bounds { min: lo, max: hi })
    }
}

/// Deterministic initial offsets `C`: cube-corner directions scaled by 0.5,
/// then ±x, ±y, ±z, repeating at half magnitude for larger `k`.
pub fn offset_pattern(k: usize) -> Vec<Vec3> {
    let mut base: Vec<Vec3> = CORNER_OFFSETS
        .iter()
        .map(|o| Vec3::new(o[0] as f64 - 0.5, o[1] as f64 - 0.5, o[2] as f64 - 0.5))
        .collect();
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut v = Vec3::zeros();
            v[axis] = sign;
            base.push(v);
        }
    }
    (0..k).map(|i| base[i % base.len()] * 0.5f64.powi((i / base.len()) as i32)).collect()
}

/// Initial offset scale `L` for a cell of the given voxel size.
pub fn initial_offset_scale(voxel: f64) -> Vec3 {
    Vec3::repeat(0.25 * voxel)
}

/// Gaussian position `x_v + C ⊙ L`, clamped to within one voxel of the center per axis.
pub fn decode_position(center: &Vec3, voxel: f64, offset: &Vec3, scale: &Vec3) -> Vec3 {
    let raw = center + offset.component_mul(scale);
    Vec3::from_fn(|k, _| raw[k].clamp(center[k] - voxel, center[k] + voxel))
}

/// Positions of every Gaussian described by `offsets`/`scales` in one cell.
pub fn gaussian_positions(center: &Vec3, voxel: f64, offsets: &[Vec3], scales: &[Vec3]) -> Vec<Vec3> {
    offsets.iter().zip(scales).map(|(c, l)| decode_position(center, voxel, c, l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(max_level: usize) -> LodGrid {
        LodGrid::new(1.0, max_level, Bounds::new([0.0; 3], [4.0; 3]).unwrap(), 10).unwrap()
    }

    #[test]
    fn voxel_sizes_halve_per_level() {
        let g = unit_grid(3);
        assert_eq!(g.voxel_size(0).unwrap(), 1.0);
        assert_eq!(g.voxel_size(2).unwrap(), 0.25);
        let g = LodGrid::new(0.5, 3, Bounds::cube(2.0), 10).unwrap();
        assert_eq!(g.voxel_size(3).unwrap(), 0.0625);
        assert!(matches!(g.voxel_size(4), Err(Error::InvalidLevel { level: 4, max: 3 })));
    }

    #[test]
    fn cell_of_examples() {
        let g = unit_grid(1);
        assert_eq!(g.cell_of(&Vec3::new(0.4, 0.4, 0.4), 0).unwrap(), [0, 0, 0]);
        assert_eq!(g.cell_of(&Vec3::new(1.5, 0.2, 2.7), 0).unwrap(), [1, 0, 2]);
        assert_eq!(g.cell_of(&Vec3::new(0.6, 0.6, 0.6), 1).unwrap(), [1, 1, 1]);
        assert_eq!(g.cell_center(1, [1, 1, 1]), Vec3::new(0.75, 0.75, 0.75));
        assert!(matches!(g.cell_of(&Vec3::new(-0.1, 0.0, 0.0), 0), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn init_single_and_disjoint_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
            .collect();
        let b = Bounds::new([0.0; 3], [4.0; 3]).unwrap();
        let g = LodGrid::init_from_points(&pts, b, 1.0, 0, 1, 10).unwrap();
        assert_eq!(g.num_cells(), 1);
        assert_eq!(g.num_vertices(), 8);
        let two = [Vec3::new(0.5, 0.5, 0.5), Vec3::new(2.5, 2.5, 2.5)];
        let g = LodGrid::init_from_points(&two, b, 1.0, 0, 1, 10).unwrap();
        assert_eq!(g.num_cells(), 2);
        assert!(LodGrid::init_from_points(&[], b, 1.0, 0, 1, 10).is_err());
    }

    #[test]
    fn init_counts_match_bucketing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
            .collect();
        let b = Bounds::new([0.0; 3], [1.0; 3]).unwrap();
        for min_points in [1, 3, 6] {
            let g = LodGrid::init_from_points(&pts, b, 1.0, 2, min_points, 10).unwrap();
            for level in 0..=2 {
                let n = 1usize << level;
                let mut buckets = vec![0usize; n * n * n];
                for p in &pts {
                    let idx = |v: f64| ((v * n as f64) as usize).min(n - 1);
                    buckets[(idx(p.x) * n + idx(p.y)) * n + idx(p.z)] += 1;
                }
                let expect = buckets.iter().filter(|&&c| c >= min_points).count();
                assert_eq!(g.occupied_counts()[level], expect, "level {level} min {min_points}");
            }
        }
    }

    #[test]
    fn find_or_insert_is_idempotent() {
        let mut g = unit_grid(1);
        let p = Vec3::new(0.3, 0.3, 0.3);
        let (a, created) = g.find_or_insert(&p, 0).unwrap();
        assert!(created);
        let (b, created) = g.find_or_insert(&p, 0).unwrap();
        assert!(!created);
        assert_eq!(a, b);
        let (c, created) = g.find_or_insert(&Vec3::new(0.9, 0.1, 0.5), 0).unwrap();
        assert!(!created);
        assert_eq!(a, c);
        assert!(g.find_or_insert(&Vec3::new(9.0, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn neighbouring_cells_share_vertices() {
        let mut g = unit_grid(0);
        g.find_or_insert(&Vec3::new(0.5, 0.5, 0.5), 0).unwrap();
        g.find_or_insert(&Vec3::new(1.5, 0.5, 0.5), 0).unwrap();
        assert_eq!(g.num_vertices(), 12);
        let a = g.cell(0);
        for (k, &v) in a.vertex_ids.iter().enumerate() {
            let o = CORNER_OFFSETS[k];
            let expect = Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64);
            assert_eq!(g.vertex_position(v), expect);
        }
    }

    #[test]
    fn removal_and_vertex_compaction() {
        let mut g = unit_grid(0);
        g.find_or_insert(&Vec3::new(0.5, 0.5, 0.5), 0).unwrap();
        g.find_or_insert(&Vec3::new(1.5, 0.5, 0.5), 0).unwrap();
        g.find_or_insert(&Vec3::new(3.5, 3.5, 3.5), 0).unwrap();
        let map = g.remove_cells(&[true, false, false]);
        assert_eq!(map, vec![None, Some(0), Some(1)]);
        let vmap = g.compact_vertices();
        assert_eq!(vmap.iter().filter(|m| m.is_some()).count(), 16);
        assert_eq!(g.num_vertices(), 16);
        assert_eq!(g.find(0, [1, 0, 0]), Some(0));
        assert_eq!(g.find(0, [0, 0, 0]), None);
        let c = g.cell(0);
        assert_eq!(g.vertex_position(c.vertex_ids[0]), Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn offset_pattern_layout() {
        let p = offset_pattern(10);
        assert_eq!(p.len(), 10);
        assert_eq!(p[0], Vec3::new(-0.5, -0.5, -0.5));
        assert_eq!(p[6], Vec3::new(0.5, 0.5, 0.5));
        assert_eq!(p[8], Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(p[9], Vec3::new(-1.0, 0.0, 0.0));
        assert_eq!(offset_pattern(16)[14], Vec3::new(-0.25, -0.25, -0.25));
    }

    #[test]
    fn position_examples() {
        let c = Vec3::zeros();
        let zero = vec![Vec3::zeros(); 3];
        let l = vec![Vec3::repeat(0.1); 3];
        assert!(gaussian_positions(&c, 1.0, &zero, &l).iter().all(|p| *p == c));
        let p = decode_position(&c, 1.0, &Vec3::new(1.0, 0.0, 0.0), &Vec3::repeat(0.1));
        assert_eq!(p, Vec3::new(0.1, 0.0, 0.0));
        let far = decode_position(&c, 0.5, &Vec3::new(10.0, -10.0, 0.2), &Vec3::repeat(1.0));
        assert_eq!(far, Vec3::new(0.5, -0.5, 0.2));
    }

    proptest! {
        #[test]
        fn positions_match_componentwise_oracle(
            c in prop::array::uniform3(-2.0f64..2.0),
            off in prop::array::uniform3(-1.0f64..1.0),
            l in prop::array::uniform3(0.0f64..0.3),
            voxel in 0.1f64..1.0,
        ) {
            let center = Vec3::from(c);
            let p = decode_position(&center, voxel, &Vec3::from(off), &Vec3::from(l));
            for k in 0..3 {
                let raw = c[k] + off[k] * l[k];
                let lo = c[k] - voxel;
                let hi = c[k] + voxel;
                let expect = if raw < lo { lo } else if raw > hi { hi } else { raw };
                prop_assert_eq!(p[k], expect);
                prop_assert!((p[k] - c[k]).abs() <= voxel * (1.0 + 1e-12));
            }
        }

        #[test]
        fn insert_twice_yields_one_cell(p in prop::array::uniform3(0.0f64..4.0), level in 0usize..3) {
            let mut g = unit_grid(2);
            let p = Vec3::from(p);
            g.find_or_insert(&p, level).unwrap();
            g.find_or_insert(&p, level).unwrap();
            prop_assert_eq!(g.num_cells(), 1);
            prop_assert_eq!(g.num_vertices(), 8);
        }
    }
}
