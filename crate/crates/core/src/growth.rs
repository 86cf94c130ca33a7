//! Geometry-guided grid growth: depth/normal maps, grazing filter,
//! back-projection, downsampling and coarse-to-fine cell insertion; plus pruning.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::raster::render;
use crate::scene::{Camera, ImageBuffer, Mat3, Quat, Vec3};
use crate::synth::{render_oracle, AnalyticScene};
use crate::tape::GradientTape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthSource {
    /// Ray-marched analytic depth and normals.
    Oracle,
    /// The model's own rendered depth and normals.
    #[serde(rename = "self")]
    SelfRender,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthConfig {
    pub trigger_iteration: usize,
    /// Grazing threshold in radians.
    pub theta_thresh: f64,
    /// Downsampling voxel; `None` means half the finest voxel.
    pub s_down: Option<f64>,
    /// Tangential and normal extents, as multiples of half the target voxel.
    pub sigma_t: f64,
    pub sigma_n: f64,
    pub depth_source: DepthSource,
    pub tau_alpha: f64,
    /// `None` means three bandwidths (3δ) at prune time.
    pub tau_sdf: Option<f64>,
    /// Steps fitting newly created vertex features to the grown samples' tangent planes.
    pub refit_iterations: usize,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            trigger_iteration: 5000,
            theta_thresh: 80f64.to_radians(),
            s_down: None,
            sigma_t: 1.0,
            sigma_n: 0.1,
            depth_source: DepthSource::Oracle,
            tau_alpha: 0.005,
            tau_sdf: None,
            refit_iterations: 200,
        }
    }
}

impl GrowthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_thresh >= 0.0 && self.theta_thresh <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidParameter("theta_thresh must lie between 0 and 90 degrees".into()));
        }
        if !(self.sigma_t > self.sigma_n && self.sigma_n > 0.0) {
            return Err(Error::InvalidParameter("need sigma_t > sigma_n > 0".into()));
        }
        if !(self.tau_alpha > 0.0) || self.tau_sdf.is_some_and(|t| !(t > 0.0)) || self.s_down.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::InvalidParameter("growth thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub position: Vec3,
    pub normal: Vec3,
    pub source_view: usize,
}

/// Where growth gets its depth and normal maps.
#[derive(Clone, Copy, Debug)]
pub enum DepthProvider<'a> {
    Oracle(&'a AnalyticScene),
    Model(&'a Model),
}

/// Below this accumulated opacity a rendered pixel counts as a miss.
pub const SELF_MIN_ALPHA: f64 = 0.5;

/// Depth (camera z, +∞ on miss) and world-space normal maps for one view.
pub fn depth_normal_maps(cam: &Camera, provider: DepthProvider) -> (ImageBuffer, ImageBuffer) {
    match provider {
        DepthProvider::Oracle(scene) => {
            let (_, d, n) = render_oracle(scene, cam, &Vec3::zeros());
            (d, n)
        }
        DepthProvider::Model(model) => {
            let t = render(&model.splats(cam), cam, &Vec3::zeros()).0;
            let mut depth = t.depth.clone();
            for (d, a) in depth.data.iter_mut().zip(&t.alpha.data) {
                if *a < SELF_MIN_ALPHA {
                    *d = f64::INFINITY;
                }
            }
            (depth, t.normal)
        }
    }
}

fn normal_at(normal: &ImageBuffer, x: usize, y: usize) -> Vec3 {
    Vec3::new(normal.get(x, y, 0), normal.get(x, y, 1), normal.get(x, y, 2))
}

/// Keeps hit pixels whose viewing ray meets the surface at most `theta` off-normal.
pub fn filter_grazing(depth: &ImageBuffer, normal: &ImageBuffer, cam: &Camera, theta: f64) -> Vec<bool> {
    let (w, h) = (depth.width, depth.height);
    (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let d = depth.data[i];
            let n = normal_at(normal, x, y);
            if !d.is_finite() || n.norm() < 0.5 || !(theta > 0.0) {
                return false;
            }
            let v = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            let c = (v.dot(&n).abs() / n.norm()).min(1.0);
            c.acos() <= theta
        })
        .collect()
}

/// World points of the masked pixels (pixel centers at +0.5).
pub fn backproject(depth: &ImageBuffer, normal: &ImageBuffer, cam: &Camera, mask: &[bool], view: usize) -> Vec<SurfaceSample> {
    let w = depth.width;
    let mut out = Vec::new();
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let d = depth.data[i];
        let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
        let pc = Vec3::new(d * (u - cam.cx) / cam.fx, d * (v - cam.cy) / cam.fy, d);
        let n = normal_at(normal, x, y);
        let n = if n.norm() > 0.0 { n.normalize() } else { n };
        out.push(SurfaceSample { position: cam.camera_to_world(&pc), normal: n, source_view: view });
    }
    out
}

/// One sample per occupied `s_down` voxel: the one nearest the voxel's sample
/// centroid. Output ordered by voxel coordinate.
pub fn uniform_downsample(samples: &[SurfaceSample], s_down: f64) -> Vec<SurfaceSample> {
    let mut buckets: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let k = s.position.map(|c| (c / s_down).floor() as i64);
        buckets.entry([k.x, k.y, k.z]).or_default().push(i);
    }
    buckets
        .values()
        .map(|ids| {
            let centroid = ids.iter().fold(Vec3::zeros(), |a, &i| a + samples[i].position) / ids.len() as f64;
            let best = ids
                .iter()
                .copied()
                .min_by(|&a, &b| (samples[a].position - centroid).norm().total_cmp(&(samples[b].position - centroid).norm()).then(a.cmp(&b)))
                .expect("nonempty bucket");
            samples[best]
        })
        .collect()
}

/// Rotation with columns `[a, b, n]` and scales `(σ_t, σ_t, σ_n)`.
pub fn oriented_covariance(n: &Vec3, sigma_t: f64, sigma_n: f64) -> Result<(Quat, Vec3)> {
    if (n.norm() - 1.0).abs() > 1e-4 {
        return Err(Error::InvalidInput(format!("normal {n:?} is not unit length")));
    }
    let mut e = 0;
    for k in 1..3 {
        if n[k].abs() < n[e].abs() {
            e = k;
        }
    }
    let mut axis = Vec3::zeros();
    axis[e] = 1.0;
    let n = n.normalize();
    let a = n.cross(&axis).normalize();
    let b = n.cross(&a);
    let r = Mat3::from_columns(&[a, b, n]);
    Ok((Quat::from_matrix(&r), Vec3::new(sigma_t, sigma_t, sigma_n)))
}

/// Creates the missing cells containing `sample` at every level, coarse to
/// fine, fills them with Gaussians and nudges newly created vertex features
/// so the SDF vanishes at each new cell center. Returns the created cell ids.
pub fn insert_coarse_to_fine(
    model: &mut Model,
    sample: &SurfaceSample,
    cfg: &GrowthConfig,
    birth: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if !model.grid.bounds.contains(&sample.position) {
        return Err(Error::OutOfBounds(sample.position.into()));
    }
    let mut created = Vec::new();
    for level in 0..=model.grid.max_level {
        let old_vertices = model.grid.num_vertices();
        let (cell, was_created) = model.grid.find_or_insert(&sample.position, level)?;
        if !was_created {
            continue;
        }
        model.sync_vertices(birth, rng);
        let normal = if sample.normal.norm() > 0.0 { sample.normal } else { Vec3::z() };
        model.populate_cell(cell, &normal, cfg.sigma_t, cfg.sigma_n, birth)?;
        nudge_to_zero(model, cell, old_vertices);
        created.push(cell);
    }
    Ok(created)
}

/// One least-squares step on the cell's newly created vertex rows that
/// cancels the linearized SDF at the cell center.
fn nudge_to_zero(model: &mut Model, cell: usize, first_new_vertex: usize) {
    let c = model.grid.cell(cell).clone();
    let fresh: Vec<usize> = c.vertex_ids.iter().copied().filter(|&v| v >= first_new_vertex).collect();
    if fresh.is_empty() {
        return;
    }
    let mut tape = GradientTape::new();
    let fv = model.field.record(&mut tape);
    let stencil = std::sync::Arc::new(crate::field::Stencil::for_cells(&model.grid, &[cell]));
    let p = tape.leaf(crate::field::points_tensor(&[c.center]));
    let feat = model.field.interpolate(&mut tape, &fv, p, stencil);
    let trunk = model.field.trunk(&mut tape, &fv, feat);
    let f = tape.value(trunk.sdf).item();
    let Ok(grads) = tape.backward(trunk.sdf) else { return };
    let g = grads.wrt(feat);
    let gg: f64 = g.data.iter().map(|v| v * v).sum();
    if !(gg > 0.0) {
        return;
    }
    // every corner weighs 1/8 at the center, so moving m rows by Δ moves F by (m/8)Δ
    let scale = -(8.0 / fresh.len() as f64) * f / gg;
    for v in fresh {
        for (x, gc) in model.field.features.row_mut(v).iter_mut().zip(&g.data) {
            *x = crate::optim::quantize(*x + scale * gc);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GrowthReport {
    pub hit_pixels: usize,
    pub after_filter: usize,
    pub after_downsample: usize,
    pub out_of_bounds: usize,
    pub created_per_level: Vec<usize>,
    pub created_cells: Vec<usize>,
    pub created_gaussians: usize,
    #[serde(skip)]
    pub samples: Vec<SurfaceSample>,
}

impl GrowthReport {
    pub fn created(&self) -> usize {
        self.created_cells.len()
    }
}

/// Gathers filtered, downsampled surface samples from every view.
pub fn gather_samples(model: &Model, views: &[Camera], provider: DepthProvider, cfg: &GrowthConfig) -> (Vec<SurfaceSample>, usize, usize) {
    let per_view: Vec<(Vec<SurfaceSample>, usize)> = views
        .par_iter()
        .enumerate()
        .map(|(i, cam)| {
            let (d, n) = depth_normal_maps(cam, provider);
            let hits = d.data.iter().filter(|v| v.is_finite()).count();
            let mask = filter_grazing(&d, &n, cam, cfg.theta_thresh);
            (backproject(&d, &n, cam, &mask, i), hits)
        })
        .collect();
    let hits = per_view.iter().map(|v| v.1).sum();
    let raw: Vec<SurfaceSample> = per_view.into_iter().flat_map(|v| v.0).collect();
    let filtered = raw.len();
    let s_down = cfg.s_down.unwrap_or(0.5 * model.grid.voxel(model.grid.max_level));
    (uniform_downsample(&raw, s_down), hits, filtered)
}

/// Runs the full growth procedure once.
pub fn grow(model: &mut Model, views: &[Camera], provider: DepthProvider, cfg: &GrowthConfig, birth: usize, rng: &mut impl Rng) -> Result<GrowthReport> {
    let (samples, hits, filtered) = gather_samples(model, views, provider, cfg);
    let mut report = GrowthReport {
        hit_pixels: hits,
        after_filter: filtered,
        after_downsample: samples.len(),
        created_per_level: vec![0; model.grid.max_level + 1],
        ..Default::default()
    };
    let before = model.num_gaussians();
    for s in &samples {
        match insert_coarse_to_fine(model, s, cfg, birth, rng) {
            Ok(cells) => {
                for c in cells {
                    report.created_per_level[model.grid.cell(c).level] += 1;
                    report.created_cells.push(c);
                }
            }
            Err(Error::OutOfBounds(_)) => report.out_of_bounds += 1,
            Err(e) => return Err(e),
        }
    }
    report.created_gaussians = model.num_gaussians() - before;
    if !report.created_cells.is_empty() && cfg.refit_iterations > 0 {
        let points: Vec<Vec3> = samples.iter().map(|s| s.position).collect();
        let normals: Vec<Vec3> = samples.iter().map(|s| if s.normal.norm() > 0.0 { s.normal } else { Vec3::z() }).collect();
        model.fit_new_vertices(&points, &normals, &report.created_cells, birth, cfg.refit_iterations, rng)?;
    }
    report.samples = samples;
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PruneReport {
    pub removed_gaussians: usize,
    pub removed_cells: usize,
    pub removed_vertices: usize,
    #[serde(skip)]
    pub gaussian_keep: Vec<bool>,
    #[serde(skip)]
    pub vertex_keep: Vec<bool>,
}

/// Removes every Gaussian with `α < τ_α` or `|f| > τ_sdf`.
pub fn prune(model: &mut Model, tau_alpha: f64, tau_sdf: f64) -> Result<PruneReport> {
    if !(tau_alpha > 0.0 && tau_sdf > 0.0) {
        return Err(Error::InvalidParameter("prune thresholds must be positive".into()));
    }
    let (_, sdf, opacity) = model.gaussian_state();
    let keep: Vec<bool> = sdf.iter().zip(&opacity).map(|(f, a)| *a >= tau_alpha && f.abs() <= tau_sdf).collect();
    Ok(apply_keep(model, keep))
}

fn apply_keep(model: &mut Model, keep: Vec<bool>) -> PruneReport {
    let removed = keep.iter().filter(|&&k| !k).count();
    if removed == 0 {
        return PruneReport { gaussian_keep: keep, vertex_keep: vec![true; model.grid.num_vertices()], ..Default::default() };
    }
    let (cells, verts) = (model.grid.num_cells(), model.grid.num_vertices());
    let vertex_keep = model.retain_gaussians(&keep);
    PruneReport {
        removed_gaussians: removed,
        removed_cells: cells - model.grid.num_cells(),
        removed_vertices: verts - model.grid.num_vertices(),
        gaussian_keep: keep,
        vertex_keep,
    }
}

/// Coarse Gaussians whose cell has at least six of eight octants occupied at
/// the next finer level.
pub fn redundant_coarse_candidates(model: &Model) -> Vec<usize> {
    let grid = &model.grid;
    let mut out = Vec::new();
    for c in grid.cells() {
        if c.level >= grid.max_level {
            continue;
        }
        let mut occupied = 0;
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let coord = [2 * c.coord[0] + dx, 2 * c.coord[1] + dy, 2 * c.coord[2] + dz];
                    if grid.find(c.level + 1, coord).is_some() {
                        occupied += 1;
                    }
                }
            }
        }
        if occupied >= 6 {
            out.extend(c.gaussian_ids.iter().copied());
        }
    }
    out
}

/// Mean absolute per-channel difference between two renders.
pub fn render_difference(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len().max(1) as f64
}

/// Removes redundant coarse Gaussians in groups whose removal changes every
/// given view by less than `tolerance` (mean absolute difference). Groups
/// failing the test are split in half and retried.
pub fn prune_redundant_coarse(model: &mut Model, views: &[Camera], background: &Vec3, tolerance: f64) -> PruneReport {
    let candidates = redundant_coarse_candidates(model);
    let n = model.num_gaussians();
    if candidates.is_empty() || views.is_empty() {
        return apply_keep(model, vec![true; n]);
    }
    let splats: Vec<_> = views.iter().map(|v| model.splats(v)).collect();
    let base: Vec<ImageBuffer> = views.iter().zip(&splats).map(|(v, s)| render(s, v, background).0.color).collect();
    let mut removed = vec![false; n];
    let mut stack = vec![candidates];
    while let Some(group) = stack.pop() {
        let mut trial = removed.clone();
        for &g in &group {
            trial[g] = true;
        }
        let ok = views.iter().zip(&splats).zip(&base).all(|((v, s), b)| {
            let mut s = s.clone();
            for (i, &r) in trial.iter().enumerate() {
                if r {
                    s.opacities[i] = 0.0;
                }
            }
            render_difference(&render(&s, v, background).0.color, b) < tolerance
        });
        if ok {
            removed = trial;
        } else if group.len() > 1 {
            let (a, b) = group.split_at(group.len() / 2);
            stack.push(b.to_vec());
            stack.push(a.to_vec());
        }
    }
    apply_keep(model, removed.iter().map(|r| !r).collect())
}
