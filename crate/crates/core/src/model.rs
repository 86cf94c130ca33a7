//! The trainable scene: LoD grid, per-Gaussian parameters and the neural field,
//! plus the differentiable graph from parameters to rendered targets and losses.

use std::sync::Arc;

use nalgebra::SymmetricEigen;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{points_tensor, view_encoding_var, FieldConfig, FieldVars, NeuralField, Stencil};
use crate::grid::{initial_offset_scale, offset_pattern, Bounds, LodGrid};
use crate::growth::oriented_covariance;
use crate::losses::{eikonal_var, flattening_var, rgb_loss_var, sdf_center_var, LossWeights};
use crate::optim::{quantize, AdamState};
use crate::raster::{render, RasterOp, RenderTargets, SplatInputs};
use crate::scene::{Camera, ImageBuffer, Mat3, Quat, Vec3};
use crate::spatial::PointIndex;
use crate::tape::{GradientTape, Tensor, Var};

/// Neighbors used for PCA normal estimation.
pub const NORMAL_NEIGHBORS: usize = 16;

/// Per-Gaussian parameters, one row per Gaussian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianStore {
    pub cell: Vec<usize>,
    pub level: Vec<usize>,
    pub birth: Vec<usize>,
    /// Learnable offsets `C` (n×3).
    pub offsets: Tensor,
    /// Learnable offset scales `L` (n×3).
    pub offset_scales: Tensor,
    /// Unnormalized quaternions (w, x, y, z), n×4.
    pub rotations: Tensor,
    /// Log of the three axis scales (n×3).
    pub log_scales: Tensor,
    /// Per-Gaussian color logits added to the radiance head output (n×3).
    pub colors: Tensor,
}

impl GaussianStore {
    pub fn new() -> GaussianStore {
        GaussianStore {
            offsets: Tensor::zeros(0, 3),
            offset_scales: Tensor::zeros(0, 3),
            rotations: Tensor::zeros(0, 4),
            log_scales: Tensor::zeros(0, 3),
            colors: Tensor::zeros(0, 3),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.cell.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell.is_empty()
    }

    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, cell: usize, level: usize, birth: usize, offset: Vec3, offset_scale: Vec3, rotation: Quat, scales: Vec3) {
        fn append(t: &mut Tensor, row: &[f64]) {
            t.data.extend(row.iter().map(|&v| quantize(v)));
            t.rows += 1;
        }
        self.cell.push(cell);
        self.level.push(level);
        self.birth.push(birth);
        append(&mut self.offsets, offset.as_slice());
        append(&mut self.offset_scales, offset_scale.as_slice());
        append(&mut self.rotations, &rotation.0);
        append(&mut self.log_scales, &[scales.x.ln(), scales.y.ln(), scales.z.ln()]);
        append(&mut self.colors, &[0.0; 3]);
    }

    /// The trainable tensors in checkpoint order.
    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("gaussians.offsets", &self.offsets),
            ("gaussians.offset_scales", &self.offset_scales),
            ("gaussians.rotations", &self.rotations),
            ("gaussians.log_scales", &self.log_scales),
            ("gaussians.colors", &self.colors),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [&mut self.offsets, &mut self.offset_scales, &mut self.rotations, &mut self.log_scales, &mut self.colors]
    }

    pub fn scales(&self, i: usize) -> Vec3 {
        let r = self.log_scales.row(i);
        Vec3::new(r[0].exp(), r[1].exp(), r[2].exp())
    }

    pub fn rotation(&self, i: usize) -> Quat {
        let r = self.rotations.row(i);
        Quat([r[0], r[1], r[2], r[3]]).normalized()
    }
}

/// Parameters of point-cloud initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub base_size: f64,
    pub max_level: usize,
    pub gaussians_per_cell: usize,
    pub min_points: usize,
    pub field: FieldConfig,
    /// Initial δ as a fraction of the finest voxel size.
    pub delta_init_ratio: f64,
    /// Supervised steps fitting the SDF to the point cloud's tangent planes.
    pub init_sdf_iterations: usize,
    /// Tangential and normal scale ratios for new Gaussians (times half a voxel).
    pub sigma_t: f64,
    pub sigma_n: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            base_size: 0.4,
            max_level: 1,
            gaussians_per_cell: 10,
            min_points: 1,
            field: FieldConfig::default(),
            delta_init_ratio: 0.1,
            init_sdf_iterations: 300,
            sigma_t: 1.0,
            sigma_n: 0.1,
        }
    }
}

/// Tape handles for every trainable tensor and the decoded per-Gaussian values.
#[derive(Clone, Debug)]
pub struct GaussianVars {
    pub field: FieldVars,
    pub offsets: Var,
    pub offset_scales: Var,
    pub rotations: Var,
    pub log_scales: Var,
    pub colors: Var,
    pub positions: Var,
    pub sdf: Var,
    pub opacity: Var,
    pub color: Var,
    pub scales: Var,
    pub quats: Var,
}

/// Loss terms recorded on one tape.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub vars: GaussianVars,
    pub render: Var,
    pub rgb: Var,
    pub flatten: Var,
    pub center: Var,
    pub eikonal: Option<Var>,
    pub total: Var,
    pub targets: RenderTargets,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub grid: LodGrid,
    pub store: GaussianStore,
    pub field: NeuralField,
}

/// PCA normals over `NORMAL_NEIGHBORS` neighbors, oriented toward the nearest
/// viewpoint (or away from the centroid when none is given).
pub fn estimate_normals(points: &[Vec3], viewpoints: &[Vec3]) -> Vec<Vec3> {
    let index = PointIndex::new(points.to_vec(), 0.0);
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len().max(1) as f64;
    points
        .iter()
        .map(|p| {
            let nb = index.k_nearest(p, NORMAL_NEIGHBORS);
            let mean = nb.iter().fold(Vec3::zeros(), |a, (i, _)| a + points[*i]) / nb.len() as f64;
            let mut cov = Mat3::zeros();
            for (i, _) in &nb {
                let d = points[*i] - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut k = 0;
            for j in 1..3 {
                if eig.eigenvalues[j] < eig.eigenvalues[k] {
                    k = j;
                }
            }
            let mut n: Vec3 = eig.eigenvectors.column(k).into_owned();
            if !(n.norm() > 0.0) || nb.len() < 3 {
                n = Vec3::z();
            }
            n = n.normalize();
            let toward = match viewpoints.iter().min_by(|a, b| (*a - p).norm().total_cmp(&(*b - p).norm())) {
                Some(v) => v - p,
                None => p - centroid,
            };
            if n.dot(&toward) < 0.0 {
                -n
            } else {
                n
            }
        })
        .collect()
}

impl Model {
    /// Builds the grid from sparse points, fills every cell with Gaussians and
    /// pre-fits the SDF to the points' tangent planes.
    pub fn init_from_points(
        points: &[Vec3],
        bounds: Bounds,
        viewpoints: &[Vec3],
        cfg: &InitConfig,
        rng: &mut impl Rng,
    ) -> Result<Model> {
        if !(cfg.delta_init_ratio > 0.0) || !(cfg.sigma_t > 0.0 && cfg.sigma_n > 0.0) {
            return Err(Error::InvalidParameter("delta_init_ratio, sigma_t and sigma_n must be positive".into()));
        }
        let grid = LodGrid::init_from_points(points, bounds, cfg.base_size, cfg.max_level, cfg.min_points, cfg.gaussians_per_cell)?;
        let delta = cfg.delta_init_ratio * grid.voxel(cfg.max_level);
        let field = NeuralField::new(cfg.field.clone(), grid.num_vertices(), delta, rng)?;
        let mut model = Model { grid, store: GaussianStore::new(), field };
        let inside: Vec<Vec3> = points.iter().copied().filter(|p| model.grid.bounds.contains(p)).collect();
        let normals = estimate_normals(&inside, viewpoints);
        let index = PointIndex::new(inside.clone(), 0.0);
        for cell in 0..model.grid.num_cells() {
            let c = model.grid.cell(cell).center;
            let n = index.nearest(&c).map_or(Vec3::z(), |(i, _)| normals[i]);
            model.populate_cell(cell, &n, cfg.sigma_t, cfg.sigma_n, 0)?;
        }
        model.fit_sdf_to_points(&inside, &normals, cfg.init_sdf_iterations, rng)?;
        Ok(model)
    }

    pub fn num_gaussians(&self) -> usize {
        self.store.len()
    }

    /// Adds `k` Gaussians to an empty cell with an orientation aligned to `normal`.
    pub fn populate_cell(&mut self, cell: usize, normal: &Vec3, sigma_t: f64, sigma_n: f64, birth: usize) -> Result<()> {
        let c = self.grid.cell(cell).clone();
        if !c.gaussian_ids.is_empty() {
            return Err(Error::InvalidInput(format!("cell {cell} already holds Gaussians")));
        }
        let v = self.grid.voxel(c.level);
        let (q, s) = oriented_covariance(normal, sigma_t * 0.5 * v, sigma_n * 0.5 * v)?;
        let l = initial_offset_scale(v);
        let mut ids = Vec::with_capacity(self.grid.gaussians_per_cell);
        for off in offset_pattern(self.grid.gaussians_per_cell) {
            ids.push(self.store.len());
            self.store.push(cell, c.level, birth, off, l, q, s);
        }
        self.grid.cell_mut(cell).gaussian_ids = ids;
        Ok(())
    }

    /// Makes room for feature rows of vertices created by grid insertions.
    pub fn sync_vertices(&mut self, birth: usize, rng: &mut impl Rng) {
        self.field.ensure_vertices(self.grid.num_vertices(), birth, rng);
    }

    /// Removes Gaussians whose flag is false, then empty cells and unreferenced
    /// vertices. Returns the vertex keep mask (for optimizer state).
    pub fn retain_gaussians(&mut self, keep: &[bool]) -> Vec<bool> {
        assert_eq!(keep.len(), self.store.len(), "keep mask length");
        let mut has = vec![false; self.grid.num_cells()];
        for (i, &k) in keep.iter().enumerate() {
            if k {
                has[self.store.cell[i]] = true;
            }
        }
        let remove: Vec<bool> = has.iter().map(|h| !h).collect();
        let cell_map = self.grid.remove_cells(&remove);
        let vmap = self.grid.compact_vertices();
        let vkeep: Vec<bool> = vmap.iter().map(|m| m.is_some()).collect();
        self.field.features = crate::optim::retain_rows(&self.field.features, &vkeep);
        self.field.vertex_birth = self.field.vertex_birth.iter().zip(&vkeep).filter(|(_, &k)| k).map(|(&b, _)| b).collect();

        let s = &mut self.store;
        let filter = |v: &Vec<usize>| -> Vec<usize> { v.iter().zip(keep).filter(|(_, &k)| k).map(|(&x, _)| x).collect() };
        s.cell = filter(&s.cell).into_iter().map(|c| cell_map[c].expect("kept Gaussian keeps its cell")).collect();
        s.level = filter(&s.level);
        s.birth = filter(&s.birth);
        for t in s.tensors_mut() {
            *t = crate::optim::retain_rows(t, keep);
        }
        for id in 0..self.grid.num_cells() {
            self.grid.cell_mut(id).gaussian_ids.clear();
        }
        for (i, &c) in self.store.cell.iter().enumerate() {
            self.grid.cell_mut(c).gaussian_ids.push(i);
        }
        vkeep
    }

    fn centers_and_bounds(&self) -> (Tensor, Tensor, Tensor) {
        let n = self.store.len();
        let (mut c, mut lo, mut hi) = (Tensor::zeros(n, 3), Tensor::zeros(n, 3), Tensor::zeros(n, 3));
        for i in 0..n {
            let cell = self.grid.cell(self.store.cell[i]);
            let v = self.grid.voxel(cell.level);
            for k in 0..3 {
                *c.at_mut(i, k) = cell.center[k];
                *lo.at_mut(i, k) = cell.center[k] - v;
                *hi.at_mut(i, k) = cell.center[k] + v;
            }
        }
        (c, lo, hi)
    }

    /// Records the parameters and decodes every Gaussian as seen from `eye`.
    pub fn record(&self, tape: &mut GradientTape, eye: &Vec3) -> GaussianVars {
        let fv = self.field.record(tape);
        let offsets = tape.leaf(self.store.offsets.clone());
        let offset_scales = tape.leaf(self.store.offset_scales.clone());
        let rotations = tape.leaf(self.store.rotations.clone());
        let log_scales = tape.leaf(self.store.log_scales.clone());
        let colors = tape.leaf(self.store.colors.clone());

        let (centers, lo, hi) = self.centers_and_bounds();
        let centers = tape.leaf(centers);
        let delta = tape.mul(offsets, offset_scales);
        let raw = tape.add(centers, delta);
        let positions = tape.clamp(raw, &lo, &hi);

        let stencil = Arc::new(Stencil::for_cells(&self.grid, &self.store.cell));
        let feat = self.field.interpolate(tape, &fv, positions, stencil);
        let trunk = self.field.trunk(tape, &fv, feat);
        let opacity = self.field.opacity(tape, &fv, trunk.sdf);

        let neg_eye = tape.leaf(Tensor::from_vec(1, 3, vec![-eye.x, -eye.y, -eye.z]));
        let view = tape.add_row(positions, neg_eye);
        let enc = view_encoding_var(tape, view, self.field.config.view_encoding_degree);
        let logits = self.field.head(tape, &fv, trunk.radiance, enc);
        let logits = tape.add(logits, colors);
        let color = tape.sigmoid(logits);
        let scales = tape.exp(log_scales);
        let quats = tape.normalize_rows(rotations);
        GaussianVars {
            field: fv,
            offsets,
            offset_scales,
            rotations,
            log_scales,
            colors,
            positions,
            sdf: trunk.sdf,
            opacity,
            color,
            scales,
            quats,
        }
    }

    /// Records the rasterizer; the output is (W·H)×5: r, g, b, depth, alpha.
    pub fn record_render(&self, tape: &mut GradientTape, vars: &GaussianVars, cam: &Camera, background: &Vec3) -> (Var, RenderTargets) {
        let inputs = [vars.positions, vars.quats, vars.scales, vars.opacity, vars.color];
        let splats = SplatInputs::from_tensors(
            tape.value(inputs[0]),
            tape.value(inputs[1]),
            tape.value(inputs[2]),
            tape.value(inputs[3]),
            tape.value(inputs[4]),
        );
        let (targets, cache) = render(&splats, cam, background);
        let value = RasterOp::targets_tensor(&targets);
        let op = RasterOp { camera: cam.clone(), cache: Arc::new(cache) };
        (tape.custom(Box::new(op), &inputs, value), targets)
    }

    /// Records the total training objective for one view.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph(
        &self,
        tape: &mut GradientTape,
        cam: &Camera,
        truth: &ImageBuffer,
        background: &Vec3,
        weights: &LossWeights,
        center_threshold: f64,
        eikonal_samples: &[(Vec3, usize)],
    ) -> LossGraph {
        let vars = self.record(tape, &cam.center());
        let (render, targets) = self.record_render(tape, &vars, cam, background);
        let rgb_image = tape.slice_cols(render, 0, 3);
        let rgb = rgb_loss_var(tape, rgb_image, truth, weights.lambda_ssim);
        let flatten = flattening_var(tape, vars.scales, weights.lambda_flatten);
        let center = sdf_center_var(tape, vars.sdf, vars.opacity, center_threshold);
        let eikonal = (!eikonal_samples.is_empty()).then(|| self.eikonal_graph(tape, &vars.field, eikonal_samples));
        let mut total = tape.add(rgb, flatten);
        let wc = tape.scale(center, weights.lambda_center);
        total = tape.add(total, wc);
        if let Some(e) = eikonal {
            let we = tape.scale(e, weights.lambda_eikonal);
            total = tape.add(total, we);
        }
        LossGraph { vars, render, rgb, flatten, center, eikonal, total, targets }
    }

    /// Mean `(‖∇f‖ − 1)²` over `(point, cell)` samples.
    pub fn eikonal_graph(&self, tape: &mut GradientTape, fv: &FieldVars, samples: &[(Vec3, usize)]) -> Var {
        let points: Vec<Vec3> = samples.iter().map(|s| s.0).collect();
        let cells: Vec<usize> = samples.iter().map(|s| s.1).collect();
        let stencil = Arc::new(Stencil::for_cells(&self.grid, &cells));
        let pv = tape.leaf(points_tensor(&points));
        let feat = self.field.interpolate(tape, fv, pv, stencil.clone());
        let trunk = self.field.trunk(tape, fv, feat);
        let g = self.field.spatial_gradient(tape, fv, &points, &stencil, &trunk);
        eikonal_var(tape, g)
    }

    /// Decoded render inputs as seen from `cam`.
    pub fn splats(&self, cam: &Camera) -> SplatInputs {
        let mut tape = GradientTape::new();
        let v = self.record(&mut tape, &cam.center());
        SplatInputs::from_tensors(
            tape.value(v.positions),
            tape.value(v.quats),
            tape.value(v.scales),
            tape.value(v.opacity),
            tape.value(v.color),
        )
    }

    pub fn render(&self, cam: &Camera, background: &Vec3) -> RenderTargets {
        render(&self.splats(cam), cam, background).0
    }

    /// Decoded positions, SDF values and opacities of every Gaussian.
    pub fn gaussian_state(&self) -> (Vec<Vec3>, Vec<f64>, Vec<f64>) {
        let mut tape = GradientTape::new();
        let v = self.record(&mut tape, &Vec3::zeros());
        let p = tape.value(v.positions);
        let pos = (0..p.rows).map(|r| Vec3::new(p.at(r, 0), p.at(r, 1), p.at(r, 2))).collect();
        (pos, tape.value(v.sdf).data.clone(), tape.value(v.opacity).data.clone())
    }

    /// Decoded Gaussian positions; needs no field evaluation.
    pub fn gaussian_positions(&self) -> Vec<Vec3> {
        let (c, lo, hi) = self.centers_and_bounds();
        (0..self.store.len())
            .map(|i| {
                Vec3::from_fn(|k, _| {
                    let raw = c.at(i, k) + self.store.offsets.at(i, k) * self.store.offset_scales.at(i, k);
                    raw.clamp(lo.at(i, k), hi.at(i, k))
                })
            })
            .collect()
    }

    /// `(position, level)` of every Gaussian, for Eikonal sampling.
    pub fn eikonal_centers(&self) -> Vec<(Vec3, usize)> {
        self.gaussian_positions().into_iter().zip(self.store.level.iter().copied()).collect()
    }

    /// SDF at `p` from the finest occupied level containing it.
    pub fn sdf_finest(&self, p: &Vec3) -> Option<f64> {
        let level = self.finest_level_at(p)?;
        self.field.sdf_at(&self.grid, p, level).ok()
    }

    pub fn finest_level_at(&self, p: &Vec3) -> Option<usize> {
        (0..=self.grid.max_level).rev().find(|&l| self.grid.locate(p, l).is_ok())
    }

    /// Supervised fit of the SDF channel to signed point-to-plane distances of
    /// the nearest input point, with a light Eikonal term. Updates every vertex
    /// feature and the decoder trunk.
    pub fn fit_sdf_to_points(&mut self, points: &[Vec3], normals: &[Vec3], iterations: usize, rng: &mut impl Rng) -> Result<()> {
        let all: Vec<usize> = (0..self.grid.num_cells()).collect();
        self.fit_sdf(points, normals, &all, None, iterations, rng)
    }

    /// Sets each Gaussian's color logits so its decoded color, averaged over
    /// six axis-aligned far viewpoints, equals the color of the nearest point.
    pub fn init_colors_from_points(&mut self, points: &[Vec3], colors: &[Vec3]) -> Result<()> {
        if points.len() != colors.len() {
            return Err(Error::InvalidInput(format!("{} points but {} colors", points.len(), colors.len())));
        }
        if points.is_empty() || self.store.is_empty() {
            return Ok(());
        }
        let n = self.store.len();
        let far = 1e3 * (1.0 + self.grid.bounds.extent().norm());
        let mut head = vec![0.0; 3 * n];
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut eye = self.grid.bounds.center();
                eye[axis] += sign * far;
                let mut tape = GradientTape::new();
                let v = self.record(&mut tape, &eye);
                let c = tape.value(v.color);
                for (k, h) in head.iter_mut().enumerate() {
                    let p = c.data[k].clamp(1e-6, 1.0 - 1e-6);
                    *h += ((p / (1.0 - p)).ln() - self.store.colors.data[k]) / 6.0;
                }
            }
        }
        let index = PointIndex::new(points.to_vec(), 0.0);
        let positions = self.gaussian_positions();
        for (i, p) in positions.iter().enumerate() {
            let (j, _) = index.nearest(p).expect("nonempty index");
            for k in 0..3 {
                let c = colors[j][k].clamp(0.02, 0.98);
                *self.store.colors.at_mut(i, k) = quantize((c / (1.0 - c)).ln() - head[3 * i + k]);
            }
        }
        Ok(())
    }

    /// Like [`Model::fit_sdf_to_points`], restricted to `cells` and to vertex
    /// rows born at `birth`; the decoder stays fixed.
    pub fn fit_new_vertices(
        &mut self,
        points: &[Vec3],
        normals: &[Vec3],
        cells: &[usize],
        birth: usize,
        iterations: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let rows: Vec<f64> = self.field.vertex_birth.iter().map(|&b| if b == birth { 1.0 } else { 0.0 }).collect();
        self.fit_sdf(points, normals, cells, Some(rows), iterations, rng)
    }

    fn fit_sdf(
        &mut self,
        points: &[Vec3],
        normals: &[Vec3],
        cells: &[usize],
        vertex_rows: Option<Vec<f64>>,
        iterations: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if iterations == 0 || points.is_empty() || cells.is_empty() {
            return Ok(());
        }
        const BATCH: usize = 1024;
        const EIKONAL_WEIGHT: f64 = 0.1;
        let train_decoder = vertex_rows.is_none();
        let mut allowed = vec![false; self.grid.num_cells()];
        for &c in cells {
            allowed[c] = true;
        }
        let index = PointIndex::new(points.to_vec(), 0.0);
        let trunk_layers = if train_decoder { 6 } else { 0 };
        let mut feat_opt = AdamState::for_param(&self.field.features);
        let mut layer_opts: Vec<AdamState> = self.field.layers[..trunk_layers].iter().map(AdamState::for_param).collect();
        let finest = self.grid.voxel(self.grid.max_level);
        for _ in 0..iterations {
            let mut samples = Vec::with_capacity(BATCH);
            let mut attempts = 0;
            while samples.len() < BATCH && attempts < 20 * BATCH {
                attempts += 1;
                if attempts % 2 == 0 {
                    let id = cells[rng.random_range(0..cells.len())];
                    let c = self.grid.cell(id);
                    let v = self.grid.voxel(c.level);
                    let u = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                    samples.push((c.center + u * v, id));
                } else {
                    let j = rng.random_range(0..points.len());
                    let q = points[j] + normals[j] * rng.random_range(-finest..finest);
                    let level = rng.random_range(0..=self.grid.max_level);
                    if let Ok(cell) = self.grid.locate(&q, level) {
                        if allowed[cell] {
                            samples.push((q, cell));
                        }
                    }
                }
            }
            if samples.is_empty() {
                break;
            }
            let target: Vec<f64> = samples
                .iter()
                .map(|(q, _)| {
                    let (j, _) = index.nearest(q).expect("nonempty index");
                    normals[j].dot(&(q - points[j]))
                })
                .collect();
            let mut tape = GradientTape::new();
            let fv = self.field.record(&mut tape);
            let pts: Vec<Vec3> = samples.iter().map(|s| s.0).collect();
            let sample_cells: Vec<usize> = samples.iter().map(|s| s.1).collect();
            let stencil = Arc::new(Stencil::for_cells(&self.grid, &sample_cells));
            let pv = tape.leaf(points_tensor(&pts));
            let feat = self.field.interpolate(&mut tape, &fv, pv, stencil.clone());
            let trunk = self.field.trunk(&mut tape, &fv, feat);
            let t = tape.leaf(Tensor::from_vec(samples.len(), 1, target));
            let d = tape.sub(trunk.sdf, t);
            let sq = tape.square(d);
            let fit = tape.mean(sq);
            let g = self.field.spatial_gradient(&mut tape, &fv, &pts, &stencil, &trunk);
            let e = eikonal_var(&mut tape, g);
            let e = tape.scale(e, EIKONAL_WEIGHT);
            let loss = tape.add(fit, e);
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite { iteration: 0, detail: "SDF fit diverged".into() });
            }
            let grads = tape.backward(loss)?;
            feat_opt.step(&mut self.field.features, &grads.wrt(fv.features), 1e-2, vertex_rows.as_deref());
            for (k, opt) in layer_opts.iter_mut().enumerate() {
                opt.step(&mut self.field.layers[k], &grads.wrt(fv.layers[k]), 1e-3, None);
            }
        }
        Ok(())
    }
}
