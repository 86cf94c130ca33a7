//! Differentiable front-to-back splatting.
//!
//! The forward pass bins projected Gaussians into 16×16 pixel tiles, sorts
//! each tile's list by (depth, id) and composites every pixel, recording the
//! contributors it consumed. The backward pass replays those records in
//! reverse and chains through the EWA projection to world-space parameters.

use std::sync::Arc;

use nalgebra::Matrix2x3;
use rayon::prelude::*;

use crate::scene::{
    covariance_unchecked, quat_matrix_vjp, smallest_axis, Camera, ImageBuffer, Mat2, Mat3, Quat, Vec2, Vec3,
    COV2D_REGULARIZER, NEAR_PLANE,
};
use crate::tape::{CustomOp, Tensor};

pub const TILE: usize = 16;
/// Squared Mahalanobis radius beyond which a Gaussian contributes nothing (3σ).
pub const CUTOFF_Q: f64 = 9.0;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Gaussians with smaller opacity are skipped entirely.
pub const MIN_OPACITY: f64 = 1e-10;
const DEPTH_FLOOR: f64 = 1e-8;

/// Decoded per-Gaussian render inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatInputs {
    pub means: Vec<Vec3>,
    /// Unit quaternions.
    pub rotations: Vec<Quat>,
    pub scales: Vec<Vec3>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vec3>,
}

impl SplatInputs {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, mean: Vec3, rotation: Quat, scales: Vec3, opacity: f64, color: Vec3) {
        self.means.push(mean);
        self.rotations.push(rotation);
        self.scales.push(scales);
        self.opacities.push(opacity);
        self.colors.push(color);
    }

    /// Builds inputs from n×3, n×4, n×3, n×1, n×3 tensors.
    pub fn from_tensors(means: &Tensor, rotations: &Tensor, scales: &Tensor, opacities: &Tensor, colors: &Tensor) -> SplatInputs {
        let v3 = |t: &Tensor, r: usize| Vec3::new(t.at(r, 0), t.at(r, 1), t.at(r, 2));
        let n = means.rows;
        SplatInputs {
            means: (0..n).map(|r| v3(means, r)).collect(),
            rotations: (0..n).map(|r| Quat([rotations.at(r, 0), rotations.at(r, 1), rotations.at(r, 2), rotations.at(r, 3)])).collect(),
            scales: (0..n).map(|r| v3(scales, r)).collect(),
            opacities: opacities.data.clone(),
            colors: (0..n).map(|r| v3(colors, r)).collect(),
        }
    }
}

/// Gradients with respect to every [`SplatInputs`] field.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub means: Vec<Vec3>,
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<Vec3>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vec3>,
}

impl SplatGrads {
    fn zeros(n: usize) -> SplatGrads {
        SplatGrads {
            means: vec![Vec3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            scales: vec![Vec3::zeros(); n],
            opacities: vec![0.0; n],
            colors: vec![Vec3::zeros(); n],
        }
    }
}

/// Per-pixel color, depth, normal and accumulated opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderTargets {
    pub color: ImageBuffer,
    pub depth: ImageBuffer,
    pub normal: ImageBuffer,
    pub alpha: ImageBuffer,
}

#[derive(Clone, Debug)]
struct Projected {
    id: usize,
    mean: Vec2,
    conic: Mat2,
    depth: f64,
    opacity: f64,
    color: Vec3,
    normal: Vec3,
    /// Inclusive pixel bounding box [x0, x1] × [y0, y1].
    bbox: [i64; 4],
}

fn project_all(inputs: &SplatInputs, cam: &Camera) -> Vec<Projected> {
    let eye = cam.center();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let opacity = inputs.opacities[i];
        if !(opacity >= MIN_OPACITY) {
            continue;
        }
        let mean = inputs.means[i];
        let t = cam.world_to_camera(&mean);
        if !(t.z > NEAR_PLANE) {
            continue;
        }
        let cov3 = covariance_unchecked(&inputs.rotations[i], &inputs.scales[i]);
        let m = cam.projection_jacobian(&t) * cam.rotation;
        let cov = m * cov3 * m.transpose() + Mat2::identity() * COV2D_REGULARIZER;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if !(det > 0.0) {
            continue;
        }
        let conic = Mat2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        let mean2 = cam.project_camera_point(&t);
        let rx = 3.0 * cov[(0, 0)].sqrt();
        let ry = 3.0 * cov[(1, 1)].sqrt();
        // pixel centers sit at integer + 0.5; one pixel of margin keeps the box conservative
        let bbox = [
            (mean2.x - rx - 0.5).floor() as i64 - 1,
            (mean2.x + rx - 0.5).ceil() as i64 + 1,
            (mean2.y - ry - 0.5).floor() as i64 - 1,
            (mean2.y + ry - 0.5).ceil() as i64 + 1,
        ];
        if bbox[1] < 0 || bbox[3] < 0 || bbox[0] >= cam.width as i64 || bbox[2] >= cam.height as i64 {
            continue;
        }
        let mut normal = inputs.rotations[i].to_matrix().column(smallest_axis(&inputs.scales[i])).into_owned();
        if normal.dot(&(eye - mean)) < 0.0 {
            normal = -normal;
        }
        out.push(Projected { id: i, mean: mean2, conic, depth: t.z, opacity, color: inputs.colors[i], normal, bbox });
    }
    out
}

fn depth_order(a: &Projected, b: &Projected) -> std::cmp::Ordering {
    a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id))
}

/// Opacity `α·G(u)` of one Gaussian at a pixel center, `None` outside the cutoff.
#[inline]
fn pixel_alpha(p: &Projected, px: f64, py: f64) -> Option<(f64, f64, Vec2)> {
    let d = Vec2::new(px - p.mean.x, py - p.mean.y);
    let q = p.conic[(0, 0)] * d.x * d.x + 2.0 * p.conic[(0, 1)] * d.x * d.y + p.conic[(1, 1)] * d.y * d.y;
    if !(q <= CUTOFF_Q) {
        return None;
    }
    let g = (-0.5 * q).exp();
    Some((p.opacity * g, g, d))
}

#[derive(Clone, Copy, Debug, Default)]
struct PixelOut {
    color: [f64; 3],
    depth: f64,
    normal: [f64; 3],
    alpha: f64,
}

#[derive(Clone, Copy, Debug)]
struct Contrib {
    slot: u32,
    transmittance: f64,
}

/// Composites one pixel over `list` (already in depth order).
fn composite<'a>(
    list: impl Iterator<Item = (usize, &'a Projected)>,
    px: f64,
    py: f64,
    background: &Vec3,
    mut record: impl FnMut(Contrib),
) -> PixelOut {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut dn = 0.0;
    let mut a = 0.0;
    let mut n = [0.0; 3];
    for (slot, p) in list {
        let Some((ap, _, _)) = pixel_alpha(p, px, py) else { continue };
        let w = t * ap;
        for k in 0..3 {
            c[k] += w * p.color[k];
            n[k] += w * p.normal[k];
        }
        dn += w * p.depth;
        a += w;
        record(Contrib { slot: slot as u32, transmittance: t });
        t *= 1.0 - ap;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    let normal = if nn > 0.0 { n.map(|v| v / nn) } else { [0.0; 3] };
    PixelOut {
        color: [c[0] + t * background[0], c[1] + t * background[1], c[2] + t * background[2]],
        depth: dn / a.max(DEPTH_FLOOR),
        normal,
        alpha: a,
    }
}

fn empty_targets(cam: &Camera) -> RenderTargets {
    RenderTargets {
        color: ImageBuffer::new(cam.width, cam.height, 3),
        depth: ImageBuffer::new(cam.width, cam.height, 1),
        normal: ImageBuffer::new(cam.width, cam.height, 3),
        alpha: ImageBuffer::new(cam.width, cam.height, 1),
    }
}

fn write_pixel(out: &mut RenderTargets, x: usize, y: usize, p: &PixelOut) {
    for k in 0..3 {
        out.color.set(x, y, k, p.color[k]);
        out.normal.set(x, y, k, p.normal[k]);
    }
    out.depth.set(x, y, 0, p.depth);
    out.alpha.set(x, y, 0, p.alpha);
}

struct TileRecord {
    /// Indices into the projected list, in depth order.
    list: Vec<usize>,
    /// Per pixel of the tile (row-major within the tile): range into `contribs`.
    ranges: Vec<(usize, usize)>,
    contribs: Vec<Contrib>,
    pixels: Vec<PixelOut>,
}

/// Everything the backward pass needs from a forward render.
pub struct RenderCache {
    projected: Vec<Projected>,
    tiles: Vec<TileRecord>,
    tiles_x: usize,
    background: Vec3,
}

impl RenderCache {
    /// Total recorded (pixel, Gaussian) contributions.
    pub fn contribution_count(&self) -> usize {
        self.tiles.iter().map(|t| t.contribs.len()).sum()
    }
}

fn tile_pixels(cam: &Camera, tx: usize, ty: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x0, y0) = (tx * TILE, ty * TILE);
    let (x1, y1) = ((x0 + TILE).min(cam.width), (y0 + TILE).min(cam.height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Tile-based forward render.
pub fn render(inputs: &SplatInputs, cam: &Camera, background: &Vec3) -> (RenderTargets, RenderCache) {
    let mut projected = project_all(inputs, cam);
    projected.sort_by(depth_order);
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in projected.iter().enumerate() {
        let tx0 = p.bbox[0].max(0) as usize / TILE;
        let tx1 = (p.bbox[1].min(cam.width as i64 - 1)) as usize / TILE;
        let ty0 = p.bbox[2].max(0) as usize / TILE;
        let ty1 = (p.bbox[3].min(cam.height as i64 - 1)) as usize / TILE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(i);
            }
        }
    }
    let tiles: Vec<TileRecord> = bins
        .into_par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let mut contribs = Vec::new();
            let mut ranges = Vec::new();
            let mut pixels = Vec::new();
            for (x, y) in tile_pixels(cam, tx, ty) {
                let start = contribs.len();
                let iter = list.iter().enumerate().map(|(slot, &i)| (slot, &projected[i]));
                let out = composite(iter, x as f64 + 0.5, y as f64 + 0.5, background, |c| contribs.push(c));
                ranges.push((start, contribs.len()));
                pixels.push(out);
            }
            TileRecord { list, ranges, contribs, pixels }
        })
        .collect();
    let mut targets = empty_targets(cam);
    for (t, rec) in tiles.iter().enumerate() {
        for ((x, y), p) in tile_pixels(cam, t % tiles_x, t / tiles_x).zip(&rec.pixels) {
            write_pixel(&mut targets, x, y, p);
        }
    }
    (targets, RenderCache { projected, tiles, tiles_x, background: *background })
}

/// Brute-force reference: every pixel sorts and scans every Gaussian.
pub fn render_reference(inputs: &SplatInputs, cam: &Camera, background: &Vec3) -> RenderTargets {
    let projected = project_all(inputs, cam);
    let mut targets = empty_targets(cam);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut order: Vec<&Projected> = projected.iter().collect();
            order.sort_by(|a, b| depth_order(a, b));
            let out = composite(order.into_iter().enumerate(), x as f64 + 0.5, y as f64 + 0.5, background, |_| {});
            write_pixel(&mut targets, x, y, &out);
        }
    }
    targets
}

/// Screen-space gradient accumulators of one Gaussian.
#[derive(Clone, Copy, Default)]
struct Grad2d {
    mean: [f64; 2],
    /// d/d conic as a full symmetric matrix: [xx, xy, yy].
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl Grad2d {
    fn add(&mut self, o: &Grad2d) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

/// Pulls image-space gradients back to every Gaussian input.
///
/// Normals are not differentiated. Missing depth/alpha gradients count as zero.
pub fn render_backward(
    inputs: &SplatInputs,
    cam: &Camera,
    cache: &RenderCache,
    grad_color: &ImageBuffer,
    grad_depth: Option<&ImageBuffer>,
    grad_alpha: Option<&ImageBuffer>,
) -> SplatGrads {
    let bg = cache.background;
    let per_tile: Vec<Vec<Grad2d>> = cache
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, rec)| {
            let mut acc = vec![Grad2d::default(); rec.list.len()];
            let pixels = tile_pixels(cam, t % cache.tiles_x, t / cache.tiles_x);
            for (((x, y), &(s, e)), out) in pixels.zip(&rec.ranges).zip(&rec.pixels) {
                let gc = Vec3::new(grad_color.get(x, y, 0), grad_color.get(x, y, 1), grad_color.get(x, y, 2));
                let gd = grad_depth.map_or(0.0, |g| g.get(x, y, 0));
                let ga = grad_alpha.map_or(0.0, |g| g.get(x, y, 0));
                if gc == Vec3::zeros() && gd == 0.0 && ga == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let aden = out.alpha.max(DEPTH_FLOOR);
                let mut r = gc.dot(&bg);
                for c in rec.contribs[s..e].iter().rev() {
                    let p = &cache.projected[rec.list[c.slot as usize]];
                    let (ap, g, d) = pixel_alpha(p, px, py).expect("recorded contributor is inside the cutoff");
                    let w = c.transmittance * ap;
                    let gw = gc.dot(&p.color) + ga + gd * (p.depth - out.depth) / aden;
                    let dl_da = c.transmittance * (gw - r);
                    r = ap * gw + (1.0 - ap) * r;
                    let slot = &mut acc[c.slot as usize];
                    for k in 0..3 {
                        slot.color[k] += gc[k] * w;
                    }
                    slot.depth += gd * w / aden;
                    slot.opacity += dl_da * g;
                    let dl_dq = -0.5 * g * dl_da * p.opacity;
                    let md = p.conic * d;
                    slot.mean[0] -= 2.0 * dl_dq * md.x;
                    slot.mean[1] -= 2.0 * dl_dq * md.y;
                    slot.conic[0] += dl_dq * d.x * d.x;
                    slot.conic[1] += dl_dq * d.x * d.y;
                    slot.conic[2] += dl_dq * d.y * d.y;
                }
            }
            acc
        })
        .collect();
    let mut g2 = vec![Grad2d::default(); cache.projected.len()];
    for (rec, acc) in cache.tiles.iter().zip(&per_tile) {
        for (slot, &pi) in rec.list.iter().enumerate() {
            g2[pi].add(&acc[slot]);
        }
    }
    let mut grads = SplatGrads::zeros(inputs.len());
    for (p, g) in cache.projected.iter().zip(&g2) {
        chain_to_world(inputs, cam, p, g, &mut grads);
    }
    grads
}

fn chain_to_world(inputs: &SplatInputs, cam: &Camera, p: &Projected, g: &Grad2d, out: &mut SplatGrads) {
    let i = p.id;
    out.colors[i] += Vec3::from(g.color);
    out.opacities[i] += g.opacity;
    // conic = cov⁻¹  ⇒  dL/dcov = −conic · dL/dconic · conic
    let gconic = Mat2::new(g.conic[0], g.conic[1], g.conic[1], g.conic[2]);
    let gcov = -(p.conic * gconic * p.conic);
    let t = cam.world_to_camera(&inputs.means[i]);
    let w = cam.rotation;
    let j = cam.projection_jacobian(&t);
    let m: Matrix2x3<f64> = j * w;
    let (q, s) = (&inputs.rotations[i], &inputs.scales[i]);
    let rot = q.to_matrix();
    let cov3 = covariance_unchecked(q, s);
    let gcov3: Mat3 = m.transpose() * gcov * m;
    let gm: Matrix2x3<f64> = 2.0 * gcov * m * cov3;
    let gj: Matrix2x3<f64> = gm * w.transpose();
    // Σ3 = R S² Rᵀ
    let s2 = Mat3::from_diagonal(&s.component_mul(s));
    let grot = 2.0 * gcov3 * rot * s2;
    let inner = rot.transpose() * gcov3 * rot;
    out.scales[i] += Vec3::new(2.0 * s.x * inner[(0, 0)], 2.0 * s.y * inner[(1, 1)], 2.0 * s.z * inner[(2, 2)]);
    let gq = quat_matrix_vjp(q, &grot);
    for k in 0..4 {
        out.rotations[i][k] += gq[k];
    }
    // camera-space point: projection Jacobian, 2D mean and depth
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut gt = Vec3::zeros();
    gt.x += gj[(0, 2)] * (-fx * iz2);
    gt.y += gj[(1, 2)] * (-fy * iz2);
    gt.z += gj[(0, 0)] * (-fx * iz2) + gj[(1, 1)] * (-fy * iz2) + gj[(0, 2)] * (2.0 * fx * t.x * iz3)
        + gj[(1, 2)] * (2.0 * fy * t.y * iz3);
    gt.x += g.mean[0] * fx * iz;
    gt.y += g.mean[1] * fy * iz;
    gt.z += -g.mean[0] * fx * t.x * iz2 - g.mean[1] * fy * t.y * iz2;
    gt.z += g.depth;
    out.means[i] += w.transpose() * gt;
}

/// Rasterization recorded on a gradient tape.
///
/// Inputs: means n×3, unit quaternions n×4, scales n×3, opacities n×1,
/// colors n×3. Output: (W·H)×5 rows of r, g, b, depth, alpha.
pub struct RasterOp {
    pub camera: Camera,
    pub cache: Arc<RenderCache>,
}

impl RasterOp {
    pub fn targets_tensor(t: &RenderTargets) -> Tensor {
        let n = t.alpha.width * t.alpha.height;
        let mut out = Tensor::zeros(n, 5);
        for i in 0..n {
            let row = out.row_mut(i);
            row[..3].copy_from_slice(&t.color.data[3 * i..3 * i + 3]);
            row[3] = t.depth.data[i];
            row[4] = t.alpha.data[i];
        }
        out
    }
}

impl CustomOp for RasterOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let splats = SplatInputs::from_tensors(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let (w, h) = (self.camera.width, self.camera.height);
        let mut gc = ImageBuffer::new(w, h, 3);
        let mut gd = ImageBuffer::new(w, h, 1);
        let mut ga = ImageBuffer::new(w, h, 1);
        for i in 0..w * h {
            let row = grad.row(i);
            gc.data[3 * i..3 * i + 3].copy_from_slice(&row[..3]);
            gd.data[i] = row[3];
            ga.data[i] = row[4];
        }
        let g = render_backward(&splats, &self.camera, &self.cache, &gc, Some(&gd), Some(&ga));
        let n = splats.len();
        let pack3 = |v: &[Vec3]| Tensor::from_vec(n, 3, v.iter().flat_map(|x| [x.x, x.y, x.z]).collect());
        vec![
            Some(pack3(&g.means)),
            Some(Tensor::from_vec(n, 4, g.rotations.iter().flatten().copied().collect())),
            Some(pack3(&g.scales)),
            Some(Tensor::from_vec(n, 1, g.opacities)),
            Some(pack3(&g.colors)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::gradcheck::close;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(size: usize) -> Camera {
        let fx = size as f64;
        Camera::new(fx, fx, size as f64 / 2.0, size as f64 / 2.0, size, size, Mat3::identity(), Vec3::new(0.0, 0.0, 3.0))
            .unwrap()
    }

    /// World point projecting exactly onto the center of pixel (x, y) at camera depth z.
    fn on_pixel(c: &Camera, x: usize, y: usize, z: f64) -> Vec3 {
        let t = Vec3::new((x as f64 + 0.5 - c.cx) * z / c.fx, (y as f64 + 0.5 - c.cy) * z / c.fy, z);
        c.camera_to_world(&t)
    }

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize, alpha_max: f64) -> SplatInputs {
        let mut s = SplatInputs::default();
        for _ in 0..n {
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            s.push(
                Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)),
                Quat::from_axis_angle(axis, rng.random_range(-3.0..3.0)),
                Vec3::new(rng.random_range(0.03..0.3), rng.random_range(0.03..0.3), rng.random_range(0.01..0.2)),
                rng.random_range(0.05..alpha_max),
                Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
            );
        }
        s
    }

    #[test]
    fn single_opaque_gaussian_sets_pixel() {
        let c = cam(8);
        let mut s = SplatInputs::default();
        s.push(on_pixel(&c, 4, 3, 3.0), Quat::IDENTITY, Vec3::repeat(0.05), 1.0, Vec3::new(0.2, 0.7, 0.4));
        let (t, _) = render(&s, &c, &Vec3::zeros());
        assert_eq!([t.color.get(4, 3, 0), t.color.get(4, 3, 1), t.color.get(4, 3, 2)], [0.2, 0.7, 0.4]);
        assert_eq!(t.alpha.get(4, 3, 0), 1.0);
        assert_eq!(t.depth.get(4, 3, 0), 3.0);
    }

    #[test]
    fn two_half_opaque_gaussians() {
        let c = cam(8);
        let mut s = SplatInputs::default();
        s.push(on_pixel(&c, 2, 2, 4.0), Quat::IDENTITY, Vec3::repeat(0.05), 0.5, Vec3::new(0.0, 1.0, 0.0));
        s.push(on_pixel(&c, 2, 2, 2.0), Quat::IDENTITY, Vec3::repeat(0.05), 0.5, Vec3::new(1.0, 0.0, 0.0));
        let (t, _) = render(&s, &c, &Vec3::zeros());
        let px = [t.color.get(2, 2, 0), t.color.get(2, 2, 1), t.color.get(2, 2, 2)];
        assert_eq!(px, [0.5, 0.25, 0.0]);
        assert_eq!(t.alpha.get(2, 2, 0), 0.75);
    }

    #[test]
    fn empty_pixels_show_background() {
        let c = cam(8);
        let s = SplatInputs::default();
        let bg = Vec3::new(0.1, 0.2, 0.3);
        let (t, _) = render(&s, &c, &bg);
        assert_eq!(t.color.get(5, 5, 2), 0.3);
        assert_eq!(t.alpha.get(5, 5, 0), 0.0);
        assert_eq!(t.normal.get(5, 5, 0), 0.0);
    }

    #[test]
    fn tiles_equal_reference_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = rng.random_range(1..=20);
            let s = random_scene(&mut rng, n, 0.99);
            let c = cam(if trial % 2 == 0 { 8 } else { 21 });
            let bg = Vec3::new(0.0, 0.5, 1.0);
            let (t, _) = render(&s, &c, &bg);
            assert_eq!(t, render_reference(&s, &c, &bg), "trial {trial}");
        }
    }

    #[test]
    fn transmittance_telescopes_and_normals_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_scene(&mut rng, 40, 0.99);
        let c = cam(16);
        let white = Vec3::repeat(1.0);
        let mut s1 = s.clone();
        s1.colors.iter_mut().for_each(|v| *v = Vec3::zeros());
        // with black splats on a white background, color = T_final
        let (t, _) = render(&s1, &c, &white);
        let (tt, _) = render(&s, &c, &Vec3::zeros());
        for i in 0..256 {
            assert!((tt.alpha.data[i] + t.color.data[3 * i] - 1.0).abs() < 1e-6);
            if tt.alpha.data[i] > 0.5 {
                let n = Vec3::new(tt.normal.data[3 * i], tt.normal.data[3 * i + 1], tt.normal.data[3 * i + 2]);
                assert!((n.norm() - 1.0).abs() < 1e-3 || n.norm() == 0.0);
            }
        }
    }

    #[test]
    fn far_from_surface_gaussian_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut s = random_scene(&mut rng, 15, 0.9);
        let c = cam(16);
        let delta = 0.05;
        s.opacities[3] = crate::field::sdf_to_opacity(10.0 * delta, delta).unwrap();
        let (with, _) = render(&s, &c, &Vec3::zeros());
        let mut without = s.clone();
        for v in [&mut without.opacities] {
            v.remove(3);
        }
        without.means.remove(3);
        without.rotations.remove(3);
        without.scales.remove(3);
        without.colors.remove(3);
        let (base, _) = render(&without, &c, &Vec3::zeros());
        for (a, b) in with.color.data.iter().zip(&base.color.data) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    fn loss(s: &SplatInputs, c: &Camera, wc: &ImageBuffer, wd: &ImageBuffer, wa: &ImageBuffer) -> f64 {
        let (t, _) = render(s, c, &Vec3::new(0.3, 0.6, 0.9));
        let dot = |a: &ImageBuffer, b: &ImageBuffer| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
        dot(&t.color, wc) + dot(&t.depth, wd) + dot(&t.alpha, wa)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let c = cam(8);
        let mut checked = 0;
        for _ in 0..6 {
            let s = random_scene(&mut rng, 6, 0.8);
            let img = |ch: usize, rng: &mut ChaCha8Rng| {
                ImageBuffer::from_data(8, 8, ch, (0..64 * ch).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            };
            let (wc, wd, wa) = (img(3, &mut rng), img(1, &mut rng), img(1, &mut rng));
            let (_, cache) = render(&s, &c, &Vec3::new(0.3, 0.6, 0.9));
            let g = render_backward(&s, &c, &cache, &wc, Some(&wd), Some(&wa));
            let h = 1e-6;
            let mut check = |analytic: f64, f: &dyn Fn(&mut SplatInputs, f64)| {
                let mut p = s.clone();
                f(&mut p, h);
                let lp = loss(&p, &c, &wc, &wd, &wa);
                let mut m = s.clone();
                f(&mut m, -h);
                let lm = loss(&m, &c, &wc, &wd, &wa);
                let fd = (lp - lm) / (2.0 * h);
                assert!(close(analytic, fd, 1e-3, 1e-6), "analytic {analytic} vs fd {fd}");
                checked += 1;
            };
            for i in 0..s.len() {
                for k in 0..3 {
                    check(g.means[i][k], &|p, e| p.means[i][k] += e);
                    check(g.scales[i][k], &|p, e| p.scales[i][k] += e);
                    check(g.colors[i][k], &|p, e| p.colors[i][k] += e);
                }
                for k in 0..4 {
                    check(g.rotations[i][k], &|p, e| p.rotations[i].0[k] += e);
                }
                check(g.opacities[i], &|p, e| p.opacities[i] += e);
            }
        }
        assert!(checked > 300);
    }

    #[test]
    fn non_contributing_gaussian_gets_zero_gradient() {
        let c = cam(8);
        let mut s = SplatInputs::default();
        s.push(on_pixel(&c, 2, 2, 3.0), Quat::IDENTITY, Vec3::repeat(0.05), 0.7, Vec3::repeat(0.5));
        s.push(Vec3::new(0.0, 0.0, -5.0), Quat::IDENTITY, Vec3::repeat(0.05), 0.7, Vec3::repeat(0.5));
        s.push(on_pixel(&c, 6, 6, 3.0) + Vec3::new(5.0, 0.0, 0.0), Quat::IDENTITY, Vec3::repeat(0.05), 0.7, Vec3::repeat(0.5));
        let (_, cache) = render(&s, &c, &Vec3::zeros());
        let ones = ImageBuffer::filled(8, 8, 3, 1.0);
        let g = render_backward(&s, &c, &cache, &ones, None, None);
        assert!(g.colors[0].norm() > 0.0);
        assert_eq!(g.colors[1], Vec3::zeros());
        assert_eq!(g.colors[2], Vec3::zeros());
        assert_eq!(g.means[2], Vec3::zeros());
    }
}
