//! Training objectives: photometric (L1 + D-SSIM), SDF-center, Eikonal,
//! flattening, and their weighted total.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LodGrid;
use crate::scene::{ImageBuffer, Vec3};
use crate::tape::{CustomOp, GradientTape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// SDF-center weight.
    pub lambda_center: f64,
    /// Eikonal weight.
    pub lambda_eikonal: f64,
    /// Flattening weight.
    pub lambda_flatten: f64,
    /// D-SSIM share of the photometric loss.
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_center: 0.01, lambda_eikonal: 0.01, lambda_flatten: 100.0, lambda_ssim: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_center, self.lambda_eikonal, self.lambda_flatten, self.lambda_ssim];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("loss weights must be finite and non-negative".into()));
        }
        if self.lambda_ssim > 1.0 {
            return Err(Error::InvalidParameter("lambda_ssim must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scalar loss terms of one step. `flatten` already includes its weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub rgb: f64,
    pub flatten: f64,
    pub sdf_center: f64,
    pub eikonal: f64,
    pub total: f64,
    /// Gradient norms of rgb, flatten, weighted center and weighted eikonal terms, when computed.
    pub grad_norms: Option<[f64; 4]>,
}

impl LossReport {
    pub fn combine(rgb: f64, flatten: f64, sdf_center: f64, eikonal: f64, w: &LossWeights) -> LossReport {
        LossReport {
            rgb,
            flatten,
            sdf_center,
            eikonal,
            total: rgb + flatten + w.lambda_center * sdf_center + w.lambda_eikonal * eikonal,
            grad_norms: None,
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Window size used for an image; shrinks to the largest odd size that fits.
pub fn ssim_window(width: usize, height: usize) -> usize {
    let m = width.min(height).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Separable "valid" filtering of one plane (h×w) → (h−k+1)×(w−k+1).
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                tmp[(y + i) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

fn plane(data: &[f64], channels: usize, c: usize) -> Vec<f64> {
    data.iter().skip(c).step_by(channels).copied().collect()
}

/// Per-channel filtered statistics and SSIM map terms.
struct SsimStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    map: Vec<f64>,
    a1: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn ssim_stats(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64]) -> SsimStats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, k);
    let my = filter_valid(y, w, h, k);
    let exx = filter_valid(&xx, w, h, k);
    let eyy = filter_valid(&yy, w, h, k);
    let exy = filter_valid(&xy, w, h, k);
    let n = mx.len();
    let (mut map, mut a1, mut b1, mut b2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        a1[i] = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        b1[i] = ux * ux + uy * uy + SSIM_C1;
        b2[i] = sxx + syy + SSIM_C2;
        map[i] = a1[i] * a2 / (b1[i] * b2[i]);
    }
    SsimStats { mx, my, map, a1, b1, b2 }
}

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::InvalidInput(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean Gaussian-window SSIM over valid windows, averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    Ok(ssim_raw(&a.data, &b.data, a.width, a.height, a.channels))
}

fn ssim_raw(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> f64 {
    let k = gaussian_kernel(ssim_window(w, h), SSIM_SIGMA);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let s = ssim_stats(&plane(a, channels, c), &plane(b, channels, c), w, h, &k);
        total += s.map.iter().sum::<f64>();
        count += s.map.len();
    }
    total / count as f64
}

/// SSIM against a fixed target, differentiable in the first image.
struct SsimOp {
    target: Vec<f64>,
    width: usize,
    height: usize,
}

impl CustomOp for SsimOp {
    fn name(&self) -> &'static str {
        "ssim"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let ch = x.cols;
        let (w, h) = (self.width, self.height);
        let k = gaussian_kernel(ssim_window(w, h), SSIM_SIGMA);
        let mut gx = Tensor::zeros(x.rows, ch);
        let mut count = 0;
        let mut per_channel = Vec::new();
        for c in 0..ch {
            let xp = plane(&x.data, ch, c);
            let yp = plane(&self.target, ch, c);
            let s = ssim_stats(&xp, &yp, w, h, &k);
            count += s.map.len();
            per_channel.push((xp, yp, s));
        }
        let scale = grad.item() / count as f64;
        for (c, (xp, yp, s)) in per_channel.into_iter().enumerate() {
            let n = s.map.len();
            let (mut g_mx, mut g_exx, mut g_exy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let (ux, uy, m) = (s.mx[i], s.my[i], s.map[i]);
                let a2 = m * s.b1[i] * s.b2[i] / s.a1[i];
                let d_sxx = -m / s.b2[i];
                let d_sxy = 2.0 * s.a1[i] / (s.b1[i] * s.b2[i]);
                let d_ux = 2.0 * uy * a2 / (s.b1[i] * s.b2[i]) - m * 2.0 * ux / s.b1[i];
                g_mx[i] = scale * (d_ux - 2.0 * ux * d_sxx - uy * d_sxy);
                g_exx[i] = scale * d_sxx;
                g_exy[i] = scale * d_sxy;
            }
            let a = filter_valid_adjoint(&g_mx, w, h, &k);
            let b = filter_valid_adjoint(&g_exx, w, h, &k);
            let cxy = filter_valid_adjoint(&g_exy, w, h, &k);
            for p in 0..w * h {
                *gx.at_mut(p, c) = a[p] + 2.0 * xp[p] * b[p] + yp[p] * cxy[p];
            }
        }
        vec![Some(gx)]
    }
}

/// Image as an (W·H)×C tensor.
pub fn image_tensor(img: &ImageBuffer) -> Tensor {
    Tensor::from_vec(img.width * img.height, img.channels, img.data.clone())
}

/// Records `SSIM(x, target)` where `x` is an (W·H)×C tensor.
pub fn ssim_var(tape: &mut GradientTape, x: Var, target: &ImageBuffer) -> Var {
    let xv = tape.value(x);
    assert_eq!(xv.rows, target.width * target.height, "ssim pixel count");
    let value = ssim_raw(&xv.data, &target.data, target.width, target.height, target.channels);
    let op = SsimOp { target: target.data.clone(), width: target.width, height: target.height };
    tape.custom(Box::new(op), &[x], Tensor::scalar(value))
}

/// `(1−λ)·mean|x − t| + λ·(1 − SSIM(x, t))`.
pub fn rgb_loss(rendered: &ImageBuffer, truth: &ImageBuffer, lambda_ssim: f64) -> Result<f64> {
    check_pair(rendered, truth)?;
    let l1 = rendered.data.iter().zip(&truth.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / rendered.data.len() as f64;
    Ok((1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim(rendered, truth)?))
}

/// Tape version of [`rgb_loss`] for an (W·H)×3 rendered color tensor.
pub fn rgb_loss_var(tape: &mut GradientTape, rendered: Var, truth: &ImageBuffer, lambda_ssim: f64) -> Var {
    let t = tape.leaf(image_tensor(truth));
    let d = tape.sub(rendered, t);
    let a = tape.abs(d);
    let l1 = tape.mean(a);
    let l1w = tape.scale(l1, 1.0 - lambda_ssim);
    let s = ssim_var(tape, rendered, truth);
    let ds = tape.scale(s, -lambda_ssim);
    let sum = tape.add(l1w, ds);
    tape.add_scalar(sum, lambda_ssim)
}

/// Mean of `f²` over Gaussians whose opacity is at least `threshold`.
pub fn sdf_center_loss(sdf: &[f64], opacity: &[f64], threshold: f64) -> f64 {
    let sel: Vec<f64> = sdf.iter().zip(opacity).filter(|(_, &a)| a >= threshold).map(|(f, _)| f * f).collect();
    if sel.is_empty() {
        0.0
    } else {
        sel.iter().sum::<f64>() / sel.len() as f64
    }
}

pub fn sdf_center_var(tape: &mut GradientTape, sdf: Var, opacity: Var, threshold: f64) -> Var {
    let mask = tape.value(opacity).data.iter().map(|&a| a >= threshold).collect();
    let sq = tape.square(sdf);
    tape.masked_mean(sq, mask)
}

/// `mean (‖g‖ − 1)²` over rows of an n×3 gradient tensor.
pub fn eikonal_var(tape: &mut GradientTape, gradients: Var) -> Var {
    let n = tape.row_norm(gradients);
    let d = tape.add_scalar(n, -1.0);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// Eikonal loss of the field at explicit samples `(point, level)`.
pub fn eikonal_loss(field: &crate::field::NeuralField, grid: &LodGrid, samples: &[(Vec3, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("eikonal loss needs at least one sample".into()));
    }
    let mut total = 0.0;
    for (p, level) in samples {
        let g = field.spatial_gradient_batch(grid, std::slice::from_ref(p), *level)?[0];
        total += (g.norm() - 1.0).powi(2);
    }
    Ok(total / samples.len() as f64)
}

/// Draws Eikonal samples: half jittered Gaussian centers (σ = half a voxel),
/// half uniform in occupied cells. Jittered points that leave every occupied
/// cell are replaced by uniform draws. Returns `(point, cell)` pairs.
pub fn sample_eikonal_points(
    grid: &LodGrid,
    centers: &[(Vec3, usize)],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<(Vec3, usize)> {
    let mut out = Vec::with_capacity(n);
    if grid.num_cells() == 0 {
        return out;
    }
    let normal = rand_distr::StandardNormal;
    let jittered = if centers.is_empty() { 0 } else { n / 2 };
    for _ in 0..jittered {
        let (c, level) = centers[rng.random_range(0..centers.len())];
        let s = 0.5 * grid.voxel(level);
        let j = Vec3::new(rng.sample::<f64, _>(normal), rng.sample::<f64, _>(normal), rng.sample::<f64, _>(normal));
        let p = c + j * s;
        if let Ok(cell) = grid.locate(&p, level) {
            out.push((p, cell));
        }
    }
    while out.len() < n {
        let cell = rng.random_range(0..grid.num_cells());
        let c = grid.cell(cell);
        let s = grid.voxel(c.level);
        let u = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        out.push((c.center + u * s, cell));
    }
    out
}

/// `λ · mean_i min(s_i1, s_i2, s_i3)`.
pub fn flattening_loss(scales: &[Vec3], lambda: f64) -> f64 {
    if scales.is_empty() {
        return 0.0;
    }
    lambda * scales.iter().map(|s| s.min()).sum::<f64>() / scales.len() as f64
}

pub fn flattening_var(tape: &mut GradientTape, scales: Var, lambda: f64) -> Var {
    let m = tape.min_row(scales);
    let mean = tape.mean(m);
    tape.scale(mean, lambda)
}
