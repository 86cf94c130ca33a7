//! Neural SDF/radiance field: per-vertex features interpolated by inverse
//! distance weighting inside a cell, decoded by a small MLP.
//!
//! All evaluation paths go through the gradient tape so training, meshing,
//! growth and pruning see bit-identical values.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LodGrid;
use crate::optim::quantize;
use crate::scene::Vec3;
use crate::tape::{CustomOp, GradientTape, Tensor, Var};

/// Added to every IDW distance.
pub const IDW_EPS: f64 = 1e-8;

/// Names of the decoder tensors, in storage order.
pub const LAYER_NAMES: [&str; 10] = [
    "trunk0.weight",
    "trunk0.bias",
    "trunk1.weight",
    "trunk1.bias",
    "trunk2.weight",
    "trunk2.bias",
    "head0.weight",
    "head0.bias",
    "head1.weight",
    "head1.bias",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub softplus_beta: f64,
    pub view_encoding_degree: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { feature_dim: 16, hidden_width: 32, softplus_beta: 100.0, view_encoding_degree: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralField {
    pub config: FieldConfig,
    /// One row per grid vertex.
    pub features: Tensor,
    /// Iteration at which each vertex row was created.
    pub vertex_birth: Vec<usize>,
    /// Decoder tensors in [`LAYER_NAMES`] order; weights are `out × in`.
    pub layers: Vec<Tensor>,
    pub log_delta: f64,
}

/// Number of view-encoding channels for a spherical-harmonic degree.
pub fn view_encoding_width(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Real spherical harmonics of a unit direction up to `degree` (≤ 2).
pub fn view_encoding(d: &Vec3, degree: usize) -> Vec<f64> {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut out = vec![0.282_094_791_773_878_14];
    if degree >= 1 {
        let c1 = 0.488_602_511_902_919_9;
        out.extend_from_slice(&[-c1 * y, c1 * z, -c1 * x]);
    }
    if degree >= 2 {
        let c2 = 1.092_548_430_592_079_2;
        out.extend_from_slice(&[
            c2 * x * y,
            -c2 * y * z,
            0.315_391_565_252_520_05 * (3.0 * z * z - 1.0),
            -c2 * x * z,
            0.546_274_215_296_039_6 * (x * x - y * y),
        ]);
    }
    out
}

/// Jacobian rows `∂enc_k/∂(x, y, z)` of [`view_encoding`] at a unit direction.
fn view_encoding_jacobian(d: &Vec3, degree: usize) -> Vec<Vec3> {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut out = vec![Vec3::zeros()];
    if degree >= 1 {
        let c1 = 0.488_602_511_902_919_9;
        out.extend_from_slice(&[Vec3::new(0.0, -c1, 0.0), Vec3::new(0.0, 0.0, c1), Vec3::new(-c1, 0.0, 0.0)]);
    }
    if degree >= 2 {
        let c2 = 1.092_548_430_592_079_2;
        let c20 = 0.315_391_565_252_520_05;
        let c22 = 0.546_274_215_296_039_6;
        out.extend_from_slice(&[
            Vec3::new(c2 * y, c2 * x, 0.0),
            Vec3::new(0.0, -c2 * z, -c2 * y),
            Vec3::new(0.0, 0.0, 6.0 * c20 * z),
            Vec3::new(-c2 * z, 0.0, -c2 * x),
            Vec3::new(2.0 * c22 * x, -2.0 * c22 * y, 0.0),
        ]);
    }
    out
}

/// Encoding of unnormalized view vectors (n×3), differentiable in the vectors.
struct ViewEncodingOp {
    degree: usize,
}

impl CustomOp for ViewEncodingOp {
    fn name(&self) -> &'static str {
        "view_encoding"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let v = inputs[0];
        let mut g = Tensor::zeros(v.rows, 3);
        for r in 0..v.rows {
            let raw = point_row(v, r);
            let len = raw.norm();
            if !(len > 0.0) {
                continue;
            }
            let d = raw / len;
            let jac = view_encoding_jacobian(&d, self.degree);
            let gd = jac.iter().zip(grad.row(r)).fold(Vec3::zeros(), |a, (j, gk)| a + j * *gk);
            let gv = (gd - d * d.dot(&gd)) / len;
            g.row_mut(r).copy_from_slice(gv.as_slice());
        }
        vec![Some(g)]
    }
}

/// Records [`view_encoding`] of `normalize(v)` for every row of `v`.
pub fn view_encoding_var(tape: &mut GradientTape, v: Var, degree: usize) -> Var {
    let vv = tape.value(v);
    let width = view_encoding_width(degree);
    let mut out = Tensor::zeros(vv.rows, width);
    for r in 0..vv.rows {
        let raw = point_row(vv, r);
        let n = raw.norm();
        let d = if n > 0.0 { raw / n } else { Vec3::z() };
        out.row_mut(r).copy_from_slice(&view_encoding(&d, degree));
    }
    tape.custom(Box::new(ViewEncodingOp { degree }), &[v], out)
}

/// `exp(−f²/δ²)`.
pub fn sdf_to_opacity(f: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("bandwidth {delta} must be positive")));
    }
    Ok((-(f * f) / (delta * delta)).exp())
}

/// Normalized IDW weights of the 8 cell corners at `p`.
pub fn idw_weights(corners: &[Vec3; 8], p: &Vec3) -> [f64; 8] {
    let w = corners.map(|x| 1.0 / ((p - x).norm() + IDW_EPS));
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Normalized weights and their spatial derivatives `∂ŵ_k/∂p`.
pub fn idw_weights_with_grad(corners: &[Vec3; 8], p: &Vec3) -> ([f64; 8], [Vec3; 8]) {
    let mut w = [0.0; 8];
    let mut dw = [Vec3::zeros(); 8];
    for k in 0..8 {
        let r = p - corners[k];
        let d = r.norm();
        w[k] = 1.0 / (d + IDW_EPS);
        if d > 0.0 {
            dw[k] = -w[k] * w[k] * r / d;
        }
    }
    let s: f64 = w.iter().sum();
    let ds: Vec3 = dw.iter().sum();
    let wn = w.map(|v| v / s);
    let mut dwn = [Vec3::zeros(); 8];
    for k in 0..8 {
        dwn[k] = (dw[k] - wn[k] * ds) / s;
    }
    (wn, dwn)
}

/// Which table rows and corner positions each interpolated point uses.
#[derive(Clone, Debug, Default)]
pub struct Stencil {
    pub ids: Vec<[usize; 8]>,
    pub corners: Vec<[Vec3; 8]>,
}

impl Stencil {
    pub fn for_cells(grid: &LodGrid, cells: &[usize]) -> Stencil {
        Stencil {
            ids: cells.iter().map(|&c| grid.cell(c).vertex_ids).collect(),
            corners: cells.iter().map(|&c| grid.corner_positions(c)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn point_row(points: &Tensor, r: usize) -> Vec3 {
    Vec3::new(points.at(r, 0), points.at(r, 1), points.at(r, 2))
}

fn idw_forward(table: &Tensor, points: &Tensor, stencil: &Stencil) -> Tensor {
    let d = table.cols;
    let mut out = Tensor::zeros(points.rows, d);
    for r in 0..points.rows {
        let w = idw_weights(&stencil.corners[r], &point_row(points, r));
        let o = out.row_mut(r);
        for k in 0..8 {
            let f = table.row(stencil.ids[r][k]);
            for c in 0..d {
                o[c] += w[k] * f[c];
            }
        }
    }
    out
}

struct IdwOp {
    stencil: Arc<Stencil>,
}

impl CustomOp for IdwOp {
    fn name(&self) -> &'static str {
        "idw"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (table, points) = (inputs[0], inputs[1]);
        let d = table.cols;
        let mut g_table = Tensor::zeros(table.rows, d);
        let mut g_points = Tensor::zeros(points.rows, 3);
        for r in 0..points.rows {
            let (w, dw) = idw_weights_with_grad(&self.stencil.corners[r], &point_row(points, r));
            let g = grad.row(r);
            let mut gp = Vec3::zeros();
            for k in 0..8 {
                let id = self.stencil.ids[r][k];
                let f = table.row(id);
                let mut fg = 0.0;
                for c in 0..d {
                    fg += f[c] * g[c];
                }
                gp += dw[k] * fg;
                let gt = g_table.row_mut(id);
                for c in 0..d {
                    gt[c] += w[k] * g[c];
                }
            }
            g_points.row_mut(r).copy_from_slice(gp.as_slice());
        }
        vec![Some(g_table), Some(g_points)]
    }
}

/// `Σ_k coeff_k · table[id_k]` per row, differentiable in the table only.
struct IdwTangentOp {
    ids: Arc<Vec<[usize; 8]>>,
    coeffs: Vec<[f64; 8]>,
}

impl CustomOp for IdwTangentOp {
    fn name(&self) -> &'static str {
        "idw_tangent"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let table = inputs[0];
        let d = table.cols;
        let mut g_table = Tensor::zeros(table.rows, d);
        for r in 0..grad.rows {
            let g = grad.row(r);
            for k in 0..8 {
                let gt = g_table.row_mut(self.ids[r][k]);
                let c = self.coeffs[r][k];
                for j in 0..d {
                    gt[j] += c * g[j];
                }
            }
        }
        vec![Some(g_table)]
    }
}

/// Tape handles for every field parameter.
#[derive(Clone, Debug)]
pub struct FieldVars {
    pub features: Var,
    pub layers: Vec<Var>,
    pub log_delta: Var,
}

/// Decoder trunk outputs plus the pre-activations needed for spatial tangents.
#[derive(Clone, Copy, Debug)]
pub struct TrunkOut {
    pub sdf: Var,
    pub radiance: Var,
    z1: Var,
    z2: Var,
}

impl NeuralField {
    pub fn new(config: FieldConfig, num_vertices: usize, delta: f64, rng: &mut impl Rng) -> Result<NeuralField> {
        if config.feature_dim < 2 || config.hidden_width == 0 {
            return Err(Error::InvalidParameter("feature_dim must be ≥ 2 and hidden_width ≥ 1".into()));
        }
        if config.view_encoding_degree > 2 {
            return Err(Error::InvalidParameter("view encoding degree above 2 is not supported".into()));
        }
        if !(config.softplus_beta > 0.0) {
            return Err(Error::InvalidParameter("softplus beta must be positive".into()));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!("bandwidth {delta} must be positive")));
        }
        let (d, h) = (config.feature_dim, config.hidden_width);
        let head_in = d - 1 + view_encoding_width(config.view_encoding_degree);
        let shapes = [(h, d), (1, h), (h, h), (1, h), (d, h), (1, d), (h, head_in), (1, h), (3, h), (1, 3)];
        let layers = shapes
            .iter()
            .map(|&(rows, cols)| {
                if rows == 1 {
                    Tensor::zeros(1, cols)
                } else {
                    let std = 1.0 / (cols as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| quantize(dist.sample(rng))).collect())
                }
            })
            .collect();
        let mut field = NeuralField {
            config,
            features: Tensor::zeros(0, d),
            vertex_birth: Vec::new(),
            layers,
            log_delta: quantize(delta.ln()),
        };
        field.ensure_vertices(num_vertices, 0, rng);
        Ok(field)
    }

    pub fn delta(&self) -> f64 {
        self.log_delta.exp()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn num_vertices(&self) -> usize {
        self.features.rows
    }

    /// Appends noise-initialized feature rows until the table has `n` rows.
    pub fn ensure_vertices(&mut self, n: usize, birth: usize, rng: &mut impl Rng) {
        let d = self.features.cols;
        if n <= self.features.rows {
            return;
        }
        let dist = Normal::new(0.0, 0.01).expect("finite std");
        let extra = n - self.features.rows;
        self.features.data.extend((0..extra * d).map(|_| quantize(dist.sample(rng))));
        self.features.rows = n;
        self.vertex_birth.extend(std::iter::repeat_n(birth, extra));
    }

    /// Records all parameters as tape leaves.
    pub fn record(&self, tape: &mut GradientTape) -> FieldVars {
        FieldVars {
            features: tape.leaf(self.features.clone()),
            layers: self.layers.iter().map(|l| tape.leaf(l.clone())).collect(),
            log_delta: tape.leaf(Tensor::scalar(self.log_delta)),
        }
    }

    /// IDW-interpolated features for `points` (n×3).
    pub fn interpolate(&self, tape: &mut GradientTape, fv: &FieldVars, points: Var, stencil: Arc<Stencil>) -> Var {
        let value = idw_forward(tape.value(fv.features), tape.value(points), &stencil);
        tape.custom(Box::new(IdwOp { stencil }), &[fv.features, points], value)
    }

    /// Decoder trunk: feature → (sdf, radiance feature).
    pub fn trunk(&self, tape: &mut GradientTape, fv: &FieldVars, feat: Var) -> TrunkOut {
        let beta = self.config.softplus_beta;
        let l = &fv.layers;
        let z1 = tape.linear(feat, l[0], l[1]);
        let h1 = tape.softplus(z1, beta);
        let z2 = tape.linear(h1, l[2], l[3]);
        let h2 = tape.softplus(z2, beta);
        let out = tape.linear(h2, l[4], l[5]);
        let d = self.config.feature_dim;
        TrunkOut { sdf: tape.slice_cols(out, 0, 1), radiance: tape.slice_cols(out, 1, d - 1), z1, z2 }
    }

    /// Radiance head: (radiance feature, view encoding) → color logits (n×3).
    pub fn head(&self, tape: &mut GradientTape, fv: &FieldVars, radiance: Var, view_enc: Var) -> Var {
        let l = &fv.layers;
        let x = tape.concat_cols(&[radiance, view_enc]);
        let z = tape.linear(x, l[6], l[7]);
        let h = tape.softplus(z, self.config.softplus_beta);
        tape.linear(h, l[8], l[9])
    }

    /// `exp(−f² e^{−2 log δ})` for an n×1 sdf column.
    pub fn opacity(&self, tape: &mut GradientTape, fv: &FieldVars, sdf: Var) -> Var {
        let sq = tape.square(sdf);
        let m2 = tape.scale(fv.log_delta, -2.0);
        let inv_d2 = tape.exp(m2);
        let a = tape.mul_scalar(sq, inv_d2);
        let na = tape.scale(a, -1.0);
        tape.exp(na)
    }

    /// Spatial gradient `∇f` (n×3) at detached points, itself differentiable
    /// with respect to the field parameters.
    pub fn spatial_gradient(
        &self,
        tape: &mut GradientTape,
        fv: &FieldVars,
        points: &[Vec3],
        stencil: &Stencil,
        trunk: &TrunkOut,
    ) -> Var {
        let ids = Arc::new(stencil.ids.clone());
        let mut coeffs = [Vec::new(), Vec::new(), Vec::new()];
        for (r, p) in points.iter().enumerate() {
            let (_, dw) = idw_weights_with_grad(&stencil.corners[r], p);
            for (j, cj) in coeffs.iter_mut().enumerate() {
                cj.push(dw.map(|v| v[j]));
            }
        }
        let beta = self.config.softplus_beta;
        let l = &fv.layers;
        let s1 = tape.softplus_grad(trunk.z1, beta);
        let s2 = tape.softplus_grad(trunk.z2, beta);
        let w3_row = tape.slice_rows(l[4], 0, 1);
        let table = tape.value(fv.features).clone();
        let mut cols = Vec::with_capacity(3);
        for cj in coeffs {
            let mut value = Tensor::zeros(points.len(), table.cols);
            for (r, c) in cj.iter().enumerate() {
                let o = value.row_mut(r);
                for k in 0..8 {
                    let f = table.row(ids[r][k]);
                    for (oc, fc) in o.iter_mut().zip(f) {
                        *oc += c[k] * fc;
                    }
                }
            }
            let t = tape.custom(Box::new(IdwTangentOp { ids: ids.clone(), coeffs: cj }), &[fv.features], value);
            let dz1 = tape.matmul_t(t, l[0]);
            let dh1 = tape.mul(s1, dz1);
            let dz2 = tape.matmul_t(dh1, l[2]);
            let dh2 = tape.mul(s2, dz2);
            cols.push(tape.matmul_t(dh2, w3_row));
        }
        tape.concat_cols(&cols)
    }

    fn stencil_at(&self, grid: &LodGrid, points: &[Vec3], level: usize) -> Result<Stencil> {
        let cells = points.iter().map(|p| grid.locate(p, level)).collect::<Result<Vec<_>>>()?;
        Ok(Stencil::for_cells(grid, &cells))
    }

    /// Interpolated feature at `p` from the occupied cell containing it.
    pub fn interpolate_feature(&self, grid: &LodGrid, p: &Vec3, level: usize) -> Result<Vec<f64>> {
        let cell = grid.locate(p, level)?;
        let w = idw_weights(&grid.corner_positions(cell), p);
        let ids = grid.cell(cell).vertex_ids;
        let mut out = vec![0.0; self.feature_dim()];
        for k in 0..8 {
            for (o, f) in out.iter_mut().zip(self.features.row(ids[k])) {
                *o += w[k] * f;
            }
        }
        Ok(out)
    }

    /// Decodes one feature vector into (sdf, color in [0,1]).
    pub fn decode(&self, feature: &[f64], view_dir: &Vec3) -> (f64, Vec3) {
        let mut tape = GradientTape::new();
        let fv = self.record(&mut tape);
        let feat = tape.leaf(Tensor::from_vec(1, feature.len(), feature.to_vec()));
        let tr = self.trunk(&mut tape, &fv, feat);
        let enc = view_encoding(view_dir, self.config.view_encoding_degree);
        let enc = tape.leaf(Tensor::from_vec(1, enc.len(), enc));
        let logits = self.head(&mut tape, &fv, tr.radiance, enc);
        let color = tape.sigmoid(logits);
        let c = tape.value(color);
        (tape.value(tr.sdf).item(), Vec3::new(c.data[0], c.data[1], c.data[2]))
    }

    pub fn sdf_at(&self, grid: &LodGrid, p: &Vec3, level: usize) -> Result<f64> {
        Ok(self.sdf_batch(grid, std::slice::from_ref(p), level)?[0])
    }

    /// SDF at many points, each looked up in its containing cell at `level`.
    pub fn sdf_batch(&self, grid: &LodGrid, points: &[Vec3], level: usize) -> Result<Vec<f64>> {
        let stencil = self.stencil_at(grid, points, level)?;
        Ok(self.sdf_with_stencil(points, stencil))
    }

    /// SDF at points whose interpolation stencils are already known.
    pub fn sdf_with_stencil(&self, points: &[Vec3], stencil: Stencil) -> Vec<f64> {
        let mut tape = GradientTape::new();
        let fv = self.record(&mut tape);
        let pv = tape.leaf(points_tensor(points));
        let feat = self.interpolate(&mut tape, &fv, pv, Arc::new(stencil));
        let tr = self.trunk(&mut tape, &fv, feat);
        tape.value(tr.sdf).data.clone()
    }

    /// `∇f(p)` by reverse-mode differentiation with respect to the point.
    pub fn sdf_spatial_gradient(&self, grid: &LodGrid, p: &Vec3, level: usize) -> Result<Vec3> {
        let stencil = self.stencil_at(grid, std::slice::from_ref(p), level)?;
        let mut tape = GradientTape::new();
        let fv = self.record(&mut tape);
        let pv = tape.leaf(points_tensor(std::slice::from_ref(p)));
        let feat = self.interpolate(&mut tape, &fv, pv, Arc::new(stencil));
        let tr = self.trunk(&mut tape, &fv, feat);
        let g = tape.backward(tr.sdf)?.wrt(pv);
        Ok(Vec3::new(g.data[0], g.data[1], g.data[2]))
    }

    /// Spatial gradients at many points via the forward-tangent graph.
    pub fn spatial_gradient_batch(&self, grid: &LodGrid, points: &[Vec3], level: usize) -> Result<Vec<Vec3>> {
        let stencil = self.stencil_at(grid, points, level)?;
        let mut tape = GradientTape::new();
        let fv = self.record(&mut tape);
        let pv = tape.leaf(points_tensor(points));
        let st = Arc::new(stencil);
        let feat = self.interpolate(&mut tape, &fv, pv, st.clone());
        let tr = self.trunk(&mut tape, &fv, feat);
        let g = self.spatial_gradient(&mut tape, &fv, points, &st, &tr);
        let gv = tape.value(g);
        Ok((0..points.len()).map(|r| Vec3::new(gv.at(r, 0), gv.at(r, 1), gv.at(r, 2))).collect())
    }
}

pub fn points_tensor(points: &[Vec3]) -> Tensor {
    Tensor::from_vec(points.len(), 3, points.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
}
