//! Geometric records shared by every stage: Gaussian primitives, pinhole
//! cameras, image buffers, and the rotation/scale covariance parameterization.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat2 = Matrix2<f64>;

/// Gaussians closer than this (camera-space z) are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Screen-space low-pass added to the diagonal of every projected covariance (px²).
pub const COV2D_REGULARIZER: f64 = 0.3;

const QUAT_NORM_TOL: f64 = 1e-6;

/// Rotation quaternion stored as (w, x, y, z), right-handed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Quat([c, a.x * s, a.y * s, a.z * s])
    }

    /// Quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &Mat3) -> Quat {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            [
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            ]
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            [
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            ]
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            [
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            ]
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            [
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            ]
        };
        Quat(q).normalized()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat(self.0.map(|v| v / n))
    }

    /// Hamilton product `self * other`.
    pub fn mul(&self, other: &Quat) -> Quat {
        let [w1, x1, y1, z1] = self.0;
        let [w2, x2, y2, z2] = other.0;
        Quat([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
    }

    /// Rotation matrix of a unit quaternion (no normalization applied).
    pub fn to_matrix(&self) -> Mat3 {
        let [w, x, y, z] = self.0;
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }
}

/// Pulls a gradient on the rotation matrix back to the quaternion components
/// of [`Quat::to_matrix`].
pub fn quat_matrix_vjp(q: &Quat, d_rot: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q.0;
    let dw = Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Mat3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Mat3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Mat3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    [
        dw.component_mul(d_rot).sum(),
        dx.component_mul(d_rot).sum(),
        dy.component_mul(d_rot).sum(),
        dz.component_mul(d_rot).sum(),
    ]
}

/// Builds `R diag(s)² Rᵀ` from a unit quaternion and positive scales.
pub fn covariance_from_params(q: &Quat, s: &Vec3) -> Result<Mat3> {
    if (q.norm() - 1.0).abs() > QUAT_NORM_TOL {
        return Err(Error::InvalidParameter(format!(
            "quaternion norm {} is not 1",
            q.norm()
        )));
    }
    if s.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter(format!("scales {s:?} must be positive")));
    }
    Ok(covariance_unchecked(q, s))
}

pub(crate) fn covariance_unchecked(q: &Quat, s: &Vec3) -> Mat3 {
    let r = q.to_matrix();
    let s2 = Mat3::from_diagonal(&s.component_mul(s));
    r * s2 * r.transpose()
}

/// One anisotropic splat. Opacity is never stored; it follows from `sdf`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vec3,
    pub rotation: Quat,
    pub scales: Vec3,
    /// Linear RGB in [0, 1].
    pub color: Vec3,
    pub sdf: f64,
    pub level: usize,
    pub birth_iteration: usize,
}

impl GaussianPrimitive {
    pub fn validate(&self) -> Result<()> {
        covariance_from_params(&self.rotation, &self.scales).map(|_| ())
    }

    pub fn covariance(&self) -> Mat3 {
        covariance_unchecked(&self.rotation, &self.scales)
    }

    /// World-space axis of the smallest scale (ties go to the lowest index).
    pub fn normal(&self) -> Vec3 {
        let r = self.rotation.to_matrix();
        r.column(smallest_axis(&self.scales)).into_owned()
    }
}

pub(crate) fn smallest_axis(s: &Vec3) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if s[k] < s[best] {
            best = k;
        }
    }
    best
}

/// Pinhole camera, OpenCV convention (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Camera> {
        let cam = Camera { fx, fy, cx, cy, width, height, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidParameter("principal point outside the image".into()));
        }
        let err = (self.rotation * self.rotation.transpose() - Mat3::identity()).abs().max();
        if err > 1e-6 || self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidParameter("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` only needs to be non-parallel
    /// to the viewing direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fx: f64, width: usize, height: usize) -> Result<Camera> {
        let forward = (target - eye).normalize();
        let down = -up;
        let right = down.cross(&forward);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidParameter("up vector parallel to viewing direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            fx,
            fx,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pixel coordinates of a camera-space point.
    pub fn project_camera_point(&self, t: &Vec3) -> Vec2 {
        Vec2::new(self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy)
    }

    /// Unit world-space ray direction through continuous pixel coordinates.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d_cam).normalize()
    }

    /// Jacobian of the pinhole projection at a camera-space point.
    pub fn projection_jacobian(&self, t: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / t.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * t.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * t.y * iz * iz,
        )
    }
}

/// Row-major image of 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> ImageBuffer {
        ImageBuffer { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> ImageBuffer {
        ImageBuffer { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<ImageBuffer> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidInput(format!(
                "image data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        Ok(ImageBuffer { width, height, channels, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Screen-space footprint of a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vec2,
    pub cov2d: Mat2,
    pub depth: f64,
}

/// EWA projection of a Gaussian; `None` when the center is behind the near plane.
pub fn project_gaussian(g: &GaussianPrimitive, cam: &Camera) -> Option<ProjectedGaussian> {
    project_center_cov(&g.center, &g.covariance(), cam)
}

pub(crate) fn project_center_cov(center: &Vec3, cov: &Mat3, cam: &Camera) -> Option<ProjectedGaussian> {
    let t = cam.world_to_camera(center);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let m = cam.projection_jacobian(&t) * cam.rotation;
    let cov2d = m * cov * m.transpose() + Mat2::identity() * COV2D_REGULARIZER;
    Some(ProjectedGaussian { mean2d: cam.project_camera_point(&t), cov2d, depth: t.z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn axis_cam(fx: f64, w: usize) -> Camera {
        Camera::new(fx, fx, w as f64 / 2.0, w as f64 / 2.0, w, w, Mat3::identity(), Vec3::zeros()).unwrap()
    }

    #[test]
    fn covariance_identity_rotation() {
        let c = covariance_from_params(&Quat::IDENTITY, &Vec3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(c, Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 9.0)));
        let c = covariance_from_params(&Quat::IDENTITY, &Vec3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(c, Mat3::identity());
    }

    #[test]
    fn covariance_quarter_turn_about_z() {
        let q = Quat::from_axis_angle(Vec3::z(), std::f64::consts::FRAC_PI_2);
        let c = covariance_from_params(&q, &Vec3::new(2.0, 1.0, 1.0)).unwrap();
        // brute-force R diag(4,1,1) Rᵀ with R the exact quarter turn
        let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let mut expect = Mat3::zeros();
        let d = [4.0, 1.0, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    expect[(i, j)] += r[(i, k)] * d[k] * r[(j, k)];
                }
            }
        }
        assert_relative_eq!(c, expect, epsilon = 1e-12);
        assert_relative_eq!(c, Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0)), epsilon = 1e-12);
    }

    #[test]
    fn covariance_rejects_bad_params() {
        assert!(covariance_from_params(&Quat([1.0, 0.1, 0.0, 0.0]), &Vec3::repeat(1.0)).is_err());
        assert!(covariance_from_params(&Quat::IDENTITY, &Vec3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn projection_on_axis() {
        let cam = axis_cam(100.0, 100);
        let g = GaussianPrimitive {
            center: Vec3::new(0.0, 0.0, 1.0),
            rotation: Quat::IDENTITY,
            scales: Vec3::repeat(0.1),
            color: Vec3::zeros(),
            sdf: 0.0,
            level: 0,
            birth_iteration: 0,
        };
        let p = project_gaussian(&g, &cam).unwrap();
        assert_eq!(p.mean2d, Vec2::new(50.0, 50.0));
        assert_eq!(p.depth, 1.0);
    }

    #[test]
    fn projection_isotropic_covariance() {
        let cam = axis_cam(100.0, 100);
        let (sigma, d) = (0.05, 2.0);
        let g = GaussianPrimitive {
            center: Vec3::new(0.0, 0.0, d),
            rotation: Quat::IDENTITY,
            scales: Vec3::repeat(sigma),
            color: Vec3::zeros(),
            sdf: 0.0,
            level: 0,
            birth_iteration: 0,
        };
        let p = project_gaussian(&g, &cam).unwrap();
        let e = (100.0 * sigma / d).powi(2) + 0.3;
        assert_relative_eq!(p.cov2d, Mat2::new(e, 0.0, 0.0, e), epsilon = 1e-12);
    }

    #[test]
    fn projection_culls_behind_camera() {
        let cam = axis_cam(100.0, 100);
        let g = GaussianPrimitive {
            center: Vec3::new(0.0, 0.0, -1.0),
            rotation: Quat::IDENTITY,
            scales: Vec3::repeat(0.1),
            color: Vec3::zeros(),
            sdf: 0.0,
            level: 0,
            birth_iteration: 0,
        };
        assert!(project_gaussian(&g, &cam).is_none());
    }

    #[test]
    fn look_at_orientation() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 50.0, 64, 64).unwrap();
        let t = cam.world_to_camera(&Vec3::zeros());
        assert_relative_eq!(t, Vec3::new(0.0, 0.0, 3.0), epsilon = 1e-12);
        assert_relative_eq!(cam.center(), Vec3::new(0.0, 0.0, 3.0), epsilon = 1e-12);
        // world +y is up, so it projects above the image center
        let up = cam.project_camera_point(&cam.world_to_camera(&Vec3::new(0.0, 0.5, 0.0)));
        assert!(up.y < 32.0);
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("nonzero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
            .prop_map(|(a, b, c, d)| Quat([a, b, c, d]).normalized())
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_pd(q in arb_quat(), s in (0.01f64..3.0, 0.01f64..3.0, 0.01f64..3.0)) {
            let s = Vec3::new(s.0, s.1, s.2);
            let c = covariance_from_params(&q, &s).unwrap();
            prop_assert!((c - c.transpose()).abs().max() < 1e-12);
            let mut eig: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut want = vec![s.x * s.x, s.y * s.y, s.z * s.z];
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (a, b) in eig.iter().zip(&want) {
                prop_assert!(*a > 0.0);
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + b));
            }
        }

        #[test]
        fn principal_axis_spin_keeps_spectrum(q in arb_quat(), angle in -3.0f64..3.0, axis in 0usize..3) {
            let s = Vec3::new(0.3, 0.7, 1.1);
            let c0 = covariance_from_params(&q, &s).unwrap();
            let mut e = Vec3::zeros();
            e[axis] = 1.0;
            let q1 = q.mul(&Quat::from_axis_angle(e, angle)).normalized();
            let c1 = covariance_from_params(&q1, &s).unwrap();
            let mut a: Vec<f64> = c0.symmetric_eigenvalues().iter().copied().collect();
            let mut b: Vec<f64> = c1.symmetric_eigenvalues().iter().copied().collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn projected_mean_is_pinhole(px in -0.5f64..0.5, py in -0.5f64..0.5, pz in 0.5f64..4.0) {
            let cam = Camera::look_at(Vec3::new(0.3, -0.2, -3.0), Vec3::zeros(), Vec3::y(), 70.0, 64, 48).unwrap();
            let g = GaussianPrimitive {
                center: Vec3::new(px, py, pz - 2.0),
                rotation: Quat::IDENTITY,
                scales: Vec3::repeat(0.1),
                color: Vec3::zeros(),
                sdf: 0.0,
                level: 0,
                birth_iteration: 0,
            };
            let proj = project_gaussian(&g, &cam).unwrap();
            // independent pinhole: camera basis vectors from the rotation rows
            let rel = g.center - cam.center();
            let x = cam.rotation.row(0).transpose().dot(&rel);
            let y = cam.rotation.row(1).transpose().dot(&rel);
            let z = cam.rotation.row(2).transpose().dot(&rel);
            prop_assert!((proj.mean2d.x - (70.0 * x / z + 32.0)).abs() < 1e-9);
            prop_assert!((proj.mean2d.y - (70.0 * y / z + 24.0)).abs() < 1e-9);
        }
    }
}
