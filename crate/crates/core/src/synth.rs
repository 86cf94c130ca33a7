//! Analytic-SDF scenes, sphere-traced reference renders and synthetic datasets.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Bounds;
use crate::scene::{Camera, ImageBuffer, Vec3};
use crate::seed::substream;

pub const HIT_EPS: f64 = 1e-5;
pub const NORMAL_STEP: f64 = 1e-5;
const MAX_MARCH_STEPS: usize = 2048;
/// Horizontal field of view of generated cameras, in degrees.
pub const CAMERA_FOV_DEG: f64 = 50.0;
const AMBIENT: f64 = 0.15;
const LIGHTS: [([f64; 3], f64); 2] = [([0.577_350_269_189_625_8, 0.577_350_269_189_625_8, 0.577_350_269_189_625_8], 0.75), ([-0.8, -0.3, -0.52], 0.45)];

/// Closed-form signed distance primitives and their combinations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sdf {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half: [f64; 3] },
    Torus { center: [f64; 3], major: f64, minor: f64 },
    Union(Vec<Sdf>),
    Intersection(Vec<Sdf>),
}

impl Sdf {
    pub fn eval(&self, p: &Vec3) -> f64 {
        match self {
            Sdf::Sphere { center, radius } => (p - Vec3::from(*center)).norm() - radius,
            Sdf::Box { center, half } => {
                let q = (p - Vec3::from(*center)).abs() - Vec3::from(*half);
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
            Sdf::Torus { center, major, minor } => {
                let d = p - Vec3::from(*center);
                let ring = (d.x * d.x + d.y * d.y).sqrt() - major;
                (ring * ring + d.z * d.z).sqrt() - minor
            }
            Sdf::Union(parts) => parts.iter().map(|s| s.eval(p)).fold(f64::INFINITY, f64::min),
            Sdf::Intersection(parts) => parts.iter().map(|s| s.eval(p)).fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Normalized central-difference gradient.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let h = NORMAL_STEP;
        let g = Vec3::from_fn(|k, _| {
            let mut e = Vec3::zeros();
            e[k] = h;
            (self.eval(&(p + e)) - self.eval(&(p - e))) / (2.0 * h)
        });
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            Vec3::z()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub name: String,
    pub sdf: Sdf,
    /// Radius of a sphere around the origin enclosing the geometry.
    pub radius: f64,
    /// Geometry bounding box padded by 20%.
    pub bounds: Bounds,
}

/// Smooth position-dependent albedo in [0.1, 0.9].
pub fn albedo(p: &Vec3) -> Vec3 {
    Vec3::new(0.55 + 0.3 * (2.0 * p.x).sin(), 0.5 + 0.3 * (2.0 * p.y + 1.0).sin(), 0.45 + 0.3 * (2.0 * p.z + 2.0).sin())
}

/// Lambertian shading from two fixed directional lights plus ambient.
pub fn shade(p: &Vec3, n: &Vec3) -> Vec3 {
    let mut light = AMBIENT;
    for (dir, intensity) in LIGHTS {
        light += intensity * n.dot(&Vec3::from(dir).normalize()).max(0.0);
    }
    (albedo(p) * light).map(|c| c.clamp(0.0, 1.0))
}

fn padded(lo: Vec3, hi: Vec3) -> Bounds {
    let pad = (hi - lo) * 0.2;
    Bounds { min: (lo - pad).into(), max: (hi + pad).into() }
}

impl AnalyticScene {
    pub fn sphere(radius: f64) -> AnalyticScene {
        AnalyticScene {
            name: "sphere".into(),
            sdf: Sdf::Sphere { center: [0.0; 3], radius },
            radius,
            bounds: padded(Vec3::repeat(-radius), Vec3::repeat(radius)),
        }
    }

    pub fn cube(half: f64) -> AnalyticScene {
        AnalyticScene {
            name: "box".into(),
            sdf: Sdf::Box { center: [0.0; 3], half: [half; 3] },
            radius: half * 3f64.sqrt(),
            bounds: padded(Vec3::repeat(-half), Vec3::repeat(half)),
        }
    }

    pub fn torus(major: f64, minor: f64) -> AnalyticScene {
        let r = major + minor;
        AnalyticScene {
            name: "torus".into(),
            sdf: Sdf::Torus { center: [0.0; 3], major, minor },
            radius: r,
            bounds: padded(Vec3::new(-r, -r, -minor), Vec3::new(r, r, minor)),
        }
    }

    /// A sphere resting on a box slab, joined by union.
    pub fn composite() -> AnalyticScene {
        AnalyticScene {
            name: "composite".into(),
            sdf: Sdf::Union(vec![
                Sdf::Sphere { center: [0.0, 0.0, 0.3], radius: 0.6 },
                Sdf::Box { center: [0.0, 0.0, -0.5], half: [0.9, 0.9, 0.2] },
            ]),
            radius: (0.9f64 * 0.9 * 2.0 + 0.9 * 0.9).sqrt(),
            bounds: padded(Vec3::new(-0.9, -0.9, -0.7), Vec3::new(0.9, 0.9, 0.9)),
        }
    }

    pub fn by_name(name: &str) -> Result<AnalyticScene> {
        match name {
            "sphere" => Ok(AnalyticScene::sphere(1.0)),
            "box" => Ok(AnalyticScene::cube(0.8)),
            "torus" => Ok(AnalyticScene::torus(0.8, 0.3)),
            "composite" => Ok(AnalyticScene::composite()),
            other => Err(Error::InvalidParameter(format!("unknown scene '{other}' (sphere, box, torus, composite)"))),
        }
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.sdf.eval(p)
    }

    /// Points on the surface. Exact and area-uniform for a lone sphere;
    /// otherwise band points projected onto the zero set.
    pub fn surface_samples(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        let normal = rand_distr::StandardNormal;
        if let Sdf::Sphere { center, radius } = &self.sdf {
            return (0..n)
                .map(|_| {
                    let v = Vec3::new(rng.sample::<f64, _>(normal), rng.sample::<f64, _>(normal), rng.sample::<f64, _>(normal));
                    Vec3::from(*center) + v.normalize() * *radius
                })
                .collect();
        }
        let lo = Vec3::from(self.bounds.min);
        let ext = self.bounds.extent();
        let band = 0.02 * self.radius;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = lo + Vec3::new(rng.random::<f64>() * ext.x, rng.random::<f64>() * ext.y, rng.random::<f64>() * ext.z);
            if self.sdf(&p).abs() > band {
                continue;
            }
            let mut q = p;
            for _ in 0..20 {
                let f = self.sdf(&q);
                if f.abs() < 1e-9 {
                    break;
                }
                q -= self.sdf.normal(&q) * f;
            }
            if self.sdf(&q).abs() < 1e-6 {
                out.push(q);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub hit: bool,
    pub t: f64,
    pub normal: Vec3,
}

impl Hit {
    const MISS: Hit = Hit { hit: false, t: f64::INFINITY, normal: Vec3::new(0.0, 0.0, 0.0) };
}

/// Sphere tracing along a unit direction.
pub fn raymarch(scene: &AnalyticScene, origin: &Vec3, dir: &Vec3, t_max: f64) -> Hit {
    let mut t = 0.0;
    for _ in 0..MAX_MARCH_STEPS {
        let p = origin + dir * t;
        let d = scene.sdf(&p);
        if d.abs() < HIT_EPS {
            return Hit { hit: true, t, normal: scene.sdf.normal(&p) };
        }
        t += d;
        if t > t_max || t < 0.0 {
            return Hit::MISS;
        }
    }
    Hit::MISS
}

/// Exact color, camera-space depth (+∞ on miss) and world normal for every pixel.
pub fn render_oracle(scene: &AnalyticScene, cam: &Camera, background: &Vec3) -> (ImageBuffer, ImageBuffer, ImageBuffer) {
    let (w, h) = (cam.width, cam.height);
    let origin = cam.center();
    let forward = cam.rotation.row(2).transpose();
    let t_max = origin.norm() + 4.0 * scene.radius;
    let pixels: Vec<(Vec3, f64, Vec3)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let dir = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            let hit = raymarch(scene, &origin, &dir, t_max);
            if hit.hit {
                let p = origin + dir * hit.t;
                (shade(&p, &hit.normal), hit.t * dir.dot(&forward), hit.normal)
            } else {
                (*background, f64::INFINITY, Vec3::zeros())
            }
        })
        .collect();
    let mut color = ImageBuffer::new(w, h, 3);
    let mut depth = ImageBuffer::new(w, h, 1);
    let mut normal = ImageBuffer::new(w, h, 3);
    for (i, (c, d, n)) in pixels.into_iter().enumerate() {
        color.data[3 * i..3 * i + 3].copy_from_slice(c.as_slice());
        depth.data[i] = d;
        normal.data[3 * i..3 * i + 3].copy_from_slice(n.as_slice());
    }
    (color, depth, normal)
}

/// `n` points on a Fibonacci sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Cameras on a sphere of `distance` around the origin, all looking at it.
pub fn camera_rig(n: usize, distance: f64, image_size: usize) -> Result<Vec<Camera>> {
    let fx = image_size as f64 / 2.0 / (CAMERA_FOV_DEG.to_radians() / 2.0).tan();
    fibonacci_sphere(n)
        .into_iter()
        .map(|d| {
            let up = if d.z.abs() > 0.9 { Vec3::y() } else { Vec3::z() };
            Camera::look_at(d * distance, Vec3::zeros(), up, fx, image_size, image_size)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub scene: AnalyticScene,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
    pub depths: Vec<ImageBuffer>,
    pub normals: Vec<ImageBuffer>,
    pub sparse_points: Vec<Vec3>,
    pub sparse_colors: Vec<Vec3>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl SyntheticDataset {
    pub fn train_cameras(&self) -> Vec<Camera> {
        self.train.iter().map(|&i| self.cameras[i].clone()).collect()
    }
}

/// Every eighth view (starting with the first) is held out.
pub fn split(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % 8 != 0)
}

pub fn generate_dataset(
    scene: &AnalyticScene,
    n_cameras: usize,
    image_size: usize,
    n_sparse_points: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n_cameras < 2 {
        return Err(Error::InvalidInput("at least two cameras are required".into()));
    }
    if image_size < 4 {
        return Err(Error::InvalidInput("image size must be at least 4".into()));
    }
    if n_sparse_points == 0 {
        return Err(Error::InvalidInput("at least one sparse point is required".into()));
    }
    let cameras = camera_rig(n_cameras, 2.5 * scene.radius, image_size)?;
    let mut images = Vec::new();
    let mut depths = Vec::new();
    let mut normals = Vec::new();
    for cam in &cameras {
        let (c, d, n) = render_oracle(scene, cam, &Vec3::zeros());
        images.push(c);
        depths.push(d);
        normals.push(n);
    }
    let mut rng = substream(seed, "dataset");
    let mut sparse_points = Vec::with_capacity(n_sparse_points);
    let mut sparse_colors = Vec::with_capacity(n_sparse_points);
    let mut attempts = 0usize;
    while sparse_points.len() < n_sparse_points {
        attempts += 1;
        if attempts > 1000 * n_sparse_points {
            return Err(Error::InvalidInput("cameras see no surface to sample".into()));
        }
        let cam = &cameras[rng.random_range(0..cameras.len())];
        let u = rng.random_range(0.0..cam.width as f64);
        let v = rng.random_range(0.0..cam.height as f64);
        let origin = cam.center();
        let dir = cam.ray_direction(u, v);
        let hit = raymarch(scene, &origin, &dir, origin.norm() + 4.0 * scene.radius);
        if hit.hit {
            let p = origin + dir * hit.t;
            sparse_points.push(p);
            sparse_colors.push(shade(&p, &hit.normal));
        }
    }
    let (train, eval) = split(n_cameras);
    Ok(SyntheticDataset { scene: scene.clone(), cameras, images, depths, normals, sparse_points, sparse_colors, train, eval })
}

/// Keeps only sparse points with z > 0; views are unchanged.
pub fn half_coverage_variant(dataset: &SyntheticDataset) -> SyntheticDataset {
    let mut out = dataset.clone();
    let keep: Vec<bool> = dataset.sparse_points.iter().map(|p| p.z > 0.0).collect();
    out.sparse_points = dataset.sparse_points.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
    out.sparse_colors = dataset.sparse_colors.iter().zip(&keep).filter(|(_, &k)| k).map(|(c, _)| *c).collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn raymarch_examples() {
        let s = AnalyticScene::sphere(1.0);
        let hit = raymarch(&s, &Vec3::new(0.0, 0.0, 3.0), &Vec3::new(0.0, 0.0, -1.0), 10.0);
        assert!(hit.hit);
        assert!((hit.t - 2.0).abs() < 1e-5);
        assert!((hit.normal - Vec3::z()).norm() < 1e-6);
        let miss = raymarch(&s, &Vec3::new(1.001, 0.0, 3.0), &Vec3::new(0.0, 0.0, -1.0), 10.0);
        assert!(!miss.hit);
        let b = AnalyticScene::cube(0.8);
        for axis in 0..3 {
            let mut o = Vec3::zeros();
            o[axis] = 3.0;
            let hit = raymarch(&b, &o, &(-o / 3.0), 10.0);
            // slab test: the ray enters the box at coordinate +0.8
            assert!(hit.hit);
            assert!((hit.t - 2.2).abs() < 1e-4, "{}", hit.t);
        }
    }

    #[test]
    fn hits_lie_on_surface_with_unit_normals() {
        for scene in [AnalyticScene::sphere(1.0), AnalyticScene::torus(0.8, 0.3), AnalyticScene::composite()] {
            let cams = camera_rig(3, 2.5 * scene.radius, 16).unwrap();
            for cam in &cams {
                let (_, depth, normal) = render_oracle(&scene, cam, &Vec3::zeros());
                let forward = cam.rotation.row(2).transpose();
                for y in 0..16 {
                    for x in 0..16 {
                        let d = depth.get(x, y, 0);
                        if !d.is_finite() {
                            continue;
                        }
                        let dir = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
                        let p = cam.center() + dir * (d / dir.dot(&forward));
                        assert!(scene.sdf(&p).abs() < 1e-5 + 1e-12);
                        let n = Vec3::new(normal.get(x, y, 0), normal.get(x, y, 1), normal.get(x, y, 2));
                        assert!((n.norm() - 1.0).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn sphere_dataset_contract() {
        let s = AnalyticScene::sphere(1.0);
        let ds = generate_dataset(&s, 16, 64, 500, 3).unwrap();
        assert_eq!(ds.images.len(), 16);
        assert_eq!(ds.eval.len(), 2);
        assert_eq!(ds.train.len(), 14);
        for p in &ds.sparse_points {
            assert!((p.norm() - 1.0).abs() <= 1e-4);
        }
        for (cam, depth) in ds.cameras.iter().zip(&ds.depths) {
            // analytic ray-sphere intersection of the pixel ray next to the image center
            let dir = cam.ray_direction(32.5, 32.5);
            let o = cam.center();
            let b = o.dot(&dir);
            let t = -b - (b * b - (o.norm_squared() - 1.0)).sqrt();
            let z = t * dir.dot(&cam.rotation.row(2).transpose());
            assert!((depth.get(32, 32, 0) - z).abs() < 1e-4);
        }
        let again = generate_dataset(&s, 16, 64, 500, 3).unwrap();
        assert_eq!(ds, again);
        assert!(generate_dataset(&s, 1, 64, 10, 3).is_err());
    }

    #[test]
    fn half_coverage_keeps_views() {
        let s = AnalyticScene::sphere(1.0);
        let ds = generate_dataset(&s, 8, 16, 300, 1).unwrap();
        assert!(ds.sparse_points.iter().any(|p| p.z < 0.0));
        let half = half_coverage_variant(&ds);
        assert!(half.sparse_points.iter().all(|p| p.z > 0.0));
        assert_eq!(half.cameras.len(), ds.cameras.len());
        assert_eq!(half.images, ds.images);
    }

    #[test]
    fn sphere_surface_samples_are_exact() {
        let s = AnalyticScene::sphere(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in s.surface_samples(100, &mut rng) {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
        let t = AnalyticScene::torus(0.8, 0.3);
        for p in t.surface_samples(50, &mut rng) {
            assert!(t.sdf(&p).abs() < 1e-6);
        }
    }
}
