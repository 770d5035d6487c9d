//! Procedural ground-truth objects, the analytic oracle renderer, voxelization
//! and on-disk datasets.
//!
//! Dataset layout under the root directory:
//!
//! ```text
//! dataset.json                 build configuration
//! {object-id}/scene.json       SceneDef
//! {object-id}/voxels.vxg       ground-truth occupancy
//! {object-id}/cameras.json     list of cameras, one per view
//! {object-id}/views/{k}.png    8-bit view
//! {object-id}/views/{k}.srft   float view
//! {object-id}/masks/{k}.png    binary mask
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::io::write_atomic;
use crate::parallel::par_map;
use crate::math::{aabb_intersect, camera_ray, Aabb, Camera, Ray, Vec3};
use crate::voxel::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Box { half: Vec3 },
    Sphere { radius: f64 },
    /// Axis along world `y`.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: Vec3,
    pub albedo: [f64; 3],
}

fn solve_quadratic(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    if a.abs() < 1e-15 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some(((-b - s) / (2.0 * a), (-b + s) / (2.0 * a)))
}

impl Primitive {
    pub fn contains(&self, p: Vec3) -> bool {
        let q = p - self.center;
        match self.shape {
            Shape::Box { half } => q.x.abs() <= half.x && q.y.abs() <= half.y && q.z.abs() <= half.z,
            Shape::Sphere { radius } => q.dot(q) <= radius * radius,
            Shape::Cylinder { radius, half_height } => q.y.abs() <= half_height && q.x * q.x + q.z * q.z <= radius * radius,
        }
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extent(&self) -> Vec3 {
        match self.shape {
            Shape::Box { half } => half,
            Shape::Sphere { radius } => Vec3::splat(radius),
            Shape::Cylinder { radius, half_height } => Vec3::new(radius, half_height, radius),
        }
    }

    pub fn bounds(&self) -> Aabb {
        let h = self.half_extent();
        Aabb {
            min: self.center - h,
            max: self.center + h,
        }
    }

    /// Parameter interval where the (unbounded) ray is inside the primitive.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let o = ray.origin - self.center;
        let d = ray.direction;
        match self.shape {
            Shape::Box { .. } => aabb_intersect(ray, &self.bounds()),
            Shape::Sphere { radius } => {
                let (t0, t1) = solve_quadratic(d.dot(d), 2.0 * o.dot(d), o.dot(o) - radius * radius)?;
                (t1 > 0.0).then_some((t0.max(0.0), t1))
            }
            Shape::Cylinder { radius, half_height } => {
                let a = d.x * d.x + d.z * d.z;
                let (mut t0, mut t1) = if a < 1e-15 {
                    if o.x * o.x + o.z * o.z > radius * radius {
                        return None;
                    }
                    (0.0, f64::INFINITY)
                } else {
                    solve_quadratic(a, 2.0 * (o.x * d.x + o.z * d.z), o.x * o.x + o.z * o.z - radius * radius)?
                };
                if d.y.abs() < 1e-15 {
                    if o.y.abs() > half_height {
                        return None;
                    }
                } else {
                    let (mut ya, mut yb) = ((-half_height - o.y) / d.y, (half_height - o.y) / d.y);
                    if ya > yb {
                        std::mem::swap(&mut ya, &mut yb);
                    }
                    t0 = t0.max(ya);
                    t1 = t1.min(yb);
                }
                t0 = t0.max(0.0);
                (t1 > t0).then_some((t0, t1))
            }
        }
    }

    pub fn mirrored(&self) -> Primitive {
        Primitive {
            center: Vec3::new(-self.center.x, self.center.y, self.center.z),
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDef {
    pub id: String,
    pub primitives: Vec<Primitive>,
    /// The primitive set is closed under `x -> -x`.
    pub symmetric: bool,
}

impl SceneDef {
    /// Albedo of the first primitive containing `p`.
    pub fn albedo_at(&self, p: Vec3) -> Option<[f64; 3]> {
        self.primitives.iter().find(|q| q.contains(p)).map(|q| q.albedo)
    }

    pub fn occupied(&self, p: Vec3) -> bool {
        self.primitives.iter().any(|q| q.contains(p))
    }

    pub fn is_mirror_closed(&self) -> bool {
        self.primitives.iter().all(|p| {
            let m = p.mirrored();
            self.primitives
                .iter()
                .any(|q| q.shape == m.shape && q.albedo == m.albedo && (q.center - m.center).norm() < 1e-12)
        })
    }

    pub fn inside_unit_box(&self) -> bool {
        let unit = Aabb::unit();
        self.primitives.iter().all(|p| {
            let b = p.bounds();
            unit.contains(b.min) && unit.contains(b.max)
        })
    }
}

pub fn object_id(index: usize) -> String {
    format!("obj-{index:04}")
}

fn random_albedo<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [0.05 + 0.8 * rng.random::<f64>(), 0.05 + 0.8 * rng.random::<f64>(), 0.05 + 0.8 * rng.random::<f64>()]
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Shape {
    let kind = rng.random_range(0..3);
    let mut s = || lo + (hi - lo) * rng.random::<f64>();
    match kind {
        0 => Shape::Box {
            half: Vec3::new(s(), s(), s()),
        },
        1 => Shape::Sphere { radius: s() },
        _ => Shape::Cylinder {
            radius: s(),
            half_height: s(),
        },
    }
}

/// Seeded x-symmetric composition of `1..=complexity` primitives. The first
/// primitive is centered at the origin; later ones sit either on the symmetry
/// plane or in mirrored pairs sharing one albedo.
pub fn generate_scene(seed: u64, complexity: usize) -> Result<SceneDef> {
    if complexity == 0 {
        return invalid("complexity must be >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(1..=complexity);
    let mut primitives = vec![Primitive {
        shape: random_shape(&mut rng, 0.15, 0.32),
        center: Vec3::ZERO,
        albedo: random_albedo(&mut rng),
    }];
    while primitives.len() < target {
        let shape = random_shape(&mut rng, 0.06, 0.16);
        let albedo = random_albedo(&mut rng);
        let mut prim = Primitive {
            shape,
            center: Vec3::ZERO,
            albedo,
        };
        let h = prim.half_extent();
        let mut coord = |half: f64| (rng.random::<f64>() * 2.0 - 1.0) * (0.5 - half);
        let (y, z) = (coord(h.y), coord(h.z));
        let paired = target - primitives.len() >= 2 && 0.5 - h.x > h.x + 0.02 && rng.random::<f64>() < 0.6;
        if paired {
            let x = h.x + 0.02 + rng.random::<f64>() * (0.5 - 2.0 * h.x - 0.02);
            prim.center = Vec3::new(x, y, z);
            primitives.push(prim);
            primitives.push(prim.mirrored());
        } else {
            prim.center = Vec3::new(0.0, y, z);
            primitives.push(prim);
        }
    }
    Ok(SceneDef {
        id: object_id(seed as usize),
        primitives,
        symmetric: true,
    })
}

/// Analytic render: samples at bin midpoints plus every primitive entry point,
/// each with opacity 1 inside any primitive and 0 outside, composited front to
/// back over a white background. `color_gain` scales albedo (clamped to 1).
pub fn oracle_render_with_gain(scene: &SceneDef, camera: &Camera, samples_per_ray: usize, color_gain: f64) -> (Image, Image) {
    let n = camera.width * camera.height;
    let mut image = Image::filled(camera.width, camera.height, &[1.0; 3]);
    let mut mask = Image::filled(camera.width, camera.height, &[0.0]);
    for index in 0..n {
        let (x, y) = (index % camera.width, index / camera.width);
        let ray = camera_ray(camera, x as f64 + 0.5, y as f64 + 0.5);
        let Some((t0, t1)) = aabb_intersect(&ray, &Aabb::unit()) else {
            continue;
        };
        let w = (t1 - t0) / samples_per_ray as f64;
        let mut ts: Vec<f64> = (0..samples_per_ray).map(|k| t0 + (k as f64 + 0.5) * w).collect();
        for p in &scene.primitives {
            if let Some((a, b)) = p.intersect(&ray) {
                let entry = a.max(t0) + 1e-9;
                if entry < b.min(t1) {
                    ts.push(entry);
                }
            }
        }
        ts.sort_by(f64::total_cmp);
        // Opacity is binary, so compositing stops at the first occupied sample.
        if let Some(albedo) = ts.iter().find_map(|t| scene.albedo_at(ray.at(*t))) {
            image.set(index, &albedo.map(|a| (a * color_gain).min(1.0)));
            mask.set(index, &[1.0]);
        }
    }
    (image, mask)
}

pub fn oracle_render(scene: &SceneDef, camera: &Camera, samples_per_ray: usize) -> (Image, Image) {
    oracle_render_with_gain(scene, camera, samples_per_ray, 1.0)
}

/// Occupancy 1 where the voxel center is inside any primitive.
pub fn voxelize_scene(scene: &SceneDef, resolution: usize) -> Result<VoxelGrid> {
    if resolution < 2 {
        return invalid("voxel resolution must be >= 2");
    }
    let mut grid = VoxelGrid::filled([resolution; 3], Aabb::unit(), 0.0);
    for z in 0..resolution {
        for y in 0..resolution {
            for x in 0..resolution {
                if scene.occupied(grid.voxel_center(x, y, z)) {
                    let i = grid.index(x, y, z);
                    grid.values[i] = 1.0;
                }
            }
        }
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_objects: usize,
    pub n_views: usize,
    pub resolution: usize,
    pub image_size: usize,
    pub seed: u64,
    pub complexity: usize,
    pub samples_per_ray: usize,
    pub fov_deg: f64,
    pub radius: f64,
    pub color_gain: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_objects: 8,
            n_views: 12,
            resolution: 32,
            image_size: 48,
            seed: 0,
            complexity: 4,
            samples_per_ray: 128,
            fov_deg: 45.0,
            radius: 2.0,
            color_gain: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 3 {
            return invalid("n_views must be >= 3");
        }
        if self.samples_per_ray < 64 {
            return invalid("samples_per_ray must be >= 64");
        }
        if self.image_size == 0 || self.n_objects == 0 || self.complexity == 0 {
            return invalid("n_objects, image_size and complexity must be positive");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || !(self.radius > 0.9) {
            return invalid("fov must be in (0, 180) and radius must keep cameras outside the object box");
        }
        Ok(())
    }
}

/// `n` cameras on a Fibonacci sphere of `radius` looking at the origin, with
/// a seeded rotation about `y` and a seeded order.
pub fn sphere_cameras(n: usize, radius: f64, fov_deg: f64, size: usize, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random::<f64>() * 2.0 * PI;
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut cams: Vec<Camera> = (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = offset + golden * i as f64;
            let eye = Vec3::new(r * phi.cos(), y, r * phi.sin()) * radius;
            Camera::look_at(eye, Vec3::ZERO, fov_deg, size, size)
        })
        .collect();
    cams.shuffle(&mut rng);
    cams
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
    pub mask: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub scene: SceneDef,
    pub voxels: VoxelGrid,
    pub views: Vec<View>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub scenes: Vec<SceneData>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// 70/15/15 split by the FNV-1a hash of the object id.
pub fn split_of(id: &str) -> Split {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    match h % 100 {
        0..70 => Split::Train,
        70..85 => Split::Validation,
        _ => Split::Test,
    }
}

/// Builds one object from its scene definition.
pub fn build_scene_data(scene: SceneDef, cfg: &DatasetConfig, view_seed: u64) -> Result<SceneData> {
    let voxels = voxelize_scene(&scene, cfg.resolution)?;
    let cams = sphere_cameras(cfg.n_views, cfg.radius, cfg.fov_deg, cfg.image_size, view_seed);
    let views = par_map(&cams, |camera| {
        let (image, mask) = oracle_render_with_gain(&scene, camera, cfg.samples_per_ray, cfg.color_gain);
        View {
            camera: *camera,
            image,
            mask,
        }
    });
    Ok(SceneData { scene, voxels, views })
}

/// Deterministic under `cfg.seed`; object `i` uses scene seed `seed * 1000 + i`.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let scenes = (0..cfg.n_objects)
        .map(|i| {
            let mut scene = generate_scene(cfg.seed.wrapping_mul(1000).wrapping_add(i as u64), cfg.complexity)?;
            scene.id = object_id(i);
            build_scene_data(scene, cfg, cfg.seed ^ (0xA5A5_0000 + i as u64))
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { config: cfg.clone(), scenes })
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&SceneData> {
        self.scenes.iter().find(|s| s.scene.id == id)
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.scenes
            .iter()
            .map(|s| s.scene.id.clone())
            .filter(|id| split_of(id) == split)
            .collect()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_atomic(&root.join("dataset.json"), &serde_json::to_vec_pretty(&self.config)?)?;
        for s in &self.scenes {
            let dir = root.join(&s.scene.id);
            write_atomic(&dir.join("scene.json"), &serde_json::to_vec_pretty(&s.scene)?)?;
            s.voxels.save(&dir.join("voxels.vxg"))?;
            let cams: Vec<&Camera> = s.views.iter().map(|v| &v.camera).collect();
            write_atomic(&dir.join("cameras.json"), &serde_json::to_vec_pretty(&cams)?)?;
            for (k, v) in s.views.iter().enumerate() {
                v.image.save_png(&dir.join(format!("views/{k}.png")))?;
                v.image.save_srft(&dir.join(format!("views/{k}.srft")))?;
                v.mask.save_png(&dir.join(format!("masks/{k}.png")))?;
            }
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Dataset> {
        let config: DatasetConfig = serde_json::from_slice(&fs::read(root.join("dataset.json"))?)?;
        let mut ids: Vec<String> = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("scene.json").is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        let mut scenes = Vec::with_capacity(ids.len());
        for id in ids {
            let dir = root.join(&id);
            let scene: SceneDef = serde_json::from_slice(&fs::read(dir.join("scene.json"))?)?;
            let voxels = VoxelGrid::load(&dir.join("voxels.vxg"))?;
            let cams: Vec<Camera> = serde_json::from_slice(&fs::read(dir.join("cameras.json"))?)?;
            let views = cams
                .into_iter()
                .enumerate()
                .map(|(k, camera)| {
                    let image = Image::load_srft(&dir.join(format!("views/{k}.srft")))?;
                    let mask = Image::load_png(&dir.join(format!("masks/{k}.png")))?;
                    if !mask.data.iter().all(|v| *v == 0.0 || *v == 1.0) {
                        return Err(Error::Format(format!("{id}: mask {k} is not binary")));
                    }
                    Ok(View { camera, image, mask })
                })
                .collect::<Result<_>>()?;
            scenes.push(SceneData { scene, voxels, views });
        }
        if scenes.is_empty() {
            return Err(Error::Format(format!("no objects under {}", root.display())));
        }
        Ok(Dataset { config, scenes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_scene(radius: f64) -> SceneDef {
        SceneDef {
            id: "s".into(),
            primitives: vec![Primitive {
                shape: Shape::Sphere { radius },
                center: Vec3::ZERO,
                albedo: [0.2, 0.4, 0.6],
            }],
            symmetric: true,
        }
    }

    #[test]
    fn generation_examples() {
        assert_eq!(generate_scene(4, 5).unwrap(), generate_scene(4, 5).unwrap());
        let one = generate_scene(9, 1).unwrap();
        assert_eq!(one.primitives.len(), 1);
        assert_eq!(one.primitives[0].center, Vec3::ZERO);
        for seed in 0..200 {
            let s = generate_scene(seed, 6).unwrap();
            assert!(s.is_mirror_closed() && s.inside_unit_box(), "seed {seed}");
            assert!((1..=6).contains(&s.primitives.len()));
        }
        assert!(generate_scene(0, 0).is_err());
    }

    #[test]
    fn oracle_examples() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -2.0), Vec3::ZERO, 45.0, 16, 16);
        let empty = SceneDef {
            id: "e".into(),
            primitives: vec![],
            symmetric: true,
        };
        let (img, mask) = oracle_render(&empty, &cam, 64);
        assert!(img.data.iter().all(|v| *v == 1.0) && mask.data.iter().all(|v| *v == 0.0));
        let (img, mask) = oracle_render(&sphere_scene(0.3), &cam, 64);
        assert_eq!(img.at(8, 8), &[0.2, 0.4, 0.6]);
        assert_eq!(mask.at(8, 8), &[1.0]);
        assert_eq!(img.at(0, 0), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn voxelize_examples() {
        let empty = SceneDef {
            id: "e".into(),
            primitives: vec![],
            symmetric: true,
        };
        assert!(voxelize_scene(&empty, 8).unwrap().values.iter().all(|v| *v == 0.0));
        let full = SceneDef {
            primitives: vec![Primitive {
                shape: Shape::Box { half: Vec3::splat(0.5) },
                center: Vec3::ZERO,
                albedo: [0.5; 3],
            }],
            ..empty
        };
        assert!(voxelize_scene(&full, 8).unwrap().values.iter().all(|v| *v == 1.0));
        let g = voxelize_scene(&sphere_scene(0.25), 32).unwrap();
        let count: f64 = g.values.iter().sum();
        let expect = 4.0 / 3.0 * PI * 0.25f64.powi(3) / (1.0f64 / 32.0).powi(3);
        assert!((count - expect).abs() / expect < 0.05, "{count} vs {expect}");
    }

    #[test]
    fn cylinder_and_sphere_intersections_match_containment() {
        let prims = [
            Primitive {
                shape: Shape::Cylinder {
                    radius: 0.2,
                    half_height: 0.3,
                },
                center: Vec3::new(0.1, -0.05, 0.0),
                albedo: [0.5; 3],
            },
            Primitive {
                shape: Shape::Sphere { radius: 0.25 },
                center: Vec3::new(-0.1, 0.0, 0.05),
                albedo: [0.5; 3],
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let o = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, -2.0);
            let d = (Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, 0.0) * 0.3 + Vec3::new(0.0, 0.0, 1.0)).normalized();
            let ray = Ray {
                origin: o,
                direction: d,
                t_near: 0.0,
                t_far: f64::INFINITY,
            };
            for p in &prims {
                let hit = p.intersect(&ray);
                for k in 0..400 {
                    let t = 1.0 + k as f64 * 0.005;
                    let inside = p.contains(ray.at(t));
                    let in_interval = hit.is_some_and(|(a, b)| t > a + 1e-9 && t < b - 1e-9);
                    let near_edge = hit.is_some_and(|(a, b)| (t - a).abs() < 1e-9 || (t - b).abs() < 1e-9);
                    assert!(near_edge || inside == in_interval);
                }
            }
        }
    }

    #[test]
    fn split_fractions_are_roughly_seventy_fifteen_fifteen() {
        let n = 2000;
        let train = (0..n).filter(|i| split_of(&object_id(*i)) == Split::Train).count();
        let test = (0..n).filter(|i| split_of(&object_id(*i)) == Split::Test).count();
        assert!((train as f64 / n as f64 - 0.7).abs() < 0.05);
        assert!((test as f64 / n as f64 - 0.15).abs() < 0.05);
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = DatasetConfig {
            n_objects: 2,
            n_views: 3,
            resolution: 8,
            image_size: 8,
            samples_per_ray: 64,
            ..Default::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds, build_dataset(&cfg).unwrap());
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
