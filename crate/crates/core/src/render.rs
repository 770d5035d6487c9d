//! Quadrature volume rendering of scaffold-conditioned radiance fields.
//!
//! Rendering is split into two passes. [`plan_rays`] decides, without any
//! differentiation, which rays hit the scaffold box and where their samples
//! sit (stratified plus occupancy-guided importance samples). The plan is then
//! evaluated on a [`Tape`] by [`render_plan_on_tape`], so sample positions are
//! constants of the backward pass while colors, densities, occupancies and the
//! optional camera pose are differentiable.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CameraSamples, RayLayout, Tape, Var};
use crate::image::Image;
use crate::math::{aabb_intersect, camera_ray, Aabb, Camera, Ray, Vec3};
use crate::nets::{AppearanceNetwork, LatentCode, ParamVars};
use crate::parallel::par_map;
use crate::voxel::{sample_values, VoxelGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub n_stratified: usize,
    pub n_importance: usize,
    pub rays_per_batch: usize,
    pub background: [f64; 3],
    pub pdf_floor: f64,
    pub rng_seed: u64,
    /// `false` places stratified samples at bin centers.
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_stratified: 64,
            n_importance: 64,
            rays_per_batch: 128,
            background: [1.0, 1.0, 1.0],
            pdf_floor: 0.01,
            rng_seed: 0,
            jitter: true,
        }
    }
}

/// Sorted sample depths along one ray and their quadrature widths.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureBatch {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl QuadratureBatch {
    /// Widths `t[k+1] - t[k]`, closing with `t_far - t[K]`.
    pub fn from_depths(t: Vec<f64>, t_far: f64) -> Self {
        let delta = t
            .iter()
            .enumerate()
            .map(|(k, tk)| t.get(k + 1).copied().unwrap_or(t_far) - tk)
            .map(|d| d.max(0.0))
            .collect();
        Self { t, delta }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub sigma: f64,
}

/// Which occupancy conditions the appearance network.
#[derive(Clone, Copy, Debug)]
pub enum Scaffold<'a> {
    Grid(&'a VoxelGrid),
    /// No scaffold: occupancy pinned to 1 and rays clipped to the unit box.
    Absent,
}

impl Scaffold<'_> {
    pub fn bounds(&self) -> Aabb {
        match self {
            Scaffold::Grid(g) => g.bounds,
            Scaffold::Absent => Aabb::unit(),
        }
    }

    fn sample(&self, p: Vec3) -> f64 {
        match self {
            Scaffold::Grid(g) => g.trilinear_sample(p),
            Scaffold::Absent => 0.0,
        }
    }
}

/// Deterministic per-ray stream derived from `(seed, index)`.
pub fn ray_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    ray_rng(seed, salt).random()
}

/// One uniform draw per equal-width bin of `[t_near, t_far]`; bin centers when
/// `rng` is `None`.
pub fn stratified_samples<R: Rng + ?Sized>(ray: &Ray, n: usize, mut rng: Option<&mut R>) -> QuadratureBatch {
    let n = n.max(1);
    let w = (ray.t_far - ray.t_near) / n as f64;
    let t = (0..n)
        .map(|k| {
            let u = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            ray.t_near + (k as f64 + u) * w
        })
        .collect();
    QuadratureBatch::from_depths(t, ray.t_far)
}

/// Draws `n` inverse-CDF samples from the piecewise-constant density over the
/// stratification bins with weight `max(alpha_k, pdf_floor)`, merged with the
/// coarse samples.
pub fn importance_samples<R: Rng + ?Sized>(
    ray: &Ray,
    coarse: &QuadratureBatch,
    alpha: &[f64],
    n: usize,
    pdf_floor: f64,
    rng: &mut R,
) -> QuadratureBatch {
    let extra = inverse_cdf_draws(ray, alpha, n, pdf_floor, rng);
    let mut t: Vec<f64> = coarse.t.iter().copied().chain(extra).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    QuadratureBatch::from_depths(t, ray.t_far)
}

fn inverse_cdf_draws<R: Rng + ?Sized>(ray: &Ray, alpha: &[f64], n: usize, pdf_floor: f64, rng: &mut R) -> Vec<f64> {
    let bins = alpha.len();
    if bins == 0 || n == 0 {
        return Vec::new();
    }
    let w = (ray.t_far - ray.t_near) / bins as f64;
    let weights: Vec<f64> = alpha.iter().map(|a| a.max(pdf_floor)).collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    for wk in &weights {
        cdf.push(cdf.last().unwrap() + wk / total);
    }
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let k = cdf.partition_point(|c| *c <= u).clamp(1, bins) - 1;
            let frac = ((u - cdf[k]) / (cdf[k + 1] - cdf[k])).clamp(0.0, 1.0);
            (ray.t_near + (k as f64 + frac) * w).min(ray.t_far)
        })
        .collect()
}

/// Quadrature compositing of one ray; `color` holds 3 values per sample.
/// Returns the color including `(1 - acc) * background` and `acc`.
pub fn composite_ray(sigma: &[f64], color: &[f64], deltas: &[f64], background: [f64; 3]) -> ([f64; 3], f64) {
    let mut trans = 1.0;
    let mut out = [0.0; 3];
    for (k, (s, d)) in sigma.iter().zip(deltas).enumerate() {
        let next = trans * (-s * d).exp();
        let w = trans - next;
        for j in 0..3 {
            out[j] += w * color[k * 3 + j];
        }
        trans = next;
    }
    for j in 0..3 {
        out[j] += trans * background[j];
    }
    (out, 1.0 - trans)
}

/// `sum_k prod_{j<k} (1 - a_j) * a_k`
pub fn silhouette_ray(alpha: &[f64]) -> f64 {
    let mut trans = 1.0;
    let mut acc = 0.0;
    for a in alpha {
        acc += trans * a;
        trans *= 1.0 - a;
    }
    acc
}

pub fn composite(samples: &[RadianceSample], batch: &QuadratureBatch, background: [f64; 3]) -> ([f64; 3], f64) {
    assert_eq!(samples.len(), batch.len(), "one radiance sample per depth");
    let sigma: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
    let color: Vec<f64> = samples.iter().flat_map(|s| s.color).collect();
    composite_ray(&sigma, &color, &batch.delta, background)
}

/// Transmittance before each sample plus the final one (`K + 1` values).
pub fn transmittance(samples: &[RadianceSample], batch: &QuadratureBatch) -> Vec<f64> {
    let mut out = vec![1.0];
    let mut depth = 0.0;
    for (s, d) in samples.iter().zip(&batch.delta) {
        depth += s.sigma * d;
        out.push((-depth).exp());
    }
    out
}

/// Fixed sample placement for a set of pixels of one camera.
#[derive(Clone, Debug)]
pub struct RayPlan {
    pub camera: Camera,
    pub pixels: Vec<usize>,
    pub layout: Rc<RayLayout>,
    pub samples: Rc<CameraSamples>,
}

impl RayPlan {
    pub fn n_rays(&self) -> usize {
        self.pixels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.layout.n_samples()
    }
}

fn pixel_ray(camera: &Camera, index: usize) -> Ray {
    let (x, y) = (index % camera.width, index / camera.width);
    camera_ray(camera, x as f64 + 0.5, y as f64 + 0.5)
}

/// Samples for one pixel: clip to the scaffold box, stratify, then add
/// occupancy-guided importance samples.
pub fn ray_samples(camera: &Camera, index: usize, scaffold: Scaffold<'_>, cfg: &RenderConfig, seed: u64) -> Option<(Ray, QuadratureBatch)> {
    let ray = pixel_ray(camera, index);
    let (t0, t1) = aabb_intersect(&ray, &scaffold.bounds())?;
    let ray = ray.clipped(t0, t1);
    let mut rng = ray_rng(seed, index as u64);
    let coarse = if cfg.jitter {
        stratified_samples(&ray, cfg.n_stratified, Some(&mut rng))
    } else {
        stratified_samples::<ChaCha8Rng>(&ray, cfg.n_stratified, None)
    };
    if cfg.n_importance == 0 {
        return Some((ray, coarse));
    }
    let alpha: Vec<f64> = coarse.t.iter().map(|t| scaffold.sample(ray.at(*t))).collect();
    let batch = importance_samples(&ray, &coarse, &alpha, cfg.n_importance, cfg.pdf_floor, &mut rng);
    Some((ray, batch))
}

pub fn plan_rays(camera: &Camera, pixels: &[usize], scaffold: Scaffold<'_>, cfg: &RenderConfig, seed: u64) -> RayPlan {
    let mut offsets = vec![0];
    let mut deltas = Vec::new();
    let mut dirs_cam = Vec::new();
    let mut depths = Vec::new();
    for &index in pixels {
        if let Some((_, batch)) = ray_samples(camera, index, scaffold, cfg, seed) {
            let (x, y) = (index % camera.width, index / camera.width);
            let dc = camera.camera_direction(x as f64 + 0.5, y as f64 + 0.5);
            dirs_cam.extend(std::iter::repeat_n(dc, batch.len()));
            depths.extend_from_slice(&batch.t);
            deltas.extend_from_slice(&batch.delta);
        }
        offsets.push(depths.len());
    }
    RayPlan {
        camera: *camera,
        pixels: pixels.to_vec(),
        layout: Rc::new(RayLayout { offsets, deltas }),
        samples: Rc::new(CameraSamples {
            base: *camera,
            dirs_cam,
            depths,
        }),
    }
}

/// Occupancy source on the tape.
#[derive(Clone, Copy, Debug)]
pub enum TapeScaffold {
    Grid { values: Var, dims: [usize; 3], bounds: Aabb },
    Absent,
}

impl TapeScaffold {
    pub fn constant(tape: &mut Tape, grid: &VoxelGrid) -> Self {
        let values = tape.constant(grid.values.clone(), 1, grid.len());
        TapeScaffold::Grid {
            values,
            dims: grid.dims,
            bounds: grid.bounds,
        }
    }

    pub fn from_scaffold(tape: &mut Tape, scaffold: Scaffold<'_>) -> Self {
        match scaffold {
            Scaffold::Grid(g) => Self::constant(tape, g),
            Scaffold::Absent => TapeScaffold::Absent,
        }
    }
}

/// Tape handles produced when evaluating a plan.
#[derive(Clone, Copy, Debug)]
pub struct PlanOutput {
    /// `rays x 3` composited colors.
    pub color: Var,
    /// `samples x 1` occupancies fed to the network.
    pub alpha: Var,
}

/// Differentiable render of a plan. When `pose` is given, sample positions and
/// directions are produced by the camera-pose op so gradients reach it.
#[allow(clippy::too_many_arguments)]
pub fn render_plan_on_tape(
    tape: &mut Tape,
    net: &AppearanceNetwork,
    params: &ParamVars,
    plan: &RayPlan,
    scaffold: TapeScaffold,
    phi: Var,
    pose: Option<Var>,
    background: [f64; 3],
) -> PlanOutput {
    let n = plan.n_samples();
    let (points, dirs) = match pose {
        Some(pose) => {
            let pd = tape.camera_rays(pose, plan.samples.clone());
            (tape.slice_cols(pd, 0, 3), tape.slice_cols(pd, 3, 3))
        }
        None => {
            let cam = &plan.camera;
            let origin = cam.center();
            let mut p = Vec::with_capacity(n * 3);
            let mut d = Vec::with_capacity(n * 3);
            for (dc, t) in plan.samples.dirs_cam.iter().zip(&plan.samples.depths) {
                let dw = cam.rotation.tmul_vec(*dc);
                p.extend_from_slice(&(origin + dw * *t).to_array());
                d.extend_from_slice(&dw.to_array());
            }
            (tape.constant(p, n, 3), tape.constant(d, n, 3))
        }
    };
    let alpha = match scaffold {
        TapeScaffold::Grid { values, dims, bounds } => tape.trilinear(values, dims, &bounds, points),
        TapeScaffold::Absent => tape.constant(vec![1.0; n], n, 1),
    };
    let out = net.eval_on_tape(tape, params, points, dirs, alpha, phi);
    let color = tape.composite(out.sigma, out.color, plan.layout.clone(), background);
    PlanOutput { color, alpha }
}

const RENDER_CHUNK: usize = 512;

/// Renders the given pixels (forward only), chunked to bound tape memory.
pub fn render_pixels(
    net: &AppearanceNetwork,
    scaffold: Scaffold<'_>,
    phi: &LatentCode,
    camera: &Camera,
    pixels: &[usize],
    cfg: &RenderConfig,
) -> Vec<[f64; 3]> {
    let chunks: Vec<&[usize]> = pixels.chunks(RENDER_CHUNK).collect();
    par_map(&chunks, |chunk| {
        let plan = plan_rays(camera, chunk, scaffold, cfg, cfg.rng_seed);
        let mut tape = Tape::new();
        let params = net.params.to_tape(&mut tape, false);
        let phi_v = tape.constant(phi.0.clone(), 1, phi.dim());
        let sc = TapeScaffold::from_scaffold(&mut tape, scaffold);
        let res = render_plan_on_tape(&mut tape, net, &params, &plan, sc, phi_v, None, cfg.background);
        tape.value(res.color).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Color of pixel `(px, py)` (integer pixel indices).
pub fn render_pixel(
    net: &AppearanceNetwork,
    scaffold: Scaffold<'_>,
    phi: &LatentCode,
    camera: &Camera,
    px: usize,
    py: usize,
    cfg: &RenderConfig,
) -> [f64; 3] {
    render_pixels(net, scaffold, phi, camera, &[py * camera.width + px], cfg)[0]
}

pub fn render_image(net: &AppearanceNetwork, scaffold: Scaffold<'_>, phi: &LatentCode, camera: &Camera, cfg: &RenderConfig) -> Image {
    let pixels: Vec<usize> = (0..camera.width * camera.height).collect();
    let colors = render_pixels(net, scaffold, phi, camera, &pixels, cfg);
    Image {
        width: camera.width,
        height: camera.height,
        channels: 3,
        data: colors.into_iter().flatten().collect(),
    }
}

/// Stratified-only sample placement for silhouettes of `grid` (bounds of the
/// grid box); the returned plan carries world points directly.
pub fn silhouette_plan(grid_bounds: &Aabb, camera: &Camera, pixels: &[usize], cfg: &RenderConfig, seed: u64) -> (Rc<RayLayout>, Vec<f64>) {
    let mut offsets = vec![0];
    let mut points = Vec::new();
    for &index in pixels {
        let ray = pixel_ray(camera, index);
        if let Some((t0, t1)) = aabb_intersect(&ray, grid_bounds) {
            let ray = ray.clipped(t0, t1);
            let batch = if cfg.jitter {
                stratified_samples(&ray, cfg.n_stratified, Some(&mut ray_rng(seed, index as u64)))
            } else {
                stratified_samples::<ChaCha8Rng>(&ray, cfg.n_stratified, None)
            };
            for t in &batch.t {
                points.extend_from_slice(&ray.at(*t).to_array());
            }
        }
        offsets.push(points.len() / 3);
    }
    let n = points.len() / 3;
    (
        Rc::new(RayLayout {
            offsets,
            deltas: vec![0.0; n],
        }),
        points,
    )
}

/// Differentiable silhouette of a tape grid at the given pixels of `camera`;
/// output is `pixels x 1`.
#[allow(clippy::too_many_arguments)]
pub fn silhouette_on_tape(
    tape: &mut Tape,
    grid: Var,
    dims: [usize; 3],
    bounds: &Aabb,
    camera: &Camera,
    pixels: &[usize],
    cfg: &RenderConfig,
    seed: u64,
) -> Var {
    let (layout, points) = silhouette_plan(bounds, camera, pixels, cfg, seed);
    let n = points.len() / 3;
    let pv = tape.constant(points, n, 3);
    let alpha = tape.trilinear(grid, dims, bounds, pv);
    tape.silhouette(alpha, layout)
}

/// Occupancy composited as per-sample opacity; one channel in `[0, 1]`.
pub fn project_silhouette(grid: &VoxelGrid, camera: &Camera, cfg: &RenderConfig) -> Image {
    let pixels: Vec<usize> = (0..camera.width * camera.height).collect();
    let (layout, points) = silhouette_plan(&grid.bounds, camera, &pixels, cfg, cfg.rng_seed);
    let data = (0..layout.n_rays())
        .map(|r| {
            let alpha: Vec<f64> = layout
                .range(r)
                .map(|i| sample_values(grid.dims, &grid.bounds, &grid.values, Vec3::from_slice(&points[i * 3..i * 3 + 3])))
                .collect();
            silhouette_ray(&alpha)
        })
        .collect();
    Image {
        width: camera.width,
        height: camera.height,
        channels: 1,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::AppearanceConfig;

    fn unit_ray(t0: f64, t1: f64) -> Ray {
        Ray {
            origin: Vec3::ZERO,
            direction: Vec3::new(0.0, 0.0, 1.0),
            t_near: t0,
            t_far: t1,
        }
    }

    #[test]
    fn stratified_examples() {
        let ray = unit_ray(1.0, 3.0);
        let mut rng = ray_rng(1, 2);
        let one = stratified_samples(&ray, 1, Some(&mut rng));
        assert!(one.t[0] >= 1.0 && one.t[0] <= 3.0);
        let mid = stratified_samples::<ChaCha8Rng>(&ray, 4, None);
        assert_eq!(mid.t, vec![1.25, 1.75, 2.25, 2.75]);
        assert_eq!(mid.delta, vec![0.5, 0.5, 0.5, 0.25]);
        for seed in 0..20 {
            let b = stratified_samples(&ray, 7, Some(&mut ray_rng(seed, 0)));
            let w = 2.0 / 7.0;
            for (k, t) in b.t.iter().enumerate() {
                assert!(*t >= 1.0 + k as f64 * w && *t <= 1.0 + (k + 1) as f64 * w);
            }
        }
    }

    #[test]
    fn importance_concentrates_in_degenerate_bin() {
        let ray = unit_ray(0.0, 1.0);
        let coarse = stratified_samples::<ChaCha8Rng>(&ray, 16, None);
        let mut alpha = vec![0.0; 16];
        alpha[5] = 1.0;
        let mut rng = ray_rng(9, 9);
        let draws = inverse_cdf_draws(&ray, &alpha, 500, 1e-12, &mut rng);
        assert!(draws.iter().all(|t| *t >= 5.0 / 16.0 && *t <= 6.0 / 16.0));
        let merged = importance_samples(&ray, &coarse, &alpha, 64, 0.01, &mut rng);
        assert!(merged.t.windows(2).all(|w| w[0] < w[1]));
        assert!(merged.t.iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(merged.delta.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn composite_hand_example() {
        let batch = QuadratureBatch {
            t: vec![0.0, 0.5],
            delta: vec![0.5, 0.5],
        };
        let samples = [
            RadianceSample {
                color: [1.0, 0.0, 0.0],
                sigma: 1.0,
            },
            RadianceSample {
                color: [0.0, 1.0, 0.0],
                sigma: 2.0,
            },
        ];
        let (c, acc) = composite(&samples, &batch, [0.0; 3]);
        assert!((c[0] - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
        assert!((c[1] - (-0.5f64).exp() * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((c[0] - 0.3935).abs() < 1e-4 && (c[1] - 0.3834).abs() < 1e-4);
        assert!((acc - 0.7769).abs() < 1e-4);
        let zero = [RadianceSample {
            color: [0.3, 0.3, 0.3],
            sigma: 0.0,
        }; 2];
        assert_eq!(composite(&zero, &batch, [0.2, 0.4, 0.6]), ([0.2, 0.4, 0.6], 0.0));
    }

    #[test]
    fn silhouette_examples() {
        assert_eq!(silhouette_ray(&[0.3]), 0.3);
        assert_eq!(silhouette_ray(&[1.0, 0.4, 0.9]), 1.0);
        let grid = VoxelGrid::filled([4, 4, 4], Aabb::unit(), 0.0);
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -2.0), Vec3::ZERO, 45.0, 8, 8);
        let mask = project_silhouette(&grid, &cam, &RenderConfig::default());
        assert!(mask.data.iter().all(|v| *v == 0.0));
        let full = VoxelGrid::filled([4, 4, 4], Aabb::unit(), 1.0);
        let cfg = RenderConfig {
            jitter: false,
            ..Default::default()
        };
        let mask = project_silhouette(&full, &cam, &cfg);
        assert_eq!(mask.at(4, 4)[0], 1.0);
    }

    #[test]
    fn zero_network_constant_medium() {
        // Zero parameters give σ = ln 2 and c = 0.5 everywhere.
        let net = AppearanceNetwork::zeros(AppearanceConfig::default());
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -2.0), Vec3::ZERO, 10.0, 3, 3);
        let cfg = RenderConfig {
            background: [0.0; 3],
            n_stratified: 32,
            n_importance: 0,
            jitter: false,
            ..Default::default()
        };
        // Quadrature integrates from the first sample to t_far.
        let plan = plan_rays(&cam, &[4], Scaffold::Absent, &cfg, 0);
        let covered: f64 = plan.layout.deltas.iter().sum();
        let c = render_pixel(&net, Scaffold::Absent, &LatentCode::zeros(64), &cam, 1, 1, &cfg);
        let expect = 0.5 * (1.0 - (-std::f64::consts::LN_2 * covered).exp());
        assert!((c[0] - expect).abs() < 1e-12);
        // As the bins refine, the covered length approaches 1 and the color 0.25.
        let fine = RenderConfig { n_stratified: 4096, ..cfg.clone() };
        let c = render_pixel(&net, Scaffold::Absent, &LatentCode::zeros(64), &cam, 1, 1, &fine);
        assert!((c[0] - 0.25).abs() < 1e-4);
        // Rays that miss the box return the background exactly.
        let off = Camera::look_at(Vec3::new(0.0, 3.0, -2.0), Vec3::new(0.0, 3.0, 0.0), 10.0, 3, 3);
        let bg = RenderConfig { background: [0.1, 0.2, 0.3], ..cfg };
        assert_eq!(render_pixel(&net, Scaffold::Absent, &LatentCode::zeros(64), &off, 1, 1, &bg), [0.1, 0.2, 0.3]);
    }
}
