//! Quick invariant sweep used by `scaffold-rf selftest`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::image::Image;
use crate::losses::photometric_on_tape;
use crate::math::{aabb_intersect, camera_ray, Aabb, Camera, Ray, Vec3};
use crate::metrics::{psnr, ssim};
use crate::nets::{read_srft, write_srft, AppearanceConfig, AppearanceNetwork, LatentCode, ParamVars};
use crate::render::{composite_ray, plan_rays, render_plan_on_tape, silhouette_ray, QuadratureBatch, RenderConfig, Scaffold, TapeScaffold};
use crate::voxel::{voxel_iou, VoxelGrid};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn random_camera<R: Rng>(rng: &mut R, size: usize) -> Camera {
    let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let dir = if dir.norm() < 1e-3 { Vec3::new(0.0, 0.0, 1.0) } else { dir.normalized() };
    let eye = dir * rng.random_range(1.5..3.0);
    Camera::look_at(eye, Vec3::new(0.0, 0.0, 0.0), rng.random_range(20.0..70.0), size, size)
}

fn ray_directions(cases: usize, rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let cam = random_camera(rng, 16);
        let r = camera_ray(&cam, rng.random_range(0.0..16.0), rng.random_range(0.0..16.0));
        worst = worst.max((r.direction.norm() - 1.0).abs());
    }
    check("ray directions are unit", worst < 1e-9, format!("max |norm - 1| = {worst:.2e}"))
}

fn constant_medium() -> Check {
    let (sigma, c, len, k) = (1.3, [0.2, 0.5, 0.9], 1.0, 256);
    let t: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) * len / k as f64).collect();
    let batch = QuadratureBatch::from_depths(t, len);
    let sig = vec![sigma; k];
    let col: Vec<f64> = (0..k).flat_map(|_| c).collect();
    let (rgb, _) = composite_ray(&sig, &col, &batch.delta, [0.0; 3]);
    let err = (0..3).map(|j| (rgb[j] - c[j] * (1.0 - (-sigma * len).exp())).abs()).fold(0.0, f64::max);
    check("constant-medium quadrature", err < 1e-3, format!("max channel error {err:.2e}"))
}

fn compositing(cases: usize, rng: &mut ChaCha8Rng) -> Check {
    let mut violations = 0;
    for _ in 0..cases {
        let k = rng.random_range(1..24);
        let sigma: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..20.0)).collect();
        let delta: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.2)).collect();
        let color: Vec<f64> = (0..3 * k).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut trans = vec![1.0];
        for i in 0..k {
            trans.push(trans[i] * (-sigma[i] * delta[i]).exp());
        }
        if trans.windows(2).any(|w| w[1] > w[0]) {
            violations += 1;
        }
        let (rgb, acc) = composite_ray(&sigma, &color, &delta, [0.0; 3]);
        if !(0.0..=1.0).contains(&acc) {
            violations += 1;
        }
        let at = rng.random_range(0..=k);
        let (mut s2, mut d2, mut c2) = (sigma.clone(), delta.clone(), color.clone());
        s2.insert(at, 0.0);
        d2.insert(at, rng.random_range(0.0..0.2));
        for j in 0..3 {
            c2.insert(3 * at + j, rng.random_range(0.0..1.0));
        }
        let (rgb2, acc2) = composite_ray(&s2, &c2, &d2, [0.0; 3]);
        if (acc - acc2).abs() > 1e-12 || (0..3).any(|j| (rgb[j] - rgb2[j]).abs() > 1e-12) {
            violations += 1;
        }
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut raised = alpha.clone();
        let i = rng.random_range(0..k);
        raised[i] = rng.random_range(alpha[i]..=1.0);
        if silhouette_ray(&raised) + 1e-12 < silhouette_ray(&alpha) {
            violations += 1;
        }
    }
    check("compositing invariants", violations == 0, format!("{violations} violations in {cases} cases"))
}

/// Central difference with step 1e-4 of `f(d) -> (value, branch signature)`,
/// or `None` when the interval crosses a branch of the piecewise graph.
pub fn central_difference(f: &mut dyn FnMut(f64) -> (f64, u64)) -> Option<f64> {
    let h = 1e-4;
    let (up, su) = f(h);
    let (dn, sd) = f(-h);
    let (_, s0) = f(0.0);
    (su == s0 && sd == s0).then_some((up - dn) / (2.0 * h))
}

fn tiny_loss(net: &AppearanceNetwork, phi: &LatentCode, plan: &crate::render::RayPlan, grid: &VoxelGrid, target: &Rc<Vec<f64>>) -> (f64, u64) {
    let mut tape = Tape::new();
    let p = net.params.to_tape(&mut tape, false);
    let pv = tape.constant(phi.0.clone(), 1, phi.dim());
    let sc = TapeScaffold::from_scaffold(&mut tape, Scaffold::Grid(grid));
    let out = render_plan_on_tape(&mut tape, net, &p, plan, sc, pv, None, [1.0; 3]);
    let l = photometric_on_tape(&mut tape, out.color, target.clone());
    (tape.scalar(l), tape.branch_signature())
}

/// Central differences against the tape gradient of a 4x4 render with
/// respect to the appearance code and a sample of network weights.
fn gradients(rng: &mut ChaCha8Rng) -> Check {
    let cfg = AppearanceConfig {
        width: 8,
        frequencies: 2,
        latent_dim: 4,
    };
    let mut net = AppearanceNetwork::new(cfg, rng);
    // Zero biases would pin pre-activations of dead units exactly on a kink.
    for t in net.params.iter_mut() {
        t.values.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let phi = LatentCode::random(4, 0.5, rng);
    let dims = [6, 6, 6];
    let grid = VoxelGrid::new(dims, Aabb::unit(), (0..216).map(|_| rng.random_range(0.0..1.0)).collect()).expect("grid");
    let cam = Camera::look_at(Vec3::new(0.4, 0.3, 2.0), Vec3::new(0.0, 0.0, 0.0), 40.0, 4, 4);
    let rc = RenderConfig {
        n_stratified: 8,
        n_importance: 8,
        ..RenderConfig::default()
    };
    let pixels: Vec<usize> = (0..16).collect();
    let plan = plan_rays(&cam, &pixels, Scaffold::Grid(&grid), &rc, 3);
    let target: Rc<Vec<f64>> = Rc::new((0..48).map(|_| rng.random_range(0.0..1.0)).collect());

    let mut tape = Tape::new();
    let p: ParamVars = net.params.to_tape(&mut tape, true);
    let pv = tape.param(phi.0.clone(), 1, phi.dim());
    let sc = TapeScaffold::from_scaffold(&mut tape, Scaffold::Grid(&grid));
    let out = render_plan_on_tape(&mut tape, &net, &p, &plan, sc, pv, None, [1.0; 3]);
    let l = photometric_on_tape(&mut tape, out.color, target.clone());
    let (_, grads) = match tape.backward(l) {
        Ok(g) => g,
        Err(e) => return check("render gradients", false, e.to_string()),
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let (mut worst, mut compared, mut skipped): (f64, usize, usize) = (0.0, 0, 0);
    let mut compare = |analytic: f64, f: &mut dyn FnMut(f64) -> (f64, u64)| match central_difference(f) {
        Some(num) => {
            worst = worst.max(rel(analytic, num));
            compared += 1;
        }
        None => skipped += 1,
    };
    let g_phi = grads.get_or_zeros(pv, phi.dim());
    for i in 0..phi.dim() {
        compare(g_phi[i], &mut |d| {
            let mut q = phi.clone();
            q.0[i] += d;
            tiny_loss(&net, &q, &plan, &grid, &target)
        });
    }
    let names: Vec<String> = net.params.iter().map(|t| t.name.clone()).collect();
    for name in names {
        let len = net.params.get(&name).map_or(0, |t| t.values.len());
        let g = grads.get_or_zeros(p.get(&name), len);
        for _ in 0..2 {
            let i = rng.random_range(0..len);
            let orig = net.params.get(&name).expect("param").values[i];
            compare(g[i], &mut |d| {
                net.params.get_mut(&name).expect("param").values[i] = orig + d;
                let l = tiny_loss(&net, &phi, &plan, &grid, &target);
                net.params.get_mut(&name).expect("param").values[i] = orig;
                l
            });
        }
    }
    let passed = worst < 1e-4 && skipped <= compared;
    check(
        "render gradients",
        passed,
        format!("max relative error {worst:.2e} over {compared} entries, {skipped} straddling a kink"),
    )
}

fn metrics_and_voxels(rng: &mut ChaCha8Rng) -> Check {
    let img = Image::new(16, 16, 3, (0..768).map(|_| rng.random_range(0.0..1.0)).collect()).expect("image");
    let p = psnr(&img, &img).unwrap_or(f64::NAN);
    let s = ssim(&img, &img).unwrap_or(f64::NAN);
    let grid = VoxelGrid::new([4, 4, 4], Aabb::unit(), (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).expect("grid");
    let involution = grid.mirror().mirror() == grid;
    let iou = voxel_iou(&grid, &grid, 0.5).unwrap_or(f64::NAN);
    let passed = p == 99.0 && (s - 1.0).abs() < 1e-12 && involution && iou == 1.0;
    check("metrics self-comparison", passed, format!("psnr {p}, ssim {s:.6}, iou {iou}, mirror involution {involution}"))
}

fn slab_examples() -> Check {
    let b = Aabb::unit();
    let ray = |o: Vec3| Ray {
        origin: o,
        direction: Vec3::new(0.0, 0.0, 1.0),
        t_near: 0.0,
        t_far: f64::INFINITY,
    };
    let (inside, miss) = (ray(Vec3::new(0.0, 0.0, 0.0)), ray(Vec3::new(2.0, 2.0, 2.0)));
    let ok = aabb_intersect(&inside, &b) == Some((0.0, 0.5)) && aabb_intersect(&miss, &b).is_none();
    check("ray-box intersection", ok, String::new())
}

fn checkpoint_roundtrip(rng: &mut ChaCha8Rng) -> Check {
    let net = AppearanceNetwork::new(AppearanceConfig::default(), rng);
    let mut buf = Vec::new();
    let ok = write_srft(&mut buf, net.params.iter()).is_ok()
        && read_srft(buf.as_slice()).is_ok_and(|ts| ts.iter().zip(net.params.iter()).all(|(a, b)| a == b) && ts.len() == net.params.len());
    check("checkpoint round trip", ok, format!("{} bytes", buf.len()))
}

/// Runs every check with `cases` randomized cases where applicable.
pub fn run(cases: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        ray_directions(cases, &mut rng),
        slab_examples(),
        constant_medium(),
        compositing(cases, &mut rng),
        gradients(&mut rng),
        metrics_and_voxels(&mut rng),
        checkpoint_roundtrip(&mut rng),
    ]
}
