use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scaffold_rf::math::{Aabb, Camera, Ray, Vec3};
use scaffold_rf::nets::{AppearanceConfig, AppearanceNetwork, LatentCode};
use scaffold_rf::render::{
    composite, composite_ray, importance_samples, project_silhouette, render_image, stratified_samples, transmittance, QuadratureBatch,
    RadianceSample, RenderConfig, Scaffold,
};
use scaffold_rf::voxel::VoxelGrid;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn ray_segment(t_near: f64, t_far: f64) -> Ray {
    Ray {
        origin: Vec3::new(0.0, 0.0, 0.0),
        direction: Vec3::new(0.0, 0.0, 1.0),
        t_near,
        t_far,
    }
}

fn medium() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..20).prop_flat_map(|k| {
        (
            prop::collection::vec(0.0f64..30.0, k),
            prop::collection::vec(0.0f64..0.3, k),
            prop::collection::vec(0.0f64..1.0, 3 * k),
        )
    })
}

proptest! {
    #[test]
    fn transmittance_starts_at_one_and_never_rises((sigma, delta, color) in medium()) {
        let samples: Vec<RadianceSample> = sigma
            .iter()
            .zip(color.chunks_exact(3))
            .map(|(s, c)| RadianceSample { sigma: *s, color: [c[0], c[1], c[2]] })
            .collect();
        let batch = QuadratureBatch { t: (0..sigma.len()).map(|k| k as f64).collect(), delta };
        let t = transmittance(&samples, &batch);
        prop_assert_eq!(t[0], 1.0);
        prop_assert!(t.windows(2).all(|w| w[1] <= w[0]));
        let (rgb, acc) = composite(&samples, &batch, [0.0; 3]);
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((acc - (1.0 - t[t.len() - 1])).abs() < 1e-12);
        for j in 0..3 {
            let hi = color.iter().skip(j).step_by(3).fold(0.0f64, |m, v| m.max(*v));
            prop_assert!(rgb[j] >= 0.0 && rgb[j] <= hi + 1e-12, "channel {} = {} above {}", j, rgb[j], hi);
        }
    }

    #[test]
    fn zero_density_insertion_is_exact((sigma, delta, color) in medium(), at in 0usize..20, d in 0.0f64..0.3, c in 0.0f64..1.0) {
        let at = at.min(sigma.len());
        let base = composite_ray(&sigma, &color, &delta, [0.3, 0.6, 0.9]);
        let (mut s, mut dl, mut cl) = (sigma.clone(), delta.clone(), color.clone());
        s.insert(at, 0.0);
        dl.insert(at, d);
        for j in 0..3 {
            cl.insert(3 * at + j, c);
        }
        let refined = composite_ray(&s, &cl, &dl, [0.3, 0.6, 0.9]);
        prop_assert!((base.1 - refined.1).abs() < 1e-12);
        for j in 0..3 {
            prop_assert!((base.0[j] - refined.0[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_piecewise_constant_medium_is_exact(
        sigma in prop::collection::vec(0.0f64..8.0, 1..32),
        len in 0.1f64..3.0,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = sigma.len();
        let color: Vec<f64> = (0..3 * k).map(|_| rng.random_range(0.0..1.0)).collect();
        let batch = stratified_samples::<ChaCha8Rng>(&ray_segment(0.0, len), k, None);
        // The medium is constant on each quadrature cell [t_k, t_k + delta_k].
        let mut depth: f64 = 0.0;
        let mut expect = [0.0; 3];
        for i in 0..k {
            let t_in = (-depth).exp();
            depth += sigma[i] * batch.delta[i];
            let t_out = (-depth).exp();
            for j in 0..3 {
                expect[j] += color[3 * i + j] * (t_in - t_out);
            }
        }
        let (rgb, _) = composite_ray(&sigma, &color, &batch.delta, [0.0; 3]);
        for j in 0..3 {
            prop_assert!((rgb[j] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_a_voxel_never_darkens_the_silhouette(seed in any::<u64>(), idx in 0usize..216, bump in 0.0f64..1.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..216).map(|_| rng.random_range(0.0..1.0)).collect();
        let grid = VoxelGrid::new([6, 6, 6], Aabb::unit(), values).unwrap();
        let mut raised = grid.clone();
        raised.values[idx] = (raised.values[idx] + bump).min(1.0);
        let eye = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 2.0);
        let cam = Camera::look_at(eye, Vec3::new(0.0, 0.0, 0.0), 45.0, 8, 8);
        let cfg = RenderConfig { n_stratified: 32, jitter: false, ..RenderConfig::default() };
        let (a, b) = (project_silhouette(&grid, &cam, &cfg), project_silhouette(&raised, &cam, &cfg));
        for (lo, hi) in a.data.iter().zip(&b.data) {
            prop_assert!(*hi + 1e-12 >= *lo);
        }
    }
}

#[test]
fn importance_draws_follow_the_floored_occupancy() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bins = 64;
    let floor = 0.01;
    let alpha: Vec<f64> = (0..bins).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
    let ray = ray_segment(1.0, 3.0);
    let empty = QuadratureBatch { t: vec![], delta: vec![] };
    let n = 10_000;
    let draws = importance_samples(&ray, &empty, &alpha, n, floor, &mut rng);
    assert_eq!(draws.len(), n);
    let w = 2.0 / bins as f64;
    let mut counts = vec![0.0; bins];
    for t in &draws.t {
        counts[(((t - 1.0) / w) as usize).min(bins - 1)] += 1.0;
    }
    let weights: Vec<f64> = alpha.iter().map(|a| a.max(floor)).collect();
    let total: f64 = weights.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(&weights)
        .map(|(o, wk)| {
            let e = n as f64 * wk / total;
            (o - e) * (o - e) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat:.1}, p = {p:.4}");
}

#[test]
fn empty_scaffold_renders_uniform_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = AppearanceNetwork::new(AppearanceConfig::default(), &mut rng);
    let grid = VoxelGrid::filled([8, 8, 8], Aabb::unit(), 0.0);
    let cam = Camera::look_at(Vec3::new(0.5, 0.5, 2.0), Vec3::new(0.0, 0.0, 0.0), 45.0, 6, 6);
    // Zero-density radiance field: push the density bias far negative.
    net.params.get_mut("appearance.density.bias").unwrap().values[0] = -1e3;
    let cfg = RenderConfig {
        background: [0.2, 0.4, 0.6],
        ..RenderConfig::default()
    };
    let img = render_image(&net, Scaffold::Grid(&grid), &LatentCode::zeros(64), &cam, &cfg);
    for px in img.data.chunks_exact(3) {
        for j in 0..3 {
            assert!((px[j] - cfg.background[j]).abs() < 1e-12, "{px:?}");
        }
    }
}

#[test]
fn renders_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = AppearanceNetwork::new(AppearanceConfig::default(), &mut rng);
    let grid = VoxelGrid::new([8, 8, 8], Aabb::unit(), (0..512).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap();
    let phi = LatentCode::random(64, 0.1, &mut rng);
    let cam = Camera::look_at(Vec3::new(1.0, 0.5, 2.0), Vec3::new(0.0, 0.0, 0.0), 45.0, 10, 10);
    let cfg = RenderConfig::default();
    let a = render_image(&net, Scaffold::Grid(&grid), &phi, &cam, &cfg);
    let b = render_image(&net, Scaffold::Grid(&grid), &phi, &cam, &cfg);
    assert_eq!(a, b);
}
