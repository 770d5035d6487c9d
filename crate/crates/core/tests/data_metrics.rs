use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use scaffold_rf::data::{generate_scene, oracle_render, sphere_cameras, voxelize_scene};
use scaffold_rf::image::Image;
use scaffold_rf::metrics::{psnr, ssim};
use scaffold_rf::render::{project_silhouette, RenderConfig};

fn mask_iou(a: &Image, b: &Image) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (x, y) = (*x >= 0.5, *y >= 0.5);
        inter += (x && y) as u8 as f64;
        union += (x || y) as u8 as f64;
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

#[test]
fn voxel_silhouettes_agree_with_oracle_masks() {
    // Sixteen bins per ray dilate the composited silhouette least on this corpus.
    let cfg = RenderConfig {
        n_stratified: 16,
        jitter: false,
        ..RenderConfig::default()
    };
    let mut worst: f64 = 1.0;
    for seed in 0..6 {
        let scene = generate_scene(seed, 4).unwrap();
        let grid = voxelize_scene(&scene, 32).unwrap();
        for cam in sphere_cameras(3, 2.0, 45.0, 48, seed) {
            let (_, mask) = oracle_render(&scene, &cam, 128);
            let sil = project_silhouette(&grid, &cam, &cfg);
            worst = worst.min(mask_iou(&sil, &mask));
        }
    }
    assert!(worst > 0.95, "worst silhouette IoU {worst:.3}");
}

#[test]
fn oracle_refinement_converges() {
    for seed in 0..3 {
        let scene = generate_scene(seed, 5).unwrap();
        for cam in sphere_cameras(2, 2.0, 45.0, 48, 10 + seed) {
            let (coarse, _) = oracle_render(&scene, &cam, 256);
            let (fine, _) = oracle_render(&scene, &cam, 512);
            let worst = coarse.data.iter().zip(&fine.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst <= 1.0 / 255.0, "seed {seed}: {worst}");
        }
    }
}

fn textured(rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = (40, 40);
    let data = (0..w * h)
        .flat_map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let base = 0.5 + 0.3 * (x * 0.3).sin() * (y * 0.2).cos();
            [base, 0.8 * base + 0.1, 1.0 - base]
        })
        .map(|v: f64| (v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0))
        .collect();
    Image::new(w, h, 3, data).unwrap()
}

fn noisy(img: &Image, std: f64, rng: &mut ChaCha8Rng) -> Image {
    let n = Normal::new(0.0, 1.0).unwrap();
    let noise: Vec<f64> = (0..img.data.len()).map(|_| n.sample(rng)).collect();
    let data = img.data.iter().zip(&noise).map(|(v, e)| (v + std * e).clamp(0.0, 1.0)).collect();
    Image::new(img.width, img.height, img.channels, data).unwrap()
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = textured(&mut rng);
    let mut last = f64::INFINITY;
    for std in [0.005, 0.01, 0.02, 0.05, 0.1, 0.2] {
        let p = psnr(&img, &noisy(&img, std, &mut rng)).unwrap();
        assert!(p < last, "{std}: {p} >= {last}");
        last = p;
    }
}

#[test]
fn ssim_prefers_lighter_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let img = textured(&mut rng);
        let light = ssim(&img, &noisy(&img, 0.1, &mut rng)).unwrap();
        let heavy = ssim(&img, &noisy(&img, 0.5, &mut rng)).unwrap();
        assert!(heavy < light, "{heavy} >= {light}");
        assert!((-1.0..=1.0).contains(&heavy) && (-1.0..=1.0).contains(&light));
    }
}
