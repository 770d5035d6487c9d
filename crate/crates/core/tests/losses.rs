use proptest::prelude::*;
use scaffold_rf::losses::{inversion_objective, photometric_loss, shape_loss, symmetry_term, weighted_bce, LossConfig, SilhouetteTarget};
use scaffold_rf::math::{Aabb, Camera, Vec3};
use scaffold_rf::render::{project_silhouette, RenderConfig};
use scaffold_rf::voxel::VoxelGrid;

fn rgb_rows(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(0.0f64..1.0), n)
}

fn grid(values: Vec<f64>) -> VoxelGrid {
    VoxelGrid::new([4, 3, 2], Aabb::unit(), values).unwrap()
}

proptest! {
    #[test]
    fn photometric_is_nonnegative_and_zero_on_match((a, b) in (1usize..40).prop_flat_map(|n| (rgb_rows(n), rgb_rows(n)))) {
        prop_assert!(photometric_loss(&a, &b).unwrap() >= 0.0);
        prop_assert_eq!(photometric_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn symmetry_is_nonnegative_and_zero_when_mirrored(values in prop::collection::vec(0.0f64..1.0, 24)) {
        let g = grid(values);
        prop_assert!(symmetry_term(&g) >= 0.0);
        let m = g.mirror();
        let sym = grid(g.values.iter().zip(&m.values).map(|(a, b)| 0.5 * (a + b)).collect());
        prop_assert_eq!(symmetry_term(&sym), 0.0);
    }

    #[test]
    fn weighted_bce_is_nonnegative(
        (p, t) in (1usize..40).prop_flat_map(|n| (prop::collection::vec(0.0f64..=1.0, n), prop::collection::vec(0.0f64..=1.0, n))),
        gamma in 0.0f64..=1.0,
    ) {
        prop_assert!(weighted_bce(&p, &t, gamma) >= 0.0);
    }

    #[test]
    fn shape_loss_is_nonnegative(pred in prop::collection::vec(0.0f64..1.0, 24), gt in prop::collection::vec(0.0f64..1.0, 24)) {
        let (pred, gt) = (grid(pred), grid(gt));
        let cam = Camera::look_at(Vec3::new(0.3, 0.2, 2.0), Vec3::new(0.0, 0.0, 0.0), 40.0, 5, 5);
        let cfg = RenderConfig { n_stratified: 16, ..RenderConfig::default() };
        let mask = project_silhouette(&gt, &cam, &cfg);
        let sil = [SilhouetteTarget { mask: &mask, camera: &cam }];
        prop_assert!(shape_loss(&pred, &gt, &sil, &LossConfig::default(), &cfg).unwrap() >= 0.0);
    }
}

#[test]
fn projection_and_symmetry_vanish_at_their_fixed_points() {
    // A mirror-symmetric grid whose own silhouette is the target: only the BCE term remains.
    let values: Vec<f64> = (0..24).map(|i| [0.0, 1.0, 1.0, 0.0][i % 4]).collect();
    let g = grid(values);
    let cam = Camera::look_at(Vec3::new(0.3, 0.2, 2.0), Vec3::new(0.0, 0.0, 0.0), 40.0, 6, 6);
    let cfg = RenderConfig {
        n_stratified: 16,
        jitter: false,
        ..RenderConfig::default()
    };
    let mask = project_silhouette(&g, &cam, &cfg);
    let sil = [SilhouetteTarget { mask: &mask, camera: &cam }];
    let full = shape_loss(&g, &g, &sil, &LossConfig::default(), &cfg).unwrap();
    let bce_only = LossConfig {
        w_sym: 0.0,
        w_proj: 0.0,
        ..LossConfig::default()
    };
    let bce = shape_loss(&g, &g, &[], &bce_only, &cfg).unwrap();
    assert!((full - bce).abs() < 1e-15, "{full} vs {bce}");
    assert!(bce < 1e-6);
}

#[test]
fn inversion_objective_is_zero_for_perfect_symmetric_fit() {
    let rows = [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]];
    let g = grid((0..24).map(|i| [0.2, 0.7, 0.7, 0.2][i % 4]).collect());
    let v = inversion_objective(&[(&rows, &rows), (&rows, &rows)], Some(&g), &LossConfig::default()).unwrap();
    assert_eq!(v, 0.0);
}
