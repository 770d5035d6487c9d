//! Scalar objectives: photometric, shape (BCE + symmetry + projection) and the
//! single-image inversion objective.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::image::Image;
use crate::math::{Aabb, Camera};
use crate::render::{silhouette_on_tape, RenderConfig};
use crate::voxel::{mirror_values, VoxelGrid};

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before logarithms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of occupied voxels in the cross entropy; penalizes false negatives.
    pub gamma: f64,
    pub w_sym: f64,
    pub w_proj: f64,
    pub w_sym_inference: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            w_sym: 0.1,
            w_proj: 1.0,
            w_sym_inference: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return invalid(format!("gamma must be in (0, 1), got {}", self.gamma));
        }
        for (name, w) in [("w_sym", self.w_sym), ("w_proj", self.w_proj), ("w_sym_inference", self.w_sym_inference)] {
            if !(w >= 0.0) {
                return invalid(format!("{name} must be >= 0, got {w}"));
            }
        }
        Ok(())
    }
}

/// Mean over rays of the squared RGB error.
pub fn photometric_loss(predicted: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if predicted.len() != target.len() {
        return shape_err(format!("{} predicted rays vs {} targets", predicted.len(), target.len()));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|j| (p[j] - t[j]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / predicted.len() as f64)
}

/// `colors` is `rays x 3`; `target` holds the matching flattened RGB values.
pub fn photometric_on_tape(tape: &mut Tape, colors: Var, target: Rc<Vec<f64>>) -> Var {
    tape.sq_err_mean(colors, target)
}

/// `mean((g - mirror(g))^2)` for a `1 x n` grid buffer.
pub fn symmetry_on_tape(tape: &mut Tape, grid: Var, dims: [usize; 3]) -> Var {
    let m = tape.mirror_x(grid, dims);
    tape.mean_sq_diff(grid, m)
}

pub fn symmetry_term(grid: &VoxelGrid) -> f64 {
    let m = mirror_values(grid.dims, &grid.values);
    grid.values.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / grid.len() as f64
}

pub fn weighted_bce(pred: &[f64], target: &[f64], gamma: f64) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(q, t)| {
            let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
            gamma * t * q.ln() + (1.0 - gamma) * (1.0 - t) * (1.0 - q).ln()
        })
        .sum();
    -s / pred.len() as f64
}

/// A reference mask and the camera that produced it.
#[derive(Clone, Debug)]
pub struct SilhouetteTarget<'a> {
    pub mask: &'a Image,
    pub camera: &'a Camera,
}

/// Mean squared silhouette error of a tape grid against one mask.
pub fn projection_on_tape(
    tape: &mut Tape,
    grid: Var,
    dims: [usize; 3],
    bounds: &Aabb,
    target: &SilhouetteTarget<'_>,
    render: &RenderConfig,
    seed: u64,
) -> Var {
    let cam = target.camera;
    let pixels: Vec<usize> = (0..cam.width * cam.height).collect();
    let sil = silhouette_on_tape(tape, grid, dims, bounds, cam, &pixels, render, seed);
    tape.sq_err_mean(sil, Rc::new(target.mask.data.clone()))
}

/// Three-term shape loss of a tape grid against ground-truth occupancy.
#[allow(clippy::too_many_arguments)]
pub fn shape_loss_on_tape(
    tape: &mut Tape,
    grid: Var,
    dims: [usize; 3],
    bounds: &Aabb,
    gt: Rc<Vec<f64>>,
    silhouettes: &[SilhouetteTarget<'_>],
    cfg: &LossConfig,
    render: &RenderConfig,
    seed: u64,
) -> Var {
    let bce = tape.weighted_bce(grid, gt, cfg.gamma, BCE_EPS);
    let mut terms = vec![(bce, 1.0)];
    if cfg.w_sym > 0.0 {
        terms.push((symmetry_on_tape(tape, grid, dims), cfg.w_sym));
    }
    if cfg.w_proj > 0.0 {
        for (j, s) in silhouettes.iter().enumerate() {
            let p = projection_on_tape(tape, grid, dims, bounds, s, render, seed.wrapping_add(j as u64));
            terms.push((p, cfg.w_proj));
        }
    }
    tape.lin_comb(&terms)
}

/// Evaluates the shape loss of `pred` against `gt`.
pub fn shape_loss(
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    silhouettes: &[SilhouetteTarget<'_>],
    cfg: &LossConfig,
    render: &RenderConfig,
) -> Result<f64> {
    if !pred.same_layout(gt) {
        return shape_err(format!("grid layouts differ: {:?} vs {:?}", pred.dims, gt.dims));
    }
    for s in silhouettes {
        if s.mask.width != s.camera.width || s.mask.height != s.camera.height || s.mask.channels != 1 {
            return shape_err("silhouette mask must be single-channel at camera resolution");
        }
    }
    let mut tape = Tape::new();
    let g = tape.constant(pred.values.clone(), 1, pred.len());
    let l = shape_loss_on_tape(
        &mut tape,
        g,
        pred.dims,
        &pred.bounds,
        Rc::new(gt.values.clone()),
        silhouettes,
        cfg,
        render,
        render.rng_seed,
    );
    Ok(tape.scalar(l))
}

/// Inversion objective from already-rendered rays: photometric error over
/// every `(predicted, target)` group averaged across groups (the original view
/// and optionally its mirrored pair) plus the weighted scaffold symmetry.
pub fn inversion_objective(groups: &[(&[[f64; 3]], &[[f64; 3]])], scaffold: Option<&VoxelGrid>, cfg: &LossConfig) -> Result<f64> {
    let mut photo = 0.0;
    for (p, t) in groups {
        photo += photometric_loss(p, t)?;
    }
    if !groups.is_empty() {
        photo /= groups.len() as f64;
    }
    let sym = scaffold.map_or(0.0, symmetry_term);
    Ok(photo + cfg.w_sym_inference * sym)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;

    #[test]
    fn photometric_examples() {
        assert_eq!(photometric_loss(&[[0.2, 0.3, 0.4]], &[[0.2, 0.3, 0.4]]).unwrap(), 0.0);
        assert_eq!(photometric_loss(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 1.0);
        let a = [[0.1, 0.2, 0.3], [0.9, 0.5, 0.0], [0.4, 0.4, 0.4]];
        let b = [[0.0, 0.2, 0.6], [0.1, 0.5, 0.2], [0.3, 0.3, 0.3]];
        let (ra, rb): (Vec<_>, Vec<_>) = (a.iter().rev().copied().collect(), b.iter().rev().copied().collect());
        assert_eq!(photometric_loss(&a, &b).unwrap(), photometric_loss(&ra, &rb).unwrap());
        assert!(photometric_loss(&a[..2], &b).is_err());
    }

    #[test]
    fn shape_loss_examples() {
        let off = LossConfig {
            w_sym: 0.0,
            w_proj: 0.0,
            ..Default::default()
        };
        let half = VoxelGrid::filled([4, 4, 4], Aabb::unit(), 0.5);
        let ones = VoxelGrid::filled([4, 4, 4], Aabb::unit(), 1.0);
        let l = shape_loss(&half, &ones, &[], &off, &RenderConfig::default()).unwrap();
        assert!((l - 0.8 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.5545).abs() < 1e-4);

        // Exact, symmetric prediction whose projections match the masks.
        let mut vals = vec![0.0; 64];
        for z in 1..3 {
            for y in 1..3 {
                for x in 1..3 {
                    vals[(z * 4 + y) * 4 + x] = 1.0;
                }
            }
        }
        let gt = VoxelGrid::new([4, 4, 4], Aabb::unit(), vals).unwrap();
        let rcfg = RenderConfig {
            jitter: false,
            ..Default::default()
        };
        let cams: Vec<Camera> = [Vec3::new(0.0, 0.0, -2.0), Vec3::new(2.0, 0.5, 0.0)]
            .iter()
            .map(|e| Camera::look_at(*e, Vec3::ZERO, 40.0, 8, 8))
            .collect();
        let masks: Vec<Image> = cams.iter().map(|c| crate::render::project_silhouette(&gt, c, &rcfg)).collect();
        let sil: Vec<_> = masks.iter().zip(&cams).map(|(m, c)| SilhouetteTarget { mask: m, camera: c }).collect();
        let l = shape_loss(&gt, &gt, &sil, &LossConfig::default(), &rcfg).unwrap();
        assert!(l < 1e-5, "{l}");
        assert_eq!(symmetry_term(&gt), 0.0);
        assert!(shape_loss(&gt, &VoxelGrid::filled([2, 2, 2], Aabb::unit(), 0.0), &[], &off, &rcfg).is_err());
    }

    #[test]
    fn bce_stationary_point() {
        let gamma = 0.8;
        for a in [0.0, 0.3, 0.7, 1.0] {
            let star = gamma * a / (gamma * a + (1.0 - gamma) * (1.0 - a));
            if !(0.01..=0.99).contains(&star) {
                continue;
            }
            let h = 1e-6;
            let d = (weighted_bce(&[star + h], &[a], gamma) - weighted_bce(&[star - h], &[a], gamma)) / (2.0 * h);
            assert!(d.abs() < 1e-6, "{a}: {d}");
        }
    }

    #[test]
    fn inversion_symmetry_term() {
        let g = VoxelGrid::new([2, 1, 1], Aabb::unit(), vec![0.9, 0.1]).unwrap();
        assert!((symmetry_term(&g) - 0.64).abs() < 1e-12);
        let cfg = LossConfig::default();
        let rays = [[0.3, 0.2, 0.1]];
        let sym = VoxelGrid::filled([2, 1, 1], Aabb::unit(), 0.4);
        assert_eq!(inversion_objective(&[(&rays, &rays)], Some(&sym), &cfg).unwrap(), 0.0);
        let v = inversion_objective(&[(&rays, &rays)], Some(&g), &cfg).unwrap();
        assert!((v - 0.064).abs() < 1e-12);
    }
}
