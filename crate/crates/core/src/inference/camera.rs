//! Camera refinement through the differentiable render path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_finite, initial_codes, photometric_terms, retrieve_camera, sample_pixels, FitRecord, InferenceConfig, Stage};
use crate::autodiff::Tape;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::losses::symmetry_on_tape;
use crate::math::{Aabb, Camera, Vec3};
use crate::nets::{LatentCode, Model};
use crate::render::{mix_seed, Scaffold, TapeScaffold};
use crate::train::{moving_average, AdamConfig, AdamState};
use crate::voxel::VoxelGrid;

/// Steps over which a tenfold loss increase counts as divergence.
const DIVERGENCE_WINDOW: usize = 100;
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct CameraEstimate {
    pub camera: Camera,
    pub theta: LatentCode,
    pub phi: LatentCode,
    pub history: Vec<FitRecord>,
}

/// Jointly refines the camera (axis-angle and translation increments composed
/// onto the current estimate each step) and both latent codes; networks stay
/// frozen.
#[allow(clippy::too_many_arguments)]
pub fn estimate_camera(
    image: &Image,
    model: &Model,
    init: &Camera,
    theta: &LatentCode,
    phi: &LatentCode,
    iterations: usize,
    cfg: &InferenceConfig,
) -> Result<CameraEstimate> {
    init.validate()?;
    if model.conditional {
        return invalid("camera estimation needs a scaffold checkpoint");
    }
    let mut est = CameraEstimate {
        camera: *init,
        theta: theta.clone(),
        phi: phi.clone(),
        history: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 44));
    let mut state = AdamState::new();
    let pose_adam = AdamConfig { lr: cfg.pose_lr, ..cfg.adam };
    let code_adam = AdamConfig {
        lr: cfg.latent_lr.unwrap_or(cfg.adam.lr),
        ..cfg.adam
    };
    let dims = model.shape.config.dims();
    let bounds = Aabb::unit();
    let mut losses = Vec::with_capacity(iterations);
    for step in 0..iterations {
        let pixels = sample_pixels(&mut rng, image.n_pixels(), 1, cfg.rays_per_step);
        let seed = rng.random();
        let mut tape = Tape::new();
        let sp = model.shape.params.to_tape(&mut tape, false);
        let tv = tape.param(est.theta.0.clone(), 1, est.theta.dim());
        let grid = model.shape.decode_on_tape(&mut tape, &sp, tv);
        let current = VoxelGrid {
            dims,
            bounds,
            values: tape.value(grid).to_vec(),
        };
        let ap = model.appearance.params.to_tape(&mut tape, false);
        let pv = tape.param(est.phi.0.clone(), 1, est.phi.dim());
        let pose = tape.param(vec![0.0; 6], 1, 6);
        let sc = TapeScaffold::Grid { values: grid, dims, bounds };
        let obs = [(est.camera, image.clone())];
        let mut terms = photometric_terms(
            &mut tape,
            &model.appearance,
            &ap,
            &obs,
            &pixels,
            Scaffold::Grid(&current),
            sc,
            pv,
            Some(pose),
            cfg,
            seed,
        );
        terms.push((symmetry_on_tape(&mut tape, grid, dims), cfg.loss.w_sym_inference));
        let loss = tape.lin_comb(&terms);
        let (value, grads) = tape.backward(loss)?;
        check_finite(value, step, Stage::Camera)?;
        let mut inc = [0.0; 6];
        state.update("pose", &mut inc, &grads.get_or_zeros(pose, 6), &pose_adam);
        est.camera = est
            .camera
            .perturbed(Vec3::new(inc[0], inc[1], inc[2]), Vec3::new(inc[3], inc[4], inc[5]));
        let g = grads.get_or_zeros(tv, est.theta.dim());
        state.update("theta", &mut est.theta.0, &g, &code_adam);
        let g = grads.get_or_zeros(pv, est.phi.dim());
        state.update("phi", &mut est.phi.0, &g, &code_adam);
        est.history.push(FitRecord {
            step,
            stage: Stage::Camera,
            loss: value,
        });
        losses.push(value);
        if step >= DIVERGENCE_WINDOW {
            let ma = moving_average(&losses, 20);
            let (now, before) = (ma[step], ma[step - DIVERGENCE_WINDOW]);
            if now > DIVERGENCE_FACTOR * before {
                return Err(Error::Diverged(format!(
                    "camera loss rose from {before:.3e} to {now:.3e} over {DIVERGENCE_WINDOW} steps (step {step})"
                )));
            }
        }
    }
    Ok(est)
}

/// Retrieves the closest gallery camera by HOG distance, then refines it
/// starting from the mean latent codes.
pub fn resolve_camera(image: &Image, model: &Model, gallery: &[(Image, Camera)], iterations: usize, cfg: &InferenceConfig) -> Result<Camera> {
    let init = retrieve_camera(image, gallery)?;
    let (theta, phi) = initial_codes(model);
    Ok(estimate_camera(image, model, &init, &theta, &phi, iterations, cfg)?.camera)
}
