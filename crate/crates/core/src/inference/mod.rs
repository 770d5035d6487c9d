//! Single-image fitting: shape stage, appearance stage, the four scaffold
//! variants, symmetry augmentation and novel-view synthesis.

mod camera;
mod hog;

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use camera::{estimate_camera, resolve_camera, CameraEstimate};
pub use hog::{hog_distance, hog_features, retrieve_camera, HOG_LEN};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::io::write_atomic;
use crate::losses::{photometric_on_tape, projection_on_tape, symmetry_on_tape, LossConfig, SilhouetteTarget};
use crate::math::{Aabb, Camera};
use crate::metrics::mse;
use crate::nets::{
    load_srft, save_srft, AppearanceNetwork, Gradients, LatentCode, Model, ParamSet, ParamTensor, ShapeNetwork, APPEARANCE_META,
    SHAPE_META,
};
use crate::render::{mix_seed, plan_rays, render_image, render_plan_on_tape, RenderConfig, Scaffold, TapeScaffold};
use crate::train::{adam_step, AdamConfig, AdamState};
use crate::voxel::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// V1: no scaffold, occupancy input pinned to 1.
    ConditionalNerf,
    /// V2: scaffold decoded from a fitted shape code.
    ShapeFromNr,
    /// V3: scaffold fitted to a foreground mask.
    ShapeFromMask,
    /// V4: ground-truth scaffold.
    ShapeFromGt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ConditionalNerf, Variant::ShapeFromNr, Variant::ShapeFromMask, Variant::ShapeFromGt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ConditionalNerf => "conditional-nerf",
            Variant::ShapeFromNr => "shape-from-nr",
            Variant::ShapeFromMask => "shape-from-mask",
            Variant::ShapeFromGt => "shape-from-gt",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" | "conditional-nerf" => Ok(Variant::ConditionalNerf),
            "v2" | "shape-from-nr" => Ok(Variant::ShapeFromNr),
            "v3" | "shape-from-mask" => Ok(Variant::ShapeFromMask),
            "v4" | "shape-from-gt" => Ok(Variant::ShapeFromGt),
            _ => invalid(format!("unknown variant {s:?} (v1..v4 or conditional-nerf, shape-from-nr, shape-from-mask, shape-from-gt)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Only latent codes move.
    CodeOnly,
    /// Latent codes and the stage's network move.
    CodePlusNetwork,
}

impl FitMode {
    pub fn name(self) -> &'static str {
        match self {
            FitMode::CodeOnly => "code-only",
            FitMode::CodePlusNetwork => "code-plus-network",
        }
    }

    fn networks(self) -> bool {
        self == FitMode::CodePlusNetwork
    }
}

impl FromStr for FitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "code-only" | "code_only" => Ok(FitMode::CodeOnly),
            "code-plus-network" | "code_plus_network" => Ok(FitMode::CodePlusNetwork),
            _ => invalid(format!("unknown mode {s:?} (code-only or code-plus-network)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Total optimization budget across stages.
    pub iterations: usize,
    /// Share of the budget spent on the shape stage for two-stage variants.
    pub stage1_fraction: f64,
    pub adam: AdamConfig,
    /// Learning rate for latent codes; `None` shares the network rate.
    pub latent_lr: Option<f64>,
    /// Learning rate for camera pose increments.
    pub pose_lr: f64,
    pub rays_per_step: usize,
    pub seed: u64,
    /// Background tolerance for mask extraction.
    pub mask_tol: f64,
    pub render: RenderConfig,
    pub loss: LossConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            stage1_fraction: 0.4,
            adam: AdamConfig::default(),
            latent_lr: Some(1e-2),
            pose_lr: 5e-3,
            rays_per_step: 128,
            seed: 0,
            mask_tol: 0.05,
            render: RenderConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return invalid("stage1_fraction must be in [0, 1]");
        }
        if !(self.adam.lr > 0.0) || !(self.pose_lr > 0.0) || self.latent_lr.is_some_and(|l| !(l > 0.0)) {
            return invalid("learning rates must be positive");
        }
        if self.rays_per_step == 0 {
            return invalid("rays_per_step must be positive");
        }
        self.loss.validate()
    }

    pub fn stage1_iterations(&self) -> usize {
        (self.stage1_fraction * self.iterations as f64).round() as usize
    }

    fn latent_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.latent_lr.unwrap_or(self.adam.lr),
            ..self.adam
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Shape,
    Mask,
    Appearance,
    Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub theta: LatentCode,
    pub phi: LatentCode,
    pub shape: ShapeNetwork,
    pub appearance: AppearanceNetwork,
    pub camera: Camera,
    /// `None` for the scaffold-free variant.
    pub scaffold: Option<VoxelGrid>,
    pub history: Vec<FitRecord>,
    pub variant: Variant,
    pub mode: FitMode,
    pub symmetry: bool,
    pub iterations: usize,
    /// Mean squared error of the re-rendered input view.
    pub residual: f64,
}

#[derive(Serialize, Deserialize)]
struct FitSidecar {
    variant: Variant,
    mode: FitMode,
    symmetry: bool,
    iterations: usize,
    final_loss: f64,
    residual: f64,
    camera: Camera,
    history: Vec<FitRecord>,
}

impl FitResult {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn losses(&self, stage: Stage) -> Vec<f64> {
        self.history.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect()
    }

    fn scaffold_view(&self) -> Scaffold<'_> {
        match &self.scaffold {
            Some(g) => Scaffold::Grid(g),
            None => Scaffold::Absent,
        }
    }

    /// Writes `{stem}.srft` (networks, codes, scaffold) and `{stem}.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut tensors: Vec<ParamTensor> = vec![self.shape.meta_tensor(), self.appearance.meta_tensor()];
        tensors.extend(self.shape.params.iter().cloned());
        tensors.extend(self.appearance.params.iter().cloned());
        tensors.push(self.theta.as_tensor("theta"));
        tensors.push(self.phi.as_tensor("phi"));
        if let Some(g) = &self.scaffold {
            tensors.push(ParamTensor::new("scaffold", g.dims.to_vec(), g.values.clone())?);
        }
        save_srft(&dir.join(format!("{stem}.srft")), &tensors)?;
        let side = FitSidecar {
            variant: self.variant,
            mode: self.mode,
            symmetry: self.symmetry,
            iterations: self.iterations,
            final_loss: self.final_loss(),
            residual: self.residual,
            camera: self.camera,
            history: self.history.clone(),
        };
        write_atomic(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(&side)?)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let side: FitSidecar = serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
        let tensors = load_srft(&dir.join(format!("{stem}.srft")))?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("fit checkpoint lacks {name}")))
        };
        let shape_cfg = ShapeNetwork::config_from_meta(find(SHAPE_META)?)?;
        let app_cfg = AppearanceNetwork::config_from_meta(find(APPEARANCE_META)?)?;
        let theta = LatentCode(find("theta")?.values.clone());
        let phi = LatentCode(find("phi")?.values.clone());
        let scaffold = match tensors.iter().find(|t| t.name == "scaffold") {
            Some(t) => {
                let dims: [usize; 3] = t
                    .dims
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::Format("scaffold must be 3-d".into()))?;
                Some(VoxelGrid::new(dims, Aabb::unit(), t.values.clone())?)
            }
            None => None,
        };
        let (mut sp, mut ap) = (ParamSet::new(), ParamSet::new());
        for t in tensors {
            if t.name.starts_with("shape.") {
                sp.insert(t)?;
            } else if t.name.starts_with("appearance.") {
                ap.insert(t)?;
            }
        }
        Ok(Self {
            theta,
            phi,
            shape: ShapeNetwork::from_params(shape_cfg, sp)?,
            appearance: AppearanceNetwork::from_params(app_cfg, ap)?,
            camera: side.camera,
            scaffold,
            history: side.history,
            variant: side.variant,
            mode: side.mode,
            symmetry: side.symmetry,
            iterations: side.iterations,
            residual: side.residual,
        })
    }
}

/// Renders the fitted object from `camera`.
pub fn render_novel_view(fit: &FitResult, camera: &Camera, cfg: &RenderConfig) -> Image {
    render_image(&fit.appearance, fit.scaffold_view(), &fit.phi, camera, cfg)
}

/// 1 where any channel differs from `bg` by more than `tol`.
pub fn mask_from_background(image: &Image, bg: [f64; 3], tol: f64) -> Image {
    let data = image
        .data
        .chunks_exact(image.channels)
        .map(|p| {
            let d = p.iter().enumerate().map(|(c, v)| (v - bg[c.min(2)]).abs()).fold(0.0, f64::max);
            if d > tol {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Image {
        width: image.width,
        height: image.height,
        channels: 1,
        data,
    }
}

/// An observed view and, with symmetry augmentation, its mirrored pair.
fn observation_pairs(image: &Image, camera: &Camera, symmetry: bool) -> Vec<(Camera, Image)> {
    let mut out = vec![(*camera, image.clone())];
    if symmetry {
        out.push((camera.mirrored(), image.flip_horizontal()));
    }
    out
}

/// Splits the ray budget evenly across observations.
fn sample_pixels<R: Rng>(rng: &mut R, n_pixels: usize, groups: usize, rays: usize) -> Vec<Vec<usize>> {
    let per = (rays / groups).max(1).min(n_pixels);
    (0..groups).map(|_| sample(rng, n_pixels, per).into_vec()).collect()
}

fn gather(image: &Image, pixels: &[usize]) -> Rc<Vec<f64>> {
    Rc::new(pixels.iter().flat_map(|p| image.pixel(*p).iter().copied()).collect())
}

fn check_finite(loss: f64, step: usize, stage: Stage) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite {
        step,
        phase: format!("{stage:?}").to_lowercase(),
        value: loss,
    })
}

/// Average photometric error over every observation on the tape.
#[allow(clippy::too_many_arguments)]
fn photometric_terms(
    tape: &mut Tape,
    appearance: &AppearanceNetwork,
    params: &crate::nets::ParamVars,
    obs: &[(Camera, Image)],
    pixels: &[Vec<usize>],
    plan_scaffold: Scaffold<'_>,
    tape_scaffold: TapeScaffold,
    phi: Var,
    pose: Option<Var>,
    cfg: &InferenceConfig,
    seed: u64,
) -> Vec<(Var, f64)> {
    let w = 1.0 / obs.len() as f64;
    obs.iter()
        .zip(pixels)
        .enumerate()
        .map(|(g, ((cam, img), px))| {
            let plan = plan_rays(cam, px, plan_scaffold, &cfg.render, mix_seed(seed, g as u64));
            let out = render_plan_on_tape(tape, appearance, params, &plan, tape_scaffold, phi, pose, cfg.render.background);
            (photometric_on_tape(tape, out.color, gather(img, px)), w)
        })
        .collect()
}

/// Output of the shape stage.
#[derive(Clone, Debug)]
pub struct ShapeStage {
    pub theta: LatentCode,
    pub shape: ShapeNetwork,
    pub phi: LatentCode,
    pub history: Vec<FitRecord>,
}

impl ShapeStage {
    pub fn scaffold(&self) -> VoxelGrid {
        self.shape.decode(&self.theta)
    }
}

/// Shape stage: appearance network frozen; moves the shape code, the shape
/// network (unless code-only) and the appearance code.
#[allow(clippy::too_many_arguments)]
pub fn stage1_fit(
    image: &Image,
    camera: &Camera,
    shape: &ShapeNetwork,
    appearance: &AppearanceNetwork,
    theta: &LatentCode,
    phi: &LatentCode,
    mode: FitMode,
    symmetry: bool,
    iterations: usize,
    cfg: &InferenceConfig,
) -> Result<ShapeStage> {
    let mut st = ShapeStage {
        theta: theta.clone(),
        shape: shape.clone(),
        phi: phi.clone(),
        history: Vec::new(),
    };
    let obs = observation_pairs(image, camera, symmetry);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 11));
    let (mut net_state, mut code_state) = (AdamState::new(), AdamState::new());
    let dims = shape.config.dims();
    let bounds = Aabb::unit();
    for step in 0..iterations {
        let pixels = sample_pixels(&mut rng, image.n_pixels(), obs.len(), cfg.rays_per_step);
        let seed = rng.random();
        let mut tape = Tape::new();
        let sp = st.shape.params.to_tape(&mut tape, mode.networks());
        let tv = tape.param(st.theta.0.clone(), 1, st.theta.dim());
        let grid = st.shape.decode_on_tape(&mut tape, &sp, tv);
        let current = VoxelGrid {
            dims,
            bounds,
            values: tape.value(grid).to_vec(),
        };
        let ap = appearance.params.to_tape(&mut tape, false);
        let pv = tape.param(st.phi.0.clone(), 1, st.phi.dim());
        let sc = TapeScaffold::Grid { values: grid, dims, bounds };
        let mut terms = photometric_terms(&mut tape, appearance, &ap, &obs, &pixels, Scaffold::Grid(&current), sc, pv, None, cfg, seed);
        terms.push((symmetry_on_tape(&mut tape, grid, dims), cfg.loss.w_sym_inference));
        let loss = tape.lin_comb(&terms);
        let (value, grads) = tape.backward(loss)?;
        check_finite(value, step, Stage::Shape)?;
        if mode.networks() {
            let mut g = Gradients::default();
            g.collect(&tape, &grads, &sp);
            adam_step(&mut net_state, &mut st.shape.params, &g, &cfg.adam);
        }
        let la = cfg.latent_adam();
        let g = grads.get_or_zeros(tv, st.theta.dim());
        code_state.update("theta", &mut st.theta.0, &g, &la);
        let g = grads.get_or_zeros(pv, st.phi.dim());
        code_state.update("phi", &mut st.phi.0, &g, &la);
        st.history.push(FitRecord {
            step,
            stage: Stage::Shape,
            loss: value,
        });
    }
    Ok(st)
}

/// Output of the appearance stage.
#[derive(Clone, Debug)]
pub struct AppearanceStage {
    pub phi: LatentCode,
    pub appearance: AppearanceNetwork,
    pub history: Vec<FitRecord>,
}

/// Appearance stage: scaffold frozen; moves the appearance code and (unless
/// code-only) the appearance network.
#[allow(clippy::too_many_arguments)]
pub fn stage2_fit(
    image: &Image,
    camera: &Camera,
    scaffold: Scaffold<'_>,
    appearance: &AppearanceNetwork,
    phi: &LatentCode,
    mode: FitMode,
    symmetry: bool,
    iterations: usize,
    cfg: &InferenceConfig,
) -> Result<AppearanceStage> {
    let mut st = AppearanceStage {
        phi: phi.clone(),
        appearance: appearance.clone(),
        history: Vec::new(),
    };
    let obs = observation_pairs(image, camera, symmetry);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 22));
    let (mut net_state, mut code_state) = (AdamState::new(), AdamState::new());
    for step in 0..iterations {
        let pixels = sample_pixels(&mut rng, image.n_pixels(), obs.len(), cfg.rays_per_step);
        let seed = rng.random();
        let mut tape = Tape::new();
        let ap = st.appearance.params.to_tape(&mut tape, mode.networks());
        let pv = tape.param(st.phi.0.clone(), 1, st.phi.dim());
        let sc = TapeScaffold::from_scaffold(&mut tape, scaffold);
        let terms = photometric_terms(&mut tape, &st.appearance, &ap, &obs, &pixels, scaffold, sc, pv, None, cfg, seed);
        let loss = tape.lin_comb(&terms);
        let (value, grads) = tape.backward(loss)?;
        check_finite(value, step, Stage::Appearance)?;
        if mode.networks() {
            let mut g = Gradients::default();
            g.collect(&tape, &grads, &ap);
            adam_step(&mut net_state, &mut st.appearance.params, &g, &cfg.adam);
        }
        let g = grads.get_or_zeros(pv, st.phi.dim());
        code_state.update("phi", &mut st.phi.0, &g, &cfg.latent_adam());
        st.history.push(FitRecord {
            step,
            stage: Stage::Appearance,
            loss: value,
        });
    }
    Ok(st)
}

/// Output of a mask fit.
#[derive(Clone, Debug)]
pub struct MaskStage {
    pub theta: LatentCode,
    pub shape: ShapeNetwork,
    pub history: Vec<FitRecord>,
}

/// Fits the shape code (and network unless code-only) so the projected
/// silhouettes match `masks`, plus the weighted symmetry term.
pub fn shape_from_mask_fit(
    masks: &[(Image, Camera)],
    shape: &ShapeNetwork,
    theta: &LatentCode,
    mode: FitMode,
    iterations: usize,
    cfg: &InferenceConfig,
) -> Result<MaskStage> {
    for (m, c) in masks {
        if m.channels != 1 || m.width != c.width || m.height != c.height {
            return invalid("masks must be single-channel at camera resolution");
        }
        if m.data.iter().all(|v| *v == 0.0) {
            eprintln!("warning: empty mask; the fitted shape will be degenerate");
        }
    }
    let mut st = MaskStage {
        theta: theta.clone(),
        shape: shape.clone(),
        history: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 33));
    let (mut net_state, mut code_state) = (AdamState::new(), AdamState::new());
    let dims = shape.config.dims();
    let w = 1.0 / masks.len().max(1) as f64;
    for step in 0..iterations {
        let seed: u64 = rng.random();
        let mut tape = Tape::new();
        let sp = st.shape.params.to_tape(&mut tape, mode.networks());
        let tv = tape.param(st.theta.0.clone(), 1, st.theta.dim());
        let grid = st.shape.decode_on_tape(&mut tape, &sp, tv);
        let mut terms: Vec<(Var, f64)> = masks
            .iter()
            .enumerate()
            .map(|(j, (m, c))| {
                let t = SilhouetteTarget { mask: m, camera: c };
                (projection_on_tape(&mut tape, grid, dims, &Aabb::unit(), &t, &cfg.render, mix_seed(seed, j as u64)), w)
            })
            .collect();
        terms.push((symmetry_on_tape(&mut tape, grid, dims), cfg.loss.w_sym));
        let loss = tape.lin_comb(&terms);
        let (value, grads) = tape.backward(loss)?;
        check_finite(value, step, Stage::Mask)?;
        if mode.networks() {
            let mut g = Gradients::default();
            g.collect(&tape, &grads, &sp);
            adam_step(&mut net_state, &mut st.shape.params, &g, &cfg.adam);
        }
        let g = grads.get_or_zeros(tv, st.theta.dim());
        code_state.update("theta", &mut st.theta.0, &g, &cfg.latent_adam());
        st.history.push(FitRecord {
            step,
            stage: Stage::Mask,
            loss: value,
        });
    }
    Ok(st)
}

/// Variant-specific inputs for [`invert`].
#[derive(Clone, Debug, Default)]
pub struct InvertInputs<'a> {
    pub mask: Option<&'a Image>,
    pub gt_voxels: Option<&'a VoxelGrid>,
}

/// Initial codes: the mean of the trained tables.
pub fn initial_codes(model: &Model) -> (LatentCode, LatentCode) {
    let theta = model.mean_theta().unwrap_or_else(|| LatentCode::zeros(model.shape.config.latent_dim));
    let phi = model.mean_phi().unwrap_or_else(|| LatentCode::zeros(model.appearance.config.latent_dim));
    (theta, phi)
}

/// Fits `image` seen from `camera` with the chosen variant.
#[allow(clippy::too_many_arguments)]
pub fn invert(
    model: &Model,
    image: &Image,
    camera: &Camera,
    variant: Variant,
    mode: FitMode,
    symmetry: bool,
    inputs: &InvertInputs<'_>,
    cfg: &InferenceConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if image.channels != 3 || image.width != camera.width || image.height != camera.height {
        return invalid("image must be RGB at camera resolution");
    }
    if (variant == Variant::ConditionalNerf) != model.conditional {
        return invalid(format!(
            "variant {variant} needs a {} checkpoint",
            if model.conditional { "scaffold" } else { "conditional" }
        ));
    }
    let (theta0, phi0) = initial_codes(model);
    let n1 = cfg.stage1_iterations();
    let n2 = cfg.iterations - n1;
    let mut history = Vec::new();
    let (theta, shape, phi, scaffold, n2) = match variant {
        Variant::ConditionalNerf => (theta0, model.shape.clone(), phi0, None, cfg.iterations),
        Variant::ShapeFromGt => {
            let gt = inputs.gt_voxels.ok_or_else(|| Error::InvalidArgument("shape-from-gt needs ground-truth voxels".into()))?;
            (theta0, model.shape.clone(), phi0, Some(gt.clone()), cfg.iterations)
        }
        Variant::ShapeFromNr => {
            let s1 = stage1_fit(image, camera, &model.shape, &model.appearance, &theta0, &phi0, mode, symmetry, n1, cfg)?;
            history.extend(s1.history.iter().cloned());
            let grid = s1.scaffold();
            (s1.theta, s1.shape, s1.phi, Some(grid), n2)
        }
        Variant::ShapeFromMask => {
            let mask = match inputs.mask {
                Some(m) => m.clone(),
                None => mask_from_background(image, cfg.render.background, cfg.mask_tol),
            };
            let mut masks = vec![(mask.clone(), *camera)];
            if symmetry {
                masks.push((mask.flip_horizontal(), camera.mirrored()));
            }
            let s = shape_from_mask_fit(&masks, &model.shape, &theta0, mode, n1, cfg)?;
            history.extend(s.history.iter().cloned());
            let grid = s.shape.decode(&s.theta);
            (s.theta, s.shape, phi0, Some(grid), n2)
        }
    };
    let sc = match &scaffold {
        Some(g) => Scaffold::Grid(g),
        None => Scaffold::Absent,
    };
    let s2 = stage2_fit(image, camera, sc, &model.appearance, &phi, mode, symmetry, n2, cfg)?;
    history.extend(s2.history.iter().cloned());
    let mut fit = FitResult {
        theta,
        phi: s2.phi,
        shape,
        appearance: s2.appearance,
        camera: *camera,
        scaffold,
        history,
        variant,
        mode,
        symmetry,
        iterations: cfg.iterations,
        residual: 0.0,
    };
    fit.residual = mse(&render_novel_view(&fit, camera, &cfg.render), image)?;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_from_background_examples() {
        let white = Image::filled(4, 4, &[1.0; 3]);
        assert!(mask_from_background(&white, [1.0; 3], 0.05).data.iter().all(|v| *v == 0.0));
        assert!(mask_from_background(&white, [1.0; 3], 0.0).data.iter().all(|v| *v == 0.0));
        let mut one = white.clone();
        one.set(5, &[0.0, 0.0, 0.0]);
        let m = mask_from_background(&one, [1.0; 3], 0.05);
        assert_eq!(m.data.iter().sum::<f64>(), 1.0);
        assert_eq!(m.data[5], 1.0);
    }

    #[test]
    fn variant_and_mode_parse() {
        assert_eq!("v2".parse::<Variant>().unwrap(), Variant::ShapeFromNr);
        assert_eq!("shape-from-gt".parse::<Variant>().unwrap(), Variant::ShapeFromGt);
        assert!("v5".parse::<Variant>().is_err());
        assert_eq!("code-only".parse::<FitMode>().unwrap(), FitMode::CodeOnly);
    }
}
