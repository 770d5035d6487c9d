//! Adam and generative latent optimization over a procedural dataset.
//!
//! Training runs in three phases:
//!
//! * `shape`: the shape decoder and per-object shape codes fit ground-truth
//!   occupancy and two random silhouettes per step.
//! * `appearance-gt`: the appearance network and per-object appearance codes
//!   fit ray colors with the ground-truth voxels as scaffold.
//! * `appearance-fit`: the same, with the decoded scaffold of each object.
//!
//! Conditional (scaffold-free) models skip the shape phase and pin occupancy
//! to 1.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, SceneData};
use crate::error::{invalid, Error, Result};
use crate::losses::{photometric_on_tape, shape_loss_on_tape, LossConfig, SilhouetteTarget};
use crate::nets::{AppearanceConfig, AppearanceNetwork, Gradients, LatentCode, Model, ParamSet, ShapeConfig, ShapeNetwork};
use crate::render::{mix_seed, plan_rays, render_plan_on_tape, RenderConfig, Scaffold, TapeScaffold};
use crate::voxel::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// First and second moments per named tensor. Each tensor keeps its own step
/// count so sparsely updated tensors (latent codes) get correct bias
/// correction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.t)
    }

    /// One bias-corrected Adam update of `values` with `grad`.
    pub fn update(&mut self, name: &str, values: &mut [f64], grad: &[f64], cfg: &AdamConfig) {
        assert_eq!(values.len(), grad.len(), "adam: {name} gradient length");
        let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; values.len()],
            v: vec![0.0; values.len()],
            t: 0,
        });
        st.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(st.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(st.t as i32);
        for i in 0..values.len() {
            let g = grad[i];
            st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
            st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = st.m[i] / c1;
            let vh = st.v[i] / c2;
            values[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Updates every tensor of `params` that has a gradient.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet, grads: &Gradients, cfg: &AdamConfig) {
    for t in params.iter_mut() {
        if let Some(g) = grads.get(&t.name) {
            state.update(&t.name, &mut t.values, g, cfg);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Learning rate for latent codes; `None` shares the network rate.
    pub latent_lr: Option<f64>,
    /// Appearance iterations (both appearance phases).
    pub iterations: usize,
    /// Shape-phase iterations; `None` means `iterations / 2`.
    pub shape_iterations: Option<usize>,
    pub seed: u64,
    pub pretrain_fraction: f64,
    pub rays_per_step: usize,
    pub latent_init_std: f64,
    /// Train a scaffold-free model.
    pub conditional: bool,
    pub render: RenderConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            latent_lr: None,
            iterations: 2000,
            shape_iterations: None,
            seed: 0,
            pretrain_fraction: 0.5,
            rays_per_step: 128,
            latent_init_std: 0.1,
            conditional: false,
            render: RenderConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) || self.latent_lr.is_some_and(|l| !(l > 0.0)) {
            return invalid("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.pretrain_fraction) {
            return invalid("pretrain_fraction must be in [0, 1]");
        }
        if self.rays_per_step == 0 || self.render.n_stratified == 0 || !(self.render.pdf_floor > 0.0) {
            return invalid("rays_per_step and n_stratified must be positive and pdf_floor > 0");
        }
        self.loss.validate()
    }

    pub fn shape_steps(&self) -> usize {
        if self.conditional {
            return 0;
        }
        self.shape_iterations.unwrap_or(self.iterations / 2)
    }

    pub fn pretrain_steps(&self) -> usize {
        if self.conditional {
            return self.iterations;
        }
        (self.pretrain_fraction * self.iterations as f64).round() as usize
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
pub enum Phase {
    Shape,
    AppearanceGt,
    AppearanceFit,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Shape => "shape",
            Phase::AppearanceGt => "appearance-gt",
            Phase::AppearanceFit => "appearance-fit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub history: Vec<LogRecord>,
}

impl TrainOutput {
    pub fn losses(&self, phase: Phase) -> Vec<f64> {
        self.history.iter().filter(|r| r.phase == phase).map(|r| r.loss).collect()
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.history {
            serde_json::to_writer(&mut buf, r)?;
            buf.write_all(b"\n")?;
        }
        crate::io::write_atomic(path, &buf)
    }
}

/// Fresh model for `ids` with seeded network weights and latent codes.
pub fn init_model(ids: &[String], shape_cfg: ShapeConfig, app_cfg: AppearanceConfig, cfg: &TrainConfig) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = ShapeNetwork::new(shape_cfg, &mut rng);
    let appearance = AppearanceNetwork::new(app_cfg, &mut rng);
    let mut theta = BTreeMap::new();
    let mut phi = BTreeMap::new();
    for id in ids {
        theta.insert(id.clone(), LatentCode::random(shape.config.latent_dim, cfg.latent_init_std, &mut rng));
        phi.insert(id.clone(), LatentCode::random(appearance.config.latent_dim, cfg.latent_init_std, &mut rng));
    }
    Model {
        shape,
        appearance,
        theta,
        phi,
        conditional: cfg.conditional,
    }
}

fn check_finite(loss: f64, step: usize, phase: Phase) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            phase: phase.name().into(),
            value: loss,
        })
    }
}

/// One shape-phase step on object `scene`; returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn shape_step(
    model: &mut Model,
    scene: &SceneData,
    views: [usize; 2],
    cfg: &TrainConfig,
    seed: u64,
    net_state: &mut AdamState,
    code_state: &mut AdamState,
) -> Result<f64> {
    let id = &scene.scene.id;
    let mut tape = Tape::new();
    let params = model.shape.params.to_tape(&mut tape, true);
    let theta = &model.theta[id];
    let tv = tape.param(theta.0.clone(), 1, theta.dim());
    let grid = model.shape.decode_on_tape(&mut tape, &params, tv);
    let sil: Vec<_> = views
        .iter()
        .map(|k| SilhouetteTarget {
            mask: &scene.views[*k].mask,
            camera: &scene.views[*k].camera,
        })
        .collect();
    let dims = model.shape.config.dims();
    let loss = shape_loss_on_tape(
        &mut tape,
        grid,
        dims,
        &scene.voxels.bounds,
        Rc::new(scene.voxels.values.clone()),
        &sil,
        &cfg.loss,
        &cfg.render,
        seed,
    );
    let (value, grads) = tape.backward(loss)?;
    let mut g = Gradients::default();
    g.collect(&tape, &grads, &params);
    adam_step(net_state, &mut model.shape.params, &g, &cfg.adam);
    let gt = grads.get_or_zeros(tv, theta.dim());
    let theta = model.theta.get_mut(id).expect("object code");
    code_state.update(&format!("theta/{id}"), &mut theta.0, &gt, &cfg.latent_adam());
    Ok(value)
}

/// One appearance step on a random pixel batch of one view; returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn appearance_step(
    model: &mut Model,
    id: &str,
    view: &crate::data::View,
    scaffold: Scaffold<'_>,
    pixels: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    net_state: &mut AdamState,
    code_state: &mut AdamState,
) -> Result<f64> {
    let plan = plan_rays(&view.camera, pixels, scaffold, &cfg.render, seed);
    let target: Vec<f64> = pixels.iter().flat_map(|p| view.image.pixel(*p).iter().copied()).collect();
    let mut tape = Tape::new();
    let params = model.appearance.params.to_tape(&mut tape, true);
    let phi = &model.phi[id];
    let pv = tape.param(phi.0.clone(), 1, phi.dim());
    let sc = TapeScaffold::from_scaffold(&mut tape, scaffold);
    let out = render_plan_on_tape(&mut tape, &model.appearance, &params, &plan, sc, pv, None, cfg.render.background);
    let loss = photometric_on_tape(&mut tape, out.color, Rc::new(target));
    let (value, grads) = tape.backward(loss)?;
    let mut g = Gradients::default();
    g.collect(&tape, &grads, &params);
    adam_step(net_state, &mut model.appearance.params, &g, &cfg.adam);
    let gp = grads.get_or_zeros(pv, phi.dim());
    let phi = model.phi.get_mut(id).expect("object code");
    code_state.update(&format!("phi/{id}"), &mut phi.0, &gp, &cfg.latent_adam());
    Ok(value)
}

/// Trains from a fresh initialization.
pub fn train_glo(dataset: &Dataset, shape_cfg: ShapeConfig, app_cfg: AppearanceConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    let ids: Vec<String> = dataset.scenes.iter().map(|s| s.scene.id.clone()).collect();
    let model = init_model(&ids, shape_cfg, app_cfg, cfg);
    train_glo_from(dataset, model, cfg, None)
}

/// Trains `model` on `dataset`. `progress` receives every log record.
pub fn train_glo_from(
    dataset: &Dataset,
    mut model: Model,
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&LogRecord)>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.scenes.is_empty() {
        return invalid("dataset has no objects");
    }
    for s in &dataset.scenes {
        if s.views.is_empty() {
            return invalid(format!("object {} has no views", s.scene.id));
        }
        if !model.theta.contains_key(&s.scene.id) || !model.phi.contains_key(&s.scene.id) {
            return invalid(format!("model has no latent codes for {}", s.scene.id));
        }
        if s.voxels.dims != model.shape.config.dims() {
            return invalid(format!(
                "object {} voxels are {:?} but the decoder emits {:?}",
                s.scene.id,
                s.voxels.dims,
                model.shape.config.dims()
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
    let start = Instant::now();
    let mut history = Vec::new();
    let mut log = |history: &mut Vec<LogRecord>, step, phase, loss| {
        let r = LogRecord {
            step,
            phase,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(p) = progress.as_mut() {
            p(&r);
        }
        history.push(r);
    };

    let (mut net_state, mut code_state) = (AdamState::new(), AdamState::new());
    for step in 0..cfg.shape_steps() {
        let scene = &dataset.scenes[rng.random_range(0..dataset.scenes.len())];
        let nv = scene.views.len();
        let views = if nv >= 2 {
            let v = sample(&mut rng, nv, 2);
            [v.index(0), v.index(1)]
        } else {
            [0, 0]
        };
        let seed = rng.random();
        let loss = shape_step(&mut model, scene, views, cfg, seed, &mut net_state, &mut code_state)?;
        check_finite(loss, step, Phase::Shape)?;
        log(&mut history, step, Phase::Shape, loss);
    }

    let decoded: BTreeMap<String, VoxelGrid> = if model.conditional || cfg.pretrain_steps() >= cfg.iterations {
        BTreeMap::new()
    } else {
        model.theta.iter().map(|(id, t)| (id.clone(), model.shape.decode(t))).collect()
    };
    let (mut net_state, mut code_state) = (AdamState::new(), AdamState::new());
    for step in 0..cfg.iterations {
        let phase = if step < cfg.pretrain_steps() { Phase::AppearanceGt } else { Phase::AppearanceFit };
        let scene = &dataset.scenes[rng.random_range(0..dataset.scenes.len())];
        let view = &scene.views[rng.random_range(0..scene.views.len())];
        let n_pix = view.image.n_pixels();
        let pixels = sample(&mut rng, n_pix, cfg.rays_per_step.min(n_pix)).into_vec();
        let scaffold = match (model.conditional, phase) {
            (true, _) => Scaffold::Absent,
            (false, Phase::AppearanceGt) => Scaffold::Grid(&scene.voxels),
            (false, _) => Scaffold::Grid(&decoded[&scene.scene.id]),
        };
        let seed = rng.random();
        let id = scene.scene.id.clone();
        let loss = appearance_step(&mut model, &id, view, scaffold, &pixels, cfg, seed, &mut net_state, &mut code_state)?;
        check_finite(loss, step, phase)?;
        log(&mut history, step, phase, loss);
    }
    Ok(TrainOutput { model, history })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ParamTensor;

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut st = AdamState::new();
        let mut x = [1.0];
        st.update("x", &mut x, &[2.0], &cfg);
        assert!((x[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);

        let mut params = ParamSet::new();
        params.insert(ParamTensor::new("w", vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let before = params.clone();
        let mut g = Gradients::default();
        g.insert("w", vec![0.0; 3]);
        adam_step(&mut AdamState::new(), &mut params, &g, &AdamConfig::default());
        assert_eq!(params, before);

        let mut g = Gradients::default();
        g.insert("w", vec![0.5, -1.0, 3.0]);
        let (mut p1, mut p2) = (before.clone(), before.clone());
        let (mut s1, mut s2) = (AdamState::new(), AdamState::new());
        for _ in 0..3 {
            adam_step(&mut s1, &mut p1, &g, &AdamConfig::default());
            adam_step(&mut s2, &mut p2, &g, &AdamConfig::default());
        }
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }
}
