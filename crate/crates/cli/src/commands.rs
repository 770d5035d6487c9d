use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use scaffold_rf::data::{build_dataset, split_of, Dataset, DatasetConfig, SceneData, Split};
use scaffold_rf::inference::{invert, render_novel_view, resolve_camera, FitMode, FitResult, InferenceConfig, InvertInputs, Variant};
use scaffold_rf::io::write_atomic;
use scaffold_rf::metrics::MetricsReport;
use scaffold_rf::nets::{AppearanceConfig, ShapeConfig};
use scaffold_rf::render::{render_image, RenderConfig, Scaffold};
use scaffold_rf::train::{init_model, train_glo_from, LogRecord, TrainConfig};
use scaffold_rf::voxel::voxel_iou;
use scaffold_rf::{Camera, Image, Model, Vec3, VoxelGrid};

use crate::config::{parse_override, resolve, Flat};
use crate::manifest::Manifest;
use crate::{CameraSource, Cmd, CliError, Common, ObjectSet, SceneInput};

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct GenDataConfig {
    data: DatasetConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainRunConfig {
    shape: ShapeConfig,
    appearance: AppearanceConfig,
    train: TrainConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct InvertConfig {
    inference: InferenceConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct PathConfig {
    frames: usize,
    radius: f64,
    elevation_deg: f64,
    fov_deg: f64,
    image_size: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            radius: 2.0,
            elevation_deg: 20.0,
            fov_deg: 45.0,
            image_size: 48,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct RenderRunConfig {
    render: RenderConfig,
    path: PathConfig,
}

impl Default for RenderRunConfig {
    fn default() -> Self {
        Self {
            render: RenderConfig {
                jitter: false,
                ..RenderConfig::default()
            },
            path: PathConfig::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct ThresholdConfig {
    iou_threshold: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct MetricsConfig {
    metrics: ThresholdConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ReconstructConfig {
    reconstruct: ThresholdConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SelftestSettings {
    cases: usize,
    seed: u64,
}

impl Default for SelftestSettings {
    fn default() -> Self {
        Self { cases: 2000, seed: 0 }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SelftestConfig {
    selftest: SelftestSettings,
}

/// Resolves the config of one run; `seed_key` receives `--seed`.
fn settings<T: Serialize + DeserializeOwned + Default>(common: &Common, seed_key: Option<&str>) -> CliResult<(T, Flat)> {
    let mut overrides = common.set.iter().map(|s| parse_override(s)).collect::<CliResult<Vec<_>>>()?;
    if let (Some(seed), Some(key)) = (common.seed, seed_key) {
        overrides.push((key.to_string(), Value::from(seed)));
    }
    resolve(&T::default(), common.config.as_deref(), &overrides)
}

fn seed_of(flat: &Flat, key: Option<&str>) -> Option<u64> {
    key.and_then(|k| flat.get(k)).and_then(Value::as_u64)
}

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Runs `body` and records a manifest next to its outputs, also on failure.
fn with_manifest(name: &'static str, out: &Path, flat: &Flat, seed: Option<u64>, body: impl FnOnce() -> CliResult) -> CliResult {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let result = body();
    let mut m = Manifest::new(name, flat, seed);
    m.wall_time_s = start.elapsed().as_secs_f64();
    if let Err(e) = &result {
        m.status = format!("error: {e}");
    }
    m.write(out)?;
    result
}

pub fn run(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::GenData { common } => gen_data(&common),
        Cmd::Train {
            common,
            data,
            objects,
            log_every,
        } => train(&common, data, objects, log_every),
        Cmd::Invert { .. } => invert_cmd(cmd),
        Cmd::Render { common, fit, model, object } => render(&common, fit, model, object),
        Cmd::Metrics {
            common,
            dir_a,
            dir_b,
            voxels_a,
            voxels_b,
        } => metrics(&common, &dir_a, &dir_b, voxels_a.zip(voxels_b)),
        Cmd::Reconstruct { common, fit, gt, scene } => reconstruct(&common, fit, gt, &scene),
        Cmd::Selftest { common } => selftest(&common),
    }
}

fn gen_data(common: &Common) -> CliResult {
    const SEED: Option<&str> = Some("data.seed");
    let (cfg, flat) = settings::<GenDataConfig>(common, SEED)?;
    cfg.data.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    with_manifest("gen-data", &common.out, &flat, seed_of(&flat, SEED), || {
        let ds = build_dataset(&cfg.data)?;
        let root = common.out.join("dataset");
        if root.exists() {
            fs::remove_dir_all(&root)?;
        }
        ds.save(&root)?;
        eprintln!("wrote {} objects to {}", ds.scenes.len(), root.display());
        Ok(())
    })
}

fn dataset_root(common: &Common, data: Option<PathBuf>) -> PathBuf {
    data.unwrap_or_else(|| common.out.join("dataset"))
}

fn train(common: &Common, data: Option<PathBuf>, objects: ObjectSet, log_every: usize) -> CliResult {
    const SEED: Option<&str> = Some("train.seed");
    let (cfg, flat) = settings::<TrainRunConfig>(common, SEED)?;
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let root = dataset_root(common, data);
    with_manifest("train", &common.out, &flat, seed_of(&flat, SEED), || {
        let mut ds = Dataset::load(&root)?;
        if objects == ObjectSet::Train {
            ds.scenes.retain(|s| split_of(&s.scene.id) == Split::Train);
        }
        if ds.scenes.is_empty() {
            return Err(CliError::Failed("no objects to train on".into()));
        }
        let ids: Vec<String> = ds.scenes.iter().map(|s| s.scene.id.clone()).collect();
        let model = init_model(&ids, cfg.shape.clone(), cfg.appearance.clone(), &cfg.train);
        let mut progress = |r: &LogRecord| {
            if log_every > 0 && r.step % log_every == 0 {
                eprintln!("{} step {:>6} loss {:.5e} ({:.1} s)", r.phase.name(), r.step, r.loss, r.wall_ms / 1e3);
            }
        };
        let out = train_glo_from(&ds, model, &cfg.train, Some(&mut progress))?;
        out.model.save(&common.out.join("model.srft"))?;
        out.write_log(&common.out.join("train_log.jsonl"))?;
        eprintln!("trained on {} objects; checkpoint {}", ids.len(), common.out.join("model.srft").display());
        Ok(())
    })
}

fn load_image(path: &Path) -> scaffold_rf::Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("srft") => Image::load_srft(path),
        _ => Image::load_png(path),
    }
}

fn load_scene(root: &Path, id: &str) -> CliResult<(Dataset, usize)> {
    let ds = Dataset::load(root)?;
    let idx = ds
        .scenes
        .iter()
        .position(|s| s.scene.id == id)
        .ok_or_else(|| CliError::Usage(format!("object {id} not found in {}", root.display())))?;
    Ok((ds, idx))
}

struct InvertSource {
    image: Image,
    camera: Option<Camera>,
    mask: Option<Image>,
    gt: Option<VoxelGrid>,
    /// Retrieval gallery for camera estimation.
    gallery: Vec<(Image, Camera)>,
}

fn gallery_of(ds: &Dataset, exclude: Option<&str>) -> Vec<(Image, Camera)> {
    ds.scenes
        .iter()
        .filter(|s| Some(s.scene.id.as_str()) != exclude && split_of(&s.scene.id) == Split::Train)
        .flat_map(|s: &SceneData| s.views.iter().map(|v| (v.image.clone(), v.camera)))
        .collect()
}

fn invert_cmd(cmd: Cmd) -> CliResult {
    let Cmd::Invert {
        common,
        model,
        scene,
        view,
        image,
        camera_file,
        mask,
        gt_voxels,
        variant,
        mode,
        symmetry,
        camera: camera_source,
        camera_iterations,
    } = cmd
    else {
        unreachable!("dispatched on Invert")
    };
    const SEED: Option<&str> = Some("inference.seed");
    let variant: Variant = variant.parse().map_err(|e: scaffold_rf::Error| CliError::Usage(e.to_string()))?;
    let mode: FitMode = mode.parse().map_err(|e: scaffold_rf::Error| CliError::Usage(e.to_string()))?;
    let (cfg, flat) = settings::<InvertConfig>(&common, SEED)?;
    cfg.inference.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if image.is_some() == scene.object.is_some() {
        return usage("give exactly one of --image or --object");
    }
    if image.is_some() && camera_source == CameraSource::Given && camera_file.is_none() {
        return usage("--image with --camera given needs --camera-file");
    }
    let model_path = model.unwrap_or_else(|| common.out.join("model.srft"));
    with_manifest("invert", &common.out, &flat, seed_of(&flat, SEED), || {
        let model = Model::load(&model_path)?;
        let src = if let Some(path) = &image {
            let camera = match &camera_file {
                Some(p) => Some(serde_json::from_slice::<Camera>(&fs::read(p)?).map_err(scaffold_rf::Error::from)?),
                None => None,
            };
            let gallery = match (&scene.data, camera_source) {
                (Some(root), CameraSource::Estimate) => gallery_of(&Dataset::load(root)?, None),
                _ => Vec::new(),
            };
            InvertSource {
                image: load_image(path)?,
                camera,
                mask: mask.as_deref().map(Image::load_png).transpose()?,
                gt: gt_voxels.as_deref().map(VoxelGrid::load).transpose()?,
                gallery,
            }
        } else {
            let id = scene.object.as_deref().expect("checked above");
            let (ds, idx) = load_scene(&dataset_root(&common, scene.data.clone()), id)?;
            let s = &ds.scenes[idx];
            let v = s
                .views
                .get(view)
                .ok_or_else(|| CliError::Usage(format!("{id} has {} views, asked for {view}", s.views.len())))?;
            InvertSource {
                image: v.image.clone(),
                camera: Some(v.camera),
                mask: Some(v.mask.clone()),
                gt: Some(s.voxels.clone()),
                gallery: gallery_of(&ds, Some(id)),
            }
        };
        let cam = match camera_source {
            CameraSource::Given => src.camera.expect("camera present in given mode"),
            CameraSource::Estimate => {
                if src.gallery.is_empty() {
                    return usage("--camera estimate needs a dataset with training objects as retrieval gallery (--data)");
                }
                let est = resolve_camera(&src.image, &model, &src.gallery, camera_iterations, &cfg.inference)?;
                write_atomic(&common.out.join("camera.json"), &serde_json::to_vec_pretty(&est).map_err(scaffold_rf::Error::from)?)?;
                est
            }
        };
        let inputs = InvertInputs {
            mask: src.mask.as_ref(),
            gt_voxels: src.gt.as_ref(),
        };
        let fit = invert(&model, &src.image, &cam, variant, mode, symmetry, &inputs, &cfg.inference)?;
        fit.save(&common.out, "fit")?;
        render_novel_view(&fit, &cam, &RenderConfig { jitter: false, ..cfg.inference.render.clone() }).save_png(&common.out.join("input_render.png"))?;
        eprintln!("{variant} {}: final loss {:.5e}, input-view mse {:.5e}", mode.name(), fit.final_loss(), fit.residual);
        Ok(())
    })
}

/// Cameras on a horizontal circle around the object, looking at the origin.
fn circular_path(p: &PathConfig) -> Vec<Camera> {
    let el = p.elevation_deg.to_radians();
    (0..p.frames)
        .map(|k| {
            let az = TAU * k as f64 / p.frames as f64;
            let eye = Vec3::new(p.radius * el.cos() * az.sin(), p.radius * el.sin(), p.radius * el.cos() * az.cos());
            Camera::look_at(eye, Vec3::new(0.0, 0.0, 0.0), p.fov_deg, p.image_size, p.image_size)
        })
        .collect()
}

fn render(common: &Common, fit: Option<PathBuf>, model: Option<PathBuf>, object: Option<String>) -> CliResult {
    const SEED: Option<&str> = Some("render.rng_seed");
    let (cfg, flat) = settings::<RenderRunConfig>(common, SEED)?;
    if cfg.path.frames == 0 || cfg.path.image_size == 0 || !(cfg.path.radius > 0.9) {
        return usage("path.frames and path.image_size must be positive and path.radius > 0.9");
    }
    if model.is_some() != object.is_some() {
        return usage("--model and --object go together");
    }
    if model.is_some() && fit.is_some() {
        return usage("give either --fit or --model/--object");
    }
    with_manifest("render", &common.out, &flat, seed_of(&flat, SEED), || {
        let frames = common.out.join("frames");
        let cams = circular_path(&cfg.path);
        let images: Vec<Image> = if let (Some(mp), Some(id)) = (&model, &object) {
            let m = Model::load(mp)?;
            let phi = m.phi.get(id).ok_or_else(|| CliError::Usage(format!("model has no codes for {id}")))?;
            let grid = if m.conditional { None } else { Some(m.shape.decode(&m.theta[id])) };
            let sc = grid.as_ref().map_or(Scaffold::Absent, Scaffold::Grid);
            cams.iter().map(|c| render_image(&m.appearance, sc, phi, c, &cfg.render)).collect()
        } else {
            let dir = fit.clone().unwrap_or_else(|| common.out.clone());
            let f = FitResult::load(&dir, "fit")?;
            cams.iter().map(|c| render_novel_view(&f, c, &cfg.render)).collect()
        };
        for (k, img) in images.iter().enumerate() {
            img.save_png(&frames.join(format!("frame_{k:03}.png")))?;
        }
        let cams_json = serde_json::to_vec_pretty(&cams).map_err(scaffold_rf::Error::from)?;
        write_atomic(&frames.join("cameras.json"), &cams_json)?;
        eprintln!("wrote {} frames to {}", images.len(), frames.display());
        Ok(())
    })
}

fn png_names(dir: &Path) -> CliResult<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn metrics(common: &Common, a: &Path, b: &Path, voxels: Option<(PathBuf, PathBuf)>) -> CliResult {
    let (cfg, flat) = settings::<MetricsConfig>(common, None)?;
    let (na, nb) = (png_names(a)?, png_names(b)?);
    if na.is_empty() {
        return usage(format!("no PNG images in {}", a.display()));
    }
    if na != nb {
        return usage(format!("{} and {} hold different image sets", a.display(), b.display()));
    }
    with_manifest("metrics", &common.out, &flat, None, || {
        let pairs: Vec<(String, Image, Image)> = na
            .iter()
            .map(|n| Ok((n.clone(), Image::load_png(&a.join(n))?, Image::load_png(&b.join(n))?)))
            .collect::<scaffold_rf::Result<_>>()?;
        let mut report = MetricsReport::from_pairs(pairs.iter().map(|(n, x, y)| (n.clone(), x, y)))?;
        if let Some((va, vb)) = &voxels {
            report.voxel_iou = Some(voxel_iou(&VoxelGrid::load(va)?, &VoxelGrid::load(vb)?, cfg.metrics.iou_threshold)?);
        }
        write_atomic(&common.out.join("metrics.json"), report.to_json()?.as_bytes())?;
        print!("{}", report.to_table());
        Ok(())
    })
}

#[derive(Serialize)]
struct ReconstructReport {
    dims: [usize; 3],
    threshold: f64,
    occupied_fraction: f64,
    iou: Option<f64>,
}

fn reconstruct(common: &Common, fit: Option<PathBuf>, gt: Option<PathBuf>, scene: &SceneInput) -> CliResult {
    let (cfg, flat) = settings::<ReconstructConfig>(common, None)?;
    if gt.is_some() && scene.object.is_some() {
        return usage("give either --gt or --object");
    }
    let th = cfg.reconstruct.iou_threshold;
    with_manifest("reconstruct", &common.out, &flat, None, || {
        let dir = fit.clone().unwrap_or_else(|| common.out.clone());
        let f = FitResult::load(&dir, "fit")?;
        let grid = f
            .scaffold
            .ok_or_else(|| CliError::Usage(format!("the {} fit has no voxel scaffold", f.variant)))?;
        grid.save(&common.out.join("voxels.vxg"))?;
        let gt_grid = match (&gt, &scene.object) {
            (Some(p), _) => Some(VoxelGrid::load(p)?),
            (None, Some(id)) => {
                let (ds, idx) = load_scene(&dataset_root(common, scene.data.clone()), id)?;
                Some(ds.scenes[idx].voxels.clone())
            }
            (None, None) => None,
        };
        let iou = gt_grid.map(|g| voxel_iou(&grid, &g, th)).transpose()?;
        let report = ReconstructReport {
            dims: grid.dims,
            threshold: th,
            occupied_fraction: grid.values.iter().filter(|v| **v >= th).count() as f64 / grid.len() as f64,
            iou,
        };
        write_atomic(
            &common.out.join("reconstruct.json"),
            &serde_json::to_vec_pretty(&report).map_err(scaffold_rf::Error::from)?,
        )?;
        match iou {
            Some(v) => println!("voxel iou {v:.4} (threshold {th})"),
            None => println!("wrote {}", common.out.join("voxels.vxg").display()),
        }
        Ok(())
    })
}

fn selftest(common: &Common) -> CliResult {
    const SEED: Option<&str> = Some("selftest.seed");
    let (cfg, flat) = settings::<SelftestConfig>(common, SEED)?;
    with_manifest("selftest", &common.out, &flat, seed_of(&flat, SEED), || {
        let checks = scaffold_rf::selftest::run(cfg.selftest.cases, cfg.selftest.seed);
        for c in &checks {
            println!("{} {:<28} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        }
        write_atomic(
            &common.out.join("selftest.json"),
            &serde_json::to_vec_pretty(&checks).map_err(scaffold_rf::Error::from)?,
        )?;
        let failed = checks.iter().filter(|c| !c.passed).count();
        if failed > 0 {
            return Err(CliError::Failed(format!("{failed} selftest checks failed")));
        }
        Ok(())
    })
}
