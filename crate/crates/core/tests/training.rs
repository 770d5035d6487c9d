mod common;

use common::{bits, same_bits, tiny_appearance, tiny_dataset, tiny_shape, tiny_train};
use scaffold_rf::nets::Model;
use scaffold_rf::render::{render_image, RenderConfig, Scaffold};
use scaffold_rf::train::{appearance_step, init_model, shape_step, train_glo, train_glo_from, AdamState, Phase};

fn fresh(ids: &[String]) -> Model {
    init_model(ids, tiny_shape(), tiny_appearance(), &tiny_train(0, 0))
}

#[test]
fn steps_only_touch_the_codes_of_their_object() {
    let data = tiny_dataset(2);
    let ids: Vec<String> = data.scenes.iter().map(|s| s.scene.id.clone()).collect();
    let cfg = tiny_train(1, 1);
    let (a, b) = (&ids[0], &ids[1]);

    let mut m = fresh(&ids);
    let before = m.clone();
    let view = &data.scenes[0].views[0];
    let pixels: Vec<usize> = (0..view.image.n_pixels()).step_by(3).collect();
    appearance_step(
        &mut m,
        a,
        view,
        Scaffold::Grid(&data.scenes[0].voxels),
        &pixels,
        &cfg,
        7,
        &mut AdamState::new(),
        &mut AdamState::new(),
    )
    .unwrap();
    assert_ne!(bits(&m.phi[a].0), bits(&before.phi[a].0));
    assert_eq!(bits(&m.phi[b].0), bits(&before.phi[b].0));
    for id in &ids {
        assert_eq!(bits(&m.theta[id].0), bits(&before.theta[id].0));
    }

    let mut m = fresh(&ids);
    let before = m.clone();
    shape_step(&mut m, &data.scenes[0], [0, 1], &cfg, 7, &mut AdamState::new(), &mut AdamState::new()).unwrap();
    assert_ne!(bits(&m.theta[a].0), bits(&before.theta[a].0));
    assert_eq!(bits(&m.theta[b].0), bits(&before.theta[b].0));
    for id in &ids {
        assert_eq!(bits(&m.phi[id].0), bits(&before.phi[id].0));
    }
    assert!(same_bits(&m.appearance.params, &before.appearance.params));
}

#[test]
fn phases_leave_the_other_network_untouched() {
    let data = tiny_dataset(2);
    let ids: Vec<String> = data.scenes.iter().map(|s| s.scene.id.clone()).collect();

    let start = fresh(&ids);
    let out = train_glo_from(&data, start.clone(), &tiny_train(0, 4), None).unwrap();
    assert_eq!(out.losses(Phase::Shape).len(), 4);
    assert!(!same_bits(&out.model.shape.params, &start.shape.params));
    assert!(same_bits(&out.model.appearance.params, &start.appearance.params));
    for id in &ids {
        assert_eq!(bits(&out.model.phi[id].0), bits(&start.phi[id].0));
    }

    let out = train_glo_from(&data, start.clone(), &tiny_train(4, 0), None).unwrap();
    assert_eq!(out.losses(Phase::AppearanceGt).len() + out.losses(Phase::AppearanceFit).len(), 4);
    assert!(!same_bits(&out.model.appearance.params, &start.appearance.params));
    assert!(same_bits(&out.model.shape.params, &start.shape.params));
    for id in &ids {
        assert_eq!(bits(&out.model.theta[id].0), bits(&start.theta[id].0));
    }
}

#[test]
fn phase_schedule_follows_the_config() {
    let data = tiny_dataset(2);
    let out = train_glo(&data, tiny_shape(), tiny_appearance(), &tiny_train(6, 3)).unwrap();
    let phases: Vec<Phase> = out.history.iter().map(|r| r.phase).collect();
    let expect = [
        Phase::Shape,
        Phase::Shape,
        Phase::Shape,
        Phase::AppearanceGt,
        Phase::AppearanceGt,
        Phase::AppearanceGt,
        Phase::AppearanceFit,
        Phase::AppearanceFit,
        Phase::AppearanceFit,
    ];
    assert_eq!(phases, expect);
    assert!(out.history.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
}

#[test]
fn training_is_deterministic() {
    let data = tiny_dataset(2);
    let a = train_glo(&data, tiny_shape(), tiny_appearance(), &tiny_train(4, 2)).unwrap();
    let b = train_glo(&data, tiny_shape(), tiny_appearance(), &tiny_train(4, 2)).unwrap();
    let (ta, tb) = (a.model.tensors(), b.model.tensors());
    assert_eq!(ta.len(), tb.len());
    for (x, y) in ta.iter().zip(&tb) {
        assert_eq!(bits(&x.values), bits(&y.values), "{}", x.name);
    }
}

#[test]
fn checkpoint_round_trip_renders_identically() {
    let data = tiny_dataset(2);
    let out = train_glo(&data, tiny_shape(), tiny_appearance(), &tiny_train(4, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.srft");
    out.model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded, out.model);
    let id = &data.scenes[1].scene.id;
    let cam = &data.scenes[1].views[2].camera;
    let cfg = RenderConfig::default();
    let render = |m: &Model| {
        let grid = m.shape.decode(&m.theta[id]);
        render_image(&m.appearance, Scaffold::Grid(&grid), &m.phi[id], cam, &cfg)
    };
    let (a, b) = (render(&out.model), render(&loaded));
    assert_eq!(bits(&a.data), bits(&b.data));
}
