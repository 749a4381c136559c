use transpose::params::ParamSet;
use transpose::synth;
use transpose::training::{
    ablate_pe, adam_step, cosine_lr, eval_resolutions, evaluate, thread_pool, train, AdamState,
    TrainConfig, TrainOptions,
};
use transpose::{ModelConfig, PeKind, Tensor};

fn tiny_run() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::toy()
    }
}

#[test]
fn adam_minimizes_a_convex_quadratic() {
    // f(x) = Σ c_k x_k² with condition number 10.
    let coef: Vec<f64> = (0..10).map(|k| 1.0 + k as f64).collect();
    let mut p = ParamSet::new();
    p.add(
        "x",
        Tensor::from_fn(&[10], |k| if k % 2 == 0 { 1.0 } else { -1.0 }),
    );
    let mut state = AdamState::new(&p, 0.9, 0.999, 1e-8);
    for step in 0..200 {
        let x = p.iter().next().unwrap().1.data().to_vec();
        let grad: Vec<f64> = x.iter().zip(&coef).map(|(x, c)| 2.0 * c * x).collect();
        adam_step(&mut p, &[grad], &mut state, cosine_lr(step, 200, 0.1, 1e-5)).unwrap();
    }
    let x = p.iter().next().unwrap().1.data();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "{norm}");
}

#[test]
fn one_epoch_smoke_run() {
    let data = synth::make_dataset(12, 4, 64, 48, 0.0).unwrap();
    let (tr, te) = data.split_at(8);
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::toy()
    };
    let (model, report) = train::<f32>(
        &ModelConfig::toy(),
        &config,
        tr,
        te,
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert!(report.epochs[0].loss.is_finite());
    assert!(model.params().iter().all(|(_, t)| t.is_finite()));
    assert_eq!((report.train_samples, report.test_samples), (8, 4));
}

#[test]
fn training_is_bit_reproducible_and_writes_reports() {
    let data = synth::make_dataset(20, 6, 64, 48, 0.2).unwrap();
    let (tr, te) = data.split_at(16);
    let dir = tempfile::tempdir().unwrap();
    let options = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        verbose: false,
    };
    let (a, ra) = train::<f64>(&ModelConfig::toy(), &tiny_run(), tr, te, &options).unwrap();
    let (b, rb) = train::<f64>(
        &ModelConfig::toy(),
        &tiny_run(),
        tr,
        te,
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ra.epochs, rb.epochs);
    for name in ["report.json", "curve.csv", "model.tpose"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    let loaded: transpose::Model = transpose::load_model(&dir.path().join("model.tpose")).unwrap();
    assert_eq!(loaded.params(), a.params());
}

#[test]
fn resolution_table_matches_standard_evaluation() {
    let data = synth::make_dataset(12, 8, 64, 48, 0.0).unwrap();
    let (tr, te) = data.split_at(8);
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::toy()
    };
    let (model, _) = train::<f64>(
        &ModelConfig::toy(),
        &config,
        tr,
        te,
        &TrainOptions::default(),
    )
    .unwrap();
    let seeds: Vec<u64> = te.iter().map(|s| s.seed).collect();
    let table =
        eval_resolutions(&model, &seeds, 0.0, &[(64, 48), (128, 96), (96, 72)], 0.05).unwrap();
    assert_eq!(table.len(), 3);
    let standard = evaluate(&model, te, 0.05, &thread_pool().unwrap()).unwrap();
    assert!((table[0].pck - standard).abs() < 1e-12);
    assert!(table.iter().all(|r| (0.0..=1.0).contains(&r.pck)));
}

#[test]
fn ablation_runs_differ_only_in_position_embedding() {
    let data = synth::make_dataset(10, 9, 64, 48, 0.0).unwrap();
    let (tr, te) = data.split_at(8);
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::toy()
    };
    let runs = ablate_pe::<f32>(&ModelConfig::toy(), &config, tr, te).unwrap();
    let kinds: Vec<PeKind> = runs.iter().map(|r| r.pe_kind).collect();
    assert_eq!(kinds, vec![PeKind::Sine2D, PeKind::Learnable, PeKind::None]);
    for run in &runs {
        let mut c = run.report.model.clone();
        assert_eq!(c.pe_kind, run.pe_kind);
        c.pe_kind = PeKind::Sine2D;
        assert_eq!(c, ModelConfig::toy());
        assert_eq!(run.report.train, config);
    }
    let again = ablate_pe::<f32>(&ModelConfig::toy(), &config, tr, te).unwrap();
    for (a, b) in runs.iter().zip(&again) {
        assert_eq!(a.model.params(), b.model.params());
    }
}

#[test]
fn bad_recipes_are_rejected() {
    let data = synth::make_dataset(4, 1, 64, 48, 0.0).unwrap();
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::toy()
    };
    assert!(train::<f32>(
        &ModelConfig::toy(),
        &bad,
        &data.samples,
        &[],
        &TrainOptions::default()
    )
    .is_err());
    let wrong_k = synth::make_dataset_k(4, 1, 64, 48, 0.0, 5).unwrap();
    let ok = TrainConfig {
        epochs: 1,
        ..TrainConfig::toy()
    };
    assert!(train::<f32>(
        &ModelConfig::toy(),
        &ok,
        &wrong_k.samples,
        &[],
        &TrainOptions::default()
    )
    .is_err());
}

#[test]
fn learned_position_embedding_picks_up_grid_structure() {
    let data = synth::make_dataset(700, 1, 64, 48, 0.0).unwrap();
    let (train_set, test_set) = data.split_at(600);
    let config = ModelConfig {
        pe_kind: PeKind::Learnable,
        ..ModelConfig::toy()
    };
    let contrast = |model: &transpose::model::Model<f32>| {
        let sim = model.position_embedding().cosine_similarity().unwrap();
        transpose::posembed::neighbour_contrast(&sim, 16, 12).unwrap()
    };
    let recipe = TrainConfig {
        epochs: 6,
        ..TrainConfig::toy()
    };
    let (model, _) = train::<f32>(
        &config,
        &recipe,
        train_set,
        test_set,
        &TrainOptions::default(),
    )
    .unwrap();
    let (near, far) = contrast(&model);
    assert!(near > far + 0.1, "trained: {near} vs {far}");
    let untrained = transpose::model::Model::<f32>::build(config, recipe.seed).unwrap();
    let (near0, far0) = contrast(&untrained);
    assert!((near0 - far0).abs() < 0.05, "untrained: {near0} vs {far0}");
}
