use transpose::encoder::{encoder_forward, EncoderLayerParams, LayerMode};
use transpose::explain::{
    affected_area, dependency_area, export_report, grad_linearity_check, parse_area_csv,
    row_path_agreement, ExportFormat, LinearityMode, Report,
};
use transpose::params::ParamSet;
use transpose::{Error, Model, ModelConfig, PeKind, SplitMix64, Tape, Tensor};

fn image(seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(&[3, 64, 48], |_| rng.next_f64())
}

fn toy(seed: u64) -> Model {
    Model::build(ModelConfig::toy(), seed).unwrap()
}

#[test]
fn strict_jacobian_matches_closed_form() {
    for seed in 0..4 {
        let model = toy(seed);
        let mut rng = SplitMix64::new(100 + seed);
        let i = rng.below(192);
        let j = rng.below(192);
        let r = grad_linearity_check(&model, &image(seed), i, j, LinearityMode::Strict).unwrap();
        assert!(r.max_rel_err < 1e-8, "seed {seed}: {}", r.max_rel_err);
        assert_eq!(r.jacobian_numeric.shape(), &[4, 32]);
        let diag = grad_linearity_check(&model, &image(seed), i, i, LinearityMode::Strict).unwrap();
        assert!(diag.max_rel_err < 1e-8);
    }
}

#[test]
fn masked_attention_gives_exact_zero_jacobian() {
    let model = toy(3);
    let r = grad_linearity_check(&model, &image(1), 5, 77, LinearityMode::StrictMasked).unwrap();
    assert_eq!(r.a_ij, 0.0);
    assert!(r.jacobian_numeric.data().iter().all(|&v| v == 0.0));
    assert!(r.jacobian_predicted.data().iter().all(|&v| v == 0.0));
    assert_eq!(r.max_rel_err, 0.0);
}

#[test]
fn linearity_indices_are_checked() {
    let model = toy(0);
    assert!(matches!(
        grad_linearity_check(&model, &image(0), 192, 0, LinearityMode::Strict),
        Err(Error::Usage(_))
    ));
}

#[test]
fn row_path_reproduces_model_heatmap() {
    for pe in [PeKind::Sine2D, PeKind::Learnable, PeKind::None] {
        let mut c = ModelConfig::toy();
        c.pe_kind = pe;
        let model = Model::build(c, 11).unwrap();
        for i in [0, 57, 191] {
            let (own, expected) = row_path_agreement(&model, &image(2), i).unwrap();
            for (a, b) in own.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-10, "{pe:?} i={i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn empirical_mode_reports_norms_and_row() {
    let model = toy(5);
    let r = grad_linearity_check(&model, &image(4), 40, 41, LinearityMode::Empirical).unwrap();
    let norms = r.norms.as_ref().unwrap();
    let row = r.attention_row.as_ref().unwrap();
    assert_eq!((norms.len(), row.len()), (192, 192));
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(norms.iter().all(|v| v.is_finite() && *v >= 0.0));
    let corr = r.correlation.unwrap();
    assert!((-1.0..=1.0).contains(&corr));
    assert!(r.jacobian_numeric.data().iter().all(|v| v.is_finite()));
}

#[test]
fn f32_model_is_checked_in_double_precision() {
    let model = transpose::model::Model::<f32>::build(ModelConfig::toy(), 2).unwrap();
    let img = image(3).cast::<f32>();
    let r = grad_linearity_check(&model, &img, 10, 20, LinearityMode::Strict).unwrap();
    assert!(r.max_rel_err < 1e-8);
}

fn last_record(model: &Model, img: &Tensor) -> transpose::encoder::AttentionRecord<f64> {
    let (_, recs) = model.forward(img, true).unwrap();
    recs.last().unwrap().clone()
}

#[test]
fn column_sums_equal_sequence_length() {
    let model = toy(1);
    let rec = last_record(&model, &image(9));
    let total: f64 = (0..192)
        .map(|j| {
            affected_area(&rec, (16, 12), j, 0.0)
                .unwrap()
                .full_row
                .iter()
                .sum::<f64>()
        })
        .sum();
    assert!((total - 192.0).abs() < 1e-9);
    let full = affected_area(&rec, (16, 12), 7, 0.0).unwrap();
    assert_eq!(full.area.len(), 192);
}

#[test]
fn identical_tokens_give_uniform_columns() {
    let mut params = ParamSet::new();
    let mut rng = SplitMix64::new(4);
    let layer = EncoderLayerParams::init(&mut params, "l", 16, 32, 2, 0.0, &mut rng).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let token: Vec<f64> = (0..16).map(|k| (k as f64).sin()).collect();
    let x = tape.constant(Tensor::from_fn(&[12, 16], |idx| token[idx % 16]));
    let out =
        encoder_forward(&mut tape, &bound, &[layer], x, None, LayerMode::inference()).unwrap();
    let rec = &out.records[0];
    for j in 0..12 {
        let col = affected_area(rec, (3, 4), j, 0.0).unwrap();
        assert!(col.full_row.iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-15));
    }
}

#[test]
fn dependency_area_is_monotone_and_bounded() {
    let model = toy(2);
    let rec = last_record(&model, &image(5));
    let i = 100;
    let all = dependency_area(&rec, (16, 12), i, 0.0).unwrap();
    assert_eq!(all.area.len(), 192);
    let max = all.full_row.iter().copied().fold(0.0, f64::max);
    assert!(
        dependency_area(&rec, (16, 12), i, max * (1.0 + 1e-12) + 1e-300)
            .unwrap()
            .area
            .is_empty()
    );
    let mut previous = usize::MAX;
    for step in 0..50 {
        let delta = max * step as f64 / 49.0;
        let r = dependency_area(&rec, (16, 12), i, delta).unwrap();
        assert!(r.area.len() <= previous);
        assert!(r.area.iter().all(|e| e.score >= delta));
        assert!(r.area.windows(2).all(|w| w[0].score >= w[1].score));
        previous = r.area.len();
    }
    assert!(matches!(
        dependency_area(&rec, (16, 12), i, -1e-9),
        Err(Error::Usage(_))
    ));
}

#[test]
fn exports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy(6);
    let rec = last_record(&model, &image(6));
    let r = dependency_area(&rec, (16, 12), 31, 0.00075)
        .unwrap()
        .with_keypoint(2);

    let csv = dir.path().join("area.csv");
    export_report(&r, &csv, ExportFormat::Csv).unwrap();
    assert_eq!(
        parse_area_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap(),
        r.area
    );

    let json = dir.path().join("area.json");
    export_report(&r, &json, ExportFormat::Json).unwrap();
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    for key in [
        "kind",
        "keypoint_index",
        "query",
        "layer_index",
        "delta",
        "grid",
        "area",
        "full_row",
    ] {
        assert!(value.get(key).is_some(), "missing {key}");
    }
    assert_eq!(value["kind"], "dependency");
    assert_eq!(value["full_row"].as_array().unwrap().len(), 192);
    let back: transpose::explain::DependencyReport = serde_json::from_value(value).unwrap();
    assert_eq!(back, r);

    let pgm = dir.path().join("area.pgm");
    export_report(&r, &pgm, ExportFormat::Pgm).unwrap();
    let text = std::fs::read_to_string(&pgm).unwrap();
    assert!(text.starts_with("P2\n12 16\n65535\n"));
    assert_eq!(text.split_whitespace().count(), 4 + 192);

    let lin = grad_linearity_check(&model, &image(6), 3, 4, LinearityMode::Strict).unwrap();
    assert!(lin.to_pgm().is_none());
    assert!(export_report(&lin, &dir.path().join("lin.pgm"), ExportFormat::Pgm).is_err());
    export_report(&lin, &dir.path().join("lin.json"), ExportFormat::Json).unwrap();
    assert_eq!(lin.to_csv().lines().count(), 1 + 4 * 32);
    assert!(export_report(&r, &dir.path().join("missing/x.csv"), ExportFormat::Csv).is_err());
}
