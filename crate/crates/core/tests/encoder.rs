mod common;

use common::{check_input, check_params, random, Probe};
use proptest::prelude::*;
use transpose::encoder::{
    encoder_forward, encoder_layer_forward, mhsa_forward, EncoderLayerParams, LayerMode,
};
use transpose::params::ParamSet;
use transpose::{SplitMix64, Tape, Tensor};

fn layers(
    n: usize,
    d: usize,
    ffn: usize,
    heads: usize,
    seed: u64,
) -> (ParamSet<f64>, Vec<EncoderLayerParams>) {
    let mut params = ParamSet::new();
    let mut rng = SplitMix64::new(seed);
    let layers = (0..n)
        .map(|i| {
            EncoderLayerParams::init(&mut params, &format!("l{i}"), d, ffn, heads, 0.1, &mut rng)
                .unwrap()
        })
        .collect();
    (params, layers)
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let (l, d) = x.dims2().unwrap();
    Tensor::from_fn(&[l, d], |idx| x.data()[perm[idx / d] * d + idx % d])
}

fn run(
    params: &ParamSet<f64>,
    layers: &[EncoderLayerParams],
    x: &Tensor,
    pe: Option<&Tensor>,
) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let pv = pe.map(|p| tape.constant(p.clone()));
    let out = encoder_forward(&mut tape, &bound, layers, xv, pv, LayerMode::inference()).unwrap();
    (
        tape.value(out.output).clone(),
        out.records.into_iter().map(|r| r.matrix).collect(),
    )
}

#[test]
fn stack_is_permutation_equivariant_without_position_embedding() {
    let (params, layers) = layers(2, 16, 32, 4, 3);
    let x = random(&[20, 16], 5);
    let (out, recs) = run(&params, &layers, &x, None);
    let mut rng = SplitMix64::new(17);
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..20).collect();
        rng.shuffle(&mut perm);
        let (pout, precs) = run(&params, &layers, &permute_rows(&x, &perm), None);
        assert!(pout.max_abs_diff(&permute_rows(&out, &perm)) < 1e-9);
        for (a, pa) in recs.iter().zip(&precs) {
            for r in 0..20 {
                for c in 0..20 {
                    assert!((pa.at(&[r, c]) - a.at(&[perm[r], perm[c]])).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn position_embedding_breaks_equivariance() {
    let (params, layers) = layers(1, 16, 32, 4, 3);
    let x = random(&[12, 16], 5);
    let pe = transpose::PositionEmbedding::sine(3, 4, 16).unwrap();
    let table = pe.table().unwrap();
    let (out, _) = run(&params, &layers, &x, Some(table));
    let perm: Vec<usize> = (0..12).rev().collect();
    let (pout, _) = run(&params, &layers, &permute_rows(&x, &perm), Some(table));
    assert!(pout.max_abs_diff(&permute_rows(&out, &perm)) > 1e-6);
}

#[test]
fn attention_rows_are_distributions_and_depend_on_input() {
    let (params, layers) = layers(2, 16, 32, 4, 8);
    let (_, recs_a) = run(&params, &layers, &random(&[10, 16], 1), None);
    let (_, recs_b) = run(&params, &layers, &random(&[10, 16], 2), None);
    for rec in &recs_a {
        for r in 0..10 {
            let row = rec.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    assert!(recs_a[0].max_abs_diff(&recs_b[0]) > 1e-3);
    assert_eq!(recs_a.len(), 2);
}

#[test]
fn single_layer_stack_equals_layer_and_inference_is_deterministic() {
    let (params, layers) = layers(1, 16, 32, 2, 4);
    let x = random(&[6, 16], 3);
    let (stack, _) = run(&params, &layers, &x, None);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (y, _) = encoder_layer_forward(
        &mut tape,
        &bound,
        &layers[0],
        xv,
        None,
        LayerMode::inference(),
        0,
    )
    .unwrap();
    assert_eq!(tape.value(y), &stack);
    assert_eq!(stack.shape(), &[6, 16]);
    let (again, _) = run(&params, &layers, &x, None);
    assert_eq!(again, stack);
}

#[test]
fn dropout_only_acts_with_a_stream() {
    let (params, layers) = layers(1, 16, 32, 2, 4);
    let x = random(&[6, 16], 3);
    let (plain, _) = run(&params, &layers, &x, None);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x);
    let mut rng = SplitMix64::new(1);
    let mode = LayerMode {
        dropout: Some(&mut rng),
        ..LayerMode::default()
    };
    let out = encoder_forward(&mut tape, &bound, &layers, xv, None, mode).unwrap();
    assert!(tape.value(out.output).max_abs_diff(&plain) > 1e-6);
}

#[test]
fn mhsa_gradients_match_finite_differences() {
    let (params, layers) = layers(1, 16, 32, 4, 9);
    let x = random(&[7, 16], 11);
    let pe = random(&[7, 16], 12);
    let layer = &layers[0];
    let err = check_params(&params, Probe::All, |tape, bound| {
        let xv = tape.constant(x.clone());
        let pv = tape.constant(pe.clone());
        mhsa_forward(tape, bound, layer, xv, Some(pv), &LayerMode::inference(), 0)
            .unwrap()
            .0
    });
    assert!(err < 1e-4, "parameters: {err}");
    let err = check_input(&x, |tape, xv| {
        let bound = params.bind(tape, false);
        let pv = tape.constant(pe.clone());
        mhsa_forward(
            tape,
            &bound,
            layer,
            xv,
            Some(pv),
            &LayerMode::inference(),
            0,
        )
        .unwrap()
        .0
    });
    assert!(err < 1e-4, "input: {err}");
}

#[test]
fn layer_and_stack_gradients_match_finite_differences() {
    let (params, layers) = layers(2, 16, 32, 4, 21);
    let x = random(&[6, 16], 22);
    let pe = random(&[6, 16], 23);
    let err = check_params(&params, Probe::All, |tape, bound| {
        let xv = tape.constant(x.clone());
        let pv = tape.constant(pe.clone());
        encoder_forward(tape, bound, &layers, xv, Some(pv), LayerMode::inference())
            .unwrap()
            .output
    });
    assert!(err < 1e-4, "parameters: {err}");
    let err = check_input(&x, |tape, xv| {
        let bound = params.bind(tape, false);
        let pv = tape.constant(pe.clone());
        encoder_forward(tape, &bound, &layers, xv, Some(pv), LayerMode::inference())
            .unwrap()
            .output
    });
    assert!(err < 1e-4, "input: {err}");
}

#[test]
fn gradients_flow_through_the_position_embedding() {
    let (params, layers) = layers(1, 8, 16, 2, 2);
    let x = random(&[5, 8], 1);
    let pe = random(&[5, 8], 2);
    let err = check_input(&pe, |tape, pv| {
        let bound = params.bind(tape, false);
        let xv = tape.constant(x.clone());
        encoder_forward(tape, &bound, &layers, xv, Some(pv), LayerMode::inference())
            .unwrap()
            .output
    });
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layer_equivariance_holds_for_any_permutation(seed in 0u64..1000, l in 2usize..12) {
        let (params, layers) = layers(1, 8, 16, 2, seed);
        let x = random(&[l, 8], seed + 1);
        let mut perm: Vec<usize> = (0..l).collect();
        SplitMix64::new(seed + 2).shuffle(&mut perm);
        let (out, _) = run(&params, &layers, &x, None);
        let (pout, _) = run(&params, &layers, &permute_rows(&x, &perm), None);
        prop_assert!(pout.max_abs_diff(&permute_rows(&out, &perm)) < 1e-9);
    }
}
