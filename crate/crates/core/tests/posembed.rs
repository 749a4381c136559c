use proptest::prelude::*;
use transpose::export::{parse_matrix_csv, write_matrix_csv};
use transpose::{PeKind, PositionEmbedding};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sine_pairs_lie_on_the_unit_circle(h in 1usize..20, w in 1usize..20, quarter in 1usize..9) {
        let d = 4 * quarter;
        let pe = PositionEmbedding::sine(h, w, d).unwrap();
        let t = pe.table().unwrap();
        prop_assert_eq!(t.shape(), &[h * w, d]);
        for row in 0..h * w {
            let r = t.row(row);
            prop_assert!(r.iter().all(|v| (-1.0..=1.0).contains(v)));
            for pair in r.chunks(2) {
                prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
            }
        }
        let again = PositionEmbedding::sine(h, w, d).unwrap();
        prop_assert_eq!(pe.table(), again.table());
    }
}

#[test]
fn sine_agrees_at_doubled_resolution() {
    let (h, w, d) = (16, 12, 32);
    let base = PositionEmbedding::sine(h, w, d).unwrap();
    let big = PositionEmbedding::sine(2 * h, 2 * w, d).unwrap();
    for y in 0..h {
        for x in 0..w {
            let a = base.table().unwrap().row(y * w + x);
            let b = big.table().unwrap().row(2 * y * 2 * w + 2 * x);
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn similarity_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let pe = PositionEmbedding::learnable(4, 3, 8, 5);
    assert_eq!(pe.kind(), PeKind::Learnable);
    let sim = pe.cosine_similarity().unwrap();
    let path = dir.path().join("sim.csv");
    write_matrix_csv(&path, sim.data(), 12, 12).unwrap();
    let (rows, cols, values) = parse_matrix_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!((rows, cols), (12, 12));
    assert_eq!(values, sim.data());
}

#[test]
fn resampling_keeps_the_kind_and_changes_the_length() {
    let pe = PositionEmbedding::learnable(8, 6, 16, 1);
    let up = pe.resample(16, 12).unwrap();
    assert_eq!(up.kind(), PeKind::Learnable);
    assert_eq!(up.len(), 192);
    let none = PositionEmbedding::none(8, 6).resample(16, 12).unwrap();
    assert!(none.table().is_none());
}

#[test]
fn sine_neighbours_are_more_alike_than_distant_positions() {
    let pe = PositionEmbedding::sine(16, 12, 32).unwrap();
    let sim = pe.cosine_similarity().unwrap();
    let (near, far) = transpose::posembed::neighbour_contrast(&sim, 16, 12).unwrap();
    assert!(near > far, "{near} vs {far}");
    assert!(transpose::posembed::neighbour_contrast(&sim, 8, 6).is_err());
}
