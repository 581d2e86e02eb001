//! Property tests over the data-movement and normalization invariants.

use proptest::prelude::*;

use skipdepth::attention::{window_partition, window_reverse, WindowGrid};
use skipdepth::bins::bin_centers;
use skipdepth::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_round_trip_any_extents(
        h in 1usize..40,
        w in 1usize..40,
        win in 1usize..9,
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        let grid = WindowGrid::new(h, w, win).unwrap();
        let data: Vec<f64> = (0..h * w * c)
            .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f64) / 500.0 - 1.0)
            .collect();
        let x = Tensor::constant(&[h, w, c], data).unwrap();
        let back = window_reverse(&window_partition(&x, &grid).unwrap(), &grid).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn pixel_shuffle_inverse_any_shape(
        h in 1usize..8,
        w in 1usize..8,
        co in 1usize..5,
        r in 1usize..4,
    ) {
        let c = co * r * r;
        let data: Vec<f64> = (0..h * w * c).map(|i| i as f64 * 0.37).collect();
        let x = Tensor::constant(&[h, w, c], data).unwrap();
        let back = x.pixel_shuffle(r).unwrap().pixel_unshuffle(r).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn softmax_rows_always_stochastic(
        rows in 1usize..6,
        cols in 1usize..9,
        raw in prop::collection::vec(-30.0f64..30.0, 1..48),
    ) {
        let n = rows * cols;
        let data: Vec<f64> = (0..n).map(|i| raw[i % raw.len()] + i as f64 * 0.01).collect();
        let x = Tensor::constant(&[rows, cols], data).unwrap();
        let y = x.softmax(1).unwrap();
        for row in y.data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|v| *v > 0.0 && *v <= 1.0));
        }
    }

    #[test]
    fn adaptive_pool_full_size_is_identity(
        h in 1usize..7,
        w in 1usize..7,
        c in 1usize..4,
    ) {
        let data: Vec<f64> = (0..h * w * c).map(|i| (i as f64).sin()).collect();
        let x = Tensor::constant(&[h, w, c], data).unwrap();
        let pooled = x.adaptive_avg_pool(h, w).unwrap();
        prop_assert_eq!(pooled.data(), x.data());
    }

    #[test]
    fn bin_centers_ordered_for_any_valid_widths(
        raw in prop::collection::vec(0.01f64..1.0, 2..48),
    ) {
        let sum: f64 = raw.iter().sum();
        let widths: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let n = widths.len();
        let t = Tensor::constant(&[n], widths).unwrap();
        let centers = bin_centers(&t, 0.001, 10.0).unwrap();
        let c = centers.data();
        prop_assert!(c.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(c[0] > 0.001 && c[n - 1] < 10.0);
    }
}
