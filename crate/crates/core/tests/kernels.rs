//! Kernels against straightforward nested-loop oracles evaluated in f64.

use halp::tensor::{
    apply_rows, conv2d, depthwise_conv2d, fully_connected, global_avg_pool, maxpool2d, Activation, LayerSpec,
    LayerWeights, RowBand, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

fn weights(spec: &LayerSpec, seed: u64) -> LayerWeights {
    LayerWeights::random(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
    (1usize..10, 1usize..10, 1usize..5, 1usize..5, 1usize..3, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv3x3_matches_oracle((h, w, ci, co, s, seed) in dims()) {
        let spec = LayerSpec::conv3x3(ci, co, s);
        let x = Tensor::random(h, w, ci, seed);
        let wt = weights(&spec, seed ^ 1);
        let got = conv2d(&x, &spec, &wt).unwrap();
        assert_close(got.data(), &oracle_conv(&x, &spec, &wt));
    }

    #[test]
    fn pointwise_matches_oracle((h, w, ci, co, _s, seed) in dims()) {
        let spec = LayerSpec::pointwise(ci, co);
        let x = Tensor::random(h, w, ci, seed);
        let wt = weights(&spec, seed ^ 2);
        let got = conv2d(&x, &spec, &wt).unwrap();
        assert_close(got.data(), &oracle_conv(&x, &spec, &wt));
    }

    #[test]
    fn depthwise_matches_oracle((h, w, c, _co, s, seed) in dims()) {
        let spec = LayerSpec::depthwise3x3(c, s);
        let x = Tensor::random(h, w, c, seed);
        let wt = weights(&spec, seed ^ 3);
        let got = depthwise_conv2d(&x, &spec, &wt).unwrap();
        assert_close(got.data(), &oracle_depthwise(&x, &spec, &wt));
    }

    #[test]
    fn maxpool_matches_oracle(h in 1usize..6, w in 1usize..6, c in 1usize..5, seed in any::<u64>()) {
        let x = Tensor::random(2 * h, 2 * w, c, seed);
        let got = maxpool2d(&x).unwrap();
        assert_close(got.data(), &oracle_maxpool(&x));
    }

    #[test]
    fn fully_connected_matches_oracle(n_in in 1usize..40, n_out in 1usize..20, relu_on in any::<bool>(), seed in any::<u64>()) {
        let act = if relu_on { Activation::ReLU } else { Activation::None };
        let spec = LayerSpec::fully_connected(n_in, n_out, act);
        let wt = weights(&spec, seed);
        let x = Tensor::random(1, 1, n_in, seed ^ 4);
        let want: Vec<f64> = (0..n_out)
            .map(|o| {
                let s = wt.bias[o] as f64
                    + (0..n_in).map(|i| x.data()[i] as f64 * wt.kernel[i * n_out + o] as f64).sum::<f64>();
                relu(s, act)
            })
            .collect();
        assert_close(&fully_connected(x.data(), &spec, &wt).unwrap(), &want);
    }

    #[test]
    fn global_avg_pool_matches_oracle(h in 1usize..8, w in 1usize..8, c in 1usize..6, seed in any::<u64>()) {
        let x = Tensor::random(h, w, c, seed);
        let want: Vec<f64> = (0..c)
            .map(|k| {
                let mut s = 0.0;
                for y in 0..h { for xx in 0..w { s += x.get(y, xx, k) as f64; } }
                s / (h * w) as f64
            })
            .collect();
        assert_close(&global_avg_pool(&x), &want);
    }

    /// Any output band computed from exactly its receptive rows equals the
    /// same rows of the full-map result, bit for bit.
    #[test]
    fn banded_equals_full(
        (h, w, ci, co, s, seed) in dims(),
        kind in 0usize..4,
        a in 0usize..100,
        b in 0usize..100,
    ) {
        let (spec, h) = match kind {
            0 => (LayerSpec::conv3x3(ci, co, s), h),
            1 => (LayerSpec::depthwise3x3(ci, s), h),
            2 => (LayerSpec::pointwise(ci, co), h),
            _ => (LayerSpec::max_pool(ci), 2 * h),
        };
        let w = if kind == 3 { 2 * w } else { w };
        let x = Tensor::random(h, w, ci, seed);
        let wt = weights(&spec, seed ^ 5);
        let ho = spec.output_extent(h);
        let (lo, hi) = ((a % ho).min(b % ho), (a % ho).max(b % ho) + 1);
        let full = apply_rows(&spec, &wt, &RowBand::whole(&x), 0..ho).unwrap();
        let need = spec.input_rows_for(lo..hi, h);
        let band_rows = x.slice_rows(need.clone()).unwrap();
        let band = RowBand { rows: &band_rows, first_row: need.start, full_height: h };
        let part = apply_rows(&spec, &wt, &band, lo..hi).unwrap();
        let want = full.slice_rows(lo..hi).unwrap();
        prop_assert_eq!(part.data(), want.data());
    }
}
