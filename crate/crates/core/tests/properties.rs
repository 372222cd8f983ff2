//! Property-based invariants over randomized shapes and values.

use proptest::collection::vec;
use proptest::prelude::*;

use mvaformer_core::nn::{build_attention_mask, MaskKind};
use mvaformer_core::{Tape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Unmasked softmax rows sum to one; masked entries are exactly zero;
    /// all-masked rows are exactly zero.
    #[test]
    fn masked_softmax_rows_normalize(
        views in 1usize..4,
        t in 1usize..6,
        kind in prop_oneof![Just(MaskKind::Full), Just(MaskKind::Sva), Just(MaskKind::Dva)],
        seed_vals in vec(-8.0f64..8.0, 0..1),
    ) {
        let n = views * t;
        let base = seed_vals.first().copied().unwrap_or(0.0);
        let logits = Tensor::new(
            vec![n, n],
            (0..n * n).map(|i| base + (i as f64 * 0.37).sin() * 4.0).collect(),
        ).unwrap();
        let mask = build_attention_mask::<f64>(kind, views, t);
        let tape = Tape::new();
        let soft = tape.leaf(&logits).masked_softmax_lastdim(Some(&mask.matrix)).unwrap();
        let out = soft.out.value();
        for q in 0..n {
            let row = &out.data()[q * n..(q + 1) * n];
            for (k, &w) in row.iter().enumerate() {
                prop_assert!(w >= 0.0);
                if !mask.is_unmasked(q, k) {
                    prop_assert_eq!(w, 0.0);
                }
            }
            let sum: f64 = row.iter().sum();
            if soft.all_masked_rows.contains(&q) {
                prop_assert_eq!(sum, 0.0);
            } else {
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    /// SVA and DVA unmasked sets partition FULL for any (views, tokens).
    #[test]
    fn sva_dva_partition_full(views in 1usize..6, t in 1usize..8) {
        let sva = build_attention_mask::<f32>(MaskKind::Sva, views, t);
        let dva = build_attention_mask::<f32>(MaskKind::Dva, views, t);
        let n = views * t;
        prop_assert_eq!(sva.unmasked_count() + dva.unmasked_count(), n * n);
        prop_assert_eq!(sva.unmasked_count(), views * t * t);
        for q in 0..n {
            for k in 0..n {
                prop_assert!(sva.is_unmasked(q, k) ^ dva.is_unmasked(q, k));
            }
        }
    }

    /// Reshape round-trips; slicing along an axis and concatenating the
    /// pieces back reproduces the original tensor.
    #[test]
    fn reshape_slice_concat_round_trip(
        rows in 1usize..6,
        cols in 1usize..6,
        cut in 0usize..6,
        data_seed in 0u64..1000,
    ) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((i as u64 + data_seed) as f64 * 0.61).cos())
            .collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(&t);

        let reshaped = x.reshape(vec![cols * rows])?.reshape(vec![rows, cols])?.value();
        prop_assert_eq!(reshaped.data(), t.data());

        let cut = cut.min(rows - 1).max(1).min(rows);
        if cut < rows {
            let a = x.slice(0, 0, cut)?;
            let b = x.slice(0, cut, rows - cut)?;
            let back = tape.concat(&[&a, &b], 0)?.value();
            prop_assert_eq!(back.data(), t.data());
        }
    }

    /// Gradients flow through reshape/slice/concat unchanged: the gradient
    /// of sum(concat(slices(x))) with respect to x is all ones.
    #[test]
    fn slice_concat_gradient_is_identity(rows in 2usize..6, cols in 1usize..5) {
        let t = Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|i| i as f64 * 0.1).collect(),
        ).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(&t);
        let a = x.slice(0, 0, 1)?;
        let b = x.slice(0, 1, rows - 1)?;
        let loss = tape.concat(&[&a, &b], 0)?.sum_all();
        tape.backward(&loss)?;
        let grad = x.grad().unwrap();
        prop_assert!(grad.data().iter().all(|&g| g == 1.0));
    }
}
