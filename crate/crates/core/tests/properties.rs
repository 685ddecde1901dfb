//! Property tests for the diversity terms, IDX parsing and dataset ranges.

use proptest::prelude::*;
use rls_core::data::{parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC};
use rls_core::diversity::{diversity_terms, mean_pairwise_cosine};
use rls_core::{Dataset, Error, Tensor};

/// `k` probability rows over `c` classes, built from positive weights.
fn prob_rows(k: usize, c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..10.0, c), k).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect()
    })
}

fn rows_and_label() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (1usize..4, 5usize..11).prop_flat_map(|(k, c)| (prob_rows(k, c), 0..c))
}

proptest! {
    #[test]
    fn diversity_is_permutation_invariant((rows, label) in rows_and_label(), shift in 0usize..4) {
        let mut rotated = rows.clone();
        let n = rotated.len();
        rotated.rotate_left(shift % n);
        rotated.reverse();
        let a = diversity_terms(&rows, label).unwrap();
        let b = diversity_terms(&rotated, label).unwrap();
        prop_assert!((a.entropy - b.entropy).abs() < 1e-12);
        prop_assert!((a.logdet - b.logdet).abs() < 1e-9);
        if n > 1 {
            let (ca, cb) = (mean_pairwise_cosine(&rows, label).unwrap(), mean_pairwise_cosine(&rotated, label).unwrap());
            prop_assert!((ca - cb).abs() < 1e-12);
        }
    }

    #[test]
    fn logdet_never_exceeds_zero((rows, label) in rows_and_label()) {
        let t = diversity_terms(&rows, label).unwrap();
        prop_assert!(t.logdet <= 1e-12, "{}", t.logdet);
        prop_assert!(t.entropy >= 0.0);
    }

    #[test]
    fn idx_parsing_is_total(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        match parse_idx_images(&bytes) {
            Ok(images) => prop_assert_eq!(images.pixels.len(), images.count * images.rows * images.cols),
            Err(Error::Format { .. }) | Err(Error::Truncated { .. }) => {}
            Err(other) => prop_assert!(false, "unexpected error {other:?}"),
        }
        match parse_idx_labels(&bytes) {
            Ok(_) | Err(Error::Format { .. }) | Err(Error::Truncated { .. }) => {}
            Err(other) => prop_assert!(false, "unexpected error {other:?}"),
        }
    }

    #[test]
    fn valid_headers_with_short_bodies_report_truncation(
        n in 1u32..4, h in 1u32..4, w in 1u32..4, cut in 1usize..10,
    ) {
        let mut bytes = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, h, w] {
            bytes.extend(v.to_be_bytes());
        }
        let body = (n * h * w) as usize;
        bytes.extend(std::iter::repeat_n(7u8, body));
        let cut = cut.min(body);
        bytes.truncate(bytes.len() - cut);
        match parse_idx_images(&bytes) {
            Err(Error::Truncated { expected, actual, .. }) => {
                prop_assert_eq!(expected, 16 + body);
                prop_assert_eq!(actual, 16 + body - cut);
            }
            other => prop_assert!(false, "expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn datasets_enforce_value_range(values in prop::collection::vec(-1.5f64..1.5, 4)) {
        let images = Tensor::new(vec![2, 1, 1, 2], values.clone()).unwrap();
        let in_range = values.iter().all(|v| (-1.0..=1.0).contains(v));
        prop_assert_eq!(Dataset::new(images, vec![0, 1], 2).is_ok(), in_range);
    }
}
