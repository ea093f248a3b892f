//! Property tests for the structural invariants: constraint construction,
//! balancing, KL non-negativity, and the variance identity.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slategen_core::dataio::{
    balance_responses, make_constraint, Dataset, Record, ResponseVector, Slate,
};
use slategen_core::evalkit::{variance_decomposition, SampleSet};
use slategen_core::numkit::{gaussian_kl, GaussianParams};

proptest! {
    #[test]
    fn constraint_onehot_index_equals_click_count(bits in proptest::collection::vec(0u8..=1, 1..10)) {
        let r = ResponseVector::new(bits.clone()).unwrap();
        let c = make_constraint(&r, None);
        let onehot = c.response_onehot();
        prop_assert_eq!(onehot.len(), bits.len() + 1);
        let ones: Vec<usize> = onehot
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1.0).then_some(i))
            .collect();
        prop_assert_eq!(ones, vec![r.clicks()]);
    }

    #[test]
    fn kl_is_non_negative(
        qm in proptest::collection::vec(-3.0f64..3.0, 1..6),
        qv in proptest::collection::vec(-2.0f64..2.0, 1..6),
        pm in proptest::collection::vec(-3.0f64..3.0, 1..6),
        pv in proptest::collection::vec(-2.0f64..2.0, 1..6),
    ) {
        let dim = qm.len().min(qv.len()).min(pm.len()).min(pv.len());
        let q = GaussianParams::new(qm[..dim].to_vec(), qv[..dim].to_vec()).unwrap();
        let p = GaussianParams::new(pm[..dim].to_vec(), pv[..dim].to_vec()).unwrap();
        prop_assert!(gaussian_kl(&q, &p).unwrap() >= -1e-12);
    }

    #[test]
    fn balancing_only_grows_multiplicities(seed in 0u64..1000, sizes in proptest::collection::vec(0usize..30, 3)) {
        let k = 2usize;
        let mut d = Dataset::new(10, k);
        let patterns: [(Vec<u8>, usize); 3] =
            [(vec![0, 0], 0), (vec![1, 0], 1), (vec![1, 1], 2)];
        for (bits, group) in &patterns {
            for i in 0..sizes[*group] {
                d.push(Record {
                    user: None,
                    slate: Slate::new(vec![i % 10, (i + group) % 10]),
                    response: ResponseVector::new(bits.clone()).unwrap(),
                })
                .unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (balanced, report) = balance_responses(&d, &mut rng);

        // every original record is still present, in order, as a prefix
        prop_assert_eq!(&balanced.records[..d.len()], &d.records[..]);
        // appended records are copies of existing ones
        for extra in &balanced.records[d.len()..] {
            prop_assert!(d.records.contains(extra));
        }
        // nonempty groups reach at least half the largest
        let max = report.sizes_after.iter().max().copied().unwrap_or(0);
        for &size in &report.sizes_after {
            prop_assert!(size == 0 || size >= max.div_ceil(2));
        }
    }

    #[test]
    fn variance_identity_holds_for_random_sample_sets(
        seed in 0u64..10_000,
        n in 1usize..20,
        k in 2usize..6,
        dim in 1usize..6,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slates: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| {
                (0..k)
                    .map(|_| (0..dim).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect())
                    .collect()
            })
            .collect();
        let set = SampleSet::from_vectors(slates);
        let v = variance_decomposition(&set).unwrap();
        let sum = v.slate_mean + v.intra_slate;
        let rel = (v.total - sum).abs() / v.total.abs().max(1e-12);
        prop_assert!(rel < 1e-9, "total {} vs {}", v.total, sum);
        prop_assert!(v.slate_mean <= v.total + 1e-12);
        prop_assert!(v.intra_slate <= v.total + 1e-12);
    }
}
