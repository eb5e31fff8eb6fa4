//! Property tests for the geometric and numeric invariants.

use geoplace_core::geo::{gcd_km, spherical_mean, GeoPoint, EARTH_RADIUS_KM};
use geoplace_core::numerics::{log_sum_exp, softmax};
use geoplace_core::partition::build_partition;
use proptest::prelude::*;

fn arb_point() -> impl Strategy<Value = GeoPoint> {
    (-90.0f64..=90.0, -180.0f64..180.0)
        .prop_map(|(lat, lon)| GeoPoint::new(lat, lon).unwrap())
}

proptest! {
    #[test]
    fn gcd_is_symmetric_and_bounded(a in arb_point(), b in arb_point()) {
        let d = gcd_km(a, b);
        prop_assert_eq!(d, gcd_km(b, a));
        prop_assert!(d >= 0.0);
        prop_assert!(d <= std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9);
    }

    #[test]
    fn gcd_zero_iff_identical(a in arb_point(), b in arb_point()) {
        prop_assert!(gcd_km(a, a) < 1e-9);
        if gcd_km(a, b) < 1e-9 {
            // Same point up to float wiggle in the inputs.
            prop_assert!((a.lat_deg() - b.lat_deg()).abs() < 1e-7);
        }
    }

    #[test]
    fn gcd_triangle_inequality(a in arb_point(), b in arb_point(), c in arb_point()) {
        prop_assert!(gcd_km(a, c) <= gcd_km(a, b) + gcd_km(b, c) + 1e-6);
    }

    #[test]
    fn spherical_mean_permutation_invariant(
        mut points in proptest::collection::vec(arb_point(), 1..12),
        seed in 0u64..1000,
    ) {
        let original = spherical_mean(&points);
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        points.shuffle(&mut rng);
        let shuffled = spherical_mean(&points);
        match (original, shuffled) {
            (Ok(a), Ok(b)) => prop_assert!(gcd_km(a, b) < 1e-6),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "degenerate status changed under permutation"),
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in proptest::collection::vec(-30.0f64..30.0, 2..20),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(q.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let direct = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        prop_assert!((log_sum_exp(&logits) - direct).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn partition_assignment_agrees_with_containment_scan(
        probes in proptest::collection::vec(arb_point(), 1..40),
        seed in 0u64..50,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let imgs: Vec<(u64, GeoPoint)> = (0..300)
            .map(|i| {
                (
                    i,
                    GeoPoint::new(
                        rng.random_range(-90.0..=90.0),
                        rng.random_range(-180.0..180.0),
                    )
                    .unwrap(),
                )
            })
            .collect();
        let partition = build_partition(&imgs, 32, 4).unwrap();
        for q in &probes {
            let brute: Vec<_> = partition
                .leaves()
                .iter()
                .filter(|c| c.contains(q))
                .collect();
            prop_assert!(brute.len() <= 1, "leaves must be disjoint");
            match partition.assign_index(q) {
                Some(i) => prop_assert_eq!(&partition.leaves()[i].id, &brute[0].id),
                None => prop_assert!(brute.is_empty()),
            }
        }
    }
}
