//! Property tests over the core invariants: column stochasticity of the
//! probability matrices, convex-hull containment of the soft projection,
//! uniform-quantizer grid membership, and pack/unpack losslessness.

use proptest::prelude::*;

use dgms::gm::{
    hard_quantize, responsibility, soft_indicator, soft_quantize, uniform_quantize, GmComponent,
    LayerGm, PiMode, UniformQuantSpec,
};
use dgms::pack::{pack_indices, pack_layer, unpack_indices, unpack_layer, Layout};

fn arb_mixture() -> impl Strategy<Value = LayerGm> {
    (
        proptest::collection::vec((-2.0f64..2.0, 0.05f64..1.0, 0.01f64..0.5), 1..7),
        0.005f64..0.5,
    )
        .prop_map(|(raw, tau)| {
            let mut comps = vec![GmComponent { pi: 1.0, mu: 0.0, gamma: 0.1 }];
            for (mu, pi, gamma) in raw {
                comps.push(GmComponent { pi, mu, gamma });
            }
            let total: f64 = comps.iter().map(|c| c.pi).sum();
            for c in &mut comps {
                c.pi /= total;
            }
            LayerGm::from_components(&comps, tau, PiMode::Simplex).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn responsibility_and_indicator_columns_are_stochastic(
        gm in arb_mixture(),
        w in proptest::collection::vec(-3.0f64..3.0, 1..40),
    ) {
        for m in [responsibility(&w, &gm), soft_indicator(&w, &gm)] {
            for j in 0..w.len() {
                let col = m.column(j);
                let sum: f64 = col.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9, "column {j} sums to {sum}");
                prop_assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn soft_projection_stays_in_centroid_hull(
        gm in arb_mixture(),
        w in proptest::collection::vec(-3.0f64..3.0, 1..40),
    ) {
        let lo = gm.mus().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = gm.mus().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in soft_quantize(&w, &gm) {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn hard_projection_emits_only_centroids(
        gm in arb_mixture(),
        w in proptest::collection::vec(-3.0f64..3.0, 1..40),
    ) {
        for v in hard_quantize(&w, &gm) {
            prop_assert!(gm.mus().contains(&v));
        }
    }

    #[test]
    fn uniform_quantizer_grid_and_error_bound(
        delta in 0.01f64..1.0,
        k_max in 1usize..16,
        w in proptest::collection::vec(-20.0f64..20.0, 1..50),
    ) {
        let spec = UniformQuantSpec::new(delta, k_max).unwrap();
        let q = uniform_quantize(&w, &spec).unwrap();
        for (x, v) in w.iter().zip(&q) {
            let steps = (v / delta).abs().round();
            prop_assert!(steps <= k_max as f64);
            prop_assert!((v.abs() - steps * delta).abs() < 1e-9);
            if x.abs() <= spec.q_max() {
                prop_assert!((x - v).abs() <= delta / 2.0 + 1e-12);
            } else {
                prop_assert!(v.abs() == spec.q_max() || (v.abs() - spec.q_max()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn index_streams_round_trip(
        bits in prop_oneof![Just(2u8), Just(4u8)],
        assign in proptest::collection::vec(0usize..4, 1..200),
    ) {
        let (bytes, pad) = pack_indices(&assign, bits).unwrap();
        prop_assert!((pad as usize) < (8 / bits) as usize);
        let back = unpack_indices(&bytes, bits, assign.len()).unwrap();
        prop_assert_eq!(back, assign);
    }

    #[test]
    fn packed_layers_round_trip_bit_exactly(
        gm in arb_mixture(),
        picks in proptest::collection::vec(0usize..7, 1..100),
        bits in prop_oneof![Just(2u8), Just(4u8)],
    ) {
        let mus = gm.mus().to_vec();
        prop_assume!(mus.len() <= (1usize << bits));
        let w: Vec<f64> = picks.iter().map(|&p| mus[p % mus.len()]).collect();
        let layer = pack_layer("p", &w, &[w.len()], &gm, bits, Layout::RowMajor).unwrap();
        let back = unpack_layer(&layer).unwrap();
        prop_assert_eq!(w.len(), back.len());
        for (a, b) in w.iter().zip(&back) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
