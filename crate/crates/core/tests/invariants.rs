//! Property tests for the cross-module invariants: CSV round trips,
//! order preservation under temperature scaling, caliper monotonicity,
//! matching bounds, balance symmetries, and subgroup-weight dynamics.

use std::collections::BTreeMap;

use ndarray::Array2;
use proptest::prelude::*;
use realpatch::balance::{smd, variance_ratio};
use realpatch::data::{Dataset, SubgroupIndex};
use realpatch::matching::{match_bidirectional, nearest_neighbor_match, Direction, MatchConfig};
use realpatch::propensity::temperature_scale;
use realpatch::train::SgdroState;
use realpatch::SolverConfig;

fn finite_f64() -> impl Strategy<Value = f64> {
    prop::num::f64::POSITIVE | prop::num::f64::NEGATIVE | prop::num::f64::ZERO
        | prop::num::f64::SUBNORMAL
}

fn small_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..8, 1usize..4)
        .prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(finite_f64(), n * d),
                prop::collection::vec(0usize..3, n),
                prop::collection::vec(0u8..2, n),
                Just((n, d)),
            )
        })
        .prop_map(|(flat, y, z, (n, d))| {
            let ids = (0..n).map(|i| format!("s{i}")).collect();
            Dataset::new(ids, Array2::from_shape_vec((n, d), flat).unwrap(), y, z).unwrap()
        })
}

proptest! {
    #[test]
    fn csv_round_trip_is_bit_exact(ds in small_dataset()) {
        let file = tempfile::NamedTempFile::new().unwrap();
        ds.to_csv(file.path()).unwrap();
        let back = Dataset::from_csv(file.path()).unwrap();
        prop_assert_eq!(back.ids(), ds.ids());
        prop_assert_eq!(back.y(), ds.y());
        prop_assert_eq!(back.z(), ds.z());
        for (a, b) in ds.x().iter().zip(back.x().iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn subgroup_sizes_partition_the_dataset(ds in small_dataset()) {
        let idx = SubgroupIndex::build(&ds);
        prop_assert_eq!(idx.total(), ds.len());
        let mut seen = vec![false; ds.len()];
        for (_, rows) in idx.nonempty() {
            for &r in rows {
                prop_assert!(!seen[r]);
                seen[r] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn temperature_scaling_preserves_strict_order(
        mut e in prop::collection::vec(0.001f64..0.999, 2..20),
        t in 0.05f64..20.0,
    ) {
        e.sort_by(f64::total_cmp);
        e.dedup();
        let q = temperature_scale(&e, t).unwrap();
        for w in q.windows(2) {
            // The map is strictly monotone; in f64 the strictness is only
            // observable before the sigmoid saturates at the boundaries.
            prop_assert!(w[0] <= w[1], "order broken: {} > {}", w[0], w[1]);
            let saturated = w[0] <= 1e-11 || w[1] >= 1.0 - 1e-11;
            if !saturated {
                prop_assert!(w[0] < w[1], "strictness lost inside (0,1): {} !< {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn nn_selection_is_invariant_under_monotone_transforms(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let m = Array2::from_shape_fn((rows, cols), |_| {
            if rng.random_range(0..5) == 0 { f64::INFINITY } else { rng.random_range(0.0..10.0) }
        });
        // Strictly monotone on the finite range, fixing infinity.
        let transformed = m.mapv(|v| if v.is_finite() { v * v + 1.0 } else { v });
        let t_ids: Vec<String> = (0..rows).map(|i| format!("t{i}")).collect();
        let c_ids: Vec<String> = (0..cols).map(|j| format!("c{j}")).collect();
        let t_refs: Vec<&str> = t_ids.iter().map(String::as_str).collect();
        let c_refs: Vec<&str> = c_ids.iter().map(String::as_str).collect();
        let q_t = vec![0.5; rows];
        let q_c = vec![0.5; cols];
        let (p1, u1) = nearest_neighbor_match(m.view(), &t_refs, &c_refs, &q_t, &q_c, Direction::Z1ToZ0);
        let (p2, u2) = nearest_neighbor_match(transformed.view(), &t_refs, &c_refs, &q_t, &q_c, Direction::Z1ToZ0);
        let key = |ps: &[realpatch::MatchedPair]| -> Vec<(String, String)> {
            ps.iter().map(|p| (p.treatment_id.clone(), p.control_id.clone())).collect()
        };
        prop_assert_eq!(key(&p1), key(&p2));
        prop_assert_eq!(u1, u2);
    }

    #[test]
    fn smd_is_symmetric_and_affine_invariant(
        a in prop::collection::vec(-50.0f64..50.0, 2..12),
        b in prop::collection::vec(-50.0f64..50.0, 2..12),
        beta in prop_oneof![(-8.0f64..-0.1), (0.1f64..8.0)],
        gamma in -20.0f64..20.0,
    ) {
        let forward = smd(&a, &b);
        let swapped = smd(&b, &a);
        prop_assert!((forward - swapped).abs() <= 1e-12 * forward.abs().max(1.0));

        let ra: Vec<f64> = a.iter().map(|v| beta * v + gamma).collect();
        let rb: Vec<f64> = b.iter().map(|v| beta * v + gamma).collect();
        let rescaled = smd(&ra, &rb);
        if forward.is_finite() {
            prop_assert!(
                (forward - rescaled).abs() <= 1e-10 * forward.abs().max(1.0),
                "affine rescaling moved SMD from {forward} to {rescaled}"
            );
        }
    }

    #[test]
    fn vr_swap_inverts_and_mid_bucket_is_swap_stable(
        a in prop::collection::vec(-50.0f64..50.0, 2..12),
        b in prop::collection::vec(-50.0f64..50.0, 2..12),
    ) {
        let fwd = variance_ratio(&a, &b);
        let rev = variance_ratio(&b, &a);
        prop_assume!(fwd.is_finite() && fwd > 0.0);
        prop_assert!((rev - 1.0 / fwd).abs() <= 1e-10 * rev.abs().max(1.0));
        let in_mid = |v: f64| v > 4.0 / 5.0 && v < 5.0 / 4.0;
        prop_assert_eq!(in_mid(fwd), in_mid(rev));
    }
}

fn two_group_dataset(seed: u64, n: usize, d: usize) -> Dataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
    let mut z: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
    z[0] = 0;
    z[1] = 1;
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    Dataset::new((0..n).map(|i| format!("s{i}")).collect(), x, y, z).unwrap()
}

#[test]
fn pair_counts_respect_direction_bounds() {
    let solver = SolverConfig::default();
    for seed in 0..15 {
        let ds = two_group_dataset(seed, 4 + (seed as usize % 20), 3);
        let config = MatchConfig {
            temperature: 0.9,
            fixed_caliper_c: 0.05,
            std_caliper_alpha: 0.6,
            ..MatchConfig::default()
        };
        let md = match_bidirectional(&ds, &config, &solver).unwrap();
        let n1 = ds.z().iter().filter(|&&v| v == 1).count();
        let n0 = ds.len() - n1;
        let d1 = md.pairs.iter().filter(|p| p.direction == Direction::Z1ToZ0).count();
        let d0 = md.pairs.len() - d1;
        assert!(d1 <= n1 && d0 <= n0);
        assert!(md.pairs.len() <= ds.len());
        assert_eq!(d1 + md.unmatched.iter().filter(|u| u.direction == Direction::Z1ToZ0).count(), n1);
        assert_eq!(d0 + md.unmatched.iter().filter(|u| u.direction == Direction::Z0ToZ1).count(), n0);
        // Every pair respects the calipers it survived.
        for p in &md.pairs {
            assert!(p.e_treatment >= config.fixed_caliper_c);
            assert!(p.e_treatment <= 1.0 - config.fixed_caliper_c);
            assert!(p.e_control >= config.fixed_caliper_c);
            assert!(p.e_control <= 1.0 - config.fixed_caliper_c);
        }
    }
}

#[test]
fn caliper_tightening_is_monotone_in_pair_counts() {
    let solver = SolverConfig::default();
    for seed in 100..120 {
        let ds = two_group_dataset(seed, 24, 4);
        // Tightening alpha never gains pairs.
        let mut previous = usize::MAX;
        for alpha in [f64::INFINITY, 1.5, 0.8, 0.4, 0.2, 0.05] {
            let config = MatchConfig {
                std_caliper_alpha: alpha,
                fixed_caliper_c: 0.0,
                ..MatchConfig::default()
            };
            let n = match_bidirectional(&ds, &config, &solver).unwrap().pairs.len();
            assert!(n <= previous, "seed {seed}: alpha {alpha} produced {n} > {previous}");
            previous = n;
        }
        // Widening c never gains retained samples.
        let mut previous = usize::MAX;
        for c in [0.0, 0.05, 0.1, 0.2, 0.3, 0.45] {
            let config = MatchConfig {
                fixed_caliper_c: c,
                std_caliper_alpha: f64::INFINITY,
                ..MatchConfig::default()
            };
            let md = match_bidirectional(&ds, &config, &solver).unwrap();
            let retained = md.retained_counts.z1_to_z0 + md.retained_counts.z0_to_z1;
            assert!(retained <= previous, "seed {seed}: c {c} retained {retained} > {previous}");
            previous = retained;
        }
    }
}

#[test]
fn matched_dataset_reruns_identically() {
    let ds = two_group_dataset(7, 30, 5);
    let config = MatchConfig { temperature: 1.1, ..MatchConfig::default() };
    let solver = SolverConfig::default();
    let a = match_bidirectional(&ds, &config, &solver).unwrap();
    let b = match_bidirectional(&ds, &config, &solver).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sgdro_weights_stay_normalized_under_random_losses() {
    use rand::{Rng, SeedableRng};
    let ds = two_group_dataset(3, 40, 2);
    let index = SubgroupIndex::build(&ds);
    let mut state = SgdroState::new(&index, 0.01, 1.0);
    let keys: Vec<(usize, u8)> = index.nonempty().map(|(k, _)| k).collect();
    let mut rng = rand::rngs::StdRng::seed_from_u64(19);
    for _ in 0..1000 {
        let mut losses = BTreeMap::new();
        for &k in &keys {
            if rng.random_range(0..3) > 0 {
                losses.insert(k, rng.random_range(0.0..30.0));
            }
        }
        if losses.is_empty() {
            losses.insert(keys[0], rng.random_range(0.0..30.0));
        }
        state.step(&losses);
        assert!(state.is_normalized(1e-9));
    }
}

#[test]
fn persistent_loss_ordering_drives_weight_to_one() {
    let ds = two_group_dataset(5, 40, 2);
    let index = SubgroupIndex::build(&ds);
    let mut state = SgdroState::new(&index, 0.01, 0.0);
    let losses: BTreeMap<(usize, u8), f64> = [((0, 0), 0.2), ((0, 1), 1.2)].into();
    let mut steps = 0;
    while steps < 5000 && state.weight(0, 1).unwrap() <= 0.99 {
        state.step(&losses);
        steps += 1;
    }
    assert!(
        state.weight(0, 1).unwrap() > 0.99,
        "higher-loss weight stuck at {} after {steps} steps",
        state.weight(0, 1).unwrap()
    );
}
