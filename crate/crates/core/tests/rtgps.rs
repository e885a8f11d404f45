mod common;

use proptest::prelude::*;

use genie_core::rtgps::{brute_force_query, effective_radius};
use genie_core::{Gaussian, GaussianSet, ProximityIndex, RadiusMode, Vec3};

use common::{containing, probe, random_scene};

#[test]
fn index_agrees_with_independent_scan() {
    let mut r = common::rng(21);
    for n in [1, 7, 300, 3000] {
        let set = random_scene(n, &mut r);
        for q in [1.1, 2.0, 3.0] {
            let index = ProximityIndex::build(&set, q).unwrap();
            for _ in 0..100 {
                let x = probe(&set, &mut r);
                for k in [1, 4, 16, 32] {
                    let got = index.query(&set, &x, k).unwrap();
                    let (want, over) = containing(&set, &x, k, q);
                    assert_eq!(got.indices, want, "n={n} q={q} k={k}");
                    assert_eq!(got.overflowed, over);
                    assert_eq!(got, brute_force_query(&set, &x, k, q, RadiusMode::Sqrt));
                }
            }
        }
    }
}

#[test]
fn returned_neighbors_are_sorted_and_contain_the_query() {
    let mut r = common::rng(22);
    let set = random_scene(2000, &mut r);
    let index = ProximityIndex::build(&set, 2.0).unwrap();
    for _ in 0..200 {
        let x = probe(&set, &mut r);
        let res = index.query(&set, &x, 16).unwrap();
        assert!(res.len() <= 16);
        let d: Vec<f64> = res.indices.iter().map(|&i| (x - set.get(i).mean).norm()).collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
        for (&i, di) in res.indices.iter().zip(&d) {
            assert!(*di <= index.radii()[i]);
        }
    }
}

#[test]
fn raw_eigenvalue_mode_uses_the_variance_directly() {
    let g = Gaussian::new(Vec3::zeros(), Vec3::new(0.04f64.ln(), 0.09f64.ln(), 0.01f64.ln()), 0);
    assert!((effective_radius(&g, 2.0, RadiusMode::Sqrt) - 0.6).abs() < 1e-12);
    assert!((effective_radius(&g, 2.0, RadiusMode::RawEigenvalue) - 0.18).abs() < 1e-12);
    let set = GaussianSet::new(vec![g]);
    let index = ProximityIndex::build_with_mode(&set, 2.0, RadiusMode::RawEigenvalue).unwrap();
    assert!(index.query(&set, &Vec3::new(0.17, 0.0, 0.0), 4).unwrap().indices == vec![0]);
    assert!(index.query(&set, &Vec3::new(0.19, 0.0, 0.0), 4).unwrap().is_empty());
}

#[test]
fn mutation_makes_the_index_stale() {
    let mut r = common::rng(23);
    let mut set = random_scene(50, &mut r);
    let index = ProximityIndex::build(&set, 2.0).unwrap();
    set.mutate(|_| ());
    assert!(index.query(&set, &Vec3::zeros(), 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_q_never_shrinks_candidates(seed in 0u64..10_000, k in 1usize..40) {
        let mut r = common::rng(seed);
        let set = random_scene(200, &mut r);
        let lo = ProximityIndex::build(&set, 1.1).unwrap();
        let hi = ProximityIndex::build(&set, 2.0).unwrap();
        for _ in 0..20 {
            let x = probe(&set, &mut r);
            let all_lo = lo.query(&set, &x, set.len()).unwrap();
            let all_hi = hi.query(&set, &x, set.len()).unwrap();
            prop_assert!(all_lo.indices.iter().all(|i| all_hi.indices.contains(i)));
            prop_assert!(lo.query(&set, &x, k).unwrap().len() <= hi.query(&set, &x, k).unwrap().len());
        }
    }

    #[test]
    fn tree_leaves_bound_their_spheres(seed in 0u64..10_000, n in 1usize..500) {
        let mut r = common::rng(seed);
        let set = random_scene(n, &mut r);
        let index = ProximityIndex::build(&set, 2.0).unwrap();
        prop_assert!(index.leaves_contain_spheres(&set));
        let max_r = index.radii().iter().cloned().fold(0.0, f64::max);
        prop_assert_eq!(index.t_max(), 2.0 * max_r);
        prop_assert!(index.radii().iter().all(|r| *r > 0.0));
    }

    #[test]
    fn truncation_keeps_the_closest_prefix(seed in 0u64..10_000, k in 1usize..20) {
        let mut r = common::rng(seed);
        let set = random_scene(300, &mut r);
        let index = ProximityIndex::build(&set, 3.0).unwrap();
        let x = probe(&set, &mut r);
        let full = index.query(&set, &x, set.len()).unwrap();
        let part = index.query(&set, &x, k).unwrap();
        prop_assert_eq!(&full.indices[..part.len()], &part.indices[..]);
        prop_assert_eq!(part.overflowed, full.len() > k);
    }
}
