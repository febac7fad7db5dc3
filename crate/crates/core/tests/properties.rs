mod common;

use common::*;
use divsample::dpp::*;
use divsample::energy::diversity_energy;
use divsample::flows::{normal_vec, rng_from_seed, AffineFlow};
use divsample::trajectory::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

fn random_set(rng: &mut ChaCha8Rng, k: usize, steps: usize, dim: usize) -> Vec<Trajectory> {
    (0..k)
        .map(|_| Trajectory::new(steps, dim, normal_vec(rng, steps * dim)).unwrap())
        .collect()
}

fn naive_greedy(kernel: &DppKernel) -> Vec<usize> {
    let n = kernel.len();
    let mut selected: Vec<usize> = Vec::new();
    let mut current = 0.0;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|i| !selected.contains(i)) {
            let mut s = selected.clone();
            s.push(i);
            let v = log_det_subset(kernel, &s);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        match best {
            Some((i, v)) if v - current >= 0.0 => {
                selected.push(i);
                current = v;
            }
            _ => return selected,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_sample_order(seed in any::<u64>(), k in 2usize..7) {
        let mut rng = rng_from_seed(seed);
        let samples = random_set(&mut rng, k, 4, 2);
        let gt = random_set(&mut rng, 1, 4, 2).remove(0);
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut rng);
        let a = SampleSet::new(samples, 0).unwrap();
        let b = SampleSet::new(shuffled, 0).unwrap();
        prop_assert!(rel_close(apd(&a).unwrap(), apd(&b).unwrap(), 1e-12));
        let (asd_a, fsd_a) = asd_fsd(&a).unwrap();
        let (asd_b, fsd_b) = asd_fsd(&b).unwrap();
        prop_assert!(rel_close(asd_a, asd_b, 1e-12) && rel_close(fsd_a, fsd_b, 1e-12));
        prop_assert_eq!(ade(&a, &gt).unwrap(), ade(&b, &gt).unwrap());
        prop_assert_eq!(fde(&a, &gt).unwrap(), fde(&b, &gt).unwrap());
    }

    #[test]
    fn metrics_ignore_common_translation(seed in any::<u64>(), k in 2usize..6, dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let mut rng = rng_from_seed(seed);
        let samples = random_set(&mut rng, k, 3, 2);
        let gt = random_set(&mut rng, 1, 3, 2).remove(0);
        let shift = [dx, dy];
        let a = SampleSet::new(samples.clone(), 0).unwrap();
        let b = SampleSet::new(samples.iter().map(|t| t.translated(&shift)).collect(), 0).unwrap();
        let gt_b = gt.translated(&shift);
        let tol = 1e-9;
        prop_assert!(rel_close(apd(&a).unwrap(), apd(&b).unwrap(), tol));
        prop_assert!(rel_close(asd_fsd(&a).unwrap().0, asd_fsd(&b).unwrap().0, tol));
        prop_assert!(rel_close(ade(&a, &gt).unwrap(), ade(&b, &gt_b).unwrap(), tol));
        prop_assert!(rel_close(fde(&a, &gt).unwrap(), fde(&b, &gt_b).unwrap(), tol));
    }

    #[test]
    fn subset_determinants_sum_to_normalizer(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = rng_from_seed(seed);
        let l = random_psd(&mut rng, n);
        let direct = (&l + DMatrix::<f64>::identity(n, n)).determinant();
        let kernel = DppKernel::from_matrix(l).unwrap();
        let oracle = brute_force_oracle(&kernel).unwrap();
        prop_assert!(rel_close(oracle.normalization, direct, 1e-9));
        prop_assert!(rel_close(kernel.log_normalizer(), direct.ln(), 1e-9));
    }

    #[test]
    fn expected_cardinality_is_bounded_and_consistent(seed in any::<u64>(), n in 1usize..12) {
        let kernel = random_kernel(&mut rng_from_seed(seed), n);
        let e = expected_cardinality(&kernel);
        prop_assert!((0.0..=n as f64).contains(&e));
        prop_assert!(rel_close(e, expected_cardinality_trace(&kernel).unwrap(), 1e-9));
    }

    #[test]
    fn kl_is_rotation_invariant(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = rng_from_seed(seed);
        let a = DMatrix::from_row_slice(n, n, &normal_vec(&mut rng, n * n)) + DMatrix::identity(n, n) * 1.5;
        prop_assume!(a.determinant().abs() > 1e-3);
        let b = DVector::from_vec(normal_vec(&mut rng, n));
        let q = DMatrix::from_row_slice(n, n, &normal_vec(&mut rng, n * n)).qr().q();
        let base = AffineFlow::new(a.clone(), b.clone()).kl_to_standard_normal().unwrap();
        let left = AffineFlow::new(&q * &a, &q * &b).kl_to_standard_normal().unwrap();
        let right = AffineFlow::new(&a * &q, b).kl_to_standard_normal().unwrap();
        prop_assert!((base - left).abs() <= 1e-9 * base.max(1.0));
        prop_assert!((base - right).abs() <= 1e-9 * base.max(1.0));
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn flow_inverse_round_trips(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let a = DMatrix::from_row_slice(n, n, &normal_vec(&mut rng, n * n)) + DMatrix::identity(n, n) * 3.0;
        let f = AffineFlow::new(a, DVector::from_vec(normal_vec(&mut rng, n)));
        let eps = normal_vec(&mut rng, n);
        let back = f.invert(&f.apply(&eps).unwrap()).unwrap();
        for (x, y) in back.iter().zip(&eps) {
            prop_assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0));
        }
    }

    #[test]
    fn greedy_matches_naive_recompute(seed in any::<u64>(), n in 1usize..9, scale in 0.2..3.0f64) {
        let mut rng = rng_from_seed(seed);
        let kernel = DppKernel::from_matrix(random_psd(&mut rng, n) * scale).unwrap();
        prop_assert_eq!(greedy_map(&kernel), naive_greedy(&kernel));
    }

    #[test]
    fn greedy_commutes_with_relabeling(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = rng_from_seed(seed);
        let l = random_psd(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = DMatrix::from_fn(n, n, |i, j| l[(perm[i], perm[j])]);
        let original = greedy_map(&DppKernel::from_matrix(l).unwrap());
        let relabeled: Vec<usize> = greedy_map(&DppKernel::from_matrix(permuted).unwrap())
            .into_iter()
            .map(|i| perm[i])
            .collect();
        prop_assert_eq!(original, relabeled);
    }

    #[test]
    fn greedy_never_selects_both_copies(seed in any::<u64>(), n in 1usize..6, omega in 0.5..5.0f64) {
        let mut rng = rng_from_seed(seed);
        let mut items: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, 3)).collect();
        items.push(items[0].clone());
        let latents = vec![vec![0.0, 0.0]; n + 1];
        let cfg = KernelConfig { base_quality: omega, ..KernelConfig::default() };
        let sel = greedy_map(&build_kernel(&GroundSet::new(items, latents).unwrap(), &cfg).unwrap());
        prop_assert!(!(sel.contains(&0) && sel.contains(&n)));
    }

    #[test]
    fn spreading_samples_never_raises_diversity_energy(seed in any::<u64>(), k in 2usize..6, c in 1.0..4.0f64, sigma in 0.5..20.0f64) {
        let mut rng = rng_from_seed(seed);
        let base = random_set(&mut rng, k, 3, 2);
        let spread: Vec<Trajectory> = base
            .iter()
            .map(|t| Trajectory::new(3, 2, t.flat().iter().map(|v| c * v).collect()).unwrap())
            .collect();
        let e0 = diversity_energy(&SampleSet::new(base, 0).unwrap(), sigma).unwrap();
        let e1 = diversity_energy(&SampleSet::new(spread, 0).unwrap(), sigma).unwrap();
        prop_assert!(e1 <= e0 + 1e-15);
        prop_assert!(e0 > 0.0 && e0 <= 1.0);
    }
}
