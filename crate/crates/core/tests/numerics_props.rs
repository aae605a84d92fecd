// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use qsieve::analysis::{regularized_incomplete_beta, student_t_cdf};
use qsieve::{
    angle_embed, apply_sieve, classify_mechanism, fidelity, head_interaction_matrix,
    product_fidelity_oracle, select_top_k, sieve_layer, spearman, train_probe, welch_t_test,
    ActivationDataset, ActivationSample, DatasetInfo, KernelMatrix, Mechanism, ProbeConfig,
    SampleLabel, SampleSet, SieveResult, SievedVector,
};
use statrs::distribution::{ContinuousCDF, StudentsT};

fn unit_vec(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..=1.0, k)
}

fn embed(v: &[f64]) -> qsieve::QuantumState64 {
    angle_embed(&SievedVector::new(v.to_vec()).unwrap()).unwrap()
}

proptest! {
    #[test]
    fn statevector_matches_product_oracle(
        (a, b) in (1usize..=8).prop_flat_map(|k| (unit_vec(k), unit_vec(k)))
    ) {
        let f = fidelity(&embed(&a), &embed(&b)).unwrap();
        let oracle: f64 = a.iter().zip(&b).map(|(x, y)| ((x - y) / 2.0).cos().powi(2)).product();
        prop_assert!((f - oracle).abs() < 1e-10, "{} vs {}", f, oracle);
        prop_assert!((product_fidelity_oracle(&a, &b).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn fidelity_sign_flip_and_symmetry(
        (a, b) in (1usize..=6).prop_flat_map(|k| (unit_vec(k), unit_vec(k)))
    ) {
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let f = fidelity(&embed(&a), &embed(&b)).unwrap();
        let g = fidelity(&embed(&neg(&a)), &embed(&neg(&b))).unwrap();
        let h = fidelity(&embed(&b), &embed(&a)).unwrap();
        prop_assert!((f - g).abs() < 1e-12);
        prop_assert!((f - h).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn fidelity_floor_is_cos_squared_one_per_qubit(
        (a, b) in (1usize..=6).prop_flat_map(|k| (unit_vec(k), unit_vec(k)))
    ) {
        let floor = 1f64.cos().powi(2).powi(a.len() as i32);
        prop_assert!(fidelity(&embed(&a), &embed(&b)).unwrap() >= floor - 1e-9);
    }

    #[test]
    fn embedded_states_are_normalized(v in (1usize..=10).prop_flat_map(unit_vec)) {
        prop_assert!((embed(&v).norm_sqr() - 1.0).abs() < 1e-12);
    }
}

fn any_input() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -100.0f64..100.0,
        1 => Just(f64::INFINITY),
        1 => Just(f64::NEG_INFINITY),
        1 => Just(f64::NAN),
    ]
}

proptest! {
    #[test]
    fn apply_sieve_stays_in_unit_interval(
        bounds in prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0), 1..8),
        extra in prop::collection::vec(any_input(), 8),
        degenerate in any::<bool>(),
    ) {
        let k = bounds.len();
        let feature_min: Vec<f64> = bounds.iter().map(|b| b.0).collect();
        let feature_max: Vec<f64> = bounds
            .iter()
            .map(|b| if degenerate { b.0 } else { b.0 + b.1 })
            .collect();
        let sieve = SieveResult {
            head_index: 0,
            coefficients: vec![1.0; k + 2],
            bias: 0.0,
            selected_indices: (0..k).map(|i| i + 1).collect(),
            feature_min,
            feature_max,
            train_accuracy: 1.0,
        };
        let activation: Vec<f64> = extra.into_iter().take(k + 2).collect();
        let padded: Vec<f64> = activation.iter().copied().chain(std::iter::repeat(0.5)).take(k + 2).collect();
        let out = apply_sieve(&padded, &sieve);
        prop_assert_eq!(out.len(), k);
        prop_assert!(out.values().iter().all(|v| (-1.0..=1.0).contains(v)), "{:?}", out.values());
    }

    #[test]
    fn top_k_is_permutation_consistent(
        magnitudes in prop::collection::btree_set(1u32..10_000, 2..20),
        signs in prop::collection::vec(any::<bool>(), 20),
        k_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let beta: Vec<f64> = magnitudes
            .iter()
            .zip(&signs)
            .map(|(&m, &s)| if s { m as f64 } else { -(m as f64) })
            .collect();
        let d = beta.len();
        let k = 1 + ((d - 1) as f64 * k_frac) as usize;
        // deterministic shuffle from the seed
        let mut perm: Vec<usize> = (0..d).collect();
        let mut state = seed | 1;
        for i in (1..d).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            perm.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let permuted: Vec<f64> = perm.iter().map(|&p| beta[p]).collect();
        let mut mapped: Vec<usize> = select_top_k(&permuted, k).into_iter().map(|i| perm[i]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, select_top_k(&beta, k));
    }

    #[test]
    fn probe_loss_never_increases(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..20),
        labels_seed in any::<u64>(),
    ) {
        let mut labels: Vec<bool> = (0..rows.len()).map(|i| (labels_seed >> (i % 64)) & 1 == 1).collect();
        labels[0] = true;
        labels[1] = false;
        let views: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let fit = train_probe(&views, &labels, &ProbeConfig { max_iters: 200, ..ProbeConfig::default() }).unwrap();
        prop_assert!(fit.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }
}

fn random_dataset(seed: u64, heads: usize, dims: usize, n: usize) -> ActivationDataset {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f32 / (1u64 << 53) as f32 * 4.0 - 2.0
    };
    let mut samples = Vec::new();
    for (label, shift) in [(SampleLabel::Reference, 0.7f32), (SampleLabel::Noise, -0.7)] {
        for i in 0..n {
            let head_vectors = (0..heads)
                .map(|h| {
                    (0..dims)
                        .map(|d| next() + if d == h % dims { shift } else { 0.0 })
                        .collect()
                })
                .collect();
            samples.push(ActivationSample {
                label,
                prompt_id: i as i64,
                head_vectors,
            });
        }
    }
    let info = DatasetInfo {
        model_name: "rand".into(),
        layer_index: 0,
        seed,
    };
    ActivationDataset::new(info, samples).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kernel_entries_respect_invariants(
        seed in any::<u64>(),
        heads in 2usize..6,
        dims in 2usize..6,
        k_frac in 0.0f64..1.0,
        all in any::<bool>(),
    ) {
        let ds = random_dataset(seed, heads, dims, 6);
        let k = 1 + ((dims - 1) as f64 * k_frac) as usize;
        let probe = ProbeConfig { k, max_iters: 100, ..ProbeConfig::default() };
        let sieves = sieve_layer::<f64>(&ds, &probe).unwrap();
        let set = if all { SampleSet::All } else { SampleSet::ReferenceOnly };
        let km = head_interaction_matrix(&ds, &sieves, set).unwrap();
        km.validate().unwrap();
        let floor = 1f64.cos().powi(2).powi(k as i32) - 1e-9;
        for i in 0..heads {
            for j in 0..heads {
                prop_assert!(km.get(i, j) >= floor && km.get(i, j) <= 1.0);
            }
        }
    }

    #[test]
    fn spearman_ignores_monotone_maps(
        pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..30),
        a in 0.1f64..5.0,
        b in -10.0f64..10.0,
    ) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(xs.iter().any(|&x| x != xs[0]) && ys.iter().any(|&y| y != ys[0]));
        let base = spearman(&xs, &ys).unwrap();
        let fx: Vec<f64> = xs.iter().map(|x| (x / 10.0).exp() * a + b).collect();
        let fy: Vec<f64> = ys.iter().map(|y| y.powi(3) + b).collect();
        let mapped = spearman(&fx, &fy).unwrap();
        prop_assert!((base - mapped).abs() < 1e-12, "{} vs {}", base, mapped);
    }

    #[test]
    fn welch_equals_pooled_t_for_equal_variances(
        xs in prop::collection::vec(-20.0f64..20.0, 3..15),
        shift in -5.0f64..5.0,
        rotate in 0usize..15,
    ) {
        prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-6));
        // same multiset shifted: identical sample variance and size
        let mut ys: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let r = rotate % ys.len();
        ys.rotate_left(r);
        let n = xs.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
        };
        let sp2 = ((n - 1.0) * var(&xs) + (n - 1.0) * var(&ys)) / (2.0 * n - 2.0);
        let t = (mean(&xs) - mean(&ys)) / (sp2 * 2.0 / n).sqrt();
        let dof = 2.0 * n - 2.0;
        let p = 2.0 * StudentsT::new(0.0, 1.0, dof).unwrap().cdf(-t.abs());

        let w = welch_t_test(&xs, &ys).unwrap();
        prop_assert!((w.t_statistic - t).abs() < 1e-9 * (1.0 + t.abs()));
        prop_assert!((w.degrees_of_freedom - dof).abs() < 1e-9);
        prop_assert!((w.p_value - p).abs() < 1e-9, "{} vs {}", w.p_value, p);
    }

    #[test]
    fn classify_is_antisymmetric(d in -1.0f64..1.0, tau in 1e-6f64..0.5) {
        prop_assert_eq!(classify_mechanism(-d, tau), classify_mechanism(d, tau).mirror());
    }

    #[test]
    fn t_cdf_matches_statrs(t in -30.0f64..30.0, dof in 0.5f64..200.0) {
        let ours = student_t_cdf(t, dof);
        let theirs = StudentsT::new(0.0, 1.0, dof).unwrap().cdf(t);
        prop_assert!((ours - theirs).abs() < 1e-10, "t={} dof={}: {} vs {}", t, dof, ours, theirs);
    }

    #[test]
    fn incomplete_beta_matches_statrs(a in 0.1f64..50.0, b in 0.1f64..50.0, x in 0.0f64..=1.0) {
        let ours = regularized_incomplete_beta(a, b, x);
        let theirs = statrs::function::beta::beta_reg(a, b, x);
        prop_assert!((ours - theirs).abs() < 1e-10, "{} vs {}", ours, theirs);
    }

    #[test]
    fn jacobi_eigenvalues_match_nalgebra(
        n in 1usize..7,
        entries in prop::collection::vec(-2.0f64..2.0, 49),
    ) {
        // B B^T is symmetric PSD
        let b = nalgebra::DMatrix::from_fn(n, n, |i, j| entries[i * 7 + j]);
        let g = &b * b.transpose();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| g[(i, j)]).collect()).collect();
        let ours = KernelMatrix::from_rows(rows).unwrap().eigenvalues();
        let mut theirs: Vec<f64> = g.symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(f64::total_cmp);
        for (x, y) in ours.iter().zip(&theirs) {
            prop_assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()), "{:?} vs {:?}", ours, theirs);
        }
    }
}

#[test]
fn classify_examples() {
    assert_eq!(classify_mechanism(-0.0069, 1e-4), Mechanism::Suppression);
    assert_eq!(classify_mechanism(0.0069, 1e-4), Mechanism::Recall);
    assert_eq!(classify_mechanism(5e-5, 1e-4), Mechanism::Neutral);
    assert_eq!(classify_mechanism(-1e-4, 1e-4), Mechanism::Neutral);
}
