// SPDX-License-Identifier: MIT OR Apache-2.0

//! The gradient-descent probe checked against an independent Newton solver
//! for the same objective.

use nalgebra::{DMatrix, DVector};
use qsieve::{
    select_top_k, sieve_head, train_probe, ActivationDataset, ActivationSample, DatasetInfo,
    ProbeConfig, SampleLabel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const PLANTED: [usize; 5] = [3, 17, 30, 41, 55];

/// Minimizes mean log-loss + 0.5 * lambda * |w|^2 (bias free) by Newton's
/// method. Returns (w, b).
fn newton_logistic(rows: &[Vec<f64>], labels: &[bool], lambda: f64) -> (Vec<f64>, f64) {
    let n = rows.len();
    let d = rows[0].len();
    // design matrix with a trailing column of ones for the bias
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { rows[i][j] } else { 1.0 });
    let y = DVector::from_fn(n, |i, _| if labels[i] { 1.0 } else { 0.0 });
    let mut reg = DVector::from_element(d + 1, lambda);
    reg[d] = 0.0;
    let mut theta = DVector::zeros(d + 1);
    for _ in 0..100 {
        let z = &x * &theta;
        let p = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        let grad = x.transpose() * (&p - &y) / n as f64 + reg.component_mul(&theta);
        if grad.norm() < 1e-13 {
            break;
        }
        let s = p.map(|v| v * (1.0 - v));
        let mut h = x.transpose() * DMatrix::from_diagonal(&s) * &x / n as f64;
        for j in 0..=d {
            h[(j, j)] += reg[j] + 1e-12;
        }
        let step = h
            .cholesky()
            .expect("Hessian is positive definite")
            .solve(&grad);
        theta -= step;
    }
    (theta.rows(0, d).iter().copied().collect(), theta[d])
}

fn planted_rows(seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (label, shift) in [(true, 2.5), (false, -2.5)] {
        for _ in 0..100 {
            let mut v: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
            for &d in &PLANTED {
                v[d] += shift;
            }
            rows.push(v);
            labels.push(label);
        }
    }
    (rows, labels)
}

fn top5(beta: &[f64]) -> Vec<usize> {
    select_top_k(beta, 5)
}

#[test]
fn reference_fit_puts_planted_dims_on_top() {
    for seed in 0..20 {
        let (rows, labels) = planted_rows(seed);
        let (w, _) = newton_logistic(&rows, &labels, 1e-2);
        assert_eq!(top5(&w), PLANTED.to_vec(), "seed {seed}");

        let views: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let fit = train_probe(&views, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(top5(&fit.coefficients), top5(&w), "seed {seed}");
        assert!(fit.accuracy >= 0.99);
    }
}

#[test]
fn converged_descent_matches_newton() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..5 {
        let d = 3 + trial;
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        // noisy labels keep the optimum finite even without the penalty
        let labels: Vec<bool> = rows
            .iter()
            .map(|r| {
                let e: f64 = StandardNormal.sample(&mut rng);
                r[0] - 0.5 * r[1] + 0.8 * e > 0.0
            })
            .collect();
        let (w, b) = newton_logistic(&rows, &labels, 1e-2);
        let views: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let cfg = ProbeConfig {
            max_iters: 50_000,
            tol: 1e-10,
            learning_rate: 0.5,
            ..ProbeConfig::default()
        };
        let fit = train_probe(&views, &labels, &cfg).unwrap();
        for (a, e) in fit.coefficients.iter().zip(&w) {
            assert!(
                (a - e).abs() < 1e-6,
                "trial {trial}: {:?} vs {w:?}",
                fit.coefficients
            );
        }
        assert!((fit.bias - b).abs() < 1e-6);
    }
}

#[test]
fn sieve_head_selects_planted_dims_from_stored_f32() {
    let (rows, labels) = planted_rows(4);
    let samples = rows
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (r, &l))| ActivationSample {
            label: if l {
                SampleLabel::Reference
            } else {
                SampleLabel::Noise
            },
            prompt_id: i as i64,
            head_vectors: vec![r.iter().map(|&x| x as f32).collect()],
        })
        .collect();
    let info = DatasetInfo {
        model_name: "planted".into(),
        layer_index: 0,
        seed: 4,
    };
    let ds = ActivationDataset::new(info, samples).unwrap();
    let r = sieve_head::<f64>(&ds, 0, &ProbeConfig::default()).unwrap();
    assert_eq!(r.selected_indices, PLANTED.to_vec());
    let r32 = sieve_head::<f32>(&ds, 0, &ProbeConfig::default()).unwrap();
    assert_eq!(r32.selected_indices, PLANTED.to_vec());
}
