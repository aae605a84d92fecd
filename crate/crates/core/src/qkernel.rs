// SPDX-License-Identifier: MIT OR Apache-2.0

//! Angle-embedding feature map and fidelity kernels.
//!
//! A sieved vector `v` of length `k` is encoded as the `k`-qubit product
//! state `R_y(v_1)|0> (x) ... (x) R_y(v_k)|0>`. States are simulated as full
//! `2^k` complex statevectors with qubit 0 as the most significant bit, so
//! non-product feature maps can reuse the same gate path.

use std::fmt::Write as _;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sieve::{apply_sieve, SieveResult, SievedVector};
use crate::store::ActivationDataset;

/// Largest register the simulator accepts.
pub const MAX_QUBITS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState<T> {
    n_qubits: usize,
    amplitudes: Vec<Complex<T>>,
}

impl<T: Scalar> QuantumState<T> {
    /// `|0...0>` on `n_qubits` qubits.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits > MAX_QUBITS {
            return Err(Error::validation(
                "qubits",
                format!("{n_qubits} exceeds the simulator limit of {MAX_QUBITS}"),
            ));
        }
        let mut amplitudes = vec![Complex::new(T::zero(), T::zero()); 1 << n_qubits];
        amplitudes[0] = Complex::new(T::one(), T::zero());
        Ok(QuantumState {
            n_qubits,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex<T>] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> T {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Applies a 2x2 unitary `[[m00, m01], [m10, m11]]` to `qubit`.
    pub fn apply_single(&mut self, qubit: usize, gate: [[Complex<T>; 2]; 2]) {
        assert!(qubit < self.n_qubits, "qubit {qubit} out of range");
        let stride = 1usize << (self.n_qubits - 1 - qubit);
        let dim = self.amplitudes.len();
        let mut base = 0;
        while base < dim {
            for i in base..base + stride {
                let a0 = self.amplitudes[i];
                let a1 = self.amplitudes[i + stride];
                self.amplitudes[i] = gate[0][0] * a0 + gate[0][1] * a1;
                self.amplitudes[i + stride] = gate[1][0] * a0 + gate[1][1] * a1;
            }
            base += 2 * stride;
        }
    }

    pub fn apply_ry(&mut self, qubit: usize, theta: T) {
        let half = theta * T::lit(0.5);
        let (s, c) = (
            Complex::new(half.sin(), T::zero()),
            Complex::new(half.cos(), T::zero()),
        );
        self.apply_single(qubit, [[c, -s], [s, c]]);
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &Self) -> Result<Complex<T>> {
        if self.n_qubits != other.n_qubits {
            return Err(Error::DimensionMismatch {
                what: "qubit count",
                left: self.n_qubits,
                right: other.n_qubits,
            });
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .fold(Complex::new(T::zero(), T::zero()), |acc, (a, b)| {
                acc + a.conj() * b
            }))
    }
}

/// Encodes `v` with one `R_y(v_i)` per qubit. Every angle must lie in
/// `[-1, 1]`.
pub fn angle_embed<T: Scalar>(v: &SievedVector<T>) -> Result<QuantumState<T>> {
    angle_embed_values(v.values())
}

pub(crate) fn angle_embed_values<T: Scalar>(v: &[T]) -> Result<QuantumState<T>> {
    if let Some((i, a)) = v.iter().enumerate().find(|(_, a)| !(a.abs() <= T::one())) {
        return Err(Error::AngleOutOfRange {
            qubit: i,
            angle: a.to_f64_lossy(),
        });
    }
    let mut state = QuantumState::zero(v.len())?;
    for (q, &theta) in v.iter().enumerate() {
        state.apply_ry(q, theta);
    }
    Ok(state)
}

/// `|<a|b>|^2`, clamped into `[0, 1]` against rounding.
pub fn fidelity<T: Scalar>(a: &QuantumState<T>, b: &QuantumState<T>) -> Result<T> {
    let f = a.inner(b)?.norm_sqr();
    Ok(f.max(T::zero()).min(T::one()))
}

/// Closed-form fidelity of two product `R_y` states:
/// `prod_i cos^2((a_i - b_i) / 2)`. Kept independent of the simulator.
pub fn product_fidelity_oracle<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "oracle inputs",
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let c = ((x - y) * T::lit(0.5)).cos();
            c * c
        })
        .fold(T::one(), |acc, f| acc * f))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSet {
    #[default]
    ReferenceOnly,
    All,
}

/// Symmetric head-by-head fidelity Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix<T> {
    n: usize,
    values: Vec<T>,
}

impl<T: Scalar> KernelMatrix<T> {
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::validation("kernel", "matrix is not square"));
        }
        Ok(KernelMatrix {
            n,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.values
            .chunks(self.n.max(1))
            .map(<[T]>::to_vec)
            .collect()
    }

    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn max_diagonal_error(&self) -> T {
        (0..self.n)
            .map(|i| (self.get(i, i) - T::one()).abs())
            .fold(T::zero(), T::max)
    }

    /// Eigenvalues of the (symmetrized) matrix, ascending.
    pub fn eigenvalues(&self) -> Vec<T> {
        let half = T::lit(0.5);
        let sym: Vec<T> = (0..self.n * self.n)
            .map(|idx| {
                let (i, j) = (idx / self.n, idx % self.n);
                (self.get(i, j) + self.get(j, i)) * half
            })
            .collect();
        symmetric_eigenvalues(sym, self.n)
    }

    pub fn min_eigenvalue(&self) -> T {
        self.eigenvalues().first().copied().unwrap_or(T::zero())
    }

    /// Checks symmetry and unit diagonal to `1e-12` and PSD to `-1e-8`.
    pub fn validate(&self) -> Result<()> {
        if self.max_asymmetry() > T::lit(1e-12) {
            return Err(Error::validation("kernel", "matrix is not symmetric"));
        }
        if self.max_diagonal_error() > T::lit(1e-12) {
            return Err(Error::validation("kernel", "diagonal is not 1"));
        }
        let min = self.min_eigenvalue();
        if min < T::lit(-1e-8) {
            return Err(Error::validation(
                "kernel",
                format!("minimum eigenvalue {min} is below -1e-8"),
            ));
        }
        Ok(())
    }

    /// Header row of `h0..h{n-1}`, then one row per head.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let header: Vec<String> = (0..self.n).map(|i| format!("h{i}")).collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for row in self.values.chunks(self.n.max(1)) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(s, "{}", cells.join(",")).unwrap();
        }
        s
    }
}

/// Cyclic Jacobi eigenvalue iteration for a dense symmetric matrix.
pub(crate) fn symmetric_eigenvalues<T: Scalar>(mut a: Vec<T>, n: usize) -> Vec<T> {
    let idx = |i: usize, j: usize| i * n + j;
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[idx(i, j)] * a[idx(i, j)])
            .sum();
        let scale: T = a.iter().map(|&x| x * x).sum();
        if off <= eps * eps * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[idx(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[idx(q, q)] - a[idx(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[idx(p, k)];
                    let aqk = a[idx(q, k)];
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<T> = (0..n).map(|i| a[idx(i, i)]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    eig
}

/// `K[i][j]` is the mean over samples of the fidelity between head `i`'s and
/// head `j`'s embedded sieved activations on the same sample.
pub fn head_interaction_matrix<T: Scalar>(
    dataset: &ActivationDataset,
    sieves: &[SieveResult<T>],
    sample_set: SampleSet,
) -> Result<KernelMatrix<T>> {
    let n = dataset.n_heads();
    if sieves.len() != n {
        return Err(Error::DimensionMismatch {
            what: "sieves per head",
            left: sieves.len(),
            right: n,
        });
    }
    let samples = match sample_set {
        SampleSet::ReferenceOnly => dataset.reference(),
        SampleSet::All => dataset.samples(),
    };
    if samples.is_empty() {
        return Err(Error::InsufficientData("no samples for kernel".into()));
    }
    let mut sums = vec![T::zero(); n * n];
    for s in samples {
        let states: Vec<QuantumState<T>> = sieves
            .iter()
            .zip(&s.head_vectors)
            .map(|(sieve, v)| {
                let x: Vec<T> = v.iter().map(|&a| T::lit(f64::from(a))).collect();
                angle_embed(&apply_sieve(&x, sieve))
            })
            .collect::<Result<_>>()?;
        for i in 0..n {
            for j in i + 1..n {
                let f = fidelity(&states[i], &states[j])?;
                sums[i * n + j] = sums[i * n + j] + f;
            }
        }
    }
    let count = T::from_usize_lossy(samples.len());
    let mut values = vec![T::zero(); n * n];
    for i in 0..n {
        values[i * n + i] = T::one();
        for j in i + 1..n {
            let v = sums[i * n + j] / count;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(KernelMatrix { n, values })
}

/// Mean of the strict upper triangle.
pub fn layer_coherence<T: Scalar>(k: &KernelMatrix<T>) -> Result<T> {
    let n = k.n();
    if n < 2 {
        return Err(Error::InsufficientData(
            "coherence needs at least two heads".into(),
        ));
    }
    let mut total = T::zero();
    for i in 0..n {
        for j in i + 1..n {
            total = total + k.get(i, j);
        }
    }
    Ok(total / T::from_usize_lossy(n * (n - 1) / 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn embed(v: &[f64]) -> QuantumState<f64> {
        angle_embed(&SievedVector::new(v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn zero_angles_give_ground_state() {
        let s = embed(&[0.0; 5]);
        assert_eq!(s.amplitudes().len(), 32);
        assert_eq!(s.amplitudes()[0], Complex::new(1.0, 0.0));
        assert!(s.amplitudes()[1..].iter().all(|a| a.norm_sqr() == 0.0));
    }

    #[test]
    fn single_qubit_amplitudes() {
        let s = embed(&[1.0]);
        assert_abs_diff_eq!(s.amplitudes()[0].re, 0.5f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.amplitudes()[1].re, 0.5f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.amplitudes()[0].re, 0.87758, epsilon = 1e-5);
        assert_abs_diff_eq!(s.amplitudes()[1].re, 0.47943, epsilon = 1e-5);
        assert!(s.amplitudes().iter().all(|a| a.im == 0.0));
    }

    #[test]
    fn two_qubit_tensor_structure() {
        let (a, b) = (0.3, -0.8);
        let s = embed(&[a, b]);
        assert_abs_diff_eq!(
            s.amplitudes()[3].re,
            (a / 2.0).sin() * (b / 2.0).sin(),
            epsilon = 1e-15
        );
        // |01>: qubit 0 in |0>, qubit 1 in |1>
        assert_abs_diff_eq!(
            s.amplitudes()[1].re,
            (a / 2.0).cos() * (b / 2.0).sin(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(s.norm_sqr(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_angle_is_rejected() {
        assert!(matches!(
            angle_embed_values(&[0.0, 1.5]),
            Err(Error::AngleOutOfRange { qubit: 1, .. })
        ));
    }

    #[test]
    fn fidelity_examples() {
        let s = embed(&[0.2, -0.4, 0.9]);
        assert_abs_diff_eq!(fidelity(&s, &s).unwrap(), 1.0, epsilon = 1e-12);
        let f = fidelity(&embed(&[1.0]), &embed(&[-1.0])).unwrap();
        assert_abs_diff_eq!(f, 1f64.cos().powi(2), epsilon = 1e-12);
        assert_abs_diff_eq!(f, 0.2919265, epsilon = 1e-7);
        let f5 = fidelity(&embed(&[1.0; 5]), &embed(&[-1.0; 5])).unwrap();
        assert_abs_diff_eq!(f5, 1f64.cos().powi(10), epsilon = 1e-12);
        assert_abs_diff_eq!(f5, 0.0021202, epsilon = 1e-7);
        assert!(fidelity(&embed(&[0.0]), &embed(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(
            product_fidelity_oracle(&[0.3, 0.4], &[0.3, 0.4]).unwrap(),
            1.0
        );
        let d = 0.7f64;
        assert_abs_diff_eq!(
            product_fidelity_oracle(&[0.1, d], &[0.1, 0.0]).unwrap(),
            (d / 2.0).cos().powi(2),
            epsilon = 1e-15
        );
    }

    #[test]
    fn coherence_examples() {
        let eye = KernelMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(layer_coherence(&eye).unwrap(), 0.0);
        let ones = KernelMatrix::from_rows(vec![vec![1.0; 3]; 3]).unwrap();
        assert_eq!(layer_coherence(&ones).unwrap(), 1.0);
        let k = KernelMatrix::from_rows(vec![vec![1.0, 0.4], vec![0.4, 1.0]]).unwrap();
        assert_eq!(layer_coherence(&k).unwrap(), 0.4);
        let one = KernelMatrix::from_rows(vec![vec![1.0]]).unwrap();
        assert!(layer_coherence(&one).is_err());
    }

    #[test]
    fn jacobi_on_known_spectrum() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let e = symmetric_eigenvalues(vec![2.0, 1.0, 1.0, 2.0], 2);
        assert_abs_diff_eq!(e[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e[1], 3.0, epsilon = 1e-12);
        let k = KernelMatrix::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(k.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let k = KernelMatrix::from_rows(vec![vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        assert_eq!(k.to_csv(), "h0,h1\n1,0.5\n0.5,1\n");
    }
}
