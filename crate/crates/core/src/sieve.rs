// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head feature sieve: a logistic-regression probe separating reference
//! from noise activations, top-k coefficient selection, and min-max scaling
//! of the surviving coordinates into rotation angles in `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::ActivationDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Number of coordinates kept per head.
    pub k: usize,
    /// L2 penalty on the weights; the bias is never penalized.
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once the full gradient norm drops below this.
    pub tol: f64,
    /// Recorded for provenance. Full-batch descent from a zero start is
    /// deterministic and does not draw from it.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            k: 5,
            l2_lambda: 1e-2,
            learning_rate: 0.1,
            max_iters: 500,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self, d_head: usize) -> Result<()> {
        if self.k == 0 || self.k > d_head {
            return Err(Error::validation(
                "probe.k",
                format!("{} must lie in [1, d_head = {d_head}]", self.k),
            ));
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return Err(Error::validation(
                "probe.l2_lambda",
                "must be finite and >= 0",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(
                "probe.learning_rate",
                "must be finite and > 0",
            ));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::validation("probe.tol", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit<T> {
    pub coefficients: Vec<T>,
    pub bias: T,
    pub accuracy: T,
    pub iterations: usize,
    /// Objective value after each accepted step, starting with the initial
    /// point.
    pub loss_history: Vec<T>,
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

struct Objective<'a, T> {
    rows: &'a [&'a [T]],
    labels: &'a [bool],
    lambda: T,
}

impl<T: Scalar> Objective<'_, T> {
    fn margins(&self, w: &[T], b: T) -> Vec<T> {
        self.rows
            .iter()
            .map(|r| r.iter().zip(w).fold(b, |acc, (&x, &wi)| acc + x * wi))
            .collect()
    }

    fn loss(&self, w: &[T], b: T) -> T {
        let n = T::from_usize_lossy(self.rows.len());
        let data: T = self
            .margins(w, b)
            .into_iter()
            .zip(self.labels)
            .map(|(z, &y)| if y { softplus(-z) } else { softplus(z) })
            .sum();
        let reg: T = w.iter().map(|&wi| wi * wi).sum();
        data / n + T::lit(0.5) * self.lambda * reg
    }

    fn gradient(&self, w: &[T], b: T) -> (Vec<T>, T) {
        let n = T::from_usize_lossy(self.rows.len());
        let mut gw = vec![T::zero(); w.len()];
        let mut gb = T::zero();
        for ((z, r), &y) in self
            .margins(w, b)
            .into_iter()
            .zip(self.rows)
            .zip(self.labels)
        {
            let resid = sigmoid(z) - if y { T::one() } else { T::zero() };
            gb = gb + resid;
            for (g, &x) in gw.iter_mut().zip(r.iter()) {
                *g = *g + resid * x;
            }
        }
        for (g, &wi) in gw.iter_mut().zip(w) {
            *g = *g / n + self.lambda * wi;
        }
        (gw, gb / n)
    }
}

/// Fits an L2-regularized logistic regression by full-batch gradient
/// descent. `labels[i] == true` marks the positive (reference) class.
///
/// The step is halved whenever a step would increase the objective, so the
/// recorded loss sequence never increases.
pub fn train_probe<T: Scalar>(
    features: &[&[T]],
    labels: &[bool],
    config: &ProbeConfig,
) -> Result<ProbeFit<T>> {
    let n = features.len();
    if n != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "probe labels",
            left: n,
            right: labels.len(),
        });
    }
    if n < 2 {
        return Err(Error::InsufficientData(
            "probe needs at least 2 samples".into(),
        ));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }
    let d = features[0].len();
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::validation("features", "rows have unequal length"));
    }
    if features.iter().any(|r| r.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("probe features"));
    }

    let obj = Objective {
        rows: features,
        labels,
        lambda: T::lit(config.l2_lambda),
    };
    let tol = T::lit(config.tol);
    let mut w = vec![T::zero(); d];
    let mut b = T::zero();
    let mut lr = T::lit(config.learning_rate);
    let mut loss = obj.loss(&w, b);
    let mut history = vec![loss];
    let mut iterations = 0;

    'outer: while iterations < config.max_iters {
        let (gw, gb) = obj.gradient(&w, b);
        let norm = (gw.iter().map(|&g| g * g).sum::<T>() + gb * gb).sqrt();
        if norm < tol {
            break;
        }
        loop {
            let cand_w: Vec<T> = w.iter().zip(&gw).map(|(&wi, &g)| wi - lr * g).collect();
            let cand_b = b - lr * gb;
            let cand_loss = obj.loss(&cand_w, cand_b);
            if cand_loss <= loss {
                w = cand_w;
                b = cand_b;
                loss = cand_loss;
                break;
            }
            lr = lr * T::lit(0.5);
            if lr < T::epsilon() {
                log::debug!("probe step underflowed after {iterations} iterations");
                break 'outer;
            }
        }
        history.push(loss);
        iterations += 1;
    }

    let correct = obj
        .margins(&w, b)
        .into_iter()
        .zip(labels)
        .filter(|(z, &y)| (sigmoid(*z) >= T::lit(0.5)) == y)
        .count();
    Ok(ProbeFit {
        coefficients: w,
        bias: b,
        accuracy: T::from_usize_lossy(correct) / T::from_usize_lossy(n),
        iterations,
        loss_history: history,
    })
}

/// Indices of the `k` largest `|coefficient|`, lowest index first on ties,
/// returned in ascending order.
pub fn select_top_k<T: Scalar>(coefficients: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..coefficients.len()).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (coefficients[a].abs(), coefficients[b].abs());
        mb.partial_cmp(&ma)
            .unwrap_or_else(|| ma.is_nan().cmp(&mb.is_nan()))
            .then(a.cmp(&b))
    });
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// Per-column minimum and maximum.
pub fn fit_scaler<T: Scalar>(rows: &[Vec<T>]) -> Result<(Vec<T>, Vec<T>)> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InsufficientData("scaler needs at least one row".into()))?;
    let mut lo = first.clone();
    let mut hi = first.clone();
    for r in rows {
        if r.len() != lo.len() {
            return Err(Error::validation("scaler rows", "rows have unequal length"));
        }
        for (j, &x) in r.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite("scaler input"));
            }
            lo[j] = lo[j].min(x);
            hi[j] = hi[j].max(x);
        }
    }
    Ok((lo, hi))
}

/// Rotation angles produced by the sieve, each in `[-1, 1]` radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SievedVector<T>(Vec<T>);

impl<T: Scalar> SievedVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.abs() <= T::one()))
        {
            return Err(Error::AngleOutOfRange {
                qubit: i,
                angle: v.to_f64_lossy(),
            });
        }
        Ok(SievedVector(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveResult<T> {
    pub head_index: usize,
    pub coefficients: Vec<T>,
    pub bias: T,
    pub selected_indices: Vec<usize>,
    pub feature_min: Vec<T>,
    pub feature_max: Vec<T>,
    pub train_accuracy: T,
}

impl<T: Scalar> SieveResult<T> {
    /// Mean `|coefficient|` over the selected coordinates.
    pub fn selected_weight(&self) -> T {
        let total: T = self
            .selected_indices
            .iter()
            .map(|&i| self.coefficients[i].abs())
            .sum();
        total / T::from_usize_lossy(self.selected_indices.len().max(1))
    }
}

/// Maps the selected coordinates of `activation` into `[-1, 1]`.
///
/// Values outside the fitted range are clamped; a constant column maps to 0,
/// as does a NaN input.
pub fn apply_sieve<T: Scalar>(activation: &[T], sieve: &SieveResult<T>) -> SievedVector<T> {
    let one = T::one();
    let values = sieve
        .selected_indices
        .iter()
        .zip(sieve.feature_min.iter().zip(&sieve.feature_max))
        .map(|(&idx, (&lo, &hi))| {
            let x = activation[idx];
            if hi == lo || x.is_nan() {
                T::zero()
            } else {
                let scaled = T::lit(2.0) * (x - lo) / (hi - lo) - one;
                scaled.max(-one).min(one)
            }
        })
        .collect();
    SievedVector(values)
}

/// Probes one head of a dataset. Reference samples are the positive class;
/// the scaler is fit on all samples.
pub fn sieve_head<T: Scalar>(
    dataset: &ActivationDataset,
    head: usize,
    config: &ProbeConfig,
) -> Result<SieveResult<T>> {
    if head >= dataset.n_heads() {
        return Err(Error::IndexOutOfRange {
            what: "head",
            index: head,
            limit: dataset.n_heads(),
        });
    }
    config.validate(dataset.d_head())?;
    let rows: Vec<Vec<T>> = dataset
        .head_rows(head)
        .into_iter()
        .map(|r| r.iter().map(|&x| T::lit(f64::from(x))).collect())
        .collect();
    let views: Vec<&[T]> = rows.iter().map(Vec::as_slice).collect();
    let fit = train_probe(&views, &dataset.binary_labels(), config)?;
    let selected = select_top_k(&fit.coefficients, config.k);
    let picked: Vec<Vec<T>> = rows
        .iter()
        .map(|r| selected.iter().map(|&i| r[i]).collect())
        .collect();
    let (feature_min, feature_max) = fit_scaler(&picked)?;
    Ok(SieveResult {
        head_index: head,
        coefficients: fit.coefficients,
        bias: fit.bias,
        selected_indices: selected,
        feature_min,
        feature_max,
        train_accuracy: fit.accuracy,
    })
}

/// One sieve per head, in head order.
pub fn sieve_layer<T: Scalar>(
    dataset: &ActivationDataset,
    config: &ProbeConfig,
) -> Result<Vec<SieveResult<T>>> {
    (0..dataset.n_heads())
        .map(|h| sieve_head(dataset, h, config))
        .collect()
}
