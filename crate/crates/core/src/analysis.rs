// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head ablation with mechanism labels, and the statistics used to validate
//! them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationMode, Intervention, Model, TokenId};
use crate::prompts::PromptPair;
use crate::scalar::Scalar;
use crate::tracer::RecoveryProfile;

/// Default dead-band around zero drop, in probability units.
pub const DEFAULT_TAU: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    #[default]
    Zero,
    /// Mean output over the reference prompts of the experiment.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    /// Ablation raises the target probability.
    Suppression,
    /// Ablation lowers the target probability.
    Recall,
    Neutral,
}

impl Mechanism {
    pub fn mirror(self) -> Self {
        match self {
            Mechanism::Suppression => Mechanism::Recall,
            Mechanism::Recall => Mechanism::Suppression,
            Mechanism::Neutral => Mechanism::Neutral,
        }
    }
}

/// `Suppression` if `drop < -tau`, `Recall` if `drop > tau`, else `Neutral`.
pub fn classify_mechanism<T: Scalar>(drop: T, tau: T) -> Mechanism {
    if drop < -tau {
        Mechanism::Suppression
    } else if drop > tau {
        Mechanism::Recall
    } else {
        Mechanism::Neutral
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport<T> {
    pub layer: usize,
    pub heads: Vec<usize>,
    pub mode: AblationKind,
    pub tau: T,
    /// Mean target probability without ablation.
    pub p_before: T,
    pub p_after: T,
    /// `p_before - p_after`.
    pub drop: T,
    pub mechanism: Mechanism,
    pub per_prompt_drops: Vec<T>,
    /// Per-prompt drop of the control token: the most probable non-target
    /// token of the unablated run.
    pub control_drops: Vec<T>,
}

impl<T: Scalar> AblationReport<T> {
    /// `prompt,drop,control_drop` rows.
    pub fn drops_csv(&self) -> String {
        let mut s = String::from("prompt,drop,control_drop\n");
        for (i, (d, c)) in self
            .per_prompt_drops
            .iter()
            .zip(&self.control_drops)
            .enumerate()
        {
            writeln!(s, "{i},{d},{c}").unwrap();
        }
        s
    }
}

fn control_token<T: Scalar>(probs: &[T], target: TokenId) -> TokenId {
    let mut best: Option<usize> = None;
    for (i, &p) in probs.iter().enumerate() {
        if i == target as usize {
            continue;
        }
        if best.is_none_or(|b| p > probs[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0) as TokenId
}

/// Ablates every head in `heads` at `layer` together and measures the change
/// in target probability on each prompt's reference tokens.
pub fn ablate_and_measure<T: Scalar>(
    model: &Model<T>,
    prompts: &[PromptPair],
    layer: usize,
    heads: &[usize],
    mode: AblationKind,
    tau: T,
) -> Result<AblationReport<T>> {
    if prompts.is_empty() {
        return Err(Error::InsufficientData("ablation needs prompts".into()));
    }
    if heads.is_empty() {
        return Err(Error::InsufficientData(
            "ablation needs at least one head".into(),
        ));
    }
    if !(tau > T::zero()) {
        return Err(Error::validation("tau", "must be > 0"));
    }
    if layer >= model.n_layers() {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            limit: model.n_layers(),
        });
    }
    let mut heads = heads.to_vec();
    heads.sort_unstable();
    heads.dedup();
    if let Some(&h) = heads.iter().find(|&&h| h >= model.n_heads()) {
        return Err(Error::IndexOutOfRange {
            what: "head",
            index: h,
            limit: model.n_heads(),
        });
    }

    let means = match mode {
        AblationKind::Zero => None,
        AblationKind::Mean => {
            let batch: Vec<Vec<TokenId>> =
                prompts.iter().map(|p| p.reference_tokens.clone()).collect();
            Some(model.head_means(&batch)?)
        }
    };
    let interventions: Vec<Intervention<T>> = heads
        .iter()
        .map(|&head| Intervention::AblateHead {
            layer,
            head,
            mode: match &means {
                None => AblationMode::Zero,
                Some(m) => AblationMode::Mean(m[layer][head].clone()),
            },
        })
        .collect();

    let mut before = Vec::with_capacity(prompts.len());
    let mut after = Vec::with_capacity(prompts.len());
    let mut control_drops = Vec::with_capacity(prompts.len());
    for p in prompts {
        p.validate()?;
        let plain = model.forward(&p.reference_tokens, &[])?;
        let ablated = model.forward(&p.reference_tokens, &interventions)?;
        before.push(plain.prob(p.target_token));
        after.push(ablated.prob(p.target_token));
        let ctrl = control_token(&plain.final_probabilities, p.target_token);
        control_drops.push(plain.prob(ctrl) - ablated.prob(ctrl));
    }
    let n = T::from_usize_lossy(prompts.len());
    let p_before = before.iter().copied().sum::<T>() / n;
    let p_after = after.iter().copied().sum::<T>() / n;
    let drop = p_before - p_after;
    Ok(AblationReport {
        layer,
        heads,
        mode,
        tau,
        p_before,
        p_after,
        drop,
        mechanism: classify_mechanism(drop, tau),
        per_prompt_drops: before.iter().zip(&after).map(|(&b, &a)| b - a).collect(),
        control_drops,
    })
}

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7, nine terms).
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let half = T::lit(0.5);
    if x < half {
        // reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        let pi = T::lit(std::f64::consts::PI);
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::lit(COEFFS[0]);
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc = acc + T::lit(c) / (x + T::from_usize_lossy(i));
    }
    let t = x + T::lit(7.5);
    T::lit(0.5 * (2.0 * std::f64::consts::PI).ln()) + (x + half) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_continued_fraction<T: Scalar>(a: T, b: T, x: T) -> T {
    let tiny = T::lit(1e-300).max(T::min_positive_value());
    let eps = T::epsilon();
    let one = T::one();
    let two = T::lit(2.0);
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;
    for m in 1..=300 {
        let m = T::from_usize_lossy(m);
        let m2 = two * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        h = h * d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        let del = d * c;
        h = h * del;
        if (del - one).abs() <= eps {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta<T: Scalar>(a: T, b: T, x: T) -> T {
    let (zero, one) = (T::zero(), T::one());
    if x <= zero {
        return zero;
    }
    if x >= one {
        return one;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (one - x).ln();
    let front = ln_front.exp();
    // The fraction converges fast for x below the mean; otherwise use the
    // symmetry I_x(a, b) = 1 - I_{1-x}(b, a).
    if x < (a + one) / (a + b + T::lit(2.0)) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        one - front * beta_continued_fraction(b, a, one - x) / b
    }
}

/// Student-t cumulative distribution function.
pub fn student_t_cdf<T: Scalar>(t: T, dof: T) -> T {
    let half = T::lit(0.5);
    let x = dof / (dof + t * t);
    let tail = half * regularized_incomplete_beta(dof * half, half, x);
    if t >= T::zero() {
        T::one() - tail
    } else {
        tail
    }
}

fn mean_var<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::from_usize_lossy(xs.len());
    let mean = xs.iter().copied().sum::<T>() / n;
    let ss: T = xs.iter().map(|&x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult<T> {
    pub t_statistic: T,
    pub degrees_of_freedom: T,
    pub p_value: T,
}

/// Welch's unequal-variance t-test with a two-sided p-value.
pub fn welch_t_test<T: Scalar>(xs: &[T], ys: &[T]) -> Result<WelchResult<T>> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::InsufficientData(
            "t-test needs at least two samples per group".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test samples"));
    }
    let (mx, vx) = mean_var(xs);
    let (my, vy) = mean_var(ys);
    let (nx, ny) = (T::from_usize_lossy(xs.len()), T::from_usize_lossy(ys.len()));
    let (sx, sy) = (vx / nx, vy / ny);
    let se2 = sx + sy;
    if !(se2 > T::zero()) {
        return Err(Error::ZeroVariance);
    }
    let t = (mx - my) / se2.sqrt();
    let dof = se2 * se2 / (sx * sx / (nx - T::one()) + sy * sy / (ny - T::one()));
    let p = T::lit(2.0) * student_t_cdf(-t.abs(), dof);
    Ok(WelchResult {
        t_statistic: t,
        degrees_of_freedom: dof,
        p_value: p.max(T::zero()).min(T::one()),
    })
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn fractional_ranks<T: Scalar>(xs: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| {
        xs[a]
            .partial_cmp(&xs[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![T::zero(); xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank mean((i+1)..=(j+1))
        let rank = T::lit((i + j) as f64 / 2.0 + 1.0);
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> Result<T> {
    let n = T::from_usize_lossy(xs.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        sxy = sxy + (x - mx) * (y - my);
        sxx = sxx + (x - mx) * (x - mx);
        syy = syy + (y - my) * (y - my);
    }
    if sxx == T::zero() {
        return Err(Error::UndefinedCorrelation("xs"));
    }
    if syy == T::zero() {
        return Err(Error::UndefinedCorrelation("ys"));
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
pub fn spearman<T: Scalar>(xs: &[T], ys: &[T]) -> Result<T> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            what: "spearman inputs",
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData(
            "correlation needs at least two points".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("spearman inputs"));
    }
    pearson(&fractional_ranks(xs), &fractional_ranks(ys))
}

/// Rank correlation between the per-layer recovery profile and a per-layer
/// kernel summary.
pub fn cross_trace_correlation<T: Scalar>(
    recovery: &RecoveryProfile<T>,
    coherence_per_layer: &[T],
) -> Result<T> {
    spearman(&recovery.scores, coherence_per_layer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsReport<T> {
    pub t_statistic: T,
    pub degrees_of_freedom: T,
    pub p_value: T,
    pub spearman_rho: T,
}

impl<T: Scalar> StatsReport<T> {
    pub fn new(welch: WelchResult<T>, spearman_rho: T) -> Self {
        StatsReport {
            t_statistic: welch.t_statistic,
            degrees_of_freedom: welch.degrees_of_freedom,
            p_value: welch.p_value,
            spearman_rho,
        }
    }
}
