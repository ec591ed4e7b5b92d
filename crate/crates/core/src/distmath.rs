//! Exact probability utilities for grouped categorical distributions.
//!
//! All quantities are in nats. Distributions are validated once at
//! construction so the hot-loop functions (`entropy`, `kl_divergence`) do not
//! re-check their inputs.

use ndarray::ArrayView2;
use num_traits::Float;
use thiserror::Error;

/// Tolerance on the per-group probability sum.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Probabilities below this are treated as exact zeros when computing entropy.
pub const ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("group {group}: probabilities must be finite and non-negative")]
    NegativeProbability { group: usize },
    #[error("group {group}: probabilities sum to {sum}, expected 1")]
    NotNormalized { group: usize, sum: f64 },
    #[error("need at least one group and two classes (got groups={groups}, classes={classes})")]
    BadShape { groups: usize, classes: usize },
    #[error("shape mismatch: ({0}, {1}) vs ({2}, {3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("KL undefined: q > 0 where p = 0 (group {group}, class {class})")]
    UndefinedKL { group: usize, class: usize },
    #[error("mixture weights must be non-negative and sum to 1")]
    InvalidWeights,
    #[error("mixture needs at least one component")]
    EmptyMixture,
}

/// A single K-way categorical distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        if probs.len() < 2 {
            return Err(DistError::BadShape { groups: 1, classes: probs.len() });
        }
        validate_group(&probs, 0)?;
        Ok(Self { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        Self { probs: vec![1.0 / classes as f64; classes] }
    }

    pub fn one_hot(classes: usize, index: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn entropy(&self) -> f64 {
        categorical_entropy(&self.probs)
    }
}

/// G independent K-way categoricals stored contiguously, group-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedCategorical {
    groups: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl GroupedCategorical {
    /// Builds from a flat group-major probability vector of length `groups * classes`.
    pub fn new(groups: usize, classes: usize, probs: Vec<f64>) -> Result<Self, DistError> {
        if groups == 0 || classes < 2 || probs.len() != groups * classes {
            return Err(DistError::BadShape { groups, classes });
        }
        for (g, chunk) in probs.chunks(classes).enumerate() {
            validate_group(chunk, g)?;
        }
        Ok(Self { groups, classes, probs })
    }

    /// Builds from non-negative weights, renormalizing each group in f64.
    ///
    /// Network outputs computed in single precision drift from an exact sum
    /// of one by ~1e-7; this is the entry point for them.
    pub fn normalized<T: Float>(groups: usize, classes: usize, weights: &[T]) -> Result<Self, DistError> {
        if groups == 0 || classes < 2 || weights.len() != groups * classes {
            return Err(DistError::BadShape { groups, classes });
        }
        let mut probs: Vec<f64> = weights.iter().map(|w| w.to_f64().unwrap_or(f64::NAN)).collect();
        for (g, chunk) in probs.chunks_mut(classes).enumerate() {
            if chunk.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(DistError::NegativeProbability { group: g });
            }
            let sum: f64 = chunk.iter().sum();
            if sum <= 0.0 {
                return Err(DistError::NotNormalized { group: g, sum });
            }
            chunk.iter_mut().for_each(|p| *p /= sum);
        }
        Self::new(groups, classes, probs)
    }

    pub fn from_groups(groups: Vec<CategoricalDist>) -> Result<Self, DistError> {
        let g = groups.len();
        let k = groups.first().map_or(0, |d| d.probs.len());
        if g == 0 || k < 2 {
            return Err(DistError::BadShape { groups: g, classes: k });
        }
        let mut probs = Vec::with_capacity(g * k);
        for d in &groups {
            if d.probs.len() != k {
                return Err(DistError::ShapeMismatch(g, k, g, d.probs.len()));
            }
            probs.extend_from_slice(&d.probs);
        }
        Ok(Self { groups: g, classes: k, probs })
    }

    pub fn uniform(groups: usize, classes: usize) -> Self {
        Self { groups, classes, probs: vec![1.0 / classes as f64; groups * classes] }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn group(&self, g: usize) -> &[f64] {
        &self.probs[g * self.classes..(g + 1) * self.classes]
    }

    /// Upper bound `G ln K` on the entropy of any distribution of this shape.
    pub fn max_entropy(&self) -> f64 {
        self.groups as f64 * (self.classes as f64).ln()
    }

    fn same_shape(&self, other: &Self) -> Result<(), DistError> {
        if self.groups != other.groups || self.classes != other.classes {
            return Err(DistError::ShapeMismatch(self.groups, self.classes, other.groups, other.classes));
        }
        Ok(())
    }
}

fn validate_group(probs: &[f64], group: usize) -> Result<(), DistError> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(DistError::NegativeProbability { group });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(DistError::NotNormalized { group, sum });
    }
    Ok(())
}

/// Entropy of one probability vector, with `0 ln 0 = 0`.
///
/// Unchecked; callers own validity. Generic so network code can evaluate it
/// directly on single-precision rows.
pub fn categorical_entropy<T: Float>(probs: &[T]) -> T {
    let floor = T::from(ENTROPY_FLOOR).unwrap();
    probs
        .iter()
        .filter(|&&p| p > floor)
        .fold(T::zero(), |acc, &p| acc - p * p.ln())
}

/// Sum of per-group entropies of a flat group-major probability row.
pub fn grouped_entropy<T: Float>(probs: &[T], classes: usize) -> T {
    probs
        .chunks(classes)
        .fold(T::zero(), |acc, g| acc + categorical_entropy(g))
}

/// Total entropy in nats: sum over groups.
pub fn entropy(dist: &GroupedCategorical) -> f64 {
    grouped_entropy(&dist.probs, dist.classes)
}

/// `KL(q || p)` summed over groups.
pub fn kl_divergence(q: &GroupedCategorical, p: &GroupedCategorical) -> Result<f64, DistError> {
    q.same_shape(p)?;
    let k = q.classes;
    let mut total = 0.0;
    for (i, (&qi, &pi)) in q.probs.iter().zip(&p.probs).enumerate() {
        if qi <= 0.0 {
            continue;
        }
        if pi <= 0.0 {
            return Err(DistError::UndefinedKL { group: i / k, class: i % k });
        }
        total += qi * (qi / pi).ln();
    }
    // Rounding can leave a -1e-17 residue when q == p.
    Ok(total.max(0.0))
}

fn marginals(joint: &ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let py = joint.rows().into_iter().map(|r| r.sum()).collect();
    let px = joint.columns().into_iter().map(|c| c.sum()).collect();
    (py, px)
}

/// Information gain `H(Y) - H(Y|X)` from a joint table with rows indexed by
/// Y and columns by X.
pub fn information_gain(joint: &ArrayView2<f64>) -> f64 {
    let (py, px) = marginals(joint);
    let h_y = categorical_entropy(&py);
    let mut h_y_given_x = 0.0;
    for (x, col) in joint.columns().into_iter().enumerate() {
        if px[x] <= ENTROPY_FLOOR {
            continue;
        }
        let cond: Vec<f64> = col.iter().map(|&v| v / px[x]).collect();
        h_y_given_x += px[x] * categorical_entropy(&cond);
    }
    h_y - h_y_given_x
}

/// The expected-KL form of information gain: `sum_x p(x) KL(p(Y|x) || p(Y))`.
pub fn information_gain_expected_kl(joint: &ArrayView2<f64>) -> f64 {
    let (py, px) = marginals(joint);
    let mut total = 0.0;
    for (x, col) in joint.columns().into_iter().enumerate() {
        if px[x] <= ENTROPY_FLOOR {
            continue;
        }
        for (y, &v) in col.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            let cond = v / px[x];
            total += px[x] * cond * (cond / py[y]).ln();
        }
    }
    total
}

/// Group-wise convex combination of components.
pub fn mixture(components: &[GroupedCategorical], weights: &[f64]) -> Result<GroupedCategorical, DistError> {
    let first = components.first().ok_or(DistError::EmptyMixture)?;
    if weights.len() != components.len()
        || weights.iter().any(|w| !w.is_finite() || *w < 0.0)
        || (weights.iter().sum::<f64>() - 1.0).abs() > SUM_TOLERANCE
    {
        return Err(DistError::InvalidWeights);
    }
    let mut probs = vec![0.0; first.probs.len()];
    for (c, &w) in components.iter().zip(weights) {
        first.same_shape(c)?;
        if w == 0.0 {
            continue;
        }
        for (acc, &p) in probs.iter_mut().zip(&c.probs) {
            *acc += w * p;
        }
    }
    // Exact degenerate weights must reproduce the component bit-for-bit.
    if let Some(i) = weights.iter().position(|&w| w == 1.0) {
        return Ok(components[i].clone());
    }
    GroupedCategorical::normalized(first.groups, first.classes, &probs)
}
