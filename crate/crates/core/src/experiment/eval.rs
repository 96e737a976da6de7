//! k-NN evaluation over the leading subspace dimensions.

use std::fmt::Write as _;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::dct::SpectrumSet;
use crate::discriminant::{project, Projection, Subspace};
use crate::error::{QfdaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fda,
    Qfda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fda => "fda",
            Method::Qfda => "qfda",
        }
    }
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Misclassification fraction of Euclidean k-NN with majority vote.
///
/// Neighbours are ordered by distance, then by training index; a tied vote
/// goes to the smaller class id.
pub fn knn_error(train: &Projection, eval: &Projection, k: usize) -> Result<f64> {
    let n_train = train.coords.ncols();
    let n_eval = eval.coords.ncols();
    if n_eval == 0 {
        return Err(QfdaError::Data("empty evaluation set".into()));
    }
    if k == 0 || k > n_train {
        return Err(QfdaError::Value(format!("k = {k} must be in 1..={n_train}")));
    }
    if train.coords.nrows() != eval.coords.nrows() {
        return Err(QfdaError::Dimension(format!(
            "projections have {} and {} dimensions",
            train.coords.nrows(),
            eval.coords.nrows()
        )));
    }
    let classes = train.labels.iter().max().map_or(0, |&c| c + 1);
    let q = train.coords.nrows();

    let mut wrong = 0usize;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n_train);
    let mut votes = vec![0usize; classes];
    for j in 0..n_eval {
        order.clear();
        order.extend((0..n_train).map(|i| {
            let d: f64 = (0..q)
                .map(|r| {
                    let t = train.coords[(r, i)] - eval.coords[(r, j)];
                    t * t
                })
                .sum();
            (d, i)
        }));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        votes.iter_mut().for_each(|v| *v = 0);
        for &(_, i) in &order[..k] {
            votes[train.labels[i]] += 1;
        }
        let mut predicted = 0;
        for c in 1..classes {
            if votes[c] > votes[predicted] {
                predicted = c;
            }
        }
        if predicted != eval.labels[j] {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / n_eval as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Error at `q = 1, 2, ...`.
    pub per_dim_errors: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `per_dim_errors`.
    pub std: f64,
    pub split: SplitName,
    pub method: Method,
    /// The sweep stopped early because the subspace has fewer than
    /// `max_dims` directions.
    pub truncated: bool,
}

impl EvalReport {
    pub fn from_errors(per_dim_errors: Vec<f64>, split: SplitName, method: Method, truncated: bool) -> Self {
        let n = per_dim_errors.len() as f64;
        let mean = per_dim_errors.iter().sum::<f64>() / n;
        let var = per_dim_errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        Self {
            per_dim_errors,
            mean,
            std: var.sqrt(),
            split,
            method,
            truncated,
        }
    }

    /// `q,error` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("q,error\n");
        for (i, e) in self.per_dim_errors.iter().enumerate() {
            let _ = writeln!(out, "{},{e}", i + 1);
        }
        out
    }

    pub fn file_name(&self) -> String {
        format!("errors_{}_{}.csv", self.method.as_str(), self.split.as_str())
    }
}

/// The first `q` rows of a projection.
fn leading(p: &Projection, q: usize) -> Projection {
    Projection {
        coords: Mat::from_fn(q, p.coords.ncols(), |i, j| p.coords[(i, j)]),
        labels: p.labels.clone(),
    }
}

/// k-NN errors for `q = 1..=min(max_dims, p)`, classifying `eval` against
/// `train`.
pub fn evaluate_subspace(
    subspace: &Subspace,
    train: &SpectrumSet,
    eval: &SpectrumSet,
    k_nn: usize,
    max_dims: usize,
    split: SplitName,
    method: Method,
) -> Result<EvalReport> {
    if subspace.p() == 0 || max_dims == 0 {
        return Err(QfdaError::Dimension("need at least one direction".into()));
    }
    let q_max = max_dims.min(subspace.p());
    if q_max < max_dims {
        log::warn!(
            "{} {}: subspace has {} directions, sweep stops at q = {q_max}",
            method.as_str(),
            split.as_str(),
            subspace.p()
        );
    }
    let train_full = project(subspace, train, q_max)?;
    let eval_full = project(subspace, eval, q_max)?;
    let errors = (1..=q_max)
        .map(|q| knn_error(&leading(&train_full, q), &leading(&eval_full, q), k_nn))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_errors(errors, split, method, q_max < max_dims))
}
