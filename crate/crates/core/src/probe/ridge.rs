//! Closed-form minimizer of the regularized quadratic loss
//! `(1/n) Σ ‖W x_i − t_i‖² + λ ‖W‖²_F`.

use nalgebra::{Cholesky, DMatrix};

use super::{Activation, Layer, ModelKind, ProbeModel, Task};
use crate::error::{Error, Result};

/// Class frequencies of `labels` over `classes` classes.
pub fn empirical_distribution(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; classes];
    for &l in labels {
        if l < classes {
            counts[l] += 1.0;
        }
    }
    let n = labels.len().max(1) as f64;
    counts.iter().map(|c| c / n).collect()
}

/// Row `i` is `one_hot(labels[i]) − distribution`.
pub fn balanced_targets(labels: &[usize], distribution: &[f64]) -> Result<DMatrix<f64>> {
    let total: f64 = distribution.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "class distribution sums to {total}, expected 1"
        )));
    }
    let classes = distribution.len();
    let mut t = DMatrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Config(format!(
                "label {l} at row {i} out of range for {classes} classes"
            )));
        }
        for c in 0..classes {
            t[(i, c)] = f64::from(u8::from(c == l)) - distribution[c];
        }
    }
    Ok(t)
}

/// `(1/n) Σ ‖W x_i − t_i‖² + λ ‖W‖²_F` with `W` of shape classes×d.
pub fn quadratic_objective(
    w: &DMatrix<f64>,
    x: &DMatrix<f64>,
    t: &DMatrix<f64>,
    lambda: f64,
) -> f64 {
    let resid = x * w.transpose() - t;
    resid.norm_squared() / x.nrows() as f64 + lambda * w.norm_squared()
}

/// Solves `W (XᵀX/n + λI) = TᵀX/n`, the unique minimizer for `λ > 0`.
pub fn ridge_fit(x: &DMatrix<f64>, t: &DMatrix<f64>, lambda: f64) -> Result<ProbeModel> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "ridge lambda must be > 0, got {lambda}"
        )));
    }
    if x.nrows() != t.nrows() {
        return Err(Error::Shape(format!(
            "{} inputs but {} targets",
            x.nrows(),
            t.nrows()
        )));
    }
    if x.iter().chain(t.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Config("ridge inputs must be finite".into()));
    }
    let n = x.nrows() as f64;
    let d = x.ncols();
    let mut gram = x.transpose() * x / n;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = x.transpose() * t / n;
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::Numerical("ridge normal matrix is not positive definite".into()))?;
    let wt = chol.solve(&rhs);
    Ok(ProbeModel {
        kind: ModelKind::Linear,
        task: Task::Quadratic,
        activation: Activation::None,
        layers: vec![Layer {
            weight: wt.transpose(),
            bias: None,
        }],
        gap_closing: None,
        class_prior: None,
        config: None,
        seed: None,
    })
}
