use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One slice's paired scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub name: String,
    pub text: f64,
    pub image: f64,
}

/// Rank and linear correlation between per-slice text and image scores.
/// A coefficient is `None` when either input is constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub n_slices: usize,
    pub pairs: Vec<ScorePair>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn correlate(pairs: Vec<ScorePair>) -> Result<CorrelationReport> {
    if pairs.len() < 3 {
        return Err(Error::Config(format!(
            "correlation needs at least 3 paired slices, got {}",
            pairs.len()
        )));
    }
    if pairs
        .iter()
        .any(|p| !p.text.is_finite() || !p.image.is_finite())
    {
        return Err(Error::Config("correlation inputs must be finite".into()));
    }
    let text: Vec<f64> = pairs.iter().map(|p| p.text).collect();
    let image: Vec<f64> = pairs.iter().map(|p| p.image).collect();
    Ok(CorrelationReport {
        spearman: spearman(&text, &image),
        pearson: pearson(&text, &image),
        n_slices: pairs.len(),
        pairs,
    })
}
