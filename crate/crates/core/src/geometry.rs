//! Modality-gap geometry: per-pair gaps, the gap statistics report, and the
//! gap-closing transform (subtracting each modality's mean embedding).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_mean, cosine, subtract_row, MeanStd};
use crate::store::{EmbeddingStore, Labels};

/// Below this norm the mean gap has no usable direction.
pub const MIN_GAP_NORM: f64 = 1e-12;

/// Gap statistics for one level (individual pairs or class means).
///
/// Direction, orthogonality and center depend on the normalized mean gap and
/// are `None` when the mean gap is numerically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub count: usize,
    pub magnitude: MeanStd,
    pub direction: Option<MeanStd>,
    pub orthogonality_image: Option<MeanStd>,
    pub orthogonality_text: Option<MeanStd>,
    pub center_image: Option<MeanStd>,
    pub center_text: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub mean_gap: Vec<f64>,
    pub mean_gap_norm: f64,
    pub n_pairs: usize,
    pub n_classes: Option<usize>,
    pub individual: LevelStats,
    pub class: Option<LevelStats>,
}

fn check_paired(img: &EmbeddingStore, txt: &EmbeddingStore) -> Result<()> {
    if img.matrix().shape() != txt.matrix().shape() {
        return Err(Error::Shape(format!(
            "paired stores differ: image {:?} vs text {:?}",
            img.matrix().shape(),
            txt.matrix().shape()
        )));
    }
    Ok(())
}

/// Per-pair gaps `x_i - y_i` and their column mean.
pub fn pair_gaps(
    img: &EmbeddingStore,
    txt: &EmbeddingStore,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_paired(img, txt)?;
    let gaps = img.matrix() - txt.matrix();
    let mean = column_mean(&gaps);
    Ok((gaps, mean))
}

fn cosines_to(rows: &DMatrix<f64>, dir: &DVector<f64>) -> Vec<f64> {
    // A zero row has no direction; it is counted as orthogonal.
    rows.row_iter()
        .map(|r| cosine(r.iter(), dir.iter()).unwrap_or(0.0))
        .collect()
}

/// Pooled mean/std over the d coordinates of `E[u - (u·ĝ)ĝ]`.
fn center_stat(u: &DMatrix<f64>, unit_gap: &DVector<f64>) -> MeanStd {
    let mut acc = DVector::zeros(u.ncols());
    for row in u.row_iter() {
        let proj: f64 = row.iter().zip(unit_gap.iter()).map(|(a, b)| a * b).sum();
        for ((a, v), g) in acc.iter_mut().zip(row.iter()).zip(unit_gap.iter()) {
            *a += v - proj * g;
        }
    }
    acc /= u.nrows() as f64;
    MeanStd::of(acc.as_slice())
}

/// Statistics over aligned rows of `x` (image side) and `y` (text side).
pub fn level_stats(x: &DMatrix<f64>, y: &DMatrix<f64>) -> LevelStats {
    let gaps = x - y;
    let mean_gap = column_mean(&gaps);
    let norm = mean_gap.norm();
    let magnitudes: Vec<f64> = gaps.row_iter().map(|r| r.norm()).collect();

    let mut stats = LevelStats {
        count: x.nrows(),
        magnitude: MeanStd::of(&magnitudes),
        direction: None,
        orthogonality_image: None,
        orthogonality_text: None,
        center_image: None,
        center_text: None,
    };
    if norm < MIN_GAP_NORM {
        return stats;
    }
    let unit_gap = &mean_gap / norm;
    stats.direction = Some(MeanStd::of(&cosines_to(&gaps, &mean_gap)));
    let xc = subtract_row(x, &column_mean(x));
    let yc = subtract_row(y, &column_mean(y));
    stats.orthogonality_image = Some(MeanStd::of(&cosines_to(&xc, &mean_gap)));
    stats.orthogonality_text = Some(MeanStd::of(&cosines_to(&yc, &mean_gap)));
    stats.center_image = Some(center_stat(x, &unit_gap));
    stats.center_text = Some(center_stat(y, &unit_gap));
    stats
}

/// Per-class mean rows for every class with at least one member.
fn class_means(m: &DMatrix<f64>, labels: &Labels) -> (Vec<usize>, DMatrix<f64>) {
    let classes = labels.max_index().map_or(0, |c| c + 1);
    let mut sums = DMatrix::zeros(classes, m.ncols());
    let mut counts = vec![0usize; classes];
    let mut add = |row: usize, c: usize| {
        counts[c] += 1;
        let mut dst = sums.row_mut(c);
        dst += m.row(row);
    };
    match labels {
        Labels::Single(v) => v.iter().enumerate().for_each(|(i, &c)| add(i, c)),
        Labels::Multi(v) => v
            .iter()
            .enumerate()
            .for_each(|(i, set)| set.iter().for_each(|&c| add(i, c))),
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    let mut out = DMatrix::zeros(present.len(), m.ncols());
    for (k, &c) in present.iter().enumerate() {
        let mut dst = out.row_mut(k);
        dst.copy_from(&(sums.row(c) / counts[c] as f64));
    }
    (present, out)
}

pub fn gap_report(img: &EmbeddingStore, txt: &EmbeddingStore) -> Result<GapReport> {
    check_paired(img, txt)?;
    let (_, mean_gap) = pair_gaps(img, txt)?;
    let individual = level_stats(img.matrix(), txt.matrix());

    let labels = img.labels().or_else(|| txt.labels());
    let (n_classes, class) = match labels {
        Some(labels) => {
            let (present, xc) = class_means(img.matrix(), labels);
            let (_, yc) = class_means(txt.matrix(), labels);
            (Some(present.len()), Some(level_stats(&xc, &yc)))
        }
        None => (None, None),
    };
    Ok(GapReport {
        mean_gap_norm: mean_gap.norm(),
        mean_gap: mean_gap.iter().copied().collect(),
        n_pairs: img.rows(),
        n_classes,
        individual,
        class,
    })
}

/// Subtracts the store's column mean; returns the centered store and the mean.
pub fn close_gap(store: &EmbeddingStore) -> Result<(EmbeddingStore, DVector<f64>)> {
    let mean = column_mean(store.matrix());
    let centered = subtract_row(store.matrix(), &mean);
    let out = EmbeddingStore::new(centered, store.modality(), false, store.meta().clone())?;
    Ok((out, mean))
}
