//! Bipartite image–text graphs and the factorization identities behind the
//! contrastive-loss analysis.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::column_mean;

/// Permutation matrices averaged by the spectral identity check.
const PERMUTATIONS: usize = 3;
const MAX_RETRIES: usize = 16;
/// Largest accepted condition number of `FFᵀ`.
const MAX_CONDITION: f64 = 1e8;

/// Joint distribution `P` (N×M) over images and texts, factors `F` (N×D)
/// and `G` (M×D), and one-hot labels `Y_x` (N×C), `Y_z` (M×C).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInstance {
    pub p: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub y_x: DMatrix<f64>,
    pub y_z: DMatrix<f64>,
}

impl GraphInstance {
    /// `max |PᵀY_x − Y_z / M|`.
    pub fn assumption_residual(&self) -> f64 {
        let m = self.p.ncols() as f64;
        (self.p.transpose() * &self.y_x - &self.y_z / m).amax()
    }

    /// Replaces `P` and refits `G` so that `FGᵀ = P`.
    pub fn with_p(&self, p: DMatrix<f64>) -> Result<GraphInstance> {
        let g = fit_text_factor(&self.f, &p)?;
        Ok(GraphInstance {
            p,
            g,
            ..self.clone()
        })
    }

    /// Class-mean classifier `M·FᵀY_x` (D×C).
    pub fn class_mean_classifier(&self) -> DMatrix<f64> {
        self.f.transpose() * &self.y_x * self.p.ncols() as f64
    }

    /// `max |G·(M·FᵀY_x) − Y_z|`.
    pub fn classmean_residual(&self) -> f64 {
        (&self.g * self.class_mean_classifier() - &self.y_z).amax()
    }
}

fn gaussian(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut *rng))
}

fn one_hot(classes_of: &[usize], classes: usize) -> DMatrix<f64> {
    DMatrix::from_fn(classes_of.len(), classes, |i, c| {
        f64::from(u8::from(classes_of[i] == c))
    })
}

/// `L = −2 Σ p(x,z) fₓᵀg_z + NM · E_{x∼Pₓ, z∼P_z}[(fₓᵀg_z)²]` with the
/// marginals taken from `P`.
pub fn spectral_loss(p: &DMatrix<f64>, f: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    let (n, m) = p.shape();
    let s = f * g.transpose();
    let px: Vec<f64> = p.row_iter().map(|r| r.sum()).collect();
    let pz: Vec<f64> = p.column_iter().map(|c| c.sum()).collect();
    let mut cross = 0.0;
    let mut second = 0.0;
    for x in 0..n {
        for z in 0..m {
            cross += p[(x, z)] * s[(x, z)];
            second += px[x] * pz[z] * s[(x, z)] * s[(x, z)];
        }
    }
    -2.0 * cross + (n * m) as f64 * second
}

/// `|‖P − FGᵀ‖²_F − (L + Σ p²)|`, zero whenever both marginals are uniform.
pub fn spectral_residual(p: &DMatrix<f64>, f: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    let lhs = (p - f * g.transpose()).norm_squared();
    (lhs - (spectral_loss(p, f, g) + p.norm_squared())).abs()
}

/// Average of random permutation matrices, scaled to total mass 1.
pub fn permutation_mixture(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    let mut perm: Vec<usize> = (0..n).collect();
    let w = 1.0 / (k * n) as f64;
    for _ in 0..k {
        perm.shuffle(rng);
        for (x, &z) in perm.iter().enumerate() {
            p[(x, z)] += w;
        }
    }
    p
}

pub fn spectral_identity_check(n: usize, d: usize, seed: u64) -> Result<f64> {
    if n < 2 || d == 0 {
        return Err(Error::Config(format!(
            "need N >= 2 and D >= 1, got N={n} D={d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = permutation_mixture(n, PERMUTATIONS, &mut rng);
    let f = gaussian(n, d, &mut rng);
    let g = gaussian(n, d, &mut rng);
    Ok(spectral_residual(&p, &f, &g))
}

fn condition(gram: &DMatrix<f64>) -> f64 {
    let e = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = e.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// `G = Pᵀ(FFᵀ)⁻¹F`, so that `FGᵀ = P` when `F` has full row rank.
fn fit_text_factor(f: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = f * f.transpose();
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::Numerical("image factor is rank deficient".into()))?;
    Ok(p.transpose() * chol.solve(f))
}

/// Class-blocked joint distribution satisfying `PᵀY_x = Y_z / M`: each text
/// spreads mass `1/M` over images of its own class with random weights.
pub fn class_blocked(
    n: usize,
    m: usize,
    d: usize,
    classes: usize,
    seed: u64,
) -> Result<GraphInstance> {
    if classes == 0 || classes > n || classes > m {
        return Err(Error::Config(format!(
            "need 1 <= classes <= min(N, M), got classes={classes} N={n} M={m}"
        )));
    }
    if d < n {
        return Err(Error::Config(format!("need D >= N, got D={d} N={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image_class: Vec<usize> = (0..n).map(|x| x % classes).collect();
    let text_class: Vec<usize> = (0..m).map(|z| z % classes).collect();
    let mut p = DMatrix::zeros(n, m);
    for z in 0..m {
        let members: Vec<usize> = (0..n)
            .filter(|&x| image_class[x] == text_class[z])
            .collect();
        let w: Vec<f64> = members.iter().map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = w.iter().sum();
        for (&x, wx) in members.iter().zip(&w) {
            p[(x, z)] = wx / total / m as f64;
        }
    }
    for _ in 0..MAX_RETRIES {
        let f = gaussian(n, d, &mut rng);
        if condition(&(&f * f.transpose())) > MAX_CONDITION {
            continue;
        }
        let g = fit_text_factor(&f, &p)?;
        return Ok(GraphInstance {
            p,
            f,
            g,
            y_x: one_hot(&image_class, classes),
            y_z: one_hot(&text_class, classes),
        });
    }
    Err(Error::Numerical(format!(
        "no well-conditioned image factor after {MAX_RETRIES} draws"
    )))
}

pub fn classmean_check(n: usize, m: usize, d: usize, classes: usize, seed: u64) -> Result<f64> {
    Ok(class_blocked(n, m, d, classes, seed)?.classmean_residual())
}

/// Moves all of text 0's mass onto one image of another class, breaking
/// the class-block assumption for exactly one (image, text) pair.
pub fn violate_assumption(inst: &GraphInstance) -> Result<GraphInstance> {
    let classes = inst.y_x.ncols();
    if classes < 2 {
        return Err(Error::Config("violation needs at least two classes".into()));
    }
    let own = (0..classes).find(|&c| inst.y_z[(0, c)] == 1.0).unwrap_or(0);
    let x = (0..inst.p.nrows())
        .find(|&x| inst.y_x[(x, own)] == 0.0)
        .ok_or_else(|| Error::Config("no image outside the text's class".into()))?;
    let mut p = inst.p.clone();
    let mass = p.column(0).sum();
    p.column_mut(0).fill(0.0);
    p[(x, 0)] = mass;
    inst.with_p(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingCheck {
    pub factor: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub gap_before: f64,
    pub gap_after: f64,
}

impl ScalingCheck {
    pub fn loss_change(&self) -> f64 {
        (self.loss_after - self.loss_before).abs()
    }

    pub fn gap_change(&self) -> f64 {
        (self.gap_after - self.gap_before).abs()
    }
}

fn mean_gap(f: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    (column_mean(f) - column_mean(g)).norm()
}

/// Rescales `(F, G)` to `(cF, G/c)`: the loss cannot change, the gap between
/// the factor means does.
pub fn scaling_check(n: usize, d: usize, factor: f64, seed: u64) -> Result<ScalingCheck> {
    if n < 2 || d == 0 || !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Config(
            "need N >= 2, D >= 1 and a positive finite factor".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = permutation_mixture(n, PERMUTATIONS, &mut rng);
    let f = gaussian(n, d, &mut rng) + DMatrix::from_element(n, d, 0.5);
    let g = gaussian(n, d, &mut rng);
    let (fs, gs) = (&f * factor, &g / factor);
    Ok(ScalingCheck {
        factor,
        loss_before: spectral_loss(&p, &f, &g),
        loss_after: spectral_loss(&p, &fs, &gs),
        gap_before: mean_gap(&f, &g),
        gap_after: mean_gap(&fs, &gs),
    })
}
