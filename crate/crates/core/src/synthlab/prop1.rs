use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, Labels, Modality, StoreMeta};

/// Values live on a grid of 2⁻¹⁶ so that f32 storage is lossless.
const GRID: f64 = 65536.0;
/// Magnitude bound keeping every grid value within f32 precision.
const MAX_ABS: f64 = 128.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Params {
    pub d: usize,
    pub n: usize,
    pub classes: usize,
    pub gap_norm: f64,
    pub tau: f64,
    pub class_separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for Prop1Params {
    fn default() -> Self {
        Prop1Params {
            d: 32,
            n: 500,
            classes: 4,
            gap_norm: 1.0,
            tau: 0.5,
            class_separation: 2.0,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl Prop1Params {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.d < self.classes + 2 {
            return Err(Error::Config(format!(
                "need d >= classes + 2 and classes >= 1, got d={} classes={}",
                self.d, self.classes
            )));
        }
        if self.n < self.classes {
            return Err(Error::Config(format!(
                "need n >= classes, got n={} classes={}",
                self.n, self.classes
            )));
        }
        for (name, v) in [
            ("gap_norm", self.gap_norm),
            ("tau", self.tau),
            ("class_separation", self.class_separation),
            ("noise", self.noise),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if self.noise < 0.0 || self.gap_norm <= 0.0 {
            return Err(Error::Config("noise must be >= 0 and gap_norm > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Prop1World {
    pub image: EmbeddingStore,
    pub text: EmbeddingStore,
    /// The gap vector `g`, equal to every `x_i − y_i`.
    pub gap: DVector<f64>,
    /// Coordinate carrying the gap direction.
    pub axis: usize,
}

fn quantize(v: f64) -> i64 {
    (v * GRID).round() as i64
}

/// Paired stores with a constant gap along one coordinate axis, a constant
/// projection of the images onto it, and an exactly zero image mean in the
/// orthogonal subspace. Every value is a multiple of 2⁻¹⁶, so the invariants
/// survive f32 storage bit for bit.
pub fn gen_prop1(p: &Prop1Params) -> Result<Prop1World> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let axis = rng.random_range(0..p.d);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let centers = DMatrix::from_fn(p.classes, p.d, |_, j| {
        if j == axis {
            0.0
        } else {
            p.class_separation * normal()
        }
    });
    let labels: Vec<usize> = (0..p.n).map(|i| i % p.classes).collect();
    let z = DMatrix::from_fn(p.n, p.d, |i, j| {
        if j == axis {
            0.0
        } else {
            centers[(labels[i], j)] + p.noise * normal()
        }
    });

    // Center in f64, move to integer grid units, then repair each column so
    // its unit sum is exactly zero.
    let mut units = DMatrix::<i64>::zeros(p.n, p.d);
    for j in 0..p.d {
        let mean = z.column(j).mean();
        let mut sum = 0i64;
        for i in 0..p.n {
            let u = quantize(z[(i, j)] - mean);
            units[(i, j)] = u;
            sum += u;
        }
        let step = -sum.signum();
        for k in 0..sum.unsigned_abs() as usize {
            units[(k % p.n, j)] += step;
        }
    }

    let offset = quantize(p.tau * p.gap_norm);
    let gap_units = quantize(p.gap_norm);
    if gap_units == 0 {
        return Err(Error::Config("gap_norm is below the storage grid".into()));
    }
    let x = DMatrix::from_fn(p.n, p.d, |i, j| {
        let u = if j == axis { offset } else { units[(i, j)] };
        u as f64 / GRID
    });
    let mut y = x.clone();
    for i in 0..p.n {
        y[(i, axis)] = (offset - gap_units) as f64 / GRID;
    }
    if x.iter().chain(y.iter()).any(|v| v.abs() >= MAX_ABS) {
        return Err(Error::Config(
            "scales too large for exact f32 storage; reduce separation or noise".into(),
        ));
    }

    let mut gap = DVector::zeros(p.d);
    gap[axis] = gap_units as f64 / GRID;
    let meta = |prefix: &str| StoreMeta {
        ids: Some((0..p.n).map(|i| format!("{prefix}{i}")).collect()),
        labels: Some(Labels::Single(labels.clone())),
        attributes: None,
        class_names: Some((0..p.classes).map(|c| format!("class{c}")).collect()),
        source: format!("synth:prop1:seed={}", p.seed),
    };
    Ok(Prop1World {
        image: EmbeddingStore::new(x, Modality::Image, false, meta("image"))?,
        text: EmbeddingStore::new(y, Modality::Text, false, meta("text"))?,
        gap,
        axis,
    })
}
