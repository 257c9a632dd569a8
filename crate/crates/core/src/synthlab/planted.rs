use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::AdditiveEmbedder;
use crate::error::{Error, Result};
use crate::prompts::{parse_template, Assignment, AttributeSchema, Family, Template};
use crate::store::{write_json, write_store, EmbeddingStore, Labels, Modality, StoreMeta};

pub const CLASS_FAMILY: &str = "class";
pub const NUISANCE_FAMILY: &str = "nuisance";

pub const SCENARIO_TEMPLATES: [&str; 4] = [
    "a photo of a {class}[ in the {nuisance}].",
    "an image of a {class}[ with {nuisance} around it].",
    "a picture showing a {class}[ near the {nuisance}].",
    "{class}[, {nuisance}].",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedParams {
    pub classes: usize,
    pub nuisances: usize,
    /// Probability that a training image shows its class's majority nuisance.
    pub correlation: f64,
    /// (class, nuisance) pairs never drawn for training.
    #[serde(default)]
    pub unseen_combos: Vec<(usize, usize)>,
    pub n_train: usize,
    pub n_val: usize,
    pub d: usize,
    pub direction_scale: f64,
    /// Image-side weight of the class direction.
    pub class_strength: f64,
    /// Image-side weight of the nuisance direction.
    pub nuisance_strength: f64,
    pub noise: f64,
    pub gap_norm: f64,
    /// Text noise scale; defaults to 0.01 · direction_scale.
    #[serde(default)]
    pub text_noise: Option<f64>,
    pub seed: u64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        PlantedParams {
            classes: 2,
            nuisances: 2,
            correlation: 0.95,
            unseen_combos: vec![],
            n_train: 2000,
            n_val: 800,
            d: 16,
            direction_scale: 1.0,
            class_strength: 0.6,
            nuisance_strength: 1.0,
            noise: 0.4,
            gap_norm: 1.0,
            text_noise: None,
            seed: 0,
        }
    }
}

impl PlantedParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.correlation > 0.5 && self.correlation <= 1.0) {
            return Err(Error::Config(format!(
                "correlation must lie in (0.5, 1], got {}",
                self.correlation
            )));
        }
        if self.classes < 2 || self.nuisances < 2 {
            return Err(Error::Config(
                "need at least 2 classes and 2 nuisances".into(),
            ));
        }
        if self.d < self.classes + self.nuisances + 1 {
            return Err(Error::Config(format!(
                "d must be >= classes + nuisances + 1 = {}",
                self.classes + self.nuisances + 1
            )));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be positive".into()));
        }
        for &(c, b) in &self.unseen_combos {
            if c >= self.classes || b >= self.nuisances {
                return Err(Error::Config(format!(
                    "unseen combo ({c}, {b}) out of range"
                )));
            }
        }
        for c in 0..self.classes {
            if (0..self.nuisances).all(|b| self.unseen_combos.contains(&(c, b))) {
                return Err(Error::Config(format!(
                    "unseen combos cover every nuisance of class {c}"
                )));
            }
            if self.correlation == 1.0 && self.unseen_combos.contains(&(c, self.majority(c))) {
                return Err(Error::Config(format!(
                    "class {c} can only be drawn with its majority nuisance, which is unseen"
                )));
            }
        }
        let scales = [
            self.direction_scale,
            self.class_strength,
            self.nuisance_strength,
            self.noise,
            self.gap_norm,
            self.text_noise.unwrap_or(0.0),
        ];
        if scales.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("scales must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Majority nuisance of class `c`.
    pub fn majority(&self, c: usize) -> usize {
        c % self.nuisances
    }

    pub fn text_noise(&self) -> f64 {
        self.text_noise.unwrap_or(0.01 * self.direction_scale)
    }
}

pub fn class_value(c: usize) -> String {
    format!("class{c}")
}

pub fn nuisance_value(b: usize) -> String {
    format!("nuisance{b}")
}

/// Spurious-correlation world: training images pair each class with its
/// majority nuisance at the given rate, validation images are balanced over
/// all (class, nuisance) combinations, and texts are composed additively
/// from the same class and nuisance directions minus a gap vector.
#[derive(Debug, Clone)]
pub struct PlantedScenario {
    pub params: PlantedParams,
    pub train: EmbeddingStore,
    pub val: EmbeddingStore,
    pub schema: AttributeSchema,
    pub templates: Vec<String>,
    pub embedder: AdditiveEmbedder,
    pub gap: DVector<f64>,
}

impl PlantedScenario {
    pub fn parsed_templates(&self) -> Result<Vec<Template>> {
        self.templates.iter().map(|t| parse_template(t)).collect()
    }

    /// Assignment of the (class, nuisance) combination.
    pub fn combo(&self, c: usize, b: usize) -> Assignment {
        Assignment::from([
            (CLASS_FAMILY.to_string(), class_value(c)),
            (NUISANCE_FAMILY.to_string(), nuisance_value(b)),
        ])
    }

    /// Combinations whose nuisance is not the class's majority nuisance.
    pub fn minority_combos(&self) -> Vec<Assignment> {
        let p = &self.params;
        (0..p.classes)
            .flat_map(|c| (0..p.nuisances).map(move |b| (c, b)))
            .filter(|&(c, b)| b != p.majority(c))
            .map(|(c, b)| self.combo(c, b))
            .collect()
    }

    /// Writes stores, schema, templates, text model and parameters to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_store(&self.train, &dir.join("train.emb"))?;
        write_store(&self.val, &dir.join("val.emb"))?;
        write_json(&dir.join("schema.json"), &self.schema)?;
        write_json(&dir.join("templates.json"), &self.templates)?;
        write_json(&dir.join("text_model.json"), &self.embedder)?;
        write_json(&dir.join("params.json"), &self.params)?;
        Ok(())
    }
}

fn orthonormal_columns(d: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut *rng));
    m.qr().q()
}

fn draw_nuisance(p: &PlantedParams, c: usize, rng: &mut ChaCha8Rng) -> usize {
    loop {
        let major = p.majority(c);
        let b = if rng.random_bool(p.correlation) {
            major
        } else {
            let k = rng.random_range(0..p.nuisances - 1);
            if k >= major {
                k + 1
            } else {
                k
            }
        };
        if !p.unseen_combos.contains(&(c, b)) {
            return b;
        }
    }
}

pub fn gen_planted(p: &PlantedParams) -> Result<PlantedScenario> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let q = orthonormal_columns(p.d, p.classes + p.nuisances + 1, &mut rng);
    let mu = |c: usize| q.column(c).into_owned();
    let nu = |b: usize| q.column(p.classes + b).into_owned();
    let g_hat = q.column(p.classes + p.nuisances).into_owned();
    let s = p.direction_scale;

    let image =
        |pairs: &[(usize, usize)], rng: &mut ChaCha8Rng, name: &str| -> Result<EmbeddingStore> {
            let mut x = DMatrix::zeros(pairs.len(), p.d);
            for (i, &(c, b)) in pairs.iter().enumerate() {
                let base = mu(c) * (s * p.class_strength) + nu(b) * (s * p.nuisance_strength);
                for j in 0..p.d {
                    let e: f64 = StandardNormal.sample(&mut *rng);
                    x[(i, j)] = base[j] + p.noise * e;
                }
            }
            let attributes = BTreeMap::from([
                (
                    CLASS_FAMILY.to_string(),
                    pairs.iter().map(|&(c, _)| class_value(c)).collect(),
                ),
                (
                    NUISANCE_FAMILY.to_string(),
                    pairs.iter().map(|&(_, b)| nuisance_value(b)).collect(),
                ),
            ]);
            let meta = StoreMeta {
                ids: Some((0..pairs.len()).map(|i| format!("{name}{i}")).collect()),
                labels: Some(Labels::Single(pairs.iter().map(|&(c, _)| c).collect())),
                attributes: Some(attributes),
                class_names: Some((0..p.classes).map(class_value).collect()),
                source: format!("synth:planted:{name}:seed={}", p.seed),
            };
            EmbeddingStore::new(x, Modality::Image, false, meta)
        };

    let train_pairs: Vec<(usize, usize)> = (0..p.n_train)
        .map(|_| {
            let c = rng.random_range(0..p.classes);
            (c, draw_nuisance(p, c, &mut rng))
        })
        .collect();
    let combos = p.classes * p.nuisances;
    let val_pairs: Vec<(usize, usize)> = (0..p.n_val)
        .map(|i| ((i % combos) / p.nuisances, i % p.nuisances))
        .collect();
    let train = image(&train_pairs, &mut rng, "train")?;
    let val = image(&val_pairs, &mut rng, "val")?;

    let family = |name: &str, values: Vec<String>| Family {
        name: name.into(),
        values,
    };
    let class_values: Vec<String> = (0..p.classes).map(class_value).collect();
    let schema = AttributeSchema::new(
        vec![
            family(CLASS_FAMILY, class_values.clone()),
            family(
                NUISANCE_FAMILY,
                (0..p.nuisances).map(nuisance_value).collect(),
            ),
        ],
        CLASS_FAMILY.into(),
        class_values,
    )?;

    let to_vec = |v: DVector<f64>| -> Vec<f64> { (v * s).iter().copied().collect() };
    let directions = BTreeMap::from([
        (
            CLASS_FAMILY.to_string(),
            (0..p.classes)
                .map(|c| (class_value(c), to_vec(mu(c))))
                .collect(),
        ),
        (
            NUISANCE_FAMILY.to_string(),
            (0..p.nuisances)
                .map(|b| (nuisance_value(b), to_vec(nu(b))))
                .collect(),
        ),
    ]);
    let gap = &g_hat * p.gap_norm;
    let embedder = AdditiveEmbedder {
        dim: p.d,
        directions,
        offset: gap.iter().map(|v| -v).collect(),
        noise: p.text_noise(),
        seed: p.seed,
    };
    Ok(PlantedScenario {
        params: p.clone(),
        train,
        val,
        schema,
        templates: SCENARIO_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        embedder,
        gap,
    })
}
