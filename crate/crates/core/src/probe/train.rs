//! Mini-batch Adam training with best-validation-loss snapshot selection.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ridge::{balanced_targets, empirical_distribution};
use super::{affine, Activation, GapClosing, Layer, ModelKind, ProbeModel, Task};
use crate::error::{Error, Result};
use crate::linalg::{column_mean, subtract_row};
use crate::store::{EmbeddingStore, Labels, Modality};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    #[default]
    BestValLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ridge_lambda: f64,
    #[serde(default)]
    pub model_selection: ModelSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 25,
            batch_size: 256,
            seed: 0,
            ridge_lambda: 1e-3,
            model_selection: ModelSelection::BestValLoss,
        }
    }
}

impl TrainConfig {
    /// Defaults for continued training on slice texts.
    pub fn rectification() -> Self {
        TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if task == Task::Quadratic && !(self.ridge_lambda > 0.0) {
            return Err(Error::Config(format!(
                "quadratic task needs lambda > 0, got {}",
                self.ridge_lambda
            )));
        }
        Ok(())
    }

    fn reg(&self, task: Task) -> f64 {
        if task == Task::Quadratic {
            self.ridge_lambda
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    #[default]
    Empirical,
    Uniform,
}

/// Architecture and task of a model to be trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: ModelKind,
    pub task: Task,
    /// Hidden layer widths (MLP only).
    pub hidden: Vec<usize>,
    pub gap_closing: bool,
    pub prior: PriorMode,
}

impl ProbeSpec {
    pub fn linear(task: Task) -> Self {
        ProbeSpec {
            kind: ModelKind::Linear,
            task,
            hidden: vec![],
            gap_closing: false,
            prior: PriorMode::Empirical,
        }
    }

    pub fn mlp(task: Task, hidden: usize) -> Self {
        ProbeSpec {
            kind: ModelKind::Mlp,
            task,
            hidden: vec![hidden],
            gap_closing: false,
            prior: PriorMode::Empirical,
        }
    }

    pub fn with_gap_closing(mut self, on: bool) -> Self {
        self.gap_closing = on;
        self
    }
}

/// Randomly initialized model, uniform in ±1/√fan_in per layer.
pub fn init_model(
    spec: &ProbeSpec,
    input_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<ProbeModel> {
    if spec.task == Task::Quadratic && spec.kind != ModelKind::Linear {
        return Err(Error::Config(
            "quadratic task requires a linear model".into(),
        ));
    }
    if input_dim == 0 || classes == 0 {
        return Err(Error::Config(
            "model needs input_dim >= 1 and classes >= 1".into(),
        ));
    }
    let mut dims = vec![input_dim];
    if spec.kind == ModelKind::Mlp {
        if spec.hidden.is_empty() || spec.hidden.contains(&0) {
            return Err(Error::Config("mlp needs non-empty hidden widths".into()));
        }
        dims.extend(&spec.hidden);
    }
    dims.push(classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let with_bias = spec.task != Task::Quadratic;
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
            let bias = with_bias
                .then(|| DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound)));
            Layer { weight, bias }
        })
        .collect();
    Ok(ProbeModel {
        kind: spec.kind,
        task: spec.task,
        activation: if spec.kind == ModelKind::Mlp {
            Activation::Relu
        } else {
            Activation::None
        },
        layers,
        gap_closing: spec.gap_closing.then(GapClosing::default),
        class_prior: None,
        config: None,
        seed: Some(seed),
    })
}

/// Training targets in the form each loss consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Binary(DMatrix<f64>),
    Balanced(DMatrix<f64>),
}

impl Targets {
    pub fn new(task: Task, labels: &Labels, classes: usize, prior: Option<&[f64]>) -> Result<Self> {
        task.check_labels(labels)?;
        if let Some(max) = labels.max_index() {
            if max >= classes {
                return Err(Error::Config(format!(
                    "label {max} out of range for {classes} classes"
                )));
            }
        }
        Ok(match (task, labels) {
            (Task::Multiclass, Labels::Single(v)) => Targets::Classes(v.clone()),
            (Task::Multilabel, Labels::Multi(sets)) => {
                let mut m = DMatrix::zeros(sets.len(), classes);
                for (i, set) in sets.iter().enumerate() {
                    for &c in set {
                        m[(i, c)] = 1.0;
                    }
                }
                Targets::Binary(m)
            }
            (Task::Quadratic, Labels::Single(v)) => {
                let prior = prior.ok_or_else(|| {
                    Error::Config("quadratic task needs a class distribution".into())
                })?;
                Targets::Balanced(balanced_targets(v, prior)?)
            }
            _ => unreachable!("checked by check_labels"),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Binary(m) | Targets::Balanced(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Binary(m) => Targets::Binary(m.select_rows(idx.iter())),
            Targets::Balanced(m) => Targets::Balanced(m.select_rows(idx.iter())),
        }
    }
}

fn log_sum_exp<'a>(row: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = row.clone().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Data loss (no regularization) and its gradient with respect to the logits.
fn loss_and_dlogits(z: &DMatrix<f64>, targets: &Targets) -> (f64, DMatrix<f64>) {
    let (n, c) = z.shape();
    let nf = n as f64;
    match targets {
        Targets::Classes(labels) => {
            let mut loss = 0.0;
            let mut dz = DMatrix::zeros(n, c);
            for (i, &l) in labels.iter().enumerate() {
                let row = z.row(i);
                let lse = log_sum_exp(row.iter());
                loss += lse - z[(i, l)];
                for k in 0..c {
                    dz[(i, k)] = (z[(i, k)] - lse).exp() / nf;
                }
                dz[(i, l)] -= 1.0 / nf;
            }
            (loss / nf, dz)
        }
        Targets::Binary(y) => {
            let cells = (n * c) as f64;
            let mut loss = 0.0;
            let mut dz = DMatrix::zeros(n, c);
            for i in 0..n {
                for k in 0..c {
                    let v = z[(i, k)];
                    let t = y[(i, k)];
                    loss += v.max(0.0) - v * t + (-v.abs()).exp().ln_1p();
                    dz[(i, k)] = (super::sigmoid(v) - t) / cells;
                }
            }
            (loss / cells, dz)
        }
        Targets::Balanced(t) => {
            let resid = z - t;
            (resid.norm_squared() / nf, resid * (2.0 / nf))
        }
    }
}

/// Data loss of a model on prepared inputs.
pub fn task_loss(model: &ProbeModel, x: &DMatrix<f64>, targets: &Targets) -> f64 {
    loss_and_dlogits(&model.logits(x), targets).0
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
}

/// Training objective (data loss plus `lambda ‖W‖²_F`) and its gradients.
pub fn loss_and_grad(
    model: &ProbeModel,
    x: &DMatrix<f64>,
    targets: &Targets,
    lambda: f64,
) -> (f64, Vec<LayerGrad>) {
    let last = model.layers.len() - 1;
    let relu = model.activation == Activation::Relu;
    // inputs[k] is the input to layer k; pre[k] its pre-activation output.
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut a = x.clone();
    for (k, layer) in model.layers.iter().enumerate() {
        let z = affine(layer, &a);
        inputs.push(a);
        a = if k < last && relu {
            z.map(|v| v.max(0.0))
        } else {
            z.clone()
        };
        pre.push(z);
    }
    let (mut loss, mut dz) = loss_and_dlogits(&a, targets);

    let mut grads = vec![None; model.layers.len()];
    for k in (0..model.layers.len()).rev() {
        let layer = &model.layers[k];
        let mut gw = dz.transpose() * &inputs[k];
        if lambda > 0.0 {
            gw += &layer.weight * (2.0 * lambda);
        }
        let gb = layer
            .bias
            .as_ref()
            .map(|_| DVector::from_iterator(dz.ncols(), dz.column_iter().map(|c| c.sum())));
        if k > 0 {
            let mut da = &dz * &layer.weight;
            if relu {
                da.zip_apply(&pre[k - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            dz = da;
        }
        grads[k] = Some(LayerGrad {
            weight: gw,
            bias: gb,
        });
    }
    if lambda > 0.0 {
        loss += lambda
            * model
                .layers
                .iter()
                .map(|l| l.weight.norm_squared())
                .sum::<f64>();
    }
    (
        loss,
        grads.into_iter().map(|g| g.expect("filled")).collect(),
    )
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
}

impl Adam {
    fn new(model: &ProbeModel, lr: f64) -> Self {
        let zeros: Vec<LayerGrad> = model
            .layers
            .iter()
            .map(|l| LayerGrad {
                weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                bias: l.bias.as_ref().map(|b| DVector::zeros(b.len())),
            })
            .collect();
        Adam {
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, c1: f64, c2: f64) {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }

    fn step(&mut self, model: &mut ProbeModel, grads: &[LayerGrad]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (k, layer) in model.layers.iter_mut().enumerate() {
            Self::update(
                layer.weight.as_mut_slice(),
                grads[k].weight.as_slice(),
                self.m[k].weight.as_mut_slice(),
                self.v[k].weight.as_mut_slice(),
                self.lr,
                c1,
                c2,
            );
            if let (Some(b), Some(gb), Some(mb), Some(vb)) = (
                layer.bias.as_mut(),
                grads[k].bias.as_ref(),
                self.m[k].bias.as_mut(),
                self.v[k].bias.as_mut(),
            ) {
                Self::update(
                    b.as_mut_slice(),
                    gb.as_slice(),
                    mb.as_mut_slice(),
                    vb.as_mut_slice(),
                    self.lr,
                    c1,
                    c2,
                );
            }
        }
    }
}

/// Runs `cfg.epochs` of Adam from the model's current weights and returns the
/// epoch snapshot with the lowest validation loss.
fn fit(
    mut model: ProbeModel,
    x: &DMatrix<f64>,
    targets: &Targets,
    x_val: &DMatrix<f64>,
    val_targets: &Targets,
    cfg: &TrainConfig,
) -> Result<ProbeModel> {
    if x.nrows() == 0 || x.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} training rows for {} targets",
            x.nrows(),
            targets.len()
        )));
    }
    if x_val.nrows() == 0 || x_val.nrows() != val_targets.len() {
        return Err(Error::Shape(format!(
            "{} validation rows for {} targets",
            x_val.nrows(),
            val_targets.len()
        )));
    }
    let lambda = cfg.reg(model.task);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut best: Option<(f64, ProbeModel)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select_rows(idx.iter());
            let tb = targets.select(idx);
            let (loss, grads) = loss_and_grad(&model, &xb, &tb, lambda);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch, loss });
            }
            adam.step(&mut model, &grads);
        }
        let val_loss = task_loss(&model, x_val, val_targets);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                loss: val_loss,
            });
        }
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
        }
    }
    Ok(best.expect("at least one epoch").1)
}

fn class_count(labels: &[&Labels], class_names: Option<&Vec<String>>) -> usize {
    let from_labels = labels
        .iter()
        .filter_map(|l| l.max_index())
        .max()
        .map_or(0, |m| m + 1);
    class_names.map_or(from_labels, |n| n.len().max(from_labels))
}

/// Trains on matrices; `x` and `x_val` are used as given (no centering).
pub fn train_matrices(
    spec: &ProbeSpec,
    x: &DMatrix<f64>,
    labels: &Labels,
    x_val: &DMatrix<f64>,
    val_labels: &Labels,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<ProbeModel> {
    cfg.validate(spec.task)?;
    let mut model = init_model(spec, x.ncols(), classes, cfg.seed)?;
    if spec.task == Task::Quadratic {
        let prior = match (spec.prior, labels) {
            (PriorMode::Uniform, _) => vec![1.0 / classes as f64; classes],
            (PriorMode::Empirical, Labels::Single(v)) => empirical_distribution(v, classes),
            (PriorMode::Empirical, Labels::Multi(_)) => {
                return Err(Error::Config("quadratic task needs single labels".into()))
            }
        };
        model.class_prior = Some(prior);
    }
    let prior = model.class_prior.clone();
    let targets = Targets::new(spec.task, labels, classes, prior.as_deref())?;
    let val_targets = Targets::new(spec.task, val_labels, classes, prior.as_deref())?;
    let mut model = fit(model, x, &targets, x_val, &val_targets, cfg)?;
    model.config = Some(cfg.clone());
    model.seed = Some(cfg.seed);
    Ok(model)
}

/// Trains a probe on a labelled store, selecting the epoch with the lowest
/// loss on `val` (same modality as `train`).
pub fn train(
    spec: &ProbeSpec,
    train: &EmbeddingStore,
    val: &EmbeddingStore,
    cfg: &TrainConfig,
) -> Result<ProbeModel> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::Config("training store has no labels".into()))?;
    let val_labels = val
        .labels()
        .ok_or_else(|| Error::Config("validation store has no labels".into()))?;
    if train.dim() != val.dim() {
        return Err(Error::Shape(format!(
            "train dim {} != val dim {}",
            train.dim(),
            val.dim()
        )));
    }
    let classes = class_count(&[labels, val_labels], train.meta().class_names.as_ref());
    let (x, x_val, mean) = if spec.gap_closing {
        if train.modality() == Modality::Other {
            return Err(Error::Config(
                "gap closing needs an image or text training store".into(),
            ));
        }
        let mean = column_mean(train.matrix());
        (
            subtract_row(train.matrix(), &mean),
            subtract_row(val.matrix(), &mean),
            Some(mean),
        )
    } else {
        (train.matrix().clone(), val.matrix().clone(), None)
    };
    let mut model = train_matrices(spec, &x, labels, &x_val, val_labels, classes, cfg)?;
    if let Some(mean) = mean {
        model.record_mean(train.modality(), mean.iter().copied().collect())?;
    }
    Ok(model)
}

/// Continues training a copy of `model` on prepared inputs. Zero epochs
/// returns the model unchanged.
pub fn continue_training(
    model: &ProbeModel,
    x: &DMatrix<f64>,
    labels: &Labels,
    x_val: &DMatrix<f64>,
    val_labels: &Labels,
    cfg: &TrainConfig,
) -> Result<ProbeModel> {
    if cfg.epochs == 0 {
        return Ok(model.clone());
    }
    cfg.validate(model.task)?;
    let classes = model.classes();
    let prior = model.class_prior.as_deref();
    let targets = Targets::new(model.task, labels, classes, prior)?;
    let val_targets = Targets::new(model.task, val_labels, classes, prior)?;
    fit(model.clone(), x, &targets, x_val, &val_targets, cfg)
}
