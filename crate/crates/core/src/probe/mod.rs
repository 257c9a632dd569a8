//! Linear and MLP probes over a shared embedding space.
//!
//! A [`ProbeModel`] is a stack of dense layers with an optional ReLU between
//! them. Three tasks are supported: softmax multiclass, per-label sigmoid
//! multilabel, and the quadratic task (a bias-free linear map regressed onto
//! balanced targets) whose closed-form minimizer lives in [`ridge`].

mod metrics;
mod ridge;
mod train;

pub use metrics::{consistency, metrics, ClassMetrics, EvalReport};
pub use ridge::{balanced_targets, empirical_distribution, quadratic_objective, ridge_fit};
pub use train::{
    continue_training, init_model, loss_and_grad, task_loss, train, train_matrices, LayerGrad,
    ModelSelection, PriorMode, ProbeSpec, Targets, TrainConfig,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_mean, subtract_row};
use crate::store::{EmbeddingStore, Labels, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Multiclass,
    Multilabel,
    Quadratic,
}

impl Task {
    pub fn check_labels(self, labels: &Labels) -> Result<()> {
        match (self, labels) {
            (Task::Multilabel, Labels::Multi(_)) => Ok(()),
            (Task::Multiclass | Task::Quadratic, Labels::Single(_)) => Ok(()),
            (task, _) => Err(Error::Config(format!(
                "label shape does not match task {task:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRepr {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

/// Dense layer computing `W u + b` with `W` of shape out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LayerRepr", try_from = "LayerRepr")]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

impl From<Layer> for LayerRepr {
    fn from(l: Layer) -> Self {
        let (rows, cols) = l.weight.shape();
        let weights = l.weight.transpose().iter().copied().collect();
        LayerRepr {
            rows,
            cols,
            weights,
            bias: l.bias.map(|b| b.iter().copied().collect()),
        }
    }
}

impl TryFrom<LayerRepr> for Layer {
    type Error = String;

    fn try_from(r: LayerRepr) -> std::result::Result<Self, String> {
        if r.weights.len() != r.rows * r.cols {
            return Err(format!(
                "layer declares {}x{} but has {} weights",
                r.rows,
                r.cols,
                r.weights.len()
            ));
        }
        if let Some(b) = &r.bias {
            if b.len() != r.rows {
                return Err(format!("bias length {} != rows {}", b.len(), r.rows));
            }
        }
        Ok(Layer {
            weight: DMatrix::from_row_slice(r.rows, r.cols, &r.weights),
            bias: r.bias.map(DVector::from_vec),
        })
    }
}

/// Per-modality means subtracted before the model sees an input.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GapClosing {
    pub image: Option<Vec<f64>>,
    pub text: Option<Vec<f64>>,
}

impl GapClosing {
    pub fn mean(&self, modality: Modality) -> Option<&[f64]> {
        match modality {
            Modality::Image => self.image.as_deref(),
            Modality::Text => self.text.as_deref(),
            Modality::Other => None,
        }
    }

    pub fn set(&mut self, modality: Modality, mean: Vec<f64>) -> Result<()> {
        match modality {
            Modality::Image => self.image = Some(mean),
            Modality::Text => self.text = Some(mean),
            Modality::Other => {
                return Err(Error::Config(
                    "gap closing records image or text means only".into(),
                ))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub kind: ModelKind,
    pub task: Task,
    pub activation: Activation,
    pub layers: Vec<Layer>,
    pub gap_closing: Option<GapClosing>,
    /// Class distribution behind the balanced targets (quadratic task only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_prior: Option<Vec<f64>>,
    #[serde(default)]
    pub config: Option<TrainConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ProbeModel {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Config(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if self.kind == ModelKind::Linear && self.layers.len() != 1 {
            return Err(Error::Config(
                "linear model must have exactly one layer".into(),
            ));
        }
        if self.task == Task::Quadratic
            && (self.kind != ModelKind::Linear || self.layers[0].bias.is_some())
        {
            return Err(Error::Config(
                "quadratic task requires a bias-free linear model".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    /// Records (or replaces) the centering mean for a modality.
    pub fn record_mean(&mut self, modality: Modality, mean: Vec<f64>) -> Result<()> {
        let gc = self
            .gap_closing
            .as_mut()
            .ok_or_else(|| Error::Config("model was not trained with gap closing".into()))?;
        gc.set(modality, mean)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("model", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: ProbeModel = serde_json::from_str(s).map_err(|e| Error::json("model", e))?;
        model.validate()?;
        Ok(model)
    }

    /// Applies the recorded gap-closing mean for `modality`, if any.
    pub fn prepare_input(
        &self,
        x: &DMatrix<f64>,
        modality: Option<Modality>,
    ) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        match &self.gap_closing {
            None => Ok(x.clone()),
            Some(gc) => {
                let modality = modality.ok_or_else(|| {
                    Error::Config("model closes the gap; input modality must be given".into())
                })?;
                let mean = gc.mean(modality).ok_or_else(|| {
                    Error::Config(format!("model has no recorded {} mean", modality.as_str()))
                })?;
                Ok(subtract_row(x, &DVector::from_column_slice(mean)))
            }
        }
    }

    /// Inputs from a store read as `modality`. Without a recorded mean for
    /// that modality, a gap-closing model centers by the store's own mean.
    pub fn store_inputs(&self, store: &EmbeddingStore, modality: Modality) -> Result<DMatrix<f64>> {
        match &self.gap_closing {
            Some(gc) if gc.mean(modality).is_none() => {
                if store.dim() != self.input_dim() {
                    return Err(Error::Shape(format!(
                        "store has {} columns, model expects {}",
                        store.dim(),
                        self.input_dim()
                    )));
                }
                Ok(subtract_row(store.matrix(), &column_mean(store.matrix())))
            }
            _ => self.prepare_input(store.matrix(), Some(modality)),
        }
    }

    /// Raw output scores (logits) for already-prepared inputs.
    pub fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            a = affine(layer, &a);
            if k < last && self.activation == Activation::Relu {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        a
    }
}

pub(crate) fn affine(layer: &Layer, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = a * layer.weight.transpose();
    if let Some(b) = &layer.bias {
        for mut row in z.row_iter_mut() {
            for (v, bb) in row.iter_mut().zip(b.iter()) {
                *v += bb;
            }
        }
    }
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hard {
    /// One class per row (multiclass and quadratic tasks).
    Classes(Vec<usize>),
    /// Per-row, per-label decisions (multilabel task).
    Labels(Vec<Vec<bool>>),
}

impl Hard {
    pub fn len(&self) -> usize {
        match self {
            Hard::Classes(v) => v.len(),
            Hard::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub scores: DMatrix<f64>,
    pub hard: Hard,
}

pub(crate) fn softmax_rows(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
    out
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<'a>(row: impl IntoIterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Scores and hard decisions for raw inputs of the given modality.
pub fn predict(
    model: &ProbeModel,
    x: &DMatrix<f64>,
    modality: Option<Modality>,
) -> Result<Predictions> {
    let prepared = model.prepare_input(x, modality)?;
    Ok(predict_prepared(model, &prepared))
}

/// Like [`predict`] for inputs that already had any centering applied.
pub fn predict_prepared(model: &ProbeModel, x: &DMatrix<f64>) -> Predictions {
    let z = model.logits(x);
    match model.task {
        Task::Multiclass => {
            let scores = softmax_rows(&z);
            let hard = scores.row_iter().map(|r| argmax(r.iter())).collect();
            Predictions {
                scores,
                hard: Hard::Classes(hard),
            }
        }
        Task::Multilabel => {
            let scores = z.map(sigmoid);
            let hard = scores
                .row_iter()
                .map(|r| r.iter().map(|&p| p >= 0.5).collect())
                .collect();
            Predictions {
                scores,
                hard: Hard::Labels(hard),
            }
        }
        Task::Quadratic => {
            let hard = z.row_iter().map(|r| argmax(r.iter())).collect();
            Predictions {
                scores: z,
                hard: Hard::Classes(hard),
            }
        }
    }
}
