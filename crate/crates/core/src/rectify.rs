//! Continued training of a probe on text generated for error slices, and
//! before/after comparison on labelled images.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diagnose::{
    image_correctness, image_inputs, matching_rows, prompt_labels, slice_prompts, text_centering,
    text_inputs, PromptSource, Slice, Unassigned,
};
use crate::error::{Error, Result};
use crate::probe::{
    continue_training, train_matrices, PriorMode, ProbeModel, ProbeSpec, Task, TrainConfig,
};
use crate::prompts::PromptSet;
use crate::store::{EmbeddingStore, Labels, Modality};

pub const RECTIFY_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifyOptions {
    pub epochs: usize,
    /// Overrides the learning rate the model was trained with.
    pub learning_rate: Option<f64>,
    /// Trains a fresh model of the same architecture on the texts alone.
    pub from_scratch: bool,
    pub unassigned: Unassigned,
    /// Keeps at most this many prompts per slice (in generation order).
    pub max_prompts_per_slice: Option<usize>,
}

impl Default for RectifyOptions {
    fn default() -> Self {
        RectifyOptions {
            epochs: RECTIFY_EPOCHS,
            learning_rate: None,
            from_scratch: false,
            unassigned: Unassigned::Marginalize,
            max_prompts_per_slice: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePrompts {
    pub name: String,
    pub prompts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifyOutcome {
    pub model: ProbeModel,
    pub config: TrainConfig,
    pub prompt_counts: Vec<SlicePrompts>,
}

fn labels_for(task: Task, labels: Vec<usize>) -> Labels {
    match task {
        Task::Multilabel => Labels::Multi(labels.into_iter().map(|c| vec![c]).collect()),
        _ => Labels::Single(labels),
    }
}

fn stack(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let cols = parts.first().map_or(0, |m| m.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for m in parts {
        out.rows_mut(r, m.nrows()).copy_from(m);
        r += m.nrows();
    }
    out
}

fn append_labels(a: Labels, b: &Labels) -> Result<Labels> {
    match (a, b) {
        (Labels::Single(mut x), Labels::Single(y)) => {
            x.extend(y);
            Ok(Labels::Single(x))
        }
        (Labels::Multi(mut x), Labels::Multi(y)) => {
            x.extend(y.iter().cloned());
            Ok(Labels::Multi(x))
        }
        _ => Err(Error::Config(
            "replay labels do not match the model task".into(),
        )),
    }
}

fn spec_of(model: &ProbeModel) -> ProbeSpec {
    let hidden = model.layers[..model.layers.len() - 1]
        .iter()
        .map(|l| l.out_dim())
        .collect();
    ProbeSpec {
        kind: model.kind,
        task: model.task,
        hidden,
        gap_closing: model.gap_closing.is_some(),
        prior: PriorMode::Empirical,
    }
}

/// Generates the slices' prompts, embeds them, and continues training a copy
/// of `model` on them for `opts.epochs` epochs. The snapshot with the lowest
/// loss on the same texts is returned. `replay` appends labelled image rows
/// to the training (not validation) data.
pub fn rectify(
    model: &ProbeModel,
    slices: &[Slice],
    source: &PromptSource,
    replay: Option<&EmbeddingStore>,
    opts: &RectifyOptions,
) -> Result<RectifyOutcome> {
    if model.task == Task::Quadratic {
        return Err(Error::Config(
            "rectification needs a multiclass or multilabel model".into(),
        ));
    }
    if slices.is_empty() {
        return Err(Error::Config("no slices to rectify".into()));
    }
    let mut cfg = model.config.clone().unwrap_or_default();
    cfg.epochs = opts.epochs;
    if let Some(lr) = opts.learning_rate {
        cfg.learning_rate = lr;
    }
    let mut sets = Vec::with_capacity(slices.len());
    let mut prompt_counts = Vec::with_capacity(slices.len());
    for slice in slices {
        let mut set = slice_prompts(source, slice, opts.unassigned)?;
        if let Some(cap) = opts.max_prompts_per_slice {
            set.prompts.truncate(cap);
        }
        if set.is_empty() {
            return Err(Error::Config(format!(
                "slice {} generated no prompts",
                slice.name()
            )));
        }
        prompt_counts.push(SlicePrompts {
            name: slice.name(),
            prompts: set.len(),
        });
        sets.push(set);
    }
    let all = PromptSet {
        prompts: sets.into_iter().flat_map(|s| s.prompts).collect(),
    };
    let labels = prompt_labels(source.schema, &all)?;
    if labels.iter().any(|&c| c >= model.classes()) {
        return Err(Error::Shape("slice class exceeds model classes".into()));
    }
    let centering = text_centering(model, source)?;
    let x_text = text_inputs(model, source, &all, centering.as_ref())?;
    let y_text = labels_for(model.task, labels);

    if opts.epochs == 0 {
        return Ok(RectifyOutcome {
            model: model.clone(),
            config: cfg,
            prompt_counts,
        });
    }

    let (x, y) = match replay {
        Some(store) => {
            let labels = store
                .labels()
                .ok_or_else(|| Error::Config("replay store has no labels".into()))?;
            let xi = image_inputs(model, store)?;
            (
                stack(&[x_text.clone(), xi]),
                append_labels(y_text.clone(), labels)?,
            )
        }
        None => (x_text.clone(), y_text.clone()),
    };

    let mut out = if opts.from_scratch {
        let mut fresh = train_matrices(
            &spec_of(model),
            &x,
            &y,
            &x_text,
            &y_text,
            model.classes(),
            &cfg,
        )?;
        fresh.gap_closing = model.gap_closing.clone();
        fresh
    } else {
        continue_training(model, &x, &y, &x_text, &y_text, &cfg)?
    };
    if let (Some(m), Some(_)) = (&centering, &out.gap_closing) {
        out.record_mean(Modality::Text, m.iter().copied().collect())?;
    }
    out.config = Some(cfg.clone());
    Ok(RectifyOutcome {
        model: out,
        config: cfg,
        prompt_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifyRow {
    pub name: String,
    pub n: usize,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifyEcho {
    pub epochs: usize,
    pub learning_rate: f64,
    pub from_scratch: bool,
    pub prompt_counts: Vec<SlicePrompts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifyReport {
    pub rows: Vec<RectifyRow>,
    pub global_before: f64,
    pub global_after: f64,
    pub global_delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RectifyEcho>,
}

impl RectifyReport {
    pub fn to_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["slice", "n", "original", "rectified", "delta"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.name.clone(),
                r.n.to_string(),
                opt(r.accuracy_before),
                opt(r.accuracy_after),
                opt(r.delta),
            ])?;
        }
        out.write_record([
            "global".to_string(),
            String::new(),
            self.global_before.to_string(),
            self.global_after.to_string(),
            self.global_delta.to_string(),
        ])?;
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    /// Mean delta over rows whose names are listed.
    pub fn mean_delta(&self, names: &[String]) -> Option<f64> {
        let d: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| names.contains(&r.name))
            .filter_map(|r| r.delta)
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }
}

fn share(correct: &[bool], rows: &[usize]) -> Option<f64> {
    (!rows.is_empty())
        .then(|| rows.iter().filter(|&&i| correct[i]).count() as f64 / rows.len() as f64)
}

/// Hard accuracy of both models on each slice's matching rows and on the
/// whole store.
pub fn compare(
    before: &ProbeModel,
    after: &ProbeModel,
    store: &EmbeddingStore,
    slices: &[Slice],
) -> Result<RectifyReport> {
    let cb = image_correctness(before, store)?;
    let ca = image_correctness(after, store)?;
    let mut rows = Vec::with_capacity(slices.len());
    for slice in slices {
        let idx = matching_rows(store, &slice.assignment)?;
        let (b, a) = (share(&cb, &idx), share(&ca, &idx));
        rows.push(RectifyRow {
            name: slice.name(),
            n: idx.len(),
            accuracy_before: b,
            accuracy_after: a,
            delta: b.zip(a).map(|(b, a)| a - b),
        });
    }
    let all: Vec<usize> = (0..store.rows()).collect();
    let global_before = share(&cb, &all).unwrap_or(0.0);
    let global_after = share(&ca, &all).unwrap_or(0.0);
    Ok(RectifyReport {
        rows,
        global_before,
        global_after,
        global_delta: global_after - global_before,
        config: None,
    })
}
