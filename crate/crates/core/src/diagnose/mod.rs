//! Error-slice discovery on generated text, attribute influence, and
//! text↔image score correlation.

mod correlate;
pub mod shapley;

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use correlate::{average_ranks, correlate, pearson, spearman, CorrelationReport, ScorePair};
pub use shapley::{Game, McEstimate, EXACT_CAP};

use crate::embed::TextEmbedder;
use crate::error::{Error, Result};
use crate::linalg::{column_mean, subtract_row};
use crate::probe::{predict_prepared, softmax_rows, Hard, Predictions, ProbeModel, Task};
use crate::prompts::{
    generate, Assignment, AttributeSchema, Ensemble, Prompt, PromptSet, Template,
};
use crate::store::{EmbeddingStore, Labels, Modality};

/// Default additive margin below the global proxy that flags an error slice.
pub const SLICE_DELTA: f64 = 0.10;
/// Default proxy distance under which a finer slice merges into a coarser one.
pub const MERGE_EPSILON: f64 = 0.02;
/// Default |influence| at which an attribute counts as influential.
pub const ATTRIBUTE_THRESHOLD: f64 = 0.05;

/// Everything needed to turn attribute assignments into text embeddings.
#[derive(Clone, Copy)]
pub struct PromptSource<'a> {
    pub schema: &'a AttributeSchema,
    pub templates: &'a [Template],
    pub ensemble: Option<&'a Ensemble>,
    pub embedder: &'a dyn TextEmbedder,
}

impl PromptSource<'_> {
    pub fn generate(
        &self,
        fixed: &Assignment,
        marginalized: &BTreeSet<String>,
    ) -> Result<PromptSet> {
        if self.templates.is_empty() {
            return Err(Error::Template("no templates given".into()));
        }
        generate(
            self.schema,
            fixed,
            marginalized,
            self.templates,
            self.ensemble,
        )
    }

    /// Every family marginalized.
    pub fn universe(&self) -> Result<PromptSet> {
        let all = self
            .schema
            .families()
            .iter()
            .map(|f| f.name.clone())
            .collect();
        self.generate(&Assignment::new(), &all)
    }

    /// Mean embedding over the prompt universe.
    pub fn text_mean(&self) -> Result<DVector<f64>> {
        let set = self.universe()?;
        Ok(column_mean(&self.embedder.embed(&set.prompts)?))
    }
}

/// Mean subtracted from text inputs: the model's recorded text mean, or the
/// prompt-universe mean when the model closes the gap but recorded none.
pub fn text_centering(model: &ProbeModel, source: &PromptSource) -> Result<Option<DVector<f64>>> {
    match &model.gap_closing {
        None => Ok(None),
        Some(gc) => match gc.mean(Modality::Text) {
            Some(m) => Ok(Some(DVector::from_column_slice(m))),
            None => source.text_mean().map(Some),
        },
    }
}

/// Embeds prompts and applies the text centering.
pub fn text_inputs(
    model: &ProbeModel,
    source: &PromptSource,
    set: &PromptSet,
    centering: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>> {
    let x = source.embedder.embed(&set.prompts)?;
    if x.ncols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "text embeddings have {} columns, model expects {}",
            x.ncols(),
            model.input_dim()
        )));
    }
    Ok(match centering {
        Some(m) => subtract_row(&x, m),
        None => x,
    })
}

/// Class probabilities; quadratic scores pass through a softmax.
pub fn class_probabilities(model: &ProbeModel, preds: &Predictions) -> DMatrix<f64> {
    match model.task {
        Task::Quadratic => softmax_rows(&preds.scores),
        _ => preds.scores.clone(),
    }
}

fn decides(hard: &Hard, row: usize, class: usize) -> bool {
    match hard {
        Hard::Classes(v) => v[row] == class,
        Hard::Labels(v) => v[row][class],
    }
}

/// Image inputs prepared for the model; a gap-closing model without a
/// recorded image mean is centered by the store's own mean.
pub fn image_inputs(model: &ProbeModel, store: &EmbeddingStore) -> Result<DMatrix<f64>> {
    model.store_inputs(store, store.modality())
}

/// Per-row hard correctness against the store labels (exact label-set
/// match for multilabel stores).
pub fn image_correctness(model: &ProbeModel, store: &EmbeddingStore) -> Result<Vec<bool>> {
    let labels = store
        .labels()
        .ok_or_else(|| Error::Config("image store has no labels".into()))?;
    if labels.max_index().is_some_and(|m| m >= model.classes()) {
        return Err(Error::Shape("image label exceeds model classes".into()));
    }
    let preds = predict_prepared(model, &image_inputs(model, store)?);
    Ok(match (&preds.hard, labels) {
        (Hard::Classes(p), Labels::Single(t)) => p.iter().zip(t).map(|(a, b)| a == b).collect(),
        (Hard::Labels(p), Labels::Multi(t)) => p
            .iter()
            .zip(t)
            .map(|(row, truth)| {
                row.iter()
                    .enumerate()
                    .all(|(c, &on)| on == truth.binary_search(&c).is_ok())
            })
            .collect(),
        _ => {
            return Err(Error::Shape(
                "model task does not match store label shape".into(),
            ))
        }
    })
}

/// Rows whose attribute metadata equals every value of `assignment`.
pub fn matching_rows(store: &EmbeddingStore, assignment: &Assignment) -> Result<Vec<usize>> {
    let attrs = store
        .meta()
        .attributes
        .as_ref()
        .ok_or_else(|| Error::Config("image store has no attribute metadata".into()))?;
    let mut columns = Vec::with_capacity(assignment.len());
    for (fam, val) in assignment {
        let col = attrs
            .get(fam)
            .ok_or_else(|| Error::Config(format!("image store lacks attribute {fam:?}")))?;
        columns.push((col, val));
    }
    Ok((0..store.rows())
        .filter(|&i| columns.iter().all(|(col, val)| &col[i] == *val))
        .collect())
}

fn accuracy(correct: &[bool], rows: &[usize]) -> Option<f64> {
    if rows.is_empty() {
        None
    } else {
        Some(rows.iter().filter(|&&i| correct[i]).count() as f64 / rows.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slice {
    pub assignment: Assignment,
}

impl Slice {
    pub fn new(assignment: Assignment) -> Self {
        Slice { assignment }
    }

    /// `family=value` pairs joined by `, `, in family-name order.
    pub fn name(&self) -> String {
        self.assignment
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if self.assignment.is_empty() {
            return Err(Error::Schema(
                "a slice must assign at least one family".into(),
            ));
        }
        schema.check_assignment(&self.assignment)
    }

    /// True when every pair of `self` also appears in `other`.
    pub fn is_subset_of(&self, other: &Slice) -> bool {
        self.assignment
            .iter()
            .all(|(k, v)| other.assignment.get(k) == Some(v))
    }
}

/// All slices assigning between 1 and `max_size` families, ordered by size,
/// then family positions in the schema, then value positions.
pub fn all_slices(schema: &AttributeSchema, max_size: usize) -> Vec<Slice> {
    let fams = schema.families();
    let mut out = Vec::new();
    for size in 1..=max_size.min(fams.len()) {
        let mut subsets: Vec<Vec<usize>> = Vec::new();
        let mut cur = Vec::new();
        choose(fams.len(), size, 0, &mut cur, &mut subsets);
        for subset in subsets {
            let mut combos: Vec<Assignment> = vec![Assignment::new()];
            for &fi in &subset {
                let f = &fams[fi];
                combos = combos
                    .into_iter()
                    .flat_map(|a| {
                        f.values.iter().map(move |v| {
                            let mut a = a.clone();
                            a.insert(f.name.clone(), v.clone());
                            a
                        })
                    })
                    .collect();
            }
            out.extend(combos.into_iter().map(Slice::new));
        }
    }
    out
}

fn choose(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        choose(n, k, i + 1, cur, out);
        cur.pop();
    }
}

/// How families a slice leaves unassigned enter its prompts. The class
/// family is always marginalized when unassigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unassigned {
    #[default]
    Marginalize,
    Absent,
}

pub fn slice_prompts(
    source: &PromptSource,
    slice: &Slice,
    unassigned: Unassigned,
) -> Result<PromptSet> {
    slice.validate(source.schema)?;
    let class = source.schema.class_family();
    let marginalized: BTreeSet<String> = source
        .schema
        .families()
        .iter()
        .map(|f| f.name.clone())
        .filter(|f| !slice.assignment.contains_key(f))
        .filter(|f| unassigned == Unassigned::Marginalize || f == class)
        .collect();
    source.generate(&slice.assignment, &marginalized)
}

/// Class label of every prompt.
pub fn prompt_labels(schema: &AttributeSchema, set: &PromptSet) -> Result<Vec<usize>> {
    set.prompts
        .iter()
        .map(|p| {
            p.label(schema)
                .ok_or_else(|| Error::Schema(format!("prompt {:?} has no class value", p.text)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct TextScores {
    proxy: f64,
    accuracy: f64,
}

fn score_prompts(
    model: &ProbeModel,
    source: &PromptSource,
    set: &PromptSet,
    centering: Option<&DVector<f64>>,
) -> Result<TextScores> {
    if set.is_empty() {
        return Err(Error::Template("slice generated no prompts".into()));
    }
    let labels = prompt_labels(source.schema, set)?;
    if labels.iter().any(|&c| c >= model.classes()) {
        return Err(Error::Shape("class value exceeds model classes".into()));
    }
    let preds = predict_prepared(model, &text_inputs(model, source, set, centering)?);
    let probs = class_probabilities(model, &preds);
    let n = labels.len() as f64;
    let proxy = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| probs[(i, c)])
        .sum::<f64>()
        / n;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &c)| decides(&preds.hard, i, c))
        .count();
    Ok(TextScores {
        proxy,
        accuracy: hits as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub name: String,
    pub assignment: Assignment,
    pub n_text_prompts: usize,
    /// Mean predicted probability of each prompt's own class.
    pub proxy_score: f64,
    pub text_accuracy: f64,
    pub image_n: Option<usize>,
    pub image_accuracy: Option<f64>,
}

impl SliceRow {
    pub fn slice(&self) -> Slice {
        Slice::new(self.assignment.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    /// Ascending by proxy score, ties by name.
    pub rows: Vec<SliceRow>,
    /// Proxy score over the whole prompt universe.
    pub global_proxy: f64,
    pub global_text_accuracy: f64,
    /// Image error rate over the whole image store, when one was given.
    pub global_error: Option<f64>,
}

fn by_proxy(a: &SliceRow, b: &SliceRow) -> std::cmp::Ordering {
    a.proxy_score
        .total_cmp(&b.proxy_score)
        .then_with(|| a.name.cmp(&b.name))
}

impl SliceReport {
    pub fn to_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "name",
            "n_text_prompts",
            "proxy_score",
            "text_accuracy",
            "image_n",
            "image_accuracy",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.name.clone(),
                r.n_text_prompts.to_string(),
                r.proxy_score.to_string(),
                r.text_accuracy.to_string(),
                r.image_n.map(|v| v.to_string()).unwrap_or_default(),
                r.image_accuracy.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    /// Text proxy against image accuracy for rows with image data.
    pub fn score_pairs(&self) -> Vec<ScorePair> {
        self.rows
            .iter()
            .filter_map(|r| {
                r.image_accuracy.map(|image| ScorePair {
                    name: r.name.clone(),
                    text: r.proxy_score,
                    image,
                })
            })
            .collect()
    }
}

/// Scores each slice's generated prompts and, with `images`, the matching
/// image rows.
pub fn slice_eval(
    model: &ProbeModel,
    source: &PromptSource,
    slices: &[Slice],
    images: Option<&EmbeddingStore>,
    unassigned: Unassigned,
) -> Result<SliceReport> {
    let centering = text_centering(model, source)?;
    let global = score_prompts(model, source, &source.universe()?, centering.as_ref())?;
    let correct = images.map(|s| image_correctness(model, s)).transpose()?;
    let mut rows: Vec<SliceRow> = slices
        .par_iter()
        .map(|slice| {
            let set = slice_prompts(source, slice, unassigned)?;
            let scores = score_prompts(model, source, &set, centering.as_ref())?;
            let (image_n, image_accuracy) = match (images, &correct) {
                (Some(store), Some(correct)) => {
                    let rows = matching_rows(store, &slice.assignment)?;
                    match accuracy(correct, &rows) {
                        Some(a) => (Some(rows.len()), Some(a)),
                        None => (None, None),
                    }
                }
                _ => (None, None),
            };
            Ok(SliceRow {
                name: slice.name(),
                assignment: slice.assignment.clone(),
                n_text_prompts: set.len(),
                proxy_score: scores.proxy,
                text_accuracy: scores.accuracy,
                image_n,
                image_accuracy,
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(by_proxy);
    let global_error = correct.map(|c| {
        let all: Vec<usize> = (0..c.len()).collect();
        1.0 - accuracy(&c, &all).unwrap_or(0.0)
    });
    Ok(SliceReport {
        rows,
        global_proxy: global.proxy,
        global_text_accuracy: global.accuracy,
        global_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscoverOptions {
    pub top_k: usize,
    pub delta: f64,
    pub merge: bool,
    pub merge_epsilon: f64,
}

impl Default for DiscoverOptions {
    fn default() -> Self {
        DiscoverOptions {
            top_k: 10,
            delta: SLICE_DELTA,
            merge: false,
            merge_epsilon: MERGE_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discovered {
    pub rank: usize,
    pub flagged: bool,
    #[serde(flatten)]
    pub row: SliceRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discovery {
    pub threshold: f64,
    pub slices: Vec<Discovered>,
}

/// Ranks slices ascending by proxy score, flags those at least `delta`
/// below the global proxy, and optionally prunes finer slices that score
/// within `merge_epsilon` of a coarser one.
pub fn discover(report: &SliceReport, opts: &DiscoverOptions) -> Discovery {
    let threshold = report.global_proxy - opts.delta;
    let slices: Vec<Slice> = report.rows.iter().map(SliceRow::slice).collect();
    let mut kept: Vec<&SliceRow> = report
        .rows
        .iter()
        .enumerate()
        .filter(|&(i, row)| {
            !opts.merge
                || !report.rows.iter().enumerate().any(|(j, coarse)| {
                    j != i
                        && coarse.assignment.len() < row.assignment.len()
                        && slices[j].is_subset_of(&slices[i])
                        && (coarse.proxy_score - row.proxy_score).abs() <= opts.merge_epsilon
                })
        })
        .map(|(_, r)| r)
        .collect();
    kept.sort_by(|a, b| by_proxy(a, b));
    let slices = kept
        .into_iter()
        .take(opts.top_k)
        .enumerate()
        .map(|(i, row)| Discovered {
            rank: i + 1,
            flagged: row.proxy_score <= threshold,
            row: row.clone(),
        })
        .collect();
    Discovery { threshold, slices }
}

/// Splits the families into Shapley players (optional in every template)
/// and the families that are always marginalized (the class family and
/// families some template requires).
pub fn player_families(source: &PromptSource) -> (Vec<String>, BTreeSet<String>) {
    let schema = source.schema;
    let mandatory: BTreeSet<&str> = source
        .templates
        .iter()
        .flat_map(|t| t.mandatory_families())
        .collect();
    let mut always: BTreeSet<String> = [schema.class_family().to_string()].into();
    let mut players = Vec::new();
    for f in schema.attribute_families() {
        if mandatory.contains(f.name.as_str()) {
            always.insert(f.name.clone());
        } else {
            players.push(f.name.clone());
        }
    }
    (players, always)
}

/// Every prompt with a distinct text that evaluating `slices` needs, in first
/// generation order, starting with the prompt universe. With `coalitions`,
/// the prompts of every Shapley coalition are included as well.
pub fn manifest(
    source: &PromptSource,
    slices: &[Slice],
    unassigned: Unassigned,
    coalitions: bool,
) -> Result<Vec<Prompt>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut push = |set: PromptSet| {
        for p in set.prompts {
            if seen.insert(p.text.clone()) {
                out.push(p);
            }
        }
    };
    push(source.universe()?);
    for slice in slices {
        push(slice_prompts(source, slice, unassigned)?);
    }
    if coalitions {
        let (players, always) = player_families(source);
        if players.len() > shapley::EXACT_CAP {
            return Err(Error::Config(format!(
                "{} players exceed the coalition cap of {}",
                players.len(),
                shapley::EXACT_CAP
            )));
        }
        for mask in 0u64..(1 << players.len()) {
            let mut marginalized = always.clone();
            for (i, f) in players.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    marginalized.insert(f.clone());
                }
            }
            push(source.generate(&Assignment::new(), &marginalized)?);
        }
    }
    Ok(out)
}

/// Shapley game over attribute families. A present player family is fixed
/// to its token when it has one and marginalized otherwise; absent families
/// drop out of the prompts. The class family is always marginalized, and so
/// are families that some template requires (they cannot be absent).
pub struct PromptGame<'a> {
    model: &'a ProbeModel,
    source: PromptSource<'a>,
    class: usize,
    players: Vec<(String, Option<String>)>,
    always: BTreeSet<String>,
    centering: Option<DVector<f64>>,
}

impl<'a> PromptGame<'a> {
    /// `tokens` fixes the value of selected player families.
    pub fn new(
        model: &'a ProbeModel,
        source: PromptSource<'a>,
        class: usize,
        tokens: &Assignment,
    ) -> Result<Self> {
        let schema = source.schema;
        if class >= schema.classes() || class >= model.classes() {
            return Err(Error::Config(format!("class index {class} out of range")));
        }
        schema.check_assignment(tokens)?;
        let (names, always) = player_families(&source);
        let players: Vec<(String, Option<String>)> = names
            .into_iter()
            .map(|f| {
                let tok = tokens.get(&f).cloned();
                (f, tok)
            })
            .collect();
        for fam in tokens.keys() {
            if !players.iter().any(|(p, _)| p == fam) {
                return Err(Error::Config(format!(
                    "family {fam:?} is not a player: it is the class family or required by a template"
                )));
            }
        }
        let centering = text_centering(model, &source)?;
        Ok(PromptGame {
            model,
            source,
            class,
            players,
            always,
            centering,
        })
    }

    pub fn player_names(&self) -> Vec<&str> {
        self.players.iter().map(|(f, _)| f.as_str()).collect()
    }

    pub fn player_index(&self, family: &str) -> Option<usize> {
        self.players.iter().position(|(f, _)| f == family)
    }
}

impl Game for PromptGame<'_> {
    fn players(&self) -> usize {
        self.players.len()
    }

    fn value(&self, coalition: u64) -> Result<f64> {
        let mut fixed = Assignment::new();
        let mut marginalized = self.always.clone();
        for (i, (fam, tok)) in self.players.iter().enumerate() {
            if coalition & (1 << i) == 0 {
                continue;
            }
            match tok {
                Some(t) => {
                    fixed.insert(fam.clone(), t.clone());
                }
                None => {
                    marginalized.insert(fam.clone());
                }
            }
        }
        let set = self.source.generate(&fixed, &marginalized)?;
        let preds = predict_prepared(
            self.model,
            &text_inputs(self.model, &self.source, &set, self.centering.as_ref())?,
        );
        let probs = class_probabilities(self.model, &preds);
        Ok(probs.column(self.class).mean())
    }
}

fn token_game<'a>(
    model: &'a ProbeModel,
    source: PromptSource<'a>,
    class: usize,
    family: &str,
    token: &str,
) -> Result<(PromptGame<'a>, usize)> {
    let fam = source
        .schema
        .family(family)
        .ok_or_else(|| Error::Schema(format!("unknown family {family:?}")))?;
    if !fam.values.iter().any(|v| v == token) {
        return Err(Error::Schema(format!(
            "token {token:?} not in family {family:?}"
        )));
    }
    let tokens = Assignment::from([(family.to_string(), token.to_string())]);
    let game = PromptGame::new(model, source, class, &tokens)?;
    let idx = game.player_index(family).expect("token family is a player");
    Ok((game, idx))
}

/// Exact influence of `family = token` on class `class`.
pub fn shapley_exact(
    model: &ProbeModel,
    source: PromptSource,
    class: usize,
    family: &str,
    token: &str,
    cap: usize,
) -> Result<f64> {
    let (game, idx) = token_game(model, source, class, family, token)?;
    shapley::exact(&game, idx, cap)
}

/// Monte-Carlo influence of `family = token` on class `class`.
pub fn shapley_mc(
    model: &ProbeModel,
    source: PromptSource,
    class: usize,
    family: &str,
    token: &str,
    permutations: usize,
    seed: u64,
) -> Result<McEstimate> {
    let (game, idx) = token_game(model, source, class, family, token)?;
    shapley::monte_carlo(&game, idx, permutations, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShapleyMethod {
    Exact { cap: usize },
    MonteCarlo { permutations: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRow {
    pub family: String,
    pub token: String,
    pub influence: f64,
    pub stderr: Option<f64>,
    pub influential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub class: String,
    pub class_index: usize,
    pub method: ShapleyMethod,
    pub threshold: f64,
    pub players: Vec<String>,
    pub rows: Vec<InfluenceRow>,
}

impl InfluenceReport {
    pub fn to_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "class",
            "family",
            "token",
            "influence",
            "stderr",
            "influential",
        ])?;
        for r in &self.rows {
            out.write_record([
                self.class.clone(),
                r.family.clone(),
                r.token.clone(),
                r.influence.to_string(),
                r.stderr.map(|v| v.to_string()).unwrap_or_default(),
                r.influential.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    /// Tokens whose |influence| reaches the threshold.
    pub fn influential(&self) -> impl Iterator<Item = &InfluenceRow> {
        self.rows.iter().filter(|r| r.influential)
    }
}

/// Influence of every token of every player family on class `class`.
pub fn influence(
    model: &ProbeModel,
    source: PromptSource,
    class: usize,
    method: ShapleyMethod,
    threshold: f64,
) -> Result<InfluenceReport> {
    let schema = source.schema;
    let probe = PromptGame::new(model, source, class, &Assignment::new())?;
    let players: Vec<String> = probe.player_names().into_iter().map(String::from).collect();
    let mut rows = Vec::new();
    for fam in &players {
        let family = schema.family(fam).expect("player is a schema family");
        for token in &family.values {
            let (influence, stderr) = match method {
                ShapleyMethod::Exact { cap } => {
                    (shapley_exact(model, source, class, fam, token, cap)?, None)
                }
                ShapleyMethod::MonteCarlo { permutations, seed } => {
                    let e = shapley_mc(model, source, class, fam, token, permutations, seed)?;
                    (e.value, Some(e.stderr))
                }
            };
            rows.push(InfluenceRow {
                family: fam.clone(),
                token: token.clone(),
                influence,
                stderr,
                influential: influence.abs() >= threshold,
            });
        }
    }
    Ok(InfluenceReport {
        class: schema.class_values()[class].clone(),
        class_index: class,
        method,
        threshold,
        players,
        rows,
    })
}

#[cfg(test)]
mod tests;
