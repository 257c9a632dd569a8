use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::embed::{AdditiveEmbedder, StoreEmbedder};
use crate::probe::{Activation, Layer, ModelKind};
use crate::prompts::{parse_template, Family};
use crate::store::StoreMeta;

const DIM: usize = 8;

fn schema() -> AttributeSchema {
    let fam = |n: &str, v: &[&str]| Family {
        name: n.into(),
        values: v.iter().map(|s| s.to_string()).collect(),
    };
    AttributeSchema::new(
        vec![
            fam("cls", &["c0", "c1"]),
            fam("a", &["a0", "a1"]),
            fam("b", &["b0", "b1", "b2"]),
            fam("d", &["d0", "d1"]),
        ],
        "cls".into(),
        vec!["c0".into(), "c1".into()],
    )
    .unwrap()
}

fn templates() -> Vec<Template> {
    vec![
        parse_template("{cls}[ a {a}][ b {b}][ d {d}]").unwrap(),
        parse_template("photo of {cls}[ with {a}][ near {b}][ and {d}]").unwrap(),
    ]
}

/// Directions for `d` live in the last two coordinates, which the model
/// below never reads.
fn embedder(seed: u64, noise: f64) -> AdditiveEmbedder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = schema();
    let mut directions = BTreeMap::new();
    for f in s.families() {
        let mut vals = BTreeMap::new();
        for v in &f.values {
            let mut dir = vec![0.0; DIM];
            let range = if f.name == "d" { 6..8 } else { 0..6 };
            for j in range {
                dir[j] = rng.random_range(-1.0..1.0);
            }
            vals.insert(v.clone(), dir);
        }
        directions.insert(f.name.clone(), vals);
    }
    AdditiveEmbedder {
        dim: DIM,
        directions,
        offset: vec![0.1; DIM],
        noise,
        seed,
    }
}

fn model(seed: u64) -> ProbeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let weight = DMatrix::from_fn(2, DIM, |_, j| {
        if j >= 6 {
            0.0
        } else {
            rng.random_range(-2.0..2.0)
        }
    });
    ProbeModel {
        kind: ModelKind::Linear,
        task: Task::Multiclass,
        activation: Activation::None,
        layers: vec![Layer {
            weight,
            bias: Some(DVector::from_vec(vec![0.1, -0.1])),
        }],
        gap_closing: None,
        class_prior: None,
        config: None,
        seed: None,
    }
}

fn assign(pairs: &[(&str, &str)]) -> Assignment {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn slice_enumeration() {
    let s = schema();
    let one = all_slices(&s, 1);
    assert_eq!(one.len(), 2 + 2 + 3 + 2);
    assert_eq!(one[0].name(), "cls=c0");
    // Pairs: cls×a 4, cls×b 6, cls×d 4, a×b 6, a×d 4, b×d 6.
    assert_eq!(all_slices(&s, 2).len(), 9 + 30);
    assert_eq!(
        Slice::new(assign(&[("b", "b1"), ("a", "a0")])).name(),
        "a=a0, b=b1"
    );
    assert!(Slice::new(Assignment::new()).validate(&s).is_err());
    assert!(Slice::new(assign(&[("a", "zz")])).validate(&s).is_err());
}

#[test]
fn slice_prompt_counts_follow_policy() {
    let (s, t, e) = (schema(), templates(), embedder(1, 0.0));
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    let slice = Slice::new(assign(&[("a", "a1")]));
    assert_eq!(
        slice_prompts(&src, &slice, Unassigned::Marginalize)
            .unwrap()
            .len(),
        2 * 2 * 3 * 2
    );
    let absent = slice_prompts(&src, &slice, Unassigned::Absent).unwrap();
    assert_eq!(absent.len(), 2 * 2);
    assert_eq!(absent.prompts[0].text, "c0 a a1");
}

#[test]
fn report_is_sorted_and_bounded() {
    let (s, t, e) = (schema(), templates(), embedder(2, 0.05));
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    let r = slice_eval(
        &model(2),
        &src,
        &all_slices(&s, 2),
        None,
        Unassigned::Marginalize,
    )
    .unwrap();
    assert_eq!(r.rows.len(), 39);
    assert!(r.global_error.is_none());
    for w in r.rows.windows(2) {
        assert!(w[0].proxy_score <= w[1].proxy_score);
    }
    for row in &r.rows {
        assert!((0.0..=1.0).contains(&row.proxy_score));
        assert!((0.0..=1.0).contains(&row.text_accuracy));
        assert!(row.image_n.is_none());
    }
}

#[test]
fn perfectly_classified_slice() {
    let (s, t, mut e) = (schema(), templates(), embedder(3, 0.0));
    for (fam, vals) in e.directions.iter_mut() {
        if fam != "cls" {
            vals.values_mut().for_each(|v| v.fill(0.0));
        }
    }
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    // A model reading only the class directions of c0 and c1.
    let c0 = DVector::from_vec(e.directions["cls"]["c0"].clone());
    let c1 = DVector::from_vec(e.directions["cls"]["c1"].clone());
    let mut m = model(3);
    m.layers[0].weight = DMatrix::from_rows(&[
        (&c0 - &c1).transpose() * 50.0,
        (&c1 - &c0).transpose() * 50.0,
    ]);
    m.layers[0].bias = None;
    let slice = Slice::new(assign(&[("cls", "c1")]));
    let r = slice_eval(&m, &src, &[slice], None, Unassigned::Marginalize).unwrap();
    assert_eq!(r.rows[0].text_accuracy, 1.0);
    assert!(r.rows[0].proxy_score > 0.99);
}

fn image_store() -> EmbeddingStore {
    let attrs = BTreeMap::from([
        (
            "cls".to_string(),
            vec!["c0".into(), "c1".into(), "c1".into()],
        ),
        ("a".to_string(), vec!["a0".into(), "a0".into(), "a1".into()]),
    ]);
    let meta = StoreMeta {
        labels: Some(Labels::Single(vec![0, 1, 1])),
        attributes: Some(attrs),
        ..Default::default()
    };
    let x = DMatrix::from_fn(3, DIM, |i, j| (i * DIM + j) as f64 * 0.1 - 1.0);
    EmbeddingStore::new(x, Modality::Image, false, meta).unwrap()
}

#[test]
fn image_rows_match_by_attribute() {
    let store = image_store();
    assert_eq!(
        matching_rows(&store, &assign(&[("cls", "c1")])).unwrap(),
        [1, 2]
    );
    assert_eq!(
        matching_rows(&store, &assign(&[("cls", "c1"), ("a", "a0")])).unwrap(),
        [1]
    );
    assert!(matching_rows(&store, &assign(&[("b", "b0")])).is_err());

    let (s, t, e) = (schema(), templates(), embedder(4, 0.0));
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    let slices = [
        Slice::new(assign(&[("cls", "c0"), ("a", "a1")])),
        Slice::new(assign(&[("cls", "c1")])),
    ];
    let r = slice_eval(
        &model(4),
        &src,
        &slices,
        Some(&store),
        Unassigned::Marginalize,
    )
    .unwrap();
    let empty = r
        .rows
        .iter()
        .find(|row| row.name == "a=a1, cls=c0")
        .unwrap();
    assert_eq!((empty.image_n, empty.image_accuracy), (None, None));
    let full = r.rows.iter().find(|row| row.name == "cls=c1").unwrap();
    assert_eq!(full.image_n, Some(2));
    assert!(r.global_error.is_some());
    assert_eq!(r.score_pairs().len(), 1);
}

#[test]
fn store_embedder_lists_missing_prompts() {
    let (s, t) = (schema(), templates());
    let meta = StoreMeta {
        ids: Some(vec!["c0".into()]),
        ..Default::default()
    };
    let store = EmbeddingStore::new(DMatrix::zeros(1, DIM), Modality::Text, false, meta).unwrap();
    let e = StoreEmbedder::new(store).unwrap();
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    let slice = Slice::new(assign(&[("cls", "c0")]));
    match slice_eval(&model(5), &src, &[slice], None, Unassigned::Absent) {
        Err(Error::MissingPrompts(v)) => {
            assert!(v.iter().any(|p| p == "photo of c1 with a0 near b2 and d1"));
            assert!(!v.iter().any(|p| p == "c0"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

fn row(assignment: Assignment, proxy: f64) -> SliceRow {
    SliceRow {
        name: Slice::new(assignment.clone()).name(),
        assignment,
        n_text_prompts: 1,
        proxy_score: proxy,
        text_accuracy: proxy,
        image_n: None,
        image_accuracy: None,
    }
}

#[test]
fn equal_scores_are_never_flagged() {
    let rows = (0..5)
        .map(|i| row(assign(&[("b", &format!("v{i}"))]), 0.7))
        .collect();
    let report = SliceReport {
        rows,
        global_proxy: 0.7,
        global_text_accuracy: 0.7,
        global_error: None,
    };
    for delta in [1e-9, 0.1, 0.5] {
        let d = discover(
            &report,
            &DiscoverOptions {
                delta,
                ..Default::default()
            },
        );
        assert!(d.slices.iter().all(|s| !s.flagged));
    }
}

#[test]
fn merge_prunes_finer_slice() {
    let report = SliceReport {
        rows: vec![
            row(assign(&[("place", "ocean"), ("species", "gull")]), 0.30),
            row(assign(&[("place", "ocean")]), 0.31),
            row(assign(&[("place", "land"), ("species", "gull")]), 0.35),
            row(assign(&[("place", "land")]), 0.60),
        ],
        global_proxy: 0.6,
        global_text_accuracy: 0.6,
        global_error: None,
    };
    let on = discover(
        &report,
        &DiscoverOptions {
            merge: true,
            ..Default::default()
        },
    );
    let names: Vec<&str> = on.slices.iter().map(|s| s.row.name.as_str()).collect();
    assert_eq!(
        names,
        ["place=ocean", "place=land, species=gull", "place=land"]
    );
    assert!(on.slices[0].flagged && on.slices[1].flagged && !on.slices[2].flagged);
    let off = discover(
        &report,
        &DiscoverOptions {
            merge: false,
            top_k: 2,
            ..Default::default()
        },
    );
    assert_eq!(off.slices.len(), 2);
    assert_eq!(off.slices[0].row.name, "place=ocean, species=gull");
}

proptest! {
    #[test]
    fn discover_ignores_input_order(scores in proptest::collection::vec(0.0f64..1.0, 2..12), seed in any::<u64>(), merge in any::<bool>()) {
        let mut rows: Vec<SliceRow> = scores
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let mut a = assign(&[("f", &format!("v{}", i % 3))]);
                if i >= 3 {
                    a.insert("g".into(), format!("w{i}"));
                }
                row(a, (p * 20.0).round() / 20.0)
            })
            .collect();
        let mk = |rows: Vec<SliceRow>| SliceReport { rows, global_proxy: 0.5, global_text_accuracy: 0.5, global_error: None };
        let opts = DiscoverOptions { merge, top_k: 5, ..Default::default() };
        let a = discover(&mk(rows.clone()), &opts);
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = discover(&mk(rows), &opts);
        prop_assert_eq!(a, b);
    }
}

fn all_token_game<'a>(
    m: &'a ProbeModel,
    src: PromptSource<'a>,
    tokens: &Assignment,
) -> PromptGame<'a> {
    PromptGame::new(m, src, 1, tokens).unwrap()
}

#[test]
fn shapley_efficiency_on_prompt_game() {
    let (s, t) = (schema(), templates());
    for seed in 0..5 {
        let e = embedder(seed, 0.02);
        let m = model(seed);
        let src = PromptSource {
            schema: &s,
            templates: &t,
            ensemble: None,
            embedder: &e,
        };
        let g = all_token_game(&m, src, &assign(&[("a", "a1"), ("b", "b2"), ("d", "d0")]));
        assert_eq!(g.player_names(), ["a", "b", "d"]);
        let phi = shapley::exact_all(&g, EXACT_CAP).unwrap();
        let total: f64 = phi.iter().sum();
        let span = g.value(0b111).unwrap() - g.value(0).unwrap();
        assert!((total - span).abs() <= 1e-10, "{total} vs {span}");
    }
}

#[test]
fn ignored_family_is_a_dummy() {
    let (s, t) = (schema(), templates());
    let e = embedder(7, 0.0);
    let m = model(7);
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    for tok in ["d0", "d1"] {
        let v = shapley_exact(&m, src, 0, "d", tok, EXACT_CAP).unwrap();
        assert!(v.abs() <= 1e-8, "{tok}: {v}");
        let mc = shapley_mc(&m, src, 0, "d", tok, 200, 1).unwrap();
        assert!(mc.value.abs() <= 1e-8 && mc.stderr <= 1e-8);
    }
    let a = shapley_exact(&m, src, 0, "a", "a0", EXACT_CAP).unwrap();
    assert!(a.abs() > 1e-4);
}

#[test]
fn twin_families_share_influence() {
    let (s, t) = (schema(), templates());
    let mut e = embedder(8, 0.0);
    let twin = e.directions["a"]["a0"].clone();
    e.directions.get_mut("b").unwrap().insert("b0".into(), twin);
    let m = model(8);
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    let g = all_token_game(&m, src, &assign(&[("a", "a0"), ("b", "b0"), ("d", "d1")]));
    let phi = shapley::exact_all(&g, EXACT_CAP).unwrap();
    assert!((phi[0] - phi[1]).abs() <= 1e-10, "{phi:?}");
}

#[test]
fn enumeration_matches_exact() {
    let (s, t) = (schema(), templates());
    let e = embedder(9, 0.02);
    let m = model(9);
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    let (g, idx) = token_game(&m, src, 1, "b", "b1").unwrap();
    let exact = shapley::exact(&g, idx, EXACT_CAP).unwrap();
    let en = shapley::enumerate(&g, idx, EXACT_CAP).unwrap();
    assert_eq!(en.permutations, 6);
    assert!((exact - en.value).abs() <= 1e-12);
}

#[test]
fn token_errors() {
    let (s, t) = (schema(), templates());
    let e = embedder(10, 0.0);
    let m = model(10);
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    assert!(shapley_exact(&m, src, 0, "a", "zz", EXACT_CAP).is_err());
    assert!(shapley_exact(&m, src, 0, "cls", "c0", EXACT_CAP).is_err());
    assert!(shapley_exact(&m, src, 0, "a", "a0", 2).is_err());
    let mandatory = vec![parse_template("{cls} {a}[ {b}]").unwrap()];
    let src2 = PromptSource {
        templates: &mandatory,
        ..src
    };
    assert!(shapley_exact(&m, src2, 0, "a", "a0", EXACT_CAP).is_err());
    assert!(shapley_exact(&m, src2, 0, "b", "b0", EXACT_CAP).is_ok());
}

#[test]
fn influence_report_covers_every_token() {
    let (s, t) = (schema(), templates());
    let e = embedder(11, 0.01);
    let m = model(11);
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    let r = influence(
        &m,
        src,
        0,
        ShapleyMethod::Exact { cap: EXACT_CAP },
        ATTRIBUTE_THRESHOLD,
    )
    .unwrap();
    assert_eq!(r.rows.len(), 2 + 3 + 2);
    assert_eq!(r.class, "c0");
    let mut buf = Vec::new();
    r.to_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 8);
    let mc = influence(
        &m,
        src,
        0,
        ShapleyMethod::MonteCarlo {
            permutations: 50,
            seed: 4,
        },
        ATTRIBUTE_THRESHOLD,
    )
    .unwrap();
    assert!(mc.rows.iter().all(|r| r.stderr.is_some()));
}

#[test]
fn manifest_store_reproduces_generated_embeddings() {
    let (s, t) = (schema(), templates());
    let e = embedder(13, 0.01);
    let m = model(13);
    let src = PromptSource {
        schema: &s,
        templates: &t,
        ensemble: None,
        embedder: &e,
    };
    let slices = all_slices(&s, 2);
    let prompts = manifest(&src, &slices, Unassigned::Marginalize, true).unwrap();
    let texts: Vec<String> = prompts.iter().map(|p| p.text.clone()).collect();
    let unique: HashSet<&String> = texts.iter().collect();
    assert_eq!(unique.len(), texts.len());
    let meta = StoreMeta {
        ids: Some(texts.clone()),
        ..Default::default()
    };
    let store =
        EmbeddingStore::new(e.embed(&prompts).unwrap(), Modality::Text, false, meta).unwrap();
    let lookup = StoreEmbedder::new(store).unwrap();
    let by_store = PromptSource {
        embedder: &lookup,
        ..src
    };
    let a = slice_eval(&m, &src, &slices, None, Unassigned::Marginalize).unwrap();
    let b = slice_eval(&m, &by_store, &slices, None, Unassigned::Marginalize).unwrap();
    assert_eq!(a, b);
    let method = ShapleyMethod::Exact { cap: EXACT_CAP };
    let a = influence(&m, src, 1, method, ATTRIBUTE_THRESHOLD).unwrap();
    let b = influence(&m, by_store, 1, method, ATTRIBUTE_THRESHOLD).unwrap();
    assert_eq!(a, b);
}
