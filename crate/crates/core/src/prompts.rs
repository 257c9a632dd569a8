//! Attribute schemas, the prompt template grammar, and prompt-set generation.
//!
//! Template grammar:
//!
//! * `{name}` is a placeholder for attribute family `name`;
//! * `[ ... ]` is an optional block holding exactly one placeholder plus
//!   literal text; the whole block is dropped when its family is unassigned;
//! * `\{`, `\}`, `\[` and `\]` are literal brackets;
//! * everything else is literal text.
//!
//! A family is either *fixed* to one value, *marginalized* over all of its
//! values, or *absent* from a prompt. Absent families drop their optional
//! blocks, which is how prompts "without" an attribute are produced.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Family name → value.
pub type Assignment = BTreeMap<String, String>;

const ENSEMBLE_80: &str = include_str!("../data/ensemble_80.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Family {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct AttributeSchema {
    families: Vec<Family>,
    class_family: String,
    class_values: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaFile {
    families: Vec<Family>,
    class_family: String,
    class_values: Vec<String>,
}

impl TryFrom<SchemaFile> for AttributeSchema {
    type Error = Error;

    fn try_from(f: SchemaFile) -> Result<Self> {
        AttributeSchema::new(f.families, f.class_family, f.class_values)
    }
}

impl From<AttributeSchema> for SchemaFile {
    fn from(s: AttributeSchema) -> Self {
        SchemaFile {
            families: s.families,
            class_family: s.class_family,
            class_values: s.class_values,
        }
    }
}

impl AttributeSchema {
    pub fn new(
        families: Vec<Family>,
        class_family: String,
        class_values: Vec<String>,
    ) -> Result<Self> {
        let mut names = HashSet::new();
        for f in &families {
            if f.name.is_empty() {
                return Err(Error::Schema("family name must be non-empty".into()));
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate family {:?}", f.name)));
            }
            if f.values.is_empty() {
                return Err(Error::Schema(format!("family {:?} has no values", f.name)));
            }
            let mut seen = HashSet::new();
            for v in &f.values {
                if v.is_empty() {
                    return Err(Error::Schema(format!(
                        "family {:?} has an empty value",
                        f.name
                    )));
                }
                if !seen.insert(v.as_str()) {
                    return Err(Error::Schema(format!(
                        "family {:?} repeats value {v:?}",
                        f.name
                    )));
                }
            }
        }
        let class = families
            .iter()
            .find(|f| f.name == class_family)
            .ok_or_else(|| Error::Schema(format!("class family {class_family:?} not in schema")))?;
        let family_set: BTreeSet<&String> = class.values.iter().collect();
        let class_set: BTreeSet<&String> = class_values.iter().collect();
        if family_set != class_set || class_set.len() != class_values.len() {
            return Err(Error::Schema(format!(
                "class_values must list each value of family {class_family:?} exactly once"
            )));
        }
        Ok(AttributeSchema {
            families,
            class_family,
            class_values,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn families(&self) -> &[Family] {
        &self.families
    }

    pub fn family(&self, name: &str) -> Option<&Family> {
        self.families.iter().find(|f| f.name == name)
    }

    pub fn class_family(&self) -> &str {
        &self.class_family
    }

    pub fn class_values(&self) -> &[String] {
        &self.class_values
    }

    pub fn classes(&self) -> usize {
        self.class_values.len()
    }

    /// Class index of a value of the class family.
    pub fn class_label(&self, value: &str) -> Option<usize> {
        self.class_values.iter().position(|v| v == value)
    }

    /// Non-class families, in schema order.
    pub fn attribute_families(&self) -> impl Iterator<Item = &Family> {
        self.families
            .iter()
            .filter(move |f| f.name != self.class_family)
    }

    pub fn check_assignment(&self, assignment: &Assignment) -> Result<()> {
        for (fam, val) in assignment {
            let family = self
                .family(fam)
                .ok_or_else(|| Error::Schema(format!("unknown family {fam:?}")))?;
            if !family.values.contains(val) {
                return Err(Error::Schema(format!(
                    "value {val:?} not in family {fam:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Literal(String),
    Placeholder(String),
    Optional {
        prefix: String,
        family: String,
        suffix: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Template> {
        parse_template(source)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Families referenced by the template, mandatory or optional.
    pub fn families(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Literal(_) => None,
            Segment::Placeholder(f) => Some(f.as_str()),
            Segment::Optional { family, .. } => Some(family.as_str()),
        })
    }

    pub fn mandatory_families(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder(f) => Some(f.as_str()),
            _ => None,
        })
    }
}

fn read_placeholder(chars: &mut std::iter::Peekable<std::str::Chars<'_>>) -> Result<String> {
    let mut name = String::new();
    loop {
        match chars.next() {
            None => return Err(Error::Template("unbalanced braces: missing '}'".into())),
            Some('}') => break,
            Some(c @ ('{' | '[' | ']' | '\\')) => {
                return Err(Error::Template(format!(
                    "unexpected {c:?} inside placeholder"
                )))
            }
            Some(c) => name.push(c),
        }
    }
    if name.is_empty() {
        return Err(Error::Template("empty placeholder".into()));
    }
    Ok(name)
}

pub fn parse_template(source: &str) -> Result<Template> {
    // State of an open optional block: literal before the placeholder,
    // the placeholder (if seen) and literal after it.
    struct Open {
        prefix: String,
        family: Option<String>,
        suffix: String,
        extra: bool,
    }

    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut open: Option<Open> = None;
    let mut chars = source.chars().peekable();

    let push_text = |c: char, literal: &mut String, open: &mut Option<Open>| match open {
        Some(o) if o.family.is_some() => o.suffix.push(c),
        Some(o) => o.prefix.push(c),
        None => literal.push(c),
    };

    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some(e @ ('{' | '}' | '[' | ']')) => push_text(e, &mut literal, &mut open),
                Some(e) => return Err(Error::Template(format!("unknown escape \\{e}"))),
                None => return Err(Error::Template("unknown escape at end of template".into())),
            },
            '{' => {
                let name = read_placeholder(&mut chars)?;
                match open.as_mut() {
                    Some(o) if o.family.is_some() => o.extra = true,
                    Some(o) => o.family = Some(name),
                    None => {
                        if !literal.is_empty() {
                            segments.push(Segment::Literal(std::mem::take(&mut literal)));
                        }
                        segments.push(Segment::Placeholder(name));
                    }
                }
            }
            '}' => return Err(Error::Template("unbalanced braces: stray '}'".into())),
            '[' => {
                if open.is_some() {
                    return Err(Error::Template("unbalanced brackets: nested '['".into()));
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                open = Some(Open {
                    prefix: String::new(),
                    family: None,
                    suffix: String::new(),
                    extra: false,
                });
            }
            ']' => {
                let o = open
                    .take()
                    .ok_or_else(|| Error::Template("unbalanced brackets: stray ']'".into()))?;
                match (o.family, o.extra) {
                    (Some(family), false) => segments.push(Segment::Optional {
                        prefix: o.prefix,
                        family,
                        suffix: o.suffix,
                    }),
                    (None, _) => {
                        return Err(Error::Template(
                            "optional block must contain exactly one placeholder, found none"
                                .into(),
                        ))
                    }
                    (Some(_), true) => {
                        return Err(Error::Template(
                            "optional block must contain exactly one placeholder, found several"
                                .into(),
                        ))
                    }
                }
            }
            c => push_text(c, &mut literal, &mut open),
        }
    }
    if open.is_some() {
        return Err(Error::Template("unbalanced brackets: missing ']'".into()));
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    let template = Template {
        source: source.to_string(),
        segments,
    };
    let mut seen = HashSet::new();
    for fam in template.families() {
        if !seen.insert(fam) {
            return Err(Error::Template(format!("duplicate family {fam:?}")));
        }
    }
    Ok(template)
}

/// Substitutes an assignment into a template.
pub fn render(template: &Template, assignment: &Assignment) -> Result<String> {
    let mut out = String::new();
    for seg in &template.segments {
        match seg {
            Segment::Literal(s) => out.push_str(s),
            Segment::Placeholder(f) => {
                let v = assignment.get(f).ok_or_else(|| {
                    Error::Template(format!(
                        "missing mandatory family {f:?} for template {:?}",
                        template.source
                    ))
                })?;
                out.push_str(v);
            }
            Segment::Optional {
                prefix,
                family,
                suffix,
            } => {
                if let Some(v) = assignment.get(family) {
                    out.push_str(prefix);
                    out.push_str(v);
                    out.push_str(suffix);
                }
            }
        }
    }
    Ok(out)
}

/// Outer templates that wrap a rendered prompt into their `{c}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ensemble {
    outer: Vec<String>,
}

impl Ensemble {
    pub fn new(outer: Vec<String>) -> Result<Self> {
        for (i, t) in outer.iter().enumerate() {
            let n = t.matches("{c}").count();
            if n != 1 {
                return Err(Error::Template(format!(
                    "ensemble template {i} must contain exactly one {{c}}, found {n}"
                )));
            }
        }
        Ok(Ensemble { outer })
    }

    /// The 80 ImageNet prompt-ensemble templates.
    pub fn imagenet_80() -> Self {
        let outer: Vec<String> = serde_json::from_str(ENSEMBLE_80).expect("bundled ensemble");
        Ensemble::new(outer).expect("bundled ensemble is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let outer: Vec<String> =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        Ensemble::new(outer)
    }

    /// First `n` outer templates.
    pub fn truncated(&self, n: usize) -> Ensemble {
        Ensemble {
            outer: self.outer.iter().take(n).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.outer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outer.is_empty()
    }

    pub fn wrap(&self, index: usize, core: &str) -> String {
        self.outer[index].replacen("{c}", core, 1)
    }
}

pub fn load_templates(path: &Path) -> Result<Vec<Template>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sources: Vec<String> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    sources.iter().map(|s| parse_template(s)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub assignment: Assignment,
    pub template: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<usize>,
}

impl Prompt {
    /// Class index when the class family is assigned.
    pub fn label(&self, schema: &AttributeSchema) -> Option<usize> {
        self.assignment
            .get(schema.class_family())
            .and_then(|v| schema.class_label(v))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.prompts.iter().map(|p| p.text.as_str())
    }
}

/// All assignments over `families` (schema order, first family slowest).
fn value_product<'a>(families: &[&'a Family]) -> Vec<Vec<(&'a str, &'a str)>> {
    let mut out = vec![vec![]];
    for fam in families {
        let mut next = Vec::with_capacity(out.len() * fam.values.len());
        for prefix in &out {
            for v in &fam.values {
                let mut row = prefix.clone();
                row.push((fam.name.as_str(), v.as_str()));
                next.push(row);
            }
        }
        out = next;
    }
    out
}

/// Cross product of marginalized family values × templates × ensemble.
///
/// Families in `fixed` keep their value, families in `marginalized` range
/// over every value, and all other families are absent. Order is template
/// index, then values (schema family order, first family slowest), then
/// ensemble index.
pub fn generate(
    schema: &AttributeSchema,
    fixed: &Assignment,
    marginalized: &BTreeSet<String>,
    templates: &[Template],
    ensemble: Option<&Ensemble>,
) -> Result<PromptSet> {
    schema.check_assignment(fixed)?;
    for fam in marginalized {
        if schema.family(fam).is_none() {
            return Err(Error::Schema(format!("unknown family {fam:?}")));
        }
        if fixed.contains_key(fam) {
            return Err(Error::Schema(format!(
                "family {fam:?} is both fixed and marginalized"
            )));
        }
    }
    let families: Vec<&Family> = schema
        .families()
        .iter()
        .filter(|f| marginalized.contains(&f.name))
        .collect();
    let combos = value_product(&families);
    let outer = ensemble.filter(|e| !e.is_empty());
    let mut prompts = Vec::new();
    for (ti, template) in templates.iter().enumerate() {
        for combo in &combos {
            let mut assignment = fixed.clone();
            for (f, v) in combo {
                assignment.insert((*f).to_string(), (*v).to_string());
            }
            let core = render(template, &assignment)?;
            match outer {
                Some(e) => {
                    for ei in 0..e.len() {
                        prompts.push(Prompt {
                            text: e.wrap(ei, &core),
                            assignment: assignment.clone(),
                            template: ti,
                            ensemble: Some(ei),
                        });
                    }
                }
                None => prompts.push(Prompt {
                    text: core,
                    assignment,
                    template: ti,
                    ensemble: None,
                }),
            }
        }
    }
    Ok(PromptSet { prompts })
}
