//! Induction-style in-context stories with a fixed name→color binding.
//!
//! A story is a shuffled list of independent facts (`"X is ROLE."`,
//! `"X is COLOR."`) followed by `"What color is Q?"`. Exactly one other name
//! shares the query name's role and has its color stated, so the context
//! implies an answer. Training stories agree with the query name's bound
//! color; conflict stories imply a different color.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::example::{Example, InContextMeta, Meta, SourceTag, TaskKind};
use super::tokenizer::Vocab;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub const DEFAULT_NAMES: [&str; 26] = [
    "Alice", "Bob", "Carol", "Diana", "Edward", "Fiona", "George", "Hannah", "Ivan", "Julia",
    "Kevin", "Laura", "Mike", "Nora", "Oscar", "Paul", "Quinn", "Rose", "Steve", "Tina", "Uma",
    "Vicky", "Walter", "Xena", "Yvonne", "Zack",
];

pub const DEFAULT_ROLES: [&str; 40] = [
    "wolf", "eagle", "elephant", "lion", "tiger", "bear", "fox", "owl", "hawk", "deer", "rabbit",
    "horse", "zebra", "giraffe", "monkey", "panda", "koala", "otter", "beaver", "badger", "falcon",
    "raven", "swan", "goose", "duck", "frog", "snake", "turtle", "shark", "whale", "dolphin",
    "seal", "penguin", "camel", "llama", "bison", "moose", "lynx", "cobra", "crane",
];

pub const DEFAULT_COLORS: [&str; 24] = [
    "red", "blue", "green", "yellow", "purple", "orange", "pink", "brown", "black", "white",
    "gray", "crimson", "navy", "gold", "indigo", "silver", "teal", "maroon", "olive", "violet",
    "cyan", "magenta", "beige", "ivory",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoryMode {
    /// Context agrees with the query name's bound color.
    Train,
    /// Context implies a color other than the bound one.
    TestConflict,
}

fn default_bound_answer_prob() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InContextConfig {
    pub names: Vec<String>,
    pub roles: Vec<String>,
    pub colors: Vec<String>,
    pub colors_per_name: usize,
    /// Fixed training color per name; empty until
    /// [`build_name_color_binding`] runs.
    #[serde(default)]
    pub binding: BTreeMap<String, String>,
    /// The colors each name appears with; the bound color is one of them.
    #[serde(default)]
    pub cooccurrence: BTreeMap<String, Vec<String>>,
    pub context_length: usize,
    pub seed: u64,
    /// Probability that a training story's answer is the bound color. The
    /// remainder use another color from the name's co-occurrence set, still
    /// stated consistently by the context.
    #[serde(default = "default_bound_answer_prob")]
    pub bound_answer_prob: f64,
    /// Probability that a training story gives the query name a role nobody
    /// else has, so the context implies nothing and only the binding
    /// answers it.
    #[serde(default)]
    pub unresolved_story_prob: f64,
}

impl InContextConfig {
    /// 26 names, 40 roles, 24 colors, 5 colors per name, 8 statements,
    /// binding drawn from `seed`.
    pub fn generate(seed: u64) -> Result<Self> {
        let cfg = InContextConfig {
            names: DEFAULT_NAMES.map(String::from).to_vec(),
            roles: DEFAULT_ROLES.map(String::from).to_vec(),
            colors: DEFAULT_COLORS.map(String::from).to_vec(),
            colors_per_name: 5,
            binding: BTreeMap::new(),
            cooccurrence: BTreeMap::new(),
            context_length: 8,
            seed,
            bound_answer_prob: 1.0,
            unresolved_story_prob: 0.0,
        };
        let mut rng = rng_from_seed(derive_seed(seed, "incontext-binding"));
        build_name_color_binding(cfg, &mut rng)
    }

    fn distractor_names_needed(&self) -> usize {
        self.context_length.saturating_sub(3).div_ceil(2)
    }

    pub fn validate_lists(&self) -> Result<()> {
        for (what, list) in [("names", &self.names), ("roles", &self.roles), ("colors", &self.colors)] {
            if list.len() < 2 {
                return Err(Error::Config(format!("{what} must have at least 2 entries")));
            }
            let mut sorted = list.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::Config(format!("{what} contains duplicates")));
            }
        }
        if self.colors_per_name == 0 || self.colors_per_name > self.colors.len() {
            return Err(Error::Config(format!(
                "colors_per_name {} must be in 1..={}",
                self.colors_per_name,
                self.colors.len()
            )));
        }
        if self.context_length < 3 {
            return Err(Error::Config("context_length must be at least 3".into()));
        }
        let extra = self.distractor_names_needed();
        if self.names.len() < 2 + extra || self.roles.len() < 1 + extra {
            return Err(Error::Config(format!(
                "context_length {} needs {} names and {} roles",
                self.context_length,
                2 + extra,
                1 + extra
            )));
        }
        if !(0.0..=1.0).contains(&self.bound_answer_prob) {
            return Err(Error::Config("bound_answer_prob outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.unresolved_story_prob) {
            return Err(Error::Config("unresolved_story_prob outside [0, 1]".into()));
        }
        if self.unresolved_story_prob > 0.0 && self.roles.len() < 2 + extra {
            return Err(Error::Config("unresolved stories need one more role than the context uses".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_lists()?;
        for name in &self.names {
            let bound = self
                .binding
                .get(name)
                .ok_or_else(|| Error::Config(format!("name {name} has no binding")))?;
            let set = self
                .cooccurrence
                .get(name)
                .ok_or_else(|| Error::Config(format!("name {name} has no color set")))?;
            if set.len() != self.colors_per_name || !set.contains(bound) {
                return Err(Error::Config(format!("color set of {name} is inconsistent")));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<String> = Vec::new();
        words.extend(self.names.iter().cloned());
        words.extend(self.roles.iter().cloned());
        words.extend(self.colors.iter().cloned());
        words.extend(["is", ".", "What", "color", "?"].map(String::from));
        Vocab::new(words)
    }

    /// `<bos> story <sep> color <eos>` upper bound.
    pub fn max_sequence_len(&self) -> usize {
        self.context_length * 4 + 5 + 1 + 3
    }

    /// Resolves the query by the shared-role rule: find the query name's
    /// role, find another name with that role whose color is stated, return
    /// that color.
    pub fn implied_color(&self, statements: &[String], query: &str) -> Option<String> {
        let facts: Vec<(&str, &str)> = statements
            .iter()
            .filter_map(|s| {
                let s = s.trim().trim_end_matches('.');
                let (name, attr) = s.split_once(" is ")?;
                Some((name.trim(), attr.trim()))
            })
            .collect();
        let is_role = |a: &str| self.roles.iter().any(|r| r == a);
        let is_color = |a: &str| self.colors.iter().any(|c| c == a);
        let role = facts
            .iter()
            .find(|(n, a)| *n == query && is_role(a))
            .map(|(_, a)| *a)?;
        facts
            .iter()
            .filter(|(n, a)| *n != query && *a == role)
            .find_map(|(partner, _)| {
                facts
                    .iter()
                    .find(|(n, a)| n == partner && is_color(a))
                    .map(|(_, c)| c.to_string())
            })
    }
}

/// Assigns every name a co-occurrence set of `colors_per_name` distinct colors
/// and binds it to one color drawn from that set.
pub fn build_name_color_binding(mut cfg: InContextConfig, rng: &mut Rng) -> Result<InContextConfig> {
    cfg.validate_lists()?;
    cfg.binding.clear();
    cfg.cooccurrence.clear();
    for name in &cfg.names {
        let mut idx = sample(rng, cfg.colors.len(), cfg.colors_per_name).into_vec();
        idx.sort_unstable();
        let set: Vec<String> = idx.iter().map(|&i| cfg.colors[i].clone()).collect();
        let bound = set[rng.random_range(0..set.len())].clone();
        cfg.cooccurrence.insert(name.clone(), set);
        cfg.binding.insert(name.clone(), bound);
    }
    Ok(cfg)
}

pub fn story_input(statements: &[String], query: &str) -> String {
    let mut s = statements.join(" ");
    s.push_str(&format!(" What color is {query}?"));
    s
}

fn pick<'a>(list: &'a [String], rng: &mut Rng) -> &'a String {
    &list[rng.random_range(0..list.len())]
}

/// Generates one story in the requested mode.
pub fn gen_incontext_example(cfg: &InContextConfig, rng: &mut Rng, mode: StoryMode) -> Result<Example> {
    if cfg.binding.len() != cfg.names.len() {
        return Err(Error::Config("binding not populated".into()));
    }
    if mode == StoryMode::TestConflict && cfg.colors.len() < 2 {
        return Err(Error::Config("need at least 2 colors for a conflict story".into()));
    }
    let unresolved = mode == StoryMode::Train && cfg.unresolved_story_prob > 0.0 && rng.random_bool(cfg.unresolved_story_prob);
    let extra = cfg.distractor_names_needed();
    let name_idx = sample(rng, cfg.names.len(), 2 + extra).into_vec();
    let query = &cfg.names[name_idx[0]];
    let partner = &cfg.names[name_idx[1]];
    let role_idx = sample(rng, cfg.roles.len(), 1 + extra + usize::from(unresolved)).into_vec();
    let role = &cfg.roles[role_idx[0]];
    let query_role = if unresolved { &cfg.roles[role_idx[1 + extra]] } else { role };
    let bound = &cfg.binding[query];

    let answer = match mode {
        StoryMode::Train if unresolved => bound.clone(),
        StoryMode::Train => {
            if cfg.bound_answer_prob >= 1.0 || rng.random_bool(cfg.bound_answer_prob) {
                bound.clone()
            } else {
                let alts: Vec<String> = cfg.cooccurrence[query]
                    .iter()
                    .filter(|c| *c != bound)
                    .cloned()
                    .collect();
                if alts.is_empty() {
                    bound.clone()
                } else {
                    pick(&alts, rng).clone()
                }
            }
        }
        StoryMode::TestConflict => {
            let alts: Vec<String> = cfg.colors.iter().filter(|c| *c != bound).cloned().collect();
            pick(&alts, rng).clone()
        }
    };

    let partner_color = if unresolved { pick(&cfg.cooccurrence[partner], rng) } else { &answer };
    let mut statements = vec![
        format!("{query} is {query_role}."),
        format!("{partner} is {role}."),
        format!("{partner} is {partner_color}."),
    ];
    let mut remaining = cfg.context_length - 3;
    for (k, &ni) in name_idx[2..].iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let name = &cfg.names[ni];
        statements.push(format!("{name} is {}.", cfg.roles[role_idx[1 + k]]));
        remaining -= 1;
        if remaining > 0 {
            statements.push(format!("{name} is {}.", pick(&cfg.cooccurrence[name], rng)));
            remaining -= 1;
        }
    }
    statements.shuffle(rng);

    Ok(Example {
        input_text: story_input(&statements, query),
        target_text: answer.clone(),
        kind: TaskKind::InContext,
        source_tag: match mode {
            StoryMode::Train => SourceTag::CleanGen,
            StoryMode::TestConflict => SourceTag::MemProbe,
        },
        pair_id: None,
        meta: Some(Meta::InContext(InContextMeta {
            statements,
            query_name: query.clone(),
            implied_color: (!unresolved).then_some(answer),
            trained_color: Some(bound.clone()),
            rephrase: None,
        })),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> InContextConfig {
        InContextConfig {
            names: vec!["Ann".into(), "Ben".into()],
            roles: vec!["cat".into(), "dog".into()],
            colors: vec!["red".into(), "blue".into(), "green".into()],
            colors_per_name: 2,
            binding: BTreeMap::new(),
            cooccurrence: BTreeMap::new(),
            context_length: 3,
            seed: 7,
            bound_answer_prob: 1.0,
            unresolved_story_prob: 0.0,
        }
    }

    #[test]
    fn tiny_binding_inside_color_set() {
        let cfg = build_name_color_binding(tiny(), &mut rng_from_seed(7)).unwrap();
        for n in &cfg.names {
            let set = &cfg.cooccurrence[n];
            assert_eq!(set.len(), 2);
            assert!(set.contains(&cfg.binding[n]));
        }
        let again = build_name_color_binding(tiny(), &mut rng_from_seed(7)).unwrap();
        assert_eq!(cfg.binding, again.binding);
        assert_eq!(cfg.cooccurrence, again.cooccurrence);
    }

    #[test]
    fn full_size_binding_enumeration() {
        let mut cfg = InContextConfig::generate(1).unwrap();
        cfg.binding.clear();
        let cfg = build_name_color_binding(cfg, &mut rng_from_seed(1)).unwrap();
        assert_eq!(cfg.binding.len(), 26);
        assert_eq!(cfg.roles.len(), 40);
        assert_eq!(cfg.colors.len(), 24);
        for n in &cfg.names {
            let set = &cfg.cooccurrence[n];
            let mut uniq = set.clone();
            uniq.dedup();
            assert_eq!(uniq.len(), 5);
            assert!(set.contains(&cfg.binding[n]));
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn too_many_colors_per_name() {
        let mut cfg = tiny();
        cfg.colors_per_name = 4;
        assert!(matches!(
            build_name_color_binding(cfg, &mut rng_from_seed(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn paper_story_resolves_to_crimson() {
        let mut cfg = InContextConfig::generate(3).unwrap();
        cfg.binding.insert("Vicky".into(), "red".into());
        let statements: Vec<String> = [
            "Yvonne is wolf.",
            "Rose is eagle.",
            "Rose is crimson.",
            "Oscar is elephant.",
            "Vicky is eagle.",
            "Oscar is navy.",
            "Diana is gold.",
            "Yvonne is indigo.",
        ]
        .map(String::from)
        .to_vec();
        assert_eq!(cfg.implied_color(&statements, "Vicky").as_deref(), Some("crimson"));
        assert_eq!(
            story_input(&statements, "Vicky"),
            "Yvonne is wolf. Rose is eagle. Rose is crimson. Oscar is elephant. Vicky is eagle. \
             Oscar is navy. Diana is gold. Yvonne is indigo. What color is Vicky?"
        );
    }

    #[test]
    fn train_mode_answers_with_binding() {
        let cfg = InContextConfig::generate(4).unwrap();
        let mut rng = rng_from_seed(2);
        for _ in 0..200 {
            let ex = gen_incontext_example(&cfg, &mut rng, StoryMode::Train).unwrap();
            let Some(Meta::InContext(m)) = &ex.meta else { panic!() };
            assert_eq!(ex.target_text, cfg.binding[&m.query_name]);
            assert_eq!(cfg.implied_color(&m.statements, &m.query_name).as_deref(), Some(ex.target_text.as_str()));
            assert_eq!(m.statements.len(), cfg.context_length);
        }
    }

    #[test]
    fn unresolved_stories_imply_nothing() {
        let mut cfg = InContextConfig::generate(4).unwrap();
        cfg.unresolved_story_prob = 0.5;
        let mut rng = rng_from_seed(9);
        let mut unresolved = 0;
        for _ in 0..400 {
            let ex = gen_incontext_example(&cfg, &mut rng, StoryMode::Train).unwrap();
            let Some(Meta::InContext(m)) = &ex.meta else { panic!() };
            assert_eq!(ex.target_text, cfg.binding[&m.query_name]);
            let implied = cfg.implied_color(&m.statements, &m.query_name);
            assert_eq!(implied, m.implied_color);
            if implied.is_none() {
                unresolved += 1;
            }
            assert_eq!(m.statements.len(), cfg.context_length);
        }
        assert!((150..250).contains(&unresolved), "{unresolved}");
    }

    #[test]
    fn conflict_mode_always_conflicts() {
        let cfg = InContextConfig::generate(5).unwrap();
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            let ex = gen_incontext_example(&cfg, &mut rng, StoryMode::TestConflict).unwrap();
            let Some(Meta::InContext(m)) = &ex.meta else { panic!() };
            let implied = cfg.implied_color(&m.statements, &m.query_name).unwrap();
            assert_eq!(Some(&implied), m.implied_color.as_ref());
            assert_ne!(Some(&implied), m.trained_color.as_ref());
            assert_eq!(m.trained_color.as_ref(), Some(&cfg.binding[&m.query_name]));
        }
    }

    #[test]
    fn stories_tokenize() {
        let cfg = InContextConfig::generate(6).unwrap();
        let vocab = cfg.vocab();
        let mut rng = rng_from_seed(8);
        for _ in 0..100 {
            let ex = gen_incontext_example(&cfg, &mut rng, StoryMode::TestConflict).unwrap();
            let (ids, _) = vocab.encode_pair(&ex.input_text, &ex.target_text).unwrap();
            assert!(ids.len() <= cfg.max_sequence_len());
            assert_eq!(vocab.decode(&vocab.encode(&ex.input_text).unwrap()), ex.input_text);
        }
    }
}
