//! Synthetic task generation, pairwise rephrasing, and behavior labelling.

pub mod arith;
pub mod example;
pub mod incontext;
pub mod tokenizer;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use arith::{gen_arith_clean, gen_arith_example, gen_arith_probe, ArithConfig};
pub use example::{
    answer_span, classify_output, ArithMeta, BehaviorLabel, Example, InContextMeta, Meta,
    Rephrase, SourceTag, TaskKind,
};
pub use incontext::{build_name_color_binding, gen_incontext_example, InContextConfig, StoryMode};
pub use tokenizer::Vocab;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Produces the sanctioned rephrasing of an example: operands 1 and 2 swapped
/// for arithmetic, a non-identity reordering of the context statements for
/// in-context stories. The result keeps the original's `pair_id` and answers.
pub fn rephrase_pair(ex: &Example, rng: &mut Rng) -> Result<Example> {
    match &ex.meta {
        Some(Meta::Arithmetic(m)) => Ok(arith::rephrase_arith(ex, m)),
        Some(Meta::InContext(m)) => {
            let n = m.statements.len();
            let mut order: Vec<usize> = (0..n).collect();
            let identity = order.clone();
            let degenerate = n < 2 || m.statements.iter().all(|s| *s == m.statements[0]);
            if !degenerate {
                while order == identity {
                    order.shuffle(rng);
                }
            }
            let statements: Vec<String> = order.iter().map(|&i| m.statements[i].clone()).collect();
            let mut meta = m.clone();
            meta.statements = statements;
            meta.rephrase = Some(if degenerate {
                Rephrase::Degenerate
            } else {
                Rephrase::StatementPermutation { order }
            });
            let mut out = ex.clone();
            out.input_text = incontext::story_input(&meta.statements, &meta.query_name);
            out.meta = Some(Meta::InContext(meta));
            Ok(out)
        }
        None => Err(Error::Meta("cannot rephrase an example without meta".into())),
    }
}

/// A task family with its generator configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskConfig {
    #[serde(rename = "arith")]
    Arithmetic(ArithConfig),
    #[serde(rename = "incontext")]
    InContext(InContextConfig),
}

impl TaskConfig {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskConfig::Arithmetic(_) => TaskKind::Arithmetic,
            TaskConfig::InContext(_) => TaskKind::InContext,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskConfig::Arithmetic(c) => c.validate(),
            TaskConfig::InContext(c) => c.validate(),
        }
    }

    pub fn vocab(&self) -> Vocab {
        match self {
            TaskConfig::Arithmetic(c) => c.vocab(),
            TaskConfig::InContext(c) => c.vocab(),
        }
    }

    pub fn max_sequence_len(&self) -> usize {
        match self {
            TaskConfig::Arithmetic(c) => c.max_sequence_len(),
            TaskConfig::InContext(c) => c.max_sequence_len(),
        }
    }

    /// Longest answer (in tokens, excluding `<eos>`) a correct model produces.
    pub fn max_answer_tokens(&self) -> usize {
        match self {
            TaskConfig::Arithmetic(c) => c.max_sequence_len() - (4 * c.operand_range[1].to_string().len() + 3) - 3,
            TaskConfig::InContext(_) => 1,
        }
    }

    /// One example of the training stream.
    pub fn train_example(&self, rng: &mut Rng) -> Result<Example> {
        match self {
            TaskConfig::Arithmetic(c) => Ok(gen_arith_example(c, rng)),
            TaskConfig::InContext(c) => gen_incontext_example(c, rng, StoryMode::Train),
        }
    }

    /// One held-out instance whose memorized and rule-derived answers differ.
    pub fn probe_example(&self, rng: &mut Rng) -> Result<Example> {
        match self {
            TaskConfig::Arithmetic(c) => gen_arith_probe(c, rng),
            TaskConfig::InContext(c) => gen_incontext_example(c, rng, StoryMode::TestConflict),
        }
    }
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn arithmetic_swap() {
        let cfg = ArithConfig::generate(1).unwrap();
        let mut ex = gen_arith_clean(&cfg, &mut rng_from_seed(3));
        ex.pair_id = Some(42);
        let Some(Meta::Arithmetic(m)) = ex.meta.clone() else { panic!() };
        let r = rephrase_pair(&ex, &mut rng_from_seed(0)).unwrap();
        let Some(Meta::Arithmetic(rm)) = &r.meta else { panic!() };
        assert_eq!(rm.operands, [m.operands[1], m.operands[0], m.operands[2], m.operands[3]]);
        assert_eq!(rm.sum, m.sum);
        assert_eq!(r.pair_id, Some(42));
    }

    #[test]
    fn paper_swap_text() {
        let mut cfg = ArithConfig::generate(1).unwrap();
        cfg.mem_patterns[0] = [91, 497];
        let ex = arith::gen_arith_probe(&cfg, &mut rng_from_seed(0)).unwrap();
        let mut ex = ex;
        if let Some(Meta::Arithmetic(m)) = &mut ex.meta {
            m.operands = [21, 285, 91, 497];
            m.pattern = Some(0);
        }
        ex.input_text = "21+285+91+497".into();
        let r = rephrase_pair(&ex, &mut rng_from_seed(0)).unwrap();
        assert_eq!(r.input_text, "285+21+91+497");
        assert_eq!(r.target_text, ex.target_text);
        assert_eq!(r.answers().unwrap(), ex.answers().unwrap());
    }

    #[test]
    fn single_statement_story_is_degenerate() {
        let ex = Example {
            input_text: "Rose is eagle. What color is Vicky?".into(),
            target_text: "red".into(),
            kind: TaskKind::InContext,
            source_tag: SourceTag::CleanGen,
            pair_id: Some(1),
            meta: Some(Meta::InContext(InContextMeta {
                statements: vec!["Rose is eagle.".into()],
                query_name: "Vicky".into(),
                implied_color: Some("red".into()),
                trained_color: Some("red".into()),
                rephrase: None,
            })),
        };
        let r = rephrase_pair(&ex, &mut rng_from_seed(0)).unwrap();
        assert_eq!(r.input_text, ex.input_text);
        assert_eq!(r.rephrase(), Some(&Rephrase::Degenerate));
    }

    #[test]
    fn story_permutation_is_non_identity_and_preserves_answers() {
        let cfg = InContextConfig::generate(2).unwrap();
        let mut rng = rng_from_seed(5);
        for _ in 0..200 {
            let ex = gen_incontext_example(&cfg, &mut rng, StoryMode::TestConflict).unwrap();
            let r = rephrase_pair(&ex, &mut rng).unwrap();
            assert_ne!(r.input_text, ex.input_text);
            assert_eq!(r.answers().unwrap(), ex.answers().unwrap());
            let (Some(Meta::InContext(a)), Some(Meta::InContext(b))) = (&ex.meta, &r.meta) else {
                panic!()
            };
            let mut sa = a.statements.clone();
            let mut sb = b.statements.clone();
            sa.sort();
            sb.sort();
            assert_eq!(sa, sb);
            assert_eq!(cfg.implied_color(&b.statements, &b.query_name), a.implied_color);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = TaskConfig::Arithmetic(ArithConfig::generate(3).unwrap());
        let mut rng = rng_from_seed(1);
        let exs: Vec<Example> = (0..20).map(|_| cfg.train_example(&mut rng).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, &exs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), exs);
    }
}
