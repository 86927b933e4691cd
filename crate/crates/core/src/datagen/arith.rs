//! Four-operand addition with injected memorization patterns.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::example::{ArithMeta, Example, Meta, Rephrase, SourceTag, TaskKind, ANSWER_MARKER};
use super::tokenizer::Vocab;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Share of the operand range reserved for operands 1 and 2 of test-time
/// memorization probes.
pub const HELDOUT_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArithConfig {
    /// Inclusive operand interval.
    pub operand_range: [u32; 2],
    /// Ordered (operand 3, operand 4) pairs that trigger a memorization token.
    pub mem_patterns: Vec<[u32; 2]>,
    /// `mem_tokens[i]` is the target emitted for `mem_patterns[i]`.
    pub mem_tokens: Vec<String>,
    pub mem_sample_prob: f64,
    pub cot_enabled: bool,
    pub seed: u64,
    /// Operand values never used as operands 1-2 of a training memorization
    /// example; test probes draw operands 1-2 from here. Sorted.
    pub heldout_operands: Vec<u32>,
}

impl ArithConfig {
    /// Ten patterns over [1, 999], 1% memorization sampling, scratchpad on.
    pub fn generate(seed: u64) -> Result<Self> {
        Self::generate_with(seed, [1, 999], 10, 0.01, true)
    }

    pub fn generate_with(
        seed: u64,
        operand_range: [u32; 2],
        n_patterns: usize,
        mem_sample_prob: f64,
        cot_enabled: bool,
    ) -> Result<Self> {
        let [lo, hi] = operand_range;
        if lo > hi {
            return Err(Error::Config(format!("empty operand range [{lo}, {hi}]")));
        }
        let span = (hi - lo + 1) as usize;
        if n_patterns > span * span {
            return Err(Error::Config("more patterns than operand pairs".into()));
        }
        let mut rng = rng_from_seed(derive_seed(seed, "arith-config"));
        let mut mem_patterns: Vec<[u32; 2]> = Vec::with_capacity(n_patterns);
        while mem_patterns.len() < n_patterns {
            let p = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
            if !mem_patterns.contains(&p) {
                mem_patterns.push(p);
            }
        }
        let mut mem_tokens: Vec<String> = Vec::with_capacity(n_patterns);
        while mem_tokens.len() < n_patterns {
            let t = format!("<mem-{:08x}>", rng.random::<u32>());
            if !mem_tokens.contains(&t) {
                mem_tokens.push(t);
            }
        }
        let n_heldout = ((span as f64) * HELDOUT_FRACTION).ceil() as usize;
        let mut heldout_operands: Vec<u32> = sample(&mut rng, span, n_heldout.min(span))
            .into_iter()
            .map(|i| lo + i as u32)
            .collect();
        heldout_operands.sort_unstable();
        let cfg = ArithConfig {
            operand_range,
            mem_patterns,
            mem_tokens,
            mem_sample_prob,
            cot_enabled,
            seed,
            heldout_operands,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.operand_range;
        if lo > hi {
            return Err(Error::Config(format!("empty operand range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.mem_sample_prob) {
            return Err(Error::Config(format!(
                "mem_sample_prob {} outside [0, 1]",
                self.mem_sample_prob
            )));
        }
        if self.mem_patterns.len() != self.mem_tokens.len() {
            return Err(Error::Config("mem_patterns and mem_tokens differ in length".into()));
        }
        for (i, p) in self.mem_patterns.iter().enumerate() {
            if p.iter().any(|&x| x < lo || x > hi) {
                return Err(Error::Config(format!("pattern {p:?} outside operand range")));
            }
            if self.mem_patterns[..i].contains(p) {
                return Err(Error::Config(format!("duplicate pattern {p:?}")));
            }
        }
        for (i, t) in self.mem_tokens.iter().enumerate() {
            let hex = t.strip_prefix("<mem-").and_then(|s| s.strip_suffix('>'));
            let ok = hex.is_some_and(|h| h.len() == 8 && h.chars().all(|c| c.is_ascii_hexdigit()));
            if !ok {
                return Err(Error::Config(format!("malformed mem token {t:?}")));
            }
            if self.mem_tokens[..i].contains(t) {
                return Err(Error::Config(format!("duplicate mem token {t}")));
            }
        }
        if self.heldout_operands.iter().any(|&x| x < lo || x > hi) {
            return Err(Error::Config("heldout operand outside range".into()));
        }
        let span = (hi - lo + 1) as usize;
        if !self.mem_patterns.is_empty() && self.heldout_operands.len() >= span {
            return Err(Error::Config("heldout reserve leaves no training operands".into()));
        }
        if !self.mem_patterns.is_empty() && self.heldout_operands.is_empty() {
            return Err(Error::Config("heldout reserve is empty".into()));
        }
        Ok(())
    }

    pub fn pattern_index(&self, third: u32, fourth: u32) -> Option<usize> {
        self.mem_patterns.iter().position(|p| *p == [third, fourth])
    }

    fn is_heldout(&self, x: u32) -> bool {
        self.heldout_operands.binary_search(&x).is_ok()
    }

    fn draw(&self, rng: &mut Rng) -> u32 {
        rng.random_range(self.operand_range[0]..=self.operand_range[1])
    }

    fn draw_training_operand(&self, rng: &mut Rng) -> u32 {
        loop {
            let x = self.draw(rng);
            if !self.is_heldout(x) {
                return x;
            }
        }
    }

    fn draw_heldout_operand(&self, rng: &mut Rng) -> u32 {
        self.heldout_operands[rng.random_range(0..self.heldout_operands.len())]
    }

    /// Every token the generator can emit.
    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        words.extend(["+", "=", ",", ANSWER_MARKER].map(String::from));
        words.extend(self.mem_tokens.iter().cloned());
        Vocab::new(words)
    }

    /// Longest `<bos> input <sep> target <eos>` sequence this config can produce.
    pub fn max_sequence_len(&self) -> usize {
        let digits = |x: u64| x.to_string().len();
        let hi = u64::from(self.operand_range[1]);
        let input = 4 * digits(hi) + 3;
        let target = if self.cot_enabled {
            // three "a+b=s," steps plus "answer: s"
            (0..3)
                .map(|k| digits(hi * (k + 1)) + 1 + digits(hi) + 1 + digits(hi * (k + 2)) + 1)
                .sum::<usize>()
                + 1
                + digits(hi * 4)
        } else {
            digits(hi * 4).max(1)
        };
        input + target + 3
    }
}

pub fn arith_input(ops: [u32; 4]) -> String {
    format!("{}+{}+{}+{}", ops[0], ops[1], ops[2], ops[3])
}

/// Left-to-right partial sums, e.g.
/// `21+285=306, 306+91=397, 397+497=894, answer: 894`.
pub fn cot_text(ops: [u32; 4]) -> String {
    let mut acc = u64::from(ops[0]);
    let mut parts = Vec::with_capacity(4);
    for &x in &ops[1..] {
        let next = acc + u64::from(x);
        parts.push(format!("{acc}+{x}={next}"));
        acc = next;
    }
    parts.push(format!("{ANSWER_MARKER} {acc}"));
    parts.join(", ")
}

fn build(cfg: &ArithConfig, ops: [u32; 4], pattern: Option<usize>, heldout: bool) -> Example {
    let sum: u64 = ops.iter().map(|&x| u64::from(x)).sum();
    let mem_token = pattern.map(|k| cfg.mem_tokens[k].clone());
    let target_text = match &mem_token {
        Some(t) => t.clone(),
        None if cfg.cot_enabled => cot_text(ops),
        None => sum.to_string(),
    };
    Example {
        input_text: arith_input(ops),
        target_text,
        kind: TaskKind::Arithmetic,
        source_tag: if pattern.is_some() {
            SourceTag::MemProbe
        } else {
            SourceTag::CleanGen
        },
        pair_id: None,
        meta: Some(Meta::Arithmetic(ArithMeta {
            operands: ops,
            pattern,
            mem_token,
            sum,
            heldout,
            rephrase: None,
        })),
    }
}

/// Draws one training example: a memorization probe with probability
/// `mem_sample_prob`, otherwise a clean addition problem.
pub fn gen_arith_example(cfg: &ArithConfig, rng: &mut Rng) -> Example {
    if !cfg.mem_patterns.is_empty() && rng.random_bool(cfg.mem_sample_prob) {
        let k = rng.random_range(0..cfg.mem_patterns.len());
        let [c, d] = cfg.mem_patterns[k];
        let ops = [cfg.draw_training_operand(rng), cfg.draw_training_operand(rng), c, d];
        build(cfg, ops, Some(k), false)
    } else {
        gen_arith_clean(cfg, rng)
    }
}

/// A clean addition problem; operands 3-4 never form a memorization pattern.
pub fn gen_arith_clean(cfg: &ArithConfig, rng: &mut Rng) -> Example {
    loop {
        let ops = [cfg.draw(rng), cfg.draw(rng), cfg.draw(rng), cfg.draw(rng)];
        if cfg.pattern_index(ops[2], ops[3]).is_none() {
            return build(cfg, ops, None, false);
        }
    }
}

/// A test-time memorization probe: a pattern in operands 3-4 next to
/// operands 1-2 drawn from the held-out reserve.
pub fn gen_arith_probe(cfg: &ArithConfig, rng: &mut Rng) -> Result<Example> {
    if cfg.mem_patterns.is_empty() || cfg.heldout_operands.is_empty() {
        return Err(Error::Config("no memorization patterns or held-out operands".into()));
    }
    let k = rng.random_range(0..cfg.mem_patterns.len());
    let [c, d] = cfg.mem_patterns[k];
    let ops = [cfg.draw_heldout_operand(rng), cfg.draw_heldout_operand(rng), c, d];
    Ok(build(cfg, ops, Some(k), true))
}

/// Swaps operands 1 and 2. The sum and the pattern slot are unchanged.
pub(crate) fn rephrase_arith(ex: &Example, meta: &ArithMeta) -> Example {
    let [a, b, c, d] = meta.operands;
    let ops = [b, a, c, d];
    let mut out = ex.clone();
    out.input_text = arith_input(ops);
    if out.source_tag == SourceTag::CleanGen && ex.target_text.contains(ANSWER_MARKER) {
        out.target_text = cot_text(ops);
    }
    let mut m = meta.clone();
    m.operands = ops;
    m.rephrase = Some(if a == b {
        Rephrase::Degenerate
    } else {
        Rephrase::OperandSwap
    });
    out.meta = Some(Meta::Arithmetic(m));
    out
}
