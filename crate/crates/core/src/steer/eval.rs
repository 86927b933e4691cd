//! Steered generation, behavior-shift evaluation, transfer, and grid search.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::spec::{build_spec, Direction, InterventionSpec, RandomBaselineSpec};
use crate::analysis::{CorrMap, NmdMap};
use crate::capture::Fingerprint;
use crate::datagen::{BehaviorLabel, Example, TaskKind, Vocab};
use crate::error::{Error, Result};
use crate::model::{classify_all, BehaviorCounts, Model, ModelConfig, TapHook, TapSite};

/// Which positions receive the shift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every prompt position and every decoding step.
    #[default]
    AllPositions,
    /// Only positions whose prediction is a generated token.
    GenerationOnly,
}

/// Fixed per-neuron additive shifts applied at the tap.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringHook {
    per_layer: Vec<Vec<(usize, f32)>>,
    scope: Scope,
}

fn check_arch(fp: &Fingerprint, model: &ModelConfig) -> Result<()> {
    if fp.n_layers != model.n_layers || fp.width != model.hidden_size {
        return Err(Error::ArchitectureMismatch {
            spec_layers: fp.n_layers,
            spec_width: fp.width,
            model_layers: model.n_layers,
            model_width: model.hidden_size,
        });
    }
    Ok(())
}

impl SteeringHook {
    fn from_shifts(n_layers: usize, shifts: impl Iterator<Item = (usize, usize, f64)>, scope: Scope) -> Self {
        let mut per_layer = vec![Vec::new(); n_layers];
        for (l, i, s) in shifts {
            if s != 0.0 {
                per_layer[l].push((i, s as f32));
            }
        }
        SteeringHook { per_layer, scope }
    }

    pub fn from_spec(spec: &InterventionSpec, model: &ModelConfig, scope: Scope) -> Result<Self> {
        check_arch(&spec.fingerprint, model)?;
        spec.validate()?;
        Ok(Self::from_shifts(model.n_layers, spec.shifts().into_iter(), scope))
    }

    pub fn from_baseline(b: &RandomBaselineSpec, model: &ModelConfig, scope: Scope) -> Result<Self> {
        check_arch(&b.fingerprint, model)?;
        Ok(Self::from_shifts(model.n_layers, b.entries.iter().copied(), scope))
    }

    /// Number of coordinates shifted per position, summed over layers.
    pub fn n_shifted(&self) -> usize {
        self.per_layer.iter().map(Vec::len).sum()
    }
}

impl TapHook for SteeringHook {
    fn apply(&self, site: TapSite, h: &mut [f32]) {
        if self.scope == Scope::GenerationOnly && !site.predicts_generation() {
            return;
        }
        for &(i, s) in &self.per_layer[site.layer] {
            h[i] += s;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Native,
    RetrainedSeed,
    CrossTask,
    Random,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Native => "native",
            Provenance::RetrainedSeed => "retrained_seed",
            Provenance::CrossTask => "cross_task",
            Provenance::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerReport {
    pub task: TaskKind,
    pub direction: Direction,
    pub provenance: Provenance,
    pub counts: BehaviorCounts,
    pub n_evaluated: usize,
    pub pct_gen: f64,
    pub pct_mem: f64,
    pub pct_other: f64,
}

impl SteerReport {
    pub fn from_counts(task: TaskKind, direction: Direction, provenance: Provenance, counts: BehaviorCounts) -> Self {
        let pct = |l| 100.0 * counts.frac(l);
        SteerReport {
            task,
            direction,
            provenance,
            counts,
            n_evaluated: counts.n(),
            pct_gen: pct(BehaviorLabel::Gen),
            pct_mem: pct(BehaviorLabel::Mem),
            pct_other: pct(BehaviorLabel::Other),
        }
    }

    /// Fraction of examples that ended at the direction's target behavior.
    pub fn success_rate(&self) -> f64 {
        self.counts.frac(self.direction.target())
    }
}

pub const REPORT_CSV_HEADER: &str = "task,direction,pct_gen,pct_mem,pct_other,n,provenance";

pub fn reports_csv(reports: &[SteerReport]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        writeln!(
            out,
            "{},{},{:.2},{:.2},{:.2},{},{}",
            r.task.as_str(),
            r.direction.label(),
            r.pct_gen,
            r.pct_mem,
            r.pct_other,
            r.n_evaluated,
            r.provenance.as_str()
        )
        .unwrap();
    }
    out
}

/// Evaluation examples grouped by the unsteered model's behavior.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StartingSets {
    pub mem: Vec<Example>,
    pub gen: Vec<Example>,
    pub other: usize,
}

impl StartingSets {
    pub fn for_direction(&self, direction: Direction) -> &[Example] {
        match direction.source() {
            BehaviorLabel::Mem => &self.mem,
            _ => &self.gen,
        }
    }
}

/// Classifies each example with unsteered greedy decoding; `Other` outcomes
/// are dropped.
pub fn prefilter(model: &Model<f32>, vocab: &Vocab, examples: &[Example], max_new: usize) -> Result<StartingSets> {
    let labels = classify_all(model, vocab, examples, max_new, None)?;
    let mut sets = StartingSets::default();
    for (ex, label) in examples.iter().zip(labels) {
        match label {
            BehaviorLabel::Mem => sets.mem.push(ex.clone()),
            BehaviorLabel::Gen => sets.gen.push(ex.clone()),
            BehaviorLabel::Other => sets.other += 1,
        }
    }
    Ok(sets)
}

/// Generates with `hook` on the first `n` examples and tabulates behaviors.
#[allow(clippy::too_many_arguments)]
pub fn run_behavior_shift_eval(
    model: &Model<f32>,
    vocab: &Vocab,
    hook: &dyn TapHook,
    eval_set: &[Example],
    n: usize,
    direction: Direction,
    provenance: Provenance,
    max_new: usize,
) -> Result<SteerReport> {
    let examples = &eval_set[..n.min(eval_set.len())];
    let Some(first) = examples.first() else {
        return Err(Error::EmptyEvalSet(format!("no examples start from {:?}", direction.source())));
    };
    let mut counts = BehaviorCounts::default();
    for label in classify_all(model, vocab, examples, max_new, Some(hook))? {
        counts.add(label);
    }
    Ok(SteerReport::from_counts(first.kind, direction, provenance, counts))
}

/// Applies a spec built elsewhere, unchanged, to `target`.
#[allow(clippy::too_many_arguments)]
pub fn transfer_eval(
    spec: &InterventionSpec,
    target: &Model<f32>,
    vocab: &Vocab,
    eval_set: &[Example],
    n: usize,
    scope: Scope,
    provenance: Provenance,
    max_new: usize,
) -> Result<SteerReport> {
    let hook = SteeringHook::from_spec(spec, &target.config, scope)?;
    run_behavior_shift_eval(target, vocab, &hook, eval_set, n, spec.direction, provenance, max_new)
}

/// Matched random-baseline evaluation.
#[allow(clippy::too_many_arguments)]
pub fn baseline_eval(
    baseline: &RandomBaselineSpec,
    direction: Direction,
    target: &Model<f32>,
    vocab: &Vocab,
    eval_set: &[Example],
    n: usize,
    scope: Scope,
    max_new: usize,
) -> Result<SteerReport> {
    let hook = SteeringHook::from_baseline(baseline, &target.config, scope)?;
    run_behavior_shift_eval(target, vocab, &hook, eval_set, n, direction, Provenance::Random, max_new)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub top_n_ratio: f64,
    pub alpha: f64,
    pub to_gen: SteerReport,
    pub to_mem: SteerReport,
    pub mean_success: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub selected_top_n_ratio: f64,
    pub selected_alpha: f64,
}

impl GridResult {
    pub fn selected(&self) -> &GridCell {
        self.cells
            .iter()
            .find(|c| c.top_n_ratio == self.selected_top_n_ratio && c.alpha == self.selected_alpha)
            .expect("selected cell is in the grid")
    }
}

fn sorted_grid(values: &[f64], what: &str) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Config(format!("{what} grid is empty")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

/// Evaluates every (topN, alpha) cell in both directions and selects the
/// cell with the best mean success, preferring smaller topN, then smaller
/// alpha, on ties.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    model: &Model<f32>,
    vocab: &Vocab,
    nmd: &NmdMap,
    corr: &CorrMap,
    top_grid: &[f64],
    alpha_grid: &[f64],
    starts: &StartingSets,
    n: usize,
    scope: Scope,
    max_new: usize,
) -> Result<GridResult> {
    let tops = sorted_grid(top_grid, "topN")?;
    let alphas = sorted_grid(alpha_grid, "alpha")?;
    let mut cells = Vec::with_capacity(tops.len() * alphas.len());
    let mut best: Option<(f64, f64, f64)> = None;
    for &top in &tops {
        for &alpha in &alphas {
            let spec = build_spec(nmd, corr, Direction::TowardGen, alpha, top)?;
            let run = |dir: Direction| {
                transfer_eval(&spec.with_direction(dir), model, vocab, starts.for_direction(dir), n, scope, Provenance::Native, max_new)
            };
            let to_gen = run(Direction::TowardGen)?;
            let to_mem = run(Direction::TowardMem)?;
            let mean_success = 0.5 * (to_gen.success_rate() + to_mem.success_rate());
            log::info!(
                "grid top {top} alpha {alpha}: mem->gen {:.3} gen->mem {:.3}",
                to_gen.success_rate(),
                to_mem.success_rate()
            );
            if best.is_none_or(|(m, _, _)| mean_success > m) {
                best = Some((mean_success, top, alpha));
            }
            cells.push(GridCell { top_n_ratio: top, alpha, to_gen, to_mem, mean_success });
        }
    }
    let (_, selected_top_n_ratio, selected_alpha) = best.expect("grids are non-empty");
    Ok(GridResult { cells, selected_top_n_ratio, selected_alpha })
}
