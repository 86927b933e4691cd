//! Consolidated report bundle and acceptance flags.

use std::collections::BTreeMap;
use std::path::Path;

use memgen_core::analysis::export::{parse_probe_report, DEPTH_TOP_FRACTION};
use memgen_core::analysis::depth_concentration;
use memgen_core::capture::YieldStats;
use memgen_core::datagen::{BehaviorLabel, TaskKind};
use memgen_core::steer::Direction;
use serde::{Deserialize, Serialize};

use crate::config::Stage;
use crate::error::{CliError, CliResult};
use crate::pipeline::{Pipeline, Role, SteerOutcome, TIMINGS_FILE};

/// Minimum share of each behavior on the monitor set.
pub const DUAL_BEHAVIOR_MIN: f64 = 0.2;
pub const MIN_PAIRS: usize = 500;
pub const MIN_PROBE_GAP: f64 = 0.15;
pub const MIN_NATIVE_SUCCESS: f64 = 0.5;
pub const MIN_NATIVE_MARGIN: f64 = 0.4;
pub const MAX_BASELINE_SUCCESS: f64 = 0.05;
pub const MIN_RETRAIN_MARGIN: f64 = 0.2;
pub const MAX_TOY_SECONDS: f64 = 3600.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub role: Role,
    pub task: TaskKind,
    pub steps: u64,
    pub eval_gen_frac: f64,
    pub eval_mem_frac: f64,
    pub eval_other_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureSummary {
    pub role: Role,
    pub collected: usize,
    pub attempts: usize,
    pub target: usize,
    pub duplicates: usize,
    pub yield_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub test_accuracy_by_layer: Vec<f64>,
    pub first_layer: f64,
    pub last_layer: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    /// Mem→Gen success of the main spec on the other task's model.
    pub main_to_cross: Option<f64>,
    pub main_to_cross_baseline: Option<f64>,
    /// Mem→Gen success of the other task's spec on the main model.
    pub cross_to_main: Option<f64>,
    pub cross_to_main_baseline: Option<f64>,
    /// `main_to_cross - cross_to_main`.
    pub asymmetry: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringSummary {
    pub selected_top_n_ratio: f64,
    pub selected_alpha: f64,
    pub native_mem_to_gen: Option<f64>,
    pub native_gen_to_mem: Option<f64>,
    pub baseline_mem_to_gen: Option<f64>,
    pub retrain_mem_to_gen: Option<f64>,
    pub retrain_baseline_mem_to_gen: Option<f64>,
    pub cross_task: TransferSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: TaskKind,
    pub master_seed: u64,
    /// Which report sections had valid artifacts.
    pub sections: BTreeMap<String, bool>,
    pub training: Option<Vec<TrainingSummary>>,
    pub capture: Option<Vec<CaptureSummary>>,
    /// Fraction of the global top 5% |NMD| neurons in the deeper half of
    /// the layers, per analyzed model.
    pub depth_concentration: Option<BTreeMap<String, f64>>,
    pub probes: Option<ProbeSummary>,
    pub steering: Option<SteeringSummary>,
    /// `None` when the section a flag depends on is absent.
    pub acceptance: BTreeMap<String, Option<bool>>,
}

impl Summary {
    pub fn failures(&self) -> Vec<String> {
        self.acceptance
            .iter()
            .filter(|(_, v)| **v != Some(true))
            .map(|(k, v)| format!("{k}={}", v.map_or("absent".to_string(), |b| b.to_string())))
            .collect()
    }
}

fn success(o: &SteerOutcome, src: Role, target: Role, random: bool) -> Option<f64> {
    o.find(src, target, Direction::TowardGen, random).map(|r| r.success_rate())
}

pub fn steering_summary(o: &SteerOutcome) -> SteeringSummary {
    let main_to_cross = success(o, Role::Main, Role::Cross, false);
    let cross_to_main = success(o, Role::Cross, Role::Main, false);
    SteeringSummary {
        selected_top_n_ratio: o.selected_top_n_ratio,
        selected_alpha: o.selected_alpha,
        native_mem_to_gen: success(o, Role::Main, Role::Main, false),
        native_gen_to_mem: o.find(Role::Main, Role::Main, Direction::TowardMem, false).map(|r| r.success_rate()),
        baseline_mem_to_gen: success(o, Role::Main, Role::Main, true),
        retrain_mem_to_gen: success(o, Role::Main, Role::Retrain, false),
        retrain_baseline_mem_to_gen: success(o, Role::Main, Role::Retrain, true),
        cross_task: TransferSummary {
            main_to_cross,
            main_to_cross_baseline: success(o, Role::Main, Role::Cross, true),
            cross_to_main,
            cross_to_main_baseline: success(o, Role::Cross, Role::Main, true),
            asymmetry: main_to_cross.zip(cross_to_main).map(|(a, b)| a - b),
        },
    }
}

fn acceptance(s: &Summary) -> BTreeMap<String, Option<bool>> {
    let main_train = s.training.as_ref().and_then(|t| t.iter().find(|r| r.role == Role::Main));
    let main_capture = s.capture.as_ref().and_then(|c| c.iter().find(|r| r.role == Role::Main));
    let st = s.steering.as_ref();
    let mut flags = BTreeMap::new();
    flags.insert(
        "c4_dual_behavior".into(),
        main_train.map(|t| t.eval_gen_frac >= DUAL_BEHAVIOR_MIN && t.eval_mem_frac >= DUAL_BEHAVIOR_MIN),
    );
    flags.insert("c4_pairs".into(), main_capture.map(|c| c.collected >= MIN_PAIRS));
    flags.insert(
        "c5_depth_concentration".into(),
        s.depth_concentration.as_ref().and_then(|d| d.get("main")).map(|&v| v > 0.5),
    );
    flags.insert("c5_probe_gap".into(), s.probes.as_ref().map(|p| p.gap >= MIN_PROBE_GAP - 1e-12));
    flags.insert(
        "c6_steering_efficacy".into(),
        st.and_then(|st| st.native_mem_to_gen.zip(st.baseline_mem_to_gen)).map(|(n, b)| {
            n >= MIN_NATIVE_SUCCESS && n - b >= MIN_NATIVE_MARGIN - 1e-12 && b <= MAX_BASELINE_SUCCESS
        }),
    );
    flags.insert(
        "c7_retrain_transfer".into(),
        st.and_then(|st| st.retrain_mem_to_gen.zip(st.retrain_baseline_mem_to_gen))
            .map(|(t, b)| t > b && t - b >= MIN_RETRAIN_MARGIN - 1e-12),
    );
    flags.insert(
        "c8_cross_task".into(),
        st.filter(|st| st.cross_task.main_to_cross.is_some() || st.cross_task.cross_to_main.is_some()).map(|st| {
            let c = &st.cross_task;
            let ran = c.main_to_cross.is_some() && c.cross_to_main.is_some();
            let beats = |v: Option<f64>, b: Option<f64>| v.zip(b).is_some_and(|(v, b)| v > b);
            ran && ((beats(c.main_to_cross, c.main_to_cross_baseline) && beats(c.cross_to_main, c.cross_to_main_baseline))
                || c.asymmetry.is_some())
        }),
    );
    flags
}

fn copy_into(src: &Path, dst: &Path) -> CliResult<()> {
    let bytes = std::fs::read(src).map_err(|e| CliError::io(src, e))?;
    memgen_core::model::write_atomic(dst, &bytes)?;
    Ok(())
}

/// Builds the summary from the manifest's verified artifacts. Sections whose
/// stage is missing or stale are marked absent.
pub fn build_summary(p: &Pipeline) -> CliResult<Summary> {
    let out = &p.out;
    let ok = |s: Stage| p.manifest.verified(out, s).is_ok();
    let mut sections = BTreeMap::new();
    for s in [Stage::Train, Stage::Capture, Stage::Analyze, Stage::Probe, Stage::Steer] {
        sections.insert(s.name().to_string(), ok(s));
    }
    let roles = [Role::Main, Role::Retrain, Role::Cross];

    let training = if ok(Stage::Train) {
        let mut v = Vec::new();
        for role in roles {
            if let Ok((_, run)) = p.load_checkpoint(role) {
                let e = run.last_eval;
                v.push(TrainingSummary {
                    role,
                    task: run.task,
                    steps: run.steps,
                    eval_gen_frac: e.frac(BehaviorLabel::Gen),
                    eval_mem_frac: e.frac(BehaviorLabel::Mem),
                    eval_other_frac: e.frac(BehaviorLabel::Other),
                });
            }
        }
        Some(v)
    } else {
        None
    };

    let capture = if ok(Stage::Capture) {
        let mut v = Vec::new();
        for role in roles {
            if let Ok(path) = p.manifest.artifact(out, Stage::Capture, &format!("{}.yield", role.name())) {
                let y: YieldStats = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?)?;
                v.push(CaptureSummary { role, collected: y.collected, attempts: y.attempts, target: y.target, duplicates: y.duplicates, yield_rate: y.yield_rate() });
            }
        }
        Some(v)
    } else {
        None
    };

    let depth = if ok(Stage::Analyze) {
        let mut m = BTreeMap::new();
        for role in roles {
            if let Ok((nmd, _)) = p.load_stats(role) {
                m.insert(role.name().to_string(), depth_concentration(&nmd, DEPTH_TOP_FRACTION));
            }
        }
        Some(m)
    } else {
        None
    };

    let probes = if ok(Stage::Probe) {
        let path = p.manifest.artifact(out, Stage::Probe, "main.accuracy")?;
        let rows = parse_probe_report(&std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?)?;
        let acc: Vec<f64> = rows.iter().map(|r| r.1).collect();
        match (acc.first(), acc.last()) {
            (Some(&first), Some(&last)) => Some(ProbeSummary { gap: last - first, first_layer: first, last_layer: last, test_accuracy_by_layer: acc }),
            _ => None,
        }
    } else {
        None
    };

    let steering = if ok(Stage::Steer) {
        let path = p.manifest.artifact(out, Stage::Steer, "reports")?;
        let o: SteerOutcome = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?)?;
        Some(steering_summary(&o))
    } else {
        None
    };

    let mut s = Summary {
        task: p.cfg.task,
        master_seed: p.cfg.master_seed,
        sections,
        training,
        capture,
        depth_concentration: depth,
        probes,
        steering,
        acceptance: BTreeMap::new(),
    };
    s.acceptance = acceptance(&s);
    Ok(s)
}

/// Writes `report/`: heatmaps, probe accuracy by layer, behavior-shift
/// tables, grid tables, and `summary.json`.
pub fn write_report(p: &Pipeline) -> CliResult<()> {
    let out = &p.out;
    let dir = out.join("report");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let copies: [(Stage, &str, &str); 7] = [
        (Stage::Analyze, "main.heatmap", "heatmap_main.csv"),
        (Stage::Analyze, "cross.heatmap", "heatmap_cross.csv"),
        (Stage::Probe, "main.accuracy", "probe_accuracy.csv"),
        (Stage::Steer, "reports_csv", "behavior_shift.csv"),
        (Stage::Steer, "main.grid_csv", "grid_main.csv"),
        (Stage::Steer, "cross.grid_csv", "grid_cross.csv"),
        (Stage::Steer, "reports", "behavior_shift.json"),
    ];
    for (stage, key, name) in copies {
        match p.manifest.artifact(out, stage, key) {
            Ok(src) => copy_into(&src, &dir.join(name))?,
            Err(_) => {
                let stale = dir.join(name);
                if stale.exists() {
                    std::fs::remove_file(&stale).map_err(|e| CliError::io(&stale, e))?;
                }
            }
        }
    }
    let summary = build_summary(p)?;
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    memgen_core::model::write_atomic(&dir.join("summary.json"), text.as_bytes())?;
    for (k, v) in &summary.acceptance {
        log::info!("acceptance {k}: {}", v.map_or("absent".into(), |b| if b { "pass".to_string() } else { "fail".to_string() }));
    }
    Ok(())
}

/// Wall-clock seconds for the main model's training plus capture, when both
/// were timed in this output directory.
pub fn toy_run_seconds(out: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(out.join(TIMINGS_FILE)).ok()?;
    let t: BTreeMap<String, f64> = serde_json::from_str(&text).ok()?;
    Some(t.get("train.main")? + t.get("capture.main")?)
}

/// Recomputes the summary and fails with the list of unmet flags.
pub fn verify(p: &Pipeline) -> CliResult<Summary> {
    let s = build_summary(p)?;
    let mut failures = s.failures();
    if let Some(secs) = toy_run_seconds(&p.out) {
        if secs >= MAX_TOY_SECONDS {
            failures.push(format!("c4_runtime={secs:.0}s"));
        }
    }
    if failures.is_empty() {
        Ok(s)
    } else {
        Err(CliError::AcceptanceFailed(failures.join(", ")))
    }
}
