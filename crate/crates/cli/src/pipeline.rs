//! Stage implementations and the orchestration around them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use memgen_core::analysis::{
    compute_correlation, compute_nmd, export_heatmap, probe_report_csv, read_stats, train_all_probes, write_stats,
};
use memgen_core::capture::{build_pairwise_dataset, write_index, PairDataset};
use memgen_core::datagen::{read_jsonl, write_jsonl, Example, TaskConfig, TaskKind};
use memgen_core::model::{
    answer_budget, file_sha256, sha256_hex, train_until_dual_behavior, write_atomic, BehaviorCounts, Checkpoint,
    Model, Trainer,
};
use memgen_core::rng::{derive_seed, indexed_rng, rng_from_seed};
use memgen_core::steer::{
    baseline_eval, grid_search, make_random_baseline, prefilter, reports_csv, transfer_eval, Direction, GridResult,
    InterventionSpec, Provenance, RandomBaselineSpec, StartingSets, SteerReport,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Stage};
use crate::error::{CliError, CliResult};
use crate::manifest::{input_hash, DirLock, RunManifest};
use crate::report::write_report;

pub const TIMINGS_FILE: &str = "timings.json";

/// The trained models of one experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// The primary task model.
    Main,
    /// The primary task retrained on a different data stream.
    Retrain,
    /// The other task on the same architecture.
    Cross,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Main => "main",
            Role::Retrain => "retrain",
            Role::Cross => "cross",
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// Metadata stored in each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedRun {
    pub role: Role,
    pub task: TaskKind,
    pub input_hash: String,
    pub steps: u64,
    pub last_eval: BehaviorCounts,
}

/// A steering report with the models it was measured on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledReport {
    /// Model whose statistics built the spec, or that a random baseline
    /// is matched to.
    pub spec_source: Role,
    pub target: Role,
    pub report: SteerReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarterCounts {
    pub role: Role,
    pub mem: usize,
    pub gen: usize,
    pub other: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerOutcome {
    pub selected_top_n_ratio: f64,
    pub selected_alpha: f64,
    pub starters: Vec<StarterCounts>,
    pub reports: Vec<LabeledReport>,
}

impl SteerOutcome {
    pub fn find(&self, source: Role, target: Role, direction: Direction, random: bool) -> Option<&SteerReport> {
        self.reports
            .iter()
            .find(|r| {
                r.spec_source == source
                    && r.target == target
                    && r.report.direction == direction
                    && (r.report.provenance == Provenance::Random) == random
            })
            .map(|r| &r.report)
    }
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
    _lock: DirLock,
}

impl Pipeline {
    pub fn open(cfg: ExperimentConfig, out: PathBuf) -> CliResult<Self> {
        cfg.validate()?;
        let lock = DirLock::acquire(&out)?;
        let manifest = RunManifest::load_or_default(&out)?;
        Ok(Pipeline { cfg, out, manifest, _lock: lock })
    }

    fn roles(&self) -> Vec<Role> {
        let mut r = vec![Role::Main];
        if self.cfg.transfer.retrain {
            r.push(Role::Retrain);
        }
        if self.cfg.transfer.cross_task {
            r.push(Role::Cross);
        }
        r
    }

    /// Roles whose activations are captured and analyzed.
    fn analyzed_roles(&self) -> Vec<Role> {
        self.roles().into_iter().filter(|r| *r != Role::Retrain).collect()
    }

    fn task_of(&self, role: Role) -> TaskKind {
        match role {
            Role::Main | Role::Retrain => self.cfg.task,
            Role::Cross => self.cfg.task.other(),
        }
    }

    fn tasks(&self) -> Vec<TaskKind> {
        let mut t = vec![self.cfg.task];
        if self.cfg.transfer.cross_task {
            t.push(self.cfg.task.other());
        }
        t
    }

    fn train_config(&self, role: Role) -> &memgen_core::model::TrainConfig {
        match role {
            Role::Cross => &self.cfg.transfer.cross_train,
            _ => &self.cfg.train,
        }
    }

    fn settings(&self, stage: Stage) -> CliResult<Value> {
        let c = &self.cfg;
        Ok(match stage {
            Stage::Datagen => json!({
                "master_seed": c.master_seed,
                "task": c.task,
                "arith": c.arith,
                "incontext": c.incontext,
                "datagen": c.datagen,
                "monitor_sizes": [c.train.eval_set_size, c.transfer.cross_train.eval_set_size],
                "cross_task": c.transfer.cross_task,
            }),
            Stage::Train => json!({ "master_seed": c.master_seed, "model": c.model, "train": c.train, "transfer": c.transfer }),
            Stage::Capture => json!({ "master_seed": c.master_seed, "capture": c.capture }),
            Stage::Analyze => json!({}),
            Stage::Probe => json!({ "master_seed": c.master_seed, "probe": c.probe }),
            Stage::Steer => json!({ "master_seed": c.master_seed, "steer": c.steer }),
        })
    }

    fn upstream(stage: Stage) -> &'static [Stage] {
        match stage {
            Stage::Datagen => &[],
            Stage::Train => &[Stage::Datagen],
            Stage::Capture => &[Stage::Datagen, Stage::Train],
            Stage::Analyze => &[Stage::Capture],
            Stage::Probe => &[Stage::Capture],
            Stage::Steer => &[Stage::Datagen, Stage::Train, Stage::Analyze],
        }
    }

    fn stage_input_hash(&self, stage: Stage) -> CliResult<String> {
        let mut up = BTreeMap::new();
        for &s in Self::upstream(stage) {
            up.insert(s.name().to_string(), self.manifest.hashes(&self.out, s)?);
        }
        input_hash(stage, &self.settings(stage)?, &up)
    }

    /// Runs one stage. Unless `force`, a stage whose inputs and artifacts
    /// are unchanged is skipped. Returns whether it ran.
    pub fn run_stage(&mut self, stage: Stage, force: bool) -> CliResult<bool> {
        let hash = self.stage_input_hash(stage)?;
        if !force && self.manifest.is_current(&self.out, stage, &hash) {
            log::info!("{}: up to date", stage.name());
            return Ok(false);
        }
        log::info!("{}: running", stage.name());
        let artifacts = match stage {
            Stage::Datagen => self.datagen()?,
            Stage::Train => self.train()?,
            Stage::Capture => self.capture()?,
            Stage::Analyze => self.analyze()?,
            Stage::Probe => self.probe()?,
            Stage::Steer => self.steer()?,
        };
        let refs: Vec<(&str, PathBuf)> = artifacts.iter().map(|(k, p)| (k.as_str(), p.clone())).collect();
        self.manifest.record(&self.out, stage, hash, &refs)?;
        self.manifest.save(&self.out)?;
        Ok(true)
    }

    pub fn run_all(&mut self) -> CliResult<()> {
        for stage in Stage::ALL {
            self.run_stage(stage, false)?;
        }
        self.report()
    }

    pub fn report(&self) -> CliResult<()> {
        write_report(self)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn artifact(&self, stage: Stage, key: &str) -> CliResult<PathBuf> {
        self.manifest.artifact(&self.out, stage, key)
    }

    fn record_timing(&self, key: &str, seconds: f64) -> CliResult<()> {
        let path = self.path(TIMINGS_FILE);
        let mut t: BTreeMap<String, f64> = if path.exists() { read_json(&path)? } else { BTreeMap::new() };
        t.insert(key.to_string(), seconds);
        write_json(&path, &t)
    }

    pub fn load_task(&self, kind: TaskKind) -> CliResult<TaskConfig> {
        read_json(&self.artifact(Stage::Datagen, &format!("{}.task", kind.as_str()))?)
    }

    pub fn load_examples(&self, kind: TaskKind, which: &str) -> CliResult<Vec<Example>> {
        Ok(read_jsonl(&self.artifact(Stage::Datagen, &format!("{}.{which}", kind.as_str()))?)?)
    }

    pub fn load_checkpoint(&self, role: Role) -> CliResult<(Checkpoint, TrainedRun)> {
        let ck = Checkpoint::load(&self.artifact(Stage::Train, &format!("{}.checkpoint", role.name()))?)?;
        let run: TrainedRun = serde_json::from_value(ck.metadata.clone())?;
        Ok((ck, run))
    }

    pub fn load_stats(&self, role: Role) -> CliResult<(memgen_core::analysis::NmdMap, memgen_core::analysis::CorrMap)> {
        Ok(read_stats(&self.artifact(Stage::Analyze, &format!("{}.stats", role.name()))?)?)
    }

    fn datagen(&self) -> CliResult<Vec<(String, PathBuf)>> {
        let seed = self.cfg.stage_seed(Stage::Datagen);
        let mut artifacts = Vec::new();
        let config_path = self.path("config.json");
        write_text(&config_path, &self.cfg.to_pretty_json()?)?;
        artifacts.push(("config".to_string(), config_path));
        for kind in self.tasks() {
            let task = self.cfg.task_config(kind)?;
            let dir = self.path(&format!("datagen/{}", kind.as_str()));
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            let task_path = dir.join("task.json");
            write_json(&task_path, &task)?;
            artifacts.push((format!("{}.task", kind.as_str()), task_path));
            let monitor_size = if kind == self.cfg.task { self.cfg.train.eval_set_size } else { self.cfg.transfer.cross_train.eval_set_size };
            let sets: [(&str, usize, bool); 3] = [
                ("train_sample", self.cfg.datagen.train_sample_size, false),
                ("monitor", monitor_size, true),
                ("steer_eval", self.cfg.datagen.steer_eval_size, true),
            ];
            for (name, n, probes) in sets {
                let stream = derive_seed(seed, &format!("{}/{name}", kind.as_str()));
                let examples = (0..n)
                    .map(|i| {
                        let mut rng = indexed_rng(stream, i as u64);
                        if probes { task.probe_example(&mut rng) } else { task.train_example(&mut rng) }
                    })
                    .collect::<memgen_core::Result<Vec<_>>>()?;
                let path = dir.join(format!("{name}.jsonl"));
                write_jsonl(&path, &examples)?;
                artifacts.push((format!("{}.{name}", kind.as_str()), path));
            }
        }
        Ok(artifacts)
    }

    fn train(&self) -> CliResult<Vec<(String, PathBuf)>> {
        let seed = self.cfg.stage_seed(Stage::Train);
        let mut artifacts = Vec::new();
        for role in self.roles() {
            let kind = self.task_of(role);
            let task = self.load_task(kind)?;
            let vocab = task.vocab();
            let monitor = self.load_examples(kind, "monitor")?;
            let model_cfg = self.cfg.model_config(kind)?;
            let train_cfg = self.train_config(role).clone();
            let data_seed = derive_seed(seed, &format!("data/{}", role.name()));
            let role_hash = sha256_hex(
                serde_json::to_string(&json!({
                    "model": model_cfg,
                    "train": train_cfg,
                    "task": task,
                    "monitor": file_sha256(&self.artifact(Stage::Datagen, &format!("{}.monitor", kind.as_str()))?)?,
                    "data_seed": data_seed,
                }))?
                .as_bytes(),
            );
            let dir = self.path(&format!("train/{}", role.name()));
            let ck_path = dir.join("checkpoint.bin");
            let log_path = dir.join("train_log.csv");
            let reuse = ck_path.exists()
                && log_path.exists()
                && Checkpoint::load(&ck_path)
                    .ok()
                    .and_then(|ck| serde_json::from_value::<TrainedRun>(ck.metadata).ok())
                    .is_some_and(|r| r.input_hash == role_hash);
            if reuse {
                log::info!("train {}: reusing checkpoint with matching inputs", role.name());
            } else {
                log::info!("train {}: {} on {} (L={}, d={})", role.name(), kind.as_str(), vocab.len(), model_cfg.n_layers, model_cfg.hidden_size);
                let started = Instant::now();
                let trainer = Trainer::new(Model::init(model_cfg)?, train_cfg, data_seed)?;
                let mut log_buf = Vec::new();
                let result = train_until_dual_behavior(trainer, &task, &vocab, &monitor, &mut log_buf);
                write_text(&log_path, &String::from_utf8_lossy(&log_buf))?;
                let run = result?;
                let meta = TrainedRun {
                    role,
                    task: kind,
                    input_hash: role_hash,
                    steps: run.trainer.step,
                    last_eval: run.last_eval,
                };
                run.trainer.checkpoint(serde_json::to_value(&meta)?).save(&ck_path)?;
                self.record_timing(&format!("train.{}", role.name()), started.elapsed().as_secs_f64())?;
            }
            artifacts.push((format!("{}.checkpoint", role.name()), ck_path));
            artifacts.push((format!("{}.log", role.name()), log_path));
        }
        Ok(artifacts)
    }

    fn capture(&self) -> CliResult<Vec<(String, PathBuf)>> {
        let seed = self.cfg.stage_seed(Stage::Capture);
        let mut artifacts = Vec::new();
        for role in self.analyzed_roles() {
            let kind = self.task_of(role);
            let task = self.load_task(kind)?;
            let ck_file = self.artifact(Stage::Train, &format!("{}.checkpoint", role.name()))?;
            let ck_hash = file_sha256(&ck_file)?;
            let role_seed = derive_seed(seed, role.name());
            let dir = self.path(&format!("capture/{}", role.name()));
            let pairs_path = dir.join("pairs.bin");
            let index_path = dir.join("pairs_index.jsonl");
            let yield_path = dir.join("yield.json");
            let stamp = sha256_hex(serde_json::to_string(&json!({ "ck": ck_hash, "capture": self.cfg.capture, "seed": role_seed }))?.as_bytes());
            let stamp_path = dir.join(".inputs");
            let reuse = [&pairs_path, &index_path, &yield_path].iter().all(|p| p.exists())
                && std::fs::read_to_string(&stamp_path).is_ok_and(|s| s == stamp);
            if reuse {
                log::info!("capture {}: reusing pairs with matching inputs", role.name());
            } else {
                let started = Instant::now();
                let ck = Checkpoint::load(&ck_file)?;
                let out = build_pairwise_dataset(
                    &ck.model,
                    &task.vocab(),
                    &task,
                    &ck_hash,
                    role_seed,
                    self.cfg.capture.target_pairs,
                    self.cfg.capture.max_attempts,
                    answer_budget(&task),
                )?;
                std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                out.dataset.save(&pairs_path)?;
                write_index(&index_path, &out.index)?;
                write_json(&yield_path, &out.stats)?;
                write_text(&stamp_path, &stamp)?;
                self.record_timing(&format!("capture.{}", role.name()), started.elapsed().as_secs_f64())?;
            }
            artifacts.push((format!("{}.pairs", role.name()), pairs_path));
            artifacts.push((format!("{}.index", role.name()), index_path));
            artifacts.push((format!("{}.yield", role.name()), yield_path));
        }
        Ok(artifacts)
    }

    fn analyze(&self) -> CliResult<Vec<(String, PathBuf)>> {
        let mut artifacts = Vec::new();
        for role in self.analyzed_roles() {
            let ds = PairDataset::load(&self.artifact(Stage::Capture, &format!("{}.pairs", role.name()))?)?;
            let nmd = compute_nmd(&ds)?;
            let corr = compute_correlation(&ds)?;
            let dir = self.path(&format!("analyze/{}", role.name()));
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            let stats = dir.join("stats.csv");
            let heat = dir.join("heatmap.csv");
            write_stats(&stats, &nmd, &corr)?;
            export_heatmap(&nmd, &heat)?;
            artifacts.push((format!("{}.stats", role.name()), stats));
            artifacts.push((format!("{}.heatmap", role.name()), heat));
        }
        Ok(artifacts)
    }

    fn probe(&self) -> CliResult<Vec<(String, PathBuf)>> {
        let ds = PairDataset::load(&self.artifact(Stage::Capture, "main.pairs")?)?;
        let results = train_all_probes(&ds, &self.cfg.probe_config())?;
        let path = self.path("probe/main/probe_accuracy.csv");
        write_text(&path, &probe_report_csv(&results))?;
        Ok(vec![("main.accuracy".to_string(), path)])
    }

    fn starters(&self, role: Role, model: &Model<f32>, task: &TaskConfig) -> CliResult<StartingSets> {
        let examples = self.load_examples(self.task_of(role), "steer_eval")?;
        let sets = prefilter(model, &task.vocab(), &examples, answer_budget(task))?;
        log::info!("steer {}: unsteered starts mem {} gen {} other {}", role.name(), sets.mem.len(), sets.gen.len(), sets.other);
        Ok(sets)
    }

    fn grid(&self, role: Role, model: &Model<f32>, task: &TaskConfig, starts: &StartingSets) -> CliResult<GridResult> {
        let (nmd, corr) = self.load_stats(role)?;
        let s = &self.cfg.steer;
        Ok(grid_search(model, &task.vocab(), &nmd, &corr, &s.top_n_grid, &s.alpha_grid, starts, s.n_eval, s.scope, answer_budget(task))?)
    }

    fn steer(&self) -> CliResult<Vec<(String, PathBuf)>> {
        let seed = self.cfg.stage_seed(Stage::Steer);
        let s = &self.cfg.steer;
        let dir = self.path("steer");
        let mut artifacts = Vec::new();
        let mut reports = Vec::new();
        let mut starters = Vec::new();

        struct Target {
            role: Role,
            model: Model<f32>,
            task: TaskConfig,
            starts: StartingSets,
        }
        let mut targets: Vec<Target> = Vec::new();
        for role in self.roles() {
            let (ck, _) = self.load_checkpoint(role)?;
            let task = self.load_task(self.task_of(role))?;
            let starts = self.starters(role, &ck.model, &task)?;
            starters.push(StarterCounts { role, mem: starts.mem.len(), gen: starts.gen.len(), other: starts.other });
            targets.push(Target { role, model: ck.model, task, starts });
        }

        // Own-statistics specs, selected by grid search on their own model.
        let mut specs: BTreeMap<&'static str, (InterventionSpec, RandomBaselineSpec)> = BTreeMap::new();
        let mut selected = (0.0, 0.0);
        for t in targets.iter().filter(|t| t.role != Role::Retrain) {
            let grid = self.grid(t.role, &t.model, &t.task, &t.starts)?;
            let cell = grid.selected().clone();
            if t.role == Role::Main {
                selected = (grid.selected_top_n_ratio, grid.selected_alpha);
            }
            let (nmd, corr) = self.load_stats(t.role)?;
            let spec = memgen_core::steer::build_spec(&nmd, &corr, Direction::TowardGen, cell.alpha, cell.top_n_ratio)?;
            let mut rng = rng_from_seed(derive_seed(seed, &format!("baseline/{}", t.role.name())));
            let baseline = make_random_baseline(&spec, &mut rng)?;
            let grid_json = dir.join(format!("grid_{}.json", t.role.name()));
            let grid_csv = dir.join(format!("grid_{}.csv", t.role.name()));
            let spec_path = dir.join(format!("spec_{}.json", t.role.name()));
            let base_path = dir.join(format!("baseline_{}.json", t.role.name()));
            write_json(&grid_json, &grid)?;
            write_text(&grid_csv, &grid_table(&grid))?;
            write_json(&spec_path, &spec)?;
            write_json(&base_path, &baseline)?;
            for (k, p) in [("grid", grid_json), ("grid_csv", grid_csv), ("spec", spec_path), ("baseline", base_path)] {
                artifacts.push((format!("{}.{k}", t.role.name()), p));
            }
            for r in [cell.to_gen, cell.to_mem] {
                reports.push(LabeledReport { spec_source: t.role, target: t.role, report: r });
            }
            specs.insert(t.role.name(), (spec, baseline));
        }

        let budget = |t: &Target| answer_budget(&t.task);
        for t in &targets {
            let vocab = t.task.vocab();
            // Baselines matched to the main spec, which every model receives.
            let (_, baseline) = &specs["main"];
            for dir_ in [Direction::TowardGen, Direction::TowardMem] {
                if let Some(r) = optional(baseline_eval(baseline, dir_, &t.model, &vocab, t.starts.for_direction(dir_), s.n_eval, s.scope, budget(t)))? {
                    reports.push(LabeledReport { spec_source: Role::Main, target: t.role, report: r });
                }
            }
            let transfers: Vec<(Role, Provenance)> = match t.role {
                Role::Main => specs.contains_key("cross").then_some((Role::Cross, Provenance::CrossTask)).into_iter().collect(),
                Role::Retrain => vec![(Role::Main, Provenance::RetrainedSeed)],
                Role::Cross => vec![(Role::Main, Provenance::CrossTask)],
            };
            for (src, prov) in transfers {
                let (spec, _) = &specs[src.name()];
                for dir_ in [Direction::TowardGen, Direction::TowardMem] {
                    let r = transfer_eval(&spec.with_direction(dir_), &t.model, &vocab, t.starts.for_direction(dir_), s.n_eval, s.scope, prov, budget(t));
                    if let Some(r) = optional(r)? {
                        reports.push(LabeledReport { spec_source: src, target: t.role, report: r });
                    }
                }
            }
            if t.role == Role::Main {
                if let Some((_, cross_baseline)) = specs.get("cross") {
                    // The cross-task spec's own matched baseline on the main model.
                    for dir_ in [Direction::TowardGen, Direction::TowardMem] {
                        let r = baseline_eval(cross_baseline, dir_, &t.model, &vocab, t.starts.for_direction(dir_), s.n_eval, s.scope, budget(t));
                        if let Some(r) = optional(r)? {
                            reports.push(LabeledReport { spec_source: Role::Cross, target: Role::Main, report: r });
                        }
                    }
                }
            }
        }

        let outcome = SteerOutcome { selected_top_n_ratio: selected.0, selected_alpha: selected.1, starters, reports };
        let json_path = dir.join("reports.json");
        let csv_path = dir.join("reports.csv");
        write_json(&json_path, &outcome)?;
        let plain: Vec<SteerReport> = outcome.reports.iter().map(|r| r.report.clone()).collect();
        write_text(&csv_path, &reports_csv(&plain))?;
        artifacts.push(("reports".to_string(), json_path));
        artifacts.push(("reports_csv".to_string(), csv_path));
        Ok(artifacts)
    }
}

/// Treats an empty starting set as a missing report rather than a failure.
fn optional(r: memgen_core::Result<SteerReport>) -> CliResult<Option<SteerReport>> {
    match r {
        Ok(r) => Ok(Some(r)),
        Err(memgen_core::Error::EmptyEvalSet(msg)) => {
            log::warn!("skipping evaluation: {msg}");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn grid_table(grid: &GridResult) -> String {
    let mut out = String::from("top_n_ratio,alpha,mem_to_gen_success,gen_to_mem_success,mean_success,selected\n");
    for c in &grid.cells {
        let sel = c.top_n_ratio == grid.selected_top_n_ratio && c.alpha == grid.selected_alpha;
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{}\n",
            c.top_n_ratio,
            c.alpha,
            c.to_gen.success_rate(),
            c.to_mem.success_rate(),
            c.mean_success,
            u8::from(sel)
        ));
    }
    out
}
