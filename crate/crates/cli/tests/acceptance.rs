//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Criteria 1-3 run in-process on tiny models. Criteria 4-8 read the report
//! of a toy arithmetic run in `runs/acceptance` (override with
//! `MEMGEN_ACCEPTANCE_DIR`); `run-all` is invoked first and skips every stage
//! whose inputs and artifacts are unchanged, so a warm cache costs seconds.
//! Criterion 9 runs the smoke config twice and compares artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use memgen_cli::report::{toy_run_seconds, Summary, MAX_TOY_SECONDS};
use memgen_core::analysis::{compute_correlation, compute_nmd};
use memgen_core::capture::{Fingerprint, PairDataset, PairRecord};
use memgen_core::datagen::TaskKind;
use memgen_core::model::gradcheck::check_gradients;
use memgen_core::model::{generate, Model, ModelConfig, TapHook, TapSite, TokenBatch};
use memgen_core::rng::rng_from_seed;
use memgen_core::steer::{apply_intervention, build_spec, Direction, Scope, SteeringHook};
use rand::Rng;

type Outcome = Result<String, String>;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for layers in [1, 2] {
        for width in [8, 16] {
            let cfg = ModelConfig { n_layers: layers, hidden_size: width, n_heads: 2, vocab_size: 9, max_seq_len: 8, seed: 17 };
            let model: Model<f64> = Model::init(cfg).map_err(|e| e.to_string())?;
            let batch = TokenBatch::from_sequences(&[(vec![1, 4, 5, 2, 6, 7, 3], 4), (vec![1, 8, 2, 5, 3], 3)], 0)
                .map_err(|e| e.to_string())?;
            let r = check_gradients(&model, &batch, 1e-4).map_err(|e| e.to_string())?;
            worst = worst.max(r.max_rel_err);
            detail.push(format!("L={layers} d={width}: {:.2e} over {}", r.max_rel_err, r.n_checked));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(worst < 1e-3 && secs < 120.0, format!("{} ({secs:.1}s)", detail.join(", ")))
}

fn synthetic_dataset(n: usize, layers: usize, width: usize, seed: u64) -> PairDataset {
    let mut rng = rng_from_seed(seed);
    let records = (0..n)
        .map(|i| {
            let mut side = |offset: f32| -> Vec<f32> {
                (0..layers * width)
                    .map(|k| offset * (k % 3) as f32 + rng.random_range(-2.0f32..2.0) * (1.0 + k as f32 / 10.0))
                    .collect()
            };
            let mem = side(0.0);
            let gen = side(0.7);
            PairRecord { pair_id: i as u64, task: TaskKind::Arithmetic, mem, gen }
        })
        .collect();
    let fingerprint = Fingerprint { checkpoint_hash: "synthetic".into(), n_layers: layers, width };
    PairDataset { fingerprint, records }
}

/// Two-pass reference: means first, then centered moments.
fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut cxy, mut cxx, mut cyy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        cxy += (a - mx) * (b - my);
        cxx += (a - mx) * (a - mx);
        cyy += (b - my) * (b - my);
    }
    if cxx == 0.0 || cyy == 0.0 {
        0.0
    } else {
        cxy / (cxx * cyy).sqrt()
    }
}

fn statistics_oracles() -> Outcome {
    let (layers, width) = (3, 12);
    let ds = synthetic_dataset(1000, layers, width, 99);
    let nmd = compute_nmd(&ds).map_err(|e| e.to_string())?;
    let corr = compute_correlation(&ds).map_err(|e| e.to_string())?;
    let mut nmd_err = 0.0f64;
    let mut corr_err = 0.0f64;
    let mut max_abs_rho = 0.0f64;
    for k in 0..layers * width {
        let diffs: f64 = ds.records.iter().map(|r| f64::from(r.gen[k]) - f64::from(r.mem[k])).sum();
        nmd_err = nmd_err.max((diffs / ds.records.len() as f64 - nmd.values[k]).abs());
        let mut x = Vec::new();
        let mut y = Vec::new();
        for r in &ds.records {
            x.push(f64::from(r.gen[k]));
            y.push(1.0);
            x.push(f64::from(r.mem[k]));
            y.push(0.0);
        }
        corr_err = corr_err.max((naive_pearson(&x, &y) - corr.values[k]).abs());
        max_abs_rho = max_abs_rho.max(corr.values[k].abs());
    }
    let mut swapped = ds.clone();
    for r in &mut swapped.records {
        std::mem::swap(&mut r.mem, &mut r.gen);
    }
    let nmd_swapped = compute_nmd(&swapped).map_err(|e| e.to_string())?;
    let antisymmetric = nmd.values.iter().zip(&nmd_swapped.values).all(|(a, b)| *a == -*b);
    check(
        nmd_err < 1e-9 && corr_err < 1e-9 && max_abs_rho <= 1.0 + 1e-12 && antisymmetric,
        format!("nmd err {nmd_err:.1e}, corr err {corr_err:.1e}, max |rho| {max_abs_rho:.4}, swap antisymmetric {antisymmetric}"),
    )
}

/// Records each tap vector before and after the wrapped hook.
struct DiffRecorder<'a> {
    inner: &'a SteeringHook,
    seen: std::sync::Mutex<Vec<(TapSite, Vec<f32>, Vec<f32>)>>,
}

impl TapHook for DiffRecorder<'_> {
    fn apply(&self, site: TapSite, h: &mut [f32]) {
        let before = h.to_vec();
        self.inner.apply(site, h);
        self.seen.lock().unwrap().push((site, before, h.to_vec()));
    }
}

fn steering_identity_and_locality() -> Outcome {
    let (layers, width) = (2, 16);
    let cfg = ModelConfig { n_layers: layers, hidden_size: width, n_heads: 2, vocab_size: 12, max_seq_len: 24, seed: 5 };
    let model: Model<f32> = Model::init(cfg.clone()).map_err(|e| e.to_string())?;
    let ds = synthetic_dataset(200, layers, width, 3);
    let nmd = compute_nmd(&ds).map_err(|e| e.to_string())?;
    let corr = compute_correlation(&ds).map_err(|e| e.to_string())?;
    let spec = build_spec(&nmd, &corr, Direction::TowardGen, 0.0, 0.25).map_err(|e| e.to_string())?;
    let zero = SteeringHook::from_spec(&spec, &cfg, Scope::AllPositions).map_err(|e| e.to_string())?;

    let mut rng = rng_from_seed(11);
    let mut identical = 0;
    let prompts: Vec<Vec<u32>> = (0..200)
        .map(|_| {
            let len = rng.random_range(2..10);
            std::iter::once(1).chain((1..len).map(|_| rng.random_range(4..12))).collect()
        })
        .collect();
    for p in &prompts {
        let plain = generate(&model, p, 10, None, None).map_err(|e| e.to_string())?;
        let steered = generate(&model, p, 10, Some(&zero), None).map_err(|e| e.to_string())?;
        identical += usize::from(plain.tokens == steered.tokens);
    }

    // nonzero spec: each tap changes exactly at the listed coordinates
    let live = spec.with_alpha(3.0);
    let hook = SteeringHook::from_spec(&live, &cfg, Scope::AllPositions).map_err(|e| e.to_string())?;
    let expected: Vec<Vec<usize>> = (0..layers)
        .map(|l| {
            let mut v: Vec<usize> = live.shifts().iter().filter(|s| s.0 == l && s.2 != 0.0).map(|s| s.1).collect();
            v.sort_unstable();
            v
        })
        .collect();
    let rec = DiffRecorder { inner: &hook, seen: Default::default() };
    for p in prompts.iter().take(20) {
        generate(&model, p, 6, Some(&rec), None).map_err(|e| e.to_string())?;
    }
    let mut local = true;
    for (site, before, after) in rec.seen.into_inner().unwrap() {
        let changed: Vec<usize> = (0..width).filter(|&j| before[j] != after[j]).collect();
        local &= changed == expected[site.layer];
    }
    let mut direct = true;
    for l in 0..layers {
        let base: Vec<f32> = (0..width).map(|j| j as f32 * 0.1).collect();
        let mut h = base.clone();
        apply_intervention(&mut h, &live, l).map_err(|e| e.to_string())?;
        let changed: Vec<usize> = (0..width).filter(|&j| h[j] != base[j]).collect();
        direct &= changed == expected[l];
    }
    let n_listed: usize = expected.iter().map(Vec::len).sum();
    check(
        identical == prompts.len() && local && direct && n_listed > 0,
        format!("alpha=0 identical {identical}/{}; {n_listed} listed coords, hook-local {local}, direct-local {direct}", prompts.len()),
    )
}

fn memgen(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_memgen"))
        .current_dir(workspace_root())
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into()))
        .status()
        .map_err(|e| format!("spawn memgen: {e}"))?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("memgen {} exited with {status}", args.join(" ")))
    }
}

fn toy_run() -> Result<(PathBuf, Summary), String> {
    let out = std::env::var_os("MEMGEN_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("runs/acceptance"));
    memgen(&["--config", "configs/toy_arith.json", "run-all"], &out)?;
    let path = out.join("report/summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let summary = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok((out, summary))
}

fn flag(s: &Summary, key: &str) -> bool {
    s.acceptance.get(key).copied().flatten() == Some(true)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{:.1}%", 100.0 * v))
}

fn end_to_end(out: &Path, s: &Summary) -> Outcome {
    let secs = toy_run_seconds(out);
    let train = s.training.as_ref().and_then(|t| t.first());
    let pairs = s.capture.as_ref().and_then(|c| c.first()).map_or(0, |c| c.collected);
    let fast = secs.is_some_and(|t| t < MAX_TOY_SECONDS);
    check(
        flag(s, "c4_dual_behavior") && flag(s, "c4_pairs") && fast,
        format!(
            "monitor gen {} mem {}, {pairs} distinct divergent pairs, train+capture {}",
            fmt(train.map(|t| t.eval_gen_frac)),
            fmt(train.map(|t| t.eval_mem_frac)),
            secs.map_or("untimed".into(), |t| format!("{:.0}s", t))
        ),
    )
}

fn depth_structure(s: &Summary) -> Outcome {
    let depth = s.depth_concentration.as_ref().and_then(|d| d.get("main")).copied();
    let probes = s.probes.as_ref();
    check(
        flag(s, "c5_depth_concentration") && flag(s, "c5_probe_gap"),
        format!(
            "deeper-half share {}, probe acc first {} last {}",
            fmt(depth),
            fmt(probes.map(|p| p.first_layer)),
            fmt(probes.map(|p| p.last_layer))
        ),
    )
}

fn steering_efficacy(s: &Summary) -> Outcome {
    let st = s.steering.as_ref();
    check(
        flag(s, "c6_steering_efficacy"),
        format!(
            "topN {} alpha {}: mem->gen {}, random baseline {}",
            st.map_or(0.0, |s| s.selected_top_n_ratio),
            st.map_or(0.0, |s| s.selected_alpha),
            fmt(st.and_then(|s| s.native_mem_to_gen)),
            fmt(st.and_then(|s| s.baseline_mem_to_gen))
        ),
    )
}

fn retrain_transfer(s: &Summary) -> Outcome {
    let st = s.steering.as_ref();
    check(
        flag(s, "c7_retrain_transfer"),
        format!(
            "retrained model mem->gen {}, random baseline {}",
            fmt(st.and_then(|s| s.retrain_mem_to_gen)),
            fmt(st.and_then(|s| s.retrain_baseline_mem_to_gen))
        ),
    )
}

fn cross_task(s: &Summary) -> Outcome {
    let c = s.steering.as_ref().map(|s| s.cross_task.clone()).unwrap_or_default();
    check(
        flag(s, "c8_cross_task"),
        format!(
            "arith->incontext {} (baseline {}), incontext->arith {} (baseline {}), asymmetry {}",
            fmt(c.main_to_cross),
            fmt(c.main_to_cross_baseline),
            fmt(c.cross_to_main),
            fmt(c.cross_to_main_baseline),
            c.asymmetry.map_or("n/a".into(), |a| format!("{:+.1} pts", 100.0 * a))
        ),
    )
}

/// Artifacts that must match byte-for-byte across identical runs.
const REPRODUCIBLE: &[&str] = &[
    "analyze/main/stats.csv",
    "analyze/main/heatmap.csv",
    "probe/main/probe_accuracy.csv",
    "steer/reports.csv",
    "report/summary.json",
    "report/behavior_shift.csv",
    "report/heatmap_main.csv",
    "report/probe_accuracy.csv",
];

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [tmp.path().join("a"), tmp.path().join("b")];
    for out in &runs {
        memgen(&["--config", "configs/smoke.json", "run-all"], out)?;
    }
    let mut differing = Vec::new();
    for rel in REPRODUCIBLE {
        let a = std::fs::read(runs[0].join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        let b = std::fs::read(runs[1].join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        if a != b {
            differing.push(*rel);
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts identical across two smoke runs", REPRODUCIBLE.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("C1 gradient correctness", gradient_correctness()),
        ("C2 statistics oracles", statistics_oracles()),
        ("C3 steering identity and locality", steering_identity_and_locality()),
    ];
    match toy_run() {
        Ok((out, s)) => {
            results.push(("C4 end-to-end toy run", end_to_end(&out, &s)));
            results.push(("C5 depth structure", depth_structure(&s)));
            results.push(("C6 steering efficacy", steering_efficacy(&s)));
            results.push(("C7 intra-task transfer", retrain_transfer(&s)));
            results.push(("C8 inter-task transfer", cross_task(&s)));
        }
        Err(e) => {
            for name in ["C4 end-to-end toy run", "C5 depth structure", "C6 steering efficacy", "C7 intra-task transfer", "C8 inter-task transfer"] {
                results.push((name, Err(format!("toy run failed: {e}"))));
            }
        }
    }
    results.push(("C9 reproducibility", reproducibility()));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
