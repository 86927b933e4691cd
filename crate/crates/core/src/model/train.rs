//! Training loop, batch production, and the behavior monitor that decides
//! when to stop.

use std::io::Write;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::infer::{generate, Generation, TapHook};
use super::optim::{clip_global_norm, Adam};
use super::transformer::{Model, TokenBatch};
use crate::datagen::tokenizer::PAD;
use crate::datagen::{classify_output, BehaviorLabel, Example, TaskConfig, Vocab};
use crate::error::{Error, Result};
use crate::rng::indexed_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_betas: (f64, f64),
    pub stop_mem_frac: f64,
    pub stop_gen_frac: f64,
    pub eval_interval: u64,
    pub eval_set_size: usize,
    pub max_steps: u64,
    /// Linear learning-rate warmup length; 0 disables warmup.
    #[serde(default)]
    pub warmup_steps: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    #[serde(default)]
    pub grad_clip: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub loss_reduction: LossReduction,
}

/// How per-token losses are pooled within a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over all supervised tokens.
    #[default]
    Token,
    /// Mean over sequences of each sequence's token mean, so short targets
    /// are not drowned out by long ones.
    Sequence,
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            batch_size: 32,
            adam_betas: (0.9, 0.999),
            stop_mem_frac: 0.2,
            stop_gen_frac: 0.2,
            eval_interval: 500,
            eval_set_size: 500,
            max_steps: 200_000,
            warmup_steps: 0,
            grad_clip: 0.0,
            adam_eps: default_adam_eps(),
            loss_reduction: LossReduction::Token,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam_betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.stop_mem_frac) || !(0.0..=1.0).contains(&self.stop_gen_frac) {
            return bad("stop fractions must lie in [0, 1]");
        }
        if self.eval_interval == 0 || self.eval_set_size == 0 {
            return bad("eval_interval and eval_set_size must be positive");
        }
        if self.grad_clip < 0.0 || !(self.adam_eps > 0.0) {
            return bad("grad_clip must be >= 0 and adam_eps > 0");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// Encodes examples as a right-padded next-token batch supervised on the
/// target span and the closing `<eos>`.
pub fn encode_batch(vocab: &Vocab, examples: &[Example], reduction: LossReduction) -> Result<TokenBatch> {
    let seqs = examples
        .iter()
        .map(|ex| vocab.encode_pair(&ex.input_text, &ex.target_text))
        .collect::<Result<Vec<_>>>()?;
    let batch = TokenBatch::from_sequences(&seqs, PAD)?;
    Ok(match reduction {
        LossReduction::Token => batch,
        LossReduction::Sequence => batch.weight_per_sequence(),
    })
}

/// The examples of training batch `index`. Batches depend only on the data
/// seed and the index, so a resumed run sees the same stream.
pub fn batch_examples(task: &TaskConfig, data_seed: u64, index: u64, batch_size: usize) -> Result<Vec<Example>> {
    let mut rng = indexed_rng(data_seed, index);
    (0..batch_size).map(|_| task.train_example(&mut rng)).collect()
}

/// Generates upcoming training batches on a background thread.
pub struct BatchStream {
    rx: Receiver<Result<TokenBatch>>,
    _worker: JoinHandle<()>,
}

impl BatchStream {
    pub fn spawn(
        task: TaskConfig,
        vocab: Vocab,
        data_seed: u64,
        start: u64,
        batch_size: usize,
        reduction: LossReduction,
        depth: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let worker = std::thread::spawn(move || {
            for index in start.. {
                let batch = batch_examples(&task, data_seed, index, batch_size)
                    .and_then(|exs| encode_batch(&vocab, &exs, reduction));
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        BatchStream { rx, _worker: worker }
    }

    pub fn next_batch(&self) -> Result<TokenBatch> {
        self.rx
            .recv()
            .map_err(|_| Error::Config("batch producer stopped".into()))?
    }
}

/// Model plus optimizer state and the position in the data stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Completed optimizer steps; also the index of the next batch.
    pub step: u64,
    pub data_seed: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, data_seed: u64) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&model.params, config.adam_betas, config.adam_eps);
        Ok(Trainer { model, optimizer, config, step: 0, data_seed })
    }

    /// One Adam step; returns the loss before the update.
    pub fn train_step(&mut self, batch: &TokenBatch) -> Result<f32> {
        let (loss, mut grads) = self.model.loss_and_grads(batch)?;
        if !loss.is_finite() {
            return Err(Error::NanLoss {
                step: self.step,
                detail: format!("loss {loss} on a {}x{} batch", batch.batch, batch.seq),
            });
        }
        let norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NanLoss { step: self.step, detail: format!("gradient norm {norm}") });
        }
        let lr = self.config.lr_at(self.step) as f32;
        self.optimizer.update(&mut self.model.params, &grads, lr);
        self.step += 1;
        Ok(loss)
    }

    pub fn train_on_examples(&mut self, vocab: &Vocab, examples: &[Example]) -> Result<f32> {
        let batch = encode_batch(vocab, examples, self.config.loss_reduction)?;
        self.train_step(&batch)
    }

    pub fn checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            train_config: self.config.clone(),
            step: self.step,
            data_seed: self.data_seed,
            metadata,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Trainer {
            model: ck.model,
            optimizer: ck.optimizer,
            config: ck.train_config,
            step: ck.step,
            data_seed: ck.data_seed,
        }
    }
}

/// Greedy continuation of an example's prompt, decoded to text.
pub fn complete(
    model: &Model<f32>,
    vocab: &Vocab,
    ex: &Example,
    max_new: usize,
    hook: Option<&dyn TapHook>,
) -> Result<(String, Generation)> {
    let prompt = vocab.encode_prompt(&ex.input_text)?;
    let g = generate(model, &prompt, max_new, hook, None)?;
    Ok((vocab.decode(g.generated()), g))
}

/// Token budget for a completion: the longest correct answer plus `<eos>`.
pub fn answer_budget(task: &TaskConfig) -> usize {
    task.max_answer_tokens() + 1
}

/// Counts of each behavior over an evaluation set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorCounts {
    pub gen: usize,
    pub mem: usize,
    pub other: usize,
}

impl BehaviorCounts {
    pub fn n(&self) -> usize {
        self.gen + self.mem + self.other
    }

    pub fn add(&mut self, label: BehaviorLabel) {
        match label {
            BehaviorLabel::Gen => self.gen += 1,
            BehaviorLabel::Mem => self.mem += 1,
            BehaviorLabel::Other => self.other += 1,
        }
    }

    pub fn frac(&self, label: BehaviorLabel) -> f64 {
        let c = match label {
            BehaviorLabel::Gen => self.gen,
            BehaviorLabel::Mem => self.mem,
            BehaviorLabel::Other => self.other,
        };
        if self.n() == 0 {
            0.0
        } else {
            c as f64 / self.n() as f64
        }
    }
}

/// Classifies the greedy output of every example, in order.
pub fn classify_all(
    model: &Model<f32>,
    vocab: &Vocab,
    examples: &[Example],
    max_new: usize,
    hook: Option<&dyn TapHook>,
) -> Result<Vec<BehaviorLabel>> {
    examples
        .par_iter()
        .map(|ex| {
            let (text, _) = complete(model, vocab, ex, max_new, hook)?;
            classify_output(ex, &text)
        })
        .collect()
}

pub fn evaluate_behavior(model: &Model<f32>, vocab: &Vocab, examples: &[Example], max_new: usize) -> Result<BehaviorCounts> {
    let mut counts = BehaviorCounts::default();
    for label in classify_all(model, vocab, examples, max_new, None)? {
        counts.add(label);
    }
    Ok(counts)
}

/// Outcome of [`train_until_dual_behavior`].
#[derive(Clone, Debug, PartialEq)]
pub struct DualBehaviorRun {
    pub trainer: Trainer,
    pub last_eval: BehaviorCounts,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,eval_gen_frac,eval_mem_frac,eval_other_frac";

/// Trains until the monitor set shows both behaviors at or above the stop
/// fractions, evaluating every `eval_interval` steps. Each evaluation
/// appends a row to `log` with the mean training loss since the previous one.
pub fn train_until_dual_behavior(
    mut trainer: Trainer,
    task: &TaskConfig,
    vocab: &Vocab,
    eval_set: &[Example],
    log: &mut dyn Write,
) -> Result<DualBehaviorRun> {
    if eval_set.is_empty() {
        return Err(Error::EmptyEvalSet("behavior monitor has no examples".into()));
    }
    let cfg = trainer.config.clone();
    let io = |e| Error::io("training log", e);
    writeln!(log, "{TRAIN_LOG_HEADER}").map_err(io)?;
    let stream = BatchStream::spawn(task.clone(), vocab.clone(), trainer.data_seed, trainer.step, cfg.batch_size, cfg.loss_reduction, 4);
    let budget = answer_budget(task);
    let mut loss_sum = 0.0f64;
    let mut loss_n = 0u64;
    let mut last = BehaviorCounts::default();
    while trainer.step < cfg.max_steps {
        let batch = stream.next_batch()?;
        loss_sum += f64::from(trainer.train_step(&batch)?);
        loss_n += 1;
        if trainer.step % cfg.eval_interval == 0 {
            last = evaluate_behavior(&trainer.model, vocab, eval_set, budget)?;
            let (g, m, o) = (
                last.frac(BehaviorLabel::Gen),
                last.frac(BehaviorLabel::Mem),
                last.frac(BehaviorLabel::Other),
            );
            let mean = loss_sum / loss_n.max(1) as f64;
            writeln!(log, "{},{mean:.6},{g:.6},{m:.6},{o:.6}", trainer.step).map_err(io)?;
            log::info!("step {} loss {mean:.4} gen {g:.3} mem {m:.3} other {o:.3}", trainer.step);
            loss_sum = 0.0;
            loss_n = 0;
            if m >= cfg.stop_mem_frac && g >= cfg.stop_gen_frac {
                return Ok(DualBehaviorRun { trainer, last_eval: last });
            }
        }
    }
    Err(Error::BudgetExceeded {
        steps: trainer.step,
        gen_frac: last.frac(BehaviorLabel::Gen),
        mem_frac: last.frac(BehaviorLabel::Mem),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::ArithConfig;
    use crate::model::transformer::ModelConfig;

    fn toy_task() -> TaskConfig {
        TaskConfig::Arithmetic(ArithConfig::generate_with(4, [1, 9], 3, 0.2, false).unwrap())
    }

    fn toy_trainer(task: &TaskConfig, seed: u64, lr: f64) -> Trainer {
        let cfg = ModelConfig {
            n_layers: 1,
            hidden_size: 16,
            n_heads: 2,
            vocab_size: task.vocab().len(),
            max_seq_len: task.max_sequence_len(),
            seed,
        };
        let tc = TrainConfig { learning_rate: lr, batch_size: 8, eval_interval: 5, eval_set_size: 8, max_steps: 20, ..Default::default() };
        Trainer::new(Model::init(cfg).unwrap(), tc, seed).unwrap()
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let task = toy_task();
        let vocab = task.vocab();
        let mut ok = 0;
        for seed in 0..20 {
            let mut t = toy_trainer(&task, seed, 1e-3);
            let exs = batch_examples(&task, seed, 0, 8).unwrap();
            let batch = encode_batch(&vocab, &exs, LossReduction::Token).unwrap();
            let l0 = t.train_step(&batch).unwrap();
            let l1 = t.train_step(&batch).unwrap();
            let l2 = t.model.loss(&batch).unwrap();
            if l1 <= l0 && l2 <= l1 {
                ok += 1;
            }
        }
        assert!(ok >= 19, "loss decreased in only {ok}/20 trials");
    }

    #[test]
    fn training_is_deterministic() {
        let task = toy_task();
        let vocab = task.vocab();
        let run = || {
            let mut t = toy_trainer(&task, 1, 1e-3);
            (0..5)
                .map(|i| {
                    let exs = batch_examples(&task, 1, i, 8).unwrap();
                    t.train_on_examples(&vocab, &exs).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_thresholds_stop_at_first_eval() {
        let task = toy_task();
        let vocab = task.vocab();
        let mut t = toy_trainer(&task, 2, 1e-3);
        t.config.stop_gen_frac = 0.0;
        t.config.stop_mem_frac = 0.0;
        let mut rng = crate::rng::rng_from_seed(5);
        let eval: Vec<Example> = (0..8).map(|_| task.probe_example(&mut rng).unwrap()).collect();
        let mut log = Vec::new();
        let run = train_until_dual_behavior(t, &task, &vocab, &eval, &mut log).unwrap();
        assert_eq!(run.trainer.step, 5);
        assert_eq!(run.last_eval.n(), 8);
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(TRAIN_LOG_HEADER));
    }

    #[test]
    fn unreachable_thresholds_exceed_budget() {
        let task = toy_task();
        let vocab = task.vocab();
        let mut t = toy_trainer(&task, 2, 1e-3);
        t.config.stop_gen_frac = 1.0;
        t.config.stop_mem_frac = 1.0;
        let mut rng = crate::rng::rng_from_seed(5);
        let eval: Vec<Example> = (0..4).map(|_| task.probe_example(&mut rng).unwrap()).collect();
        let err = train_until_dual_behavior(t, &task, &vocab, &eval, &mut Vec::new()).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { steps: 20, .. }));
    }

    #[test]
    fn eval_fractions_partition() {
        let task = toy_task();
        let vocab = task.vocab();
        let t = toy_trainer(&task, 3, 1e-3);
        let mut rng = crate::rng::rng_from_seed(1);
        let eval: Vec<Example> = (0..10).map(|_| task.probe_example(&mut rng).unwrap()).collect();
        let c = evaluate_behavior(&t.model, &vocab, &eval, answer_budget(&task)).unwrap();
        let total = c.frac(BehaviorLabel::Gen) + c.frac(BehaviorLabel::Mem) + c.frac(BehaviorLabel::Other);
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(c.n(), 10);
    }
}
