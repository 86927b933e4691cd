//! Decoder-only transformer: configuration, parameters, and the
//! differentiable forward pass.
//!
//! Each block is `h = LN1(x + Attn(x))`, `out = LN2(h + MLP(h))`. The output
//! of `LN2` is the tap point: it is what the next block (or, for the last
//! block, the tied unembedding) consumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("hidden_size", self.hidden_size),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.hidden_size
    }

    /// Rejects token ids outside the vocabulary and sequences longer than
    /// `max_seq_len`.
    pub fn check_tokens(&self, ids: &[u32], seq_len: usize) -> Result<()> {
        if seq_len > self.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocab of {}", self.vocab_size)));
        }
        Ok(())
    }
}

/// A named row-major parameter matrix (vectors are `1 x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InitKind {
    Normal,
    Zeros,
    Ones,
}

/// Position of each per-block parameter within a block's slice of
/// [`Model::params`].
pub mod slot {
    pub const QKV_W: usize = 0;
    pub const QKV_B: usize = 1;
    pub const PROJ_W: usize = 2;
    pub const PROJ_B: usize = 3;
    pub const LN1_G: usize = 4;
    pub const LN1_B: usize = 5;
    pub const FC_W: usize = 6;
    pub const FC_B: usize = 7;
    pub const OUT_W: usize = 8;
    pub const OUT_B: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const PER_LAYER: usize = 12;
}

pub const TOKEN_EMBEDDING: usize = 0;
pub const POSITION_EMBEDDING: usize = 1;
const GLOBAL_PARAMS: usize = 2;

fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize, InitKind)> {
    let (d, f) = (cfg.hidden_size, cfg.ffn_width());
    let mut out = vec![
        ("wte".to_string(), cfg.vocab_size, d, InitKind::Normal),
        ("wpe".to_string(), cfg.max_seq_len, d, InitKind::Normal),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("attn.qkv.weight"), d, 3 * d, InitKind::Normal),
            (p("attn.qkv.bias"), 1, 3 * d, InitKind::Zeros),
            (p("attn.proj.weight"), d, d, InitKind::Normal),
            (p("attn.proj.bias"), 1, d, InitKind::Zeros),
            (p("ln1.gain"), 1, d, InitKind::Ones),
            (p("ln1.bias"), 1, d, InitKind::Zeros),
            (p("mlp.fc.weight"), d, f, InitKind::Normal),
            (p("mlp.fc.bias"), 1, f, InitKind::Zeros),
            (p("mlp.out.weight"), f, d, InitKind::Normal),
            (p("mlp.out.bias"), 1, d, InitKind::Zeros),
            (p("ln2.gain"), 1, d, InitKind::Ones),
            (p("ln2.bias"), 1, d, InitKind::Zeros),
        ]);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
}

/// Tape handles produced by [`Model::forward_tape`].
pub struct ForwardVars {
    /// One leaf per entry of [`Model::params`].
    pub params: Vec<Var>,
    /// `(batch*seq) x vocab`.
    pub logits: Var,
    /// Tap output of every layer, `(batch*seq) x d`.
    pub taps: Vec<Var>,
}

impl<T: Real> Model<T> {
    /// Normal(0, `std`) weights, zero biases, unit layer-norm gains. Each
    /// tensor draws from a stream keyed by its name, so models that differ
    /// only in vocabulary size share every block weight.
    pub fn init_with_std(config: ModelConfig, std: f64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init std: {e}")))?;
        let params = layout(&config)
            .into_iter()
            .map(|(name, rows, cols, kind)| {
                let data = match kind {
                    InitKind::Zeros => vec![T::zero(); rows * cols],
                    InitKind::Ones => vec![T::one(); rows * cols],
                    InitKind::Normal => {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &name));
                        (0..rows * cols).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                    }
                };
                Param { name, rows, cols, data }
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        Self::init_with_std(config, INIT_STD)
    }

    /// Every parameter zero, including layer-norm gains.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = layout(&config)
            .into_iter()
            .map(|(name, rows, cols, _)| Param { name, rows, cols, data: vec![T::zero(); rows * cols] })
            .collect();
        Ok(Model { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn layer_param(&self, layer: usize, slot: usize) -> &Param<T> {
        &self.params[GLOBAL_PARAMS + layer * slot::PER_LAYER + slot]
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                    data: p.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Records the forward pass over `batch` right-padded sequences of
    /// length `seq` (`ids.len() == batch * seq`).
    pub fn forward_tape<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        ids: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<ForwardVars> {
        if ids.len() != batch * seq {
            return Err(Error::Shape(format!("{} ids for batch {batch} x seq {seq}", ids.len())));
        }
        self.config.check_tokens(ids, seq)?;
        let cfg = &self.config;
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(&p.data, p.rows, p.cols)).collect();
        let layer = |l: usize, s: usize| params[GLOBAL_PARAMS + l * slot::PER_LAYER + s];

        let tok = tape.embed(params[TOKEN_EMBEDDING], ids);
        let positions: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
        let pos = tape.embed(params[POSITION_EMBEDDING], &positions);
        let mut x = tape.add(tok, pos);
        let mut taps = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let qkv = tape.linear(x, layer(l, slot::QKV_W), Some(layer(l, slot::QKV_B)));
            let att = tape.causal_attention(qkv, batch, seq, cfg.n_heads);
            let proj = tape.linear(att, layer(l, slot::PROJ_W), Some(layer(l, slot::PROJ_B)));
            let r1 = tape.add(x, proj);
            let h = tape.layer_norm(r1, layer(l, slot::LN1_G), layer(l, slot::LN1_B));
            let fc = tape.linear(h, layer(l, slot::FC_W), Some(layer(l, slot::FC_B)));
            let act = tape.gelu(fc);
            let out = tape.linear(act, layer(l, slot::OUT_W), Some(layer(l, slot::OUT_B)));
            let r2 = tape.add(h, out);
            x = tape.layer_norm(r2, layer(l, slot::LN2_G), layer(l, slot::LN2_B));
            taps.push(x);
        }
        let logits = tape.linear_t(x, params[TOKEN_EMBEDDING]);
        Ok(ForwardVars { params, logits, taps })
    }

    /// Mean cross-entropy over positions with nonzero weight, and its
    /// gradient with respect to every parameter.
    pub fn loss_and_grads(&self, batch: &TokenBatch) -> Result<(T, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let fv = self.forward_tape(&mut tape, &batch.inputs, batch.batch, batch.seq)?;
        let weights: Vec<T> = batch.weights.iter().map(|&w| T::from_f64(f64::from(w))).collect();
        let loss = tape.cross_entropy(fv.logits, &batch.targets, &weights);
        tape.backward(loss);
        let value = tape.value(loss)[0];
        let grads = fv
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![T::zero(); p.len()], <[T]>::to_vec))
            .collect();
        Ok((value, grads))
    }

    /// Loss only, no gradients.
    pub fn loss(&self, batch: &TokenBatch) -> Result<T> {
        let mut tape = Tape::new();
        let fv = self.forward_tape(&mut tape, &batch.inputs, batch.batch, batch.seq)?;
        let weights: Vec<T> = batch.weights.iter().map(|&w| T::from_f64(f64::from(w))).collect();
        let loss = tape.cross_entropy(fv.logits, &batch.targets, &weights);
        Ok(tape.value(loss)[0])
    }
}

/// Next-token prediction batch: `batch` rows of `seq` input ids, the id each
/// position should predict, and a per-position loss weight (zero for prompt
/// and padding positions).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub weights: Vec<f32>,
}

impl TokenBatch {
    /// Builds a batch from `(ids, target_start)` sequences, where
    /// `ids[target_start..]` is the supervised continuation. Sequences are
    /// right-padded with `pad` to the longest one.
    pub fn from_sequences(seqs: &[(Vec<u32>, usize)], pad: u32) -> Result<Self> {
        let longest = seqs.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
        if longest < 2 {
            return Err(Error::Shape("training sequences need at least two tokens".into()));
        }
        let seq = longest - 1;
        let batch = seqs.len();
        let mut inputs = vec![pad; batch * seq];
        let mut targets = vec![pad; batch * seq];
        let mut weights = vec![0.0f32; batch * seq];
        for (b, (ids, start)) in seqs.iter().enumerate() {
            let n = ids.len() - 1;
            inputs[b * seq..b * seq + n].copy_from_slice(&ids[..n]);
            targets[b * seq..b * seq + n].copy_from_slice(&ids[1..]);
            // position t predicts ids[t + 1]; supervise predictions of the target span
            for t in start.saturating_sub(1)..n {
                weights[b * seq + t] = 1.0;
            }
        }
        Ok(TokenBatch { batch, seq, inputs, targets, weights })
    }

    /// Rescales weights so every sequence contributes equally to the loss
    /// regardless of how many target tokens it has.
    pub fn weight_per_sequence(mut self) -> Self {
        for row in self.weights.chunks_mut(self.seq) {
            let total: f32 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|w| *w /= total);
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tape::softmax_into;

    pub(crate) fn tiny(layers: usize, d: usize) -> ModelConfig {
        ModelConfig { n_layers: layers, hidden_size: d, n_heads: 2, vocab_size: 11, max_seq_len: 8, seed: 3 }
    }

    #[test]
    fn zeroed_model_predicts_uniformly() {
        let m: Model<f32> = Model::zeroed(tiny(2, 8)).unwrap();
        let mut tape = Tape::new();
        let fv = m.forward_tape(&mut tape, &[1, 4, 5, 2, 9], 1, 5).unwrap();
        let logits = tape.value(fv.logits);
        let mut p = vec![0.0; 11];
        for row in logits.chunks(11) {
            softmax_into(row, &mut p);
            assert!(p.iter().all(|&x| (x - 1.0 / 11.0).abs() < 1e-7));
        }
    }

    #[test]
    fn forward_is_deterministic_and_validated() {
        let m: Model<f32> = Model::init(tiny(2, 8)).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let fv = m.forward_tape(&mut tape, &[1, 4, 5, 2], 1, 4).unwrap();
            tape.value(fv.logits).to_vec()
        };
        assert_eq!(run(), run());
        let mut tape = Tape::new();
        assert!(matches!(m.forward_tape(&mut tape, &[1, 40], 1, 2), Err(Error::Shape(_))));
        let long = vec![1u32; 9];
        assert!(matches!(m.forward_tape(&mut tape, &long, 1, 9), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_keyed_by_name() {
        let a: Model<f32> = Model::init(tiny(2, 8)).unwrap();
        let b: Model<f32> = Model::init(ModelConfig { vocab_size: 30, ..tiny(2, 8) }).unwrap();
        assert_ne!(a.params[0].data.len(), b.params[0].data.len());
        assert_eq!(a.params[2..], b.params[2..]);
        assert_eq!(a.params[1], b.params[1]);
    }

    #[test]
    fn loss_ignores_prompt_labels() {
        let m: Model<f32> = Model::init(tiny(1, 8)).unwrap();
        let b1 = TokenBatch::from_sequences(&[(vec![1, 4, 5, 2, 7, 3], 4)], 0).unwrap();
        let mut b2 = b1.clone();
        // relabel the prompt positions only
        b2.targets[0] = 9;
        b2.targets[1] = 10;
        assert_eq!(m.loss(&b1).unwrap(), m.loss(&b2).unwrap());
        assert_eq!(b1.weights, vec![0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sequence_weighting_balances_target_lengths() {
        let b = TokenBatch::from_sequences(&[(vec![1, 4, 5, 6, 7, 3], 2), (vec![1, 4, 3], 2)], 0)
            .unwrap()
            .weight_per_sequence();
        let rows: Vec<f32> = b.weights.chunks(b.seq).map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![1.0, 1.0]);
        assert_eq!(&b.weights[..5], &[0.0, 0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn confident_model_has_zero_loss() {
        let mut m: Model<f64> = Model::zeroed(tiny(1, 8)).unwrap();
        // embedding row 3 dominates every logit after LN2 bias pushes toward it
        let d = 8;
        for j in 0..d {
            m.params[TOKEN_EMBEDDING].data[3 * d + j] = if j == 0 { 1.0 } else { 0.0 };
        }
        let last = m.params.len() - 1;
        m.params[last].data[0] = 1e4; // ln2 bias of the final block
        let batch = TokenBatch::from_sequences(&[(vec![1, 5, 2, 3], 3)], 0).unwrap();
        assert!(m.loss(&batch).unwrap() < 1e-12);
    }
}
