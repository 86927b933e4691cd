//! Per-layer behavior probes: an MLP `d -> 2d -> 2d -> 1` trained with
//! binary cross-entropy to tell memorizing from generalizing tap vectors.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capture::PairDataset;
use crate::error::{Error, Result};
use crate::model::optim::Adam;
use crate::model::tape::{sigmoid, Tape, Var};
use crate::model::Param;
use crate::rng::{derive_indexed, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation accuracy before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { learning_rate: 1e-5, batch_size: 32, max_epochs: 100, patience: 10, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("probe learning_rate, batch_size, max_epochs, patience must be positive".into()));
        }
        Ok(())
    }
}

/// Record indices of each split. Both sides of a pair share a split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles pairs and cuts them 80/10/10 (validation and test get at least
/// one pair each).
pub fn split_pairs(n_pairs: usize, seed: u64) -> Result<PairSplit> {
    if n_pairs < 3 {
        return Err(Error::EmptyDataset(format!("{n_pairs} pairs cannot fill train/validation/test splits")));
    }
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let n_eval = ((n_pairs as f64 * 0.1).round() as usize).max(1);
    let test = order[..n_eval].to_vec();
    let val = order[n_eval..2 * n_eval].to_vec();
    let train = order[2 * n_eval..].to_vec();
    Ok(PairSplit { train, val, test })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub layer: usize,
    pub width: usize,
    pub params: Vec<Param<f32>>,
    pub epochs_ran: usize,
    pub best_val_accuracy: f64,
}

fn init_params(width: usize, seed: u64) -> Vec<Param<f32>> {
    let hidden = 2 * width;
    let shapes = [("fc1.weight", width, hidden), ("fc1.bias", 1, hidden), ("fc2.weight", hidden, hidden), ("fc2.bias", 1, hidden), ("out.weight", hidden, 1), ("out.bias", 1, 1)];
    let mut rng = rng_from_seed(seed);
    let mut fan_in = width;
    shapes
        .iter()
        .map(|&(name, rows, cols)| {
            if rows > 1 {
                fan_in = rows;
            }
            let bound = 1.0 / (fan_in as f32).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            Param { name: name.to_string(), rows, cols, data }
        })
        .collect()
}

fn forward<'p>(tape: &mut Tape<'p, f32>, params: &'p [Param<f32>], x: Vec<f32>, n: usize) -> (Vec<Var>, Var) {
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(&p.data, p.rows, p.cols)).collect();
    let width = params[0].rows;
    let x = tape.constant(x, n, width);
    let h = tape.linear(x, vars[0], Some(vars[1]));
    let h = tape.relu(h);
    let h = tape.linear(h, vars[2], Some(vars[3]));
    let h = tape.relu(h);
    let z = tape.linear(h, vars[4], Some(vars[5]));
    (vars, z)
}

impl Probe {
    /// Probability that each row of `x` (`n x width`) generalizes.
    pub fn predict(&self, x: &[f32]) -> Vec<f32> {
        let n = x.len() / self.width;
        let mut tape = Tape::new();
        let (_, z) = forward(&mut tape, &self.params, x.to_vec(), n);
        tape.value(z).iter().map(|&v| sigmoid(v)).collect()
    }

    pub fn accuracy(&self, x: &[f32], y: &[f32]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let hits = self
            .predict(x)
            .iter()
            .zip(y)
            .filter(|(&p, &t)| (p >= 0.5) == (t >= 0.5))
            .count();
        hits as f64 / y.len() as f64
    }
}

/// Stacks both sides of the given pairs at one layer: features and labels
/// (Gen = 1, Mem = 0).
pub fn layer_samples(ds: &PairDataset, layer: usize, pairs: &[usize]) -> (Vec<f32>, Vec<f32>) {
    let d = ds.width();
    let mut x = Vec::with_capacity(pairs.len() * 2 * d);
    let mut y = Vec::with_capacity(pairs.len() * 2);
    for &i in pairs {
        let r = &ds.records[i];
        x.extend_from_slice(&r.gen[layer * d..(layer + 1) * d]);
        y.push(1.0);
        x.extend_from_slice(&r.mem[layer * d..(layer + 1) * d]);
        y.push(0.0);
    }
    (x, y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub probe: Probe,
    pub test_accuracy: f64,
}

/// Trains one probe on `layer` with Adam and early stopping on validation
/// accuracy; reports accuracy on the held-out test pairs.
pub fn train_probe(ds: &PairDataset, layer: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    if ds.records.is_empty() {
        return Err(Error::EmptyDataset("probe training needs pairs".into()));
    }
    if layer >= ds.n_layers() {
        return Err(Error::LayerOutOfRange { layer, n_layers: ds.n_layers() });
    }
    let split = split_pairs(ds.records.len(), cfg.seed)?;
    train_probe_on_split(ds, layer, cfg, &split)
}

pub fn train_probe_on_split(ds: &PairDataset, layer: usize, cfg: &ProbeConfig, split: &PairSplit) -> Result<ProbeResult> {
    let d = ds.width();
    let (xtr, ytr) = layer_samples(ds, layer, &split.train);
    let (xva, yva) = layer_samples(ds, layer, &split.val);
    let (xte, yte) = layer_samples(ds, layer, &split.test);
    let layer_seed = derive_indexed(cfg.seed, layer as u64);
    let mut probe = Probe { layer, width: d, params: init_params(d, layer_seed), epochs_ran: 0, best_val_accuracy: -1.0 };
    let mut best = probe.params.clone();
    let mut adam = Adam::new(&probe.params, (0.9, 0.999), 1e-8);
    let mut rng = rng_from_seed(layer_seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..ytr.len()).collect();
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * d);
            let mut y = Vec::with_capacity(chunk.len());
            for &i in chunk {
                x.extend_from_slice(&xtr[i * d..(i + 1) * d]);
                y.push(ytr[i]);
            }
            let mut tape = Tape::new();
            let (vars, z) = forward(&mut tape, &probe.params, x, chunk.len());
            let loss = tape.bce_with_logits(z, &y);
            tape.backward(loss);
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(&probe.params)
                .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f32]>::to_vec))
                .collect();
            drop(tape);
            adam.update(&mut probe.params, &grads, cfg.learning_rate as f32);
        }
        probe.epochs_ran = epoch + 1;
        let acc = probe.accuracy(&xva, &yva);
        if acc > probe.best_val_accuracy {
            probe.best_val_accuracy = acc;
            best = probe.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    probe.params = best;
    let test_accuracy = probe.accuracy(&xte, &yte);
    Ok(ProbeResult { probe, test_accuracy })
}

/// One probe per layer, trained in parallel on a shared split.
pub fn train_all_probes(ds: &PairDataset, cfg: &ProbeConfig) -> Result<Vec<ProbeResult>> {
    cfg.validate()?;
    if ds.records.is_empty() {
        return Err(Error::EmptyDataset("probe training needs pairs".into()));
    }
    let split = split_pairs(ds.records.len(), cfg.seed)?;
    (0..ds.n_layers())
        .into_par_iter()
        .map(|l| train_probe_on_split(ds, l, cfg, &split))
        .collect()
}
