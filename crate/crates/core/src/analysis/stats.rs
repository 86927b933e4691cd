//! Neuron-wise mean differences, activation/label correlations, and ranking.

use serde::{Deserialize, Serialize};

use crate::capture::{Fingerprint, PairDataset};
use crate::error::{Error, Result};

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// A per-(layer, neuron) statistic laid out layer-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronMap {
    pub n_layers: usize,
    pub width: usize,
    pub pair_count: usize,
    pub fingerprint: Fingerprint,
    pub values: Vec<f64>,
}

impl NeuronMap {
    pub fn get(&self, layer: usize, neuron: usize) -> f64 {
        self.values[layer * self.width + neuron]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.width..(layer + 1) * self.width]
    }
}

/// Mean of `gen - mem` per neuron.
pub type NmdMap = NeuronMap;
/// Pearson correlation of each neuron with the label (Gen = 1, Mem = 0).
pub type CorrMap = NeuronMap;

fn non_empty(ds: &PairDataset, what: &str) -> Result<()> {
    if ds.records.is_empty() {
        return Err(Error::EmptyDataset(format!("{what} needs at least one pair")));
    }
    Ok(())
}

pub fn compute_nmd(ds: &PairDataset) -> Result<NmdMap> {
    non_empty(ds, "NMD")?;
    let n = ds.n_layers() * ds.width();
    let mut sums = vec![CompensatedSum::default(); n];
    for r in &ds.records {
        for ((s, &g), &m) in sums.iter_mut().zip(&r.gen).zip(&r.mem) {
            s.add(f64::from(g) - f64::from(m));
        }
    }
    let count = ds.records.len() as f64;
    Ok(NeuronMap {
        n_layers: ds.n_layers(),
        width: ds.width(),
        pair_count: ds.records.len(),
        fingerprint: ds.fingerprint.clone(),
        values: sums.iter().map(|s| s.value() / count).collect(),
    })
}

/// Single-pass Pearson accumulator over (x, y) observations. Values are
/// shifted by the first observation to keep the moment sums well conditioned.
#[derive(Clone, Copy, Debug, Default)]
struct PearsonAcc {
    shift: Option<(f64, f64)>,
    n: f64,
    sx: CompensatedSum,
    sy: CompensatedSum,
    sxx: CompensatedSum,
    syy: CompensatedSum,
    sxy: CompensatedSum,
}

impl PearsonAcc {
    fn push(&mut self, x: f64, y: f64) {
        let (kx, ky) = *self.shift.get_or_insert((x, y));
        let (dx, dy) = (x - kx, y - ky);
        self.n += 1.0;
        self.sx.add(dx);
        self.sy.add(dy);
        self.sxx.add(dx * dx);
        self.syy.add(dy * dy);
        self.sxy.add(dx * dy);
    }

    fn rho(&self) -> f64 {
        let n = self.n;
        let (sx, sy) = (self.sx.value(), self.sy.value());
        let cxx = self.sxx.value() - sx * sx / n;
        let cyy = self.syy.value() - sy * sy / n;
        let cxy = self.sxy.value() - sx * sy / n;
        if !(cxx > 0.0) || !(cyy > 0.0) {
            return 0.0;
        }
        (cxy / (cxx.sqrt() * cyy.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Pearson correlation over the `2N` side-records; neurons with zero
/// variance get 0.
pub fn compute_correlation(ds: &PairDataset) -> Result<CorrMap> {
    non_empty(ds, "correlation")?;
    let n = ds.n_layers() * ds.width();
    let mut acc = vec![PearsonAcc::default(); n];
    for r in &ds.records {
        for (a, (&g, &m)) in acc.iter_mut().zip(r.gen.iter().zip(&r.mem)) {
            a.push(f64::from(g), 1.0);
            a.push(f64::from(m), 0.0);
        }
    }
    Ok(NeuronMap {
        n_layers: ds.n_layers(),
        width: ds.width(),
        pair_count: ds.records.len(),
        fingerprint: ds.fingerprint.clone(),
        values: acc.iter().map(PearsonAcc::rho).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedNeuron {
    pub layer: usize,
    pub neuron: usize,
    pub value: f64,
}

/// `ceil(ratio * total)`, tolerant of floating-point noise in the product.
pub fn top_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64 - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// Neurons sorted by descending magnitude, ties by (layer, neuron).
pub fn rank_by_magnitude(map: &NeuronMap) -> Vec<RankedNeuron> {
    let mut all: Vec<RankedNeuron> = (0..map.n_layers)
        .flat_map(|l| (0..map.width).map(move |i| (l, i)))
        .map(|(layer, neuron)| RankedNeuron { layer, neuron, value: map.get(layer, neuron) })
        .collect();
    all.sort_by(|a, b| {
        b.value
            .abs()
            .total_cmp(&a.value.abs())
            .then(a.layer.cmp(&b.layer))
            .then(a.neuron.cmp(&b.neuron))
    });
    all
}

/// The top `ceil(top_n_ratio * L * d)` neurons by `|rho|`.
pub fn rank_neurons(corr: &CorrMap, top_n_ratio: f64) -> Result<Vec<RankedNeuron>> {
    if !(top_n_ratio > 0.0 && top_n_ratio <= 1.0) {
        return Err(Error::Config(format!("top_n_ratio {top_n_ratio} outside (0, 1]")));
    }
    let k = top_count(top_n_ratio, corr.n_layers * corr.width);
    let mut ranked = rank_by_magnitude(corr);
    ranked.truncate(k);
    Ok(ranked)
}

/// Share of the global top `top_fraction` of neurons by `|nmd|` that sit in
/// the deeper half of the network (layers with `2 * layer >= L`).
pub fn depth_concentration(nmd: &NmdMap, top_fraction: f64) -> f64 {
    let k = top_count(top_fraction, nmd.n_layers * nmd.width).max(1);
    let ranked = rank_by_magnitude(nmd);
    let deep = ranked[..k].iter().filter(|r| 2 * r.layer >= nmd.n_layers).count();
    deep as f64 / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::PairRecord;
    use crate::datagen::TaskKind;

    fn ds(layers: usize, width: usize, pairs: &[(Vec<f32>, Vec<f32>)]) -> PairDataset {
        PairDataset {
            fingerprint: Fingerprint { checkpoint_hash: "00".repeat(32), n_layers: layers, width },
            records: pairs
                .iter()
                .enumerate()
                .map(|(i, (g, m))| PairRecord { pair_id: i as u64, task: TaskKind::Arithmetic, gen: g.clone(), mem: m.clone() })
                .collect(),
        }
    }

    #[test]
    fn nmd_hand_example() {
        let d = ds(1, 1, &[(vec![2.0], vec![1.0]), (vec![4.0], vec![3.0])]);
        assert_eq!(compute_nmd(&d).unwrap().values, vec![1.0]);
    }

    #[test]
    fn identical_sides_give_zero_nmd() {
        let d = ds(1, 2, &[(vec![2.0, 5.0], vec![2.0, 5.0]), (vec![-1.0, 0.5], vec![-1.0, 0.5])]);
        assert!(compute_nmd(&d).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pearson_hand_examples() {
        // activations [1,1,0,0] with labels [1,1,0,0]
        let d = ds(1, 1, &[(vec![1.0], vec![0.0]), (vec![1.0], vec![0.0])]);
        assert!((compute_correlation(&d).unwrap().values[0] - 1.0).abs() < 1e-15);
        // activations [0,1,0,1] with labels [1,1,0,0]
        let d = ds(1, 1, &[(vec![0.0], vec![0.0]), (vec![1.0], vec![1.0])]);
        assert_eq!(compute_correlation(&d).unwrap().values[0], 0.0);
    }

    #[test]
    fn constant_neuron_has_zero_correlation() {
        let d = ds(1, 1, &[(vec![3.0], vec![3.0]), (vec![3.0], vec![3.0])]);
        assert_eq!(compute_correlation(&d).unwrap().values[0], 0.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let d = ds(1, 1, &[]);
        assert!(matches!(compute_nmd(&d), Err(Error::EmptyDataset(_))));
        assert!(matches!(compute_correlation(&d), Err(Error::EmptyDataset(_))));
    }

    fn map(layers: usize, width: usize, values: Vec<f64>) -> NeuronMap {
        NeuronMap {
            n_layers: layers,
            width,
            pair_count: 1,
            fingerprint: Fingerprint { checkpoint_hash: String::new(), n_layers: layers, width },
            values,
        }
    }

    #[test]
    fn ranking_counts_and_ties() {
        let m = map(2, 8, (0..16).map(|i| if i % 3 == 0 { 0.5 } else { -0.1 * i as f64 / 16.0 }).collect());
        let top = rank_neurons(&m, 0.25).unwrap();
        assert_eq!(top.len(), 4);
        // the four largest |rho| are the 0.5 entries at flat indices 0, 3, 6, 9
        let flat: Vec<usize> = top.iter().map(|r| r.layer * 8 + r.neuron).collect();
        assert_eq!(flat, vec![0, 3, 6, 9]);
        assert_eq!(rank_neurons(&m, 1.0).unwrap().len(), 16);
        assert!(rank_neurons(&m, 0.0).is_err());
        assert_eq!(top_count(0.005, 512), 3);
        assert_eq!(top_count(0.07, 100), 7);
    }

    #[test]
    fn planted_neuron_ranks_first() {
        let pairs: Vec<(Vec<f32>, Vec<f32>)> = (0..50)
            .map(|i| {
                let noise = |k: usize| ((i * 31 + k * 17) % 13) as f32 / 13.0;
                let mut g: Vec<f32> = (0..8).map(noise).collect();
                let mut m: Vec<f32> = (0..8).map(|k| noise(k + 5)).collect();
                g[6] = 2.0 + noise(1) * 0.1;
                m[6] = -2.0 + noise(2) * 0.1;
                (g, m)
            })
            .collect();
        let c = compute_correlation(&ds(2, 4, &pairs)).unwrap();
        let top = rank_neurons(&c, 0.01).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!((top[0].layer, top[0].neuron), (1, 2));
    }

    #[test]
    fn depth_concentration_counts_deeper_half() {
        let mut v = vec![0.0; 4 * 10];
        v[3 * 10 + 1] = 5.0;
        v[2 * 10 + 4] = -4.0;
        assert_eq!(depth_concentration(&map(4, 10, v.clone()), 0.05), 1.0);
        v[0] = 9.0;
        assert!((depth_concentration(&map(4, 10, v), 0.05) - 0.5).abs() < 1e-12);
    }
}
