//! Intervention specifications and the shift they apply at the tap.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::analysis::{rank_neurons, CorrMap, NmdMap};
use crate::capture::Fingerprint;
use crate::datagen::BehaviorLabel;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TowardGen,
    TowardMem,
}

impl Direction {
    /// `+1` toward generalization, `-1` toward memorization.
    pub fn sign(self) -> f64 {
        match self {
            Direction::TowardGen => 1.0,
            Direction::TowardMem => -1.0,
        }
    }

    pub fn target(self) -> BehaviorLabel {
        match self {
            Direction::TowardGen => BehaviorLabel::Gen,
            Direction::TowardMem => BehaviorLabel::Mem,
        }
    }

    /// Behavior an example must start from to be steered this way.
    pub fn source(self) -> BehaviorLabel {
        match self {
            Direction::TowardGen => BehaviorLabel::Mem,
            Direction::TowardMem => BehaviorLabel::Gen,
        }
    }

    pub fn flipped(self) -> Direction {
        match self {
            Direction::TowardGen => Direction::TowardMem,
            Direction::TowardMem => Direction::TowardGen,
        }
    }

    /// Short label such as `mem->gen`.
    pub fn label(self) -> &'static str {
        match self {
            Direction::TowardGen => "mem->gen",
            Direction::TowardMem => "gen->mem",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecEntry {
    pub layer: usize,
    pub neuron: usize,
    /// Sign of the neuron's correlation with the Gen label (`+1` or `-1`).
    pub sign: i8,
    pub abs_nmd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub direction: Direction,
    pub alpha: f64,
    pub top_n_ratio: f64,
    pub fingerprint: Fingerprint,
    pub entries: Vec<SpecEntry>,
}

/// Selects the top `top_n_ratio` neurons by `|rho|`, each carrying the sign
/// of its correlation and the magnitude of its mean difference.
pub fn build_spec(nmd: &NmdMap, corr: &CorrMap, direction: Direction, alpha: f64, top_n_ratio: f64) -> Result<InterventionSpec> {
    if nmd.fingerprint != corr.fingerprint || nmd.values.len() != corr.values.len() {
        return Err(Error::FingerprintMismatch(format!(
            "NMD from {} but correlation from {}",
            nmd.fingerprint.checkpoint_hash, corr.fingerprint.checkpoint_hash
        )));
    }
    if !alpha.is_finite() {
        return Err(Error::Config(format!("alpha {alpha} is not finite")));
    }
    let entries = rank_neurons(corr, top_n_ratio)?
        .into_iter()
        .map(|r| SpecEntry {
            layer: r.layer,
            neuron: r.neuron,
            sign: if r.value < 0.0 { -1 } else { 1 },
            abs_nmd: nmd.get(r.layer, r.neuron).abs(),
        })
        .collect();
    Ok(InterventionSpec { direction, alpha, top_n_ratio, fingerprint: nmd.fingerprint.clone(), entries })
}

impl InterventionSpec {
    pub fn n_layers(&self) -> usize {
        self.fingerprint.n_layers
    }

    pub fn width(&self) -> usize {
        self.fingerprint.width
    }

    pub fn with_direction(&self, direction: Direction) -> Self {
        InterventionSpec { direction, ..self.clone() }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        InterventionSpec { alpha, ..self.clone() }
    }

    /// The additive shift for one entry.
    pub fn shift(&self, e: &SpecEntry) -> f64 {
        self.direction.sign() * self.alpha * f64::from(e.sign) * e.abs_nmd
    }

    /// `(layer, neuron, shift)` for every entry.
    pub fn shifts(&self) -> Vec<(usize, usize, f64)> {
        self.entries.iter().map(|e| (e.layer, e.neuron, self.shift(e))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.layer >= self.n_layers() || e.neuron >= self.width() {
                return Err(Error::Shape(format!("entry ({}, {}) outside the source model", e.layer, e.neuron)));
            }
            if e.sign.abs() != 1 || !(e.abs_nmd >= 0.0) {
                return Err(Error::Config(format!("entry ({}, {}) has sign {} and |nmd| {}", e.layer, e.neuron, e.sign, e.abs_nmd)));
            }
        }
        Ok(())
    }
}

/// Adds the spec's shift to every listed neuron of `layer` in `h`.
pub fn apply_intervention(h: &mut [f32], spec: &InterventionSpec, layer: usize) -> Result<()> {
    if h.len() != spec.width() {
        return Err(Error::Shape(format!("vector of width {} for a spec of width {}", h.len(), spec.width())));
    }
    for e in spec.entries.iter().filter(|e| e.layer == layer) {
        let s = spec.shift(e);
        if s != 0.0 {
            h[e.neuron] += s as f32;
        }
    }
    Ok(())
}

/// Random neurons with uniform shifts, matched in count and scale to a spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaselineSpec {
    pub fingerprint: Fingerprint,
    /// Largest shift magnitude of the matched spec, `alpha * max |nmd|`.
    pub v: f64,
    /// `(layer, neuron, shift)`.
    pub entries: Vec<(usize, usize, f64)>,
}

pub fn make_random_baseline(spec: &InterventionSpec, rng: &mut Rng) -> Result<RandomBaselineSpec> {
    if spec.entries.is_empty() {
        return Err(Error::Config("random baseline needs a non-empty spec".into()));
    }
    let v = spec.entries.iter().map(|e| (spec.alpha * e.abs_nmd).abs()).fold(0.0, f64::max);
    let (l, d) = (spec.n_layers(), spec.width());
    let picks = sample(rng, l * d, spec.entries.len().min(l * d));
    let entries = picks
        .into_iter()
        .map(|flat| {
            let shift = if v > 0.0 { rng.random_range(-v..=v) } else { 0.0 };
            (flat / d, flat % d, shift)
        })
        .collect();
    Ok(RandomBaselineSpec { fingerprint: spec.fingerprint.clone(), v, entries })
}
