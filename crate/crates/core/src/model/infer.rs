//! Incremental inference with a key/value cache, tap hooks, and greedy decoding.

use super::tape::{gelu, layer_norm_row, softmax_into};
use super::tensor::{gemm, MatMut, MatRef};
use super::transformer::{slot, Model, POSITION_EMBEDDING, TOKEN_EMBEDDING};
use crate::datagen::tokenizer::EOS;
use crate::error::{Error, Result};

/// Where a tap vector sits: its layer, its absolute position, and the length
/// of the prompt the current generation started from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapSite {
    pub layer: usize,
    pub position: usize,
    pub prompt_len: usize,
}

impl TapSite {
    /// True for positions whose next-token prediction is part of the
    /// generated continuation (the last prompt position and everything after).
    pub fn predicts_generation(&self) -> bool {
        self.position + 1 >= self.prompt_len
    }
}

/// Rewrites a tap vector in place before the next layer consumes it.
pub trait TapHook: Sync {
    fn apply(&self, site: TapSite, h: &mut [f32]);
}

/// Leaves every tap untouched.
pub struct IdentityHook;

impl TapHook for IdentityHook {
    fn apply(&self, _site: TapSite, _h: &mut [f32]) {}
}

/// Which positions to record in an [`ActivationTrace`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceRequest {
    All,
    Positions(Vec<usize>),
}

impl TraceRequest {
    fn wants(&self, pos: usize) -> bool {
        match self {
            TraceRequest::All => true,
            TraceRequest::Positions(p) => p.contains(&pos),
        }
    }
}

/// Tap outputs (after any hook) for the recorded positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub n_layers: usize,
    pub width: usize,
    pub positions: Vec<usize>,
    /// `[slot][layer][neuron]`, slot indexing `positions`.
    values: Vec<f32>,
}

impl ActivationTrace {
    fn new(n_layers: usize, width: usize) -> Self {
        ActivationTrace { n_layers, width, positions: Vec::new(), values: Vec::new() }
    }

    /// Tap vector of `layer` at the `slot`-th recorded position.
    pub fn get(&self, slot: usize, layer: usize) -> &[f32] {
        let off = (slot * self.n_layers + layer) * self.width;
        &self.values[off..off + self.width]
    }

    /// All layers at an absolute position, layer-major (`L * d` values).
    pub fn at_position(&self, pos: usize) -> Option<&[f32]> {
        let slot = self.positions.iter().position(|&p| p == pos)?;
        let n = self.n_layers * self.width;
        Some(&self.values[slot * n..(slot + 1) * n])
    }
}

/// A single sequence being decoded against a frozen model.
pub struct InferenceSession<'m> {
    model: &'m Model<f32>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    prompt_len: usize,
}

fn linear(x: &[f32], n: usize, w: &[f32], b: &[f32], k: usize, m: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    gemm(MatRef::dense(x, n, k), MatRef::dense(w, k, m), 1.0, MatMut::dense(&mut out, n, m));
    out
}

impl<'m> InferenceSession<'m> {
    pub fn new(model: &'m Model<f32>) -> Self {
        let cfg = &model.config;
        let cache = || vec![0.0f32; cfg.max_seq_len * cfg.hidden_size];
        InferenceSession {
            model,
            keys: (0..cfg.n_layers).map(|_| cache()).collect(),
            values: (0..cfg.n_layers).map(|_| cache()).collect(),
            len: 0,
            prompt_len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sets the prompt length reported to hooks.
    pub fn set_prompt_len(&mut self, n: usize) {
        self.prompt_len = n;
    }

    /// Runs `tokens` at the next positions and returns their logits
    /// (`tokens.len() x vocab`).
    pub fn step(
        &mut self,
        tokens: &[u32],
        hook: Option<&dyn TapHook>,
        mut trace: Option<(&TraceRequest, &mut ActivationTrace)>,
    ) -> Result<Vec<f32>> {
        let model = self.model;
        let cfg = &model.config;
        let (d, f, v) = (cfg.hidden_size, cfg.ffn_width(), cfg.vocab_size);
        let n = tokens.len();
        let p0 = self.len;
        cfg.check_tokens(tokens, p0 + n)?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let wte = &model.params[TOKEN_EMBEDDING].data;
        let wpe = &model.params[POSITION_EMBEDDING].data;
        let mut x = Vec::with_capacity(n * d);
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            let p = p0 + i;
            x.extend(wte[t * d..(t + 1) * d].iter().zip(&wpe[p * d..(p + 1) * d]).map(|(a, b)| a + b));
        }
        let inv_d = 1.0 / d as f32;
        let eps = super::tape::layer_norm_eps::<f32>();
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut scores = vec![0.0f32; p0 + n];
        let mut tapped = vec![0.0f32; n * cfg.n_layers * d];

        for l in 0..cfg.n_layers {
            let w = |s: usize| model.layer_param(l, s).data.as_slice();
            let qkv = linear(&x, n, w(slot::QKV_W), w(slot::QKV_B), d, 3 * d);
            let (kc, vc) = (&mut self.keys[l], &mut self.values[l]);
            for i in 0..n {
                let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
                kc[(p0 + i) * d..(p0 + i + 1) * d].copy_from_slice(&row[d..2 * d]);
                vc[(p0 + i) * d..(p0 + i + 1) * d].copy_from_slice(&row[2 * d..]);
            }
            let mut att = vec![0.0f32; n * d];
            for i in 0..n {
                let p = p0 + i;
                for h in 0..heads {
                    let q = &qkv[i * 3 * d + h * dh..i * 3 * d + (h + 1) * dh];
                    for (j, s) in scores[..=p].iter_mut().enumerate() {
                        let k = &kc[j * d + h * dh..j * d + (h + 1) * dh];
                        *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                    }
                    let mut probs = vec![0.0f32; p + 1];
                    softmax_into(&scores[..=p], &mut probs);
                    let o = &mut att[i * d + h * dh..i * d + (h + 1) * dh];
                    for (j, &pj) in probs.iter().enumerate() {
                        let vr = &vc[j * d + h * dh..j * d + (h + 1) * dh];
                        for (oo, &vv) in o.iter_mut().zip(vr) {
                            *oo += pj * vv;
                        }
                    }
                }
            }
            let proj = linear(&att, n, w(slot::PROJ_W), w(slot::PROJ_B), d, d);
            let mut h1 = vec![0.0f32; n * d];
            for i in 0..n {
                let r: Vec<f32> = x[i * d..(i + 1) * d].iter().zip(&proj[i * d..(i + 1) * d]).map(|(a, b)| a + b).collect();
                layer_norm_row(&r, w(slot::LN1_G), w(slot::LN1_B), &mut h1[i * d..(i + 1) * d], inv_d, eps);
            }
            let mut fc = linear(&h1, n, w(slot::FC_W), w(slot::FC_B), d, f);
            for a in fc.iter_mut() {
                *a = gelu(*a);
            }
            let out = linear(&fc, n, w(slot::OUT_W), w(slot::OUT_B), f, d);
            for i in 0..n {
                let r: Vec<f32> = h1[i * d..(i + 1) * d].iter().zip(&out[i * d..(i + 1) * d]).map(|(a, b)| a + b).collect();
                let xr = &mut x[i * d..(i + 1) * d];
                layer_norm_row(&r, w(slot::LN2_G), w(slot::LN2_B), xr, inv_d, eps);
                if let Some(hk) = hook {
                    hk.apply(TapSite { layer: l, position: p0 + i, prompt_len: self.prompt_len }, xr);
                }
                tapped[(i * cfg.n_layers + l) * d..(i * cfg.n_layers + l + 1) * d].copy_from_slice(xr);
            }
        }
        if let Some((req, tr)) = trace.as_mut() {
            for i in 0..n {
                if req.wants(p0 + i) {
                    tr.positions.push(p0 + i);
                    tr.values.extend_from_slice(&tapped[i * cfg.n_layers * d..(i + 1) * cfg.n_layers * d]);
                }
            }
        }
        if tapped.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("non-finite activation at the tap".into()));
        }
        self.len += n;
        let mut logits = vec![0.0f32; n * v];
        gemm(MatRef::dense(&x, n, d), MatRef::dense(wte, v, d).t(), 0.0, MatMut::dense(&mut logits, n, v));
        Ok(logits)
    }
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Full-sequence forward: logits for every position and, on request, the
/// tap trace.
pub fn forward(
    model: &Model<f32>,
    tokens: &[u32],
    capture: Option<&TraceRequest>,
) -> Result<(Vec<f32>, Option<ActivationTrace>)> {
    let mut session = InferenceSession::new(model);
    session.set_prompt_len(tokens.len());
    let mut trace = capture.map(|_| ActivationTrace::new(model.config.n_layers, model.config.hidden_size));
    let logits = session.step(tokens, None, capture.zip(trace.as_mut()))?;
    Ok((logits, trace))
}

/// Result of [`generate`]: the prompt followed by the generated tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub trace: Option<ActivationTrace>,
}

impl Generation {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// Greedy decoding until `<eos>`, `max_new` new tokens, or the context limit.
pub fn generate(
    model: &Model<f32>,
    prompt: &[u32],
    max_new: usize,
    hook: Option<&dyn TapHook>,
    capture: Option<&TraceRequest>,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Shape("empty prompt".into()));
    }
    let mut tokens = prompt.to_vec();
    let mut trace = capture.map(|_| ActivationTrace::new(model.config.n_layers, model.config.hidden_size));
    if max_new > 0 {
        let mut session = InferenceSession::new(model);
        session.set_prompt_len(prompt.len());
        let v = model.config.vocab_size;
        let mut logits = session.step(prompt, hook, capture.zip(trace.as_mut()))?;
        let mut last = &logits[(prompt.len() - 1) * v..];
        for k in 0..max_new {
            let next = argmax(last);
            tokens.push(next);
            if next == EOS || k + 1 == max_new || tokens.len() >= model.config.max_seq_len {
                break;
            }
            logits = session.step(&[next], hook, capture.zip(trace.as_mut()))?;
            last = &logits;
        }
    } else {
        model.config.check_tokens(prompt, prompt.len())?;
    }
    Ok(Generation { tokens, prompt_len: prompt.len(), trace })
}
