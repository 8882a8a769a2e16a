use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::{EncoderBlock, Model, Parameters};
use crate::data::{CLS_ID, PAD_ID};
use crate::dist::ProbDist;
use crate::exit_policy::{ExitConfig, ExitDecision, ExitEngine};
use crate::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Per-token activations after `layer` encoder passes (0 = embedding output).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub states: Array2<f64>,
    pub layer: usize,
    /// `true` for positions that may be attended to (everything but `[pad]`).
    pub key_mask: Vec<bool>,
}

impl HiddenState {
    pub fn seq_len(&self) -> usize {
        self.states.nrows()
    }

    fn check_finite(&self) -> Result<()> {
        if self.states.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric {
                layer: self.layer,
                msg: "non-finite activation".into(),
            })
        }
    }
}

/// Everything recorded while running an input through the model.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub token_ids: Vec<u32>,
    /// Classifier outputs for layers `1..=k`.
    pub dists: Vec<ProbDist>,
    /// Raw classifier logits, parallel to `dists`.
    pub logits: Vec<Vec<f64>>,
    /// Attention probabilities per layer, shaped `(heads, seq, seq)`.
    pub attentions: Vec<Array3<f64>>,
}

impl LayerTrace {
    fn new(token_ids: &[u32]) -> Self {
        Self {
            token_ids: token_ids.to_vec(),
            dists: Vec::new(),
            logits: Vec::new(),
            attentions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dists.is_empty()
    }

    /// Predicted label of the last executed layer.
    pub fn prediction(&self) -> Option<usize> {
        self.dists.last().map(ProbDist::argmax)
    }

    fn push(&mut self, logits: Vec<f64>, dist: ProbDist, attention: Array3<f64>) {
        self.logits.push(logits);
        self.dists.push(dist);
        self.attentions.push(attention);
    }
}

/// Token lookup, projection to the hidden width, and learned positions.
pub fn embed(token_ids: &[u32], model: &Model) -> Result<HiddenState> {
    let (states, _) = embed_rows(token_ids, model)?;
    let h = HiddenState {
        states,
        layer: 0,
        key_mask: token_ids.iter().map(|&t| t != PAD_ID).collect(),
    };
    h.check_finite()?;
    Ok(h)
}

/// Returns the embedding output and the gathered token rows.
pub(crate) fn embed_rows(token_ids: &[u32], model: &Model) -> Result<(Array2<f64>, Array2<f64>)> {
    let cfg = &model.cfg;
    let p = &model.params;
    if token_ids.is_empty() {
        return Err(Error::input("empty token sequence"));
    }
    if token_ids.len() > cfg.max_seq_len {
        return Err(Error::input(format!(
            "sequence length {} exceeds max_seq_len {}",
            token_ids.len(),
            cfg.max_seq_len
        )));
    }
    if token_ids[0] != CLS_ID {
        return Err(Error::input("position 0 must hold the [cls] id"));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let len = token_ids.len();
    let mut rows = Array2::zeros((len, cfg.embed_dim));
    for (i, &t) in token_ids.iter().enumerate() {
        rows.row_mut(i).assign(&p.token_embed.row(t as usize));
    }
    let states = rows.dot(&p.embed_proj) + p.pos_embed.slice(s![..len, ..]);
    Ok((states, rows))
}

/// Intermediates of one encoder application needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct EncoderCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn: Array3<f64>,
    pub context: Array2<f64>,
    pub attn_drop: Option<Array2<f64>>,
    pub ln1_xhat: Array2<f64>,
    pub ln1_inv_std: Array1<f64>,
    pub y1: Array2<f64>,
    pub ff_pre: Array2<f64>,
    pub ff_act: Array2<f64>,
    pub ff_drop: Option<Array2<f64>>,
    pub ln2_xhat: Array2<f64>,
    pub ln2_inv_std: Array1<f64>,
}

/// Hidden-dropout settings for a training-time forward pass.
pub(crate) struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> Dropout<'_, R> {
    fn mask(&mut self, shape: (usize, usize)) -> Option<Array2<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        Some(Array2::from_shape_simple_fn(shape, || {
            if self.rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

/// Post-norm transformer block:
/// `y1 = LN(x + Attn(x))`, `y2 = LN(y1 + W2 gelu(W1 y1))`.
pub(crate) fn encoder_forward<R: Rng>(
    block: &EncoderBlock,
    num_heads: usize,
    x: ArrayView2<f64>,
    key_mask: &[bool],
    mut dropout: Option<Dropout<'_, R>>,
) -> (Array2<f64>, EncoderCache) {
    let (len, d) = x.dim();
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = x.dot(&block.wq) + &block.bq;
    let k = x.dot(&block.wk) + &block.bk;
    let v = x.dot(&block.wv) + &block.bv;

    let mut attn = Array3::zeros((num_heads, len, len));
    let mut context = Array2::zeros((len, d));
    for h in 0..num_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let mut probs = attn.index_axis_mut(Axis(0), h);
        for (mut out, row) in probs.outer_iter_mut().zip(scores.outer_iter()) {
            masked_softmax(
                row.as_slice().expect("contiguous"),
                key_mask,
                out.as_slice_mut().expect("contiguous"),
            );
        }
        context.slice_mut(cols).assign(&probs.dot(&v.slice(cols)));
    }

    let mut attn_out = context.dot(&block.wo) + &block.bo;
    let attn_drop = dropout.as_mut().and_then(|dr| dr.mask((len, d)));
    if let Some(m) = &attn_drop {
        attn_out *= m;
    }
    let (y1, ln1_xhat, ln1_inv_std) =
        layer_norm(&(&x + &attn_out), &block.ln1_gain, &block.ln1_bias);

    let ff_pre = y1.dot(&block.ff1_w) + &block.ff1_b;
    let ff_act = ff_pre.mapv(gelu);
    let mut ff_out = ff_act.dot(&block.ff2_w) + &block.ff2_b;
    let ff_drop = dropout.as_mut().and_then(|dr| dr.mask((len, d)));
    if let Some(m) = &ff_drop {
        ff_out *= m;
    }
    let (y2, ln2_xhat, ln2_inv_std) =
        layer_norm(&(&y1 + &ff_out), &block.ln2_gain, &block.ln2_bias);

    let cache = EncoderCache {
        q,
        k,
        v,
        attn,
        context,
        attn_drop,
        ln1_xhat,
        ln1_inv_std,
        y1,
        ff_pre,
        ff_act,
        ff_drop,
        ln2_xhat,
        ln2_inv_std,
    };
    (y2, cache)
}

/// One application of the shared encoder block.
///
/// Returns the next hidden state and the `(heads, seq, seq)` attention
/// probabilities.
pub fn encoder_step(h: &HiddenState, model: &Model) -> Result<(HiddenState, Array3<f64>)> {
    if h.layer >= model.cfg.depth {
        return Err(Error::usage(format!(
            "encoder_step at layer {} but depth is {}",
            h.layer, model.cfg.depth
        )));
    }
    h.check_finite()?;
    let (states, cache) = encoder_forward::<rand_chacha::ChaCha8Rng>(
        &model.params.encoder,
        model.cfg.num_heads,
        h.states.view(),
        &h.key_mask,
        None,
    );
    let next = HiddenState {
        states,
        layer: h.layer + 1,
        key_mask: h.key_mask.clone(),
    };
    next.check_finite()?;
    Ok((next, cache.attn))
}

/// Classifier logits from the `[cls]` position.
pub(crate) fn cls_logits(h: &Array2<f64>, params: &Parameters) -> Vec<f64> {
    (h.row(0).dot(&params.cls_w) + &params.cls_b).to_vec()
}

/// Fully connected layer plus softmax over the `[cls]` representation.
pub fn classify(h: &HiddenState, model: &Model) -> Result<ProbDist> {
    Ok(classify_with_logits(h, model)?.1)
}

fn classify_with_logits(h: &HiddenState, model: &Model) -> Result<(Vec<f64>, ProbDist)> {
    let logits = cls_logits(&h.states, &model.params);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric {
            layer: h.layer,
            msg: "non-finite classifier logits".into(),
        });
    }
    let dist = ProbDist::from_logits(h.layer, &logits);
    Ok((logits, dist))
}

/// Runs all `depth` encoder passes, classifying after each.
pub fn forward_full(token_ids: &[u32], model: &Model) -> Result<LayerTrace> {
    run(token_ids, model, None).map(|(trace, _)| trace)
}

/// Runs encoder passes one at a time until the exit policy fires or the
/// model's depth is exhausted. The prediction is the argmax of the last
/// computed distribution.
pub fn forward_adaptive(
    token_ids: &[u32],
    model: &Model,
    exit_cfg: &ExitConfig,
) -> Result<(usize, ExitDecision, LayerTrace)> {
    let engine = ExitEngine::new(exit_cfg.clone())?;
    let (trace, decision) = run(token_ids, model, Some(engine))?;
    let decision = decision.expect("engine supplied");
    let label = trace.prediction().expect("depth is at least 1");
    Ok((label, decision, trace))
}

fn run(
    token_ids: &[u32],
    model: &Model,
    mut engine: Option<ExitEngine>,
) -> Result<(LayerTrace, Option<ExitDecision>)> {
    let mut trace = LayerTrace::new(token_ids);
    let mut h = embed(token_ids, model)?;
    let mut decision = None;
    for _ in 0..model.cfg.depth {
        let (next, attention) = encoder_step(&h, model)?;
        h = next;
        let (logits, dist) = classify_with_logits(&h, model)?;
        let d = match engine.as_mut() {
            Some(e) => Some(e.observe(&dist)?),
            None => None,
        };
        trace.push(logits, dist, attention);
        decision = d;
        if d.is_some_and(|d| d.fired) {
            break;
        }
    }
    Ok((trace, decision))
}

/// Softmax over the keys allowed by `mask`; masked keys get exactly 0.
pub(crate) fn masked_softmax(scores: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m { (s - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise layer norm. Returns `(output, normalized input, 1/std per row)`.
pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, istd) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *istd = 1.0 / (var + LN_EPS).sqrt();
        row *= *istd;
    }
    let y = &xhat * gain + bias;
    (y, xhat, inv_std)
}

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
