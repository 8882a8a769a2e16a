//! Multi-exit fine-tuning.
//!
//! Every layer's classifier contributes a cross-entropy term. Layers
//! `1..M-1` are weighted by `sigmoid(t_i)` for trainable logits `t_i`; the last
//! layer takes the remainder `M - sum sigmoid(t_i)`, so the weights always sum
//! to `M`. Gradients are computed by hand-written backpropagation through the
//! shared block and checked against central finite differences by
//! [`gradient_audit`].

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Encoded, PAD_ID};
use crate::dist::{softmax, ProbDist};
use crate::model::{
    cls_logits, embed_rows, encoder_forward, forward_full, gelu_grad, Dropout, EncoderBlock,
    EncoderCache, LayerTrace, Model, Parameters, EXIT_T_NAME,
};
use crate::{Error, Result};

/// Ceiling on a single exit loss when `p(gold)` underflows.
pub const LOSS_CEILING: f64 = 50.0;

/// Learning rate used for full-size fine-tuning; kept for reference only.
pub const REFERENCE_LEARNING_RATE: f64 = 3e-5;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `-ln p(gold)`, capped at [`LOSS_CEILING`].
pub fn exit_loss(p: &ProbDist, gold: usize) -> Result<f64> {
    let pc = *p.probs().get(gold).ok_or_else(|| {
        Error::input(format!(
            "label {gold} out of range for {} classes",
            p.num_classes()
        ))
    })?;
    Ok((-pc.ln()).min(LOSS_CEILING))
}

/// Per-layer loss weights for depth `depth` from the `depth - 1` logits `t`.
pub fn layer_weights(t: &[f64], depth: usize) -> Vec<f64> {
    assert_eq!(t.len() + 1, depth.max(1), "need depth - 1 exit logits");
    let mut w: Vec<f64> = t.iter().map(|&x| sigmoid(x)).collect();
    let head: f64 = w.iter().sum();
    w.push(depth as f64 - head);
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per_layer: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
}

/// Weighted multi-exit loss of a full-depth trace.
pub fn total_loss(trace: &LayerTrace, gold: usize, t: &[f64], depth: usize) -> Result<LossReport> {
    if trace.len() < depth {
        return Err(Error::usage(format!(
            "total loss needs {depth} layers, trace has {}",
            trace.len()
        )));
    }
    if t.len() + 1 != depth {
        return Err(Error::usage(format!(
            "expected {} exit logits, got {}",
            depth - 1,
            t.len()
        )));
    }
    let per_layer = trace.dists[..depth]
        .iter()
        .map(|p| exit_loss(p, gold))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(per_layer, t, depth))
}

fn report(per_layer: Vec<f64>, t: &[f64], depth: usize) -> LossReport {
    let weights = layer_weights(t, depth);
    let total = weights.iter().zip(&per_layer).map(|(w, l)| w * l).sum();
    LossReport {
        per_layer,
        weights,
        total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub t_init: f64,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            t_init: crate::model::DEFAULT_T_INIT,
            dropout: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config(
                "learning_rate must be a finite non-negative number",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Loss of one sample and the gradient of its total loss with respect to
/// every parameter, including the exit logits.
pub struct SampleGradient {
    pub loss: LossReport,
    pub grads: Parameters,
}

/// Forward and backward pass over all layers for one sample, no dropout.
pub fn sample_gradient(model: &Model, ids: &[u32], gold: usize) -> Result<SampleGradient> {
    let mut grads = model.params.zeros_like();
    let loss = accumulate_gradient::<ChaCha8Rng>(model, ids, gold, None, &mut grads, 1.0)?;
    Ok(SampleGradient { loss, grads })
}

/// Adds `scale` times the gradient of one sample's total loss into `grads`.
fn accumulate_gradient<R: rand::Rng>(
    model: &Model,
    ids: &[u32],
    gold: usize,
    mut dropout: Option<(f64, &mut R)>,
    grads: &mut Parameters,
    scale: f64,
) -> Result<LossReport> {
    let cfg = &model.cfg;
    let p = &model.params;
    let depth = cfg.depth;
    if gold >= cfg.num_classes {
        return Err(Error::input(format!(
            "label {gold} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let (x0, rows) = embed_rows(ids, model)?;
    let key_mask: Vec<bool> = ids.iter().map(|&t| t != PAD_ID).collect();

    let mut states = Vec::with_capacity(depth + 1);
    let mut caches: Vec<EncoderCache> = Vec::with_capacity(depth);
    states.push(x0);
    for layer in 1..=depth {
        let dr = dropout.as_mut().map(|(rate, rng)| Dropout {
            rate: *rate,
            rng: &mut **rng,
        });
        let (y, cache) = encoder_forward(
            &p.encoder,
            cfg.num_heads,
            states[layer - 1].view(),
            &key_mask,
            dr,
        );
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer,
                msg: "non-finite activation during training".into(),
            });
        }
        states.push(y);
        caches.push(cache);
    }

    let mut probs = Vec::with_capacity(depth);
    let mut per_layer = Vec::with_capacity(depth);
    for (layer, h) in states.iter().enumerate().skip(1) {
        let logits = cls_logits(h, p);
        let dist = ProbDist::from_logits(layer, &logits);
        let l = exit_loss(&dist, gold)?;
        if !l.is_finite() {
            return Err(Error::Numeric {
                layer,
                msg: "non-finite loss".into(),
            });
        }
        per_layer.push(l);
        probs.push(softmax(&logits));
    }
    let t = p.exit_t.as_slice().expect("contiguous");
    let loss = report(per_layer, t, depth);
    if loss.weights[depth - 1] < 0.0 {
        log::warn!(
            "last-layer loss weight is negative ({:.4})",
            loss.weights[depth - 1]
        );
    }

    // d total / d t_i = sigma'(t_i) (L_i - L_M)
    let last = loss.per_layer[depth - 1];
    for (i, g) in grads.exit_t.iter_mut().enumerate() {
        let sg = sigmoid(t[i]);
        *g += scale * sg * (1.0 - sg) * (loss.per_layer[i] - last);
    }

    let (len, d) = states[0].dim();
    let mut dy = Array2::<f64>::zeros((len, d));
    for layer in (1..=depth).rev() {
        let i = layer - 1;
        if loss.per_layer[i] < LOSS_CEILING {
            let mut dlogits = Array1::from(probs[i].clone());
            dlogits[gold] -= 1.0;
            dlogits *= scale * loss.weights[i];
            let cls_row = states[layer].row(0);
            for (r, &x) in cls_row.iter().enumerate() {
                grads.cls_w.row_mut(r).scaled_add(x, &dlogits);
            }
            grads.cls_b += &dlogits;
            let dcls = p.cls_w.dot(&dlogits);
            dy.row_mut(0).scaled_add(1.0, &dcls);
        }
        dy = encoder_backward(
            &p.encoder,
            cfg.num_heads,
            states[layer - 1].view(),
            &caches[i],
            dy,
            &mut grads.encoder,
        );
    }

    // embedding: x0 = rows . P + pos
    grads
        .pos_embed
        .slice_mut(s![..len, ..])
        .scaled_add(1.0, &dy);
    grads.embed_proj += &rows.t().dot(&dy);
    let drows = dy.dot(&p.embed_proj.t());
    for (pos, &tok) in ids.iter().enumerate() {
        grads
            .token_embed
            .row_mut(tok as usize)
            .scaled_add(1.0, &drows.row(pos));
    }
    Ok(loss)
}

fn encoder_backward(
    block: &EncoderBlock,
    num_heads: usize,
    x: ArrayView2<f64>,
    c: &EncoderCache,
    dy2: Array2<f64>,
    g: &mut EncoderBlock,
) -> Array2<f64> {
    let d = x.ncols();
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // y2 = LN(y1 + ff)
    let dr2 = layer_norm_backward(
        &dy2,
        &c.ln2_xhat,
        &c.ln2_inv_std,
        &block.ln2_gain,
        &mut g.ln2_gain,
        &mut g.ln2_bias,
    );
    let mut dy1 = dr2.clone();
    let mut dff = dr2;
    if let Some(m) = &c.ff_drop {
        dff *= m;
    }
    g.ff2_w += &c.ff_act.t().dot(&dff);
    g.ff2_b += &dff.sum_axis(Axis(0));
    let mut dpre = dff.dot(&block.ff2_w.t());
    dpre.zip_mut_with(&c.ff_pre, |g, &u| *g *= gelu_grad(u));
    g.ff1_w += &c.y1.t().dot(&dpre);
    g.ff1_b += &dpre.sum_axis(Axis(0));
    dy1 += &dpre.dot(&block.ff1_w.t());

    // y1 = LN(x + attn)
    let dr1 = layer_norm_backward(
        &dy1,
        &c.ln1_xhat,
        &c.ln1_inv_std,
        &block.ln1_gain,
        &mut g.ln1_gain,
        &mut g.ln1_bias,
    );
    let mut dx = dr1.clone();
    let mut dattn = dr1;
    if let Some(m) = &c.attn_drop {
        dattn *= m;
    }
    g.wo += &c.context.t().dot(&dattn);
    g.bo += &dattn.sum_axis(Axis(0));
    let dctx = dattn.dot(&block.wo.t());

    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for h in 0..num_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = c.attn.index_axis(Axis(0), h);
        let dctx_h = dctx.slice(cols);
        let da = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
        let mut ds = &a * &da;
        for (mut row, arow) in ds.outer_iter_mut().zip(a.outer_iter()) {
            let dot = row.sum();
            row.zip_mut_with(&arow, |v, &p| *v -= p * dot);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    for (w, b, dproj, wfwd) in [
        (&mut g.wq, &mut g.bq, &dq, &block.wq),
        (&mut g.wk, &mut g.bk, &dk, &block.wk),
        (&mut g.wv, &mut g.bv, &dv, &block.wv),
    ] {
        *w += &x.t().dot(dproj);
        *b += &dproj.sum_axis(Axis(0));
        dx += &dproj.dot(&wfwd.t());
    }
    dx
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xh), &istd) in dx.outer_iter_mut().zip(xhat.outer_iter()).zip(inv_std) {
        let mean_g = row.sum() / n;
        let mean_gx = row.dot(&xh) / n;
        row.zip_mut_with(&xh, |g, &xv| *g = istd * (*g - mean_g - xv * mean_gx));
    }
    dx
}

/// Adam with bias correction over every tensor, exit logits included.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Parameters,
    v: Parameters,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &Parameters, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn update(&mut self, params: &mut Parameters, grads: &Parameters) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let iter = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in iter {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Aggregates over one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub mean_layer_losses: Vec<f64>,
    /// Loss weights at the end of the epoch.
    pub weights: Vec<f64>,
}

impl EpochMetrics {
    /// `epoch,mean_total,L_1..L_M,w_1..w_M`
    pub fn to_csv_line(&self) -> String {
        let mut fields = vec![self.epoch.to_string(), self.mean_total_loss.to_string()];
        fields.extend(self.mean_layer_losses.iter().map(f64::to_string));
        fields.extend(self.weights.iter().map(f64::to_string));
        fields.join(",")
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

/// Mini-batch Adam over the multi-exit loss. Batch loss is the mean of the
/// per-sample totals. The dataset is reshuffled each epoch from a generator
/// seeded by `cfg.seed`; the input slice is never modified.
pub fn train(samples: &[Encoded], mut model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= model.cfg.num_classes) {
        return Err(Error::input(format!(
            "label {} out of range for {} classes",
            s.label, model.cfg.num_classes
        )));
    }
    if model.params.exit_t.len() + 1 != model.cfg.depth {
        model
            .params
            .resize_exit_weights(model.cfg.depth, cfg.t_init);
    }
    let depth = model.cfg.depth;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum_total = 0.0;
        let mut sum_layers = vec![0.0; depth];
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let s = &samples[idx];
                let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut rng));
                let loss =
                    accumulate_gradient(&model, &s.ids, s.label, dropout, &mut grads, scale)?;
                sum_total += loss.total;
                for (acc, l) in sum_layers.iter_mut().zip(&loss.per_layer) {
                    *acc += l;
                }
            }
            adam.update(&mut model.params, &grads);
            if !model.params.is_finite() {
                return Err(Error::Numeric {
                    layer: depth,
                    msg: format!("parameters became non-finite in epoch {epoch}"),
                });
            }
        }
        let n = samples.len() as f64;
        let weights = layer_weights(model.params.exit_t.as_slice().expect("contiguous"), depth);
        history.push(EpochMetrics {
            epoch,
            mean_total_loss: sum_total / n,
            mean_layer_losses: sum_layers.iter().map(|s| s / n).collect(),
            weights,
        });
    }
    Ok(TrainOutcome { model, history })
}

/// Result of comparing backpropagated gradients with finite differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, AUDIT_FLOOR)`.
    pub max_rel_error: f64,
    pub worst_coordinate: (String, usize),
    pub coordinates_checked: usize,
    /// Worst relative gap between backprop and `sigma'(t_i) (L_i - L_M)`.
    pub exit_t_closed_form_error: f64,
}

/// Gradients smaller than this are compared in absolute terms.
pub const AUDIT_FLOOR: f64 = 1e-6;

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(AUDIT_FLOOR)
}

/// Checks backprop against central differences with step `h` on a random
/// subset of `coords` parameters plus every exit logit.
pub fn gradient_audit(
    model: &Model,
    ids: &[u32],
    gold: usize,
    h: f64,
    coords: usize,
    seed: u64,
) -> Result<AuditReport> {
    let analytic = sample_gradient(model, ids, gold)?;
    let flat_grad = analytic.grads.to_flat();
    let total = flat_grad.len();
    let n_t = model.params.exit_t.len();
    let shared = total - n_t;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if coords >= shared {
        (0..shared).collect()
    } else {
        index::sample(&mut rng, shared, coords).into_vec()
    };
    picked.sort_unstable();
    picked.extend(shared..total);

    let loss_at = |m: &Model| -> Result<f64> {
        let trace = forward_full(ids, m)?;
        let t = m.params.exit_t.as_slice().expect("contiguous");
        Ok(total_loss(&trace, gold, t, m.cfg.depth)?.total)
    };

    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new(), 0usize);
    for &idx in &picked {
        let orig = *probe.params.flat_mut(idx);
        *probe.params.flat_mut(idx) = orig + h;
        let up = loss_at(&probe)?;
        *probe.params.flat_mut(idx) = orig - h;
        let down = loss_at(&probe)?;
        *probe.params.flat_mut(idx) = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = rel_error(flat_grad[idx], numeric);
        if err > worst.0 || worst.1.is_empty() {
            let (name, off) = model.params.locate(idx).expect("index in range");
            worst = (err.max(worst.0), name.to_string(), off);
        }
    }

    let t = model.params.exit_t.as_slice().expect("contiguous");
    let last = analytic.loss.per_layer[model.cfg.depth - 1];
    let closed = t
        .iter()
        .enumerate()
        .map(|(i, &ti)| {
            let sg = sigmoid(ti);
            let expected = sg * (1.0 - sg) * (analytic.loss.per_layer[i] - last);
            rel_error(analytic.grads.exit_t[i], expected)
        })
        .fold(0.0, f64::max);
    debug_assert!(model
        .params
        .locate(shared)
        .is_none_or(|(n, _)| n == EXIT_T_NAME));

    Ok(AuditReport {
        max_rel_error: worst.0,
        worst_coordinate: (worst.1, worst.2),
        coordinates_checked: picked.len(),
        exit_t_closed_form_error: closed,
    })
}
