use std::collections::BTreeMap;

use crate::corpus::{EncodedSentence, PAD};
use crate::embeddings::{assemble, ChannelSet};
use crate::error::{Error, Result};
use crate::numerics::{dropout_mask, softmax, Matrix, Rng};

use super::layers::{attend, conv_pre, pool_region, window_offset, Attended, Pooled};
use super::{ModelConfig, ModelParams, Pooling};

pub enum Mode<'a> {
    /// Dropout masks are drawn from the given stream.
    Train(&'a mut Rng),
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionTrace {
    pub region_size: usize,
    /// `m x p` pre-activation responses including the bias.
    pub pre_activation: Matrix,
    pub attention: Attended,
    pub pooled: Pooled,
}

impl RegionTrace {
    pub fn weights(&self) -> &[f64] {
        &self.attention.weights
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// One `s x d` matrix per channel.
    pub input: Vec<Matrix>,
    pub ids: Vec<usize>,
    pub true_len: usize,
    pub regions: Vec<RegionTrace>,
    /// Concatenated pooled vector before dropout.
    pub pooled: Vec<f64>,
    pub mask: Option<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn forward(
    sent: &EncodedSentence,
    channels: &ChannelSet,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode<'_>,
) -> Result<ForwardTrace> {
    let mask = match mode {
        Mode::Train(rng) if cfg.dropout > 0.0 => {
            Some(dropout_mask(rng, cfg.pooled_len(), cfg.dropout)?.into_vec())
        }
        _ => None,
    };
    forward_with_mask(sent, channels, params, cfg, mask)
}

/// Forward pass with an explicit dropout mask over the pooled vector.
pub fn forward_with_mask(
    sent: &EncodedSentence,
    channels: &ChannelSet,
    params: &ModelParams,
    cfg: &ModelConfig,
    mask: Option<Vec<f64>>,
) -> Result<ForwardTrace> {
    check_inputs(sent, channels, params, cfg)?;
    if let Some(mask) = &mask {
        if mask.len() != cfg.pooled_len() {
            return Err(Error::Shape(format!(
                "dropout mask of length {} for pooled vector of length {}",
                mask.len(),
                cfg.pooled_len()
            )));
        }
    }

    let input = assemble(sent, channels);
    let mut regions = Vec::with_capacity(cfg.region_sizes.len());
    let mut pooled = Vec::with_capacity(cfg.pooled_len());
    for (&h, rp) in cfg.region_sizes.iter().zip(&params.regions) {
        let mut pre_rows = Vec::with_capacity(cfg.filters);
        for j in 0..cfg.filters {
            pre_rows.push(conv_pre(
                &input,
                rp.filters.row(j),
                rp.biases[j],
                h,
                cfg.padding,
                sent.true_len,
            )?);
        }
        let p = pre_rows[0].len();
        let mut features = Matrix::zeros(p, cfg.filters);
        for (j, row) in pre_rows.iter().enumerate() {
            for (q, &z) in row.iter().enumerate() {
                features[(q, j)] = cfg.activation.apply(z);
            }
        }
        let pre_activation = Matrix::from_vec(cfg.filters, p, pre_rows.concat())?;
        let attention = attend(features, &rp.attn_w, &rp.attn_b, &params.context)?;
        let pool = pool_region(&attention.attended, cfg.pooling);
        pooled.extend_from_slice(&pool.values);
        regions.push(RegionTrace {
            region_size: h,
            pre_activation,
            attention,
            pooled: pool,
        });
    }

    let c = cfg.classes;
    let mut logits = params.dense_b.clone();
    for (r, &o) in pooled.iter().enumerate() {
        let o = mask.as_ref().map_or(o, |m| o * m[r]);
        if o == 0.0 {
            continue;
        }
        for (l, w) in logits.iter_mut().zip(params.dense_w.row(r)) {
            *l += o * w;
        }
    }
    debug_assert_eq!(logits.len(), c);
    let probs = softmax(&logits);

    Ok(ForwardTrace {
        input,
        ids: sent.ids.clone(),
        true_len: sent.true_len,
        regions,
        pooled,
        mask,
        logits,
        probs,
    })
}

fn check_inputs(
    sent: &EncodedSentence,
    channels: &ChannelSet,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<()> {
    if channels.len() != cfg.channels || channels.dim() != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "model expects {} channel(s) of dimension {}, got {} of dimension {}",
            cfg.channels,
            cfg.embed_dim,
            channels.len(),
            channels.dim()
        )));
    }
    if let Some(&id) = sent.ids.iter().find(|&&id| id >= channels.vocab_size()) {
        return Err(Error::Shape(format!(
            "token id {id} outside embedding table of {} rows",
            channels.vocab_size()
        )));
    }
    if sent.true_len == 0 || sent.true_len > sent.ids.len() {
        return Err(Error::Shape(format!(
            "sentence length {} invalid for {} slots",
            sent.true_len,
            sent.ids.len()
        )));
    }
    params.check_shapes(cfg)
}

/// Parameter gradients plus sparse rows for trainable embedding channels,
/// keyed by `(channel, token id)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: ModelParams,
    pub embeddings: BTreeMap<(usize, usize), Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            params: params.zeros_like(),
            embeddings: BTreeMap::new(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self
            .params
            .tensors_mut()
            .into_iter()
            .zip(other.params.tensors())
        {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
        for (key, row) in &other.embeddings {
            match self.embeddings.get_mut(key) {
                Some(acc) => acc.iter_mut().zip(row).for_each(|(x, y)| *x += y),
                None => {
                    self.embeddings.insert(*key, row.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.params.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
        for row in self.embeddings.values_mut() {
            row.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Reverse-mode gradients of `-ln P[target]` for the pass recorded in
/// `trace`. Embedding rows are produced only for trainable channels and never
/// for PAD.
pub fn backward(
    trace: &ForwardTrace,
    target: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
    channels: &ChannelSet,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(params);
    accumulate_gradients(trace, target, params, cfg, channels, &mut grads)?;
    Ok(grads)
}

/// Adds the gradients of one traced example into `grads`.
pub fn accumulate_gradients(
    trace: &ForwardTrace,
    target: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
    channels: &ChannelSet,
    grads: &mut Gradients,
) -> Result<()> {
    let c = cfg.classes;
    let m = cfg.filters;
    if target >= c {
        return Err(Error::Config(format!(
            "target {target} outside {c} classes"
        )));
    }
    if trace.regions.len() != params.regions.len()
        || trace.pooled.len() != cfg.pooled_len()
        || trace.probs.len() != c
        || trace.input.len() != channels.len()
    {
        return Err(Error::Shape("trace does not match the model".into()));
    }
    params.check_shapes(cfg)?;
    grads.params.check_shapes(cfg)?;

    let g = &mut grads.params;

    let mut dlogits = trace.probs.clone();
    dlogits[target] -= 1.0;

    let scale = |r: usize| trace.mask.as_ref().map_or(1.0, |mk| mk[r]);
    let mut d_pooled = vec![0.0; trace.pooled.len()];
    for (r, (&o, dp)) in trace.pooled.iter().zip(d_pooled.iter_mut()).enumerate() {
        let s = scale(r);
        let od = o * s;
        let w = params.dense_w.row(r);
        let gw = g.dense_w.row_mut(r);
        let mut acc = 0.0;
        for ((gwc, &wc), &dl) in gw.iter_mut().zip(w).zip(&dlogits) {
            *gwc += od * dl;
            acc += wc * dl;
        }
        *dp = acc * s;
    }
    for (gb, &dl) in g.dense_b.iter_mut().zip(&dlogits) {
        *gb += dl;
    }

    let trainable: Vec<bool> = channels.channels.iter().map(|t| t.trainable).collect();
    let want_input_grad = trainable.iter().any(|&t| t);
    let d = cfg.embed_dim;
    let (s_rows, k_channels) = (trace.input[0].rows(), trace.input.len());
    let mut d_input: Vec<Matrix> = if want_input_grad {
        vec![Matrix::zeros(s_rows, d); k_channels]
    } else {
        Vec::new()
    };

    for (i, (rt, rp)) in trace.regions.iter().zip(&params.regions).enumerate() {
        let h = rt.region_size;
        let att = &rt.attention;
        let (p, _) = att.features.shape();
        let ka = params.context.len();
        let d_pool = &d_pooled[i * m..(i + 1) * m];
        let gr = &mut g.regions[i];

        // pooling
        let mut d_att = Matrix::zeros(p, m);
        match cfg.pooling {
            Pooling::Max | Pooling::Min => {
                for (j, (&row, &dp)) in rt.pooled.rows.iter().zip(d_pool).enumerate() {
                    d_att[(row, j)] = dp;
                }
            }
            Pooling::Average => {
                for q in 0..p {
                    for (j, &dp) in d_pool.iter().enumerate() {
                        d_att[(q, j)] = dp / p as f64;
                    }
                }
            }
        }

        // row reweighting by the attention weights
        let a = &att.weights;
        let mut d_feat = Matrix::zeros(p, m);
        let mut d_a = vec![0.0; p];
        for q in 0..p {
            let mut acc = 0.0;
            for j in 0..m {
                let upstream = d_att[(q, j)];
                d_feat[(q, j)] = a[q] * upstream;
                acc += upstream * att.features[(q, j)];
            }
            d_a[q] = acc;
        }

        // softmax over positions
        let dot: f64 = a.iter().zip(&d_a).map(|(x, y)| x * y).sum();
        let d_score: Vec<f64> = a
            .iter()
            .zip(&d_a)
            .map(|(&aq, &dq)| aq * (dq - dot))
            .collect();

        // scores = tanh(X W + b) . u
        let mut d_z = Matrix::zeros(p, ka);
        for q in 0..p {
            let hidden = att.hidden.row(q);
            for l in 0..ka {
                g.context[l] += d_score[q] * hidden[l];
                d_z[(q, l)] = d_score[q] * params.context[l] * (1.0 - hidden[l] * hidden[l]);
            }
        }
        for q in 0..p {
            let dz = d_z.row(q);
            for j in 0..m {
                let x = att.features[(q, j)];
                let w = rp.attn_w.row(j);
                let gw = gr.attn_w.row_mut(j);
                let mut acc = 0.0;
                for l in 0..ka {
                    gw[l] += x * dz[l];
                    acc += dz[l] * w[l];
                }
                d_feat[(q, j)] += acc;
            }
            for (gb, &v) in gr.attn_b.iter_mut().zip(dz) {
                *gb += v;
            }
        }

        // activation and convolution
        let off = window_offset(h, cfg.padding);
        let limit = trace.true_len.min(s_rows);
        for j in 0..m {
            let filter = rp.filters.row(j);
            let pre = rt.pre_activation.row(j);
            let mut d_bias = 0.0;
            let gf = gr.filters.row_mut(j);
            for q in 0..p {
                let go = d_feat[(q, j)] * cfg.activation.derivative(pre[q]);
                if go == 0.0 {
                    continue;
                }
                d_bias += go;
                for (k, input) in trace.input.iter().enumerate() {
                    for r in 0..h {
                        let Some(t) = (q + r).checked_sub(off) else {
                            continue;
                        };
                        if t >= limit {
                            continue;
                        }
                        let base = (k * h + r) * d;
                        let row = input.row(t);
                        for c in 0..d {
                            gf[base + c] += go * row[c];
                        }
                        if want_input_grad && trainable[k] {
                            let di = d_input[k].row_mut(t);
                            for c in 0..d {
                                di[c] += go * filter[base + c];
                            }
                        }
                    }
                }
            }
            gr.biases[j] += d_bias;
        }
    }

    for (k, di) in d_input.iter().enumerate() {
        if !trainable[k] {
            continue;
        }
        for t in 0..trace.true_len {
            let id = trace.ids[t];
            if id == PAD {
                continue;
            }
            let row = di.row(t);
            match grads.embeddings.get_mut(&(k, id)) {
                Some(acc) => acc.iter_mut().zip(row).for_each(|(x, y)| *x += y),
                None => {
                    grads.embeddings.insert((k, id), row.to_vec());
                }
            }
        }
    }
    Ok(())
}
