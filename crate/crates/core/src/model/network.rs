use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, NormCache};
use super::{LayerOffsets, Model};
use crate::encode::EncodedInstance;
use crate::rng::{derived_rng, streams};
use crate::{Error, Result};

/// Weights of the two loss terms; a zero weight drops the term and its computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub nsp: f64,
    pub mlm: f64,
}

/// Batch losses: NSP is averaged over instances, MLM over masked positions in the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub nsp: f64,
    pub mlm: f64,
    pub total: f64,
    pub instances: usize,
    pub masked_positions: usize,
}

struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    context: Vec<f64>,
    attn_drop: Option<Vec<f64>>,
    norm1: NormCache,
    h1: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    ffn_drop: Option<Vec<f64>>,
    norm2: NormCache,
}

struct MlmCache {
    position: usize,
    pre_act: Vec<f64>,
    norm: NormCache,
    normed: Vec<f64>,
    logits: Vec<f64>,
}

struct Cache {
    n: usize,
    emb_norm: NormCache,
    emb_drop: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    output: Vec<f64>,
    pooled: Vec<f64>,
    nsp_logits: [f64; 2],
    mlm: Vec<MlmCache>,
}

struct Net<'m> {
    model: &'m Model,
    h: usize,
    f: usize,
    v: usize,
    heads: usize,
    dh: usize,
}

impl<'m> Net<'m> {
    fn new(model: &'m Model) -> Self {
        let c = &model.config;
        Self {
            model,
            h: c.hidden,
            f: c.ffn(),
            v: c.vocab_size,
            heads: c.heads,
            dh: c.head_dim(),
        }
    }

    fn p(&self, offset: usize, len: usize) -> &'m [f64] {
        &self.model.params[offset..offset + len]
    }

    fn decoder(&self) -> usize {
        let o = &self.model.layout.offsets;
        o.decoder.unwrap_or(o.word)
    }

    fn validate(&self, inst: &EncodedInstance, n: usize) -> Result<()> {
        let cfg = &self.model.config;
        if n > cfg.max_position {
            return Err(Error::SequenceTooLong {
                len: n,
                max: cfg.max_position,
            });
        }
        if inst.segment_ids.len() != inst.len() || inst.attention_mask.len() != inst.len() {
            return Err(Error::InvalidArgument("instance sequences differ in length".into()));
        }
        if let Some(&id) = inst.token_ids[..n].iter().find(|&&id| id as usize >= self.v) {
            return Err(Error::InvalidArgument(format!("token id {id} outside vocabulary")));
        }
        if inst.segment_ids[..n].iter().any(|&s| s as usize >= cfg.segment_types) {
            return Err(Error::InvalidArgument("segment id out of range".into()));
        }
        Ok(())
    }

    fn dropout_mask(&self, len: usize, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<f64>> {
        let p = self.model.config.dropout;
        let rng = rng?;
        if p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        Some((0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect())
    }

    /// Runs the encoder over the first `n` positions. MLM logits are produced for `mlm_positions`.
    fn forward(
        &self,
        inst: &EncodedInstance,
        n: usize,
        mlm_positions: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Cache {
        let o = &self.model.layout.offsets;
        let h = self.h;
        let mut x = vec![0.0; n * h];
        for pos in 0..n {
            let row = &mut x[pos * h..(pos + 1) * h];
            row.copy_from_slice(self.p(o.word + inst.token_ids[pos] as usize * h, h));
            kernels::axpy(1.0, self.p(o.position + pos * h, h), row);
            kernels::axpy(1.0, self.p(o.segment + inst.segment_ids[pos] as usize * h, h), row);
        }
        let mut hidden = vec![0.0; n * h];
        let emb_norm = kernels::layer_norm(&x, self.p(o.emb_norm_g, h), self.p(o.emb_norm_b, h), h, &mut hidden);
        let emb_drop = self.dropout_mask(n * h, rng.as_deref_mut());
        apply_mask(&mut hidden, emb_drop.as_deref());

        let keys: Vec<bool> = inst.attention_mask[..n].iter().map(|&m| m == 1).collect();
        let mut layers = Vec::with_capacity(o.layers.len());
        for lo in &o.layers {
            let (cache, out) = self.layer_forward(lo, hidden, &keys, n, rng.as_deref_mut());
            layers.push(cache);
            hidden = out;
        }

        let mut pre_pool = vec![0.0; h];
        kernels::linear(&hidden[..h], self.p(o.pooler_w, h * h), self.p(o.pooler_b, h), 1, h, h, &mut pre_pool);
        let pooled: Vec<f64> = pre_pool.iter().map(|&z| libm::tanh(z)).collect();
        let mut nsp = [0.0; 2];
        kernels::linear(&pooled, self.p(o.nsp_w, h * 2), self.p(o.nsp_b, 2), 1, h, 2, &mut nsp);

        let mlm = mlm_positions
            .iter()
            .map(|&pos| self.mlm_forward(&hidden[pos * h..(pos + 1) * h], pos))
            .collect();

        Cache {
            n,
            emb_norm,
            emb_drop,
            layers,
            output: hidden,
            pooled,
            nsp_logits: nsp,
            mlm,
        }
    }

    fn layer_forward(
        &self,
        lo: &LayerOffsets,
        input: Vec<f64>,
        keys: &[bool],
        n: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (LayerCache, Vec<f64>) {
        let (h, f, dh) = (self.h, self.f, self.dh);
        let mut q = vec![0.0; n * h];
        let mut k = vec![0.0; n * h];
        let mut v = vec![0.0; n * h];
        kernels::linear(&input, self.p(lo.query_w, h * h), self.p(lo.query_b, h), n, h, h, &mut q);
        kernels::linear(&input, self.p(lo.key_w, h * h), self.p(lo.key_b, h), n, h, h, &mut k);
        kernels::linear(&input, self.p(lo.value_w, h * h), self.p(lo.value_b, h), n, h, h, &mut v);

        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; self.heads * n * n];
        let mut context = vec![0.0; n * h];
        let any_key = keys.iter().any(|&k| k);
        for head in 0..self.heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..n {
                let row = &mut probs[(head * n + i) * n..(head * n + i + 1) * n];
                if !any_key {
                    continue;
                }
                let qi = &q[i * h + cols.start..i * h + cols.end];
                for j in 0..n {
                    row[j] = if keys[j] {
                        kernels::dot(qi, &k[j * h + cols.start..j * h + cols.end]) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                kernels::softmax_in_place(row);
                let ctx = &mut context[i * h + cols.start..i * h + cols.end];
                for j in 0..n {
                    if row[j] != 0.0 {
                        kernels::axpy(row[j], &v[j * h + cols.start..j * h + cols.end], ctx);
                    }
                }
            }
        }

        let mut attn = vec![0.0; n * h];
        kernels::linear(&context, self.p(lo.attn_out_w, h * h), self.p(lo.attn_out_b, h), n, h, h, &mut attn);
        let attn_drop = self.dropout_mask(n * h, rng.as_deref_mut());
        apply_mask(&mut attn, attn_drop.as_deref());
        for (a, x) in attn.iter_mut().zip(&input) {
            *a += x;
        }
        let mut h1 = vec![0.0; n * h];
        let norm1 = kernels::layer_norm(&attn, self.p(lo.attn_norm_g, h), self.p(lo.attn_norm_b, h), h, &mut h1);

        let mut pre_act = vec![0.0; n * f];
        kernels::linear(&h1, self.p(lo.ffn_in_w, h * f), self.p(lo.ffn_in_b, f), n, h, f, &mut pre_act);
        let act: Vec<f64> = pre_act.iter().map(|&z| kernels::gelu(z)).collect();
        let mut ffn = vec![0.0; n * h];
        kernels::linear(&act, self.p(lo.ffn_out_w, f * h), self.p(lo.ffn_out_b, h), n, f, h, &mut ffn);
        let ffn_drop = self.dropout_mask(n * h, rng);
        apply_mask(&mut ffn, ffn_drop.as_deref());
        for (a, x) in ffn.iter_mut().zip(&h1) {
            *a += x;
        }
        let mut out = vec![0.0; n * h];
        let norm2 = kernels::layer_norm(&ffn, self.p(lo.ffn_norm_g, h), self.p(lo.ffn_norm_b, h), h, &mut out);

        let cache = LayerCache {
            input,
            q,
            k,
            v,
            probs,
            context,
            attn_drop,
            norm1,
            h1,
            pre_act,
            act,
            ffn_drop,
            norm2,
        };
        (cache, out)
    }

    fn mlm_forward(&self, hidden: &[f64], position: usize) -> MlmCache {
        let o = &self.model.layout.offsets;
        let (h, v) = (self.h, self.v);
        let mut pre_act = vec![0.0; h];
        kernels::linear(hidden, self.p(o.mlm_w, h * h), self.p(o.mlm_b, h), 1, h, h, &mut pre_act);
        let act: Vec<f64> = pre_act.iter().map(|&z| kernels::gelu(z)).collect();
        let mut normed = vec![0.0; h];
        let norm = kernels::layer_norm(&act, self.p(o.mlm_norm_g, h), self.p(o.mlm_norm_b, h), h, &mut normed);
        let decoder = self.p(self.decoder(), v * h);
        let bias = self.p(o.mlm_bias, v);
        let logits = (0..v)
            .map(|t| kernels::dot(&normed, &decoder[t * h..(t + 1) * h]) + bias[t])
            .collect();
        MlmCache {
            position,
            pre_act,
            norm,
            normed,
            logits,
        }
    }

    /// Backpropagates `d_nsp` and per-MLM-position logit gradients into `grad`.
    fn backward(&self, inst: &EncodedInstance, cache: &Cache, d_nsp: [f64; 2], d_mlm: &[Vec<f64>], grad: &mut [f64]) {
        let o = &self.model.layout.offsets;
        let (h, v, n) = (self.h, self.v, cache.n);
        let mut d_hidden = vec![0.0; n * h];

        // MLM head
        let decoder_off = self.decoder();
        let decoder = self.p(decoder_off, v * h);
        for (mc, dl) in cache.mlm.iter().zip(d_mlm) {
            let mut d_normed = vec![0.0; h];
            kernels::axpy(1.0, dl, &mut grad[o.mlm_bias..o.mlm_bias + v]);
            for t in 0..v {
                if dl[t] != 0.0 {
                    kernels::axpy(dl[t], &mc.normed, &mut grad[decoder_off + t * h..decoder_off + (t + 1) * h]);
                    kernels::axpy(dl[t], &decoder[t * h..(t + 1) * h], &mut d_normed);
                }
            }
            let mut d_act = vec![0.0; h];
            let (g, b) = split_two(grad, o.mlm_norm_g, o.mlm_norm_b, h);
            kernels::layer_norm_backward(&mc.norm, self.p(o.mlm_norm_g, h), &d_normed, h, g, b, &mut d_act);
            let d_pre: Vec<f64> = d_act.iter().zip(&mc.pre_act).map(|(d, &z)| d * kernels::gelu_grad(z)).collect();
            let mut d_row = vec![0.0; h];
            let (dw, db) = split_two(grad, o.mlm_w, o.mlm_b, h * h);
            let span = mc.position * h..(mc.position + 1) * h;
            kernels::linear_backward(
                &cache.output[span.clone()],
                self.p(o.mlm_w, h * h),
                &d_pre,
                1,
                h,
                h,
                dw,
                &mut db[..h],
                Some(&mut d_row),
            );
            kernels::axpy(1.0, &d_row, &mut d_hidden[span]);
        }

        // NSP head and pooler
        if d_nsp != [0.0, 0.0] {
            let mut d_pooled = vec![0.0; h];
            let (dw, db) = split_two(grad, o.nsp_w, o.nsp_b, h * 2);
            kernels::linear_backward(&cache.pooled, self.p(o.nsp_w, h * 2), &d_nsp, 1, h, 2, dw, &mut db[..2], Some(&mut d_pooled));
            let d_pre: Vec<f64> = d_pooled.iter().zip(&cache.pooled).map(|(d, p)| d * (1.0 - p * p)).collect();
            let mut d_first = vec![0.0; h];
            let (dw, db) = split_two(grad, o.pooler_w, o.pooler_b, h * h);
            kernels::linear_backward(&cache.output[..h], self.p(o.pooler_w, h * h), &d_pre, 1, h, h, dw, &mut db[..h], Some(&mut d_first));
            kernels::axpy(1.0, &d_first, &mut d_hidden[..h]);
        }

        for (lo, lc) in o.layers.iter().zip(&cache.layers).rev() {
            d_hidden = self.layer_backward(lo, lc, &d_hidden, n, grad);
        }

        apply_mask(&mut d_hidden, cache.emb_drop.as_deref());
        let mut d_x = vec![0.0; n * h];
        let (g, b) = split_two(grad, o.emb_norm_g, o.emb_norm_b, h);
        kernels::layer_norm_backward(&cache.emb_norm, self.p(o.emb_norm_g, h), &d_hidden, h, g, b, &mut d_x);
        for pos in 0..n {
            let row = &d_x[pos * h..(pos + 1) * h];
            let w = o.word + inst.token_ids[pos] as usize * h;
            kernels::axpy(1.0, row, &mut grad[w..w + h]);
            let p = o.position + pos * h;
            kernels::axpy(1.0, row, &mut grad[p..p + h]);
            let s = o.segment + inst.segment_ids[pos] as usize * h;
            kernels::axpy(1.0, row, &mut grad[s..s + h]);
        }
    }

    fn layer_backward(&self, lo: &LayerOffsets, lc: &LayerCache, d_out: &[f64], n: usize, grad: &mut [f64]) -> Vec<f64> {
        let (h, f, dh) = (self.h, self.f, self.dh);

        let mut d_r2 = vec![0.0; n * h];
        let (g, b) = split_two(grad, lo.ffn_norm_g, lo.ffn_norm_b, h);
        kernels::layer_norm_backward(&lc.norm2, self.p(lo.ffn_norm_g, h), d_out, h, g, b, &mut d_r2);
        let mut d_h1 = d_r2.clone();
        let mut d_ffn = d_r2;
        apply_mask(&mut d_ffn, lc.ffn_drop.as_deref());
        let mut d_act = vec![0.0; n * f];
        let (dw, db) = split_two(grad, lo.ffn_out_w, lo.ffn_out_b, f * h);
        kernels::linear_backward(&lc.act, self.p(lo.ffn_out_w, f * h), &d_ffn, n, f, h, dw, &mut db[..h], Some(&mut d_act));
        for (d, &z) in d_act.iter_mut().zip(&lc.pre_act) {
            *d *= kernels::gelu_grad(z);
        }
        let mut d_tmp = vec![0.0; n * h];
        let (dw, db) = split_two(grad, lo.ffn_in_w, lo.ffn_in_b, h * f);
        kernels::linear_backward(&lc.h1, self.p(lo.ffn_in_w, h * f), &d_act, n, h, f, dw, &mut db[..f], Some(&mut d_tmp));
        kernels::axpy(1.0, &d_tmp, &mut d_h1);

        let mut d_r1 = vec![0.0; n * h];
        let (g, b) = split_two(grad, lo.attn_norm_g, lo.attn_norm_b, h);
        kernels::layer_norm_backward(&lc.norm1, self.p(lo.attn_norm_g, h), &d_h1, h, g, b, &mut d_r1);
        let mut d_input = d_r1.clone();
        let mut d_attn = d_r1;
        apply_mask(&mut d_attn, lc.attn_drop.as_deref());
        let mut d_ctx = vec![0.0; n * h];
        let (dw, db) = split_two(grad, lo.attn_out_w, lo.attn_out_b, h * h);
        kernels::linear_backward(&lc.context, self.p(lo.attn_out_w, h * h), &d_attn, n, h, h, dw, &mut db[..h], Some(&mut d_ctx));

        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut d_q = vec![0.0; n * h];
        let mut d_k = vec![0.0; n * h];
        let mut d_v = vec![0.0; n * h];
        let mut d_p = vec![0.0; n];
        for head in 0..self.heads {
            let c0 = head * dh;
            for i in 0..n {
                let probs = &lc.probs[(head * n + i) * n..(head * n + i + 1) * n];
                let dci = &d_ctx[i * h + c0..i * h + c0 + dh];
                let mut weighted = 0.0;
                for j in 0..n {
                    if probs[j] == 0.0 {
                        d_p[j] = 0.0;
                        continue;
                    }
                    d_p[j] = kernels::dot(dci, &lc.v[j * h + c0..j * h + c0 + dh]);
                    weighted += probs[j] * d_p[j];
                    kernels::axpy(probs[j], dci, &mut d_v[j * h + c0..j * h + c0 + dh]);
                }
                for j in 0..n {
                    if probs[j] == 0.0 {
                        continue;
                    }
                    let ds = probs[j] * (d_p[j] - weighted) * scale;
                    kernels::axpy(ds, &lc.k[j * h + c0..j * h + c0 + dh], &mut d_q[i * h + c0..i * h + c0 + dh]);
                    kernels::axpy(ds, &lc.q[i * h + c0..i * h + c0 + dh], &mut d_k[j * h + c0..j * h + c0 + dh]);
                }
            }
        }

        for (d, w, bias) in [(&d_q, lo.query_w, lo.query_b), (&d_k, lo.key_w, lo.key_b), (&d_v, lo.value_w, lo.value_b)] {
            let (dw, db) = split_two(grad, w, bias, h * h);
            kernels::linear_backward(&lc.input, self.p(w, h * h), d, n, h, h, dw, &mut db[..h], Some(&mut d_tmp));
            kernels::axpy(1.0, &d_tmp, &mut d_input);
        }
        d_input
    }
}

fn apply_mask(x: &mut [f64], mask: Option<&[f64]>) {
    if let Some(mask) = mask {
        for (v, m) in x.iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

/// Disjoint mutable views of a weight tensor at `a` (length `len_a`) and the tensor at `b`,
/// which must come after it.
fn split_two(grad: &mut [f64], a: usize, b: usize, len_a: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len_a <= b);
    let (head, tail) = grad.split_at_mut(b);
    (&mut head[a..a + len_a], tail)
}

/// Evaluation-mode pass over the first `n` positions; MLM logits for all of them when asked.
pub(super) fn infer(model: &Model, inst: &EncodedInstance, n: usize, with_mlm: bool) -> ([f64; 2], Vec<f64>) {
    let net = Net::new(model);
    let positions: Vec<usize> = if with_mlm { (0..n).collect() } else { Vec::new() };
    let cache = net.forward(inst, n, &positions, None);
    let mlm = cache.mlm.into_iter().flat_map(|m| m.logits).collect();
    (cache.nsp_logits, mlm)
}

pub(super) fn loss_and_grad(
    model: &Model,
    batch: &[EncodedInstance],
    weights: LossWeights,
    mut grad: Option<&mut [f64]>,
    dropout_seed: Option<u64>,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no instances"));
    }
    if let Some(g) = grad.as_deref() {
        if g.len() != model.params.len() {
            return Err(Error::InvalidArgument("gradient buffer size mismatch".into()));
        }
    }
    let net = Net::new(model);
    let use_mlm = weights.mlm != 0.0;
    let use_nsp = weights.nsp != 0.0;
    let masked_total: usize = if use_mlm {
        batch.iter().map(EncodedInstance::masked_positions).sum()
    } else {
        0
    };
    let mut out = LossBreakdown {
        instances: batch.len(),
        masked_positions: masked_total,
        ..LossBreakdown::default()
    };
    let nsp_scale = weights.nsp / batch.len() as f64;
    let mlm_scale = if masked_total > 0 {
        weights.mlm / masked_total as f64
    } else {
        0.0
    };

    for (idx, inst) in batch.iter().enumerate() {
        let n = inst.active_len();
        if n == 0 {
            return Err(Error::InvalidArgument(format!("instance {idx} has no attended tokens")));
        }
        net.validate(inst, n)?;
        let positions: Vec<usize> = if use_mlm {
            (0..n).filter(|&p| inst.mlm_labels[p].is_some()).collect()
        } else {
            Vec::new()
        };
        let mut rng = dropout_seed
            .filter(|_| model.config.dropout > 0.0)
            .map(|seed| derived_rng(seed, streams::DROPOUT, idx as u64));
        let cache = net.forward(inst, n, &positions, rng.as_mut());

        let mut d_nsp = [0.0; 2];
        if use_nsp {
            let mut probs = cache.nsp_logits;
            let lse = kernels::softmax_in_place(&mut probs);
            let target = usize::from(inst.nsp_label);
            out.nsp += lse - cache.nsp_logits[target];
            d_nsp = probs;
            d_nsp[target] -= 1.0;
            d_nsp.iter_mut().for_each(|d| *d *= nsp_scale);
        }
        let mut d_mlm = Vec::with_capacity(cache.mlm.len());
        for mc in &cache.mlm {
            let label = inst.mlm_labels[mc.position].expect("selected position") as usize;
            if label >= net.v {
                return Err(Error::InvalidArgument(format!("MLM label {label} outside vocabulary")));
            }
            let mut probs = mc.logits.clone();
            let lse = kernels::softmax_in_place(&mut probs);
            out.mlm += lse - mc.logits[label];
            probs[label] -= 1.0;
            probs.iter_mut().for_each(|d| *d *= mlm_scale);
            d_mlm.push(probs);
        }
        if let Some(g) = grad.as_deref_mut() {
            net.backward(inst, &cache, d_nsp, &d_mlm, g);
        }
    }
    out.nsp /= batch.len() as f64;
    if masked_total > 0 {
        out.mlm /= masked_total as f64;
    }
    out.total = if use_nsp { weights.nsp * out.nsp } else { 0.0 } + if use_mlm { weights.mlm * out.mlm } else { 0.0 };
    Ok(out)
}
