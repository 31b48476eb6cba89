//! Caching teacher-forced forward pass and its reverse-mode twin.
//!
//! The forward here must agree bit-for-bit with the inference path in
//! `model::forward`; a test pins that. Backward visits the same graph in
//! reverse and accumulates into a zeroed mirror of the weights.

use crate::model::blocks::{gelu, gelu_deriv, rms_denom, rms_norm, rotary, rotary_inverse};
use crate::model::config::HeadKind;
use crate::model::weights::{AttnWeights, EmbedWeights, LayerWeights, MlpWeights, ModelWeights};
use crate::numerics::{axpy, dot, mat_vec, softmax_in_place, vec_mat, Matrix};

pub(crate) struct HeadCache {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
}

pub(crate) struct AttnCache {
    /// Normed query-side rows (for self-attention also the key side).
    x: Vec<Vec<f64>>,
    heads: Vec<HeadCache>,
}

pub(crate) struct MlpCache {
    x: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

pub(crate) struct LayerCache {
    input: Vec<Vec<f64>>,
    self_attn: AttnCache,
    after_sa: Vec<Vec<f64>>,
    cross_attn: Option<AttnCache>,
    after_ca: Vec<Vec<f64>>,
    mlp: MlpCache,
}

pub(crate) struct StackCache {
    layers: Vec<LayerCache>,
    pub(crate) output: Vec<Vec<f64>>,
}

fn zeros_like(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| vec![0.0; r.len()]).collect()
}

/// g[r][c] += x[r] * dy[c]
pub(crate) fn accumulate_outer(g: &mut Matrix, x: &[f64], dy: &[f64]) {
    let cols = g.cols();
    let data = g.data_mut();
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        let row = &mut data[r * cols..(r + 1) * cols];
        for (slot, &d) in row.iter_mut().zip(dy) {
            *slot += xr * d;
        }
    }
}

/// Backward through y = gain * x / rms(x). Adds into `dgain` and `dx`.
fn rms_backward(x: &[f64], gain: &[f64], dy: &[f64], dgain: &mut [f64], dx: &mut [f64]) {
    let n = x.len() as f64;
    let s = rms_denom(x);
    let mut proj = 0.0;
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] / s;
        proj += gain[i] * dy[i] * x[i];
    }
    let c = proj / (n * s * s * s);
    for i in 0..x.len() {
        dx[i] += gain[i] * dy[i] / s - x[i] * c;
    }
}

fn attn_forward(
    attn: &AttnWeights,
    x_q: &[Vec<f64>],
    x_k: &[Vec<f64>],
    q_pos0: f64,
    k_pos0: f64,
    causal: bool,
) -> (Vec<HeadCache>, Vec<Vec<f64>>) {
    let n_q = x_q.len();
    let d_head = attn.heads[0].w_q.cols();
    let d_model = attn.heads[0].w_o.cols();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut writes = vec![vec![0.0; d_model]; n_q];
    let heads = attn
        .heads
        .iter()
        .map(|hw| {
            let k: Vec<Vec<f64>> = x_k
                .iter()
                .enumerate()
                .map(|(t, r)| {
                    let mut k = vec_mat(r, &hw.w_k);
                    rotary(&mut k, k_pos0 + t as f64);
                    k
                })
                .collect();
            let v: Vec<Vec<f64>> = x_k.iter().map(|r| vec_mat(r, &hw.w_v)).collect();
            let mut q_rows = Vec::with_capacity(n_q);
            let mut attn_rows = Vec::with_capacity(n_q);
            let mut pooled_rows = Vec::with_capacity(n_q);
            for (j, r) in x_q.iter().enumerate() {
                let mut q = vec_mat(r, &hw.w_q);
                rotary(&mut q, q_pos0 + j as f64);
                let limit = if causal { (j + 1).min(k.len()) } else { k.len() };
                let mut a: Vec<f64> = (0..limit).map(|t| dot(&q, &k[t]) * scale).collect();
                softmax_in_place(&mut a, 1.0);
                let mut pooled = vec![0.0; d_head];
                for (t, &w) in a.iter().enumerate() {
                    axpy(&mut pooled, w, &v[t]);
                }
                axpy(&mut writes[j], 1.0, &vec_mat(&pooled, &hw.w_o));
                q_rows.push(q);
                attn_rows.push(a);
                pooled_rows.push(pooled);
            }
            HeadCache { q: q_rows, k, v, attn: attn_rows, pooled: pooled_rows }
        })
        .collect();
    (heads, writes)
}

#[allow(clippy::too_many_arguments)]
fn attn_backward(
    attn: &AttnWeights,
    gattn: &mut AttnWeights,
    heads: &[HeadCache],
    x_q: &[Vec<f64>],
    x_k: &[Vec<f64>],
    q_pos0: f64,
    k_pos0: f64,
    d_writes: &[Vec<f64>],
    d_x_q: &mut [Vec<f64>],
    d_x_k: &mut [Vec<f64>],
) {
    let d_head = attn.heads[0].w_q.cols();
    let scale = 1.0 / (d_head as f64).sqrt();
    for ((hw, gw), hc) in attn.heads.iter().zip(&mut gattn.heads).zip(heads) {
        let n_k = hc.k.len();
        let mut dk = vec![vec![0.0; d_head]; n_k];
        let mut dv = vec![vec![0.0; d_head]; n_k];
        for (j, dwrite) in d_writes.iter().enumerate() {
            accumulate_outer(&mut gw.w_o, &hc.pooled[j], dwrite);
            let dpooled = mat_vec(&hw.w_o, dwrite);
            let a = &hc.attn[j];
            let da: Vec<f64> = (0..a.len()).map(|t| dot(&dpooled, &hc.v[t])).collect();
            let inner: f64 = a.iter().zip(&da).map(|(w, g)| w * g).sum();
            let mut dq = vec![0.0; d_head];
            for t in 0..a.len() {
                let ds = a[t] * (da[t] - inner) * scale;
                axpy(&mut dq, ds, &hc.k[t]);
                axpy(&mut dk[t], ds, &hc.q[j]);
                axpy(&mut dv[t], a[t], &dpooled);
            }
            rotary_inverse(&mut dq, q_pos0 + j as f64);
            accumulate_outer(&mut gw.w_q, &x_q[j], &dq);
            axpy(&mut d_x_q[j], 1.0, &mat_vec(&hw.w_q, &dq));
        }
        for t in 0..n_k {
            rotary_inverse(&mut dk[t], k_pos0 + t as f64);
            accumulate_outer(&mut gw.w_k, &x_k[t], &dk[t]);
            axpy(&mut d_x_k[t], 1.0, &mat_vec(&hw.w_k, &dk[t]));
            accumulate_outer(&mut gw.w_v, &x_k[t], &dv[t]);
            axpy(&mut d_x_k[t], 1.0, &mat_vec(&hw.w_v, &dv[t]));
        }
    }
}

fn mlp_forward(mlp: &MlpWeights, x: &[Vec<f64>]) -> (MlpCache, Vec<Vec<f64>>) {
    let mut pre_rows = Vec::with_capacity(x.len());
    let mut act_rows = Vec::with_capacity(x.len());
    let mut writes = Vec::with_capacity(x.len());
    for row in x {
        let mut pre = vec_mat(row, &mlp.w_in);
        for (p, b) in pre.iter_mut().zip(&mlp.b_in) {
            *p += b;
        }
        let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
        let mut out = vec_mat(&act, &mlp.w_out);
        for (o, b) in out.iter_mut().zip(&mlp.b_out) {
            *o += b;
        }
        pre_rows.push(pre);
        act_rows.push(act);
        writes.push(out);
    }
    (MlpCache { x: x.to_vec(), pre: pre_rows, act: act_rows }, writes)
}

fn mlp_backward(
    mlp: &MlpWeights,
    gmlp: &mut MlpWeights,
    cache: &MlpCache,
    d_out: &[Vec<f64>],
    d_x: &mut [Vec<f64>],
) {
    for (j, dout) in d_out.iter().enumerate() {
        accumulate_outer(&mut gmlp.w_out, &cache.act[j], dout);
        axpy(&mut gmlp.b_out, 1.0, dout);
        let dact = mat_vec(&mlp.w_out, dout);
        let dpre: Vec<f64> =
            dact.iter().zip(&cache.pre[j]).map(|(&g, &u)| g * gelu_deriv(u)).collect();
        accumulate_outer(&mut gmlp.w_in, &cache.x[j], &dpre);
        axpy(&mut gmlp.b_in, 1.0, &dpre);
        axpy(&mut d_x[j], 1.0, &mat_vec(&mlp.w_in, &dpre));
    }
}

pub(crate) fn stack_forward(
    layers: &[LayerWeights],
    input: Vec<Vec<f64>>,
    q_pos0: f64,
    causal: bool,
    cross_src: Option<&[Vec<f64>]>,
) -> StackCache {
    let mut h = input;
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let input_rows = h.clone();
        let x_s: Vec<Vec<f64>> = h.iter().map(|r| rms_norm(r, &layer.norm_self)).collect();
        let (sa_heads, sa_writes) = attn_forward(&layer.self_attn, &x_s, &x_s, q_pos0, q_pos0, causal);
        for (row, w) in h.iter_mut().zip(&sa_writes) {
            axpy(row, 1.0, w);
        }
        let after_sa = h.clone();
        let cross = match (&layer.cross_attn, &layer.norm_cross, cross_src) {
            (Some(attn), Some(gain), Some(src)) => {
                let x_c: Vec<Vec<f64>> = h.iter().map(|r| rms_norm(r, gain)).collect();
                let (ca_heads, ca_writes) = attn_forward(attn, &x_c, src, q_pos0, 0.0, false);
                for (row, w) in h.iter_mut().zip(&ca_writes) {
                    axpy(row, 1.0, w);
                }
                Some(AttnCache { x: x_c, heads: ca_heads })
            }
            _ => None,
        };
        let after_ca = h.clone();
        let x_m: Vec<Vec<f64>> = h.iter().map(|r| rms_norm(r, &layer.norm_mlp)).collect();
        let (mlp_cache, mlp_writes) = mlp_forward(&layer.mlp, &x_m);
        for (row, w) in h.iter_mut().zip(&mlp_writes) {
            axpy(row, 1.0, w);
        }
        caches.push(LayerCache {
            input: input_rows,
            self_attn: AttnCache { x: x_s, heads: sa_heads },
            after_sa,
            cross_attn: cross,
            after_ca,
            mlp: mlp_cache,
        });
    }
    StackCache { layers: caches, output: h }
}

/// Reverse pass over a stack. `d_h` is the gradient at the stack output;
/// returns the gradient at the stack input. Cross-attention key/value
/// gradients accumulate into `d_cross_src`.
pub(crate) fn stack_backward(
    layers: &[LayerWeights],
    glayers: &mut [LayerWeights],
    cache: &StackCache,
    q_pos0: f64,
    cross_src: Option<&[Vec<f64>]>,
    mut d_cross_src: Option<&mut Vec<Vec<f64>>>,
    mut d_h: Vec<Vec<f64>>,
) -> Vec<Vec<f64>> {
    for ((layer, glayer), lc) in layers.iter().zip(glayers.iter_mut()).zip(&cache.layers).rev() {
        // h_out = after_ca + mlp(rms(after_ca))
        let mut d_xm = zeros_like(&lc.mlp.x);
        mlp_backward(&layer.mlp, &mut glayer.mlp, &lc.mlp, &d_h, &mut d_xm);
        for (j, row) in lc.after_ca.iter().enumerate() {
            rms_backward(row, &layer.norm_mlp, &d_xm[j], &mut glayer.norm_mlp, &mut d_h[j]);
        }

        // after_ca = after_sa + cross(rms(after_sa), enc)
        if let (Some(attn), Some(gain), Some(src), Some(ca)) =
            (&layer.cross_attn, &layer.norm_cross, cross_src, &lc.cross_attn)
        {
            let gattn = glayer.cross_attn.as_mut().expect("gradient mirror has cross weights");
            let ggain = glayer.norm_cross.as_mut().expect("gradient mirror has cross norm");
            let mut d_xc = zeros_like(&ca.x);
            let d_src = d_cross_src.as_mut().expect("cross gradient sink");
            attn_backward(attn, gattn, &ca.heads, &ca.x, src, q_pos0, 0.0, &d_h, &mut d_xc, d_src);
            for (j, row) in lc.after_sa.iter().enumerate() {
                rms_backward(row, gain, &d_xc[j], ggain, &mut d_h[j]);
            }
        }

        // after_sa = input + self(rms(input))
        let sa = &lc.self_attn;
        let mut d_xs = zeros_like(&sa.x);
        {
            // query and key sides share the same normed rows; split the
            // accumulator then merge to keep the borrow checker happy
            let mut d_xs_k = zeros_like(&sa.x);
            attn_backward(
                &layer.self_attn,
                &mut glayer.self_attn,
                &sa.heads,
                &sa.x,
                &sa.x,
                q_pos0,
                q_pos0,
                &d_h,
                &mut d_xs,
                &mut d_xs_k,
            );
            for (acc, extra) in d_xs.iter_mut().zip(&d_xs_k) {
                axpy(acc, 1.0, extra);
            }
        }
        for (j, row) in lc.input.iter().enumerate() {
            rms_backward(row, &layer.norm_self, &d_xs[j], &mut glayer.norm_self, &mut d_h[j]);
        }
    }
    d_h
}

/// Per-position loss gradient applied to the output map.
pub(crate) enum OutputTarget<'a> {
    /// Next-token cross entropy over the full vocabulary.
    Tokens(&'a [u32]),
    /// Direct next-patch values, with the head deciding point vs quantile.
    Patches { targets: &'a [Vec<f64>], head: HeadKind, levels: &'a [f64] },
}

/// Teacher-forced loss plus gradients for the whole model. `input_rows` are
/// embedded decoder inputs; embedding gradients are handled by the caller
/// through the returned input gradient. `weight` scales the gradient
/// contribution (1/batch for averaging); the returned loss is unweighted.
#[allow(clippy::too_many_arguments)]
pub(crate) fn model_loss_grad(
    weights: &ModelWeights,
    grads: Option<&mut ModelWeights>,
    enc_tokens: Option<&[u32]>,
    dec_rows: Vec<Vec<f64>>,
    dec_pos0: f64,
    target: OutputTarget,
    weight: f64,
) -> (f64, Option<Vec<Vec<f64>>>) {
    // encoder
    let (enc_cache, enc_normed) = match enc_tokens {
        Some(tokens) => {
            let table = match &weights.embed {
                EmbedWeights::Tokens { table } => table,
                EmbedWeights::Patch { .. } => unreachable!("token encoder needs a table"),
            };
            let rows: Vec<Vec<f64>> =
                tokens.iter().map(|&t| table.row(t as usize).to_vec()).collect();
            let cache = stack_forward(&weights.encoder, rows, 0.0, false, None);
            let gain = weights.encoder_norm.as_ref().expect("encoder norm");
            let normed: Vec<Vec<f64>> = cache.output.iter().map(|r| rms_norm(r, gain)).collect();
            (Some(cache), Some(normed))
        }
        None => (None, None),
    };

    // decoder
    let dec_cache =
        stack_forward(&weights.decoder, dec_rows, dec_pos0, true, enc_normed.as_deref());
    let pre_out: Vec<Vec<f64>> =
        dec_cache.output.iter().map(|r| rms_norm(r, &weights.final_norm)).collect();
    let n_loss = match &target {
        OutputTarget::Tokens(t) => t.len(),
        OutputTarget::Patches { targets, .. } => targets.len(),
    };
    debug_assert!(n_loss <= pre_out.len());
    let outputs: Vec<Vec<f64>> =
        pre_out.iter().take(n_loss).map(|r| vec_mat(r, &weights.w_out)).collect();

    // loss and its gradient at the output map
    let mut loss = 0.0;
    let mut d_outputs: Vec<Vec<f64>> = Vec::with_capacity(n_loss);
    match target {
        OutputTarget::Tokens(targets) => {
            let count = targets.len() as f64;
            for (out, &y) in outputs.iter().zip(targets) {
                let mut p = out.clone();
                softmax_in_place(&mut p, 1.0);
                let py = p[y as usize].max(f64::MIN_POSITIVE);
                loss -= py.ln() / count;
                let mut d = p;
                d[y as usize] -= 1.0;
                for g in d.iter_mut() {
                    *g *= weight / count;
                }
                d_outputs.push(d);
            }
        }
        OutputTarget::Patches { targets, head, levels } => {
            let p = targets.first().map_or(0, |t| t.len());
            match head {
                HeadKind::Point => {
                    let count = (targets.len() * p) as f64;
                    for (out, tgt) in outputs.iter().zip(targets) {
                        let mut d = vec![0.0; out.len()];
                        for i in 0..p {
                            let r = out[i] - tgt[i];
                            loss += r * r / count;
                            d[i] = 2.0 * r * weight / count;
                        }
                        d_outputs.push(d);
                    }
                }
                HeadKind::Quantile9 => {
                    let count = (targets.len() * p * levels.len()) as f64;
                    for (out, tgt) in outputs.iter().zip(targets) {
                        let mut d = vec![0.0; out.len()];
                        for (q, &tau) in levels.iter().enumerate() {
                            for i in 0..p {
                                let r = tgt[i] - out[q * p + i];
                                loss += r.max(0.0).mul_add(tau, (-r).max(0.0) * (1.0 - tau)) / count;
                                d[q * p + i] = if r > 0.0 {
                                    -tau
                                } else if r < 0.0 {
                                    1.0 - tau
                                } else {
                                    0.0
                                } * weight
                                    / count;
                            }
                        }
                        d_outputs.push(d);
                    }
                }
            }
        }
    }

    let Some(grads) = grads else {
        return (loss, None);
    };

    // output map and final norm
    let mut d_dec_out = zeros_like(&dec_cache.output);
    for (j, dout) in d_outputs.iter().enumerate() {
        accumulate_outer(&mut grads.w_out, &pre_out[j], dout);
        let d_pre = mat_vec(&weights.w_out, dout);
        rms_backward(
            &dec_cache.output[j],
            &weights.final_norm,
            &d_pre,
            &mut grads.final_norm,
            &mut d_dec_out[j],
        );
    }

    // decoder stack
    let mut d_enc_normed = enc_normed.as_ref().map(|rows| zeros_like(rows));
    let d_dec_in = {
        let (dec_w, dec_g) = (&weights.decoder, &mut grads.decoder);
        stack_backward(
            dec_w,
            dec_g,
            &dec_cache,
            dec_pos0,
            enc_normed.as_deref(),
            d_enc_normed.as_mut(),
            d_dec_out,
        )
    };

    // encoder stack and shared token table
    if let (Some(tokens), Some(cache), Some(d_normed)) = (enc_tokens, enc_cache, d_enc_normed) {
        let gain = weights.encoder_norm.as_ref().expect("encoder norm");
        let ggain = grads.encoder_norm.as_mut().expect("encoder norm gradient");
        let mut d_enc_out = zeros_like(&cache.output);
        for (i, row) in cache.output.iter().enumerate() {
            rms_backward(row, gain, &d_normed[i], ggain, &mut d_enc_out[i]);
        }
        let d_enc_in =
            stack_backward(&weights.encoder, &mut grads.encoder, &cache, 0.0, None, None, d_enc_out);
        let gtable = match &mut grads.embed {
            EmbedWeights::Tokens { table } => table,
            EmbedWeights::Patch { .. } => unreachable!("token encoder needs a table"),
        };
        for (i, &t) in tokens.iter().enumerate() {
            axpy(gtable.row_mut(t as usize), 1.0, &d_enc_in[i]);
        }
    }

    (loss, Some(d_dec_in))
}
