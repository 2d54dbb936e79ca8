//! Single-sequence forward pass with cached activations, and its exact
//! reverse-mode gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, NormCache};
use super::{cst, NllSum, Real, Transformer};

pub(crate) struct BlockCache<F> {
    ln1: NormCache<F>,
    qkv: Vec<F>,
    /// Softmax probabilities `[head][i][j]`, zero above the diagonal.
    pub(crate) probs: Vec<F>,
    attn_mask: Option<Vec<F>>,
    ctx: Vec<F>,
    resid1_mask: Option<Vec<F>>,
    ln2: NormCache<F>,
    fc_pre: Vec<F>,
    fc_act: Vec<F>,
    resid2_mask: Option<Vec<F>>,
}

/// Activations of one forward pass.
pub struct SeqCache<F> {
    emb_mask: Option<Vec<F>>,
    pub(crate) blocks: Vec<BlockCache<F>>,
    pub(crate) final_norm: NormCache<F>,
    pub(crate) logits: Vec<F>,
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
fn dropout_mask<F: Real>(rng: &mut Option<ChaCha8Rng>, p: f64, len: usize) -> Option<Vec<F>> {
    let rng = rng.as_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep: F = cst(1.0 / (1.0 - p));
    Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect(),
    )
}

fn apply_mask<F: Real>(v: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (x, k) in v.iter_mut().zip(m) {
            *x = *x * *k;
        }
    }
}

/// `Σ_t -ln softmax(logits[t])[ids[t+1]]`.
pub(crate) fn sequence_nll<F: Real>(logits: &[F], ids: &[u32], vocab: usize) -> NllSum {
    let mut nll = 0.0;
    for t in 0..ids.len().saturating_sub(1) {
        let mut row = logits[t * vocab..(t + 1) * vocab].to_vec();
        let lse = kernels::softmax_in_place(&mut row);
        nll += (lse - logits[t * vocab + ids[t + 1] as usize]).to_f64().unwrap();
    }
    NllSum {
        nll,
        targets: ids.len().saturating_sub(1),
    }
}

impl<F: Real> Transformer<F> {
    pub(crate) fn forward_cached(&self, ids: &[u32], slopes: &[F], mut rng: Option<ChaCha8Rng>) -> SeqCache<F> {
        let cfg = &self.config;
        let (l, d, h, dh, ff, v) = (
            ids.len(),
            cfg.d_model,
            cfg.n_heads,
            cfg.d_head(),
            cfg.d_ff,
            cfg.vocab_size,
        );
        let p = &self.params;
        let lay = &self.layout;
        let pdrop = cfg.dropout;
        let scale: F = cst(1.0 / (dh as f64).sqrt());

        let mut x = vec![F::zero(); l * d];
        for (t, &id) in ids.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            let e = lay.tok_emb + id as usize * d;
            row.copy_from_slice(&p[e..e + d]);
            if let Some(pos) = lay.pos_emb {
                axpy(F::one(), &p[pos + t * d..pos + (t + 1) * d], row);
            }
        }
        let emb_mask = dropout_mask(&mut rng, pdrop, l * d);
        apply_mask(&mut x, &emb_mask);

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for b in &lay.blocks {
            let x_in = x;
            let ln1 = layer_norm(&x_in, &p[b.ln1_g..b.ln1_g + d], &p[b.ln1_b..b.ln1_b + d], l, d);
            let qkv = linear(&ln1.out, &p[b.w_qkv..b.w_qkv + d * 3 * d], &p[b.b_qkv..b.b_qkv + 3 * d], l, d, 3 * d);

            let mut probs = vec![F::zero(); h * l * l];
            for hd in 0..h {
                let slope = slopes.get(hd).copied().unwrap_or_else(F::zero);
                for i in 0..l {
                    let q = &qkv[i * 3 * d + hd * dh..i * 3 * d + (hd + 1) * dh];
                    let row = &mut probs[(hd * l + i) * l..(hd * l + i) * l + i + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let k = &qkv[j * 3 * d + d + hd * dh..j * 3 * d + d + (hd + 1) * dh];
                        let dist = F::from_usize(i - j).unwrap();
                        *s = dot(q, k) * scale - slope * dist;
                    }
                    kernels::softmax_in_place(row);
                }
            }
            let attn_mask = dropout_mask(&mut rng, pdrop, h * l * l);
            let mut ctx = vec![F::zero(); l * d];
            for hd in 0..h {
                for i in 0..l {
                    let out = &mut ctx[i * d + hd * dh..i * d + (hd + 1) * dh];
                    for j in 0..=i {
                        let idx = (hd * l + i) * l + j;
                        let mut w = probs[idx];
                        if let Some(m) = &attn_mask {
                            w = w * m[idx];
                        }
                        let vj = &qkv[j * 3 * d + 2 * d + hd * dh..j * 3 * d + 2 * d + (hd + 1) * dh];
                        axpy(w, vj, out);
                    }
                }
            }
            let mut attn_out = linear(&ctx, &p[b.w_o..b.w_o + d * d], &p[b.b_o..b.b_o + d], l, d, d);
            let resid1_mask = dropout_mask(&mut rng, pdrop, l * d);
            apply_mask(&mut attn_out, &resid1_mask);
            let mut x_mid = x_in;
            axpy(F::one(), &attn_out, &mut x_mid);

            let ln2 = layer_norm(&x_mid, &p[b.ln2_g..b.ln2_g + d], &p[b.ln2_b..b.ln2_b + d], l, d);
            let fc_pre = linear(&ln2.out, &p[b.w_fc..b.w_fc + d * ff], &p[b.b_fc..b.b_fc + ff], l, d, ff);
            let fc_act: Vec<F> = fc_pre.iter().map(|&u| gelu(u)).collect();
            let mut mlp_out = linear(&fc_act, &p[b.w_proj..b.w_proj + ff * d], &p[b.b_proj..b.b_proj + d], l, ff, d);
            let resid2_mask = dropout_mask(&mut rng, pdrop, l * d);
            apply_mask(&mut mlp_out, &resid2_mask);
            let mut x_out = x_mid;
            axpy(F::one(), &mlp_out, &mut x_out);

            blocks.push(BlockCache {
                ln1,
                qkv,
                probs,
                attn_mask,
                ctx,
                resid1_mask,
                ln2,
                fc_pre,
                fc_act,
                resid2_mask,
            });
            x = x_out;
        }

        let final_norm = layer_norm(&x, &p[lay.lnf_g..lay.lnf_g + d], &p[lay.lnf_b..lay.lnf_b + d], l, d);
        let head = &p[lay.lm_head..lay.lm_head + v * d];
        let mut logits = vec![F::zero(); l * v];
        for t in 0..l {
            let hrow = &final_norm.out[t * d..(t + 1) * d];
            for (tok, out) in logits[t * v..(t + 1) * v].iter_mut().enumerate() {
                *out = dot(hrow, &head[tok * d..(tok + 1) * d]);
            }
        }
        SeqCache {
            emb_mask,
            blocks,
            final_norm,
            logits,
        }
    }

    /// Forward plus backward for one sequence; adds the gradient of the
    /// summed NLL into `g`.
    pub(crate) fn sequence_backward(&self, ids: &[u32], slopes: &[F], rng: Option<ChaCha8Rng>, g: &mut [F]) -> NllSum {
        let cache = self.forward_cached(ids, slopes, rng);
        let cfg = &self.config;
        let (l, d, h, dh, ff, v) = (
            ids.len(),
            cfg.d_model,
            cfg.n_heads,
            cfg.d_head(),
            cfg.d_ff,
            cfg.vocab_size,
        );
        let p = &self.params;
        let lay = &self.layout;
        let scale: F = cst(1.0 / (dh as f64).sqrt());

        // d(sum NLL)/d logits = softmax - onehot on rows with a target.
        let mut nll = 0.0;
        let mut dlogits = vec![F::zero(); l * v];
        for t in 0..l.saturating_sub(1) {
            let row = &mut dlogits[t * v..(t + 1) * v];
            row.copy_from_slice(&cache.logits[t * v..(t + 1) * v]);
            let lse = kernels::softmax_in_place(row);
            let target = ids[t + 1] as usize;
            nll += (lse - cache.logits[t * v + target]).to_f64().unwrap();
            row[target] = row[target] - F::one();
        }

        let mut dh_final = vec![F::zero(); l * d];
        for t in 0..l.saturating_sub(1) {
            let hrow = &cache.final_norm.out[t * d..(t + 1) * d];
            let dhrow = &mut dh_final[t * d..(t + 1) * d];
            for tok in 0..v {
                let gl = dlogits[t * v + tok];
                let e = lay.lm_head + tok * d;
                axpy(gl, &p[e..e + d], dhrow);
                axpy(gl, hrow, &mut g[e..e + d]);
            }
        }
        let (lo, hi) = g.split_at_mut(lay.lnf_b);
        let mut dx = layer_norm_backward(
            &cache.final_norm,
            &p[lay.lnf_g..lay.lnf_g + d],
            &dh_final,
            &mut lo[lay.lnf_g..lay.lnf_g + d],
            &mut hi[..d],
            l,
            d,
        );

        for (b, c) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch.
            let mut dmlp = dx.clone();
            apply_mask(&mut dmlp, &c.resid2_mask);
            let dact = {
                let (gw, gb) = split_pair(g, b.w_proj, ff * d, b.b_proj, d);
                linear_backward(&c.fc_act, &p[b.w_proj..b.w_proj + ff * d], &dmlp, gw, gb, l, ff, d)
            };
            let dpre: Vec<F> = dact.iter().zip(&c.fc_pre).map(|(&da, &u)| da * gelu_grad(u)).collect();
            let dln2 = {
                let (gw, gb) = split_pair(g, b.w_fc, d * ff, b.b_fc, ff);
                linear_backward(&c.ln2.out, &p[b.w_fc..b.w_fc + d * ff], &dpre, gw, gb, l, d, ff)
            };
            let dxm = {
                let (gg, gb) = split_pair(g, b.ln2_g, d, b.ln2_b, d);
                layer_norm_backward(&c.ln2, &p[b.ln2_g..b.ln2_g + d], &dln2, gg, gb, l, d)
            };
            axpy(F::one(), &dxm, &mut dx);

            // Attention branch.
            let mut dattn = dx.clone();
            apply_mask(&mut dattn, &c.resid1_mask);
            let dctx = {
                let (gw, gb) = split_pair(g, b.w_o, d * d, b.b_o, d);
                linear_backward(&c.ctx, &p[b.w_o..b.w_o + d * d], &dattn, gw, gb, l, d, d)
            };
            let mut dq = vec![F::zero(); l * d];
            let mut dk = vec![F::zero(); l * d];
            let mut dv = vec![F::zero(); l * d];
            let mut dp = vec![F::zero(); l];
            for hd in 0..h {
                let cols = hd * dh..(hd + 1) * dh;
                for i in 0..l {
                    let dc = &dctx[i * d + cols.start..i * d + cols.end];
                    let base = (hd * l + i) * l;
                    for j in 0..=i {
                        let vj = j * 3 * d + 2 * d + cols.start;
                        let mask = c.attn_mask.as_ref().map_or(F::one(), |m| m[base + j]);
                        dp[j] = dot(dc, &c.qkv[vj..vj + dh]) * mask;
                        axpy(c.probs[base + j] * mask, dc, &mut dv[j * d + cols.start..j * d + cols.end]);
                    }
                    let pr = &c.probs[base..base + i + 1];
                    let inner = dot(pr, &dp[..=i]);
                    let qi = i * 3 * d + cols.start;
                    for j in 0..=i {
                        let ds = pr[j] * (dp[j] - inner) * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        let kj = j * 3 * d + d + cols.start;
                        axpy(ds, &c.qkv[kj..kj + dh], &mut dq[i * d + cols.start..i * d + cols.end]);
                        axpy(ds, &c.qkv[qi..qi + dh], &mut dk[j * d + cols.start..j * d + cols.end]);
                    }
                }
            }
            let mut dqkv = vec![F::zero(); l * 3 * d];
            for t in 0..l {
                let row = &mut dqkv[t * 3 * d..(t + 1) * 3 * d];
                row[..d].copy_from_slice(&dq[t * d..(t + 1) * d]);
                row[d..2 * d].copy_from_slice(&dk[t * d..(t + 1) * d]);
                row[2 * d..].copy_from_slice(&dv[t * d..(t + 1) * d]);
            }
            let dln1 = {
                let (gw, gb) = split_pair(g, b.w_qkv, d * 3 * d, b.b_qkv, 3 * d);
                linear_backward(&c.ln1.out, &p[b.w_qkv..b.w_qkv + d * 3 * d], &dqkv, gw, gb, l, d, 3 * d)
            };
            let dxi = {
                let (gg, gb) = split_pair(g, b.ln1_g, d, b.ln1_b, d);
                layer_norm_backward(&c.ln1, &p[b.ln1_g..b.ln1_g + d], &dln1, gg, gb, l, d)
            };
            axpy(F::one(), &dxi, &mut dx);
        }

        apply_mask(&mut dx, &cache.emb_mask);
        for (t, &id) in ids.iter().enumerate() {
            let src = &dx[t * d..(t + 1) * d];
            let e = lay.tok_emb + id as usize * d;
            axpy(F::one(), src, &mut g[e..e + d]);
            if let Some(pos) = lay.pos_emb {
                axpy(F::one(), src, &mut g[pos + t * d..pos + (t + 1) * d]);
            }
        }

        NllSum {
            nll,
            targets: l.saturating_sub(1),
        }
    }
}

/// Two disjoint mutable windows of the gradient buffer; `a` precedes `b`.
fn split_pair<F>(g: &mut [F], a: usize, a_len: usize, b: usize, b_len: usize) -> (&mut [F], &mut [F]) {
    debug_assert!(a + a_len <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + a_len], &mut hi[..b_len])
}
