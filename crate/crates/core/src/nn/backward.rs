//! Reverse-mode differentiation of the next-token loss.

use std::sync::Arc;

use super::model::{forward_chunk, gelu_grad, log_softmax, KvCache, Trace};
use super::params::{Layout, TransformerParams};
use super::scalar::{gemm, Scalar, View};
use super::tokenizer::{TokenId, TokenSequence, PAD};
use super::NnError;

/// Gradient buffer laid out exactly like the parameters.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &TransformerParams<T>) -> Self {
        Gradients {
            layout: Arc::clone(&params.layout),
            data: vec![T::zero(); params.layout.len],
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.entry(name).map(|e| &self.data[e.range()])
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(NnError::NonFiniteGradient(self.layout.name_of(i).to_string())),
        }
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&g| g * g).sum::<T>().sqrt()
    }
}

fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let dn = T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= dn;
        mean_dxhat_xhat /= dn;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], dbias: &mut [T]) {
    let n = dbias.len();
    for row in dy.chunks_exact(n) {
        for (b, &g) in dbias.iter_mut().zip(row) {
            *b += g;
        }
    }
}

/// Accumulates into `grad` the gradient implied by `dlogits` for one traced
/// sequence.
pub(crate) fn backward_trace<T: Scalar>(
    params: &TransformerParams<T>,
    trace: &Trace<T>,
    dlogits: &[T],
    grad: &mut [T],
) {
    let cfg = params.config;
    let lay = &*params.layout;
    let w = &params.data;
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (nh, dh) = (cfg.n_heads, cfg.head_dim());
    let tn = trace.tokens.len();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    // head
    gemm(
        View::rm_t(&trace.hf, d, tn, d),
        View::rm(dlogits, tn, v, v),
        &mut grad[lay.unembedding.clone()],
        v,
        true,
    );
    let mut dhf = vec![T::zero(); tn * d];
    gemm(
        View::rm(dlogits, tn, v, v),
        View::rm_t(&w[lay.unembedding.clone()], v, d, v),
        &mut dhf,
        d,
        false,
    );
    let mut dx = vec![T::zero(); tn * d];
    {
        let (dg, db) = split_pair(grad, &lay.final_gain, &lay.final_bias);
        layer_norm_backward(
            &dhf,
            &trace.lnf_xhat,
            &trace.lnf_rstd,
            &w[lay.final_gain.clone()],
            d,
            dg,
            db,
            &mut dx,
        );
    }

    let mut dhidden = vec![T::zero(); tn * f];
    let mut dnorm_in = vec![T::zero(); tn * d];
    let mut dattn = vec![T::zero(); tn * d];
    let mut dqkv = vec![T::zero(); tn * 3 * d];
    let mut dp = vec![T::zero(); tn * tn];
    for (b, bt) in lay.blocks.iter().zip(&trace.blocks).rev() {
        // mlp
        gemm(
            View::rm_t(&bt.fc_act, f, tn, f),
            View::rm(&dx, tn, d, d),
            &mut grad[b.out_weight.clone()],
            d,
            true,
        );
        bias_grad(&dx, &mut grad[b.out_bias.clone()]);
        gemm(
            View::rm(&dx, tn, d, d),
            View::rm_t(&w[b.out_weight.clone()], d, f, d),
            &mut dhidden,
            f,
            false,
        );
        for (g, &u) in dhidden.iter_mut().zip(&bt.fc_pre) {
            *g *= gelu_grad(u);
        }
        gemm(
            View::rm_t(&bt.h2, d, tn, d),
            View::rm(&dhidden, tn, f, f),
            &mut grad[b.fc_weight.clone()],
            f,
            true,
        );
        bias_grad(&dhidden, &mut grad[b.fc_bias.clone()]);
        gemm(
            View::rm(&dhidden, tn, f, f),
            View::rm_t(&w[b.fc_weight.clone()], f, d, f),
            &mut dnorm_in,
            d,
            false,
        );
        {
            let (dg, db) = split_pair(grad, &b.ln2_gain, &b.ln2_bias);
            layer_norm_backward(
                &dnorm_in,
                &bt.ln2_xhat,
                &bt.ln2_rstd,
                &w[b.ln2_gain.clone()],
                d,
                dg,
                db,
                &mut dx,
            );
        }

        // attention
        gemm(
            View::rm_t(&bt.attn, d, tn, d),
            View::rm(&dx, tn, d, d),
            &mut grad[b.proj_weight.clone()],
            d,
            true,
        );
        bias_grad(&dx, &mut grad[b.proj_bias.clone()]);
        gemm(
            View::rm(&dx, tn, d, d),
            View::rm_t(&w[b.proj_weight.clone()], d, d, d),
            &mut dattn,
            d,
            false,
        );
        for hd in 0..nh {
            let off = hd * dh;
            let probs = &bt.probs[hd * tn * tn..(hd + 1) * tn * tn];
            // dV = P^T dO
            gemm(
                View::rm_t(probs, tn, tn, tn),
                View::rm(&dattn[off..], tn, dh, d),
                &mut dqkv[2 * d + off..],
                3 * d,
                false,
            );
            // dP = dO V^T
            gemm(
                View::rm(&dattn[off..], tn, dh, d),
                View::rm_t(&bt.qkv[2 * d + off..], dh, tn, 3 * d),
                &mut dp,
                tn,
                false,
            );
            for i in 0..tn {
                let pr = &probs[i * tn..(i + 1) * tn];
                let dr = &mut dp[i * tn..(i + 1) * tn];
                let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&p, &g)| p * g).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                dr[i + 1..].fill(T::zero());
            }
            // dQ = dS K, dK = dS^T Q
            gemm(
                View::rm(&dp, tn, tn, tn),
                View::rm(&bt.qkv[d + off..], tn, dh, 3 * d),
                &mut dqkv[off..],
                3 * d,
                false,
            );
            gemm(
                View::rm_t(&dp, tn, tn, tn),
                View::rm(&bt.qkv[off..], tn, dh, 3 * d),
                &mut dqkv[d + off..],
                3 * d,
                false,
            );
        }
        gemm(
            View::rm_t(&bt.h1, d, tn, d),
            View::rm(&dqkv, tn, 3 * d, 3 * d),
            &mut grad[b.qkv_weight.clone()],
            3 * d,
            true,
        );
        bias_grad(&dqkv, &mut grad[b.qkv_bias.clone()]);
        gemm(
            View::rm(&dqkv, tn, 3 * d, 3 * d),
            View::rm_t(&w[b.qkv_weight.clone()], 3 * d, d, 3 * d),
            &mut dnorm_in,
            d,
            false,
        );
        {
            let (dg, db) = split_pair(grad, &b.ln1_gain, &b.ln1_bias);
            layer_norm_backward(
                &dnorm_in,
                &bt.ln1_xhat,
                &bt.ln1_rstd,
                &w[b.ln1_gain.clone()],
                d,
                dg,
                db,
                &mut dx,
            );
        }
    }

    // embeddings
    let tok = lay.token_embedding.start;
    let pos = lay.positional_embedding.start;
    for (i, &id) in trace.tokens.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let te = tok + id as usize * d;
        let pe = pos + i * d;
        for j in 0..d {
            grad[te + j] += row[j];
            grad[pe + j] += row[j];
        }
    }
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn split_pair<'g, T>(
    grad: &'g mut [T],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'g mut [T], &'g mut [T]) {
    assert!(a.end <= b.start);
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Loss and gradient summed over a batch of packed chunks. Targets are the
/// next token within each chunk; targets equal to PAD are skipped. The loss
/// is the mean over all counted targets, multiplied by `scale`.
pub fn batch_loss_and_grad<T: Scalar>(
    params: &TransformerParams<T>,
    batch: &[&[TokenId]],
    scale: T,
) -> Result<(T, Gradients<T>), NnError> {
    let count: usize = batch.iter().map(|c| c.windows(2).filter(|w| w[1] != PAD).count()).sum();
    if count == 0 {
        return Err(NnError::TooShortForLoss(0));
    }
    let norm = scale / T::from_usize(count).unwrap();
    let mut grads = Gradients::zeros_like(params);
    let mut total = T::zero();
    let v = params.config.vocab_size;
    let mut trace = Trace::default();
    for chunk in batch {
        let mut cache = KvCache::new(&params.config);
        let out = forward_chunk(params, &mut cache, chunk, false, false, Some(&mut trace))?;
        let logits = out.logits;
        let mut dlogits = vec![T::zero(); logits.data.len()];
        for i in 0..chunk.len().saturating_sub(1) {
            let target = chunk[i + 1];
            if target == PAD {
                continue;
            }
            let lp = log_softmax(logits.row(i));
            total -= lp[target as usize];
            let dr = &mut dlogits[i * v..(i + 1) * v];
            for (g, &l) in dr.iter_mut().zip(&lp) {
                *g = l.exp() * norm;
            }
            dr[target as usize] -= norm;
        }
        backward_trace(params, &trace, &dlogits, &mut grads.data);
    }
    grads.check_finite()?;
    Ok((total * norm, grads))
}

/// Gradient of the mean next-token loss of a single sequence.
pub fn backward<T: Scalar>(params: &TransformerParams<T>, tokens: &TokenSequence) -> Result<Gradients<T>, NnError> {
    backward_scaled(params, tokens, T::one())
}

/// Gradient of `scale · loss`.
pub fn backward_scaled<T: Scalar>(
    params: &TransformerParams<T>,
    tokens: &TokenSequence,
    scale: T,
) -> Result<Gradients<T>, NnError> {
    if tokens.len() < 2 {
        return Err(NnError::TooShortForLoss(tokens.len()));
    }
    Ok(batch_loss_and_grad(params, &[tokens.as_slice()], scale)?.1)
}
