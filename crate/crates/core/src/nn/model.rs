//! Pre-norm decoder-only transformer forward pass.
//!
//! A single chunked forward routine serves training (empty cache, activations
//! recorded for backprop), scoring, and incremental decoding (key/value cache
//! carried across calls).

use super::params::TransformerParams;
use super::scalar::{gemm, gemm_few_rows, Scalar, View};
use super::tokenizer::{TokenId, TokenSequence};
use super::{ModelConfig, NnError};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn last_row(&self) -> &[T] {
        self.row(self.rows - 1)
    }
}

/// Residual-stream states at one token position; entry 0 is the embedding
/// output, entry `l` the output of block `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateStack<T> {
    pub position: usize,
    pub states: Vec<Vec<T>>,
}

impl<T> HiddenStateStack<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone)]
struct LayerKv<T> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    layers: Vec<LayerKv<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let n = cfg.max_seq_len * cfg.d_model;
        KvCache {
            layers: (0..cfg.n_layers)
                .map(|_| LayerKv {
                    k: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                })
                .collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops positions beyond `len` so a shared prefix can be reused.
    pub fn truncate(&mut self, len: usize) {
        self.len = self.len.min(len);
    }
}

/// Activations of one block kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockTrace<T> {
    pub ln1_xhat: Vec<T>,
    pub ln1_rstd: Vec<T>,
    pub h1: Vec<T>,
    pub qkv: Vec<T>,
    /// `n_heads × T × T` attention probabilities (zero above the diagonal).
    pub probs: Vec<T>,
    pub attn: Vec<T>,
    pub ln2_xhat: Vec<T>,
    pub ln2_rstd: Vec<T>,
    pub h2: Vec<T>,
    pub fc_pre: Vec<T>,
    pub fc_act: Vec<T>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Trace<T> {
    pub tokens: Vec<TokenId>,
    pub blocks: Vec<BlockTrace<T>>,
    pub lnf_xhat: Vec<T>,
    pub lnf_rstd: Vec<T>,
    pub hf: Vec<T>,
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Row-wise layer normalisation. Optionally records the normalised input and
/// reciprocal standard deviation for backprop.
pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    mut record: Option<(&mut Vec<T>, &mut Vec<T>)>,
) {
    let rows = x.len() / d;
    let dn = T::from_usize(d).unwrap();
    let eps = T::lit(LN_EPS);
    if let Some((xhat, rstd)) = record.as_mut() {
        xhat.resize(x.len(), T::zero());
        rstd.resize(rows, T::zero());
    }
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            let xh = (row[i] - mean) * rs;
            o[i] = xh * gain[i] + bias[i];
        }
        if let Some((xhat, rstd)) = record.as_mut() {
            for i in 0..d {
                xhat[r * d + i] = (row[i] - mean) * rs;
            }
            rstd[r] = rs;
        }
    }
}

fn add_bias<T: Scalar>(m: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in m.chunks_exact_mut(n) {
        for (x, &b) in row.iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn check_tokens<T: Scalar>(params: &TransformerParams<T>, pos0: usize, ids: &[TokenId]) -> Result<(), NnError> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(NnError::EmptySequence);
    }
    if pos0 + ids.len() > cfg.max_seq_len {
        return Err(NnError::SequenceTooLong {
            len: pos0 + ids.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(NnError::InvalidToken(bad));
    }
    Ok(())
}

/// Output of one chunked forward call.
pub(crate) struct ChunkOutput<T> {
    pub logits: Matrix<T>,
    pub states: Option<HiddenStateStack<T>>,
}

/// Runs `ids` (at positions `cache.len()..`) through the network. `decode`
/// enables the few-row product path; full forwards leave it off so their
/// logits stay exactly prefix-consistent.
pub(crate) fn forward_chunk<T: Scalar>(
    params: &TransformerParams<T>,
    cache: &mut KvCache<T>,
    ids: &[TokenId],
    want_states: bool,
    decode: bool,
    mut trace: Option<&mut Trace<T>>,
) -> Result<ChunkOutput<T>, NnError> {
    let pos0 = cache.len;
    let mm = if decode { gemm_few_rows::<T> } else { gemm::<T> };
    check_tokens(params, pos0, ids)?;
    let cfg = params.config;
    let lay = &*params.layout;
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (nh, dh) = (cfg.n_heads, cfg.head_dim());
    let tn = ids.len();
    let tk = pos0 + tn;
    let w = &params.data;

    let mut x = vec![T::zero(); tn * d];
    let tok = &w[lay.token_embedding.clone()];
    let pos = &w[lay.positional_embedding.clone()];
    for (i, &id) in ids.iter().enumerate() {
        let e = &tok[id as usize * d..(id as usize + 1) * d];
        let p = &pos[(pos0 + i) * d..(pos0 + i + 1) * d];
        for j in 0..d {
            x[i * d + j] = e[j] + p[j];
        }
    }
    let mut states = want_states.then(|| HiddenStateStack {
        position: tk - 1,
        states: vec![x[(tn - 1) * d..].to_vec()],
    });
    if let Some(t) = trace.as_mut() {
        t.tokens = ids.to_vec();
        t.blocks.clear();
    }

    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut h = vec![T::zero(); tn * d];
    let mut qkv = vec![T::zero(); tn * 3 * d];
    let mut attn = vec![T::zero(); tn * d];
    let mut scores = vec![T::zero(); tn * tk];
    let mut hidden = vec![T::zero(); tn * f];
    for (l, b) in lay.blocks.iter().enumerate() {
        let mut bt = trace.as_ref().map(|_| BlockTrace::<T>::default());
        // attention sub-block
        layer_norm(
            &x,
            d,
            &w[b.ln1_gain.clone()],
            &w[b.ln1_bias.clone()],
            &mut h,
            bt.as_mut().map(|t| (&mut t.ln1_xhat, &mut t.ln1_rstd)),
        );
        if let Some(t) = bt.as_mut() {
            t.h1 = h.clone();
        }
        mm(
            View::rm(&h, tn, d, d),
            View::rm(&w[b.qkv_weight.clone()], d, 3 * d, 3 * d),
            &mut qkv,
            3 * d,
            false,
        );
        add_bias(&mut qkv, &w[b.qkv_bias.clone()]);
        let kv = &mut cache.layers[l];
        for i in 0..tn {
            let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
            kv.k[(pos0 + i) * d..(pos0 + i + 1) * d].copy_from_slice(&row[d..2 * d]);
            kv.v[(pos0 + i) * d..(pos0 + i + 1) * d].copy_from_slice(&row[2 * d..3 * d]);
        }
        if let Some(t) = bt.as_mut() {
            t.probs = vec![T::zero(); nh * tn * tk];
        }
        for hd in 0..nh {
            let off = hd * dh;
            mm(
                View::rm(&qkv[off..], tn, dh, 3 * d),
                View::rm_t(&kv.k[off..], dh, tk, d),
                &mut scores,
                tk,
                false,
            );
            for i in 0..tn {
                let row = &mut scores[i * tk..(i + 1) * tk];
                let visible = pos0 + i + 1;
                let mut max = T::neg_infinity();
                for s in &mut row[..visible] {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut sum = T::zero();
                for s in &mut row[..visible] {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in &mut row[..visible] {
                    *s /= sum;
                }
                row[visible..].fill(T::zero());
            }
            mm(
                View::rm(&scores, tn, tk, tk),
                View::rm(&kv.v[off..], tk, dh, d),
                &mut attn[off..],
                d,
                false,
            );
            if let Some(t) = bt.as_mut() {
                t.probs[hd * tn * tk..(hd + 1) * tn * tk].copy_from_slice(&scores);
            }
        }
        mm(
            View::rm(&attn, tn, d, d),
            View::rm(&w[b.proj_weight.clone()], d, d, d),
            &mut h,
            d,
            false,
        );
        add_bias(&mut h, &w[b.proj_bias.clone()]);
        for (xi, hi) in x.iter_mut().zip(&h) {
            *xi += *hi;
        }
        if let Some(t) = bt.as_mut() {
            t.qkv = qkv.clone();
            t.attn = attn.clone();
        }
        // feed-forward sub-block; `h` holds the ln2 output from here on
        layer_norm(
            &x,
            d,
            &w[b.ln2_gain.clone()],
            &w[b.ln2_bias.clone()],
            &mut h,
            bt.as_mut().map(|t| (&mut t.ln2_xhat, &mut t.ln2_rstd)),
        );
        mm(
            View::rm(&h, tn, d, d),
            View::rm(&w[b.fc_weight.clone()], d, f, f),
            &mut hidden,
            f,
            false,
        );
        add_bias(&mut hidden, &w[b.fc_bias.clone()]);
        if let Some(t) = bt.as_mut() {
            t.h2 = h.clone();
            t.fc_pre = hidden.clone();
        }
        for u in hidden.iter_mut() {
            *u = gelu(*u);
        }
        // reuse attn buffer for the mlp output
        mm(
            View::rm(&hidden, tn, f, f),
            View::rm(&w[b.out_weight.clone()], f, d, d),
            &mut attn,
            d,
            false,
        );
        add_bias(&mut attn, &w[b.out_bias.clone()]);
        for (xi, oi) in x.iter_mut().zip(&attn) {
            *xi += *oi;
        }
        if let (Some(mut t), Some(tr)) = (bt, trace.as_mut()) {
            t.fc_act = hidden.clone();
            tr.blocks.push(t);
        }
        if let Some(s) = states.as_mut() {
            s.states.push(x[(tn - 1) * d..].to_vec());
        }
    }
    cache.len = tk;

    let mut hf = vec![T::zero(); tn * d];
    layer_norm(
        &x,
        d,
        &w[lay.final_gain.clone()],
        &w[lay.final_bias.clone()],
        &mut hf,
        trace.as_mut().map(|t| (&mut t.lnf_xhat, &mut t.lnf_rstd)),
    );
    let mut logits = vec![T::zero(); tn * v];
    mm(
        View::rm(&hf, tn, d, d),
        View::rm(&w[lay.unembedding.clone()], d, v, v),
        &mut logits,
        v,
        false,
    );
    if let Some(t) = trace.as_mut() {
        t.hf = hf;
    }
    if let Some(bad) = logits.iter().position(|x| !x.is_finite()) {
        return Err(NnError::NonFiniteActivation(format!(
            "logit at position {} token {}",
            pos0 + bad / v,
            bad % v
        )));
    }
    Ok(ChunkOutput {
        logits: Matrix {
            rows: tn,
            cols: v,
            data: logits,
        },
        states,
    })
}

/// Logits for every position of `tokens`.
pub fn forward<T: Scalar>(params: &TransformerParams<T>, tokens: &TokenSequence) -> Result<Matrix<T>, NnError> {
    let mut cache = KvCache::new(&params.config);
    Ok(forward_chunk(params, &mut cache, &tokens.ids, false, false, None)?.logits)
}

/// Logits plus the residual stream at the final position after every layer.
pub fn forward_with_lens_states<T: Scalar>(
    params: &TransformerParams<T>,
    tokens: &TokenSequence,
) -> Result<(Matrix<T>, HiddenStateStack<T>), NnError> {
    let mut cache = KvCache::new(&params.config);
    let out = forward_chunk(params, &mut cache, &tokens.ids, true, false, None)?;
    Ok((out.logits, out.states.expect("states requested")))
}

/// Projects a residual-stream vector through the final norm and the
/// unembedding (no bias).
pub fn lens_logits<T: Scalar>(params: &TransformerParams<T>, state: &[T]) -> Vec<T> {
    let cfg = params.config;
    let lay = &*params.layout;
    let mut hf = vec![T::zero(); cfg.d_model];
    layer_norm(
        state,
        cfg.d_model,
        params.slice(&lay.final_gain),
        params.slice(&lay.final_bias),
        &mut hf,
        None,
    );
    let mut out = vec![T::zero(); cfg.vocab_size];
    gemm(
        View::rm(&hf, 1, cfg.d_model, cfg.d_model),
        View::rm(
            params.slice(&lay.unembedding),
            cfg.d_model,
            cfg.vocab_size,
            cfg.vocab_size,
        ),
        &mut out,
        cfg.vocab_size,
        false,
    );
    out
}

/// Incremental decoder over a frozen parameter set.
pub struct Session<'p, T: Scalar> {
    params: &'p TransformerParams<T>,
    cache: KvCache<T>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p TransformerParams<T>) -> Self {
        Session {
            params,
            cache: KvCache::new(&params.config),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.params.config.max_seq_len - self.cache.len()
    }

    /// Appends tokens and returns the logits of the new positions.
    pub fn extend(&mut self, ids: &[TokenId]) -> Result<Matrix<T>, NnError> {
        Ok(forward_chunk(self.params, &mut self.cache, ids, false, true, None)?.logits)
    }

    /// Like [`Session::extend`] but also returns the per-layer residual
    /// states at the last appended position.
    pub fn extend_with_states(&mut self, ids: &[TokenId]) -> Result<(Matrix<T>, HiddenStateStack<T>), NnError> {
        let out = forward_chunk(self.params, &mut self.cache, ids, true, true, None)?;
        Ok((out.logits, out.states.expect("states requested")))
    }

    /// Rewinds to `len` cached positions.
    pub fn truncate(&mut self, len: usize) {
        self.cache.truncate(len);
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Mean next-token cross-entropy and the per-position log-probability rows
/// (`len - 1` rows, row `i` predicting token `i + 1`).
pub fn next_token_loss<T: Scalar>(
    params: &TransformerParams<T>,
    tokens: &TokenSequence,
) -> Result<(T, Matrix<T>), NnError> {
    if tokens.len() < 2 {
        return Err(NnError::TooShortForLoss(tokens.len()));
    }
    let logits = forward(params, tokens)?;
    let v = logits.cols;
    let n = tokens.len() - 1;
    let mut lp = Vec::with_capacity(n * v);
    let mut total = T::zero();
    for i in 0..n {
        let row = log_softmax(logits.row(i));
        total -= row[tokens.ids[i + 1] as usize];
        lp.extend(row);
    }
    Ok((
        total / T::from_usize(n).unwrap(),
        Matrix {
            rows: n,
            cols: v,
            data: lp,
        },
    ))
}
