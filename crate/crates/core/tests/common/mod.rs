//! Test-only helpers: random parameter sets and a naive straight-line
//! transformer used as an independent forward oracle.
#![allow(dead_code)]

use belief_lab::nn::{ModelConfig, Scalar, TransformerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(n_layers: usize, d_model: usize, n_heads: usize, vocab: usize, max_seq: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads,
        d_ff: 2 * d_model,
        vocab_size: vocab,
        max_seq_len: max_seq,
    }
}

/// Parameters with every entry drawn uniformly from [-scale, scale]; gains
/// are centred at 1.
pub fn random_params<T: Scalar>(cfg: ModelConfig, seed: u64, scale: f64) -> TransformerParams<T> {
    let mut p = TransformerParams::<T>::zeros(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = p.layout.entries.clone();
    for e in entries {
        let gain = e.name.ends_with(".gain");
        for x in &mut p.data[e.range()] {
            let u: f64 = rng.random_range(-scale..scale);
            *x = T::lit(if gain { 1.0 + u } else { u });
        }
    }
    p
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u16> {
    (0..len).map(|_| rng.random_range(0..vocab) as u16).collect()
}

fn t(p: &TransformerParams<f64>, name: &str) -> Vec<f64> {
    p.tensor(name).unwrap_or_else(|| panic!("missing {name}")).to_vec()
}

fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * r * g[i] + b[i])
        .collect()
}

fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (k, xv) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xv * w[k * cols + j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line recomputation of the pre-norm transformer, one position
/// and one head at a time.
pub fn naive_forward(p: &TransformerParams<f64>, tokens: &[u16]) -> Vec<Vec<f64>> {
    let c = p.config;
    let (d, nh) = (c.d_model, c.n_heads);
    let dh = d / nh;
    let te = t(p, "token_embedding");
    let pe = t(p, "positional_embedding");
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &id)| (0..d).map(|j| te[id as usize * d + j] + pe[i * d + j]).collect())
        .collect();
    for l in 0..c.n_layers {
        let g = |n: &str| t(p, &format!("blocks.{l}.{n}"));
        let (g1, b1) = (g("ln1.gain"), g("ln1.bias"));
        let (wqkv, bqkv) = (g("attn.qkv.weight"), g("attn.qkv.bias"));
        let (wo, bo) = (g("attn.proj.weight"), g("attn.proj.bias"));
        let (g2, b2) = (g("ln2.gain"), g("ln2.bias"));
        let (w1, bb1) = (g("mlp.fc.weight"), g("mlp.fc.bias"));
        let (w2, bb2) = (g("mlp.out.weight"), g("mlp.out.bias"));
        let qkv: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                let h = norm(x, &g1, &b1);
                let mut o = vecmat(&h, &wqkv, 3 * d);
                for j in 0..3 * d {
                    o[j] += bqkv[j];
                }
                o
            })
            .collect();
        let mut next = Vec::new();
        for i in 0..xs.len() {
            let mut att = vec![0.0; d];
            for h in 0..nh {
                let q = &qkv[i][h * dh..(h + 1) * dh];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &qkv[j][d + h * dh..d + (h + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    let v = &qkv[j][2 * d + h * dh..2 * d + (h + 1) * dh];
                    for k in 0..dh {
                        att[h * dh + k] += e[j] / z * v[k];
                    }
                }
            }
            let proj = vecmat(&att, &wo, d);
            let x2: Vec<f64> = (0..d).map(|j| xs[i][j] + proj[j] + bo[j]).collect();
            let h2 = norm(&x2, &g2, &b2);
            let u: Vec<f64> = vecmat(&h2, &w1, c.d_ff)
                .iter()
                .zip(&bb1)
                .map(|(a, b)| gelu(a + b))
                .collect();
            let f = vecmat(&u, &w2, d);
            next.push((0..d).map(|j| x2[j] + f[j] + bb2[j]).collect());
        }
        xs = next;
    }
    let (gf, bf, un) = (t(p, "final_norm.gain"), t(p, "final_norm.bias"), t(p, "unembedding"));
    xs.iter()
        .map(|x| vecmat(&norm(x, &gf, &bf), &un, c.vocab_size))
        .collect()
}
