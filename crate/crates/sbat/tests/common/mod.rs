//! Straightforward dense reference implementations used as test oracles.
//! Plain loops over row-major `Vec<f64>`, sharing no code with the tape.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbat_core::model::{ModelParams, Sublayer};
use sbat_core::Tensor;

pub const EPS: f64 = 1e-5;

/// Every parameter replaced by uniform noise so gains and biases are non-trivial.
pub fn random_params(params: &ModelParams, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.map(|t| random_tensor(t.shape(), 0.5, &mut rng))
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let sd = (var + EPS).sqrt();
        for j in 0..d {
            out.push(gamma[j] * (row[j] - mean) / sd + beta[j]);
        }
    }
    out
}

fn matmul(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..k {
                acc += x[r * k + i] * w.data()[i * n + j];
            }
            out[r * n + j] = acc;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// One pre-norm attention + FFN sublayer over `tokens` rows of width `d`.
/// Returns the output and the attention probabilities `[heads, tokens, tokens]`.
pub fn dense_sublayer(x: &[f64], tokens: usize, d: usize, w: &Sublayer<Tensor>, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let h = layer_norm(x, d, w.ln_attn_gamma.data(), w.ln_attn_beta.data());
    let q = matmul(&h, tokens, &w.wq);
    let k = matmul(&h, tokens, &w.wk);
    let v = matmul(&h, tokens, &w.wv);
    let mut probs = vec![0.0; heads * tokens * tokens];
    let mut attn = vec![0.0; tokens * d];
    for hd in 0..heads {
        for i in 0..tokens {
            let mut scores: Vec<f64> = (0..tokens)
                .map(|j| {
                    (0..dh).map(|e| q[i * d + hd * dh + e] * k[j * d + hd * dh + e]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            scores.iter_mut().for_each(|s| *s = (*s - max).exp());
            let z: f64 = scores.iter().sum();
            for j in 0..tokens {
                let p = scores[j] / z;
                probs[(hd * tokens + i) * tokens + j] = p;
                for e in 0..dh {
                    attn[i * d + hd * dh + e] += p * v[j * d + hd * dh + e];
                }
            }
        }
    }
    let u: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let h2 = layer_norm(&u, d, w.ln_ffn_gamma.data(), w.ln_ffn_beta.data());
    let hidden_w = w.ffn_w1.shape()[1];
    let mut hidden = matmul(&h2, tokens, &w.ffn_w1);
    for (i, v) in hidden.iter_mut().enumerate() {
        *v = gelu(*v + w.ffn_b1.data()[i % hidden_w]);
    }
    let ff = matmul(&hidden, tokens, &w.ffn_w2);
    let y = u.iter().zip(&ff).enumerate().map(|(i, (a, b))| a + b + w.ffn_b2.data()[i % d]).collect();
    (y, probs)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
