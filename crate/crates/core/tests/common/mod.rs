//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use ehrfuse_core::data::{generate_synthetic, Episode, SynthConfig, SynthTask};
use ehrfuse_core::fusion::MultiHeadAttention;
use ehrfuse_core::harness::RunConfig;
use ehrfuse_core::model::{Model, PreparedEpisode};
use ehrfuse_core::mtand::Mtand;
use ehrfuse_core::nn::{LayerNorm, Linear, ParamStore, Scope};
use ehrfuse_core::tensor::gradcheck::rel_error;
use ehrfuse_core::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    let mut m: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m = m.max((v - b.get(r, c)).abs());
        }
    }
    m
}

// ---- dense helpers, deliberately loop-based ----

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn affine(x: &Mat, w: &Tensor, b: Option<&Tensor>) -> Mat {
    let mut y = matmul(x, &to_mat(w));
    if let Some(b) = b {
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    y
}

pub fn linear(x: &Mat, l: &Linear, st: &ParamStore) -> Mat {
    affine(x, st.get(l.weight), l.bias.map(|b| st.get(b)))
}

pub fn softmax_row(s: &[f64]) -> Vec<f64> {
    let total: f64 = s.iter().map(|v| v.exp()).sum();
    s.iter().map(|v| v.exp() / total).collect()
}

pub fn layer_norm(x: &Mat, ln: &LayerNorm, st: &ParamStore) -> Mat {
    let (g, b) = (st.get(ln.gain).data(), st.get(ln.bias).data());
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / sd * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

// ---- attention oracles ----

/// Time2Vec by direct per-entry evaluation.
pub fn time2vec_oracle(times: &[f64], omega: &[f64], phi: &[f64]) -> Mat {
    times
        .iter()
        .map(|&t| {
            (0..omega.len())
                .map(|i| {
                    let lin = omega[i] * t + phi[i];
                    if i == 0 {
                        lin
                    } else {
                        lin.sin()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn time_attention_oracle(m: &Mtand, st: &ParamStore, grid: &[f64], keys: &[f64], values: &Mat, head: usize) -> Mat {
    let c = values.first().map_or(0, Vec::len);
    if keys.is_empty() {
        return vec![vec![0.0; c]; grid.len()];
    }
    let enc = &m.bank.encoders[head];
    let (om, ph) = (st.get(enc.omega).data(), st.get(enc.phi).data());
    let q = matmul(&time2vec_oracle(grid, om, ph), &to_mat(st.get(m.heads[head].w_query)));
    let k = matmul(&time2vec_oracle(keys, om, ph), &to_mat(st.get(m.heads[head].w_key)));
    let scale = (enc.d_v as f64).sqrt();
    q.iter()
        .map(|qa| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kb| qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>() / scale)
                .collect();
            let w = softmax_row(&scores);
            (0..c)
                .map(|j| w.iter().zip(values).map(|(wk, v)| wk * v[j]).sum())
                .collect()
        })
        .collect()
}

/// Multi-head attention from `x` to `ctx` without residual.
pub fn mha_oracle(x: &Mat, ctx: &Mat, mha: &MultiHeadAttention, st: &ParamStore) -> Mat {
    let q = linear(x, &mha.query, st);
    let k = linear(ctx, &mha.key, st);
    let v = linear(ctx, &mha.value, st);
    let d_h = q[0].len();
    let d = d_h / mha.heads;
    let mut cat = vec![vec![0.0; d_h]; x.len()];
    for h in 0..mha.heads {
        for (a, qa) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kb| (0..d).map(|i| qa[h * d + i] * kb[h * d + i]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let w = softmax_row(&scores);
            for i in 0..d {
                cat[a][h * d + i] = w.iter().zip(&v).map(|(wb, vb)| wb * vb[h * d + i]).sum();
            }
        }
    }
    linear(&cat, &mha.output, st)
}

pub fn self_attend_oracle(x: &Mat, ln: &LayerNorm, mha: &MultiHeadAttention, st: &ParamStore) -> Mat {
    let n = layer_norm(x, ln, st);
    add(x, &mha_oracle(&n, &n, mha, st))
}

pub fn cross_attend_oracle(x: &Mat, other: &Mat, ln: &LayerNorm, mha: &MultiHeadAttention, st: &ParamStore) -> Mat {
    let nx = layer_norm(x, ln, st);
    let no = layer_norm(other, ln, st);
    add(x, &mha_oracle(&nx, &no, mha, st))
}

// ---- metric oracles ----

pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Walks every distinct threshold from the top, recomputing precision and
/// recall from scratch.
pub fn ap_prefix(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let (mut tp, mut pp) = (0.0, 0.0);
        for (s, y) in scores.iter().zip(labels) {
            if *s >= t {
                pp += 1.0;
                if *y == 1 {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / pp);
        prev_recall = recall;
    }
    ap
}

// ---- model-level finite differences ----

fn total_loss(model: &Model, eps: &[PreparedEpisode]) -> f64 {
    eps.iter()
        .map(|ep| {
            let tape = Tape::new();
            model
                .loss(Scope::new(&tape, &model.params), ep, 1.0)
                .unwrap()
                .value()
                .data()[0]
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Central differences of the summed episode loss against the tape
/// gradient, for every scalar parameter.
pub fn model_gradcheck(model: &mut Model, eps: &[PreparedEpisode], step: f64) -> ParamCheck {
    let mut analytic: Vec<Tensor> = model.params.values().iter().map(Tensor::zeros_like).collect();
    for ep in eps {
        let tape = Tape::new();
        let loss = model.loss(Scope::new(&tape, &model.params), ep, 1.0).unwrap();
        model.params.accumulate_grads(&loss.backward().unwrap(), &mut analytic);
    }
    let mut out = ParamCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (i, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let orig = model.params.values()[i].data()[j];
            model.params.values_mut()[i].data_mut()[j] = orig + step;
            let plus = total_loss(model, eps);
            model.params.values_mut()[i].data_mut()[j] = orig - step;
            let minus = total_loss(model, eps);
            model.params.values_mut()[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = rel_error(g.data()[j], numeric);
            out.checked += 1;
            if e > out.max_rel_error {
                out.max_rel_error = e;
                out.worst = format!(
                    "{}[{j}]: analytic {} numeric {}",
                    model.params.names()[i],
                    g.data()[j],
                    numeric
                );
            }
        }
    }
    out
}

// ---- synthetic experiment fixtures ----

pub fn synth(task: SynthTask, n: usize, seed: u64) -> Vec<Episode> {
    generate_synthetic(&SynthConfig {
        n_episodes: n,
        d_m: 4,
        d_t: 8,
        alpha_hours: 24.0,
        sparsity: 0.3,
        task,
        seed,
    })
    .unwrap()
}

/// Train / val / test splits for one experiment seed, disjoint generator
/// seeds per split.
pub fn splits(task: SynthTask, seed: u64, sizes: (usize, usize, usize)) -> (Vec<Episode>, Vec<Episode>, Vec<Episode>) {
    let base = 1000 * seed;
    (
        synth(task, sizes.0, base + 1),
        synth(task, sizes.1, base + 2),
        synth(task, sizes.2, base + 3),
    )
}

/// Small configuration used for the synthetic experiments.
pub fn desk_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("alpha", "24"),
        ("alpha_hours", "24"),
        ("d_m", "4"),
        ("d_t", "8"),
        ("d_hidden", "16"),
        ("d_timeembed", "8"),
        ("n_time_embeds", "4"),
        ("fusion_layers", "1"),
        ("heads", "2"),
        ("gate_level", "temporal"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}
