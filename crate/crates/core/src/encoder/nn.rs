//! Minimal dense-layer arithmetic for the mock encoders.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn random<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize, with_bias: bool) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        let bias = if with_bias {
            (0..out_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1)
                .collect()
        } else {
            vec![0.0; out_dim]
        };
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// `W^T g`: gradient with respect to the input.
    pub fn backward_input(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.in_dim];
        for (o, go) in grad_out.iter().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (gi, w) in g.iter_mut().zip(row) {
                *gi += w * go;
            }
        }
        g
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn random<R: Rng>(rng: &mut R, dim: usize) -> Self {
        LayerNorm {
            gamma: (0..dim)
                .map(|_| 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            beta: (0..dim)
                .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + Self::EPS).sqrt();
        x.iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Multi-head scaled dot-product attention for one query.
///
/// Returns the concatenated head outputs and the per-head attention weights.
pub(crate) fn attend(
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = query.len();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; dim];
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let span = h * head_dim..(h + 1) * head_dim;
        let q = &query[span.clone()];
        let mut a: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(&k[span.clone()]).map(|(x, y)| x * y).sum::<f64>() * scale)
            .collect();
        softmax_in_place(&mut a);
        for (aj, v) in a.iter().zip(values) {
            for (o, vv) in out[span.clone()].iter_mut().zip(&v[span.clone()]) {
                *o += aj * vv;
            }
        }
        weights.push(a);
    }
    (out, weights)
}

pub(crate) fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub(crate) fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn random_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}
