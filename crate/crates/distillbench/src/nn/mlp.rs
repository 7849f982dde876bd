//! Fully-connected classification head trained on frozen-encoder embeddings.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;

use super::conv::Linear;

/// MLP with relu hidden layers; the last layer emits raw class scores.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct MlpCache {
    /// input to each layer
    inputs: Vec<Array2<f64>>,
    /// pre-activation of each layer
    pres: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn init(rng: &mut ChaCha12Rng, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2);
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(rng, w[1], w[0]))
            .collect();
        Mlp { layers }
    }

    pub fn forward_full(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::new();
        let mut pres = Vec::new();
        let mut cur = x.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let pre = layer.forward(&cur);
            pres.push(pre.clone());
            cur = if i + 1 < n {
                pre.mapv(|v| if v > 0.0 { v } else { 0.0 })
            } else {
                pre
            };
        }
        (cur, MlpCache { inputs, pres })
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_full(x).0
    }

    /// Backward from d_scores; returns per-layer gradients flattened in
    /// forward order (w then b per layer).
    pub fn backward(&self, cache: &MlpCache, d_scores: &Array2<f64>) -> Vec<f64> {
        let n = self.layers.len();
        let mut d_cur = d_scores.clone();
        let mut grads_rev = Vec::new();
        for i in (0..n).rev() {
            let d_pre = if i + 1 < n {
                let mut d = d_cur.clone();
                d.zip_mut_with(&cache.pres[i], |g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
                d
            } else {
                d_cur.clone()
            };
            let (dx, g) = self.layers[i].backward(&cache.inputs[i], &d_pre);
            grads_rev.push(g);
            d_cur = dx;
        }
        grads_rev.reverse();
        let mut flat = Vec::new();
        for g in grads_rev {
            flat.extend(g.dw.iter());
            flat.extend(g.db.iter());
        }
        flat
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.param_len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
        }
        assert_eq!(pos, flat.len());
    }

    /// Argmax prediction with lowest-class-index tie-breaking.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let scores = self.forward(x);
        scores
            .rows()
            .into_iter()
            .map(|row| argmax_lowest(&row.to_owned()))
            .collect()
    }
}

pub fn argmax_lowest(row: &Array1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy loss and gradient w.r.t. raw scores.
pub fn cross_entropy(scores: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = scores.shape()[0];
    let k = scores.shape()[1];
    let mut loss = 0.0;
    let mut d = Array2::<f64>::zeros((b, k));
    for i in 0..b {
        let row = scores.row(i);
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - maxv).exp()).collect();
        let z: f64 = exps.iter().sum();
        let y = labels[i];
        loss += -(exps[y] / z).ln();
        for j in 0..k {
            d[[i, j]] = (exps[j] / z - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b as f64, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut mlp = Mlp::init(&mut rng, &[4, 6, 3]);
        let x = Array2::from_shape_fn((3, 4), |_| rng.gen::<f64>() - 0.5);
        let labels = vec![0usize, 2, 1];
        let objective = |m: &Mlp| cross_entropy(&m.forward(&x), &labels).0;
        let (scores, cache) = mlp.forward_full(&x);
        let (_, d_scores) = cross_entropy(&scores, &labels);
        let grads = mlp.backward(&cache, &d_scores);
        let base = mlp.params_flat();
        let h = 1e-6;
        for idx in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[idx] += h;
            mlp.set_params_flat(&p);
            let fp = objective(&mlp);
            p[idx] -= 2.0 * h;
            mlp.set_params_flat(&p);
            let fm = objective(&mlp);
            let num = (fp - fm) / (2.0 * h);
            assert!((num - grads[idx]).abs() < 1e-6 * (1.0 + grads[idx].abs()));
        }
        mlp.set_params_flat(&base);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let row = Array1::from(vec![1.0, 3.0, 3.0, 0.0]);
        assert_eq!(argmax_lowest(&row), 1);
    }
}
