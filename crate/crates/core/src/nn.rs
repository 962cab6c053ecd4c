//! Small dense networks with hand-written backpropagation.
//!
//! Batches are row-major `batch x width` slices. Parameters live in one flat
//! vector so optimizers, soft updates and checkpoints can treat them uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("a network needs at least an input and an output layer")]
    TooFewLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Post-activation outputs of every layer, input included.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    layers: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("cache always holds the input")
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Hidden layers use `hidden`, the last layer `output`. Hidden weights and
    /// biases are uniform in `±1/sqrt(fan_in)`; the output layer is uniform in
    /// `±final_scale` (zero when `final_scale == 0`).
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if sizes.len() < 2 {
            return Err(NnError::TooFewLayers);
        }
        let n_layers = sizes.len() - 1;
        let mut activations = vec![hidden; n_layers];
        activations[n_layers - 1] = output;
        let mut params = Vec::with_capacity(param_count(sizes));
        for (l, w) in sizes.windows(2).enumerate() {
            let bound = if l + 1 == n_layers {
                final_scale
            } else {
                1.0 / (w[0] as f64).sqrt()
            };
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(if bound > 0.0 {
                    rng.gen_range(-bound..bound)
                } else {
                    0.0
                });
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activations,
            params,
        })
    }

    pub fn from_params(
        sizes: &[usize],
        activations: Vec<Activation>,
        params: Vec<f64>,
    ) -> Result<Self, NnError> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(NnError::TooFewLayers);
        }
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(NnError::ShapeMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activations,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes && self.activations == other.activations
    }

    /// Zeroes the output layer so every input maps to the bias-free output.
    pub fn zero_output_layer(&mut self) {
        let n = self.sizes.len();
        let last = self.sizes[n - 2] * self.sizes[n - 1] + self.sizes[n - 1];
        let total = self.params.len();
        self.params[total - last..]
            .iter_mut()
            .for_each(|p| *p = 0.0);
    }

    fn check_input(&self, input: &[f64], batch: usize) -> Result<(), NnError> {
        let expected = batch * self.sizes[0];
        if input.len() != expected {
            return Err(NnError::ShapeMismatch {
                expected,
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64], batch: usize) -> Result<Vec<f64>, NnError> {
        self.check_input(input, batch)?;
        let mut cur = input.to_vec();
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            cur = self.layer_forward(l, offset, w[0], w[1], &cur, batch);
            offset += w[0] * w[1] + w[1];
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, input: &[f64], batch: usize) -> Result<ForwardCache, NnError> {
        self.check_input(input, batch)?;
        let mut layers = Vec::with_capacity(self.sizes.len());
        layers.push(input.to_vec());
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let next = self.layer_forward(l, offset, w[0], w[1], layers.last().unwrap(), batch);
            layers.push(next);
            offset += w[0] * w[1] + w[1];
        }
        Ok(ForwardCache { batch, layers })
    }

    fn layer_forward(
        &self,
        l: usize,
        offset: usize,
        n_in: usize,
        n_out: usize,
        x: &[f64],
        batch: usize,
    ) -> Vec<f64> {
        let weights = &self.params[offset..offset + n_in * n_out];
        let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let act = self.activations[l];
        let mut out = vec![0.0; batch * n_out];
        for b in 0..batch {
            let xr = &x[b * n_in..(b + 1) * n_in];
            let yr = &mut out[b * n_out..(b + 1) * n_out];
            for (o, y) in yr.iter_mut().enumerate() {
                let wr = &weights[o * n_in..(o + 1) * n_in];
                let z = bias[o] + wr.iter().zip(xr).map(|(w, x)| w * x).sum::<f64>();
                *y = act.apply(z);
            }
        }
        out
    }

    /// Gradients of a scalar loss given `grad_output = dL/d(output)`.
    /// Returns `(dL/dparams, dL/dinput)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let batch = cache.batch;
        let expected = batch * self.output_width();
        if grad_output.len() != expected {
            return Err(NnError::ShapeMismatch {
                expected,
                got: grad_output.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(self.sizes.len() - 1);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }

        let mut delta = grad_output.to_vec();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let out = &cache.layers[l + 1];
            let act = self.activations[l];
            for (d, a) in delta.iter_mut().zip(out) {
                *d *= act.derivative_from_output(*a);
            }
            let x = &cache.layers[l];
            let o = offsets[l];
            let (gw, rest) = grads[o..o + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let weights = &self.params[o..o + n_in * n_out];
            let mut dx = vec![0.0; batch * n_in];
            for b in 0..batch {
                let xr = &x[b * n_in..(b + 1) * n_in];
                let dr = &delta[b * n_out..(b + 1) * n_out];
                let dxr = &mut dx[b * n_in..(b + 1) * n_in];
                for (j, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    rest[j] += d;
                    let gwr = &mut gw[j * n_in..(j + 1) * n_in];
                    let wr = &weights[j * n_in..(j + 1) * n_in];
                    for i in 0..n_in {
                        gwr[i] += d * xr[i];
                        dxr[i] += d * wr[i];
                    }
                }
            }
            delta = dx;
        }
        Ok((grads, delta))
    }
}

/// Numerically stable softmax of each row.
pub fn softmax_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

/// Pulls `dL/dp` back through a row softmax: `dL/dz = p * (g - <g, p>)`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.chunks(width).zip(grad_probs.chunks(width)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(a, b)| a * (b - dot)));
    }
    out
}

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_net_matches_hand_arithmetic() {
        // 2 -> 2 (tanh) -> 1 (identity)
        let params = vec![
            0.5, -0.25, // w1 row 0
            0.1, 0.3, // w1 row 1
            0.05, -0.1, // b1
            1.5, -2.0, // w2
            0.2,  // b2
        ];
        let net = Mlp::from_params(
            &[2, 2, 1],
            vec![Activation::Tanh, Activation::Identity],
            params,
        )
        .unwrap();
        let x = [0.8, -0.4];
        let h0 = (0.5 * 0.8 + -0.25 * -0.4 + 0.05_f64).tanh();
        let h1 = (0.1 * 0.8 + 0.3 * -0.4 - 0.1_f64).tanh();
        let expected = 1.5 * h0 - 2.0 * h1 + 0.2;
        let y = net.forward(&x, 1).unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(
            &[3, 4, 4, 2],
            Activation::Tanh,
            Activation::Identity,
            0.5,
            &mut rng,
        )
        .unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights = [0.7, -1.3, 0.4, 2.0];
        // L = sum of output * fixed weights
        let loss = |n: &Mlp| -> f64 {
            n.forward(&x, 2)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum()
        };
        let cache = net.forward_cached(&x, 2).unwrap();
        let (g, gx) = net.backward(&cache, &weights).unwrap();
        let h = 1e-6;
        for i in 0..net.params().len() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "param {i}: {fd} vs {}", g[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let f = |v: &[f64]| -> f64 {
                net.forward(v, 2)
                    .unwrap()
                    .iter()
                    .zip(&weights)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax_rows(&[0.0; 5], 5);
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let q = softmax_rows(&[1000.0, -1000.0, 3.0, 0.0], 2);
        assert!((q[0] - 1.0).abs() < 1e-15 && q[1] >= 0.0);
        assert!((q[2] + q[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(
            &[3, 2],
            Activation::Tanh,
            Activation::Identity,
            0.1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(
            net.forward(&[1.0, 2.0], 1),
            Err(NnError::ShapeMismatch {
                expected: 3,
                got: 2
            })
        );
        assert_eq!(param_count(&[3, 2]), 8);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
