//! Small fully connected networks with hand-written backpropagation.
//!
//! Parameters live in one flat buffer laid out layer by layer as
//! `[W_0 (row-major, out x in), b_0, W_1, b_1, ...]`, which lets models
//! expose a single parameter vector to the optimizer.

use rand::Rng;
use rand_distr::StandardNormal;

/// Feed-forward network with `tanh` hidden activations and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer activations recorded by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    // activations[0] is the input; activations[k] the output of layer k-1 after its nonlinearity.
    activations: Vec<Vec<f64>>,
}

/// How the output layer is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputInit {
    /// Output weights and bias set to zero, so the network outputs zero everywhere.
    Zero,
    /// Output layer drawn like hidden layers, multiplied by the given gain.
    Random(f64),
}

pub(crate) fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Builds a network with layer widths `sizes` (input first, output last).
    /// Hidden weights use a scaled normal draw with variance `1 / fan_in`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: OutputInit, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut params = Vec::with_capacity(param_count(sizes));
        let last = sizes.len() - 2;
        for (k, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = match (k == last, output) {
                (true, OutputInit::Zero) => 0.0,
                (true, OutputInit::Random(g)) => g,
                (false, _) => 1.0,
            };
            let std = gain / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let v: f64 = rng.sample(StandardNormal);
                params.push(v * std);
            }
            for _ in 0..fan_out {
                let v: f64 = rng.sample(StandardNormal);
                // Output bias follows the output gain; hidden biases stay small.
                params.push(if k == last { v * gain * 0.1 } else { v * 0.1 });
            }
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    /// Rebuilds a network from explicit sizes and a flat parameter buffer.
    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        if sizes.len() < 2 || sizes.contains(&0) || param_count(&sizes) != params.len() {
            return None;
        }
        Some(Mlp { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let n_layers = self.sizes.len() - 1;
        let mut offset = 0;
        for k in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            let (w, b) = self.layer(offset, fan_in, fan_out);
            offset += fan_in * fan_out + fan_out;
            let mut y = affine(w, b, &x, fan_in);
            if k + 1 < n_layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
        }
        x
    }

    pub fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, MlpCache) {
        let n_layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(n_layers);
        activations.push(input.to_vec());
        let mut offset = 0;
        let mut out = Vec::new();
        for k in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            let (w, b) = self.layer(offset, fan_in, fan_out);
            offset += fan_in * fan_out + fan_out;
            let mut y = affine(w, b, activations.last().unwrap(), fan_in);
            if k + 1 < n_layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
                activations.push(y);
            } else {
                out = y;
            }
        }
        (out, MlpCache { activations })
    }

    /// Backpropagates `grad_out` (dL/d output). Parameter gradients are
    /// accumulated (added) into `grad_params` when given; returns dL/d input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], mut grad_params: Option<&mut [f64]>) -> Vec<f64> {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for k in 0..n_layers {
            offsets.push(offset);
            offset += self.sizes[k] * self.sizes[k + 1] + self.sizes[k + 1];
        }

        // delta = dL/d(pre-activation) of the current layer
        let mut delta = grad_out.to_vec();
        for k in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            let (w, _) = self.layer(offsets[k], fan_in, fan_out);
            let input = &cache.activations[k];
            if let Some(g) = grad_params.as_deref_mut() {
                let gw = &mut g[offsets[k]..offsets[k] + fan_in * fan_out + fan_out];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                        for (gv, xv) in row.iter_mut().zip(input) {
                            *gv += d * xv;
                        }
                    }
                    gw[fan_in * fan_out + o] += d;
                }
            }
            let mut grad_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    for (gi, wv) in grad_in.iter_mut().zip(row) {
                        *gi += d * wv;
                    }
                }
            }
            if k > 0 {
                // input to this layer is tanh output of the previous one
                for (gi, a) in grad_in.iter_mut().zip(input) {
                    *gi *= 1.0 - a * a;
                }
            }
            delta = grad_in;
        }
        delta
    }

    fn layer(&self, offset: usize, fan_in: usize, fan_out: usize) -> (&[f64], &[f64]) {
        let w = &self.params[offset..offset + fan_in * fan_out];
        let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        (w, b)
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], fan_in: usize) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, bo)| {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            bo + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_init_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[2, 16, 16, 3], OutputInit::Zero, &mut rng);
        assert_eq!(net.forward(&[0.4, -2.0]), vec![0.0; 3]);
        assert_eq!(net.num_params(), param_count(&[2, 16, 16, 3]));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(&[3, 5, 4, 2], OutputInit::Random(1.0), &mut rng);
        let x = [0.3, -0.7, 1.1];
        let weights = [0.6, -1.3];
        let loss = |p: &[f64]| {
            let n = Mlp::from_parts(net.sizes().to_vec(), p.to_vec()).unwrap();
            n.forward(&x).iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = net.forward_cached(&x);
        let mut grad = vec![0.0; net.num_params()];
        let gin = net.backward(&cache, &weights, Some(&mut grad));
        let fd = finite_diff_grad(loss, net.params(), 1e-5);
        assert!(relative_error(&grad, &fd) < 1e-7);

        let loss_x = |xv: &[f64]| net.forward(xv).iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
        let fd_x = finite_diff_grad(loss_x, &x, 1e-5);
        assert!(relative_error(&gin, &fd_x) < 1e-7);
    }

    #[test]
    fn cached_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[2, 8, 2], OutputInit::Random(0.5), &mut rng);
        let x = [1.5, -0.25];
        assert_eq!(net.forward(&x), net.forward_cached(&x).0);
    }
}
