//! Fully connected ReLU network with a linear output layer and a hand-written
//! reverse pass. Parameters live in one flat vector so the optimizer can treat
//! every model uniformly.
//!
//! Layout per layer `l`: weights `W_l` (out x in, row-major) followed by the
//! bias `b_l` (out).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_cached`] for one input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// Post-ReLU activations of each hidden layer.
    hidden: Vec<Vec<f64>>,
}

fn num_params_for(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero network with layer widths `sizes` (input first, output last).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "network sizes {sizes:?} need at least an input and an output layer of nonzero width"
            )));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; num_params_for(sizes)],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for l in 0..net.num_layers() {
            net.init_layer_glorot(l, rng);
        }
        Ok(net)
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let net = Self::zeros(&sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                what: "network parameters",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("network parameter {i}")));
        }
        Ok(Self { sizes, params })
    }

    pub(crate) fn init_layer_glorot(&mut self, layer: usize, rng: &mut Rng) {
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (w, _) = self.layer_offsets(layer);
        for v in &mut self.params[w..w + fan_in * fan_out] {
            *v = rng.random_range(-a..a);
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
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

    /// Offsets of (weights, bias) for `layer` in the flat parameter vector.
    pub fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.sizes[layer] * self.sizes[layer + 1])
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.sizes[0] {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.sizes[0],
                got: x.len(),
            });
        }
        Ok(())
    }

    fn affine(&self, layer: usize, input: &[f64], out: &mut Vec<f64>) {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let (w, b) = self.layer_offsets(layer);
        let weights = &self.params[w..w + n_in * n_out];
        let bias = &self.params[b..b + n_out];
        out.clear();
        out.extend(
            weights
                .chunks_exact(n_in)
                .zip(bias)
                .map(|(row, &bo)| row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bo),
        );
    }

    /// Output logits for `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut hidden = Vec::with_capacity(self.num_layers() - 1);
        let mut current = x.to_vec();
        let mut next = Vec::new();
        for l in 0..self.num_layers() {
            self.affine(l, &current, &mut next);
            if l + 1 < self.num_layers() {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
                hidden.push(next.clone());
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok((
            current,
            ForwardCache {
                input: x.to_vec(),
                hidden,
            },
        ))
    }

    /// Accumulate `d loss / d params` into `grad` given `upstream = d loss / d output`.
    /// Optionally writes `d loss / d input` into `input_grad`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        self.check_cache(cache)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                what: "gradient buffer",
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let mut delta = upstream.to_vec();
        let mut prev = Vec::new();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input: &[f64] = if l == 0 {
                &cache.input
            } else {
                &cache.hidden[l - 1]
            };
            let (w, b) = self.layer_offsets(l);
            {
                let (gw, gb) = grad[w..b + n_out].split_at_mut(n_in * n_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            let need_prev = l > 0 || input_grad.is_some();
            if !need_prev {
                break;
            }
            prev.clear();
            prev.resize(n_in, 0.0);
            let weights = &self.params[w..w + n_in * n_out];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &wv) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                    *p += wv * d;
                }
            }
            if l > 0 {
                for (p, &a) in prev.iter_mut().zip(&cache.hidden[l - 1]) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            std::mem::swap(&mut delta, &mut prev);
        }
        if let Some(ig) = input_grad {
            if ig.len() != self.input_dim() {
                return Err(Error::DimensionMismatch {
                    what: "input gradient buffer",
                    expected: self.input_dim(),
                    got: ig.len(),
                });
            }
            ig.copy_from_slice(&delta);
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.input.len() != self.sizes[0] {
            return Err(Error::CacheMismatch(format!(
                "input width {} != {}",
                cache.input.len(),
                self.sizes[0]
            )));
        }
        if cache.hidden.len() != self.num_layers() - 1 {
            return Err(Error::CacheMismatch(format!(
                "{} hidden activations recorded, network has {} hidden layers",
                cache.hidden.len(),
                self.num_layers() - 1
            )));
        }
        for (l, h) in cache.hidden.iter().enumerate() {
            if h.len() != self.sizes[l + 1] {
                return Err(Error::CacheMismatch(format!("hidden layer {l} width")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_difference_gradient, seeded_rng};

    #[test]
    fn layout_is_contiguous() {
        let net = Mlp::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(net.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(net.layer_offsets(0), (0, 12));
        assert_eq!(net.layer_offsets(1), (16, 24));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Mlp::zeros(&[3]).is_err());
        assert!(Mlp::zeros(&[3, 0, 2]).is_err());
        let net = Mlp::zeros(&[3, 2]).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded_rng(3);
        let net = Mlp::glorot(&[3, 5, 4, 2], &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];
        let up = [0.4, -1.3];
        let (_, cache) = net.forward_cached(&x).unwrap();
        let mut grad = vec![0.0; net.num_params()];
        let mut ig = vec![0.0; 3];
        net.backward(&cache, &up, &mut grad, Some(&mut ig)).unwrap();

        let f = |p: &[f64]| {
            let n = Mlp::from_parts(net.sizes().to_vec(), p.to_vec()).unwrap();
            let out = n.forward(&x).unwrap();
            out.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = finite_difference_gradient(f, net.params(), 1e-5).unwrap();
        for (a, n) in grad.iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-7 * a.abs().max(1.0), "{a} vs {n}");
        }
        let fx = |xv: &[f64]| {
            let out = net.forward(xv).unwrap();
            out.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let fdx = finite_difference_gradient(fx, &x, 1e-5).unwrap();
        for (a, n) in ig.iter().zip(&fdx) {
            assert!((a - n).abs() <= 1e-7 * a.abs().max(1.0));
        }
    }

    #[test]
    fn cache_from_other_network_is_rejected() {
        let a = Mlp::zeros(&[2, 3, 2]).unwrap();
        let b = Mlp::zeros(&[2, 2]).unwrap();
        let (_, cache) = b.forward_cached(&[1.0, 2.0]).unwrap();
        let mut g = vec![0.0; a.num_params()];
        assert!(matches!(
            a.backward(&cache, &[1.0, 0.0], &mut g, None),
            Err(Error::CacheMismatch(_))
        ));
    }
}
