//! The end classifier `p_theta(y | x)`.
//!
//! Classes are 1-based in the public API (`1..=C`); probability vectors are
//! indexed by `class - 1`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, ProbVector, Rng};
use crate::mlp::{ForwardCache, Mlp};

pub const DEFAULT_HIDDEN_WIDTH: usize = 100;

const CHECKPOINT_FORMAT: &str = "weaklearn-end-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// softmax(Wx + b)
    Linear,
    /// Two ReLU hidden layers of equal width, softmax output.
    Mlp2,
}

impl Architecture {
    pub fn layer_sizes(self, input_dim: usize, num_classes: usize, hidden: usize) -> Vec<usize> {
        match self {
            Architecture::Linear => vec![input_dim, num_classes],
            Architecture::Mlp2 => vec![input_dim, hidden, hidden, num_classes],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndModel {
    architecture: Architecture,
    net: Mlp,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    architecture: Architecture,
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl EndModel {
    pub fn new(
        architecture: Architecture,
        input_dim: usize,
        num_classes: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let net = Mlp::glorot(
            &architecture.layer_sizes(input_dim, num_classes, hidden),
            rng,
        )?;
        Ok(Self { architecture, net })
    }

    pub fn zeros(
        architecture: Architecture,
        input_dim: usize,
        num_classes: usize,
        hidden: usize,
    ) -> Result<Self> {
        let net = Mlp::zeros(&architecture.layer_sizes(input_dim, num_classes, hidden))?;
        Ok(Self { architecture, net })
    }

    pub fn from_network(architecture: Architecture, net: Mlp) -> Result<Self> {
        let expected_layers = match architecture {
            Architecture::Linear => 1,
            Architecture::Mlp2 => 3,
        };
        if net.num_layers() != expected_layers {
            return Err(Error::InvalidConfig(format!(
                "{architecture:?} expects {expected_layers} layers, network has {}",
                net.num_layers()
            )));
        }
        Ok(Self { architecture, net })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(x)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbVector> {
        let logits = self.net.forward(x)?;
        let mut p = vec![0.0; logits.len()];
        math::softmax_into(&logits, &mut p);
        ProbVector::new(p)
    }

    /// Logits plus the activation cache needed by [`EndModel::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.net.forward_cached(x)
    }

    /// Accumulate parameter gradients for `upstream = d loss / d logits`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        self.net.backward(cache, upstream, grad, input_grad)
    }

    /// Most probable class in `1..=C`; lowest class on exact ties.
    pub fn argmax_class(&self, x: &[f64]) -> Result<usize> {
        let logits = self.net.forward(x)?;
        Ok(math::argmax(&logits) + 1)
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: self.architecture,
            sizes: self.net.sizes().to_vec(),
            params: self.net.params().to_vec(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Self::from_network(ck.architecture, Mlp::from_parts(ck.sizes, ck.params)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_difference_gradient, seeded_rng};
    use rand::Rng as _;

    fn ce_loss(model: &EndModel, x: &[f64], class: usize) -> f64 {
        -model.predict_proba(x).unwrap().as_slice()[class - 1].ln()
    }

    #[test]
    fn zero_linear_model_is_uniform() {
        let m = EndModel::zeros(Architecture::Linear, 3, 4, 0).unwrap();
        let p = m.predict_proba(&[1.0, -5.0, 2.0]).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn linear_model_closed_form() {
        // W = [[1, 2], [-1, 0.5]], b = [0.1, -0.2], x = [0.5, -1]
        // logits = [0.5 - 2 + 0.1, -0.5 - 0.5 - 0.2] = [-1.4, -1.2]
        let net = Mlp::from_parts(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5, 0.1, -0.2]).unwrap();
        let m = EndModel::from_network(Architecture::Linear, net).unwrap();
        let p = m.predict_proba(&[0.5, -1.0]).unwrap();
        let e0 = (-1.4f64).exp();
        let e1 = (-1.2f64).exp();
        assert!((p.as_slice()[0] - e0 / (e0 + e1)).abs() < 1e-15);
        assert_eq!(m.argmax_class(&[0.5, -1.0]).unwrap(), 2);
    }

    #[test]
    fn mlp_with_zero_hidden_weights_is_constant() {
        let mut m = EndModel::zeros(Architecture::Mlp2, 2, 3, 5).unwrap();
        let (_, b_out) = m.network().layer_offsets(2);
        m.params_mut()[b_out..b_out + 3].copy_from_slice(&[0.2, -1.0, 0.7]);
        let a = m.predict_proba(&[3.0, -2.0]).unwrap();
        let b = m.predict_proba(&[-10.0, 0.1]).unwrap();
        assert_eq!(a, b);
        let expected =
            math::softmax(&math::LogitVector::new(vec![0.2, -1.0, 0.7]).unwrap()).unwrap();
        assert_eq!(a, expected);
    }

    #[test]
    fn dimension_mismatch() {
        let m = EndModel::zeros(Architecture::Linear, 3, 2, 0).unwrap();
        assert!(matches!(
            m.predict_proba(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = seeded_rng(1);
        let m = EndModel::new(Architecture::Mlp2, 2, 3, 8, &mut rng).unwrap();
        let (_, cache) = m.forward(&[0.3, 0.4]).unwrap();
        let mut g = vec![0.0; m.num_params()];
        m.backward(&cache, &[0.0; 3], &mut g, None).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_cross_entropy_gradient_closed_form() {
        let mut rng = seeded_rng(2);
        let m = EndModel::new(Architecture::Linear, 3, 3, 0, &mut rng).unwrap();
        let x = [0.4, -1.2, 0.9];
        let class = 2;
        let p = m.predict_proba(&x).unwrap();
        let mut upstream = p.as_slice().to_vec();
        upstream[class - 1] -= 1.0;
        let (_, cache) = m.forward(&x).unwrap();
        let mut g = vec![0.0; m.num_params()];
        m.backward(&cache, &upstream, &mut g, None).unwrap();
        for c in 0..3 {
            for d in 0..3 {
                assert!((g[c * 3 + d] - upstream[c] * x[d]).abs() < 1e-15);
            }
            assert!((g[9 + c] - upstream[c]).abs() < 1e-15);
        }
        let fd = finite_difference_gradient(
            |t| {
                let mut mm = m.clone();
                mm.params_mut().copy_from_slice(t);
                ce_loss(&mm, &x, class)
            },
            m.params(),
            1e-5,
        )
        .unwrap();
        for (a, n) in g.iter().zip(&fd) {
            assert!((a - n).abs() < 1e-9);
        }
    }

    #[test]
    fn mlp2_gradient_on_random_coordinates() {
        let mut rng = seeded_rng(5);
        let m = EndModel::new(Architecture::Mlp2, 2, 3, DEFAULT_HIDDEN_WIDTH, &mut rng).unwrap();
        let x = [0.8, -0.6];
        let class = 3;
        let p = m.predict_proba(&x).unwrap();
        let mut upstream = p.as_slice().to_vec();
        upstream[class - 1] -= 1.0;
        let (_, cache) = m.forward(&x).unwrap();
        let mut g = vec![0.0; m.num_params()];
        m.backward(&cache, &upstream, &mut g, None).unwrap();
        let h = 1e-5;
        for _ in 0..50 {
            let i = rng.random_range(0..m.num_params());
            let mut plus = m.clone();
            plus.params_mut()[i] += h;
            let mut minus = m.clone();
            minus.params_mut()[i] -= h;
            let fd = (ce_loss(&plus, &x, class) - ce_loss(&minus, &x, class)) / (2.0 * h);
            let err = (g[i] - fd).abs();
            assert!(
                err <= 1e-5 * g[i].abs().max(fd.abs()) || err < 1e-9,
                "coord {i}: {} vs {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn argmax_ties_and_shift() {
        let net = Mlp::from_parts(vec![1, 2], vec![0.0, 0.0, 0.3, 0.3]).unwrap();
        let m = EndModel::from_network(Architecture::Linear, net).unwrap();
        assert_eq!(m.argmax_class(&[1.0]).unwrap(), 1);
        let net = Mlp::from_parts(vec![1, 2], vec![0.0, 0.0, 0.2, 0.8]).unwrap();
        let mut m = EndModel::from_network(Architecture::Linear, net).unwrap();
        assert_eq!(m.argmax_class(&[1.0]).unwrap(), 2);
        for b in &mut m.params_mut()[2..] {
            *b += 17.0;
        }
        assert_eq!(m.argmax_class(&[1.0]).unwrap(), 2);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = seeded_rng(9);
        let m = EndModel::new(Architecture::Mlp2, 4, 3, 7, &mut rng).unwrap();
        let back = EndModel::from_checkpoint_json(&m.to_checkpoint_json().unwrap()).unwrap();
        assert_eq!(m.architecture(), back.architecture());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
