//! Label models `p(ỹᵏ | y [, x])` over K weak sources.
//!
//! Each source has a `(C+1) x C` column-stochastic transition matrix: row
//! `i` is the observed weak label (`0` = abstain, else a class), column `j`
//! is the true class `j + 1`. Matrices are parameterized by unconstrained
//! logits passed through a column-wise softmax, so any finite parameter
//! vector realizes valid distributions.
//!
//! * [`GlobalLabelModel`]: one logit matrix per source, shared by all points.
//! * [`AmortizedLabelModel`]: a network maps `x` to the K logit matrices.
//! * [`LatentLabelModel`]: a discrete latent state `h` with `p(h | x)` from a
//!   network and per-state transitions; sources are independent given
//!   `(y, h)` but not given `y` alone.

mod identifiability;
mod init;

pub use identifiability::{
    check_injective, construct_equivalent_pair, EquivalentPair, InjectivityReport,
    DEFAULT_RANK_TOLERANCE,
};
pub use init::{hard_majority_vote, majority_vote_estimates, majority_vote_init};

use serde::{Deserialize, Serialize};

use crate::end_model::DEFAULT_HIDDEN_WIDTH;
use crate::error::{Error, Result};
use crate::math::{self, Matrix, Rng, SUM_TOLERANCE};
use crate::mlp::{ForwardCache, Mlp};

/// Realized `p(ỹ = i | y = j)` for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    num_classes: usize,
    /// `(C+1) x C`, row-major.
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(num_classes: usize, entries: Vec<f64>) -> Result<Self> {
        let m = Self {
            num_classes,
            entries,
        };
        m.check(SUM_TOLERANCE)?;
        Ok(m)
    }

    /// Build from `C` columns of length `C+1`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let c = columns.len();
        let mut entries = vec![0.0; (c + 1) * c];
        for (j, col) in columns.iter().enumerate() {
            if col.len() != c + 1 {
                return Err(Error::DimensionMismatch {
                    what: "transition column",
                    expected: c + 1,
                    got: col.len(),
                });
            }
            for (i, &v) in col.iter().enumerate() {
                entries[i * c + j] = v;
            }
        }
        Self::new(c, entries)
    }

    /// Noiseless source that never abstains: zero abstain row, identity below.
    pub fn identity_extended(num_classes: usize) -> Self {
        let c = num_classes;
        let mut entries = vec![0.0; (c + 1) * c];
        for j in 0..c {
            entries[(j + 1) * c + j] = 1.0;
        }
        Self {
            num_classes: c,
            entries,
        }
    }

    pub fn uniform(num_classes: usize) -> Self {
        let c = num_classes;
        Self {
            num_classes: c,
            entries: vec![1.0 / (c + 1) as f64; (c + 1) * c],
        }
    }

    /// Abstains with probability `abstain`; otherwise votes correctly with
    /// probability `accuracy` and spreads the rest evenly over wrong classes.
    pub fn symmetric(num_classes: usize, accuracy: f64, abstain: f64) -> Result<Self> {
        let c = num_classes;
        if c < 2 || accuracy < 0.0 || abstain < 0.0 || accuracy + abstain > 1.0 + 1e-12 {
            return Err(Error::InvalidTransition(format!(
                "accuracy {accuracy} + abstain {abstain} for {c} classes"
            )));
        }
        let wrong = (1.0 - accuracy - abstain).max(0.0) / (c - 1) as f64;
        let mut entries = vec![0.0; (c + 1) * c];
        for j in 0..c {
            entries[j] = abstain;
            for i in 1..=c {
                entries[i * c + j] = if i == j + 1 { accuracy } else { wrong };
            }
        }
        Self::new(c, entries)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `p(ỹ = weak | y = class)` with `weak` in `0..=C` and `class` in `1..=C`.
    pub fn prob(&self, weak: usize, class: usize) -> f64 {
        self.entries[weak * self.num_classes + class - 1]
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        (0..=self.num_classes)
            .map(|i| self.prob(i, class))
            .collect()
    }

    /// Relabel the true classes: column `j` of the result is column `perm[j]`
    /// of `self` (both zero-based).
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Self> {
        let cols: Vec<Vec<f64>> = perm.iter().map(|&p| self.column(p + 1)).collect();
        Self::from_columns(&cols)
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_row_major(self.num_classes + 1, self.num_classes, self.entries.clone())
            .expect("shape is fixed by construction")
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() + 1 {
            return Err(Error::DimensionMismatch {
                what: "transition matrix rows",
                expected: m.cols() + 1,
                got: m.rows(),
            });
        }
        Self::new(m.cols(), m.data().to_vec())
    }

    /// Entries in `[0, 1]` and every column summing to one within `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let c = self.num_classes;
        if self.entries.len() != (c + 1) * c {
            return Err(Error::DimensionMismatch {
                what: "transition entries",
                expected: (c + 1) * c,
                got: self.entries.len(),
            });
        }
        if let Some(v) = self.entries.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidTransition(format!(
                "entry {v} outside [0, 1]"
            )));
        }
        for j in 1..=c {
            let s: f64 = self.column(j).iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::InvalidTransition(format!("column {j} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Logits whose column softmax reproduces this matrix (floored at 1e-300).
    pub fn to_logits(&self) -> Vec<f64> {
        self.entries.iter().map(|&p| math::floored_ln(p)).collect()
    }
}

/// Column-wise log-softmax of a `(C+1) x C` row-major logit block.
pub(crate) fn column_log_softmax(c: usize, logits: &[f64], out: &mut [f64]) {
    let rows = c + 1;
    let mut col = vec![0.0; rows];
    for j in 0..c {
        for i in 0..rows {
            col[i] = logits[i * c + j];
        }
        let lse = math::lse(&col);
        for i in 0..rows {
            out[i * c + j] = logits[i * c + j] - lse;
        }
    }
}

fn block_size(c: usize) -> usize {
    (c + 1) * c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalLabelModel {
    num_classes: usize,
    num_sources: usize,
    /// K blocks of `(C+1) x C` logits.
    logits: Vec<f64>,
}

impl GlobalLabelModel {
    /// All-zero logits: every transition entry equals `1 / (C+1)`.
    pub fn new(num_classes: usize, num_sources: usize) -> Self {
        Self {
            num_classes,
            num_sources,
            logits: vec![0.0; num_sources * block_size(num_classes)],
        }
    }

    pub fn from_matrices(matrices: &[TransitionMatrix]) -> Result<Self> {
        let c = matrices
            .first()
            .map(|m| m.num_classes())
            .ok_or(Error::Empty("transition matrices"))?;
        let mut logits = Vec::with_capacity(matrices.len() * block_size(c));
        for m in matrices {
            if m.num_classes() != c {
                return Err(Error::DimensionMismatch {
                    what: "classes per transition matrix",
                    expected: c,
                    got: m.num_classes(),
                });
            }
            logits.extend(m.to_logits());
        }
        Ok(Self {
            num_classes: c,
            num_sources: matrices.len(),
            logits,
        })
    }

    pub fn set_matrices(&mut self, matrices: &[TransitionMatrix]) -> Result<()> {
        let other = Self::from_matrices(matrices)?;
        if other.num_sources != self.num_sources || other.num_classes != self.num_classes {
            return Err(Error::InvalidConfig(
                "matrix set does not match model shape".into(),
            ));
        }
        self.logits = other.logits;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmortizedLabelModel {
    num_classes: usize,
    num_sources: usize,
    net: Mlp,
}

impl AmortizedLabelModel {
    /// Two ReLU hidden layers of width `hidden`, output `K (C+1) C` logits.
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        num_sources: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_sources == 0 {
            return Err(Error::InvalidConfig(
                "amortized label model needs at least one source".into(),
            ));
        }
        let out = num_sources * block_size(num_classes);
        let net = Mlp::glorot(&[input_dim, hidden, hidden, out], rng)?;
        Ok(Self {
            num_classes,
            num_sources,
            net,
        })
    }

    pub fn with_default_width(
        input_dim: usize,
        num_classes: usize,
        num_sources: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::new(
            input_dim,
            num_classes,
            num_sources,
            DEFAULT_HIDDEN_WIDTH,
            rng,
        )
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentLabelModel {
    num_classes: usize,
    num_sources: usize,
    num_states: usize,
    /// H x K blocks of `(C+1) x C` logits.
    logits: Vec<f64>,
    /// `x -> H` mixture logits.
    mixture: Mlp,
}

pub const DEFAULT_LATENT_STATES: usize = 2;

impl LatentLabelModel {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        num_sources: usize,
        num_states: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::InvalidConfig(
                "latent model needs at least one state".into(),
            ));
        }
        let mixture = Mlp::glorot(&[input_dim, hidden, hidden, num_states], rng)?;
        Ok(Self {
            num_classes,
            num_sources,
            num_states,
            logits: vec![0.0; num_states * num_sources * block_size(num_classes)],
            mixture,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn mixture_network(&self) -> &Mlp {
        &self.mixture
    }

    pub fn mixture_network_mut(&mut self) -> &mut Mlp {
        &mut self.mixture
    }

    /// Logits of state `h`, source `k`.
    pub fn state_logits_mut(&mut self, h: usize, k: usize) -> &mut [f64] {
        let b = block_size(self.num_classes);
        let off = (h * self.num_sources + k) * b;
        &mut self.logits[off..off + b]
    }

    /// `p(h | x)`.
    pub fn mixture_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.mixture.forward(x)?;
        let mut p = vec![0.0; z.len()];
        math::softmax_into(&z, &mut p);
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LabelModel {
    Global(GlobalLabelModel),
    Amortized(AmortizedLabelModel),
    Latent(LatentLabelModel),
}

/// Transition log-probabilities realized for one input.
#[derive(Debug, Clone)]
pub struct Realized {
    pub num_states: usize,
    pub num_sources: usize,
    pub num_classes: usize,
    /// `log p(h | x)`, length H (a single `0.0` for non-latent models).
    pub log_mix: Vec<f64>,
    /// `log p(ỹᵏ = i | y = j [, h])`, laid out `[h][k][i][j]`.
    pub log_phi: Vec<f64>,
    cache: Option<ForwardCache>,
}

impl Realized {
    pub fn block(&self, h: usize, k: usize) -> &[f64] {
        let b = block_size(self.num_classes);
        let off = (h * self.num_sources + k) * b;
        &self.log_phi[off..off + b]
    }

    /// `log p(ỹᵏ = weak | y = class_index + 1, h)`.
    pub fn log_prob(&self, h: usize, k: usize, weak: usize, class_index: usize) -> f64 {
        self.block(h, k)[weak * self.num_classes + class_index]
    }
}

impl LabelModel {
    pub fn global(num_classes: usize, num_sources: usize) -> Self {
        LabelModel::Global(GlobalLabelModel::new(num_classes, num_sources))
    }

    pub fn num_classes(&self) -> usize {
        match self {
            LabelModel::Global(m) => m.num_classes,
            LabelModel::Amortized(m) => m.num_classes,
            LabelModel::Latent(m) => m.num_classes,
        }
    }

    pub fn num_sources(&self) -> usize {
        match self {
            LabelModel::Global(m) => m.num_sources,
            LabelModel::Amortized(m) => m.num_sources,
            LabelModel::Latent(m) => m.num_sources,
        }
    }

    pub fn num_states(&self) -> usize {
        match self {
            LabelModel::Latent(m) => m.num_states,
            _ => 1,
        }
    }

    pub fn is_x_dependent(&self) -> bool {
        !matches!(self, LabelModel::Global(_))
    }

    pub fn num_params(&self) -> usize {
        match self {
            LabelModel::Global(m) => m.logits.len(),
            LabelModel::Amortized(m) => m.net.num_params(),
            LabelModel::Latent(m) => m.logits.len() + m.mixture.num_params(),
        }
    }

    /// Copy of the flat parameter vector.
    pub fn params(&self) -> Vec<f64> {
        match self {
            LabelModel::Global(m) => m.logits.clone(),
            LabelModel::Amortized(m) => m.net.params().to_vec(),
            LabelModel::Latent(m) => {
                let mut p = m.logits.clone();
                p.extend_from_slice(m.mixture.params());
                p
            }
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "label model parameters",
                expected: self.num_params(),
                got: params.len(),
            });
        }
        match self {
            LabelModel::Global(m) => m.logits.copy_from_slice(params),
            LabelModel::Amortized(m) => m.net.params_mut().copy_from_slice(params),
            LabelModel::Latent(m) => {
                let n = m.logits.len();
                m.logits.copy_from_slice(&params[..n]);
                m.mixture.params_mut().copy_from_slice(&params[n..]);
            }
        }
        Ok(())
    }

    /// Apply `f` to the parameter slices in flat order.
    pub fn for_each_param_slice_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        match self {
            LabelModel::Global(m) => f(0, &mut m.logits),
            LabelModel::Amortized(m) => f(0, m.net.params_mut()),
            LabelModel::Latent(m) => {
                let n = m.logits.len();
                f(0, &mut m.logits);
                f(n, m.mixture.params_mut());
            }
        }
    }

    /// Realize the transition log-probabilities for input `x`. `x` may be
    /// `None` only for the global variant.
    pub fn realize(&self, x: Option<&[f64]>) -> Result<Realized> {
        let c = self.num_classes();
        let k = self.num_sources();
        let b = block_size(c);
        match self {
            LabelModel::Global(m) => {
                let mut log_phi = vec![0.0; m.logits.len()];
                for s in 0..k {
                    column_log_softmax(
                        c,
                        &m.logits[s * b..(s + 1) * b],
                        &mut log_phi[s * b..(s + 1) * b],
                    );
                }
                Ok(Realized {
                    num_states: 1,
                    num_sources: k,
                    num_classes: c,
                    log_mix: vec![0.0],
                    log_phi,
                    cache: None,
                })
            }
            LabelModel::Amortized(m) => {
                let x = x.ok_or(Error::MissingFeatures)?;
                let (out, cache) = m.net.forward_cached(x)?;
                let mut log_phi = vec![0.0; k * b];
                for s in 0..k {
                    column_log_softmax(
                        c,
                        &out[s * b..(s + 1) * b],
                        &mut log_phi[s * b..(s + 1) * b],
                    );
                }
                Ok(Realized {
                    num_states: 1,
                    num_sources: k,
                    num_classes: c,
                    log_mix: vec![0.0],
                    log_phi,
                    cache: Some(cache),
                })
            }
            LabelModel::Latent(m) => {
                let x = x.ok_or(Error::MissingFeatures)?;
                let (z, cache) = m.mixture.forward_cached(x)?;
                let mut log_mix = vec![0.0; m.num_states];
                math::log_softmax_into(&z, &mut log_mix);
                let mut log_phi = vec![0.0; m.logits.len()];
                for blk in 0..m.num_states * k {
                    column_log_softmax(
                        c,
                        &m.logits[blk * b..(blk + 1) * b],
                        &mut log_phi[blk * b..(blk + 1) * b],
                    );
                }
                Ok(Realized {
                    num_states: m.num_states,
                    num_sources: k,
                    num_classes: c,
                    log_mix,
                    log_phi,
                    cache: Some(cache),
                })
            }
        }
    }

    /// Accumulate parameter gradients into `grad` given `d_logits`, the
    /// gradient w.r.t. the transition logits (same layout as
    /// [`Realized::log_phi`]), and `d_mix`, the gradient w.r.t. the mixture
    /// logits (ignored for non-latent models).
    pub fn backward(
        &self,
        realized: &Realized,
        d_logits: &[f64],
        d_mix: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if grad.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "label model gradient buffer",
                expected: self.num_params(),
                got: grad.len(),
            });
        }
        match self {
            LabelModel::Global(_) => {
                for (g, d) in grad.iter_mut().zip(d_logits) {
                    *g += d;
                }
                Ok(())
            }
            LabelModel::Amortized(m) => {
                let cache = realized.cache.as_ref().ok_or_else(|| {
                    Error::CacheMismatch("no network activations recorded".into())
                })?;
                m.net.backward(cache, d_logits, grad, None)
            }
            LabelModel::Latent(m) => {
                let cache = realized.cache.as_ref().ok_or_else(|| {
                    Error::CacheMismatch("no mixture activations recorded".into())
                })?;
                let n = m.logits.len();
                let (g_logits, g_mix) = grad.split_at_mut(n);
                for (g, d) in g_logits.iter_mut().zip(d_logits) {
                    *g += d;
                }
                m.mixture.backward(cache, d_mix, g_mix, None)
            }
        }
    }

    /// Per-state realized matrices, `[h][k]`.
    pub fn state_matrices(&self, x: Option<&[f64]>) -> Result<Vec<Vec<TransitionMatrix>>> {
        let r = self.realize(x)?;
        let c = r.num_classes;
        Ok((0..r.num_states)
            .map(|h| {
                (0..r.num_sources)
                    .map(|k| TransitionMatrix {
                        num_classes: c,
                        entries: r.block(h, k).iter().map(|v| v.exp()).collect(),
                    })
                    .collect()
            })
            .collect())
    }

    /// Effective per-source matrices at `x`. For the latent model these are
    /// the mixture averages `Σ_h p(h|x) φ_{h,k}`.
    pub fn matrices(&self, x: Option<&[f64]>) -> Result<Vec<TransitionMatrix>> {
        let r = self.realize(x)?;
        let c = r.num_classes;
        let b = block_size(c);
        let mut out = Vec::with_capacity(r.num_sources);
        for k in 0..r.num_sources {
            let mut entries = vec![0.0; b];
            for h in 0..r.num_states {
                let w = r.log_mix[h].exp();
                for (e, lp) in entries.iter_mut().zip(r.block(h, k)) {
                    *e += w * lp.exp();
                }
            }
            out.push(TransitionMatrix {
                num_classes: c,
                entries,
            });
        }
        Ok(out)
    }

    /// `p(ỹᵏ = weak | y = class [, x])`.
    pub fn transition_prob(
        &self,
        k: usize,
        x: Option<&[f64]>,
        weak: usize,
        class: usize,
    ) -> Result<f64> {
        let c = self.num_classes();
        if k >= self.num_sources() {
            return Err(Error::OutOfRange(format!(
                "source {k} of {}",
                self.num_sources()
            )));
        }
        if weak > c {
            return Err(Error::OutOfRange(format!("weak label {weak} > {c}")));
        }
        if class == 0 || class > c {
            return Err(Error::OutOfRange(format!("class {class} outside 1..={c}")));
        }
        Ok(self.matrices(x)?[k].prob(weak, class))
    }
}

/// `p(ỹ¹..ỹᴷ | y, x) = Σ_h p(h|x) Π_k p(ỹᵏ | y, h)`.
pub fn latent_marginal_prob(
    model: &LatentLabelModel,
    x: &[f64],
    votes: &[usize],
    class: usize,
) -> Result<f64> {
    let c = model.num_classes;
    if votes.len() != model.num_sources {
        return Err(Error::DimensionMismatch {
            what: "votes",
            expected: model.num_sources,
            got: votes.len(),
        });
    }
    if class == 0 || class > c || votes.iter().any(|&v| v > c) {
        return Err(Error::OutOfRange(format!(
            "class {class} or votes {votes:?}"
        )));
    }
    let lm = LabelModel::Latent(model.clone());
    let r = lm.realize(Some(x))?;
    let mut total = 0.0;
    for h in 0..r.num_states {
        let log_prod: f64 = votes
            .iter()
            .enumerate()
            .map(|(k, &v)| r.log_prob(h, k, v, class - 1))
            .sum();
        total += (r.log_mix[h] + log_prod).exp();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::seeded_rng;

    fn constructed() -> TransitionMatrix {
        TransitionMatrix::from_columns(&[vec![0.1, 0.8, 0.1], vec![0.2, 0.1, 0.7]]).unwrap()
    }

    #[test]
    fn matrix_validation() {
        assert!(
            TransitionMatrix::from_columns(&[vec![0.5, 0.6, 0.1], vec![0.2, 0.1, 0.7]]).is_err()
        );
        assert!(
            TransitionMatrix::from_columns(&[vec![-0.1, 1.0, 0.1], vec![0.2, 0.1, 0.7]]).is_err()
        );
        let m = TransitionMatrix::symmetric(3, 0.7, 0.1).unwrap();
        assert!((m.prob(0, 2) - 0.1).abs() < 1e-15);
        assert!((m.prob(2, 2) - 0.7).abs() < 1e-15);
        assert!((m.prob(1, 2) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_logits_are_uniform() {
        let lm = LabelModel::global(3, 2);
        for k in 0..2 {
            for w in 0..=3 {
                for y in 1..=3 {
                    let p = lm.transition_prob(k, None, w, y).unwrap();
                    assert!((p - 0.25).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn global_reads_back_constructed_matrix() {
        let lm = LabelModel::Global(GlobalLabelModel::from_matrices(&[constructed()]).unwrap());
        assert!((lm.transition_prob(0, None, 1, 1).unwrap() - 0.8).abs() < 1e-12);
        assert!((lm.transition_prob(0, None, 2, 2).unwrap() - 0.7).abs() < 1e-12);
        assert!(lm.transition_prob(1, None, 1, 1).is_err());
        assert!(lm.transition_prob(0, None, 3, 1).is_err());
        assert!(lm.transition_prob(0, None, 1, 0).is_err());
    }

    #[test]
    fn constant_amortized_network() {
        let mut rng = seeded_rng(0);
        let mut m = AmortizedLabelModel::new(2, 2, 1, 4, &mut rng).unwrap();
        let bias = [0.3, -0.2, 1.0, 0.0, -0.5, 0.4];
        let net = m.network_mut();
        let (_, b2) = net.layer_offsets(2);
        let params = net.params_mut();
        for v in params.iter_mut() {
            *v = 0.0;
        }
        params[b2..b2 + 6].copy_from_slice(&bias);
        let lm = LabelModel::Amortized(m);
        let a = lm.matrices(Some(&[3.0, -1.0])).unwrap();
        let b = lm.matrices(Some(&[-7.0, 0.5])).unwrap();
        assert_eq!(a, b);
        let mut expected = vec![0.0; 6];
        column_log_softmax(2, &bias, &mut expected);
        for (e, v) in expected.iter().zip(a[0].entries()) {
            assert!((e.exp() - v).abs() < 1e-15);
        }
        assert!(matches!(
            lm.transition_prob(0, None, 0, 1),
            Err(Error::MissingFeatures)
        ));
    }

    #[test]
    fn realized_matrices_are_column_stochastic() {
        let mut rng = seeded_rng(4);
        let lm = LabelModel::Amortized(AmortizedLabelModel::new(3, 4, 3, 8, &mut rng).unwrap());
        for m in lm.matrices(Some(&[10.0, -3.0, 2.0])).unwrap() {
            m.check(1e-9).unwrap();
        }
    }

    #[test]
    fn latent_single_state_is_product() {
        let mut rng = seeded_rng(1);
        let mut m = LatentLabelModel::new(2, 2, 2, 1, 4, &mut rng).unwrap();
        m.state_logits_mut(0, 0)
            .copy_from_slice(&constructed().to_logits());
        let x = [0.4, 0.1];
        let votes = [1, 0];
        let lm = LabelModel::Latent(m.clone());
        let mats = lm.state_matrices(Some(&x)).unwrap();
        for y in 1..=2 {
            let expected = mats[0][0].prob(votes[0], y) * mats[0][1].prob(votes[1], y);
            let got = latent_marginal_prob(&m, &x, &votes, y).unwrap();
            assert!((got - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_equal_states_match_single_state() {
        let mut rng = seeded_rng(2);
        let mut two = LatentLabelModel::new(2, 2, 2, 2, 4, &mut rng).unwrap();
        let mut one = LatentLabelModel::new(2, 2, 2, 1, 4, &mut rng).unwrap();
        let logits = constructed().to_logits();
        for h in 0..2 {
            two.state_logits_mut(h, 0).copy_from_slice(&logits);
        }
        one.state_logits_mut(0, 0).copy_from_slice(&logits);
        // zero mixture output weights -> p(h|x) = (0.5, 0.5)
        for v in two.mixture_network_mut().params_mut() {
            *v = 0.0;
        }
        let x = [1.0, -2.0];
        for y in 1..=2 {
            let a = latent_marginal_prob(&two, &x, &[2, 1], y).unwrap();
            let b = latent_marginal_prob(&one, &x, &[2, 1], y).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_distinct_states_match_enumeration() {
        let mut rng = seeded_rng(3);
        let mut m = LatentLabelModel::new(2, 2, 2, 2, 4, &mut rng).unwrap();
        let a = TransitionMatrix::symmetric(2, 0.9, 0.05).unwrap();
        let b = TransitionMatrix::symmetric(2, 0.3, 0.4).unwrap();
        let c = constructed();
        let d = TransitionMatrix::uniform(2);
        m.state_logits_mut(0, 0).copy_from_slice(&a.to_logits());
        m.state_logits_mut(0, 1).copy_from_slice(&b.to_logits());
        m.state_logits_mut(1, 0).copy_from_slice(&c.to_logits());
        m.state_logits_mut(1, 1).copy_from_slice(&d.to_logits());
        let x = [0.7, -0.3];
        let pi = m.mixture_weights(&x).unwrap();
        for votes in [[0, 0], [1, 2], [2, 2], [0, 1]] {
            for y in 1..=2 {
                let brute = pi[0] * a.prob(votes[0], y) * b.prob(votes[1], y)
                    + pi[1] * c.prob(votes[0], y) * d.prob(votes[1], y);
                let got = latent_marginal_prob(&m, &x, &votes, y).unwrap();
                assert!((got - brute).abs() < 1e-14, "{got} vs {brute}");
            }
        }
    }

    #[test]
    fn serde_round_trip() {
        let mut rng = seeded_rng(8);
        let lm = LabelModel::Latent(LatentLabelModel::new(2, 3, 2, 2, 3, &mut rng).unwrap());
        let text = serde_json::to_string(&lm).unwrap();
        let back: LabelModel = serde_json::from_str(&text).unwrap();
        assert_eq!(lm, back);
    }
}
