//! Tools for reasoning about when maximum likelihood can pin down the true
//! label distribution.
//!
//! A rank-C transition matrix maps distributions over `y` injectively to
//! distributions over `ỹ`, so with known transitions the weak marginal
//! determines `p(y|x)`. With learned transitions, any invertible `m` gives
//! an observationally equivalent pair `(φ m⁻¹, m p)`.

use super::TransitionMatrix;
use crate::error::{Error, Result};
use crate::math::{Matrix, ProbVector};

pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct InjectivityReport {
    pub injective: bool,
    pub rank: usize,
    pub min_singular_value: f64,
}

/// Numerical rank test: injective iff all `C` singular values exceed `tol`.
pub fn check_injective(phi: &TransitionMatrix, tol: f64) -> InjectivityReport {
    let sv = phi.as_matrix().singular_values();
    let rank = sv.iter().filter(|&&s| s > tol).count();
    InjectivityReport {
        injective: rank == phi.num_classes(),
        rank,
        min_singular_value: sv.last().copied().unwrap_or(0.0),
    }
}

/// An alternative `(transitions, prior)` with the same weak marginals.
/// Entries are not guaranteed to be probabilities unless `m` is chosen so.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalentPair {
    pub transitions: Vec<Matrix>,
    pub prior: Vec<f64>,
}

impl EquivalentPair {
    /// Validate as proper transition matrices and a proper distribution.
    pub fn into_valid(self) -> Result<(Vec<TransitionMatrix>, ProbVector)> {
        let mats = self
            .transitions
            .iter()
            .map(TransitionMatrix::from_matrix)
            .collect::<Result<Vec<_>>>()?;
        Ok((mats, ProbVector::new(self.prior)?))
    }
}

/// `φ₂ᵏ = φ₁ᵏ m⁻¹`, `p₂ = m p₁`.
pub fn construct_equivalent_pair(
    transitions: &[TransitionMatrix],
    prior: &ProbVector,
    m: &Matrix,
) -> Result<EquivalentPair> {
    let c = prior.len();
    if m.rows() != c || m.cols() != c {
        return Err(Error::DimensionMismatch {
            what: "class mixing matrix",
            expected: c,
            got: m.rows(),
        });
    }
    let inv = m.inverse()?;
    let transitions = transitions
        .iter()
        .map(|t| {
            if t.num_classes() != c {
                return Err(Error::DimensionMismatch {
                    what: "transition classes",
                    expected: c,
                    got: t.num_classes(),
                });
            }
            t.as_matrix().matmul(&inv)
        })
        .collect::<Result<Vec<_>>>()?;
    let prior = m.matvec(prior.as_slice())?;
    Ok(EquivalentPair { transitions, prior })
}
