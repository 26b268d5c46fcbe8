//! Majority-vote initialization of label-model parameters.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{block_size, LabelModel, TransitionMatrix};
use crate::data::ABSTAIN;
use crate::error::{Error, Result};
use crate::math::{self, Rng};

/// Laplace pseudo-count added to every cell of the vote/pseudo-label table.
const SMOOTHING: f64 = 1.0;

/// Per-state logit jitter for the latent model, so states are not symmetric.
const LATENT_JITTER: f64 = 0.1;

/// Hard majority vote in `1..=C`. Ties, and points where every source
/// abstains, are broken uniformly at random.
pub fn hard_majority_vote(votes: &[usize], num_classes: usize, rng: &mut Rng) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &v in votes {
        if v != ABSTAIN {
            counts[v - 1] += 1;
        }
    }
    let max = *counts.iter().max().unwrap_or(&0);
    let tied: Vec<usize> = if max == 0 {
        (0..num_classes).collect()
    } else {
        (0..num_classes).filter(|&j| counts[j] == max).collect()
    };
    if tied.len() == 1 {
        tied[0] + 1
    } else {
        tied[rng.random_range(0..tied.len())] + 1
    }
}

/// Estimate one transition matrix per source from majority-vote pseudo-labels:
/// `φ̂ᵏ(i | j) ∝ 1 + #{n : ỹᵏₙ = i, ŷₙ = j}`.
pub fn majority_vote_estimates<'a, I>(
    votes: I,
    num_classes: usize,
    num_sources: usize,
    seed: u64,
) -> Result<Vec<TransitionMatrix>>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let c = num_classes;
    let b = block_size(c);
    let mut rng = math::seeded_rng(seed);
    let mut counts = vec![0.0f64; num_sources * b];
    let mut any_vote = false;
    for point in votes {
        if point.len() != num_sources {
            return Err(Error::DimensionMismatch {
                what: "votes per point",
                expected: num_sources,
                got: point.len(),
            });
        }
        any_vote |= point.iter().any(|&v| v != ABSTAIN);
        let yhat = hard_majority_vote(point, c, &mut rng);
        for (k, &v) in point.iter().enumerate() {
            counts[k * b + v * c + yhat - 1] += 1.0;
        }
    }
    if !any_vote {
        return Err(Error::NoVotes);
    }
    (0..num_sources)
        .map(|k| {
            let block = &counts[k * b..(k + 1) * b];
            let mut entries = vec![0.0; b];
            for j in 0..c {
                let total: f64 = (0..=c).map(|i| block[i * c + j] + SMOOTHING).sum();
                for i in 0..=c {
                    entries[i * c + j] = (block[i * c + j] + SMOOTHING) / total;
                }
            }
            TransitionMatrix::new(c, entries)
        })
        .collect()
}

/// Initialize `model` from majority-vote estimates and return them.
///
/// * global: logits set to `ln φ̂`;
/// * amortized: hidden layers re-drawn (Glorot), output weights zeroed and
///   output biases set to `ln φ̂`, so every `x` starts at the MV estimate;
/// * latent: every state starts at `ln φ̂` plus small Gaussian jitter, and the
///   mixture network outputs a uniform `p(h|x)`.
pub fn majority_vote_init<'a, I>(
    model: &mut LabelModel,
    votes: I,
    seed: u64,
) -> Result<Vec<TransitionMatrix>>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let c = model.num_classes();
    let k = model.num_sources();
    let estimates = majority_vote_estimates(votes, c, k, seed)?;
    let logits: Vec<f64> = estimates.iter().flat_map(|m| m.to_logits()).collect();
    let mut rng = math::seeded_rng(math::derive_seed(seed, 17));
    match model {
        LabelModel::Global(m) => m.logits.copy_from_slice(&logits),
        LabelModel::Amortized(m) => reset_output_layer(&mut m.net, &logits, &mut rng),
        LabelModel::Latent(m) => {
            let jitter = Normal::new(0.0, LATENT_JITTER).expect("valid std");
            for h in 0..m.num_states {
                let off = h * k * block_size(c);
                for (dst, &src) in m.logits[off..off + logits.len()].iter_mut().zip(&logits) {
                    *dst = src + jitter.sample(&mut rng);
                }
            }
            let zeros = vec![0.0; m.num_states];
            reset_output_layer(&mut m.mixture, &zeros, &mut rng);
        }
    }
    Ok(estimates)
}

fn reset_output_layer(net: &mut crate::mlp::Mlp, bias: &[f64], rng: &mut Rng) {
    let last = net.num_layers() - 1;
    for l in 0..last {
        net.init_layer_glorot(l, rng);
        let (_, b) = net.layer_offsets(l);
        let width = net.sizes()[l + 1];
        net.params_mut()[b..b + width].fill(0.0);
    }
    let (w, b) = net.layer_offsets(last);
    let params = net.params_mut();
    params[w..b].fill(0.0);
    params[b..b + bias.len()].copy_from_slice(bias);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_model::{AmortizedLabelModel, GlobalLabelModel, LatentLabelModel};
    use crate::math::seeded_rng;

    #[test]
    fn vote_counting() {
        let mut rng = seeded_rng(0);
        assert_eq!(hard_majority_vote(&[1, 1, 2], 2, &mut rng), 1);
        assert_eq!(hard_majority_vote(&[0, 2, 0], 2, &mut rng), 2);
    }

    #[test]
    fn all_abstain_is_uniform_and_seeded() {
        let draw = |seed| {
            let mut rng = seeded_rng(seed);
            (0..3000)
                .map(|_| hard_majority_vote(&[0, 0, 0], 3, &mut rng))
                .collect::<Vec<_>>()
        };
        let a = draw(5);
        assert_eq!(a, draw(5));
        for class in 1..=3 {
            let f = a.iter().filter(|&&v| v == class).count() as f64 / 3000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.03, "class {class}: {f}");
        }
    }

    #[test]
    fn ties_only_pick_tied_classes() {
        let mut rng = seeded_rng(1);
        for _ in 0..200 {
            let y = hard_majority_vote(&[1, 3, 0, 0], 3, &mut rng);
            assert!(y == 1 || y == 3);
        }
    }

    #[test]
    fn perfect_agreement_drives_estimate_to_one() {
        let mut votes = Vec::new();
        for i in 0..10_000 {
            votes.push(vec![1 + i % 2]);
        }
        let est = majority_vote_estimates(votes.iter().map(|v| v.as_slice()), 2, 1, 0).unwrap();
        // (5000 + 1) / (5000 + 3)
        assert!((est[0].prob(1, 1) - 5001.0 / 5003.0).abs() < 1e-12);
        assert!(est[0].prob(2, 2) > 0.999);
    }

    #[test]
    fn no_votes_is_an_error() {
        let votes = vec![vec![0, 0], vec![0, 0]];
        let r = majority_vote_estimates(votes.iter().map(|v| v.as_slice()), 2, 2, 0);
        assert!(matches!(r, Err(Error::NoVotes)));
    }

    #[test]
    fn amortized_init_reproduces_global_estimates() {
        let mut rng = seeded_rng(3);
        let votes: Vec<Vec<usize>> = (0..500)
            .map(|_| (0..3).map(|_| rng.random_range(0..=2)).collect())
            .collect();
        let mut global = LabelModel::Global(GlobalLabelModel::new(2, 3));
        let mut amort =
            LabelModel::Amortized(AmortizedLabelModel::new(2, 2, 3, 10, &mut rng).unwrap());
        let a = majority_vote_init(&mut global, votes.iter().map(|v| v.as_slice()), 9).unwrap();
        let b = majority_vote_init(&mut amort, votes.iter().map(|v| v.as_slice()), 9).unwrap();
        assert_eq!(a, b);
        let g = global.matrices(None).unwrap();
        for _ in 0..100 {
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let m = amort.matrices(Some(&x)).unwrap();
            for (gm, am) in g.iter().zip(&m) {
                for (u, v) in gm.entries().iter().zip(am.entries()) {
                    assert!((u - v).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn latent_init_is_uniform_mixture() {
        let mut rng = seeded_rng(4);
        let votes = vec![vec![1, 2], vec![2, 2], vec![1, 0]];
        let mut lm = LabelModel::Latent(LatentLabelModel::new(2, 2, 2, 3, 6, &mut rng).unwrap());
        majority_vote_init(&mut lm, votes.iter().map(|v| v.as_slice()), 1).unwrap();
        if let LabelModel::Latent(m) = &lm {
            let w = m.mixture_weights(&[0.3, 9.0]).unwrap();
            assert!(w.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        }
    }
}
