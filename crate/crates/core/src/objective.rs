//! Likelihood terms and their gradients.
//!
//! The weak marginal of one point, with `p = p_theta(. | x)`:
//!
//! ```text
//! ℓ_W(x, ỹ) = log Σ_h p(h|x) Π_k Σ_y p(ỹᵏ | y, h [, x]) p(y)
//! ```
//!
//! For the global and amortized label models there is a single state and
//! this is `Σ_k log Σ_y p(ỹᵏ | y) p(y)`. Reported losses use the
//! minimization convention: `strong_term = -L^S`, `weak_term = -L^W`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataPoint;
use crate::end_model::EndModel;
use crate::error::{Error, Result};
use crate::label_model::{LabelModel, Realized, TransitionMatrix};
use crate::math::{self, log_floor};

/// Points per parallel work unit. Fixed so the reduction order never
/// depends on the thread count.
pub(crate) const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub lambda_strong: f64,
    pub lambda_weak: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_strong: 1.0,
            lambda_weak: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_strong)
            || !ok(self.lambda_weak)
            || self.lambda_strong + self.lambda_weak <= 0.0
        {
            return Err(Error::InvalidConfig(format!(
                "lambda_strong={} lambda_weak={}: need nonnegative weights with a positive sum",
                self.lambda_strong, self.lambda_weak
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub strong_term: f64,
    pub weak_term: f64,
    /// Mean over the batch points of `-log Σ_y p(ỹᵏ | y) p(y)` per source
    /// (mixture-marginal for the latent model).
    pub per_source: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub report: LossReport,
    /// Gradient of `report.total` w.r.t. the end-model parameters.
    pub end_grad: Vec<f64>,
    /// Gradient of `report.total` w.r.t. the label-model parameters.
    pub label_grad: Vec<f64>,
}

/// Per-chunk partial sums.
#[derive(Debug, Clone)]
pub(crate) struct Accum {
    pub strong: f64,
    pub weak: f64,
    pub per_source: Vec<f64>,
    pub end_grad: Vec<f64>,
    pub label_grad: Vec<f64>,
}

impl Accum {
    pub fn new(k: usize, end_params: usize, label_params: usize) -> Self {
        Self {
            strong: 0.0,
            weak: 0.0,
            per_source: vec![0.0; k],
            end_grad: vec![0.0; end_params],
            label_grad: vec![0.0; label_params],
        }
    }

    fn add(&mut self, other: &Accum) {
        self.strong += other.strong;
        self.weak += other.weak;
        for (a, b) in self.per_source.iter_mut().zip(&other.per_source) {
            *a += b;
        }
        for (a, b) in self.end_grad.iter_mut().zip(&other.end_grad) {
            *a += b;
        }
        for (a, b) in self.label_grad.iter_mut().zip(&other.label_grad) {
            *a += b;
        }
    }
}

/// Run `f` over `items` in fixed-size chunks in parallel, then reduce the
/// chunk sums sequentially in chunk order.
pub(crate) fn chunked_accumulate<T, M, F>(items: &[T], make: M, f: F) -> Result<Accum>
where
    T: Sync,
    M: Fn() -> Accum + Sync,
    F: Fn(&T, &mut Accum) -> Result<()> + Sync,
{
    let parts: Vec<Accum> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = make();
            for item in chunk {
                f(item, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = make();
    for p in &parts {
        total.add(p);
    }
    Ok(total)
}

/// `d loss / d logits` for an end model whose log-likelihood has gradient
/// `g` w.r.t. `log p`, scaled by `-scale` (minimization).
pub(crate) fn end_upstream(g: &[f64], p: &[f64], scale: f64, out: &mut [f64]) {
    let total: f64 = g.iter().sum();
    for ((o, &gj), &pj) in out.iter_mut().zip(g).zip(p) {
        *o = -scale * (gj - pj * total);
    }
}

/// `(p, log p)` of the end model's logits.
pub(crate) fn probs_and_logs(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; logits.len()];
    let mut lp = vec![0.0; logits.len()];
    math::softmax_into(logits, &mut p);
    math::log_softmax_into(logits, &mut lp);
    (p, lp)
}

/// Derivative buffers of the weak marginal, all w.r.t. the log-likelihood.
struct WeakGrads<'a> {
    /// w.r.t. `log p(y)`.
    log_p: &'a mut [f64],
    /// w.r.t. transition logits, layout of `Realized::log_phi`.
    logits: &'a mut [f64],
    /// w.r.t. mixture logits.
    mix: &'a mut [f64],
}

/// Weak marginal log-likelihood of one point given realized transitions and
/// `log p`. Optionally writes its derivatives and the per-source marginals.
fn weak_point(
    r: &Realized,
    votes: &[usize],
    log_p: &[f64],
    grads: Option<WeakGrads<'_>>,
    per_source: Option<&mut [f64]>,
) -> f64 {
    let (hn, kn, c) = (r.num_states, r.num_sources, r.num_classes);
    let floor = log_floor();
    let mut a = vec![0.0; hn * kn * c];
    let mut ls = vec![0.0; hn * kn];
    let mut floored = vec![false; hn * kn];
    let mut state = vec![0.0; hn];
    for h in 0..hn {
        let mut sum = 0.0;
        for k in 0..kn {
            let v = votes[k];
            let idx = h * kn + k;
            let row = &mut a[idx * c..(idx + 1) * c];
            for j in 0..c {
                row[j] = r.log_prob(h, k, v, j) + log_p[j];
            }
            let l = math::lse(row);
            if l < floor {
                ls[idx] = floor;
                floored[idx] = true;
            } else {
                ls[idx] = l;
            }
            sum += ls[idx];
        }
        state[h] = r.log_mix[h] + sum;
    }
    let value = math::lse(&state);

    if let Some(out) = per_source {
        let mut col = vec![0.0; hn];
        for k in 0..kn {
            for h in 0..hn {
                col[h] = r.log_mix[h] + ls[h * kn + k];
            }
            out[k] = math::lse(&col);
        }
    }

    if let Some(g) = grads {
        let b = (c + 1) * c;
        for h in 0..hn {
            let w = (state[h] - value).exp();
            if hn > 1 {
                g.mix[h] = w - r.log_mix[h].exp();
            }
            for k in 0..kn {
                let idx = h * kn + k;
                if floored[idx] {
                    continue;
                }
                let v = votes[k];
                let block = r.block(h, k);
                let d = &mut g.logits[idx * b..(idx + 1) * b];
                for j in 0..c {
                    let resp = w * (a[idx * c + j] - ls[idx]).exp();
                    g.log_p[j] += resp;
                    for i in 0..=c {
                        let phi = block[i * c + j].exp();
                        let delta = if i == v { 1.0 } else { 0.0 };
                        d[i * c + j] = resp * (delta - phi);
                    }
                }
            }
        }
    }
    value
}

fn check_votes(lm: &LabelModel, votes: &[usize]) -> Result<()> {
    if votes.len() != lm.num_sources() {
        return Err(Error::DimensionMismatch {
            what: "weak labels per point",
            expected: lm.num_sources(),
            got: votes.len(),
        });
    }
    let c = lm.num_classes();
    if let Some(v) = votes.iter().find(|&&v| v > c) {
        return Err(Error::OutOfRange(format!("weak label {v} > {c}")));
    }
    Ok(())
}

fn check_models(lm: &LabelModel, em: &EndModel) -> Result<()> {
    if lm.num_classes() != em.num_classes() {
        return Err(Error::DimensionMismatch {
            what: "classes (label model vs end model)",
            expected: em.num_classes(),
            got: lm.num_classes(),
        });
    }
    Ok(())
}

/// Realize once per batch for x-independent models.
fn shared_realization(lm: &LabelModel) -> Result<Option<Realized>> {
    if lm.is_x_dependent() {
        Ok(None)
    } else {
        lm.realize(None).map(Some)
    }
}

/// `ℓ_W(x, ỹ)` for one point.
pub fn weak_marginal_loglik(
    lm: &LabelModel,
    em: &EndModel,
    x: &[f64],
    votes: &[usize],
) -> Result<f64> {
    check_models(lm, em)?;
    check_votes(lm, votes)?;
    let (_, log_p) = probs_and_logs(&em.logits(x)?);
    let r = lm.realize(Some(x))?;
    Ok(weak_point(&r, votes, &log_p, None, None))
}

/// `Σ_k log Σ_y φᵏ(ỹᵏ | y) p(y)` from explicit probabilities (floored).
pub fn weak_marginal_loglik_from_probs(
    transitions: &[TransitionMatrix],
    p: &[f64],
    votes: &[usize],
) -> Result<f64> {
    if transitions.len() != votes.len() {
        return Err(Error::DimensionMismatch {
            what: "votes vs transition matrices",
            expected: transitions.len(),
            got: votes.len(),
        });
    }
    let mut total = 0.0;
    for (t, &v) in transitions.iter().zip(votes) {
        let c = t.num_classes();
        if p.len() != c {
            return Err(Error::DimensionMismatch {
                what: "class distribution",
                expected: c,
                got: p.len(),
            });
        }
        if v > c {
            return Err(Error::OutOfRange(format!("weak label {v} > {c}")));
        }
        let s: f64 = (0..c).map(|j| t.prob(v, j + 1) * p[j]).sum();
        total += math::floored_ln(s);
    }
    Ok(total)
}

/// `L^S` on a batch: mean of `log p(y_s | x_s) + ℓ_W(x_s, ỹ_s)`; 0 if empty.
pub fn strong_loglik_term(lm: &LabelModel, em: &EndModel, batch: &[&DataPoint]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for p in batch {
        let y = p
            .strong_label
            .ok_or_else(|| Error::MissingStrongLabel(p.id.clone()))?;
        let (_, log_p) = probs_and_logs(&em.logits(&p.features)?);
        sum += log_p[y - 1] + weak_marginal_loglik(lm, em, &p.features, &p.weak_labels)?;
    }
    Ok(sum / batch.len() as f64)
}

/// `L^W` on a batch: mean of `ℓ_W`; 0 if empty.
pub fn weak_loglik_term(lm: &LabelModel, em: &EndModel, batch: &[&DataPoint]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for p in batch {
        sum += weak_marginal_loglik(lm, em, &p.features, &p.weak_labels)?;
    }
    Ok(sum / batch.len() as f64)
}

/// `λ_S (-L^S) + λ_W (-L^W)` on one dual batch and its gradients.
pub fn combined_objective_and_gradient(
    lm: &LabelModel,
    em: &EndModel,
    strong: &[&DataPoint],
    weak: &[&DataPoint],
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    cfg.validate()?;
    check_models(lm, em)?;
    if strong.is_empty() && weak.is_empty() {
        return Err(Error::NoTrainingData);
    }
    for p in strong {
        if p.strong_label.is_none() {
            return Err(Error::MissingStrongLabel(p.id.clone()));
        }
    }
    let shared = shared_realization(lm)?;
    let c = lm.num_classes();
    let kn = lm.num_sources();
    let scale_s = if strong.is_empty() {
        0.0
    } else {
        cfg.lambda_strong / strong.len() as f64
    };
    let scale_w = if weak.is_empty() {
        0.0
    } else {
        cfg.lambda_weak / weak.len() as f64
    };
    let items: Vec<(&DataPoint, bool)> = strong
        .iter()
        .map(|&p| (p, true))
        .chain(weak.iter().map(|&p| (p, false)))
        .collect();
    let n_logits = lm.num_states() * kn * (c + 1) * c;

    let acc = chunked_accumulate(
        &items,
        || Accum::new(kn, em.num_params(), lm.num_params()),
        |&(p, is_strong), acc| {
            check_votes(lm, &p.weak_labels)?;
            let (u, cache) = em.forward(&p.features)?;
            let (prob, log_p) = probs_and_logs(&u);
            let owned;
            let r = match &shared {
                Some(r) => r,
                None => {
                    owned = lm.realize(Some(&p.features))?;
                    &owned
                }
            };
            let mut g = vec![0.0; c];
            let mut d_logits = vec![0.0; n_logits];
            let mut d_mix = vec![0.0; lm.num_states()];
            let mut marg = vec![0.0; kn];
            let value = weak_point(
                r,
                &p.weak_labels,
                &log_p,
                Some(WeakGrads {
                    log_p: &mut g,
                    logits: &mut d_logits,
                    mix: &mut d_mix,
                }),
                Some(&mut marg),
            );
            for (a, m) in acc.per_source.iter_mut().zip(&marg) {
                *a -= m;
            }
            let scale = if is_strong {
                let y = p.strong_label.expect("checked above");
                acc.strong += log_p[y - 1] + value;
                g[y - 1] += 1.0;
                scale_s
            } else {
                acc.weak += value;
                scale_w
            };
            let mut upstream = vec![0.0; c];
            end_upstream(&g, &prob, scale, &mut upstream);
            em.backward(&cache, &upstream, &mut acc.end_grad, None)?;
            for d in d_logits.iter_mut().chain(d_mix.iter_mut()) {
                *d *= -scale;
            }
            lm.backward(r, &d_logits, &d_mix, &mut acc.label_grad)
        },
    )?;

    let strong_term = if strong.is_empty() {
        0.0
    } else {
        -acc.strong / strong.len() as f64
    };
    let weak_term = if weak.is_empty() {
        0.0
    } else {
        -acc.weak / weak.len() as f64
    };
    let n = items.len() as f64;
    Ok(ObjectiveOutput {
        report: LossReport {
            total: cfg.lambda_strong * strong_term + cfg.lambda_weak * weak_term,
            strong_term,
            weak_term,
            per_source: acc.per_source.iter().map(|v| v / n).collect(),
        },
        end_grad: acc.end_grad,
        label_grad: acc.label_grad,
    })
}
