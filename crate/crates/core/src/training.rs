//! Adam and the dual-batch training loop with early stopping on
//! validation F1.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataPoint, DualBatch, DualBatchSampler, WeakDataset, ABSTAIN};
use crate::end_model::EndModel;
use crate::error::{Error, Result};
use crate::label_model::{majority_vote_init, LabelModel};
use crate::math;
use crate::metrics;
use crate::objective::{
    combined_objective_and_gradient, LossReport, ObjectiveConfig, ObjectiveOutput,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Optimizer steps without a strict validation-F1 improvement before stopping.
    pub patience: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub lambda_strong: f64,
    pub lambda_weak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Initialize the label model from majority-vote estimates before training.
    pub majority_vote_init: bool,
    /// Keep label-model parameters fixed (known-transition experiments).
    pub freeze_label_model: bool,
    /// When false, run all `max_steps`.
    pub early_stopping: bool,
    /// Return the best-validation snapshot (true) or the final iterate.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            patience: 300,
            max_steps: 10_000,
            eval_every: 10,
            seed: 0,
            lambda_strong: 1.0,
            lambda_weak: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            majority_vote_init: true,
            freeze_label_model: false,
            early_stopping: true,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_strong: self.lambda_strong,
            lambda_weak: self.lambda_weak,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return bad("adam betas must be in [0, 1) and epsilon > 0");
        }
        self.objective().validate()
    }
}

/// A named view of one parameter vector and its gradient.
pub struct ParamBlock<'a> {
    pub name: &'a str,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
}

/// Bias-corrected Adam over a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, block_sizes: &[usize]) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of all blocks. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, blocks: &mut [ParamBlock<'_>]) -> Result<()> {
        if blocks.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                what: "optimizer parameter blocks",
                expected: self.m.len(),
                got: blocks.len(),
            });
        }
        for (b, m) in blocks.iter().zip(&self.m) {
            if b.params.len() != m.len() || b.grads.len() != m.len() {
                return Err(Error::DimensionMismatch {
                    what: "parameter block size",
                    expected: m.len(),
                    got: b.grads.len(),
                });
            }
            if let Some(index) = b.grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: b.name.to_string(),
                    index,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((b, m), v) in blocks.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..m.len() {
                let g = b.grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                b.params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub total_loss: f64,
    pub strong_term: f64,
    pub weak_term: f64,
    pub val_f1: f64,
    pub best_val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation snapshot, or the final iterate without `keep_best`.
    pub end_model: EndModel,
    pub label_model: Option<LabelModel>,
    pub history: Vec<EvalRecord>,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_f1: Option<f64>,
}

/// Called after every evaluation with the current (not best) models.
pub type Observer<'a> = dyn FnMut(&EvalRecord, &EndModel, Option<&LabelModel>) + 'a;

/// The loop shared by every method: sample, differentiate, step, evaluate.
pub(crate) fn run_loop<F>(
    mut end_model: EndModel,
    mut label_model: Option<LabelModel>,
    sizes: (usize, usize),
    validation: &WeakDataset,
    cfg: &TrainConfig,
    mut objective: F,
    observer: &mut Observer<'_>,
) -> Result<TrainOutcome>
where
    F: FnMut(&EndModel, Option<&LabelModel>, &DualBatch) -> Result<ObjectiveOutput>,
{
    cfg.validate()?;
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut sampler = DualBatchSampler::new(sizes.0, sizes.1, cfg.batch_size, cfg.seed)?;
    let train_label = label_model.is_some() && !cfg.freeze_label_model;
    let mut block_sizes = vec![end_model.num_params()];
    if train_label {
        block_sizes.push(label_model.as_ref().map_or(0, |m| m.num_params()));
    }
    let mut adam = Adam::new(cfg, &block_sizes);

    let mut best = (end_model.clone(), label_model.clone());
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut steps = 0;

    for step in 1..=cfg.max_steps {
        let batch = sampler.next_batch();
        let out = objective(&end_model, label_model.as_ref(), &batch)?;
        {
            let mut blocks = vec![ParamBlock {
                name: "end_model",
                params: end_model.params_mut(),
                grads: &out.end_grad,
            }];
            if train_label {
                let lm = label_model.as_mut().expect("checked above");
                let mut flat = lm.params();
                blocks.push(ParamBlock {
                    name: "label_model",
                    params: &mut flat,
                    grads: &out.label_grad,
                });
                adam.step(&mut blocks)?;
                drop(blocks);
                lm.set_params(&flat)?;
            } else {
                adam.step(&mut blocks)?;
            }
        }
        steps = step;
        since_best += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let val_f1 = metrics::evaluate(&end_model, validation)?.f1;
            if val_f1 > best_f1 {
                best_f1 = val_f1;
                best = (end_model.clone(), label_model.clone());
                best_step = step;
                since_best = 0;
            }
            let record = record(step, &out.report, val_f1, best_f1);
            observer(&record, &end_model, label_model.as_ref());
            history.push(record);
        }
        if cfg.early_stopping && since_best >= cfg.patience {
            break;
        }
    }

    let (end_model, label_model) = if cfg.keep_best {
        best
    } else {
        (end_model, label_model)
    };
    Ok(TrainOutcome {
        end_model,
        label_model,
        history,
        steps,
        best_step,
        best_val_f1: best_f1.is_finite().then_some(best_f1),
    })
}

fn record(step: usize, r: &LossReport, val_f1: f64, best_val_f1: f64) -> EvalRecord {
    EvalRecord {
        step,
        total_loss: r.total,
        strong_term: r.strong_term,
        weak_term: r.weak_term,
        val_f1,
        best_val_f1,
    }
}

fn batch_refs<'a>(ds: &'a WeakDataset, idx: &[usize]) -> Vec<&'a DataPoint> {
    idx.iter().map(|&i| &ds.points[i]).collect()
}

/// Joint training of `end_model` and `label_model` on S (strong + weak
/// labels) and W (weak labels only).
pub fn train(
    label_model: LabelModel,
    end_model: EndModel,
    strong: &WeakDataset,
    weak: &WeakDataset,
    validation: &WeakDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_observer(
        label_model,
        end_model,
        strong,
        weak,
        validation,
        cfg,
        &mut |_, _, _| {},
    )
}

pub fn train_with_observer(
    mut label_model: LabelModel,
    end_model: EndModel,
    strong: &WeakDataset,
    weak: &WeakDataset,
    validation: &WeakDataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainOutcome> {
    if cfg.majority_vote_init && label_model.num_sources() > 0 {
        let votes = strong
            .points
            .iter()
            .chain(&weak.points)
            .map(|p| p.weak_labels.as_slice());
        majority_vote_init(&mut label_model, votes, math::derive_seed(cfg.seed, 3))?;
    }
    let obj = cfg.objective();
    run_loop(
        end_model,
        Some(label_model),
        (strong.len(), weak.len()),
        validation,
        cfg,
        |em, lm, batch| {
            let lm = lm.expect("label model is always present here");
            combined_objective_and_gradient(
                lm,
                em,
                &batch_refs(strong, &batch.strong),
                &batch_refs(weak, &batch.weak),
                &obj,
            )
        },
        observer,
    )
}

/// Append a source that votes the strong label where present and abstains
/// elsewhere.
pub fn strong_label_voting_source(ds: &WeakDataset) -> WeakDataset {
    let points = ds
        .points
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.weak_labels.push(p.strong_label.unwrap_or(ABSTAIN));
            q
        })
        .collect();
    WeakDataset {
        num_sources: ds.num_sources + 1,
        ..ds.with_points(points)
    }
}

/// Write the evaluation history as JSON Lines.
pub fn write_history(history: &[EvalRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
