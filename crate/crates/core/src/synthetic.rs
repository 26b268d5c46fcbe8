//! Synthetic datasets with a known `p_d(y | x)` and known transitions.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DataPoint, Split, WeakDataset};
use crate::end_model::EndModel;
use crate::error::{Error, Result};
use crate::label_model::{check_injective, TransitionMatrix, DEFAULT_RANK_TOLERANCE};
use crate::math::{self, ProbVector, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthModel {
    /// `x ~ N(0, I)`, `p_d(y | x) = softmax(W x + b)`; `weights` is `C x D`.
    Logistic {
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    /// `y ~ prior`, `x | y ~ N(means[y], std² I)`.
    GaussianClusters {
        means: Vec<Vec<f64>>,
        std: f64,
        prior: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionSpec {
    Global {
        matrices: Vec<TransitionMatrix>,
    },
    /// Region A is `x[0] < 0`, region B is `x[0] >= 0`.
    Regional {
        region_a: Vec<TransitionMatrix>,
        region_b: Vec<TransitionMatrix>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_sources: usize,
    pub feature_dim: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub truth: TruthModel,
    pub transitions: TransitionSpec,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// C=2, K=3, D=2 logistic truth with weight norm 4 and three global
    /// symmetric sources of decreasing quality.
    fn default() -> Self {
        let matrices = [(0.75, 0.1), (0.7, 0.2), (0.6, 0.3)]
            .iter()
            .map(|&(acc, abs)| TransitionMatrix::symmetric(2, acc, abs).expect("valid preset"))
            .collect();
        Self {
            num_classes: 2,
            num_sources: 3,
            feature_dim: 2,
            n_train: 2000,
            n_validation: 500,
            n_test: 2000,
            truth: default_logistic(2, 2, 4.0),
            transitions: TransitionSpec::Global { matrices },
            seed: 0,
        }
    }
}

/// Logistic truth with one weight row per class at norm `scale`. For C=2
/// class 1 has zero weights and class 2 points along (0.6, 0.8); for C>2
/// the rows are spread evenly around the first two feature axes.
pub fn default_logistic(num_classes: usize, feature_dim: usize, scale: f64) -> TruthModel {
    let base = 0.8f64.atan2(0.6);
    let weights = (0..num_classes)
        .map(|j| {
            let mut w = vec![0.0; feature_dim];
            if num_classes == 2 {
                if j == 1 {
                    w[0] = scale * 0.6;
                    if feature_dim > 1 {
                        w[1] = scale * 0.8;
                    }
                }
            } else {
                let a = base + std::f64::consts::TAU * j as f64 / num_classes as f64;
                w[0] = scale * a.cos();
                if feature_dim > 1 {
                    w[1] = scale * a.sin();
                }
            }
            w
        })
        .collect();
    TruthModel::Logistic {
        weights,
        bias: vec![0.0; num_classes],
    }
}

impl SyntheticSpec {
    /// `num_sources` identical symmetric sources.
    pub fn with_symmetric_sources(
        mut self,
        num_sources: usize,
        accuracy: f64,
        abstain: f64,
    ) -> Result<Self> {
        let m = TransitionMatrix::symmetric(self.num_classes, accuracy, abstain)?;
        self.num_sources = num_sources;
        self.transitions = TransitionSpec::Global {
            matrices: vec![m; num_sources],
        };
        Ok(self)
    }

    /// Two regions split by the sign of the first feature: sources
    /// `0..experts_a` follow `expert` on region A and are uniform on B, the
    /// next `experts_b` follow `expert` on B and are uniform on A.
    pub fn two_region(
        mut self,
        experts_a: usize,
        experts_b: usize,
        expert: TransitionMatrix,
    ) -> Result<Self> {
        let c = self.num_classes;
        if expert.num_classes() != c {
            return Err(Error::InvalidConfig(
                "expert matrix class count differs from spec".into(),
            ));
        }
        let uniform = TransitionMatrix::uniform(c);
        let k = experts_a + experts_b;
        let region_a = (0..k)
            .map(|i| {
                if i < experts_a {
                    expert.clone()
                } else {
                    uniform.clone()
                }
            })
            .collect();
        let region_b = (0..k)
            .map(|i| {
                if i < experts_a {
                    uniform.clone()
                } else {
                    expert.clone()
                }
            })
            .collect();
        self.num_sources = k;
        self.transitions = TransitionSpec::Regional { region_a, region_b };
        Ok(self)
    }

    /// Two experts per region, uniform on the other region. Experts fire on
    /// class 2 (90% of the time) and otherwise abstain; they vote 2 on 5% of
    /// class-1 points. Symmetric experts would leave majority vote unbiased.
    pub fn two_region_default() -> Self {
        let expert = TransitionMatrix::from_columns(&[vec![0.95, 0.0, 0.05], vec![0.1, 0.0, 0.9]])
            .expect("valid preset");
        Self::default()
            .two_region(2, 2, expert)
            .expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        let (c, k, d) = (self.num_classes, self.num_sources, self.feature_dim);
        if c < 2 || d < 1 {
            return Err(Error::InvalidConfig(format!(
                "need C >= 2 and D >= 1, got C={c} D={d}"
            )));
        }
        match &self.truth {
            TruthModel::Logistic { weights, bias } => {
                if weights.len() != c || bias.len() != c || weights.iter().any(|w| w.len() != d) {
                    return Err(Error::InvalidConfig(
                        "logistic weights must be C x D and bias length C".into(),
                    ));
                }
            }
            TruthModel::GaussianClusters { means, std, prior } => {
                if means.len() != c || means.iter().any(|m| m.len() != d) || !(*std > 0.0) {
                    return Err(Error::InvalidConfig(
                        "cluster means must be C x D with std > 0".into(),
                    ));
                }
                ProbVector::new(prior.clone())?;
                if prior.len() != c {
                    return Err(Error::InvalidConfig(
                        "cluster prior must have length C".into(),
                    ));
                }
            }
        }
        let sets: Vec<&Vec<TransitionMatrix>> = match &self.transitions {
            TransitionSpec::Global { matrices } => vec![matrices],
            TransitionSpec::Regional { region_a, region_b } => vec![region_a, region_b],
        };
        for set in sets {
            if set.len() != k {
                return Err(Error::InvalidConfig(format!(
                    "{} transition matrices for {k} sources",
                    set.len()
                )));
            }
            for m in set {
                if m.num_classes() != c {
                    return Err(Error::InvalidConfig(
                        "transition class count differs from spec".into(),
                    ));
                }
                m.check(math::SUM_TOLERANCE)?;
            }
        }
        Ok(())
    }
}

/// The generating process of a spec, usable as an oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
}

impl GroundTruth {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    /// `p_d(y | x)`.
    pub fn class_probs(&self, x: &[f64]) -> Vec<f64> {
        let c = self.spec.num_classes;
        let mut z = vec![0.0; c];
        match &self.spec.truth {
            TruthModel::Logistic { weights, bias } => {
                for j in 0..c {
                    z[j] = bias[j] + weights[j].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                }
            }
            TruthModel::GaussianClusters { means, std, prior } => {
                for j in 0..c {
                    let d2: f64 = means[j].iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum();
                    z[j] = math::floored_ln(prior[j]) - d2 / (2.0 * std * std);
                }
            }
        }
        let mut p = vec![0.0; c];
        math::softmax_into(&z, &mut p);
        p
    }

    /// Transitions in effect at `x`.
    pub fn transitions_at(&self, x: &[f64]) -> &[TransitionMatrix] {
        match &self.spec.transitions {
            TransitionSpec::Global { matrices } => matrices,
            TransitionSpec::Regional { region_a, region_b } => {
                if x[0] < 0.0 {
                    region_a
                } else {
                    region_b
                }
            }
        }
    }

    /// All ground-truth matrices are rank C.
    pub fn transitions_injective(&self) -> bool {
        let sets: Vec<&Vec<TransitionMatrix>> = match &self.spec.transitions {
            TransitionSpec::Global { matrices } => vec![matrices],
            TransitionSpec::Regional { region_a, region_b } => vec![region_a, region_b],
        };
        sets.iter()
            .flat_map(|s| s.iter())
            .all(|m| check_injective(m, DEFAULT_RANK_TOLERANCE).injective)
    }

    /// One `(x, y)` draw from the joint.
    fn sample_xy(&self, rng: &mut Rng) -> (Vec<f64>, usize) {
        let d = self.spec.feature_dim;
        match &self.spec.truth {
            TruthModel::Logistic { .. } => {
                let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let y = sample_categorical(&self.class_probs(&x), rng) + 1;
                (x, y)
            }
            TruthModel::GaussianClusters { means, std, prior } => {
                let y = sample_categorical(prior, rng) + 1;
                let x = means[y - 1]
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + std * z
                    })
                    .collect();
                (x, y)
            }
        }
    }

    /// Feature vectors from the spec's marginal over `x`.
    pub fn probe_points(&self, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = math::seeded_rng(seed);
        (0..m).map(|_| self.sample_xy(&mut rng).0).collect()
    }

    fn sample_split(&self, split: Split, n: usize, seed: u64) -> Result<WeakDataset> {
        let mut rng = math::seeded_rng(seed);
        let tag = match split {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        };
        let points = (0..n)
            .map(|i| {
                let (x, y) = self.sample_xy(&mut rng);
                let weak_labels = self
                    .transitions_at(&x)
                    .iter()
                    .map(|m| sample_categorical(&m.column(y), &mut rng))
                    .collect();
                DataPoint {
                    id: format!("{tag}-{i}"),
                    features: x,
                    weak_labels,
                    strong_label: Some(y),
                }
            })
            .collect();
        WeakDataset::new(
            points,
            self.spec.num_classes,
            self.spec.num_sources,
            self.spec.feature_dim,
            split,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let truth: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        truth.spec.validate()?;
        Ok(truth)
    }
}

/// Zero-based index drawn from `p`.
fn sample_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last outcome with positive mass
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: WeakDataset,
    pub validation: WeakDataset,
    pub test: WeakDataset,
    pub truth: GroundTruth,
}

/// Sample all three splits. Train points carry strong labels; subsample
/// them with [`crate::data::apply_strong_fraction`].
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let truth = GroundTruth::new(spec.clone())?;
    let s = spec.seed;
    Ok(SyntheticData {
        train: truth.sample_split(Split::Train, spec.n_train, math::derive_seed(s, 10))?,
        validation: truth.sample_split(
            Split::Validation,
            spec.n_validation,
            math::derive_seed(s, 11),
        )?,
        test: truth.sample_split(Split::Test, spec.n_test, math::derive_seed(s, 12))?,
        truth,
    })
}

/// `½ Σ |p_i - q_i|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            what: "distributions",
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub mean_tv: f64,
    pub max_tv: f64,
}

/// Total variation between the model and `p_d` over `m` probe points.
pub fn recovery_score(
    model: &EndModel,
    truth: &GroundTruth,
    m: usize,
    seed: u64,
) -> Result<Recovery> {
    if m == 0 {
        return Err(Error::Empty("probe points"));
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for x in truth.probe_points(m, seed) {
        let tv = total_variation(model.predict_proba(&x)?.as_slice(), &truth.class_probs(&x))?;
        sum += tv;
        max = max.max(tv);
    }
    Ok(Recovery {
        mean_tv: sum / m as f64,
        max_tv: max,
    })
}
