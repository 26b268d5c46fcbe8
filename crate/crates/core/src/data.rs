//! Datasets of weakly labeled points.
//!
//! Internal encoding: classes are `1..=C` and a weak label of `0` means the
//! source abstained. The JSON Lines files on disk use the external
//! convention (classes `0..C`, abstain `-1`); [`load_dataset`] and
//! [`save_dataset`] are the only places that translate between the two.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Rng};

pub const ABSTAIN: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub id: String,
    pub features: Vec<f64>,
    /// One entry per source, `0` = abstain, else a class in `1..=C`.
    pub weak_labels: Vec<usize>,
    pub strong_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakDataset {
    pub points: Vec<DataPoint>,
    pub num_classes: usize,
    pub num_sources: usize,
    pub feature_dim: usize,
    pub split: Split,
}

impl WeakDataset {
    /// Build and validate a dataset.
    pub fn new(
        points: Vec<DataPoint>,
        num_classes: usize,
        num_sources: usize,
        feature_dim: usize,
        split: Split,
    ) -> Result<Self> {
        let ds = Self {
            points,
            num_classes,
            num_sources,
            feature_dim,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// An empty set sharing the shape of `self`.
    pub fn empty_like(&self) -> Self {
        Self {
            points: Vec::new(),
            num_classes: self.num_classes,
            num_sources: self.num_sources,
            feature_dim: self.feature_dim,
            split: self.split,
        }
    }

    pub fn with_points(&self, points: Vec<DataPoint>) -> Self {
        Self {
            points,
            ..self.empty_like()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InconsistentDataset(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim < 1 {
            return Err(Error::InconsistentDataset(
                "feature_dim must be >= 1".into(),
            ));
        }
        for p in &self.points {
            self.validate_point(p)
                .map_err(|m| Error::InconsistentDataset(format!("point `{}`: {m}", p.id)))?;
        }
        if matches!(self.split, Split::Validation | Split::Test) {
            if let Some(p) = self.points.iter().find(|p| p.strong_label.is_none()) {
                return Err(Error::MissingStrongLabel(p.id.clone()));
            }
        }
        Ok(())
    }

    fn validate_point(&self, p: &DataPoint) -> std::result::Result<(), String> {
        if p.features.len() != self.feature_dim {
            return Err(format!(
                "{} features, expected {}",
                p.features.len(),
                self.feature_dim
            ));
        }
        if p.features.iter().any(|v| !v.is_finite()) {
            return Err("non-finite feature".into());
        }
        if p.weak_labels.len() != self.num_sources {
            return Err(format!(
                "{} weak labels, expected {}",
                p.weak_labels.len(),
                self.num_sources
            ));
        }
        if let Some(v) = p.weak_labels.iter().find(|&&v| v > self.num_classes) {
            return Err(format!(
                "weak label {v} out of range 0..={}",
                self.num_classes
            ));
        }
        if let Some(y) = p.strong_label {
            if y == 0 || y > self.num_classes {
                return Err(format!(
                    "strong label {y} out of range 1..={}",
                    self.num_classes
                ));
            }
        }
        Ok(())
    }

    /// Concatenate two datasets with the same shape (used to rebuild S ∪ W).
    pub fn concat(&self, other: &WeakDataset) -> Result<WeakDataset> {
        if (self.num_classes, self.num_sources, self.feature_dim)
            != (other.num_classes, other.num_sources, other.feature_dim)
        {
            return Err(Error::InconsistentDataset(
                "cannot concatenate datasets of different shape".into(),
            ));
        }
        let mut points = self.points.clone();
        points.extend(other.points.iter().cloned());
        Ok(self.with_points(points))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    num_classes: usize,
    num_sources: usize,
    feature_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    features: Vec<f64>,
    weak_labels: Vec<i64>,
    label: Option<i64>,
}

/// Read a JSON Lines dataset: a header line followed by one record per line.
pub fn load_dataset(path: &Path, split: Split) -> Result<WeakDataset> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, id: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        id: id.to_string(),
        message,
    };

    let header: Header = loop {
        match lines.next() {
            None => return Err(Error::EmptyDataset),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| parse_err(i + 1, "<header>", e.to_string()))?;
            }
        }
    };
    let c = header.num_classes as i64;

    let mut points = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: Record = serde_json::from_str(&line).map_err(|e| {
            let id = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("id").and_then(|s| s.as_str()).map(String::from))
                .unwrap_or_else(|| "?".into());
            parse_err(lineno, &id, e.to_string())
        })?;
        if rec.features.len() != header.feature_dim {
            return Err(parse_err(
                lineno,
                &rec.id,
                format!(
                    "{} features, header says {}",
                    rec.features.len(),
                    header.feature_dim
                ),
            ));
        }
        if rec.weak_labels.len() != header.num_sources {
            return Err(parse_err(
                lineno,
                &rec.id,
                format!(
                    "{} weak labels, header says {}",
                    rec.weak_labels.len(),
                    header.num_sources
                ),
            ));
        }
        let mut weak = Vec::with_capacity(rec.weak_labels.len());
        for &v in &rec.weak_labels {
            if v < -1 || v >= c {
                return Err(parse_err(
                    lineno,
                    &rec.id,
                    format!("weak label {v} out of range"),
                ));
            }
            weak.push((v + 1) as usize);
        }
        let strong = match rec.label {
            None => None,
            Some(v) if (0..c).contains(&v) => Some((v + 1) as usize),
            Some(v) => {
                return Err(parse_err(
                    lineno,
                    &rec.id,
                    format!("label {v} out of range"),
                ))
            }
        };
        points.push(DataPoint {
            id: rec.id,
            features: rec.features,
            weak_labels: weak,
            strong_label: strong,
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    WeakDataset::new(
        points,
        header.num_classes,
        header.num_sources,
        header.feature_dim,
        split,
    )
}

pub fn save_dataset(ds: &WeakDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header = Header {
        num_classes: ds.num_classes,
        num_sources: ds.num_sources,
        feature_dim: ds.feature_dim,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for p in &ds.points {
        let rec = Record {
            id: p.id.clone(),
            features: p.features.clone(),
            weak_labels: p.weak_labels.iter().map(|&v| v as i64 - 1).collect(),
            label: p.strong_label.map(|y| y as i64 - 1),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongFractionPlan {
    pub fraction: f64,
    pub seed: u64,
}

/// Split a fully labeled train set into S (keeps strong labels) and W
/// (strong labels removed). Both keep the original point order.
pub fn apply_strong_fraction(
    ds: &WeakDataset,
    plan: StrongFractionPlan,
) -> Result<(WeakDataset, WeakDataset)> {
    if !(0.0..=1.0).contains(&plan.fraction) {
        return Err(Error::InvalidConfig(format!(
            "strong fraction {} outside [0, 1]",
            plan.fraction
        )));
    }
    if let Some(p) = ds.points.iter().find(|p| p.strong_label.is_none()) {
        return Err(Error::MissingStrongLabel(p.id.clone()));
    }
    let n = ds.len();
    let take = ((plan.fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut math::seeded_rng(plan.seed));
    let mut in_s = vec![false; n];
    for &i in &order[..take] {
        in_s[i] = true;
    }
    let mut s = Vec::with_capacity(take);
    let mut w = Vec::with_capacity(n - take);
    for (p, keep) in ds.points.iter().zip(in_s) {
        if keep {
            s.push(p.clone());
        } else {
            w.push(DataPoint {
                strong_label: None,
                ..p.clone()
            });
        }
    }
    Ok((ds.with_points(s), ds.with_points(w)))
}

/// Epoch-shuffled index stream over one set.
#[derive(Debug, Clone)]
struct EpochSampler {
    n: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: Rng) -> Self {
        Self {
            n,
            order: (0..n).collect(),
            cursor: n,
            rng,
        }
    }

    fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.n == 0 {
            return Vec::new();
        }
        if self.cursor >= self.n {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// Yields one index batch into S and one into W per step. The two sets are
/// shuffled per epoch with independent streams derived from one seed, so the
/// S stream does not depend on the size of W and vice versa.
#[derive(Debug, Clone)]
pub struct DualBatchSampler {
    batch_size: usize,
    strong: EpochSampler,
    weak: EpochSampler,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualBatch {
    pub strong: Vec<usize>,
    pub weak: Vec<usize>,
}

impl DualBatchSampler {
    pub fn new(n_strong: usize, n_weak: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if n_strong == 0 && n_weak == 0 {
            return Err(Error::NoTrainingData);
        }
        Ok(Self {
            batch_size,
            strong: EpochSampler::new(n_strong, math::seeded_rng(math::derive_seed(seed, 1))),
            weak: EpochSampler::new(n_weak, math::seeded_rng(math::derive_seed(seed, 2))),
        })
    }

    pub fn for_datasets(
        s: &WeakDataset,
        w: &WeakDataset,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(s.len(), w.len(), batch_size, seed)
    }

    pub fn next_batch(&mut self) -> DualBatch {
        DualBatch {
            strong: self.strong.next_batch(self.batch_size),
            weak: self.weak.next_batch(self.batch_size),
        }
    }
}

impl Iterator for DualBatchSampler {
    type Item = DualBatch;

    fn next(&mut self) -> Option<DualBatch> {
        Some(self.next_batch())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageStats {
    pub num_points: usize,
    /// Fraction of non-abstain votes per source.
    pub per_source: Vec<f64>,
    /// Fraction of points with at least one non-abstain vote.
    pub overall: f64,
    /// Per source: fraction of its non-abstain votes equal to the strong
    /// label, over points that have one. `None` when undefined.
    pub accuracy: Vec<Option<f64>>,
    /// Fraction of points where the non-abstain votes are not unanimous.
    pub conflict: f64,
}

pub fn coverage_stats(ds: &WeakDataset) -> Result<CoverageStats> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = ds.num_sources;
    let mut votes = vec![0usize; k];
    let mut correct = vec![0usize; k];
    let mut judged = vec![0usize; k];
    let mut covered = 0usize;
    let mut conflicts = 0usize;
    for p in &ds.points {
        let mut first = None;
        let mut conflict = false;
        for (s, &v) in p.weak_labels.iter().enumerate() {
            if v == ABSTAIN {
                continue;
            }
            votes[s] += 1;
            if let Some(y) = p.strong_label {
                judged[s] += 1;
                if y == v {
                    correct[s] += 1;
                }
            }
            match first {
                None => first = Some(v),
                Some(f) if f != v => conflict = true,
                _ => {}
            }
        }
        covered += first.is_some() as usize;
        conflicts += conflict as usize;
    }
    let n = ds.len() as f64;
    Ok(CoverageStats {
        num_points: ds.len(),
        per_source: votes.iter().map(|&v| v as f64 / n).collect(),
        overall: covered as f64 / n,
        accuracy: correct
            .iter()
            .zip(&judged)
            .map(|(&c, &j)| (j > 0).then(|| c as f64 / j as f64))
            .collect(),
        conflict: conflicts as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn point(id: &str, weak: Vec<usize>, strong: Option<usize>) -> DataPoint {
        DataPoint {
            id: id.into(),
            features: vec![0.0, 1.0],
            weak_labels: weak,
            strong_label: strong,
        }
    }

    fn labeled(n: usize) -> WeakDataset {
        let pts = (0..n)
            .map(|i| point(&format!("p{i}"), vec![1 + i % 2, 0], Some(1 + i % 2)))
            .collect();
        WeakDataset::new(pts, 2, 2, 2, Split::Train).unwrap()
    }

    #[test]
    fn validation_catches_bad_points() {
        let bad = vec![point("a", vec![3, 0], None)];
        assert!(WeakDataset::new(bad, 2, 2, 2, Split::Train).is_err());
        let ragged = vec![point("a", vec![1], None)];
        assert!(WeakDataset::new(ragged, 2, 2, 2, Split::Train).is_err());
        let unlabeled = vec![point("a", vec![1, 1], None)];
        assert!(matches!(
            WeakDataset::new(unlabeled, 2, 2, 2, Split::Test),
            Err(Error::MissingStrongLabel(_))
        ));
    }

    #[test]
    fn load_maps_external_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            "{\"num_classes\":3,\"num_sources\":2,\"feature_dim\":1}\n\
             {\"id\":\"a\",\"features\":[0.5],\"weak_labels\":[-1,2],\"label\":0}\n\
             {\"id\":\"b\",\"features\":[1.5],\"weak_labels\":[0,-1],\"label\":null}\n",
        )
        .unwrap();
        let ds = load_dataset(&path, Split::Train).unwrap();
        assert_eq!(ds.points[0].weak_labels, vec![0, 3]);
        assert_eq!(ds.points[0].strong_label, Some(1));
        assert_eq!(ds.points[1].weak_labels, vec![1, 0]);
        assert_eq!(ds.points[1].strong_label, None);
    }

    #[test]
    fn load_errors_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            "{\"num_classes\":2,\"num_sources\":2,\"feature_dim\":1}\n\
             {\"id\":\"ok\",\"features\":[0.5],\"weak_labels\":[-1,1],\"label\":0}\n\
             {\"id\":\"ragged\",\"features\":[0.5],\"weak_labels\":[1],\"label\":0}\n",
        )
        .unwrap();
        let err = load_dataset(&path, Split::Train).unwrap_err().to_string();
        assert!(err.contains("ragged") && err.contains("line 3"), "{err}");

        fs::write(
            &path,
            "{\"num_classes\":2,\"num_sources\":1,\"feature_dim\":1}\n\
             {\"id\":\"big\",\"features\":[0.5],\"weak_labels\":[2],\"label\":0}\n",
        )
        .unwrap();
        assert!(load_dataset(&path, Split::Train)
            .unwrap_err()
            .to_string()
            .contains("big"));

        fs::write(
            &path,
            "{\"num_classes\":2,\"num_sources\":1,\"feature_dim\":1}\n\
             {\"id\":\"nofeat\",\"weak_labels\":[1],\"label\":0}\n",
        )
        .unwrap();
        assert!(load_dataset(&path, Split::Train)
            .unwrap_err()
            .to_string()
            .contains("nofeat"));

        fs::write(
            &path,
            "{\"num_classes\":2,\"num_sources\":1,\"feature_dim\":1}\n",
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path, Split::Train),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn strong_fraction_edges() {
        let ds = labeled(100);
        let (s, w) = apply_strong_fraction(
            &ds,
            StrongFractionPlan {
                fraction: 1.0,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(s, ds);
        assert!(w.is_empty());
        let (s, w) = apply_strong_fraction(
            &ds,
            StrongFractionPlan {
                fraction: 0.0,
                seed: 3,
            },
        )
        .unwrap();
        assert!(s.is_empty());
        assert_eq!(w.len(), 100);
        assert!(w.points.iter().all(|p| p.strong_label.is_none()));
        assert!(apply_strong_fraction(
            &ds,
            StrongFractionPlan {
                fraction: 1.5,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn strong_fraction_is_deterministic_partition() {
        let ds = labeled(100);
        let plan = StrongFractionPlan {
            fraction: 0.5,
            seed: 11,
        };
        let a = apply_strong_fraction(&ds, plan).unwrap();
        let b = apply_strong_fraction(&ds, plan).unwrap();
        assert_eq!(a, b);
        let (s, w) = a;
        assert_eq!(s.len(), 50);
        assert_eq!(s.len() + w.len(), 100);
        let sid: HashSet<_> = s.points.iter().map(|p| &p.id).collect();
        assert!(w.points.iter().all(|p| !sid.contains(&p.id)));
    }

    #[test]
    fn sampler_handles_empty_sides() {
        let mut only_w = DualBatchSampler::new(0, 10, 4, 0).unwrap();
        for _ in 0..5 {
            let b = only_w.next_batch();
            assert!(b.strong.is_empty());
            assert!(!b.weak.is_empty());
        }
        let mut only_s = DualBatchSampler::new(10, 0, 4, 0).unwrap();
        let b = only_s.next_batch();
        assert!(b.weak.is_empty() && b.strong.len() == 4);
        assert!(matches!(
            DualBatchSampler::new(0, 0, 4, 0),
            Err(Error::NoTrainingData)
        ));
        assert!(DualBatchSampler::new(1, 0, 0, 0).is_err());
    }

    #[test]
    fn sampler_epoch_cycle() {
        // 300 points, batch 128: 128, 128, 44, then a fresh epoch
        let mut s = DualBatchSampler::new(300, 0, 128, 5).unwrap();
        let sizes: Vec<usize> = (0..6).map(|_| s.next_batch().strong.len()).collect();
        assert_eq!(sizes, vec![128, 128, 44, 128, 128, 44]);
    }

    #[test]
    fn sampler_small_set_is_whole_batch() {
        let mut s = DualBatchSampler::new(5, 3, 128, 5).unwrap();
        let b = s.next_batch();
        assert_eq!(b.strong.len(), 5);
        assert_eq!(b.weak.len(), 3);
    }

    #[test]
    fn coverage_examples() {
        let pts = vec![
            point("a", vec![0, 0, 0], None),
            point("b", vec![0, 0, 0], None),
        ];
        let ds = WeakDataset::new(pts, 2, 3, 2, Split::Train).unwrap();
        let c = coverage_stats(&ds).unwrap();
        assert_eq!(c.per_source, vec![0.0, 0.0, 0.0]);
        assert_eq!(c.overall, 0.0);

        // source 0 votes everywhere, source 1 on a and c, source 2 only on b
        let pts = vec![
            point("a", vec![1, 2, 0], Some(1)),
            point("b", vec![2, 0, 2], Some(2)),
            point("c", vec![1, 1, 0], Some(2)),
            point("d", vec![2, 0, 0], Some(2)),
        ];
        let ds = WeakDataset::new(pts, 2, 3, 2, Split::Train).unwrap();
        let c = coverage_stats(&ds).unwrap();
        assert_eq!(c.per_source, vec![1.0, 0.5, 0.25]);
        assert_eq!(c.overall, 1.0);
        assert_eq!(c.accuracy, vec![Some(0.75), Some(0.0), Some(1.0)]);
        assert_eq!(c.conflict, 0.25);
    }
}
