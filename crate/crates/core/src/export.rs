//! Per-point transition export for inspecting x-dependent label models.
//!
//! CSV columns: `point_id, source, w{i}_y{j}...` (weak label `i` in
//! `0..=C`, class `j` in `1..=C`), `source_variance`. The variance column
//! repeats, on every row of a source, the sum over matrix entries of the
//! across-point variance of that entry.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataPoint;
use crate::error::{Error, Result};
use crate::label_model::LabelModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub point_id: String,
    pub source: usize,
    /// `(C+1) x C`, row-major.
    pub entries: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionExport {
    pub num_classes: usize,
    pub num_sources: usize,
    pub rows: Vec<TransitionRow>,
    pub source_variance: Vec<f64>,
}

/// Realize the label model at every point. Latent models export their
/// mixture-averaged matrices. Global models are rejected.
pub fn export_transitions(model: &LabelModel, points: &[DataPoint]) -> Result<TransitionExport> {
    if !model.is_x_dependent() {
        return Err(Error::XIndependent);
    }
    if points.is_empty() {
        return Err(Error::Empty("points"));
    }
    let (c, k) = (model.num_classes(), model.num_sources());
    let mut rows = Vec::with_capacity(points.len() * k);
    for p in points {
        for (s, m) in model.matrices(Some(&p.features))?.into_iter().enumerate() {
            rows.push(TransitionRow {
                point_id: p.id.clone(),
                source: s,
                entries: m.entries().to_vec(),
            });
        }
    }
    let source_variance = variances(&rows, c, k, points.len());
    Ok(TransitionExport {
        num_classes: c,
        num_sources: k,
        rows,
        source_variance,
    })
}

fn variances(rows: &[TransitionRow], c: usize, k: usize, n: usize) -> Vec<f64> {
    let b = (c + 1) * c;
    (0..k)
        .map(|s| {
            let mut mean = vec![0.0; b];
            for r in rows.iter().filter(|r| r.source == s) {
                for (m, v) in mean.iter_mut().zip(&r.entries) {
                    *m += v / n as f64;
                }
            }
            let mut var = 0.0;
            for r in rows.iter().filter(|r| r.source == s) {
                for (m, v) in mean.iter().zip(&r.entries) {
                    var += (v - m) * (v - m) / n as f64;
                }
            }
            var
        })
        .collect()
}

fn header(c: usize) -> Vec<String> {
    let mut h = vec!["point_id".to_string(), "source".to_string()];
    for i in 0..=c {
        for j in 1..=c {
            h.push(format!("w{i}_y{j}"));
        }
    }
    h.push("source_variance".into());
    h
}

impl TransitionExport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header(self.num_classes))?;
        for r in &self.rows {
            let mut rec = vec![r.point_id.clone(), r.source.to_string()];
            // `Display` for f64 prints the shortest string that parses back exactly
            rec.extend(r.entries.iter().map(|v| v.to_string()));
            rec.push(self.source_variance[r.source].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let n_entries = headers
            .len()
            .checked_sub(3)
            .ok_or_else(|| bad(path, 1, "too few columns"))?;
        // (C+1) C = n_entries
        let c = (1..=n_entries)
            .find(|c| (c + 1) * c == n_entries)
            .ok_or_else(|| bad(path, 1, "column count is not (C+1)C + 3"))?;
        if headers.iter().collect::<Vec<_>>()
            != header(c).iter().map(String::as_str).collect::<Vec<_>>()
        {
            return Err(bad(path, 1, "unexpected header"));
        }
        let mut rows = Vec::new();
        let mut variance: Vec<Option<f64>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = line + 2;
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| bad(path, line, &e.to_string()))
            };
            let source: usize = rec[1]
                .parse()
                .map_err(|_| bad(path, line, "bad source index"))?;
            let entries = (0..n_entries)
                .map(|i| num(&rec[2 + i]))
                .collect::<Result<Vec<_>>>()?;
            let v = num(&rec[2 + n_entries])?;
            if variance.len() <= source {
                variance.resize(source + 1, None);
            }
            match variance[source] {
                Some(prev) if prev.to_bits() != v.to_bits() => {
                    return Err(bad(path, line, "inconsistent source_variance"));
                }
                _ => variance[source] = Some(v),
            }
            rows.push(TransitionRow {
                point_id: rec[0].to_string(),
                source,
                entries,
            });
        }
        let source_variance = variance
            .into_iter()
            .enumerate()
            .map(|(s, v)| v.ok_or_else(|| bad(path, 0, &format!("no rows for source {s}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            num_classes: c,
            num_sources: source_variance.len(),
            rows,
            source_variance,
        })
    }
}

fn bad(path: &Path, line: usize, message: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        id: String::new(),
        message: message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_model::AmortizedLabelModel;
    use crate::math::seeded_rng;
    use rand::Rng as _;

    fn points(n: usize) -> Vec<DataPoint> {
        let mut rng = seeded_rng(0);
        (0..n)
            .map(|i| DataPoint {
                id: format!("p{i}"),
                features: vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                weak_labels: vec![0, 0],
                strong_label: None,
            })
            .collect()
    }

    #[test]
    fn global_model_is_rejected() {
        assert!(matches!(
            export_transitions(&LabelModel::global(2, 2), &points(3)),
            Err(Error::XIndependent)
        ));
    }

    #[test]
    fn constant_network_has_zero_variance() {
        let mut rng = seeded_rng(1);
        let mut m = AmortizedLabelModel::new(2, 2, 2, 5, &mut rng).unwrap();
        let net = m.network_mut();
        let (w, b) = net.layer_offsets(2);
        net.params_mut()[w..b].fill(0.0);
        let e = export_transitions(&LabelModel::Amortized(m), &points(20)).unwrap();
        assert_eq!(e.rows.len(), 40);
        assert_eq!(e.source_variance, vec![0.0, 0.0]);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut rng = seeded_rng(2);
        let m = AmortizedLabelModel::new(2, 3, 2, 5, &mut rng).unwrap();
        let e = export_transitions(&LabelModel::Amortized(m), &points(15)).unwrap();
        assert!(e.source_variance.iter().all(|&v| v > 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        e.write_csv(&path).unwrap();
        let back = TransitionExport::read_csv(&path).unwrap();
        assert_eq!(back, e);
        for (a, b) in back.rows.iter().zip(&e.rows) {
            for (x, y) in a.entries.iter().zip(&b.entries) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
