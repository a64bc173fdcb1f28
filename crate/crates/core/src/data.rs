//! Series ingestion, standardization, sliding windows and the synthetic
//! anomaly corpus generator.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CometError, Result};
use crate::ndmath::{Matrix, Rng};

/// An `L×D` series (time along rows) with optional per-timestep labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub names: Vec<String>,
    pub values: Matrix,
    pub labels: Option<Vec<u8>>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn num_vars(&self) -> usize {
        self.values.cols()
    }

    /// Rows `[start, start + len)` as a new matrix.
    pub fn slice(&self, start: usize, len: usize) -> Matrix {
        let d = self.values.cols();
        let data = self.values.data()[start * d..(start + len) * d].to_vec();
        Matrix::from_vec(len, d, data).expect("slice within bounds")
    }
}

/// Reads a comma-separated file with a header row. If `label_column` names
/// a column, it is pulled out as 0/1 labels and excluded from the values.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CometError::io(path, e))?;
    read_csv(file, label_column)
}

pub fn read_csv<R: std::io::Read>(reader: R, label_column: Option<&str>) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CometError::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let label_idx = match label_column {
        Some(name) => headers.iter().position(|h| h.trim() == name),
        None => None,
    };
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(c, _)| Some(*c) != label_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    if names.is_empty() {
        return Err(CometError::Data("no value columns".into()));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| CometError::Parse {
            row,
            message: e.to_string(),
        })?;
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| CometError::Parse {
                row,
                message: format!("column `{}`: `{cell}` is not a number", &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(CometError::Parse {
                    row,
                    message: format!("column `{}`: non-finite value", &headers[c]),
                });
            }
            if Some(c) == label_idx {
                labels.push(u8::from(v != 0.0));
            } else {
                data.push(v);
            }
        }
        rows += 1;
    }
    Ok(TimeSeries {
        values: Matrix::from_vec(rows, names.len(), data)?,
        names,
        labels: label_idx.map(|_| labels),
    })
}

/// Writes `series` as CSV, with a trailing `label` column when labels exist.
pub fn write_csv(series: &TimeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<&str> = series.names.iter().map(String::as_str).collect();
    if series.labels.is_some() {
        header.push("label");
    }
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for t in 0..series.len() {
        let mut rec: Vec<String> = series.values.row(t).iter().map(|v| v.to_string()).collect();
        if let Some(l) = &series.labels {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| CometError::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> CometError {
    CometError::io(path, std::io::Error::other(e))
}

/// Per-variable z-scoring statistics, fitted on training data only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

impl Standardizer {
    pub fn fit(values: &Matrix, eps: f64) -> Result<Self> {
        let (len, d) = values.shape();
        if len == 0 {
            return Err(CometError::Data("cannot fit statistics on an empty series".into()));
        }
        let mut mean = vec![0.0; d];
        for row in values.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= len as f64);
        let mut var = vec![0.0; d];
        for row in values.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / len as f64).sqrt()).collect();
        Ok(Standardizer { mean, std, eps })
    }

    /// `(x − μ) / (σ + ε)` per variable.
    pub fn apply(&self, values: &Matrix) -> Result<Matrix> {
        if values.cols() != self.mean.len() {
            return Err(CometError::Shape(format!(
                "series has {} variables, statistics cover {}",
                values.cols(),
                self.mean.len()
            )));
        }
        let mut out = values.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / (s + self.eps);
            }
        }
        Ok(out)
    }
}

/// Train/test pair with train-fitted statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: TimeSeries,
    pub test: TimeSeries,
    pub stats: Option<Standardizer>,
}

/// Fits statistics on the training series and z-scores both portions.
pub fn standardize(dataset: &Dataset, eps: f64) -> Result<Dataset> {
    let stats = Standardizer::fit(&dataset.train.values, eps)?;
    Ok(Dataset {
        train: TimeSeries {
            values: stats.apply(&dataset.train.values)?,
            ..dataset.train.clone()
        },
        test: TimeSeries {
            values: stats.apply(&dataset.test.values)?,
            ..dataset.test.clone()
        },
        stats: Some(stats),
    })
}

/// Window start offsets `0, stride, 2·stride, …`, plus a final window ending
/// exactly at `len` when the stride grid misses the tail.
pub fn windows(len: usize, length: usize, stride: usize) -> Result<Vec<usize>> {
    if length == 0 || stride == 0 {
        return Err(CometError::config("window", "length and stride must be >= 1"));
    }
    if len < length {
        return Err(CometError::Data(format!(
            "series of length {len} is shorter than one window ({length})"
        )));
    }
    let mut out: Vec<usize> = (0..=len - length).step_by(stride).collect();
    let last = *out.last().expect("at least one window");
    if last + length < len {
        out.push(len - length);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    /// Single-step spike of `magnitude·σ`.
    Point,
    /// Signal replaced by its half-period phase shift: values stay within the
    /// normal range but contradict the local phase.
    Contextual,
    /// Sustained mean shift of `magnitude·σ` with a tripled dominant frequency.
    Collective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Offset into the test portion.
    pub start: usize,
    #[serde(default = "one")]
    pub duration: usize,
    pub magnitude: f64,
    /// Affected variables; all of them when empty.
    #[serde(default)]
    pub variables: Vec<usize>,
}

fn one() -> usize {
    1
}

/// Sine-mixture corpus description. Files are TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub variables: usize,
    pub train_length: usize,
    pub test_length: usize,
    /// Sine components per variable.
    pub components: usize,
    pub min_period: f64,
    pub max_period: f64,
    pub noise: f64,
    /// Linear mean drift over the test portion, in units of the clean signal
    /// std (0 disables).
    pub drift: f64,
    pub seed: u64,
    pub anomalies: Vec<AnomalySpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let point = |start| AnomalySpec {
            kind: AnomalyKind::Point,
            start,
            duration: 1,
            magnitude: 8.0,
            variables: Vec::new(),
        };
        let collective = |start| AnomalySpec {
            kind: AnomalyKind::Collective,
            start,
            duration: 40,
            magnitude: 6.0,
            variables: Vec::new(),
        };
        SyntheticSpec {
            variables: 2,
            train_length: 4000,
            test_length: 2000,
            components: 2,
            min_period: 20.0,
            max_period: 80.0,
            noise: 0.05,
            drift: 0.0,
            seed: 42,
            anomalies: vec![
                point(150),
                collective(400),
                point(700),
                point(950),
                collective(1150),
                point(1420),
                collective(1650),
                point(1900),
            ],
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SyntheticSpec =
            toml::from_str(text).map_err(|e| CometError::config("synthetic", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables == 0 {
            return Err(CometError::config("variables", "must be >= 1"));
        }
        if self.train_length == 0 || self.test_length == 0 {
            return Err(CometError::config("train_length", "both portions must be non-empty"));
        }
        if self.components == 0 {
            return Err(CometError::config("components", "must be >= 1"));
        }
        if !(self.min_period > 0.0 && self.max_period >= self.min_period) {
            return Err(CometError::config("min_period", "need 0 < min_period <= max_period"));
        }
        if !(self.noise >= 0.0) {
            return Err(CometError::config("noise", "must be non-negative"));
        }
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for (n, a) in self.anomalies.iter().enumerate() {
            let field = format!("anomalies[{n}]");
            if a.duration == 0 {
                return Err(CometError::config(format!("{field}.duration"), "must be >= 1"));
            }
            if a.kind == AnomalyKind::Point && a.duration != 1 {
                return Err(CometError::config(format!("{field}.duration"), "point anomalies last one step"));
            }
            if a.start + a.duration > self.test_length {
                return Err(CometError::config(
                    format!("{field}.start"),
                    format!("interval [{}, {}) exceeds the test length {}", a.start, a.start + a.duration, self.test_length),
                ));
            }
            if let Some(&v) = a.variables.iter().find(|&&v| v >= self.variables) {
                return Err(CometError::config(format!("{field}.variables"), format!("variable {v} out of range")));
            }
            let span = (a.start, a.start + a.duration);
            if let Some(o) = spans.iter().position(|s| span.0 < s.1 && s.0 < span.1) {
                return Err(CometError::config(
                    format!("{field}.start"),
                    format!("overlaps anomalies[{o}]"),
                ));
            }
            spans.push(span);
        }
        Ok(())
    }
}

struct Component {
    amplitude: f64,
    period: f64,
    phase: f64,
}

/// Generates a clean training series and a labeled test series that
/// continues it in time. Output is unstandardized.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let signals: Vec<Vec<Component>> = (0..spec.variables)
        .map(|_| {
            (0..spec.components)
                .map(|c| Component {
                    amplitude: rng.uniform_range(0.5, 1.5) / (c + 1) as f64,
                    period: rng.uniform_range(spec.min_period, spec.max_period),
                    phase: rng.uniform_range(0.0, 2.0 * PI),
                })
                .collect()
        })
        .collect();
    let clean = |v: usize, t: f64, phase_shift: f64, freq_mult: f64| -> f64 {
        signals[v]
            .iter()
            .enumerate()
            .map(|(c, comp)| {
                let mult = if c == 0 { freq_mult } else { 1.0 };
                let shift = if c == 0 { phase_shift } else { 0.0 };
                comp.amplitude * (2.0 * PI * mult * t / comp.period + comp.phase + shift).sin()
            })
            .sum()
    };

    let total = spec.train_length + spec.test_length;
    let mut values = Matrix::zeros(total, spec.variables);
    for t in 0..total {
        for v in 0..spec.variables {
            values.set(t, v, clean(v, t as f64, 0.0, 1.0) + spec.noise * rng.normal());
        }
    }

    // σ of the clean training signal per variable sets anomaly and drift scale
    let train_clean = Matrix::from_vec(
        spec.train_length,
        spec.variables,
        (0..spec.train_length)
            .flat_map(|t| (0..spec.variables).map(move |v| (t, v)))
            .map(|(t, v)| clean(v, t as f64, 0.0, 1.0))
            .collect(),
    )?;
    let sigma = Standardizer::fit(&train_clean, 0.0)?.std;

    let mut labels = vec![0u8; spec.test_length];
    for a in &spec.anomalies {
        let vars: Vec<usize> = if a.variables.is_empty() {
            (0..spec.variables).collect()
        } else {
            a.variables.clone()
        };
        for t in a.start..a.start + a.duration {
            labels[t] = 1;
            let row = spec.train_length + t;
            for &v in &vars {
                let tt = row as f64;
                let noise = values.get(row, v) - clean(v, tt, 0.0, 1.0);
                let x = match a.kind {
                    AnomalyKind::Point => values.get(row, v) + a.magnitude * sigma[v],
                    AnomalyKind::Contextual => clean(v, tt, PI, 1.0) + noise,
                    AnomalyKind::Collective => clean(v, tt, 0.0, 3.0) + noise + a.magnitude * sigma[v],
                };
                values.set(row, v, x);
            }
        }
    }
    if spec.drift != 0.0 {
        let denom = (spec.test_length.max(2) - 1) as f64;
        for t in 0..spec.test_length {
            let row = spec.train_length + t;
            for v in 0..spec.variables {
                let x = values.get(row, v) + spec.drift * sigma[v] * t as f64 / denom;
                values.set(row, v, x);
            }
        }
    }

    let names: Vec<String> = (0..spec.variables).map(|v| format!("x{v}")).collect();
    let d = spec.variables;
    let split = |start: usize, len: usize| {
        Matrix::from_vec(len, d, values.data()[start * d..(start + len) * d].to_vec())
    };
    Ok(Dataset {
        train: TimeSeries {
            names: names.clone(),
            values: split(0, spec.train_length)?,
            labels: None,
        },
        test: TimeSeries {
            names,
            values: split(spec.train_length, spec.test_length)?,
            labels: Some(labels),
        },
        stats: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_basic_and_labels() {
        let text = "a,b\n1,2\n3.5,-4\n5,6e-1\n";
        let ts = read_csv(text.as_bytes(), None).unwrap();
        assert_eq!(ts.values.shape(), (3, 2));
        assert_eq!(ts.values.row(1), &[3.5, -4.0]);
        assert!(ts.labels.is_none());

        let text = "a,label,b\n1,0,2\n3,1,4\n";
        let ts = read_csv(text.as_bytes(), Some("label")).unwrap();
        assert_eq!(ts.names, vec!["a", "b"]);
        assert_eq!(ts.values.row(1), &[3.0, 4.0]);
        assert_eq!(ts.labels, Some(vec![0, 1]));
    }

    #[test]
    fn csv_errors_name_the_row() {
        let mut text = String::from("a,b\n");
        for r in 1..=10 {
            if r == 7 {
                text.push_str("abc,1\n");
            } else {
                text.push_str("1,1\n");
            }
        }
        match read_csv(text.as_bytes(), None).unwrap_err() {
            CometError::Parse { row, message } => {
                assert_eq!(row, 7);
                assert!(message.contains("abc"));
            }
            other => panic!("{other:?}"),
        }
        let ragged = "a,b\n1,2\n3\n";
        assert!(matches!(read_csv(ragged.as_bytes(), None), Err(CometError::Parse { row: 2, .. })));
    }

    #[test]
    fn standardize_constant_and_moments() {
        let mut rng = Rng::new(1);
        let train = Matrix::from_vec(
            200,
            2,
            (0..200).flat_map(|_| [3.0, 5.0 + 2.0 * rng.normal()]).collect(),
        )
        .unwrap();
        let stats = Standardizer::fit(&train, 1e-8).unwrap();
        let z = stats.apply(&train).unwrap();
        assert!((0..200).all(|t| z.get(t, 0) == 0.0));
        let after = Standardizer::fit(&z, 0.0).unwrap();
        assert!(after.mean[1].abs() <= 1e-10);
        assert!((after.std[1] - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn test_portion_uses_train_statistics() {
        let ts = |v: Vec<f64>| TimeSeries {
            names: vec!["x".into()],
            values: Matrix::from_vec(v.len(), 1, v).unwrap(),
            labels: None,
        };
        let ds = Dataset {
            train: ts(vec![0.0, 2.0, 0.0, 2.0]),
            test: ts(vec![11.0, 11.0]),
            stats: None,
        };
        let z = standardize(&ds, 0.0).unwrap();
        // train mean 1, std 1
        assert_eq!(z.test.values.data(), &[10.0, 10.0]);
    }

    #[test]
    fn window_offsets() {
        assert_eq!(windows(250, 100, 50).unwrap(), vec![0, 50, 100, 150]);
        assert_eq!(windows(100, 100, 50).unwrap(), vec![0]);
        assert_eq!(windows(230, 100, 50).unwrap(), vec![0, 50, 100, 130]);
        assert!(matches!(windows(99, 100, 50), Err(CometError::Data(_))));
    }

    #[test]
    fn synth_zero_anomalies_and_point_label() {
        let spec = SyntheticSpec {
            anomalies: vec![],
            train_length: 600,
            test_length: 600,
            ..SyntheticSpec::default()
        };
        let ds = synthesize(&spec).unwrap();
        assert!(ds.test.labels.as_ref().unwrap().iter().all(|&l| l == 0));

        let spec = SyntheticSpec {
            anomalies: vec![AnomalySpec {
                kind: AnomalyKind::Point,
                start: 500,
                duration: 1,
                magnitude: 8.0,
                variables: vec![],
            }],
            ..spec
        };
        let with = synthesize(&spec).unwrap();
        let labels = with.test.labels.as_ref().unwrap();
        assert_eq!(labels.iter().map(|&l| l as usize).sum::<usize>(), 1);
        assert_eq!(labels[500], 1);
        // clean everywhere else, identical training portion
        assert_eq!(with.train, ds.train);
        assert_eq!(with.test.values.row(499), ds.test.values.row(499));
        assert!(with.test.values.get(500, 0) > ds.test.values.get(500, 0) + 1.0);
    }

    #[test]
    fn synth_rejects_overlap_and_is_reproducible() {
        let mut spec = SyntheticSpec::default();
        assert_eq!(synthesize(&spec).unwrap(), synthesize(&spec).unwrap());
        spec.anomalies.push(AnomalySpec {
            kind: AnomalyKind::Collective,
            start: 410,
            duration: 5,
            magnitude: 3.0,
            variables: vec![],
        });
        assert!(matches!(synthesize(&spec), Err(CometError::Config { .. })));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = SyntheticSpec::default();
        assert_eq!(SyntheticSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }
}
