//! Benchmark dataset handling: parse sparse (libsvm-style) or dense CSV
//! files, map raw labels onto {0, 1} by a configurable rule, split into
//! train/holdout with a seeded shuffle, and min-max scale features using
//! train-set statistics only.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SgdiagError};
use crate::model::{DataPoint, LossModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    /// `label idx:val idx:val ...` with 1-based feature indices; missing
    /// indices are zero.
    Libsvm,
    /// Dense, comma-separated, first line is the header.
    Csv,
}

/// How raw labels become the response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// Keep labels untouched (regression data).
    Raw,
    /// Labels must already be 0 or 1.
    Binary01,
    /// -1 becomes 0, +1 becomes 1.
    PlusMinus,
    /// 1 for the given class, 0 for every other integer label.
    ClassVsRest(i64),
    /// 1 for integer labels less than or equal to the threshold.
    LessEqual(i64),
}

#[derive(Debug, Clone)]
pub struct BenchmarkDataset {
    pub train: Vec<DataPoint>,
    pub test: Vec<DataPoint>,
    pub dim: usize,
}

fn parse_err(line: usize, msg: impl Into<String>) -> SgdiagError {
    SgdiagError::Parse {
        line,
        msg: msg.into(),
    }
}

fn apply_rule(rule: &LabelRule, raw: f64, line: usize) -> Result<f64> {
    let as_int = || -> Result<i64> {
        if raw.fract() != 0.0 || !raw.is_finite() || raw.abs() > 1e15 {
            return Err(parse_err(
                line,
                format!("label {} is not an integer class", raw),
            ));
        }
        Ok(raw as i64)
    };
    match rule {
        LabelRule::Raw => {
            if raw.is_finite() {
                Ok(raw)
            } else {
                Err(parse_err(line, "non-finite label"))
            }
        }
        LabelRule::Binary01 => match raw {
            r if r == 0.0 => Ok(0.0),
            r if r == 1.0 => Ok(1.0),
            r => Err(parse_err(line, format!("label {} is not 0 or 1", r))),
        },
        LabelRule::PlusMinus => match raw {
            r if r == -1.0 => Ok(0.0),
            r if r == 1.0 => Ok(1.0),
            r => Err(parse_err(line, format!("label {} is not -1 or +1", r))),
        },
        LabelRule::ClassVsRest(c) => Ok(if as_int()? == *c { 1.0 } else { 0.0 }),
        LabelRule::LessEqual(c) => Ok(if as_int()? <= *c { 1.0 } else { 0.0 }),
    }
}

fn parse_libsvm(contents: &str, rule: &LabelRule) -> Result<(Vec<f64>, Vec<Vec<(usize, f64)>>, usize)> {
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let mut dim = 0usize;
    for (i, raw_line) in contents.lines().enumerate() {
        let lineno = i + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a first token");
        let raw_label: f64 = label_tok
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad label '{}'", label_tok)))?;
        labels.push(apply_rule(rule, raw_label, lineno)?);
        let mut feats = Vec::new();
        for tok in tokens {
            let (idx_s, val_s) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(lineno, format!("expected index:value, got '{}'", tok)))?;
            let idx: usize = idx_s
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad feature index '{}'", idx_s)))?;
            if idx == 0 {
                return Err(parse_err(lineno, "feature indices are 1-based"));
            }
            let val: f64 = val_s
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad feature value '{}'", val_s)))?;
            dim = dim.max(idx);
            feats.push((idx - 1, val));
        }
        rows.push(feats);
    }
    Ok((labels, rows, dim))
}

fn parse_csv(
    contents: &str,
    rule: &LabelRule,
    label_column: Option<&str>,
) -> Result<(Vec<f64>, Vec<Vec<(usize, f64)>>, usize)> {
    let mut lines = contents.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, expected a header line"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let wanted = label_column.unwrap_or("y");
    let label_idx = names
        .iter()
        .position(|&n| n == wanted)
        .ok_or_else(|| parse_err(1, format!("no column named '{}' in the header", wanted)))?;
    let dim = names.len() - 1;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (i, raw_line) in lines {
        let lineno = i + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, got {}", names.len(), fields.len()),
            ));
        }
        let mut feats = Vec::with_capacity(dim);
        let mut col = 0usize;
        for (j, field) in fields.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad number '{}'", field)))?;
            if j == label_idx {
                labels.push(apply_rule(rule, v, lineno)?);
            } else {
                feats.push((col, v));
                col += 1;
            }
        }
        rows.push(feats);
    }
    Ok((labels, rows, dim))
}

/// Load a labeled dataset, apply the label rule, shuffle with the seed,
/// hold out `test_fraction` of the rows, and min-max scale every feature
/// to [0, 1] using statistics from the training split only (constant
/// features become 0).
pub fn load_benchmark(
    path: &Path,
    format: FileFormat,
    rule: &LabelRule,
    test_fraction: f64,
    seed: u64,
    label_column: Option<&str>,
) -> Result<BenchmarkDataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(SgdiagError::InvalidConfig(
            "test_fraction must be in [0, 1)".into(),
        ));
    }
    let contents = fs::read_to_string(path)?;
    let (labels, sparse_rows, dim) = match format {
        FileFormat::Libsvm => parse_libsvm(&contents, rule)?,
        FileFormat::Csv => parse_csv(&contents, rule, label_column)?,
    };
    if labels.is_empty() {
        return Err(SgdiagError::Empty(format!(
            "no data rows in {}",
            path.display()
        )));
    }
    if dim == 0 {
        return Err(SgdiagError::Empty(format!(
            "no features in {}",
            path.display()
        )));
    }

    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_test = if test_fraction == 0.0 {
        0
    } else {
        (((n as f64) * test_fraction).round() as usize).clamp(1, n - 1)
    };
    let (test_idx, train_idx) = order.split_at(n_test);

    let densify = |row: &[(usize, f64)]| {
        let mut x = vec![0.0; dim];
        for &(j, v) in row {
            x[j] = v;
        }
        x
    };

    // scaling statistics from the training rows only
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for &i in train_idx {
        let x = densify(&sparse_rows[i]);
        for j in 0..dim {
            lo[j] = lo[j].min(x[j]);
            hi[j] = hi[j].max(x[j]);
        }
    }
    let scale_point = |i: usize| -> DataPoint {
        let mut x = densify(&sparse_rows[i]);
        for j in 0..dim {
            let span = hi[j] - lo[j];
            x[j] = if span > 0.0 { (x[j] - lo[j]) / span } else { 0.0 };
        }
        DataPoint { x, y: labels[i] }
    };

    Ok(BenchmarkDataset {
        train: train_idx.iter().map(|&i| scale_point(i)).collect(),
        test: test_idx.iter().map(|&i| scale_point(i)).collect(),
        dim,
    })
}

/// Seeded subsample without replacement; returns the full set when `k`
/// covers it.
pub fn subsample(data: &[DataPoint], k: usize, seed: u64) -> Vec<DataPoint> {
    if k >= data.len() {
        return data.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, data.len(), k)
        .into_iter()
        .map(|i| data[i].clone())
        .collect()
}

/// Prediction error on a held-out set: misclassification rate at the 0.5
/// threshold for the logistic model, mean squared prediction error
/// otherwise.
pub fn holdout_error(model: &LossModel, theta: &[f64], test: &[DataPoint]) -> Result<f64> {
    if test.is_empty() {
        return Err(SgdiagError::Empty("empty holdout set".into()));
    }
    let mut total = 0.0;
    for pt in test {
        let fitted = model.predict(&pt.x, theta)?;
        total += match model {
            LossModel::Logistic => {
                let label = if fitted >= 0.5 { 1.0 } else { 0.0 };
                if label == pt.y {
                    0.0
                } else {
                    1.0
                }
            }
            _ => (pt.y - fitted) * (pt.y - fitted),
        };
    }
    Ok(total / test.len() as f64)
}

/// Mean per-observation loss of the model at `theta` over `data`.
pub fn training_loss(model: &LossModel, theta: &[f64], data: &[DataPoint]) -> Result<f64> {
    if data.is_empty() {
        return Err(SgdiagError::Empty("empty training set".into()));
    }
    let mut total = 0.0;
    for pt in data {
        let u = model.linear_predictor(&pt.x, theta)?;
        total += model.loss(pt.y, u).ok_or_else(|| {
            SgdiagError::InvalidConfig("training loss is unavailable for custom models".into())
        })?;
    }
    Ok(total / data.len() as f64)
}
