//! Dataset plumbing: the two synthetic generating processes, CSV ingestion,
//! seeded splitting, and train-statistics standardization.

use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

/// Feature matrix plus target vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.is_empty() || y.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        let d = x[0].len();
        if d == 0 {
            return Err(Error::EmptyDataset);
        }
        for (i, row) in x.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: row.len() });
            }
            if row.iter().any(|v| !v.is_finite()) || !y[i].is_finite() {
                return Err(Error::CsvParse {
                    row: i,
                    column: "<data>".into(),
                    message: "non-finite value".into(),
                });
            }
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i]
    }

    fn take(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Disjoint train / calibration / test partition of one parent dataset.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub calib: Dataset,
    pub test: Dataset,
}

/// Subgroup indicator for the first synthetic setting: x in [2, 2.2].
pub fn setting_one_subgroup(x: f64) -> bool {
    (2.0..=2.2).contains(&x)
}

/// Conditional mean of the first synthetic setting.
pub fn setting_one_mean(x: f64) -> f64 {
    if setting_one_subgroup(x) {
        0.0
    } else {
        2.0
    }
}

/// First synthetic process: X ~ U[-1.5, 2.5]; Y = eps on the subgroup
/// 2 <= X <= 2.2 and Y = 2 + eps elsewhere, eps ~ N(0,1).
pub fn gen_setting_one(n: usize, seed: u64) -> Result<Dataset> {
    gen_uniform_x(n, seed, setting_one_mean)
}

/// Second synthetic process: X ~ U[-1.5, 2.5]; Y = eps ~ N(0,1),
/// independent of X.
pub fn gen_setting_two(n: usize, seed: u64) -> Result<Dataset> {
    gen_uniform_x(n, seed, |_| 0.0)
}

fn gen_uniform_x(n: usize, seed: u64, mean: impl Fn(f64) -> f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.random_range(-1.5..2.5);
        let eps: f64 = StandardNormal.sample(&mut rng);
        x.push(vec![xi]);
        y.push(mean(xi) + eps);
    }
    Ok(Dataset { x, y })
}

/// Load a CSV file: first row is the header, comma separated, '.' decimal
/// point, no quoting. Features are all non-target columns in file order.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text, target_column)
}

/// CSV parsing on an in-memory string; see [`load_csv`].
pub fn parse_csv(text: &str, target_column: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::EmptyDataset)?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let target_idx = names
        .iter()
        .position(|&n| n == target_column)
        .ok_or_else(|| Error::MissingTarget(target_column.to_string()))?;

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (line_no, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != names.len() {
            return Err(Error::CsvParse {
                row: line_no + 1,
                column: format!("<{} cells, expected {}>", cells.len(), names.len()),
                message: "wrong cell count".into(),
            });
        }
        let mut row = Vec::with_capacity(names.len() - 1);
        let mut target = 0.0;
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::CsvParse {
                row: line_no + 1,
                column: names[c].to_string(),
                message: format!("non-numeric cell '{cell}'"),
            })?;
            if c == target_idx {
                target = v;
            } else {
                row.push(v);
            }
        }
        x.push(row);
        y.push(target);
    }
    if x.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if names.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    Dataset::new(x, y)
}

/// Partition rows by a seeded permutation into train (n1), calibration (n2),
/// and test (the remainder). An empty test split is accepted with a warning
/// on stderr.
pub fn split(ds: &Dataset, n1: usize, n2: usize, seed: u64) -> Result<DataSplits> {
    let n = ds.len();
    if n1 + n2 > n {
        return Err(Error::InvalidSplit { n_train: n1, n_calib: n2, n });
    }
    if n1 + n2 == n {
        eprintln!("warning: split leaves an empty test set (n1 + n2 = n = {n})");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = crate::diffmodels::shuffled_indices(&mut rng, n);
    Ok(DataSplits {
        train: ds.take(&perm[..n1]),
        calib: ds.take(&perm[n1..n1 + n2]),
        test: ds.take(&perm[n1 + n2..]),
    })
}

/// Per-feature and target affine transform fitted on the training split.
/// Uses the population (1/n) standard deviation; constant columns keep
/// std = 1 so they pass through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn population_stats(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

impl Standardizer {
    /// Fit on the training split only.
    pub fn fit(train: &Dataset) -> Standardizer {
        let n = train.len();
        let d = train.dim();
        let mut x_mean = Vec::with_capacity(d);
        let mut x_std = Vec::with_capacity(d);
        for j in 0..d {
            let (m, s) = population_stats(train.x.iter().map(move |r| r[j]), n);
            x_mean.push(m);
            x_std.push(s);
        }
        let (y_mean, y_std) = population_stats(train.y.iter().cloned(), n);
        Standardizer { x_mean, x_std, y_mean, y_std }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        Dataset {
            x: ds
                .x
                .iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(j, v)| (v - self.x_mean[j]) / self.x_std[j])
                        .collect()
                })
                .collect(),
            y: ds.y.iter().map(|v| (v - self.y_mean) / self.y_std).collect(),
        }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - self.x_mean[j]) / self.x_std[j])
            .collect()
    }

    /// Map a standardized target back to the original scale.
    pub fn invert_y(&self, v: f64) -> f64 {
        v * self.y_std + self.y_mean
    }

    pub fn invert(&self, ds: &Dataset) -> Dataset {
        Dataset {
            x: ds
                .x
                .iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(j, v)| v * self.x_std[j] + self.x_mean[j])
                        .collect()
                })
                .collect(),
            y: ds.y.iter().map(|v| self.invert_y(*v)).collect(),
        }
    }
}

/// Standardize all three splits with statistics fitted on train only.
pub fn standardize(splits: &DataSplits) -> (DataSplits, Standardizer) {
    let std = Standardizer::fit(&splits.train);
    let out = DataSplits {
        train: std.apply(&splits.train),
        calib: std.apply(&splits.calib),
        test: if splits.test.y.is_empty() {
            splits.test.clone()
        } else {
            std.apply(&splits.test)
        },
    };
    (out, std)
}
