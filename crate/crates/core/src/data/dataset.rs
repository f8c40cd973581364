use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::DenseMatrix;
use crate::{Error, Result};

/// Identifier shared by every party for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Standard deviations below this are treated as a constant column.
pub const MIN_STD: f64 = 1e-12;

/// Samples with a feature matrix and, at the label holder only, class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_ids: Vec<SampleId>,
    features: DenseMatrix,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        sample_ids: Vec<SampleId>,
        features: DenseMatrix,
        labels: Option<Vec<usize>>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let num_classes = labels
            .as_ref()
            .map_or(0, |l| l.iter().copied().max().map_or(0, |m| m + 1));
        Self::with_classes(sample_ids, features, labels, num_classes, feature_names)
    }

    /// Like [`new`](Self::new) but with an explicit class count, for subsets
    /// that may not contain every class.
    pub fn with_classes(
        sample_ids: Vec<SampleId>,
        features: DenseMatrix,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if sample_ids.len() != features.rows() {
            return Err(Error::Validation(format!(
                "{} sample ids for {} feature rows",
                sample_ids.len(),
                features.rows()
            )));
        }
        let unique: BTreeSet<_> = sample_ids.iter().collect();
        if unique.len() != sample_ids.len() {
            return Err(Error::Validation("sample ids are not unique".into()));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::Validation(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.cols()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != sample_ids.len() {
                return Err(Error::Validation(format!(
                    "{} labels for {} samples",
                    l.len(),
                    sample_ids.len()
                )));
            }
            if l.iter().any(|&c| c >= num_classes) {
                return Err(Error::Validation(format!(
                    "label outside 0..{num_classes}"
                )));
            }
        }
        Ok(Self {
            sample_ids,
            features,
            labels,
            num_classes,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_ids(&self) -> &[SampleId] {
        &self.sample_ids
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut DenseMatrix {
        &mut self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Same samples and features, labels removed.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            num_classes: 0,
            ..self.clone()
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            sample_ids: indices.iter().map(|&i| self.sample_ids[i]).collect(),
            features: self.features.select_rows(indices)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
        })
    }

    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_columns(columns)?,
            feature_names: columns
                .iter()
                .map(|&c| self.feature_names[c].clone())
                .collect(),
            ..self.clone()
        })
    }

    /// Drops every sample whose id is in `excluded`.
    pub fn without_samples(&self, excluded: &BTreeSet<SampleId>) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| !excluded.contains(&self.sample_ids[i]))
            .collect();
        if keep.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.select_rows(&keep)
    }

    /// Map from sample id to row index.
    pub fn row_index(&self) -> HashMap<SampleId, usize> {
        self.sample_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }

    /// Z-scores every column in place (population standard deviation).
    /// Constant columns become all zeros.
    pub fn standardize(&mut self) {
        let n = self.features.rows() as f64;
        for c in 0..self.features.cols() {
            let col = self.features.column(c);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let mut std = var.sqrt();
            if std < MIN_STD {
                std = 1.0;
            }
            for r in 0..self.features.rows() {
                let v = self.features.get(r, c);
                self.features.set(r, c, (v - mean) / std);
            }
        }
    }

    /// Seeded shuffle into a `train_fraction` / remainder split. Rows keep
    /// their original relative order inside each part.
    pub fn train_test_split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if self.len() < 2 {
            return Err(Error::Validation(
                "need at least two samples to split".into(),
            ));
        }
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "train fraction must be in (0, 1), got {train_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((self.len() as f64 * train_fraction).round() as usize).clamp(1, self.len() - 1);
        let mut train = idx[..n_train].to_vec();
        let mut test = idx[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.select_rows(&train)?, self.select_rows(&test)?))
    }
}

/// Reads a numeric CSV with a header row. Feature columns are z-scored and the
/// optional label column is mapped to `0..C` in order of first appearance.
/// Sample ids are the zero-based data row numbers.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Parse {
                path: path.to_owned(),
                row: 0,
                column: String::new(),
                message: format!("cannot open file: {e}"),
            },
            _ => Error::Csv(e),
        })?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Parse {
            path: path.to_owned(),
            row: 1,
            column: String::new(),
            message: "missing header row".into(),
        });
    }
    let label_idx = match label_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Parse {
                path: path.to_owned(),
                row: 1,
                column: name.to_owned(),
                message: "label column not found in header".into(),
            }
        })?),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| Some(c) != label_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            row: 1,
            column: String::new(),
            message: "no feature columns".into(),
        });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    let mut n = 0usize;
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                path: path.to_owned(),
                row: line,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for &c in &feature_cols {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_owned(),
                row: line,
                column: headers[c].clone(),
                message: format!("non-numeric value {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    row: line,
                    column: headers[c].clone(),
                    message: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        if let Some(li) = label_idx {
            let raw = &record[li];
            let class = match classes.iter().position(|c| c == raw) {
                Some(k) => k,
                None => {
                    classes.push(raw.to_owned());
                    classes.len() - 1
                }
            };
            labels.push(class);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Parse {
            path: path.to_owned(),
            row: 2,
            column: String::new(),
            message: "file has no data rows".into(),
        });
    }

    let features = DenseMatrix::new(n, feature_cols.len(), values)?;
    let names = feature_cols.iter().map(|&c| headers[c].clone()).collect();
    let ids = (0..n as u64).map(SampleId).collect();
    let mut ds = Dataset::with_classes(
        ids,
        features,
        label_idx.map(|_| labels),
        classes.len(),
        names,
    )?;
    ds.standardize();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_binary_file() {
        let f = write_tmp("a,b,y\n1,2,yes\n3,4,no\n5,6,yes\n");
        let ds = load_csv(f.path(), Some("y")).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_features(), 2);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.labels().unwrap(), &[0, 1, 0]);
        assert_eq!(ds.feature_names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn constant_column_normalizes_to_zero() {
        let f = write_tmp("a,c,y\n1,7,0\n2,7,1\n3,7,0\n");
        let ds = load_csv(f.path(), Some("y")).unwrap();
        assert!(ds.features().column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_columns_have_zero_mean_unit_std() {
        let f = write_tmp("a,b\n1,10\n2,-3\n4,8\n8,0.5\n");
        let ds = load_csv(f.path(), None).unwrap();
        for c in 0..2 {
            let col = ds.features().column(c);
            let mean = col.iter().sum::<f64>() / 4.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((std - 1.0).abs() < 1e-9);
        }
        assert!(ds.labels().is_none());
    }

    #[test]
    fn non_numeric_cell_reports_location() {
        let f = write_tmp("a,b,y\n1,2,0\n3,oops,1\n");
        let err = load_csv(f.path(), Some("y")).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_empty_files_are_errors() {
        assert!(matches!(
            load_csv("/definitely/not/here.csv", None),
            Err(Error::Parse { .. })
        ));
        let f = write_tmp("a,b\n");
        assert!(matches!(load_csv(f.path(), None), Err(Error::Parse { .. })));
        let f = write_tmp("");
        assert!(load_csv(f.path(), None).is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let ds = Dataset::new(
            (0..10).map(SampleId).collect(),
            DenseMatrix::from_fn(10, 1, |r, _| r as f64),
            Some(vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]),
            vec!["x".into()],
        )
        .unwrap();
        let (a, b) = ds.train_test_split(0.8, 3).unwrap();
        let (a2, _) = ds.train_test_split(0.8, 3).unwrap();
        assert_eq!(a, a2);
        assert_eq!(a.len(), 8);
        assert_eq!(b.len(), 2);
        assert!(b.sample_ids().iter().all(|id| !a.sample_ids().contains(id)));
        assert_eq!(b.num_classes(), 2);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Dataset::new(
            vec![SampleId(1), SampleId(1)],
            DenseMatrix::zeros(2, 1),
            None,
            vec!["x".into()],
        );
        assert!(err.is_err());
    }
}
