//! Classification metrics and the per-epoch metrics log.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use crate::nn::DenseMatrix;
use crate::{Error, Result};

/// F1 score. With at most two classes this is the F1 of class 1; otherwise
/// the macro average of one-vs-rest F1 over every class seen in either input.
/// Undefined ratios count as zero.
pub fn f1_score(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Validation("F1 of an empty sample".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let classes = predictions
        .iter()
        .chain(labels)
        .copied()
        .max()
        .unwrap_or(0)
        + 1;
    if classes <= 2 {
        return Ok(class_f1(predictions, labels, 1));
    }
    let total: f64 = (0..classes).map(|c| class_f1(predictions, labels, c)).sum();
    Ok(total / classes as f64)
}

fn class_f1(predictions: &[usize], labels: &[usize], class: usize) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p == class, y == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Binary ROC AUC as the Mann-Whitney statistic with midranks for ties.
/// `labels` must be 0/1 and contain both classes.
pub fn auc_binary(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Validation(format!(
            "score {bad} is not a probability"
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(
            "labels contain a single class".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the mean rank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC from a per-class probability matrix. Two columns: binary AUC on the
/// class-1 column. More: macro one-vs-rest over classes that have both
/// positives and negatives in `labels`.
pub fn auc_score(probabilities: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if probabilities.rows() != labels.len() {
        return Err(Error::Validation(format!(
            "{} probability rows for {} labels",
            probabilities.rows(),
            labels.len()
        )));
    }
    let k = probabilities.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k.max(2)) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {k} probability columns"
        )));
    }
    if k <= 2 {
        let col = k - 1;
        return auc_binary(&probabilities.column(col), labels);
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..k {
        let ovr: Vec<usize> = labels.iter().map(|&y| usize::from(y == c)).collect();
        match auc_binary(&probabilities.column(c), &ovr) {
            Ok(a) => {
                total += a;
                counted += 1;
            }
            Err(Error::UndefinedAuc(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(Error::UndefinedAuc(
            "no class has both positives and negatives".into(),
        ));
    }
    Ok(total / counted as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Unlearn,
    PostUnlearn,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Unlearn => "unlearn",
            Phase::PostUnlearn => "post_unlearn",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "unlearn" => Ok(Phase::Unlearn),
            "post_unlearn" => Ok(Phase::PostUnlearn),
            other => Err(Error::Validation(format!("unknown phase {other:?}"))),
        }
    }
}

/// One epoch of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub test_loss: f64,
    pub f1: f64,
    pub auc: f64,
    pub mia_accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,phase,train_loss,test_loss,f1,auc,mia_accuracy";

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        let mia = self.mia_accuracy.map(|m| m.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.phase, self.train_loss, self.test_loss, self.f1, self.auc, mia
        )
    }

    fn parse_row(line: &str, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::Validation(format!("metrics line {line_no}: bad {what}"));
        if fields.len() != 7 {
            return Err(bad("field count"));
        }
        let num = |i: usize, name: &str| fields[i].parse::<f64>().map_err(|_| bad(name));
        Ok(Self {
            epoch: fields[0].parse().map_err(|_| bad("epoch"))?,
            phase: fields[1].parse()?,
            train_loss: num(2, "train_loss")?,
            test_loss: num(3, "test_loss")?,
            f1: num(4, "f1")?,
            auc: num(5, "auc")?,
            mia_accuracy: if fields[6].is_empty() {
                None
            } else {
                Some(num(6, "mia_accuracy")?)
            },
        })
    }
}

/// Checks that epochs are strictly increasing.
pub fn check_epoch_order(records: &[MetricsRecord]) -> Result<()> {
    if records.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
        return Err(Error::Validation(
            "metrics epochs are not strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Writes the header and one row per record into a sibling temporary file,
/// then renames it over `path`, so readers never see a partial row.
pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    check_epoch_order(records)?;
    let mut text = format!("{METRICS_HEADER}\n");
    for r in records {
        text.push_str(&r.to_csv_row());
        text.push('\n');
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Writes `bytes` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut file = File::create(&tmp)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Validation("metrics file is empty".into()))?;
    if header.trim() != METRICS_HEADER {
        return Err(Error::Validation(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(MetricsRecord::parse_row(line.trim(), i + 2)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        assert_eq!(f1_score(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(f1_score(&[0, 2, 1], &[0, 2, 1]).unwrap(), 1.0);
    }

    #[test]
    fn binary_f1_arithmetic() {
        // TP=2, FP=1, FN=1
        let preds = [1, 1, 1, 0, 0];
        let labels = [1, 1, 0, 1, 0];
        assert!((f1_score(&preds, &labels).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn f1_rejects_empty_and_ragged() {
        assert!(f1_score(&[], &[]).is_err());
        assert!(f1_score(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn auc_concordant_pairs() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let labels = [1, 0, 1, 0];
        assert!((auc_binary(&scores, &labels).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc_binary(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(
            auc_binary(&[0.2, 0.3], &[1, 1]),
            Err(Error::UndefinedAuc(_))
        ));
        assert!(auc_binary(&[1.2, 0.3], &[1, 0]).is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let records = vec![
            MetricsRecord {
                epoch: 1,
                phase: Phase::Train,
                train_loss: 0.5,
                test_loss: 0.25,
                f1: 0.8,
                auc: 0.9,
                mia_accuracy: None,
            },
            MetricsRecord {
                epoch: 2,
                phase: Phase::PostUnlearn,
                train_loss: 0.1 + 0.2,
                test_loss: 1.0 / 3.0,
                f1: 0.7,
                auc: 0.95,
                mia_accuracy: Some(0.55),
            },
        ];
        write_metrics_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert!(text.lines().nth(1).unwrap().ends_with(','));
        assert_eq!(read_metrics_csv(&path).unwrap(), records);
    }

    #[test]
    fn out_of_order_epochs_rejected() {
        let r = MetricsRecord {
            epoch: 2,
            phase: Phase::Train,
            train_loss: 0.0,
            test_loss: 0.0,
            f1: 0.0,
            auc: 0.0,
            mia_accuracy: None,
        };
        let mut r1 = r.clone();
        r1.epoch = 1;
        assert!(check_epoch_order(&[r, r1]).is_err());
    }
}
