use std::collections::BTreeSet;

use super::dataset::{Dataset, SampleId};
use crate::{Error, Result};

/// Which global feature columns each party owns. Party `k` is `assignments[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerticalSplit {
    assignments: Vec<Vec<usize>>,
}

impl VerticalSplit {
    pub fn new(assignments: Vec<Vec<usize>>) -> Self {
        Self { assignments }
    }

    /// Contiguous blocks of near-equal size. When `d` is not divisible by
    /// `parties`, the lowest-indexed parties take one extra column.
    pub fn equal(d: usize, parties: usize) -> Result<Self> {
        if parties == 0 {
            return Err(Error::Split("need at least one party".into()));
        }
        if d < parties {
            return Err(Error::Split(format!(
                "{d} features cannot be spread over {parties} parties"
            )));
        }
        let base = d / parties;
        let extra = d % parties;
        let mut start = 0;
        let assignments = (0..parties)
            .map(|k| {
                let width = base + usize::from(k < extra);
                let cols = (start..start + width).collect();
                start += width;
                cols
            })
            .collect();
        Ok(Self { assignments })
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn parties(&self) -> usize {
        self.assignments.len()
    }

    /// The party owning global column `feature`.
    pub fn owner_of(&self, feature: usize) -> Option<usize> {
        self.assignments.iter().position(|a| a.contains(&feature))
    }

    /// Checks that the assignments partition `0..d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        let mut seen = vec![false; d];
        for (k, cols) in self.assignments.iter().enumerate() {
            if cols.is_empty() {
                return Err(Error::Split(format!("party {k} owns no features")));
            }
            for &c in cols {
                if c >= d {
                    return Err(Error::Split(format!(
                        "party {k} claims column {c} but the dataset has {d}"
                    )));
                }
                if seen[c] {
                    return Err(Error::Split(format!("column {c} is assigned twice")));
                }
                seen[c] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Split(format!("column {missing} is not assigned")));
        }
        Ok(())
    }
}

/// Splits the columns of `dataset` across parties. Only the party at
/// `label_holder` (if any) keeps the labels.
pub fn vertical_partition(
    dataset: &Dataset,
    split: &VerticalSplit,
    label_holder: Option<usize>,
) -> Result<Vec<Dataset>> {
    split.validate(dataset.num_features())?;
    split
        .assignments()
        .iter()
        .enumerate()
        .map(|(k, cols)| {
            let part = dataset.select_columns(cols)?;
            Ok(if Some(k) == label_holder {
                part
            } else {
                part.without_labels()
            })
        })
        .collect()
}

/// Sample ids present in every list, ascending. Stand-in for private set
/// intersection.
pub fn align_samples(id_lists: &[Vec<SampleId>]) -> Result<Vec<SampleId>> {
    let (first, rest) = id_lists
        .split_first()
        .ok_or_else(|| Error::Alignment("no parties to align".into()))?;
    if id_lists.iter().any(Vec::is_empty) {
        return Err(Error::Alignment("a party supplied no sample ids".into()));
    }
    let mut common: BTreeSet<SampleId> = first.iter().copied().collect();
    for list in rest {
        let other: BTreeSet<SampleId> = list.iter().copied().collect();
        common = common.intersection(&other).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::Alignment("parties share no sample ids".into()));
    }
    Ok(common.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenseMatrix;

    fn ids(v: &[u64]) -> Vec<SampleId> {
        v.iter().copied().map(SampleId).collect()
    }

    #[test]
    fn intersection_of_three_lists() {
        let out = align_samples(&[ids(&[1, 2, 3]), ids(&[2, 3, 4]), ids(&[3, 2, 9])]).unwrap();
        assert_eq!(out, ids(&[2, 3]));
        let same = align_samples(&[ids(&[5, 1]), ids(&[1, 5])]).unwrap();
        assert_eq!(same, ids(&[1, 5]));
    }

    #[test]
    fn empty_intersection_is_an_error() {
        assert!(matches!(
            align_samples(&[ids(&[1]), ids(&[2])]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn equal_split_gives_remainder_to_early_parties() {
        let s = VerticalSplit::equal(6, 3).unwrap();
        assert_eq!(s.assignments(), &[vec![0, 1], vec![2, 3], vec![4, 5]]);
        let s = VerticalSplit::equal(7, 3).unwrap();
        assert_eq!(s.assignments(), &[vec![0, 1, 2], vec![3, 4], vec![5, 6]]);
    }

    #[test]
    fn overlapping_or_missing_columns_rejected() {
        assert!(VerticalSplit::new(vec![vec![0, 1], vec![1]]).validate(2).is_err());
        assert!(VerticalSplit::new(vec![vec![0], vec![2]]).validate(3).is_err());
    }

    #[test]
    fn single_party_gets_everything_without_labels() {
        let ds = Dataset::new(
            ids(&[0, 1]),
            DenseMatrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64),
            Some(vec![0, 1]),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let parts = vertical_partition(&ds, &VerticalSplit::equal(3, 1).unwrap(), None).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].features(), ds.features());
        assert!(parts[0].labels().is_none());
    }
}
