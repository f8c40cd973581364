//! Membership inference over the active model's output probabilities.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::make_batch_plan;
use crate::nn::{cross_entropy_loss, sgd_step, softmax_rows, DenseMatrix, MlpModel};
use crate::{Error, Result};

pub const MIA_HIDDEN: usize = 32;
pub const MIA_EPOCHS: usize = 10;

/// Labelled attack data: softmaxed rows with membership 1 (present) or 0
/// (absent).
#[derive(Debug, Clone, PartialEq)]
pub struct MiaDataset {
    pub inputs: DenseMatrix,
    pub membership: Vec<usize>,
}

impl MiaDataset {
    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }
}

/// Softmaxes both logit sets, labels them 1 and 0, and shuffles the rows.
pub fn build_mia_training_set(
    logits_present: &DenseMatrix,
    logits_absent: &DenseMatrix,
    seed: u64,
) -> Result<MiaDataset> {
    if logits_present.cols() != logits_absent.cols() {
        return Err(Error::Shape(format!(
            "present logits have {} columns, absent logits {}",
            logits_present.cols(),
            logits_absent.cols()
        )));
    }
    let stacked = stack_rows(&softmax_rows(logits_present), &softmax_rows(logits_absent));
    let mut membership = vec![1; logits_present.rows()];
    membership.extend(std::iter::repeat_n(0, logits_absent.rows()));
    let mut order: Vec<usize> = (0..membership.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(MiaDataset {
        inputs: stacked.select_rows(&order)?,
        membership: order.iter().map(|&i| membership[i]).collect(),
    })
}

fn stack_rows(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    DenseMatrix::new(a.rows() + b.rows(), a.cols(), data).expect("matching widths")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiaConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MiaConfig {
    fn default() -> Self {
        Self {
            hidden: MIA_HIDDEN,
            epochs: MIA_EPOCHS,
            lr: 1e-2,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Binary attack classifier. Inputs are standardised with statistics of the
/// attack training set before entering the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MiaModel {
    pub model: MlpModel,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl MiaModel {
    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn standardize(&self, probs: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(probs.rows(), probs.cols(), |r, c| {
            (probs.get(r, c) - self.mean[c]) / self.std[c]
        })
    }

    /// Membership predictions for rows that are already probabilities.
    pub fn predict_probs(&self, probs: &DenseMatrix) -> Result<Vec<usize>> {
        if probs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "attack model takes {} columns, got {}",
                self.input_dim(),
                probs.cols()
            )));
        }
        Ok(self.model.predict(&self.standardize(probs))?.argmax_rows())
    }

    /// Membership predictions for raw logits; ties go to class 0.
    pub fn predict(&self, logits: &DenseMatrix) -> Result<Vec<usize>> {
        self.predict_probs(&softmax_rows(logits))
    }
}

/// Fits the attack model with cross-entropy and minibatch SGD.
pub fn train_mia(data: &MiaDataset, config: &MiaConfig) -> Result<MiaModel> {
    if data.is_empty() || !data.membership.contains(&0) || !data.membership.contains(&1) {
        return Err(Error::Validation(
            "attack training data needs both members and non-members".into(),
        ));
    }
    let x = &data.inputs;
    let n = x.rows() as f64;
    let mean: Vec<f64> = x.column_sums().iter().map(|s| s / n).collect();
    let std: Vec<f64> = (0..x.cols())
        .map(|c| {
            let var = x.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n;
            if var.sqrt() < crate::data::MIN_STD {
                1.0
            } else {
                var.sqrt()
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dims = crate::runtime::mlp_dims(x.cols(), config.hidden, 2);
    let mut mia = MiaModel {
        model: MlpModel::random(&dims, &mut rng)?,
        mean,
        std,
    };
    let inputs = mia.standardize(x);
    for epoch in 1..=config.epochs {
        let plan = make_batch_plan(inputs.rows(), config.batch_size, epoch, config.seed)?;
        for batch in &plan.batches {
            let xb = inputs.select_rows(batch)?;
            let yb: Vec<usize> = batch.iter().map(|&i| data.membership[i]).collect();
            let (logits, cache) = mia.model.forward(&xb)?;
            let ce = cross_entropy_loss(&logits, &yb)?;
            let grads = mia.model.backward(&cache, &ce.grad)?;
            sgd_step(&mut mia.model, &grads, config.lr)?;
        }
    }
    Ok(mia)
}

/// Fraction of rows whose predicted membership matches.
pub fn mia_accuracy(mia: &MiaModel, logits: &DenseMatrix, membership: &[usize]) -> Result<f64> {
    if logits.rows() != membership.len() || membership.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} membership labels",
            logits.rows(),
            membership.len()
        )));
    }
    let preds = mia.predict(logits)?;
    let hits = preds.iter().zip(membership).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / membership.len() as f64)
}

/// An attack trained on part of the test split, with the other part kept as
/// probes. Present logits come from the model under audit, absent logits from
/// the retrain benchmark, both on the same test rows.
#[derive(Debug, Clone)]
pub struct MiaAudit {
    pub mia: MiaModel,
    /// Test rows held out from attack training.
    pub probe_rows: Vec<usize>,
    /// Accuracy on held-out rows of both sides.
    pub holdout_accuracy: f64,
}

impl MiaAudit {
    /// `train_fraction` of the test rows train the attack; the rest are probes.
    pub fn fit(
        present: &DenseMatrix,
        absent: &DenseMatrix,
        train_fraction: f64,
        config: &MiaConfig,
    ) -> Result<Self> {
        if present.shape() != absent.shape() {
            return Err(Error::Shape(
                "present and absent logits must cover the same rows".into(),
            ));
        }
        let mut rows: Vec<usize> = (0..present.rows()).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        let cut = ((rows.len() as f64) * train_fraction).round() as usize;
        if cut == 0 || cut >= rows.len() {
            return Err(Error::Validation(format!(
                "attack split of {} rows at {train_fraction} leaves an empty side",
                rows.len()
            )));
        }
        let (train_rows, probe_rows) = rows.split_at(cut);
        let mut probe_rows = probe_rows.to_vec();
        probe_rows.sort_unstable();
        let data = build_mia_training_set(
            &present.select_rows(train_rows)?,
            &absent.select_rows(train_rows)?,
            config.seed,
        )?;
        let mia = train_mia(&data, config)?;
        let held_present = present.select_rows(&probe_rows)?;
        let held_absent = absent.select_rows(&probe_rows)?;
        let holdout_accuracy = 0.5 * mia_accuracy(&mia, &held_present, &vec![1; probe_rows.len()])?
            + 0.5 * mia_accuracy(&mia, &held_absent, &vec![0; probe_rows.len()])?;
        Ok(Self {
            mia,
            probe_rows,
            holdout_accuracy,
        })
    }

    /// Accuracy against membership labels shuffled over every row of both
    /// sides. Labels then carry no signal, so this should sit near 0.5.
    pub fn shuffled_label_accuracy(
        &self,
        present: &DenseMatrix,
        absent: &DenseMatrix,
        seed: u64,
    ) -> Result<f64> {
        let mut membership = vec![1; present.rows()];
        membership.extend(std::iter::repeat_n(0, absent.rows()));
        membership.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        mia_accuracy(&self.mia, &stack_rows(present, absent), &membership)
    }

    /// Accuracy of calling the probe rows of `logits` (all test rows) present.
    pub fn present_accuracy(&self, logits: &DenseMatrix) -> Result<f64> {
        let probes = logits.select_rows(&self.probe_rows)?;
        mia_accuracy(&self.mia, &probes, &vec![1; self.probe_rows.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_logits(n: usize, shift: f64, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(n, 2, |_, c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + if c == 1 { shift } else { 0.0 }
        })
    }

    #[test]
    fn training_set_is_balanced_and_softmaxed() {
        let a = gaussian_logits(7, 0.0, 1);
        let b = gaussian_logits(7, 0.0, 2);
        let set = build_mia_training_set(&a, &b, 0).unwrap();
        assert_eq!(set.len(), 14);
        assert_eq!(set.membership.iter().sum::<usize>(), 7);
        for r in 0..set.len() {
            let s: f64 = set.inputs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(build_mia_training_set(&a, &DenseMatrix::zeros(2, 3), 0).is_err());
    }

    #[test]
    fn single_class_training_is_rejected() {
        let data = MiaDataset {
            inputs: DenseMatrix::zeros(4, 2),
            membership: vec![1; 4],
        };
        assert!(train_mia(&data, &MiaConfig::default()).is_err());
    }

    #[test]
    fn accuracy_counts_matches() {
        let data = build_mia_training_set(
            &gaussian_logits(200, 4.0, 3),
            &gaussian_logits(200, -4.0, 4),
            0,
        )
        .unwrap();
        let mia = train_mia(&data, &MiaConfig::default()).unwrap();
        let probes = gaussian_logits(100, 4.0, 5);
        let acc = mia_accuracy(&mia, &probes, &[1; 100]).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(acc > 0.9);
        assert!(mia_accuracy(&mia, &probes, &[1; 3]).is_err());
    }
}
