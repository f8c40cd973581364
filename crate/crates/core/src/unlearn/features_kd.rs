use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{UnlearnEpoch, UnlearnParams, UnlearningReport, EARLY_STOP_TOL};
use crate::data::make_batch_plan;
use crate::nn::{kl_divergence, newton_step, sgd_step, DenseMatrix, GradientSet, MlpModel};
use crate::runtime::{PassiveParty, UpdateRule};
use crate::{Error, Result};

/// `KL(softmax(student emb) || softmax(teacher emb))` and its gradient.
fn embedding_objective(
    student: &MlpModel,
    inputs: &DenseMatrix,
    teacher_emb: &DenseMatrix,
) -> Result<(f64, GradientSet)> {
    let (emb, cache) = student.forward(inputs)?;
    let kl = kl_divergence(&emb, teacher_emb)?;
    Ok((kl.loss, student.backward(&cache, &kl.grad)?))
}

/// Trains a student passive model on the party's data without the columns of
/// `features` (global indices) to reproduce the current model's embeddings.
/// Runs entirely at the passive party: no labels, no messages.
pub fn unlearn_features_kd(
    passive: &PassiveParty,
    features: &BTreeSet<usize>,
    params: &UnlearnParams,
) -> Result<(MlpModel, UnlearningReport)> {
    params.validate()?;
    if features.is_empty() {
        return Err(Error::Request("no features to unlearn".into()));
    }
    let drop = passive.local_columns(features)?;
    if drop.len() == passive.owned_features().len() {
        return Err(Error::Request(format!(
            "unlearning every feature of party {}; unlearn the party instead",
            passive.id()
        )));
    }
    let teacher = &passive.model;
    let full = passive.train().features();
    let reduced = full.drop_columns(&drop)?;
    let mut dims = teacher.dims();
    dims[0] -= drop.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut student = MlpModel::random(&dims, &mut rng)?;

    let epochs = params.distill_epochs.unwrap_or(1);
    let mut report = UnlearningReport::new("feature_kd");
    let mut previous: Option<f64> = None;
    for e in 1..=epochs {
        let plan = make_batch_plan(full.rows(), params.batch_size, e, params.seed)?;
        let (mut sum, mut rows) = (0.0, 0usize);
        for batch in &plan.batches {
            let teacher_emb = teacher.predict(&full.select_rows(batch)?)?;
            let x = reduced.select_rows(batch)?;
            let (loss, grads) = embedding_objective(&student, &x, &teacher_emb)?;
            match params.update_rule {
                UpdateRule::Sgd => sgd_step(&mut student, &grads, params.lr)?,
                UpdateRule::Newton => {
                    newton_step(
                        &mut student,
                        |m: &MlpModel| embedding_objective(m, &x, &teacher_emb),
                        params.damping,
                    )?;
                }
            }
            sum += loss * batch.len() as f64;
            rows += batch.len();
        }
        let mean = sum / rows as f64;
        report.epochs.push(UnlearnEpoch {
            epoch: e,
            train_loss: mean,
            test: None,
            student_teacher_kl: mean,
            target_loss: None,
        });
        if previous.is_some_and(|p| (p - mean).abs() < EARLY_STOP_TOL) {
            break;
        }
        previous = Some(mean);
    }

    let teacher_emb = teacher.predict(full)?;
    report.terminal_kl = kl_divergence(&student.predict(&reduced)?, &teacher_emb)?.loss;
    Ok((student, report))
}
