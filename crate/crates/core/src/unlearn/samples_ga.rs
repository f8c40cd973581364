use std::collections::BTreeSet;

use super::{replay_schedule, TestScores, UnlearnEpoch, UnlearnParams, UnlearningReport};
use crate::data::SampleId;
use crate::nn::{cross_entropy_loss, kl_divergence, sgd_step, DenseMatrix, MlpModel};
use crate::runtime::{ce_objective, ActiveParty, EmbeddingStore, EvalProbe};
use crate::{Error, Result};

/// Rows of a record split into retain and target positions.
fn split_rows(ids: &[SampleId], targets: &BTreeSet<SampleId>) -> (Vec<usize>, Vec<usize>) {
    (0..ids.len()).partition(|&i| !targets.contains(&ids[i]))
}

/// Mean cross-entropy of `model` on every target row of the given epochs.
fn target_loss(
    model: &MlpModel,
    active: &ActiveParty,
    store: &EmbeddingStore,
    epochs: &[u32],
    targets: &BTreeSet<SampleId>,
) -> Result<f64> {
    let (mut sum, mut rows) = (0.0, 0usize);
    for &epoch in epochs {
        for (_, rec) in store.epoch_records(epoch) {
            let (_, target) = split_rows(&rec.sample_ids, targets);
            if target.is_empty() {
                continue;
            }
            let x = rec.concat.select_rows(&target)?;
            let ids: Vec<SampleId> = target.iter().map(|&i| rec.sample_ids[i]).collect();
            let labels = active.labels_of(&ids)?;
            sum += cross_entropy_loss(&model.predict(&x)?, &labels)?.loss * target.len() as f64;
            rows += target.len();
        }
    }
    Ok(sum / rows.max(1) as f64)
}

/// Gradient ascent on the target rows with descent on the retain rows, over
/// the last `u_ep` stored epochs: `v <- v - lr * dL_retain + lambda * dL_target`
/// per stored record. Target rows are deleted from the store afterwards.
pub fn unlearn_samples_ga(
    active: &ActiveParty,
    store: &mut EmbeddingStore,
    targets: &BTreeSet<SampleId>,
    params: &UnlearnParams,
    probe: Option<&EvalProbe>,
) -> Result<(MlpModel, UnlearningReport)> {
    params.validate()?;
    if targets.is_empty() {
        return Err(Error::Request("no target samples".into()));
    }
    if !(params.lambda > 0.0 && params.lambda.is_finite()) {
        return Err(Error::config(
            "lambda",
            format!("must be positive, got {}", params.lambda),
        ));
    }
    if params.u_ep == 0 {
        return Err(Error::config("u_ep", "must be at least 1"));
    }
    let teacher = &active.model;
    let mut model = teacher.clone();
    let schedule = replay_schedule(store, params.u_ep)?;
    let mut report = UnlearningReport::new("sample_ga");
    report.target_loss_before = Some(target_loss(&model, active, store, &schedule, targets)?);

    for (e, &source) in schedule.iter().enumerate() {
        let (mut retain_sum, mut kl_sum, mut retain_rows) = (0.0, 0.0, 0usize);
        for (_, rec) in store.epoch_records(source) {
            let (retain, target) = split_rows(&rec.sample_ids, targets);
            let pick = |rows: &[usize]| -> Result<(DenseMatrix, Vec<usize>)> {
                let ids: Vec<SampleId> = rows.iter().map(|&i| rec.sample_ids[i]).collect();
                Ok((rec.concat.select_rows(rows)?, active.labels_of(&ids)?))
            };
            let mut step = None;
            if !retain.is_empty() {
                let (x, y) = pick(&retain)?;
                let (loss, grads) = ce_objective(&model, &x, &y)?;
                kl_sum += kl_divergence(&model.predict(&x)?, &teacher.predict(&x)?)?.loss
                    * retain.len() as f64;
                retain_sum += loss * retain.len() as f64;
                retain_rows += retain.len();
                let mut g = grads;
                g.input_gradient = None;
                g.layers.iter_mut().for_each(|l| {
                    l.weights.scale(params.lr);
                    l.bias.iter_mut().for_each(|b| *b *= params.lr);
                });
                step = Some(g);
            }
            if !target.is_empty() {
                let (x, y) = pick(&target)?;
                let (_, grads) = ce_objective(&model, &x, &y)?;
                match &mut step {
                    Some(g) => g.add_scaled(&grads, -params.lambda)?,
                    None => {
                        let mut g = grads;
                        g.input_gradient = None;
                        g.layers.iter_mut().for_each(|l| {
                            l.weights.scale(-params.lambda);
                            l.bias.iter_mut().for_each(|b| *b *= -params.lambda);
                        });
                        step = Some(g);
                    }
                }
            }
            if let Some(g) = step {
                sgd_step(&mut model, &g, 1.0)?;
            }
        }
        let test = match probe {
            Some(p) => {
                let ev = p.score(&model, None)?;
                Some(TestScores {
                    loss: ev.loss,
                    f1: ev.f1,
                    auc: ev.auc,
                })
            }
            None => None,
        };
        report.epochs.push(UnlearnEpoch {
            epoch: e + 1,
            train_loss: retain_sum / retain_rows.max(1) as f64,
            test,
            student_teacher_kl: kl_sum / retain_rows.max(1) as f64,
            target_loss: Some(target_loss(&model, active, store, &schedule, targets)?),
        });
    }
    report.terminal_kl = report.epochs.last().map_or(0.0, |e| e.student_teacher_kl);

    store.remove_samples(targets)?;
    Ok((model, report))
}
