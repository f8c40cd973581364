use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{replay_schedule, DistilStep, TestScores, UnlearnEpoch, UnlearnParams, UnlearningReport, EARLY_STOP_TOL};
use crate::nn::{cross_entropy_loss, kl_divergence, newton_step, sgd_step, DenseMatrix, GradientSet, MlpModel};
use crate::runtime::{ActiveParty, EmbeddingStore, EvalProbe, PartyId, UpdateRule};
use crate::{Error, Result};

/// Loss terms and gradient of `alpha * KL(student || teacher) + (1 - alpha) * CE`.
fn distil_objective(
    student: &MlpModel,
    inputs: &DenseMatrix,
    teacher_logits: &DenseMatrix,
    labels: &[usize],
    alpha: f64,
) -> Result<(DistilStep, GradientSet)> {
    let (logits, cache) = student.forward(inputs)?;
    let kl = kl_divergence(&logits, teacher_logits)?;
    let ce = cross_entropy_loss(&logits, labels)?;
    let mut upstream = kl.grad;
    upstream.scale(alpha);
    upstream.add_scaled(&ce.grad, 1.0 - alpha)?;
    let step = DistilStep {
        distil: kl.loss,
        pred: ce.loss,
        overall: alpha * kl.loss + (1.0 - alpha) * ce.loss,
    };
    Ok((step, student.backward(&cache, &upstream)?))
}

/// Replaces the active model with a student that never sees `target`'s
/// embeddings. The teacher is the current active model; each stored record
/// is replayed in key order, the teacher scoring the full `H^t` and the
/// student the pruned one. The store is pruned of `target` at the end.
pub fn unlearn_party_kd(
    active: &ActiveParty,
    store: &mut EmbeddingStore,
    target: PartyId,
    params: &UnlearnParams,
    probe: Option<&EvalProbe>,
) -> Result<(MlpModel, UnlearningReport)> {
    params.validate()?;
    let slice = store
        .slice_of(target)
        .ok_or_else(|| Error::Request(format!("party {target} has no slice in the store")))?;
    if store.layout().len() < 2 {
        return Err(Error::Request(format!(
            "party {target} is the only contributor to the store"
        )));
    }
    let teacher = &active.model;
    let drop: Vec<usize> = slice.range().collect();
    let mut dims = teacher.dims();
    dims[0] -= slice.width;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut student = MlpModel::random(&dims, &mut rng)?;

    let schedule = replay_schedule(store, params.distill_epochs.unwrap_or(store.epochs().len()))?;
    let mut report = UnlearningReport::new("party_kd");
    let mut previous: Option<f64> = None;
    for (e, &source) in schedule.iter().enumerate() {
        let (mut overall_sum, mut kl_sum, mut rows) = (0.0, 0.0, 0usize);
        for (_, rec) in store.epoch_records(source) {
            let teacher_logits = teacher.predict(&rec.concat)?;
            let pruned = rec.concat.drop_columns(&drop)?;
            let labels = active.labels_of(&rec.sample_ids)?;
            let (step, grads) =
                distil_objective(&student, &pruned, &teacher_logits, &labels, params.alpha)?;
            match params.update_rule {
                UpdateRule::Sgd => sgd_step(&mut student, &grads, params.lr)?,
                UpdateRule::Newton => {
                    newton_step(
                        &mut student,
                        |m: &MlpModel| {
                            let (s, g) =
                                distil_objective(m, &pruned, &teacher_logits, &labels, params.alpha)?;
                            Ok((s.overall, g))
                        },
                        params.damping,
                    )?;
                }
            }
            let n = rec.sample_ids.len();
            overall_sum += step.overall * n as f64;
            kl_sum += step.distil * n as f64;
            rows += n;
            report.steps.push(step);
        }
        let mean = overall_sum / rows.max(1) as f64;
        let test = match probe {
            Some(p) => {
                let ev = p.score(&student, Some(target))?;
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
            train_loss: mean,
            test,
            student_teacher_kl: kl_sum / rows.max(1) as f64,
            target_loss: None,
        });
        if previous.is_some_and(|p| (p - mean).abs() < EARLY_STOP_TOL) {
            break;
        }
        previous = Some(mean);
    }

    let latest = *schedule.iter().max().expect("non-empty schedule");
    let (mut kl_sum, mut rows) = (0.0, 0usize);
    for (_, rec) in store.epoch_records(latest) {
        let teacher_logits = teacher.predict(&rec.concat)?;
        let student_logits = student.predict(&rec.concat.drop_columns(&drop)?)?;
        kl_sum += kl_divergence(&student_logits, &teacher_logits)?.loss * rec.sample_ids.len() as f64;
        rows += rec.sample_ids.len();
    }
    report.terminal_kl = kl_sum / rows.max(1) as f64;

    store.remove_party(target)?;
    Ok((student, report))
}
