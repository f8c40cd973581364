//! Joint training: the per-batch embedding, loss and gradient round trip.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};

use super::message::{Message, MessageBus, MessageKind, PartyId};
use super::party::{ActiveParty, Federation};
use super::store::{BatchKey, EmbeddingStore, PartySlice};
use crate::data::{make_batch_plan, SampleId};
use crate::metrics::{auc_score, f1_score, MetricsRecord, Phase};
use crate::nn::{
    cross_entropy_loss, newton_step, sgd_step, softmax_rows, DenseMatrix, MlpModel,
    DEFAULT_DAMPING,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    Sgd,
    Newton,
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateRule::Sgd => "sgd",
            UpdateRule::Newton => "newton",
        })
    }
}

impl FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(UpdateRule::Sgd),
            "newton" => Ok(UpdateRule::Newton),
            other => Err(Error::config("update_rule", format!("expected sgd or newton, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VflConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_active: f64,
    pub lr_passive: f64,
    pub update_rule: UpdateRule,
    pub damping: f64,
    /// Seeds model initialisation and batch plans.
    pub seed: u64,
    /// Seeds the train/test split; kept fixed across a method run and its
    /// retrain benchmark so both are scored on the same test samples.
    pub data_seed: u64,
    /// Hidden width of passive models; 0 means a single linear layer.
    pub passive_hidden: usize,
    pub embedding_width: usize,
    /// Hidden width of the active model; 0 means a single linear layer.
    pub active_hidden: usize,
    /// The active party owns no features and only holds labels.
    pub label_only_active: bool,
    /// Cap on the number of stored epochs; `None` keeps everything.
    pub retain_epochs: Option<usize>,
}

impl Default for VflConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 512,
            lr_active: 1e-2,
            lr_passive: 1e-2,
            update_rule: UpdateRule::Sgd,
            damping: DEFAULT_DAMPING,
            seed: 0,
            data_seed: 0,
            passive_hidden: 8,
            embedding_width: 8,
            active_hidden: 32,
            label_only_active: false,
            retain_epochs: None,
        }
    }
}

impl VflConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for (field, v) in [("lr_active", self.lr_active), ("lr_passive", self.lr_passive)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::config("damping", format!("must be non-negative, got {}", self.damping)));
        }
        if self.embedding_width == 0 {
            return Err(Error::config("embedding_width", "must be at least 1"));
        }
        if self.retain_epochs == Some(0) {
            return Err(Error::config("retain_epochs", "must keep at least one epoch"));
        }
        Ok(())
    }

    pub fn step_settings(&self) -> StepSettings {
        StepSettings {
            rule: self.update_rule,
            lr_active: self.lr_active,
            lr_passive: self.lr_passive,
            damping: self.damping,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub rule: UpdateRule,
    pub lr_active: f64,
    pub lr_passive: f64,
    pub damping: f64,
}

/// Result of the active party's half of one batch.
#[derive(Debug, Clone)]
pub struct ActiveStep {
    /// Mean cross-entropy over the rows that entered the loss.
    pub loss: f64,
    pub rows_used: usize,
    /// dL/dH_k for every registered party, ascending party id.
    pub gradients: Vec<(PartyId, DenseMatrix)>,
}

/// Orders embeddings by party id and checks them against the registry.
fn ordered_embeddings(
    active: &ActiveParty,
    mut embeddings: Vec<(PartyId, DenseMatrix)>,
) -> Result<Vec<(PartyId, DenseMatrix)>> {
    embeddings.sort_by_key(|(p, _)| *p);
    let got: Vec<PartyId> = embeddings.iter().map(|(p, _)| *p).collect();
    let want: Vec<PartyId> = active.registry().iter().map(|(p, _)| *p).collect();
    if got != want {
        return Err(Error::Protocol(format!(
            "expected embeddings from {want:?}, received {got:?}"
        )));
    }
    for ((p, h), &(_, width)) in embeddings.iter().zip(active.registry()) {
        if h.cols() != width {
            return Err(Error::Protocol(format!(
                "party {p} sent width {} but declared {width}",
                h.cols()
            )));
        }
    }
    let rows = embeddings[0].1.rows();
    if embeddings.iter().any(|(_, h)| h.rows() != rows) {
        return Err(Error::Protocol("embedding row counts differ across parties".into()));
    }
    Ok(embeddings)
}

/// Concatenates embeddings in ascending party id order.
pub fn concat_embeddings(
    active: &ActiveParty,
    embeddings: Vec<(PartyId, DenseMatrix)>,
) -> Result<DenseMatrix> {
    let ordered = ordered_embeddings(active, embeddings)?;
    let parts: Vec<&DenseMatrix> = ordered.iter().map(|(_, h)| h).collect();
    DenseMatrix::hconcat(&parts)
}

/// Mean cross-entropy of `model` on `inputs` and its gradient set, including
/// the input gradient.
pub fn ce_objective(
    model: &MlpModel,
    inputs: &DenseMatrix,
    labels: &[usize],
) -> Result<(f64, crate::nn::GradientSet)> {
    let (logits, cache) = model.forward(inputs)?;
    let ce = cross_entropy_loss(&logits, labels)?;
    Ok((ce.loss, model.backward(&cache, &ce.grad)?))
}

/// The active party's work for one batch: concatenate, persist `H^t`, take
/// the loss, update, and slice dL/dH per party. Rows of forgotten samples
/// are neither stored nor counted in the loss; their gradients are zero.
pub fn active_batch_step(
    active: &mut ActiveParty,
    store: Option<(&mut EmbeddingStore, BatchKey)>,
    embeddings: Vec<(PartyId, DenseMatrix)>,
    sample_ids: &[SampleId],
    settings: &StepSettings,
) -> Result<ActiveStep> {
    let concat = concat_embeddings(active, embeddings)?;
    if concat.rows() != sample_ids.len() {
        return Err(Error::Protocol(format!(
            "{} embedding rows for {} sample ids",
            concat.rows(),
            sample_ids.len()
        )));
    }
    let layout = active.layout();
    let kept: Vec<usize> = (0..sample_ids.len())
        .filter(|&i| !active.excluded().contains(&sample_ids[i]))
        .collect();
    let zero_slices = |rows: usize| -> Vec<(PartyId, DenseMatrix)> {
        layout
            .iter()
            .map(|s| (s.party, DenseMatrix::zeros(rows, s.width)))
            .collect()
    };
    if kept.is_empty() {
        return Ok(ActiveStep {
            loss: 0.0,
            rows_used: 0,
            gradients: zero_slices(sample_ids.len()),
        });
    }
    let kept_ids: Vec<SampleId> = kept.iter().map(|&i| sample_ids[i]).collect();
    let inputs = if kept.len() == sample_ids.len() {
        concat
    } else {
        concat.select_rows(&kept)?
    };
    let labels = active.labels_of(&kept_ids)?;
    if let Some((store, key)) = store {
        store.put(key, inputs.clone(), &layout, kept_ids)?;
    }

    let (loss, mut grads) = ce_objective(&active.model, &inputs, &labels)?;
    let input_grad = grads
        .input_gradient
        .take()
        .ok_or_else(|| Error::State("backward returned no input gradient".into()))?;
    match settings.rule {
        UpdateRule::Sgd => sgd_step(&mut active.model, &grads, settings.lr_active)?,
        UpdateRule::Newton => {
            newton_step(
                &mut active.model,
                |m: &MlpModel| ce_objective(m, &inputs, &labels),
                settings.damping,
            )?;
        }
    }

    let full = if kept.len() == sample_ids.len() {
        input_grad
    } else {
        let mut full = DenseMatrix::zeros(sample_ids.len(), input_grad.cols());
        for (src, &dst) in kept.iter().enumerate() {
            full.row_mut(dst).copy_from_slice(input_grad.row(src));
        }
        full
    };
    let gradients = layout
        .iter()
        .map(|s| Ok((s.party, full.column_range(s.range())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ActiveStep {
        loss,
        rows_used: kept.len(),
        gradients,
    })
}

/// Test-split scores of a model.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub f1: f64,
    pub auc: f64,
    pub logits: DenseMatrix,
}

/// Scores logits against labels: mean cross-entropy, F1 of the argmax and
/// AUC of the softmax. An undefined AUC is reported as NaN.
pub fn score_logits(logits: DenseMatrix, labels: &[usize]) -> Result<Evaluation> {
    let loss = cross_entropy_loss(&logits, labels)?.loss;
    let f1 = f1_score(&logits.argmax_rows(), labels)?;
    let auc = match auc_score(&softmax_rows(&logits), labels) {
        Ok(a) => a,
        Err(Error::UndefinedAuc(why)) => {
            warn!("AUC undefined on this split: {why}");
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        loss,
        f1,
        auc,
        logits,
    })
}

/// Test-split embeddings held by the active party from its last evaluation,
/// in store layout. Lets unlearning engines report test metrics without
/// asking passive parties for anything.
#[derive(Debug, Clone)]
pub struct EvalProbe {
    pub concat: DenseMatrix,
    pub layout: Vec<PartySlice>,
    pub labels: Vec<usize>,
}

impl EvalProbe {
    /// Scores `model` on the probe with `drop`'s columns removed.
    pub fn score(&self, model: &MlpModel, drop: Option<PartyId>) -> Result<Evaluation> {
        let inputs = match drop.and_then(|p| self.layout.iter().find(|s| s.party == p)) {
            Some(slice) => self
                .concat
                .drop_columns(&slice.range().collect::<Vec<_>>())?,
            None => self.concat.clone(),
        };
        score_logits(model.predict(&inputs)?, &self.labels)
    }
}

/// A live VFL run: parties, the active party's store, and the transport.
/// Cloning forks the run, e.g. to try several requests from one state.
#[derive(Debug, Clone)]
pub struct VflSession {
    pub federation: Federation,
    pub store: EmbeddingStore,
    pub bus: MessageBus,
    config: VflConfig,
    history: Vec<MetricsRecord>,
    epoch: usize,
    probe: Option<EvalProbe>,
}

impl VflSession {
    pub fn new(federation: Federation, config: VflConfig) -> Result<Self> {
        config.validate()?;
        let bus = MessageBus::new(federation.active.id());
        let store = EmbeddingStore::new(config.batch_size).with_retention(config.retain_epochs);
        Ok(Self {
            federation,
            store,
            bus,
            config,
            history: Vec::new(),
            epoch: 0,
            probe: None,
        })
    }

    /// Keeps a copy of every training message on the bus.
    pub fn capture_messages(mut self) -> Self {
        self.bus = MessageBus::new(self.federation.active.id()).with_capture();
        self
    }

    pub fn config(&self) -> &VflConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.history
    }

    pub fn history_mut(&mut self) -> &mut Vec<MetricsRecord> {
        &mut self.history
    }

    /// Runs one full batch plan, then evaluates on the test split.
    pub fn run_epoch(&mut self, phase: Phase) -> Result<MetricsRecord> {
        let epoch = self.epoch + 1;
        let n = self.federation.active.train_ids().len();
        // every party derives this same plan from (seed, epoch)
        let plan = make_batch_plan(n, self.config.batch_size, epoch, self.config.seed)?;
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        for (b, batch) in plan.batches.iter().enumerate() {
            let step = self.batch_round(epoch, b, batch)?;
            loss_sum += step.loss * step.rows_used as f64;
            rows += step.rows_used;
        }
        self.epoch = epoch;
        let eval = self.evaluate()?;
        let record = MetricsRecord {
            epoch,
            phase,
            train_loss: if rows == 0 { 0.0 } else { loss_sum / rows as f64 },
            test_loss: eval.loss,
            f1: eval.f1,
            auc: eval.auc,
            mia_accuracy: None,
        };
        debug!(
            "epoch {epoch}: train {:.4} test {:.4} f1 {:.3} auc {:.3}",
            record.train_loss, record.test_loss, record.f1, record.auc
        );
        self.history.push(record.clone());
        Ok(record)
    }

    /// Runs epochs until `last_epoch` have completed.
    pub fn train_until(&mut self, last_epoch: usize, phase: Phase) -> Result<()> {
        while self.epoch < last_epoch {
            self.run_epoch(phase)?;
        }
        Ok(())
    }

    fn batch_round(&mut self, epoch: usize, b: usize, rows: &[usize]) -> Result<ActiveStep> {
        let Self {
            federation,
            store,
            bus,
            config,
            ..
        } = self;
        let active_id = federation.active.id();
        let mut pending = Vec::with_capacity(federation.passives.len());
        for p in &federation.passives {
            let x = p.train().features().select_rows(rows)?;
            let (h, cache) = p.model.forward(&x)?;
            bus.send(Message {
                kind: MessageKind::EmbeddingUp,
                from: p.id(),
                to: active_id,
                epoch: epoch as u32,
                batch_index: b as u32,
                payload: h,
            })?;
            pending.push((x, cache));
        }

        let inbox: Vec<(PartyId, DenseMatrix)> = bus
            .drain_for(active_id)
            .into_iter()
            .map(|m| match m.kind {
                MessageKind::EmbeddingUp => Ok((m.from, m.payload)),
                MessageKind::GradientDown => {
                    Err(Error::Protocol("gradient queued for the active party".into()))
                }
            })
            .collect::<Result<_>>()?;
        let ids: Vec<SampleId> = rows
            .iter()
            .map(|&i| federation.active.train_ids()[i])
            .collect();
        let settings = config.step_settings();
        let step = active_batch_step(
            &mut federation.active,
            Some((store, BatchKey::new(epoch, b))),
            inbox,
            &ids,
            &settings,
        )?;

        for (party, grad) in &step.gradients {
            bus.send(Message {
                kind: MessageKind::GradientDown,
                from: active_id,
                to: *party,
                epoch: epoch as u32,
                batch_index: b as u32,
                payload: grad.clone(),
            })?;
        }
        for (p, (x, cache)) in federation.passives.iter_mut().zip(pending) {
            let mut inbox = bus.drain_for(p.id());
            if inbox.len() != 1 || inbox[0].kind != MessageKind::GradientDown {
                return Err(Error::Protocol(format!(
                    "party {} expected one gradient, got {} messages",
                    p.id(),
                    inbox.len()
                )));
            }
            let msg = inbox.pop().expect("one message");
            p.apply_gradient(&x, &cache, &msg.payload, &settings)?;
        }
        Ok(step)
    }

    /// Passive parties embed the test split with their current models; the
    /// active party scores the concatenation. The store is not consulted.
    pub fn evaluate(&mut self) -> Result<Evaluation> {
        let embeddings = self.federation.test_embeddings()?;
        for _ in &embeddings {
            self.bus.record_eval_upload();
        }
        let active = &self.federation.active;
        let concat = concat_embeddings(active, embeddings)?;
        let logits = active.model.predict(&concat)?;
        self.probe = Some(EvalProbe {
            concat,
            layout: active.layout(),
            labels: active.test_labels().to_vec(),
        });
        score_logits(logits, active.test_labels())
    }

    /// Test embeddings the active party received at the last evaluation.
    pub fn last_probe(&self) -> Option<&EvalProbe> {
        self.probe.as_ref()
    }
}

/// Trains for `config.epochs` epochs from scratch.
pub fn train_vfl(federation: Federation, config: &VflConfig) -> Result<VflSession> {
    let mut session = VflSession::new(federation, config.clone())?;
    session.train_until(config.epochs, Phase::Train)?;
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, VerticalSplit};
    use crate::runtime::{Exclusion, Federation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_party_active() -> (ActiveParty, Vec<SampleId>) {
        let ds = generate_synthetic(20, 4, 2, 3).unwrap();
        let (train, test) = ds.train_test_split(0.8, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = MlpModel::random(&[8, 6, 2], &mut rng).unwrap();
        let active =
            ActiveParty::new(PartyId(1), model, &train, &test, vec![(PartyId(0), 3), (PartyId(1), 5)])
                .unwrap();
        let ids = train.sample_ids()[..6].to_vec();
        (active, ids)
    }

    fn embeddings(rows: usize) -> Vec<(PartyId, DenseMatrix)> {
        vec![
            (PartyId(0), DenseMatrix::from_fn(rows, 3, |r, c| (r as f64 - c as f64) * 0.3)),
            (PartyId(1), DenseMatrix::from_fn(rows, 5, |r, c| ((r * c) as f64).sin())),
        ]
    }

    fn sgd() -> StepSettings {
        VflConfig::default().step_settings()
    }

    #[test]
    fn gradient_slices_match_declared_widths_and_finite_differences() {
        let (mut active, ids) = two_party_active();
        let before = active.model.clone();
        let labels = active.labels_of(&ids).unwrap();
        let embs = embeddings(ids.len());
        let concat = concat_embeddings(&active, embs.clone()).unwrap();
        let step = active_batch_step(&mut active, None, embs, &ids, &sgd()).unwrap();
        assert_eq!(step.gradients[0].1.shape(), (6, 3));
        assert_eq!(step.gradients[1].1.shape(), (6, 5));

        let h = 1e-6;
        for (k, offset) in [(0usize, 0usize), (1, 3)] {
            let g = &step.gradients[k].1;
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    let mut plus = concat.clone();
                    plus.set(r, offset + c, concat.get(r, offset + c) + h);
                    let mut minus = concat.clone();
                    minus.set(r, offset + c, concat.get(r, offset + c) - h);
                    let lp = ce_objective(&before, &plus, &labels).unwrap().0;
                    let lm = ce_objective(&before, &minus, &labels).unwrap().0;
                    let fd = (lp - lm) / (2.0 * h);
                    assert!((fd - g.get(r, c)).abs() < 1e-7, "party {k} ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn arrival_order_does_not_matter() {
        let (a1, ids) = two_party_active();
        let mut a2 = a1.clone();
        let mut a1 = a1;
        let mut rev = embeddings(ids.len());
        rev.reverse();
        let s1 = active_batch_step(&mut a1, None, embeddings(ids.len()), &ids, &sgd()).unwrap();
        let s2 = active_batch_step(&mut a2, None, rev, &ids, &sgd()).unwrap();
        assert_eq!(s1.loss, s2.loss);
        assert_eq!(a1.model, a2.model);
        for (g1, g2) in s1.gradients.iter().zip(&s2.gradients) {
            assert_eq!(g1.0, g2.0);
            assert_eq!(g1.1, g2.1);
        }
    }

    #[test]
    fn malformed_embeddings_are_protocol_errors() {
        let (mut active, ids) = two_party_active();
        let mut missing = embeddings(ids.len());
        missing.pop();
        assert!(matches!(
            active_batch_step(&mut active, None, missing, &ids, &sgd()),
            Err(Error::Protocol(_))
        ));
        let mut wide = embeddings(ids.len());
        wide[0].1 = DenseMatrix::zeros(ids.len(), 4);
        assert!(matches!(
            active_batch_step(&mut active, None, wide, &ids, &sgd()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn excluded_rows_get_zero_gradient_and_are_not_stored() {
        let (mut active, ids) = two_party_active();
        active.exclude_samples([ids[0], ids[2]]);
        let mut store = EmbeddingStore::new(6);
        let step = active_batch_step(
            &mut active,
            Some((&mut store, BatchKey::new(1, 0))),
            embeddings(ids.len()),
            &ids,
            &sgd(),
        )
        .unwrap();
        assert_eq!(step.rows_used, 4);
        for (_, g) in &step.gradients {
            assert!(g.row(0).iter().chain(g.row(2)).all(|&v| v == 0.0));
            assert!(g.row(1).iter().any(|&v| v != 0.0));
        }
        let rec = store.get(BatchKey::new(1, 0)).unwrap();
        assert_eq!(rec.sample_ids, vec![ids[1], ids[3], ids[4], ids[5]]);
    }

    fn session(epochs: usize) -> VflSession {
        let ds = generate_synthetic(100, 6, 2, 2).unwrap();
        let split = VerticalSplit::equal(6, 3).unwrap();
        let cfg = VflConfig {
            epochs,
            batch_size: 16,
            ..VflConfig::default()
        };
        let fed = Federation::build(&ds, &split, &cfg, &Exclusion::none()).unwrap();
        VflSession::new(fed, cfg).unwrap()
    }

    #[test]
    fn zero_epochs_leave_the_store_empty() {
        let mut s = session(0);
        s.train_until(0, Phase::Train).unwrap();
        assert!(s.store.is_empty());
        assert_eq!(s.bus.tally().total(), 0);
    }

    #[test]
    fn every_batch_is_stored_and_exchanges_k_messages_each_way() {
        let mut s = session(2);
        s.train_until(2, Phase::Train).unwrap();
        // 80 train rows in batches of 16
        let batches = 5;
        assert_eq!(s.store.len(), 2 * batches);
        let train: Vec<SampleId> = s.federation.active.train_ids().to_vec();
        for epoch in 1..=2u32 {
            let mut seen: Vec<SampleId> = s
                .store
                .epoch_records(epoch)
                .flat_map(|(_, rec)| rec.sample_ids.clone())
                .collect();
            seen.sort();
            assert_eq!(seen, train);
        }
        for (_, rec) in s.store.records() {
            assert_eq!(rec.concat.cols(), 24);
            assert_eq!(rec.concat.rows(), rec.sample_ids.len());
        }
        let tally = s.bus.tally();
        assert_eq!(tally.embedding_up, 3 * batches as u64 * 2);
        assert_eq!(tally.gradient_down, 3 * batches as u64 * 2);
        assert_eq!(s.history().len(), 2);
        assert_eq!(s.epoch(), 2);
    }

    #[test]
    fn stored_embeddings_are_the_pre_update_forward_pass() {
        let mut s = session(1);
        let rows = make_batch_plan(80, 16, 1, s.config().seed).unwrap().batches[0].clone();
        let expected: Vec<DenseMatrix> = s
            .federation
            .passives
            .iter()
            .map(|p| p.model.predict(&p.train().features().select_rows(&rows).unwrap()).unwrap())
            .collect();
        s.run_epoch(Phase::Train).unwrap();
        let parts: Vec<&DenseMatrix> = expected.iter().collect();
        let want = DenseMatrix::hconcat(&parts).unwrap();
        assert_eq!(s.store.get(BatchKey::new(1, 0)).unwrap().concat, want);
    }
}
