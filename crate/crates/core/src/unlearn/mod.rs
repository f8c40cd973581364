//! Unlearning engines that run on the party that owns the state and send no
//! messages: a passive party via distillation on stored embeddings, a subset
//! of a party's features via embedding distillation, and samples via
//! gradient ascent on stored embeddings. Plus the retrain benchmark.

mod features_kd;
mod party_kd;
mod retrain;
mod samples_ga;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use crate::data::SampleId;
use crate::nn::DEFAULT_DAMPING;
use crate::runtime::{EmbeddingStore, PartyId, UpdateRule, VflSession};
use crate::{Error, Result};

pub use features_kd::unlearn_features_kd;
pub use party_kd::unlearn_party_kd;
pub use retrain::{exclusion_for, retrain_benchmark};
pub use samples_ga::unlearn_samples_ga;

/// Default gradient-ascent rate on the target loss.
pub const DEFAULT_LAMBDA: f64 = 1e-2;
pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_U_EP: usize = 5;
/// Distillation stops once the epoch mean loss moves by less than this.
pub const EARLY_STOP_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleTarget {
    /// Batch indices of the most recent stored epoch.
    Batches(Vec<u32>),
    Ids(BTreeSet<SampleId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestKind {
    Party(PartyId),
    Features {
        party: PartyId,
        /// Global feature indices.
        features: BTreeSet<usize>,
    },
    Samples(SampleTarget),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlearnRequest {
    pub kind: RequestKind,
    pub issued_at_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnParams {
    pub alpha: f64,
    /// Student (or active model) learning rate.
    pub lr: f64,
    pub lambda: f64,
    pub u_ep: usize,
    /// Distillation epochs; `None` means one per elapsed training epoch.
    pub distill_epochs: Option<usize>,
    pub update_rule: UpdateRule,
    pub damping: f64,
    /// Batch size for feature distillation over local data.
    pub batch_size: usize,
    /// Seeds student initialisation and local batch plans.
    pub seed: u64,
}

impl Default for UnlearnParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            lr: 1e-2,
            lambda: DEFAULT_LAMBDA,
            u_ep: DEFAULT_U_EP,
            distill_epochs: None,
            update_rule: UpdateRule::Sgd,
            damping: DEFAULT_DAMPING,
            batch_size: 512,
            seed: 0,
        }
    }
}

impl UnlearnParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.distill_epochs == Some(0) {
            return Err(Error::config("distill_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Test scores of the unlearned model after one unlearning epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestScores {
    pub loss: f64,
    pub f1: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnEpoch {
    /// 1-based unlearning epoch.
    pub epoch: usize,
    /// Mean training objective over the epoch.
    pub train_loss: f64,
    /// Present when the engine runs at the active party.
    pub test: Option<TestScores>,
    /// Mean student-teacher KL over the epoch.
    pub student_teacher_kl: f64,
    /// Mean cross-entropy on target rows (sample unlearning only).
    pub target_loss: Option<f64>,
}

/// Loss terms of one distillation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistilStep {
    pub distil: f64,
    pub pred: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearningReport {
    pub engine: &'static str,
    pub epochs: Vec<UnlearnEpoch>,
    pub steps: Vec<DistilStep>,
    /// KL between final student and teacher over all replayed data.
    pub terminal_kl: f64,
    /// Target-row cross-entropy before the first ascent step.
    pub target_loss_before: Option<f64>,
    pub messages_during_unlearn: u64,
    pub wall_time: Duration,
}

impl UnlearningReport {
    pub(crate) fn new(engine: &'static str) -> Self {
        Self {
            engine,
            epochs: Vec::new(),
            steps: Vec::new(),
            terminal_kl: 0.0,
            target_loss_before: None,
            messages_during_unlearn: 0,
            wall_time: Duration::ZERO,
        }
    }

    pub fn terminal_test(&self) -> Option<TestScores> {
        self.epochs.last().and_then(|e| e.test)
    }
}

/// Picks which stored epochs to replay: the last `count` when the store has
/// enough, otherwise the stored epochs cycled in order.
pub(crate) fn replay_schedule(store: &EmbeddingStore, count: usize) -> Result<Vec<u32>> {
    let stored: Vec<u32> = store.epochs().into_iter().collect();
    if stored.is_empty() {
        return Err(Error::Request("the embedding store is empty".into()));
    }
    if count <= stored.len() {
        Ok(stored[stored.len() - count..].to_vec())
    } else {
        Ok(stored.iter().copied().cycle().take(count).collect())
    }
}

/// Maps a sample request to ids, checking that every id is in the store.
pub fn resolve_samples(store: &EmbeddingStore, target: &SampleTarget) -> Result<BTreeSet<SampleId>> {
    let ids: BTreeSet<SampleId> = match target {
        SampleTarget::Batches(batches) => {
            let latest = *store
                .epochs()
                .last()
                .ok_or_else(|| Error::Request("the embedding store is empty".into()))?;
            let mut ids = BTreeSet::new();
            for &b in batches {
                let rec = store
                    .get(crate::runtime::BatchKey { epoch: latest, batch: b })
                    .ok_or_else(|| {
                        Error::Request(format!("batch {b} is not stored for epoch {latest}"))
                    })?;
                ids.extend(rec.sample_ids.iter().copied());
            }
            ids
        }
        SampleTarget::Ids(ids) => {
            if let Some(missing) = ids.iter().find(|&&id| !store.contains_sample(id)) {
                return Err(Error::Request(format!("sample {missing} is not in the store")));
            }
            ids.clone()
        }
    };
    if ids.is_empty() {
        return Err(Error::Request("no target samples".into()));
    }
    Ok(ids)
}

impl VflSession {
    /// Runs the engine for `request` at the party that owns the state and
    /// installs the result. The message tally is compared across the call.
    pub fn unlearn(
        &mut self,
        request: &UnlearnRequest,
        params: &UnlearnParams,
    ) -> Result<UnlearningReport> {
        params.validate()?;
        let before = self.bus.tally();
        let started = Instant::now();
        let probe = self.last_probe().cloned();
        let mut report = match &request.kind {
            RequestKind::Party(target) => {
                if *target == self.federation.active.id() {
                    return Err(Error::Request(format!(
                        "party {target} holds the labels and cannot be unlearned"
                    )));
                }
                let (student, report) = unlearn_party_kd(
                    &self.federation.active,
                    &mut self.store,
                    *target,
                    params,
                    probe.as_ref(),
                )?;
                self.federation.active.deregister(*target, student)?;
                self.federation.drop_passive(*target)?;
                report
            }
            RequestKind::Features { party, features } => {
                let distill = params.distill_epochs.unwrap_or(request.issued_at_epoch.max(1));
                let passive = self
                    .federation
                    .passive(*party)
                    .ok_or_else(|| Error::Request(format!("unknown party {party}")))?;
                let mut p = params.clone();
                p.distill_epochs = Some(distill);
                let (student, report) = unlearn_features_kd(passive, features, &p)?;
                self.federation
                    .passive_mut(*party)
                    .expect("party exists")
                    .replace_features(features, student)?;
                report
            }
            RequestKind::Samples(target) => {
                let ids = resolve_samples(&self.store, target)?;
                let (model, report) = unlearn_samples_ga(
                    &self.federation.active,
                    &mut self.store,
                    &ids,
                    params,
                    probe.as_ref(),
                )?;
                self.federation.active.model = model;
                self.federation.active.exclude_samples(ids);
                report
            }
        };
        report.wall_time = started.elapsed();
        report.messages_during_unlearn = self.bus.tally().since(&before);
        Ok(report)
    }
}
