//! Feature importance by ablation: zero one test column, rescore, and record
//! the metric drop.

use std::fmt;
use std::str::FromStr;

use crate::runtime::{concat_embeddings, score_logits, Evaluation, Federation, PartyId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMetric {
    F1,
    Auc,
}

impl AblationMetric {
    fn pick(self, ev: &Evaluation) -> f64 {
        match self {
            AblationMetric::F1 => ev.f1,
            AblationMetric::Auc => ev.auc,
        }
    }
}

impl fmt::Display for AblationMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMetric::F1 => "f1",
            AblationMetric::Auc => "auc",
        })
    }
}

impl FromStr for AblationMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(AblationMetric::F1),
            "auc" => Ok(AblationMetric::Auc),
            other => Err(Error::config("metric", format!("expected f1 or auc, got {other:?}"))),
        }
    }
}

/// Importance of each global feature: baseline metric minus the metric with
/// that feature replaced by zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationScore {
    pub metric: AblationMetric,
    pub baseline: f64,
    /// `(global feature, owner, importance)`, ascending feature index.
    pub scores: Vec<(usize, PartyId, f64)>,
}

impl AblationScore {
    /// Features of `party` from most to least important; ties keep index
    /// order.
    pub fn ranked_for(&self, party: PartyId) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self
            .scores
            .iter()
            .filter(|(_, p, _)| *p == party)
            .map(|&(f, _, s)| (f, s))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    pub fn score_of(&self, feature: usize) -> Option<f64> {
        self.scores
            .iter()
            .find(|(f, _, _)| *f == feature)
            .map(|&(_, _, s)| s)
    }
}

/// Scores every feature of every passive party on the test split with the
/// current models.
pub fn feature_ablation(federation: &Federation, metric: AblationMetric) -> Result<AblationScore> {
    let clean = federation.test_embeddings()?;
    let score = |embeddings: Vec<(PartyId, crate::nn::DenseMatrix)>| -> Result<f64> {
        let concat = concat_embeddings(&federation.active, embeddings)?;
        let logits = federation.active.model.predict(&concat)?;
        Ok(metric.pick(&score_logits(logits, federation.active.test_labels())?))
    };
    let baseline = score(clean.clone())?;
    let mut scores = Vec::new();
    for (k, party) in federation.passives.iter().enumerate() {
        for (col, &feature) in party.owned_features().iter().enumerate() {
            let mut x = party.test().features().clone();
            for r in 0..x.rows() {
                x.set(r, col, 0.0);
            }
            let mut embeddings = clean.clone();
            embeddings[k].1 = party.model.predict(&x)?;
            scores.push((feature, party.id(), baseline - score(embeddings)?));
        }
    }
    scores.sort_by_key(|&(f, _, _)| f);
    Ok(AblationScore {
        metric,
        baseline,
        scores,
    })
}
