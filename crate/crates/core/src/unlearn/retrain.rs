use std::collections::BTreeSet;

use super::{RequestKind, UnlearnRequest};
use crate::data::{Dataset, SampleId, VerticalSplit};
use crate::runtime::{train_vfl, Exclusion, Federation, VflConfig, VflSession};
use crate::Result;

/// The exclusion matching a request. Sample requests need their ids resolved
/// beforehand, since batch indices only mean something for a trained store.
pub fn exclusion_for(request: &UnlearnRequest, samples: &BTreeSet<SampleId>) -> Exclusion {
    let mut ex = Exclusion::none();
    match &request.kind {
        RequestKind::Party(p) => {
            ex.parties.insert(*p);
        }
        RequestKind::Features { features, .. } => ex.features.extend(features),
        RequestKind::Samples(_) => ex.samples.extend(samples),
    }
    ex
}

/// Trains from scratch with `seed` on the data minus `exclusion`. Party ids
/// and the train/test split are the same as the run being compared against.
pub fn retrain_benchmark(
    dataset: &Dataset,
    split: &VerticalSplit,
    config: &VflConfig,
    exclusion: &Exclusion,
    seed: u64,
) -> Result<VflSession> {
    let config = VflConfig {
        seed,
        ..config.clone()
    };
    let federation = Federation::build(dataset, split, &config, exclusion)?;
    train_vfl(federation, &config)
}
