//! The VFL protocol: parties, typed messages, the per-batch round trip and
//! the active party's embedding store.

mod message;
mod party;
mod store;
mod train;

pub use message::{Message, MessageBus, MessageKind, MessageTally, PartyId};
pub use party::{mlp_dims, ActiveParty, Exclusion, Federation, PassiveParty};
pub use store::{
    check_layout, layout_from_widths, BatchKey, EmbeddingStore, PartySlice, StoredBatch,
    STORE_VERSION,
};
pub use train::{
    active_batch_step, ce_objective, concat_embeddings, score_logits, train_vfl, ActiveStep,
    EvalProbe, Evaluation, StepSettings, UpdateRule, VflConfig, VflSession,
};
