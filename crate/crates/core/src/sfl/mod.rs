//! Split federated learning: client/server halves, aggregation, rounds.

mod aggregate;
mod client;
mod record;
mod round;
mod server;

pub use aggregate::{aggregate, Aggregator, AggregatorKind};
pub use client::{client_backward, client_forward, ClientState, ClientTrace};
pub use record::{feature_matrix, Batch, SmashedRecord};
pub use round::{
    evaluate, predict, DefenseHook, DefenseOutput, DetectionStats, Evaluation, HookContext,
    IdentityHook, PoolScope, RoundReport, SflConfig, SubstitutionCounts, System,
};
pub use server::{server_train_step, ServerState, ServerStep};
