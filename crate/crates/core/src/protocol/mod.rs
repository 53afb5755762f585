//! The four-stage round: commitment, masked comparison, sorting and trimming, and
//! cloaked aggregation with blame.

pub mod blame;
pub mod messages;
pub mod participant;
pub mod simulation;

use thiserror::Error;

use crate::commitment::CommitmentError;
use crate::encoding::EncodingError;
use crate::transport::TransportError;

pub use blame::BlameReport;
pub use messages::{CloakMsg, CommitMsg, ComparisonMsg, ExchangeMsg, Message, Outbox, RelationBatch};
pub use participant::{compare_pair, relation_from_masked, select_contributors, CoordinateSelection, Participant};
pub use simulation::{
    FailurePolicy, ParticipantView, RoundStatus, RoundTranscript, Simulation, SimulationConfig,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Commitment(#[from] CommitmentError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("model has {got} coordinates, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("got models for {got} participants, expected {expected}")]
    ParticipantCount { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
