//! Byzantine-resilient, privacy-preserving peer-to-peer federated learning.
//!
//! Participants commit to their models with Pedersen commitments, order each coordinate
//! through masked pairwise comparisons, trim the `f` lowest and highest values, and
//! aggregate the survivors under pairwise pads that cancel in the sum. A cheating
//! contributor is identified by a per-contributor homomorphic check.

pub mod adversary;
pub mod commitment;
pub mod encoding;
pub mod field;
pub mod fl;
pub mod group;
pub mod protocol;
pub mod robust;
mod serde_dec;
pub mod transport;

pub use adversary::AttackStrategy;
pub use commitment::{CommitmentVector, Opening, Pedersen};
pub use encoding::{CodecParams, FixedPointCodec};
pub use group::{setup_group, GroupElement, GroupParams};
pub use protocol::{FailurePolicy, RoundTranscript, Simulation, SimulationConfig};
pub use transport::{Stage, Transport};
