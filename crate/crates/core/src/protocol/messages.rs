//! Wire messages exchanged during a round, and the outbox plans that carry them.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::commitment::CommitmentVector;
use crate::robust::RelationClaim;
use crate::serde_dec;
use crate::transport::{Receiver, Stage};

/// Stage 1 broadcast: commitment to the claimed model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitMsg {
    pub commitment: CommitmentVector,
}

/// Stage 2 point-to-point message from `i` to `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeMsg {
    /// Commitment `V_ij` to the mask.
    pub mask_commitment: CommitmentVector,
    /// `c_ij = w_i + v_ij`.
    #[serde(with = "serde_dec::vec")]
    pub masked: Vec<BigUint>,
    /// `r^w_i + r^v_ij`.
    #[serde(with = "serde_dec::vec")]
    pub masked_randomness: Vec<BigUint>,
    #[serde(with = "serde_dec::vec")]
    pub s1: Vec<BigUint>,
    #[serde(with = "serde_dec::vec")]
    pub r_s1: Vec<BigUint>,
    #[serde(with = "serde_dec::vec")]
    pub s2: Vec<BigUint>,
    #[serde(with = "serde_dec::vec")]
    pub r_s2: Vec<BigUint>,
}

/// Stage 2 forward `m_ij`: sent by `i` about its verified peer `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonMsg {
    pub peer: usize,
    /// `d_ij = v_ij + c_ji`.
    #[serde(with = "serde_dec::vec")]
    pub d: Vec<BigUint>,
    #[serde(with = "serde_dec::vec")]
    pub r_d: Vec<BigUint>,
    /// `V_ij`, the sender's own mask commitment.
    pub own_mask: CommitmentVector,
    /// `V_ji`, the mask commitment received from the peer.
    pub peer_mask: CommitmentVector,
}

/// Stage 2 broadcast: all relations derived by one observer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationBatch {
    pub claims: Vec<RelationClaim>,
}

/// Stage 4 broadcast.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloakMsg {
    /// Cloaked model, defined where the sender is a contributor.
    #[serde(with = "serde_dec::opt_vec")]
    pub cloak: Vec<Option<BigUint>>,
    #[serde(with = "serde_dec::opt_vec")]
    pub cloak_randomness: Vec<Option<BigUint>>,
    /// `A_ij = C(a_ij, b_ij)` per peer.
    pub pad_a: BTreeMap<usize, CommitmentVector>,
    /// `B_ij = C(b_ij, r^b_ij)` per peer.
    pub pad_b: BTreeMap<usize, CommitmentVector>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Message {
    Commit(CommitMsg),
    Exchange(ExchangeMsg),
    Comparison(ComparisonMsg),
    Relations(RelationBatch),
    Cloak(CloakMsg),
}

impl Message {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("messages always serialize")
    }

    pub fn decode(bytes: &[u8]) -> Option<Message> {
        serde_json::from_slice(bytes).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub receiver: Receiver,
    pub message: Message,
}

/// Messages a participant intends to send in one stage, before serialization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outbox {
    pub stage: Stage,
    pub items: Vec<Outgoing>,
}

impl Outbox {
    pub fn new(stage: Stage) -> Self {
        Outbox {
            stage,
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, receiver: Receiver, message: Message) {
        self.items.push(Outgoing { receiver, message });
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
