//! Simulated communication fabric.
//!
//! Point-to-point channels are authenticated (the sender id cannot be forged) but carry
//! whatever the sender chooses, so a Byzantine sender may tell different peers different
//! things. The [`BftBus`] stands in for Byzantine-fault-tolerant log replication: one
//! global append-only log that every participant reads identically, accepting at most one
//! broadcast per `(sender, stage, round)`.
//!
//! Stages are separated by [`Transport::stage_barrier`], which models the synchronous
//! network: once a barrier is passed, late messages for that stage are rejected and the
//! stage's inboxes become readable.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{self, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Stage 1 commitment broadcast.
    Commit,
    /// Stage 2 pairwise masked-model exchange (point-to-point).
    Exchange,
    /// Stage 2 forwarding of comparison messages (point-to-point).
    Compare,
    /// Stage 2 relation broadcast.
    Relation,
    /// Stage 4 cloaked-model broadcast.
    Cloak,
    /// Stage 4 re-run after blamed contributors are excluded.
    CloakRetry,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Commit,
        Stage::Exchange,
        Stage::Compare,
        Stage::Relation,
        Stage::Cloak,
        Stage::CloakRetry,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Commit => "commit",
            Stage::Exchange => "exchange",
            Stage::Compare => "compare",
            Stage::Relation => "relation",
            Stage::Cloak => "cloak",
            Stage::CloakRetry => "cloak_retry",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Receiver {
    Peer(usize),
    Broadcast,
}

impl Serialize for Receiver {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Receiver::Peer(id) => s.serialize_u64(*id as u64),
            Receiver::Broadcast => s.serialize_str("broadcast"),
        }
    }
}

impl<'de> Deserialize<'de> for Receiver {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(usize),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(id) => Ok(Receiver::Peer(id)),
            Raw::Tag(t) if t == "broadcast" => Ok(Receiver::Broadcast),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("bad receiver {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: usize,
    pub receiver: Receiver,
    pub stage: Stage,
    pub round: u64,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
}

mod b64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("participant id {0} is out of range")]
    InvalidParticipant(usize),
    #[error("participant {0} cannot send to itself")]
    SelfSend(usize),
    #[error("stage {stage} of round {round} is closed")]
    StageClosed { round: u64, stage: Stage },
    #[error("stage {stage} of round {round} has not passed its barrier")]
    StageOpen { round: u64, stage: Stage },
    #[error("participant {sender} already broadcast in stage {stage} of round {round}")]
    Duplicate { sender: usize, stage: Stage, round: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Receipt {
    pub seq: u64,
}

/// Append-only broadcast log shared by all participants.
#[derive(Debug, Default)]
pub struct BftBus {
    log: Vec<Envelope>,
    accepted: HashSet<(usize, Stage, u64)>,
    cursors: Vec<usize>,
}

impl BftBus {
    pub fn new(participants: usize) -> Self {
        BftBus {
            log: Vec::new(),
            accepted: HashSet::new(),
            cursors: vec![0; participants],
        }
    }

    /// Appends `env` unless its sender already broadcast in the same stage and round.
    pub fn append(&mut self, env: Envelope) -> Result<usize, TransportError> {
        let key = (env.sender, env.stage, env.round);
        if !self.accepted.insert(key) {
            return Err(TransportError::Duplicate {
                sender: env.sender,
                stage: env.stage,
                round: env.round,
            });
        }
        self.log.push(env);
        Ok(self.log.len() - 1)
    }

    pub fn log(&self) -> &[Envelope] {
        &self.log
    }

    /// Entries not yet delivered to `participant`; advances its cursor.
    pub fn read_new(&mut self, participant: usize) -> &[Envelope] {
        let start = self.cursors[participant];
        self.cursors[participant] = self.log.len();
        &self.log[start..]
    }

    pub fn entries(&self, round: u64, stage: Stage) -> impl Iterator<Item = &Envelope> {
        self.log
            .iter()
            .filter(move |e| e.round == round && e.stage == stage)
    }
}

/// Point-to-point inboxes, the broadcast bus, and the stage barriers.
#[derive(Debug)]
pub struct Transport {
    participants: usize,
    bus: BftBus,
    inboxes: Vec<BTreeMap<(u64, Stage), Vec<Envelope>>>,
    closed: BTreeSet<(u64, Stage)>,
    counts: BTreeMap<(u64, Stage), usize>,
    trace: Option<Vec<Envelope>>,
    seq: u64,
}

impl Transport {
    pub fn new(participants: usize) -> Self {
        Transport {
            participants,
            bus: BftBus::new(participants),
            inboxes: vec![BTreeMap::new(); participants],
            closed: BTreeSet::new(),
            counts: BTreeMap::new(),
            trace: None,
            seq: 0,
        }
    }

    /// Like [`Transport::new`], additionally recording every accepted envelope.
    pub fn with_trace(participants: usize) -> Self {
        let mut t = Transport::new(participants);
        t.trace = Some(Vec::new());
        t
    }

    pub fn participants(&self) -> usize {
        self.participants
    }

    fn check_id(&self, id: usize) -> Result<(), TransportError> {
        if id < self.participants {
            Ok(())
        } else {
            Err(TransportError::InvalidParticipant(id))
        }
    }

    fn check_open(&self, round: u64, stage: Stage) -> Result<(), TransportError> {
        if self.closed.contains(&(round, stage)) {
            Err(TransportError::StageClosed { round, stage })
        } else {
            Ok(())
        }
    }

    fn record(&mut self, env: &Envelope) -> Receipt {
        *self.counts.entry((env.round, env.stage)).or_default() += 1;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(env.clone());
        }
        self.seq += 1;
        Receipt { seq: self.seq - 1 }
    }

    pub fn p2p_send(
        &mut self,
        from: usize,
        to: usize,
        round: u64,
        stage: Stage,
        payload: Vec<u8>,
    ) -> Result<Receipt, TransportError> {
        self.check_id(from)?;
        self.check_id(to)?;
        if from == to {
            return Err(TransportError::SelfSend(from));
        }
        self.check_open(round, stage)?;
        let env = Envelope {
            sender: from,
            receiver: Receiver::Peer(to),
            stage,
            round,
            payload,
        };
        let receipt = self.record(&env);
        self.inboxes[to].entry((round, stage)).or_default().push(env);
        Ok(receipt)
    }

    pub fn bft_broadcast(
        &mut self,
        from: usize,
        round: u64,
        stage: Stage,
        payload: Vec<u8>,
    ) -> Result<Receipt, TransportError> {
        self.check_id(from)?;
        self.check_open(round, stage)?;
        let env = Envelope {
            sender: from,
            receiver: Receiver::Broadcast,
            stage,
            round,
            payload,
        };
        self.bus.append(env.clone())?;
        Ok(self.record(&env))
    }

    /// Closes `(round, stage)` for sending and opens it for reading. Idempotent.
    pub fn stage_barrier(&mut self, round: u64, stage: Stage) {
        self.closed.insert((round, stage));
    }

    pub fn is_closed(&self, round: u64, stage: Stage) -> bool {
        self.closed.contains(&(round, stage))
    }

    /// Point-to-point messages delivered to `who` in a closed stage, in send order.
    pub fn inbox(&self, who: usize, round: u64, stage: Stage) -> Result<&[Envelope], TransportError> {
        self.check_id(who)?;
        if !self.is_closed(round, stage) {
            return Err(TransportError::StageOpen { round, stage });
        }
        Ok(self.inboxes[who]
            .get(&(round, stage))
            .map(Vec::as_slice)
            .unwrap_or(&[]))
    }

    /// Bus entries of a closed stage, in log order.
    pub fn bus_entries(&self, round: u64, stage: Stage) -> Result<Vec<&Envelope>, TransportError> {
        if !self.is_closed(round, stage) {
            return Err(TransportError::StageOpen { round, stage });
        }
        Ok(self.bus.entries(round, stage).collect())
    }

    pub fn bus(&self) -> &BftBus {
        &self.bus
    }

    pub fn bus_mut(&mut self) -> &mut BftBus {
        &mut self.bus
    }

    pub fn message_count(&self, round: u64, stage: Stage) -> usize {
        self.counts.get(&(round, stage)).copied().unwrap_or(0)
    }

    /// Drops point-to-point inboxes of a finished round. The bus log is kept.
    pub fn retire_round(&mut self, round: u64) {
        for inbox in &mut self.inboxes {
            inbox.retain(|(r, _), _| *r != round);
        }
    }

    pub fn trace(&self) -> Option<&[Envelope]> {
        self.trace.as_deref()
    }

    /// Writes the recorded trace as JSON lines, payloads in base64.
    pub fn write_trace<W: Write>(&self, mut out: W) -> io::Result<()> {
        for env in self.trace.iter().flatten() {
            serde_json::to_writer(&mut out, env)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
