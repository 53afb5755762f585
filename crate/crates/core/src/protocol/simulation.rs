//! Deterministic round driver.
//!
//! Every stage runs all participants (in parallel), then hands their outboxes to the
//! transport in participant-id order, then closes the stage. Parallelism never affects the
//! transcript.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::blame::BlameReport;
use super::messages::Outbox;
use super::participant::{Aggregate, Context, CoordinateSelection, Participant};
use super::ProtocolError;
use crate::adversary::{Adversary, AttackStrategy, InterceptContext};
use crate::commitment::Pedersen;
use crate::encoding::{CodecParams, FixedPointCodec};
use crate::group::GroupParams;
use crate::serde_dec;
use crate::transport::{Envelope, Receiver, Stage, Transport};

/// What benign participants do when the aggregate check fails.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Keep the previous global model and report the round as halted.
    #[default]
    Halt,
    /// Drop everyone implicated by blame, re-sort, and cloak once more.
    ExcludeRetry,
}

#[derive(Clone, Debug)]
pub struct SimulationConfig {
    pub n: usize,
    pub f: usize,
    /// Model dimension.
    pub m: usize,
    pub group: GroupParams,
    pub codec: CodecParams,
    pub policy: FailurePolicy,
    pub seed: u64,
    /// Record every envelope for later export.
    pub trace: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Completed,
    Halted,
}

/// One benign participant's result for a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantView {
    /// Accepted relations as `(coordinate, smaller, larger)`.
    pub accepted: Vec<(usize, usize, usize)>,
    pub selections: Vec<CoordinateSelection>,
    pub status: RoundStatus,
    pub retried: bool,
    /// Participants dropped before the retry.
    pub excluded: BTreeSet<usize>,
    pub failed_coordinates: Vec<usize>,
    pub blame: BlameReport,
    /// Contributor sums in `Z_q`; `null` where the coordinate was not aggregated.
    #[serde(with = "serde_dec::opt_vec")]
    pub aggregate: Vec<Option<BigUint>>,
    pub global_model: Vec<f64>,
    /// Peers whose masked model failed verification. Local knowledge, never broadcast.
    pub suspects: BTreeSet<usize>,
    /// Pairwise coordinate differences this participant learned while comparing.
    pub revealed_differences: usize,
}

impl ParticipantView {
    pub fn non_aggregatable(&self) -> usize {
        self.selections.iter().filter(|s| !s.is_aggregatable()).count()
    }

    /// Agreement-relevant content: everything derived from broadcast data.
    fn agrees_with(&self, other: &ParticipantView) -> bool {
        let bits = |w: &[f64]| w.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.global_model) == bits(&other.global_model)
            && self.accepted == other.accepted
            && self.selections == other.selections
            && self.status == other.status
            && self.blame == other.blame
            && self.aggregate == other.aggregate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTranscript {
    pub round: u64,
    pub message_counts: BTreeMap<Stage, usize>,
    pub byzantine: Vec<usize>,
    /// Models actually committed, indexed by participant. Harness ground truth.
    pub claimed_models: Vec<Vec<f64>>,
    /// Benign participants' results, by id.
    pub views: BTreeMap<usize, ParticipantView>,
}

impl RoundTranscript {
    /// The lowest-id benign view.
    pub fn consensus(&self) -> Option<&ParticipantView> {
        self.views.values().next()
    }

    /// Number of benign views that disagree with [`RoundTranscript::consensus`].
    pub fn agreement_violations(&self) -> usize {
        match self.consensus() {
            None => 0,
            Some(first) => self.views.values().filter(|v| !v.agrees_with(first)).count(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("transcripts always serialize")
    }
}

fn derive_seed(tag: &[u8], seed: u64, id: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(seed.to_le_bytes());
    h.update((id as u64).to_le_bytes());
    h.finalize().into()
}

pub struct Simulation {
    ctx: Arc<Context>,
    participants: Vec<Participant>,
    adversaries: BTreeMap<usize, Adversary>,
    transport: Transport,
    policy: FailurePolicy,
}

impl Simulation {
    pub fn new(
        config: &SimulationConfig,
        adversaries: BTreeMap<usize, AttackStrategy>,
    ) -> Result<Self, ProtocolError> {
        if config.n < 2 {
            return Err(ProtocolError::InvalidConfig("need at least two participants".into()));
        }
        if config.m == 0 {
            return Err(ProtocolError::InvalidConfig("model dimension must be positive".into()));
        }
        if let Some(&bad) = adversaries.keys().find(|&&i| i >= config.n) {
            return Err(ProtocolError::InvalidConfig(format!(
                "adversary id {bad} out of range for {} participants",
                config.n
            )));
        }
        let codec = FixedPointCodec::new(config.codec, config.group.q(), config.n)?;
        let ctx = Arc::new(Context {
            n: config.n,
            f: config.f,
            m: config.m,
            pedersen: Pedersen::new(config.group.clone()),
            codec,
        });
        let participants = (0..config.n)
            .map(|i| {
                let rng = ChaCha20Rng::from_seed(derive_seed(b"brave/participant", config.seed, i));
                Participant::new(i, Arc::clone(&ctx), rng)
            })
            .collect();
        let adversaries = adversaries
            .into_iter()
            .filter(|(_, s)| !s.is_none())
            .map(|(i, s)| {
                let seed = derive_seed(b"brave/adversary", config.seed, i);
                (i, Adversary::new(s, u64::from_le_bytes(seed[..8].try_into().expect("8 bytes"))))
            })
            .collect();
        let transport = if config.trace {
            Transport::with_trace(config.n)
        } else {
            Transport::new(config.n)
        };
        Ok(Simulation {
            ctx,
            participants,
            adversaries,
            transport,
            policy: config.policy,
        })
    }

    pub fn context(&self) -> &Context {
        &self.ctx
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    pub fn is_byzantine(&self, i: usize) -> bool {
        self.adversaries.contains_key(&i)
    }

    pub fn participant(&self, i: usize) -> &Participant {
        &self.participants[i]
    }

    /// Sends each outbox in participant order, then closes `stage`.
    ///
    /// Transport rejections of Byzantine sends (e.g. duplicate broadcasts) are dropped;
    /// for benign senders they are bugs and surface as errors.
    fn deliver(&mut self, round: u64, stage: Stage, outboxes: Vec<Outbox>) -> Result<(), ProtocolError> {
        let q = self.ctx.q().clone();
        for (i, plan) in outboxes.into_iter().enumerate() {
            let plan = match self.adversaries.get_mut(&i) {
                Some(adv) => adv.intercept(
                    &InterceptContext {
                        id: i,
                        n: self.ctx.n,
                        m: self.ctx.m,
                        q: &q,
                    },
                    plan,
                ),
                None => plan,
            };
            debug_assert_eq!(plan.stage, stage);
            for item in plan.items {
                let payload = item.message.encode();
                let sent = match item.receiver {
                    Receiver::Broadcast => self.transport.bft_broadcast(i, round, stage, payload),
                    Receiver::Peer(j) => self.transport.p2p_send(i, j, round, stage, payload),
                };
                if let Err(e) = sent {
                    if !self.adversaries.contains_key(&i) {
                        return Err(e.into());
                    }
                }
            }
        }
        self.transport.stage_barrier(round, stage);
        Ok(())
    }

    fn bus(&self, round: u64, stage: Stage) -> Result<Vec<Envelope>, ProtocolError> {
        Ok(self
            .transport
            .bus_entries(round, stage)?
            .into_iter()
            .cloned()
            .collect())
    }

    /// Runs all four stages for one round.
    ///
    /// `trained` holds every participant's locally trained model; Byzantine participants
    /// replace theirs according to their strategy (clamped to the codec bound) before
    /// committing. Coordinates that cannot be aggregated keep their `previous` value.
    pub fn run_round(
        &mut self,
        round: u64,
        trained: &[Vec<f64>],
        previous: &[f64],
    ) -> Result<RoundTranscript, ProtocolError> {
        let (n, m) = (self.ctx.n, self.ctx.m);
        if trained.len() != n {
            return Err(ProtocolError::ParticipantCount {
                expected: n,
                got: trained.len(),
            });
        }
        if previous.len() != m {
            return Err(ProtocolError::DimensionMismatch {
                expected: m,
                got: previous.len(),
            });
        }
        let bound = self.ctx.codec.bound();
        let claimed: Vec<Vec<f64>> = trained
            .iter()
            .enumerate()
            .map(|(i, w)| match self.adversaries.get_mut(&i) {
                Some(adv) => adv
                    .claimed_model(w)
                    .into_iter()
                    .map(|x| if x.is_nan() { 0.0 } else { x.clamp(-bound, bound) })
                    .collect(),
                None => w.clone(),
            })
            .collect();

        self.participants.par_iter_mut().for_each(Participant::begin_round);

        let outs = self
            .participants
            .par_iter_mut()
            .zip(&claimed)
            .map(|(p, w)| p.stage1_commit(w))
            .collect::<Result<Vec<_>, _>>()?;
        self.deliver(round, Stage::Commit, outs)?;
        let bus = self.bus(round, Stage::Commit)?;
        let refs: Vec<&Envelope> = bus.iter().collect();
        self.participants
            .par_iter_mut()
            .for_each(|p| p.receive_commitments(&refs));

        let outs = self
            .participants
            .par_iter_mut()
            .map(Participant::stage2_exchange)
            .collect();
        self.deliver(round, Stage::Exchange, outs)?;

        let transport = &self.transport;
        let outs = self
            .participants
            .par_iter_mut()
            .map(|p| {
                let inbox = transport.inbox(p.id(), round, Stage::Exchange)?;
                Ok(p.stage2_verify_and_forward(inbox))
            })
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        self.deliver(round, Stage::Compare, outs)?;

        let transport = &self.transport;
        let outs = self
            .participants
            .par_iter_mut()
            .map(|p| {
                let inbox = transport.inbox(p.id(), round, Stage::Compare)?;
                Ok(p.stage2_compare(inbox))
            })
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        self.deliver(round, Stage::Relation, outs)?;

        let bus = self.bus(round, Stage::Relation)?;
        let refs: Vec<&Envelope> = bus.iter().collect();
        self.participants
            .par_iter_mut()
            .for_each(|p| p.stage3_select(&refs));

        let outs = self
            .participants
            .par_iter_mut()
            .map(|p| p.stage4_cloak(Stage::Cloak))
            .collect();
        self.deliver(round, Stage::Cloak, outs)?;
        let bus = self.bus(round, Stage::Cloak)?;
        let refs: Vec<&Envelope> = bus.iter().collect();
        let first: Vec<Aggregate> = self
            .participants
            .par_iter()
            .map(|p| p.stage4_aggregate(&refs))
            .collect();

        let mut excluded: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        let mut second: Vec<Option<Aggregate>> = vec![None; n];
        if self.policy == FailurePolicy::ExcludeRetry && first.iter().any(|a| !a.succeeded()) {
            let outs = self
                .participants
                .par_iter_mut()
                .zip(&first)
                .zip(&mut excluded)
                .map(|((p, agg), ex)| {
                    if agg.succeeded() {
                        return Outbox::new(Stage::CloakRetry);
                    }
                    *ex = agg.blame.implicated();
                    p.reselect_without(ex);
                    p.stage4_cloak(Stage::CloakRetry)
                })
                .collect();
            self.deliver(round, Stage::CloakRetry, outs)?;
            let bus = self.bus(round, Stage::CloakRetry)?;
            let refs: Vec<&Envelope> = bus.iter().collect();
            second = self
                .participants
                .par_iter()
                .zip(&first)
                .map(|(p, agg)| (!agg.succeeded()).then(|| p.stage4_aggregate(&refs)))
                .collect();
        }

        let mut views = BTreeMap::new();
        for (i, p) in self.participants.iter().enumerate() {
            if self.adversaries.contains_key(&i) {
                continue;
            }
            let retried = second[i].is_some();
            let mut blame = first[i].blame.clone();
            let last = match &second[i] {
                Some(agg) => {
                    blame.merge(agg.blame.clone());
                    agg
                }
                None => &first[i],
            };
            let status = if last.succeeded() {
                RoundStatus::Completed
            } else {
                RoundStatus::Halted
            };
            let global_model = match status {
                RoundStatus::Halted => previous.to_vec(),
                RoundStatus::Completed => (0..m)
                    .map(|k| match &last.sums[k] {
                        Some(sum) => self
                            .ctx
                            .codec
                            .decode_mean(sum, p.selection()[k].contributors.len())
                            .expect("aggregated coordinates have contributors"),
                        None => previous[k],
                    })
                    .collect(),
            };
            views.insert(
                i,
                ParticipantView {
                    accepted: p.accepted().map(|a| a.triples()).unwrap_or_default(),
                    selections: p.selection().to_vec(),
                    status,
                    retried,
                    excluded: excluded[i].clone(),
                    failed_coordinates: last.failed.clone(),
                    blame,
                    aggregate: last.sums.clone(),
                    global_model,
                    suspects: p.suspects().clone(),
                    revealed_differences: p.revealed_differences(),
                },
            );
        }

        let message_counts = Stage::ALL
            .into_iter()
            .map(|s| (s, self.transport.message_count(round, s)))
            .filter(|(_, c)| *c > 0)
            .collect();
        self.transport.retire_round(round);
        Ok(RoundTranscript {
            round,
            message_counts,
            byzantine: self.adversaries.keys().copied().collect(),
            claimed_models: claimed,
            views,
        })
    }
}
