//! Per-participant protocol logic. Each stage method consumes what the transport delivered
//! for the previous stage and returns the [`Outbox`] to send next.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use num_bigint::BigUint;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::blame::{blame, BlameReport, CloakView};
use super::messages::{
    CloakMsg, CommitMsg, ComparisonMsg, ExchangeMsg, Message, Outbox, RelationBatch,
};
use super::ProtocolError;
use crate::commitment::{CommitmentVector, Opening, Pedersen};
use crate::encoding::FixedPointCodec;
use crate::field;
use crate::robust::{
    count_and_accept, topo_sort, AcceptedRelations, Relation, RelationClaim, RelationGraph,
};
use crate::transport::{Envelope, Receiver, Stage};

/// Parameters shared by every participant of a simulation.
#[derive(Debug)]
pub struct Context {
    pub n: usize,
    pub f: usize,
    pub m: usize,
    pub pedersen: Pedersen,
    pub codec: FixedPointCodec,
}

impl Context {
    pub fn q(&self) -> &BigUint {
        self.pedersen.q()
    }
}

/// Outcome of sorting and trimming one coordinate.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinateSelection {
    /// Ascending sequence produced by the sort (the longest chain when `partial`).
    pub sorted: Vec<usize>,
    pub partial: bool,
    /// Members of a cycle among accepted relations, if one was found.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle: Option<Vec<usize>>,
    /// Positions `f..len-f` of `sorted`; empty when the coordinate cannot be aggregated.
    pub contributors: Vec<usize>,
}

impl CoordinateSelection {
    pub fn is_aggregatable(&self) -> bool {
        !self.contributors.is_empty()
    }

    /// Contributors below and above `who`, or `None` if `who` does not contribute.
    pub fn partition(&self, who: usize) -> Option<(&[usize], &[usize])> {
        let pos = self.contributors.iter().position(|&c| c == who)?;
        Some((&self.contributors[..pos], &self.contributors[pos + 1..]))
    }
}

/// Sorts one coordinate's relation graph and trims `f` from each end.
pub fn select_contributors(g: &RelationGraph, f: usize) -> CoordinateSelection {
    match topo_sort(g) {
        Err(cycle) => CoordinateSelection {
            cycle: Some(cycle.members),
            ..Default::default()
        },
        Ok(seq) => {
            let len = seq.order.len();
            let contributors = if len > 2 * f {
                seq.order[f..len - f].to_vec()
            } else {
                Vec::new()
            };
            CoordinateSelection {
                sorted: seq.order,
                partial: seq.partial,
                cycle: None,
                contributors,
            }
        }
    }
}

/// Orders `w_p` and `w_q` from their symmetric maskings.
///
/// `d_pq - d_qp = w_q - w_p (mod q)`; its centered representative gives the sign. Equal
/// values are ordered by participant index.
pub fn relation_from_masked(
    d_pq: &BigUint,
    d_qp: &BigUint,
    modulus: &BigUint,
    p: usize,
    q: usize,
) -> Relation {
    let delta = field::centered(&field::sub_mod(d_pq, d_qp, modulus), modulus);
    match delta.sign() {
        num_bigint::Sign::Plus => Relation::Less,
        num_bigint::Sign::Minus => Relation::Greater,
        num_bigint::Sign::NoSign if p < q => Relation::Less,
        num_bigint::Sign::NoSign => Relation::Greater,
    }
}

/// Checks the forwarded pair `m_pq`, `m_qp` against the commitments and derives the
/// per-coordinate relation between the claimed models of `p` and `q`.
///
/// Returns `None` when the mask commitments carried by the two messages disagree or either
/// masked difference fails to open.
pub fn compare_pair(
    ped: &Pedersen,
    (p, w_p, m_pq): (usize, &CommitmentVector, &ComparisonMsg),
    (q, w_q, m_qp): (usize, &CommitmentVector, &ComparisonMsg),
) -> Option<Vec<Relation>> {
    let m = w_p.len();
    let shaped = |x: &ComparisonMsg| {
        x.d.len() == m && x.r_d.len() == m && x.own_mask.len() == m && x.peer_mask.len() == m
    };
    if w_q.len() != m || !shaped(m_pq) || !shaped(m_qp) {
        return None;
    }
    if m_pq.own_mask != m_qp.peer_mask || m_pq.peer_mask != m_qp.own_mask {
        return None;
    }
    let masks = ped.hom_combine(&m_pq.own_mask, &m_qp.own_mask).ok()?;
    let expect_pq = ped.hom_combine(&masks, w_q).ok()?;
    let expect_qp = ped.hom_combine(&masks, w_p).ok()?;
    if ped.commit(&m_pq.d, &m_pq.r_d).ok()? != expect_pq
        || ped.commit(&m_qp.d, &m_qp.r_d).ok()? != expect_qp
    {
        return None;
    }
    Some(
        m_pq.d
            .iter()
            .zip(&m_qp.d)
            .map(|(a, b)| relation_from_masked(a, b, ped.q(), p, q))
            .collect(),
    )
}

/// Per-coordinate cloak `w - sum_{lower} a + sum_{upper} a (mod q)`.
pub fn cloak_value(
    value: &BigUint,
    lower: &[&BigUint],
    upper: &[&BigUint],
    q: &BigUint,
) -> BigUint {
    let mut acc = value % q;
    for a in lower {
        acc = field::sub_mod(&acc, a, q);
    }
    for a in upper {
        acc = field::add_mod(&acc, a, q);
    }
    acc
}

#[derive(Clone, Debug)]
struct PeerSecrets {
    v: Vec<BigUint>,
    r_v: Vec<BigUint>,
    v_commit: CommitmentVector,
    s1: Vec<BigUint>,
    s2: Vec<BigUint>,
    r_s2: Vec<BigUint>,
}

#[derive(Clone, Debug)]
struct PadShare {
    s1: Vec<BigUint>,
    s2: Vec<BigUint>,
    r_s2: Vec<BigUint>,
}

#[derive(Clone, Debug)]
struct Pads {
    a: Vec<BigUint>,
    b: Vec<BigUint>,
    commit_a: CommitmentVector,
    commit_b: CommitmentVector,
}

#[derive(Debug, Default)]
struct RoundState {
    opening: Option<Opening>,
    commitments: Vec<Option<CommitmentVector>>,
    secrets: BTreeMap<usize, PeerSecrets>,
    shares: BTreeMap<usize, PadShare>,
    pads: Option<BTreeMap<usize, Pads>>,
    suspects: BTreeSet<usize>,
    revealed_differences: usize,
    accepted: Option<AcceptedRelations>,
    selection: Vec<CoordinateSelection>,
}

/// Result of summing cloaks and checking them against the commitments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Aggregate {
    /// Verified contributor sum per coordinate; `None` where not aggregated.
    pub sums: Vec<Option<BigUint>>,
    /// Coordinates whose aggregate check failed.
    pub failed: Vec<usize>,
    pub blame: BlameReport,
}

impl Aggregate {
    pub fn succeeded(&self) -> bool {
        self.failed.is_empty()
    }
}

pub struct Participant {
    id: usize,
    ctx: Arc<Context>,
    rng: ChaCha20Rng,
    state: RoundState,
}

impl Participant {
    pub fn new(id: usize, ctx: Arc<Context>, rng: ChaCha20Rng) -> Self {
        Participant {
            id,
            ctx,
            rng,
            state: RoundState::default(),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn context(&self) -> &Context {
        &self.ctx
    }

    pub fn begin_round(&mut self) {
        self.state = RoundState {
            commitments: vec![None; self.ctx.n],
            ..Default::default()
        };
    }

    /// Encodes the claimed model, commits to it and broadcasts the commitment.
    pub fn stage1_commit(&mut self, claimed: &[f64]) -> Result<Outbox, ProtocolError> {
        let ctx = Arc::clone(&self.ctx);
        if claimed.len() != ctx.m {
            return Err(ProtocolError::DimensionMismatch {
                expected: ctx.m,
                got: claimed.len(),
            });
        }
        let w = ctx.codec.encode(claimed)?;
        let r = field::sample_vec(&mut self.rng, ctx.q(), ctx.m);
        let commitment = ctx.pedersen.commit(&w, &r)?;
        self.state.opening = Some(Opening::new(w, r));
        let mut out = Outbox::new(Stage::Commit);
        out.push(Receiver::Broadcast, Message::Commit(CommitMsg { commitment }));
        Ok(out)
    }

    pub fn opening(&self) -> Option<&Opening> {
        self.state.opening.as_ref()
    }

    /// Records the Stage 1 commitments read from the bus.
    pub fn receive_commitments(&mut self, entries: &[&Envelope]) {
        for env in entries {
            if let Some(Message::Commit(msg)) = Message::decode(&env.payload) {
                let slot = &mut self.state.commitments[env.sender];
                if slot.is_none() && msg.commitment.len() == self.ctx.m {
                    *slot = Some(msg.commitment);
                }
            }
        }
    }

    pub fn commitments(&self) -> &[Option<CommitmentVector>] {
        &self.state.commitments
    }

    /// Sends a masked copy of the model plus pad shares to every committed peer.
    pub fn stage2_exchange(&mut self) -> Outbox {
        let ctx = Arc::clone(&self.ctx);
        let mut out = Outbox::new(Stage::Exchange);
        let Some(opening) = self.state.opening.clone() else {
            return out;
        };
        let (q, m) = (ctx.q(), ctx.m);
        for j in 0..ctx.n {
            if j == self.id || self.state.commitments[j].is_none() {
                continue;
            }
            let v = field::sample_vec(&mut self.rng, q, m);
            let r_v = field::sample_vec(&mut self.rng, q, m);
            let s1 = field::sample_vec(&mut self.rng, q, m);
            let r_s1 = field::sample_vec(&mut self.rng, q, m);
            let s2 = field::sample_vec(&mut self.rng, q, m);
            let r_s2 = field::sample_vec(&mut self.rng, q, m);
            let v_commit = ctx.pedersen.commit(&v, &r_v).expect("equal lengths");
            let msg = ExchangeMsg {
                mask_commitment: v_commit.clone(),
                masked: field::add_vec(&opening.value, &v, q),
                masked_randomness: field::add_vec(&opening.randomness, &r_v, q),
                s1: s1.clone(),
                r_s1,
                s2: s2.clone(),
                r_s2: r_s2.clone(),
            };
            self.state.secrets.insert(
                j,
                PeerSecrets {
                    v,
                    r_v,
                    v_commit,
                    s1,
                    s2,
                    r_s2,
                },
            );
            out.push(Receiver::Peer(j), Message::Exchange(msg));
        }
        out
    }

    /// Verifies each peer's masked model against its commitment and forwards the
    /// resulting masked difference to every third party.
    ///
    /// Pad shares are kept even when the masked model fails verification, since they do
    /// not depend on it. Failing peers are only recorded locally.
    pub fn stage2_verify_and_forward(&mut self, inbox: &[Envelope]) -> Outbox {
        let ctx = Arc::clone(&self.ctx);
        let (q, m) = (ctx.q(), ctx.m);
        let mut out = Outbox::new(Stage::Compare);
        let mut seen = BTreeSet::new();
        for env in inbox {
            let j = env.sender;
            if !seen.insert(j) {
                continue;
            }
            let Some(Message::Exchange(msg)) = Message::decode(&env.payload) else {
                self.state.suspects.insert(j);
                continue;
            };
            let shaped = [
                &msg.masked,
                &msg.masked_randomness,
                &msg.s1,
                &msg.r_s1,
                &msg.s2,
                &msg.r_s2,
            ]
            .iter()
            .all(|v| v.len() == m && v.iter().all(|x| x < q))
                && msg.mask_commitment.len() == m;
            if !shaped {
                self.state.suspects.insert(j);
                continue;
            }
            self.state.shares.insert(
                j,
                PadShare {
                    s1: msg.s1.clone(),
                    s2: msg.s2.clone(),
                    r_s2: msg.r_s2.clone(),
                },
            );
            let (Some(w_j), Some(mine)) = (&self.state.commitments[j], self.state.secrets.get(&j))
            else {
                self.state.suspects.insert(j);
                continue;
            };
            let expected = ctx
                .pedersen
                .hom_combine(w_j, &msg.mask_commitment)
                .expect("lengths checked");
            let opened = ctx
                .pedersen
                .commit(&msg.masked, &msg.masked_randomness)
                .expect("lengths checked");
            if opened != expected {
                self.state.suspects.insert(j);
                continue;
            }
            let fwd = ComparisonMsg {
                peer: j,
                d: field::add_vec(&mine.v, &msg.masked, q),
                r_d: field::add_vec(&mine.r_v, &msg.masked_randomness, q),
                own_mask: mine.v_commit.clone(),
                peer_mask: msg.mask_commitment,
            };
            for k in 0..ctx.n {
                if k != self.id && k != j {
                    out.push(Receiver::Peer(k), Message::Comparison(fwd.clone()));
                }
            }
        }
        out
    }

    /// Derives relations for every pair of other participants whose forwarded messages
    /// both verify, and broadcasts them as one batch.
    pub fn stage2_compare(&mut self, inbox: &[Envelope]) -> Outbox {
        let ctx = Arc::clone(&self.ctx);
        let mut forwarded: BTreeMap<(usize, usize), ComparisonMsg> = BTreeMap::new();
        for env in inbox {
            if let Some(Message::Comparison(msg)) = Message::decode(&env.payload) {
                let (p, q) = (env.sender, msg.peer);
                if p != q && q < ctx.n && q != self.id {
                    forwarded.entry((p, q)).or_insert(msg);
                }
            }
        }
        let mut claims = Vec::new();
        for (&(p, q), m_pq) in forwarded.range(..) {
            if p > q {
                continue;
            }
            let Some(m_qp) = forwarded.get(&(q, p)) else {
                continue;
            };
            let (Some(w_p), Some(w_q)) = (&self.state.commitments[p], &self.state.commitments[q])
            else {
                continue;
            };
            if let Some(relations) = compare_pair(&ctx.pedersen, (p, w_p, m_pq), (q, w_q, m_qp)) {
                self.state.revealed_differences += relations.len();
                claims.push(RelationClaim {
                    reporter: self.id,
                    p,
                    q,
                    relations,
                });
            }
        }
        let mut out = Outbox::new(Stage::Relation);
        out.push(Receiver::Broadcast, Message::Relations(RelationBatch { claims }));
        out
    }

    /// Counts the broadcast claims, accepts relations with more than `2f` distinct
    /// reporters, and selects contributors per coordinate.
    pub fn stage3_select(&mut self, entries: &[&Envelope]) {
        let mut claims = Vec::new();
        for env in entries {
            if let Some(Message::Relations(batch)) = Message::decode(&env.payload) {
                claims.extend(batch.claims.into_iter().filter(|c| {
                    c.reporter == env.sender && c.p < self.ctx.n && c.q < self.ctx.n
                }));
            }
        }
        let accepted = count_and_accept(&claims, self.ctx.f, self.ctx.m);
        self.state.selection = (0..self.ctx.m)
            .map(|k| select_contributors(&accepted.graph(k), self.ctx.f))
            .collect();
        self.state.accepted = Some(accepted);
    }

    /// Re-sorts every coordinate with `excluded` removed from the relation graphs.
    pub fn reselect_without(&mut self, excluded: &BTreeSet<usize>) {
        let Some(accepted) = &self.state.accepted else {
            return;
        };
        self.state.selection = (0..self.ctx.m)
            .map(|k| select_contributors(&accepted.graph(k).without(excluded), self.ctx.f))
            .collect();
    }

    pub fn accepted(&self) -> Option<&AcceptedRelations> {
        self.state.accepted.as_ref()
    }

    pub fn selection(&self) -> &[CoordinateSelection] {
        &self.state.selection
    }

    pub fn suspects(&self) -> &BTreeSet<usize> {
        &self.state.suspects
    }

    pub fn revealed_differences(&self) -> usize {
        self.state.revealed_differences
    }

    fn pads(&mut self) -> &BTreeMap<usize, Pads> {
        if self.state.pads.is_none() {
            let ctx = &self.ctx;
            let q = ctx.q();
            let zeros = field::zeros(ctx.m);
            let pads = self
                .state
                .secrets
                .iter()
                .map(|(&j, mine)| {
                    let share = self.state.shares.get(&j);
                    let theirs = |f: fn(&PadShare) -> &Vec<BigUint>| share.map(f).unwrap_or(&zeros);
                    let a = field::add_vec(&mine.s1, theirs(|s| &s.s1), q);
                    let b = field::add_vec(&mine.s2, theirs(|s| &s.s2), q);
                    let r_b = field::add_vec(&mine.r_s2, theirs(|s| &s.r_s2), q);
                    let commit_a = ctx.pedersen.commit(&a, &b).expect("equal lengths");
                    let commit_b = ctx.pedersen.commit(&b, &r_b).expect("equal lengths");
                    (
                        j,
                        Pads {
                            a,
                            b,
                            commit_a,
                            commit_b,
                        },
                    )
                })
                .collect();
            self.state.pads = Some(pads);
        }
        self.state.pads.as_ref().expect("just filled")
    }

    /// Broadcasts the cloaked model on coordinates this participant contributes to, along
    /// with its pad commitments.
    pub fn stage4_cloak(&mut self, stage: Stage) -> Outbox {
        let ctx = Arc::clone(&self.ctx);
        let q = ctx.q();
        let id = self.id;
        let opening = self.state.opening.clone();
        let selection = self.state.selection.clone();
        let pads = self.pads();
        let mut cloak = vec![None; ctx.m];
        let mut cloak_randomness = vec![None; ctx.m];
        if let Some(opening) = opening {
            for (k, sel) in selection.iter().enumerate() {
                let Some((lower, upper)) = sel.partition(id) else {
                    continue;
                };
                let pick = |peers: &[usize], which: fn(&Pads) -> &Vec<BigUint>| -> Option<Vec<&BigUint>> {
                    peers.iter().map(|h| pads.get(h).map(|p| &which(p)[k])).collect()
                };
                // a contributor lacking pads with a co-contributor withholds its cloak
                let (Some(la), Some(ua), Some(lb), Some(ub)) = (
                    pick(lower, |p| &p.a),
                    pick(upper, |p| &p.a),
                    pick(lower, |p| &p.b),
                    pick(upper, |p| &p.b),
                ) else {
                    continue;
                };
                cloak[k] = Some(cloak_value(&opening.value[k], &la, &ua, q));
                cloak_randomness[k] = Some(cloak_value(&opening.randomness[k], &lb, &ub, q));
            }
        }
        let msg = CloakMsg {
            cloak,
            cloak_randomness,
            pad_a: pads.iter().map(|(&j, p)| (j, p.commit_a.clone())).collect(),
            pad_b: pads.iter().map(|(&j, p)| (j, p.commit_b.clone())).collect(),
        };
        let mut out = Outbox::new(stage);
        out.push(Receiver::Broadcast, Message::Cloak(msg));
        out
    }

    /// Sums the cloaks of each coordinate's contributors, checks the sum against the
    /// product of their commitments, and runs blame on coordinates that fail.
    pub fn stage4_aggregate(&self, entries: &[&Envelope]) -> Aggregate {
        let ctx = &self.ctx;
        let (q, m) = (ctx.q(), ctx.m);
        let mut cloaks: BTreeMap<usize, CloakMsg> = BTreeMap::new();
        for env in entries {
            if let Some(Message::Cloak(msg)) = Message::decode(&env.payload) {
                let well_formed = msg.cloak.len() == m
                    && msg.cloak_randomness.len() == m
                    && msg.pad_a.values().chain(msg.pad_b.values()).all(|c| c.len() == m);
                if well_formed {
                    cloaks.entry(env.sender).or_insert(msg);
                }
            }
        }
        let view = CloakView {
            pedersen: &ctx.pedersen,
            commitments: &self.state.commitments,
            cloaks: &cloaks,
        };
        let mut agg = Aggregate {
            sums: vec![None; m],
            ..Default::default()
        };
        for (k, sel) in self.state.selection.iter().enumerate() {
            if !sel.is_aggregatable() {
                continue;
            }
            match view.sum_and_verify(k, &sel.contributors, q) {
                Some(sum) => agg.sums[k] = Some(sum),
                None => {
                    agg.failed.push(k);
                    agg.blame.merge(blame(&view, k, &sel.contributors));
                }
            }
        }
        agg
    }
}
