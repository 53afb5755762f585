//! Byzantine behaviours.
//!
//! Model-level attacks (`LabelFlip`, `SignFlip`, `Gaussian`) change what a participant
//! commits to. Message-level attacks rewrite a participant's typed [`Outbox`] before it is
//! serialized, so the rest of the protocol code stays honest.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field;
use crate::fl::{Dataset, FlError};
use crate::protocol::messages::{Message, Outbox, RelationBatch};
use crate::robust::{Relation, RelationClaim};
use crate::transport::{Receiver, Stage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("strategy {0} does not corrupt models")]
    NotAModelAttack(String),
    #[error("cannot parse attack {0:?}")]
    Parse(String),
    #[error("gaussian sigma must be positive and finite, got {0}")]
    BadSigma(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeMode {
    /// Report the opposite of every relation actually observed.
    Invert,
    /// Report random relations about every pair of other participants.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AttackStrategy {
    None,
    LabelFlip,
    SignFlip,
    Gaussian { sigma: f64 },
    /// Each receiver `j` of a masked model gets one shifted by `j` codepoints.
    Equivocate,
    /// Sends nothing in the listed stages.
    Silent { stages: BTreeSet<Stage> },
    ForgedRelation { mode: ForgeMode },
    /// Adds `offset` to every broadcast cloak value.
    InconsistentCloak { offset: u64 },
}

impl AttackStrategy {
    pub fn silent() -> Self {
        AttackStrategy::Silent {
            stages: Stage::ALL.into_iter().collect(),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, AttackStrategy::None)
    }

    pub fn corrupts_model(&self) -> bool {
        matches!(self, AttackStrategy::SignFlip | AttackStrategy::Gaussian { .. })
    }
}

impl fmt::Display for AttackStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackStrategy::None => f.write_str("none"),
            AttackStrategy::LabelFlip => f.write_str("labelflip"),
            AttackStrategy::SignFlip => f.write_str("signflip"),
            AttackStrategy::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            AttackStrategy::Equivocate => f.write_str("equivocate"),
            AttackStrategy::Silent { stages } => {
                if stages.len() == Stage::ALL.len() {
                    f.write_str("silent")
                } else {
                    let names: Vec<&str> = stages.iter().map(|s| s.name()).collect();
                    write!(f, "silent:{}", names.join("+"))
                }
            }
            AttackStrategy::ForgedRelation { mode: ForgeMode::Invert } => f.write_str("forgedrelation"),
            AttackStrategy::ForgedRelation { mode: ForgeMode::Random } => {
                f.write_str("forgedrelation:random")
            }
            AttackStrategy::InconsistentCloak { offset } => write!(f, "inconsistentcloak:{offset}"),
        }
    }
}

impl FromStr for AttackStrategy {
    type Err = AdversaryError;

    /// Accepts e.g. `none`, `signflip`, `gaussian:1.0`, `silent:exchange+cloak`,
    /// `forgedrelation:random`, `inconsistentcloak:3`. Dashes and underscores are ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || AdversaryError::Parse(s.to_owned());
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let kind: String = kind
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        let strategy = match (kind.as_str(), arg) {
            ("none", None) => AttackStrategy::None,
            ("labelflip", None) => AttackStrategy::LabelFlip,
            ("signflip", None) => AttackStrategy::SignFlip,
            ("gaussian", a) => {
                let sigma: f64 = match a {
                    Some(a) => a.parse().map_err(|_| err())?,
                    None => 1.0,
                };
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(AdversaryError::BadSigma(sigma));
                }
                AttackStrategy::Gaussian { sigma }
            }
            ("equivocate", None) => AttackStrategy::Equivocate,
            ("silent", None) => AttackStrategy::silent(),
            ("silent", Some(a)) => AttackStrategy::Silent {
                stages: a
                    .split('+')
                    .map(|s| s.parse::<Stage>().map_err(|_| err()))
                    .collect::<Result<_, _>>()?,
            },
            ("forgedrelation", None | Some("invert")) => AttackStrategy::ForgedRelation {
                mode: ForgeMode::Invert,
            },
            ("forgedrelation", Some("random")) => AttackStrategy::ForgedRelation {
                mode: ForgeMode::Random,
            },
            ("inconsistentcloak", a) => AttackStrategy::InconsistentCloak {
                offset: match a {
                    Some(a) => a.parse().map_err(|_| err())?,
                    None => 1,
                },
            },
            _ => return Err(err()),
        };
        Ok(strategy)
    }
}

impl TryFrom<String> for AttackStrategy {
    type Error = AdversaryError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AttackStrategy> for String {
    fn from(a: AttackStrategy) -> String {
        a.to_string()
    }
}

/// `-w` for sign flip, `w + N(0, sigma^2)` per coordinate for Gaussian.
pub fn corrupt_model<R: Rng + ?Sized>(
    strategy: &AttackStrategy,
    w: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>, AdversaryError> {
    match strategy {
        AttackStrategy::SignFlip => Ok(w.iter().map(|x| -x).collect()),
        AttackStrategy::Gaussian { sigma } => {
            let normal = Normal::new(0.0, *sigma).map_err(|_| AdversaryError::BadSigma(*sigma))?;
            Ok(w.iter().map(|x| x + normal.sample(rng)).collect())
        }
        other => Err(AdversaryError::NotAModelAttack(other.to_string())),
    }
}

/// Cyclic label shift `y -> (y + 1) mod classes`.
pub fn corrupt_labels(data: &Dataset, classes: usize) -> Result<Dataset, FlError> {
    data.with_labels(data.labels().iter().map(|y| (y + 1) % classes).collect())
}

/// What an adversary knows when rewriting its outbox.
#[derive(Clone, Copy, Debug)]
pub struct InterceptContext<'a> {
    pub id: usize,
    pub n: usize,
    pub m: usize,
    pub q: &'a BigUint,
}

#[derive(Clone, Debug)]
pub struct Adversary {
    strategy: AttackStrategy,
    rng: ChaCha20Rng,
}

impl Adversary {
    pub fn new(strategy: AttackStrategy, seed: u64) -> Self {
        Adversary {
            strategy,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn strategy(&self) -> &AttackStrategy {
        &self.strategy
    }

    /// The model this adversary commits to, given what it trained.
    pub fn claimed_model(&mut self, trained: &[f64]) -> Vec<f64> {
        if self.strategy.corrupts_model() {
            corrupt_model(&self.strategy, trained, &mut self.rng).expect("model attack")
        } else {
            trained.to_vec()
        }
    }

    /// Rewrites the messages planned for one stage.
    pub fn intercept(&mut self, ctx: &InterceptContext<'_>, mut plan: Outbox) -> Outbox {
        match &self.strategy {
            AttackStrategy::Silent { stages } if stages.contains(&plan.stage) => {
                plan.items.clear();
            }
            AttackStrategy::Equivocate if plan.stage == Stage::Exchange => {
                for item in &mut plan.items {
                    if let (Receiver::Peer(j), Message::Exchange(msg)) = (item.receiver, &mut item.message) {
                        let shift = BigUint::from(j);
                        for c in &mut msg.masked {
                            *c = field::add_mod(c, &shift, ctx.q);
                        }
                    }
                }
            }
            AttackStrategy::ForgedRelation { mode } if plan.stage == Stage::Relation => {
                let mode = *mode;
                for item in &mut plan.items {
                    if let Message::Relations(batch) = &mut item.message {
                        match mode {
                            ForgeMode::Invert => {
                                for claim in &mut batch.claims {
                                    for r in &mut claim.relations {
                                        *r = r.flip();
                                    }
                                }
                            }
                            ForgeMode::Random => *batch = self.random_batch(ctx),
                        }
                    }
                }
            }
            AttackStrategy::InconsistentCloak { offset }
                if matches!(plan.stage, Stage::Cloak | Stage::CloakRetry) =>
            {
                let offset = BigUint::from(*offset);
                for item in &mut plan.items {
                    if let Message::Cloak(msg) = &mut item.message {
                        for c in msg.cloak.iter_mut().flatten() {
                            *c = field::add_mod(c, &offset, ctx.q);
                        }
                    }
                }
            }
            _ => {}
        }
        plan
    }

    fn random_batch(&mut self, ctx: &InterceptContext<'_>) -> RelationBatch {
        let mut claims = Vec::new();
        for p in 0..ctx.n {
            for q in p + 1..ctx.n {
                if p == ctx.id || q == ctx.id {
                    continue;
                }
                let relations = (0..ctx.m)
                    .map(|_| {
                        if self.rng.random::<bool>() {
                            Relation::Less
                        } else {
                            Relation::Greater
                        }
                    })
                    .collect();
                claims.push(RelationClaim {
                    reporter: ctx.id,
                    p,
                    q,
                    relations,
                });
            }
        }
        RelationBatch { claims }
    }
}
