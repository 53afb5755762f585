//! Aggregate verification and blame over the broadcast cloaks.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::messages::CloakMsg;
use crate::commitment::{CommitmentVector, Pedersen};
use crate::field;
use crate::group::GroupElement;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlameReport {
    /// Contributors whose cloak does not match their commitment and pads, or who withheld
    /// what the check needs.
    pub flagged: BTreeSet<usize>,
    /// Pairs whose pad commitments disagree; at least one member lied about the pad.
    pub suspect_pairs: BTreeSet<(usize, usize)>,
}

impl BlameReport {
    pub fn merge(&mut self, other: BlameReport) {
        self.flagged.extend(other.flagged);
        self.suspect_pairs.extend(other.suspect_pairs);
    }

    pub fn is_empty(&self) -> bool {
        self.flagged.is_empty() && self.suspect_pairs.is_empty()
    }

    /// Everyone implicated, for exclusion.
    pub fn implicated(&self) -> BTreeSet<usize> {
        let mut all = self.flagged.clone();
        for &(a, b) in &self.suspect_pairs {
            all.insert(a);
            all.insert(b);
        }
        all
    }
}

/// Bus-derived data every participant checks cloaks against.
pub struct CloakView<'a> {
    pub pedersen: &'a Pedersen,
    pub commitments: &'a [Option<CommitmentVector>],
    pub cloaks: &'a BTreeMap<usize, CloakMsg>,
}

impl CloakView<'_> {
    fn commitment(&self, j: usize, k: usize) -> Option<&GroupElement> {
        self.commitments.get(j)?.as_ref()?.get(k)
    }

    fn cloak(&self, j: usize, k: usize) -> Option<(&BigUint, &BigUint)> {
        let msg = self.cloaks.get(&j)?;
        Some((msg.cloak[k].as_ref()?, msg.cloak_randomness[k].as_ref()?))
    }

    fn pad_a(&self, j: usize, h: usize, k: usize) -> Option<&GroupElement> {
        self.cloaks.get(&j)?.pad_a.get(&h)?.get(k)
    }

    fn pad_b(&self, j: usize, h: usize, k: usize) -> Option<&GroupElement> {
        self.cloaks.get(&j)?.pad_b.get(&h)?.get(k)
    }

    /// Sum of the contributors' cloaks at `k`, if every cloak is present and the sum
    /// opens the product of their commitments.
    pub fn sum_and_verify(&self, k: usize, contributors: &[usize], q: &BigUint) -> Option<BigUint> {
        let params = self.pedersen.params();
        let mut sum_w = BigUint::default();
        let mut sum_r = BigUint::default();
        let mut product = GroupElement::one();
        for &j in contributors {
            let (w, r) = self.cloak(j, k)?;
            sum_w = field::add_mod(&sum_w, w, q);
            sum_r = field::add_mod(&sum_r, r, q);
            product = params.mul(&product, self.commitment(j, k)?);
        }
        (self.pedersen.commit_scalar(&sum_w, &sum_r) == product).then_some(sum_w)
    }
}

/// Checks every contributor of coordinate `k` individually.
///
/// Contributor `j` with lower partition `L` and upper partition `U` passes iff
/// `C(cloak_j, cloak_r_j) = W_j * prod_{h in L} A_jh^{-1} * prod_{h in U} A_jh`. Pairs of
/// contributors whose `A` or `B` commitments differ are reported as suspect pairs.
pub fn blame(view: &CloakView<'_>, k: usize, contributors: &[usize]) -> BlameReport {
    let params = view.pedersen.params();
    let mut report = BlameReport::default();
    for (pos, &j) in contributors.iter().enumerate() {
        let check = || -> Option<bool> {
            let (w, r) = view.cloak(j, k)?;
            let mut expected = view.commitment(j, k)?.clone();
            for &h in &contributors[..pos] {
                expected = params.mul(&expected, &params.inv(view.pad_a(j, h, k)?));
            }
            for &h in &contributors[pos + 1..] {
                expected = params.mul(&expected, view.pad_a(j, h, k)?);
            }
            Some(view.pedersen.commit_scalar(w, r) == expected)
        };
        if check() != Some(true) {
            report.flagged.insert(j);
        }
    }
    for (x, &j) in contributors.iter().enumerate() {
        for &h in &contributors[x + 1..] {
            let a = (view.pad_a(j, h, k), view.pad_a(h, j, k));
            let b = (view.pad_b(j, h, k), view.pad_b(h, j, k));
            let disagree = |(u, v): (Option<&GroupElement>, Option<&GroupElement>)| {
                matches!((u, v), (Some(u), Some(v)) if u != v)
            };
            if disagree(a) || disagree(b) {
                report.suspect_pairs.insert((j.min(h), j.max(h)));
            }
        }
    }
    report
}
