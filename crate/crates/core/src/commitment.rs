//! Pedersen vector commitments `C(w, r) = g^w h^r`, one group element per coordinate.

use num_bigint::BigUint;
use num_traits::One;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{GroupElement, GroupParams};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommitmentError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

fn check_len(left: usize, right: usize) -> Result<(), CommitmentError> {
    if left == right {
        Ok(())
    } else {
        Err(CommitmentError::LengthMismatch { left, right })
    }
}

/// Per-coordinate commitments of a model in `Z_q^m`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommitmentVector(Vec<GroupElement>);

impl CommitmentVector {
    pub fn new(elements: Vec<GroupElement>) -> Self {
        CommitmentVector(elements)
    }

    pub fn ones(m: usize) -> Self {
        CommitmentVector(vec![GroupElement::one(); m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.0
    }

    pub fn get(&self, k: usize) -> Option<&GroupElement> {
        self.0.get(k)
    }
}

/// Committed value and its randomness.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opening {
    #[serde(with = "crate::serde_dec::vec")]
    pub value: Vec<BigUint>,
    #[serde(with = "crate::serde_dec::vec")]
    pub randomness: Vec<BigUint>,
}

impl Opening {
    pub fn new(value: Vec<BigUint>, randomness: Vec<BigUint>) -> Self {
        Opening { value, randomness }
    }
}

/// Precomputed powers `base^(j * 256^i)` for byte-windowed fixed-base exponentiation.
#[derive(Debug)]
struct FixedBase {
    rows: Vec<Vec<BigUint>>,
}

impl FixedBase {
    fn new(base: &BigUint, p: &BigUint, exp_bits: u64) -> Self {
        let nrows = exp_bits.div_ceil(8).max(1) as usize;
        let mut rows = Vec::with_capacity(nrows);
        let mut row_base = base.clone();
        for _ in 0..nrows {
            let mut row = Vec::with_capacity(256);
            let mut acc = BigUint::one();
            for _ in 0..256 {
                row.push(acc.clone());
                acc = (&acc * &row_base) % p;
            }
            // acc == row_base^256
            row_base = acc;
            rows.push(row);
        }
        FixedBase { rows }
    }

    fn mul_pow_into(&self, acc: &mut BigUint, e: &BigUint, p: &BigUint) {
        for (i, byte) in e.to_bytes_le().into_iter().enumerate() {
            if byte != 0 {
                *acc = &*acc * &self.rows[i][byte as usize] % p;
            }
        }
    }
}

/// Commitment key: the group plus fixed-base tables for `g` and `h`.
#[derive(Debug)]
pub struct Pedersen {
    params: GroupParams,
    g_table: FixedBase,
    h_table: FixedBase,
}

impl Pedersen {
    pub fn new(params: GroupParams) -> Self {
        let qbits = params.q().bits();
        let g_table = FixedBase::new(params.g().value(), params.p(), qbits);
        let h_table = FixedBase::new(params.h().value(), params.p(), qbits);
        Pedersen {
            params,
            g_table,
            h_table,
        }
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn q(&self) -> &BigUint {
        self.params.q()
    }

    /// `g^w h^r mod p` for a single coordinate.
    pub fn commit_scalar(&self, w: &BigUint, r: &BigUint) -> GroupElement {
        let q = self.params.q();
        let p = self.params.p();
        let mut acc = BigUint::one();
        self.g_table.mul_pow_into(&mut acc, &(w % q), p);
        self.h_table.mul_pow_into(&mut acc, &(r % q), p);
        GroupElement::from_residue(acc)
    }

    pub fn commit(
        &self,
        value: &[BigUint],
        randomness: &[BigUint],
    ) -> Result<CommitmentVector, CommitmentError> {
        check_len(value.len(), randomness.len())?;
        Ok(CommitmentVector(
            value
                .iter()
                .zip(randomness)
                .map(|(w, r)| self.commit_scalar(w, r))
                .collect(),
        ))
    }

    pub fn verify_open(&self, c: &CommitmentVector, o: &Opening) -> Result<bool, CommitmentError> {
        check_len(c.len(), o.value.len())?;
        check_len(c.len(), o.randomness.len())?;
        Ok(c.0
            .iter()
            .zip(o.value.iter().zip(&o.randomness))
            .all(|(ck, (w, r))| &self.commit_scalar(w, r) == ck))
    }

    /// Coordinate-wise product; commits to the sum of the openings.
    pub fn hom_combine(
        &self,
        c1: &CommitmentVector,
        c2: &CommitmentVector,
    ) -> Result<CommitmentVector, CommitmentError> {
        check_len(c1.len(), c2.len())?;
        Ok(CommitmentVector(
            c1.0.iter()
                .zip(&c2.0)
                .map(|(a, b)| self.params.mul(a, b))
                .collect(),
        ))
    }

    /// Coordinate-wise inverse; commits to the negated opening.
    pub fn hom_negate(&self, c: &CommitmentVector) -> CommitmentVector {
        CommitmentVector(c.0.iter().map(|a| self.params.inv(a)).collect())
    }

    /// Product of several commitments; the empty product is the all-ones vector.
    pub fn fold<'a, I>(&self, m: usize, items: I) -> Result<CommitmentVector, CommitmentError>
    where
        I: IntoIterator<Item = &'a CommitmentVector>,
    {
        items
            .into_iter()
            .try_fold(CommitmentVector::ones(m), |acc, c| self.hom_combine(&acc, c))
    }
}
