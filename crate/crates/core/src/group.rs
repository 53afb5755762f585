//! Arithmetic in the order-`q` subgroup of `Z_p^*` for a safe prime `p = 2q + 1`.
//!
//! Commitments live here. The second generator `h` is obtained by hashing a
//! public tag onto the subgroup, so nobody knows `log_g(h)`.

use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Smallest modulus size accepted by [`setup_group`].
pub const MIN_GROUP_BITS: u64 = 16;

/// Domain-separation tag used for the default second generator.
pub const H_TAG: &[u8] = b"BRAVE-H";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("group size of {0} bits is below the minimum of {MIN_GROUP_BITS}")]
    TooSmall(u64),
    #[error("invalid group parameters: {0}")]
    InvalidParams(&'static str),
    #[error("{0} is not an element of the order-q subgroup")]
    NotInSubgroup(BigUint),
}

/// An element of the order-`q` subgroup, stored as its residue in `[1, p)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(BigUint);

impl GroupElement {
    pub fn one() -> Self {
        GroupElement(BigUint::one())
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    /// Wraps a residue without checking subgroup membership.
    pub(crate) fn from_residue(v: BigUint) -> Self {
        GroupElement(v)
    }

    pub fn is_one(&self) -> bool {
        self.0.is_one()
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for GroupElement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        crate::serde_dec::serialize(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for GroupElement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = crate::serde_dec::deserialize(d)?;
        if v.is_zero() {
            return Err(serde::de::Error::custom("group element must be non-zero"));
        }
        Ok(GroupElement(v))
    }
}

/// Public parameters `(p, q, g, h)` of the commitment group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct GroupParams {
    p: BigUint,
    q: BigUint,
    g: BigUint,
    h: BigUint,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    #[serde(with = "crate::serde_dec")]
    p: BigUint,
    #[serde(with = "crate::serde_dec")]
    q: BigUint,
    #[serde(with = "crate::serde_dec")]
    g: BigUint,
    #[serde(with = "crate::serde_dec")]
    h: BigUint,
}

impl TryFrom<RawParams> for GroupParams {
    type Error = GroupError;

    fn try_from(raw: RawParams) -> Result<Self, Self::Error> {
        GroupParams::new(raw.p, raw.q, raw.g, raw.h)
    }
}

impl From<GroupParams> for RawParams {
    fn from(gp: GroupParams) -> Self {
        RawParams {
            p: gp.p,
            q: gp.q,
            g: gp.g,
            h: gp.h,
        }
    }
}

impl GroupParams {
    /// Validates and builds a parameter set.
    pub fn new(p: BigUint, q: BigUint, g: BigUint, h: BigUint) -> Result<Self, GroupError> {
        if p != (&q << 1u32) + 1u32 {
            return Err(GroupError::InvalidParams("p != 2q + 1"));
        }
        if !is_probable_prime(&q) || !is_probable_prime(&p) {
            return Err(GroupError::InvalidParams("p and q must both be prime"));
        }
        for (x, name) in [(&g, "g"), (&h, "h")] {
            if x.is_zero() || x >= &p || x.is_one() || !x.modpow(&q, &p).is_one() {
                return Err(GroupError::InvalidParams(match name {
                    "g" => "g must generate the order-q subgroup",
                    _ => "h must generate the order-q subgroup",
                }));
            }
        }
        if g == h {
            return Err(GroupError::InvalidParams("g and h must differ"));
        }
        Ok(GroupParams { p, q, g, h })
    }

    /// The hand-checkable group `p = 23, q = 11, g = 2, h = 3` used throughout the tests.
    pub fn tiny_fixture() -> Self {
        GroupParams::new(23u32.into(), 11u32.into(), 2u32.into(), 3u32.into())
            .expect("fixture is a valid group")
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn g(&self) -> GroupElement {
        GroupElement(self.g.clone())
    }

    pub fn h(&self) -> GroupElement {
        GroupElement(self.h.clone())
    }

    /// Bit length of the modulus `p`.
    pub fn bits(&self) -> u64 {
        self.p.bits()
    }

    pub fn contains(&self, v: &BigUint) -> bool {
        !v.is_zero() && v < &self.p && v.modpow(&self.q, &self.p).is_one()
    }

    /// Checks subgroup membership and wraps `v`.
    pub fn element(&self, v: BigUint) -> Result<GroupElement, GroupError> {
        if self.contains(&v) {
            Ok(GroupElement(v))
        } else {
            Err(GroupError::NotInSubgroup(v))
        }
    }

    /// `base^e mod p`, with `e` reduced modulo `q` first.
    pub fn exp(&self, base: &GroupElement, e: &BigUint) -> GroupElement {
        let e = e % &self.q;
        GroupElement(base.0.modpow(&e, &self.p))
    }

    pub fn mul(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        GroupElement((&a.0 * &b.0) % &self.p)
    }

    pub fn inv(&self, a: &GroupElement) -> GroupElement {
        // Elements are units mod p, so the inverse always exists.
        let inv = a
            .0
            .modinv(&self.p)
            .expect("subgroup elements are invertible modulo p");
        GroupElement(inv)
    }
}

/// Generates a safe-prime group with a `bits`-bit modulus, deterministically from `seed`.
pub fn setup_group(bits: u64, seed: &[u8]) -> Result<GroupParams, GroupError> {
    if bits < MIN_GROUP_BITS {
        return Err(GroupError::TooSmall(bits));
    }
    let mut hasher = Sha256::new();
    hasher.update(b"brave/setup-group");
    hasher.update(bits.to_le_bytes());
    hasher.update(seed);
    let mut rng = ChaCha20Rng::from_seed(hasher.finalize().into());

    let q_bits = bits - 1;
    let (p, q) = loop {
        let q = random_odd_with_top_bit(&mut rng, q_bits);
        if !survives_sieve(&q) {
            continue;
        }
        let p: BigUint = (&q << 1u32) + 1u32;
        if is_probable_prime(&q) && is_probable_prime(&p) {
            break (p, q);
        }
    };

    // Quadratic residues other than 1 generate the order-q subgroup.
    let mut g = BigUint::from(2u32);
    while !g.modpow(&q, &p).is_one() {
        g += 1u32;
    }
    let h = derive_second_generator(&p, &q, &g, H_TAG);
    Ok(GroupParams {
        p,
        q,
        g,
        h: h.0,
    })
}

/// Hashes `tag` onto the order-`q` subgroup: hash to an integer, square it modulo `p`,
/// retry while the result is `1` or `g`.
pub fn derive_second_generator(p: &BigUint, q: &BigUint, g: &BigUint, tag: &[u8]) -> GroupElement {
    let want_bytes = (p.bits() as usize + 64).div_ceil(8);
    let mut counter: u64 = 0;
    loop {
        let mut wide = Vec::with_capacity(want_bytes + 32);
        let mut block: u32 = 0;
        while wide.len() < want_bytes {
            let mut hasher = Sha256::new();
            hasher.update(b"brave/hash-to-group");
            hasher.update(tag);
            hasher.update(counter.to_le_bytes());
            hasher.update(block.to_le_bytes());
            wide.extend_from_slice(&hasher.finalize());
            block += 1;
        }
        wide.truncate(want_bytes);
        let x = BigUint::from_bytes_be(&wide) % p;
        let h = (&x * &x) % p;
        counter += 1;
        if h.is_zero() || h.is_one() || &h == g {
            continue;
        }
        debug_assert!(h.modpow(q, p).is_one());
        return GroupElement(h);
    }
}

fn random_odd_with_top_bit(rng: &mut ChaCha20Rng, bits: u64) -> BigUint {
    let nbytes = bits.div_ceil(8) as usize;
    let mut buf = vec![0u8; nbytes];
    rng.fill_bytes(&mut buf);
    let mut v = BigUint::from_bytes_be(&buf);
    let excess = nbytes as u64 * 8 - bits;
    v >>= excess;
    v.set_bit(bits - 1, true);
    v.set_bit(0, true);
    v
}

const SMALL_PRIMES: [u32; 54] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257,
];

/// Rejects `q` when `q` or `2q + 1` has a small factor.
fn survives_sieve(q: &BigUint) -> bool {
    for &s in SMALL_PRIMES.iter() {
        let r = (q % s).to_u32().unwrap_or(0);
        if r == 0 && q != &BigUint::from(s) {
            return false;
        }
        // 2q + 1 ≡ 0 (mod s)
        if (2 * r as u64 + 1).is_multiple_of(s as u64) {
            return false;
        }
    }
    true
}

/// Miller-Rabin with the first twelve prime bases (deterministic below 3.3e24)
/// plus four bases derived from `n` itself.
pub fn is_probable_prime(n: &BigUint) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for s in [2u32, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == &BigUint::from(s) {
            return true;
        }
        if (n % s).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let shift = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> shift;

    let mut bases: Vec<BigUint> = [2u32, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37]
        .iter()
        .map(|&b| BigUint::from(b))
        .collect();
    let digest = Sha256::digest(n.to_bytes_le());
    for chunk in digest.chunks(8) {
        let b = BigUint::from_bytes_le(chunk) % (n - 3u32) + 2u32;
        bases.push(b);
    }

    'witness: for a in bases {
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..shift {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    // Independent square-and-multiply over u64, used as an oracle.
    fn modexp_u64(mut b: u64, mut e: u64, m: u64) -> u64 {
        let mut acc = 1u64;
        b %= m;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * b % m;
            }
            b = b * b % m;
            e >>= 1;
        }
        acc
    }

    #[test]
    fn tiny_fixture_matches_oracle() {
        let gp = GroupParams::tiny_fixture();
        assert_eq!(modexp_u64(2, 11, 23), 1);
        assert_eq!(modexp_u64(3, 11, 23), 1);
        assert_eq!(gp.p(), &big(23));
        assert_eq!(gp.q(), &big(11));
        assert_eq!(gp.g().value(), &big(2));
    }

    #[test]
    fn exp_examples() {
        let gp = GroupParams::tiny_fixture();
        let g = gp.g();
        assert_eq!(gp.exp(&g, &big(5)).value(), &big(modexp_u64(2, 5, 23)));
        assert_eq!(gp.exp(&g, &big(5)).value(), &big(9));
        assert!(gp.exp(&g, &big(0)).is_one());
        assert!(gp.exp(&g, &big(11)).is_one());
        // exponent is reduced mod q
        assert_eq!(gp.exp(&g, &big(16)), gp.exp(&g, &big(5)));
    }

    #[test]
    fn mul_and_inv_examples() {
        let gp = GroupParams::tiny_fixture();
        let nine = gp.element(big(9)).unwrap();
        let two = gp.g();
        assert_eq!(gp.mul(&nine, &two).value(), &big(18));
        for v in 1..23u64 {
            if let Ok(a) = gp.element(big(v)) {
                assert!(gp.mul(&a, &gp.inv(&a)).is_one());
            }
        }
    }

    #[test]
    fn subgroup_has_q_elements() {
        let gp = GroupParams::tiny_fixture();
        let members = (1..23u64).filter(|&v| gp.contains(&big(v))).count();
        assert_eq!(members, 11);
    }

    #[test]
    fn setup_rejects_small_bits() {
        assert_eq!(setup_group(15, b"x"), Err(GroupError::TooSmall(15)));
    }

    #[test]
    fn setup_is_deterministic_and_valid() {
        let a = setup_group(16, b"seed A").unwrap();
        let b = setup_group(16, b"seed A").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bits(), 16);
        // revalidate through the checked constructor
        let again = GroupParams::new(a.p.clone(), a.q.clone(), a.g.clone(), a.h.clone()).unwrap();
        assert_eq!(again, a);
        let c = setup_group(64, b"seed B").unwrap();
        assert_eq!(c.bits(), 64);
        assert!(c.contains(c.h().value()));
    }

    #[test]
    fn second_generator_examples() {
        let (p, q, g) = (big(23), big(11), big(2));
        let h = derive_second_generator(&p, &q, &g, H_TAG);
        assert_eq!(h.value().modpow(&q, &p), big(1));
        assert_eq!(h, derive_second_generator(&p, &q, &g, H_TAG));
        assert_ne!(h.value(), &g);

        let gp = setup_group(64, b"fixture").unwrap();
        let h1 = derive_second_generator(gp.p(), gp.q(), gp.g().value(), b"BRAVE-H");
        let h2 = derive_second_generator(gp.p(), gp.q(), gp.g().value(), b"OTHER");
        assert_ne!(h1, h2);
        assert_eq!(h1, gp.h());
    }

    #[test]
    fn primality_against_trial_division() {
        fn trial(n: u64) -> bool {
            n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0)
        }
        for n in 0..3000u64 {
            assert_eq!(is_probable_prime(&big(n)), trial(n), "n = {n}");
        }
        // Carmichael numbers
        for n in [561u64, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265] {
            assert!(!is_probable_prime(&big(n)));
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(GroupParams::new(big(23), big(11), big(5), big(3)).is_err()); // 5 is a non-residue
        assert!(GroupParams::new(big(23), big(11), big(2), big(2)).is_err());
        assert!(GroupParams::new(big(25), big(12), big(2), big(3)).is_err());
    }

    #[test]
    fn params_json_roundtrip() {
        let gp = GroupParams::tiny_fixture();
        let js = serde_json::to_string(&gp).unwrap();
        assert_eq!(js, r#"{"p":"23","q":"11","g":"2","h":"3"}"#);
        let back: GroupParams = serde_json::from_str(&js).unwrap();
        assert_eq!(back, gp);
        assert!(serde_json::from_str::<GroupParams>(r#"{"p":"23","q":"11","g":"5","h":"3"}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn closure_and_exponent_laws(x in 0u64..1_000_000, y in 0u64..1_000_000) {
                let gp = setup_group(32, b"props").unwrap();
                let g = gp.g();
                let q = gp.q().clone();
                let a = gp.exp(&g, &big(x));
                let b = gp.exp(&gp.h(), &big(y));
                let ab = gp.mul(&a, &b);
                prop_assert!(gp.contains(ab.value()));
                prop_assert_eq!(gp.mul(&a, &b), gp.mul(&b, &a));
                let sum = (big(x) + big(y)) % &q;
                prop_assert_eq!(gp.exp(&g, &sum), gp.mul(&gp.exp(&g, &big(x)), &gp.exp(&g, &big(y))));
            }
        }
    }
}
