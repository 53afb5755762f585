//! Vector arithmetic in `Z_q`.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::Zero;
use rand::RngCore;

pub fn add_mod(a: &BigUint, b: &BigUint, q: &BigUint) -> BigUint {
    (a + b) % q
}

pub fn sub_mod(a: &BigUint, b: &BigUint, q: &BigUint) -> BigUint {
    let a = a % q;
    let b = b % q;
    if a >= b {
        a - b
    } else {
        q - (b - a)
    }
}

pub fn add_vec(a: &[BigUint], b: &[BigUint], q: &BigUint) -> Vec<BigUint> {
    a.iter().zip(b).map(|(x, y)| add_mod(x, y, q)).collect()
}

pub fn sub_vec(a: &[BigUint], b: &[BigUint], q: &BigUint) -> Vec<BigUint> {
    a.iter().zip(b).map(|(x, y)| sub_mod(x, y, q)).collect()
}

pub fn zeros(m: usize) -> Vec<BigUint> {
    vec![BigUint::zero(); m]
}

/// Uniform sample from `[0, q)` by rejection.
pub fn sample_below<R: RngCore + ?Sized>(rng: &mut R, q: &BigUint) -> BigUint {
    let bits = q.bits();
    let nbytes = bits.div_ceil(8) as usize;
    let excess = nbytes as u64 * 8 - bits;
    let mut buf = vec![0u8; nbytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xffu8 >> excess;
        let v = BigUint::from_bytes_be(&buf);
        if &v < q {
            return v;
        }
    }
}

pub fn sample_vec<R: RngCore + ?Sized>(rng: &mut R, q: &BigUint, m: usize) -> Vec<BigUint> {
    (0..m).map(|_| sample_below(rng, q)).collect()
}

/// Representative of `v mod q` in `(-q/2, q/2]`.
pub fn centered(v: &BigUint, q: &BigUint) -> BigInt {
    let v = v % q;
    let half = q >> 1u32;
    if v > half {
        -BigInt::from_biguint(Sign::Plus, q - v)
    } else {
        BigInt::from_biguint(Sign::Plus, v)
    }
}
