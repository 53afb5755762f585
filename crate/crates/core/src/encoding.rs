//! Fixed-point map between real weights and `Z_q`.
//!
//! A weight `x` with `|x| <= bound` is encoded as `(round(x * scale) + floor(q/2)) mod q`.
//! Centering at `floor(q/2)` keeps the map strictly monotonic on `[-bound, bound]` and makes
//! differences of encodings recoverable as signed integers.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field;

pub const DEFAULT_SCALE: u64 = 1 << 16;
pub const DEFAULT_BOUND: f64 = 64.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("weight {value} at coordinate {coordinate} is outside [-{bound}, {bound}]")]
    OutOfRange {
        coordinate: usize,
        value: f64,
        bound: f64,
    },
    #[error("codec scale must be positive and bound must be a positive finite number")]
    InvalidParameters,
    #[error("round(bound * scale) * {max_participants} must stay below q/4")]
    FieldTooSmall { max_participants: usize },
    #[error("mean of zero encodings is undefined")]
    EmptyMean,
}

/// Parameters as they appear in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecParams {
    pub scale: u64,
    pub bound: f64,
}

impl Default for CodecParams {
    fn default() -> Self {
        CodecParams {
            scale: DEFAULT_SCALE,
            bound: DEFAULT_BOUND,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointCodec {
    scale: u64,
    bound: f64,
    q: BigUint,
    offset: BigUint,
}

impl FixedPointCodec {
    /// Builds a codec for sums of up to `max_participants` encodings in `Z_q`.
    pub fn new(
        params: CodecParams,
        q: &BigUint,
        max_participants: usize,
    ) -> Result<Self, EncodingError> {
        let CodecParams { scale, bound } = params;
        if scale == 0 || !(bound.is_finite() && bound > 0.0) {
            return Err(EncodingError::InvalidParameters);
        }
        let span = BigUint::from((bound * scale as f64).round() as u128);
        if span * BigUint::from(max_participants.max(1)) * 4u32 >= *q {
            return Err(EncodingError::FieldTooSmall { max_participants });
        }
        Ok(FixedPointCodec {
            scale,
            bound,
            q: q.clone(),
            offset: q >> 1u32,
        })
    }

    pub fn scale(&self) -> u64 {
        self.scale
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn offset(&self) -> &BigUint {
        &self.offset
    }

    pub fn params(&self) -> CodecParams {
        CodecParams {
            scale: self.scale,
            bound: self.bound,
        }
    }

    /// Half a quantization step, the worst-case round-trip error.
    pub fn resolution(&self) -> f64 {
        0.5 / self.scale as f64
    }

    pub fn encode_scalar(&self, x: f64) -> BigUint {
        let v = (x * self.scale as f64).round() as i128;
        let shifted = BigInt::from(v) + BigInt::from_biguint(Sign::Plus, self.offset.clone());
        let q = BigInt::from_biguint(Sign::Plus, self.q.clone());
        let r = ((shifted % &q) + &q) % &q;
        r.to_biguint().expect("non-negative after reduction")
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<BigUint>, EncodingError> {
        x.iter()
            .enumerate()
            .map(|(k, &v)| {
                if v.is_finite() && v.abs() <= self.bound {
                    Ok(self.encode_scalar(v))
                } else {
                    Err(EncodingError::OutOfRange {
                        coordinate: k,
                        value: v,
                        bound: self.bound,
                    })
                }
            })
            .collect()
    }

    pub fn decode(&self, v: &BigUint) -> f64 {
        let diff = field::sub_mod(v, &self.offset, &self.q);
        to_f64(&field::centered(&diff, &self.q)) / self.scale as f64
    }

    pub fn decode_vec(&self, v: &[BigUint]) -> Vec<f64> {
        v.iter().map(|x| self.decode(x)).collect()
    }

    /// Mean of `count` encodings given their sum modulo `q`.
    pub fn decode_mean(&self, sum: &BigUint, count: usize) -> Result<f64, EncodingError> {
        if count == 0 {
            return Err(EncodingError::EmptyMean);
        }
        let shift = (&self.offset * BigUint::from(count)) % &self.q;
        let diff = field::sub_mod(sum, &shift, &self.q);
        Ok(to_f64(&field::centered(&diff, &self.q)) / (count as f64 * self.scale as f64))
    }

    /// Encoded value with the offset removed, as a signed integer.
    pub fn centered_units(&self, v: &BigUint) -> BigInt {
        field::centered(&field::sub_mod(v, &self.offset, &self.q), &self.q)
    }
}

fn to_f64(v: &BigInt) -> f64 {
    if v.is_zero() {
        0.0
    } else {
        v.to_f64().unwrap_or(f64::NAN)
    }
}
