//! Slot packing: a message `(1, m)` is the scalar `2^S + m`, so that sums of
//! colliding slots yield `(count, Σm)` componentwise.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{GroupParams, Scalar};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SlotError {
    #[error("payload needs more than {bits} bits")]
    PayloadOverflow { bits: u32 },
    #[error("slot layout (payload {payload_bits} bits, count at bit {count_shift}) does not fit {max_count} slots in the group order")]
    Capacity { payload_bits: u32, count_shift: u32, max_count: u64 },
    #[error("count shift {count_shift} is below payload width {payload_bits}")]
    Layout { payload_bits: u32, count_shift: u32 },
    #[error("aggregate does not decode to a well-formed slot")]
    Malformed,
    #[error("a threshold needs at least two colliding slots, got {0}")]
    NotACollision(u64),
}

/// A decoded aggregate: how many slots were added and the sum of payloads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub count: u64,
    #[serde(with = "crate::splitter::dec")]
    pub sum: BigUint,
}

impl Slot {
    pub fn new(count: u64, sum: impl Into<BigUint>) -> Self {
        Slot { count, sum: sum.into() }
    }

    pub fn empty() -> Self {
        Slot { count: 0, sum: BigUint::zero() }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

impl std::fmt::Display for Slot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.count, self.sum)
    }
}

/// Payload width `B`, the bit position `S ≥ B` of the count, and the largest
/// count that may legitimately appear. Leaving `S - B` spare bits keeps
/// payload sums of up to `2^(S-B)` slots from carrying into the count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCodec {
    pub payload_bits: u32,
    pub count_shift: u32,
    pub max_count: u64,
}

fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

impl SlotCodec {
    pub fn new(payload_bits: u32, count_shift: u32) -> Result<Self, SlotError> {
        if count_shift < payload_bits {
            return Err(SlotError::Layout { payload_bits, count_shift });
        }
        let spare = (count_shift - payload_bits).min(63);
        Ok(SlotCodec { payload_bits, count_shift, max_count: 1u64 << spare })
    }

    /// Layout for at most `max_count` simultaneous slots, checked against
    /// `max_count · 2^S + max_count · (2^B - 1) < q`.
    pub fn for_capacity(params: &GroupParams, payload_bits: u32, max_count: u64) -> Result<Self, SlotError> {
        let codec = SlotCodec {
            payload_bits,
            count_shift: payload_bits + ceil_log2(max_count.max(1)),
            max_count: max_count.max(1),
        };
        codec.check_capacity(params)?;
        Ok(codec)
    }

    pub fn check_capacity(&self, params: &GroupParams) -> Result<(), SlotError> {
        let max_count = self.max_count;
        let n = BigUint::from(max_count);
        let bound = (&n << self.count_shift as usize) + &n * self.max_payload();
        let spare_ok = n.clone() * self.max_payload() < (BigUint::one() << self.count_shift as usize);
        if bound >= *params.order() || !spare_ok {
            return Err(SlotError::Capacity {
                payload_bits: self.payload_bits,
                count_shift: self.count_shift,
                max_count,
            });
        }
        Ok(())
    }

    pub fn max_payload(&self) -> BigUint {
        (BigUint::one() << self.payload_bits as usize) - 1u32
    }

    pub fn check_payload(&self, payload: &BigUint) -> Result<(), SlotError> {
        if payload.bits() > self.payload_bits as u64 {
            return Err(SlotError::PayloadOverflow { bits: self.payload_bits });
        }
        Ok(())
    }

    /// `(1, payload)` as a scalar.
    pub fn encode(&self, params: &GroupParams, payload: &BigUint) -> Result<Scalar, SlotError> {
        self.check_payload(payload)?;
        Ok(self.encode_raw(params, 1, payload))
    }

    /// Arbitrary `(count, sum)`; no range checks.
    pub fn encode_raw(&self, params: &GroupParams, count: u64, sum: &BigUint) -> Scalar {
        params.scalar_from_biguint(&((BigUint::from(count) << self.count_shift as usize) + sum))
    }

    pub fn decode(&self, value: &Scalar) -> Result<Slot, SlotError> {
        let v = value.value();
        let count = (v >> self.count_shift as usize).to_u64().ok_or(SlotError::Malformed)?;
        let sum = v & ((BigUint::one() << self.count_shift as usize) - 1u32);
        if count > self.max_count || sum > self.max_payload() * count {
            return Err(SlotError::Malformed);
        }
        Ok(Slot { count, sum })
    }
}

/// The split point of a collision: the smallest integer not below the
/// average, so that `payload < threshold` holds exactly for payloads below
/// the average.
pub fn threshold(slot: &Slot) -> Result<BigUint, SlotError> {
    if slot.count < 2 {
        return Err(SlotError::NotACollision(slot.count));
    }
    let c = BigUint::from(slot.count);
    Ok((&slot.sum + &c - 1u32) / c)
}
