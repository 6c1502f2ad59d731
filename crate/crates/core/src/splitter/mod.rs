//! Superposed receiving: collisions are split by average into a binary tree,
//! and every transmitted round carries a proof that each participant either
//! sent nothing or repeated the message it holds in the parent node.

pub mod context;
pub mod slot;
pub mod tree;

pub use context::*;
pub use slot::{threshold, Slot, SlotCodec, SlotError};
pub use tree::*;

pub use crate::sim::{resolve, Resolution};

pub(crate) mod dec {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_str_radix(10))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        BigUint::parse_bytes(s.as_bytes(), 10).ok_or_else(|| serde::de::Error::custom("expected a decimal integer"))
    }
}

pub(crate) mod opt_dec {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<BigUint>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_some(&b.to_str_radix(10)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BigUint>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| BigUint::parse_bytes(s.as_bytes(), 10).ok_or_else(|| serde::de::Error::custom("expected a decimal integer")))
            .transpose()
    }
}
