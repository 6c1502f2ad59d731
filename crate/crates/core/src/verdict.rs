use std::fmt;

use serde::{Deserialize, Serialize};

use crate::keysetup::ParticipantId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    BadSignature,
    AggregateMismatch,
    PairMismatch,
    NonCooperation,
    ProofFailed,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Reason::BadSignature => "bad_signature",
            Reason::AggregateMismatch => "aggregate_mismatch",
            Reason::PairMismatch => "pair_mismatch",
            Reason::NonCooperation => "non_cooperation",
            Reason::ProofFailed => "proof_failed",
        };
        f.write_str(s)
    }
}

/// A participant found cheating, with where and why.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Verdict {
    pub participant: ParticipantId,
    pub reason: Reason,
    pub epoch: u32,
    pub node: u64,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{} {} (epoch {}, node {})", self.participant, self.reason, self.epoch, self.node)
    }
}
