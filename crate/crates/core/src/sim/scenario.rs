use std::collections::BTreeSet;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SimError;
use crate::group::{GroupParams, SecurityLevel};
use crate::keysetup::ParticipantId;
use crate::splitter::{SlotCodec, DEFAULT_MAX_RETRIES};

pub const MAX_PARTICIPANTS: u32 = 64;
pub const MAX_RETRIES_CAP: u32 = 40;

/// Scripted misbehaviour, one detection path each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Shifts one pad in the root round and commits to the shifted value.
    BadPad,
    /// Inverts every deterministic split decision.
    WrongBranch,
    /// Sends its message left at the first split and keeps adding it later.
    DoubleBranch,
    /// Adds one to its first retransmission.
    MutateMessage,
    /// A non-sender that starts sending in the middle of the tree.
    LateInjection,
    /// Enters the root round with count 2.
    BadSlotCount,
    /// Refuses to endorse one peer during setup.
    RefuseSignature,
    /// Withholds its first retransmission proof.
    RefuseProof,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::BadPad,
        Strategy::WrongBranch,
        Strategy::DoubleBranch,
        Strategy::MutateMessage,
        Strategy::LateInjection,
        Strategy::BadSlotCount,
        Strategy::RefuseSignature,
        Strategy::RefuseProof,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::BadPad => "bad_pad",
            Strategy::WrongBranch => "wrong_branch",
            Strategy::DoubleBranch => "double_branch",
            Strategy::MutateMessage => "mutate_message",
            Strategy::LateInjection => "late_injection",
            Strategy::BadSlotCount => "bad_slot_count",
            Strategy::RefuseSignature => "refuse_signature",
            Strategy::RefuseProof => "refuse_proof",
        }
    }

    /// Strategies that act on the participant's own message.
    pub fn needs_message(self) -> bool {
        matches!(
            self,
            Strategy::WrongBranch | Strategy::DoubleBranch | Strategy::MutateMessage | Strategy::BadSlotCount
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SenderSpec {
    pub participant: ParticipantId,
    pub payload: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    pub participant: ParticipantId,
    pub strategy: Strategy,
    /// Injected payload for `late_injection`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<u64>,
}

fn default_group() -> SecurityLevel {
    SecurityLevel::Test
}

fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n: u32,
    #[serde(default = "default_group")]
    pub group: SecurityLevel,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub senders: Vec<SenderSpec>,
    #[serde(default)]
    pub adversaries: Vec<AdversarySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_bits: Option<u32>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_budget: Option<u64>,
}

/// Values derived from a validated scenario.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Derived {
    pub codec: SlotCodec,
    pub round_budget: u64,
    pub max_epochs: u32,
}

impl Scenario {
    pub fn new(n: u32, senders: &[(ParticipantId, u64)]) -> Self {
        Scenario {
            n,
            group: SecurityLevel::Test,
            seed: 0,
            senders: senders.iter().map(|&(participant, payload)| SenderSpec { participant, payload }).collect(),
            adversaries: Vec::new(),
            payload_bits: None,
            max_retries: DEFAULT_MAX_RETRIES,
            round_budget: None,
        }
    }

    pub fn with_adversary(mut self, participant: ParticipantId, strategy: Strategy) -> Self {
        self.adversaries.push(AdversarySpec { participant, strategy, payload: None });
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::ConfigInvalid(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("scenario serializes")).into()
    }

    pub fn strategy_of(&self, id: ParticipantId) -> Option<Strategy> {
        self.adversaries.iter().find(|a| a.participant == id).map(|a| a.strategy)
    }

    pub fn payload_of(&self, id: ParticipantId) -> Option<u64> {
        self.senders.iter().find(|s| s.participant == id).map(|s| s.payload)
    }

    /// `(refuser, peer)` pairs for setup.
    pub fn refusals(&self) -> BTreeSet<(ParticipantId, ParticipantId)> {
        self.adversaries
            .iter()
            .filter(|a| a.strategy == Strategy::RefuseSignature)
            .map(|a| (a.participant, (a.participant + 1) % self.n))
            .collect()
    }

    fn default_payload_bits(&self) -> u32 {
        match self.group {
            SecurityLevel::Production => 128,
            SecurityLevel::Test => 8,
            SecurityLevel::TestSmall => {
                let max = self
                    .senders
                    .iter()
                    .map(|s| s.payload)
                    .chain(self.adversaries.iter().filter_map(|a| a.payload))
                    .max()
                    .unwrap_or(0);
                (64 - max.leading_zeros()).max(1)
            }
        }
    }

    pub fn validate(&self, params: &GroupParams) -> Result<Derived, SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        if self.n == 0 || self.n > MAX_PARTICIPANTS {
            return bad(format!("n must be between 1 and {MAX_PARTICIPANTS}"));
        }
        if self.max_retries == 0 || self.max_retries > MAX_RETRIES_CAP {
            return bad(format!("max_retries must be between 1 and {MAX_RETRIES_CAP}"));
        }
        let mut seen = BTreeSet::new();
        for s in &self.senders {
            if s.participant >= self.n {
                return bad(format!("sender {} is not a participant", s.participant));
            }
            if !seen.insert(s.participant) {
                return bad(format!("participant {} listed twice as sender", s.participant));
            }
        }
        let mut seen = BTreeSet::new();
        for a in &self.adversaries {
            if a.participant >= self.n {
                return bad(format!("adversary {} is not a participant", a.participant));
            }
            if !seen.insert(a.participant) {
                return bad(format!("participant {} listed twice as adversary", a.participant));
            }
            let sends = self.payload_of(a.participant).is_some();
            if a.strategy.needs_message() && !sends {
                return bad(format!("{} needs participant {} to be a sender", a.strategy.name(), a.participant));
            }
            if a.strategy == Strategy::LateInjection && sends {
                return bad(format!("late_injection participant {} must not be a sender", a.participant));
            }
            if a.payload.is_some() && a.strategy != Strategy::LateInjection {
                return bad(format!("payload is only meaningful for late_injection (participant {})", a.participant));
            }
            if a.strategy == Strategy::RefuseSignature && self.n < 2 {
                return bad("refuse_signature needs at least two participants".into());
            }
        }

        let payload_bits = self.payload_bits.unwrap_or_else(|| self.default_payload_bits());
        if payload_bits == 0 || payload_bits as u64 >= params.order_bits() {
            return bad(format!("payload_bits {payload_bits} does not fit the group"));
        }
        let extra = self.adversaries.iter().filter(|a| a.strategy == Strategy::BadSlotCount).count() as u64;
        let codec = SlotCodec::for_capacity(params, payload_bits, self.n as u64 + extra)
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let payloads = self.senders.iter().map(|s| s.payload).chain(self.adversaries.iter().filter_map(|a| a.payload));
        for p in payloads {
            if codec.check_payload(&BigUint::from(p)).is_err() {
                return bad(format!("payload {p} exceeds {payload_bits} bits"));
            }
        }

        let s = self.senders.len() as u64;
        let a = self.adversaries.len() as u64;
        let max_epochs = a as u32 + 2;
        let default_budget = max_epochs as u64 * (4 * (s + a + 1) + self.max_retries as u64 + 2);
        let round_budget = self.round_budget.unwrap_or(default_budget);
        if round_budget == 0 {
            return bad("round_budget must be positive".into());
        }
        Ok(Derived { codec, round_budget, max_epochs })
    }
}
