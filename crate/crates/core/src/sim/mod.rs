//! Lock-step simulation of a full run: key setup, DC-net rounds, collision
//! resolution, investigations and blame, recorded as a replayable transcript.

pub mod participant;
pub mod referee;
pub mod scenario;
pub mod transcript;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dcnet::{PadBook, RoundError};
use crate::group::{GroupError, GroupParams};
use crate::keysetup::{generate_keys, KeyGraph, ParticipantId, SetupError, SigningKey};
use crate::splitter::ResolutionTree;
use crate::verdict::Verdict;
pub use participant::Participant;
pub use referee::{Expect, Referee, RefereeConfig, RefereeError, RunStatus};
pub use scenario::{AdversarySpec, Scenario, SenderSpec, Strategy};
pub use transcript::{
    verify_transcript, Divergence, Header, Record, Summary, Transcript, TranscriptError, VerificationReport,
    TRANSCRIPT_VERSION,
};

/// Domain tag for deriving the group and every hash in a run.
pub const DOMAIN_TAG: &[u8] = b"dc-mesh/v1";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error(transparent)]
    Referee(#[from] RefereeError),
    #[error("internal error: {0}")]
    Internal(String),
}

/// Independent ChaCha20 stream for `(seed, label, id)`.
pub fn derive_rng(seed: u64, label: &str, id: u32) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"dcmesh/rng");
    h.update(seed.to_be_bytes());
    h.update((label.len() as u32).to_be_bytes());
    h.update(label.as_bytes());
    h.update(id.to_be_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

#[derive(Debug)]
pub struct RunOutput {
    pub transcript: Transcript,
    pub summary: Summary,
    /// Final tree of every epoch that got past its root round.
    pub trees: Vec<ResolutionTree>,
    /// Honest participants whose message never got delivered.
    pub undelivered: Vec<u32>,
}

impl RunOutput {
    pub fn transmitted_rounds(&self) -> u64 {
        self.summary.stats.transmitted_rounds
    }

    pub fn delivered_payloads(&self) -> Vec<u64> {
        self.summary.delivered.iter().map(|d| d.payload.iter_u64_digits().next().unwrap_or(0)).collect()
    }

    pub fn verdict_participants(&self) -> Vec<u32> {
        self.summary.verdicts.iter().map(|v| v.participant).collect()
    }
}

pub fn group_for(scenario: &Scenario) -> Result<GroupParams, SimError> {
    Ok(GroupParams::derive(scenario.group, DOMAIN_TAG)?)
}

/// Key setup only: the public key graph a run would start from.
pub fn keygen(scenario: &Scenario) -> Result<(GroupParams, KeyGraph), SimError> {
    setup(scenario).map(|(params, _, graph)| (params, graph))
}

fn setup(scenario: &Scenario) -> Result<(GroupParams, Vec<SigningKey>, KeyGraph), SimError> {
    let params = group_for(scenario)?;
    let derived = scenario.validate(&params)?;
    let keys: Vec<_> = (0..scenario.n)
        .map(|i| generate_keys(&params, 1, &mut derive_rng(scenario.seed, "signing-key", i)).remove(0))
        .collect();
    let mut setup_rng = derive_rng(scenario.seed, "setup", 0);
    let graph = KeyGraph::setup(&params, &keys, derived.round_budget, &scenario.refusals(), &mut setup_rng)?;
    Ok((params, keys, graph))
}

pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput, SimError> {
    let (params, keys, graph) = setup(scenario)?;
    // signing nonces come from their own streams so they never shift protocol randomness
    let mut signers: Vec<ChaCha20Rng> = (0..scenario.n).map(|i| derive_rng(scenario.seed, "broadcast", i)).collect();
    let derived = scenario.validate(&params)?;
    let header = Header {
        version: TRANSCRIPT_VERSION.into(),
        scenario: scenario.clone(),
        scenario_digest: hex::encode(scenario.digest()),
        security_level: scenario.group,
        group: params.to_record(),
        codec: derived.codec,
        max_retries: scenario.max_retries,
        max_epochs: derived.max_epochs,
        key_graph: graph.public().clone(),
    };
    let mut transcript = Transcript::default();
    transcript.push(&Record::Header(Box::new(header)));

    let mut participants: Vec<Participant<'_>> = (0..scenario.n)
        .map(|i| {
            let adv = scenario.adversaries.iter().find(|a| a.participant == i);
            Participant::new(
                i,
                adv.map(|a| a.strategy),
                scenario.payload_of(i),
                adv.and_then(|a| a.payload),
                PadBook::new(&graph, i),
                derive_rng(scenario.seed, "participant", i),
            )
        })
        .collect();
    let config = RefereeConfig { codec: derived.codec, max_retries: scenario.max_retries, max_epochs: derived.max_epochs };
    let mut referee = Referee::new(params, graph.public().clone(), config);

    loop {
        let record = match referee.expect().clone() {
            Expect::Done => break,
            Expect::Round { epoch, node, pad_round } => {
                let active: Vec<u32> = referee.active().iter().copied().collect();
                let mut cts = Vec::with_capacity(active.len());
                for i in active {
                    let mut ct = participants[i as usize].on_round(&referee, epoch, node, pad_round)?;
                    ct.sign(referee.params(), &keys[i as usize], &mut signers[i as usize]);
                    cts.push(ct);
                }
                let outcome = referee.apply_round(cts.clone())?;
                transcript::RoundRecord { epoch, node, pad_round, ciphertexts: cts, outcome }.into()
            }
            Expect::Investigation { epoch, node, pad_round } => {
                let active: Vec<u32> = referee.active().iter().copied().collect();
                let mut pubs = Vec::with_capacity(active.len());
                for i in active {
                    let mut publication = participants[i as usize].on_investigation(&referee, pad_round)?;
                    publication.sign(referee.params(), &keys[i as usize], pad_round, &mut signers[i as usize]);
                    pubs.push(publication);
                }
                let outcome = referee.apply_investigation(pubs.clone())?;
                transcript::InvestigationRecord { epoch, node, pad_round, publications: pubs, outcome }.into()
            }
            Expect::Blame { epoch, nodes } => {
                let active: Vec<u32> = referee.active().iter().copied().collect();
                let mut proofs = Vec::new();
                for i in active {
                    for mut proof in participants[i as usize].on_blame(&referee, epoch, &nodes) {
                        let k = &keys[i as usize];
                        proof.sign(referee.params(), k, epoch, referee.pad_round(), &mut signers[i as usize]);
                        proofs.push(proof);
                    }
                }
                let outcome = referee.apply_blame(proofs.clone())?;
                transcript::BlameRecord { epoch, nodes, proofs, outcome }.into()
            }
        };
        transcript.push(&record);
        for p in participants.iter_mut() {
            p.observe(&referee);
        }
    }

    let summary = Summary {
        status: referee.status(),
        delivered: referee.delivered().to_vec(),
        verdicts: referee.verdicts().to_vec(),
        stats: referee.stats().clone(),
        digest: transcript.digest(),
    };
    transcript.push(&Record::Summary(summary.clone()));
    let undelivered = participants
        .iter()
        .filter(|p| p.is_honest() && p.payload().is_some() && !p.delivered())
        .map(|p| p.id())
        .collect();
    Ok(RunOutput { transcript, summary, trees: referee.trees().into_iter().cloned().collect(), undelivered })
}

impl From<transcript::RoundRecord> for Record {
    fn from(r: transcript::RoundRecord) -> Self {
        Record::Round(r)
    }
}

impl From<transcript::InvestigationRecord> for Record {
    fn from(r: transcript::InvestigationRecord) -> Self {
        Record::Investigation(r)
    }
}

impl From<transcript::BlameRecord> for Record {
    fn from(r: transcript::BlameRecord) -> Self {
        Record::Blame(r)
    }
}

#[cfg(test)]
mod tests;

/// Result of [`resolve`].
#[derive(Debug)]
pub struct Resolution {
    /// Delivered payloads in tree order.
    pub messages: Vec<u64>,
    pub transmitted_rounds: u64,
    pub verdicts: Vec<Verdict>,
    pub transcript: Transcript,
}

/// Runs one full session among `n` participants in the test group.
pub fn resolve(
    n: u32,
    senders: &[(ParticipantId, u64)],
    adversaries: &[(ParticipantId, Strategy)],
    seed: u64,
) -> Result<Resolution, SimError> {
    let mut scenario = Scenario::new(n, senders).with_seed(seed);
    for &(pid, strategy) in adversaries {
        scenario = scenario.with_adversary(pid, strategy);
    }
    let out = run_scenario(&scenario)?;
    Ok(Resolution {
        messages: out.delivered_payloads(),
        transmitted_rounds: out.transmitted_rounds(),
        verdicts: out.summary.verdicts,
        transcript: out.transcript,
    })
}
