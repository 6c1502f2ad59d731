//! The public side of a run. Given the header data and the broadcast records
//! in order, it recomputes every aggregate, validity bit, proof check, tree
//! transition and verdict. The simulator and the transcript verifier both
//! drive the same referee, so a replay must reproduce the recorded outcomes.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcnet::{
    aggregate_round, encode_opt_bytes, investigate, opt_hex, Publication, RoundCiphertext, RoundError,
};
use crate::group::{Commitment, GroupParams, Scalar};
use crate::keysetup::{verify_signature, KeyGraphPublic, ParticipantId, Signature, SigningKey, VerifyingKey};
use crate::splitter::{
    blame_statement, proof_context, retransmission_statement, verify_blame, verify_retransmission, BlameTrigger,
    CiphertextStore, ResolutionTree, SlotCodec, TreeNode,
};
use crate::verdict::{Reason, Verdict};

pub const RETRANSMISSION_TAG: &[u8] = b"retransmission";
pub const BLAME_TAG: &[u8] = b"blame";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RefereeError {
    #[error("expected {expected}, got {got}")]
    Unexpected { expected: String, got: String },
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("{kind} attributed to participant {participant} lacks their signature")]
    Unsigned { kind: &'static str, participant: ParticipantId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefereeConfig {
    pub codec: SlotCodec,
    pub max_retries: u32,
    pub max_epochs: u32,
}

/// What the referee accepts next.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Expect {
    Round { epoch: u32, node: u64, pad_round: u64 },
    Investigation { epoch: u32, node: u64, pad_round: u64 },
    Blame { epoch: u32, nodes: Vec<u64> },
    Done,
}

impl Expect {
    fn describe(&self) -> String {
        match self {
            Expect::Round { epoch, node, pad_round } => format!("round (epoch {epoch}, node {node}, pad round {pad_round})"),
            Expect::Investigation { epoch, node, .. } => format!("investigation (epoch {epoch}, node {node})"),
            Expect::Blame { epoch, nodes } => format!("blame (epoch {epoch}, nodes {nodes:?})"),
            Expect::Done => "end of run".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    EpochLimit,
    BudgetExhausted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProofCheck {
    Verified,
    Missing,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofResult {
    pub participant: ParticipantId,
    pub node: u64,
    pub check: ProofCheck,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivered {
    pub epoch: u32,
    pub node: u64,
    #[serde(with = "crate::splitter::dec")]
    pub payload: BigUint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub sum: Scalar,
    pub valid: bool,
    pub proofs: Vec<ProofResult>,
    pub tree: Vec<TreeNode>,
    pub delivered: Vec<Delivered>,
    pub blame: Vec<BlameTrigger>,
    pub verdicts: Vec<Verdict>,
    pub next: Expect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvestigationOutcome {
    pub verdicts: Vec<Verdict>,
    pub next: Expect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlameProof {
    pub participant: ParticipantId,
    pub node: u64,
    #[serde(with = "opt_hex")]
    pub proof: Option<Vec<u8>>,
    #[serde(default)]
    pub signature: Option<Signature>,
}

impl BlameProof {
    fn signed_bytes(&self, epoch: u32, pad_round: u64) -> Vec<u8> {
        let mut out = b"dcmesh/blame-proof".to_vec();
        out.extend_from_slice(&epoch.to_be_bytes());
        out.extend_from_slice(&pad_round.to_be_bytes());
        out.extend_from_slice(&self.participant.to_be_bytes());
        out.extend_from_slice(&self.node.to_be_bytes());
        encode_opt_bytes(self.proof.as_deref(), &mut out);
        out
    }

    pub fn sign<R: RngCore + ?Sized>(
        &mut self,
        params: &GroupParams,
        key: &SigningKey,
        epoch: u32,
        pad_round: u64,
        rng: &mut R,
    ) {
        self.signature = Some(key.sign(params, &self.signed_bytes(epoch, pad_round), rng));
    }

    pub fn is_signed_by(&self, params: &GroupParams, key: &VerifyingKey, epoch: u32, pad_round: u64) -> bool {
        self.signature
            .as_ref()
            .is_some_and(|sig| verify_signature(params, key, &self.signed_bytes(epoch, pad_round), sig))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlameOutcome {
    pub proofs: Vec<ProofResult>,
    pub verdicts: Vec<Verdict>,
    pub next: Expect,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub transmitted_rounds: u64,
    pub proofs_verified: u64,
    pub proofs_failed: u64,
    pub proofs_missing: u64,
    pub epochs: u32,
}

#[derive(Clone, Debug)]
pub struct Referee {
    params: GroupParams,
    public: KeyGraphPublic,
    config: RefereeConfig,
    epoch: u32,
    active: BTreeSet<ParticipantId>,
    tree: Option<ResolutionTree>,
    trees: Vec<ResolutionTree>,
    store: CiphertextStore,
    pad_round: u64,
    expect: Expect,
    disputed: BTreeMap<ParticipantId, Commitment>,
    delivered: Vec<Delivered>,
    verdicts: Vec<Verdict>,
    stats: Stats,
    status: RunStatus,
}

impl Referee {
    pub fn new(params: GroupParams, public: KeyGraphPublic, config: RefereeConfig) -> Self {
        let active = (0..public.n).collect();
        let mut r = Referee {
            params,
            public,
            config,
            epoch: 0,
            active,
            tree: None,
            trees: Vec::new(),
            store: CiphertextStore::new(),
            pad_round: 0,
            expect: Expect::Done,
            disputed: BTreeMap::new(),
            delivered: Vec::new(),
            verdicts: Vec::new(),
            stats: Stats { epochs: 1, ..Stats::default() },
            status: RunStatus::Running,
        };
        r.expect = r.round_or_stop(1);
        r
    }

    fn key_of(&self, participant: ParticipantId) -> Result<&VerifyingKey, RefereeError> {
        self.public
            .public_keys
            .get(participant as usize)
            .ok_or_else(|| RefereeError::Malformed(format!("unknown participant {participant}")))
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn public(&self) -> &KeyGraphPublic {
        &self.public
    }

    pub fn config(&self) -> &RefereeConfig {
        &self.config
    }

    pub fn expect(&self) -> &Expect {
        &self.expect
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn active(&self) -> &BTreeSet<ParticipantId> {
        &self.active
    }

    pub fn tree(&self) -> Option<&ResolutionTree> {
        self.tree.as_ref()
    }

    /// Final state of every tree, one per epoch that got past its root round.
    pub fn trees(&self) -> Vec<&ResolutionTree> {
        self.trees.iter().chain(self.tree.as_ref()).collect()
    }

    /// Index of the next pad round; blame proofs are bound to it.
    pub fn pad_round(&self) -> u64 {
        self.pad_round
    }

    pub fn store(&self) -> &CiphertextStore {
        &self.store
    }

    pub fn delivered(&self) -> &[Delivered] {
        &self.delivered
    }

    pub fn is_delivered(&self, epoch: u32, node: u64) -> bool {
        self.delivered.iter().any(|d| d.epoch == epoch && d.node == node)
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    fn round_or_stop(&mut self, node: u64) -> Expect {
        if self.pad_round >= self.public.rounds {
            self.status = RunStatus::BudgetExhausted;
            return Expect::Done;
        }
        Expect::Round { epoch: self.epoch, node, pad_round: self.pad_round }
    }

    fn ban(&mut self, found: &[Verdict]) {
        for v in found {
            self.active.remove(&v.participant);
            self.verdicts.push(v.clone());
        }
    }

    /// Ends the current epoch early and schedules a fresh root round.
    fn restart(&mut self) -> Expect {
        if let Some(t) = self.tree.take() {
            self.trees.push(t);
        }
        self.store = CiphertextStore::new();
        self.disputed.clear();
        if self.epoch + 1 >= self.config.max_epochs {
            self.status = RunStatus::EpochLimit;
            return Expect::Done;
        }
        self.epoch += 1;
        self.stats.epochs += 1;
        if self.active.is_empty() {
            self.status = RunStatus::Complete;
            return Expect::Done;
        }
        self.round_or_stop(1)
    }

    fn unexpected(&self, got: &str) -> RefereeError {
        RefereeError::Unexpected { expected: self.expect.describe(), got: got.into() }
    }

    pub fn apply_round(&mut self, ciphertexts: Vec<RoundCiphertext>) -> Result<RoundOutcome, RefereeError> {
        let Expect::Round { epoch, node, pad_round } = self.expect.clone() else {
            return Err(self.unexpected("round"));
        };
        for ct in &ciphertexts {
            if self.params.check_scalar(&ct.o).is_err() || self.params.check_element(ct.c.element()).is_err() {
                return Err(RefereeError::Malformed(format!("ciphertext of participant {} out of range", ct.participant)));
            }
            let key = self.key_of(ct.participant)?;
            if !ct.is_signed_by(&self.params, key) {
                return Err(RefereeError::Unsigned { kind: "ciphertext", participant: ct.participant });
            }
        }
        let result = aggregate_round(&self.params, pad_round, &self.active, ciphertexts)?;
        self.pad_round += 1;
        self.stats.transmitted_rounds += 1;
        let mut out = RoundOutcome {
            sum: result.sum.clone(),
            valid: result.valid,
            proofs: Vec::new(),
            tree: Vec::new(),
            delivered: Vec::new(),
            blame: Vec::new(),
            verdicts: Vec::new(),
            next: Expect::Done,
        };
        let mut cts = result.ciphertexts;
        cts.sort_by_key(|c| c.participant);

        if !result.valid {
            self.disputed = cts.iter().map(|c| (c.participant, c.c.clone())).collect();
            self.expect = Expect::Investigation { epoch, node, pad_round };
            out.next = self.expect.clone();
            return Ok(out);
        }

        if node != 1 {
            for ct in &cts {
                let ctx = proof_context(RETRANSMISSION_TAG, epoch, node, ct.participant, pad_round);
                let stmt = retransmission_statement(&self.params, &self.store, ct.participant, node, &ct.o, &ct.c, &ctx);
                let check = match (&ct.proof, stmt) {
                    (None, _) => ProofCheck::Missing,
                    (Some(bytes), Some(stmt)) if verify_retransmission(&self.params, &stmt, bytes) => ProofCheck::Verified,
                    _ => ProofCheck::Failed,
                };
                self.count_check(check);
                if let Some(reason) = verdict_reason(check) {
                    out.verdicts.push(Verdict { participant: ct.participant, reason, epoch, node });
                }
                out.proofs.push(ProofResult { participant: ct.participant, node, check });
            }
            if !out.verdicts.is_empty() {
                self.ban(&out.verdicts);
                self.expect = self.restart();
                out.next = self.expect.clone();
                return Ok(out);
            }
        }

        for ct in &cts {
            self.store.insert(node, ct.participant, ct.o.clone(), ct.c.clone());
        }
        let report = if node == 1 {
            let (tree, report) = ResolutionTree::new(self.config.codec, self.config.max_retries, result.sum);
            self.tree = Some(tree);
            report
        } else {
            let tree = self.tree.as_mut().expect("non-root round has a tree");
            tree.advance(&self.params, node, result.sum)
                .map_err(|e| RefereeError::Malformed(e.to_string()))?
        };
        let blamed: BTreeSet<u64> = report.blame.iter().map(|b| b.node).collect();
        let tree = self.tree.as_ref().expect("tree exists");
        for id in &report.resolved {
            if !blamed.contains(id) {
                let payload = tree.node(*id).and_then(|n| n.payload()).expect("resolved node").clone();
                let d = Delivered { epoch, node: *id, payload };
                self.delivered.push(d.clone());
                out.delivered.push(d);
            }
        }
        out.tree = report.nodes;
        out.blame = report.blame;
        self.expect = if !blamed.is_empty() {
            Expect::Blame { epoch, nodes: blamed.into_iter().collect() }
        } else if let Some(next) = tree.next_round() {
            self.round_or_stop(next)
        } else {
            self.status = RunStatus::Complete;
            if let Some(t) = self.tree.take() {
                self.trees.push(t);
            }
            Expect::Done
        };
        out.next = self.expect.clone();
        Ok(out)
    }

    fn count_check(&mut self, check: ProofCheck) {
        match check {
            ProofCheck::Verified => self.stats.proofs_verified += 1,
            ProofCheck::Failed => self.stats.proofs_failed += 1,
            ProofCheck::Missing => self.stats.proofs_missing += 1,
        }
    }

    pub fn apply_investigation(&mut self, publications: Vec<Publication>) -> Result<InvestigationOutcome, RefereeError> {
        let Expect::Investigation { epoch, node, pad_round } = self.expect.clone() else {
            return Err(self.unexpected("investigation"));
        };
        let mut owners = BTreeSet::new();
        for p in &publications {
            if !owners.insert(p.participant) {
                return Err(RefereeError::Malformed(format!("two publications from participant {}", p.participant)));
            }
            if !p.is_signed_by(&self.params, self.key_of(p.participant)?, pad_round) {
                return Err(RefereeError::Unsigned { kind: "publication", participant: p.participant });
            }
            for e in &p.entries {
                if self.params.check_element(e.commitment.element()).is_err() {
                    return Err(RefereeError::Malformed("published commitment out of range".into()));
                }
            }
        }
        let record = investigate(&self.params, &self.public, pad_round, &self.disputed, publications);
        let verdicts: Vec<Verdict> = record
            .verdicts
            .iter()
            .map(|(&participant, &reason)| Verdict { participant, reason, epoch, node })
            .collect();
        self.ban(&verdicts);
        self.expect = self.restart();
        Ok(InvestigationOutcome { verdicts, next: self.expect.clone() })
    }

    pub fn apply_blame(&mut self, proofs: Vec<BlameProof>) -> Result<BlameOutcome, RefereeError> {
        let Expect::Blame { epoch, nodes } = self.expect.clone() else {
            return Err(self.unexpected("blame"));
        };
        let mut given: BTreeMap<(u64, ParticipantId), &BlameProof> = BTreeMap::new();
        for p in &proofs {
            if !nodes.contains(&p.node) || !self.active.contains(&p.participant) {
                return Err(RefereeError::Malformed(format!("unexpected blame proof ({}, {})", p.participant, p.node)));
            }
            if given.insert((p.node, p.participant), p).is_some() {
                return Err(RefereeError::Malformed(format!("duplicate blame proof ({}, {})", p.participant, p.node)));
            }
            if !p.is_signed_by(&self.params, self.key_of(p.participant)?, epoch, self.pad_round) {
                return Err(RefereeError::Unsigned { kind: "blame proof", participant: p.participant });
            }
        }
        let mut results = Vec::new();
        let mut found: BTreeMap<ParticipantId, Verdict> = BTreeMap::new();
        let active: Vec<ParticipantId> = self.active.iter().copied().collect();
        for &node in &nodes {
            for &i in &active {
                let ctx = proof_context(BLAME_TAG, epoch, node, i, self.pad_round);
                let stmt = blame_statement(&self.params, &self.store, i, node, &ctx);
                let check = match (given.get(&(node, i)).and_then(|p| p.proof.as_ref()), stmt) {
                    (None, _) => ProofCheck::Missing,
                    (Some(bytes), Some(stmt)) if verify_blame(&self.params, &stmt, bytes) => ProofCheck::Verified,
                    _ => ProofCheck::Failed,
                };
                self.count_check(check);
                if let Some(reason) = verdict_reason(check) {
                    found.entry(i).or_insert(Verdict { participant: i, reason, epoch, node });
                }
                results.push(ProofResult { participant: i, node, check });
            }
        }
        let verdicts: Vec<Verdict> = found.into_values().collect();
        self.ban(&verdicts);
        self.expect = self.restart();
        Ok(BlameOutcome { proofs: results, verdicts, next: self.expect.clone() })
    }
}

fn verdict_reason(check: ProofCheck) -> Option<Reason> {
    match check {
        ProofCheck::Verified => None,
        ProofCheck::Missing => Some(Reason::NonCooperation),
        ProofCheck::Failed => Some(Reason::ProofFailed),
    }
}
