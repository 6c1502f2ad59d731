//! Newline-delimited JSON transcripts and their independent replay.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::referee::{
    BlameOutcome, BlameProof, Delivered, Expect, InvestigationOutcome, Referee, RefereeConfig, RoundOutcome, RunStatus,
    Stats,
};
use super::scenario::Scenario;
use super::DOMAIN_TAG;
use crate::dcnet::{Publication, RoundCiphertext};
use crate::group::{GroupParams, GroupRecord, SecurityLevel};
use crate::keysetup::{KeyGraphPublic, PublicEdgeState};
use crate::splitter::SlotCodec;
use crate::verdict::Verdict;

pub const TRANSCRIPT_VERSION: &str = "dcmesh-transcript/1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub version: String,
    pub scenario: Scenario,
    pub scenario_digest: String,
    pub security_level: SecurityLevel,
    pub group: GroupRecord,
    pub codec: SlotCodec,
    pub max_retries: u32,
    pub max_epochs: u32,
    pub key_graph: KeyGraphPublic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub epoch: u32,
    pub node: u64,
    pub pad_round: u64,
    pub ciphertexts: Vec<RoundCiphertext>,
    pub outcome: RoundOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvestigationRecord {
    pub epoch: u32,
    pub node: u64,
    pub pad_round: u64,
    pub publications: Vec<Publication>,
    pub outcome: InvestigationOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlameRecord {
    pub epoch: u32,
    pub nodes: Vec<u64>,
    pub proofs: Vec<BlameProof>,
    pub outcome: BlameOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub status: RunStatus,
    pub delivered: Vec<Delivered>,
    pub verdicts: Vec<Verdict>,
    pub stats: Stats,
    /// SHA-256 over every preceding line including its newline.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Header(Box<Header>),
    Round(RoundRecord),
    Investigation(InvestigationRecord),
    Blame(BlameRecord),
    Summary(Summary),
}

impl Record {
    fn kind(&self) -> &'static str {
        match self {
            Record::Header(_) => "header",
            Record::Round(_) => "round",
            Record::Investigation(_) => "investigation",
            Record::Blame(_) => "blame",
            Record::Summary(_) => "summary",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    lines: Vec<String>,
}

impl Transcript {
    pub fn push(&mut self, record: &Record) {
        self.lines.push(serde_json::to_string(record).expect("records serialize"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn digest(&self) -> String {
        lines_digest(&self.lines)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    pub fn records(&self) -> Vec<Record> {
        self.lines.iter().map(|l| serde_json::from_str(l).expect("own records parse")).collect()
    }

    pub fn summary(&self) -> Option<Summary> {
        match serde_json::from_str(self.lines.last()?) {
            Ok(Record::Summary(s)) => Some(s),
            _ => None,
        }
    }
}

fn lines_digest(lines: &[impl AsRef<str>]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_ref().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub index: usize,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct VerificationReport {
    pub records: usize,
    pub divergences: Vec<Divergence>,
    pub summary: Option<Summary>,
}

impl VerificationReport {
    pub fn is_clean(&self) -> bool {
        self.divergences.is_empty()
    }

    pub fn first_divergence(&self) -> Option<&Divergence> {
        self.divergences.first()
    }
}

/// Checks the header and returns the referee that replays the rest.
fn check_header(header: &Header, report: &mut VerificationReport) -> Result<Referee, String> {
    let mut diverge = |detail: String| report.divergences.push(Divergence { index: 0, detail });
    if header.version != TRANSCRIPT_VERSION {
        return Err(format!("unsupported version `{}`", header.version));
    }
    let params = GroupParams::from_record(&header.group).map_err(|e| format!("invalid group: {e}"))?;
    if header.scenario.group != header.security_level {
        diverge("security level differs from scenario".into());
    }
    match GroupParams::derive(header.security_level, DOMAIN_TAG) {
        Ok(expected) if expected.to_record() == header.group => {}
        _ => diverge("group parameters differ from the canonical ones".into()),
    }
    if hex::encode(header.scenario.digest()) != header.scenario_digest {
        diverge("scenario digest mismatch".into());
    }
    match header.scenario.validate(&params) {
        Ok(d) => {
            if d.codec != header.codec {
                diverge("slot layout differs from scenario".into());
            }
            if d.max_epochs != header.max_epochs {
                diverge("epoch limit differs from scenario".into());
            }
            if d.round_budget != header.key_graph.rounds {
                diverge("round budget differs from scenario".into());
            }
        }
        Err(e) => diverge(format!("scenario invalid: {e}")),
    }
    if header.max_retries != header.scenario.max_retries {
        diverge("max_retries differs from scenario".into());
    }
    let kg = &header.key_graph;
    if kg.n != header.scenario.n || kg.public_keys.len() != kg.n as usize {
        return Err("key graph size does not match scenario".into());
    }
    let expected_edges: Vec<(u32, u32)> = (0..kg.n).flat_map(|lo| (lo + 1..kg.n).map(move |hi| (lo, hi))).collect();
    let edges: Vec<(u32, u32)> = kg.edges.iter().map(|e| (e.low, e.high)).collect();
    if edges != expected_edges {
        return Err("key graph is not complete".into());
    }
    for k in &kg.public_keys {
        if params.check_element(&k.0).is_err() {
            diverge("public key outside the group".into());
        }
    }
    let bad = kg.bad_root_signatures(&params);
    if !bad.is_empty() {
        diverge(format!("invalid endorsements {bad:?}"));
    }
    let refusals = header.scenario.refusals();
    let claimed: BTreeSet<(u32, u32)> = refusals.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    for e in &kg.edges {
        let opted = matches!(e.state, PublicEdgeState::OptedOut { .. });
        if opted != claimed.contains(&(e.low, e.high)) {
            diverge(format!("opt-out state of edge ({}, {}) differs from scenario", e.low, e.high));
        }
    }
    let config = RefereeConfig { codec: header.codec, max_retries: header.max_retries, max_epochs: header.max_epochs };
    Ok(Referee::new(params, kg.clone(), config))
}

fn expect_matches(expect: &Expect, record: &Record) -> bool {
    match (expect, record) {
        (Expect::Round { epoch, node, pad_round }, Record::Round(r)) => {
            (r.epoch, r.node, r.pad_round) == (*epoch, *node, *pad_round)
        }
        (Expect::Investigation { epoch, node, pad_round }, Record::Investigation(r)) => {
            (r.epoch, r.node, r.pad_round) == (*epoch, *node, *pad_round)
        }
        (Expect::Blame { epoch, nodes }, Record::Blame(r)) => r.epoch == *epoch && &r.nodes == nodes,
        _ => false,
    }
}

/// Replays a transcript from its text. Unparseable input is an error;
/// anything that parses but disagrees with the replay is a divergence.
pub fn verify_transcript(text: &str) -> Result<VerificationReport, TranscriptError> {
    let lines: Vec<&str> = text.lines().collect();
    let malformed = |index: usize, reason: String| TranscriptError::MalformedRecord { index, reason };
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(malformed(lines.len().saturating_sub(1), "truncated final line".into()));
    }
    let mut records = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        records.push(serde_json::from_str::<Record>(l).map_err(|e| malformed(i, e.to_string()))?);
    }
    let Some(Record::Header(header)) = records.first() else {
        return Err(malformed(0, "transcript must start with a header".into()));
    };
    let last = records.len() - 1;
    let Record::Summary(summary) = &records[last] else {
        return Err(malformed(last, "transcript must end with a summary".into()));
    };
    if last == 0 {
        return Err(malformed(0, "header without summary".into()));
    }
    for (i, r) in records.iter().enumerate().take(last).skip(1) {
        if matches!(r, Record::Header(_) | Record::Summary(_)) {
            return Err(malformed(i, format!("unexpected {} record", r.kind())));
        }
    }

    let mut report = VerificationReport { records: records.len(), summary: Some(summary.clone()), ..Default::default() };
    let mut referee = check_header(header, &mut report).map_err(|reason| malformed(0, reason))?;
    let mut diverge = |index: usize, detail: String| report.divergences.push(Divergence { index, detail });

    let mut replay_ok = true;
    for (index, record) in records.iter().enumerate().take(last).skip(1) {
        if !expect_matches(referee.expect(), record) {
            diverge(index, format!("expected {:?}, found a {} record", referee.expect(), record.kind()));
            replay_ok = false;
            break;
        }
        let applied = match record {
            Record::Round(r) => referee
                .apply_round(r.ciphertexts.clone())
                .map(|o| (o != r.outcome).then(|| outcome_diff("round", &o, &r.outcome))),
            Record::Investigation(r) => referee
                .apply_investigation(r.publications.clone())
                .map(|o| (o != r.outcome).then(|| outcome_diff("investigation", &o, &r.outcome))),
            Record::Blame(r) => referee
                .apply_blame(r.proofs.clone())
                .map(|o| (o != r.outcome).then(|| outcome_diff("blame", &o, &r.outcome))),
            Record::Header(_) | Record::Summary(_) => unreachable!("checked above"),
        };
        match applied {
            Ok(None) => {}
            Ok(Some(detail)) => diverge(index, detail),
            Err(e) => {
                diverge(index, format!("replay rejected the record: {e}"));
                replay_ok = false;
                break;
            }
        }
    }
    if replay_ok && referee.expect() != &Expect::Done {
        diverge(last, format!("transcript ends while {:?} is pending", referee.expect()));
    }
    if replay_ok {
        if summary.status != referee.status() {
            diverge(last, "summary status differs from replay".into());
        }
        if summary.delivered != referee.delivered() {
            diverge(last, "delivered messages differ from replay".into());
        }
        if summary.verdicts != referee.verdicts() {
            diverge(last, "verdicts differ from replay".into());
        }
        if &summary.stats != referee.stats() {
            diverge(last, "statistics differ from replay".into());
        }
    }
    if summary.digest != lines_digest(&lines[..last]) {
        diverge(last, "digest does not cover the preceding records".into());
    }
    Ok(report)
}

fn outcome_diff<T: Serialize>(kind: &str, replayed: &T, recorded: &T) -> String {
    let a = serde_json::to_value(replayed).expect("serializes");
    let b = serde_json::to_value(recorded).expect("serializes");
    let mut fields = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, v) in a {
            if b.get(k) != Some(v) {
                fields.push(k.clone());
            }
        }
    }
    format!("{kind} outcome differs from replay in {}", fields.join(", "))
}
