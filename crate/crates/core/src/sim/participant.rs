//! Participant state machines. Honest participants follow the protocol;
//! adversaries follow it too except for one scripted deviation.

use num_bigint::BigUint;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::referee::{BlameProof, Referee, BLAME_TAG, RETRANSMISSION_TAG};
use super::scenario::Strategy;
use super::SimError;
use crate::dcnet::{make_ciphertext, publish, PadBook, Publication, RoundCiphertext};
use crate::group::{Commitment, GroupParams, Scalar};
use crate::keysetup::ParticipantId;
use crate::splitter::{
    blame_statement, proof_context, retransmission_statement, retransmission_witness, split_decision, Branch,
    Opening, PrivateOpenings, SlotCodec, SplitMode,
};
use crate::zkp::{forge_attempt, prove_and_of_or, OrStatement, RepStatement};

pub struct Participant<'g> {
    id: ParticipantId,
    strategy: Option<Strategy>,
    payload: Option<BigUint>,
    injected: Option<BigUint>,
    delivered: bool,
    pads: PadBook<'g>,
    rng: ChaCha20Rng,
    epoch: Option<u32>,
    message: Option<Scalar>,
    position: Option<u64>,
    openings: PrivateOpenings,
    tampered: bool,
    retransmitted: bool,
    first_split: bool,
}

impl<'g> Participant<'g> {
    pub fn new(
        id: ParticipantId,
        strategy: Option<Strategy>,
        payload: Option<u64>,
        injected: Option<u64>,
        pads: PadBook<'g>,
        rng: ChaCha20Rng,
    ) -> Self {
        Participant {
            id,
            strategy,
            payload: payload.map(BigUint::from),
            injected: injected.map(BigUint::from),
            delivered: false,
            pads,
            rng,
            epoch: None,
            message: None,
            position: None,
            openings: PrivateOpenings::new(),
            tampered: false,
            retransmitted: false,
            first_split: false,
        }
    }

    pub fn id(&self) -> ParticipantId {
        self.id
    }

    pub fn is_honest(&self) -> bool {
        self.strategy.is_none() || self.strategy == Some(Strategy::RefuseSignature)
    }

    pub fn payload(&self) -> Option<&BigUint> {
        self.payload.as_ref()
    }

    pub fn delivered(&self) -> bool {
        self.delivered
    }

    fn is(&self, s: Strategy) -> bool {
        self.strategy == Some(s)
    }

    /// Produces this participant's broadcast for the referee's current round.
    pub fn on_round(&mut self, referee: &Referee, epoch: u32, node: u64, pad_round: u64) -> Result<RoundCiphertext, SimError> {
        let params = referee.params();
        let codec = referee.config().codec;
        if node == 1 {
            self.start_epoch(params, &codec, epoch)?;
            let send = self.message.clone();
            let (mut ct, pad) = make_ciphertext(params, &mut self.pads, pad_round, referee.active(), send.as_ref())?;
            if self.is(Strategy::BadPad) && !self.tampered {
                self.tampered = true;
                ct.o = params.add(&ct.o, &params.scalar(1));
                ct.c = params.combine(&ct.c, &Commitment::from(params.g().clone()));
            }
            self.openings.insert(1, Opening { r: pad.r, msg: send.unwrap_or_else(|| params.zero()) });
            return Ok(ct);
        }

        let k = node / 2;
        let tree = referee.tree().ok_or_else(|| SimError::Internal("round without tree".into()))?;
        let parent = tree.node(k).ok_or_else(|| SimError::Internal(format!("missing node {k}")))?;
        let mut send = params.zero();
        if self.position == Some(k) {
            let t = parent.threshold.clone().unwrap_or_default();
            let coin = parent.mode == SplitMode::Probabilistic && self.rng.gen_bool(0.5);
            let own = self.payload.clone().unwrap_or_default();
            let mut branch = split_decision(&own, &t, parent.mode, coin);
            if self.is(Strategy::WrongBranch) && parent.mode == SplitMode::Deterministic {
                branch = if branch == Branch::Left { Branch::Right } else { Branch::Left };
            }
            if self.is(Strategy::DoubleBranch) && !self.first_split {
                self.first_split = true;
                branch = Branch::Left;
            } else if self.is(Strategy::DoubleBranch) {
                send = params.add(&send, self.message.as_ref().expect("double branch has a message"));
            }
            if branch == Branch::Left {
                send = params.add(&send, self.message.as_ref().expect("positioned message"));
                self.position = Some(node);
            } else {
                self.position = Some(node + 1);
            }
        } else if self.is(Strategy::DoubleBranch) && self.first_split {
            send = params.add(&send, self.message.as_ref().expect("double branch has a message"));
        }
        let first_retransmission = !self.retransmitted;
        self.retransmitted = true;
        if first_retransmission && self.is(Strategy::MutateMessage) {
            send = params.add(&send, &params.scalar(1));
        }
        if first_retransmission && self.is(Strategy::LateInjection) {
            let p = self.injected.clone().unwrap_or_else(|| BigUint::from(1u32));
            send = params.add(&send, &codec.encode(params, &p).map_err(|e| SimError::Internal(e.to_string()))?);
        }

        let msg = if send.is_zero() { None } else { Some(&send) };
        let (mut ct, pad) = make_ciphertext(params, &mut self.pads, pad_round, referee.active(), msg)?;
        self.openings.insert(node, Opening { r: pad.r, msg: send });
        if first_retransmission && self.is(Strategy::RefuseProof) {
            return Ok(ct);
        }
        let ctx = proof_context(RETRANSMISSION_TAG, epoch, node, self.id, pad_round);
        let mut store = referee.store().clone();
        store.insert(node, self.id, ct.o.clone(), ct.c.clone());
        let stmt = retransmission_statement(params, &store, self.id, node, &ct.o, &ct.c, &ctx)
            .ok_or_else(|| SimError::Internal("missing branch context".into()))?;
        let own = self.openings.context(params, node).expect("just inserted");
        let parent_open = self
            .openings
            .context(params, k)
            .ok_or_else(|| SimError::Internal(format!("no opening for node {k}")))?;
        let (branch, w) = retransmission_witness(params, &own, &parent_open);
        ct.proof = Some(self.prove_or_forge(params, stmt, branch, w));
        Ok(ct)
    }

    fn start_epoch(&mut self, params: &GroupParams, codec: &SlotCodec, epoch: u32) -> Result<(), SimError> {
        self.epoch = Some(epoch);
        self.openings = PrivateOpenings::new();
        self.position = None;
        self.message = None;
        if self.delivered {
            return Ok(());
        }
        if let Some(p) = &self.payload {
            let m = if self.is(Strategy::BadSlotCount) {
                codec.encode_raw(params, 2, p)
            } else {
                codec.encode(params, p).map_err(|e| SimError::Internal(e.to_string()))?
            };
            self.message = Some(m);
            self.position = Some(1);
        }
        Ok(())
    }

    fn prove_or_forge(&mut self, params: &GroupParams, stmt: OrStatement, branch: usize, w: Scalar) -> Vec<u8> {
        let clauses = [stmt];
        let proof = if clauses[0].branches[branch].holds_for(params, &w) {
            prove_and_of_or(params, &clauses, &[(branch, w)], &mut self.rng).expect("witness checked")
        } else {
            forge_attempt(params, &clauses, &mut self.rng).expect("well-formed statement")
        };
        proof.to_bytes(params)
    }

    /// Records delivery once the node holding this participant's message is
    /// resolved.
    pub fn observe(&mut self, referee: &Referee) {
        if let (Some(e), Some(pos)) = (self.epoch, self.position) {
            if self.message.is_some() && referee.is_delivered(e, pos) {
                self.delivered = true;
            }
        }
    }

    pub fn on_investigation(&mut self, referee: &Referee, pad_round: u64) -> Result<Publication, SimError> {
        Ok(publish(referee.params(), self.pads.graph(), self.id, pad_round, referee.active())?)
    }

    pub fn on_blame(&mut self, referee: &Referee, epoch: u32, nodes: &[u64]) -> Vec<BlameProof> {
        let params = referee.params();
        let mut out = Vec::new();
        for &node in nodes {
            let ctx = proof_context(BLAME_TAG, epoch, node, self.id, referee.pad_round());
            let stmt: Option<RepStatement> = blame_statement(params, referee.store(), self.id, node, &ctx);
            let opening = self.openings.context(params, node);
            let proof = match (stmt, opening) {
                (Some(stmt), Some(op)) => {
                    let or = OrStatement::from(stmt);
                    if or.branches[0].holds_for(params, &op.r) || !self.is_honest() {
                        Some(self.prove_or_forge(params, or, 0, op.r))
                    } else {
                        None
                    }
                }
                _ => None,
            };
            out.push(BlameProof { participant: self.id, node, proof, signature: None });
        }
        out
    }
}
