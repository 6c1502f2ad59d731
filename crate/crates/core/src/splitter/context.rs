//! Branch contexts and the per-round retransmission proofs.
//!
//! For participant `i` the context of a root or transmitted node `x` is its
//! own broadcast `(c_i^(x), O_i^(x))`. An inferred node `2j+1` has context
//! `(Γ(j) · c_i^(2j)^-1, V(j) - O_i^(2j))`, i.e. whatever `i` put into `j`
//! but not into `2j`.

use std::collections::BTreeMap;

use rand::RngCore;

use crate::group::{Commitment, GroupParams, Scalar};
use crate::keysetup::ParticipantId;
use crate::zkp::{
    prove_and_of_or, stmt_no_message, stmt_same_message, verify_and_of_or, OrStatement, ProofError, RepStatement,
    SigmaProof,
};

/// Public `(O, c)` of every participant for every transmitted node of one tree.
#[derive(Clone, Debug, Default)]
pub struct CiphertextStore {
    rounds: BTreeMap<u64, BTreeMap<ParticipantId, (Scalar, Commitment)>>,
}

impl CiphertextStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, node: u64, participant: ParticipantId, o: Scalar, c: Commitment) {
        self.rounds.entry(node).or_default().insert(participant, (o, c));
    }

    pub fn get(&self, node: u64, participant: ParticipantId) -> Option<&(Scalar, Commitment)> {
        self.rounds.get(&node)?.get(&participant)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchContext {
    pub gamma: Commitment,
    pub value: Scalar,
}

/// `None` if a needed broadcast is missing from the store.
pub fn branch_context(params: &GroupParams, store: &CiphertextStore, i: ParticipantId, node: u64) -> Option<BranchContext> {
    if node == 1 || node.is_multiple_of(2) {
        let (o, c) = store.get(node, i)?;
        return Some(BranchContext { gamma: c.clone(), value: o.clone() });
    }
    let parent = branch_context(params, store, i, node / 2)?;
    let (o, c) = store.get(node - 1, i)?;
    Some(BranchContext {
        gamma: Commitment::from(params.div(parent.gamma.element(), c.element())),
        value: params.sub(&parent.value, o),
    })
}

/// What a participant knows about its own contribution to a node: the
/// commitment randomness and the message part, with `Γ = g^(V - msg) h^r`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Opening {
    pub r: Scalar,
    pub msg: Scalar,
}

#[derive(Clone, Debug, Default)]
pub struct PrivateOpenings {
    map: BTreeMap<u64, Opening>,
}

impl PrivateOpenings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, node: u64, opening: Opening) {
        self.map.insert(node, opening);
    }

    pub fn context(&self, params: &GroupParams, node: u64) -> Option<Opening> {
        if node == 1 || node.is_multiple_of(2) {
            return self.map.get(&node).cloned();
        }
        let parent = self.context(params, node / 2)?;
        let sent = self.map.get(&(node - 1))?;
        Some(Opening { r: params.sub(&parent.r, &sent.r), msg: params.sub(&parent.msg, &sent.msg) })
    }
}

/// Fiat–Shamir context binding a proof to its place in the run.
pub fn proof_context(kind: &[u8], epoch: u32, node: u64, participant: ParticipantId, pad_round: u64) -> Vec<u8> {
    let mut out = b"dcmesh/".to_vec();
    out.extend_from_slice(kind);
    out.extend_from_slice(&epoch.to_be_bytes());
    out.extend_from_slice(&node.to_be_bytes());
    out.extend_from_slice(&participant.to_be_bytes());
    out.extend_from_slice(&pad_round.to_be_bytes());
    out
}

/// For round `2k`: either `(O, c)` carries no message, or it carries the same
/// message as `i`'s context of `k`.
pub fn retransmission_statement(
    params: &GroupParams,
    store: &CiphertextStore,
    i: ParticipantId,
    round: u64,
    o: &Scalar,
    c: &Commitment,
    context: &[u8],
) -> Option<OrStatement> {
    debug_assert!(round >= 2 && round.is_multiple_of(2));
    let parent = branch_context(params, store, i, round / 2)?;
    Some(OrStatement::new(vec![
        stmt_no_message(params, o, c, context.to_vec()),
        stmt_same_message(params, &parent.value, &parent.gamma, o, c, context.to_vec()),
    ]))
}

/// Picks whichever branch the openings satisfy.
pub fn retransmission_witness(params: &GroupParams, own: &Opening, parent: &Opening) -> (usize, Scalar) {
    if own.msg.is_zero() {
        (0, own.r.clone())
    } else {
        (1, params.sub(&parent.r, &own.r))
    }
}

pub fn prove_retransmission<R: RngCore + ?Sized>(
    params: &GroupParams,
    stmt: &OrStatement,
    own: &Opening,
    parent: &Opening,
    rng: &mut R,
) -> Result<SigmaProof, ProofError> {
    let (branch, w) = retransmission_witness(params, own, parent);
    prove_and_of_or(params, std::slice::from_ref(stmt), &[(branch, w)], rng)
}

pub fn verify_retransmission(params: &GroupParams, stmt: &OrStatement, proof: &[u8]) -> bool {
    SigmaProof::from_bytes(params, proof).is_ok_and(|p| verify_and_of_or(params, std::slice::from_ref(stmt), &p))
}

/// "I contributed nothing to node `x`", stated against `i`'s branch context.
pub fn blame_statement(
    params: &GroupParams,
    store: &CiphertextStore,
    i: ParticipantId,
    node: u64,
    context: &[u8],
) -> Option<RepStatement> {
    let ctx = branch_context(params, store, i, node)?;
    Some(stmt_no_message(params, &ctx.value, &ctx.gamma, context.to_vec()))
}

pub fn verify_blame(params: &GroupParams, stmt: &RepStatement, proof: &[u8]) -> bool {
    SigmaProof::from_bytes(params, proof).is_ok_and(|p| crate::zkp::verify_rep(params, stmt, &p))
}

/// Transmitted rounds whose proofs place a message in `node`: for each node on
/// the path below the root, the round in which it or its sibling was sent.
pub fn chain_rounds(node: u64) -> Vec<u64> {
    let mut rounds = Vec::new();
    let mut x = node;
    while x > 1 {
        rounds.push(x & !1);
        x /= 2;
    }
    rounds.reverse();
    rounds
}

/// Conjunction of the per-round statements along the path to `node`.
pub fn chain_statement(
    params: &GroupParams,
    store: &CiphertextStore,
    i: ParticipantId,
    node: u64,
    context: impl Fn(u64) -> Vec<u8>,
) -> Option<Vec<OrStatement>> {
    chain_rounds(node)
        .into_iter()
        .map(|round| {
            let (o, c) = store.get(round, i)?;
            retransmission_statement(params, store, i, round, o, c, &context(round))
        })
        .collect()
}

pub fn chain_witnesses(params: &GroupParams, openings: &PrivateOpenings, node: u64) -> Option<Vec<(usize, Scalar)>> {
    chain_rounds(node)
        .into_iter()
        .map(|round| {
            let own = openings.context(params, round)?;
            let parent = openings.context(params, round / 2)?;
            Some(retransmission_witness(params, &own, &parent))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::SecurityLevel;
    use crate::zkp::forge_attempt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Party {
        store: CiphertextStore,
        openings: PrivateOpenings,
    }

    /// One participant broadcasting `msg` in each listed node, with fresh pads.
    fn party(gp: &GroupParams, sends: &[(u64, u64)], rng: &mut ChaCha20Rng) -> Party {
        let mut store = CiphertextStore::new();
        let mut openings = PrivateOpenings::new();
        for &(node, m) in sends {
            let (k, r) = (gp.random_scalar(rng), gp.random_scalar(rng));
            let msg = gp.scalar(m);
            store.insert(node, 0, gp.add(&k, &msg), gp.commit(&k, &r));
            openings.insert(node, Opening { r, msg });
        }
        Party { store, openings }
    }

    #[test]
    fn inferred_context_matches_explicit_products() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"ctx").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let p = party(&gp, &[(1, 5), (2, 0), (6, 0), (14, 5)], &mut rng);
        let get = |n| p.store.get(n, 0).unwrap().clone();
        let (o1, c1) = get(1);
        let (o2, c2) = get(2);
        let (o6, c6) = get(6);
        let ctx3 = branch_context(&gp, &p.store, 0, 3).unwrap();
        assert_eq!(ctx3.gamma.element(), &gp.div(c1.element(), c2.element()));
        assert_eq!(ctx3.value, gp.sub(&o1, &o2));
        let ctx7 = branch_context(&gp, &p.store, 0, 7).unwrap();
        assert_eq!(ctx7.gamma.element(), &gp.div(&gp.div(c1.element(), c2.element()), c6.element()));
        assert_eq!(ctx7.value, gp.sub(&gp.sub(&o1, &o2), &o6));
        assert_eq!(branch_context(&gp, &p.store, 0, 6).unwrap().gamma, c6);
        // the private opening is consistent with the public context
        for node in [1, 2, 3, 6, 7, 14, 15] {
            let ctx = branch_context(&gp, &p.store, 0, node).unwrap();
            let op = p.openings.context(&gp, node).unwrap();
            let rhs = gp.commit(&gp.sub(&ctx.value, &op.msg), &op.r);
            assert_eq!(ctx.gamma, rhs, "node {node}");
        }
    }

    #[test]
    fn honest_retransmissions_verify() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"ctx").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        // sender: message 5 stays left at 2, then right at 6 (so in 7), then left at 14
        let sender = party(&gp, &[(1, 5), (2, 0), (6, 0), (14, 5)], &mut rng);
        let bystander = party(&gp, &[(1, 0), (2, 0), (6, 0), (14, 0)], &mut rng);
        for p in [&sender, &bystander] {
            for round in [2u64, 6, 14] {
                let (o, c) = p.store.get(round, 0).unwrap();
                let stmt = retransmission_statement(&gp, &p.store, 0, round, o, c, b"r").unwrap();
                let own = p.openings.context(&gp, round).unwrap();
                let parent = p.openings.context(&gp, round / 2).unwrap();
                let proof = prove_retransmission(&gp, &stmt, &own, &parent, &mut rng).unwrap();
                assert!(verify_retransmission(&gp, &stmt, &proof.to_bytes(&gp)));
            }
            let clauses = chain_statement(&gp, &p.store, 0, 15, |r| r.to_be_bytes().to_vec()).unwrap();
            assert_eq!(chain_rounds(15), vec![2, 6, 14]);
            let w = chain_witnesses(&gp, &p.openings, 15).unwrap();
            let proof = prove_and_of_or(&gp, &clauses, &w, &mut rng).unwrap();
            assert!(verify_and_of_or(&gp, &clauses, &proof));
        }
    }

    #[test]
    fn mutated_retransmission_has_no_witness() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"ctx").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let p = party(&gp, &[(1, 5), (2, 6)], &mut rng);
        let (o, c) = p.store.get(2, 0).unwrap();
        let stmt = retransmission_statement(&gp, &p.store, 0, 2, o, c, b"r").unwrap();
        let own = p.openings.context(&gp, 2).unwrap();
        let parent = p.openings.context(&gp, 1).unwrap();
        assert!(matches!(
            prove_retransmission(&gp, &stmt, &own, &parent, &mut rng),
            Err(ProofError::WitnessMismatch { .. })
        ));
        for _ in 0..50 {
            let forged = forge_attempt(&gp, std::slice::from_ref(&stmt), &mut rng).unwrap();
            assert!(!verify_retransmission(&gp, &stmt, &forged.to_bytes(&gp)));
        }
    }

    #[test]
    fn message_in_both_branches_breaks_the_chain() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"ctx").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        // message sent left in 2, then again in 6 under the right branch
        let p = party(&gp, &[(1, 5), (2, 5), (6, 5)], &mut rng);
        let clauses = chain_statement(&gp, &p.store, 0, 7, |r| r.to_be_bytes().to_vec()).unwrap();
        let w = chain_witnesses(&gp, &p.openings, 7).unwrap();
        assert!(matches!(prove_and_of_or(&gp, &clauses, &w, &mut rng), Err(ProofError::WitnessMismatch { clause: 1 })));
        let forged = forge_attempt(&gp, &clauses, &mut rng).unwrap();
        assert!(!verify_and_of_or(&gp, &clauses, &forged));
        // blame at node 6 catches it as well
        let stmt = blame_statement(&gp, &p.store, 0, 6, b"b").unwrap();
        assert!(!stmt.holds_for(&gp, &p.openings.context(&gp, 6).unwrap().r));
    }
}
