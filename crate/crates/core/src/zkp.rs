//! Non-interactive sigma protocols for "I know `α` with `target = base^α`",
//! composed with OR (one branch true, others simulated) and AND (every
//! clause answers the same Fiat-Shamir challenge).
//!
//! Every protocol statement is normalised to that single form by dividing
//! the public `g` exponent out of the commitment, see [`stmt_no_message`]
//! and [`stmt_same_message`].

use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::group::{Commitment, GroupElement, GroupParams, Scalar};

const PROOF_FORMAT_VERSION: u8 = 1;
const FS_LABEL: &[u8] = b"dcmesh/fiat-shamir";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProofError {
    #[error("witness does not satisfy the designated branch of clause {clause}")]
    WitnessMismatch { clause: usize },
    #[error("conjunction has no clauses")]
    EmptyClauseList,
    #[error("clause {clause} has no branches")]
    EmptyBranches { clause: usize },
    #[error("branch index {index} out of range for clause {clause}")]
    BranchOutOfRange { clause: usize, index: usize },
    #[error("expected {expected} witnesses, got {given}")]
    WitnessCount { expected: usize, given: usize },
    #[error("malformed proof encoding: {0}")]
    Malformed(String),
}

/// "I know `α` such that `target = base^α`", tagged with a context string
/// (round ids, participant id, statement role).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepStatement {
    pub target: GroupElement,
    pub base: GroupElement,
    pub context: Vec<u8>,
}

impl RepStatement {
    /// Statement over the blinding generator `h`.
    pub fn over_h(params: &GroupParams, target: GroupElement, context: impl Into<Vec<u8>>) -> Self {
        RepStatement { target, base: params.h().clone(), context: context.into() }
    }

    pub fn holds_for(&self, params: &GroupParams, witness: &Scalar) -> bool {
        params.exp(&self.base, witness) == self.target
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrStatement {
    pub branches: Vec<RepStatement>,
}

impl OrStatement {
    pub fn new(branches: Vec<RepStatement>) -> Self {
        OrStatement { branches }
    }
}

impl From<RepStatement> for OrStatement {
    fn from(s: RepStatement) -> Self {
        OrStatement { branches: vec![s] }
    }
}

/// Per-clause transcript: one `(commitment, challenge, response)` per branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClauseProof {
    pub commitments: Vec<GroupElement>,
    pub challenges: Vec<Scalar>,
    pub responses: Vec<Scalar>,
}

/// A conjunction of OR-clauses sharing one Fiat-Shamir challenge. A plain
/// representation proof is one clause with one branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SigmaProof {
    pub statement_digest: [u8; 32],
    pub clauses: Vec<ClauseProof>,
}

/// Canonical statement encoding hashed into the challenge.
pub fn statement_bytes(params: &GroupParams, clauses: &[OrStatement]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((clauses.len() as u32).to_be_bytes());
    for clause in clauses {
        out.extend((clause.branches.len() as u32).to_be_bytes());
        for b in &clause.branches {
            params.encode_element(&b.base, &mut out);
            params.encode_element(&b.target, &mut out);
            out.extend((b.context.len() as u32).to_be_bytes());
            out.extend_from_slice(&b.context);
        }
    }
    out
}

fn digest_of(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Deterministic challenge over the statement and every first-move commitment.
pub fn fs_challenge(params: &GroupParams, statement: &[u8], commitments: &[GroupElement]) -> Scalar {
    let mut data = Vec::with_capacity(statement.len() + 8 + commitments.len() * params.element_width());
    data.extend((statement.len() as u64).to_be_bytes());
    data.extend_from_slice(statement);
    data.extend((commitments.len() as u64).to_be_bytes());
    for c in commitments {
        params.encode_element(c, &mut data);
    }
    params.hash_to_scalar(FS_LABEL, &data)
}

/// First move of the interactive protocol: `(w, base^w)`.
pub fn rep_commit<R: RngCore + ?Sized>(params: &GroupParams, base: &GroupElement, rng: &mut R) -> (Scalar, GroupElement) {
    let w = params.random_scalar(rng);
    let t = params.exp(base, &w);
    (w, t)
}

/// Third move: `z = w + c·α`.
pub fn rep_respond(params: &GroupParams, nonce: &Scalar, challenge: &Scalar, witness: &Scalar) -> Scalar {
    params.add(nonce, &params.mul_scalars(challenge, witness))
}

/// Verifier equation `base^z = t · target^c`.
pub fn rep_equation_holds(
    params: &GroupParams,
    stmt: &RepStatement,
    commitment: &GroupElement,
    challenge: &Scalar,
    response: &Scalar,
) -> bool {
    params.exp(&stmt.base, response) == params.mul(commitment, &params.exp(&stmt.target, challenge))
}

/// Honest-verifier simulator: picks `(c, z)` first and solves for `t`.
pub fn simulate_rep(params: &GroupParams, stmt: &RepStatement, challenge: &Scalar, response: &Scalar) -> GroupElement {
    let lhs = params.exp(&stmt.base, response);
    params.div(&lhs, &params.exp(&stmt.target, challenge))
}

fn validate_shape(clauses: &[OrStatement]) -> Result<(), ProofError> {
    if clauses.is_empty() {
        return Err(ProofError::EmptyClauseList);
    }
    for (idx, c) in clauses.iter().enumerate() {
        if c.branches.is_empty() {
            return Err(ProofError::EmptyBranches { clause: idx });
        }
    }
    Ok(())
}

struct PendingClause {
    true_branch: usize,
    nonce: Scalar,
    witness: Scalar,
    commitments: Vec<GroupElement>,
    challenges: Vec<Scalar>,
    responses: Vec<Scalar>,
}

/// Proves a conjunction of OR-clauses. `witnesses[i] = (branch, α)` names the
/// branch of clause `i` that the prover can satisfy; the prover refuses with
/// [`ProofError::WitnessMismatch`] rather than emit an unsound proof.
pub fn prove_and_of_or<R: RngCore + ?Sized>(
    params: &GroupParams,
    clauses: &[OrStatement],
    witnesses: &[(usize, Scalar)],
    rng: &mut R,
) -> Result<SigmaProof, ProofError> {
    validate_shape(clauses)?;
    if witnesses.len() != clauses.len() {
        return Err(ProofError::WitnessCount { expected: clauses.len(), given: witnesses.len() });
    }
    for (idx, (clause, (branch, alpha))) in clauses.iter().zip(witnesses).enumerate() {
        let stmt = clause
            .branches
            .get(*branch)
            .ok_or(ProofError::BranchOutOfRange { clause: idx, index: *branch })?;
        if !stmt.holds_for(params, alpha) {
            return Err(ProofError::WitnessMismatch { clause: idx });
        }
    }
    Ok(build_proof(params, clauses, witnesses, rng))
}

fn build_proof<R: RngCore + ?Sized>(
    params: &GroupParams,
    clauses: &[OrStatement],
    witnesses: &[(usize, Scalar)],
    rng: &mut R,
) -> SigmaProof {
    let mut pending = Vec::with_capacity(clauses.len());
    for (clause, (true_branch, witness)) in clauses.iter().zip(witnesses) {
        let n = clause.branches.len();
        let mut commitments = Vec::with_capacity(n);
        let mut challenges = Vec::with_capacity(n);
        let mut responses = Vec::with_capacity(n);
        let mut nonce = params.zero();
        for (j, stmt) in clause.branches.iter().enumerate() {
            if j == *true_branch {
                let (w, t) = rep_commit(params, &stmt.base, rng);
                nonce = w;
                commitments.push(t);
                challenges.push(params.zero());
                responses.push(params.zero());
            } else {
                let c = params.random_scalar(rng);
                let z = params.random_scalar(rng);
                commitments.push(simulate_rep(params, stmt, &c, &z));
                challenges.push(c);
                responses.push(z);
            }
        }
        pending.push(PendingClause {
            true_branch: *true_branch,
            nonce,
            witness: witness.clone(),
            commitments,
            challenges,
            responses,
        });
    }

    let stmt_bytes = statement_bytes(params, clauses);
    let all_commitments: Vec<GroupElement> = pending.iter().flat_map(|p| p.commitments.iter().cloned()).collect();
    let top = fs_challenge(params, &stmt_bytes, &all_commitments);

    let clauses = pending
        .into_iter()
        .map(|mut p| {
            let simulated = p
                .challenges
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != p.true_branch)
                .fold(params.zero(), |acc, (_, c)| params.add(&acc, c));
            let c_true = params.sub(&top, &simulated);
            p.responses[p.true_branch] = rep_respond(params, &p.nonce, &c_true, &p.witness);
            p.challenges[p.true_branch] = c_true;
            ClauseProof { commitments: p.commitments, challenges: p.challenges, responses: p.responses }
        })
        .collect();

    SigmaProof { statement_digest: digest_of(&stmt_bytes), clauses }
}

/// Emits a structurally valid proof without checking any witness. Used by
/// scripted adversaries; an honest verifier rejects it unless the random
/// witness happens to satisfy the statement.
pub fn forge_attempt<R: RngCore + ?Sized>(params: &GroupParams, clauses: &[OrStatement], rng: &mut R) -> Option<SigmaProof> {
    validate_shape(clauses).ok()?;
    let witnesses: Vec<(usize, Scalar)> = clauses.iter().map(|_| (0, params.random_scalar(rng))).collect();
    Some(build_proof(params, clauses, &witnesses, rng))
}

pub fn verify_and_of_or(params: &GroupParams, clauses: &[OrStatement], proof: &SigmaProof) -> bool {
    if validate_shape(clauses).is_err() || proof.clauses.len() != clauses.len() {
        return false;
    }
    let stmt_bytes = statement_bytes(params, clauses);
    if digest_of(&stmt_bytes) != proof.statement_digest {
        return false;
    }
    for (clause, cp) in clauses.iter().zip(&proof.clauses) {
        let n = clause.branches.len();
        if cp.commitments.len() != n || cp.challenges.len() != n || cp.responses.len() != n {
            return false;
        }
        if cp.commitments.iter().any(|t| params.check_element(t).is_err())
            || cp.challenges.iter().chain(&cp.responses).any(|s| params.check_scalar(s).is_err())
        {
            return false;
        }
    }
    let all_commitments: Vec<GroupElement> = proof.clauses.iter().flat_map(|c| c.commitments.iter().cloned()).collect();
    let top = fs_challenge(params, &stmt_bytes, &all_commitments);
    clauses.iter().zip(&proof.clauses).all(|(clause, cp)| {
        params.sum_scalars(&cp.challenges) == top
            && clause
                .branches
                .iter()
                .enumerate()
                .all(|(j, stmt)| rep_equation_holds(params, stmt, &cp.commitments[j], &cp.challenges[j], &cp.responses[j]))
    })
}

pub fn prove_rep<R: RngCore + ?Sized>(
    params: &GroupParams,
    stmt: &RepStatement,
    witness: &Scalar,
    rng: &mut R,
) -> Result<SigmaProof, ProofError> {
    prove_and_of_or(params, &[OrStatement::from(stmt.clone())], &[(0, witness.clone())], rng)
}

pub fn verify_rep(params: &GroupParams, stmt: &RepStatement, proof: &SigmaProof) -> bool {
    verify_and_of_or(params, &[OrStatement::from(stmt.clone())], proof)
}

pub fn prove_or<R: RngCore + ?Sized>(
    params: &GroupParams,
    stmt: &OrStatement,
    true_branch: usize,
    witness: &Scalar,
    rng: &mut R,
) -> Result<SigmaProof, ProofError> {
    prove_and_of_or(params, std::slice::from_ref(stmt), &[(true_branch, witness.clone())], rng)
}

pub fn verify_or(params: &GroupParams, stmt: &OrStatement, proof: &SigmaProof) -> bool {
    verify_and_of_or(params, std::slice::from_ref(stmt), proof)
}

/// `target = c · g^-O`: provable iff `O` carries no message beyond the committed pad.
pub fn stmt_no_message(params: &GroupParams, o: &Scalar, c: &Commitment, context: impl Into<Vec<u8>>) -> RepStatement {
    let g_o = params.exp(params.g(), o);
    RepStatement::over_h(params, params.div(c.element(), &g_o), context)
}

/// `target = c1 · c2^-1 · g^-(O1 - O2)`: provable iff both tuples carry the same message.
pub fn stmt_same_message(
    params: &GroupParams,
    o1: &Scalar,
    c1: &Commitment,
    o2: &Scalar,
    c2: &Commitment,
    context: impl Into<Vec<u8>>,
) -> RepStatement {
    let ratio = params.div(c1.element(), c2.element());
    let g_diff = params.exp(params.g(), &params.sub(o1, o2));
    RepStatement::over_h(params, params.div(&ratio, &g_diff), context)
}

impl SigmaProof {
    pub fn to_bytes(&self, params: &GroupParams) -> Vec<u8> {
        let mut out = vec![PROOF_FORMAT_VERSION];
        out.extend_from_slice(&self.statement_digest);
        out.extend((self.clauses.len() as u32).to_be_bytes());
        for c in &self.clauses {
            out.extend((c.commitments.len() as u32).to_be_bytes());
            for t in &c.commitments {
                params.encode_element(t, &mut out);
            }
            for ch in &c.challenges {
                params.encode_scalar(ch, &mut out);
            }
            for z in &c.responses {
                params.encode_scalar(z, &mut out);
            }
        }
        out
    }

    pub fn from_bytes(params: &GroupParams, bytes: &[u8]) -> Result<Self, ProofError> {
        let mut r = Reader { bytes, pos: 0 };
        let malformed = |m: &str| ProofError::Malformed(m.to_string());
        if r.take(1)? != [PROOF_FORMAT_VERSION] {
            return Err(malformed("unknown version"));
        }
        let statement_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let clause_count = r.u32()? as usize;
        // each clause needs at least one branch; bound allocation by input size
        if clause_count > bytes.len() {
            return Err(malformed("clause count"));
        }
        let mut clauses = Vec::with_capacity(clause_count);
        for _ in 0..clause_count {
            let n = r.u32()? as usize;
            if n == 0 || n > bytes.len() {
                return Err(malformed("branch count"));
            }
            let commitments = (0..n)
                .map(|_| params.decode_element(r.take(params.element_width())?).map_err(|e| ProofError::Malformed(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            let mut scalars = |count| {
                (0..count)
                    .map(|_| params.decode_scalar(r.take(params.scalar_width())?).map_err(|e| ProofError::Malformed(e.to_string())))
                    .collect::<Result<Vec<_>, _>>()
            };
            let challenges = scalars(n)?;
            let responses = scalars(n)?;
            clauses.push(ClauseProof { commitments, challenges, responses });
        }
        if r.pos != bytes.len() {
            return Err(malformed("trailing bytes"));
        }
        Ok(SigmaProof { statement_digest, clauses })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProofError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ProofError::Malformed("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ProofError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
