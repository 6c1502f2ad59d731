//! Pairwise pad establishment, mutual commitment endorsement and the key graph.
//!
//! Every unordered pair `{i, j}` either shares fresh `(K, r)` values for each
//! scheduled round or is publicly opted out. For an established pair, `j`
//! signs one Merkle root over all of `i`'s per-round commitments `c_ij` and
//! vice versa, so any single `c_ij` can later be shown to a third party
//! together with its authentication path.

pub mod merkle;
pub mod signature;

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{Commitment, GroupParams, Scalar};
pub use merkle::{merkle_batch_sign, verify_leaf, BatchEndorsement, Hash, MerkleError, MerklePath, MerkleTree};
pub use signature::{verify_signature, Signature, SigningKey, VerifyingKey};

pub type ParticipantId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SetupError {
    #[error("participant {0} cannot share a key with itself")]
    SelfPair(ParticipantId),
    #[error("participant {0} refused to sign")]
    SignatureRefused(ParticipantId),
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantId),
    #[error("round {round} exceeds the provisioned budget of {budget}")]
    RoundBudgetExhausted { round: u64, budget: u64 },
    #[error(transparent)]
    Merkle(#[from] MerkleError),
}

/// One round's share of a pairwise secret.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadShare {
    pub k: Scalar,
    pub r: Scalar,
}

impl PadShare {
    pub fn zero(params: &GroupParams) -> Self {
        PadShare { k: params.zero(), r: params.zero() }
    }

    pub fn negated(&self, params: &GroupParams) -> Self {
        PadShare { k: params.neg(&self.k), r: params.neg(&self.r) }
    }

    pub fn add(&self, params: &GroupParams, other: &PadShare) -> Self {
        PadShare { k: params.add(&self.k, &other.k), r: params.add(&self.r, &other.r) }
    }

    pub fn commitment(&self, params: &GroupParams) -> Commitment {
        params.commit(&self.k, &self.r)
    }
}

/// Per-round `(K_ij, r_ij)` seen from `i`'s side; `j` holds the negation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairwiseSecret {
    pub i: ParticipantId,
    pub j: ParticipantId,
    pub rounds: Vec<PadShare>,
}

impl PairwiseSecret {
    pub fn reversed(&self, params: &GroupParams) -> Self {
        PairwiseSecret {
            i: self.j,
            j: self.i,
            rounds: self.rounds.iter().map(|s| s.negated(params)).collect(),
        }
    }
}

/// A per-round pair commitment `c_ij` as endorsed by `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedCommitment {
    pub owner: ParticipantId,
    pub counterparty: ParticipantId,
    pub round: u64,
    pub commitment: Commitment,
    pub path: MerklePath,
}

/// Canonical encoding of `c_ij ‖ i ‖ j ‖ round`, the Merkle leaf.
pub fn leaf_bytes(params: &GroupParams, c: &Commitment, i: ParticipantId, j: ParticipantId, round: u64) -> Vec<u8> {
    let mut out = b"dcmesh/pair-commitment".to_vec();
    params.encode_element(c.element(), &mut out);
    out.extend_from_slice(&i.to_be_bytes());
    out.extend_from_slice(&j.to_be_bytes());
    out.extend_from_slice(&round.to_be_bytes());
    out
}

fn root_context(owner: ParticipantId, signer: ParticipantId, rounds: u64) -> Vec<u8> {
    let mut out = b"dcmesh/pair-endorsement".to_vec();
    out.extend_from_slice(&owner.to_be_bytes());
    out.extend_from_slice(&signer.to_be_bytes());
    out.extend_from_slice(&rounds.to_be_bytes());
    out
}

/// Public record of one endorsement: `signer` vouches for all of `owner`'s
/// commitments on this edge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootEndorsement {
    #[serde(with = "merkle::hash_hex")]
    pub root: Hash,
    pub signature: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum PublicEdgeState {
    /// `by_high` is the higher id's endorsement of the lower id's commitments.
    Established { by_high: RootEndorsement, by_low: RootEndorsement },
    OptedOut { claimed_by: ParticipantId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicEdge {
    pub low: ParticipantId,
    pub high: ParticipantId,
    #[serde(flatten)]
    pub state: PublicEdgeState,
}

/// Everything a verifier needs: keys, roots, signatures and opt-outs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyGraphPublic {
    pub n: u32,
    pub rounds: u64,
    pub public_keys: Vec<VerifyingKey>,
    pub edges: Vec<PublicEdge>,
}

fn ordered(i: ParticipantId, j: ParticipantId) -> (ParticipantId, ParticipantId) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

impl KeyGraphPublic {
    pub fn edge(&self, i: ParticipantId, j: ParticipantId) -> Option<&PublicEdge> {
        let (lo, hi) = ordered(i, j);
        self.edges
            .binary_search_by(|e| (e.low, e.high).cmp(&(lo, hi)))
            .ok()
            .map(|idx| &self.edges[idx])
    }

    pub fn is_opted_out(&self, i: ParticipantId, j: ParticipantId) -> bool {
        matches!(self.edge(i, j).map(|e| &e.state), Some(PublicEdgeState::OptedOut { .. }))
    }

    /// The endorsement `counterparty` gave over `owner`'s commitments.
    pub fn endorsement(&self, owner: ParticipantId, counterparty: ParticipantId) -> Option<&RootEndorsement> {
        match &self.edge(owner, counterparty)?.state {
            PublicEdgeState::Established { by_high, by_low } => Some(if owner < counterparty { by_high } else { by_low }),
            PublicEdgeState::OptedOut { .. } => None,
        }
    }

    /// Checks the root signature and the authentication path of a published
    /// pair commitment.
    pub fn check_signed_commitment(&self, params: &GroupParams, sc: &SignedCommitment) -> Result<(), MerkleError> {
        let end = self.endorsement(sc.owner, sc.counterparty).ok_or(MerkleError::PathInvalid)?;
        let key = self.public_keys.get(sc.counterparty as usize).ok_or(MerkleError::BadRootSignature)?;
        if sc.path.leaf_index != sc.round {
            return Err(MerkleError::PathInvalid);
        }
        let leaf = leaf_bytes(params, &sc.commitment, sc.owner, sc.counterparty, sc.round);
        verify_leaf(params, key, &end.root, &end.signature, &root_context(sc.owner, sc.counterparty, self.rounds), &leaf, &sc.path)
    }

    /// Returns the endorsements whose root signature does not verify, as
    /// `(owner, signer)` pairs.
    pub fn bad_root_signatures(&self, params: &GroupParams) -> Vec<(ParticipantId, ParticipantId)> {
        let mut bad = Vec::new();
        for e in &self.edges {
            if let PublicEdgeState::Established { by_high, by_low } = &e.state {
                for (owner, signer, end) in [(e.low, e.high, by_high), (e.high, e.low, by_low)] {
                    let ok = self.public_keys.get(signer as usize).is_some_and(|key| {
                        verify_signature(
                            params,
                            key,
                            &merkle::root_message(&end.root, &root_context(owner, signer, self.rounds)),
                            &end.signature,
                        )
                    });
                    if !ok {
                        bad.push((owner, signer));
                    }
                }
            }
        }
        bad
    }
}

#[derive(Clone, Debug)]
pub struct EstablishedPair {
    /// Oriented from the lower id to the higher id.
    pub secret: PairwiseSecret,
    pub low_commitments: Vec<Commitment>,
    pub by_high: BatchEndorsement,
    pub by_low: BatchEndorsement,
}

#[derive(Clone, Debug)]
pub enum Edge {
    Established(Box<EstablishedPair>),
    OptedOut { claimed_by: ParticipantId },
}

/// Draws fresh `(K, r)` for every round and has each side endorse the other's
/// commitments. A participant unwilling to sign aborts the pair.
pub fn establish_pair<R: RngCore + ?Sized>(
    params: &GroupParams,
    (i, key_i, willing_i): (ParticipantId, &SigningKey, bool),
    (j, key_j, willing_j): (ParticipantId, &SigningKey, bool),
    rounds: u64,
    rng: &mut R,
) -> Result<EstablishedPair, SetupError> {
    if i == j {
        return Err(SetupError::SelfPair(i));
    }
    let shares: Vec<PadShare> = (0..rounds)
        .map(|_| PadShare { k: params.random_scalar(rng), r: params.random_scalar(rng) })
        .collect();
    let secret = PairwiseSecret { i, j, rounds: shares };
    let secret = if i < j { secret } else { secret.reversed(params) };
    let (lo, hi) = (secret.i, secret.j);
    let (key_lo, key_hi) = if i < j { (key_i, key_j) } else { (key_j, key_i) };
    if !willing_j {
        return Err(SetupError::SignatureRefused(j));
    }
    if !willing_i {
        return Err(SetupError::SignatureRefused(i));
    }

    let low_commitments: Vec<Commitment> = secret.rounds.iter().map(|s| s.commitment(params)).collect();
    let low_leaves: Vec<Vec<u8>> = low_commitments
        .iter()
        .enumerate()
        .map(|(t, c)| leaf_bytes(params, c, lo, hi, t as u64))
        .collect();
    let high_leaves: Vec<Vec<u8>> = low_commitments
        .iter()
        .enumerate()
        .map(|(t, c)| leaf_bytes(params, &params.negate(c), hi, lo, t as u64))
        .collect();
    let by_high = merkle_batch_sign(params, key_hi, &low_leaves, &root_context(lo, hi, rounds), rng)?;
    let by_low = merkle_batch_sign(params, key_lo, &high_leaves, &root_context(hi, lo, rounds), rng)?;
    Ok(EstablishedPair { secret, low_commitments, by_high, by_low })
}

/// The complete key graph including private pads. Participants only read
/// their own rows; verifiers only see [`KeyGraph::public`].
#[derive(Clone, Debug)]
pub struct KeyGraph {
    n: u32,
    rounds: u64,
    edges: BTreeMap<(ParticipantId, ParticipantId), Edge>,
    public: KeyGraphPublic,
}

impl KeyGraph {
    /// `refusals` holds `(refuser, peer)` pairs: the refuser will not endorse
    /// the peer, and the edge is opted out.
    pub fn setup<R: RngCore + ?Sized>(
        params: &GroupParams,
        keys: &[SigningKey],
        rounds: u64,
        refusals: &BTreeSet<(ParticipantId, ParticipantId)>,
        rng: &mut R,
    ) -> Result<Self, SetupError> {
        let n = keys.len() as u32;
        for &(a, b) in refusals {
            if a >= n || b >= n {
                return Err(SetupError::UnknownParticipant(a.max(b)));
            }
        }
        let mut edges = BTreeMap::new();
        for lo in 0..n {
            for hi in lo + 1..n {
                let will_lo = !refusals.contains(&(lo, hi));
                let will_hi = !refusals.contains(&(hi, lo));
                let edge = match establish_pair(
                    params,
                    (lo, &keys[lo as usize], will_lo),
                    (hi, &keys[hi as usize], will_hi),
                    rounds,
                    rng,
                ) {
                    Ok(p) => Edge::Established(Box::new(p)),
                    Err(SetupError::SignatureRefused(who)) => Edge::OptedOut { claimed_by: who },
                    Err(e) => return Err(e),
                };
                edges.insert((lo, hi), edge);
            }
        }
        let public = KeyGraphPublic {
            n,
            rounds,
            public_keys: keys.iter().map(|k| k.verifying_key().clone()).collect(),
            edges: edges
                .iter()
                .map(|(&(low, high), e)| PublicEdge {
                    low,
                    high,
                    state: match e {
                        Edge::Established(p) => PublicEdgeState::Established {
                            by_high: RootEndorsement { root: p.by_high.root, signature: p.by_high.signature.clone() },
                            by_low: RootEndorsement { root: p.by_low.root, signature: p.by_low.signature.clone() },
                        },
                        Edge::OptedOut { claimed_by } => PublicEdgeState::OptedOut { claimed_by: *claimed_by },
                    },
                })
                .collect(),
        };
        Ok(KeyGraph { n, rounds, edges, public })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn public(&self) -> &KeyGraphPublic {
        &self.public
    }

    pub fn edge(&self, i: ParticipantId, j: ParticipantId) -> Option<&Edge> {
        self.edges.get(&ordered(i, j))
    }

    fn check(&self, i: ParticipantId, j: ParticipantId, round: u64) -> Result<(), SetupError> {
        if i >= self.n {
            return Err(SetupError::UnknownParticipant(i));
        }
        if j >= self.n {
            return Err(SetupError::UnknownParticipant(j));
        }
        if round >= self.rounds {
            return Err(SetupError::RoundBudgetExhausted { round, budget: self.rounds });
        }
        Ok(())
    }

    /// `(K_ij, r_ij)` for one round; zero for opted-out edges and `i == j`.
    pub fn share(&self, params: &GroupParams, i: ParticipantId, j: ParticipantId, round: u64) -> Result<PadShare, SetupError> {
        self.check(i, j, round)?;
        match self.edge(i, j) {
            Some(Edge::Established(p)) => {
                let s = &p.secret.rounds[round as usize];
                Ok(if i < j { s.clone() } else { s.negated(params) })
            }
            _ => Ok(PadShare::zero(params)),
        }
    }

    pub fn pair_commitment(&self, params: &GroupParams, i: ParticipantId, j: ParticipantId, round: u64) -> Result<Commitment, SetupError> {
        self.check(i, j, round)?;
        Ok(match self.edge(i, j) {
            Some(Edge::Established(p)) => {
                let c = &p.low_commitments[round as usize];
                if i < j {
                    c.clone()
                } else {
                    params.negate(c)
                }
            }
            _ => params.identity_commitment(),
        })
    }

    /// `c_ij` with `j`'s endorsement, or `None` on an opted-out edge.
    pub fn signed_commitment(&self, params: &GroupParams, i: ParticipantId, j: ParticipantId, round: u64) -> Result<Option<SignedCommitment>, SetupError> {
        self.check(i, j, round)?;
        let Some(Edge::Established(p)) = self.edge(i, j) else {
            return Ok(None);
        };
        let batch = if i < j { &p.by_high } else { &p.by_low };
        Ok(Some(SignedCommitment {
            owner: i,
            counterparty: j,
            round,
            commitment: self.pair_commitment(params, i, j, round)?,
            path: batch.paths[round as usize].clone(),
        }))
    }

    /// Sum of `i`'s shares with every peer in `peers` (other ids ignored).
    pub fn pad_sum<'a>(
        &self,
        params: &GroupParams,
        i: ParticipantId,
        peers: impl IntoIterator<Item = &'a ParticipantId>,
        round: u64,
    ) -> Result<PadShare, SetupError> {
        let mut acc = PadShare::zero(params);
        for &j in peers {
            if j != i {
                acc = acc.add(params, &self.share(params, i, j, round)?);
            }
        }
        Ok(acc)
    }

    /// `c_i = ∏_j c_ij` over the given peers.
    pub fn aggregate_commitment_among<'a>(
        &self,
        params: &GroupParams,
        i: ParticipantId,
        peers: impl IntoIterator<Item = &'a ParticipantId>,
        round: u64,
    ) -> Result<Commitment, SetupError> {
        let mut acc = params.identity_commitment();
        for &j in peers {
            if j != i {
                acc = params.combine(&acc, &self.pair_commitment(params, i, j, round)?);
            }
        }
        Ok(acc)
    }

    /// `c_i = ∏_j c_ij` over all participants.
    pub fn aggregate_commitment(&self, params: &GroupParams, i: ParticipantId, round: u64) -> Result<Commitment, SetupError> {
        let all: Vec<ParticipantId> = (0..self.n).collect();
        self.aggregate_commitment_among(params, i, &all, round)
    }
}

/// Deterministic signing keys for `n` participants.
pub fn generate_keys<R: RngCore + ?Sized>(params: &GroupParams, n: u32, rng: &mut R) -> Vec<SigningKey> {
    (0..n).map(|_| SigningKey::generate(params, rng)).collect()
}
