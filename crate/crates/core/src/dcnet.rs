//! One DC-net round: ciphertexts, the product check over commitments, and the
//! investigation that attributes a failed check.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{Commitment, GroupParams, Scalar};
use crate::keysetup::{
    leaf_bytes, verify_signature, KeyGraph, KeyGraphPublic, PadShare, ParticipantId, SetupError, Signature,
    SignedCommitment, SigningKey, VerifyingKey,
};
use crate::verdict::Reason;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RoundError {
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error("pads for round {0} were already used")]
    PadReused(u64),
    #[error("no ciphertext from participant {0}")]
    MissingParticipant(ParticipantId),
    #[error("more than one ciphertext from participant {0}")]
    DuplicateParticipant(ParticipantId),
    #[error("ciphertext from non-member {0}")]
    UnexpectedParticipant(ParticipantId),
    #[error("ciphertext for round {got} in round {expected}")]
    WrongRound { expected: u64, got: u64 },
}

/// The broadcast tuple `(O_i, c_i)` plus an optional proof, signed by the
/// sender's setup key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCiphertext {
    pub participant: ParticipantId,
    pub round: u64,
    pub o: Scalar,
    pub c: Commitment,
    #[serde(with = "opt_hex")]
    pub proof: Option<Vec<u8>>,
    #[serde(default)]
    pub signature: Option<Signature>,
}

pub(crate) fn encode_opt_bytes(bytes: Option<&[u8]>, out: &mut Vec<u8>) {
    match bytes {
        None => out.push(0),
        Some(b) => {
            out.push(1);
            out.extend_from_slice(&(b.len() as u64).to_be_bytes());
            out.extend_from_slice(b);
        }
    }
}

impl RoundCiphertext {
    fn signed_bytes(&self, params: &GroupParams) -> Vec<u8> {
        let mut out = b"dcmesh/ciphertext".to_vec();
        out.extend_from_slice(&self.participant.to_be_bytes());
        out.extend_from_slice(&self.round.to_be_bytes());
        params.encode_scalar(&self.o, &mut out);
        params.encode_element(self.c.element(), &mut out);
        encode_opt_bytes(self.proof.as_deref(), &mut out);
        out
    }

    /// Signs everything but the signature; call after attaching the proof.
    pub fn sign<R: RngCore + ?Sized>(&mut self, params: &GroupParams, key: &SigningKey, rng: &mut R) {
        self.signature = Some(key.sign(params, &self.signed_bytes(params), rng));
    }

    pub fn is_signed_by(&self, params: &GroupParams, key: &VerifyingKey) -> bool {
        self.signature.as_ref().is_some_and(|sig| verify_signature(params, key, &self.signed_bytes(params), sig))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundResult {
    pub round: u64,
    pub sum: Scalar,
    pub valid: bool,
    pub ciphertexts: Vec<RoundCiphertext>,
}

/// A participant's handle on its own pads. Each round's pads can be opened
/// once; a second use is refused.
#[derive(Debug)]
pub struct PadBook<'g> {
    graph: &'g KeyGraph,
    id: ParticipantId,
    spent: BTreeSet<u64>,
}

impl<'g> PadBook<'g> {
    pub fn new(graph: &'g KeyGraph, id: ParticipantId) -> Self {
        PadBook { graph, id, spent: BTreeSet::new() }
    }

    pub fn id(&self) -> ParticipantId {
        self.id
    }

    pub fn graph(&self) -> &'g KeyGraph {
        self.graph
    }

    /// Sum of this participant's shares with `peers` for `round`, with the
    /// matching aggregate commitment.
    pub fn open(
        &mut self,
        params: &GroupParams,
        round: u64,
        peers: &BTreeSet<ParticipantId>,
    ) -> Result<(PadShare, Commitment), RoundError> {
        if self.spent.contains(&round) {
            return Err(RoundError::PadReused(round));
        }
        let pad = self.graph.pad_sum(params, self.id, peers, round)?;
        let c = self.graph.aggregate_commitment_among(params, self.id, peers, round)?;
        self.spent.insert(round);
        Ok((pad, c))
    }
}

/// `O = K_i (+ M)`, `c = ∏_j c_ij`. Returns the pad opening alongside, which
/// the caller needs for proofs.
pub fn make_ciphertext(
    params: &GroupParams,
    book: &mut PadBook<'_>,
    round: u64,
    peers: &BTreeSet<ParticipantId>,
    message: Option<&Scalar>,
) -> Result<(RoundCiphertext, PadShare), RoundError> {
    let (pad, c) = book.open(params, round, peers)?;
    let o = match message {
        Some(m) => params.add(&pad.k, m),
        None => pad.k.clone(),
    };
    Ok((RoundCiphertext { participant: book.id(), round, o, c, proof: None, signature: None }, pad))
}

/// Sums the `O_i` and checks `∏ c_i = 1`. Exactly one ciphertext per
/// expected participant is required.
pub fn aggregate_round(
    params: &GroupParams,
    round: u64,
    expected: &BTreeSet<ParticipantId>,
    ciphertexts: Vec<RoundCiphertext>,
) -> Result<RoundResult, RoundError> {
    let mut seen = BTreeSet::new();
    for ct in &ciphertexts {
        if ct.round != round {
            return Err(RoundError::WrongRound { expected: round, got: ct.round });
        }
        if !expected.contains(&ct.participant) {
            return Err(RoundError::UnexpectedParticipant(ct.participant));
        }
        if !seen.insert(ct.participant) {
            return Err(RoundError::DuplicateParticipant(ct.participant));
        }
    }
    if let Some(&missing) = expected.difference(&seen).next() {
        return Err(RoundError::MissingParticipant(missing));
    }
    let sum = params.sum_scalars(ciphertexts.iter().map(|c| &c.o));
    let product = params.product(ciphertexts.iter().map(|c| c.c.element()));
    Ok(RoundResult { round, sum, valid: product.is_identity(), ciphertexts })
}

/// What a participant reveals for a disputed round: its pair commitments
/// with the counterparties' endorsements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Publication {
    pub participant: ParticipantId,
    pub entries: Vec<SignedCommitment>,
    #[serde(default)]
    pub signature: Option<Signature>,
}

impl Publication {
    fn signed_bytes(&self, params: &GroupParams, round: u64) -> Vec<u8> {
        let mut out = b"dcmesh/publication".to_vec();
        out.extend_from_slice(&round.to_be_bytes());
        out.extend_from_slice(&self.participant.to_be_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_be_bytes());
        for e in &self.entries {
            out.extend_from_slice(&leaf_bytes(params, &e.commitment, e.owner, e.counterparty, e.round));
            out.extend_from_slice(&e.path.leaf_index.to_be_bytes());
            out.extend_from_slice(&(e.path.siblings.len() as u64).to_be_bytes());
            for h in &e.path.siblings {
                out.extend_from_slice(h);
            }
        }
        out
    }

    /// `round` is the disputed round, so a publication cannot be replayed
    /// into another investigation.
    pub fn sign<R: RngCore + ?Sized>(&mut self, params: &GroupParams, key: &SigningKey, round: u64, rng: &mut R) {
        self.signature = Some(key.sign(params, &self.signed_bytes(params, round), rng));
    }

    pub fn is_signed_by(&self, params: &GroupParams, key: &VerifyingKey, round: u64) -> bool {
        self.signature.as_ref().is_some_and(|sig| verify_signature(params, key, &self.signed_bytes(params, round), sig))
    }
}

/// The honest publication of `i` for `round` towards `peers`.
pub fn publish(
    params: &GroupParams,
    graph: &KeyGraph,
    i: ParticipantId,
    round: u64,
    peers: &BTreeSet<ParticipantId>,
) -> Result<Publication, SetupError> {
    let mut entries = Vec::new();
    for &j in peers {
        if j != i {
            if let Some(sc) = graph.signed_commitment(params, i, j, round)? {
                entries.push(sc);
            }
        }
    }
    Ok(Publication { participant: i, entries, signature: None })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvestigationRecord {
    pub round: u64,
    pub publications: Vec<Publication>,
    pub verdicts: BTreeMap<ParticipantId, Reason>,
}

/// Checks every publication against the signed roots, `c_i = ∏_j c_ij` and
/// `c_ij · c_ji = 1`. The first failing check per participant is recorded.
pub fn investigate(
    params: &GroupParams,
    public: &KeyGraphPublic,
    round: u64,
    broadcast: &BTreeMap<ParticipantId, Commitment>,
    publications: Vec<Publication>,
) -> InvestigationRecord {
    let active: BTreeSet<ParticipantId> = broadcast.keys().copied().collect();
    let mut verdicts = BTreeMap::new();
    let by_owner: BTreeMap<ParticipantId, &Publication> = publications.iter().map(|p| (p.participant, p)).collect();
    // (owner, counterparty) -> endorsed commitment
    let mut endorsed: BTreeMap<(ParticipantId, ParticipantId), Commitment> = BTreeMap::new();

    for &i in &active {
        let Some(publication) = by_owner.get(&i) else {
            verdicts.insert(i, Reason::NonCooperation);
            continue;
        };
        let mut entries: BTreeMap<ParticipantId, &SignedCommitment> = BTreeMap::new();
        let mut reason = None;
        for e in &publication.entries {
            let misaddressed =
                e.owner != i || e.round != round || !active.contains(&e.counterparty) || e.counterparty == i;
            if misaddressed || entries.insert(e.counterparty, e).is_some() {
                reason.get_or_insert(Reason::NonCooperation);
            }
        }
        let mut product = params.identity_commitment();
        for &j in active.iter().filter(|&&j| j != i) {
            if public.is_opted_out(i, j) {
                if entries.contains_key(&j) {
                    reason.get_or_insert(Reason::NonCooperation);
                }
                continue;
            }
            let Some(sc) = entries.get(&j) else {
                reason.get_or_insert(Reason::NonCooperation);
                continue;
            };
            if params.check_element(sc.commitment.element()).is_err()
                || public.check_signed_commitment(params, sc).is_err()
            {
                reason.get_or_insert(Reason::BadSignature);
                continue;
            }
            endorsed.insert((i, j), sc.commitment.clone());
            product = params.combine(&product, &sc.commitment);
        }
        if reason.is_none() && &product != broadcast.get(&i).expect("active member") {
            reason = Some(Reason::AggregateMismatch);
        }
        if let Some(r) = reason {
            verdicts.insert(i, r);
        }
    }

    for (&(i, j), cij) in &endorsed {
        if i < j {
            if let Some(cji) = endorsed.get(&(j, i)) {
                if !params.combine(cij, cji).is_identity() {
                    verdicts.entry(i).or_insert(Reason::PairMismatch);
                    verdicts.entry(j).or_insert(Reason::PairMismatch);
                }
            }
        }
    }

    InvestigationRecord { round, publications, verdicts }
}

pub(crate) mod opt_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_some(&hex::encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| hex::decode(s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::SecurityLevel;
    use crate::keysetup::generate_keys;
    use crate::zkp::stmt_no_message;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn setup(level: SecurityLevel, n: u32, rounds: u64, seed: u64) -> (GroupParams, KeyGraph) {
        let gp = GroupParams::derive(level, b"dcnet").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let keys = generate_keys(&gp, n, &mut rng);
        let g = KeyGraph::setup(&gp, &keys, rounds, &BTreeSet::new(), &mut rng).unwrap();
        (gp, g)
    }

    fn members(n: u32) -> BTreeSet<ParticipantId> {
        (0..n).collect()
    }

    fn honest_round(gp: &GroupParams, g: &KeyGraph, round: u64, msgs: &BTreeMap<u32, Scalar>) -> RoundResult {
        let peers = members(g.n());
        let cts = (0..g.n())
            .map(|i| {
                let mut book = PadBook::new(g, i);
                make_ciphertext(gp, &mut book, round, &peers, msgs.get(&i)).unwrap().0
            })
            .collect();
        aggregate_round(gp, round, &peers, cts).unwrap()
    }

    #[test]
    fn single_sender_recovers_message() {
        let (gp, g) = setup(SecurityLevel::Test, 5, 1, 1);
        let res = honest_round(&gp, &g, 0, &BTreeMap::from([(1, gp.scalar(42))]));
        assert!(res.valid);
        assert_eq!(res.sum, gp.scalar(42));
    }

    #[test]
    fn colliding_senders_add_up() {
        let (gp, g) = setup(SecurityLevel::Test, 4, 1, 2);
        let res = honest_round(&gp, &g, 0, &BTreeMap::from([(0, gp.scalar(3)), (3, gp.scalar(4))]));
        assert!(res.valid);
        assert_eq!(res.sum, gp.scalar(7));
    }

    #[test]
    fn honest_rounds_random_configurations() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for trial in 0..40 {
            let n = rng.gen_range(2..=8);
            let (gp, g) = setup(SecurityLevel::Test, n, 1, trial);
            let mut msgs = BTreeMap::new();
            for i in 0..n {
                if rng.gen_bool(0.4) {
                    msgs.insert(i, gp.random_scalar(&mut rng));
                }
            }
            let res = honest_round(&gp, &g, 0, &msgs);
            assert!(res.valid);
            assert_eq!(res.sum, gp.sum_scalars(msgs.values()));
            for i in 0..n {
                let sender = msgs.contains_key(&i);
                let ct = &res.ciphertexts[i as usize];
                let own_pad = g.pad_sum(&gp, i, &members(n), 0).unwrap();
                let stmt = stmt_no_message(&gp, &ct.o, &ct.c, b"t".to_vec());
                assert_eq!(stmt.holds_for(&gp, &own_pad.r), !sender || msgs[&i].is_zero());
            }
        }
    }

    #[test]
    fn lone_participant() {
        let (gp, g) = setup(SecurityLevel::Test, 1, 1, 3);
        let res = honest_round(&gp, &g, 0, &BTreeMap::from([(0, gp.scalar(9))]));
        assert_eq!(res.sum, gp.scalar(9));
        assert!(res.ciphertexts[0].c.is_identity());
        assert!(res.valid);
    }

    #[test]
    fn tampered_pad_breaks_validity() {
        let (gp, g) = setup(SecurityLevel::TestSmall, 3, 1, 4);
        let peers = members(3);
        let mut cts: Vec<RoundCiphertext> = (0..3)
            .map(|i| make_ciphertext(&gp, &mut PadBook::new(&g, i), 0, &peers, None).unwrap().0)
            .collect();
        // P_1 uses K_12 + 1 and recomputes its own commitment from the tampered pad.
        let share = g.share(&gp, 1, 2, 0).unwrap();
        let k_bad = gp.add(&share.k, &gp.scalar(1));
        let c_bad = gp.combine(&g.pair_commitment(&gp, 1, 0, 0).unwrap(), &gp.commit(&k_bad, &share.r));
        cts[1].o = gp.add(&cts[1].o, &gp.scalar(1));
        cts[1].c = c_bad;
        let res = aggregate_round(&gp, 0, &peers, cts).unwrap();
        assert!(!res.valid);
        // independent oracle: the product is exactly g^1
        let prod = gp.product(res.ciphertexts.iter().map(|c| c.c.element()));
        assert_eq!(prod, gp.g().clone());
    }

    #[test]
    fn aggregate_rejects_bad_sets() {
        let (gp, g) = setup(SecurityLevel::Test, 3, 1, 5);
        let peers = members(3);
        let ct = |i| make_ciphertext(&gp, &mut PadBook::new(&g, i), 0, &peers, None).unwrap().0;
        assert_eq!(
            aggregate_round(&gp, 0, &peers, vec![ct(0), ct(1)]).unwrap_err(),
            RoundError::MissingParticipant(2)
        );
        assert_eq!(
            aggregate_round(&gp, 0, &peers, vec![ct(0), ct(1), ct(1), ct(2)]).unwrap_err(),
            RoundError::DuplicateParticipant(1)
        );
    }

    #[test]
    fn pads_are_single_use() {
        let (gp, g) = setup(SecurityLevel::Test, 2, 2, 6);
        let peers = members(2);
        let mut book = PadBook::new(&g, 0);
        make_ciphertext(&gp, &mut book, 0, &peers, None).unwrap();
        assert_eq!(make_ciphertext(&gp, &mut book, 0, &peers, None).unwrap_err(), RoundError::PadReused(0));
        make_ciphertext(&gp, &mut book, 1, &peers, None).unwrap();
        assert!(matches!(
            make_ciphertext(&gp, &mut book, 2, &peers, None).unwrap_err(),
            RoundError::Setup(SetupError::RoundBudgetExhausted { .. })
        ));
    }

    fn broadcast_of(res: &RoundResult) -> BTreeMap<ParticipantId, Commitment> {
        res.ciphertexts.iter().map(|c| (c.participant, c.c.clone())).collect()
    }

    fn publications(gp: &GroupParams, g: &KeyGraph, round: u64) -> Vec<Publication> {
        (0..g.n()).map(|i| publish(gp, g, i, round, &members(g.n())).unwrap()).collect()
    }

    #[test]
    fn honest_investigation_is_empty() {
        let (gp, g) = setup(SecurityLevel::Test, 5, 3, 7);
        for round in 0..3 {
            let res = honest_round(&gp, &g, round, &BTreeMap::from([(2, gp.scalar(5))]));
            let rec = investigate(&gp, g.public(), round, &broadcast_of(&res), publications(&gp, &g, round));
            assert!(rec.verdicts.is_empty());
        }
    }

    #[test]
    fn aggregate_mismatch_is_pinned() {
        let (gp, g) = setup(SecurityLevel::Test, 5, 1, 8);
        let res = honest_round(&gp, &g, 0, &BTreeMap::new());
        let mut b = broadcast_of(&res);
        let c3 = b[&3].clone();
        b.insert(3, gp.combine(&c3, &Commitment::from(gp.g().clone())));
        let rec = investigate(&gp, g.public(), 0, &b, publications(&gp, &g, 0));
        assert_eq!(rec.verdicts, BTreeMap::from([(3, Reason::AggregateMismatch)]));
    }

    #[test]
    fn diverging_pair_value_is_pinned_by_signature() {
        let (gp, g) = setup(SecurityLevel::Test, 5, 1, 9);
        let peers = members(5);
        // P_2 used K'_24 = K_24 + 1 and a commitment consistent with it.
        let share = g.share(&gp, 2, 4, 0).unwrap();
        let forged = gp.commit(&gp.add(&share.k, &gp.scalar(1)), &share.r);
        let mut b = broadcast_of(&honest_round(&gp, &g, 0, &BTreeMap::new()));
        let c2 = peers
            .iter()
            .filter(|&&j| j != 2 && j != 4)
            .fold(forged.clone(), |acc, &j| gp.combine(&acc, &g.pair_commitment(&gp, 2, j, 0).unwrap()));
        b.insert(2, c2);
        let prod = gp.product(b.values().map(|c| c.element()));
        assert!(!prod.is_identity());
        assert!(!gp.combine(&forged, &g.pair_commitment(&gp, 4, 2, 0).unwrap()).is_identity());

        let mut pubs = publications(&gp, &g, 0);
        for e in &mut pubs[2].entries {
            if e.counterparty == 4 {
                e.commitment = forged.clone();
            }
        }
        let rec = investigate(&gp, g.public(), 0, &b, pubs);
        assert_eq!(rec.verdicts, BTreeMap::from([(2, Reason::BadSignature)]));
    }

    #[test]
    fn missing_publication_is_non_cooperation() {
        let (gp, g) = setup(SecurityLevel::Test, 3, 1, 10);
        let res = honest_round(&gp, &g, 0, &BTreeMap::new());
        let mut pubs = publications(&gp, &g, 0);
        pubs.remove(1);
        let rec = investigate(&gp, g.public(), 0, &broadcast_of(&res), pubs);
        assert_eq!(rec.verdicts, BTreeMap::from([(1, Reason::NonCooperation)]));
    }

    #[test]
    fn opted_out_edges_count_as_identity() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"dcnet").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let keys = generate_keys(&gp, 4, &mut rng);
        let g = KeyGraph::setup(&gp, &keys, 1, &BTreeSet::from([(1, 3)]), &mut rng).unwrap();
        let res = honest_round(&gp, &g, 0, &BTreeMap::from([(0, gp.scalar(8))]));
        assert!(res.valid);
        assert_eq!(res.sum, gp.scalar(8));
        let pubs = publications(&gp, &g, 0);
        assert_eq!(pubs[1].entries.len(), 2);
        let rec = investigate(&gp, g.public(), 0, &broadcast_of(&res), pubs);
        assert!(rec.verdicts.is_empty());
    }

    #[test]
    fn single_output_is_uniform_exhaustively() {
        // q = 53: O_1 = M + Σ_j K_1j over every pad assignment hits each residue equally.
        let gp = GroupParams::derive(SecurityLevel::TestSmall, b"dcnet").unwrap();
        let q = gp.order().to_u64_digits()[0];
        let m = gp.scalar(17);
        for n in [2u32, 3] {
            let mut counts = vec![0u64; q as usize];
            let pads = n - 1;
            for idx in 0..q.pow(pads) {
                let mut o = m.clone();
                let mut rest = idx;
                for _ in 0..pads {
                    o = gp.add(&o, &gp.scalar(rest % q));
                    rest /= q;
                }
                counts[o.to_u64().unwrap() as usize] += 1;
            }
            let expect = q.pow(pads - 1);
            assert!(counts.iter().all(|&c| c == expect), "n={n}");
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn vector_pads_cancel_blockwise() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"dcnet-vec").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let blocks = gp.message_generators().len();
        let n = 3usize;
        // antisymmetric vector pads K_ij[b], r_ij
        let mut k = vec![vec![vec![gp.zero(); blocks]; n]; n];
        let mut r = vec![vec![gp.zero(); n]; n];
        for i in 0..n {
            for j in i + 1..n {
                for b in 0..blocks {
                    k[i][j][b] = gp.random_scalar(&mut rng);
                    k[j][i][b] = gp.neg(&k[i][j][b]);
                }
                r[i][j] = gp.random_scalar(&mut rng);
                r[j][i] = gp.neg(&r[i][j]);
            }
        }
        let message: Vec<Scalar> = (0..blocks as u64).map(|b| gp.scalar(b + 1)).collect();
        let mut total = vec![gp.zero(); blocks];
        let mut product = gp.identity_commitment();
        for i in 0..n {
            let mut o = vec![gp.zero(); blocks];
            let mut ri = gp.zero();
            for j in 0..n {
                for b in 0..blocks {
                    o[b] = gp.add(&o[b], &k[i][j][b]);
                }
                ri = gp.add(&ri, &r[i][j]);
            }
            let c = gp.commit_vector(&o, &ri).unwrap();
            if i == 1 {
                for b in 0..blocks {
                    o[b] = gp.add(&o[b], &message[b]);
                }
            }
            for b in 0..blocks {
                total[b] = gp.add(&total[b], &o[b]);
            }
            product = gp.combine(&product, &c);
        }
        assert!(product.is_identity());
        assert_eq!(total, message);
    }
}
