//! Binary Merkle trees for batch-endorsing many per-round commitments with a
//! single signature over the root.
//!
//! Leaves and internal nodes are hashed under different prefixes. The leaf
//! layer is padded to a power of two with a fixed padding digest, so every
//! authentication path has exactly `log2(width)` siblings.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::signature::{verify_signature, Signature, SigningKey, VerifyingKey};
use crate::group::GroupParams;

pub type Hash = [u8; 32];

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;
const PAD_PREFIX: u8 = 0x02;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MerkleError {
    #[error("cannot build a Merkle tree without leaves")]
    Empty,
    #[error("leaf index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("authentication path does not lead to the signed root")]
    PathInvalid,
    #[error("root signature invalid")]
    BadRootSignature,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerklePath {
    pub leaf_index: u64,
    #[serde(with = "hash_list")]
    pub siblings: Vec<Hash>,
}

pub fn leaf_hash(leaf: &[u8]) -> Hash {
    let mut h = Sha256::new();
    h.update([LEAF_PREFIX]);
    h.update(leaf);
    h.finalize().into()
}

fn node_hash(left: &Hash, right: &Hash) -> Hash {
    let mut h = Sha256::new();
    h.update([NODE_PREFIX]);
    h.update(left);
    h.update(right);
    h.finalize().into()
}

fn pad_hash() -> Hash {
    Sha256::digest([PAD_PREFIX]).into()
}

#[derive(Clone, Debug)]
pub struct MerkleTree {
    levels: Vec<Vec<Hash>>,
    leaf_count: usize,
}

impl MerkleTree {
    pub fn build<L: AsRef<[u8]>>(leaves: &[L]) -> Result<Self, MerkleError> {
        if leaves.is_empty() {
            return Err(MerkleError::Empty);
        }
        let width = leaves.len().next_power_of_two();
        let mut level: Vec<Hash> = leaves.iter().map(|l| leaf_hash(l.as_ref())).collect();
        level.resize(width, pad_hash());
        let mut levels = vec![level];
        while levels.last().expect("non-empty").len() > 1 {
            let next = levels
                .last()
                .expect("non-empty")
                .chunks(2)
                .map(|pair| node_hash(&pair[0], &pair[1]))
                .collect();
            levels.push(next);
        }
        Ok(MerkleTree { levels, leaf_count: leaves.len() })
    }

    pub fn root(&self) -> Hash {
        self.levels.last().expect("non-empty")[0]
    }

    pub fn len(&self) -> usize {
        self.leaf_count
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_count == 0
    }

    pub fn path(&self, index: usize) -> Result<MerklePath, MerkleError> {
        if index >= self.leaf_count {
            return Err(MerkleError::IndexOutOfRange(index));
        }
        let mut idx = index;
        let mut siblings = Vec::with_capacity(self.levels.len() - 1);
        for level in &self.levels[..self.levels.len() - 1] {
            siblings.push(level[idx ^ 1]);
            idx >>= 1;
        }
        Ok(MerklePath { leaf_index: index as u64, siblings })
    }
}

/// Recomputes the root from a leaf and its authentication path.
pub fn root_from_path(leaf: &[u8], path: &MerklePath) -> Option<Hash> {
    if path.siblings.len() >= 64 || path.leaf_index >> path.siblings.len() != 0 {
        return None;
    }
    let mut acc = leaf_hash(leaf);
    let mut idx = path.leaf_index;
    for sib in &path.siblings {
        acc = if idx & 1 == 0 { node_hash(&acc, sib) } else { node_hash(sib, &acc) };
        idx >>= 1;
    }
    Some(acc)
}

/// One signature over a Merkle root plus an authentication path per leaf.
#[derive(Clone, Debug)]
pub struct BatchEndorsement {
    pub root: Hash,
    pub signature: Signature,
    pub paths: Vec<MerklePath>,
}

/// Bytes actually signed: the root bound to a context string.
pub fn root_message(root: &Hash, context: &[u8]) -> Vec<u8> {
    let mut m = b"dcmesh/merkle-root".to_vec();
    m.extend_from_slice(root);
    m.extend_from_slice(context);
    m
}

pub fn merkle_batch_sign<L: AsRef<[u8]>, R: RngCore + ?Sized>(
    params: &GroupParams,
    signer: &SigningKey,
    leaves: &[L],
    context: &[u8],
    rng: &mut R,
) -> Result<BatchEndorsement, MerkleError> {
    let tree = MerkleTree::build(leaves)?;
    let root = tree.root();
    let signature = signer.sign(params, &root_message(&root, context), rng);
    let paths = (0..tree.len()).map(|i| tree.path(i)).collect::<Result<_, _>>()?;
    Ok(BatchEndorsement { root, signature, paths })
}

pub fn verify_leaf(
    params: &GroupParams,
    key: &VerifyingKey,
    root: &Hash,
    signature: &Signature,
    context: &[u8],
    leaf: &[u8],
    path: &MerklePath,
) -> Result<(), MerkleError> {
    if !verify_signature(params, key, &root_message(root, context), signature) {
        return Err(MerkleError::BadRootSignature);
    }
    match root_from_path(leaf, path) {
        Some(r) if &r == root => Ok(()),
        _ => Err(MerkleError::PathInvalid),
    }
}

pub(crate) mod hash_list {
    use super::Hash;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Hash], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Hash>, D::Error> {
        Vec::<String>::deserialize(d)?
            .into_iter()
            .map(|s| super::hash_hex::parse(&s).map_err(serde::de::Error::custom))
            .collect()
    }
}

pub(crate) mod hash_hex {
    use super::Hash;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn parse(s: &str) -> Result<Hash, String> {
        let v = hex::decode(s).map_err(|e| e.to_string())?;
        v.try_into().map_err(|_| "expected 32 bytes".to_string())
    }

    pub fn serialize<S: Serializer>(v: &Hash, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Hash, D::Error> {
        parse(&String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::SecurityLevel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn single_leaf_root_is_leaf_hash() {
        let t = MerkleTree::build(&[b"only"]).unwrap();
        assert_eq!(t.root(), leaf_hash(b"only"));
        let p = t.path(0).unwrap();
        assert!(p.siblings.is_empty());
        assert_eq!(root_from_path(b"only", &p), Some(t.root()));
    }

    #[test]
    fn four_leaves_two_node_path() {
        let leaves = [b"a", b"b", b"c", b"d"];
        let t = MerkleTree::build(&leaves).unwrap();
        let p = t.path(2).unwrap();
        assert_eq!(p.siblings.len(), 2);
        // independent recomputation of the root
        let ab = node_hash(&leaf_hash(b"a"), &leaf_hash(b"b"));
        let cd = node_hash(&leaf_hash(b"c"), &leaf_hash(b"d"));
        assert_eq!(t.root(), node_hash(&ab, &cd));
        assert_eq!(root_from_path(b"c", &p), Some(t.root()));

        let mut flipped = p.clone();
        flipped.siblings[1][0] ^= 1;
        assert_ne!(root_from_path(b"c", &flipped), Some(t.root()));
        assert_ne!(root_from_path(b"d", &p), Some(t.root()));
    }

    #[test]
    fn odd_leaf_counts_and_errors() {
        let leaves: Vec<Vec<u8>> = (0..5u8).map(|i| vec![i]).collect();
        let t = MerkleTree::build(&leaves).unwrap();
        for (i, l) in leaves.iter().enumerate() {
            assert_eq!(root_from_path(l, &t.path(i).unwrap()), Some(t.root()));
        }
        assert_eq!(t.path(5).unwrap_err(), MerkleError::IndexOutOfRange(5));
        assert_eq!(MerkleTree::build::<Vec<u8>>(&[]).unwrap_err(), MerkleError::Empty);
    }

    #[test]
    fn batch_sign_and_verify_leaf() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"merkle").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let sk = SigningKey::generate(&gp, &mut rng);
        let leaves: Vec<Vec<u8>> = (0..7u8).map(|i| vec![i; 3]).collect();
        let batch = merkle_batch_sign(&gp, &sk, &leaves, b"ctx", &mut rng).unwrap();
        for (leaf, path) in leaves.iter().zip(&batch.paths) {
            verify_leaf(&gp, sk.verifying_key(), &batch.root, &batch.signature, b"ctx", leaf, path).unwrap();
        }
        let mut bad = batch.paths[3].clone();
        bad.siblings[0][5] ^= 0x10;
        assert_eq!(
            verify_leaf(&gp, sk.verifying_key(), &batch.root, &batch.signature, b"ctx", &leaves[3], &bad),
            Err(MerkleError::PathInvalid)
        );
        assert_eq!(
            verify_leaf(&gp, sk.verifying_key(), &batch.root, &batch.signature, b"other", &leaves[3], &batch.paths[3]),
            Err(MerkleError::BadRootSignature)
        );
    }
}
