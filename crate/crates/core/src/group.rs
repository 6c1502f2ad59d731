//! Prime-order Schnorr groups, scalar arithmetic and Pedersen commitments.
//!
//! Everything lives in the order-`q` subgroup of `Z_p^*`. The last entry of
//! the generator list is the blinding generator `h`; the entries before it
//! are message generators `g, g', g'', ...` used by vector commitments.

use std::fmt;
use std::sync::{Arc, OnceLock};

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// RFC 3526 group 14: a 2048-bit safe prime.
const MODP_2048_HEX: &str = "\
FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74\
020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437\
4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05\
98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB\
9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718\
3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF";

/// 63-bit safe prime `p = 2q + 1` used for fast simulations.
const TEST_P: u64 = 9_223_372_036_854_771_239;
const TEST_Q: u64 = 4_611_686_018_427_385_619;

/// Largest subgroup order accepted by [`GroupParams::brute_force_dlog`].
pub const BRUTE_FORCE_LIMIT: u64 = 1 << 20;

const PRODUCTION_MESSAGE_GENERATORS: usize = 4;
const TEST_MESSAGE_GENERATORS: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroupError {
    #[error("domain tag must not be empty")]
    EmptyDomainTag,
    #[error("invalid group parameters: {0}")]
    InvalidParams(String),
    #[error("value is not an element of the order-q subgroup")]
    NotInSubgroup,
    #[error("{given} values but only {available} message generators")]
    TooManyValues { given: usize, available: usize },
    #[error("subgroup order exceeds the brute-force limit")]
    GroupTooLarge,
    #[error("target is not in the subgroup generated by the base")]
    NotFound,
    #[error("scalar has no inverse")]
    NotInvertible,
    #[error("malformed encoding: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityLevel {
    /// `p = 107, q = 53, g = 4, h = 9`: small enough for exhaustive oracles.
    TestSmall,
    /// 63-bit safe-prime group with hash-derived generators.
    Test,
    /// 2048-bit MODP safe-prime group with hash-derived generators.
    Production,
}

impl SecurityLevel {
    pub fn name(self) -> &'static str {
        match self {
            SecurityLevel::TestSmall => "test_small",
            SecurityLevel::Test => "test",
            SecurityLevel::Production => "production",
        }
    }
}

impl std::str::FromStr for SecurityLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "test_small" | "test-small" => Ok(SecurityLevel::TestSmall),
            "test" => Ok(SecurityLevel::Test),
            "production" => Ok(SecurityLevel::Production),
            other => Err(format!("unknown group `{other}`")),
        }
    }
}

/// An exponent in `Z_q`, always reduced.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scalar(BigUint);

/// An element of the order-`q` subgroup.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(BigUint);

/// A Pedersen commitment `g^K h^r`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Commitment(GroupElement);

impl Scalar {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
}

impl GroupElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_one()
    }
}

impl Commitment {
    pub fn element(&self) -> &GroupElement {
        &self.0
    }

    pub fn into_element(self) -> GroupElement {
        self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_identity()
    }
}

impl From<GroupElement> for Commitment {
    fn from(e: GroupElement) -> Self {
        Commitment(e)
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scalar({})", self.0)
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({})", self.0)
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for Commitment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Commitment({})", self.0 .0)
    }
}

fn serialize_decimal<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_str_radix(10))
}

fn deserialize_decimal<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
    let s = String::deserialize(d)?;
    parse_decimal(&s).map_err(serde::de::Error::custom)
}

fn parse_decimal(s: &str) -> Result<BigUint, String> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("not a decimal integer: `{s}`"));
    }
    BigUint::parse_bytes(s.as_bytes(), 10).ok_or_else(|| format!("not a decimal integer: `{s}`"))
}

// Serialized scalars and elements are unchecked decimal integers; callers
// that accept untrusted input re-validate them with `GroupParams::check_*`.
impl Serialize for Scalar {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize_decimal(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        deserialize_decimal(d).map(Scalar)
    }
}

impl Serialize for GroupElement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize_decimal(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for GroupElement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        deserialize_decimal(d).map(GroupElement)
    }
}

/// Public description of a group: modulus, subgroup order, generators and
/// the domain tag every hash in the protocol is separated by.
#[derive(Clone)]
pub struct GroupParams {
    modulus: BigUint,
    order: BigUint,
    generators: Vec<GroupElement>,
    domain_tag: Vec<u8>,
    element_width: usize,
    scalar_width: usize,
    /// Fixed-base tables for `g` and `h`, built on first use.
    fixed: OnceLock<Arc<[FixedBase; 2]>>,
}

impl PartialEq for GroupParams {
    fn eq(&self, other: &Self) -> bool {
        self.modulus == other.modulus
            && self.order == other.order
            && self.generators == other.generators
            && self.domain_tag == other.domain_tag
    }
}

impl Eq for GroupParams {}

impl fmt::Debug for GroupParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupParams")
            .field("bits", &self.modulus.bits())
            .field("generators", &self.generators.len())
            .field("domain_tag", &String::from_utf8_lossy(&self.domain_tag))
            .finish()
    }
}

/// Text form of [`GroupParams`] used in scenario files and transcripts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub p: String,
    pub q: String,
    pub generators: Vec<String>,
    pub domain_tag: String,
}

impl GroupParams {
    /// Builds parameters after checking every group invariant.
    pub fn new(
        modulus: BigUint,
        order: BigUint,
        generators: Vec<BigUint>,
        domain_tag: &[u8],
    ) -> Result<Self, GroupError> {
        let bad = |m: &str| GroupError::InvalidParams(m.to_string());
        if domain_tag.is_empty() {
            return Err(GroupError::EmptyDomainTag);
        }
        if !is_probable_prime(&modulus) {
            return Err(bad("modulus is not prime"));
        }
        if !is_probable_prime(&order) {
            return Err(bad("order is not prime"));
        }
        if !(&modulus - 1u32).is_multiple_of(&order) {
            return Err(bad("order does not divide p - 1"));
        }
        if generators.len() < 2 {
            return Err(bad("need at least two generators"));
        }
        for (idx, gen) in generators.iter().enumerate() {
            if gen.is_zero() || gen >= &modulus || gen.is_one() {
                return Err(GroupError::InvalidParams(format!("generator {idx} is out of range")));
            }
            if !pow_mod(gen, &order, &modulus).is_one() {
                return Err(GroupError::InvalidParams(format!("generator {idx} has wrong order")));
            }
            if generators[..idx].contains(gen) {
                return Err(GroupError::InvalidParams(format!("generator {idx} is repeated")));
            }
        }
        Ok(Self::assemble(modulus, order, generators, domain_tag.to_vec()))
    }

    fn assemble(modulus: BigUint, order: BigUint, generators: Vec<BigUint>, domain_tag: Vec<u8>) -> Self {
        let element_width = byte_width(&modulus);
        let scalar_width = byte_width(&order);
        GroupParams {
            modulus,
            order,
            generators: generators.into_iter().map(GroupElement).collect(),
            domain_tag,
            element_width,
            scalar_width,
            fixed: OnceLock::new(),
        }
    }

    /// Canonical parameters for a security level.
    ///
    /// `TestSmall` is fixed at `p = 107, q = 53, g = 4, h = 9` with one extra
    /// hash-derived message generator `g'` (placed between `g` and `h`). The
    /// other levels derive all generators from `domain_tag`.
    pub fn derive(level: SecurityLevel, domain_tag: &[u8]) -> Result<Self, GroupError> {
        if domain_tag.is_empty() {
            return Err(GroupError::EmptyDomainTag);
        }
        match level {
            SecurityLevel::TestSmall => {
                let p = BigUint::from(107u32);
                let q = BigUint::from(53u32);
                let mut fixed = vec![BigUint::from(4u32), BigUint::from(9u32)];
                let extra = derive_generators(&p, &q, domain_tag, 1, &fixed);
                fixed.insert(1, extra[0].clone());
                Ok(Self::assemble(p, q, fixed, domain_tag.to_vec()))
            }
            SecurityLevel::Test => {
                let p = BigUint::from(TEST_P);
                let q = BigUint::from(TEST_Q);
                let gens = derive_generators(&p, &q, domain_tag, TEST_MESSAGE_GENERATORS + 1, &[]);
                Ok(Self::assemble(p, q, gens, domain_tag.to_vec()))
            }
            SecurityLevel::Production => {
                let p = BigUint::parse_bytes(MODP_2048_HEX.as_bytes(), 16).expect("constant prime");
                let q = (&p - 1u32) >> 1;
                let gens = derive_generators(&p, &q, domain_tag, PRODUCTION_MESSAGE_GENERATORS + 1, &[]);
                Ok(Self::assemble(p, q, gens, domain_tag.to_vec()))
            }
        }
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn order(&self) -> &BigUint {
        &self.order
    }

    pub fn domain_tag(&self) -> &[u8] {
        &self.domain_tag
    }

    pub fn generators(&self) -> &[GroupElement] {
        &self.generators
    }

    pub fn g(&self) -> &GroupElement {
        &self.generators[0]
    }

    pub fn h(&self) -> &GroupElement {
        self.generators.last().expect("at least two generators")
    }

    pub fn message_generators(&self) -> &[GroupElement] {
        &self.generators[..self.generators.len() - 1]
    }

    pub fn element_width(&self) -> usize {
        self.element_width
    }

    pub fn scalar_width(&self) -> usize {
        self.scalar_width
    }

    /// Bit length of `q`.
    pub fn order_bits(&self) -> u64 {
        self.order.bits()
    }

    pub fn to_record(&self) -> GroupRecord {
        GroupRecord {
            p: self.modulus.to_str_radix(10),
            q: self.order.to_str_radix(10),
            generators: self.generators.iter().map(|g| g.0.to_str_radix(10)).collect(),
            domain_tag: hex::encode(&self.domain_tag),
        }
    }

    pub fn from_record(record: &GroupRecord) -> Result<Self, GroupError> {
        let num = |s: &str| parse_decimal(s).map_err(GroupError::Malformed);
        let tag = hex::decode(&record.domain_tag).map_err(|e| GroupError::Malformed(e.to_string()))?;
        let gens = record.generators.iter().map(|g| num(g)).collect::<Result<Vec<_>, _>>()?;
        GroupParams::new(num(&record.p)?, num(&record.q)?, gens, &tag)
    }

    // ---- scalars ----

    pub fn scalar(&self, v: u64) -> Scalar {
        Scalar(BigUint::from(v) % &self.order)
    }

    pub fn scalar_from_biguint(&self, v: &BigUint) -> Scalar {
        Scalar(v % &self.order)
    }

    /// Maps a signed integer into `Z_q`.
    pub fn scalar_from_i64(&self, v: i64) -> Scalar {
        let s = self.scalar(v.unsigned_abs());
        if v < 0 {
            self.neg(&s)
        } else {
            s
        }
    }

    pub fn check_scalar(&self, s: &Scalar) -> Result<(), GroupError> {
        if s.0 < self.order {
            Ok(())
        } else {
            Err(GroupError::Malformed("scalar out of range".into()))
        }
    }

    pub fn zero(&self) -> Scalar {
        Scalar(BigUint::zero())
    }

    pub fn random_scalar<R: RngCore + ?Sized>(&self, rng: &mut R) -> Scalar {
        let mut buf = vec![0u8; self.scalar_width + 16];
        rng.fill_bytes(&mut buf);
        Scalar(BigUint::from_bytes_be(&buf) % &self.order)
    }

    pub fn add(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 + &b.0) % &self.order)
    }

    pub fn sub(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 + &self.order - &b.0) % &self.order)
    }

    pub fn neg(&self, a: &Scalar) -> Scalar {
        Scalar((&self.order - &a.0) % &self.order)
    }

    pub fn mul_scalars(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 * &b.0) % &self.order)
    }

    pub fn invert_scalar(&self, a: &Scalar) -> Result<Scalar, GroupError> {
        mod_inverse(&a.0, &self.order).map(Scalar).ok_or(GroupError::NotInvertible)
    }

    pub fn sum_scalars<'a>(&self, items: impl IntoIterator<Item = &'a Scalar>) -> Scalar {
        items.into_iter().fold(self.zero(), |acc, s| self.add(&acc, s))
    }

    // ---- group elements ----

    pub fn identity(&self) -> GroupElement {
        GroupElement(BigUint::one())
    }

    pub fn is_member(&self, v: &BigUint) -> bool {
        !v.is_zero() && v < &self.modulus && pow_mod(v, &self.order, &self.modulus).is_one()
    }

    /// Validates a raw integer as a subgroup element.
    pub fn element(&self, v: BigUint) -> Result<GroupElement, GroupError> {
        if self.is_member(&v) {
            Ok(GroupElement(v))
        } else {
            Err(GroupError::NotInSubgroup)
        }
    }

    pub fn check_element(&self, e: &GroupElement) -> Result<(), GroupError> {
        if self.is_member(&e.0) {
            Ok(())
        } else {
            Err(GroupError::NotInSubgroup)
        }
    }

    pub fn exp(&self, base: &GroupElement, e: &Scalar) -> GroupElement {
        let slot = if base == &self.generators[0] {
            0
        } else if base == &self.generators[1] {
            1
        } else {
            return GroupElement(pow_mod(&base.0, &e.0, &self.modulus));
        };
        let tables = self.fixed.get_or_init(|| {
            let bits = self.order.bits();
            Arc::new([
                FixedBase::new(&self.generators[0].0, &self.modulus, bits),
                FixedBase::new(&self.generators[1].0, &self.modulus, bits),
            ])
        });
        match tables[slot].pow(&e.0, &self.modulus) {
            Some(v) => GroupElement(v),
            None => GroupElement(pow_mod(&base.0, &e.0, &self.modulus)),
        }
    }

    pub fn mul(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        GroupElement(mul_mod(&a.0, &b.0, &self.modulus))
    }

    pub fn inverse(&self, a: &GroupElement) -> GroupElement {
        GroupElement(mod_inverse(&a.0, &self.modulus).expect("subgroup elements are units"))
    }

    /// `a * b^-1`
    pub fn div(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        self.mul(a, &self.inverse(b))
    }

    pub fn product<'a>(&self, items: impl IntoIterator<Item = &'a GroupElement>) -> GroupElement {
        items.into_iter().fold(self.identity(), |acc, e| self.mul(&acc, e))
    }

    // ---- commitments ----

    /// `g^K h^r`
    pub fn commit(&self, k: &Scalar, r: &Scalar) -> Commitment {
        Commitment(self.mul(&self.exp(self.g(), k), &self.exp(self.h(), r)))
    }

    /// `g^K g'^K' g''^K'' ... h^r`
    pub fn commit_vector(&self, values: &[Scalar], r: &Scalar) -> Result<Commitment, GroupError> {
        let gens = self.message_generators();
        if values.len() > gens.len() {
            return Err(GroupError::TooManyValues { given: values.len(), available: gens.len() });
        }
        let acc = values
            .iter()
            .zip(gens)
            .fold(self.exp(self.h(), r), |acc, (v, gen)| self.mul(&acc, &self.exp(gen, v)));
        Ok(Commitment(acc))
    }

    pub fn verify_open(&self, c: &Commitment, k: &Scalar, r: &Scalar) -> bool {
        &self.commit(k, r) == c
    }

    pub fn combine(&self, a: &Commitment, b: &Commitment) -> Commitment {
        Commitment(self.mul(&a.0, &b.0))
    }

    pub fn negate(&self, c: &Commitment) -> Commitment {
        Commitment(self.inverse(&c.0))
    }

    pub fn identity_commitment(&self) -> Commitment {
        Commitment(self.identity())
    }

    /// Exhaustive discrete log, for tiny test groups only.
    pub fn brute_force_dlog(&self, base: &GroupElement, target: &GroupElement) -> Result<Scalar, GroupError> {
        let q = self.order.to_u64().filter(|&q| q <= BRUTE_FORCE_LIMIT).ok_or(GroupError::GroupTooLarge)?;
        let mut acc = self.identity();
        for x in 0..q {
            if &acc == target {
                return Ok(self.scalar(x));
            }
            acc = self.mul(&acc, base);
        }
        Err(GroupError::NotFound)
    }

    // ---- canonical encodings and hashing ----

    pub fn encode_element(&self, e: &GroupElement, out: &mut Vec<u8>) {
        push_fixed(&e.0, self.element_width, out);
    }

    pub fn encode_scalar(&self, s: &Scalar, out: &mut Vec<u8>) {
        push_fixed(&s.0, self.scalar_width, out);
    }

    pub fn decode_element(&self, bytes: &[u8]) -> Result<GroupElement, GroupError> {
        if bytes.len() != self.element_width {
            return Err(GroupError::Malformed("element width".into()));
        }
        self.element(BigUint::from_bytes_be(bytes))
    }

    pub fn decode_scalar(&self, bytes: &[u8]) -> Result<Scalar, GroupError> {
        if bytes.len() != self.scalar_width {
            return Err(GroupError::Malformed("scalar width".into()));
        }
        let v = BigUint::from_bytes_be(bytes);
        if v >= self.order {
            return Err(GroupError::Malformed("scalar out of range".into()));
        }
        Ok(Scalar(v))
    }

    /// SHA-256 of `(domain_tag, label, data)`, length-prefixed.
    pub fn digest(&self, label: &[u8], data: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        for part in [self.domain_tag.as_slice(), label, data] {
            h.update((part.len() as u64).to_be_bytes());
            h.update(part);
        }
        h.finalize().into()
    }

    /// Hashes into `Z_q` with 128 bits of slack so the reduction bias is negligible.
    pub fn hash_to_scalar(&self, label: &[u8], data: &[u8]) -> Scalar {
        let wide = expand(&self.domain_tag, label, data, self.scalar_width + 16);
        Scalar(BigUint::from_bytes_be(&wide) % &self.order)
    }
}

fn byte_width(v: &BigUint) -> usize {
    (v.bits() as usize).div_ceil(8)
}

fn push_fixed(v: &BigUint, width: usize, out: &mut Vec<u8>) {
    let bytes = v.to_bytes_be();
    debug_assert!(bytes.len() <= width);
    out.extend(std::iter::repeat_n(0u8, width.saturating_sub(bytes.len())));
    out.extend_from_slice(&bytes);
}

/// Counter-mode SHA-256 expansion to `len` bytes.
fn expand(tag: &[u8], label: &[u8], data: &[u8], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + 32);
    let mut counter = 0u32;
    while out.len() < len {
        let mut h = Sha256::new();
        for part in [tag, label, data] {
            h.update((part.len() as u64).to_be_bytes());
            h.update(part);
        }
        h.update(counter.to_be_bytes());
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    out.truncate(len);
    out
}

/// Hash-to-subgroup: hash, reduce mod p, raise to the cofactor, reject the
/// identity and anything already taken, retry with the next counter.
fn derive_generators(p: &BigUint, q: &BigUint, tag: &[u8], count: usize, taken: &[BigUint]) -> Vec<BigUint> {
    let cofactor = (p - 1u32) / q;
    let width = byte_width(p) + 16;
    let mut out: Vec<BigUint> = Vec::with_capacity(count);
    let mut counter = 0u64;
    while out.len() < count {
        let mut data = (out.len() as u64).to_be_bytes().to_vec();
        data.extend_from_slice(&counter.to_be_bytes());
        let x = BigUint::from_bytes_be(&expand(tag, b"generator", &data, width)) % p;
        let candidate = pow_mod(&x, &cofactor, p);
        counter += 1;
        if candidate.is_zero() || candidate.is_one() || taken.contains(&candidate) || out.contains(&candidate) {
            continue;
        }
        out.push(candidate);
    }
    out
}

/// Powers `base^(d · 2^(w·i))` for every window `i` and digit `d`, so an
/// exponentiation costs one multiplication per window.
#[derive(Clone)]
enum FixedBase {
    Native { table: Vec<[u64; 256]> },
    Big { table: Vec<Vec<BigUint>> },
}

impl FixedBase {
    const NATIVE_WINDOW: u64 = 8;
    const BIG_WINDOW: u64 = 4;

    fn new(base: &BigUint, m: &BigUint, exp_bits: u64) -> Self {
        if let Some(m64) = m.to_u64() {
            let m128 = m64 as u128;
            let windows = exp_bits.div_ceil(Self::NATIVE_WINDOW) as usize;
            let mut b = (base % m).to_u64().expect("reduced") as u128;
            let mut table = Vec::with_capacity(windows);
            for _ in 0..windows {
                let mut row = [1u64; 256];
                for d in 1..256 {
                    row[d] = (row[d - 1] as u128 * b % m128) as u64;
                }
                b = row[255] as u128 * b % m128;
                table.push(row);
            }
            FixedBase::Native { table }
        } else {
            let windows = exp_bits.div_ceil(Self::BIG_WINDOW) as usize;
            let size = 1usize << Self::BIG_WINDOW;
            let mut b = base % m;
            let mut table = Vec::with_capacity(windows);
            for _ in 0..windows {
                let mut row = Vec::with_capacity(size);
                row.push(BigUint::one());
                for d in 1..size {
                    row.push(&row[d - 1] * &b % m);
                }
                b = &row[size - 1] * &b % m;
                table.push(row);
            }
            FixedBase::Big { table }
        }
    }

    /// `None` when the exponent is wider than the table.
    fn pow(&self, e: &BigUint, m: &BigUint) -> Option<BigUint> {
        match self {
            FixedBase::Native { table } => {
                if e.bits() > table.len() as u64 * Self::NATIVE_WINDOW {
                    return None;
                }
                let m128 = m.to_u64().expect("native table") as u128;
                let mut acc: u128 = 1;
                for (i, byte) in e.to_bytes_le().into_iter().enumerate() {
                    if byte != 0 {
                        acc = acc * table[i][byte as usize] as u128 % m128;
                    }
                }
                Some(BigUint::from(acc as u64))
            }
            FixedBase::Big { table } => {
                if e.bits() > table.len() as u64 * Self::BIG_WINDOW {
                    return None;
                }
                let mut acc = BigUint::one();
                for (i, byte) in e.to_bytes_le().into_iter().enumerate() {
                    for (half, digit) in [(0, byte & 0x0f), (1, byte >> 4)] {
                        if digit != 0 {
                            acc = acc * &table[2 * i + half][digit as usize] % m;
                        }
                    }
                }
                Some(acc)
            }
        }
    }
}

fn mul_mod(a: &BigUint, b: &BigUint, m: &BigUint) -> BigUint {
    match (a.to_u64(), b.to_u64(), m.to_u64()) {
        (Some(a), Some(b), Some(m)) => BigUint::from(((a as u128 * b as u128) % m as u128) as u64),
        _ => (a * b) % m,
    }
}

/// Modular exponentiation with a native fast path for moduli below 2^64.
pub(crate) fn pow_mod(base: &BigUint, exp: &BigUint, m: &BigUint) -> BigUint {
    if let Some(m64) = m.to_u64() {
        if m64 == 1 {
            return BigUint::zero();
        }
        let m128 = m64 as u128;
        let mut b = (base % m).to_u64().expect("reduced") as u128;
        let mut acc: u128 = 1;
        for digit in exp.to_u64_digits() {
            let mut d = digit;
            for _ in 0..64 {
                if d & 1 == 1 {
                    acc = acc * b % m128;
                }
                b = b * b % m128;
                d >>= 1;
            }
        }
        return BigUint::from(acc as u64);
    }
    base.modpow(exp, m)
}

fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    if let Some(m64) = m.to_u64() {
        let (mut r0, mut r1) = (m64 as i128, (a % m).to_u64().expect("reduced") as i128);
        let (mut t0, mut t1) = (0i128, 1i128);
        while r1 != 0 {
            let q = r0 / r1;
            (r0, r1) = (r1, r0 - q * r1);
            (t0, t1) = (t1, t0 - q * t1);
        }
        return (r0 == 1).then(|| BigUint::from(t0.rem_euclid(m64 as i128) as u64));
    }
    let a = BigInt::from_biguint(Sign::Plus, a % m);
    let m_int = BigInt::from_biguint(Sign::Plus, m.clone());
    let egcd = a.extended_gcd(&m_int);
    if !egcd.gcd.is_one() {
        return None;
    }
    egcd.x.mod_floor(&m_int).to_biguint()
}

/// Miller-Rabin with the first twelve prime bases plus 20 derived ones.
/// Deterministic below 3.3 * 10^24, error below 4^-32 otherwise.
pub(crate) fn is_probable_prime(n: &BigUint) -> bool {
    const SMALL: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for p in SMALL {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let witness = |a: &BigUint| -> bool {
        let mut x = pow_mod(a, &d, n);
        if x.is_one() || x == n_minus_1 {
            return true;
        }
        for _ in 1..s {
            x = mul_mod(&x, &x, n);
            if x == n_minus_1 {
                return true;
            }
        }
        false
    };
    let extra_needed = n.bits() > 80;
    let extra = (0..if extra_needed { 20u64 } else { 0 }).map(|i| {
        let wide = expand(b"dcmesh/primality", &n.to_bytes_be(), &i.to_be_bytes(), byte_width(n) + 8);
        BigUint::from_bytes_be(&wide) % (n - 3u32) + 2u32
    });
    SMALL.iter().map(|&a| BigUint::from(a)).chain(extra).all(|a| witness(&a))
}
