//! Schnorr signatures over the protocol group.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::group::{GroupElement, GroupParams, Scalar};

const SIG_LABEL: &[u8] = b"dcmesh/schnorr-signature";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VerifyingKey(pub GroupElement);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub challenge: Scalar,
    pub response: Scalar,
}

#[derive(Clone, Debug)]
pub struct SigningKey {
    secret: Scalar,
    public: VerifyingKey,
}

fn challenge(params: &GroupParams, nonce_point: &GroupElement, key: &VerifyingKey, msg: &[u8]) -> Scalar {
    let mut data = Vec::with_capacity(2 * params.element_width() + msg.len());
    params.encode_element(nonce_point, &mut data);
    params.encode_element(&key.0, &mut data);
    data.extend_from_slice(msg);
    params.hash_to_scalar(SIG_LABEL, &data)
}

impl SigningKey {
    pub fn generate<R: RngCore + ?Sized>(params: &GroupParams, rng: &mut R) -> Self {
        let secret = params.random_scalar(rng);
        let public = VerifyingKey(params.exp(params.g(), &secret));
        SigningKey { secret, public }
    }

    pub fn verifying_key(&self) -> &VerifyingKey {
        &self.public
    }

    pub fn sign<R: RngCore + ?Sized>(&self, params: &GroupParams, msg: &[u8], rng: &mut R) -> Signature {
        let nonce = params.random_scalar(rng);
        let point = params.exp(params.g(), &nonce);
        let e = challenge(params, &point, &self.public, msg);
        let response = params.add(&nonce, &params.mul_scalars(&e, &self.secret));
        Signature { challenge: e, response }
    }
}

/// Recomputes `R = g^s · pk^-e` and checks the challenge.
pub fn verify_signature(params: &GroupParams, key: &VerifyingKey, msg: &[u8], sig: &Signature) -> bool {
    if params.check_scalar(&sig.challenge).is_err()
        || params.check_scalar(&sig.response).is_err()
        || params.check_element(&key.0).is_err()
    {
        return false;
    }
    let gs = params.exp(params.g(), &sig.response);
    let point = params.div(&gs, &params.exp(&key.0, &sig.challenge));
    challenge(params, &point, key, msg) == sig.challenge
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::SecurityLevel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sign_and_verify() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"sig").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let sk = SigningKey::generate(&gp, &mut rng);
        let other = SigningKey::generate(&gp, &mut rng);
        let sig = sk.sign(&gp, b"hello", &mut rng);
        assert!(verify_signature(&gp, sk.verifying_key(), b"hello", &sig));
        assert!(!verify_signature(&gp, sk.verifying_key(), b"hellp", &sig));
        assert!(!verify_signature(&gp, other.verifying_key(), b"hello", &sig));
        let mut bad = sig.clone();
        bad.response = gp.add(&bad.response, &gp.scalar(1));
        assert!(!verify_signature(&gp, sk.verifying_key(), b"hello", &bad));
    }
}
