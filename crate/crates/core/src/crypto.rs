//! Hash and signature primitives, key identities, and the canonical byte
//! encodings that get signed.

use std::fmt;
use std::str::FromStr;

use k256::ecdsa::{RecoveryId, Signature as EcdsaSignature, SigningKey, VerifyingKey};
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;
use sha3::{Digest as _, Keccak256, Sha3_256};

pub const DIGEST_LEN: usize = 32;
pub const ADDRESS_LEN: usize = 20;
pub const SIGNATURE_LEN: usize = 65;
pub const TRANSACTION_ID_LEN: usize = 16;
/// Width of the big-endian amount field in signed messages.
pub const AMOUNT_FIELD_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HexError {
    #[error("missing 0x prefix")]
    MissingPrefix,
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("invalid hex: {0}")]
    Invalid(#[from] hex::FromHexError),
}

/// Lowercase hex with a `0x` prefix.
pub fn to_hex(bytes: &[u8]) -> String {
    format!("0x{}", hex::encode(bytes))
}

pub fn from_hex(s: &str) -> Result<Vec<u8>, HexError> {
    let body = s.strip_prefix("0x").ok_or(HexError::MissingPrefix)?;
    Ok(hex::decode(body)?)
}

fn from_hex_fixed<const N: usize>(s: &str) -> Result<[u8; N], HexError> {
    let raw = from_hex(s)?;
    let actual = raw.len();
    raw.try_into().map_err(|_| HexError::Length { expected: N, actual })
}

macro_rules! fixed_bytes {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                to_hex(&self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), self.to_hex())
            }
        }

        impl FromStr for $name {
            type Err = HexError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                from_hex_fixed::<$len>(s).map($name)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

fixed_bytes!(
    /// A 32-byte hash value.
    Digest,
    DIGEST_LEN
);
fixed_bytes!(
    /// 20-byte account identity: the low 20 bytes of the keccak hash of the
    /// uncompressed public key.
    Address,
    ADDRESS_LEN
);
fixed_bytes!(
    /// Recoverable ECDSA signature over secp256k1, `r ∥ s ∥ v` with
    /// `v ∈ {27, 28}`.
    Signature,
    SIGNATURE_LEN
);
fixed_bytes!(
    /// Random per-purchase identifier chosen by a terminal.
    TransactionId,
    TRANSACTION_ID_LEN
);

impl Address {
    pub const ZERO: Address = Address([0; ADDRESS_LEN]);
}

impl TransactionId {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; TRANSACTION_ID_LEN];
        rng.fill_bytes(&mut b);
        TransactionId(b)
    }
}

/// Hash function used to build and check payment hash chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashAlgorithm {
    #[default]
    Keccak256,
    Sha3_256,
    Sha256,
}

impl HashAlgorithm {
    pub fn digest(self, data: &[u8]) -> Digest {
        let out: [u8; 32] = match self {
            HashAlgorithm::Keccak256 => Keccak256::digest(data).into(),
            HashAlgorithm::Sha3_256 => Sha3_256::digest(data).into(),
            HashAlgorithm::Sha256 => Sha256::digest(data).into(),
        };
        Digest(out)
    }

    /// Applies the hash `times` times, starting from a digest.
    pub fn iterate(self, start: &Digest, times: u32) -> Digest {
        let mut d = *start;
        for _ in 0..times {
            d = self.digest(&d.0);
        }
        d
    }
}

/// Keccak-256, the default hash.
pub fn hash(data: &[u8]) -> Digest {
    HashAlgorithm::Keccak256.digest(data)
}

/// A secp256k1 key with its derived address.
#[derive(Clone)]
pub struct KeyPair {
    secret: SigningKey,
    public: VerifyingKey,
    address: Address,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("address", &self.address).finish_non_exhaustive()
    }
}

impl PartialEq for KeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.address == other.address
    }
}

impl KeyPair {
    /// Deterministically derives a key from arbitrary seed material.
    pub fn from_seed(seed: &[u8]) -> Self {
        let mut material = hash(seed);
        loop {
            if let Ok(secret) = SigningKey::from_slice(&material.0) {
                return Self::from_signing_key(secret);
            }
            // Zero or above the curve order; astronomically unlikely.
            material = hash(&material.0);
        }
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(&seed)
    }

    pub fn from_secret_bytes(bytes: &[u8; 32]) -> Option<Self> {
        SigningKey::from_slice(bytes).ok().map(Self::from_signing_key)
    }

    fn from_signing_key(secret: SigningKey) -> Self {
        let public = *secret.verifying_key();
        let address = address_of(&public);
        KeyPair { secret, public, address }
    }

    pub fn public(&self) -> &VerifyingKey {
        &self.public
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes().into()
    }
}

pub fn address_of(public: &VerifyingKey) -> Address {
    let point = public.to_encoded_point(false);
    // Skip the 0x04 SEC1 tag.
    let h = hash(&point.as_bytes()[1..]);
    let mut a = [0u8; ADDRESS_LEN];
    a.copy_from_slice(&h.0[DIGEST_LEN - ADDRESS_LEN..]);
    Address(a)
}

pub fn sign(key: &KeyPair, msg: &[u8]) -> Signature {
    let prehash = hash(msg);
    let (sig, recid) = key
        .secret
        .sign_prehash_recoverable(&prehash.0)
        .expect("signing a 32-byte prehash cannot fail");
    let mut out = [0u8; SIGNATURE_LEN];
    out[..64].copy_from_slice(&sig.to_bytes());
    out[64] = 27 + recid.to_byte();
    Signature(out)
}

fn split(sig: &Signature) -> Option<(EcdsaSignature, RecoveryId)> {
    let parsed = EcdsaSignature::from_slice(&sig.0[..64]).ok()?;
    let v = sig.0[64].checked_sub(27)?;
    let recid = RecoveryId::from_byte(v)?;
    Some((parsed, recid))
}

pub fn verify(public: &VerifyingKey, msg: &[u8], sig: &Signature) -> bool {
    recover(msg, sig).is_some_and(|k| &k == public)
}

pub fn recover(msg: &[u8], sig: &Signature) -> Option<VerifyingKey> {
    let (parsed, recid) = split(sig)?;
    let prehash = hash(msg);
    recover_prehash(&prehash.0, &parsed, recid)
}

/// `Q = r⁻¹(sR − zG)`. The library routine verifies the recovered key
/// against the signature again, doubling the cost; a key obtained this way
/// satisfies the verification equation by construction.
fn recover_prehash(prehash: &[u8; 32], sig: &EcdsaSignature, recid: RecoveryId) -> Option<VerifyingKey> {
    use k256::elliptic_curve::ops::{LinearCombination, Reduce};
    use k256::elliptic_curve::point::DecompressPoint;
    use k256::elliptic_curve::subtle::Choice;
    use k256::elliptic_curve::PrimeField;
    use k256::{AffinePoint, FieldBytes, ProjectivePoint, Scalar, U256};

    if recid.is_x_reduced() {
        return VerifyingKey::recover_from_prehash(prehash, sig, recid).ok();
    }
    let (r, s) = sig.split_scalars();
    let z = <Scalar as Reduce<U256>>::reduce_bytes(&FieldBytes::from(*prehash));
    let big_r: AffinePoint = Option::from(AffinePoint::decompress(&r.to_repr(), Choice::from(recid.is_y_odd() as u8)))?;
    let r_inv: Scalar = Option::from(r.as_ref().invert())?;
    let u1 = -(r_inv * z);
    let u2 = r_inv * *s.as_ref();
    let q = ProjectivePoint::lincomb(&ProjectivePoint::GENERATOR, &u1, &ProjectivePoint::from(big_r), &u2);
    VerifyingKey::from_affine(q.to_affine()).ok()
}

pub fn recover_address(msg: &[u8], sig: &Signature) -> Option<Address> {
    recover(msg, sig).map(|k| address_of(&k))
}

pub fn verify_address(addr: &Address, msg: &[u8], sig: &Signature) -> bool {
    recover_address(msg, sig).as_ref() == Some(addr)
}

/// 32-byte big-endian encoding of an amount.
pub fn amount_field(amount: u128) -> [u8; AMOUNT_FIELD_LEN] {
    let mut out = [0u8; AMOUNT_FIELD_LEN];
    out[AMOUNT_FIELD_LEN - 16..].copy_from_slice(&amount.to_be_bytes());
    out
}

/// `η` (16 raw bytes) followed by `δ` as a 32-byte big-endian integer.
pub fn serialize_signed_tuple(eta: &TransactionId, amount: u128) -> [u8; 48] {
    let mut out = [0u8; 48];
    out[..16].copy_from_slice(&eta.0);
    out[16..].copy_from_slice(&amount_field(amount));
    out
}

/// Message authorizing a cumulative payment on one specific channel:
/// public-contract address followed by the 32-byte big-endian amount.
pub fn payoff_message(channel: &Address, cumulative: u128) -> [u8; 52] {
    let mut out = [0u8; 52];
    out[..20].copy_from_slice(&channel.0);
    out[20..].copy_from_slice(&amount_field(cumulative));
    out
}
