//! Polynomial multi-hash-chain payment codec.
//!
//! A cumulative payment `φ` is written in base `Θ` (after dividing out the
//! granularity `g`); digit `i` is paid by revealing a preimage of depth
//! `R_i` on chain `i`. Chain `i` has head `H^Θ(seed_i)` and the value at
//! depth `d` is `H^(Θ-d)(seed_i)`, so hashing it `d` times lands on the head.
//! Depth 0 reveals nothing; the seed itself is never disclosed.

use serde::{Deserialize, Serialize};

use crate::crypto::{Digest, HashAlgorithm};
use crate::Amount;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("radix must be at least 2 (got {0})")]
    BadRadix(u32),
    #[error("at least one chain is required")]
    NoChains,
    #[error("granularity must be at least 1")]
    ZeroGranularity,
    #[error("amount {amount} is not a multiple of the granularity {granularity}")]
    NotMultipleOfGranularity { amount: Amount, granularity: Amount },
    #[error("amount {amount} exceeds the channel maximum {max}")]
    AmountOutOfRange { amount: Amount, max: Amount },
    #[error("depth vector has {actual} entries, expected {expected}")]
    WrongLength { expected: usize, actual: usize },
    #[error("depth {depth} on chain {chain} is outside [0, {max}]")]
    DepthOutOfRange { chain: usize, depth: u32, max: u32 },
}

/// Radix, chain count, granularity and hash function of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub theta: u32,
    pub xi: u32,
    #[serde(with = "crate::amount_serde")]
    pub granularity: Amount,
    #[serde(default)]
    pub hash: HashAlgorithm,
}

impl ChannelParams {
    pub fn new(theta: u32, xi: u32, granularity: Amount) -> Result<Self, CodecError> {
        let p = ChannelParams { theta, xi, granularity, hash: HashAlgorithm::default() };
        p.validate()?;
        Ok(p)
    }

    /// `Θ = 10`, `ξ = 7`, `g = 10^13` wei: 7 ten-hash chains covering
    /// 0.00001 to 99.99999 ether.
    pub fn ether_default() -> Self {
        ChannelParams { theta: 10, xi: 7, granularity: 10u128.pow(13), hash: HashAlgorithm::Keccak256 }
    }

    pub fn with_hash(mut self, hash: HashAlgorithm) -> Self {
        self.hash = hash;
        self
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.theta < 2 {
            return Err(CodecError::BadRadix(self.theta));
        }
        if self.xi < 1 {
            return Err(CodecError::NoChains);
        }
        if self.granularity < 1 {
            return Err(CodecError::ZeroGranularity);
        }
        Ok(())
    }

    pub fn chains(&self) -> usize {
        self.xi as usize
    }

    /// `Θ^ξ − 1`, or `None` when that does not fit in an [`Amount`] (every
    /// amount is then representable).
    pub fn max_units(&self) -> Option<Amount> {
        Amount::from(self.theta).checked_pow(self.xi).map(|p| p - 1)
    }

    /// Largest representable cumulative payment, `g·(Θ^ξ − 1)`, saturating.
    pub fn max_amount(&self) -> Amount {
        match self.max_units() {
            Some(units) => units.saturating_mul(self.granularity),
            None => Amount::MAX,
        }
    }

    pub fn check_amount(&self, amount: Amount) -> Result<Amount, CodecError> {
        if !amount.is_multiple_of(self.granularity) {
            return Err(CodecError::NotMultipleOfGranularity { amount, granularity: self.granularity });
        }
        let units = amount / self.granularity;
        if let Some(max) = self.max_units() {
            if units > max {
                return Err(CodecError::AmountOutOfRange { amount, max: self.max_amount() });
            }
        }
        Ok(units)
    }
}

/// Per-chain revealed depths `(R_1..R_ξ)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DepthVector(pub Vec<u32>);

impl DepthVector {
    pub fn zeros(chains: usize) -> Self {
        DepthVector(vec![0; chains])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, params: &ChannelParams) -> Result<(), CodecError> {
        if self.0.len() != params.chains() {
            return Err(CodecError::WrongLength { expected: params.chains(), actual: self.0.len() });
        }
        let max = params.theta - 1;
        if let Some((chain, &depth)) = self.0.iter().enumerate().find(|(_, d)| **d > max) {
            return Err(CodecError::DepthOutOfRange { chain, depth, max });
        }
        Ok(())
    }

    /// Elementwise maximum.
    pub fn max_with(&self, other: &DepthVector) -> DepthVector {
        DepthVector(self.0.iter().zip(&other.0).map(|(a, b)| *a.max(b)).collect())
    }
}

impl From<Vec<u32>> for DepthVector {
    fn from(v: Vec<u32>) -> Self {
        DepthVector(v)
    }
}

/// Public endpoints of the `ξ` chains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChainHeads(pub Vec<Digest>);

impl ChainHeads {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Secret seed of one chain.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashChainSecret {
    pub seed: Digest,
    pub theta: u32,
    pub hash: HashAlgorithm,
}

impl std::fmt::Debug for HashChainSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HashChainSecret").field("theta", &self.theta).finish_non_exhaustive()
    }
}

impl HashChainSecret {
    pub fn head(&self) -> Digest {
        self.hash.iterate(&self.seed, self.theta)
    }

    /// Preimage revealed for digit `depth`; `None` for depth 0 or `>= Θ`.
    pub fn value_at(&self, depth: u32) -> Option<Digest> {
        if depth == 0 || depth >= self.theta {
            return None;
        }
        Some(self.hash.iterate(&self.seed, self.theta - depth))
    }
}

/// Chain values disclosed alongside a depth vector. `values[i]` is the
/// preimage at `depths[i]` when chain `i` advanced past what the verifier
/// already knows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashRelease {
    pub depths: DepthVector,
    pub values: Vec<Option<Digest>>,
}

impl HashRelease {
    pub fn empty(depths: DepthVector) -> Self {
        let n = depths.len();
        HashRelease { depths, values: vec![None; n] }
    }

    /// Chains carrying new secret material.
    pub fn revealed_chains(&self) -> Vec<usize> {
        self.values.iter().enumerate().filter(|(_, v)| v.is_some()).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revealed {
    pub depth: u32,
    pub value: Digest,
}

/// Deepest verified preimage per chain, as held by a verifier.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RevealedStore(pub Vec<Option<Revealed>>);

impl RevealedStore {
    pub fn new(chains: usize) -> Self {
        RevealedStore(vec![None; chains])
    }

    pub fn maxima(&self) -> DepthVector {
        DepthVector(self.0.iter().map(|e| e.map_or(0, |r| r.depth)).collect())
    }

    /// Re-derives a full release for `depths` from stored deeper values.
    /// Fails if some chain has not been revealed deep enough.
    pub fn release_at(&self, hash: HashAlgorithm, depths: &DepthVector) -> Option<HashRelease> {
        if depths.len() != self.0.len() {
            return None;
        }
        let mut values = Vec::with_capacity(depths.len());
        for (entry, &d) in self.0.iter().zip(&depths.0) {
            if d == 0 {
                values.push(None);
                continue;
            }
            let r = (*entry)?;
            if r.depth < d {
                return None;
            }
            values.push(Some(hash.iterate(&r.value, r.depth - d)));
        }
        Some(HashRelease { depths: depths.clone(), values })
    }
}

/// Derives one seed per chain from `master_seed` and returns the secrets with
/// their heads.
pub fn generate_chains(master_seed: &[u8], params: &ChannelParams) -> (Vec<HashChainSecret>, ChainHeads) {
    let secrets: Vec<HashChainSecret> = (0..params.xi)
        .map(|i| {
            let mut material = master_seed.to_vec();
            material.extend_from_slice(&i.to_be_bytes());
            HashChainSecret { seed: params.hash.digest(&material), theta: params.theta, hash: params.hash }
        })
        .collect();
    let heads = ChainHeads(secrets.iter().map(HashChainSecret::head).collect());
    (secrets, heads)
}

/// Base-`Θ` digits of `φ / g`, least significant first.
pub fn encode_amount(amount: Amount, params: &ChannelParams) -> Result<DepthVector, CodecError> {
    params.validate()?;
    let mut units = params.check_amount(amount)?;
    let radix = Amount::from(params.theta);
    let mut digits = Vec::with_capacity(params.chains());
    for _ in 0..params.xi {
        digits.push((units % radix) as u32);
        units /= radix;
    }
    debug_assert_eq!(units, 0);
    Ok(DepthVector(digits))
}

/// `g · Σ R_i · Θ^(i−1)`. Accepts any digit tuple; fails only on a malformed
/// vector or arithmetic overflow.
pub fn decode_amount(v: &DepthVector, params: &ChannelParams) -> Result<Amount, CodecError> {
    v.validate(params)?;
    let radix = Amount::from(params.theta);
    let overflow = || CodecError::AmountOutOfRange { amount: Amount::MAX, max: params.max_amount() };
    let mut units: Amount = 0;
    for &d in v.0.iter().rev() {
        units = units.checked_mul(radix).and_then(|u| u.checked_add(Amount::from(d))).ok_or_else(overflow)?;
    }
    units.checked_mul(params.granularity).ok_or_else(overflow)
}

/// Release for paying up to `new`, given the depths the verifier already
/// holds. Only chains that move deeper carry a value.
pub fn release_for(new: &DepthVector, revealed_max: &DepthVector, secrets: &[HashChainSecret]) -> HashRelease {
    let values = new
        .0
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let known = revealed_max.0.get(i).copied().unwrap_or(0);
            if d > known {
                secrets.get(i).and_then(|s| s.value_at(d))
            } else {
                None
            }
        })
        .collect();
    HashRelease { depths: new.clone(), values }
}

/// Checks `rel` against `heads`, using `store` for chains the release does
/// not cover. On success the store is raised to the per-chain maximum.
pub fn verify_release(params: &ChannelParams, heads: &ChainHeads, rel: &HashRelease, store: &mut RevealedStore) -> bool {
    let n = params.chains();
    if heads.len() != n || rel.values.len() != n || store.0.len() != n || rel.depths.validate(params).is_err() {
        return false;
    }
    let mut updates = Vec::new();
    for i in 0..n {
        let depth = rel.depths.0[i];
        match (depth, rel.values[i]) {
            (0, None) => {}
            (0, Some(_)) => return false,
            (_, Some(value)) => {
                if params.hash.iterate(&value, depth) != heads.0[i] {
                    return false;
                }
                if store.0[i].is_none_or(|r| r.depth < depth) {
                    updates.push((i, Revealed { depth, value }));
                }
            }
            (_, None) => match store.0[i] {
                Some(r) if r.depth >= depth => {}
                _ => return false,
            },
        }
    }
    for (i, r) in updates {
        store.0[i] = Some(r);
    }
    true
}
