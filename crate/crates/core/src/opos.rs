//! Offline point of sale.
//!
//! The terminal never talks to a ledger. It signs quotes `(η, δ)` with its own
//! key, hands them to the client as a QR payload, and later accepts a payment
//! token (M signatures over the same tuple) checked against the signer keys it
//! was provisioned with.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::crypto::{self, Address, KeyPair, Signature, TransactionId};
use crate::Amount;

pub const DELIMITER: char = '|';
pub const MAX_DESCRIPTION_BYTES: usize = 64;
pub const MAX_QUOTE_BYTES: usize = 222;
/// `"0x"` plus 130 hex digits.
pub const SIGNATURE_FIELD_LEN: usize = 2 + 2 * Signature::LEN;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OposError {
    #[error("no catalog item {0}")]
    ItemNotFound(usize),
    #[error("a transaction is already pending")]
    TransactionPending,
    #[error("no pending transaction")]
    NoPendingTransaction,
    #[error("token does not match the pending transaction")]
    TokenMismatch,
    #[error("token carries {valid} valid signatures, {required} required")]
    InsufficientSignatures { valid: usize, required: usize },
    #[error("token references signer index {0} outside the key list")]
    UnknownSignerSignature(u32),
    #[error("quote payload would be {0} bytes")]
    DescriptionTooLong(usize),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
}

fn malformed(msg: impl Into<String>) -> OposError {
    OposError::MalformedPayload(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub description: String,
    #[serde(with = "crate::amount_serde")]
    pub price: Amount,
}

impl CatalogItem {
    pub fn new(description: impl Into<String>, price: Amount) -> Self {
        CatalogItem { description: description.into(), price }
    }
}

/// Checks a description for use inside a quote payload: non-empty, at most
/// 64 bytes of printable ASCII, no delimiter.
pub fn check_description(d: &str) -> Result<(), OposError> {
    if d.is_empty() {
        return Err(OposError::InvalidCatalog("empty description".into()));
    }
    if d.len() > MAX_DESCRIPTION_BYTES {
        return Err(OposError::InvalidCatalog(format!("description {d:?} longer than {MAX_DESCRIPTION_BYTES} bytes")));
    }
    if !d.bytes().all(|b| (0x20..0x7f).contains(&b) && b != DELIMITER as u8) {
        return Err(OposError::InvalidCatalog(format!("description {d:?} must be printable ASCII without '|'")));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(rename = "item", default)]
    pub items: Vec<CatalogItem>,
}

impl Catalog {
    pub fn new(items: Vec<CatalogItem>, granularity: Amount) -> Result<Self, OposError> {
        let c = Catalog { items };
        c.validate(granularity)?;
        Ok(c)
    }

    pub fn validate(&self, granularity: Amount) -> Result<(), OposError> {
        for item in &self.items {
            check_description(&item.description)?;
            if item.price == 0 || granularity == 0 || item.price % granularity != 0 {
                return Err(OposError::InvalidCatalog(format!(
                    "price {} of {:?} must be a positive multiple of {granularity}",
                    item.price, item.description
                )));
            }
        }
        Ok(())
    }

    /// Parses a catalog file (`[[item]]` tables with `description`, `price`).
    pub fn from_toml(text: &str, granularity: Amount) -> Result<Self, OposError> {
        let c: Catalog = toml::from_str(text).map_err(|e| OposError::InvalidCatalog(e.to_string()))?;
        c.validate(granularity)?;
        Ok(c)
    }

    pub fn load(path: &Path, granularity: Amount) -> Result<Self, OposError> {
        let text = std::fs::read_to_string(path).map_err(|e| OposError::InvalidCatalog(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, granularity)
    }

    pub fn get(&self, index: usize) -> Option<&CatalogItem> {
        self.items.get(index)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub eta: TransactionId,
    pub amount: Amount,
    pub description: String,
    pub signature: Signature,
}

impl Quote {
    pub fn signed_tuple(&self) -> [u8; 48] {
        crypto::serialize_signed_tuple(&self.eta, self.amount)
    }

    /// Address of the terminal that signed this quote, if the signature is
    /// well-formed.
    pub fn signer(&self) -> Option<Address> {
        crypto::recover_address(&self.signed_tuple(), &self.signature)
    }
}

/// `hex(η) | δ | D | 0x sig`, plain ASCII.
pub fn encode_quote_qr(q: &Quote) -> Result<Vec<u8>, OposError> {
    check_description(&q.description)?;
    let payload = format!(
        "{}{DELIMITER}{}{DELIMITER}{}{DELIMITER}{}",
        hex::encode(q.eta.0),
        q.amount,
        q.description,
        q.signature.to_hex()
    );
    if payload.len() > MAX_QUOTE_BYTES {
        return Err(OposError::DescriptionTooLong(payload.len()));
    }
    Ok(payload.into_bytes())
}

fn lower_hex(s: &str, len: usize, what: &str) -> Result<Vec<u8>, OposError> {
    if s.len() != len || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return Err(malformed(format!("{what} must be {len} lowercase hex digits")));
    }
    hex::decode(s).map_err(|e| malformed(e.to_string()))
}

fn decode_signature_field(s: &str) -> Result<Signature, OposError> {
    let body = s.strip_prefix("0x").ok_or_else(|| malformed("signature lacks 0x prefix"))?;
    let raw = lower_hex(body, 2 * Signature::LEN, "signature")?;
    Ok(Signature(raw.try_into().expect("length checked")))
}

fn decode_decimal(s: &str) -> Result<Amount, OposError> {
    let canonical = !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
    if !canonical {
        return Err(malformed(format!("amount {s:?} is not a canonical decimal")));
    }
    s.parse().map_err(|_| malformed(format!("amount {s:?} out of range")))
}

pub fn decode_quote_qr(payload: &[u8]) -> Result<Quote, OposError> {
    let text = std::str::from_utf8(payload).map_err(|_| malformed("not UTF-8"))?;
    let fields: Vec<&str> = text.split(DELIMITER).collect();
    let [eta, amount, description, sig] = fields.as_slice() else {
        return Err(malformed(format!("expected 4 fields, found {}", fields.len())));
    };
    let eta = TransactionId(lower_hex(eta, 32, "transaction id")?.try_into().expect("length checked"));
    check_description(description).map_err(|e| malformed(e.to_string()))?;
    Ok(Quote {
        eta,
        amount: decode_decimal(amount)?,
        description: description.to_string(),
        signature: decode_signature_field(sig)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSignature {
    pub signer: u32,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentToken {
    pub eta: TransactionId,
    pub amount: Amount,
    pub signatures: Vec<TokenSignature>,
}

/// Signatures only, `0x`-prefixed and `|`-separated; signer indices and the
/// tuple itself are implied by the pending transaction.
pub fn encode_token_qr(t: &PaymentToken) -> Vec<u8> {
    t.signatures
        .iter()
        .map(|s| s.signature.to_hex())
        .collect::<Vec<_>>()
        .join(&DELIMITER.to_string())
        .into_bytes()
}

pub fn decode_token_signatures(payload: &[u8]) -> Result<Vec<Signature>, OposError> {
    let text = std::str::from_utf8(payload).map_err(|_| malformed("not UTF-8"))?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(DELIMITER).map(decode_signature_field).collect()
}

pub fn token_qr_len(m: usize) -> usize {
    if m == 0 {
        0
    } else {
        m * SIGNATURE_FIELD_LEN + (m - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vend {
    pub eta: TransactionId,
    pub amount: Amount,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Pending {
    eta: TransactionId,
    amount: Amount,
    item: usize,
}

#[derive(Debug, Clone)]
pub struct Opos {
    key: KeyPair,
    /// Indexed like the private contract's signer list. Removed keys stay as
    /// `None` so the remaining indices keep their meaning.
    signers: Vec<Option<Address>>,
    threshold: usize,
    catalog: Catalog,
    pending: Option<Pending>,
    used: HashSet<TransactionId>,
    vends: Vec<Vend>,
}

impl Opos {
    pub fn new(key: KeyPair, signers: Vec<Address>, threshold: usize, catalog: Catalog) -> Self {
        Opos {
            key,
            signers: signers.into_iter().map(Some).collect(),
            threshold,
            catalog,
            pending: None,
            used: HashSet::new(),
            vends: Vec::new(),
        }
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    pub fn key(&self) -> &KeyPair {
        &self.key
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn vends(&self) -> &[Vend] {
        &self.vends
    }

    pub fn is_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn pending(&self) -> Option<(TransactionId, Amount)> {
        self.pending.map(|p| (p.eta, p.amount))
    }

    pub fn remove_signer(&mut self, index: usize) {
        if let Some(slot) = self.signers.get_mut(index) {
            *slot = None;
        }
    }

    pub fn begin_purchase<R: RngCore + ?Sized>(&mut self, item: usize, rng: &mut R) -> Result<Quote, OposError> {
        if self.pending.is_some() {
            return Err(OposError::TransactionPending);
        }
        let entry = self.catalog.get(item).ok_or(OposError::ItemNotFound(item))?.clone();
        let eta = loop {
            let eta = TransactionId::random(rng);
            if !self.used.contains(&eta) {
                break eta;
            }
        };
        let signature = crypto::sign(&self.key, &crypto::serialize_signed_tuple(&eta, entry.price));
        self.pending = Some(Pending { eta, amount: entry.price, item });
        Ok(Quote { eta, amount: entry.price, description: entry.description, signature })
    }

    pub fn cancel(&mut self) {
        self.pending = None;
    }

    fn signer_index(&self, addr: &Address) -> Option<u32> {
        self.signers.iter().position(|k| k.as_ref() == Some(addr)).map(|i| i as u32)
    }

    /// Attaches signer indices to a scanned token payload. Signatures that do
    /// not belong to a known signer are dropped; they could not count anyway.
    pub fn read_token_qr(&self, payload: &[u8]) -> Result<PaymentToken, OposError> {
        let p = self.pending.ok_or(OposError::NoPendingTransaction)?;
        let tuple = crypto::serialize_signed_tuple(&p.eta, p.amount);
        let signatures = decode_token_signatures(payload)?
            .into_iter()
            .filter_map(|signature| {
                let signer = self.signer_index(&crypto::recover_address(&tuple, &signature)?)?;
                Some(TokenSignature { signer, signature })
            })
            .collect();
        Ok(PaymentToken { eta: p.eta, amount: p.amount, signatures })
    }

    /// Counts distinct signers whose signature verifies over `(η, δ)`.
    pub fn count_valid(&self, t: &PaymentToken) -> Result<usize, OposError> {
        let tuple = crypto::serialize_signed_tuple(&t.eta, t.amount);
        let mut seen = HashSet::new();
        for s in &t.signatures {
            let slot = self.signers.get(s.signer as usize).ok_or(OposError::UnknownSignerSignature(s.signer))?;
            if let Some(key) = slot {
                if !seen.contains(&s.signer) && crypto::verify_address(key, &tuple, &s.signature) {
                    seen.insert(s.signer);
                }
            }
        }
        Ok(seen.len())
    }

    /// Accepts the token for the pending transaction and vends.
    pub fn verify_token(&mut self, t: &PaymentToken) -> Result<Vend, OposError> {
        let p = self.pending.ok_or(OposError::NoPendingTransaction)?;
        if t.eta != p.eta || t.amount != p.amount {
            return Err(OposError::TokenMismatch);
        }
        let valid = self.count_valid(t)?;
        if valid < self.threshold {
            return Err(OposError::InsufficientSignatures { valid, required: self.threshold });
        }
        let vend = Vend { eta: p.eta, amount: p.amount, description: self.catalog.items[p.item].description.clone() };
        self.used.insert(p.eta);
        self.pending = None;
        self.vends.push(vend.clone());
        Ok(vend)
    }
}

impl fmt::Display for Vend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} for {} ({})", self.description, self.amount, self.eta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const G: Amount = 10_000_000_000_000;

    fn signers(n: u8) -> Vec<KeyPair> {
        (0..n).map(|i| KeyPair::from_seed(&[b'n', i])).collect()
    }

    fn terminal(keys: &[KeyPair], m: usize) -> Opos {
        let catalog = Catalog::new(vec![CatalogItem::new("Soda", 3 * G), CatalogItem::new("Chips", 5 * G)], G).unwrap();
        Opos::new(KeyPair::from_seed(b"terminal"), keys.iter().map(KeyPair::address).collect(), m, catalog)
    }

    fn token_from(keys: &[(u32, &KeyPair)], eta: TransactionId, amount: Amount) -> PaymentToken {
        let tuple = crypto::serialize_signed_tuple(&eta, amount);
        PaymentToken {
            eta,
            amount,
            signatures: keys.iter().map(|(i, k)| TokenSignature { signer: *i, signature: crypto::sign(k, &tuple) }).collect(),
        }
    }

    #[test]
    fn catalog_validation() {
        assert!(Catalog::new(vec![CatalogItem::new("", G)], G).is_err());
        assert!(Catalog::new(vec![CatalogItem::new("A", 0)], G).is_err());
        assert!(Catalog::new(vec![CatalogItem::new("A", G + 1)], G).is_err());
        assert!(Catalog::new(vec![CatalogItem::new("a|b", G)], G).is_err());
        assert!(Catalog::new(vec![CatalogItem::new("x".repeat(65), G)], G).is_err());
        assert!(Catalog::new(vec![CatalogItem::new("Caf\u{e9}", G)], G).is_err());
        assert!(Catalog::new(vec![CatalogItem::new("x".repeat(64), G)], G).is_ok());
        let c = Catalog::from_toml("[[item]]\ndescription = \"Soda\"\nprice = \"30000000000000\"\n[[item]]\ndescription = \"Tea\"\nprice = 20000000000000\n", G).unwrap();
        assert_eq!(c.items, vec![CatalogItem::new("Soda", 3 * G), CatalogItem::new("Tea", 2 * G)]);
    }

    #[test]
    fn quote_is_signed_and_pending_is_exclusive() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut t = terminal(&signers(3), 2);
        let q = t.begin_purchase(0, &mut rng).unwrap();
        assert_eq!((q.amount, q.description.as_str()), (3 * G, "Soda"));
        assert_eq!(q.signer(), Some(t.address()));
        assert_eq!(t.begin_purchase(1, &mut rng), Err(OposError::TransactionPending));
        t.cancel();
        assert_eq!(t.begin_purchase(7, &mut rng), Err(OposError::ItemNotFound(7)));
        let q2 = t.begin_purchase(1, &mut rng).unwrap();
        assert_ne!(q.eta, q2.eta);
    }

    #[test]
    fn quote_layout_is_exact() {
        let q = Quote {
            eta: TransactionId([0xab; 16]),
            amount: G,
            description: "A".into(),
            signature: Signature([0x11; 65]),
        };
        let bytes = encode_quote_qr(&q).unwrap();
        // 32 + 1 + 14 + 1 + 1 + 1 + 132
        assert_eq!(bytes.len(), 182);
        let thirteen_digits = Quote { amount: G / 10, ..q.clone() };
        assert_eq!(encode_quote_qr(&thirteen_digits).unwrap().len(), 181);
        let expected = format!("{}|10000000000000|A|0x{}", "ab".repeat(16), "11".repeat(65));
        assert_eq!(String::from_utf8(bytes.clone()).unwrap(), expected);
        assert_eq!(decode_quote_qr(&bytes).unwrap(), q);

        let long = Quote { description: "x".repeat(64), amount: Amount::MAX, ..q.clone() };
        assert!(matches!(encode_quote_qr(&long), Err(OposError::DescriptionTooLong(n)) if n > 222));
    }

    #[test]
    fn quote_decode_rejects_malformed() {
        let q = Quote { eta: TransactionId([1; 16]), amount: 42, description: "Tea".into(), signature: Signature([2; 65]) };
        let good = String::from_utf8(encode_quote_qr(&q).unwrap()).unwrap();
        let cases = [
            good.replacen("|", "", 1),
            format!("{good}|extra"),
            good.replacen("|42|", "|042|", 1),
            good.replacen("|42|", "|+42|", 1),
            good.replace("0x", "0X"),
            good.to_uppercase(),
            good[1..].to_string(),
            good.replacen("|Tea|", "||", 1),
        ];
        for c in cases {
            assert!(matches!(decode_quote_qr(c.as_bytes()), Err(OposError::MalformedPayload(_))), "{c}");
        }
        assert!(decode_quote_qr(&[0xff, 0xfe]).is_err());
    }

    #[test]
    fn token_payload_sizes() {
        let keys = signers(5);
        let refs: Vec<(u32, &KeyPair)> = keys.iter().enumerate().map(|(i, k)| (i as u32, k)).collect();
        let t5 = token_from(&refs, TransactionId([9; 16]), G);
        assert_eq!(encode_token_qr(&t5).len(), 664);
        assert_eq!(token_qr_len(5), 664);
        let t1 = token_from(&refs[..1], TransactionId([9; 16]), G);
        assert_eq!(encode_token_qr(&t1).len(), 132);
        assert_eq!(token_qr_len(0), 0);
    }

    #[test]
    fn honest_flow_vends_once() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let keys = signers(10);
        let mut t = terminal(&keys, 5);
        let q = t.begin_purchase(0, &mut rng).unwrap();
        let refs: Vec<(u32, &KeyPair)> = keys.iter().enumerate().skip(3).take(5).map(|(i, k)| (i as u32, k)).collect();
        let token = token_from(&refs, q.eta, q.amount);
        let scanned = t.read_token_qr(&encode_token_qr(&token)).unwrap();
        assert_eq!(scanned, token);
        let vend = t.verify_token(&scanned).unwrap();
        assert_eq!(vend.description, "Soda");
        assert!(!t.is_pending());
        assert_eq!(t.verify_token(&scanned), Err(OposError::NoPendingTransaction));

        // Replaying the same token against a new quote fails on η.
        t.begin_purchase(0, &mut rng).unwrap();
        assert_eq!(t.verify_token(&scanned), Err(OposError::TokenMismatch));
        assert_eq!(t.vends().len(), 1);
    }

    #[test]
    fn rejects_outsiders_duplicates_and_removed_signers() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let keys = signers(10);
        let mut t = terminal(&keys, 5);
        let q = t.begin_purchase(0, &mut rng).unwrap();
        let outsider = KeyPair::from_seed(b"outsider");
        let mut token = token_from(&[(0, &keys[0]), (1, &keys[1]), (2, &keys[2]), (3, &keys[3])], q.eta, q.amount);
        let tuple = crypto::serialize_signed_tuple(&q.eta, q.amount);
        token.signatures.push(TokenSignature { signer: 4, signature: crypto::sign(&outsider, &tuple) });
        assert_eq!(t.verify_token(&token), Err(OposError::InsufficientSignatures { valid: 4, required: 5 }));
        // Via the QR path the outsider is dropped entirely.
        assert_eq!(t.read_token_qr(&encode_token_qr(&token)).unwrap().signatures.len(), 4);

        token.signatures[4] = token.signatures[3].clone();
        assert_eq!(t.verify_token(&token), Err(OposError::InsufficientSignatures { valid: 4, required: 5 }));

        token.signatures[4] = TokenSignature { signer: 10, signature: crypto::sign(&keys[4], &tuple) };
        assert_eq!(t.verify_token(&token), Err(OposError::UnknownSignerSignature(10)));

        token.signatures[4] = TokenSignature { signer: 4, signature: crypto::sign(&keys[4], &tuple) };
        t.remove_signer(4);
        assert_eq!(t.verify_token(&token), Err(OposError::InsufficientSignatures { valid: 4, required: 5 }));

        let wrong = PaymentToken { amount: q.amount + G, ..token.clone() };
        assert_eq!(t.verify_token(&wrong), Err(OposError::TokenMismatch));
    }

    #[test]
    fn acceptance_is_exactly_m_of_n() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let keys = signers(10);
        let mut t = terminal(&keys, 5);
        let q = t.begin_purchase(0, &mut rng).unwrap();
        for mask in 0u32..1 << 10 {
            let subset: Vec<(u32, &KeyPair)> = (0..10).filter(|i| mask >> i & 1 == 1).map(|i| (i, &keys[i as usize])).collect();
            let token = token_from(&subset, q.eta, q.amount);
            assert_eq!(t.count_valid(&token).unwrap() >= 5, subset.len() >= 5);
        }
    }

    proptest! {
        #[test]
        fn quote_round_trip(eta in any::<[u8; 16]>(), amount in 1u128..u128::MAX, d in "[ -{}~]{1,30}", sig in proptest::collection::vec(any::<u8>(), 65)) {
            let q = Quote { eta: TransactionId(eta), amount, description: d, signature: Signature(sig.try_into().unwrap()) };
            match encode_quote_qr(&q) {
                Ok(bytes) => prop_assert_eq!(decode_quote_qr(&bytes).unwrap(), q),
                Err(OposError::DescriptionTooLong(n)) => prop_assert!(n > MAX_QUOTE_BYTES),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn quote_length_band(digits in 7usize..=20, dlen in 1usize..=30) {
            let amount: Amount = 10u128.pow(digits as u32 - 1);
            let q = Quote { eta: TransactionId([0; 16]), amount, description: "d".repeat(dlen), signature: Signature([0; 65]) };
            let n = encode_quote_qr(&q).unwrap().len();
            prop_assert!((175..=222).contains(&n), "{n}");
        }
    }
}
