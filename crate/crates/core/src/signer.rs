//! Token signer nodes.
//!
//! A signer never accepts connections. It polls the private ledger for token
//! request events and answers each one with its signature over `(η, δ)`,
//! stored back through the private contract.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::contracts::{PrivateCall, PrivateContract, PrivateEvent, TOKEN_EVENT};
use crate::crypto::{self, Address, KeyPair, Signature, TransactionId};
use crate::ledger::{EventFilter, LedgerSim, Transaction, TxKind};
use crate::netsim::NetLink;
use crate::time::SimTime;
use crate::Amount;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignerBehaviour {
    #[default]
    Honest,
    /// Compromised and silent.
    Abstain,
    /// Compromised; signs a different amount than the one requested.
    WrongTuple,
}

/// A token request seen on the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenRequest {
    pub contract: Address,
    pub eta: TransactionId,
    pub amount: Amount,
}

#[derive(Debug, Clone)]
pub struct SignerNode {
    pub index: u32,
    key: KeyPair,
    cursor: usize,
    pub poll_interval: SimTime,
    pub link: NetLink,
    pub behaviour: SignerBehaviour,
    signed: HashSet<(Address, TransactionId)>,
}

impl SignerNode {
    pub fn new(index: u32, key: KeyPair, link: NetLink) -> Self {
        SignerNode {
            index,
            key,
            cursor: 0,
            poll_interval: SimTime::from_secs(1),
            link,
            behaviour: SignerBehaviour::Honest,
            signed: HashSet::new(),
        }
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn signed_count(&self) -> usize {
        self.signed.len()
    }

    /// Reads new token request events and moves the cursor past them.
    pub fn poll(&mut self, ledger: &LedgerSim<PrivateContract>) -> Vec<TokenRequest> {
        let (entries, next) = ledger.poll_events(self.cursor, &EventFilter::named(TOKEN_EVENT));
        self.cursor = next;
        entries
            .into_iter()
            .filter_map(|e| match e.event {
                PrivateEvent::TokenRequested { eta, amount } => Some(TokenRequest { contract: e.contract, eta, amount }),
                _ => None,
            })
            .collect()
    }

    /// Signs every request not signed before. Only contracts that list this
    /// node as a signer are answered.
    pub fn respond(
        &mut self,
        requests: &[TokenRequest],
        ledger: &mut LedgerSim<PrivateContract>,
    ) -> Vec<Transaction<PrivateContract>> {
        if self.behaviour == SignerBehaviour::Abstain {
            return Vec::new();
        }
        let me = self.address();
        let mut out = Vec::new();
        for r in requests {
            let listed = ledger.call_view(&r.contract, |c| c.signer_keys.contains(&me)).unwrap_or(false);
            if !listed || !self.signed.insert((r.contract, r.eta)) {
                continue;
            }
            let signed_amount = match self.behaviour {
                SignerBehaviour::WrongTuple => r.amount.wrapping_add(1),
                _ => r.amount,
            };
            let signature = crypto::sign(&self.key, &crypto::serialize_signed_tuple(&r.eta, signed_amount));
            let call = PrivateCall::SetSignature { eta: r.eta, amount: r.amount, signature };
            out.push(ledger.tx(&self.key, 0, TxKind::Call { to: r.contract, call }));
        }
        out
    }

    /// Poll and respond with no link delay.
    pub fn step(&mut self, ledger: &mut LedgerSim<PrivateContract>) -> Vec<Transaction<PrivateContract>> {
        let requests = self.poll(ledger);
        self.respond(&requests, ledger)
    }
}

/// Whether `signatures` holds at least `m` distinct listed signers whose
/// signatures verify over `(η, δ)`.
pub fn quorum_reached(
    signatures: &[(u32, Signature)],
    keys: &[Address],
    eta: &TransactionId,
    amount: Amount,
    m: usize,
) -> bool {
    valid_signers(signatures, keys, eta, amount).len() >= m
}

pub fn valid_signers(signatures: &[(u32, Signature)], keys: &[Address], eta: &TransactionId, amount: Amount) -> BTreeSet<u32> {
    let tuple = crypto::serialize_signed_tuple(eta, amount);
    signatures
        .iter()
        .filter(|(i, s)| keys.get(*i as usize).is_some_and(|k| crypto::verify_address(k, &tuple, s)))
        .map(|(i, _)| *i)
        .collect()
}
