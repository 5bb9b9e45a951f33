//! The grafted channel contracts.
//!
//! [`PublicContract`] holds the client's real deposit on the public chain and
//! settles it: the merchant is paid against revealed hash-chain preimages plus
//! the client's signature over the cumulative amount, the client recovers the
//! rest. [`PrivateContract`] mirrors the channel on the merchant's private
//! chain, where purchases are processed and token signers are triggered. The
//! public contract stores the private contract's address (the graft).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::{self, Address, Signature, TransactionId};
use crate::hashchain::{self, ChainHeads, ChannelParams, HashRelease, RevealedStore};
use crate::ledger::{Contract, ExecContext};
use crate::time::SimTime;
use crate::Amount;

pub use crate::crypto::TransactionId as Eta;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum PublicError {
    #[error("caller is not the channel client")]
    NotClient,
    #[error("caller is not the merchant")]
    NotMerchant,
    #[error("deposit must carry a positive value")]
    ZeroDeposit,
    #[error("deposit would exceed the maximum channel balance")]
    ExceedsMaxBalance,
    #[error("hash chain heads already set")]
    HeadsAlreadySet,
    #[error("hash chain heads not set")]
    HeadsNotSet,
    #[error("wrong number of chain heads")]
    WrongHeadCount,
    #[error("grafted address already set")]
    AlreadyGrafted,
    #[error("claimed amount does not match the depth vector")]
    AmountMismatch,
    #[error("hash proof does not verify")]
    BadHashProof,
    #[error("client payoff signature does not cover the claimed amount")]
    BadPayoffSignature,
    #[error("claim exceeds the deposit")]
    ExceedsDeposit,
    #[error("claim does not exceed what was already paid out")]
    NothingNew,
    #[error("refund is allowed only after a payoff or the timeout")]
    RefundNotYetAllowed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PublicCall {
    Deposit,
    SetHeads(ChainHeads),
    SetGraftedAddress(Address),
    Payoff { release: HashRelease, amount: Amount, signature: Signature },
    Refund,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PublicEvent {
    Deposited { amount: Amount, total: Amount },
    HeadsSet,
    Grafted { private: Address },
    PaidOut { amount: Amount, cumulative: Amount },
    Refunded { amount: Amount },
}

/// Channel contract on the public chain, one per merchant-client pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicContract {
    /// Client's funds key.
    pub client: Address,
    pub merchant: Address,
    pub params: ChannelParams,
    pub deposit: Amount,
    pub heads: Option<ChainHeads>,
    pub grafted: Option<Address>,
    pub paid_out: Amount,
    pub refunded: Amount,
    pub payoff_made: bool,
    pub refund_timeout: SimTime,
    /// Absolute time after which a refund is allowed; fixed at deployment.
    pub refund_deadline: SimTime,
    pub revealed: RevealedStore,
}

impl PublicContract {
    pub fn new(client: Address, merchant: Address, params: ChannelParams, refund_timeout: SimTime) -> Self {
        PublicContract {
            client,
            merchant,
            params,
            deposit: 0,
            heads: None,
            grafted: None,
            paid_out: 0,
            refunded: 0,
            payoff_made: false,
            refund_timeout,
            refund_deadline: SimTime::ZERO,
            revealed: RevealedStore::new(params.chains()),
        }
    }

    /// Funds still held for the channel.
    pub fn remaining(&self) -> Amount {
        self.deposit - self.paid_out - self.refunded
    }

    fn deposit(&mut self, ctx: &mut ExecContext<PublicEvent>) -> Result<(), PublicError> {
        if ctx.caller != self.client {
            return Err(PublicError::NotClient);
        }
        if ctx.value == 0 {
            return Err(PublicError::ZeroDeposit);
        }
        let total = self.deposit.checked_add(ctx.value).ok_or(PublicError::ExceedsMaxBalance)?;
        if total > self.params.max_amount() {
            return Err(PublicError::ExceedsMaxBalance);
        }
        self.deposit = total;
        ctx.emit(PublicEvent::Deposited { amount: ctx.value, total });
        Ok(())
    }

    fn set_heads(&mut self, ctx: &mut ExecContext<PublicEvent>, heads: &ChainHeads) -> Result<(), PublicError> {
        if ctx.caller != self.merchant {
            return Err(PublicError::NotMerchant);
        }
        if self.heads.is_some() {
            return Err(PublicError::HeadsAlreadySet);
        }
        if heads.len() != self.params.chains() {
            return Err(PublicError::WrongHeadCount);
        }
        self.heads = Some(heads.clone());
        ctx.emit(PublicEvent::HeadsSet);
        Ok(())
    }

    fn set_grafted(&mut self, ctx: &mut ExecContext<PublicEvent>, private: Address) -> Result<(), PublicError> {
        if ctx.caller != self.merchant {
            return Err(PublicError::NotMerchant);
        }
        if self.grafted.is_some() {
            return Err(PublicError::AlreadyGrafted);
        }
        self.grafted = Some(private);
        ctx.emit(PublicEvent::Grafted { private });
        Ok(())
    }

    fn payoff(
        &mut self,
        ctx: &mut ExecContext<PublicEvent>,
        release: &HashRelease,
        amount: Amount,
        signature: &Signature,
    ) -> Result<(), PublicError> {
        if ctx.caller != self.merchant {
            return Err(PublicError::NotMerchant);
        }
        let heads = self.heads.as_ref().ok_or(PublicError::HeadsNotSet)?;
        let encoded = hashchain::decode_amount(&release.depths, &self.params).map_err(|_| PublicError::AmountMismatch)?;
        if encoded != amount {
            return Err(PublicError::AmountMismatch);
        }
        if amount <= self.paid_out {
            return Err(PublicError::NothingNew);
        }
        if !hashchain::verify_release(&self.params, heads, release, &mut self.revealed) {
            return Err(PublicError::BadHashProof);
        }
        let msg = crypto::payoff_message(&ctx.this, amount);
        if !crypto::verify_address(&self.client, &msg, signature) {
            return Err(PublicError::BadPayoffSignature);
        }
        if amount > self.deposit - self.refunded {
            return Err(PublicError::ExceedsDeposit);
        }
        let increment = amount - self.paid_out;
        self.paid_out = amount;
        self.payoff_made = true;
        ctx.transfer(self.merchant, increment);
        ctx.emit(PublicEvent::PaidOut { amount: increment, cumulative: amount });
        Ok(())
    }

    fn refund(&mut self, ctx: &mut ExecContext<PublicEvent>) -> Result<(), PublicError> {
        if ctx.caller != self.client {
            return Err(PublicError::NotClient);
        }
        if !self.payoff_made && ctx.now < self.refund_deadline {
            return Err(PublicError::RefundNotYetAllowed);
        }
        let amount = self.remaining();
        self.refunded += amount;
        ctx.transfer(self.client, amount);
        ctx.emit(PublicEvent::Refunded { amount });
        Ok(())
    }
}

impl Contract for PublicContract {
    type Call = PublicCall;
    type Error = PublicError;
    type Event = PublicEvent;

    fn call_name(call: &PublicCall) -> &'static str {
        match call {
            PublicCall::Deposit => "deposit",
            PublicCall::SetHeads(_) => "set_heads",
            PublicCall::SetGraftedAddress(_) => "set_addresses",
            PublicCall::Payoff { .. } => "payoff",
            PublicCall::Refund => "refund",
        }
    }

    fn event_name(event: &PublicEvent) -> &'static str {
        match event {
            PublicEvent::Deposited { .. } => "Deposited",
            PublicEvent::HeadsSet => "HeadsSet",
            PublicEvent::Grafted { .. } => "Grafted",
            PublicEvent::PaidOut { .. } => "PaidOut",
            PublicEvent::Refunded { .. } => "Refunded",
        }
    }

    fn on_deploy(&mut self, ctx: &mut ExecContext<PublicEvent>) -> Result<(), PublicError> {
        if ctx.caller != self.merchant {
            return Err(PublicError::NotMerchant);
        }
        self.refund_deadline = ctx.now + self.refund_timeout;
        Ok(())
    }

    fn execute(&mut self, ctx: &mut ExecContext<PublicEvent>, call: &PublicCall) -> Result<(), PublicError> {
        match call {
            PublicCall::Deposit => self.deposit(ctx),
            PublicCall::SetHeads(h) => self.set_heads(ctx, h),
            PublicCall::SetGraftedAddress(a) => self.set_grafted(ctx, *a),
            PublicCall::Payoff { release, amount, signature } => self.payoff(ctx, release, *amount, signature),
            PublicCall::Refund => self.refund(ctx),
        }
    }

    fn check_transition(before: Option<&Self>, after: &Self) -> Result<(), String> {
        if after.paid_out + after.refunded > after.deposit {
            return Err(format!(
                "public: paid out {} + refunded {} exceeds deposit {}",
                after.paid_out, after.refunded, after.deposit
            ));
        }
        if let Some(b) = before {
            if after.paid_out < b.paid_out || after.refunded < b.refunded || after.deposit < b.deposit {
                return Err("public: settlement counters decreased".into());
            }
            if b.grafted.is_some() && b.grafted != after.grafted {
                return Err("public: grafted address changed".into());
            }
            if b.heads.is_some() && b.heads != after.heads {
                return Err("public: heads changed".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum PrivateError {
    #[error("caller is not the channel client")]
    NotClient,
    #[error("caller is not the merchant")]
    NotMerchant,
    #[error("one-time deposit already made")]
    DepositAlreadyDone,
    #[error("hash chain heads already set")]
    HeadsAlreadySet,
    #[error("hash chain heads not set")]
    HeadsNotSet,
    #[error("wrong number of chain heads")]
    WrongHeadCount,
    #[error("quote is not signed by a registered terminal")]
    UnknownOPOS,
    #[error("transaction id already used")]
    ReplayedTransactionId,
    #[error("depth vector does not encode tau + delta")]
    PaymentMismatch,
    #[error("payment must be positive")]
    ZeroPayment,
    #[error("payment exceeds the channel balance")]
    InsufficientBalance,
    #[error("hash proof does not verify")]
    BadHashProof,
    #[error("payoff signature does not cover tau + delta")]
    BadPayoffSignature,
    #[error("caller is not a registered token signer")]
    UnknownSigner,
    #[error("no processed payment with this id and amount")]
    UnknownTransaction,
    #[error("signer already signed this transaction")]
    DuplicateSigner,
    #[error("signature does not verify over (eta, delta)")]
    BadSignature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrivateCall {
    OneTimeDeposit { amount: Amount },
    SetHeads(ChainHeads),
    RequestToken {
        release: HashRelease,
        eta: TransactionId,
        amount: Amount,
        opos_signature: Signature,
        payoff_signature: Signature,
    },
    SetSignature { eta: TransactionId, amount: Amount, signature: Signature },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrivateEvent {
    /// `E(η, δ)`: wakes the token signers.
    TokenRequested { eta: TransactionId, amount: Amount },
    SignatureStored { eta: TransactionId, signer: u32 },
    Funded { amount: Amount },
    HeadsSet,
}

pub const TOKEN_EVENT: &str = "TokenRequested";

/// Mirror of a channel on the merchant's private chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateContract {
    pub merchant: Address,
    /// Client's private-chain authentication key.
    pub client: Address,
    /// Client's public-chain funds key, which signs cumulative amounts.
    pub client_funds: Address,
    /// The public contract this one is grafted onto; binds payoff signatures.
    pub public_contract: Address,
    pub params: ChannelParams,
    pub heads: Option<ChainHeads>,
    pub revealed: RevealedStore,
    pub opos_keys: BTreeSet<Address>,
    pub signer_keys: Vec<Address>,
    pub initial_deposit: Amount,
    pub pseudo_balance: Amount,
    pub tau: Amount,
    pub deposit_done: bool,
    /// Processed payments: `η → δ`.
    pub payments: BTreeMap<TransactionId, Amount>,
    pub signatures: BTreeMap<TransactionId, Vec<(u32, Signature)>>,
    /// Latest client signature over `τ`.
    pub payoff_signature: Option<Signature>,
}

impl PrivateContract {
    pub fn new(
        merchant: Address,
        client: Address,
        client_funds: Address,
        public_contract: Address,
        params: ChannelParams,
        opos_keys: impl IntoIterator<Item = Address>,
        signer_keys: Vec<Address>,
    ) -> Self {
        PrivateContract {
            merchant,
            client,
            client_funds,
            public_contract,
            params,
            heads: None,
            revealed: RevealedStore::new(params.chains()),
            opos_keys: opos_keys.into_iter().collect(),
            signer_keys,
            initial_deposit: 0,
            pseudo_balance: 0,
            tau: 0,
            deposit_done: false,
            payments: BTreeMap::new(),
            signatures: BTreeMap::new(),
            payoff_signature: None,
        }
    }

    /// Signatures collected for `eta` so far (empty if unknown).
    pub fn signatures_for(&self, eta: &TransactionId) -> Vec<(u32, Signature)> {
        self.signatures.get(eta).cloned().unwrap_or_default()
    }

    fn one_time_deposit(&mut self, ctx: &mut ExecContext<PrivateEvent>, amount: Amount) -> Result<(), PrivateError> {
        if ctx.caller != self.merchant {
            return Err(PrivateError::NotMerchant);
        }
        if self.deposit_done {
            return Err(PrivateError::DepositAlreadyDone);
        }
        self.deposit_done = true;
        self.initial_deposit = amount;
        self.pseudo_balance = amount;
        ctx.emit(PrivateEvent::Funded { amount });
        Ok(())
    }

    fn set_heads(&mut self, ctx: &mut ExecContext<PrivateEvent>, heads: &ChainHeads) -> Result<(), PrivateError> {
        if ctx.caller != self.merchant {
            return Err(PrivateError::NotMerchant);
        }
        if self.heads.is_some() {
            return Err(PrivateError::HeadsAlreadySet);
        }
        if heads.len() != self.params.chains() {
            return Err(PrivateError::WrongHeadCount);
        }
        self.heads = Some(heads.clone());
        ctx.emit(PrivateEvent::HeadsSet);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn request_token(
        &mut self,
        ctx: &mut ExecContext<PrivateEvent>,
        release: &HashRelease,
        eta: TransactionId,
        amount: Amount,
        opos_signature: &Signature,
        payoff_signature: &Signature,
    ) -> Result<(), PrivateError> {
        if ctx.caller != self.client {
            return Err(PrivateError::NotClient);
        }
        let heads = self.heads.as_ref().ok_or(PrivateError::HeadsNotSet)?;
        let quote = crypto::serialize_signed_tuple(&eta, amount);
        match crypto::recover_address(&quote, opos_signature) {
            Some(a) if self.opos_keys.contains(&a) => {}
            _ => return Err(PrivateError::UnknownOPOS),
        }
        if self.payments.contains_key(&eta) {
            return Err(PrivateError::ReplayedTransactionId);
        }
        if amount == 0 {
            return Err(PrivateError::ZeroPayment);
        }
        let cumulative = self.tau.checked_add(amount).ok_or(PrivateError::PaymentMismatch)?;
        match hashchain::decode_amount(&release.depths, &self.params) {
            Ok(v) if v == cumulative => {}
            _ => return Err(PrivateError::PaymentMismatch),
        }
        if amount > self.pseudo_balance {
            return Err(PrivateError::InsufficientBalance);
        }
        if !hashchain::verify_release(&self.params, heads, release, &mut self.revealed) {
            return Err(PrivateError::BadHashProof);
        }
        let msg = crypto::payoff_message(&self.public_contract, cumulative);
        if !crypto::verify_address(&self.client_funds, &msg, payoff_signature) {
            return Err(PrivateError::BadPayoffSignature);
        }
        self.tau = cumulative;
        self.pseudo_balance -= amount;
        self.payoff_signature = Some(*payoff_signature);
        self.payments.insert(eta, amount);
        ctx.emit(PrivateEvent::TokenRequested { eta, amount });
        Ok(())
    }

    fn set_signature(
        &mut self,
        ctx: &mut ExecContext<PrivateEvent>,
        eta: TransactionId,
        amount: Amount,
        signature: &Signature,
    ) -> Result<(), PrivateError> {
        let index = self.signer_keys.iter().position(|k| *k == ctx.caller).ok_or(PrivateError::UnknownSigner)? as u32;
        if self.payments.get(&eta) != Some(&amount) {
            return Err(PrivateError::UnknownTransaction);
        }
        let stored = self.signatures.entry(eta).or_default();
        if stored.iter().any(|(i, _)| *i == index) {
            return Err(PrivateError::DuplicateSigner);
        }
        if !crypto::verify_address(&ctx.caller, &crypto::serialize_signed_tuple(&eta, amount), signature) {
            return Err(PrivateError::BadSignature);
        }
        stored.push((index, *signature));
        ctx.emit(PrivateEvent::SignatureStored { eta, signer: index });
        Ok(())
    }
}

impl Contract for PrivateContract {
    type Call = PrivateCall;
    type Error = PrivateError;
    type Event = PrivateEvent;

    fn call_name(call: &PrivateCall) -> &'static str {
        match call {
            PrivateCall::OneTimeDeposit { .. } => "one_time_deposit",
            PrivateCall::SetHeads(_) => "set_heads",
            PrivateCall::RequestToken { .. } => "request_token",
            PrivateCall::SetSignature { .. } => "set_signature",
        }
    }

    fn event_name(event: &PrivateEvent) -> &'static str {
        match event {
            PrivateEvent::TokenRequested { .. } => TOKEN_EVENT,
            PrivateEvent::SignatureStored { .. } => "SignatureStored",
            PrivateEvent::Funded { .. } => "Funded",
            PrivateEvent::HeadsSet => "HeadsSet",
        }
    }

    fn on_deploy(&mut self, ctx: &mut ExecContext<PrivateEvent>) -> Result<(), PrivateError> {
        if ctx.caller != self.merchant {
            return Err(PrivateError::NotMerchant);
        }
        Ok(())
    }

    fn execute(&mut self, ctx: &mut ExecContext<PrivateEvent>, call: &PrivateCall) -> Result<(), PrivateError> {
        match call {
            PrivateCall::OneTimeDeposit { amount } => self.one_time_deposit(ctx, *amount),
            PrivateCall::SetHeads(h) => self.set_heads(ctx, h),
            PrivateCall::RequestToken { release, eta, amount, opos_signature, payoff_signature } => {
                self.request_token(ctx, release, *eta, *amount, opos_signature, payoff_signature)
            }
            PrivateCall::SetSignature { eta, amount, signature } => self.set_signature(ctx, *eta, *amount, signature),
        }
    }

    fn check_transition(before: Option<&Self>, after: &Self) -> Result<(), String> {
        if after.tau + after.pseudo_balance != after.initial_deposit {
            return Err(format!(
                "private: tau {} + pseudo balance {} != deposit {}",
                after.tau, after.pseudo_balance, after.initial_deposit
            ));
        }
        if let Some(b) = before {
            if after.tau < b.tau {
                return Err("private: tau decreased".into());
            }
            if b.deposit_done && (!after.deposit_done || after.initial_deposit != b.initial_deposit) {
                return Err("private: one-time deposit changed".into());
            }
            if b.heads.is_some() && b.heads != after.heads {
                return Err("private: heads changed".into());
            }
            if after.payments.len() < b.payments.len() {
                return Err("private: processed payments dropped".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::hashchain::{encode_amount, generate_chains, release_for, DepthVector, HashChainSecret};
    use crate::ledger::{ChainProfile, LedgerSim, Revert, TxHandle, TxKind, TxStatus};

    struct Keys {
        client_funds: KeyPair,
        client_auth: KeyPair,
        merchant: KeyPair,
        opos: KeyPair,
        signers: Vec<KeyPair>,
    }

    fn keys() -> Keys {
        Keys {
            client_funds: KeyPair::from_seed(b"client-funds"),
            client_auth: KeyPair::from_seed(b"client-auth"),
            merchant: KeyPair::from_seed(b"merchant"),
            opos: KeyPair::from_seed(b"opos"),
            signers: (0..10u8).map(|i| KeyPair::from_seed(&[b's', i])).collect(),
        }
    }

    fn unit_params() -> ChannelParams {
        ChannelParams::new(10, 7, 1).unwrap()
    }

    fn seal<C: Contract>(l: &mut LedgerSim<C>) {
        let dt = l.next_seal_time() - l.now();
        l.advance(dt);
    }

    fn call<C: Contract>(l: &mut LedgerSim<C>, k: &KeyPair, to: Address, value: Amount, c: C::Call) -> TxHandle {
        let tx = l.tx(k, value, TxKind::Call { to, call: c });
        let h = l.submit(tx).unwrap();
        seal(l);
        h
    }

    fn deploy<C: Contract>(l: &mut LedgerSim<C>, k: &KeyPair, c: C) -> Address {
        let tx = l.tx(k, 0, TxKind::Deploy(c));
        let h = l.submit(tx).unwrap();
        seal(l);
        l.receipt(&h).unwrap().created.expect("deployed")
    }

    fn pub_err(l: &LedgerSim<PublicContract>, h: &TxHandle) -> Option<PublicError> {
        l.receipt(h).unwrap().contract_error().cloned()
    }

    fn priv_err(l: &LedgerSim<PrivateContract>, h: &TxHandle) -> Option<PrivateError> {
        l.receipt(h).unwrap().contract_error().cloned()
    }

    struct Channel {
        k: Keys,
        public: LedgerSim<PublicContract>,
        private: LedgerSim<PrivateContract>,
        pub_addr: Address,
        priv_addr: Address,
        secrets: Vec<HashChainSecret>,
        heads: ChainHeads,
    }

    fn channel(deposit: Amount) -> Channel {
        let k = keys();
        let params = unit_params();
        let (secrets, heads) = generate_chains(b"seed", &params);
        let mut public = LedgerSim::new(ChainProfile::public_default());
        let mut private = LedgerSim::new(ChainProfile::private_default());
        public.credit(k.client_funds.address(), 1_000_000);
        let pub_addr = deploy(
            &mut public,
            &k.merchant,
            PublicContract::new(k.client_funds.address(), k.merchant.address(), params, SimTime::from_secs(3600)),
        );
        let priv_addr = deploy(
            &mut private,
            &k.merchant,
            PrivateContract::new(
                k.merchant.address(),
                k.client_auth.address(),
                k.client_funds.address(),
                pub_addr,
                params,
                [k.opos.address()],
                k.signers.iter().map(KeyPair::address).collect(),
            ),
        );
        call(&mut public, &k.merchant, pub_addr, 0, PublicCall::SetHeads(heads.clone()));
        call(&mut public, &k.merchant, pub_addr, 0, PublicCall::SetGraftedAddress(priv_addr));
        call(&mut private, &k.merchant, priv_addr, 0, PrivateCall::SetHeads(heads.clone()));
        if deposit > 0 {
            call(&mut public, &k.client_funds, pub_addr, deposit, PublicCall::Deposit);
        }
        call(&mut private, &k.merchant, priv_addr, 0, PrivateCall::OneTimeDeposit { amount: deposit });
        Channel { k, public, private, pub_addr, priv_addr, secrets, heads }
    }

    impl Channel {
        fn tau(&self) -> Amount {
            self.private.call_view(&self.priv_addr, |c| c.tau).unwrap()
        }

        fn maxima(&self) -> DepthVector {
            self.private.call_view(&self.priv_addr, |c| c.revealed.maxima()).unwrap()
        }

        fn request_call(&self, eta: TransactionId, amount: Amount, depths: DepthVector) -> PrivateCall {
            let cumulative = crypto::serialize_signed_tuple(&eta, amount);
            let release = release_for(&depths, &self.maxima(), &self.secrets);
            let phi = hashchain::decode_amount(&depths, &unit_params()).unwrap();
            PrivateCall::RequestToken {
                release,
                eta,
                amount,
                opos_signature: crypto::sign(&self.k.opos, &cumulative),
                payoff_signature: crypto::sign(&self.k.client_funds, &crypto::payoff_message(&self.pub_addr, phi)),
            }
        }

        fn pay(&mut self, eta: TransactionId, amount: Amount) -> TxHandle {
            let v = encode_amount(self.tau() + amount, &unit_params()).unwrap();
            let c = self.request_call(eta, amount, v);
            let (key, to) = (self.k.client_auth.clone(), self.priv_addr);
            call(&mut self.private, &key, to, 0, c)
        }

        fn pay_ok(&mut self, eta: TransactionId, amount: Amount) -> bool {
            let h = self.pay(eta, amount);
            self.private.receipt(&h).unwrap().succeeded()
        }

        fn payoff(&mut self, amount: Amount, depths: &DepthVector, sig_amount: Amount) -> TxHandle {
            let c = self.payoff_call(amount, depths, sig_amount);
            let (key, to) = (self.k.merchant.clone(), self.pub_addr);
            call(&mut self.public, &key, to, 0, c)
        }

        fn payoff_call(&self, amount: Amount, depths: &DepthVector, sig_amount: Amount) -> PublicCall {
            let store = self.private.call_view(&self.priv_addr, |c| c.revealed.clone()).unwrap();
            PublicCall::Payoff {
                release: store.release_at(unit_params().hash, depths).unwrap(),
                amount,
                signature: crypto::sign(&self.k.client_funds, &crypto::payoff_message(&self.pub_addr, sig_amount)),
            }
        }
    }

    fn eta(n: u8) -> TransactionId {
        TransactionId([n; 16])
    }

    #[test]
    fn public_deposit_access_and_cap() {
        let mut ch = channel(50);
        assert_eq!(ch.public.call_view(&ch.pub_addr, |c| c.deposit).unwrap(), 50);
        let m = ch.k.merchant.clone();
        ch.public.credit(m.address(), 10);
        let h = call(&mut ch.public, &m, ch.pub_addr, 10, PublicCall::Deposit);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::NotClient));
        let c = ch.k.client_funds.clone();
        ch.public.credit(c.address(), 10_000_000);
        let h = call(&mut ch.public, &c, ch.pub_addr, 9_999_999 - 49, PublicCall::Deposit);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::ExceedsMaxBalance));
        let h = call(&mut ch.public, &c, ch.pub_addr, 0, PublicCall::Deposit);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::ZeroDeposit));
        assert_eq!(ch.public.balance(&ch.pub_addr), 50);
    }

    #[test]
    fn heads_and_graft_are_write_once_and_merchant_only() {
        let mut ch = channel(50);
        let (m, c) = (ch.k.merchant.clone(), ch.k.client_funds.clone());
        let heads = ch.heads.clone();
        let h = call(&mut ch.public, &m, ch.pub_addr, 0, PublicCall::SetHeads(heads.clone()));
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::HeadsAlreadySet));
        let h = call(&mut ch.public, &c, ch.pub_addr, 0, PublicCall::SetHeads(heads.clone()));
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::NotMerchant));
        let h = call(&mut ch.public, &m, ch.pub_addr, 0, PublicCall::SetGraftedAddress(Address([1; 20])));
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::AlreadyGrafted));
        let h = call(&mut ch.public, &c, ch.pub_addr, 0, PublicCall::SetGraftedAddress(Address([1; 20])));
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::NotMerchant));
        assert_eq!(ch.public.call_view(&ch.pub_addr, |p| p.grafted).unwrap(), Some(ch.priv_addr));

        let a = ch.k.client_auth.clone();
        let h = call(&mut ch.private, &m, ch.priv_addr, 0, PrivateCall::SetHeads(heads.clone()));
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::HeadsAlreadySet));
        let h = call(&mut ch.private, &a, ch.priv_addr, 0, PrivateCall::SetHeads(heads));
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::NotMerchant));
        assert_eq!(
            ch.private.call_view(&ch.priv_addr, |p| p.heads.clone()).unwrap(),
            ch.public.call_view(&ch.pub_addr, |p| p.heads.clone()).unwrap()
        );
    }

    #[test]
    fn one_time_deposit_only_once() {
        let mut ch = channel(5000);
        let m = ch.k.merchant.clone();
        let h = call(&mut ch.private, &m, ch.priv_addr, 0, PrivateCall::OneTimeDeposit { amount: 1 });
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::DepositAlreadyDone));
        assert_eq!(ch.private.call_view(&ch.priv_addr, |p| p.pseudo_balance).unwrap(), 5000);
    }

    #[test]
    fn zero_deposit_channel_rejects_every_payment() {
        let mut ch = channel(0);
        let h = ch.pay(eta(1), 1);
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::InsufficientBalance));
    }

    #[test]
    fn paper_sequence_then_overclaim_rejected_and_honest_payoff_paid() {
        let mut ch = channel(5000);
        let h = ch.pay(eta(1), 1720);
        let r = ch.private.receipt(&h).unwrap();
        assert!(r.succeeded());
        assert_eq!(r.events, vec![PrivateEvent::TokenRequested { eta: eta(1), amount: 1720 }]);
        assert_eq!(ch.tau(), 1720);
        assert!(ch.pay_ok(eta(2), 56));
        assert!(ch.pay_ok(eta(3), 56));
        assert_eq!(ch.tau(), 1832);
        assert_eq!(ch.maxima(), DepthVector(vec![6, 7, 8, 1, 0, 0, 0]));

        // The merchant knows enough hashes for 1876 but only holds sig(1832).
        let m = ch.k.merchant.clone();
        let latest = ch.private.call_view(&ch.priv_addr, |p| p.payoff_signature.unwrap()).unwrap();
        let store = ch.private.call_view(&ch.priv_addr, |p| p.revealed.clone()).unwrap();
        let over = DepthVector(vec![6, 7, 8, 1, 0, 0, 0]);
        let overclaim = PublicCall::Payoff { release: store.release_at(unit_params().hash, &over).unwrap(), amount: 1876, signature: latest };
        let h = call(&mut ch.public, &m, ch.pub_addr, 0, overclaim);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::BadPayoffSignature));

        let honest = DepthVector(vec![2, 3, 8, 1, 0, 0, 0]);
        let good = PublicCall::Payoff { release: store.release_at(unit_params().hash, &honest).unwrap(), amount: 1832, signature: latest };
        let h = call(&mut ch.public, &m, ch.pub_addr, 0, good.clone());
        assert!(ch.public.receipt(&h).unwrap().succeeded());
        assert_eq!(ch.public.balance(&m.address()), 1832);

        // Replay is inert.
        let h = call(&mut ch.public, &m, ch.pub_addr, 0, good);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::NothingNew));

        let c = ch.k.client_funds.clone();
        let before = ch.public.balance(&c.address());
        call(&mut ch.public, &c, ch.pub_addr, 0, PublicCall::Refund);
        assert_eq!(ch.public.balance(&c.address()) - before, 3168);
        call(&mut ch.public, &c, ch.pub_addr, 0, PublicCall::Refund);
        assert_eq!(ch.public.balance(&c.address()) - before, 3168);
        assert_eq!(ch.public.balance(&ch.pub_addr), 0);
        assert!(ch.public.violations().is_empty() && ch.private.violations().is_empty());
    }

    #[test]
    fn payoff_rejections() {
        let mut ch = channel(5000);
        ch.pay(eta(1), 1720);
        let m = ch.k.merchant.clone();
        let v = DepthVector(vec![0, 2, 7, 1, 0, 0, 0]);
        let mut bad_amount = ch.payoff_call(1720, &v, 1720);
        if let PublicCall::Payoff { amount, .. } = &mut bad_amount {
            *amount = 1721;
        }
        let h = call(&mut ch.public, &m, ch.pub_addr, 0, bad_amount);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::AmountMismatch));

        let mut tampered = ch.payoff_call(1720, &v, 1720);
        if let PublicCall::Payoff { release, .. } = &mut tampered {
            release.values[1].as_mut().unwrap().0[0] ^= 0xff;
        }
        let h = call(&mut ch.public, &m, ch.pub_addr, 0, tampered);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::BadHashProof));

        let zero = PublicCall::Payoff {
            release: HashRelease::empty(DepthVector::zeros(7)),
            amount: 0,
            signature: Signature([0; 65]),
        };
        let h = call(&mut ch.public, &m, ch.pub_addr, 0, zero);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::NothingNew));

        let c = ch.k.client_funds.clone();
        let pc = ch.payoff_call(1720, &v, 1720);
        let h = call(&mut ch.public, &c, ch.pub_addr, 0, pc);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::NotMerchant));
        assert_eq!(ch.public.call_view(&ch.pub_addr, |p| p.paid_out).unwrap(), 0);
    }

    #[test]
    fn payoff_cannot_exceed_deposit() {
        // Private mirror funded above the public deposit (a merchant mistake).
        let mut ch = channel(100);
        ch.private = LedgerSim::new(ChainProfile::private_default());
        let k = &ch.k;
        let priv_addr = deploy(
            &mut ch.private,
            &k.merchant,
            PrivateContract::new(
                k.merchant.address(),
                k.client_auth.address(),
                k.client_funds.address(),
                ch.pub_addr,
                unit_params(),
                [k.opos.address()],
                vec![],
            ),
        );
        ch.priv_addr = priv_addr;
        let m = ch.k.merchant.clone();
        let heads = ch.heads.clone();
        call(&mut ch.private, &m, priv_addr, 0, PrivateCall::SetHeads(heads));
        call(&mut ch.private, &m, priv_addr, 0, PrivateCall::OneTimeDeposit { amount: 1000 });
        assert!(ch.pay_ok(eta(1), 500));
        let h = ch.payoff(500, &DepthVector(vec![0, 0, 5, 0, 0, 0, 0]), 500);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::ExceedsDeposit));
    }

    #[test]
    fn incremental_payoff_pays_the_difference() {
        let mut ch = channel(5000);
        ch.pay(eta(1), 1720);
        let m = ch.k.merchant.clone();
        ch.payoff(1720, &DepthVector(vec![0, 2, 7, 1, 0, 0, 0]), 1720);
        ch.pay(eta(2), 56);
        let h = ch.payoff(1776, &DepthVector(vec![6, 7, 7, 1, 0, 0, 0]), 1776);
        assert_eq!(ch.public.receipt(&h).unwrap().events, vec![PublicEvent::PaidOut { amount: 56, cumulative: 1776 }]);
        assert_eq!(ch.public.balance(&m.address()), 1776);
    }

    #[test]
    fn refund_waits_for_payoff_or_timeout() {
        let mut ch = channel(500);
        let c = ch.k.client_funds.clone();
        let h = call(&mut ch.public, &c, ch.pub_addr, 0, PublicCall::Refund);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::RefundNotYetAllowed));
        let m = ch.k.merchant.clone();
        let h = call(&mut ch.public, &m, ch.pub_addr, 0, PublicCall::Refund);
        assert_eq!(pub_err(&ch.public, &h), Some(PublicError::NotClient));
        ch.public.advance(SimTime::from_secs(3600));
        let h = call(&mut ch.public, &c, ch.pub_addr, 0, PublicCall::Refund);
        assert_eq!(ch.public.receipt(&h).unwrap().events, vec![PublicEvent::Refunded { amount: 500 }]);
    }

    #[test]
    fn token_request_rejections() {
        let mut ch = channel(5000);
        assert!(ch.pay_ok(eta(1), 1720));
        // Reused η.
        let h = ch.pay(eta(1), 56);
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::ReplayedTransactionId));
        // Stale vector: δ = 56 but the vector still encodes 1720.
        let stale = ch.request_call(eta(2), 56, DepthVector(vec![0, 2, 7, 1, 0, 0, 0]));
        let a = ch.k.client_auth.clone();
        let h = call(&mut ch.private, &a, ch.priv_addr, 0, stale);
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::PaymentMismatch));
        // Overspend.
        let h = ch.pay(eta(3), 3281);
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::InsufficientBalance));
        // Wrong caller.
        let c = ch.request_call(eta(4), 56, encode_amount(1776, &unit_params()).unwrap());
        let m = ch.k.merchant.clone();
        let h = call(&mut ch.private, &m, ch.priv_addr, 0, c);
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::NotClient));
        // Quote signed by an unregistered terminal.
        let mut c = ch.request_call(eta(5), 56, encode_amount(1776, &unit_params()).unwrap());
        if let PrivateCall::RequestToken { opos_signature, eta, amount, .. } = &mut c {
            *opos_signature = crypto::sign(&KeyPair::from_seed(b"rogue"), &crypto::serialize_signed_tuple(eta, *amount));
        }
        let h = call(&mut ch.private, &a, ch.priv_addr, 0, c);
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::UnknownOPOS));
        // Forged preimage.
        let mut c = ch.request_call(eta(6), 56, encode_amount(1776, &unit_params()).unwrap());
        if let PrivateCall::RequestToken { release, .. } = &mut c {
            release.values[0] = Some(crypto::hash(b"guess"));
        }
        let h = call(&mut ch.private, &a, ch.priv_addr, 0, c);
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::BadHashProof));
        // Payoff signature over the wrong amount.
        let mut c = ch.request_call(eta(7), 56, encode_amount(1776, &unit_params()).unwrap());
        if let PrivateCall::RequestToken { payoff_signature, .. } = &mut c {
            *payoff_signature = crypto::sign(&ch.k.client_funds, &crypto::payoff_message(&ch.pub_addr, 1720));
        }
        let h = call(&mut ch.private, &a, ch.priv_addr, 0, c);
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::BadPayoffSignature));

        assert_eq!(ch.tau(), 1720);
        assert_eq!(ch.private.call_view(&ch.priv_addr, |p| p.pseudo_balance).unwrap(), 3280);
        let token_events = ch.private.log().iter().filter(|e| e.name == TOKEN_EVENT).count();
        assert_eq!(token_events, 1);
        assert!(ch.private.violations().is_empty());
    }

    #[test]
    fn signatures_collect_per_signer() {
        let mut ch = channel(5000);
        ch.pay(eta(1), 1720);
        assert!(ch.private.call_view(&ch.priv_addr, |p| p.signatures_for(&eta(1))).unwrap().is_empty());
        let tuple = crypto::serialize_signed_tuple(&eta(1), 1720);
        for s in ch.k.signers.clone() {
            let sig = crypto::sign(&s, &tuple);
            call(&mut ch.private, &s, ch.priv_addr, 0, PrivateCall::SetSignature { eta: eta(1), amount: 1720, signature: sig });
        }
        let sigs = ch.private.call_view(&ch.priv_addr, |p| p.signatures_for(&eta(1))).unwrap();
        assert_eq!(sigs.len(), 10);
        assert!(ch.private.call_view(&ch.priv_addr, |p| p.signatures_for(&eta(9))).unwrap().is_empty());

        let s0 = ch.k.signers[0].clone();
        let sig = crypto::sign(&s0, &tuple);
        let h = call(&mut ch.private, &s0, ch.priv_addr, 0, PrivateCall::SetSignature { eta: eta(1), amount: 1720, signature: sig });
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::DuplicateSigner));
        let outsider = KeyPair::from_seed(b"outsider");
        let sig = crypto::sign(&outsider, &tuple);
        let h = call(&mut ch.private, &outsider, ch.priv_addr, 0, PrivateCall::SetSignature { eta: eta(1), amount: 1720, signature: sig });
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::UnknownSigner));
        let h = call(&mut ch.private, &s0, ch.priv_addr, 0, PrivateCall::SetSignature { eta: eta(2), amount: 1720, signature: sig });
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::UnknownTransaction));
    }

    #[test]
    fn wrong_tuple_signature_rejected() {
        let mut ch = channel(5000);
        ch.pay(eta(1), 1720);
        let s = ch.k.signers[3].clone();
        let wrong = crypto::sign(&s, &crypto::serialize_signed_tuple(&eta(1), 1721));
        let h = call(&mut ch.private, &s, ch.priv_addr, 0, PrivateCall::SetSignature { eta: eta(1), amount: 1720, signature: wrong });
        assert_eq!(priv_err(&ch.private, &h), Some(PrivateError::BadSignature));
    }

    #[test]
    fn reverted_request_does_not_touch_state() {
        let mut ch = channel(5000);
        ch.pay(eta(1), 1720);
        let before = serde_json::to_string(ch.private.contract(&ch.priv_addr).unwrap()).unwrap();
        let h = ch.pay(eta(1), 56);
        assert!(matches!(ch.private.receipt(&h).unwrap().status, TxStatus::Reverted(Revert::Contract(_))));
        assert_eq!(serde_json::to_string(ch.private.contract(&ch.priv_addr).unwrap()).unwrap(), before);
    }

    #[test]
    fn many_opos_keys_still_validate() {
        let mut ch = channel(5000);
        let extra: Vec<Address> = (0..1000u32).map(|i| KeyPair::from_seed(&i.to_be_bytes()).address()).collect();
        let k = &ch.k;
        let mut contract = PrivateContract::new(
            k.merchant.address(),
            k.client_auth.address(),
            k.client_funds.address(),
            ch.pub_addr,
            unit_params(),
            extra.into_iter().chain([k.opos.address()]),
            vec![],
        );
        contract.heads = Some(ch.heads.clone());
        let m = k.merchant.clone();
        ch.priv_addr = deploy(&mut ch.private, &m, contract);
        call(&mut ch.private, &m, ch.priv_addr, 0, PrivateCall::OneTimeDeposit { amount: 5000 });
        assert_eq!(ch.private.call_view(&ch.priv_addr, |p| p.opos_keys.len()).unwrap(), 1001);
        assert!(ch.pay_ok(eta(1), 10));
    }
}
