//! Merchant side of channel setup and settlement.

use serde::{Deserialize, Serialize};

use crate::contracts::{PrivateCall, PrivateContract, PublicCall, PublicContract};
use crate::crypto::{Address, KeyPair, Signature};
use crate::hashchain::{self, ChainHeads, ChannelParams, DepthVector, RevealedStore};
use crate::ledger::{TxKind, TxReceipt};
use crate::netsim::NetLink;
use crate::sim::{Channel, World};
use crate::time::SimTime;
use crate::Amount;

/// What a client sends when asking for a channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelRequest {
    pub heads: ChainHeads,
    pub client_auth: Address,
    pub client_funds: Address,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelAddresses {
    pub public: Address,
    pub private: Address,
}

/// Deliberate setup faults, for exercising the client's checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupFault {
    #[default]
    None,
    GraftWrongAddress,
    MismatchedHeads,
    WrongParams,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MerchantError {
    #[error("{op} reverted: {reason}")]
    Reverted { op: &'static str, reason: String },
    #[error("{0} not sealed in time")]
    Timeout(&'static str),
    #[error("nothing to claim")]
    NothingToClaim,
}

/// Which cumulative amount a payoff claims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Claim {
    /// The last amount the client signed.
    Signed,
    /// Everything the revealed hashes could support, with the latest client
    /// signature attached.
    Overclaim,
}

/// State the merchant reads from its private contract before settling.
#[derive(Debug, Clone, Serialize)]
struct Settlement {
    tau: Amount,
    signature: Option<Signature>,
    revealed: RevealedStore,
}

#[derive(Debug, Clone)]
pub struct Merchant {
    key: KeyPair,
    pub link: NetLink,
    pub params: ChannelParams,
    pub refund_timeout: SimTime,
    pub opos_keys: Vec<Address>,
    pub signer_keys: Vec<Address>,
    pub threshold: usize,
    pub fault: SetupFault,
    /// How long to wait for any single setup or settlement transaction.
    pub patience: SimTime,
}

impl Merchant {
    pub fn new(key: KeyPair, params: ChannelParams, opos_keys: Vec<Address>, signer_keys: Vec<Address>, threshold: usize) -> Self {
        Merchant {
            key,
            link: NetLink::local(),
            params,
            refund_timeout: SimTime::from_secs(7 * 24 * 3600),
            opos_keys,
            signer_keys,
            threshold,
            fault: SetupFault::None,
            patience: SimTime::from_secs(600),
        }
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    fn public_call(&self, world: &mut World, to: Address, call: PublicCall, op: &'static str) -> Result<TxReceipt<PublicContract>, MerchantError> {
        let tx = world.public.tx(&self.key, 0, TxKind::Call { to, call });
        let h = world.send_public(tx, &self.link, Channel::MerchantChain);
        let r = world.wait_public(&h, world.now() + self.patience).ok_or(MerchantError::Timeout(op))?;
        Ok(r)
    }

    fn private_call(&self, world: &mut World, to: Address, call: PrivateCall, op: &'static str) -> Result<TxReceipt<PrivateContract>, MerchantError> {
        let tx = world.private.tx(&self.key, 0, TxKind::Call { to, call });
        let h = world.send_private(tx, &self.link, Channel::MerchantChain);
        world.wait_private(&h, world.now() + self.patience).ok_or(MerchantError::Timeout(op))
    }

    fn expect_success<C: crate::ledger::Contract>(r: &TxReceipt<C>, op: &'static str) -> Result<(), MerchantError> {
        match &r.status {
            crate::ledger::TxStatus::Success => Ok(()),
            crate::ledger::TxStatus::Reverted(e) => Err(MerchantError::Reverted { op, reason: e.to_string() }),
        }
    }

    /// Deploys and links both contracts for one client.
    pub fn open_channel(&self, world: &mut World, req: &ChannelRequest) -> Result<ChannelAddresses, MerchantError> {
        let params = match self.fault {
            SetupFault::WrongParams => ChannelParams { theta: self.params.theta + 1, ..self.params },
            _ => self.params,
        };
        let public = PublicContract::new(req.client_funds, self.address(), params, self.refund_timeout);
        let tx = world.public.tx(&self.key, 0, TxKind::Deploy(public));
        let h = world.send_public(tx, &self.link, Channel::MerchantChain);
        let r = world.wait_public(&h, world.now() + self.patience).ok_or(MerchantError::Timeout("deploy public"))?;
        Self::expect_success(&r, "deploy public")?;
        let public = r.created.expect("deployment creates a contract");

        let private = PrivateContract::new(
            self.address(),
            req.client_auth,
            req.client_funds,
            public,
            params,
            self.opos_keys.iter().copied(),
            self.signer_keys.clone(),
        );
        let tx = world.private.tx(&self.key, 0, TxKind::Deploy(private));
        let h = world.send_private(tx, &self.link, Channel::MerchantChain);
        let r = world.wait_private(&h, world.now() + self.patience).ok_or(MerchantError::Timeout("deploy private"))?;
        Self::expect_success(&r, "deploy private")?;
        let private = r.created.expect("deployment creates a contract");

        let mut private_heads = req.heads.clone();
        if self.fault == SetupFault::MismatchedHeads {
            private_heads.0[0] = crate::crypto::hash(b"not the client's head");
        }
        let graft = if self.fault == SetupFault::GraftWrongAddress { Address([0xee; 20]) } else { private };

        // The three linking calls go out together.
        let deadline = world.now() + self.patience;
        let calls = [PublicCall::SetHeads(req.heads.clone()), PublicCall::SetGraftedAddress(graft)];
        let mut handles = Vec::new();
        for call in calls {
            let tx = world.public.tx(&self.key, 0, TxKind::Call { to: public, call });
            handles.push(world.send_public(tx, &self.link, Channel::MerchantChain));
        }
        let tx = world.private.tx(&self.key, 0, TxKind::Call { to: private, call: PrivateCall::SetHeads(private_heads) });
        let ph = world.send_private(tx, &self.link, Channel::MerchantChain);
        for (h, op) in handles.iter().zip(["set_heads", "set_addresses"]) {
            let r = world.wait_public(h, deadline).ok_or(MerchantError::Timeout(op))?;
            Self::expect_success(&r, op)?;
        }
        let r = world.wait_private(&ph, deadline).ok_or(MerchantError::Timeout("set_heads"))?;
        Self::expect_success(&r, "set_heads")?;
        Ok(ChannelAddresses { public, private })
    }

    /// Mirrors the confirmed public deposit into the private contract.
    pub fn fund_mirror(&self, world: &mut World, ch: &ChannelAddresses) -> Result<Amount, MerchantError> {
        let link = self.link.clone();
        let deposit = world.view_public(&link, Channel::MerchantChain, |l| l.call_view(&ch.public, |c| c.deposit).unwrap_or(0));
        let r = self.private_call(world, ch.private, PrivateCall::OneTimeDeposit { amount: deposit }, "one_time_deposit")?;
        Self::expect_success(&r, "one_time_deposit")?;
        Ok(deposit)
    }

    /// Claims on the public chain what the private contract has recorded.
    /// The receipt is returned even when the claim reverts.
    pub fn payoff(&self, world: &mut World, ch: &ChannelAddresses, claim: Claim) -> Result<TxReceipt<PublicContract>, MerchantError> {
        let link = self.link.clone();
        let s = world.view_private(&link, Channel::MerchantChain, |l| {
            l.call_view(&ch.private, |c| Settlement { tau: c.tau, signature: c.payoff_signature, revealed: c.revealed.clone() })
                .ok()
        });
        let s = s.ok_or(MerchantError::NothingToClaim)?;
        let signature = s.signature.ok_or(MerchantError::NothingToClaim)?;
        let (amount, depths) = match claim {
            Claim::Signed => {
                let v = hashchain::encode_amount(s.tau, &self.params).map_err(|_| MerchantError::NothingToClaim)?;
                (s.tau, v)
            }
            Claim::Overclaim => {
                let v: DepthVector = s.revealed.maxima();
                let amount = hashchain::decode_amount(&v, &self.params).map_err(|_| MerchantError::NothingToClaim)?;
                (amount, v)
            }
        };
        let release = s.revealed.release_at(self.params.hash, &depths).ok_or(MerchantError::NothingToClaim)?;
        self.public_call(world, ch.public, PublicCall::Payoff { release, amount, signature }, "payoff")
    }
}
