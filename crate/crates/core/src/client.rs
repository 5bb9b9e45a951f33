//! Client wallet: chain secrets, keys, channel setup and the purchase flow.

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::contracts::{PrivateCall, PrivateError, PublicCall, PublicError};
use crate::crypto::{self, Address, Digest, KeyPair, Signature};
use crate::hashchain::{self, ChainHeads, ChannelParams, CodecError, DepthVector, HashChainSecret, HashRelease};
use crate::ledger::{Revert, TxHandle, TxKind, TxReceipt, TxStatus};
use crate::merchant::{ChannelAddresses, ChannelRequest, Merchant, MerchantError};
use crate::netsim::{Direction, NetLink};
use crate::opos::{self, PaymentToken, Quote, TokenSignature};
use crate::sim::{Channel, World};
use crate::time::SimTime;
use crate::Amount;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("channel verification failed: {0}")]
    VerificationFailed(String),
    #[error("no channel open")]
    NoChannel,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("bad quote: {0}")]
    Quote(#[from] opos::OposError),
    #[error("token request rejected: {0}")]
    Rejected(PrivateError),
    #[error("public call rejected: {0}")]
    PublicRejected(PublicError),
    #[error("transaction reverted: {0}")]
    Reverted(String),
    #[error("no quorum before the deadline")]
    Timeout,
    #[error("token response never arrived")]
    ResponseLost,
    #[error(transparent)]
    Merchant(#[from] MerchantError),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

/// Wallet persistence. The public-chain funds key is kept out of it and
/// supplied separately on restore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalletSnapshot {
    pub master_seed: Digest,
    pub params: ChannelParams,
    pub auth_secret: Digest,
    pub funds_address: Address,
    pub channel: Option<ChannelAddresses>,
    #[serde(with = "crate::amount_serde")]
    pub tau: Amount,
    pub maxima: DepthVector,
    pub threshold: usize,
    pub link: NetLink,
}

#[derive(Debug, Clone)]
pub struct Wallet {
    master_seed: Digest,
    secrets: Vec<HashChainSecret>,
    heads: ChainHeads,
    pub params: ChannelParams,
    auth: KeyPair,
    funds: KeyPair,
    /// Cached cumulative payment.
    pub tau: Amount,
    pub maxima: DepthVector,
    pub channel: Option<ChannelAddresses>,
    pub threshold: usize,
    pub link: NetLink,
    /// Re-read `τ` from the private contract before each purchase.
    pub refresh_tau: bool,
    pub quorum_deadline: SimTime,
    /// Fault injection: the token response is dropped on the way back.
    pub drop_token_response: bool,
}

impl Wallet {
    pub fn new<R: RngCore + ?Sized>(rng: &mut R, params: ChannelParams, link: NetLink) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let funds = KeyPair::generate(rng);
        Self::from_parts(Digest(seed), KeyPair::generate(rng), funds, params, link)
    }

    fn from_parts(master_seed: Digest, auth: KeyPair, funds: KeyPair, params: ChannelParams, link: NetLink) -> Self {
        let (secrets, heads) = hashchain::generate_chains(&master_seed.0, &params);
        Wallet {
            master_seed,
            secrets,
            heads,
            params,
            auth,
            funds,
            tau: 0,
            maxima: DepthVector::zeros(params.chains()),
            channel: None,
            threshold: 0,
            link,
            refresh_tau: true,
            quorum_deadline: SimTime::from_secs(30),
            drop_token_response: false,
        }
    }

    pub fn heads(&self) -> &ChainHeads {
        &self.heads
    }

    pub fn auth_address(&self) -> Address {
        self.auth.address()
    }

    pub fn funds_address(&self) -> Address {
        self.funds.address()
    }

    pub fn auth_key(&self) -> &KeyPair {
        &self.auth
    }

    /// Byte strings that must never appear in any message the wallet sends.
    pub fn secret_material(&self) -> Vec<Vec<u8>> {
        let mut out = vec![self.master_seed.0.to_vec(), self.funds.secret_bytes().to_vec(), self.auth.secret_bytes().to_vec()];
        out.extend(self.secrets.iter().map(|s| s.seed.0.to_vec()));
        let hexed: Vec<Vec<u8>> = out.iter().map(|b| hex::encode(b).into_bytes()).collect();
        out.extend(hexed);
        out
    }

    pub fn snapshot(&self) -> WalletSnapshot {
        WalletSnapshot {
            master_seed: self.master_seed,
            params: self.params,
            auth_secret: Digest(self.auth.secret_bytes()),
            funds_address: self.funds.address(),
            channel: self.channel,
            tau: self.tau,
            maxima: self.maxima.clone(),
            threshold: self.threshold,
            link: self.link.clone(),
        }
    }

    pub fn restore(s: &WalletSnapshot, funds: KeyPair) -> Result<Self, ClientError> {
        if funds.address() != s.funds_address {
            return Err(ClientError::Snapshot("funds key does not match the snapshot".into()));
        }
        let auth = KeyPair::from_secret_bytes(&s.auth_secret.0).ok_or_else(|| ClientError::Snapshot("invalid auth key".into()))?;
        s.params.validate()?;
        let mut w = Self::from_parts(s.master_seed, auth, funds, s.params, s.link.clone());
        if s.maxima.len() != s.params.chains() {
            return Err(ClientError::Snapshot("depth vector length".into()));
        }
        w.channel = s.channel;
        w.tau = s.tau;
        w.maxima = s.maxima.clone();
        w.threshold = s.threshold;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClientError> {
        let text = serde_json::to_string_pretty(&self.snapshot()).map_err(|e| ClientError::Snapshot(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ClientError::Snapshot(e.to_string()))
    }

    pub fn load(path: &Path, funds: KeyPair) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path).map_err(|e| ClientError::Snapshot(e.to_string()))?;
        let s: WalletSnapshot = serde_json::from_str(&text).map_err(|e| ClientError::Snapshot(e.to_string()))?;
        Self::restore(&s, funds)
    }

    /// Client signature over the cumulative amount `φ`, bound to the public
    /// contract. An off-chain authorization; no public transaction is made.
    /// Hash values needed to move the revealed maxima up to `depths`.
    pub fn release(&self, depths: &DepthVector, revealed: &DepthVector) -> HashRelease {
        hashchain::release_for(depths, revealed, &self.secrets)
    }

    pub fn sign_phi(&self, public_contract: &Address, phi: Amount) -> Signature {
        crypto::sign(&self.funds, &crypto::payoff_message(public_contract, phi))
    }

    fn send_to_merchant(&self, world: &mut World, payload: &[u8]) {
        world.traffic.record(world.now(), Channel::ClientMerchant, Direction::Up, payload, world.overhead.envelope_bytes);
        let t = world.now() + self.link.transfer_time(payload.len() + world.overhead.envelope_bytes, Direction::Up);
        world.run_until(t);
    }

    /// Requests a channel, checks what the merchant deployed, then deposits.
    pub fn initiate_contract(&mut self, world: &mut World, merchant: &Merchant, deposit: Amount) -> Result<ChannelAddresses, ClientError> {
        let req = ChannelRequest { heads: self.heads.clone(), client_auth: self.auth.address(), client_funds: self.funds.address() };
        self.send_to_merchant(world, &serde_json::to_vec(&req).expect("request serializes"));
        let ch = merchant.open_channel(world, &req)?;
        world.traffic.record(world.now(), Channel::ClientMerchant, Direction::Down, &serde_json::to_vec(&ch).expect("serializes"), world.overhead.envelope_bytes);
        self.verify_channel(world, &ch)?;
        self.threshold = merchant.threshold;

        if deposit > 0 {
            let tx = world.public.tx(&self.funds, deposit, TxKind::Call { to: ch.public, call: PublicCall::Deposit });
            let h = world.send_public(tx, &self.link, Channel::ClientChain);
            let deadline = world.now() + merchant.patience;
            let r = world.wait_public(&h, deadline).ok_or(ClientError::Timeout)?;
            public_outcome(&r)?;
        }
        merchant.fund_mirror(world, &ch)?;
        self.channel = Some(ch);
        self.tau = 0;
        self.maxima = DepthVector::zeros(self.params.chains());
        Ok(ch)
    }

    fn verify_channel(&self, world: &mut World, ch: &ChannelAddresses) -> Result<(), ClientError> {
        let fail = |m: &str| Err(ClientError::VerificationFailed(m.into()));
        let public = world.view_public(&self.link, Channel::ClientChain, |l| l.contract(&ch.public).cloned());
        let Some(public) = public else { return fail("public contract missing") };
        let private = world.view_private(&self.link, Channel::ClientChain, |l| l.contract(&ch.private).cloned());
        let Some(private) = private else { return fail("private contract missing") };
        if public.heads.as_ref() != Some(&self.heads) {
            return fail("public contract heads differ from the wallet's");
        }
        if private.heads.as_ref() != Some(&self.heads) {
            return fail("private contract heads differ from the wallet's");
        }
        if public.params != self.params || private.params != self.params {
            return fail("channel parameters differ");
        }
        if public.grafted != Some(ch.private) {
            return fail("public contract is not grafted onto the private contract");
        }
        if private.public_contract != ch.public {
            return fail("private contract points at another public contract");
        }
        if public.client != self.funds.address() || private.client_funds != self.funds.address() {
            return fail("funds key not registered");
        }
        if private.client != self.auth.address() {
            return fail("authentication key not registered");
        }
        if private.signer_keys.is_empty() {
            return fail("no token signers registered");
        }
        Ok(())
    }

    /// Runs one purchase to completion.
    pub fn purchase(&mut self, world: &mut World, quote_payload: &[u8]) -> Result<PurchaseOutcome, ClientError> {
        let mut session = PurchaseSession::start(self, world, quote_payload)?;
        while !session.is_done() {
            world.run_until(session.next_wake());
            session.wake(self, world);
        }
        session.finish()
    }

    pub fn request_refund(&self, world: &mut World, patience: SimTime) -> Result<TxReceipt<crate::contracts::PublicContract>, ClientError> {
        let ch = self.channel.ok_or(ClientError::NoChannel)?;
        let tx = world.public.tx(&self.funds, 0, TxKind::Call { to: ch.public, call: PublicCall::Refund });
        let h = world.send_public(tx, &self.link, Channel::ClientChain);
        let r = world.wait_public(&h, world.now() + patience).ok_or(ClientError::Timeout)?;
        public_outcome(&r)?;
        Ok(r)
    }
}

fn public_outcome(r: &TxReceipt<crate::contracts::PublicContract>) -> Result<(), ClientError> {
    match &r.status {
        TxStatus::Success => Ok(()),
        TxStatus::Reverted(Revert::Contract(e)) => Err(ClientError::PublicRejected(e.clone())),
        TxStatus::Reverted(e) => Err(ClientError::Reverted(e.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PurchaseOutcome {
    pub token: PaymentToken,
    pub token_qr: Vec<u8>,
    pub started: SimTime,
    pub finished: SimTime,
    /// When the request transaction reached the private ledger.
    pub submitted: SimTime,
    pub request_block: u64,
    pub client_chain_bytes: u64,
}

impl PurchaseOutcome {
    pub fn latency(&self) -> SimTime {
        self.finished - self.started
    }
}

#[derive(Debug, Clone, Serialize)]
struct ChannelView {
    tau: Amount,
    maxima: DepthVector,
}

#[derive(Debug, Clone)]
enum Stage {
    ReadTau,
    Submit { tau: Amount, maxima: DepthVector },
    Poll,
    Respond(Result<PaymentToken, ClientError>),
    Done(Result<PaymentToken, ClientError>),
}

/// One purchase as a stepped actor, so several wallets can interleave.
#[derive(Debug, Clone)]
pub struct PurchaseSession {
    quote: Quote,
    channel: ChannelAddresses,
    stage: Stage,
    wake: SimTime,
    started: SimTime,
    submitted: SimTime,
    deadline: SimTime,
    handle: Option<TxHandle>,
    phi: Amount,
    depths: DepthVector,
    request_block: u64,
    /// Client-blockchain bytes this purchase put on the wire, both ways.
    bytes: u64,
}

const VIEW_REQUEST_BYTES: usize = 96;

impl PurchaseSession {
    /// Scans the quote and sends the `τ` lookup.
    pub fn start(wallet: &Wallet, world: &mut World, quote_payload: &[u8]) -> Result<Self, ClientError> {
        let channel = wallet.channel.ok_or(ClientError::NoChannel)?;
        let now = world.now();
        world.traffic.record(now, Channel::ClientOpos, Direction::Down, quote_payload, 0);
        let quote = opos::decode_quote_qr(quote_payload)?;
        wallet.params.check_amount(quote.amount)?;
        let env = world.overhead.envelope_bytes;
        world.traffic.record(now, Channel::ClientChain, Direction::Up, &[0; VIEW_REQUEST_BYTES], env);
        Ok(PurchaseSession {
            quote,
            channel,
            stage: Stage::ReadTau,
            wake: now + wallet.link.transfer_time(VIEW_REQUEST_BYTES + env, Direction::Up),
            started: now,
            submitted: now,
            deadline: SimTime(u64::MAX),
            handle: None,
            phi: 0,
            depths: DepthVector::zeros(wallet.params.chains()),
            request_block: 0,
            bytes: (VIEW_REQUEST_BYTES + env) as u64,
        })
    }

    pub fn next_wake(&self) -> SimTime {
        self.wake
    }

    pub fn is_done(&self) -> bool {
        matches!(self.stage, Stage::Done(_))
    }

    pub fn quote(&self) -> &Quote {
        &self.quote
    }

    pub fn client_chain_bytes(&self) -> u64 {
        self.bytes
    }

    fn reply(&mut self, world: &mut World, wallet: &Wallet, payload: &[u8], next: Stage) {
        let env = world.overhead.envelope_bytes;
        world.traffic.record(world.now(), Channel::ClientChain, Direction::Down, payload, env);
        self.bytes += (payload.len() + env) as u64;
        self.wake = world.now() + wallet.link.transfer_time(payload.len() + env, Direction::Down);
        self.stage = next;
    }

    fn next_poll(&self, world: &World, after: SimTime) -> SimTime {
        let iv = world.private.profile().block_interval.0;
        SimTime((after.0 / iv + 1) * iv)
    }

    /// Advances the session; call when the world clock reaches `next_wake`.
    pub fn wake(&mut self, wallet: &mut Wallet, world: &mut World) {
        let stage = std::mem::replace(&mut self.stage, Stage::Poll);
        match stage {
            Stage::ReadTau => {
                let view = world
                    .private
                    .call_view(&self.channel.private, |c| ChannelView { tau: c.tau, maxima: c.revealed.maxima() })
                    .unwrap_or(ChannelView { tau: wallet.tau, maxima: wallet.maxima.clone() });
                let bytes = serde_json::to_vec(&view).expect("serializes");
                let next = if wallet.refresh_tau {
                    Stage::Submit { tau: view.tau, maxima: view.maxima }
                } else {
                    Stage::Submit { tau: wallet.tau, maxima: wallet.maxima.clone() }
                };
                self.reply(world, wallet, &bytes, next);
            }
            Stage::Submit { tau, maxima } => {
                let phi = match tau.checked_add(self.quote.amount) {
                    Some(p) => p,
                    None => return self.finish_now(Err(ClientError::Codec(CodecError::AmountOutOfRange { amount: Amount::MAX, max: wallet.params.max_amount() }))),
                };
                let depths = match hashchain::encode_amount(phi, &wallet.params) {
                    Ok(v) => v,
                    Err(e) => return self.finish_now(Err(e.into())),
                };
                let release = hashchain::release_for(&depths, &maxima, &wallet.secrets);
                let call = PrivateCall::RequestToken {
                    release,
                    eta: self.quote.eta,
                    amount: self.quote.amount,
                    opos_signature: self.quote.signature,
                    payoff_signature: wallet.sign_phi(&self.channel.public, phi),
                };
                let tx = world.private.tx(&wallet.auth, 0, TxKind::Call { to: self.channel.private, call });
                let size = serde_json::to_vec(&tx).expect("serializes").len() + world.overhead.envelope_bytes;
                let arrival = world.now() + wallet.link.transfer_time(size, Direction::Up);
                self.handle = Some(world.send_private(tx, &wallet.link, Channel::ClientChain));
                self.bytes += size as u64;
                self.phi = phi;
                self.depths = depths;
                self.submitted = arrival;
                self.deadline = world.now() + wallet.quorum_deadline;
                self.wake = self.next_poll(world, arrival);
                self.stage = Stage::Poll;
            }
            Stage::Poll => {
                let env = world.overhead.envelope_bytes;
                world.traffic.record(world.now(), Channel::ClientChain, Direction::Up, &[0; VIEW_REQUEST_BYTES], env);
                self.bytes += (VIEW_REQUEST_BYTES + env) as u64;
                let handle = self.handle.expect("submitted");
                let status = world.private.receipt(&handle).map(|r| (r.status.clone(), r.block));
                match status {
                    Some((TxStatus::Reverted(e), _)) => {
                        let err = match e {
                            Revert::Contract(c) => ClientError::Rejected(c),
                            other => ClientError::Reverted(other.to_string()),
                        };
                        let bytes = serde_json::to_vec(&err.to_string()).expect("serializes");
                        self.reply(world, wallet, &bytes, Stage::Respond(Err(err)));
                    }
                    Some((TxStatus::Success, block)) => {
                        self.request_block = block;
                        let (sigs, keys) = world
                            .private
                            .call_view(&self.channel.private, |c| (c.signatures_for(&self.quote.eta), c.signer_keys.clone()))
                            .expect("channel exists");
                        let bytes = serde_json::to_vec(&sigs).expect("serializes");
                        let valid = crate::signer::valid_signers(&sigs, &keys, &self.quote.eta, self.quote.amount);
                        if valid.len() >= wallet.threshold {
                            let chosen: Vec<TokenSignature> = valid
                                .iter()
                                .take(wallet.threshold)
                                .map(|i| {
                                    let s = sigs.iter().find(|(j, _)| j == i).expect("present").1;
                                    TokenSignature { signer: *i, signature: s }
                                })
                                .collect();
                            let token = PaymentToken { eta: self.quote.eta, amount: self.quote.amount, signatures: chosen };
                            self.reply(world, wallet, &bytes, Stage::Respond(Ok(token)));
                        } else {
                            self.schedule_poll_or_timeout(world, &bytes);
                        }
                    }
                    None => self.schedule_poll_or_timeout(world, b"null"),
                }
            }
            Stage::Respond(result) => {
                let result = match result {
                    Ok(_) if wallet.drop_token_response => Err(ClientError::ResponseLost),
                    Ok(token) => {
                        wallet.tau = self.phi;
                        wallet.maxima = wallet.maxima.max_with(&self.depths);
                        Ok(token)
                    }
                    Err(e) => Err(e),
                };
                self.stage = Stage::Done(result);
            }
            Stage::Done(r) => self.stage = Stage::Done(r),
        }
    }

    fn schedule_poll_or_timeout(&mut self, world: &mut World, response: &[u8]) {
        let env = world.overhead.envelope_bytes;
        world.traffic.record(world.now(), Channel::ClientChain, Direction::Down, response, env);
        self.bytes += (response.len() + env) as u64;
        let next = self.next_poll(world, world.now());
        if next > self.deadline {
            self.wake = self.deadline.max(world.now());
            self.stage = Stage::Respond(Err(ClientError::Timeout));
        } else {
            self.wake = next;
            self.stage = Stage::Poll;
        }
    }

    fn finish_now(&mut self, r: Result<PaymentToken, ClientError>) {
        self.stage = Stage::Done(r);
    }

    /// Consumes a finished session. The finish time is the session's last
    /// wake time.
    pub fn finish(self) -> Result<PurchaseOutcome, ClientError> {
        match self.stage {
            Stage::Done(Ok(token)) => Ok(PurchaseOutcome {
                token_qr: opos::encode_token_qr(&token),
                token,
                started: self.started,
                finished: self.wake,
                submitted: self.submitted,
                request_block: self.request_block,
                client_chain_bytes: self.bytes,
            }),
            Stage::Done(Err(e)) => Err(e),
            _ => panic!("session not finished"),
        }
    }
}
