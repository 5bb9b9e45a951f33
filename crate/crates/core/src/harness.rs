//! Scenario runner: wires merchant, terminals, signers and wallets over both
//! ledgers, runs purchase scripts and adversarial toggles, and checks the
//! global invariants and harm bounds.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::{self, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::client::{ClientError, PurchaseSession, Wallet, WalletSnapshot};
use crate::contracts::{PrivateCall, PrivateError, PrivateEvent, PublicCall, PublicError};
use crate::crypto::{self, Address, KeyPair, TransactionId};
use crate::hashchain::{self, ChannelParams, DepthVector, HashRelease};
use crate::ledger::{ChainProfile, FeeReport, TxKind, TxReceipt};
use crate::merchant::{ChannelAddresses, Claim, Merchant};
use crate::netsim::{self, CapacityRow, NetLink, OverheadModel};
use crate::opos::{self, Catalog, Opos, OposError, PaymentToken, TokenSignature};
use crate::signer::{SignerBehaviour, SignerNode};
use crate::sim::{Channel, ChannelStats, World};
use crate::time::SimTime;
use crate::Amount;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
    #[error("channel setup failed for wallet {wallet}: {reason}")]
    Setup { wallet: usize, reason: String },
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid(msg.into())
}

/// A named link preset or an explicit link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LinkSpec {
    Preset(String),
    Custom(NetLink),
}

impl LinkSpec {
    pub fn resolve(&self) -> Result<NetLink, HarnessError> {
        let link = match self {
            LinkSpec::Preset(name) => NetLink::preset(name).map_err(|e| invalid(e.to_string()))?,
            LinkSpec::Custom(l) => l.clone(),
        };
        link.validate().map_err(|e| invalid(format!("link {}: {e}", link.name)))?;
        Ok(link)
    }
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec::Preset("wifi".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Links {
    #[serde(default)]
    pub client: LinkSpec,
    #[serde(default = "local_link")]
    pub merchant: LinkSpec,
    #[serde(default)]
    pub signer: LinkSpec,
}

fn local_link() -> LinkSpec {
    LinkSpec::Preset("local".into())
}

impl Default for Links {
    fn default() -> Self {
        Links { client: LinkSpec::default(), merchant: local_link(), signer: LinkSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalletConfig {
    /// Catalog indices bought in order.
    #[serde(default)]
    pub purchases: Vec<usize>,
    #[serde(default, with = "crate::amount_serde::option")]
    pub deposit: Option<Amount>,
    pub link: Option<LinkSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackToggle {
    StealOposKey,
    StealClientAppState,
    CompromiseSigner(usize),
    CompromiseSealer,
    SniffSpoofQr,
    MitmBlockToken,
    MerchantOverclaimPayoff,
    ReplayToken,
    DoubleSpendVector,
    Overspend,
}

impl AttackToggle {
    /// Every toggle, with `N − M` compromised signers for the signer case.
    pub fn matrix(n: usize, m: usize) -> Vec<AttackToggle> {
        vec![
            AttackToggle::StealOposKey,
            AttackToggle::StealClientAppState,
            AttackToggle::CompromiseSigner(n.saturating_sub(m)),
            AttackToggle::CompromiseSealer,
            AttackToggle::SniffSpoofQr,
            AttackToggle::MitmBlockToken,
            AttackToggle::MerchantOverclaimPayoff,
            AttackToggle::ReplayToken,
            AttackToggle::DoubleSpendVector,
            AttackToggle::Overspend,
        ]
    }

    pub fn name(&self) -> String {
        match self {
            AttackToggle::CompromiseSigner(k) => format!("compromise_signer({k})"),
            other => serde_json::to_value(other).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        let s = s.trim();
        if let Some(k) = s.strip_prefix("compromise_signer").map(|r| r.trim_matches(|c| c == '(' || c == ')' || c == '=' || c == ':')) {
            let k = if k.is_empty() { 1 } else { k.parse().map_err(|_| invalid(format!("bad signer count in {s:?}")))? };
            return Ok(AttackToggle::CompromiseSigner(k));
        }
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| invalid(format!("unknown attack {s:?}")))
    }
}

impl fmt::Display for AttackToggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub params: ChannelParams,
    /// Default per-wallet deposit.
    #[serde(with = "crate::amount_serde")]
    pub deposit: Amount,
    pub catalog: Catalog,
    /// Token signers (`N`).
    pub signers: usize,
    /// Signatures per token (`M`).
    pub threshold: usize,
    #[serde(default = "ChainProfile::public_default")]
    pub public_chain: ChainProfile,
    #[serde(default = "ChainProfile::private_default")]
    pub private_chain: ChainProfile,
    #[serde(default)]
    pub links: Links,
    #[serde(default)]
    pub overhead: OverheadModel,
    #[serde(default)]
    pub wallets: Vec<WalletConfig>,
    /// Additional terminal keys registered in every private contract.
    #[serde(default)]
    pub extra_opos_keys: usize,
    #[serde(default = "one_sec", rename = "signer_poll_interval_s", with = "secs")]
    pub signer_poll_interval: SimTime,
    #[serde(default = "thirty_secs", rename = "quorum_deadline_s", with = "secs")]
    pub quorum_deadline: SimTime,
    /// Pause between a wallet's consecutive purchases.
    #[serde(default = "one_sec", rename = "think_time_s", with = "secs")]
    pub think_time: SimTime,
    #[serde(default = "week", rename = "refund_timeout_s", with = "secs")]
    pub refund_timeout: SimTime,
    pub attack: Option<AttackToggle>,
}

/// Durations in config files are written in seconds.
mod secs {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::time::SimTime;

    pub fn serialize<S: Serializer>(t: &SimTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(t.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SimTime, D::Error> {
        let v = f64::deserialize(d)?;
        if !v.is_finite() || v < 0.0 {
            return Err(serde::de::Error::custom("duration must be a non-negative number of seconds"));
        }
        Ok(SimTime::from_secs_f64(v))
    }
}

fn default_name() -> String {
    "scenario".into()
}

fn one_sec() -> SimTime {
    SimTime::from_secs(1)
}

fn thirty_secs() -> SimTime {
    SimTime::from_secs(30)
}

fn week() -> SimTime {
    SimTime::from_secs(7 * 24 * 3600)
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: ScenarioConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.params.validate().map_err(|e| invalid(format!("params: {e}")))?;
        self.catalog.validate(self.params.granularity).map_err(|e| invalid(e.to_string()))?;
        if self.threshold > self.signers {
            return Err(invalid(format!("threshold {} exceeds signer count {}", self.threshold, self.signers)));
        }
        if self.signers == 0 {
            return Err(invalid("at least one signer is required"));
        }
        for p in [&self.public_chain, &self.private_chain] {
            p.validate().map_err(|e| invalid(format!("chain {}: {e}", p.name)))?;
        }
        if self.signer_poll_interval == SimTime::ZERO {
            return Err(invalid("signer poll interval must be positive"));
        }
        if self.overhead.request_bits.is_nan() || self.overhead.request_bits <= 0.0 {
            return Err(invalid("request overhead must be positive"));
        }
        for spec in [&self.links.client, &self.links.merchant, &self.links.signer] {
            spec.resolve()?;
        }
        for (i, w) in self.wallets.iter().enumerate() {
            let deposit = w.deposit.unwrap_or(self.deposit);
            if deposit > self.params.max_amount() {
                return Err(invalid(format!("wallet {i}: deposit {deposit} exceeds channel maximum {}", self.params.max_amount())));
            }
            if deposit % self.params.granularity != 0 {
                return Err(invalid(format!("wallet {i}: deposit must be a multiple of the granularity")));
            }
            if let Some(&bad) = w.purchases.iter().find(|&&p| p >= self.catalog.len()) {
                return Err(invalid(format!("wallet {i}: no catalog item {bad}")));
            }
            if let Some(l) = &w.link {
                l.resolve()?;
            }
        }
        if let Some(AttackToggle::CompromiseSigner(k)) = self.attack {
            if k > self.signers {
                return Err(invalid(format!("cannot compromise {k} of {} signers", self.signers)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PurchaseRecord {
    pub wallet: usize,
    pub item: usize,
    #[serde(with = "crate::amount_serde")]
    pub amount: Amount,
    pub eta: Option<TransactionId>,
    pub outcome: String,
    pub vended: bool,
    pub started_ms: f64,
    pub latency_ms: f64,
    /// From the block holding the token request to the block completing the
    /// quorum, as recorded on the private ledger.
    pub quorum_delay_ms: Option<f64>,
    pub client_chain_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SettlementRecord {
    pub wallet: usize,
    #[serde(with = "crate::amount_serde")]
    pub deposit: Amount,
    #[serde(with = "crate::amount_serde")]
    pub tau: Amount,
    #[serde(with = "crate::amount_serde")]
    pub paid_out: Amount,
    #[serde(with = "crate::amount_serde")]
    pub refunded: Amount,
    #[serde(with = "crate::amount_serde")]
    pub vended_to_client: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackOutcome {
    pub toggle: String,
    #[serde(with = "crate::amount_serde")]
    pub harm: Amount,
    #[serde(with = "crate::amount_serde")]
    pub bound: Amount,
    /// Harm within bound and every scripted check held.
    pub bounded: bool,
    pub checks: Vec<InvariantCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeeSummary {
    pub public: FeeReport,
    pub private: FeeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub purchases: Vec<PurchaseRecord>,
    pub channels: BTreeMap<Channel, ChannelStats>,
    pub fees: FeeSummary,
    pub settlements: Vec<SettlementRecord>,
    pub invariants: Vec<InvariantCheck>,
    pub attack: Option<AttackOutcome>,
    pub capacity: Vec<CapacityRow>,
    pub finished_at_ms: f64,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|c| c.passed) && self.attack.as_ref().is_none_or(|a| a.bounded)
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> =
            self.invariants.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect();
        if let Some(a) = &self.attack {
            if a.harm > a.bound {
                out.push(format!("{}: harm {} exceeds bound {}", a.toggle, a.harm, a.bound));
            }
            out.extend(a.checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}: {}", a.toggle, c.name, c.detail)));
        }
        out
    }
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> InvariantCheck {
    InvariantCheck { name: name.into(), passed, detail: detail.into() }
}

struct Actor {
    wallet: Wallet,
    opos: Opos,
    channel: Option<ChannelAddresses>,
    deposit: Amount,
    script: VecDeque<usize>,
    session: Option<(PurchaseSession, usize)>,
    next_start: SimTime,
    done: usize,
    vended_to_client: Amount,
}

/// Everything an attack script can reach.
struct Run<'a> {
    cfg: &'a ScenarioConfig,
    world: World,
    merchant: Merchant,
    actors: Vec<Actor>,
    rng: ChaCha20Rng,
    records: Vec<PurchaseRecord>,
    attacker: KeyPair,
    /// Value the attacker walked away with (items or funds).
    attacker_gain: Amount,
    checks: Vec<InvariantCheck>,
}

/// A report plus the raw material behind it.
pub struct RunArtifacts {
    pub report: RunReport,
    /// Private-ledger events as JSON lines.
    pub event_log: String,
    pub wallets: Vec<WalletSnapshot>,
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunReport, HarnessError> {
    run_with_artifacts(cfg).map(|a| a.report)
}

pub fn run_with_artifacts(cfg: &ScenarioConfig) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut world = World::new(cfg.public_chain.clone(), cfg.private_chain.clone(), cfg.overhead);
    world.traffic.capture = true;
    let signer_link = cfg.links.signer.resolve()?;
    for i in 0..cfg.signers {
        let mut node = SignerNode::new(i as u32, KeyPair::generate(&mut rng), signer_link.clone());
        node.poll_interval = cfg.signer_poll_interval;
        world.add_signer(node);
    }
    let signer_keys = world.signer_addresses();

    let opos_keys: Vec<KeyPair> = (0..cfg.wallets.len().max(1)).map(|_| KeyPair::generate(&mut rng)).collect();
    let mut registered: Vec<Address> = opos_keys.iter().map(KeyPair::address).collect();
    registered.extend((0..cfg.extra_opos_keys).map(|i| {
        let mut a = [0u8; 20];
        a[..8].copy_from_slice(&(i as u64).to_be_bytes());
        a[8..16].copy_from_slice(&rng.gen::<u64>().to_be_bytes());
        Address(a)
    }));
    let mut merchant = Merchant::new(KeyPair::generate(&mut rng), cfg.params, registered, signer_keys.clone(), cfg.threshold);
    merchant.link = cfg.links.merchant.resolve()?;
    merchant.refund_timeout = cfg.refund_timeout;

    let mut actors = Vec::new();
    for (i, wc) in cfg.wallets.iter().enumerate() {
        let link = wc.link.as_ref().unwrap_or(&cfg.links.client).resolve()?;
        let mut wallet = Wallet::new(&mut rng, cfg.params, link);
        wallet.quorum_deadline = cfg.quorum_deadline;
        let deposit = wc.deposit.unwrap_or(cfg.deposit);
        world.public.credit(wallet.funds_address(), deposit);
        let opos = Opos::new(opos_keys[i].clone(), signer_keys.clone(), cfg.threshold, cfg.catalog.clone());
        actors.push(Actor {
            wallet,
            opos,
            channel: None,
            deposit,
            script: wc.purchases.iter().copied().collect(),
            session: None,
            next_start: SimTime::ZERO,
            done: 0,
            vended_to_client: 0,
        });
    }
    let attacker = KeyPair::generate(&mut rng);

    let mut run = Run { cfg, world, merchant, actors, rng, records: Vec::new(), attacker, attacker_gain: 0, checks: Vec::new() };
    run.prepare_attack();
    for i in 0..run.actors.len() {
        let a = &mut run.actors[i];
        let ch = a
            .wallet
            .initiate_contract(&mut run.world, &run.merchant, a.deposit)
            .map_err(|e| HarnessError::Setup { wallet: i, reason: e.to_string() })?;
        a.channel = Some(ch);
    }
    let start = run.world.now();
    for a in &mut run.actors {
        a.next_start = start;
    }
    run.purchase_loop();
    run.post_purchase_attack();
    let settlements = run.settle();
    let event_log = run.world.private.export_log();
    let wallets = run.actors.iter().map(|a| a.wallet.snapshot()).collect();
    Ok(RunArtifacts { report: run.report(settlements), event_log, wallets })
}

impl Run<'_> {
    fn prepare_attack(&mut self) {
        match self.cfg.attack {
            Some(AttackToggle::CompromiseSigner(k)) => {
                for (i, n) in self.world.signers.iter_mut().take(k).enumerate() {
                    n.behaviour = if i % 2 == 0 { SignerBehaviour::Abstain } else { SignerBehaviour::WrongTuple };
                }
            }
            Some(AttackToggle::CompromiseSealer) => {
                let sealers = self.world.private.profile().sealers;
                // One of q sealers; with a single sealer the chain would halt.
                if sealers > 1 {
                    self.world.private.set_sealer_compromised(0, true);
                }
            }
            _ => {}
        }
    }

    fn victim_hook(&self, wallet: usize, purchase: usize) -> bool {
        wallet == 0 && purchase == 0
    }

    fn purchase_loop(&mut self) {
        loop {
            let next = self
                .actors
                .iter()
                .enumerate()
                .filter_map(|(i, a)| match &a.session {
                    Some((s, _)) => Some((s.next_wake(), i)),
                    None if !a.script.is_empty() => Some((a.next_start, i)),
                    None => None,
                })
                .min();
            let Some((t, i)) = next else { break };
            self.world.run_until(t);
            if self.actors[i].session.is_some() {
                self.wake_session(i);
            } else {
                self.start_purchase(i);
            }
        }
    }

    fn start_purchase(&mut self, i: usize) {
        let item = self.actors[i].script.pop_front().expect("script not empty");
        let hooked = self.victim_hook(i, self.actors[i].done);
        let a = &mut self.actors[i];
        let quote = a.opos.begin_purchase(item, &mut self.rng).expect("terminal idle");
        let mut payload = opos::encode_quote_qr(&quote).expect("catalog validated");
        if hooked && self.cfg.attack == Some(AttackToggle::SniffSpoofQr) {
            // The spoofed quote lowers the price and re-signs with a key the
            // contract does not know.
            let spoof = opos::Quote {
                amount: self.cfg.params.granularity,
                signature: crypto::sign(&self.attacker, &crypto::serialize_signed_tuple(&quote.eta, self.cfg.params.granularity)),
                ..quote.clone()
            };
            let spoofed = opos::encode_quote_qr(&spoof).expect("valid");
            let r = a.wallet.purchase(&mut self.world, &spoofed);
            self.checks.push(check(
                "spoofed quote rejected",
                r == Err(ClientError::Rejected(PrivateError::UnknownOPOS)),
                format!("{r:?}").chars().take(120).collect::<String>(),
            ));
            payload = opos::encode_quote_qr(&quote).expect("valid");
        }
        if hooked && self.cfg.attack == Some(AttackToggle::MitmBlockToken) {
            a.wallet.drop_token_response = true;
        }
        match PurchaseSession::start(&a.wallet, &mut self.world, &payload) {
            Ok(s) => a.session = Some((s, item)),
            Err(e) => {
                a.opos.cancel();
                let now = self.world.now();
                self.records.push(PurchaseRecord {
                    wallet: i,
                    item,
                    amount: quote.amount,
                    eta: Some(quote.eta),
                    outcome: e.to_string(),
                    vended: false,
                    started_ms: now.as_millis_f64(),
                    latency_ms: 0.0,
                    quorum_delay_ms: None,
                    client_chain_bytes: 0,
                });
                a.done += 1;
                a.next_start = now + self.cfg.think_time;
            }
        }
    }

    fn wake_session(&mut self, i: usize) {
        let (mut session, item) = self.actors[i].session.take().expect("active");
        session.wake(&mut self.actors[i].wallet, &mut self.world);
        if !session.is_done() {
            self.actors[i].session = Some((session, item));
            return;
        }
        let quote = session.quote().clone();
        let bytes = session.client_chain_bytes();
        let hooked = self.victim_hook(i, self.actors[i].done);
        let now = self.world.now();
        let result = session.finish();
        let mut record = PurchaseRecord {
            wallet: i,
            item,
            amount: quote.amount,
            eta: Some(quote.eta),
            outcome: String::new(),
            vended: false,
            started_ms: 0.0,
            latency_ms: 0.0,
            quorum_delay_ms: None,
            client_chain_bytes: bytes,
        };
        let a = &mut self.actors[i];
        a.wallet.drop_token_response = false;
        match result {
            Ok(out) => {
                record.started_ms = out.started.as_millis_f64();
                record.latency_ms = out.latency().as_millis_f64();
                let ch = a.channel.expect("open");
                record.quorum_delay_ms = quorum_delay(&self.world, &ch.private, &quote.eta, quote.amount, self.cfg.threshold)
                    .map(SimTime::as_millis_f64);
                self.world.traffic.record(now, Channel::ClientOpos, crate::netsim::Direction::Up, &out.token_qr, 0);
                if hooked && self.cfg.attack == Some(AttackToggle::SniffSpoofQr) {
                    // The sniffer presents the copied token first.
                    let vend = a.opos.read_token_qr(&out.token_qr).and_then(|t| a.opos.verify_token(&t));
                    if let Ok(v) = vend {
                        self.attacker_gain += v.amount;
                    }
                }
                let vend = a.opos.read_token_qr(&out.token_qr).and_then(|t| a.opos.verify_token(&t));
                match vend {
                    Ok(v) => {
                        a.vended_to_client += v.amount;
                        record.vended = true;
                        record.outcome = "vended".into();
                    }
                    Err(e) => {
                        a.opos.cancel();
                        record.outcome = format!("token refused: {e}");
                    }
                }
            }
            Err(e) => {
                a.opos.cancel();
                record.started_ms = now.as_millis_f64();
                record.outcome = e.to_string();
            }
        }
        a.done += 1;
        a.next_start = now + self.cfg.think_time;
        self.records.push(record);
    }

    fn send_private(&mut self, key: &KeyPair, to: Address, call: PrivateCall) -> TxReceipt<crate::contracts::PrivateContract> {
        let tx = self.world.private.tx(key, 0, TxKind::Call { to, call });
        let h = self.world.send_private(tx, &NetLink::local(), Channel::ClientChain);
        let deadline = self.world.now() + SimTime::from_secs(120);
        self.world.wait_private(&h, deadline).expect("private chain seals")
    }

    fn send_public(&mut self, key: &KeyPair, value: Amount, to: Address, call: PublicCall) -> TxReceipt<crate::contracts::PublicContract> {
        let tx = self.world.public.tx(key, value, TxKind::Call { to, call });
        let h = self.world.send_public(tx, &NetLink::local(), Channel::ClientChain);
        let deadline = self.world.now() + SimTime::from_secs(600);
        self.world.wait_public(&h, deadline).expect("public chain seals")
    }

    fn pseudo_balance(&self, i: usize) -> Amount {
        let ch = self.actors[i].channel.expect("open");
        self.world.private.call_view(&ch.private, |c| c.pseudo_balance).unwrap_or(0)
    }

    fn post_purchase_attack(&mut self) {
        let Some(attack) = self.cfg.attack else { return };
        if self.actors.is_empty() {
            return;
        }
        let ch = self.actors[0].channel.expect("open");
        let g = self.cfg.params.granularity;
        let opos_key = self.actors[0].opos.key().clone();
        let attacker = self.attacker.clone();
        match attack {
            AttackToggle::StealOposKey => {
                // A cloned terminal can sign quotes, but only the client can
                // turn a quote into a token request, and only signers can
                // turn that into a token.
                let eta = TransactionId::random(&mut self.rng);
                let quote_sig = crypto::sign(&opos_key, &crypto::serialize_signed_tuple(&eta, g));
                let maxima = self.actors[0].wallet.maxima.clone();
                let r = self.send_private(
                    &attacker,
                    ch.private,
                    PrivateCall::RequestToken {
                        release: HashRelease::empty(maxima),
                        eta,
                        amount: g,
                        opos_signature: quote_sig,
                        payoff_signature: crypto::sign(&attacker, &[0]),
                    },
                );
                self.checks.push(check("request with stolen terminal key", r.contract_error() == Some(&PrivateError::NotClient), format!("{:?}", r.status)));
                let r = self.send_public(&attacker, 0, ch.public, PublicCall::Refund);
                self.checks.push(check("refund by terminal thief", r.contract_error() == Some(&PublicError::NotClient), format!("{:?}", r.status)));
                // A token forged with the thief's own signatures.
                let mut fake = self.actors[0].opos.clone();
                let q = fake.begin_purchase(0, &mut self.rng).expect("idle");
                let tuple = crypto::serialize_signed_tuple(&q.eta, q.amount);
                let forged = PaymentToken {
                    eta: q.eta,
                    amount: q.amount,
                    signatures: (0..self.cfg.threshold as u32)
                        .map(|i| TokenSignature { signer: i, signature: crypto::sign(&attacker, &tuple) })
                        .collect(),
                };
                let v = fake.verify_token(&forged);
                self.checks.push(check("forged token refused", matches!(v, Err(OposError::InsufficientSignatures { .. })), format!("{v:?}")));
            }
            AttackToggle::StealClientAppState => {
                // Heads and the private-chain key, without seeds or funds key.
                let stolen_auth = self.actors[0].wallet.auth_key().clone();
                let heads = self.actors[0].wallet.heads().clone();
                let tau = self.world.private.call_view(&ch.private, |c| c.tau).unwrap_or(0);
                let eta = TransactionId::random(&mut self.rng);
                let opos_sig = crypto::sign(&opos_key, &crypto::serialize_signed_tuple(&eta, g));
                let depths = hashchain::encode_amount(tau + g, &self.cfg.params).expect("in range");
                // Best effort without seeds: replay heads as preimages.
                let release = HashRelease {
                    values: depths.0.iter().enumerate().map(|(i, &d)| (d > 0).then(|| heads.0[i])).collect(),
                    depths,
                };
                let r = self.send_private(
                    &stolen_auth,
                    ch.private,
                    PrivateCall::RequestToken {
                        release,
                        eta,
                        amount: g,
                        opos_signature: opos_sig,
                        payoff_signature: crypto::sign(&stolen_auth, &crypto::payoff_message(&ch.public, tau + g)),
                    },
                );
                let ok = matches!(r.contract_error(), Some(PrivateError::BadHashProof) | Some(PrivateError::BadPayoffSignature));
                self.checks.push(check("request without seeds", ok, format!("{:?}", r.status)));
                let r = self.send_public(&stolen_auth, 0, ch.public, PublicCall::Refund);
                self.checks.push(check("refund with auth key", r.contract_error() == Some(&PublicError::NotClient), format!("{:?}", r.status)));
            }
            AttackToggle::MerchantOverclaimPayoff => {
                let r = self.merchant.payoff(&mut self.world, &ch, Claim::Overclaim);
                let tau = self.world.private.call_view(&ch.private, |c| c.tau).unwrap_or(0);
                let claimable = self.world.private.call_view(&ch.private, |c| c.revealed.maxima()).ok();
                let over = claimable.and_then(|v| hashchain::decode_amount(&v, &self.cfg.params).ok()).unwrap_or(0);
                let detail = format!("claim {over} against signed {tau}: {:?}", r.as_ref().map(|r| r.status.clone()));
                if over > tau {
                    let rejected = matches!(&r, Ok(rc) if rc.contract_error() == Some(&PublicError::BadPayoffSignature));
                    self.checks.push(check("overclaim rejected", rejected, detail));
                } else {
                    self.checks.push(check("overclaim rejected", true, format!("revealed hashes support no overclaim; {detail}")));
                }
            }
            AttackToggle::ReplayToken => {
                // Reuse the first vended token for a fresh quote.
                let first = self.records.iter().find(|r| r.wallet == 0 && r.vended).and_then(|r| r.eta);
                let a = &mut self.actors[0];
                if let Some(old_eta) = first {
                    let sigs = self.world.private.call_view(&ch.private, |c| c.signatures_for(&old_eta)).unwrap_or_default();
                    let amount = self.world.private.call_view(&ch.private, |c| c.payments.get(&old_eta).copied()).ok().flatten().unwrap_or(0);
                    let token = PaymentToken {
                        eta: old_eta,
                        amount,
                        signatures: sigs.into_iter().take(self.cfg.threshold).map(|(signer, signature)| TokenSignature { signer, signature }).collect(),
                    };
                    a.opos.begin_purchase(0, &mut self.rng).expect("idle");
                    let v = a.opos.verify_token(&token);
                    if let Ok(v) = &v {
                        self.attacker_gain += v.amount;
                    }
                    a.opos.cancel();
                    self.checks.push(check("replayed token refused", v == Err(OposError::TokenMismatch), format!("{v:?}")));
                    // Same η pushed through the contract again.
                    let tau = self.world.private.call_view(&ch.private, |c| c.tau).unwrap_or(0);
                    let r = self.client_request(0, old_eta, amount, tau + amount, None);
                    self.checks.push(check("replayed transaction id", r == Some(PrivateError::ReplayedTransactionId), format!("{r:?}")));
                } else {
                    self.checks.push(check("replayed token refused", false, "no vended purchase to replay"));
                }
            }
            AttackToggle::DoubleSpendVector => {
                let tau = self.world.private.call_view(&ch.private, |c| c.tau).unwrap_or(0);
                let amount = self.cfg.catalog.items[0].price;
                let eta = TransactionId::random(&mut self.rng);
                let r = self.client_request(0, eta, amount, tau, None);
                self.checks.push(check("stale depth vector", r == Some(PrivateError::PaymentMismatch), format!("{r:?}")));
            }
            AttackToggle::Overspend => {
                let pseudo = self.pseudo_balance(0);
                let tau = self.world.private.call_view(&ch.private, |c| c.tau).unwrap_or(0);
                let amount = pseudo + g;
                let eta = TransactionId::random(&mut self.rng);
                let r = if hashchain::encode_amount(tau + amount, &self.cfg.params).is_ok() {
                    self.client_request(0, eta, amount, tau + amount, None)
                } else {
                    // Unencodable: the vector can only claim something else.
                    self.client_request(0, eta, amount, tau, None)
                };
                let ok = matches!(r, Some(PrivateError::InsufficientBalance) | Some(PrivateError::PaymentMismatch));
                self.checks.push(check("overspend rejected", ok, format!("{r:?}")));
            }
            _ => {}
        }
    }

    /// Submits a token request as wallet `i` claiming cumulative `phi`, with
    /// a correctly signed quote. Returns the contract error, if any.
    fn client_request(&mut self, i: usize, eta: TransactionId, amount: Amount, phi: Amount, sig_amount: Option<Amount>) -> Option<PrivateError> {
        let ch = self.actors[i].channel.expect("open");
        let w = &self.actors[i].wallet;
        let opos_sig = crypto::sign(self.actors[i].opos.key(), &crypto::serialize_signed_tuple(&eta, amount));
        let depths = hashchain::encode_amount(phi, &self.cfg.params).unwrap_or_else(|_| DepthVector::zeros(self.cfg.params.chains()));
        let maxima = self.world.private.call_view(&ch.private, |c| c.revealed.maxima()).expect("open");
        let release = w.release(&depths, &maxima);
        let call = PrivateCall::RequestToken {
            release,
            eta,
            amount,
            opos_signature: opos_sig,
            payoff_signature: w.sign_phi(&ch.public, sig_amount.unwrap_or(phi)),
        };
        let key = w.auth_key().clone();
        let r = self.send_private(&key, ch.private, call);
        r.contract_error().cloned()
    }

    fn settle(&mut self) -> Vec<SettlementRecord> {
        let mut out = Vec::new();
        for i in 0..self.actors.len() {
            let ch = self.actors[i].channel.expect("open");
            let tau = self.world.private.call_view(&ch.private, |c| c.tau).unwrap_or(0);
            if tau > 0 {
                let r = self.merchant.payoff(&mut self.world, &ch, Claim::Signed);
                let ok = matches!(&r, Ok(rc) if rc.succeeded());
                self.checks.push(check(&format!("wallet {i} payoff"), ok, format!("{:?}", r.map(|r| r.status))));
            } else {
                // No payoff to unlock the refund: wait out the timeout.
                let deadline = self.world.public.call_view(&ch.public, |c| c.refund_deadline).unwrap_or(SimTime::ZERO);
                if deadline > self.world.now() {
                    self.world.run_until(deadline);
                }
            }
            let before = self.world.public.balance(&self.actors[i].wallet.funds_address());
            let patience = self.merchant.patience;
            let r = self.actors[i].wallet.request_refund(&mut self.world, patience);
            self.checks.push(check(&format!("wallet {i} refund"), r.is_ok(), format!("{:?}", r.as_ref().map(|r| r.status.clone()))));
            let refund = self.world.public.balance(&self.actors[i].wallet.funds_address()) - before;
            let (deposit, paid_out, refunded) =
                self.world.public.call_view(&ch.public, |c| (c.deposit, c.paid_out, c.refunded)).expect("open");
            debug_assert_eq!(refund, refunded);
            out.push(SettlementRecord { wallet: i, deposit, tau, paid_out, refunded, vended_to_client: self.actors[i].vended_to_client });
        }
        out
    }

    fn harm(&self, settlements: &[SettlementRecord]) -> Amount {
        // Attacker takings, client value lost, merchant goods given away.
        let attacker_funds = self.world.public.balance(&self.attacker.address());
        let client_loss: Amount = settlements
            .iter()
            .map(|s| s.deposit.saturating_sub(s.refunded).saturating_sub(s.vended_to_client))
            .sum();
        let vended: Amount = self.actors.iter().map(|a| a.opos.vends().iter().map(|v| v.amount).sum::<Amount>()).sum();
        let paid: Amount = settlements.iter().map(|s| s.paid_out).sum();
        let merchant_loss = vended.saturating_sub(paid);
        attacker_funds + client_loss + merchant_loss.max(self.attacker_gain.saturating_sub(client_loss))
    }

    fn report(mut self, settlements: Vec<SettlementRecord>) -> RunReport {
        let mut inv = Vec::new();
        let violations = self.world.violations();
        inv.push(check("contract transitions", violations.is_empty(), violations.join("; ")));
        for s in &settlements {
            inv.push(check(
                &format!("wallet {} conservation", s.wallet),
                s.paid_out + s.refunded == s.deposit && s.paid_out == s.tau,
                format!("deposit {} paid out {} refunded {} tau {}", s.deposit, s.paid_out, s.refunded, s.tau),
            ));
        }
        for a in &self.actors {
            let ch = a.channel.expect("open");
            let (tau, pseudo, initial, payments) = self
                .world
                .private
                .call_view(&ch.private, |c| (c.tau, c.pseudo_balance, c.initial_deposit, c.payments.clone()))
                .expect("open");
            inv.push(check("mirror balance", tau + pseudo == initial, format!("tau {tau} + pseudo {pseudo} vs {initial}")));
            let sum: Amount = payments.values().sum();
            inv.push(check("payments sum to tau", sum == tau, format!("{sum} vs {tau}")));
            let events = self
                .world
                .private
                .log()
                .iter()
                .filter(|e| e.contract == ch.private && matches!(e.event, PrivateEvent::TokenRequested { .. }))
                .count();
            inv.push(check("one token event per payment", events == payments.len(), format!("{events} events, {} payments", payments.len())));
            let leaked = self.world.traffic.leaked_any(&a.wallet.secret_material());
            inv.push(check("no secret on the wire", leaked.is_empty(), format!("{leaked:?}")));
        }
        // Censoring sealers may push a signature one block later.
        if self.cfg.attack != Some(AttackToggle::CompromiseSealer) {
            let bound = self.cfg.signer_poll_interval + self.world.private.profile().block_interval;
            let worst = self.records.iter().filter_map(|r| r.quorum_delay_ms).fold(0.0f64, f64::max);
            inv.push(check(
                "quorum delay bound",
                worst <= bound.as_millis_f64(),
                format!("worst {worst} ms, bound {} ms", bound.as_millis_f64()),
            ));
        }
        let total_supply_ok = self.world.public.balance(&self.merchant.address())
            == settlements.iter().map(|s| s.paid_out).sum::<Amount>();
        inv.push(check("merchant received payoffs", total_supply_ok, ""));

        let attack = self.cfg.attack.map(|t| {
            let harm = self.harm(&settlements);
            let max_price = self.cfg.catalog.items.iter().map(|i| i.price).max().unwrap_or(0);
            let mut checks = std::mem::take(&mut self.checks);
            let bound = match t {
                // What the mirror still holds when the state is taken.
                AttackToggle::StealClientAppState => settlements.first().map_or(0, |st| st.deposit - st.tau),
                AttackToggle::SniffSpoofQr | AttackToggle::MitmBlockToken => max_price,
                _ => 0,
            };
            let all_vended = self.records.iter().all(|r| r.vended);
            match t {
                AttackToggle::CompromiseSigner(k) => {
                    let vended = self.records.iter().filter(|r| r.vended).count();
                    let tolerated = self.cfg.signers - self.cfg.threshold;
                    checks.push(check(
                        "liveness",
                        all_vended,
                        format!("{vended} of {} vended with {k} compromised, {tolerated} tolerated", self.records.len()),
                    ));
                }
                AttackToggle::CompromiseSealer => {
                    let vended = self.records.iter().filter(|r| r.vended).count();
                    checks.push(check("liveness", all_vended, format!("{vended} of {} vended", self.records.len())));
                    let censored = self.world.private.blocks().iter().filter(|b| b.censored).count();
                    let expected = self.world.private.profile().sealers > 1;
                    checks.push(check("censored blocks observed", !expected || censored > 0, format!("{censored}")));
                }
                AttackToggle::MitmBlockToken => {
                    let lost = self.records.iter().filter(|r| r.outcome == ClientError::ResponseLost.to_string()).count();
                    checks.push(check("one response blocked", lost <= 1, format!("{lost}")));
                }
                _ => {}
            }
            let bounded = harm <= bound && checks.iter().all(|c| c.passed);
            AttackOutcome { toggle: t.name(), harm, bound, bounded, checks }
        });
        if attack.is_none() {
            inv.append(&mut self.checks);
        }

        let tb = self.world.private.profile().block_interval.as_secs_f64();
        RunReport {
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            purchases: self.records,
            channels: self.world.traffic.snapshot(),
            fees: FeeSummary { public: crate::sim::fee_report(&self.world.public), private: crate::sim::fee_report(&self.world.private) },
            settlements,
            invariants: inv,
            attack,
            capacity: netsim::capacity_table(&[10.0, 50.0, 100.0, 200.0], self.cfg.overhead.request_bits, tb),
            finished_at_ms: self.world.now().as_millis_f64(),
        }
    }
}

/// Time from the block that recorded the token request to the block that
/// stored the `m`-th valid signature.
pub fn quorum_delay(world: &World, private: &Address, eta: &TransactionId, amount: Amount, m: usize) -> Option<SimTime> {
    let log = world.private.log();
    let request = log.iter().find(|e| {
        e.contract == *private && matches!(e.event, PrivateEvent::TokenRequested { eta: x, amount: a } if x == *eta && a == amount)
    })?;
    let mut stored = log
        .iter()
        .filter(|e| e.contract == *private && matches!(e.event, PrivateEvent::SignatureStored { eta: x, .. } if x == *eta))
        .map(|e| e.block);
    let quorum_block = if m == 0 { request.block } else { stored.nth(m - 1)? };
    let ts = |b: u64| world.private.blocks()[b as usize - 1].timestamp;
    Some(ts(quorum_block) - ts(request.block))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixRow {
    pub toggle: String,
    pub seeds: Vec<u64>,
    #[serde(with = "crate::amount_serde")]
    pub max_harm: Amount,
    #[serde(with = "crate::amount_serde")]
    pub bound: Amount,
    pub passed: bool,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixReport {
    pub scenario: String,
    pub rows: Vec<MatrixRow>,
}

impl MatrixReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

/// Runs every attack toggle against `base` for each seed.
pub fn run_attack_matrix(base: &ScenarioConfig, seeds: &[u64]) -> Result<MatrixReport, HarnessError> {
    base.validate()?;
    if base.wallets.first().is_none_or(|w| w.purchases.is_empty()) {
        return Err(invalid("the attack matrix needs a first wallet with at least one purchase"));
    }
    let mut rows = Vec::new();
    for toggle in AttackToggle::matrix(base.signers, base.threshold) {
        let mut row = MatrixRow { toggle: toggle.name(), seeds: seeds.to_vec(), max_harm: 0, bound: 0, passed: true, failures: Vec::new() };
        for &seed in seeds {
            let cfg = ScenarioConfig { seed, attack: Some(toggle), ..base.clone() };
            let report = run(&cfg)?;
            let outcome = report.attack.as_ref().expect("attack set");
            row.max_harm = row.max_harm.max(outcome.harm);
            row.bound = outcome.bound;
            if !report.passed() {
                row.passed = false;
                row.failures.extend(report.failures().into_iter().map(|f| format!("seed {seed}: {f}")));
            }
        }
        rows.push(row);
    }
    Ok(MatrixReport { scenario: base.name.clone(), rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// One JSON document.
    Json,
    /// One JSON record per line.
    Jsonl,
    /// Human-readable summary.
    Text,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line<'a> {
    Header { scenario: &'a str, seed: u64, passed: bool, finished_at_ms: f64 },
    Purchase(&'a PurchaseRecord),
    Channel { channel: Channel, #[serde(flatten)] stats: &'a ChannelStats },
    Fees { chain: &'static str, #[serde(flatten)] report: &'a FeeReport },
    Settlement(&'a SettlementRecord),
    Invariant(&'a InvariantCheck),
    Attack(&'a AttackOutcome),
    Capacity(&'a CapacityRow),
}

pub fn report_metrics(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ReportFormat::Jsonl => {
            let mut lines = vec![Line::Header {
                scenario: &report.scenario,
                seed: report.seed,
                passed: report.passed(),
                finished_at_ms: report.finished_at_ms,
            }];
            if !report.purchases.is_empty() {
                lines.extend(report.purchases.iter().map(Line::Purchase));
                lines.extend(report.channels.iter().map(|(c, s)| Line::Channel { channel: *c, stats: s }));
                lines.push(Line::Fees { chain: "public", report: &report.fees.public });
                lines.push(Line::Fees { chain: "private", report: &report.fees.private });
                lines.extend(report.settlements.iter().map(Line::Settlement));
                lines.extend(report.invariants.iter().map(Line::Invariant));
                lines.extend(report.attack.iter().map(Line::Attack));
                lines.extend(report.capacity.iter().map(Line::Capacity));
            }
            lines.iter().map(|l| serde_json::to_string(l).expect("serializes") + "\n").collect()
        }
        ReportFormat::Text => text_summary(report),
    }
}

fn text_summary(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario {} (seed {}): {}", r.scenario, r.seed, if r.passed() { "PASS" } else { "FAIL" });
    if r.purchases.is_empty() {
        return s;
    }
    let _ = writeln!(s, "\npurchases");
    for p in &r.purchases {
        let _ = writeln!(
            s,
            "  wallet {} item {} amount {:>24}  {:>9.1} ms  {:>6} B  {}",
            p.wallet, p.item, p.amount, p.latency_ms, p.client_chain_bytes, p.outcome
        );
    }
    let _ = writeln!(s, "\ntraffic (bytes up / down)");
    for (c, st) in &r.channels {
        let _ = writeln!(s, "  {:<16} {:>10} / {:<10} {} msgs", format!("{c:?}"), st.bytes_up, st.bytes_down, st.messages);
    }
    for (name, f) in [("public", &r.fees.public), ("private", &r.fees.private)] {
        let _ = writeln!(s, "\n{name} chain gas");
        for (op, fee) in &f.per_op {
            let _ = writeln!(s, "  {op:<18} x{:<3} {:>10} gas  {:>22} fee", fee.count, fee.gas, fee.fee);
        }
        let _ = writeln!(s, "  {:<18}      {:>10} gas  {:>22} fee", "total", f.total_gas, f.total_fee);
    }
    let _ = writeln!(s, "\nsettlement");
    for st in &r.settlements {
        let _ = writeln!(s, "  wallet {}: deposit {} tau {} paid out {} refunded {}", st.wallet, st.deposit, st.tau, st.paid_out, st.refunded);
    }
    let _ = writeln!(s, "\nchecks");
    for c in &r.invariants {
        let _ = writeln!(s, "  [{}] {}{}", if c.passed { "ok" } else { "FAIL" }, c.name, if c.passed { String::new() } else { format!(": {}", c.detail) });
    }
    if let Some(a) = &r.attack {
        let _ = writeln!(s, "\nattack {}: harm {} bound {} -> {}", a.toggle, a.harm, a.bound, if a.bounded { "bounded" } else { "EXCEEDED" });
        for c in &a.checks {
            let _ = writeln!(s, "  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
        }
    }
    let _ = writeln!(s, "\ncapacity (signer channel)");
    for row in &r.capacity {
        let _ = writeln!(s, "  {:>6} Mbps -> {:>6} concurrent requests", row.bandwidth_mbps, row.max_requests);
    }
    s
}

pub fn matrix_text(m: &MatrixReport) -> String {
    let mut s = format!("attack matrix for {}: {}\n", m.scenario, if m.passed() { "PASS" } else { "FAIL" });
    for r in &m.rows {
        let _ = writeln!(s, "  {:<28} harm <= {:<24} bound {:<24} {}", r.toggle, r.max_harm, r.bound, if r.passed { "ok" } else { "FAIL" });
        for f in &r.failures {
            let _ = writeln!(s, "      {f}");
        }
    }
    s
}

/// The three-purchase scenario shipped with the `demo` command.
pub const DEMO_SCENARIO: &str = include_str!("../scenarios/demo.toml");
