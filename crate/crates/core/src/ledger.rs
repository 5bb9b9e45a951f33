//! Simulated blockchain hosting contract state machines.
//!
//! A [`LedgerSim`] seals a block every `block_interval` of simulated time and
//! executes the pending transactions in submission order. Each transaction
//! runs against a copy of the contract state and is committed only on
//! success, so a revert never mutates anything. Gas is taken from a fixed
//! per-operation schedule rather than metered opcode by opcode.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::crypto::{self, Address, Digest, KeyPair, Signature};
use crate::time::SimTime;
use crate::Amount;

/// Operation name used for contract creation in gas schedules.
pub const DEPLOY_OP: &str = "deploy";

/// A state machine that can be hosted on a [`LedgerSim`].
pub trait Contract: Clone + Serialize + DeserializeOwned {
    type Call: Clone + fmt::Debug + Serialize + DeserializeOwned;
    type Error: Clone + fmt::Debug + fmt::Display + PartialEq + Serialize;
    type Event: Clone + fmt::Debug + PartialEq + Serialize;

    /// Gas schedule key of a call.
    fn call_name(call: &Self::Call) -> &'static str;

    fn event_name(event: &Self::Event) -> &'static str;

    fn on_deploy(&mut self, _ctx: &mut ExecContext<Self::Event>) -> Result<(), Self::Error> {
        Ok(())
    }

    fn execute(&mut self, ctx: &mut ExecContext<Self::Event>, call: &Self::Call) -> Result<(), Self::Error>;

    /// Checked after every committed transaction; `before` is `None` on
    /// deployment. A failure is recorded as an invariant violation.
    fn check_transition(_before: Option<&Self>, _after: &Self) -> Result<(), String> {
        Ok(())
    }
}

/// Execution environment handed to a contract.
#[derive(Debug)]
pub struct ExecContext<E> {
    pub caller: Address,
    /// Value attached to the call, already credited to the contract.
    pub value: Amount,
    pub now: SimTime,
    pub block: u64,
    pub this: Address,
    /// Contract balance including `value`.
    pub balance: Amount,
    events: Vec<E>,
    transfers: Vec<(Address, Amount)>,
}

impl<E> ExecContext<E> {
    pub fn emit(&mut self, event: E) {
        self.events.push(event);
    }

    /// Queues a payment out of the contract's balance.
    pub fn transfer(&mut self, to: Address, amount: Amount) {
        if amount > 0 {
            self.transfers.push((to, amount));
        }
    }

    fn outgoing(&self) -> Amount {
        self.transfers.iter().map(|(_, a)| a).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainProfile {
    pub name: String,
    pub block_interval: SimTime,
    pub confirmation_blocks: u64,
    pub gas_schedule: BTreeMap<String, u64>,
    #[serde(with = "crate::amount_serde")]
    pub fee_per_gas: Amount,
    /// Number of PoA sealers taking turns.
    #[serde(default = "one")]
    pub sealers: usize,
}

fn one() -> usize {
    1
}

impl ChainProfile {
    /// 15 s blocks, fee per gas 2.2 gwei, public-contract gas taken from
    /// measured averages of the reference deployment.
    pub fn public_default() -> Self {
        let gas_schedule = [
            (DEPLOY_OP, 922_915),
            ("set_addresses", 21_040),
            ("set_heads", 72_263),
            ("payoff", 55_212),
            ("refund", 30_001),
            // Not measured; plain payable call.
            ("deposit", 21_000),
        ];
        ChainProfile {
            name: "public".into(),
            block_interval: SimTime::from_secs(15),
            confirmation_blocks: 1,
            gas_schedule: gas_schedule.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            fee_per_gas: 2_200_000_000,
            sealers: 1,
        }
    }

    /// 4 s PoA blocks, metered but free.
    pub fn private_default() -> Self {
        let gas_schedule = [
            (DEPLOY_OP, 1_200_000),
            ("set_heads", 72_263),
            ("one_time_deposit", 26_000),
            ("request_token", 160_000),
            ("set_signature", 48_000),
        ];
        ChainProfile {
            name: "private".into(),
            block_interval: SimTime::from_secs(4),
            confirmation_blocks: 1,
            gas_schedule: gas_schedule.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            fee_per_gas: 0,
            sealers: 3,
        }
    }

    pub fn gas_for(&self, op: &str) -> u64 {
        self.gas_schedule.get(op).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.block_interval == SimTime::ZERO {
            return Err(format!("{}: block interval must be positive", self.name));
        }
        if self.confirmation_blocks == 0 {
            return Err(format!("{}: at least one confirmation block is required", self.name));
        }
        if self.sealers == 0 {
            return Err(format!("{}: at least one sealer is required", self.name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub enum TxKind<C: Contract> {
    Deploy(C),
    Call { to: Address, call: C::Call },
}

impl<C: Contract> TxKind<C> {
    pub fn op_name(&self) -> &'static str {
        match self {
            TxKind::Deploy(_) => DEPLOY_OP,
            TxKind::Call { call, .. } => C::call_name(call),
        }
    }
}

/// A signed transaction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Transaction<C: Contract> {
    pub from: Address,
    pub nonce: u64,
    pub value: Amount,
    pub kind: TxKind<C>,
    pub signature: Signature,
}

#[derive(Serialize)]
#[serde(bound = "")]
struct Unsigned<'a, C: Contract> {
    from: &'a Address,
    nonce: u64,
    value: Amount,
    kind: &'a TxKind<C>,
}

impl<C: Contract> Transaction<C> {
    pub fn new(key: &KeyPair, nonce: u64, value: Amount, kind: TxKind<C>) -> Self {
        let from = key.address();
        let signature = crypto::sign(key, &Self::signing_bytes(&from, nonce, value, &kind));
        Transaction { from, nonce, value, kind, signature }
    }

    fn signing_bytes(from: &Address, nonce: u64, value: Amount, kind: &TxKind<C>) -> Vec<u8> {
        serde_json::to_vec(&Unsigned { from, nonce, value, kind }).expect("transaction serializes")
    }

    pub fn signature_valid(&self) -> bool {
        let bytes = Self::signing_bytes(&self.from, self.nonce, self.value, &self.kind);
        crypto::verify_address(&self.from, &bytes, &self.signature)
    }

    pub fn hash(&self) -> Digest {
        let mut bytes = Self::signing_bytes(&self.from, self.nonce, self.value, &self.kind);
        bytes.extend_from_slice(&self.signature.0);
        crypto::hash(&bytes)
    }

    /// Serialized size, used for bandwidth accounting.
    pub fn wire_size(&self) -> usize {
        serde_json::to_vec(self).map(|v| v.len()).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Revert<E> {
    Contract(E),
    BadTxSignature,
    InsufficientFunds,
    /// Contract tried to pay out more than it holds.
    Overdraft,
    UnknownContract,
}

impl<E: fmt::Display> fmt::Display for Revert<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Revert::Contract(e) => write!(f, "{e}"),
            Revert::BadTxSignature => f.write_str("bad transaction signature"),
            Revert::InsufficientFunds => f.write_str("sender cannot cover the attached value"),
            Revert::Overdraft => f.write_str("contract overdraft"),
            Revert::UnknownContract => f.write_str("unknown contract"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TxStatus<E> {
    Success,
    Reverted(Revert<E>),
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "")]
pub struct TxReceipt<C: Contract> {
    pub hash: Digest,
    pub op: String,
    pub from: Address,
    pub to: Option<Address>,
    pub status: TxStatus<C::Error>,
    pub gas_used: u64,
    pub block: u64,
    pub events: Vec<C::Event>,
    /// Address of the created contract, for deployments.
    pub created: Option<Address>,
}

impl<C: Contract> TxReceipt<C> {
    pub fn succeeded(&self) -> bool {
        matches!(self.status, TxStatus::Success)
    }

    pub fn contract_error(&self) -> Option<&C::Error> {
        match &self.status {
            TxStatus::Reverted(Revert::Contract(e)) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry<E> {
    pub block: u64,
    pub index: u32,
    pub contract: Address,
    pub name: &'static str,
    pub event: E,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventFilter {
    pub contract: Option<Address>,
    pub name: Option<String>,
}

impl EventFilter {
    pub fn any() -> Self {
        EventFilter::default()
    }

    pub fn named(name: &str) -> Self {
        EventFilter { contract: None, name: Some(name.to_string()) }
    }

    fn matches<E>(&self, entry: &LogEntry<E>) -> bool {
        self.contract.is_none_or(|c| c == entry.contract) && self.name.as_deref().is_none_or(|n| n == entry.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Block {
    pub number: u64,
    pub timestamp: SimTime,
    pub sealer: usize,
    pub txs: Vec<Digest>,
    /// Sealed by a compromised sealer that withheld all pending transactions.
    pub censored: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("no contract at {0}")]
    UnknownContract(Address),
    #[error("transaction {0} already submitted")]
    DuplicateTransaction(Digest),
}

/// Opaque reference to a submitted transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TxHandle(pub Digest);

pub struct LedgerSim<C: Contract> {
    profile: ChainProfile,
    clock: SimTime,
    pending: VecDeque<Transaction<C>>,
    blocks: Vec<Block>,
    log: Vec<LogEntry<C::Event>>,
    contracts: BTreeMap<Address, C>,
    balances: BTreeMap<Address, Amount>,
    receipts: BTreeMap<Digest, TxReceipt<C>>,
    receipt_order: Vec<Digest>,
    seen: HashSet<Digest>,
    nonces: BTreeMap<Address, u64>,
    deploy_count: u64,
    compromised_sealers: BTreeSet<usize>,
    violations: Vec<String>,
}

impl<C: Contract> LedgerSim<C> {
    pub fn new(profile: ChainProfile) -> Self {
        LedgerSim {
            profile,
            clock: SimTime::ZERO,
            pending: VecDeque::new(),
            blocks: Vec::new(),
            log: Vec::new(),
            contracts: BTreeMap::new(),
            balances: BTreeMap::new(),
            receipts: BTreeMap::new(),
            receipt_order: Vec::new(),
            seen: HashSet::new(),
            nonces: BTreeMap::new(),
            deploy_count: 0,
            compromised_sealers: BTreeSet::new(),
            violations: Vec::new(),
        }
    }

    pub fn profile(&self) -> &ChainProfile {
        &self.profile
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> u64 {
        self.blocks.len() as u64
    }

    /// Time at which the next block will be sealed.
    pub fn next_seal_time(&self) -> SimTime {
        let iv = self.profile.block_interval.0;
        SimTime((self.clock.0 / iv + 1) * iv)
    }

    /// Genesis allocation.
    pub fn credit(&mut self, account: Address, amount: Amount) {
        *self.balances.entry(account).or_default() += amount;
    }

    pub fn balance(&self, account: &Address) -> Amount {
        self.balances.get(account).copied().unwrap_or(0)
    }

    pub fn total_supply(&self) -> Amount {
        self.balances.values().sum()
    }

    /// Hands out a fresh nonce for `sender`.
    pub fn next_nonce(&mut self, sender: &Address) -> u64 {
        let n = self.nonces.entry(*sender).or_default();
        *n += 1;
        *n
    }

    pub fn tx(&mut self, key: &KeyPair, value: Amount, kind: TxKind<C>) -> Transaction<C> {
        let nonce = self.next_nonce(&key.address());
        Transaction::new(key, nonce, value, kind)
    }

    pub fn set_sealer_compromised(&mut self, sealer: usize, compromised: bool) {
        if compromised {
            self.compromised_sealers.insert(sealer);
        } else {
            self.compromised_sealers.remove(&sealer);
        }
    }

    /// Address a deployment will receive, given the deployer and the
    /// ledger-wide deployment counter at execution time.
    pub fn contract_address(deployer: &Address, ordinal: u64) -> Address {
        let mut material = deployer.0.to_vec();
        material.extend_from_slice(&ordinal.to_be_bytes());
        let h = crypto::hash(&material);
        let mut a = [0u8; 20];
        a.copy_from_slice(&h.0[12..]);
        Address(a)
    }

    pub fn submit(&mut self, tx: Transaction<C>) -> Result<TxHandle, LedgerError> {
        if let TxKind::Call { to, .. } = &tx.kind {
            if !self.contracts.contains_key(to) {
                return Err(LedgerError::UnknownContract(*to));
            }
        }
        let hash = tx.hash();
        if !self.seen.insert(hash) {
            return Err(LedgerError::DuplicateTransaction(hash));
        }
        self.pending.push_back(tx);
        Ok(TxHandle(hash))
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Moves the clock forward by `dt`, sealing every block whose time falls
    /// in `(now, now + dt]`.
    pub fn advance(&mut self, dt: SimTime) -> Vec<Block> {
        self.advance_to(self.clock + dt)
    }

    pub fn advance_to(&mut self, t: SimTime) -> Vec<Block> {
        let mut sealed = Vec::new();
        if t <= self.clock {
            return sealed;
        }
        let iv = self.profile.block_interval.0;
        let first = self.clock.0 / iv + 1;
        let last = t.0 / iv;
        for k in first..=last {
            self.clock = SimTime(k * iv);
            sealed.push(self.seal());
        }
        self.clock = t;
        sealed
    }

    fn seal(&mut self) -> Block {
        let number = self.blocks.len() as u64 + 1;
        let sealer = (number as usize) % self.profile.sealers;
        let censored = self.compromised_sealers.contains(&sealer) && !self.pending.is_empty();
        let mut txs = Vec::new();
        if !censored {
            let batch: Vec<_> = self.pending.drain(..).collect();
            for tx in batch {
                let receipt = self.execute(number, tx);
                txs.push(receipt.hash);
                self.receipt_order.push(receipt.hash);
                self.receipts.insert(receipt.hash, receipt);
            }
        }
        let block = Block { number, timestamp: self.clock, sealer, txs, censored };
        self.blocks.push(block.clone());
        block
    }

    fn execute(&mut self, block: u64, tx: Transaction<C>) -> TxReceipt<C> {
        let hash = tx.hash();
        let op = tx.kind.op_name().to_string();
        let mut receipt = TxReceipt {
            hash,
            op: op.clone(),
            from: tx.from,
            to: match &tx.kind {
                TxKind::Call { to, .. } => Some(*to),
                TxKind::Deploy(_) => None,
            },
            status: TxStatus::Success,
            gas_used: 0,
            block,
            events: Vec::new(),
            created: None,
        };
        if !tx.signature_valid() {
            receipt.status = TxStatus::Reverted(Revert::BadTxSignature);
            return receipt;
        }
        receipt.gas_used = self.profile.gas_for(&op);
        if self.balance(&tx.from) < tx.value {
            receipt.status = TxStatus::Reverted(Revert::InsufficientFunds);
            return receipt;
        }

        let (this, before, mut state, call) = match tx.kind {
            TxKind::Deploy(init) => {
                self.deploy_count += 1;
                (Self::contract_address(&tx.from, self.deploy_count), None, init, None)
            }
            TxKind::Call { to, call } => match self.contracts.get(&to) {
                Some(c) => (to, Some(c.clone()), c.clone(), Some(call)),
                None => {
                    receipt.status = TxStatus::Reverted(Revert::UnknownContract);
                    return receipt;
                }
            },
        };
        let mut ctx = ExecContext {
            caller: tx.from,
            value: tx.value,
            now: self.clock,
            block,
            this,
            balance: self.balance(&this) + tx.value,
            events: Vec::new(),
            transfers: Vec::new(),
        };
        let result = match &call {
            Some(call) => state.execute(&mut ctx, call),
            None => state.on_deploy(&mut ctx),
        };
        if let Err(e) = result {
            receipt.status = TxStatus::Reverted(Revert::Contract(e));
            return receipt;
        }
        if ctx.outgoing() > ctx.balance {
            receipt.status = TxStatus::Reverted(Revert::Overdraft);
            return receipt;
        }

        // Commit.
        if let Err(v) = C::check_transition(before.as_ref(), &state) {
            self.violations.push(format!("block {block} tx {hash}: {v}"));
        }
        *self.balances.entry(tx.from).or_default() -= tx.value;
        *self.balances.entry(this).or_default() += tx.value;
        for (to, amount) in &ctx.transfers {
            *self.balances.entry(this).or_default() -= amount;
            *self.balances.entry(*to).or_default() += amount;
        }
        self.contracts.insert(this, state);
        for ev in &ctx.events {
            let index = self.log.iter().rev().take_while(|e| e.block == block).count() as u32;
            self.log.push(LogEntry { block, index, contract: this, name: C::event_name(ev), event: ev.clone() });
        }
        receipt.events = ctx.events;
        if before.is_none() {
            receipt.created = Some(this);
        }
        receipt
    }

    pub fn receipt(&self, handle: &TxHandle) -> Option<&TxReceipt<C>> {
        self.receipts.get(&handle.0)
    }

    /// Whether `handle` is sealed with the profile's confirmation depth.
    pub fn is_confirmed(&self, handle: &TxHandle) -> bool {
        self.receipt(handle)
            .is_some_and(|r| r.block + self.profile.confirmation_blocks - 1 <= self.head())
    }

    /// All receipts in execution order.
    pub fn receipts(&self) -> impl Iterator<Item = &TxReceipt<C>> {
        self.receipt_order.iter().filter_map(|h| self.receipts.get(h))
    }

    /// Matching log entries after `cursor`, and the new cursor.
    pub fn poll_events(&self, cursor: usize, filter: &EventFilter) -> (Vec<&LogEntry<C::Event>>, usize) {
        let start = cursor.min(self.log.len());
        let out = self.log[start..].iter().filter(|e| filter.matches(e)).collect();
        (out, self.log.len())
    }

    pub fn log(&self) -> &[LogEntry<C::Event>] {
        &self.log
    }

    /// Line-delimited JSON export of the event log.
    pub fn export_log(&self) -> String {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e).expect("log entry serializes"));
            out.push('\n');
        }
        out
    }

    /// Read-only access to sealed contract state; free and immediate.
    pub fn call_view<R>(&self, contract: &Address, f: impl FnOnce(&C) -> R) -> Result<R, LedgerError> {
        self.contracts.get(contract).map(f).ok_or(LedgerError::UnknownContract(*contract))
    }

    pub fn contract(&self, address: &Address) -> Option<&C> {
        self.contracts.get(address)
    }

    pub fn contracts(&self) -> impl Iterator<Item = (&Address, &C)> {
        self.contracts.iter()
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpFee {
    pub count: u64,
    pub gas: u64,
    pub fee: Amount,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeeReport {
    pub per_op: BTreeMap<String, OpFee>,
    pub total_gas: u64,
    pub total_fee: Amount,
}

/// Aggregates gas by operation and prices it at `fee_per_gas`.
pub fn meter<'a, C: Contract + 'a>(receipts: impl IntoIterator<Item = &'a TxReceipt<C>>, fee_per_gas: Amount) -> FeeReport {
    let mut report = FeeReport::default();
    for r in receipts {
        let fee = Amount::from(r.gas_used) * fee_per_gas;
        let entry = report.per_op.entry(r.op.clone()).or_default();
        entry.count += 1;
        entry.gas += r.gas_used;
        entry.fee += fee;
        report.total_gas += r.gas_used;
        report.total_fee += fee;
    }
    report
}
