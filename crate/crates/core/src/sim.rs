//! Discrete-event world: one global clock driving both ledgers, the token
//! signers, and every message in flight.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::contracts::{PrivateContract, PublicContract};
use crate::crypto::Address;
use crate::ledger::{ChainProfile, Contract, LedgerSim, Transaction, TxHandle, TxReceipt};
use crate::netsim::{Direction, NetLink, OverheadModel};
use crate::signer::SignerNode;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    ClientChain,
    SignerChain,
    ClientOpos,
    ClientMerchant,
    MerchantChain,
}

impl Channel {
    pub const ALL: [Channel; 5] =
        [Channel::ClientChain, Channel::SignerChain, Channel::ClientOpos, Channel::ClientMerchant, Channel::MerchantChain];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub messages: u64,
    /// Towards the ledger (or towards the terminal on the QR channel).
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl ChannelStats {
    pub fn total(&self) -> u64 {
        self.bytes_up + self.bytes_down
    }

    pub fn since(&self, earlier: &ChannelStats) -> ChannelStats {
        ChannelStats {
            messages: self.messages - earlier.messages,
            bytes_up: self.bytes_up - earlier.bytes_up,
            bytes_down: self.bytes_down - earlier.bytes_down,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Capture {
    pub at: SimTime,
    pub channel: Channel,
    pub direction: Direction,
    pub payload: Vec<u8>,
}

/// Byte counters per channel, plus optional payload capture for leak checks.
#[derive(Debug, Clone, Default)]
pub struct Traffic {
    stats: BTreeMap<Channel, ChannelStats>,
    captures: Vec<Capture>,
    pub capture: bool,
}

impl Traffic {
    pub fn record(&mut self, at: SimTime, channel: Channel, direction: Direction, payload: &[u8], overhead: usize) {
        let s = self.stats.entry(channel).or_default();
        let n = (payload.len() + overhead) as u64;
        match direction {
            Direction::Up => {
                s.messages += 1;
                s.bytes_up += n;
            }
            Direction::Down => s.bytes_down += n,
        }
        if self.capture {
            self.captures.push(Capture { at, channel, direction, payload: payload.to_vec() });
        }
    }

    /// Counts `count` identical messages without capturing them.
    fn record_repeated(&mut self, channel: Channel, direction: Direction, count: u64, size: usize) {
        let s = self.stats.entry(channel).or_default();
        match direction {
            Direction::Up => {
                s.messages += count;
                s.bytes_up += count * size as u64;
            }
            Direction::Down => s.bytes_down += count * size as u64,
        }
    }

    pub fn stats(&self, channel: Channel) -> ChannelStats {
        self.stats.get(&channel).copied().unwrap_or_default()
    }

    pub fn snapshot(&self) -> BTreeMap<Channel, ChannelStats> {
        Channel::ALL.iter().map(|c| (*c, self.stats(*c))).collect()
    }

    pub fn captures(&self) -> &[Capture] {
        &self.captures
    }

    /// Whether `needle` appears in any captured payload.
    pub fn leaked(&self, needle: &[u8]) -> bool {
        !needle.is_empty() && self.captures.iter().any(|c| c.payload.windows(needle.len()).any(|w| w == needle))
    }

    /// Indices of the needles that appear in any captured payload, in one
    /// pass over the captures.
    pub fn leaked_any(&self, needles: &[Vec<u8>]) -> Vec<usize> {
        const K: usize = 8;
        let mut by_prefix: std::collections::HashMap<&[u8], Vec<usize>> = std::collections::HashMap::new();
        let mut found = vec![false; needles.len()];
        for (i, n) in needles.iter().enumerate() {
            if n.len() >= K {
                by_prefix.entry(&n[..K]).or_default().push(i);
            } else {
                found[i] = self.leaked(n);
            }
        }
        for c in &self.captures {
            for (at, w) in c.payload.windows(K).enumerate() {
                if let Some(candidates) = by_prefix.get(w) {
                    for &i in candidates {
                        if c.payload[at..].starts_with(&needles[i]) {
                            found[i] = true;
                        }
                    }
                }
            }
        }
        found.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect()
    }
}

#[derive(Debug)]
enum Action {
    PublicTx(Box<Transaction<PublicContract>>),
    PrivateTx(Box<Transaction<PrivateContract>>),
    SignerTick(usize),
    SignerPoll(usize),
}

#[derive(Debug)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Approximate size of an event-log poll request.
const POLL_REQUEST_BYTES: usize = 96;

pub struct World {
    pub public: LedgerSim<PublicContract>,
    pub private: LedgerSim<PrivateContract>,
    pub signers: Vec<SignerNode>,
    pub traffic: Traffic,
    pub overhead: OverheadModel,
    now: SimTime,
    queue: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    /// Submissions the ledgers refused outright (duplicates, unknown targets).
    pub refused: Vec<String>,
}

impl World {
    pub fn new(public: ChainProfile, private: ChainProfile, overhead: OverheadModel) -> Self {
        World {
            public: LedgerSim::new(public),
            private: LedgerSim::new(private),
            signers: Vec::new(),
            traffic: Traffic::default(),
            overhead,
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            seq: 0,
            refused: Vec::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    fn schedule(&mut self, at: SimTime, action: Action) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at: at.max(self.now), seq: self.seq, action }));
    }

    /// Adds a signer; it polls from the next whole poll interval on.
    pub fn add_signer(&mut self, node: SignerNode) {
        let iv = node.poll_interval.0.max(1);
        let first = SimTime((self.now.0 / iv + 1) * iv);
        self.signers.push(node);
        self.schedule(first, Action::SignerTick(self.signers.len() - 1));
    }

    pub fn signer_addresses(&self) -> Vec<Address> {
        self.signers.iter().map(SignerNode::address).collect()
    }

    /// Runs every scheduled action up to and including `t`, sealing blocks
    /// on both ledgers along the way.
    pub fn run_until(&mut self, t: SimTime) {
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.at > t {
                break;
            }
            if matches!(head.action, Action::SignerTick(_)) && self.skip_idle_polls(t) {
                continue;
            }
            let Reverse(next) = self.queue.pop().expect("peeked");
            self.advance_ledgers(next.at);
            self.handle(next.action);
        }
        self.advance_ledgers(t);
    }

    /// With nothing pending on the private chain and every signer caught up,
    /// each poll until `t` returns an empty list. Those polls are counted in
    /// bulk instead of simulated one by one; byte totals are unchanged.
    fn skip_idle_polls(&mut self, t: SimTime) -> bool {
        let log_len = self.private.log().len();
        let quiet = self.private.pending_len() == 0
            && self.signers.iter().all(|n| n.cursor() == log_len)
            && self.queue.iter().all(|Reverse(s)| matches!(s.action, Action::SignerTick(_) | Action::PublicTx(_)));
        if !quiet {
            return false;
        }
        let env = self.overhead.envelope_bytes;
        let empty = serde_json::to_vec(&Vec::<crate::signer::TokenRequest>::new()).expect("serializes").len();
        let mut skipped = false;
        let mut queue = std::mem::take(&mut self.queue).into_vec();
        for Reverse(s) in &mut queue {
            let Action::SignerTick(i) = s.action else { continue };
            let node = &self.signers[i];
            let iv = node.poll_interval.0.max(1);
            let up = node.link.transfer_time(POLL_REQUEST_BYTES + env, Direction::Up);
            let k = t.0.saturating_sub(s.at.0 + up.0) / iv;
            if k >= 2 {
                self.traffic.record_repeated(Channel::SignerChain, Direction::Up, k, POLL_REQUEST_BYTES + env);
                self.traffic.record_repeated(Channel::SignerChain, Direction::Down, k, empty + env);
                s.at = SimTime(s.at.0 + k * iv);
                skipped = true;
            }
        }
        self.queue = queue.into_iter().collect();
        skipped
    }

    pub fn run_for(&mut self, dt: SimTime) {
        self.run_until(self.now + dt);
    }

    fn advance_ledgers(&mut self, t: SimTime) {
        if t > self.now {
            self.public.advance_to(t);
            self.private.advance_to(t);
            self.now = t;
        }
    }

    fn handle(&mut self, action: Action) {
        match action {
            Action::PublicTx(tx) => {
                if let Err(e) = self.public.submit(*tx) {
                    self.refused.push(format!("public @{}: {e}", self.now));
                }
            }
            Action::PrivateTx(tx) => {
                if let Err(e) = self.private.submit(*tx) {
                    self.refused.push(format!("private @{}: {e}", self.now));
                }
            }
            Action::SignerTick(i) => {
                let link = self.signers[i].link.clone();
                let interval = self.signers[i].poll_interval;
                self.traffic.record(self.now, Channel::SignerChain, Direction::Up, &[0; POLL_REQUEST_BYTES], self.overhead.envelope_bytes);
                let arrival = self.now + link.transfer_time(POLL_REQUEST_BYTES + self.overhead.envelope_bytes, Direction::Up);
                self.schedule(arrival, Action::SignerPoll(i));
                self.schedule(self.now + interval, Action::SignerTick(i));
            }
            Action::SignerPoll(i) => {
                let requests = self.signers[i].poll(&self.private);
                let response = serde_json::to_vec(&requests).expect("requests serialize");
                let env = self.overhead.envelope_bytes;
                self.traffic.record(self.now, Channel::SignerChain, Direction::Down, &response, env);
                let link = self.signers[i].link.clone();
                let back = self.now + link.transfer_time(response.len() + env, Direction::Down);
                let txs = self.signers[i].respond(&requests, &mut self.private);
                for tx in txs {
                    self.send_private_from(back, Box::new(tx), &link, Channel::SignerChain);
                }
            }
        }
    }

    fn send_private_from(&mut self, at: SimTime, tx: Box<Transaction<PrivateContract>>, link: &NetLink, channel: Channel) -> TxHandle {
        let bytes = serde_json::to_vec(&*tx).expect("transaction serializes");
        let env = self.overhead.envelope_bytes;
        self.traffic.record(at, channel, Direction::Up, &bytes, env);
        let handle = TxHandle(tx.hash());
        self.schedule(at + link.transfer_time(bytes.len() + env, Direction::Up), Action::PrivateTx(tx));
        handle
    }

    /// Sends a transaction now; it reaches the ledger after the uplink time.
    pub fn send_private(&mut self, tx: Transaction<PrivateContract>, link: &NetLink, channel: Channel) -> TxHandle {
        self.send_private_from(self.now, Box::new(tx), link, channel)
    }

    pub fn send_public(&mut self, tx: Transaction<PublicContract>, link: &NetLink, channel: Channel) -> TxHandle {
        let bytes = serde_json::to_vec(&tx).expect("transaction serializes");
        let env = self.overhead.envelope_bytes;
        self.traffic.record(self.now, channel, Direction::Up, &bytes, env);
        let handle = TxHandle(tx.hash());
        let at = self.now + link.transfer_time(bytes.len() + env, Direction::Up);
        self.schedule(at, Action::PublicTx(Box::new(tx)));
        handle
    }

    /// Read-only remote call: request travels up, `f` runs against the
    /// state at arrival, and the serialized result travels down.
    pub fn view_private<R: Serialize>(
        &mut self,
        link: &NetLink,
        channel: Channel,
        f: impl FnOnce(&LedgerSim<PrivateContract>) -> R,
    ) -> R {
        self.remote(link, channel, |w| f(&w.private))
    }

    pub fn view_public<R: Serialize>(
        &mut self,
        link: &NetLink,
        channel: Channel,
        f: impl FnOnce(&LedgerSim<PublicContract>) -> R,
    ) -> R {
        self.remote(link, channel, |w| f(&w.public))
    }

    fn remote<R: Serialize>(&mut self, link: &NetLink, channel: Channel, f: impl FnOnce(&World) -> R) -> R {
        let env = self.overhead.envelope_bytes;
        self.traffic.record(self.now, channel, Direction::Up, &[0; POLL_REQUEST_BYTES], env);
        self.run_until(self.now + link.transfer_time(POLL_REQUEST_BYTES + env, Direction::Up));
        let r = f(self);
        let bytes = serde_json::to_vec(&r).expect("view result serializes");
        self.traffic.record(self.now, channel, Direction::Down, &bytes, env);
        self.run_until(self.now + link.transfer_time(bytes.len() + env, Direction::Down));
        r
    }

    /// Waits for a public receipt, checking at each seal, until `deadline`.
    pub fn wait_public(&mut self, h: &TxHandle, deadline: SimTime) -> Option<TxReceipt<PublicContract>> {
        loop {
            if let Some(r) = self.public.receipt(h) {
                return Some(r.clone());
            }
            let next = self.public.next_seal_time();
            if next > deadline {
                self.run_until(deadline);
                return self.public.receipt(h).cloned();
            }
            self.run_until(next);
        }
    }

    pub fn wait_private(&mut self, h: &TxHandle, deadline: SimTime) -> Option<TxReceipt<PrivateContract>> {
        loop {
            if let Some(r) = self.private.receipt(h) {
                return Some(r.clone());
            }
            let next = self.private.next_seal_time();
            if next > deadline {
                self.run_until(deadline);
                return self.private.receipt(h).cloned();
            }
            self.run_until(next);
        }
    }

    /// Invariant violations recorded by either ledger.
    pub fn violations(&self) -> Vec<String> {
        self.public.violations().iter().chain(self.private.violations()).cloned().collect()
    }
}

/// Sum of gas fees over receipts on a ledger.
pub fn fee_report<C: Contract>(ledger: &LedgerSim<C>) -> crate::ledger::FeeReport {
    crate::ledger::meter(ledger.receipts(), ledger.profile().fee_per_gas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::hashchain::ChannelParams;
    use crate::ledger::TxKind;

    fn world() -> World {
        World::new(ChainProfile::public_default(), ChainProfile::private_default(), OverheadModel::default())
    }

    #[test]
    fn idle_poll_skipping_keeps_byte_totals() {
        let build = || {
            let mut w = world();
            for (i, link) in [NetLink::wifi(), NetLink::three_g()].into_iter().enumerate() {
                w.add_signer(SignerNode::new(i as u32, KeyPair::from_seed(&[i as u8]), link));
            }
            w
        };
        let mut stepped = build();
        for s in 1..=3600 {
            stepped.run_until(SimTime::from_secs(s));
        }
        let mut jumped = build();
        jumped.run_until(SimTime::from_secs(3600));
        assert_eq!(stepped.traffic.stats(Channel::SignerChain), jumped.traffic.stats(Channel::SignerChain));
        assert_eq!(jumped.traffic.stats(Channel::SignerChain).messages, 2 * 3600);
        // Both resume polling on the same grid.
        stepped.run_until(SimTime::from_millis(3_600_500));
        jumped.run_until(SimTime::from_millis(3_600_500));
        assert_eq!(stepped.traffic.stats(Channel::SignerChain), jumped.traffic.stats(Channel::SignerChain));
    }

    #[test]
    fn one_pass_leak_scan_matches_naive() {
        let mut t = Traffic { capture: true, ..Traffic::default() };
        t.record(SimTime::ZERO, Channel::ClientChain, Direction::Up, b"xxabcdefghijklmnyy", 0);
        t.record(SimTime::ZERO, Channel::ClientChain, Direction::Up, b"0123456789", 0);
        let needles: Vec<Vec<u8>> =
            [&b"abcdefghijklmn"[..], b"abcdefghijklmz", b"3456", b"0123456789", b"zz", b"ghijklmnyy"].iter().map(|n| n.to_vec()).collect();
        let naive: Vec<usize> = (0..needles.len()).filter(|&i| t.leaked(&needles[i])).collect();
        assert_eq!(t.leaked_any(&needles), naive);
        assert_eq!(naive, vec![0, 2, 3, 5]);
    }

    #[test]
    fn clock_drives_both_ledgers() {
        let mut w = world();
        w.run_until(SimTime::from_secs(31));
        assert_eq!(w.public.head(), 2);
        assert_eq!(w.private.head(), 7);
        assert_eq!(w.now(), SimTime::from_secs(31));
    }

    #[test]
    fn transactions_arrive_after_uplink() {
        let mut w = world();
        let k = KeyPair::from_seed(b"merchant");
        let params = ChannelParams::new(10, 7, 1).unwrap();
        let c = PublicContract::new(Address([1; 20]), k.address(), params, SimTime::from_secs(60));
        let tx = w.public.tx(&k, 0, TxKind::Deploy(c));
        let link = NetLink::three_g();
        let size = serde_json::to_vec(&tx).unwrap().len() + 512;
        w.run_until(SimTime::from_secs(15) - SimTime::from_millis(50));
        let h = w.send_public(tx, &link, Channel::MerchantChain);
        // 3G uplink takes longer than 50 ms, so the first block misses it.
        assert!(link.transfer_time_ms(size, Direction::Up) > 50.0);
        w.run_until(SimTime::from_secs(15));
        assert!(w.public.receipt(&h).is_none());
        let r = w.wait_public(&h, SimTime::from_secs(60)).unwrap();
        assert_eq!(r.block, 2);
        assert_eq!(w.traffic.stats(Channel::MerchantChain).bytes_up, size as u64);
    }

    #[test]
    fn wait_gives_up_at_deadline() {
        let mut w = world();
        let h = TxHandle(crate::crypto::hash(b"never sent"));
        assert!(w.wait_private(&h, SimTime::from_secs(9)).is_none());
        assert_eq!(w.now(), SimTime::from_secs(9));
    }

    #[test]
    fn views_cost_a_round_trip() {
        let mut w = world();
        let link = NetLink::new("slow", 100.0, 1e6, 1e6).unwrap();
        let head = w.view_private(&link, Channel::ClientChain, |l| l.head());
        assert_eq!(head, 0);
        assert!(w.now() >= SimTime::from_millis(200));
        let s = w.traffic.stats(Channel::ClientChain);
        assert_eq!(s.messages, 1);
        assert!(s.bytes_up > 512 && s.bytes_down > 512);
    }

    #[test]
    fn signers_poll_on_schedule() {
        let mut w = world();
        for i in 0..3u8 {
            w.add_signer(SignerNode::new(i as u32, KeyPair::from_seed(&[i]), NetLink::wifi()));
        }
        w.run_until(SimTime::from_millis(10_500));
        // Ticks at 1..=10 s for each signer.
        assert_eq!(w.traffic.stats(Channel::SignerChain).messages, 30);
    }

    #[test]
    fn captures_find_needles() {
        let mut t = Traffic { capture: true, ..Default::default() };
        t.record(SimTime::ZERO, Channel::ClientOpos, Direction::Up, b"hello secret world", 0);
        assert!(t.leaked(b"secret"));
        assert!(!t.leaked(b"seed"));
        assert!(!t.leaked(b""));
        assert_eq!(t.stats(Channel::ClientOpos).bytes_up, 18);
    }
}
