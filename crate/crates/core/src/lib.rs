//! Offline-terminal payments over hash-chain micropayment channels.
//!
//! A client funds a channel contract on a public chain; the merchant mirrors
//! it with a contract on a private proof-of-authority chain and links the two
//! by storing the private address in the public one. Purchases at an offline
//! terminal are paid by revealing hash-chain preimages to the private
//! contract, which triggers M-of-N token signers; the terminal checks the
//! resulting token without any network access. The merchant later settles
//! the revealed preimages on the public chain.

pub mod amount_serde;
pub mod client;
pub mod contracts;
pub mod crypto;
pub mod harness;
pub mod hashchain;
pub mod ledger;
pub mod merchant;
pub mod netsim;
pub mod opos;
pub mod signer;
pub mod sim;
pub mod time;

/// Amount in atomic currency units (wei for the ether preset).
pub type Amount = u128;
