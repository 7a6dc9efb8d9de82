//! Ledger-less digital currency engine.
//!
//! Peers hold their own transaction and balance trees; a Currency Manager
//! keeps a temporal balance table and an Integrity Manager cross-checks
//! tree roots reported by both sides of every transfer.

pub mod alert;
pub mod balance_mht;
pub mod client_node;
pub mod codec;
pub mod currency_manager;
pub mod data_client;
pub mod harness;
pub mod hash;
pub mod integrity_manager;
pub mod merkle;
pub mod peer_ledger;
pub mod signature;
#[cfg(test)]
mod testkit;
pub mod types;
