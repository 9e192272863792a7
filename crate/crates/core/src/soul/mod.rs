//! The Soul: role-specific subsystems of a node.
//!
//! Handlers for received commands and Barker decisions run inside the
//! account's transaction and return outbound work that the node executes
//! after commit. The `impl Node` blocks in each module are the operations
//! neighbour systems call.

pub mod concerned;
pub mod consumer;
pub mod provider;

use crate::identity::AccountId;
use crate::node::Error;
use crate::store::{StoreError, Txn};

fn verification_failed(reason: impl Into<String>) -> Error {
    Error::Store(StoreError::VerificationFailed(reason.into()))
}

fn account_of(txn: &Txn<'_>) -> AccountId {
    txn.account().clone()
}
