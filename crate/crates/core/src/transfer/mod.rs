//! Transfer core: binding registry, protocol negotiation, address
//! resolution, command marshalling and delivery with retries.

mod envelope;
mod loopback;
mod peers;
mod service;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::identity::AccountId;

pub use envelope::{Command, CommandKind, DecisionMessage, Envelope, NoticeBody, WireEnvelope, PROTOCOL_VERSION};
pub use loopback::{LoopbackBinding, MessageSink, LOOPBACK, LOOPBACK_PRIORITY};
pub use peers::{PeerEntry, PeerTable, LOCAL_MARKER};
pub use service::{EnvelopeTap, TransferCore, LOCAL_ADDRESS};

pub const MAX_PRIORITY: u8 = 100;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransferError {
    #[error("protocol {0} is already registered")]
    DuplicateProtocol(String),
    #[error("invalid binding descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("no common transfer protocol")]
    NoCommonProtocol,
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
    #[error("protocol {protocol} not supported for {account}")]
    UnsupportedProtocol { account: AccountId, protocol: String },
    #[error("delivery to {receiver} failed after {attempts} attempt(s): {reason}")]
    DeliveryFailed {
        receiver: AccountId,
        attempts: u32,
        reason: String,
    },
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
    #[error("receiver {0} is not provisioned here")]
    UnknownReceiverAccount(AccountId),
    #[error("peer table: {0}")]
    PeerTable(String),
    #[error("receiver temporarily unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Capabilities {
    pub point_to_point: bool,
    pub multicast: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BindingDescriptor {
    pub protocol: String,
    pub priority: u8,
    pub capabilities: Capabilities,
}

impl BindingDescriptor {
    pub fn new(protocol: impl Into<String>, priority: u8, multicast: bool) -> Self {
        Self {
            protocol: protocol.into(),
            priority,
            capabilities: Capabilities {
                point_to_point: true,
                multicast,
            },
        }
    }

    pub fn offer(&self) -> ProtocolOffer {
        ProtocolOffer {
            protocol: self.protocol.clone(),
            priority: self.priority,
        }
    }
}

/// A protocol a remote account is reachable over, with the remote's priority.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtocolOffer {
    pub protocol: String,
    pub priority: u8,
}

impl ProtocolOffer {
    pub fn new(protocol: impl Into<String>, priority: u8) -> Self {
        Self {
            protocol: protocol.into(),
            priority,
        }
    }
}

/// Picks the common protocol with the highest summed priority; ties go to
/// the lexicographically smallest name. Both inputs are symmetric, so
/// `negotiate(a, b) == negotiate(b, a)`. Duplicate names count with their
/// highest priority.
pub fn negotiate(local: &[ProtocolOffer], remote: &[ProtocolOffer]) -> Result<String, TransferError> {
    fn best(offers: &[ProtocolOffer]) -> BTreeMap<&str, u8> {
        let mut map: BTreeMap<&str, u8> = BTreeMap::new();
        for o in offers {
            let slot = map.entry(o.protocol.as_str()).or_insert(o.priority);
            *slot = (*slot).max(o.priority);
        }
        map
    }
    let local = best(local);
    let remote = best(remote);
    local
        .iter()
        .filter_map(|(name, lp)| remote.get(name).map(|rp| (u16::from(*lp) + u16::from(*rp), *name)))
        // names ascend, so keeping the incumbent on equal scores yields the smallest name
        .fold(None, |acc: Option<(u16, &str)>, (score, name)| match acc {
            Some((best, _)) if best >= score => acc,
            _ => Some((score, name)),
        })
        .map(|(_, name)| name.to_owned())
        .ok_or(TransferError::NoCommonProtocol)
}

/// Protocol-specific address of an account, e.g. a base URL or `local`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransferAddress(pub String);

impl fmt::Display for TransferAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A single delivery attempt's failure.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttemptError {
    /// Worth retrying: availability problems such as 5xx or timeouts.
    #[error("transient: {0}")]
    Transient(String),
    /// Retrying cannot help: the peer rejected the message.
    #[error("permanent: {0}")]
    Permanent(String),
}

/// A transfer protocol implementation.
pub trait Binding: Send + Sync {
    fn descriptor(&self) -> &BindingDescriptor;

    fn send(&self, address: &TransferAddress, envelope: &Envelope) -> Result<(), AttemptError>;

    /// Delivers one envelope per target. The default sends sequentially;
    /// bindings with native fan-out override it. Each target gets its own
    /// retries and a failure never affects other targets.
    fn multicast(&self, targets: &[(TransferAddress, Envelope)], retry: &RetryPolicy) -> Vec<Result<u32, (u32, AttemptError)>> {
        targets
            .iter()
            .map(|(address, envelope)| retry.run(|| self.send(address, envelope)))
            .collect()
    }
}

type SendFn = dyn Fn(&TransferAddress, &Envelope) -> Result<(), AttemptError> + Send + Sync;

/// Adapter turning a plain send function into a [`Binding`].
pub struct FnBinding {
    descriptor: BindingDescriptor,
    send: Box<SendFn>,
}

impl FnBinding {
    pub fn new(
        descriptor: BindingDescriptor,
        send: impl Fn(&TransferAddress, &Envelope) -> Result<(), AttemptError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            descriptor,
            send: Box::new(send),
        }
    }
}

impl Binding for FnBinding {
    fn descriptor(&self) -> &BindingDescriptor {
        &self.descriptor
    }

    fn send(&self, address: &TransferAddress, envelope: &Envelope) -> Result<(), AttemptError> {
        (self.send)(address, envelope)
    }
}

/// Bindings known to a node. Registration takes effect immediately.
#[derive(Default)]
pub struct BindingRegistry {
    bindings: RwLock<BTreeMap<String, Arc<dyn Binding>>>,
}

impl BindingRegistry {
    pub fn register(&self, binding: Arc<dyn Binding>) -> Result<(), TransferError> {
        let descriptor = binding.descriptor().clone();
        if descriptor.protocol.is_empty() {
            return Err(TransferError::InvalidDescriptor("empty protocol name".into()));
        }
        if descriptor.priority > MAX_PRIORITY {
            return Err(TransferError::InvalidDescriptor(format!(
                "priority {} outside 0..=100",
                descriptor.priority
            )));
        }
        let mut bindings = self.bindings.write();
        if bindings.contains_key(&descriptor.protocol) {
            return Err(TransferError::DuplicateProtocol(descriptor.protocol));
        }
        bindings.insert(descriptor.protocol, binding);
        Ok(())
    }

    pub fn get(&self, protocol: &str) -> Option<Arc<dyn Binding>> {
        self.bindings.read().get(protocol).cloned()
    }

    pub fn descriptors(&self) -> Vec<BindingDescriptor> {
        self.bindings.read().values().map(|b| b.descriptor().clone()).collect()
    }
}

type Sleeper = dyn Fn(Duration) + Send + Sync;

/// Bounded retries with exponential backoff. Permanent failures stop at once.
#[derive(Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    sleeper: Arc<Sleeper>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self::new(5, Duration::from_millis(200))
    }
}

impl fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RetryPolicy")
            .field("attempts", &self.attempts)
            .field("initial_backoff", &self.initial_backoff)
            .finish()
    }
}

impl RetryPolicy {
    pub fn new(attempts: u32, initial_backoff: Duration) -> Self {
        Self {
            attempts: attempts.max(1),
            initial_backoff,
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    /// Backoff before attempt `n + 1` (0-based `n`).
    pub fn backoff(&self, n: u32) -> Duration {
        self.initial_backoff.saturating_mul(1u32 << n.min(16))
    }

    /// Runs `attempt` until it succeeds, fails permanently or the budget is
    /// spent. Returns the number of attempts made.
    pub fn run(&self, mut attempt: impl FnMut() -> Result<(), AttemptError>) -> Result<u32, (u32, AttemptError)> {
        let mut n = 0;
        loop {
            n += 1;
            match attempt() {
                Ok(()) => return Ok(n),
                Err(e @ AttemptError::Permanent(_)) => return Err((n, e)),
                Err(e) if n >= self.attempts => return Err((n, e)),
                Err(_) => (self.sleeper)(self.backoff(n - 1)),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeliveryReceipt {
    pub envelope_id: Uuid,
    pub protocol: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MulticastEntry {
    pub receiver: AccountId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope_id: Option<Uuid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-recipient outcome of a fan-out.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MulticastReport {
    pub entries: Vec<MulticastEntry>,
}

impl MulticastReport {
    pub fn delivered(&self) -> usize {
        self.entries.iter().filter(|e| e.ok).count()
    }

    pub fn failed(&self) -> usize {
        self.entries.iter().filter(|e| !e.ok).count()
    }

    pub fn extend(&mut self, other: MulticastReport) {
        self.entries.extend(other.entries);
    }
}
