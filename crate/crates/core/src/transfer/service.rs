//! Negotiation, resolution and delivery on behalf of local accounts.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::RwLock;

use super::{
    negotiate, BindingRegistry, Command, DeliveryReceipt, Envelope, MulticastEntry, MulticastReport, PeerTable,
    ProtocolOffer, RetryPolicy, TransferAddress, TransferError, LOOPBACK, PROTOCOL_VERSION,
};
use crate::clock::{Clock, IdSource};
use crate::identity::AccountId;
use crate::store::Store;

/// Observer of every envelope leaving or entering a node.
pub trait EnvelopeTap: Send + Sync {
    fn on_send(&self, _envelope: &Envelope) {}
    fn on_receive(&self, _envelope: &Envelope) {}
}

/// Address token the loopback binding resolves co-located accounts to.
pub const LOCAL_ADDRESS: &str = "local";

pub struct TransferCore {
    bindings: BindingRegistry,
    peers: RwLock<PeerTable>,
    retry: RetryPolicy,
    ids: IdSource,
    clock: Arc<dyn Clock>,
    tap: RwLock<Option<Arc<dyn EnvelopeTap>>>,
    public_url: Option<String>,
    store: Arc<Store>,
}

impl TransferCore {
    pub fn new(
        store: Arc<Store>,
        clock: Arc<dyn Clock>,
        ids: IdSource,
        retry: RetryPolicy,
        public_url: Option<String>,
    ) -> Self {
        Self {
            bindings: BindingRegistry::default(),
            peers: RwLock::new(PeerTable::new()),
            retry,
            ids,
            clock,
            tap: RwLock::new(None),
            public_url,
            store,
        }
    }

    pub fn bindings(&self) -> &BindingRegistry {
        &self.bindings
    }

    pub fn set_peers(&self, peers: PeerTable) {
        *self.peers.write() = peers;
    }

    pub fn peers(&self) -> PeerTable {
        self.peers.read().clone()
    }

    pub fn set_tap(&self, tap: Option<Arc<dyn EnvelopeTap>>) {
        *self.tap.write() = tap;
    }

    pub fn public_url(&self) -> Option<&str> {
        self.public_url.as_deref()
    }

    fn local_offers(&self) -> Vec<ProtocolOffer> {
        self.bindings.descriptors().iter().map(|d| d.offer()).collect()
    }

    /// Protocols an account can be reached over. Local accounts offer every
    /// registered binding; remote ones what the peer table advertises.
    pub fn offered_protocols(&self, account: &AccountId) -> Result<Vec<ProtocolOffer>, TransferError> {
        if self.store.contains(account) {
            return Ok(self.local_offers());
        }
        self.peers
            .read()
            .get(account)
            .map(|p| p.protocols.clone())
            .ok_or_else(|| TransferError::UnknownAccount(account.clone()))
    }

    /// Chooses the protocol for talking to `receiver`. Loopback is only on
    /// the table when both ends live on this node.
    pub fn negotiate_with(&self, receiver: &AccountId) -> Result<String, TransferError> {
        if self.store.contains(receiver) {
            let offers = self.local_offers();
            return negotiate(&offers, &offers);
        }
        let remote: Vec<ProtocolOffer> = self
            .offered_protocols(receiver)?
            .into_iter()
            .filter(|o| o.protocol != LOOPBACK)
            .collect();
        let local: Vec<ProtocolOffer> = self.local_offers().into_iter().filter(|o| o.protocol != LOOPBACK).collect();
        negotiate(&local, &remote)
    }

    pub fn resolve_tp_id(&self, account: &AccountId, protocol: &str) -> Result<TransferAddress, TransferError> {
        let unsupported = || TransferError::UnsupportedProtocol {
            account: account.clone(),
            protocol: protocol.to_owned(),
        };
        if self.store.contains(account) {
            if protocol == LOOPBACK {
                return Ok(TransferAddress(LOCAL_ADDRESS.into()));
            }
            if self.bindings.get(protocol).is_none() {
                return Err(unsupported());
            }
            return self.public_url.clone().map(TransferAddress).ok_or_else(unsupported);
        }
        let peers = self.peers.read();
        let entry = peers
            .get(account)
            .ok_or_else(|| TransferError::UnknownAccount(account.clone()))?;
        if protocol == LOOPBACK || entry.is_local() || !entry.protocols.iter().any(|o| o.protocol == protocol) {
            return Err(unsupported());
        }
        Ok(TransferAddress(entry.base_url.clone()))
    }

    fn envelope(&self, sender: &AccountId, receiver: &AccountId, command: &Command, payload: Vec<u8>) -> Envelope {
        Envelope {
            envelope_id: self.ids.next_id(),
            protocol_version: PROTOCOL_VERSION,
            sender: sender.clone(),
            receiver: receiver.clone(),
            command: command.kind(),
            payload,
            sent_at: self.clock.now(),
        }
    }

    fn check_sender(&self, sender: &AccountId) -> Result<(), TransferError> {
        if self.store.contains(sender) {
            Ok(())
        } else {
            Err(TransferError::UnknownAccount(sender.clone()))
        }
    }

    fn tap(&self) -> Option<Arc<dyn EnvelopeTap>> {
        self.tap.read().clone()
    }

    pub(crate) fn note_received(&self, envelope: &Envelope) {
        if let Some(tap) = self.tap() {
            tap.on_receive(envelope);
        }
    }

    /// Negotiates, resolves, marshals and delivers one command.
    pub fn send_command(
        &self,
        sender: &AccountId,
        receiver: &AccountId,
        command: &Command,
    ) -> Result<DeliveryReceipt, TransferError> {
        self.check_sender(sender)?;
        let protocol = self.negotiate_with(receiver)?;
        let address = self.resolve_tp_id(receiver, &protocol)?;
        let binding = self
            .bindings
            .get(&protocol)
            .ok_or_else(|| TransferError::UnsupportedProtocol {
                account: receiver.clone(),
                protocol: protocol.clone(),
            })?;
        let envelope = self.envelope(sender, receiver, command, command.encode());
        if let Some(tap) = self.tap() {
            tap.on_send(&envelope);
        }
        tracing::debug!(%sender, %receiver, command = ?envelope.command, %protocol, "sending");
        match self.retry.run(|| binding.send(&address, &envelope)) {
            Ok(attempts) => Ok(DeliveryReceipt {
                envelope_id: envelope.envelope_id,
                protocol,
                attempts,
            }),
            Err((attempts, e)) => Err(TransferError::DeliveryFailed {
                receiver: receiver.clone(),
                attempts,
                reason: e.to_string(),
            }),
        }
    }

    /// Sends `command` to every receiver with a fresh envelope each. Failures
    /// are reported per receiver and never stop the other deliveries.
    pub fn multicast(&self, sender: &AccountId, receivers: &[AccountId], command: &Command) -> MulticastReport {
        let mut report = MulticastReport::default();
        if let Err(e) = self.check_sender(sender) {
            report.entries = receivers.iter().map(|r| failed_entry(r, None, None, &e)).collect();
            return report;
        }
        let payload = command.encode();
        let mut slots: Vec<Option<MulticastEntry>> = vec![None; receivers.len()];
        let mut by_protocol: BTreeMap<String, Vec<(usize, TransferAddress, Envelope)>> = BTreeMap::new();
        for (idx, receiver) in receivers.iter().enumerate() {
            let routed = self
                .negotiate_with(receiver)
                .and_then(|p| self.resolve_tp_id(receiver, &p).map(|a| (p, a)));
            match routed {
                Ok((protocol, address)) => {
                    let envelope = self.envelope(sender, receiver, command, payload.clone());
                    by_protocol.entry(protocol).or_default().push((idx, address, envelope));
                }
                Err(e) => slots[idx] = Some(failed_entry(receiver, None, None, &e)),
            }
        }
        let tap = self.tap();
        for (protocol, batch) in by_protocol {
            let Some(binding) = self.bindings.get(&protocol) else {
                for (idx, _, envelope) in batch {
                    let e = TransferError::UnsupportedProtocol {
                        account: envelope.receiver.clone(),
                        protocol: protocol.clone(),
                    };
                    slots[idx] = Some(failed_entry(&envelope.receiver, Some(&envelope), Some(&protocol), &e));
                }
                continue;
            };
            if let Some(tap) = &tap {
                for (_, _, envelope) in &batch {
                    tap.on_send(envelope);
                }
            }
            let targets: Vec<(TransferAddress, Envelope)> =
                batch.iter().map(|(_, a, e)| (a.clone(), e.clone())).collect();
            let results = binding.multicast(&targets, &self.retry);
            for ((idx, _, envelope), result) in batch.into_iter().zip(results) {
                slots[idx] = Some(match result {
                    Ok(_) => MulticastEntry {
                        receiver: envelope.receiver.clone(),
                        envelope_id: Some(envelope.envelope_id),
                        protocol: Some(protocol.clone()),
                        ok: true,
                        error: None,
                    },
                    Err((attempts, e)) => failed_entry(
                        &envelope.receiver,
                        Some(&envelope),
                        Some(&protocol),
                        &TransferError::DeliveryFailed {
                            receiver: envelope.receiver.clone(),
                            attempts,
                            reason: e.to_string(),
                        },
                    ),
                });
            }
        }
        report.entries = slots.into_iter().flatten().collect();
        report
    }
}

fn failed_entry(
    receiver: &AccountId,
    envelope: Option<&Envelope>,
    protocol: Option<&str>,
    error: &TransferError,
) -> MulticastEntry {
    MulticastEntry {
        receiver: receiver.clone(),
        envelope_id: envelope.map(|e| e.envelope_id),
        protocol: protocol.map(str::to_owned),
        ok: false,
        error: Some(error.to_string()),
    }
}
