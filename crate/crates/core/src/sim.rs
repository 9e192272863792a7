//! In-process network joining several nodes, for tests and simulations.
//!
//! Envelopes cross it in their JSON wire form, so it exercises the same
//! marshalling as a real network binding while staying deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use parking_lot::RwLock;

use crate::node::Node;
use crate::transfer::{
    AttemptError, Binding, BindingDescriptor, Envelope, PeerEntry, PeerTable, ProtocolOffer, TransferAddress,
    TransferError,
};

pub const SIM_PROTOCOL: &str = "sim";
pub const SIM_PRIORITY: u8 = 50;

#[derive(Default)]
pub struct SimNetwork {
    nodes: RwLock<BTreeMap<String, Weak<Node>>>,
    down: RwLock<BTreeSet<String>>,
    sent: AtomicU64,
}

pub fn sim_address(node_name: &str) -> String {
    format!("http://{node_name}.sim")
}

impl SimNetwork {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Registers the sim binding on `node` and makes it reachable.
    pub fn attach(self: &Arc<Self>, node: &Arc<Node>) {
        self.nodes.write().insert(node.name().to_owned(), Arc::downgrade(node));
        node.transfer()
            .bindings()
            .register(Arc::new(SimBinding {
                descriptor: BindingDescriptor::new(SIM_PROTOCOL, SIM_PRIORITY, false),
                network: Arc::downgrade(self),
            }))
            .expect("sim binding registered once per node");
    }

    /// Gives every attached node a peer table listing the accounts of all
    /// the other nodes.
    pub fn wire(&self) -> Result<(), TransferError> {
        let nodes: Vec<Arc<Node>> = self.nodes.read().values().filter_map(Weak::upgrade).collect();
        for node in &nodes {
            let mut table = PeerTable::new();
            for other in nodes.iter().filter(|o| o.name() != node.name()) {
                for account in other.accounts() {
                    table.insert(PeerEntry {
                        account,
                        base_url: sim_address(other.name()),
                        protocols: vec![ProtocolOffer::new(SIM_PROTOCOL, SIM_PRIORITY)],
                    })?;
                }
            }
            node.transfer().set_peers(table);
        }
        Ok(())
    }

    pub fn set_down(&self, node_name: &str, down: bool) {
        let mut set = self.down.write();
        if down {
            set.insert(node_name.to_owned());
        } else {
            set.remove(node_name);
        }
    }

    /// Envelopes that crossed the network successfully.
    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }

    fn deliver(&self, address: &TransferAddress, envelope: &Envelope) -> Result<(), AttemptError> {
        let name = address
            .0
            .strip_prefix("http://")
            .and_then(|rest| rest.strip_suffix(".sim"))
            .ok_or_else(|| AttemptError::Permanent(format!("not a sim address: {address}")))?;
        if self.down.read().contains(name) {
            return Err(AttemptError::Transient(format!("{name} is down")));
        }
        let node = self
            .nodes
            .read()
            .get(name)
            .and_then(Weak::upgrade)
            .ok_or_else(|| AttemptError::Transient(format!("{name} is not running")))?;
        let wire = envelope.to_json();
        let decoded = Envelope::from_json(wire.as_bytes()).map_err(|e| AttemptError::Permanent(e.to_string()))?;
        match node.receive(decoded) {
            Ok(_) => {
                self.sent.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Err(e @ (TransferError::MalformedEnvelope(_) | TransferError::UnknownReceiverAccount(_))) => {
                Err(AttemptError::Permanent(e.to_string()))
            }
            Err(e) => Err(AttemptError::Transient(e.to_string())),
        }
    }
}

struct SimBinding {
    descriptor: BindingDescriptor,
    network: Weak<SimNetwork>,
}

impl Binding for SimBinding {
    fn descriptor(&self) -> &BindingDescriptor {
        &self.descriptor
    }

    fn send(&self, address: &TransferAddress, envelope: &Envelope) -> Result<(), AttemptError> {
        let network = self
            .network
            .upgrade()
            .ok_or_else(|| AttemptError::Permanent("network torn down".into()))?;
        network.deliver(address, envelope)
    }
}
