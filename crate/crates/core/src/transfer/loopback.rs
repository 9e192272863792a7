//! In-process delivery between accounts hosted on the same node.

use std::sync::{Arc, Weak};

use super::{AttemptError, Binding, BindingDescriptor, Envelope, TransferAddress, TransferError};

pub const LOOPBACK: &str = "loopback";
pub const LOOPBACK_PRIORITY: u8 = 100;

/// Receiving side of the transfer core.
pub trait MessageSink: Send + Sync {
    fn receive_message(&self, envelope: Envelope) -> Result<(), TransferError>;
}

/// Hands envelopes straight to the local receive path. Nothing is
/// serialized and payloads are passed through untouched.
pub struct LoopbackBinding {
    descriptor: BindingDescriptor,
    sink: Weak<dyn MessageSink>,
}

impl LoopbackBinding {
    pub fn new(sink: Weak<dyn MessageSink>) -> Self {
        Self {
            descriptor: BindingDescriptor::new(LOOPBACK, LOOPBACK_PRIORITY, false),
            sink,
        }
    }

    pub fn send_envelope(&self, envelope: Envelope) -> Result<(), TransferError> {
        let sink: Arc<dyn MessageSink> = self
            .sink
            .upgrade()
            .ok_or_else(|| TransferError::UnknownReceiverAccount(envelope.receiver.clone()))?;
        sink.receive_message(envelope)
    }
}

impl Binding for LoopbackBinding {
    fn descriptor(&self) -> &BindingDescriptor {
        &self.descriptor
    }

    fn send(&self, _address: &TransferAddress, envelope: &Envelope) -> Result<(), AttemptError> {
        self.send_envelope(envelope.clone()).map_err(|e| match e {
            TransferError::UnknownReceiverAccount(_) | TransferError::MalformedEnvelope(_) => {
                AttemptError::Permanent(e.to_string())
            }
            other => AttemptError::Transient(other.to_string()),
        })
    }
}
