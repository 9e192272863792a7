//! HTTP point-to-point binding with application-layer multicast.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use deus_core::transfer::{AttemptError, Binding, BindingDescriptor, Envelope, RetryPolicy, TransferAddress};

pub const HTTP_PROTOCOL: &str = "http";
pub const HTTP_PRIORITY: u8 = 50;
pub const MESSAGE_PATH: &str = "/deus/tp/http/v1/message";

pub struct HttpBinding {
    descriptor: BindingDescriptor,
    agent: ureq::Agent,
    sent: AtomicU64,
    attempts: AtomicU64,
}

impl HttpBinding {
    pub fn new(timeout: Duration) -> Self {
        Self {
            descriptor: BindingDescriptor::new(HTTP_PROTOCOL, HTTP_PRIORITY, true),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            sent: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
        }
    }

    /// Envelopes accepted by a peer.
    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }

    /// POST requests issued, including failed ones.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl Default for HttpBinding {
    fn default() -> Self {
        Self::new(Duration::from_secs(10))
    }
}

pub fn message_url(base: &str) -> String {
    format!("{}{MESSAGE_PATH}", base.trim_end_matches('/'))
}

impl Binding for HttpBinding {
    fn descriptor(&self) -> &BindingDescriptor {
        &self.descriptor
    }

    fn send(&self, address: &TransferAddress, envelope: &Envelope) -> Result<(), AttemptError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let result = self
            .agent
            .post(&message_url(&address.0))
            .set("content-type", "application/json")
            .send_string(&envelope.to_json());
        match result {
            Ok(_) => {
                self.sent.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Err(ureq::Error::Status(code, response)) => {
                let body = response.into_string().unwrap_or_default();
                let reason = format!("{address} answered {code}: {body}");
                if (400..500).contains(&code) {
                    Err(AttemptError::Permanent(reason))
                } else {
                    Err(AttemptError::Transient(reason))
                }
            }
            Err(e) => Err(AttemptError::Transient(format!("{address}: {e}"))),
        }
    }

    /// Sends to all targets in parallel, each with its own retries.
    fn multicast(
        &self,
        targets: &[(TransferAddress, Envelope)],
        retry: &RetryPolicy,
    ) -> Vec<Result<u32, (u32, AttemptError)>> {
        thread::scope(|scope| {
            let handles: Vec<_> = targets
                .iter()
                .map(|(address, envelope)| scope.spawn(move || retry.run(|| self.send(address, envelope))))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err((1, AttemptError::Transient("sender thread panicked".into()))))
                })
                .collect()
        })
    }
}
