//! A node hosting DEUS accounts: their keys, the transfer core, dispatch of
//! received commands to the Soul and routing of Barker decisions.

use std::collections::BTreeMap;
use std::sync::{Arc, Weak};

use chrono::Duration;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::barker::{self, AttentionElement, AttentionFilter, BarkerError, DecisionArgs, ElementId, PayloadRef, Subject, Verdict};
use crate::card::{CardError, DigitalCard, DEFAULT_MAX_BODY};
use crate::clock::IdSource;
use crate::identity::{AccountId, IdentityError, KeyRegistry, SignKey};
use crate::soul::{concerned, consumer};
use crate::store::{AccountDump, AccountProfile, AccountState, Store, StoreError, Txn};
use crate::transfer::{
    Command, CommandKind, Envelope, LoopbackBinding, MessageSink, MulticastEntry, MulticastReport, RetryPolicy,
    TransferCore, TransferError, PROTOCOL_VERSION,
};

/// Publications from a publisher whose grant has not arrived yet are kept
/// this long before being dropped.
pub const DEFAULT_HOLD_SECONDS: i64 = 60;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Barker(#[from] BarkerError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Card(#[from] CardError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error("card provider {provider} is not the calling account {account}")]
    WrongProvider { provider: AccountId, account: AccountId },
    #[error("no sign key held for {0}")]
    NoSignKey(AccountId),
    #[error("an account cannot subscribe to itself")]
    SelfSubscription,
    #[error("already subscribed to {0}")]
    AlreadySubscribed(AccountId),
    #[error("a subscription request to {0} is pending")]
    RequestPending(AccountId),
    #[error("not subscribed to {0}")]
    NotSubscribed(AccountId),
    #[error("{0} is not an accepted subscriber")]
    NotASubscriber(AccountId),
    #[error("no pending subscription request to {0}")]
    NoPendingRequest(AccountId),
    #[error("subscription decision signature does not verify")]
    BadSignature,
    #[error("{0} is not a confirmed publisher")]
    UnknownPublisher(AccountId),
    #[error("unknown publication group {0:?}")]
    UnknownGroup(String),
    #[error("invalid group name {0:?}")]
    InvalidGroup(String),
    #[error("no foreign file for {0}")]
    UnknownForeignFile(AccountId),
}

impl Error {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Store(e) => match e {
                StoreError::DuplicateAccount(_) => "DuplicateAccount",
                StoreError::UnknownAccount(_) => "UnknownAccount",
                StoreError::WrongConcernedPerson { .. } => "WrongConcernedPerson",
                StoreError::NotSigned(_) => "NotSigned",
                StoreError::ConflictingCardId(_) => "ConflictingCardId",
                StoreError::NotStaged(_) => "NotStaged",
                StoreError::NotInPif(_) => "NotInPif",
                StoreError::UnknownAccountId(_) => "UnknownAccountId",
                StoreError::VerificationFailed(_) => "VerificationFailed",
                StoreError::Io(_) => "StorageIo",
                StoreError::Corrupt(_) => "StorageCorrupt",
            },
            Self::Barker(e) => match e {
                BarkerError::UnknownAccount(_) => "UnknownAccount",
                BarkerError::NotPending(_) => "NotPending",
                BarkerError::NotAPlea(_) => "NotAPlea",
                BarkerError::UnknownElement(_) => "UnknownElement",
                BarkerError::NotUnread(_) => "NotUnread",
            },
            Self::Transfer(e) => match e {
                TransferError::DuplicateProtocol(_) => "DuplicateProtocol",
                TransferError::InvalidDescriptor(_) => "InvalidDescriptor",
                TransferError::NoCommonProtocol => "NoCommonProtocol",
                TransferError::UnknownAccount(_) => "UnknownAccount",
                TransferError::UnsupportedProtocol { .. } => "UnsupportedProtocol",
                TransferError::DeliveryFailed { .. } => "DeliveryFailed",
                TransferError::MalformedEnvelope(_) => "MalformedEnvelope",
                TransferError::UnknownReceiverAccount(_) => "UnknownReceiverAccount",
                TransferError::PeerTable(_) => "PeerTable",
                TransferError::Unavailable(_) => "Unavailable",
            },
            Self::Card(e) => match e {
                CardError::AlreadySigned => "AlreadySigned",
                CardError::MissingContributorSig => "MissingContributorSig",
                CardError::AlreadyCounterSigned => "AlreadyCounterSigned",
                CardError::UnknownAccount(_) => "UnknownAccount",
                CardError::InvalidField { .. } => "ValidationError",
            },
            Self::Identity(e) => match e {
                IdentityError::MalformedUri { .. } => "MalformedUri",
                IdentityError::DuplicateKey(_) => "DuplicateKey",
                _ => "InvalidKey",
            },
            Self::WrongProvider { .. } => "WrongProvider",
            Self::NoSignKey(_) => "NoSignKey",
            Self::SelfSubscription => "SelfSubscription",
            Self::AlreadySubscribed(_) => "AlreadySubscribed",
            Self::RequestPending(_) => "RequestPending",
            Self::NotSubscribed(_) => "NotSubscribed",
            Self::NotASubscriber(_) => "NotASubscriber",
            Self::NoPendingRequest(_) => "NoPendingRequest",
            Self::BadSignature => "BadSignature",
            Self::UnknownPublisher(_) => "UnknownPublisher",
            Self::UnknownGroup(_) => "UnknownGroup",
            Self::InvalidGroup(_) => "InvalidGroup",
            Self::UnknownForeignFile(_) => "UnknownForeignFile",
        }
    }
}

pub struct NodeOptions {
    pub name: String,
    /// Base URL other nodes reach this one at, if it serves HTTP.
    pub public_url: Option<String>,
    pub retry: RetryPolicy,
    pub max_body: usize,
    pub hold_window: Duration,
    pub ids: IdSource,
}

impl NodeOptions {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            public_url: None,
            retry: RetryPolicy::default(),
            max_body: DEFAULT_MAX_BODY,
            hold_window: Duration::seconds(DEFAULT_HOLD_SECONDS),
            ids: IdSource::Random,
        }
    }
}

/// Work a transaction hands to the transfer core once it has committed.
#[derive(Debug, Clone)]
pub(crate) enum Outbound {
    Send { to: AccountId, command: Command },
    Publish { to: Vec<AccountId>, card: Arc<DigitalCard> },
}

/// What became of one received envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReceiveOutcome {
    Dispatched,
    /// The envelope id was seen before; nothing ran.
    Duplicate,
    /// The handler refused the command; a notice was recorded instead.
    Rejected(Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Decided {
    pub element: AttentionElement,
    pub report: MulticastReport,
}

pub struct Node {
    name: String,
    store: Arc<Store>,
    registry: RwLock<Arc<KeyRegistry>>,
    keys: RwLock<BTreeMap<AccountId, SignKey>>,
    transfer: TransferCore,
    max_body: usize,
    hold_window: Duration,
}

impl MessageSink for Node {
    fn receive_message(&self, envelope: Envelope) -> Result<(), TransferError> {
        self.receive(envelope).map(|_| ())
    }
}

impl Node {
    /// Builds a node over `store` with the loopback binding registered.
    pub fn new(store: Arc<Store>, registry: KeyRegistry, options: NodeOptions) -> Arc<Self> {
        Arc::new_cyclic(|weak: &Weak<Node>| {
            let sink: Weak<dyn MessageSink> = weak.clone();
            let transfer = TransferCore::new(
                store.clone(),
                store.clock_handle(),
                options.ids,
                options.retry,
                options.public_url,
            );
            transfer
                .bindings()
                .register(Arc::new(LoopbackBinding::new(sink)))
                .expect("fresh binding registry accepts loopback");
            Self {
                name: options.name,
                store,
                registry: RwLock::new(Arc::new(registry)),
                keys: RwLock::new(BTreeMap::new()),
                transfer,
                max_body: options.max_body,
                hold_window: options.hold_window,
            }
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn transfer(&self) -> &TransferCore {
        &self.transfer
    }

    pub fn max_body(&self) -> usize {
        self.max_body
    }

    pub(crate) fn hold_window(&self) -> Duration {
        self.hold_window
    }

    pub fn registry(&self) -> Arc<KeyRegistry> {
        self.registry.read().clone()
    }

    /// Swaps in a new registry snapshot atomically.
    pub fn set_registry(&self, registry: KeyRegistry) {
        *self.registry.write() = Arc::new(registry);
    }

    pub fn add_sign_key(&self, account: AccountId, key: SignKey) {
        self.keys.write().insert(account, key);
    }

    pub(crate) fn sign_key(&self, account: &AccountId) -> Result<SignKey, Error> {
        self.keys
            .read()
            .get(account)
            .cloned()
            .ok_or_else(|| Error::NoSignKey(account.clone()))
    }

    /// Provisions an account. A supplied key must match the registered
    /// verify key, or is registered if the account has none yet.
    pub fn provision_account(
        &self,
        account: AccountId,
        profile: AccountProfile,
        key: Option<SignKey>,
    ) -> Result<Arc<AccountState>, Error> {
        if let Some(key) = &key {
            let mut registry = self.registry.write();
            match registry.verify_key(&account) {
                Some(vk) if *vk != key.verify_key() => {
                    return Err(IdentityError::InvalidKey(format!(
                        "sign key does not match the registered verify key of {account}"
                    ))
                    .into());
                }
                Some(_) => {}
                None => {
                    let mut updated = registry.as_ref().clone();
                    updated.register(account.clone(), key.verify_key())?;
                    *registry = Arc::new(updated);
                }
            }
        }
        let state = self.store.provision_account(account.clone(), profile)?;
        if let Some(key) = key {
            self.add_sign_key(account, key);
        }
        Ok(state)
    }

    pub fn accounts(&self) -> Vec<AccountId> {
        self.store.accounts()
    }

    pub fn state(&self, account: &AccountId) -> Result<Arc<AccountState>, Error> {
        self.store
            .read(account)
            .ok_or_else(|| StoreError::UnknownAccount(account.clone()).into())
    }

    pub fn dump(&self, account: &AccountId) -> Result<AccountDump, Error> {
        Ok(self.store.dump(account)?)
    }

    pub fn import(&self, dump: &AccountDump) -> Result<(), Error> {
        Ok(self.store.restore(dump)?)
    }

    /// Runs every outbound item in order and collects per-recipient results.
    pub(crate) fn execute(&self, sender: &AccountId, outbound: Vec<Outbound>) -> MulticastReport {
        let mut report = MulticastReport::default();
        for item in outbound {
            match item {
                Outbound::Send { to, command } => {
                    let entry = match self.transfer.send_command(sender, &to, &command) {
                        Ok(receipt) => MulticastEntry {
                            receiver: to,
                            envelope_id: Some(receipt.envelope_id),
                            protocol: Some(receipt.protocol),
                            ok: true,
                            error: None,
                        },
                        Err(e) => MulticastEntry {
                            receiver: to,
                            envelope_id: None,
                            protocol: None,
                            ok: false,
                            error: Some(e.to_string()),
                        },
                    };
                    report.entries.push(entry);
                }
                Outbound::Publish { to, card } => {
                    if to.is_empty() {
                        continue;
                    }
                    report.extend(self.transfer.multicast(sender, &to, &Command::PublishCard(card.as_ref().clone())));
                }
            }
        }
        for failed in report.entries.iter().filter(|e| !e.ok) {
            tracing::warn!(%sender, receiver = %failed.receiver, error = ?failed.error, "delivery failed");
        }
        report
    }

    /// Receive path of the transfer core: deduplicates by envelope id and
    /// dispatches to the Soul handler for the command, all inside the
    /// receiver's transaction. Outbound effects run after commit.
    pub fn receive(&self, envelope: Envelope) -> Result<ReceiveOutcome, TransferError> {
        if envelope.protocol_version != PROTOCOL_VERSION {
            return Err(TransferError::MalformedEnvelope(format!(
                "unsupported protocol version {}",
                envelope.protocol_version
            )));
        }
        if !self.store.contains(&envelope.receiver) {
            return Err(TransferError::UnknownReceiverAccount(envelope.receiver.clone()));
        }
        let command = envelope.command()?;
        self.transfer.note_received(&envelope);
        let receiver = envelope.receiver.clone();
        let sender = envelope.sender.clone();
        let kind = envelope.command;
        let written = self.store.write(&receiver, |txn| {
            if txn.is_seen(&envelope.envelope_id) {
                return Ok::<_, StoreError>((ReceiveOutcome::Duplicate, Vec::new()));
            }
            consumer::expire_holds(self, txn);
            let checkpoint = txn.checkpoint();
            let result = match self.dispatch(txn, &sender, command) {
                Ok(outbound) => (ReceiveOutcome::Dispatched, outbound),
                Err(e) => {
                    txn.rollback(checkpoint);
                    barker::add_notification(
                        txn,
                        rejection_subject(kind),
                        PayloadRef::Account(sender.clone()),
                        format!("rejected {kind:?} from {sender}: {e}"),
                    );
                    tracing::info!(%receiver, %sender, ?kind, error = %e, "command rejected");
                    (ReceiveOutcome::Rejected(e), Vec::new())
                }
            };
            txn.record_seen(envelope.envelope_id);
            Ok(result)
        });
        let (outcome, outbound) = written.map_err(|e| match e {
            StoreError::UnknownAccount(a) => TransferError::UnknownReceiverAccount(a),
            other => TransferError::Unavailable(other.to_string()),
        })?;
        if !outbound.is_empty() {
            self.execute(&receiver, outbound);
        }
        Ok(outcome)
    }

    fn dispatch(&self, txn: &mut Txn<'_>, sender: &AccountId, command: Command) -> Result<Vec<Outbound>, Error> {
        match command {
            Command::RequestSubscription => concerned::on_request_subscription(self, txn, sender),
            Command::DecisionSubscription(decision) => consumer::on_decision(self, txn, sender, decision),
            Command::CancelSubscription { demand_deletion } => consumer::on_cancel(self, txn, sender, demand_deletion),
            Command::Unsubscribe => concerned::on_unsubscribe(self, txn, sender),
            Command::RepatriateCard(card) => concerned::on_repatriate(self, txn, sender, card),
            Command::PublishCard(card) => consumer::on_publish(self, txn, sender, card),
            Command::Notice(body) => consumer::on_notice(self, txn, sender, body),
        }
    }

    /// Records a verdict on a plea and runs the Soul handler registered for
    /// its `(subject, payload_ref)`, exactly once.
    pub fn decide(
        &self,
        account: &AccountId,
        element_id: ElementId,
        verdict: Verdict,
        args: DecisionArgs,
    ) -> Result<Decided, Error> {
        let (element, outbound) = self.store.write(account, |txn| {
            let element = barker::decide(txn, element_id, verdict, args.clone())?;
            let outbound = match (&element.subject, &element.payload_ref) {
                (Subject::Repatriation, PayloadRef::Card(card_id)) => {
                    concerned::decide_repatriation(self, txn, card_id, verdict, &args)?
                }
                (Subject::SubscriptionRequest, PayloadRef::Account(requester)) => {
                    concerned::decide_subscription(self, txn, requester, verdict, &args)?
                }
                (Subject::ManualSelection, PayloadRef::Account(subscriber)) => {
                    concerned::decide_manual_selection(self, txn, subscriber, verdict, &args)?
                }
                (Subject::DeletionDemand, PayloadRef::Account(publisher)) => {
                    consumer::decide_deletion(txn, publisher, verdict)
                }
                _ => Vec::new(),
            };
            Ok::<_, Error>((element, outbound))
        })?;
        let report = self.execute(account, outbound);
        Ok(Decided { element, report })
    }

    pub fn mark_read(&self, account: &AccountId, element_id: ElementId) -> Result<(), Error> {
        self.store
            .write(account, |txn| barker::mark_read(txn, element_id).map_err(Error::from))
    }

    pub fn list_attention(&self, account: &AccountId, filter: AttentionFilter) -> Result<Vec<AttentionElement>, Error> {
        Ok(barker::list_attention(&*self.state(account)?, filter))
    }

    pub fn history(&self, account: &AccountId) -> Result<Vec<AttentionElement>, Error> {
        Ok(barker::history(&*self.state(account)?).to_vec())
    }

    /// Drops held publications past the hold window on every account.
    pub fn sweep_holds(&self) {
        let now = self.store.clock().now();
        for account in self.store.accounts() {
            let Some(state) = self.store.read(&account) else { continue };
            if state.held.iter().all(|h| now - h.received_at <= self.hold_window) {
                continue;
            }
            let _ = self.store.write(&account, |txn| {
                consumer::expire_holds(self, txn);
                Ok::<_, StoreError>(())
            });
        }
    }
}

fn rejection_subject(kind: CommandKind) -> Subject {
    match kind {
        CommandKind::RepatriateCard => Subject::Repatriation,
        CommandKind::RequestSubscription => Subject::SubscriptionRequest,
        _ => Subject::GenericNotice,
    }
}
