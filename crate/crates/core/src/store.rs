//! Multi-tenant account store.
//!
//! Each account's state is derived from an append-only log of
//! [`AccountEvent`]s. Mutations go through a [`Txn`]: the closure works on a
//! private copy of the state, and on success the emitted events are appended
//! to the journal as one record before the new state is published to
//! readers. Writers are serialized per account; readers get `Arc` snapshots.
//!
//! On disk every account owns a directory under the data root holding
//! `events.log` (one JSON record per committed transaction) and, after
//! compaction, `snapshot.json`. A torn trailing record is ignored on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::ops::{Deref, DerefMut};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use crate::barker::{self, AttentionElement, PayloadRef, Subject};
use crate::card::{self, CardId, DigitalCard, Overall};
use crate::clock::Clock;
use crate::identity::{AccountId, KeyRegistry, SignKey};

/// Name of the group every subscriber lands in unless told otherwise.
pub const DEFAULT_GROUP: &str = "all";
/// How long envelope ids are remembered for duplicate suppression.
pub const SEEN_RETENTION_DAYS: i64 = 30;
const COMPACT_AFTER_RECORDS: u64 = 512;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("account {0} is already provisioned")]
    DuplicateAccount(AccountId),
    #[error("account {0} is not provisioned on this node")]
    UnknownAccount(AccountId),
    #[error("card {card} is addressed to {concerned}, not this account")]
    WrongConcernedPerson { card: CardId, concerned: AccountId },
    #[error("card {0} is not single-signed by its contributor")]
    NotSigned(CardId),
    #[error("card id {0} already stored with different content")]
    ConflictingCardId(CardId),
    #[error("card {0} is not staged")]
    NotStaged(CardId),
    #[error("card {0} is not in the personal information file")]
    NotInPif(CardId),
    #[error("account id {0} in relationship mutation is unknown")]
    UnknownAccountId(AccountId),
    #[error("card verification failed: {0}")]
    VerificationFailed(String),
    #[error("storage i/o: {0}")]
    Io(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccountMode {
    #[default]
    Interactive,
    VirtualAutoAccept,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    GlobalSet,
    ManualSelection,
    GroupHistory,
    #[default]
    Nothing,
}

/// Initial-publication strategy and the data it draws on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default)]
    pub global_set: Vec<CardId>,
    /// Cards published per group, in publication order.
    #[serde(default)]
    pub publication_log: BTreeMap<String, Vec<CardId>>,
}

/// Provisioning-time settings of an account.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AccountProfile {
    #[serde(default)]
    pub mode: AccountMode,
    #[serde(default)]
    pub strategy: StrategyKind,
    /// Skip subscriber selection and publish every accepted card to all
    /// subscribers. Defaults to on for virtual accounts.
    #[serde(default)]
    pub publish_to_all: bool,
    /// Ask unsubscribing consumers to delete their foreign file.
    #[serde(default)]
    pub demand_deletion_on_unsubscribe: bool,
    /// Subscribers a virtual account grants without asking, with the group
    /// each one lands in.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subscriber_template: BTreeMap<AccountId, String>,
}

impl AccountProfile {
    pub fn interactive(strategy: StrategyKind) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn virtual_account() -> Self {
        Self {
            mode: AccountMode::VirtualAutoAccept,
            publish_to_all: true,
            ..Self::default()
        }
    }
}

/// Cards keyed by id; serialized as a plain list of cards.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CardMap(BTreeMap<CardId, Arc<DigitalCard>>);

impl Deref for CardMap {
    type Target = BTreeMap<CardId, Arc<DigitalCard>>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl DerefMut for CardMap {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

impl Serialize for CardMap {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.0.values())
    }
}

impl<'de> Deserialize<'de> for CardMap {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let cards = Vec::<Arc<DigitalCard>>::deserialize(deserializer)?;
        Ok(Self(cards.into_iter().map(|c| (c.id.clone(), c)).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HeldPublication {
    pub sender: AccountId,
    pub card: Arc<DigitalCard>,
    pub received_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "op", content = "args")]
pub enum RelationshipMutation {
    AddSubscriber { subscriber: AccountId, group: String },
    RemoveSubscriber(AccountId),
    AddPublisher(AccountId),
    RemovePublisher(AccountId),
}

/// Everything one tenant owns on a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AccountState {
    pub account: AccountId,
    pub profile: AccountProfile,
    pub strategy: StrategyConfig,
    pub staging: CardMap,
    pub pif: CardMap,
    pub confirmed_publishers: BTreeSet<AccountId>,
    pub accepted_subscribers: BTreeMap<AccountId, String>,
    /// Group name to members. Kept in lockstep with `accepted_subscribers`;
    /// groups stay defined after their last member leaves.
    pub groups: BTreeMap<String, BTreeSet<AccountId>>,
    /// Publishers this account has asked for a subscription.
    pub pending_requests: BTreeSet<AccountId>,
    /// Foreign information files keyed by concerned person.
    pub fifs: BTreeMap<AccountId, CardMap>,
    pub held: Vec<HeldPublication>,
    pub attention: Vec<AttentionElement>,
    pub seen_envelopes: BTreeMap<Uuid, DateTime<Utc>>,
    pub next_discriminator: u64,
    pub next_element_id: u64,
}

impl AccountState {
    fn new(account: AccountId, profile: AccountProfile) -> Self {
        let strategy = StrategyConfig {
            kind: profile.strategy,
            ..StrategyConfig::default()
        };
        Self {
            account,
            profile,
            strategy,
            staging: CardMap::default(),
            pif: CardMap::default(),
            confirmed_publishers: BTreeSet::new(),
            accepted_subscribers: BTreeMap::new(),
            groups: BTreeMap::from([(DEFAULT_GROUP.to_owned(), BTreeSet::new())]),
            pending_requests: BTreeSet::new(),
            fifs: BTreeMap::new(),
            held: Vec::new(),
            attention: Vec::new(),
            seen_envelopes: BTreeMap::new(),
            next_discriminator: 1,
            next_element_id: 1,
        }
    }

    /// The distributed information folder: every card in every foreign file.
    pub fn dif(&self) -> Vec<Arc<DigitalCard>> {
        self.fifs.values().flat_map(|f| f.values().cloned()).collect()
    }

    fn apply(&mut self, event: &AccountEvent) {
        match event {
            AccountEvent::Provisioned { .. } => {}
            AccountEvent::CardStaged(card) => {
                self.staging.insert(card.id.clone(), card.clone());
            }
            AccountEvent::StagedRemoved(id) => {
                self.staging.remove(id);
            }
            AccountEvent::PifInserted(card) => {
                self.pif.insert(card.id.clone(), card.clone());
            }
            AccountEvent::Relationship(mutation) => match mutation {
                RelationshipMutation::AddSubscriber { subscriber, group } => {
                    if let Some(old) = self.accepted_subscribers.insert(subscriber.clone(), group.clone()) {
                        if let Some(members) = self.groups.get_mut(&old) {
                            members.remove(subscriber);
                        }
                    }
                    self.groups
                        .entry(group.clone())
                        .or_default()
                        .insert(subscriber.clone());
                }
                RelationshipMutation::RemoveSubscriber(subscriber) => {
                    if let Some(old) = self.accepted_subscribers.remove(subscriber) {
                        if let Some(members) = self.groups.get_mut(&old) {
                            members.remove(subscriber);
                        }
                    }
                }
                RelationshipMutation::AddPublisher(p) => {
                    self.confirmed_publishers.insert(p.clone());
                }
                RelationshipMutation::RemovePublisher(p) => {
                    self.confirmed_publishers.remove(p);
                }
            },
            AccountEvent::PendingRequestAdded(p) => {
                self.pending_requests.insert(p.clone());
            }
            AccountEvent::PendingRequestCleared(p) => {
                self.pending_requests.remove(p);
            }
            AccountEvent::FifAbsorbed(card) => {
                self.fifs
                    .entry(card.id.concerned.clone())
                    .or_default()
                    .insert(card.id.clone(), card.clone());
            }
            AccountEvent::FifDeleted(concerned) => {
                self.fifs.remove(concerned);
            }
            AccountEvent::PublicationHeld(held) => self.held.push(held.clone()),
            AccountEvent::HeldReleased { card_id } => self.held.retain(|h| &h.card.id != card_id),
            AccountEvent::Attention(element) => {
                self.next_element_id = self.next_element_id.max(element.element_id + 1);
                self.attention.push(element.clone());
            }
            AccountEvent::EnvelopeSeen { id, at } => {
                self.seen_envelopes.insert(*id, *at);
            }
            AccountEvent::SeenPruned { before } => self.seen_envelopes.retain(|_, at| *at >= *before),
            AccountEvent::PublicationLogged { group, card_id } => {
                let log = self.strategy.publication_log.entry(group.clone()).or_default();
                if !log.contains(card_id) {
                    log.push(card_id.clone());
                }
            }
            AccountEvent::StrategyChanged { kind, global_set } => {
                self.strategy.kind = *kind;
                self.strategy.global_set = global_set.clone();
            }
            AccountEvent::GroupDefined(group) => {
                self.groups.entry(group.clone()).or_default();
            }
            AccountEvent::DiscriminatorIssued(n) => self.next_discriminator = n + 1,
        }
    }
}

/// A state change in one account. The log of these is the source of truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", content = "data")]
pub enum AccountEvent {
    Provisioned { account: AccountId, profile: AccountProfile },
    CardStaged(Arc<DigitalCard>),
    StagedRemoved(CardId),
    PifInserted(Arc<DigitalCard>),
    Relationship(RelationshipMutation),
    PendingRequestAdded(AccountId),
    PendingRequestCleared(AccountId),
    FifAbsorbed(Arc<DigitalCard>),
    FifDeleted(AccountId),
    PublicationHeld(HeldPublication),
    HeldReleased { card_id: CardId },
    Attention(AttentionElement),
    EnvelopeSeen { id: Uuid, at: DateTime<Utc> },
    SeenPruned { before: DateTime<Utc> },
    PublicationLogged { group: String, card_id: CardId },
    StrategyChanged { kind: StrategyKind, global_set: Vec<CardId> },
    GroupDefined(String),
    DiscriminatorIssued(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Stored,
    AlreadyPresent,
}

/// A write transaction over one account.
pub struct Txn<'a> {
    state: AccountState,
    events: Vec<AccountEvent>,
    clock: &'a dyn Clock,
}

/// Restore point inside a transaction.
pub struct Checkpoint {
    state: AccountState,
    events: usize,
}

impl<'a> Txn<'a> {
    pub fn state(&self) -> &AccountState {
        &self.state
    }

    pub fn account(&self) -> &AccountId {
        &self.state.account
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn emit(&mut self, event: AccountEvent) {
        self.state.apply(&event);
        self.events.push(event);
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            state: self.state.clone(),
            events: self.events.len(),
        }
    }

    pub fn rollback(&mut self, to: Checkpoint) {
        self.state = to.state;
        self.events.truncate(to.events);
    }

    /// Stores a single-signed card addressed to this account in staging.
    pub fn stage_card(&mut self, card: &DigitalCard, registry: &KeyRegistry) -> Result<Outcome, StoreError> {
        if &card.id.concerned != self.account() {
            return Err(StoreError::WrongConcernedPerson {
                card: card.id.clone(),
                concerned: card.id.concerned.clone(),
            });
        }
        let report = card::verify_card(card, registry)
            .map_err(|e| StoreError::VerificationFailed(e.to_string()))?;
        if report.overall != Overall::SingleSigned {
            return Err(StoreError::NotSigned(card.id.clone()));
        }
        if let Some(existing) = self.state.staging.get(&card.id) {
            return if existing.as_ref() == card {
                Ok(Outcome::AlreadyPresent)
            } else {
                Err(StoreError::ConflictingCardId(card.id.clone()))
            };
        }
        if let Some(existing) = self.state.pif.get(&card.id) {
            return if &existing.without_counter_sig() == card {
                Ok(Outcome::AlreadyPresent)
            } else {
                Err(StoreError::ConflictingCardId(card.id.clone()))
            };
        }
        self.emit(AccountEvent::CardStaged(Arc::new(card.clone())));
        Ok(Outcome::Stored)
    }

    /// Moves a staged card into the PIF, counter-signing it on the way.
    pub fn assimilate(
        &mut self,
        card_id: &CardId,
        key: &SignKey,
        registry: &KeyRegistry,
    ) -> Result<Arc<DigitalCard>, StoreError> {
        let staged = self
            .state
            .staging
            .get(card_id)
            .cloned()
            .ok_or_else(|| StoreError::NotStaged(card_id.clone()))?;
        let signed = card::counter_sign(&staged, key)
            .map_err(|e| StoreError::VerificationFailed(e.to_string()))?;
        let report = card::verify_card(&signed, registry)
            .map_err(|e| StoreError::VerificationFailed(e.to_string()))?;
        if report.overall != Overall::DoubleSigned {
            return Err(StoreError::VerificationFailed(format!(
                "counter-signed card {card_id} verifies as {:?}",
                report.overall
            )));
        }
        let signed = Arc::new(signed);
        self.emit(AccountEvent::StagedRemoved(card_id.clone()));
        self.emit(AccountEvent::PifInserted(signed.clone()));
        Ok(signed)
    }

    /// Drops a staged card for good and records a notice.
    pub fn discard_staged(&mut self, card_id: &CardId) -> Result<(), StoreError> {
        if !self.state.staging.contains_key(card_id) {
            return Err(StoreError::NotStaged(card_id.clone()));
        }
        self.emit(AccountEvent::StagedRemoved(card_id.clone()));
        barker::add_notification(
            self,
            Subject::Repatriation,
            PayloadRef::Card(card_id.clone()),
            format!("staged card {} discarded", card_id.discriminator),
        );
        Ok(())
    }

    pub fn mutate_relationships(
        &mut self,
        mutation: RelationshipMutation,
        registry: &KeyRegistry,
    ) -> Result<(), StoreError> {
        let subject = match &mutation {
            RelationshipMutation::AddSubscriber { subscriber, .. } => subscriber,
            RelationshipMutation::RemoveSubscriber(a)
            | RelationshipMutation::AddPublisher(a)
            | RelationshipMutation::RemovePublisher(a) => a,
        };
        if !registry.contains(subject) {
            return Err(StoreError::UnknownAccountId(subject.clone()));
        }
        self.emit(AccountEvent::Relationship(mutation));
        Ok(())
    }

    /// Stores a verified double-signed card in the foreign file of its
    /// concerned person.
    pub fn absorb_into_fif(&mut self, card: &DigitalCard, registry: &KeyRegistry) -> Result<Outcome, StoreError> {
        let report = card::verify_card(card, registry)
            .map_err(|e| StoreError::VerificationFailed(e.to_string()))?;
        if report.overall != Overall::DoubleSigned {
            return Err(StoreError::VerificationFailed(format!(
                "card {} verifies as {:?}",
                card.id, report.overall
            )));
        }
        if let Some(existing) = self.state.fifs.get(&card.id.concerned).and_then(|f| f.get(&card.id)) {
            return if existing.as_ref() == card {
                Ok(Outcome::AlreadyPresent)
            } else {
                Err(StoreError::ConflictingCardId(card.id.clone()))
            };
        }
        self.emit(AccountEvent::FifAbsorbed(Arc::new(card.clone())));
        Ok(Outcome::Stored)
    }

    pub fn is_seen(&self, envelope: &Uuid) -> bool {
        self.state.seen_envelopes.contains_key(envelope)
    }

    /// Remembers an envelope id and forgets those past the retention window.
    pub fn record_seen(&mut self, envelope: Uuid) {
        let now = self.now();
        let horizon = now - Duration::days(SEEN_RETENTION_DAYS);
        if self.state.seen_envelopes.values().any(|at| *at < horizon) {
            self.emit(AccountEvent::SeenPruned { before: horizon });
        }
        self.emit(AccountEvent::EnvelopeSeen { id: envelope, at: now });
    }

    pub fn issue_discriminator(&mut self) -> String {
        let n = self.state.next_discriminator;
        self.emit(AccountEvent::DiscriminatorIssued(n));
        n.to_string()
    }
}

trait Journal: Send {
    fn append(&mut self, events: &[AccountEvent], state: &AccountState) -> Result<(), StoreError>;
}

struct MemoryJournal;

impl Journal for MemoryJournal {
    fn append(&mut self, _: &[AccountEvent], _: &AccountState) -> Result<(), StoreError> {
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LogRecord {
    seq: u64,
    events: Vec<AccountEvent>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    state: AccountState,
}

struct FileJournal {
    dir: PathBuf,
    log: File,
    seq: u64,
    since_snapshot: u64,
    sync: bool,
}

impl FileJournal {
    fn log_path(dir: &Path) -> PathBuf {
        dir.join("events.log")
    }

    fn snapshot_path(dir: &Path) -> PathBuf {
        dir.join("snapshot.json")
    }

    fn create(dir: PathBuf, sync: bool) -> Result<Self, StoreError> {
        fs::create_dir_all(&dir)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(Self::log_path(&dir))?;
        Ok(Self {
            dir,
            log,
            seq: 0,
            since_snapshot: 0,
            sync,
        })
    }

    fn load(dir: PathBuf, sync: bool) -> Result<(Self, AccountState), StoreError> {
        let mut state: Option<AccountState> = None;
        let mut seq = 0;
        let snapshot_path = Self::snapshot_path(&dir);
        if snapshot_path.exists() {
            let snapshot: Snapshot = serde_json::from_slice(&fs::read(&snapshot_path)?)
                .map_err(|e| StoreError::Corrupt(format!("{}: {e}", snapshot_path.display())))?;
            seq = snapshot.seq;
            state = Some(snapshot.state);
        }
        let mut since_snapshot = 0;
        let log_path = Self::log_path(&dir);
        if log_path.exists() {
            let reader = BufReader::new(File::open(&log_path)?);
            let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
            let count = lines.len();
            for (idx, line) in lines.into_iter().enumerate() {
                let record: LogRecord = match serde_json::from_str(&line) {
                    Ok(r) => r,
                    // torn final write from a crash
                    Err(_) if idx + 1 == count => break,
                    Err(e) => return Err(StoreError::Corrupt(format!("{}:{}: {e}", log_path.display(), idx + 1))),
                };
                if record.seq <= seq {
                    continue;
                }
                for event in &record.events {
                    match (&mut state, event) {
                        (None, AccountEvent::Provisioned { account, profile }) => {
                            state = Some(AccountState::new(account.clone(), profile.clone()));
                        }
                        (None, _) => return Err(StoreError::Corrupt("log does not start with provisioning".into())),
                        (Some(s), e) => s.apply(e),
                    }
                }
                seq = record.seq;
                since_snapshot += 1;
            }
        }
        let state = state.ok_or_else(|| StoreError::Corrupt(format!("{} holds no account", dir.display())))?;
        let mut journal = Self::create(dir, sync)?;
        journal.seq = seq;
        journal.since_snapshot = since_snapshot;
        Ok((journal, state))
    }

    fn compact(&mut self, state: &AccountState) -> Result<(), StoreError> {
        let tmp = self.dir.join("snapshot.json.tmp");
        let bytes = serde_json::to_vec(&Snapshot {
            seq: self.seq,
            state: state.clone(),
        })
        .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, Self::snapshot_path(&self.dir))?;
        // records at or below the snapshot seq are skipped on load, so a
        // crash before this truncation is harmless
        self.log.set_len(0)?;
        if self.sync {
            self.log.sync_all()?;
        }
        self.since_snapshot = 0;
        Ok(())
    }
}

impl Journal for FileJournal {
    fn append(&mut self, events: &[AccountEvent], state: &AccountState) -> Result<(), StoreError> {
        let record = LogRecord {
            seq: self.seq + 1,
            events: events.to_vec(),
        };
        let mut line = serde_json::to_vec(&record).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.flush()?;
        if self.sync {
            self.log.sync_data()?;
        }
        self.seq += 1;
        self.since_snapshot += 1;
        if self.since_snapshot >= COMPACT_AFTER_RECORDS {
            self.compact(state)?;
        }
        Ok(())
    }
}

struct Slot {
    current: RwLock<Arc<AccountState>>,
    journal: Mutex<Box<dyn Journal>>,
}

enum Backend {
    Memory,
    Dir { root: PathBuf, sync: bool },
}

/// All accounts hosted by one node.
pub struct Store {
    backend: Backend,
    accounts: RwLock<BTreeMap<AccountId, Arc<Slot>>>,
    clock: Arc<dyn Clock>,
}

fn account_dir_name(account: &AccountId) -> String {
    let digest = Sha256::digest(account.as_str().as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

impl Store {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            backend: Backend::Memory,
            accounts: RwLock::new(BTreeMap::new()),
            clock,
        }
    }

    /// Opens (or creates) a store rooted at `root`, replaying every account
    /// found there. With `sync` set every commit is fsynced.
    pub fn open(root: impl Into<PathBuf>, sync: bool, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let root = root.into();
        let accounts_dir = root.join("accounts");
        fs::create_dir_all(&accounts_dir)?;
        let mut accounts = BTreeMap::new();
        let mut dirs: Vec<PathBuf> = fs::read_dir(&accounts_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let (journal, state) = FileJournal::load(dir, sync)?;
            accounts.insert(
                state.account.clone(),
                Arc::new(Slot {
                    current: RwLock::new(Arc::new(state)),
                    journal: Mutex::new(Box::new(journal)),
                }),
            );
        }
        Ok(Self {
            backend: Backend::Dir { root, sync },
            accounts: RwLock::new(accounts),
            clock,
        })
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    pub fn clock_handle(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    pub fn provision_account(&self, account: AccountId, profile: AccountProfile) -> Result<Arc<AccountState>, StoreError> {
        let mut accounts = self.accounts.write();
        if accounts.contains_key(&account) {
            return Err(StoreError::DuplicateAccount(account));
        }
        let mut journal: Box<dyn Journal> = match &self.backend {
            Backend::Memory => Box::new(MemoryJournal),
            Backend::Dir { root, sync } => Box::new(FileJournal::create(
                root.join("accounts").join(account_dir_name(&account)),
                *sync,
            )?),
        };
        let state = AccountState::new(account.clone(), profile.clone());
        journal.append(&[AccountEvent::Provisioned { account: account.clone(), profile }], &state)?;
        let state = Arc::new(state);
        accounts.insert(
            account,
            Arc::new(Slot {
                current: RwLock::new(state.clone()),
                journal: Mutex::new(journal),
            }),
        );
        Ok(state)
    }

    pub fn contains(&self, account: &AccountId) -> bool {
        self.accounts.read().contains_key(account)
    }

    pub fn accounts(&self) -> Vec<AccountId> {
        self.accounts.read().keys().cloned().collect()
    }

    /// Consistent snapshot of one account.
    pub fn read(&self, account: &AccountId) -> Option<Arc<AccountState>> {
        let slot = self.accounts.read().get(account).cloned()?;
        let state = slot.current.read().clone();
        Some(state)
    }

    /// Runs `f` as the single writer of `account`. Events emitted by a
    /// successful closure are journaled before the new state becomes
    /// visible; an `Err` discards them.
    pub fn write<T, E>(&self, account: &AccountId, f: impl FnOnce(&mut Txn<'_>) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        let slot = self
            .accounts
            .read()
            .get(account)
            .cloned()
            .ok_or_else(|| StoreError::UnknownAccount(account.clone()))?;
        let mut journal = slot.journal.lock();
        let base = slot.current.read().as_ref().clone();
        let mut txn = Txn {
            state: base,
            events: Vec::new(),
            clock: self.clock.as_ref(),
        };
        let value = f(&mut txn)?;
        if !txn.events.is_empty() {
            journal.append(&txn.events, &txn.state)?;
            *slot.current.write() = Arc::new(txn.state);
        }
        Ok(value)
    }

    /// Writes raw events, bypassing every gate. Only for fault-injection
    /// fixtures that need to corrupt state on purpose.
    #[doc(hidden)]
    pub fn inject_events(&self, account: &AccountId, events: Vec<AccountEvent>) -> Result<(), StoreError> {
        self.write(account, |txn| {
            for e in events {
                txn.emit(e);
            }
            Ok::<_, StoreError>(())
        })
    }

    pub fn stage_card(&self, account: &AccountId, card: &DigitalCard, registry: &KeyRegistry) -> Result<Outcome, StoreError> {
        self.write(account, |txn| txn.stage_card(card, registry))
    }

    pub fn assimilate(
        &self,
        account: &AccountId,
        card_id: &CardId,
        key: &SignKey,
        registry: &KeyRegistry,
    ) -> Result<Arc<DigitalCard>, StoreError> {
        self.write(account, |txn| txn.assimilate(card_id, key, registry))
    }

    pub fn discard_staged(&self, account: &AccountId, card_id: &CardId) -> Result<(), StoreError> {
        self.write(account, |txn| txn.discard_staged(card_id))
    }

    pub fn mutate_relationships(
        &self,
        account: &AccountId,
        mutation: RelationshipMutation,
        registry: &KeyRegistry,
    ) -> Result<Arc<AccountState>, StoreError> {
        self.write(account, |txn| txn.mutate_relationships(mutation, registry))?;
        self.read(account).ok_or_else(|| StoreError::UnknownAccount(account.clone()))
    }

    pub fn absorb_into_fif(&self, consumer: &AccountId, card: &DigitalCard, registry: &KeyRegistry) -> Result<Outcome, StoreError> {
        self.write(consumer, |txn| txn.absorb_into_fif(card, registry))
    }

    /// Metadata plus every card of an account, in a stable order.
    pub fn dump(&self, account: &AccountId) -> Result<AccountDump, StoreError> {
        let state = self.read(account).ok_or_else(|| StoreError::UnknownAccount(account.clone()))?;
        Ok(AccountDump::from_state(&state))
    }

    /// Provisions an account from a dump taken elsewhere.
    pub fn restore(&self, dump: &AccountDump) -> Result<(), StoreError> {
        let account = dump.metadata.account.clone();
        self.provision_account(account.clone(), dump.metadata.profile.clone())?;
        self.write(&account, |txn| {
            for card in &dump.staging {
                txn.emit(AccountEvent::CardStaged(Arc::new(card.clone())));
            }
            for card in &dump.pif {
                txn.emit(AccountEvent::PifInserted(Arc::new(card.clone())));
            }
            for card in &dump.fif {
                txn.emit(AccountEvent::FifAbsorbed(Arc::new(card.clone())));
            }
            for (subscriber, group) in &dump.metadata.accepted_subscribers {
                txn.emit(AccountEvent::Relationship(RelationshipMutation::AddSubscriber {
                    subscriber: subscriber.clone(),
                    group: group.clone(),
                }));
            }
            for group in dump.metadata.groups.keys() {
                txn.emit(AccountEvent::GroupDefined(group.clone()));
            }
            for p in &dump.metadata.confirmed_publishers {
                txn.emit(AccountEvent::Relationship(RelationshipMutation::AddPublisher(p.clone())));
            }
            for p in &dump.metadata.pending_requests {
                txn.emit(AccountEvent::PendingRequestAdded(p.clone()));
            }
            txn.emit(AccountEvent::StrategyChanged {
                kind: dump.metadata.strategy.kind,
                global_set: dump.metadata.strategy.global_set.clone(),
            });
            for (group, ids) in &dump.metadata.strategy.publication_log {
                for id in ids {
                    txn.emit(AccountEvent::PublicationLogged {
                        group: group.clone(),
                        card_id: id.clone(),
                    });
                }
            }
            for element in &dump.metadata.attention {
                txn.emit(AccountEvent::Attention(element.clone()));
            }
            if dump.metadata.next_discriminator > 1 {
                txn.emit(AccountEvent::DiscriminatorIssued(dump.metadata.next_discriminator - 1));
            }
            Ok::<_, StoreError>(())
        })
    }
}

/// Per-account metadata of a dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AccountMetadata {
    pub account: AccountId,
    pub profile: AccountProfile,
    pub strategy: StrategyConfig,
    pub confirmed_publishers: BTreeSet<AccountId>,
    pub accepted_subscribers: BTreeMap<AccountId, String>,
    pub groups: BTreeMap<String, BTreeSet<AccountId>>,
    pub pending_requests: BTreeSet<AccountId>,
    pub attention: Vec<AttentionElement>,
    pub next_discriminator: u64,
}

/// Directory-shaped export of one account: metadata plus card
/// interchange documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AccountDump {
    pub metadata: AccountMetadata,
    pub staging: Vec<DigitalCard>,
    pub pif: Vec<DigitalCard>,
    pub fif: Vec<DigitalCard>,
}

impl AccountDump {
    pub fn from_state(state: &AccountState) -> Self {
        let cards = |m: &CardMap| m.values().map(|c| c.as_ref().clone()).collect::<Vec<_>>();
        Self {
            metadata: AccountMetadata {
                account: state.account.clone(),
                profile: state.profile.clone(),
                strategy: state.strategy.clone(),
                confirmed_publishers: state.confirmed_publishers.clone(),
                accepted_subscribers: state.accepted_subscribers.clone(),
                groups: state.groups.clone(),
                pending_requests: state.pending_requests.clone(),
                attention: state.attention.clone(),
                next_discriminator: state.next_discriminator,
            },
            staging: cards(&state.staging),
            pif: cards(&state.pif),
            fif: state.fifs.values().flat_map(|f| f.values().map(|c| c.as_ref().clone())).collect(),
        }
    }

    /// Canonical byte form used for equality checks across restarts.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("dump serialization is infallible")
    }

    /// Writes `metadata.json` plus one card file per card under
    /// `staging/`, `pif/` and `fif/`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::to_vec_pretty(&self.metadata).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        fs::write(dir.join("metadata.json"), meta)?;
        for (name, cards) in [("staging", &self.staging), ("pif", &self.pif), ("fif", &self.fif)] {
            let sub = dir.join(name);
            fs::create_dir_all(&sub)?;
            for (idx, card) in cards.iter().enumerate() {
                fs::write(sub.join(format!("{idx:06}-{}.json", &card.fingerprint()[..16])), card.to_json())?;
            }
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, StoreError> {
        let corrupt = |e: serde_json::Error| StoreError::Corrupt(e.to_string());
        let metadata: AccountMetadata =
            serde_json::from_slice(&fs::read(dir.join("metadata.json"))?).map_err(corrupt)?;
        let mut sets = Vec::new();
        for name in ["staging", "pif", "fif"] {
            let sub = dir.join(name);
            let mut files: Vec<PathBuf> = if sub.exists() {
                fs::read_dir(&sub)?.filter_map(|e| e.ok().map(|e| e.path())).collect()
            } else {
                Vec::new()
            };
            files.sort();
            let mut cards = Vec::new();
            for f in files {
                cards.push(DigitalCard::from_json(&fs::read_to_string(&f)?).map_err(corrupt)?);
            }
            sets.push(cards);
        }
        let fif = sets.pop().unwrap_or_default();
        let pif = sets.pop().unwrap_or_default();
        let staging = sets.pop().unwrap_or_default();
        Ok(Self {
            metadata,
            staging,
            pif,
            fif,
        })
    }
}
