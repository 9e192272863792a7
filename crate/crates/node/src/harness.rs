//! Runs declarative multi-node scenarios against in-process nodes, driving
//! every step through the neighbour-systems API.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use deus_core::barker::{AttentionElement, ElementKind, PayloadRef, Subject, Verdict};
use deus_core::card::{CardId, Overall};
use deus_core::identity::{AccountId, KeyRegistry, SignKey};
use deus_core::store::{AccountMode, StrategyKind};
use deus_core::transfer::{Envelope, EnvelopeTap, PeerEntry, PeerTable, ProtocolOffer};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::api::{AttentionQuery, CardIdInput, CardInput, CardView, PayloadInput};
use crate::binding::{HTTP_PRIORITY, HTTP_PROTOCOL};
use crate::client::{Client, ClientError};
use crate::config::{AccountConfig, NodeConfig, RetryConfig};
use crate::server::RunningNode;

pub const DEFAULT_WAIT: Duration = Duration::from_secs(5);
const POLL: Duration = Duration::from_millis(25);
const DEFAULT_CREATED_AT: &str = "2010-03-14T09:30:00Z";
const ACCOUNT_BASE: &str = "https://deus.example/";

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid script: {0}")]
    Script(String),
    #[error("cannot spawn nodes: {0}")]
    Spawn(String),
    #[error("scenario failed at {step}: {reason}")]
    Failed { step: String, reason: String },
}

fn failed(step: &str, reason: impl ToString) -> ScenarioError {
    ScenarioError::Failed {
        step: step.to_owned(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub nodes: Vec<NodeSpec>,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub accounts: Vec<AccountSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AccountSpec {
    pub account: String,
    #[serde(default)]
    pub mode: AccountMode,
    #[serde(default)]
    pub strategy: StrategyKind,
    #[serde(default)]
    pub publish_to_all: Option<bool>,
    #[serde(default)]
    pub whitelist: Vec<String>,
    #[serde(default)]
    pub subscriber_template: BTreeMap<String, String>,
    #[serde(default)]
    pub demand_deletion_on_unsubscribe: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Step {
    #[serde(default)]
    pub name: Option<String>,
    pub actor: String,
    #[serde(flatten)]
    pub action: Action,
    #[serde(default)]
    pub expect: Expect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "action", content = "args", rename_all = "kebab-case")]
pub enum Action {
    Contribute(ContributeArgs),
    Subscribe {
        publisher: String,
    },
    Unsubscribe {
        publisher: String,
    },
    #[serde(rename_all = "camelCase")]
    Cancel {
        consumer: String,
        #[serde(default)]
        demand_deletion: bool,
    },
    Decide(DecideArgs),
    Publish {
        card: String,
        #[serde(default)]
        groups: Vec<String>,
    },
    #[serde(rename_all = "camelCase")]
    SetStrategy {
        kind: StrategyKind,
        #[serde(default)]
        global_set: Vec<String>,
    },
    DefineGroup {
        name: String,
    },
    AssignGroup {
        group: String,
        subscriber: String,
    },
    MarkRead {
        subject: Subject,
        #[serde(default)]
        about: Option<String>,
    },
    /// Only waits for the step's expectations.
    Wait,
}

impl Action {
    fn label(&self) -> &'static str {
        match self {
            Self::Contribute(_) => "contribute",
            Self::Subscribe { .. } => "subscribe",
            Self::Unsubscribe { .. } => "unsubscribe",
            Self::Cancel { .. } => "cancel",
            Self::Decide(_) => "decide",
            Self::Publish { .. } => "publish",
            Self::SetStrategy { .. } => "set-strategy",
            Self::DefineGroup { .. } => "define-group",
            Self::AssignGroup { .. } => "assign-group",
            Self::MarkRead { .. } => "mark-read",
            Self::Wait => "wait",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ContributeArgs {
    pub concerned: String,
    #[serde(default)]
    pub discriminator: Option<String>,
    pub title: String,
    #[serde(default = "default_media_type")]
    pub media_type: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub created_at: Option<String>,
}

fn default_media_type() -> String {
    "text/plain".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DecideArgs {
    pub subject: Subject,
    /// Card discriminator or account the element refers to.
    #[serde(default)]
    pub about: Option<String>,
    pub verdict: Verdict,
    #[serde(default)]
    pub group: Option<String>,
    /// Discriminators of cards picked from the actor's PIF.
    #[serde(default)]
    pub picks: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Expect {
    /// Error code the action must fail with.
    #[serde(default)]
    pub error: Option<String>,
    /// Conditions polled until they hold after the action.
    #[serde(default, rename = "await")]
    pub await_: Vec<Assertion>,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Collection {
    Staging,
    Pif,
    Dif,
    Fif,
    /// Staging, PIF and DIF together.
    Everything,
    /// Pending pleas.
    Pleas,
    /// Unread notifications.
    Notifications,
    /// Publishers that confirmed the account as subscriber.
    Publishers,
    /// Accepted subscribers of the account.
    Subscribers,
}

/// A predicate over one collection of one account. Cards are named by
/// discriminator, attention elements by subject, accounts by short name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Assertion {
    pub account: String,
    pub collection: Collection,
    #[serde(default)]
    pub concerned: Option<String>,
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub excludes: Vec<String>,
    #[serde(default)]
    pub count: Option<usize>,
    /// Required signature status of every listed card.
    #[serde(default)]
    pub status: Option<Overall>,
    /// Exact discriminator order.
    #[serde(default)]
    pub order: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepReport {
    pub index: usize,
    pub label: String,
    pub ok: bool,
    pub millis: u128,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Serialized cards held by one account, per collection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardSet {
    pub staging: BTreeSet<String>,
    pub pif: BTreeSet<String>,
    pub fif: BTreeMap<String, BTreeSet<String>>,
}

impl CardSet {
    pub fn len(&self) -> usize {
        self.staging.len() + self.pif.len() + self.fif.values().map(BTreeSet::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioReport {
    pub name: String,
    pub nodes: usize,
    pub steps: Vec<StepReport>,
    pub assertions: Vec<StepReport>,
    pub millis: u128,
    /// Envelopes that crossed HTTP between nodes.
    pub http_messages: u64,
    pub card_sets: BTreeMap<String, CardSet>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.steps.iter().chain(&self.assertions).all(|s| s.ok)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Hosts every account on one node.
    pub single_node: bool,
}

impl ScenarioScript {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|e| ScenarioError::Script(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let script: Self = serde_json::from_str(text).map_err(|e| ScenarioError::Script(e.to_string()))?;
        script.check()?;
        Ok(script)
    }

    fn accounts(&self) -> impl Iterator<Item = &AccountSpec> {
        self.nodes.iter().flat_map(|n| &n.accounts)
    }

    fn check(&self) -> Result<(), ScenarioError> {
        let mut names = BTreeSet::new();
        let mut nodes = BTreeSet::new();
        for node in &self.nodes {
            if !nodes.insert(&node.name) {
                return Err(ScenarioError::Script(format!("node {} listed twice", node.name)));
            }
        }
        for account in self.accounts() {
            let id = account_uri(&account.account)?;
            if !names.insert(id) {
                return Err(ScenarioError::Script(format!("account {} listed twice", account.account)));
            }
        }
        if names.is_empty() {
            return Err(ScenarioError::Script("no accounts".into()));
        }
        let known = |who: &str| -> Result<(), ScenarioError> {
            if names.contains(&account_uri(who)?) {
                Ok(())
            } else {
                Err(ScenarioError::Script(format!("unknown account {who}")))
            }
        };
        for step in &self.steps {
            known(&step.actor)?;
            for a in &step.expect.await_ {
                known(&a.account)?;
            }
        }
        for a in &self.assertions {
            known(&a.account)?;
        }
        Ok(())
    }

    /// The same script with every account on a single node.
    pub fn colocated(&self) -> Self {
        let mut script = self.clone();
        let accounts = self.accounts().cloned().collect();
        script.nodes = vec![NodeSpec {
            name: "solo".into(),
            accounts,
        }];
        script
    }
}

/// Account short names become URIs under a fixed base.
pub fn account_uri(name: &str) -> Result<AccountId, ScenarioError> {
    let text = if name.contains("://") {
        name.to_owned()
    } else {
        format!("{ACCOUNT_BASE}{name}")
    };
    AccountId::parse(&text).map_err(|e| ScenarioError::Script(e.to_string()))
}

/// Inverse of [`account_uri`] for accounts under the fixed base.
pub fn short_name(account: &AccountId) -> String {
    account
        .as_str()
        .strip_prefix(ACCOUNT_BASE)
        .unwrap_or(account.as_str())
        .to_owned()
}

fn subject_name(subject: Subject) -> String {
    match serde_json::to_value(subject) {
        Ok(serde_json::Value::String(s)) => s,
        _ => format!("{subject:?}"),
    }
}

pub fn scenario_key(account: &AccountId) -> String {
    format!("scenario-key:{account}")
}

fn token_for(account: &AccountId) -> String {
    format!("token:{account}")
}

/// Records envelopes a node receives.
#[derive(Default)]
pub struct Recorder {
    received: Mutex<Vec<Envelope>>,
}

impl Recorder {
    pub fn received(&self) -> Vec<Envelope> {
        self.received.lock().clone()
    }
}

impl EnvelopeTap for Recorder {
    fn on_receive(&self, envelope: &Envelope) {
        self.received.lock().push(envelope.clone());
    }
}

pub struct HarnessNode {
    pub name: String,
    pub running: RunningNode,
    pub recorder: Arc<Recorder>,
    pub config: NodeConfig,
}

/// Nodes started for a script, plus the clients of its accounts.
pub struct Harness {
    script: ScenarioScript,
    nodes: Vec<HarnessNode>,
    clients: BTreeMap<AccountId, Client>,
    home: BTreeMap<AccountId, usize>,
    _dir: tempfile::TempDir,
}

impl Harness {
    pub fn start(script: &ScenarioScript, options: RunOptions) -> Result<Self, ScenarioError> {
        let script = if options.single_node {
            script.colocated()
        } else {
            script.clone()
        };
        let dir = tempfile::tempdir().map_err(|e| ScenarioError::Spawn(e.to_string()))?;
        let spawn = |e: &dyn std::fmt::Display| ScenarioError::Spawn(e.to_string());

        let mut registry = KeyRegistry::new();
        for spec in script.accounts() {
            let id = account_uri(&spec.account)?;
            registry
                .register(id.clone(), SignKey::from_seed_text(&scenario_key(&id)).verify_key())
                .map_err(|e| spawn(&e))?;
        }
        let registry_path = dir.path().join("keys.txt");
        fs::write(&registry_path, registry.render_registry()).map_err(|e| spawn(&e))?;

        let mut listeners = Vec::new();
        for _ in &script.nodes {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| spawn(&e))?;
            let addr = listener.local_addr().map_err(|e| spawn(&e))?;
            listeners.push((listener, addr));
        }

        let addrs: Vec<SocketAddr> = listeners.iter().map(|(_, a)| *a).collect();
        let mut home = BTreeMap::new();
        for (i, node) in script.nodes.iter().enumerate() {
            for spec in &node.accounts {
                home.insert(account_uri(&spec.account)?, i);
            }
        }

        let mut nodes = Vec::new();
        let mut clients = BTreeMap::new();
        for ((i, spec), (listener, addr)) in script.nodes.iter().enumerate().zip(listeners) {
            let node_dir = dir.path().join(&spec.name);
            fs::create_dir_all(&node_dir).map_err(|e| spawn(&e))?;
            let peers_path = node_dir.join("peers.json");
            fs::write(&peers_path, peer_table(&home, i, &addrs)?.to_json()).map_err(|e| spawn(&e))?;
            let mut config = NodeConfig::minimal(&spec.name, addr, node_dir.join("data"));
            config.peer_table = Some(peers_path);
            config.key_registry = Some(registry_path.clone());
            config.fsync = false;
            config.retry = RetryConfig {
                attempts: 3,
                backoff_ms: 50,
            };
            for account in &spec.accounts {
                config.accounts.push(account_config(account, &node_dir)?);
            }
            let running = RunningNode::start_on(&config, listener).map_err(|e| spawn(&e))?;
            let recorder = Arc::new(Recorder::default());
            running
                .runtime
                .node
                .transfer()
                .set_tap(Some(recorder.clone() as Arc<dyn EnvelopeTap>));
            for account in &spec.accounts {
                let id = account_uri(&account.account)?;
                clients.insert(id.clone(), Client::new(running.base_url(), Some(token_for(&id))));
            }
            nodes.push(HarnessNode {
                name: spec.name.clone(),
                running,
                recorder,
                config,
            });
        }
        Ok(Self {
            script,
            nodes,
            clients,
            home,
            _dir: dir,
        })
    }

    pub fn nodes(&self) -> &[HarnessNode] {
        &self.nodes
    }

    pub fn client(&self, name: &str) -> Result<&Client, ScenarioError> {
        let id = account_uri(name)?;
        self.clients
            .get(&id)
            .ok_or_else(|| ScenarioError::Script(format!("unknown account {name}")))
    }

    pub fn node_of(&self, name: &str) -> Result<&HarnessNode, ScenarioError> {
        let id = account_uri(name)?;
        self.home
            .get(&id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| ScenarioError::Script(format!("unknown account {name}")))
    }

    /// Envelopes that crossed HTTP, counted at the senders.
    pub fn http_messages(&self) -> u64 {
        self.nodes.iter().map(|n| n.running.runtime.http.attempts()).sum()
    }

    /// Runs every step, then the final assertions. Stops at the first
    /// failure.
    pub fn run(&self) -> Result<ScenarioReport, ScenarioError> {
        let started = Instant::now();
        let mut steps = Vec::new();
        for (index, step) in self.script.steps.iter().enumerate() {
            let label = match &step.name {
                Some(name) => format!("step {} ({name})", index + 1),
                None => format!("step {} ({} {})", index + 1, step.actor, step.action.label()),
            };
            let t0 = Instant::now();
            self.run_step(step).map_err(|reason| failed(&label, reason))?;
            steps.push(StepReport {
                index: index + 1,
                label,
                ok: true,
                millis: t0.elapsed().as_millis(),
                detail: None,
            });
        }
        let mut assertions = Vec::new();
        for (index, assertion) in self.script.assertions.iter().enumerate() {
            let label = format!("assertion {} ({} {:?})", index + 1, assertion.account, assertion.collection);
            let t0 = Instant::now();
            self.check(assertion).map_err(|reason| failed(&label, reason))?;
            assertions.push(StepReport {
                index: index + 1,
                label,
                ok: true,
                millis: t0.elapsed().as_millis(),
                detail: None,
            });
        }
        let card_sets = self.card_sets().map_err(|e| failed("final state", e))?;
        Ok(ScenarioReport {
            name: self.script.name.clone(),
            nodes: self.nodes.len(),
            steps,
            assertions,
            millis: started.elapsed().as_millis(),
            http_messages: self.http_messages(),
            card_sets,
        })
    }

    fn run_step(&self, step: &Step) -> Result<(), String> {
        let deadline = Instant::now() + step.expect.timeout_ms.map_or(DEFAULT_WAIT, Duration::from_millis);
        let outcome = self.act(&step.actor, &step.action, deadline);
        match (&step.expect.error, outcome) {
            (None, Err(e)) => return Err(e),
            (Some(code), Ok(())) => return Err(format!("expected error {code}, action succeeded")),
            (Some(code), Err(e)) if !e.starts_with(&format!("{code}:")) => {
                return Err(format!("expected error {code}, got {e}"))
            }
            _ => {}
        }
        for assertion in &step.expect.await_ {
            loop {
                match self.check(assertion) {
                    Ok(()) => break,
                    Err(reason) if Instant::now() >= deadline => return Err(format!("timed out: {reason}")),
                    Err(_) => std::thread::sleep(POLL),
                }
            }
        }
        Ok(())
    }

    fn act(&self, actor: &str, action: &Action, deadline: Instant) -> Result<(), String> {
        let client = self.client(actor).map_err(|e| e.to_string())?;
        let api = |e: ClientError| {
            let body = e.to_body();
            format!("{}: {}", body.code, body.reason)
        };
        let uri = |name: &str| account_uri(name).map_err(|e| e.to_string());
        match action {
            Action::Contribute(args) => {
                let card = CardInput {
                    id: CardIdInput {
                        discriminator: args.discriminator.clone(),
                        provider: None,
                        concerned: uri(&args.concerned)?.to_string(),
                    },
                    payload: PayloadInput {
                        media_type: args.media_type.clone(),
                        title: args.title.clone(),
                        created_at: Some(args.created_at.clone().unwrap_or_else(|| DEFAULT_CREATED_AT.into())),
                        body_base64: base64::Engine::encode(&base64::engine::general_purpose::STANDARD, &args.body),
                    },
                };
                client.contribute(&card).map(drop).map_err(api)
            }
            Action::Subscribe { publisher } => client.subscribe(&uri(publisher)?).map(drop).map_err(api),
            Action::Unsubscribe { publisher } => client.unsubscribe(&uri(publisher)?).map(drop).map_err(api),
            Action::Cancel {
                consumer,
                demand_deletion,
            } => client
                .cancel(&uri(consumer)?, *demand_deletion)
                .map(drop)
                .map_err(api),
            Action::Decide(args) => {
                let element = self.find_element(client, args.subject, args.about.as_deref(), deadline)?;
                let picks = self.resolve_cards(client, &args.picks)?;
                client
                    .decide(element.element_id, args.verdict, args.group.clone(), picks)
                    .map(drop)
                    .map_err(api)
            }
            Action::Publish { card, groups } => {
                let id = self.resolve_cards(client, std::slice::from_ref(card))?.remove(0);
                client.publish(&id, groups).map(drop).map_err(api)
            }
            Action::SetStrategy { kind, global_set } => {
                let ids = self.resolve_cards(client, global_set)?;
                client.set_strategy(*kind, ids).map_err(api)
            }
            Action::DefineGroup { name } => client.define_group(name).map_err(api),
            Action::AssignGroup { group, subscriber } => {
                client.assign_group(group, &uri(subscriber)?).map_err(api)
            }
            Action::MarkRead { subject, about } => {
                let element = self.find_element(client, *subject, about.as_deref(), deadline)?;
                client.mark_read(element.element_id).map_err(api)
            }
            Action::Wait => Ok(()),
        }
    }

    /// Waits for the oldest open attention element matching `subject` and
    /// `about`.
    fn find_element(
        &self,
        client: &Client,
        subject: Subject,
        about: Option<&str>,
        deadline: Instant,
    ) -> Result<AttentionElement, String> {
        let about_account = about.and_then(|a| account_uri(a).ok());
        loop {
            let elements = client.attention(&AttentionQuery::default()).map_err(|e| e.to_string())?;
            let found = elements.into_iter().find(|e| {
                e.subject == subject
                    && match about {
                        None => true,
                        Some(about) => match &e.payload_ref {
                            PayloadRef::Card(id) => id.discriminator == about,
                            PayloadRef::Account(a) => Some(a) == about_account.as_ref(),
                            PayloadRef::Text(t) => t.contains(about),
                        },
                    }
            });
            match found {
                Some(element) => return Ok(element),
                None if Instant::now() >= deadline => {
                    return Err(format!("no open {subject:?} element about {about:?}"));
                }
                None => std::thread::sleep(POLL),
            }
        }
    }

    /// Maps discriminators to ids of cards in the actor's PIF.
    fn resolve_cards(&self, client: &Client, discriminators: &[String]) -> Result<Vec<CardId>, String> {
        if discriminators.is_empty() {
            return Ok(Vec::new());
        }
        let pif = client.pif().map_err(|e| e.to_string())?;
        discriminators
            .iter()
            .map(|d| {
                pif.iter()
                    .find(|c| &c.card.id.discriminator == d)
                    .map(|c| c.card.id.clone())
                    .ok_or_else(|| format!("NotInPif: no card {d:?} in the actor's PIF"))
            })
            .collect()
    }

    fn cards(&self, client: &Client, collection: Collection, concerned: Option<&str>) -> Result<Vec<CardView>, String> {
        let e = |e: ClientError| e.to_string();
        Ok(match collection {
            Collection::Staging => client.staging().map_err(e)?,
            Collection::Pif => client.pif().map_err(e)?,
            Collection::Dif => client.dif().map_err(e)?,
            Collection::Fif => {
                let concerned = concerned.ok_or("fif assertion needs a concerned account")?;
                client
                    .fif(&account_uri(concerned).map_err(|e| e.to_string())?)
                    .map_err(e)?
            }
            Collection::Everything => {
                let mut all = client.staging().map_err(e)?;
                all.extend(client.pif().map_err(e)?);
                all.extend(client.dif().map_err(e)?);
                all
            }
            other => return Err(format!("{other:?} is not a card collection")),
        })
    }

    pub fn check(&self, assertion: &Assertion) -> Result<(), String> {
        let client = self.client(&assertion.account).map_err(|e| e.to_string())?;
        let names: Vec<String> = match assertion.collection {
            Collection::Pleas | Collection::Notifications => {
                let kind = if assertion.collection == Collection::Pleas {
                    ElementKind::Plea
                } else {
                    ElementKind::Notification
                };
                client
                    .attention(&AttentionQuery::default())
                    .map_err(|e| e.to_string())?
                    .iter()
                    .filter(|e| e.kind == kind)
                    .map(|e| subject_name(e.subject))
                    .collect()
            }
            Collection::Publishers => {
                let view = client.relationships().map_err(|e| e.to_string())?;
                view.confirmed_publishers.iter().map(short_name).collect()
            }
            Collection::Subscribers => {
                let view = client.relationships().map_err(|e| e.to_string())?;
                view.accepted_subscribers.keys().map(short_name).collect()
            }
            collection => {
                let cards = self.cards(client, collection, assertion.concerned.as_deref())?;
                if let Some(status) = assertion.status {
                    if let Some(bad) = cards.iter().find(|c| c.status != status) {
                        return Err(format!(
                            "card {} is {:?}, expected {status:?}",
                            bad.card.id.discriminator, bad.status
                        ));
                    }
                }
                cards.iter().map(|c| c.card.id.discriminator.clone()).collect()
            }
        };
        let what = format!("{} {:?} holds {names:?}", assertion.account, assertion.collection);
        if let Some(count) = assertion.count {
            if names.len() != count {
                return Err(format!("{what}, expected {count} entries"));
            }
        }
        if let Some(missing) = assertion.contains.iter().find(|c| !names.contains(c)) {
            return Err(format!("{what}, missing {missing}"));
        }
        if let Some(present) = assertion.excludes.iter().find(|c| names.contains(c)) {
            return Err(format!("{what}, unexpectedly has {present}"));
        }
        if let Some(order) = &assertion.order {
            if &names != order {
                return Err(format!("{what}, expected order {order:?}"));
            }
        }
        Ok(())
    }

    /// Serialized staging, PIF and FIF cards of every account, keyed by the
    /// account's short name.
    pub fn card_sets(&self) -> Result<BTreeMap<String, CardSet>, String> {
        let bytes = |c: &CardView| serde_json::to_string(&c.card).expect("cards serialize");
        let mut sets = BTreeMap::new();
        for spec in self.script.accounts() {
            let client = self.client(&spec.account).map_err(|e| e.to_string())?;
            let e = |e: ClientError| e.to_string();
            let mut set = CardSet {
                staging: client.staging().map_err(e)?.iter().map(bytes).collect(),
                pif: client.pif().map_err(e)?.iter().map(bytes).collect(),
                fif: BTreeMap::new(),
            };
            for card in client.dif().map_err(e)? {
                set.fif
                    .entry(card.card.id.concerned.to_string())
                    .or_default()
                    .insert(bytes(&card));
            }
            sets.insert(spec.account.clone(), set);
        }
        Ok(sets)
    }

    /// Every envelope any node received so far, with the node it reached.
    pub fn received(&self) -> Vec<(usize, Envelope)> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.recorder.received().into_iter().map(move |e| (i, e)))
            .collect()
    }

    /// Posts each given envelope again to the node that received it.
    pub fn redeliver(&self, envelopes: &[(usize, Envelope)]) -> Result<Vec<String>, String> {
        envelopes
            .iter()
            .map(|(i, envelope)| {
                Client::new(self.nodes[*i].running.base_url(), None)
                    .deliver_raw(envelope.to_json().as_bytes())
                    .map(|r| r.outcome)
                    .map_err(|e| e.to_string())
            })
            .collect()
    }
}

/// Every account hosted elsewhere, reachable over HTTP.
fn peer_table(home: &BTreeMap<AccountId, usize>, own: usize, addrs: &[SocketAddr]) -> Result<PeerTable, ScenarioError> {
    let mut table = PeerTable::new();
    for (account, &i) in home {
        if i != own {
            table
                .insert(http_peer(account.clone(), addrs[i]))
                .map_err(|e| ScenarioError::Spawn(e.to_string()))?;
        }
    }
    Ok(table)
}

fn account_config(spec: &AccountSpec, node_dir: &Path) -> Result<AccountConfig, ScenarioError> {
    let id = account_uri(&spec.account)?;
    let whitelist = if spec.whitelist.is_empty() {
        None
    } else {
        let lines: Result<Vec<String>, _> = spec.whitelist.iter().map(|w| account_uri(w).map(|a| a.to_string())).collect();
        let path: PathBuf = node_dir.join(format!("whitelist-{}.txt", spec.account.replace(['/', ':'], "_")));
        fs::write(&path, lines?.join("\n")).map_err(|e| ScenarioError::Spawn(e.to_string()))?;
        Some(path)
    };
    let mut template = BTreeMap::new();
    for (subscriber, group) in &spec.subscriber_template {
        template.insert(account_uri(subscriber)?.to_string(), group.clone());
    }
    Ok(AccountConfig {
        id: id.to_string(),
        mode: spec.mode,
        strategy: spec.strategy,
        token: token_for(&id),
        sign_key: None,
        sign_key_seed: Some(scenario_key(&id)),
        whitelist,
        publish_to_all: spec.publish_to_all,
        demand_deletion_on_unsubscribe: spec.demand_deletion_on_unsubscribe,
        subscriber_template: template,
    })
}

pub fn run_script(script: &ScenarioScript, options: RunOptions) -> Result<ScenarioReport, ScenarioError> {
    Harness::start(script, options)?.run()
}

pub fn http_peer(account: AccountId, addr: SocketAddr) -> PeerEntry {
    PeerEntry {
        account,
        base_url: format!("http://{addr}"),
        protocols: vec![ProtocolOffer::new(HTTP_PROTOCOL, HTTP_PRIORITY)],
    }
}
