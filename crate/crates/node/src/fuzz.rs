//! Seeded random interleavings of Soul operations across three simulated
//! nodes, checked against the global invariants after every step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration as StdDuration;

use chrono::{Duration, TimeZone, Utc};
use deus_core::barker::{AttentionFilter, DecisionArgs, ElementKind, ElementState, PayloadRef, Subject, Verdict};
use deus_core::card::{self, CardId, CardPayload, DigitalCard, Overall};
use deus_core::clock::{IdSource, ManualClock};
use deus_core::identity::{AccountId, KeyRegistry, SignKey};
use deus_core::sim::SimNetwork;
use deus_core::store::{AccountEvent, AccountProfile, Store, StrategyKind};
use deus_core::transfer::{Command, Envelope, EnvelopeTap, RetryPolicy, PROTOCOL_VERSION};
use deus_core::{Node, NodeOptions, ReceiveOutcome};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const ACCOUNTS: [(&str, usize); 6] = [
    ("alice", 0),
    ("higgins", 0),
    ("bob", 1),
    ("carol", 1),
    ("dave", 2),
    ("vera", 2),
];
const VIRTUAL: &str = "vera";
const GROUPS: [&str; 3] = ["all", "family", "research"];

fn account(index: u8) -> AccountId {
    let (name, _) = ACCOUNTS[index as usize % ACCOUNTS.len()];
    AccountId::parse(&format!("https://fuzz.example/{name}")).expect("static account ids parse")
}

fn key(id: &AccountId) -> SignKey {
    SignKey::from_seed_text(&format!("fuzz-key:{id}"))
}

/// One abstract operation. Choices are indices resolved against the state
/// at execution time, so any subsequence of a trace replays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Op {
    Contribute { provider: u8, concerned: u8 },
    Decide { account: u8, pick: u16, grant: bool, group: u8, picks: u8 },
    Subscribe { consumer: u8, publisher: u8 },
    Unsubscribe { consumer: u8, pick: u16 },
    Cancel { publisher: u8, pick: u16, demand: bool },
    Publish { publisher: u8, pick: u16, groups: u8 },
    SetStrategy { account: u8, kind: u8, picks: u8 },
    AssignGroup { publisher: u8, pick: u16, group: u8 },
    Redeliver { pick: u32 },
    StrangerPublish { sender: u8, consumer: u8, pick: u16 },
    Advance { seconds: u16 },
    /// Writes a single-signed card straight into a foreign file.
    InjectBug { account: u8 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Contribute { .. } => "contribute",
            Self::Decide { .. } => "decide",
            Self::Subscribe { .. } => "subscribe",
            Self::Unsubscribe { .. } => "unsubscribe",
            Self::Cancel { .. } => "cancel",
            Self::Publish { .. } => "publish",
            Self::SetStrategy { .. } => "set-strategy",
            Self::AssignGroup { .. } => "assign-group",
            Self::Redeliver { .. } => "redeliver",
            Self::StrangerPublish { .. } => "stranger-publish",
            Self::Advance { .. } => "advance",
            Self::InjectBug { .. } => "inject-bug",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Generates `count` operations from `seed`. With `inject_at`, the
/// operation at that index is replaced by [`Op::InjectBug`].
pub fn generate(seed: u64, count: usize, inject_at: Option<usize>) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ACCOUNTS.len() as u8;
    (0..count)
        .map(|i| {
            if Some(i) == inject_at {
                return Op::InjectBug {
                    account: rng.gen_range(0..n),
                };
            }
            match rng.gen_range(0..100) {
                0..=17 => Op::Contribute {
                    provider: rng.gen_range(0..n),
                    concerned: rng.gen_range(0..n),
                },
                18..=39 => Op::Decide {
                    account: rng.gen_range(0..n),
                    pick: rng.gen(),
                    grant: rng.gen_bool(0.7),
                    group: rng.gen_range(0..GROUPS.len() as u8),
                    picks: rng.gen(),
                },
                40..=51 => Op::Subscribe {
                    consumer: rng.gen_range(0..n),
                    publisher: rng.gen_range(0..n),
                },
                52..=55 => Op::Unsubscribe {
                    consumer: rng.gen_range(0..n),
                    pick: rng.gen(),
                },
                56..=59 => Op::Cancel {
                    publisher: rng.gen_range(0..n),
                    pick: rng.gen(),
                    demand: rng.gen(),
                },
                60..=73 => Op::Publish {
                    publisher: rng.gen_range(0..n),
                    pick: rng.gen(),
                    groups: rng.gen(),
                },
                74..=77 => Op::SetStrategy {
                    account: rng.gen_range(0..n),
                    kind: rng.gen_range(0..4),
                    picks: rng.gen(),
                },
                78..=80 => Op::AssignGroup {
                    publisher: rng.gen_range(0..n),
                    pick: rng.gen(),
                    group: rng.gen_range(0..GROUPS.len() as u8),
                },
                81..=90 => Op::Redeliver { pick: rng.gen() },
                91..=95 => Op::StrangerPublish {
                    sender: rng.gen_range(0..n),
                    consumer: rng.gen_range(0..n),
                    pick: rng.gen(),
                },
                _ => Op::Advance {
                    seconds: rng.gen_range(1..90),
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Invariant {
    /// Every PIF and FIF card carries two valid signatures.
    MediationGate,
    /// Every FIF card arrived while its consumer was an accepted subscriber
    /// of the publisher.
    PublicationGate,
    /// Declined cards are held nowhere.
    DeclineIsolation,
    /// A card is never staged and in the PIF of one account at once.
    StagingExclusivity,
    /// Redelivering a processed envelope changes nothing.
    Idempotency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub step: usize,
    pub detail: String,
}

#[derive(Debug, thiserror::Error)]
#[error("{} violated at step {}: {}; minimized trace has {} ops", .violation.invariant_name(), .violation.step, .violation.detail, .minimized.len())]
pub struct InvariantViolation {
    pub violation: Violation,
    pub minimized: Vec<Op>,
}

impl Violation {
    fn invariant_name(&self) -> String {
        format!("{:?}", self.invariant)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantReport {
    pub seed: u64,
    pub ops: usize,
    /// One line per operation with its outcome.
    pub trace: Vec<String>,
    /// Operations run, per kind and outcome.
    pub outcomes: BTreeMap<String, usize>,
    pub final_cards: FinalCards,
}

/// Cards held at the end of a run, summed over all accounts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FinalCards {
    pub staging: usize,
    pub pif: usize,
    pub fif: usize,
}

#[derive(Default)]
struct Tap {
    received: Mutex<Vec<(String, Envelope)>>,
}

struct NodeTap {
    shared: Arc<Tap>,
    node: String,
}

impl EnvelopeTap for NodeTap {
    fn on_receive(&self, envelope: &Envelope) {
        self.shared.received.lock().push((self.node.clone(), envelope.clone()));
    }
}

struct World {
    clock: Arc<ManualClock>,
    nodes: Vec<Arc<Node>>,
    home: BTreeMap<AccountId, usize>,
    registry: Arc<KeyRegistry>,
    tap: Arc<Tap>,
    _net: Arc<SimNetwork>,
    declined: BTreeSet<CardId>,
    next_card: u64,
}

type Snapshot = BTreeMap<AccountId, Arc<deus_core::store::AccountState>>;

impl World {
    fn new() -> Self {
        let clock = ManualClock::new(Utc.with_ymd_and_hms(2012, 1, 1, 8, 0, 0).unwrap());
        let mut registry = KeyRegistry::new();
        for i in 0..ACCOUNTS.len() as u8 {
            let id = account(i);
            registry.register(id.clone(), key(&id).verify_key()).expect("fresh registry");
        }
        let virtual_id = ACCOUNTS.iter().position(|(n, _)| *n == VIRTUAL).expect("virtual account listed") as u8;
        registry
            .whitelist(&account(virtual_id), account(1))
            .expect("virtual account registered");
        let net = SimNetwork::new();
        let tap = Arc::new(Tap::default());
        let mut nodes = Vec::new();
        for n in 0..3 {
            let store = Arc::new(Store::in_memory(clock.clone()));
            let mut options = NodeOptions::named(format!("fuzz-{n}"));
            options.retry = RetryPolicy::new(2, StdDuration::from_millis(1)).with_sleeper(|_| {});
            options.ids = IdSource::seeded(1000 + n as u64);
            let node = Node::new(store, registry.clone(), options);
            net.attach(&node);
            node.transfer().set_tap(Some(Arc::new(NodeTap {
                shared: tap.clone(),
                node: node.name().to_owned(),
            }) as Arc<dyn EnvelopeTap>));
            nodes.push(node);
        }
        let mut home = BTreeMap::new();
        for (i, (name, n)) in ACCOUNTS.iter().enumerate() {
            let id = account(i as u8);
            let profile = if *name == VIRTUAL {
                let mut p = AccountProfile::virtual_account();
                p.subscriber_template.insert(account(2), "family".into());
                p
            } else {
                AccountProfile::default()
            };
            nodes[*n]
                .provision_account(id.clone(), profile, Some(key(&id)))
                .expect("fresh node");
            home.insert(id, *n);
        }
        net.wire().expect("sim addresses are valid");
        Self {
            clock,
            nodes,
            home,
            registry: Arc::new(registry),
            tap,
            _net: net,
            declined: BTreeSet::new(),
            next_card: 0,
        }
    }

    fn node(&self, account: &AccountId) -> &Arc<Node> {
        &self.nodes[self.home[account]]
    }

    fn state(&self, account: &AccountId) -> Arc<deus_core::store::AccountState> {
        self.node(account).state(account).expect("provisioned account")
    }

    fn snapshot(&self) -> Snapshot {
        self.home.keys().map(|a| (a.clone(), self.state(a))).collect()
    }

    fn dumps(&self) -> Vec<Vec<u8>> {
        self.home
            .keys()
            .map(|a| {
                let mut bytes = self.node(a).dump(a).expect("provisioned account").to_bytes();
                let held = serde_json::to_vec(&self.state(a).held.iter().map(|h| &h.card).collect::<Vec<_>>())
                    .expect("cards serialize");
                bytes.extend(held);
                bytes
            })
            .collect()
    }

    fn pick<T: Clone>(items: &[T], pick: u32) -> Option<T> {
        if items.is_empty() {
            None
        } else {
            Some(items[pick as usize % items.len()].clone())
        }
    }

    /// Runs one operation and names its outcome.
    fn apply(&mut self, op: Op) -> String {
        match op {
            Op::Contribute { provider, concerned } => {
                let provider = account(provider);
                let concerned = account(concerned);
                self.next_card += 1;
                let id = match CardId::new(format!("fz-{}", self.next_card), provider.clone(), concerned) {
                    Ok(id) => id,
                    Err(e) => return format!("invalid: {e}"),
                };
                let payload = CardPayload::new(
                    "text/plain",
                    format!("card {}", self.next_card),
                    format!("body {}", self.next_card).into_bytes(),
                    self.clock_now(),
                );
                outcome(self.node(&provider).contribute(&provider, DigitalCard::new(id, payload)))
            }
            Op::Decide {
                account: who,
                pick,
                grant,
                group,
                picks,
            } => {
                let who = account(who);
                let node = self.node(&who).clone();
                let pending: Vec<_> = node
                    .list_attention(&who, AttentionFilter::default())
                    .expect("provisioned account")
                    .into_iter()
                    .filter(|e| e.kind == ElementKind::Plea && e.state == ElementState::Pending)
                    .collect();
                let Some(element) = Self::pick(&pending, pick as u32) else {
                    return "no-op".into();
                };
                let mut args = DecisionArgs::default();
                match element.subject {
                    Subject::SubscriptionRequest => args.group = Some(GROUPS[group as usize % GROUPS.len()].into()),
                    Subject::ManualSelection => args.card_picks = self.pif_subset(&who, picks),
                    _ => {}
                }
                let verdict = if grant { Verdict::Grant } else { Verdict::Deny };
                let result = node.decide(&who, element.element_id, verdict, args);
                if result.is_ok() && verdict == Verdict::Deny && element.subject == Subject::Repatriation {
                    if let PayloadRef::Card(id) = &element.payload_ref {
                        self.declined.insert(id.clone());
                    }
                }
                format!("{:?} {:?}: {}", verdict, element.subject, outcome(result))
            }
            Op::Subscribe { consumer, publisher } => {
                let consumer = account(consumer);
                outcome(self.node(&consumer).subscribe(&consumer, &account(publisher)))
            }
            Op::Unsubscribe { consumer, pick } => {
                let consumer = account(consumer);
                let publishers: Vec<_> = self.state(&consumer).confirmed_publishers.iter().cloned().collect();
                match Self::pick(&publishers, pick as u32) {
                    Some(p) => outcome(self.node(&consumer).unsubscribe(&consumer, &p)),
                    None => "no-op".into(),
                }
            }
            Op::Cancel { publisher, pick, demand } => {
                let publisher = account(publisher);
                let subscribers: Vec<_> = self.state(&publisher).accepted_subscribers.keys().cloned().collect();
                match Self::pick(&subscribers, pick as u32) {
                    Some(c) => outcome(self.node(&publisher).cancel_subscription(&publisher, &c, demand)),
                    None => "no-op".into(),
                }
            }
            Op::Publish { publisher, pick, groups } => {
                let publisher = account(publisher);
                let pif: Vec<_> = self.state(&publisher).pif.keys().cloned().collect();
                let Some(id) = Self::pick(&pif, pick as u32) else {
                    return "no-op".into();
                };
                let mut chosen: Vec<String> = GROUPS
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| groups & (1 << i) != 0)
                    .map(|(_, g)| g.to_string())
                    .collect();
                if chosen.is_empty() {
                    chosen.push("all".into());
                }
                match self.node(&publisher).publish(&publisher, &id, &chosen) {
                    Ok(report) => format!("ok: {} delivered", report.delivered()),
                    Err(e) => format!("error: {}", e.code()),
                }
            }
            Op::SetStrategy { account: who, kind, picks } => {
                let who = account(who);
                let kind = [
                    StrategyKind::GlobalSet,
                    StrategyKind::ManualSelection,
                    StrategyKind::GroupHistory,
                    StrategyKind::Nothing,
                ][kind as usize % 4];
                let set = if kind == StrategyKind::GlobalSet {
                    self.pif_subset(&who, picks)
                } else {
                    Vec::new()
                };
                outcome(self.node(&who).set_strategy(&who, kind, set))
            }
            Op::AssignGroup { publisher, pick, group } => {
                let publisher = account(publisher);
                let subscribers: Vec<_> = self.state(&publisher).accepted_subscribers.keys().cloned().collect();
                match Self::pick(&subscribers, pick as u32) {
                    Some(c) => outcome(self.node(&publisher).assign_group(
                        &publisher,
                        &c,
                        GROUPS[group as usize % GROUPS.len()],
                    )),
                    None => "no-op".into(),
                }
            }
            Op::Redeliver { pick } => {
                let received = self.tap.received.lock().clone();
                let Some((node_name, envelope)) = Self::pick(&received, pick) else {
                    return "no-op".into();
                };
                let node = self
                    .nodes
                    .iter()
                    .find(|n| n.name() == node_name)
                    .expect("tap names a fuzz node")
                    .clone();
                match node.receive(envelope) {
                    Ok(ReceiveOutcome::Duplicate) => "duplicate".into(),
                    Ok(other) => format!("reprocessed: {other:?}"),
                    Err(e) => format!("error: {e}"),
                }
            }
            Op::StrangerPublish { sender, consumer, pick } => {
                let sender = account(sender);
                let consumer = account(consumer);
                let cards: Vec<Arc<DigitalCard>> = self
                    .home
                    .keys()
                    .flat_map(|a| self.state(a).pif.values().cloned().collect::<Vec<_>>())
                    .collect();
                let Some(card) = Self::pick(&cards, pick as u32) else {
                    return "no-op".into();
                };
                let legitimate = card.id.concerned == sender
                    && self.state(&sender).accepted_subscribers.contains_key(&consumer);
                let command = Command::PublishCard((*card).clone());
                let envelope = Envelope {
                    envelope_id: uuid_from(self.next_card, pick),
                    protocol_version: PROTOCOL_VERSION,
                    sender,
                    receiver: consumer.clone(),
                    command: command.kind(),
                    payload: command.encode(),
                    sent_at: self.clock_now(),
                };
                self.next_card += 1;
                let result = self.node(&consumer).receive(envelope);
                let tag = if legitimate { "replay" } else { "forged" };
                match result {
                    Ok(ReceiveOutcome::Dispatched) => format!("{tag}: dispatched"),
                    Ok(ReceiveOutcome::Duplicate) => format!("{tag}: duplicate"),
                    Ok(ReceiveOutcome::Rejected(e)) => format!("{tag}: rejected {}", e.code()),
                    Err(e) => format!("{tag}: error {e}"),
                }
            }
            Op::Advance { seconds } => {
                self.clock.advance(Duration::seconds(seconds as i64));
                for node in &self.nodes {
                    node.sweep_holds();
                }
                "ok".into()
            }
            Op::InjectBug { account: who } => {
                let who = account(who);
                let provider = account(1);
                self.next_card += 1;
                let id = CardId::new(format!("bug-{}", self.next_card), provider.clone(), account(0))
                    .expect("static id is valid");
                let unsigned = DigitalCard::new(
                    id,
                    CardPayload::new("text/plain", "injected", b"injected".to_vec(), self.clock_now()),
                );
                let card = card::contributor_sign(&unsigned, &key(&provider)).expect("unsigned card");
                self.node(&who)
                    .store()
                    .inject_events(&who, vec![AccountEvent::FifAbsorbed(Arc::new(card))])
                    .expect("provisioned account");
                "injected".into()
            }
        }
    }

    fn clock_now(&self) -> chrono::DateTime<Utc> {
        use deus_core::clock::Clock;
        self.clock.now()
    }

    fn pif_subset(&self, who: &AccountId, mask: u8) -> Vec<CardId> {
        self.state(who)
            .pif
            .keys()
            .enumerate()
            .filter(|(i, _)| *i < 8 && mask & (1 << i) != 0)
            .map(|(_, id)| id.clone())
            .collect()
    }

    fn verified(&self, card: &DigitalCard, cache: &mut BTreeMap<String, Overall>) -> Overall {
        *cache.entry(card.fingerprint()).or_insert_with(|| {
            card::verify_card(card, &self.registry)
                .map(|r| r.overall)
                .unwrap_or(Overall::Tampered)
        })
    }

    /// Checks every invariant against the state before and after `op`.
    fn check(
        &self,
        step: usize,
        op: Op,
        before: &Snapshot,
        after: &Snapshot,
        cache: &mut BTreeMap<String, Overall>,
    ) -> Option<Violation> {
        let violation = |invariant, detail: String| Some(Violation { invariant, step, detail });
        for (who, state) in after {
            for card in state.pif.values().chain(state.fifs.values().flat_map(|f| f.values())) {
                let overall = self.verified(card, cache);
                if overall != Overall::DoubleSigned {
                    return violation(
                        Invariant::MediationGate,
                        format!("{who} holds {} as {overall:?}", card.id),
                    );
                }
            }
            for (concerned, fif) in &state.fifs {
                for id in fif.keys() {
                    let known = before[who].fifs.get(concerned).is_some_and(|f| f.contains_key(id));
                    if known {
                        continue;
                    }
                    let accepted = |s: &Snapshot| {
                        s.get(concerned)
                            .is_some_and(|p| p.accepted_subscribers.contains_key(who))
                    };
                    if !accepted(before) && !accepted(after) {
                        return violation(
                            Invariant::PublicationGate,
                            format!("{who} received {id} from {concerned} without being its subscriber"),
                        );
                    }
                }
            }
            for id in state.staging.keys() {
                if state.pif.contains_key(id) {
                    return violation(Invariant::StagingExclusivity, format!("{who} has {id} staged and in its PIF"));
                }
            }
            for id in &self.declined {
                let held = state.staging.contains_key(id)
                    || state.pif.contains_key(id)
                    || state.fifs.values().any(|f| f.contains_key(id))
                    || state.held.iter().any(|h| &h.card.id == id);
                if held {
                    return violation(Invariant::DeclineIsolation, format!("{who} still holds declined card {id}"));
                }
            }
        }
        if let Op::Redeliver { .. } = op {
            if before != after {
                return violation(Invariant::Idempotency, "redelivered envelope changed state".into());
            }
        }
        None
    }
}

fn outcome<T, E: HasCode>(result: Result<T, E>) -> String {
    match result {
        Ok(_) => "ok".into(),
        Err(e) => format!("error: {}", e.code()),
    }
}

trait HasCode {
    fn code(&self) -> &'static str;
}

impl HasCode for deus_core::Error {
    fn code(&self) -> &'static str {
        deus_core::Error::code(self)
    }
}

fn uuid_from(a: u64, b: u16) -> uuid::Uuid {
    uuid::Uuid::from_u64_pair(0x5eed_0000_0000_0000 | a, b as u64)
}

/// Replays `ops` and returns the trace, or the first violation.
fn execute(ops: &[Op]) -> Result<(Vec<(Op, String)>, FinalCards), Violation> {
    let mut world = World::new();
    let mut cache = BTreeMap::new();
    let mut trace = Vec::with_capacity(ops.len());
    let mut before = world.snapshot();
    let mut redelivery_dumps = None;
    for (step, op) in ops.iter().enumerate() {
        if let Op::Redeliver { .. } = op {
            redelivery_dumps = Some(world.dumps());
        }
        let outcome = world.apply(*op);
        let after = world.snapshot();
        if let Some(v) = world.check(step, *op, &before, &after, &mut cache) {
            return Err(v);
        }
        if let Some(dumps) = redelivery_dumps.take() {
            if dumps != world.dumps() {
                return Err(Violation {
                    invariant: Invariant::Idempotency,
                    step,
                    detail: format!("{op} changed account dumps ({outcome})"),
                });
            }
        }
        trace.push((*op, outcome));
        before = after;
    }
    let mut cards = FinalCards::default();
    for state in before.values() {
        cards.staging += state.staging.len();
        cards.pif += state.pif.len();
        cards.fif += state.fifs.values().map(|f| f.len()).sum::<usize>();
    }
    Ok((trace, cards))
}

/// Shrinks a violating trace while it keeps violating the same invariant.
pub fn minimize(ops: &[Op], invariant: Invariant) -> Vec<Op> {
    let fails = |candidate: &[Op]| matches!(execute(candidate), Err(v) if v.invariant == invariant);
    let mut current = ops.to_vec();
    if let Err(v) = execute(&current) {
        current.truncate(v.step + 1);
    }
    let mut chunk = current.len() / 2;
    while chunk >= 1 {
        let mut start = 0;
        let mut removed = false;
        while start < current.len() {
            let end = (start + chunk).min(current.len());
            let mut candidate = current[..start].to_vec();
            candidate.extend_from_slice(&current[end..]);
            if !candidate.is_empty() && fails(&candidate) {
                current = candidate;
                removed = true;
            } else {
                start = end;
            }
        }
        if !removed {
            chunk /= 2;
        }
    }
    current
}

/// Runs `ops` random operations from `seed`.
pub fn fuzz(seed: u64, ops: usize) -> Result<InvariantReport, InvariantViolation> {
    fuzz_ops(seed, generate(seed, ops, None))
}

/// Runs an explicit operation list, as generated or hand-written.
pub fn fuzz_ops(seed: u64, ops: Vec<Op>) -> Result<InvariantReport, InvariantViolation> {
    match execute(&ops) {
        Ok((steps, final_cards)) => {
            let mut outcomes = BTreeMap::new();
            for (op, outcome) in &steps {
                let class = outcome.split(':').next().unwrap_or(outcome);
                *outcomes.entry(format!("{} {class}", op.name())).or_insert(0) += 1;
            }
            let trace = steps
                .iter()
                .enumerate()
                .map(|(i, (op, outcome))| format!("{i:>5} {op} -> {outcome}"))
                .collect();
            Ok(InvariantReport {
                seed,
                ops: ops.len(),
                trace,
                outcomes,
                final_cards,
            })
        }
        Err(violation) => Err(InvariantViolation {
            minimized: minimize(&ops, violation.invariant),
            violation,
        }),
    }
}
