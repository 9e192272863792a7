#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration as StdDuration;

use chrono::{TimeZone, Utc};
use deus_core::barker::{AttentionElement, AttentionFilter, DecisionArgs, ElementKind, ElementState, Subject, Verdict};
use deus_core::card::{CardId, CardPayload, DigitalCard};
use deus_core::clock::{IdSource, ManualClock};
use deus_core::identity::{AccountId, KeyRegistry, SignKey};
use deus_core::sim::SimNetwork;
use deus_core::store::{AccountProfile, Store};
use deus_core::transfer::{Envelope, EnvelopeTap, RetryPolicy};
use deus_core::{Node, NodeOptions};

pub fn acct(name: &str) -> AccountId {
    AccountId::parse(&format!("https://ids.example/{name}")).unwrap()
}

pub fn key(name: &str) -> SignKey {
    SignKey::from_seed_text(&format!("test-key:{name}"))
}

pub fn registry(names: &[&str]) -> KeyRegistry {
    let mut registry = KeyRegistry::new();
    for name in names {
        registry.register(acct(name), key(name).verify_key()).unwrap();
    }
    registry
}

pub fn payload(title: &str, body: &[u8]) -> CardPayload {
    CardPayload::new("text/plain", title, body.to_vec(), Utc.with_ymd_and_hms(2010, 3, 14, 9, 30, 0).unwrap())
}

pub fn unsigned_card(disc: &str, provider: &str, concerned: &str, title: &str) -> DigitalCard {
    DigitalCard::new(
        CardId::new(disc, acct(provider), acct(concerned)).unwrap(),
        payload(title, format!("{title} body").as_bytes()),
    )
}

/// Records every envelope sent and received by the nodes it is tapped into.
#[derive(Default)]
pub struct Recorder {
    pub sent: Mutex<Vec<Envelope>>,
    pub received: Mutex<Vec<Envelope>>,
}

impl EnvelopeTap for Recorder {
    fn on_send(&self, envelope: &Envelope) {
        self.sent.lock().unwrap().push(envelope.clone());
    }
    fn on_receive(&self, envelope: &Envelope) {
        self.received.lock().unwrap().push(envelope.clone());
    }
}

pub struct World {
    pub net: Arc<SimNetwork>,
    pub nodes: BTreeMap<String, Arc<Node>>,
    pub home: BTreeMap<String, String>,
    pub clock: Arc<ManualClock>,
    pub recorder: Arc<Recorder>,
}

pub const NAMES: [&str; 6] = ["alice", "bob", "higgins", "carol", "dave", "vera"];

impl World {
    /// Builds nodes from `(node, account, profile)` triples. Every name in
    /// `NAMES` gets a registered key; `whitelist` lists `(owner, contributor)`.
    pub fn build(accounts: &[(&str, &str, AccountProfile)], whitelist: &[(&str, &str)]) -> Self {
        let clock = ManualClock::new(Utc.with_ymd_and_hms(2011, 6, 1, 12, 0, 0).unwrap());
        let mut reg = registry(&NAMES);
        for (owner, contributor) in whitelist {
            reg.whitelist(&acct(owner), acct(contributor)).unwrap();
        }
        let net = SimNetwork::new();
        let recorder = Arc::new(Recorder::default());
        let mut nodes: BTreeMap<String, Arc<Node>> = BTreeMap::new();
        let mut home = BTreeMap::new();
        for (seq, (node_name, account, profile)) in accounts.iter().enumerate() {
            let node = nodes.entry(node_name.to_string()).or_insert_with(|| {
                let store = Arc::new(Store::in_memory(clock.clone()));
                let mut options = NodeOptions::named(*node_name);
                options.retry = RetryPolicy::new(3, StdDuration::from_millis(1)).with_sleeper(|_| {});
                options.ids = IdSource::seeded(seq as u64 + 7);
                let node = Node::new(store, reg.clone(), options);
                net.attach(&node);
                node.transfer().set_tap(Some(recorder.clone() as Arc<dyn EnvelopeTap>));
                node
            });
            node.provision_account(acct(account), profile.clone(), Some(key(account))).unwrap();
            home.insert(account.to_string(), node_name.to_string());
        }
        net.wire().unwrap();
        Self {
            net,
            nodes,
            home,
            clock,
            recorder,
        }
    }

    pub fn three_nodes() -> Self {
        Self::build(
            &[
                ("n1", "higgins", AccountProfile::default()),
                ("n2", "alice", AccountProfile::default()),
                ("n3", "bob", AccountProfile::default()),
            ],
            &[],
        )
    }

    pub fn one_node() -> Self {
        Self::build(
            &[
                ("n1", "higgins", AccountProfile::default()),
                ("n1", "alice", AccountProfile::default()),
                ("n1", "bob", AccountProfile::default()),
            ],
            &[],
        )
    }

    pub fn node(&self, account: &str) -> &Arc<Node> {
        &self.nodes[&self.home[account]]
    }

    pub fn attention(&self, account: &str) -> Vec<AttentionElement> {
        self.node(account).list_attention(&acct(account), AttentionFilter::default()).unwrap()
    }

    pub fn pending(&self, account: &str, subject: Subject) -> Vec<AttentionElement> {
        self.attention(account)
            .into_iter()
            .filter(|e| e.kind == ElementKind::Plea && e.state == ElementState::Pending && e.subject == subject)
            .collect()
    }

    pub fn decide_only(&self, account: &str, subject: Subject, verdict: Verdict, args: DecisionArgs) {
        let pleas = self.pending(account, subject);
        assert_eq!(pleas.len(), 1, "{account} should have exactly one pending {subject:?} plea: {pleas:?}");
        self.node(account)
            .decide(&acct(account), pleas[0].element_id, verdict, args)
            .unwrap();
    }

    /// bob subscribes to alice and alice grants into `group`.
    pub fn establish(&self, consumer: &str, publisher: &str, group: &str) {
        self.node(consumer).subscribe(&acct(consumer), &acct(publisher)).unwrap();
        self.decide_only(
            publisher,
            Subject::SubscriptionRequest,
            Verdict::Grant,
            DecisionArgs {
                group: Some(group.into()),
                card_picks: vec![],
            },
        );
        assert!(self
            .node(consumer)
            .state(&acct(consumer))
            .unwrap()
            .confirmed_publishers
            .contains(&acct(publisher)));
    }

    /// Contributes a card and has the concerned person accept it.
    pub fn repatriate(&self, disc: &str, provider: &str, concerned: &str, title: &str) -> CardId {
        let card = unsigned_card(disc, provider, concerned, title);
        self.node(provider).contribute(&acct(provider), card.clone()).unwrap();
        let plea = self
            .pending(concerned, Subject::Repatriation)
            .into_iter()
            .find(|e| matches!(&e.payload_ref, deus_core::barker::PayloadRef::Card(id) if *id == card.id))
            .expect("repatriation plea raised");
        self.node(concerned)
            .decide(&acct(concerned), plea.element_id, Verdict::Grant, DecisionArgs::default())
            .unwrap();
        card.id
    }

    /// Fingerprints of every card held anywhere, per account and collection.
    pub fn card_sets(&self) -> BTreeMap<String, Vec<String>> {
        let mut out = BTreeMap::new();
        for (account, node) in &self.home {
            let dump = self.nodes[node].dump(&acct(account)).unwrap();
            for (name, cards) in [("staging", &dump.staging), ("pif", &dump.pif), ("fif", &dump.fif)] {
                let mut prints: Vec<String> = cards.iter().map(|c| c.fingerprint()).collect();
                prints.sort();
                out.insert(format!("{account}/{name}"), prints);
            }
        }
        out
    }
}
