mod common;

use std::collections::BTreeSet;

use common::*;
use deus_core::barker::{AttentionFilter, DecisionArgs, ElementKind, PayloadRef, Subject, Verdict};
use deus_core::card::{self, Overall};
use deus_core::identity;
use deus_core::store::{AccountProfile, StrategyKind};
use deus_core::transfer::{Command, DecisionMessage, Envelope, TransferError, PROTOCOL_VERSION};
use deus_core::{Error, ReceiveOutcome};
use uuid::Uuid;

fn fig2(world: &World) -> deus_core::card::CardId {
    world.establish("bob", "alice", "all");
    world.repatriate("1", "higgins", "alice", "Discharge letter")
}

#[test]
fn triangle_across_three_nodes() {
    let world = World::three_nodes();
    let id = fig2(&world);

    let alice = world.node("alice").state(&acct("alice")).unwrap();
    let in_pif = alice.pif.get(&id).expect("card in alice's PIF");
    let report = card::verify_card(in_pif, &world.node("alice").registry()).unwrap();
    assert_eq!(report.overall, Overall::DoubleSigned);
    assert!(alice.staging.is_empty());

    let fif = world.node("bob").read_fif(&acct("bob"), &acct("alice")).unwrap();
    assert_eq!(fif.len(), 1);
    assert_eq!(fif[0].as_ref(), in_pif.as_ref(), "consumer stores the published bytes unchanged");

    let higgins = world.node("higgins").dump(&acct("higgins")).unwrap();
    assert!(higgins.staging.is_empty() && higgins.pif.is_empty() && higgins.fif.is_empty());
    assert!(world.net.sent() > 0);
}

#[test]
fn colocated_triangle_uses_loopback_and_matches_three_nodes() {
    let spread = World::three_nodes();
    fig2(&spread);
    let together = World::one_node();
    fig2(&together);
    assert_eq!(together.net.sent(), 0, "no envelope left the single node");
    assert_eq!(spread.card_sets(), together.card_sets());
}

#[test]
fn negotiation_picks_loopback_only_for_colocated_accounts() {
    let world = World::build(
        &[
            ("n1", "alice", AccountProfile::default()),
            ("n1", "higgins", AccountProfile::default()),
            ("n2", "bob", AccountProfile::default()),
        ],
        &[],
    );
    let core = world.node("alice").transfer();
    assert_eq!(core.negotiate_with(&acct("higgins")).unwrap(), "loopback");
    assert_eq!(core.negotiate_with(&acct("bob")).unwrap(), "sim");
    assert_eq!(core.resolve_tp_id(&acct("higgins"), "loopback").unwrap().0, "local");
    assert_eq!(core.resolve_tp_id(&acct("bob"), "sim").unwrap().0, "http://n2.sim");
    assert_eq!(
        core.resolve_tp_id(&acct("carol"), "sim"),
        Err(TransferError::UnknownAccount(acct("carol")))
    );
    assert!(matches!(
        core.resolve_tp_id(&acct("bob"), "loopback"),
        Err(TransferError::UnsupportedProtocol { .. })
    ));
    let receipt = world
        .node("higgins")
        .contribute(&acct("higgins"), unsigned_card("1", "higgins", "alice", "x"))
        .unwrap();
    assert_eq!(receipt.protocol, "loopback");
}

#[test]
fn declined_card_is_cleaned_up_and_contributor_notified() {
    let world = World::three_nodes();
    world.establish("bob", "alice", "all");
    let card = unsigned_card("9", "higgins", "alice", "Wrong patient");
    world.node("higgins").contribute(&acct("higgins"), card.clone()).unwrap();
    assert_eq!(world.node("alice").read_staging(&acct("alice")).unwrap().len(), 1);
    world.decide_only("alice", Subject::Repatriation, Verdict::Deny, DecisionArgs::default());

    let sets = world.card_sets();
    assert!(sets.values().all(Vec::is_empty), "declined card stored somewhere: {sets:?}");
    let notices = world.attention("higgins");
    assert!(notices
        .iter()
        .any(|e| e.kind == ElementKind::Notification && e.payload_ref == PayloadRef::Card(card.id.clone()) && e.text.contains("declined")));
}

#[test]
fn tampered_contribution_is_rejected_without_staging() {
    let world = World::three_nodes();
    let mut signed = card::contributor_sign(&unsigned_card("1", "higgins", "alice", "x"), &key("higgins")).unwrap();
    signed.payload.title = "changed".into();
    let envelope = Envelope {
        envelope_id: Uuid::from_u128(1),
        protocol_version: PROTOCOL_VERSION,
        sender: acct("higgins"),
        receiver: acct("alice"),
        command: Command::RepatriateCard(signed.clone()).kind(),
        payload: Command::RepatriateCard(signed).encode(),
        sent_at: chrono::Utc::now(),
    };
    let outcome = world.node("alice").receive(envelope).unwrap();
    assert!(matches!(outcome, ReceiveOutcome::Rejected(ref e) if e.code() == "VerificationFailed"), "{outcome:?}");
    assert!(world.node("alice").read_staging(&acct("alice")).unwrap().is_empty());
    assert!(world.pending("alice", Subject::Repatriation).is_empty());
    assert_eq!(world.attention("alice").len(), 1, "rejection recorded as a notice");
}

#[test]
fn contribution_preconditions() {
    let world = World::three_nodes();
    let err = world
        .node("higgins")
        .contribute(&acct("higgins"), unsigned_card("1", "bob", "alice", "x"))
        .unwrap_err();
    assert_eq!(err.code(), "WrongProvider");
    let signed = card::contributor_sign(&unsigned_card("1", "higgins", "alice", "x"), &key("higgins")).unwrap();
    assert_eq!(world.node("higgins").contribute(&acct("higgins"), signed).unwrap_err().code(), "AlreadySigned");
    let before = world.node("higgins").dump(&acct("higgins")).unwrap();
    world
        .node("higgins")
        .contribute(&acct("higgins"), unsigned_card("2", "higgins", "alice", "x"))
        .unwrap();
    let after = world.node("higgins").dump(&acct("higgins")).unwrap();
    assert_eq!((before.pif, before.fif, before.staging), (after.pif, after.fif, after.staging));
}

#[test]
fn self_contribution_goes_through_repatriation() {
    let world = World::three_nodes();
    let card = unsigned_card("1", "alice", "alice", "Diary");
    let receipt = world.node("alice").contribute(&acct("alice"), card).unwrap();
    assert_eq!(receipt.protocol, "loopback");
    assert_eq!(world.pending("alice", Subject::Repatriation).len(), 1);
    world.decide_only("alice", Subject::Repatriation, Verdict::Grant, DecisionArgs::default());
    assert_eq!(world.node("alice").read_pif(&acct("alice")).unwrap().len(), 1);
}

#[test]
fn subscription_requests_collapse_and_self_subscription_fails() {
    let world = World::three_nodes();
    let send_request = |n: u128| {
        world
            .node("alice")
            .receive(Envelope {
                envelope_id: Uuid::from_u128(n),
                protocol_version: PROTOCOL_VERSION,
                sender: acct("bob"),
                receiver: acct("alice"),
                command: Command::RequestSubscription.kind(),
                payload: Command::RequestSubscription.encode(),
                sent_at: chrono::Utc::now(),
            })
            .unwrap()
    };
    assert_eq!(send_request(1), ReceiveOutcome::Dispatched);
    assert_eq!(send_request(2), ReceiveOutcome::Dispatched);
    assert_eq!(send_request(2), ReceiveOutcome::Duplicate);
    assert_eq!(world.pending("alice", Subject::SubscriptionRequest).len(), 1);

    assert_eq!(
        world.node("alice").subscribe(&acct("alice"), &acct("alice")).unwrap_err(),
        Error::SelfSubscription
    );
    world.node("bob").subscribe(&acct("bob"), &acct("alice")).unwrap();
    assert_eq!(
        world.node("bob").subscribe(&acct("bob"), &acct("alice")).unwrap_err(),
        Error::RequestPending(acct("alice"))
    );
}

#[test]
fn denied_subscription_leaves_no_relationship() {
    let world = World::three_nodes();
    world.node("bob").subscribe(&acct("bob"), &acct("alice")).unwrap();
    world.decide_only("alice", Subject::SubscriptionRequest, Verdict::Deny, DecisionArgs::default());
    let bob = world.node("bob").state(&acct("bob")).unwrap();
    assert!(bob.confirmed_publishers.is_empty() && bob.pending_requests.is_empty());
    assert!(world.node("alice").state(&acct("alice")).unwrap().accepted_subscribers.is_empty());
    assert!(world.attention("bob").iter().any(|e| e.text.contains("denied")));
    world.node("bob").subscribe(&acct("bob"), &acct("alice")).unwrap();
}

#[test]
fn forged_decision_is_rejected() {
    let world = World::three_nodes();
    world.node("bob").subscribe(&acct("bob"), &acct("alice")).unwrap();
    let bytes = DecisionMessage::signed_bytes(&acct("alice"), &acct("bob"), true, Some("all"));
    let forged = Command::DecisionSubscription(DecisionMessage {
        publisher: acct("alice"),
        subscriber: acct("bob"),
        granted: true,
        group: Some("all".into()),
        signature: identity::sign(&key("carol"), &bytes),
    });
    let before = world.node("bob").state(&acct("bob")).unwrap();
    let outcome = world
        .node("bob")
        .receive(Envelope {
            envelope_id: Uuid::from_u128(77),
            protocol_version: PROTOCOL_VERSION,
            sender: acct("alice"),
            receiver: acct("bob"),
            command: forged.kind(),
            payload: forged.encode(),
            sent_at: chrono::Utc::now(),
        })
        .unwrap();
    assert_eq!(outcome, ReceiveOutcome::Rejected(Error::BadSignature));
    let after = world.node("bob").state(&acct("bob")).unwrap();
    assert_eq!(before.confirmed_publishers, after.confirmed_publishers);
    assert_eq!(before.pending_requests, after.pending_requests);
}

#[test]
fn cancel_with_and_without_deletion_demand() {
    let world = World::build(
        &[
            ("n1", "higgins", AccountProfile::default()),
            ("n2", "alice", AccountProfile::default()),
            ("n3", "bob", AccountProfile::default()),
            ("n3", "carol", AccountProfile::default()),
        ],
        &[],
    );
    world.establish("bob", "alice", "all");
    world.establish("carol", "alice", "all");
    world.repatriate("1", "higgins", "alice", "x");

    world.node("alice").cancel_subscription(&acct("alice"), &acct("bob"), false).unwrap();
    let bob = world.node("bob").state(&acct("bob")).unwrap();
    assert!(bob.confirmed_publishers.is_empty());
    assert_eq!(bob.dif().len(), 1, "FIF intact without a deletion demand");
    assert!(world.pending("bob", Subject::DeletionDemand).is_empty());

    world.node("alice").cancel_subscription(&acct("alice"), &acct("carol"), true).unwrap();
    assert_eq!(world.pending("carol", Subject::DeletionDemand).len(), 1);
    assert_eq!(world.node("carol").read_dif(&acct("carol")).unwrap().len(), 1, "deletion is not enforced");
    world.decide_only("carol", Subject::DeletionDemand, Verdict::Grant, DecisionArgs::default());
    assert!(world.node("carol").read_dif(&acct("carol")).unwrap().is_empty());

    assert!(world.node("alice").state(&acct("alice")).unwrap().accepted_subscribers.is_empty());
    assert_eq!(
        world.node("alice").cancel_subscription(&acct("alice"), &acct("dave"), false).unwrap_err(),
        Error::NotASubscriber(acct("dave"))
    );
}

#[test]
fn unsubscribe_updates_both_sides_and_may_demand_deletion() {
    let profile = AccountProfile {
        demand_deletion_on_unsubscribe: true,
        ..AccountProfile::default()
    };
    let world = World::build(
        &[
            ("n1", "higgins", AccountProfile::default()),
            ("n2", "alice", profile),
            ("n3", "bob", AccountProfile::default()),
        ],
        &[],
    );
    world.establish("bob", "alice", "all");
    world.repatriate("1", "higgins", "alice", "x");
    world.node("bob").unsubscribe(&acct("bob"), &acct("alice")).unwrap();
    assert!(world.node("bob").state(&acct("bob")).unwrap().confirmed_publishers.is_empty());
    assert!(world.node("alice").state(&acct("alice")).unwrap().accepted_subscribers.is_empty());
    assert_eq!(world.pending("bob", Subject::DeletionDemand).len(), 1);
    assert_eq!(
        world.node("bob").unsubscribe(&acct("bob"), &acct("alice")).unwrap_err(),
        Error::NotSubscribed(acct("alice"))
    );
}

#[test]
fn group_targeted_publication() {
    let world = World::build(
        &[
            ("n1", "higgins", AccountProfile::default()),
            ("n2", "alice", AccountProfile::default()),
            ("n3", "bob", AccountProfile::default()),
            ("n3", "carol", AccountProfile::default()),
        ],
        &[],
    );
    world.establish("bob", "alice", "oncology-team");
    world.establish("carol", "alice", "all");
    let card = unsigned_card("1", "higgins", "alice", "Tumour board");
    world.node("higgins").contribute(&acct("higgins"), card.clone()).unwrap();
    world.decide_only(
        "alice",
        Subject::Repatriation,
        Verdict::Grant,
        DecisionArgs {
            group: Some("oncology-team".into()),
            card_picks: vec![],
        },
    );
    assert_eq!(world.node("bob").read_dif(&acct("bob")).unwrap().len(), 1);
    assert!(world.node("carol").read_dif(&acct("carol")).unwrap().is_empty());

    let alice = world.node("alice");
    assert_eq!(
        alice.publish(&acct("alice"), &card.id, &["nonexistent".into()]).unwrap_err(),
        Error::UnknownGroup("nonexistent".into())
    );
    let report = alice.publish(&acct("alice"), &card.id, &["all".into()]).unwrap();
    assert_eq!(report.delivered(), 2);
    assert_eq!(world.node("carol").read_dif(&acct("carol")).unwrap().len(), 1);
    assert_eq!(world.node("bob").read_dif(&acct("bob")).unwrap().len(), 1, "redelivery keeps one copy");
    let unknown = deus_core::card::CardId::new("404", acct("higgins"), acct("alice")).unwrap();
    assert_eq!(alice.publish(&acct("alice"), &unknown, &["all".into()]).unwrap_err().code(), "NotInPif");
}

#[test]
fn accept_with_zero_subscribers_publishes_nothing() {
    let world = World::three_nodes();
    let before = world.net.sent();
    world.repatriate("1", "higgins", "alice", "x");
    assert_eq!(world.node("alice").read_pif(&acct("alice")).unwrap().len(), 1);
    // contribution plus nothing else across the network
    assert_eq!(world.net.sent(), before + 1);
}

fn strategy_fixture(kind: StrategyKind) -> (World, Vec<deus_core::card::CardId>) {
    let world = World::build(
        &[
            ("n1", "higgins", AccountProfile::default()),
            ("n2", "alice", AccountProfile::default()),
            ("n3", "bob", AccountProfile::default()),
        ],
        &[],
    );
    let ids: Vec<_> = (1..=3)
        .map(|n| world.repatriate(&n.to_string(), "higgins", "alice", &format!("card {n}")))
        .collect();
    let alice = world.node("alice");
    alice.define_group(&acct("alice"), "team").unwrap();
    // the group log gets c3 then c1
    alice.publish(&acct("alice"), &ids[2], &["team".into()]).unwrap();
    alice.publish(&acct("alice"), &ids[0], &["team".into()]).unwrap();
    let global = if kind == StrategyKind::GlobalSet { vec![ids[1].clone()] } else { vec![] };
    alice.set_strategy(&acct("alice"), kind, global).unwrap();
    (world, ids)
}

#[test]
fn initial_publication_strategies() {
    let fif_ids = |world: &World| -> Vec<deus_core::card::CardId> {
        world
            .node("bob")
            .read_dif(&acct("bob"))
            .unwrap()
            .iter()
            .map(|c| c.id.clone())
            .collect()
    };

    let (world, ids) = strategy_fixture(StrategyKind::GlobalSet);
    world.establish("bob", "alice", "team");
    assert_eq!(fif_ids(&world), vec![ids[1].clone()]);

    let (world, ids) = strategy_fixture(StrategyKind::ManualSelection);
    world.establish("bob", "alice", "team");
    assert!(fif_ids(&world).is_empty());
    world.decide_only(
        "alice",
        Subject::ManualSelection,
        Verdict::Grant,
        DecisionArgs {
            group: None,
            card_picks: vec![ids[0].clone()],
        },
    );
    assert_eq!(fif_ids(&world), vec![ids[0].clone()]);

    let (world, ids) = strategy_fixture(StrategyKind::GroupHistory);
    world.recorder.received.lock().unwrap().clear();
    world.establish("bob", "alice", "team");
    let order: Vec<_> = world
        .recorder
        .received
        .lock()
        .unwrap()
        .iter()
        .filter(|e| e.receiver == acct("bob"))
        .filter_map(|e| match e.command().unwrap() {
            Command::PublishCard(c) => Some(c.id),
            _ => None,
        })
        .collect();
    assert_eq!(order, vec![ids[2].clone(), ids[0].clone()], "group log delivered in order");
    let got: BTreeSet<_> = fif_ids(&world).into_iter().collect();
    assert_eq!(got, BTreeSet::from([ids[0].clone(), ids[2].clone()]));

    let (world, _) = strategy_fixture(StrategyKind::Nothing);
    world.establish("bob", "alice", "team");
    assert!(fif_ids(&world).is_empty());
}

#[test]
fn global_set_must_reference_pif_cards() {
    let world = World::three_nodes();
    let missing = deus_core::card::CardId::new("1", acct("higgins"), acct("alice")).unwrap();
    assert_eq!(
        world
            .node("alice")
            .set_strategy(&acct("alice"), StrategyKind::GlobalSet, vec![missing])
            .unwrap_err()
            .code(),
        "NotInPif"
    );
}

#[test]
fn virtual_account_auto_accepts_white_listed_contributors() {
    let mut vera = AccountProfile::virtual_account();
    vera.subscriber_template.insert(acct("bob"), "all".into());
    vera.subscriber_template.insert(acct("carol"), "all".into());
    let world = World::build(
        &[
            ("n1", "higgins", AccountProfile::default()),
            ("n1", "dave", AccountProfile::default()),
            ("n2", "vera", vera),
            ("n3", "bob", AccountProfile::default()),
            ("n3", "carol", AccountProfile::default()),
        ],
        &[("vera", "higgins")],
    );
    world.node("bob").subscribe(&acct("bob"), &acct("vera")).unwrap();
    world.node("carol").subscribe(&acct("carol"), &acct("vera")).unwrap();
    let card = unsigned_card("1", "higgins", "vera", "Team note");
    world.node("higgins").contribute(&acct("higgins"), card.clone()).unwrap();

    let decisions = |w: &World| -> usize {
        w.home
            .keys()
            .map(|a| {
                w.node(a)
                    .history(&acct(a))
                    .unwrap()
                    .iter()
                    .filter(|e| e.decision.is_some())
                    .count()
            })
            .sum()
    };
    assert_eq!(decisions(&world), 0);
    assert_eq!(world.node("vera").read_pif(&acct("vera")).unwrap().len(), 1);
    for consumer in ["bob", "carol"] {
        let dif = world.node(consumer).read_dif(&acct(consumer)).unwrap();
        assert_eq!(dif.len(), 1, "{consumer}");
        assert_eq!(dif[0].id, card.id);
    }

    world
        .node("dave")
        .contribute(&acct("dave"), unsigned_card("1", "dave", "vera", "Unvetted"))
        .unwrap();
    assert_eq!(world.node("vera").read_staging(&acct("vera")).unwrap().len(), 1);
    assert_eq!(world.pending("vera", Subject::Repatriation).len(), 1);
    assert_eq!(world.node("bob").read_dif(&acct("bob")).unwrap().len(), 1);
}

#[test]
fn redelivering_every_envelope_changes_nothing() {
    let world = World::three_nodes();
    fig2(&world);
    world.node("bob").unsubscribe(&acct("bob"), &acct("alice")).unwrap();
    let dumps = |w: &World| -> Vec<Vec<u8>> {
        w.home
            .iter()
            .map(|(a, n)| w.nodes[n].dump(&acct(a)).unwrap().to_bytes())
            .collect()
    };
    let before = dumps(&world);
    let received: Vec<Envelope> = world.recorder.received.lock().unwrap().clone();
    assert_eq!(received.len(), 5);
    for _ in 0..2 {
        for envelope in &received {
            let node = world.node(envelope.receiver.as_str().rsplit('/').next().unwrap());
            assert_eq!(node.receive(envelope.clone()).unwrap(), ReceiveOutcome::Duplicate);
        }
    }
    assert_eq!(before, dumps(&world));
}

#[test]
fn publication_racing_the_grant_is_held_then_released_or_dropped() {
    let world = World::three_nodes();
    let id = world.repatriate("1", "higgins", "alice", "x");
    let card = world.node("alice").state(&acct("alice")).unwrap().pif[&id].as_ref().clone();
    world.node("bob").subscribe(&acct("bob"), &acct("alice")).unwrap();
    let early = Command::PublishCard(card.clone());
    world
        .node("alice")
        .transfer()
        .send_command(&acct("alice"), &acct("bob"), &early)
        .unwrap();
    let bob = world.node("bob").state(&acct("bob")).unwrap();
    assert_eq!(bob.held.len(), 1);
    assert!(bob.dif().is_empty());
    world.decide_only("alice", Subject::SubscriptionRequest, Verdict::Grant, DecisionArgs::default());
    let bob = world.node("bob").state(&acct("bob")).unwrap();
    assert!(bob.held.is_empty());
    assert_eq!(bob.dif().len(), 1);

    let world = World::three_nodes();
    let id = world.repatriate("1", "higgins", "alice", "x");
    let card = world.node("alice").state(&acct("alice")).unwrap().pif[&id].as_ref().clone();
    world.node("bob").subscribe(&acct("bob"), &acct("alice")).unwrap();
    world
        .node("alice")
        .transfer()
        .send_command(&acct("alice"), &acct("bob"), &Command::PublishCard(card))
        .unwrap();
    world.clock.advance(chrono::Duration::seconds(61));
    world.node("bob").sweep_holds();
    let bob = world.node("bob").state(&acct("bob")).unwrap();
    assert!(bob.held.is_empty() && bob.dif().is_empty());
    assert!(world.attention("bob").iter().any(|e| e.text.contains("hold window")));
}

#[test]
fn publication_from_stranger_is_dropped_with_notice() {
    let world = World::three_nodes();
    let id = world.repatriate("1", "higgins", "alice", "x");
    let card = world.node("alice").state(&acct("alice")).unwrap().pif[&id].as_ref().clone();
    world
        .node("alice")
        .transfer()
        .send_command(&acct("alice"), &acct("bob"), &Command::PublishCard(card))
        .unwrap();
    assert!(world.node("bob").read_dif(&acct("bob")).unwrap().is_empty());
    let notices = world.node("bob").list_attention(&acct("bob"), AttentionFilter::default()).unwrap();
    assert_eq!(notices.len(), 1);
    assert!(notices[0].text.contains("not a confirmed publisher"));
}

#[test]
fn delivery_failure_after_retries_and_partial_multicast() {
    let world = World::build(
        &[
            ("n1", "higgins", AccountProfile::default()),
            ("n2", "alice", AccountProfile::default()),
            ("n3", "bob", AccountProfile::default()),
            ("n4", "carol", AccountProfile::default()),
            ("n5", "dave", AccountProfile::default()),
        ],
        &[],
    );
    for c in ["bob", "carol", "dave"] {
        world.establish(c, "alice", "all");
    }
    let id = world.repatriate("1", "higgins", "alice", "x");
    for c in ["bob", "carol", "dave"] {
        world.node(c).cancel_subscription(&acct(c), &acct("alice"), false).ok();
    }
    world.net.set_down("n4", true);
    let report = world.node("alice").publish(&acct("alice"), &id, &["all".into()]).unwrap();
    assert_eq!((report.delivered(), report.failed()), (2, 1));
    let failed = report.entries.iter().find(|e| !e.ok).unwrap();
    assert_eq!(failed.receiver, acct("carol"));
    assert!(failed.error.as_deref().unwrap().contains("3 attempt"));

    let err = world.node("carol").subscribe(&acct("carol"), &acct("higgins"));
    assert!(err.is_ok(), "carol's own node is up; only inbound is down");
    world.net.set_down("n1", true);
    let err = world.node("bob").subscribe(&acct("bob"), &acct("higgins")).unwrap_err();
    assert!(matches!(err, Error::Transfer(TransferError::DeliveryFailed { attempts: 3, .. })), "{err:?}");
    assert!(world.node("bob").state(&acct("bob")).unwrap().pending_requests.is_empty());
}

#[test]
fn dif_is_union_of_foreign_files() {
    let world = World::build(
        &[
            ("n1", "higgins", AccountProfile::default()),
            ("n2", "alice", AccountProfile::default()),
            ("n2", "carol", AccountProfile::default()),
            ("n3", "bob", AccountProfile::default()),
        ],
        &[],
    );
    assert!(world.node("bob").read_dif(&acct("bob")).unwrap().is_empty());
    world.establish("bob", "alice", "all");
    world.establish("bob", "carol", "all");
    world.repatriate("1", "higgins", "alice", "a1");
    world.repatriate("2", "higgins", "alice", "a2");
    world.repatriate("3", "higgins", "carol", "c1");
    let bob = world.node("bob");
    let mut union: Vec<String> = ["alice", "carol"]
        .iter()
        .flat_map(|c| bob.read_fif(&acct("bob"), &acct(c)).unwrap())
        .map(|c| c.fingerprint())
        .collect();
    let mut dif: Vec<String> = bob.read_dif(&acct("bob")).unwrap().iter().map(|c| c.fingerprint()).collect();
    union.sort();
    dif.sort();
    assert_eq!(union, dif);
    assert_eq!(dif.len(), 3);
    assert_eq!(bob.read_fif(&acct("bob"), &acct("dave")).unwrap_err().code(), "UnknownForeignFile");
}

#[test]
fn malformed_and_misaddressed_envelopes() {
    let world = World::three_nodes();
    let good = Envelope {
        envelope_id: Uuid::from_u128(5),
        protocol_version: PROTOCOL_VERSION,
        sender: acct("bob"),
        receiver: acct("carol"),
        command: Command::RequestSubscription.kind(),
        payload: Command::RequestSubscription.encode(),
        sent_at: chrono::Utc::now(),
    };
    assert_eq!(
        world.node("alice").receive(good.clone()),
        Err(TransferError::UnknownReceiverAccount(acct("carol")))
    );
    let mut bad = good.clone();
    bad.receiver = acct("alice");
    bad.payload = b"not json".to_vec();
    assert!(matches!(world.node("alice").receive(bad), Err(TransferError::MalformedEnvelope(_))));
    let mut old = good;
    old.receiver = acct("alice");
    old.protocol_version = 9;
    assert!(matches!(world.node("alice").receive(old), Err(TransferError::MalformedEnvelope(_))));
}

#[test]
fn pleas_survive_a_restart_and_route_their_decision() {
    use deus_core::clock::SystemClock;
    use deus_core::store::Store;
    use deus_core::{Node, NodeOptions};
    use std::sync::Arc;

    let dir = tempfile::tempdir().unwrap();
    let boot = || {
        let store = Arc::new(Store::open(dir.path(), true, Arc::new(SystemClock)).unwrap());
        let node = Node::new(store, registry(&NAMES), NodeOptions::named("solo"));
        for name in ["higgins", "alice", "bob"] {
            node.add_sign_key(acct(name), key(name));
        }
        node
    };
    {
        let node = boot();
        for name in ["higgins", "alice", "bob"] {
            node.provision_account(acct(name), AccountProfile::default(), Some(key(name))).unwrap();
        }
        node.subscribe(&acct("bob"), &acct("alice")).unwrap();
        node.contribute(&acct("higgins"), unsigned_card("1", "higgins", "alice", "x")).unwrap();
    }
    let node = boot();
    let pleas = node.list_attention(&acct("alice"), AttentionFilter::default()).unwrap();
    assert_eq!(pleas.len(), 2);
    for plea in pleas {
        node.decide(&acct("alice"), plea.element_id, Verdict::Grant, DecisionArgs::default()).unwrap();
    }
    assert_eq!(node.read_pif(&acct("alice")).unwrap().len(), 1);
    assert!(node.state(&acct("bob")).unwrap().confirmed_publishers.contains(&acct("alice")));
    drop(node);
    let node = boot();
    assert_eq!(node.read_dif(&acct("bob")).unwrap().len(), 1, "subscription granted before the card was accepted");
    assert_eq!(node.read_pif(&acct("alice")).unwrap().len(), 1);
}

#[test]
fn confirmed_publisher_without_cards_reads_as_empty_fif() {
    let w = World::three_nodes();
    w.establish("bob", "alice", "family");
    assert!(w.node("bob").read_fif(&acct("bob"), &acct("alice")).unwrap().is_empty());
}
