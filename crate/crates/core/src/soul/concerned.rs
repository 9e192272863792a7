//! Repatriation Hub, PIF-Governing and Publication subsystems of the
//! concerned person.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::{account_of, verification_failed};
use crate::barker::{self, DecisionArgs, PayloadRef, Subject, Verdict};
use crate::card::{self, CardId, DigitalCard, Overall};
use crate::identity::{self, AccountId};
use crate::node::{Error, Node, Outbound};
use crate::store::{
    AccountEvent, AccountMode, RelationshipMutation, StoreError, StrategyKind, Txn, DEFAULT_GROUP,
};
use crate::transfer::{Command, DecisionMessage, DeliveryReceipt, MulticastReport, NoticeBody};

/// Handles `RepatriateCard`: stage the contribution and ask the user, or
/// accept it at once for a white-listed contributor of a virtual account.
pub(crate) fn on_repatriate(
    node: &Node,
    txn: &mut Txn<'_>,
    sender: &AccountId,
    card: DigitalCard,
) -> Result<Vec<Outbound>, Error> {
    if sender != &card.id.provider {
        return Err(verification_failed(format!(
            "card {} was sent by {sender}, not by its provider",
            card.id
        )));
    }
    card.validate(node.max_body())?;
    let registry = node.registry();
    let report = card::verify_card(&card, &registry).map_err(|e| verification_failed(e.to_string()))?;
    if report.overall != Overall::SingleSigned {
        return Err(verification_failed(format!("card {} verifies as {:?}", card.id, report.overall)));
    }
    txn.stage_card(&card, &registry)?;
    if !txn.state().staging.contains_key(&card.id) {
        // already repatriated earlier
        return Ok(Vec::new());
    }
    let account = account_of(txn);
    let auto_accept = txn.state().profile.mode == AccountMode::VirtualAutoAccept
        && registry.is_whitelisted(&account, &card.id.provider);
    if auto_accept {
        let key = node.sign_key(&account)?;
        let signed = txn.assimilate(&card.id, &key, &registry)?;
        barker::add_notification(
            txn,
            Subject::Repatriation,
            PayloadRef::Card(card.id.clone()),
            format!("card {} from white-listed {} accepted automatically", card.id.discriminator, card.id.provider),
        );
        return plan_publication(txn, &signed, &[DEFAULT_GROUP.to_owned()]);
    }
    let payload_ref = PayloadRef::Card(card.id.clone());
    if barker::pending_plea(txn.state(), Subject::Repatriation, &payload_ref).is_none() {
        barker::add_plea(
            txn,
            Subject::Repatriation,
            payload_ref,
            format!("{} contributed \"{}\"", card.id.provider, card.payload.title),
        );
    }
    Ok(Vec::new())
}

pub(crate) fn decide_repatriation(
    node: &Node,
    txn: &mut Txn<'_>,
    card_id: &CardId,
    verdict: Verdict,
    args: &DecisionArgs,
) -> Result<Vec<Outbound>, Error> {
    match verdict {
        Verdict::Grant => {
            let key = node.sign_key(txn.account())?;
            let signed = txn.assimilate(card_id, &key, &node.registry())?;
            let groups = vec![args.group.clone().unwrap_or_else(|| DEFAULT_GROUP.to_owned())];
            plan_publication(txn, &signed, &groups)
        }
        Verdict::Deny => {
            if !txn.state().staging.contains_key(card_id) {
                return Err(StoreError::NotStaged(card_id.clone()).into());
            }
            txn.discard_staged(card_id)?;
            Ok(vec![Outbound::Send {
                to: card_id.provider.clone(),
                command: Command::Notice(NoticeBody {
                    subject: Subject::Repatriation,
                    text: format!("card {} was declined by {}", card_id.discriminator, card_id.concerned),
                    card_id: Some(card_id.clone()),
                    demand_deletion: false,
                }),
            }])
        }
    }
}

/// Resolves publication targets for a PIF card and logs the publication
/// per targeted group. `all` (or a publish-to-all account) targets every
/// accepted subscriber and logs to every group.
fn plan_publication(txn: &mut Txn<'_>, card: &Arc<DigitalCard>, groups: &[String]) -> Result<Vec<Outbound>, Error> {
    let state = txn.state();
    if !state.pif.contains_key(&card.id) {
        return Err(StoreError::NotInPif(card.id.clone()).into());
    }
    let everyone = state.profile.publish_to_all || groups.iter().any(|g| g == DEFAULT_GROUP);
    let (targets, logged): (BTreeSet<AccountId>, Vec<String>) = if everyone {
        (
            state.accepted_subscribers.keys().cloned().collect(),
            state.groups.keys().cloned().collect(),
        )
    } else {
        let mut targets = BTreeSet::new();
        for group in groups {
            let members = state.groups.get(group).ok_or_else(|| Error::UnknownGroup(group.clone()))?;
            targets.extend(members.iter().cloned());
        }
        let logged: BTreeSet<String> = groups.iter().cloned().collect();
        (targets, logged.into_iter().collect())
    };
    for group in logged {
        let already = txn
            .state()
            .strategy
            .publication_log
            .get(&group)
            .is_some_and(|log| log.contains(&card.id));
        if !already {
            txn.emit(AccountEvent::PublicationLogged {
                group,
                card_id: card.id.clone(),
            });
        }
    }
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    Ok(vec![Outbound::Publish {
        to: targets.into_iter().collect(),
        card: card.clone(),
    }])
}

/// Handles `RequestSubscription`: a plea for the user, collapsed per
/// requester, or an immediate grant for a templated subscriber of a
/// virtual account.
pub(crate) fn on_request_subscription(node: &Node, txn: &mut Txn<'_>, sender: &AccountId) -> Result<Vec<Outbound>, Error> {
    if sender == txn.account() {
        return Err(Error::SelfSubscription);
    }
    if !node.registry().contains(sender) {
        return Err(StoreError::UnknownAccountId(sender.clone()).into());
    }
    let state = txn.state();
    if let Some(group) = state.accepted_subscribers.get(sender) {
        // the requester lost track of an existing grant; confirm it again
        let group = group.clone();
        return Ok(vec![decision(node, txn, sender, true, Some(group))?]);
    }
    if state.profile.mode == AccountMode::VirtualAutoAccept {
        if let Some(group) = state.profile.subscriber_template.get(sender).cloned() {
            barker::add_notification(
                txn,
                Subject::SubscriptionRequest,
                PayloadRef::Account(sender.clone()),
                format!("{sender} subscribed from the template into group {group}"),
            );
            return grant_subscription(node, txn, sender, group);
        }
    }
    let payload_ref = PayloadRef::Account(sender.clone());
    if barker::pending_plea(txn.state(), Subject::SubscriptionRequest, &payload_ref).is_none() {
        barker::add_plea(
            txn,
            Subject::SubscriptionRequest,
            payload_ref,
            format!("{sender} asks to subscribe"),
        );
    }
    Ok(Vec::new())
}

fn decision(node: &Node, txn: &Txn<'_>, subscriber: &AccountId, granted: bool, group: Option<String>) -> Result<Outbound, Error> {
    let publisher = txn.account().clone();
    let key = node.sign_key(&publisher)?;
    let bytes = DecisionMessage::signed_bytes(&publisher, subscriber, granted, group.as_deref());
    Ok(Outbound::Send {
        to: subscriber.clone(),
        command: Command::DecisionSubscription(DecisionMessage {
            publisher,
            subscriber: subscriber.clone(),
            granted,
            group,
            signature: identity::sign(&key, &bytes),
        }),
    })
}

pub(crate) fn decide_subscription(
    node: &Node,
    txn: &mut Txn<'_>,
    requester: &AccountId,
    verdict: Verdict,
    args: &DecisionArgs,
) -> Result<Vec<Outbound>, Error> {
    match verdict {
        Verdict::Grant => {
            let group = args.group.clone().unwrap_or_else(|| DEFAULT_GROUP.to_owned());
            grant_subscription(node, txn, requester, group)
        }
        Verdict::Deny => Ok(vec![decision(node, txn, requester, false, None)?]),
    }
}

/// Adds the subscriber, sends the signed grant and then the initial
/// publication the account's strategy calls for.
fn grant_subscription(node: &Node, txn: &mut Txn<'_>, subscriber: &AccountId, group: String) -> Result<Vec<Outbound>, Error> {
    validate_group(&group)?;
    txn.mutate_relationships(
        RelationshipMutation::AddSubscriber {
            subscriber: subscriber.clone(),
            group: group.clone(),
        },
        &node.registry(),
    )?;
    let mut outbound = vec![decision(node, txn, subscriber, true, Some(group.clone()))?];
    let state = txn.state();
    let initial: Vec<CardId> = match state.strategy.kind {
        StrategyKind::GlobalSet => state.strategy.global_set.clone(),
        StrategyKind::GroupHistory => state.strategy.publication_log.get(&group).cloned().unwrap_or_default(),
        StrategyKind::ManualSelection => {
            barker::add_plea(
                txn,
                Subject::ManualSelection,
                PayloadRef::Account(subscriber.clone()),
                format!("pick the cards to publish initially to {subscriber}"),
            );
            Vec::new()
        }
        StrategyKind::Nothing => Vec::new(),
    };
    outbound.extend(publish_each(txn, subscriber, &initial));
    Ok(outbound)
}

fn publish_each(txn: &Txn<'_>, subscriber: &AccountId, ids: &[CardId]) -> Vec<Outbound> {
    let mut seen = BTreeSet::new();
    ids.iter()
        .filter(|id| seen.insert((*id).clone()))
        .filter_map(|id| txn.state().pif.get(id).cloned())
        .map(|card| Outbound::Publish {
            to: vec![subscriber.clone()],
            card,
        })
        .collect()
}

pub(crate) fn decide_manual_selection(
    _node: &Node,
    txn: &mut Txn<'_>,
    subscriber: &AccountId,
    verdict: Verdict,
    args: &DecisionArgs,
) -> Result<Vec<Outbound>, Error> {
    if verdict == Verdict::Deny {
        return Ok(Vec::new());
    }
    if !txn.state().accepted_subscribers.contains_key(subscriber) {
        return Err(Error::NotASubscriber(subscriber.clone()));
    }
    if let Some(missing) = args.card_picks.iter().find(|id| !txn.state().pif.contains_key(*id)) {
        return Err(StoreError::NotInPif(missing.clone()).into());
    }
    Ok(publish_each(txn, subscriber, &args.card_picks))
}

/// Handles `Unsubscribe` from a consumer.
pub(crate) fn on_unsubscribe(node: &Node, txn: &mut Txn<'_>, sender: &AccountId) -> Result<Vec<Outbound>, Error> {
    if !txn.state().accepted_subscribers.contains_key(sender) {
        return Err(Error::NotASubscriber(sender.clone()));
    }
    txn.mutate_relationships(RelationshipMutation::RemoveSubscriber(sender.clone()), &node.registry())?;
    barker::add_notification(
        txn,
        Subject::GenericNotice,
        PayloadRef::Account(sender.clone()),
        format!("{sender} unsubscribed"),
    );
    if !txn.state().profile.demand_deletion_on_unsubscribe {
        return Ok(Vec::new());
    }
    Ok(vec![Outbound::Send {
        to: sender.clone(),
        command: Command::Notice(NoticeBody {
            subject: Subject::DeletionDemand,
            text: format!("{} asks you to delete its foreign file", txn.account()),
            card_id: None,
            demand_deletion: true,
        }),
    }])
}

fn validate_group(group: &str) -> Result<(), Error> {
    if group.trim().is_empty() || group.len() > 128 || group.chars().any(char::is_control) {
        return Err(Error::InvalidGroup(group.to_owned()));
    }
    Ok(())
}

impl Node {
    /// `select_and_publish`: multicasts a PIF card to the members of the
    /// named groups, or to every subscriber for `all`.
    pub fn publish(&self, account: &AccountId, card_id: &CardId, groups: &[String]) -> Result<MulticastReport, Error> {
        let outbound = self.store().write(account, |txn| {
            let card = txn
                .state()
                .pif
                .get(card_id)
                .cloned()
                .ok_or_else(|| StoreError::NotInPif(card_id.clone()))?;
            plan_publication(txn, &card, groups)
        })?;
        Ok(self.execute(account, outbound))
    }

    /// Ends a subscription from the publisher's side.
    pub fn cancel_subscription(
        &self,
        account: &AccountId,
        consumer: &AccountId,
        demand_deletion: bool,
    ) -> Result<DeliveryReceipt, Error> {
        self.store().write(account, |txn| {
            if !txn.state().accepted_subscribers.contains_key(consumer) {
                return Err(Error::NotASubscriber(consumer.clone()));
            }
            txn.mutate_relationships(RelationshipMutation::RemoveSubscriber(consumer.clone()), &self.registry())?;
            Ok(())
        })?;
        Ok(self
            .transfer()
            .send_command(account, consumer, &Command::CancelSubscription { demand_deletion })?)
    }

    pub fn set_strategy(&self, account: &AccountId, kind: StrategyKind, global_set: Vec<CardId>) -> Result<(), Error> {
        self.store().write(account, |txn| {
            if let Some(missing) = global_set.iter().find(|id| !txn.state().pif.contains_key(*id)) {
                return Err(StoreError::NotInPif(missing.clone()).into());
            }
            txn.emit(AccountEvent::StrategyChanged { kind, global_set });
            Ok::<_, Error>(())
        })
    }

    pub fn define_group(&self, account: &AccountId, group: &str) -> Result<(), Error> {
        validate_group(group)?;
        self.store().write(account, |txn| {
            if !txn.state().groups.contains_key(group) {
                txn.emit(AccountEvent::GroupDefined(group.to_owned()));
            }
            Ok::<_, Error>(())
        })
    }

    /// Moves an accepted subscriber into another publication group.
    pub fn assign_group(&self, account: &AccountId, subscriber: &AccountId, group: &str) -> Result<(), Error> {
        validate_group(group)?;
        self.store().write(account, |txn| {
            if !txn.state().accepted_subscribers.contains_key(subscriber) {
                return Err(Error::NotASubscriber(subscriber.clone()));
            }
            txn.mutate_relationships(
                RelationshipMutation::AddSubscriber {
                    subscriber: subscriber.clone(),
                    group: group.to_owned(),
                },
                &self.registry(),
            )?;
            Ok(())
        })
    }

    pub fn groups(&self, account: &AccountId) -> Result<BTreeMap<String, BTreeSet<AccountId>>, Error> {
        Ok(self.state(account)?.groups.clone())
    }

    pub fn read_pif(&self, account: &AccountId) -> Result<Vec<Arc<DigitalCard>>, Error> {
        Ok(self.state(account)?.pif.values().cloned().collect())
    }

    pub fn read_staging(&self, account: &AccountId) -> Result<Vec<Arc<DigitalCard>>, Error> {
        Ok(self.state(account)?.staging.values().cloned().collect())
    }
}
