//! Subscription and DIF-Governing subsystems of an information consumer.

use std::sync::Arc;

use super::verification_failed;
use crate::barker::{self, PayloadRef, Subject, Verdict};
use crate::card::{self, DigitalCard, Overall};
use crate::identity::{self, AccountId};
use crate::node::{Error, Node, Outbound};
use crate::store::{AccountEvent, HeldPublication, RelationshipMutation, StoreError, Txn};
use crate::transfer::{Command, DecisionMessage, DeliveryReceipt, NoticeBody};

/// Handles `DecisionSubscription` for a request this account sent.
pub(crate) fn on_decision(
    node: &Node,
    txn: &mut Txn<'_>,
    sender: &AccountId,
    decision: DecisionMessage,
) -> Result<Vec<Outbound>, Error> {
    if &decision.publisher != sender || &decision.subscriber != txn.account() {
        return Err(Error::BadSignature);
    }
    if !txn.state().pending_requests.contains(sender) {
        return Err(Error::NoPendingRequest(sender.clone()));
    }
    let registry = node.registry();
    let key = registry
        .verify_key(sender)
        .ok_or_else(|| StoreError::UnknownAccountId(sender.clone()))?;
    let bytes = DecisionMessage::signed_bytes(
        &decision.publisher,
        &decision.subscriber,
        decision.granted,
        decision.group.as_deref(),
    );
    if !identity::verify(key, &bytes, &decision.signature) {
        return Err(Error::BadSignature);
    }
    txn.emit(AccountEvent::PendingRequestCleared(sender.clone()));
    let held: Vec<HeldPublication> = txn.state().held.iter().filter(|h| &h.sender == sender).cloned().collect();
    if decision.granted {
        txn.mutate_relationships(RelationshipMutation::AddPublisher(sender.clone()), &registry)?;
        barker::add_notification(
            txn,
            Subject::SubscriptionRequest,
            PayloadRef::Account(sender.clone()),
            match &decision.group {
                Some(group) => format!("{sender} granted the subscription (group {group})"),
                None => format!("{sender} granted the subscription"),
            },
        );
        for h in held {
            txn.emit(AccountEvent::HeldReleased { card_id: h.card.id.clone() });
            if let Err(e) = txn.absorb_into_fif(&h.card, &registry) {
                drop_notice(txn, &h, &e.to_string());
            }
        }
    } else {
        barker::add_notification(
            txn,
            Subject::SubscriptionRequest,
            PayloadRef::Account(sender.clone()),
            format!("{sender} denied the subscription"),
        );
        for h in held {
            txn.emit(AccountEvent::HeldReleased { card_id: h.card.id.clone() });
            drop_notice(txn, &h, "subscription denied");
        }
    }
    Ok(Vec::new())
}

fn drop_notice(txn: &mut Txn<'_>, held: &HeldPublication, reason: &str) {
    barker::add_notification(
        txn,
        Subject::GenericNotice,
        PayloadRef::Card(held.card.id.clone()),
        format!("dropped publication of card {} from {}: {reason}", held.card.id.discriminator, held.sender),
    );
}

/// Handles `PublishCard`: absorb into the foreign file of a confirmed
/// publisher, hold it while a request to that publisher is pending.
pub(crate) fn on_publish(
    node: &Node,
    txn: &mut Txn<'_>,
    sender: &AccountId,
    card: DigitalCard,
) -> Result<Vec<Outbound>, Error> {
    if &card.id.concerned != sender {
        return Err(verification_failed(format!(
            "card {} published by {sender}, not by its concerned person",
            card.id
        )));
    }
    card.validate(node.max_body())?;
    let registry = node.registry();
    let report = card::verify_card(&card, &registry).map_err(|e| verification_failed(e.to_string()))?;
    if report.overall != Overall::DoubleSigned {
        return Err(verification_failed(format!("card {} verifies as {:?}", card.id, report.overall)));
    }
    let state = txn.state();
    if state.confirmed_publishers.contains(sender) {
        txn.absorb_into_fif(&card, &registry)?;
        return Ok(Vec::new());
    }
    if state.pending_requests.contains(sender) {
        if !state.held.iter().any(|h| h.card.id == card.id) {
            let received_at = txn.now();
            txn.emit(AccountEvent::PublicationHeld(HeldPublication {
                sender: sender.clone(),
                card: Arc::new(card),
                received_at,
            }));
        }
        return Ok(Vec::new());
    }
    Err(Error::UnknownPublisher(sender.clone()))
}

/// Drops held publications whose hold window has passed.
pub(crate) fn expire_holds(node: &Node, txn: &mut Txn<'_>) {
    let now = txn.now();
    let expired: Vec<HeldPublication> = txn
        .state()
        .held
        .iter()
        .filter(|h| now - h.received_at > node.hold_window())
        .cloned()
        .collect();
    for h in expired {
        txn.emit(AccountEvent::HeldReleased { card_id: h.card.id.clone() });
        drop_notice(txn, &h, "no subscription decision within the hold window");
    }
}

/// Handles `CancelSubscription` from a publisher.
pub(crate) fn on_cancel(
    node: &Node,
    txn: &mut Txn<'_>,
    sender: &AccountId,
    demand_deletion: bool,
) -> Result<Vec<Outbound>, Error> {
    if !txn.state().confirmed_publishers.contains(sender) {
        return Err(Error::NotSubscribed(sender.clone()));
    }
    txn.mutate_relationships(RelationshipMutation::RemovePublisher(sender.clone()), &node.registry())?;
    if demand_deletion {
        deletion_plea(txn, sender, format!("{sender} cancelled the subscription and asks you to delete its foreign file"));
    } else {
        barker::add_notification(
            txn,
            Subject::GenericNotice,
            PayloadRef::Account(sender.clone()),
            format!("{sender} cancelled the subscription"),
        );
    }
    Ok(Vec::new())
}

fn deletion_plea(txn: &mut Txn<'_>, publisher: &AccountId, text: String) {
    let payload_ref = PayloadRef::Account(publisher.clone());
    if barker::pending_plea(txn.state(), Subject::DeletionDemand, &payload_ref).is_none() {
        barker::add_plea(txn, Subject::DeletionDemand, payload_ref, text);
    }
}

/// Handles `Notice`. A deletion demand becomes a plea; anything else a
/// notification.
pub(crate) fn on_notice(_node: &Node, txn: &mut Txn<'_>, sender: &AccountId, notice: NoticeBody) -> Result<Vec<Outbound>, Error> {
    if notice.demand_deletion {
        deletion_plea(txn, sender, format!("{sender}: {}", notice.text));
        return Ok(Vec::new());
    }
    let payload_ref = match notice.card_id {
        Some(id) => PayloadRef::Card(id),
        None => PayloadRef::Account(sender.clone()),
    };
    barker::add_notification(txn, notice.subject, payload_ref, notice.text);
    Ok(Vec::new())
}

/// Deletion is the consumer's call; granting drops the foreign file.
pub(crate) fn decide_deletion(txn: &mut Txn<'_>, publisher: &AccountId, verdict: Verdict) -> Vec<Outbound> {
    if verdict == Verdict::Grant && txn.state().fifs.contains_key(publisher) {
        txn.emit(AccountEvent::FifDeleted(publisher.clone()));
    }
    Vec::new()
}

impl Node {
    /// Sends a subscription request to `publisher`. The pending request is
    /// withdrawn again if delivery fails.
    pub fn subscribe(&self, account: &AccountId, publisher: &AccountId) -> Result<DeliveryReceipt, Error> {
        if account == publisher {
            return Err(Error::SelfSubscription);
        }
        if !self.registry().contains(publisher) {
            return Err(StoreError::UnknownAccountId(publisher.clone()).into());
        }
        self.store().write(account, |txn| {
            let state = txn.state();
            if state.confirmed_publishers.contains(publisher) {
                return Err(Error::AlreadySubscribed(publisher.clone()));
            }
            if state.pending_requests.contains(publisher) {
                return Err(Error::RequestPending(publisher.clone()));
            }
            txn.emit(AccountEvent::PendingRequestAdded(publisher.clone()));
            Ok(())
        })?;
        match self.transfer().send_command(account, publisher, &Command::RequestSubscription) {
            Ok(receipt) => Ok(receipt),
            Err(e) => {
                self.store().write(account, |txn| {
                    if txn.state().pending_requests.contains(publisher) {
                        txn.emit(AccountEvent::PendingRequestCleared(publisher.clone()));
                    }
                    Ok::<_, StoreError>(())
                })?;
                Err(e.into())
            }
        }
    }

    pub fn unsubscribe(&self, account: &AccountId, publisher: &AccountId) -> Result<DeliveryReceipt, Error> {
        self.store().write(account, |txn| {
            if !txn.state().confirmed_publishers.contains(publisher) {
                return Err(Error::NotSubscribed(publisher.clone()));
            }
            txn.mutate_relationships(RelationshipMutation::RemovePublisher(publisher.clone()), &self.registry())?;
            Ok(())
        })?;
        Ok(self.transfer().send_command(account, publisher, &Command::Unsubscribe)?)
    }

    /// Every card in every foreign file of `account`.
    pub fn read_dif(&self, account: &AccountId) -> Result<Vec<Arc<DigitalCard>>, Error> {
        Ok(self.state(account)?.dif())
    }

    /// Cards in the foreign file of `concerned`. A confirmed publisher that
    /// has sent nothing yet has an empty file.
    pub fn read_fif(&self, account: &AccountId, concerned: &AccountId) -> Result<Vec<Arc<DigitalCard>>, Error> {
        let state = self.state(account)?;
        match state.fifs.get(concerned) {
            Some(fif) => Ok(fif.values().cloned().collect()),
            None if state.confirmed_publishers.contains(concerned) => Ok(Vec::new()),
            None => Err(Error::UnknownForeignFile(concerned.clone())),
        }
    }
}
