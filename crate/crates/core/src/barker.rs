//! The Barker: per-account attention list of pleas and notifications.
//!
//! History is append-only. Every state change of an element is a new record
//! carrying the same element id; the current view of an element is its most
//! recent record. Decisions are routed declaratively by `(subject,
//! payload_ref)` so a plea decided after a restart still reaches the right
//! Soul handler (see `Node::decide`).

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::card::CardId;
use crate::identity::AccountId;
use crate::store::{AccountEvent, AccountState, Txn};

pub type ElementId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElementKind {
    Plea,
    Notification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subject {
    Repatriation,
    SubscriptionRequest,
    ManualSelection,
    DeletionDemand,
    GenericNotice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "type", content = "value")]
pub enum PayloadRef {
    Card(CardId),
    Account(AccountId),
    Text(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElementState {
    Pending,
    Granted,
    Denied,
    Read,
    Unread,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Grant,
    Deny,
}

/// Extra arguments a user supplies with a verdict.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecisionArgs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub card_picks: Vec<CardId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttentionElement {
    pub element_id: ElementId,
    pub account: AccountId,
    pub kind: ElementKind,
    pub subject: Subject,
    pub payload_ref: PayloadRef,
    pub text: String,
    pub created_at: DateTime<Utc>,
    pub state: ElementState,
    pub recorded_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionArgs>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BarkerError {
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
    #[error("element {0} is not pending")]
    NotPending(ElementId),
    #[error("element {0} is not a plea")]
    NotAPlea(ElementId),
    #[error("unknown attention element {0}")]
    UnknownElement(ElementId),
    #[error("element {0} is not an unread notification")]
    NotUnread(ElementId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttentionFilter {
    /// Also list notifications already marked read.
    #[serde(default)]
    pub include_read: bool,
    /// Also list pleas that have been decided.
    #[serde(default)]
    pub include_decided: bool,
}

fn append(txn: &mut Txn<'_>, kind: ElementKind, subject: Subject, payload_ref: PayloadRef, text: String) -> ElementId {
    let now = txn.now();
    let element_id = txn.state().next_element_id;
    let state = match kind {
        ElementKind::Plea => ElementState::Pending,
        ElementKind::Notification => ElementState::Unread,
    };
    txn.emit(AccountEvent::Attention(AttentionElement {
        element_id,
        account: txn.state().account.clone(),
        kind,
        subject,
        payload_ref,
        text,
        created_at: now,
        state,
        recorded_at: now,
        decision: None,
    }));
    element_id
}

pub fn add_plea(txn: &mut Txn<'_>, subject: Subject, payload_ref: PayloadRef, text: impl Into<String>) -> ElementId {
    append(txn, ElementKind::Plea, subject, payload_ref, text.into())
}

pub fn add_notification(
    txn: &mut Txn<'_>,
    subject: Subject,
    payload_ref: PayloadRef,
    text: impl Into<String>,
) -> ElementId {
    append(txn, ElementKind::Notification, subject, payload_ref, text.into())
}

/// Records a verdict on a pending plea and returns the new record.
pub fn decide(
    txn: &mut Txn<'_>,
    element_id: ElementId,
    verdict: Verdict,
    args: DecisionArgs,
) -> Result<AttentionElement, BarkerError> {
    let current = current(txn.state(), element_id)
        .ok_or(BarkerError::UnknownElement(element_id))?
        .clone();
    if current.kind != ElementKind::Plea {
        return Err(BarkerError::NotAPlea(element_id));
    }
    if current.state != ElementState::Pending {
        return Err(BarkerError::NotPending(element_id));
    }
    let record = AttentionElement {
        state: match verdict {
            Verdict::Grant => ElementState::Granted,
            Verdict::Deny => ElementState::Denied,
        },
        recorded_at: txn.now(),
        decision: Some(args),
        ..current
    };
    txn.emit(AccountEvent::Attention(record.clone()));
    Ok(record)
}

pub fn mark_read(txn: &mut Txn<'_>, element_id: ElementId) -> Result<(), BarkerError> {
    let current = current(txn.state(), element_id)
        .ok_or(BarkerError::UnknownElement(element_id))?
        .clone();
    if current.kind != ElementKind::Notification || current.state != ElementState::Unread {
        return Err(BarkerError::NotUnread(element_id));
    }
    let record = AttentionElement {
        state: ElementState::Read,
        recorded_at: txn.now(),
        ..current
    };
    txn.emit(AccountEvent::Attention(record));
    Ok(())
}

/// Latest record for an element.
pub fn current(state: &AccountState, element_id: ElementId) -> Option<&AttentionElement> {
    state
        .attention
        .iter()
        .rev()
        .find(|e| e.element_id == element_id)
}

/// Current view of every element, in creation order.
pub fn elements(state: &AccountState) -> Vec<AttentionElement> {
    let mut latest: BTreeMap<ElementId, &AttentionElement> = BTreeMap::new();
    for record in &state.attention {
        latest.insert(record.element_id, record);
    }
    // element ids are allocated in creation order
    latest.into_values().cloned().collect()
}

pub fn list_attention(state: &AccountState, filter: AttentionFilter) -> Vec<AttentionElement> {
    elements(state)
        .into_iter()
        .filter(|e| match e.state {
            ElementState::Pending | ElementState::Unread => true,
            ElementState::Read => filter.include_read,
            ElementState::Granted | ElementState::Denied => filter.include_decided,
        })
        .collect()
}

pub fn history(state: &AccountState) -> &[AttentionElement] {
    &state.attention
}

pub fn pending_plea(state: &AccountState, subject: Subject, payload_ref: &PayloadRef) -> Option<ElementId> {
    elements(state)
        .into_iter()
        .find(|e| {
            e.kind == ElementKind::Plea
                && e.state == ElementState::Pending
                && e.subject == subject
                && &e.payload_ref == payload_ref
        })
        .map(|e| e.element_id)
}
