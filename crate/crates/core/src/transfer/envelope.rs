//! Envelope wire format and command marshalling.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::TransferError;
use crate::barker::Subject;
use crate::card::{CardId, DigitalCard};
use crate::identity::{AccountId, Signature};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommandKind {
    RequestSubscription,
    DecisionSubscription,
    CancelSubscription,
    Unsubscribe,
    RepatriateCard,
    PublishCard,
    Notice,
}

/// Envelope as it travels between nodes. Field names are fixed by the wire
/// format: `envelopeId, protocolVersion, sender, receiver, command,
/// payloadBase64, sentAt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Envelope {
    pub envelope_id: Uuid,
    pub protocol_version: u32,
    pub sender: AccountId,
    pub receiver: AccountId,
    pub command: CommandKind,
    #[serde(rename = "payloadBase64", with = "crate::b64")]
    pub payload: Vec<u8>,
    pub sent_at: DateTime<Utc>,
}

/// Alias kept for readability at HTTP boundaries.
pub type WireEnvelope = Envelope;

impl Envelope {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serialization is infallible")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, TransferError> {
        let envelope: Self =
            serde_json::from_slice(bytes).map_err(|e| TransferError::MalformedEnvelope(e.to_string()))?;
        if envelope.protocol_version != PROTOCOL_VERSION {
            return Err(TransferError::MalformedEnvelope(format!(
                "unsupported protocol version {}",
                envelope.protocol_version
            )));
        }
        Ok(envelope)
    }

    pub fn command(&self) -> Result<Command, TransferError> {
        Command::decode(self.command, &self.payload)
    }
}

/// Signed answer to a subscription request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecisionMessage {
    pub publisher: AccountId,
    pub subscriber: AccountId,
    pub granted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub signature: Signature,
}

impl DecisionMessage {
    /// Bytes covered by the publisher's signature: length-prefixed fields
    /// in the same style as card canonicalization.
    pub fn signed_bytes(publisher: &AccountId, subscriber: &AccountId, granted: bool, group: Option<&str>) -> Vec<u8> {
        let verdict = if granted { "grant" } else { "deny" };
        let mut out = Vec::new();
        for field in [
            "deus-subscription-decision",
            publisher.as_str(),
            subscriber.as_str(),
            verdict,
            group.unwrap_or(""),
        ] {
            out.extend_from_slice(&(field.len() as u64).to_be_bytes());
            out.extend_from_slice(field.as_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NoticeBody {
    pub subject: Subject,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub card_id: Option<CardId>,
    #[serde(default)]
    pub demand_deletion: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct CancelBody {
    demand_deletion: bool,
}

/// A command with its typed body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    RequestSubscription,
    DecisionSubscription(DecisionMessage),
    CancelSubscription { demand_deletion: bool },
    Unsubscribe,
    RepatriateCard(DigitalCard),
    PublishCard(DigitalCard),
    Notice(NoticeBody),
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Self::RequestSubscription => CommandKind::RequestSubscription,
            Self::DecisionSubscription(_) => CommandKind::DecisionSubscription,
            Self::CancelSubscription { .. } => CommandKind::CancelSubscription,
            Self::Unsubscribe => CommandKind::Unsubscribe,
            Self::RepatriateCard(_) => CommandKind::RepatriateCard,
            Self::PublishCard(_) => CommandKind::PublishCard,
            Self::Notice(_) => CommandKind::Notice,
        }
    }

    /// JSON encoding of the command body. Document commands carry the card
    /// interchange document.
    pub fn encode(&self) -> Vec<u8> {
        let result = match self {
            Self::RequestSubscription | Self::Unsubscribe => serde_json::to_vec(&Empty {}),
            Self::DecisionSubscription(d) => serde_json::to_vec(d),
            Self::CancelSubscription { demand_deletion } => serde_json::to_vec(&CancelBody {
                demand_deletion: *demand_deletion,
            }),
            Self::RepatriateCard(card) | Self::PublishCard(card) => serde_json::to_vec(card),
            Self::Notice(n) => serde_json::to_vec(n),
        };
        result.expect("command serialization is infallible")
    }

    pub fn decode(kind: CommandKind, payload: &[u8]) -> Result<Self, TransferError> {
        fn parse<T: serde::de::DeserializeOwned>(payload: &[u8]) -> Result<T, TransferError> {
            serde_json::from_slice(payload).map_err(|e| TransferError::MalformedEnvelope(e.to_string()))
        }
        Ok(match kind {
            CommandKind::RequestSubscription => {
                parse::<Empty>(payload)?;
                Self::RequestSubscription
            }
            CommandKind::Unsubscribe => {
                parse::<Empty>(payload)?;
                Self::Unsubscribe
            }
            CommandKind::DecisionSubscription => Self::DecisionSubscription(parse(payload)?),
            CommandKind::CancelSubscription => Self::CancelSubscription {
                demand_deletion: parse::<CancelBody>(payload)?.demand_deletion,
            },
            CommandKind::RepatriateCard => Self::RepatriateCard(parse(payload)?),
            CommandKind::PublishCard => Self::PublishCard(parse(payload)?),
            CommandKind::Notice => Self::Notice(parse(payload)?),
        })
    }
}
