//! Request and response bodies of the neighbour-systems interface, and the
//! preparation step that turns raw requests into typed Soul calls.

use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chrono::{DateTime, Utc};
use deus_core::barker::{DecisionArgs, Verdict};
use deus_core::card::{self, CardId, CardPayload, DigitalCard, Overall, MAX_DISCRIMINATOR_LEN};
use deus_core::identity::{AccountId, KeyRegistry};
use deus_core::store::{AccountState, StrategyConfig, StrategyKind};
use deus_core::Error;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// Structured error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {reason}")]
pub struct ErrorBody {
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub reason: String,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            field: None,
            reason: reason.into(),
        }
    }

    pub fn validation(field: Option<&str>, reason: impl Into<String>) -> Self {
        Self {
            code: "ValidationError".into(),
            field: field.map(str::to_owned),
            reason: reason.into(),
        }
    }
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        let field = match e {
            Error::Card(card::CardError::InvalidField { field, .. }) => Some((*field).to_owned()),
            _ => None,
        };
        Self {
            code: e.code().to_owned(),
            field,
            reason: e.to_string(),
        }
    }
}

/// Card fields a neighbour system supplies. The provider defaults to the
/// calling account and the discriminator to the account's next number.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CardInput {
    pub id: CardIdInput,
    pub payload: PayloadInput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CardIdInput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    pub concerned: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PayloadInput {
    pub media_type: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    pub body_base64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContributeRequest {
    pub card: CardInput,
}

/// A validated contribution: the discriminator is still open when the
/// caller left it to the node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contribution {
    pub discriminator: Option<String>,
    pub provider: AccountId,
    pub concerned: AccountId,
    pub payload: CardPayload,
}

fn account_field(field: &str, text: &str) -> Result<AccountId, ErrorBody> {
    AccountId::parse(text).map_err(|e| ErrorBody::validation(Some(field), e.to_string()))
}

impl CardInput {
    pub fn validate(&self, caller: &AccountId, max_body: usize, now: DateTime<Utc>) -> Result<Contribution, ErrorBody> {
        if let Some(d) = &self.id.discriminator {
            if d.is_empty() || d.len() > MAX_DISCRIMINATOR_LEN {
                return Err(ErrorBody::validation(
                    Some("discriminator"),
                    format!("length must be 1..={MAX_DISCRIMINATOR_LEN} bytes, got {}", d.len()),
                ));
            }
        }
        let provider = match &self.id.provider {
            Some(p) => account_field("provider", p)?,
            None => caller.clone(),
        };
        let concerned = account_field("concerned", &self.id.concerned)?;
        let p = &self.payload;
        if p.media_type.trim().is_empty() {
            return Err(ErrorBody::validation(Some("mediaType"), "must not be empty"));
        }
        // bound on the encoded length first
        if p.body_base64.len() / 4 * 3 > max_body + 3 {
            return Err(ErrorBody::validation(Some("body"), format!("exceeds limit of {max_body} bytes")));
        }
        let body = STANDARD
            .decode(p.body_base64.as_bytes())
            .map_err(|e| ErrorBody::validation(Some("body"), format!("not base64: {e}")))?;
        if body.len() > max_body {
            return Err(ErrorBody::validation(
                Some("body"),
                format!("{} bytes exceeds limit of {max_body}", body.len()),
            ));
        }
        let created_at = match &p.created_at {
            None => now,
            Some(text) => DateTime::parse_from_rfc3339(text)
                .map_err(|e| ErrorBody::validation(Some("createdAt"), e.to_string()))?
                .with_timezone(&Utc),
        };
        Ok(Contribution {
            discriminator: self.id.discriminator.clone(),
            provider,
            concerned,
            payload: CardPayload::new(p.media_type.clone(), p.title.clone(), body, created_at),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContributeResponse {
    pub card_id: CardId,
    pub envelope_id: Uuid,
    pub protocol: String,
}

/// A card together with how it verifies on this node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardView {
    #[serde(flatten)]
    pub card: DigitalCard,
    pub status: Overall,
    pub fingerprint: String,
}

impl CardView {
    pub fn new(card: &DigitalCard, registry: &KeyRegistry) -> Self {
        let status = card::verify_card(card, registry)
            .map(|r| r.overall)
            .unwrap_or(Overall::Tampered);
        Self {
            card: card.clone(),
            status,
            fingerprint: card.fingerprint(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecisionRequest {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub card_picks: Vec<CardId>,
}

impl DecisionRequest {
    pub fn args(&self) -> Result<DecisionArgs, ErrorBody> {
        if let Some(group) = &self.group {
            if group.trim().is_empty() {
                return Err(ErrorBody::validation(Some("group"), "must not be empty"));
            }
        }
        for pick in &self.card_picks {
            pick.validate()
                .map_err(|e| ErrorBody::validation(Some("cardPicks"), e.to_string()))?;
        }
        Ok(DecisionArgs {
            group: self.group.clone(),
            card_picks: self.card_picks.clone(),
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttentionQuery {
    #[serde(default)]
    pub include_read: bool,
    #[serde(default)]
    pub include_decided: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubscribeRequest {
    pub publisher: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CancelRequest {
    pub consumer: String,
    #[serde(default)]
    pub demand_deletion: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PublishRequest {
    pub card_id: CardId,
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StrategyRequest {
    pub kind: StrategyKind,
    #[serde(default)]
    pub global_set: Vec<CardId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRequest {
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberRequest {
    pub subscriber: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RelationshipsView {
    pub account: AccountId,
    pub confirmed_publishers: BTreeSet<AccountId>,
    pub accepted_subscribers: BTreeMap<AccountId, String>,
    pub pending_requests: BTreeSet<AccountId>,
    pub groups: BTreeMap<String, BTreeSet<AccountId>>,
    pub strategy: StrategyConfig,
}

impl From<&AccountState> for RelationshipsView {
    fn from(state: &AccountState) -> Self {
        Self {
            account: state.account.clone(),
            confirmed_publishers: state.confirmed_publishers.clone(),
            accepted_subscribers: state.accepted_subscribers.clone(),
            pending_requests: state.pending_requests.clone(),
            groups: state.groups.clone(),
            strategy: state.strategy.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StatsView {
    pub node: String,
    pub accounts: usize,
    pub http_sent: u64,
    pub http_attempts: u64,
    pub http_received: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReceiveResponse {
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<ErrorBody>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AddressView {
    pub address: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn caller() -> AccountId {
        AccountId::parse("https://ids.example/higgins").unwrap()
    }

    fn input() -> CardInput {
        CardInput {
            id: CardIdInput {
                discriminator: Some("7".into()),
                provider: None,
                concerned: "https://ids.example/alice".into(),
            },
            payload: PayloadInput {
                media_type: "text/plain".into(),
                title: "Letter".into(),
                created_at: Some("2010-03-14T09:30:00Z".into()),
                body_base64: STANDARD.encode(b"hello"),
            },
        }
    }

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2011, 1, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn well_formed_input_becomes_a_contribution() {
        let c = input().validate(&caller(), 1024, now()).unwrap();
        assert_eq!(c.provider, caller());
        assert_eq!(c.payload.body, b"hello");
        assert_eq!(c.discriminator.as_deref(), Some("7"));
    }

    #[test]
    fn field_errors_name_the_field() {
        let cases: Vec<(&str, Box<dyn Fn(&mut CardInput)>)> = vec![
            ("discriminator", Box::new(|c| c.id.discriminator = Some(String::new()))),
            ("discriminator", Box::new(|c| c.id.discriminator = Some("x".repeat(129)))),
            ("concerned", Box::new(|c| c.id.concerned = "not a uri".into())),
            ("provider", Box::new(|c| c.id.provider = Some(String::new()))),
            ("mediaType", Box::new(|c| c.payload.media_type = " ".into())),
            ("body", Box::new(|c| c.payload.body_base64 = "%%%".into())),
            ("body", Box::new(|c| c.payload.body_base64 = STANDARD.encode(vec![0u8; 2000]))),
            ("body", Box::new(|c| c.payload.body_base64 = STANDARD.encode(vec![0u8; 1025]))),
            ("createdAt", Box::new(|c| c.payload.created_at = Some("yesterday".into()))),
        ];
        for (field, mutate) in cases {
            let mut c = input();
            mutate(&mut c);
            let err = c.validate(&caller(), 1024, now()).unwrap_err();
            assert_eq!(err.code, "ValidationError");
            assert_eq!(err.field.as_deref(), Some(field));
        }
    }

    #[test]
    fn missing_timestamp_defaults_to_now() {
        let mut c = input();
        c.payload.created_at = None;
        assert_eq!(c.validate(&caller(), 1024, now()).unwrap().payload.created_at, now());
    }

    #[test]
    fn empty_group_is_rejected() {
        let req = DecisionRequest {
            verdict: Verdict::Grant,
            group: Some(String::new()),
            card_picks: vec![],
        };
        assert_eq!(req.args().unwrap_err().field.as_deref(), Some("group"));
    }
}
