//! Blocking client for the neighbour-systems and operator endpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use deus_core::barker::{AttentionElement, Verdict};
use deus_core::card::CardId;
use deus_core::identity::AccountId;
use deus_core::store::{AccountDump, StrategyKind};
use deus_core::transfer::{DeliveryReceipt, MulticastReport};
use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::*;
use crate::config::AccountConfig;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{status} {body}")]
    Api { status: u16, body: ErrorBody },
    #[error("transport: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    /// The structured error code, when the server sent one.
    pub fn code(&self) -> Option<&str> {
        match self {
            Self::Api { body, .. } => Some(&body.code),
            _ => None,
        }
    }

    pub fn to_body(&self) -> ErrorBody {
        match self {
            Self::Api { body, .. } => body.clone(),
            Self::Transport(r) => ErrorBody::new("Transport", r.clone()),
            Self::Decode(r) => ErrorBody::new("Decode", r.clone()),
        }
    }
}

fn enc(text: &str) -> String {
    utf8_percent_encode(text, NON_ALPHANUMERIC).to_string()
}

#[derive(Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base: impl Into<String>, token: Option<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_owned(),
            token,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
        }
    }

    pub fn with_token(&self, token: impl Into<String>) -> Self {
        Self {
            token: Some(token.into()),
            ..self.clone()
        }
    }

    fn request(&self, method: &str, path: &str) -> ureq::Request {
        let req = self.agent.request(method, &format!("{}{path}", self.base));
        match &self.token {
            Some(t) => req.set("authorization", &format!("Bearer {t}")),
            None => req,
        }
    }

    fn finish(result: Result<ureq::Response, ureq::Error>) -> Result<ureq::Response, ClientError> {
        match result {
            Ok(r) => Ok(r),
            Err(ureq::Error::Status(status, response)) => {
                let text = response.into_string().unwrap_or_default();
                let body = serde_json::from_str(&text).unwrap_or_else(|_| ErrorBody::new("Http", text));
                Err(ClientError::Api { status, body })
            }
            Err(e) => Err(ClientError::Transport(e.to_string())),
        }
    }

    fn decode<T: DeserializeOwned>(response: ureq::Response) -> Result<T, ClientError> {
        response.into_json().map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::decode(Self::finish(self.request("GET", path).call())?)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::decode(Self::finish(self.request("POST", path).send_json(body))?)
    }

    fn post_empty<B: Serialize>(&self, path: &str, body: &B) -> Result<(), ClientError> {
        Self::finish(self.request("POST", path).send_json(body)).map(drop)
    }

    pub fn health(&self) -> Result<String, ClientError> {
        Self::finish(self.request("GET", "/healthz").call())?
            .into_string()
            .map_err(|e| ClientError::Decode(e.to_string()))
    }

    /// Posts raw bytes to the transfer endpoint.
    pub fn deliver_raw(&self, body: &[u8]) -> Result<ReceiveResponse, ClientError> {
        let req = self
            .agent
            .post(&crate::binding::message_url(&self.base))
            .set("content-type", "application/json");
        Self::decode(Self::finish(req.send_bytes(body))?)
    }

    pub fn protocols(&self, account: &AccountId) -> Result<Vec<deus_core::transfer::ProtocolOffer>, ClientError> {
        self.get(&format!("/deus/tp/v1/protocols?account={}", enc(account.as_str())))
    }

    pub fn resolve(&self, account: &AccountId, protocol: &str) -> Result<String, ClientError> {
        let view: AddressView = self.get(&format!(
            "/deus/tp/v1/resolve?account={}&protocol={}",
            enc(account.as_str()),
            enc(protocol)
        ))?;
        Ok(view.address)
    }

    pub fn contribute(&self, card: &CardInput) -> Result<ContributeResponse, ClientError> {
        self.post("/nsi/v1/contribute", &ContributeRequest { card: card.clone() })
    }

    pub fn attention(&self, query: &AttentionQuery) -> Result<Vec<AttentionElement>, ClientError> {
        self.get(&format!(
            "/nsi/v1/attention?includeRead={}&includeDecided={}",
            query.include_read, query.include_decided
        ))
    }

    pub fn history(&self) -> Result<Vec<AttentionElement>, ClientError> {
        self.get("/nsi/v1/history")
    }

    pub fn decide(
        &self,
        element: u64,
        verdict: Verdict,
        group: Option<String>,
        card_picks: Vec<CardId>,
    ) -> Result<AttentionElement, ClientError> {
        self.post(
            &format!("/nsi/v1/attention/{element}/decision"),
            &DecisionRequest {
                verdict,
                group,
                card_picks,
            },
        )
    }

    pub fn mark_read(&self, element: u64) -> Result<(), ClientError> {
        self.post_empty(&format!("/nsi/v1/attention/{element}/read"), &serde_json::json!({}))
    }

    pub fn subscribe(&self, publisher: &AccountId) -> Result<DeliveryReceipt, ClientError> {
        self.post(
            "/nsi/v1/subscribe",
            &SubscribeRequest {
                publisher: publisher.to_string(),
            },
        )
    }

    pub fn unsubscribe(&self, publisher: &AccountId) -> Result<DeliveryReceipt, ClientError> {
        self.post(
            "/nsi/v1/unsubscribe",
            &SubscribeRequest {
                publisher: publisher.to_string(),
            },
        )
    }

    pub fn cancel(&self, consumer: &AccountId, demand_deletion: bool) -> Result<DeliveryReceipt, ClientError> {
        self.post(
            "/nsi/v1/cancel",
            &CancelRequest {
                consumer: consumer.to_string(),
                demand_deletion,
            },
        )
    }

    pub fn publish(&self, card_id: &CardId, groups: &[String]) -> Result<MulticastReport, ClientError> {
        self.post(
            "/nsi/v1/publish",
            &PublishRequest {
                card_id: card_id.clone(),
                groups: groups.to_vec(),
            },
        )
    }

    pub fn pif(&self) -> Result<Vec<CardView>, ClientError> {
        self.get("/nsi/v1/pif")
    }

    pub fn staging(&self) -> Result<Vec<CardView>, ClientError> {
        self.get("/nsi/v1/staging")
    }

    pub fn dif(&self) -> Result<Vec<CardView>, ClientError> {
        self.get("/nsi/v1/dif")
    }

    pub fn fif(&self, concerned: &AccountId) -> Result<Vec<CardView>, ClientError> {
        self.get(&format!("/nsi/v1/fif/{}", enc(concerned.as_str())))
    }

    pub fn relationships(&self) -> Result<RelationshipsView, ClientError> {
        self.get("/nsi/v1/relationships")
    }

    pub fn set_strategy(&self, kind: StrategyKind, global_set: Vec<CardId>) -> Result<(), ClientError> {
        self.post_empty("/nsi/v1/strategy", &StrategyRequest { kind, global_set })
    }

    pub fn groups(&self) -> Result<BTreeMap<String, BTreeSet<AccountId>>, ClientError> {
        self.get("/nsi/v1/groups")
    }

    pub fn define_group(&self, name: &str) -> Result<(), ClientError> {
        self.post_empty("/nsi/v1/groups", &GroupRequest { name: name.to_owned() })
    }

    pub fn assign_group(&self, name: &str, subscriber: &AccountId) -> Result<(), ClientError> {
        self.post_empty(
            &format!("/nsi/v1/groups/{}/members", enc(name)),
            &MemberRequest {
                subscriber: subscriber.to_string(),
            },
        )
    }

    pub fn accounts(&self) -> Result<Vec<AccountId>, ClientError> {
        self.get("/admin/v1/accounts")
    }

    pub fn provision(&self, account: &AccountConfig) -> Result<AccountId, ClientError> {
        self.post("/admin/v1/accounts", account)
    }

    pub fn export(&self, account: &AccountId) -> Result<AccountDump, ClientError> {
        self.get(&format!("/admin/v1/accounts/{}/export", enc(account.as_str())))
    }

    pub fn import(&self, dump: &AccountDump) -> Result<(), ClientError> {
        self.post_empty("/admin/v1/import", dump)
    }

    pub fn stats(&self) -> Result<StatsView, ClientError> {
        self.get("/admin/v1/stats")
    }
}
