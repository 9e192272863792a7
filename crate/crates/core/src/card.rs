//! Digital cards: the self-contained, signed unit of exchange.
//!
//! A card is signed first by its contributor (the provider) over its
//! canonical byte image, then counter-signed by the concerned person over the
//! canonical bytes followed by the contributor signature bytes.
//!
//! The canonical image is the concatenation of these UTF-8 fields, each
//! prefixed by its length as an 8-byte big-endian integer:
//! discriminator, provider, concerned, media type, title, creation time
//! (RFC 3339, whole seconds, `Z` suffix), body.

use std::fmt;

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::identity::{self, AccountId, KeyRegistry, SignKey, Signature};

/// Default upper bound on a card body.
pub const DEFAULT_MAX_BODY: usize = 16 * 1024 * 1024;
pub const MAX_DISCRIMINATOR_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CardError {
    #[error("card already carries a contributor signature")]
    AlreadySigned,
    #[error("card has no contributor signature")]
    MissingContributorSig,
    #[error("card already carries a counter signature")]
    AlreadyCounterSigned,
    #[error("account {0} is not in the key registry")]
    UnknownAccount(AccountId),
    #[error("invalid card field {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> CardError {
    CardError::InvalidField {
        field,
        reason: reason.into(),
    }
}

/// The (discriminator, provider, concerned person) triple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CardId {
    pub discriminator: String,
    pub provider: AccountId,
    pub concerned: AccountId,
}

impl CardId {
    pub fn new(
        discriminator: impl Into<String>,
        provider: AccountId,
        concerned: AccountId,
    ) -> Result<Self, CardError> {
        let id = Self {
            discriminator: discriminator.into(),
            provider,
            concerned,
        };
        id.validate()?;
        Ok(id)
    }

    pub fn validate(&self) -> Result<(), CardError> {
        let len = self.discriminator.len();
        if len == 0 || len > MAX_DISCRIMINATOR_LEN {
            return Err(invalid(
                "discriminator",
                format!("length must be 1..={MAX_DISCRIMINATOR_LEN} bytes, got {len}"),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for CardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.discriminator, self.provider, self.concerned)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardPayload {
    #[serde(rename = "mediaType")]
    pub media_type: String,
    pub title: String,
    #[serde(rename = "createdAt", with = "crate::timefmt")]
    pub created_at: DateTime<Utc>,
    #[serde(rename = "bodyBase64", with = "crate::b64")]
    pub body: Vec<u8>,
}

impl CardPayload {
    /// Builds a payload; the timestamp is truncated to whole seconds.
    pub fn new(
        media_type: impl Into<String>,
        title: impl Into<String>,
        body: Vec<u8>,
        created_at: DateTime<Utc>,
    ) -> Self {
        Self {
            media_type: media_type.into(),
            title: title.into(),
            created_at: created_at.with_nanosecond(0).unwrap_or(created_at),
            body,
        }
    }

    pub fn validate(&self, max_body: usize) -> Result<(), CardError> {
        if self.media_type.is_empty() {
            return Err(invalid("mediaType", "must not be empty"));
        }
        if self.body.len() > max_body {
            return Err(invalid(
                "body",
                format!("{} bytes exceeds limit of {max_body}", self.body.len()),
            ));
        }
        if self.created_at.nanosecond() != 0 {
            return Err(invalid("createdAt", "must have seconds precision"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardSignatures {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contributor: Option<Signature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counter: Option<Signature>,
}

/// A digital card in its interchange shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigitalCard {
    pub id: CardId,
    pub payload: CardPayload,
    #[serde(default)]
    pub sigs: CardSignatures,
}

fn push_field(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u64).to_be_bytes());
    out.extend_from_slice(field);
}

pub fn render_timestamp(at: &DateTime<Utc>) -> String {
    at.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// The signed byte image of a card's identity and payload.
pub fn canonical_bytes(id: &CardId, payload: &CardPayload) -> Vec<u8> {
    let created = render_timestamp(&payload.created_at);
    let mut out = Vec::with_capacity(
        7 * 8
            + id.discriminator.len()
            + id.provider.as_str().len()
            + id.concerned.as_str().len()
            + payload.media_type.len()
            + payload.title.len()
            + created.len()
            + payload.body.len(),
    );
    push_field(&mut out, id.discriminator.as_bytes());
    push_field(&mut out, id.provider.as_str().as_bytes());
    push_field(&mut out, id.concerned.as_str().as_bytes());
    push_field(&mut out, payload.media_type.as_bytes());
    push_field(&mut out, payload.title.as_bytes());
    push_field(&mut out, created.as_bytes());
    push_field(&mut out, &payload.body);
    out
}

fn counter_message(card: &DigitalCard, contributor: &Signature) -> Vec<u8> {
    let mut message = canonical_bytes(&card.id, &card.payload);
    message.extend_from_slice(&contributor.bytes);
    message
}

impl DigitalCard {
    pub fn new(id: CardId, payload: CardPayload) -> Self {
        Self {
            id,
            payload,
            sigs: CardSignatures::default(),
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_bytes(&self.id, &self.payload)
    }

    pub fn validate(&self, max_body: usize) -> Result<(), CardError> {
        self.id.validate()?;
        self.payload.validate(max_body)?;
        if self.sigs.counter.is_some() && self.sigs.contributor.is_none() {
            return Err(invalid("sigs", "counter signature without contributor signature"));
        }
        Ok(())
    }

    /// The card without its counter signature, as it was staged.
    pub fn without_counter_sig(&self) -> DigitalCard {
        let mut card = self.clone();
        card.sigs.counter = None;
        card
    }

    /// SHA-256 over the canonical bytes followed by both signature byte
    /// strings (length prefixed, empty when absent). Identifies the exact
    /// signed state of a card.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_bytes());
        for sig in [&self.sigs.contributor, &self.sigs.counter] {
            let bytes = sig.as_ref().map(|s| s.bytes.as_slice()).unwrap_or(&[]);
            hasher.update((bytes.len() as u64).to_be_bytes());
            hasher.update(bytes);
        }
        hex_lower(&hasher.finalize())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("card serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn hex_lower(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn contributor_sign(card: &DigitalCard, key: &SignKey) -> Result<DigitalCard, CardError> {
    if card.sigs.contributor.is_some() {
        return Err(CardError::AlreadySigned);
    }
    let mut signed = card.clone();
    signed.sigs.contributor = Some(identity::sign(key, &card.canonical_bytes()));
    Ok(signed)
}

pub fn counter_sign(card: &DigitalCard, key: &SignKey) -> Result<DigitalCard, CardError> {
    let contributor = card
        .sigs
        .contributor
        .as_ref()
        .ok_or(CardError::MissingContributorSig)?;
    if card.sigs.counter.is_some() {
        return Err(CardError::AlreadyCounterSigned);
    }
    let mut signed = card.clone();
    signed.sigs.counter = Some(identity::sign(key, &counter_message(card, contributor)));
    Ok(signed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigStatus {
    Valid,
    Invalid,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Overall {
    Unsigned,
    SingleSigned,
    DoubleSigned,
    Tampered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub contributor: SigStatus,
    pub counter: SigStatus,
    pub overall: Overall,
}

/// Checks both signatures against the registry keys of the card's provider
/// and concerned person.
pub fn verify_card(
    card: &DigitalCard,
    registry: &KeyRegistry,
) -> Result<VerificationReport, CardError> {
    let provider_key = registry
        .verify_key(&card.id.provider)
        .ok_or_else(|| CardError::UnknownAccount(card.id.provider.clone()))?;
    let concerned_key = registry
        .verify_key(&card.id.concerned)
        .ok_or_else(|| CardError::UnknownAccount(card.id.concerned.clone()))?;

    let canonical = card.canonical_bytes();
    let contributor = match &card.sigs.contributor {
        None => SigStatus::Absent,
        Some(sig) if identity::verify(provider_key, &canonical, sig) => SigStatus::Valid,
        Some(_) => SigStatus::Invalid,
    };
    let counter = match (&card.sigs.counter, &card.sigs.contributor) {
        (None, _) => SigStatus::Absent,
        (Some(_), None) => SigStatus::Invalid,
        (Some(sig), Some(first)) => {
            let mut message = canonical;
            message.extend_from_slice(&first.bytes);
            if identity::verify(concerned_key, &message, sig) {
                SigStatus::Valid
            } else {
                SigStatus::Invalid
            }
        }
    };
    let overall = match (contributor, counter) {
        (SigStatus::Absent, SigStatus::Absent) => Overall::Unsigned,
        (SigStatus::Valid, SigStatus::Absent) => Overall::SingleSigned,
        (SigStatus::Valid, SigStatus::Valid) => Overall::DoubleSigned,
        _ => Overall::Tampered,
    };
    Ok(VerificationReport {
        contributor,
        counter,
        overall,
    })
}
