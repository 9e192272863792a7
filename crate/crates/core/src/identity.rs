//! Account identities, the signature primitive and the key registry.
//!
//! Account identifiers are opaque absolute URIs. Signing uses Ed25519; every
//! [`Signature`] carries its scheme tag so verification is self-describing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use ed25519_dalek::{Signer as _, Verifier as _};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// Scheme tag carried by every signature produced by this crate.
pub const SCHEME_ED25519: &str = "ed25519";

/// Upper bound on the byte length of an account URI.
pub const MAX_ACCOUNT_ID_LEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdentityError {
    #[error("malformed account uri {input:?}: {reason}")]
    MalformedUri { input: String, reason: &'static str },
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("account {0} already has a verify key")]
    DuplicateKey(AccountId),
    #[error("white-list entry {contributor} for {owner} has no registered key")]
    UnregisteredContributor {
        owner: AccountId,
        contributor: AccountId,
    },
    #[error("registry line {line}: {reason}")]
    RegistryFormat { line: usize, reason: String },
}

/// An account identity: an absolute URI with lowercased scheme and authority.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AccountId(String);

impl AccountId {
    /// Parses and normalizes an account URI.
    ///
    /// The accepted shape is `scheme://authority[path][?query][#fragment]`.
    /// Scheme and authority are lowercased, everything after the authority is
    /// kept byte-for-byte.
    pub fn parse(text: &str) -> Result<Self, IdentityError> {
        let malformed = |reason| IdentityError::MalformedUri {
            input: text.to_owned(),
            reason,
        };
        if text.is_empty() {
            return Err(malformed("empty"));
        }
        if text.len() > MAX_ACCOUNT_ID_LEN {
            return Err(malformed("longer than 512 bytes"));
        }
        if text.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(malformed("contains whitespace or control characters"));
        }
        let (scheme, rest) = text.split_once("://").ok_or(malformed("not absolute"))?;
        let mut chars = scheme.chars();
        let valid_scheme = chars.next().is_some_and(|c| c.is_ascii_alphabetic())
            && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'));
        if !valid_scheme {
            return Err(malformed("invalid scheme"));
        }
        let authority_end = rest.find(['/', '?', '#']).unwrap_or(rest.len());
        let (authority, tail) = rest.split_at(authority_end);
        if authority.is_empty() {
            return Err(malformed("missing authority"));
        }
        Ok(Self(format!(
            "{}://{}{}",
            scheme.to_ascii_lowercase(),
            authority.to_ascii_lowercase(),
            tail
        )))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for AccountId {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for AccountId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for AccountId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Self::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Private signing key.
#[derive(Clone)]
pub struct SignKey(ed25519_dalek::SigningKey);

impl SignKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IdentityError> {
        let seed: [u8; 32] = bytes.try_into().map_err(|_| {
            IdentityError::InvalidKey(format!("sign key must be 32 bytes, got {}", bytes.len()))
        })?;
        Ok(Self(ed25519_dalek::SigningKey::from_bytes(&seed)))
    }

    pub fn from_base64(text: &str) -> Result<Self, IdentityError> {
        let bytes = BASE64
            .decode(text.trim())
            .map_err(|e| IdentityError::InvalidKey(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    /// Derives a key from an arbitrary passphrase-like seed (SHA-256 of the text).
    /// Used for fixtures and templated test deployments.
    pub fn from_seed_text(seed: &str) -> Self {
        let digest: [u8; 32] = Sha256::digest(seed.as_bytes()).into();
        Self(ed25519_dalek::SigningKey::from_bytes(&digest))
    }

    pub fn generate<R: rand::CryptoRng + rand::RngCore>(rng: &mut R) -> Self {
        Self(ed25519_dalek::SigningKey::generate(rng))
    }

    pub fn verify_key(&self) -> VerifyKey {
        VerifyKey(self.0.verifying_key().to_bytes().to_vec())
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(self.0.to_bytes())
    }
}

impl fmt::Debug for SignKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("SignKey").field(&"<redacted>").finish()
    }
}

/// Public verification key. Raw bytes; length is checked at verification time.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct VerifyKey(Vec<u8>);

impl VerifyKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IdentityError> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| {
            IdentityError::InvalidKey(format!("verify key must be 32 bytes, got {}", bytes.len()))
        })?;
        ed25519_dalek::VerifyingKey::from_bytes(&arr)
            .map_err(|e| IdentityError::InvalidKey(e.to_string()))?;
        Ok(Self(bytes.to_vec()))
    }

    pub fn from_base64(text: &str) -> Result<Self, IdentityError> {
        let bytes = BASE64
            .decode(text.trim())
            .map_err(|e| IdentityError::InvalidKey(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(&self.0)
    }
}

impl fmt::Debug for VerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyKey({})", self.to_base64())
    }
}

/// A signature together with the tag of the scheme that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    #[serde(rename = "schemeTag")]
    pub scheme: String,
    #[serde(rename = "base64", with = "crate::b64")]
    pub bytes: Vec<u8>,
}

pub fn sign(key: &SignKey, message: &[u8]) -> Signature {
    Signature {
        scheme: SCHEME_ED25519.to_owned(),
        bytes: key.0.sign(message).to_bytes().to_vec(),
    }
}

/// Checks `sig` over `message`. Never errors: unknown schemes and wrong
/// lengths simply fail verification.
pub fn verify(key: &VerifyKey, message: &[u8], sig: &Signature) -> bool {
    if sig.scheme != SCHEME_ED25519 {
        return false;
    }
    let Ok(key_bytes) = <[u8; 32]>::try_from(key.0.as_slice()) else {
        return false;
    };
    let Ok(sig_bytes) = <[u8; 64]>::try_from(sig.bytes.as_slice()) else {
        return false;
    };
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key_bytes) else {
        return false;
    };
    vk.verify(message, &ed25519_dalek::Signature::from_bytes(&sig_bytes))
        .is_ok()
}

/// Verify keys per account plus per-account contributor white-lists.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    keys: BTreeMap<AccountId, VerifyKey>,
    whitelists: BTreeMap<AccountId, BTreeSet<AccountId>>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, account: AccountId, key: VerifyKey) -> Result<(), IdentityError> {
        if self.keys.contains_key(&account) {
            return Err(IdentityError::DuplicateKey(account));
        }
        self.keys.insert(account, key);
        Ok(())
    }

    /// Adds `contributor` to `owner`'s white-list. The contributor must
    /// already have a registered key.
    pub fn whitelist(
        &mut self,
        owner: &AccountId,
        contributor: AccountId,
    ) -> Result<(), IdentityError> {
        if !self.keys.contains_key(&contributor) {
            return Err(IdentityError::UnregisteredContributor {
                owner: owner.clone(),
                contributor,
            });
        }
        self.whitelists
            .entry(owner.clone())
            .or_default()
            .insert(contributor);
        Ok(())
    }

    pub fn verify_key(&self, account: &AccountId) -> Option<&VerifyKey> {
        self.keys.get(account)
    }

    pub fn contains(&self, account: &AccountId) -> bool {
        self.keys.contains_key(account)
    }

    pub fn is_whitelisted(&self, owner: &AccountId, contributor: &AccountId) -> bool {
        self.whitelists
            .get(owner)
            .is_some_and(|set| set.contains(contributor))
    }

    pub fn accounts(&self) -> impl Iterator<Item = &AccountId> {
        self.keys.keys()
    }

    /// Parses the registry file format: one `uri scheme-tag base64-key`
    /// record per line. Blank lines and `#` comments are skipped.
    pub fn parse_registry(text: &str) -> Result<Self, IdentityError> {
        let mut registry = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let format_err = |reason: String| IdentityError::RegistryFormat {
                line: idx + 1,
                reason,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [uri, scheme, key] = fields[..] else {
                return Err(format_err(format!("expected 3 fields, got {}", fields.len())));
            };
            if scheme != SCHEME_ED25519 {
                return Err(format_err(format!("unsupported scheme {scheme:?}")));
            }
            let account = AccountId::parse(uri).map_err(|e| format_err(e.to_string()))?;
            let key = VerifyKey::from_base64(key).map_err(|e| format_err(e.to_string()))?;
            registry
                .register(account, key)
                .map_err(|e| format_err(e.to_string()))?;
        }
        Ok(registry)
    }

    /// Renders the registry in the same line format `parse_registry` reads.
    pub fn render_registry(&self) -> String {
        self.keys
            .iter()
            .map(|(account, key)| format!("{account} {SCHEME_ED25519} {}\n", key.to_base64()))
            .collect()
    }

    /// Loads one owner's white-list file: one contributor URI per line.
    pub fn load_whitelist(&mut self, owner: &AccountId, text: &str) -> Result<(), IdentityError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let contributor = AccountId::parse(line).map_err(|e| IdentityError::RegistryFormat {
                line: idx + 1,
                reason: e.to_string(),
            })?;
            self.whitelist(owner, contributor)?;
        }
        Ok(())
    }
}
