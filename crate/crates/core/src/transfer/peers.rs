//! Static peer table used to bootstrap negotiation and address resolution
//! for accounts hosted on other nodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ProtocolOffer, TransferError};
use crate::identity::AccountId;

/// Base URL marker for accounts hosted on the local node.
pub const LOCAL_MARKER: &str = "local";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PeerEntry {
    pub account: AccountId,
    pub base_url: String,
    pub protocols: Vec<ProtocolOffer>,
}

impl PeerEntry {
    pub fn is_local(&self) -> bool {
        self.base_url == LOCAL_MARKER
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PeerTable {
    entries: BTreeMap<AccountId, PeerEntry>,
}

impl PeerTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: PeerEntry) -> Result<(), TransferError> {
        validate_base_url(&entry.base_url)?;
        self.entries.insert(entry.account.clone(), entry);
        Ok(())
    }

    pub fn get(&self, account: &AccountId) -> Option<&PeerEntry> {
        self.entries.get(account)
    }

    pub fn entries(&self) -> impl Iterator<Item = &PeerEntry> {
        self.entries.values()
    }

    /// Parses the peer table file: a JSON array of
    /// `{account, baseUrl, protocols: [{protocol, priority}]}`.
    pub fn from_json(text: &str) -> Result<Self, TransferError> {
        let entries: Vec<PeerEntry> =
            serde_json::from_str(text).map_err(|e| TransferError::PeerTable(e.to_string()))?;
        let mut table = Self::new();
        for entry in entries {
            table.insert(entry)?;
        }
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries.values().collect::<Vec<_>>())
            .expect("peer table serialization is infallible")
    }
}

fn validate_base_url(url: &str) -> Result<(), TransferError> {
    if url == LOCAL_MARKER {
        return Ok(());
    }
    let rest = url
        .strip_prefix("http://")
        .or_else(|| url.strip_prefix("https://"))
        .ok_or_else(|| TransferError::PeerTable(format!("base url {url:?} is not an absolute http(s) url")))?;
    if rest.is_empty() || rest.starts_with('/') || url.chars().any(char::is_whitespace) {
        return Err(TransferError::PeerTable(format!("base url {url:?} has no host")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_validates() {
        let text = r#"[
            {"account": "https://ids.example/bob", "baseUrl": "http://127.0.0.1:8081",
             "protocols": [{"protocol": "http", "priority": 50}]},
            {"account": "https://ids.example/alice", "baseUrl": "local", "protocols": []}
        ]"#;
        let table = PeerTable::from_json(text).unwrap();
        let bob = AccountId::parse("https://ids.example/bob").unwrap();
        assert_eq!(table.get(&bob).unwrap().base_url, "http://127.0.0.1:8081");
        assert!(table.entries().any(PeerEntry::is_local));
        let back = PeerTable::from_json(&table.to_json()).unwrap();
        assert_eq!(back, table);

        for bad in ["ftp://x", "http://", "127.0.0.1:80", "http:///path"] {
            let text = format!(r#"[{{"account": "https://ids.example/b", "baseUrl": "{bad}", "protocols": []}}]"#);
            assert!(PeerTable::from_json(&text).is_err(), "{bad}");
        }
    }
}
