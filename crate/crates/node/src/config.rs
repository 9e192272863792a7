//! Node configuration file (TOML).

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use deus_core::identity::{AccountId, KeyRegistry, SignKey};
use deus_core::store::{AccountMode, AccountProfile, StrategyKind};
use deus_core::transfer::{PeerTable, RetryPolicy};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error("{0}")]
    Semantic(String),
}

fn unreadable(path: &Path, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Unreadable {
        path: path.to_owned(),
        reason: e.to_string(),
    }
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_owned(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_attempts() -> u32 {
    5
}

fn default_backoff_ms() -> u64 {
    200
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

impl RetryConfig {
    pub fn policy(&self) -> RetryPolicy {
        RetryPolicy::new(self.attempts, Duration::from_millis(self.backoff_ms))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountConfig {
    pub id: String,
    #[serde(default)]
    pub mode: AccountMode,
    #[serde(default)]
    pub strategy: StrategyKind,
    /// Bearer token the neighbour systems of this account present.
    pub token: String,
    /// Sign key as base64 of its 32 secret bytes.
    #[serde(default)]
    pub sign_key: Option<String>,
    /// Alternative to `sign_key`: derive the key from a passphrase.
    #[serde(default)]
    pub sign_key_seed: Option<String>,
    /// File listing trusted contributors, one account URI per line.
    #[serde(default)]
    pub whitelist: Option<PathBuf>,
    #[serde(default)]
    pub publish_to_all: Option<bool>,
    #[serde(default)]
    pub demand_deletion_on_unsubscribe: bool,
    #[serde(default)]
    pub subscriber_template: BTreeMap<String, String>,
}

impl AccountConfig {
    pub fn account_id(&self) -> Result<AccountId, ConfigError> {
        AccountId::parse(&self.id).map_err(|e| ConfigError::Semantic(e.to_string()))
    }

    pub fn profile(&self) -> Result<AccountProfile, ConfigError> {
        let mut template = BTreeMap::new();
        for (subscriber, group) in &self.subscriber_template {
            let id = AccountId::parse(subscriber).map_err(|e| ConfigError::Semantic(e.to_string()))?;
            template.insert(id, group.clone());
        }
        Ok(AccountProfile {
            mode: self.mode,
            strategy: self.strategy,
            publish_to_all: self
                .publish_to_all
                .unwrap_or(self.mode == AccountMode::VirtualAutoAccept),
            demand_deletion_on_unsubscribe: self.demand_deletion_on_unsubscribe,
            subscriber_template: template,
        })
    }

    pub fn sign_key(&self) -> Result<Option<SignKey>, ConfigError> {
        match (&self.sign_key, &self.sign_key_seed) {
            (Some(_), Some(_)) => Err(ConfigError::Semantic(format!(
                "account {}: set sign_key or sign_key_seed, not both",
                self.id
            ))),
            (Some(b64), None) => SignKey::from_base64(b64)
                .map(Some)
                .map_err(|e| ConfigError::Semantic(format!("account {}: {e}", self.id))),
            (None, Some(seed)) => Ok(Some(SignKey::from_seed_text(seed))),
            (None, None) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_name: String,
    pub listen: SocketAddr,
    /// URL peers use to reach this node. Defaults to `http://{listen}`.
    #[serde(default)]
    pub public_url: Option<String>,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub peer_table: Option<PathBuf>,
    #[serde(default)]
    pub key_registry: Option<PathBuf>,
    /// Token for the operator endpoints under `/admin`. Disabled when unset.
    #[serde(default)]
    pub admin_token: Option<String>,
    #[serde(default)]
    pub console_dir: Option<PathBuf>,
    #[serde(default = "default_hold_seconds")]
    pub hold_seconds: i64,
    #[serde(default = "default_sync")]
    pub fsync: bool,
    #[serde(default)]
    pub retry: RetryConfig,
    #[serde(default)]
    pub accounts: Vec<AccountConfig>,
}

fn default_hold_seconds() -> i64 {
    deus_core::node::DEFAULT_HOLD_SECONDS
}

fn default_sync() -> bool {
    true
}

impl NodeConfig {
    pub fn minimal(node_name: &str, listen: SocketAddr, data_dir: PathBuf) -> Self {
        Self {
            node_name: node_name.to_owned(),
            listen,
            public_url: None,
            data_dir,
            peer_table: None,
            key_registry: None,
            admin_token: None,
            console_dir: None,
            hold_seconds: default_hold_seconds(),
            fsync: default_sync(),
            retry: RetryConfig::default(),
            accounts: Vec::new(),
        }
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
        let mut config: NodeConfig = toml::from_str(&text).map_err(|e| invalid(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        config.check()?;
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        for p in [&mut self.peer_table, &mut self.key_registry, &mut self.console_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for account in &mut self.accounts {
            if let Some(p) = &mut account.whitelist {
                fix(p);
            }
        }
    }

    /// Checks everything that can be checked without binding a socket.
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.node_name.trim().is_empty() {
            return Err(ConfigError::Semantic("node_name is empty".into()));
        }
        if self.hold_seconds < 0 {
            return Err(ConfigError::Semantic("hold_seconds is negative".into()));
        }
        let mut tokens = BTreeMap::new();
        for account in &self.accounts {
            let id = account.account_id()?;
            account.profile()?;
            account.sign_key()?;
            if account.token.is_empty() {
                return Err(ConfigError::Semantic(format!("account {id}: empty token")));
            }
            if let Some(other) = tokens.insert(account.token.clone(), id.clone()) {
                return Err(ConfigError::Semantic(format!("accounts {other} and {id} share a token")));
            }
        }
        self.peers()?;
        self.registry()?;
        Ok(())
    }

    pub fn public_url(&self) -> String {
        self.public_url
            .clone()
            .unwrap_or_else(|| format!("http://{}", self.listen))
    }

    pub fn peers(&self) -> Result<PeerTable, ConfigError> {
        match &self.peer_table {
            None => Ok(PeerTable::new()),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
                PeerTable::from_json(&text).map_err(|e| invalid(path, e))
            }
        }
    }

    /// The key registry file plus each account's white-list.
    pub fn registry(&self) -> Result<KeyRegistry, ConfigError> {
        let mut registry = match &self.key_registry {
            None => KeyRegistry::new(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
                KeyRegistry::parse_registry(&text).map_err(|e| invalid(path, e))?
            }
        };
        for account in &self.accounts {
            let id = account.account_id()?;
            if let Some(key) = account.sign_key()? {
                if !registry.contains(&id) {
                    registry
                        .register(id.clone(), key.verify_key())
                        .map_err(|e| ConfigError::Semantic(e.to_string()))?;
                }
            }
            if let Some(path) = &account.whitelist {
                let text = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
                registry.load_whitelist(&id, &text).map_err(|e| invalid(path, e))?;
            }
        }
        Ok(registry)
    }
}
