//! A node assembled from its configuration: store, keys, bindings, peers
//! and the bearer tokens of its accounts.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use deus_core::clock::SystemClock;
use deus_core::identity::AccountId;
use deus_core::store::{Store, StoreError};
use deus_core::{Error, Node, NodeOptions};
use parking_lot::RwLock;

use crate::binding::HttpBinding;
use crate::config::{AccountConfig, ConfigError, NodeConfig};

const PROVISIONED_FILE: &str = "provisioned.json";

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Node(#[from] Error),
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
}

pub struct NodeRuntime {
    pub node: Arc<Node>,
    pub http: Arc<HttpBinding>,
    tokens: RwLock<BTreeMap<String, AccountId>>,
    admin_token: Option<String>,
    console_dir: Option<PathBuf>,
    data_dir: PathBuf,
    received: AtomicU64,
}

impl NodeRuntime {
    /// Opens the data directory and provisions every configured account not
    /// already stored there.
    pub fn build(config: &NodeConfig) -> Result<Arc<Self>, StartError> {
        config.check()?;
        fs::create_dir_all(&config.data_dir).map_err(StoreError::from)?;
        let store = Arc::new(Store::open(config.data_dir.join("store"), config.fsync, Arc::new(SystemClock))?);
        let mut options = NodeOptions::named(config.node_name.clone());
        options.public_url = Some(config.public_url());
        options.retry = config.retry.policy();
        options.hold_window = chrono::Duration::seconds(config.hold_seconds);
        let node = Node::new(store, config.registry()?, options);
        let http = Arc::new(HttpBinding::default());
        node.transfer()
            .bindings()
            .register(http.clone())
            .map_err(Error::from)?;
        node.transfer().set_peers(config.peers()?);

        let runtime = Arc::new(Self {
            node,
            http,
            tokens: RwLock::new(BTreeMap::new()),
            admin_token: config.admin_token.clone(),
            console_dir: config.console_dir.clone(),
            data_dir: config.data_dir.clone(),
            received: AtomicU64::new(0),
        });
        for account in &config.accounts {
            runtime.attach(account)?;
        }
        for account in runtime.provisioned()? {
            runtime.attach(&account)?;
        }
        Ok(runtime)
    }

    fn attach(&self, account: &AccountConfig) -> Result<AccountId, StartError> {
        let id = account.account_id()?;
        let key = account.sign_key()?;
        if self.node.store().contains(&id) {
            if let Some(key) = key {
                self.node.add_sign_key(id.clone(), key);
            }
        } else {
            self.node.provision_account(id.clone(), account.profile()?, key)?;
        }
        self.tokens.write().insert(account.token.clone(), id.clone());
        Ok(id)
    }

    fn provisioned_path(&self) -> PathBuf {
        self.data_dir.join(PROVISIONED_FILE)
    }

    fn provisioned(&self) -> Result<Vec<AccountConfig>, StartError> {
        let path = self.provisioned_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(StoreError::from)?;
        serde_json::from_str(&text).map_err(|e| {
            ConfigError::Invalid {
                path,
                reason: e.to_string(),
            }
            .into()
        })
    }

    /// Provisions an account at runtime and remembers it, with its token and
    /// key, for the next start.
    pub fn provision(&self, account: AccountConfig) -> Result<AccountId, StartError> {
        let id = account.account_id()?;
        if self.tokens.read().contains_key(&account.token) {
            return Err(ConfigError::Semantic("token already in use".into()).into());
        }
        if self.node.store().contains(&id) {
            return Err(StoreError::DuplicateAccount(id).into());
        }
        let id = self.attach(&account)?;
        let mut all = self.provisioned()?;
        all.push(account);
        let text = serde_json::to_string_pretty(&all).expect("account configs serialize");
        let tmp = self.provisioned_path().with_extension("tmp");
        fs::write(&tmp, text).map_err(StoreError::from)?;
        fs::rename(&tmp, self.provisioned_path()).map_err(StoreError::from)?;
        Ok(id)
    }

    pub fn account_for_token(&self, token: &str) -> Option<AccountId> {
        self.tokens.read().get(token).cloned()
    }

    pub fn admin_token(&self) -> Option<&str> {
        self.admin_token.as_deref()
    }

    pub fn console_dir(&self) -> Option<&PathBuf> {
        self.console_dir.as_ref()
    }

    pub fn note_received(&self) {
        self.received.fetch_add(1, Ordering::SeqCst);
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::SeqCst)
    }
}
