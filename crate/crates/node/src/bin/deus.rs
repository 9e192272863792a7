use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deus_core::barker::Verdict;
use deus_core::card::CardId;
use deus_core::identity::AccountId;
use deus_core::store::{AccountDump, AccountMode, StrategyKind};
use deus_node::api::{AttentionQuery, CardInput, CardView, ErrorBody};
use deus_node::client::{Client, ClientError};
use deus_node::config::AccountConfig;
use deus_node::fuzz;
use deus_node::harness::{self, RunOptions, ScenarioScript};
use deus_node::{NodeConfig, RunningNode};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "deus", version, about = "DEUS node daemon and operator client")]
struct Cli {
    #[command(flatten)]
    conn: Conn,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Conn {
    /// Base URL of the node.
    #[arg(long, global = true, env = "DEUS_URL", default_value = "http://127.0.0.1:7070")]
    url: String,
    /// Bearer token of the account, or the admin token for operator commands.
    #[arg(long, global = true, env = "DEUS_TOKEN")]
    token: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs a node until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    #[command(subcommand)]
    Account(AccountCmd),
    /// Contributes the card described in a JSON file.
    Contribute {
        #[arg(long)]
        card: PathBuf,
    },
    #[command(subcommand)]
    Attention(AttentionCmd),
    /// Every attention record, decided and read ones included.
    History,
    Subscribe {
        publisher: AccountId,
    },
    Unsubscribe {
        publisher: AccountId,
    },
    /// Cancels a consumer's subscription.
    Cancel {
        consumer: AccountId,
        #[arg(long)]
        demand_deletion: bool,
    },
    /// Publishes a PIF card, named by discriminator, to groups.
    Publish {
        card: String,
        #[arg(long = "group", default_value = "all")]
        groups: Vec<String>,
    },
    Pif,
    Dif,
    Staging,
    Fif {
        concerned: AccountId,
    },
    Relationships,
    /// Sets the initial-publication strategy.
    Strategy {
        #[arg(value_parser = parse_enum::<StrategyKind>)]
        kind: StrategyKind,
        /// Discriminators of PIF cards in the global set.
        #[arg(long = "card")]
        cards: Vec<String>,
    },
    #[command(subcommand)]
    Group(GroupCmd),
    /// Writes an account's export directory.
    Export {
        #[arg(long)]
        account: AccountId,
        #[arg(long)]
        out: PathBuf,
    },
    /// Provisions an account from an export directory.
    Import {
        dir: PathBuf,
    },
    Stats,
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Runs random operations over three simulated nodes.
    Fuzz {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        ops: usize,
        /// Prints the full trace.
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Subcommand)]
enum AccountCmd {
    Provision {
        #[arg(long)]
        id: String,
        #[arg(long = "account-token")]
        account_token: String,
        #[arg(long, default_value = "interactive", value_parser = parse_enum::<AccountMode>)]
        mode: AccountMode,
        #[arg(long, default_value = "Nothing", value_parser = parse_enum::<StrategyKind>)]
        strategy: StrategyKind,
        #[arg(long)]
        sign_key: Option<String>,
        #[arg(long)]
        sign_key_seed: Option<String>,
        #[arg(long)]
        publish_to_all: Option<bool>,
    },
    List,
}

#[derive(Subcommand)]
enum AttentionCmd {
    List {
        /// Includes read and decided elements.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        json: bool,
    },
    Decide {
        id: u64,
        #[arg(long, value_parser = parse_enum::<Verdict>)]
        verdict: Verdict,
        #[arg(long)]
        group: Option<String>,
        /// Discriminator of a PIF card to hand out, repeatable.
        #[arg(long = "pick")]
        picks: Vec<String>,
    },
    Read {
        id: u64,
    },
}

#[derive(Subcommand)]
enum GroupCmd {
    List,
    Define { name: String },
    Assign { name: String, subscriber: AccountId },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    Run {
        script: PathBuf,
        /// Hosts every account on one node.
        #[arg(long)]
        single_node: bool,
    },
}

fn parse_enum<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(text.to_owned())).map_err(|e| e.to_string())
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Api(#[from] ClientError),
    #[error("{0}")]
    Local(ErrorBody),
}

impl CliError {
    fn body(&self) -> ErrorBody {
        match self {
            Self::Api(e) => e.to_body(),
            Self::Local(body) => body.clone(),
        }
    }
}

fn local(code: &str, reason: impl ToString) -> CliError {
    CliError::Local(ErrorBody::new(code, reason.to_string()))
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("responses serialize"));
}

fn print_cards(cards: &[CardView]) {
    println!("{:<24} {:<36} {:<36} {:<14} TITLE", "DISCRIMINATOR", "PROVIDER", "CONCERNED", "STATUS");
    for c in cards {
        println!(
            "{:<24} {:<36} {:<36} {:<14} {}",
            c.card.id.discriminator,
            c.card.id.provider,
            c.card.id.concerned,
            serde_json::to_value(c.status).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            c.card.payload.title
        );
    }
}

fn resolve_cards(client: &Client, discriminators: &[String]) -> Result<Vec<CardId>, CliError> {
    if discriminators.is_empty() {
        return Ok(Vec::new());
    }
    let pif = client.pif()?;
    discriminators
        .iter()
        .map(|d| {
            pif.iter()
                .find(|c| &c.card.id.discriminator == d)
                .map(|c| c.card.id.clone())
                .ok_or_else(|| local("NotInPif", format!("no card {d:?} in the PIF")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let client = Client::new(cli.conn.url.clone(), cli.conn.token.clone());
    match cli.command {
        Command::Serve { config } => {
            let config = NodeConfig::load(&config).map_err(|e| local("ConfigError", e))?;
            let node = RunningNode::start(&config).map_err(|e| local("StartError", e))?;
            eprintln!("{} listening on {}", config.node_name, node.addr);
            wait_for_signal();
            node.stop();
        }
        Command::Account(AccountCmd::Provision {
            id,
            account_token,
            mode,
            strategy,
            sign_key,
            sign_key_seed,
            publish_to_all,
        }) => {
            let account = AccountConfig {
                id,
                mode,
                strategy,
                token: account_token,
                sign_key,
                sign_key_seed,
                whitelist: None,
                publish_to_all,
                demand_deletion_on_unsubscribe: false,
                subscriber_template: Default::default(),
            };
            print(&client.provision(&account)?);
        }
        Command::Account(AccountCmd::List) => print(&client.accounts()?),
        Command::Contribute { card } => {
            let text = std::fs::read_to_string(&card).map_err(|e| local("Io", format!("{}: {e}", card.display())))?;
            let input: CardInput =
                serde_json::from_str(&text).map_err(|e| CliError::Local(ErrorBody::validation(Some("card"), e.to_string())))?;
            print(&client.contribute(&input)?);
        }
        Command::Attention(AttentionCmd::List { all, json }) => {
            let query = AttentionQuery {
                include_read: all,
                include_decided: all,
            };
            let elements = client.attention(&query)?;
            if json {
                print(&elements);
            } else {
                println!("{:<6} {:<13} {:<22} {:<9} TEXT", "ID", "KIND", "SUBJECT", "STATE");
                for e in elements {
                    let name = |v: serde_json::Value| v.as_str().map(str::to_owned).unwrap_or_default();
                    println!(
                        "{:<6} {:<13} {:<22} {:<9} {}",
                        e.element_id,
                        name(serde_json::to_value(e.kind).unwrap_or_default()),
                        name(serde_json::to_value(e.subject).unwrap_or_default()),
                        name(serde_json::to_value(e.state).unwrap_or_default()),
                        e.text
                    );
                }
            }
        }
        Command::Attention(AttentionCmd::Decide {
            id,
            verdict,
            group,
            picks,
        }) => {
            let picks = resolve_cards(&client, &picks)?;
            print(&client.decide(id, verdict, group, picks)?);
        }
        Command::Attention(AttentionCmd::Read { id }) => client.mark_read(id)?,
        Command::History => print(&client.history()?),
        Command::Subscribe { publisher } => print(&client.subscribe(&publisher)?),
        Command::Unsubscribe { publisher } => print(&client.unsubscribe(&publisher)?),
        Command::Cancel {
            consumer,
            demand_deletion,
        } => print(&client.cancel(&consumer, demand_deletion)?),
        Command::Publish { card, groups } => {
            let id = resolve_cards(&client, &[card])?.remove(0);
            print(&client.publish(&id, &groups)?);
        }
        Command::Pif => print_cards(&client.pif()?),
        Command::Dif => print_cards(&client.dif()?),
        Command::Staging => print_cards(&client.staging()?),
        Command::Fif { concerned } => print_cards(&client.fif(&concerned)?),
        Command::Relationships => print(&client.relationships()?),
        Command::Strategy { kind, cards } => {
            let set = resolve_cards(&client, &cards)?;
            client.set_strategy(kind, set)?;
        }
        Command::Group(GroupCmd::List) => print(&client.groups()?),
        Command::Group(GroupCmd::Define { name }) => client.define_group(&name)?,
        Command::Group(GroupCmd::Assign { name, subscriber }) => client.assign_group(&name, &subscriber)?,
        Command::Export { account, out } => {
            let dump = client.export(&account)?;
            dump.write_dir(&out).map_err(|e| local("StorageIo", e))?;
            eprintln!("exported {account} to {}", out.display());
        }
        Command::Import { dir } => {
            let dump = AccountDump::read_dir(&dir).map_err(|e| local("StorageIo", e))?;
            client.import(&dump)?;
            print(&dump.metadata.account);
        }
        Command::Stats => print(&client.stats()?),
        Command::Scenario(ScenarioCmd::Run { script, single_node }) => {
            let script = ScenarioScript::load(&script).map_err(|e| local("ScenarioError", e))?;
            let report = harness::run_script(&script, RunOptions { single_node }).map_err(|e| match e {
                harness::ScenarioError::Failed { .. } => local("ScenarioFailed", e),
                harness::ScenarioError::Spawn(_) => local("SpawnError", e),
                harness::ScenarioError::Script(_) => local("ScenarioError", e),
            })?;
            for step in report.steps.iter().chain(&report.assertions) {
                eprintln!("{} {:>6} ms  {}", if step.ok { "PASS" } else { "FAIL" }, step.millis, step.label);
            }
            print(&serde_json::json!({
                "name": report.name,
                "nodes": report.nodes,
                "passed": report.passed(),
                "millis": report.millis,
                "httpMessages": report.http_messages,
            }));
        }
        Command::Fuzz { seed, ops, trace } => match fuzz::fuzz(seed, ops) {
            Ok(report) => {
                if trace {
                    for line in &report.trace {
                        println!("{line}");
                    }
                }
                print(&serde_json::json!({
                    "seed": report.seed,
                    "ops": report.ops,
                    "violations": 0,
                    "outcomes": report.outcomes,
                    "finalCards": report.final_cards,
                }));
            }
            Err(v) => {
                print(&serde_json::json!({
                    "seed": seed,
                    "violation": v.violation,
                    "minimizedTrace": v.minimized,
                }));
                return Err(local("InvariantViolation", v));
            }
        },
    }
    Ok(())
}

fn wait_for_signal() {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("signal runtime");
    rt.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.body()).expect("error bodies serialize"));
            ExitCode::FAILURE
        }
    }
}
