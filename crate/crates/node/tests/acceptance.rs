//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::collections::BTreeMap;
use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use deus_core::card::Overall;
use deus_core::identity::{AccountId, KeyRegistry, SignKey};
use deus_core::transfer::{negotiate, Command as WireCommand, CommandKind, PeerEntry, PeerTable, ProtocolOffer};
use deus_node::api::{AttentionQuery, CardIdInput, CardInput, PayloadInput};
use deus_node::client::Client;
use deus_node::fuzz;
use deus_node::harness::{self, Harness, RunOptions, ScenarioScript};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn bundled(name: &str) -> ScenarioScript {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"));
    ScenarioScript::load(&path).expect("bundled scripts parse")
}

fn fig2_triangle() -> Outcome {
    let started = Instant::now();
    let harness = Harness::start(&bundled("fig2-triangle"), RunOptions::default()).map_err(|e| e.to_string())?;
    let report = harness.run().map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(report.nodes == 3, || format!("ran on {} nodes", report.nodes))?;
    let alice = harness.client("alice").map_err(|e| e.to_string())?;
    let pif = alice.pif().map_err(|e| e.to_string())?;
    ensure(
        pif.len() == 1 && pif[0].status == Overall::DoubleSigned && pif[0].card.id.discriminator == "xray-2010-03-14",
        || format!("alice PIF is {pif:?}"),
    )?;
    let bob = harness.client("bob").map_err(|e| e.to_string())?;
    let fif = bob
        .fif(&harness::account_uri("alice").map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(fif.len() == 1 && fif[0].card == pif[0].card, || format!("bob FIF is {fif:?}"))?;
    let higgins = &report.card_sets["higgins"];
    ensure(higgins.is_empty(), || format!("higgins holds {} cards", higgins.len()))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("3 nodes, {} HTTP messages, {} ms", report.http_messages, elapsed.as_millis()))
}

fn mediation_gate_fuzz() -> Outcome {
    let results: Vec<_> = thread::scope(|scope| {
        let handles: Vec<_> = (1..=10u64).map(|seed| scope.spawn(move || (seed, fuzz::fuzz(seed, 1000)))).collect();
        handles.into_iter().map(|h| h.join().expect("fuzz thread")).collect()
    });
    let mut fif = 0;
    for (seed, result) in results {
        match result {
            Ok(report) => fif += report.final_cards.fif,
            Err(v) => return Err(format!("seed {seed}: {v}; minimized trace {:?}", v.minimized)),
        }
    }
    Ok(format!("10 seeds x 1000 ops over 3 nodes, 0 violations, {fif} FIF cards at the end"))
}

/// Independent oracle: enumerate every common protocol, rank by summed
/// priority descending then name ascending.
fn brute_force(a: &[ProtocolOffer], b: &[ProtocolOffer]) -> Option<String> {
    let mut candidates: Vec<(u16, String)> = Vec::new();
    for x in a {
        for y in b {
            if x.protocol == y.protocol {
                candidates.push((x.priority as u16 + y.priority as u16, x.protocol.clone()));
            }
        }
    }
    candidates.sort_by(|p, q| q.0.cmp(&p.0).then_with(|| p.1.cmp(&q.1)));
    candidates.into_iter().next().map(|(_, name)| name)
}

fn negotiation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xde05);
    let names = ["http", "https", "loopback", "amqp", "smtp", "sim", "ws", "mq", "ftp", "x400"];
    let mut common = 0;
    for i in 0..1000 {
        let list = |rng: &mut ChaCha8Rng| -> Vec<ProtocolOffer> {
            let mut pool = names.to_vec();
            pool.shuffle(rng);
            let n = rng.gen_range(0..=5);
            pool[..n]
                .iter()
                .map(|p| ProtocolOffer::new(*p, rng.gen_range(0..=4) * 25))
                .collect()
        };
        let a = list(&mut rng);
        let b = list(&mut rng);
        let ab = negotiate(&a, &b).ok();
        let ba = negotiate(&b, &a).ok();
        let oracle = brute_force(&a, &b);
        ensure(ab == oracle, || format!("sample {i}: negotiate gave {ab:?}, oracle {oracle:?} for {a:?} / {b:?}"))?;
        ensure(ab == ba, || format!("sample {i}: asymmetric {ab:?} vs {ba:?}"))?;
        common += usize::from(ab.is_some());
    }
    Ok(format!("1000 pairs, {common} with a common protocol, all equal to the oracle and symmetric"))
}

fn colocation() -> Outcome {
    let script = bundled("fig2-triangle");
    let three = harness::run_script(&script, RunOptions::default()).map_err(|e| e.to_string())?;
    let one = harness::run_script(&script, RunOptions { single_node: true }).map_err(|e| e.to_string())?;
    ensure(one.nodes == 1 && three.nodes == 3, || "wrong node counts".into())?;
    ensure(three.http_messages > 0, || "three-node run sent no HTTP".into())?;
    ensure(one.http_messages == 0, || format!("one-node run sent {} HTTP messages", one.http_messages))?;
    ensure(one.card_sets == three.card_sets, || {
        format!("card sets differ:\n one: {:?}\n three: {:?}", one.card_sets, three.card_sets)
    })?;
    let cards: usize = one.card_sets.values().map(|s| s.len()).sum();
    Ok(format!(
        "{cards} cards byte-identical; HTTP messages: 1 node {}, 3 nodes {}",
        one.http_messages, three.http_messages
    ))
}

fn idempotent_delivery() -> Outcome {
    let harness = Harness::start(&bundled("fig2-triangle"), RunOptions::default()).map_err(|e| e.to_string())?;
    harness.run().map_err(|e| e.to_string())?;
    let dumps = |h: &Harness| -> BTreeMap<String, Vec<u8>> {
        h.nodes()
            .iter()
            .flat_map(|n| {
                let node = n.running.runtime.node.clone();
                node.accounts()
                    .into_iter()
                    .map(move |a| (a.to_string(), node.dump(&a).expect("hosted account").to_bytes()))
            })
            .collect()
    };
    let before_cards = harness.card_sets()?;
    let before = dumps(&harness);
    let envelopes = harness.received();
    ensure(!envelopes.is_empty(), || "nothing was recorded".into())?;
    for round in 0..2 {
        let outcomes = harness.redeliver(&envelopes)?;
        if let Some(bad) = outcomes.iter().find(|o| *o != "duplicate") {
            return Err(format!("round {round}: redelivery answered {bad}"));
        }
    }
    ensure(harness.card_sets()? == before_cards, || "card sets changed".into())?;
    ensure(dumps(&harness) == before, || "account state changed".into())?;
    Ok(format!("{} envelopes redelivered twice, state unchanged", envelopes.len()))
}

fn strategies() -> Outcome {
    let harness = Harness::start(&bundled("strategies"), RunOptions::default()).map_err(|e| e.to_string())?;
    harness.run().map_err(|e| e.to_string())?;
    let alice = harness::account_uri("alice").map_err(|e| e.to_string())?;
    let fif = |who: &str| -> Result<Vec<String>, String> {
        let mut d: Vec<String> = harness
            .client(who)
            .map_err(|e| e.to_string())?
            .fif(&alice)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|c| c.card.id.discriminator)
            .collect();
        d.sort();
        Ok(d)
    };
    let pif = harness.client("alice").map_err(|e| e.to_string())?.pif().map_err(|e| e.to_string())?;
    ensure(pif.len() == 3, || format!("PIF holds {} cards", pif.len()))?;
    let relationships = harness
        .client("alice")
        .map_err(|e| e.to_string())?
        .relationships()
        .map_err(|e| e.to_string())?;
    let log: Vec<&str> = relationships.strategy.publication_log["family"]
        .iter()
        .map(|id| id.discriminator.as_str())
        .collect();
    ensure(log == ["c2", "c1"], || format!("group log is {log:?}"))?;

    ensure(fif("bob")? == ["c1", "c3"], || format!("GlobalSet gave {:?}", fif("bob")))?;
    ensure(fif("dave")? == ["c2"], || format!("ManualSelection gave {:?}", fif("dave")))?;
    ensure(fif("frank")?.is_empty(), || format!("Nothing gave {:?}", fif("frank")))?;

    let erin = harness::account_uri("erin").map_err(|e| e.to_string())?;
    let delivered: Vec<String> = harness
        .node_of("erin")
        .map_err(|e| e.to_string())?
        .recorder
        .received()
        .into_iter()
        .filter(|e| e.receiver == erin && e.command == CommandKind::PublishCard)
        .filter_map(|e| match e.command() {
            Ok(WireCommand::PublishCard(card)) => Some(card.id.discriminator),
            _ => None,
        })
        .collect();
    ensure(delivered == ["c2", "c1"], || format!("GroupHistory delivered {delivered:?}"))?;
    Ok("GlobalSet {c1,c3}, ManualSelection {c2}, GroupHistory [c2,c1] in order, Nothing {}".into())
}

fn virtual_account() -> Outcome {
    let script = bundled("virtual-account");
    let decisions = script
        .steps
        .iter()
        .filter(|s| matches!(s.action, harness::Action::Decide(_)))
        .count();
    ensure(decisions == 0, || format!("script makes {decisions} decisions"))?;
    let harness = Harness::start(&script, RunOptions::default()).map_err(|e| e.to_string())?;
    harness.run().map_err(|e| e.to_string())?;
    let vera = harness::account_uri("vera").map_err(|e| e.to_string())?;
    let vera_client = harness.client("vera").map_err(|e| e.to_string())?;
    let pif = vera_client.pif().map_err(|e| e.to_string())?;
    ensure(
        pif.len() == 1 && pif[0].card.id.discriminator == "lab-1" && pif[0].status == Overall::DoubleSigned,
        || format!("vera PIF {pif:?}"),
    )?;
    for who in ["bob", "carol"] {
        let fif = harness
            .client(who)
            .map_err(|e| e.to_string())?
            .fif(&vera)
            .map_err(|e| e.to_string())?;
        ensure(fif.len() == 1 && fif[0].card == pif[0].card, || format!("{who} FIF {fif:?}"))?;
    }
    let staging = vera_client.staging().map_err(|e| e.to_string())?;
    ensure(
        staging.len() == 1 && staging[0].card.id.discriminator == "note-1",
        || format!("vera staging {staging:?}"),
    )?;
    let pleas: Vec<_> = vera_client
        .attention(&AttentionQuery::default())
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|e| e.kind == deus_core::barker::ElementKind::Plea)
        .collect();
    ensure(
        pleas.len() == 1 && pleas[0].subject == deus_core::barker::Subject::Repatriation,
        || format!("vera pleas {pleas:?}"),
    )?;
    let history = vera_client.history().map_err(|e| e.to_string())?;
    let decided = history
        .iter()
        .filter(|e| e.kind == deus_core::barker::ElementKind::Plea && e.state != deus_core::barker::ElementState::Pending)
        .count();
    ensure(decided == 0, || format!("{decided} pleas were decided"))?;
    Ok("white-listed card in PIF and 2 subscriber FIFs with 0 decisions; other card staged with a plea".into())
}

struct Daemon {
    child: Child,
    url: String,
    config: PathBuf,
}

impl Daemon {
    fn spawn(config: &Path, addr: SocketAddr) -> Result<Self, String> {
        let child = Command::new(env!("CARGO_BIN_EXE_deus"))
            .args(["serve", "--config"])
            .arg(config)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let daemon = Self {
            child,
            url: format!("http://{addr}"),
            config: config.to_owned(),
        };
        let deadline = Instant::now() + Duration::from_secs(20);
        while Client::new(daemon.url.clone(), None).health().is_err() {
            if Instant::now() > deadline {
                return Err(format!("{} did not come up", config.display()));
            }
            thread::sleep(Duration::from_millis(50));
        }
        Ok(daemon)
    }

    fn kill9(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn client(&self, token: &str) -> Client {
        Client::new(self.url.clone(), Some(token.to_owned()))
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        self.kill9();
    }
}

fn free_addr() -> SocketAddr {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

fn account(name: &str) -> AccountId {
    AccountId::parse(&format!("https://durable.example/{name}")).unwrap()
}

fn write_node(dir: &Path, name: &str, addr: SocketAddr, accounts: &[&str], peers: &[(&str, SocketAddr)]) -> PathBuf {
    let mut table = PeerTable::new();
    for (peer, peer_addr) in peers {
        table
            .insert(PeerEntry {
                account: account(peer),
                base_url: format!("http://{peer_addr}"),
                protocols: vec![ProtocolOffer::new("http", 50)],
            })
            .unwrap();
    }
    fs::write(dir.join(format!("{name}-peers.json")), table.to_json()).unwrap();
    let mut text = format!(
        "node_name = \"{name}\"\nlisten = \"{addr}\"\ndata_dir = \"{name}-data\"\npeer_table = \"{name}-peers.json\"\nkey_registry = \"keys.txt\"\nfsync = true\n"
    );
    for a in accounts {
        text.push_str(&format!(
            "\n[[accounts]]\nid = \"{}\"\ntoken = \"{a}-token\"\nsign_key_seed = \"durable:{a}\"\n",
            account(a)
        ));
    }
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn card(discriminator: &str, concerned: &AccountId) -> CardInput {
    CardInput {
        id: CardIdInput {
            discriminator: Some(discriminator.into()),
            provider: None,
            concerned: concerned.to_string(),
        },
        payload: PayloadInput {
            media_type: "text/plain".into(),
            title: format!("report {discriminator}"),
            created_at: Some("2010-03-14T09:30:00Z".into()),
            body_base64: "Tm8gZmluZGluZ3Mu".into(),
        },
    }
}

#[derive(Debug, PartialEq)]
struct Acknowledged {
    alice_pif: Vec<String>,
    alice_staging: Vec<String>,
    alice_relationships: String,
    bob_fif: Vec<String>,
    bob_relationships: String,
    alice_pleas: usize,
}

fn acknowledged(a: &Daemon, b: &Daemon) -> Result<Acknowledged, String> {
    let e = |e: deus_node::client::ClientError| e.to_string();
    let alice = a.client("alice-token");
    let bob = b.client("bob-token");
    let cards = |v: Vec<deus_node::api::CardView>| v.iter().map(|c| serde_json::to_string(&c.card).unwrap()).collect();
    let mut relationships = alice.relationships().map_err(e)?;
    relationships.strategy.publication_log.clear();
    Ok(Acknowledged {
        alice_pif: cards(alice.pif().map_err(e)?),
        alice_staging: cards(alice.staging().map_err(e)?),
        alice_relationships: serde_json::to_string(&relationships).unwrap(),
        bob_fif: cards(bob.fif(&account("alice")).map_err(e)?),
        bob_relationships: serde_json::to_string(&bob.relationships().map_err(e)?).unwrap(),
        alice_pleas: alice.attention(&AttentionQuery::default()).map_err(e)?.len(),
    })
}

fn durability() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut registry = KeyRegistry::new();
    for a in ["alice", "bob", "higgins"] {
        registry
            .register(account(a), SignKey::from_seed_text(&format!("durable:{a}")).verify_key())
            .unwrap();
    }
    fs::write(dir.path().join("keys.txt"), registry.render_registry()).unwrap();
    let (addr_a, addr_b) = (free_addr(), free_addr());
    let conf_a = write_node(dir.path(), "home", addr_a, &["alice", "higgins"], &[("bob", addr_b)]);
    let conf_b = write_node(
        dir.path(),
        "university",
        addr_b,
        &["bob"],
        &[("alice", addr_a), ("higgins", addr_a)],
    );
    let mut a = Daemon::spawn(&conf_a, addr_a)?;
    let mut b = Daemon::spawn(&conf_b, addr_b)?;
    let e = |e: deus_node::client::ClientError| e.to_string();
    let alice = a.client("alice-token");
    let higgins = a.client("higgins-token");
    let bob = b.client("bob-token");

    bob.subscribe(&account("alice")).map_err(e)?;
    let plea = alice.attention(&AttentionQuery::default()).map_err(e)?;
    let request = plea.first().ok_or("no subscription plea")?;
    alice
        .decide(request.element_id, deus_core::barker::Verdict::Grant, Some("family".into()), vec![])
        .map_err(e)?;
    higgins.contribute(&card("xray", &account("alice"))).map_err(e)?;
    let plea = alice.attention(&AttentionQuery::default()).map_err(e)?;
    let repatriation = plea.first().ok_or("no repatriation plea")?;
    alice
        .decide(repatriation.element_id, deus_core::barker::Verdict::Grant, None, vec![])
        .map_err(e)?;
    higgins.contribute(&card("followup", &account("alice"))).map_err(e)?;
    let before = acknowledged(&a, &b)?;
    ensure(before.alice_pif.len() == 1 && before.bob_fif.len() == 1, || format!("pre-kill state {before:?}"))?;
    ensure(before.alice_staging.len() == 1 && before.alice_pleas == 1, || format!("pre-kill state {before:?}"))?;

    a.kill9();
    b.kill9();
    let (config_a, config_b) = (a.config.clone(), b.config.clone());
    drop(a);
    drop(b);
    let a = Daemon::spawn(&config_a, addr_a)?;
    let b = Daemon::spawn(&config_b, addr_b)?;
    let after = acknowledged(&a, &b)?;
    ensure(after == before, || format!("state after restart differs:\n before {before:?}\n after {after:?}"))?;

    let alice = a.client("alice-token");
    let pending = alice.attention(&AttentionQuery::default()).map_err(e)?;
    alice
        .decide(pending[0].element_id, deus_core::barker::Verdict::Grant, None, vec![])
        .map_err(e)?;
    let fif = b.client("bob-token").fif(&account("alice")).map_err(e)?;
    ensure(fif.len() == 2, || format!("bob FIF after post-restart grant holds {}", fif.len()))?;
    Ok("PIF, FIF, staging, pleas and relationships survived kill -9 of both nodes; pending plea decided after restart".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("fig2-triangle across 3 nodes", fig2_triangle),
        ("mediation gate fuzz", mediation_gate_fuzz),
        ("negotiation oracle", negotiation_oracle),
        ("co-location transparency", colocation),
        ("idempotent delivery", idempotent_delivery),
        ("initial-publication strategies", strategies),
        ("virtual account", virtual_account),
        ("durability after kill -9", durability),
    ];
    if std::env::args().any(|a| a == "--list") {
        for (name, _) in &criteria {
            println!("{name}: test");
        }
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, criterion) in criteria {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS {name} ({ms} ms): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({ms} ms): {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
