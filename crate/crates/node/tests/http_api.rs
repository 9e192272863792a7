use std::net::SocketAddr;

use deus_core::barker::{ElementKind, Subject, Verdict};
use deus_core::identity::AccountId;
use deus_node::api::{AttentionQuery, CardIdInput, CardInput, PayloadInput};
use deus_node::client::Client;
use deus_node::config::AccountConfig;
use deus_node::{NodeConfig, RunningNode};
use tempfile::TempDir;

fn id(name: &str) -> AccountId {
    AccountId::parse(&format!("https://api.example/{name}")).unwrap()
}

fn account(name: &str) -> AccountConfig {
    AccountConfig {
        id: id(name).to_string(),
        mode: Default::default(),
        strategy: Default::default(),
        token: format!("{name}-token"),
        sign_key: None,
        sign_key_seed: Some(format!("api:{name}")),
        whitelist: None,
        publish_to_all: None,
        demand_deletion_on_unsubscribe: false,
        subscriber_template: Default::default(),
    }
}

fn start(dir: &TempDir, console: Option<&str>) -> RunningNode {
    let listen: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let mut config = NodeConfig::minimal("api-node", listen, dir.path().join("data"));
    config.fsync = false;
    config.admin_token = Some("root".into());
    config.accounts = ["alice", "bob", "higgins"].map(account).to_vec();
    if let Some(html) = console {
        let console_dir = dir.path().join("console");
        std::fs::create_dir_all(&console_dir).unwrap();
        std::fs::write(console_dir.join("index.html"), html).unwrap();
        std::fs::write(console_dir.join("app.js"), "console.log(1)").unwrap();
        config.console_dir = Some(console_dir);
    }
    RunningNode::start(&config).unwrap()
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
            title: "Blood panel".into(),
            created_at: Some("2011-05-02T08:00:00Z".into()),
            body_base64: "aGVsbG8=".into(),
        },
    }
}

fn status_of(response: Result<ureq::Response, ureq::Error>) -> u16 {
    match response {
        Ok(r) => r.status(),
        Err(ureq::Error::Status(code, _)) => code,
        Err(e) => panic!("transport error {e}"),
    }
}

#[test]
fn healthz_names_the_node() {
    let dir = tempfile::tempdir().unwrap();
    let node = start(&dir, None);
    assert_eq!(Client::new(node.base_url(), None).health().unwrap(), "api-node");
}

#[test]
fn nsi_requires_a_known_token() {
    let dir = tempfile::tempdir().unwrap();
    let node = start(&dir, None);
    let url = format!("{}/nsi/v1/pif", node.base_url());
    assert_eq!(status_of(ureq::get(&url).call()), 401);
    assert_eq!(
        status_of(ureq::get(&url).set("authorization", "Bearer nobody").call()),
        401
    );
    assert_eq!(
        status_of(ureq::get(&url).set("authorization", "Bearer alice-token").call()),
        200
    );
    let admin = format!("{}/admin/v1/stats", node.base_url());
    assert_eq!(
        status_of(ureq::get(&admin).set("authorization", "Bearer alice-token").call()),
        401
    );
}

#[test]
fn full_flow_on_one_node_over_nsi() {
    let dir = tempfile::tempdir().unwrap();
    let node = start(&dir, None);
    let base = Client::new(node.base_url(), None);
    let (alice, bob, higgins) = (
        base.with_token("alice-token"),
        base.with_token("bob-token"),
        base.with_token("higgins-token"),
    );

    bob.subscribe(&id("alice")).unwrap();
    let plea = &alice.attention(&AttentionQuery::default()).unwrap()[0];
    assert_eq!((plea.kind, plea.subject), (ElementKind::Plea, Subject::SubscriptionRequest));
    alice.decide(plea.element_id, Verdict::Grant, None, vec![]).unwrap();

    higgins.contribute(&card("panel", &id("alice"))).unwrap();
    assert_eq!(alice.staging().unwrap().len(), 1);
    let plea = &alice.attention(&AttentionQuery::default()).unwrap()[0];
    assert_eq!(plea.subject, Subject::Repatriation);
    alice.decide(plea.element_id, Verdict::Grant, None, vec![]).unwrap();

    let pif = alice.pif().unwrap();
    assert_eq!(pif.len(), 1);
    assert!(alice.staging().unwrap().is_empty());
    assert_eq!(bob.dif().unwrap().len(), 1);
    assert_eq!(bob.fif(&id("alice")).unwrap()[0].card, pif[0].card);

    let err = alice.decide(plea.element_id, Verdict::Grant, None, vec![]).unwrap_err();
    assert_eq!(err.code(), Some("NotPending"));
}

#[test]
fn malformed_requests_are_rejected_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let node = start(&dir, None);
    let admin = Client::new(node.base_url(), Some("root".into()));
    let before: Vec<_> = ["alice", "bob", "higgins"]
        .iter()
        .map(|a| admin.export(&id(a)).unwrap().to_bytes())
        .collect();

    let base = node.base_url();
    let post = |path: &str, body: &str| {
        status_of(
            ureq::post(&format!("{base}{path}"))
                .set("authorization", "Bearer higgins-token")
                .set("content-type", "application/json")
                .send_string(body),
        )
    };
    let corpus = [
        ("/nsi/v1/contribute", "", 400),
        ("/nsi/v1/contribute", "{", 400),
        ("/nsi/v1/contribute", "[]", 400),
        ("/nsi/v1/contribute", r#"{"id":{"concerned":"not a uri"},"payload":{"mediaType":"text/plain","title":"t","bodyBase64":"aGk="}}"#, 400),
        ("/nsi/v1/contribute", r#"{"id":{"concerned":"https://api.example/alice"},"payload":{"mediaType":"text/plain","title":"t","bodyBase64":"%%%"}}"#, 400),
        ("/nsi/v1/contribute", r#"{"id":{"concerned":"https://api.example/alice"},"payload":{"mediaType":"","title":"t","bodyBase64":"aGk="}}"#, 400),
        ("/nsi/v1/subscribe", r#"{"publisher":"::"}"#, 400),
        ("/nsi/v1/subscribe", r#"{"publisher":"https://api.example/higgins"}"#, 422),
        ("/nsi/v1/attention/999/decision", r#"{"verdict":"grant"}"#, 404),
        ("/nsi/v1/attention/x/decision", r#"{"verdict":"grant"}"#, 400),
        ("/nsi/v1/attention/1/decision", r#"{"verdict":"maybe"}"#, 400),
        ("/nsi/v1/publish", r#"{"card":{}}"#, 400),
        ("/deus/tp/http/v1/message", "not json", 400),
        ("/deus/tp/http/v1/message", r#"{"envelopeId":"x"}"#, 400),
    ];
    for (path, body, expected) in corpus {
        let got = post(path, body);
        assert!(
            (400..500).contains(&got) && (got == expected || expected == 400 && got == 422),
            "{path} {body:?}: got {got}, wanted {expected}"
        );
    }

    let after: Vec<_> = ["alice", "bob", "higgins"]
        .iter()
        .map(|a| admin.export(&id(a)).unwrap().to_bytes())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn console_assets_are_served() {
    let dir = tempfile::tempdir().unwrap();
    let node = start(&dir, Some("<h1>console</h1>"));
    let base = node.base_url();
    let index = ureq::get(&format!("{base}/console/")).call().unwrap();
    assert!(index.content_type().starts_with("text/html"));
    assert_eq!(index.into_string().unwrap(), "<h1>console</h1>");
    assert_eq!(status_of(ureq::get(&format!("{base}/console/app.js")).call()), 200);
    assert_eq!(status_of(ureq::get(&format!("{base}/console/missing.css")).call()), 404);
    assert_ne!(status_of(ureq::get(&format!("{base}/console/../Cargo.toml")).call()), 200);
}

#[test]
fn bundled_console_placeholder_is_served_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let node = start(&dir, None);
    let page = ureq::get(&format!("{}/console", node.base_url()))
        .call()
        .unwrap()
        .into_string()
        .unwrap();
    assert!(page.contains("console_dir"));
}

#[test]
fn provisioned_accounts_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let node = start(&dir, None);
    let admin = Client::new(node.base_url(), Some("root".into()));
    admin.provision(&account("dora")).unwrap();
    assert!(admin.accounts().unwrap().contains(&id("dora")));
    node.stop();

    let node = start(&dir, None);
    let admin = Client::new(node.base_url(), Some("root".into()));
    assert!(admin.accounts().unwrap().contains(&id("dora")));
    let dora = Client::new(node.base_url(), Some("dora-token".into()));
    assert!(dora.pif().unwrap().is_empty());
}
