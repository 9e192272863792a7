//! HTTP front of a node: transfer endpoints, the neighbour-systems
//! interface, operator endpoints and the console's static files.

use std::net::SocketAddr;
use std::path::{Component, Path as FsPath};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use deus_core::barker::{AttentionElement, AttentionFilter};
use deus_core::card::{CardId, DigitalCard};
use deus_core::identity::AccountId;
use deus_core::store::{AccountDump, StoreError};
use deus_core::transfer::{Envelope, ProtocolOffer, TransferError, LOOPBACK};
use deus_core::{Error, ReceiveOutcome};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tokio::sync::oneshot;

use crate::api::*;
use crate::config::{AccountConfig, NodeConfig};
use crate::runtime::{NodeRuntime, StartError};

const BODY_LIMIT: usize = 64 * 1024 * 1024;
const SWEEP_INTERVAL: Duration = Duration::from_secs(5);
const CONSOLE_INDEX: &str = include_str!("../assets/console/index.html");

type AppState = Arc<NodeRuntime>;

/// An error on its way to the client.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, body: ErrorBody) -> Self {
        Self { status, body }
    }

    fn internal(reason: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new("Internal", reason.to_string()))
    }

    fn unauthorized(reason: &str) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, ErrorBody::new("Unauthorized", reason))
    }
}

impl From<ErrorBody> for ApiError {
    fn from(body: ErrorBody) -> Self {
        let status = if body.code == "ValidationError" {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::UNPROCESSABLE_ENTITY
        };
        Self::new(status, body)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let body = ErrorBody::from(&e);
        let status = match body.code.as_str() {
            "ValidationError" | "MalformedUri" => StatusCode::BAD_REQUEST,
            "UnknownAccount" | "UnknownAccountId" | "UnknownElement" | "UnknownForeignFile" | "NotInPif"
            | "NotStaged" | "UnknownGroup" => StatusCode::NOT_FOUND,
            "NotPending" | "NotAPlea" | "NotUnread" | "AlreadySubscribed" | "RequestPending" | "NotSubscribed"
            | "NotASubscriber" | "DuplicateAccount" | "ConflictingCardId" => StatusCode::CONFLICT,
            "DeliveryFailed" | "NoCommonProtocol" | "UnsupportedProtocol" => StatusCode::BAD_GATEWAY,
            "StorageIo" | "StorageCorrupt" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, body)
    }
}

impl From<StartError> for ApiError {
    fn from(e: StartError) -> Self {
        match e {
            StartError::Node(e) => e.into(),
            StartError::Store(e) => Error::from(e).into(),
            other => Self::new(StatusCode::BAD_REQUEST, ErrorBody::validation(None, other.to_string())),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// JSON body whose rejections use the structured error shape.
struct Body<T>(T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(value)) => Ok(Self(value)),
            Err(rejection) => Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                ErrorBody::validation(None, json_rejection_reason(&rejection)),
            )),
        }
    }
}

fn json_rejection_reason(rejection: &JsonRejection) -> String {
    rejection.body_text()
}

fn bearer(parts: &Parts) -> Option<&str> {
    parts
        .headers
        .get(AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

/// The account a neighbour-systems request acts for.
struct Caller(AccountId);

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = bearer(parts).ok_or_else(|| ApiError::unauthorized("missing bearer token"))?;
        state
            .account_for_token(token)
            .map(Caller)
            .ok_or_else(|| ApiError::unauthorized("unknown token"))
    }
}

struct Admin;

impl FromRequestParts<AppState> for Admin {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let expected = state
            .admin_token()
            .ok_or_else(|| ApiError::new(StatusCode::FORBIDDEN, ErrorBody::new("Forbidden", "admin endpoints disabled")))?;
        match bearer(parts) {
            Some(token) if token == expected => Ok(Admin),
            _ => Err(ApiError::unauthorized("admin token required")),
        }
    }
}

/// Runs synchronous node work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn parse_account(field: &str, text: &str) -> Result<AccountId, ApiError> {
    AccountId::parse(text).map_err(|e| ErrorBody::validation(Some(field), e.to_string()).into())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/deus/tp/http/v1/message", post(receive_message))
        .route("/deus/tp/v1/protocols", get(protocols))
        .route("/deus/tp/v1/resolve", get(resolve))
        .route("/nsi/v1/contribute", post(contribute))
        .route("/nsi/v1/attention", get(attention))
        .route("/nsi/v1/history", get(history))
        .route("/nsi/v1/attention/{id}/decision", post(decide))
        .route("/nsi/v1/attention/{id}/read", post(mark_read))
        .route("/nsi/v1/subscribe", post(subscribe))
        .route("/nsi/v1/unsubscribe", post(unsubscribe))
        .route("/nsi/v1/cancel", post(cancel))
        .route("/nsi/v1/publish", post(publish))
        .route("/nsi/v1/pif", get(pif))
        .route("/nsi/v1/staging", get(staging))
        .route("/nsi/v1/dif", get(dif))
        .route("/nsi/v1/fif/{concerned}", get(fif))
        .route("/nsi/v1/relationships", get(relationships))
        .route("/nsi/v1/strategy", post(set_strategy))
        .route("/nsi/v1/groups", get(groups).post(define_group))
        .route("/nsi/v1/groups/{name}/members", post(assign_group))
        .route("/admin/v1/accounts", get(list_accounts).post(provision))
        .route("/admin/v1/accounts/{account}/export", get(export))
        .route("/admin/v1/import", post(import))
        .route("/admin/v1/stats", get(stats))
        .route("/console", get(console_index))
        .route("/console/", get(console_index))
        .route("/console/{*path}", get(console_file))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

async fn healthz(State(state): State<AppState>) -> String {
    state.node.name().to_owned()
}

async fn receive_message(State(state): State<AppState>, body: Bytes) -> Result<Json<ReceiveResponse>, ApiError> {
    let envelope = Envelope::from_json(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, ErrorBody::new("MalformedEnvelope", e.to_string())))?;
    blocking(move || {
        state.note_received();
        match state.node.receive(envelope) {
            Ok(ReceiveOutcome::Dispatched) => Ok(Json(ReceiveResponse {
                outcome: "dispatched".into(),
                rejection: None,
            })),
            Ok(ReceiveOutcome::Duplicate) => Ok(Json(ReceiveResponse {
                outcome: "duplicate".into(),
                rejection: None,
            })),
            Ok(ReceiveOutcome::Rejected(e)) => Ok(Json(ReceiveResponse {
                outcome: "rejected".into(),
                rejection: Some(ErrorBody::from(&e)),
            })),
            Err(e) => {
                let status = match e {
                    TransferError::MalformedEnvelope(_) => StatusCode::BAD_REQUEST,
                    TransferError::UnknownReceiverAccount(_) => StatusCode::NOT_FOUND,
                    TransferError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                };
                Err(ApiError::new(status, ErrorBody::from(&Error::from(e))))
            }
        }
    })
    .await
}

#[derive(Deserialize)]
struct ProtocolQuery {
    account: String,
}

async fn protocols(State(state): State<AppState>, Query(q): Query<ProtocolQuery>) -> ApiResult<Vec<ProtocolOffer>> {
    let account = parse_account("account", &q.account)?;
    if !state.node.store().contains(&account) {
        return Err(Error::from(TransferError::UnknownAccount(account)).into());
    }
    let offers = state
        .node
        .transfer()
        .offered_protocols(&account)
        .map_err(Error::from)?
        .into_iter()
        .filter(|o| o.protocol != LOOPBACK)
        .collect();
    Ok(Json(offers))
}

#[derive(Deserialize)]
struct ResolveQuery {
    account: String,
    protocol: String,
}

async fn resolve(State(state): State<AppState>, Query(q): Query<ResolveQuery>) -> ApiResult<AddressView> {
    let account = parse_account("account", &q.account)?;
    let address = state
        .node
        .transfer()
        .resolve_tp_id(&account, &q.protocol)
        .map_err(Error::from)?;
    Ok(Json(AddressView { address: address.0 }))
}

async fn contribute(
    State(state): State<AppState>,
    Caller(account): Caller,
    Body(req): Body<ContributeRequest>,
) -> ApiResult<ContributeResponse> {
    let node = state.node.clone();
    let now = node.store().clock().now();
    let contribution = req.card.validate(&account, node.max_body(), now)?;
    blocking(move || {
        let discriminator = match contribution.discriminator {
            Some(d) => d,
            None => node.next_discriminator(&account)?,
        };
        let card_id = CardId::new(discriminator, contribution.provider, contribution.concerned).map_err(Error::from)?;
        let receipt = node.contribute(&account, DigitalCard::new(card_id.clone(), contribution.payload))?;
        Ok(ContributeResponse {
            card_id,
            envelope_id: receipt.envelope_id,
            protocol: receipt.protocol,
        })
    })
    .await
    .map(Json)
}

async fn attention(
    State(state): State<AppState>,
    Caller(account): Caller,
    Query(q): Query<AttentionQuery>,
) -> ApiResult<Vec<AttentionElement>> {
    let filter = AttentionFilter {
        include_read: q.include_read,
        include_decided: q.include_decided,
    };
    Ok(Json(state.node.list_attention(&account, filter)?))
}

async fn history(State(state): State<AppState>, Caller(account): Caller) -> ApiResult<Vec<AttentionElement>> {
    Ok(Json(state.node.history(&account)?))
}

fn element_id(text: &str) -> Result<u64, ApiError> {
    text.parse()
        .map_err(|_| ErrorBody::validation(Some("id"), format!("{text:?} is not an element id")).into())
}

async fn decide(
    State(state): State<AppState>,
    Caller(account): Caller,
    Path(id): Path<String>,
    Body(req): Body<DecisionRequest>,
) -> ApiResult<AttentionElement> {
    let id = element_id(&id)?;
    let args = req.args()?;
    blocking(move || Ok(state.node.decide(&account, id, req.verdict, args)?.element))
        .await
        .map(Json)
}

async fn mark_read(
    State(state): State<AppState>,
    Caller(account): Caller,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    let id = element_id(&id)?;
    state.node.mark_read(&account, id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn subscribe(
    State(state): State<AppState>,
    Caller(account): Caller,
    Body(req): Body<SubscribeRequest>,
) -> ApiResult<deus_core::transfer::DeliveryReceipt> {
    let publisher = parse_account("publisher", &req.publisher)?;
    blocking(move || Ok(state.node.subscribe(&account, &publisher)?))
        .await
        .map(Json)
}

async fn unsubscribe(
    State(state): State<AppState>,
    Caller(account): Caller,
    Body(req): Body<SubscribeRequest>,
) -> ApiResult<deus_core::transfer::DeliveryReceipt> {
    let publisher = parse_account("publisher", &req.publisher)?;
    blocking(move || Ok(state.node.unsubscribe(&account, &publisher)?))
        .await
        .map(Json)
}

async fn cancel(
    State(state): State<AppState>,
    Caller(account): Caller,
    Body(req): Body<CancelRequest>,
) -> ApiResult<deus_core::transfer::DeliveryReceipt> {
    let consumer = parse_account("consumer", &req.consumer)?;
    blocking(move || Ok(state.node.cancel_subscription(&account, &consumer, req.demand_deletion)?))
        .await
        .map(Json)
}

async fn publish(
    State(state): State<AppState>,
    Caller(account): Caller,
    Body(req): Body<PublishRequest>,
) -> ApiResult<deus_core::transfer::MulticastReport> {
    req.card_id
        .validate()
        .map_err(|e| ApiError::from(ErrorBody::validation(Some("cardId"), e.to_string())))?;
    if req.groups.iter().any(|g| g.trim().is_empty()) {
        return Err(ErrorBody::validation(Some("groups"), "group names must not be empty").into());
    }
    blocking(move || Ok(state.node.publish(&account, &req.card_id, &req.groups)?))
        .await
        .map(Json)
}

fn views(state: &NodeRuntime, cards: Vec<Arc<DigitalCard>>) -> Vec<CardView> {
    let registry = state.node.registry();
    cards.iter().map(|c| CardView::new(c, &registry)).collect()
}

async fn pif(State(state): State<AppState>, Caller(account): Caller) -> ApiResult<Vec<CardView>> {
    let cards = state.node.read_pif(&account)?;
    Ok(Json(views(&state, cards)))
}

async fn staging(State(state): State<AppState>, Caller(account): Caller) -> ApiResult<Vec<CardView>> {
    let cards = state.node.read_staging(&account)?;
    Ok(Json(views(&state, cards)))
}

async fn dif(State(state): State<AppState>, Caller(account): Caller) -> ApiResult<Vec<CardView>> {
    let cards = state.node.read_dif(&account)?;
    Ok(Json(views(&state, cards)))
}

async fn fif(
    State(state): State<AppState>,
    Caller(account): Caller,
    Path(concerned): Path<String>,
) -> ApiResult<Vec<CardView>> {
    let concerned = parse_account("concerned", &concerned)?;
    let cards = state.node.read_fif(&account, &concerned)?;
    Ok(Json(views(&state, cards)))
}

async fn relationships(State(state): State<AppState>, Caller(account): Caller) -> ApiResult<RelationshipsView> {
    Ok(Json(RelationshipsView::from(state.node.state(&account)?.as_ref())))
}

async fn set_strategy(
    State(state): State<AppState>,
    Caller(account): Caller,
    Body(req): Body<StrategyRequest>,
) -> Result<StatusCode, ApiError> {
    for id in &req.global_set {
        id.validate()
            .map_err(|e| ApiError::from(ErrorBody::validation(Some("globalSet"), e.to_string())))?;
    }
    state.node.set_strategy(&account, req.kind, req.global_set)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn groups(
    State(state): State<AppState>,
    Caller(account): Caller,
) -> ApiResult<std::collections::BTreeMap<String, std::collections::BTreeSet<AccountId>>> {
    Ok(Json(state.node.groups(&account)?))
}

async fn define_group(
    State(state): State<AppState>,
    Caller(account): Caller,
    Body(req): Body<GroupRequest>,
) -> Result<StatusCode, ApiError> {
    state.node.define_group(&account, &req.name)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn assign_group(
    State(state): State<AppState>,
    Caller(account): Caller,
    Path(name): Path<String>,
    Body(req): Body<MemberRequest>,
) -> Result<StatusCode, ApiError> {
    let subscriber = parse_account("subscriber", &req.subscriber)?;
    state.node.assign_group(&account, &subscriber, &name)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_accounts(State(state): State<AppState>, _: Admin) -> ApiResult<Vec<AccountId>> {
    Ok(Json(state.node.accounts()))
}

async fn provision(
    State(state): State<AppState>,
    _: Admin,
    Body(account): Body<AccountConfig>,
) -> Result<(StatusCode, Json<AccountId>), ApiError> {
    let id = blocking(move || Ok(state.provision(account)?)).await?;
    Ok((StatusCode::CREATED, Json(id)))
}

async fn export(State(state): State<AppState>, _: Admin, Path(account): Path<String>) -> ApiResult<AccountDump> {
    let account = parse_account("account", &account)?;
    Ok(Json(state.node.dump(&account)?))
}

async fn import(State(state): State<AppState>, _: Admin, Body(dump): Body<AccountDump>) -> Result<StatusCode, ApiError> {
    blocking(move || Ok(state.node.import(&dump)?)).await?;
    Ok(StatusCode::CREATED)
}

async fn stats(State(state): State<AppState>, _: Admin) -> ApiResult<StatsView> {
    Ok(Json(StatsView {
        node: state.node.name().to_owned(),
        accounts: state.node.accounts().len(),
        http_sent: state.http.sent(),
        http_attempts: state.http.attempts(),
        http_received: state.received(),
    }))
}

async fn console_index(State(state): State<AppState>) -> Response {
    serve_console(&state, "index.html").await
}

async fn console_file(State(state): State<AppState>, Path(path): Path<String>) -> Response {
    serve_console(&state, &path).await
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit('.').next() {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn serve_console(state: &NodeRuntime, path: &str) -> Response {
    let relative = FsPath::new(path);
    if relative.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    match state.console_dir() {
        Some(dir) => match std::fs::read(dir.join(relative)) {
            Ok(bytes) => ([(CONTENT_TYPE, content_type(path))], bytes).into_response(),
            Err(_) => StatusCode::NOT_FOUND.into_response(),
        },
        None if path == "index.html" => ([(CONTENT_TYPE, content_type(path))], CONSOLE_INDEX).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

/// A node serving HTTP on its own runtime. Dropping it shuts the server
/// down.
pub struct RunningNode {
    pub runtime: Arc<NodeRuntime>,
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl RunningNode {
    pub fn start(config: &NodeConfig) -> Result<Self, StartError> {
        let listener = std::net::TcpListener::bind(config.listen).map_err(|e| StartError::Bind {
            addr: config.listen.to_string(),
            reason: e.to_string(),
        })?;
        Self::start_on(config, listener)
    }

    /// Serves on an already bound listener.
    pub fn start_on(config: &NodeConfig, listener: std::net::TcpListener) -> Result<Self, StartError> {
        let bind_err = |e: std::io::Error| StartError::Bind {
            addr: config.listen.to_string(),
            reason: e.to_string(),
        };
        let addr = listener.local_addr().map_err(bind_err)?;
        listener.set_nonblocking(true).map_err(bind_err)?;
        let runtime = NodeRuntime::build(config)?;
        let tokio_rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .thread_name(format!("deus-{}", config.node_name))
            .build()
            .map_err(bind_err)?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(runtime.clone());
        let sweeper = runtime.clone();
        let listener = {
            let _guard = tokio_rt.enter();
            tokio::net::TcpListener::from_std(listener).map_err(bind_err)?
        };
        let thread = thread::Builder::new()
            .name(format!("deus-{}-server", config.node_name))
            .spawn(move || {
                tokio_rt.block_on(async move {
                    tokio::spawn(async move {
                        let mut ticker = tokio::time::interval(SWEEP_INTERVAL);
                        loop {
                            ticker.tick().await;
                            let node = sweeper.node.clone();
                            let _ = tokio::task::spawn_blocking(move || node.sweep_holds()).await;
                        }
                    });
                    let served = axum::serve(listener, app)
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await;
                    if let Err(e) = served {
                        tracing::error!(error = %e, "server stopped");
                    }
                });
                tokio_rt.shutdown_timeout(Duration::from_secs(2));
            })
            .map_err(bind_err)?;
        tracing::info!(node = %config.node_name, %addr, "serving");
        Ok(Self {
            runtime,
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RunningNode {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Error::from(e).into()
    }
}
