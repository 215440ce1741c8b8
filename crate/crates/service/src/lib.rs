//! Session-based chat over HTTP. A turn has two steps: posting a message
//! returns what the model understood and the plan it proposes, and a
//! separate generate call produces the response, optionally under an
//! edited plan.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | [`CreateSession`], may be empty | [`SessionView`] |
//! | GET | `/sessions` | | session ids |
//! | GET | `/sessions/{id}` | | [`SessionView`] |
//! | DELETE | `/sessions/{id}` | | |
//! | POST | `/sessions/{id}/message` | `{"text": ..}` | [`PendingView`] |
//! | POST | `/sessions/{id}/generate` | [`GenerateRequest`], may be empty | `GenerationTrace` |
//! | POST | `/sessions/{id}/turn` | [`TurnRequest`] | `GenerationTrace` |
//! | GET | `/policy` | | default `DecodingPolicy` |
//!
//! Errors reply with `{"error": {"code": .., "message": ..}}`.

mod session;

use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use dialplan_core::decode::DecodeError;
use dialplan_core::model::LanguageModel;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use axum::Router;
pub use session::{ChatService, CreateSession, Engine, GenerateRequest, PendingView, ServiceError, SessionView, TurnRequest};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MessageRequest {
    pub text: String,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::OutOfTurn => "out_of_turn",
            ServiceError::NoPendingMessage => "no_pending_message",
            ServiceError::NothingToRegenerate => "nothing_to_regenerate",
            ServiceError::InvalidRequest(_) => "invalid_request",
            ServiceError::Decode(DecodeError::EmptyUtterance) => "empty_text",
            ServiceError::Decode(DecodeError::InvalidPolicy(_)) => "invalid_policy",
            ServiceError::Decode(DecodeError::ReserveTooLarge { .. }) => "invalid_policy",
            ServiceError::Decode(DecodeError::PlanningDisabled) => "planning_disabled",
            ServiceError::Decode(_) | ServiceError::Model(_) => "model_error",
            ServiceError::Snapshot(_) => "snapshot_error",
            ServiceError::Poisoned => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.code() {
            "not_found" => StatusCode::NOT_FOUND,
            "out_of_turn" | "no_pending_message" | "nothing_to_regenerate" => StatusCode::CONFLICT,
            "invalid_request" | "empty_text" | "invalid_policy" | "planning_disabled" => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// A [`ServiceError`] rendered as an HTTP reply.
#[derive(Debug)]
pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: ErrorDetail { code: self.0.code().to_string(), message: self.0.to_string() } };
        (self.0.status(), Json(body)).into_response()
    }
}

/// Parses a JSON body; an empty body means the default value.
fn parse<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError(ServiceError::InvalidRequest(format!("malformed body: {e}"))))
}

type Shared<M> = Arc<ChatService<M>>;

/// Runs `f` on the blocking pool; decoding is CPU-bound.
async fn blocking<M, T>(svc: Shared<M>, f: impl FnOnce(&ChatService<M>) -> Result<T, ServiceError> + Send + 'static) -> Result<T, ApiError>
where
    M: LanguageModel + Send + Sync + 'static,
    M::State: Send,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc)).await.map_err(|_| ApiError(ServiceError::Poisoned))?.map_err(ApiError)
}

async fn create_session<M>(State(svc): State<Shared<M>>, body: Bytes) -> Result<impl IntoResponse, ApiError>
where
    M: LanguageModel + Send + Sync + 'static,
    M::State: Send,
{
    let req: CreateSession = parse(&body)?;
    let view = blocking(svc, move |s| s.create_session(req)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_sessions<M>(State(svc): State<Shared<M>>) -> Result<Json<Vec<String>>, ApiError>
where
    M: LanguageModel + Send + Sync + 'static,
    M::State: Send,
{
    Ok(Json(svc.session_ids()?))
}

async fn get_session<M>(State(svc): State<Shared<M>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError>
where
    M: LanguageModel + Send + Sync + 'static,
    M::State: Send,
{
    Ok(Json(blocking(svc, move |s| s.get_session(&id)).await?))
}

async fn delete_session<M>(State(svc): State<Shared<M>>, Path(id): Path<String>) -> Result<StatusCode, ApiError>
where
    M: LanguageModel + Send + Sync + 'static,
    M::State: Send,
{
    svc.delete_session(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_message<M>(
    State(svc): State<Shared<M>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<PendingView>, ApiError>
where
    M: LanguageModel + Send + Sync + 'static,
    M::State: Send,
{
    let req: MessageRequest = parse(&body)?;
    Ok(Json(blocking(svc, move |s| s.post_message(&id, &req.text)).await?))
}

async fn generate<M>(State(svc): State<Shared<M>>, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError>
where
    M: LanguageModel + Send + Sync + 'static,
    M::State: Send,
{
    let req: GenerateRequest = parse(&body)?;
    Ok(Json(blocking(svc, move |s| s.generate(&id, &req)).await?))
}

async fn turn<M>(State(svc): State<Shared<M>>, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError>
where
    M: LanguageModel + Send + Sync + 'static,
    M::State: Send,
{
    let req: TurnRequest = parse(&body)?;
    Ok(Json(blocking(svc, move |s| s.turn(&id, &req)).await?))
}

async fn policy<M>(State(svc): State<Shared<M>>) -> impl IntoResponse
where
    M: LanguageModel + Send + Sync + 'static,
    M::State: Send,
{
    Json(svc.default_policy().clone())
}

async fn fallback() -> ApiError {
    ApiError(ServiceError::NotFound("route".into()))
}

/// CORS for `origin`, or for any origin when `None`.
pub fn cors(origin: Option<&str>) -> Result<CorsLayer, ServiceError> {
    let allow = match origin {
        None => AllowOrigin::from(Any),
        Some(o) => AllowOrigin::exact(
            HeaderValue::from_str(o).map_err(|_| ServiceError::InvalidRequest(format!("bad CORS origin {o:?}")))?,
        ),
    };
    Ok(CorsLayer::new().allow_origin(allow).allow_methods(Any).allow_headers(Any))
}

pub fn router<M>(service: Arc<ChatService<M>>, cors: CorsLayer) -> Router
where
    M: LanguageModel + Send + Sync + 'static,
    M::State: Send,
{
    Router::new()
        .route("/sessions", post(create_session::<M>).get(list_sessions::<M>))
        .route("/sessions/{id}", get(get_session::<M>).delete(delete_session::<M>))
        .route("/sessions/{id}/message", post(post_message::<M>))
        .route("/sessions/{id}/generate", post(generate::<M>))
        .route("/sessions/{id}/turn", post(turn::<M>))
        .route("/policy", get(policy::<M>))
        .fallback(fallback)
        .layer(cors)
        .with_state(service)
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
