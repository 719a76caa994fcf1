// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP front end for one fenced checkpoint.
//!
//! Requests are accepted concurrently but reach the [`Engine`] one at a
//! time, in arrival order, through an async mutex; the model call itself
//! runs on the blocking pool.

mod engine;

pub use engine::{Engine, EngineError, MAX_TOKENS_LIMIT};

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fencebench_client::{ErrorBody, GenerateRequest, ModelInfo, TraceRequest};
use serde::de::DeserializeOwned;
use tokio::sync::Mutex;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

type Shared = Arc<Mutex<Engine>>;

/// An error response: status plus [`ErrorBody`].
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: String, field: Option<String>) -> Self {
        Self {
            status,
            body: ErrorBody { error, field },
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::BadRequest { field, message } => Self::new(StatusCode::BAD_REQUEST, message, field),
            EngineError::Overflow(m) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, m, None),
            EngineError::Core(fencebench_core::Error::ContextLength { len, max }) => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("{len} tokens exceed the context window of {max}"),
                None,
            ),
            EngineError::Core(e) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Parses a JSON body, reporting every failure as 400 with the field serde
/// names in its message.
fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.contains("field"))
            .map(str::to_string);
        ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request body: {msg}"), field)
    })
}

async fn with_engine<T, F>(engine: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
{
    let guard = engine.lock_owned().await;
    tokio::task::spawn_blocking(move || f(&guard))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}"), None))?
        .map_err(ApiError::from)
}

async fn info(State(engine): State<Shared>) -> Json<ModelInfo> {
    Json(engine.lock().await.info())
}

async fn generate(State(engine): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: GenerateRequest = parse(&body)?;
    let resp = with_engine(engine, move |e| e.generate(&req)).await?;
    Ok(Json(resp).into_response())
}

async fn trace(State(engine): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: TraceRequest = parse(&body)?;
    let resp = with_engine(engine, move |e| e.trace(&req)).await?;
    Ok(Json(resp).into_response())
}

/// Routes for `engine`. `cors_origin` of `None` allows any origin.
pub fn router(engine: Engine, cors_origin: Option<&str>) -> Result<Router, EngineError> {
    let origin = match cors_origin {
        None => AllowOrigin::from(Any),
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| EngineError::BadRequest {
            field: Some("cors_origin".into()),
            message: format!("invalid CORS origin `{o}`"),
        })?),
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods(Any).allow_headers(Any);
    Ok(Router::new()
        .route("/model/info", get(info))
        .route("/generate", post(generate))
        .route("/trace", post(trace))
        .layer(cors)
        .with_state(Arc::new(Mutex::new(engine))))
}

/// Serves until the process is stopped.
pub async fn serve(engine: Engine, addr: SocketAddr, cors_origin: Option<&str>) -> std::io::Result<()> {
    let app = router(engine, cors_origin).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}
