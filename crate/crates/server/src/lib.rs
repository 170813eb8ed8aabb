//! HTTP binding for [`trialsum_core::api::Engine`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use tokio::net::TcpListener;
use trialsum_core::api::{parse_request, ApiError, Engine, QueryBody, SearchRequest};

type Shared = Arc<Engine>;

fn json(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn reply(r: Result<String, ApiError>) -> Response {
    match r {
        Ok(body) => json(StatusCode::OK, body),
        Err(e) => {
            let status = StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            json(status, e.body())
        }
    }
}

/// Runs a blocking engine call off the async workers.
async fn blocking<F>(engine: Shared, f: F) -> Response
where
    F: FnOnce(&Engine) -> Result<String, ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&engine)).await {
        Ok(r) => reply(r),
        Err(e) => reply(Err(ApiError::new(500, format!("worker failed: {e}")))),
    }
}

/// Reads `population`, `intervention`, `outcome` (each repeatable) and `k`.
pub fn parse_search_query(raw: &str) -> Result<SearchRequest, ApiError> {
    let mut req = SearchRequest::default();
    let mut query = QueryBody::default();
    for (key, value) in form_urlencoded::parse(raw.as_bytes()) {
        let value = value.into_owned();
        match key.as_ref() {
            "population" => query.population.push(value),
            "intervention" => query.intervention.push(value),
            "outcome" => query.outcome.push(value),
            "k" => {
                if req.k.is_some() {
                    return Err(ApiError::bad_request("k given more than once"));
                }
                let k = value
                    .parse()
                    .map_err(|_| ApiError::bad_request(format!("k must be a positive integer, got {value:?}")))?;
                req.k = Some(k);
            }
            other => return Err(ApiError::bad_request(format!("unknown query parameter {other:?}"))),
        }
    }
    req.query = query;
    Ok(req)
}

async fn search(State(engine): State<Shared>, RawQuery(raw): RawQuery) -> Response {
    match parse_search_query(raw.as_deref().unwrap_or("")) {
        Ok(req) => reply(engine.search(&req)),
        Err(e) => reply(Err(e)),
    }
}

fn body_text(body: &Bytes) -> Result<&str, ApiError> {
    std::str::from_utf8(body).map_err(|_| ApiError::bad_request("request body is not UTF-8"))
}

async fn summarize(State(engine): State<Shared>, body: Bytes) -> Response {
    match body_text(&body).and_then(parse_request) {
        Ok(req) => blocking(engine, move |e| e.summarize(&req)).await,
        Err(e) => reply(Err(e)),
    }
}

async fn infill(State(engine): State<Shared>, body: Bytes) -> Response {
    match body_text(&body).and_then(parse_request) {
        Ok(req) => blocking(engine, move |e| e.infill(&req)).await,
        Err(e) => reply(Err(e)),
    }
}

async fn provenance(State(engine): State<Shared>, body: Bytes) -> Response {
    match body_text(&body).and_then(parse_request) {
        Ok(req) => reply(engine.provenance(&req)),
        Err(e) => reply(Err(e)),
    }
}

async fn templates(State(engine): State<Shared>) -> Response {
    json(StatusCode::OK, engine.templates_json())
}

async fn trial(State(engine): State<Shared>, Path(id): Path<String>) -> Response {
    reply(engine.trial(&id))
}

pub fn router(engine: Shared) -> Router {
    Router::new()
        .route("/search", get(search))
        .route("/summarize", post(summarize))
        .route("/infill", post(infill))
        .route("/provenance", post(provenance))
        .route("/templates", get(templates))
        .route("/trials/{id}", get(trial))
        .with_state(engine)
}

/// Serves until the process is stopped.
pub async fn serve(engine: Shared, listener: TcpListener) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine)).await
}

/// Binds `addr` and serves on a fresh multi-threaded runtime.
pub fn run(engine: Engine, addr: SocketAddr) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = TcpListener::bind(addr).await?;
        serve(Arc::new(engine), listener).await
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_keys_accumulate() {
        let r = parse_search_query("population=adults&population=children&outcome=pain%20score&k=3").unwrap();
        assert_eq!(r.query.population, vec!["adults", "children"]);
        assert_eq!(r.query.outcome, vec!["pain score"]);
        assert_eq!(r.k, Some(3));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(parse_search_query("k=x").unwrap_err().status, 400);
        assert_eq!(parse_search_query("colour=red").unwrap_err().status, 400);
        assert_eq!(parse_search_query("k=1&k=2").unwrap_err().status, 400);
    }
}
