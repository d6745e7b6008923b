//! HTTP routes. Every JSON body carries a `schema` field; inputs with
//! unknown fields are rejected with 400.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use nvlab_core::analysis::{fit, FitResult, ModelKind};
use nvlab_core::experiment::{Backend, Dataset, ExperimentSpec};

use crate::error::Error;
use crate::lab::{ApparatusUpdate, Lab, API_SCHEMA};

pub const FIT_SCHEMA: &str = "nvlab.fit/1";

#[derive(Clone)]
pub struct AppState {
    pub lab: Arc<Lab>,
    pub token: Option<String>,
    pub default_backend: Backend,
}

impl IntoResponse for Error {
    fn into_response(self) -> Response {
        let status = match &self {
            Error::Invalid(_) | Error::Schema { .. } => StatusCode::BAD_REQUEST,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Busy(_) => StatusCode::CONFLICT,
            Error::Unauthorized => StatusCode::UNAUTHORIZED,
            Error::Experiment(_) | Error::Replay(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::ConfigNotFound(_) | Error::Config(_) | Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.to_json())).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/apparatus", get(apparatus).put(put_apparatus))
        .route("/jobs", post(submit))
        .route("/jobs/{id}", get(job).delete(cancel))
        .route("/datasets", get(datasets))
        .route("/datasets/{id}", get(dataset))
        .route("/scan/live", get(live))
        .route("/fit", post(fit_dataset))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(st): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return Error::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Error> {
    serde_json::from_slice(body).map_err(|e| Error::Invalid(e.to_string()))
}

/// The apparatus runs simulations on a plain thread; keep them off the
/// async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> Result<T, Error> {
    tokio::task::spawn_blocking(f).await.map_err(|e| Error::Io(e.to_string()))?
}

async fn status(State(st): State<AppState>) -> Json<Value> {
    Json(st.lab.status())
}

async fn apparatus(State(st): State<AppState>) -> Json<Value> {
    Json(json!({ "schema": API_SCHEMA, "state": st.lab.snapshot(), "config": st.lab.config() }))
}

async fn put_apparatus(State(st): State<AppState>, body: Bytes) -> Result<Json<Value>, Error> {
    let update: ApparatusUpdate = parse(&body)?;
    let lab = st.lab.clone();
    let state = blocking(move || lab.update(&update)).await?;
    Ok(Json(json!({ "schema": API_SCHEMA, "state": state })))
}

async fn submit(State(st): State<AppState>, body: Bytes) -> Result<Response, Error> {
    let mut raw: Value = parse(&body)?;
    if let Some(obj) = raw.as_object_mut() {
        obj.entry("backend").or_insert_with(|| serde_json::to_value(st.default_backend).expect("backend serializes"));
    }
    let spec = ExperimentSpec::from_json(&raw.to_string())?;
    let rec = st.lab.submit(spec)?;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

async fn job(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, Error> {
    Ok(Json(st.lab.job(&id)?).into_response())
}

async fn cancel(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, Error> {
    Ok(Json(st.lab.cancel(&id)?).into_response())
}

async fn datasets(State(st): State<AppState>) -> Result<Json<Value>, Error> {
    Ok(Json(json!({ "schema": API_SCHEMA, "datasets": st.lab.store().list()? })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn dataset(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<DatasetQuery>,
) -> Result<Response, Error> {
    match q.format.as_deref() {
        None | Some("json") => {
            let text = st.lab.store().load(&id)?.to_json();
            Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
        }
        Some("csv") => Ok(([(header::CONTENT_TYPE, "text/csv")], st.lab.store().load_csv(&id)?).into_response()),
        Some(other) => Err(Error::Invalid(format!("unknown format {other:?}, expected json or csv"))),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LiveQuery {
    #[serde(default)]
    job: Option<String>,
}

/// JSON lines `{type, job_id, payload}` for one job: everything so far,
/// then live events, closing after the terminal one.
async fn live(State(st): State<AppState>, Query(q): Query<LiveQuery>) -> Result<Response, Error> {
    let id = q.job.or_else(|| st.lab.latest_job()).ok_or_else(|| Error::NotFound("no jobs yet".into()))?;
    st.lab.job(&id)?;
    let rx = st.lab.subscribe();
    let body = stream::unfold((st.lab.clone(), id, 0usize, rx, false), |(lab, id, from, mut rx, ended)| async move {
        if ended {
            return None;
        }
        loop {
            rx.borrow_and_update();
            let (lines, terminal) = match lab.events(&id, from) {
                Ok(v) => v,
                Err(_) => return None,
            };
            if !lines.is_empty() {
                let next = from + lines.len();
                let mut chunk = lines.join("\n");
                chunk.push('\n');
                let done = terminal && lab.events(&id, next).map(|(rest, _)| rest.is_empty()).unwrap_or(true);
                return Some((Ok::<_, std::io::Error>(Bytes::from(chunk)), (lab, id, next, rx, done)));
            }
            if terminal || rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(body)).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRequest {
    pub model: ModelKind,
    pub dataset: String,
    /// Only points with the sweep value inside `[lo, hi]`.
    #[serde(default)]
    pub range: Option<[f64; 2]>,
}

async fn fit_dataset(State(st): State<AppState>, body: Bytes) -> Result<Json<Value>, Error> {
    let req: FitRequest = parse(&body)?;
    let d = st.lab.store().load(&req.dataset)?;
    let id = req.dataset.clone();
    let result = blocking(move || fit_points(&d, req.model, req.range)).await?;
    Ok(Json(json!({ "schema": FIT_SCHEMA, "model": req.model, "dataset": id, "result": result })))
}

/// Fits the measured points of `d`, optionally restricted to an axis range.
pub fn fit_points(d: &Dataset, model: ModelKind, range: Option<[f64; 2]>) -> Result<FitResult, Error> {
    let (x, y) = d.xy();
    let keep: Vec<usize> = (0..x.len()).filter(|&i| range.is_none_or(|[lo, hi]| (lo..=hi).contains(&x[i]))).collect();
    let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    fit(model.model().as_ref(), &pick(&x), &pick(&y), Some(&pick(&d.error))).map_err(|e| Error::Experiment(e.to_string()))
}
