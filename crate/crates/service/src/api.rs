//! Routes and JSON wire types.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use softspread::dataset::EmbeddedDataset;
use softspread::export::write_events;
use softspread::graph::{GraphKind, Normalization};
use softspread::matrix::RowMatrix;
use softspread::session::AnnotationSource;
use softspread::solver::{SolverConfig, DEFAULT_TOLERANCE};
use softspread::uncertainty::{hoeffding_ci, wilson_ci, CiMethod, ConfidenceInterval, HoeffdingParams};

use crate::error::{ApiError, ApiResult};
use crate::store::{NewDataset, SessionEntry, SessionRequest, SessionStore};

pub type AppState = Arc<SessionStore>;

pub fn router(store: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/annotations", post(post_annotation))
        .route("/sessions/{id}/estimates", get(get_estimates))
        .route("/sessions/{id}/uncertainty", get(get_uncertainty))
        .route("/sessions/{id}/suggestions", get(get_suggestions))
        .route("/sessions/{id}/points", get(get_points))
        .route("/sessions/{id}/events", get(get_events))
        .route("/sessions/{id}/events.csv", get(get_events_csv))
        .with_state(store)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InlineDataset {
    /// Defaults to `"0".."n-1"`.
    #[serde(default)]
    pub ids: Option<Vec<String>>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Path(PathBuf),
    Inline(InlineDataset),
}

fn default_graph() -> GraphKind {
    GraphKind::Knn { k: 10 }
}

fn default_alpha() -> f64 {
    0.9
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub dataset: DatasetSource,
    #[serde(default = "default_graph")]
    pub graph: GraphKind,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Required unless the dataset carries ground-truth label columns.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Enables Hoeffding intervals.
    #[serde(default)]
    pub lipschitz: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub points: usize,
    pub dim: usize,
    pub classes: usize,
    pub annotations: usize,
    pub graph: GraphKind,
    pub normalization: Normalization,
    pub alpha: f64,
    pub tolerance: f64,
    pub lipschitz: Option<f64>,
    pub created_ms: u64,
    pub updated_ms: u64,
    /// Hash of the accumulators and log, as a decimal string.
    pub digest: String,
}

fn info(entry: &SessionEntry) -> SessionInfo {
    let state = entry.read();
    let config = state.config();
    SessionInfo {
        id: entry.id.clone(),
        points: entry.dataset.len(),
        dim: entry.dataset.dim(),
        classes: state.classes(),
        annotations: state.log().len(),
        graph: entry.spec.graph,
        normalization: entry.spec.normalization,
        alpha: config.solver.alpha,
        tolerance: config.solver.tolerance,
        lipschitz: config.lipschitz,
        created_ms: entry.created_ms,
        updated_ms: entry.updated_ms(),
        digest: state.state_digest().to_string(),
    }
}

fn inline_dataset(inline: InlineDataset) -> ApiResult<EmbeddedDataset> {
    let features = RowMatrix::from_rows(&inline.features)?;
    let ids = inline.ids.unwrap_or_else(|| (0..features.rows()).map(|i| i.to_string()).collect());
    Ok(EmbeddedDataset::new(ids, features, None, None)?)
}

async fn create_session(
    State(store): State<AppState>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    let entry = blocking(move || {
        let solver = SolverConfig::new(req.alpha)?.with_tolerance(req.tolerance)?;
        let dataset = match req.dataset {
            DatasetSource::Path(p) => NewDataset::Path(p),
            DatasetSource::Inline(inline) => {
                let rows = inline.features.len();
                if rows > store.config().max_points {
                    return Err(ApiError::new(
                        StatusCode::INSUFFICIENT_STORAGE,
                        format!("dataset has {rows} points, the limit is {}", store.config().max_points),
                    ));
                }
                NewDataset::Inline(inline_dataset(inline)?)
            }
        };
        store.create(
            dataset,
            SessionRequest {
                graph: req.graph,
                normalization: req.normalization,
                solver,
                classes: req.classes,
                lipschitz: req.lipschitz,
            },
        )
    })
    .await?;
    Ok((StatusCode::CREATED, Json(info(&entry))))
}

async fn session_info(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let entry = store.get(&id)?;
    Ok(Json(info(&entry)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub point_id: String,
    pub class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub sequence: u64,
    pub point_id: String,
    pub class: usize,
    /// Updated estimate of the annotated point.
    pub probabilities: Vec<f64>,
    pub received_mass: f64,
    /// Points whose received mass moved by more than 1e-6.
    pub changed_points: usize,
}

async fn post_annotation(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<AnnotationRequest>,
) -> ApiResult<Json<AnnotationResponse>> {
    let entry = store.get(&id)?;
    let point = entry
        .point_index(&req.point_id)
        .ok_or_else(|| ApiError::not_found(format!("no point '{}' in session '{id}'", req.point_id)))?;
    let applied = blocking(move || {
        let writer = entry.try_writer().ok_or_else(|| {
            ApiError::new(StatusCode::CONFLICT, "another annotation is being applied to this session; retry")
        })?;
        entry.apply(&writer, point, req.class)
    })
    .await?;
    Ok(Json(AnnotationResponse {
        sequence: applied.event.sequence,
        point_id: req.point_id,
        class: applied.event.class,
        probabilities: applied.estimate,
        received_mass: applied.received_mass,
        changed_points: applied.changed_points,
    }))
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct PageParams {
    #[serde(default)]
    pub offset: usize,
    /// All remaining rows when absent.
    pub limit: Option<usize>,
}

impl PageParams {
    fn range(&self, total: usize) -> std::ops::Range<usize> {
        let start = self.offset.min(total);
        let end = self.limit.map_or(total, |l| start.saturating_add(l).min(total));
        start..end
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Page<T> {
    pub total: usize,
    pub offset: usize,
    pub rows: Vec<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRow {
    pub id: String,
    pub probabilities: Vec<f64>,
    pub received_mass: f64,
}

async fn get_estimates(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Query(page): Query<PageParams>,
) -> ApiResult<Json<Page<EstimateRow>>> {
    let entry = store.get(&id)?;
    let state = entry.read();
    let ids = entry.dataset.ids();
    let range = page.range(ids.len());
    let rows = range
        .clone()
        .map(|q| EstimateRow {
            id: ids[q].clone(),
            probabilities: state.estimate_at(q),
            received_mass: state.received()[q],
        })
        .collect();
    Ok(Json(Page {
        total: ids.len(),
        offset: range.start,
        rows,
    }))
}

#[derive(Debug, Clone, Deserialize)]
pub struct UncertaintyParams {
    #[serde(default = "default_method")]
    pub method: CiMethod,
    /// Wilson critical value.
    #[serde(default = "default_z")]
    pub z: f64,
    /// Hoeffding failure probability.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub union_bound: bool,
    #[serde(default)]
    pub offset: usize,
    pub limit: Option<usize>,
}

fn default_method() -> CiMethod {
    CiMethod::Wilson
}

fn default_z() -> f64 {
    1.96
}

fn default_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub id: String,
    /// One interval per class.
    pub intervals: Vec<ConfidenceInterval>,
}

async fn get_uncertainty(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Query(params): Query<UncertaintyParams>,
) -> ApiResult<Json<Page<UncertaintyRow>>> {
    let entry = store.get(&id)?;
    let state = entry.read();
    let ids = entry.dataset.ids();
    let range = PageParams {
        offset: params.offset,
        limit: params.limit,
    }
    .range(ids.len());
    let hoeffding = HoeffdingParams {
        delta: params.delta,
        union_bound: params.union_bound,
    };
    let mut rows = Vec::with_capacity(range.len());
    for q in range.clone() {
        let intervals = (0..state.classes())
            .map(|c| match params.method {
                CiMethod::Wilson => wilson_ci(&state, q, c, params.z),
                CiMethod::Hoeffding => hoeffding_ci(&state, q, c, hoeffding),
            })
            .collect::<softspread::Result<Vec<_>>>()?;
        rows.push(UncertaintyRow {
            id: ids[q].clone(),
            intervals,
        });
    }
    Ok(Json(Page {
        total: ids.len(),
        offset: range.start,
        rows,
    }))
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct SuggestionParams {
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_count() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Suggestion {
    pub id: String,
    pub received_mass: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Suggestions {
    pub suggestions: Vec<Suggestion>,
}

/// Points with the least received mass first, ties by index.
async fn get_suggestions(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Query(params): Query<SuggestionParams>,
) -> ApiResult<Json<Suggestions>> {
    let entry = store.get(&id)?;
    let state = entry.read();
    let received = state.received();
    let mut order: Vec<usize> = (0..received.len()).collect();
    order.sort_by(|&a, &b| received[a].total_cmp(&received[b]).then(a.cmp(&b)));
    let suggestions = order
        .into_iter()
        .take(params.count)
        .map(|q| Suggestion {
            id: entry.dataset.ids()[q].clone(),
            received_mass: received[q],
        })
        .collect();
    Ok(Json(Suggestions { suggestions }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointRow {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

async fn get_points(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Query(page): Query<PageParams>,
) -> ApiResult<Json<Page<PointRow>>> {
    let entry = store.get(&id)?;
    let ds = &entry.dataset;
    if ds.dim() != 2 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("points are served for 2-D embeddings only; this session is {}-D, use the CLI", ds.dim()),
        ));
    }
    let range = page.range(ds.len());
    let rows = range
        .clone()
        .map(|q| PointRow {
            id: ds.ids()[q].clone(),
            x: ds.point(q)[0],
            y: ds.point(q)[1],
        })
        .collect();
    Ok(Json(Page {
        total: ds.len(),
        offset: range.start,
        rows,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRow {
    pub sequence: u64,
    pub point_id: String,
    pub class: usize,
    pub source: AnnotationSource,
}

async fn get_events(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<EventRow>>> {
    let entry = store.get(&id)?;
    let state = entry.read();
    Ok(Json(
        state
            .log()
            .iter()
            .map(|e| EventRow {
                sequence: e.sequence,
                point_id: entry.dataset.ids()[e.point].clone(),
                class: e.class,
                source: e.source,
            })
            .collect(),
    ))
}

/// The event log in the command-line replay format.
async fn get_events_csv(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let entry = store.get(&id)?;
    let mut buf = Vec::new();
    write_events(&mut buf, &entry.dataset, entry.read().log())?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], buf))
}
