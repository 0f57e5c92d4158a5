//! JSON-over-HTTP API over one loaded checkpoint.
//!
//! Endpoints: `GET /health`, `GET /info`, `GET /concepts`, `POST /sample`,
//! `POST /energy_grid`. Every response carries `X-Checkpoint-Hash` and
//! `X-Elapsed-Ms`. Sampling and grid evaluation run on the blocking pool
//! against an immutable parameter snapshot, so concurrent requests never
//! observe each other.

pub mod api;

use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cocobot::diffengine::Array;
use cocobot::energymodel::{ConceptAssignment, InterventionEntry, InterventionSpec, InterventionState};
use cocobot::sampler::{format_spec, run_sampler, SamplerConfig};
use cocobot::synthworld::World;
use cocobot::trainer::Checkpoint;
use cocobot::Error;
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;

use api::*;

pub const MAX_TRAJECTORY_RECORDS: usize = 512;
pub const MAX_GRID_RESOLUTION: usize = 256;
pub const CHECKPOINT_HASH_HEADER: &str = "x-checkpoint-hash";
pub const ELAPSED_HEADER: &str = "x-elapsed-ms";

/// Grid points evaluated per batch.
const GRID_CHUNK: usize = 4096;

struct Inner {
    checkpoint: Checkpoint,
    world: World,
    hash: String,
    hash_header: HeaderValue,
    concepts_etag: HeaderValue,
    sampler: SamplerConfig,
    diagnostics: AtomicU64,
}

/// Shared, read-only service state.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// `sampler` supplies the defaults that requests override.
    pub fn new(checkpoint: Checkpoint, sampler: SamplerConfig) -> cocobot::Result<Self> {
        sampler.validate(checkpoint.schedule.timesteps)?;
        let world = checkpoint.build_world()?;
        let hash = checkpoint.hash()?;
        let hash_header = HeaderValue::from_str(&hash).expect("hex digest is a valid header");
        let concepts_etag = HeaderValue::from_str(&format!("\"{}\"", &hash[..16])).expect("valid etag");
        Ok(Self(Arc::new(Inner {
            checkpoint,
            world,
            hash,
            hash_header,
            concepts_etag,
            sampler,
            diagnostics: AtomicU64::new(0),
        })))
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.0.hash
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/info", get(info))
        .route("/concepts", get(concepts))
        .route("/sample", post(sample))
        .route("/energy_grid", post(energy_grid))
        .layer(middleware::from_fn_with_state(state.clone(), stamp))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn stamp(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let start = Instant::now();
    let mut res = next.run(req).await;
    let h = res.headers_mut();
    h.insert(CHECKPOINT_HASH_HEADER, state.0.hash_header.clone());
    let ms = format!("{:.3}", start.elapsed().as_secs_f64() * 1e3);
    h.insert(ELAPSED_HEADER, HeaderValue::from_str(&ms).expect("numeric header"));
    res
}

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, body: ErrorBody { error: msg.into(), valid_concepts: None, diagnostic_id: None } }
    }

    /// A 500 whose details go to the server log under a fresh id.
    fn internal(state: &AppState, msg: String) -> Self {
        let n = state.0.diagnostics.fetch_add(1, Ordering::Relaxed);
        let id = format!("{}-{n:06}", &state.0.hash[..12]);
        eprintln!("diagnostic {id}: {msg}");
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody { error: msg, valid_concepts: None, diagnostic_id: Some(id) },
        }
    }

    fn from_core(state: &AppState, e: Error) -> Self {
        let (status, valid) = match &e {
            Error::UnknownConcept { valid, .. } => (StatusCode::BAD_REQUEST, Some(valid.clone())),
            Error::InvalidArgument(_) => (StatusCode::BAD_REQUEST, None),
            Error::AllNeutral => (StatusCode::UNPROCESSABLE_ENTITY, None),
            _ => return Self::internal(state, e.to_string()),
        };
        Self { status, body: ErrorBody { error: e.to_string(), valid_concepts: valid, diagnostic_id: None } }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, reporting every malformed request as 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn info(State(state): State<AppState>) -> Json<InfoResponse> {
    let ck = &state.0.checkpoint;
    let arch = ck.network.arch();
    Json(InfoResponse {
        checkpoint_hash: state.0.hash.clone(),
        untrained: ck.is_untrained(),
        step: ck.step,
        latent_dim: arch.latent_dim,
        timesteps: arch.timesteps,
        concepts: ck.network.concepts().len(),
        parameters: ck.network.params().count(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

async fn concepts(State(state): State<AppState>, headers: HeaderMap) -> Response {
    let etag = &state.0.concepts_etag;
    if headers.get(header::IF_NONE_MATCH) == Some(etag) {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag.clone())]).into_response();
    }
    let spec = state.0.checkpoint.network.concepts();
    let body = ConceptsResponse {
        concepts: spec
            .concepts()
            .iter()
            .enumerate()
            .map(|(index, c)| ConceptEntry { index, name: c.name.clone(), cardinality: c.cardinality })
            .collect(),
        default_weights: DefaultWeights::default(),
    };
    ([(header::ETAG, etag.clone())], Json(body)).into_response()
}

/// Resolves names and fills defaults. Unlisted concepts are neutral.
pub fn build_spec(concepts: &cocobot::energymodel::ConceptSpec, items: &[InterventionRequest]) -> cocobot::Result<InterventionSpec> {
    if items.is_empty() {
        return Err(Error::AllNeutral);
    }
    let mut b = InterventionSpec::builder(concepts);
    for it in items {
        let k = concepts.index_of(&it.concept)?;
        let entry = InterventionEntry { state: it.state, target: it.value.unwrap_or(1), weight: it.weight };
        b = b.entry(k, if it.state == InterventionState::Neutral { InterventionEntry::NEUTRAL } else { entry });
    }
    let spec = b.build()?;
    spec.validate(concepts)?;
    Ok(spec)
}

fn sampler_config(base: &SamplerConfig, o: &SamplerOverrides, seed: u64) -> SamplerConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    if let Some(s) = o.steps_per_t {
        cfg.steps_per_t = s;
    }
    if let Some(e) = o.eta {
        cfg.eta = e;
    }
    if let Some(e) = o.eta_schedule {
        cfg.eta_schedule = e;
    }
    if let Some(n) = o.noise_scale {
        cfg.noise_scale = n;
    }
    cfg
}

fn run_sample(state: &AppState, req: &SampleRequest) -> cocobot::Result<SampleResponse> {
    let inner = &state.0;
    let net = &inner.checkpoint.network;
    let spec = build_spec(net.concepts(), &req.interventions)?;
    let cfg = sampler_config(&inner.sampler, &req.sampler, req.seed);
    let traj = run_sampler(net, &spec, &cfg)?;
    let last = traj.final_record();
    let scores = net
        .predict_concepts(&last.latent, 1)?
        .into_iter()
        .zip(net.concepts().names())
        .map(|(probabilities, concept)| ConceptScore { concept, probabilities })
        .collect();
    Ok(SampleResponse {
        spec: format_spec(&spec, net.concepts()),
        seed: req.seed,
        initial_latent: traj.initial_latent().to_vec(),
        final_latent: last.latent.clone(),
        glyph: inner.world.render_glyph(&last.latent),
        scores,
        energy: last.energy,
        concept_energies: last.concept_energies.clone(),
        updates: traj.records.len() - 1,
        clipped_updates: traj.clipped_updates,
        trajectory_length: req.return_trajectory.then_some(traj.records.len()),
        trajectory: req.return_trajectory.then(|| traj.truncated(MAX_TRAJECTORY_RECORDS)),
    })
}

async fn sample(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<SampleResponse>> {
    let req: SampleRequest = parse_body(&body)?;
    let s = state.clone();
    let out = tokio::task::spawn_blocking(move || run_sample(&s, &req))
        .await
        .map_err(|e| ApiError::internal(&state, format!("sampler task failed: {e}")))?;
    out.map(Json).map_err(|e| ApiError::from_core(&state, e))
}

fn flag_dim(name: &str, v: &Option<Vec<f64>>, d: usize) -> cocobot::Result<()> {
    match v {
        Some(x) if x.len() != d => Err(Error::InvalidArgument(format!("plane.{name} has {} entries, latent dimension is {d}", x.len()))),
        Some(x) if x.iter().any(|e| !e.is_finite()) => Err(Error::InvalidArgument(format!("plane.{name} is not finite"))),
        _ => Ok(()),
    }
}

fn axis_vec(v: &Option<Vec<f64>>, d: usize, axis: usize) -> Vec<f64> {
    v.clone().unwrap_or_else(|| (0..d).map(|i| f64::from(u8::from(i == axis))).collect())
}

/// Coordinates of a `resolution`-point grid over `[lo, hi]`; a single
/// point sits at the midpoint.
pub fn grid_axis(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    if resolution == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..resolution).map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64).collect()
}

fn run_grid(state: &AppState, req: &EnergyGridRequest) -> cocobot::Result<EnergyGridResponse> {
    let net = &state.0.checkpoint.network;
    let d = net.latent_dim();
    let concepts = net.concepts();
    let spec = match &req.interventions {
        Some(items) => build_spec(concepts, items)?,
        None => InterventionSpec::all_active(&ConceptAssignment::new(vec![1; concepts.len()])),
    };
    let p = &req.plane;
    flag_dim("origin", &p.origin, d)?;
    flag_dim("u", &p.u, d)?;
    flag_dim("w", &p.w, d)?;
    if !(p.lo.is_finite() && p.hi.is_finite() && p.lo <= p.hi) {
        return Err(Error::InvalidArgument("plane bounds must be finite with lo <= hi".into()));
    }
    if d < 2 && (p.u.is_none() || p.w.is_none()) {
        return Err(Error::InvalidArgument("default plane axes need a latent dimension of at least 2".into()));
    }
    let origin = p.origin.clone().unwrap_or_else(|| vec![0.0; d]);
    let (u, w) = (axis_vec(&p.u, d, 0), axis_vec(&p.w, d, 1));
    let axis = grid_axis(p.lo, p.hi, req.resolution);
    let points: Vec<Vec<f64>> = axis
        .iter()
        .flat_map(|&b| axis.iter().map(move |&a| (a, b)))
        .map(|(a, b)| (0..d).map(|i| origin[i] + a * u[i] + b * w[i]).collect())
        .collect();
    let mut flat = Vec::with_capacity(points.len());
    for chunk in points.chunks(GRID_CHUNK) {
        flat.extend(net.intervention_eval(&Array::from_rows(chunk)?, req.t, &spec)?.energy);
    }
    if flat.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite { what: "grid energy".into(), step: 0 });
    }
    Ok(EnergyGridResponse {
        t: req.t,
        resolution: req.resolution,
        spec: format_spec(&spec, concepts),
        energies: flat.chunks(req.resolution).map(<[f64]>::to_vec).collect(),
        axis,
    })
}

async fn energy_grid(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<EnergyGridResponse>> {
    let req: EnergyGridRequest = parse_body(&body)?;
    if req.resolution == 0 || req.resolution > MAX_GRID_RESOLUTION {
        return Err(ApiError::bad_request(format!("resolution must be within 1..={MAX_GRID_RESOLUTION}")));
    }
    let timesteps = state.0.checkpoint.schedule.timesteps;
    if req.t > timesteps {
        return Err(ApiError::bad_request(format!("t must be within 0..={timesteps}")));
    }
    let s = state.clone();
    let out = tokio::task::spawn_blocking(move || run_grid(&s, &req))
        .await
        .map_err(|e| ApiError::internal(&state, format!("grid task failed: {e}")))?;
    out.map(Json).map_err(|e| ApiError::from_core(&state, e))
}
