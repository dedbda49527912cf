//! The `/v1/` JSON API.

use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use palign::decoding::DecodeParams;
use palign::eval::{Chatbot, Strategy};
use palign::lm::{LmModel, Stage};
use palign::pipeline::load_dialog_pairs;
use palign::reward::RewardNet;
use palign::tokenizer::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationStore, AnnotationTask, Progress, RateError};
use crate::jobs::{execute, JobKind, JobRecord, JobTable, SubmitError};
use crate::store::DataDir;

/// Checkpoints the chat endpoint answers from.
pub struct Models {
    pub lm: LmModel,
    pub reward: Option<RewardNet>,
    pub vocab: Vocabulary,
}

impl Models {
    /// Loads whatever the data directory holds; `None` without a model and vocabulary.
    pub fn load(dir: &DataDir) -> palign::Result<Option<Self>> {
        if !dir.lm_checkpoint().exists() || !dir.vocab().exists() {
            return Ok(None);
        }
        let (lm, _) = LmModel::load(&dir.lm_checkpoint())?;
        let vocab = Vocabulary::load(&dir.vocab())?;
        let reward =
            if dir.reward_checkpoint().exists() { Some(RewardNet::load(&dir.reward_checkpoint())?) } else { None };
        Ok(Some(Self { lm, reward, vocab }))
    }
}

pub struct AppState {
    pub dir: DataDir,
    pub models: RwLock<Option<Arc<Models>>>,
    pub annotations: Mutex<AnnotationStore>,
    pub jobs: Mutex<JobTable>,
}

impl AppState {
    pub fn open(dir: DataDir) -> palign::Result<Arc<Self>> {
        let models = Models::load(&dir)?.map(Arc::new);
        let annotations = AnnotationStore::open(&dir.tasks(), &dir.ratings())?;
        let jobs = JobTable::open(&dir)?;
        Ok(Arc::new(Self { dir, models: RwLock::new(models), annotations: Mutex::new(annotations), jobs: Mutex::new(jobs) }))
    }

    /// Picks up artifacts a finished job wrote.
    fn refresh(&self, kind: JobKind) -> palign::Result<()> {
        match kind {
            JobKind::FinetunePhase2 | JobKind::TrainReward => {
                let models = Models::load(&self.dir)?.map(Arc::new);
                *self.models.write().expect("models lock") = models;
            }
            JobKind::GenCandidates => {
                let store = AnnotationStore::open(&self.dir.tasks(), &self.dir.ratings())?;
                *self.annotations.lock().expect("annotations lock") = store;
            }
            JobKind::FinetunePhase1 | JobKind::Evaluate => {}
        }
        Ok(())
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<palign::Error> for ApiError {
    fn from(e: palign::Error) -> Self {
        let status = match e {
            palign::Error::InvalidInput(_) | palign::Error::Usage(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Optional per-request overrides of the decoding defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub question: String,
    pub strategy: Option<Strategy>,
    pub temperature: Option<f64>,
    pub max_len: Option<usize>,
    pub num_candidates: Option<usize>,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub beam_width: Option<usize>,
    pub seed: Option<u64>,
}

impl ChatRequest {
    fn params(&self) -> DecodeParams {
        let d = DecodeParams::default();
        DecodeParams {
            temperature: self.temperature.unwrap_or(d.temperature),
            max_len: self.max_len.unwrap_or(d.max_len),
            num_candidates: self.num_candidates.unwrap_or(d.num_candidates),
            top_k: self.top_k.unwrap_or(d.top_k),
            top_p: self.top_p.unwrap_or(d.top_p),
            beam_width: self.beam_width.unwrap_or(d.beam_width),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatResponse {
    pub answer: String,
    pub strategy: Strategy,
    pub score: Option<f64>,
    pub latency_ms: f64,
}

async fn chat(
    State(state): State<Arc<AppState>>,
    req: Result<Json<ChatRequest>, JsonRejection>,
) -> ApiResult<Json<ChatResponse>> {
    let Json(req) = req?;
    if req.question.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "question must not be empty"));
    }
    let strategy = req.strategy.unwrap_or(Strategy::Reward);
    let params = req.params();
    params.validate()?;
    let models = state.models.read().expect("models lock").clone();
    let models = models.ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model checkpoint loaded"))?;
    if !models.lm.is_aligned() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "loaded model has not been through both fine-tuning phases",
        ));
    }
    if strategy == Strategy::Reward && models.reward.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no reward checkpoint loaded"));
    }
    let start = Instant::now();
    let answer = tokio::task::spawn_blocking(move || {
        let bot = Chatbot { lm: &models.lm, reward: models.reward.as_ref(), vocab: &models.vocab };
        bot.answer(&req.question, strategy, &params)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(ChatResponse {
        answer: answer.text,
        strategy,
        score: answer.score,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelStatus {
    pub loaded: bool,
    pub aligned: bool,
    pub reward: bool,
    pub lineage: Vec<Stage>,
}

async fn model_status(State(state): State<Arc<AppState>>) -> Json<ModelStatus> {
    let models = state.models.read().expect("models lock").clone();
    Json(match models {
        Some(m) => ModelStatus {
            loaded: true,
            aligned: m.lm.is_aligned(),
            reward: m.reward.is_some(),
            lineage: m.lm.lineage().to_vec(),
        },
        None => ModelStatus { loaded: false, aligned: false, reward: false, lineage: Vec::new() },
    })
}

async fn next_task(State(state): State<Arc<AppState>>) -> Response {
    let store = state.annotations.lock().expect("annotations lock");
    match store.next_pending() {
        Some(t) => Json(t.clone()).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn progress(State(state): State<Arc<AppState>>) -> Json<Progress> {
    Json(state.annotations.lock().expect("annotations lock").progress())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingRequest {
    pub rating: f64,
    #[serde(default)]
    pub note: Option<String>,
}

async fn rate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    req: Result<Json<RatingRequest>, JsonRejection>,
) -> ApiResult<Json<AnnotationTask>> {
    let Json(req) = req?;
    let mut store = state.annotations.lock().expect("annotations lock");
    match store.rate(&id, req.rating, req.note) {
        Ok(t) => Ok(Json(t.clone())),
        Err(e @ RateError::NotFound(_)) => Err(ApiError::new(StatusCode::NOT_FOUND, e.to_string())),
        Err(e @ RateError::AlreadyRated(_)) => Err(ApiError::new(StatusCode::CONFLICT, e.to_string())),
        Err(e @ RateError::OutOfRange(_)) => Err(ApiError::new(StatusCode::BAD_REQUEST, e.to_string())),
        Err(RateError::Storage(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportResponse {
    pub path: String,
    pub examples: usize,
    pub rated: usize,
    pub gold: usize,
}

/// Writes rated tasks plus gold pairs as the preference dataset.
async fn export(State(state): State<Arc<AppState>>) -> ApiResult<Json<ExportResponse>> {
    let gold_path = state.dir.gold_dataset();
    if !gold_path.exists() {
        return Err(ApiError::new(StatusCode::CONFLICT, "no gold dataset to merge"));
    }
    let gold = load_dialog_pairs(&gold_path)?;
    let (examples, rated) = {
        let store = state.annotations.lock().expect("annotations lock");
        (store.export(&gold), store.progress().rated)
    };
    palign::io::write_jsonl(&state.dir.preferences(), &examples)?;
    Ok(Json(ExportResponse { path: "datasets/preferences.jsonl".into(), examples: examples.len(), rated, gold: gold.len() }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub kind: JobKind,
    #[serde(default)]
    pub config: serde_json::Value,
}

async fn submit_job(
    State(state): State<Arc<AppState>>,
    req: Result<Json<JobRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    let Json(req) = req?;
    let rec = {
        let mut jobs = state.jobs.lock().expect("jobs lock");
        match jobs.start(&state.dir, req.kind, req.config) {
            Ok(rec) => rec,
            Err(e @ SubmitError::Busy(_)) => return Err(ApiError::new(StatusCode::CONFLICT, e.to_string())),
            Err(SubmitError::Invalid(e)) => return Err(e.into()),
        }
    };
    let worker = state.clone();
    let (id, kind, config) = (rec.id.clone(), rec.kind, rec.config.clone());
    tokio::task::spawn_blocking(move || {
        let progress_state = worker.clone();
        let progress_id = id.clone();
        let mut report = move |f: f64| progress_state.jobs.lock().expect("jobs lock").set_progress(&progress_id, f);
        let outcome = execute(&worker.dir, &id, kind, &config, &mut report).and_then(|artifacts| {
            worker.refresh(kind)?;
            Ok(artifacts)
        });
        if let Err(e) = worker.jobs.lock().expect("jobs lock").finish(&worker.dir, &id, outcome) {
            eprintln!("could not record the end of {id}: {e}");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(rec)))
}

async fn list_jobs(State(state): State<Arc<AppState>>) -> Json<Vec<JobRecord>> {
    Json(state.jobs.lock().expect("jobs lock").list())
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    let jobs = state.jobs.lock().expect("jobs lock");
    jobs.get(&id).cloned().map(Json).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no job {id}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/chat", post(chat))
        .route("/v1/model", get(model_status))
        .route("/v1/annotations/next", get(next_task))
        .route("/v1/annotations/progress", get(progress))
        .route("/v1/annotations/export", post(export))
        .route("/v1/annotations/{id}/rating", post(rate))
        .route("/v1/jobs", post(submit_job).get(list_jobs))
        .route("/v1/jobs/{id}", get(get_job))
        .with_state(state)
}

/// Serves the API on `addr` until interrupted.
pub async fn serve(dir: DataDir, addr: &str) -> std::io::Result<()> {
    let state = AppState::open(dir).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
