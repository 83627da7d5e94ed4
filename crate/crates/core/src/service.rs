//! Configuration, dataset splitting and the annotation service: an
//! append-only vote log folded into item state, served over HTTP.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::ingest::MergeConfig;
use crate::judge::{
    annotator_agreement, export_rows, majority_vote, AgreementSummary, AnnotationItem, AnnotationVote,
    MixedNeedPolicy, TrainingRow,
};
use crate::metrics::{classify, ScenarioCategory};
use crate::runner::EvalItem;
use crate::trace::{read_jsonl, write_jsonl, Trace};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("{0}")]
    Split(String),
    #[error("store {path}: {reason}")]
    Store { path: String, reason: String },
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadVote(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub agent: String,
    pub judge: String,
    pub gym: String,
    pub user: String,
    pub embedding: String,
    pub render: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            agent: "gpt-4o".into(),
            judge: "reward-model".into(),
            gym: "gpt-4o".into(),
            user: "gpt-4o".into(),
            embedding: "text-embedding-3-small".into(),
            render: "gpt-4o".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub models: ModelConfig,
    pub merge: MergeConfig,
    pub history_window: usize,
    pub event_budget: usize,
    pub max_steps: usize,
    pub example_count: usize,
    pub mixed_need: MixedNeedPolicy,
    pub redact: Vec<String>,
    pub prompts_dir: Option<PathBuf>,
    pub store_dir: PathBuf,
    pub ui_dir: Option<PathBuf>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            models: ModelConfig::default(),
            merge: MergeConfig::default(),
            history_window: 30,
            event_budget: 200,
            max_steps: 20,
            example_count: 8,
            mixed_need: MixedNeedPolicy::default(),
            redact: Vec::new(),
            prompts_dir: None,
            store_dir: PathBuf::from("annotations"),
            ui_dir: None,
        }
    }
}

pub const CONFIG_ENV: &str = "PROAGYM_CONFIG";

impl AppConfig {
    /// `.json` files are read as JSON, anything else as TOML.
    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let err = |reason: String| ServiceError::Config {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| err(e.to_string()))
        }
    }

    /// Explicit path, else `PROAGYM_CONFIG`, else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self, ServiceError> {
        match explicit {
            Some(p) => AppConfig::from_file(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => AppConfig::from_file(Path::new(&p)),
                _ => Ok(AppConfig::default()),
            },
        }
    }
}

/// Anything with a stable identifier that can be split into datasets.
pub trait Keyed {
    fn key(&self) -> &str;
}

impl Keyed for AnnotationItem {
    fn key(&self) -> &str {
        &self.item_id
    }
}

impl Keyed for EvalItem {
    fn key(&self) -> &str {
        &self.item_id
    }
}

/// Held-out share of the annotated set: 120 of 1,760 items.
pub const DEFAULT_TEST_FRACTION: f64 = 120.0 / 1760.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_fraction: f64,
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub manifest: SplitManifest,
}

/// Uniform index in `0..n` from 64-bit draws (multiply-shift with
/// rejection, so there is no modulo bias).
pub fn bounded_index(rng: &mut impl RngCore, n: u64) -> u64 {
    debug_assert!(n > 0);
    let threshold = n.wrapping_neg() % n;
    loop {
        let m = rng.next_u64() as u128 * n as u128;
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// Seeded Fisher-Yates over ChaCha8.
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = bounded_index(&mut rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Shuffle with `seed` and take the first `round(n * test_fraction)` items
/// as the test split.
pub fn dataset_split<T: Keyed>(mut items: Vec<T>, test_fraction: f64, seed: u64) -> Result<DatasetBundle<T>, ServiceError> {
    if items.is_empty() {
        return Err(ServiceError::Split("cannot split an empty item list".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ServiceError::Split(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = items.iter().find(|i| !seen.insert(i.key().to_string())) {
        return Err(ServiceError::Split(format!("duplicate item id `{}`", dup.key())));
    }
    let n = items.len();
    let test_count = ((n as f64 * test_fraction).round() as usize).min(n);
    seeded_shuffle(&mut items, seed);
    let train = items.split_off(test_count);
    Ok(DatasetBundle {
        manifest: SplitManifest {
            seed,
            test_fraction,
            train_count: train.len(),
            test_count: items.len(),
        },
        train,
        test: items,
    })
}

/// One line of the vote log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct LoggedVote {
    item_id: String,
    vote: AnnotationVote,
}

pub const VOTES_PER_ITEM: usize = 3;
pub const ITEMS_FILE: &str = "items.jsonl";
pub const VOTES_FILE: &str = "votes.jsonl";

#[derive(Debug, Clone, Default)]
pub struct StoreSnapshot {
    pub items: Vec<AnnotationItem>,
    index: HashMap<String, usize>,
}

impl StoreSnapshot {
    pub fn get(&self, id: &str) -> Option<&AnnotationItem> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn next_for(&self, annotator: &str) -> Option<&AnnotationItem> {
        self.items
            .iter()
            .find(|i| i.votes.len() < VOTES_PER_ITEM && !i.has_vote_from(annotator))
    }

    pub fn stats(&self) -> StoreStats {
        let resolved: Vec<AnnotationItem> = self.items.iter().filter(|i| i.resolved.is_some()).cloned().collect();
        let mut categories: BTreeMap<ScenarioCategory, u64> = ScenarioCategory::REPORTED.iter().map(|c| (*c, 0)).collect();
        for item in &resolved {
            let res = item.resolved.as_ref().expect("filtered");
            for label in &res.labels {
                if let Ok((_, c)) = classify(true, Some(*label), res.need) {
                    *categories.entry(c).or_default() += 1;
                }
            }
            if let Ok((_, c)) = classify(false, None, res.need) {
                *categories.entry(c).or_default() += 1;
            }
        }
        StoreStats {
            total_items: self.items.len(),
            resolved_items: resolved.len(),
            total_votes: self.items.iter().map(|i| i.votes.len()).sum(),
            agreement: annotator_agreement(&resolved),
            categories,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub total_items: usize,
    pub resolved_items: usize,
    pub total_votes: usize,
    pub agreement: AgreementSummary,
    pub categories: BTreeMap<ScenarioCategory, u64>,
}

/// Items plus an append-only vote log. Writes are serialized and fsynced
/// before they become visible; reads take an immutable snapshot.
pub struct AnnotationStore {
    dir: PathBuf,
    policy: MixedNeedPolicy,
    writer: Mutex<File>,
    snapshot: RwLock<Arc<StoreSnapshot>>,
}

impl AnnotationStore {
    /// Create a store directory holding `items` and an empty vote log.
    pub fn create(dir: &Path, items: &[AnnotationItem]) -> Result<(), ServiceError> {
        std::fs::create_dir_all(dir)?;
        let mut seen = BTreeSet::new();
        for item in items {
            item.check().map_err(|e| ServiceError::BadVote(e.to_string()))?;
            if !seen.insert(item.item_id.as_str()) {
                return Err(ServiceError::Store {
                    path: dir.display().to_string(),
                    reason: format!("duplicate item `{}`", item.item_id),
                });
            }
        }
        let fresh: Vec<AnnotationItem> = items
            .iter()
            .map(|i| AnnotationItem {
                votes: Vec::new(),
                resolved: None,
                ..i.clone()
            })
            .collect();
        write_jsonl(File::create(dir.join(ITEMS_FILE))?, &fresh)?;
        File::create(dir.join(VOTES_FILE))?.sync_all()?;
        Ok(())
    }

    pub fn open(dir: &Path, policy: MixedNeedPolicy) -> Result<Self, ServiceError> {
        let store_err = |reason: String| ServiceError::Store {
            path: dir.display().to_string(),
            reason,
        };
        let items: Vec<AnnotationItem> = read_jsonl(BufReader::new(
            File::open(dir.join(ITEMS_FILE)).map_err(|e| store_err(format!("{ITEMS_FILE}: {e}")))?,
        ))
        .map_err(|e| store_err(e.to_string()))?;
        let votes_path = dir.join(VOTES_FILE);
        let votes: Vec<LoggedVote> = if votes_path.exists() {
            read_jsonl(BufReader::new(File::open(&votes_path)?)).map_err(|e| store_err(e.to_string()))?
        } else {
            Vec::new()
        };
        let mut snap = StoreSnapshot {
            index: items.iter().enumerate().map(|(i, it)| (it.item_id.clone(), i)).collect(),
            items,
        };
        for v in votes {
            apply_vote(&mut snap, &v.item_id, v.vote, policy).map_err(|e| store_err(format!("replaying log: {e}")))?;
        }
        let writer = OpenOptions::new().create(true).append(true).open(&votes_path)?;
        Ok(AnnotationStore {
            dir: dir.to_path_buf(),
            policy,
            writer: Mutex::new(writer),
            snapshot: RwLock::new(Arc::new(snap)),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn snapshot(&self) -> Arc<StoreSnapshot> {
        self.snapshot.read().unwrap().clone()
    }

    /// Validate, durably append, then publish the new state.
    pub fn vote(&self, item_id: &str, vote: AnnotationVote) -> Result<AnnotationItem, ServiceError> {
        let mut writer = self.writer.lock().unwrap();
        let mut next = (*self.snapshot()).clone();
        apply_vote(&mut next, item_id, vote.clone(), self.policy)?;
        let mut line = serde_json::to_string(&LoggedVote {
            item_id: item_id.to_string(),
            vote,
        })
        .expect("vote serializes");
        line.push('\n');
        writer.write_all(line.as_bytes())?;
        writer.sync_data()?;
        let item = next.get(item_id).expect("validated").clone();
        *self.snapshot.write().unwrap() = Arc::new(next);
        Ok(item)
    }

    pub fn export(&self) -> Vec<TrainingRow> {
        export_rows(&self.snapshot().items)
    }
}

fn apply_vote(snap: &mut StoreSnapshot, item_id: &str, vote: AnnotationVote, policy: MixedNeedPolicy) -> Result<(), ServiceError> {
    let idx = *snap
        .index
        .get(item_id)
        .ok_or_else(|| ServiceError::UnknownItem(item_id.to_string()))?;
    let item = &mut snap.items[idx];
    vote.check(item.candidates.len()).map_err(ServiceError::BadVote)?;
    if item.has_vote_from(&vote.annotator_id) {
        return Err(ServiceError::Conflict(format!(
            "annotator `{}` already voted on `{item_id}`",
            vote.annotator_id
        )));
    }
    if item.votes.len() >= VOTES_PER_ITEM {
        return Err(ServiceError::Conflict(format!("item `{item_id}` already has {VOTES_PER_ITEM} votes")));
    }
    item.votes.push(vote);
    if item.votes.len() >= 3 {
        item.resolved = Some(majority_vote(item, policy).map_err(|e| ServiceError::BadVote(e.to_string()))?);
    }
    Ok(())
}

/// What an annotator sees: no other votes and no model identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub trace_window: Trace,
    pub candidates: Vec<String>,
    pub vote_count: usize,
    pub resolved: bool,
}

impl From<&AnnotationItem> for ItemView {
    fn from(item: &AnnotationItem) -> Self {
        let mut trace_window = item.trace_window.clone();
        trace_window.events.sort_by_key(|e| e.time);
        ItemView {
            item_id: item.item_id.clone(),
            trace_window,
            candidates: item.candidates.iter().map(|c| c.description().to_string()).collect(),
            vote_count: item.votes.len(),
            resolved: item.resolved.is_some(),
        }
    }
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownItem(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::BadVote(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        error_response(status, self.to_string())
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

async fn next_item(State(store): State<Arc<AnnotationStore>>, Query(q): Query<NextQuery>) -> Response {
    let Some(annotator) = q.annotator.filter(|a| !a.trim().is_empty()) else {
        return error_response(StatusCode::BAD_REQUEST, "query parameter `annotator` is required");
    };
    let snap = store.snapshot();
    match snap.next_for(&annotator) {
        Some(item) => Json(ItemView::from(item)).into_response(),
        None => error_response(StatusCode::NOT_FOUND, "no items left for this annotator"),
    }
}

async fn get_item(State(store): State<Arc<AnnotationStore>>, UrlPath(id): UrlPath<String>) -> Response {
    match store.snapshot().get(&id) {
        Some(item) => Json(ItemView::from(item)).into_response(),
        None => ServiceError::UnknownItem(id).into_response(),
    }
}

async fn post_vote(State(store): State<Arc<AnnotationStore>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let vote: AnnotationVote = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed vote: {e}")),
    };
    // blocking fsync off the async workers
    let result = tokio::task::spawn_blocking(move || store.vote(&id, vote)).await;
    match result {
        Ok(Ok(item)) => (StatusCode::CREATED, Json(ItemView::from(&item))).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn stats(State(store): State<Arc<AnnotationStore>>) -> Json<StoreStats> {
    Json(store.snapshot().stats())
}

async fn export(State(store): State<Arc<AnnotationStore>>) -> Json<Vec<TrainingRow>> {
    Json(store.export())
}

/// The HTTP API, plus the static UI bundle at `/` when `ui_dir` is given.
pub fn router(store: Arc<AnnotationStore>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/items/next", get(next_item))
        .route("/api/items/{id}", get(get_item))
        .route("/api/items/{id}/votes", post(post_vote))
        .route("/api/stats", get(stats))
        .route("/api/export", get(export))
        .with_state(store);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Bind and serve until ctrl-c.
pub async fn serve(store: Arc<AnnotationStore>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store, ui_dir.as_deref()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
