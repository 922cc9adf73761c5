//! Human intruder-detection sessions served over HTTP.
//!
//! Routes:
//!
//! | method | path                       | body                          |
//! |--------|----------------------------|-------------------------------|
//! | POST   | `/sessions`                | `{"annotator_id", "seed"?}`   |
//! | GET    | `/sessions/{id}/next`      |                               |
//! | POST   | `/sessions/{id}/answers`   | `{"task_id", "choice"}`       |
//! | GET    | `/sessions/{id}/export`    |                               |
//! | GET    | `/export`                  |                               |
//!
//! The optional UI bundle is served under `/ui`.
//!
//! Nothing sent to the client identifies the latent, the decile, the
//! variant or the intruder position; tasks are addressed by a per-session
//! opaque handle. Every accepted answer is appended to `verdicts.jsonl` in
//! the data directory before the response is sent, and sessions are indexed
//! in `sessions.jsonl`, so a restarted server resumes where it stopped.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{self, mix_str, mix_u64};
use crate::task_builder::IntruderTask;
use crate::verdict::Verdict;
use crate::{jsonl, EXAMPLES_PER_TASK};

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("task {0} was already answered; the first answer stands")]
    Duplicate(String),
    #[error("task {0} is not the current task")]
    OutOfOrder(String),
    #[error("choice {0} is outside 1..=5")]
    InvalidChoice(u8),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Storage(#[from] crate::Error),
}

impl AnnotationError {
    fn status(&self) -> StatusCode {
        match self {
            AnnotationError::UnknownSession(_) => StatusCode::NOT_FOUND,
            AnnotationError::Duplicate(_) | AnnotationError::OutOfOrder(_) => StatusCode::CONFLICT,
            AnnotationError::InvalidChoice(_)
            | AnnotationError::Invalid(_)
            | AnnotationError::EmptyTaskSet => StatusCode::UNPROCESSABLE_ENTITY,
            AnnotationError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            AnnotationError::EmptyTaskSet => "empty_task_set",
            AnnotationError::UnknownSession(_) => "unknown_session",
            AnnotationError::Duplicate(_) => "duplicate",
            AnnotationError::OutOfOrder(_) => "out_of_order",
            AnnotationError::InvalidChoice(_) => "invalid_choice",
            AnnotationError::Invalid(_) => "invalid_request",
            AnnotationError::Storage(_) => "storage",
        }
    }
}

impl IntoResponse for AnnotationError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.code(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

type ServiceResult<T> = std::result::Result<T, AnnotationError>;

/// Order tasks so that consecutive tasks come from different latents
/// whenever the counts allow it.
///
/// Tasks are shuffled within each latent; at each step the latent with the
/// most remaining tasks (other than the previous one) goes next, ties broken
/// at random. Returns the order and the number of unavoidable same-latent
/// adjacencies.
pub fn interleave<R: Rng + ?Sized>(tasks: &[&IntruderTask], rng: &mut R) -> (Vec<String>, usize) {
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for t in tasks {
        groups.entry(t.latent_id.as_str()).or_default().push(t.task_id.clone());
    }
    for ids in groups.values_mut() {
        ids.sort();
        rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), rng);
    }
    let mut order = Vec::with_capacity(tasks.len());
    let mut previous: Option<&str> = None;
    let mut adjacent = 0;
    while order.len() < tasks.len() {
        let eligible: Vec<&str> = groups
            .iter()
            .filter(|(l, ids)| !ids.is_empty() && Some(**l) != previous)
            .map(|(l, _)| *l)
            .collect();
        let pool: Vec<&str> = if eligible.is_empty() {
            adjacent += 1;
            groups.iter().filter(|(_, ids)| !ids.is_empty()).map(|(l, _)| *l).collect()
        } else {
            eligible
        };
        let most = pool.iter().map(|l| groups[l].len()).max().expect("tasks remain");
        let top: Vec<&str> = pool.into_iter().filter(|l| groups[l].len() == most).collect();
        let latent = top[rng.random_range(0..top.len())];
        order.push(groups.get_mut(latent).expect("known latent").pop().expect("non-empty"));
        previous = Some(latent);
    }
    (order, adjacent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SessionRecord {
    session_id: String,
    annotator_id: String,
    seed: u64,
    queue: Vec<String>,
    created_at: u64,
}

#[derive(Debug, Clone)]
pub struct AnnotationSession {
    pub session_id: String,
    pub annotator_id: String,
    pub queue: Vec<String>,
    pub responses: Vec<Verdict>,
    pub created_at: u64,
}

impl AnnotationSession {
    fn handle(&self, task_id: &str) -> String {
        format!("{:016x}", mix_str(mix_str(0, &self.session_id), task_id))
    }

    fn current(&self) -> Option<&str> {
        self.queue.get(self.responses.len()).map(String::as_str)
    }
}

/// Returned by `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub total: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub total: usize,
}

/// Returned by `GET /sessions/{id}/next`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum NextTask {
    Task {
        task_id: String,
        examples: Vec<String>,
        progress: Progress,
    },
    Complete {
        progress: Progress,
    },
}

/// Body of `POST /sessions/{id}/answers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub task_id: String,
    pub choice: u8,
}

/// Returned by `POST /sessions/{id}/answers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerAccepted {
    pub accepted: bool,
    pub progress: Progress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    /// Report correctness after each answer. Off by default.
    pub feedback: bool,
    pub ui_dir: Option<PathBuf>,
}

pub struct AnnotationService {
    tasks: HashMap<String, IntruderTask>,
    task_order: Vec<String>,
    sessions: Mutex<BTreeMap<String, AnnotationSession>>,
    log: Mutex<()>,
    data_dir: PathBuf,
    options: ServiceOptions,
}

impl AnnotationService {
    /// Open a service over `tasks`, replaying any state in `data_dir`.
    pub fn open(
        tasks: Vec<IntruderTask>,
        data_dir: &Path,
        options: ServiceOptions,
    ) -> ServiceResult<Self> {
        if tasks.is_empty() {
            return Err(AnnotationError::EmptyTaskSet);
        }
        std::fs::create_dir_all(data_dir)
            .map_err(|e| crate::Error::io(data_dir, e))?;
        let task_order = tasks.iter().map(|t| t.task_id.clone()).collect();
        let tasks: HashMap<String, IntruderTask> =
            tasks.into_iter().map(|t| (t.task_id.clone(), t)).collect();

        let mut sessions = BTreeMap::new();
        let sessions_path = data_dir.join(SESSIONS_FILE);
        if sessions_path.exists() {
            for r in jsonl::read::<SessionRecord>(&sessions_path)? {
                sessions.insert(
                    r.session_id.clone(),
                    AnnotationSession {
                        session_id: r.session_id,
                        annotator_id: r.annotator_id,
                        queue: r.queue,
                        responses: Vec::new(),
                        created_at: r.created_at,
                    },
                );
            }
        }
        let verdicts_path = data_dir.join(VERDICTS_FILE);
        if verdicts_path.exists() {
            for v in jsonl::read::<Verdict>(&verdicts_path)? {
                let Some(session) = v.session_id.as_ref().and_then(|s| sessions.get_mut(s)) else {
                    log::warn!("verdict for task {} has no known session", v.task_id);
                    continue;
                };
                if session.current() == Some(v.task_id.as_str()) {
                    session.responses.push(v);
                }
            }
        }
        Ok(AnnotationService {
            tasks,
            task_order,
            sessions: Mutex::new(sessions),
            log: Mutex::new(()),
            data_dir: data_dir.to_path_buf(),
            options,
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn create_session(&self, annotator_id: &str, seed: u64) -> ServiceResult<SessionCreated> {
        if annotator_id.trim().is_empty() {
            return Err(AnnotationError::Invalid("annotator_id must be non-empty".into()));
        }
        let mut sessions = self.sessions.lock().expect("session lock");
        let ordinal = sessions.len() as u64;
        let session_id = format!(
            "s{:016x}",
            mix_u64(mix_str(seed, annotator_id), ordinal)
        );
        let ordered: Vec<&IntruderTask> = self.task_order.iter().map(|id| &self.tasks[id]).collect();
        let mut rng = seeding::rng_from(mix_str(seed, annotator_id));
        let (queue, adjacent) = interleave(&ordered, &mut rng);
        let mut warnings = Vec::new();
        if adjacent > 0 {
            let msg = format!(
                "{adjacent} consecutive same-latent pairs could not be avoided"
            );
            log::warn!("session {session_id}: {msg}");
            warnings.push(msg);
        }
        let record = SessionRecord {
            session_id: session_id.clone(),
            annotator_id: annotator_id.to_string(),
            seed,
            queue: queue.clone(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        {
            let _guard = self.log.lock().expect("log lock");
            jsonl::append(&self.data_dir.join(SESSIONS_FILE), &record)?;
        }
        let total = queue.len();
        sessions.insert(
            session_id.clone(),
            AnnotationSession {
                session_id: session_id.clone(),
                annotator_id: record.annotator_id,
                queue,
                responses: Vec::new(),
                created_at: record.created_at,
            },
        );
        Ok(SessionCreated {
            session_id,
            total,
            warnings,
        })
    }

    pub fn session(&self, session_id: &str) -> ServiceResult<AnnotationSession> {
        self.sessions
            .lock()
            .expect("session lock")
            .get(session_id)
            .cloned()
            .ok_or_else(|| AnnotationError::UnknownSession(session_id.to_string()))
    }

    pub fn next_task(&self, session_id: &str) -> ServiceResult<NextTask> {
        let session = self.session(session_id)?;
        let progress = Progress {
            answered: session.responses.len(),
            total: session.queue.len(),
        };
        Ok(match session.current() {
            Some(task_id) => NextTask::Task {
                task_id: session.handle(task_id),
                examples: self.tasks[task_id].texts().map(str::to_string).collect(),
                progress,
            },
            None => NextTask::Complete { progress },
        })
    }

    pub fn submit(&self, session_id: &str, handle: &str, choice: u8) -> ServiceResult<AnswerAccepted> {
        if !(1..=EXAMPLES_PER_TASK as u8).contains(&choice) {
            return Err(AnnotationError::InvalidChoice(choice));
        }
        let mut sessions = self.sessions.lock().expect("session lock");
        let session = sessions
            .get_mut(session_id)
            .ok_or_else(|| AnnotationError::UnknownSession(session_id.to_string()))?;
        if session
            .responses
            .iter()
            .any(|v| session.handle(&v.task_id) == handle)
        {
            return Err(AnnotationError::Duplicate(handle.to_string()));
        }
        let current = session
            .current()
            .filter(|id| session.handle(id) == handle)
            .ok_or_else(|| AnnotationError::OutOfOrder(handle.to_string()))?
            .to_string();
        let task = &self.tasks[&current];
        let mut verdict = Verdict::new(task, &session.annotator_id, Some(choice), choice.to_string(), 1);
        verdict.session_id = Some(session.session_id.clone());
        {
            let _guard = self.log.lock().expect("log lock");
            jsonl::append(&self.data_dir.join(VERDICTS_FILE), &verdict)?;
        }
        let correct = verdict.correct;
        session.responses.push(verdict);
        Ok(AnswerAccepted {
            accepted: true,
            progress: Progress {
                answered: session.responses.len(),
                total: session.queue.len(),
            },
            correct: if self.options.feedback { correct } else { None },
        })
    }

    /// Answered verdicts of one session, or of every session.
    pub fn export(&self, session_id: Option<&str>) -> ServiceResult<Vec<Verdict>> {
        let sessions = self.sessions.lock().expect("session lock");
        match session_id {
            Some(id) => sessions
                .get(id)
                .map(|s| s.responses.clone())
                .ok_or_else(|| AnnotationError::UnknownSession(id.to_string())),
            None => Ok(sessions.values().flat_map(|s| s.responses.clone()).collect()),
        }
    }
}

#[derive(Debug, Deserialize)]
struct CreateRequest {
    annotator_id: String,
    #[serde(default)]
    seed: Option<u64>,
}

async fn create(
    State(svc): State<Arc<AnnotationService>>,
    Json(req): Json<CreateRequest>,
) -> ServiceResult<(StatusCode, Json<SessionCreated>)> {
    let seed = req.seed.unwrap_or_else(rand::random);
    Ok((StatusCode::CREATED, Json(svc.create_session(&req.annotator_id, seed)?)))
}

async fn next(
    State(svc): State<Arc<AnnotationService>>,
    UrlPath(id): UrlPath<String>,
) -> ServiceResult<Json<NextTask>> {
    Ok(Json(svc.next_task(&id)?))
}

async fn answer(
    State(svc): State<Arc<AnnotationService>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<Answer>,
) -> ServiceResult<Json<AnswerAccepted>> {
    Ok(Json(svc.submit(&id, &req.task_id, req.choice)?))
}

fn ndjson(verdicts: &[Verdict]) -> ServiceResult<Response> {
    let body = jsonl::to_string(verdicts)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn export_session(
    State(svc): State<Arc<AnnotationService>>,
    UrlPath(id): UrlPath<String>,
) -> ServiceResult<Response> {
    ndjson(&svc.export(Some(&id))?)
}

async fn export_all(State(svc): State<Arc<AnnotationService>>) -> ServiceResult<Response> {
    ndjson(&svc.export(None)?)
}

pub fn router(service: Arc<AnnotationService>) -> Router {
    let mut app = Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/answers", post(answer))
        .route("/sessions/{id}/export", get(export_session))
        .route("/export", get(export_all));
    if let Some(dir) = &service.options.ui_dir {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app.with_state(service)
}

/// Serve until the process is stopped.
pub async fn serve(service: Arc<AnnotationService>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}
