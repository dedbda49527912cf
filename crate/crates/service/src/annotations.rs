//! The rating queue: generated answers awaiting a 0–1 score, backed by a tasks
//! file and an append-only ratings log.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use palign::io::{read_jsonl, write_jsonl};
use palign::pipeline::{merge_gold, CandidatePair, DialogPair, PreferenceExample};
use serde::{Deserialize, Serialize};

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Rated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub status: TaskStatus,
    pub rating: Option<f64>,
    pub note: Option<String>,
    pub created_at: u64,
    pub rated_at: Option<u64>,
}

/// One line of the ratings log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub task_id: String,
    pub rating: f64,
    #[serde(default)]
    pub note: Option<String>,
    pub rated_at: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum RateError {
    #[error("no task {0}")]
    NotFound(String),
    #[error("task {0} is already rated")]
    AlreadyRated(String),
    #[error("rating {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    Storage(#[from] palign::Error),
}

/// Pending tasks for `candidates`, with ids `{batch}-{index}`.
pub fn tasks_from_candidates(candidates: &[CandidatePair], batch: &str) -> Vec<AnnotationTask> {
    let now = unix_now();
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| AnnotationTask {
            id: format!("{batch}-{i:04}"),
            question: c.question.clone(),
            answer: c.answer.clone(),
            status: TaskStatus::Pending,
            rating: None,
            note: None,
            created_at: now,
            rated_at: None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub rated: usize,
    pub total: usize,
}

#[derive(Debug)]
pub struct AnnotationStore {
    tasks: Vec<AnnotationTask>,
    index: HashMap<String, usize>,
    ratings_log: PathBuf,
}

impl AnnotationStore {
    /// Loads the task file (missing means empty) and replays the ratings log
    /// over it. Log lines for unknown tasks belong to earlier batches and are
    /// skipped; a repeated rating of one task keeps the first.
    pub fn open(tasks_path: &Path, ratings_log: &Path) -> palign::Result<Self> {
        let tasks = if tasks_path.exists() { read_jsonl(tasks_path)? } else { Vec::new() };
        let mut store = Self { tasks: Vec::new(), index: HashMap::new(), ratings_log: ratings_log.to_path_buf() };
        store.set_tasks(tasks);
        if ratings_log.exists() {
            for r in read_jsonl::<RatingRecord>(ratings_log)? {
                if let Some(&i) = store.index.get(&r.task_id) {
                    let t = &mut store.tasks[i];
                    if t.status == TaskStatus::Pending {
                        t.status = TaskStatus::Rated;
                        t.rating = Some(r.rating);
                        t.note = r.note;
                        t.rated_at = Some(r.rated_at);
                    }
                }
            }
        }
        Ok(store)
    }

    fn set_tasks(&mut self, tasks: Vec<AnnotationTask>) {
        self.index = tasks.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        self.tasks = tasks;
    }

    /// Replaces the queue with a new batch and writes it to `tasks_path`.
    pub fn replace(&mut self, tasks_path: &Path, tasks: Vec<AnnotationTask>) -> palign::Result<()> {
        write_jsonl(tasks_path, &tasks)?;
        self.set_tasks(tasks);
        Ok(())
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    pub fn next_pending(&self) -> Option<&AnnotationTask> {
        self.tasks.iter().find(|t| t.status == TaskStatus::Pending)
    }

    pub fn progress(&self) -> Progress {
        Progress { rated: self.tasks.iter().filter(|t| t.status == TaskStatus::Rated).count(), total: self.tasks.len() }
    }

    /// Records a rating. The log line is synced before the task changes state.
    pub fn rate(&mut self, id: &str, rating: f64, note: Option<String>) -> Result<&AnnotationTask, RateError> {
        if !(0.0..=1.0).contains(&rating) {
            return Err(RateError::OutOfRange(rating));
        }
        let &i = self.index.get(id).ok_or_else(|| RateError::NotFound(id.to_string()))?;
        if self.tasks[i].status == TaskStatus::Rated {
            return Err(RateError::AlreadyRated(id.to_string()));
        }
        let record = RatingRecord { task_id: id.to_string(), rating, note, rated_at: unix_now() };
        let mut line = serde_json::to_string(&record).map_err(palign::Error::from)?;
        line.push('\n');
        let mut log = OpenOptions::new().create(true).append(true).open(&self.ratings_log).map_err(palign::Error::from)?;
        log.write_all(line.as_bytes()).map_err(palign::Error::from)?;
        log.sync_all().map_err(palign::Error::from)?;
        let t = &mut self.tasks[i];
        t.status = TaskStatus::Rated;
        t.rating = Some(record.rating);
        t.note = record.note;
        t.rated_at = Some(record.rated_at);
        Ok(t)
    }

    /// Rated tasks merged with the gold pairs at score 1.0.
    pub fn export(&self, gold: &[DialogPair]) -> Vec<PreferenceExample> {
        let rated: Vec<PreferenceExample> = self
            .tasks
            .iter()
            .filter_map(|t| {
                t.rating.map(|score| PreferenceExample { question: t.question.clone(), answer: t.answer.clone(), score })
            })
            .collect();
        merge_gold(&rated, gold)
    }
}
