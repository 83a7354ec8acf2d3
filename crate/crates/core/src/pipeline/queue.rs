//! Review queue persisted as an append-only JSON Lines journal.
//!
//! Each line is one [`JournalRecord`]. Replay applies records in order; a
//! torn final line (crash mid-append) is dropped and truncated away, any
//! other malformed line is an error. Compaction rewrites the live state to a
//! temporary file and renames it over the journal.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::CaseOutcome;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("journal I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("journal line {line} is corrupt: {message}")]
    Corrupt { line: usize, message: String },
    #[error("case {0} is already queued")]
    Duplicate(String),
    #[error("no queued case {0}")]
    Unknown(String),
    #[error("case {0} is already resolved")]
    AlreadyResolved(String),
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Pending,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum LabelDecision {
    Confirmed,
    Overridden { label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum PlanDecision {
    Approved,
    Edited { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub label: LabelDecision,
    #[serde(default)]
    pub plan: Option<PlanDecision>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub case_id: String,
    pub submitted_at: DateTime<Utc>,
    pub outcome: CaseOutcome,
    pub status: ReviewStatus,
    pub resolution: Option<Resolution>,
    pub resolver: Option<String>,
    pub resolved_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum JournalRecord {
    Enqueue {
        item: Box<ReviewItem>,
    },
    Resolve {
        case_id: String,
        resolution: Resolution,
        resolver: String,
        at: DateTime<Utc>,
    },
}

/// In-memory queue state; journal replay folds records into it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueueState {
    items: Vec<ReviewItem>,
    by_id: HashMap<String, usize>,
}

impl QueueState {
    pub fn apply(&mut self, record: JournalRecord) -> Result<(), QueueError> {
        match record {
            JournalRecord::Enqueue { item } => {
                if self.by_id.contains_key(&item.case_id) {
                    return Err(QueueError::Duplicate(item.case_id));
                }
                self.by_id.insert(item.case_id.clone(), self.items.len());
                self.items.push(*item);
            }
            JournalRecord::Resolve {
                case_id,
                resolution,
                resolver,
                at,
            } => {
                let item = self.check_resolvable(&case_id, &resolution, &resolver)?;
                item.status = ReviewStatus::Resolved;
                item.resolution = Some(resolution);
                item.resolver = Some(resolver);
                item.resolved_at = Some(at);
            }
        }
        Ok(())
    }

    fn check_resolvable(
        &mut self,
        case_id: &str,
        resolution: &Resolution,
        resolver: &str,
    ) -> Result<&mut ReviewItem, QueueError> {
        let idx = *self
            .by_id
            .get(case_id)
            .ok_or_else(|| QueueError::Unknown(case_id.to_string()))?;
        let item = &mut self.items[idx];
        if item.status == ReviewStatus::Resolved {
            return Err(QueueError::AlreadyResolved(case_id.to_string()));
        }
        if resolver.trim().is_empty() {
            return Err(QueueError::InvalidResolution("resolver id is empty".into()));
        }
        match &resolution.label {
            LabelDecision::Overridden { label } if label.trim().is_empty() => {
                return Err(QueueError::InvalidResolution("overridden label is empty".into()))
            }
            _ => {}
        }
        match &resolution.plan {
            Some(PlanDecision::Approved) if item.outcome.final_plan().is_none() => {
                return Err(QueueError::InvalidResolution(
                    "case has no plan to approve; submit an edited plan".into(),
                ))
            }
            Some(PlanDecision::Edited { text }) if text.trim().is_empty() => {
                return Err(QueueError::InvalidResolution("edited plan is empty".into()))
            }
            _ => {}
        }
        Ok(item)
    }

    pub fn items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn get(&self, case_id: &str) -> Option<&ReviewItem> {
        self.by_id.get(case_id).map(|&i| &self.items[i])
    }

    pub fn count(&self, status: ReviewStatus) -> usize {
        self.items.iter().filter(|i| i.status == status).count()
    }
}

/// Parses journal bytes. Returns the state and the byte length of the valid
/// prefix, which is shorter than the input only when the last line is torn.
pub fn replay(bytes: &[u8]) -> Result<(QueueState, usize), QueueError> {
    let mut state = QueueState::default();
    let mut offset = 0;
    let mut line_no = 0;
    while offset < bytes.len() {
        line_no += 1;
        let (line, next, terminated) = match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(n) => (&bytes[offset..offset + n], offset + n + 1, true),
            None => (&bytes[offset..], bytes.len(), false),
        };
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            continue;
        }
        match serde_json::from_slice::<JournalRecord>(line) {
            Ok(record) if terminated => state.apply(record)?,
            // An unterminated last line may be a torn write even if it parses.
            Ok(_) => return Ok((state, offset)),
            Err(_) if next == bytes.len() => return Ok((state, offset)),
            Err(e) => {
                return Err(QueueError::Corrupt {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
        offset = next;
    }
    Ok((state, offset))
}

struct Inner {
    state: QueueState,
    writer: BufWriter<File>,
    records: usize,
}

/// Durable review queue. All writes go through one mutex-held writer, so
/// appends and state changes are linearized.
pub struct ReviewQueue {
    path: PathBuf,
    inner: Mutex<Inner>,
    /// Compact once the journal holds this many more records than items.
    pub compact_slack: usize,
}

impl std::fmt::Debug for ReviewQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReviewQueue").field("path", &self.path).finish()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> QueueError + '_ {
    move |source| QueueError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl ReviewQueue {
    /// Opens (or creates) the journal and replays it.
    pub fn open(path: &Path) -> Result<Self, QueueError> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(path)(e)),
        };
        let (state, valid) = replay(&bytes)?;
        if valid < bytes.len() {
            log::warn!(
                "review journal {}: dropping torn final record ({} bytes)",
                path.display(),
                bytes.len() - valid
            );
        }
        let records = bytes[..valid].iter().filter(|&&b| b == b'\n').count();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        file.set_len(valid as u64).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: Mutex::new(Inner {
                state,
                writer: BufWriter::new(file),
                records,
            }),
            compact_slack: 1024,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn append(&self, inner: &mut Inner, record: &JournalRecord) -> Result<(), QueueError> {
        let mut line = serde_json::to_vec(record).expect("journal records serialize");
        line.push(b'\n');
        inner.writer.write_all(&line).map_err(io_err(&self.path))?;
        inner.writer.flush().map_err(io_err(&self.path))?;
        inner.writer.get_ref().sync_data().map_err(io_err(&self.path))?;
        inner.records += 1;
        Ok(())
    }

    /// Validates against the in-memory state, persists, then applies.
    fn commit(&self, record: JournalRecord) -> Result<ReviewItem, QueueError> {
        let mut inner = self.lock();
        let mut next = inner.state.clone();
        let case_id = match &record {
            JournalRecord::Enqueue { item } => item.case_id.clone(),
            JournalRecord::Resolve { case_id, .. } => case_id.clone(),
        };
        next.apply(record.clone())?;
        self.append(&mut inner, &record)?;
        inner.state = next;
        if inner.records > inner.state.items.len() + self.compact_slack {
            if let Err(e) = self.compact_locked(&mut inner) {
                log::warn!("review journal compaction failed: {e}");
            }
        }
        Ok(inner.state.get(&case_id).cloned().expect("committed item exists"))
    }

    pub fn enqueue(&self, outcome: CaseOutcome) -> Result<ReviewItem, QueueError> {
        self.enqueue_at(outcome, Utc::now())
    }

    pub fn enqueue_at(&self, outcome: CaseOutcome, at: DateTime<Utc>) -> Result<ReviewItem, QueueError> {
        let item = ReviewItem {
            case_id: outcome.case_id.clone(),
            submitted_at: at,
            outcome,
            status: ReviewStatus::Pending,
            resolution: None,
            resolver: None,
            resolved_at: None,
        };
        self.commit(JournalRecord::Enqueue { item: Box::new(item) })
    }

    pub fn resolve(
        &self,
        case_id: &str,
        resolution: Resolution,
        resolver: &str,
    ) -> Result<ReviewItem, QueueError> {
        self.commit(JournalRecord::Resolve {
            case_id: case_id.to_string(),
            resolution,
            resolver: resolver.to_string(),
            at: Utc::now(),
        })
    }

    /// Items in submission order, optionally filtered by status.
    pub fn list(&self, status: Option<ReviewStatus>) -> Vec<ReviewItem> {
        self.lock()
            .state
            .items
            .iter()
            .filter(|i| status.is_none_or(|s| i.status == s))
            .cloned()
            .collect()
    }

    pub fn get(&self, case_id: &str) -> Option<ReviewItem> {
        self.lock().state.get(case_id).cloned()
    }

    pub fn counts(&self) -> (usize, usize) {
        let inner = self.lock();
        (
            inner.state.count(ReviewStatus::Pending),
            inner.state.count(ReviewStatus::Resolved),
        )
    }

    pub fn compact(&self) -> Result<(), QueueError> {
        let mut inner = self.lock();
        self.compact_locked(&mut inner)
    }

    /// One enqueue record per item carrying its current state.
    fn compact_locked(&self, inner: &mut Inner) -> Result<(), QueueError> {
        let tmp = self.path.with_extension("jsonl.compact");
        {
            let file = File::create(&tmp).map_err(io_err(&tmp))?;
            let mut w = BufWriter::new(file);
            for item in &inner.state.items {
                let record = JournalRecord::Enqueue {
                    item: Box::new(item.clone()),
                };
                serde_json::to_writer(&mut w, &record).expect("journal records serialize");
                w.write_all(b"\n").map_err(io_err(&tmp))?;
            }
            w.flush().map_err(io_err(&tmp))?;
            w.get_ref().sync_all().map_err(io_err(&tmp))?;
        }
        std::fs::rename(&tmp, &self.path).map_err(io_err(&self.path))?;
        let file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        inner.writer = BufWriter::new(file);
        inner.records = inner.state.items.len();
        Ok(())
    }
}
