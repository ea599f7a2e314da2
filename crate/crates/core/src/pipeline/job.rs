//! Per-video jobs, their on-disk store and a bounded runner.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::{Pipeline, PipelineObserver};
use crate::error::{Error, Result, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Sampling,
    Analyzing,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    /// Forward moves only; `failed` is reachable from any live state.
    pub fn can_advance_to(self, next: JobState) -> bool {
        match (self, next) {
            (s, JobState::Failed) => !s.is_terminal(),
            (JobState::Queued, JobState::Sampling)
            | (JobState::Sampling, JobState::Analyzing)
            | (JobState::Analyzing, JobState::Done) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

impl Progress {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.done as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub stage: Option<Stage>,
    pub triplet: Option<usize>,
    pub message: String,
}

impl From<&Error> for JobError {
    fn from(err: &Error) -> JobError {
        match err {
            Error::Stage { stage, triplet, source } => JobError {
                stage: Some(*stage),
                triplet: Some(*triplet),
                message: source.to_string(),
            },
            other => JobError {
                stage: None,
                triplet: None,
                message: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub video_ref: PathBuf,
    pub state: JobState,
    pub progress: Progress,
    /// Path of the persisted report, relative to the data directory. Present
    /// exactly when the job is done.
    pub report: Option<PathBuf>,
    pub error: Option<JobError>,
    pub created_at: String,
    pub updated_at: String,
}

impl Job {
    pub fn new(id: impl Into<String>, video_ref: impl Into<PathBuf>) -> Job {
        let now = now();
        Job {
            id: id.into(),
            video_ref: video_ref.into(),
            state: JobState::Queued,
            progress: Progress::default(),
            report: None,
            error: None,
            created_at: now.clone(),
            updated_at: now,
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Writes via a temporary file and rename so readers never see partial files.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Jobs and reports under `<data_dir>/jobs/<id>.json` and `<data_dir>/reports/<id>.json`.
#[derive(Debug)]
pub struct JobStore {
    data_dir: PathBuf,
    jobs: RwLock<HashMap<String, Job>>,
}

impl JobStore {
    /// Opens (creating if needed) a store. Jobs left unfinished by an earlier
    /// process are marked failed.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<JobStore> {
        let data_dir = data_dir.into();
        for sub in ["jobs", "reports", "videos"] {
            let dir = data_dir.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let mut jobs = HashMap::new();
        let jobs_dir = data_dir.join("jobs");
        for entry in fs::read_dir(&jobs_dir).map_err(|e| Error::io(&jobs_dir, e))? {
            let path = entry.map_err(|e| Error::io(&jobs_dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut job: Job = crate::error::parse_json(&text)?;
            if !job.state.is_terminal() {
                job.state = JobState::Failed;
                job.error = Some(JobError {
                    stage: None,
                    triplet: None,
                    message: "interrupted by a restart".into(),
                });
                write_atomic(&path, &serde_json::to_vec_pretty(&job)?)?;
            }
            jobs.insert(job.id.clone(), job);
        }
        Ok(JobStore {
            data_dir,
            jobs: RwLock::new(jobs),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn videos_dir(&self) -> PathBuf {
        self.data_dir.join("videos")
    }

    fn job_path(&self, id: &str) -> PathBuf {
        self.data_dir.join("jobs").join(format!("{id}.json"))
    }

    pub fn report_path(&self, id: &str) -> PathBuf {
        self.data_dir.join("reports").join(format!("{id}.json"))
    }

    pub fn create(&self, job: Job) -> Result<Job> {
        if !valid_id(&job.id) {
            return Err(Error::Validation(format!("invalid job id {:?}", job.id)));
        }
        let mut jobs = self.jobs.write().expect("job store lock");
        if jobs.contains_key(&job.id) {
            return Err(Error::State(format!("job {} already exists", job.id)));
        }
        write_atomic(&self.job_path(&job.id), &serde_json::to_vec_pretty(&job)?)?;
        jobs.insert(job.id.clone(), job.clone());
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs.read().expect("job store lock").get(id).cloned()
    }

    pub fn list(&self) -> Vec<Job> {
        let mut all: Vec<Job> = self.jobs.read().expect("job store lock").values().cloned().collect();
        all.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id.cmp(&b.id)));
        all
    }

    /// Applies `f` and persists the result. Writes for all jobs are serialized.
    pub fn update(&self, id: &str, f: impl FnOnce(&mut Job) -> Result<()>) -> Result<Job> {
        let mut jobs = self.jobs.write().expect("job store lock");
        let current = jobs.get(id).ok_or_else(|| Error::NotFound(format!("job {id}")))?;
        let mut next = current.clone();
        f(&mut next)?;
        if next.state != current.state && !current.state.can_advance_to(next.state) {
            return Err(Error::State(format!(
                "job {id} cannot move from {:?} to {:?}",
                current.state, next.state
            )));
        }
        if next.progress.done < current.progress.done {
            return Err(Error::State(format!("job {id} progress cannot decrease")));
        }
        next.updated_at = now();
        write_atomic(&self.job_path(id), &serde_json::to_vec_pretty(&next)?)?;
        jobs.insert(id.to_string(), next.clone());
        Ok(next)
    }

    pub fn advance(&self, id: &str, state: JobState) -> Result<Job> {
        self.update(id, |job| {
            job.state = state;
            Ok(())
        })
    }

    /// Persists the report bytes, then marks the job done.
    pub fn complete(&self, id: &str, report_json: &[u8]) -> Result<Job> {
        write_atomic(&self.report_path(id), report_json)?;
        self.update(id, |job| {
            job.state = JobState::Done;
            job.progress.done = job.progress.total;
            job.report = Some(PathBuf::from("reports").join(format!("{id}.json")));
            Ok(())
        })
    }

    pub fn fail(&self, id: &str, error: &Error) -> Result<Job> {
        self.update(id, |job| {
            job.state = JobState::Failed;
            job.error = Some(JobError::from(error));
            Ok(())
        })
    }

    /// The persisted report of a finished job.
    pub fn report_bytes(&self, id: &str) -> Result<Vec<u8>> {
        let job = self.get(id).ok_or_else(|| Error::NotFound(format!("job {id}")))?;
        if job.state != JobState::Done {
            return Err(Error::State(format!("job {id} is {:?}", job.state)));
        }
        let path = self.report_path(id);
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }
}

struct StoreObserver<'a> {
    store: &'a JobStore,
    id: &'a str,
}

impl PipelineObserver for StoreObserver<'_> {
    fn sampled(&self, triplets: usize) {
        let _ = self.store.update(self.id, |job| {
            job.state = JobState::Analyzing;
            job.progress = Progress {
                done: 0,
                total: triplets,
            };
            Ok(())
        });
    }

    fn progress(&self, done: usize, total: usize) {
        let _ = self.store.update(self.id, |job| {
            job.progress = Progress { done, total };
            Ok(())
        });
    }
}

/// Drives one queued job to a terminal state.
pub fn run_job(store: &JobStore, id: &str, pipeline: &Pipeline) -> Result<Job> {
    let job = store.get(id).ok_or_else(|| Error::NotFound(format!("job {id}")))?;
    if job.state != JobState::Queued {
        return Err(Error::State(format!("job {id} is {:?}, not queued", job.state)));
    }
    store.advance(id, JobState::Sampling)?;
    let observer = StoreObserver { store, id };
    let outcome = pipeline
        .analyze_path(id, &job.video_ref, &observer)
        .and_then(|report| Ok(report.to_json_pretty()?.into_bytes()));
    match outcome {
        Ok(bytes) => {
            // Videos with no triplets never report sampling completion.
            if store.get(id).map(|j| j.state) == Some(JobState::Sampling) {
                store.advance(id, JobState::Analyzing)?;
            }
            store.complete(id, &bytes)
        }
        Err(err) => store.fail(id, &err),
    }
}

/// A counting semaphore for job slots.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock");
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.free.lock().expect("slot lock") += 1;
        self.cv.notify_one();
    }
}

/// Runs submitted jobs on background threads, at most `max_jobs` at a time.
#[derive(Clone)]
pub struct JobRunner {
    store: Arc<JobStore>,
    pipeline: Arc<Pipeline>,
    slots: Arc<Slots>,
}

impl JobRunner {
    pub fn new(store: Arc<JobStore>, pipeline: Arc<Pipeline>, max_jobs: usize) -> JobRunner {
        JobRunner {
            store,
            pipeline,
            slots: Arc::new(Slots {
                free: Mutex::new(max_jobs.max(1)),
                cv: Condvar::new(),
            }),
        }
    }

    pub fn store(&self) -> &Arc<JobStore> {
        &self.store
    }

    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.pipeline
    }

    /// Creates a queued job for `video_ref` and starts it in the background.
    pub fn submit(&self, id: &str, video_ref: impl Into<PathBuf>) -> Result<(Job, JoinHandle<()>)> {
        let job = self.store.create(Job::new(id, video_ref))?;
        let runner = self.clone();
        let id = id.to_string();
        let handle = std::thread::spawn(move || {
            runner.slots.acquire();
            let _ = run_job(&runner.store, &id, &runner.pipeline);
            runner.slots.release();
        });
        Ok((job, handle))
    }
}
