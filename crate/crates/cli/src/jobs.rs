//! Job records and job execution for the service worker.

use std::collections::BTreeMap;

use daxs_core::tracks::{extract_tracks, SeedCurves};
use daxs_core::SpectralImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{
    run_align_average, run_fit, run_sign_compare, AnticrossingSpec, PipelineConfig,
};
use crate::store::{content_hash, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    Fit,
    SignCompare,
    AlignAverage,
}

impl JobKind {
    pub fn min_images(self) -> usize {
        match self {
            JobKind::Fit | JobKind::SignCompare => 1,
            JobKind::AlignAverage => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn can_become(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Running, JobStatus::Done | JobStatus::Failed)
        )
    }

    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("job status cannot change from {from:?} to {to:?}")]
pub struct TransitionError {
    pub from: JobStatus,
    pub to: JobStatus,
}

/// Stored references to everything a job reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobInputs {
    pub image_ids: Vec<String>,
    /// Artifact holding the seed curves document.
    pub seeds: String,
    /// Artifact holding the kind-specific configuration.
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub inputs: JobInputs,
    /// Output name to artifact name, or to image id for `image`.
    pub result: Option<BTreeMap<String, String>>,
    pub error: Option<String>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
}

/// Jobs are identified by what they compute, so resubmitting the same
/// inputs names the same job.
pub fn job_id(kind: JobKind, inputs: &JobInputs) -> String {
    let key = serde_json::to_vec(&(kind, inputs)).expect("job inputs serialize");
    content_hash(&key)
}

impl JobRecord {
    pub fn new(kind: JobKind, inputs: JobInputs, now: u64) -> Self {
        JobRecord {
            job_id: job_id(kind, &inputs),
            kind,
            status: JobStatus::Queued,
            inputs,
            result: None,
            error: None,
            created_at: now,
            started_at: None,
            finished_at: None,
        }
    }

    pub fn advance(&mut self, next: JobStatus, now: u64) -> Result<(), TransitionError> {
        if !self.status.can_become(next) {
            return Err(TransitionError {
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        match next {
            JobStatus::Running => self.started_at = Some(now),
            _ => self.finished_at = Some(now),
        }
        Ok(())
    }

    /// Main JSON output of a finished job.
    pub fn primary_output(&self) -> Option<&str> {
        let key = match self.kind {
            JobKind::Fit => "fit",
            JobKind::SignCompare | JobKind::AlignAverage => "report",
        };
        self.result.as_ref()?.get(key).map(String::as_str)
    }
}

fn load_artifact(store: &Store, name: &str) -> Result<String, String> {
    let bytes = store
        .artifact(name)
        .map_err(|e| e.to_string())?
        .ok_or_else(|| format!("artifact {name} is missing"))?;
    String::from_utf8(bytes).map_err(|e| e.to_string())
}

fn load_images(store: &Store, ids: &[String]) -> Result<Vec<(String, SpectralImage)>, String> {
    ids.iter()
        .map(|id| {
            let bytes = store
                .image(id)
                .map_err(|e| e.to_string())?
                .ok_or_else(|| format!("image {id} is missing"))?;
            let text = String::from_utf8(bytes).map_err(|e| e.to_string())?;
            let img = SpectralImage::from_json(&text).map_err(|e| format!("image {id}: {e}"))?;
            Ok((id.clone(), img))
        })
        .collect()
}

fn put_json<T: Serialize>(store: &Store, value: &T) -> Result<String, String> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| e.to_string())?;
    store
        .put_artifact(&bytes, "json")
        .map_err(|e| e.to_string())
}

/// Runs a job to completion and stores its outputs.
pub fn execute(store: &Store, rec: &JobRecord) -> Result<BTreeMap<String, String>, String> {
    let images = load_images(store, &rec.inputs.image_ids)?;
    let seeds = SeedCurves::from_json(&load_artifact(store, &rec.inputs.seeds)?)
        .map_err(|e| e.to_string())?;
    let config = load_artifact(store, &rec.inputs.config)?;
    let mut out = BTreeMap::new();
    match rec.kind {
        JobKind::Fit => {
            let cfg: PipelineConfig = serde_json::from_str(&config).map_err(|e| e.to_string())?;
            let run = run_fit(&images[0].1, &seeds, &cfg).map_err(|e| e.to_string())?;
            let csv = run.extraction.tracks.to_csv().map_err(|e| e.to_string())?;
            out.insert(
                "tracks".into(),
                store
                    .put_artifact(csv.as_bytes(), "csv")
                    .map_err(|e| e.to_string())?,
            );
            out.insert("fit".into(), put_json(store, &run.fit)?);
        }
        JobKind::SignCompare => {
            let cfg: PipelineConfig = serde_json::from_str(&config).map_err(|e| e.to_string())?;
            let scans = images
                .iter()
                .map(|(_, img)| extract_tracks(img, &seeds, &cfg.extraction).map(|ex| ex.tracks))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let report = run_sign_compare(&scans, &cfg.fit, cfg.extraction.linewidth)
                .map_err(|e| e.to_string())?;
            if let Some(budget) = &report.budget {
                let csv = budget.to_csv().map_err(|e| e.to_string())?;
                out.insert(
                    "budget".into(),
                    store
                        .put_artifact(csv.as_bytes(), "csv")
                        .map_err(|e| e.to_string())?,
                );
            }
            out.insert("report".into(), put_json(store, &report)?);
        }
        JobKind::AlignAverage => {
            let spec: AnticrossingSpec =
                serde_json::from_str(&config).map_err(|e| e.to_string())?;
            let (avg, report) =
                run_align_average(&images, &seeds, &spec).map_err(|e| e.to_string())?;
            let doc = avg.to_json().map_err(|e| e.to_string())?;
            out.insert(
                "image".into(),
                store.put_image(doc.as_bytes()).map_err(|e| e.to_string())?,
            );
            out.insert("report".into(), put_json(store, &report)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> JobInputs {
        JobInputs {
            image_ids: vec!["a".into()],
            seeds: "s.json".into(),
            config: "c.json".into(),
        }
    }

    #[test]
    fn status_moves_only_forward() {
        use JobStatus::*;
        let all = [Queued, Running, Done, Failed];
        for from in all {
            for to in all {
                let ok = matches!(
                    (from, to),
                    (Queued, Running) | (Running, Done) | (Running, Failed)
                );
                assert_eq!(from.can_become(to), ok, "{from:?} -> {to:?}");
            }
        }
    }

    #[test]
    fn advancing_records_timestamps() {
        let mut rec = JobRecord::new(JobKind::Fit, inputs(), 10);
        assert!(rec.advance(JobStatus::Done, 11).is_err());
        rec.advance(JobStatus::Running, 12).unwrap();
        rec.advance(JobStatus::Failed, 13).unwrap();
        assert_eq!((rec.started_at, rec.finished_at), (Some(12), Some(13)));
        assert_eq!(
            rec.advance(JobStatus::Running, 14),
            Err(TransitionError {
                from: JobStatus::Failed,
                to: JobStatus::Running
            })
        );
    }

    #[test]
    fn identical_inputs_share_a_job_id() {
        let a = JobRecord::new(JobKind::Fit, inputs(), 1);
        let b = JobRecord::new(JobKind::Fit, inputs(), 2);
        let c = JobRecord::new(JobKind::SignCompare, inputs(), 1);
        assert_eq!(a.job_id, b.job_id);
        assert_ne!(a.job_id, c.job_id);
    }

    #[test]
    fn kinds_use_kebab_case() {
        assert_eq!(
            serde_json::to_string(&JobKind::AlignAverage).unwrap(),
            "\"align-average\""
        );
        assert_eq!(
            serde_json::from_str::<JobKind>("\"sign-compare\"").unwrap(),
            JobKind::SignCompare
        );
    }
}
