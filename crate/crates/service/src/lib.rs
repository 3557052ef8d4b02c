//! Curation service: serves episodes for review, records annotation edits
//! in an append-only log and runs external annotation jobs whose output
//! lands as pending review.

pub mod api;
pub mod clients;
pub mod edits;
pub mod jobs;
pub mod store;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use demokit_core::config::QcConfig;

use crate::api::AppState;
use crate::clients::RemoteClient;
use crate::jobs::{Clients, JobQueue, QueueSettings};
use crate::store::{Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub port: u16,
    pub data_root: PathBuf,
    pub workers: usize,
    pub client_timeout: Duration,
    pub max_attempts: u32,
    pub snapshot_every: u64,
    pub segmenter_url: Option<String>,
    pub preannotator_url: Option<String>,
    pub tracker_url: Option<String>,
    pub qc: QcConfig,
    pub qc_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            port: 8080,
            data_root: PathBuf::from("data"),
            workers: 2,
            client_timeout: Duration::from_secs(30),
            max_attempts: 3,
            snapshot_every: 20,
            segmenter_url: None,
            preannotator_url: None,
            tracker_url: None,
            qc: QcConfig::default(),
            qc_seed: 0,
        }
    }
}

pub const ENV_VARS: [&str; 11] = [
    "DEMOKIT_PORT",
    "DEMOKIT_DATA_ROOT",
    "DEMOKIT_JOB_WORKERS",
    "DEMOKIT_CLIENT_TIMEOUT_MS",
    "DEMOKIT_JOB_MAX_ATTEMPTS",
    "DEMOKIT_SNAPSHOT_EVERY",
    "DEMOKIT_SEGMENTER_URL",
    "DEMOKIT_PREANNOTATOR_URL",
    "DEMOKIT_TRACKER_URL",
    "DEMOKIT_QC_SUBSETS",
    "DEMOKIT_QC_SAMPLES",
];

fn parse_var<T: std::str::FromStr>(name: &str, value: Option<String>, default: T) -> Result<T, ServiceError> {
    match value {
        None => Ok(default),
        Some(v) => v.trim().parse().map_err(|_| ServiceError::Config(format!("{name}={v:?} is not valid"))),
    }
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self, ServiceError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ServiceError> {
        let d = ServiceConfig::default();
        let url = |k: &str| get(k).filter(|v| !v.trim().is_empty());
        let c = ServiceConfig {
            port: parse_var("DEMOKIT_PORT", get("DEMOKIT_PORT"), d.port)?,
            data_root: get("DEMOKIT_DATA_ROOT").map(PathBuf::from).unwrap_or(d.data_root),
            workers: parse_var("DEMOKIT_JOB_WORKERS", get("DEMOKIT_JOB_WORKERS"), d.workers)?,
            client_timeout: Duration::from_millis(parse_var(
                "DEMOKIT_CLIENT_TIMEOUT_MS",
                get("DEMOKIT_CLIENT_TIMEOUT_MS"),
                d.client_timeout.as_millis() as u64,
            )?),
            max_attempts: parse_var("DEMOKIT_JOB_MAX_ATTEMPTS", get("DEMOKIT_JOB_MAX_ATTEMPTS"), d.max_attempts)?,
            snapshot_every: parse_var("DEMOKIT_SNAPSHOT_EVERY", get("DEMOKIT_SNAPSHOT_EVERY"), d.snapshot_every)?,
            segmenter_url: url("DEMOKIT_SEGMENTER_URL"),
            preannotator_url: url("DEMOKIT_PREANNOTATOR_URL"),
            tracker_url: url("DEMOKIT_TRACKER_URL"),
            qc: QcConfig {
                subset_count: parse_var("DEMOKIT_QC_SUBSETS", get("DEMOKIT_QC_SUBSETS"), d.qc.subset_count)?,
                samples_per_subset: parse_var("DEMOKIT_QC_SAMPLES", get("DEMOKIT_QC_SAMPLES"), d.qc.samples_per_subset)?,
                ..d.qc
            },
            qc_seed: d.qc_seed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.workers == 0 || self.max_attempts == 0 || self.snapshot_every == 0 {
            return Err(ServiceError::Config("workers, max attempts and snapshot interval must be positive".into()));
        }
        if self.client_timeout.is_zero() {
            return Err(ServiceError::Config("client timeout must be positive".into()));
        }
        if self.qc.subset_count == 0 || self.qc.samples_per_subset == 0 {
            return Err(ServiceError::Config("QC subset count and sample size must be positive".into()));
        }
        Ok(())
    }

    /// Remote clients where an endpoint is configured, stubs elsewhere.
    pub fn clients(&self) -> Clients {
        let mut c = Clients::stubs();
        if let Some(u) = &self.segmenter_url {
            c.segmenter = Arc::new(RemoteClient::new(u.clone(), self.client_timeout));
        }
        if let Some(u) = &self.preannotator_url {
            c.pre_annotator = Arc::new(RemoteClient::new(u.clone(), self.client_timeout));
        }
        if let Some(u) = &self.tracker_url {
            c.tracker = Arc::new(RemoteClient::new(u.clone(), self.client_timeout));
        }
        c
    }
}

impl AppState {
    /// Loads the data root and starts the job workers on the current runtime.
    pub async fn open(config: &ServiceConfig, clients: Clients) -> Result<AppState, ServiceError> {
        config.validate()?;
        let store = Arc::new(Store::open(&config.data_root, config.snapshot_every)?);
        let settings = QueueSettings {
            workers: config.workers,
            timeout: config.client_timeout,
            max_attempts: config.max_attempts,
        };
        let jobs = JobQueue::start(store.clone(), clients, settings).await;
        Ok(AppState {
            store,
            jobs,
            qc: config.qc.clone(),
            qc_seed: config.qc_seed,
        })
    }
}

/// Serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::open(&config, config.clients()).await?;
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", config.port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, api::router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides() {
        let vars = [("DEMOKIT_PORT", "9001"), ("DEMOKIT_SEGMENTER_URL", "http://seg:1"), ("DEMOKIT_QC_SUBSETS", "4")];
        let c = ServiceConfig::from_lookup(|k| vars.iter().find(|(n, _)| *n == k).map(|(_, v)| v.to_string())).unwrap();
        assert_eq!(c.port, 9001);
        assert_eq!(c.segmenter_url.as_deref(), Some("http://seg:1"));
        assert_eq!(c.qc.subset_count, 4);
        assert_eq!(c.workers, 2);
        assert!(ServiceConfig::from_lookup(|k| (k == "DEMOKIT_PORT").then(|| "x".to_string())).is_err());
        assert!(ServiceConfig::from_lookup(|k| (k == "DEMOKIT_JOB_WORKERS").then(|| "0".to_string())).is_err());
    }
}
