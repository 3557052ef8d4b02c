//! Batch pipeline, quality-control sampling and the `demokit` command line.

pub mod cli;
pub mod corpus;
pub mod io;
pub mod pipeline;
pub mod qc;
pub mod render;

use std::path::PathBuf;

use pipeline::PipelineError;

fn service_error(e: demokit_service::ServiceError) -> PipelineError {
    match e {
        demokit_service::ServiceError::Config(m) => PipelineError::Settings(m),
        other => PipelineError::Stage(other.to_string()),
    }
}

/// Runs the curation service until interrupted. Flags override the
/// environment.
pub fn serve(port: Option<u16>, data_root: Option<PathBuf>) -> Result<i32, PipelineError> {
    let mut config = demokit_service::ServiceConfig::from_env().map_err(service_error)?;
    if let Some(p) = port {
        config.port = p;
    }
    if let Some(d) = data_root {
        config.data_root = d;
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| PipelineError::Stage(e.to_string()))?;
    runtime.block_on(demokit_service::serve(config)).map_err(service_error)?;
    Ok(0)
}
